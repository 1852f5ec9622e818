"""Command-line pipeline: fit, score, attack, train-detector, eval and incremental updates.

Exit codes: 0 on success, 2 on a usage error, 1 on a data error (the message
goes to standard error).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import attacks, baselines, ensemble, fileio, gda, incremental, metrics, plotting, refnet, synthetic
from .errors import DetectorError
from .gda import FeatureMatrix

logger = logging.getLogger("mahalanobis_ood")


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _config(args) -> dict:
    config = fileio.load_config(args.config) if getattr(args, "config", None) else fileio.load_config()
    if getattr(args, "seed", None) is not None:
        config["seed"] = args.seed
    metrics.select_columns(config["metrics"])  # fail before any long run
    return config


def _cv(config: dict) -> ensemble.CvConfig:
    cv = config["cv"]
    return ensemble.CvConfig(cv["outer_folds"], cv["inner_folds"], tuple(cv["l2_grid"]),
                             cv["iterations"], cv["step"], config["seed"])


def _load_net(path) -> refnet.RefNet:
    return refnet.from_dict(fileio.load_json(path))


def _write_reports(reports: dict, args, config: dict | None = None) -> None:
    """Table on stdout, plus the optional JSON and delimited files."""
    columns = config["metrics"] if config else None
    sys.stdout.write(metrics.format_table(reports, columns))
    if getattr(args, "out", None):
        Path(args.out).write_text(metrics.reports_to_json(reports, config))
    if getattr(args, "delimited", None):
        Path(args.delimited).write_text(metrics.format_delimited(reports, args.sep, columns))


def _figures(figdir, curves: dict[str, tuple[np.ndarray, np.ndarray]]) -> None:
    figdir = Path(figdir)
    plotting.roc_figure(curves, figdir / "roc.png")
    plotting.pr_figure(curves, figdir / "pr.png")
    for name, (scores, labels) in curves.items():
        plotting.score_histogram(scores[labels], scores[~labels], figdir / f"hist_{name}.png", title=name)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    config = _config(args)
    setup = synthetic.build_setup(synthetic.SyntheticConfig.from_run_config(config))
    out = Path(args.outdir or config["paths"]["outdir"])
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "val", "test", "ood_val", "ood_test"):
        fileio.write_features(out / f"{name}.mdfv", getattr(setup, name))
    print(f"wrote 5 splits to {out}")
    return 0


def cmd_train_net(args) -> int:
    data = fileio.read_features(args.train)
    if data.labels is None:
        raise DetectorError("training data needs labels")
    classes = int(data.labels.max()) + 1
    net = refnet.RefNet.init([data.d, *args.hidden, classes], seed=args.seed)
    cfg = refnet.TrainConfig(args.epochs, args.batch_size, args.learning_rate, args.momentum, args.seed)
    net = refnet.train(net, data, cfg)
    fileio.save_json(args.out, refnet.to_dict(net))
    acc = float(np.mean(net.predict(data.values) == data.labels))
    print(f"training accuracy {acc:.4f}")
    return 0


def cmd_dump_features(args) -> int:
    net = _load_net(args.net)
    data = fileio.read_features(args.input)
    layer = args.layer if args.layer >= 0 else net.num_taps + args.layer
    fileio.write_features(args.out, FeatureMatrix(net.taps(data.values, layer), data.labels))
    return 0


def cmd_fit(args) -> int:
    data = fileio.read_features(args.features)
    model = gda.fit(data, rel_ridge=args.rel_ridge)
    fileio.save_json(args.out, gda.to_dict(model))
    print(f"fit {model.num_classes} classes in {model.dim} dimensions")
    return 0


def cmd_score(args) -> int:
    data = fileio.read_features(args.features)
    if args.detector:
        if not args.net:
            raise DetectorError("--detector needs --net")
        det = ensemble.EnsembleDetector.from_dict(fileio.load_json(args.detector))
        scores = det.score(_load_net(args.net), data.values)
    else:
        model = gda.from_dict(fileio.load_json(args.model))
        scores = gda.confidence_score(model, data.values)
    labels = None if args.positive is None else np.full(data.n, args.positive == 1)
    fileio.write_scores(args.out, np.atleast_1d(scores), labels)
    return 0


def cmd_attack(args) -> int:
    net = _load_net(args.net)
    clip = tuple(args.clip) if args.clip else None
    if args.method == "garbage":
        if not args.models:
            raise DetectorError("garbage attack needs --models")
        models = [gda.from_dict(m) for m in fileio.load_json(args.models)["layer_models"]]
        cfg = attacks.GarbageConfig(target_class=args.target, step=args.step, iterations=args.iterations,
                                    layers=tuple(args.layers) if args.layers else None,
                                    init_scale=args.init_scale, seed=args.seed, clip=clip)
        result = attacks.garbage_attack(net, models, cfg, n=args.n)
        out = FeatureMatrix(result.x, np.full(result.x.shape[0], args.target))
        print(f"mean distance {result.distances[0].mean():.6g} -> {result.final_distance.mean():.6g}")
    else:
        data = fileio.read_features(args.input)
        if args.method == "noisy":
            x = attacks.noisy(data.values, args.eps, seed=args.seed, clip=clip)
        elif data.labels is None:
            raise DetectorError(f"{args.method} needs labelled inputs")
        elif args.method == "fgsm":
            x = attacks.fgsm(net, data.values, data.labels, args.eps, clip)
        else:
            cfg = attacks.AttackConfig(args.eps, args.eps, args.alpha or args.eps / 10, args.iterations, clip)
            x = attacks.bim(net, data.values, data.labels, cfg.eps_bim, cfg.alpha_bim, cfg.bim_iters, clip)
        out = FeatureMatrix(x, data.labels)
        if data.labels is not None:
            print(f"accuracy {np.mean(net.predict(data.values) == data.labels):.4f} -> "
                  f"{np.mean(net.predict(x) == data.labels):.4f}")
    fileio.write_features(args.out, out)
    return 0


def cmd_train_detector(args) -> int:
    config = _config(args)
    net = _load_net(args.net)
    train = fileio.read_features(args.train)
    models = ensemble.fit_layer_models(net, train, rel_ridge=config["gda"]["rel_ridge"])
    pos = np.vstack([fileio.read_features(p).values for p in args.pos])
    neg = np.vstack([fileio.read_features(p).values for p in args.neg])
    grid = args.eps_grid if args.eps_grid is not None else config["preprocess"]["eps_grid"]
    det = ensemble.fit_detector(net, models, pos, neg, grid=grid, cfg=_cv(config))
    fileio.save_json(args.out, det.to_dict())
    print(f"eps {det.eps:g}  l2 {det.l2:g}  validation auroc {det.cv_auroc:.4f}")
    return 0


def cmd_eval(args) -> int:
    if args.scores:
        scores, labels = fileio.read_scores(args.scores)
        if labels is None:
            raise DetectorError(f"{args.scores} has no is_positive column")
    else:
        pos, _ = fileio.read_scores(args.pos)
        neg, _ = fileio.read_scores(args.neg)
        scores = np.r_[pos, neg]
        labels = np.r_[np.ones(pos.size, bool), np.zeros(neg.size, bool)]
    reports = {args.name: metrics.evaluate(scores, labels)}
    _write_reports(reports, args)
    if args.figdir:
        _figures(args.figdir, {args.name: (scores, labels)})
    return 0


def cmd_incr_add(args) -> int:
    doc = fileio.load_json(args.model)
    state = incremental.IncrementalState.from_dict(doc)
    state = incremental.add_class(state, fileio.read_features(args.features))
    fileio.save_json(args.out, state.to_dict())
    print(f"model now has {state.num_classes} classes")
    return 0


def cmd_incr_eval(args) -> int:
    model = gda.from_dict(fileio.load_json(args.model))
    base, new = fileio.read_features(args.base_test), fileio.read_features(args.new_test)
    curves = {m: incremental.sweep_auc(model, base, new, args.num_base, m) for m in args.metrics}
    for m, (_, auc) in curves.items():
        print(f"{m}{args.sep}{auc!r}")
    if args.figdir:
        plotting.sweep_figure(curves, Path(args.figdir) / "sweep.png")
    return 0


def cmd_demo(args) -> int:
    config = _config(args)
    setup = synthetic.build_setup(synthetic.SyntheticConfig.from_run_config(config))
    cv = _cv(config)
    ood = synthetic.run_ood(setup, cv, config["preprocess"]["eps_grid"], config["odin"]["temperatures"])
    reports = dict(ood.reports)
    if args.adversarial:
        att = config["attack"]
        adv = synthetic.run_adversarial(setup, att["eps_fraction"], att["bim_iters"], cv)
        reports.update({f"adv_{k}": v for k, v in adv.reports.items()})
        g = config["garbage"]
        garbage = synthetic.run_garbage(setup, ood.detector, g["n"], g["target_class"], g["iterations"], g["step"])
        reports["garbage"] = garbage.report
        print(f"clean accuracy {adv.clean_accuracy:.4f}  fgsm {adv.fgsm_accuracy:.4f}  bim {adv.bim_accuracy:.4f}")
    print(f"test accuracy {setup.accuracy:.4f}  selected eps {ood.detector.eps:g}  "
          f"odin T={ood.odin.temperature:g} eps={ood.odin.eps:g}")
    _write_reports(reports, args, config)
    if args.figdir:
        net, xin, xout = setup.net, setup.test.values, setup.ood_test.values
        lab = np.r_[np.ones(len(xin), bool), np.zeros(len(xout), bool)]
        _figures(args.figdir, {
            "baseline": (np.r_[baselines.max_softmax(net, xin), baselines.max_softmax(net, xout)], lab),
            "mahalanobis_full": (np.r_[ood.detector.score(net, xin), ood.detector.score(net, xout)], lab),
        })
        stream = synthetic.class_stream(config["seed"])
        state = incremental.start(gda.fit(stream.base_train))
        for samples in stream.new_train:
            state = incremental.add_class(state, samples)
        num_base = synthetic.StreamConfig().num_base
        plotting.sweep_figure({m: incremental.sweep_auc(state.model, stream.base_test, stream.new_test, num_base, m)
                               for m in ("mahalanobis", "euclidean")}, Path(args.figdir) / "sweep.png")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mahalanobis-ood", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, seed=True, config=False, report=False):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(func=func)
        if seed:
            sp.add_argument("--seed", type=int, default=None if config else 7)
        if config:
            sp.add_argument("--config", help="TOML run configuration")
        if report:
            sp.add_argument("--out", help="write the report JSON here")
            sp.add_argument("--delimited", help="write a delimited table here")
            sp.add_argument("--sep", default=",", help="field separator for --delimited")
            sp.add_argument("--figdir", help="render figures into this directory")
        return sp

    sp = add("gen-data", cmd_gen_data, "write the seeded synthetic splits", config=True)
    sp.add_argument("--outdir", help="defaults to paths.outdir of the config")

    sp = add("train-net", cmd_train_net, "train the reference MLP")
    sp.add_argument("--train", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--hidden", type=_ints, default=[32, 32])
    sp.add_argument("--epochs", type=int, default=50)
    sp.add_argument("--batch-size", type=int, default=64)
    sp.add_argument("--learning-rate", type=float, default=0.05)
    sp.add_argument("--momentum", type=float, default=0.9)

    sp = add("dump-features", cmd_dump_features, "write one tap's features", seed=False)
    sp.add_argument("--net", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--layer", type=int, default=-1, help="tap index; negative counts from the end")
    sp.add_argument("--out", required=True)

    sp = add("fit", cmd_fit, "fit class means and the tied covariance", seed=False)
    sp.add_argument("--features", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--rel-ridge", type=float, default=1e-6)

    sp = add("score", cmd_score, "Mahalanobis confidence score per row", seed=False)
    sp.add_argument("--features", required=True, help="features (with --model) or raw inputs (with --detector)")
    group = sp.add_mutually_exclusive_group(required=True)
    group.add_argument("--model")
    group.add_argument("--detector")
    sp.add_argument("--net")
    sp.add_argument("--positive", type=int, choices=(0, 1), help="also write an is_positive column")
    sp.add_argument("--out", required=True)

    sp = add("attack", cmd_attack, "generate FGSM, BIM, noisy or garbage inputs")
    sp.add_argument("--net", required=True)
    sp.add_argument("--method", choices=("fgsm", "bim", "noisy", "garbage"), required=True)
    sp.add_argument("--input")
    sp.add_argument("--eps", type=float, default=0.25)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--iterations", type=int, default=20)
    sp.add_argument("--clip", type=float, nargs=2, metavar=("LO", "HI"))
    sp.add_argument("--models", help="detector JSON with layer models (garbage)")
    sp.add_argument("--target", type=int, default=0)
    sp.add_argument("--step", type=float, default=0.1)
    sp.add_argument("--layers", type=_ints)
    sp.add_argument("--init-scale", type=float, default=1.0)
    sp.add_argument("-n", type=int, default=100)
    sp.add_argument("--out", required=True)

    sp = add("train-detector", cmd_train_detector, "fit per-tap Gaussians and the layer weights", config=True)
    sp.add_argument("--net", required=True)
    sp.add_argument("--train", required=True, help="labelled training inputs for the per-tap Gaussians")
    sp.add_argument("--pos", nargs="+", required=True, help="in-distribution validation inputs")
    sp.add_argument("--neg", nargs="+", required=True, help="negative validation inputs")
    sp.add_argument("--eps-grid", type=_floats)
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "detection metrics from score files", seed=False, report=True)
    group = sp.add_mutually_exclusive_group(required=True)
    group.add_argument("--scores", help="score file with an is_positive column")
    group.add_argument("--pos", help="scores of in-distribution samples")
    sp.add_argument("--neg", help="scores of negative samples")
    sp.add_argument("--name", default="detector")

    sp = add("incr-add", cmd_incr_add, "append one class to a fitted model", seed=False)
    sp.add_argument("--model", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--out", required=True)

    sp = add("incr-eval", cmd_incr_eval, "base/new bias-sweep AUC", seed=False)
    sp.add_argument("--model", required=True)
    sp.add_argument("--base-test", required=True)
    sp.add_argument("--new-test", required=True)
    sp.add_argument("--num-base", type=int, required=True)
    sp.add_argument("--metrics", type=lambda s: s.split(","), default=["mahalanobis", "euclidean"])
    sp.add_argument("--sep", default=",")
    sp.add_argument("--figdir")

    sp = add("demo", cmd_demo, "synthetic end-to-end run", config=True, report=True)
    sp.add_argument("--adversarial", action="store_true", help="also run the FGSM/BIM and garbage experiments")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "eval" and args.pos and not args.neg:
        parser.print_usage(sys.stderr)
        print("mahalanobis-ood eval: --pos needs --neg", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
