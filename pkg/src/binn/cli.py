"""Command-line surface: train, ensemble, eval, perturb, analyze, export.

Every run writes exactly one run-manifest.json next to its outputs; all
metrics land in CSV files with frozen column names (see README). Exit
codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import subprocess
import sys
import time

import numpy as np

from . import __version__, analysis, datio, ensemble
from .errors import DataError, EnsembleError, NumericalError, ShapeError
from .nn.config import config_hash, parse_config


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _git_describe():
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
        )
        return out.stdout.strip() or "unknown"
    except OSError:
        return "unknown"


def _write_manifest(out_dir, args, seeds, outputs, started, extra=None):
    manifest = {
        "command": " ".join(map(str, sys.argv)),
        "argv": [str(a) for a in vars(args).get("_argv", [])],
        "package_version": __version__,
        "git_describe": _git_describe(),
        "seeds": seeds,
        "started_unix": started,
        "duration_s": time.time() - started,
        "outputs": sorted(str(o) for o in outputs),
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, "run-manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _print_table(header, rows):
    cells = [[str(c) for c in r] for r in [header, *rows]]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    for i, r in enumerate(cells):
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        if i == 0:
            print("  ".join("-" * w for w in widths))


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return x


def _load_config(path):
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as e:
        raise DataError(f"cannot read config {path}: {e}") from None


def _load_dataset(args) -> tuple[datio.Dataset, datio.Dataset]:
    kind = args.data
    if kind == "blobs":
        ds = datio.make_toy(datio.ToySpec(
            "gaussian_blobs", args.data_n, args.data_classes,
            dim=2, noise=args.data_noise, seed=args.data_seed,
        ))
    elif kind == "blobs-img":
        ds = datio.make_blob_images(
            args.data_n, args.data_classes, noise=args.data_noise,
            seed=args.data_seed, size=args.image_size,
        )
    elif kind == "rings":
        ds = datio.make_toy(datio.ToySpec(
            "xor_rings", args.data_n, 2, noise=args.data_noise, seed=args.data_seed,
        ))
    elif kind == "idx":
        paths = args.data_path.split(",") if args.data_path else []
        if not 1 <= len(paths) <= 2:
            raise DataError("--data idx needs --data-path IMAGES[,LABELS]")
        try:
            ds = datio.load_idx(*paths, class_count=args.data_classes)
        except OSError as e:
            raise DataError(str(e)) from None
    elif kind == "cifar10":
        if not args.data_path:
            raise DataError("--data cifar10 needs --data-path FILE")
        try:
            ds = datio.load_cifar10_bin(args.data_path)
        except OSError as e:
            raise DataError(str(e)) from None
    else:
        raise DataError(f"unknown dataset kind {kind!r}")
    n_train = int(len(ds) * args.train_frac)
    return datio.split_dataset(ds, n_train)


def _add_data_flags(p):
    p.add_argument("--data", default="blobs-img",
                   help="blobs | blobs-img | rings | idx | cifar10")
    p.add_argument("--data-path", default=None, help="file path(s) for idx/cifar10")
    p.add_argument("--data-n", type=int, default=2000)
    p.add_argument("--data-classes", type=int, default=4)
    p.add_argument("--data-noise", type=float, default=0.1)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=8)
    p.add_argument("--train-frac", type=float, default=0.75)


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--optimizer", default="adam", choices=["adam", "sgd"])
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--no-clip", action="store_true", help="disable shadow-weight clipping")


def _member_spec(args):
    return ensemble.MemberTrainSpec(
        epochs=args.epochs, batch_size=args.batch_size,
        optimizer=args.optimizer, lr=args.lr, clip_weights=not args.no_clip,
    )


def _load_model(path):
    if os.path.isdir(path):
        return ensemble.load_ensemble(path)
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from None
    if blob[:4] == datio.PACKED_MAGIC:
        return datio.load_packed_bytes(blob)
    return datio.load_checkpoint_bytes(blob)


# ----------------------------------------------------------------- commands


def cmd_train(args):
    started = time.time()
    cfg = _load_config(args.config)
    train, test = _load_dataset(args)
    net, hist = ensemble.train_member(
        cfg, train.images, train.labels,
        u=ensemble.SampleWeights.uniform(len(train)),
        seed_seq=ensemble.member_seed(args.seed, 0),
        spec=_member_spec(args),
        eval_images=test.images, eval_labels=test.labels,
    )
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "checkpoint.ckpt")
    datio.save_checkpoint(net, ckpt)
    metrics = os.path.join(args.out, "metrics.csv")
    rows = [
        (e, _fmt(hist.train_loss[e]), _fmt(hist.test_accuracy[e]))
        for e in range(len(hist.train_loss))
    ]
    _write_csv(metrics, ["epoch", "train_loss", "test_accuracy"], rows)
    _write_manifest(args.out, args, {"seed": args.seed, "data_seed": args.data_seed},
                    [ckpt, metrics], started, {"config_hash": config_hash(cfg)})
    final = hist.test_accuracy[-1] if hist.test_accuracy else float("nan")
    print(f"trained {cfg.name}: epochs={len(hist.train_loss)} test_accuracy={final:.4f}")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_ensemble_train(args):
    started = time.time()
    cfg = _load_config(args.config)
    train, test = _load_dataset(args)
    spec = _member_spec(args)
    mode = {"indep": "independent", "warm": "warm_restart"}[args.mode]
    kw = dict(
        k=args.k, mode=mode, seed=args.seed, spec=spec,
        eval_images=test.images, eval_labels=test.labels,
        track_ensemble_accuracy=True,
    )
    if args.strategy == "bag":
        model, info = ensemble.train_bagging(cfg, train.images, train.labels, **kw)
    else:
        model, info = ensemble.train_boosting(cfg, train.images, train.labels, **kw)
    model.rule = args.rule
    os.makedirs(args.out, exist_ok=True)
    ensemble.save_ensemble(model, args.out)
    metrics = os.path.join(args.out, "metrics.csv")
    rows = []
    ens_acc = info.get("ensemble_accuracy", [])
    i = 0
    for mi, hist in enumerate(info["histories"]):
        for e in range(len(hist.train_loss)):
            ens_col = _fmt(ens_acc[i]) if i < len(ens_acc) else ""
            rows.append((mi, e, _fmt(hist.train_loss[e]),
                         _fmt(hist.test_accuracy[e]) if hist.test_accuracy else "", ens_col))
            i += 1
    _write_csv(
        metrics,
        ["member", "epoch", "train_loss", "test_accuracy", "ensemble_test_accuracy"],
        rows,
    )
    ens_test = accuracy_like(model, test.images, test.labels, args.rule)
    _write_manifest(args.out, args, {"seed": args.seed, "data_seed": args.data_seed},
                    [metrics, os.path.join(args.out, "manifest.json")], started,
                    {"config_hash": config_hash(cfg), "alphas": [float(a) for a in model.alphas]})
    print(f"{args.strategy} ensemble k={len(model.members)} rule={args.rule} "
          f"test_accuracy={ens_test:.4f}")
    print(f"alphas: {[round(float(a), 4) for a in model.alphas]}")
    return 0


def accuracy_like(model, images, labels, rule=None) -> float:
    pred = ensemble.aggregate(model, images, rule=rule).labels
    return float((pred == labels).mean())


def cmd_eval(args):
    started = time.time()
    model = _load_model(args.checkpoint)
    _, test = _load_dataset(args)
    if hasattr(model, "members"):
        pred = ensemble.aggregate(model, test.images, rule=args.rule).labels
        classes = model.config.classes
    else:
        pred = model.predict(test.images)
        classes = model.classes
    acc = float((pred == test.labels).mean())
    os.makedirs(args.out, exist_ok=True)
    epath = os.path.join(args.out, "eval.csv")
    _write_csv(epath, ["metric", "value"], [("accuracy", _fmt(acc)), ("n", len(test))])
    cpath = os.path.join(args.out, "confusion.csv")
    conf = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(conf, (test.labels, pred), 1)
    rows = [(t, p, int(conf[t, p])) for t in range(classes) for p in range(classes)]
    _write_csv(cpath, ["true_class", "pred_class", "count"], rows)
    _write_manifest(args.out, args, {"data_seed": args.data_seed}, [epath, cpath], started)
    print(f"accuracy: {acc:.4f} on {len(test)} examples")
    return 0


def cmd_perturb(args):
    started = time.time()
    model = _load_model(args.checkpoint)
    _, test = _load_dataset(args)
    sigmas = [float(s) for s in args.sigma2.split(",")]
    rows = []
    for s2 in sigmas:
        spec = analysis.PerturbationSpec(
            target=args.target, sigma2=s2, trials=args.trials, seed=args.seed
        )
        oc = analysis.output_change_trained(model, test.images, spec)
        ec = analysis.robustness_trained(model, test.images, test.labels, spec)
        rows.append((_fmt(s2), args.target, "output_change",
                     _fmt(oc.mean), _fmt(oc.stderr), oc.trials))
        rows.append((_fmt(s2), args.target, "error_change",
                     _fmt(ec.mean), _fmt(ec.stderr), ec.trials))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "perturb.csv")
    _write_csv(path, ["sigma2", "target", "metric", "value", "stderr", "trials"], rows)
    _write_manifest(args.out, args, {"seed": args.seed}, [path], started)
    _print_table(["sigma2", "target", "metric", "value", "stderr", "trials"], rows)
    return 0


def cmd_analyze_b_table(args):
    started = time.time()
    sigmas = [float(s) for s in args.sigmas.split(",")]
    rows = [( _fmt(r["sigma"]), _fmt(r["b"]), _fmt(r["r"])) for r in analysis.b_r_table(sigmas)]
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "b_table.csv")
    _write_csv(path, ["sigma", "b", "r"], rows)
    _write_manifest(args.out, args, {"seed": args.seed}, [path], started)
    _print_table(["sigma", "b", "r"], rows)
    return 0


def cmd_analyze_theorem1(args):
    started = time.time()
    ks = tuple(int(k) for k in args.k_values.split(","))
    rep = analysis.verify_theorem1(
        args.fan_in, args.sigma_w, args.sigma,
        k_values=ks, trials=args.trials, seed=args.seed,
    )
    rows = []
    for name, st in rep.regimes.items():
        rows.append(("regime", name, _fmt(st.measured), _fmt(st.stderr),
                     _fmt(st.predicted), _fmt(st.rel_err), int(st.rel_err <= rep.rel_tol)))
    for k, st in rep.bagged.items():
        rows.append((f"bagged_k{k}", "both_bin", _fmt(st.measured), _fmt(st.stderr),
                     _fmt(st.predicted), _fmt(st.rel_err), int(st.rel_err <= rep.rel_tol)))
    for name, val in rep.thresholds.items():
        rows.append(("threshold", name, _fmt(val), "", "", "", ""))
    for c in rep.threshold_checks:
        rows.append((f"check_k{c['k']}", c["predicate"], int(c["measured"]), "",
                     int(c["predicted"]), "", int(c["agree"])))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "theorem1.csv")
    _write_csv(path, ["kind", "name", "measured", "stderr", "predicted", "rel_err", "ok"], rows)
    _write_manifest(args.out, args, {"seed": args.seed}, [path], started)
    bad = [r for r in rows if r[6] == 0]
    print(f"theorem1: {len(rows)} rows, {len(bad)} outside tolerance -> {path}")
    return 0


def cmd_analyze_theorem2(args):
    started = time.time()
    widths = tuple(int(w) for w in args.widths.split(","))
    rep = analysis.verify_theorem2(
        widths, args.sigma_w, args.sigma,
        trials=args.trials, inner=args.inner, seed=args.seed,
    )
    rows = [
        (name, len(widths) - 1, _fmt(res["bound"]), _fmt(res["mean_measured"]),
         _fmt(res["satisfied_fraction"]), _fmt(res["satisfied_se"]),
         int(res["satisfied_fraction"] >= 0.99))
        for name, res in rep.regimes.items()
    ]
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "theorem2.csv")
    _write_csv(path, ["regime", "layers", "bound", "mean_measured",
                      "satisfied_fraction", "satisfied_se", "ok"], rows)
    _write_manifest(args.out, args, {"seed": args.seed}, [path], started)
    _print_table(["regime", "layers", "bound", "mean_measured",
                  "satisfied_fraction", "satisfied_se", "ok"], rows)
    return 0


def cmd_export(args):
    started = time.time()
    model = _load_model(args.checkpoint)
    if hasattr(model, "members"):
        raise DataError("export works on single-network checkpoints")
    if not model.binary_layers():
        raise DataError("network has no binary layers to pack")
    float_blob = datio.checkpoint_bytes(model)
    packed_blob = datio.packed_export_bytes(model)
    os.makedirs(args.out, exist_ok=True)
    ppath = os.path.join(args.out, "model.pbin")
    with open(ppath, "wb") as fh:
        fh.write(packed_blob)
    reloaded = datio.load_packed_bytes(packed_blob)
    probe = np.random.default_rng(0).uniform(-1, 1, (64,) + tuple(model.config.input_shape)).astype(np.float32)
    match = bool(np.array_equal(model.predict(probe), reloaded.predict(probe)))
    ratio = len(float_blob) / len(packed_blob)
    rpath = os.path.join(args.out, "export.csv")
    _write_csv(rpath, ["metric", "value"], [
        ("float_bytes", len(float_blob)),
        ("packed_bytes", len(packed_blob)),
        ("ratio", _fmt(ratio)),
        ("argmax_match", int(match)),
    ])
    _write_manifest(args.out, args, {}, [ppath, rpath], started)
    print(f"packed export: {len(packed_blob)} bytes, {ratio:.1f}x smaller, "
          f"argmax match: {match}")
    return 0


# --------------------------------------------------------------- dispatcher


def build_parser() -> _Parser:
    root = _Parser(prog="binn", description=__doc__)
    sub = root.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one weak binary network")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_data_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    pe = sub.add_parser("ensemble", help="ensemble operations")
    esub = pe.add_subparsers(dest="ensemble_command", required=True, parser_class=_Parser)
    p = esub.add_parser("train", help="train a bagged or boosted ensemble")
    p.add_argument("--config", required=True)
    p.add_argument("--strategy", required=True, choices=["bag", "boost"])
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--mode", default="indep", choices=["indep", "warm"])
    p.add_argument("--rule", default="soft", choices=["hard", "soft"])
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_data_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ensemble_train)

    p = sub.add_parser("eval", help="accuracy + confusion matrix")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rule", default=None, choices=["hard", "soft"])
    p.add_argument("--out", required=True)
    _add_data_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("perturb", help="robustness metrics under Gaussian noise")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sigma2", default="0.001,0.01,0.1")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--target", default="input", choices=["input", "weights"])
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_data_flags(p)
    p.set_defaults(func=cmd_perturb)

    pa = sub.add_parser("analyze", help="variance-theory reports")
    asub = pa.add_subparsers(dest="analyze_command", required=True, parser_class=_Parser)
    p = asub.add_parser("b-table", help="sign-flip variance factor table")
    p.add_argument("--sigmas", default="1.5,1.0,0.5,0.1,0.01,0.001")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze_b_table)
    p = asub.add_parser("theorem1", help="one-layer variance Monte Carlo")
    p.add_argument("--fan-in", type=int, default=256)
    p.add_argument("--sigma-w", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--k-values", default="2,4,8,16")
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze_theorem1)
    p = asub.add_parser("theorem2", help="multi-layer bound satisfaction")
    p.add_argument("--widths", default="64,64,1")
    p.add_argument("--sigma-w", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--inner", type=int, default=128)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze_theorem2)

    p = sub.add_parser("export", help="packed inference file + size report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    return root


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args._argv = argv if argv is not None else sys.argv[1:]
    try:
        return args.func(args)
    except (DataError, ShapeError) as e:
        sys.stderr.write(f"data error: {e}\n")
        return 2
    except (NumericalError, EnsembleError) as e:
        sys.stderr.write(f"numerical failure: {e}\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
