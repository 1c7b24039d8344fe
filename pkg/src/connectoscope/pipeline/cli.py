"""``connectoscope`` command line."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .. import classical_ml as rf
from .. import models
from ..connectome import (
    export_connectivity,
    group_average,
    read_connectome_csv,
    write_connectome_csv,
)
from ..errors import ConnectoscopeError, IoError
from ..nifti_io import FLOAT32, read_volume, write_volume
from ..tensor_engine import load_checkpoint, save_checkpoint
from ..volume_ops import aggregate_time
from .features import FeatureConfig, build_features, load_connectomes, preprocess
from .manifest import CohortManifest, load_manifest, write_manifest
from .phantom import PhantomSpec, generate_phantom
from .split import SplitSpec, stratified_split

MODEL_KINDS = ("rf", "vanilla", "sae", "cnn3d")
# epochs and optimizer per model when the flags are not given
TRAIN_DEFAULTS = {
    "vanilla": {"epochs": 30, "optimizer": "adam", "learning_rate": 0.001},
    "sae": {"epochs": 30, "optimizer": "sgd", "learning_rate": 0.1},
    "latent_classifier": {"epochs": 30, "optimizer": "adam", "learning_rate": 0.001},
    "cnn3d": {"epochs": 50, "optimizer": "adam", "learning_rate": 0.001},
}


def _flatten_cfg(d: dict, prefix: str = "") -> dict[str, str]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten_cfg(v, key + "."))
        elif isinstance(v, (list, tuple)):
            out[key] = ",".join(str(x) for x in v)
        else:
            out[key] = str(v)
    return out


def write_config(path: Path, cfg: dict) -> None:
    """``key=value`` lines with sorted keys."""
    flat = _flatten_cfg(cfg)
    path.write_text("".join(f"{k}={flat[k]}\n" for k in sorted(flat)))


def read_config(path: Path) -> dict[str, str]:
    out = {}
    for line in path.read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


def _out_dir(args) -> Path:
    if not args.out:
        raise ValueError("--out is required")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out}: {exc}") from exc
    return out


def _log(out: Path, message: str) -> None:
    # the only file that carries wall-clock time
    with (out / "run.log").open("a") as fh:
        fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {message}\n")


def _common_echo(args) -> dict:
    return {"command": args.command, "seed": args.seed, "threads": args.threads}


def cmd_phantom(args) -> int:
    out = _out_dir(args)
    spec = PhantomSpec(
        n_per_class=args.n_per_class,
        grid=tuple(args.grid),
        timesteps=args.timesteps,
        noise_sigma=args.sigma,
        offset_sigmas=args.offset,
        blocks_per_axis=args.blocks,
        n_networks=args.networks,
        coupling=args.coupling,
        seed=args.seed,
        threads=args.threads,
    )
    ph = generate_phantom(spec, out)
    write_config(out / "run.cfg", {**_common_echo(args), "phantom": spec.echo()})
    _log(out, f"phantom: {len(ph.manifest)} subjects")
    print(f"wrote {len(ph.manifest)} subjects to {ph.manifest_path}")
    return 0


def _feature_cfg(args, kind: str) -> FeatureConfig:
    return FeatureConfig(
        kind=kind,
        atlas=str(Path(args.atlas).resolve()) if getattr(args, "atlas", None) else "",
        names=str(Path(args.names).resolve()) if getattr(args, "names", None) else "",
        aggregate=getattr(args, "aggregate", None) or "max",
        trim=args.trim,
        fwhm_mm=args.fwhm,
        threads=args.threads,
    )


def cmd_aggregate(args) -> int:
    out = _out_dir(args)
    manifest = load_manifest(args.manifest)
    paths = []
    for row in manifest:
        v = preprocess(read_volume(row.path), args.trim, args.fwhm)
        agg = aggregate_time(v, args.mode)
        target = out / f"{row.subject_id}_{args.mode}.nii"
        write_volume(agg, FLOAT32, target)
        paths.append(target)
    write_manifest(manifest.with_paths(paths), out / "manifest.csv")
    write_config(
        out / "run.cfg",
        {**_common_echo(args), "manifest": args.manifest, "mode": args.mode, "trim": args.trim, "fwhm_mm": args.fwhm},
    )
    _log(out, f"aggregate: {len(paths)} volumes")
    print(f"wrote {len(paths)} aggregated volumes to {out}")
    return 0


def cmd_connectome(args) -> int:
    out = _out_dir(args)
    manifest = load_manifest(args.manifest)
    cfg = _feature_cfg(args, "connectome")
    conns = load_connectomes(manifest, cfg)
    paths = []
    for c in conns:
        target = out / f"{c.subject_id}.csv"
        write_connectome_csv(c, target)
        paths.append(target)
    write_manifest(manifest.with_paths(paths), out / "manifest.csv")
    if args.group:
        labels = manifest.labels
        groups = {"all": conns, "control": [c for c, y in zip(conns, labels) if y == 0], "patient": [c for c, y in zip(conns, labels) if y == 1]}
        for name, members in groups.items():
            if members:
                write_connectome_csv(group_average(members, args.fisher_z, f"group_{name}"), out / f"group_{name}.csv")
    write_config(
        out / "run.cfg",
        {**_common_echo(args), "manifest": args.manifest, "features": cfg.echo(), "group": args.group, "fisher_z": args.fisher_z},
    )
    _log(out, f"connectome: {len(paths)} matrices")
    print(f"wrote {len(paths)} connectomes to {out}")
    return 0


def _train_cfg(args, kind: str, seed: int) -> models.TrainConfig:
    d = TRAIN_DEFAULTS[kind]
    return models.TrainConfig(
        epochs=args.epochs or d["epochs"],
        batch_size=args.batch_size,
        optimizer=args.optimizer or d["optimizer"],
        learning_rate=args.lr or d["learning_rate"],
        augment=kind == "cnn3d" and not args.no_augment,
        seed=seed,
    )


def _write_loss(path: Path, history, val_history=()) -> None:
    lines = ["epoch,train_loss" + (",val_loss" if val_history else "")]
    for e, loss in enumerate(history, 1):
        row = f"{e},{loss!r}"
        if val_history:
            row += f",{val_history[e - 1]!r}"
        lines.append(row)
    path.write_text("\n".join(lines) + "\n")


def _prefixed(state: dict, prefix: str) -> dict:
    return {f"{prefix}{k}": v for k, v in state.items()}


def _unprefixed(state: dict, prefix: str) -> dict:
    return {k[len(prefix) :]: v for k, v in state.items() if k.startswith(prefix)}


def cmd_train(args) -> int:
    out = _out_dir(args)
    manifest = load_manifest(args.manifest)
    split = SplitSpec(args.split, args.stratify, args.seed)
    train_m, test_m = stratified_split(manifest, split)
    write_manifest(test_m, out / "test_manifest.csv")
    write_manifest(train_m, out / "train_manifest.csv")

    kind = "aggregate" if args.model == "cnn3d" else "connectome"
    fcfg = _feature_cfg(args, kind)
    X = build_features(train_m, fcfg)
    y = np.asarray(train_m.labels)
    echo = {**_common_echo(args), "manifest": args.manifest, "model": args.model, "split": split.__dict__, "features": fcfg.echo()}
    # settings the user left to the built-in defaults
    defaulted = [name for name in ("epochs", "optimizer", "lr") if getattr(args, name) is None]
    if args.model != "rf":
        echo["defaulted"] = defaulted or ["none"]
    run_spec: dict = {"model": args.model, "features": fcfg.echo()}

    if args.model == "rf":
        fcfg_rf = rf.ForestConfig(args.trees, args.max_depth, args.max_features, seed=args.seed)
        forest = rf.fit_forest(X, y, fcfg_rf)
        (out / "forest.json").write_text(json.dumps(forest.to_dict()))
        echo["forest"] = fcfg_rf.echo()
    elif args.model == "vanilla":
        spec = models.build_vanilla(args.seed, input_dim=X.shape[1])
        tcfg = _train_cfg(args, "vanilla", args.seed)
        result = models.train(spec, X, y, tcfg)
        save_checkpoint(out / "model.ckpt", result.network.state_dict())
        _write_loss(out / "loss.csv", result.history)
        run_spec["spec"] = spec.to_dict()
        echo.update(train=tcfg.echo(), widths=spec.widths())
    elif args.model == "sae":
        sae_spec = models.build_sae(args.seed, input_dim=X.shape[1], l1_coefficient=args.l1)
        latent = sae_spec.layers[sae_spec.latent_index - 1].size
        clf_spec = models.build_latent_classifier(args.seed, latent_dim=latent)
        sae_cfg = _train_cfg(args, "sae", args.seed)
        clf_cfg = _train_cfg(args, "latent_classifier", args.seed)
        fit = models.fit_sae_classifier(X, y, sae_spec, clf_spec, sae_cfg, clf_cfg, args.finetune_encoder)
        state = _prefixed(fit.autoencoder.state_dict(), "sae.") | _prefixed(fit.classifier.state_dict(), "clf.")
        save_checkpoint(out / "model.ckpt", state)
        _write_loss(out / "sae_loss.csv", fit.sae_history)
        _write_loss(out / "loss.csv", fit.clf_history)
        run_spec.update(sae=sae_spec.to_dict(), classifier=fit.classifier.spec.to_dict(), finetuned=fit.finetuned)
        echo.update(sae_train=sae_cfg.echo(), train=clf_cfg.echo(), widths=sae_spec.widths(), finetune_encoder=args.finetune_encoder)
    else:
        spec = models.build_cnn3d(args.seed, input_shape=X.shape[2:], filters=tuple(args.filters), dense_units=args.dense_units)
        tcfg = _train_cfg(args, "cnn3d", args.seed)
        result = models.train(spec, X, y, tcfg)
        save_checkpoint(out / "model.ckpt", result.network.state_dict())
        _write_loss(out / "loss.csv", result.history)
        run_spec["spec"] = spec.to_dict()
        echo.update(train=tcfg.echo(), stage_shapes=["x".join(map(str, s)) for s in spec.stage_shapes()])

    (out / "model_spec.json").write_text(json.dumps(run_spec, indent=1, sort_keys=True))
    write_config(out / "run.cfg", echo)
    _log(out, f"train {args.model}: {len(train_m)} train / {len(test_m)} test")
    print(f"trained {args.model} on {len(train_m)} subjects; {len(test_m)} held out in {out / 'test_manifest.csv'}")
    return 0


def predict_run(run: Path, manifest: CohortManifest) -> np.ndarray:
    """Positive-class probabilities of a trained run on ``manifest``."""
    run_spec = json.loads((run / "model_spec.json").read_text())
    X = build_features(manifest, FeatureConfig(**run_spec["features"]))
    kind = run_spec["model"]
    if kind == "rf":
        forest = rf.Forest.from_dict(json.loads((run / "forest.json").read_text()))
        return forest.predict_proba(X)
    state = load_checkpoint(run / "model.ckpt")
    if kind == "sae":
        sae = models.Network(models.ModelSpec.from_dict(run_spec["sae"]))
        sae.load_state_dict(_unprefixed(state, "sae."))
        clf = models.Network(models.ModelSpec.from_dict(run_spec["classifier"]))
        clf.load_state_dict(_unprefixed(state, "clf."))
        return clf.predict_proba(X if run_spec["finetuned"] else sae.encode(X))
    net = models.Network(models.ModelSpec.from_dict(run_spec["spec"]))
    net.load_state_dict(state)
    return net.predict_proba(X)


def cmd_evaluate(args) -> int:
    run = Path(args.run)
    if not (run / "model_spec.json").exists():
        raise IoError(f"{run} is not a training run directory")
    manifest = load_manifest(args.manifest or run / "test_manifest.csv")
    proba = predict_run(run, manifest)
    report = rf.compute_metrics(rf.threshold_predictions(proba), manifest.labels)
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    (out / "metrics.txt").write_text(report.render() + "\n")
    with (out / "predictions.csv").open("w") as fh:
        fh.write("subject_id,label,probability\n")
        for row, p in zip(manifest, proba):
            fh.write(f"{row.subject_id},{row.label},{p!r}\n")
    print(report.render())
    return 0


def cmd_export(args) -> int:
    c = read_connectome_csv(args.input)
    suffix = ".svg" if args.format == "svg-heatmap" else ".edges.csv"
    default_name = Path(args.input).stem + suffix
    if not args.out:
        target = Path(args.input).with_name(default_name)
    elif args.out.endswith("/") or Path(args.out).is_dir():
        target = _out_dir(args) / default_name
    else:
        target = Path(args.out)
    export_connectivity(c, args.threshold, target, args.format)
    print(f"wrote {target}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads for per-subject stages")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")

    parser = argparse.ArgumentParser(prog="connectoscope", description="fMRI connectome and volume classification toolkit")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--out", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    def preprocessing(p):
        p.add_argument("--trim", type=int, default=0, help="drop this many initial frames")
        p.add_argument("--fwhm", type=float, default=0.0, help="Gaussian smoothing FWHM in mm (0 = off)")

    p = sub.add_parser("phantom", parents=[common], help="write a synthetic cohort")
    p.add_argument("--n-per-class", type=int, default=40)
    p.add_argument("--grid", type=int, nargs=3, default=(16, 16, 16))
    p.add_argument("--timesteps", type=int, default=20)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--offset", type=float, default=2.0, help="class offset in noise sigmas")
    p.add_argument("--blocks", type=int, default=2, help="atlas blocks per axis")
    p.add_argument("--networks", type=int, default=2)
    p.add_argument("--coupling", type=float, default=0.0, help="shared network series amplitude in sigmas")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("aggregate", parents=[common], help="collapse time by max or min")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=("max", "min"), default="max")
    preprocessing(p)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("connectome", parents=[common], help="per-subject ROI correlation matrices")
    p.add_argument("--manifest", required=True)
    p.add_argument("--atlas", required=True)
    p.add_argument("--names")
    p.add_argument("--group", action="store_true", help="also write group averages")
    p.add_argument("--fisher-z", action="store_true", help="average in Fisher z space")
    preprocessing(p)
    p.set_defaults(func=cmd_connectome)

    p = sub.add_parser("train", parents=[common], help="split a manifest and train one model")
    p.add_argument("--model", choices=MODEL_KINDS, required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", type=float, default=0.8, help="train fraction")
    p.add_argument("--stratify", choices=("label", "site_label"), default="label")
    p.add_argument("--atlas")
    p.add_argument("--names")
    p.add_argument("--aggregate", choices=("max", "min"), default="max")
    preprocessing(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--lr", type=float)
    p.add_argument("--l1", type=float, default=0.001, help="latent L1 coefficient (sae)")
    p.add_argument("--finetune-encoder", action="store_true")
    p.add_argument("--filters", type=int, nargs="+", default=(64, 128, 256))
    p.add_argument("--dense-units", type=int, default=512)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--trees", type=int, default=500)
    p.add_argument("--max-depth", type=int, default=6)
    p.add_argument("--max-features", type=int, default=96)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="score a training run on its held-out subjects")
    p.add_argument("--run", required=True)
    p.add_argument("--manifest", help="score this manifest instead of the held-out one")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-connectivity", parents=[common], help="edge list or SVG heatmap of a connectome")
    p.add_argument("--input", required=True, help="connectome CSV")
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--format", choices=("edge-csv", "svg-heatmap"), default="edge-csv")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConnectoscopeError as exc:
        print(f"connectoscope: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"connectoscope: usage: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"connectoscope: IoError: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
