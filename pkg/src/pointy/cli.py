"""Command-line entry point: ``pointy {synth,train,eval,zeroshot,report,params}``.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
Config precedence: preset < ``--config`` JSON < command-line flags.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .backbone import ModelConfig, PRESETS, count_flops, count_params, preset
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    DEFAULT_CLASSES,
    SHAPES,
    TRANSFER_CLASSES,
    FormatError,
    gen_synthetic,
    load_manifest,
    save_pcf,
    split,
    write_manifest,
)
from .train import (
    HISTORY_FIELDS,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    read_history_csv,
    restore,
    train,
    write_history_csv,
)
from .zeroshot import write_rankings_csv, zeroshot_eval

log = logging.getLogger("pointy")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def out_root() -> Path:
    return Path(os.environ.get("POINTY_OUT_DIR", "runs"))


# config resolution -----------------------------------------------------------

# flag dest -> ModelConfig field
MODEL_FLAGS = {
    "dim": "D", "heads": "H", "layers": "L", "patches": "P", "k": "k", "points": "n_points",
    "merge_schedule": "merge_schedule", "merge": "merge_strategy", "hierarchical": "hierarchical",
    "activation": "activation", "positional": "use_positional", "positional_kind": "positional",
    "mlp_ratio": "mlp_ratio", "num_classes": "num_classes", "embed_hidden": "embed_hidden",
    "dropout": "dropout",
}
TRAIN_FLAGS = {
    "lr": "lr", "batch_size": "batch_size", "epochs": "epochs", "seed": "seed",
    "precision": "precision", "augment": "augment", "weight_decay": "weight_decay",
    "deterministic": "deterministic",
}


def _read_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None


def resolve_run_config(args, num_classes: int | None = None) -> dict:
    """Merge preset, config file and explicit flags into one RunConfig dict."""
    file_cfg = _read_config_file(getattr(args, "config", None))
    name = getattr(args, "preset", None) or file_cfg.get("preset") or "small"
    if name not in PRESETS:
        raise UsageError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
    model = preset(name).to_dict()
    model.update(file_cfg.get("model", {}))
    train_cfg = TrainConfig().to_dict()
    train_cfg.update(file_cfg.get("train", {}))
    data = {"source": "synth:default", "per_class": 200, "synth_points": 512, "noise": 0.02,
            "train_fraction": 0.85}
    data.update(file_cfg.get("data", {}))
    for flag, key in MODEL_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            model[key] = value
    for flag, key in TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            train_cfg[key] = value
    if getattr(args, "data", None) is not None:
        data["source"] = args.data
    for flag in ("per_class", "noise", "train_fraction"):
        if getattr(args, flag, None) is not None:
            data[flag] = getattr(args, flag)
    if num_classes is not None and "num_classes" not in file_cfg.get("model", {}) and getattr(args, "num_classes", None) is None:
        model["num_classes"] = num_classes
    try:
        ModelConfig.from_dict(model)
        TrainConfig.from_dict(train_cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return {"preset": name, "model": model, "train": train_cfg, "data": data}


def load_data(data_cfg: dict, n_points: int, seed: int):
    """Return (train, test) splits for a data source string."""
    source = data_cfg["source"]
    if source.startswith("synth:"):
        name = source.split(":", 1)[1]
        classes = {"default": DEFAULT_CLASSES, "transfer": TRANSFER_CLASSES}.get(name)
        if classes is None:
            classes = [c.strip() for c in name.split(",") if c.strip()]
        try:
            ds = gen_synthetic(classes, data_cfg["per_class"], data_cfg["synth_points"], data_cfg["noise"], seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    else:
        try:
            ds = load_manifest(source, n_points=n_points, seed=seed)
        except (OSError, FormatError) as exc:
            raise UsageError(f"cannot load manifest {source}: {exc}") from None
    return split(ds, data_cfg["train_fraction"], seed)


# commands --------------------------------------------------------------------

def cmd_synth(args) -> int:
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    bad = [c for c in classes if c not in SHAPES]
    if bad:
        raise UsageError(f"unknown class(es) {', '.join(bad)}; valid classes: {', '.join(SHAPES)}")
    out = Path(args.out) if args.out else out_root() / "synth"
    ds = gen_synthetic(classes, args.per_class, args.points, args.noise, args.seed or 0)
    rows = []
    for cloud, label in zip(ds.clouds, ds.labels):
        name = ds.class_names[label]
        rel = Path(name) / f"{cloud.id}.pcf"
        (out / name).mkdir(parents=True, exist_ok=True)
        save_pcf(cloud, out / rel)
        rows.append((rel.as_posix(), name))
    write_manifest(out / "manifest.csv", rows)
    print(f"wrote {len(rows)} clouds and {out / 'manifest.csv'}")
    return EXIT_OK


def _model_config(run: dict) -> ModelConfig:
    return ModelConfig.from_dict(run["model"])


def _run_train(run: dict, out: Path, quiet: bool = False):
    config = _model_config(run)
    tcfg = TrainConfig.from_dict(run["train"])
    train_set, test_set = load_data(run["data"], config.n_points, tcfg.seed)
    if train_set.num_classes != config.num_classes:
        config = ModelConfig.from_dict({**run["model"], "num_classes": train_set.num_classes})
        run["model"] = config.to_dict()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def report(m):
        if not quiet:
            print(f"epoch {m.epoch:3d}  loss {m.train_loss:.4f}  test OA {m.test_oa:6.2f}%", flush=True)

    result = train(config, train_set, test_set, tcfg, extra_config={"preset": run["preset"], "data": run["data"]},
                   on_epoch=report)
    save_checkpoint(result.best_checkpoint, out / "best.ptyc")
    save_checkpoint(result.last_checkpoint, out / "last.ptyc")
    write_history_csv(result.history, out / "history.csv")
    return result


def cmd_train(args) -> int:
    run = resolve_run_config(args)
    config = _model_config(run)
    if args.dry_run:
        print(f"preset {run['preset']}: {count_params(config).total:,d} parameters")
        return EXIT_OK
    out = Path(args.out) if args.out else out_root() / f"train-{run['preset']}-seed{run['train']['seed']}"
    result = _run_train(run, out)
    if result.history:
        print(f"best test OA {result.best_oa:.2f}% at epoch {result.best_epoch}; artifacts in {out}")
    else:
        print(f"no epochs run; initial weights written to {out}")
    return EXIT_OK


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except (OSError, FormatError) as exc:
        raise UsageError(f"cannot load checkpoint: {exc}") from None


def cmd_eval(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    config, tcfg, params, _ = restore(ckpt)
    data_cfg = dict(ckpt.config.get("data") or {"source": "synth:default", "per_class": 200,
                                               "synth_points": 512, "noise": 0.02, "train_fraction": 0.85})
    if args.data:
        data_cfg["source"] = args.data
    seed = args.seed if args.seed is not None else tcfg.seed
    _, test_set = load_data(data_cfg, config.n_points, seed)
    if test_set.num_classes != config.num_classes:
        raise UsageError(f"data has {test_set.num_classes} classes, checkpoint head has {config.num_classes}")
    oa = evaluate(params, config, test_set, seed=seed)
    print(json.dumps({"checkpoint": str(args.checkpoint), "test_oa": oa, "M": len(test_set)}))
    return EXIT_OK


def cmd_zeroshot(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    config, tcfg, params, _ = restore(ckpt)
    data_cfg = {"source": args.target, "per_class": args.per_class or 200, "synth_points": 512,
                "noise": 0.02 if args.noise is None else args.noise,
                "train_fraction": args.train_fraction or 0.85}
    seed = args.seed if args.seed is not None else tcfg.seed
    train_set, test_set = load_data(data_cfg, config.n_points, seed)
    ks = [int(k) for k in args.topk.split(",")]
    try:
        result = zeroshot_eval((config, params), train_set, test_set, ks, seed=seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = result.report(str(args.checkpoint), args.target)
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    if args.rankings:
        write_rankings_csv(result, args.rankings)
    return EXIT_OK


SWEEP_ALIASES = {"points": "points", "patches": "patches", "k": "k", "dim": "dim", "heads": "heads",
                 "epochs": "epochs", "lr": "lr"}


def _merge_histories(paths: list[tuple[str, Path]], out: Path) -> int:
    rows = []
    for run_name, path in paths:
        try:
            history = read_history_csv(path)
        except (OSError, ValueError) as exc:
            raise UsageError(f"malformed history {exc}") from None
        for m in history:
            for metric in HISTORY_FIELDS[1:]:
                rows.append((run_name, m.epoch, metric, repr(getattr(m, metric))))
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["run", "epoch", "metric", "value"])
        writer.writerows(rows)
    return len(rows)


def cmd_report(args) -> int:
    histories: list[tuple[str, Path]] = []
    for p in args.histories or []:
        p = Path(p)
        name = p.parent.name if p.name == "history.csv" else p.stem
        histories.append((name, p))
    if args.sweep:
        key, _, values = args.sweep.partition("=")
        if key not in SWEEP_ALIASES or not values:
            raise UsageError(f"--sweep expects KEY=v1,v2 with KEY in {', '.join(SWEEP_ALIASES)}")
        root = Path(args.out).parent if args.out else out_root()
        for raw in values.split(","):
            value = float(raw) if key == "lr" else int(raw)
            setattr(args, SWEEP_ALIASES[key], value)
            run = resolve_run_config(args)
            run_dir = root / f"sweep-{key}-{raw}"
            print(f"sweep {key}={raw}", flush=True)
            _run_train(run, run_dir, quiet=True)
            histories.append((f"{key}={raw}", run_dir / "history.csv"))
    if not histories:
        raise UsageError("report needs at least one history CSV or --sweep")
    out = Path(args.out) if args.out else out_root() / "report.csv"
    n = _merge_histories(histories, out)
    print(f"wrote {n} rows to {out}")
    return EXIT_OK


def cmd_params(args) -> int:
    run = resolve_run_config(args)
    config = _model_config(run)
    params = count_params(config)
    flops = count_flops(config, config.n_points)
    if args.json:
        print(json.dumps({"params": {"total": params.total, "items": params.items},
                          "flops": {"total": flops.total, "items": flops.items}}, indent=2))
        return EXIT_OK
    print(f"# parameters ({run['preset']}, D={config.D}, H={config.H}, {config.num_classes} classes)")
    print("\n".join(params.lines()))
    print(f"# FLOPs per cloud at {config.n_points} points")
    print("\n".join(flops.lines()))
    return EXIT_OK


# parser ----------------------------------------------------------------------

def _bool_flag(parser, name: str, dest: str, help_on: str):
    group = parser.add_mutually_exclusive_group()
    group.add_argument(f"--{name}", dest=dest, action="store_true", default=None, help=help_on)
    group.add_argument(f"--no-{name}", dest=dest, action="store_false", default=None)


def _schedule(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad merge schedule {text!r}") from None


def _add_model_flags(p):
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--dim", type=int, help="embedding dimension D")
    p.add_argument("--heads", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--patches", type=int, help="patch count P")
    p.add_argument("--k", type=int, help="points per patch")
    p.add_argument("--points", type=int, help="points sampled per cloud")
    p.add_argument("--merge-schedule", type=_schedule, help="comma-separated merge factors, one per block")
    p.add_argument("--merge", choices=["addition", "linear"])
    _bool_flag(p, "hierarchical", "hierarchical", "merge tokens between blocks")
    p.add_argument("--activation", choices=["gelu", "relu"])
    _bool_flag(p, "positional", "positional", "learned positional embedding")
    p.add_argument("--positional-kind", choices=["mlp", "table"])
    p.add_argument("--mlp-ratio", type=int)
    p.add_argument("--embed-hidden", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--dropout", type=float)


def _add_train_flags(p):
    p.add_argument("--data", help="synth:default | synth:transfer | synth:<shape,...> | manifest.csv")
    p.add_argument("--per-class", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--weight-decay", type=float)
    _bool_flag(p, "augment", "augment", "random z-rotation of training clouds")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="single-threaded, no prefetch, wall time recorded as 0")


def _global_flags(default) -> argparse.ArgumentParser:
    # Subcommands repeat the global flags with suppressed defaults so a value
    # given before the subcommand is not reset by the subparser.
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=default)
    common.add_argument("--threads", type=int, default=default, help="BLAS thread limit")
    common.add_argument("--precision", choices=["f32", "f64"], default=default)
    common.add_argument("--config", default=default, help="RunConfig JSON file")
    common.add_argument("-v", "--verbose", action="store_true", default=default or False)
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointy", description=__doc__.splitlines()[0],
                                     parents=[_global_flags(None)])
    common = _global_flags(argparse.SUPPRESS)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic PCF dataset and manifest")
    p.add_argument("--classes", default=",".join(DEFAULT_CLASSES))
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--points", type=int, default=512)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a classifier")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--out")
    p.add_argument("--dry-run", action="store_true", help="print the parameter count and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="test accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("zeroshot", parents=[common], help="prototype zero-shot transfer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", default="synth:transfer")
    p.add_argument("--topk", default="1,3,5")
    p.add_argument("--per-class", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--train-fraction", type=float, help="share of each class used for prototypes")
    p.add_argument("--out", help="JSON report path")
    p.add_argument("--rankings", help="optional per-sample ranking CSV")
    p.set_defaults(func=cmd_zeroshot)

    p = sub.add_parser("report", parents=[common], help="merge histories into long-format CSV")
    p.add_argument("histories", nargs="*")
    p.add_argument("--sweep", help="KEY=v1,v2,... trains one run per value first")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("params", parents=[common], help="itemised parameter and FLOP counts")
    _add_model_flags(p)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limit = contextlib.nullcontext()
    if args.threads:
        from threadpoolctl import threadpool_limits
        limit = threadpool_limits(args.threads)
    try:
        with limit:
            return args.func(args)
    except UsageError as exc:
        print(f"pointy {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"pointy {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
