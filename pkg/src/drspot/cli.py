"""Command-line runner: generate | train | eval | ablate | visualize | equivariance.

Every command writes into ``--out`` (default: ``$DRSPOT_OUT/<command>-<config hash>``,
with ``DRSPOT_OUT`` falling back to ``./runs``) and leaves a ``manifest.json``
plus the resolved config there. Failures exit nonzero after printing one JSON
line ``{"error": ..., "message": ..., "command": ...}`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

OUT_ENV = "DRSPOT_OUT"


def _out_dir(args, command: str, digest: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUT_ENV, "runs")) / f"{command}-{digest}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, config_path, seed, digest: str, extra: Optional[dict] = None) -> None:
    record = {
        "command": command,
        "config": str(config_path) if config_path else None,
        "seed": seed,
        "out": str(out),
        "config_hash": digest,
    }
    record.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _train_config(args):
    from .spotter.config import TrainConfig, load_config

    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    for key, value in (getattr(args, "set", None) or []):
        cfg = cfg.replace(**{key: value})
    return cfg


def _parse_set(text: str):
    """``key=value`` with a TOML-typed value (``fusion="none"``, ``K=8``, ``stages=[1]``)."""
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    from .spotter.config import _ALIASES

    return _ALIASES.get(key.strip(), key.strip()), value


def cmd_generate(args) -> dict:
    from .experiments import config_hash, dump_benchmark_config, generate_dataset, load_benchmark_config
    from .glyphgen import BenchmarkConfig

    cfg = load_benchmark_config(args.config) if args.config else BenchmarkConfig()
    changes = {k: v for k, v in (("seed", args.seed), ("n_train", args.n_train), ("n_test", args.n_test)) if v is not None}
    if changes:
        cfg = BenchmarkConfig(**{**cfg.__dict__, **changes})
    digest = config_hash({k: v for k, v in cfg.__dict__.items()})
    out = _out_dir(args, "generate", digest)
    summary = generate_dataset(cfg, out)
    _write_manifest(out, "generate", args.config, cfg.seed, digest)
    result = {"out": str(out), "images": summary["images"], "style_counts": summary["style_counts"]}
    print(json.dumps(result, sort_keys=True))
    return result


def cmd_train(args) -> dict:
    from .experiments import train_variant
    from .spotter.config import dump_config
    from .spotter.data import SpotDataset

    cfg = _train_config(args)
    out = _out_dir(args, "train", cfg.content_hash())
    data = Path(args.data)
    train = SpotDataset.load(data / "train", limit=args.limit)
    val = SpotDataset.load(data / "test_A", limit=cfg.val_images) if cfg.val_images and (data / "test_A").exists() else None
    dump_config(cfg, out / "config.toml")
    _write_manifest(out, "train", args.config, cfg.seed, cfg.content_hash(), {"data": str(data)})
    echo = (lambda line: print(line, flush=True)) if args.verbose else None
    ckpt = train_variant(cfg, train, val, out, cache_dir=args.cache, echo=echo)
    result = {"out": str(out), "checkpoint": str(ckpt)}
    print(json.dumps(result, sort_keys=True))
    return result


def cmd_eval(args) -> dict:
    from .evalkit import dataset_metrics, generalization_report
    from .experiments import config_hash
    from .spotter.data import SpotDataset
    from .spotter.inference import load_spotter, predict_records

    model = load_spotter(args.checkpoint)
    digest = config_hash({"checkpoint": str(Path(args.checkpoint).resolve()), "manifest": str(args.manifest)})
    out = _out_dir(args, "eval", digest)
    kwargs = {"proposer": args.proposer}
    records = predict_records(model, SpotDataset.load(args.manifest, limit=args.limit), **kwargs)
    metrics = dataset_metrics(records)
    result = {"metrics": metrics}
    if args.paired:
        records_b = predict_records(model, SpotDataset.load(args.paired, limit=args.limit), **kwargs)
        report = generalization_report(records, records_b)
        (out / "report.md").write_text(report.to_markdown(), encoding="utf-8")
        result["report"] = json.loads(report.to_json())
    (out / "metrics.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_manifest(out, "eval", None, model.cfg.seed, digest, {"checkpoint": str(args.checkpoint)})
    print(json.dumps(metrics, sort_keys=True))
    return result


def cmd_ablate(args) -> dict:
    from .experiments import run_ablation, summarize
    from .spotter.config import dump_config

    cfg = _train_config(args)
    out = _out_dir(args, f"ablate-{args.axis}", cfg.content_hash())
    dump_config(cfg, out / "config.toml")
    _write_manifest(out, "ablate", args.config, cfg.seed, cfg.content_hash(), {"axis": args.axis, "seeds": args.seeds})
    echo = (lambda line: print(line, flush=True)) if args.verbose else None
    rows = run_ablation(cfg, args.data, out, args.axis, seeds=args.seeds, train_limit=args.limit, echo=echo)
    table = summarize(rows)
    print((out / "ablation.md").read_text(encoding="utf-8"), end="")
    return {"out": str(out), "rows": table}


def cmd_visualize(args) -> dict:
    from .experiments import config_hash
    from .spotter.data import SpotDataset
    from .spotter.inference import load_spotter
    from .visualize import landmark_overlays

    model = load_spotter(args.checkpoint)
    digest = config_hash({"checkpoint": str(Path(args.checkpoint).resolve()), "manifest": str(args.manifest)})
    out = _out_dir(args, "visualize", digest)
    paths = landmark_overlays(model, SpotDataset.load(args.manifest, limit=args.limit), out, scale=args.scale)
    _write_manifest(out, "visualize", None, model.cfg.seed, digest, {"checkpoint": str(args.checkpoint)})
    print(json.dumps({"out": str(out), "images": len(paths)}))
    return {"out": str(out), "images": [str(p) for p in paths]}


def cmd_equivariance(args) -> dict:
    from .experiments import config_hash
    from .landmark_experiment import LandmarkExperimentConfig, run_landmark_experiment

    cfg = LandmarkExperimentConfig(seed=args.seed if args.seed is not None else 0, time_budget=args.time_budget)
    digest = config_hash(cfg.__dict__)
    out = _out_dir(args, "equivariance", digest)
    result = run_landmark_experiment(cfg)
    (out / "result.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_manifest(out, "equivariance", None, cfg.seed, digest)
    print(json.dumps(result, sort_keys=True))
    return result


def _seeds(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drspot", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_help="flat TOML config"):
        p.add_argument("--config", type=Path, default=None, help=config_help)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=Path, default=None, help=f"output directory (default under ${OUT_ENV})")

    p = sub.add_parser("generate", help="render the train / test_A / test_B benchmark")
    common(p, "flat TOML with benchmark keys (alphabet_size, styles_per_set, n_train, ...)")
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="three-stage training")
    common(p)
    p.add_argument("--data", type=Path, required=True, help="directory written by 'generate'")
    p.add_argument("--set", type=_parse_set, action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--limit", type=int, default=None, help="use only the first N training images")
    p.add_argument("--cache", type=Path, default=None, help="share stage-1/2 checkpoints across runs")
    p.add_argument("--verbose", action="store_true", help="print each metric-log record")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics of a checkpoint on a manifest")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--paired", type=Path, default=None, help="content-paired B manifest for the A/B report")
    p.add_argument("--proposer", choices=("gt", "cc"), default="gt")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare variants along one axis")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--axis", required=True, choices=("fusion", "landmarks", "losses", "gpm_off", "methods"))
    p.add_argument("--seeds", type=_seeds, default=[0, 1, 2], help="comma-separated, default 0,1,2")
    p.add_argument("--set", type=_parse_set, action="append", metavar="KEY=VALUE")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("visualize", help="landmark overlays on character crops")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--limit", type=int, default=8, help="number of images")
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("equivariance", help="train the landmark net alone on glyph patches and report equivariance")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--time-budget", type=float, default=600.0, help="seconds")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_equivariance)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - reported as one machine-readable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
