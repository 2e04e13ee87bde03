"""Experiment plumbing: dataset generation, shared-stage training, A/B evaluation, ablations."""

from __future__ import annotations

import csv
import hashlib
import json
import shutil
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .evalkit import GeneralizationReport, generalization_report
from .glyphgen import BenchmarkConfig, generate_benchmark, write_dataset

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .spotter.config import TrainConfig, _toml_value
from .spotter.data import SpotDataset
from .spotter.inference import load_spotter, predict_records
from .spotter.train import train_three_stage

SPLITS = ("train", "test_A", "test_B")

# fields that only matter from stage 2 (landmarks) or stage 3 (fusion) onwards
STAGE2_FIELDS = (
    "K", "lam", "use_align", "use_div", "epochs_stage2", "lr_stage2", "patch_size", "gpm_hidden",
    "rotation_range", "translation_range", "scaling_range",
)
STAGE3_FIELDS = ("fusion", "use_landmarks", "epochs_stage3")

ABLATIONS: dict[str, list[tuple[str, dict]]] = {
    "fusion": [("concatenation", {"fusion": "concat"}), ("summation", {"fusion": "sum"}), ("graph", {"fusion": "graph"})],
    "landmarks": [(f"K={k}", {"fusion": "graph", "K": k}) for k in (4, 8, 16, 24)],
    "losses": [
        ("align-only", {"fusion": "graph", "use_div": False}),
        ("div-only", {"fusion": "graph", "use_align": False}),
        ("both", {"fusion": "graph"}),
        ("gpm-off", {"fusion": "graph", "use_landmarks": False}),
    ],
    "gpm_off": [
        ("baseline", {"fusion": "none"}),
        ("w/o GPM", {"fusion": "graph", "use_landmarks": False}),
        ("full", {"fusion": "graph"}),
    ],
    "methods": [
        ("baseline", {"fusion": "none"}),
        ("concatenation", {"fusion": "concat"}),
        ("summation", {"fusion": "sum"}),
        ("graph", {"fusion": "graph"}),
    ],
}


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def load_benchmark_config(path) -> BenchmarkConfig:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    known = {f.name for f in fields(BenchmarkConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValueError(f"unknown benchmark config keys {unknown}")
    for key in ("image_size", "layouts"):
        if key in raw:
            raw[key] = tuple(raw[key])
    return BenchmarkConfig(**raw)


def dump_benchmark_config(cfg: BenchmarkConfig, path) -> Path:
    d = {k: v for k, v in asdict(cfg).items() if v is not None}
    path = Path(path)
    path.write_text("\n".join(f"{k} = {_toml_value(v)}" for k, v in sorted(d.items())) + "\n", encoding="utf-8")
    return path


def generate_dataset(cfg: BenchmarkConfig, out_dir) -> dict:
    """Write train / test_A / test_B manifests plus a summary; returns the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bench = generate_benchmark(cfg)
    for split in SPLITS:
        write_dataset(bench[split], out / split)
    counts = {}
    for name in ("set_A", "set_B"):
        counts[name] = {d: sum(1 for s in bench[name] if s.difficulty == d) for d in ("simple", "medium", "hard")}
    summary = {
        "images": {split: len(bench[split]) for split in SPLITS},
        "style_counts": counts,
        "styles": {name: [s.to_dict() for s in bench[name]] for name in ("set_A", "set_B")},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    dump_benchmark_config(cfg, out / "benchmark.toml")
    return summary


def _stage_key(cfg: TrainConfig, stage: int) -> str:
    d = cfg.to_dict()
    drop = set(STAGE3_FIELDS) | {"stages"}
    if stage == 1:
        drop |= set(STAGE2_FIELDS) | {"lambda"}
    return config_hash({k: v for k, v in d.items() if k not in drop})


def _load_split(data_dir, split: str, limit: Optional[int] = None) -> SpotDataset:
    return SpotDataset.load(Path(data_dir) / split, limit=limit)


def train_variant(
    cfg: TrainConfig,
    train_data: SpotDataset,
    val_data: Optional[SpotDataset],
    out_dir,
    cache_dir=None,
    echo: Optional[Callable[[str], None]] = None,
) -> Path:
    """Train one variant, reusing stage-1/2 checkpoints from ``cache_dir`` when another variant made them.

    Returns the final checkpoint path. The variant directory holds the full
    metric log, including the shared stages.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cache_dir is None:
        return train_three_stage(cfg, train_data, val_data, out, echo=echo).checkpoints[cfg.stages[-1]]
    cache = Path(cache_dir)
    resume = None
    for stage in (1, 2):
        if stage not in cfg.stages or (stage == 2 and not cfg.gpm_active):
            continue
        sdir = cache / f"stage{stage}-{_stage_key(cfg, stage)}"
        ckpt = sdir / f"stage{stage}.pt"
        if not ckpt.exists():
            part = cfg.replace(stages=list(range(1, stage + 1)))
            tmp = sdir.with_name(sdir.name + ".partial")
            shutil.rmtree(tmp, ignore_errors=True)
            tmp.mkdir(parents=True)
            if resume is not None:
                shutil.copy(resume.parent / "metrics.jsonl", tmp / "metrics.jsonl")
                shutil.copy(resume.parent / "timing.jsonl", tmp / "timing.jsonl")
            train_three_stage(part, train_data, val_data, tmp, resume_from=resume, echo=echo)
            shutil.rmtree(sdir, ignore_errors=True)
            tmp.rename(sdir)
        resume = ckpt
    if resume is None:
        return train_three_stage(cfg, train_data, val_data, out, echo=echo).checkpoints[cfg.stages[-1]]
    for name in ("metrics.jsonl", "timing.jsonl"):
        shutil.copy(resume.parent / name, out / name)
    result = train_three_stage(cfg, train_data, val_data, out, resume_from=resume, echo=echo)
    return result.checkpoints[cfg.stages[-1]]


def evaluate_ab(checkpoint, data_dir, limit: Optional[int] = None) -> GeneralizationReport:
    model = load_spotter(checkpoint)
    records_a = predict_records(model, _load_split(data_dir, "test_A", limit))
    records_b = predict_records(model, _load_split(data_dir, "test_B", limit))
    return generalization_report(records_a, records_b)


@dataclass
class VariantResult:
    name: str
    seed: int
    ned_a: float
    ned_b: float
    p_b: float
    r_b: float
    f_b: float
    f_a: float
    seconds: float


def run_variants(
    base: TrainConfig,
    variants: Sequence[tuple[str, dict]],
    data_dir,
    out_dir,
    seeds: Sequence[int] = (0, 1, 2),
    train_limit: Optional[int] = None,
    echo: Optional[Callable[[str], None]] = None,
) -> list[VariantResult]:
    """Train and A/B-evaluate every variant for every seed; results are cached per variant directory."""
    out = Path(out_dir)
    train = _load_split(data_dir, "train", train_limit)
    val = _load_split(data_dir, "test_A", base.val_images) if base.val_images else None
    rows = []
    for seed in seeds:
        for name, changes in variants:
            cfg = base.replace(seed=seed, **changes)
            vdir = out / "variants" / f"{_slug(name)}-seed{seed}-{cfg.content_hash()}"
            result_path = vdir / "result.json"
            if not result_path.exists():
                t0 = time.time()
                ckpt = train_variant(cfg, train, val, vdir, cache_dir=out / "shared", echo=echo)
                report = evaluate_ab(ckpt, data_dir)
                (vdir / "report.json").write_text(report.to_json(), encoding="utf-8")
                row = VariantResult(name, seed, report.ned_a, report.ned_b, report.det_b["P"], report.det_b["R"],
                                    report.det_b["F"], report.det_a["F"], time.time() - t0)
                result_path.write_text(json.dumps(asdict(row), indent=2, sort_keys=True), encoding="utf-8")
            rows.append(VariantResult(**json.loads(result_path.read_text(encoding="utf-8"))))
            if echo:
                echo(json.dumps(asdict(rows[-1]), sort_keys=True))
    return rows


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "-" for c in name.lower()).strip("-")


def summarize(rows: Sequence[VariantResult]) -> list[dict]:
    """Mean and range over seeds per variant, in first-seen order."""
    names = list(dict.fromkeys(r.name for r in rows))
    out = []
    for name in names:
        sub = [r for r in rows if r.name == name]
        entry = {"variant": name, "seeds": len(sub)}
        for key in ("p_b", "r_b", "f_b", "ned_b", "ned_a"):
            vals = np.array([getattr(r, key) for r in sub])
            entry[key] = float(vals.mean())
            entry[key + "_range"] = float(vals.max() - vals.min())
        out.append(entry)
    return out


def write_tables(rows: Sequence[VariantResult], out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "ablation.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(asdict(rows[0]).keys()))
        writer.writeheader()
        for r in rows:
            writer.writerow(asdict(r))
    lines = ["| Variant | P | R | F | 1-NED (B) | 1-NED (A) |", "|---|---|---|---|---|---|"]
    for e in summarize(rows):
        cell = lambda k: f"{e[k]:.3f} ± {e[k + '_range'] / 2:.3f}"  # noqa: E731
        lines.append(f"| {e['variant']} | {cell('p_b')} | {cell('r_b')} | {cell('f_b')} | {cell('ned_b')} | {cell('ned_a')} |")
    md_path = out / "ablation.md"
    md_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return csv_path, md_path


def run_ablation(base: TrainConfig, data_dir, out_dir, axis: str, seeds=(0, 1, 2), **kwargs):
    if axis not in ABLATIONS:
        raise ValueError(f"axis must be one of {sorted(ABLATIONS)}, got {axis!r}")
    rows = run_variants(base, ABLATIONS[axis], data_dir, out_dir, seeds, **kwargs)
    write_tables(rows, out_dir)
    return rows
