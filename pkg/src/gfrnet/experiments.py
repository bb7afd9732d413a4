"""Dataset resolution and the paired ablation grid (gating mode x deep supervision)."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

from .data import Palette, generate, load_manifest, load_palette
from .metrics import stage_report
from .train import train

log = logging.getLogger(__name__)

# name -> (variant, gate_mode)
MODELS = {
    "gfrnet-mul": ("gfrnet", "mul"),
    "gfrnet-add": ("gfrnet", "add"),
    "lrn": ("lrn", "mul"),
}
SUPERVISION = ("with-DS", "without-DS")
ABLATION_HEADER = ["cell", "variant", "gate_mode", "supervision", "seed", "stage", "mean_iou", "pixel_acc"]


def load_dataset(run, key: str = "dataset", split: str = "train") -> list:
    """Samples for ``run[key]``: a manifest on disk or an in-memory generator."""
    ds = run[key]
    if "manifest" in ds:
        return load_manifest(ds["manifest"], run["num_classes"])
    spec = {**ds, "num_classes": run["num_classes"]}
    return generate(spec, run.seed, split)


def eval_samples(run) -> list:
    """Held-out samples: ``eval_dataset`` if set, else the test split of the training generator."""
    if run["eval_dataset"] is not None:
        return load_dataset(run, "eval_dataset", "test")
    if "manifest" in run["dataset"]:
        return load_dataset(run)
    return load_dataset(run, "dataset", "test")


def palette_for(run) -> Palette:
    ds = run["dataset"]
    if "manifest" in ds:
        p = Path(ds["manifest"]).parent / "palette.txt"
        if p.exists():
            return load_palette(p)
    return Palette.default(run["num_classes"])


def deep_supervision_weights(num_stages: int, enabled: bool, base=None) -> list:
    """All stages supervised, or only the final one (the without-DS control)."""
    if enabled:
        return list(base) if base is not None else [1.0] * num_stages
    return [0.0] * (num_stages - 1) + [1.0]


@dataclass
class CellResult:
    cell: str
    supervision: str
    seed: int
    rows: list  # StageRow per supervised map


def run_cell(run, model: str, supervision: str, seed: int, train_set, test_set) -> CellResult:
    """Train one (model, supervision, seed) cell; everything else comes from ``run``.

    Parameters are initialized from ``seed`` by layer name, so cells that share
    a seed share every identically shaped layer (encoder and head for all three
    models), and DS/no-DS cells differ only in their stage weights.
    """
    variant, mode = MODELS[model]
    arch = run.arch(variant=variant, gate_mode=mode)
    sw = deep_supervision_weights(arch.num_stages, supervision == "with-DS", run["stage_weights"])
    tc = run.train_config(stage_weights=sw)
    result = train(arch, tc, train_set, seed=seed)
    rows = stage_report(result.params, arch, test_set, tc.mean, tc.std)
    log.info("%s %s seed=%d final mIoU %.4f", model, supervision, seed, rows[-1].mean_iou)
    return CellResult(model, supervision, seed, rows)


def run_ablation(run, models=tuple(MODELS), supervisions=SUPERVISION, seeds=None) -> list:
    seeds = seeds if seeds is not None else (run["seeds"] or [run.seed])
    train_set = load_dataset(run)
    test_set = eval_samples(run)
    results = []
    for seed in seeds:
        for model in models:
            for sup in supervisions:
                results.append(run_cell(run, model, sup, int(seed), train_set, test_set))
    return results


def write_ablation_csv(path, results):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ABLATION_HEADER)
        for r in results:
            variant, mode = MODELS[r.cell]
            for row in r.rows:
                w.writerow([r.cell, variant, mode, r.supervision, r.seed, row.stage,
                            f"{row.mean_iou:.6f}", f"{row.pixel_acc:.6f}"])
