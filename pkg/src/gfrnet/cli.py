"""``gfrnet`` command line: gen-data, train, eval, infer, gradcheck, ablate.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from . import checkpoint, gradcheck
from .arch import forward, init_params, labels_from_scores
from .autodiff import DIFFERENTIABLE_OPS, corrupt_gradient
from .config import ConfigError, load as load_config
from .data import (VGG_MEAN, VGG_STD, DataError, Palette, generate, load_image_ppm, load_palette,
                   normalize, save_image_ppm, save_labels_pgm, write_dataset)
from .experiments import eval_samples, load_dataset, palette_for, run_ablation, write_ablation_csv
from .metrics import metrics, stage_names, stage_report, write_class_csv, write_stage_csv
from .tensor import get_dtype
from .train import NumericError, train

log = logging.getLogger("gfrnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _run_config(args):
    run = load_config(args.config)
    if args.seed is not None:
        run = run.with_overrides(seed=args.seed)
    return run


def _out_dir(args, run=None) -> Path:
    """``--out`` wins, then ``$GFRNET_OUTPUT_DIR``, then the config's ``output_dir``."""
    env = os.environ.get("GFRNET_OUTPUT_DIR")
    if args.out:
        out = Path(args.out)
    elif env:
        out = Path(env)
    else:
        out = Path(run["output_dir"]) if run else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    run = _run_config(args)
    ds = run["eval_dataset"] if args.split == "test" and run["eval_dataset"] else run["dataset"]
    if "generator" not in ds:
        raise ConfigError("gen-data needs a generator dataset, not a manifest")
    samples = generate({**ds, "num_classes": run["num_classes"]}, run.seed, args.split)
    out = _out_dir(args, run)
    manifest = write_dataset(out, samples, Palette.default(run["num_classes"]))
    print(f"wrote {len(samples)} samples to {manifest}")
    return EXIT_OK


def _write_loss_csv(path, history, num_stages):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iter", *(f"l_{k}" for k in range(1, num_stages + 1)), "total", "lr"])
        for it, losses, total, lr in history:
            w.writerow([it, *(repr(float(x)) for x in losses), repr(float(total)), repr(float(lr))])


def cmd_train(args) -> int:
    run = _run_config(args)
    arch, tc = run.arch(), run.train_config()
    samples = load_dataset(run)
    out = _out_dir(args, run)

    def snapshot(it, params):
        checkpoint.save(out / f"iter_{it:06d}.ckpt", arch, params)

    result = train(arch, tc, samples, run.seed, params=init_params(arch, run.seed),
                   on_checkpoint=snapshot, checkpoint_every=run["checkpoint_every"])
    checkpoint.save(out / "final.ckpt", arch, result.params)
    _write_loss_csv(out / "loss.csv", result.history, arch.num_stages)
    print(f"trained {tc.max_iter} iterations; checkpoint {out / 'final.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run = _run_config(args)
    arch, params = checkpoint.load(args.checkpoint)
    tc = run.train_config()
    if args.dataset:
        samples = load_dataset(run.with_overrides(eval_dataset={"manifest": args.dataset}), "eval_dataset")
        pal_path = Path(args.dataset).parent / "palette.txt"
        palette = load_palette(pal_path) if pal_path.exists() else Palette.default(arch.num_classes)
    else:
        samples = eval_samples(run)
        palette = palette_for(run)
    rows = stage_report(params, arch, samples, tc.mean, tc.std)
    out = _out_dir(args, run)
    write_stage_csv(out / "stages.csv", rows)
    final = metrics(rows[-1].confusion)
    write_class_csv(out / "classes.csv", final, palette.names[: arch.num_classes])
    for r in rows:
        print(f"{r.stage:8s} mean_iou={r.mean_iou:.4f} pixel_acc={r.pixel_acc:.4f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    arch, params = checkpoint.load(args.checkpoint)
    image = load_image_ppm(args.image)
    h, w = image.shape[2:]
    arch.check_input(h, w)
    palette = load_palette(args.palette) if args.palette else Palette.default(arch.num_classes)
    batch = normalize(image, args.mean or VGG_MEAN, args.std or VGG_STD).astype(get_dtype())
    params.set_mode("infer")
    outs = forward(batch, params, arch)
    out = _out_dir(args)
    stem = Path(args.image).stem
    labels = labels_from_scores(outs.refined[-1].value, h, w)[0]
    save_labels_pgm(out / f"{stem}_labels.pgm", labels)
    save_image_ppm(out / f"{stem}_color.ppm", palette.colorize(labels))
    if args.dump_stages:
        for name, m in zip(stage_names(arch.num_stages), outs.maps):
            stage_labels = m.value.argmax(axis=1)[0]
            save_labels_pgm(out / f"{stem}_{name}.pgm", stage_labels)
    print(f"wrote {out / (stem + '_labels.pgm')}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ops = args.ops or list(DIFFERENTIABLE_OPS)
    unknown = set(ops) - set(DIFFERENTIABLE_OPS)
    if unknown:
        raise ConfigError(f"unknown ops {sorted(unknown)}; choose from {list(DIFFERENTIABLE_OPS)}")
    failed = 0
    for op in ops:
        if args.corrupt == op:
            with corrupt_gradient(op, 1.01):
                rep = gradcheck.check_op(op, args.instances, args.seed or 0)
        else:
            rep = gradcheck.check_op(op, args.instances, args.seed or 0)
        status = "PASS" if rep.passed else "FAIL"
        failed += not rep.passed
        print(f"{status} {rep.op:14s} instances={rep.instances} max_rel_err={rep.max_rel_error:.3e} "
              f"({rep.seconds:.2f}s)")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def cmd_ablate(args) -> int:
    run = _run_config(args)
    if not run["seeds"]:
        raise ConfigError("ablate needs a 'seeds' list in the config")
    results = run_ablation(run)
    out = _out_dir(args, run)
    write_ablation_csv(out / "ablation.csv", results)
    print(f"wrote {len(results)} cells to {out / 'ablation.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gfrnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True)
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("gen-data", help="write a synthetic PPM/PGM dataset")
    common(sp)
    sp.add_argument("--split", choices=("train", "test"), default="train")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train and write checkpoint + loss.csv")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="stage-wise and per-class metrics")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", help="manifest to evaluate (default: config eval set)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="label one PPM image")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("image")
    sp.add_argument("--palette")
    sp.add_argument("--dump-stages", action="store_true")
    sp.add_argument("--mean", type=float, nargs=3)
    sp.add_argument("--std", type=float, nargs=3)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    common(sp, config=False)
    sp.add_argument("--instances", type=int, default=20)
    sp.add_argument("--ops", nargs="*")
    sp.add_argument("--corrupt", help=argparse.SUPPRESS)  # negative-control test hook
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="gating x deep-supervision grid over seeds")
    common(sp)
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, checkpoint.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
