"""Command-line interface: each subcommand is one pipeline stage.

Stages communicate through files in the run directory (``--out``): datasets
and model parameters as manifest+blob archives, the quantization state as
JSON, importance tables and bit allocations as flat text tables. Every
failure exits non-zero with a single machine-parsable line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import serialize
from .allocation import BitAllocation, allocate_bits, uniform_allocation
from .config import RunConfig
from .data import default_splits
from .errors import ConfigError, VitpqError
from .lrp import ImportanceTable
from .pipeline import (
    calibrate_model,
    evaluate,
    render_report,
    run_ablation,
    score_importance,
    train_checkpoint,
)
from .vit import weight_counts

TRAIN_DATA = "data.train"
CALIB_DATA = "data.calib"
EVAL_DATA = "data.eval"
FP_MODEL = "model.fp"
QUANT_MODEL = "model.quant"
QUANT_STATE = "quant.json"
IMPORTANCE = "importance.txt"
ALLOCATION = "allocation.txt"


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    for attr, field in (("seed", "seed"), ("bits", "base_bits"), ("mode", "mode"),
                        ("n_sigma", "n_sigma"), ("percentile", "percentile"),
                        ("calib_size", "calib_size")):
        value = getattr(args, attr, None)
        if value is not None:
            overrides[field] = value
    return cfg.override(**overrides) if overrides else cfg


def _require(path: Path, hint: str) -> Path:
    # archives are referenced by their base name; plain files directly
    if not (path.exists() or Path(str(path) + ".manifest").exists()):
        raise ConfigError(f"missing {path.name}; run `vitpq {hint}` first")
    return path


def _load_fp_model(out: Path, cfg: RunConfig):
    if cfg.checkpoint:
        return serialize.load_vit_params(cfg.checkpoint)
    return serialize.load_vit_params(_require(out / FP_MODEL, "train-toy"))


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    train, calib, eval_ds = default_splits(cfg.data_seed, cfg.train_per_class,
                                           cfg.eval_per_class, cfg.calib_size)
    serialize.save_dataset(out / TRAIN_DATA, train)
    serialize.save_dataset(out / CALIB_DATA, calib)
    serialize.save_dataset(out / EVAL_DATA, eval_ds)
    cfg.save(out / "config.json")
    print(f"wrote {len(train)} train / {len(calib)} calib / {len(eval_ds)} eval images to {out}")
    return 0


def cmd_train_toy(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    train = serialize.load_dataset(_require(out / TRAIN_DATA, "gen-data"))
    params = train_checkpoint(cfg, train)
    serialize.save_vit_params(out / FP_MODEL, params)
    from .vit import mean_cross_entropy
    ce = mean_cross_entropy(params, train.images, train.labels)
    print(f"trained {cfg.train_epochs} epochs (lr={cfg.train_lr}); train CE {ce:.4f}; wrote {FP_MODEL}")
    return 0


def cmd_score_importance(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    params = _load_fp_model(out, cfg)
    train = serialize.load_dataset(_require(out / TRAIN_DATA, "gen-data"))
    table = score_importance(params, train, cfg)
    (out / IMPORTANCE).write_text(table.to_text())
    print(f"scored {cfg.importance_samples} images; wrote {IMPORTANCE}")
    return 0


def cmd_allocate_bits(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    counts = weight_counts(cfg.vit)
    if cfg.mode == "uniform":
        alloc = uniform_allocation(cfg.base_bits, cfg.vit.blocks)
    else:
        table = ImportanceTable.from_text(
            _require(out / IMPORTANCE, "score-importance").read_text())
        alloc = allocate_bits(table.importance, cfg.base_bits, cfg.mode, counts,
                              boost_blocks=cfg.boost_blocks, demote_depth=cfg.demote_depth)
    (out / ALLOCATION).write_text(alloc.to_text())
    print(f"mode={cfg.mode} base={cfg.base_bits}; wrote {ALLOCATION}")
    return 0


def _calibrate_and_save(cfg: RunConfig, out: Path, alloc) -> None:
    params = _load_fp_model(out, cfg)
    calib = serialize.load_dataset(_require(out / CALIB_DATA, "gen-data"))
    params_q, qmodel = calibrate_model(params, calib, alloc, cfg)
    serialize.save_vit_params(out / QUANT_MODEL, params_q)
    serialize.save_quant_model(out / QUANT_STATE, qmodel)
    print(f"calibrated {len(calib)} images (ln mode {cfg.ln_act_mode}); "
          f"wrote {QUANT_MODEL} and {QUANT_STATE}")


def cmd_calibrate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    _calibrate_and_save(cfg, out, uniform_allocation(cfg.base_bits, cfg.vit.blocks))
    return 0


def cmd_quantize(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    alloc_path = Path(args.allocation) if args.allocation else out / ALLOCATION
    alloc = BitAllocation.from_text(_require(alloc_path, "allocate-bits").read_text())
    _calibrate_and_save(cfg, out, alloc)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    eval_ds = serialize.load_dataset(_require(out / EVAL_DATA, "gen-data"))
    prov = {"config_hash": cfg.config_hash(), "seed": cfg.seed}
    if args.fp_only:
        params = _load_fp_model(out, cfg)
        report = evaluate(params, None, eval_ds, label=args.tag or "full-precision",
                          provenance=prov)
    else:
        params = serialize.load_vit_params(_require(out / QUANT_MODEL, "calibrate"))
        qmodel = serialize.load_quant_model(_require(out / QUANT_STATE, "calibrate"))
        report = evaluate(params, qmodel, eval_ds, label=args.tag or "quantized",
                          provenance=prov)
    path = out / f"eval.{report.label}.json"
    path.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    print(report.human_row())
    print(f"wrote {path.name}")
    return 0


def cmd_report(args) -> int:
    out = _out_dir(args)
    rows = sorted(out.glob("eval.*.json"))
    if not rows:
        raise ConfigError("no eval.*.json files in the run directory; run `vitpq evaluate`")
    from .pipeline import EvalReport
    print(f"{'label':<24s} {'top1':>7s} {'agree':>7s} {'|dlogit|':>10s} {'size(bits)':>12s}")
    for path in rows:
        r = EvalReport.from_dict(json.loads(path.read_text()))
        print(f"{r.label:<24s} {100 * r.top1:6.2f}% {100 * r.agreement:6.2f}% "
              f"{r.mean_abs_logit_dev:10.6f} {r.model_size_bits:12d}")
    return 0


def cmd_reproduce_ablation(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    train, calib, eval_ds = default_splits(cfg.data_seed, cfg.train_per_class,
                                           cfg.eval_per_class, cfg.calib_size)
    serialize.save_dataset(out / TRAIN_DATA, train)
    serialize.save_dataset(out / CALIB_DATA, calib)
    serialize.save_dataset(out / EVAL_DATA, eval_ds)
    if cfg.checkpoint:
        params = serialize.load_vit_params(cfg.checkpoint)
    else:
        params = train_checkpoint(cfg, train)
        serialize.save_vit_params(out / FP_MODEL, params)
    result = run_ablation(cfg, params, calib, eval_ds, train)
    (out / IMPORTANCE).write_text(result.importance.to_text())
    report_doc = {
        "config": json.loads(cfg.to_json()),
        "config_hash": result.config_hash,
        "quantizer_modes": [r.to_dict() for r in result.quantizer_rows],
        "bit_allocation": [r.to_dict() for r in result.allocation_rows],
    }
    (out / "report.json").write_text(json.dumps(report_doc, indent=1, sort_keys=True) + "\n")
    text = render_report(result, cfg)
    (out / "report.txt").write_text(text)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vitpq",
        description="Relevance-guided mixed-precision post-training quantization "
                    "for a compact vision transformer",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="RunConfig JSON path")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--bits", type=int, default=None, help="base bit width override")
        p.add_argument("--mode", type=str, default=None,
                       choices=("uniform", "paper", "greedy"), help="allocation mode")
        p.add_argument("--n-sigma", dest="n_sigma", type=float, default=None,
                       help="channel clip width in standard deviations")
        p.add_argument("--percentile", type=float, default=None,
                       help="activation calibration percentile")
        p.add_argument("--calib-size", dest="calib_size", type=int, default=None,
                       help="number of calibration images")
        p.add_argument("--out", type=str, default="runs/default", help="run directory")

    for name, fn, extra in (
        ("gen-data", cmd_gen_data, None),
        ("train-toy", cmd_train_toy, None),
        ("score-importance", cmd_score_importance, None),
        ("allocate-bits", cmd_allocate_bits, None),
        ("calibrate", cmd_calibrate, None),
        ("quantize", cmd_quantize, "allocation"),
        ("evaluate", cmd_evaluate, "evaluate"),
        ("report", cmd_report, None),
        ("reproduce-ablation", cmd_reproduce_ablation, None),
    ):
        p = sub.add_parser(name)
        common(p)
        if extra == "allocation":
            p.add_argument("--allocation", type=str, default=None,
                           help="allocation table path (default: <out>/allocation.txt)")
        if extra == "evaluate":
            p.add_argument("--fp-only", action="store_true",
                           help="evaluate the full-precision model instead of the quantized one")
            p.add_argument("--tag", type=str, default=None, help="report row label")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (VitpqError, OSError, ValueError, KeyError) as exc:
        message = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
