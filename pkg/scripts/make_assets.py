#!/usr/bin/env python3
"""Regenerate the committed toy checkpoint deterministically.

The checkpoint is trained with the pinned configuration below, then given
the seeded channel-spread profile (see crl.widen_channel_variation) so its
post-LayerNorm activations exhibit the inter-channel variation that the
quantizer-mode comparison is about. Run from the repository root:

    python3 scripts/make_assets.py
"""

import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from vitpq import data, pipeline, serialize  # noqa: E402
from vitpq.config import RunConfig  # noqa: E402

ASSET_CONFIG = RunConfig(
    seed=0,
    train_per_class=128,
    eval_per_class=200,
    train_epochs=40,
    train_lr=0.3,
    train_batch=32,
    channel_spread_seed=99,
    checkpoint="assets/toy-checkpoint",
)


def main() -> int:
    assets = ROOT / "assets"
    assets.mkdir(exist_ok=True)
    cfg = ASSET_CONFIG
    train, calib, eval_ds = data.default_splits(
        cfg.data_seed, cfg.train_per_class, cfg.eval_per_class, cfg.calib_size
    )
    print(f"training {cfg.train_epochs} epochs on {len(train)} images ...")
    params = pipeline.train_checkpoint(cfg, train)
    serialize.save_vit_params(assets / "toy-checkpoint", params)
    cfg.save(assets / "asset-config.json")

    report = pipeline.evaluate(params, None, eval_ds, label="full-precision")
    print(report.human_row())
    print(f"wrote {assets / 'toy-checkpoint'}.{{manifest,blob}} and asset-config.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
