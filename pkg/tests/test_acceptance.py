"""Acceptance suite: one test per criterion, each printing a pass line.

Run `pytest tests/test_acceptance.py -v -s` to see the per-criterion lines
with their measured values and runtimes. The quantizer-mode and
bit-allocation comparisons use the shipped checkpoint from assets/ and the
canonical dataset splits.
"""

import json
import time

import numpy as np
import pytest

from lrp_oracle import ORACLE_CFG, _oracle_qkv_input_relevance
from vitpq import cli, crl, lrp, pipeline, vit
from vitpq import tensor as T
from vitpq.allocation import (
    GREEDY_MODE,
    allocate_bits,
    model_size_bits,
    uniform_allocation,
)
from vitpq.layers import LayerId, block_layer_ids
from vitpq.quantizers import (
    LOGSQRT2,
    PER_LAYER,
    QuantParams,
    fake_quant,
    log_dequant,
    logsqrt2_to_log2,
    range_to_uniform_params,
    two_scale_dequant,
)

TOY = vit.ViTConfig()


def report(n, name, elapsed, budget, detail=""):
    print(f"ACCEPTANCE {n} ({name}): PASS in {elapsed:.1f}s (budget {budget}s) {detail}")


class TestAcceptance:
    def test_01_reparameterization_exactness(self):
        t0 = time.time()
        rng_img = np.random.default_rng(123)
        worst = 0.0
        for seed in range(200):
            rng = np.random.default_rng(seed)
            arrays = vit.init_params(TOY, seed).to_arrays()
            arrays = {k: v.copy() for k, v in arrays.items()}
            for i in range(TOY.blocks):
                for ln in ("ln1", "ln2"):
                    arrays[f"blocks.{i}.{ln}.gamma"] = rng.uniform(0.5, 2.0, TOY.embed_dim)
                    arrays[f"blocks.{i}.{ln}.beta"] = rng.normal(0.0, 0.5, TOY.embed_dim)
            params = vit.ViTParams.from_arrays(TOY, arrays)
            calib_imgs = rng_img.uniform(-1, 1, (2, 32, 32, 3))
            records = [vit.forward(params, img, hooks=True).record for img in calib_imgs]
            folded, _ = crl.apply_crl(params, records, n_sigma=2.0, bits=4)
            probe = rng_img.uniform(-1, 1, (32, 32, 3))
            dev = np.abs(vit.predict_logits(folded, probe) - vit.predict_logits(params, probe)).max()
            worst = max(worst, float(dev))
        elapsed = time.time() - t0
        assert worst <= 1e-9
        assert elapsed <= 60
        report(1, "reparameterization exactness", elapsed, 60, f"max |dlogit| {worst:.2e}")

    def test_02_quantizer_correctness(self):
        t0 = time.time()
        rng = np.random.default_rng(7)
        checked = 0
        while checked < 10_000:
            lo = rng.uniform(-20, 5)
            hi = lo + rng.uniform(1e-3, 40)
            bits = int(rng.integers(2, 9))
            qp = range_to_uniform_params(np.asarray(lo), np.asarray(hi), bits, PER_LAYER)
            grid_lo = float(qp.scale * (0 - qp.zero_point))
            grid_hi = float(qp.scale * (qp.qmax - qp.zero_point))
            x = rng.uniform(grid_lo, grid_hi, size=100)
            err = np.abs(fake_quant(x, qp) - x)
            assert err.max() <= float(qp.scale) / 2 + 1e-15
            checked += x.size
        worst_rel = 0.0
        for bits in range(1, 9):
            scale = 0.7344
            qp = QuantParams(LOGSQRT2, bits, PER_LAYER, np.asarray(scale))
            q = np.arange(0, qp.qmax + 1)
            direct = log_dequant(q, qp)
            k, parity = logsqrt2_to_log2(q, scale)
            rel = np.abs(two_scale_dequant(k, parity, scale) - direct) / direct
            worst_rel = max(worst_rel, float(rel.max()))
        elapsed = time.time() - t0
        assert worst_rel <= 1e-15
        assert elapsed <= 10
        report(2, "quantizer correctness", elapsed, 10,
               f"{checked} roundtrip cases, two-scale rel err {worst_rel:.1e}")

    def test_03_gradient_fidelity(self):
        t0 = time.time()
        rng = np.random.default_rng(11)

        def rel_err(got, fd):
            denom = np.maximum(np.maximum(np.abs(fd), np.abs(got)), 1e-4)
            return float((np.abs(got - fd) / denom).max())

        def check(build, arrays):
            tensors = [T.tensor(a) for a in arrays]
            with T.Tape() as tape:
                out = build(*tensors)
            grads = T.backward(tape, out, np.ones(out.shape))
            for idx, base in enumerate(arrays):
                def f(x, idx=idx):
                    probe = list(arrays)
                    probe[idx] = x
                    return float(np.sum(build(*[T.tensor(a) for a in probe]).data))
                assert rel_err(grads[tensors[idx]], T.finite_difference(f, base)) <= 1e-5

        r = lambda *s: rng.uniform(-2, 2, s)
        primitives = {
            "add": (lambda a, b: T.sum_all(T.add(a, b)), (r(3, 4), r(3, 4))),
            "mul": (lambda a, b: T.sum_all(T.mul(a, b)), (r(3, 4), r(3, 4))),
            "scale": (lambda a: T.sum_all(T.scale(a, 1.3)), (r(3, 3),)),
            "matmul": (lambda a, b: T.sum_all(T.matmul(a, b)), (r(2, 3, 4), r(2, 4, 2))),
            "linear": (lambda x, w, b: T.sum_all(T.linear(x, w, b)), (r(4, 3), r(3, 5), r(5))),
            "layernorm": (lambda x, g, b: T.sum_all(T.layernorm(x, g, b)), (r(3, 6), r(6), r(6))),
            "softmax": (lambda x: T.sum_all(T.mul(T.softmax(x), x)), (r(3, 5),)),
            "log_softmax": (lambda x: T.sum_all(T.mul(T.log_softmax(x), x)), (r(3, 5),)),
            "gelu": (lambda x: T.sum_all(T.gelu(x)), (r(4, 4),)),
            "exp": (lambda x: T.sum_all(T.exp(x)), (r(3, 3),)),
            "log": (lambda x: T.sum_all(T.log(x)), (np.abs(r(3, 3)) + 0.5,)),
            "reshape": (lambda x: T.sum_all(T.mul(T.reshape(x, (2, 6)), T.reshape(x, (2, 6)))), (r(3, 4),)),
            "transpose": (lambda x: T.sum_all(T.mul(T.transpose(x, (1, 0)), T.transpose(x, (1, 0)))), (r(3, 4),)),
            "narrow": (lambda x: T.sum_all(T.mul(T.narrow(x, 1, 0, 2), T.narrow(x, 1, 2, 2))), (r(3, 4),)),
            "concat": (lambda a, b: T.sum_all(T.gelu(T.concat([a, b], 0))), (r(2, 3), r(3, 3))),
            "sum": (lambda x: T.sum_all(T.exp(T.sum_all(x))), (r(2, 3),)),
        }
        from vitpq.tensor import _OPS
        assert set(primitives) == set(_OPS), "every primitive must be covered"
        for name, (build, arrays) in primitives.items():
            check(build, arrays)

        cfg = vit.ViTConfig(image_size=4, patch_size=2, channels=1, embed_dim=4,
                            heads=2, blocks=1, mlp_ratio=2.0, classes=2)
        arrays = {name: rng.normal(0, 0.5, shape)
                  for name, shape in vit.expected_shapes(cfg).items()}
        img = rng.uniform(-1, 1, (4, 4, 1))
        params = vit.ViTParams.from_arrays(cfg, arrays)
        named = dict(params.named())
        with T.Tape() as tape:
            logits = vit._forward_impl(params, img)
        seed_vec = np.zeros(2)
        seed_vec[1] = 1.0
        grads = T.backward(tape, logits, seed_vec)
        worst = 0.0
        for name in named:
            def f(x, name=name):
                probe = dict(arrays)
                probe[name] = x
                p = vit.ViTParams.from_arrays(cfg, probe)
                return float(vit.predict_logits(p, img)[1])
            worst = max(worst, rel_err(grads[named[name]], T.finite_difference(f, arrays[name])))
        elapsed = time.time() - t0
        assert worst <= 1e-5
        assert elapsed <= 60
        report(3, "gradient fidelity", elapsed, 60,
               f"all primitives + full 1-block model, worst rel err {worst:.1e}")

    def test_04_lrp_conservation(self, toy_checkpoint):
        t0 = time.time()
        rng = np.random.default_rng(29)
        worst_drift = 0.0
        worst_total = 0.0
        for _ in range(50):
            img = rng.uniform(-1.5, 1.5, (32, 32, 3))
            state = lrp.lrp_run(toy_checkpoint, img, int(rng.integers(0, 3)))
            worst_drift = max(worst_drift, state.max_step_drift())
            worst_total = max(worst_total, abs(float(state.input_relevance().sum()) - 1.0))
        elapsed = time.time() - t0
        assert worst_drift <= 1e-8
        assert worst_total <= 1e-6
        assert elapsed <= 60
        report(4, "LRP conservation", elapsed, 60,
               f"max step drift {worst_drift:.1e}, input total off by {worst_total:.1e}")

    def test_05_lrp_oracle_equivalence(self):
        t0 = time.time()
        worst = 0.0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            arrays = {name: rng.normal(0, 0.6, shape)
                      for name, shape in vit.expected_shapes(ORACLE_CFG).items()}
            params = vit.ViTParams.from_arrays(ORACLE_CFG, arrays)
            image = rng.uniform(-1, 1, (2, 2, 1))
            c = int(rng.integers(0, 2))
            state = lrp.lrp_run(params, image, c)
            got = state.relevance_of(state.record.inputs[LayerId(1, "qkv")][0])
            expected = _oracle_qkv_input_relevance(arrays, image, c)
            worst = max(worst, float(np.abs(got - expected).max()))
        elapsed = time.time() - t0
        assert worst <= 1e-8
        report(5, "LRP oracle equivalence", elapsed, 60, f"max deviation {worst:.1e}")

    def test_06_importance_normalization(self, toy_checkpoint, toy_splits):
        t0 = time.time()
        train, _, _ = toy_splits
        contributions = lrp.contribution_scores(toy_checkpoint, train, t_samples=8, seed=3)
        table = lrp.importance_scores(contributions, 8)
        total = sum(table.importance.values())
        assert abs(total - 1.0) <= 1e-10

        counts = vit.weight_counts(TOY)
        base_alloc = allocate_bits(table.importance, 4, GREEDY_MODE, counts)
        scaled = lrp.importance_scores({k: 137.0 * v for k, v in contributions.items()}, 8)
        scaled_alloc = allocate_bits(scaled.importance, 4, GREEDY_MODE, counts)
        assert base_alloc.entries == scaled_alloc.entries
        rank_a = sorted(table.importance, key=lambda l: table.importance[l])
        rank_b = sorted(scaled.importance, key=lambda l: scaled.importance[l])
        assert rank_a == rank_b
        elapsed = time.time() - t0
        report(6, "importance normalization", elapsed, 60,
               f"sum(I) off by {abs(total - 1.0):.1e}, rescale-invariant")

    def test_07_size_budget_invariant(self):
        t0 = time.time()
        counts = vit.weight_counts(TOY)
        baseline = model_size_bits(uniform_allocation(4, TOY.blocks), counts)
        rng = np.random.default_rng(41)
        lids = block_layer_ids(TOY.blocks)
        for _ in range(100):
            raw = {lid: float(v) for lid, v in zip(lids, rng.uniform(1e-4, 5, len(lids)))}
            total = sum(raw.values())
            importance = {k: v / total for k, v in raw.items()}
            alloc = allocate_bits(importance, 4, GREEDY_MODE, counts)
            assert model_size_bits(alloc, counts) <= baseline
        elapsed = time.time() - t0
        assert elapsed <= 10
        report(7, "size budget invariant", elapsed, 10, "100 random importance tables")

    def test_08_quantizer_mode_ordering(self, toy_checkpoint, toy_splits, asset_config):
        t0 = time.time()
        _, calib, eval_ds = toy_splits
        assert len(eval_ds) == 600
        alloc = uniform_allocation(4, TOY.blocks)
        top1 = {}
        for mode in ("layer_wise", "channel_wise", "clipped_cw"):
            params_q, qmodel = pipeline.calibrate_model(
                toy_checkpoint, calib, alloc, asset_config.override(ln_act_mode=mode))
            top1[mode] = pipeline.evaluate(params_q, qmodel, eval_ds, label=mode).top1
        elapsed = time.time() - t0
        assert top1["clipped_cw"] >= top1["channel_wise"] >= top1["layer_wise"]
        assert top1["layer_wise"] <= min(top1["clipped_cw"], top1["channel_wise"]) - 0.02
        assert elapsed <= 300
        report(8, "quantizer-mode ordering", elapsed, 300,
               f"clipped {100 * top1['clipped_cw']:.2f} >= channel {100 * top1['channel_wise']:.2f} "
               f">= layer {100 * top1['layer_wise']:.2f} (gap "
               f"{100 * (top1['channel_wise'] - top1['layer_wise']):.2f} pts)")

    def test_09_mixed_precision_allocation(self, toy_checkpoint, toy_splits, asset_config,
                                           tmp_path):
        t0 = time.time()
        train, calib, eval_ds = toy_splits
        cfg = asset_config
        assert cfg.importance_samples == 256
        table = pipeline.score_importance(toy_checkpoint, train, cfg)
        counts = vit.weight_counts(TOY)
        greedy = allocate_bits(table.importance, 4, GREEDY_MODE, counts,
                               boost_blocks=cfg.boost_blocks)
        uniform = uniform_allocation(4, TOY.blocks)
        size_mp = model_size_bits(greedy, counts)
        size_uni = model_size_bits(uniform, counts)
        assert size_mp <= size_uni

        params_u, qmodel_u = pipeline.calibrate_model(toy_checkpoint, calib, uniform, cfg)
        row_u = pipeline.evaluate(params_u, qmodel_u, eval_ds, label="uniform-4/4")
        params_m, qmodel_m = pipeline.calibrate_model(toy_checkpoint, calib, greedy, cfg)
        row_m = pipeline.evaluate(params_m, qmodel_m, eval_ds, label="boost+LRP-greedy")
        assert row_m.top1 >= row_u.top1

        proof = tmp_path / "budget-report.txt"
        proof.write_text(
            f"{row_u.label}: top1={row_u.top1:.4f} size={size_uni} bits\n"
            f"{row_m.label}: top1={row_m.top1:.4f} size={size_mp} bits\n"
            f"budget satisfied: {size_mp} <= {size_uni}\n"
        )
        elapsed = time.time() - t0
        assert elapsed <= 600
        report(9, "mixed-precision allocation", elapsed, 600,
               f"MP {100 * row_m.top1:.2f} >= uniform {100 * row_u.top1:.2f} at "
               f"{size_mp} <= {size_uni} bits ({proof})")

    def test_10_full_pipeline_determinism(self, asset_config, tmp_path):
        t0 = time.time()
        from conftest import ASSETS
        cfg_path = tmp_path / "cfg.json"
        asset_config.override(checkpoint=str(ASSETS / "toy-checkpoint")).save(cfg_path)
        outputs = []
        for run in ("run-a", "run-b"):
            out = tmp_path / run
            code = cli.main(["reproduce-ablation", "--config", str(cfg_path),
                             "--out", str(out)])
            assert code == 0
            outputs.append(((out / "report.json").read_bytes(),
                            (out / "report.txt").read_bytes()))
        assert outputs[0][0] == outputs[1][0], "report.json differs between runs"
        assert outputs[0][1] == outputs[1][1], "report.txt differs between runs"
        elapsed = time.time() - t0
        report(10, "full pipeline determinism", elapsed, 600,
               f"two reproduce-ablation runs byte-identical ({len(outputs[0][0])} bytes)")
