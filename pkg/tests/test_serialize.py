"""File formats: manifest+blob archives, params/datasets, QuantModel JSON."""

import numpy as np
import pytest

from vitpq import serialize, vit
from vitpq.allocation import uniform_allocation
from vitpq.config import RunConfig
from vitpq.data import generate_toy_dataset
from vitpq.errors import ContractError
from vitpq.layers import LayerId
from vitpq.quantizers import PER_CHANNEL, PER_LAYER, QuantModel, QuantParams, UNIFORM, LOGSQRT2

TINY = vit.ViTConfig(image_size=16, patch_size=8, embed_dim=16, heads=2,
                     blocks=2, mlp_ratio=2.0)


class TestArchive:
    def test_roundtrip_mixed_dtypes(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {
            "a": rng.normal(size=(3, 4)).astype(np.float32).astype(np.float64),
            "b": rng.integers(0, 100, size=7),
            "c": rng.normal(size=(2, 2, 2)),
        }
        serialize.save_archive(tmp_path / "x", arrays,
                               {"a": "f32", "b": "i64", "c": "f64"}, {"k": "v 1"})
        back, meta = serialize.load_archive(tmp_path / "x")
        np.testing.assert_array_equal(back["a"], arrays["a"].astype(np.float32))
        np.testing.assert_array_equal(back["b"], arrays["b"])
        np.testing.assert_array_equal(back["c"], arrays["c"])
        assert meta == {"k": "v 1"}

    def test_not_an_archive(self, tmp_path):
        (tmp_path / "y.manifest").write_text("garbage\n")
        (tmp_path / "y.blob").write_bytes(b"")
        with pytest.raises(ContractError):
            serialize.load_archive(tmp_path / "y")


class TestVitParamsRoundtrip:
    def test_load_save_load_bit_exact(self, tmp_path):
        params = vit.init_params(TINY, seed=0)
        serialize.save_vit_params(tmp_path / "m", params)
        once = serialize.load_vit_params(tmp_path / "m")
        assert once.config == TINY
        serialize.save_vit_params(tmp_path / "m2", once)
        twice = serialize.load_vit_params(tmp_path / "m2")
        for (name, a), (_, b) in zip(once.named(), twice.named()):
            np.testing.assert_array_equal(a.data, b.data, err_msg=name)

    def test_float32_widening(self, tmp_path):
        params = vit.init_params(TINY, seed=1)
        serialize.save_vit_params(tmp_path / "m", params)
        loaded = serialize.load_vit_params(tmp_path / "m")
        for (name, a), (_, b) in zip(params.named(), loaded.named()):
            np.testing.assert_array_equal(b.data, a.data.astype(np.float32).astype(np.float64))


class TestDatasetRoundtrip:
    def test_bit_exact(self, tmp_path):
        ds = generate_toy_dataset(3, 4, split="calib")
        serialize.save_dataset(tmp_path / "d", ds)
        back = serialize.load_dataset(tmp_path / "d")
        np.testing.assert_array_equal(back.images, ds.images)
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert back.split == "calib"


class TestQuantModelRoundtrip:
    def _qmodel(self):
        rng = np.random.default_rng(2)
        weights = {
            LayerId(1, "qkv"): QuantParams(UNIFORM, 4, PER_CHANNEL,
                                           rng.uniform(0.01, 1, 48),
                                           rng.integers(0, 15, 48)),
        }
        acts = {
            LayerId(1, "qkv"): QuantParams(UNIFORM, 4, PER_LAYER,
                                           np.asarray(0.123456789012345),
                                           np.asarray(7)),
            LayerId(1, "attn"): QuantParams(LOGSQRT2, 4, PER_LAYER, np.asarray(0.99)),
        }
        alloc = uniform_allocation(4, 1)
        return QuantModel(weights, acts, alloc, {"percentile": 99.99, "note": "x"})

    def test_json_roundtrip_bit_exact(self, tmp_path):
        qm = self._qmodel()
        serialize.save_quant_model(tmp_path / "q.json", qm)
        back = serialize.load_quant_model(tmp_path / "q.json")
        assert back.provenance == qm.provenance
        assert back.allocation.entries == qm.allocation.entries
        for lid, qp in qm.weights.items():
            np.testing.assert_array_equal(back.weights[lid].scale, qp.scale)
            np.testing.assert_array_equal(back.weights[lid].zero_point, qp.zero_point)
        for lid, qp in qm.activations.items():
            np.testing.assert_array_equal(back.activations[lid].scale, qp.scale)
        # serialization itself is deterministic
        assert serialize.quant_model_to_json(qm) == serialize.quant_model_to_json(back)


class TestRunConfig:
    def test_json_roundtrip(self):
        cfg = RunConfig(base_bits=6, mode="paper", seed=42, percentile=99.9)
        back = RunConfig.from_json(cfg.to_json())
        assert back == cfg
        assert back.config_hash() == cfg.config_hash()

    def test_validation(self):
        with pytest.raises(Exception):
            RunConfig(mode="nonsense")
        with pytest.raises(Exception):
            RunConfig(percentile=0.0)
        with pytest.raises(Exception):
            RunConfig(base_bits=1)
