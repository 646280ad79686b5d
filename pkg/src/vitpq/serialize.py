"""Bit-exact file formats for every pipeline artifact.

Tensor data uses a two-file archive: a text manifest listing
``name dtype shape offset nbytes`` per entry (plus ``! key value`` metadata
lines) and one raw little-endian blob. Model parameters are stored as 32-bit
floats (widened to float64 on load); datasets add an int64 label vector.
QuantModels and EvalReports serialize to JSON whose floats round-trip
bit-exactly via shortest-repr encoding; importance tables and bit
allocations use the flat text formats defined next to their types.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .allocation import BitAllocation
from .data import LabeledDataset
from .errors import ContractError
from .layers import LayerId
from .quantizers import QuantModel, QuantParams
from .vit import ViTConfig, ViTParams

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8")}
_MANIFEST_HEADER = "# vitpq-archive v1"


def save_archive(base: str | Path, arrays: Mapping[str, np.ndarray],
                 dtypes: Mapping[str, str], meta: Mapping[str, str] | None = None) -> None:
    """Write ``{base}.manifest`` and ``{base}.blob``."""
    base = Path(base)
    lines = [_MANIFEST_HEADER]
    for key, value in sorted((meta or {}).items()):
        if any(ch.isspace() for ch in key):
            raise ContractError(f"meta key {key!r} contains whitespace")
        lines.append(f"! {key} {value}")
    blob = bytearray()
    for name, arr in arrays.items():
        code = dtypes[name]
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        shape = ",".join(str(s) for s in data.shape)
        lines.append(f"{name} {code} {shape} {len(blob)} {data.nbytes}")
        blob.extend(data.tobytes())
    Path(str(base) + ".manifest").write_text("\n".join(lines) + "\n")
    Path(str(base) + ".blob").write_bytes(bytes(blob))


def load_archive(base: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read an archive back; arrays keep their stored dtype."""
    base = Path(base)
    manifest_path = Path(str(base) + ".manifest")
    if not manifest_path.exists():
        raise ContractError(f"{base}: archive manifest not found")
    manifest = manifest_path.read_text().splitlines()
    blob = Path(str(base) + ".blob").read_bytes()
    if not manifest or manifest[0] != _MANIFEST_HEADER:
        raise ContractError(f"{base}: not a vitpq archive")
    arrays: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    for line in manifest[1:]:
        line = line.strip()
        if not line:
            continue
        if line.startswith("!"):
            _, key, value = line.split(" ", 2)
            meta[key] = value
            continue
        name, code, shape_csv, offset, nbytes = line.rsplit(" ", 4)
        shape = tuple(int(s) for s in shape_csv.split(",") if s)
        dtype = _DTYPES[code]
        raw = blob[int(offset):int(offset) + int(nbytes)]
        if len(raw) != int(nbytes):
            raise ContractError(f"{base}: truncated blob for entry {name}")
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return arrays, meta


def save_vit_params(base: str | Path, params: ViTParams) -> None:
    arrays = params.to_arrays()
    meta = {k: str(v) for k, v in params.config.to_dict().items()}
    save_archive(base, arrays, {name: "f32" for name in arrays}, meta)


def load_vit_params(base: str | Path) -> ViTParams:
    arrays, meta = load_archive(base)
    cfg = ViTConfig.from_dict(meta)
    widened = {name: arr.astype(np.float64) for name, arr in arrays.items()}
    return ViTParams.from_arrays(cfg, widened)


def save_dataset(base: str | Path, dataset: LabeledDataset) -> None:
    save_archive(
        base,
        {"images": dataset.images, "labels": dataset.labels},
        {"images": "f32", "labels": "i64"},
        {"split": dataset.split, "count": str(len(dataset))},
    )


def load_dataset(base: str | Path) -> LabeledDataset:
    arrays, meta = load_archive(base)
    return LabeledDataset(arrays["images"].astype(np.float64), arrays["labels"],
                          meta.get("split", "train"))


def _qparams_to_dict(qp: QuantParams) -> dict:
    out = {
        "scheme": qp.scheme,
        "bits": qp.bits,
        "granularity": qp.granularity,
        "scale": qp.scale.tolist(),
    }
    if qp.zero_point is not None:
        out["zero_point"] = qp.zero_point.tolist()
    return out


def _qparams_from_dict(d: Mapping) -> QuantParams:
    zp = d.get("zero_point")
    return QuantParams(
        scheme=d["scheme"], bits=int(d["bits"]), granularity=d["granularity"],
        scale=np.asarray(d["scale"], dtype=np.float64),
        zero_point=None if zp is None else np.asarray(zp, dtype=np.int64),
    )


def _allocation_to_dict(alloc: BitAllocation) -> dict:
    return {
        "mode": alloc.mode,
        "entries": {str(lid): list(bits) for lid, bits in sorted(
            alloc.entries.items(), key=lambda kv: str(kv[0]))},
    }


def _allocation_from_dict(d: Mapping) -> BitAllocation:
    entries = {}
    for text, (wb, ab) in d["entries"].items():
        entries[LayerId.parse(text)] = (None if wb is None else int(wb), int(ab))
    return BitAllocation(d["mode"], entries)


def quant_model_to_json(qmodel: QuantModel) -> str:
    doc = {
        "format": "vitpq-quant-model",
        "version": 1,
        "allocation": _allocation_to_dict(qmodel.allocation),
        "provenance": qmodel.provenance,
        "layers": {},
    }
    lids = sorted(set(qmodel.activations) | set(qmodel.weights), key=str)
    for lid in lids:
        entry: dict = {}
        if lid in qmodel.weights:
            entry["weight"] = _qparams_to_dict(qmodel.weights[lid])
        if lid in qmodel.activations:
            entry["activation"] = _qparams_to_dict(qmodel.activations[lid])
        doc["layers"][str(lid)] = entry
    return json.dumps(doc, indent=1, sort_keys=True)


def quant_model_from_json(text: str) -> QuantModel:
    doc = json.loads(text)
    if doc.get("format") != "vitpq-quant-model":
        raise ContractError("not a vitpq quant-model document")
    weights: dict[LayerId, QuantParams] = {}
    activations: dict[LayerId, QuantParams] = {}
    for lid_text, entry in doc["layers"].items():
        lid = LayerId.parse(lid_text)
        if "weight" in entry:
            weights[lid] = _qparams_from_dict(entry["weight"])
        if "activation" in entry:
            activations[lid] = _qparams_from_dict(entry["activation"])
    return QuantModel(weights, activations, _allocation_from_dict(doc["allocation"]),
                      doc.get("provenance", {}))


def save_quant_model(path: str | Path, qmodel: QuantModel) -> None:
    Path(path).write_text(quant_model_to_json(qmodel) + "\n")


def load_quant_model(path: str | Path) -> QuantModel:
    return quant_model_from_json(Path(path).read_text())
