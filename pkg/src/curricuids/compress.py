"""Magnitude pruning, per-tensor 8-bit affine quantization and size accounting."""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass

import numpy as np

from .curriculum import CurriculumConfig, fit_epochs
from .data_pipeline import SequenceBatch
from .errors import InvalidConfig, IoFailure, NonFiniteWeight
from .model import IdsModel, Layer, ModelConfig, canonical_json, model_forward
from .nn_core import Param

QUANT_FORMAT_VERSION = "curricuids.qmodel/1"
QMIN, QMAX = -128, 127
SCALE_BYTES = 8
ZERO_POINT_BYTES = 4


def prunable(p: Param) -> bool:
    """Only weight matrices and kernels are pruned; biases and norm gains stay dense."""
    return p.data.ndim >= 2


# ---------------------------------------------------------------------------
# pruning

@dataclass
class PruneMask:
    masks: dict[str, np.ndarray]  # keyed "layer.tensor"; 1 keeps, 0 prunes
    target_sparsity: float
    achieved_sparsity: float

    def apply(self, m: IdsModel) -> None:
        for layer in m.layers.values():
            for k, p in layer.params.items():
                mask = self.masks.get(f"{layer.name}.{k}")
                if mask is not None:
                    p.data *= mask

    def smallest_tensor(self) -> int:
        return min((mk.size for mk in self.masks.values()), default=0)


def tensor_mask(w: np.ndarray, target: float) -> np.ndarray:
    """Zero the round(target * n) smallest magnitudes; equal magnitudes go lower index first."""
    flat = np.abs(w).ravel()
    k = int(round(target * flat.size))
    mask = np.ones(flat.size)
    if k:
        mask[np.argsort(flat, kind="stable")[:k]] = 0.0
    return mask.reshape(w.shape)


def prune_magnitude(m: IdsModel, target_sparsity: float, fine_tune: SequenceBatch | None = None,
                    epochs: int = 0, cfg: CurriculumConfig | None = None,
                    validation: SequenceBatch | None = None) -> tuple[IdsModel, PruneMask]:
    """Per-tensor magnitude pruning of a copy of ``m``, optionally fine-tuned with the mask held."""
    if not 0.0 <= target_sparsity < 1.0:
        raise InvalidConfig(f"target_sparsity must be in [0, 1), got {target_sparsity}")
    out = m.copy()
    masks = {}
    zeros = total = 0
    for layer in out.layers.values():
        for k, p in layer.params.items():
            if not prunable(p):
                continue
            mask = tensor_mask(p.data, target_sparsity)
            masks[f"{layer.name}.{k}"] = mask
            zeros += int(mask.size - mask.sum())
            total += mask.size
    pm = PruneMask(masks, target_sparsity, zeros / total if total else 0.0)
    pm.apply(out)
    if fine_tune is not None and epochs > 0:
        fit_epochs(out, fine_tune, validation, epochs, cfg or CurriculumConfig(), (31,),
                   after_step=pm.apply)
        pm.apply(out)
    return out, pm


def sparsity(m: IdsModel) -> float:
    ws = [p.data for p in m.parameters() if prunable(p)]
    n = sum(w.size for w in ws)
    return sum(int(np.sum(w == 0)) for w in ws) / n if n else 0.0


# ---------------------------------------------------------------------------
# quantization

@dataclass
class QTensor:
    q: np.ndarray  # int8
    scale: float
    zero_point: int

    def dequantize(self) -> np.ndarray:
        return (self.q.astype(np.float64) - self.zero_point) * self.scale


@dataclass
class QuantizedModel:
    config: ModelConfig
    active_features: list[int]
    layers: dict[str, tuple[str, dict[str, QTensor]]]

    def tensors(self):
        for name, (_, ts) in self.layers.items():
            for k, t in ts.items():
                yield f"{name}.{k}", t


def quantize_tensor(w: np.ndarray) -> QTensor:
    w = np.asarray(w, dtype=np.float64)
    if not np.isfinite(w).all():
        raise NonFiniteWeight("cannot quantize non-finite weights")
    # the range always contains 0, so the zero point never needs clamping
    lo = min(float(w.min()), 0.0) if w.size else 0.0
    hi = max(float(w.max()), 0.0) if w.size else 0.0
    scale = (hi - lo) / 255.0 if hi > lo else 1.0
    zp = int(np.clip(round(-lo / scale) - 128, QMIN, QMAX))
    q = np.clip(np.round(w / scale) + zp, QMIN, QMAX).astype(np.int8)
    return QTensor(q, scale, zp)


def quantize(m: IdsModel) -> QuantizedModel:
    layers = {name: (l.kind, {k: quantize_tensor(p.data) for k, p in l.params.items()})
              for name, l in m.layers.items()}
    return QuantizedModel(m.config, list(m.active_features), layers)


def dequantized_model(qm: QuantizedModel) -> IdsModel:
    """Float model carrying the dequantized weights, rounded to 32-bit floats."""
    layers = {}
    for name, (kind, ts) in qm.layers.items():
        layers[name] = Layer(name, kind, {
            k: Param(t.dequantize().astype(np.float32).astype(np.float64), f"{name}.{k}")
            for k, t in ts.items()})
    return IdsModel(qm.config, layers, list(qm.active_features))


def quantized_forward(qm: QuantizedModel, batch) -> np.ndarray:
    return model_forward(dequantized_model(qm), batch)


# ---------------------------------------------------------------------------
# size accounting

@dataclass
class SizeReport:
    float_bytes: int
    quantized_bytes: int
    parameter_total: int
    n_tensors: int = 0
    sparse: bool = False

    @property
    def compression_ratio(self) -> float:
        return self.float_bytes / self.quantized_bytes if self.quantized_bytes else 0.0

    @property
    def float_kb(self) -> float:
        return self.float_bytes / 1024.0

    @property
    def quantized_kb(self) -> float:
        return self.quantized_bytes / 1024.0

    def to_dict(self) -> dict:
        return {"float_bytes": self.float_bytes, "quantized_bytes": self.quantized_bytes,
                "compression_ratio": self.compression_ratio, "parameter_total": self.parameter_total,
                "n_tensors": self.n_tensors, "sparse": self.sparse,
                "float_kb": self.float_kb, "quantized_kb": self.quantized_kb}


def _header_bytes(shape) -> int:
    return 4 * (1 + len(shape))  # rank plus one int32 per dimension


def _payload_bytes(values: np.ndarray, zero: int | float, sparse: bool) -> int:
    dense = values.size
    if not sparse:
        return dense
    # occupancy bitmap plus the non-zero bytes, whichever is smaller
    nnz = int(np.sum(values != zero))
    return min(dense, math.ceil(values.size / 8) + nnz)


def size_report(m, sparse: bool = False) -> SizeReport:
    """Byte accounting at 4 bytes per float parameter and 1 byte per quantized one.

    Accepts an ``IdsModel``, a ``QuantizedModel`` or a bare parameter count.
    """
    if isinstance(m, (int, np.integer)):
        total = int(m)
        return SizeReport(4 * total, total, total)
    if isinstance(m, IdsModel):
        tensors = [(p.data, 0.0) for p in m.parameters()]
        shapes = [p.data.shape for p in m.parameters()]
    elif isinstance(m, QuantizedModel):
        tensors = [(t.q, t.zero_point) for _, t in m.tensors()]
        shapes = [t.q.shape for _, t in m.tensors()]
    else:
        raise TypeError(f"cannot size {type(m).__name__}")
    total = sum(v.size for v, _ in tensors)
    qbytes = sum(_payload_bytes(v, z, sparse) + SCALE_BYTES + ZERO_POINT_BYTES + _header_bytes(s)
                 for (v, z), s in zip(tensors, shapes))
    return SizeReport(4 * total, qbytes, total, len(tensors), sparse)


# ---------------------------------------------------------------------------
# quantized checkpoints

def qmodel_to_dict(qm: QuantizedModel) -> dict:
    return {
        "format_version": QUANT_FORMAT_VERSION,
        "config": qm.config.to_dict(),
        "active_features": list(qm.active_features),
        "layers": [{"name": name, "kind": kind,
                    "tensors": [{"name": k, "shape": list(t.q.shape), "scale": t.scale,
                                 "zero_point": t.zero_point,
                                 "data": base64.b64encode(t.q.astype(np.int8).tobytes()).decode("ascii")}
                                for k, t in ts.items()]}
                   for name, (kind, ts) in qm.layers.items()],
    }


def qmodel_from_dict(doc: dict) -> QuantizedModel:
    if doc.get("format_version") != QUANT_FORMAT_VERSION:
        raise InvalidConfig(f"unsupported quantized format {doc.get('format_version')!r}")
    layers = {}
    for entry in doc["layers"]:
        layers[entry["name"]] = (entry["kind"], {
            t["name"]: QTensor(np.frombuffer(base64.b64decode(t["data"]), dtype=np.int8).reshape(t["shape"]).copy(),
                               float(t["scale"]), int(t["zero_point"]))
            for t in entry["tensors"]})
    return QuantizedModel(ModelConfig.from_dict(doc["config"]), [int(i) for i in doc["active_features"]], layers)


def save_qmodel(qm: QuantizedModel, path) -> str:
    text = canonical_json(qmodel_to_dict(qm))
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return text


def load_qmodel(path) -> QuantizedModel:
    try:
        with open(path, encoding="utf-8") as fh:
            return qmodel_from_dict(json.load(fh))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
