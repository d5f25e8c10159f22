"""The layered detector: feature mask, conv, attention encoder, GRU and LSTM stacks."""

from __future__ import annotations

import base64
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterator

import numpy as np

from . import nn_core as nn
from .data_pipeline import SequenceBatch
from .errors import EmptyKeepSet, FeatureCountMismatch, InvalidConfig, IoFailure
from .nn_core import Param, Tensor

FORMAT_VERSION = "curricuids.model/1"
TOGGLES = ("use_feature_mask", "use_conv", "use_encoder", "use_self_attention",
           "use_residual", "use_layernorm", "use_dropout")


@dataclass
class ModelConfig:
    n_features: int
    window: int = 10
    conv_channels: int = 16
    conv_kernel: int = 3
    encoder_dim: int = 16
    gru_layers: int = 3
    gru_units: int = 24
    lstm_layers: int = 3
    lstm_units: int = 24
    attention_dim: int = 24
    dropout_rate: float = 0.2
    use_feature_mask: bool = True
    use_conv: bool = True
    use_encoder: bool = True
    use_self_attention: bool = True
    use_residual: bool = True
    use_layernorm: bool = True
    use_dropout: bool = True
    seed: int = 0
    layer_norm_eps: float = 1e-5

    def validate(self) -> None:
        dims = ("n_features", "window", "conv_channels", "conv_kernel", "encoder_dim",
                "gru_units", "lstm_units", "attention_dim")
        for name in dims:
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1")
        if self.conv_kernel % 2 == 0:
            raise InvalidConfig("conv_kernel must be odd")
        if self.gru_layers < 0 or self.lstm_layers < 0:
            raise InvalidConfig("layer counts must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidConfig("dropout_rate must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Layer:
    name: str
    kind: str
    params: dict[str, Param]

    def count(self) -> int:
        return sum(p.size for p in self.params.values())


@dataclass
class IdsModel:
    config: ModelConfig
    layers: dict[str, Layer]
    active_features: list[int]

    def parameters(self) -> Iterator[Param]:
        for layer in self.layers.values():
            yield from layer.params.values()

    def __getitem__(self, name: str) -> Layer:
        return self.layers[name]

    def copy(self) -> "IdsModel":
        return IdsModel(replace(self.config),
                        {n: Layer(l.name, l.kind, {k: Param(p.data.copy(), p.name, p.trainable)
                                                   for k, p in l.params.items()})
                         for n, l in self.layers.items()},
                        list(self.active_features))

    def state(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": p.data.copy() for l in self.layers.values() for k, p in l.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for l in self.layers.values():
            for k, p in l.params.items():
                p.data[...] = state[f"{l.name}.{k}"]

    def fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for key, arr in self.state().items():
            h.update(key.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass
class LayerAudit:
    entries: list[tuple[str, int]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(c for _, c in self.entries)

    @property
    def approx_bytes(self) -> int:
        return 4 * self.total

    def to_dict(self) -> dict:
        return {"layers": [{"layer": n, "parameters": c} for n, c in self.entries],
                "total": self.total, "approx_bytes": self.approx_bytes}


# ---------------------------------------------------------------------------
# construction

def _glorot(rng, shape, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def _layout(cfg: ModelConfig) -> list[tuple[str, str, int, int]]:
    """Blocks as ``(name, kind, d_in, d_out)`` in forward order."""
    blocks = []
    d = cfg.n_features
    if cfg.use_feature_mask:
        blocks.append(("feature_mask", "mask", d, d))
    if cfg.use_conv:
        blocks.append(("conv", "conv", d, cfg.conv_channels))
        d = cfg.conv_channels
    if cfg.use_encoder:
        blocks.append(("encoder", "encoder", d, cfg.encoder_dim))
        d = cfg.encoder_dim
    for i in range(1, cfg.gru_layers + 1):
        blocks.append((f"gru_{i}", "gru", d, cfg.gru_units))
        d = cfg.gru_units
    for i in range(1, cfg.lstm_layers + 1):
        out = cfg.attention_dim if cfg.use_self_attention else cfg.lstm_units
        blocks.append((f"lstm_{i}", "lstm", d, out))
        d = out
    blocks.append(("head", "head", d, 1))
    return blocks


def build_model(cfg: ModelConfig) -> IdsModel:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    layers: dict[str, Layer] = {}

    def add(name, kind, **tensors):
        layers[name] = Layer(name, kind, {k: Param(v, f"{name}.{k}") for k, v in tensors.items()})

    for name, kind, d_in, d_out in _layout(cfg):
        if kind == "mask":
            add(name, kind, W=_glorot(rng, (d_in, d_out), d_in, d_out), b=np.zeros(d_out))
            continue
        if kind == "conv":
            k = cfg.conv_kernel
            add(name, kind, W=_glorot(rng, (k, d_in, d_out), k * d_in, k * d_out), b=np.zeros(d_out))
        elif kind == "encoder":
            add(name, kind, **{q: _glorot(rng, (d_in, d_out), d_in, d_out) for q in ("Wq", "Wk", "Wv")})
        elif kind == "gru":
            h = d_out
            add(name, kind, W=_glorot(rng, (d_in, 3 * h), d_in, h),
                U=rng.uniform(-1, 1, (h, 3 * h)) / math.sqrt(h), b=np.zeros(3 * h))
        elif kind == "lstm":
            h = cfg.lstm_units
            b = np.zeros(4 * h)
            b[h:2 * h] = 1.0
            add(name, kind, W=_glorot(rng, (d_in, 4 * h), d_in, h),
                U=rng.uniform(-1, 1, (h, 4 * h)) / math.sqrt(h), b=b)
            if cfg.use_self_attention:
                a = cfg.attention_dim
                add(f"self_attention_{name.split('_')[1]}", "attention",
                    **{q: _glorot(rng, (h, a), h, a) for q in ("Wq", "Wk", "Wv")})
        elif kind == "head":
            add(name, kind, W=_glorot(rng, (d_in, 1), d_in, 1), b=np.zeros(1))
            continue
        if cfg.use_residual and d_in != d_out:
            add(f"residual_{name}", "projection",
                W=_glorot(rng, (d_in, d_out), d_in, d_out), b=np.zeros(d_out))
        if cfg.use_layernorm:
            add(f"layer_norm_{name}", "norm", gamma=np.ones(d_out), beta=np.zeros(d_out))
    return IdsModel(cfg, layers, list(range(cfg.n_features)))


# ---------------------------------------------------------------------------
# forward

def _recurrent(kind: str, layer: Layer, x: Tensor) -> Tensor:
    bsz, steps, _ = x.shape
    hdim = layer.params["U"].shape[0]
    zeros = np.zeros((bsz, hdim), dtype=x.data.dtype)
    h = Tensor(zeros)
    c = Tensor(zeros)
    outs = []
    p = layer.params
    for t in range(steps):
        xt = nn.take_time(x, t)
        if kind == "gru":
            h = nn.gru_cell_forward(xt, h, p["W"], p["U"], p["b"])
        else:
            h, c = nn.lstm_cell_forward(xt, h, c, p["W"], p["U"], p["b"])
        outs.append(h)
    return nn.stack_time(outs)


def forward_tensor(m: IdsModel, windows, train_mode: bool = False,
                   rng: np.random.Generator | None = None) -> Tensor:
    """Differentiable forward pass from ``[B, W, n_active]`` windows to probabilities ``[B]``."""
    cfg = m.config
    x = windows if isinstance(windows, Tensor) else Tensor(windows)
    if x.data.ndim != 3 or x.shape[2] != len(m.active_features):
        raise FeatureCountMismatch(
            f"model expects {len(m.active_features)} features, batch has shape {x.shape}")
    L = m.layers
    for name, kind, d_in, d_out in _layout(cfg):
        if kind == "mask":
            gate = nn.sigmoid(nn.dense_forward(x, L[name].params["W"], L[name].params["b"]))
            x = nn.mul(x, gate)
            continue
        if kind == "head":
            last = nn.take_time(x, x.shape[1] - 1)
            if cfg.use_dropout:
                last = nn.dropout(last, cfg.dropout_rate, rng, train_mode)
            logit = nn.dense_forward(last, L[name].params["W"], L[name].params["b"])
            return nn.reshape(nn.sigmoid(logit), (x.shape[0],))
        p = L[name].params
        if kind == "conv":
            y = nn.relu(nn.conv1d_forward(x, p["W"], p["b"]))
        elif kind == "encoder":
            y = nn.self_attention_forward(x, p["Wq"], p["Wk"], p["Wv"])
        elif kind == "gru":
            y = _recurrent("gru", L[name], x)
        else:
            y = _recurrent("lstm", L[name], x)
            if cfg.use_self_attention:
                a = L[f"self_attention_{name.split('_')[1]}"].params
                y = nn.self_attention_forward(y, a["Wq"], a["Wk"], a["Wv"])
        if cfg.use_residual:
            skip = x
            if d_in != d_out:
                r = L[f"residual_{name}"].params
                skip = nn.dense_forward(x, r["W"], r["b"])
            y = nn.add(y, skip)
        if cfg.use_layernorm:
            g = L[f"layer_norm_{name}"].params
            y = nn.layer_norm_forward(y, g["gamma"], g["beta"], cfg.layer_norm_eps)
        x = y
    raise AssertionError("layout always ends with the head")


def _windows_of(batch) -> np.ndarray:
    return batch.windows if isinstance(batch, SequenceBatch) else np.asarray(batch)


def model_forward(m: IdsModel, batch, train_mode: bool = False,
                  rng: np.random.Generator | None = None, chunk: int = 2048) -> np.ndarray:
    """Probability of attack for each window.

    Inference runs in fixed-size chunks; windows are independent so chunking
    never changes a window's output.
    """
    w = _windows_of(batch)
    if w.ndim != 3 or w.shape[2] != len(m.active_features):
        raise FeatureCountMismatch(
            f"model expects {len(m.active_features)} features, batch has shape {w.shape}")
    if train_mode:
        return forward_tensor(m, w, True, rng).data.copy()
    outs = [forward_tensor(m, w[i:i + chunk]).data for i in range(0, w.shape[0], chunk)]
    return np.concatenate(outs) if outs else np.zeros(0)


def select_active(m: IdsModel, batch: SequenceBatch) -> SequenceBatch:
    """Column-select a full-width batch down to the model's active features."""
    return batch.select_features(m.active_features)


def parameter_count(m: IdsModel) -> LayerAudit:
    return LayerAudit([(l.name, l.count()) for l in m.layers.values()])


def restrict_features(m: IdsModel, keep, reinit_seed: int) -> IdsModel:
    """New model reading only ``keep`` (original feature indices).

    Layers whose tensor shapes depend on the input width are re-initialized
    from ``reinit_seed``; every other layer keeps its trained weights.
    """
    keep = sorted(int(k) for k in keep)
    if not keep:
        raise EmptyKeepSet("keep set must not be empty")
    missing = set(keep) - set(m.active_features)
    if missing:
        raise InvalidConfig(f"features {sorted(missing)} are not active")
    cfg = replace(m.config, n_features=len(keep), seed=reinit_seed)
    fresh = build_model(cfg)
    for name, layer in fresh.layers.items():
        old = m.layers.get(name)
        if old is None or old.params.keys() != layer.params.keys():
            continue
        if all(old.params[k].shape == p.shape for k, p in layer.params.items()):
            for k, p in layer.params.items():
                p.data[...] = old.params[k].data
    fresh.config = replace(cfg, seed=m.config.seed)
    fresh.active_features = keep
    return fresh


# ---------------------------------------------------------------------------
# checkpoints

def encode_f32(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f4").tobytes()).decode("ascii")


def decode_f32(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f4").astype(np.float64).reshape(shape)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def model_to_dict(m: IdsModel, metadata: dict | None = None) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "config": m.config.to_dict(),
        "active_features": list(m.active_features),
        "layers": [{"name": l.name, "kind": l.kind,
                    "tensors": [{"name": k, "shape": list(p.shape), "data": encode_f32(p.data)}
                                for k, p in l.params.items()]}
                   for l in m.layers.values()],
    }
    if metadata:
        doc["metadata"] = metadata
    return doc


def model_from_dict(doc: dict) -> IdsModel:
    if doc.get("format_version") != FORMAT_VERSION:
        raise InvalidConfig(f"unsupported model format {doc.get('format_version')!r}")
    cfg = ModelConfig.from_dict(doc["config"])
    layers = {}
    for entry in doc["layers"]:
        layers[entry["name"]] = Layer(entry["name"], entry["kind"], {
            t["name"]: Param(decode_f32(t["data"], t["shape"]), f"{entry['name']}.{t['name']}")
            for t in entry["tensors"]})
    return IdsModel(cfg, layers, [int(i) for i in doc["active_features"]])


def save_model(m: IdsModel, path: str | os.PathLike, metadata: dict | None = None) -> str:
    text = canonical_json(model_to_dict(m, metadata))
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return text


def load_model(path: str | os.PathLike) -> tuple[IdsModel, dict]:
    """Model plus the free-form metadata block (preprocessing, plan, window)."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return model_from_dict(doc), doc.get("metadata", {})
