"""Minimal differentiable-network core.

Everything is float64 numpy. The only layer types are dense, ReLU, sigmoid,
a squeeze-and-excitation channel gate, and Huber loss; gradients are written
by hand and checked against finite differences in the test suite.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ELNW"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Input shape inconsistent with a layer's parameters."""


def glorot_uniform(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(out_dim, in_dim))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def huber(prediction: float | np.ndarray, target: float | np.ndarray) -> float | np.ndarray:
    """Huber loss with unit transition point: 0.5e^2 inside |e| <= 1, |e| - 0.5 outside."""
    e = np.asarray(prediction, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    out = np.where(np.abs(e) <= 1.0, 0.5 * e * e, np.abs(e) - 0.5)
    return float(out) if out.ndim == 0 else out


def huber_grad(prediction: float | np.ndarray, target: float | np.ndarray) -> float | np.ndarray:
    """d huber / d prediction."""
    e = np.asarray(prediction, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    out = np.where(np.abs(e) <= 1.0, e, np.sign(e))
    return float(out) if out.ndim == 0 else out


@dataclass
class DenseLayer:
    """Affine map y = x @ W.T + b with weights [out, in]."""

    weights: np.ndarray
    bias: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator, out_dim: int, in_dim: int) -> "DenseLayer":
        return cls(weights=glorot_uniform(rng, out_dim, in_dim), bias=np.zeros(out_dim))

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"dense expects input dim {self.in_dim}, got {x.shape[-1]}")
        return x @ self.weights.T + self.bias

    def backward(self, x: np.ndarray, g_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (g_weights, g_bias, g_input) for the batch that produced g_out."""
        x2 = x.reshape(-1, self.in_dim)
        g2 = g_out.reshape(-1, self.out_dim)
        g_w = g2.T @ x2
        g_b = g2.sum(axis=0)
        g_x = (g2 @ self.weights).reshape(x.shape)
        return g_w, g_b, g_x


@dataclass
class SeBlock:
    """Squeeze-and-excitation gate over the channel axis of [..., C, F] features.

    The squeeze is the per-channel mean over F; the excitation is
    sigmoid(w2 @ relu(w1 @ z)), one gate per channel, applied multiplicatively.
    Gates are strictly inside (0, 1).
    """

    w1: np.ndarray  # [hidden, channels]
    w2: np.ndarray  # [channels, hidden]

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, reduction: int) -> "SeBlock":
        # reduction may not divide channels (e.g. 11 channels, r=4); floor with a minimum of 1.
        hidden = max(1, channels // reduction)
        return cls(
            w1=glorot_uniform(rng, hidden, channels),
            w2=glorot_uniform(rng, channels, hidden),
        )

    @property
    def channels(self) -> int:
        return self.w1.shape[1]

    def forward(self, features: np.ndarray) -> tuple[np.ndarray, dict]:
        """Scale features [..., C, F] per channel; returns (output, cache)."""
        if features.shape[-2] != self.channels:
            raise ShapeError(
                f"SE block expects {self.channels} channels, got {features.shape[-2]}"
            )
        z = features.mean(axis=-1)  # [..., C]
        h = relu(z @ self.w1.T)  # [..., H]
        s = sigmoid(h @ self.w2.T)  # [..., C]
        out = features * s[..., None]
        return out, {"features": features, "z": z, "h": h, "s": s}

    def backward(self, cache: dict, g_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (g_w1, g_w2, g_features)."""
        features, z, h, s = cache["features"], cache["z"], cache["h"], cache["s"]
        n_features = features.shape[-1]

        g_s = (g_out * features).sum(axis=-1)
        g_features = g_out * s[..., None]

        g_pre2 = g_s * s * (1.0 - s)  # [..., C]
        p2 = g_pre2.reshape(-1, self.channels)
        g_w2 = p2.T @ h.reshape(-1, self.w2.shape[1])
        g_h = g_pre2 @ self.w2

        g_pre1 = g_h * (h > 0.0)
        p1 = g_pre1.reshape(-1, self.w1.shape[0])
        g_w1 = p1.T @ z.reshape(-1, self.channels)
        g_z = g_pre1 @ self.w1

        g_features = g_features + g_z[..., None] / n_features
        return g_w1, g_w2, g_features


def se_forward(features: np.ndarray, block: SeBlock) -> np.ndarray:
    """Convenience wrapper returning only the gated features."""
    out, _ = block.forward(features)
    return out


class ChannelAttentionTrunk:
    """Shared feature trunk: reshape to [channels, features], per-channel shared
    dense, ReLU, SE gate, flatten.

    The per-channel dense layer is one weight matrix applied to every channel
    row, which keeps the channel structure the SE gate needs.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        channels: int,
        features_in: int,
        features_hidden: int = 16,
        se_reduction: int = 4,
    ) -> None:
        self.channels = channels
        self.features_in = features_in
        self.features_hidden = features_hidden
        self.shared = DenseLayer.init(rng, features_hidden, features_in)
        self.se = SeBlock.init(rng, channels, se_reduction)

    @property
    def in_dim(self) -> int:
        return self.channels * self.features_in

    @property
    def out_dim(self) -> int:
        return self.channels * self.features_hidden

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        """x: [..., channels * features_in] -> ([..., out_dim], cache)."""
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"trunk expects input dim {self.in_dim}, got {x.shape[-1]}")
        grid = x.reshape(*x.shape[:-1], self.channels, self.features_in)
        pre = self.shared.forward(grid)
        act = relu(pre)
        gated, se_cache = self.se.forward(act)
        flat = gated.reshape(*x.shape[:-1], self.out_dim)
        return flat, {"grid": grid, "pre": pre, "act": act, "se": se_cache, "shape": x.shape}

    def backward(self, cache: dict, g_flat: np.ndarray) -> dict[str, np.ndarray]:
        g_gated = g_flat.reshape(*cache["shape"][:-1], self.channels, self.features_hidden)
        g_w1, g_w2, g_act = self.se.backward(cache["se"], g_gated)
        g_pre = g_act * (cache["pre"] > 0.0)
        g_w, g_b, _ = self.shared.backward(cache["grid"], g_pre)
        return {"shared.w": g_w, "shared.b": g_b, "se.w1": g_w1, "se.w2": g_w2}

    def params(self) -> dict[str, np.ndarray]:
        return {
            "shared.w": self.shared.weights,
            "shared.b": self.shared.bias,
            "se.w1": self.se.w1,
            "se.w2": self.se.w2,
        }


class QNetwork:
    """Trunk + two dense head layers mapping an observation to one Q-value per action."""

    def __init__(
        self,
        rng: np.random.Generator,
        channels: int,
        features_in: int,
        n_actions: int,
        features_hidden: int = 16,
        se_reduction: int = 4,
        head_hidden: int = 128,
    ) -> None:
        self.n_actions = n_actions
        self.trunk = ChannelAttentionTrunk(rng, channels, features_in, features_hidden, se_reduction)
        self.head1 = DenseLayer.init(rng, head_hidden, self.trunk.out_dim)
        self.head2 = DenseLayer.init(rng, n_actions, head_hidden)

    @property
    def in_dim(self) -> int:
        return self.trunk.in_dim

    def forward(self, obs: np.ndarray) -> tuple[np.ndarray, dict]:
        flat, trunk_cache = self.trunk.forward(obs)
        pre1 = self.head1.forward(flat)
        act1 = relu(pre1)
        q = self.head2.forward(act1)
        return q, {"trunk": trunk_cache, "flat": flat, "pre1": pre1, "act1": act1}

    def q_values(self, obs: np.ndarray) -> np.ndarray:
        q, _ = self.forward(obs)
        return q

    def backward(self, cache: dict, g_q: np.ndarray) -> dict[str, np.ndarray]:
        g_w2, g_b2, g_act1 = self.head2.backward(cache["act1"], g_q)
        g_pre1 = g_act1 * (cache["pre1"] > 0.0)
        g_w1, g_b1, g_flat = self.head1.backward(cache["flat"], g_pre1)
        grads = {f"trunk.{k}": v for k, v in self.trunk.backward(cache["trunk"], g_flat).items()}
        grads.update({"head1.w": g_w1, "head1.b": g_b1, "head2.w": g_w2, "head2.b": g_b2})
        return grads

    def params(self) -> dict[str, np.ndarray]:
        out = {f"trunk.{k}": v for k, v in self.trunk.params().items()}
        out.update(
            {
                "head1.w": self.head1.weights,
                "head1.b": self.head1.bias,
                "head2.w": self.head2.weights,
                "head2.b": self.head2.bias,
            }
        )
        return out

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        own = self.params()
        if set(own) != set(values):
            raise ShapeError(f"parameter names differ: {sorted(set(own) ^ set(values))}")
        for name, arr in own.items():
            if arr.shape != values[name].shape:
                raise ShapeError(f"{name}: shape {values[name].shape} != {arr.shape}")
            arr[...] = values[name]


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators keyed like the parameter dict."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    skipped: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One in-place Adam update. A non-finite gradient skips the whole update."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            logger.warning("adam_step skipped: non-finite gradient in %s", name)
            return
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)


def save_params(path: str, params: dict[str, np.ndarray]) -> None:
    """Write a flat binary checkpoint: magic, version, JSON manifest, float64 LE data."""
    manifest = [{"name": name, "shape": list(arr.shape)} for name, arr in params.items()]
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a parameter checkpoint (magic {magic!r})")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        blob_len = struct.unpack("<I", fh.read(4))[0]
        manifest = json.loads(fh.read(blob_len).decode("utf-8"))
        out: dict[str, np.ndarray] = {}
        for entry in manifest:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8").astype(np.float64)
            out[entry["name"]] = data.reshape(shape)
        return out
