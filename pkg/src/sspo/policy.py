"""Noise-prediction MLP, ancestral sampler and checkpoint files.

The network sees ``[x_t, sinusoidal(t), one_hot(c)]`` and predicts the noise
that produced ``x_t``. Hidden layers use tanh; the output layer starts at
zero so a fresh policy predicts exactly zero noise.

Checkpoint layout (little endian)::

    b"SSPOCKPT" | version u32 | input_dim u32 | cond_cardinality u32 |
    time_embed_dim u32 | n_hidden u32 | width u32 * n_hidden |
    iteration u32 | seed u64 | n_params u64 | params f64 * n_params |
    crc32 u32  (over every preceding byte)
"""

from __future__ import annotations

import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import (CheckpointIoError, ChecksumMismatch, ConditionOutOfRange,
                     FormatVersionMismatch, ShapeMismatch)
from .numerics import ParamVector, SeededRng
from .schedule import NoiseSchedule

MAGIC = b"SSPOCKPT"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class PolicySpec:
    input_dim: int = 2
    cond_cardinality: int = 3
    hidden_dims: tuple = (64, 64)
    time_embed_dim: int = 16

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, self.cond_cardinality, self.time_embed_dim, *self.hidden_dims)
        if any(int(d) != d or d <= 0 for d in dims) or not self.hidden_dims:
            raise ValueError(f"all policy dimensions must be positive integers: {self}")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")

    @property
    def feature_dim(self) -> int:
        return self.input_dim + self.time_embed_dim + self.cond_cardinality

    def layer_shapes(self):
        widths = (self.feature_dim, *self.hidden_dims, self.input_dim)
        return [(widths[i], widths[i + 1]) for i in range(len(widths) - 1)]

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes())


def init_params(spec: PolicySpec, rng: SeededRng | None = None) -> ParamVector:
    """Hidden weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases and the output layer zero.

    ``rng=None`` gives the all-zero policy.
    """
    shapes = spec.layer_shapes()
    named = []
    for i, (fan_in, fan_out) in enumerate(shapes):
        last = i == len(shapes) - 1
        if rng is None or last:
            w = np.zeros((fan_in, fan_out))
        else:
            bound = 1.0 / math.sqrt(fan_in)
            w = (2.0 * rng.uniform((fan_in, fan_out)) - 1.0) * bound
        named.append((f"W{i}", w))
        named.append((f"b{i}", np.zeros(fan_out)))
    return ParamVector.from_segments(named)


def time_embedding(t, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def features(spec: PolicySpec, x_t, t, c) -> np.ndarray:
    """Network input rows for batched ``x_t`` (B, d), ``t`` (B,), ``c`` (B,)."""
    c = np.asarray(c, dtype=np.int64)
    if np.any(c < 0) or np.any(c >= spec.cond_cardinality):
        raise ConditionOutOfRange(f"condition {c} outside [0, {spec.cond_cardinality})")
    onehot = np.zeros((len(c), spec.cond_cardinality))
    onehot[np.arange(len(c)), c] = 1.0
    return np.concatenate([x_t, time_embedding(t, spec.time_embed_dim), onehot], axis=1)


def mlp(spec: PolicySpec, params: ParamVector, feats):
    """Apply the MLP; works with plain or traced parameter values."""
    h = feats
    n_layers = len(spec.hidden_dims) + 1
    for i in range(n_layers):
        h = nx.add(nx.matmul(h, params.segment(f"W{i}")), params.segment(f"b{i}"))
        if i < n_layers - 1:
            h = nx.tanh(h)
    return h


@dataclass(frozen=True)
class Policy:
    spec: PolicySpec
    params: ParamVector = field(compare=False)

    def __post_init__(self):
        if len(self.params) != self.spec.n_params:
            raise ShapeMismatch(f"{len(self.params)} params for a spec needing {self.spec.n_params}")

    @classmethod
    def initial(cls, spec: PolicySpec, rng: SeededRng | None = None) -> "Policy":
        return cls(spec, init_params(spec, rng))

    def with_params(self, params) -> "Policy":
        if not isinstance(params, ParamVector):
            params = self.params.with_values(params)
        return Policy(self.spec, params)

    def _batch(self, x_t, t, c):
        x_t = nx.as_tensor(x_t)
        single = x_t.ndim == 1
        if single:
            x_t = x_t[None, :]
        if x_t.ndim != 2 or x_t.shape[1] != self.spec.input_dim:
            raise ShapeMismatch(f"x_t shape {x_t.shape} does not match input_dim {self.spec.input_dim}")
        n = x_t.shape[0]
        t = np.broadcast_to(np.asarray(t), (n,))
        c = np.broadcast_to(np.asarray(c), (n,))
        return x_t, t, c, single

    def predict_eps(self, x_t, t, c, params=None):
        """Predicted noise for one input (shape ``[d]``) or a batch (``[B, d]``).

        ``params`` overrides the stored parameters, e.g. with a traced vector.
        """
        x_t, t, c, single = self._batch(x_t, t, c)
        out = mlp(self.spec, self.params if params is None else params, features(self.spec, x_t, t, c))
        if single:
            out = out[0]
        return out


def ancestral_sample_batch(policy: Policy, conds, rng: SeededRng, schedule: NoiseSchedule) -> np.ndarray:
    """Run the reverse chain for every condition in ``conds``; returns (B, d)."""
    conds = np.asarray(conds, dtype=np.int64).reshape(-1)
    n, d, a = len(conds), policy.spec.input_dim, schedule.alpha
    x = rng.normal((n, d))
    for t in range(schedule.T, 0, -1):
        eps_hat = policy.predict_eps(x, t, conds)
        coef = (1.0 - a) / math.sqrt(1.0 - schedule.alpha_bar(t))
        x = (x - coef * eps_hat) / math.sqrt(a)
        if t > 1:
            x = x + math.sqrt(schedule.sigma_t_sq(t)) * rng.normal((n, d))
    return x


def ancestral_sample(policy: Policy, c: int, rng: SeededRng, schedule: NoiseSchedule) -> np.ndarray:
    return ancestral_sample_batch(policy, [c], rng, schedule)[0]


# --------------------------------------------------------------------------
# Checkpoint files
# --------------------------------------------------------------------------

def encode_checkpoint(policy: Policy, iteration: int = 0, seed: int = 0) -> bytes:
    s = policy.spec
    head = MAGIC + struct.pack("<I", FORMAT_VERSION)
    head += struct.pack(f"<{4 + len(s.hidden_dims)}I", s.input_dim, s.cond_cardinality,
                        s.time_embed_dim, len(s.hidden_dims), *s.hidden_dims)
    head += struct.pack("<IQQ", iteration, seed, len(policy.params))
    body = head + np.asarray(policy.params.values, dtype="<f8").tobytes()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(blob: bytes, expected_spec: PolicySpec | None = None):
    """Parse checkpoint bytes into ``(policy, iteration, seed)``."""
    if len(blob) < len(MAGIC) + 8:
        raise ChecksumMismatch("checkpoint truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumMismatch("checkpoint CRC32 does not match contents")
    if body[:8] != MAGIC:
        raise FormatVersionMismatch("not a checkpoint file", found=body[:8], expected=MAGIC)
    pos = 8
    (version,) = struct.unpack_from("<I", body, pos)
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(f"format version {version}, expected {FORMAT_VERSION}",
                                    found=version, expected=FORMAT_VERSION)
    pos += 4
    d, n_cond, emb, n_hidden = struct.unpack_from("<4I", body, pos)
    pos += 16
    widths = struct.unpack_from(f"<{n_hidden}I", body, pos)
    pos += 4 * n_hidden
    iteration, seed, count = struct.unpack_from("<IQQ", body, pos)
    pos += 20
    spec = PolicySpec(d, n_cond, tuple(widths), emb)
    if expected_spec is not None and spec != expected_spec:
        raise FormatVersionMismatch(f"checkpoint spec {spec} differs from expected {expected_spec}",
                                    found=spec, expected=expected_spec)
    if len(body) - pos != 8 * count or count != spec.n_params:
        raise ChecksumMismatch("parameter block length disagrees with header")
    values = np.frombuffer(body, dtype="<f8", count=count, offset=pos).astype(np.float64)
    return Policy(spec, init_params(spec).with_values(values)), iteration, seed


def save_params(policy: Policy, path, iteration: int = 0, seed: int = 0) -> int:
    """Write a checkpoint atomically; returns its CRC32."""
    blob = encode_checkpoint(policy, iteration, seed)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointIoError(f"cannot write checkpoint {path}: {exc}") from exc
    return struct.unpack("<I", blob[-4:])[0]


def read_checkpoint(path, expected_spec: PolicySpec | None = None):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointIoError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(blob, expected_spec)


def load_params(path, expected_spec: PolicySpec | None = None) -> Policy:
    return read_checkpoint(path, expected_spec)[0]
