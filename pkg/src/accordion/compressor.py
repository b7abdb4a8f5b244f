"""Per-layer gradient compressors with error feedback.

Three schemes share one interface: ``dense`` (no compression), ``topk``
(largest-magnitude coordinates) and ``powersgd`` (rank-r factorisation refined
by one power-iteration step per call, warm-started from the previous ``Q``).
Each worker owns a :class:`CompressorState` that carries the residual of what
compression dropped; the residual is added back before the next compression.

Float accounting counts payload scalars: a dense layer costs ``d``, TopK costs
``2 * ceil(K d)`` (one value and one index per entry), PowerSGD costs
``r (m + n)``. One-dimensional layers are always sent dense.
"""
from __future__ import annotations

import math
import struct
import warnings
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, CorruptMessageError, ShapeError
from .linalg import orthonormalize

SCHEMES = ("powersgd", "topk", "dense", "batchsize")
_TAGS = {"dense": 0, "topk": 1, "powersgd": 2}


@dataclass(frozen=True)
class Level:
    """A communication level: rank for powersgd, fraction for topk, batch size for batchsize."""

    scheme: str
    value: float = 0.0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.scheme == "topk" and not 0.0 < self.value <= 1.0:
            raise ConfigError(f"topk fraction must lie in (0, 1], got {self.value}")
        if self.scheme in ("powersgd", "batchsize"):
            if self.value < 1 or self.value != int(self.value):
                raise ConfigError(f"{self.scheme} level must be a positive integer, got {self.value}")

    @property
    def rank(self) -> int:
        return int(self.value)

    def token(self) -> str:
        if self.scheme == "powersgd":
            return f"r{int(self.value)}"
        if self.scheme == "topk":
            return f"k{self.value:g}"
        if self.scheme == "batchsize":
            return f"b{int(self.value)}"
        return "d"

    def communicates_more_than(self, other: "Level") -> bool:
        """True if this level sends more per round (or, for batch size, more rounds)."""
        if self.scheme != other.scheme:
            raise ConfigError(f"cannot compare {self.scheme} with {other.scheme}")
        if self.scheme == "batchsize":
            return self.value < other.value
        return self.value > other.value


@dataclass(frozen=True, eq=False)
class CompressedMessage:
    layer_id: str
    scheme: str
    shape: tuple[int, ...]
    float_count: int
    data: np.ndarray | None = None
    indices: np.ndarray | None = None
    values: np.ndarray | None = None
    p: np.ndarray | None = None
    q: np.ndarray | None = None

    def payload_scalars(self) -> int:
        parts = (self.data, self.indices, self.values, self.p, self.q)
        return sum(x.size for x in parts if x is not None)

    def to_bytes(self) -> bytes:
        """Canonical little-endian encoding: tag byte, layer id, shape, payload."""
        name = self.layer_id.encode()
        out = [struct.pack("<BH", _TAGS[self.scheme], len(name)), name]
        out.append(struct.pack("<B", len(self.shape)) + struct.pack(f"<{len(self.shape)}I", *self.shape))
        if self.scheme == "dense":
            out += [struct.pack("<I", self.data.size), self.data.astype("<f8").tobytes()]
        elif self.scheme == "topk":
            out += [
                struct.pack("<I", self.indices.size),
                self.indices.astype("<u4").tobytes(),
                self.values.astype("<f8").tobytes(),
            ]
        else:
            m, r = self.p.shape
            n = self.q.shape[0]
            out += [struct.pack("<III", m, n, r), self.p.astype("<f8").tobytes(), self.q.astype("<f8").tobytes()]
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "CompressedMessage":
        tag, nlen = struct.unpack_from("<BH", buf, 0)
        pos = 3
        layer_id = buf[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        shape = struct.unpack_from(f"<{ndim}I", buf, pos + 1)
        pos += 1 + 4 * ndim
        scheme = {v: k for k, v in _TAGS.items()}.get(tag)
        if scheme is None:
            raise CorruptMessageError(f"unknown scheme tag {tag}")

        def floats(count):
            nonlocal pos
            arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64)
            pos += 8 * count
            return arr

        if scheme == "dense":
            (count,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            data = floats(count)
            msg = cls(layer_id, scheme, shape, count, data=data)
        elif scheme == "topk":
            (k,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            idx = np.frombuffer(buf, dtype="<u4", count=k, offset=pos).astype(np.int64)
            pos += 4 * k
            msg = cls(layer_id, scheme, shape, 2 * k, indices=idx, values=floats(k))
        else:
            m, n, r = struct.unpack_from("<III", buf, pos)
            pos += 12
            p = floats(m * r).reshape(m, r)
            q = floats(n * r).reshape(n, r)
            msg = cls(layer_id, scheme, shape, r * (m + n), p=p, q=q)
        if pos != len(buf):
            raise CorruptMessageError(f"{len(buf) - pos} trailing bytes")
        return msg


@dataclass(frozen=True)
class CompressorState:
    """One worker's error-feedback residuals and PowerSGD warm starts, keyed by layer."""

    seed: int = 0
    residuals: dict = field(default_factory=dict)
    q_prev: dict = field(default_factory=dict)
    draws: int = 0

    def residual(self, layer_id: str, shape) -> np.ndarray:
        e = self.residuals.get(layer_id)
        return np.zeros(shape) if e is None else e


def topk_count(fraction: float, d: int) -> int:
    # round first so 0.1 * 100 does not ceil to 11
    k = math.ceil(round(fraction * d, 9))
    if k < 1:
        warnings.warn(f"topk fraction {fraction} keeps no entries of {d}; sending one", stacklevel=3)
        k = 1
    return min(k, d)


def effective_scheme(level: Level, shape) -> str:
    if len(shape) < 2 or level.scheme in ("dense", "batchsize"):
        return "dense"
    return level.scheme


def float_count(level: Level, shape) -> int:
    """Scalars one worker uploads for one layer at ``level``."""
    d = int(np.prod(shape))
    scheme = effective_scheme(level, shape)
    if scheme == "dense":
        return d
    if scheme == "topk":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return 2 * topk_count(level.value, d)
    m, n = shape
    return level.rank * (m + n)


def validate_level(level: Level, shapes: dict) -> None:
    """Reject a level that cannot be applied to some layer (checked once at startup)."""
    if level.scheme != "powersgd":
        return
    for name, shape in shapes.items():
        if len(shape) == 2 and level.rank > min(shape):
            raise ConfigError(f"powersgd rank {level.rank} exceeds min{tuple(shape)} of layer {name!r}")


def _layer_key(layer_id: str) -> int:
    return zlib.crc32(layer_id.encode())


def _random_columns(rows: int, cols: int, seed: int, layer_id: str, draw: int) -> np.ndarray:
    rng = np.random.default_rng([seed, _layer_key(layer_id), draw])
    return rng.standard_normal((rows, cols))


def _warm_start(state: CompressorState, layer_id: str, n: int, r: int) -> tuple[np.ndarray, int]:
    q = state.q_prev.get(layer_id)
    draws = state.draws
    if q is None:
        q = _random_columns(n, r, state.seed, layer_id, draws)
        draws += 1
    elif q.shape[1] > r:
        q = q[:, :r]
    elif q.shape[1] < r:
        extra = _random_columns(n, r - q.shape[1], state.seed, layer_id, draws)
        draws += 1
        q, _ = orthonormalize(np.hstack([q, extra]), seed=state.seed + draws)
    return q, draws


def compress(g: np.ndarray, level: Level, state: CompressorState, layer_id: str):
    """Compress ``g`` plus the stored residual; return ``(message, new_state)``.

    The new residual is exactly what the message fails to represent, so
    ``decompress(msg) + new_residual == g + old_residual``.
    """
    g = np.asarray(g, dtype=np.float64)
    shape = g.shape
    a = g + state.residual(layer_id, shape)
    scheme = effective_scheme(level, shape)
    q_prev = state.q_prev
    draws = state.draws

    if scheme == "dense":
        msg = CompressedMessage(layer_id, "dense", shape, a.size, data=a.reshape(-1).copy())
        residual = np.zeros(shape)
    elif scheme == "topk":
        flat = a.reshape(-1)
        k = topk_count(level.value, flat.size)
        # stable sort keeps the lower index first among equal magnitudes
        idx = np.sort(np.argsort(-np.abs(flat), kind="stable")[:k])
        msg = CompressedMessage(layer_id, "topk", shape, 2 * k, indices=idx, values=flat[idx].copy())
        kept = np.zeros_like(flat)
        kept[idx] = flat[idx]
        residual = (flat - kept).reshape(shape)
    else:
        m, n = shape
        r = level.rank
        if r > min(m, n):
            raise ConfigError(f"powersgd rank {r} exceeds min{shape} of layer {layer_id!r}")
        q, draws = _warm_start(state, layer_id, n, r)
        p_hat, _ = orthonormalize(a @ q, seed=state.seed + _layer_key(layer_id) + draws)
        q_new = a.T @ p_hat
        msg = CompressedMessage(layer_id, "powersgd", shape, r * (m + n), p=p_hat, q=q_new)
        residual = a - p_hat @ q_new.T
        q_prev = {**q_prev, layer_id: q_new}

    new_state = replace(state, residuals={**state.residuals, layer_id: residual}, q_prev=q_prev, draws=draws)
    return msg, new_state


def decompress(msg: CompressedMessage, shape=None) -> np.ndarray:
    shape = tuple(msg.shape if shape is None else shape)
    if tuple(msg.shape) != shape:
        raise ShapeError(f"message for {msg.layer_id!r} has shape {msg.shape}, expected {shape}")
    d = int(np.prod(shape))
    if msg.scheme == "dense":
        if msg.data.size != d:
            raise CorruptMessageError(f"dense payload of {msg.data.size} for {d} entries")
        return msg.data.reshape(shape).copy()
    if msg.scheme == "topk":
        idx = np.asarray(msg.indices)
        if idx.size and (idx.min() < 0 or idx.max() >= d):
            raise CorruptMessageError(f"topk index out of range [0, {d})")
        if np.any(np.diff(idx) <= 0):
            raise CorruptMessageError("topk indices must be strictly increasing")
        out = np.zeros(d)
        out[idx] = msg.values
        return out.reshape(shape)
    if msg.p.shape[0] != shape[0] or msg.q.shape[0] != shape[1]:
        raise CorruptMessageError(f"factors {msg.p.shape}, {msg.q.shape} do not match {shape}")
    return msg.p @ msg.q.T
