"""Minimal dense-tensor and layer substrate.

Everything the model module composes lives here: named parameter sets with a
canonical (lexicographic) ordering, forward passes for the handful of layer
types in use, hand-written analytic gradients, plain SGD, a central-difference
gradient-checking oracle, and a flat binary serialization used for checkpoints
and simulated uploads.

Tensors are plain float64 numpy arrays. A ParamSet is a ``dict[str, ndarray]``
treated as a value: operations return new dicts with new arrays and never
mutate their inputs. GradSet is the same shape of object, keyed and shaped
congruently with the ParamSet it differentiates.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Callable, Iterable

import numpy as np

ParamSet = dict[str, np.ndarray]
GradSet = dict[str, np.ndarray]

_MAGIC = b"FTTE"
_VERSION = 1


# ---------------------------------------------------------------------------
# deterministic RNG streams


def stable_hash(*keys: object) -> int:
    """128-bit integer from a sequence of keys, stable across processes.

    Built on blake2s over the string forms of the keys; never use Python's
    ``hash()`` for this (salted per process).
    """
    h = hashlib.blake2s()
    h.update("\x1f".join(str(k) for k in keys).encode("utf-8"))
    return int.from_bytes(h.digest()[:16], "little")


def spawn_rng(*keys: object) -> np.random.Generator:
    """Independent, reproducible generator for a purpose-keyed stream.

    Example: ``spawn_rng(seed, "dp", client_id, round_index)``.
    """
    return np.random.default_rng(np.random.SeedSequence(stable_hash(*keys)))


def init_uniform(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) with fan_in = shape[0]."""
    fan_in = max(int(shape[0]), 1)
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float64)


# ---------------------------------------------------------------------------
# ParamSet plumbing


def congruent(a: ParamSet, b: ParamSet) -> bool:
    """True iff both sets share keys and per-key shapes."""
    if a.keys() != b.keys():
        return False
    return all(a[k].shape == b[k].shape for k in a)


def assert_congruent(a: ParamSet, b: ParamSet) -> None:
    if a.keys() != b.keys():
        only_a = sorted(a.keys() - b.keys())
        only_b = sorted(b.keys() - a.keys())
        raise ValueError(f"param key mismatch: only-left={only_a} only-right={only_b}")
    for k in a:
        if a[k].shape != b[k].shape:
            raise ValueError(f"shape mismatch for {k!r}: {a[k].shape} vs {b[k].shape}")


def clone_params(params: ParamSet) -> ParamSet:
    return {k: v.copy() for k, v in params.items()}


def params_finite(params: ParamSet) -> bool:
    return all(np.isfinite(v).all() for v in params.values())


def zeros_like_params(params: ParamSet) -> GradSet:
    return {k: np.zeros_like(v) for k, v in params.items()}


def flatten_params(params: ParamSet) -> np.ndarray:
    """Concatenate all tensors in lexicographic name order."""
    if not params:
        return np.zeros(0, dtype=np.float64)
    return np.concatenate([params[k].ravel() for k in sorted(params)])


def unflatten_params(vec: np.ndarray, like: ParamSet) -> ParamSet:
    """Inverse of flatten_params against a congruent template; bit-exact."""
    out: ParamSet = {}
    pos = 0
    for k in sorted(like):
        n = like[k].size
        out[k] = vec[pos : pos + n].reshape(like[k].shape).copy()
        pos += n
    if pos != vec.size:
        raise ValueError(f"flat vector length {vec.size} != template size {pos}")
    return out


def serialize_params(params: ParamSet) -> bytes:
    """Flat binary form: header, then per name in lexicographic order:
    name length, name bytes, rank, dims, raw float64 little-endian data."""
    chunks = [_MAGIC, struct.pack("<I", _VERSION), struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype=np.float64)
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.astype("<f8").tobytes())
    return b"".join(chunks)


def deserialize_params(buf: bytes) -> ParamSet:
    if buf[:4] != _MAGIC:
        raise ValueError("bad magic in parameter blob")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported parameter format version {version}")
    (count,) = struct.unpack_from("<I", buf, 8)
    pos = 12
    out: ParamSet = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", buf, pos) if rank else ()
        pos += 4 * rank
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        out[name] = arr.astype(np.float64).copy()
    if pos != len(buf):
        raise ValueError("trailing bytes in parameter blob")
    return out


def save_params(params: ParamSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_params(params))


def load_params(path) -> ParamSet:
    with open(path, "rb") as fh:
        return deserialize_params(fh.read())


def params_digest(params: ParamSet) -> str:
    """Short stable content digest (sha256 prefix of the serialized bytes)."""
    return hashlib.sha256(serialize_params(params)).hexdigest()[:16]


# ---------------------------------------------------------------------------
# layers


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """y = xW + b for x of shape (n, d), W of shape (d, k).

    b may have length k (per output column, the usual case) or length n
    (per-row scalar added across all columns). When n == k the per-column
    reading wins.
    """
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"shape mismatch: x{x.shape} @ w{w.shape}")
    y = x @ w
    if b is None:
        return y
    if b.ndim != 1:
        raise ValueError(f"bias must be rank 1, got shape {b.shape}")
    n, k = y.shape
    if b.shape[0] == k:
        return y + b
    if b.shape[0] == n:
        return y + b[:, None]
    raise ValueError(f"bias length {b.shape[0]} matches neither columns {k} nor rows {n}")


def embedding_lookup(table: np.ndarray, ids: Iterable[int]) -> np.ndarray:
    """Row gather; the matching gradient is a scatter-add into the table."""
    idx = np.asarray(list(ids) if not isinstance(ids, np.ndarray) else ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    return table[idx]


def embedding_scatter(shape: tuple[int, ...], ids: Iterable[int], grad_rows: np.ndarray) -> np.ndarray:
    """Gradient of embedding_lookup: accumulate grad_rows into an all-zero
    table of the given shape at the looked-up ids (duplicates accumulate)."""
    out = np.zeros(shape, dtype=np.float64)
    idx = np.asarray(list(ids) if not isinstance(ids, np.ndarray) else ids, dtype=np.int64)
    np.add.at(out, idx, grad_rows)
    return out


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max subtraction) along one axis."""
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sgd_step(params: ParamSet, grads: GradSet, lr: float) -> ParamSet:
    """One plain SGD update, p <- p - lr * g, as a new ParamSet."""
    assert_congruent(params, grads)
    return {k: params[k] - lr * grads[k] for k in params}


# ---------------------------------------------------------------------------
# gradient checking oracle


def check_gradients(
    model_fn: Callable[[ParamSet, object], tuple[float, GradSet]],
    params: ParamSet,
    inputs: object,
    eps: float = 1e-6,
    atol: float = 1e-7,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    model_fn(params, inputs) must return (scalar loss, GradSet). Coordinates
    where both gradients are below atol in magnitude count as exact matches
    (relative error 0), which keeps finite-difference noise on genuinely zero
    gradients from registering as failures.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    loss0, grads = model_fn(params, inputs)
    if not np.isfinite(loss0):
        raise FloatingPointError("non-finite loss in gradient check")
    assert_congruent(params, grads)
    worst = 0.0
    for name in sorted(params):
        base = params[name]
        analytic = grads[name]
        for i in range(base.size):
            orig = base.flat[i]
            base.flat[i] = orig + eps
            lp = model_fn(params, inputs)[0]
            base.flat[i] = orig - eps
            lm = model_fn(params, inputs)[0]
            base.flat[i] = orig
            numeric = (lp - lm) / (2.0 * eps)
            a = analytic.flat[i]
            denom = max(abs(a), abs(numeric))
            if denom > atol:
                worst = max(worst, abs(a - numeric) / denom)
    return worst
