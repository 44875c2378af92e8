"""Edit-batch streams: seeded synthetic generation and KVMX file ingestion.

Randomness comes from SplitMix64, a counter-based 64-bit generator (output k is
a fixed bit-mix of ``seed + (k+1) * 0x9E3779B97F4A7C15``), with normal variates
produced by the Box-Muller transform.  Both algorithms are fully specified
here, so streams are reproducible independent of any library RNG and identical
across platforms up to libm rounding of log/cos/sin.

KVMX matrix files are little-endian: magic ``KVMX``, format version u32 = 1,
rows u64, cols u64, then rows*cols IEEE-754 binary64 values in row-major
order.  A batch file is the magic ``KVB1`` followed by two concatenated KVMX
records (keys, then values).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    GenerationError,
    InputError,
    KvmxBadMagicError,
    KvmxDimOverflowError,
    KvmxFormatError,
    KvmxNonFiniteError,
    KvmxTruncatedError,
    NonFiniteError,
    StreamExhausted,
)
from .memory import Dims, EditBatch

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_MASK = 0xFFFFFFFFFFFFFFFF


def _mix64(z: np.ndarray) -> np.ndarray:
    # uint64 arithmetic is meant to wrap modulo 2**64.
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *tags: int) -> int:
    """Fold integer tags into a seed, giving independent sub-streams."""
    state = np.uint64(seed & _U64_MASK)
    for tag in tags:
        with np.errstate(over="ignore"):
            folded = (state + np.uint64(1)) * _GOLDEN + np.uint64(tag & _U64_MASK)
        state = _mix64(folded)
    return int(state)


class SplitMix64:
    """Seeded, counter-based uniform/normal generator over float64 arrays."""

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & _U64_MASK)
        self._drawn = 0

    def uint64(self, n: int) -> np.ndarray:
        counters = np.arange(self._drawn + 1, self._drawn + n + 1, dtype=np.uint64)
        self._drawn += n
        with np.errstate(over="ignore"):
            words = self._seed + counters * _GOLDEN
        return _mix64(words)

    def uniform(self, n: int) -> np.ndarray:
        """n uniforms in [0, 1), using the top 53 bits of each word."""
        return (self.uint64(n) >> np.uint64(11)) * 2.0 ** -53

    def normal(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller on consecutive uniform pairs."""
        pairs = (n + 1) // 2
        words = self.uint64(2 * pairs)
        # u1 lives in (0, 1] so log(u1) is finite.
        u1 = ((words[:pairs] >> np.uint64(11)) + np.uint64(1)) * 2.0 ** -53
        u2 = (words[pairs:] >> np.uint64(11)) * 2.0 ** -53
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = (2.0 * np.pi) * u2
        out = np.empty(2 * pairs)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:n]

    def matrix(self, rows: int, cols: int) -> np.ndarray:
        return self.normal(rows * cols).reshape(rows, cols)


VALUE_MODES = ("random-target", "planted-teacher")

# Sub-stream tags for the master seed.
_TAG_W0 = 0
_TAG_K0 = 1
_TAG_KEYS = 2
_TAG_TEACHER = 3


@dataclass(frozen=True)
class StreamSpec:
    """Full description of a synthetic edit stream; batches are a pure function of it."""

    dims: Dims
    n_per_batch: int
    total_batches: int
    key_scale: float
    value_mode: str
    teacher_drift: float
    seed: int
    m0: int

    def __post_init__(self):
        if self.n_per_batch < 1:
            raise InputError(f"n_per_batch must be >= 1, got {self.n_per_batch}")
        if self.total_batches < 1:
            raise InputError(f"total_batches must be >= 1, got {self.total_batches}")
        if self.m0 < self.dims.d0:
            raise InputError(
                f"m0 must be >= d0 to keep the preserved Gram full rank, "
                f"got m0={self.m0}, d0={self.dims.d0}"
            )
        if self.value_mode not in VALUE_MODES:
            raise InputError(
                f"value_mode must be one of {VALUE_MODES}, got {self.value_mode!r}"
            )
        if not np.isfinite(self.key_scale) or self.key_scale < 0.0:
            raise InputError(f"key_scale must be finite and >= 0, got {self.key_scale!r}")
        if not np.isfinite(self.teacher_drift) or self.teacher_drift < 0.0:
            raise InputError(
                f"teacher_drift must be finite and >= 0, got {self.teacher_drift!r}"
            )
        if not 0 <= self.seed <= _U64_MASK:
            raise InputError(f"seed must fit in 64 bits, got {self.seed}")


class EditStream:
    """Deterministic batch source for one run.

    ``batch(t)`` is a pure function of (spec, t), so prefixes agree across
    streams that share a seed but differ in total_batches.
    """

    def __init__(self, spec: StreamSpec):
        self.spec = spec
        self._emitted = 0
        self._preserved = None

    def generate_preserved(self):
        """Return (w0, k0): original weights and preserved keys.

        w0 entries are standard Gaussian scaled by 1/sqrt(d0); k0 columns are
        standard Gaussian scaled by key_scale.  Retries with a fresh sub-seed
        up to 3 times if the key Gram comes out rank deficient.
        """
        if self._preserved is None:
            spec = self.spec
            d0, d1 = spec.dims.d0, spec.dims.d1
            last_eig = None
            for attempt in range(3):
                w0 = (SplitMix64(derive_seed(spec.seed, _TAG_W0, attempt))
                      .matrix(d1, d0) / np.sqrt(d0))
                k0 = (SplitMix64(derive_seed(spec.seed, _TAG_K0, attempt))
                      .matrix(d0, spec.m0) * spec.key_scale)
                gram = k0 @ k0.T
                last_eig = float(np.linalg.eigvalsh((gram + gram.T) * 0.5)[0])
                if last_eig > 0.0:
                    self._preserved = (w0, k0)
                    break
            else:
                raise GenerationError(
                    f"preserved keys stayed rank deficient after 3 attempts "
                    f"(smallest Gram eigenvalue {last_eig!r}); check key_scale"
                )
        return self._preserved

    def batch(self, t: int) -> EditBatch:
        """Batch for timestamp t (1-based)."""
        spec = self.spec
        if t < 1 or t > spec.total_batches:
            raise StreamExhausted(
                f"batch index {t} outside 1..{spec.total_batches}"
            )
        d0, d1, n = spec.dims.d0, spec.dims.d1, spec.n_per_batch
        k1 = SplitMix64(derive_seed(spec.seed, _TAG_KEYS, t)).matrix(d0, n) * spec.key_scale
        if spec.value_mode == "random-target":
            v1 = SplitMix64(derive_seed(spec.seed, _TAG_TEACHER, t)).matrix(d1, n)
        else:
            w0, _ = self.generate_preserved()
            if spec.teacher_drift == 0.0:
                # Exactly representable stream: values come straight from w0.
                v1 = w0 @ k1
            else:
                wobble = SplitMix64(derive_seed(spec.seed, _TAG_TEACHER, t)).matrix(d1, d0)
                v1 = (w0 + spec.teacher_drift * wobble) @ k1
        return EditBatch(k1=k1, v1=v1)

    def next_batch(self) -> EditBatch:
        if self._emitted >= self.spec.total_batches:
            raise StreamExhausted(
                f"stream exhausted after {self.spec.total_batches} batches"
            )
        self._emitted += 1
        return self.batch(self._emitted)

    @property
    def emitted(self) -> int:
        return self._emitted


# --- KVMX file format -------------------------------------------------------

_MATRIX_MAGIC = b"KVMX"
_BATCH_MAGIC = b"KVB1"
_FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")
# Refuse to materialize anything bigger than this many elements.
_MAX_ELEMENTS = 1 << 48


def _encode_matrix(matrix: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(matrix, dtype="<f8")
    if arr.ndim != 2:
        raise InputError(f"matrix must be 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteError("refusing to write non-finite values to a KVMX file")
    header = _HEADER.pack(_MATRIX_MAGIC, _FORMAT_VERSION, arr.shape[0], arr.shape[1])
    return header + arr.tobytes(order="C")


def _decode_matrix(buf: bytes, offset: int, where: str):
    if len(buf) - offset < _HEADER.size:
        raise KvmxTruncatedError(f"{where}: header truncated at byte {offset}")
    magic, version, rows, cols = _HEADER.unpack_from(buf, offset)
    if magic != _MATRIX_MAGIC:
        raise KvmxBadMagicError(f"{where}: expected {_MATRIX_MAGIC!r}, found {magic!r}")
    if version != _FORMAT_VERSION:
        raise KvmxFormatError(f"{where}: unsupported format version {version}")
    if rows == 0 or cols == 0 or rows * cols > _MAX_ELEMENTS:
        raise KvmxDimOverflowError(f"{where}: header claims {rows} x {cols} values")
    count = rows * cols
    payload_start = offset + _HEADER.size
    if len(buf) - payload_start < count * 8:
        raise KvmxTruncatedError(
            f"{where}: header claims {count} values but only "
            f"{(len(buf) - payload_start) // 8} are present"
        )
    flat = np.frombuffer(buf, dtype="<f8", count=count, offset=payload_start)
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        raise KvmxNonFiniteError(
            f"{where}: non-finite value at element offset {int(bad[0])}",
            offset=int(bad[0]),
        )
    matrix = flat.astype(np.float64).reshape(rows, cols)
    return matrix, payload_start + count * 8


def save_matrix_file(path, matrix) -> None:
    Path(path).write_bytes(_encode_matrix(np.asarray(matrix)))


def load_matrix_file(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    matrix, end = _decode_matrix(buf, 0, str(path))
    if end != len(buf):
        raise KvmxFormatError(f"{path}: {len(buf) - end} trailing bytes after payload")
    return matrix


def save_batch_file(path, batch: EditBatch) -> None:
    Path(path).write_bytes(
        _BATCH_MAGIC + _encode_matrix(batch.k1) + _encode_matrix(batch.v1)
    )


def load_batch_file(path) -> EditBatch:
    buf = Path(path).read_bytes()
    if len(buf) < len(_BATCH_MAGIC):
        raise KvmxTruncatedError(f"{path}: batch header truncated")
    if buf[: len(_BATCH_MAGIC)] != _BATCH_MAGIC:
        raise KvmxBadMagicError(
            f"{path}: expected {_BATCH_MAGIC!r}, found {buf[:len(_BATCH_MAGIC)]!r}"
        )
    k1, offset = _decode_matrix(buf, len(_BATCH_MAGIC), str(path))
    v1, end = _decode_matrix(buf, offset, str(path))
    if end != len(buf):
        raise KvmxFormatError(f"{path}: {len(buf) - end} trailing bytes after payload")
    return EditBatch(k1=k1, v1=v1)
