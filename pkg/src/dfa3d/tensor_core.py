"""Instrumented dense tensors.

Every tensor the operators allocate goes through :func:`alloc`, which
registers the payload with a process-wide registry.  Live bytes are released
when the underlying buffer is garbage collected, so a measured region sees a
faithful peak of the tracked allocations it made.  Scratch memory created
outside these helpers (numpy temporaries, compiled-kernel locals) is not
tracked.

Multiplies are counted through explicit calls: the helpers below count
their own work and the compiled kernels report a per-sampling-point cost via
:func:`count_multiplies`.
"""

from __future__ import annotations

import contextlib
import io
import json
import struct
import threading
import time
import weakref
from dataclasses import dataclass, field
from os import PathLike
from typing import Any, BinaryIO, Callable, Iterator, Sequence

import numpy as np

MAGIC = b"DTNSR\x00\x00\x01"

_DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
}
_CODES = {np.dtype("<f4"): "f32", np.dtype("<f8"): "f64"}

_MAX_BYTES = np.iinfo(np.intp).max


class AllocationOverflowError(OverflowError):
    pass


class NestedRegionError(RuntimeError):
    pass


class ContainerError(ValueError):
    pass


def resolve_dtype(dtype: Any) -> np.dtype:
    """Map ``"f32"``/``"f64"`` (or the numpy equivalents) to a numpy dtype."""
    if isinstance(dtype, str):
        try:
            return _DTYPES[dtype]
        except KeyError:
            raise ValueError(f"unsupported dtype {dtype!r}") from None
    dt = np.dtype(dtype).newbyteorder("<")
    if dt not in _CODES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    return dt


def dtype_code(dtype: Any) -> str:
    return _CODES[resolve_dtype(dtype)]


@dataclass
class InstrumentationReport:
    peak_bytes: int = 0
    multiplies: int = 0
    wall_time: float = 0.0
    by_category: dict[str, int] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "peak_bytes": self.peak_bytes,
            "multiplies": self.multiplies,
            "wall_time": self.wall_time,
            "by_category": dict(self.by_category),
        }


class _Region:
    def __init__(self, baseline: int):
        self.baseline = baseline
        self.peak = 0
        self.counts: dict[str, int] = {}


class _Registry:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.live_bytes = 0
        self.region: _Region | None = None
        self._next_id = 0

    def register(self, nbytes: int) -> int:
        with self._lock:
            self._next_id += 1
            self.live_bytes += nbytes
            r = self.region
            if r is not None:
                r.peak = max(r.peak, self.live_bytes - r.baseline)
            return self._next_id

    def release(self, nbytes: int) -> None:
        with self._lock:
            self.live_bytes -= nbytes

    def add(self, n: int, category: str) -> None:
        with self._lock:
            r = self.region
            if r is not None:
                r.counts[category] = r.counts.get(category, 0) + int(n)


_registry = _Registry()


def live_bytes() -> int:
    """Bytes currently held by tracked tensors."""
    return _registry.live_bytes


class DenseTensor:
    """Row-major contiguous array registered with the instrumentation registry.

    ``data`` is a plain C-contiguous numpy array; the registration follows the
    buffer, so arrays handed out from ``data`` keep their bytes counted for as
    long as they are alive.
    """

    __slots__ = ("data", "id", "__weakref__")

    def __init__(self, data: np.ndarray, tensor_id: int):
        self.data = data
        self.id = tensor_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> str:
        return _CODES[self.data.dtype]

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def strides(self) -> tuple[int, ...]:
        """Element strides; the last axis always has stride 1."""
        out = []
        acc = 1
        for extent in reversed(self.shape):
            out.append(acc)
            acc *= extent
        return tuple(reversed(out))

    def offset(self, index: Sequence[int]) -> int:
        if len(index) != self.data.ndim:
            raise IndexError(f"expected {self.data.ndim} indices, got {len(index)}")
        for i, extent in zip(index, self.shape):
            if not 0 <= i < extent:
                raise IndexError(f"index {tuple(index)} out of bounds for {self.shape}")
        return sum(i * s for i, s in zip(index, self.strides()))

    def __getitem__(self, index):
        return self.data.reshape(-1)[self.offset(index)]

    def __setitem__(self, index, value):
        self.data.reshape(-1)[self.offset(index)] = value

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)

    def __repr__(self) -> str:
        return f"DenseTensor(shape={self.shape}, dtype={self.dtype}, id={self.id})"


def _checked_nbytes(shape: Sequence[int], dt: np.dtype) -> int:
    total = dt.itemsize
    for extent in shape:
        if extent < 0:
            raise ValueError(f"negative extent in shape {tuple(shape)}")
        total *= int(extent)
        if total > _MAX_BYTES:
            raise AllocationOverflowError(f"shape {tuple(shape)} overflows the address space")
    return total


def _track(data: np.ndarray) -> DenseTensor:
    nbytes = data.nbytes
    tid = _registry.register(nbytes)
    weakref.finalize(data, _registry.release, nbytes)
    return DenseTensor(data, tid)


def alloc(shape: Sequence[int], dtype: Any = "f64") -> DenseTensor:
    """Zero-initialised tracked tensor."""
    dt = resolve_dtype(dtype)
    shape = tuple(int(s) for s in shape)
    _checked_nbytes(shape, dt)
    return _track(np.zeros(shape, dtype=dt))


def tracked(array: np.ndarray, dtype: Any = None) -> DenseTensor:
    """Copy ``array`` into a freshly tracked row-major tensor."""
    arr = np.asarray(array)
    dt = resolve_dtype(dtype if dtype is not None else arr.dtype)
    out = alloc(arr.shape, dt)
    out.data[...] = arr
    return out


def count_multiplies(n: int, category: str = "feature") -> None:
    """Credit ``n`` scalar multiplies to the active measured region, if any."""
    if n < 0:
        raise ValueError("multiply count must be non-negative")
    _registry.add(n, category)


@contextlib.contextmanager
def measure() -> Iterator[InstrumentationReport]:
    """Measure tracked peak bytes, counted multiplies and wall time.

    Regions are flat; opening one inside another raises NestedRegionError.
    """
    reg = _registry
    with reg._lock:
        if reg.region is not None:
            raise NestedRegionError("measured regions cannot be nested")
        region = _Region(reg.live_bytes)
        reg.region = region
    report = InstrumentationReport()
    t0 = time.perf_counter()
    try:
        yield report
    finally:
        report.wall_time = time.perf_counter() - t0
        with reg._lock:
            reg.region = None
        report.peak_bytes = region.peak
        report.by_category = dict(region.counts)
        report.multiplies = sum(region.counts.values())


def counted_multiply_region(body: Callable[[], Any]) -> InstrumentationReport:
    with measure() as report:
        body()
    return report


# -- counted helpers -------------------------------------------------------


def dot(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"dot needs equal-length vectors, got {a.shape} and {b.shape}")
    count_multiplies(a.size)
    return float(np.dot(a, b))


def multiply(a, b, out: np.ndarray | None = None) -> np.ndarray:
    """Element-wise product of two same-shape arrays."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if out is None:
        out = alloc(a.shape, np.result_type(a, b)).data
    np.multiply(a, b, out=out)
    count_multiplies(a.size)
    return out


def matvec_rows(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``x @ w.T`` for a batch of row vectors ``x`` (N x n) and ``w`` (m x n)."""
    w = np.asarray(w)
    x = np.asarray(x)
    if w.ndim != 2 or x.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ValueError(f"matvec shape mismatch: w {w.shape}, x {x.shape}")
    out = alloc((x.shape[0], w.shape[0]), np.result_type(w, x)).data
    np.matmul(x, w.T, out=out)
    count_multiplies(x.shape[0] * w.shape[0] * w.shape[1], "linear")
    return out


def outer_last(a: np.ndarray, b: np.ndarray, dtype: Any = None) -> np.ndarray:
    """Outer product over the last axis: ``out[..., i, j] = a[..., i] * b[..., j]``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ValueError(f"leading extents differ: {a.shape} vs {b.shape}")
    dt = resolve_dtype(dtype) if dtype is not None else np.result_type(a, b)
    out = alloc(a.shape + b.shape[-1:], dt).data
    np.multiply(a[..., :, None], b[..., None, :], out=out)
    count_multiplies(out.size)
    return out


# -- binary container -------------------------------------------------------


def write_tensor(fh: BinaryIO, array) -> None:
    arr = np.asarray(array)
    dt = resolve_dtype(arr.dtype)
    header = json.dumps({"shape": list(arr.shape), "dtype": _CODES[dt]}).encode("utf-8")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", len(header)))
    fh.write(header)
    fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> DenseTensor:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise ContainerError("not a DTNSR container (bad magic)")
    raw = fh.read(4)
    if len(raw) != 4:
        raise ContainerError("truncated header length")
    (hlen,) = struct.unpack("<I", raw)
    try:
        header = json.loads(fh.read(hlen).decode("utf-8"))
        shape = [int(s) for s in header["shape"]]
        dt = resolve_dtype(header["dtype"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ContainerError(f"malformed header: {exc}") from exc
    out = alloc(shape, dt)
    payload = fh.read(out.nbytes)
    if len(payload) != out.nbytes:
        raise ContainerError(f"payload truncated: expected {out.nbytes} bytes, got {len(payload)}")
    out.data.reshape(-1)[:] = np.frombuffer(payload, dtype=dt)
    return out


def tensor_to_bytes(array) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def tensor_from_bytes(blob: bytes) -> DenseTensor:
    return read_tensor(io.BytesIO(blob))


def save_tensor(path: str | PathLike, array) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path: str | PathLike) -> DenseTensor:
    with open(path, "rb") as fh:
        return read_tensor(fh)
