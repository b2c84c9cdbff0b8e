"""Dense float32 matrices plus the handful of reductions adapter scoring needs.

Every reduction accumulates in float64 with a fixed element order, so results
are bit-identical across runs and worker counts. np.cumsum is used for the
sequential sums: unlike np.sum (pairwise), it accumulates strictly left to
right, matching a plain element loop bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError, ShapeError

DTYPE_WIDTHS = {"F32": 4, "F16": 2, "BF16": 2}


def _seq_sum_f64(values: np.ndarray) -> float:
    """Sum `values` in float64, strictly in array order."""
    if values.size == 0:
        return 0.0
    return float(np.cumsum(values.astype(np.float64, copy=False))[-1])


@dataclass(frozen=True)
class DenseMatrix:
    """Immutable row-major float32 matrix.

    `data` is the flat row-major payload of length rows * cols. All elements
    are finite; non-finite input is rejected at construction rather than
    propagated silently.
    """

    rows: int
    cols: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise ShapeError(f"matrix dims must be positive, got {self.rows}x{self.cols}")
        data = np.ascontiguousarray(self.data, dtype=np.float32).reshape(-1)
        if data.size != self.rows * self.cols:
            raise ShapeError(
                f"payload length {data.size} != rows*cols = {self.rows * self.cols}"
            )
        if not np.isfinite(data).all():
            raise DataError("matrix payload contains NaN or Inf")
        if data.flags.writeable:
            data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @classmethod
    def from_2d(cls, arr: np.ndarray) -> "DenseMatrix":
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise ShapeError(f"expected a 2-D array, got ndim={arr.ndim}")
        return cls(arr.shape[0], arr.shape[1], arr)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def size(self) -> int:
        return self.rows * self.cols

    def to_2d(self) -> np.ndarray:
        """Read-only (rows, cols) view of the payload."""
        return self.data.reshape(self.rows, self.cols)

    def __eq__(self, other):
        if not isinstance(other, DenseMatrix):
            return NotImplemented
        return (
            self.rows == other.rows
            and self.cols == other.cols
            and bool(np.array_equal(self.data, other.data))
        )


def decode_to_f32(raw: bytes, dtype: str, count: int, name: str = "") -> np.ndarray:
    """Decode little-endian F32/F16/BF16 bytes to a float32 array.

    F16 and BF16 widen losslessly; F32 passes through bit-exactly. Rejects
    length mismatches and non-finite values.
    """
    width = DTYPE_WIDTHS.get(dtype)
    if width is None:
        raise FormatError(f"unsupported dtype {dtype!r}" + (f" for tensor {name!r}" if name else ""))
    if len(raw) != count * width:
        raise FormatError(
            f"byte length {len(raw)} != {count} x {width} for dtype {dtype}"
            + (f" (tensor {name!r})" if name else "")
        )
    if dtype == "F32":
        out = np.frombuffer(raw, dtype="<f4")
    elif dtype == "F16":
        out = np.frombuffer(raw, dtype="<f2").astype(np.float32)
    else:  # BF16: the high 16 bits of an f32
        out = (np.frombuffer(raw, dtype="<u2").astype("<u4") << 16).view("<f4")
    if not np.isfinite(out).all():
        raise DataError("non-finite value in tensor" + (f" {name!r}" if name else ""))
    return out


def matmul(b: DenseMatrix, a: DenseMatrix, name: str = "") -> DenseMatrix:
    """Product b @ a, accumulated in float64 and rounded to float32 on store."""
    if b.cols != a.rows:
        raise ShapeError(
            f"inner dims disagree: {b.shape} x {a.shape}" + (f" (layer {name!r})" if name else "")
        )
    prod = b.to_2d().astype(np.float64) @ a.to_2d().astype(np.float64)
    return DenseMatrix.from_2d(prod.astype(np.float32))


def abs_sum(m: DenseMatrix) -> float:
    """Sum of |element| over all entries, float64, row-major order."""
    return _seq_sum_f64(np.abs(m.data))


def topk_abs_sum(m: DenseMatrix, k: int) -> float:
    """Sum of the k largest absolute values of m (with multiplicity).

    k past the element count is clamped, so the result equals abs_sum(m)
    there. The selected values are summed in descending order, matching a
    sort-based reference bit for bit (ties carry equal values, so tie order
    cannot change the sum).
    """
    if k <= 0:
        raise ValueError(f"k must be >= 1, got {k}")
    size = m.size
    if k >= size:
        return abs_sum(m)
    av = np.abs(m.data)
    top = np.partition(av, size - k)[size - k:]
    top = np.sort(top)[::-1]
    return _seq_sum_f64(top)
