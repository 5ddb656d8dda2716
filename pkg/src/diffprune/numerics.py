"""Dense float64 kernels with an exact operation counter.

Everything higher up (model, sampler, flops reconciliation) routes its
matrix contractions through :func:`contract` so that the analytic FLOPs
model can be checked against an exact count instead of an estimate.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

RMS_EPS = 1e-6


class ShapeError(ValueError):
    """Rejected input: operand shapes do not line up."""


@dataclass
class OpCounter:
    """Exact tally of multiply-adds, exponentials and divisions.

    ``by_class`` splits ``mul_adds`` by the op class that was active when the
    contraction ran (see :meth:`op_class`). The model tags transformer-block
    work as ``"layer<l>"`` and the unembedding as ``"head"``.
    """

    mul_adds: int = 0
    exp_evals: int = 0
    div_evals: int = 0
    by_class: dict[str, int] = field(default_factory=dict)
    _active: str = field(default="default", repr=False, compare=False)

    def reset(self) -> None:
        self.mul_adds = self.exp_evals = self.div_evals = 0
        self.by_class.clear()
        self._active = "default"

    @contextlib.contextmanager
    def op_class(self, name: str):
        prev = self._active
        self._active = name
        try:
            yield self
        finally:
            self._active = prev

    def add_mul_adds(self, n: int) -> None:
        self.mul_adds += n
        self.by_class[self._active] = self.by_class.get(self._active, 0) + n

    def block_mul_adds(self) -> int:
        """Mul-adds spent inside transformer blocks (the reconciled scope)."""
        return sum(v for k, v in self.by_class.items() if k.startswith("layer"))

    def per_layer(self) -> dict[int, int]:
        return {int(k[5:]): v for k, v in self.by_class.items() if k.startswith("layer")}

    def merge(self, other: "OpCounter") -> "OpCounter":
        """Fold ``other`` into this counter (per-worker counters summed at the end)."""
        self.mul_adds += other.mul_adds
        self.exp_evals += other.exp_evals
        self.div_evals += other.div_evals
        for k, v in other.by_class.items():
            self.by_class[k] = self.by_class.get(k, 0) + v
        return self

    def snapshot(self) -> dict:
        return {
            "mul_adds": self.mul_adds,
            "exp_evals": self.exp_evals,
            "div_evals": self.div_evals,
            "by_class": dict(sorted(self.by_class.items())),
        }


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce to a finite 2-D float64 array, optionally checking the shape."""
    a = np.asarray(data, dtype=np.float64)
    if a.ndim == 1 and rows is not None and cols is not None:
        if a.size != rows * cols:
            raise ShapeError(f"{a.size} values cannot fill a {rows}x{cols} matrix")
        a = a.reshape(rows, cols)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    if (rows is not None and a.shape[0] != rows) or (cols is not None and a.shape[1] != cols):
        raise ShapeError(f"expected {rows}x{cols}, got {a.shape[0]}x{a.shape[1]}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains NaN or Inf")
    return a


def contract(a: np.ndarray, b: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    """``a @ b`` with numpy broadcasting over leading dims.

    Counts ``batch * p * q * r`` mul-adds where ``batch`` is the broadcast
    leading shape. A 2-D ``b`` applied to a stacked ``a`` counts each row of
    ``a`` once, which is exactly what a dense projection costs.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("contract needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a, b)
    if counter is not None:
        q = a.shape[-1]
        counter.add_mul_adds(int(math.prod(out.shape)) * q)
    return out


def matmul(a: np.ndarray, b: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    """Plain 2-D matrix product; adds exactly p*q*r mul-adds to ``counter``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul takes 2-D matrices, got {a.shape} and {b.shape}")
    return contract(a, b, counter)


def softmax(x: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    """Softmax over the last axis with max subtraction.

    ``-inf`` entries (masked scores) come out as exact zeros. At least one
    finite entry per row is required.
    """
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    out = e / np.sum(e, axis=-1, keepdims=True)
    if counter is not None:
        counter.exp_evals += int(x.size)
        counter.div_evals += int(x.size)
    return out


def softmax_rows(a: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError("softmax_rows takes a 2-D matrix")
    return softmax(a, counter)


def rms_norm(v: np.ndarray, gain: np.ndarray, eps: float = RMS_EPS) -> np.ndarray:
    """Scale by 1/sqrt(mean(v**2) + eps) along the last axis, then by ``gain``."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] == 0:
        raise ShapeError("rms_norm of an empty vector")
    inv = 1.0 / np.sqrt(np.mean(v * v, axis=-1, keepdims=True) + eps)
    return v * inv * gain
