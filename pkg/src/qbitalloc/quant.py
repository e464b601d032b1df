"""Uniform fake quantization with learnable clipping scales.

Weights use a signed symmetric grid, activations an unsigned one. Rounding
is trained through with the straight-through estimator; the clipping scale
alpha receives the STE-derived gradient.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .tensor import Tensor, UsageError, _make, as_tensor

NORM_EPS = 1e-6


@dataclass
class QuantSpec:
    """Per-tensor quantizer description. ``alpha`` is a learnable scalar tensor."""

    signed: bool
    bits: int
    alpha: Tensor

    def __post_init__(self):
        check_bits(self.bits, self.signed)
        if not isinstance(self.alpha, Tensor):
            self.alpha = Tensor(float(self.alpha), requires_grad=True)
        if not float(self.alpha.data) > 0:
            raise ValueError("clipping scale alpha must be positive")

    @property
    def levels(self) -> int:
        """Largest integer code magnitude."""
        return 2 ** (self.bits - 1) - 1 if self.signed else 2 ** self.bits - 1

    @property
    def code_range(self) -> Tuple[int, int]:
        n = self.levels
        return (-n, n) if self.signed else (0, n)


def check_bits(bits: int, signed: bool) -> None:
    if int(bits) != bits:
        raise ValueError(f"bits must be an integer, got {bits}")
    if signed and bits < 2:
        raise ValueError(f"signed quantization needs at least 2 bits, got {bits}")
    if bits < 1:
        raise ValueError(f"bits must be >= 1, got {bits}")


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def nearest_code(n: int, u) -> np.ndarray:
    """Integer nearest to the exact product n * u, ties away from zero.

    The float product can land exactly on a half-integer when the true
    product lies just beside it; the rounding error of the product (exact,
    via a Veltkamp split of u) settles those cases.
    """
    u = np.asarray(u, dtype=np.float64)
    n = float(n)
    mag = np.abs(u)
    p = n * mag
    c = 134217729.0 * mag  # 2**27 + 1
    hi = c - (c - mag)
    lo = mag - hi
    err = (n * hi - p) + n * lo
    k = np.floor(p)
    frac = p - k
    up = (frac > 0.5) | ((frac == 0.5) & (err >= 0))
    return np.copysign(k + up, u)


def quantize_unit(x, bits: int) -> np.ndarray:
    """Snap values in [-1, 1] (or [0, 1]) to the grid k / (2**bits - 1)."""
    if bits < 1:
        raise ValueError(f"bits must be >= 1, got {bits}")
    n = 2 ** int(bits) - 1
    return nearest_code(n, x) / n


def normalize_weights(w) -> Tensor:
    """(W - mean) / (std + 1e-6), population std, differentiable."""
    w = as_tensor(w)
    if w.size == 0:
        raise ValueError("cannot normalize an empty tensor")
    mu = w.data.mean()
    d = w.data - mu
    d = d - d.mean()  # second pass removes the rounding error left in mu
    sigma = np.sqrt(np.mean(d * d))
    s = sigma + NORM_EPS
    out = d / s
    count = w.size

    def bw(g):
        term = (g - g.mean()) / s
        if sigma > 0:
            term = term - (np.sum(g * d) / (s * s)) * d / (count * sigma)
        w._accumulate(term)

    return _make(out, (w,), bw, "normalize")


def _fake_quant(x: Tensor, spec: QuantSpec, lo: float) -> Tensor:
    alpha = spec.alpha
    a = float(alpha.data)
    n = spec.levels
    u = x.data / a
    clipped = np.clip(u, lo, 1.0)
    q = nearest_code(n, clipped) / n
    out = a * q
    inside = (u > lo) & (u < 1.0) if lo == 0.0 else np.abs(u) < 1.0

    def bw(g):
        if x.requires_grad:
            x._accumulate(g * inside)
        if alpha.requires_grad:
            # inside: q - u ; clipped: the clip bound (sign for signed, 1 or 0 unsigned)
            da = np.where(inside, q - clipped, clipped)
            alpha._accumulate(np.reshape(np.sum(g * da), alpha.shape))

    return _make(out, (x, alpha), bw, "fake_quant")


def fake_quant_weights(w, spec: QuantSpec) -> Tensor:
    """alpha * Q_{b-1}(clip(w / alpha, -1, 1)) with STE backward."""
    if not spec.signed:
        raise UsageError("weight quantization expects a signed QuantSpec")
    return _fake_quant(as_tensor(w), spec, -1.0)


def fake_quant_acts(x, spec: QuantSpec) -> Tensor:
    """alpha * Q_b(clip(x / alpha, 0, 1)) with STE backward."""
    if spec.signed:
        raise UsageError("activation quantization expects an unsigned QuantSpec")
    return _fake_quant(as_tensor(x), spec, 0.0)


def integer_codes(x, spec: QuantSpec) -> Tuple[np.ndarray, float]:
    """Integer grid indices ``k`` and scale ``s`` with fake_quant(x) == s * k."""
    data = as_tensor(x).data
    a = float(spec.alpha.data)
    n = spec.levels
    lo = -1.0 if spec.signed else 0.0
    codes = nearest_code(n, np.clip(data / a, lo, 1.0)).astype(np.int64)
    return codes, a / n
