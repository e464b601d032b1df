"""The bit-allocation search problem.

The search variable is the log2 of the per-layer bit widths, weights first
then activations. Bits are recovered as ceil(2**v). Constraints on model size
and on the mean activation log-precision are folded into the objective with
a quadratic penalty.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .network import PINNED_BITS, QUANTIZED, Model
from .superbatch import stack_snapshot
from .tensor import cross_entropy, no_grad

V_LO, V_HI = 0.0, 3.0
MIN_WEIGHT_BITS = 2
BYTES_PER_MB = 1e6
# 2**log2(b) can land one ulp above the integer b; treat that as b.
_CEIL_RTOL = 1e-12


@dataclass
class LogPrecisionVector:
    v: np.ndarray
    v_static: Optional[np.ndarray] = None
    lo: float = V_LO
    hi: float = V_HI

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64).reshape(-1)
        if self.v.size % 2:
            raise ValueError("log-precision vector must have even length 2L")

    @property
    def L(self) -> int:
        return self.v.size // 2

    @property
    def weights(self) -> np.ndarray:
        return self.v[:self.L]

    @property
    def acts(self) -> np.ndarray:
        return self.v[self.L:]

    def clamped(self) -> "LogPrecisionVector":
        return LogPrecisionVector(clamp_search_space(self.v, self.lo, self.hi), self.v_static,
                                  self.lo, self.hi)


def _as_v(v) -> np.ndarray:
    return v.v if isinstance(v, LogPrecisionVector) else np.asarray(v, dtype=np.float64).reshape(-1)


def encode_log_precision(r_w: Sequence[int], r_x: Sequence[int]) -> LogPrecisionVector:
    bits = np.asarray(list(r_w) + list(r_x), dtype=np.float64)
    if len(r_w) != len(r_x):
        raise ValueError("weight and activation bit lists must have equal length")
    if np.any(bits < 1):
        raise ValueError("bit widths must be >= 1")
    return LogPrecisionVector(np.log2(bits))


def ceil_pow2(v) -> np.ndarray:
    p = np.exp2(np.asarray(v, dtype=np.float64))
    return np.ceil(p * (1 - _CEIL_RTOL)).astype(np.int64)


def extract_bits(v) -> Tuple[List[int], List[int]]:
    """(r_W, r_X) = ceil(2**v), with weight widths floored at 2."""
    arr = _as_v(v)
    if not np.all(np.isfinite(arr)):
        raise ValueError("log-precision vector must be finite")
    L = arr.size // 2
    r = ceil_pow2(arr)
    r_w = np.maximum(r[:L], MIN_WEIGHT_BITS)
    return [int(b) for b in r_w], [int(b) for b in r[L:]]


def clamp_search_space(v, lo: float = V_LO, hi: float = V_HI) -> np.ndarray:
    arr = v.v if isinstance(v, LogPrecisionVector) else np.asarray(v, dtype=np.float64)
    return np.clip(arr, lo, hi)


def model_size_mb(v_w, counts: Sequence[Tuple[int, int, bool]],
                  unit_bytes: float = BYTES_PER_MB) -> float:
    """Weight storage of the model, in units of ``unit_bytes`` (MB by default).

    ``counts`` is ``Model.param_counts()``; pinned layers count at 8 bits and
    searchable layers take their widths from ``v_w`` in order.
    """
    v_w = np.asarray(v_w, dtype=np.float64).reshape(-1)
    bits = np.maximum(ceil_pow2(v_w), MIN_WEIGHT_BITS)
    searchable = [n for _, n, pinned in counts if not pinned]
    if len(searchable) != v_w.size:
        raise ValueError(f"{v_w.size} weight coordinates for {len(searchable)} searchable layers")
    total_bits = float(np.dot(np.asarray(searchable, dtype=np.float64), bits))
    total_bits += float(sum(n * PINNED_BITS for _, n, pinned in counts if pinned))
    return total_bits / (8.0 * unit_bytes)


def mean_activation_log(v_x) -> float:
    return float(np.mean(np.asarray(v_x, dtype=np.float64)))


def penalty_term(h: Sequence[float], C: Sequence[float], rho: Sequence[float]) -> float:
    return float(sum(r * max(0.0, hj - cj) ** 2 for hj, cj, r in zip(h, C, rho)))


def penalty_objective(mean_loss: float, h: Sequence[float], C: Sequence[float],
                      rho: Sequence[float]) -> float:
    if any(r < 0 for r in rho):
        raise ValueError("penalty weights must be nonnegative")
    return float(mean_loss) + penalty_term(h, C, rho)


@dataclass
class ConstraintSet:
    v_static: np.ndarray
    counts: List[Tuple[int, int, bool]]
    beta1: float = 0.7
    beta2: float = 0.7
    rho1: float = 0.5
    rho2: float = 0.5
    unit_bytes: float = BYTES_PER_MB

    def __post_init__(self):
        self.v_static = np.asarray(self.v_static, dtype=np.float64).reshape(-1)
        if self.beta1 <= 0 or self.beta2 <= 0:
            raise ValueError("beta values must be positive")
        if self.rho1 < 0 or self.rho2 < 0:
            raise ValueError("rho values must be nonnegative")

    @classmethod
    def for_model(cls, model: Model, static_bits: int, **kw) -> "ConstraintSet":
        v_s = encode_log_precision([static_bits] * model.L, [static_bits] * model.L).v
        return cls(v_s, model.param_counts(), **kw)

    @property
    def L(self) -> int:
        return self.v_static.size // 2

    @property
    def C1(self) -> float:
        return self.beta1 * model_size_mb(self.v_static[:self.L], self.counts, self.unit_bytes)

    @property
    def C2(self) -> float:
        return self.beta2 * mean_activation_log(self.v_static[self.L:])

    @property
    def C(self) -> Tuple[float, float]:
        return self.C1, self.C2

    @property
    def rho(self) -> Tuple[float, float]:
        return self.rho1, self.rho2

    def h(self, v) -> Tuple[float, float]:
        arr = _as_v(v)
        L = self.L
        return (model_size_mb(arr[:L], self.counts, self.unit_bytes),
                mean_activation_log(arr[L:]))

    def penalty(self, v) -> float:
        return penalty_term(self.h(v), self.C, self.rho)


def superbatch_loss(model: Model, snapshot) -> float:
    """Mean cross-entropy of the quantized model over every mini-batch."""
    x, y = stack_snapshot(snapshot)
    with no_grad():
        logits = model.forward(x, QUANTIZED, train=False)
        return float(cross_entropy(logits, y).data)


def evaluate_candidate(v, model: Model, snapshot, constraints: ConstraintSet,
                       return_record: bool = False):
    """Install the bits encoded by ``v`` and score them on a super-batch snapshot."""
    arr = _as_v(v)
    r_w, r_x = extract_bits(arr)
    model.set_bit_allocation(r_w, r_x)
    loss = superbatch_loss(model, snapshot)
    h = constraints.h(arr)
    obj = penalty_objective(loss, h, constraints.C, constraints.rho)
    if not return_record:
        return obj
    return obj, {"v": arr.tolist(), "r_w": r_w, "r_x": r_x, "h1": h[0], "h2": h[1],
                 "loss": loss, "objective": obj}
