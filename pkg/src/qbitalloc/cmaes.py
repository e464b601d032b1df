"""CMA-ES with rank-one and rank-mu covariance updates and cumulative
step-size adaptation.

The mean is stored as ``origin + shift``: every update acts on ``shift``, and
samples are built from cached standard-normal draws, so a translated problem
started from a translated origin evolves through bit-identical shifts,
step sizes and covariances.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

STAGNATION_TOL = 1e-12
STAGNATION_GENERATIONS = 20
SIGMA_FLOOR = 1e-16
EIGEN_FLOOR = 1e-14


class CmaError(RuntimeError):
    pass


@dataclass
class CmaParams:
    lam: int
    mu: int
    weights: np.ndarray
    mu_eff: float
    c_m: float
    c_c: float
    c_sigma: float
    c_1: float
    c_mu: float
    d_sigma: float
    chi_n: float

    @classmethod
    def default(cls, d: int, lam: Optional[int] = None) -> "CmaParams":
        if d < 1:
            raise ValueError("dimension must be >= 1")
        lam = 4 + int(math.floor(3 * math.log(d))) if lam is None else int(lam)
        if lam < 2:
            raise ValueError("population size must be >= 2")
        mu = lam // 2
        raw = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
        weights = raw / raw.sum()
        mu_eff = 1.0 / float(np.sum(weights ** 2))
        c_sigma = (mu_eff + 2) / (d + mu_eff + 5)
        d_sigma = 1 + 2 * max(0.0, math.sqrt((mu_eff - 1) / (d + 1)) - 1) + c_sigma
        c_c = (4 + mu_eff / d) / (d + 4 + 2 * mu_eff / d)
        c_1 = 2 / ((d + 1.3) ** 2 + mu_eff)
        c_mu = min(1 - c_1, 2 * (mu_eff - 2 + 1 / mu_eff) / ((d + 2) ** 2 + mu_eff))
        chi_n = math.sqrt(d) * (1 - 1 / (4 * d) + 1 / (21 * d * d))
        return cls(lam, mu, weights, mu_eff, 1.0, c_c, c_sigma, c_1, c_mu, d_sigma, chi_n)


@dataclass
class CmaState:
    d: int
    origin: np.ndarray
    sigma: float
    params: CmaParams
    rng: np.random.Generator
    sigma0: float = 1.0
    seed: Optional[int] = None
    shift: np.ndarray = None
    C: np.ndarray = None
    p_c: np.ndarray = None
    p_sigma: np.ndarray = None
    B: np.ndarray = None
    D: np.ndarray = None
    eigen_stale: bool = False
    g: int = 0
    evals: int = 0
    best_x: Optional[np.ndarray] = None
    best_f: float = math.inf
    _last_x: Optional[np.ndarray] = field(default=None, repr=False)
    _last_z: Optional[np.ndarray] = field(default=None, repr=False)
    _last_y: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        d = self.d
        self.shift = np.zeros(d) if self.shift is None else self.shift
        self.C = np.eye(d) if self.C is None else self.C
        self.p_c = np.zeros(d) if self.p_c is None else self.p_c
        self.p_sigma = np.zeros(d) if self.p_sigma is None else self.p_sigma
        if self.B is None:
            self.B, self.D = np.eye(d), np.ones(d)

    @property
    def m(self) -> np.ndarray:
        return self.origin + self.shift

    @property
    def lam(self) -> int:
        return self.params.lam

    @property
    def axis_ratio(self) -> float:
        return float(self.D.max() / self.D.min())

    def _refresh_eigen(self) -> None:
        if not self.eigen_stale:
            return
        ev, B = np.linalg.eigh(self.C)
        floor = EIGEN_FLOOR * max(ev.max(), 0.0)
        if ev.max() <= 0:
            raise CmaError("covariance matrix lost positive definiteness")
        if ev.min() < floor:
            ev = np.maximum(ev, floor)
            C = (B * ev) @ B.T
            self.C = (C + C.T) / 2
        self.B, self.D = B, np.sqrt(ev)
        self.eigen_stale = False

    def ask(self, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Draw lambda candidates m + sigma * B D z (one per row)."""
        self._refresh_eigen()
        rng = self.rng if rng is None else rng
        z = rng.standard_normal((self.lam, self.d))
        y = z @ (self.B * self.D).T
        x = self.m + self.sigma * y
        self._last_x, self._last_z, self._last_y = x, z, y
        return x.copy()

    def tell(self, candidates: np.ndarray, f_values: Sequence[float],
             evaluated: Optional[np.ndarray] = None) -> "CmaState":
        """Update the distribution from the f-values of the last ``ask``.

        ``candidates`` must be the array returned by ``ask`` (in that order).
        ``evaluated`` optionally gives the points actually evaluated (e.g.
        clamped into bounds); best-ever tracking records those.
        """
        candidates = np.asarray(candidates, dtype=np.float64)
        f = np.asarray(f_values, dtype=np.float64)
        if self._last_x is None:
            raise CmaError("tell called before ask")
        if candidates.shape != self._last_x.shape or f.shape != (self.lam,):
            raise CmaError(f"tell expects {self.lam} candidates and f-values from the last ask")
        if not np.array_equal(candidates, self._last_x):
            raise CmaError("candidates do not match the last ask")
        order, flagged = rank(candidates, f)
        if flagged.all():
            raise CmaError("every candidate in the generation returned NaN")
        self._record_best(candidates if evaluated is None else np.asarray(evaluated), f)
        self.evals += self.lam

        p = self.params
        w = p.weights
        sel = order[:p.mu]
        y_sel = self._last_y[sel]
        z_sel = self._last_z[sel]
        y_w = w @ y_sel
        step = p.c_m * y_w  # (m_new - m_old) / sigma

        self.shift = self.shift + self.sigma * step
        self.p_c = (1 - p.c_c) * self.p_c + math.sqrt(p.c_c * (2 - p.c_c) * p.mu_eff) * step
        c_mu_mat = (y_sel.T * w) @ y_sel
        c_1_mat = np.outer(self.p_c, self.p_c)
        c_old = 1 - p.c_1 - p.c_mu * float(w.sum())
        C = c_old * self.C + p.c_1 * c_1_mat + p.c_mu * c_mu_mat
        # C^{-1/2} (m_new - m_old) / sigma == c_m * B (sum w_i z_i)
        inv_sqrt_step = p.c_m * (self.B @ (w @ z_sel))
        self.p_sigma = ((1 - p.c_sigma) * self.p_sigma
                        + math.sqrt(p.c_sigma * (2 - p.c_sigma) * p.mu_eff) * inv_sqrt_step)
        self.sigma = self.sigma * math.exp(
            (p.c_sigma / p.d_sigma) * (float(np.linalg.norm(self.p_sigma)) / p.chi_n - 1))

        self.C = (C + C.T) / 2
        self.eigen_stale = True
        self._refresh_eigen()
        self.g += 1
        self._last_x = self._last_z = self._last_y = None
        return self

    def _record_best(self, xs: np.ndarray, f: np.ndarray) -> None:
        finite = ~np.isnan(f)
        if not finite.any():
            return
        i = int(np.flatnonzero(finite)[np.argmin(f[finite])])
        if f[i] < self.best_f:
            self.best_f = float(f[i])
            self.best_x = np.array(xs[i], dtype=np.float64)


def cma_init(d: int, m0, sigma0: float, lam: Optional[int] = None,
             seed: Optional[int] = None) -> CmaState:
    if sigma0 <= 0 or not math.isfinite(sigma0):
        raise ValueError("sigma0 must be a positive finite number")
    m0 = np.asarray(m0, dtype=np.float64).reshape(-1)
    if m0.size == 1 and d > 1:
        m0 = np.full(d, float(m0[0]))
    if m0.shape != (d,):
        raise ValueError(f"m0 must have length {d}")
    return CmaState(d=d, origin=m0.copy(), sigma=float(sigma0), params=CmaParams.default(d, lam),
                    rng=np.random.default_rng(seed), sigma0=float(sigma0), seed=seed)


def ask(state: CmaState, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    return state.ask(rng)


def tell(state: CmaState, candidates, f_values, evaluated=None) -> CmaState:
    return state.tell(candidates, f_values, evaluated)


def rank(candidates, f_values) -> Tuple[np.ndarray, np.ndarray]:
    """Ascending order of f with stable ties; NaN candidates go last and are flagged."""
    f = np.asarray(f_values, dtype=np.float64)
    if len(candidates) != f.size:
        raise ValueError("candidate and f-value counts differ")
    nan = np.isnan(f)
    order = np.lexsort((np.arange(f.size), np.where(nan, 0.0, f), nan))
    return order, nan


def restart(state: CmaState, mean=None, seed: Optional[int] = None) -> CmaState:
    """Fresh state (C = I, zero paths, no best-ever) with the same size settings."""
    m0 = state.origin if mean is None else mean
    return cma_init(state.d, m0, state.sigma0, state.lam, state.seed if seed is None else seed)


def cma_optimize(objective: Callable[[np.ndarray], float], d: int, m0, sigma0: float,
                 budget: int, bounds: Optional[Tuple[float, float]] = None,
                 lam: Optional[int] = None, seed: Optional[int] = 0,
                 stagnation: bool = True):
    """Minimize ``objective``; return (best x, best f, per-generation history)."""
    state = cma_init(d, m0, sigma0, lam, seed)
    if budget < state.lam:
        raise ValueError(f"budget {budget} smaller than population size {state.lam}")
    history: List[dict] = []
    best_trace: List[float] = []
    while state.evals + state.lam <= budget:
        x = state.ask()
        xe = x if bounds is None else np.clip(x, bounds[0], bounds[1])
        f = np.array([objective(xi) for xi in xe], dtype=np.float64)
        if np.isnan(f).all():
            raise CmaError(f"objective returned NaN for every candidate at generation {state.g}")
        state.tell(x, f, evaluated=xe)
        finite = f[~np.isnan(f)]
        history.append({"generation": state.g, "evals": state.evals, "best_f": state.best_f,
                        "gen_best_f": float(finite.min()), "mean_f": float(finite.mean()),
                        "sigma": state.sigma, "axis_ratio": state.axis_ratio})
        best_trace.append(state.best_f)
        if state.sigma < SIGMA_FLOOR:
            break
        if stagnation and len(best_trace) > STAGNATION_GENERATIONS:
            if best_trace[-STAGNATION_GENERATIONS - 1] - best_trace[-1] < STAGNATION_TOL:
                break
    return state.best_x, state.best_f, history
