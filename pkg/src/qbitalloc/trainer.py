"""Training regimes: quantization-aware pretraining, gradient-based sessions
(bits frozen), gradient-free CMA-ES sessions (weights frozen), and the
alternating driver that restarts CMA-ES each round and hands over the global
best weights and bit allocation.
"""
from __future__ import annotations

import copy
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .bitalloc import ConstraintSet, clamp_search_space, evaluate_candidate, extract_bits
from .cmaes import CmaError, cma_init
from .network import QUANTIZED, Model
from .superbatch import Dataset, SuperBatch

log = logging.getLogger(__name__)

MIN_POSITIVE = 1e-4


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    momentum: float = 0.9
    lr_max: float = 0.1
    warmup_epochs: int = 1
    mixup: bool = False
    mixup_alpha: float = 0.2
    hflip: bool = False
    crop_padding: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ValueError("warmup epochs must be fewer than total epochs")
        if self.mixup and self.mixup_alpha <= 0:
            raise ValueError("mixup concentration must be positive")


@dataclass
class AlternationConfig:
    rounds: int = 3
    n_gf: int = 4
    n_gb: int = 4
    evals_per_step: int = 512
    sigma0: float = 0.5
    sb_minibatches: int = 32
    sb_batch_size: int = 128
    sb_policy: str = "SB"
    val_minibatches: int = 8
    val_batch_size: int = 128
    retrain_lr_scale: float = 0.1
    frozen_snapshot: bool = False
    workers: int = 1

    def __post_init__(self):
        if min(self.rounds, self.n_gf, self.n_gb) < 1:
            raise ValueError("rounds, n_gf and n_gb must be >= 1")
        if self.sigma0 <= 0:
            raise ValueError("sigma0 must be positive")


# -- schedule, augmentation, optimizer -----------------------------------------
def cosine_lr(t: float, total: int, lr_max: float, warmup: int = 0) -> float:
    """Linear warm-up then cosine decay to 0 at ``t == total`` (epoch units)."""
    if t < warmup:
        return lr_max * (t + 1) / warmup
    if total == warmup:
        return 0.0
    return 0.5 * lr_max * (1 + math.cos(math.pi * (t - warmup) / (total - warmup)))


def mixup_batch(x: np.ndarray, y: np.ndarray, a: float, rng: np.random.Generator,
                classes: int, lam: Optional[float] = None):
    """Convex combination of the batch with a permuted copy of itself.

    Returns the mixed inputs and soft targets. ``lam`` overrides the
    Beta(a, a) draw.
    """
    if a <= 0:
        raise ValueError("mixup concentration must be positive")
    if lam is None:
        lam = float(rng.beta(a, a))
    perm = rng.permutation(len(x))
    onehot = np.eye(classes)[y]
    return lam * x + (1 - lam) * x[perm], lam * onehot + (1 - lam) * onehot[perm]


def augment(x: np.ndarray, rng: np.random.Generator, hflip: bool, crop_padding: int) -> np.ndarray:
    if x.ndim != 4 or not (hflip or crop_padding):
        return x
    out = x
    if hflip:
        flip = rng.random(len(x)) < 0.5
        out = np.where(flip[:, None, None, None], out[..., ::-1], out)
    if crop_padding:
        p = crop_padding
        n, _, h, w = out.shape
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)))
        dy = rng.integers(0, 2 * p + 1, size=n)
        dx = rng.integers(0, 2 * p + 1, size=n)
        out = np.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])
    return out


def sgd_momentum_step(params: List[np.ndarray], grads: List[np.ndarray],
                      velocity: List[np.ndarray], lr: float, momentum: float):
    """v <- momentum * v + g ; p <- p - lr * v. Updates arrays in place."""
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError("parameter, gradient and velocity shapes differ")
        v *= momentum
        v += g
        p -= lr * v
    return params, velocity


# -- evaluation -------------------------------------------------------------------
def evaluate(model: Model, data: Dataset, mode: str = QUANTIZED,
             batch_size: int = 1024) -> Tuple[float, float]:
    """(mean cross-entropy, top-1 accuracy) over a dataset, no gradients."""
    total_loss, correct = 0.0, 0
    with T.no_grad():
        for s in range(0, len(data), batch_size):
            x, y = data.inputs[s:s + batch_size], data.labels[s:s + batch_size]
            logits = model.forward(x, mode)
            total_loss += float(T.cross_entropy(logits, y).data) * len(y)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
    return total_loss / len(data), correct / len(data)


def weights_digest(model: Model) -> str:
    import hashlib
    h = hashlib.sha256()
    for name, arr in model.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# -- gradient-based training --------------------------------------------------------
MetricsFn = Optional[Callable[..., None]]


def train_epochs(model: Model, data: Dataset, cfg: TrainConfig, epochs: int, lr_max: float,
                 warmup: int, rng: np.random.Generator, mode: str = QUANTIZED,
                 metrics: MetricsFn = None, phase: str = "pretrain", round_idx: int = 0,
                 log_init: bool = False) -> None:
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    if log_init and metrics is not None:
        loss, acc = evaluate(model, data, mode)
        metrics(phase=phase, round=round_idx, index=0, loss=loss, accuracy=acc)
    for epoch in range(epochs):
        lr = cosine_lr(epoch, epochs, lr_max, warmup)
        perm = rng.permutation(len(data))
        for s in range(0, len(data), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            x, y = data.inputs[idx], data.labels[idx]
            x = augment(x, rng, cfg.hflip, cfg.crop_padding)
            target = y
            if cfg.mixup:
                x, target = mixup_batch(x, y, cfg.mixup_alpha, rng, data.classes)
            model.zero_grad()
            loss = T.cross_entropy(model.forward(x, mode, train=True), target)
            T.backward(loss)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            sgd_momentum_step([p.data for p in params], grads, velocity, lr, cfg.momentum)
            _keep_scales_positive(model)
        model.zero_grad()
        if metrics is not None:
            ev_loss, acc = evaluate(model, data, mode)
            metrics(phase=phase, round=round_idx, index=epoch + 1, loss=ev_loss, accuracy=acc)


def _keep_scales_positive(model: Model) -> None:
    for layer in model.param_layers:
        for t in (layer.w_alpha, layer.x_alpha):
            if t.data < MIN_POSITIVE:
                t.data = np.array(MIN_POSITIVE)


def pretrain(model: Model, data: Dataset, static_bits: int, cfg: TrainConfig,
             rng: Optional[np.random.Generator] = None, metrics: MetricsFn = None,
             mode: str = QUANTIZED) -> Model:
    """Quantization-aware training at one static width for all searchable layers."""
    if static_bits < 2:
        raise ValueError("static bit width must be >= 2")
    model.set_bit_allocation([static_bits] * model.L, [static_bits] * model.L)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    train_epochs(model, data, cfg, cfg.epochs, cfg.lr_max, cfg.warmup_epochs, rng, mode,
                 metrics, "pretrain", 0, log_init=True)
    return model


def gradient_based_session(model: Model, v, n_gb: int, data: Dataset, cfg: TrainConfig,
                           lr_max: float, rng: np.random.Generator, metrics: MetricsFn = None,
                           round_idx: int = 0) -> Model:
    """QAT for ``n_gb`` epochs with the bits of ``v`` installed and frozen."""
    r_w, r_x = extract_bits(v)
    model.set_bit_allocation(r_w, r_x)
    train_epochs(model, data, cfg, n_gb, lr_max, 0, rng, QUANTIZED, metrics, "gb-epoch", round_idx)
    if model.bit_allocation() != (r_w, r_x):
        raise RuntimeError("bit allocation changed during a gradient-based session")
    return model


# -- gradient-free search ---------------------------------------------------------------
@dataclass
class SessionResult:
    best_v: np.ndarray
    best_objective: float
    evaluations: int
    generations: int
    final_sigma: float


def gradient_free_session(model: Model, v0, n_gf: int, cfg: AlternationConfig,
                          superbatch: SuperBatch, constraints: ConstraintSet, seed: int,
                          metrics: MetricsFn = None, round_idx: int = 0) -> SessionResult:
    """CMA-ES over the log-precision vector with the model weights frozen.

    The clamped start point is evaluated first so the session's best is
    never worse than its starting allocation on a fixed snapshot. Each
    evaluation advances the super-batch; every ``evals_per_step``
    evaluations close one gradient-free step.
    """
    m0 = clamp_search_space(v0)
    d = m0.size
    state = cma_init(d, m0, cfg.sigma0, seed=seed)
    budget = n_gf * cfg.evals_per_step
    if cfg.evals_per_step < state.lam:
        raise ValueError(f"evals_per_step must be at least the population size {state.lam}")
    backward_before = T.backward_calls
    best = {"v": m0.copy(), "f": math.inf, "rec": None}
    evals = 0
    replicas = [model] + [copy.deepcopy(model) for _ in range(max(cfg.workers, 1) - 1)]

    def consider(v, f, rec):
        if not math.isnan(f) and f < best["f"]:
            best.update(v=np.array(v), f=f, rec=rec)

    def after_eval():
        nonlocal evals
        evals += 1
        superbatch.notify_evaluation()
        if evals % cfg.evals_per_step == 0:
            superbatch.notify_step()
            if metrics is not None:
                rec = best["rec"] or {}
                metrics(phase="gf-step", round=round_idx, index=evals // cfg.evals_per_step,
                        objective=best["f"], loss=rec.get("loss", math.nan),
                        h1=rec.get("h1", math.nan), h2=rec.get("h2", math.nan), sigma=state.sigma)

    f0, rec0 = evaluate_candidate(m0, model, superbatch.snapshot(), constraints, return_record=True)
    consider(m0, f0, rec0)
    after_eval()

    while evals < budget:
        X = state.ask()
        Xc = clamp_search_space(X)
        k = min(state.lam, budget - evals)
        f = np.full(state.lam, np.nan)
        if cfg.frozen_snapshot:
            snap = superbatch.snapshot()
            jobs = list(range(k))
            if len(replicas) > 1:
                with ThreadPoolExecutor(len(replicas)) as pool:
                    out = list(pool.map(
                        lambda i: evaluate_candidate(Xc[i], replicas[i % len(replicas)], snap,
                                                     constraints, return_record=True), jobs))
            else:
                out = [evaluate_candidate(Xc[i], model, snap, constraints, return_record=True)
                       for i in jobs]
            for i, (fi, rec) in enumerate(out):
                f[i] = fi
                consider(Xc[i], fi, rec)
                after_eval()
        else:
            for i in range(k):
                fi, rec = evaluate_candidate(Xc[i], model, superbatch.snapshot(), constraints,
                                             return_record=True)
                f[i] = fi
                consider(Xc[i], fi, rec)
                after_eval()
        if k == state.lam:
            if np.isnan(f).all():
                raise CmaError(f"all candidates NaN in round {round_idx}, generation {state.g}")
            state.tell(X, f, evaluated=Xc)
    if T.backward_calls != backward_before:
        raise RuntimeError("backward pass ran during a gradient-free session")
    r_w, r_x = extract_bits(best["v"])
    model.set_bit_allocation(r_w, r_x)
    return SessionResult(best["v"], best["f"], evals, state.g, state.sigma)


# -- alternating driver --------------------------------------------------------------------
@dataclass
class GlobalBest:
    weights: Dict[str, np.ndarray]
    v: np.ndarray
    objective: float


def validation_objective(model: Model, v, val_sb: SuperBatch, constraints: ConstraintSet) -> float:
    return evaluate_candidate(clamp_search_space(v), model, val_sb.snapshot(), constraints)


class AlternatingRun:
    """Resumable driver for iterative alternating retraining.

    The run advances in phases ("gf" then "gb" per round). ``on_phase`` is
    called after every completed phase, which is where callers persist a
    checkpoint. ``run(max_phases=k)`` stops after ``k`` phases, simulating
    an interruption.
    """

    def __init__(self, model: Model, train_data: Dataset, constraints: ConstraintSet,
                 train_cfg: TrainConfig, alt_cfg: AlternationConfig, superbatch: SuperBatch,
                 val_sb: SuperBatch, seed: int, v_static, metrics: MetricsFn = None,
                 on_phase: Optional[Callable[["AlternatingRun"], None]] = None):
        self.model = model
        self.train_data = train_data
        self.constraints = constraints
        self.train_cfg = train_cfg
        self.cfg = alt_cfg
        self.superbatch = superbatch
        self.val_sb = val_sb
        self.seed = int(seed)
        self.metrics = metrics
        self.on_phase = on_phase
        self.rng = np.random.default_rng([self.seed, 7])
        self.round = 0
        self.phase = "gf"
        self.v = np.asarray(v_static, dtype=np.float64).copy()
        self.best: Optional[GlobalBest] = None
        self.history: List[dict] = []

    @property
    def done(self) -> bool:
        return self.round >= self.cfg.rounds

    def _update_best(self, tag: str) -> float:
        obj = validation_objective(self.model, self.v, self.val_sb, self.constraints)
        improved = self.best is None or obj < self.best.objective
        if improved:
            self.best = GlobalBest(self.model.state_dict(), self.v.copy(), obj)
        if self.metrics is not None:
            h1, h2 = self.constraints.h(self.v)
            self.metrics(phase="eval", round=self.round, index=len(self.history), objective=obj,
                         h1=h1, h2=h2)
        self.history.append({"round": self.round, "tag": tag, "val_objective": obj,
                             "v": self.v.tolist(), "best_objective": self.best.objective})
        return obj

    def run(self, max_phases: Optional[int] = None) -> "AlternatingRun":
        if self.best is None:
            self._update_best("initial")
        phases = 0
        while not self.done:
            if max_phases is not None and phases >= max_phases:
                break
            if self.phase == "gf":
                # hand over the global best weights and allocation
                self.model.load_state_dict(self.best.weights)
                before = weights_digest(self.model)
                res = gradient_free_session(self.model, self.best.v, self.cfg.n_gf, self.cfg,
                                            self.superbatch, self.constraints,
                                            seed=self.seed * 1009 + self.round,
                                            metrics=self.metrics, round_idx=self.round)
                if weights_digest(self.model) != before:
                    raise RuntimeError("weights changed during a gradient-free session")
                self.v = clamp_search_space(res.best_v)
                self._update_best("gf")
                self.phase = "gb"
            else:
                gradient_based_session(self.model, self.v, self.cfg.n_gb, self.train_data,
                                       self.train_cfg,
                                       self.train_cfg.lr_max * self.cfg.retrain_lr_scale,
                                       self.rng, self.metrics, self.round)
                self._update_best("gb")
                self.phase = "gf"
                self.round += 1
            phases += 1
            if self.on_phase is not None:
                self.on_phase(self)
        return self

    def finalize(self) -> Tuple[Model, np.ndarray, dict]:
        """Load the global best into the model and return it with a report."""
        self.model.load_state_dict(self.best.weights)
        r_w, r_x = extract_bits(self.best.v)
        self.model.set_bit_allocation(r_w, r_x)
        h1, h2 = self.constraints.h(self.best.v)
        report = {"best_objective": self.best.objective, "v": self.best.v.tolist(),
                  "r_w": r_w, "r_x": r_x, "h1": h1, "h2": h2,
                  "C1": self.constraints.C1, "C2": self.constraints.C2,
                  "penalty": self.constraints.penalty(self.best.v), "history": self.history}
        return self.model, self.best.v.copy(), report

    # -- persistence hooks ---------------------------------------------------------
    def get_state(self) -> dict:
        return {"round": self.round, "phase": self.phase, "v": self.v.tolist(),
                "rng": self.rng.bit_generator.state, "history": self.history,
                "superbatch": self.superbatch.get_state(),
                "best_v": None if self.best is None else self.best.v.tolist(),
                "best_objective": None if self.best is None else self.best.objective}

    def set_state(self, state: dict, best_weights: Optional[Dict[str, np.ndarray]]) -> None:
        self.round = int(state["round"])
        self.phase = state["phase"]
        self.v = np.asarray(state["v"], dtype=np.float64)
        self.rng.bit_generator.state = state["rng"]
        self.history = list(state["history"])
        self.superbatch.set_state(state["superbatch"])
        if state["best_v"] is not None:
            self.best = GlobalBest(best_weights, np.asarray(state["best_v"], dtype=np.float64),
                                   float(state["best_objective"]))


def alternate(model: Model, train_data: Dataset, val_data: Dataset, constraints: ConstraintSet,
              alt_cfg: AlternationConfig, train_cfg: TrainConfig, seed: int = 0,
              metrics: MetricsFn = None):
    """Run all rounds and return (global-best model, its v, report)."""
    sb = SuperBatch(train_data, alt_cfg.sb_minibatches, alt_cfg.sb_batch_size, alt_cfg.sb_policy,
                    seed=seed * 31 + 1)
    val_sb = SuperBatch(val_data, alt_cfg.val_minibatches,
                        min(alt_cfg.val_batch_size, len(val_data)), "NR", seed=seed * 31 + 2)
    v_s = constraints.v_static
    run = AlternatingRun(model, train_data, constraints, train_cfg, alt_cfg, sb, val_sb, seed,
                         v_s, metrics)
    run.run()
    return run.finalize()
