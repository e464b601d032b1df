"""Independent oracles shared by the test modules.

Nothing here calls into the package's own numerical kernels except where a
case explicitly builds a function out of package ops to be differentiated.
"""
from __future__ import annotations

import itertools
import math
from fractions import Fraction
from typing import Callable, List, Tuple

import numpy as np

from qbitalloc import tensor as T
from qbitalloc.quant import NORM_EPS, normalize_weights


# -- convolution -------------------------------------------------------------------
def naive_conv2d(x: np.ndarray, k: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    n, c, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for b, o, i, j in itertools.product(range(n), range(cout), range(ho), range(wo)):
        acc = 0.0
        for ci, u, v in itertools.product(range(c), range(kh), range(kw)):
            acc += xp[b, ci, i * stride + u, j * stride + v] * k[o, ci, u, v]
        out[b, o, i, j] = acc
    return out


# -- quantizer ---------------------------------------------------------------------
EXTENDED_EXACT = np.finfo(np.longdouble).nmant >= 63


def brute_force_codes(u: np.ndarray, n: int, signed: bool) -> np.ndarray:
    """Index of the nearest level k/n to each u by exhaustive search.

    Distances are compared as |n*u - k|. With a 64-bit-mantissa long double
    the product of a float64 and n < 2**11 is exact, so the search is an
    exact oracle; otherwise fall back to rational arithmetic. Exact ties go
    to the level of larger magnitude.
    """
    u = np.asarray(u, dtype=np.float64)
    ks = np.arange(-n if signed else 0, n + 1)
    if EXTENDED_EXACT:
        p = np.longdouble(n) * u.astype(np.longdouble)
        d = np.abs(p[:, None] - ks[None, :].astype(np.longdouble))
        m = d.min(axis=1, keepdims=True)
        return ks[np.where(d == m, np.abs(ks)[None, :], -1).argmax(axis=1)]
    out = np.empty(u.size, dtype=np.int64)
    for i, x in enumerate(u):
        fx = Fraction(float(x)) * n
        out[i] = min(ks, key=lambda k: (abs(fx - k), -abs(k)))
    return out


# -- gradient checking -------------------------------------------------------------
def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def check_grads(f: Callable[..., T.Tensor], inputs: List[np.ndarray], eps: float = 1e-6) -> float:
    """Worst relative error between backward and central differences over the inputs."""
    leaves = [T.Tensor(a, requires_grad=True) for a in inputs]
    T.backward(f(*leaves))
    worst = 0.0
    for i, leaf in enumerate(leaves):
        def fi(t, i=i):
            args = [T.Tensor(a) for a in inputs]
            args[i] = t
            return f(*args)
        fd = T.finite_diff_gradient(fi, T.Tensor(inputs[i]), eps).data
        worst = max(worst, rel_err(leaf.grad, fd))
    return worst


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _distinct(rng, shape):
    """Values whose pairwise gaps are far above the difference step (for max pooling)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.1 + rng.uniform(0, 0.01, n)).reshape(shape)


def _weighted_sum(rng, shape):
    w = rng.standard_normal(shape)
    return lambda t: T.tsum(T.mul(t, w))


def grad_cases(rng: np.random.Generator) -> List[Tuple[str, Callable, List[np.ndarray]]]:
    """One randomized case for each standard op, reduced to a scalar by a random linear form."""
    cases = []
    s = (3, 4)
    ws = _weighted_sum(rng, s)
    cases.append(("add", lambda a, b: ws(a + b), [rng.standard_normal(s), rng.standard_normal(s)]))
    wb = _weighted_sum(rng, s)
    cases.append(("add-broadcast", lambda a, b: wb(a + b),
                  [rng.standard_normal(s), rng.standard_normal((1, 4))]))
    cases.append(("sub", lambda a, b: ws(a - b), [rng.standard_normal(s), rng.standard_normal(s)]))
    cases.append(("mul", lambda a, b: ws(a * b), [rng.standard_normal(s), rng.standard_normal((4,))]))
    cases.append(("div", lambda a, b: ws(a / b),
                  [rng.standard_normal(s), rng.uniform(0.5, 2.0, s)]))
    cases.append(("power", lambda a: ws(T.power(a, 3.0)), [rng.standard_normal(s)]))
    cases.append(("sqrt", lambda a: ws(T.sqrt(a)), [rng.uniform(0.5, 2.0, s)]))
    cases.append(("exp", lambda a: ws(T.exp(a)), [rng.standard_normal(s)]))
    cases.append(("log", lambda a: ws(T.log(a)), [rng.uniform(0.5, 2.0, s)]))
    cases.append(("relu", lambda a: ws(T.relu(a)), [_away_from_zero(rng, s)]))
    w3 = rng.standard_normal(3)
    cases.append(("sum-axis", lambda a: T.tsum(T.mul(T.tsum(a, axis=1), w3)),
                  [rng.standard_normal(s)]))
    w4 = rng.standard_normal((1, 4))
    cases.append(("mean-axis", lambda a: T.tsum(T.mul(T.mean(a, axis=0, keepdims=True), w4)),
                  [rng.standard_normal(s)]))
    wr = _weighted_sum(rng, (2, 6))
    cases.append(("reshape", lambda a: wr(T.reshape(a, (2, 6))), [rng.standard_normal(s)]))
    wt = _weighted_sum(rng, (4, 3))
    cases.append(("transpose", lambda a: wt(T.transpose(a)), [rng.standard_normal(s)]))
    wm = _weighted_sum(rng, (3, 2))
    cases.append(("matmul", lambda a, b: wm(T.matmul(a, b)),
                  [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = rng.standard_normal((2, 2, 5, 5))
    k = rng.standard_normal((3, 2, 3, 3))
    out_shape = naive_conv2d(x, k, stride, pad).shape
    wc = _weighted_sum(rng, out_shape)
    cases.append(("conv2d", lambda a, b: wc(T.conv2d(a, b, stride, pad)), [x, k]))
    wp = _weighted_sum(rng, (2, 2, 2, 2))
    cases.append(("max_pool2d", lambda a: wp(T.max_pool2d(a, 2)), [_distinct(rng, (2, 2, 4, 4))]))
    labels = rng.integers(0, 5, size=4)
    cases.append(("cross_entropy", lambda a: T.cross_entropy(a, labels),
                  [rng.standard_normal((4, 5))]))
    soft = rng.dirichlet(np.ones(5), size=4)
    cases.append(("cross_entropy-soft", lambda a: T.cross_entropy(a, soft),
                  [rng.standard_normal((4, 5))]))
    wn = _weighted_sum(rng, (3, 3))
    cases.append(("normalize_weights", lambda a: wn(normalize_weights(a)),
                  [rng.standard_normal((3, 3))]))
    return cases


def reference_normalize(w: np.ndarray) -> np.ndarray:
    """Population-std normalization with exactly rounded sums."""
    w = np.asarray(w, dtype=np.float64).ravel()
    d = w - math.fsum(w) / w.size
    d = d - math.fsum(d) / w.size
    sigma = math.sqrt(math.fsum(d * d) / w.size)
    return d / (sigma + NORM_EPS)


def mlp_loss(params, x, y):
    w1, b1, w2, b2 = params
    h = T.relu(T.matmul(x, w1) + b1)
    return T.cross_entropy(T.matmul(h, w2) + b2, y)


def cosine_reference(t: float, total: int, lr_max: float, warm: int) -> float:
    if t < warm:
        return lr_max * (t + 1) / warm
    return 0.5 * lr_max * (1 + math.cos(math.pi * (t - warm) / (total - warm)))
