"""Finite-difference oracles shared by the test modules."""

from __future__ import annotations

import mpmath
import numpy as np

from gradsan.sanitizer import Mechanism, sanitize_batch


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (any shape)."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        out[idx] = (up - down) / (2 * h)
    return out


def param_diff(f, params: dict, h: float = 1e-5) -> dict:
    """Central differences of ``f(params)`` with respect to every entry of every array."""
    out = {}
    for k in params:
        def fk(v, k=k):
            return f({**params, k: v})
        out[k] = central_diff(fk, params[k], h)
    return out


def rel_err(a, b, floor: float = 1e-8) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)`` over flattened arrays or dicts."""
    if isinstance(a, dict):
        a = np.concatenate([np.ravel(a[k]) for k in sorted(a)])
        b = np.concatenate([np.ravel(b[k]) for k in sorted(b)])
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def oracle_amplify(gamma, base_eps, order):
    """The subsampled bound evaluated term by term in 60-digit arithmetic."""
    mpmath.mp.dps = 60
    g = mpmath.mpf(gamma)
    e2 = mpmath.mpf(base_eps(2))
    s = g**2 * mpmath.binomial(order, 2) * min(4 * mpmath.expm1(e2), 2 * mpmath.exp(e2))
    for j in range(3, order + 1):
        s += g**j * mpmath.binomial(order, j) * mpmath.exp((j - 1) * mpmath.mpf(base_eps(j))) * 2
    return mpmath.log1p(s) / (order - 1)


def base(B, sigma):
    """Per-step RDP curve of B composed unit-sensitivity Gaussian queries."""
    return lambda j: 2.0 * B * j / sigma**2


def sensitivity_search(n_pairs: int, seed: int, C: float = 1.0) -> float:
    """Largest clipped-output distance over random batch pairs differing in one sample."""
    rng = np.random.default_rng(seed)
    m = Mechanism(C, 0.0, non_private=True)
    worst = 0.0
    for t in range(n_pairs):
        B = int(rng.integers(1, 9))
        d = int(rng.integers(1, 6))
        scale = 10.0 ** rng.uniform(-3, 4)
        batch = rng.normal(size=(B, d)) * scale
        other = batch.copy()
        i = int(rng.integers(B))
        # Adversarial choices: opposite direction, huge, tiny, or random.
        kind = t % 4
        if kind == 0:
            other[i] = -batch[i] * rng.uniform(1, 1e3)
        elif kind == 1:
            other[i] = rng.normal(size=d) * 1e6
        elif kind == 2:
            other[i] = 0.0
        else:
            other[i] = rng.normal(size=d) * scale
        diff = np.concatenate(sanitize_batch(list(batch), m)) - np.concatenate(sanitize_batch(list(other), m))
        worst = max(worst, float(np.linalg.norm(diff)))
    return worst


ACCEPTANCE: list[tuple[int, bool, str]] = []


def record(criterion: int, ok: bool, detail: str) -> bool:
    """Log one acceptance outcome; the terminal summary prints every entry."""
    ACCEPTANCE.append((criterion, bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")
    return bool(ok)
