"""Renyi-DP accounting for sanitized generator updates.

Per-step cost of one generator update over a batch of ``B`` sanitized
per-sample gradients with noise multiplier ``sigma`` (sensitivity ``2C``):
``eps(lam) = 2 B lam / sigma^2``. The per-step bound is amplified by
subsampling without replacement at rate ``gamma`` (one of ``K = 1/gamma``
disjoint shards per step), composed additively over steps and converted to
``(eps, delta)``-DP by ``eps(lam) + log(1/delta) / (lam - 1)`` minimized over
the order grid.

All subsampling sums are evaluated in log space.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_ORDERS: tuple[int, ...] = tuple(range(2, 257))

# Orders exported in each ledger record (plus the optimal one).
SPARSE_ORDERS = (2, 3, 4, 5, 6, 8, 10, 12, 16, 20, 24, 32, 48, 64, 96, 128, 192, 256)

_LOG2 = math.log(2.0)
_LOG4 = math.log(4.0)


class NonPrivateError(ValueError):
    """Raised when a privacy cost is requested for a noiseless mechanism."""


def gaussian_rdp(sensitivity: float, noise_std: float, order: float) -> float:
    """RDP of the Gaussian mechanism: ``order * sensitivity^2 / (2 noise_std^2)``."""
    if noise_std <= 0:
        raise NonPrivateError("noise std 0 is non-private")
    if order < 2:
        raise ValueError(f"order must be >= 2, got {order}")
    return order * sensitivity**2 / (2.0 * noise_std**2)


def step_rdp(batch_size: int, sigma: float, order: float) -> float:
    """RDP of one generator update: ``2 B order / sigma^2``."""
    if sigma <= 0:
        raise NonPrivateError("noise multiplier 0 is non-private")
    if batch_size < 1:
        raise ValueError(f"batch size must be positive, got {batch_size}")
    if order < 2:
        raise ValueError(f"order must be >= 2, got {order}")
    return 2.0 * batch_size * order / sigma**2


def _log_comb(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def _log_expm1(x: float) -> float:
    """``log(e^x - 1)`` for ``x >= 0`` without overflow."""
    if x > 40.0:
        return x + math.log1p(-math.exp(-x))
    if x == 0.0:
        return -math.inf
    return math.log(math.expm1(x))


def _amplify_from_table(gamma: float, eps_of: Sequence[float], order: int) -> float:
    # eps_of[j] is the base RDP at integer order j (entries 0, 1 unused).
    log_g = math.log(gamma)
    e2 = eps_of[2]
    log_terms = [
        2 * log_g + _log_comb(order, 2) + min(_LOG4 + _log_expm1(e2), _LOG2 + e2)
    ]
    for j in range(3, order + 1):
        log_terms.append(j * log_g + _log_comb(order, j) + (j - 1) * eps_of[j] + _LOG2)
    arr = np.array(log_terms)
    top = float(arr.max())
    if top == -math.inf:
        return 0.0
    log_s = top + math.log(float(np.sum(np.exp(arr - top))))
    # log(1 + S), accurate both for tiny and for huge S.
    if log_s < 0:
        total = math.log1p(math.exp(log_s))
    else:
        total = log_s + math.log1p(math.exp(-log_s))
    return total / (order - 1)


def amplify(gamma: float, base_eps: Callable[[int], float], order: int) -> float:
    """Subsampled RDP bound at integer ``order`` for sampling rate ``gamma``.

    The base mechanism is Gaussian, so its infinite-order divergence is
    unbounded and every ``min{2, (e^{eps(inf)} - 1)^j}`` factor equals 2.

    Args:
        gamma: sampling rate, strictly between 0 and 1.
        base_eps: RDP curve of the base mechanism at integer orders.
        order: integer order >= 2.
    """
    if not 0 < gamma < 1:
        raise ValueError(f"sampling rate must lie in (0, 1), got {gamma}")
    if int(order) != order or order < 2:
        raise ValueError(f"order must be an integer >= 2, got {order}")
    order = int(order)
    table = [0.0, 0.0] + [float(base_eps(j)) for j in range(2, order + 1)]
    if any(e < 0 for e in table):
        raise ValueError("base RDP values must be non-negative")
    return _amplify_from_table(gamma, table, order)


def to_dp_from_curve(orders: Sequence[int], eps: Sequence[float], delta: float) -> tuple[float, int]:
    """Best ``(eps, order)`` of ``eps(lam) + log(1/delta)/(lam - 1)``; ties go to the smaller order."""
    if not 0 < delta <= 1:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")
    log_inv = -math.log(delta)
    best, best_order = math.inf, int(orders[0])
    for lam, e in zip(orders, eps):
        val = e + log_inv / (lam - 1)
        if val < best:
            best, best_order = float(val), int(lam)
    return best, best_order


@dataclass
class PrivacyLedger:
    """Accumulated RDP curve for a run with fixed ``(gamma, batch_size, sigma)``.

    The per-step curve is computed once; the accumulated curve is
    ``steps * per_step``, so composition is exactly additive regardless of
    how the steps are split across calls.

    ``sigma = 0`` marks a non-private (testing) ledger whose epsilon is inf.
    """

    gamma: float
    batch_size: int
    sigma: float
    orders: tuple[int, ...] = DEFAULT_ORDERS
    steps: int = 0
    records: list[dict] = field(default_factory=list, repr=False)
    delta: float = 1e-5

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError(f"sampling rate must lie in (0, 1], got {self.gamma}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be positive, got {self.batch_size}")
        if self.sigma < 0:
            raise ValueError(f"noise multiplier must be non-negative, got {self.sigma}")
        orders = tuple(sorted(int(o) for o in self.orders))
        if not orders or orders[0] < 2:
            raise ValueError("orders must be integers >= 2")
        self.orders = orders
        self._per_step = self._per_step_curve()

    @property
    def non_private(self) -> bool:
        return self.sigma == 0

    def _per_step_curve(self) -> np.ndarray:
        if self.non_private:
            return np.full(len(self.orders), math.inf)
        top = self.orders[-1]
        table = [0.0, 0.0] + [step_rdp(self.batch_size, self.sigma, j) for j in range(2, top + 1)]
        if self.gamma == 1:
            return np.array([table[o] for o in self.orders])
        return np.array([_amplify_from_table(self.gamma, table, o) for o in self.orders])

    @property
    def per_step(self) -> np.ndarray:
        return self._per_step.copy()

    @property
    def eps_at_order(self) -> np.ndarray:
        if self.steps == 0:
            return np.zeros(len(self.orders))
        return self.steps * self._per_step

    def eps_after(self, steps: int) -> np.ndarray:
        """Curve the ledger would hold after ``steps`` total steps."""
        if steps == 0:
            return np.zeros(len(self.orders))
        return steps * self._per_step

    def accumulate(self, n_steps: int = 1, *, record: bool = True) -> "PrivacyLedger":
        if n_steps < 0:
            raise ValueError("n_steps must be non-negative")
        if n_steps == 0:
            return self
        self.steps += int(n_steps)
        if record:
            self.records.append(self.record())
        return self

    def to_dp(self, delta: float | None = None) -> tuple[float, int]:
        if self.steps == 0:
            raise ValueError("privacy cost undefined: the ledger has no accumulated steps")
        delta = self.delta if delta is None else delta
        return to_dp_from_curve(self.orders, self.eps_at_order, delta)

    def epsilon_after(self, steps: int, delta: float | None = None) -> float:
        delta = self.delta if delta is None else delta
        return to_dp_from_curve(self.orders, self.eps_after(steps), delta)[0]

    def record(self) -> dict:
        eps = self.eps_at_order
        dp_eps, best = self.to_dp()
        keep = [o for o in self.orders if o in SPARSE_ORDERS or o == best]
        lookup = dict(zip(self.orders, eps.tolist()))
        return {
            "step": self.steps,
            "gamma": self.gamma,
            "sigma": self.sigma,
            "batch": self.batch_size,
            "delta": self.delta,
            "eps_at_order": {str(o): lookup[o] for o in keep},
            "best_order": best,
            "dp_epsilon_at_delta": dp_eps,
            "non_private": self.sigma == 0,
        }

    def snapshot(self) -> dict:
        return {
            "gamma": self.gamma,
            "sigma": self.sigma,
            "batch": self.batch_size,
            "steps": self.steps,
            "orders": list(self.orders),
            "eps_at_order": self.eps_at_order.tolist(),
        }

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def from_record(cls, rec: dict, orders: Sequence[int] = DEFAULT_ORDERS) -> "PrivacyLedger":
        """Rebuild the ledger state described by one exported record."""
        led = cls(float(rec["gamma"]), int(rec["batch"]), float(rec["sigma"]), tuple(orders), delta=float(rec["delta"]))
        led.accumulate(int(rec["step"]), record=False)
        return led


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def query(sigma: float, gamma: float, batch_size: int, steps: int, delta: float,
          orders: Sequence[int] = DEFAULT_ORDERS) -> tuple[float, int]:
    """Epsilon and best order for a planned run, without any data."""
    if sigma <= 0:
        raise NonPrivateError("noise multiplier must be positive for a budget query")
    if steps < 1:
        raise ValueError("privacy cost undefined for zero steps")
    led = PrivacyLedger(gamma, batch_size, sigma, tuple(orders), delta=delta)
    led.accumulate(steps, record=False)
    return led.to_dp(delta)


def accumulate(ledger: PrivacyLedger, n_steps: int) -> PrivacyLedger:
    return ledger.accumulate(n_steps)


def to_dp(ledger: PrivacyLedger, delta: float) -> tuple[float, int]:
    return ledger.to_dp(delta)
