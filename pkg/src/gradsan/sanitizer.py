"""Per-sample gradient sanitization: clip to an L2 ball, add Gaussian noise."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def clip(g: np.ndarray, clip_bound: float) -> np.ndarray:
    """Scale ``g`` by ``1 / max(1, ||g||_2 / C)``.

    Vectors already inside the ball are returned unchanged (bit-exact).
    ``clip_bound=inf`` is the identity.
    """
    if not clip_bound > 0:
        raise ValueError(f"clip bound must be positive, got {clip_bound}")
    g = np.asarray(g, dtype=np.float64)
    if math.isinf(clip_bound):
        return g.copy()
    norm = float(np.linalg.norm(g))
    factor = max(1.0, norm / clip_bound)
    if factor == 1.0:
        return g.copy()
    return g / factor


@dataclass
class Mechanism:
    """Clip bound ``C``, noise multiplier ``sigma`` and a private noise stream.

    Noise has standard deviation ``sigma * C`` per coordinate. ``sigma = 0``
    is only accepted with ``non_private=True`` (a testing mode); the pair
    ``sigma = 0, C = inf`` is the identity sanitizer.
    """

    clip_bound: float = 1.0
    noise_multiplier: float = 1.07
    rng_seed: int | np.random.SeedSequence = 0
    non_private: bool = False
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not self.clip_bound > 0:
            raise ValueError(f"clip bound must be positive, got {self.clip_bound}")
        if not self.noise_multiplier >= 0:
            raise ValueError(f"noise multiplier must be non-negative, got {self.noise_multiplier}")
        if self.noise_multiplier == 0 and not self.non_private:
            raise ValueError("noise multiplier 0 is non-private; pass non_private=True to allow it")
        if self.noise_multiplier > 0 and math.isinf(self.clip_bound):
            raise ValueError("an unbounded clip with positive noise has infinite noise scale")
        self.rng = np.random.default_rng(self.rng_seed)

    @classmethod
    def identity(cls) -> "Mechanism":
        return cls(clip_bound=math.inf, noise_multiplier=0.0, non_private=True)

    @property
    def noise_std(self) -> float:
        return 0.0 if self.noise_multiplier == 0 else self.noise_multiplier * self.clip_bound

    def spawn(self, n: int) -> list["Mechanism"]:
        """Child mechanisms with independent, reproducible noise streams."""
        seq = self.rng_seed if isinstance(self.rng_seed, np.random.SeedSequence) else np.random.SeedSequence(self.rng_seed)
        return [
            Mechanism(self.clip_bound, self.noise_multiplier, child, self.non_private)
            for child in seq.spawn(n)
        ]


def sanitize(g: np.ndarray, m: Mechanism) -> np.ndarray:
    out = clip(g, m.clip_bound)
    if m.noise_multiplier == 0:
        return out
    return out + m.rng.normal(0.0, m.noise_std, size=out.shape)


def sanitize_batch(gs: Sequence[np.ndarray], m: Mechanism) -> list[np.ndarray]:
    """Sanitize each per-sample gradient with its own noise draw, in order."""
    if len(gs) == 0:
        raise ValueError("cannot sanitize an empty batch")
    shape = np.shape(gs[0])
    for i, g in enumerate(gs):
        if np.shape(g) != shape:
            raise ValueError(f"gradient {i} has shape {np.shape(g)}, expected {shape}")
    return [sanitize(g, m) for g in gs]
