"""Centralized private training: shards, warm-started critics, sanitized generator.

Random streams (see :mod:`gradsan.streams`) are keyed by subsystem and, for
per-shard state, by shard index. The federated simulator uses the same keys
for the same roles, so a one-client federated run replays the one-shard
centralized run exactly.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from gradsan.accountant import PrivacyLedger
from gradsan.autodiff import init_params
from gradsan.checkpoint import GeneratorCheckpoint
from gradsan.data import LabeledDataset, hist_tvd, mode_coverage
from gradsan.gan import (
    GanPair,
    disc_spec_for,
    disc_step,
    gen_spec_for,
    generate,
    generator_pass,
    plain_gen_step,
    sample,
    sanitized_gen_step,
)
from gradsan.optim import Optimizer
from gradsan.sanitizer import Mechanism
from gradsan.streams import seed_sequence, stream

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    gamma: float = 0.1
    sigma: float = 1.07
    clip_bound: float = 1.0
    warm_steps: int = 200
    steps: int = 2000
    n_dis: int = 5
    batch_size: int = 32
    lr_d: float = 1e-4
    lr_g: float = 1e-4
    lr_g_final: float | None = None  # geometric decay of lr_g to this value at the last step
    lambda_gp: float = 10.0
    latent_dim: int = 16
    gen_hidden: tuple[int, ...] = (64, 64)
    disc_hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    gen_output: str = "linear"
    optimizer: str = "sgd"
    delta: float = 1e-5
    seed: int = 0
    eps_ceiling: float | None = None
    non_private: bool = False
    metrics_every: int = 100
    checkpoint_every: int = 0
    workers: int = 1

    def __post_init__(self):
        self.gen_hidden = tuple(int(h) for h in self.gen_hidden)
        self.disc_hidden = tuple(int(h) for h in self.disc_hidden)
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        k = 1.0 / self.gamma
        if abs(k - round(k)) > 1e-9:
            raise ValueError(f"1/gamma must be an integer, got 1/{self.gamma} = {k}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.sigma == 0 and not self.non_private:
            raise ValueError("sigma = 0 gives no privacy; set non_private to run without noise")
        if not self.clip_bound > 0:
            raise ValueError("clip_bound must be positive")
        if math.isinf(self.clip_bound) and self.sigma > 0:
            raise ValueError("an infinite clip bound needs sigma = 0")
        for name in ("warm_steps", "steps", "metrics_every", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.n_dis < 1 or self.batch_size < 1 or self.latent_dim < 1 or self.workers < 1:
            raise ValueError("n_dis, batch_size, latent_dim and workers must be positive")
        if not 0 < self.delta <= 1:
            raise ValueError("delta must lie in (0, 1]")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_g_final is not None and not self.lr_g_final > 0:
            raise ValueError("lr_g_final must be positive")

    @property
    def num_shards(self) -> int:
        return int(round(1.0 / self.gamma))

    def gen_lr(self, step: int) -> float:
        """Generator learning rate at 1-based training ``step``."""
        if self.lr_g_final is None or self.steps <= 1:
            return self.lr_g
        frac = (step - 1) / (self.steps - 1)
        return self.lr_g * (self.lr_g_final / self.lr_g) ** frac

    @property
    def ledger_sigma(self) -> float:
        return 0.0 if self.sigma == 0 else self.sigma

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gen_hidden"] = list(self.gen_hidden)
        d["disc_hidden"] = list(self.disc_hidden)
        return d


@dataclass(frozen=True)
class ShardSet:
    shards: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.shards)

    def __getitem__(self, k: int) -> np.ndarray:
        return self.shards[k]


def partition(dataset_or_size, gamma: float, seed: int) -> ShardSet:
    """Uniformly random split into ``1/gamma`` disjoint shards of near-equal size."""
    n = dataset_or_size if isinstance(dataset_or_size, int) else len(dataset_or_size)
    k = 1.0 / gamma
    if not 0 < gamma <= 1 or abs(k - round(k)) > 1e-9:
        raise ValueError(f"1/gamma must be a positive integer, got gamma={gamma}")
    K = int(round(k))
    if n < K:
        raise ValueError(f"dataset of size {n} cannot be split into {K} shards")
    perm = stream(seed, "partition").permutation(n)
    return ShardSet(tuple(np.sort(s) for s in np.array_split(perm, K)))


class AccessLog:
    """Which readers touched which shard."""

    def __init__(self):
        self.reads: dict[int, set] = {}

    def record(self, shard_id: int, reader) -> None:
        self.reads.setdefault(shard_id, set()).add(reader)


class CriticSite:
    """One discriminator with its shard and its own random streams."""

    def __init__(self, k: int, data: LabeledDataset, config: TrainConfig, pair_template: GanPair,
                 access_log: AccessLog | None = None):
        self.k = k
        self.data = data
        self.config = config
        seed = config.seed
        self.disc_params = init_params(pair_template.disc_spec, stream(seed, "disc_init", k))
        self.batch_rng = stream(seed, "batch", k)
        self.alpha_rng = stream(seed, "alpha", k)
        sigma = config.sigma
        self.mechanism = Mechanism(config.clip_bound, sigma, seed_sequence(seed, "noise", k),
                                   non_private=config.non_private or sigma == 0)
        self.optimizer = Optimizer(config.optimizer, config.lr_d) if config.optimizer == "adam" else None
        self.access_log = access_log
        self.warned = False

    def batch(self, B: int) -> tuple[np.ndarray, np.ndarray]:
        n = len(self.data)
        if B > n:
            if not self.warned:
                log.warning("shard %d has %d points < batch %d; sampling with replacement", self.k, n, B)
                self.warned = True
            idx = self.batch_rng.integers(n, size=B)
        else:
            idx = self.batch_rng.choice(n, size=B, replace=False)
        if self.access_log is not None:
            self.access_log.record(self.k, ("critic", self.k))
        return self.data.points[idx], self.data.labels[idx]

    def critic_update(self, pair: GanPair, fake, fake_labels) -> None:
        x, y = self.batch(self.config.batch_size)
        self.disc_params = disc_step(pair.with_disc(self.disc_params), x, y, self.config.lr_d, self.alpha_rng,
                                     fake=fake, fake_labels=fake_labels, optimizer=self.optimizer)


def template_pair(data_dim: int, num_classes: int, config: TrainConfig) -> GanPair:
    """A pair with the configured layouts and placeholder (zero) weights."""
    gs = gen_spec_for(data_dim, num_classes, config.latent_dim, config.gen_hidden, config.activation, config.gen_output)
    ds = disc_spec_for(data_dim, num_classes, config.disc_hidden, config.activation)
    zeros = lambda spec: {k: np.zeros(s) for k, s in spec.param_shapes().items()}
    return GanPair(gs, ds, zeros(gs), zeros(ds), config.latent_dim, num_classes, config.lambda_gp)


def critic_phase(pair: GanPair, site: CriticSite, n_dis: int, latent_rng, label_rng):
    """``n_dis`` critic updates against fresh fakes; returns the last batch's generator pass.

    The generator update reuses the latent codes of the final critic update.
    """
    B = site.config.batch_size
    gp = None
    for t in range(n_dis):
        z = latent_rng.normal(size=(B, pair.latent_dim))
        labels = label_rng.integers(pair.num_classes, size=B)
        if t == n_dis - 1:
            gp = generator_pass(pair, z, labels)
            fake = gp.samples
        else:
            fake = generate(pair, z, labels)
        site.critic_update(pair, fake, labels)
    return gp


def wgan_gp_iteration(pair: GanPair, site: CriticSite, latent_rng, label_rng, gen_opt=None,
                      lr: float | None = None) -> dict:
    """One non-private WGAN-GP iteration; returns new generator parameters."""
    cfg = site.config
    gp = critic_phase(pair, site, cfg.n_dis, latent_rng, label_rng)
    lr = cfg.lr_g if lr is None else lr
    return plain_gen_step(pair.with_disc(site.disc_params), gp.z, gp.labels, lr, optimizer=gen_opt)


def warm_start(site: CriticSite, config: TrainConfig, pair_template: GanPair):
    """Non-private WGAN-GP pre-training of one shard's critic with a throwaway generator.

    No privacy cost is charged: only the private generator is ever released.

    Returns:
        ``(disc_params, throwaway_gen_params)``.
    """
    k = site.k
    gen = init_params(pair_template.gen_spec, stream(config.seed, "warm_gen_init", k))
    latent_rng = stream(config.seed, "warm_latent", k)
    label_rng = stream(config.seed, "warm_labels", k)
    gen_opt = Optimizer(config.optimizer, config.lr_g) if config.optimizer == "adam" else None
    for _ in range(config.warm_steps):
        pair = pair_template.with_gen(gen).with_disc(site.disc_params)
        gen = wgan_gp_iteration(pair, site, latent_rng, label_rng, gen_opt)
    return site.disc_params, gen


@dataclass
class Evaluator:
    """Sample-quality probe against public reference data."""

    centers: np.ndarray | None = None
    capture_radius: float = 0.6
    reference: np.ndarray | None = None
    n_samples: int = 1000
    bins: int = 16
    bounds: tuple = ((-3.0, 3.0), (-3.0, 3.0))

    def __call__(self, pair: GanPair, rng) -> dict:
        x, _ = sample(pair, self.n_samples, rng)
        out = {}
        if self.centers is not None:
            out["mode_coverage"], out["high_quality"] = mode_coverage(x, self.centers, self.capture_radius)
        if self.reference is not None and x.shape[1] == 2:
            out["tvd"] = hist_tvd(x, self.reference, self.bins, self.bounds)
        if x.shape[1] != 2:
            out["mean_intensity"] = float(x.mean())
        return out


@dataclass
class TrainResult:
    checkpoint: GeneratorCheckpoint
    ledger: PrivacyLedger
    metrics: list[dict] = field(default_factory=list)
    shard_history: list[int] = field(default_factory=list)
    access_log: AccessLog = field(default_factory=AccessLog)
    halted: bool = False
    steps_done: int = 0
    checkpoints: dict[int, bytes] = field(default_factory=dict)
    sites: list = field(default_factory=list, repr=False)

    @property
    def epsilon(self) -> float | None:
        if self.ledger.steps == 0:
            return None
        return self.ledger.to_dp()[0]


StepCallback = Callable[[int, GanPair], None]


def build_sites(dataset: LabeledDataset, config: TrainConfig, pair_template: GanPair,
                access_log: AccessLog | None = None) -> list[CriticSite]:
    shards = partition(len(dataset), config.gamma, config.seed)
    return [CriticSite(k, dataset.subset(shards[k]), config, pair_template, access_log) for k in range(len(shards))]


def warm_all(sites, config: TrainConfig, pair_template: GanPair) -> None:
    if config.warm_steps == 0:
        return
    if config.workers > 1 and len(sites) > 1:
        with ThreadPoolExecutor(config.workers) as ex:
            list(ex.map(lambda s: warm_start(s, config, pair_template), sites))
    else:
        for s in sites:
            warm_start(s, config, pair_template)


def train(dataset: LabeledDataset, config: TrainConfig, *, evaluator: Evaluator | None = None,
          callback: StepCallback | None = None) -> TrainResult:
    """Warm-start one critic per shard, then train the private generator.

    Each step samples a shard uniformly, runs ``n_dis`` critic updates on it,
    applies one sanitized generator update and charges the ledger one
    subsampled step. Training stops early (``halted``) if the next step would
    push epsilon past ``config.eps_ceiling``.
    """
    template = template_pair(dataset.dim, dataset.num_classes, config)
    access = AccessLog()
    sites = build_sites(dataset, config, template, access)
    warm_all(sites, config, template)

    gen = init_params(template.gen_spec, stream(config.seed, "gen_init"))
    gen_opt = Optimizer(config.optimizer, config.lr_g) if config.optimizer == "adam" else None
    ledger = PrivacyLedger(config.gamma, config.batch_size, config.ledger_sigma, delta=config.delta)
    latent_rng = stream(config.seed, "latent")
    label_rng = stream(config.seed, "labels")
    shard_rng = stream(config.seed, "shard_choice")
    eval_rng = stream(config.seed, "eval")
    result = TrainResult(None, ledger, access_log=access, sites=sites)
    K = len(sites)

    for step in range(1, config.steps + 1):
        if config.eps_ceiling is not None and ledger.epsilon_after(ledger.steps + 1) > config.eps_ceiling:
            result.halted = True
            log.warning("privacy budget %.4g reached; halting before step %d", config.eps_ceiling, step)
            break
        k = int(shard_rng.integers(K))
        result.shard_history.append(k)
        site = sites[k]
        pair = template.with_gen(gen).with_disc(site.disc_params)
        gp = critic_phase(pair, site, config.n_dis, latent_rng, label_rng)
        info = {}
        lr = config.gen_lr(step)
        if gen_opt is not None:
            gen_opt.set_lr(lr)
        gen = sanitized_gen_step(pair.with_disc(site.disc_params), None, gp.labels, site.mechanism, lr,
                                 optimizer=gen_opt, gen_pass=gp, info=info)
        ledger.accumulate(1)
        result.steps_done = step
        if callback is not None:
            callback(step, template.with_gen(gen).with_disc(site.disc_params))
        if config.metrics_every and step % config.metrics_every == 0:
            row = {"step": step, "mean_upstream_norm": float(np.mean(info["upstream_norms"])),
                   "eps_at_delta": ledger.to_dp()[0]}
            if evaluator is not None:
                row.update(evaluator(template.with_gen(gen), eval_rng))
            result.metrics.append(row)
        if config.checkpoint_every and step % config.checkpoint_every == 0:
            result.checkpoints[step] = GeneratorCheckpoint(template.gen_spec, gen, config.latent_dim,
                                                           dataset.num_classes, step).to_bytes()

    result.checkpoint = GeneratorCheckpoint(template.gen_spec, gen, config.latent_dim, dataset.num_classes,
                                            result.steps_done)
    return result


def train_reference(dataset: LabeledDataset, config: TrainConfig, *,
                    callback: StepCallback | None = None) -> GeneratorCheckpoint:
    """Plain non-private WGAN-GP on the whole dataset with a single critic.

    Uses the same random streams as :func:`train` with one shard, but updates
    the generator by direct back-propagation through both networks.
    """
    ref_cfg = TrainConfig(**{**config.to_dict(), "gamma": 1.0, "sigma": 0.0, "non_private": True,
                             "clip_bound": math.inf})
    template = template_pair(dataset.dim, dataset.num_classes, ref_cfg)
    (site,) = build_sites(dataset, ref_cfg, template)
    warm_all([site], ref_cfg, template)
    gen = init_params(template.gen_spec, stream(ref_cfg.seed, "gen_init"))
    gen_opt = Optimizer(ref_cfg.optimizer, ref_cfg.lr_g) if ref_cfg.optimizer == "adam" else None
    latent_rng = stream(ref_cfg.seed, "latent")
    label_rng = stream(ref_cfg.seed, "labels")
    for step in range(1, ref_cfg.steps + 1):
        pair = template.with_gen(gen).with_disc(site.disc_params)
        lr = ref_cfg.gen_lr(step)
        if gen_opt is not None:
            gen_opt.set_lr(lr)
        gen = wgan_gp_iteration(pair, site, latent_rng, label_rng, gen_opt, lr)
        if callback is not None:
            callback(step, template.with_gen(gen).with_disc(site.disc_params))
    return GeneratorCheckpoint(template.gen_spec, gen, ref_cfg.latent_dim, dataset.num_classes, ref_cfg.steps)
