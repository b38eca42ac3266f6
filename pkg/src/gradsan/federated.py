"""In-process federated simulation with a real serialization boundary.

Each client keeps its shard and its discriminator. The server owns the
generator. Per generator step the server sends ``n_dis`` generated batches to
one sampled client; the client updates its critic on each and answers the
final one with per-sample sanitized upstream gradients. Every message is a
binary frame, so byte counts are measured rather than estimated.

Frame layout: ``u64`` step, ``u8`` kind, ``u32`` count of reals, then
``count`` little-endian float64 values.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from gradsan.accountant import PrivacyLedger
from gradsan.autodiff import init_params
from gradsan.central import (
    AccessLog,
    CriticSite,
    Evaluator,
    TrainConfig,
    build_sites,
    template_pair,
    warm_start,
)
from gradsan.checkpoint import GeneratorCheckpoint
from gradsan.data import LabeledDataset, flip_intensities, glyph_mean_intensity
from gradsan.gan import GanPair, apply_upstream, generate, generator_pass, sample, upstream_grads
from gradsan.optim import Optimizer, sgd
from gradsan.sanitizer import Mechanism, sanitize_batch
from gradsan.streams import stream

log = logging.getLogger(__name__)

HEADER = struct.Struct("<QBI")
HEADER_BYTES = HEADER.size  # 13

SAMPLES = 1  # server -> client: generated samples then labels
SANITIZED_GRADS = 2  # client -> server: privatized upstream gradients
RAW_GRADS = 3  # client -> server: identity-mechanism gradients (non-private mode)
KINDS = {SAMPLES: "samples", SANITIZED_GRADS: "sanitized_grads", RAW_GRADS: "raw_grads"}


class WireError(ValueError):
    """Malformed, unexpected or forbidden frame."""


class ClientFailure(RuntimeError):
    """A client dropped out in the middle of a step."""


@dataclass(frozen=True)
class Frame:
    step: int
    kind: int
    values: np.ndarray


def encode_frame(step: int, kind: int, values) -> bytes:
    if kind not in KINDS:
        raise WireError(f"unknown frame kind {kind}")
    v = np.ascontiguousarray(np.ravel(values), dtype="<f8")
    return HEADER.pack(step, kind, v.size) + v.tobytes()


def decode_frame(buf: bytes) -> Frame:
    if len(buf) < HEADER_BYTES:
        raise WireError(f"frame of {len(buf)} bytes is shorter than the {HEADER_BYTES}-byte header")
    step, kind, count = HEADER.unpack_from(buf, 0)
    if kind not in KINDS:
        raise WireError(f"unknown frame kind {kind}")
    if len(buf) != HEADER_BYTES + 8 * count:
        raise WireError(f"frame declares {count} reals but carries {len(buf) - HEADER_BYTES} payload bytes")
    return Frame(step, kind, np.frombuffer(buf, dtype="<f8", offset=HEADER_BYTES).astype(np.float64))


def payload_frame_bytes(batch_size: int, data_dim: int) -> int:
    return HEADER_BYTES + 8 * batch_size * data_dim


def samples_frame_bytes(batch_size: int, data_dim: int) -> int:
    return HEADER_BYTES + 8 * batch_size * (data_dim + 1)


def comm_ratio(pair: GanPair, batch_size: int) -> float:
    """Reals per upstream payload over reals in one full critic-parameter gradient."""
    return batch_size * pair.data_dim / pair.disc_spec.n_params()


_FACTORY = object()


@dataclass(frozen=True)
class GradPayload:
    """Per-sample upstream gradients that have been through a mechanism.

    Only :meth:`sanitize` can build one; the ``private`` flag records
    whether the mechanism added noise.
    """

    step: int
    grads: np.ndarray
    private: bool
    _token: object = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        if self._token is not _FACTORY:
            raise TypeError("GradPayload can only be built by GradPayload.sanitize")

    @classmethod
    def sanitize(cls, step: int, raw: np.ndarray, mechanism: Mechanism) -> "GradPayload":
        rows = sanitize_batch(list(np.asarray(raw, dtype=np.float64)), mechanism)
        return cls(step, np.stack(rows), not mechanism.non_private, _FACTORY)

    @property
    def kind(self) -> int:
        return SANITIZED_GRADS if self.private else RAW_GRADS

    def to_frame(self) -> bytes:
        return encode_frame(self.step, self.kind, self.grads)

    @property
    def nbytes(self) -> int:
        return HEADER_BYTES + 8 * self.grads.size


@dataclass
class WireStats:
    """Every frame that crossed the simulated wire."""

    messages: list[tuple[int, str, int, int]] = field(default_factory=list)  # (step, direction, kind, bytes)

    def add(self, step: int, direction: str, kind: int, nbytes: int) -> None:
        self.messages.append((step, direction, kind, nbytes))

    def total(self, direction: str) -> int:
        return sum(n for _, d, _, n in self.messages if d == direction)

    @property
    def down_total(self) -> int:
        return self.total("down")

    @property
    def up_total(self) -> int:
        return self.total("up")

    def per_step(self) -> list[dict]:
        rows: dict[int, dict] = {}
        for step, d, _, n in self.messages:
            r = rows.setdefault(step, {"step": step, "down_bytes": 0, "up_bytes": 0, "messages": 0})
            r[d + "_bytes"] += n
            r["messages"] += 1
        return [rows[s] for s in sorted(rows)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "down_bytes", "up_bytes", "messages"])
            w.writeheader()
            w.writerows(self.per_step())


class ClientState:
    """A federated participant: shard, critic, mechanism and byte counters.

    The critic state is a :class:`CriticSite` built from the same per-index
    random streams the centralized trainer uses for shard ``client_id``.
    """

    def __init__(self, client_id: int, data: LabeledDataset, config: TrainConfig, template: GanPair,
                 access_log: AccessLog | None = None, site: CriticSite | None = None):
        self.id = client_id
        self.template = template
        self.site = site if site is not None else CriticSite(client_id, data, config, template, access_log)
        self.bytes_sent = 0
        self.bytes_received = 0
        self.fail_next = False

    @property
    def data(self) -> LabeledDataset:
        return self.site.data

    @property
    def disc_params(self):
        return self.site.disc_params

    @property
    def mechanism(self) -> Mechanism:
        return self.site.mechanism

    def forbidden_patterns(self) -> list[bytes]:
        """Byte images of the critic's parameter tensors (constant ones skipped)."""
        out = []
        for p in self.disc_params.values():
            flat = np.ravel(p)
            if flat.size >= 2 and np.ptp(flat) > 0:
                out.append(np.ascontiguousarray(flat, dtype="<f8").tobytes())
        return out

    def handle(self, buf: bytes, final: bool) -> bytes | None:
        """Receive one samples frame; reply with a payload frame on the final call."""
        self.bytes_received += len(buf)
        if self.fail_next:
            self.fail_next = False
            raise ClientFailure(f"client {self.id} dropped out")
        frame = decode_frame(buf)
        if frame.kind != SAMPLES:
            raise WireError(f"client {self.id} expected a samples frame, got {KINDS[frame.kind]}")
        d = self.template.data_dim
        B = frame.values.size // (d + 1)
        if B * (d + 1) != frame.values.size:
            raise WireError(f"samples frame of {frame.values.size} reals does not split into rows of {d} + label")
        fake = frame.values[: B * d].reshape(B, d)
        labels = frame.values[B * d :].astype(np.int64)
        payload = client_update(self, fake, labels, step=frame.step, final=final)
        if payload is None:
            return None
        out = payload.to_frame()
        self.bytes_sent += len(out)
        return out


def client_warm_start(client: ClientState, config: TrainConfig) -> ClientState:
    """Non-private pre-training of the client's critic against a local throwaway generator."""
    warm_start(client.site, config, client.template)
    return client


def client_update(client: ClientState, generated, labels, *, step: int = 0, final: bool = True
                  ) -> GradPayload | None:
    """One local critic step against the received fakes.

    On the final call of a generator step, also returns the sanitized
    per-sample upstream gradients at the same fakes under the updated critic.
    """
    client.site.critic_update(client.template, generated, labels)
    if not final:
        return None
    raw = upstream_grads(client.template.disc_spec, client.disc_params, generated, labels,
                         client.template.num_classes)
    return GradPayload.sanitize(step, raw, client.mechanism)


class Channel:
    """The serialization boundary: counts bytes and audits every frame."""

    def __init__(self, stats: WireStats, private: bool):
        self.stats = stats
        self.private = private

    def audit(self, buf: bytes, client: ClientState, direction: str) -> Frame:
        frame = decode_frame(buf)
        allowed = {SAMPLES} if direction == "down" else ({SANITIZED_GRADS} if self.private else {SANITIZED_GRADS, RAW_GRADS})
        if frame.kind not in allowed:
            raise WireError(f"{KINDS[frame.kind]} frame not allowed {direction}stream"
                            + (" in private mode" if self.private else ""))
        for pat in client.forbidden_patterns():
            if pat in buf:
                raise WireError(f"discriminator parameters of client {client.id} found on the wire")
        return frame

    def exchange(self, client: ClientState, step: int, fake: np.ndarray, labels: np.ndarray, final: bool):
        down = encode_frame(step, SAMPLES, np.concatenate([np.ravel(fake), labels.astype(np.float64)]))
        self.audit(down, client, "down")
        self.stats.add(step, "down", SAMPLES, len(down))
        up = client.handle(down, final)
        if up is None:
            if final:
                raise WireError(f"client {client.id} sent no payload for step {step}")
            return None
        frame = self.audit(up, client, "up")
        self.stats.add(step, "up", frame.kind, len(up))
        return frame


@dataclass
class FederatedResult:
    checkpoint: GeneratorCheckpoint
    ledger: PrivacyLedger
    wire: WireStats
    metrics: list[dict] = field(default_factory=list)
    client_history: list[int] = field(default_factory=list)
    aborted_steps: list[int] = field(default_factory=list)
    halted: bool = False
    steps_done: int = 0
    notes: dict = field(default_factory=dict)

    @property
    def epsilon(self) -> float | None:
        if self.ledger.steps == 0:
            return None
        return self.ledger.to_dp()[0]


def make_clients(dataset: LabeledDataset, config: TrainConfig, access_log: AccessLog | None = None
                 ) -> list[ClientState]:
    """Split ``dataset`` into ``1 / gamma`` client shards, exactly as the centralized trainer does."""
    template = template_pair(dataset.dim, dataset.num_classes, config)
    sites = build_sites(dataset, config, template, access_log)
    return [ClientState(s.k, s.data, config, template, site=s) for s in sites]


def clients_from_shards(shards: list[LabeledDataset], config: TrainConfig) -> list[ClientState]:
    first = shards[0]
    template = template_pair(first.dim, first.num_classes, config)
    return [ClientState(k, d, config, template) for k, d in enumerate(shards)]


def warm_clients(clients: list[ClientState], config: TrainConfig) -> None:
    if config.warm_steps == 0:
        return
    if config.workers > 1 and len(clients) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(config.workers) as ex:
            list(ex.map(lambda c: client_warm_start(c, config), clients))
    else:
        for c in clients:
            client_warm_start(c, config)


def server_train(clients: list[ClientState], config: TrainConfig, *, failure_rate: float = 0.0,
                 evaluator: Evaluator | None = None, warm: bool = True) -> FederatedResult:
    """Train the generator against ``clients``; the ledger uses ``gamma = 1/K``.

    A client failure aborts the step: the server logs it, charges the
    ledger for the attempted query and samples a client again.
    """
    if not clients:
        raise ValueError("need at least one client")
    if not 0 <= failure_rate < 1:
        raise ValueError("failure_rate must lie in [0, 1)")
    K = len(clients)
    template = clients[0].template
    private = not (config.non_private or config.sigma == 0)
    if warm:
        warm_clients(clients, config)

    gen = init_params(template.gen_spec, stream(config.seed, "gen_init"))
    gen_opt = Optimizer(config.optimizer, config.lr_g) if config.optimizer == "adam" else None
    ledger = PrivacyLedger(1.0 / K, config.batch_size, config.ledger_sigma, delta=config.delta)
    latent_rng = stream(config.seed, "latent")
    label_rng = stream(config.seed, "labels")
    client_rng = stream(config.seed, "shard_choice")
    failure_rng = stream(config.seed, "failure")
    eval_rng = stream(config.seed, "eval")
    wire = WireStats()
    channel = Channel(wire, private)
    result = FederatedResult(None, ledger, wire, notes={
        "privacy_unit": "client",
        "adjacency": "user-level: neighbouring datasets differ in one client's entire shard",
        "warm_start_charged": False,
        "num_clients": K,
    })
    B = config.batch_size

    step = 0
    while step < config.steps:
        if config.eps_ceiling is not None and ledger.epsilon_after(ledger.steps + 1) > config.eps_ceiling:
            result.halted = True
            log.warning("privacy budget %.4g reached; halting before step %d", config.eps_ceiling, step + 1)
            break
        k = int(client_rng.integers(K))
        client = clients[k]
        result.client_history.append(k)
        if failure_rate > 0 and failure_rng.random() < failure_rate:
            client.fail_next = True
        pair = template.with_gen(gen)
        frame = None
        try:
            for t in range(config.n_dis):
                z = latent_rng.normal(size=(B, template.latent_dim))
                labels = label_rng.integers(template.num_classes, size=B)
                final = t == config.n_dis - 1
                if final:
                    gp = generator_pass(pair, z, labels)
                    fake = gp.samples
                else:
                    fake = generate(pair, z, labels)
                frame = channel.exchange(client, step + 1, fake, labels, final)
        except ClientFailure as e:
            log.warning("step %d aborted: %s; resampling a client", step + 1, e)
            ledger.accumulate(1)
            result.aborted_steps.append(step + 1)
            continue
        step += 1
        U = frame.values.reshape(B, template.data_dim)
        grads = apply_upstream(gp, U)
        lr = config.gen_lr(step)
        if gen_opt is not None:
            gen_opt.set_lr(lr)
        gen = gen_opt.step(gen, grads) if gen_opt is not None else sgd(gen, grads, lr)
        ledger.accumulate(1)
        result.steps_done = step
        if config.metrics_every and step % config.metrics_every == 0:
            row = {"step": step, "mean_upstream_norm": float(np.mean(np.sqrt(np.sum(U * U, axis=1)))),
                   "eps_at_delta": ledger.to_dp()[0]}
            if evaluator is not None:
                row.update(evaluator(template.with_gen(gen), eval_rng))
            result.metrics.append(row)

    result.checkpoint = GeneratorCheckpoint(template.gen_spec, gen, template.latent_dim, template.num_classes,
                                            result.steps_done)
    return result


def check_conservation(clients: list[ClientState], wire: WireStats) -> None:
    """Raise unless bytes sent by each side equal bytes received by the other."""
    received = sum(c.bytes_received for c in clients)
    sent = sum(c.bytes_sent for c in clients)
    if received != wire.down_total or sent != wire.up_total:
        raise AssertionError(f"wire totals (down {wire.down_total}, up {wire.up_total}) != client counters "
                             f"(received {received}, sent {sent})")
    if wire.down_total + wire.up_total != sum(m[3] for m in wire.messages):
        raise AssertionError("per-direction totals do not sum to the message log")


# -- bug scenario ------------------------------------------------------------


@dataclass
class BugReport:
    flip_fraction: float
    suspected_clients: list[int]
    clean_clients: list[int]
    flipped_clients: list[int]
    suspected_mean: float
    clean_mean: float
    t_statistic: float
    p_value: float
    inverted: bool
    bimodal: bool
    flipped_share: float
    checkpoints: dict[str, GeneratorCheckpoint] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "checkpoints"}
        return {k: (float(v) if isinstance(v, np.floating) else v) for k, v in d.items()}

    def flagged(self) -> bool:
        return self.inverted or self.bimodal


def bug_scenario(dataset: LabeledDataset, num_clients: int, flip_fraction: float, config: TrainConfig, *,
                 n_probe: int = 256, bimodal_share: float = 0.1) -> BugReport:
    """Flip intensities on a share of suspected clients and compare per-pool generators.

    The clients are split at random into two equal pools. ``flip_fraction``
    of the suspected pool has its pixels replaced by ``1 - x``. One federated
    generator is trained per pool. The report compares per-sample mean
    intensities of ``n_probe`` generated samples from each pool with Welch's
    t-test.

    Args:
        dataset: glyph data with intensities in ``[0, 1]``.
        num_clients: total clients across both pools (at least 2).
        flip_fraction: share of suspected clients whose data is flipped.
        config: per-pool training configuration; ``gamma`` is ignored.
    """
    from scipy import stats

    if num_clients < 2 or num_clients % 2:
        raise ValueError("num_clients must be an even number >= 2")
    if not 0 <= flip_fraction <= 1:
        raise ValueError("flip_fraction must lie in [0, 1]")
    per_pool = num_clients // 2
    shards = _split(dataset, num_clients, config.seed)
    order = stream(config.seed, "pool").permutation(num_clients)
    suspected = sorted(int(i) for i in order[:per_pool])
    clean = sorted(int(i) for i in order[per_pool:])
    n_flip = int(round(flip_fraction * per_pool))
    flipped = suspected[:n_flip]

    pool_cfg = TrainConfig(**{**config.to_dict(), "gamma": 1.0 / per_pool})
    intensities = {}
    checkpoints = {}
    for name, members in (("suspected", suspected), ("clean", clean)):
        local = [flip_intensities(shards[i]) if i in flipped else shards[i] for i in members]
        clients = clients_from_shards(local, pool_cfg)
        res = server_train(clients, pool_cfg)
        checkpoints[name] = res.checkpoint
        pair = clients[0].template.with_gen(res.checkpoint.params)
        x, _ = sample(pair, n_probe, stream(config.seed, "sample", len(checkpoints)))
        intensities[name] = glyph_mean_intensity(x)

    s, c = intensities["suspected"], intensities["clean"]
    if np.ptp(np.concatenate([s, c])) == 0:
        t, p = 0.0, 1.0
    else:
        t, p = stats.ttest_ind(s, c, equal_var=False)
    clean_mean = float(np.mean(c))
    # A sample "looks flipped" when it sits nearer the mirror image of the clean mean.
    mirror = 1.0 - clean_mean
    looks_flipped = np.abs(s - mirror) < np.abs(s - clean_mean)
    share = float(np.mean(looks_flipped))
    sus_mean = float(np.mean(s))
    return BugReport(
        flip_fraction=flip_fraction, suspected_clients=suspected, clean_clients=clean, flipped_clients=flipped,
        suspected_mean=sus_mean, clean_mean=clean_mean, t_statistic=float(t), p_value=float(p),
        inverted=(sus_mean - 0.5) * (clean_mean - 0.5) < 0,
        bimodal=bimodal_share <= share <= 1 - bimodal_share,
        flipped_share=share, checkpoints=checkpoints,
    )


def _split(dataset: LabeledDataset, n: int, seed: int) -> list[LabeledDataset]:
    perm = stream(seed, "partition").permutation(len(dataset))
    return [dataset.subset(np.sort(idx)) for idx in np.array_split(perm, n)]
