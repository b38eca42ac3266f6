"""Conditional WGAN-GP on MLPs with a sanitized generator update.

The generator update is split at the generator output. The per-sample
gradient of ``-D(G(z_i))`` with respect to ``G(z_i)`` (the upstream
gradient) is the only quantity that depends on private data; it is
sanitized per sample and then pushed through the generator's local Jacobian
with a vector-Jacobian product on the retained generator tape.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from gradsan.autodiff import NetworkSpec, Tape, Var, apply, init_params
from gradsan.autodiff import tape as T
from gradsan.autodiff.network import PENALTY_EPS, check_params, param_leaves
from gradsan.optim import Optimizer, sgd
from gradsan.sanitizer import Mechanism, sanitize_batch

Params = dict[str, np.ndarray]


@dataclass
class GanPair:
    gen_spec: NetworkSpec
    disc_spec: NetworkSpec
    gen_params: Params
    disc_params: Params
    latent_dim: int
    num_classes: int
    lambda_gp: float = 10.0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.gen_spec.output_dim != self.disc_spec.input_dim:
            raise ValueError(
                f"generator output width {self.gen_spec.output_dim} != "
                f"discriminator input width {self.disc_spec.input_dim}"
            )
        if self.gen_spec.input_dim != self.latent_dim:
            raise ValueError("generator input width must equal latent_dim")
        if self.gen_spec.cond_dim != self.num_classes or self.disc_spec.cond_dim != self.num_classes:
            raise ValueError("both networks must be conditioned on a one-hot of width num_classes")
        if self.disc_spec.output_dim != 1:
            raise ValueError("discriminator must have scalar output")
        if self.lambda_gp < 0:
            raise ValueError("lambda_gp must be non-negative")
        check_params(self.gen_spec, self.gen_params)
        check_params(self.disc_spec, self.disc_params)

    @property
    def data_dim(self) -> int:
        return self.gen_spec.output_dim

    def with_disc(self, disc_params: Params) -> "GanPair":
        return dataclasses.replace(self, disc_params=disc_params)

    def with_gen(self, gen_params: Params) -> "GanPair":
        return dataclasses.replace(self, gen_params=gen_params)


@dataclass(frozen=True)
class UpstreamGrad:
    grad: np.ndarray
    index: int


def gen_spec_for(data_dim, num_classes, latent_dim=16, hidden=(64, 64), activation="tanh", output="linear"):
    return NetworkSpec.mlp(latent_dim, data_dim, hidden, activation, output, cond_dim=num_classes)


def disc_spec_for(data_dim, num_classes, hidden=(64, 64), activation="tanh"):
    return NetworkSpec.mlp(data_dim, 1, hidden, activation, "linear", cond_dim=num_classes)


def make_pair(data_dim: int, num_classes: int, gen_rng: np.random.Generator, disc_rng: np.random.Generator, *,
              latent_dim: int = 16, gen_hidden=(64, 64), disc_hidden=(64, 64), activation: str = "tanh",
              gen_output: str = "linear", lambda_gp: float = 10.0) -> GanPair:
    gs = gen_spec_for(data_dim, num_classes, latent_dim, gen_hidden, activation, gen_output)
    ds = disc_spec_for(data_dim, num_classes, disc_hidden, activation)
    return GanPair(gs, ds, init_params(gs, gen_rng), init_params(ds, disc_rng), latent_dim, num_classes, lambda_gp)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def generate(pair: GanPair, z: np.ndarray, labels) -> np.ndarray:
    return apply(pair.gen_spec, pair.gen_params, z, one_hot(labels, pair.num_classes)).value


def sample(pair: GanPair, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``n`` samples with labels from the uniform prior (labels drawn first)."""
    labels = rng.integers(pair.num_classes, size=n)
    z = rng.normal(size=(n, pair.latent_dim))
    if n == 0:
        return np.zeros((0, pair.data_dim)), labels
    return generate(pair, z, labels), labels


# -- discriminator -----------------------------------------------------------


def d_loss(pair: GanPair, real_batch, labels, rng: np.random.Generator, *, fake=None, fake_labels=None):
    """WGAN-GP critic loss on one batch.

    Without ``fake``, latent codes are drawn from ``rng`` and fakes share the
    real labels. With ``fake_labels`` differing from ``labels`` the
    conditioning one-hots are interpolated together with the samples. The
    interpolation weight is one scalar per sample pair, drawn from ``rng``.

    Returns:
        ``(loss, tape)``; the discriminator parameters are tape leaves named
        by their keys.
    """
    real = np.asarray(real_batch, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    B = len(real)
    if B == 0:
        raise ValueError("empty batch")
    if len(labels) != B:
        raise ValueError(f"batch has {B} samples but {len(labels)} labels")
    if fake is None:
        z = rng.normal(size=(B, pair.latent_dim))
        fake_labels = labels if fake_labels is None else fake_labels
        fake = generate(pair, z, fake_labels)
    elif fake_labels is None:
        fake_labels = labels
    fake = np.asarray(fake, dtype=np.float64)
    fake_labels = np.asarray(fake_labels, dtype=np.int64)
    if fake.shape != real.shape:
        raise ValueError(f"fake batch shape {fake.shape} does not match real batch {real.shape}")
    if len(fake_labels) != B:
        raise ValueError(f"fake batch has {B} samples but {len(fake_labels)} labels")

    k = pair.num_classes
    c_real, c_fake = one_hot(labels, k), one_hot(fake_labels, k)
    tape = Tape()
    leaves = param_leaves(tape, pair.disc_params)
    spec = pair.disc_spec
    loss = T.sub(T.mean(apply(spec, leaves, fake, c_fake)), T.mean(apply(spec, leaves, real, c_real)))
    if pair.lambda_gp > 0:
        alpha = rng.random((B, 1))
        x_hat = tape.leaf(alpha * real + (1.0 - alpha) * fake, "interp")
        same = (labels == fake_labels)[:, None]
        c_hat = np.where(same, c_real, alpha * c_real + (1.0 - alpha) * c_fake)
        g = tape.gradient(T.sum_(apply(spec, leaves, x_hat, c_hat)), x_hat, create_graph=True)
        norm = T.sqrt(T.add(T.sum_(T.square(g), axis=1), PENALTY_EPS))
        penalty = T.mean(T.square(T.sub(norm, 1.0)))
        loss = T.add(loss, T.mul(penalty, pair.lambda_gp))
    return loss, tape


def d_grad(pair: GanPair, real_batch, labels, rng, **kw) -> Params:
    loss, tape = d_loss(pair, real_batch, labels, rng, **kw)
    return tape.gradient(loss, {k: tape.leaves[k] for k in pair.disc_params})


def disc_step(pair: GanPair, real_batch, labels, lr: float, rng: np.random.Generator, *,
              fake=None, fake_labels=None, optimizer: Optimizer | None = None) -> Params:
    """One unsanitized descent step on the critic loss; returns new parameters."""
    grads = d_grad(pair, real_batch, labels, rng, fake=fake, fake_labels=fake_labels)
    if optimizer is not None:
        return optimizer.step(pair.disc_params, grads)
    return sgd(pair.disc_params, grads, lr)


# -- generator ---------------------------------------------------------------


@dataclass
class GeneratorPass:
    """Generator forward pass kept for a later vector-Jacobian product."""

    tape: Tape
    output: Var
    leaves: dict[str, Var]
    z: np.ndarray
    labels: np.ndarray

    @property
    def samples(self) -> np.ndarray:
        return self.output.value

    def vjp(self, cotangent: np.ndarray) -> Params:
        return self.tape.gradient(self.output, self.leaves, cotangent)


def generator_pass(pair: GanPair, z, labels) -> GeneratorPass:
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(z) == 0:
        raise ValueError("empty latent batch")
    if len(labels) != len(z):
        raise ValueError(f"{len(z)} latent codes but {len(labels)} labels")
    tape = Tape()
    leaves = param_leaves(tape, pair.gen_params)
    out = apply(pair.gen_spec, leaves, z, one_hot(labels, pair.num_classes))
    return GeneratorPass(tape, out, leaves, z, labels)


def upstream_grads(disc_spec: NetworkSpec, disc_params: Params, samples, labels, num_classes: int) -> np.ndarray:
    """Rows ``d(-D(x_i)) / d x_i`` for each generated sample ``x_i``."""
    tape = Tape()
    x = tape.leaf(samples, "samples")
    out = apply(disc_spec, disc_params, x, one_hot(labels, num_classes))
    return tape.gradient(T.sum_(T.neg(out)), x)


def g_loss_upstream(pair: GanPair, z_batch, labels) -> tuple[list[UpstreamGrad], GeneratorPass]:
    """Per-sample upstream gradients of the generator loss at the generator output.

    The generator tape is returned un-differentiated for the later VJP.
    """
    gp = generator_pass(pair, z_batch, labels)
    U = upstream_grads(pair.disc_spec, pair.disc_params, gp.samples, gp.labels, pair.num_classes)
    return [UpstreamGrad(U[i], i) for i in range(len(U))], gp


def apply_upstream(gp: GeneratorPass, upstream: Sequence[np.ndarray]) -> Params:
    """Generator gradient ``(1/B) sum_i u_i . J_i`` via one batched VJP."""
    U = np.stack([np.asarray(u, dtype=np.float64) for u in upstream])
    if U.shape != gp.samples.shape:
        raise ValueError(f"upstream batch shape {U.shape} != generator output shape {gp.samples.shape}")
    return gp.vjp(U * (1.0 / len(U)))


def sanitized_gen_step(pair: GanPair, z_batch, labels, mechanism: Mechanism | None, lr: float, *,
                       optimizer: Optimizer | None = None, gen_pass: GeneratorPass | None = None,
                       info: dict | None = None) -> Params:
    """Sanitize each upstream gradient, back-propagate through the generator, descend.

    Args:
        mechanism: required; pass ``Mechanism.identity()`` for a non-private run.
        gen_pass: a retained forward pass for ``(z_batch, labels)``, if any.
        info: filled with ``upstream_norms`` (before clipping) when given.
    """
    if mechanism is None:
        raise ValueError("refusing a generator update without a sanitization mechanism")
    gp = gen_pass if gen_pass is not None else generator_pass(pair, z_batch, labels)
    U = upstream_grads(pair.disc_spec, pair.disc_params, gp.samples, gp.labels, pair.num_classes)
    if info is not None:
        info["upstream_norms"] = np.sqrt(np.sum(U * U, axis=1))
    sanitized = sanitize_batch(list(U), mechanism)
    grads = apply_upstream(gp, sanitized)
    if optimizer is not None:
        return optimizer.step(pair.gen_params, grads)
    return sgd(pair.gen_params, grads, lr)


def gen_loss(pair: GanPair, z_batch, labels):
    """``-mean D(G(z))`` on one tape through both networks (discriminator held fixed)."""
    gp = generator_pass(pair, z_batch, labels)
    d = apply(pair.disc_spec, pair.disc_params, gp.output, one_hot(gp.labels, pair.num_classes))
    return T.mean(T.neg(d)), gp


def plain_gen_step(pair: GanPair, z_batch, labels, lr: float, *, optimizer: Optimizer | None = None) -> Params:
    """Non-private generator step by direct back-propagation of ``-mean D(G(z))``."""
    loss, gp = gen_loss(pair, z_batch, labels)
    grads = gp.tape.gradient(loss, gp.leaves)
    if optimizer is not None:
        return optimizer.step(pair.gen_params, grads)
    return sgd(pair.gen_params, grads, lr)


def upstream_norms(pair: GanPair, n: int, rng: np.random.Generator) -> np.ndarray:
    """Norms of the upstream gradient at ``n`` fresh generator samples."""
    x, labels = sample(pair, n, rng)
    U = upstream_grads(pair.disc_spec, pair.disc_params, x, labels, pair.num_classes)
    return np.sqrt(np.sum(U * U, axis=1))
