"""Multi-layer perceptrons on the tape, plus the gradient-penalty derivative."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from gradsan.autodiff import tape as T
from gradsan.autodiff.tape import Tape, Var

# Only activations with a second derivative everywhere; the penalty term
# differentiates through the input gradient.
ACTIVATIONS = {
    "linear": None,
    "tanh": T.tanh,
    "softplus": T.softplus,
    "sigmoid": T.sigmoid,
}

PENALTY_EPS = 1e-12

Params = Mapping[str, np.ndarray]


@dataclass(frozen=True)
class NetworkSpec:
    """Fully connected network layout.

    ``activations`` has one entry per weight layer (``len(hidden) + 1``).
    The network input is ``concat([x, cond])`` when ``cond_dim > 0``.
    """

    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = ()
    activations: tuple[str, ...] = ("linear",)
    cond_dim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "activations", tuple(self.activations))
        if self.input_dim < 1 or self.output_dim < 1 or self.cond_dim < 0:
            raise ValueError("network dimensions must be positive")
        if any(h < 1 for h in self.hidden):
            raise ValueError(f"hidden widths must be positive, got {self.hidden}")
        if len(self.activations) != len(self.hidden) + 1:
            raise ValueError(
                f"need {len(self.hidden) + 1} activations for {len(self.hidden)} hidden layers, "
                f"got {len(self.activations)}"
            )
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(
                    f"activation {a!r} is not twice differentiable everywhere; "
                    f"choose from {sorted(ACTIVATIONS)}"
                )

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim + self.cond_dim, *self.hidden, self.output_dim)

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        w = self.widths
        shapes = {}
        for i in range(self.n_layers):
            shapes[f"W{i}"] = (w[i], w[i + 1])
            shapes[f"b{i}"] = (w[i + 1],)
        return shapes

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    @classmethod
    def mlp(cls, input_dim, output_dim, hidden=(), activation="tanh", output="linear", cond_dim=0):
        return cls(input_dim, output_dim, tuple(hidden), (activation,) * len(hidden) + (output,), cond_dim)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden": list(self.hidden),
            "activations": list(self.activations),
            "cond_dim": self.cond_dim,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkSpec":
        return cls(
            int(d["input_dim"]),
            int(d["output_dim"]),
            tuple(d["hidden"]),
            tuple(d["activations"]),
            int(d.get("cond_dim", 0)),
        )


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Glorot-normal weights, zero biases."""
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.startswith("W"):
            std = np.sqrt(2.0 / (shape[0] + shape[1]))
            params[name] = rng.normal(0.0, std, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def check_params(spec: NetworkSpec, params: Mapping) -> None:
    for name, shape in spec.param_shapes().items():
        if name not in params:
            raise ValueError(f"missing parameter {name}")
        got = np.shape(params[name].value if isinstance(params[name], Var) else params[name])
        if got != shape:
            raise ValueError(f"parameter {name} has shape {got}, expected {shape}")


def apply(spec: NetworkSpec, params: Mapping, x, cond=None) -> Var:
    """Evaluate the network; ``params`` and ``x`` may be Vars or arrays."""
    xv = x.value if isinstance(x, Var) else np.asarray(x)
    if xv.ndim != 2 or xv.shape[1] != spec.input_dim:
        raise ValueError(f"layer 0: expected input of shape (N, {spec.input_dim}), got {xv.shape}")
    if spec.cond_dim:
        if cond is None:
            raise ValueError(f"layer 0: network expects a conditioning input of width {spec.cond_dim}")
        cv = cond.value if isinstance(cond, Var) else np.asarray(cond)
        if cv.shape != (xv.shape[0], spec.cond_dim):
            raise ValueError(
                f"layer 0: expected conditioning of shape ({xv.shape[0]}, {spec.cond_dim}), got {cv.shape}"
            )
        h = T.concat([x, cond], axis=1)
    else:
        h = x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))
    for i, act in enumerate(spec.activations):
        W, b = params[f"W{i}"], params[f"b{i}"]
        wshape = W.shape if isinstance(W, Var) else np.shape(W)
        if wshape[0] != h.shape[1]:
            raise ValueError(f"layer {i}: weight expects width {wshape[0]}, input has {h.shape[1]}")
        h = T.add(T.matmul(h, W), b)
        fn = ACTIVATIONS[act]
        if fn is not None:
            h = fn(h)
    return h


def param_leaves(tape: Tape, params: Params, prefix: str = "") -> dict[str, Var]:
    return {k: tape.leaf(v, prefix + k) for k, v in params.items()}


def forward(spec: NetworkSpec, params: Params, x, cond=None, *, track_input: bool = False):
    """Run the network on a fresh tape.

    Parameters are recorded as leaves named after the parameter keys; the
    input as leaf ``"input"`` when ``track_input``.

    Returns:
        ``(output, tape)``.
    """
    check_params(spec, params)
    tape = Tape()
    leaves = param_leaves(tape, params)
    xin = tape.leaf(x, "input") if track_input else np.asarray(x, dtype=np.float64)
    out = apply(spec, leaves, xin, cond)
    return out, tape


def input_gradient(spec: NetworkSpec, params: Mapping, x: Var, cond=None, *, create_graph=True) -> Var:
    """Per-row gradient of the network output w.r.t. ``x`` (output width 1)."""
    if spec.output_dim != 1:
        raise ValueError("input_gradient needs a scalar-output network")
    out = apply(spec, params, x, cond)
    return x.tape.gradient(T.sum_(out), x, create_graph=create_graph)


def penalty_value(spec: NetworkSpec, params: Mapping, point: Var, cond=None) -> Var:
    """``mean_i (||grad_x D(x_i)|| - 1)^2`` with the norm smoothed at zero."""
    g = input_gradient(spec, params, point, cond)
    sq = T.sum_(T.square(g), axis=1)
    norm = T.sqrt(T.add(sq, PENALTY_EPS))
    return T.mean(T.square(T.sub(norm, 1.0)))


def grad_of_grad_norm(spec: NetworkSpec, params: Params, point, cond=None) -> dict[str, np.ndarray]:
    """Parameter gradient of the gradient penalty at ``point``.

    The inner input-gradient is recorded on the tape and differentiated again.

    Raises:
        ValueError: if some row has zero input-gradient norm.
    """
    check_params(spec, params)
    tape = Tape()
    leaves = param_leaves(tape, params)
    x = tape.leaf(np.atleast_2d(np.asarray(point, dtype=np.float64)), "input")
    g = input_gradient(spec, leaves, x, cond)
    if np.any(np.sum(g.value**2, axis=1) == 0.0):
        raise ValueError("input-gradient norm is zero; the penalty is not differentiable there")
    sq = T.sum_(T.square(g), axis=1)
    norm = T.sqrt(T.add(sq, PENALTY_EPS))
    pen = T.mean(T.square(T.sub(norm, 1.0)))
    return tape.gradient(pen, leaves)
