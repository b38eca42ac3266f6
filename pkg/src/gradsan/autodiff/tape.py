"""Tape-based reverse-mode differentiation over float64 numpy arrays.

A :class:`Tape` is an append-only list of primitive nodes. Values flowing
through the tape are wrapped in :class:`Var`. Every backward rule is itself
written with the recorded primitives, so asking for a gradient with
``create_graph=True`` appends the backward pass to the tape as ordinary nodes
and the result can be differentiated again.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_DTYPE = np.float64


class Var:
    """A value, optionally tracked by a tape.

    ``tape is None`` means the value is a constant for differentiation purposes.
    """

    __slots__ = ("value", "tape", "index")
    __array_priority__ = 100.0

    def __init__(self, value, tape: "Tape | None" = None, index: int = -1):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def __repr__(self) -> str:
        where = f"node {self.index}" if self.tape is not None else "const"
        return f"Var({where}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


@dataclass(slots=True)
class Node:
    op: str
    inputs: tuple  # per input: int node index, or None for a constant
    consts: tuple  # per input: the constant array when inputs[i] is None
    attrs: dict
    value: np.ndarray
    var: Var
    name: str | None = None


@dataclass
class Tape:
    """Append-only record of primitive operations.

    Leaves are nodes with op ``"leaf"``; named leaves can be looked up in
    :attr:`leaves` and used as gradient selectors.
    """

    nodes: list[Node] = field(default_factory=list)
    leaves: dict[str, Var] = field(default_factory=dict)

    def leaf(self, value, name: str | None = None) -> Var:
        value = np.asarray(value, dtype=_DTYPE)
        if name is not None and name in self.leaves:
            raise ValueError(f"duplicate leaf name {name!r}")
        var = Var(value, self, len(self.nodes))
        self.nodes.append(Node("leaf", (), (), {}, value, var, name))
        if name is not None:
            self.leaves[name] = var
        return var

    def _record(self, op: str, args: Sequence[Var], attrs: dict, value) -> Var:
        inputs = tuple(a.index if a.tape is self else None for a in args)
        consts = tuple(None if a.tape is self else a.value for a in args)
        var = Var(value, self, len(self.nodes))
        self.nodes.append(Node(op, inputs, consts, attrs, value, var))
        return var

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def root(self) -> Var:
        return self.nodes[-1].var

    def replay(self, leaf_values: dict[str, np.ndarray] | None = None) -> list[np.ndarray]:
        """Re-execute every node and return the recomputed node values.

        Leaves keep their recorded values unless overridden by name.
        """
        leaf_values = leaf_values or {}
        out: list[np.ndarray] = []
        for node in self.nodes:
            if node.op == "leaf":
                v = leaf_values.get(node.name, node.value) if node.name else node.value
                out.append(np.asarray(v, dtype=_DTYPE))
                continue
            args = [out[i] if i is not None else c for i, c in zip(node.inputs, node.consts)]
            out.append(_FORWARD[node.op](*args, **node.attrs))
        return out

    # -- differentiation -------------------------------------------------

    def gradient(
        self,
        root: Var,
        wrt,
        cotangent=None,
        *,
        create_graph: bool = False,
    ):
        """Reverse-mode derivative of ``root`` with respect to ``wrt``.

        Args:
            root: a Var recorded on this tape.
            wrt: a Var, a leaf name, or a list/dict of either.
            cotangent: seed for a non-scalar root (vector-Jacobian product).
            create_graph: record the backward pass on this tape so the result
                is itself differentiable.

        Returns:
            Gradients in the same structure as ``wrt``. Unreached entries are
            zeros. With ``create_graph`` the entries are Vars, else arrays.
        """
        if root.tape is not self and root.tape is not None:
            raise ValueError("root is not recorded on this tape")
        if cotangent is None:
            if root.value.size != 1:
                raise ValueError(
                    f"gradient needs a scalar root or an explicit cotangent; got shape {root.shape}"
                )
            cotangent = np.ones_like(root.value)
        cotangent = np.asarray(cotangent, dtype=_DTYPE)
        if cotangent.shape != root.shape:
            raise ValueError(f"cotangent shape {cotangent.shape} != root shape {root.shape}")

        if isinstance(wrt, dict):
            keys = list(wrt)
            targets = [self._resolve(wrt[k]) for k in keys]
        elif isinstance(wrt, (list, tuple)):
            keys = None
            targets = [self._resolve(w) for w in wrt]
        else:
            keys = None
            targets = [self._resolve(wrt)]

        if root.tape is None:
            # A constant root does not depend on any leaf.
            grads = [Var(np.zeros_like(t.value)) if create_graph else np.zeros_like(t.value) for t in targets]
        else:
            grads = self._backward(root.index, cotangent, targets, create_graph)

        if isinstance(wrt, dict):
            return dict(zip(keys, grads))
        if isinstance(wrt, (list, tuple)):
            return type(wrt)(grads) if isinstance(wrt, tuple) else grads
        return grads[0]

    def _resolve(self, w) -> Var:
        if isinstance(w, str):
            try:
                return self.leaves[w]
            except KeyError:
                raise KeyError(f"no leaf named {w!r} on tape") from None
        if not isinstance(w, Var) or w.tape is not self:
            raise ValueError("gradient target must be a Var recorded on this tape")
        return w

    def _backward(self, root_index: int, seed: np.ndarray, targets: list[Var], create_graph: bool):
        nodes = self.nodes
        # Nodes that depend on some target; only these receive adjoints.
        live = bytearray(root_index + 1)
        for t in targets:
            if t.index <= root_index:
                live[t.index] = 1
        lo = min((t.index for t in targets), default=root_index + 1)
        for i in range(lo, root_index + 1):
            if not live[i]:
                for j in nodes[i].inputs:
                    if j is not None and live[j]:
                        live[i] = 1
                        break

        adj: dict[int, Var] = {}
        if live[root_index]:
            adj[root_index] = Var(seed)

        for i in range(root_index, lo - 1, -1):
            g = adj.pop(i, None) if not _is_target(i, targets) else adj.get(i)
            if g is None:
                continue
            node = nodes[i]
            if node.op == "leaf":
                continue
            if create_graph:
                args = [nodes[j].var if j is not None else Var(c) for j, c in zip(node.inputs, node.consts)]
                out = node.var
            else:
                args = [Var(nodes[j].value) if j is not None else Var(c) for j, c in zip(node.inputs, node.consts)]
                out = Var(node.value)
                g = Var(g.value)
            needs = tuple(j is not None and bool(live[j]) for j in node.inputs)
            contribs = _VJP[node.op](g, out, args, needs, **node.attrs)
            for j, need, c in zip(node.inputs, needs, contribs):
                if not need or c is None:
                    continue
                prev = adj.get(j)
                adj[j] = c if prev is None else add(prev, c)

        result = []
        for t in targets:
            g = adj.get(t.index)
            if g is None:
                zero = np.zeros_like(t.value)
                result.append(Var(zero) if create_graph else zero)
            else:
                result.append(g if create_graph else g.value)
        return result


def _is_target(i: int, targets: list[Var]) -> bool:
    for t in targets:
        if t.index == i:
            return True
    return False


# -- primitive registry ------------------------------------------------------

_FORWARD: dict[str, Callable] = {}
_VJP: dict[str, Callable] = {}


def _as_var(x) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=_DTYPE))


def _apply(op: str, args: Sequence, **attrs) -> Var:
    args = [_as_var(a) for a in args]
    value = _FORWARD[op](*[a.value for a in args], **attrs)
    tape = None
    for a in args:
        if a.tape is not None:
            if tape is not None and a.tape is not tape:
                raise ValueError("cannot combine Vars from different tapes")
            tape = a.tape
    if tape is None:
        return Var(value)
    return tape._record(op, args, attrs, value)


def primitive(name: str, forward: Callable):
    """Register ``name`` with a forward function; decorate its VJP rule.

    The VJP receives ``(g, out, args, needs, **attrs)`` and returns one
    contribution (or None) per input, expressed with recorded primitives.
    """

    def register(vjp: Callable) -> Callable:
        _FORWARD[name] = forward
        _VJP[name] = vjp
        return vjp

    return register


def _sum_to_shape(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and x.shape[lead + i] != 1
    )
    out = x.sum(axis=axes, keepdims=True) if axes else x
    return out.reshape(shape)


def _slice_fwd(a, *, axis, start, stop):
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    return a[tuple(idx)]


def _pad_fwd(a, *, axis, start, total):
    shape = list(a.shape)
    shape[axis] = total
    out = np.zeros(shape, dtype=_DTYPE)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + a.shape[axis])
    out[tuple(idx)] = a
    return out


def _unbroadcast(g: Var, shape) -> Var:
    return g if g.shape == shape else sum_to(g, shape)


@primitive("add", np.add)
def _vjp_add(g, out, args, needs):
    a, b = args
    return (
        _unbroadcast(g, a.shape) if needs[0] else None,
        _unbroadcast(g, b.shape) if needs[1] else None,
    )


@primitive("sub", np.subtract)
def _vjp_sub(g, out, args, needs):
    a, b = args
    return (
        _unbroadcast(g, a.shape) if needs[0] else None,
        _unbroadcast(neg(g), b.shape) if needs[1] else None,
    )


@primitive("mul", np.multiply)
def _vjp_mul(g, out, args, needs):
    a, b = args
    return (
        _unbroadcast(mul(g, b), a.shape) if needs[0] else None,
        _unbroadcast(mul(g, a), b.shape) if needs[1] else None,
    )


@primitive("div", np.divide)
def _vjp_div(g, out, args, needs):
    a, b = args
    return (
        _unbroadcast(div(g, b), a.shape) if needs[0] else None,
        _unbroadcast(neg(div(mul(g, out), b)), b.shape) if needs[1] else None,
    )


@primitive("neg", np.negative)
def _vjp_neg(g, out, args, needs):
    return (neg(g),)


@primitive("matmul", np.matmul)
def _vjp_matmul(g, out, args, needs):
    a, b = args
    return (
        matmul(g, transpose(b)) if needs[0] else None,
        matmul(transpose(a), g) if needs[1] else None,
    )


@primitive("transpose", np.transpose)
def _vjp_transpose(g, out, args, needs):
    return (transpose(g),)


@primitive("tanh", np.tanh)
def _vjp_tanh(g, out, args, needs):
    return (mul(g, sub(1.0, mul(out, out))),)


def _sigmoid_fwd(a):
    # Split by sign so exp never overflows.
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@primitive("sigmoid", _sigmoid_fwd)
def _vjp_sigmoid(g, out, args, needs):
    return (mul(g, mul(out, sub(1.0, out))),)


def _softplus_fwd(a):
    return np.logaddexp(0.0, a)


@primitive("softplus", _softplus_fwd)
def _vjp_softplus(g, out, args, needs):
    return (mul(g, sigmoid(args[0])),)


@primitive("sqrt", np.sqrt)
def _vjp_sqrt(g, out, args, needs):
    return (div(mul(g, 0.5), out),)


def _sum_fwd(a, *, axis):
    if axis is None:
        return np.sum(a).reshape(())
    return np.sum(a, axis=axis, keepdims=True)


@primitive("sum", _sum_fwd)
def _vjp_sum(g, out, args, needs, *, axis):
    return (broadcast_to(g, args[0].shape),)


def _broadcast_fwd(a, *, shape):
    return np.array(np.broadcast_to(a, shape))


@primitive("broadcast_to", _broadcast_fwd)
def _vjp_broadcast(g, out, args, needs, *, shape):
    return (sum_to(g, args[0].shape),)


def _sum_to_fwd(a, *, shape):
    return _sum_to_shape(a, shape)


@primitive("sum_to", _sum_to_fwd)
def _vjp_sum_to(g, out, args, needs, *, shape):
    return (broadcast_to(g, args[0].shape),)


def _reshape_fwd(a, *, shape):
    return a.reshape(shape)


@primitive("reshape", _reshape_fwd)
def _vjp_reshape(g, out, args, needs, *, shape):
    return (reshape(g, args[0].shape),)


@primitive("slice", _slice_fwd)
def _vjp_slice(g, out, args, needs, *, axis, start, stop):
    return (pad(g, axis=axis, start=start, total=args[0].shape[axis]),)


@primitive("pad", _pad_fwd)
def _vjp_pad(g, out, args, needs, *, axis, start, total):
    return (slice_(g, axis=axis, start=start, stop=start + args[0].shape[axis]),)


def _concat_fwd(*arrays, axis):
    return np.concatenate(arrays, axis=axis)


@primitive("concat", _concat_fwd)
def _vjp_concat(g, out, args, needs, *, axis):
    grads = []
    start = 0
    for a, need in zip(args, needs):
        stop = start + a.shape[axis]
        grads.append(slice_(g, axis=axis, start=start, stop=stop) if need else None)
        start = stop
    return tuple(grads)


# -- public op functions -----------------------------------------------------


def add(a, b) -> Var:
    return _apply("add", (a, b))


def sub(a, b) -> Var:
    return _apply("sub", (a, b))


def mul(a, b) -> Var:
    return _apply("mul", (a, b))


def div(a, b) -> Var:
    return _apply("div", (a, b))


def neg(a) -> Var:
    return _apply("neg", (a,))


def matmul(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _apply("matmul", (a, b))


def transpose(a) -> Var:
    return _apply("transpose", (a,))


def tanh(a) -> Var:
    return _apply("tanh", (a,))


def sigmoid(a) -> Var:
    return _apply("sigmoid", (a,))


def softplus(a) -> Var:
    return _apply("softplus", (a,))


def sqrt(a) -> Var:
    return _apply("sqrt", (a,))


def square(a) -> Var:
    return mul(a, a)


def sum_(a, axis: int | None = None) -> Var:
    """Sum over ``axis`` (kept as a size-1 axis) or over everything (0-d)."""
    return _apply("sum", (a,), axis=axis)


def mean(a, axis: int | None = None) -> Var:
    a = _as_var(a)
    n = a.value.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def broadcast_to(a, shape) -> Var:
    return _apply("broadcast_to", (a,), shape=tuple(shape))


def sum_to(a, shape) -> Var:
    return _apply("sum_to", (a,), shape=tuple(shape))


def reshape(a, shape) -> Var:
    return _apply("reshape", (a,), shape=tuple(shape))


def slice_(a, *, axis: int, start: int, stop: int) -> Var:
    return _apply("slice", (a,), axis=axis, start=start, stop=stop)


def pad(a, *, axis: int, start: int, total: int) -> Var:
    return _apply("pad", (a,), axis=axis, start=start, total=total)


def concat(items: Sequence, axis: int = 1) -> Var:
    return _apply("concat", tuple(items), axis=axis)


def grad(tape: Tape, wrt, *, create_graph: bool = False):
    """Gradient of the tape's final node, which must be a scalar."""
    if not tape.nodes:
        raise ValueError("empty tape")
    return tape.gradient(tape.root, wrt, create_graph=create_graph)


def vjp(tape: Tape, root: Var, cotangent, wrt):
    """Vector-Jacobian product ``cotangent . d root / d wrt``."""
    return tape.gradient(root, wrt, cotangent)
