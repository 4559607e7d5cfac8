"""Tape-based reverse-mode differentiation, parameters and the AdamW optimizer."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import ContractError, OracleError, TrainingError


class Var:
    """Handle to one value slot of a :class:`Tape`."""

    __slots__ = ("tape", "slot")

    def __init__(self, tape: "Tape", slot: int):
        self.tape = tape
        self.slot = slot

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.slot]

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Var(slot={self.slot}, shape={self.shape})"

    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)


class Node(NamedTuple):
    op: str
    inputs: tuple
    output: int
    vjp: Callable


class Tape:
    """Records operator applications; :meth:`backward` replays them in reverse."""

    def __init__(self):
        self.values: list = []
        self.nodes: list[Node] = []
        self.leaves: list[int] = []
        self.names: dict[int, str] = {}

    def leaf(self, value, name: str | None = None) -> Var:
        value = np.asarray(value)
        if value.dtype.kind != "f":
            value = value.astype(np.float64)
        self.values.append(value)
        slot = len(self.values) - 1
        self.leaves.append(slot)
        if name is not None:
            self.names[slot] = name
        return Var(self, slot)

    def record(self, op: str, inputs, value, vjp) -> Var:
        """Append the result of ``op``.

        ``inputs`` holds Vars (differentiable) or None; ``vjp(g)`` returns one
        gradient per input, ``None`` where the input is not a Var.
        """
        self.values.append(value)
        slot = len(self.values) - 1
        in_slots = tuple(v.slot if isinstance(v, Var) else None for v in inputs)
        self.nodes.append(Node(op, in_slots, slot, vjp))
        return Var(self, slot)

    def backward(self, loss: Var, grad_output=None) -> "Gradients":
        return backward(self, loss, grad_output)


class Gradients:
    """Gradient lookup by Var, slot or leaf name."""

    def __init__(self, tape: Tape, grads: dict):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, key) -> np.ndarray:
        slot = key.slot if isinstance(key, Var) else key
        g = self._grads.get(slot)
        if g is None:
            return np.zeros_like(self._tape.values[slot])
        return g

    def by_name(self) -> dict:
        return {name: self[slot] for slot, name in self._tape.names.items()}


def backward(tape: Tape, loss: Var, grad_output=None) -> Gradients:
    """Propagate gradients from the scalar ``loss`` to every slot.

    Nodes are visited once each in reverse recording order; contributions to a
    slot are summed in that order, which keeps the result deterministic.
    """
    if loss.tape is not tape:
        raise ContractError("loss belongs to a different tape")
    value = tape.values[loss.slot]
    if value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {value.shape}")
    seed = np.ones_like(value) if grad_output is None else np.asarray(grad_output, value.dtype).reshape(value.shape)
    grads = {loss.slot: seed}
    for node in reversed(tape.nodes):
        g = grads.get(node.output)
        if g is None:
            continue
        if node.output != loss.slot:
            # intermediate gradients are no longer needed once consumed
            del grads[node.output]
        contribs = node.vjp(g)
        for slot, c in zip(node.inputs, contribs):
            if slot is None or c is None:
                continue
            prev = grads.get(slot)
            grads[slot] = c if prev is None else prev + c
    return Gradients(tape, grads)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray


@dataclass
class ParamStore:
    """Named parameters with gradient accumulators and AdamW moments."""

    dtype: type = np.float32
    params: dict = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise ContractError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=self.dtype)
        self.params[name] = Param(value, np.zeros_like(value), np.zeros_like(value),
                                  np.zeros_like(value))
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name].value

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list:
        return list(self.params)

    def num_values(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def set(self, name: str, value) -> None:
        p = self.params[name]
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != p.value.shape:
            raise ContractError(f"{name}: shape {value.shape} != {p.value.shape}")
        p.value[...] = value

    def bind(self, tape: Tape) -> "Binding":
        return Binding(self, tape)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad[...] = 0

    def astype(self, dtype) -> "ParamStore":
        """Copy with every tensor cast to ``dtype`` (optimizer state included)."""
        out = ParamStore(dtype=dtype, step=self.step)
        for name, p in self.params.items():
            out.params[name] = Param(*(a.astype(dtype) for a in (p.value, p.grad, p.m, p.v)))
        return out


class Binding:
    """Lazily exposes store parameters as tape leaves."""

    def __init__(self, store: ParamStore, tape: Tape):
        self.store = store
        self.tape = tape
        self._vars: dict = {}

    def __getitem__(self, name: str) -> Var:
        var = self._vars.get(name)
        if var is None:
            if name not in self.store.params:
                raise KeyError(f"unknown parameter {name!r}")
            var = self.tape.leaf(self.store.params[name].value, name)
            self._vars[name] = var
        return var

    def get(self, name: str):
        return self[name] if name in self.store.params else None

    def accumulate(self, grads: Gradients) -> None:
        """Add the tape gradients of every bound parameter into the store."""
        for name, var in self._vars.items():
            p = self.store.params[name]
            p.grad += grads[var].astype(p.grad.dtype, copy=False)


def adamw_step(store: ParamStore, lr: float, weight_decay: float = 0.01,
               betas=(0.9, 0.999), eps: float = 1e-8) -> ParamStore:
    """Decoupled-weight-decay Adam update; zeroes the gradients afterwards."""
    for name, p in store.params.items():
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
    b1, b2 = betas
    store.step += 1
    t = store.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p in store.params.values():
        g = p.grad
        if weight_decay:
            p.value *= p.value.dtype.type(1.0 - lr * weight_decay)
        p.m *= b1
        p.m += (1.0 - b1) * g
        p.v *= b2
        p.v += (1.0 - b2) * g * g
        m_hat = p.m / c1
        v_hat = p.v / c2
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype, copy=False)
        g[...] = 0
    return store


def poly_lr(base_lr: float, step: int, total_steps: int, power: float = 0.9) -> float:
    """Polynomial decay ``base_lr * (1 - step/total)**power``, floored at zero."""
    if total_steps <= 0:
        return base_lr
    frac = min(max(step / total_steps, 0.0), 1.0)
    return base_lr * (1.0 - frac) ** power


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class FDReport:
    max_rel_err: float
    checked: int
    worst_index: tuple
    analytic: np.ndarray
    numeric: np.ndarray

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def finite_diff_check(f, theta, step: float = 1e-5, samples: int | None = 20,
                      rng=None) -> FDReport:
    """Compare tape gradients of ``f`` with central differences.

    ``f(tape, theta_var)`` must return a scalar Var.  ``theta`` must be
    float64.  ``samples=None`` checks every entry.
    """
    theta = np.asarray(theta)
    if theta.dtype != np.float64:
        raise ContractError("finite_diff_check needs 64-bit parameters")

    def value_at(t):
        tape = Tape()
        return float(f(tape, tape.leaf(t)).value.reshape(()))

    tape = Tape()
    var = tape.leaf(theta.copy())
    loss = f(tape, var)
    analytic_full = tape.backward(loss)[var]
    base = float(loss.value.reshape(()))
    if value_at(theta.copy()) != base:
        raise OracleError("function is not deterministic across evaluations")

    flat = theta.reshape(-1)
    if samples is None or samples >= flat.size:
        idx = np.arange(flat.size)
    else:
        rng = np.random.default_rng(rng)
        idx = np.sort(rng.choice(flat.size, size=samples, replace=False))
    numeric = np.empty(idx.size)
    for n, k in enumerate(idx):
        plus = flat.copy()
        minus = flat.copy()
        plus[k] += step
        minus[k] -= step
        numeric[n] = (value_at(plus.reshape(theta.shape))
                      - value_at(minus.reshape(theta.shape))) / (2 * step)
    analytic = analytic_full.reshape(-1)[idx]
    err = relative_error(analytic, numeric)
    worst = int(np.argmax(err)) if err.size else 0
    return FDReport(float(err.max()) if err.size else 0.0, int(idx.size),
                    np.unravel_index(idx[worst], theta.shape) if err.size else (),
                    analytic, numeric)
