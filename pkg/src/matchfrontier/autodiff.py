"""Minimal reverse-mode differentiation over numpy arrays, plus the
Adam-style optimizer with decoupled weight decay and the step-wise
learning-rate schedule.

The op set is exactly what the matching network and its losses need:
matmul, broadcast add/sub/mul/div, leaky ReLU, softplus, relu, elementwise
min, sum reductions, reshape/slice, and scalar combinations.  Subgradient
conventions at kinks are fixed: leaky ReLU uses the negative-side slope at
0, elementwise min routes ties to its first argument, and relu has slope 0
at 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LEAKY_SLOPE = 0.01


class TapeUsageError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tape:
    """Append-only record of one forward build; replay order is creation
    order, which is topological by construction."""

    def __init__(self):
        self.nodes = []
        self._backward_done = False

    def leaf(self, value) -> "Node":
        return Node(self, np.asarray(value, dtype=np.float64), (), None)

    def constant(self, value) -> "Node":
        # constants are leaves too; their gradients are simply never read
        return self.leaf(value)


class Node:
    __slots__ = ("tape", "value", "parents", "backprop", "grad")

    def __init__(self, tape, value, parents, backprop):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.backprop = backprop  # grad -> tuple of parent grads
        self.grad = None
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def _lift(self, other) -> "Node":
        if isinstance(other, Node):
            return other
        return self.tape.constant(other)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = self._lift(other)
        return Node(self.tape, self.value + other.value, (self, other),
                    lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        return Node(self.tape, self.value - other.value, (self, other),
                    lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)))

    def __rsub__(self, other):
        return self._lift(other).__sub__(self)

    def __neg__(self):
        return Node(self.tape, -self.value, (self,), lambda g: (-g,))

    def __mul__(self, other):
        other = self._lift(other)
        return Node(self.tape, self.value * other.value, (self, other),
                    lambda g: (_unbroadcast(g * other.value, self.shape),
                               _unbroadcast(g * self.value, other.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        return Node(self.tape, self.value / other.value, (self, other),
                    lambda g: (_unbroadcast(g / other.value, self.shape),
                               _unbroadcast(-g * self.value / (other.value ** 2),
                                            other.shape)))

    def __rtruediv__(self, other):
        return self._lift(other).__truediv__(self)

    def matmul(self, other):
        other = self._lift(other)
        return Node(self.tape, self.value @ other.value, (self, other),
                    lambda g: (g @ other.value.swapaxes(-1, -2),
                               self.value.swapaxes(-1, -2) @ g))

    __matmul__ = matmul

    # -- nonlinearities -----------------------------------------------------

    def leaky_relu(self, slope: float = LEAKY_SLOPE):
        factor = np.where(self.value > 0.0, 1.0, slope)
        return Node(self.tape, np.where(self.value > 0.0, self.value, slope * self.value),
                    (self,), lambda g: (g * factor,))

    def softplus(self):
        x = self.value
        sig = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                       np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return Node(self.tape, np.logaddexp(0.0, x), (self,), lambda g: (g * sig,))

    def relu(self):
        mask = self.value > 0.0
        return Node(self.tape, np.where(mask, self.value, 0.0), (self,),
                    lambda g: (g * mask,))

    def minimum(self, other):
        other = self._lift(other)
        take_self = self.value <= other.value  # ties go to the first branch
        return Node(self.tape, np.minimum(self.value, other.value), (self, other),
                    lambda g: (_unbroadcast(g * take_self, self.shape),
                               _unbroadcast(g * ~take_self, other.shape)))

    # -- shape / reduction --------------------------------------------------

    def transpose(self):
        return Node(self.tape, self.value.T, (self,), lambda g: (g.T,))

    def sum(self, axis=None, keepdims=False):
        def backprop(g):
            if axis is None:
                return (np.broadcast_to(g, self.shape).copy(),)
            g_exp = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g_exp, self.shape).copy(),)
        return Node(self.tape, self.value.sum(axis=axis, keepdims=keepdims),
                    (self,), backprop)

    def mean(self, axis=None):
        count = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis) / count

    def reshape(self, *shape):
        return Node(self.tape, self.value.reshape(*shape), (self,),
                    lambda g: (g.reshape(self.shape),))

    def __getitem__(self, key):
        def backprop(g):
            out = np.zeros(self.shape)
            out[key] = g
            return (out,)
        return Node(self.tape, self.value[key], (self,), backprop)


def backward(tape: Tape, output: Node) -> None:
    """Accumulate gradients for every node on the tape; read them off the
    leaves afterwards.  One backward pass per tape."""
    if tape._backward_done:
        raise TapeUsageError("backward already ran on this tape")
    if output.value.ndim != 0 and output.value.size != 1:
        raise TapeUsageError("backward requires a scalar output")
    tape._backward_done = True
    for node in tape.nodes:
        node.grad = np.zeros_like(node.value)
    output.grad = np.ones_like(output.value)
    for node in reversed(tape.nodes):
        if node.backprop is None or not np.any(node.grad):
            continue
        for parent, grad in zip(node.parents, node.backprop(node.grad)):
            parent.grad = parent.grad + grad


# ---------------------------------------------------------------------------
# Optimizer

@dataclass
class OptimizerState:
    """Adam with decoupled (multiplicative) weight decay.  Moments mirror
    the parameter structure: a list of (weight, bias) pairs."""

    lr: float
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr: float, weight_decay: float = 0.01) -> "OptimizerState":
        state = cls(lr=lr, weight_decay=weight_decay)
        state.m = [tuple(np.zeros_like(a) for a in group) for group in params]
        state.v = [tuple(np.zeros_like(a) for a in group) for group in params]
        return state


def adam_step(state: OptimizerState, params, grads):
    """One bias-corrected Adam update; weight decay is applied directly to
    the parameters, not folded into the gradients.  Returns the updated
    parameter list; the state is updated in place."""
    for group in grads:
        for g in group:
            if not np.all(np.isfinite(g)):
                raise NumericError("non-finite gradient; update aborted")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    new_params = []
    for i, (group, grad_group) in enumerate(zip(params, grads)):
        new_group = []
        for j, (param, grad) in enumerate(zip(group, grad_group)):
            m = state.beta1 * state.m[i][j] + (1.0 - state.beta1) * grad
            v = state.beta2 * state.v[i][j] + (1.0 - state.beta2) * grad * grad
            state.m[i] = state.m[i][:j] + (m,) + state.m[i][j + 1:]
            state.v[i] = state.v[i][:j] + (v,) + state.v[i][j + 1:]
            update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
            new_group.append(param * (1.0 - state.lr * state.weight_decay) - update)
        new_params.append(tuple(new_group))
    return new_params, state


def lr_schedule(base_lr: float, iteration: int, milestones) -> float:
    """Halve the learning rate at each milestone iteration."""
    return base_lr * 0.5 ** sum(1 for ms in sorted(milestones) if ms <= iteration)
