"""Dense-network numerical kernel.

Matrices are plain 2-D float64 C-contiguous numpy arrays, batch-first
(rows = samples); that is the package-wide convention, so there is no
wrapper class. Layers hold weights as (out x in), biases as (out,).

The finite-difference gradient checker here is the correctness anchor for
every training path in the package: analytic gradients are never trusted
until they match central differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import backend as K
from .errors import GradientCheckError, ShapeError, TrainingError


class Activation(IntEnum):
    IDENTITY = K.IDENTITY
    RELU = K.RELU
    SIGMOID = K.SIGMOID
    SOFTPLUS = K.SOFTPLUS


def as_matrix(a, name: str = "array") -> np.ndarray:
    """Coerce to a C-contiguous float64 2-D array."""
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D matrix, got ndim={out.ndim}")
    return out


class DenseLayer:
    """One fully-connected layer: out = activation(x @ W.T + b).

    The activation is fixed at construction. `forward` caches what
    `backward` needs; a layer instance is therefore owned by one training
    loop at a time (inference via `apply` keeps no state).
    """

    def __init__(self, weights: np.ndarray, bias: np.ndarray, activation: Activation):
        self.w = as_matrix(weights, "weights")
        self.b = np.ascontiguousarray(bias, dtype=np.float64)
        if self.b.ndim != 1 or self.b.shape[0] != self.w.shape[0]:
            raise ShapeError(
                f"bias shape {self.b.shape} does not match weights {self.w.shape}"
            )
        self.activation = Activation(activation)
        self._x: np.ndarray | None = None
        self._pre: np.ndarray | None = None

    @property
    def out_dim(self) -> int:
        return self.w.shape[0]

    @property
    def in_dim(self) -> int:
        return self.w.shape[1]

    @classmethod
    def init(cls, in_dim: int, out_dim: int, activation: Activation,
             rng: np.random.Generator) -> "DenseLayer":
        """He-style uniform init: limit sqrt(6/fan_in), i.e. std sqrt(2/fan_in);
        zero bias."""
        limit = np.sqrt(6.0 / in_dim)
        w = rng.uniform(-limit, limit, size=(out_dim, in_dim))
        return cls(w, np.zeros(out_dim), activation)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Stateless forward pass (inference)."""
        x = as_matrix(x, "input")
        if x.shape[1] != self.in_dim:
            raise ShapeError(
                f"dense_forward: input shape {x.shape} incompatible with "
                f"weights {self.w.shape} (expected {x.shape[0]} x {self.in_dim})"
            )
        out, _ = K.dense_forward(x, self.w, self.b, int(self.activation))
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Forward pass that caches input and pre-activation for backward."""
        x = as_matrix(x, "input")
        if x.shape[1] != self.in_dim:
            raise ShapeError(
                f"dense_forward: input shape {x.shape} incompatible with "
                f"weights {self.w.shape} (expected {x.shape[0]} x {self.in_dim})"
            )
        out, pre = K.dense_forward(x, self.w, self.b, int(self.activation))
        self._x, self._pre = x, pre
        return out

    def backward(self, upstream: np.ndarray):
        """Gradients of the scalar loss w.r.t. input, weights and bias.

        `upstream` is dL/d(output of this layer), shaped like the forward
        output. No batch averaging happens here; the loss owns it.
        """
        if self._x is None or self._pre is None:
            raise GradientCheckError("backward called before forward")
        upstream = as_matrix(upstream, "upstream_grad")
        if upstream.shape != self._pre.shape:
            raise ShapeError(
                f"dense_backward: upstream grad shape {upstream.shape} does not "
                f"match forward output {self._pre.shape}"
            )
        return K.dense_backward(self._x, self._pre, self.w, int(self.activation), upstream)


@dataclass
class AdamState:
    """Per-parameter-block Adam accumulators. Single-owner per training run."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def _slot(self, name: str, param: np.ndarray):
        if name not in self.m:
            self.m[name] = np.zeros(param.size)
            self.v[name] = np.zeros(param.size)
        elif self.m[name].size != param.size:
            raise ShapeError(
                f"adam_step: accumulator for {name!r} has size {self.m[name].size}, "
                f"parameter has size {param.size}"
            )
        return self.m[name], self.v[name]


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> None:
    """One Adam update over named parameter blocks, in place.

    Defaults follow the usual lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8.
    """
    state.step += 1
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(
                f"adam_step: grad shape {g.shape} != param shape {p.shape} for {name!r}"
            )
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter block {name!r}")
        m, v = state._slot(name, p)
        K.adam_step_inplace(p.reshape(-1), np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
                            m, v, state.step, state.lr, state.beta1, state.beta2, state.epsilon)


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    tolerance: float
    per_block: dict[str, float]

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def gradient_check(loss_and_grad_fn, params: dict[str, np.ndarray],
                   h: float = 1e-5, tolerance: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    `loss_and_grad_fn(params) -> (loss, grads)` must be deterministic; the
    checker evaluates it twice up front and refuses to run otherwise. The
    relative error per coordinate is |a - fd| / max(|a| + |fd|, 1e-8), and
    the check passes iff the worst coordinate is below `tolerance`.
    """
    if h <= 0:
        raise GradientCheckError(f"step size h must be positive, got {h}")
    loss0, grads = loss_and_grad_fn(params)
    loss1, _ = loss_and_grad_fn(params)
    if loss0 != loss1:
        raise GradientCheckError(
            f"loss_fn is not deterministic: {loss0!r} != {loss1!r} on identical params"
        )

    max_rel = 0.0
    worst = ""
    per_block: dict[str, float] = {}
    for name, p in params.items():
        analytic = grads[name]
        flat = p.reshape(-1)
        block_worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up, _ = loss_and_grad_fn(params)
            flat[i] = orig - h
            down, _ = loss_and_grad_fn(params)
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            rel = abs(a - fd) / max(abs(a) + abs(fd), 1e-8)
            if rel > block_worst:
                block_worst = rel
            if rel > max_rel:
                max_rel = rel
                worst = f"{name}[{i}]"
        per_block[name] = block_worst
    return GradCheckReport(max_rel_error=max_rel, worst_param=worst,
                           tolerance=tolerance, per_block=per_block)
