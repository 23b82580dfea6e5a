"""Fully connected building blocks: one-hidden-layer MLPs, optimizers, checks.

Every network in the pipeline is a single-hidden-layer MLP. Initialization is
uniform He-style fan-in scaling with zero biases, drawn from a dedicated
`numpy` generator per network so that a seed fixes the run bitwise.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import NonFiniteError, Tensor, as_tensor

__all__ = [
    "Activation",
    "MlpConfig",
    "Mlp",
    "forward_mlp",
    "backward_gradients",
    "AdamW",
    "SgdMomentum",
    "optimizer_step",
    "TrainRun",
    "GradCheckReport",
    "grad_check",
    "finite_difference_check",
    "MinibatchSampler",
]


class Activation(enum.Enum):
    """Network flavour: hidden nonlinearity and optional output squashing."""

    ELU = "elu"                       # ELU hidden, linear output
    RELU = "relu"                     # ReLU hidden, linear output
    SIGMOID_OUTPUT = "sigmoid_output" # ELU hidden, sigmoid output
    IDENTITY = "identity"             # linear throughout


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_units: int
    output_dim: int
    activation: Activation = Activation.ELU
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        if self.hidden_units < 1:
            raise ValueError("hidden_units must be positive")


def _init_weight(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Mlp:
    """One-hidden-layer perceptron with explicit parameter tensors."""

    def __init__(self, cfg: MlpConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.w1 = Tensor(_init_weight(rng, cfg.input_dim, cfg.hidden_units), requires_grad=True)
        self.b1 = Tensor(np.zeros(cfg.hidden_units), requires_grad=True)
        self.w2 = Tensor(_init_weight(rng, cfg.hidden_units, cfg.output_dim), requires_grad=True)
        self.b2 = Tensor(np.zeros(cfg.output_dim), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, x) -> Tensor:
        return forward_mlp(self.cfg, self.parameters(), x)

    def zero_output_layer(self) -> None:
        """Zero the output layer (used to start flows at the identity map)."""
        self.w2.data[:] = 0.0
        self.b2.data[:] = 0.0

    def param_arrays(self) -> list[list]:
        return [p.data.tolist() for p in self.parameters()]

    def load_param_arrays(self, arrays: Sequence) -> None:
        for p, a in zip(self.parameters(), arrays, strict=True):
            arr = np.asarray(a, dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError("checkpoint parameter shape mismatch")
            p.data = arr


def forward_mlp(cfg: MlpConfig, params: Sequence[Tensor], x) -> Tensor:
    """Forward pass `x @ W1 + b1 -> activation -> @ W2 + b2 (-> sigmoid)`.

    `x` may be an ndarray or Tensor of shape (n, input_dim).
    """
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ValueError(
            f"expected input of shape (n, {cfg.input_dim}), got {x.shape}"
        )
    w1, b1, w2, b2 = params
    z1 = x @ w1 + b1
    if cfg.activation in (Activation.ELU, Activation.SIGMOID_OUTPUT):
        h = z1.elu()
    elif cfg.activation is Activation.RELU:
        h = z1.relu()
    else:
        h = z1
    out = h @ w2 + b2
    if cfg.activation is Activation.SIGMOID_OUTPUT:
        out = out.sigmoid()
    return out


def backward_gradients(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradient of a scalar loss for every parameter; unreachable ones get zero."""
    for p in params:
        p.zero_grad()
    loss.backward()
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        weight_decay: float = 0.0,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        if lr <= 0.0:
            raise ValueError("learning rate must be positive")
        if weight_decay < 0.0:
            raise ValueError("weight decay must be non-negative")
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        b1, b2 = self.betas
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteError("non-finite gradient in optimizer step")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / (1.0 - b1**self.t)
            v_hat = self.v[i] / (1.0 - b2**self.t)
            p.data = p.data - self.lr * (
                m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data
            )


class SgdMomentum:
    """SGD with heavy-ball momentum 0.9 and optional L2 weight decay."""

    def __init__(self, params: Sequence[Tensor], lr: float, weight_decay: float = 0.0,
                 momentum: float = 0.9):
        if lr <= 0.0:
            raise ValueError("learning rate must be positive")
        if weight_decay < 0.0:
            raise ValueError("weight decay must be non-negative")
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteError("non-finite gradient in optimizer step")
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.velocity[i] = self.momentum * self.velocity[i] + g
            p.data = p.data - self.lr * self.velocity[i]


def optimizer_step(state: AdamW | SgdMomentum, params: Sequence[Tensor],
                   grads: Sequence[np.ndarray]) -> None:
    """Apply one update with explicit gradients (functional entry point)."""
    if list(params) != state.params:
        raise ValueError("params do not match the optimizer state")
    for p, g in zip(params, grads, strict=True):
        p.grad = np.asarray(g, dtype=np.float64)
    state.step()


@dataclass
class TrainRun:
    """Hyperparameters of one training run (loss traces live on the models)."""

    batch_size: int = 64
    learning_rate: float = 0.01
    weight_decay: float = 0.0
    n_iter: int = 5000
    # separate optimizer settings for a jointly trained propensity subnet
    prop_learning_rate: float | None = None
    prop_weight_decay: float | None = None
    # flow-training divergence guard
    divergence_factor: float = 10.0
    divergence_patience: int = 500

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be non-negative")
        if self.n_iter < 1:
            raise ValueError("n_iter must be positive")


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    per_param: list[float] = field(default_factory=list)


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    tolerance: float,
    h: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar `f()` with central differences."""
    loss = f()
    analytic = backward_gradients(loss, params)
    per_param: list[float] = []
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.ravel()
        num = np.zeros_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = float(f().data)
            flat[j] = orig - h
            down = float(f().data)
            flat[j] = orig
            num[j] = (up - down) / (2.0 * h)
        a_flat = a.ravel()
        denom = np.maximum(np.maximum(np.abs(a_flat), np.abs(num)), 1e-6)
        rel = float(np.max(np.abs(a_flat - num) / denom)) if flat.size else 0.0
        per_param.append(rel)
        worst = max(worst, rel)
    return GradCheckReport(max_rel_error=worst, passed=worst < tolerance,
                           per_param=per_param)


def grad_check(
    net: Mlp,
    x: np.ndarray,
    tolerance: float = 1e-4,
    loss_fn: Callable[[Tensor], Tensor] | None = None,
    h: float = 1e-5,
) -> GradCheckReport:
    """Finite-difference check of a network's parameter gradients.

    The default probe loss is mean(out^2), which exercises every unit.
    """
    x = np.asarray(x, dtype=np.float64)
    if loss_fn is None:
        loss_fn = lambda out: (out * out).mean()

    def f() -> Tensor:
        return loss_fn(net(x))

    return finite_difference_check(f, net.parameters(), tolerance, h=h)


class MinibatchSampler:
    """Shuffled without-replacement minibatches, reshuffling every epoch."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("empty dataset")
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._order = rng.permutation(n)
        self._pos = 0

    def next_indices(self) -> np.ndarray:
        if self._pos + self.batch_size > self.n:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx
