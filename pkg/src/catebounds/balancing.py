"""Distributional distances between treated and control representations.

Both metrics are composed from autodiff primitives, so their gradients with
respect to the representations are exact and available to the estimator loss.

- MMD: squared maximum mean discrepancy. Linear kernel by default (squared
  distance between empirical means); RBF with the median heuristic as option.
- Wasserstein: entropic optimal transport cost <P, C> with squared Euclidean
  cost, computed by log-domain Sinkhorn iterations unrolled through the tape.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, constant, logsumexp_last

__all__ = [
    "BalancingMetric",
    "BalancingConfig",
    "mmd",
    "sinkhorn_wasserstein",
    "balancing_penalty",
]


class BalancingMetric(enum.Enum):
    MMD = "mmd"
    WASSERSTEIN = "wasserstein"


@dataclass(frozen=True)
class BalancingConfig:
    metric: BalancingMetric = BalancingMetric.MMD
    alpha: float = 1.0
    kernel: str = "linear"          # "linear" | "rbf" (MMD only)
    sinkhorn_epsilon: float = 0.1
    sinkhorn_iters: int = 10

    def __post_init__(self):
        if self.alpha < 0.0:
            raise ValueError("alpha must be non-negative")
        if self.kernel not in ("linear", "rbf"):
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.sinkhorn_epsilon <= 0.0:
            raise ValueError("sinkhorn_epsilon must be positive")
        if self.sinkhorn_iters < 1:
            raise ValueError("sinkhorn_iters must be positive")


def _group_weights(weights, n: int) -> Tensor:
    """Normalise optional per-sample weights to sum 1; uniform when absent."""
    if weights is None:
        return constant(np.full((n, 1), 1.0 / n))
    w = as_tensor(weights)
    if w.ndim == 1:
        w = w.reshape(-1, 1)
    if np.any(w.data < 0.0):
        raise ValueError("weights must be non-negative")
    return w / w.sum()


def _pairwise_sq_dists(x: Tensor, y: Tensor) -> Tensor:
    xx = (x * x).sum(axis=1, keepdims=True)          # (n, 1)
    yy = (y * y).sum(axis=1, keepdims=True)          # (m, 1)
    cross = x @ _transpose(y)                         # (n, m)
    d2 = xx + _transpose(yy) - 2.0 * cross
    # rounding can push exact zeros slightly negative
    return d2.relu()


def _transpose(t: Tensor) -> Tensor:
    data = t.data.T

    def backward(g):
        t._accumulate(g.T)

    return Tensor._result(data, (t,), backward, "transpose")


def mmd(rep_a: Tensor | np.ndarray, rep_b: Tensor | np.ndarray, *,
        kernel: str = "linear", weights_a=None, weights_b=None,
        rbf_bandwidth: float | None = None) -> Tensor:
    """Squared MMD between two representation samples of shape (n_i, d).

    Linear kernel: || weighted_mean(a) - weighted_mean(b) ||^2. RBF kernel:
    biased V-statistic; bandwidth is the median pairwise squared distance of
    the pooled sample unless given explicitly, and is treated as a constant
    for gradients either way.
    """
    a, b = as_tensor(rep_a), as_tensor(rep_b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("representations must be 2-D with equal feature dim")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("empty representation group")
    wa = _group_weights(weights_a, a.shape[0])
    wb = _group_weights(weights_b, b.shape[0])
    if kernel == "linear":
        mean_a = (a * wa).sum(axis=0)
        mean_b = (b * wb).sum(axis=0)
        diff = mean_a - mean_b
        return (diff * diff).sum()
    if kernel != "rbf":
        raise ValueError(f"unknown kernel {kernel!r}")
    if rbf_bandwidth is None:
        pooled = np.concatenate([a.data, b.data], axis=0)
        d2 = (
            (pooled**2).sum(1)[:, None] + (pooled**2).sum(1)[None, :]
            - 2.0 * pooled @ pooled.T
        )
        med = np.median(d2[np.triu_indices_from(d2, k=1)]) if pooled.shape[0] > 1 else 1.0
        bandwidth = max(float(med), 1e-12)
    else:
        bandwidth = float(rbf_bandwidth)
        if bandwidth <= 0.0:
            raise ValueError("rbf_bandwidth must be positive")
    k_aa = (_pairwise_sq_dists(a, a) * (-1.0 / bandwidth)).exp()
    k_bb = (_pairwise_sq_dists(b, b) * (-1.0 / bandwidth)).exp()
    k_ab = (_pairwise_sq_dists(a, b) * (-1.0 / bandwidth)).exp()
    val = (
        (wa * k_aa * _transpose(wa)).sum()
        + (wb * k_bb * _transpose(wb)).sum()
        - 2.0 * (wa * k_ab * _transpose(wb)).sum()
    )
    return val.relu()  # V-statistic is >= 0 analytically; clamp float dust


def sinkhorn_wasserstein(
    rep_a: Tensor | np.ndarray,
    rep_b: Tensor | np.ndarray,
    *,
    epsilon: float = 0.1,
    iters: int = 10,
    weights_a=None,
    weights_b=None,
) -> Tensor:
    """Entropic OT cost <P, C> between two weighted point clouds.

    C is squared Euclidean distance. Potentials are computed by `iters`
    log-domain Sinkhorn updates; gradients flow through the unrolled loop.
    Non-finite potentials (non-convergent scaling) raise via the tape's checks.
    """
    a, b = as_tensor(rep_a), as_tensor(rep_b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("representations must be 2-D with equal feature dim")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("empty representation group")
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    wa = _group_weights(weights_a, a.shape[0])          # (n, 1), sums to 1
    wb = _group_weights(weights_b, b.shape[0])          # (m, 1)
    log_wa = constant(np.log(np.maximum(wa.data, 1e-300)))
    log_wb = constant(np.log(np.maximum(wb.data, 1e-300)))
    cost = _pairwise_sq_dists(a, b)                     # (n, m)
    f = constant(np.zeros((a.shape[0], 1)))
    g = constant(np.zeros((1, b.shape[0])))
    neg_cost = cost * (-1.0 / epsilon)
    for _ in range(iters):
        # f_i = -eps * LSE_j[(g_j - C_ij)/eps + log wb_j]
        f = logsumexp_last(neg_cost + g * (1.0 / epsilon) + _transpose(log_wb),
                           keepdims=True) * (-epsilon)
        g_col = logsumexp_last(
            _transpose(neg_cost) + _transpose(f) * (1.0 / epsilon) + _transpose(log_wa),
            keepdims=True,
        ) * (-epsilon)
        g = _transpose(g_col)
    log_plan = (f + g - cost) * (1.0 / epsilon) + log_wa + _transpose(log_wb)
    plan = log_plan.exp()
    return (plan * cost).sum()


def balancing_penalty(cfg: BalancingConfig, rep_treated, rep_control,
                      weights_treated=None, weights_control=None) -> Tensor:
    """Dispatch to the configured metric (weights optional, per group)."""
    if cfg.metric is BalancingMetric.MMD:
        return mmd(rep_treated, rep_control, kernel=cfg.kernel,
                   weights_a=weights_treated, weights_b=weights_control)
    return sinkhorn_wasserstein(
        rep_treated, rep_control,
        epsilon=cfg.sinkhorn_epsilon, iters=cfg.sinkhorn_iters,
        weights_a=weights_treated, weights_b=weights_control,
    )
