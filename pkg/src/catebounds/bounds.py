"""Treatment-effect intervals from a sensitivity parameter and outcome samples.

Under an odds-ratio sensitivity model with parameter Gamma >= 1, the worst-case
conditional outcome means are obtained by tilting the learned outcome density:
the lower (upper) mean re-weights the left (right) tail by 1/s_minus and the
rest by 1/s_plus, with the split at the quantile c_minus = 1/(1+Gamma)
(c_plus = Gamma/(1+Gamma)). On a sorted k-sample this is a weighted partial
mean; the order statistic at the split is divided between the two blocks in
proportion to the fractional part of k*c, which makes the estimator exact for
the empirical measure: Gamma = 1 collapses both bounds onto the sample mean,
bounds always sandwich the mean, and widths grow weakly in Gamma.

CATE bounds per point combine the per-arm means:
lower = mu1_lower - mu0_upper, upper = mu1_upper - mu0_lower.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .estimators import Stage0Model, predict_point_cate, representation
from .flow import ConditionalFlow
from .sensitivity import GammaField, PropensityModel, gamma_pointwise

__all__ = [
    "ShiftCoefficients",
    "shift_coefficients",
    "cvar_mu_bounds",
    "CateBounds",
    "cate_bounds",
    "read_bounds_csv",
    "write_bounds_csv",
]


@dataclass(frozen=True)
class ShiftCoefficients:
    """Tail weights and quantile splits for one (Gamma, pi) pair."""

    s_minus: float
    s_plus: float
    c_minus: float
    c_plus: float


def shift_coefficients(gamma: float, pi: float) -> ShiftCoefficients:
    """Coefficients of the extremal density tilts.

    s_minus = ((1-Gamma)*pi + Gamma)^-1, s_plus = ((1-1/Gamma)*pi + 1/Gamma)^-1,
    c_minus = 1/(1+Gamma), c_plus = Gamma/(1+Gamma). Requires Gamma >= 1 and
    pi in (0, 1). The weights satisfy (1/s_minus)*c_minus +
    (1/s_plus)*(1-c_minus) = 1 exactly.
    """
    if gamma < 1.0:
        raise ValueError("gamma must be >= 1")
    if not 0.0 < pi < 1.0:
        raise ValueError("pi must lie strictly inside (0, 1)")
    s_minus = 1.0 / ((1.0 - gamma) * pi + gamma)
    inv_gamma = 1.0 / gamma
    s_plus = 1.0 / ((1.0 - inv_gamma) * pi + inv_gamma)
    c_minus = 1.0 / (1.0 + gamma)
    c_plus = gamma / (1.0 + gamma)
    return ShiftCoefficients(s_minus, s_plus, c_minus, c_plus)


def _partial_mean(sorted_samples: np.ndarray, cut: np.ndarray,
                  low_w: np.ndarray, high_w: np.ndarray) -> np.ndarray:
    """Row-wise weighted mean with the low/high split at fractional rank `cut`.

    sorted_samples: (n, k) ascending rows. cut = k*c in [0, k]; the boundary
    order statistic is split between blocks by cut's fractional part. low_w and
    high_w are the per-row block weights (1/s values).
    """
    n, k = sorted_samples.shape
    cut = np.asarray(cut, dtype=np.float64)
    i0 = np.minimum(np.floor(cut).astype(np.int64), k)
    frac = cut - i0
    csum = np.cumsum(sorted_samples, axis=1)
    total = csum[:, -1]
    rows = np.arange(n)
    # sum of the first i0 entries (0 when i0 == 0)
    low_full = np.where(i0 > 0, csum[rows, np.maximum(i0 - 1, 0)], 0.0)
    boundary = np.where(i0 < k, sorted_samples[rows, np.minimum(i0, k - 1)], 0.0)
    low_sum = low_full + frac * boundary
    high_sum = total - low_sum
    return (low_w * low_sum + high_w * high_sum) / k


def cvar_mu_bounds(sorted_samples: np.ndarray, gamma: np.ndarray,
                   pi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Worst-case outcome-mean interval per row of a sorted sample matrix.

    sorted_samples: (n, k) or (k,), ascending. gamma and pi broadcast to (n,).
    Returns (mu_lower, mu_upper), each (n,) (scalars for 1-D input).
    """
    samples = np.asarray(sorted_samples, dtype=np.float64)
    squeeze = samples.ndim == 1
    if squeeze:
        samples = samples[None, :]
    if samples.ndim != 2 or samples.shape[1] < 1:
        raise ValueError("need a non-empty 2-D sample matrix")
    if np.any(np.diff(samples, axis=1) < 0.0):
        raise ValueError("samples must be sorted ascending")
    n, k = samples.shape
    gamma = np.broadcast_to(np.asarray(gamma, dtype=np.float64), (n,)).copy()
    pi = np.broadcast_to(np.asarray(pi, dtype=np.float64), (n,)).copy()
    if np.any(gamma < 1.0):
        raise ValueError("gamma must be >= 1")
    if np.any((pi <= 0.0) | (pi >= 1.0)):
        raise ValueError("pi must lie strictly inside (0, 1)")

    inv_gamma = 1.0 / gamma
    inv_s_minus = (1.0 - gamma) * pi + gamma          # >= 1
    inv_s_plus = (1.0 - inv_gamma) * pi + inv_gamma   # <= 1
    c_minus = 1.0 / (1.0 + gamma)
    c_plus = gamma / (1.0 + gamma)

    mu_lower = _partial_mean(samples, k * c_minus, inv_s_minus, inv_s_plus)
    mu_upper = _partial_mean(samples, k * c_plus, inv_s_plus, inv_s_minus)
    # at Gamma = 1 the tilt is the identity; pin the collapse to the sample
    # mean bitwise instead of leaving it to summation order
    identity = gamma == 1.0
    if np.any(identity):
        mean = samples.mean(axis=1)
        mu_lower = np.where(identity, mean, mu_lower)
        mu_upper = np.where(identity, mean, mu_upper)
    if squeeze:
        return float(mu_lower[0]), float(mu_upper[0])
    return mu_lower, mu_upper


@dataclass
class CateBounds:
    """Per-point treatment-effect interval with its ingredients."""

    point: np.ndarray        # stage-0 head difference
    lower: np.ndarray
    upper: np.ndarray
    gamma: np.ndarray
    pi1_phi: np.ndarray
    k: int


def cate_bounds(
    x: np.ndarray,
    model: Stage0Model,
    prop_x: PropensityModel,
    prop_phi: PropensityModel,
    gamma_field: GammaField,
    flow: ConditionalFlow,
    k: int,
    rng: np.random.Generator,
    *,
    gamma_override: np.ndarray | None = None,
    chunk: int = 128,
) -> CateBounds:
    """Interval bounds on the representation-level CATE at each row of `x`.

    Per point: read the representation, look up Gamma from the field (own
    pointwise value included), sample k outcomes per arm from the flow, and
    combine the per-arm extremal means. `gamma_override` replaces the field
    lookup (used for the Gamma = 1 collapse check).
    """
    if k < 1:
        raise ValueError("k must be positive")
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    phi = representation(model, x)
    point = predict_point_cate(model, x)
    pi1_phi = prop_phi.predict(phi)
    if gamma_override is not None:
        gamma = np.broadcast_to(np.asarray(gamma_override, dtype=np.float64),
                                (n,)).copy()
    else:
        pi1_x = prop_x.predict(x)
        gamma = gamma_field.at(phi, gamma_pointwise(pi1_x, pi1_phi))

    lower = np.empty(n)
    upper = np.empty(n)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        g = gamma[lo:hi]
        p1 = pi1_phi[lo:hi]
        s1 = flow.sample(np.ones(hi - lo), phi[lo:hi], k, rng)
        mu1_lo, mu1_hi = cvar_mu_bounds(s1, g, p1)
        s0 = flow.sample(np.zeros(hi - lo), phi[lo:hi], k, rng)
        mu0_lo, mu0_hi = cvar_mu_bounds(s0, g, 1.0 - p1)
        lower[lo:hi] = mu1_lo - mu0_hi
        upper[lo:hi] = mu1_hi - mu0_lo
    return CateBounds(point=point, lower=lower, upper=upper, gamma=gamma,
                      pi1_phi=pi1_phi, k=k)


def read_bounds_csv(path: str | Path) -> CateBounds:
    """Load a table written by write_bounds_csv. k is not stored in the
    file and comes back as 0."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        rows = list(reader)
    if header is None or header[:6] != ["id", "tau_hat", "lower", "upper",
                                        "gamma", "pi1_phi"]:
        raise ValueError(f"{path}: not a bounds table")
    cols = np.array([[float(v) for v in r[1:6]] for r in rows])
    if len(cols) == 0:
        raise ValueError(f"{path}: empty bounds table")
    return CateBounds(point=cols[:, 0], lower=cols[:, 1], upper=cols[:, 2],
                      gamma=cols[:, 3], pi1_phi=cols[:, 4], k=0)


def write_bounds_csv(path: str | Path, bounds: CateBounds,
                     decisions: Sequence[str] | None = None) -> None:
    """Per-point interval table: id, point, interval, Gamma, pi, decision."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["id", "tau_hat", "lower", "upper", "gamma", "pi1_phi"]
        if decisions is not None:
            header.append("decision")
        writer.writerow(header)
        for i in range(len(bounds.point)):
            row = [i, repr(float(bounds.point[i])), repr(float(bounds.lower[i])),
                   repr(float(bounds.upper[i])), repr(float(bounds.gamma[i])),
                   repr(float(bounds.pi1_phi[i]))]
            if decisions is not None:
                row.append(decisions[i])
            writer.writerow(row)
