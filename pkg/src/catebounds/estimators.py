"""Representation-learning CATE estimators (stage 0 of the pipeline).

All estimators share one architecture family: a representation net
phi: R^d_x -> R^d_phi followed by outcome heads, trained on factual outcomes
with AdamW. Variants differ in heads, auxiliary nets, balancing penalties, and
loss re-weighting:

- tarnet: two outcome heads on a shared representation, plain factual MSE.
- bnn: a single outcome head with two outputs, MMD balancing with fixed
  alpha = 0.1.
- cfr: tarnet plus a balancing penalty (MMD or Wasserstein) scaled by alpha.
- inv_tarnet: tarnet plus a decoder head and a reconstruction loss.
- rcfr: cfr plus a trainable re-weighting net (softplus output, normalized to
  batch mean 1) entering the MSE and the balancing term.
- cfr_isw: cfr plus a jointly trained representation-propensity net (own
  optimizer settings); inverse-propensity-style weights, clamped to [0.1, 10],
  enter the factual MSE as constants.
- bwcfr: cfr plus a jointly trained covariate-propensity net; overlap weights
  pi(1-a | x) enter the factual MSE as constants.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .autodiff import Tensor, constant, no_grad, take_along_last, take_rows
from .balancing import BalancingConfig, BalancingMetric, balancing_penalty
from .nets import Activation, AdamW, MinibatchSampler, Mlp, MlpConfig, TrainRun

__all__ = [
    "EstimatorKind",
    "EstimatorConfig",
    "Stage0Model",
    "build_stage0",
    "stage0_loss",
    "train_stage0",
    "predict_point_cate",
    "predict_heads",
    "representation",
    "PROPENSITY_CLIP",
    "ISW_WEIGHT_CLIP",
]

PROPENSITY_CLIP = (0.01, 0.99)
ISW_WEIGHT_CLIP = (0.1, 10.0)


class EstimatorKind(enum.Enum):
    TARNET = "tarnet"
    BNN = "bnn"
    CFR = "cfr"
    INV_TARNET = "inv_tarnet"
    RCFR = "rcfr"
    CFR_ISW = "cfr_isw"
    BWCFR = "bwcfr"


_NEEDS_BALANCING = {EstimatorKind.BNN, EstimatorKind.CFR, EstimatorKind.RCFR,
                    EstimatorKind.CFR_ISW, EstimatorKind.BWCFR}


@dataclass(frozen=True)
class EstimatorConfig:
    kind: EstimatorKind
    d_x: int
    d_phi: int
    rep_hidden: int
    head_hidden: int
    balancing: BalancingConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.d_x < 1 or self.d_phi < 1:
            raise ValueError("d_x and d_phi must be positive")
        if self.rep_hidden < 1 or self.head_hidden < 1:
            raise ValueError("hidden sizes must be positive")
        if self.kind in _NEEDS_BALANCING and self.balancing is None:
            raise ValueError(f"{self.kind.value} requires a balancing config")
        if self.kind is EstimatorKind.BNN:
            b = self.balancing
            if b.metric is not BalancingMetric.MMD or b.alpha != 0.1:
                raise ValueError("bnn uses MMD balancing with alpha fixed at 0.1")


def _subnet_seeds(seed: int) -> dict[str, int]:
    names = ["phi", "head0", "head1", "snet", "decoder", "weight",
             "prop_phi", "prop_x", "shuffle"]
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


@dataclass
class Stage0Model:
    config: EstimatorConfig
    phi_net: Mlp
    head0: Mlp | None = None
    head1: Mlp | None = None
    snet: Mlp | None = None
    decoder: Mlp | None = None
    weight_net: Mlp | None = None
    prop_phi_net: Mlp | None = None
    prop_x_net: Mlp | None = None
    shuffle_seed: int = 0
    trained: bool = False
    loss_trace: list[float] = field(default_factory=list)

    # -- parameter bookkeeping -------------------------------------------------

    def _subnets(self) -> dict[str, Mlp]:
        nets = {"phi": self.phi_net}
        for name in ("head0", "head1", "snet", "decoder", "weight",
                     "prop_phi", "prop_x"):
            attr = {"weight": "weight_net", "prop_phi": "prop_phi_net",
                    "prop_x": "prop_x_net"}.get(name, name)
            net = getattr(self, attr)
            if net is not None:
                nets[name] = net
        return nets

    def main_parameters(self) -> list[Tensor]:
        """Parameters driven by the factual loss (everything but cfr_isw's
        propensity net, which has its own optimizer settings)."""
        params: list[Tensor] = []
        for name, net in self._subnets().items():
            if name == "prop_phi" and self.config.kind is EstimatorKind.CFR_ISW:
                continue
            params.extend(net.parameters())
        return params

    def prop_parameters(self) -> list[Tensor]:
        return self.prop_phi_net.parameters() if self.prop_phi_net else []

    def parameters(self) -> list[Tensor]:
        return [p for net in self._subnets().values() for p in net.parameters()]

    # -- inference -------------------------------------------------------------

    def _head_outputs(self, rep: Tensor) -> tuple[Tensor, Tensor]:
        if self.config.kind is EstimatorKind.BNN:
            out = self.snet(rep)
            n = out.shape[0]
            m0 = take_along_last(out, np.zeros((n, 1), dtype=np.intp))
            m1 = take_along_last(out, np.ones((n, 1), dtype=np.intp))
            return m0, m1
        return self.head0(rep), self.head1(rep)

    # -- serialization ---------------------------------------------------------

    def to_checkpoint(self) -> dict:
        cfg = self.config
        bal = None
        if cfg.balancing is not None:
            bal = {
                "metric": cfg.balancing.metric.value,
                "alpha": cfg.balancing.alpha,
                "kernel": cfg.balancing.kernel,
                "sinkhorn_epsilon": cfg.balancing.sinkhorn_epsilon,
                "sinkhorn_iters": cfg.balancing.sinkhorn_iters,
            }
        return {
            "kind": cfg.kind.value,
            "config": {
                "d_x": cfg.d_x,
                "d_phi": cfg.d_phi,
                "rep_hidden": cfg.rep_hidden,
                "head_hidden": cfg.head_hidden,
                "seed": cfg.seed,
                "balancing": bal,
            },
            "params": {name: net.param_arrays()
                       for name, net in self._subnets().items()},
            "loss_trace": self.loss_trace,
            "trained": self.trained,
        }

    @staticmethod
    def from_checkpoint(payload: dict) -> "Stage0Model":
        kind = EstimatorKind(payload["kind"])
        raw = payload["config"]
        bal = None
        if raw.get("balancing") is not None:
            b = raw["balancing"]
            bal = BalancingConfig(
                metric=BalancingMetric(b["metric"]), alpha=b["alpha"],
                kernel=b["kernel"], sinkhorn_epsilon=b["sinkhorn_epsilon"],
                sinkhorn_iters=b["sinkhorn_iters"],
            )
        model = build_stage0(EstimatorConfig(
            kind=kind, d_x=raw["d_x"], d_phi=raw["d_phi"],
            rep_hidden=raw["rep_hidden"], head_hidden=raw["head_hidden"],
            balancing=bal, seed=raw["seed"],
        ))
        for name, arrays in payload["params"].items():
            model._subnets()[name].load_param_arrays(arrays)
        model.loss_trace = list(payload.get("loss_trace", []))
        model.trained = bool(payload.get("trained", False))
        return model


def build_stage0(config: EstimatorConfig) -> Stage0Model:
    """Instantiate the subnetworks for `config.kind` under the seed protocol."""
    seeds = _subnet_seeds(config.seed)
    k = config.kind
    phi_net = Mlp(MlpConfig(config.d_x, config.rep_hidden, config.d_phi,
                            seed=seeds["phi"]))
    model = Stage0Model(config=config, phi_net=phi_net,
                        shuffle_seed=seeds["shuffle"])
    if k is EstimatorKind.BNN:
        model.snet = Mlp(MlpConfig(config.d_phi, config.head_hidden, 2,
                                   seed=seeds["snet"]))
    else:
        model.head0 = Mlp(MlpConfig(config.d_phi, config.head_hidden, 1,
                                    seed=seeds["head0"]))
        model.head1 = Mlp(MlpConfig(config.d_phi, config.head_hidden, 1,
                                    seed=seeds["head1"]))
    if k is EstimatorKind.INV_TARNET:
        model.decoder = Mlp(MlpConfig(config.d_phi, config.rep_hidden, config.d_x,
                                      seed=seeds["decoder"]))
    if k is EstimatorKind.RCFR:
        model.weight_net = Mlp(MlpConfig(config.d_phi, config.head_hidden, 1,
                                         seed=seeds["weight"]))
    if k is EstimatorKind.CFR_ISW:
        model.prop_phi_net = Mlp(MlpConfig(config.d_phi, config.head_hidden, 1,
                                           seed=seeds["prop_phi"]))
    if k is EstimatorKind.BWCFR:
        model.prop_x_net = Mlp(MlpConfig(config.d_x, config.rep_hidden, 1,
                                         seed=seeds["prop_x"]))
    return model


def _bce_logits(logits: Tensor, a: np.ndarray) -> Tensor:
    """Numerically stable mean BCE: softplus(z) - a*z on raw logits."""
    a_col = constant(a.reshape(-1, 1))
    return (logits.softplus() - a_col * logits).mean()


def _isw_weights(model: Stage0Model, rep_data: np.ndarray, a: np.ndarray) -> np.ndarray:
    with no_grad():
        logits = model.prop_phi_net(rep_data).data[:, 0]
    p1 = np.clip(expit(logits), *PROPENSITY_CLIP)
    p_a = np.where(a == 1, p1, 1.0 - p1)
    p_not_a = 1.0 - p_a
    marg1 = float(np.clip(a.mean(), *PROPENSITY_CLIP))
    marg_a = np.where(a == 1, marg1, 1.0 - marg1)
    marg_not_a = 1.0 - marg_a
    w = 1.0 + (marg_not_a / marg_a) * (p_not_a / p_a)
    return np.clip(w, *ISW_WEIGHT_CLIP)


def _overlap_weights(model: Stage0Model, x: np.ndarray, a: np.ndarray) -> np.ndarray:
    with no_grad():
        logits = model.prop_x_net(x).data[:, 0]
    p1 = np.clip(expit(logits), *PROPENSITY_CLIP)
    return np.where(a == 1, 1.0 - p1, p1)


def stage0_loss(model: Stage0Model, x: np.ndarray, a: np.ndarray,
                y: np.ndarray) -> tuple[Tensor, dict[str, float]]:
    """Training loss on one batch plus a breakdown of its parts.

    Returns (loss, parts); parts holds floats for mse / balancing /
    reconstruction / bce / mean_weight. A batch that happens to contain a
    single treatment group skips the balancing term for that step.
    """
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    kind = model.config.kind
    rep = model.phi_net(x)
    m0, m1 = model._head_outputs(rep)
    a_col = constant(a.reshape(-1, 1))
    pred = a_col * m1 + (1.0 - a_col) * m0
    sq = (pred - constant(y.reshape(-1, 1))) ** 2

    parts: dict[str, float] = {}
    weights_t: Tensor | None = None
    if kind is EstimatorKind.RCFR:
        raw_w = model.weight_net(rep).softplus()
        weights_t = raw_w / raw_w.mean()
        parts["mean_weight"] = float(weights_t.data.mean())
        mse = (weights_t * sq).mean()
    elif kind is EstimatorKind.CFR_ISW:
        w = _isw_weights(model, rep.data, a)
        parts["mean_weight"] = float(w.mean())
        mse = (constant(w.reshape(-1, 1)) * sq).mean()
    elif kind is EstimatorKind.BWCFR:
        w = _overlap_weights(model, x, a)
        parts["mean_weight"] = float(w.mean())
        mse = (constant(w.reshape(-1, 1)) * sq).mean()
    else:
        mse = sq.mean()
    parts["mse"] = float(mse.data)
    loss = mse

    bal = model.config.balancing
    if bal is not None and bal.alpha > 0.0:
        idx1 = np.flatnonzero(a == 1)
        idx0 = np.flatnonzero(a == 0)
        if len(idx1) > 0 and len(idx0) > 0:
            w1 = w0 = None
            if weights_t is not None:
                w1 = take_rows(weights_t, idx1)
                w0 = take_rows(weights_t, idx0)
            pen = balancing_penalty(bal, take_rows(rep, idx1), take_rows(rep, idx0),
                                    weights_treated=w1, weights_control=w0)
            parts["balancing"] = float(pen.data)
            loss = loss + bal.alpha * pen

    if kind is EstimatorKind.INV_TARNET:
        recon = model.decoder(rep)
        l_rec = ((recon - constant(x)) ** 2).mean()
        parts["reconstruction"] = float(l_rec.data)
        loss = loss + l_rec

    if kind is EstimatorKind.CFR_ISW:
        logits = model.prop_phi_net(rep.detach())
        bce = _bce_logits(logits, a)
        parts["bce"] = float(bce.data)
        loss = loss + bce
    elif kind is EstimatorKind.BWCFR:
        logits = model.prop_x_net(constant(x))
        bce = _bce_logits(logits, a)
        parts["bce"] = float(bce.data)
        loss = loss + bce

    return loss, parts


def train_stage0(model: Stage0Model, x: np.ndarray, a: np.ndarray, y: np.ndarray,
                 run: TrainRun) -> Stage0Model:
    """Minibatch AdamW training of all stage-0 subnetworks."""
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or x.shape[1] != model.config.d_x:
        raise ValueError(f"expected covariates of shape (n, {model.config.d_x})")
    if not (len(x) == len(a) == len(y)):
        raise ValueError("x, a, y must have equal length")
    if not np.all(np.isin(a, (0.0, 1.0))):
        raise ValueError("treatment must be binary")
    if a.min() == a.max():
        raise ValueError("dataset has a single treatment group")

    optimizers = [AdamW(model.main_parameters(), lr=run.learning_rate,
                        weight_decay=run.weight_decay)]
    if model.config.kind is EstimatorKind.CFR_ISW:
        optimizers.append(AdamW(
            model.prop_parameters(),
            lr=run.prop_learning_rate or run.learning_rate,
            weight_decay=(run.prop_weight_decay
                          if run.prop_weight_decay is not None
                          else run.weight_decay),
        ))
    sampler = MinibatchSampler(len(x), run.batch_size,
                               np.random.default_rng(model.shuffle_seed))
    model.loss_trace = []
    for _ in range(run.n_iter):
        idx = sampler.next_indices()
        for p in model.parameters():
            p.zero_grad()
        loss, _ = stage0_loss(model, x[idx], a[idx], y[idx])
        loss.backward()
        for opt in optimizers:
            opt.step()
        model.loss_trace.append(float(loss.data))
    model.trained = True
    return model


def representation(model: Stage0Model, x: np.ndarray) -> np.ndarray:
    with no_grad():
        return model.phi_net(np.asarray(x, dtype=np.float64)).data


def predict_heads(model: Stage0Model, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Potential-outcome head predictions (mu0_hat, mu1_hat), each (n,)."""
    with no_grad():
        rep = model.phi_net(np.asarray(x, dtype=np.float64))
        m0, m1 = model._head_outputs(rep)
        return m0.data[:, 0], m1.data[:, 0]


def predict_point_cate(model: Stage0Model, x: np.ndarray) -> np.ndarray:
    m0, m1 = predict_heads(model, x)
    return m1 - m0
