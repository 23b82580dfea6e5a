"""Experiment orchestration: configs, tuning, staged pipelines, results.

A run goes: load/generate one train/test pair -> (optionally) tune each
stage by randomized grid search with stratified 5-fold CV -> per seed, train
stage 0, the two propensity nets, and the flow -> build the per-delta
sensitivity fields -> bound the CATE on the test split -> score the point
and interval policies -> persist per-point CSVs, checkpoints, and aggregate
tables. Everything downstream of the config is seed-deterministic, so a
re-run with the same config reproduces every emitted number.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import NonFiniteError, Tensor, no_grad
from .balancing import BalancingConfig, BalancingMetric
from .bounds import cate_bounds, read_bounds_csv, write_bounds_csv
from .data import (Dataset, HcMnistConfig, build_hcmnist, gen_synthetic,
                   load_ihdp_csv, parse_idx, synthetic_tau)
from .estimators import (EstimatorConfig, EstimatorKind, Stage0Model,
                         build_stage0, predict_heads, predict_point_cate,
                         representation, train_stage0)
from .evaluation import (Decision, PolicyReport, bounds_policy, make_grid,
                         point_policy, rpehe, score_policy,
                         write_decision_grid_csv, write_er_dr_curve_csv)
from .flow import (ConditionalFlow, FlowConfig, FlowDivergenceError, train_cnf)
from .nets import TrainRun
from .sensitivity import (DELTA_PRESETS, PropensityModel, build_gamma_field,
                          train_propensity, write_gamma_csv)

__all__ = [
    "DatasetSpec",
    "Stage0Params",
    "PropensityParams",
    "FlowParams",
    "ExperimentConfig",
    "config_hash",
    "load_dataset",
    "grid_search_cv",
    "tune_config",
    "run_pipeline",
    "run_experiment",
    "emit_results",
    "DeltaMetrics",
    "RunRecord",
]

DATA_DIR_ENV = "RICB_DATA_DIR"

_LEARNING_RATES = (0.001, 0.005, 0.01)
_BATCH_SIZES = (32, 64, 128)
_WEIGHT_DECAYS = (0.0, 0.001, 0.01, 0.1)
_HIDDEN_MULTIPLIERS = (1.0, 1.5, 2.0)
_KNOT_COUNTS = (5, 10, 20)
_NOISE_LEVELS = (0.05, 0.1, 0.5)


@dataclass(frozen=True)
class DatasetSpec:
    """Which data to run on. `path` (or the RICB_DATA_DIR env var) points at
    the IHDP CSV directory / the MNIST IDX directory; synthetic needs none."""

    kind: str = "synthetic"
    n_train: int = 1000
    n_test: int = 1000
    seed: int = 0
    replicate: int = 1
    path: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("synthetic", "ihdp", "hcmnist"):
            raise ValueError("dataset kind must be synthetic, ihdp, or hcmnist")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("split sizes must be positive")


@dataclass(frozen=True)
class Stage0Params:
    # defaults sit on the tuning grid, picked by a synthetic-benchmark sweep
    learning_rate: float = 0.005
    batch_size: int = 128
    weight_decay: float = 0.0
    rep_multiplier: float = 1.5
    head_multiplier: float = 1.5
    prop_learning_rate: float | None = None
    prop_weight_decay: float | None = None
    n_iter: int = 5000


@dataclass(frozen=True)
class PropensityParams:
    learning_rate: float = 0.01
    batch_size: int = 64
    weight_decay: float = 0.0
    hidden_multiplier: float = 1.0
    n_iter: int = 5000


@dataclass(frozen=True)
class FlowParams:
    learning_rate: float = 0.005
    batch_size: int = 64
    hidden_multiplier: float = 1.0
    knots: int = 10
    noise_y: float = 0.1
    noise_context: float = 0.05
    n_iter: int = 5000


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    method: str = "tarnet"
    balancing_metric: str | None = None
    balancing_alpha: float = 0.0
    balancing_kernel: str = "linear"
    sinkhorn_epsilon: float = 0.1
    sinkhorn_iters: int = 10
    d_phi: int = 1
    deltas: tuple[float, ...] = DELTA_PRESETS
    k: int = 10_000
    tuning: str = "fixed"
    n_grid: int | None = None
    cv_folds: int = 5
    seeds: tuple[int, ...] = (0,)
    jobs: int = 1
    grid_resolution: int = 0
    out_dir: str = "results"

    stage0: Stage0Params = field(default_factory=Stage0Params)
    prop_x: PropensityParams = field(default_factory=PropensityParams)
    prop_phi: PropensityParams = field(default_factory=PropensityParams)
    flow: FlowParams = field(default_factory=FlowParams)

    def __post_init__(self) -> None:
        EstimatorKind(self.method)  # raises on unknown method
        if self.tuning not in ("fixed", "grid"):
            raise ValueError("tuning must be 'fixed' or 'grid'")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.k < 1 or self.d_phi < 1:
            raise ValueError("k and d_phi must be positive")
        if not self.deltas or any(d < 0.0 for d in self.deltas):
            raise ValueError("deltas must be non-negative and non-empty")
        if self.cv_folds < 2:
            raise ValueError("cross-validation needs at least 2 folds")
        # normalize lists coming from JSON into hashable tuples
        object.__setattr__(self, "deltas", tuple(float(d) for d in self.deltas))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    @property
    def r_multiplier(self) -> int:
        # wider subnets on the low-dimensional synthetic benchmark
        return 2 if self.dataset.kind == "synthetic" else 1


def _to_json_value(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_json_value(getattr(obj, f.name))
                for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_json_value(v) for v in obj]
    return obj


def config_to_dict(config: ExperimentConfig) -> dict:
    return _to_json_value(config)


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    nested = {"dataset": DatasetSpec, "stage0": Stage0Params,
              "prop_x": PropensityParams, "prop_phi": PropensityParams,
              "flow": FlowParams}
    kwargs = {}
    for key, value in raw.items():
        if key in nested:
            sub_known = {f.name for f in dataclasses.fields(nested[key])}
            sub_unknown = set(value) - sub_known
            if sub_unknown:
                raise ValueError(
                    f"unknown {key} config keys: {sorted(sub_unknown)}")
            kwargs[key] = nested[key](**value)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return ExperimentConfig(**kwargs)


def config_hash(config: ExperimentConfig) -> str:
    import hashlib

    payload = config_to_dict(config)
    # where results go and how many workers produced them cannot change any
    # emitted number, so they stay out of the identity
    payload.pop("out_dir", None)
    payload.pop("jobs", None)
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _resolve_data_dir(spec: DatasetSpec) -> Path:
    root = spec.path or os.environ.get(DATA_DIR_ENV)
    if root is None:
        raise ValueError(
            f"dataset kind '{spec.kind}' needs a data directory: set the "
            f"spec's path or the {DATA_DIR_ENV} environment variable")
    return Path(root)


def _find_idx(directory: Path, base: str) -> Path:
    for name in (base, base + ".gz"):
        p = directory / name
        if p.exists():
            return p
    raise FileNotFoundError(f"{base}[.gz] not found under {directory}")


def load_dataset(spec: DatasetSpec) -> tuple[Dataset, Dataset]:
    if spec.kind == "synthetic":
        return (gen_synthetic(spec.n_train, spec.seed, "train"),
                gen_synthetic(spec.n_test, spec.seed, "test"))
    if spec.kind == "ihdp":
        return load_ihdp_csv(_resolve_data_dir(spec), spec.replicate)
    directory = _resolve_data_dir(spec)
    tr_images = parse_idx(_find_idx(directory, "train-images-idx3-ubyte"))
    tr_labels = parse_idx(_find_idx(directory, "train-labels-idx1-ubyte"))
    te_images = parse_idx(_find_idx(directory, "t10k-images-idx3-ubyte"))
    te_labels = parse_idx(_find_idx(directory, "t10k-labels-idx1-ubyte"))
    stats = HcMnistConfig.from_data(tr_images, tr_labels)  # train stats only
    train = build_hcmnist(tr_images, tr_labels, spec.seed, stats, "train")
    test = build_hcmnist(te_images, te_labels, spec.seed, stats, "test")
    return train, test


def _hidden_units(multiplier: float, r: int, d: int) -> int:
    return max(1, int(round(multiplier * r * d)))


def _balancing_config(config: ExperimentConfig) -> BalancingConfig | None:
    kind = EstimatorKind(config.method)
    if kind == EstimatorKind.BNN:
        return BalancingConfig(metric=BalancingMetric.MMD, alpha=0.1)
    needs = {EstimatorKind.CFR, EstimatorKind.RCFR, EstimatorKind.CFR_ISW,
             EstimatorKind.BWCFR}
    if kind not in needs:
        return None
    if config.balancing_metric is None:
        raise ValueError(f"{config.method} needs a balancing_metric")
    metric = BalancingMetric(config.balancing_metric)
    return BalancingConfig(metric=metric, alpha=config.balancing_alpha,
                           kernel=config.balancing_kernel,
                           sinkhorn_epsilon=config.sinkhorn_epsilon,
                           sinkhorn_iters=config.sinkhorn_iters)


def _estimator_config(config: ExperimentConfig, d_x: int, seed: int,
                      params: Stage0Params | None = None) -> EstimatorConfig:
    p = params or config.stage0
    r = config.r_multiplier
    return EstimatorConfig(
        kind=EstimatorKind(config.method), d_x=d_x, d_phi=config.d_phi,
        rep_hidden=_hidden_units(p.rep_multiplier, r, d_x),
        head_hidden=_hidden_units(p.head_multiplier, r, config.d_phi),
        balancing=_balancing_config(config), seed=seed)


def _stage0_run(p: Stage0Params) -> TrainRun:
    return TrainRun(batch_size=p.batch_size, learning_rate=p.learning_rate,
                    weight_decay=p.weight_decay, n_iter=p.n_iter,
                    prop_learning_rate=p.prop_learning_rate,
                    prop_weight_decay=p.prop_weight_decay)


def _prop_run(p: PropensityParams) -> TrainRun:
    return TrainRun(batch_size=p.batch_size, learning_rate=p.learning_rate,
                    weight_decay=p.weight_decay, n_iter=p.n_iter)


def _flow_run(p: FlowParams) -> TrainRun:
    return TrainRun(batch_size=p.batch_size, learning_rate=p.learning_rate,
                    weight_decay=0.0, n_iter=p.n_iter)


def _flow_config(config: ExperimentConfig, seed: int,
                 params: FlowParams | None = None) -> FlowConfig:
    p = params or config.flow
    hidden = _hidden_units(p.hidden_multiplier, config.r_multiplier,
                           config.d_phi)
    return FlowConfig(context_dim=1 + config.d_phi, hidden_units=hidden,
                      knots=p.knots, noise_y=p.noise_y,
                      noise_context=p.noise_context, seed=seed)


# ---------------------------------------------------------------------------
# hyperparameter search


def _stage_grid(stage: str, config: ExperimentConfig) -> list:
    if stage == "stage0":
        base = config.stage0
        isw = EstimatorKind(config.method) == EstimatorKind.CFR_ISW
        out = []
        for lr in _LEARNING_RATES:
            for batch in _BATCH_SIZES:
                for wd in _WEIGHT_DECAYS:
                    for rm in _HIDDEN_MULTIPLIERS:
                        for hm in _HIDDEN_MULTIPLIERS:
                            if isw:
                                for plr in _LEARNING_RATES:
                                    for pwd in _WEIGHT_DECAYS:
                                        out.append(replace(
                                            base, learning_rate=lr,
                                            batch_size=batch, weight_decay=wd,
                                            rep_multiplier=rm,
                                            head_multiplier=hm,
                                            prop_learning_rate=plr,
                                            prop_weight_decay=pwd))
                            else:
                                out.append(replace(
                                    base, learning_rate=lr, batch_size=batch,
                                    weight_decay=wd, rep_multiplier=rm,
                                    head_multiplier=hm))
        return out
    if stage in ("prop_x", "prop_phi"):
        base = getattr(config, stage)
        return [replace(base, learning_rate=lr, batch_size=batch,
                        weight_decay=wd, hidden_multiplier=m)
                for lr in _LEARNING_RATES for batch in _BATCH_SIZES
                for wd in _WEIGHT_DECAYS for m in _HIDDEN_MULTIPLIERS]
    if stage == "flow":
        base = config.flow
        return [replace(base, learning_rate=lr, batch_size=batch,
                        hidden_multiplier=m, knots=kn, noise_y=ny,
                        noise_context=nc)
                for lr in _LEARNING_RATES for batch in _BATCH_SIZES
                for m in _HIDDEN_MULTIPLIERS for kn in _KNOT_COUNTS
                for ny in _NOISE_LEVELS for nc in _NOISE_LEVELS]
    raise ValueError(f"unknown tuning stage: {stage}")


def _sample_count(stage: str, config: ExperimentConfig) -> int:
    if config.n_grid is not None:
        return config.n_grid
    if stage == "flow":
        return 100
    if stage == "stage0" and EstimatorKind(config.method) == EstimatorKind.CFR_ISW:
        return 100
    return 50


def _stratified_folds(a: np.ndarray, n_folds: int,
                      rng: np.random.Generator) -> list[np.ndarray]:
    """Round-robin folds per treatment class, so every fold sees both."""
    folds: list[list[int]] = [[] for _ in range(n_folds)]
    for cls in (0.0, 1.0):
        idx = np.flatnonzero(a == cls)
        if len(idx) < n_folds:
            raise ValueError(
                f"treatment class {int(cls)} has only {len(idx)} rows; "
                f"cannot stratify {n_folds} folds")
        idx = rng.permutation(idx)
        for f in range(n_folds):
            folds[f].extend(idx[f::n_folds].tolist())
    return [np.sort(np.array(f, dtype=np.int64)) for f in folds]


def _factual_mse(model: Stage0Model, x: np.ndarray, a: np.ndarray,
                 y: np.ndarray) -> float:
    m0, m1 = predict_heads(model, x)
    fitted = a * m1 + (1.0 - a) * m0
    return float(np.mean((y - fitted) ** 2))


def _isw_bce(model: Stage0Model, x: np.ndarray, a: np.ndarray) -> float:
    with no_grad():
        rep = model.phi_net(Tensor(x))
        z = model.prop_phi_net(rep).data[:, 0]
    return float(np.mean(np.logaddexp(0.0, z) - a * z))


def _prop_bce(prop: PropensityModel, inputs: np.ndarray, a: np.ndarray) -> float:
    p = prop.predict(inputs)
    return float(-np.mean(a * np.log(p) + (1.0 - a) * np.log(1.0 - p)))


def _candidate_score(stage: str, config: ExperimentConfig, params,
                     train: Dataset, phi: np.ndarray | None,
                     tr_idx: np.ndarray, va_idx: np.ndarray,
                     fit_seed: int) -> float:
    x_tr, a_tr, y_tr = train.x[tr_idx], train.a[tr_idx], train.y[tr_idx]
    x_va, a_va, y_va = train.x[va_idx], train.a[va_idx], train.y[va_idx]
    if stage == "stage0":
        cfg = _estimator_config(config, train.d_x, fit_seed, params)
        model = build_stage0(cfg)
        train_stage0(model, x_tr, a_tr, y_tr, _stage0_run(params))
        score = _factual_mse(model, x_va, a_va, y_va)
        if cfg.kind == EstimatorKind.CFR_ISW:
            score += _isw_bce(model, x_va, a_va)
        return score
    if stage == "prop_x":
        hidden = _hidden_units(params.hidden_multiplier, config.r_multiplier,
                               train.d_x)
        prop = train_propensity(x_tr, a_tr, _prop_run(params),
                                hidden_units=hidden, seed=fit_seed)
        return _prop_bce(prop, x_va, a_va)
    if stage == "prop_phi":
        hidden = _hidden_units(params.hidden_multiplier, config.r_multiplier,
                               config.d_phi)
        prop = train_propensity(phi[tr_idx], a_tr, _prop_run(params),
                                hidden_units=hidden, seed=fit_seed)
        return _prop_bce(prop, phi[va_idx], a_va)
    if stage == "flow":
        flow = ConditionalFlow(_flow_config(config, fit_seed, params))
        train_cnf(flow, y_tr, a_tr, phi[tr_idx], _flow_run(params))
        return float(flow.nll(y_va, a_va, phi[va_idx]))
    raise ValueError(f"unknown tuning stage: {stage}")


def grid_search_cv(stage: str, config: ExperimentConfig, train: Dataset,
                   phi: np.ndarray | None = None):
    """Randomized grid search, stratified k-fold CV, minimum mean criterion.

    Candidates that diverge or go non-finite score +inf and drop out. Ties
    break toward the earlier sampled candidate.
    """
    grid = _stage_grid(stage, config)
    tag = zlib.crc32(stage.encode())
    rng = np.random.default_rng(np.random.SeedSequence((config.seeds[0], tag)))
    n = min(_sample_count(stage, config), len(grid))
    picked = rng.choice(len(grid), size=n, replace=False)
    folds = _stratified_folds(train.a, config.cv_folds, rng)
    all_idx = np.arange(train.n)
    fit_seed = int(np.random.SeedSequence(
        (config.seeds[0], tag, 1)).generate_state(1)[0])

    best_params, best_score = None, np.inf
    for gi in picked:
        params = grid[int(gi)]
        scores = []
        for va_idx in folds:
            tr_idx = np.setdiff1d(all_idx, va_idx, assume_unique=True)
            try:
                scores.append(_candidate_score(
                    stage, config, params, train, phi, tr_idx, va_idx,
                    fit_seed))
            except (FlowDivergenceError, NonFiniteError):
                scores.append(np.inf)
                break
        mean = float(np.mean(scores))
        if np.isfinite(mean) and mean < best_score:
            best_params, best_score = params, mean
    if best_params is None:
        raise RuntimeError(f"every sampled {stage} candidate diverged")
    return best_params


def tune_config(config: ExperimentConfig, train: Dataset) -> ExperimentConfig:
    """Resolve tuning mode 'grid' into concrete per-stage winners.

    Stages are tuned sequentially: the propensity-on-representation and flow
    searches condition on a stage-0 model trained with the stage-0 winner.
    """
    if config.tuning == "fixed":
        return config
    cfg = replace(config, stage0=grid_search_cv("stage0", config, train))
    seeds = _component_seeds(cfg.seeds[0])
    est = _estimator_config(cfg, train.d_x, seeds["stage0"])
    model = build_stage0(est)
    train_stage0(model, train.x, train.a, train.y, _stage0_run(cfg.stage0))
    phi = representation(model, train.x)
    cfg = replace(cfg,
                  prop_x=grid_search_cv("prop_x", cfg, train),
                  prop_phi=grid_search_cv("prop_phi", cfg, train, phi),
                  flow=grid_search_cv("flow", cfg, train, phi))
    return replace(cfg, tuning="fixed")


# ---------------------------------------------------------------------------
# per-seed pipeline


@dataclass(frozen=True)
class DeltaMetrics:
    delta: float
    er_out: float | None
    delta_er_out: float | None
    dr_out: float
    n_decided: int


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    method: str
    d_phi: int
    er_point_out: float | None
    rpehe_in: float
    rpehe_out: float
    per_delta: tuple[DeltaMetrics, ...]
    checkpoints: dict[str, str]
    wall_time: float  # in-memory only; never written into results files


_COMPONENTS = ("stage0", "prop_x", "prop_phi", "flow", "bounds")


def _component_seeds(seed: int) -> dict[str, int]:
    children = np.random.SeedSequence(seed).spawn(len(_COMPONENTS))
    return {name: int(c.generate_state(1)[0])
            for name, c in zip(_COMPONENTS, children)}


def _seed_dir(config: ExperimentConfig, seed: int) -> Path:
    d = Path(config.out_dir) / f"seed_{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _save_checkpoint(path: Path, payload: dict) -> None:
    with path.open("w") as fh:
        json.dump(payload, fh, sort_keys=True)


def _write_train_tau(path: Path, tau: np.ndarray) -> None:
    lines = ["id,tau_hat"] + [f"{i},{float(t)!r}" for i, t in enumerate(tau)]
    path.write_text("\n".join(lines) + "\n")


def _delta_file(delta: float) -> str:
    return f"bounds_{delta!r}.csv"


def train_seed(config: ExperimentConfig, train: Dataset,
               seed: int) -> Stage0Model:
    """Stage 0 for one seed; saves the checkpoint under the seed directory."""
    sdir = _seed_dir(config, seed)
    seeds = _component_seeds(seed)
    model = build_stage0(_estimator_config(config, train.d_x, seeds["stage0"]))
    train_stage0(model, train.x, train.a, train.y, _stage0_run(config.stage0))
    _save_checkpoint(sdir / "stage0.json", model.to_checkpoint())
    return model


def refute_seed(config: ExperimentConfig, train: Dataset, test: Dataset,
                seed: int, model: Stage0Model | None = None) -> None:
    """Stages 1-2 for one seed: propensities, flow, per-delta fields and
    test-split interval bounds. Loads the stage-0 checkpoint when no model
    is passed in; never modifies it."""
    sdir = _seed_dir(config, seed)
    seeds = _component_seeds(seed)
    r = config.r_multiplier
    if model is None:
        path = sdir / "stage0.json"
        if not path.exists():
            raise FileNotFoundError(
                f"{path} missing; run the train step for seed {seed} first")
        model = Stage0Model.from_checkpoint(json.loads(path.read_text()))
    phi_tr = representation(model, train.x)

    prop_x = train_propensity(
        train.x, train.a, _prop_run(config.prop_x),
        hidden_units=_hidden_units(config.prop_x.hidden_multiplier, r,
                                   train.d_x),
        seed=seeds["prop_x"])
    prop_phi = train_propensity(
        phi_tr, train.a, _prop_run(config.prop_phi),
        hidden_units=_hidden_units(config.prop_phi.hidden_multiplier, r,
                                   config.d_phi),
        seed=seeds["prop_phi"])
    _save_checkpoint(sdir / "prop_x.json", prop_x.to_checkpoint())
    _save_checkpoint(sdir / "prop_phi.json", prop_phi.to_checkpoint())

    flow = ConditionalFlow(_flow_config(config, seeds["flow"]))
    train_cnf(flow, train.y, train.a, phi_tr, _flow_run(config.flow))
    _save_checkpoint(sdir / "flow.json", flow.to_checkpoint())

    pi1_x_tr = prop_x.predict(train.x)
    pi1_phi_tr = prop_phi.predict(phi_tr)
    _write_train_tau(sdir / "train_tau.csv",
                     predict_point_cate(model, train.x))

    for delta in config.deltas:
        gamma_field = build_gamma_field(phi_tr, pi1_x_tr, pi1_phi_tr, delta)
        write_gamma_csv(sdir / f"gamma_{delta!r}.csv", phi_tr, pi1_x_tr,
                        pi1_phi_tr, gamma_field.train_gamma_points,
                        gamma_field.train_gamma_hat)
        # a fresh generator per delta replays identical outcome samples, so
        # interval growth across deltas reflects Gamma alone
        rng = np.random.default_rng(seeds["bounds"])
        bounds = cate_bounds(test.x, model, prop_x, prop_phi, gamma_field,
                             flow, config.k, rng)
        write_bounds_csv(sdir / _delta_file(delta), bounds,
                         [d.value for d in bounds_policy(bounds)])

    if config.grid_resolution > 0 and config.dataset.kind == "synthetic":
        _emit_decision_grid(config, sdir, model, prop_x, prop_phi, flow,
                            phi_tr, pi1_x_tr, pi1_phi_tr, seeds["bounds"])


def _read_tau_csv(path: Path) -> np.ndarray:
    lines = path.read_text().strip().splitlines()
    return np.array([float(line.split(",")[1]) for line in lines[1:]])


def evaluate_seed(config: ExperimentConfig, train: Dataset, test: Dataset,
                  seed: int) -> RunRecord:
    """Score one seed's saved artifacts; writes the ER/DR curve."""
    if train.tau_oracle is None or test.tau_oracle is None:
        raise ValueError("policy scoring needs effect oracles on both splits")
    sdir = _seed_dir(config, seed)
    for required in [sdir / "train_tau.csv",
                     sdir / _delta_file(config.deltas[0])]:
        if not required.exists():
            raise FileNotFoundError(
                f"{required} missing; run the refute step for seed {seed} first")
    tau_in = _read_tau_csv(sdir / "train_tau.csv")

    per_delta: list[DeltaMetrics] = []
    reports: list[PolicyReport] = []
    point_report = None
    tau_out = None
    for delta in config.deltas:
        bounds = read_bounds_csv(sdir / _delta_file(delta))
        if tau_out is None:
            tau_out = bounds.point
            point_report = score_policy(point_policy(tau_out),
                                        test.tau_oracle)
        report = score_policy(bounds_policy(bounds), test.tau_oracle,
                              baseline_error_rate=point_report.error_rate)
        reports.append(report)
        per_delta.append(DeltaMetrics(
            delta=delta, er_out=report.error_rate,
            delta_er_out=report.delta_er, dr_out=report.deferral_rate,
            n_decided=report.n_decided))
    write_er_dr_curve_csv(sdir / "curve.csv", config.deltas, reports)

    checkpoints = {name: f"seed_{seed}/{name}.json"
                   for name in ("stage0", "prop_x", "prop_phi", "flow")}
    return RunRecord(
        config_hash=config_hash(config), seed=seed, method=config.method,
        d_phi=config.d_phi, er_point_out=point_report.error_rate,
        rpehe_in=rpehe(tau_in, train.tau_oracle),
        rpehe_out=rpehe(tau_out, test.tau_oracle),
        per_delta=tuple(per_delta), checkpoints=checkpoints,
        wall_time=0.0)


def run_pipeline(config: ExperimentConfig, train: Dataset, test: Dataset,
                 seed: int) -> RunRecord:
    """All three stages plus scoring for one seed, through the same writers
    the individual CLI verbs use."""
    started = time.perf_counter()
    model = train_seed(config, train, seed)
    refute_seed(config, train, test, seed, model=model)
    record = evaluate_seed(config, train, test, seed)
    record.wall_time = time.perf_counter() - started
    return record


def _emit_decision_grid(config, sdir, model, prop_x, prop_phi, flow, phi_tr,
                        pi1_x_tr, pi1_phi_tr, bounds_seed) -> None:
    grid = make_grid(resolution=config.grid_resolution)
    gamma_field = build_gamma_field(phi_tr, pi1_x_tr, pi1_phi_tr,
                                    config.deltas[0])
    rng = np.random.default_rng(bounds_seed)
    bounds = cate_bounds(grid, model, prop_x, prop_phi, gamma_field, flow,
                         config.k, rng)
    write_decision_grid_csv(sdir / "decision_grid.csv", grid,
                            synthetic_tau(grid), bounds.point,
                            bounds_policy(bounds))


def _pipeline_worker(payload: tuple[dict, int]) -> "RunRecord":
    raw, seed = payload
    config = config_from_dict(raw)
    train, test = load_dataset(config.dataset)
    return run_pipeline(config, train, test, seed)


def run_experiment(config: ExperimentConfig) -> list[RunRecord]:
    """Tune (if asked), run every seed, and emit aggregate results."""
    train, test = load_dataset(config.dataset)
    resolved = tune_config(config, train)
    if resolved.jobs > 1:
        raw = config_to_dict(resolved)
        with ProcessPoolExecutor(max_workers=resolved.jobs) as pool:
            records = list(pool.map(_pipeline_worker,
                                    [(raw, s) for s in resolved.seeds]))
    else:
        records = [run_pipeline(resolved, train, test, s)
                   for s in resolved.seeds]
    records.sort(key=lambda r: r.seed)
    emit_results(resolved, records)
    return records


# ---------------------------------------------------------------------------
# results emission


def _mean_or_none(values: Sequence[float | None]) -> float | None:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def _aggregate_rows(config: ExperimentConfig,
                    records: Sequence[RunRecord]) -> list[dict]:
    rpehe_in = float(np.mean([r.rpehe_in for r in records]))
    rpehe_out = float(np.mean([r.rpehe_out for r in records]))
    rows = [{
        "method": config.method, "d_phi": config.d_phi, "delta": "point",
        "er_out": _mean_or_none([r.er_point_out for r in records]),
        "delta_er_out": None, "dr_out": 0.0,
        "rpehe_in": rpehe_in, "rpehe_out": rpehe_out,
        "seeds": len(records),
    }]
    for di, delta in enumerate(config.deltas):
        cells = [r.per_delta[di] for r in records]
        rows.append({
            "method": config.method, "d_phi": config.d_phi, "delta": delta,
            "er_out": _mean_or_none([c.er_out for c in cells]),
            "delta_er_out": _mean_or_none([c.delta_er_out for c in cells]),
            "dr_out": float(np.mean([c.dr_out for c in cells])),
            "rpehe_in": rpehe_in, "rpehe_out": rpehe_out,
            "seeds": len(records),
        })
    return rows


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_results(config: ExperimentConfig,
                 records: Sequence[RunRecord]) -> list[Path]:
    """Aggregate CSV + versioned JSON + a plain-text summary table."""
    if not records:
        raise ValueError("no records to emit")
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = _aggregate_rows(config, records)

    csv_path = out / "aggregate.csv"
    header = ["method", "d_phi", "delta", "er_out", "delta_er_out", "dr_out",
              "rpehe_in", "rpehe_out", "seeds"]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_format_cell(row[h]) for h in header))
    csv_path.write_text("\n".join(lines) + "\n")

    json_path = out / "results.json"
    payload = {
        "schema": "v1",
        "config_hash": config_hash(config),
        "config": config_to_dict(config),
        "records": [{
            "seed": r.seed, "method": r.method, "d_phi": r.d_phi,
            "er_point_out": r.er_point_out, "rpehe_in": r.rpehe_in,
            "rpehe_out": r.rpehe_out,
            "per_delta": [dataclasses.asdict(d) for d in r.per_delta],
            "checkpoints": r.checkpoints,
        } for r in records],
        "aggregate": rows,
    }
    with json_path.open("w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")

    table_path = out / "table.txt"
    widths = (12, 6, 10, 10, 14, 10, 10, 10)
    cols = ("method", "d_phi", "delta", "er_out", "delta_er_out", "dr_out",
            "rpehe_in", "rpehe_out")
    def fmt(row):
        cells = []
        for w, c in zip(widths, cols):
            v = row[c]
            if isinstance(v, float):
                v = f"{v:.4f}"
            cells.append(f"{'' if v is None else v:<{w}}")
        return "  ".join(cells).rstrip()
    text = [fmt({c: c for c in cols})] + [fmt(r) for r in rows]
    table_path.write_text("\n".join(text) + "\n")
    return [csv_path, json_path, table_path]
