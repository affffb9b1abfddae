"""Seeded experiment runs: configuration, staged pipelines, manifests, figure data.

A run directory is built by three stages, each reading what the previous one
wrote, so the command line can stop after any of them:

``generate``
    meta-datasets under ``data/``;
``train``
    checkpoints under ``models/`` and loss traces under ``traces/``;
``evaluate``
    result tables (``table*.csv`` and friends) in the run directory.

Every output file is listed with its SHA-256 in ``manifest.json``.  A failed
stage leaves the manifest with ``status: incomplete`` and the stage name.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import platform
import shutil
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy

from . import __version__
from .baselines import (
    McmcConfig,
    bayes_posterior_mean_clustered,
    effective_sample_size,
    exact_ring_posterior,
    ols_fit,
    ring_prior_mixture,
    rw_metropolis,
    sample_mixture,
)
from .eval_uq import MetricRecord, append_metrics, bootstrap_stability, energy_distance, energy_null_quantile, mode_coverage, mse_beta
from .flow_posterior import FlowModel, OdeConfig, flow_trajectory, load_flow, sample_posterior, save_flow, train_flow
from .seeding import (
    STREAM_BOOTSTRAP,
    STREAM_EVAL,
    STREAM_FLOW,
    STREAM_INIT,
    STREAM_MCMC,
    STREAM_ROBUST,
    STREAM_SPARSE,
    STREAM_TRAIN,
    derive_seed,
    rng_for,
)
from .set_estimators import (
    DeepSetsModel,
    LossKind,
    Pool,
    SetTransformerModel,
    TrainConfig,
    evaluate_estimator,
    feature_width,
    load_estimator,
    save_estimator,
    train_estimator,
    write_trace,
)
from .task_gen import (
    ClusteredPriorSpec,
    MetaDataset,
    NoiseRegime,
    RingPriorSpec,
    SparseTaskSpec,
    Task,
    gen_clustered_meta,
    gen_ring_task,
    gen_robust_meta,
    gen_sparse_meta,
    load_meta,
    save_meta,
)

log = logging.getLogger(__name__)

EXPERIMENTS = ("LatentStructure", "Robustness", "SparseRecovery", "RingPosterior")
STAGES = ("generate", "train", "evaluate")
ARTIFACTS = {
    "table1": "LatentStructure",
    "table2": "Robustness",
    "fig1": "Robustness",
    "fig2": "Robustness",
    "fig3": "SparseRecovery",
    "table4": "SparseRecovery",
    "fig4": "RingPosterior",
    "fig5": "RingPosterior",
}
MODEL_KINDS = ("deep_sets", "set_transformer", "sparse_set_transformer")
TRAJECTORY_TIMES = (0.0, 0.25, 0.5, 0.75, 1.0)


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException | str):
        self.stage = stage
        super().__init__(f"stage '{stage}' failed: {cause}")


# -- configuration ---------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Flat experiment configuration.

    Keys shared by all experiments (``n_train``, ``epochs``, ``n_obs_min`` ...)
    take experiment-specific defaults from the chosen profile; see
    :data:`PROFILES`.  For the ring experiment ``n_train`` is the number of
    fresh (beta, task) pairs drawn per flow-training epoch,
    ``n_obs_min``/``n_obs_max`` bound the training support sizes and
    ``flow_pairs`` is the number of (z0, t) draws per pair.
    ``token_features`` (``raw`` or ``quadratic``) selects the per-row inputs
    of the set estimators.  ``final_lr_fraction`` ends a cosine step-size
    decay and ``row_subsample`` is the smallest share of a training task's
    rows shown at one visit.
    """

    experiment: str
    root_seed: int = 0
    output_dir: str = "runs/default"
    profile: str = "desk"
    # meta-dataset
    p: int = 20
    n_obs_min: int = 10
    n_obs_max: int = 30
    n_train: int = 2000
    n_test: int = 200
    # models and training
    models: tuple = ("deep_sets", "set_transformer")
    epochs: int = 50
    batch_tasks: int = 32
    learning_rate: float = 1e-3
    loss: str = "param_mse"
    checkpoints: tuple = ()
    ds_hidden: int = 128
    ds_latent: int = 128
    ds_pool: str = "sum"
    token_features: str = "raw"
    row_subsample: float = 0.3
    st_d_model: int = 64
    st_heads: int = 4
    st_blocks: int = 2
    st_ff: int = 128
    # latent structure
    K_values: tuple = (5, 10, 50)
    tau: float = 3.0
    sigma_noise: float = 1.0
    # robustness
    prior_sd: float = 9.0
    regimes: tuple = ("gaussian", "asymmetric", "bimodal", "trimodal")
    matched_training: bool = False
    bootstrap_N: tuple = (50, 100, 200, 500, 1000)
    bootstrap_B: int = 100
    # sparse recovery
    sparsity_levels: tuple = (20, 50, 80)
    tasks_per_level: int = 150
    coef_sd: float = math.sqrt(3.0)
    # ring posterior
    ring_K: int = 8
    radius: float = 5.0
    component_sd: float = 0.35
    obs_noise_sd: float = 1.0
    ring_n_obs: int = 4
    informative_n_obs: int = 20
    final_lr_fraction: float = 0.02
    flow_pairs: int = 8
    n_samples: int = 4000
    n_particles: int = 500
    ode_steps: int = 50
    ode_scheme: str = "rk4"
    mcmc_steps: int = 20000
    mcmc_burn_in: int = 5000
    proposal_sd: float = 0.8
    bench_tasks: int = 10

    def validate(self) -> "ExperimentConfig":
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {tuple(PROFILES)}")
        for m in self.models:
            if m not in MODEL_KINDS:
                raise ConfigError(f"unknown model {m!r}")
        try:
            self.train_config()
            for r in self.regimes:
                NoiseRegime.from_kind(r)
            OdeConfig(self.ode_steps, self.ode_scheme)
            Pool(self.ds_pool)
            feature_width(self.p, self.token_features)
            if self.experiment == "LatentStructure":
                for k in self.K_values:
                    ClusteredPriorSpec.sample(0, self.p, k, self.tau, self.sigma_noise, self.n_obs_min, self.n_obs_max)
            elif self.experiment == "SparseRecovery":
                for k in self.sparsity_levels:
                    SparseTaskSpec(self.p, k, self.coef_sd, self.n_obs_min, self.n_obs_max)
            elif self.experiment == "RingPosterior":
                self.ring_spec()
                McmcConfig(self.mcmc_steps, self.mcmc_burn_in, self.proposal_sd)
                if not 0 <= self.n_obs_min <= self.n_obs_max:
                    raise ConfigError("need 0 <= n_obs_min <= n_obs_max")
                if self.flow_pairs < 1:
                    raise ConfigError("flow_pairs must be at least 1")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.n_train < 1 or self.n_test < 0:
            raise ConfigError("need n_train >= 1 and n_test >= 0")
        if self.bootstrap_B < 2:
            raise ConfigError("bootstrap_B must be at least 2")
        if not 0 <= self.root_seed < 2**64:
            raise ConfigError("root_seed must be an unsigned 64-bit integer")
        return self

    def train_config(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(
            self.epochs, self.batch_tasks, LossKind(self.loss), self.checkpoints, seed, self.learning_rate,
            self.final_lr_fraction, self.row_subsample,
        )

    def ring_spec(self) -> RingPriorSpec:
        return RingPriorSpec(self.ring_K, self.radius, self.component_sd, self.obs_noise_sd)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}


CONFIG_KEYS = {f.name for f in dataclasses.fields(ExperimentConfig)}
_TUPLE_TYPES = {
    "models": str, "checkpoints": int, "K_values": int, "regimes": str,
    "bootstrap_N": int, "sparsity_levels": int,
}

PROFILES: dict[str, dict[str, dict]] = {
    "desk": {
        "LatentStructure": dict(n_train=2000, n_test=200, epochs=50, checkpoints=(10, 25, 50)),
        "Robustness": dict(n_train=2000, n_test=200, epochs=100, checkpoints=(10, 50, 100), bootstrap_B=100),
        "SparseRecovery": dict(
            models=("sparse_set_transformer",), loss="predictive_mse", n_obs_min=100, n_obs_max=150,
            n_test=45, epochs=100, checkpoints=(50, 100), bootstrap_B=20,
        ),
        "RingPosterior": dict(
            models=(), n_obs_min=0, n_obs_max=20, n_train=8192, n_test=0, epochs=400,
            batch_tasks=128, learning_rate=2e-3,
        ),
    },
    "paper": {
        "LatentStructure": dict(n_train=5000, n_test=200, epochs=100, checkpoints=(10, 50, 100)),
        "Robustness": dict(
            n_train=5400, n_test=600, epochs=500, checkpoints=(5, 10, 30, 50, 80, 100, 300, 400, 500),
        ),
        "SparseRecovery": dict(
            models=("sparse_set_transformer",), loss="predictive_mse", n_obs_min=400, n_obs_max=500,
            sparsity_levels=tuple(range(5, 101, 5)), tasks_per_level=300, n_test=600, epochs=200,
            checkpoints=(50, 100, 150, 200), bootstrap_B=100,
        ),
        "RingPosterior": dict(
            models=(), n_obs_min=0, n_obs_max=20, n_train=16384, n_test=0, epochs=1000,
            batch_tasks=128, learning_rate=2e-3,
        ),
    },
}


def _coerce(key: str, value):
    kind = _TUPLE_TYPES.get(key)
    if kind is None:
        return value
    if isinstance(value, str):
        value = [v.strip() for v in value.split(",") if v.strip()]
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{key} must be a list")
    try:
        return tuple(kind(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def make_config(experiment: str | None = None, profile: str = "desk", overrides: dict | None = None) -> ExperimentConfig:
    """Dataclass defaults, then the profile for the experiment, then ``overrides``."""
    overrides = dict(overrides or {})
    unknown = sorted(set(overrides) - CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    experiment = overrides.pop("experiment", experiment)
    profile = overrides.pop("profile", profile)
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {experiment!r}")
    if profile not in PROFILES:
        raise ConfigError(f"profile must be one of {tuple(PROFILES)}, got {profile!r}")
    values = dict(PROFILES[profile][experiment])
    values.update({k: _coerce(k, v) for k, v in overrides.items()})
    try:
        cfg = ExperimentConfig(experiment=experiment, profile=profile, **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def load_config(path) -> dict:
    """Read a flat JSON object of configuration keys (unknown keys are errors)."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    return raw


# -- manifest --------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    config: dict
    code_version: str
    started: str
    finished: str = ""
    status: str = "incomplete"
    failed_stage: str = ""
    stages_done: list = field(default_factory=list)
    environment: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    def refresh(self, run_dir: Path) -> None:
        self.artifacts = {
            str(p.relative_to(run_dir)).replace(os.sep, "/"): sha256_file(p)
            for p in sorted(run_dir.rglob("*"))
            if p.is_file() and p.name != MANIFEST
        }

    def write(self, run_dir: Path) -> Path:
        path = Path(run_dir) / MANIFEST
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True), encoding="utf-8")
        return path

    @classmethod
    def read(cls, run_dir) -> "RunManifest":
        return cls(**json.loads((Path(run_dir) / MANIFEST).read_text(encoding="utf-8")))

    def verify(self, run_dir) -> list[str]:
        """Relative paths whose checksum no longer matches (or that vanished)."""
        run_dir = Path(run_dir)
        bad = []
        for rel, digest in self.artifacts.items():
            p = run_dir / rel
            if not p.is_file() or sha256_file(p) != digest:
                bad.append(rel)
        return bad


MANIFEST = "manifest.json"


def _environment() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "platform": platform.platform(),
        "machine": platform.machine(),
        "cpu_count": os.cpu_count(),
    }


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# -- csv helpers -----------------------------------------------------------------


def _num(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) for v in row])
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# -- models ----------------------------------------------------------------------


def build_model(kind: str, p: int, cfg: ExperimentConfig, rng: np.random.Generator):
    if kind == "deep_sets":
        return DeepSetsModel.build(
            p, rng, hidden=cfg.ds_hidden, latent=cfg.ds_latent, pool=Pool(cfg.ds_pool), features=cfg.token_features,
        )
    sparse = kind == "sparse_set_transformer"
    return SetTransformerModel.build(
        p, rng, d_model=cfg.st_d_model, n_heads=cfg.st_heads, n_blocks=cfg.st_blocks,
        ff_width=cfg.st_ff, sparse=sparse, features=cfg.token_features,
    )


def _train_and_save(run_dir: Path, tag: str, kind: str, meta: MetaDataset, cfg: ExperimentConfig, *keys) -> None:
    idx = MODEL_KINDS.index(kind)
    model = build_model(kind, meta.tasks[0].p, cfg, rng_for(cfg.root_seed, STREAM_INIT, *keys, idx))
    result = train_estimator(model, meta, cfg.train_config(derive_seed(cfg.root_seed, STREAM_TRAIN, *keys, idx)))
    models = run_dir / "models"
    models.mkdir(parents=True, exist_ok=True)
    for epoch, snap in result.snapshots.items():
        m = model.copy()
        m.load_params(snap)
        save_estimator(models / f"{tag}_{kind}_e{epoch}.ckpt", m)
    save_estimator(models / f"{tag}_{kind}.ckpt", model)
    (run_dir / "traces").mkdir(exist_ok=True)
    write_trace(run_dir / "traces" / f"{tag}_{kind}.csv", result.trace)


# -- experiment I: latent structure ------------------------------------------------


def _latent_generate(cfg: ExperimentConfig, run_dir: Path) -> None:
    for K in cfg.K_values:
        spec = ClusteredPriorSpec.sample(
            derive_seed(cfg.root_seed, K), cfg.p, K, cfg.tau, cfg.sigma_noise, cfg.n_obs_min, cfg.n_obs_max
        )
        meta = gen_clustered_meta(spec, cfg.n_train + cfg.n_test, derive_seed(cfg.root_seed, K), cfg.n_test)
        save_meta(meta, run_dir / "data" / f"K{K}")


def _latent_train(cfg: ExperimentConfig, run_dir: Path) -> None:
    for K in cfg.K_values:
        meta = load_meta(run_dir / "data" / f"K{K}")
        for kind in cfg.models:
            _train_and_save(run_dir, f"K{K}", kind, meta, cfg, K)


def _clustered_spec(meta: MetaDataset) -> ClusteredPriorSpec:
    s = meta.spec
    return ClusteredPriorSpec(s["p"], s["K"], s["tau"], s["sigma_noise"], s["n_obs_min"], s["n_obs_max"], np.array(s["centroids"]))


def _latent_evaluate(cfg: ExperimentConfig, run_dir: Path) -> None:
    table, dyn, records = [], [], []
    for K in cfg.K_values:
        meta = load_meta(run_dir / "data" / f"K{K}")
        test = meta.test_tasks
        truths = [t.beta_true for t in test]
        spec = _clustered_spec(meta)
        row = {"K": K}
        row["ols"] = mse_beta([ols_fit(t) for t in test], truths)
        row["bayes_oracle"] = mse_beta([bayes_posterior_mean_clustered(t, spec) for t in test], truths)
        for kind in cfg.models:
            for epoch in _eval_epochs(cfg):
                model = _checkpoint_model(run_dir, f"K{K}", kind, epoch, cfg)
                tr = evaluate_estimator(model, meta.train_tasks)
                te = evaluate_estimator(model, test)
                dyn += [(K, kind, "train", epoch, tr), (K, kind, "test", epoch, te)]
                records.append(MetricRecord("mse_beta", te, len(test), cfg.root_seed, f"{kind}@K{K}", str(epoch)))
            row[kind] = te
        for name in ("ols", "bayes_oracle"):
            records.append(MetricRecord("mse_beta", row[name], len(test), cfg.root_seed, f"{name}@K{K}"))
        table.append(row)
    cols = ["K", "ols"] + [m for m in MODEL_KINDS if m in cfg.models] + ["bayes_oracle"]
    write_csv(run_dir / "table1.csv", cols, ([r[c] for c in cols] for r in table))
    write_csv(run_dir / "dynamics.csv", ["K", "model", "split", "epoch", "mse"], dyn)
    append_metrics(run_dir / "metrics.csv", cfg.experiment, records)


# -- experiment II: robustness ------------------------------------------------------


def _robust_generate(cfg: ExperimentConfig, run_dir: Path) -> None:
    seed = derive_seed(cfg.root_seed, STREAM_ROBUST)
    for r in cfg.regimes:
        meta = gen_robust_meta(
            cfg.prior_sd, NoiseRegime.from_kind(r), cfg.n_train + cfg.n_test, seed, cfg.n_test,
            cfg.p, cfg.n_obs_min, cfg.n_obs_max,
        )
        save_meta(meta, run_dir / "data" / r)


def _train_regimes(cfg: ExperimentConfig) -> list[str]:
    return list(cfg.regimes) if cfg.matched_training else ["gaussian"]


def _robust_train(cfg: ExperimentConfig, run_dir: Path) -> None:
    for ri, r in enumerate(_train_regimes(cfg)):
        meta = _robust_meta(cfg, run_dir, r)
        for kind in cfg.models:
            _train_and_save(run_dir, r, kind, meta, cfg, ri)


def _robust_meta(cfg: ExperimentConfig, run_dir: Path, regime: str) -> MetaDataset:
    path = run_dir / "data" / regime
    if path.exists():
        return load_meta(path)
    meta = gen_robust_meta(
        cfg.prior_sd, NoiseRegime.from_kind(regime), cfg.n_train + cfg.n_test,
        derive_seed(cfg.root_seed, STREAM_ROBUST), cfg.n_test, cfg.p, cfg.n_obs_min, cfg.n_obs_max,
    )
    save_meta(meta, path)
    return meta


def _eval_epochs(cfg: ExperimentConfig) -> list[int]:
    return sorted(set(cfg.checkpoints) | {cfg.epochs})


def _robust_evaluate(cfg: ExperimentConfig, run_dir: Path) -> None:
    metas = {r: load_meta(run_dir / "data" / r) for r in cfg.regimes}
    reference = metas.get("gaussian", next(iter(metas.values())))
    multimodal = [r for r in ("bimodal", "trimodal") if r in cfg.regimes]
    beta_boot = reference.test_tasks[0].beta_true
    table, dyn, boot, records = [], [], [], []
    for kind in cfg.models:
        for epoch in _eval_epochs(cfg):
            models = {r: _checkpoint_model(run_dir, r if cfg.matched_training else "gaussian", kind, epoch, cfg)
                      for r in cfg.regimes}
            errs = {}
            for r, meta in metas.items():
                est = models[r].predict(meta.test_tasks)
                errs[r] = [float(np.sum((e - t.beta_true) ** 2)) for e, t in zip(est, meta.test_tasks)]
                table.append((kind, epoch, r, float(np.mean(errs[r]))))
                records.append(MetricRecord(f"mse_beta[{r}]", table[-1][3], len(est), cfg.root_seed, kind, str(epoch)))
            if len(multimodal) == 2:
                table.append((kind, epoch, "multimodal", float(np.mean(errs["bimodal"] + errs["trimodal"]))))
            ref_model = models.get("gaussian", next(iter(models.values())))
            dyn.append((kind, "train", epoch, evaluate_estimator(ref_model, reference.train_tasks)))
            dyn.append((kind, "test", epoch, evaluate_estimator(ref_model, reference.test_tasks)))
        for r in cfg.regimes:
            final = _checkpoint_model(run_dir, r if cfg.matched_training else "gaussian", kind, cfg.epochs, cfg)
            for N in cfg.bootstrap_N:
                rep = bootstrap_stability(
                    final.estimate, beta_boot, N, cfg.bootstrap_B, NoiseRegime.from_kind(r),
                    derive_seed(cfg.root_seed, STREAM_BOOTSTRAP),
                )
                boot.append((kind, r, N, rep.sigma_boot))
    write_csv(run_dir / "table2.csv", ["model", "epoch", "regime", "mse"], table)
    write_csv(run_dir / "dynamics.csv", ["model", "split", "epoch", "mse"], dyn)
    write_csv(run_dir / "bootstrap.csv", ["model", "regime", "N", "sigma_boot"], boot)
    append_metrics(run_dir / "metrics.csv", cfg.experiment, records)


def _checkpoint_model(run_dir: Path, tag: str, kind: str, epoch: int, cfg: ExperimentConfig):
    name = f"{tag}_{kind}_e{epoch}.ckpt" if epoch in cfg.checkpoints else f"{tag}_{kind}.ckpt"
    return load_estimator(run_dir / "models" / name)


# -- experiment III: sparse recovery -------------------------------------------------


def _sparse_spec(cfg: ExperimentConfig) -> SparseTaskSpec:
    return SparseTaskSpec(cfg.p, 0, cfg.coef_sd, cfg.n_obs_min, cfg.n_obs_max)


def _sparse_generate(cfg: ExperimentConfig, run_dir: Path) -> None:
    meta = gen_sparse_meta(
        _sparse_spec(cfg), cfg.tasks_per_level, cfg.sparsity_levels,
        derive_seed(cfg.root_seed, STREAM_SPARSE), cfg.n_test,
    )
    save_meta(meta, run_dir / "data" / "sparse")


def _sparse_train(cfg: ExperimentConfig, run_dir: Path) -> None:
    meta = load_meta(run_dir / "data" / "sparse")
    for kind in cfg.models:
        _train_and_save(run_dir, "sparse", kind, meta, cfg)


def _sparse_evaluate(cfg: ExperimentConfig, run_dir: Path) -> None:
    from .eval_uq import cosine_similarity

    meta = load_meta(run_dir / "data" / "sparse")
    test = meta.test_tasks
    fig3, tab4, records = [], [], []
    gauss = NoiseRegime.gaussian(1.0)
    for kind in cfg.models:
        final = None
        for epoch in _eval_epochs(cfg):
            model = _checkpoint_model(run_dir, "sparse", kind, epoch, cfg)
            est = model.predict(test)
            hard = model.predict_hard(test) if kind == "sparse_set_transformer" else est
            for k in cfg.sparsity_levels:
                idx = [i for i, t in enumerate(test) if t.sparsity == k]
                if not idx:
                    continue
                cos = float(np.mean([cosine_similarity(est[i], test[i].beta_true) for i in idx]))
                cos_hard = float(np.mean([cosine_similarity(hard[i], test[i].beta_true) for i in idx]))
                fig3.append((kind, k, epoch, cos, cos_hard, len(idx)))
                records.append(MetricRecord(f"cosine[k={k}]", cos, len(idx), cfg.root_seed, kind, str(epoch)))
            final = model
        predict = final.predict_hard if kind == "sparse_set_transformer" else final.predict
        for li, k in enumerate(cfg.sparsity_levels):
            beta = _sparse_task_beta(cfg, k, li)
            for N in cfg.bootstrap_N:
                rep = bootstrap_stability(
                    lambda t, f=predict: f([t])[0], beta, N, cfg.bootstrap_B, gauss,
                    derive_seed(cfg.root_seed, STREAM_BOOTSTRAP, k),
                )
                tab4.append((kind, k, N, rep.sigma_boot))
    write_csv(run_dir / "sparse_cosine.csv", ["model", "sparsity", "epoch", "cosine", "cosine_hard", "n_tasks"], fig3)
    write_csv(run_dir / "table4.csv", ["model", "sparsity", "N", "sigma_boot"], tab4)
    append_metrics(run_dir / "metrics.csv", cfg.experiment, records)


def _sparse_task_beta(cfg: ExperimentConfig, level: int, index: int) -> np.ndarray:
    from .task_gen import sparse_task

    spec = dataclasses.replace(_sparse_spec(cfg), sparsity_percent=level)
    return sparse_task(spec, derive_seed(cfg.root_seed, STREAM_BOOTSTRAP, 0, index)).beta_true


# -- experiment IV: ring posterior ---------------------------------------------------

RING_TASKS = ("prior", "default", "informative")


def ring_eval_tasks(cfg: ExperimentConfig) -> dict[str, Task]:
    spec = cfg.ring_spec()
    sizes = {"prior": 0, "default": cfg.ring_n_obs, "informative": cfg.informative_n_obs}
    return {name: gen_ring_task(spec, sizes[name], cfg.root_seed, i) for i, name in enumerate(RING_TASKS)}


def ring_log_posterior(task: Task, spec: RingPriorSpec) -> Callable[[np.ndarray], float]:
    """Unnormalised log posterior: ring prior plus Gaussian log likelihood."""
    prior = ring_prior_mixture(spec)
    x, y, s2 = task.inputs, task.outputs, spec.obs_noise_sd**2

    def logp(beta: np.ndarray) -> float:
        r = y - x @ beta
        return float(prior.logpdf(beta)) - 0.5 * float(r @ r) / s2

    return logp


def _ring_generate(cfg: ExperimentConfig, run_dir: Path) -> None:
    tasks = list(ring_eval_tasks(cfg).values())
    save_meta(MetaDataset(tasks, 0, len(tasks), cfg.root_seed, "ring-eval", dataclasses.asdict(cfg.ring_spec())),
              run_dir / "data" / "ring")


def _ring_train(cfg: ExperimentConfig, run_dir: Path) -> None:
    model = FlowModel.build(rng_for(cfg.root_seed, STREAM_INIT, STREAM_FLOW))
    tc = TrainConfig(cfg.epochs, cfg.batch_tasks, LossKind.PARAM_MSE, cfg.checkpoints,
                     derive_seed(cfg.root_seed, STREAM_TRAIN, STREAM_FLOW), cfg.learning_rate)
    result = train_flow(model, cfg.ring_spec(), cfg.n_train, tc, (cfg.n_obs_min, cfg.n_obs_max),
                        cfg.final_lr_fraction, cfg.flow_pairs)
    (run_dir / "models").mkdir(parents=True, exist_ok=True)
    save_flow(run_dir / "models" / "flow.ckpt", model)
    (run_dir / "traces").mkdir(exist_ok=True)
    write_trace(run_dir / "traces" / "flow.csv", result.trace)


def _mcmc_config(cfg: ExperimentConfig, seed: int) -> McmcConfig:
    return McmcConfig(cfg.mcmc_steps, cfg.mcmc_burn_in, cfg.proposal_sd, (0.0, 0.0), seed)


def _ring_evaluate(cfg: ExperimentConfig, run_dir: Path) -> None:
    spec = cfg.ring_spec()
    meta = load_meta(run_dir / "data" / "ring")
    model = load_flow(run_dir / "models" / "flow.ckpt")
    ode = OdeConfig(cfg.ode_steps, cfg.ode_scheme)
    samples = {"flow": [], "exact": [], "mcmc": []}
    coverage, energy = [], []
    for tid, (name, task) in enumerate(zip(RING_TASKS, meta.tasks)):
        mix = exact_ring_posterior(task, spec)
        seeds = {m: derive_seed(cfg.root_seed, STREAM_EVAL, tid, i) for i, m in enumerate(samples)}
        draws = {
            "flow": sample_posterior(model, task, cfg.n_samples, ode, seeds["flow"]),
            "exact": sample_mixture(mix, cfg.n_samples, seeds["exact"]),
            "mcmc": rw_metropolis(ring_log_posterior(task, spec), _mcmc_config(cfg, seeds["mcmc"]))[0],
        }
        for method, s in draws.items():
            samples[method] += [(b[0], b[1], i, tid, seeds[method]) for i, b in enumerate(s)]
            shares = mode_coverage(s, mix)
            coverage += [(name, tid, task.n_obs, method, k, shares[k], mix.weights[k]) for k in range(mix.n_components)]
        half = cfg.n_samples // 2
        ref = sample_mixture(mix, half, derive_seed(cfg.root_seed, STREAM_EVAL, tid, 9))
        null_rng = np.random.default_rng(derive_seed(cfg.root_seed, STREAM_EVAL, tid, 10))
        q95 = energy_null_quantile(lambda n, g: sample_mixture(mix, n, g), half, half, null_rng)
        for method in ("flow", "mcmc"):
            thin = draws[method][:: max(1, len(draws[method]) // half)][:half]
            energy.append((name, tid, method, energy_distance(thin, ref), q95))
    for method, rows in samples.items():
        write_csv(run_dir / f"samples_{method}.csv", ["beta1", "beta2", "sample_index", "task_id", "seed"], rows)
    write_csv(run_dir / "mode_coverage.csv",
              ["task", "task_id", "n_obs", "method", "mode", "share", "exact_weight"], coverage)
    write_csv(run_dir / "energy.csv", ["task", "task_id", "method", "energy_distance", "null_q95"], energy)
    default = meta.tasks[RING_TASKS.index("default")]
    traj = flow_trajectory(model, default, cfg.n_particles, TRAJECTORY_TIMES, ode,
                           derive_seed(cfg.root_seed, STREAM_EVAL, 99))
    write_csv(run_dir / "trajectory.csv", ["t", "particle_id", "beta1", "beta2"],
              ((t, i, z[0], z[1]) for t, zs in traj.items() for i, z in enumerate(zs)))
    bench_timing(cfg, cfg.bench_tasks, run_dir / "timing.csv", model)


def bench_timing(cfg: ExperimentConfig, n_tasks: int, path=None, model: FlowModel | None = None) -> Path:
    """Per-task wall time of flow sampling versus random-walk Metropolis.

    Both methods see the same tasks.  Metropolis runs its configured chain;
    the flow then draws as many samples as the chain's effective sample
    size, so both deliver the same number of effectively independent draws.
    Rows are ``method, task_id, wall_ms, n_samples``; a final pair of rows
    with ``task_id = median`` holds the per-method medians.
    """
    path = Path(path or Path(cfg.output_dir) / "timing.csv")
    rows = []
    if n_tasks > 0:
        if model is None:
            ckpt = Path(cfg.output_dir) / "models" / "flow.ckpt"
            model = load_flow(ckpt) if ckpt.exists() else _quick_flow(cfg)
        spec = cfg.ring_spec()
        ode = OdeConfig(cfg.ode_steps, cfg.ode_scheme)
        times = {"flow": [], "mcmc": []}
        for i in range(n_tasks):
            task = gen_ring_task(spec, cfg.ring_n_obs, cfg.root_seed, 1000 + i)
            t0 = time.perf_counter()
            chain, _ = rw_metropolis(ring_log_posterior(task, spec), _mcmc_config(cfg, derive_seed(cfg.root_seed, STREAM_MCMC, i)))
            t_mcmc = time.perf_counter() - t0
            n_eff = max(2, math.ceil(effective_sample_size(chain)))
            t0 = time.perf_counter()
            sample_posterior(model, task, n_eff, ode, derive_seed(cfg.root_seed, STREAM_FLOW, i))
            t_flow = time.perf_counter() - t0
            rows += [("flow", i, 1e3 * t_flow, n_eff), ("mcmc", i, 1e3 * t_mcmc, len(chain))]
            times["flow"].append(1e3 * t_flow)
            times["mcmc"].append(1e3 * t_mcmc)
        rows += [(m, "median", float(np.median(v)), "") for m, v in times.items()]
    return write_csv(path, ["method", "task_id", "wall_ms", "n_samples"], rows)


def _quick_flow(cfg: ExperimentConfig) -> FlowModel:
    log.warning("no trained flow found in %s; timing an untrained flow of the same size", cfg.output_dir)
    return FlowModel.build(rng_for(cfg.root_seed, STREAM_INIT, STREAM_FLOW))


def timing_medians(path) -> dict[str, float]:
    return {r["method"]: float(r["wall_ms"]) for r in read_csv(path) if r["task_id"] == "median"}


# -- pipeline ----------------------------------------------------------------------

PIPELINES: dict[str, dict[str, Callable[[ExperimentConfig, Path], None]]] = {
    "LatentStructure": {"generate": _latent_generate, "train": _latent_train, "evaluate": _latent_evaluate},
    "Robustness": {"generate": _robust_generate, "train": _robust_train, "evaluate": _robust_evaluate},
    "SparseRecovery": {"generate": _sparse_generate, "train": _sparse_train, "evaluate": _sparse_evaluate},
    "RingPosterior": {"generate": _ring_generate, "train": _ring_train, "evaluate": _ring_evaluate},
}

_STAGE_OUTPUTS = {"generate": ("data",), "train": ("models", "traces"), "evaluate": ()}


def run_experiment(cfg: ExperimentConfig, stages: Sequence[str] = STAGES) -> RunManifest:
    """Run ``stages`` of ``cfg``'s experiment in ``cfg.output_dir``.

    Outputs of a re-run stage are removed first, so repeated runs with the
    same configuration and seed produce byte-identical CSV files.
    """
    cfg.validate()
    run_dir = Path(cfg.output_dir)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        probe = run_dir / ".write_probe"
        probe.write_text("", encoding="utf-8")
        probe.unlink()
    except OSError as exc:
        raise StageError("config", f"output directory not writable: {exc}") from exc
    manifest = RunManifest(cfg.to_dict(), __version__, _now(), environment=_environment())
    manifest.write(run_dir)
    pipeline = PIPELINES[cfg.experiment]
    for stage in stages:
        try:
            _clear_stage(run_dir, stage)
            log.info("%s: %s", cfg.experiment, stage)
            pipeline[stage](cfg, run_dir)
        except Exception as exc:
            manifest.failed_stage = stage
            manifest.finished = _now()
            manifest.refresh(run_dir)
            manifest.write(run_dir)
            raise StageError(stage, exc) from exc
        manifest.stages_done.append(stage)
    manifest.status = "complete"
    manifest.finished = _now()
    manifest.refresh(run_dir)
    manifest.write(run_dir)
    return manifest


def _clear_stage(run_dir: Path, stage: str) -> None:
    for sub in _STAGE_OUTPUTS[stage]:
        if (run_dir / sub).exists():
            shutil.rmtree(run_dir / sub)
    if stage == "evaluate":
        for p in run_dir.glob("*.csv"):
            p.unlink()


# -- figure data ---------------------------------------------------------------------

FIGURES = {
    "learning_dynamics": ("dynamics.csv", ["model", "split", "epoch", "mse"]),
    "bootstrap": ("bootstrap.csv", ["model", "regime", "N", "sigma_boot"]),
    "flow_trajectory": ("trajectory.csv", ["t", "particle_id", "beta1", "beta2"]),
    "sparse_cosine": ("sparse_cosine.csv", ["series", "x", "y"]),
    "sparse_bootstrap": ("table4.csv", ["series", "x", "y"]),
    "posterior_samples": (None, ["series", "x", "y"]),
    "mode_coverage": ("mode_coverage.csv", ["series", "x", "y"]),
}
ARTIFACT_FIGURES = {
    "fig1": ["learning_dynamics"],
    "fig2": ["bootstrap"],
    "fig3": ["sparse_cosine"],
    "fig4": ["posterior_samples", "mode_coverage"],
    "fig5": ["flow_trajectory"],
}


def emit_figure_data(run_dir, figure_id: str) -> Path:
    """Write ``figure_<figure_id>.csv`` from a completed run's result files."""
    if figure_id not in FIGURES:
        raise ValueError(f"unknown figure_id {figure_id!r}; expected one of {sorted(FIGURES)}")
    run_dir = Path(run_dir)
    source, header = FIGURES[figure_id]
    if source is not None and not (run_dir / source).exists():
        raise FileNotFoundError(f"{run_dir / source} not found; run the matching experiment first")
    out = run_dir / f"figure_{figure_id}.csv"
    if figure_id == "learning_dynamics":
        rows = [
            (f"{r['model']}@K{r['K']}" if "K" in r else r["model"], r["split"], r["epoch"], r["mse"])
            for r in read_csv(run_dir / source)
        ]
    elif figure_id in ("bootstrap", "flow_trajectory"):
        rows = [[r[c] for c in header] for r in read_csv(run_dir / source)]
    elif figure_id == "sparse_cosine":
        rows = [(f"{r['model']}:k={r['sparsity']}", r["epoch"], r["cosine"]) for r in read_csv(run_dir / source)]
    elif figure_id == "sparse_bootstrap":
        rows = [(f"{r['model']}:k={r['sparsity']}", r["N"], r["sigma_boot"]) for r in read_csv(run_dir / source)]
    elif figure_id == "mode_coverage":
        rows = [(f"{r['method']}:{r['task']}", r["mode"], r["share"]) for r in read_csv(run_dir / source)]
    else:
        rows = []
        for method in ("exact", "flow", "mcmc"):
            path = run_dir / f"samples_{method}.csv"
            if not path.exists():
                raise FileNotFoundError(f"{path} not found; run the ring experiment first")
            names = {str(i): n for i, n in enumerate(RING_TASKS)}
            rows += [(f"{method}:{names.get(r['task_id'], r['task_id'])}", r["beta1"], r["beta2"]) for r in read_csv(path)]
    write_csv(out, header, rows)
    _refresh_manifest(run_dir)
    return out


def _refresh_manifest(run_dir: Path) -> None:
    if (run_dir / MANIFEST).exists():
        m = RunManifest.read(run_dir)
        m.refresh(run_dir)
        m.write(run_dir)


def reproduce(artifact: str, cfg: ExperimentConfig) -> list[Path]:
    """Run the experiment behind ``artifact`` and return the files that hold it."""
    if artifact not in ARTIFACTS:
        raise ConfigError(f"unknown artifact {artifact!r}; expected one of {sorted(ARTIFACTS)}")
    if cfg.experiment != ARTIFACTS[artifact]:
        raise ConfigError(f"{artifact} comes from {ARTIFACTS[artifact]}, not {cfg.experiment}")
    run_experiment(cfg)
    run_dir = Path(cfg.output_dir)
    if artifact.startswith("table"):
        return [run_dir / f"{artifact}.csv"]
    try:
        return [emit_figure_data(run_dir, f) for f in ARTIFACT_FIGURES[artifact]]
    except Exception as exc:
        raise StageError("emit", exc) from exc
