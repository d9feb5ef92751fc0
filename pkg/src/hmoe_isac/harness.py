"""Experiment orchestration: config loading, train/evaluate loops, SNR sweeps,
aggregation and plot emission.

Every number in a summary is recomputed from the per-slot traces written to
disk, so ``out/<policy>/<seed>/trace.csv`` is the single source of truth.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .agent import EpisodeReport, PolicyBase, eval_seed, run_episode
from .baselines import POLICIES, make_policy
from .env import EpisodeConfig, read_trace, trace_columns, trace_row
from .neural import load_checkpoint
from .physics import ArrayConfig

log = logging.getLogger(__name__)

DEFAULT_CONFIG = Path(__file__).with_name("default_config.yaml")
TRAIN_LOG_COLUMNS = ["episode", "mean_reward", "mean_energy", "mean_bmp", "mae_deg", "activation_rate"]


class ConfigError(ValueError):
    """Schema or file problem in an experiment configuration."""


# ------------------------------------------------------------------ schema

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ArraySection(_Strict):
    element_count: int = Field(64, ge=1)
    carrier_frequency: float = Field(28e9, gt=0)
    element_spacing: float = Field(0.5, gt=0)


class EnvSection(_Strict):
    horizon: int = Field(200, ge=1)
    user_count: int = Field(4, ge=1)
    array: ArraySection = ArraySection()
    beta: float | list[float] = 0.05
    bmp_threshold: float = 0.3
    aoi_cap: float = 20.0
    processing_delay: float = 1.0
    e_vis: float = 10.0
    e_recovery: float = 25.0
    penalty: float = 50.0
    p_max_dbm: float = 30.0
    noise_dbm: float = -114.0
    rho: float = 8.0
    path_count: int = 3
    nlos_power_db: float = -10.0
    slot_duration: float = 0.1
    radar_angle_std: float = 0.01
    radar_distance_std: float = 0.5
    bias_std: float = 0.004
    angle_noise_std: float = 0.002
    distance_noise_std: float = 0.05
    angle_limit: float = math.pi / 3
    min_distance: float = 10.0
    max_distance: float = 150.0
    max_angular_speed: float = 0.05
    max_radial_speed: float = 10.0
    snr_db: float = 10.0
    snr_reference_db: float = 10.0
    beta_snr_exponent: float = 0.5

    def to_episode_config(self, **overrides) -> EpisodeConfig:
        kw = self.model_dump()
        kw["array"] = ArrayConfig(**kw["array"])
        if isinstance(kw["beta"], list):
            kw["beta"] = tuple(kw["beta"])
        kw.update(overrides)
        return EpisodeConfig(**kw)


class ExperimentConfig(_Strict):
    policy: str = "hmoe"
    seeds: list[int] = Field(default_factory=lambda: list(range(10)), min_length=1)
    train_episodes: int = Field(500, ge=0)
    eval_episodes: int = Field(3, ge=1)
    snr_grid: list[float] = Field(default_factory=lambda: [0.0, 5.0, 10.0, 15.0, 20.0], min_length=1)
    out: str = "out"
    plots: bool = True
    workers: int = Field(1, ge=1)
    env: EnvSection = EnvSection()
    # per-policy hyperparameter overrides, keyed by registry name
    hyperparams: dict[str, dict[str, float | int | bool]] = Field(default_factory=dict)

    @field_validator("policy")
    @classmethod
    def _known_policy(cls, v):
        if v not in POLICIES:
            raise ValueError(f"unknown policy {v!r}; choose from {sorted(POLICIES)}")
        return v

    @field_validator("snr_grid")
    @classmethod
    def _sorted_grid(cls, v):
        if list(v) != sorted(v):
            raise ValueError("snr_grid must be sorted ascending")
        return v

    @field_validator("hyperparams")
    @classmethod
    def _known_keys(cls, v):
        for name in v:
            if name not in POLICIES:
                raise ValueError(f"hyperparams for unknown policy {name!r}")
        return v

    @property
    def episode_config(self) -> EpisodeConfig:
        return self.env.to_episode_config()


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{where}: {err['msg']}")
    return "; ".join(lines)


def parse_config(data: dict | None) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data or {})
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_config(path=None) -> ExperimentConfig:
    """Read a YAML experiment file. ``None`` loads the packaged defaults."""
    path = Path(path) if path is not None else DEFAULT_CONFIG
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data)


# ------------------------------------------------------------------ metrics

@dataclass
class SeedMetrics:
    seed: int
    e_total: float
    e_comp: float
    e_sweep: float
    avg_bmp: float
    mae_deg: float
    activation_rate: float
    aoi_violations: int
    bmp_violations: int
    hardware_failures: int = 0
    max_modulus_deviation: float = 0.0
    max_power_residual: float = 0.0


METRIC_FIELDS = ("e_total", "e_comp", "e_sweep", "avg_bmp", "mae_deg", "activation_rate")


def metrics_from_trace(trace: dict[str, np.ndarray], seed: int, aoi_cap: float, bmp_threshold: float) -> SeedMetrics:
    """Time averages and violation counts recomputed from one per-slot trace."""
    ages = np.stack([v for k, v in trace.items() if k.startswith("age_")], axis=1)
    pis = np.stack([v for k, v in trace.items() if k.startswith("pi_")], axis=1)
    e_comp, e_sweep = trace["e_comp"], trace["e_sweep"]
    return SeedMetrics(
        seed=seed,
        e_total=float(np.mean(e_comp + e_sweep)),
        e_comp=float(np.mean(e_comp)),
        e_sweep=float(np.mean(e_sweep)),
        avg_bmp=float(np.mean(trace["avg_bmp"])),
        mae_deg=float(np.mean(trace["mae_deg"])),
        activation_rate=float(np.mean(pis)),
        aoi_violations=int(np.sum(ages > aoi_cap)),
        bmp_violations=int(np.sum(trace["avg_bmp"] > bmp_threshold)),
    )


@dataclass
class MetricSummary:
    policy: str
    snr_db: float
    seeds: list[int]
    mean: dict[str, float]
    std: dict[str, float]
    per_seed: list[SeedMetrics]
    violations: dict[str, int]
    # per-slot means over seeds and evaluation episodes
    energy_curve: list[float] = field(default_factory=list)
    mae_curve: list[float] = field(default_factory=list)

    @property
    def finite(self) -> bool:
        vals = list(self.mean.values()) + list(self.std.values()) + self.energy_curve + self.mae_curve
        return all(math.isfinite(v) for v in vals)

    @property
    def hardware_ok(self) -> bool:
        return self.violations["hardware"] == 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_seed"] = [asdict(m) for m in self.per_seed]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricSummary":
        d = dict(d)
        d["per_seed"] = [SeedMetrics(**m) for m in d["per_seed"]]
        return cls(**d)


def aggregate(policy: str, snr_db: float, per_seed: list[SeedMetrics], energy_curves, mae_curves) -> MetricSummary:
    """Deterministic reduction in the order the seeds were given."""
    mean, std = {}, {}
    for name in METRIC_FIELDS:
        vals = np.array([getattr(m, name) for m in per_seed])
        mean[name] = float(vals.mean())
        std[name] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    violations = {
        "aoi": sum(m.aoi_violations for m in per_seed),
        "bmp": sum(m.bmp_violations for m in per_seed),
        "hardware": sum(m.hardware_failures for m in per_seed),
    }
    return MetricSummary(policy, float(snr_db), [m.seed for m in per_seed], mean, std, per_seed, violations,
                         np.mean(energy_curves, axis=0).tolist(), np.mean(mae_curves, axis=0).tolist())


# ------------------------------------------------------------------ runs

def build_policy(cfg: ExperimentConfig, name: str, seed: int) -> PolicyBase:
    params = dict(cfg.hyperparams.get(name, {}))
    params.setdefault("n_episodes", cfg.train_episodes)
    return make_policy(name, random_state=seed, **params)


def write_train_log(path, history: list[EpisodeReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAIN_LOG_COLUMNS)
        for r in history:
            w.writerow([r.episode, repr(r.mean_reward), repr(r.mean_energy), repr(r.mean_bmp),
                        repr(math.degrees(r.mae)), repr(r.activation_rate)])


def evaluate_policy(policy: PolicyBase, config: EpisodeConfig, seed: int, n_episodes: int, trace_path=None):
    """Roll ``n_episodes`` evaluation episodes; returns (metrics, energy curve, MAE curve)."""
    rows = []
    worst_mod = worst_pow = 0.0
    failures = 0
    for ep in range(n_episodes):
        buf = policy.rollout(eval_seed(seed, ep), action_seed=[seed, 3, ep], config=config)
        for n, out in enumerate(buf.outcomes):
            rows.append(trace_row(n, out, episode=ep))
            c = out.constraints
            worst_mod = max(worst_mod, c.modulus_deviation)
            worst_pow = max(worst_pow, abs(c.power_residual))
            failures += int(not c.hardware_ok)
    cols = trace_columns(config.user_count)
    table = {name: np.array([r[i] for r in rows], dtype=np.float64) for i, name in enumerate(cols)}
    if trace_path is not None:
        _write_rows(trace_path, cols, rows)
        table = read_trace(trace_path)
    m = metrics_from_trace(table, seed, config.aoi_cap, config.bmp_threshold)
    m.hardware_failures, m.max_modulus_deviation, m.max_power_residual = failures, worst_mod, worst_pow
    energy = (table["e_comp"] + table["e_sweep"]).reshape(n_episodes, config.horizon).mean(axis=0)
    mae = table["mae_deg"].reshape(n_episodes, config.horizon).mean(axis=0)
    return m, energy, mae


def _write_rows(path, cols, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _seed_job(args):
    cfg, name, seed, episode_config, seed_dir, train, checkpoint = args
    seed_dir = Path(seed_dir) if seed_dir is not None else None
    if seed_dir is not None:
        seed_dir.mkdir(parents=True, exist_ok=True)
    policy = build_policy(cfg, name, seed)
    if checkpoint is not None:
        tensors, opts, meta = load_checkpoint(checkpoint)
        policy.set_params(**{k: v for k, v in meta.get("params", {}).items() if k in policy.get_params()})
        policy.restore(episode_config, tensors, opts)
    elif train:
        policy.fit(episode_config)
        if seed_dir is not None:
            write_train_log(seed_dir / "train_log.csv", policy.history_)
            policy.save(seed_dir / "checkpoint.json", meta={"policy": name, "seed": seed,
                                                            "snr_db": episode_config.snr_db})
    else:
        raise ConfigError(f"no checkpoint for {name} seed {seed}; run `train` first")
    trace = seed_dir / "trace.csv" if seed_dir is not None else None
    return evaluate_policy(policy, episode_config, seed, cfg.eval_episodes, trace)


def _map(cfg: ExperimentConfig, jobs):
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            return list(pool.map(_seed_job, jobs))
    return [_seed_job(j) for j in jobs]


def run_experiment(cfg: ExperimentConfig, policy: str | None = None, *, train: bool = True,
                   episode_config: EpisodeConfig | None = None, out_dir=None, write: bool = True) -> MetricSummary:
    """Train (unless ``train`` is False, in which case checkpoints are loaded)
    and evaluate one policy over every seed; persist traces and the summary."""
    name = policy or cfg.policy
    if name not in POLICIES:
        raise ConfigError(f"unknown policy {name!r}")
    ec = episode_config or cfg.episode_config
    root = Path(out_dir) if out_dir is not None else Path(cfg.out) / name
    jobs = []
    for seed in cfg.seeds:
        seed_dir = root / str(seed) if write else None
        ckpt = None
        if not train:
            ckpt = root / str(seed) / "checkpoint.json"
            if not ckpt.is_file():
                raise ConfigError(f"missing checkpoint {ckpt}")
        jobs.append((cfg, name, seed, ec, seed_dir, train, ckpt))
    results = _map(cfg, jobs)
    summary = aggregate(name, ec.snr_db, [r[0] for r in results], [r[1] for r in results], [r[2] for r in results])
    if write:
        root.mkdir(parents=True, exist_ok=True)
        (root / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2))
    return summary


def snr_sweep(cfg: ExperimentConfig, grid=None, policy: str | None = None, write: bool = True) -> list[MetricSummary]:
    """Retrain and evaluate at each SNR point, ascending."""
    grid = sorted(cfg.snr_grid if grid is None else grid)
    name = policy or cfg.policy
    root = Path(cfg.out) / name
    out = []
    for snr in grid:
        ec = cfg.env.to_episode_config(snr_db=float(snr))
        out.append(run_experiment(cfg, name, episode_config=ec, out_dir=root / f"snr_{snr:g}", write=write))
    if write:
        root.mkdir(parents=True, exist_ok=True)
        (root / "sweep.json").write_text(json.dumps([s.to_dict() for s in out], indent=2))
    return out


def load_summaries(out_dir) -> tuple[list[MetricSummary], dict[str, list[MetricSummary]]]:
    """Collect ``<policy>/summary.json`` and ``<policy>/sweep.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    summaries, sweeps = [], {}
    for name in POLICIES:
        f = out_dir / name / "summary.json"
        if f.is_file():
            summaries.append(MetricSummary.from_dict(json.loads(f.read_text())))
        f = out_dir / name / "sweep.json"
        if f.is_file():
            sweeps[name] = [MetricSummary.from_dict(d) for d in json.loads(f.read_text())]
    return summaries, sweeps


# ------------------------------------------------------------------ plots

def _write_series_csv(path, x_name, x, series: dict[str, list[float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([x_name] + list(series))
        for i, xv in enumerate(x):
            w.writerow([repr(float(xv))] + [repr(float(s[i])) for s in series.values()])


def _chart(path, x, series, xlabel, ylabel, title, marker=None) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for label, ys in series.items():
        ax.plot(x, ys, label=label, marker=marker)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_plots(summaries: list[MetricSummary], out_dir, sweeps: dict[str, list[MetricSummary]] | None = None) -> list[Path]:
    """Energy and MAE vs slot per policy, energy vs SNR per policy. Each chart
    is written as SVG next to the CSV holding exactly the plotted values."""
    sweeps = sweeps or {}
    if not summaries and not sweeps:
        warnings.warn("no summaries to plot; nothing written")
        return []
    plots = Path(out_dir) / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    written = []
    if summaries:
        horizon = min(len(s.energy_curve) for s in summaries)
        x = np.arange(horizon)
        for key, ylabel, stem in (("energy_curve", "time-averaged energy (J)", "energy_vs_slot"),
                                  ("mae_curve", "sensing MAE (deg)", "mae_vs_slot")):
            series = {}
            for s in summaries:
                curve = np.asarray(getattr(s, key)[:horizon])
                series[s.policy] = (np.cumsum(curve) / (x + 1)).tolist()
            _write_series_csv(plots / f"{stem}.csv", "slot", x, series)
            _chart(plots / f"{stem}.svg", x, series, "slot", ylabel, stem.replace("_", " "))
            written += [plots / f"{stem}.csv", plots / f"{stem}.svg"]
    if sweeps:
        grid = sorted({s.snr_db for pts in sweeps.values() for s in pts})
        series = {}
        for name, pts in sweeps.items():
            by_snr = {s.snr_db: s.mean["e_total"] for s in pts}
            series[name] = [by_snr.get(g, float("nan")) for g in grid]
        _write_series_csv(plots / "energy_vs_snr.csv", "snr_db", grid, series)
        _chart(plots / "energy_vs_snr.svg", grid, series, "SNR (dB)", "time-averaged energy (J)",
               "energy vs SNR", marker="o")
        written += [plots / "energy_vs_snr.csv", plots / "energy_vs_snr.svg"]
    return written


__all__ = [
    "ConfigError", "ExperimentConfig", "EnvSection", "MetricSummary", "SeedMetrics", "load_config",
    "parse_config", "run_experiment", "snr_sweep", "emit_plots", "load_summaries", "metrics_from_trace",
    "evaluate_policy", "aggregate", "DEFAULT_CONFIG",
]
