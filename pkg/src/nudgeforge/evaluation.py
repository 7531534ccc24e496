"""Error metrics, experiment orchestration, and report/figure-data emission."""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import dynamics, fileformats
from .assimilation import run_assimilation
from .observation import ObservationOperator, Rng, gaussian_array, observe
from .training import TrainingConfig, load_checkpoint, save_checkpoint, train, write_loss_curve

SCHEMA_VERSION = 1

# (F, sigma) pairs, noise levels, and observed percentages of the benchmark grids
L96_REGIMES = {4.0: 0.1854, 8.0: 0.3640, 16.0: 0.6298}
KS_SIGMAS = (0.25, 0.375, 0.5)
KF_SIGMAS = (0.5, 0.75, 1.0)
SPARSITIES = {
    "lorenz96": (100.0, 50.0, 25.0),
    "kuramoto_sivashinsky": (100.0, 50.0, 25.0),
    "kolmogorov": (100.0, 25.0, 6.25),
}

# epochs, burn-in, training steps, test steps, K; chunk_size bounds tape memory
SYSTEM_DEFAULTS = {
    "lorenz96": dict(epochs=300, burn_in=80, train_steps=1620, test_steps=400, K=5),
    "kuramoto_sivashinsky": dict(epochs=300, burn_in=5000, train_steps=10000, test_steps=5000, K=10,
                                 chunk_size=250),
    "kolmogorov": dict(epochs=100, burn_in=1000, train_steps=2000, test_steps=5000, K=10,
                       chunk_size=25),
}

DESK_GRID = 32
FULL_GRID = 64


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- metrics


def rmse(u_hat, u):
    """``||u_hat - u||_2 / sqrt(N)``; works row-wise on stacked states."""
    u_hat = np.asarray(u_hat, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if u_hat.shape != u.shape:
        raise ValueError(f"shape mismatch {u_hat.shape} vs {u.shape}")
    return np.sqrt(np.mean((u_hat - u) ** 2, axis=-1))


def armse(traj_hat, traj_true):
    """Time average of the per-step RMSE."""
    traj_hat = np.asarray(traj_hat)
    traj_true = np.asarray(traj_true)
    if traj_hat.ndim != 2 or len(traj_hat) == 0:
        raise ValueError("need non-empty (steps, dim) trajectories")
    return float(np.mean(rmse(traj_hat, traj_true)))


# ---------------------------------------------------------------- configuration


@dataclass
class ExperimentConfig:
    """One cell of a benchmark grid, serialized as JSON.

    ``scale`` holds optional desk-scale overrides: ``grid`` (Kolmogorov
    resolution), ``burn_in``, ``train_steps``, ``test_steps`` and
    ``chunk_size`` (windows per gradient chunk).
    """

    system: str
    sigma: float
    sparsity: float = 100.0
    method: str = "nnn"
    K: int = None
    seed: int = 0
    F: float = None
    nu: float = None
    epochs: int = None
    paths: dict = field(default_factory=dict)
    scale: dict = field(default_factory=dict)
    schema: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.system not in SYSTEM_DEFAULTS:
            raise ConfigError(f"unknown system {self.system!r}")
        defaults = SYSTEM_DEFAULTS[self.system]
        if self.K is None:
            self.K = defaults["K"]
        if self.epochs is None:
            self.epochs = defaults["epochs"]
        if self.system == "kolmogorov" and self.nu is None:
            self.nu = 1e-2
        self.validate()

    def validate(self):
        if self.schema != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema {self.schema}")
        if self.method not in ("nnn", "linear"):
            raise ConfigError(f"unknown method {self.method!r}")
        if self.K < 1 or self.epochs < 0:
            raise ConfigError("K must be >= 1 and epochs >= 0")
        if self.sparsity not in SPARSITIES[self.system]:
            raise ConfigError(f"sparsity {self.sparsity}% is not on the {self.system} grid "
                              f"{SPARSITIES[self.system]}")
        if self.system == "lorenz96":
            if self.F is None or float(self.F) not in L96_REGIMES:
                raise ConfigError(f"Lorenz 96 forcing must be one of {sorted(L96_REGIMES)}")
            if not np.isclose(self.sigma, L96_REGIMES[float(self.F)]):
                raise ConfigError(f"sigma {self.sigma} is not paired with F={self.F}")
        elif self.system == "kuramoto_sivashinsky":
            if not any(np.isclose(self.sigma, s) for s in KS_SIGMAS):
                raise ConfigError(f"sigma must be one of {KS_SIGMAS}")
        else:
            if not any(np.isclose(self.sigma, s) for s in KF_SIGMAS):
                raise ConfigError(f"sigma must be one of {KF_SIGMAS}")
        unknown = set(self.scale) - {"grid", "burn_in", "train_steps", "test_steps", "chunk_size"}
        if unknown:
            raise ConfigError(f"unknown scale keys {sorted(unknown)}")

    def setting(self, key):
        return self.scale.get(key, SYSTEM_DEFAULTS[self.system].get(key))

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json())

    def sort_key(self):
        return (self.system, self.F or 0.0, self.nu or 0.0, self.sigma, -self.sparsity,
                self.method, self.K, self.seed)


def build_model(config):
    if config.system == "lorenz96":
        return dynamics.lorenz96(40, config.F)
    if config.system == "kuramoto_sivashinsky":
        return dynamics.kuramoto_sivashinsky(128)
    return dynamics.kolmogorov(int(config.setting("grid") or DESK_GRID), config.nu)


def observation_operator(config, model):
    return ObservationOperator.from_sparsity(model.extents, config.sparsity)


def training_config(config):
    return TrainingConfig(K=config.K, epochs=config.epochs, sigma=config.sigma, seed=config.seed,
                          method=config.method, system=config.system, sparsity=config.sparsity,
                          chunk_size=config.setting("chunk_size"))


def truth_trajectory(config, model):
    """Ground truth after burn-in: (train_steps + test_steps, dim), double precision."""
    path = config.paths.get("truth")
    n = config.setting("train_steps") + config.setting("test_steps")
    if path and os.path.exists(path):
        data = fileformats.read_snapshots(path)
        if data.shape == (n, model.dim):
            return data
    u0 = model.default_initial_condition(seed=config.seed)
    traj = dynamics.generate_trajectory(model, u0, n, burn_in=config.setting("burn_in"))
    if path:
        # grid workers may share a truth file; publish it atomically
        tmp = f"{path}.{os.getpid()}.tmp"
        fileformats.write_snapshots(tmp, traj)
        os.replace(tmp, path)
    return traj


def split(config, truth):
    m = config.setting("train_steps")
    return truth[:m], truth[m: m + config.setting("test_steps")]


def obtain_checkpoint(config, model, H, train_split):
    tcfg = training_config(config)
    path = config.paths.get("checkpoint")
    if path and os.path.exists(path):
        ckpt = load_checkpoint(path, expected_state_dim=model.dim)
        if ckpt.config_digest == tcfg.digest():
            return ckpt
    ckpt = train(tcfg, model, H, train_split)
    if path:
        save_checkpoint(ckpt, path)
    if config.paths.get("loss_curve"):
        write_loss_curve(config.paths["loss_curve"], ckpt.loss_curve)
    return ckpt


def test_inputs(config, H, train_split, test_split):
    """Perturbed initial state and noisy test observations (single precision)."""
    root = Rng(config.seed)
    y = observe(test_split, H, config.sigma, root.substream("test-observations"))
    eps = gaussian_array(root.substream("test-perturbation"), (train_split.shape[1],))
    u0 = train_split[-1] + config.sigma * eps
    return u0.astype(np.float32), np.asarray(y, dtype=np.float32)


@dataclass
class ReportRow:
    system: str
    F: float
    nu: float
    sigma: float
    sparsity: float
    method: str
    K: int
    seed: int
    armse: float
    diverged: bool
    seconds: float
    series: np.ndarray = field(default=None, repr=False, compare=False)

    CSV_COLUMNS = ("system", "F", "nu", "sigma", "sparsity", "method", "K", "seed",
                   "armse", "diverged", "seconds")


def assimilate(config, model, H, ckpt, train_split, test_split):
    u0, y = test_inputs(config, H, train_split, test_split)
    return run_assimilation(model, H, ckpt.nudge(H), u0, y)


def run_experiment(config):
    """Generate truth, train (or load) the nudging operator, assimilate the test split."""
    start = time.perf_counter()
    model = build_model(config)
    H = observation_operator(config, model)
    truth = truth_trajectory(config, model)
    train_split, test_split = split(config, truth)
    ckpt = obtain_checkpoint(config, model, H, train_split)
    run = assimilate(config, model, H, ckpt, train_split, test_split)
    if config.paths.get("analysis"):
        fileformats.write_snapshots(config.paths["analysis"], run.states)
    n_ok = len(run.analysis)
    series = rmse(run.analysis, test_split[:n_ok]) if n_ok else np.empty(0)
    value = float(np.mean(series)) if n_ok else float("inf")
    if config.paths.get("series"):
        emit_series(series, config.paths["series"], model.obs_interval)
    return ReportRow(config.system, config.F, config.nu, config.sigma, config.sparsity,
                     config.method, config.K, config.seed, value, run.diverged,
                     time.perf_counter() - start, series)


def run_grid(configs, workers=None):
    """Run several experiments, in a process pool when more than one worker is allowed."""
    if workers is None:
        workers = int(os.environ.get("NUDGEFORGE_THREADS", "1"))
    configs = sorted(configs, key=lambda c: c.sort_key())
    if workers <= 1 or len(configs) <= 1:
        rows = [run_experiment(c) for c in configs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_experiment, configs))
    return rows


def paper_grid(system, method=None, seed=0, **overrides):
    """All (sigma, sparsity, method) cells of a benchmark grid."""
    methods = (method,) if method else ("nnn", "linear")
    if system == "lorenz96":
        pairs = [dict(F=F, sigma=s) for F, s in L96_REGIMES.items()]
    elif system == "kuramoto_sivashinsky":
        pairs = [dict(sigma=s) for s in KS_SIGMAS]
    else:
        pairs = [dict(sigma=s) for s in KF_SIGMAS]
    return [ExperimentConfig(system=system, sparsity=sp, method=m, seed=seed, **p, **overrides)
            for p in pairs for sp in SPARSITIES[system] for m in methods]


# ---------------------------------------------------------------- emitters


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_report(rows, path):
    rows = sorted(rows, key=lambda r: (r.system, r.F or 0.0, r.nu or 0.0, r.sigma,
                                       -r.sparsity, r.method, r.K, r.seed))
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ReportRow.CSV_COLUMNS)
        for r in rows:
            w.writerow([_fmt(getattr(r, c)) for c in ReportRow.CSV_COLUMNS])


def emit_series(series, path, dt=1.0, t0=0.0):
    """Per-step RMSE as CSV with columns ``t, rmse`` (t = t0 + k * dt, k >= 1)."""
    series = np.asarray(series, dtype=np.float64)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "rmse"])
        for k, v in enumerate(series, start=1):
            w.writerow([repr(t0 + k * dt), repr(float(v))])


def emit_field(state, extents, path):
    """Plain PGM (P2) heatmap with min-max scaling to 8-bit gray levels."""
    extents = tuple(extents)
    if len(extents) == 1:
        extents = (1,) + extents
    field_ = np.asarray(state, dtype=np.float64).reshape(extents)
    lo, hi = field_.min(), field_.max()
    if hi > lo:
        levels = np.rint(255 * (field_ - lo) / (hi - lo)).astype(int)
    else:
        levels = np.zeros(extents, dtype=int)
    with open(path, "w") as f:
        f.write(f"P2\n{extents[1]} {extents[0]}\n255\n")
        for row in levels:
            f.write(" ".join(str(v) for v in row) + "\n")
