"""Configurable experiment sweeps behind the command-line front end.

Every sweep expands a hyperparameter grid into a deterministic list of cells,
derives one PRNG seed per cell from the master seed, optionally fans the
cells out over a thread pool, writes one RunRecord per cell (before any CSV,
so partial failures leave a queryable audit trail), and emits long-format
CSV grids.  Given (config, seed) the output bytes are identical across runs
and thread counts.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from . import __version__
from .activations import ActivationKind
from .meanfield import InitHyper, classify_phase, run_trace
from .ntk_theory import compute_kappas, data_independent_kappas, nngp_matrix, \
    predict_variance, theta_star_matrix, variance_oracle_mc
from .finite_net import TrainConfig, init, layer_widths, train_full_batch, forward_batch
from .empirical_ntk import default_probe, init_variance_ratio, training_drift
from .data_io import RecordStore, RunRecord, synthetic_dataset, write_csv, \
    gram_anchored_inputs
from .meanfield import avg_phi_prod, avg_phi_sq

EXPERIMENT_KINDS = ("phase-diagram", "init-variance", "lm-curves", "train-drift",
                    "kappa-curves", "predict-variance")


class ConfigError(Exception):
    """Invalid sweep configuration (reported as exit code 1 by the CLI)."""


@dataclass
class SweepConfig:
    """Grid specification for one experiment.

    Defaults mirror the reference protocol where one exists: widths
    {50, 100, 200, 500} for variance heatmaps, the (1,1)/(1.5,1)/(2,0)/(3,1)
    hyperparameter quartet for depth-to-width curves, learning rate 1e-5 and
    the 1e-7/100-step early-stopping rule for training runs.
    """

    experiment: str = "phase-diagram"
    activation: str = "relu"
    sigma_w_sq: list = field(default_factory=lambda: [1.0, 1.5, 2.0, 2.5, 3.0])
    sigma_b_sq: list = field(default_factory=lambda: [1.0])
    depths: list = field(default_factory=lambda: [2, 4, 8, 16, 32])
    widths: list = field(default_factory=lambda: [64])
    covariances: list = field(default_factory=lambda: [0.0, 0.5, 0.9])
    n_seeds: int = 200
    sample_count: int = 128
    input_dim: int | None = None
    train_steps: int = 2000
    learning_rate: float = 1e-5
    snapshot_steps: list = field(default_factory=lambda: [0, 10, 100, 1000, 10000])
    reference_cov: float = 0.5
    mc_samples: int = 100_000
    train_seeds: int = 0           # >0 adds end-to-end trained-network variance
    seed: int = 0
    threads: int = 1
    out_dir: str = "out"

    @classmethod
    def from_yaml(cls, path) -> "SweepConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                raw = yaml.safe_load(fh) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as err:
            raise ConfigError(f"cannot parse {path}: {err}") from None
        return cls.from_mapping(raw)

    @classmethod
    def from_mapping(cls, raw: dict) -> "SweepConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def override(self, assignments: Sequence[str]) -> "SweepConfig":
        """Apply key=value overrides (values parsed as YAML scalars/lists)."""
        data = asdict(self)
        for item in assignments:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            if key not in data:
                raise ConfigError(f"unknown config key {key!r}")
            data[key] = yaml.safe_load(value)
        return SweepConfig(**data)

    def validate(self) -> None:
        if self.experiment not in EXPERIMENT_KINDS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; "
                              f"choose from {EXPERIMENT_KINDS}")
        try:
            ActivationKind.from_name(self.activation)
        except ValueError as err:
            raise ConfigError(str(err)) from None
        try:
            for sw in self.sigma_w_sq:
                for sb in self.sigma_b_sq:
                    InitHyper(float(sw), float(sb), self.kind)
        except (ValueError, TypeError) as err:
            raise ConfigError(f"invalid hyperparameter grid: {err}") from None
        if any(int(d) < 1 for d in self.depths):
            raise ConfigError("depths must be >= 1")
        if any(int(m) < 1 for m in self.widths):
            raise ConfigError("widths must be >= 1")
        if any(not 0.0 <= float(c) <= 1.0 for c in self.covariances):
            raise ConfigError("covariances must lie in [0, 1]")
        if self.n_seeds < 2:
            raise ConfigError("n_seeds must be >= 2")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    @property
    def kind(self) -> ActivationKind:
        return ActivationKind.from_name(self.activation)

    def hyper(self, sw: float, sb: float) -> InitHyper:
        return InitHyper(float(sw), float(sb), self.kind)

    def train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, max_steps=self.train_steps)


def cell_seeds(master_seed: int, n_cells: int) -> np.ndarray:
    return np.random.SeedSequence(master_seed).generate_state(n_cells, dtype=np.uint64)


def _run_cells(cells: list, worker: Callable, threads: int) -> list:
    """Evaluate cells in deterministic order; output order equals input order."""
    if threads <= 1:
        return [worker(c) for c in cells]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(worker, cells))


@dataclass
class SweepOutput:
    records: list
    csv_paths: list


def _store(cfg: SweepConfig) -> RecordStore:
    return RecordStore(Path(cfg.out_dir) / "records.jsonl")


def _record(store: RecordStore, kind: str, params: dict, stats: dict,
            seed: int, elapsed: float) -> RunRecord:
    rec = RunRecord(kind=kind, params=params, stats=stats, seed=int(seed),
                    wall_clock_s=round(elapsed, 6), code_version=__version__)
    store.append(rec)
    return rec


# ---------------------------------------------------------------------------
# phase-diagram

def run_phase_diagram(cfg: SweepConfig) -> SweepOutput:
    """chi1 fixed-point values and phase labels over the (sigma_w^2, sigma_b^2) grid."""
    cfg.validate()
    store = _store(cfg)
    cells = [(float(sw), float(sb)) for sb in cfg.sigma_b_sq for sw in cfg.sigma_w_sq]

    def worker(cell):
        sw, sb = cell
        t0 = time.perf_counter()
        label = classify_phase(cfg.hyper(sw, sb))
        return cell, label, time.perf_counter() - t0

    rows, records = [], []
    for (sw, sb), label, elapsed in _run_cells(cells, worker, cfg.threads):
        params = dict(activation=cfg.activation, sigma_w_sq=sw, sigma_b_sq=sb)
        stats = dict(chi1_fixed_point=label.chi1_fixed_point, phase=label.tag.value)
        records.append(_record(store, "phase-diagram", params, stats, cfg.seed, elapsed))
        rows.append([cfg.activation, sw, sb, label.chi1_fixed_point, label.tag.value])
    csv_path = Path(cfg.out_dir) / "phase_diagram.csv"
    write_csv(csv_path, ["activation", "sigma_w_sq", "sigma_b_sq",
                         "chi1_fixed_point", "phase"], rows)
    return SweepOutput(records=records, csv_paths=[csv_path])


# ---------------------------------------------------------------------------
# init-variance (heatmap) and lm-curves share one runner

def run_init_variance(cfg: SweepConfig) -> SweepOutput:
    """Kernel variance ratio over (sigma_w^2, depth) plus depth-to-width curves."""
    cfg.validate()
    store = _store(cfg)
    sb = float(cfg.sigma_b_sq[0])
    heat_cells = [(float(sw), int(L), int(M))
                  for M in cfg.widths for L in cfg.depths for sw in cfg.sigma_w_sq]
    seeds = cell_seeds(cfg.seed, len(heat_cells))

    def worker(args):
        (sw, L, M), cell_seed = args
        t0 = time.perf_counter()
        dim = cfg.input_dim or M
        probe = default_probe(dim, int(cell_seed))
        stat = init_variance_ratio(layer_widths(dim, M, L), cfg.hyper(sw, sb),
                                   probe, cfg.n_seeds, seed=int(cell_seed))
        return (sw, L, M), stat, time.perf_counter() - t0

    rows, curve_rows, records = [], [], []
    for (sw, L, M), stat, elapsed in _run_cells(list(zip(heat_cells, seeds)),
                                                worker, cfg.threads):
        params = dict(activation=cfg.activation, sigma_w_sq=sw, sigma_b_sq=sb,
                      depth=L, width=M, n_seeds=cfg.n_seeds)
        stats = dict(ratio=stat.ratio, standard_error=stat.standard_error,
                     mean=stat.mean, n_failed=stat.n_failed)
        records.append(_record(store, "init-variance", params, stats, cfg.seed, elapsed))
        rows.append([cfg.activation, sw, sb, L, M, stat.ratio, stat.standard_error])
        curve_rows.append([cfg.activation, sw, sb, M, L, L / M, stat.ratio])
    heat_path = Path(cfg.out_dir) / "init_variance_heatmap.csv"
    write_csv(heat_path, ["activation", "sigma_w_sq", "sigma_b_sq", "depth",
                          "width", "ratio", "standard_error"], rows)
    curve_path = Path(cfg.out_dir) / "init_variance_lm_curves.csv"
    write_csv(curve_path, ["activation", "sigma_w_sq", "sigma_b_sq", "width",
                           "depth", "depth_over_width", "ratio"], curve_rows)
    return SweepOutput(records=records, csv_paths=[heat_path, curve_path])


run_lm_curves = run_init_variance


# ---------------------------------------------------------------------------
# train-drift

def run_train_drift(cfg: SweepConfig) -> SweepOutput:
    """Final kernel drift and final loss over (sigma_w^2, depth), plus per-step curves."""
    cfg.validate()
    store = _store(cfg)
    sb = float(cfg.sigma_b_sq[0])
    M = int(cfg.widths[0])
    dim = cfg.input_dim or M
    data = synthetic_dataset(cfg.sample_count, dim, seed=cfg.seed)
    cells = [(float(sw), int(L)) for L in cfg.depths for sw in cfg.sigma_w_sq]
    seeds = cell_seeds(cfg.seed, len(cells))
    tc = cfg.train_config()
    snaps = sorted(set(int(t) for t in cfg.snapshot_steps) | {0, cfg.train_steps})

    def worker(args):
        (sw, L), cell_seed = args
        t0 = time.perf_counter()
        reps = []
        for k in range(cfg.n_seeds):
            reps.append(training_drift(layer_widths(dim, M, L), cfg.hyper(sw, sb),
                                       data.inputs, data.targets, tc,
                                       snapshot_steps=snaps,
                                       seed=int(cell_seed) + k))
        return (sw, L), reps, time.perf_counter() - t0

    rows, curve_rows, records = [], [], []
    for (sw, L), reps, elapsed in _run_cells(list(zip(cells, seeds)), worker, cfg.threads):
        drift = float(np.mean([r.final_drift for r in reps]))
        final_loss = float(np.mean([r.final_loss for r in reps]))
        initial_loss = float(np.mean([r.initial_loss for r in reps]))
        params = dict(activation=cfg.activation, sigma_w_sq=sw, sigma_b_sq=sb,
                      depth=L, width=M, sample_count=cfg.sample_count,
                      learning_rate=cfg.learning_rate, steps=cfg.train_steps,
                      n_seeds=cfg.n_seeds)
        stats = dict(final_drift=drift, final_loss=final_loss, initial_loss=initial_loss)
        records.append(_record(store, "train-drift", params, stats, cfg.seed, elapsed))
        rows.append([cfg.activation, sw, sb, L, M, drift, final_loss, initial_loss])
        for rep_idx, rep in enumerate(reps):
            for step, rel in zip(rep.steps, rep.rel_change):
                curve_rows.append([cfg.activation, sw, sb, L, M, rep_idx,
                                   int(step), float(rel)])
    heat_path = Path(cfg.out_dir) / "train_drift_heatmap.csv"
    write_csv(heat_path, ["activation", "sigma_w_sq", "sigma_b_sq", "depth", "width",
                          "final_drift", "final_loss", "initial_loss"], rows)
    curve_path = Path(cfg.out_dir) / "train_drift_curves.csv"
    write_csv(curve_path, ["activation", "sigma_w_sq", "sigma_b_sq", "depth", "width",
                           "replicate", "step", "rel_change"], curve_rows)
    return SweepOutput(records=records, csv_paths=[heat_path, curve_path])


# ---------------------------------------------------------------------------
# kappa-curves

def run_kappa_curves(cfg: SweepConfig) -> SweepOutput:
    """kappa2(L) and kappa1/kappa2(L) for the configured covariances and hypers."""
    cfg.validate()
    store = _store(cfg)
    rows, records = [], []
    for sw in cfg.sigma_w_sq:
        for sb in cfg.sigma_b_sq:
            hyper = cfg.hyper(sw, sb)
            t0 = time.perf_counter()
            for c0 in cfg.covariances:
                for L in cfg.depths:
                    trace = run_trace(hyper, int(L), q0=1.0, q0_sr=float(c0))
                    pair = compute_kappas(trace)
                    ratio = pair.kappa1 / pair.kappa2 if pair.kappa2 else float("inf")
                    rows.append([cfg.activation, float(sw), float(sb), float(c0),
                                 int(L), pair.kappa1, pair.kappa2, ratio])
            params = dict(activation=cfg.activation, sigma_w_sq=float(sw),
                          sigma_b_sq=float(sb), covariances=list(cfg.covariances),
                          depths=[int(d) for d in cfg.depths])
            records.append(_record(store, "kappa-curves", params,
                                   dict(rows=len(cfg.covariances) * len(cfg.depths)),
                                   cfg.seed, time.perf_counter() - t0))
    csv_path = Path(cfg.out_dir) / "kappa_curves.csv"
    write_csv(csv_path, ["activation", "sigma_w_sq", "sigma_b_sq", "covariance",
                         "depth", "kappa1", "kappa2", "kappa_ratio"], rows)
    return SweepOutput(records=records, csv_paths=[csv_path])


# ---------------------------------------------------------------------------
# predict-variance

def _trained_variance_mc(hyper: InitHyper, depth: int, m_width: int, s: int,
                         c0: float, tc: TrainConfig, n_nets: int, seed: int) -> float:
    """Variance over seeds of trained finite networks' output on a held-out point.

    The training inputs and the test point all share the layer-0 covariance
    c0, realized exactly through a Gram-anchored input construction.
    """
    kind = hyper.activation
    q_hat0 = avg_phi_sq(kind, 1.0)
    q_hat0_sr = avg_phi_prod(kind, 1.0, 1.0, c0)
    dim = m_width
    gram = np.full((s + 1, s + 1), dim * q_hat0_sr)
    np.fill_diagonal(gram, dim * q_hat0)
    points = gram_anchored_inputs(gram, dim, seed=seed)
    x_test, x_train = points[0], points[1:]
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, 0x7a11))))
    y = rng.uniform(0.0, 1.0, size=s)
    outs = np.empty(n_nets)
    for k in range(n_nets):
        net = init(layer_widths(dim, m_width, depth), hyper, seed + 1000 + k)
        train_full_batch(net, x_train, y, tc)
        out, _ = forward_batch(net, x_test[None, :])
        outs[k] = out[0]
    return float(np.var(outs, ddof=1))


def run_predict_variance(cfg: SweepConfig) -> SweepOutput:
    """Closed-form trained-output variance vs the Monte-Carlo oracle (and,
    when train_seeds > 0, vs end-to-end trained wide networks)."""
    cfg.validate()
    store = _store(cfg)
    sb = float(cfg.sigma_b_sq[0])
    M = int(cfg.widths[0])
    s = int(cfg.sample_count)
    c0 = float(cfg.reference_cov)
    rows, records = [], []
    for sw in cfg.sigma_w_sq:
        for L in cfg.depths:
            hyper = cfg.hyper(sw, sb)
            t0 = time.perf_counter()
            L = int(L)
            kbars = data_independent_kappas(hyper, L, reference_cov=c0)
            ref_trace = run_trace(hyper, L, q0=1.0, q0_sr=c0)
            q_bar, q_bar_sr = float(ref_trace.q[L]), float(ref_trace.q_sr[L])
            pred = predict_variance(kbars, q_bar, q_bar_sr, s)

            cov0 = np.full((s, s), c0)
            np.fill_diagonal(cov0, 1.0)
            theta = theta_star_matrix(hyper, L, cov0, M, reference_cov=c0)
            joint_cov0 = np.full((s + 1, s + 1), c0)
            np.fill_diagonal(joint_cov0, 1.0)
            joint = nngp_matrix(hyper, L, joint_cov0)
            # test point at the same covariance to every training point
            pair = compute_kappas(run_trace(hyper, L, q0=1.0, q0_sr=c0))
            theta_x = np.full(s, theta.scale * pair.kappa2 + pair.p_sum_cross)
            mc = variance_oracle_mc(theta, joint, theta_x, cfg.mc_samples, seed=cfg.seed)
            stats = dict(A=pred.A, predicted=pred.variance, mc=mc.variance,
                         mc_se=mc.standard_error,
                         rel_gap=abs(pred.variance - mc.variance) / mc.variance)
            trained = None
            if cfg.train_seeds > 0:
                trained = _trained_variance_mc(hyper, L, M, s, c0, cfg.train_config(),
                                               cfg.train_seeds, cfg.seed)
                stats["trained"] = trained
            params = dict(activation=cfg.activation, sigma_w_sq=float(sw),
                          sigma_b_sq=sb, depth=L, width=M, sample_count=s,
                          reference_cov=c0, mc_samples=cfg.mc_samples)
            records.append(_record(store, "predict-variance", params, stats,
                                   cfg.seed, time.perf_counter() - t0))
            rows.append([cfg.activation, float(sw), sb, L, M, s, pred.A,
                         pred.variance, mc.variance, mc.standard_error,
                         "" if trained is None else trained])
    csv_path = Path(cfg.out_dir) / "predict_variance.csv"
    write_csv(csv_path, ["activation", "sigma_w_sq", "sigma_b_sq", "depth", "width",
                         "sample_count", "A", "predicted_variance", "mc_variance",
                         "mc_standard_error", "trained_variance"], rows)
    return SweepOutput(records=records, csv_paths=[csv_path])


RUNNERS = {
    "phase-diagram": run_phase_diagram,
    "init-variance": run_init_variance,
    "lm-curves": run_lm_curves,
    "train-drift": run_train_drift,
    "kappa-curves": run_kappa_curves,
    "predict-variance": run_predict_variance,
}


def run_experiment(cfg: SweepConfig) -> SweepOutput:
    cfg.validate()
    return RUNNERS[cfg.experiment](cfg)
