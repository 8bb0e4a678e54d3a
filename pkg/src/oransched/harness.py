"""Experiment driver: instance construction, the exhaustive oracle, scheduler registry and
sweeps with CSV/JSON export. Every reported ESR and Sat comes from the exact-rate oracle."""
from __future__ import annotations

import csv
import dataclasses
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .approx import ApproxCoeffs, build_coeffs
from .baselines import BaselineConfig, mshs_schedule, sus_zf_schedule
from .central import DEFAULT_RHO, centralized_bcd, objective_G
from .channel import svd_cache
from .distributed import DEFAULT_ALPHA, run_distributed
from .errors import BruteForceRefused, ConfigurationError
from .ezf import Schedule, esr_and_sat
from .scenario import RfConfig, build_scenario, layout_for, single_cell_layout

BRUTE_FORCE_LIMIT = 20
SWEEP_VARS = ("num_qos", "num_ues", "nt", "rho", "alpha")


@dataclass
class Instance:
    scenario: object
    channels: object
    cache: object
    coeffs: ApproxCoeffs
    seed: int = 0


def instance_from(scenario, channels, seed: int = 0) -> Instance:
    cache = svd_cache(channels, scenario)
    return Instance(scenario, channels, cache, build_coeffs(cache, scenario), seed)


def make_instance(config: RfConfig = RfConfig(), num_ues: int = 18, num_qos: int = 8,
                  q_range=(0.0, 60.0), seed: int = 0, layout=None) -> Instance:
    layout = layout_for(config, num_ues) if layout is None else layout
    scenario, channels = build_scenario(config, layout, seed, num_qos, q_range)
    return instance_from(scenario, channels, seed)


TINY_CONFIG = RfConfig(num_cells=1, num_ccs=2, num_rbgs=2, nt=4, nr=2)


def tiny_instance(seed: int, num_qos: int = 1, q_range=(0.0, 60.0), nt: int = 4) -> Instance:
    """One cell, three UEs, 2 CCs x 2 RBGs: 12 scheduling bits, 4096 schedules."""
    config = dataclasses.replace(TINY_CONFIG, nt=nt)
    return make_instance(config, 3, num_qos, q_range, seed, single_cell_layout(3))


# --- exhaustive oracle ------------------------------------------------------------------------

def _variables(scenario):
    """One decision variable per (UE, CC, RBG); a JT variable drives all its serving cells."""
    cfg = scenario.config
    return [(ue.serving_set, ue.id, c, r) for ue in scenario.ues
            for c in range(cfg.num_ccs) for r in range(cfg.num_rbgs)]


def _decode(idx, variables, shape):
    n_var = len(variables)
    bits = ((idx[:, None] >> np.arange(n_var)) & 1).astype(bool)
    b = np.zeros((idx.size,) + shape, bool)  # (n, M, C, R, K)
    for v, (cells, k, c, r) in enumerate(variables):
        for m in cells:
            b[:, m, c, r, k] = bits[:, v]
    return b


def enumerate_objective(coeffs: ApproxCoeffs, scenario, rho: float, chunk: int = 4096,
                        max_bits: int = BRUTE_FORCE_LIMIT):
    """Yield (indices, G, all_qos_met) over every consistent schedule; infeasible ones get -inf."""
    variables = _variables(scenario)
    if len(variables) > max_bits:
        raise BruteForceRefused(f"{len(variables)} scheduling bits exceed the limit of {max_bits}")
    shape = coeffs.psi.shape
    q = scenario.has_qos
    demand = scenario.demand
    total = 1 << len(variables)
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total), dtype=np.int64)
        b = _decode(idx, variables, shape)
        phi = b.sum(axis=-1)
        inter = np.einsum("nmcrj,mcrjt->nmcrt", b.astype(float), coeffs.d)
        g = np.log2(np.maximum(phi, 1))[..., None]
        rate = np.where(b, coeffs.weight * (coeffs.psi + inter - g), 0.0)
        totals = rate.sum(axis=(1, 2, 3))
        value = totals[:, ~q].sum(axis=1) + rho * np.minimum(totals[:, q], demand[q]).sum(axis=1)
        bad = (phi > coeffs.nt).any(axis=(1, 2, 3)) | (b & ~coeffs.usable).any(axis=(1, 2, 3, 4))
        met = (totals[:, q] >= demand[q]).all(axis=1)
        yield idx, np.where(bad, -np.inf, value), met & ~bad


@dataclass
class OracleResult:
    schedule: Schedule
    value: float
    esr: Optional[float]
    sat: Optional[float]
    num_schedules: int


def _schedule_from_index(i, scenario, shape) -> Schedule:
    b = _decode(np.array([i], dtype=np.int64), _variables(scenario), shape)[0]
    return Schedule(np.transpose(b, (0, 3, 1, 2)))


def brute_force_optimum(coeffs: ApproxCoeffs, scenario, rho: float = DEFAULT_RHO, channels=None,
                        cache=None, max_bits: int = BRUTE_FORCE_LIMIT) -> OracleResult:
    """Exhaustive maximizer of the penalty objective over all JT-consistent schedules.

    Ties go to the lowest enumeration index. When ``channels`` and ``cache`` are given the
    exact-rate ESR and Sat of the argmax are reported too.
    """
    best_i, best_v, n = 0, -np.inf, 0
    for idx, value, _ in enumerate_objective(coeffs, scenario, rho, max_bits=max_bits):
        n += idx.size
        j = int(np.argmax(value))
        if value[j] > best_v:
            best_i, best_v = int(idx[j]), float(value[j])
    sched = _schedule_from_index(best_i, scenario, coeffs.psi.shape)
    esr = sat = None
    if channels is not None and cache is not None:
        esr, sat = esr_and_sat(sched, channels, cache, scenario)
    return OracleResult(sched, best_v, esr, sat, n)


def qos_feasible(coeffs: ApproxCoeffs, scenario, max_bits: int = BRUTE_FORCE_LIMIT) -> bool:
    """True when some schedule meets every QoS demand under the approximate rates."""
    return any(met.any() for _, _, met in enumerate_objective(coeffs, scenario, 0.0, max_bits=max_bits))


# --- scheduler registry ----------------------------------------------------------------------

@dataclass
class RunOutput:
    schedule: Schedule
    objective: float
    wall_ms: float
    ledger: Optional[dict] = None
    extra: dict = field(default_factory=dict)


def _run_pcs(inst, rho, alpha, threads):
    res = centralized_bcd(inst.coeffs, inst.scenario, rho)
    return res.schedule, res.trace[-1], None, {"sweeps": res.sweeps, "trace": res.trace}


def _run_pds(inst, rho, alpha, threads, coordinate_njt=True):
    res = run_distributed(inst.coeffs, inst.scenario, rho, alpha, threads, coordinate_njt)
    g = objective_G(inst.coeffs, res.schedule, inst.scenario, rho)
    return res.schedule, g, res.ledger.to_dict(), {"stage_traces": res.traces}


def _run_pds_nc(inst, rho, alpha, threads):
    return _run_pds(inst, rho, alpha, threads, coordinate_njt=False)


def _run_sus(inst, rho, alpha, threads):
    s = sus_zf_schedule(inst.channels, inst.cache, inst.scenario, BaselineConfig())
    return s, objective_G(inst.coeffs, s, inst.scenario, rho), None, {}


def _run_mshs(inst, rho, alpha, threads):
    s = mshs_schedule(inst.channels, inst.cache, inst.scenario, BaselineConfig())
    return s, objective_G(inst.coeffs, s, inst.scenario, rho), None, {}


SCHEDULERS = {"pcs": _run_pcs, "pds": _run_pds, "pds-nc": _run_pds_nc, "sus-zf": _run_sus,
              "mshs": _run_mshs}


def run_scheduler(name: str, inst: Instance, rho: float = DEFAULT_RHO, alpha: float = DEFAULT_ALPHA,
                  threads: int = 4) -> RunOutput:
    if name not in SCHEDULERS:
        raise ConfigurationError(f"unknown scheduler {name!r}; choose from {sorted(SCHEDULERS)}")
    if rho < 0:
        raise ConfigurationError(f"rho must be >= 0, got {rho}")
    t0 = time.perf_counter()
    sched, g, ledger, extra = SCHEDULERS[name](inst, rho, alpha, threads)
    wall = (time.perf_counter() - t0) * 1e3
    return RunOutput(sched, float(g), wall, ledger, extra)


# --- experiments -----------------------------------------------------------------------------

@dataclass
class ExperimentSpec:
    schedulers: list
    seeds: list
    sweep_var: str = "num_qos"
    grid: list = field(default_factory=lambda: [8])
    config: dict = field(default_factory=dict)
    num_ues: int = 18
    num_qos: int = 8
    q_range: tuple = (0.0, 60.0)
    rho: float = DEFAULT_RHO
    alpha: float = DEFAULT_ALPHA
    worker_threads: int = 4
    output: Optional[str] = None

    def __post_init__(self):
        if not self.seeds:
            raise ConfigurationError("ExperimentSpec.seeds must be nonempty")
        if not self.grid:
            raise ConfigurationError("ExperimentSpec.grid must be nonempty")
        if self.sweep_var not in SWEEP_VARS:
            raise ConfigurationError(f"sweep_var must be one of {SWEEP_VARS}")
        unknown = [s for s in self.schedulers if s not in SCHEDULERS]
        if unknown or not self.schedulers:
            raise ConfigurationError(f"unknown or missing schedulers: {unknown}")
        RfConfig.from_dict(self.config)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown ExperimentSpec keys: {sorted(unknown)}")
        d = dict(d)
        if "q_range" in d:
            d["q_range"] = tuple(d["q_range"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["q_range"] = list(self.q_range)
        return d


@dataclass
class ResultRecord:
    scheduler: str
    seed: int
    sweep_var: str
    sweep_value: float
    esr: float
    sat: float
    objective: float
    wall_ms: float
    ledger: Optional[dict] = None

    def __post_init__(self):
        if self.esr < 0 or not 0.0 <= self.sat <= 1.0:
            raise ValueError(f"invalid metrics esr={self.esr}, sat={self.sat}")

    def row(self) -> dict:
        d = dataclasses.asdict(self)
        d["ledger"] = json.dumps(self.ledger) if self.ledger else ""
        return d


def _point_settings(spec: ExperimentSpec, value):
    cfg = dict(spec.config)
    num_ues, num_qos, rho, alpha = spec.num_ues, spec.num_qos, spec.rho, spec.alpha
    if spec.sweep_var == "num_qos":
        num_qos = int(value)
    elif spec.sweep_var == "num_ues":
        num_ues = int(value)
    elif spec.sweep_var == "nt":
        cfg["nt"] = int(value)
    elif spec.sweep_var == "rho":
        rho = float(value)
    elif spec.sweep_var == "alpha":
        alpha = float(value)
    return RfConfig.from_dict(cfg), num_ues, num_qos, rho, alpha


def _run_point(spec: ExperimentSpec, value, seed) -> list:
    config, num_ues, num_qos, rho, alpha = _point_settings(spec, value)
    inst = make_instance(config, num_ues, num_qos, spec.q_range, seed)
    out = []
    for name in spec.schedulers:
        run = run_scheduler(name, inst, rho, alpha, spec.worker_threads)
        esr, sat = esr_and_sat(run.schedule, inst.channels, inst.cache, inst.scenario)
        out.append(ResultRecord(name, seed, spec.sweep_var, float(value), esr, sat, run.objective,
                                run.wall_ms, run.ledger))
    return out


def summarize(records) -> list:
    """Mean and standard deviation of ESR, Sat and wall-clock per (scheduler, sweep value)."""
    groups = {}
    for rec in records:
        groups.setdefault((rec.scheduler, rec.sweep_value), []).append(rec)
    rows = []
    for (name, value), recs in sorted(groups.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        esr = np.array([r.esr for r in recs])
        sat = np.array([r.sat for r in recs])
        wall = np.array([r.wall_ms for r in recs])
        rows.append({"scheduler": name, "sweep_value": value, "n": len(recs),
                     "esr_mean": esr.mean(), "esr_std": esr.std(), "sat_mean": sat.mean(),
                     "sat_std": sat.std(), "wall_ms_median": float(np.median(wall))})
    return rows


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    records: list
    summary: list


def run_experiment(spec: ExperimentSpec, workers: int = 1, on_record=None) -> ExperimentResult:
    """Run every (sweep value, seed, scheduler) combination.

    Points may run in parallel; records are collected in fixed (value, seed, scheduler) order so
    the output does not depend on ``workers``. ``on_record`` sees each record as it is collected.
    """
    points = [(v, s) for v in spec.grid for s in spec.seeds]
    records = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = [pool.submit(_run_point, spec, v, s) for v, s in points]
        for fut in futures:
            for rec in fut.result():
                records.append(rec)
                if on_record is not None:
                    on_record(rec)
    result = ExperimentResult(spec, records, summarize(records))
    if spec.output:
        write_outputs(result, spec.output)
    return result


def _write_csv(path, rows, columns=None):
    rows = list(rows)
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns)
        w.writeheader()
        w.writerows(rows)


def figure_table(summary, metric: str) -> list:
    """Plot-ready rows: one per sweep value, one ``<scheduler>`` column per scheme."""
    table = {}
    for row in summary:
        table.setdefault(row["sweep_value"], {"sweep_value": row["sweep_value"]})[row["scheduler"]] = \
            row[metric]
    return [table[k] for k in sorted(table)]


def write_outputs(result: ExperimentResult, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    var = result.spec.sweep_var
    paths = {"records": out / "records.csv", "summary": out / "summary.csv",
             "summary_json": out / "summary.json", "esr": out / f"esr_vs_{var}.csv",
             "sat": out / f"sat_vs_{var}.csv"}
    _write_csv(paths["records"], [r.row() for r in result.records],
               [f.name for f in dataclasses.fields(ResultRecord)])
    _write_csv(paths["summary"], result.summary)
    cols = ["sweep_value"] + list(result.spec.schedulers)
    _write_csv(paths["esr"], figure_table(result.summary, "esr_mean"), cols)
    _write_csv(paths["sat"], figure_table(result.summary, "sat_mean"), cols)
    paths["summary_json"].write_text(json.dumps({"spec": result.spec.to_dict(),
                                                 "summary": result.summary}, indent=1))
    return {k: str(v) for k, v in paths.items()}


def convergence_trace(inst: Instance, rho: float = 1.0, max_sweeps: int = 20) -> list:
    """Per-sweep PCS rows: approximate objective G, exact ESR and Sat, and both normalized
    per RBG per UE (``f_a``, ``f_t``)."""
    cfg = inst.scenario.config
    norm = cfg.num_ccs * cfg.num_rbgs * inst.scenario.num_ues
    rows = []

    def record(sweep, sched, value):
        esr, sat = esr_and_sat(sched, inst.channels, inst.cache, inst.scenario)
        rows.append({"sweep": sweep, "G": value, "ESR": esr, "Sat": sat, "f_a": value / norm,
                     "f_t": esr / norm})

    centralized_bcd(inst.coeffs, inst.scenario, rho, max_sweeps, on_sweep=record)
    return rows


def write_trace_csv(rows, path):
    _write_csv(path, rows)
