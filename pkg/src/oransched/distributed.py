"""Three-stage distributed scheduler on a simulated O-DU.

PU_1..PU_M each own one cell and run one core per CC; PU_0 only coordinates JT-UEs.
Stage 1 runs local BCD on every core, Stage 2.1 (PU_0, JT consensus) and Stage 2.2 (each PU,
NJT QoS split across CCs) run concurrently, and Stage 3 refines NJT bits on every core.
Exactly one upload and one download cross the PU boundary per worker PU.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .approx import ApproxCoeffs
from .central import DEFAULT_RHO, PenaltyObjective
from .corebatch import CoreBatch, enforce_cap, lane_width, run_refine, run_stage1
from .errors import ConfigurationError, ProtocolError
from .ezf import Schedule

DEFAULT_ALPHA = 0.5
SCALAR_BYTES = 8
BIT_BYTES = 1
HEADER_BYTES = 16


@dataclass
class JtFragment:
    """What core [m, c] uploads about one of its JT-UEs, per RBG."""
    fbar: np.ndarray        # rate with the bit tentatively 1
    inf_1to0: np.ndarray
    inf_0to1: np.ndarray
    scheduled: np.ndarray   # Stage-1 decision
    room: np.ndarray        # the cell can accept the UE on that RBG


@dataclass
class CoordinationPayload:
    cell: int
    cc: int
    jt: dict                 # JT-UE -> JtFragment
    njt_active_rates: dict   # NJT-UE -> {rbg: rate} for bits set by Stage 1

    @property
    def upload_bytes(self) -> int:
        n_rbg = len(next(iter(self.jt.values())).fbar) if self.jt else 0
        return HEADER_BYTES + len(self.jt) * n_rbg * (3 * SCALAR_BYTES + 2 * BIT_BYTES)

    @property
    def exchange_bytes(self) -> int:
        return HEADER_BYTES + sum(len(v) for v in self.njt_active_rates.values()) * (
            SCALAR_BYTES + BIT_BYTES)

    @property
    def byte_size(self) -> int:
        return self.upload_bytes + self.exchange_bytes


@dataclass
class CoreResult:
    cell: int
    cc: int
    ues: list               # global UE ids, local index order
    bits: np.ndarray        # (R, n_local)
    objective: float
    sweeps: int
    trace: list = field(default_factory=list)


@dataclass
class PuCounters:
    uploads: int = 0
    downloads: int = 0
    intra_exchanges: int = 0
    bytes_up: int = 0
    bytes_down: int = 0
    bytes_intra: int = 0


class MessageLedger:
    """Counts inter-PU and intra-PU message rounds; PU 0 is the coordinator."""

    def __init__(self, num_cells: int):
        self.pus = {p: PuCounters() for p in range(num_cells + 1)}

    def upload(self, pu: int, nbytes: int):
        self.pus[pu].uploads += 1
        self.pus[pu].bytes_up += nbytes

    def download(self, pu: int, nbytes: int):
        self.pus[pu].downloads += 1
        self.pus[pu].bytes_down += nbytes

    def exchange(self, pu: int, nbytes: int):
        self.pus[pu].intra_exchanges += 1
        self.pus[pu].bytes_intra += nbytes

    @property
    def total_bytes(self) -> int:
        return sum(p.bytes_up + p.bytes_down + p.bytes_intra for p in self.pus.values())

    def single_round(self) -> bool:
        return all(p.uploads == 1 and p.downloads == 1 for pu, p in self.pus.items() if pu > 0)

    def to_dict(self) -> dict:
        return {"pus": {str(pu): vars(p) for pu, p in self.pus.items()},
                "total_bytes": self.total_bytes}


def _local_objective(coeffs, scenario, m, c, rho, bits=None, offset=None):
    ues = scenario.associated(m)
    obj = PenaltyObjective.from_coeffs(coeffs, scenario, rho, cells=[m], ccs=[c], ues=ues,
                                       offset=offset)
    if bits is not None:
        obj.bits[0, 0] = bits
        obj.recompute()
    return obj, ues


def _alpha_pass(rate: float, fmax: float, alpha: float) -> bool:
    return rate > 0 and rate > alpha * fmax


def stage1_local(coeffs: ApproxCoeffs, scenario, m: int, c: int, rho: float = DEFAULT_RHO,
                 alpha: float = DEFAULT_ALPHA, max_sweeps: int = 10):
    """Local BCD of core [m, c] with the relative-rate filter, plus its coordination payload."""
    if not 0 <= alpha < 1:
        raise ConfigurationError(f"alpha must lie in [0, 1), got {alpha}")
    obj, ues = _local_objective(coeffs, scenario, m, c, rho)
    n_rbg = obj.bits.shape[2]
    sweeps = 0
    trace = [obj.value]
    while sweeps < max_sweeps:
        sweeps += 1
        changed = False
        for z in range(len(ues)):
            rates = [obj.candidate_rate(z, 0, r, 0) for r in range(n_rbg)]
            fmax = max(rates)
            for r in range(n_rbg):
                keep = obj.gain(z, 0, r, (0,)) > 0 and _alpha_pass(rates[r], fmax, alpha)
                changed |= obj.set_bit(z, 0, r, (0,), keep)
        trace.append(obj.value)
        if not changed:
            break
    result = CoreResult(m, c, ues, obj.bits[0, 0].copy(), obj.value, sweeps, trace)
    return result, _payload(obj, scenario, m, c, ues)


def _payload(obj: PenaltyObjective, scenario, m, c, ues) -> CoordinationPayload:
    bits = obj.bits[0, 0]
    n_rbg = bits.shape[0]
    jt, njt = {}, {}
    for li, t in enumerate(ues):
        if scenario.ues[t].is_jt:
            frag = JtFragment(*(np.zeros(n_rbg) for _ in range(3)), np.zeros(n_rbg, bool),
                              np.zeros(n_rbg, bool))
            for r in range(n_rbg):
                others = np.flatnonzero(bits[r])
                others = others[others != li]
                s = others.size
                dsum = float(obj.d[0, 0, r, li, others].sum())
                frag.fbar[r] = obj.weight[li] * (obj.psi[0, 0, r, li]
                                                 + float(obj.d[0, 0, r, others, li].sum())
                                                 - math.log2(s + 1))
                step = (math.log2(s + 1) - math.log2(s)) if s else 0.0
                frag.inf_1to0[r] = -dsum + s * step
                frag.inf_0to1[r] = dsum - s * step
                frag.scheduled[r] = bits[r, li]
                frag.room[r] = obj.usable[0, 0, r, li] and (bits[r, li] or s + 1 <= obj.nt)
            jt[t] = frag
        else:
            active = np.flatnonzero(bits[:, li])
            if active.size:
                njt[t] = {int(r): float(obj.rate[0, 0, r, li]) for r in active}
    return CoordinationPayload(m, c, jt, njt)


def min_count_selection(rates, demand):
    """Fewest items whose rates sum to at least ``demand``: take the largest first.

    ``rates`` is a list of (rate, key). Returns (selected keys, feasible).
    """
    order = sorted(rates, key=lambda x: (-x[0], x[1]))
    chosen, acc = [], 0.0
    for rate, key in order:
        if acc >= demand:
            break
        chosen.append(key)
        acc += rate
    if acc >= demand:
        return chosen, True
    return [key for _, key in order], False


@dataclass
class JtCoordination:
    consensus: dict          # JT-UE -> (C, R) bool
    qos_bar: dict            # (m, i) -> (C,) rate credited from outside core [m, c]
    best_effort: list
    fhat: dict               # (m, i) -> (C, R)


def stage21_jt_coordinate(payloads: dict, scenario) -> JtCoordination:
    """Consensus JT bits at PU_0 from every core's Stage-1 fragments.

    ``payloads`` maps (cell, cc) to CoordinationPayload.
    """
    cfg = scenario.config
    n_cc, n_rbg = cfg.num_ccs, cfg.num_rbgs
    consensus, qos_bar, fhat, best_effort = {}, {}, {}, []
    for i in scenario.jt_ues():
        cells = scenario.ues[i].serving_set
        frags = {}
        for m in cells:
            for c in range(n_cc):
                p = payloads.get((m, c))
                if p is None or i not in p.jt:
                    raise ProtocolError(f"missing Stage-1 fragment for JT-UE {i} from core [{m}, {c}]")
                frags[m, c] = p.jt[i]
        passes = np.zeros((n_cc, n_rbg), bool)
        all_on = np.zeros((n_cc, n_rbg), bool)
        total = np.zeros((n_cc, n_rbg))
        for c in range(n_cc):
            for r in range(n_rbg):
                f01 = f10 = 0.0
                room = True
                on = True
                for m in cells:
                    fr = frags[m, c]
                    if fr.scheduled[r]:
                        f10 += -fr.fbar[r] + fr.inf_1to0[r]
                    else:
                        f01 += fr.fbar[r] + fr.inf_0to1[r]
                        on = False
                    room &= bool(fr.room[r])
                    total[c, r] += fr.fbar[r]
                passes[c, r] = room and f01 > f10
                all_on[c, r] = on
        if scenario.ues[i].has_qos:
            eligible = passes | all_on
            cand = [(total[c, r], (c, r)) for c, r in zip(*np.nonzero(eligible))]
            chosen, ok = min_count_selection(cand, scenario.ues[i].qos_demand)
            if not ok:
                best_effort.append(i)
            b = np.zeros((n_cc, n_rbg), bool)
            for c, r in chosen:
                b[c, r] = True
        else:
            b = passes
        consensus[i] = b
        for m in cells:
            fhat[m, i] = np.array([np.where(b[c], frags[m, c].fbar, 0.0) for c in range(n_cc)])
        for m in cells:
            other_cells = sum(fhat[l, i].sum() for l in cells if l != m)
            own = fhat[m, i].sum(axis=1)
            qos_bar[m, i] = own.sum() - own + other_cells
    return JtCoordination(consensus, qos_bar, best_effort, fhat)


@dataclass
class NjtDecoupling:
    cell: int
    keep: dict        # (c, k) -> set of RBGs kept
    qos_bar: dict     # k -> (C,)
    best_effort: list


def stage22_njt_decouple(payloads: dict, scenario, m: int) -> NjtDecoupling:
    """Split each QoS NJT-UE's demand across the CCs of PU m by pruning surplus RBGs."""
    n_cc = scenario.config.num_ccs
    keep, qos_bar, best_effort = {}, {}, []
    for c in range(n_cc):
        if (m, c) not in payloads:
            raise ProtocolError(f"missing Stage-1 exchange from core [{m}, {c}]")
    for k in scenario.njt_ues(m):
        per_cc = {c: payloads[m, c].njt_active_rates.get(k, {}) for c in range(n_cc)}
        if scenario.ues[k].has_qos:
            cand = [(rate, (c, r)) for c in range(n_cc) for r, rate in per_cc[c].items()]
            chosen, ok = min_count_selection(cand, scenario.ues[k].qos_demand)
            if not ok:
                best_effort.append(k)
            chosen = set(chosen)
            fh = np.zeros(n_cc)
            for c in range(n_cc):
                keep[c, k] = {r for r in per_cc[c] if (c, r) in chosen}
                fh[c] = sum(per_cc[c][r] for r in keep[c, k])
            qos_bar[k] = fh.sum() - fh
        else:
            for c in range(n_cc):
                keep[c, k] = set(per_cc[c])
    return NjtDecoupling(m, keep, qos_bar, best_effort)


def stage3_refine(coeffs: ApproxCoeffs, scenario, m: int, c: int, jt_bits: dict, njt_bits: dict,
                  qos_bar: dict, rho: float = DEFAULT_RHO, max_sweeps: int = 10) -> CoreResult:
    """BCD over the NJT bits of core [m, c] with JT bits frozen.

    ``jt_bits`` / ``njt_bits`` map a UE to its (R,) bit vector on this CC; ``qos_bar`` maps a
    QoS UE to the rate credited from outside the core.
    """
    ues = scenario.associated(m)
    n_rbg = scenario.config.num_rbgs
    bits = np.zeros((n_rbg, len(ues)), bool)
    offset = np.zeros(len(ues))
    njt_local = []
    for li, t in enumerate(ues):
        if scenario.ues[t].is_jt:
            bits[:, li] = jt_bits[t]
        else:
            bits[:, li] = njt_bits.get(t, False)
            njt_local.append(li)
        offset[li] = qos_bar.get(t, 0.0)
    obj, _ = _local_objective(coeffs, scenario, m, c, rho, bits=bits, offset=offset)
    _enforce_cap(obj, njt_local)
    frozen = obj.bits[0, 0][:, [li for li in range(len(ues)) if li not in njt_local]].copy()

    trace = [obj.value]
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        changed = False
        for li in njt_local:
            for r in range(n_rbg):
                g = obj.gain(li, 0, r, (0,))
                changed |= obj.set_bit(li, 0, r, (0,), g > 0)
                trace.append(obj.value)
        if not changed:
            break
    out = obj.bits[0, 0].copy()
    assert np.array_equal(out[:, [li for li in range(len(ues)) if li not in njt_local]], frozen)
    return CoreResult(m, c, ues, out, obj.value, sweeps, trace)


def _enforce_cap(obj: PenaltyObjective, njt_local):
    """Drop the weakest NJT bits on any RBG whose merged load exceeds nt."""
    for r in range(obj.bits.shape[2]):
        while obj.phi[0, 0, r] > obj.nt:
            cand = [li for li in njt_local if obj.bits[0, 0, r, li]]
            if not cand:
                break
            weakest = min(cand, key=lambda li: obj.rate[0, 0, r, li])
            obj.set_bit(weakest, 0, r, (0,), False)


def _batch_payloads(batch: CoreBatch, scenario) -> list:
    fbar, inf10, room = batch.jt_payload_arrays()
    out = []
    for b, (m, c) in enumerate(batch.cores):
        jt, njt = {}, {}
        for li, t in enumerate(batch.ues[b]):
            if batch.is_jt[b, li]:
                jt[t] = JtFragment(fbar[b, :, li].copy(), inf10[b, :, li].copy(), -inf10[b, :, li],
                                   batch.bits[b, :, li].copy(), room[b, :, li].copy())
            else:
                active = np.flatnonzero(batch.bits[b, :, li])
                if active.size:
                    njt[t] = {int(r): float(batch.rate[b, r, li]) for r in active}
        out.append(CoordinationPayload(m, c, jt, njt))
    return out


def available_cpus() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def core_groups(cores, worker_threads: int, num_groups=None) -> list:
    """Split the cores into contiguous lockstep groups.

    By default there is one group per thread that can actually run at the same time, i.e.
    min(worker_threads, CPUs); extra groups on a saturated CPU only add per-group overhead.
    """
    if num_groups is None:
        num_groups = min(worker_threads, available_cpus())
    n = max(1, min(num_groups, len(cores)))
    bounds = np.linspace(0, len(cores), n + 1).round().astype(int)
    return [cores[a:b] for a, b in zip(bounds[:-1], bounds[1:])]


def _stage1_group(coeffs, scenario, group, rho, alpha, max_sweeps, width):
    batch = CoreBatch(coeffs, scenario, group, rho, width)
    sweeps, traces = run_stage1(batch, alpha, max_sweeps)
    results = [CoreResult(m, c, batch.ues[b], batch.lane_bits(b), float(batch.values[b]),
                          int(sweeps[b]), traces[b]) for b, (m, c) in enumerate(group)]
    return results, _batch_payloads(batch, scenario)


def _stage3_group(coeffs, scenario, group, args, rho, max_sweeps, width):
    batch = CoreBatch(coeffs, scenario, group, rho, width)
    bits = np.zeros_like(batch.bits)
    offset = np.zeros_like(batch.offset)
    for b, mc in enumerate(group):
        jt_bits, njt_bits, qbar = args[mc]
        for li, t in enumerate(batch.ues[b]):
            bits[b, :, li] = jt_bits[t] if batch.is_jt[b, li] else njt_bits.get(t, False)
            offset[b, li] = qbar.get(t, 0.0)
    batch.load_bits(bits, offset)
    enforce_cap(batch)
    frozen = batch.bits & batch.is_jt[:, None]
    sweeps, traces = run_refine(batch, max_sweeps)
    assert np.array_equal(batch.bits & batch.is_jt[:, None], frozen), "Stage 3 touched a JT bit"
    return [CoreResult(m, c, batch.ues[b], batch.lane_bits(b), float(batch.values[b]),
                       int(sweeps[b]), traces[b]) for b, (m, c) in enumerate(group)]


@dataclass
class DistributedResult:
    schedule: Schedule
    ledger: MessageLedger
    stage1: dict
    stage3: dict
    coordination: JtCoordination
    decoupling: dict
    traces: list

    def trace_rows(self) -> list:
        """Per-stage trace rows (stage, core, objective, bits_set)."""
        return self.traces


def run_distributed(coeffs: ApproxCoeffs, scenario, rho: float = DEFAULT_RHO,
                    alpha: float = DEFAULT_ALPHA, worker_threads: int = 1, coordinate_njt: bool = True,
                    stage1_sweeps: int = 10, stage3_sweeps: int = 10,
                    num_groups=None) -> DistributedResult:
    """Run all three stages; ``coordinate_njt=False`` skips Stage 2.2 (the PDS-NC ablation).

    Stage-1 and Stage-3 cores run as lockstep groups (see ``core_groups``) on a pool of
    ``worker_threads`` threads; the schedule does not depend on the grouping.
    """
    if worker_threads < 1:
        raise ConfigurationError("worker_threads must be >= 1")
    if not 0 <= alpha < 1:
        raise ConfigurationError(f"alpha must lie in [0, 1), got {alpha}")
    cfg = scenario.config
    cores = [(m, c) for m in range(cfg.num_cells) for c in range(cfg.num_ccs)]
    groups = core_groups(cores, worker_threads, num_groups)
    width = lane_width(scenario)
    ledger = MessageLedger(cfg.num_cells)

    with ThreadPoolExecutor(max_workers=worker_threads) as pool:
        # Stage 1
        futs = [pool.submit(_stage1_group, coeffs, scenario, g, rho, alpha, stage1_sweeps, width)
                for g in groups]
        s1, payloads = {}, {}
        for f in futs:
            results, pls = f.result()
            for res, p in zip(results, pls):
                s1[res.cell, res.cc] = res
                payloads[res.cell, res.cc] = p
        for m in range(cfg.num_cells):
            own = [payloads[m, c] for c in range(cfg.num_ccs)]
            ledger.upload(m + 1, sum(p.upload_bytes for p in own))
            ledger.exchange(m + 1, sum(p.exchange_bytes for p in own))

        # Stage 2.1 at PU_0 concurrently with Stage 2.2 on PU_1..PU_M
        f21 = pool.submit(stage21_jt_coordinate, payloads, scenario)
        f22 = {m: pool.submit(stage22_njt_decouple, payloads, scenario, m)
               for m in range(cfg.num_cells)} if coordinate_njt else {}
        coord = f21.result()
        dec = {m: f.result() for m, f in f22.items()}

        for m in range(cfg.num_cells):
            jts = scenario.jt_ues(m)
            nbytes = HEADER_BYTES + len(jts) * (cfg.num_ccs * cfg.num_rbgs * BIT_BYTES
                                                + cfg.num_ccs * SCALAR_BYTES)
            ledger.download(m + 1, nbytes)
            if coordinate_njt:
                n_kept = sum(len(v) for v in dec[m].keep.values())
                ledger.exchange(m + 1, HEADER_BYTES + n_kept * BIT_BYTES
                                + len(dec[m].qos_bar) * cfg.num_ccs * SCALAR_BYTES)

        # Stage 3
        args = {}
        for m, c in cores:
            res1 = s1[m, c]
            jt_bits = {i: coord.consensus[i][c] for i in scenario.jt_ues(m)}
            njt_bits = {}
            for li, t in enumerate(res1.ues):
                if scenario.ues[t].is_jt:
                    continue
                if coordinate_njt:
                    kept = dec[m].keep.get((c, t), set())
                    njt_bits[t] = np.array([r in kept for r in range(cfg.num_rbgs)])
                else:
                    njt_bits[t] = res1.bits[:, li].copy()
            qbar = {i: float(coord.qos_bar[m, i][c]) for i in scenario.jt_ues(m)
                    if scenario.ues[i].has_qos}
            if coordinate_njt:
                qbar.update({k: float(v[c]) for k, v in dec[m].qos_bar.items()})
            args[m, c] = (jt_bits, njt_bits, qbar)
        futs = [pool.submit(_stage3_group, coeffs, scenario, g, args, rho, stage3_sweeps, width)
                for g in groups]
        s3 = {(res.cell, res.cc): res for f in futs for res in f.result()}

    b = np.zeros((cfg.num_cells, scenario.num_ues, cfg.num_ccs, cfg.num_rbgs), bool)
    for (m, c), res in sorted(s3.items()):
        b[m, res.ues, c, :] = res.bits.T
    schedule = Schedule(b)

    traces = []
    for stage, results in (("stage1", s1), ("stage3", s3)):
        for (m, c) in cores:
            res = results[m, c]
            traces.append({"stage": stage, "core": f"{m}-{c}", "objective": res.objective,
                           "bits_set": int(res.bits.sum()), "sweeps": res.sweeps})
    return DistributedResult(schedule, ledger, s1, s3, coord, dec, traces)
