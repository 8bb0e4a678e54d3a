"""Min-penalty objective with incremental bit gains, and the centralized BCD scheduler."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .approx import ApproxCoeffs, approx_totals
from .errors import InconsistentScheduleError
from .ezf import Schedule

NEG_INF = float("-inf")
DEFAULT_RHO = 5.0


class PenaltyObjective:
    """Incrementally maintained objective over a block of cells, CCs and UEs.

    The objective is ``sum_{no-QoS} T_t + rho * sum_{QoS} min(T_t, Q_t)`` where ``T_t`` is the
    UE's approximate rate summed over the block plus a fixed ``offset`` (rate credited from
    outside the block). Indices passed to the public methods are block-local.

    Internal arrays: ``bits[m, c, r, t]``, ``inter[m, c, r, t] = sum_j b_j d_{j,t}``,
    ``phi[m, c, r]`` and ``rate[m, c, r, t]``.
    """

    def __init__(self, psi, d, weight, usable, demand, has_qos, rho, nt, bits=None, offset=None):
        self.psi = psi
        self.d = d
        self.weight = weight
        self.usable = usable
        self.demand = demand
        self.has_qos = has_qos
        self.rho = float(rho)
        self.nt = int(nt)
        self.offset = np.zeros(len(weight)) if offset is None else np.asarray(offset, float).copy()
        self.bits = np.zeros(psi.shape, bool) if bits is None else np.asarray(bits, bool).copy()
        self.recompute()

    @classmethod
    def from_coeffs(cls, coeffs: ApproxCoeffs, scenario, rho, schedule: Optional[Schedule] = None,
                    cells=None, ccs=None, ues=None, offset=None):
        cells = list(range(coeffs.psi.shape[0])) if cells is None else list(cells)
        ccs = list(range(coeffs.psi.shape[1])) if ccs is None else list(ccs)
        ues = list(range(coeffs.psi.shape[3])) if ues is None else list(ues)
        ix = np.ix_(cells, ccs, range(coeffs.psi.shape[2]), ues)
        psi = coeffs.psi[ix]
        d = coeffs.d[np.ix_(cells, ccs, range(coeffs.psi.shape[2]), ues, ues)]
        bits = None
        if schedule is not None:
            bits = np.transpose(schedule.b, (0, 2, 3, 1))[ix]
        return cls(psi, d, coeffs.weight[ues], coeffs.usable[ix], scenario.demand[ues],
                   scenario.has_qos[ues], rho, coeffs.nt, bits, offset)

    # -- full evaluation --------------------------------------------------------------------

    def recompute(self) -> None:
        b = self.bits.astype(float)
        self.phi = self.bits.sum(axis=-1)
        self.inter = np.einsum("mcrj,mcrjt->mcrt", b, self.d)
        g = np.log2(np.maximum(self.phi, 1))[..., None]
        self.rate = np.where(self.bits, self.weight * (self.psi + self.inter - g), 0.0)
        self.totals = self.offset + self.rate.sum(axis=(0, 1, 2))

    def value_of(self, totals) -> float:
        q = self.has_qos
        return float(totals[~q].sum() + self.rho * np.minimum(totals[q], self.demand[q]).sum())

    @property
    def value(self) -> float:
        return self.value_of(self.totals)

    def from_scratch(self) -> float:
        """Objective recomputed directly from the bits, independent of the cached state."""
        total = self.offset.copy()
        n_m, n_c, n_r, n_k = self.bits.shape
        for m in range(n_m):
            for c in range(n_c):
                for r in range(n_r):
                    on = np.flatnonzero(self.bits[m, c, r])
                    for t in on:
                        s = sum(self.d[m, c, r, j, t] for j in on if j != t)
                        total[t] += self.weight[t] * (self.psi[m, c, r, t] + s - math.log2(len(on)))
        return self.value_of(total)

    # -- incremental evaluation -------------------------------------------------------------

    def candidate_rate(self, t: int, c: int, r: int, m: int) -> float:
        """Rate of t on (m, c, r) if its bit were 1, all other bits as they are."""
        phi = self.phi[m, c, r] + (0 if self.bits[m, c, r, t] else 1)
        return float(self.weight[t] * (self.psi[m, c, r, t] + self.inter[m, c, r, t] - math.log2(phi)))

    def _flip_deltas(self, t, c, r, cells):
        """Dense per-UE total deltas of toggling t on (c, r) in every cell of ``cells``."""
        acc = np.zeros(self.weight.shape)
        for m in cells:
            row = self.bits[m, c, r]
            phi = int(self.phi[m, c, r])
            if row[t]:
                own = self.rate[m, c, r, t]
                if phi > 1:
                    step = math.log2(phi) - math.log2(phi - 1)
                    acc += np.where(row, self.weight * (step - self.d[m, c, r, t]), 0.0)
                    acc[t] -= self.weight[t] * step
                acc[t] -= own
            else:
                if phi:
                    step = math.log2(phi + 1) - math.log2(phi)
                    acc += np.where(row, self.weight * (self.d[m, c, r, t] - step), 0.0)
                acc[t] += self.weight[t] * (self.psi[m, c, r, t] + self.inter[m, c, r, t]
                                            - math.log2(phi + 1))
        return acc

    def _h(self, totals):
        return np.where(self.has_qos, self.rho * np.minimum(totals, self.demand), totals)

    def _value_delta(self, acc) -> float:
        return float((self._h(self.totals + acc) - self._h(self.totals)).sum())

    def feasible_on(self, t, c, r, cells) -> bool:
        for m in cells:
            if not self.usable[m, c, r, t]:
                return False
            if not self.bits[m, c, r, t] and self.phi[m, c, r] + 1 > self.nt:
                return False
        return True

    def gain(self, t: int, c: int, r: int, cells=(0,)) -> float:
        """Objective with the bit(s) at 1 minus objective with them at 0.

        ``cells`` lists every cell whose bit for t moves together (a JT consensus bit spans all
        serving cells). Returns -inf when setting the bit is infeasible.
        """
        if not self.feasible_on(t, c, r, cells):
            return NEG_INF
        on = bool(self.bits[cells[0], c, r, t])
        dv = self._value_delta(self._flip_deltas(t, c, r, cells))
        return -dv if on else dv

    def set_bit(self, t: int, c: int, r: int, cells, value: bool) -> bool:
        """Set t's bit on (c, r) in all ``cells``; returns True when anything changed."""
        if bool(self.bits[cells[0], c, r, t]) == bool(value):
            return False
        self.totals += self._flip_deltas(t, c, r, cells)
        sign = 1.0 if value else -1.0
        for m in cells:
            self.bits[m, c, r, t] = value
            self.phi[m, c, r] += 1 if value else -1
            self.inter[m, c, r] += sign * self.d[m, c, r, t]
            phi = self.phi[m, c, r]
            b = self.bits[m, c, r]
            if phi:
                self.rate[m, c, r] = np.where(
                    b, self.weight * (self.psi[m, c, r] + self.inter[m, c, r] - math.log2(phi)), 0.0)
            else:
                self.rate[m, c, r] = 0.0
        return True

    def sat(self) -> float:
        q = self.has_qos
        return float(np.mean(self.totals[q] >= self.demand[q])) if q.any() else 1.0


def objective_G(coeffs: ApproxCoeffs, schedule: Schedule, scenario, rho: float) -> float:
    """Min-penalty objective of a (JT-consistent) schedule under approximate rates."""
    if not schedule.is_consistent(scenario):
        raise InconsistentScheduleError("objective_G needs a JT-consistent schedule")
    totals = approx_totals(coeffs, schedule)
    q = scenario.has_qos
    return float(totals[~q].sum() + rho * np.minimum(totals[q], scenario.demand[q]).sum())


def approx_sat(coeffs: ApproxCoeffs, schedule: Schedule, scenario) -> float:
    totals = approx_totals(coeffs, schedule)
    q = scenario.has_qos
    return float(np.mean(totals[q] >= scenario.demand[q])) if q.any() else 1.0


def bit_gain(obj: PenaltyObjective, scenario, t: int, c: int, r: int) -> float:
    """Gain of UE t's bit on RBG (c, r) in a full-network objective (consensus bit for JT)."""
    return obj.gain(t, c, r, scenario.ues[t].serving_set)


@dataclass
class BcdResult:
    schedule: Schedule
    trace: list                      # objective after each sweep, trace[0] is the initial value
    sweeps: int
    converged: bool
    update_trace: list = field(default_factory=list)


def centralized_bcd(coeffs: ApproxCoeffs, scenario, rho: float = DEFAULT_RHO, max_sweeps: int = 20,
                    init: Optional[Schedule] = None, shuffle_seed: Optional[int] = None,
                    record_updates: bool = False, on_sweep=None) -> BcdResult:
    """Block coordinate descent over all scheduling bits, one UE at a time.

    Each bit becomes 1 iff its gain is strictly positive. JT-UEs are driven through their
    consensus bit so the schedule stays consistent. Stops after a sweep without changes.
    ``on_sweep(sweep, schedule, value)`` is called after every sweep.
    """
    if init is not None and not init.is_consistent(scenario):
        raise InconsistentScheduleError("initial schedule must be JT-consistent")
    obj = PenaltyObjective.from_coeffs(coeffs, scenario, rho, init)
    order = np.arange(scenario.num_ues)
    rng = np.random.default_rng(shuffle_seed) if shuffle_seed is not None else None
    n_cc, n_rbg = obj.bits.shape[1:3]
    trace = [obj.value]
    updates = [obj.value] if record_updates else []
    converged = False
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        if rng is not None:
            order = rng.permutation(scenario.num_ues)
        changed = False
        for t in order.tolist():
            cells = scenario.ues[t].serving_set
            for c in range(n_cc):
                for r in range(n_rbg):
                    g = obj.gain(t, c, r, cells)
                    changed |= obj.set_bit(t, c, r, cells, g > 0)
                    if record_updates:
                        updates.append(obj.value)
        trace.append(obj.value)
        if on_sweep is not None:
            on_sweep(sweeps, Schedule(np.transpose(obj.bits, (0, 3, 1, 2))), obj.value)
        if not changed:
            converged = True
            break
    sched = Schedule(np.transpose(obj.bits, (0, 3, 1, 2)))
    return BcdResult(sched, trace, sweeps, converged, updates)
