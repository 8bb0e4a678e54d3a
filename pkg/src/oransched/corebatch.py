"""Lockstep execution of independent per-core BCD problems.

Cores [m, c] of the distributed scheduler share no state inside a stage, so a group of them
can be advanced together: step (z, r) updates local UE z on RBG r in every core of the group
at once. Each lane follows exactly the bit-update sequence of a core run on its own; the
batching only removes per-core interpreter overhead.

Local UE lists are padded to a width fixed by the scenario, so a lane's arithmetic never
depends on which other cores share its group.
"""
from __future__ import annotations

import numpy as np

from .central import DEFAULT_RHO


def lane_width(scenario) -> int:
    return max(len(scenario.associated(m)) for m in range(scenario.config.num_cells))


class CoreBatch:
    """State of a group of single-(cell, CC) penalty objectives.

    Arrays are indexed [lane, rbg, local UE] (and [..., j, t] for the pairwise penalty).
    ``offset`` is the per-UE rate credited from outside the core.
    """

    def __init__(self, coeffs, scenario, cores, rho=DEFAULT_RHO, width=None):
        self.cores = list(cores)
        self.rho = float(rho)
        self.nt = int(coeffs.nt)
        n_lane = len(self.cores)
        n_rbg = coeffs.psi.shape[2]
        n = lane_width(scenario) if width is None else width
        self.width = n
        self.ues = []
        self.psi = np.zeros((n_lane, n_rbg, n))
        self.d = np.zeros((n_lane, n_rbg, n, n))
        self.weight = np.zeros((n_lane, n))
        self.usable = np.zeros((n_lane, n_rbg, n), bool)
        self.demand = np.zeros((n_lane, n))
        self.has_qos = np.zeros((n_lane, n), bool)
        self.valid = np.zeros((n_lane, n), bool)
        self.is_jt = np.zeros((n_lane, n), bool)
        self.offset = np.zeros((n_lane, n))
        for b, (m, c) in enumerate(self.cores):
            ues = scenario.associated(m)
            k = len(ues)
            self.ues.append(ues)
            self.psi[b, :, :k] = coeffs.psi[m, c][:, ues]
            self.d[b, :, :k, :k] = coeffs.d[m, c][:, ues][:, :, ues]
            self.weight[b, :k] = coeffs.weight[ues]
            self.usable[b, :, :k] = coeffs.usable[m, c][:, ues]
            self.demand[b, :k] = scenario.demand[ues]
            self.has_qos[b, :k] = scenario.has_qos[ues]
            self.valid[b, :k] = True
            self.is_jt[b, :k] = scenario.is_jt[ues]
        self.log2 = np.log2(np.maximum(np.arange(n + 2), 1))
        # _step[p] = log2(p) - log2(p - 1): power-sharing loss of going from p - 1 to p users
        self._step = np.concatenate([[0.0], np.diff(self.log2)])
        self._lanes = np.arange(n_lane)
        self.bits = np.zeros((n_lane, n_rbg, n), bool)
        self.recompute()

    @property
    def num_lanes(self) -> int:
        return len(self.cores)

    def load_bits(self, bits, offset=None):
        self.bits = np.asarray(bits, bool).copy()
        if offset is not None:
            self.offset = np.asarray(offset, float).copy()
        self.recompute()

    def recompute(self):
        self.phi = self.bits.sum(axis=-1)
        self.inter = np.einsum("brj,brjt->brt", self.bits.astype(float), self.d)
        self.rate = np.where(self.bits, self.weight[:, None] * (
            self.psi + self.inter - self.log2[self.phi][..., None]), 0.0)
        self.totals = self.offset + self.rate.sum(axis=1)
        self.values = self._h(self.totals).sum(axis=1)

    def _h(self, totals):
        return np.where(self.has_qos, self.rho * np.minimum(totals, self.demand), totals)

    def candidate_rates(self, z: int) -> np.ndarray:
        """(lane, rbg) rate of local UE z with its bit at 1."""
        phi_on = self.phi + 1 - self.bits[:, :, z]
        return self.weight[:, z, None] * (self.psi[:, :, z] + self.inter[:, :, z] - self.log2[phi_on])

    def step(self, z: int, r: int, active, allowed=None) -> np.ndarray:
        """One BCD update of local UE z on RBG r in every active lane.

        The bit becomes 1 iff its gain is positive (and ``allowed``, when given, is True for
        the lane). Returns the lanes that changed. ``rate`` is left stale; call
        ``refresh_rates`` before reading it.
        """
        row = self.bits[:, r]
        on = row[:, z]
        phi_on = self.phi[:, r] + 1 - on
        dz = self.d[:, r, z]
        w = self.weight
        # off -> on deltas of every UE's total
        delta = w * (dz - self._step[phi_on][:, None])
        delta *= row
        delta[self._lanes, z] = w[:, z] * (self.psi[:, r, z] + self.inter[:, r, z] - self.log2[phi_on])
        both = np.empty((2,) + delta.shape)
        np.subtract(self.totals, on[:, None] * delta, out=both[0])
        np.add(both[0], delta, out=both[1])
        h = np.minimum(both, self.demand)
        h *= self.rho
        np.copyto(h, both, where=~self.has_qos)
        hs = h.sum(axis=2)
        keep = (hs[1] > hs[0]) & self.usable[:, r, z] & (on | (phi_on <= self.nt))
        if allowed is not None:
            keep &= allowed
        keep = np.where(active, keep, on)
        changed = keep != on
        if not changed.any():
            return changed
        ch = np.flatnonzero(changed)
        new = keep[ch]
        pick = new.astype(int)
        self.totals[ch] = both[pick, ch]
        self.values[ch] = hs[pick, ch]
        self.bits[ch, r, z] = new
        sign = 2 * pick - 1
        self.phi[ch, r] += sign
        self.inter[ch, r] += sign[:, None] * dz[ch]
        return changed

    def refresh_rates(self):
        self.rate = np.where(self.bits, self.weight[:, None] * (
            self.psi + self.inter - self.log2[self.phi][..., None]), 0.0)

    def lane_bits(self, b: int) -> np.ndarray:
        """(R, n_local) bits of lane b without padding."""
        return self.bits[b, :, :len(self.ues[b])].copy()

    def jt_payload_arrays(self):
        """Per (lane, rbg, local UE): fbar, INF 1->0 and room, with S the set scheduled besides t."""
        b = self.bits
        s = self.phi[..., None] - b
        out_sum = np.einsum("brj,brtj->brt", b.astype(float), self.d)
        fbar = self.weight[:, None] * (self.psi + self.inter - self.log2[s + 1])
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(s > 0, self.log2[s + 1] - self.log2[np.maximum(s, 1)], 0.0)
        inf10 = -out_sum + s * step
        room = self.usable & (b | (s + 1 <= self.nt))
        return fbar, inf10, room


def run_stage1(batch: CoreBatch, alpha: float, max_sweeps: int):
    """Stage-1 local BCD with the relative-rate filter on all lanes; returns (sweeps, traces)."""
    n_rbg = batch.bits.shape[1]
    active = np.ones(batch.num_lanes, bool)
    sweeps = np.zeros(batch.num_lanes, int)
    traces = [[float(v)] for v in batch.values]
    for _ in range(max_sweeps):
        sweeps += active
        changed = np.zeros(batch.num_lanes, bool)
        for z in range(batch.width):
            act = active & batch.valid[:, z]
            if not act.any():
                continue
            cand = batch.candidate_rates(z)
            allowed = (cand > 0) & (cand > alpha * cand.max(axis=1, keepdims=True))
            for r in range(n_rbg):
                changed |= batch.step(z, r, act, allowed[:, r])
        for b in np.flatnonzero(active):
            traces[b].append(float(batch.values[b]))
        active &= changed
        if not active.any():
            break
    batch.refresh_rates()
    return sweeps, traces


def run_refine(batch: CoreBatch, max_sweeps: int):
    """Stage-3 BCD over NJT bits only; JT bits are never touched. Traces hold every update."""
    n_rbg = batch.bits.shape[1]
    njt = batch.valid & ~batch.is_jt
    active = np.ones(batch.num_lanes, bool)
    sweeps = np.zeros(batch.num_lanes, int)
    masks, snaps = [active.copy()], [batch.values.copy()]
    for _ in range(max_sweeps):
        sweeps += active
        changed = np.zeros(batch.num_lanes, bool)
        for z in range(batch.width):
            act = active & njt[:, z]
            if not act.any():
                continue
            for r in range(n_rbg):
                changed |= batch.step(z, r, act)
                masks.append(act)
                snaps.append(batch.values.copy())
        active &= changed
        if not active.any():
            break
    batch.refresh_rates()
    masks, snaps = np.array(masks), np.array(snaps)
    traces = [snaps[masks[:, b], b].tolist() for b in range(batch.num_lanes)]
    return sweeps, traces


def enforce_cap(batch: CoreBatch):
    """Drop the weakest NJT bit, one at a time, wherever a merged RBG load exceeds nt."""
    while True:
        over = np.argwhere(batch.phi > batch.nt)
        if not over.size:
            return
        b, r = over[0]
        cand = np.flatnonzero(batch.bits[b, r] & ~batch.is_jt[b])
        if not cand.size:
            return
        weakest = cand[np.argmin(batch.rate[b, r, cand])]
        batch.bits[b, r, weakest] = False
        batch.recompute()
