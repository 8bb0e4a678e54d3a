"""Eigen-based zero-forcing transceiver and the exact-rate oracle.

Every metric reported by the package (ESR, Sat) is computed here from the full signal model,
including all inter-cell interference, regardless of which approximation a scheduler used.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, IllConditionedScheduleError, InconsistentScheduleError

COND_LIMIT = 1e12


class Schedule:
    """Binary allocation ``b[m, k, c, r]``; UE k scheduled by cell m on RBG (c, r)."""

    def __init__(self, b):
        self.b = np.asarray(b, dtype=bool)

    @classmethod
    def empty(cls, scenario) -> "Schedule":
        cfg = scenario.config
        return cls(np.zeros((cfg.num_cells, scenario.num_ues, cfg.num_ccs, cfg.num_rbgs), bool))

    @property
    def shape(self):
        return self.b.shape

    def copy(self) -> "Schedule":
        return Schedule(self.b.copy())

    def __eq__(self, other):
        return isinstance(other, Schedule) and np.array_equal(self.b, other.b)

    def __hash__(self):
        return hash(self.b.tobytes())

    def jt_bit(self, i: int, c: int, r: int, scenario) -> bool:
        """Consensus bit of a JT-UE; raises when its serving cells disagree."""
        bits = self.b[list(scenario.ues[i].serving_set), i, c, r]
        if bits.min() != bits.max():
            raise InconsistentScheduleError(f"JT-UE {i} inconsistent on RBG ({c}, {r})")
        return bool(bits[0])

    def inconsistent(self, scenario) -> np.ndarray:
        """Boolean (K, C, R) mask of JT-UEs whose serving cells disagree."""
        out = np.zeros(self.b.shape[1:], dtype=bool)
        for ue in scenario.ues:
            if ue.is_jt:
                bits = self.b[list(ue.serving_set), ue.id]
                out[ue.id] = bits.any(axis=0) & ~bits.all(axis=0)
        return out

    def is_consistent(self, scenario) -> bool:
        return not self.inconsistent(scenario).any()

    def respects_association(self, scenario) -> bool:
        return not (self.b & ~scenario.assoc[:, :, None, None]).any()

    def ue_bits(self, scenario) -> np.ndarray:
        """(K, C, R) per-UE view using each UE's primary cell."""
        prim = [u.serving_set[0] for u in scenario.ues]
        return self.b[prim, np.arange(len(prim))]

    def load(self) -> np.ndarray:
        """Scheduled-set size per (m, c, r)."""
        return self.b.sum(axis=1)

    def to_json(self) -> str:
        flat = self.b.ravel().astype(np.uint8)
        runs = []
        if flat.size:
            change = np.flatnonzero(np.diff(flat)) + 1
            starts = np.concatenate([[0], change])
            ends = np.concatenate([change, [flat.size]])
            runs = [[int(flat[s]), int(e - s)] for s, e in zip(starts, ends)]
        return json.dumps({"dims": list(self.b.shape), "rle": runs})

    @classmethod
    def from_json(cls, text: str) -> "Schedule":
        d = json.loads(text)
        dims = tuple(d["dims"])
        flat = np.concatenate([np.full(n, v, dtype=bool) for v, n in d["rle"]]) if d["rle"] \
            else np.zeros(0, bool)
        if flat.size != int(np.prod(dims)):
            raise ConfigurationError("run lengths do not match schedule dimensions")
        return cls(flat.reshape(dims))


@dataclass
class BeamformerSet:
    w: np.ndarray      # (M, K, C, R, nt)
    phi: np.ndarray    # (M, C, R)
    w_hat_norm2: np.ndarray  # (M, K, C, R) squared norm of the unnormalized EZF column


def build_ezf(schedule: Schedule, cache, m: int, c: int, r: int, power: float):
    """EZF beams of cell m on RBG (c, r).

    Returns ``(ues, w, w_hat_norm2)`` with ``w`` of shape (nt, n) holding one normalized column
    per scheduled UE, in ascending UE order.
    """
    ues = np.flatnonzero(schedule.b[m, :, c, r])
    nt = cache.v.shape[-1]
    if ues.size == 0:
        return ues, np.zeros((nt, 0), complex), np.zeros(0)
    if ues.size > nt:
        raise IllConditionedScheduleError(m, c, r, np.inf)
    vhat = cache.v[ues, c, r, m, :].T  # (nt, n)
    gram = vhat.conj().T @ vhat
    cond = np.linalg.cond(gram)
    if not cond <= COND_LIMIT:
        raise IllConditionedScheduleError(m, c, r, cond)
    what = vhat @ np.linalg.inv(gram)
    norm2 = np.sum(np.abs(what) ** 2, axis=0)
    w = np.sqrt(power / ues.size) * what / np.sqrt(norm2)
    return ues, w, norm2


def build_beamformers(schedule: Schedule, cache, scenario) -> BeamformerSet:
    m_cells, k_ues, n_cc, n_rbg = schedule.shape
    nt = cache.v.shape[-1]
    w = np.zeros((m_cells, k_ues, n_cc, n_rbg, nt), complex)
    norm2 = np.zeros((m_cells, k_ues, n_cc, n_rbg))
    power = scenario.config.tx_power
    for m in range(m_cells):
        for c in range(n_cc):
            for r in range(n_rbg):
                ues, wm, n2 = build_ezf(schedule, cache, m, c, r, power)
                if ues.size:
                    w[m, ues, c, r] = wm.T
                    norm2[m, ues, c, r] = n2
    return BeamformerSet(w, schedule.load(), norm2)


def received_amplitudes(channels, cache, bf: BeamformerSet, c: int, r: int) -> np.ndarray:
    """``a[k, t] = sum_m u_k^H H_{m,k} w_{m,t}`` on RBG (c, r).

    Unscheduled or non-serving (m, t) pairs carry zero beams, so the sum over m is the
    coherent JT sum for JT streams and a single term for NJT streams.
    """
    eff = np.einsum("kn,mknt->mkt", cache.u[:, c, r].conj(), channels.h[:, :, c, r])
    return np.einsum("mkt,mjt->kj", eff, bf.w[:, :, c, r])


def exact_sinr(channels, cache, bf: BeamformerSet, scenario, c: int, r: int) -> np.ndarray:
    """SINR of every UE on RBG (c, r) treating all other scheduled streams as interference."""
    a = np.abs(received_amplitudes(channels, cache, bf, c, r)) ** 2
    sig = np.diag(a).copy()
    interf = a.sum(axis=1) - sig
    return sig / (interf + scenario.config.noise_power)


def exact_rates(schedule: Schedule, channels, cache, scenario, bf=None):
    """Per-(UE, CC, RBG) exact rates in bps/Hz and the JT inconsistency mask.

    Inconsistent JT-UEs are rated 0 on the affected RBG.
    """
    if bf is None:
        bf = build_beamformers(schedule, cache, scenario)
    k_ues, n_cc, n_rbg = schedule.shape[1:]
    rates = np.zeros((k_ues, n_cc, n_rbg))
    bad = schedule.inconsistent(scenario)
    active = schedule.b.any(axis=0) & ~bad
    for c in range(n_cc):
        for r in range(n_rbg):
            if not active[:, c, r].any():
                continue
            g = exact_sinr(channels, cache, bf, scenario, c, r)
            rates[:, c, r] = np.where(active[:, c, r], np.log2(1.0 + g), 0.0)
    return rates, bad


def exact_rate_njt(schedule, bf, channels, cache, scenario, k, c, r) -> float:
    if not schedule.b[:, k, c, r].any():
        return 0.0
    return float(np.log2(1.0 + exact_sinr(channels, cache, bf, scenario, c, r)[k]))


def exact_rate_jt(schedule, bf, channels, cache, scenario, i, c, r):
    """Rate of JT-UE i and a flag that is True when its serving cells disagree."""
    bits = schedule.b[list(scenario.ues[i].serving_set), i, c, r]
    if not bits.all():
        return 0.0, bool(bits.any())
    return float(np.log2(1.0 + exact_sinr(channels, cache, bf, scenario, c, r)[i])), False


def simplified_sinr(schedule: Schedule, cache, scenario, t: int, m: int, c: int, r: int) -> float:
    """Closed-form intra-cell SINR ``lam^2 P / (|A| ||w_hat||^2 sigma^2)`` ignoring ICI.

    For a JT-UE this is the per-cell term contributed by cell m.
    """
    if not schedule.b[m, t, c, r]:
        raise ConfigurationError(f"UE {t} is not scheduled by cell {m} on ({c}, {r})")
    ues, _, norm2 = build_ezf(schedule, cache, m, c, r, scenario.config.tx_power)
    j = int(np.searchsorted(ues, t))
    cfg = scenario.config
    return float(cache.lam[t, c, r] ** 2 * cfg.tx_power / (ues.size * norm2[j] * cfg.noise_power))


def simplified_sinr_all(schedule: Schedule, cache, scenario) -> np.ndarray:
    """Per-cell simplified SINR for every scheduled (m, k, c, r); zero elsewhere."""
    cfg = scenario.config
    bf = build_beamformers(schedule, cache, scenario)
    lam2 = (cache.lam ** 2)[None]
    with np.errstate(divide="ignore", invalid="ignore"):
        g = lam2 * cfg.tx_power / (bf.phi[:, None] * bf.w_hat_norm2 * cfg.noise_power)
    return np.where(schedule.b, g, 0.0)


def jt_sinr_intra(per_cell: np.ndarray) -> float:
    """JT SINR under intra-cell interference only: ``(sum_m sqrt(gamma_m))^2``."""
    return float(np.sum(np.sqrt(per_cell)) ** 2)


def per_ue_exact_totals(schedule, channels, cache, scenario) -> np.ndarray:
    rates, bad = exact_rates(schedule, channels, cache, scenario)
    if bad.any():
        raise InconsistentScheduleError("schedule violates JT consistency")
    return rates.sum(axis=(1, 2))


def esr_from_totals(totals: np.ndarray, scenario):
    q = scenario.demand
    has = scenario.has_qos
    esr = float(totals[~has].sum() + np.minimum(totals[has], q[has]).sum())
    sat = float(np.mean(totals[has] >= q[has])) if has.any() else 1.0
    return esr, sat


def esr_and_sat(schedule: Schedule, channels, cache, scenario):
    """Effective sum rate and QoS satisfaction ratio from exact rates."""
    return esr_from_totals(per_ue_exact_totals(schedule, channels, cache, scenario), scenario)
