"""Reference schedulers: semi-orthogonal user selection (SUS-ZF) and a QoS-weighted SINR
heuristic (mSHS).

Both are reconstructions; their constants are ours. Each decides per cell and then keeps a JT
bit only where every serving cell chose it, so the output is always JT-consistent.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, IllConditionedScheduleError
from .ezf import Schedule, build_ezf

QOS_WEIGHT_RULES = ("linear", "none")


@dataclass(frozen=True)
class BaselineConfig:
    sus_orthogonality_eps: float = 0.4
    mshs_qos_weight_fn: str = "linear"   # score factor 1 + w * unmet fraction
    mshs_qos_weight: float = 1.0
    mshs_user_cap: int = 8

    def __post_init__(self):
        if not 0 < self.sus_orthogonality_eps < 1:
            raise ConfigurationError("sus_orthogonality_eps must lie in (0, 1)")
        if self.mshs_qos_weight_fn not in QOS_WEIGHT_RULES:
            raise ConfigurationError(f"unknown QoS weighting rule {self.mshs_qos_weight_fn!r}")
        if self.mshs_user_cap < 1:
            raise ConfigurationError("mshs_user_cap must be >= 1")


def _solo_snr(cache, scenario) -> np.ndarray:
    """(M, K, C, R) single-user SNR of each serving cell's own share of the beam."""
    cfg = scenario.config
    sub = np.sum(np.abs(cache.v) ** 2, axis=-1)            # (K, C, R, M)
    snr = (cache.lam ** 2)[..., None] * sub * cfg.tx_power / cfg.noise_power
    snr = np.transpose(snr, (3, 0, 1, 2))
    ok = scenario.assoc[:, :, None, None] & cache.usable[None]
    return np.where(ok, snr, 0.0)


def _and_consensus(b: np.ndarray, scenario) -> np.ndarray:
    for ue in scenario.ues:
        if ue.is_jt:
            cells = list(ue.serving_set)
            agreed = b[cells, ue.id].all(axis=0)
            b[cells, ue.id] = agreed
    return b


def sus_zf_schedule(channels, cache, scenario, config: BaselineConfig = BaselineConfig()) -> Schedule:
    """Greedy semi-orthogonal selection per (cell, RBG).

    Starting from the strongest UE, repeatedly add the candidate with the largest component
    orthogonal to the selected directions, provided its normalized projection onto their span
    stays below ``eps``. Only UEs with positive solo log-SNR are candidates.
    """
    cfg = scenario.config
    snr = _solo_snr(cache, scenario)
    b = np.zeros((cfg.num_cells, scenario.num_ues, cfg.num_ccs, cfg.num_rbgs), bool)
    eps2 = config.sus_orthogonality_eps ** 2
    for m in range(cfg.num_cells):
        for c in range(cfg.num_ccs):
            for r in range(cfg.num_rbgs):
                cand = np.flatnonzero(snr[m, :, c, r] > 1.0)
                if not cand.size:
                    continue
                # equivalent channel rows lam * v_sub^H
                h = cache.lam[cand, c, r, None] * cache.v[cand, c, r, m].conj()
                norm2 = np.sum(np.abs(h) ** 2, axis=1)
                resid = h.copy()
                chosen = []
                left = np.ones(cand.size, bool)
                while left.any() and len(chosen) < cfg.nt:
                    rnorm2 = np.sum(np.abs(resid) ** 2, axis=1)
                    ok = left & (1.0 - rnorm2 / norm2 < eps2) if chosen else left
                    if not ok.any():
                        break
                    j = int(np.flatnonzero(ok)[np.argmax(np.where(ok, rnorm2, -1.0)[ok])])
                    chosen.append(j)
                    left[j] = False
                    g = resid[j] / np.sqrt(rnorm2[j])
                    resid = resid - np.outer(resid @ g.conj(), g)
                b[m, cand[chosen], c, r] = True
    return Schedule(_and_consensus(b, scenario))


def _qos_factor(unmet, demand, has_qos, config: BaselineConfig):
    if config.mshs_qos_weight_fn == "none":
        return np.ones_like(demand)
    frac = np.where(has_qos, unmet / np.where(demand > 0, demand, 1.0), 0.0)
    return 1.0 + config.mshs_qos_weight * frac


def mshs_schedule(channels, cache, scenario, config: BaselineConfig = BaselineConfig()) -> Schedule:
    """QoS-weighted SINR-greedy heuristic, RBG by RBG in (c, r) order.

    UEs are ranked by solo SNR (dB) times ``1 + w * unmet fraction`` and added in that order
    while the weighted sum of log2(1 + closed-form EZF SINR) on the RBG keeps increasing, up
    to min(nt, user cap) UEs. Unmet demand is updated after each RBG.
    """
    cfg = scenario.config
    snr = _solo_snr(cache, scenario)
    with np.errstate(divide="ignore"):
        snr_db = 10.0 * np.log10(snr)
    cap = min(cfg.nt, config.mshs_user_cap)
    demand = scenario.demand
    has_qos = scenario.has_qos
    served = np.zeros(scenario.num_ues)
    b = np.zeros((cfg.num_cells, scenario.num_ues, cfg.num_ccs, cfg.num_rbgs), bool)
    size = np.maximum(scenario.serving_size, 1)
    for c in range(cfg.num_ccs):
        for r in range(cfg.num_rbgs):
            factor = _qos_factor(np.maximum(demand - served, 0.0), demand, has_qos, config)
            gained = np.zeros(scenario.num_ues)
            for m in range(cfg.num_cells):
                score = snr_db[m, :, c, r] * factor
                cand = [k for k in np.argsort(-score, kind="stable") if snr[m, k, c, r] > 1.0]
                chosen, best = [], 0.0
                for k in cand:
                    if len(chosen) == cap:
                        break
                    trial = sorted(chosen + [int(k)])
                    util, rates = _weighted_utility(cache, scenario, m, c, r, trial, factor)
                    if util <= best:
                        break
                    chosen, best, last = trial, util, rates
                if chosen:
                    b[m, chosen, c, r] = True
                    for k, rate in zip(chosen, last):
                        gained[k] += rate / size[k]
            served += gained
    return Schedule(_and_consensus(b, scenario))


def _weighted_utility(cache, scenario, m, c, r, ues, factor):
    """Weighted sum of per-cell log2(1 + |B| gamma) / |B| for a trial set on (m, c, r)."""
    cfg = scenario.config
    sched = np.zeros((cfg.num_cells, scenario.num_ues, cfg.num_ccs, cfg.num_rbgs), bool)
    sched[m, ues, c, r] = True
    try:
        idx, _, norm2 = build_ezf(Schedule(sched), cache, m, c, r, cfg.tx_power)
    except IllConditionedScheduleError:
        return -np.inf, None
    gamma = cache.lam[idx, c, r] ** 2 * cfg.tx_power / (idx.size * norm2 * cfg.noise_power)
    size = np.maximum(scenario.serving_size[idx], 1)
    rates = np.log2(1.0 + size * gamma)
    return float(np.sum(factor[idx] * rates / size)), rates
