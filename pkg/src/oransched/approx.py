"""Separable approximate rates that depend on scheduling bits only.

The approximate rate of UE t served by cell m on RBG (c, r) is

    b_t * w_t * (psi_t + sum_{j != t} b_j d_{j,t} - log2(phi))

where ``w_t`` is 1 for NJT-UEs and 1/|B_t| for JT-UEs, ``psi`` already includes the
``log2 |B_t|`` boost of JT-UEs, ``d = log2(1 - eta)`` is the pairwise direction penalty
and ``phi`` the number of UEs the cell schedules on that RBG.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ezf import Schedule, build_ezf, jt_sinr_intra

ETA_CLAMP = 1.0 - 1e-12


@dataclass
class ApproxCoeffs:
    """Coefficient arrays, laid out cell-major for fast per-RBG access.

    psi[m, c, r, t]      solo-rate term (JT-UEs include log2 |B_t|)
    psi_raw[m, c, r, t]  solo-rate term without the JT boost
    eta[m, c, r, j, t]   normalized squared correlation of the two UEs' directions at cell m
    d[m, c, r, j, t]     log2(1 - eta), zero on the diagonal
    weight[t]            1 for NJT, 1/|B_t| for JT
    assoc[m, t]          cell m serves t
    usable[m, c, r, t]   associated and not rank-deficient
    """

    psi: np.ndarray
    psi_raw: np.ndarray
    eta: np.ndarray
    d: np.ndarray
    weight: np.ndarray
    assoc: np.ndarray
    usable: np.ndarray
    nt: int

    @property
    def shape(self):
        return self.psi.shape


def build_coeffs(cache, scenario) -> ApproxCoeffs:
    cfg = scenario.config
    k_ues, n_cc, n_rbg, m_cells, nt = cache.v.shape
    assoc = scenario.assoc
    # (M, C, R, K, nt)
    v = np.transpose(cache.v, (3, 1, 2, 0, 4))
    n2 = np.sum(np.abs(v) ** 2, axis=-1)
    lam2 = np.transpose(cache.lam ** 2, (1, 2, 0))[None]
    with np.errstate(divide="ignore"):
        psi_raw = np.log2(lam2 * n2 * cfg.tx_power / cfg.noise_power)
    boost = np.log2(np.maximum(scenario.serving_size, 1)).astype(float)
    mask = assoc[:, None, None, :]
    psi_raw = np.where(mask, psi_raw, 0.0)
    psi = np.where(mask, psi_raw + boost, 0.0)

    gram = np.einsum("mcrjn,mcrtn->mcrjt", v.conj(), v)
    denom = n2[..., :, None] * n2[..., None, :]
    pair = mask[..., :, None] & mask[..., None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        eta = np.where(pair, np.abs(gram) ** 2 / denom, 0.0)
    eta = np.clip(eta, 0.0, ETA_CLAMP)
    idx = np.arange(k_ues)
    eta[..., idx, idx] = 0.0
    d = np.log2(1.0 - eta)

    usable = mask & np.transpose(cache.usable, (1, 2, 0))[None]
    return ApproxCoeffs(psi, psi_raw, eta, d, scenario.weight.astype(float), assoc.copy(),
                        usable, nt)


def cell_rates(coeffs: ApproxCoeffs, bits_mcr: np.ndarray, m: int, c: int, r: int) -> np.ndarray:
    """Approximate rates of all UEs on (m, c, r) given that cell's bit vector (length K)."""
    b = np.asarray(bits_mcr, dtype=bool)
    phi = int(b.sum())
    if phi == 0:
        return np.zeros(b.shape)
    inter = b.astype(float) @ coeffs.d[m, c, r]
    raw = coeffs.weight * (coeffs.psi[m, c, r] + inter - np.log2(phi))
    return np.where(b, raw, 0.0)


def approx_rate(coeffs: ApproxCoeffs, schedule: Schedule, m: int, t: int, c: int, r: int) -> float:
    """Approximate rate credited to UE t by cell m on RBG (c, r); may be negative."""
    if not coeffs.assoc[m, t]:
        raise ValueError(f"UE {t} is not associated with cell {m}")
    b = schedule.b[m, :, c, r]
    if not b[t]:
        return 0.0
    phi = int(b.sum())
    assert phi >= 1
    inter = float(np.dot(b.astype(float), coeffs.d[m, c, r, :, t]))
    return float(coeffs.weight[t] * (coeffs.psi[m, c, r, t] + inter - np.log2(phi)))


def approx_rate_tensor(coeffs: ApproxCoeffs, schedule: Schedule) -> np.ndarray:
    """All approximate rates as an (M, K, C, R) array (zero where unscheduled)."""
    b = np.transpose(schedule.b, (0, 2, 3, 1)).astype(float)  # (M, C, R, K)
    phi = b.sum(axis=-1, keepdims=True)
    inter = np.einsum("mcrj,mcrjt->mcrt", b, coeffs.d)
    with np.errstate(divide="ignore"):
        g = np.log2(np.maximum(phi, 1.0))
    f = np.where(b > 0, coeffs.weight * (coeffs.psi + inter - g), 0.0)
    return np.transpose(f, (0, 3, 1, 2))


def approx_totals(coeffs: ApproxCoeffs, schedule: Schedule) -> np.ndarray:
    """Per-UE approximate rate summed over serving cells and RBGs."""
    return approx_rate_tensor(coeffs, schedule).sum(axis=(0, 2, 3))


@dataclass
class JensenChain:
    total: float            # sum of the decomposed per-cell terms
    per_cell: dict
    log_sum: float          # log2(sum_m gamma_m)
    log_jt: float           # log2 of the intra-cell JT SINR

    def holds(self, tol: float = 1e-9) -> bool:
        return self.total <= self.log_sum + tol and self.log_sum <= self.log_jt + tol


def jensen_decomposed_jt_rate(schedule: Schedule, cache, scenario, i: int, c: int, r: int) -> JensenChain:
    """Decompose the high-SINR JT rate of UE i into per-cell terms.

    ``per_cell[m] = log2(|B| gamma_m) / |B|`` where gamma_m is cell m's closed-form EZF SINR.
    """
    cells = scenario.ues[i].serving_set
    bits = schedule.b[list(cells), i, c, r]
    if not bits.all():
        return JensenChain(0.0, {m: 0.0 for m in cells}, 0.0, 0.0)
    cfg = scenario.config
    gammas = []
    for m in cells:
        ues, _, norm2 = build_ezf(schedule, cache, m, c, r, cfg.tx_power)
        j = int(np.searchsorted(ues, i))
        gammas.append(cache.lam[i, c, r] ** 2 * cfg.tx_power / (ues.size * norm2[j] * cfg.noise_power))
    gammas = np.array(gammas)
    n = len(cells)
    per_cell = {m: float(np.log2(n * g) / n) for m, g in zip(cells, gammas)}
    return JensenChain(float(sum(per_cell.values())), per_cell, float(np.log2(gammas.sum())),
                       float(np.log2(jt_sinr_intra(gammas))))
