"""Dominant singular triplets of per-UE (and stacked JT) channels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DegenerateChannelError

DEGENERATE_RTOL = 1e-12


@dataclass(frozen=True)
class SingularTriplet:
    lam: float
    u: np.ndarray
    v_sub: dict  # cell -> right-singular sub-vector (length nt)

    def equivalent_channel(self, m: int) -> np.ndarray:
        if m not in self.v_sub:
            raise ConfigurationError(f"cell {m} does not serve this UE")
        return self.lam * self.v_sub[m].conj()


def normalize_phase(u: np.ndarray, v: np.ndarray):
    """Rotate (u, v) jointly so the largest-magnitude entry of u is real and positive.

    Works on batches: u has shape (..., nr), v shape (..., n).
    """
    idx = np.argmax(np.abs(u), axis=-1)
    pivot = np.take_along_axis(u, idx[..., None], axis=-1)
    rot = np.conj(pivot) / np.abs(pivot)
    return u * rot, v * rot


def dominant_triplet(h: np.ndarray, svd=np.linalg.svd):
    """Largest singular value and phase-normalized singular vectors of a batch of matrices."""
    uu, s, vh = svd(h, full_matrices=False)
    lam = s[..., 0]
    u = uu[..., :, 0]
    v = vh[..., 0, :].conj()
    u, v = normalize_phase(u, v)
    return lam, u, v


class TripletCache:
    """Per-(UE, CC, RBG) dominant triplets.

    Arrays: ``lam[k, c, r]``, ``u[k, c, r, :]`` and ``v[k, c, r, m, :]``; the latter holds the
    sub-vector of the stacked right singular vector belonging to O-RU m (zero when m does not
    serve k). ``usable[k, c, r]`` is False for near rank-deficient channels.
    """

    def __init__(self, lam, u, v, usable, frob):
        self.lam = lam
        self.u = u
        self.v = v
        self.usable = usable
        self.frob = frob

    @property
    def shape(self):
        return self.lam.shape

    def triplet(self, k: int, c: int, r: int, scenario) -> SingularTriplet:
        cells = scenario.ues[k].serving_set
        return SingularTriplet(float(self.lam[k, c, r]), self.u[k, c, r].copy(),
                               {m: self.v[k, c, r, m].copy() for m in cells})

    def sub_norm2(self):
        """Squared norms of the per-cell sub-vectors, shape (K, C, R, M)."""
        return np.sum(np.abs(self.v) ** 2, axis=-1)


def svd_cache(channels, scenario, svd=np.linalg.svd) -> TripletCache:
    h = channels.h
    m_cells, k_ues, n_cc, n_rbg, nr, nt = h.shape
    lam = np.zeros((k_ues, n_cc, n_rbg))
    u = np.zeros((k_ues, n_cc, n_rbg, nr), dtype=complex)
    v = np.zeros((k_ues, n_cc, n_rbg, m_cells, nt), dtype=complex)
    frob = np.zeros((k_ues, n_cc, n_rbg))
    for ue in scenario.ues:
        cells = list(ue.serving_set)
        if not cells:
            raise ConfigurationError(f"UE {ue.id} has no serving O-RU; run associate_ues first")
        # (C, R, nr, |B| nt) stacked channel
        stacked = np.concatenate([h[m, ue.id] for m in cells], axis=-1)
        fro = np.linalg.norm(stacked, axis=(-2, -1))
        zero = np.argwhere(fro == 0)
        if zero.size:
            c, r = zero[0]
            raise DegenerateChannelError(ue.id, int(c), int(r))
        s, uk, vk = dominant_triplet(stacked, svd)
        lam[ue.id], u[ue.id], frob[ue.id] = s, uk, fro
        for j, m in enumerate(cells):
            v[ue.id, :, :, m, :] = vk[..., j * nt:(j + 1) * nt]
    usable = lam >= DEGENERATE_RTOL * frob
    return TripletCache(lam, u, v, usable, frob)


def equivalent_channel(cache: TripletCache, scenario, k: int, c: int, r: int, m: int) -> np.ndarray:
    """Row vector ``lam * v_sub[m]^H`` equal to ``u^H H_{m,k}``."""
    if m not in scenario.ues[k].serving_set:
        raise ConfigurationError(f"cell {m} does not serve UE {k}")
    return cache.lam[k, c, r] * cache.v[k, c, r, m].conj()


def mean_eta(vectors: np.ndarray) -> float:
    """Mean normalized squared correlation over all distinct pairs of the given rows."""
    g = vectors.conj() @ vectors.T
    n2 = np.real(np.diag(g))
    eta = np.abs(g) ** 2 / np.outer(n2, n2)
    iu = np.triu_indices(len(vectors), 1)
    return float(eta[iu].mean())
