import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oransched.channel import (SingularTriplet, dominant_triplet, equivalent_channel, mean_eta,
                               normalize_phase, svd_cache)
from oransched.errors import ConfigurationError, DegenerateChannelError

from conftest import custom_instance, random_channels


def _crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def _unit(x):
    return x / np.linalg.norm(x)


def _eig_svd(h, full_matrices=False):
    """Alternative backend: left vectors from the Hermitian eigenproblem of H H^H."""
    w, uu = np.linalg.eigh(h @ np.conj(np.swapaxes(h, -1, -2)))
    order = np.argsort(-w, axis=-1)
    w = np.take_along_axis(w, order, axis=-1)
    uu = np.take_along_axis(uu, order[..., None, :], axis=-1)
    s = np.sqrt(np.maximum(w, 0.0))
    vh = np.conj(np.swapaxes(uu, -1, -2)) @ h / s[..., :, None]
    return uu, s, vh


def test_rank_one(rng):
    x, y = _unit(_crandn(rng, 2)), _unit(_crandn(rng, 16))
    a = 3.0 - 4.0j
    lam, u, v = dominant_triplet(np.outer(x, y.conj()) * a)
    assert lam == pytest.approx(5.0, rel=1e-12)
    assert abs(abs(np.vdot(u, x)) - 1) < 1e-12
    assert abs(abs(np.vdot(v, y)) - 1) < 1e-12
    np.testing.assert_allclose(lam * np.outer(u, v.conj()), np.outer(x, y.conj()) * a, atol=1e-12)


def test_reconstruction_residual(rng):
    for _ in range(20):
        h = _crandn(rng, 4, 64)
        uu, s, vh = np.linalg.svd(h, full_matrices=False)
        assert np.linalg.norm(h - (uu * s) @ vh) / np.linalg.norm(h) < 1e-9


def test_jt_stacking_identical_channels(rng):
    h1 = random_channels(rng, 1, 1, 1, 1, 2, 8)[0, 0]
    h = np.stack([h1, h1])[:, None]  # both cells see the same channel
    inst = custom_instance(h, [(0, 1)])
    single = custom_instance(h[:1], [(0,)])
    assert inst.cache.lam[0, 0, 0] == pytest.approx(np.sqrt(2) * single.cache.lam[0, 0, 0], rel=1e-12)
    np.testing.assert_allclose(inst.cache.sub_norm2()[0, 0, 0], [0.5, 0.5], atol=1e-12)


def test_equivalent_channel_identity(rng):
    h = random_channels(rng, 2, 3, 2, 2, 2, 8)
    inst = custom_instance(h, [(0,), (1, 0), (1,)])
    c = inst.cache
    for k, m in [(0, 0), (2, 1)]:
        for cc in range(2):
            for r in range(2):
                lhs = c.u[k, cc, r].conj() @ h[m, k, cc, r]
                np.testing.assert_allclose(equivalent_channel(c, inst.scenario, k, cc, r, m), lhs,
                                           atol=1e-9 * np.abs(lhs).max())
    # JT: the per-cell rows concatenate to u^H [H_1, H_0]
    k = 1
    row = np.concatenate([equivalent_channel(c, inst.scenario, k, 0, 1, m) for m in (1, 0)])
    ref = c.u[k, 0, 1].conj() @ np.concatenate([h[1, k, 0, 1], h[0, k, 0, 1]], axis=-1)
    np.testing.assert_allclose(row, ref, atol=1e-9 * np.abs(ref).max())
    with pytest.raises(ConfigurationError):
        equivalent_channel(c, inst.scenario, 0, 0, 0, 1)


def test_zero_lambda_zero_row():
    t = SingularTriplet(0.0, np.array([1.0 + 0j, 0.0]), {0: np.array([1.0 + 0j, 0, 0])})
    assert not np.any(t.equivalent_channel(0))


def test_zero_channel_is_degenerate(rng):
    h = random_channels(rng, 1, 2, 1, 2, 2, 4)
    h[0, 1, 0, 1] = 0.0
    with pytest.raises(DegenerateChannelError) as err:
        custom_instance(h, [(0,), (0,)])
    assert (err.value.ue, err.value.cc, err.value.rbg) == (1, 0, 1)


def test_dominant_value_bounds(rng):
    # ||H||_F / sqrt(nr) <= lam <= ||H||_F, so nonzero channels are never flagged unusable
    h = random_channels(rng, 1, 4, 2, 2, 2, 4)
    h[0, 3, 1, 1] = np.outer([1, 1e-14], rng.standard_normal(4))
    inst = custom_instance(h, [(0,)] * 4)
    c = inst.cache
    assert np.all(c.lam <= c.frob * (1 + 1e-12))
    assert np.all(c.lam >= c.frob / np.sqrt(2) * (1 - 1e-12))
    assert c.usable.all()


def test_backends_agree_after_normalization(rng):
    h = _crandn(rng, 50, 2, 16)
    l1, u1, v1 = dominant_triplet(h)
    l2, u2, v2 = dominant_triplet(h, svd=_eig_svd)
    np.testing.assert_allclose(l1, l2, rtol=1e-10)
    np.testing.assert_allclose(u1, u2, atol=1e-9)
    np.testing.assert_allclose(v1, v2, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 2 * np.pi))
def test_phase_normalization(seed, theta):
    r = np.random.default_rng(seed)
    u, v = _crandn(r, 3), _crandn(r, 5)
    nu, nv = normalize_phase(u, v)
    ru, rv = normalize_phase(u * np.exp(1j * theta), v * np.exp(1j * theta))
    pivot = nu[np.argmax(np.abs(nu))]
    assert abs(pivot.imag) < 1e-12 and pivot.real > 0
    np.testing.assert_allclose(np.outer(nu, nv.conj()), np.outer(u, v.conj()), atol=1e-12)
    np.testing.assert_allclose(ru, nu, atol=1e-12)
    np.testing.assert_allclose(rv, nv, atol=1e-12)


def test_eta_decreases_with_nt(rng):
    means = []
    for nt in (8, 16, 32, 64):
        vals = [mean_eta(_crandn(rng, 6, nt)) for _ in range(200)]
        means.append(np.mean(vals))
    assert all(a > b for a, b in zip(means, means[1:]))
    # E[eta] = 1/nt for i.i.d. complex Gaussian directions
    np.testing.assert_allclose(means, [1 / 8, 1 / 16, 1 / 32, 1 / 64], rtol=0.1)


def test_cache_shapes(rng):
    h = random_channels(rng, 2, 3, 2, 3, 2, 6)
    inst = custom_instance(h, [(0,), (0, 1), (1,)])
    c = svd_cache(inst.channels, inst.scenario)
    assert c.lam.shape == (3, 2, 3) and c.v.shape == (3, 2, 3, 2, 6)
    assert not np.any(c.v[0, :, :, 1]) and not np.any(c.v[2, :, :, 0])
    np.testing.assert_allclose(c.sub_norm2().sum(axis=-1), 1.0, atol=1e-12)
