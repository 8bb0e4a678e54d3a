import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oransched.central import centralized_bcd
from oransched.corebatch import CoreBatch, lane_width, run_stage1
from oransched.distributed import (CoordinationPayload, JtFragment, MessageLedger, _alpha_pass,
                                   _stage1_group, _stage3_group, core_groups, min_count_selection,
                                   run_distributed, stage1_local, stage21_jt_coordinate,
                                   stage22_njt_decouple, stage3_refine)
from oransched.errors import ConfigurationError, ProtocolError

from conftest import custom_instance, desk_instance, random_channels


def _exhaustive_min_count(values, demand):
    for n in range(1, len(values) + 1):
        for combo in itertools.combinations(range(len(values)), n):
            if sum(values[i] for i in combo) >= demand:
                return n
    return None


def test_min_count_examples():
    rates = [(8.0, "a"), (6.0, "b"), (5.0, "c"), (3.0, "d"), (2.0, "e")]
    assert min_count_selection(rates, 12.0) == (["a", "b"], True)
    assert _exhaustive_min_count([8, 6, 5, 3, 2], 12) == 2
    assert min_count_selection([(7.0, 0), (6.0, 1), (2.0, 2)], 10.0) == ([0, 1], True)
    assert min_count_selection([(7.0, 0), (2.0, 1)], 30.0) == ([0, 1], False)
    assert min_count_selection([(20.0, 3), (6.0, 1)], 15.0) == ([3], True)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 20, allow_nan=False), min_size=1, max_size=7), st.floats(0.01, 60))
def test_min_count_matches_exhaustive(values, demand):
    keys, ok = min_count_selection([(v, i) for i, v in enumerate(values)], demand)
    best = _exhaustive_min_count(values, demand)
    assert ok == (best is not None)
    if ok:
        assert len(keys) == best
        assert sum(values[i] for i in keys) >= demand
    else:
        assert sorted(keys) == list(range(len(values)))


def test_alpha_filter():
    assert _alpha_pass(0.3, 1.0, 0.0) and not _alpha_pass(-0.1, 1.0, 0.0)
    assert _alpha_pass(1.0, 1.0, 0.5) and not _alpha_pass(0.3, 1.0, 0.5)


def _plain_local_bcd(inst, m, c, max_sweeps=10):
    """Local BCD where a bit is 1 iff its gain and its candidate rate are both positive."""
    from oransched.central import PenaltyObjective
    ues = inst.scenario.associated(m)
    obj = PenaltyObjective.from_coeffs(inst.coeffs, inst.scenario, 5.0, cells=[m], ccs=[c], ues=ues)
    for _ in range(max_sweeps):
        changed = False
        for z in range(len(ues)):
            rates = [obj.candidate_rate(z, 0, r, 0) for r in range(inst.scenario.config.num_rbgs)]
            for r, rate in enumerate(rates):
                keep = obj.gain(z, 0, r, (0,)) > 0 and rate > 0
                changed |= obj.set_bit(z, 0, r, (0,), keep)
        if not changed:
            break
    return obj.bits[0, 0]


@pytest.mark.parametrize("seed", range(3))
def test_alpha_zero_is_plain_local_bcd(seed):
    inst = desk_instance(seed)
    for m, c in [(0, 0), (1, 1), (2, 1)]:
        res, _ = stage1_local(inst.coeffs, inst.scenario, m, c, alpha=0.0)
        np.testing.assert_array_equal(res.bits, _plain_local_bcd(inst, m, c))
        assert np.all(np.diff(res.trace) >= -1e-9)


def test_dominant_rbg_survives_filter():
    # one UE, two RBGs: the second carries ~0.3 of the first's rate
    h = np.zeros((1, 1, 1, 2, 1, 4), complex)
    h[0, 0, 0, 0, 0, 0] = 1.0
    h[0, 0, 0, 1, 0, 0] = 1.0
    inst = custom_instance(h, [(0,)])
    psi = inst.coeffs.psi
    scale = 2.0 ** (0.3 * psi[0, 0, 0, 0] - psi[0, 0, 1, 0])
    h[0, 0, 0, 1] *= np.sqrt(scale)
    inst = custom_instance(h, [(0,)])
    ratio = inst.coeffs.psi[0, 0, 1, 0] / inst.coeffs.psi[0, 0, 0, 0]
    assert ratio == pytest.approx(0.3, abs=1e-9)
    res, _ = stage1_local(inst.coeffs, inst.scenario, 0, 0, alpha=0.5)
    assert res.bits[:, 0].tolist() == [True, False]
    res, _ = stage1_local(inst.coeffs, inst.scenario, 0, 0, alpha=0.0)
    assert res.bits[:, 0].tolist() == [True, True]


def test_alpha_validated():
    inst = desk_instance(0)
    with pytest.raises(ConfigurationError):
        stage1_local(inst.coeffs, inst.scenario, 0, 0, alpha=1.0)
    with pytest.raises(ConfigurationError):
        run_distributed(inst.coeffs, inst.scenario, alpha=-0.1)
    with pytest.raises(ConfigurationError):
        run_distributed(inst.coeffs, inst.scenario, worker_threads=0)


@pytest.mark.parametrize("seed", range(3))
def test_inf_delta_from_scratch(seed):
    inst = desk_instance(seed)
    sc, co = inst.scenario, inst.coeffs
    checked = 0
    for m in range(3):
        for c in range(2):
            res, payload = stage1_local(co, sc, m, c)
            for i, frag in payload.jt.items():
                li = res.ues.index(i)
                for r in range(sc.config.num_rbgs):
                    on = [res.ues[j] for j in np.flatnonzero(res.bits[r]) if j != li]
                    s = len(on)
                    phi = s + 1
                    ref = sum(-co.d[m, c, r, i, k] for k in on)
                    if s:
                        ref += s * (math.log2(phi) - math.log2(phi - 1))
                    assert frag.inf_1to0[r] == pytest.approx(ref, abs=1e-9)
                    assert frag.inf_0to1[r] == pytest.approx(-ref, abs=1e-9)
                    assert frag.inf_1to0[r] >= 0 and frag.inf_0to1[r] <= 0
                    # f-bar: rate of i with its bit tentatively 1
                    fbar = co.weight[i] * (co.psi[m, c, r, i] + sum(co.d[m, c, r, k, i] for k in on)
                                           - math.log2(phi))
                    assert frag.fbar[r] == pytest.approx(fbar, abs=1e-9)
                    checked += 1
    assert checked > 0


def _payloads(inst):
    out = {}
    for m in range(inst.scenario.num_cells):
        for c in range(inst.scenario.config.num_ccs):
            out[m, c] = stage1_local(inst.coeffs, inst.scenario, m, c)[1]
    return out


def test_missing_fragment_is_protocol_error():
    inst = desk_instance(0)
    p = _payloads(inst)
    jt = inst.scenario.jt_ues()
    assert jt
    m = inst.scenario.ues[jt[0]].serving_set[1]
    del p[m, 1]
    with pytest.raises(ProtocolError):
        stage21_jt_coordinate(p, inst.scenario)
    with pytest.raises(ProtocolError):
        stage22_njt_decouple(p, inst.scenario, m)


def _jt_instance(demands=None):
    h = random_channels(np.random.default_rng(4), 2, 1, 1, 2, 2, 8)
    return custom_instance(h, [(0, 1)], demands=demands)


def _fragment(fbar, scheduled, inf=(0.0, 0.0)):
    n = len(fbar)
    return JtFragment(np.array(fbar, float), np.full(n, inf[0]), np.full(n, inf[1]),
                      np.array(scheduled, bool), np.ones(n, bool))


def test_consistent_jt_kept():
    inst = _jt_instance()
    frag = _fragment([5.0, 4.0], [True, True], inf=(0.5, -0.5))
    p = {(0, 0): CoordinationPayload(0, 0, {0: frag}, {}),
         (1, 0): CoordinationPayload(1, 0, {0: frag}, {})}
    coord = stage21_jt_coordinate(p, inst.scenario)
    assert coord.consensus[0].tolist() == [[True, True]]
    np.testing.assert_allclose(coord.fhat[0, 0], [[5.0, 4.0]])


def test_split_decision_uses_margin():
    inst = _jt_instance()
    # cell 0 schedules, cell 1 does not; F01 = 3 - 1 = 2 > F10 = -4 + 1 = -3
    p = {(0, 0): CoordinationPayload(0, 0, {0: _fragment([4.0, 4.0], [True, True], (1.0, -1.0))}, {}),
         (1, 0): CoordinationPayload(1, 0, {0: _fragment([3.0, -9.0], [False, False], (1.0, -1.0))}, {})}
    coord = stage21_jt_coordinate(p, inst.scenario)
    assert coord.consensus[0].tolist() == [[True, False]]


def test_qos_jt_single_rbg_sufficient():
    inst = _jt_instance(demands={0: 6.0})
    frag = _fragment([4.0, 3.5], [True, True], inf=(0.5, -0.5))
    p = {(m, 0): CoordinationPayload(m, 0, {0: frag}, {}) for m in (0, 1)}
    coord = stage21_jt_coordinate(p, inst.scenario)
    assert coord.consensus[0].sum() == 1 and coord.consensus[0][0, 0]
    assert coord.best_effort == []
    # single CC: only the other cell's share is credited from outside core [m, 0]
    np.testing.assert_allclose(coord.qos_bar[0, 0], [4.0])


def test_qos_jt_infeasible_best_effort():
    inst = _jt_instance(demands={0: 100.0})
    frag = _fragment([4.0, 3.5], [True, True], inf=(0.5, -0.5))
    p = {(m, 0): CoordinationPayload(m, 0, {0: frag}, {}) for m in (0, 1)}
    coord = stage21_jt_coordinate(p, inst.scenario)
    assert coord.consensus[0].all() and coord.best_effort == [0]


def _njt_instance(n_cc, demands):
    h = random_channels(np.random.default_rng(5), 1, 2, n_cc, 3, 2, 8)
    return custom_instance(h, [(0,), (0,)], demands=demands)


def test_njt_decouple_prunes_surplus():
    inst = _njt_instance(2, {0: 10.0})
    p = {(0, 0): CoordinationPayload(0, 0, {}, {0: {0: 7.0, 2: 2.0}, 1: {1: 3.0}}),
         (0, 1): CoordinationPayload(0, 1, {}, {0: {1: 6.0}, 1: {0: 1.0}})}
    dec = stage22_njt_decouple(p, inst.scenario, 0)
    assert dec.keep[0, 0] == {0} and dec.keep[1, 0] == {1}
    assert dec.keep[0, 1] == {1} and dec.keep[1, 1] == {0}
    np.testing.assert_allclose(dec.qos_bar[0], [6.0, 7.0])
    assert dec.best_effort == []


def test_njt_decouple_infeasible_keeps_all():
    inst = _njt_instance(2, {0: 50.0})
    p = {(0, 0): CoordinationPayload(0, 0, {}, {0: {0: 7.0, 2: 2.0}}),
         (0, 1): CoordinationPayload(0, 1, {}, {0: {1: 6.0}})}
    dec = stage22_njt_decouple(p, inst.scenario, 0)
    assert dec.keep[0, 0] == {0, 2} and dec.keep[1, 0] == {1}
    assert dec.best_effort == [0]


def test_single_cc_qos_bar_zero():
    inst = _njt_instance(1, {0: 5.0, 1: 5.0})
    dec = stage22_njt_decouple(_payloads(inst), inst.scenario, 0)
    for k, v in dec.qos_bar.items():
        np.testing.assert_array_equal(v, [0.0])


@pytest.mark.parametrize("seed", range(5))
def test_decoupling_never_adds_bits(seed):
    inst = desk_instance(seed)
    p = _payloads(inst)
    for m in range(3):
        dec = stage22_njt_decouple(p, inst.scenario, m)
        for (c, k), kept in dec.keep.items():
            assert kept <= set(p[m, c].njt_active_rates.get(k, {}))
        for v in dec.qos_bar.values():
            assert np.all(v >= 0)


def test_saturated_qos_ue_released():
    inst = _njt_instance(1, {0: 5.0})
    ones = np.ones(3, bool)
    res = stage3_refine(inst.coeffs, inst.scenario, 0, 0, {}, {0: ones, 1: ones}, {0: 10.0})
    assert not res.bits[:, 0].any()
    assert res.bits[:, 1].any()


def test_stage3_without_jt_matches_restricted_bcd():
    r = np.random.default_rng(11)
    h = random_channels(r, 2, 6, 2, 3, 2, 8)
    serving = [(0,), (1,), (0,), (1,), (0,), (1,)]
    demands = {1: 20.0, 3: 9.0}
    inst = custom_instance(h, serving, demands=demands)
    m, c = 1, 1
    ues = inst.scenario.associated(m)
    res = stage3_refine(inst.coeffs, inst.scenario, m, c, {}, {}, {})
    sub = custom_instance(h[m:m + 1, ues][:, :, c:c + 1], [(0,)] * len(ues),
                          demands={ues.index(k): q for k, q in demands.items() if k in ues})
    ref = centralized_bcd(sub.coeffs, sub.scenario)
    np.testing.assert_array_equal(res.bits, ref.schedule.b[0, :, 0, :].T)
    assert res.objective == pytest.approx(ref.trace[-1], abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_stage3_frozen_jt_and_monotone(seed):
    inst = desk_instance(seed)
    res = run_distributed(inst.coeffs, inst.scenario)
    for (m, c), core in res.stage3.items():
        assert np.all(np.diff(core.trace) >= -1e-9)
        for li, t in enumerate(core.ues):
            if inst.scenario.ues[t].is_jt:
                np.testing.assert_array_equal(core.bits[:, li], res.coordination.consensus[t][c])


@pytest.mark.parametrize("seed", range(5))
def test_batched_matches_reference(seed):
    inst = desk_instance(seed)
    sc, co = inst.scenario, inst.coeffs
    cores = [(m, c) for m in range(3) for c in range(2)]
    batched, payloads = _stage1_group(co, sc, cores, 5.0, 0.5, 10, lane_width(sc))
    for res, pl in zip(batched, payloads):
        ref, ref_pl = stage1_local(co, sc, res.cell, res.cc)
        np.testing.assert_array_equal(res.bits, ref.bits)
        assert res.sweeps == ref.sweeps
        np.testing.assert_allclose(res.trace, ref.trace, atol=1e-9)
        for i, frag in ref_pl.jt.items():
            np.testing.assert_allclose(pl.jt[i].fbar, frag.fbar, atol=1e-9)
            np.testing.assert_allclose(pl.jt[i].inf_1to0, frag.inf_1to0, atol=1e-9)
            np.testing.assert_array_equal(pl.jt[i].room, frag.room)
        assert pl.njt_active_rates.keys() == ref_pl.njt_active_rates.keys()
    # Stage 3 on arbitrary inputs
    r = np.random.default_rng(seed)
    args = {}
    for m, c in cores:
        jt = {i: r.random(4) < 0.5 for i in sc.jt_ues(m)}
        njt = {k: r.random(4) < 0.6 for k in sc.njt_ues(m)}
        qbar = {k: float(r.uniform(0, 20)) for k in sc.qos_ues() if k in sc.associated(m)}
        args[m, c] = (jt, njt, qbar)
    out = _stage3_group(co, sc, cores, args, 5.0, 10, lane_width(sc))
    for res in out:
        ref = stage3_refine(co, sc, res.cell, res.cc, *args[res.cell, res.cc])
        np.testing.assert_array_equal(res.bits, ref.bits)
        np.testing.assert_allclose(res.trace, ref.trace, atol=1e-9)


def test_stage1_separable():
    inst = desk_instance(3)
    m, c = 1, 0
    before, _ = stage1_local(inst.coeffs, inst.scenario, m, c)
    co = inst.coeffs
    saved = co.psi.copy(), co.d.copy()
    try:
        co.psi[0] += 3.0
        co.psi[m, 1] -= 2.0
        co.d[2] *= 0.5
        after, _ = stage1_local(co, inst.scenario, m, c)
    finally:
        co.psi[...], co.d[...] = saved
    np.testing.assert_array_equal(before.bits, after.bits)


@pytest.mark.parametrize("seed", range(3))
def test_grouping_does_not_change_schedule(seed):
    inst = desk_instance(seed)
    ref = run_distributed(inst.coeffs, inst.scenario, num_groups=1).schedule
    for n in (2, 4, 6):
        assert run_distributed(inst.coeffs, inst.scenario, worker_threads=4, num_groups=n).schedule == ref


def test_core_groups():
    cores = [(m, c) for m in range(3) for c in range(2)]
    for n in range(1, 9):
        groups = core_groups(cores, 16, n)
        assert sum(groups, []) == cores
        assert len(groups) == min(n, 6)
    assert len(core_groups(cores, 1)) == 1


@pytest.mark.parametrize("seed", range(5))
def test_run_distributed_contracts(seed):
    inst = desk_instance(seed)
    res = run_distributed(inst.coeffs, inst.scenario, worker_threads=4)
    sc = inst.scenario
    assert res.schedule.is_consistent(sc)
    assert res.schedule.respects_association(sc)
    assert res.schedule.load().max() <= sc.config.nt
    assert res.ledger.single_round()
    led = res.ledger.to_dict()
    assert led["pus"]["0"]["uploads"] == 0
    assert all(led["pus"][str(p)]["intra_exchanges"] == 2 for p in (1, 2, 3))
    assert {row["stage"] for row in res.trace_rows()} == {"stage1", "stage3"}
    for v in res.coordination.qos_bar.values():
        assert v.shape == (2,) and np.all(v >= 0)


def test_no_coordination_variant():
    inst = desk_instance(1)
    res = run_distributed(inst.coeffs, inst.scenario, coordinate_njt=False)
    assert res.decoupling == {}
    assert res.ledger.single_round()
    assert all(res.ledger.pus[p].intra_exchanges == 1 for p in (1, 2, 3))
    assert res.schedule.is_consistent(inst.scenario)


def test_ledger_counts():
    led = MessageLedger(2)
    led.upload(1, 10)
    led.download(1, 5)
    assert not led.single_round()
    led.upload(2, 1)
    led.download(2, 1)
    assert led.single_round() and led.total_bytes == 17
    led.download(2, 1)
    assert not led.single_round()


def test_batch_state_consistent_after_stage1():
    inst = desk_instance(4)
    cores = [(0, 0), (1, 1), (2, 0)]
    batch = CoreBatch(inst.coeffs, inst.scenario, cores)
    run_stage1(batch, 0.5, 10)
    values, totals = batch.values.copy(), batch.totals.copy()
    batch.recompute()
    np.testing.assert_allclose(batch.values, values, atol=1e-9)
    np.testing.assert_allclose(batch.totals, totals, atol=1e-9)
