"""Engine tests: iTEBD updates, re-orthogonalization, finite-chain oracle checks."""

import numpy as np
import pytest

from oechain import dense_ref
from oechain.engine import (
    apply_bond_gate,
    canonicalize_finite,
    evolve,
    evolve_finite,
    finite_site_expectations,
    finite_to_dense,
    finite_trace_vector,
    hermiticity_residual,
    measure_finite,
    measure_unit_cell,
    normalize,
    reorthogonalize,
    trace_observables,
)
from oechain.model import (
    GateTable,
    ModelParams,
    SZ_TRACE_VEC,
    bond_liouvillian,
    gate_exponential,
    initial_state,
    initial_state_finite,
    trotter_schedule,
)
from oechain.observables import SchmidtSpectrum, operator_entanglement
from oechain.qtensor import QTensor, SchmidtVector, scale_leg
from oechain.state import state_from_bytes, state_to_bytes

XXZ = ModelParams.xxz(jz=-1.0, gamma=0.5)


def make_gates(params, order, dt, mode, length=None):
    sched = trotter_schedule(order, dt)
    return sched, GateTable(params, sched, mode, length)


def s_op_of(state):
    spec = SchmidtSpectrum.from_schmidt_vector(state.lambda_b, m_ref=0)
    return operator_entanglement(spec)


# -- unit cell updates ---------------------------------------------------------------


def test_identity_gate_fixed_point():
    state = initial_state("neel_z", "u1")
    gate = gate_exponential(bond_liouvillian(XXZ), 0.0, "u1")
    new, disc = apply_bond_gate(state, gate, "even", 64, 0.0)
    assert disc == 0.0
    _, rec = measure_unit_cell(new, 0.0, 64, 0.0)
    assert rec.report.s_op < 1e-10
    assert abs(rec.sz_a - 1.0) < 1e-10 and abs(rec.sz_b + 1.0) < 1e-10


def test_pure_dephasing_fixed_point():
    params = ModelParams(0.0, 0.0, 0.0, 0.0, 1.0)
    state = initial_state("neel_z", "u1")
    gate = gate_exponential(bond_liouvillian(params), 0.3, "u1")
    new, _ = apply_bond_gate(state, gate, "even", 64, 0.0)
    new, _ = apply_bond_gate(new, gate, "odd", 64, 0.0)
    new, rec = measure_unit_cell(new, 0.0, 64, 0.0)
    assert rec.report.s_op < 1e-10
    assert rec.trace_drift < 1e-10
    assert abs(rec.sz_a - 1.0) < 1e-10


def test_evolve_t_max_zero_single_record():
    state = initial_state("neel_z", "u1")
    sched, gates = make_gates(XXZ, 2, 0.1, "u1")
    records = list(evolve(state, sched, gates, 0.0, chi_max=32))
    assert len(records) == 1 and records[0].t == 0.0


def test_infinite_matches_dense_bulk_short_time():
    # gamma = 0 closed dynamics: the L=8 open chain's central sites agree
    # with the infinite chain until the light cone reaches the boundary
    params = ModelParams.xxz(jz=-1.0, gamma=0.0)
    state = initial_state("neel_z", "u1")
    sched, gates = make_gates(params, 4, 0.05, "u1")
    recs = list(
        evolve(state, sched, gates, 0.5, chi_max=64, weight_tol=0.0,
               measure_interval=0.25)
    )
    lv = dense_ref.build_liouvillian(params, 8)
    rho0 = dense_ref.product_density_matrix("neel_z", 8)
    times = [r.t for r in recs]
    rhos = dense_ref.evolve_dense(rho0, lv, times)
    for rec, rho in zip(recs, rhos):
        sz = dense_ref.site_magnetizations(rho)
        assert abs(rec.sz_a - sz[4]) < 1e-6
        assert abs(rec.sz_b - sz[3]) < 1e-6


def test_trace_and_hermiticity_through_dissipative_sweeps():
    state = initial_state("neel_z", "u1")
    sched, gates = make_gates(XXZ, 2, 0.1, "u1")
    recs = list(evolve(state, sched, gates, 1.0, chi_max=64, weight_tol=1e-14,
                       measure_interval=0.5))
    for rec in recs:
        assert rec.trace_drift <= rec.accum_discarded + 1e-8
        assert rec.hermiticity < 1e-8
        assert rec.reorth_residual < 1e-10


# -- re-orthogonalization -------------------------------------------------------------


def evolved_state(t=0.6, params=XXZ, chi=64):
    state = initial_state("neel_z", "u1")
    sched, gates = make_gates(params, 2, 0.1, "u1")
    for rec in evolve(state, sched, gates, t, chi_max=chi, weight_tol=1e-14,
                      measure_interval=10.0):
        pass
    # rebuild the final state by replaying (evolve only yields records)
    state = initial_state("neel_z", "u1")
    sweeps = int(round(t / sched.dt))
    for _ in range(sweeps):
        for parity, tau in sched.steps:
            state, _ = apply_bond_gate(state, gates.infinite(tau), parity, chi, 1e-14)
    return state


def test_reorthogonalize_idempotent():
    state = evolved_state()
    state, res1 = reorthogonalize(state)
    s1 = s_op_of(state)
    state2, res2 = reorthogonalize(state)
    assert res2 < 1e-10
    assert abs(s_op_of(state2) - s1) < 1e-10


def test_reorthogonalize_undoes_random_gauge(rng):
    state = evolved_state()
    state, _ = reorthogonalize(state)
    s_ref = s_op_of(state)
    # corrupt the b bond with a random invertible block-diagonal gauge
    g = {}
    ginv = {}
    for c, vals in state.lambda_b.entries.items():
        d = vals.size
        m = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
        m += 2.0 * np.eye(d)  # keep it well-conditioned
        g[c] = m
        ginv[c] = np.linalg.inv(m)
    ga = state.gamma_a
    blocks_a = {
        key: np.tensordot(ginv[key[0]], arr, ((1,), (0,)))
        for key, arr in ga.blocks.items()
    }
    gb = state.gamma_b
    blocks_b = {
        key: np.tensordot(arr, g[key[2]], ((2,), (0,)))
        for key, arr in gb.blocks.items()
    }
    # fold lambda_b into gamma_b so the corrupted state still represents rho
    lam_flat = {
        c: np.ones(v.size) for c, v in state.lambda_b.entries.items()
    }
    corrupt = state.copy()
    corrupt.gamma_a = QTensor(ga.legs, blocks_a, ga.total)
    corrupt.gamma_b = scale_leg(
        QTensor(gb.legs, blocks_b, gb.total), 2, state.lambda_b
    )
    corrupt.lambda_b = SchmidtVector(lam_flat).normalize()[0]
    fixed, _ = reorthogonalize(corrupt)
    assert abs(s_op_of(fixed) - s_ref) < 1e-8


def test_reorth_required_for_entropy():
    # without re-orthogonalization raw lambdas drift away from the
    # dense-reference entropy; with it they agree
    params = ModelParams.xxz(jz=-1.0, gamma=0.5)
    length = 6
    state = initial_state_finite("neel_z", length, "u1")
    sched = trotter_schedule(4, 0.05)
    gates = GateTable(params, sched, "u1", length)
    t_max = 1.5
    recs = list(
        evolve_finite(state, sched, gates, t_max, chi_max=64, weight_tol=0.0,
                      measure_interval=0.5)
    )
    lv = dense_ref.build_liouvillian(params, length)
    rho0 = dense_ref.product_density_matrix("neel_z", length)
    rhos = dense_ref.evolve_dense(rho0, lv, [r.t for r in recs])
    for rec, rho in zip(recs, rhos):
        s_ref, _ = dense_ref.exact_operator_entanglement(rho, length // 2)
        assert abs(rec.report.s_op - s_ref) < 1e-4


# -- finite chains ---------------------------------------------------------------------


def test_finite_two_site_dephasing_decay():
    gamma = 0.8
    params = ModelParams(0.0, 0.0, 0.0, 0.0, gamma)
    length = 2
    # superpose Neel-z and its x-tilted cousin to seed off-diagonal weight
    state = initial_state_finite("neel_x", length, "trivial")
    sched = trotter_schedule(2, 0.05)
    gates = GateTable(params, sched, "trivial", length)
    recs = list(evolve_finite(state, sched, gates, 1.0, chi_max=16,
                              weight_tol=0.0, measure_interval=0.25))
    for rec in recs:
        rho = None
        # off-diagonal coherence weight decays at rate 2 gamma in squared norm
        spec = rec.report.p
        # single sector in trivial mode; use sx expectation instead
        assert abs(rec.sx_a - np.exp(-gamma * rec.t)) < 1e-6


def test_finite_l6_xxz_matches_dense():
    params = ModelParams.xxz(jz=-1.0, gamma=0.5)
    length = 6
    state = initial_state_finite("neel_z", length, "u1")
    sched = trotter_schedule(4, 0.05)
    gates = GateTable(params, sched, "u1", length)
    recs = list(evolve_finite(state, sched, gates, 1.0, chi_max=64,
                              weight_tol=0.0, measure_interval=0.5))
    lv = dense_ref.build_liouvillian(params, length)
    rho0 = dense_ref.product_density_matrix("neel_z", length)
    rhos = dense_ref.evolve_dense(rho0, lv, [r.t for r in recs])
    for rec, rho in zip(recs, rhos):
        sz = dense_ref.site_magnetizations(rho)
        assert np.max(np.abs(rec.sz_sites - sz)) < 1e-6


def test_finite_l4_ising_s_op_matches_dense():
    params = ModelParams.ising(hz=1.0, gamma=0.5)
    length = 4
    state = initial_state_finite("neel_z", length, "trivial")
    sched = trotter_schedule(4, 0.05)
    gates = GateTable(params, sched, "trivial", length)
    recs = list(evolve_finite(state, sched, gates, 1.0, chi_max=64,
                              weight_tol=0.0, measure_interval=0.5))
    lv = dense_ref.build_liouvillian(params, length)
    rho0 = dense_ref.product_density_matrix("neel_z", length)
    rhos = dense_ref.evolve_dense(rho0, lv, [r.t for r in recs])
    for rec, rho in zip(recs, rhos):
        s_ref, _ = dense_ref.exact_operator_entanglement(rho, length // 2)
        assert abs(rec.report.s_op - s_ref) < 1e-5


def test_sector_labels_match_dense_on_asymmetric_cut():
    # cut after site 3 of L=4: the right half is a single down spin, so the
    # magnetization deviation is one-sided; catches sign mistakes in M_R
    params = ModelParams.xxz(jz=0.0, gamma=0.3)
    length = 4
    state = initial_state_finite("neel_z", length, "u1")
    sched = trotter_schedule(4, 0.05)
    gates = GateTable(params, sched, "u1", length)
    t_max = 0.3
    for _ in range(int(round(t_max / sched.dt))):
        for parity, tau in sched.steps:
            bonds = range(0, length - 1, 2) if parity == "even" else range(1, length - 1, 2)
            for b in bonds:
                from oechain.engine import apply_gate_finite

                apply_gate_finite(state, gates.finite(tau, b), b, 64, 0.0)
    st2, report, spec = measure_finite(state, t_max, bond=3)
    rho = finite_to_dense(st2)
    lv = dense_ref.build_liouvillian(params, length)
    rho_ref = dense_ref.evolve_dense(
        dense_ref.product_density_matrix("neel_z", length), lv, [t_max]
    )[0]
    p_ref = dense_ref.sector_probabilities_dense(rho_ref, 3)
    assert p_ref.get(2, 0.0) > 1e-4  # the down spin can only gain magnetization
    for m, val in p_ref.items():
        assert abs(report.p.get(m, 0.0) - val) < 1e-6, (m, report.p, p_ref)
    assert np.max(np.abs(rho - rho_ref)) < 1e-6


def test_finite_to_dense_round_trip():
    state = initial_state_finite("neel_z", 4, "u1")
    rho = finite_to_dense(state)
    ref = dense_ref.product_density_matrix("neel_z", 4)
    assert np.max(np.abs(rho - ref)) < 1e-14
    state_x = initial_state_finite("neel_x", 4, "trivial")
    rho_x = finite_to_dense(state_x)
    ref_x = dense_ref.product_density_matrix("neel_x", 4)
    assert np.max(np.abs(rho_x - ref_x)) < 1e-14


def test_canonicalize_finite_preserves_state():
    params = ModelParams.xxz(jz=-1.0, gamma=0.5)
    length = 4
    state = initial_state_finite("neel_z", length, "u1")
    sched = trotter_schedule(2, 0.1)
    gates = GateTable(params, sched, "u1", length)
    from oechain.engine import apply_gate_finite

    for _ in range(3):
        for parity, tau in sched.steps:
            bonds = range(0, length - 1, 2) if parity == "even" else range(1, length - 1, 2)
            for b in bonds:
                apply_gate_finite(state, gates.finite(tau, b), b, 64, 0.0)
    before = finite_to_dense(state)
    canon = canonicalize_finite(state)
    after = finite_to_dense(canon)
    assert np.max(np.abs(before - after)) < 1e-10
    assert abs(finite_trace_vector(canon) - 1.0) < 1e-9


# -- serialization ----------------------------------------------------------------------


def test_state_serialization_round_trip():
    state = evolved_state(t=0.3)
    buf = state_to_bytes(state)
    back = state_from_bytes(buf)
    assert back.mode == state.mode
    assert back.log_trace == state.log_trace
    for g1, g2 in ((back.gamma_a, state.gamma_a), (back.gamma_b, state.gamma_b)):
        assert set(g1.blocks) == set(g2.blocks)
        for k in g1.blocks:
            assert np.array_equal(g1.blocks[k], g2.blocks[k])
    fstate = initial_state_finite("neel_z", 4, "u1")
    back_f = state_from_bytes(state_to_bytes(fstate))
    assert back_f.length == 4
