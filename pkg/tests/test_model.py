"""Model construction tests: Hamiltonian elements, Lindblad generators, gates."""

import numpy as np
import pytest
import scipy.linalg

from oechain.dense_ref import build_liouvillian
from oechain.errors import ParameterError, StructureError
from oechain.model import (
    LOCAL_CHARGES,
    ModelParams,
    _superop_to_site_tensor,
    bond_liouvillian,
    gate_exponential,
    initial_state,
    symmetry_mode,
    trotter_schedule,
    two_site_hamiltonian,
)
from oechain.qtensor import to_dense

# Hilbert basis: |up,up>, |up,down>, |down,up>, |down,down>
UU, UD, DU, DD = 0, 1, 2, 3


def test_xxz_flip_flop_element():
    h = two_site_hamiltonian(ModelParams.xxz(jz=0.0, gamma=0.0))
    assert abs(h[UD, DU] - 0.5) < 1e-15


def test_ising_field_element():
    h = two_site_hamiltonian(ModelParams.ising(hz=1.0, gamma=0.0))
    assert abs(h[UU, UU] - 0.5) < 1e-15


def test_xxz_anisotropy_sign_against_dense_assembly():
    params = ModelParams.xxz(jz=-1.0, gamma=0.0)
    h = two_site_hamiltonian(params)
    assert abs(h[UD, UD] - 0.25) < 1e-15
    # independent two-site assembly from the dense reference path
    ref = build_liouvillian(params, 2).hamiltonian.toarray()
    # the L=2 reference gives full field weight to both sites; here hz = 0
    assert np.max(np.abs(h - ref)) < 1e-14


def test_gamma_zero_superop_antihermitian():
    lb = bond_liouvillian(ModelParams.xxz(jz=-0.7, gamma=0.0))
    assert np.max(np.abs(lb + lb.conj().T)) < 1e-14


def test_single_coherence_decay_rate():
    # |up><down| on site 1, diagonal on site 2; J = 0, gamma = 1.  One bond
    # carries half the site dissipator, the two bonds together give gamma.
    params = ModelParams(0.0, 0.0, 0.0, 0.0, 1.0)
    lb = bond_liouvillian(params)  # bulk weights 1/2, 1/2
    rho = np.zeros((4, 4), dtype=complex)
    rho[UU, DU] = 1.0  # ket (up,up), bra (down,up): coherence on site 1
    tau = 0.37
    half = scipy.linalg.expm(lb * tau) @ rho.reshape(-1)
    # half share applied twice = both adjacent bonds summed
    full = scipy.linalg.expm(lb * tau) @ half
    assert abs(half.reshape(4, 4)[UU, DU] - np.exp(-0.5 * tau)) < 1e-12
    assert abs(full.reshape(4, 4)[UU, DU] - np.exp(-1.0 * tau)) < 1e-12


def _embed_bond_superop(lb16: np.ndarray, length: int, bond: int) -> np.ndarray:
    """Embed a two-site superoperator into the full vectorized chain."""
    site_major = _superop_to_site_tensor(lb16).reshape(16, 16)
    full = np.kron(
        np.eye(4**bond), np.kron(site_major, np.eye(4 ** (length - 2 - bond)))
    )
    # permute from per-site (k_j, b_j) layout to (all kets, all bras)
    dim = 4**length
    idx = np.arange(dim)
    kb = np.zeros(dim, dtype=int)
    for a in idx:
        k = b = 0
        rest = a
        for j in range(length):
            pair = (rest // 4 ** (length - 1 - j)) % 4
            k = 2 * k + pair // 2
            b = 2 * b + pair % 2
        kb[a] = k * 2**length + b
    out = np.zeros_like(full)
    out[np.ix_(kb, kb)] = full
    return out


def test_chain_assembly_matches_dense_reference():
    params = ModelParams.xxz(jz=-0.6, gamma=0.8)
    length = 4
    total = np.zeros((4**length, 4**length), dtype=complex)
    for bond in range(length - 1):
        wl = 1.0 if bond == 0 else 0.5
        wr = 1.0 if bond == length - 2 else 0.5
        total += _embed_bond_superop(bond_liouvillian(params, wl, wr), length, bond)
    ref = build_liouvillian(params, length).matrix.toarray()
    assert np.max(np.abs(total - ref)) < 1e-12


def test_gate_tau_zero_is_identity():
    lb = bond_liouvillian(ModelParams.xxz(jz=-1.0, gamma=0.5))
    gate = gate_exponential(lb, 0.0, mode="u1")
    dense = _gate_to_matrix(gate)
    assert np.max(np.abs(dense - np.eye(16))) < 1e-14


def test_gate_inverse():
    lb = bond_liouvillian(ModelParams.xxz(jz=-1.0, gamma=0.5))
    fwd = _gate_to_matrix(gate_exponential(lb, 0.31, mode="u1"))
    bwd = _gate_to_matrix(gate_exponential(lb, -0.31, mode="u1"))
    assert np.max(np.abs(fwd @ bwd - np.eye(16))) < 1e-12


def test_gate_pure_dephasing_closed_form():
    gamma, tau = 1.3, 0.41
    params = ModelParams(0.0, 0.0, 0.0, 0.0, gamma)
    gate = _gate_site_tensor(gate_exponential(bond_liouvillian(params), tau, mode="u1"))
    mat = gate.reshape(16, 16)  # (i1', i2') x (i1, i2) in basis order
    # diagonal on the operator basis; each coherent index decays with the
    # per-bond half share gamma/2 * tau per site
    expected = np.zeros(16)
    for i1, c1 in enumerate(LOCAL_CHARGES):
        for i2, c2 in enumerate(LOCAL_CHARGES):
            n_coh = (c1.ket != c1.bra) + (c2.ket != c2.bra)
            expected[4 * i1 + i2] = np.exp(-0.5 * gamma * tau * n_coh)
    assert np.max(np.abs(np.diag(mat) - expected)) < 1e-12
    assert np.max(np.abs(mat - np.diag(np.diag(mat)))) < 1e-12


def _gate_to_matrix(gate) -> np.ndarray:
    """Dense 16x16 superoperator in the (ket, bra) vec layout."""
    g = _gate_site_tensor(gate)
    # (i1o, i2o, i1i, i2i) -> rows (s1o s2o s1o' s2o')
    t = g.reshape(2, 2, 2, 2, 2, 2, 2, 2)
    t = np.transpose(t, (0, 2, 1, 3, 4, 6, 5, 7))
    return np.ascontiguousarray(t.reshape(16, 16))


def _gate_site_tensor(gate) -> np.ndarray:
    dense = to_dense(gate.tensor)
    if gate.mode == "trivial":
        return dense
    # dense layout follows charge-sorted sectors; map to basis order
    offs = gate.tensor.legs[0].offsets()
    order = [offs[c] for c in LOCAL_CHARGES]
    return dense[np.ix_(order, order, order, order)]


def test_gate_trace_and_hermiticity_preservation(rng):
    lb = bond_liouvillian(ModelParams.xyz(jy=0.8, jz=-0.5, gamma=0.5))
    gate = _gate_to_matrix(gate_exponential(lb, 0.2, mode="trivial"))
    for _ in range(10):
        r = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
        r = r + r.conj().T
        out = (gate @ r.reshape(-1)).reshape(4, 4)
        assert abs(np.trace(out) - np.trace(r)) < 1e-10
        assert np.max(np.abs(out - out.conj().T)) < 1e-10


def test_gate_u1_block_structure():
    lb = bond_liouvillian(ModelParams.xxz(jz=-1.0, gamma=0.5))
    gate = gate_exponential(lb, 0.2, mode="u1")
    for key in gate.tensor.blocks:
        c1o, c2o, c1i, c2i = key
        assert c1o + c2o == c1i + c2i


def test_gate_u1_rejects_symmetry_breaking_models():
    lb = bond_liouvillian(ModelParams.ising(hz=1.0, gamma=0.5))
    with pytest.raises(StructureError):
        gate_exponential(lb, 0.2, mode="u1")


def test_gamma_zero_gate_is_unitary_conjugation(rng):
    params = ModelParams.xxz(jz=-0.4, gamma=0.0)
    tau = 0.17
    gate = _gate_to_matrix(gate_exponential(bond_liouvillian(params), tau, mode="u1"))
    h = two_site_hamiltonian(params)
    u = scipy.linalg.expm(-1j * h * tau)
    r = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    direct = u @ r @ u.conj().T
    via_gate = (gate @ r.reshape(-1)).reshape(4, 4)
    assert np.max(np.abs(direct - via_gate)) < 1e-10


# -- Trotter schedules -------------------------------------------------------------


def test_trotter_order2_coefficients():
    s = trotter_schedule(2, 0.2)
    assert [(p, round(c, 15)) for p, c in s.steps] == [
        ("even", 0.1),
        ("odd", 0.2),
        ("even", 0.1),
    ]


@pytest.mark.parametrize("order", [1, 2, 4])
def test_trotter_parity_sums(order):
    s = trotter_schedule(order, 0.37)
    for parity in ("even", "odd"):
        total = sum(c for p, c in s.steps if p == parity)
        assert abs(total - 0.37) < 1e-15


def test_trotter_invalid():
    with pytest.raises(ParameterError):
        trotter_schedule(3, 0.1)
    with pytest.raises(ParameterError):
        trotter_schedule(2, 0.0)


def test_trotter_order4_local_error_scaling(rng):
    # one composed step vs the exact exponential of A+B: halving dt must
    # shrink the local defect by about 2^5
    a = rng.standard_normal((12, 12)) + 1j * rng.standard_normal((12, 12))
    b = rng.standard_normal((12, 12)) + 1j * rng.standard_normal((12, 12))
    a, b = 0.3 * a, 0.3 * b

    def defect(dt):
        exact = scipy.linalg.expm((a + b) * dt)
        comp = np.eye(12, dtype=complex)
        for parity, tau in trotter_schedule(4, dt).steps:
            gen = a if parity == "even" else b
            comp = scipy.linalg.expm(gen * tau) @ comp
        return np.linalg.norm(comp - exact)

    r = defect(0.2) / defect(0.1)
    assert 24 < r < 40


# -- initial states ------------------------------------------------------------------


def test_neel_z_unit_cell():
    state = initial_state("neel_z", "u1")
    assert state.lambda_a.chi == 1 and state.lambda_b.chi == 1
    assert state.log_trace == 0.0
    vals = state.lambda_b.concat()
    assert vals.tolist() == [1.0]


def test_neel_x_components():
    state = initial_state("neel_x", "trivial")
    va = to_dense(state.gamma_a).reshape(4)
    vb = to_dense(state.gamma_b).reshape(4)
    assert np.allclose(va, [0.5, 0.5, 0.5, 0.5])
    assert np.allclose(vb, [0.5, -0.5, -0.5, 0.5])
    with pytest.raises(ParameterError):
        initial_state("neel_x", "u1")


def test_symmetry_mode_selection():
    assert symmetry_mode(ModelParams.xxz(-1.0, 0.5), "neel_z") == "u1"
    assert symmetry_mode(ModelParams.xxz(-1.0, 0.5), "neel_x") == "trivial"
    assert symmetry_mode(ModelParams.ising(1.0, 0.5), "neel_z") == "trivial"
    assert symmetry_mode(ModelParams.xyz(0.8, -0.5, 0.5), "neel_z") == "trivial"


def test_gamma_validation():
    with pytest.raises(ParameterError):
        ModelParams.xxz(jz=-1.0, gamma=-0.1)
