"""Brute-force reference for small chains.

Builds the full vectorized Liouvillian of the open chain and evolves it
quasi-exactly, and computes exact operator Schmidt decompositions.  The
assembly here is deliberately independent of the gate construction in
``model`` (own Pauli constants, full-chain Kronecker products) so that
agreement between the two paths is evidence, not tautology.

Vectorization is row-major: vec(rho)[k * 2^L + b] = rho[k, b], so
A rho B -> (A kron B^T) vec(rho).
"""

from __future__ import annotations

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .errors import CapacityError, DataError
from .model import ModelParams

_PX = np.array([[0, 1], [1, 0]], dtype=complex)
_PY = np.array([[0, -1j], [1j, 0]], dtype=complex)
_PZ = np.array([[1, 0], [0, -1]], dtype=complex)
_ID = np.eye(2, dtype=complex)

MAX_SITES = 8


class DenseLiouvillian:
    """Vectorized Lindblad generator of an open L-site chain."""

    def __init__(self, params: ModelParams, length: int):
        if length < 2:
            raise CapacityError("need at least two sites")
        if length > MAX_SITES:
            raise CapacityError(f"L = {length} exceeds the dense limit {MAX_SITES}")
        self.params = params
        self.length = length
        dim = 2**length
        ham = scipy.sparse.csr_matrix((dim, dim), dtype=complex)
        for i in range(length - 1):
            for coupling, op in ((params.jx, _PX), (params.jy, _PY), (params.jz, _PZ)):
                if coupling != 0.0:
                    ham = ham + 0.25 * coupling * _two_site(op, op, length, i)
        if params.hz != 0.0:
            for i in range(length):
                ham = ham + 0.5 * params.hz * _one_site(_PZ, length, i)
        eye = scipy.sparse.identity(dim, dtype=complex, format="csr")
        lind = -1j * (
            scipy.sparse.kron(ham, eye, format="csr")
            - scipy.sparse.kron(eye, ham.T, format="csr")
        )
        if params.gamma != 0.0:
            eye2 = scipy.sparse.identity(dim * dim, dtype=complex, format="csr")
            for i in range(length):
                z = _one_site(_PZ, length, i)
                lind = lind + 0.5 * params.gamma * (
                    scipy.sparse.kron(z, z.T, format="csr") - eye2
                )
        self.matrix = lind.tocsr()
        self.hamiltonian = ham.tocsr()


def _one_site(op, length, i):
    mats = [op if k == i else _ID for k in range(length)]
    out = scipy.sparse.csr_matrix(mats[0])
    for m in mats[1:]:
        out = scipy.sparse.kron(out, m, format="csr")
    return out


def _two_site(op1, op2, length, i):
    mats = [_ID] * length
    mats[i], mats[i + 1] = op1, op2
    out = scipy.sparse.csr_matrix(mats[0])
    for m in mats[1:]:
        out = scipy.sparse.kron(out, m, format="csr")
    return out


def build_liouvillian(params: ModelParams, length: int) -> DenseLiouvillian:
    return DenseLiouvillian(params, length)


# -- initial states and evolution -----------------------------------------------


def product_density_matrix(kind: str, length: int) -> np.ndarray:
    """Dense rho0 for the alternating product states."""
    if kind == "neel_z":
        locals_ = [np.array([1, 0], dtype=complex), np.array([0, 1], dtype=complex)]
    elif kind == "neel_x":
        locals_ = [
            np.array([1, 1], dtype=complex) / np.sqrt(2),
            np.array([1, -1], dtype=complex) / np.sqrt(2),
        ]
    else:
        raise DataError(f"unknown initial state {kind!r}")
    psi = np.array([1.0], dtype=complex)
    for i in range(length):
        psi = np.kron(psi, locals_[i % 2])
    return np.outer(psi, psi.conj())


def evolve_dense(
    rho0: np.ndarray, liouvillian: DenseLiouvillian, times, diagnostics: dict | None = None
) -> list[np.ndarray]:
    """rho(t) on the given grid via exact sparse exponential action.

    Trace and hermiticity must stay within 1e-9.  When ``diagnostics`` is
    given it receives the monitored minimum eigenvalue per time point.
    """
    length = liouvillian.length
    dim = 2**length
    if rho0.shape != (dim, dim):
        raise DataError(f"rho0 shape {rho0.shape} != {(dim, dim)}")
    times = np.asarray(times, dtype=float)
    vec = rho0.reshape(-1).astype(complex)
    out = []
    min_eigs = []
    t_prev = 0.0
    for t in times:
        if t < t_prev:
            raise DataError("time grid must be non-decreasing")
        if t > t_prev:
            vec = scipy.sparse.linalg.expm_multiply(
                liouvillian.matrix * (t - t_prev), vec
            )
        rho = vec.reshape(dim, dim).copy()
        tr = np.trace(rho)
        herm = np.max(np.abs(rho - rho.conj().T))
        if abs(tr - 1.0) > 1e-9 or herm > 1e-9:
            raise DataError(
                f"reference integration drifted: trace {tr:.3e}, hermiticity {herm:.3e}"
            )
        if diagnostics is not None:
            min_eigs.append(float(np.linalg.eigvalsh(rho).min()))
        out.append(rho)
        t_prev = float(t)
    if diagnostics is not None:
        diagnostics["min_eigenvalues"] = min_eigs
    return out


# -- exact operator Schmidt data --------------------------------------------------


def _half_magnetizations(length: int) -> np.ndarray:
    """sigma^z sum of each computational basis state of ``length`` sites."""
    out = np.zeros(2**length, dtype=int)
    for b in range(2**length):
        out[b] = length - 2 * bin(b).count("1")
    return out


def neel_reference_magnetization(length_right: int, offset: int = 0) -> int:
    """Right-half Neel magnetization when the right half starts at site parity
    ``offset`` (0 = up sublattice first)."""
    m = 0
    for i in range(length_right):
        m += 1 if (i + offset) % 2 == 0 else -1
    return m


def exact_operator_entanglement(
    rho: np.ndarray, cut: int, *, m_ref: int | None = None
) -> tuple[float, dict[int, np.ndarray]]:
    """Operator Schmidt spectrum of rho across a contiguous cut.

    Returns (S_OP in bits, spectrum grouped by the right half's ket
    magnetization minus ``m_ref``).  Without magnetization conservation
    the sector split is meaningless; the full spectrum is then returned
    under the single key 0.  ``m_ref`` defaults to the right half of the
    Neel pattern that starts with an up spin on site 0.
    """
    dim = rho.shape[0]
    length = int(round(np.log2(dim)))
    if 2**length != dim or rho.shape != (dim, dim):
        raise DataError("rho must be a 2^L x 2^L matrix")
    if not 0 < cut < length:
        raise DataError(f"cut must split the chain, got {cut}")
    l_left, l_right = cut, length - cut
    if m_ref is None:
        m_ref = neel_reference_magnetization(l_right, offset=cut % 2)

    # vec(rho) indexed by (k_left, k_right, b_left, b_right) -> matrix
    # (k_left b_left) x (k_right b_right)
    t = rho.reshape(2**l_left, 2**l_right, 2**l_left, 2**l_right)
    mat = np.ascontiguousarray(np.transpose(t, (0, 2, 1, 3))).reshape(
        4**l_left, 4**l_right
    )
    norm = np.linalg.norm(mat)
    if norm == 0:
        raise DataError("zero operator")
    mat = mat / norm

    svals = np.linalg.svd(mat, compute_uv=False)
    s_op = _entropy_bits_np(svals**2)

    # columns grouped by right ket magnetization; rows by left ket magnetization
    mag_r = _half_magnetizations(l_right)
    col_mag = np.repeat(mag_r, 2**l_right)  # column layout is (k_right, b_right)
    sectors: dict[int, np.ndarray] = {}
    blockwise = []
    for m in np.unique(col_mag):
        cols = mat[:, col_mag == m]
        if float(np.sum(np.abs(cols) ** 2)) == 0.0:
            continue
        sub_vals = np.linalg.svd(cols, compute_uv=False)
        sub_vals = sub_vals[sub_vals > 1e-14]
        if sub_vals.size:
            sectors[int(m) - m_ref] = np.sort(sub_vals)[::-1]
            blockwise.append(sub_vals)
    # the union of per-sector values must reproduce the global spectrum,
    # otherwise the state does not conserve magnetization blocks
    conserving = bool(blockwise)
    if blockwise:
        merged = np.sort(np.concatenate(blockwise))[::-1]
        top = np.sort(svals[svals > 1e-14])[::-1]
        n = min(merged.size, top.size)
        if n and np.max(np.abs(merged[:n] - top[:n])) > 1e-10:
            conserving = False
        if abs(np.sum(merged**2) - np.sum(top**2)) > 1e-10:
            conserving = False
    if not conserving:
        sectors = {0: np.sort(svals[svals > 1e-14])[::-1]}
    return s_op, sectors


def _entropy_bits_np(w: np.ndarray) -> float:
    w = w[w > 0]
    return float(-np.sum(w * np.log2(w))) if w.size else 0.0


def sector_probabilities_dense(
    rho: np.ndarray, cut: int, *, m_ref: int | None = None
) -> dict[int, float]:
    """Two-norm sector weights of the operator Schmidt spectrum."""
    _, sectors = exact_operator_entanglement(rho, cut, m_ref=m_ref)
    return {m: float(np.sum(v**2)) for m, v in sorted(sectors.items())}


def site_magnetizations(rho: np.ndarray) -> np.ndarray:
    """<sigma^z_i> for every site."""
    dim = rho.shape[0]
    length = int(round(np.log2(dim)))
    diag = np.real(np.diag(rho))
    out = np.zeros(length)
    idx = np.arange(dim)
    for i in range(length):
        bit = (idx >> (length - 1 - i)) & 1
        out[i] = float(np.sum(diag * (1 - 2 * bit)))
    return out
