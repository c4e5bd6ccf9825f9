"""Time evolution of the density-matrix MPO.

Infinite chains use the two-site-unit-cell iTEBD update with truncation;
because the gates are non-unitary the canonical form degrades and is
restored with the dominant-eigenvector gauge fix (transfer-map fixed
points factored and inserted around the outer bond) before any entropy
is read off.  Finite open chains use the same two-site update plus plain
double-sweep re-canonicalization, and exist mainly to be compared
against the brute-force reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg

from .errors import (
    DegenerateStateError,
    NumericalError,
    ParameterError,
    StructureError,
)
from .model import (
    DAGGER_PERM,
    GateTable,
    LiouvillianGate,
    LOCAL_CHARGES,
    SZ_TRACE_VEC,
    SX_TRACE_VEC,
    TRACE_VEC,
    TrotterSchedule,
)
from .observables import EntropyReport, SchmidtSpectrum, build_report
from .qtensor import (
    Charge,
    Leg,
    QTensor,
    SchmidtVector,
    contract,
    restore_cols,
    restore_rows,
    scale_leg,
    to_matrix,
    truncated_svd,
)
from .state import FiniteChainState, UnitCellState

EPS_LAMBDA = 1e-10  # relative floor below which Schmidt values are not inverted
REORTH_TOL = 1e-10
POS_CLIP = 1e-14  # relative floor for fixed-point eigenvalues kept in gauges


# -- core two-site update --------------------------------------------------------


def _two_site_update(
    lam_left: SchmidtVector,
    g1: QTensor,
    lam_mid: SchmidtVector,
    g2: QTensor,
    lam_right: SchmidtVector,
    gate: LiouvillianGate | None,
    chi_max: int,
    weight_tol: float,
    eps_lambda: float = EPS_LAMBDA,
):
    """Gate application and re-factorization across one bond.

    Returns (g1', lam_mid', g2', discarded_weight, log_norm) where
    log_norm is the log of the factor divided out of the new mid bond.
    """
    theta = scale_leg(g1, 0, lam_left)
    theta = scale_leg(theta, 2, lam_mid)
    right = scale_leg(g2, 2, lam_right)
    theta = contract(theta, right, [(2, 0)])  # (l, p1, p2, r)
    if gate is not None:
        theta = contract(theta, gate.tensor, [(1, 2), (2, 3)])  # (l, r, p1', p2')
        theta = theta.permute((0, 2, 3, 1))
    mat, cast = to_matrix(theta, [0, 1], [2, 3])
    res = truncated_svd(mat, chi_max, weight_tol)
    if res.is_zero:
        raise DegenerateStateError("two-site block vanished during update")
    lam_new, factor = res.s.normalize()
    u = restore_rows(res.u, cast)  # (l, p1, bond)
    v = restore_cols(res.v, cast)  # (bond, p2, r)
    g1_new = scale_leg(u, 0, lam_left, inverse=True, floor=eps_lambda)
    g2_new = scale_leg(v, 2, lam_right, inverse=True, floor=eps_lambda)
    return g1_new, lam_new, g2_new, res.discarded_weight, float(np.log(factor))


def apply_bond_gate(
    state: UnitCellState,
    gate: LiouvillianGate,
    parity: str,
    chi_max: int,
    weight_tol: float,
    eps_lambda: float = EPS_LAMBDA,
) -> tuple[UnitCellState, float]:
    """One iTEBD update: even acts on the a-b bond, odd on the b-a bond."""
    if parity == "even":
        g1, lam_mid, g2, disc, log_norm = _two_site_update(
            state.lambda_b, state.gamma_a, state.lambda_a, state.gamma_b,
            state.lambda_b, gate, chi_max, weight_tol, eps_lambda,
        )
        new = UnitCellState(g1, g2, lam_mid, state.lambda_b,
                            state.log_trace + log_norm, state.mode)
    elif parity == "odd":
        g1, lam_mid, g2, disc, log_norm = _two_site_update(
            state.lambda_a, state.gamma_b, state.lambda_b, state.gamma_a,
            state.lambda_a, gate, chi_max, weight_tol, eps_lambda,
        )
        new = UnitCellState(g2, g1, state.lambda_a, lam_mid,
                            state.log_trace + log_norm, state.mode)
    else:
        raise ParameterError(f"unknown bond parity {parity!r}")
    return new, disc


# -- block-diagonal transfer machinery --------------------------------------------


def _cell_tensor(state: UnitCellState) -> QTensor:
    """Gamma_a lambda_a Gamma_b coarse-grained cell (legs l, p1, p2, r)."""
    left = scale_leg(state.gamma_a, 2, state.lambda_a)
    return contract(left, state.gamma_b, [(2, 0)])


def _grouped_blocks(t: QTensor):
    """Cell blocks reshaped to (d_left, d_phys, d_right) keyed by charges."""
    out = []
    for key in sorted(t.blocks):
        arr = t.blocks[key]
        dl, dr = arr.shape[0], arr.shape[-1]
        out.append((key[0], key[-1], arr.reshape(dl, -1, dr)))
    return out


def _transfer_right(groups, x: dict) -> dict:
    """X -> sum_P A_P X A_P^dagger on block-diagonal X keyed by bond charge."""
    out: dict[Charge, np.ndarray] = {}
    for cl, cr, blk in groups:
        xb = x.get(cr)
        if xb is None:
            continue
        tmp = np.tensordot(blk, xb, ((2,), (0,)))
        res = np.tensordot(tmp, blk.conj(), ((1, 2), (1, 2)))
        if cl in out:
            out[cl] += res
        else:
            out[cl] = res
    return out


def _transfer_left(groups, x: dict) -> dict:
    """X -> sum_P B_P^dagger X B_P."""
    out: dict[Charge, np.ndarray] = {}
    for cl, cr, blk in groups:
        xb = x.get(cl)
        if xb is None:
            continue
        tmp = np.tensordot(xb, blk, ((1,), (0,)))  # (l, P, r)
        res = np.tensordot(blk.conj(), tmp, ((0, 1), (0, 1)))
        if cr in out:
            out[cr] += res
        else:
            out[cr] = res
    return out


def _flatten(x: dict, template) -> np.ndarray:
    parts = [np.asarray(x.get(c, np.zeros((d, d))), dtype=complex).reshape(-1)
             for c, d in template]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=complex)

def _unflatten(vec: np.ndarray, template) -> dict:
    out, pos = {}, 0
    for c, d in template:
        out[c] = vec[pos : pos + d * d].reshape(d, d)
        pos += d * d
    return out


def _identity_blocks(template) -> dict:
    return {c: np.eye(d, dtype=complex) for c, d in template}


def dominant_fixed_point(matvec, template, tol=1e-14, maxiter=3000):
    """Dominant eigenpair of a block-diagonal transfer map.

    Returns (mu, X) with X hermitized and positively oriented.  Raises
    NumericalError (with the achieved residual) when neither Arnoldi nor
    power iteration converges.
    """
    dim = sum(d * d for _, d in template)
    if dim == 0:
        raise DegenerateStateError("empty bond space")
    if dim == 1:
        c, d = template[0]
        x = {c: np.ones((1, 1), dtype=complex)}
        mu = complex(matvec(x)[c][0, 0])
        return abs(mu), _hermitize(x)

    def mv(vec):
        return _flatten(matvec(_unflatten(vec, template)), template)

    v0 = _flatten(_identity_blocks(template), template)
    x = None
    if dim >= 4:
        op = scipy.sparse.linalg.LinearOperator((dim, dim), matvec=mv, dtype=complex)
        try:
            vals, vecs = scipy.sparse.linalg.eigs(
                op, k=1, which="LM", v0=v0, maxiter=maxiter, tol=0
            )
            mu = complex(vals[0])
            x = _unflatten(vecs[:, 0], template)
        except Exception:
            x = None
    if x is None:
        # fixed-order power iteration fallback
        xv = v0 / np.linalg.norm(v0)
        mu = 1.0
        for _ in range(maxiter):
            yv = mv(xv)
            mu = np.vdot(xv, yv)
            ny = np.linalg.norm(yv)
            if ny == 0:
                raise DegenerateStateError("transfer map annihilated the bond space")
            yv /= ny
            if np.linalg.norm(yv - xv) < tol or np.linalg.norm(yv + xv) < tol:
                xv = yv
                break
            xv = yv
        else:
            resid = float(np.linalg.norm(mv(xv) - mu * xv))
            raise NumericalError(
                "transfer fixed point did not converge", residual=resid
            )
        x = _unflatten(xv, template)
    # rotate the arbitrary eigenvector phase so the trace is real positive,
    # then hermitize (the physical fixed point is hermitian PSD)
    tr = sum(complex(np.trace(b)) for b in x.values())
    if abs(tr) > 0:
        phase = tr / abs(tr)
        x = {c: b / phase for c, b in x.items()}
    x = _hermitize(x)
    nrm = np.sqrt(sum(float(np.sum(np.abs(b) ** 2)) for b in x.values()))
    if nrm == 0:
        raise DegenerateStateError("transfer fixed point vanished")
    x = {c: b / nrm for c, b in x.items()}
    return abs(mu), x


def _hermitize(x: dict) -> dict:
    return {c: 0.5 * (b + b.conj().T) for c, b in x.items()}


# -- re-orthogonalization ----------------------------------------------------------


def _factor_fixed_point(x: dict, clip=POS_CLIP):
    """X = F F^dagger with F per block; returns (F, F_pinv, kept dims)."""
    top = max(
        (float(np.max(np.linalg.eigvalsh(b))) for b in x.values() if b.size),
        default=0.0,
    )
    if top <= 0:
        raise DegenerateStateError("fixed point is not positive")
    f, finv, dims = {}, {}, []
    for c in sorted(x):
        w, u = np.linalg.eigh(x[c])
        sel = w > clip * top
        if not np.any(sel):
            continue
        wk, uk = w[sel], u[:, sel]
        f[c] = uk * np.sqrt(wk)
        finv[c] = (uk / np.sqrt(wk)).conj().T
        dims.append((c, int(wk.size)))
    if not dims:
        raise DegenerateStateError("fixed point vanished after clipping")
    return f, finv, dims


def reorthogonalize(
    state: UnitCellState,
    chi_max: int = 10**9,
    weight_tol: float = 0.0,
    eps_lambda: float = EPS_LAMBDA,
    reorth_tol: float = REORTH_TOL,
) -> tuple[UnitCellState, float]:
    """Restore the canonical form of the unit cell (Vidal gauge).

    Computes the dominant left/right fixed points of the unit-cell
    transfer map, inserts the factored gauges at the outer bond, then
    re-splits the cell; the returned residual is the deviation of the
    post-gauge transfer fixed points from the identity.
    """
    cell = _cell_tensor(state)  # (l, p1, p2, r)
    log_trace = state.log_trace

    a_groups = _grouped_blocks(scale_leg(cell, 3, state.lambda_b))
    b_groups = _grouped_blocks(scale_leg(cell, 0, state.lambda_b))
    template = [(c, v.size) for c, v in sorted(state.lambda_b.entries.items())]

    mu_r, v_r = dominant_fixed_point(lambda x: _transfer_right(a_groups, x), template)
    mu_l, v_l = dominant_fixed_point(lambda x: _transfer_left(b_groups, x), template)

    x_f, x_inv, _ = _factor_fixed_point(v_r)  # V_R = X X^dag
    yt_f, yt_inv, _ = _factor_fixed_point(v_l)  # V_L = Y^dag Y with Y = yt_f^dag

    # new outer bond: SVD of Y lambda X per sector
    m_blocks = {}
    for c, vals in state.lambda_b.entries.items():
        if c not in yt_f or c not in x_f:
            continue
        y = yt_f[c].conj().T
        m_blocks[(c, c)] = (y * vals) @ x_f[c]
    rows = [(c, b.shape[0]) for (c, _), b in sorted(m_blocks.items())]
    cols = [(c, b.shape[1]) for (c, _), b in sorted(m_blocks.items())]
    mq = QTensor((Leg(-1, rows), Leg(1, cols)), m_blocks, Charge(0, 0))
    res = truncated_svd(mq, chi_max, weight_tol)
    if res.is_zero:
        raise DegenerateStateError("outer bond vanished during re-orthogonalization")
    lam_b, f1 = res.s.normalize()
    log_trace += float(np.log(f1))

    # gauge the cell: left leg by V X^-1, right leg by Y^-1 U
    u_by_charge = {key[0]: blk for key, blk in res.u.blocks.items()}
    v_by_charge = {key[0]: blk for key, blk in res.v.blocks.items()}
    left_gauge = {c: v_by_charge[c] @ x_inv[c] for c in v_by_charge}
    right_gauge = {c: yt_inv[c].conj().T @ u_by_charge[c] for c in u_by_charge}
    new_sectors = [(c, vals.size) for c, vals in sorted(lam_b.entries.items())]
    legL = Leg(-1, new_sectors)
    legR = Leg(1, new_sectors)
    gauged = {}
    for key in sorted(cell.blocks):
        cl, cr = key[0], key[-1]
        if cl not in left_gauge or cr not in right_gauge:
            continue
        arr = np.tensordot(left_gauge[cl], cell.blocks[key], ((1,), (0,)))
        arr = np.tensordot(arr, right_gauge[cr], ((3,), (0,)))
        gauged[key] = gauged[key] + arr if key in gauged else arr
    cellq = QTensor((legL, cell.legs[1], cell.legs[2], legR), gauged, cell.total)

    # normalize the transfer eigenvalue to one and measure the residual
    groups = _grouped_blocks(scale_leg(cellq, 3, lam_b))
    templ2 = [(c, d) for c, d in new_sectors]
    ident = _identity_blocks(templ2)
    tr_out = _transfer_right(groups, ident)
    dim_tot = sum(d for _, d in templ2)
    nu = sum(np.trace(b).real for b in tr_out.values()) / dim_tot
    if nu <= 0:
        raise DegenerateStateError("transfer eigenvalue collapsed")
    cellq = cellq.scale(1.0 / np.sqrt(nu))
    log_trace += 0.5 * float(np.log(nu))

    # residual: deviation of the transfer fixed points from the identity,
    # measured in the state-induced norm (weighted by the Schmidt values,
    # so numerically empty directions cannot dominate)
    def _weighted_dev(out_blocks, scale):
        dev = 0.0
        for c, d in templ2:
            w = lam_b.entries[c]
            block = np.asarray(out_blocks.get(c, 0.0)) / scale - np.eye(d)
            dev = max(dev, float(np.max(np.abs(w[:, None] * block * w[None, :]))))
        return dev

    resid_r = _weighted_dev(tr_out, nu)
    groups_l = _grouped_blocks(scale_leg(cellq, 0, lam_b))
    tl_out = _transfer_left(groups_l, ident)
    resid_l = _weighted_dev(tl_out, 1.0)
    residual = max(resid_r, resid_l)
    if residual > reorth_tol:
        raise NumericalError(
            f"re-orthogonalization residual {residual:.3e}", residual=residual
        )

    # re-split the cell at the central bond
    theta = scale_leg(scale_leg(cellq, 0, lam_b), 3, lam_b)
    mat, cast = to_matrix(theta, [0, 1], [2, 3])
    res2 = truncated_svd(mat, chi_max, weight_tol)
    if res2.is_zero:
        raise DegenerateStateError("central bond vanished during re-orthogonalization")
    lam_a, f2 = res2.s.normalize()
    log_trace += float(np.log(f2))
    gamma_a = scale_leg(restore_rows(res2.u, cast), 0, lam_b,
                        inverse=True, floor=eps_lambda)
    gamma_b = scale_leg(restore_cols(res2.v, cast), 2, lam_b,
                        inverse=True, floor=eps_lambda)
    new_state = UnitCellState(gamma_a, gamma_b, lam_a, lam_b, log_trace, state.mode)
    return new_state, residual


def normalize(state: UnitCellState) -> UnitCellState:
    """Force unit 2-norm Schmidt vectors, folding factors into log_trace."""
    lam_a, fa = state.lambda_a.normalize()
    lam_b, fb = state.lambda_b.normalize()
    return UnitCellState(
        state.gamma_a,
        state.gamma_b,
        lam_a,
        lam_b,
        state.log_trace + float(np.log(fa)) + float(np.log(fb)),
        state.mode,
    )


# -- trace-line observables ---------------------------------------------------------


def _site_trace_matrix(gamma: QTensor, weights: np.ndarray, mode: str) -> np.ndarray:
    """Dense bond->bond matrix of the site contracted with a trace vector."""
    offs_l = gamma.legs[0].offsets()
    offs_r = gamma.legs[2].offsets()
    dl = gamma.legs[0].total_dim
    dr = gamma.legs[2].total_dim
    out = np.zeros((dl, dr), dtype=complex)
    if mode == "u1":
        w_of = {c: weights[i] for i, c in enumerate(LOCAL_CHARGES)}
        for (cl, cp, cr), arr in gamma.blocks.items():
            w = w_of[cp]
            if w == 0.0:
                continue
            sl = slice(offs_l[cl], offs_l[cl] + arr.shape[0])
            sr = slice(offs_r[cr], offs_r[cr] + arr.shape[2])
            out[sl, sr] += w * arr[:, 0, :]
    else:
        for (cl, cp, cr), arr in gamma.blocks.items():
            sl = slice(offs_l[cl], offs_l[cl] + arr.shape[0])
            sr = slice(offs_r[cr], offs_r[cr] + arr.shape[2])
            out[sl, sr] += np.tensordot(weights, arr, ((0,), (1,)))
    return out


def _lambda_diag(lam: SchmidtVector, leg) -> np.ndarray:
    offs = leg.offsets()
    out = np.zeros(leg.total_dim)
    for c, vals in lam.entries.items():
        out[offs[c] : offs[c] + vals.size] = vals
    return out


def _dominant_eig_dense(mat: np.ndarray):
    """(mu, left, right) dominant eigen-triple of a small dense matrix."""
    n = mat.shape[0]
    if n == 1:
        return complex(mat[0, 0]), np.ones(1, dtype=complex), np.ones(1, dtype=complex)
    if n <= 128:
        vals, vecs = np.linalg.eig(mat)
        i = int(np.argmax(np.abs(vals)))
        mu = vals[i]
        right = vecs[:, i]
        valsl, vecsl = np.linalg.eig(mat.T)
        j = int(np.argmin(np.abs(valsl - mu)))
        left = vecsl[:, j]
        return complex(mu), left, right
    v0 = np.ones(n, dtype=complex)
    vals, vecs = scipy.sparse.linalg.eigs(mat, k=1, which="LM", v0=v0, tol=0)
    valsl, vecsl = scipy.sparse.linalg.eigs(mat.T, k=1, which="LM", v0=v0, tol=0)
    return complex(vals[0]), vecsl[:, 0], vecs[:, 0]


@dataclass
class TraceObservables:
    trace_per_cell: complex
    sz_a: float
    sz_b: float
    sx_a: float
    sx_b: float


def trace_observables(state: UnitCellState) -> TraceObservables:
    """Per-cell trace eigenvalue and single-site expectations from it."""
    leg_b = state.gamma_a.legs[0]
    ma = _site_trace_matrix(state.gamma_a, TRACE_VEC, state.mode)
    mb = _site_trace_matrix(state.gamma_b, TRACE_VEC, state.mode)
    la = _lambda_diag(state.lambda_a, state.gamma_a.legs[2])
    lb = _lambda_diag(state.lambda_b, leg_b)
    cell = (lb[:, None] * ma) @ (la[:, None] * mb)
    mu, left, right = _dominant_eig_dense(cell)
    denom = mu * (left @ right)
    if abs(denom) == 0:
        raise DegenerateStateError("trace transfer is singular")

    def insert(vec_a, vec_b):
        ia = _site_trace_matrix(state.gamma_a, vec_a, state.mode)
        ib = _site_trace_matrix(state.gamma_b, vec_b, state.mode)
        t = (lb[:, None] * ia) @ (la[:, None] * ib)
        return complex(left @ (t @ right) / denom)

    sz_a = insert(SZ_TRACE_VEC, TRACE_VEC)
    sz_b = insert(TRACE_VEC, SZ_TRACE_VEC)
    sx_a = insert(SX_TRACE_VEC, TRACE_VEC)
    sx_b = insert(TRACE_VEC, SX_TRACE_VEC)
    return TraceObservables(
        trace_per_cell=complex(mu),
        sz_a=float(np.real(sz_a)),
        sz_b=float(np.real(sz_b)),
        sx_a=float(np.real(sx_a)),
        sx_b=float(np.real(sx_b)),
    )


# -- hermiticity check ---------------------------------------------------------------


def _swap_charge(c: Charge) -> Charge:
    return Charge(c.bra, c.ket)


def hermiticity_residual(state: UnitCellState) -> float:
    """|1 - Tr(rho rho) per cell| for the canonically normalized state.

    Since Tr(rho^dag rho) is one per cell in canonical form and
    Tr(rho rho) = Tr(rho^dag rho) exactly when rho is hermitian, the
    deviation of the mixed bilinear transfer eigenvalue from one measures
    hermiticity damage per unit cell.
    """
    cell = scale_leg(_cell_tensor(state), 3, state.lambda_b)
    by_key = {}
    for key in sorted(cell.blocks):
        arr = cell.blocks[key]
        by_key[key] = arr.reshape(arr.shape[0], -1, arr.shape[-1])

    mode = state.mode
    if mode == "u1":
        perm = None
    else:
        perm = np.zeros((16, 16))
        for i in range(4):
            for j in range(4):
                perm[4 * i + j, 4 * DAGGER_PERM[i] + DAGGER_PERM[j]] = 1.0

    template = [(c, v.size) for c, v in sorted(state.lambda_b.entries.items())]
    swapped_dims = {c: d for c, d in template}

    def matvec(x: dict) -> dict:
        # x keyed by layer-1 bond charge; block shape (d(c), d(swap(c)))
        out: dict[Charge, np.ndarray] = {}
        for key in sorted(cell.blocks):
            cl, c1, c2, cr = key
            partner = (
                _swap_charge(cl),
                _swap_charge(c1),
                _swap_charge(c2),
                _swap_charge(cr),
            )
            if partner not in cell.blocks:
                continue
            xb = x.get(cr)
            if xb is None:
                continue
            b1 = by_key[key]
            b2 = by_key[partner]
            tmp = np.tensordot(b1, xb, ((2,), (0,)))  # (l1, P, r2)
            if perm is None:
                res = np.tensordot(tmp, b2, ((1, 2), (1, 2)))
            else:
                tmp = np.tensordot(tmp, perm, ((1,), (0,)))  # (l1, r2, P')
                res = np.tensordot(tmp, b2, ((2, 1), (1, 2)))
            if cl in out:
                out[cl] += res
            else:
                out[cl] = res
        return out

    mixed_template = [(c, d) for c, d in template if _swap_charge(c) in swapped_dims]
    try:
        mu, _ = dominant_fixed_point_rect(matvec, mixed_template, swapped_dims)
    except DegenerateStateError:
        return 1.0
    return abs(1.0 - mu)


def dominant_fixed_point_rect(matvec, template, col_dims):
    """Dominant eigenvalue for transfer maps with rectangular blocks."""
    shapes = [(c, d, col_dims[_swap_charge(c)]) for c, d in template]
    dim = sum(d * d2 for _, d, d2 in shapes)
    if dim == 0:
        raise DegenerateStateError("empty mixed bond space")

    def flat(x):
        return np.concatenate(
            [np.asarray(x.get(c, np.zeros((d, d2))), dtype=complex).reshape(-1)
             for c, d, d2 in shapes]
        )

    def unflat(v):
        out, pos = {}, 0
        for c, d, d2 in shapes:
            out[c] = v[pos : pos + d * d2].reshape(d, d2)
            pos += d * d2
        return out

    v0 = flat({c: np.eye(d, d2) for c, d, d2 in shapes})
    if not np.any(v0):
        v0 = np.ones(dim, dtype=complex)
    if dim == 1:
        c = shapes[0][0]
        x = unflat(np.ones(1, dtype=complex))
        return abs(complex(matvec(x)[c][0, 0])), x
    if dim >= 4:
        op = scipy.sparse.linalg.LinearOperator(
            (dim, dim), matvec=lambda v: flat(matvec(unflat(v))), dtype=complex
        )
        try:
            vals, vecs = scipy.sparse.linalg.eigs(
                op, k=1, which="LM", v0=v0, tol=0, maxiter=3000
            )
            return abs(complex(vals[0])), unflat(vecs[:, 0])
        except Exception:
            pass
    xv = v0 / np.linalg.norm(v0)
    mu = 0.0
    for _ in range(3000):
        yv = flat(matvec(unflat(xv)))
        mu = np.vdot(xv, yv)
        ny = np.linalg.norm(yv)
        if ny == 0:
            return 0.0, unflat(xv)
        yv /= ny
        if np.linalg.norm(yv - xv) < 1e-13 or np.linalg.norm(yv + xv) < 1e-13:
            return abs(complex(mu)), unflat(yv)
        xv = yv
    return abs(complex(mu)), unflat(xv)


# -- measurement -------------------------------------------------------------------


@dataclass
class ObservableRecord:
    """One emitted time point."""

    t: float
    report: EntropyReport
    sz_a: float
    sz_b: float
    sx_a: float
    sx_b: float
    trace_drift: float
    hermiticity: float
    reorth_residual: float
    chi_a: int
    chi_b: int
    max_discarded: float
    accum_discarded: float
    sz_sites: np.ndarray | None = None  # per-site profile (finite chains)

    @property
    def staggered(self) -> float:
        return 0.5 * (self.sz_a - self.sz_b)


def measure_unit_cell(
    state: UnitCellState,
    t: float,
    chi_max: int,
    weight_tol: float,
    *,
    max_discarded: float = 0.0,
    accum_discarded: float = 0.0,
    reorthogonalized: bool = False,
) -> tuple[UnitCellState, ObservableRecord]:
    """Re-orthogonalize, then read all observables off the unit cell."""
    residual = 0.0
    if not reorthogonalized:
        state, residual = reorthogonalize(state, chi_max, weight_tol)
    state = normalize(state)
    spec = SchmidtSpectrum.from_schmidt_vector(
        state.lambda_b, bond="b", time=t, m_ref=0
    )
    report = build_report(spec)
    tr = trace_observables(state)
    drift = abs(np.exp(state.log_trace) * tr.trace_per_cell - 1.0)
    herm = hermiticity_residual(state)
    record = ObservableRecord(
        t=t,
        report=report,
        sz_a=tr.sz_a,
        sz_b=tr.sz_b,
        sx_a=tr.sx_a,
        sx_b=tr.sx_b,
        trace_drift=float(drift),
        hermiticity=herm,
        reorth_residual=residual,
        chi_a=state.lambda_a.chi,
        chi_b=state.lambda_b.chi,
        max_discarded=max_discarded,
        accum_discarded=accum_discarded,
    )
    return state, record


def evolve(
    state: UnitCellState,
    schedule: TrotterSchedule,
    gates: GateTable,
    t_max: float,
    *,
    chi_max: int,
    weight_tol: float = 1e-12,
    measure_interval: float = 0.5,
    eps_lambda: float = EPS_LAMBDA,
):
    """Generator of ObservableRecords for the infinite chain.

    The state is measured (after re-orthogonalization) at t = 0 and then
    every ``measure_interval`` of physical time, rounded to whole sweeps.
    """
    stride = max(1, int(round(measure_interval / schedule.dt)))
    state, record = measure_unit_cell(state, 0.0, chi_max, weight_tol)
    yield record
    if t_max <= 0:
        return
    sweeps_total = int(round(t_max / schedule.dt))
    max_disc = 0.0
    accum = 0.0
    for sweep in range(1, sweeps_total + 1):
        for parity, tau in schedule.steps:
            state, disc = apply_bond_gate(
                state, gates.infinite(tau), parity, chi_max, weight_tol, eps_lambda
            )
            max_disc = max(max_disc, disc)
            accum += disc
        if sweep % stride == 0 or sweep == sweeps_total:
            t = sweep * schedule.dt
            state, record = measure_unit_cell(
                state, t, chi_max, weight_tol,
                max_discarded=max_disc, accum_discarded=accum,
            )
            max_disc = 0.0
            yield record


# -- finite chains -----------------------------------------------------------------


def apply_gate_finite(
    state: FiniteChainState,
    gate: LiouvillianGate | None,
    bond: int,
    chi_max: int,
    weight_tol: float,
    eps_lambda: float = EPS_LAMBDA,
) -> float:
    """In-place two-site update at ``bond``; returns the discarded weight."""
    g1, lam, g2, disc, log_norm = _two_site_update(
        state.lambdas[bond],
        state.gammas[bond],
        state.lambdas[bond + 1],
        state.gammas[bond + 1],
        state.lambdas[bond + 2],
        gate,
        chi_max,
        weight_tol,
        eps_lambda,
    )
    state.gammas[bond] = g1
    state.gammas[bond + 1] = g2
    state.lambdas[bond + 1] = lam
    state.log_trace += log_norm
    return disc


def canonicalize_finite(state: FiniteChainState, chi_max: int = 10**9,
                        eps_lambda: float = EPS_LAMBDA) -> FiniteChainState:
    """Two identity sweeps restore every bond to a genuine Schmidt cut."""
    out = state.copy()
    for bond in range(out.length - 1):
        apply_gate_finite(out, None, bond, chi_max, 0.0, eps_lambda)
    for bond in range(out.length - 2, -1, -1):
        apply_gate_finite(out, None, bond, chi_max, 0.0, eps_lambda)
    return out


def finite_trace_vector(state: FiniteChainState, inserts: dict[int, np.ndarray] | None = None):
    """Contract the chain against per-site trace vectors."""
    inserts = inserts or {}
    vec = np.ones(1, dtype=complex)
    for i, gamma in enumerate(state.gammas):
        lam = _lambda_diag(state.lambdas[i], gamma.legs[0])
        w = inserts.get(i, TRACE_VEC)
        m = _site_trace_matrix(gamma, w, state.mode)
        vec = (vec * lam) @ m
    return complex(vec[0]) * np.exp(state.log_trace)


def finite_site_expectations(state: FiniteChainState, weights: np.ndarray) -> np.ndarray:
    tr = finite_trace_vector(state)
    out = np.zeros(state.length)
    for i in range(state.length):
        out[i] = float(np.real(finite_trace_vector(state, {i: weights}) / tr))
    return out


def neel_bond_reference(bond: int) -> int:
    """ket charge accumulated by the z-Neel pattern left of ``bond``."""
    # sites 0..bond-1 alternate +1, -1 starting at +1
    return -(bond % 2)


def measure_finite(
    state: FiniteChainState,
    t: float,
    *,
    bond: int | None = None,
    m_ref: int | None = None,
) -> tuple[FiniteChainState, EntropyReport, SchmidtSpectrum]:
    """Canonicalize and report entropies at a bond (default: center)."""
    state = canonicalize_finite(state)
    b = state.length // 2 if bond is None else bond
    if not 0 < b < state.length:
        raise ParameterError(f"bond {b} outside chain")
    ref = neel_bond_reference(b) if m_ref is None else m_ref
    spec = SchmidtSpectrum.from_schmidt_vector(
        state.lambdas[b], bond=str(b), time=t, m_ref=ref
    )
    return state, build_report(spec), spec


def evolve_finite(
    state: FiniteChainState,
    schedule: TrotterSchedule,
    gates: GateTable,
    t_max: float,
    *,
    chi_max: int,
    weight_tol: float = 1e-12,
    measure_interval: float = 0.5,
    eps_lambda: float = EPS_LAMBDA,
):
    """Generator of ObservableRecords for the open chain."""
    length = state.length
    even_bonds = list(range(0, length - 1, 2))
    odd_bonds = list(range(1, length - 1, 2))
    stride = max(1, int(round(measure_interval / schedule.dt)))

    def do_measure(st, t, max_disc, accum):
        st = st.copy()
        st2, report, spec = measure_finite(st, t)
        sz = finite_site_expectations(st2, SZ_TRACE_VEC)
        sx = finite_site_expectations(st2, SX_TRACE_VEC)
        tr = finite_trace_vector(st2)
        drift = abs(tr - 1.0)
        rho = finite_to_dense(st2) if length <= 6 else None
        herm = (
            float(np.max(np.abs(rho - rho.conj().T))) if rho is not None else 0.0
        )
        return ObservableRecord(
            t=t,
            report=report,
            sz_a=float(np.mean(sz[0::2])),
            sz_b=float(np.mean(sz[1::2])),
            sx_a=float(np.mean(sx[0::2])),
            sx_b=float(np.mean(sx[1::2])),
            trace_drift=float(drift),
            hermiticity=herm,
            reorth_residual=0.0,
            chi_a=max(st2.chi) if st2.chi else 1,
            chi_b=max(st2.chi) if st2.chi else 1,
            max_discarded=max_disc,
            accum_discarded=accum,
            sz_sites=sz,
        )

    yield do_measure(state, 0.0, 0.0, 0.0)
    if t_max <= 0:
        return
    sweeps_total = int(round(t_max / schedule.dt))
    max_disc = 0.0
    accum = 0.0
    for sweep in range(1, sweeps_total + 1):
        for parity, tau in schedule.steps:
            bonds = even_bonds if parity == "even" else odd_bonds
            for b in bonds:
                disc = apply_gate_finite(
                    state, gates.finite(tau, b), b, chi_max, weight_tol, eps_lambda
                )
                max_disc = max(max_disc, disc)
                accum += disc
        if sweep % stride == 0 or sweep == sweeps_total:
            yield do_measure(state, sweep * schedule.dt, max_disc, accum)
            max_disc = 0.0


def finite_to_dense(state: FiniteChainState) -> np.ndarray:
    """Contract a small chain to the dense density matrix (test helper)."""
    from .qtensor import to_dense

    length = state.length
    acc = None
    for i, gamma in enumerate(state.gammas):
        lam = _lambda_diag(state.lambdas[i], gamma.legs[0])
        g = to_dense(gamma)
        if state.mode == "u1":
            # dense physical axis follows sector (charge-sorted) order; map
            # back to the basis order of LOCAL_CHARGES
            inv = np.empty(4, dtype=int)
            offs = gamma.legs[1].offsets()
            for basis_idx, c in enumerate(LOCAL_CHARGES):
                inv[offs[c]] = basis_idx
            g2 = np.zeros_like(g)
            for pos in range(4):
                g2[:, inv[pos], :] = g[:, pos, :]
            g = g2
        g = lam[:, None, None] * g
        acc = g if acc is None else np.tensordot(acc, g, ((acc.ndim - 1,), (0,)))
    vec = acc.reshape(-1) * np.exp(state.log_trace)
    # axes are (i_1 ... i_L) with i = 2 s + s'; split into ket and bra bits
    t = vec.reshape((2,) * (2 * length))
    ket_axes = list(range(0, 2 * length, 2))
    bra_axes = list(range(1, 2 * length, 2))
    t = np.transpose(t, ket_axes + bra_axes)
    dim = 2**length
    return np.ascontiguousarray(t.reshape(dim, dim))
