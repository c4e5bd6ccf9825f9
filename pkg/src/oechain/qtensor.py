"""Block-sparse complex tensors with abelian two-component charges.

Every leg carries a direction (+1 outgoing, -1 incoming) and an ordered
list of charge sectors.  A dense block may exist only for charge
assignments whose signed sum equals the tensor's total charge; this is
what makes contraction, fusion and the truncated SVD cheap for
magnetization-conserving operators.  Charges are pairs: the first
component counts sigma^z multiplication from the left (ket side), the
second from the right (bra side).

All operations are pure functions on immutable inputs and keep a fixed
(sorted) reduction order so repeated runs are bit-identical.
"""

from __future__ import annotations

import struct
from typing import Iterable, NamedTuple

import numpy as np

from .errors import DataError, ParameterError, StructureError

BLOCK_DTYPE = np.dtype("<c16")
LAMBDA_DTYPE = np.dtype("<f8")

# relative gap below which singular values are treated as tied (see truncated_svd)
TIE_RTOL = 1e-12


class Charge(NamedTuple):
    """Two-component abelian charge (ket units, bra units)."""

    ket: int
    bra: int

    def __add__(self, other):
        return Charge(self.ket + other.ket, self.bra + other.bra)

    def __sub__(self, other):
        return Charge(self.ket - other.ket, self.bra - other.bra)

    def __neg__(self):
        return Charge(-self.ket, -self.bra)

    def __abs__(self):
        return abs(self.ket) + abs(self.bra)


ZERO = Charge(0, 0)


class Leg:
    """Directed leg: direction +1 (out) or -1 (in) plus ordered charge sectors."""

    __slots__ = ("direction", "sectors", "_dims")

    def __init__(self, direction: int, sectors: Iterable[tuple[Charge, int]]):
        if direction not in (1, -1):
            raise StructureError(f"leg direction must be +1 or -1, got {direction}")
        sec = tuple(sorted((Charge(*c), int(d)) for c, d in sectors))
        if any(d <= 0 for _, d in sec):
            raise StructureError("leg sector dimensions must be positive")
        if len({c for c, _ in sec}) != len(sec):
            raise StructureError("duplicate charge sector on leg")
        self.direction = direction
        self.sectors = sec
        self._dims = {c: d for c, d in sec}

    def dim(self, charge: Charge) -> int:
        return self._dims[charge]

    def has(self, charge: Charge) -> bool:
        return charge in self._dims

    @property
    def charges(self) -> tuple[Charge, ...]:
        return tuple(c for c, _ in self.sectors)

    @property
    def total_dim(self) -> int:
        return sum(d for _, d in self.sectors)

    def offsets(self) -> dict[Charge, int]:
        """Start offset of each sector in the dense embedding of this leg."""
        off, pos = {}, 0
        for c, d in self.sectors:
            off[c] = pos
            pos += d
        return off

    def flipped(self) -> "Leg":
        """Same data viewed with reversed direction (charges negate)."""
        return Leg(-self.direction, tuple((-c, d) for c, d in self.sectors))

    def dual(self) -> "Leg":
        """Leg that can be contracted against this one."""
        return Leg(-self.direction, self.sectors)

    def __eq__(self, other):
        return (
            isinstance(other, Leg)
            and self.direction == other.direction
            and self.sectors == other.sectors
        )

    def __hash__(self):
        return hash((self.direction, self.sectors))

    def __repr__(self):
        arrow = "out" if self.direction == 1 else "in"
        return f"Leg({arrow}, {dict(self.sectors)})"


class QTensor:
    """Charge-conserving block-sparse tensor.

    ``blocks`` maps a per-leg charge assignment (tuple of Charges) to a
    dense complex array whose shape matches the sector dimensions.
    """

    __slots__ = ("legs", "total", "blocks")

    def __init__(
        self,
        legs: Iterable[Leg],
        blocks: dict[tuple[Charge, ...], np.ndarray],
        total: Charge = ZERO,
        *,
        copy: bool = False,
    ):
        self.legs = tuple(legs)
        self.total = Charge(*total)
        store = {}
        for key, arr in blocks.items():
            key = tuple(Charge(*c) for c in key)
            a = np.asarray(arr, dtype=BLOCK_DTYPE)
            store[key] = a.copy() if copy else a
        self.blocks = store
        self._check_structure()

    # -- structure ---------------------------------------------------------

    def _check_structure(self):
        n = len(self.legs)
        for key, arr in self.blocks.items():
            if len(key) != n:
                raise StructureError(f"block key arity {len(key)} != {n} legs")
            acc = ZERO
            for leg, c in zip(self.legs, key):
                if not leg.has(c):
                    raise StructureError(f"charge {c} not on leg {leg}")
                acc = acc + c if leg.direction == 1 else acc - c
            if acc != self.total:
                raise StructureError(
                    f"block {key} sums to {acc}, total charge is {self.total}"
                )
            shape = tuple(leg.dim(c) for leg, c in zip(self.legs, key))
            if arr.shape != shape:
                raise StructureError(f"block {key} shape {arr.shape} != {shape}")

    @property
    def ndim(self) -> int:
        return len(self.legs)

    @property
    def dense_shape(self) -> tuple[int, ...]:
        return tuple(leg.total_dim for leg in self.legs)

    def norm(self) -> float:
        return float(np.sqrt(sum(np.vdot(b, b).real for b in self.blocks.values())))

    def conj(self) -> "QTensor":
        """Complex conjugate; flips all leg directions and the total charge."""
        legs = tuple(leg.flipped() for leg in self.legs)
        blocks = {
            tuple(-c for c in key): np.conj(arr) for key, arr in self.blocks.items()
        }
        return QTensor(legs, blocks, -self.total)

    def copy(self) -> "QTensor":
        return QTensor(self.legs, self.blocks, self.total, copy=True)

    def permute(self, order: Iterable[int]) -> "QTensor":
        order = tuple(order)
        if sorted(order) != list(range(self.ndim)):
            raise StructureError(f"bad permutation {order}")
        legs = tuple(self.legs[i] for i in order)
        blocks = {
            tuple(key[i] for i in order): np.ascontiguousarray(np.transpose(arr, order))
            for key, arr in self.blocks.items()
        }
        return QTensor(legs, blocks, self.total)

    def scale(self, factor: complex) -> "QTensor":
        return QTensor(
            self.legs,
            {k: factor * v for k, v in self.blocks.items()},
            self.total,
        )

    def __repr__(self):
        return (
            f"QTensor(ndim={self.ndim}, total={tuple(self.total)}, "
            f"nblocks={len(self.blocks)}, dense_shape={self.dense_shape})"
        )


# -- constructors ------------------------------------------------------------


def identity_for(leg: Leg) -> QTensor:
    """Charge-respecting identity that contracts against ``leg``.

    Legs are (dual of ``leg``, copy of ``leg``) so that
    ``contract(x, identity_for(x.legs[i]), [(i, 0)])`` reproduces ``x``
    with the contracted leg moved to the last position.
    """
    blocks = {(c, c): np.eye(d, dtype=BLOCK_DTYPE) for c, d in leg.sectors}
    return QTensor((leg.dual(), Leg(leg.direction, leg.sectors)), blocks, ZERO)


def random_qtensor(
    rng: np.random.Generator, legs: Iterable[Leg], total: Charge = ZERO
) -> QTensor:
    """All admissible blocks filled with standard complex normals (test helper)."""
    legs = tuple(legs)
    blocks = {}
    for key in _admissible_keys(legs, total):
        shape = tuple(leg.dim(c) for leg, c in zip(legs, key))
        blocks[key] = (
            rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        ).astype(BLOCK_DTYPE)
    return QTensor(legs, blocks, total)


def _admissible_keys(legs, total):
    keys = []

    def rec(i, key, acc):
        if i == len(legs):
            if acc == total:
                keys.append(tuple(key))
            return
        for c, _ in legs[i].sectors:
            key.append(c)
            rec(i + 1, key, acc + c if legs[i].direction == 1 else acc - c)
            key.pop()

    rec(0, [], ZERO)
    return keys


# -- dense embedding (test oracle) -------------------------------------------


def to_dense(t: QTensor) -> np.ndarray:
    """Scatter blocks into a dense array (sector offsets follow leg order)."""
    out = np.zeros(t.dense_shape, dtype=BLOCK_DTYPE)
    offs = [leg.offsets() for leg in t.legs]
    for key, arr in t.blocks.items():
        sl = tuple(
            slice(offs[i][c], offs[i][c] + t.legs[i].dim(c)) for i, c in enumerate(key)
        )
        out[sl] = arr
    return out


# -- contraction --------------------------------------------------------------


def contract(
    a: QTensor, b: QTensor, pairs: Iterable[tuple[int, int]]
) -> QTensor:
    """Contract paired legs of two tensors.

    Paired legs must have opposite direction and identical sector maps.
    Result legs are the remaining legs of ``a`` followed by those of ``b``;
    its total charge is the sum of the input totals.
    """
    if a is b:
        raise StructureError("cannot contract a tensor with itself; copy first")
    pairs = [(int(ia), int(ib)) for ia, ib in pairs]
    if not pairs:
        raise StructureError("contract needs at least one leg pair")
    seen_a = {ia for ia, _ in pairs}
    seen_b = {ib for _, ib in pairs}
    if len(seen_a) != len(pairs) or len(seen_b) != len(pairs):
        raise StructureError("duplicate leg in contraction pairs")
    for ia, ib in pairs:
        la, lb = a.legs[ia], b.legs[ib]
        if la.direction == lb.direction:
            raise StructureError(f"legs {ia},{ib} have the same direction")
        if la.sectors != lb.sectors:
            raise StructureError(f"legs {ia},{ib} have mismatched sectors")

    keep_a = [i for i in range(a.ndim) if i not in seen_a]
    keep_b = [i for i in range(b.ndim) if i not in seen_b]
    axes_a = [ia for ia, _ in pairs]
    axes_b = [ib for _, ib in pairs]

    # group blocks of b by charges on the contracted legs
    grouped: dict[tuple[Charge, ...], list] = {}
    for key in sorted(b.blocks):
        ck = tuple(key[ib] for ib in axes_b)
        grouped.setdefault(ck, []).append(key)

    out_blocks: dict[tuple[Charge, ...], np.ndarray] = {}
    for akey in sorted(a.blocks):
        ck = tuple(akey[ia] for ia in axes_a)
        for bkey in grouped.get(ck, ()):
            res = np.tensordot(a.blocks[akey], b.blocks[bkey], axes=(axes_a, axes_b))
            okey = tuple(akey[i] for i in keep_a) + tuple(bkey[i] for i in keep_b)
            if okey in out_blocks:
                out_blocks[okey] += res
            else:
                out_blocks[okey] = res

    legs = tuple(a.legs[i] for i in keep_a) + tuple(b.legs[i] for i in keep_b)
    return QTensor(legs, out_blocks, a.total + b.total)


# -- fusion -------------------------------------------------------------------


class FusionRecord(NamedTuple):
    """Everything needed to undo a fuse() exactly."""

    position: int  # index of the fused leg in the fused tensor
    fused_leg: Leg
    original_legs: tuple[Leg, ...]  # legs that were fused, in fuse order
    kept_positions: tuple[int, ...]  # original positions of untouched legs
    fused_positions: tuple[int, ...]  # original positions of fused legs
    layout: dict  # fused charge -> list of (combo charges, offset, dims)


def fuse(t: QTensor, legs: Iterable[int]) -> tuple[QTensor, FusionRecord]:
    """Fuse the listed legs (all same direction) into one leg.

    The fused leg sits at the position of the first listed leg.  Within a
    fused charge sector, original charge combinations are laid out in
    lexicographic order of their per-leg sector indices; ``split`` undoes
    the operation bit-exactly.
    """
    idx = [int(i) for i in legs]
    if not idx:
        raise StructureError("fuse needs at least one leg")
    if len(set(idx)) != len(idx):
        raise StructureError("duplicate leg index in fuse")
    direction = t.legs[idx[0]].direction
    for i in idx:
        if t.legs[i].direction != direction:
            raise StructureError("fused legs must share direction")

    sub = [t.legs[i] for i in idx]
    # enumerate charge combinations in lexicographic sector-index order
    combos: list[tuple[tuple[Charge, ...], tuple[int, ...]]] = [((), ())]
    for leg in sub:
        combos = [
            (cs + (c,), ds + (d,)) for cs, ds in combos for c, d in leg.sectors
        ]
    layout: dict[Charge, list] = {}
    for cs, ds in combos:
        tot = sum(cs, ZERO)
        entry = layout.setdefault(tot, [])
        off = sum(int(np.prod(d)) for _, _, d in entry)
        entry.append((cs, off, ds))
    fused_sectors = [
        (c, sum(int(np.prod(d)) for _, _, d in entry)) for c, entry in layout.items()
    ]
    fused_leg = Leg(direction, fused_sectors)

    pos0 = idx[0]
    kept = [i for i in range(t.ndim) if i not in set(idx)]
    # output leg order: untouched legs keep relative order, fused leg at pos0
    out_order: list = []
    for i in range(t.ndim):
        if i == pos0:
            out_order.append("fused")
        elif i in set(idx):
            continue
        else:
            out_order.append(i)
    new_pos = out_order.index("fused")
    out_legs = tuple(
        fused_leg if o == "fused" else t.legs[o] for o in out_order
    )

    offset_of = {
        (c, cs): off for c, entry in layout.items() for cs, off, _ in entry
    }
    out_blocks: dict[tuple[Charge, ...], np.ndarray] = {}
    for key in sorted(t.blocks):
        sub_ch = tuple(key[i] for i in idx)
        tot = sum(sub_ch, ZERO)
        okey = tuple(tot if o == "fused" else key[o] for o in out_order)
        if okey not in out_blocks:
            shape = tuple(leg.dim(c) for leg, c in zip(out_legs, okey))
            out_blocks[okey] = np.zeros(shape, dtype=BLOCK_DTYPE)
        # move fused axes (in fuse order) to new_pos, flatten them
        perm = []
        for o in out_order:
            if o == "fused":
                perm.extend(idx)
            else:
                perm.append(o)
        arr = np.transpose(t.blocks[key], perm)
        size = int(np.prod([t.legs[i].dim(key[i]) for i in idx]))
        new_shape = tuple(
            size if o == "fused" else t.legs[o].dim(key[o]) for o in out_order
        )
        off = offset_of[(tot, sub_ch)]
        sl = [slice(None)] * len(out_order)
        sl[new_pos] = slice(off, off + size)
        out_blocks[okey][tuple(sl)] = arr.reshape(new_shape)

    rec = FusionRecord(
        position=new_pos,
        fused_leg=fused_leg,
        original_legs=tuple(sub),
        kept_positions=tuple(kept),
        fused_positions=tuple(idx),
        layout=layout,
    )
    return QTensor(out_legs, out_blocks, t.total), rec


def split(t: QTensor, rec: FusionRecord, position: int | None = None) -> QTensor:
    """Invert a fuse().  ``position`` overrides where the fused leg now sits."""
    pos = rec.position if position is None else int(position)
    if t.legs[pos].sectors != rec.fused_leg.sectors:
        raise StructureError("tensor leg does not match fusion record")
    n_sub = len(rec.original_legs)
    out_legs = (
        t.legs[:pos] + tuple(rec.original_legs) + t.legs[pos + 1 :]
    )
    out_blocks: dict[tuple[Charge, ...], np.ndarray] = {}
    for key in sorted(t.blocks):
        arr = t.blocks[key]
        fused_charge = key[pos]
        for cs, off, ds in rec.layout.get(fused_charge, ()):
            size = int(np.prod(ds))
            sl = [slice(None)] * t.ndim
            sl[pos] = slice(off, off + size)
            piece = arr[tuple(sl)]
            shape = (
                arr.shape[:pos] + tuple(int(d) for d in ds) + arr.shape[pos + 1 :]
            )
            piece = piece.reshape(shape)
            okey = key[:pos] + cs + key[pos + 1 :]
            if float(np.max(np.abs(piece))) == 0.0 and okey not in out_blocks:
                # keep zero blocks only if they existed before fusion is unknowable;
                # drop them: charge content is zero either way
                continue
            if okey in out_blocks:
                out_blocks[okey] += piece
            else:
                out_blocks[okey] = np.ascontiguousarray(piece)
    return QTensor(out_legs, out_blocks, t.total)


class MatrixCast(NamedTuple):
    """How a tensor was cast to matrix form, for undoing on SVD factors."""

    row_rec: FusionRecord
    col_rec: FusionRecord
    row_dirs: tuple[int, ...]  # original directions, row order
    col_dirs: tuple[int, ...]


def _flip_legs(t: QTensor, flips: set[int]) -> QTensor:
    if not flips:
        return t
    legs = tuple(
        leg.flipped() if i in flips else leg for i, leg in enumerate(t.legs)
    )
    blocks = {
        tuple(-c if i in flips else c for i, c in enumerate(key)): arr
        for key, arr in t.blocks.items()
    }
    return QTensor(legs, blocks, t.total)


def to_matrix(
    t: QTensor, rows: Iterable[int], cols: Iterable[int]
) -> tuple[QTensor, MatrixCast]:
    """Cast a tensor to two-leg (matrix) form.

    Row legs are flipped to incoming, column legs to outgoing, then each
    group is fused.  ``restore_rows``/``restore_cols`` undo the cast on
    the SVD factors.
    """
    rows = [int(i) for i in rows]
    cols = [int(i) for i in cols]
    if sorted(rows + cols) != list(range(t.ndim)):
        raise StructureError("rows+cols must partition the legs")
    row_dirs = tuple(t.legs[i].direction for i in rows)
    col_dirs = tuple(t.legs[i].direction for i in cols)
    flips = {i for i in rows if t.legs[i].direction != -1}
    flips |= {i for i in cols if t.legs[i].direction != 1}
    work = _flip_legs(t, flips).permute(rows + cols)
    nr = len(rows)
    work, rec_c = fuse(work, list(range(nr, nr + len(cols))))
    work, rec_r = fuse(work, list(range(nr)))
    return work, MatrixCast(rec_r, rec_c, row_dirs, col_dirs)


def _restore(factor: QTensor, rec: FusionRecord, pos: int, dirs) -> QTensor:
    out = split(factor, rec, position=pos)
    flips = {
        pos + j
        for j in range(len(rec.original_legs))
        if out.legs[pos + j].direction != dirs[j]
    }
    return _flip_legs(out, flips)


def restore_rows(u: QTensor, cast: MatrixCast) -> QTensor:
    """Undo the row fusion on the U factor (fused leg at position 0)."""
    return _restore(u, cast.row_rec, 0, cast.row_dirs)


def restore_cols(v: QTensor, cast: MatrixCast) -> QTensor:
    """Undo the column fusion on the V factor (fused leg at position 1)."""
    return _restore(v, cast.col_rec, 1, cast.col_dirs)


# -- Schmidt spectra -----------------------------------------------------------


class SchmidtVector:
    """Non-negative Schmidt values grouped by bond charge sector.

    Values within a sector are sorted non-increasing.  When ``normalized``
    is set the squared values over all sectors sum to one (within 1e-12).
    """

    __slots__ = ("entries", "normalized")

    def __init__(self, entries: dict[Charge, np.ndarray], normalized: bool = False):
        store = {}
        for c, vals in entries.items():
            v = np.asarray(vals, dtype=LAMBDA_DTYPE)
            if v.ndim != 1:
                raise DataError("schmidt sector values must be 1-d")
            if v.size and (np.any(v < 0) or np.any(np.diff(v) > 0)):
                raise DataError("schmidt values must be non-negative, non-increasing")
            if v.size:
                store[Charge(*c)] = v
        self.entries = store
        self.normalized = bool(normalized)
        if self.normalized and abs(self.norm2() - 1.0) > 1e-12:
            raise DataError(
                f"normalized flag set but 2-norm is {self.norm2():.3e}"
            )

    def norm2(self) -> float:
        return float(
            np.sqrt(sum(float(np.sum(v**2)) for v in self.entries.values()))
        )

    def normalize(self) -> tuple["SchmidtVector", float]:
        """Unit 2-norm copy plus the factor that was divided out."""
        n = self.norm2()
        if n == 0.0:
            raise DataError("cannot normalize an empty Schmidt spectrum")
        ent = {c: v / n for c, v in self.entries.items()}
        sv = SchmidtVector.__new__(SchmidtVector)
        sv.entries = {Charge(*c): np.asarray(v, dtype=LAMBDA_DTYPE) for c, v in ent.items()}
        sv.normalized = True
        return sv, n

    @property
    def chi(self) -> int:
        return sum(v.size for v in self.entries.values())

    def charges(self) -> tuple[Charge, ...]:
        return tuple(sorted(self.entries))

    def concat(self) -> np.ndarray:
        """All values pooled across sectors, sorted non-increasing."""
        if not self.entries:
            return np.zeros(0, dtype=LAMBDA_DTYPE)
        return np.sort(np.concatenate(list(self.entries.values())))[::-1]

    def leg(self, direction: int) -> Leg:
        return Leg(direction, [(c, v.size) for c, v in self.entries.items()])

    def max(self) -> float:
        return max((float(v[0]) for v in self.entries.values()), default=0.0)

    def __repr__(self):
        return f"SchmidtVector(chi={self.chi}, sectors={len(self.entries)})"


def scale_leg(
    t: QTensor,
    leg_index: int,
    schmidt: SchmidtVector,
    *,
    inverse: bool = False,
    floor: float = 0.0,
) -> QTensor:
    """Multiply (or divide) along one leg by per-sector Schmidt values.

    With ``inverse`` set, values below ``floor`` times the largest value
    are excluded from the inversion (their rows are zeroed).
    """
    i = int(leg_index)
    leg = t.legs[i]
    cutoff = floor * schmidt.max()
    weights = {}
    for c, d in leg.sectors:
        if c not in schmidt.entries:
            raise StructureError(f"no Schmidt sector for bond charge {c}")
        v = schmidt.entries[c]
        if v.size != d:
            raise StructureError(
                f"Schmidt sector {c} size {v.size} != leg dim {d}"
            )
        if inverse:
            w = np.where(v > cutoff, 1.0 / np.where(v > cutoff, v, 1.0), 0.0)
        else:
            w = v
        weights[c] = w
    blocks = {}
    for key, arr in t.blocks.items():
        w = weights[key[i]]
        shape = [1] * t.ndim
        shape[i] = w.size
        blocks[key] = arr * w.reshape(shape)
    return QTensor(t.legs, blocks, t.total)


# -- truncated SVD -------------------------------------------------------------


class TruncatedSVD(NamedTuple):
    u: QTensor
    s: SchmidtVector
    v: QTensor
    discarded_weight: float
    is_zero: bool


def truncated_svd(
    m: QTensor, chi_max: int, weight_tol: float
) -> TruncatedSVD:
    """Charge-blocked SVD with global truncation.

    Each charge block is decomposed independently; singular values are
    pooled across sectors, globally sorted, and kept until ``chi_max``
    values are retained or the trailing squared sum drops below
    ``weight_tol`` (relative to the total squared sum).  Equal values are
    ordered by lower |ket|+|bra| bond charge then by sector; if the cut
    would land inside a tie group the kept count is rounded down to the
    tie boundary so mirrored sectors are never split apart.

    Bond charge of each block equals its (incoming) row charge; ``u``
    carries total charge zero and ``v`` the total charge of ``m``.
    """
    if chi_max < 1:
        raise ParameterError(f"chi_max must be >= 1, got {chi_max}")
    if weight_tol < 0:
        raise ParameterError("weight_tol must be >= 0")
    if m.ndim != 2:
        raise StructureError("truncated_svd expects a two-leg tensor")
    if m.legs[0].direction != -1 or m.legs[1].direction != 1:
        raise StructureError("matrix legs must be (in, out); use to_matrix")

    factors = {}
    pooled = []  # (value, tie-break, bond charge, index within sector)
    for key in sorted(m.blocks):
        cr, cc = key
        u, s, vh = np.linalg.svd(m.blocks[key], full_matrices=False)
        factors[key] = (u, s, vh)
        for j, val in enumerate(s):
            pooled.append((float(val), abs(cr), cr, j))

    total_sq = sum(float(np.sum(f[1] ** 2)) for f in factors.values())
    if total_sq == 0.0 or not pooled:
        # all-zero matrix: empty factors, zero discarded weight, flag set
        u = QTensor((m.legs[0], Leg(1, [])), {}, ZERO)
        v = QTensor((Leg(-1, []), m.legs[1]), {}, m.total)
        return TruncatedSVD(u, SchmidtVector({}), v, 0.0, True)

    pooled.sort(key=lambda e: (-e[0], e[1], e[2], e[3]))
    values = np.array([e[0] for e in pooled])
    sq = values**2
    tail = np.concatenate([np.cumsum(sq[::-1])[::-1], [0.0]])  # tail[k] = sum sq[k:]
    keep = len(values)
    for k in range(len(values)):
        if tail[k] <= weight_tol * total_sq:
            keep = k
            break
    keep0 = keep = min(keep, chi_max)
    # round down to a tie boundary so truncation stays deterministic and
    # symmetric across mirrored charge sectors
    if keep < len(values):
        tie = TIE_RTOL * values[0]
        k = keep
        while 0 < k < len(values) and values[k - 1] - values[k] <= tie:
            k -= 1
        keep = k if k > 0 else keep0

    kept_per_sector: dict[Charge, int] = {}
    for e in pooled[:keep]:
        kept_per_sector[e[2]] = kept_per_sector.get(e[2], 0) + 1
    discarded = float(tail[keep]) / total_sq

    bond_sectors = sorted(kept_per_sector.items())
    bond_out = Leg(1, bond_sectors)
    bond_in = Leg(-1, bond_sectors)
    u_blocks, v_blocks, s_entries = {}, {}, {}
    for key in sorted(factors):
        cr, cc = key
        kc = kept_per_sector.get(cr, 0)
        if kc == 0:
            continue
        u, s, vh = factors[key]
        u_blocks[(cr, cr)] = np.ascontiguousarray(u[:, :kc])
        v_blocks[(cr, cc)] = np.ascontiguousarray(vh[:kc, :])
        s_entries[cr] = s[:kc].astype(LAMBDA_DTYPE)
    uq = QTensor((m.legs[0], bond_out), u_blocks, ZERO)
    vq = QTensor((bond_in, m.legs[1]), v_blocks, m.total)
    return TruncatedSVD(uq, SchmidtVector(s_entries), vq, discarded, False)


# -- serialization -------------------------------------------------------------

_MAGIC_T = b"OEQT"
_MAGIC_S = b"OEQS"
_MAGIC_C = b"OEC1"
_VERSION = 1


def _pack_charge(c: Charge) -> bytes:
    return struct.pack("<qq", c.ket, c.bra)


def _unpack_charge(buf, off):
    k, b = struct.unpack_from("<qq", buf, off)
    return Charge(k, b), off + 16


def dumps_qtensor(t: QTensor) -> bytes:
    """Versioned little-endian binary encoding; round-trips bit-exactly."""
    out = [_MAGIC_T, struct.pack("<I", _VERSION), _pack_charge(t.total)]
    out.append(struct.pack("<I", t.ndim))
    for leg in t.legs:
        out.append(struct.pack("<bI", leg.direction, len(leg.sectors)))
        for c, d in leg.sectors:
            out.append(_pack_charge(c))
            out.append(struct.pack("<Q", d))
    out.append(struct.pack("<I", len(t.blocks)))
    for key in sorted(t.blocks):
        for c in key:
            out.append(_pack_charge(c))
        payload = np.ascontiguousarray(t.blocks[key], dtype=BLOCK_DTYPE).tobytes()
        out.append(struct.pack("<Q", len(payload)))
        out.append(payload)
    return b"".join(out)


def loads_qtensor(buf: bytes) -> QTensor:
    if buf[:4] != _MAGIC_T:
        raise DataError("not a QTensor container")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != _VERSION:
        raise DataError(f"unsupported QTensor container version {version}")
    off = 8
    total, off = _unpack_charge(buf, off)
    (ndim,) = struct.unpack_from("<I", buf, off)
    off += 4
    legs = []
    for _ in range(ndim):
        direction, nsec = struct.unpack_from("<bI", buf, off)
        off += 5
        sectors = []
        for _ in range(nsec):
            c, off = _unpack_charge(buf, off)
            (d,) = struct.unpack_from("<Q", buf, off)
            off += 8
            sectors.append((c, int(d)))
        legs.append(Leg(direction, sectors))
    (nblocks,) = struct.unpack_from("<I", buf, off)
    off += 4
    blocks = {}
    for _ in range(nblocks):
        key = []
        for _ in range(ndim):
            c, off = _unpack_charge(buf, off)
            key.append(c)
        (plen,) = struct.unpack_from("<Q", buf, off)
        off += 8
        key = tuple(key)
        shape = tuple(leg.dim(c) for leg, c in zip(legs, key))
        arr = np.frombuffer(buf, dtype=BLOCK_DTYPE, count=int(np.prod(shape)), offset=off)
        blocks[key] = arr.reshape(shape).copy()
        off += plen
    return QTensor(tuple(legs), blocks, total)


def dumps_schmidt(s: SchmidtVector) -> bytes:
    out = [_MAGIC_S, struct.pack("<IBI", _VERSION, int(s.normalized), len(s.entries))]
    for c in sorted(s.entries):
        out.append(_pack_charge(c))
        v = np.ascontiguousarray(s.entries[c], dtype=LAMBDA_DTYPE)
        out.append(struct.pack("<Q", v.size))
        out.append(v.tobytes())
    return b"".join(out)


def loads_schmidt(buf: bytes) -> SchmidtVector:
    if buf[:4] != _MAGIC_S:
        raise DataError("not a SchmidtVector container")
    version, normalized, nsec = struct.unpack_from("<IBI", buf, 4)
    if version != _VERSION:
        raise DataError(f"unsupported SchmidtVector container version {version}")
    off = 13
    entries = {}
    for _ in range(nsec):
        c, off = _unpack_charge(buf, off)
        (n,) = struct.unpack_from("<Q", buf, off)
        off += 8
        v = np.frombuffer(buf, dtype=LAMBDA_DTYPE, count=int(n), offset=off).copy()
        entries[c] = v
        off += int(n) * 8
    return SchmidtVector(entries, normalized=bool(normalized))


def dump_container(entries: list[tuple[str, bytes]]) -> bytes:
    """Tagged multi-object container used for checkpoints."""
    out = [_MAGIC_C, struct.pack("<II", _VERSION, len(entries))]
    for tag, payload in entries:
        raw = tag.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<Q", len(payload)))
        out.append(payload)
    return b"".join(out)


def load_container(buf: bytes) -> dict[str, bytes]:
    if buf[:4] != _MAGIC_C:
        raise DataError("not an oechain container")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != _VERSION:
        raise DataError(f"unsupported container version {version}")
    off = 12
    entries = {}
    for _ in range(n):
        (tlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        tag = buf[off : off + tlen].decode("utf-8")
        off += tlen
        (plen,) = struct.unpack_from("<Q", buf, off)
        off += 8
        entries[tag] = buf[off : off + plen]
        off += plen
    return entries
