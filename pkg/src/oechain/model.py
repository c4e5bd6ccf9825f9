"""Physical models: Hamiltonians, dephasing Lindbladians, Trotter gates.

Spin-1/2 chains with nearest-neighbor couplings

    H = (1/4) sum_i (Jx XX + Jy YY + Jz ZZ) + (hz/2) sum_i Z_i

and local dephasing  L_i rho = gamma/2 (Z_i rho Z_i - rho).  Everything
is expressed in units of a reference coupling J (hbar = 1).

Two-site vectorization convention: vec(rho)_{2s+s'} = rho_{s,s'} per
site (basis order up-up, up-down, down-up, down-down), so commutators
become -i (h (x) 1 - 1 (x) h^T).  Single-site terms (field, dephasing)
are split 1/2-1/2 between the two bonds touching a site; open-chain edge
bonds carry the full share of their boundary site.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NumericalError, ParameterError, StructureError
from .qtensor import BLOCK_DTYPE, Charge, Leg, QTensor, SchmidtVector, ZERO
from .state import FiniteChainState, UnitCellState

SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
SZ = np.array([[1, 0], [0, -1]], dtype=complex)
ID2 = np.eye(2, dtype=complex)

# charges of the local operator basis |s><s'|: sigma^z eigenvalue of the
# ket index, then of the bra index
LOCAL_CHARGES = (Charge(1, 1), Charge(1, -1), Charge(-1, 1), Charge(-1, -1))
# index permutation realizing the operator dagger |s><s'| -> |s'><s|
DAGGER_PERM = (0, 2, 1, 3)
# Tr(e_i) and Tr(sigma^z e_i) over the local basis
TRACE_VEC = np.array([1.0, 0.0, 0.0, 1.0])
SZ_TRACE_VEC = np.array([1.0, 0.0, 0.0, -1.0])
SX_TRACE_VEC = np.array([0.0, 1.0, 1.0, 0.0])

GATE_LEAK_TOL = 1e-14


@dataclass(frozen=True)
class ModelParams:
    """Couplings in units of J; gamma is the dephasing rate."""

    jx: float
    jy: float
    jz: float
    hz: float
    gamma: float

    def __post_init__(self):
        if self.gamma < 0:
            raise ParameterError(f"gamma must be >= 0, got {self.gamma}")

    @classmethod
    def xxz(cls, jz: float, gamma: float) -> "ModelParams":
        return cls(1.0, 1.0, jz, 0.0, gamma)

    @classmethod
    def xyz(cls, jy: float, jz: float, gamma: float) -> "ModelParams":
        return cls(1.0, jy, jz, 0.0, gamma)

    @classmethod
    def ising(cls, hz: float, gamma: float) -> "ModelParams":
        return cls(1.0, 0.0, 0.0, hz, gamma)

    @property
    def conserves_magnetization(self) -> bool:
        return self.jx == self.jy


def symmetry_mode(params: ModelParams, init_kind: str) -> str:
    """Charge handling: 'u1' only when dynamics and state share the symmetry."""
    if params.conserves_magnetization and init_kind == "neel_z":
        return "u1"
    return "trivial"


def physical_leg(direction: int, mode: str) -> Leg:
    if mode == "u1":
        return Leg(direction, [(c, 1) for c in LOCAL_CHARGES])
    if mode == "trivial":
        return Leg(direction, [(ZERO, 4)])
    raise ParameterError(f"unknown symmetry mode {mode!r}")


# -- generators ---------------------------------------------------------------


def two_site_hamiltonian(
    params: ModelParams, w_left: float = 0.5, w_right: float = 0.5
) -> np.ndarray:
    """Bond Hamiltonian; the field carries per-site weights for edge bonds."""
    h = 0.25 * (
        params.jx * np.kron(SX, SX)
        + params.jy * np.kron(SY, SY)
        + params.jz * np.kron(SZ, SZ)
    )
    h += 0.5 * params.hz * (w_left * np.kron(SZ, ID2) + w_right * np.kron(ID2, SZ))
    return h


def bond_liouvillian(
    params: ModelParams, w_left: float = 0.5, w_right: float = 0.5
) -> np.ndarray:
    """16x16 generator on vectorized two-site operators.

    Coherent part -i(h x 1 - 1 x h^T) plus each site's dephasing with the
    given weight (bulk 1/2 each, so a full even+odd sweep applies exactly
    gamma per site).
    """
    h = two_site_hamiltonian(params, w_left, w_right)
    eye4 = np.eye(4, dtype=complex)
    lb = -1j * (np.kron(h, eye4) - np.kron(eye4, h.T))
    z1 = np.kron(SZ, ID2)
    z2 = np.kron(ID2, SZ)
    eye16 = np.eye(16, dtype=complex)
    for z, w in ((z1, w_left), (z2, w_right)):
        lb += w * 0.5 * params.gamma * (np.kron(z, z.T) - eye16)
    return lb


@dataclass(frozen=True)
class LiouvillianGate:
    """exp(L_bond * tau) as a four-leg charge-blocked tensor.

    Legs are (site1 out, site2 out, site1 in, site2 in), each of
    dimension four in the local operator basis.
    """

    tensor: QTensor
    tau: float
    mode: str


def _superop_to_site_tensor(mat: np.ndarray) -> np.ndarray:
    """Reorder a 16x16 two-site superoperator into (i1', i2', i1, i2)."""
    g = mat.reshape(2, 2, 2, 2, 2, 2, 2, 2)
    # (s1o, s2o, s1o', s2o', s1i, s2i, s1i', s2i') -> group per site
    g = np.transpose(g, (0, 2, 1, 3, 4, 6, 5, 7))
    return np.ascontiguousarray(g.reshape(4, 4, 4, 4))


def gate_exponential(lb: np.ndarray, tau: float, mode: str = "u1") -> LiouvillianGate:
    """Machine-precision matrix exponential cast into a charge-blocked gate.

    Negative tau is allowed (4th-order schedules use it).  In 'u1' mode
    the charge structure must be exactly block-diagonal; leakage above
    1e-14 of the gate norm raises.
    """
    if not np.isfinite(tau):
        raise NumericalError(f"non-finite gate step {tau}")
    mat = scipy.linalg.expm(np.asarray(lb, dtype=complex) * tau)
    if not np.all(np.isfinite(mat)):
        raise NumericalError("gate exponential produced non-finite entries")
    g = _superop_to_site_tensor(mat)
    if mode == "trivial":
        legs = (
            physical_leg(1, mode),
            physical_leg(1, mode),
            physical_leg(-1, mode),
            physical_leg(-1, mode),
        )
        tensor = QTensor(legs, {(ZERO, ZERO, ZERO, ZERO): g}, ZERO)
        return LiouvillianGate(tensor, tau, mode)
    if mode != "u1":
        raise ParameterError(f"unknown symmetry mode {mode!r}")
    legs = (
        physical_leg(1, mode),
        physical_leg(1, mode),
        physical_leg(-1, mode),
        physical_leg(-1, mode),
    )
    scale = float(np.max(np.abs(g)))
    blocks = {}
    leak = 0.0
    for i1o, c1o in enumerate(LOCAL_CHARGES):
        for i2o, c2o in enumerate(LOCAL_CHARGES):
            for i1i, c1i in enumerate(LOCAL_CHARGES):
                for i2i, c2i in enumerate(LOCAL_CHARGES):
                    val = g[i1o, i2o, i1i, i2i]
                    if c1o + c2o == c1i + c2i:
                        blocks[(c1o, c2o, c1i, c2i)] = np.array(val).reshape(
                            1, 1, 1, 1
                        )
                    else:
                        leak = max(leak, abs(val))
    if leak > GATE_LEAK_TOL * max(scale, 1.0):
        raise StructureError(
            f"gate breaks charge conservation (leakage {leak:.2e}); "
            "use the 'trivial' mode for this model"
        )
    tensor = QTensor(legs, blocks, ZERO)
    return LiouvillianGate(tensor, tau, mode)


# -- Trotter schedules ----------------------------------------------------------


@dataclass(frozen=True)
class TrotterSchedule:
    """Ordered bond-parity steps realizing one time step dt."""

    order: int
    dt: float
    steps: tuple[tuple[str, float], ...]  # (parity, tau)

    def taus(self) -> tuple[float, ...]:
        return tuple(sorted({tau for _, tau in self.steps}))


def trotter_schedule(order: int, dt: float) -> TrotterSchedule:
    """1st, 2nd or 4th order even/odd splitting of one step.

    The 4th-order scheme is the real-coefficient Forest-Ruth composition
    of three 2nd-order blocks with weights (w, 1-2w, w), w = 1/(2-2^(1/3));
    the middle block runs backwards in time.
    """
    if dt <= 0:
        raise ParameterError(f"dt must be positive, got {dt}")
    if order == 1:
        steps = (("even", dt), ("odd", dt))
    elif order == 2:
        steps = (("even", dt / 2), ("odd", dt), ("even", dt / 2))
    elif order == 4:
        w = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))
        steps = (
            ("even", w * dt / 2),
            ("odd", w * dt),
            ("even", (1 - w) * dt / 2),
            ("odd", (1 - 2 * w) * dt),
            ("even", (1 - w) * dt / 2),
            ("odd", w * dt),
            ("even", w * dt / 2),
        )
    else:
        raise ParameterError(f"unsupported Trotter order {order}")
    return TrotterSchedule(order, dt, steps)


class GateTable:
    """Gates for every distinct step length (and bond class, finite chains)."""

    def __init__(self, params: ModelParams, schedule: TrotterSchedule, mode: str,
                 length: int | None = None):
        self.params = params
        self.mode = mode
        self.length = length
        self._gates: dict = {}
        taus = schedule.taus()
        if length is None:
            lb = bond_liouvillian(params)
            for tau in taus:
                self._gates[tau] = gate_exponential(lb, tau, mode)
        else:
            if length < 2:
                raise ParameterError("finite chain needs at least two sites")
            classes = set()
            for i in range(length - 1):
                classes.add(self._bond_class(i))
            for wl, wr in classes:
                lb = bond_liouvillian(params, wl, wr)
                for tau in taus:
                    self._gates[(tau, wl, wr)] = gate_exponential(lb, tau, mode)

    def _bond_class(self, bond: int) -> tuple[float, float]:
        wl = 1.0 if bond == 0 else 0.5
        wr = 1.0 if bond == self.length - 2 else 0.5
        return (wl, wr)

    def infinite(self, tau: float) -> LiouvillianGate:
        return self._gates[tau]

    def finite(self, tau: float, bond: int) -> LiouvillianGate:
        return self._gates[(tau,) + self._bond_class(bond)]


# -- initial states -------------------------------------------------------------

# local operator components of |up><up|, |down><down|, |-> <-|, |<- ><-|
_VEC_UP = np.array([1, 0, 0, 0], dtype=complex)
_VEC_DOWN = np.array([0, 0, 0, 1], dtype=complex)
_VEC_RIGHT = np.array([1, 1, 1, 1], dtype=complex) / 2
_VEC_LEFT = np.array([1, -1, -1, 1], dtype=complex) / 2


def _site_tensor_u1(charge_left: Charge, phys_charge: Charge) -> QTensor:
    charge_right = charge_left - phys_charge
    legs = (
        Leg(-1, [(charge_left, 1)]),
        physical_leg(1, "u1"),
        Leg(1, [(charge_right, 1)]),
    )
    blocks = {(charge_left, phys_charge, charge_right): np.ones((1, 1, 1))}
    return QTensor(legs, blocks, ZERO)


def _site_tensor_trivial(vec: np.ndarray) -> QTensor:
    legs = (Leg(-1, [(ZERO, 1)]), physical_leg(1, "trivial"), Leg(1, [(ZERO, 1)]))
    return QTensor(legs, {(ZERO, ZERO, ZERO): vec.reshape(1, 4, 1)}, ZERO)


def _unit_lambda(charge: Charge) -> SchmidtVector:
    return SchmidtVector({charge: [1.0]}, normalized=True)


def initial_state(kind: str, mode: str) -> UnitCellState:
    """Product initial state on the two-site unit cell (bond dimension one)."""
    if kind == "neel_z":
        if mode == "u1":
            up, down = Charge(1, 1), Charge(-1, -1)
            gamma_a = _site_tensor_u1(ZERO, up)
            gamma_b = _site_tensor_u1(down, down)
            return UnitCellState(
                gamma_a, gamma_b, _unit_lambda(down), _unit_lambda(ZERO), 0.0, mode
            )
        return UnitCellState(
            _site_tensor_trivial(_VEC_UP),
            _site_tensor_trivial(_VEC_DOWN),
            _unit_lambda(ZERO),
            _unit_lambda(ZERO),
            0.0,
            "trivial",
        )
    if kind == "neel_x":
        if mode == "u1":
            raise ParameterError("neel_x breaks magnetization blocks; use trivial mode")
        return UnitCellState(
            _site_tensor_trivial(_VEC_RIGHT),
            _site_tensor_trivial(_VEC_LEFT),
            _unit_lambda(ZERO),
            _unit_lambda(ZERO),
            0.0,
            "trivial",
        )
    raise ParameterError(f"unknown initial state {kind!r}")


def initial_state_finite(kind: str, length: int, mode: str) -> FiniteChainState:
    """Open-chain product state, alternating starting from the 'A' pattern."""
    if length < 2:
        raise ParameterError("finite chain needs at least two sites")
    gammas, lambdas = [], [_unit_lambda(ZERO)]
    if kind == "neel_z" and mode == "u1":
        acc = ZERO
        for i in range(length):
            phys = Charge(1, 1) if i % 2 == 0 else Charge(-1, -1)
            gammas.append(_site_tensor_u1(acc, phys))
            acc = acc - phys
            lambdas.append(_unit_lambda(acc))
        return FiniteChainState(gammas, lambdas, 0.0, mode)
    if kind == "neel_z":
        vecs = (_VEC_UP, _VEC_DOWN)
    elif kind == "neel_x":
        if mode == "u1":
            raise ParameterError("neel_x breaks magnetization blocks; use trivial mode")
        vecs = (_VEC_RIGHT, _VEC_LEFT)
    else:
        raise ParameterError(f"unknown initial state {kind!r}")
    for i in range(length):
        gammas.append(_site_tensor_trivial(vecs[i % 2]))
        lambdas.append(_unit_lambda(ZERO))
    return FiniteChainState(gammas, lambdas, 0.0, "trivial")
