"""State containers for the MPO evolution.

The infinite chain is a two-site unit cell in Vidal form,

    ... lam_b Gamma_a lam_a Gamma_b lam_b ...

where each Gamma has legs (left bond: in, physical: out, right bond: out)
and satisfies q(right) = q(left) - q(phys), so bond charges accumulate
the negated physical charges from the left.  The z-Neel initial state
puts charge (0,0) on the bond between unit cells; the right-half
magnetization deviation at that cut is the ket component of the bond
charge and moves in steps of two.

``log_trace`` records the log of the scalar-per-unit-cell that has been
divided out of the tensors; the physically represented operator is
exp(log_trace) per cell times the stored network.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError
from .qtensor import (
    QTensor,
    SchmidtVector,
    dump_container,
    dumps_qtensor,
    dumps_schmidt,
    load_container,
    loads_qtensor,
    loads_schmidt,
)


@dataclass
class UnitCellState:
    """Two-site infinite MPO in Gamma/lambda form plus trace bookkeeping."""

    gamma_a: QTensor
    gamma_b: QTensor
    lambda_a: SchmidtVector
    lambda_b: SchmidtVector
    log_trace: float = 0.0
    mode: str = "u1"  # charge handling: "u1" or "trivial"

    def copy(self) -> "UnitCellState":
        return replace(self)

    @property
    def chi(self) -> tuple[int, int]:
        return (self.lambda_a.chi, self.lambda_b.chi)

    def gammas(self):
        return (self.gamma_a, self.gamma_b)


@dataclass
class FiniteChainState:
    """Open chain of L sites in Vidal form; lambdas[0] and lambdas[L] are trivial."""

    gammas: list[QTensor]
    lambdas: list[SchmidtVector]
    log_trace: float = 0.0
    mode: str = "u1"

    @property
    def length(self) -> int:
        return len(self.gammas)

    def copy(self) -> "FiniteChainState":
        return FiniteChainState(
            list(self.gammas), list(self.lambdas), self.log_trace, self.mode
        )

    @property
    def chi(self) -> tuple[int, ...]:
        return tuple(lam.chi for lam in self.lambdas[1:-1])


# -- serialization -------------------------------------------------------------


def state_to_bytes(state) -> bytes:
    if isinstance(state, UnitCellState):
        meta = {"kind": "unit_cell", "log_trace": state.log_trace, "mode": state.mode}
        entries = [
            ("meta", json.dumps(meta).encode()),
            ("gamma/0", dumps_qtensor(state.gamma_a)),
            ("gamma/1", dumps_qtensor(state.gamma_b)),
            ("lambda/0", dumps_schmidt(state.lambda_a)),
            ("lambda/1", dumps_schmidt(state.lambda_b)),
        ]
    elif isinstance(state, FiniteChainState):
        meta = {
            "kind": "finite",
            "log_trace": state.log_trace,
            "mode": state.mode,
            "length": state.length,
        }
        entries = [("meta", json.dumps(meta).encode())]
        for i, g in enumerate(state.gammas):
            entries.append((f"gamma/{i}", dumps_qtensor(g)))
        for i, lam in enumerate(state.lambdas):
            entries.append((f"lambda/{i}", dumps_schmidt(lam)))
    else:
        raise DataError(f"cannot serialize {type(state).__name__}")
    return dump_container(entries)


def state_from_bytes(buf: bytes):
    entries = load_container(buf)
    meta = json.loads(entries["meta"].decode())
    if meta["kind"] == "unit_cell":
        return UnitCellState(
            gamma_a=loads_qtensor(entries["gamma/0"]),
            gamma_b=loads_qtensor(entries["gamma/1"]),
            lambda_a=loads_schmidt(entries["lambda/0"]),
            lambda_b=loads_schmidt(entries["lambda/1"]),
            log_trace=float(meta["log_trace"]),
            mode=meta["mode"],
        )
    if meta["kind"] == "finite":
        n = int(meta["length"])
        return FiniteChainState(
            gammas=[loads_qtensor(entries[f"gamma/{i}"]) for i in range(n)],
            lambdas=[loads_schmidt(entries[f"lambda/{i}"]) for i in range(n + 1)],
            log_trace=float(meta["log_trace"]),
            mode=meta["mode"],
        )
    raise DataError(f"unknown state kind {meta['kind']!r}")
