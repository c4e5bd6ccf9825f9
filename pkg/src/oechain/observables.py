"""Entropy and spectrum analytics.

Works on Schmidt spectra resolved by the right-half magnetization
deviation M_R (even integers; the charge a Schmidt operator carries
under sigma^z multiplication from the left).  All entropies are in bits.

The decomposition identity

    S_OP = sum_M p(M) S_res(M) + S_num

is validated on every report; see ``build_report``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FitError, NoPeakError, ParameterError
from .qtensor import SchmidtVector

SECTOR_FLOOR = 1e-12  # sectors below this probability are omitted from S_res
FIT_FLOOR = 1e-8  # sectors below this probability are excluded from width fits
NORM_TOL = 1e-6


@dataclass
class SchmidtSpectrum:
    """Normalized Schmidt values grouped by half-chain magnetization M_R."""

    sectors: dict[int, np.ndarray]
    bond: str = ""
    time: float = 0.0

    def __post_init__(self):
        clean = {}
        for m, vals in self.sectors.items():
            v = np.asarray(vals, dtype=float)
            if v.size:
                clean[int(m)] = np.sort(v)[::-1]
        self.sectors = clean
        total = self.total_weight()
        if abs(total - 1.0) > NORM_TOL:
            raise DataError(f"spectrum not normalized: sum lambda^2 = {total:.8f}")

    def total_weight(self) -> float:
        return float(sum(np.sum(v**2) for v in self.sectors.values()))

    def all_values(self) -> np.ndarray:
        if not self.sectors:
            return np.zeros(0)
        return np.concatenate(list(self.sectors.values()))

    @property
    def chi(self) -> int:
        return int(sum(v.size for v in self.sectors.values()))

    @classmethod
    def from_schmidt_vector(
        cls, sv: SchmidtVector, *, bond: str = "", time: float = 0.0, m_ref: int = 0
    ) -> "SchmidtSpectrum":
        """Group a charge-resolved spectrum by M_R = ket charge - reference.

        Sectors that differ only in the bra charge are merged (the paper's
        composite index); the spectrum must be normalized.
        """
        if not sv.normalized:
            sv, _ = sv.normalize()
        grouped: dict[int, list] = {}
        for c, vals in sv.entries.items():
            grouped.setdefault(int(c.ket) - m_ref, []).append(vals)
        sectors = {m: np.concatenate(vs) for m, vs in grouped.items()}
        return cls(sectors, bond=bond, time=time)


def _entropy_bits(weights: np.ndarray) -> float:
    w = weights[weights > 0]
    if w.size == 0:
        return 0.0
    return float(-np.sum(w * np.log2(w)))


def operator_entanglement(spec: SchmidtSpectrum) -> float:
    """S_OP = -sum lambda^2 log2 lambda^2 over the full spectrum."""
    vals = spec.all_values()
    return _entropy_bits(vals**2)


def sector_probabilities(spec: SchmidtSpectrum) -> dict[int, float]:
    """p(M_R) = sum of squared Schmidt values in the sector."""
    return {m: float(np.sum(v**2)) for m, v in sorted(spec.sectors.items())}


def number_entropy(p: dict[int, float]) -> float:
    """Shannon entropy (bits) of the sector probabilities."""
    arr = np.array(list(p.values()), dtype=float)
    if np.any(arr < -1e-14):
        raise DataError("negative sector probability")
    total = float(np.sum(arr))
    if abs(total - 1.0) > NORM_TOL:
        raise DataError(f"sector probabilities sum to {total:.8f}")
    return _entropy_bits(np.clip(arr, 0.0, None))


def resolved_entropies(
    spec: SchmidtSpectrum, floor: float = SECTOR_FLOOR
) -> tuple[dict[int, float], tuple[int, ...]]:
    """Per-sector entropies of the renormalized spectra lambda/sqrt(p).

    Sectors with probability at or below ``floor`` are omitted and
    returned in the second element.
    """
    out, omitted = {}, []
    for m, vals in sorted(spec.sectors.items()):
        p = float(np.sum(vals**2))
        if p <= floor:
            omitted.append(m)
            continue
        out[m] = _entropy_bits(vals**2 / p)
    return out, tuple(omitted)


@dataclass
class FitDiagnostics:
    residual: float
    points: int


@dataclass
class EntropyReport:
    """One measurement: total, sector-resolved and number entropies plus width."""

    s_op: float
    p: dict[int, float]
    s_num: float
    s_res: dict[int, float]
    delta: float | None
    fit: FitDiagnostics | None
    omitted: tuple[int, ...] = ()
    identity_residual: float = 0.0


def build_report(spec: SchmidtSpectrum, *, identity_tol: float = 1e-8) -> EntropyReport:
    """Assemble all entropy observables and enforce the decomposition identity.

    The identity is validated over the full sector resolution; the report
    only lists sectors above the probability floor.
    """
    s_op = operator_entanglement(spec)
    p = sector_probabilities(spec)
    s_num = number_entropy(p)
    s_res_full, _ = resolved_entropies(spec, floor=0.0)
    acc = sum(p[m] * s for m, s in s_res_full.items()) + s_num
    resid = abs(s_op - acc)
    if resid > identity_tol:
        raise DataError(f"entropy decomposition identity violated: {resid:.3e}")
    s_res, omitted = resolved_entropies(spec)
    try:
        delta, fit = fit_gaussian_width(p)
    except FitError:
        delta, fit = None, None
    return EntropyReport(s_op, p, s_num, s_res, delta, fit, omitted, resid)


def fit_gaussian_width(
    p: dict[int, float], floor: float = FIT_FLOOR, min_sectors: int = 5
) -> tuple[float, FitDiagnostics]:
    """Width of a centered Gaussian fitted to log p against M_R^2.

    Weighted least squares with weights p^2 (approximates an unweighted
    fit of p itself, robust against truncated tails).  Returns delta such
    that p ~ exp(-M^2 / (2 delta^2)).
    """
    pts = [(m, q) for m, q in p.items() if q > floor]
    if len(pts) < min_sectors:
        raise FitError(f"need >= {min_sectors} sectors above {floor}, got {len(pts)}")
    x = np.array([m * m for m, _ in pts], dtype=float)
    y = np.log(np.array([q for _, q in pts], dtype=float))
    w = np.array([q for _, q in pts], dtype=float) ** 2
    xm = np.sum(w * x) / np.sum(w)
    ym = np.sum(w * y) / np.sum(w)
    sxx = np.sum(w * (x - xm) ** 2)
    if sxx <= 0:
        raise FitError("degenerate sector support for width fit")
    slope = float(np.sum(w * (x - xm) * (y - ym)) / sxx)
    if slope >= 0:
        raise FitError(f"non-decaying sector distribution (slope {slope:.3e})")
    delta = math.sqrt(-1.0 / (2.0 * slope))
    resid = float(
        np.sqrt(np.sum(w * (y - (ym + slope * (x - xm))) ** 2) / np.sum(w))
    )
    return delta, FitDiagnostics(residual=resid, points=len(pts))


# -- growth fits -----------------------------------------------------------------


@dataclass
class GrowthFit:
    """Local tangent S_OP = S0 + eta * log2(t J) around t0."""

    t0: float
    eta: float
    s0: float
    window: tuple[float, float]
    points: int


def tangent_fit(
    series: list[tuple[float, float]],
    t0: float,
    window: tuple[float, float] | None = None,
    frac: float = 0.25,
) -> GrowthFit:
    """Linear regression of S_OP against log2(tJ) around t0.

    Without an explicit window, points within +-``frac`` of t0 in log
    time are used (t in [t0/(1+frac), t0*(1+frac)]).
    """
    ts = np.array([t for t, _ in series], dtype=float)
    ys = np.array([s for _, s in series], dtype=float)
    if np.any(np.diff(ts) <= 0):
        raise DataError("series times must be strictly increasing")
    if window is None:
        window = (t0 / (1.0 + frac), t0 * (1.0 + frac))
    lo, hi = window
    mask = (ts >= lo) & (ts <= hi) & (ts > 0)
    if int(np.sum(mask)) < 3:
        raise FitError(
            f"window [{lo:g}, {hi:g}] holds {int(np.sum(mask))} points; need >= 3"
        )
    x = np.log2(ts[mask])
    y = ys[mask]
    eta, s0 = np.polyfit(x, y, 1)
    return GrowthFit(t0=t0, eta=float(eta), s0=float(s0), window=(float(lo), float(hi)),
                     points=int(np.sum(mask)))


def peak_height(series: list[tuple[float, float]]) -> tuple[float, float]:
    """First local maximum, refined by quadratic interpolation."""
    ts = np.array([t for t, _ in series], dtype=float)
    ys = np.array([s for _, s in series], dtype=float)
    if ts.size < 3:
        raise NoPeakError("series too short for a peak")
    for i in range(1, ts.size - 1):
        if ys[i - 1] < ys[i] >= ys[i + 1]:
            denom = ys[i - 1] - 2 * ys[i] + ys[i + 1]
            if denom >= 0 or abs(denom) < 1e-300:
                return float(ts[i]), float(ys[i])
            shift = 0.5 * (ys[i - 1] - ys[i + 1]) / denom
            t_peak = ts[i] + shift * (ts[i + 1] - ts[i - 1]) / 2
            s_peak = ys[i] - 0.25 * (ys[i - 1] - ys[i + 1]) * shift
            return float(t_peak), float(s_peak)
    raise NoPeakError("series has no local maximum")


def smooth_log_time(
    series: list[tuple[float, float]], frac: float = 0.1
) -> list[tuple[float, float]]:
    """Centered moving average over a +-frac window in log time."""
    ts = np.array([t for t, _ in series], dtype=float)
    ys = np.array([s for _, s in series], dtype=float)
    out = []
    for i, t in enumerate(ts):
        if t <= 0:
            out.append((float(t), float(ys[i])))
            continue
        mask = (ts >= t / (1 + frac)) & (ts <= t * (1 + frac))
        out.append((float(t), float(np.mean(ys[mask]))))
    return out


# -- CSV schema -------------------------------------------------------------------


def csv_columns(m_max: int) -> list[str]:
    """Exact column order of the time-series CSV."""
    if m_max < 0 or m_max % 2 != 0:
        raise ParameterError("m_max must be a non-negative even integer")
    cols = ["t", "S_OP", "S_num", "delta"]
    ms = list(range(-m_max, m_max + 1, 2))
    cols += [f"p_{m}" for m in ms]
    cols += [f"S_res_{m}" for m in ms]
    return cols


def report_row(t: float, report: EntropyReport, m_max: int) -> list[str]:
    def fmt(x):
        return "" if x is None else f"{x:.17g}"

    ms = list(range(-m_max, m_max + 1, 2))
    row = [fmt(t), fmt(report.s_op), fmt(report.s_num), fmt(report.delta)]
    row += [fmt(report.p.get(m)) for m in ms]
    row += [fmt(report.s_res.get(m)) for m in ms]
    return row


class SeriesWriter:
    """Incremental writer for the contract CSV schema."""

    def __init__(self, fileobj, m_max: int):
        self.m_max = m_max
        self._writer = csv.writer(fileobj, lineterminator="\n")
        self._writer.writerow(csv_columns(m_max))
        self._fileobj = fileobj

    def write(self, t: float, report: EntropyReport):
        self._writer.writerow(report_row(t, report, self.m_max))
        self._fileobj.flush()


def read_series(path) -> dict[str, np.ndarray]:
    """Read a series CSV into named float arrays (empty fields become NaN)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    data = {}
    for j, name in enumerate(header):
        data[name] = np.array(
            [float(r[j]) if r[j] != "" else np.nan for r in rows], dtype=float
        )
    return data
