"""Fidelity estimators and readout fits for GHZ, Bell, cluster and graph states.

Rotated readout: a pi/2 pulse about the axis phi - pi/2 followed by a Z
measurement measures R(phi) = cos(phi) X + sin(phi) Y. A pi/4 pulse about the
same axis measures (Z + R(phi)) / sqrt(2).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidArgument, NoLaterData
from .fitting import PeriodicFit, check_coverage, fit_harmonic, fit_shape
from .statevec import (Distribution, QuantumState, ShotEnsemble, outcome_distribution,
                       rotate_sites)

TWO_PI = 2 * math.pi
_CLIP_TOL = 1e-12  # rounding noise is not reported as clipping


@dataclass
class ParitySweep:
    angles: np.ndarray
    values: np.ndarray
    n_qubits: int
    stderr: np.ndarray | None = None

    def __post_init__(self):
        self.angles = np.asarray(self.angles, float)
        self.values = np.asarray(self.values, float)
        if self.angles.shape != self.values.shape:
            raise InvalidArgument("angles and values must have the same length")
        if self.stderr is not None:
            self.stderr = np.asarray(self.stderr, float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["angle", "value", "stderr"])
        err = self.stderr if self.stderr is not None else np.zeros_like(self.values)
        for a, v, e in zip(self.angles, self.values, err):
            w.writerow([repr(float(a)), repr(float(v)), repr(float(e))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, n_qubits: int) -> "ParitySweep":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls(np.array([float(r["angle"]) for r in rows]),
                   np.array([float(r["value"]) for r in rows]), n_qubits,
                   np.array([float(r.get("stderr") or 0.0) for r in rows]))


@dataclass
class FidelityReport:
    population_term: float
    coherence_term: float
    fidelity: float
    raw_fidelity: float
    clipped: bool = False
    lower_bound: bool = False
    spam_corrected: bool = False
    postselected_fraction: float | None = None
    params: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=float)


def _report(population: float, coherence: float, raw: float, **kw) -> FidelityReport:
    clipped = not -_CLIP_TOL <= raw <= 1.0 + _CLIP_TOL
    return FidelityReport(population, coherence, min(max(raw, 0.0), 1.0), raw, clipped, **kw)


def _as_outcomes(data):
    if isinstance(data, QuantumState):
        return outcome_distribution(data)
    if isinstance(data, (Distribution, ShotEnsemble)):
        return data
    raise InvalidArgument(f"unsupported outcome record {type(data).__name__}")


def postselect(data, sites: Sequence[int]):
    """Keep outcomes with every listed site reading '0'; returns (record, kept fraction)."""
    data = _as_outcomes(data)
    sites = list(sites)
    if isinstance(data, ShotEnsemble):
        keep = ~data.bits[:, sites].any(axis=1) if sites else np.ones(data.n_shots, bool)
        frac = float(keep.mean()) if data.n_shots else 0.0
        out = data.select(keep)
        out.meta["postselected"] = True
        return out, frac
    t = data.probs.reshape((2,) * data.n_sites).copy()
    mask = np.ones_like(t, dtype=bool)
    for s in sites:
        idx = [slice(None)] * data.n_sites
        idx[s] = 1
        mask[tuple(idx)] = False
    kept = float(t[mask].sum())
    t[~mask] = 0.0
    if kept > 0:
        t /= kept
    return Distribution(t.reshape(-1), data.n_sites, {**data.meta, "postselected": True}), kept


# --------------------------------------------------------------------------
# GHZ

def readout_state(state: QuantumState, sites: Sequence[int], theta: float, axis_phase: float) -> QuantumState:
    return rotate_sites(state, sites, theta, axis_phase)


def parity_sweep_exact(state: QuantumState, sites: Sequence[int], angles: Sequence[float]) -> ParitySweep:
    """B(phi) = <R(phi)^N> on ``sites`` from the exact state."""
    vals = []
    for phi in angles:
        rotated = readout_state(state, sites, math.pi / 2, phi - math.pi / 2)
        vals.append(outcome_distribution(rotated).parity(sites))
    return ParitySweep(np.asarray(angles, float), np.array(vals), len(sites))


def parity_sweep_sampled(state: QuantumState, sites: Sequence[int], angles: Sequence[float],
                         n_shots: int, rng: np.random.Generator) -> ParitySweep:
    vals, errs = [], []
    for phi in angles:
        rotated = readout_state(state, sites, math.pi / 2, phi - math.pi / 2)
        shots = outcome_distribution(rotated).sample(n_shots, rng)
        vals.append(shots.parity(sites))
        errs.append(shots.parity_stderr(sites))
    return ParitySweep(np.asarray(angles, float), np.array(vals), len(sites), np.array(errs))


def _pattern(pattern: str | None, n: int) -> str:
    p = pattern if pattern is not None else "0" * n
    if len(p) != n or set(p) - {"0", "1"}:
        raise InvalidArgument("pattern must be a bitstring over the target sites")
    return p


def _complement(p: str) -> str:
    return "".join("1" if c == "0" else "0" for c in p)


def harmonic_order(pattern: str) -> int:
    """Parity harmonic carrying the |a><abar| coherence: |#0 - #1| in the pattern."""
    return abs(pattern.count("0") - pattern.count("1"))


def ghz_population(data, sites: Sequence[int], pattern: str | None = None) -> float:
    data = _as_outcomes(data)
    p = _pattern(pattern, len(sites))
    return data.pattern_probability(sites, p) + data.pattern_probability(sites, _complement(p))


def fit_parity(sweep: ParitySweep, order: int) -> PeriodicFit:
    check_coverage(sweep.angles, TWO_PI / order)
    w = None
    if sweep.stderr is not None and np.all(sweep.stderr > 0):
        w = 1 / sweep.stderr**2
    return fit_harmonic(sweep.angles, sweep.values, order, weights=w)


def ghz_fidelity(population, sweep: ParitySweep, sites: Sequence[int], pattern: str | None = None,
                 spam_corrected: bool = False) -> FidelityReport:
    """F >= Q - 1/2 + max(B)/2 with B fitted by a cosine of period 2 pi / N plus offset.

    ``pattern`` generalizes the target to |a> + e^{i phi}|abar>; the fitted
    harmonic is then |#0 - #1| of a.
    """
    p = _pattern(pattern, len(sites))
    order = harmonic_order(p)
    if order == 0:
        raise InvalidArgument("pattern with equal 0/1 counts has no parity signature")
    q = ghz_population(population, sites, p)
    fit = fit_parity(sweep, order)
    max_b = fit.amplitude + fit.offset
    raw = q - 0.5 + 0.5 * max_b
    return _report(q, max_b, raw, spam_corrected=spam_corrected,
                   params={"amplitude": fit.amplitude, "phase": fit.phase, "offset": fit.offset,
                           "order": order})


def ghz_dual_species_bound(reports: Sequence[FidelityReport | None], t0: int) -> FidelityReport:
    """Bound at step t0 using the best parity amplitude of any later step."""
    if not 0 <= t0 < len(reports) or reports[t0] is None:
        raise InvalidArgument("no population data at t0")
    later = [r.coherence_term for r in reports[t0 + 1:] if r is not None]
    if not later:
        raise NoLaterData(f"no parity data after step {t0}")
    q = reports[t0].population_term
    best = max(later)
    return _report(q, best, q - 0.5 + 0.5 * best, lower_bound=True,
                   params={"source_steps": [t for t in range(t0 + 1, len(reports)) if reports[t] is not None]})


def exact_ghz_overlap(state: QuantumState, sites: Sequence[int], pattern: str | None = None) -> float:
    """max_phi <GHZ_a(phi)| rho_sites |GHZ_a(phi)> = (rho_aa + rho_bb)/2 + |rho_ab|."""
    p = _pattern(pattern, len(sites))
    t = state.tensor()
    n = state.n_sites
    others = [k for k in range(n) if k not in sites]
    mat = np.transpose(t, list(sites) + others).reshape(2 ** len(sites), -1)
    ia, ib = int(p, 2), int(_complement(p), 2)
    va, vb = mat[ia], mat[ib]
    return float((np.vdot(va, va).real + np.vdot(vb, vb).real) / 2 + abs(np.vdot(vb, va)))


def ghz_support(branch_a: str, branch_b: str) -> tuple[list[int], str]:
    """Sites where two classical branches differ, and branch_a restricted to them."""
    sites = [k for k, (x, y) in enumerate(zip(branch_a, branch_b)) if x != y]
    return sites, "".join(branch_a[k] for k in sites)


# --------------------------------------------------------------------------
# Bell pair

@dataclass
class BellFit:
    a: float  # 2 A B^2
    b: float  # 4 A B
    theta_star: float
    sse: float

    @property
    def B(self) -> float:
        return 2 * self.a / self.b if self.b else math.nan

    @property
    def A(self) -> float:
        return self.b**2 / (8 * self.a) if self.a else math.nan

    def r(self, theta):
        u = np.asarray(theta, float) - self.theta_star
        return self.a * np.sin(u) ** 2 + self.b * np.cos(u)

    def w(self, theta):
        c = np.cos(np.asarray(theta, float) - self.theta_star)
        return 0.5 * self.a * c**2 + 0.5 * self.b * c

    def max_w(self) -> float:
        cands = [-1.0, 1.0]
        if self.a < 0 and abs(self.b) <= -2 * self.a:
            cands.append(-self.b / (2 * self.a))
        return max(0.5 * self.a * c * c + 0.5 * self.b * c for c in cands)


def r_fit(theta, A: float, B: float, theta_star: float):
    u = np.asarray(theta, float) - theta_star
    return 2 * A * B * (B * np.sin(u) ** 2 + 2 * np.cos(u))


def _bell_linear(theta: np.ndarray, r: np.ndarray, ts: float) -> tuple[float, float, float]:
    u = theta - ts
    design = np.stack([np.sin(u) ** 2, np.cos(u)], axis=1)
    coef, *_ = np.linalg.lstsq(design, r, rcond=None)
    resid = r - design @ coef
    return float(coef[0]), float(coef[1]), float(resid @ resid)


def fit_bell_r(theta, r, n_grid: int = 256) -> BellFit:
    """Grid over theta*, inner linear solve for (2AB^2, 4AB), bounded polish; b >= 0 branch."""
    from scipy.optimize import minimize_scalar

    theta = np.asarray(theta, float)
    r = np.asarray(r, float)
    grid = np.linspace(0, TWO_PI, n_grid, endpoint=False)
    sse = [_bell_linear(theta, r, g)[2] for g in grid]
    best = grid[int(np.argmin(sse))]
    step = TWO_PI / n_grid
    res = minimize_scalar(lambda g: _bell_linear(theta, r, g)[2], bounds=(best - step, best + step),
                          method="bounded", options={"xatol": 1e-12})
    ts = float(res.x)
    a, b, err = _bell_linear(theta, r, ts)
    if b < 0:  # same curve with B -> -B, theta* -> theta* + pi
        ts += math.pi
        b = -b
    return BellFit(a, b, ts % TWO_PI, err)


def bell_r_exact(state: QuantumState, sites: Sequence[int], angles: Sequence[float]) -> ParitySweep:
    """r(theta) = <((R(theta) + Z)/sqrt 2)^{x2}> via a pi/4 pulse about theta - pi/2."""
    vals = []
    for th in angles:
        rotated = readout_state(state, sites, math.pi / 4, th - math.pi / 2)
        vals.append(outcome_distribution(rotated).parity(sites))
    return ParitySweep(np.asarray(angles, float), np.array(vals), len(sites))


def bell_fidelity(population, r_sweep: ParitySweep, sites: Sequence[int] = (0, 1),
                  residual_threshold: float = 1e-3, spam_corrected: bool = False,
                  postselected_fraction: float | None = None) -> FidelityReport:
    """F_C = (1 - P)/4 + max W, with W taken from the r_fit model."""
    if len(r_sweep.angles) < 12:
        raise InvalidArgument("r sweep needs at least 12 angles")
    check_coverage(r_sweep.angles, TWO_PI, min_points=12)
    pop = _as_outcomes(population)
    p_zz = pop.parity(list(sites))
    fit = fit_bell_r(r_sweep.angles, r_sweep.values)
    max_w = fit.max_w()
    raw = (1 - p_zz) / 4 + max_w
    warnings = []
    rms = math.sqrt(fit.sse / len(r_sweep.angles))
    if rms > residual_threshold:
        warnings.append(f"r_fit rms residual {rms:.3g} above {residual_threshold:g}")
    return _report(p_zz, max_w, raw, spam_corrected=spam_corrected,
                   postselected_fraction=postselected_fraction,
                   params={"A": fit.A, "B": fit.B, "theta_star": fit.theta_star, "rms_residual": rms},
                   warnings=warnings)


# --------------------------------------------------------------------------
# cluster stabilizers and graph-state operators

def even_odd_readout(state: QuantumState, data_sites: Sequence[int], alpha: float,
                     rotated_class: str) -> Distribution:
    """Rotate data sites of one parity class (by data index) into the R(alpha) basis."""
    if rotated_class not in ("even", "odd"):
        raise InvalidArgument("rotated_class must be 'even' or 'odd'")
    start = 0 if rotated_class == "even" else 1
    rotated = readout_state(state, list(data_sites)[start::2], math.pi / 2, alpha - math.pi / 2)
    dist = outcome_distribution(rotated)
    dist.meta.update({"rotated_class": rotated_class, "alpha": alpha})
    return dist


def _check_class(records: Sequence, expected: str) -> None:
    for rec in records:
        tag = getattr(rec, "meta", {}).get("rotated_class")
        if tag is not None and tag != expected:
            raise InvalidArgument(f"ensemble labelled {tag!r} passed as {expected!r}")


@dataclass
class StabilizerValue:
    index: int
    value: float  # fitted |A|
    phase: float
    offset: float
    boundary: bool
    fit: PeriodicFit


def stabilizer_scan(even_ensembles: Sequence, odd_ensembles: Sequence, alpha_grid: Sequence[float],
                    data_sites: Sequence[int]) -> list[StabilizerValue]:
    """<Z_{i-1} R_i(alpha) Z_{i+1}> per data index i, fitted with A cos(alpha - alpha0) + C."""
    alpha_grid = np.asarray(alpha_grid, float)
    if alpha_grid.size < 8:
        raise InvalidArgument("alpha grid needs at least 8 points")
    if len(even_ensembles) != alpha_grid.size or len(odd_ensembles) != alpha_grid.size:
        raise InvalidArgument("one ensemble per alpha value is required")
    _check_class(even_ensembles, "even")
    _check_class(odd_ensembles, "odd")
    data_sites = list(data_sites)
    n = len(data_sites)
    out = []
    for i in range(n):
        group = even_ensembles if i % 2 == 0 else odd_ensembles
        support = [data_sites[k] for k in (i - 1, i, i + 1) if 0 <= k < n]
        vals = [_as_outcomes(g).parity(support) for g in group]
        fit = fit_harmonic(alpha_grid, vals, 1)
        out.append(StabilizerValue(i, fit.amplitude, fit.phase, fit.offset, i in (0, n - 1), fit))
    return out


def boundary_phase_shift(values: Sequence[StabilizerValue]) -> tuple[float, float]:
    """Fitted phase offset of each end stabilizer relative to the bulk mean, wrapped to (-pi, pi]."""
    bulk = [v.phase for v in values if not v.boundary]
    if not bulk:
        raise InvalidArgument("need bulk stabilizers for a reference phase")
    ref = math.atan2(np.mean(np.sin(bulk)), np.mean(np.cos(bulk)))
    ends = [v for v in values if v.boundary]
    return tuple(math.remainder(v.phase - ref, TWO_PI) for v in ends)


def witness_cuts(values: Sequence[float], threshold: float = 0.5) -> list[bool]:
    """Cut between data sites i and i+1 is certified when S_i and S_{i+1} both exceed the threshold."""
    return [values[i] > threshold and values[i + 1] > threshold for i in range(len(values) - 1)]


# Operators with non-zero ideal expectation per step of the native graph
# automaton on five data atoms: (labels, fit shape, ideal |A| + |C|)
GRAPH_OPERATOR_TABLE: dict[int, list[tuple[tuple[str, ...], str, float]]] = {
    0: [(("IIIIZ", "IIIZI", "IIZII", "IZIII", "ZIIII", "IIZIZ", "IZIZI", "ZIIIZ", "ZIZII", "ZIZIZ"),
         "na", 1.0)],
    1: [(("IIIZR", "RZIII", "IIZRZ", "IZRZI", "ZRZII"), "cos", 1.0),
        (("RZIZR",), "cos2", 1.0),
        (("IZRIR", "RIRZI"), "cos2", 0.5),
        (("RIRIR",), "cos2sin", 2 / (3 * math.sqrt(3)))],
    2: [(("IIZRI", "IRZII"), "cos", 1.0),
        (("IRIRI", "RIIIR", "IZRZR", "RZRZI"), "cos2", 1.0),
        (("RZRZR",), "cos3", 1.0)],
    3: [(("IZIZI", "ZIIIZ"), "na", 1.0),
        (("IIRZI", "IZRII"), "cos", 1.0),
        (("RIIZR", "RZIIR", "IRZRZ", "ZRZRI"), "cos2", 1.0),
        (("RIRIR", "RZRZR"), "cos2sin", 4 / (3 * math.sqrt(3)))],
    4: [(("IIIRZ", "ZRIII"), "cos", 1.0),
        (("ZRIRZ", "RZIZR"), "cos2", 1.0),
        (("IIRZR", "RZRII"), "cos2", 0.5),
        (("RZRZR",), "cos2sin", 2 / (3 * math.sqrt(3)))],
    5: [(("IIIIR", "IIIRI", "IIRII", "IRIII", "RIIII"), "cos", 1.0),
        (("IIRIR", "IRIRI", "RIIIR", "RIRII"), "cos2", 1.0),
        (("RIRIR",), "cos3", 1.0)],
}


def operator_class(label: str) -> str:
    """Which data-parity class must be rotated to read ``label`` in one shot."""
    r_par = {k % 2 for k, c in enumerate(label) if c == "R"}
    z_par = {k % 2 for k, c in enumerate(label) if c == "Z"}
    if len(r_par) > 1 or len(z_par) > 1 or (r_par and z_par and r_par == z_par):
        raise InvalidArgument(f"{label} cannot be read with a single even/odd rotation")
    if r_par:
        par = r_par.pop()
    elif z_par:
        par = 1 - z_par.pop()
    else:
        par = 0
    return "even" if par == 0 else "odd"


def operator_curve(label: str, even_ensembles: Sequence, odd_ensembles: Sequence,
                   data_sites: Sequence[int]) -> np.ndarray:
    if set(label) - {"I", "Z", "R"}:
        raise InvalidArgument(f"unknown operator label {label!r}")
    if len(label) != len(data_sites):
        raise InvalidArgument("label length must match the number of data sites")
    group = even_ensembles if operator_class(label) == "even" else odd_ensembles
    support = [data_sites[k] for k, c in enumerate(label) if c != "I"]
    return np.array([_as_outcomes(g).parity(support) for g in group])


@dataclass
class OperatorValue:
    label: str
    shape: str
    value: float
    stderr: float
    ideal: float
    fit: PeriodicFit | None


def graph_operator_scan(even_ensembles: Sequence, odd_ensembles: Sequence, alpha_grid: Sequence[float],
                        time_step: int, data_sites: Sequence[int],
                        operators: Sequence[str] | None = None) -> list[OperatorValue]:
    """Fit every tabulated operator of ``time_step``; value is |A| + |C| or |mean| for 'na' rows."""
    if time_step not in GRAPH_OPERATOR_TABLE:
        raise InvalidArgument(f"no operator table for step {time_step}")
    rows = {lab: (shape, ideal) for labels, shape, ideal in GRAPH_OPERATOR_TABLE[time_step] for lab in labels}
    wanted = list(operators) if operators is not None else list(rows)
    unknown = [w for w in wanted if w not in rows]
    if unknown:
        raise InvalidArgument(f"unknown operator label(s) for step {time_step}: {unknown}")
    alpha_grid = np.asarray(alpha_grid, float)
    _check_class(even_ensembles, "even")
    _check_class(odd_ensembles, "odd")
    out = []
    for lab in wanted:
        shape, ideal = rows[lab]
        y = operator_curve(lab, even_ensembles, odd_ensembles, data_sites)
        if shape == "na":
            sem = float(np.std(y, ddof=1) / math.sqrt(len(y))) if len(y) > 1 else 0.0
            out.append(OperatorValue(lab, shape, abs(float(np.mean(y))), sem, ideal, None))
            continue
        fit = fit_shape(alpha_grid, y, shape)
        dof = max(len(y) - 3, 1)
        out.append(OperatorValue(lab, shape, fit.peak, math.sqrt(fit.sse / dof), ideal, fit))
    return out
