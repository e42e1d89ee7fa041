"""Domain-wall detection and the statistics built on it.

Detector j (1 <= j <= L-1) looks at sites j-2 .. j+1: it fires on 0001, 1000 or
1001 in the bulk, on 001 over sites 0..2 for j = 1 and on 100 over the last
three sites for j = L-1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import curve_fit

from .errors import InvalidArgument
from .statevec import Distribution, QuantumState, ShotEnsemble, outcome_distribution


@dataclass(frozen=True)
class QuasiparticleRecord:
    shot_index: int
    positions: tuple[int, ...]

    @property
    def Q(self) -> int:
        return len(self.positions)


def _as_bits(bitstring) -> np.ndarray:
    if isinstance(bitstring, str):
        if set(bitstring) - {"0", "1"}:
            raise InvalidArgument(f"bad bitstring {bitstring!r}")
        return np.array([[int(c) for c in bitstring]], dtype=np.uint8)
    arr = np.asarray(bitstring, dtype=np.uint8)
    return arr[None, :] if arr.ndim == 1 else arr


def detector_matrix(bits: np.ndarray) -> np.ndarray:
    """Boolean (n_shots, L-1) array; column j-1 holds detector q_j."""
    bits = _as_bits(bits)
    L = bits.shape[1]
    if L < 4:
        raise InvalidArgument("quasiparticle detection needs at least 4 sites")
    n = bits.astype(bool)
    p = ~n
    out = np.zeros((bits.shape[0], L - 1), dtype=bool)
    out[:, 0] = p[:, 0] & p[:, 1] & n[:, 2]
    for j in range(2, L - 1):
        # P P P n + n P P P + n P P n  ==  P_{j-1} P_j (1 - P_{j-2} P_{j+1})
        out[:, j - 1] = p[:, j - 1] & p[:, j] & ~(p[:, j - 2] & p[:, j + 1])
    out[:, L - 2] = n[:, L - 3] & p[:, L - 2] & p[:, L - 1]
    return out


def detect(bitstring, shot_index: int = 0) -> QuasiparticleRecord:
    fired = detector_matrix(bitstring)[0]
    return QuasiparticleRecord(shot_index, tuple(int(j) + 1 for j in np.flatnonzero(fired)))


def _weighted(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, QuantumState):
        data = outcome_distribution(data)
    if isinstance(data, (Distribution, ShotEnsemble)):
        return data.weighted_bitstrings()
    raise InvalidArgument(f"unsupported outcome record {type(data).__name__}")


def quasiparticle_numbers(data) -> tuple[np.ndarray, np.ndarray]:
    """(Q per bitstring, weight per bitstring) for shots, distributions or states."""
    bits, w = _weighted(data)
    return detector_matrix(bits).sum(axis=1), w


def mean_quasiparticle_number(data) -> float:
    q, w = quasiparticle_numbers(data)
    return float(q @ w / w.sum())


@dataclass
class PositionHistogram:
    """Per-step detector counts over positions 1..L-1 for shots with Q = k.

    ``density[t]`` is None when no shot at step t had Q = k.
    """

    k: int
    counts: list[np.ndarray]
    n_conditioned: list[float]

    @property
    def density(self) -> list[np.ndarray | None]:
        return [c / n if n > 0 else None for c, n in zip(self.counts, self.n_conditioned)]

    def peak_positions(self) -> list[int | None]:
        out = []
        for d in self.density:
            out.append(None if d is None else int(np.argmax(d)) + 1)
        return out

    def rows(self):
        """CSV rows: step, position, count, n_conditioned."""
        for t, (c, n) in enumerate(zip(self.counts, self.n_conditioned)):
            for j, v in enumerate(c, start=1):
                yield t, j, float(v), float(n)


_NEGLIGIBLE = 1e-14


def position_histogram(per_step: Sequence, k: int) -> PositionHistogram:
    if k < 0:
        raise InvalidArgument("k must be >= 0")
    counts, conditioned = [], []
    for data in per_step:
        bits, w = _weighted(data)
        fired = detector_matrix(bits)
        keep = fired.sum(axis=1) == k
        if isinstance(data, ShotEnsemble):
            counts.append(fired[keep].sum(axis=0).astype(float))
            conditioned.append(float(keep.sum()))
        else:
            # probabilities at rounding level are not outcomes
            keep &= w > _NEGLIGIBLE
            counts.append(w[keep] @ fired[keep].astype(float))
            conditioned.append(float(w[keep].sum()))
    return PositionHistogram(k, counts, conditioned)


# --------------------------------------------------------------------------
# staggered magnetization

def staggered_magnetization(data, pattern: Sequence[str] | None = None) -> float:
    """<n>_A - <n>_B, species averages taken separately."""
    if isinstance(data, QuantumState):
        pattern = data.chain.pattern
        pops = data.populations()
    else:
        if pattern is None:
            raise InvalidArgument("pattern needed for outcome records")
        pops = data.populations()
    pattern = list(pattern)
    a = [p for p, s in zip(pops, pattern) if s == "A"]
    b = [p for p, s in zip(pops, pattern) if s == "B"]
    if not a or not b:
        raise InvalidArgument("staggered magnetization needs both species")
    return float(np.mean(a) - np.mean(b))


def magnetization_from_populations(populations: np.ndarray, pattern: Sequence[str]) -> np.ndarray:
    pops = np.atleast_2d(populations)
    is_a = np.array([s == "A" for s in pattern])
    return pops[:, is_a].mean(axis=1) - pops[:, ~is_a].mean(axis=1)


def classical_orbit(t) -> np.ndarray:
    """Staggered magnetization of the vacuum orbit, 0, 1, 1, 0, -1, -1, ..."""
    return 2 / math.sqrt(3) * np.sin(np.pi * np.asarray(t, dtype=float) / 3)


@dataclass
class DecayFit:
    amplitude: float
    tau: float
    tau_err: float
    n_points: int

    def model(self, t):
        return self.amplitude * np.exp(-np.asarray(t, float) / self.tau) * classical_orbit(t)


def fit_magnetization_decay(steps: Sequence[float], m: Sequence[float],
                            sigma: Sequence[float] | None = None, tau0: float = 50.0) -> DecayFit:
    """Fit A exp(-t/tau) * classical orbit; tau is in pulses."""
    t = np.asarray(steps, float)
    y = np.asarray(m, float)
    s = None
    if sigma is not None:
        s = np.maximum(np.asarray(sigma, float), 1e-6)

    def model(tt, amp, rate):
        return amp * np.exp(-tt * rate) * classical_orbit(tt)

    popt, pcov = curve_fit(model, t, y, p0=[1.0, 1 / tau0], sigma=s, absolute_sigma=s is not None,
                           maxfev=20000)
    amp, rate = popt
    rate_err = math.sqrt(max(pcov[1, 1], 0.0)) if np.all(np.isfinite(pcov)) else math.inf
    tau = 1 / rate if rate != 0 else math.inf
    return DecayFit(float(amp), float(tau), float(rate_err / rate**2) if rate else math.inf, len(t))


# --------------------------------------------------------------------------
# proliferation under over/under-rotation

@dataclass
class GrowthCurve:
    steps: np.ndarray
    mean_q: np.ndarray
    stderr: np.ndarray
    guide: tuple[float, float] | None = None  # (saturation, rate) of q_sat (1 - e^{-rate t})


def quasiparticle_growth(per_step: Sequence, exclude_mod3: bool = True, fit_guide: bool = False) -> GrowthCurve:
    """Mean Q per pulse count (index in ``per_step``); multiples of three dropped by default."""
    steps, means, errs = [], [], []
    for t, data in enumerate(per_step):
        if exclude_mod3 and t % 3 == 0:
            continue
        q, w = quasiparticle_numbers(data)
        w = w / w.sum()
        mean = float(q @ w)
        var = float(((q - mean) ** 2) @ w)
        n = data.n_shots if isinstance(data, ShotEnsemble) else math.inf
        steps.append(t)
        means.append(mean)
        errs.append(math.sqrt(var / n) if math.isfinite(n) and n > 0 else 0.0)
    curve = GrowthCurve(np.array(steps), np.array(means), np.array(errs))
    if fit_guide and len(steps) >= 3 and np.ptp(means) > 1e-9:
        try:
            popt, _ = curve_fit(lambda tt, a, r: a * (1 - np.exp(-r * tt)), curve.steps, curve.mean_q,
                                p0=[max(means), 0.1], maxfev=10000)
            curve.guide = (float(popt[0]), float(popt[1]))
        except RuntimeError:
            curve.guide = None
    return curve
