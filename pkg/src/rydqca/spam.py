"""Readout and preparation error model: independent single-atom maps per species.

Outcome '1' means the atom was not recaptured (Rydberg); row/column 0 of each
2x2 map is the ground outcome/state.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidArgument, NonInvertibleModel
from .statevec import Distribution, ShotEnsemble


@dataclass(frozen=True)
class SpamParams:
    """Per-species error parameters. ``survival`` is the imaging survival F."""

    eta: float = 1.0
    false_positive: float = 0.0
    false_negative: float = 0.0
    survival: float = 1.0
    ground_detection: float = 1.0
    rydberg_detection: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not 0.0 <= v <= 1.0:
                raise InvalidArgument(f"{f.name} = {v} outside [0, 1]")

    @property
    def e0(self) -> float:
        """P(read '1' | ground)."""
        return (self.ground_detection * self.false_negative
                + (1 - self.ground_detection) * (1 - self.false_positive))

    @property
    def e1(self) -> float:
        """P(read '0' | Rydberg)."""
        return (self.rydberg_detection * self.false_positive
                + (1 - self.rydberg_detection) * (1 - self.false_negative))

    def to_dict(self) -> dict:
        return asdict(self)


# Short names used in config files
_ALIASES = {"F_p": "false_positive", "F_n": "false_negative", "S": "survival", "F": "survival",
            "D_g": "ground_detection", "D_r": "rydberg_detection"}


def params_from_dict(block: Mapping) -> SpamParams:
    kw = {}
    valid = {f.name for f in fields(SpamParams)}
    for k, v in block.items():
        name = _ALIASES.get(k, k)
        if name not in valid:
            raise InvalidArgument(f"unknown SPAM parameter {k!r}")
        kw[name] = float(v)
    return SpamParams(**kw)


def single_atom_map(p: SpamParams) -> np.ndarray:
    e0, e1, F, eta = p.e0, p.e1, p.survival, p.eta
    pumped = np.array([[1 - e0, e1], [e0, 1 - e1]])
    unpumped = np.array([[1 - e0, 1 - e0], [e0, e0]])
    lost = np.array([[e1, e1], [1 - e1, 1 - e1]])
    return F * eta * pumped + F * (1 - eta) * unpumped + (1 - F) * lost


@dataclass
class SpamModel:
    """Species-keyed parameters; maps are assembled in site order from a chain pattern."""

    params: dict[str, SpamParams]

    def site_maps(self, pattern: Sequence[str]) -> list[np.ndarray]:
        try:
            return [single_atom_map(self.params[s]) for s in pattern]
        except KeyError as exc:
            raise InvalidArgument(f"no SPAM parameters for species {exc.args[0]!r}") from None

    @classmethod
    def from_dict(cls, block: Mapping) -> "SpamModel":
        return cls({sp: params_from_dict(v) for sp, v in block.items()})

    @classmethod
    def ideal(cls) -> "SpamModel":
        return cls({"A": SpamParams(), "B": SpamParams()})


def _contract(probs: np.ndarray, maps: Sequence[np.ndarray]) -> np.ndarray:
    n = len(maps)
    t = probs.reshape((2,) * n)
    for k, m in enumerate(maps):
        t = np.moveaxis(np.tensordot(m, t, axes=([1], [k])), 0, k)
    return t.reshape(-1)


def _check_normalized(probs: np.ndarray, n: int) -> None:
    if probs.size != 2**n:
        raise InvalidArgument("distribution length does not match the chain")
    if abs(probs.sum() - 1.0) > 1e-9:
        raise InvalidArgument(f"distribution sums to {probs.sum():.12g}")


def forward(true_probs, pattern: Sequence[str], model: SpamModel) -> np.ndarray:
    """Measured distribution p = (A_0 x A_1 x ...) P, contracted site by site."""
    probs = np.asarray(getattr(true_probs, "probs", true_probs), float)
    _check_normalized(probs, len(pattern))
    return _contract(probs, model.site_maps(pattern))


@dataclass
class Correction:
    probs: np.ndarray
    clipped_mass: float
    raw: np.ndarray = field(repr=False, default=None)

    @property
    def clipped(self) -> bool:
        return self.clipped_mass > 0

    def distribution(self, n_sites: int, meta: dict | None = None) -> Distribution:
        return Distribution(self.probs, n_sites, {**(meta or {}), "spam_corrected": True,
                                                  "clipped_mass": self.clipped_mass})


def _inverses(pattern, model) -> list[np.ndarray]:
    out = []
    for site, m in enumerate(model.site_maps(pattern)):
        det = float(np.linalg.det(m))
        if abs(det) < 1e-12:
            raise NonInvertibleModel(f"SPAM map of site {site} is singular (det = {det:.3g})")
        out.append(np.linalg.inv(m))
    return out


def correct(measured, pattern: Sequence[str], model: SpamModel) -> Correction:
    """Local inversion; negative entries are clipped and the rest renormalized."""
    if isinstance(measured, ShotEnsemble):
        measured = measured.to_distribution()
    probs = np.asarray(getattr(measured, "probs", measured), float)
    _check_normalized(probs, len(pattern))
    raw = _contract(probs, _inverses(pattern, model))
    neg = raw < 0
    clipped_mass = float(-raw[neg].sum())
    est = np.where(neg, 0.0, raw)
    est /= est.sum()
    return Correction(est, clipped_mass, raw)


def corrected_z_moments(measured, pattern: Sequence[str], model: SpamModel,
                        sites: Sequence[int]) -> float:
    """SPAM-corrected <prod Z_i> over ``sites`` using only the marginal on those sites."""
    if isinstance(measured, ShotEnsemble):
        marg = measured.marginal(sites)
    else:
        if not isinstance(measured, Distribution):
            measured = Distribution(np.asarray(measured, float), len(pattern))
        marg = measured.marginal(sites)
    inv = _inverses([pattern[s] for s in sites], model)
    # sum_x z(x) (A^-1 p)(x) = (z^T A^-1) p, so each site contributes a row vector
    t = np.asarray(marg, float).reshape((2,) * len(sites))
    for k, m in enumerate(inv):
        row = np.array([1.0, -1.0]) @ m
        t = np.tensordot(row, t, axes=([0], [0]))
    return float(t)


# --------------------------------------------------------------------------
# calibration de-nesting

@dataclass(frozen=True)
class RawCalibration:
    eta: float
    false_positive: float
    false_negative: float
    survival: float
    ground_detection: float
    rydberg_detection: float


TABLE_RAW = {
    "B": RawCalibration(0.9903, 0.0063, 0.0076, 0.972, 0.959, 0.99),  # Cs
    "A": RawCalibration(0.9943, 0.0047, 0.0058, 0.987, 0.966, 0.94),  # Rb
}


def _clip01(x: float) -> float:
    return min(max(x, 0.0), 1.0)


def denest(raw: RawCalibration) -> SpamParams:
    """Corrected parameters from raw calibration numbers.

    Survival is freed from discrimination errors, ground detection from
    survival and discrimination (pumping does not change the ground outcome),
    and Rydberg detection from everything calibrated before it.
    """
    fp, fn, eta = raw.false_positive, raw.false_negative, raw.eta
    contrast = 1 - fp - fn
    if contrast <= 0:
        raise NonInvertibleModel("discrimination errors leave no contrast")
    S = _clip01((raw.survival - fp) / contrast)

    # ground calibration: P(read 0 | |0>) = S (1 - e0) + (1 - S) e1
    e1_raw = raw.rydberg_detection * fp + (1 - raw.rydberg_detection) * (1 - fn)
    one_minus_e0 = (raw.ground_detection - (1 - S) * e1_raw) / S
    e0 = 1 - one_minus_e0
    Dg = _clip01((1 - fp - e0) / contrast)

    # Rydberg calibration: P(read 1 | |1>) = S eta (1 - e1) + S (1 - eta) e0 + (1 - S)(1 - e1)
    e0c = Dg * fn + (1 - Dg) * (1 - fp)
    k = S * eta + (1 - S)
    one_minus_e1 = (raw.rydberg_detection - S * (1 - eta) * e0c) / k
    e1 = 1 - one_minus_e1
    Dr = _clip01((1 - fn - e1) / contrast)
    return SpamParams(eta, fp, fn, S, Dg, Dr)


def table_model(corrected: bool = True) -> SpamModel:
    params = {}
    for sp, raw in TABLE_RAW.items():
        if corrected:
            params[sp] = denest(raw)
        else:
            params[sp] = SpamParams(raw.eta, raw.false_positive, raw.false_negative, raw.survival,
                                    raw.ground_detection, raw.rydberg_detection)
    return SpamModel(params)


def with_param(model: SpamModel, species: str, **changes) -> SpamModel:
    return SpamModel({**model.params, species: replace(model.params[species], **changes)})
