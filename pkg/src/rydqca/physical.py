"""Hamiltonian-level pulse simulation with finite blockade, vdW tails and noise.

Frequencies (Rabi, detuning, interactions) are ordinary MHz; the Hamiltonian is
assembled as 2 pi times

    H = sum_j (Omega_j / 2) (e^{i a}|1><0|_j + h.c.) - sum_j Delta_j n_j + sum_{i<j} V_ij n_i n_j

over the driven sites of one species. Decay rates are in 1/us. A pi pulse lasts
1 / (2 Omega) us.

Trajectories follow the standard jump unravelling: the state evolves under
H - (i/2) sum L^dag L until its squared norm drops below a uniform threshold,
then one jump is applied. Sites that are not driven in a segment only pick up
phases, so the propagator is block diagonal in their configuration; each block
is diagonalized once per (segment, set of lost atoms).
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import expm_multiply

from .errors import InvalidArgument, NumericalFailure
from .lattice import ChainSpec, interaction_matrix
from .rng import STREAM_FROZEN_NOISE, STREAM_TRAJECTORY, make_rng
from .statevec import Distribution, QuantumState, ShotEnsemble, outcome_distribution, vacuum

TWO_PI = 2 * math.pi
OMEGA_DEFAULT = 2.9
MASK_SHIFT_MHZ = 35.0
BISECT_RTOL = 1e-6
THREADS_ENV = "RYDQCA_THREADS"


def pi_time(omega: float = OMEGA_DEFAULT) -> float:
    return 1.0 / (2.0 * omega)


@dataclass(frozen=True)
class DriveSegment:
    species: str
    rabi: float
    duration: float
    detuning: float = 0.0
    axis_phase: float = 0.0
    mask: frozenset = frozenset()
    mask_shift: float = MASK_SHIFT_MHZ
    label: str = ""

    def __post_init__(self):
        if self.duration < 0 or not math.isfinite(self.duration):
            raise InvalidArgument(f"segment {self.label!r}: duration must be finite and >= 0")
        if self.rabi < 0:
            raise InvalidArgument(f"segment {self.label!r}: rabi must be >= 0")
        object.__setattr__(self, "mask", frozenset(int(s) for s in self.mask))

    @classmethod
    def pulse(cls, species: str, theta: float, omega: float = OMEGA_DEFAULT, **kw) -> "DriveSegment":
        """Resonant rotation by ``theta`` (duration theta / (2 pi Omega))."""
        return cls(species, omega, theta / (TWO_PI * omega), **kw)

    def to_dict(self) -> dict:
        return {"species": self.species, "rabi": self.rabi, "duration": self.duration,
                "detuning": self.detuning, "axis_phase": self.axis_phase, "mask": sorted(self.mask),
                "mask_shift": self.mask_shift, "label": self.label}


def segment_from_dict(block: Mapping) -> DriveSegment:
    kw = dict(block)
    omega = float(kw.pop("rabi", OMEGA_DEFAULT))
    if "theta" in kw:
        theta = float(kw.pop("theta"))
        if "duration" in kw:
            raise InvalidArgument("give either theta or duration, not both")
        kw["duration"] = theta / (TWO_PI * omega) if omega > 0 else 0.0
    kw["mask"] = frozenset(kw.get("mask", ()))
    try:
        return DriveSegment(rabi=omega, **kw)
    except TypeError as exc:
        raise InvalidArgument(f"bad drive segment {block!r}: {exc}") from None


@dataclass(frozen=True)
class IntermediateLevel:
    """Single-photon Rabi rates and intermediate detuning (MHz), linewidth (MHz)."""

    rabi_blue: float
    rabi_red: float
    detuning: float
    linewidth: float

    @property
    def decay_rate(self) -> float:
        return TWO_PI * self.linewidth

    def two_photon(self) -> float:
        return self.rabi_blue * self.rabi_red / (2 * abs(self.detuning))

    def scaled_to(self, omega: float) -> "IntermediateLevel":
        """Same ratio of single-photon rates, rescaled to a given two-photon Rabi frequency."""
        s = math.sqrt(omega / self.two_photon())
        return replace(self, rabi_blue=self.rabi_blue * s, rabi_red=self.rabi_red * s)

    def scattering_rates(self, omega: float) -> tuple[float, float]:
        """Effective loss rates (1/us) from |0> and |1> while driven."""
        lvl = self.scaled_to(omega)
        g = self.decay_rate
        return (g * (lvl.rabi_blue / (2 * lvl.detuning)) ** 2,
                g * (lvl.rabi_red / (2 * lvl.detuning)) ** 2)


DEFAULT_INTERMEDIATE = {
    "A": IntermediateLevel(109.0, 120.0, 2300.0, 1.4),
    "B": IntermediateLevel(124.0, 209.0, -4300.0, 1.2),
}
DEFAULT_INTENSITY_SIGMA = {"A": (0.014, 0.003), "B": (0.005, 0.005)}
DEFAULT_PSD_HZ = 1e4


def dephasing_from_psd(psd_hz: float) -> float:
    """White frequency noise of one-sided PSD S_f (Hz^2/Hz) -> coherence decay rate pi S_f, in 1/us."""
    return math.pi * psd_hz * 1e-6


@dataclass(frozen=True)
class NoiseConfig:
    lifetime: Mapping[str, float] = field(default_factory=dict)  # us; missing or inf = no decay
    dephasing_rate: Mapping[str, float] = field(default_factory=dict)  # 1/us
    intensity_sigma: Mapping[str, tuple] = field(default_factory=dict)  # relative, per laser
    position_sigma: float = 0.0  # um per axis
    intermediate: str = "off"  # off | effective | full
    intermediate_levels: Mapping[str, IntermediateLevel] = field(default_factory=lambda: dict(DEFAULT_INTERMEDIATE))
    n_trajectories: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.intermediate not in ("off", "effective", "full"):
            raise InvalidArgument(f"intermediate must be off, effective or full, not {self.intermediate!r}")
        if self.n_trajectories < 1:
            raise InvalidArgument("n_trajectories must be >= 1")
        if self.position_sigma < 0:
            raise InvalidArgument("position_sigma must be >= 0")
        for name in ("lifetime", "dephasing_rate"):
            for sp_, v in getattr(self, name).items():
                if v < 0:
                    raise InvalidArgument(f"{name}[{sp_}] must be >= 0")
        for sp_, sig in self.intensity_sigma.items():
            if any(s < 0 for s in np.atleast_1d(sig)):
                raise InvalidArgument(f"intensity_sigma[{sp_}] must be >= 0")

    @classmethod
    def standard(cls, n_trajectories: int = 100, seed: int = 0, intermediate: str = "effective") -> "NoiseConfig":
        gamma = dephasing_from_psd(DEFAULT_PSD_HZ)
        return cls(lifetime={"A": 100.0, "B": 100.0}, dephasing_rate={"A": gamma, "B": gamma},
                   intensity_sigma=dict(DEFAULT_INTENSITY_SIGMA), position_sigma=0.1,
                   intermediate=intermediate, n_trajectories=n_trajectories, seed=seed)

    def decay_rate(self, species: str) -> float:
        tau = self.lifetime.get(species, math.inf)
        return 0.0 if tau in (0, math.inf) or tau is None else 1.0 / tau

    @property
    def has_jumps(self) -> bool:
        return (any(self.decay_rate(s) > 0 for s in self.lifetime)
                or any(v > 0 for v in self.dephasing_rate.values())
                or self.intermediate != "off")

    @property
    def has_frozen_noise(self) -> bool:
        return self.position_sigma > 0 or any(np.any(np.asarray(v) > 0) for v in self.intensity_sigma.values())

    @property
    def is_deterministic(self) -> bool:
        return not (self.has_jumps or self.has_frozen_noise)

    def to_dict(self) -> dict:
        return {"lifetime": dict(self.lifetime), "dephasing_rate": dict(self.dephasing_rate),
                "intensity_sigma": {k: list(np.atleast_1d(v)) for k, v in self.intensity_sigma.items()},
                "position_sigma": self.position_sigma, "intermediate": self.intermediate,
                "n_trajectories": self.n_trajectories, "seed": self.seed}


def noise_from_dict(block: Mapping) -> NoiseConfig:
    kw = dict(block)
    preset = kw.pop("preset", None)
    base = NoiseConfig.standard() if preset == "standard" else NoiseConfig()
    if preset not in (None, "standard", "none"):
        raise InvalidArgument(f"unknown noise preset {preset!r}")
    if "psd_hz" in kw:
        g = dephasing_from_psd(float(kw.pop("psd_hz")))
        kw.setdefault("dephasing_rate", {"A": g, "B": g})
    if "intensity_sigma" in kw:
        kw["intensity_sigma"] = {k: tuple(np.atleast_1d(v)) for k, v in kw["intensity_sigma"].items()}
    if "intermediate_levels" in kw:
        kw["intermediate_levels"] = {k: IntermediateLevel(**v) for k, v in kw["intermediate_levels"].items()}
    try:
        return replace(base, **kw)
    except TypeError as exc:
        raise InvalidArgument(f"bad noise block: {exc}") from None


@dataclass(frozen=True)
class FrozenNoise:
    """Per-shot draws: absolute site positions and a Rabi scale per species."""

    positions: np.ndarray
    omega_scale: Mapping[str, float]

    @classmethod
    def none(cls, chain: ChainSpec) -> "FrozenNoise":
        return cls(chain.positions(), {s: 1.0 for s in set(chain.pattern)})


def sample_frozen_noise(chain: ChainSpec, noise: NoiseConfig, rng: np.random.Generator) -> FrozenNoise:
    pos = chain.positions() + rng.normal(0.0, noise.position_sigma, size=(chain.n_sites, 3)) \
        if noise.position_sigma > 0 else chain.positions()
    scale = {}
    for s in sorted(set(chain.pattern)):
        sig = np.atleast_1d(noise.intensity_sigma.get(s, 0.0)).astype(float)
        eps = rng.normal(0.0, 1.0, size=sig.size) * sig
        # two-photon Rabi frequency goes as the square root of the intensity product
        scale[s] = float(np.sqrt(np.prod(np.clip(1 + eps, 0.0, None))))
    return FrozenNoise(pos, scale)


# --------------------------------------------------------------------------
# Hamiltonian pieces

@dataclass(frozen=True)
class EngineOptions:
    """Model switches: interaction range cut (in lattice steps) and a C6 multiplier."""

    max_range: int | None = None
    c6_scale: float = 1.0


def _level_table(dims: Sequence[int]) -> np.ndarray:
    """(n_sites, dim) array of per-site level indices, site 0 most significant."""
    dims = list(dims)
    total = math.prod(dims)
    idx = np.arange(total)
    out = np.empty((len(dims), total), dtype=np.int8)
    stride = total
    for k, d in enumerate(dims):
        stride //= d
        out[k] = (idx // stride) % d
    return out


def _coupling(chain: ChainSpec, frozen: FrozenNoise, opts: EngineOptions) -> np.ndarray:
    return opts.c6_scale * interaction_matrix(chain, frozen.positions, opts.max_range)


def _single_site_drive(dim: int, omega: float, phase: float, level: IntermediateLevel | None) -> np.ndarray:
    """Drive term (MHz) on one site; three-level sites use the two-leg ladder."""
    h = np.zeros((dim, dim), dtype=complex)
    if dim == 2:
        h[1, 0] = omega / 2 * np.exp(1j * phase)
        h[0, 1] = np.conj(h[1, 0])
        return h
    lvl = level.scaled_to(omega)
    sign = 1.0 if lvl.detuning > 0 else -1.0
    h[1, 0] = lvl.rabi_blue / 2 * np.exp(1j * phase)
    h[2, 1] = sign * lvl.rabi_red / 2
    h += np.triu(h.conj().T, 1)
    h[1, 1] = -lvl.detuning
    # cancel the differential light shift of |1> relative to |0>
    h[2, 2] = -(lvl.rabi_red**2 - lvl.rabi_blue**2) / (4 * lvl.detuning)
    return h


@dataclass
class _SegmentModel:
    """Everything needed to propagate one segment for a fixed set of lost atoms."""

    driven: list[int]
    diag_energy: np.ndarray  # MHz, full space
    decay_diag: np.ndarray  # sum of L^dag L diagonals, 1/us
    drive_ops: dict[int, np.ndarray]  # site -> local drive matrix (MHz)
    channels: list[tuple[str, int, float, int, int]]  # (kind, site, rate, from_level, to_level or -1)


def _segment_model(state: QuantumState, seg: DriveSegment, frozen: FrozenNoise, noise: NoiseConfig,
                   opts: EngineOptions, lost: Sequence[bool]) -> _SegmentModel:
    chain = state.chain
    dims = state.local_dims
    lev = _level_table(dims)
    n = chain.n_sites
    ryd = np.array([lev[j] == dims[j] - 1 for j in range(n)])
    vmat = _coupling(chain, frozen, opts)
    energy = np.zeros(state.dim)
    for i in range(n):
        for j in range(i + 1, n):
            if vmat[i, j]:
                energy += vmat[i, j] * (ryd[i] & ryd[j])
    driven = [j for j in chain.sites_of(seg.species)
              if j not in seg.mask and not lost[j]] if seg.rabi > 0 and chain.has_species(seg.species) else []
    for j in chain.sites_of(seg.species):
        if lost[j]:
            continue
        if j in seg.mask:
            energy += seg.mask_shift * ryd[j]
        elif driven:
            energy -= seg.detuning * ryd[j]

    decay = np.zeros(state.dim)
    channels = []
    for j in range(n):
        if lost[j]:
            continue
        s = chain.pattern[j]
        top = dims[j] - 1
        g1 = noise.decay_rate(s)
        if g1 > 0:
            decay += g1 * ryd[j]
            channels.append(("decay", j, g1, top, 0))
        gd = noise.dephasing_rate.get(s, 0.0)
        if gd > 0:
            decay += 2 * gd * ryd[j]
            channels.append(("dephasing", j, 2 * gd, top, -1))
        if dims[j] == 3:
            ge = noise.intermediate_levels[s].decay_rate
            decay += ge * (lev[j] == 1)
            channels.append(("intermediate", j, ge, 1, 0))
    omega_eff = {}
    if driven:
        omega_eff[seg.species] = seg.rabi * frozen.omega_scale.get(seg.species, 1.0)
        if noise.intermediate == "effective":
            r0, r1 = noise.intermediate_levels[seg.species].scattering_rates(seg.rabi)
            for j in driven:
                if dims[j] == 3:
                    raise InvalidArgument("effective intermediate model needs two-level sites")
                decay += r0 * (lev[j] == 0) + r1 * ryd[j]
                channels.append(("scatter", j, r0, 0, 0))
                channels.append(("scatter", j, r1, 1, 0))
    drive_ops = {}
    for j in driven:
        lvl = noise.intermediate_levels.get(seg.species) if dims[j] == 3 else None
        if dims[j] == 3 and lvl is None:
            raise InvalidArgument(f"no intermediate level for species {seg.species!r}")
        drive_ops[j] = _single_site_drive(dims[j], omega_eff[seg.species], seg.axis_phase, lvl)
    return _SegmentModel(driven, energy, decay, drive_ops, channels)


def _kron_site_op(op: np.ndarray, site: int, dims: Sequence[int]) -> sp.csr_matrix:
    left = math.prod(dims[:site])
    right = math.prod(dims[site + 1:])
    return sp.kron(sp.kron(sp.identity(left, format="csr"), sp.csr_matrix(op)),
                   sp.identity(right, format="csr"), format="csr")


def build_hamiltonian(chain: ChainSpec, segment: DriveSegment, frozen: FrozenNoise | None = None,
                      local_dims: Sequence[int] | None = None, noise: NoiseConfig | None = None,
                      options: EngineOptions | None = None,
                      lost_mask: Sequence[bool] | None = None) -> sp.csr_matrix:
    """Hermitian H in rad/us (2 pi times the MHz expression) as a sparse matrix."""
    dims = tuple(local_dims) if local_dims is not None else (2,) * chain.n_sites
    frozen = frozen or FrozenNoise.none(chain)
    noise = noise or NoiseConfig()
    lost = tuple(lost_mask) if lost_mask else (False,) * chain.n_sites
    dummy = QuantumState(chain, dims, _unit(math.prod(dims)))
    model = _segment_model(dummy, segment, frozen, noise, options or EngineOptions(), lost)
    h = sp.diags(model.diag_energy.astype(complex), format="csr")
    for j, op in model.drive_ops.items():
        h = h + _kron_site_op(op, j, dims)
    return (TWO_PI * h).tocsr()


def _unit(dim: int) -> np.ndarray:
    v = np.zeros(dim, dtype=complex)
    v[0] = 1
    return v


# --------------------------------------------------------------------------
# block propagator

class _BlockPropagator:
    """exp(-i H_eff t) for H_eff block diagonal over configurations of the undriven sites."""

    DENSE_LIMIT = 2048

    def __init__(self, model: _SegmentModel, dims: Sequence[int], label: str):
        self.label = label
        self.dims = tuple(dims)
        n = len(dims)
        self.driven = model.driven
        self.frozen_sites = [k for k in range(n) if k not in model.driven]
        self.perm = self.frozen_sites + self.driven
        self.inv_perm = list(np.argsort(self.perm))
        self.n_f = math.prod(dims[k] for k in self.frozen_sites)
        self.d_d = math.prod(dims[k] for k in self.driven)
        heff = TWO_PI * model.diag_energy - 0.5j * model.decay_diag
        self.diag = np.transpose(heff.reshape(self.dims), self.perm).reshape(self.n_f, self.d_d)
        self.hermitian = not np.any(model.decay_diag)
        self.mode = "diagonal"
        if not self.driven:
            return
        drive = np.zeros((self.d_d, self.d_d), dtype=complex)
        ddims = [dims[k] for k in self.driven]
        for pos, site in enumerate(self.driven):
            left = math.prod(ddims[:pos])
            right = math.prod(ddims[pos + 1:])
            drive += np.kron(np.kron(np.eye(left), model.drive_ops[site]), np.eye(right))
        drive *= TWO_PI
        if self.d_d > self.DENSE_LIMIT:
            self.mode = "krylov"
            self.drive_sparse = sp.csr_matrix(drive)
            return
        blocks = drive[None, :, :] + np.einsum("fi,ij->fij", self.diag, np.eye(self.d_d))
        self.mode = "eig"
        if self.hermitian:
            w, v = np.linalg.eigh(blocks)
            vinv = np.conj(np.swapaxes(v, 1, 2))
        else:
            w, v = np.linalg.eig(blocks)
            try:
                vinv = np.linalg.inv(v)
            except np.linalg.LinAlgError:
                vinv = None
            if vinv is None or not self._reconstructs(blocks, w, v, vinv):
                self.mode = "expm"
                self.blocks = blocks
                return
        self.w, self.v, self.vinv = w, v, vinv

    @staticmethod
    def _reconstructs(blocks, w, v, vinv) -> bool:
        rec = np.einsum("fij,fj,fjk->fik", v, w, vinv)
        scale = max(np.abs(blocks).max(), 1.0)
        return float(np.abs(rec - blocks).max()) < 1e-9 * scale

    def to_blocks(self, psi: np.ndarray) -> np.ndarray:
        return np.transpose(psi.reshape(self.dims), self.perm).reshape(self.n_f, self.d_d)

    def from_blocks(self, blocks: np.ndarray) -> np.ndarray:
        full_shape = [self.dims[k] for k in self.perm]
        return np.transpose(blocks.reshape(full_shape), self.inv_perm).reshape(-1)

    def apply_blocks(self, b: np.ndarray, t: float) -> np.ndarray:
        if t == 0:
            return b.copy()
        if self.mode == "diagonal":
            return b * np.exp(-1j * self.diag * t)
        if self.mode == "eig":
            c = np.einsum("fij,fj->fi", self.vinv, b)
            c *= np.exp(-1j * self.w * t)
            return np.einsum("fij,fj->fi", self.v, c)
        if self.mode == "expm":
            u = scipy.linalg.expm(-1j * t * self.blocks)
            return np.einsum("fij,fj->fi", u, b)
        out = np.empty_like(b)
        for f in range(self.n_f):
            if not np.any(b[f]):
                out[f] = 0
                continue
            h = self.drive_sparse + sp.diags(self.diag[f])
            out[f] = expm_multiply(-1j * t * h, b[f])
        return out

    def apply(self, psi: np.ndarray, t: float) -> np.ndarray:
        out = self.from_blocks(self.apply_blocks(self.to_blocks(psi), t))
        if not np.all(np.isfinite(out)):
            raise NumericalFailure("propagation produced non-finite amplitudes", self.label)
        return out


# --------------------------------------------------------------------------
# trajectories

@dataclass(frozen=True)
class Jump:
    time: float
    segment: int
    label: str
    kind: str
    site: int


@dataclass
class TrajectoryResult:
    final: QuantumState
    jumps: list[Jump]
    snapshots: list[QuantumState] | None = None
    frozen: FrozenNoise | None = None


def _apply_jump(psi: np.ndarray, dims: Sequence[int], site: int, from_level: int, to_level: int) -> np.ndarray:
    t = psi.reshape(dims)
    out = np.zeros_like(t)
    src = [slice(None)] * len(dims)
    src[site] = from_level
    if to_level < 0:
        out[tuple(src)] = t[tuple(src)]
    else:
        dst = list(src)
        dst[site] = to_level
        out[tuple(dst)] = t[tuple(src)]
    return out.reshape(-1)


def _channel_weight(psi: np.ndarray, dims, site: int, level: int) -> float:
    t = np.abs(psi.reshape(dims)) ** 2
    return float(np.take(t, level, axis=site).sum())


def evolve_trajectory(state: QuantumState, schedule: Sequence[DriveSegment], noise: NoiseConfig | None = None,
                      traj_seed: int = 0, *, options: EngineOptions | None = None,
                      frozen: FrozenNoise | None = None, record: bool = False) -> TrajectoryResult:
    """One stochastic trajectory; with ``record`` the normalized state after every segment is kept."""
    noise = noise or NoiseConfig()
    opts = options or EngineOptions()
    chain = state.chain
    dims = state.local_dims
    if noise.intermediate == "full" and not all(d == 3 for d in dims):
        raise InvalidArgument("full intermediate model needs three-level sites; see to_three_level")
    rng = make_rng(noise.seed, STREAM_TRAJECTORY, traj_seed)
    if frozen is None:
        frozen = sample_frozen_noise(chain, noise, make_rng(noise.seed, STREAM_FROZEN_NOISE, traj_seed)) \
            if noise.has_frozen_noise else FrozenNoise.none(chain)
    psi = state.amplitudes / state.norm()
    lost = list(state.lost_mask)
    threshold = rng.uniform()
    jumps: list[Jump] = []
    snaps = [] if record else None
    cache: dict = {}
    elapsed = 0.0
    for k, seg in enumerate(schedule):
        remaining = seg.duration
        while True:
            key = (replace(seg, label=""), tuple(lost))
            if key not in cache:
                model = _segment_model(state, seg, frozen, noise, opts, lost)
                cache[key] = (model, _BlockPropagator(model, dims, seg.label or f"segment {k}"))
            model, prop = cache[key]
            b0 = prop.to_blocks(psi)
            b_end = prop.apply_blocks(b0, remaining)
            if not np.all(np.isfinite(b_end)):
                raise NumericalFailure("non-finite amplitudes", seg.label or f"segment {k}")
            if not model.channels or np.vdot(b_end, b_end).real > threshold:
                psi = prop.from_blocks(b_end)
                break
            lo, hi = 0.0, remaining
            tol = BISECT_RTOL * max(seg.duration, 1e-12)
            while hi - lo > tol:
                mid = 0.5 * (lo + hi)
                bm = prop.apply_blocks(b0, mid)
                if np.vdot(bm, bm).real > threshold:
                    lo = mid
                else:
                    hi = mid
            psi = prop.from_blocks(prop.apply_blocks(b0, hi))
            weights = np.array([rate * _channel_weight(psi, dims, site, lvl)
                                for _, site, rate, lvl, _ in model.channels])
            if weights.sum() <= 0:
                raise NumericalFailure("norm decayed without an active jump channel", seg.label or f"segment {k}")
            pick = int(rng.choice(len(weights), p=weights / weights.sum()))
            kind, site, _, lvl, dest = model.channels[pick]
            psi = _apply_jump(psi, dims, site, lvl, dest)
            psi /= np.linalg.norm(psi)
            if dest >= 0:
                lost[site] = True
            jumps.append(Jump(elapsed + seg.duration - remaining + hi, k, seg.label, kind, site))
            remaining -= hi
            threshold = rng.uniform()
        elapsed += seg.duration
        if record:
            snaps.append(state.with_amplitudes(psi / np.linalg.norm(psi), tuple(lost)))
    final = state.with_amplitudes(psi / np.linalg.norm(psi), tuple(lost))
    return TrajectoryResult(final, jumps, snaps, frozen)


def evolve_unitary(state: QuantumState, schedule: Sequence[DriveSegment],
                   options: EngineOptions | None = None) -> QuantumState:
    """Closed-system evolution by sparse exponentials of the full Hamiltonian (reference path)."""
    psi = state.amplitudes.copy()
    for seg in schedule:
        h = build_hamiltonian(state.chain, seg, local_dims=state.local_dims, options=options,
                              lost_mask=state.lost_mask)
        psi = expm_multiply(-1j * seg.duration * h, psi)
    return state.with_amplitudes(psi)


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


@dataclass
class TrajectoryEnsemble:
    """Per-recorded-step results aggregated over trajectories."""

    populations: np.ndarray  # (n_steps, n_sites), trajectory mean
    stderr: np.ndarray
    trajectories: list[TrajectoryResult]

    def step_states(self, step: int) -> list[QuantumState]:
        return [tr.snapshots[step] for tr in self.trajectories]

    def distribution(self, step: int, transform=None) -> Distribution:
        """Readout distribution averaged over trajectories, optionally after ``transform(state)``."""
        states = self.step_states(step)
        probs = np.zeros(2 ** states[0].n_sites)
        for st in states:
            probs += outcome_distribution(transform(st) if transform else st).probs
        return Distribution(probs / len(states), states[0].n_sites, {"step": step})

    def sample(self, step: int, shots_per_trajectory: int, seed: int, meta: dict | None = None) -> ShotEnsemble:
        from .rng import STREAM_SAMPLING

        blocks = []
        for t, st in enumerate(self.step_states(step)):
            rng = make_rng(seed, STREAM_SAMPLING, t, step)
            blocks.append(outcome_distribution(st).sample(shots_per_trajectory, rng).bits)
        info = {"step": step, "seed": seed}
        info.update(meta or {})
        return ShotEnsemble(np.concatenate(blocks, axis=0), info)


def run_trajectories(state: QuantumState, schedule: Sequence[DriveSegment], noise: NoiseConfig | None = None,
                     options: EngineOptions | None = None, threads: int | None = None) -> TrajectoryEnsemble:
    """Run ``noise.n_trajectories`` trajectories and record populations after each segment.

    Step 0 of the result is the input state. A deterministic noise model runs
    one trajectory and reuses it.
    """
    noise = noise or NoiseConfig()
    n_traj = 1 if noise.is_deterministic else noise.n_trajectories
    threads = threads or thread_count()

    def one(t):
        return evolve_trajectory(state, schedule, noise, t, options=options, record=True)

    if threads > 1 and n_traj > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, range(n_traj)))
    else:
        results = [one(t) for t in range(n_traj)]
    for r in results:
        r.snapshots.insert(0, state)
    pops = np.array([[_readout_populations(s) for s in r.snapshots] for r in results])
    mean = pops.mean(axis=0)
    err = pops.std(axis=0, ddof=1) / math.sqrt(n_traj) if n_traj > 1 else np.zeros_like(mean)
    return TrajectoryEnsemble(mean, err, results)


def _readout_populations(state: QuantumState) -> np.ndarray:
    return outcome_distribution(state).populations()


# --------------------------------------------------------------------------
# level-structure helpers

def to_three_level(state: QuantumState) -> QuantumState:
    t = state.tensor()
    for k, d in enumerate(state.local_dims):
        if d == 2:
            p = np.moveaxis(t, k, 0)
            t = np.moveaxis(np.stack([p[0], np.zeros_like(p[0]), p[1]]), 0, k)
    return QuantumState(state.chain, (3,) * state.n_sites, t.reshape(-1), state.lost_mask)


def project_qubits(state: QuantumState) -> QuantumState:
    """Drop |e> components (unnormalized when |e> is populated)."""
    t = state.tensor()
    for k, d in enumerate(state.local_dims):
        if d == 3:
            t = np.take(t, [0, 2], axis=k)
    return QuantumState(state.chain, (2,) * state.n_sites, t.reshape(-1), state.lost_mask)


# --------------------------------------------------------------------------
# schedules

def nnn_shift(chain: ChainSpec, species: str) -> float:
    """Interaction with a same-species atom two sites away (MHz)."""
    sites = chain.sites_of(species)
    if len(sites) < 2:
        return 0.0
    r = abs(sites[1] - sites[0]) * chain.spacing
    return chain.c6_between(sites[0], sites[1]) / r**6


def pxp_schedule(chain: ChainSpec, n_pulses: int, theta: float = math.pi, omega: float = OMEGA_DEFAULT,
                 first_species: str = "A", nnn_compensation: bool = True,
                 detuning_error: Mapping[str, float] | None = None) -> list[DriveSegment]:
    """Alternating global pulses. With compensation each species is detuned by its
    next-nearest-neighbour shift, so a flip surrounded by excited same-species
    atoms stays resonant; ``detuning_error`` is added on top."""
    if n_pulses < 0:
        raise InvalidArgument("n_pulses must be >= 0")
    err = dict(detuning_error or {})
    other = "B" if first_species == "A" else "A"
    out = []
    for k in range(n_pulses):
        s = first_species if k % 2 == 0 else other
        det = (nnn_shift(chain, s) if nnn_compensation else 0.0) + err.get(s, 0.0)
        out.append(DriveSegment.pulse(s, theta, omega, detuning=det, label=f"pulse {k + 1} ({s})"))
    return out


def mediated_schedule(delta: float, omega: float = OMEGA_DEFAULT, data: str = "B", aux: str = "A",
                      axis_phase: float = 0.0, with_init: bool = True, with_readout: bool = True) -> list[DriveSegment]:
    """pi/2 on data, U_delta, X on data, U_delta, pi/2 on data about the same axis.

    ``delta`` is the aux detuning in units of ``omega``; U_delta is one full
    generalized Rabi cycle of the aux atom.
    """
    det = delta * omega
    t_loop = 1.0 / math.hypot(omega, det)
    seq = []
    if with_init:
        seq.append(DriveSegment.pulse(data, math.pi / 2, omega, axis_phase=axis_phase, label="init pi/2"))
    seq += [DriveSegment(aux, omega, t_loop, detuning=det, label="U_delta 1"),
            DriveSegment.pulse(data, math.pi, omega, label="echo X"),
            DriveSegment(aux, omega, t_loop, detuning=det, label="U_delta 2")]
    if with_readout:
        seq.append(DriveSegment.pulse(data, math.pi / 2, omega, axis_phase=axis_phase, label="final pi/2"))
    return seq


# --------------------------------------------------------------------------
# studies

@dataclass
class DecayStudy:
    steps: np.ndarray
    magnetization: np.ndarray
    stderr: np.ndarray
    fit: object
    fit_window: int


def magnetization_decay(n_sites: int = 11, n_pulses: int = 30, noise: NoiseConfig | None = None,
                        nnn_compensation: bool = True, detuning_error: Mapping[str, float] | None = None,
                        fit_window: int = 30, chain: ChainSpec | None = None,
                        options: EngineOptions | None = None) -> DecayStudy:
    """Vacuum PXP orbit on the physical engine and a damped classical-orbit fit."""
    from .lattice import build_alternating_chain
    from .quasiparticle import fit_magnetization_decay, magnetization_from_populations

    chain = chain or build_alternating_chain(n_sites)
    sched = pxp_schedule(chain, n_pulses, nnn_compensation=nnn_compensation, detuning_error=detuning_error)
    ens = run_trajectories(vacuum(chain), sched, noise, options)
    traj_m = np.array([magnetization_from_populations(
        np.array([_readout_populations(s) for s in tr.snapshots]), chain.pattern) for tr in ens.trajectories])
    m = traj_m.mean(axis=0)
    err = traj_m.std(axis=0, ddof=1) / math.sqrt(len(traj_m)) if len(traj_m) > 1 else None
    steps = np.arange(len(m))
    w = min(fit_window, len(m) - 1)
    # unweighted: the spread vanishes at t = 0 and wherever the orbit crosses zero
    fit = fit_magnetization_decay(steps[:w + 1], m[:w + 1])
    return DecayStudy(steps, m, err if err is not None else np.zeros_like(m), fit, w)


@dataclass
class DetuningScan:
    grid: np.ndarray
    objective: np.ndarray
    delta_star: float
    best_index: int


def mediated_objective(delta: float, chain: ChainSpec, noise: NoiseConfig | None = None,
                       omega: float = OMEGA_DEFAULT, options: EngineOptions | None = None) -> float:
    """|<Z_1><Z_2>| on the two data atoms after the calibration sequence."""
    data = chain.sites_of("B")
    if len(data) != 2 or len(chain.sites_of("A")) != 1:
        raise InvalidArgument("detuning calibration needs a data-aux-data chain")
    ens = run_trajectories(vacuum(chain), mediated_schedule(delta, omega), noise, options)
    pops = ens.populations[-1]
    z = 1 - 2 * pops[list(data)]
    return float(abs(z[0] * z[1]))


def optimize_mediated_detuning(delta_grid: Sequence[float], chain: ChainSpec | None = None,
                               noise: NoiseConfig | None = None, omega: float = OMEGA_DEFAULT,
                               options: EngineOptions | None = None) -> DetuningScan:
    """Grid search over the aux detuning (units of Omega) with a parabolic refinement."""
    from .lattice import build_alternating_chain

    grid = np.asarray(list(delta_grid), float)
    if grid.size == 0:
        raise InvalidArgument("delta grid is empty")
    chain = chain or build_alternating_chain(3, first_species="B")
    obj = np.array([mediated_objective(d, chain, noise, omega, options) for d in grid])
    order = np.argsort(grid)
    grid, obj = grid[order], obj[order]
    k = int(np.argmin(obj))
    best = float(grid[k])
    if 0 < k < grid.size - 1:
        x = grid[k - 1:k + 2]
        y = obj[k - 1:k + 2]
        a, b, _ = np.polyfit(x, y, 2)
        if a > 0:
            cand = -b / (2 * a)
            if x[0] <= cand <= x[2]:
                best = float(cand)
    return DetuningScan(grid, obj, best, k)
