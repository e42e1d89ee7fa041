"""Dense state vectors over mixed local dimensions, Pauli strings, sampling.

Basis labels put site 0 in the most significant position. A two-level site has
levels (|0>, |1>); a three-level site has (|0>, |e>, |1>), so the Rydberg level is
always the last one. Readout reports '1' only for the Rydberg level.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (InternalConsistencyError, InvalidArgument, PreconditionViolation,
                     UnsupportedRepresentation)
from .lattice import ChainSpec
from .rng import STREAM_SAMPLING, make_rng

MAX_AMPLITUDES = 2**24
NORM_TOL = 1e-9


@dataclass
class QuantumState:
    chain: ChainSpec
    local_dims: tuple[int, ...]
    amplitudes: np.ndarray
    lost_mask: tuple[bool, ...] = ()

    def __post_init__(self):
        self.local_dims = tuple(int(d) for d in self.local_dims)
        if len(self.local_dims) != self.chain.n_sites:
            raise InvalidArgument("local_dims must have one entry per site")
        if any(d not in (2, 3) for d in self.local_dims):
            raise InvalidArgument("local dimensions must be 2 or 3")
        dim = math.prod(self.local_dims)
        if dim > MAX_AMPLITUDES:
            raise InvalidArgument(f"state needs {dim} amplitudes, cap is {MAX_AMPLITUDES}")
        amps = np.asarray(self.amplitudes, dtype=complex).reshape(-1)
        if amps.size != dim:
            raise InvalidArgument(f"amplitude vector has length {amps.size}, expected {dim}")
        self.amplitudes = amps
        if not self.lost_mask:
            self.lost_mask = (False,) * self.chain.n_sites
        self.lost_mask = tuple(bool(x) for x in self.lost_mask)

    @property
    def n_sites(self) -> int:
        return self.chain.n_sites

    @property
    def dim(self) -> int:
        return self.amplitudes.size

    @property
    def is_qubit(self) -> bool:
        return all(d == 2 for d in self.local_dims)

    def tensor(self) -> np.ndarray:
        return self.amplitudes.reshape(self.local_dims)

    def copy(self) -> "QuantumState":
        return QuantumState(self.chain, self.local_dims, self.amplitudes.copy(), self.lost_mask)

    def with_amplitudes(self, amps: np.ndarray, lost_mask=None) -> "QuantumState":
        return QuantumState(self.chain, self.local_dims, amps,
                            self.lost_mask if lost_mask is None else lost_mask)

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def normalized(self) -> "QuantumState":
        nrm = self.norm()
        if nrm == 0:
            raise PreconditionViolation("cannot normalize a zero vector")
        return self.with_amplitudes(self.amplitudes / nrm)

    def rydberg_level(self, site: int) -> int:
        return self.local_dims[site] - 1

    def populations(self) -> np.ndarray:
        """<n_j> for every site (Rydberg-level population)."""
        probs = np.abs(self.tensor()) ** 2
        total = probs.sum()
        out = np.empty(self.n_sites)
        for j in range(self.n_sites):
            axes = tuple(k for k in range(self.n_sites) if k != j)
            out[j] = probs.sum(axis=axes)[-1] / total
        return out


def _ket_from_spec(spec, dim: int) -> np.ndarray:
    named = {
        "0": [1, 0], "1": [0, 1],
        "+": [1 / math.sqrt(2), 1 / math.sqrt(2)], "-": [1 / math.sqrt(2), -1 / math.sqrt(2)],
        "+i": [1 / math.sqrt(2), 1j / math.sqrt(2)], "-i": [1 / math.sqrt(2), -1j / math.sqrt(2)],
    }
    if isinstance(spec, str):
        if spec == "e":
            if dim != 3:
                raise InvalidArgument("|e> needs a three-level site")
            return np.array([0, 1, 0], dtype=complex)
        if spec not in named:
            raise InvalidArgument(f"unknown single-site label {spec!r}")
        ket = np.array(named[spec], dtype=complex)
    else:
        ket = np.asarray(spec, dtype=complex).reshape(-1)
    if ket.size == 2 and dim == 3:
        ket = np.array([ket[0], 0, ket[1]], dtype=complex)
    if ket.size != dim:
        raise InvalidArgument(f"single-site state of size {ket.size} for a {dim}-level site")
    if abs(np.linalg.norm(ket) - 1) > NORM_TOL:
        raise InvalidArgument(f"single-site state not normalized (norm {np.linalg.norm(ket):.6g})")
    return ket


def product_state(chain: ChainSpec, site_kets: Sequence, local_dims: Sequence[int] | None = None) -> QuantumState:
    """Tensor product of single-site kets in site order.

    Each entry is a vector or one of '0', '1', '+', '-', '+i', '-i', 'e'.
    """
    if len(site_kets) != chain.n_sites:
        raise InvalidArgument("need one single-site state per site")
    dims = tuple(local_dims) if local_dims is not None else (2,) * chain.n_sites
    amps = np.ones(1, dtype=complex)
    for ket, d in zip(site_kets, dims):
        amps = np.kron(amps, _ket_from_spec(ket, d))
    return QuantumState(chain, dims, amps)


def basis_state(chain: ChainSpec, bitstring: str, local_dims: Sequence[int] | None = None) -> QuantumState:
    if len(bitstring) != chain.n_sites or set(bitstring) - {"0", "1"}:
        raise InvalidArgument(f"bad bitstring {bitstring!r}")
    return product_state(chain, list(bitstring), local_dims)


def vacuum(chain: ChainSpec, local_dims: Sequence[int] | None = None) -> QuantumState:
    return basis_state(chain, "0" * chain.n_sites, local_dims)


# --------------------------------------------------------------------------
# single-site operators

I2 = np.eye(2, dtype=complex)
X = np.array([[0, 1], [1, 0]], dtype=complex)
Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
Z = np.array([[1, 0], [0, -1]], dtype=complex)
P0 = np.array([[1, 0], [0, 0]], dtype=complex)
N1 = np.array([[0, 0], [0, 1]], dtype=complex)


def equatorial(alpha: float) -> np.ndarray:
    """R(alpha) = cos(alpha) X + sin(alpha) Y."""
    return math.cos(alpha) * X + math.sin(alpha) * Y


def rotation_matrix(theta: float, axis_phase: float) -> np.ndarray:
    """exp(-i theta/2 (cos(a) X + sin(a) Y))."""
    return math.cos(theta / 2) * I2 - 1j * math.sin(theta / 2) * equatorial(axis_phase)


def embed(op2: np.ndarray, dim: int, e_fill: complex = 1.0) -> np.ndarray:
    """Place a qubit operator on the {|0>, |1>} block of a site with ``dim`` levels."""
    if dim == 2:
        return op2
    out = np.zeros((3, 3), dtype=complex)
    out[np.ix_([0, 2], [0, 2])] = op2
    out[1, 1] = e_fill
    return out


def apply_site_operator(tensor: np.ndarray, op: np.ndarray, axis: int) -> np.ndarray:
    moved = np.tensordot(op, tensor, axes=([1], [axis]))
    return np.moveaxis(moved, 0, axis)


def apply_site_unitary(state: QuantumState, site: int, op2: np.ndarray) -> QuantumState:
    t = apply_site_operator(state.tensor(), embed(op2, state.local_dims[site]), site)
    return state.with_amplitudes(t.reshape(-1))


# --------------------------------------------------------------------------
# Pauli strings

_LETTERS = {"I", "X", "Y", "Z", "R", "P", "N"}
_HERMITIAN_SIGNS = (1, -1)


@dataclass(frozen=True)
class PauliString:
    """Signed product of single-site factors.

    Letters: I, X, Y, Z, R (equatorial, angle in ``alphas``), and the projectors
    P = |0><0| and N = |1><1| for expectation values.
    """

    letters: str
    sign: complex = 1
    alphas: tuple[float, ...] = ()

    def __post_init__(self):
        if set(self.letters) - _LETTERS:
            raise InvalidArgument(f"unknown factor in {self.letters!r}")
        alphas = tuple(float(a) for a in self.alphas) or (0.0,) * len(self.letters)
        if len(alphas) != len(self.letters):
            raise InvalidArgument("need one angle per factor")
        object.__setattr__(self, "alphas", alphas)
        sign = complex(self.sign)
        if "R" not in self.letters and not any(np.isclose(sign, s) for s in (1, -1, 1j, -1j)):
            raise InvalidArgument("sign must be +-1 or +-i")
        object.__setattr__(self, "sign", sign)

    @classmethod
    def parse(cls, text: str, alpha: float = 0.0) -> "PauliString":
        m = re.fullmatch(r"\s*([+-]?)(i?)([IXYZRPN]+)\s*", text)
        if not m:
            raise InvalidArgument(f"cannot parse Pauli string {text!r}")
        sign = -1 if m.group(1) == "-" else 1
        if m.group(2):
            sign *= 1j
        letters = m.group(3)
        return cls(letters, sign, tuple(alpha if c == "R" else 0.0 for c in letters))

    @classmethod
    def single(cls, n: int, site: int, letter: str) -> "PauliString":
        return cls.from_sites(n, {site: letter})

    @classmethod
    def from_sites(cls, n: int, factors: Mapping[int, str], sign: complex = 1) -> "PauliString":
        letters = ["I"] * n
        for site, letter in factors.items():
            if not 0 <= site < n:
                raise InvalidArgument(f"site {site} outside chain of length {n}")
            letters[site] = letter
        return cls("".join(letters), sign)

    def __len__(self):
        return len(self.letters)

    def __str__(self):
        s = self.sign
        if np.isclose(s, 1):
            prefix = "+"
        elif np.isclose(s, -1):
            prefix = "-"
        elif np.isclose(s, 1j):
            prefix = "+i"
        elif np.isclose(s, -1j):
            prefix = "-i"
        else:
            prefix = f"({s:.6g})"
        return prefix + self.letters

    @property
    def support(self) -> tuple[int, ...]:
        return tuple(k for k, c in enumerate(self.letters) if c != "I")

    @property
    def weight(self) -> int:
        return len(self.support)

    @property
    def is_pauli(self) -> bool:
        return not (set(self.letters) & {"R", "P", "N"})

    @property
    def is_hermitian(self) -> bool:
        return any(np.isclose(self.sign, s) for s in _HERMITIAN_SIGNS)

    def with_alpha(self, alpha: float) -> "PauliString":
        return PauliString(self.letters, self.sign,
                           tuple(alpha if c == "R" else 0.0 for c in self.letters))

    def factor_matrix(self, k: int) -> np.ndarray:
        c = self.letters[k]
        if c == "R":
            return equatorial(self.alphas[k])
        return {"I": I2, "X": X, "Y": Y, "Z": Z, "P": P0, "N": N1}[c]

    def matrix(self) -> np.ndarray:
        """Dense 2^n matrix; for small strings and tests."""
        out = np.ones((1, 1), dtype=complex)
        for k in range(len(self.letters)):
            out = np.kron(out, self.factor_matrix(k))
        return self.sign * out


def apply_pauli(state: QuantumState, op: PauliString) -> np.ndarray:
    """op |psi> as a raw amplitude vector (identity padding beyond len(op))."""
    if len(op) > state.n_sites:
        raise InvalidArgument("operator longer than the chain")
    t = state.tensor()
    for k in op.support:
        d = state.local_dims[k]
        t = apply_site_operator(t, embed(op.factor_matrix(k), d, e_fill=0.0), k)
    return op.sign * t.reshape(-1)


def _e_population(state: QuantumState, sites: Iterable[int]) -> float:
    probs = np.abs(state.tensor()) ** 2
    total = 0.0
    for k in sites:
        if state.local_dims[k] == 3:
            total += float(np.take(probs, 1, axis=k).sum())
    return total


def expect(state: QuantumState, op: PauliString, tol: float = NORM_TOL) -> float:
    """<psi|op|psi> for a Hermitian string."""
    if not op.is_hermitian:
        raise InvalidArgument("expectation requested for a non-Hermitian string")
    if _e_population(state, op.support) > tol:
        raise PreconditionViolation("operator acts on sites with |e> population")
    value = np.vdot(state.amplitudes, apply_pauli(state, op))
    if abs(value.imag) > tol:
        raise InternalConsistencyError(f"imaginary part {value.imag:.3g} for Hermitian operator")
    return float(value.real)


# --------------------------------------------------------------------------
# measurement records

def _bits_to_index(bits: np.ndarray) -> np.ndarray:
    n = bits.shape[1]
    weights = (1 << np.arange(n - 1, -1, -1)).astype(np.int64)
    return bits.astype(np.int64) @ weights


def _index_to_bits(idx: np.ndarray, n: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    return ((idx[:, None] >> np.arange(n - 1, -1, -1)) & 1).astype(np.uint8)


class _OutcomeData:
    """Shared analysis helpers for sampled and exact outcome records."""

    n_sites: int

    def marginal(self, sites: Sequence[int]) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def parity(self, sites: Sequence[int]) -> float:
        """<prod (1 - 2 b_i)> over the given sites."""
        sites = list(sites)
        if not sites:
            return 1.0
        m = self.marginal(sites)
        signs = np.ones(1)
        for _ in sites:
            signs = np.kron(signs, np.array([1.0, -1.0]))
        return float(m.reshape(-1) @ signs)

    def pattern_probability(self, sites: Sequence[int], pattern: str) -> float:
        m = self.marginal(sites)
        return float(m[tuple(int(c) for c in pattern)])

    def populations(self) -> np.ndarray:
        return np.array([self.marginal([j])[1] for j in range(self.n_sites)])


@dataclass
class Distribution(_OutcomeData):
    """Exact outcome probabilities over the 2^n bitstrings (site 0 most significant)."""

    probs: np.ndarray
    n_sites: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float).reshape(-1)
        if self.probs.size != 2**self.n_sites:
            raise InvalidArgument("probability vector length must be 2^n_sites")

    def marginal(self, sites: Sequence[int]) -> np.ndarray:
        t = self.probs.reshape((2,) * self.n_sites)
        sites = list(sites)
        others = tuple(k for k in range(self.n_sites) if k not in sites)
        m = t.sum(axis=others) if others else t
        order = sorted(sites)
        return np.transpose(m, [order.index(s) for s in sites])

    def weighted_bitstrings(self) -> tuple[np.ndarray, np.ndarray]:
        idx = np.flatnonzero(self.probs > 0)
        return _index_to_bits(idx, self.n_sites), self.probs[idx]

    def sample(self, n_shots: int, rng: np.random.Generator, meta: dict | None = None) -> "ShotEnsemble":
        p = np.clip(self.probs, 0, None)
        idx = rng.choice(p.size, size=n_shots, p=p / p.sum())
        return ShotEnsemble(_index_to_bits(idx, self.n_sites), dict(meta or {}))


@dataclass
class ShotEnsemble(_OutcomeData):
    """Measured bitstrings (rows) with metadata."""

    bits: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.uint8)
        if bits.ndim != 2:
            raise InvalidArgument("shots must be a 2-d array (n_shots, n_sites)")
        if bits.size and bits.max() > 1:
            raise InvalidArgument("shots must contain only 0/1")
        self.bits = bits

    @property
    def n_sites(self) -> int:
        return self.bits.shape[1]

    @property
    def n_shots(self) -> int:
        return self.bits.shape[0]

    @classmethod
    def from_strings(cls, strings: Sequence[str], meta: dict | None = None) -> "ShotEnsemble":
        lengths = {len(s) for s in strings}
        if len(lengths) > 1:
            raise InvalidArgument("all bitstrings must share one length")
        if any(set(s) - {"0", "1"} for s in strings):
            raise InvalidArgument("bitstrings may contain only '0' and '1'")
        n = lengths.pop() if lengths else 0
        arr = np.array([[int(c) for c in s] for s in strings], dtype=np.uint8).reshape(len(strings), n)
        return cls(arr, dict(meta or {}))

    def strings(self) -> list[str]:
        return ["".join("1" if b else "0" for b in row) for row in self.bits]

    def marginal(self, sites: Sequence[int]) -> np.ndarray:
        sites = list(sites)
        k = len(sites)
        counts = np.bincount(_bits_to_index(self.bits[:, sites]), minlength=2**k) if self.n_shots else np.zeros(2**k)
        return (counts / max(self.n_shots, 1)).reshape((2,) * k)

    def parity_stderr(self, sites: Sequence[int]) -> float:
        p = self.parity(sites)
        return math.sqrt(max(1 - p * p, 0.0) / max(self.n_shots, 1))

    def to_distribution(self) -> Distribution:
        counts = np.bincount(_bits_to_index(self.bits), minlength=2**self.n_sites)
        return Distribution(counts / max(self.n_shots, 1), self.n_sites, dict(self.meta))

    def weighted_bitstrings(self) -> tuple[np.ndarray, np.ndarray]:
        w = np.full(self.n_shots, 1.0 / max(self.n_shots, 1))
        return self.bits, w

    def select(self, mask: np.ndarray) -> "ShotEnsemble":
        return ShotEnsemble(self.bits[np.asarray(mask, dtype=bool)], dict(self.meta))

    # one bitstring per line, '#'-prefixed "key: value" metadata header
    def dumps(self) -> str:
        lines = [f"# {k}: {v}" for k, v in self.meta.items()]
        lines += self.strings()
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "ShotEnsemble":
        meta, rows = {}, []
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                meta[key.strip()] = value.strip()
            else:
                rows.append(line)
        return cls.from_strings(rows, meta)

    @classmethod
    def load(cls, path: str | Path) -> "ShotEnsemble":
        return cls.loads(Path(path).read_text())


def outcome_distribution(state: QuantumState) -> Distribution:
    """Readout distribution: '1' iff the Rydberg level; |e> and lost atoms read '0'."""
    probs = np.abs(state.tensor()) ** 2
    probs = probs / probs.sum()
    for k, d in enumerate(state.local_dims):
        if d == 3:
            p = np.moveaxis(probs, k, 0)
            probs = np.moveaxis(np.stack([p[0] + p[1], p[2]]), 0, k)
        if state.lost_mask[k]:
            p = np.moveaxis(probs, k, 0)
            probs = np.moveaxis(np.stack([p[0] + p[1], np.zeros_like(p[1])]), 0, k)
    return Distribution(probs.reshape(-1), state.n_sites)


def sample(state: QuantumState, n_shots: int, seed: int, meta: dict | None = None) -> ShotEnsemble:
    if int(n_shots) < 1:
        raise InvalidArgument("n_shots must be >= 1")
    rng = make_rng(seed, STREAM_SAMPLING)
    info = {"seed": seed}
    info.update(meta or {})
    return outcome_distribution(state).sample(int(n_shots), rng, info)


def apply_product_rotation(state: QuantumState, species: str, theta: float, axis_phase: float,
                           mask: Iterable[int] = ()) -> QuantumState:
    """Rotate every unmasked site of ``species`` by exp(-i theta/2 R(axis_phase))."""
    mask = set(mask)
    bad = [s for s in mask if not (0 <= s < state.n_sites) or state.chain.pattern[s] != species]
    if bad:
        raise InvalidArgument(f"mask sites {bad} are not {species}-sites")
    u = rotation_matrix(theta, axis_phase)
    t = state.tensor()
    for site in state.chain.sites_of(species):
        if site in mask or state.lost_mask[site]:
            continue
        t = apply_site_operator(t, embed(u, state.local_dims[site]), site)
    return state.with_amplitudes(t.reshape(-1))


def rotate_sites(state: QuantumState, sites: Iterable[int], theta: float, axis_phase: float) -> QuantumState:
    """Same rotation on an explicit site list, regardless of species."""
    u = rotation_matrix(theta, axis_phase)
    t = state.tensor()
    for site in sites:
        t = apply_site_operator(t, embed(u, state.local_dims[site]), site)
    return state.with_amplitudes(t.reshape(-1))


def require_qubits(state: QuantumState) -> None:
    if not state.is_qubit:
        raise UnsupportedRepresentation("operation needs two-level sites only")


def fidelity(a: QuantumState, b: QuantumState) -> float:
    """|<a|b>|^2 for normalized states."""
    return float(abs(np.vdot(a.amplitudes, b.amplitudes)) ** 2)
