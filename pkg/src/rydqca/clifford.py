"""Pauli-string propagation through the Clifford layers used by the automata.

``conjugate`` is the Heisenberg map U^dag P U. ``propagate`` applies a step in
the Schroedinger direction, U P U^dag, which is the direction in which the
gliders advance by one bond per step (U = CZ-chain * Hadamard kick).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InternalConsistencyError, InvalidArgument, UnsupportedRepresentation
from .statevec import PauliString

# single-letter products: (phase, letter) with a*b = phase * letter
_MUL = {
    ("I", "I"): (1, "I"), ("I", "X"): (1, "X"), ("I", "Y"): (1, "Y"), ("I", "Z"): (1, "Z"),
    ("X", "I"): (1, "X"), ("X", "X"): (1, "I"), ("X", "Y"): (1j, "Z"), ("X", "Z"): (-1j, "Y"),
    ("Y", "I"): (1, "Y"), ("Y", "X"): (-1j, "Z"), ("Y", "Y"): (1, "I"), ("Y", "Z"): (1j, "X"),
    ("Z", "I"): (1, "Z"), ("Z", "X"): (1j, "Y"), ("Z", "Y"): (-1j, "X"), ("Z", "Z"): (1, "I"),
}

# Heisenberg images U^dag P U of X, Y, Z as (sign, letter)
_SINGLE = {
    "sqrtx": {"X": (1, "X"), "Y": (-1, "Z"), "Z": (1, "Y")},
    "sqrtx_dag": {"X": (1, "X"), "Y": (1, "Z"), "Z": (-1, "Y")},
    "sqrty": {"X": (1, "Z"), "Y": (1, "Y"), "Z": (-1, "X")},
    "sqrty_dag": {"X": (-1, "Z"), "Y": (1, "Y"), "Z": (1, "X")},
    "h": {"X": (1, "Z"), "Y": (-1, "Y"), "Z": (1, "X")},
    "s": {"X": (-1, "Y"), "Y": (1, "X"), "Z": (1, "Z")},
    "sdg": {"X": (1, "Y"), "Y": (-1, "X"), "Z": (1, "Z")},
    "z": {"X": (-1, "X"), "Y": (-1, "Y"), "Z": (1, "Z")},
    "x": {"X": (1, "X"), "Y": (-1, "Y"), "Z": (-1, "Z")},
}
_INVERSE = {"sqrtx": "sqrtx_dag", "sqrtx_dag": "sqrtx", "sqrty": "sqrty_dag", "sqrty_dag": "sqrty",
            "h": "h", "s": "sdg", "sdg": "s", "z": "z", "x": "x", "cz_chain": "cz_chain"}
_ALIASES = {"sqrtx_all": "sqrtx", "z_all": "z", "x_all": "x", "s_boundary": "s", "hadamard": "h"}


@dataclass(frozen=True)
class CliffordLayer:
    """A layer of identical gates. ``targets=None`` means every site, except for
    ``s_boundary`` where it means the two end sites."""

    kind: str
    targets: tuple[int, ...] | None = None

    def __post_init__(self):
        kind = self.kind
        if kind not in _INVERSE and kind not in _ALIASES:
            raise InvalidArgument(f"unknown layer kind {kind!r}")
        if self.targets is not None:
            object.__setattr__(self, "targets", tuple(sorted(set(int(t) for t in self.targets))))

    @property
    def gate(self) -> str:
        return _ALIASES.get(self.kind, self.kind)

    def sites(self, n: int) -> tuple[int, ...]:
        if self.targets is not None:
            if any(not 0 <= t < n for t in self.targets):
                raise InvalidArgument("layer target outside the string")
            return self.targets
        if self.kind == "s_boundary":
            return tuple(sorted({0, n - 1}))
        return tuple(range(n))

    def inverse(self, n: int) -> "CliffordLayer":
        return CliffordLayer(_INVERSE[self.gate], self.sites(n))

    def cz_pairs(self, n: int) -> list[tuple[int, int]]:
        s = set(self.sites(n))
        return [(i, i + 1) for i in range(n - 1) if i in s and i + 1 in s]


def _check(p: PauliString) -> None:
    if not p.is_pauli:
        raise UnsupportedRepresentation("conjugation needs I/X/Y/Z factors only")


def _apply_layer(p: PauliString, layer: CliffordLayer, inverse: bool) -> PauliString:
    _check(p)
    n = len(p)
    letters = list(p.letters)
    sign = p.sign
    gate = layer.gate
    if gate == "cz_chain":
        for a, b in layer.cz_pairs(n):
            la, lb = letters[a], letters[b]
            xa, xb = la in "XY", lb in "XY"
            if xb:
                ph, la = _MUL[(la, "Z")]
                sign *= ph
            if xa:
                ph, lb = _MUL[("Z", lb)]
                sign *= ph
            letters[a], letters[b] = la, lb
        return PauliString("".join(letters), _snap(sign))
    if layer.kind == "s_boundary" and inverse:
        gate = "sdg"
    elif inverse:
        gate = _INVERSE[gate]
    table = _SINGLE[gate]
    for s in layer.sites(n):
        c = letters[s]
        if c != "I":
            sg, letters[s] = table[c]
            sign *= sg
    return PauliString("".join(letters), _snap(sign))


def _snap(sign: complex) -> complex:
    for s in (1, -1, 1j, -1j):
        if abs(sign - s) < 1e-9:
            return s
    raise InvalidArgument(f"non-Pauli phase {sign}")


def conjugate(pauli: PauliString, layer: CliffordLayer) -> PauliString:
    """Heisenberg image U^dag P U of ``pauli`` under one layer."""
    return _apply_layer(pauli, layer, inverse=False)


def conjugate_inverse(pauli: PauliString, layer: CliffordLayer) -> PauliString:
    """U P U^dag under one layer."""
    return _apply_layer(pauli, layer, inverse=True)


def heisenberg(pauli: PauliString, layers: Sequence[CliffordLayer]) -> PauliString:
    """U^dag P U for U = layers[-1] ... layers[0] (layers listed in time order)."""
    for layer in reversed(layers):
        pauli = conjugate(pauli, layer)
    return pauli


def propagate(pauli: PauliString, layers: Sequence[CliffordLayer]) -> PauliString:
    """U P U^dag for U = layers[-1] ... layers[0]."""
    for layer in layers:
        pauli = conjugate_inverse(pauli, layer)
    return pauli


# --------------------------------------------------------------------------
# step definitions

def graph_step_layers(n: int, kick: str = "sqrtx") -> list[CliffordLayer]:
    """Kick on every site, then the CZ chain (time order)."""
    return [CliffordLayer(kick), CliffordLayer("cz_chain")]


def mediated_layers(n: int) -> list[CliffordLayer]:
    """Mediated layer at alpha = pi/2: CZ chain, S on the ends, Z inside, X everywhere."""
    if n < 2:
        raise InvalidArgument("need at least two data sites")
    interior = tuple(range(1, n - 1))
    layers = [CliffordLayer("cz_chain"), CliffordLayer("s_boundary")]
    if interior:
        layers.append(CliffordLayer("z", interior))
    layers.append(CliffordLayer("x_all"))
    return layers


def native_step_layers(n: int, axis_phase: float) -> list[CliffordLayer]:
    """pi/2 pulse about x (axis 0) or y (axis pi/2), then the mediated layer."""
    if math.isclose(math.remainder(axis_phase, 2 * math.pi), 0.0, abs_tol=1e-12):
        kick = "sqrtx"
    elif math.isclose(math.remainder(axis_phase - math.pi / 2, 2 * math.pi), 0.0, abs_tol=1e-12):
        kick = "sqrty"
    else:
        raise InvalidArgument("native kicks are Clifford only for axis 0 or pi/2")
    return [CliffordLayer(kick)] + mediated_layers(n)


# --------------------------------------------------------------------------
# gliders

def u_glider(i: int, n: int) -> PauliString:
    """U_i = X_{i-1} Z_i on bond label i = 0..n (missing factors dropped)."""
    if not 0 <= i <= n:
        raise InvalidArgument("glider label out of range")
    f = {}
    if i - 1 >= 0:
        f[i - 1] = "X"
    if i < n:
        f[i] = "Z"
    return PauliString.from_sites(n, f)


def d_glider(i: int, n: int) -> PauliString:
    """D_i = Z_{i-1} X_i on bond label i = 0..n (missing factors dropped)."""
    if not 0 <= i <= n:
        raise InvalidArgument("glider label out of range")
    f = {}
    if i - 1 >= 0:
        f[i - 1] = "Z"
    if i < n:
        f[i] = "X"
    return PauliString.from_sites(n, f)


def glider_label(p: PauliString) -> str | None:
    n = len(p)
    for i in range(n + 1):
        for name, fn in (("U", u_glider), ("D", d_glider)):
            g = fn(i, n)
            if g.letters == p.letters and p.sign == 1:
                return f"{name}{i}"
    return None


@dataclass
class GliderStep:
    step: int
    operator: PauliString
    label: str | None
    family_changed: bool


def glider_trajectory(initial: PauliString, n_steps: int, kick: str = "h") -> list[GliderStep]:
    if n_steps < 0:
        raise InvalidArgument("n_steps must be >= 0")
    layers = graph_step_layers(len(initial), kick)
    p = initial
    label = glider_label(p)
    out = [GliderStep(0, p, label, False)]
    for k in range(1, n_steps + 1):
        p = propagate(p, layers)
        new = glider_label(p)
        changed = bool(label and new and label[0] != new[0])
        out.append(GliderStep(k, p, new, changed))
        label = new
    return out


# --------------------------------------------------------------------------
# stabilizer states

def cluster_stabilizers(n: int) -> list[PauliString]:
    if n < 2:
        raise InvalidArgument("a cluster needs at least two sites")
    out = []
    for i in range(n):
        f = {i: "X"}
        if i > 0:
            f[i - 1] = "Z"
        if i < n - 1:
            f[i + 1] = "Z"
        out.append(PauliString.from_sites(n, f))
    return out


def evolve_stabilizers(generators: Sequence[PauliString], layers: Sequence[CliffordLayer]) -> list[PauliString]:
    """Generators of U S U^dag for the state U|psi> (Schroedinger direction)."""
    return [propagate(g, layers) for g in generators]


def zero_state_generators(n: int) -> list[PauliString]:
    return [PauliString.single(n, i, "Z") for i in range(n)]


def _symplectic(p: PauliString) -> np.ndarray:
    x = np.array([c in "XY" for c in p.letters], dtype=np.uint8)
    z = np.array([c in "ZY" for c in p.letters], dtype=np.uint8)
    return np.concatenate([x, z])


def multiply(p: PauliString, q: PauliString) -> PauliString:
    if len(p) != len(q):
        raise InvalidArgument("length mismatch")
    sign = p.sign * q.sign
    letters = []
    for a, b in zip(p.letters, q.letters):
        ph, c = _MUL[(a, b)]
        sign *= ph
        letters.append(c)
    return PauliString("".join(letters), _snap(sign))


def _commutes(p: PauliString, q: PauliString) -> bool:
    n = len(p)
    a, b = _symplectic(p), _symplectic(q)
    return int(a[:n] @ b[n:] + a[n:] @ b[:n]) % 2 == 0


def stabilizer_expectation(generators: Sequence[PauliString], pauli: PauliString) -> float:
    """<P> on the stabilizer state with the given independent generators: +-1 or 0."""
    _check(pauli)
    if any(not _commutes(g, pauli) for g in generators):
        return 0.0
    target = _symplectic(pauli)
    mat = np.array([_symplectic(g) for g in generators], dtype=np.uint8)
    coeffs = _solve_gf2(mat, target)
    if coeffs is None:
        return 0.0
    prod = PauliString("I" * len(pauli))
    for g, c in zip(generators, coeffs):
        if c:
            prod = multiply(prod, g)
    if prod.letters != pauli.letters:
        raise InternalConsistencyError("GF(2) solution does not reproduce the string")
    ratio = pauli.sign / prod.sign
    if abs(ratio.imag) > 1e-9:
        return 0.0
    return float(round(ratio.real))


def _solve_gf2(rows: np.ndarray, target: np.ndarray) -> np.ndarray | None:
    """Coefficients c with c . rows = target over GF(2), or None."""
    m, w = rows.shape
    aug = np.concatenate([rows.T, target[:, None]], axis=1).astype(np.uint8)  # (w, m+1)
    pivots = []
    r = 0
    for col in range(m):
        hit = [i for i in range(r, w) if aug[i, col]]
        if not hit:
            continue
        aug[[r, hit[0]]] = aug[[hit[0], r]]
        for i in range(w):
            if i != r and aug[i, col]:
                aug[i] ^= aug[r]
        pivots.append(col)
        r += 1
        if r == w:
            break
    if aug[r:, m].any():
        return None
    c = np.zeros(m, dtype=np.uint8)
    for i, col in enumerate(pivots):
        c[col] = aug[i, m]
    return c


def all_paulis(n: int, max_weight: int | None = None) -> Iterable[PauliString]:
    """Every n-site I/X/Y/Z string (optionally up to a weight)."""
    from itertools import product
    for letters in product("IXYZ", repeat=n):
        if max_weight is not None and sum(c != "I" for c in letters) > max_weight:
            continue
        yield PauliString("".join(letters))
