"""Perfect-blockade versions of the automaton steps.

Conventions: rotations are exp(-i theta/2 (cos(a) X + sin(a) Y)); the blockade
projector P = |0><0| acts on the nearest neighbours (one neighbour at the chain
ends); CZ(xi) puts the phase e^{i xi} on |00>.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidArgument, PreconditionViolation
from .statevec import (QuantumState, X, apply_site_operator, require_qubits,
                       rotation_matrix)

AUX_TOL = 1e-9
HADAMARD = np.array([[1, 1], [1, -1]], dtype=complex) / math.sqrt(2)
SQRT_X = rotation_matrix(math.pi / 2, 0.0)


@dataclass(frozen=True)
class PxpStep:
    species: str
    theta: float = math.pi
    axis_phase: float = 0.0

    def __post_init__(self):
        if not 0 <= self.theta <= 2 * math.pi + 1e-12:
            raise InvalidArgument("theta must lie in [0, 2 pi]")


def _blockaded_rotations(state: QuantumState, sites: Iterable[int], u: np.ndarray) -> QuantumState:
    """Apply (1 - Pi_j) + Pi_j u_j for each site, Pi_j projecting neighbours on |0>."""
    require_qubits(state)
    n = state.n_sites
    t = state.tensor().copy()
    for j in sites:
        nbrs = [k for k in (j - 1, j + 1) if 0 <= k < n]
        idx = [slice(None)] * n
        for k in nbrs:
            idx[k] = 0
        idx = tuple(idx)
        axis = j - sum(1 for k in nbrs if k < j)
        t[idx] = apply_site_operator(t[idx], u, axis)
    return state.with_amplitudes(t.reshape(-1))


def pxp_pulse(state: QuantumState, step: PxpStep) -> QuantumState:
    if not state.chain.has_species(step.species):
        raise InvalidArgument(f"species {step.species!r} not in chain")
    u = rotation_matrix(step.theta, step.axis_phase)
    return _blockaded_rotations(state, state.chain.sites_of(step.species), u)


@dataclass
class PxpRun:
    populations: np.ndarray  # row 0 is the input state, row k follows pulse k
    final: QuantumState
    states: list[QuantumState] | None = None


def run_pxp_automaton(state: QuantumState, n_pulses: int, theta: float = math.pi,
                      axis_phase: float = 0.0, first_species: str = "A",
                      record_states: bool = False) -> PxpRun:
    """Alternate pulses between the species, starting with ``first_species``."""
    if n_pulses < 0:
        raise InvalidArgument("n_pulses must be >= 0")
    other = "B" if first_species == "A" else "A"
    pops = [state.populations()]
    states = [state] if record_states else None
    for k in range(n_pulses):
        species = first_species if k % 2 == 0 else other
        if state.chain.has_species(species):
            state = pxp_pulse(state, PxpStep(species, theta, axis_phase))
        pops.append(state.populations())
        if record_states:
            states.append(state)
    return PxpRun(np.array(pops), state, states)


def masked_init_pulse(state: QuantumState, mask: Iterable[int], theta: float,
                      axis_phase: float = 0.0) -> QuantumState:
    """Blockaded rotation on the B sites that are not light-shifted (``mask``)."""
    mask = set(mask)
    bad = [s for s in mask if not (0 <= s < state.n_sites) or state.chain.pattern[s] != "B"]
    if bad:
        raise InvalidArgument(f"only B sites can be masked, got {bad}")
    targets = [s for s in state.chain.sites_of("B") if s not in mask]
    return _blockaded_rotations(state, targets, rotation_matrix(theta, axis_phase))


# --------------------------------------------------------------------------
# mediated gates

@dataclass(frozen=True)
class MediatedLayer:
    """Detuning ``delta`` is in units of the Rabi frequency ``omega`` (MHz)."""

    delta: float = 1 / math.sqrt(3)
    omega: float = 2.9
    data_species: str = "B"
    aux_species: str = "A"
    phi_extra: float = 0.0

    def __post_init__(self):
        if self.data_species == self.aux_species:
            raise InvalidArgument("data and aux species must differ")

    @property
    def big_phi(self) -> float:
        """Geometric phase of the aux loop, pi (1 - delta / sqrt(1 + delta^2))."""
        if math.isinf(self.delta):
            return 0.0 if self.delta > 0 else 2 * math.pi
        return math.pi * (1 - self.delta / math.sqrt(1 + self.delta**2))

    @property
    def alpha(self) -> float:
        return self.phi_extra + self.big_phi

    @classmethod
    def for_alpha(cls, alpha: float, **kw) -> "MediatedLayer":
        """Layer whose loop phase gives the requested alpha with phi_extra = 0."""
        ratio = 1 - alpha / math.pi
        if not -1 < ratio < 1:
            raise InvalidArgument("alpha must lie in (0, 2 pi) for phi_extra = 0")
        return cls(delta=ratio / math.sqrt(1 - ratio**2), **kw)


def data_pairs(chain, layer: MediatedLayer) -> list[tuple[int, int]]:
    """Adjacent data sites bridged by exactly one aux site."""
    pat = chain.pattern
    data = chain.sites_of(layer.data_species)
    for a, b in zip(pat, pat[1:]):
        if a == b:
            raise InvalidArgument("mediated layers need alternating data/aux species")
    return [(i, i + 2) for i in data if i + 2 < chain.n_sites and pat[i + 2] == layer.data_species
            and pat[i + 1] == layer.aux_species]


def _check_aux_ground(state: QuantumState, layer: MediatedLayer) -> None:
    require_qubits(state)
    probs = np.abs(state.tensor()) ** 2
    for s in state.chain.sites_of(layer.aux_species):
        if float(np.take(probs, 1, axis=s).sum()) > AUX_TOL:
            raise PreconditionViolation(f"aux site {s} not in |0>")


def _z_values(state: QuantumState) -> np.ndarray:
    """z_j = +1 / -1 for bit 0 / 1, shape (n_sites, dim)."""
    n = state.n_sites
    idx = np.arange(state.dim)
    bits = (idx[None, :] >> np.arange(n - 1, -1, -1)[:, None]) & 1
    return 1 - 2 * bits


def _apply_phase(state: QuantumState, phase: np.ndarray) -> QuantumState:
    return state.with_amplitudes(state.amplitudes * np.exp(1j * phase))


def _flip_sites(state: QuantumState, sites: Sequence[int]) -> QuantumState:
    t = state.tensor()
    for s in sites:
        t = apply_site_operator(t, X, s)
    return state.with_amplitudes(t.reshape(-1))


def mediated_u_delta(state: QuantumState, layer: MediatedLayer) -> QuantumState:
    """exp(i(phi-Phi)(Z_a + Z_b)/4) exp(i(phi+Phi) Z_a Z_b / 4) on each bridged pair."""
    _check_aux_ground(state, layer)
    z = _z_values(state)
    phi, big = layer.phi_extra, layer.big_phi
    phase = np.zeros(state.dim)
    for a, b in data_pairs(state.chain, layer):
        phase += (phi - big) / 4 * (z[a] + z[b]) + (phi + big) / 4 * z[a] * z[b]
    return _apply_phase(state, phase)


def _closed_form_phase(state: QuantumState, layer: MediatedLayer) -> np.ndarray:
    z = _z_values(state)
    al = layer.alpha
    phase = np.zeros(state.dim)
    for a, b in data_pairs(state.chain, layer):
        phase += al / 2 * (z[a] + z[b])
        phase += 2 * al * ((z[a] == 1) & (z[b] == 1))
    return phase


def mediated_v_layer(state: QuantumState, layer: MediatedLayer, form: str = "closed") -> QuantumState:
    """Echoed mediated layer on every bridged data pair.

    form="closed": X_data * prod_pairs [e^{i alpha Z/2} x e^{i alpha Z/2}] CZ(2 alpha).
    form="echo":   U_delta, X on all data sites, U_delta, composed literally.
    Up to a global phase, echo = closed * prod_j exp(-i alpha deg_j Z_j), the
    rotations acting first and deg_j counting the pairs that contain site j.
    """
    _check_aux_ground(state, layer)
    data = state.chain.sites_of(layer.data_species)
    if form == "closed":
        state = _apply_phase(state, _closed_form_phase(state, layer))
        return _flip_sites(state, data)
    if form == "echo":
        state = mediated_u_delta(state, layer)
        state = _flip_sites(state, data)
        return mediated_u_delta(state, layer)
    raise InvalidArgument(f"unknown form {form!r}")


def _degrees(chain, layer: MediatedLayer) -> dict[int, int]:
    deg = {s: 0 for s in chain.sites_of(layer.data_species)}
    for a, b in data_pairs(chain, layer):
        deg[a] += 1
        deg[b] += 1
    return deg


KICKS = {"sqrtx": SQRT_X, "h": HADAMARD, "hadamard": HADAMARD}


def graph_step(state: QuantumState, kick: str = "sqrtx", layer: MediatedLayer | None = None) -> QuantumState:
    """One graph-automaton step (prod CZ)(prod K) on the data sites.

    The kick K is sqrt(X) = exp(-i pi X/4) by default, or "h" for a Hadamard.
    The entangler is the mediated layer at alpha = pi/2 followed by the local
    correction that turns it into a plain CZ chain (CZ = diag(1, 1, 1, -1)).
    """
    layer = layer or MediatedLayer()
    if abs(math.remainder(layer.alpha - math.pi / 2, 2 * math.pi)) > 1e-12:
        raise InvalidArgument("graph_step needs a layer with alpha = pi/2")
    try:
        k = KICKS[kick]
    except KeyError:
        raise InvalidArgument(f"unknown kick {kick!r}") from None
    _check_aux_ground(state, layer)
    data = state.chain.sites_of(layer.data_species)
    t = state.tensor()
    for s in data:
        t = apply_site_operator(t, k, s)
    state = mediated_v_layer(state.with_amplitudes(t.reshape(-1)), layer)
    # undo X layer, then the single-site phases; Z^deg maps CZ(pi) on |00> to diag(1,1,1,-1)
    state = _flip_sites(state, data)
    z = _z_values(state)
    deg = _degrees(state.chain, layer)
    phase = np.zeros(state.dim)
    for s, d in deg.items():
        phase += -math.pi * d / 4 * z[s] + math.pi * d * (z[s] == -1)
    return _apply_phase(state, phase)


def native_graph_step(state: QuantumState, axis_phase: float, layer: MediatedLayer | None = None) -> QuantumState:
    """Experimental step: pi/2 pulse about ``axis_phase`` on data, then the bare mediated layer."""
    layer = layer or MediatedLayer()
    _check_aux_ground(state, layer)
    t = state.tensor()
    u = rotation_matrix(math.pi / 2, axis_phase)
    for s in state.chain.sites_of(layer.data_species):
        t = apply_site_operator(t, u, s)
    return mediated_v_layer(state.with_amplitudes(t.reshape(-1)), layer)


def run_native_graph_automaton(state: QuantumState, n_steps: int, layer: MediatedLayer | None = None,
                               first_axis: float = 0.0, later_axis: float = math.pi / 2) -> list[QuantumState]:
    """States after 0..n_steps native steps; the laser phase moves by pi/2 after the first pulse."""
    out = [state]
    for k in range(n_steps):
        state = native_graph_step(state, first_axis if k == 0 else later_axis, layer)
        out.append(state)
    return out


def run_graph_automaton(state: QuantumState, n_steps: int, kick: str = "sqrtx",
                        layer: MediatedLayer | None = None) -> list[QuantumState]:
    out = [state]
    for _ in range(n_steps):
        state = graph_step(state, kick, layer)
        out.append(state)
    return out


# --------------------------------------------------------------------------
# config-level step sequences

def _layer_from(step: dict) -> MediatedLayer:
    kw = {k: step[k] for k in ("delta", "omega", "data_species", "aux_species", "phi_extra") if k in step}
    if "alpha" in step:
        return MediatedLayer.for_alpha(float(step["alpha"]), **kw)
    return MediatedLayer(**kw)


def run_step_sequence(state: QuantumState, steps: Sequence[dict]) -> list[QuantumState]:
    """Apply a list of {type: pxp|masked_init|mediated|graph, ...} steps.

    Returns the input state followed by the state after every pulse or layer.
    A pxp step either names one ``species`` or alternates ``n_pulses`` pulses
    starting from ``first_species``; angles are given as ``theta_pi`` (units of pi).
    """
    out = [state]
    for k, step in enumerate(steps):
        kind = step.get("type")
        theta = math.pi * float(step.get("theta_pi", 1.0))
        axis = float(step.get("axis_phase", 0.0))
        if kind == "pxp":
            if "species" in step:
                out.append(pxp_pulse(out[-1], PxpStep(step["species"], theta, axis)))
            else:
                run = run_pxp_automaton(out[-1], int(step.get("n_pulses", 1)), theta, axis,
                                        step.get("first_species", "A"), record_states=True)
                out.extend(run.states[1:])
        elif kind == "masked_init":
            out.append(masked_init_pulse(out[-1], step.get("mask", []), theta, axis))
        elif kind == "mediated":
            out.append(mediated_v_layer(out[-1], _layer_from(step), step.get("form", "closed")))
        elif kind == "graph":
            if "kick" in step:
                out.append(graph_step(out[-1], step["kick"], _layer_from(step)))
            else:
                out.append(native_graph_step(out[-1], axis, _layer_from(step)))
        else:
            raise InvalidArgument(f"schedule entry {k}: unknown step type {kind!r}")
    return out
