import itertools

import numpy as np
import pytest
from scipy.linalg import expm

from conftest import random_state
from rydqca import clifford as cl
from rydqca.errors import InvalidArgument, UnsupportedRepresentation
from rydqca.lattice import build_alternating_chain
from rydqca.statevec import PauliString, QuantumState, expect

I2 = np.eye(2, dtype=complex)
X = np.array([[0, 1], [1, 0]], dtype=complex)
Y = np.array([[0, -1j], [1j, 0]])
Z = np.diag([1.0, -1.0]).astype(complex)
H = (X + Z) / np.sqrt(2)
SQRTX = expm(-0.25j * np.pi * X)
CZ2 = np.diag([1, 1, 1, -1]).astype(complex)


def _kron(*ops):
    out = np.ones((1, 1), dtype=complex)
    for o in ops:
        out = np.kron(out, o)
    return out


def _layer_matrix(layer, n):
    if layer.gate == "cz_chain":
        d = np.ones(2**n, dtype=complex)
        for a, b in layer.cz_pairs(n):
            for idx in range(2**n):
                if (idx >> (n - 1 - a)) & 1 and (idx >> (n - 1 - b)) & 1:
                    d[idx] *= -1
        return np.diag(d)
    single = {"sqrtx": SQRTX, "h": H, "s": np.diag([1, 1j]), "z": Z, "x": X,
              "sqrty": expm(-0.25j * np.pi * Y)}[layer.gate]
    sites = set(layer.sites(n))
    return _kron(*[single if k in sites else I2 for k in range(n)])


def _step_matrix(layers, n):
    u = np.eye(2**n, dtype=complex)
    for layer in layers:
        u = _layer_matrix(layer, n) @ u
    return u


def test_sqrtx_images():
    layer = cl.CliffordLayer("sqrtx_all")
    assert str(cl.conjugate(PauliString.parse("Z"), layer)) == "+Y"
    assert str(cl.conjugate(PauliString.parse("Y"), layer)) == "-Z"
    assert str(cl.conjugate(PauliString.parse("X"), layer)) == "+X"


def test_cz_example_against_matrix():
    p = cl.conjugate(PauliString.parse("XI"), cl.CliffordLayer("cz_chain"))
    assert str(p) == "+XZ"
    assert np.allclose(CZ2.conj().T @ _kron(X, I2) @ CZ2, p.matrix())


def test_identity_string_unchanged():
    for kind in ("sqrtx_all", "cz_chain", "s_boundary", "z_all", "x_all", "h"):
        p = cl.conjugate(PauliString("IIII"), cl.CliffordLayer(kind))
        assert p.letters == "IIII" and p.sign == 1


@pytest.mark.parametrize("kind", ["sqrtx_all", "cz_chain", "s_boundary", "z_all", "x_all", "h", "sqrty"])
def test_every_layer_matches_matrix_conjugation(kind):
    n = 3
    layer = cl.CliffordLayer(kind)
    u = _layer_matrix(layer, n)
    for p in cl.all_paulis(n):
        img = cl.conjugate(p, layer)
        assert img.sign in (1, -1, 1j, -1j)
        assert set(img.letters) <= set("IXYZ")
        assert np.allclose(u.conj().T @ p.matrix() @ u, img.matrix())
        back = cl.conjugate(img, layer.inverse(n))
        assert back.letters == p.letters and back.sign == p.sign
        assert cl.conjugate_inverse(img, layer) == p


def test_heisenberg_and_propagate_are_inverse():
    layers = cl.mediated_layers(4)
    for p in cl.all_paulis(4, max_weight=2):
        assert cl.propagate(cl.heisenberg(p, layers), layers) == p


def test_graph_step_glider_u0_to_u1():
    # one forward step carries Z_0 to X_0 Z_1
    assert str(cl.propagate(PauliString.parse("ZIIII"), cl.graph_step_layers(5, "h"))) == "+XZIII"
    u = _step_matrix(cl.graph_step_layers(5, "h"), 5)
    assert np.allclose(u @ PauliString.parse("ZIIII").matrix() @ u.conj().T, PauliString.parse("XZIII").matrix())


def test_glider_sequences():
    n = 5
    tr = cl.glider_trajectory(cl.u_glider(0, n), 5)
    assert [s.label for s in tr] == ["U0", "U1", "U2", "U3", "U4", "U5"]
    assert str(tr[-1].operator) == "+IIIIX"
    tr = cl.glider_trajectory(cl.u_glider(n, n), 1)
    assert tr[1].label == "D5" and tr[1].family_changed
    tr = cl.glider_trajectory(cl.d_glider(n, n), 5)
    assert [s.label for s in tr] == ["D5", "D4", "D3", "D2", "D1", "D0"]
    assert str(tr[1].operator) == "+IIIZX"
    assert str(tr[-1].operator) == "+XIIII"
    assert cl.glider_trajectory(cl.u_glider(0, n), 0)[0].label == "U0"
    with pytest.raises(InvalidArgument):
        cl.glider_trajectory(cl.u_glider(0, n), -1)


@pytest.mark.parametrize("n", [5, 6, 8])
def test_glider_weight_bounded(n):
    for start in (cl.u_glider(0, n), cl.d_glider(n, n), cl.u_glider(2, n)):
        for s in cl.glider_trajectory(start, 4 * (n + 1)):
            assert s.operator.weight <= 2
            assert s.label is not None


def test_glider_round_trip_period():
    n = 5
    tr = cl.glider_trajectory(cl.u_glider(0, n), 2 * (n + 1))
    assert tr[-1].operator == tr[0].operator


def test_cross_module_oracle_all_five_site_strings():
    """<P> after a graph step equals <U^dag P U> before it for every 5-site string."""
    n = 5
    ch = build_alternating_chain(n)
    rng = np.random.default_rng(11)
    psi = random_state(ch, rng)
    for kick in ("sqrtx", "h"):
        layers = cl.graph_step_layers(n, kick)
        u = _step_matrix(layers, n)
        after = QuantumState(ch, psi.local_dims, u @ psi.amplitudes)
        for letters in itertools.product("IXYZ", repeat=n):
            p = PauliString("".join(letters))
            assert expect(after, p) == pytest.approx(expect(psi, cl.heisenberg(p, layers)), abs=1e-9)


def test_wrong_sqrtx_branch_is_rejected():
    n = 2
    ch = build_alternating_chain(n)
    psi = random_state(ch, np.random.default_rng(3))
    wrong = _kron(SQRTX.conj(), SQRTX.conj())
    after = QuantumState(ch, psi.local_dims, wrong @ psi.amplitudes)
    mismatches = 0
    for p in cl.all_paulis(n):
        lhs = expect(after, p)
        rhs = expect(psi, cl.conjugate(p, cl.CliffordLayer("sqrtx_all")))
        mismatches += abs(lhs - rhs) > 1e-6
    assert mismatches > 0


def test_r_factor_unsupported():
    with pytest.raises(UnsupportedRepresentation):
        cl.conjugate(PauliString.parse("RZ", alpha=0.3), cl.CliffordLayer("cz_chain"))


def test_layer_validation():
    with pytest.raises(InvalidArgument):
        cl.CliffordLayer("toffoli")
    with pytest.raises(InvalidArgument):
        cl.CliffordLayer("z", (7,)).sites(3)
    assert cl.CliffordLayer("s_boundary").sites(4) == (0, 3)
    assert cl.CliffordLayer("cz_chain", (0, 1, 3)).cz_pairs(4) == [(0, 1)]


def test_cluster_stabilizers_examples():
    assert [str(s) for s in cl.cluster_stabilizers(2)] == ["+XZ", "+ZX"]
    v = np.array([1, 1, 1, -1]) / 2  # (|0+> + |1->)/sqrt 2
    for s in cl.cluster_stabilizers(2):
        assert np.allclose(s.matrix() @ v, v)
    with pytest.raises(InvalidArgument):
        cl.cluster_stabilizers(1)


def test_seventeen_site_cluster():
    n = 17
    gens = cl.evolve_stabilizers(cl.zero_state_generators(n), cl.graph_step_layers(n, "h"))
    stabs = cl.cluster_stabilizers(n)
    assert len(stabs) == n
    assert all(cl.stabilizer_expectation(gens, s) == 1.0 for s in stabs)


def test_native_cluster_needs_boundary_correction():
    n = 17
    gens = cl.evolve_stabilizers(cl.zero_state_generators(n), cl.native_step_layers(n, 0.0))
    vals = []
    for s in cl.cluster_stabilizers(n):
        xs = s.letters
        ys = "".join("Y" if c == "X" else c for c in xs)
        vals.append((cl.stabilizer_expectation(gens, s), cl.stabilizer_expectation(gens, PauliString(ys))))
    # every stabilizer has unit weight on the X/Y circle; the ends sit a quarter turn from the bulk
    assert all(abs(x) + abs(y) == 1 for x, y in vals)
    bulk = {v for v in vals[1:-1]}
    assert len(bulk) == 1
    assert vals[0] not in bulk and vals[-1] not in bulk


def test_stabilizer_expectation_against_dense():
    n = 4
    gens = cl.evolve_stabilizers(cl.zero_state_generators(n), cl.mediated_layers(n))
    u = _step_matrix(cl.mediated_layers(n), n)
    psi = u[:, 0]
    for p in cl.all_paulis(n):
        dense = np.vdot(psi, p.matrix() @ psi).real
        assert cl.stabilizer_expectation(gens, p) == pytest.approx(dense, abs=1e-12)


def test_native_layers_only_clifford_axes():
    with pytest.raises(InvalidArgument):
        cl.native_step_layers(3, 0.3)
    with pytest.raises(InvalidArgument):
        cl.mediated_layers(1)
