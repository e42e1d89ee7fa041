import math

import numpy as np
import pytest
from scipy.linalg import expm

from rydqca import physical as ph
from rydqca.errors import InvalidArgument
from rydqca.lattice import build_alternating_chain
from rydqca.qca_ideal import run_pxp_automaton
from rydqca.statevec import basis_state, product_state, vacuum

TWO_PI = 2 * math.pi


def _overlap(a, b):
    return abs(np.vdot(a.amplitudes, b.amplitudes)) ** 2


def _populations_after(state, schedule, **kw):
    return ph.run_trajectories(state, schedule, **kw).populations


# --------------------------------------------------------------------------
# Hamiltonian

def test_pi_time_convention():
    assert ph.pi_time() == pytest.approx(1 / 5.8)
    seg = ph.DriveSegment.pulse("A", 2 * math.pi)
    assert seg.duration == pytest.approx(1 / 2.9)
    assert seg.duration == pytest.approx(0.345, abs=5e-4)


def test_single_atom_rabi_oscillation():
    ch = build_alternating_chain(1)
    times = np.linspace(0, 0.7, 15)
    sched = [ph.DriveSegment("A", 2.9, times[1] - times[0]) for _ in times[1:]]
    pops = _populations_after(vacuum(ch), sched)[:, 0]
    np.testing.assert_allclose(pops, np.sin(math.pi * 2.9 * times) ** 2, atol=1e-10)


def test_build_hamiltonian_matches_explicit_two_atom_form():
    ch = build_alternating_chain(2)
    seg = ph.DriveSegment("A", 2.9, 0.1, detuning=0.7, axis_phase=0.4)
    h = ph.build_hamiltonian(ch, seg).toarray()
    v = ch.c6_between(0, 1) / ch.spacing**6
    n = np.diag([0.0, 1.0])
    drive = 2.9 / 2 * np.array([[0, np.exp(-0.4j)], [np.exp(0.4j), 0]])
    expected = np.kron(drive - 0.7 * n, np.eye(2)) + v * np.kron(n, n)
    np.testing.assert_allclose(h, TWO_PI * expected, atol=1e-12)
    assert np.allclose(h, h.conj().T)


def test_nearest_neighbour_shift_value():
    ch = build_alternating_chain(2)
    assert ch.c6_between(0, 1) / ch.spacing**6 == pytest.approx(29.9, abs=0.1)


def test_blockaded_atom_stays_low():
    ch = build_alternating_chain(2)
    v = ch.c6_between(0, 1) / ch.spacing**6
    omega = 2.9
    sched = [ph.DriveSegment("A", omega, 0.01) for _ in range(60)]
    pops = _populations_after(basis_state(ch, "01"), sched)[:, 0]
    # detuned two-level oracle: peak population Omega^2 / (Omega^2 + V^2)
    bound = omega**2 / (omega**2 + v**2)
    assert pops.max() <= bound + 1e-9
    assert pops.max() > 0.5 * bound
    assert bound < 4 * (omega / (2 * v)) ** 2


def test_no_drive_keeps_populations():
    ch = build_alternating_chain(4)
    seg = ph.DriveSegment("A", 0.0, 1.0, detuning=3.0)
    h = ph.build_hamiltonian(ch, seg).toarray()
    assert np.count_nonzero(h - np.diag(np.diag(h))) == 0
    st = basis_state(ch, "1010")
    assert np.allclose(ph.evolve_unitary(st, [seg]).populations(), st.populations())


def test_mask_removes_drive_and_shifts():
    ch = build_alternating_chain(3)
    seg = ph.DriveSegment("A", 2.9, 0.1, mask={2})
    h = ph.build_hamiltonian(ch, seg).toarray()
    h0 = ph.build_hamiltonian(ch, ph.DriveSegment("A", 2.9, 0.1, mask={0, 2})).toarray()
    # site 2 never flips, and its |1> is pushed up by the mask shift
    lo, hi = 0b000, 0b001
    assert h[lo, hi] == 0
    assert (h[hi, hi] - h[lo, lo]).real == pytest.approx(TWO_PI * ph.MASK_SHIFT_MHZ)
    assert np.count_nonzero(h0 - np.diag(np.diag(h0))) == 0


def test_segment_validation():
    with pytest.raises(InvalidArgument):
        ph.DriveSegment("A", 1.0, -0.1)
    with pytest.raises(InvalidArgument):
        ph.DriveSegment("A", -1.0, 0.1)
    with pytest.raises(InvalidArgument):
        ph.segment_from_dict({"species": "A", "theta": 1.0, "duration": 0.2})
    with pytest.raises(InvalidArgument):
        ph.segment_from_dict({"species": "A", "colour": "red"})
    seg = ph.segment_from_dict({"species": "B", "theta": math.pi, "mask": [3]})
    assert seg.duration == pytest.approx(ph.pi_time()) and seg.mask == frozenset({3})


def test_noise_validation():
    with pytest.raises(InvalidArgument):
        ph.NoiseConfig(n_trajectories=0)
    with pytest.raises(InvalidArgument):
        ph.NoiseConfig(dephasing_rate={"A": -1.0})
    with pytest.raises(InvalidArgument):
        ph.NoiseConfig(intermediate="sometimes")
    with pytest.raises(InvalidArgument):
        ph.noise_from_dict({"preset": "loud"})
    cfg = ph.noise_from_dict({"preset": "standard", "n_trajectories": 7})
    assert cfg.n_trajectories == 7 and cfg.has_jumps and not cfg.is_deterministic
    assert ph.NoiseConfig().is_deterministic
    assert ph.dephasing_from_psd(1e4) == pytest.approx(math.pi * 1e-2)


# --------------------------------------------------------------------------
# trajectories

def test_noise_off_matches_unitary(rng):
    ch = build_alternating_chain(5)
    from conftest import random_state

    psi = random_state(ch, rng)
    sched = ph.pxp_schedule(ch, 4, theta=1.1 * math.pi)
    sched.append(ph.DriveSegment("B", 1.3, 0.2, detuning=0.8, axis_phase=0.3))
    traj = ph.evolve_trajectory(psi, sched, ph.NoiseConfig()).final
    ref = ph.evolve_unitary(psi, sched)
    np.testing.assert_allclose(traj.amplitudes, ref.amplitudes, atol=1e-8)


def test_noise_off_independent_of_seed():
    ch = build_alternating_chain(4)
    sched = ph.pxp_schedule(ch, 3, theta=0.8 * math.pi)
    a = ph.evolve_trajectory(vacuum(ch), sched, None, traj_seed=0).final
    b = ph.evolve_trajectory(vacuum(ch), sched, None, traj_seed=99).final
    assert np.array_equal(a.amplitudes, b.amplitudes)


def test_trajectory_deterministic_given_seed():
    ch = build_alternating_chain(3)
    noise = ph.NoiseConfig(lifetime={"A": 1.0, "B": 1.0}, dephasing_rate={"A": 0.5}, seed=4)
    sched = ph.pxp_schedule(ch, 6)
    a = ph.evolve_trajectory(vacuum(ch), sched, noise, 3)
    b = ph.evolve_trajectory(vacuum(ch), sched, noise, 3)
    assert a.jumps == b.jumps
    assert np.array_equal(a.final.amplitudes, b.final.amplitudes)


def test_lifetime_survival():
    ch = build_alternating_chain(1)
    tau, t, n = 100.0, 60.0, 400
    noise = ph.NoiseConfig(lifetime={"A": tau}, n_trajectories=n, seed=1)
    ens = ph.run_trajectories(basis_state(ch, "1"), [ph.DriveSegment("A", 0.0, t)], noise)
    survival = ens.populations[-1, 0]
    p = math.exp(-t / tau)
    assert abs(survival - p) < 3 * math.sqrt(p * (1 - p) / n)
    lost = [tr.final.lost_mask[0] for tr in ens.trajectories]
    assert sum(lost) == sum(1 for tr in ens.trajectories if tr.jumps)
    for tr in ens.trajectories:
        for j in tr.jumps:
            assert j.kind == "decay" and 0 <= j.time <= t


def _lindblad_n0(chain, omega, det, v, gamma, gdeph, t_step, n_steps):
    """Dense master equation for an A-B pair; each atom has |0>, |1> and a lost level."""
    d = 3
    I = np.eye(d)
    ket = np.eye(d)
    n = np.outer(ket[1], ket[1])
    sx = np.outer(ket[1], ket[0]) + np.outer(ket[0], ket[1])
    h = TWO_PI * (omega / 2 * np.kron(sx, I) - det * np.kron(n, I) + v * np.kron(n, n))
    jumps = []
    for site in range(2):
        for op in (math.sqrt(gamma) * np.outer(ket[2], ket[1]), math.sqrt(2 * gdeph) * n):
            jumps.append(np.kron(op, I) if site == 0 else np.kron(I, op))
    dim = d * d
    eye = np.eye(dim)
    # row-major vectorization: vec(A rho B) = kron(A, B^T) vec(rho)
    lv = -1j * (np.kron(h, eye) - np.kron(eye, h.T))
    for L in jumps:
        ld = L.conj().T @ L
        lv += np.kron(L, L.conj()) - 0.5 * np.kron(ld, eye) - 0.5 * np.kron(eye, ld.T)
    prop = expm(lv * t_step)
    psi = np.kron(ket[0], ket[1])
    rho = np.outer(psi, psi.conj()).reshape(-1)
    proj = np.kron(n, I)
    out = [np.trace(proj @ rho.reshape(dim, dim)).real]
    for _ in range(n_steps):
        rho = prop @ rho
        out.append(np.trace(proj @ rho.reshape(dim, dim)).real)
    return np.array(out)


def test_two_atom_trajectories_match_lindblad():
    ch = build_alternating_chain(2)
    v = ch.c6_between(0, 1) / ch.spacing**6
    omega, det, gamma, gdeph = 2.9, 0.4, 0.8, 0.3
    t_step, n_steps = 0.1, 10
    noise = ph.NoiseConfig(lifetime={"A": 1 / gamma, "B": 1 / gamma}, dephasing_rate={"A": gdeph, "B": gdeph},
                           n_trajectories=1000, seed=5)
    sched = [ph.DriveSegment("A", omega, t_step, detuning=det) for _ in range(n_steps)]
    ens = ph.run_trajectories(basis_state(ch, "01"), sched, noise)
    oracle = _lindblad_n0(ch, omega, det, v, gamma, gdeph, t_step, n_steps)
    err = ens.stderr[:, 0]
    dev = np.abs(ens.populations[:, 0] - oracle)
    assert np.all(dev[1:] <= 3 * err[1:] + 1e-12)
    assert dev[0] == 0


def test_norm_non_increasing_between_jumps():
    from rydqca.physical import _BlockPropagator, _segment_model

    ch = build_alternating_chain(3)
    noise = ph.NoiseConfig(lifetime={"A": 2.0, "B": 3.0}, dephasing_rate={"A": 0.4, "B": 0.2})
    psi = product_state(ch, ["+", [1, 0], [0.6, 0.8j]])
    seg = ph.DriveSegment("A", 2.9, 1.0, detuning=0.3)
    model = _segment_model(psi, seg, ph.FrozenNoise.none(ch), noise, ph.EngineOptions(), (False,) * 3)
    prop = _BlockPropagator(model, psi.local_dims, "test")
    norms = [np.linalg.norm(prop.apply(psi.amplitudes, t)) ** 2 for t in np.linspace(0, 1.0, 101)]
    assert np.all(np.diff(norms) <= 1e-12)
    assert norms[-1] < norms[0]


def test_energy_conserved_on_static_segment(rng):
    from conftest import random_state

    ch = build_alternating_chain(5)
    seg = ph.DriveSegment("B", 2.9, 0.8, detuning=0.5, axis_phase=0.2)
    h = ph.build_hamiltonian(ch, seg)
    psi = random_state(ch, rng)
    out = ph.evolve_trajectory(psi, [seg], None).final
    e0 = np.vdot(psi.amplitudes, h @ psi.amplitudes).real
    e1 = np.vdot(out.amplitudes, h @ out.amplitudes).real
    assert abs(e1 - e0) < 1e-6 * abs(h).max()


def test_ensemble_step_zero_is_input():
    ch = build_alternating_chain(3)
    ens = ph.run_trajectories(basis_state(ch, "010"), ph.pxp_schedule(ch, 2))
    assert len(ens.trajectories) == 1
    np.testing.assert_allclose(ens.populations[0], [0, 1, 0])
    assert ens.populations.shape == (3, 3)


def test_threads_do_not_change_results(monkeypatch):
    ch = build_alternating_chain(3)
    noise = ph.NoiseConfig(lifetime={"A": 3.0, "B": 3.0}, n_trajectories=8, seed=2)
    sched = ph.pxp_schedule(ch, 4)
    one = ph.run_trajectories(vacuum(ch), sched, noise, threads=1)
    monkeypatch.setenv(ph.THREADS_ENV, "4")
    assert ph.thread_count() == 4
    many = ph.run_trajectories(vacuum(ch), sched, noise)
    np.testing.assert_allclose(one.populations, many.populations, atol=1e-12)
    monkeypatch.setenv(ph.THREADS_ENV, "lots")
    assert ph.thread_count() == 1


def test_frozen_noise_sampling():
    ch = build_alternating_chain(4)
    cfg = ph.NoiseConfig(intensity_sigma={"A": (0.1, 0.1)}, position_sigma=0.2)
    draws = [ph.sample_frozen_noise(ch, cfg, np.random.default_rng(k)) for k in range(300)]
    scales = np.array([d.omega_scale["A"] for d in draws])
    assert all(d.omega_scale["B"] == 1.0 for d in draws)
    # sqrt of a product of two 10% factors: about 7% spread
    assert scales.std() == pytest.approx(0.1 / math.sqrt(2), rel=0.2)
    offs = np.array([d.positions - ch.positions() for d in draws])
    assert offs.std() == pytest.approx(0.2, rel=0.1)


def test_full_intermediate_needs_three_levels():
    ch = build_alternating_chain(2)
    with pytest.raises(InvalidArgument):
        ph.evolve_trajectory(vacuum(ch), ph.pxp_schedule(ch, 1), ph.NoiseConfig(intermediate="full"))


# --------------------------------------------------------------------------
# limits

def test_blockade_limit_matches_ideal_automaton():
    ch = build_alternating_chain(5)
    strong = ch.with_c6(AB=ch.c6["AB"] * 100)
    opts = ph.EngineOptions(max_range=1)
    for theta in (math.pi, 1.1 * math.pi):
        sched = ph.pxp_schedule(strong, 6, theta=theta, nnn_compensation=False)
        phys = ph.run_trajectories(vacuum(strong), sched, options=opts)
        ideal = run_pxp_automaton(vacuum(ch), 6, theta=theta, record_states=True)
        final = phys.trajectories[0].snapshots[-1]
        assert _overlap(final, ideal.final) >= 0.999
        assert np.abs(phys.populations - ideal.populations).max() < 0.01


def test_intermediate_level_limit():
    ch = build_alternating_chain(2)
    sched = [ph.DriveSegment.pulse("A", math.pi / 2), ph.DriveSegment.pulse("B", math.pi),
             ph.DriveSegment.pulse("A", 0.7 * math.pi, axis_phase=0.5)]
    psi = vacuum(ch)
    two = ph.evolve_trajectory(psi, sched, None).final
    levels = {s: ph.IntermediateLevel(lv.rabi_blue, lv.rabi_red, 10 * lv.detuning, 0.0)
              for s, lv in ph.DEFAULT_INTERMEDIATE.items()}
    noise = ph.NoiseConfig(intermediate="full", intermediate_levels=levels)
    three = ph.evolve_trajectory(ph.to_three_level(psi), sched, noise).final
    assert _overlap(ph.project_qubits(three), two) >= 0.999


def test_three_level_round_trip():
    ch = build_alternating_chain(2)
    psi = product_state(ch, [[0.6, 0.8], [1, 0]])
    back = ph.project_qubits(ph.to_three_level(psi))
    np.testing.assert_allclose(back.amplitudes, psi.amplitudes)


def test_effective_scattering_rates_scale_with_detuning():
    lv = ph.DEFAULT_INTERMEDIATE["A"]
    r0, r1 = lv.scattering_rates(2.9)
    far = ph.IntermediateLevel(lv.rabi_blue, lv.rabi_red, 10 * lv.detuning, lv.linewidth)
    f0, f1 = far.scattering_rates(2.9)
    # at fixed two-photon Rabi frequency the single-photon rates grow as sqrt(Delta), so loss ~ 1/Delta
    assert f0 == pytest.approx(r0 / 10, rel=1e-9)
    assert f1 == pytest.approx(r1 / 10, rel=1e-9)
    assert lv.scaled_to(2.9).two_photon() == pytest.approx(2.9)


# --------------------------------------------------------------------------
# schedules and studies

def test_pxp_schedule_layout():
    ch = build_alternating_chain(5)
    sched = ph.pxp_schedule(ch, 4)
    assert [s.species for s in sched] == ["A", "B", "A", "B"]
    assert sched[0].detuning == pytest.approx(ph.nnn_shift(ch, "A"))
    assert sched[1].detuning == pytest.approx(ph.nnn_shift(ch, "B"))
    bare = ph.pxp_schedule(ch, 2, nnn_compensation=False, detuning_error={"A": 0.2})
    assert bare[0].detuning == 0.2 and bare[1].detuning == 0.0
    with pytest.raises(InvalidArgument):
        ph.pxp_schedule(ch, -1)
    assert ph.nnn_shift(build_alternating_chain(2), "A") == 0.0


def test_mediated_schedule_loop_time():
    seq = ph.mediated_schedule(0.5, 2.0)
    assert [s.label for s in seq][0] == "init pi/2"
    loop = seq[1]
    # one generalized Rabi cycle of the auxiliary atom
    assert loop.duration * math.hypot(2.0, 1.0) == pytest.approx(1.0)
    assert loop.detuning == pytest.approx(1.0)
    assert len(ph.mediated_schedule(0.5, with_init=False, with_readout=False)) == 3


def test_optimize_needs_grid_and_geometry():
    with pytest.raises(InvalidArgument):
        ph.optimize_mediated_detuning([])
    with pytest.raises(InvalidArgument):
        ph.mediated_objective(1.0, build_alternating_chain(3))


def test_optimize_single_point():
    scan = ph.optimize_mediated_detuning([1.1])
    assert scan.delta_star == 1.1 and scan.best_index == 0


def test_optimize_strong_blockade_finds_ideal_detuning():
    ch = build_alternating_chain(3, first_species="B")
    strong = ch.with_c6(AB=ch.c6["AB"] * 1000)
    grid = np.linspace(0.4, 0.8, 9)
    scan = ph.optimize_mediated_detuning(grid, strong, options=ph.EngineOptions(max_range=1))
    # a full detuned cycle picks up pi (1 - Delta / sqrt(Omega^2 + Delta^2)); pi/2 at Omega / sqrt 3
    assert scan.delta_star == pytest.approx(1 / math.sqrt(3), abs=grid[1] - grid[0])
    assert scan.objective.min() < 0.01


def test_magnetization_decay_blockade_limit_follows_orbit():
    ch = build_alternating_chain(7)
    study = ph.magnetization_decay(n_sites=7, n_pulses=12, fit_window=12,
                                   chain=ch.with_c6(AB=ch.c6["AB"] * 1000),
                                   options=ph.EngineOptions(max_range=1), nnn_compensation=False)
    np.testing.assert_allclose(study.magnetization, [0, 1, 1, 0, -1, -1, 0, 1, 1, 0, -1, -1, 0], atol=1e-3)
    assert study.fit_window == 12


@pytest.mark.parametrize("delta", [0.9, 1.25])
def test_flagging_never_lowers_noiseless_bell_fidelity(delta):
    from rydqca.config import parse_config
    from rydqca.experiments import run_bell

    text = f"""
experiment = "bell"
engine = "physical"
seed = 3

[chain]
pattern = "BAB"

[params]
delta_min = {delta}
delta_max = {delta}
delta_step = 0.1
"""
    rep = run_bell(parse_config(text)).reports["bell"]
    assert rep["delta_star"] == pytest.approx(delta)
    assert 0 < rep["postselected_fraction"] <= 1
    assert rep["F_C_flagged"] >= rep["F_C"] - 1e-12
