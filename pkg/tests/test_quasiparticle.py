import itertools
import math
import re

import numpy as np
import pytest

from rydqca.errors import InvalidArgument
from rydqca.lattice import build_alternating_chain
from rydqca.qca_ideal import run_pxp_automaton
from rydqca.quasiparticle import (classical_orbit, detect, detector_matrix, fit_magnetization_decay,
                                  mean_quasiparticle_number, position_histogram, quasiparticle_growth,
                                  quasiparticle_numbers, staggered_magnetization)
from rydqca.statevec import Distribution, ShotEnsemble, basis_state, outcome_distribution, vacuum


def _regex_detect(bits: str) -> tuple[int, ...]:
    """Pattern scan: 4-site windows in the bulk, 3-site windows at the edges."""
    L = len(bits)
    fired = []
    if re.fullmatch("001", bits[0:3]):
        fired.append(1)
    for j in range(2, L - 1):
        if re.fullmatch("0001|1000|1001", bits[j - 2:j + 2]):
            fired.append(j)
    if re.fullmatch("100", bits[L - 3:]):
        fired.append(L - 1)
    return tuple(fired)


def _rounded(state) -> str:
    return "".join(str(int(round(p))) for p in state.populations())


@pytest.mark.parametrize("bits,q", [("10100001010", 2), ("00000000000", 0), ("01010101010", 0),
                                    ("00000100000", 2), ("00000101010", 1)])
def test_detect_examples(bits, q):
    assert detect(bits).Q == q


def test_detect_needs_four_sites():
    with pytest.raises(InvalidArgument):
        detect("010")
    with pytest.raises(InvalidArgument):
        detect("01a1")


def test_detect_exhaustive_against_pattern_scan():
    L = 11
    strings = ["".join(b) for b in itertools.product("01", repeat=L)]
    bits = np.array([[int(c) for c in s] for s in strings], dtype=np.uint8)
    fired = detector_matrix(bits)
    for s, row in zip(strings, fired):
        assert tuple(int(j) + 1 for j in np.flatnonzero(row)) == _regex_detect(s)


def test_bulk_patterns_mutually_exclusive():
    for w in itertools.product("01", repeat=4):
        w = "".join(w)
        assert sum(w == p for p in ("0001", "1000", "1001")) <= 1


def test_record_positions_sorted_and_counted():
    rec = detect("10100001010", shot_index=7)
    assert rec.shot_index == 7
    assert list(rec.positions) == sorted(set(rec.positions))
    assert rec.Q == len(rec.positions)


def test_numbers_from_shots_and_distribution_agree():
    shots = ShotEnsemble.from_strings(["10100001010", "00000000000", "00000101010", "00000101010"])
    q, w = quasiparticle_numbers(shots)
    assert sorted(q.tolist()) == [0, 1, 1, 2]
    assert mean_quasiparticle_number(shots) == pytest.approx(1.0)
    assert mean_quasiparticle_number(shots.to_distribution()) == pytest.approx(1.0)


# --------------------------------------------------------------------------
# kinematics

def _single_wall_run(n_pulses=36):
    chain = build_alternating_chain(11)
    return run_pxp_automaton(basis_state(chain, "00000101010"), n_pulses, record_states=True)


def test_single_wall_velocity_and_reflection():
    run = _single_wall_run()
    dists = [outcome_distribution(s) for s in run.states]
    peaks = position_histogram(dists, 1).peak_positions()
    assert None not in peaks
    # inbound: 3 pulses per site, 2 pulses on the boundary detector, then outbound
    expected = [4] * 3 + [3] * 3 + [2] * 3 + [1] * 2
    for j in range(2, 11):
        expected += [j] * 3
    assert peaks == expected[:len(peaks)]


def test_histogram_matches_exact_trajectory():
    run = _single_wall_run()
    hist = position_histogram([outcome_distribution(s) for s in run.states], 1)
    for state, d in zip(run.states, hist.density):
        pos = detect(_rounded(state)).positions
        assert np.flatnonzero(d > 0.5).tolist() == [p - 1 for p in pos]
        assert d.sum() == pytest.approx(1.0)


def test_sampled_histogram_tracks_peak(rng):
    run = _single_wall_run(12)
    exact = position_histogram([outcome_distribution(s) for s in run.states], 1).peak_positions()
    shots = [outcome_distribution(s).sample(50, rng) for s in run.states]
    hist = position_histogram(shots, 1)
    assert hist.peak_positions() == exact
    assert all(n == 50 for n in hist.n_conditioned)


def test_two_wall_collision_takes_two_pulses():
    chain = build_alternating_chain(13)
    run = run_pxp_automaton(basis_state(chain, "0100000000010"), 21, record_states=True)
    hist = position_histogram([outcome_distribution(s) for s in run.states], 2)
    seps = []
    for d in hist.density:
        left, right = np.flatnonzero(d > 0.5) + 1
        seps.append(int(right - left))
    # walls close in at one site each per 3 pulses; the contact configuration lasts 2
    assert seps == [7] * 3 + [5] * 3 + [3] * 3 + [1] * 2 + [3] * 3 + [5] * 3 + [7] * 3 + [9] * 2


def test_vacuum_orbit_k1_histogram_empty():
    chain = build_alternating_chain(11)
    run = run_pxp_automaton(vacuum(chain), 12, record_states=True)
    hist = position_histogram([outcome_distribution(s) for s in run.states], 1)
    assert all(d is None for d in hist.density)
    assert all(n == 0 for n in hist.n_conditioned)
    shots = ShotEnsemble.from_strings(["0" * 11] * 5)
    assert position_histogram([shots], 1).density == [None]


def test_histogram_rejects_negative_k():
    with pytest.raises(InvalidArgument):
        position_histogram([], -1)


def test_histogram_rows_layout():
    shots = ShotEnsemble.from_strings(["00000101010", "00000000000"])
    rows = list(position_histogram([shots], 1).rows())
    assert len(rows) == 10
    assert rows[3] == (0, 4, 1.0, 1.0)


def test_q_constant_on_orbit_from_basis_states(rng):
    chain = build_alternating_chain(11)
    for _ in range(10):
        bits = "".join(rng.choice(["0", "1"], size=11))
        if "11" in bits:
            continue
        run = run_pxp_automaton(basis_state(chain, bits), 12, record_states=True)
        qs = {mean_quasiparticle_number(s) for s in run.states}
        assert max(qs) - min(qs) < 1e-9


# --------------------------------------------------------------------------
# magnetization

def test_magnetization_examples():
    chain = build_alternating_chain(11)
    z2 = "".join("1" if s == "A" else "0" for s in chain.pattern)
    assert staggered_magnetization(basis_state(chain, z2)) == pytest.approx(1.0)
    assert staggered_magnetization(vacuum(chain)) == 0.0
    run = run_pxp_automaton(vacuum(chain), 12, record_states=True)
    m = [staggered_magnetization(s) for s in run.states]
    np.testing.assert_allclose(m, [0, 1, 1, 0, -1, -1, 0, 1, 1, 0, -1, -1, 0], atol=1e-12)
    np.testing.assert_allclose(classical_orbit(np.arange(13)), m, atol=1e-12)


def test_magnetization_needs_pattern_and_both_species():
    shots = ShotEnsemble.from_strings(["1010"])
    with pytest.raises(InvalidArgument):
        staggered_magnetization(shots)
    with pytest.raises(InvalidArgument):
        staggered_magnetization(shots, "AAAA")
    assert staggered_magnetization(shots, "ABAB") == 1.0


def test_decay_fit_recovers_synthetic_tau(rng):
    t = np.arange(1, 61)
    m = 0.95 * np.exp(-t / 70.0) * classical_orbit(t)
    fit = fit_magnetization_decay(t, m)
    assert fit.tau == pytest.approx(70.0, rel=1e-6)
    assert fit.amplitude == pytest.approx(0.95, rel=1e-6)
    noisy = m + rng.normal(scale=0.01, size=t.size)
    fit = fit_magnetization_decay(t, noisy, sigma=np.full(t.size, 0.01))
    assert abs(fit.tau - 70.0) < 3 * fit.tau_err


# --------------------------------------------------------------------------
# proliferation

def _growth(n, theta, pulses=14):
    run = run_pxp_automaton(vacuum(build_alternating_chain(n)), pulses, theta=theta, record_states=True)
    return quasiparticle_growth([outcome_distribution(s) for s in run.states])


def test_growth_zero_at_pi():
    curve = _growth(11, math.pi)
    assert not any(curve.steps % 3 == 0)
    np.testing.assert_allclose(curve.mean_q, 0.0, atol=1e-12)


def test_growth_increases_with_rotation_error():
    # at 11 sites and pulse 14 the 1.1 and 1.2 curves have already crossed
    q14 = [_growth(15, f * math.pi).mean_q[-1] for f in (1.0, 1.1, 1.2)]
    assert q14[0] < q14[1] < q14[2]
    under = [_growth(15, f * math.pi).mean_q[-1] for f in (0.9, 0.8)]
    assert under[0] < under[1]


def test_growth_keeps_mod3_when_asked():
    curve = _growth(7, 1.1 * math.pi, pulses=6)
    assert list(curve.steps) == [1, 2, 4, 5]
    run = run_pxp_automaton(vacuum(build_alternating_chain(7)), 6, theta=1.1 * math.pi, record_states=True)
    every = quasiparticle_growth([outcome_distribution(s) for s in run.states], exclude_mod3=False)
    assert list(every.steps) == list(range(7))
    np.testing.assert_allclose(every.mean_q[[1, 2, 4, 5]], curve.mean_q)


def test_growth_guide_is_optional():
    run = run_pxp_automaton(vacuum(build_alternating_chain(9)), 20, theta=1.2 * math.pi, record_states=True)
    curve = quasiparticle_growth([outcome_distribution(s) for s in run.states], fit_guide=True)
    assert curve.guide is not None and curve.guide[0] > 0
    assert _growth(9, math.pi).guide is None


def test_lost_atom_reads_two_quasiparticles():
    assert detect("00000100000").Q == 2
    d = Distribution(np.eye(1, 2**11, int("00000100000", 2)).ravel(), 11)
    assert mean_quasiparticle_number(d) == 2.0


def test_growth_stderr_from_shots(rng):
    run = run_pxp_automaton(vacuum(build_alternating_chain(9)), 5, theta=1.2 * math.pi, record_states=True)
    shots = [outcome_distribution(s).sample(400, rng) for s in run.states]
    curve = quasiparticle_growth(shots)
    exact = quasiparticle_growth([outcome_distribution(s) for s in run.states])
    assert np.all(curve.stderr > 0)
    assert np.all(np.abs(curve.mean_q - exact.mean_q) < 5 * curve.stderr)
