"""Named experiment pipelines driven by an ExperimentConfig.

Each pipeline returns an Artifacts bundle of tables (CSV), reports (JSON) and
shot files; the CLI only writes them out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import clifford as cl
from . import entanglement as ent
from .config import ExperimentConfig
from .errors import InvalidArgument, NoLaterData
from .fitting import fit_shape
from .lattice import ChainSpec, build_alternating_chain, chain_from_dict
from .physical import (EngineOptions, NoiseConfig, mediated_schedule, noise_from_dict,
                       optimize_mediated_detuning, pxp_schedule, run_trajectories, segment_from_dict,
                       DriveSegment)
from .qca_ideal import (MediatedLayer, masked_init_pulse, mediated_v_layer, run_native_graph_automaton,
                        run_pxp_automaton, run_step_sequence)
from .quasiparticle import (classical_orbit, fit_magnetization_decay, magnetization_from_populations,
                            mean_quasiparticle_number, position_histogram, quasiparticle_growth)
from .rng import STREAM_SAMPLING, make_rng
from .spam import SpamModel, correct, forward, table_model
from .statevec import (Distribution, PauliString, QuantumState, ShotEnsemble, basis_state, expect,
                       outcome_distribution, product_state, vacuum)


@dataclass
class Table:
    keys: list[str]
    values: list[str]
    rows: list[tuple] = field(default_factory=list)

    def add(self, *row):
        if len(row) != len(self.keys) + len(self.values):
            raise InvalidArgument("row width does not match the table header")
        self.rows.append(row)


@dataclass
class Artifacts:
    tables: dict[str, Table] = field(default_factory=dict)
    reports: dict[str, dict] = field(default_factory=dict)
    shots: dict[str, ShotEnsemble] = field(default_factory=dict)
    pattern: str | None = None


def _chain(cfg: ExperimentConfig, n_default: int, first: str = "A") -> ChainSpec:
    block = dict(cfg.chain)
    block.setdefault("n_sites", n_default)
    if "pattern" not in block:
        block.setdefault("first_species", first)
    chain = chain_from_dict(block)
    scale = cfg.params.get("blockade_scale")
    if scale is not None:
        # strengthens only the interspecies (nearest-neighbour) blockade
        chain = chain.with_c6(AB=chain.c6["AB"] * float(scale))
    return chain


def _noise(cfg: ExperimentConfig) -> NoiseConfig:
    block = dict(cfg.noise)
    block["seed"] = cfg.seed
    return noise_from_dict(block)


def _options(cfg: ExperimentConfig) -> EngineOptions:
    return EngineOptions(max_range=cfg.params.get("max_range"), c6_scale=float(cfg.params.get("c6_scale", 1.0)))


def _theta(params: dict, default_pi: float = 1.0) -> float:
    return math.pi * float(params.get("theta_pi", default_pi))


def _maybe_shots(art: Artifacts, cfg: ExperimentConfig, name: str, dist: Distribution, step: int, **meta):
    if cfg.shots > 0:
        rng = make_rng(cfg.seed, STREAM_SAMPLING, len(art.shots))
        art.shots[name] = dist.sample(cfg.shots, rng, {"step": step, "seed": cfg.seed, **meta})


def _population_table(pops: np.ndarray, err: np.ndarray | None = None) -> Table:
    t = Table(["step", "site"], ["mean", "stderr"])
    for s, row in enumerate(pops):
        for j, v in enumerate(row):
            t.add(s, j, float(v), float(err[s, j]) if err is not None else 0.0)
    return t


def _magnetization_table(pops: np.ndarray, pattern) -> tuple[Table, np.ndarray]:
    m = magnetization_from_populations(pops, pattern)
    t = Table(["step"], ["magnetization", "classical"])
    for s, v in enumerate(m):
        t.add(s, float(v), float(classical_orbit(s)))
    return t, m


def _physical_schedule(cfg: ExperimentConfig, chain: ChainSpec, default: list[DriveSegment]) -> list[DriveSegment]:
    out = []
    for k, block in enumerate(cfg.schedule):
        try:
            out.append(segment_from_dict(block))
        except InvalidArgument as exc:
            raise InvalidArgument(f"schedule entry {k}: {exc}") from None
    return out or default


# --------------------------------------------------------------------------

def run_pxp_orbit(cfg: ExperimentConfig) -> Artifacts:
    p = cfg.params
    chain = _chain(cfg, 21)
    n_pulses = int(p.get("n_pulses", 6))
    init = p.get("initial")
    state = basis_state(chain, init) if init else vacuum(chain)
    art = Artifacts(pattern="".join(chain.pattern))
    if cfg.engine == "ideal":
        if cfg.schedule:
            states = run_step_sequence(state, cfg.schedule)
        else:
            states = run_pxp_automaton(state, n_pulses, _theta(p), first_species=p.get("first_species", "A"),
                                       record_states=True).states
        pops, err = np.array([st.populations() for st in states]), None
        if cfg.shots > 0:
            for s, st in enumerate(states):
                _maybe_shots(art, cfg, f"step_{s:03d}", outcome_distribution(st), s)
    else:
        sched = _physical_schedule(cfg, chain, pxp_schedule(
            chain, n_pulses, _theta(p), first_species=p.get("first_species", "A"),
            nnn_compensation=bool(p.get("nnn_compensation", True)),
            detuning_error=p.get("detuning_error")))
        ens = run_trajectories(state, sched, _noise(cfg), _options(cfg))
        pops, err = ens.populations, ens.stderr
        if cfg.shots > 0:
            per = max(1, cfg.shots // len(ens.trajectories))
            for s in range(len(pops)):
                art.shots[f"step_{s:03d}"] = ens.sample(s, per, cfg.seed)
    art.tables["populations"] = _population_table(pops, err)
    if set(chain.pattern) == {"A", "B"}:
        art.tables["magnetization"], m = _magnetization_table(pops, chain.pattern)
        if p.get("fit_decay") and len(m) > 3:
            w = min(int(p.get("fit_window", 30)), len(m) - 1)
            fit = fit_magnetization_decay(np.arange(w + 1), m[:w + 1])
            art.reports["decay_fit"] = {"tau_pulses": fit.tau, "tau_err": fit.tau_err,
                                        "amplitude": fit.amplitude, "fit_window": w}
    return art


def _default_excite(chain: ChainSpec) -> list[int]:
    """B sites from the chain centre rightwards: one domain wall at the centre."""
    return [s for s in chain.sites_of("B") if s >= chain.n_sites // 2]


def _domain_wall_state(chain: ChainSpec, excite) -> QuantumState:
    excite = _default_excite(chain) if excite is None else excite
    mask = [s for s in chain.sites_of("B") if s not in set(excite)]
    return masked_init_pulse(vacuum(chain), mask, math.pi)


def run_quasiparticle(cfg: ExperimentConfig) -> Artifacts:
    p = cfg.params
    chain = _chain(cfg, 11)
    n_pulses = int(p.get("n_pulses", 30))
    k = int(p.get("k", 1))
    excite = p.get("excite")
    art = Artifacts(pattern="".join(chain.pattern))
    if cfg.engine == "ideal":
        if cfg.schedule:
            states = run_step_sequence(vacuum(chain), cfg.schedule)[1:]
        else:
            states = run_pxp_automaton(_domain_wall_state(chain, excite), n_pulses, _theta(p),
                                       record_states=True).states
        dists = [outcome_distribution(s) for s in states]
        pops, err = np.array([st.populations() for st in states]), None
    else:
        b_sites = chain.sites_of("B")
        excite = _default_excite(chain) if excite is None else excite
        init = DriveSegment.pulse("B", math.pi, mask=frozenset(s for s in b_sites if s not in set(excite)),
                                  label="masked init")
        sched = [init] + pxp_schedule(chain, n_pulses, _theta(p))
        ens = run_trajectories(vacuum(chain), sched, _noise(cfg), _options(cfg))
        dists = [ens.distribution(s) for s in range(1, len(ens.populations))]
        pops, err = ens.populations[1:], ens.stderr[1:]
    per_step = dists
    if cfg.shots > 0:
        per_step = []
        for s, d in enumerate(dists):
            _maybe_shots(art, cfg, f"step_{s:03d}", d, s)
            per_step.append(art.shots[f"step_{s:03d}"])
    hist = position_histogram(per_step, k)
    t = Table(["step", "position"], ["count", "n_conditioned"])
    for row in hist.rows():
        t.add(*row)
    art.tables["histogram"] = t
    q = Table(["step"], ["mean_q", "peak_position"])
    peaks = hist.peak_positions()
    for s, d in enumerate(per_step):
        q.add(s, mean_quasiparticle_number(d), -1 if peaks[s] is None else peaks[s])
    art.tables["quasiparticles"] = q
    art.tables["populations"] = _population_table(pops, err)
    return art


def run_rotation_scan(cfg: ExperimentConfig) -> Artifacts:
    p = cfg.params
    chain = _chain(cfg, 15)
    n_pulses = int(p.get("n_pulses", 14))
    thetas = [float(x) for x in p.get("thetas_pi", [1.0, 1.1, 1.2])]
    art = Artifacts()
    t = Table(["theta_pi", "step"], ["mean_q", "retained"])
    final = {}
    for th in thetas:
        run = run_pxp_automaton(vacuum(chain), n_pulses, math.pi * th, record_states=True)
        dists = [outcome_distribution(s) for s in run.states]
        for s, d in enumerate(dists):
            t.add(th, s, mean_quasiparticle_number(d), int(s % 3 != 0))
        final[str(th)] = mean_quasiparticle_number(dists[-1])
        growth = quasiparticle_growth(dists, fit_guide=True)
        if growth.guide:
            final[f"{th}_guide"] = {"saturation": growth.guide[0], "rate": growth.guide[1]}
    art.tables["growth"] = t
    art.reports["final_mean_q"] = final
    return art


def _branch_bits(chain: ChainSpec, start: str, n_pulses: int) -> list[str]:
    run = run_pxp_automaton(basis_state(chain, start), n_pulses, record_states=True)
    return ["".join(str(int(round(x))) for x in pops) for pops in run.populations]


def ghz_step_reports(chain: ChainSpec, n_pulses: int, center: int | None = None, n_angles: int | None = None):
    """Per-step GHZ support, estimator and exact overlap for growth from one B seed."""
    b_sites = chain.sites_of("B")
    center = b_sites[len(b_sites) // 2] if center is None else center
    state = masked_init_pulse(vacuum(chain), [s for s in b_sites if s != center], math.pi / 2)
    run = run_pxp_automaton(state, n_pulses, record_states=True)
    seed1 = ["0"] * chain.n_sites
    seed1[center] = "1"
    br0 = _branch_bits(chain, "0" * chain.n_sites, n_pulses)
    br1 = _branch_bits(chain, "".join(seed1), n_pulses)
    rows = []
    for s, st in enumerate(run.states):
        sites, pattern = ent.ghz_support(br0[s], br1[s])
        species = "".join(sorted({chain.pattern[k] for k in sites}))
        order = ent.harmonic_order(pattern)
        exact = ent.exact_ghz_overlap(st, sites, pattern)
        report = None
        if order > 0:
            m = n_angles or max(8, 4 * order + 4)
            angles = np.linspace(0, 2 * math.pi, m, endpoint=False)
            sweep = ent.parity_sweep_exact(st, sites, angles)
            report = ent.ghz_fidelity(outcome_distribution(st), sweep, sites, pattern)
        q = ent.ghz_population(outcome_distribution(st), sites, pattern)
        if report is None:
            report = ent._report(q, 0.0, q - 0.5, params={"order": 0},
                                 warnings=["no parity signature for this pattern"])
        rows.append({"step": s, "sites": sites, "pattern": pattern, "species": species,
                     "report": report, "exact": exact})
    return rows


def run_ghz_growth(cfg: ExperimentConfig) -> Artifacts:
    p = cfg.params
    chain = _chain(cfg, 11)
    rows = ghz_step_reports(chain, int(p.get("n_pulses", 5)), p.get("center"))
    art = Artifacts()
    t = Table(["step"], ["n_support", "species", "pattern", "population", "coherence", "fidelity",
                         "exact_overlap", "dual_bound"])
    reps = [r["report"] for r in rows]
    for k, r in enumerate(rows):
        try:
            bound = ent.ghz_dual_species_bound(reps, k).fidelity
        except NoLaterData:
            bound = float("nan")
        rep = r["report"]
        t.add(r["step"], len(r["sites"]), r["species"], r["pattern"], rep.population_term, rep.coherence_term,
              rep.fidelity, r["exact"], bound)
    art.tables["ghz"] = t
    art.reports["ghz"] = {str(r["step"]): {"sites": r["sites"], "pattern": r["pattern"],
                                            "fidelity": r["report"].fidelity, "exact_overlap": r["exact"]}
                          for r in rows}
    return art


def _bell_from_state_fn(state_fn: Callable[[Callable | None], Distribution], data, n_angles: int,
                        post: list[int] | None):
    """state_fn(transform) -> readout distribution after transform; handles flagging."""
    angles = np.linspace(0, 2 * math.pi, n_angles, endpoint=False)
    pop = state_fn(None)
    frac = None
    if post:
        pop, frac = ent.postselect(pop, post)
    vals = []
    for th in angles:
        d = state_fn(lambda st, th=th: ent.readout_state(st, data, math.pi / 4, th - math.pi / 2))
        if post:
            d, _ = ent.postselect(d, post)
        vals.append(d.parity(data))
    sweep = ent.ParitySweep(angles, np.array(vals), 2)
    return ent.bell_fidelity(pop, sweep, data, postselected_fraction=frac), sweep


def run_bell(cfg: ExperimentConfig) -> Artifacts:
    p = cfg.params
    chain = _chain(cfg, 3, first="B")
    data = list(chain.sites_of("B"))
    aux = list(chain.sites_of("A"))
    n_angles = int(p.get("n_angles", 16))
    art = Artifacts(pattern="".join(chain.pattern))
    if cfg.engine == "ideal":
        layer = MediatedLayer(delta=float(p.get("delta", 1 / math.sqrt(3))),
                              phi_extra=float(p.get("phi_extra", 0.0)))
        kets = ["+" if s == "B" else "0" for s in chain.pattern]
        st = mediated_v_layer(product_state(chain, kets), layer, form=p.get("form", "closed"))

        def fn(tr):
            return outcome_distribution(tr(st) if tr else st)

        rep, sweep = _bell_from_state_fn(fn, data, n_angles, None)
        out = {"F_C": rep.fidelity, "theta_star": rep.params["theta_star"], "A": rep.params["A"],
               "B": rep.params["B"], "P": rep.population_term, "delta": layer.delta, "alpha": layer.alpha,
               "warnings": rep.warnings}
    else:
        grid = np.arange(float(p.get("delta_min", 0.3)), float(p.get("delta_max", 2.0)) + 1e-9,
                         float(p.get("delta_step", 0.05)))
        noise = _noise(cfg)
        scan = optimize_mediated_detuning(grid, chain, noise, options=_options(cfg))
        sched = mediated_schedule(scan.delta_star, with_readout=False)
        ens = run_trajectories(vacuum(chain), sched, noise, _options(cfg))
        last = len(ens.populations) - 1

        def fn(tr):
            return ens.distribution(last, tr)

        rep, sweep = _bell_from_state_fn(fn, data, n_angles, None)
        flagged, _ = _bell_from_state_fn(fn, data, n_angles, aux)
        out = {"F_C": rep.fidelity, "F_C_flagged": flagged.fidelity,
               "postselected_fraction": flagged.postselected_fraction,
               "theta_star": rep.params["theta_star"], "A": rep.params["A"], "B": rep.params["B"],
               "P": rep.population_term, "delta_star": scan.delta_star, "warnings": rep.warnings}
        t = Table(["delta"], ["objective"])
        for g, o in zip(scan.grid, scan.objective):
            t.add(float(g), float(o))
        art.tables["detuning_scan"] = t
        if cfg.shots > 0:
            _maybe_shots(art, cfg, "population", fn(None), last)
    t = Table(["theta"], ["r", "r_fit"])
    for th, r in zip(sweep.angles, sweep.values):
        t.add(float(th), float(r), float(ent.r_fit(th, out["A"], out["B"], out["theta_star"])))
    art.tables["r_sweep"] = t
    art.reports["bell"] = out
    return art


def _cluster_values_ideal(n_data: int, n_alpha: int):
    chain = build_alternating_chain(2 * n_data - 1, first_species="B")
    data = list(chain.sites_of("B"))
    st = run_native_graph_automaton(vacuum(chain), 1)[1]
    alphas = np.linspace(0, 2 * math.pi, n_alpha, endpoint=False)
    ev = [ent.even_odd_readout(st, data, a, "even") for a in alphas]
    od = [ent.even_odd_readout(st, data, a, "odd") for a in alphas]
    return ent.stabilizer_scan(ev, od, alphas, data)


def _cluster_values_clifford(n_data: int):
    gens = cl.evolve_stabilizers(cl.zero_state_generators(n_data), cl.native_step_layers(n_data, 0.0))
    out = []
    for i in range(n_data):
        vals = {}
        for letter in "XY":
            f = {i: letter}
            if i > 0:
                f[i - 1] = "Z"
            if i < n_data - 1:
                f[i + 1] = "Z"
            vals[letter] = cl.stabilizer_expectation(gens, PauliString.from_sites(n_data, f))
        amp = math.hypot(vals["X"], vals["Y"])
        out.append((i, amp, math.atan2(vals["Y"], vals["X"]) if amp else 0.0, i in (0, n_data - 1)))
    return out


def run_cluster(cfg: ExperimentConfig) -> Artifacts:
    p = cfg.params
    n_data = int(p.get("n_data", 5 if cfg.engine == "ideal" else 17))
    art = Artifacts()
    if cfg.engine == "ideal":
        vals = [(v.index, v.value, v.phase, v.boundary) for v in _cluster_values_ideal(n_data, int(p.get("n_alpha", 16)))]
    else:
        vals = _cluster_values_clifford(n_data)
    t = Table(["index"], ["value", "phase", "boundary"])
    for i, v, ph, b in vals:
        t.add(i, float(v), float(ph), int(b))
    art.tables["stabilizers"] = t
    values = [v for _, v, _, _ in vals]
    bulk = [ph for _, _, ph, b in vals if not b]
    ref = math.atan2(np.mean(np.sin(bulk)), np.mean(np.cos(bulk))) if bulk else 0.0
    art.reports["cluster"] = {
        "mean_stabilizer": float(np.mean(values)),
        "all_above_half": bool(all(v > 0.5 for v in values)),
        "certified_cuts": ent.witness_cuts(values),
        "boundary_phase_shift": [math.remainder(ph - ref, 2 * math.pi) for _, _, ph, b in vals if b],
    }
    return art


def _expand_r(label: str, alpha: float) -> list[tuple[complex, str]]:
    """R(alpha) = cos(alpha) X + sin(alpha) Y expanded into Pauli strings."""
    terms = [(1.0 + 0j, "")]
    for c in label:
        if c == "R":
            terms = [(w * math.cos(alpha), s + "X") for w, s in terms] + \
                    [(w * math.sin(alpha), s + "Y") for w, s in terms]
        else:
            terms = [(w, s + c) for w, s in terms]
    return terms


def _native_generators(n: int, steps: int) -> list[list[PauliString]]:
    gens = cl.zero_state_generators(n)
    out = [gens]
    for k in range(steps):
        gens = cl.evolve_stabilizers(gens, cl.native_step_layers(n, 0.0 if k == 0 else math.pi / 2))
        out.append(gens)
    return out


def run_graph_qca(cfg: ExperimentConfig) -> Artifacts:
    p = cfg.params
    n = int(p.get("n_data", 5))
    n_steps = int(p.get("n_steps", 5))
    n_alpha = int(p.get("n_alpha", 24))
    alphas = np.linspace(0, 2 * math.pi, n_alpha, endpoint=False)
    art = Artifacts()
    ops = Table(["step", "label"], ["shape", "value", "ideal"])
    exps = Table(["step", "label"], ["value"])
    strings = list(cl.all_paulis(n, max_weight=2))
    if cfg.engine == "ideal":
        chain = build_alternating_chain(2 * n - 1, first_species="B")
        data = list(chain.sites_of("B"))
        states = run_native_graph_automaton(vacuum(chain), n_steps)
        for s, st in enumerate(states):
            if s in ent.GRAPH_OPERATOR_TABLE:
                ev = [ent.even_odd_readout(st, data, a, "even") for a in alphas]
                od = [ent.even_odd_readout(st, data, a, "odd") for a in alphas]
                for ov in ent.graph_operator_scan(ev, od, alphas, s, data):
                    ops.add(s, ov.label, ov.shape, ov.value, ov.ideal)
            for ps in strings:
                full = PauliString.from_sites(chain.n_sites, {data[k]: c for k, c in enumerate(ps.letters) if c != "I"})
                exps.add(s, ps.letters, expect(st, full))
    else:
        gen_steps = _native_generators(n, n_steps)
        for s, gens in enumerate(gen_steps):
            if s in ent.GRAPH_OPERATOR_TABLE:
                for labels, shape, ideal in ent.GRAPH_OPERATOR_TABLE[s]:
                    for lab in labels:
                        y = []
                        for a in alphas:
                            y.append(sum(w.real * cl.stabilizer_expectation(gens, PauliString(st))
                                         for w, st in _expand_r(lab, a)))
                        y = np.array(y)
                        if shape == "na":
                            val = abs(float(y.mean()))
                        else:
                            val = fit_shape(alphas, y, shape).peak
                        ops.add(s, lab, shape, val, ideal)
            for ps in strings:
                exps.add(s, ps.letters, cl.stabilizer_expectation(gens, ps))
        gl = Table(["start", "step"], ["operator", "label", "family_changed"])
        for start in (cl.u_glider(0, n), cl.d_glider(n, n)):
            name = cl.glider_label(start)
            for g in cl.glider_trajectory(start, 2 * (n + 1), kick=p.get("kick", "h")):
                gl.add(name, g.step, str(g.operator), g.label or "", int(g.family_changed))
        art.tables["gliders"] = gl
    art.tables["operators"] = ops
    art.tables["expectations"] = exps
    return art


def run_spam_demo(cfg: ExperimentConfig) -> Artifacts:
    p = cfg.params
    chain = _chain(cfg, 4)
    model = SpamModel.from_dict(cfg.spam) if cfg.spam and "preset" not in cfg.spam else \
        table_model(corrected=cfg.spam.get("preset", "table") != "raw")
    kind = p.get("state", "ghz")
    if kind == "ghz":
        true = np.zeros(2**chain.n_sites)
        true[0] = true[-1] = 0.5
    elif kind == "uniform":
        true = np.full(2**chain.n_sites, 2.0**-chain.n_sites)
    else:
        raise InvalidArgument(f"unknown spam_demo state {kind!r}")
    measured = forward(true, chain.pattern, model)
    art = Artifacts(pattern="".join(chain.pattern))
    if cfg.shots > 0:
        shots = Distribution(measured, chain.n_sites).sample(cfg.shots, make_rng(cfg.seed, STREAM_SAMPLING))
        art.shots["measured"] = shots
        observed = shots.to_distribution().probs
    else:
        observed = measured
    fixed = correct(observed, chain.pattern, model)
    t = Table(["bitstring"], ["true", "measured", "corrected"])
    for i in range(true.size):
        t.add(format(i, f"0{chain.n_sites}b"), float(true[i]), float(observed[i]), float(fixed.probs[i]))
    art.tables["distribution"] = t
    art.reports["spam"] = {"clipped_mass": fixed.clipped_mass,
                           "params": {k: v.to_dict() for k, v in model.params.items()},
                           "ghz_population_measured": float(observed[0] + observed[-1]),
                           "ghz_population_corrected": float(fixed.probs[0] + fixed.probs[-1])}
    return art


PIPELINES: dict[str, Callable[[ExperimentConfig], Artifacts]] = {
    "pxp_orbit": run_pxp_orbit,
    "quasiparticle": run_quasiparticle,
    "rotation_scan": run_rotation_scan,
    "ghz_growth": run_ghz_growth,
    "bell": run_bell,
    "cluster": run_cluster,
    "graph_qca": run_graph_qca,
    "spam_demo": run_spam_demo,
}


def run_pipeline(cfg: ExperimentConfig) -> Artifacts:
    art = PIPELINES[cfg.experiment](cfg)
    for sh in art.shots.values():
        if art.pattern:
            sh.meta.setdefault("pattern", art.pattern)
    return art
