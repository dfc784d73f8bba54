"""Discrete repeated-measurement chains.

Each step selects a method through the protocol, samples an outcome
from the mixture law induced by the current pointer distribution, and
applies the Bayes update to the pointer weights (and the matching
sandwich update to the density matrix when the scenario is quantum).
Pointer weights are optionally tracked as unnormalised log-weights so
that the exponential decay of non-limit states never underflows.

Trajectories are reproducible under any execution schedule: trajectory
``j`` of a run with master seed ``s`` always consumes the stream of the
counter-based generator keyed by ``(s, j)``, two doubles per step (one
method-selection draw, which deterministic protocols ignore, and one
outcome draw).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import analysis
from .core import (
    LOG_FLOOR,
    DegenerateStateError,
    EnumerationSizeError,
    NumericalUnderflowError,
    ValidationError,
    as_distribution,
    normalize_from_log,
)
from .measurement import MeasurementMethod, PointerModel, SectorPartition, compute_sectors
from .protocol import (
    CallbackPolicy,
    DeterministicFeedbackPolicy,
    MarkovFeedbackPolicy,
    Policy,
    RandomPolicy,
    first_method,
    next_method,
    selection_weight,
    validate_policy,
)

_RNG_BLOCK = 512


@dataclass(frozen=True)
class DiscreteScenario:
    """A complete discrete measurement setup.

    Derived fields (sector partition, edge enumeration, quantum flag)
    are computed once at construction; instances are immutable and safe
    to share across parallel workers.
    """

    name: str
    pointer: PointerModel
    methods: tuple
    policy: Policy
    notes: str = ""

    def __post_init__(self):
        methods = tuple(self.methods)
        if not methods:
            raise ValidationError("scenario needs at least one method")
        ids = [m.id for m in methods]
        if len(ids) != len(set(ids)):
            raise ValidationError("method ids must be unique")
        for m in methods:
            if m.probs.shape[1] != self.pointer.dim:
                raise ValidationError(f"method {m.id!r} does not match the pointer dimension")
        validate_policy(self.policy, methods)
        object.__setattr__(self, "methods", methods)
        object.__setattr__(self, "_sectors", compute_sectors(methods, self.pointer.labels))
        edges = tuple((m.id, o) for m in methods for o in m.outcomes)
        object.__setattr__(self, "_edges", edges)
        object.__setattr__(self, "_quantum", all(m.quantum for m in methods))

    @property
    def sectors(self) -> SectorPartition:
        return self._sectors

    @property
    def edges(self) -> tuple:
        """All (method id, outcome) pairs, in method-major order."""
        return self._edges

    @property
    def quantum(self) -> bool:
        return self._quantum

    @property
    def method_ids(self) -> tuple:
        return tuple(m.id for m in self.methods)

    def method(self, id: str) -> MeasurementMethod:
        for m in self.methods:
            if m.id == id:
                return m
        raise KeyError(id)

    def edge_index(self, method_id: str, outcome) -> int:
        return self._edges.index((method_id, outcome))


@dataclass
class RunConfig:
    """Knobs for trajectory runs.

    ``log_space`` defaults to on for runs longer than 1000 steps.
    ``stop_threshold`` is on the sector mass: the run halts once the
    largest sector holds at least ``1 - stop_threshold`` of the weight
    (pointer weights inside a degenerate sector never localise).
    """

    max_steps: int = 10_000
    stop_threshold: float = 1e-9
    record_every: int = 0
    log_space: bool | None = None
    qhat0: np.ndarray | None = None
    track_density: bool | None = None
    keep_history: bool = False
    localization_levels: tuple = ()
    record_pairs: tuple = ()

    def __post_init__(self):
        if not (0.0 < self.stop_threshold < 1.0):
            raise ValidationError("stop_threshold must lie in (0, 1)")
        if self.max_steps < 1:
            raise ValidationError("max_steps must be positive")

    def resolve_log_space(self) -> bool:
        return self.max_steps > 1000 if self.log_space is None else bool(self.log_space)


@dataclass
class TrajectoryState:
    """Mutable per-trajectory state for the reference (single-step) API."""

    n: int
    q: np.ndarray
    qhat: np.ndarray | None
    a: np.ndarray | None
    phases: np.ndarray | None
    counts: np.ndarray
    current_method: str | None
    log: list = field(default_factory=list)


@dataclass(frozen=True)
class CollapseReport:
    """Outcome of one trajectory."""

    index: int
    steps: int
    converged: bool
    sector: int
    sector_labels: tuple
    final_q: np.ndarray
    final_qhat: np.ndarray | None
    final_density: np.ndarray | None
    final_compensated: np.ndarray | None
    counts: np.ndarray
    localization: dict
    decay_rates: dict

    def to_jsonable(self) -> dict:
        out = {
            "index": self.index,
            "steps": self.steps,
            "converged": self.converged,
            "sector": self.sector,
            "sector_labels": list(self.sector_labels),
            "final_q": [float(x) for x in self.final_q],
            "counts": [int(c) for c in self.counts],
            "localization": {str(k): list(v) for k, v in self.localization.items()},
            "decay_rates": {str(k): (None if v is None or not np.isfinite(v) else float(v))
                            for k, v in self.decay_rates.items()},
        }
        if self.final_qhat is not None:
            out["final_qhat"] = [float(x) for x in self.final_qhat]
        if self.final_compensated is not None:
            out["final_compensated_re"] = self.final_compensated.real.tolist()
            out["final_compensated_im"] = self.final_compensated.imag.tolist()
        return out


# ---------------------------------------------------------------------------
# single-step operations (reference implementations)

def outcome_mixture(q, method: MeasurementMethod) -> np.ndarray:
    """Law of the next outcome: pi(i) = sum_b q(b) p(i|b)."""
    return method.probs @ np.asarray(q, dtype=float)


def sample_outcome(q, method: MeasurementMethod, rng: np.random.Generator):
    pi = outcome_mixture(q, method)
    u = rng.random()
    idx = min(int(np.searchsorted(np.cumsum(pi), u, side="right")), len(pi) - 1)
    return method.outcomes[idx]


def bayes_update(q, method: MeasurementMethod, outcome) -> np.ndarray:
    """Posterior pointer weights after observing ``outcome``.

    Pointer states are fixed points: a delta distribution stays put.
    """
    q = np.asarray(q, dtype=float)
    row = method.probs[method.outcome_index(outcome)]
    pi = float(row @ q)
    if pi < 1e-300:
        raise NumericalUnderflowError(
            "outcome probability underflowed in linear space; enable log_space")
    new = q * row / pi
    if np.any((new == 0.0) & (q > 0.0) & (row > 0.0)):
        raise NumericalUnderflowError(
            "pointer weight underflowed in linear space; enable log_space")
    return new


def trial_update(qhat, method: MeasurementMethod, outcome) -> np.ndarray:
    """Bayes update of a trial distribution (same map, different input).

    The trial weights follow the observed outcomes but the outcomes are
    drawn from the true law, so the trial process is not a martingale.
    """
    return bayes_update(qhat, method, outcome)


def density_update(a, method: MeasurementMethod, outcome) -> np.ndarray:
    """Sandwich update A'(a,b) = A(a,b) M(i|a) M(i|b)* / pi(i)."""
    if not method.quantum:
        raise ValidationError(f"method {method.id!r} declares no amplitudes")
    a = np.asarray(a, dtype=complex)
    i = method.outcome_index(outcome)
    v = method.amplitudes[i]
    pi = float(np.real(np.diag(a)) @ method.probs[i])
    if pi < 1e-300:
        raise NumericalUnderflowError("outcome probability underflowed; enable log_space")
    return a * np.outer(v, v.conj()) / pi


def compensator_update(phases, pointer: PointerModel, method: MeasurementMethod, outcome) -> np.ndarray:
    """Advance the diagonal compensating phases by one cycle.

    phi_a grows by dt (E_a + theta(i|a)); conjugating the density
    matrix with exp(i phi) removes the deterministic and
    measurement-induced phase winding so the remainder can converge.
    """
    if method.theta is None:
        raise ValidationError(f"method {method.id!r} declares no phases")
    i = method.outcome_index(outcome)
    return np.asarray(phases, dtype=float) + pointer.dt * (pointer.energies + method.theta[i])


def compensated_matrix(a, phases) -> np.ndarray:
    """Apply the accumulated compensation: Atilde = U* A U with U = diag(exp(-i phi))."""
    u = np.exp(1j * np.asarray(phases, dtype=float))
    return np.asarray(a, dtype=complex) * np.outer(u, u.conj())


def advance(state: TrajectoryState, scenario: DiscreteScenario, method_id: str, outcome) -> None:
    """Apply one full cycle to a TrajectoryState (reference path)."""
    method = scenario.method(method_id)
    if state.a is not None:
        state.a = density_update(state.a, method, outcome)
    if state.phases is not None:
        state.phases = compensator_update(state.phases, scenario.pointer, method, outcome)
    if state.qhat is not None:
        state.qhat = trial_update(state.qhat, method, outcome)
    state.q = bayes_update(state.q, method, outcome)
    state.counts[scenario.edge_index(method_id, outcome)] += 1
    state.n += 1
    state.log.append((method_id, outcome))


# ---------------------------------------------------------------------------
# compiled tables and the vectorised runner

class _Tables:
    def __init__(self, scenario: DiscreteScenario):
        self.scenario = scenario
        self.d = scenario.pointer.dim
        self.methods = scenario.methods
        self.n_methods = len(scenario.methods)
        self.probs = [m.probs for m in scenario.methods]
        with np.errstate(divide="ignore"):
            self.logp = [np.log(m.probs) for m in scenario.methods]
        self.amps = [m.amplitudes for m in scenario.methods]
        self.theta = [m.theta for m in scenario.methods]
        self.offsets = np.cumsum([0] + [m.n_outcomes for m in scenario.methods])
        self.n_edges = int(self.offsets[-1])
        self.sector_mat = scenario.sectors.mass_matrix()
        self.energies = scenario.pointer.energies
        self.dt = scenario.pointer.dt
        pol = scenario.policy
        ids = list(scenario.method_ids)
        if isinstance(pol, RandomPolicy):
            self.kind = "random"
            self.first_cum = np.cumsum([pol.c.get(o, 0.0) for o in ids])
        elif isinstance(pol, MarkovFeedbackPolicy):
            self.kind = "markov"
            self.first_cum = np.cumsum([pol.c0.get(o, 0.0) for o in ids])
            kern = np.zeros((self.n_edges, self.n_methods))
            for e, (o, i) in enumerate(scenario.edges):
                row = pol.kernel[(o, i)]
                kern[e] = [row.get(o2, 0.0) for o2 in ids]
            self.kern_cum = np.cumsum(kern, axis=1)
        elif isinstance(pol, DeterministicFeedbackPolicy):
            self.kind = "deterministic"
            self.first_idx = ids.index(pol.b0)
            self.rule = np.array([ids.index(pol.rule[(o, i)]) for (o, i) in scenario.edges])
        else:
            self.kind = "callback"
            self.fn = pol.fn
            self.id_index = {o: k for k, o in enumerate(ids)}

    def first_methods(self, u: np.ndarray, rngs=None, indices=None) -> np.ndarray:
        if self.kind == "deterministic":
            return np.full(u.shape[0], self.first_idx, dtype=int)
        if self.kind == "callback":
            return np.array([self.id_index[self.fn(0, None, None)] for _ in range(u.shape[0])])
        return np.minimum(np.searchsorted(self.first_cum, u, side="right"), self.n_methods - 1)

    def next_methods(self, edges: np.ndarray, u: np.ndarray, step: int) -> np.ndarray:
        if self.kind == "random":
            return np.minimum(np.searchsorted(self.first_cum, u, side="right"), self.n_methods - 1)
        if self.kind == "markov":
            rows = self.kern_cum[edges]
            return np.minimum((u[:, None] > rows).sum(axis=1), self.n_methods - 1)
        if self.kind == "deterministic":
            return self.rule[edges]
        out = np.empty(edges.shape[0], dtype=int)
        for j, e in enumerate(edges):
            o, i = self.scenario.edges[e]
            out[j] = self.id_index[self.fn(step, (o, i), None)]
        return out


@dataclass
class EnsembleResult:
    reports: list
    histories: list | None = None
    records: list | None = None

    def sector_indices(self) -> np.ndarray:
        return np.array([r.sector for r in self.reports], dtype=int)


def trajectory_rng(master_seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for one trajectory: key = (master seed, index)."""
    return np.random.Generator(np.random.Philox(key=np.array(
        [np.uint64(master_seed), np.uint64(index)], dtype=np.uint64)))


def run_ensemble(scenario: DiscreteScenario, config: RunConfig, n_trajectories: int,
                 master_seed: int, first_index: int = 0) -> EnsembleResult:
    """Run ``n_trajectories`` independent trajectories, vectorised.

    Results are identical to running each trajectory alone because
    every trajectory draws from its own ``(seed, index)`` stream.
    """
    tab = _Tables(scenario)
    n = int(n_trajectories)
    d = tab.d
    log_mode = config.resolve_log_space()
    track_density = scenario.quantum if config.track_density is None else config.track_density
    if track_density and not scenario.quantum:
        raise ValidationError("density tracking requires amplitudes or phases on every method")
    qhat0 = None
    if config.qhat0 is not None:
        qhat0 = as_distribution(config.qhat0, name="qhat0")
        if np.any((qhat0 <= 0) & (scenario.pointer.q0 > 0)):
            raise ValidationError("trial distribution must be positive wherever q0 is positive")

    q0 = scenario.pointer.q0
    with np.errstate(divide="ignore"):
        logq = np.tile(np.log(q0), (n, 1))
        logqh = np.tile(np.log(qhat0), (n, 1)) if qhat0 is not None else None
    q_lin = np.tile(q0, (n, 1))
    qh_lin = np.tile(qhat0, (n, 1)) if qhat0 is not None else None
    a = np.tile(scenario.pointer.a0, (n, 1, 1)) if track_density else None
    phases = np.zeros((n, d)) if track_density else None
    counts = np.zeros((n, tab.n_edges), dtype=np.int64)

    levels = tuple(sorted(config.localization_levels))
    loc_step = np.full((n, len(levels)), -1, dtype=int)
    loc_sector = np.full((n, len(levels)), -1, dtype=int)

    history = None
    if config.keep_history:
        history = np.full((n, config.max_steps + 1, d), np.nan)
        history[:, 0, :] = _normalized_log(logq) if log_mode else np.log(q_lin)

    rngs = [trajectory_rng(master_seed, first_index + j) for j in range(n)]
    block = min(_RNG_BLOCK, config.max_steps)
    bufs = np.empty((n, block, 2))
    for j in range(n):
        bufs[j] = rngs[j].random((block, 2))

    active = np.arange(n)
    cur = np.empty(n, dtype=int)
    prev_edge = np.full(n, -1, dtype=int)
    stop_steps = np.full(n, config.max_steps, dtype=int)
    converged = np.zeros(n, dtype=bool)
    records = [] if config.record_every > 0 else None

    thresh = 1.0 - config.stop_threshold
    for step in range(1, config.max_steps + 1):
        if active.size == 0:
            break
        col = (step - 1) % block
        if col == 0 and step > 1:
            for j in active:
                bufs[j] = rngs[j].random((block, 2))
        u_m = bufs[active, col, 0]
        if step == 1:
            cur[active] = tab.first_methods(u_m)
        else:
            cur[active] = tab.next_methods(prev_edge[active], u_m, step - 1)

        qs = _normalized_log(logq[active]) if log_mode else q_lin[active]
        u_o = bufs[active, col, 1]
        for midx in np.unique(cur[active]):
            sel = active[cur[active] == midx]
            rel = np.flatnonzero(cur[active] == midx)
            p = tab.probs[midx]
            pi = qs[rel] @ p.T
            cum = np.cumsum(pi, axis=1)
            i_idx = np.minimum((u_o[rel, None] > cum).sum(axis=1), p.shape[0] - 1)
            e = tab.offsets[midx] + i_idx
            counts[sel, e] += 1
            prev_edge[sel] = e
            if log_mode:
                logq[sel] += tab.logp[midx][i_idx]
                logq[sel] -= logq[sel].max(axis=1, keepdims=True)
                if logqh is not None:
                    logqh[sel] += tab.logp[midx][i_idx]
                    logqh[sel] -= logqh[sel].max(axis=1, keepdims=True)
            else:
                rows = p[i_idx]
                pis = pi[np.arange(len(rel)), i_idx]
                new = q_lin[sel] * rows / pis[:, None]
                if np.any((new == 0.0) & (q_lin[sel] > 0.0) & (rows > 0.0)):
                    raise NumericalUnderflowError(
                        "pointer weight underflowed in linear space; rerun with log_space=True")
                q_lin[sel] = new
                if qh_lin is not None:
                    rows_h = rows
                    pih = (qh_lin[sel] * rows_h).sum(axis=1)
                    if np.any(pih < 1e-300):
                        raise NumericalUnderflowError(
                            "trial weight underflowed in linear space; rerun with log_space=True")
                    qh_lin[sel] = qh_lin[sel] * rows_h / pih[:, None]
            if a is not None:
                v = tab.amps[midx][i_idx]
                pis = pi[np.arange(len(rel)), i_idx]
                a[sel] = a[sel] * (v[:, :, None] * v[:, None, :].conj()) / pis[:, None, None]
                phases[sel] += tab.dt * (tab.energies[None, :] + tab.theta[midx][i_idx])

        q_now = _normalized_log(logq[active]) if log_mode else q_lin[active]
        masses = q_now @ tab.sector_mat.T
        top_sector = np.argmax(masses, axis=1)
        top = masses[np.arange(active.size), top_sector]
        if history is not None:
            with np.errstate(divide="ignore"):
                history[active, step, :] = _normalized_log(logq[active]) if log_mode else np.log(q_lin[active])
        if records is not None and step % config.record_every == 0:
            records.append(_record_rows(scenario, active, cur, prev_edge, q_now, masses,
                                        a, phases, step, config.record_pairs, tab))
        for li, level in enumerate(levels):
            hit = (top >= level) & (loc_step[active, li] < 0)
            loc_step[active[hit], li] = step
            loc_sector[active[hit], li] = top_sector[hit]

        done = top >= thresh
        if np.any(done):
            idx = active[done]
            stop_steps[idx] = step
            converged[idx] = True
            active = active[~done]

    reports = []
    for j in range(n):
        qj = _normalized_log(logq[j]) if log_mode else q_lin[j]
        masses = tab.sector_mat @ qj
        sec = int(np.argmax(masses))
        qhj = None
        if qhat0 is not None:
            qhj = _normalized_log(logqh[j]) if log_mode else qh_lin[j]
        aj = a[j] if a is not None else None
        atilde = compensated_matrix(aj, phases[j]) if aj is not None else None
        rates: dict = {}
        if history is not None:
            rates = _decay_rates(scenario, history[j], int(stop_steps[j]), sec)
        loc = {levels[li]: (int(loc_step[j, li]) if loc_step[j, li] >= 0 else None,
                            int(loc_sector[j, li]) if loc_sector[j, li] >= 0 else None)
               for li in range(len(levels))}
        reports.append(CollapseReport(
            index=first_index + j,
            steps=int(stop_steps[j]),
            converged=bool(converged[j]),
            sector=sec,
            sector_labels=scenario.sectors.sectors[sec],
            final_q=qj,
            final_qhat=qhj,
            final_density=aj,
            final_compensated=atilde,
            counts=counts[j],
            localization=loc,
            decay_rates=rates,
        ))
    histories = None
    if history is not None:
        histories = [history[j, :stop_steps[j] + 1, :] for j in range(n)]
    return EnsembleResult(reports=reports, histories=histories, records=records)


def run_trajectory(scenario: DiscreteScenario, config: RunConfig, master_seed: int,
                   index: int = 0) -> tuple[CollapseReport, EnsembleResult]:
    """Run one trajectory, drawing from the same per-index stream as an ensemble would."""
    res = run_ensemble(scenario, config, 1, master_seed, first_index=index)
    return res.reports[0], res


def _normalized_log(logw: np.ndarray) -> np.ndarray:
    m = logw.max(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):
        w = np.exp(logw - m)
    w[~np.isfinite(w)] = 0.0
    return w / w.sum(axis=-1, keepdims=True)


def _decay_rates(scenario: DiscreteScenario, hist: np.ndarray, n_stop: int, sector: int) -> dict:
    rates = {}
    in_sector = set(scenario.sectors.members(sector).tolist())
    lo = n_stop // 2
    ns = np.arange(lo, n_stop + 1)
    for aidx, label in enumerate(scenario.pointer.labels):
        if aidx in in_sector:
            continue
        ys = hist[lo:n_stop + 1, aidx]
        ok = np.isfinite(ys) & (ys > LOG_FLOOR)
        if ok.sum() < 3:
            rates[label] = None
            continue
        fit = analysis.fit_decay_rate(ns[ok], ys[ok])
        rates[label] = fit.rate
    return rates


def _record_rows(scenario, active, cur, prev_edge, q_now, masses, a, phases, step,
                 pairs, tab) -> list:
    rows = []
    for rel, j in enumerate(active):
        o, i = scenario.edges[prev_edge[j]]
        row = {"trajectory": int(j), "n": step, "method": o, "outcome": i}
        for aidx, label in enumerate(scenario.pointer.labels):
            row[f"q_{label}"] = float(q_now[rel, aidx])
        for s in range(masses.shape[1]):
            row[f"sector_{s}"] = float(masses[rel, s])
        if a is not None and pairs:
            at = compensated_matrix(a[j], phases[j])
            for (la, lb) in pairs:
                ia, ib = scenario.pointer.index(la), scenario.pointer.index(lb)
                row[f"reA_{la}_{lb}"] = float(a[j][ia, ib].real)
                row[f"imA_{la}_{lb}"] = float(a[j][ia, ib].imag)
                row[f"reAt_{la}_{lb}"] = float(at[ia, ib].real)
                row[f"imAt_{la}_{lb}"] = float(at[ia, ib].imag)
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# exact enumeration

@dataclass(frozen=True)
class ChainTree:
    """Exact distribution over all outcome sequences of fixed length.

    Leaves are weighted by their full path probability (method
    selection included); zero-probability branches are pruned, so leaf
    probabilities still sum to one.
    """

    n: int
    probs: np.ndarray
    q: np.ndarray
    qhat: np.ndarray | None
    amp: np.ndarray | None
    edges: np.ndarray
    q0: np.ndarray

    def expected_q(self) -> np.ndarray:
        return self.probs @ self.q

    def expected_qhat(self) -> np.ndarray:
        if self.qhat is None:
            raise ValidationError("tree was built without a trial distribution")
        return self.probs @ self.qhat

    def leaf_density(self, a0: np.ndarray) -> np.ndarray:
        """Per-leaf density matrices from the amplitude products."""
        if self.amp is None:
            raise ValidationError("tree was built for a classical scenario")
        a0 = np.asarray(a0, dtype=complex)
        norm = (self.q0[None, :] * np.abs(self.amp) ** 2).sum(axis=1)
        return a0[None, :, :] * (self.amp[:, :, None] * self.amp[:, None, :].conj()) / norm[:, None, None]


def enumerate_chain(scenario: DiscreteScenario, n_max: int, qhat0=None,
                    max_leaves: int = 1_000_000) -> ChainTree:
    """Exhaustively expand the first ``n_max`` steps of the chain.

    Branches carry ``v(a) = q0(a) prod p(i_k|a)`` so leaf weights,
    posteriors and (for quantum scenarios) amplitude products come out
    of one pass.
    """
    tab = _Tables(scenario)
    if tab.kind == "callback":
        raise ValidationError("enumeration needs a declarative policy")
    est = (sum(m.n_outcomes for m in scenario.methods)) ** n_max
    if est > max_leaves:
        raise EnumerationSizeError(
            f"enumeration would produce up to {est} leaves (> {max_leaves})")
    q0 = scenario.pointer.q0
    qhat = None if qhat0 is None else as_distribution(qhat0, name="qhat0")
    quantum = scenario.quantum

    leaves_p, leaves_q, leaves_qh, leaves_amp, leaves_e = [], [], [], [], []

    def descend(depth, prev, v, vh, amp, weight, edges_acc):
        if depth == n_max:
            tot = v.sum()
            leaves_p.append(weight * tot)
            leaves_q.append(v / tot)
            if vh is not None:
                leaves_qh.append(vh / vh.sum())
            if amp is not None:
                leaves_amp.append(amp)
            leaves_e.append(edges_acc)
            return
        for midx, m in enumerate(scenario.methods):
            w_sel = selection_weight(scenario.policy, prev, m.id)
            if w_sel == 0.0:
                continue
            for i_idx, outc in enumerate(m.outcomes):
                row = m.probs[i_idx]
                v2 = v * row
                if v2.sum() == 0.0:
                    continue
                vh2 = None if vh is None else vh * row
                amp2 = None if amp is None else amp * m.amplitudes[i_idx]
                descend(depth + 1, (m.id, outc), v2, vh2, amp2,
                        weight * w_sel, edges_acc + [tab.offsets[midx] + i_idx])

    descend(0, None, q0.astype(float), None if qhat is None else qhat.astype(float),
            np.ones(tab.d, dtype=complex) if quantum else None, 1.0, [])
    probs = np.array(leaves_p)
    tree = ChainTree(
        n=n_max,
        probs=probs,
        q=np.array(leaves_q),
        qhat=np.array(leaves_qh) if leaves_qh else None,
        amp=np.array(leaves_amp) if leaves_amp else None,
        edges=np.array(leaves_e, dtype=int),
        q0=q0,
    )
    if abs(probs.sum() - 1.0) > 1e-12:
        raise ValidationError(f"leaf probabilities sum to {probs.sum()!r}")
    return tree
