"""Method-selection protocols.

The next measurement method may be drawn independently each step
(random protocol), from a kernel conditioned on the previous method and
outcome (Markovian feedback), or by a deterministic feedback rule. All
three are positive weight systems ``d_n`` on method sequences whose
marginals telescope consistently, so they never use information from
the future.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .core import MultiplicityError, ProtocolError, ValidationError, as_distribution, stationary_distribution
from .measurement import MeasurementMethod


def _check_table(table: Mapping[str, float], ids: Sequence[str], what: str) -> dict[str, float]:
    unknown = set(table) - set(ids)
    if unknown:
        raise ProtocolError(f"{what} references unknown methods {sorted(unknown)}")
    full = {o: float(table.get(o, 0.0)) for o in ids}
    as_distribution(np.array([full[o] for o in ids]), name=what)
    return full


@dataclass(frozen=True)
class RandomPolicy:
    """Methods drawn i.i.d. from the distribution ``c``."""

    c: Mapping[str, float]


@dataclass(frozen=True)
class MarkovFeedbackPolicy:
    """First method from ``c0``; afterwards ``c(.|o, i)`` keyed by (method id, outcome)."""

    c0: Mapping[str, float]
    kernel: Mapping[tuple[str, Any], Mapping[str, float]]


@dataclass(frozen=True)
class DeterministicFeedbackPolicy:
    """Start at ``b0`` and follow the rule (method id, outcome) -> method id."""

    b0: str
    rule: Mapping[tuple[str, Any], str]


@dataclass(frozen=True)
class CallbackPolicy:
    """Escape hatch for arbitrary step-dependent selection.

    ``fn(step, prev, rng) -> method id`` with ``prev`` either None or
    the last (method id, outcome). Excluded from invariant-measure
    analytics; only the three declarative variants support them.
    """

    fn: Callable[[int, tuple | None, np.random.Generator], str]


Policy = RandomPolicy | MarkovFeedbackPolicy | DeterministicFeedbackPolicy | CallbackPolicy


def validate_policy(policy: Policy, methods: Sequence[MeasurementMethod]) -> None:
    ids = [m.id for m in methods]
    edges = [(m.id, o) for m in methods for o in m.outcomes]
    if isinstance(policy, RandomPolicy):
        _check_table(policy.c, ids, "random policy distribution")
    elif isinstance(policy, MarkovFeedbackPolicy):
        _check_table(policy.c0, ids, "feedback initial distribution")
        missing = [e for e in edges if e not in policy.kernel]
        if missing:
            raise ProtocolError(f"feedback kernel misses pairs {missing[:4]}...")
        for key, row in policy.kernel.items():
            if key not in edges:
                raise ProtocolError(f"feedback kernel keyed by unknown pair {key!r}")
            _check_table(row, ids, f"feedback row {key!r}")
    elif isinstance(policy, DeterministicFeedbackPolicy):
        if policy.b0 not in ids:
            raise ProtocolError(f"unknown initial method {policy.b0!r}")
        missing = [e for e in edges if e not in policy.rule]
        if missing:
            raise ProtocolError(f"feedback rule misses pairs {missing[:4]}...")
        bad = [v for v in policy.rule.values() if v not in ids]
        if bad:
            raise ProtocolError(f"feedback rule maps to unknown methods {bad}")
    elif isinstance(policy, CallbackPolicy):
        pass
    else:
        raise ProtocolError(f"unsupported policy {policy!r}")


def _sample(table: Mapping[str, float], ids: Sequence[str], rng: np.random.Generator) -> str:
    weights = np.array([table.get(o, 0.0) for o in ids])
    u = rng.random()
    return ids[min(int(np.searchsorted(np.cumsum(weights), u, side="right")), len(ids) - 1)]


def first_method(policy: Policy, method_ids: Sequence[str], rng: np.random.Generator) -> str:
    if isinstance(policy, RandomPolicy):
        return _sample(policy.c, method_ids, rng)
    if isinstance(policy, MarkovFeedbackPolicy):
        return _sample(policy.c0, method_ids, rng)
    if isinstance(policy, DeterministicFeedbackPolicy):
        return policy.b0
    if isinstance(policy, CallbackPolicy):
        return policy.fn(0, None, rng)
    raise ProtocolError(f"unsupported policy {policy!r}")


def next_method(policy: Policy, prev: tuple[str, Any], method_ids: Sequence[str],
                rng: np.random.Generator, step: int = 0) -> str:
    if isinstance(policy, RandomPolicy):
        return _sample(policy.c, method_ids, rng)
    if isinstance(policy, MarkovFeedbackPolicy):
        row = policy.kernel.get(tuple(prev))
        if row is None:
            raise ProtocolError(f"pair {prev!r} outside the feedback kernel domain")
        return _sample(row, method_ids, rng)
    if isinstance(policy, DeterministicFeedbackPolicy):
        nxt = policy.rule.get(tuple(prev))
        if nxt is None:
            raise ProtocolError(f"pair {prev!r} outside the feedback rule domain")
        return nxt
    if isinstance(policy, CallbackPolicy):
        return policy.fn(step, tuple(prev), rng)
    raise ProtocolError(f"unsupported policy {policy!r}")


def selection_weight(policy: Policy, prev: tuple[str, Any] | None, method_id: str) -> float:
    """Probability that ``method_id`` follows ``prev`` (None for the first step)."""
    if isinstance(policy, RandomPolicy):
        return float(policy.c.get(method_id, 0.0))
    if isinstance(policy, MarkovFeedbackPolicy):
        table = policy.c0 if prev is None else policy.kernel[tuple(prev)]
        return float(table.get(method_id, 0.0))
    if isinstance(policy, DeterministicFeedbackPolicy):
        target = policy.b0 if prev is None else policy.rule[tuple(prev)]
        return 1.0 if target == method_id else 0.0
    raise ProtocolError("callback policies carry no declarative weights")


def path_weight(policy: Policy, path: Sequence[tuple[str, Any]], next_id: str | None = None) -> float:
    """Weight ``d_n`` of a method/outcome path, optionally extended by one method."""
    w = 1.0
    prev: tuple[str, Any] | None = None
    for o, i in path:
        w *= selection_weight(policy, prev, o)
        prev = (o, i)
    if next_id is not None:
        w *= selection_weight(policy, prev, next_id)
    return w


def reduced_kernel(policy: Policy, methods: Sequence[MeasurementMethod],
                   pointer_index: int) -> tuple[list[str], np.ndarray]:
    """Method-to-method kernel conditional on the pointer state.

    ``K[o, o'] = sum_i p^o(i|alpha) c(o'|o, i)``. Random policies give
    constant rows ``c``; deterministic feedback gives the rule's
    outcome-weighted transitions.
    """
    ids = [m.id for m in methods]
    by_id = {m.id: m for m in methods}
    k = np.zeros((len(ids), len(ids)))
    for a, o in enumerate(ids):
        m = by_id[o]
        for i_idx, i in enumerate(m.outcomes):
            p = m.probs[i_idx, pointer_index]
            if isinstance(policy, RandomPolicy):
                row = policy.c
            elif isinstance(policy, MarkovFeedbackPolicy):
                row = policy.kernel[(o, i)]
            elif isinstance(policy, DeterministicFeedbackPolicy):
                row = {policy.rule[(o, i)]: 1.0}
            else:
                raise ProtocolError("reduced kernel undefined for callback policies")
            for b, o2 in enumerate(ids):
                k[a, b] += p * row.get(o2, 0.0)
    return ids, k


def invariant_measure(policy: Policy, methods: Sequence[MeasurementMethod],
                      pointer_index: int) -> tuple[dict[str, float], dict[tuple[str, Any], float]]:
    """Stationary law of the reduced chain and the induced law on (method, outcome).

    Requires the reduced chain to have a unique invariant distribution;
    reducible chains raise MultiplicityError with a component report.
    """
    ids, k = reduced_kernel(policy, methods, pointer_index)
    try:
        mu_red = stationary_distribution(k)
    except MultiplicityError as err:
        comps = [[ids[i] for i in comp] for comp in err.components]
        raise MultiplicityError(
            f"reduced method chain is reducible; components {comps}", components=err.components)
    by_id = {m.id: m for m in methods}
    mu_red_d = {o: float(mu_red[a]) for a, o in enumerate(ids)}
    mu_full = {}
    for o in ids:
        m = by_id[o]
        for i_idx, i in enumerate(m.outcomes):
            mu_full[(o, i)] = float(mu_red_d[o] * m.probs[i_idx, pointer_index])
    return mu_red_d, mu_full
