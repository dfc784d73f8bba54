"""Measurement methods for pointer-state chains.

A measurement method couples the system to a fresh probe, applies a
pointer-conditioned unitary and reads the probe out projectively. For
pointer state ``alpha`` and readout ``i`` the whole cycle is described
by a single complex amplitude ``M(i|alpha) = <i|U(alpha)|psi>``, whose
squared modulus ``p(i|alpha)`` is the conditional outcome probability.
Classical Bayesian setups declare ``p(i|alpha)`` tables directly (with
optional phases); both routes produce the same object.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .core import (
    DENSITY_ATOL,
    PROB_ATOL,
    DimensionError,
    PhaseUndefinedError,
    SectorAmbiguityError,
    ValidationError,
    as_distribution,
    validate_density,
)

UNITARY_ATOL = 1e-10


@dataclass(frozen=True)
class PointerModel:
    """Pointer basis with free energies and the initial state.

    ``energies[a]`` is the phase accumulated per unit interaction time
    by pointer state ``a`` under the free Hamiltonian; ``dt`` is the
    duration of one interaction cycle. ``a0`` defaults to the diagonal
    matrix built from ``q0`` (no initial coherences).
    """

    labels: tuple
    energies: np.ndarray
    q0: np.ndarray
    dt: float = 1.0
    a0: np.ndarray | None = None

    def __post_init__(self):
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        energies = np.asarray(self.energies, dtype=float)
        q0 = as_distribution(self.q0, name="q0")
        if len(labels) != len(set(labels)):
            raise ValidationError("pointer labels must be distinct")
        if energies.shape != (len(labels),) or q0.shape != (len(labels),):
            raise DimensionError("energies and q0 must match the label count")
        if self.dt <= 0:
            raise ValidationError("dt must be positive")
        if self.a0 is None:
            a0 = np.diag(q0.astype(complex))
        else:
            a0 = np.asarray(self.a0, dtype=complex)
            diag = validate_density(a0)
            if not diag.ok:
                raise ValidationError(f"a0 is not a density matrix: {diag}")
            if np.max(np.abs(np.diag(a0).real - q0)) > PROB_ATOL * 10:
                raise ValidationError("diag(a0) must equal q0")
        for arr in (energies, q0, a0):
            arr.setflags(write=False)
        object.__setattr__(self, "energies", energies)
        object.__setattr__(self, "q0", q0)
        object.__setattr__(self, "a0", a0)

    @property
    def dim(self) -> int:
        return len(self.labels)

    def index(self, label) -> int:
        return self.labels.index(label)


def kraus_from_unitary(psi, unitaries, basis=None) -> np.ndarray:
    """Amplitudes ``M[i, a] = <b_i| U_a |psi>`` of one probe cycle.

    ``unitaries`` is one probe-space unitary per pointer state (the
    non-demolition form of the interaction); ``basis`` holds the
    readout kets as rows and defaults to the computational basis.
    """
    psi = np.asarray(psi, dtype=complex)
    if abs(np.linalg.norm(psi) - 1.0) > PROB_ATOL:
        raise ValidationError(f"probe state norm {np.linalg.norm(psi)!r} is not 1")
    us = [np.asarray(u, dtype=complex) for u in unitaries]
    n = psi.shape[0]
    for idx, u in enumerate(us):
        if u.shape != (n, n):
            raise DimensionError(f"unitary {idx} has shape {u.shape}, probe dim is {n}")
        if np.max(np.abs(u.conj().T @ u - np.eye(n))) > UNITARY_ATOL:
            raise ValidationError(f"operator {idx} is not unitary within {UNITARY_ATOL:g}")
    if basis is None:
        basis = np.eye(n, dtype=complex)
    else:
        basis = np.asarray(basis, dtype=complex)
        if basis.shape[1] != n:
            raise DimensionError("readout basis kets must live in the probe space")
        gram = basis.conj() @ basis.T
        if np.max(np.abs(gram - np.eye(basis.shape[0]))) > UNITARY_ATOL:
            raise ValidationError("readout basis is not orthonormal")
    # rows: outcomes, columns: pointer states
    return np.stack([basis.conj() @ (u @ psi) for u in us], axis=1)


def phase_norm_decomposition(amplitudes, energies, dt: float):
    """Split amplitudes into ``exp(-i dt (E_a + theta)) sqrt(p)``.

    Returns ``(theta, defined)`` where ``theta[i, a]`` is reduced to
    ``[0, 2 pi / dt)`` and ``defined`` flags entries with nonzero
    probability. Undefined phases are stored as 0; they are never
    consumed because the corresponding outcome cannot occur from that
    pointer state.
    """
    m = np.asarray(amplitudes, dtype=complex)
    energies = np.asarray(energies, dtype=float)
    p = np.abs(m) ** 2
    defined = p > 1e-30
    period = 2.0 * np.pi / dt
    with np.errstate(divide="ignore", invalid="ignore"):
        theta = (-np.angle(m) / dt) - energies[None, :]
    theta = np.where(defined, np.mod(theta, period), 0.0)
    recon = np.exp(-1j * dt * (energies[None, :] + theta)) * np.sqrt(p)
    err = np.max(np.abs(np.where(defined, recon - m, 0.0))) if m.size else 0.0
    if err > 1e-10:
        raise ValidationError(f"phase decomposition failed to reconstruct amplitudes ({err:.3e})")
    return theta, defined


@dataclass(frozen=True)
class MeasurementMethod:
    """One measurement method: outcome set, conditional laws, phases.

    ``probs[i, a]`` is the probability of outcome ``outcomes[i]`` given
    pointer state ``a``; columns must be normalised (POVM
    completeness). Quantum methods also carry amplitudes and the
    phase table used by the compensating unitary; classical ones leave
    them as None.
    """

    id: str
    outcomes: tuple
    probs: np.ndarray
    theta: np.ndarray | None = None
    amplitudes: np.ndarray | None = None
    phase_defined: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "outcomes", tuple(self.outcomes))
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 2:
            raise DimensionError("probs must be outcomes x pointer states")
        if p.shape[0] != len(self.outcomes):
            raise DimensionError(f"method {self.id!r}: {p.shape[0]} rows vs {len(self.outcomes)} outcomes")
        if np.any(p < -1e-15):
            raise ValidationError(f"method {self.id!r}: negative probability")
        p = np.clip(p, 0.0, None)
        defect = np.abs(p.sum(axis=0) - 1.0)
        if np.max(defect) > PROB_ATOL:
            a = int(np.argmax(defect))
            raise ValidationError(
                f"method {self.id!r}: outcome law for pointer column {a} sums to {p[:, a].sum()!r}")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)
        if self.theta is not None:
            th = np.asarray(self.theta, dtype=float)
            if th.shape != p.shape:
                raise DimensionError(f"method {self.id!r}: phase table shape mismatch")
            th.setflags(write=False)
            object.__setattr__(self, "theta", th)
            mask = self.phase_defined
            mask = p > 1e-30 if mask is None else np.asarray(mask, dtype=bool)
            mask.setflags(write=False)
            object.__setattr__(self, "phase_defined", mask)
        if self.amplitudes is not None:
            m = np.asarray(self.amplitudes, dtype=complex)
            if m.shape != p.shape:
                raise DimensionError(f"method {self.id!r}: amplitude shape mismatch")
            comp = np.abs((np.abs(m) ** 2).sum(axis=0) - 1.0)
            if np.max(comp) > DENSITY_ATOL:
                raise ValidationError(f"method {self.id!r}: amplitudes violate completeness ({np.max(comp):.3e})")
            m.setflags(write=False)
            object.__setattr__(self, "amplitudes", m)

    @classmethod
    def from_probabilities(cls, id: str, outcomes: Sequence, probs, phases=None,
                           pointer: PointerModel | None = None) -> "MeasurementMethod":
        """Classical construction; phases (if any) define the amplitudes."""
        probs = np.asarray(probs, dtype=float)
        if phases is None:
            return cls(id=id, outcomes=tuple(outcomes), probs=probs)
        if pointer is None:
            raise ValidationError("phases need a PointerModel for energies and dt")
        phases = np.asarray(phases, dtype=float)
        amps = np.exp(-1j * pointer.dt * (pointer.energies[None, :] + phases)) * np.sqrt(probs)
        return cls(id=id, outcomes=tuple(outcomes), probs=probs, theta=phases, amplitudes=amps)

    @classmethod
    def from_unitaries(cls, id: str, psi, unitaries, pointer: PointerModel,
                       basis=None) -> "MeasurementMethod":
        """Quantum construction from probe state and per-pointer unitaries."""
        m = kraus_from_unitary(psi, unitaries, basis=basis)
        if m.shape[1] != pointer.dim:
            raise DimensionError("one unitary per pointer state is required")
        theta, defined = phase_norm_decomposition(m, pointer.energies, pointer.dt)
        outcomes = tuple(range(m.shape[0]))
        return cls(id=id, outcomes=outcomes, probs=np.abs(m) ** 2, theta=theta,
                   amplitudes=m, phase_defined=defined)

    @classmethod
    def from_amplitudes(cls, id: str, outcomes: Sequence, amplitudes,
                        pointer: PointerModel) -> "MeasurementMethod":
        m = np.asarray(amplitudes, dtype=complex)
        theta, defined = phase_norm_decomposition(m, pointer.energies, pointer.dt)
        return cls(id=id, outcomes=tuple(outcomes), probs=np.abs(m) ** 2, theta=theta,
                   amplitudes=m, phase_defined=defined)

    @property
    def n_outcomes(self) -> int:
        return len(self.outcomes)

    @property
    def quantum(self) -> bool:
        return self.amplitudes is not None

    def outcome_index(self, outcome) -> int:
        return self.outcomes.index(outcome)

    def phase_of(self, outcome, pointer_index: int) -> float:
        if self.theta is None:
            raise PhaseUndefinedError(f"method {self.id!r} declares no phases")
        i = self.outcome_index(outcome)
        if not self.phase_defined[i, pointer_index]:
            raise PhaseUndefinedError(
                f"method {self.id!r}: outcome {outcome!r} has probability 0 from pointer {pointer_index}")
        return float(self.theta[i, pointer_index])


@dataclass(frozen=True)
class SectorPartition:
    """Partition of pointer states into apparatus-indistinguishable classes.

    Two pointer states share a sector iff every method assigns them the
    same conditional outcome law (within ``tolerance``). The sector of
    the limit state is the finest thing repeated measurement resolves.
    """

    labels: tuple
    assignment: np.ndarray
    tolerance: float

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=int)
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def n_sectors(self) -> int:
        return int(self.assignment.max()) + 1 if self.assignment.size else 0

    @property
    def sectors(self) -> tuple:
        return tuple(tuple(self.labels[i] for i in np.flatnonzero(self.assignment == s))
                     for s in range(self.n_sectors))

    def members(self, sector: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == sector)

    def sector_of(self, label) -> int:
        return int(self.assignment[self.labels.index(label)])

    def mass_matrix(self) -> np.ndarray:
        """0/1 matrix mapping pointer weights to sector masses."""
        m = np.zeros((self.n_sectors, len(self.labels)))
        m[self.assignment, np.arange(len(self.labels))] = 1.0
        return m

    def projector(self, sector: int) -> np.ndarray:
        d = len(self.labels)
        pr = np.zeros((d, d))
        idx = self.members(sector)
        pr[idx, idx] = 1.0
        return pr


def method_distance_matrix(methods: Sequence[MeasurementMethod]) -> np.ndarray:
    """Max over methods and outcomes of |p(i|a) - p(i|b)|."""
    stacked = np.concatenate([m.probs for m in methods], axis=0)
    return np.max(np.abs(stacked[:, :, None] - stacked[:, None, :]), axis=0)


def compute_sectors(methods: Sequence[MeasurementMethod], labels: Sequence,
                    tol: float = 1e-9) -> SectorPartition:
    """Group pointer states indistinguishable by every method.

    Single linkage on the within-``tol`` relation, then every
    intra-sector pair is re-checked; chain-linked clusters whose
    diameter exceeds ``tol`` raise SectorAmbiguityError instead of
    silently picking a side.
    """
    if not methods:
        raise ValidationError("at least one method is required")
    d = methods[0].probs.shape[1]
    for m in methods:
        if m.probs.shape[1] != d:
            raise DimensionError("methods disagree on the pointer dimension")
    dist = method_distance_matrix(methods)
    parent = list(range(d))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a in range(d):
        for b in range(a + 1, d):
            if dist[a, b] <= tol:
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    roots = [find(a) for a in range(d)]
    order: dict[int, int] = {}
    assignment = np.empty(d, dtype=int)
    for a in range(d):
        assignment[a] = order.setdefault(roots[a], len(order))
    for s in range(len(order)):
        idx = np.flatnonzero(assignment == s)
        sub = dist[np.ix_(idx, idx)]
        if idx.size > 1 and sub.max() > tol:
            raise SectorAmbiguityError(
                f"sector linking is ambiguous: cluster {list(idx)} has diameter "
                f"{sub.max():.3e} > tol {tol:g}")
    return SectorPartition(labels=tuple(labels), assignment=assignment, tolerance=tol)
