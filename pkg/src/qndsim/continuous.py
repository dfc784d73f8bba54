"""Diffusive continuous-time limit of the measurement chain.

When the probe coupling is weak (strength ``1/sqrt(delta)`` over a
cycle of duration ``delta``), outcome laws take the form
``p(i|a) = p0(i) (1 + sqrt(delta) Gamma(i|a))`` with an
alpha-independent base law ``p0``. Centred and rescaled outcome
counters then converge to correlated Gaussian processes, the pointer
distribution solves the nonlinear filtering SDE

    dQ_t(a) = Q_t(a) sum_e (Gamma_e(a) - <Gamma_e>_t) dX_t(e),

and the density matrix solves the corresponding diffusive stochastic
master equation. Both admit exponential-martingale closed forms in
terms of the accumulated noise, which this module evaluates alongside
Euler integrators so each can audit the other.

Everything is expressed on the flattened index set of (method, outcome)
pairs with weights ``w_e = c(o) p0^o(i)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.linalg import expm

from .core import (
    DiffusiveConditionError,
    DimensionError,
    StepSizeError,
    ValidationError,
    as_distribution,
)
from .measurement import PointerModel, SectorPartition

CENTERING_ATOL = 1e-12


@dataclass(frozen=True)
class ContinuousMethod:
    """One weak measurement method in the diffusive regime.

    ``p0`` is the readout law in the absence of interaction and
    ``c[i, a] = <i|H_a|psi> / <i|psi>`` the complex coupling whose
    imaginary part carries the measurement information:
    ``Gamma = 2 Im c``. The real part only produces phase backaction.
    ``weight`` is the long-run selection frequency of the method.
    """

    id: str
    outcomes: tuple
    p0: np.ndarray
    c: np.ndarray
    weight: float = 1.0
    probe_state: np.ndarray | None = None
    hamiltonians: np.ndarray | None = None
    probe_hamiltonian: np.ndarray | None = None
    basis: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "outcomes", tuple(self.outcomes))
        p0 = np.asarray(self.p0, dtype=float)
        c = np.asarray(self.c, dtype=complex)
        if p0.ndim != 1 or c.ndim != 2 or c.shape[0] != p0.shape[0]:
            raise DimensionError(f"method {self.id!r}: c must be outcomes x pointers matching p0")
        if len(self.outcomes) != p0.shape[0]:
            raise DimensionError(f"method {self.id!r}: outcome labels do not match p0")
        as_distribution(p0, name=f"p0 of method {self.id!r}")
        if np.any(p0 <= 0.0):
            raise DiffusiveConditionError(
                f"method {self.id!r}: p0 must be strictly positive in the diffusive regime")
        gamma = 2.0 * c.imag
        centering = np.abs(p0 @ gamma)
        if np.max(centering) > CENTERING_ATOL:
            raise ValidationError(
                f"method {self.id!r}: sum_i p0(i) Gamma(i|a) = {np.max(centering):.3e}, not 0")
        re_centering = np.abs(p0 @ c.real)
        if np.max(re_centering) > 1e-9:
            raise ValidationError(
                f"method {self.id!r}: interaction expectation sum_i p0(i) c(i|a) is not 0")
        if self.weight <= 0:
            raise ValidationError(f"method {self.id!r}: weight must be positive")
        for arr in (p0, c):
            arr.setflags(write=False)
        object.__setattr__(self, "p0", p0)
        object.__setattr__(self, "c", c)

    @property
    def gamma(self) -> np.ndarray:
        return 2.0 * self.c.imag

    @classmethod
    def from_gamma(cls, id: str, outcomes: Sequence, p0, gamma, weight: float = 1.0,
                   c_real=None) -> "ContinuousMethod":
        """Direct construction; ``c`` defaults to ``i Gamma / 2`` (no phase backaction)."""
        gamma = np.asarray(gamma, dtype=float)
        re = np.zeros_like(gamma) if c_real is None else np.asarray(c_real, dtype=float)
        return cls(id=id, outcomes=tuple(outcomes), p0=p0, c=re + 0.5j * gamma, weight=weight)

    @classmethod
    def from_hamiltonian(cls, id: str, psi, hamiltonians, weight: float = 1.0,
                         probe_hamiltonian=None, basis=None, outcomes=None) -> "ContinuousMethod":
        p0, c = gamma_from_hamiltonian(psi, hamiltonians, basis=basis)
        n = p0.shape[0]
        hams = np.stack([np.asarray(h, dtype=complex) for h in hamiltonians])
        return cls(
            id=id,
            outcomes=tuple(outcomes) if outcomes is not None else tuple(range(n)),
            p0=p0,
            c=c,
            weight=weight,
            probe_state=np.asarray(psi, dtype=complex),
            hamiltonians=hams,
            probe_hamiltonian=None if probe_hamiltonian is None else np.asarray(probe_hamiltonian, dtype=complex),
            basis=None if basis is None else np.asarray(basis, dtype=complex),
        )


def gamma_from_hamiltonian(psi, hamiltonians, basis=None) -> tuple[np.ndarray, np.ndarray]:
    """Base law and couplings of a weak probe cycle.

    ``p0(i) = |<i|psi>|^2`` and ``c(i|a) = <i|H_a|psi> / <i|psi>``.
    Requires every readout amplitude to be nonzero (otherwise the limit
    is not diffusive) and a vanishing interaction expectation
    ``<psi|H_a|psi> = 0`` for every pointer state.
    """
    psi = np.asarray(psi, dtype=complex)
    if abs(np.linalg.norm(psi) - 1.0) > 1e-12:
        raise ValidationError("probe state is not normalised")
    hs = [np.asarray(h, dtype=complex) for h in hamiltonians]
    n = psi.shape[0]
    if basis is None:
        basis = np.eye(n, dtype=complex)
    else:
        basis = np.asarray(basis, dtype=complex)
    amp0 = basis.conj() @ psi
    if np.min(np.abs(amp0)) < 1e-12:
        raise DiffusiveConditionError(
            "probe amplitude vanishes on some readout; the jump regime is out of scope")
    cols = []
    for idx, h in enumerate(hs):
        if h.shape != (n, n):
            raise DimensionError(f"hamiltonian {idx} has shape {h.shape}")
        if np.max(np.abs(h - h.conj().T)) > 1e-10:
            raise ValidationError(f"hamiltonian {idx} is not Hermitian")
        expect = complex(psi.conj() @ h @ psi)
        if abs(expect) > 1e-10:
            raise ValidationError(
                f"hamiltonian {idx}: interaction expectation {expect!r} must vanish")
        cols.append((basis.conj() @ (h @ psi)) / amp0)
    p0 = np.abs(amp0) ** 2
    p0 = p0 / p0.sum()
    return p0, np.stack(cols, axis=1)


@dataclass(frozen=True)
class ContinuousModel:
    """Scaling-limit data: pointer basis plus weak methods.

    Exposes flattened arrays over the edge set of (method, outcome)
    pairs: weights ``w``, information couplings ``gamma``, and the
    Hermitian split of the couplings used by the master equation and
    its compensated version.
    """

    pointer: PointerModel
    methods: tuple

    def __post_init__(self):
        methods = tuple(self.methods)
        if not methods:
            raise ValidationError("continuous model needs at least one method")
        ids = [m.id for m in methods]
        if len(ids) != len(set(ids)):
            raise ValidationError("method ids must be unique")
        total = sum(m.weight for m in methods)
        if abs(total - 1.0) > 1e-12:
            raise ValidationError(f"method weights sum to {total!r}, not 1")
        d = self.pointer.dim
        for m in methods:
            if m.c.shape[1] != d:
                raise ValidationError(f"method {m.id!r} does not match the pointer dimension")
        object.__setattr__(self, "methods", methods)
        edges = tuple((m.id, o) for m in methods for o in m.outcomes)
        w = np.concatenate([m.weight * m.p0 for m in methods])
        c = np.concatenate([m.c for m in methods], axis=0)
        r, s = c.real.copy(), c.imag.copy()
        gamma = 2.0 * s
        en = self.pointer.energies
        ss = (w[:, None] * s * s).sum(axis=0)
        rs = (w[:, None] * r * s).sum(axis=0)
        l = (-(ss[:, None] + ss[None, :])
             + 1j * (-(en[:, None] - en[None, :]) + (rs[:, None] - rs[None, :])))
        cc2 = r * r + s * s
        cross = (r[:, :, None] * r[:, None, :] + s[:, :, None] * s[:, None, :]
                 + 1j * (s[:, :, None] * r[:, None, :] - r[:, :, None] * s[:, None, :]))
        lind = (-1j * (en[:, None] - en[None, :])
                + np.einsum("e,eab->ab", w, cross)
                - 0.5 * (w[:, None] * cc2).sum(axis=0)[:, None]
                - 0.5 * (w[:, None] * cc2).sum(axis=0)[None, :])
        s2c = (s[:, :, None] + s[:, None, :]) - 1j * (r[:, :, None] - r[:, None, :])
        s2r = s[:, :, None] + s[:, None, :]
        dtilde = -0.5 * np.einsum("e,eab->ab", w, (s[:, :, None] - s[:, None, :]) ** 2)
        wh2c = np.einsum("e,eab->ab", w, s2c * s2c)
        wh2r = np.einsum("e,eab->ab", w, s2r * s2r)
        for arr in (w, c, r, s, gamma, l, lind, s2c, s2r, dtilde, rs, wh2c, wh2r):
            arr.setflags(write=False)
        object.__setattr__(self, "_edges", edges)
        object.__setattr__(self, "_rs", rs)
        object.__setattr__(self, "_wh2c", wh2c)
        object.__setattr__(self, "_wh2r", wh2r)
        object.__setattr__(self, "_w", w)
        object.__setattr__(self, "_c", c)
        object.__setattr__(self, "_r", r)
        object.__setattr__(self, "_s", s)
        object.__setattr__(self, "_gamma", gamma)
        object.__setattr__(self, "_l", l)
        object.__setattr__(self, "_lind", lind)
        object.__setattr__(self, "_s2c", s2c)
        object.__setattr__(self, "_s2r", s2r)
        object.__setattr__(self, "_dtilde", dtilde)
        assign = _gamma_sectors(gamma)
        object.__setattr__(self, "_sectors", SectorPartition(
            labels=self.pointer.labels, assignment=assign, tolerance=1e-9))

    @property
    def edges(self) -> tuple:
        return self._edges

    @property
    def n_edges(self) -> int:
        return len(self._edges)

    @property
    def w(self) -> np.ndarray:
        """Edge weights c(o) p0^o(i); they sum to one."""
        return self._w

    @property
    def gamma(self) -> np.ndarray:
        return self._gamma

    @property
    def couplings(self) -> np.ndarray:
        return self._c

    @property
    def log_exponent_matrix(self) -> np.ndarray:
        """Per-unit-time drift l(a, b) of the unnormalised matrix weights."""
        return self._l

    @property
    def lindblad_matrix(self) -> np.ndarray:
        """Elementwise action of the Lindbladian on the pointer basis (diagonal couplings)."""
        return self._lind

    @property
    def sectors(self) -> SectorPartition:
        return self._sectors

    def mean_gamma(self, q) -> np.ndarray:
        """<Gamma_e> under the pointer distribution(s) ``q``."""
        return np.asarray(q) @ self._gamma.T


def _gamma_sectors(gamma: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    d = gamma.shape[1]
    dist = np.max(np.abs(gamma[:, :, None] - gamma[:, None, :]), axis=0)
    assign = np.full(d, -1, dtype=int)
    nxt = 0
    for a in range(d):
        if assign[a] >= 0:
            continue
        assign[a] = nxt
        for b in range(a + 1, d):
            if assign[b] < 0 and dist[a, b] <= tol:
                assign[b] = nxt
        nxt += 1
    return assign


# ---------------------------------------------------------------------------
# noise

def noise_covariance(model: ContinuousModel, dt: float = 1.0) -> np.ndarray:
    """Covariance dt (w_e delta_ef - w_e w_f); singular along the all-ones direction."""
    w = model.w
    return dt * (np.diag(w) - np.outer(w, w))


def sample_noise(model: ContinuousModel, dt: float, rng: np.random.Generator,
                 size: int | tuple | None = None) -> np.ndarray:
    """Exact increments of the driving martingale over a step ``dt``.

    Independent standard normals are pushed through the linear map
    ``y_e = sqrt(w_e) (z_e - sqrt(w_e) sum_f sqrt(w_f) z_f)``, which
    realises the singular covariance without any factorisation; the
    components sum to zero identically.
    """
    w = model.w
    shape = (model.n_edges,) if size is None else (
        (size, model.n_edges) if isinstance(size, int) else tuple(size) + (model.n_edges,))
    z = rng.standard_normal(shape)
    return noise_from_standard(model, z) * math.sqrt(dt)


def noise_from_standard(model: ContinuousModel, z: np.ndarray) -> np.ndarray:
    """Apply the covariance-shaping map to unit-variance increments ``z``."""
    sq = np.sqrt(model.w)
    proj = z @ sq
    return sq * (z - np.multiply.outer(proj, sq))


# ---------------------------------------------------------------------------
# pointer-distribution dynamics

def sde_step_q(q, model: ContinuousModel, dx, dt: float | None = None, *,
               scheme: str = "strong") -> np.ndarray:
    """One integration step of the filtering SDE, then renormalisation.

    ``scheme='euler'`` is the plain Euler-Maruyama step (strong order
    one half for this multiplicative noise). ``scheme='strong'``
    (default, needs ``dt``) adds the second-order correction
    ``(g.dX)^2/2 - dt sum_e w_e g_e^2 / 2`` available here without
    iterated integrals because the noise fields commute; it converges
    at strong order one, which the closed-form comparisons require.

    Pointer states are exact fixed points under both schemes: for a
    delta distribution the centred coupling ``g`` vanishes. Raises
    StepSizeError when a weight would go negative beyond rounding.
    """
    q = np.asarray(q, dtype=float)
    dx = np.asarray(dx, dtype=float)
    gm = q @ model.gamma.T
    drive = dx @ model.gamma - (dx * gm).sum(axis=-1, keepdims=True)
    if scheme == "euler":
        factor = 1.0 + drive
    elif scheme == "strong":
        if dt is None:
            raise ValidationError("the strong scheme needs the step size dt")
        g = model.gamma.T[None, :, :] - gm[..., None, :] if q.ndim > 1 else \
            model.gamma.T - gm[None, :]
        gsq = (model.w * g * g).sum(axis=-1)
        if q.ndim == 1:
            gsq = gsq.reshape(q.shape)
        factor = 1.0 + drive + 0.5 * (drive * drive - dt * gsq)
    else:
        raise ValidationError(f"unknown scheme {scheme!r}")
    new = q * factor
    if np.any(new < -1e-8):
        raise StepSizeError(
            f"negative pointer weight {new.min():.3e} after an integration step; reduce dt")
    new = np.where((new <= 0.0) & (q > 0.0), 1e-300, np.clip(new, 0.0, None))
    return new / new.sum(axis=-1, keepdims=True)


def compensator_increment(model: ContinuousModel, q, dt: float) -> np.ndarray:
    """Drift dt * w_e <Gamma_e> restoring the counting-noise mean: dW = dX + this."""
    return dt * model.w * model.mean_gamma(q)


def _exponents(model: ContinuousModel, w_accum, t: float) -> np.ndarray:
    w_accum = np.asarray(w_accum, dtype=float)
    sw = w_accum @ model._s
    rw = w_accum @ model._r
    x = (t * model._l
         + (sw[..., :, None] + sw[..., None, :])
         - 1j * (rw[..., :, None] - rw[..., None, :]))
    return x


def closed_form_q(model: ContinuousModel, w_accum, t: float) -> np.ndarray:
    """Exact pointer distribution given the accumulated noise ``W_t``.

    Exponential-martingale (change-of-measure) solution, evaluated in
    log space so late-time weight ratios cannot overflow.
    """
    x = _exponents(model, w_accum, t)
    diag = np.real(np.diagonal(x, axis1=-2, axis2=-1))
    with np.errstate(divide="ignore"):
        logits = np.log(model.pointer.q0) + diag
    m = logits.max(axis=-1, keepdims=True)
    num = np.exp(logits - m)
    num[~np.isfinite(num)] = 0.0
    return num / num.sum(axis=-1, keepdims=True)


def closed_form_a(model: ContinuousModel, w_accum, t: float, a0=None) -> np.ndarray:
    """Exact conditioned matrix weights given the accumulated noise.

    The diagonal reproduces ``closed_form_q`` entry for entry; the
    denominator is the same scalar normalisation.
    """
    a0 = model.pointer.a0 if a0 is None else np.asarray(a0, dtype=complex)
    x = _exponents(model, w_accum, t)
    diag = np.real(np.diagonal(x, axis1=-2, axis2=-1))
    with np.errstate(divide="ignore"):
        logits = np.log(model.pointer.q0) + diag
    m = logits.max(axis=-1, keepdims=True)
    log_norm = m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    return a0 * np.exp(x - log_norm[..., None])


def compensating_phases(model: ContinuousModel, w_accum, t: float) -> np.ndarray:
    """Per-pointer phases of the diagonal compensating unitary.

    ``phi_a = E_a t + sum_e Re(c_e(a)) W_e - t sum_e w_e Re(c_e(a)) Im(c_e(a))``;
    conjugating the matrix weights with ``exp(-i phi)`` cancels both the
    free evolution and the accumulated phase backaction, leaving the
    real compensated dynamics.
    """
    w_accum = np.asarray(w_accum, dtype=float)
    return (model.pointer.energies * t
            + w_accum @ model._r
            - t * model._rs)


def closed_form_compensated(model: ContinuousModel, w_accum, t: float, a0=None) -> np.ndarray:
    """Exact compensated matrix weights given the accumulated noise.

    Equal to conjugating ``closed_form_a`` with the compensating
    phases; analytically this is just the real part of the exponents,
    so intra-sector entries are positive multiples of the initial ones.
    """
    a0 = model.pointer.a0 if a0 is None else np.asarray(a0, dtype=complex)
    x = _exponents(model, w_accum, t)
    diag = np.real(np.diagonal(x, axis1=-2, axis2=-1))
    with np.errstate(divide="ignore"):
        logits = np.log(model.pointer.q0) + diag
    m = logits.max(axis=-1, keepdims=True)
    log_norm = m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    return a0 * np.exp(x.real - log_norm[..., None])


# ---------------------------------------------------------------------------
# density-matrix dynamics

def _hermitize_batch(a: np.ndarray) -> np.ndarray:
    h = (a + a.conj().swapaxes(-1, -2)) / 2.0
    tr = np.real(np.einsum("...aa->...", h))
    return h / tr[..., None, None]


def sde_step_rho(a, model: ContinuousModel, dt: float, dx, *,
                 return_trace_drift: bool = False):
    """One Euler step of the diffusive stochastic master equation.

    Couplings are diagonal in the pointer basis, so the Lindblad and
    innovation superoperators act entrywise; the step is followed by
    Hermitian projection and trace renormalisation. The pre-projection
    trace is already conserved to rounding because the innovation term
    is trace-free along states of unit trace.
    """
    a = np.asarray(a, dtype=complex)
    dx = np.asarray(dx, dtype=float)
    q = np.real(np.diagonal(a, axis1=-2, axis2=-1))
    gm = q @ model.gamma.T
    stoch = np.einsum("...e,eab->...ab", dx, model._s2c)
    stoch = stoch - (dx * gm).sum(axis=-1)[..., None, None]
    new = a * (1.0 + dt * model._lind + stoch)
    if return_trace_drift:
        drift = np.abs(np.real(np.einsum("...aa->...", new)) - 1.0)
        return _hermitize_batch(new), drift
    return _hermitize_batch(new)


def compensated_rho_step(atilde, model: ContinuousModel, dt: float, dx) -> np.ndarray:
    """One Euler step of the phase-compensated matrix.

    After removing the deterministic and backaction phases, every
    entry evolves with the real coefficient
    ``(Gamma_e(a) + Gamma_e(b))/2 - <Gamma_e>`` and a drift
    ``-1/2 sum_e w_e (Gamma_e(a) - Gamma_e(b))^2 / 4`` that vanishes
    inside a sector, so intra-sector entries track the pointer
    weights exactly and converge to the projected initial matrix.
    """
    atilde = np.asarray(atilde, dtype=complex)
    dx = np.asarray(dx, dtype=float)
    q = np.real(np.diagonal(atilde, axis1=-2, axis2=-1))
    gm = q @ model.gamma.T
    stoch = np.einsum("...e,eab->...ab", dx, model._s2r)
    stoch = stoch - (dx * gm).sum(axis=-1)[..., None, None]
    new = atilde * (1.0 + dt * model._dtilde + stoch)
    return _hermitize_batch(new)


def characteristic_time(model: ContinuousModel, winner, loser) -> float:
    """Exponential decay time of the loser's weight when the winner's sector prevails.

    ``2 / tau = sum_e w_e (Gamma_e(loser) - Gamma_e(winner))^2``;
    returns ``inf`` for states in the same sector (never separated).
    """
    i = model.pointer.index(winner)
    j = model.pointer.index(loser)
    rate = float(model.w @ (model.gamma[:, j] - model.gamma[:, i]) ** 2)
    if rate < 1e-18:
        return math.inf
    return 2.0 / rate


# ---------------------------------------------------------------------------
# path ensembles

def path_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array(
        [np.uint64(master_seed), np.uint64(index)], dtype=np.uint64)))


@dataclass
class ContinuousRunResult:
    times: np.ndarray
    q_final: np.ndarray
    x_final: np.ndarray
    w_final: np.ndarray
    q_records: np.ndarray | None = None
    w_records: np.ndarray | None = None
    rho_final: np.ndarray | None = None
    atilde_final: np.ndarray | None = None
    rho_records: np.ndarray | None = None
    max_trace_drift: float = 0.0

    def limit_sectors(self, model: ContinuousModel) -> np.ndarray:
        masses = self.q_final @ model.sectors.mass_matrix().T
        return np.argmax(masses, axis=-1)


def integrate_paths(model: ContinuousModel, *, t_max: float, dt: float, n_paths: int,
                    seed: int, record_stride: int = 0, track_rho: bool = False,
                    track_atilde: bool = False, audit_trace: bool = False,
                    first_index: int = 0, block: int = 256) -> ContinuousRunResult:
    """Integrate an ensemble of paths with per-path counter-based streams.

    All tracked processes ride on the same noise increments, so the
    diagonal of the density matrix can be compared to the pointer
    distribution pathwise. ``record_stride`` > 0 stores every that-many
    steps (plus the initial point).
    """
    n_steps = int(round(t_max / dt))
    if abs(n_steps * dt - t_max) > 1e-9 * max(1.0, t_max):
        raise ValidationError("t_max must be an integer number of steps")
    d = model.pointer.dim
    ne = model.n_edges
    q = np.tile(model.pointer.q0, (n_paths, 1))
    x = np.zeros((n_paths, ne))
    w = np.zeros((n_paths, ne))
    rho = np.tile(model.pointer.a0, (n_paths, 1, 1)) if track_rho else None
    atl = np.tile(model.pointer.a0, (n_paths, 1, 1)) if track_atilde else None
    rngs = [path_rng(seed, first_index + j) for j in range(n_paths)]
    block = max(1, min(block, n_steps))
    sqdt = math.sqrt(dt)

    n_rec = (n_steps // record_stride + 1) if record_stride else 0
    times = np.array([k * record_stride * dt for k in range(n_rec)]) if record_stride else np.array([])
    q_rec = np.empty((n_paths, n_rec, d)) if record_stride else None
    w_rec = np.empty((n_paths, n_rec, ne)) if record_stride else None
    rho_rec = np.empty((n_paths, n_rec, d, d), dtype=complex) if (record_stride and track_rho) else None
    if record_stride:
        q_rec[:, 0] = q
        w_rec[:, 0] = 0.0
        if rho_rec is not None:
            rho_rec[:, 0] = rho
    max_drift = 0.0
    zbuf = np.empty((n_paths, block, ne))
    for step in range(n_steps):
        col = step % block
        if col == 0:
            m = min(block, n_steps - step)
            for j in range(n_paths):
                zbuf[j, :m] = rngs[j].standard_normal((m, ne))
        dx = noise_from_standard(model, zbuf[:, col, :]) * sqdt
        comp = compensator_increment(model, q, dt)
        if rho is not None:
            if audit_trace:
                rho, drift = sde_step_rho(rho, model, dt, dx, return_trace_drift=True)
                max_drift = max(max_drift, float(drift.max()))
            else:
                rho = sde_step_rho(rho, model, dt, dx)
        if atl is not None:
            atl = compensated_rho_step(atl, model, dt, dx)
        q = sde_step_q(q, model, dx)
        x += dx
        w += dx + comp
        if record_stride and (step + 1) % record_stride == 0:
            k = (step + 1) // record_stride
            q_rec[:, k] = q
            w_rec[:, k] = w
            if rho_rec is not None:
                rho_rec[:, k] = rho
    return ContinuousRunResult(
        times=times, q_final=q, x_final=x, w_final=w,
        q_records=q_rec, w_records=w_rec,
        rho_final=rho, atilde_final=atl, rho_records=rho_rec,
        max_trace_drift=max_drift,
    )


def simulate_closed_form_paths(model: ContinuousModel, *, t_max: float, dt: float,
                               n_paths: int, seed: int, record_stride: int = 0,
                               first_index: int = 0) -> ContinuousRunResult:
    """Evolve the accumulated noise and read Q from the closed form at every step.

    The compensator integral uses the closed-form distribution itself,
    so the only discretisation error is in that time integral.
    """
    n_steps = int(round(t_max / dt))
    ne = model.n_edges
    d = model.pointer.dim
    q = np.tile(model.pointer.q0, (n_paths, 1))
    x = np.zeros((n_paths, ne))
    w = np.zeros((n_paths, ne))
    rngs = [path_rng(seed, first_index + j) for j in range(n_paths)]
    sqdt = math.sqrt(dt)
    block = max(1, min(256, n_steps))
    zbuf = np.empty((n_paths, block, ne))
    n_rec = (n_steps // record_stride + 1) if record_stride else 0
    times = np.array([k * record_stride * dt for k in range(n_rec)]) if record_stride else np.array([])
    q_rec = np.empty((n_paths, n_rec, d)) if record_stride else None
    w_rec = np.empty((n_paths, n_rec, ne)) if record_stride else None
    if record_stride:
        q_rec[:, 0] = q
        w_rec[:, 0] = 0.0
    for step in range(n_steps):
        col = step % block
        if col == 0:
            m = min(block, n_steps - step)
            for j in range(n_paths):
                zbuf[j, :m] = rngs[j].standard_normal((m, ne))
        dx = noise_from_standard(model, zbuf[:, col, :]) * sqdt
        w += dx + compensator_increment(model, q, dt)
        x += dx
        q = closed_form_q(model, w, (step + 1) * dt)
        if record_stride and (step + 1) % record_stride == 0:
            k = (step + 1) // record_stride
            q_rec[:, k] = q
            w_rec[:, k] = w
    return ContinuousRunResult(times=times, q_final=q, x_final=x, w_final=w,
                               q_records=q_rec, w_records=w_rec)


# ---------------------------------------------------------------------------
# scaling-limit verification

def discrete_outcome_probs(model: ContinuousModel, delta: float) -> np.ndarray:
    """Outcome law of the discrete chain at cycle length ``delta``.

    For methods built from Hamiltonians this is the exact unitary
    cycle at coupling ``1/sqrt(delta)``; otherwise the first-order form
    ``p0 (1 + sqrt(delta) Gamma)`` is used. Rows are flattened edges
    weighted by the method frequencies, columns pointer states.
    """
    cols = []
    for m in model.methods:
        if m.hamiltonians is not None:
            rows = []
            basis = m.basis if m.basis is not None else np.eye(m.probe_state.shape[0], dtype=complex)
            hp = m.probe_hamiltonian
            for a in range(m.c.shape[1]):
                gen = math.sqrt(delta) * m.hamiltonians[a]
                if hp is not None:
                    gen = gen + delta * hp
                amp = basis.conj() @ (expm(-1j * gen) @ m.probe_state)
                rows.append(np.abs(amp) ** 2)
            p = np.stack(rows, axis=1)
        else:
            p = m.p0[:, None] * (1.0 + math.sqrt(delta) * m.gamma)
        if np.any(p <= 0.0) or np.any(p >= 1.0):
            raise ValidationError(
                f"method {m.id!r}: outcome law leaves (0,1) at delta={delta:g}; "
                f"max admissible delta is {max_admissible_delta(model):.3e}")
        p = p / p.sum(axis=0, keepdims=True)
        cols.append(m.weight * p)
    return np.concatenate(cols, axis=0)


def max_admissible_delta(model: ContinuousModel) -> float:
    """Largest ``delta`` keeping the first-order outcome law inside (0, 1)."""
    best = math.inf
    for m in model.methods:
        g = m.gamma
        with np.errstate(divide="ignore"):
            up = np.where(g > 0, (1.0 / m.p0[:, None] - 1.0) / np.where(g > 0, g, 1.0), math.inf)
            dn = np.where(g < 0, -1.0 / np.where(g < 0, g, -1.0), math.inf)
        best = min(best, float(np.min(up) ** 2), float(np.min(dn) ** 2))
    return best


@dataclass(frozen=True)
class ScalingRow:
    delta: float
    t: float
    kind: str
    component: tuple
    simulated: float
    predicted: float
    sigma: float


@dataclass
class ScalingReport:
    alpha: Any
    n_samples: int
    rows: list

    def mean_rows(self):
        return [r for r in self.rows if r.kind == "mean"]

    def max_mean_deviation(self, delta: float, t: float) -> float:
        return max(abs(r.simulated - r.predicted) for r in self.rows
                   if r.kind == "mean" and r.delta == delta and r.t == t)

    def max_cov_relative_error(self, delta: float, t: float) -> float:
        rows = [r for r in self.rows if r.kind == "cov" and r.delta == delta and r.t == t]
        scale = max(abs(r.predicted) for r in rows)
        return max(abs(r.simulated - r.predicted) for r in rows) / scale

    def to_jsonable(self) -> dict:
        return {
            "alpha": self.alpha,
            "n_samples": self.n_samples,
            "rows": [{
                "delta": r.delta, "t": r.t, "kind": r.kind,
                "component": list(map(str, r.component)),
                "simulated": r.simulated, "predicted": r.predicted, "sigma": r.sigma,
            } for r in self.rows],
        }


def scaling_limit_check(model: ContinuousModel, deltas: Sequence[float], t_grid: Sequence[float],
                        n_samples: int, seed: int, alpha=None) -> ScalingReport:
    """Compare rescaled counting fluctuations against their Gaussian limit.

    For each cycle length ``delta`` the discrete chain is sampled with
    the state pinned to ``alpha`` (outcomes i.i.d., counts multinomial)
    and ``W_t = sqrt(delta) (N_{t/delta} - w t/delta)`` is formed.
    First and second moments at the grid times are reported against the
    limit mean ``t w_e Gamma_e(alpha)`` and covariance
    ``t (w_e delta_ef - w_e w_f)``. Only finite-dimensional moments
    are checked, nothing stronger.
    """
    if alpha is None:
        alpha = model.pointer.labels[int(np.argmax(model.pointer.q0))]
    aidx = model.pointer.index(alpha)
    t_grid = sorted(float(t) for t in t_grid)
    rows: list[ScalingRow] = []
    w0 = model.w
    for J, delta in enumerate(deltas):
        probs = discrete_outcome_probs(model, delta)[:, aidx]
        steps = []
        for t in t_grid:
            n = t / delta
            if abs(n - round(n)) > 1e-9:
                raise ValidationError(f"grid time {t} is not a multiple of delta={delta}")
            steps.append(int(round(n)))
        rng = np.random.Generator(np.random.Philox(key=np.array(
            [np.uint64(seed), np.uint64(J)], dtype=np.uint64)))
        counts = np.zeros((n_samples, model.n_edges), dtype=np.int64)
        prev = 0
        for t, n in zip(t_grid, steps):
            if n > prev:
                counts += rng.multinomial(n - prev, probs, size=n_samples)
            prev = n
            wt = math.sqrt(delta) * (counts - w0[None, :] * n)
            mean = wt.mean(axis=0)
            cov = np.cov(wt.T) if model.n_edges > 1 else np.array([[wt.var(ddof=1)]])
            mean_pred = t * w0 * model.gamma[:, aidx]
            cov_pred = t * (np.diag(w0) - np.outer(w0, w0))
            sig = np.sqrt(np.clip(np.diag(cov_pred), 0, None) / n_samples)
            for e, comp in enumerate(model.edges):
                rows.append(ScalingRow(delta, t, "mean", comp,
                                       float(mean[e]), float(mean_pred[e]), float(sig[e])))
            for e in range(model.n_edges):
                for f in range(e, model.n_edges):
                    rows.append(ScalingRow(delta, t, "cov",
                                           (model.edges[e], model.edges[f]),
                                           float(cov[e, f]), float(cov_pred[e, f]),
                                           float(math.sqrt(2.0 / n_samples) * abs(cov_pred[e, f]))))
    return ScalingReport(alpha=alpha, n_samples=n_samples, rows=rows)
