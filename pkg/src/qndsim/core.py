"""Shared dense linear algebra and probability-vector utilities.

State spaces in this package are tiny (a handful of pointer states and
outcomes), so everything works on dense numpy arrays with direct
algorithms. All comparisons use absolute tolerances: 1e-12 for
probability vectors, 1e-10 for density-matrix structure (stochastic
integration accumulates drift at that scale).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_ATOL = 1e-12
DENSITY_ATOL = 1e-10
#: log-weights at or below this are treated as exactly dead (exp underflows)
LOG_FLOOR = float(np.log(1e-300))


class ValidationError(ValueError):
    """An input violates a structural contract."""


class DimensionError(ValidationError):
    pass


class DegenerateStateError(ValueError):
    """A state collapsed numerically (vanishing trace or total weight)."""


class MultiplicityError(ValueError):
    """Reducible chain: the invariant law is not unique."""

    def __init__(self, msg, components=None):
        super().__init__(msg)
        self.components = tuple(components or ())


class NumericalUnderflowError(FloatingPointError):
    """A linear-space weight underflowed; rerun with log_space enabled."""


class StepSizeError(RuntimeError):
    """An integration step left the admissible region; reduce the step."""


class SectorAmbiguityError(ValidationError):
    """Near-tolerance chains make the sector partition ill-defined."""


class ProtocolError(ValidationError):
    pass


class PhaseUndefinedError(ValidationError):
    """Phase requested for an outcome of probability zero."""


class DiffusiveConditionError(ValidationError):
    """Probe amplitude vanishes on some outcome; no diffusive regime."""


class EnumerationSizeError(ValidationError):
    pass


def as_distribution(w, *, atol: float = PROB_ATOL, name: str = "distribution") -> np.ndarray:
    """Validate and return ``w`` as a probability vector.

    Weights must be nonnegative and sum to one within ``atol``.
    """
    w = np.asarray(w, dtype=float)
    if w.ndim != 1:
        raise DimensionError(f"{name}: expected a 1-d weight vector, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValidationError(f"{name}: non-finite weights")
    if np.any(w < -atol):
        raise ValidationError(f"{name}: negative weight {w.min():.3e}")
    s = float(w.sum())
    if abs(s - 1.0) > atol:
        raise ValidationError(f"{name}: weights sum to {s!r}, not 1 (defect {s - 1.0:.3e})")
    return w


@dataclass(frozen=True)
class DensityDiagnostics:
    hermiticity_defect: float
    trace_defect: float
    min_eigenvalue: float
    ok: bool


def validate_density(a, *, atol: float = DENSITY_ATOL) -> DensityDiagnostics:
    """Report Hermiticity defect, trace defect and minimum eigenvalue of ``a``.

    Passes iff all three are within ``atol`` of a valid density matrix.
    """
    a = np.asarray(a, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"density matrix must be square, got shape {a.shape}")
    herm = float(np.max(np.abs(a - a.conj().T))) if a.size else 0.0
    trace = float(abs(np.trace(a).real - 1.0) + abs(np.trace(a).imag))
    evals = np.linalg.eigvalsh((a + a.conj().T) / 2.0)
    min_ev = float(evals.min()) if evals.size else 0.0
    ok = herm <= atol and trace <= atol and min_ev >= -atol
    return DensityDiagnostics(herm, trace, min_ev, ok)


def hermitize_and_renormalize(a) -> np.ndarray:
    """Project ``a`` onto Hermitian matrices and rescale to unit trace.

    Used after stochastic integration steps to keep drift from
    accumulating. Idempotent on valid density matrices.
    """
    a = np.asarray(a, dtype=complex)
    h = (a + a.conj().T) / 2.0
    tr = float(np.trace(h).real)
    if abs(tr - 1.0) > 0.5:
        raise ValidationError(f"trace {tr!r} too far from 1 for renormalisation")
    if abs(tr) < 1e-6:
        raise DegenerateStateError("trace vanished, state numerically dead")
    return h / tr


def support_closure(reach: np.ndarray) -> np.ndarray:
    """Boolean transitive closure of a reachability relation."""
    r = reach.astype(bool).copy()
    np.fill_diagonal(r, True)
    d = r.shape[0]
    for _ in range(max(1, int(np.ceil(np.log2(max(d, 2)))))):
        r = r | (r @ r)
    return r


def communicating_classes(k) -> list[list[int]]:
    """Communicating classes of the support graph of a kernel ``k``."""
    k = np.asarray(k, dtype=float)
    r = support_closure(k > 0.0)
    mutual = r & r.T
    seen: set[int] = set()
    classes = []
    for i in range(k.shape[0]):
        if i in seen:
            continue
        members = [j for j in range(k.shape[0]) if mutual[i, j]]
        seen.update(members)
        classes.append(members)
    return classes


def _aitken(x0, x1, x2):
    denom = x2 - 2.0 * x1 + x0
    safe = np.abs(denom) > 1e-300
    acc = np.where(safe, x2 - np.where(safe, (x2 - x1) ** 2, 0.0) / np.where(safe, denom, 1.0), x2)
    return np.clip(acc, 0.0, None)


def stationary_distribution(k, *, atol: float = PROB_ATOL, max_sweeps: int = 400) -> np.ndarray:
    """Stationary distribution pi of a row-stochastic kernel ``k``.

    Power iteration with Aitken acceleration; falls back to a direct
    linear solve of the balance equations if iteration stalls. The
    result satisfies ``||pi K - pi||_1 <= atol``.

    Raises ValidationError for non-stochastic rows and
    MultiplicityError (with the communicating classes attached) if the
    chain is reducible.
    """
    k = np.asarray(k, dtype=float)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise DimensionError(f"kernel must be square, got {k.shape}")
    if np.any(k < -atol):
        raise ValidationError("kernel has negative entries")
    rows = k.sum(axis=1)
    if np.max(np.abs(rows - 1.0)) > 1e-9:
        raise ValidationError(f"kernel rows are not stochastic (worst defect {np.max(np.abs(rows - 1.0)):.3e})")
    d = k.shape[0]
    classes = communicating_classes(k)
    closed = [c for c in classes if not np.any(k[np.ix_(c, [j for j in range(d) if j not in c])] > 0)]
    if len(classes) > 1 and len(closed) != 1:
        raise MultiplicityError(
            f"reducible chain with {len(classes)} communicating classes", components=classes)

    def residual(p):
        return float(np.abs(p @ k - p).sum())

    pi = np.full(d, 1.0 / d)
    prev2 = prev1 = pi
    for sweep in range(max_sweeps):
        nxt = pi @ k
        s = nxt.sum()
        nxt = nxt / s
        if residual(nxt) <= atol:
            return nxt
        if sweep >= 2 and sweep % 3 == 0:
            acc = _aitken(prev2, prev1, nxt)
            tot = acc.sum()
            if tot > 0:
                acc = acc / tot
                if residual(acc) <= atol:
                    return acc
        prev2, prev1, pi = prev1, nxt, nxt

    # direct solve of (K^T - I) pi = 0 with a normalisation row
    m = k.T - np.eye(d)
    m[-1, :] = 1.0
    b = np.zeros(d)
    b[-1] = 1.0
    pi = np.linalg.lstsq(m, b, rcond=None)[0]
    pi = np.clip(pi, 0.0, None)
    pi = pi / pi.sum()
    if residual(pi) > atol:
        raise MultiplicityError(
            f"no invariant distribution found to tolerance {atol:g} (residual {residual(pi):.3e})")
    return pi


def normalize_from_log(logw, axis: int = -1) -> np.ndarray:
    """Normalise unnormalised log-weights into a probability vector.

    Max-subtraction keeps the largest weight at scale one, so only
    ratios below the double-precision floor are flushed to zero.
    """
    logw = np.asarray(logw, dtype=float)
    m = np.max(logw, axis=axis, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise DegenerateStateError("all log-weights are -inf")
    with np.errstate(invalid="ignore"):
        w = np.exp(logw - m)
    w[~np.isfinite(w)] = 0.0
    return w / w.sum(axis=axis, keepdims=True)


def log_weights_ok(logw, floor: float = LOG_FLOOR) -> np.ndarray:
    """Mask of weights that are still alive relative to the running max."""
    logw = np.asarray(logw, dtype=float)
    return (logw - logw.max()) > floor
