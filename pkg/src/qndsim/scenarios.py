"""Built-in, exactly reproducible scenarios.

The cavity probe model measures the photon number of a mode through a
stream of two-level atoms: each atom is rotated by an angle that
depends on the photon number and read out along a tunable axis. With a
quarter-turn per photon the readout law only depends on the photon
number modulo 4, so photon numbers four apart form degenerate sectors.

The other constructors are small pedagogical models used heavily by the
test suite: a two-state Bernoulli discriminator, a three-state cyclic
collapse model, a three-state pair of biased True/False tests whose
mixture lifts the worst-case convergence rate, and weak-coupling
continuous demos.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .continuous import ContinuousMethod, ContinuousModel
from .discrete_sim import DiscreteScenario
from .measurement import MeasurementMethod, PointerModel, phase_norm_decomposition
from .protocol import RandomPolicy

SIGMA3 = np.diag([1.0 + 0.0j, -1.0 + 0.0j])


def _pure_a0(q0: np.ndarray) -> np.ndarray:
    psi = np.sqrt(np.asarray(q0, dtype=float)).astype(complex)
    return np.outer(psi, psi.conj())


def _toy_amplitudes(n_max: int, angle: float, photon_energy: float) -> np.ndarray:
    """Closed-form probe-cycle amplitudes, one column per photon number.

    Photon numbers are reduced modulo 8 inside the trigonometric
    arguments (their exact period), so sector-mates get bitwise
    identical moduli.
    """
    p = np.arange(n_max)
    x = angle + (np.pi / 4.0) * (p % 8)
    pref = np.exp(-1j * (photon_energy * p)) / math.sqrt(2.0)
    plus = pref * np.exp(-1j * np.pi / 4.0) * (np.cos(x) + np.sin(x))
    minus = pref * np.exp(+1j * np.pi / 4.0) * (np.cos(x) - np.sin(x))
    return np.stack([plus, minus], axis=0)


def _toy_probs(n_max: int, angle: float) -> np.ndarray:
    """Readout laws 0.5 (1 +/- sin(2 angle + pi p / 2)), reduced mod 4 exactly."""
    p = np.arange(n_max)
    s = np.sin(2.0 * angle + (np.pi / 2.0) * (p % 4))
    return np.stack([0.5 * (1.0 + s), 0.5 * (1.0 - s)], axis=0)


def toy_probe_pieces(n_max: int, theta: float, theta_prime: float,
                     photon_energy: float) -> tuple[np.ndarray, list, np.ndarray]:
    """Explicit probe state, per-photon unitaries and readout basis.

    The probe starts in ``exp(-i theta sigma3)|+x>``, precesses a
    quarter turn per photon (plus the free phase), and is read out in
    the ``exp(-i theta' sigma3)`` rotated y-basis. Feeding these into
    the Kraus constructor must reproduce the closed-form amplitudes.
    """
    plus_x = np.array([1.0, 1.0], dtype=complex) / math.sqrt(2.0)
    psi = np.diag(np.exp(-1j * theta * np.diag(SIGMA3))) @ plus_x
    unitaries = []
    for p in range(n_max):
        phase = np.exp(-1j * photon_energy * p)
        rot = np.diag(np.exp(-1j * (np.pi / 4.0) * p * np.diag(SIGMA3)))
        unitaries.append(phase * rot)
    plus_y = np.array([1.0, 1.0j], dtype=complex) / math.sqrt(2.0)
    minus_y = np.array([1.0, -1.0j], dtype=complex) / math.sqrt(2.0)
    rot_out = np.diag(np.exp(-1j * theta_prime * np.diag(SIGMA3)))
    basis = np.stack([rot_out @ plus_y, rot_out @ minus_y], axis=0)
    return psi, unitaries, basis


def toy_model(n_max: int = 8, angle: float = math.pi / 3.0,
              photon_energy: float = 0.25, q0=None) -> DiscreteScenario:
    """Photon-number probe chain with a single readout setting.

    ``angle`` is the difference between the preparation and readout
    axes; ``photon_energy`` is the free phase per photon per cycle.
    With the quarter-turn coupling the sectors are the photon numbers
    modulo 4.
    """
    if n_max < 1:
        raise ValueError("need at least one photon level")
    q0 = np.full(n_max, 1.0 / n_max) if q0 is None else np.asarray(q0, dtype=float)
    pointer = PointerModel(
        labels=tuple(range(n_max)),
        energies=photon_energy * np.arange(n_max, dtype=float),
        q0=q0,
        dt=1.0,
        a0=_pure_a0(q0),
    )
    amps = _toy_amplitudes(n_max, angle, photon_energy)
    theta, defined = phase_norm_decomposition(amps, pointer.energies, pointer.dt)
    method = MeasurementMethod(
        id="pulse",
        outcomes=("+", "-"),
        probs=_toy_probs(n_max, angle),
        theta=theta,
        amplitudes=amps,
        phase_defined=defined,
    )
    return DiscreteScenario(
        name="toy-qnd",
        pointer=pointer,
        methods=(method,),
        policy=RandomPolicy(c={"pulse": 1.0}),
        notes="photon-number probe chain, sectors are photon numbers mod 4",
    )


def toy_random_mixture(n_max: int = 4, angles=(math.pi / 3.0, math.pi / 6.0),
                       photon_energy: float = 0.25, q0=None) -> DiscreteScenario:
    """Two readout settings drawn uniformly at random each cycle."""
    q0 = np.full(n_max, 1.0 / n_max) if q0 is None else np.asarray(q0, dtype=float)
    pointer = PointerModel(
        labels=tuple(range(n_max)),
        energies=photon_energy * np.arange(n_max, dtype=float),
        q0=q0,
        dt=1.0,
        a0=_pure_a0(q0),
    )
    methods = []
    for k, ang in enumerate(angles):
        amps = _toy_amplitudes(n_max, ang, photon_energy)
        theta, defined = phase_norm_decomposition(amps, pointer.energies, pointer.dt)
        methods.append(MeasurementMethod(
            id=f"pulse-{k}",
            outcomes=("+", "-"),
            probs=_toy_probs(n_max, ang),
            theta=theta,
            amplitudes=amps,
            phase_defined=defined,
        ))
    c = {m.id: 1.0 / len(methods) for m in methods}
    return DiscreteScenario(
        name="toy-qnd-mix-random",
        pointer=pointer,
        methods=tuple(methods),
        policy=RandomPolicy(c=c),
        notes="uniformly random choice between two readout settings each cycle",
    )


def toy_pair_mixture(n_max: int = 4, angles=(math.pi / 3.0, math.pi / 6.0),
                     photon_energy: float = 0.25, q0=None) -> DiscreteScenario:
    """Both readout settings applied once per cycle (four joint outcomes).

    One step of this scenario carries the combined information of the
    two settings, so per-step convergence rates are the sums of the
    single-setting rates. This is the convention under which the
    mixed-setting rates for the pi/3 and pi/6 pulses evaluate to about
    1.18 and 1.10 and a 99 percent identification takes about 5 cycles.
    """
    q0 = np.full(n_max, 1.0 / n_max) if q0 is None else np.asarray(q0, dtype=float)
    pointer = PointerModel(
        labels=tuple(range(n_max)),
        energies=photon_energy * np.arange(n_max, dtype=float),
        q0=q0,
        dt=1.0,
        a0=_pure_a0(q0),
    )
    amps_a = _toy_amplitudes(n_max, angles[0], photon_energy)
    amps_b = _toy_amplitudes(n_max, angles[1], photon_energy)
    # each single-pulse amplitude carries one cycle of free winding,
    # so the pair carries two: energies below are doubled to match
    signs = ("+", "-")
    rows_amp, rows_p, outcomes = [], [], []
    probs_a = _toy_probs(n_max, angles[0])
    probs_b = _toy_probs(n_max, angles[1])
    for ia, sa in enumerate(signs):
        for ib, sb in enumerate(signs):
            outcomes.append(sa + sb)
            rows_amp.append(amps_a[ia] * amps_b[ib])
            rows_p.append(probs_a[ia] * probs_b[ib])
    pointer2 = PointerModel(
        labels=pointer.labels,
        energies=2.0 * pointer.energies,
        q0=q0,
        dt=1.0,
        a0=_pure_a0(q0),
    )
    amps = np.stack(rows_amp, axis=0)
    theta, defined = phase_norm_decomposition(amps, pointer2.energies, pointer2.dt)
    method = MeasurementMethod(
        id="pulse-pair",
        outcomes=tuple(outcomes),
        probs=np.stack(rows_p, axis=0),
        theta=theta,
        amplitudes=amps,
        phase_defined=defined,
    )
    return DiscreteScenario(
        name="toy-qnd-mix-cycle",
        pointer=pointer2,
        methods=(method,),
        policy=RandomPolicy(c={"pulse-pair": 1.0}),
        notes="one cycle applies both readout settings; rates add per cycle",
    )


def rate_tuning_example(eps: float = 1e-3, q: float = 0.5, q0=None) -> DiscreteScenario:
    """Two biased True/False tests over three states, mixed 50/50.

    Method ``a`` nearly never fires on state 1 and nearly always on
    state 3 (with an intermediate rate ``q`` on state 2); method ``b``
    swaps the roles of states 1 and 2. Each on its own leaves one slow
    pair; the random mixture makes every pairwise rate large.
    """
    if not (0.0 < eps < 1.0) or not (0.0 < q < 1.0):
        raise ValueError("eps and q must lie in (0, 1)")
    if eps in (q, 1.0 - q):
        raise ValueError("eps must differ from q and 1-q")
    labels = (1, 2, 3)
    q0 = np.full(3, 1.0 / 3.0) if q0 is None else np.asarray(q0, dtype=float)
    pointer = PointerModel(labels=labels, energies=np.zeros(3), q0=q0, dt=1.0)
    pa = np.array([[eps, q, 1.0 - eps], [1.0 - eps, 1.0 - q, eps]])
    pb = np.array([[q, eps, 1.0 - eps], [1.0 - q, 1.0 - eps, eps]])
    ma = MeasurementMethod(id="a", outcomes=("T", "F"), probs=pa)
    mb = MeasurementMethod(id="b", outcomes=("T", "F"), probs=pb)
    return DiscreteScenario(
        name="rate-tuning-3state",
        pointer=pointer,
        methods=(ma, mb),
        policy=RandomPolicy(c={"a": 0.5, "b": 0.5}),
        notes="mixing two biased tests lifts the bottleneck convergence rate",
    )


def bernoulli_pair(p_true: float = 0.9, p_alt: float = 0.5, q0=(0.5, 0.5)) -> DiscreteScenario:
    """Two hidden states discriminated by one biased coin."""
    pointer = PointerModel(labels=(0, 1), energies=np.zeros(2), q0=np.asarray(q0, float), dt=1.0)
    probs = np.array([[p_true, p_alt], [1.0 - p_true, 1.0 - p_alt]])
    method = MeasurementMethod(id="coin", outcomes=("T", "F"), probs=probs)
    return DiscreteScenario(
        name="bernoulli-pair",
        pointer=pointer,
        methods=(method,),
        policy=RandomPolicy(c={"coin": 1.0}),
        notes="two-state Bernoulli discrimination",
    )


def three_state_collapse(q0=(0.2, 0.3, 0.5)) -> DiscreteScenario:
    """Three states, one three-outcome readout, all laws distinct."""
    pointer = PointerModel(labels=(0, 1, 2), energies=np.zeros(3), q0=np.asarray(q0, float), dt=1.0)
    probs = np.array([
        [0.7, 0.1, 0.2],
        [0.2, 0.7, 0.1],
        [0.1, 0.2, 0.7],
    ])
    method = MeasurementMethod(id="probe", outcomes=("x", "y", "z"), probs=probs)
    return DiscreteScenario(
        name="three-state-collapse",
        pointer=pointer,
        methods=(method,),
        policy=RandomPolicy(c={"probe": 1.0}),
        notes="non-degenerate three-state collapse model",
    )


def absorbing_outcome(q0=(0.5, 0.5)) -> DiscreteScenario:
    """One outcome is impossible from state 0; seeing it kills that state's weight."""
    pointer = PointerModel(labels=(0, 1), energies=np.zeros(2), q0=np.asarray(q0, float), dt=1.0)
    probs = np.array([
        [0.5, 0.3],
        [0.5, 0.3],
        [0.0, 0.4],
    ])
    method = MeasurementMethod(id="detect", outcomes=("a", "b", "c"), probs=probs)
    return DiscreteScenario(
        name="absorbing-outcome",
        pointer=pointer,
        methods=(method,),
        policy=RandomPolicy(c={"detect": 1.0}),
        notes="an impossible outcome acts as a certain discriminator",
    )


ROTATION_COUPLING = np.array([[0.0, 1.0j], [-1.0j, 0.0]])


def continuous_demo(lams=(1.0, -1.0), q0=None) -> ContinuousModel:
    """Two-outcome weak probe with couplings Gamma(first outcome | a) = 2 lam_a.

    Distinct ``lams`` give a non-degenerate demo whose decay time is
    ``1 / (2 (lam_a - lam_b)^2)``; equal entries collapse into one
    sector with infinite decay time.
    """
    lams = np.asarray(lams, dtype=float)
    d = lams.shape[0]
    q0 = np.full(d, 1.0 / d) if q0 is None else np.asarray(q0, dtype=float)
    pointer = PointerModel(labels=tuple(range(d)), energies=np.zeros(d), q0=q0,
                           dt=1.0, a0=_pure_a0(q0))
    gamma = np.stack([2.0 * lams, -2.0 * lams], axis=0)
    method = ContinuousMethod.from_gamma("weak", ("u", "d"), p0=(0.5, 0.5), gamma=gamma)
    return ContinuousModel(pointer=pointer, methods=(method,))


def continuous_two_sector(lam: float = 1.0, q0=(0.3, 0.3, 0.4)) -> ContinuousModel:
    """Three states whose first two are indistinguishable (one shared coupling).

    Carries nonzero free energies and real coupling parts, so the
    phase compensation is genuinely exercised: the compensated matrix
    must converge to the initial matrix projected on the winning
    sector, coherences included.
    """
    q0 = np.asarray(q0, dtype=float)
    psi = np.sqrt(q0) * np.exp(1j * np.array([0.0, 0.7, 0.2]))
    a0 = np.outer(psi, psi.conj())
    pointer = PointerModel(labels=(0, 1, 2), energies=np.array([0.0, 0.4, 1.1]),
                           q0=q0, dt=1.0, a0=a0)
    gamma = np.array([
        [2.0 * lam, 2.0 * lam, -2.0 * lam],
        [-2.0 * lam, -2.0 * lam, 2.0 * lam],
    ])
    c_real = np.array([
        [0.3, -0.2, 0.1],
        [-0.3, 0.2, -0.1],
    ])
    method = ContinuousMethod.from_gamma("weak", ("u", "d"), p0=(0.5, 0.5),
                                         gamma=gamma, c_real=c_real)
    return ContinuousModel(pointer=pointer, methods=(method,))


def scaling_demo(lams=(1.0, -0.6), q0=None) -> ContinuousModel:
    """Hamiltonian-built weak probe whose discrete cycles are exactly computable.

    The probe is a two-level system coupled through a spin rotation, so
    the cycle unitary is a closed-form rotation and the outcome law at
    cycle length ``delta`` is exact, not just first order.
    """
    lams = np.asarray(lams, dtype=float)
    d = lams.shape[0]
    q0 = np.full(d, 1.0 / d) if q0 is None else np.asarray(q0, dtype=float)
    pointer = PointerModel(labels=tuple(range(d)), energies=np.zeros(d), q0=q0,
                           dt=1.0, a0=_pure_a0(q0))
    psi = np.array([1.0, 1.0], dtype=complex) / math.sqrt(2.0)
    hams = [lam * ROTATION_COUPLING for lam in lams]
    method = ContinuousMethod.from_hamiltonian("weak", psi, hams)
    return ContinuousModel(pointer=pointer, methods=(method,))


def two_method_noise_demo() -> ContinuousModel:
    """Two weak methods with unequal weights; exercises the joint noise law."""
    pointer = PointerModel(labels=(0, 1), energies=np.zeros(2),
                           q0=np.array([0.5, 0.5]), dt=1.0)
    g1 = np.array([[2.0, -2.0], [-2.0, 2.0]])
    m1 = ContinuousMethod.from_gamma("fast", ("u", "d"), p0=(0.5, 0.5), gamma=g1, weight=0.6)
    g2 = np.array([
        [1.0, -1.0],
        [0.5, -0.5],
        [-0.7, 0.7],
    ])
    m2 = ContinuousMethod.from_gamma("slow", ("x", "y", "z"), p0=(0.2, 0.3, 0.5),
                                     gamma=g2, weight=0.4)
    return ContinuousModel(pointer=pointer, methods=(m1, m2))


BUILTIN_SCENARIOS = {
    "toy-qnd": toy_model,
    "toy-qnd-mix-random": toy_random_mixture,
    "toy-qnd-mix-cycle": toy_pair_mixture,
    "rate-tuning-3state": rate_tuning_example,
    "bernoulli-pair": bernoulli_pair,
    "three-state-collapse": three_state_collapse,
    "absorbing-outcome": absorbing_outcome,
    "weak-coupling-demo": continuous_demo,
    "weak-two-sector": continuous_two_sector,
    "weak-scaling-demo": scaling_demo,
    "weak-two-method": two_method_noise_demo,
}


def get_scenario(name: str):
    try:
        return BUILTIN_SCENARIOS[name]()
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; known: {sorted(BUILTIN_SCENARIOS)}")
