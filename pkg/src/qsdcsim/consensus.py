"""The phase-consensus protocol loop over three interchangeable backends,
plus the convergence-rate bound and Lyapunov monitoring.

One protocol step: draw fresh theta per node, prepare the product state from
(theta_i, phi_i), set each rotation-Z angle to pinner_i - phi_i, evolve the
master equation for dt, apply any active mixing event, measure, and feed the
estimate back as the next phi_i.

Backends:
  full  - dense density matrix driven by the jump operators;
  bloch - the per-node (x, y, z) expectations, which obey a closed linear
          ODE because rotation-Z and swap conjugation map local Pauli
          observables to local Pauli observables;
  phase - the same flow in polar form, per-node (phi, s) with
          s = r*sin(theta).

Within a step the rotation angle stays frozen (it is set once per step from
the measured phase), so all three backends integrate the same vector field
and agree to integrator precision; the instantaneous-pinner forms
`bloch_rhs` and `phase_rhs` coincide with it at the step start.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import BlochVector, PureQubitSpec
from .measurement import (
    DegenerateCoherenceError,
    phase_from_expectations,
    qdc_from_expectation,
    sample_basis,
    stream_rng,
)
from .netgraph import CommGraph, adjacency_matrix, incidence_matrix, lambda_min_sym

BACKENDS = ("full", "bloch", "phase")
MODES = ("qsdc", "qdc_legacy")

S_FLOOR = 1e-3
_THETA_TAG = 3
_BASIS_TAG = {"X": 0, "Y": 1}


class ConsensusError(Exception):
    pass


class RateRegionError(ValueError):
    """epsilon outside [0, pi/2): the invariant-set argument does not apply."""


@dataclass(frozen=True)
class ThetaConfig:
    """Distribution of the per-step polar angle theta.

    kind "uniform": fresh draw per node per step from (lo, hi);
    kind "fixed": constant, either one scalar for all nodes or one value per
    node (used to reproduce pinned example runs deterministically).
    """

    kind: str = "uniform"
    lo: float = 0.2
    hi: float = math.pi - 0.2
    values: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind == "uniform":
            if not (0.0 < self.lo < self.hi < math.pi):
                raise ValueError(
                    f"uniform theta needs 0 < lo < hi < pi, got ({self.lo}, {self.hi})"
                )
        elif self.kind == "fixed":
            vals = self.values if self.values is not None else (math.pi / 2,)
            object.__setattr__(self, "values", tuple(float(v) for v in vals))
            for v in self.values:
                if not (0.0 < v < math.pi):
                    raise ValueError(f"fixed theta {v} outside (0, pi)")
        else:
            raise ValueError(f"theta kind must be uniform or fixed, got {self.kind!r}")

    @classmethod
    def fixed(cls, *values: float) -> "ThetaConfig":
        return cls(kind="fixed", values=tuple(values))

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "ThetaConfig":
        return cls(kind="uniform", lo=lo, hi=hi)

    def draw(self, seed: int, step: int, n: int) -> np.ndarray:
        if self.kind == "fixed":
            if len(self.values) == 1:
                return np.full(n, self.values[0])
            if len(self.values) != n:
                raise ValueError(
                    f"fixed theta list has {len(self.values)} entries for {n} nodes"
                )
            return np.array(self.values, dtype=float)
        out = np.empty(n)
        for i in range(n):
            rng = stream_rng(seed, step, i, _THETA_TAG)
            out[i] = rng.uniform(self.lo, self.hi)
        return out


@dataclass(frozen=True)
class ProtocolConfig:
    """Settings of one consensus run.

    shots=None selects exact-expectation mode (infinite-shot limit).
    qdc_legacy mode forces theta fixed at pi/2 and the arccos estimator.
    """

    dt: float = 0.01
    substeps: int = 4
    shots: int | None = None
    theta: ThetaConfig = field(default_factory=ThetaConfig)
    backend: str = "phase"
    mode: str = "qsdc"
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.dt <= 0.1):
            raise ValueError(f"dt must lie in (0, 0.1], got {self.dt}")
        if self.substeps < 1:
            raise ValueError(f"substeps must be >= 1, got {self.substeps}")
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.shots is not None and self.shots < 1:
            raise ValueError(f"shots must be >= 1 or None, got {self.shots}")
        if self.mode == "qdc_legacy":
            object.__setattr__(self, "theta", ThetaConfig.fixed(math.pi / 2))

    @property
    def exact(self) -> bool:
        return self.shots is None


@dataclass(frozen=True)
class MixingEvent:
    """Depolarize the listed nodes with strength p at every step whose start
    time falls inside [t_start, t_end)."""

    nodes: tuple[int, ...]
    t_start: float
    t_end: float
    p: float

    def __post_init__(self):
        if not (0.0 <= self.p <= 1.0):
            raise ValueError(f"depolarizing strength must lie in [0,1], got {self.p}")
        if self.t_end < self.t_start:
            raise ValueError("event window is reversed")
        object.__setattr__(self, "nodes", tuple(int(i) for i in self.nodes))

    def active(self, t: float, dt: float) -> bool:
        return self.t_start - 0.5 * dt <= t < self.t_end - 0.5 * dt

    @property
    def bloch_shrink(self) -> float:
        return 1.0 - 4.0 * self.p / 3.0


@dataclass(frozen=True)
class NodeState:
    """Per-node snapshot of one protocol step."""

    phi: float
    theta: float
    s: float
    pinner: float


@dataclass
class ProtocolState:
    """State carried across protocol steps plus last-step diagnostics."""

    phis: np.ndarray
    step: int = 0
    thetas: np.ndarray | None = None
    s: np.ndarray | None = None
    zs: np.ndarray | None = None
    pinners: np.ndarray | None = None
    rho: engine.DensityMatrix | None = None
    warnings: list = field(default_factory=list)

    def node_state(self, i: int) -> NodeState:
        return NodeState(
            phi=float(self.phis[i]),
            theta=float(self.thetas[i]) if self.thetas is not None else float("nan"),
            s=float(self.s[i]) if self.s is not None else float("nan"),
            pinner=float(self.pinners[i]) if self.pinners is not None else float("nan"),
        )


def _clamp_pinners(pinners: np.ndarray, warnings: list) -> np.ndarray:
    lo, hi = 0.0, math.pi / 2
    clamped = np.clip(pinners, lo, hi)
    if np.any(clamped != pinners):
        bad = np.flatnonzero(clamped != pinners)
        warnings.append(f"pinners clamped to [0, pi/2] at nodes {bad.tolist()}")
    return clamped


def bloch_rhs(x, y, z, pinners, graph: CommGraph):
    """Exact local-expectation dynamics in instantaneous-pinner form:

        dx_i = s_i cos(pt_i) - x_i + sum_j a_ij (x_j - x_i)
        dy_i = s_i sin(pt_i) - y_i + sum_j a_ij (y_j - y_i)
        dz_i = sum_j a_ij (z_j - z_i)

    with s_i = sqrt(x_i^2 + y_i^2).  pinners=None drops the pinning term.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    a = adjacency_matrix(graph)
    deg = a.sum(axis=1)
    dx = a @ x - deg * x
    dy = a @ y - deg * y
    dz = a @ z - deg * z
    if pinners is not None:
        pt = np.asarray(pinners, dtype=float)
        s = np.hypot(x, y)
        dx += s * np.cos(pt) - x
        dy += s * np.sin(pt) - y
    return dx, dy, dz


def phase_rhs(phi, s, pinners, graph: CommGraph) -> np.ndarray:
    """Phase dynamics with coherence-ratio coupling weights:

        dphi_i = sin(pt_i - phi_i) + sum_j a_ij (s_j / s_i) sin(phi_j - phi_i)

    With all s equal this is the unit-weight pinned oscillator network.
    """
    phi = np.asarray(phi, dtype=float)
    s = np.asarray(s, dtype=float)
    for i, si in enumerate(s):
        if si <= 0.0:
            raise ZeroDivisionError(f"node {i} has non-positive coherence s={si}")
    a = adjacency_matrix(graph)
    pt = np.asarray(pinners, dtype=float)
    dphi = np.sin(pt - phi)
    diff = np.subtract.outer(phi, phi)  # diff[i, j] = phi_i - phi_j
    ratio = np.divide.outer(1.0 / s, 1.0 / s)  # ratio[i, j] = s_j / s_i
    dphi += np.sum(a * ratio * np.sin(-diff), axis=1)
    return dphi


def _rk4(state: np.ndarray, rhs, dt: float, substeps: int) -> np.ndarray:
    h = dt / substeps
    y = state
    for _ in range(substeps):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * h * k1)
        k3 = rhs(y + 0.5 * h * k2)
        k4 = rhs(y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return y


def _measure_node(x: float, y: float, config: ProtocolConfig, step: int, node: int):
    """Phase estimate of one node from its in-plane expectations."""
    if config.exact:
        if config.mode == "qdc_legacy":
            return qdc_from_expectation(x).phi_hat
        return phase_from_expectations(x, y).phi_hat
    bloch = BlochVector(x=x, y=y, z=0.0)
    cx = sample_basis(bloch, "X", config.shots,
                      stream_rng(config.seed, step, node, _BASIS_TAG["X"]))
    if config.mode == "qdc_legacy":
        return qdc_from_expectation(cx.p0 - cx.p1, cx.shots).phi_hat
    cy = sample_basis(bloch, "Y", config.shots,
                      stream_rng(config.seed, step, node, _BASIS_TAG["Y"]))
    return phase_from_expectations(cx.p0 - cx.p1, cy.p0 - cy.p1,
                                   cx.shots + cy.shots).phi_hat


def _mixing_factors(n: int, events, t: float, dt: float) -> np.ndarray:
    f = np.ones(n)
    for ev in events:
        if ev.active(t, dt):
            for i in ev.nodes:
                f[i] *= ev.bloch_shrink
    return f


def qsdc_step(
    state: ProtocolState,
    graph: CommGraph,
    config: ProtocolConfig,
    pinners,
    events=(),
) -> ProtocolState:
    """One full protocol iteration; deterministic given config.seed."""
    n = graph.node_count
    warnings: list = []
    pt = _clamp_pinners(np.asarray(pinners, dtype=float), warnings)
    phis = np.clip(np.asarray(state.phis, dtype=float), 0.0, math.pi / 2)
    thetas = config.theta.draw(config.seed, state.step, n)
    alphas = pt - phis
    t_now = state.step * config.dt
    shrink = _mixing_factors(n, events, t_now, config.dt)

    if config.backend == "full":
        if n > engine.MAX_DENSE_QUBITS:
            raise engine.CapacityError(
                f"{n} nodes exceed the dense backend cap of {engine.MAX_DENSE_QUBITS}; "
                "use the bloch or phase backend"
            )
        rho = engine.product_state(
            [PureQubitSpec(theta=float(th), phi=float(ph)) for th, ph in zip(thetas, phis)]
        )
        jumps = engine.build_jump_set(graph, alphas)
        rho = engine.evolve(rho, jumps, config.dt, config.substeps)
        for ev in events:
            if ev.active(t_now, config.dt):
                for i in ev.nodes:
                    rho = engine.depolarize_local(rho, i, ev.p)
        xs = np.empty(n)
        ys = np.empty(n)
        zs = np.empty(n)
        for i in range(n):
            b = engine.local_bloch(rho, i)
            xs[i], ys[i], zs[i] = b.x, b.y, b.z
        final_rho = rho
    else:
        cos_a = np.cos(alphas)
        sin_a = np.sin(alphas)
        a = adjacency_matrix(graph)
        deg = a.sum(axis=1)

        if config.backend == "bloch":
            xyz0 = np.concatenate([
                np.sin(thetas) * np.cos(phis),
                np.sin(thetas) * np.sin(phis),
                np.cos(thetas),
            ])

            def rhs(v):
                x, y, z = v[:n], v[n:2 * n], v[2 * n:]
                dx = cos_a * x - sin_a * y - x + a @ x - deg * x
                dy = sin_a * x + cos_a * y - y + a @ y - deg * y
                dz = a @ z - deg * z
                return np.concatenate([dx, dy, dz])

            out = _rk4(xyz0, rhs, config.dt, config.substeps)
            xs = out[:n] * shrink
            ys = out[n:2 * n] * shrink
            zs = out[2 * n:] * shrink
        else:  # phase backend: polar form of the same flow
            ps0 = np.concatenate([phis, np.sin(thetas)])

            def rhs(v):
                ph, s = v[:n], v[n:]
                diff = np.subtract.outer(ph, ph)
                sj_over_si = np.divide.outer(1.0 / s, 1.0 / s)
                sj_cos = np.cos(diff) * s[np.newaxis, :]
                dph = sin_a + np.sum(a * sj_over_si * np.sin(-diff), axis=1)
                ds = (cos_a - 1.0) * s + (a * sj_cos).sum(axis=1) - deg * s
                return np.concatenate([dph, ds])

            out = _rk4(ps0, rhs, config.dt, config.substeps)
            ph, s = out[:n], out[n:] * shrink
            xs = s * np.cos(ph)
            ys = s * np.sin(ph)
            zs = None
        final_rho = None

    s_after = np.hypot(xs, ys)
    new_phis = phis.copy()
    for i in range(n):
        if s_after[i] < S_FLOOR:
            warnings.append(
                f"node {i}: coherence {s_after[i]:.2e} below {S_FLOOR}; "
                "step aborted for this node"
            )
            continue
        try:
            est = _measure_node(float(xs[i]), float(ys[i]), config, state.step, i)
        except DegenerateCoherenceError:
            warnings.append(f"node {i}: degenerate coherence; step aborted for this node")
            continue
        new_phis[i] = min(max(est, 0.0), math.pi / 2)

    return ProtocolState(
        phis=new_phis,
        step=state.step + 1,
        thetas=thetas,
        s=s_after,
        zs=zs,
        pinners=pt,
        rho=final_rho,
        warnings=warnings,
    )


def lyapunov(phis, pinner_star: float) -> float:
    """V = 1/2 sum_i (phi_i - phi*)^2 against a common pinner."""
    z = np.asarray(phis, dtype=float) - float(pinner_star)
    return float(0.5 * np.dot(z, z))


def convergence_rate(graph: CommGraph, epsilon: float, weights=None) -> float:
    """Exponential synchronization rate mu = lambda_min(s1*I + s2*B W B^T)
    with s1 = sinc(eps), s2 = sinc(2*eps), valid for initial deviations
    bounded by eps < pi/2."""
    if not (0.0 <= epsilon < math.pi / 2):
        raise RateRegionError(
            f"epsilon must lie in [0, pi/2) for the invariant set to hold, got {epsilon}"
        )
    # numpy sinc is sin(pi x)/(pi x); rescale and it handles 0 analytically.
    s1 = float(np.sinc(epsilon / math.pi))
    s2 = float(np.sinc(2.0 * epsilon / math.pi))
    b = incidence_matrix(graph)
    w = np.asarray(weights, dtype=float) if weights is not None else np.asarray(graph.weights)
    if w.shape != (len(graph.edges),):
        raise ValueError(f"need {len(graph.edges)} edge weights, got {w.shape}")
    m = s1 * np.eye(graph.node_count) + s2 * (b @ np.diag(w) @ b.T)
    return lambda_min_sym(m)


@dataclass
class Trajectory:
    """Recorded consensus run: phase and pinner series plus V(t)."""

    times: np.ndarray
    phis: np.ndarray      # shape (steps+1, n)
    pinners: np.ndarray   # shape (steps+1, n)
    lyapunov: np.ndarray  # V against the mean pinner, shape (steps+1,)
    backend: str
    mode: str
    seed: int
    dt: float
    warnings: list = field(default_factory=list)

    @property
    def node_count(self) -> int:
        return self.phis.shape[1]

    def write_csv(self, fh) -> None:
        n = self.node_count
        cols = (["t"] + [f"phi_{i}" for i in range(n)]
                + [f"pinner_{i}" for i in range(n)] + ["V"])
        fh.write(",".join(cols) + "\n")
        for k in range(len(self.times)):
            row = [self.times[k], *self.phis[k], *self.pinners[k], self.lyapunov[k]]
            fh.write(",".join(f"{v:.9g}" for v in row) + "\n")


def run_consensus(
    init_phis,
    pinner_signal,
    graph: CommGraph,
    config: ProtocolConfig,
    horizon: float,
    events=(),
) -> Trajectory:
    """Iterate the protocol for horizon/dt steps recording phi, pinners, V.

    pinner_signal is a scalar, a per-node array, or a callable t -> array.
    """
    if horizon <= 0.0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    n = graph.node_count
    steps = int(round(horizon / config.dt))

    def pinners_at(t: float) -> np.ndarray:
        if callable(pinner_signal):
            return np.broadcast_to(np.asarray(pinner_signal(t), dtype=float), (n,)).copy()
        return np.broadcast_to(np.asarray(pinner_signal, dtype=float), (n,)).copy()

    state = ProtocolState(phis=np.asarray(init_phis, dtype=float).copy())
    if state.phis.shape != (n,):
        raise ValueError(f"need {n} initial phases, got shape {state.phis.shape}")

    times = np.empty(steps + 1)
    phis = np.empty((steps + 1, n))
    pinners = np.empty((steps + 1, n))
    vs = np.empty(steps + 1)
    all_warnings: list = []

    pt = pinners_at(0.0)
    times[0] = 0.0
    phis[0] = state.phis
    pinners[0] = pt
    vs[0] = lyapunov(state.phis, float(pt.mean()))

    for k in range(steps):
        t = k * config.dt
        pt = pinners_at(t)
        state = qsdc_step(state, graph, config, pt, events)
        if state.warnings:
            all_warnings.extend(f"t={t:.6g}: {w}" for w in state.warnings)
        times[k + 1] = (k + 1) * config.dt
        phis[k + 1] = state.phis
        pinners[k + 1] = state.pinners
        vs[k + 1] = lyapunov(state.phis, float(state.pinners.mean()))

    return Trajectory(
        times=times, phis=phis, pinners=pinners, lyapunov=vs,
        backend=config.backend, mode=config.mode, seed=config.seed,
        dt=config.dt, warnings=all_warnings,
    )
