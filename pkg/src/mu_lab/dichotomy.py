"""Dichotomy models: projections, jump-data projectors, and bound certificates.

Shipped models are diagonal systems whose coordinates evolve by exact
scalar flows exp(rho_i(t) - rho_i(s)) with a known log-primitive rho_i.
Projections are analytic for these: the unstable projector reads the
coordinate value at omega = 0 and spreads it along the backward-decaying
solution shape, which commutes with the evolution exactly.  Certificates
estimate operator norms by maximizing over a finite probe family, so every
measured number is a lower bound of the true norm; the certificate
tolerance absorbs that slack.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dde_core import DelayTerm, LinearDelaySystem, fundamental_jump, solution_op_T
from .errors import SingularUnstableBasis, TimeOrder
from .growth_rate import GrowthRate, mu_weight, rate_by_id, ratio_bound_N
from .phase_space import JumpSegment, Segment, sup_norm

DEFAULT_SCAN = np.linspace(-50.0, 50.0, 20001)


@dataclass(frozen=True)
class FlowCoordinate:
    """One diagonal coordinate with flow exp(rho(t) - rho(s))."""

    role: str  # "stable" or "unstable"
    log_flow: Callable[[np.ndarray], np.ndarray]  # rho, vectorized
    coeff: Callable[[float], float]  # rho', the system coefficient

    def __post_init__(self):
        if self.role not in ("stable", "unstable"):
            raise ValueError(f"role must be stable/unstable, got {self.role!r}")


@dataclass(frozen=True)
class DichotomyModel:
    """A linear system with projections and declared dichotomy constants."""

    label: str
    mu: GrowthRate
    r: float
    sys: LinearDelaySystem
    P: Callable[[float, Segment], Segment]
    Q: Callable[[float, Segment], Segment]
    unstable_basis: Callable[[float, int], list]
    unstable_backward: Callable[[float, float, np.ndarray], np.ndarray]
    K: float
    alpha: float
    beta: float
    theta: float
    nu: float
    K_tilde: float
    a: float
    eps: float
    coords: Optional[tuple[FlowCoordinate, ...]] = None

    @property
    def n(self) -> int:
        return self.sys.n

    @property
    def d_u(self) -> int:
        if self.coords is None:
            return len(self.unstable_basis(0.0, 2))
        return sum(1 for c in self.coords if c.role == "unstable")

    @property
    def unstable_indices(self) -> list[int]:
        if self.coords is None:
            raise ValueError("model has no diagonal coordinate structure")
        return [i for i, c in enumerate(self.coords) if c.role == "unstable"]


@dataclass(frozen=True)
class P0Composite:
    """X0 p minus the unstable jump projection: a jump plus a continuous part."""

    jump: np.ndarray
    segment: Segment

    def value_at(self, omega: float) -> np.ndarray:
        v = self.segment.value_at(omega)
        if abs(omega) <= 1e-12:
            v = v + self.jump
        return v

    def sup(self) -> float:
        return max(float(np.max(np.abs(self.segment.values[-1] + self.jump))), sup_norm(self.segment))


# ---------------------------------------------------------------------------
# diagonal exact-flow machinery
# ---------------------------------------------------------------------------


def _rho_matrix(coords: Sequence[FlowCoordinate], times: np.ndarray) -> np.ndarray:
    return np.array([np.asarray(c.log_flow(times), dtype=float) for c in coords])


def seg_T_closed(model: DichotomyModel, t: float, s: float, seg: Segment) -> Segment:
    """T(t, s) for diagonal flows: evolve the endpoint, splice the history."""
    if t < s:
        raise TimeOrder(f"t={t} earlier than s={s}")
    coords = model.coords
    grid = t + seg.omega_grid
    rho = _rho_matrix(coords, grid)
    rho_s = _rho_matrix(coords, np.array([s]))[:, 0]
    forward = grid >= s - 1e-12
    vals = np.empty((seg.m + 1, model.n))
    end = seg.values[-1]
    for i in range(model.n):
        vals[:, i] = end[i] * np.exp(rho[i] - rho_s[i])
    if not forward.all():
        for j in np.where(~forward)[0]:
            vals[j] = seg.value_at(max(-seg.r, grid[j] - s))
    return Segment(seg.r, vals)


def jump_T0_closed(model: DichotomyModel, t: float, s: float, p, m: int) -> Segment:
    """T0(t, s) X0 p for diagonal flows (sampled; zero left of s)."""
    if t < s:
        raise TimeOrder(f"t={t} earlier than s={s}")
    p = np.atleast_1d(np.asarray(p, dtype=float))
    grid = t + np.linspace(-model.r, 0.0, m + 1)
    rho = _rho_matrix(model.coords, grid)
    rho_s = _rho_matrix(model.coords, np.array([s]))[:, 0]
    forward = grid >= s - 1e-12
    vals = np.zeros((m + 1, model.n))
    for i in range(model.n):
        vals[:, i] = np.where(forward, p[i] * np.exp(rho[i] - rho_s[i]), 0.0)
    return Segment(model.r, vals)


def p0_evolved_closed(model: DichotomyModel, t: float, s: float, p, m: int) -> Segment:
    """T0(t, s) P0(s) p: stable flow forward of s, negated unstable tail before it."""
    if t < s:
        raise TimeOrder(f"t={t} earlier than s={s}")
    p = np.atleast_1d(np.asarray(p, dtype=float))
    grid = t + np.linspace(-model.r, 0.0, m + 1)
    rho = _rho_matrix(model.coords, grid)
    rho_s = _rho_matrix(model.coords, np.array([s]))[:, 0]
    forward = grid >= s - 1e-12
    vals = np.zeros((m + 1, model.n))
    for i, c in enumerate(model.coords):
        flow = p[i] * np.exp(rho[i] - rho_s[i])
        if c.role == "stable":
            vals[:, i] = np.where(forward, flow, 0.0)
        else:
            vals[:, i] = np.where(forward, 0.0, -flow)
    return Segment(model.r, vals)


def q0_backward_closed(model: DichotomyModel, t: float, s: float, p, m: int) -> Segment:
    """T_bar(t, s) Q0(s) p for t <= s: unstable coordinates pulled back."""
    if t > s:
        raise TimeOrder(f"t={t} later than s={s}")
    p = np.atleast_1d(np.asarray(p, dtype=float))
    grid = t + np.linspace(-model.r, 0.0, m + 1)
    rho = _rho_matrix(model.coords, grid)
    rho_s = _rho_matrix(model.coords, np.array([s]))[:, 0]
    vals = np.zeros((m + 1, model.n))
    for i, c in enumerate(model.coords):
        if c.role == "unstable":
            vals[:, i] = p[i] * np.exp(rho[i] - rho_s[i])
    return Segment(model.r, vals)


def p0_kernel(model: DichotomyModel, t: float, taus: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Per-coordinate kernels (n, n_tau, n_omega) of v -> T0(t,tau) P0(tau) v."""
    grid = t + omega
    rho_g = _rho_matrix(model.coords, grid)
    rho_t = _rho_matrix(model.coords, taus)
    out = np.zeros((model.n, len(taus), len(omega)))
    ahead = grid[None, :] >= taus[:, None] - 1e-12
    for i, c in enumerate(model.coords):
        flow = np.exp(rho_g[i][None, :] - rho_t[i][:, None])
        out[i] = np.where(ahead, flow, 0.0) if c.role == "stable" else np.where(ahead, 0.0, -flow)
    return out


def q0_kernel(model: DichotomyModel, t: float, taus: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Per-coordinate kernels (n, n_tau, n_omega) of v -> T_bar(t,tau) Q0(tau) v."""
    grid = t + omega
    rho_g = _rho_matrix(model.coords, grid)
    rho_t = _rho_matrix(model.coords, taus)
    out = np.zeros((model.n, len(taus), len(omega)))
    for i, c in enumerate(model.coords):
        if c.role == "unstable":
            out[i] = np.exp(rho_g[i][None, :] - rho_t[i][:, None])
    return out


def unstable_shape(model: DichotomyModel, t: float, m: int) -> np.ndarray:
    """Backward-decaying solution shapes (d_u, m+1) normalized to 1 at omega=0."""
    grid = t + np.linspace(-model.r, 0.0, m + 1)
    shapes = []
    for i in model.unstable_indices:
        rho = np.asarray(model.coords[i].log_flow(grid), dtype=float)
        shapes.append(np.exp(rho - rho[-1]))
    return np.array(shapes)


# ---------------------------------------------------------------------------
# model builders
# ---------------------------------------------------------------------------


def _power_coordinate(mu: GrowthRate, power: float) -> FlowCoordinate:
    def log_flow(ts):
        return power * np.log(np.asarray(mu.eval(ts), dtype=float))

    def coeff(t):
        return power * float(mu.deriv(t)) / float(mu.eval(t))

    return FlowCoordinate(role="stable" if power < 0 else "unstable", log_flow=log_flow, coeff=coeff)


def diagonal_model(
    mu: GrowthRate,
    r: float,
    coords: Sequence[FlowCoordinate],
    *,
    label: str = "diagonal",
    K: Optional[float] = None,
    alpha: float = 0.8,
    beta: float = 0.6,
    theta: float = 0.4,
    nu: float = 0.2,
    K_tilde: float = 1.05,
    a: float = 1.0,
    eps: float = 0.1,
) -> DichotomyModel:
    """Assemble a DichotomyModel from diagonal exact-flow coordinates.

    Declared constants default to a reference set; K defaults to the honest
    worst case for these projections: the unstable projector has norm one,
    so the transient of I - Q on one delay interval costs a factor 2, and
    reading the segment at omega = -r costs N(r)^alpha.
    """
    coords = tuple(coords)
    n = len(coords)
    unstable_idx = [i for i, c in enumerate(coords) if c.role == "unstable"]
    N = ratio_bound_N(mu, r, DEFAULT_SCAN)
    if K is None:
        K = (2.0 if unstable_idx else 1.0) * N**alpha

    terms = (DelayTerm(0.0, lambda t, cs=coords: np.diag([c.coeff(t) for c in cs])),)
    sys = LinearDelaySystem(r=r, n=n, terms=terms, label=label)

    def Q(s: float, seg: Segment) -> Segment:
        vals = np.zeros_like(seg.values)
        grid = s + seg.omega_grid
        for i in unstable_idx:
            rho = np.asarray(coords[i].log_flow(grid), dtype=float)
            vals[:, i] = seg.values[-1, i] * np.exp(rho - rho[-1])
        return Segment(seg.r, vals)

    def P(s: float, seg: Segment) -> Segment:
        return seg - Q(s, seg)

    def basis(s: float, m: int) -> list:
        grid = s + np.linspace(-r, 0.0, m + 1)
        out = []
        for i in unstable_idx:
            rho = np.asarray(coords[i].log_flow(grid), dtype=float)
            vals = np.zeros((m + 1, n))
            vals[:, i] = np.exp(rho - rho[-1])
            out.append(Segment(r, vals))
        return out

    def backward(t: float, s: float, c: np.ndarray) -> np.ndarray:
        c = np.atleast_1d(np.asarray(c, dtype=float))
        out = np.empty_like(c)
        for k, i in enumerate(unstable_idx):
            rt = float(np.asarray(coords[i].log_flow(np.array([t])))[0])
            rs = float(np.asarray(coords[i].log_flow(np.array([s])))[0])
            out[k] = c[k] * np.exp(rt - rs)
        return out

    return DichotomyModel(
        label=label,
        mu=mu,
        r=r,
        sys=sys,
        P=P,
        Q=Q,
        unstable_basis=basis,
        unstable_backward=backward,
        K=K,
        alpha=alpha,
        beta=beta,
        theta=theta,
        nu=nu,
        K_tilde=K_tilde,
        a=a,
        eps=eps,
        coords=coords,
    )


def scalar_stable_model(mu: GrowthRate, r: float, *, alpha: float = 0.8, **kw) -> DichotomyModel:
    """One stable coordinate with exact flow (mu(t)/mu(s))^(-alpha)."""
    coord = _power_coordinate(mu, -alpha)
    kw.setdefault("label", f"stable[{mu.label}]")
    return diagonal_model(mu, r, [coord], alpha=alpha, **kw)


def scalar_unstable_model(mu: GrowthRate, r: float, *, beta: float = 0.6, **kw) -> DichotomyModel:
    """One unstable coordinate with exact flow (mu(t)/mu(s))^beta."""
    coord = _power_coordinate(mu, beta)
    kw.setdefault("label", f"unstable[{mu.label}]")
    return diagonal_model(mu, r, [coord], beta=beta, **kw)


def flagship_model(mu: GrowthRate, r: float, *, alpha: float = 0.8, beta: float = 0.6, **kw) -> DichotomyModel:
    """Stable times unstable diagonal pair, the conjugacy workhorse."""
    kw.setdefault("label", f"diag2[{mu.label}]")
    return diagonal_model(
        mu, r, [_power_coordinate(mu, -alpha), _power_coordinate(mu, beta)], alpha=alpha, beta=beta, **kw
    )


def three_dim_model(mu: GrowthRate, r: float, **kw) -> DichotomyModel:
    """Stable coordinate plus a two-dimensional unstable block."""
    coords = [_power_coordinate(mu, -0.8), _power_coordinate(mu, 0.6), _power_coordinate(mu, 0.9)]
    kw.setdefault("label", f"diag3[{mu.label}]")
    return diagonal_model(mu, r, coords, **kw)


def sin_wobble_model(
    r: float,
    *,
    alpha0: float = 1.0,
    theta0: float = 0.1,
    theta: Optional[float] = None,
    K: Optional[float] = None,
) -> DichotomyModel:
    """Stable scalar whose decay wobbles with d/dt(t sin t), under mu = e^t.

    The primitive of the coefficient is rho(t) = -alpha0 t - theta0 t sin t,
    so the flow is exp(rho(t) - rho(s)).  The honest declaration weakens the
    rate to alpha0 - theta0 and charges the wobble to the nonuniformity
    exponent 2*theta0; setting theta = 0 is the shipped negative control.
    """
    mu = rate_by_id("exp")
    alpha = alpha0 - theta0
    if alpha <= 0:
        raise ValueError("alpha0 must exceed theta0")

    def log_flow(ts):
        ts = np.asarray(ts, dtype=float)
        return -alpha0 * ts - theta0 * ts * np.sin(ts)

    def coeff(t):
        return -alpha0 - theta0 * (np.sin(t) + t * np.cos(t))

    coord = FlowCoordinate(role="stable", log_flow=log_flow, coeff=coeff)
    return diagonal_model(
        mu,
        r,
        [coord],
        label="wobble",
        K=K if K is not None else float(np.exp(alpha * r)),
        alpha=alpha,
        beta=0.6,
        theta=2.0 * theta0 if theta is None else theta,
        nu=0.0,
        K_tilde=1.0,
        a=0.5,
        eps=2.0 * theta0,
    )


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def apply_Q0(
    model: DichotomyModel,
    t: float,
    p,
    *,
    m: int = 64,
    step: Optional[float] = None,
    method: str = "integrate",
) -> Segment:
    """Project jump data onto the unstable directions at time t.

    The defining factorization: evolve the jump one delay forward, apply the
    unstable projection there, solve for coordinates on the unstable basis,
    pull the coordinates back, and reconstitute the segment at time t.
    """
    p = np.atleast_1d(np.asarray(p, dtype=float))
    basis_t = model.unstable_basis(t, m)
    if not basis_t:
        return Segment.zeros(model.r, model.n, m)
    if method == "closed":
        if model.coords is None:
            raise ValueError("closed form requires diagonal coordinates")
        coords_vals = p[model.unstable_indices]
        vals = np.zeros((m + 1, model.n))
        for c, seg in zip(coords_vals, basis_t):
            vals += c * seg.values
        return Segment(model.r, vals)

    s_up = t + model.r
    jumped = fundamental_jump(model.sys, s_up, t, p, step=step, m=m)
    projected = model.Q(s_up, jumped)
    basis_up = model.unstable_basis(s_up, m)
    B = np.stack([b.values.ravel() for b in basis_up], axis=1)
    rhs = projected.values.ravel()
    coords, *_ = np.linalg.lstsq(B, rhs, rcond=None)
    residual = float(np.linalg.norm(B @ coords - rhs))
    scale = max(float(np.linalg.norm(rhs)), 1.0)
    if residual / scale > 1e-6:
        raise SingularUnstableBasis(
            f"basis coordinates do not close at t={t}: residual {residual / scale:.2e}"
        )
    back = model.unstable_backward(t, s_up, coords)
    vals = np.zeros((m + 1, model.n))
    for c, seg in zip(back, basis_t):
        vals += c * seg.values
    return Segment(model.r, vals)


def apply_P0(
    model: DichotomyModel, t: float, p, *, m: int = 64, step: Optional[float] = None, method: str = "integrate"
) -> P0Composite:
    """X0 p minus the unstable jump projection, kept as (jump, continuous)."""
    p = np.atleast_1d(np.asarray(p, dtype=float))
    q0 = apply_Q0(model, t, p, m=m, step=step, method=method)
    return P0Composite(jump=p.copy(), segment=-1.0 * q0)


def evolve_P0(
    model: DichotomyModel, t_to: float, t: float, comp: P0Composite, *, m: int = 64, step: Optional[float] = None
) -> Segment:
    """T0(t_to, t) applied to a (jump, continuous) composite, by integration."""
    jumped = fundamental_jump(model.sys, t_to, t, comp.jump, step=step, m=m)
    if isinstance(jumped, JumpSegment):
        raise TimeOrder("evolve_P0 needs t_to > t")
    carried = solution_op_T(model.sys, t_to, t, comp.segment, step=step if step is not None else model.r / m)
    return jumped + carried


def derived_constant_D(model: DichotomyModel, N: float) -> float:
    """Safe constant for the projected-jump bounds, max over proof branches."""
    K1 = model.K * model.K_tilde * N ** (abs(model.a - model.beta) + model.nu)
    branches = (
        K1,
        model.K_tilde * N**model.a * (1.0 + K1),
        model.K * model.K_tilde * N ** (model.a + model.alpha + model.theta),
    )
    return float(max(branches))


# ---------------------------------------------------------------------------
# certificate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundCheck:
    name: str
    worst_ratio: float
    argmax_pair: tuple[float, float]
    passed: bool
    samples: tuple = field(default=(), repr=False)

    def to_dict(self) -> dict:
        return {
            "bound_name": self.name,
            "worst_ratio": self.worst_ratio,
            "argmax_pair": list(self.argmax_pair),
            "pass": self.passed,
        }


@dataclass(frozen=True)
class DichotomyCertificate:
    window: tuple[float, float]
    checks: tuple[BoundCheck, ...]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str) -> BoundCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "window": list(self.window),
            "tolerance": self.tolerance,
            "pass": self.passed,
            "bounds": [c.to_dict() for c in self.checks],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _probe_segments(model: DichotomyModel, m: int, rng: np.random.Generator) -> list:
    """Unit-norm probes: constants, steep near-jump profiles, smooth noise."""
    n = model.n
    probes = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        probes.append(Segment.constant(model.r, e, m))
        spike = np.zeros((m + 1, n))
        spike[:, i] = -1.0
        spike[-1, i] = 1.0
        probes.append(Segment(model.r, spike))
    grid = np.linspace(-model.r, 0.0, m + 1)
    for _ in range(3):
        freq = rng.uniform(0.5, 4.0, size=n)
        phase = rng.uniform(0, 2 * np.pi, size=n)
        vals = np.cos(np.outer(grid, freq) + phase)
        vals /= np.max(np.abs(vals))
        probes.append(Segment(model.r, vals))
    return probes


def _probe_vectors(n: int, rng: np.random.Generator) -> list:
    vecs = [np.eye(n)[i] for i in range(n)]
    for _ in range(3):
        v = rng.normal(size=n)
        vecs.append(v / np.max(np.abs(v)))
    return vecs


def verify_bounds(
    model: DichotomyModel,
    window: tuple[float, float],
    samples: int = 200,
    *,
    seed: int = 0,
    tol: float = 5e-2,
    m: int = 48,
) -> DichotomyCertificate:
    """Measure all five bound families on random time pairs in the window.

    Failures are recorded in the certificate, never raised.  Needs the
    diagonal closed-form structure; sampling windows of +-10 sit far outside
    what step-by-step integration covers in reasonable time.
    """
    if model.coords is None:
        raise ValueError("verify_bounds needs a diagonal exact-flow model")
    lo, hi = window
    rng = np.random.default_rng(seed)
    mu = model.mu
    N = ratio_bound_N(mu, model.r, DEFAULT_SCAN)
    D = derived_constant_D(model, N)
    probes = _probe_segments(model, m, rng)
    vectors = _probe_vectors(model.n, rng)
    has_unstable = model.d_u > 0

    families = {name: [] for name in ("stable", "unstable", "bounded_growth", "jump_stable", "jump_unstable")}
    for _ in range(samples):
        t1, t2 = np.sort(rng.uniform(lo, hi, size=2))
        s, t = float(t1), float(t2)  # forward pair: t >= s
        ratio_mu = float(mu.eval(t)) / float(mu.eval(s))

        measured = max(sup_norm(seg_T_closed(model, t, s, model.P(s, ph))) / sup_norm(ph) for ph in probes)
        bound = model.K * ratio_mu ** (-model.alpha) * float(mu_weight(mu, s, -model.theta))
        families["stable"].append((t, s, measured, bound))

        measured = max(sup_norm(seg_T_closed(model, t, s, ph)) / sup_norm(ph) for ph in probes)
        measured = max(
            measured,
            max(sup_norm(jump_T0_closed(model, t, s, v, m)) / float(np.max(np.abs(v))) for v in vectors),
        )
        bound = model.K_tilde * ratio_mu**model.a * float(mu_weight(mu, s, -model.eps))
        families["bounded_growth"].append((t, s, measured, bound))

        measured = max(sup_norm(p0_evolved_closed(model, t, s, v, m)) / float(np.max(np.abs(v))) for v in vectors)
        bound = D * ratio_mu ** (-model.alpha) * float(mu_weight(mu, s, -(model.theta + model.eps)))
        families["jump_stable"].append((t, s, measured, bound))

        # backward pair for the unstable families: t <= s
        tb, sb = float(t1), float(t2)
        ratio_b = float(mu.eval(tb)) / float(mu.eval(sb))
        if has_unstable:
            meas_u = 0.0
            for ph in probes:
                qseg = model.Q(sb, ph)
                coords = qseg.values[-1, model.unstable_indices]
                back = model.unstable_backward(tb, sb, coords)
                vals = np.zeros((m + 1, model.n))
                for c, bseg in zip(back, model.unstable_basis(tb, m)):
                    vals += c * bseg.values
                meas_u = max(meas_u, sup_norm(Segment(model.r, vals)) / sup_norm(ph))
            meas_jump = max(
                sup_norm(q0_backward_closed(model, tb, sb, v, m)) / float(np.max(np.abs(v))) for v in vectors
            )
        else:
            meas_u = 0.0
            meas_jump = 0.0
        bound = model.K * ratio_b**model.beta * float(mu_weight(mu, sb, -model.nu))
        families["unstable"].append((tb, sb, meas_u, bound))
        bound = D * ratio_b**model.beta * float(mu_weight(mu, sb, -(model.nu + model.eps)))
        families["jump_unstable"].append((tb, sb, meas_jump, bound))

    checks = []
    for name, rows in families.items():
        ratios = [meas / bnd for (_, _, meas, bnd) in rows]
        worst = int(np.argmax(ratios))
        t_w, s_w, meas, bnd = rows[worst]
        checks.append(
            BoundCheck(
                name=name,
                worst_ratio=float(ratios[worst]),
                argmax_pair=(float(t_w), float(s_w)),
                passed=bool(ratios[worst] <= 1.0 + tol),
                samples=tuple(
                    (float(tt), float(ss), float(mm), float(bb), float(mm / bb)) for tt, ss, mm, bb in rows
                ),
            )
        )
    return DichotomyCertificate(window=(float(lo), float(hi)), checks=tuple(checks), tolerance=tol)
