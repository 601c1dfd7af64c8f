"""Flows of the unperturbed and perturbed Hamilton equations.

The unperturbed flow is exact: actions and z are frozen and angles grow
linearly with the frequencies dH/dI.  The perturbed first order equation
    dI_i/dt = -dH'/dphi_i,   dz_A/dt = 0,   dphi_i/dt = +dH'/dI_i
is integrated numerically on the (I, phi) block only; z never enters the
integrator state, so Casimir invariance holds bit-exactly by construction.

For speed the right-hand side and the stepping loop are generated as
Python source specialized to the model and compiled with numba when the
run is long enough to amortize JIT cost (plain exec'd Python otherwise).
Angles are integrated unwrapped; wrapping happens on recording.
"""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import expr as ex
from .expr import Expr, simplify_fold
from .geometry import ChartSpec, SymplecticCoeffs, VectorFieldSpec, hamiltonian_vf_poisson

__all__ = [
    "State", "ModelSpec", "Trajectory", "IntegratorConfig",
    "ModelError", "NonFiniteStateError", "FixedPointDivergenceError",
    "wrap_angle", "exact_unperturbed_flow", "integrate_perturbed",
    "energy_drift", "EnergyDriftResult", "write_trajectory_csv",
]

TWO_PI = 2.0 * math.pi

METHODS = ("rk4", "implicit_midpoint")

# runs shorter than this stay on the plain-Python path; JIT compilation
# costs about a second per model and only pays off on long horizons
_JIT_MIN_STEPS = 100_000


class ModelError(ValueError):
    def __init__(self, field_name: str, reason: str):
        super().__init__(f"{field_name}: {reason}")
        self.field_name = field_name
        self.reason = reason


class NonFiniteStateError(RuntimeError):
    def __init__(self, step: int, partial: "Trajectory | None" = None):
        super().__init__(f"state became non-finite at step {step}")
        self.step = step
        self.partial = partial


class FixedPointDivergenceError(RuntimeError):
    def __init__(self, step: int, partial: "Trajectory | None" = None):
        super().__init__(f"implicit midpoint fixed point failed to converge at step {step}")
        self.step = step
        self.partial = partial


def wrap_angle(x: float) -> float:
    """Reduce a finite angle to [0, 2*pi)."""
    r = x % TWO_PI
    # x % 2pi can round up to exactly 2pi for tiny negative x
    return 0.0 if r >= TWO_PI else r


def _wrap_array(x: np.ndarray) -> np.ndarray:
    r = np.mod(x, TWO_PI)
    r[r >= TWO_PI] = 0.0
    return r


@dataclass(frozen=True, eq=False)
class State:
    """A phase-space point (I, z, phi) with angles wrapped to [0, 2*pi)."""

    I: np.ndarray
    z: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "I", np.atleast_1d(np.asarray(self.I, dtype=float)))
        object.__setattr__(self, "z", np.atleast_1d(np.asarray(self.z, dtype=float)))
        phi = np.atleast_1d(np.asarray(self.phi, dtype=float))
        object.__setattr__(self, "phi", _wrap_array(phi.copy()))
        if self.I.shape != self.phi.shape:
            raise ValueError("I and phi must have the same length")


@dataclass(frozen=True)
class ModelSpec:
    """A Hamiltonian H(I, z), an angle-dependent perturbation H1 scaled by
    eps, and the commuting integrals of motion (the actions by default)."""

    chart: ChartSpec
    H: Expr
    H1: Expr
    eps: float
    integrals: tuple[Expr, ...] | None = None
    sc: SymplecticCoeffs | None = None

    def __post_init__(self):
        if self.eps < 0:
            raise ModelError("eps", "perturbation scale must be >= 0")
        if self.integrals is None:
            object.__setattr__(self, "integrals",
                               tuple(ex.var(n) for n in self.chart.action_names))
        self._require_angle_free("H", self.H)
        for idx, f in enumerate(self.integrals):
            self._require_angle_free(f"integrals[{idx}]", f)

    def _require_angle_free(self, label: str, f: Expr) -> None:
        folded = simplify_fold(f)
        angle_names = set(self.chart.angle_names)
        if not (ex.free_vars(folded) & angle_names):
            return
        for a in sorted(ex.free_vars(folded) & angle_names):
            if not ex.is_zero(ex.diff(folded, a), self.chart):
                raise ModelError(label, f"depends on angle {a}")

    def perturbed_hamiltonian(self) -> Expr:
        """H + eps * H1, folded (reduces to H when eps = 0)."""
        return simplify_fold(ex.add(self.H, ex.mul(ex.const(self.eps), self.H1)))


@dataclass(frozen=True)
class IntegratorConfig:
    method: str = "rk4"
    h: float = 1e-3
    T: float = 1.0
    record_every: int = 1
    fixed_point_tol: float = 1e-12
    fixed_point_max_iter: int = 50

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not (self.h > 0 and self.T > 0 and self.h <= self.T):
            raise ValueError("need 0 < h <= T")
        if self.record_every < 1:
            raise ValueError("record_every must be a positive integer")
        if not (self.fixed_point_tol > 0 and self.fixed_point_max_iter >= 1):
            raise ValueError("fixed point tolerances must be positive")

    @property
    def n_steps(self) -> int:
        return max(1, int(round(self.T / self.h)))


@dataclass(eq=False)
class Trajectory:
    """Uniformly recorded solution samples.  z is stored once and
    broadcast: the integrator never owns a mutable copy."""

    times: np.ndarray            # (n,)
    I: np.ndarray                # (n, k)
    z0: np.ndarray               # (m,)
    phi: np.ndarray              # (n, k), wrapped
    phi_unwrapped: np.ndarray    # (n, k)
    left_domain: bool = False
    left_domain_step: int | None = None

    @property
    def z(self) -> np.ndarray:
        return np.broadcast_to(self.z0, (len(self.times), len(self.z0)))

    @property
    def n_recorded(self) -> int:
        return len(self.times)

    def state_at(self, j: int) -> State:
        return State(I=self.I[j].copy(), z=self.z0.copy(), phi=self.phi[j].copy())


# ---------------------------------------------------------------------------
# exact unperturbed flow

def exact_unperturbed_flow(model: ModelSpec, s0: State, t: float) -> State:
    """Closed-form flow with eps treated as zero: I and z frozen,
    phi(t) = wrap(phi(0) + t * dH/dI(I(0), z(0)))."""
    binding = model.chart.binding_of(s0.I, s0.z)
    omega = np.array([ex.evaluate(ex.diff(model.H, n), binding)
                      for n in model.chart.action_names])
    phi = _wrap_array(s0.phi + t * omega)
    return State(I=s0.I.copy(), z=s0.z.copy(), phi=phi)


# ---------------------------------------------------------------------------
# specialized integrator source

def _stage_eval(lines: list[str], vf_src: list[tuple[str, str]],
                rename: Mapping[str, str], prefix: str) -> None:
    for name, src in vf_src:
        lines.append(f"    {prefix}{name} = {src.format(**rename)}")


def _render_runner(vf: VectorFieldSpec, chart: ChartSpec, method: str) -> str:
    """Emit source for a run function specialized to the vector field.

    Signature: run(y0, z, h, n_steps, record_every, fp_tol, fp_max,
                   v_lo, v_hi, rec_t, rec_I, rec_pu) ->
               (status, event_step, left_step, n_recorded)
    status: 0 ok, 1 non-finite state, 2 fixed-point divergence.
    """
    k, m = chart.k, chart.m
    ynames = list(chart.action_names) + list(chart.angle_names)
    znames = list(chart.param_names)

    # components as format templates over {I1}, {phi1}, ... placeholders
    def template(e: Expr) -> str:
        rename = {n: f"{{{n}}}" for n in ynames + znames}
        return ex.py_source(e, rename=rename)

    vf_src = [(n, template(e)) for n, e in
              zip(ynames, list(vf.dI) + list(vf.dphi))]
    identity = {n: n for n in ynames + znames}

    lines: list[str] = []
    lines.append("def _run(y0, z, h, n_steps, record_every, fp_tol, fp_max,"
                 " v_lo, v_hi, rec_t, rec_I, rec_pu):")
    for j, n in enumerate(ynames):
        lines.append(f"    {n} = y0[{j}]")
    for j, n in enumerate(znames):
        lines.append(f"    {n} = z[{j}]")
    lines.append("    hh = 0.5 * h")
    if method == "rk4":
        lines.append("    h6 = h / 6.0")
    lines.append("    rec_t[0] = 0.0")
    for j in range(k):
        lines.append(f"    rec_I[0, {j}] = {ynames[j]}")
        lines.append(f"    rec_pu[0, {j}] = {ynames[k + j]}")
    lines.append("    ri = 1")
    lines.append("    status = 0")
    lines.append("    ev_step = 0")
    lines.append("    left_step = -1")
    lines.append("    for step in range(1, n_steps + 1):")

    body: list[str] = []
    if method == "rk4":
        _stage_eval(body, vf_src, identity, "k1_")
        for n in ynames:
            body.append(f"    s2_{n} = {n} + hh * k1_{n}")
        _stage_eval(body, vf_src, {**identity, **{n: f"s2_{n}" for n in ynames}}, "k2_")
        for n in ynames:
            body.append(f"    s3_{n} = {n} + hh * k2_{n}")
        _stage_eval(body, vf_src, {**identity, **{n: f"s3_{n}" for n in ynames}}, "k3_")
        for n in ynames:
            body.append(f"    s4_{n} = {n} + h * k3_{n}")
        _stage_eval(body, vf_src, {**identity, **{n: f"s4_{n}" for n in ynames}}, "k4_")
        for n in ynames:
            body.append(f"    {n} = {n} + h6 * (k1_{n} + 2.0 * (k2_{n} + k3_{n}) + k4_{n})")
    else:  # implicit midpoint: solve mid = y + (h/2) f(mid), then y = 2*mid - y
        _stage_eval(body, vf_src, identity, "k_")
        for n in ynames:
            body.append(f"    m_{n} = {n} + hh * k_{n}")
        body.append("    converged = False")
        body.append("    for _it in range(fp_max):")
        mid = {**identity, **{n: f"m_{n}" for n in ynames}}
        for n, src in vf_src:
            body.append(f"        g_{n} = {src.format(**mid)}")
        for n in ynames:
            body.append(f"        n_{n} = {n} + hh * g_{n}")
        first = ynames[0]
        body.append(f"        delta = abs(n_{first} - m_{first})")
        for n in ynames[1:]:
            body.append(f"        d_{n} = abs(n_{n} - m_{n})")
            body.append(f"        if d_{n} > delta:")
            body.append(f"            delta = d_{n}")
        for n in ynames:
            body.append(f"        m_{n} = n_{n}")
        body.append("        if delta <= fp_tol:")
        body.append("            converged = True")
        body.append("            break")
        body.append("    if not converged:")
        body.append("        status = 2")
        body.append("        ev_step = step")
        body.append("        break")
        for n in ynames:
            body.append(f"    {n} = 2.0 * m_{n} - {n}")

    finite = " and ".join(f"{n} - {n} == 0.0" for n in ynames)
    body.append(f"    if not ({finite}):")
    body.append("        status = 1")
    body.append("        ev_step = step")
    body.append("        break")
    inside = " or ".join(
        f"{ynames[j]} < v_lo[{j}] or {ynames[j]} > v_hi[{j}]" for j in range(k))
    body.append(f"    if left_step < 0 and ({inside}):")
    body.append("        left_step = step")
    body.append("    if step % record_every == 0:")
    body.append("        rec_t[ri] = step * h")
    for j in range(k):
        body.append(f"        rec_I[ri, {j}] = {ynames[j]}")
        body.append(f"        rec_pu[ri, {j}] = {ynames[k + j]}")
    body.append("        ri = ri + 1")

    lines.extend("    " + b for b in body)
    lines.append("    return status, ev_step, left_step, ri")
    return "\n".join(lines) + "\n"


_RUNNER_CACHE: dict[tuple[str, bool], object] = {}


def _jit_enabled(n_steps: int) -> bool:
    env = os.environ.get("PISTLAB_JIT", "auto")
    if env == "0":
        return False
    if env == "1":
        return True
    return n_steps >= _JIT_MIN_STEPS


def _get_runner(source: str, jit: bool):
    key = (source, jit)
    runner = _RUNNER_CACHE.get(key)
    if runner is not None:
        return runner
    namespace: dict = {"math": math}
    exec(source, namespace)
    runner = namespace["_run"]
    if jit:
        try:
            import numba
            runner = numba.njit(cache=False)(runner)
        except ImportError:
            pass
    _RUNNER_CACHE[key] = runner
    return runner


def integrate_perturbed(model: ModelSpec, s0: State,
                        cfg: IntegratorConfig) -> Trajectory:
    """Integrate the perturbed first order equation from s0.

    z components are copied to the output verbatim; only (I, phi) are
    stepped.  Leaving the action box V does not abort the run, it only
    sets the left_domain flag.  Non-finite states and fixed point
    divergence raise, with the partial trajectory attached.
    """
    chart = model.chart
    if len(s0.I) != chart.k or len(s0.z) != chart.m:
        raise ValueError("initial state dimensions do not match the chart")
    vf = hamiltonian_vf_poisson(model.perturbed_hamiltonian(), chart)
    source = _render_runner(vf, chart, cfg.method)
    n_steps = cfg.n_steps
    runner = _get_runner(source, _jit_enabled(n_steps))

    n_rec = n_steps // cfg.record_every + 1
    rec_t = np.empty(n_rec)
    rec_I = np.empty((n_rec, chart.k))
    rec_pu = np.empty((n_rec, chart.k))
    v_lo = np.array([lo for lo, _ in chart.action_box])
    v_hi = np.array([hi for _, hi in chart.action_box])
    y0 = np.concatenate([s0.I, s0.phi])

    status, ev_step, left_step, ri = runner(
        y0, s0.z, cfg.h, n_steps, cfg.record_every,
        cfg.fixed_point_tol, cfg.fixed_point_max_iter,
        v_lo, v_hi, rec_t, rec_I, rec_pu)

    traj = Trajectory(
        times=rec_t[:ri].copy(),
        I=rec_I[:ri].copy(),
        z0=s0.z.copy(),
        phi=_wrap_array(rec_pu[:ri].copy()),
        phi_unwrapped=rec_pu[:ri].copy(),
        left_domain=left_step >= 0,
        left_domain_step=int(left_step) if left_step >= 0 else None)
    if status == 1:
        raise NonFiniteStateError(int(ev_step), partial=traj)
    if status == 2:
        raise FixedPointDivergenceError(int(ev_step), partial=traj)
    return traj


# ---------------------------------------------------------------------------
# diagnostics

@dataclass
class EnergyDriftResult:
    max_abs_drift: float
    series: np.ndarray


def energy_drift(traj: Trajectory, model: ModelSpec) -> EnergyDriftResult:
    """H'(state_j) - H'(state_0) along the record; H' is conserved by the
    exact flow, so the series measures integrator error."""
    chart = model.chart
    names = list(chart.action_names) + list(chart.param_names) + list(chart.angle_names)
    fn = ex.compile_evaluator([model.perturbed_hamiltonian()], names)
    args = ([traj.I[:, j] for j in range(chart.k)]
            + [np.full(traj.n_recorded, traj.z0[a]) for a in range(chart.m)]
            + [traj.phi[:, j] for j in range(chart.k)])
    values = np.asarray(fn(*args)[0], dtype=float)
    if values.ndim == 0:
        values = np.full(traj.n_recorded, float(values))
    series = values - values[0]
    return EnergyDriftResult(max_abs_drift=float(np.max(np.abs(series))),
                             series=series)


def write_trajectory_csv(traj: Trajectory, fh: io.TextIOBase) -> None:
    """CSV with header t,I*,z*,phi*,phiu* at 17 significant digits."""
    k = traj.I.shape[1]
    m = len(traj.z0)
    header = (["t"] + [f"I{i+1}" for i in range(k)] + [f"z{a+1}" for a in range(m)]
              + [f"phi{i+1}" for i in range(k)] + [f"phiu{i+1}" for i in range(k)])
    fh.write(",".join(header) + "\n")
    zs = [f"{v:.17g}" for v in traj.z0]
    for j in range(traj.n_recorded):
        row = [f"{traj.times[j]:.17g}"]
        row += [f"{v:.17g}" for v in traj.I[j]]
        row += zs
        row += [f"{v:.17g}" for v in traj.phi[j]]
        row += [f"{v:.17g}" for v in traj.phi_unwrapped[j]]
        fh.write(",".join(row) + "\n")
