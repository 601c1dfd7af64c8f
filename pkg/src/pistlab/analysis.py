"""Frequency-map analysis, Diophantine sieving and torus persistence.

The frequency map sends (I, z) to dH/dI.  A frequency vector is
non-resonant at level gamma when |omega . a| >= gamma * (sum|a_j|)^(-tau)
for every nonzero integer vector a; the sieve tests this exhaustively up
to a lattice cutoff.  A Monte Carlo estimator measures the resonant
complement of the frequency map's image, and the persistence experiment
integrates perturbed orbits over Diophantine and resonant initial tori to
compare action drift and extracted rotation vectors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import expr as ex
from .dynamics import (FixedPointDivergenceError, IntegratorConfig, ModelSpec,
                       NonFiniteStateError, State, Trajectory,
                       integrate_perturbed)

__all__ = [
    "FrequencyVector", "DiophantineSpec", "SieveResult", "RankReport",
    "MeasureResult", "PersistenceReport", "TooShortError",
    "frequency_map_at", "nondegeneracy_rank", "diophantine_test",
    "resonance_measure_mc", "extract_rotation_vector",
    "persistence_experiment", "drift_threshold", "write_persistence_csv",
]

log = logging.getLogger(__name__)

FrequencyVector = np.ndarray

# low-order resonances (sum|a| up to this) mark a torus as resonant
# regardless of its measured drift
LOW_ORDER_CUTOFF = 10

MIN_ROTATION_SAMPLES = 1000


class TooShortError(ValueError):
    pass


@dataclass(frozen=True)
class DiophantineSpec:
    """Non-resonance bound |omega . a| >= gamma * (sum|a_j|)^(-tau) tested
    for all integer a with 0 < sum|a_j| <= a_max.  tau defaults to k + 1
    when left unset."""

    gamma: float
    tau: float | None = None
    a_max: int = 30

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if self.a_max < 1:
            raise ValueError("a_max must be >= 1")

    def tau_for(self, k: int) -> float:
        tau = float(k + 1) if self.tau is None else self.tau
        if tau < k - 1:
            raise ValueError(f"tau = {tau} below k - 1 = {k - 1}")
        return tau


@dataclass
class SieveResult:
    passed: bool
    worst_a: np.ndarray
    worst_margin: float


@dataclass
class RankReport:
    rank: int
    nondegenerate: bool
    singular_values: np.ndarray


@dataclass
class MeasureResult:
    resonant_fraction: float
    stderr: float
    n_samples: int


@dataclass
class PersistenceReport:
    I0: np.ndarray
    eps: float
    action_drift: float
    omega0: np.ndarray
    omega_hat: np.ndarray | None
    sieve: SieveResult
    classification: str   # persistent | resonant | escaped
    error: str | None = None


# ---------------------------------------------------------------------------
# frequency map and non-degeneracy

def frequency_map_at(model: ModelSpec, I: Sequence[float],
                     z: Sequence[float]) -> FrequencyVector:
    """omega_i = dH/dI_i evaluated at (I, z)."""
    binding = model.chart.binding_of(I, z)
    return np.array([ex.evaluate(ex.diff(model.H, n), binding)
                     for n in model.chart.action_names])


def nondegeneracy_rank(model: ModelSpec, I: Sequence[float], z: Sequence[float],
                       tol: float = 1e-9) -> RankReport:
    """Numerical rank of the k x (k+m) Jacobian of the frequency map,
    via SVD with a cutoff relative to the largest singular value."""
    chart = model.chart
    binding = chart.binding_of(I, z)
    cols = list(chart.action_names) + list(chart.param_names)
    J = np.empty((chart.k, len(cols)))
    for i, iname in enumerate(chart.action_names):
        omega_i = ex.diff(model.H, iname)
        for j, col in enumerate(cols):
            J[i, j] = ex.evaluate(ex.diff(omega_i, col), binding)
    s = np.linalg.svd(J, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        rank = 0
    else:
        rank = int(np.sum(s > tol * s[0]))
    return RankReport(rank=rank, nondegenerate=rank == chart.k, singular_values=s)


# ---------------------------------------------------------------------------
# Diophantine sieve

@lru_cache(maxsize=32)
def _lattice(k: int, a_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer vectors with 0 < sum|a_j| <= a_max, one representative per
    {a, -a} pair (first nonzero component positive), with their 1-norms."""
    rows: list[list[int]] = []

    def build(prefix: list[int], budget: int) -> None:
        if len(prefix) == k:
            if any(prefix):
                rows.append(list(prefix))
            return
        for v in range(-budget, budget + 1):
            build(prefix + [v], budget - abs(v))

    build([], a_max)
    A = np.array(rows, dtype=np.int64)
    keep = np.zeros(len(A), dtype=bool)
    for idx in range(len(A)):
        first = A[idx][A[idx] != 0][0]
        keep[idx] = first > 0
    A = A[keep]
    return A, np.abs(A).sum(axis=1).astype(float)


def diophantine_test(omega: FrequencyVector, spec: DiophantineSpec) -> SieveResult:
    """Exhaustive sieve over the truncated lattice; the worst lattice
    vector minimizes |omega . a| - gamma * (sum|a_j|)^(-tau)."""
    omega = np.asarray(omega, dtype=float)
    k = len(omega)
    tau = spec.tau_for(k)
    A, norms = _lattice(k, spec.a_max)
    margins = np.abs(A @ omega) - spec.gamma * norms ** (-tau)
    worst = int(np.argmin(margins))
    return SieveResult(passed=bool(margins[worst] >= 0.0),
                       worst_a=A[worst].copy(),
                       worst_margin=float(margins[worst]))


def _sieve_pass_batch(omegas: np.ndarray, spec: DiophantineSpec) -> np.ndarray:
    """Vectorized pass/fail for many frequency vectors, chunked to bound
    the (samples x lattice) intermediate."""
    n, k = omegas.shape
    tau = spec.tau_for(k)
    A, norms = _lattice(k, spec.a_max)
    bound = spec.gamma * norms ** (-tau)
    passed = np.empty(n, dtype=bool)
    chunk = max(1, int(2_000_000 / max(1, len(A))))
    for start in range(0, n, chunk):
        D = np.abs(omegas[start:start + chunk] @ A.T)
        passed[start:start + chunk] = (D >= bound).all(axis=1)
    return passed


def resonance_measure_mc(model: ModelSpec, spec: DiophantineSpec,
                         n_samples: int, seed: int) -> MeasureResult:
    """Fraction of uniform (I, z) samples whose frequency fails the sieve,
    with the binomial standard error."""
    if n_samples < 100:
        raise ValueError("need at least 100 samples")
    chart = model.chart
    rng = np.random.default_rng(seed)
    I = np.column_stack([rng.uniform(lo, hi, size=n_samples)
                         for lo, hi in chart.action_box])
    if chart.m:
        z = np.column_stack([rng.uniform(lo, hi, size=n_samples)
                             for lo, hi in chart.param_box])
    else:
        z = np.empty((n_samples, 0))
    names = list(chart.action_names) + list(chart.param_names)
    fn = ex.compile_evaluator([ex.diff(model.H, n) for n in chart.action_names], names)
    cols = fn(*[I[:, j] for j in range(chart.k)],
              *[z[:, a] for a in range(chart.m)])
    omegas = np.column_stack([np.broadcast_to(np.asarray(c, dtype=float), (n_samples,))
                              for c in cols])
    passed = _sieve_pass_batch(omegas, spec)
    p = float(np.mean(~passed))
    stderr = float(np.sqrt(p * (1.0 - p) / n_samples))
    return MeasureResult(resonant_fraction=p, stderr=stderr, n_samples=n_samples)


# ---------------------------------------------------------------------------
# rotation vectors

def extract_rotation_vector(traj: Trajectory) -> FrequencyVector:
    """Rotation vector from unwrapped angles: least-squares slope per
    angle, refined by a bump-weighted average of the residual derivative
    (weighted Birkhoff style), which suppresses the O(1/T) boundary bias
    of the plain fit on quasi-periodic signals."""
    n = traj.n_recorded
    if n < MIN_ROTATION_SAMPLES:
        raise TooShortError(f"need >= {MIN_ROTATION_SAMPLES} recorded points, got {n}")
    t = traj.times
    k = traj.I.shape[1]
    design = np.column_stack([t, np.ones_like(t)])
    s = np.arange(1, n - 1) / (n - 1)
    w = np.exp(-1.0 / (s * (1.0 - s)))
    w_total = w.sum()
    omega = np.empty(k)
    for i in range(k):
        y = traj.phi_unwrapped[:, i]
        (slope, intercept), *_ = np.linalg.lstsq(design, y, rcond=None)
        r = y - (slope * t + intercept)
        dr = (r[2:] - r[:-2]) / (t[2:] - t[:-2])
        omega[i] = slope + float((w * dr).sum() / w_total)
    return omega


# ---------------------------------------------------------------------------
# persistence experiment

def drift_threshold(eps: float) -> float:
    """Persistence cutoff 5*sqrt(eps): resonance widths scale like
    sqrt(eps), so surviving tori sit an order of magnitude below."""
    return 5.0 * np.sqrt(eps)


def persistence_experiment(model: ModelSpec, I_grid: Sequence[Sequence[float]],
                           z: Sequence[float], phi0: Sequence[float],
                           eps_list: Sequence[float], cfg: IntegratorConfig,
                           spec: DiophantineSpec) -> list[PersistenceReport]:
    """Integrate each (I0, eps) job, measure the sup action drift, extract
    the rotation vector, and sieve the unperturbed frequency.

    Classification: escaped when the orbit left the action box; resonant
    when the unperturbed frequency fails the sieve at low lattice order
    (sum|a| <= 10) or the drift exceeds 5*sqrt(eps); persistent otherwise.
    Jobs run in input order (I0 outer, eps inner) and integrator failures
    are recorded on the report, not raised.
    """
    chart = model.chart
    I_grid = [np.asarray(I0, dtype=float) for I0 in I_grid]
    z = np.asarray(z, dtype=float)
    center = np.mean(np.stack(I_grid), axis=0)
    rank = nondegeneracy_rank(model, center, z)
    if not rank.nondegenerate:
        log.warning("frequency map degenerate at grid center (rank %d < %d)",
                    rank.rank, chart.k)

    low_spec = replace(spec, a_max=min(LOW_ORDER_CUTOFF, spec.a_max))
    reports: list[PersistenceReport] = []
    for I0 in I_grid:
        omega0 = frequency_map_at(model, I0, z)
        sieve = diophantine_test(omega0, spec)
        low_sieve = diophantine_test(omega0, low_spec)
        for eps in eps_list:
            job = replace(model, eps=float(eps))
            error: str | None = None
            try:
                traj = integrate_perturbed(job, State(I=I0, z=z, phi=phi0), cfg)
            except (NonFiniteStateError, FixedPointDivergenceError) as err:
                traj = err.partial
                error = f"{type(err).__name__}:{err.step}"
            drift = float(np.max(np.abs(traj.I - I0))) if traj.n_recorded else float("nan")
            omega_hat: np.ndarray | None
            try:
                omega_hat = extract_rotation_vector(traj)
            except TooShortError:
                omega_hat = None
            if traj.left_domain:
                classification = "escaped"
            elif not low_sieve.passed:
                classification = "resonant"
            elif drift <= drift_threshold(eps):
                classification = "persistent"
            else:
                classification = "resonant"
            reports.append(PersistenceReport(
                I0=I0.copy(), eps=float(eps), action_drift=drift,
                omega0=omega0.copy(), omega_hat=omega_hat, sieve=sieve,
                classification=classification, error=error))
    return reports


def write_persistence_csv(reports: Sequence[PersistenceReport], fh) -> None:
    if not reports:
        return
    k = len(reports[0].I0)
    header = ([f"I0_{i+1}" for i in range(k)] + ["eps", "action_drift"]
              + [f"omega_hat_{i+1}" for i in range(k)]
              + ["sieve_passed", "worst_a", "classification"])
    fh.write(",".join(header) + "\n")
    for r in reports:
        row = [f"{v:.17g}" for v in r.I0]
        row += [f"{r.eps:.17g}", f"{r.action_drift:.17g}"]
        if r.omega_hat is None:
            row += ["nan"] * k
        else:
            row += [f"{v:.17g}" for v in r.omega_hat]
        row += ["true" if r.sieve.passed else "false",
                ";".join(str(int(a)) for a in r.sieve.worst_a),
                r.classification]
        fh.write(",".join(row) + "\n")
