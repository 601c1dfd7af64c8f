"""Toroidal charts, the rank-2k Poisson bivector and the symplectic form.

A chart V x W x T^k carries coordinates (I1..Ik, z1..zm, phi1..phik).  Two
bracket-generating structures live on it: the canonical Poisson bivector
pairing each action with its angle (z coordinates are Casimirs), and a
symplectic 2-form with user-supplied z-block and I-z coupling coefficients.
Hamiltonian vector fields are derived under both so their disagreement on
the z components can be exhibited pointwise.

Matrix conventions: coordinate ordering is (I1..Ik, z1..zm, phi1..phik)
everywhere a matrix appears, and the z-block of the assembled form is
2*omega_AB because the coefficient sum runs over all ordered index pairs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import expr as ex
from .expr import Expr, simplify_fold

if TYPE_CHECKING:
    from .dynamics import State

__all__ = [
    "ChartSpec", "SymplecticCoeffs", "VectorFieldSpec", "SingularFormError",
    "poisson_bracket", "hamiltonian_vf_poisson", "assemble_omega_matrix",
    "hamiltonian_vf_symplectic_at", "involution_check", "jacobi_check",
    "validate_symplectic_coeffs", "random_poly_trig",
    "InvolutionReport", "JacobiReport", "CoeffReport",
]

TWO_PI = 2.0 * np.pi

SINGULARITY_TOL = 1e-12
INVOLUTION_TOL = 1e-10
JACOBI_TOL = 1e-8
ANTISYMMETRY_TOL = 1e-12


class SingularFormError(Exception):
    """Assembled 2-form matrix is numerically degenerate at a point."""

    def __init__(self, det: float):
        super().__init__(f"symplectic form degenerate: |det| = {abs(det):.3e}")
        self.det = det


@dataclass(frozen=True)
class ChartSpec:
    """Chart dimensions and coordinate boxes.

    k action/angle pairs with actions ranging over the box V (k closed
    intervals) and m transverse coordinates over the box W (m intervals);
    angles live on the k-torus.
    """

    k: int
    m: int
    action_box: tuple[tuple[float, float], ...]
    param_box: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("chart needs at least one action/angle pair")
        if self.m < 0:
            raise ValueError("number of z coordinates must be non-negative")
        object.__setattr__(self, "action_box",
                           tuple((float(a), float(b)) for a, b in self.action_box))
        object.__setattr__(self, "param_box",
                           tuple((float(a), float(b)) for a, b in self.param_box))
        if len(self.action_box) != self.k:
            raise ValueError(f"expected {self.k} action intervals")
        if len(self.param_box) != self.m:
            raise ValueError(f"expected {self.m} parameter intervals")
        for lo, hi in self.action_box + self.param_box:
            if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
                raise ValueError(f"bad interval [{lo}, {hi}]")

    @property
    def action_names(self) -> tuple[str, ...]:
        return tuple(f"I{i + 1}" for i in range(self.k))

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(f"z{a + 1}" for a in range(self.m))

    @property
    def angle_names(self) -> tuple[str, ...]:
        return tuple(f"phi{i + 1}" for i in range(self.k))

    @property
    def symbol_set(self) -> frozenset[str]:
        return frozenset(self.action_names + self.param_names + self.angle_names)

    @property
    def dim(self) -> int:
        """Total phase-space dimension 2k + m."""
        return 2 * self.k + self.m

    def contains_actions(self, I: Sequence[float]) -> bool:
        return all(lo <= v <= hi for v, (lo, hi) in zip(I, self.action_box))

    def contains(self, I: Sequence[float], z: Sequence[float]) -> bool:
        return self.contains_actions(I) and all(
            lo <= v <= hi for v, (lo, hi) in zip(z, self.param_box))

    def center(self) -> tuple[np.ndarray, np.ndarray]:
        """Midpoint of V x W."""
        I = np.array([0.5 * (lo + hi) for lo, hi in self.action_box])
        z = np.array([0.5 * (lo + hi) for lo, hi in self.param_box])
        return I, z

    def sample_binding(self, rng: np.random.Generator) -> dict[str, float]:
        """One uniform random point of V x W x T^k as a variable binding."""
        binding: dict[str, float] = {}
        for name, (lo, hi) in zip(self.action_names, self.action_box):
            binding[name] = rng.uniform(lo, hi)
        for name, (lo, hi) in zip(self.param_names, self.param_box):
            binding[name] = rng.uniform(lo, hi)
        for name in self.angle_names:
            binding[name] = rng.uniform(0.0, TWO_PI)
        return binding

    def binding_of(self, I: Sequence[float], z: Sequence[float],
                   phi: Sequence[float] | None = None) -> dict[str, float]:
        binding = {name: float(v) for name, v in zip(self.action_names, I)}
        binding.update({name: float(v) for name, v in zip(self.param_names, z)})
        if phi is not None:
            binding.update({name: float(v) for name, v in zip(self.angle_names, phi)})
        return binding


@dataclass(frozen=True)
class SymplecticCoeffs:
    """Coefficient functions of the 2-form dI_i^dphi^i
    + omega_AB dz^A^dz^B + omega_iA dI_i^dz^A, all over (I, z)."""

    omega_AB: tuple[tuple[Expr, ...], ...]  # m x m
    omega_iA: tuple[tuple[Expr, ...], ...]  # k x m


@dataclass(frozen=True)
class VectorFieldSpec:
    """Components of a first order dynamic equation on the chart."""

    dI: tuple[Expr, ...]
    dz: tuple[Expr, ...]
    dphi: tuple[Expr, ...]


@dataclass
class InvolutionReport:
    passed: bool
    max_abs: float
    worst_pair: tuple[int, int]
    pair_max: dict[str, float] = field(default_factory=dict)
    tolerance: float = INVOLUTION_TOL


@dataclass
class JacobiReport:
    passed: bool
    max_abs: float
    n_triples: int
    tolerance: float = JACOBI_TOL


@dataclass
class CoeffReport:
    passed: bool
    max_antisymmetry_defect: float
    min_abs_det: float


# ---------------------------------------------------------------------------
# brackets and vector fields

def poisson_bracket(f: Expr, g: Expr, chart: ChartSpec) -> Expr:
    """Canonical bracket sum_i (df/dphi_i dg/dI_i - df/dI_i dg/dphi_i).

    The sign is fixed so that {I_i, g} = -dg/dphi_i and {phi_i, g} =
    +dg/dI_i, making the induced flow of a Hamiltonian read off the
    governing first order equation directly.
    """
    total: Expr = ex.ZERO
    for iname, aname in zip(chart.action_names, chart.angle_names):
        term = ex.sub(ex.mul(ex.diff(f, aname), ex.diff(g, iname)),
                      ex.mul(ex.diff(f, iname), ex.diff(g, aname)))
        total = ex.add(total, term)
    return simplify_fold(total)


def hamiltonian_vf_poisson(Hp: Expr, chart: ChartSpec) -> VectorFieldSpec:
    """Hamiltonian vector field of Hp under the rank-2k bivector:
    dI_i = -dHp/dphi_i, dz_A = 0 exactly, dphi_i = +dHp/dI_i."""
    dI = tuple(simplify_fold(ex.neg(ex.diff(Hp, a))) for a in chart.angle_names)
    dz = tuple(ex.ZERO for _ in range(chart.m))
    dphi = tuple(ex.diff(Hp, i) for i in chart.action_names)
    return VectorFieldSpec(dI=dI, dz=dz, dphi=dphi)


def assemble_omega_matrix(sc: SymplecticCoeffs, chart: ChartSpec,
                          point: "State") -> np.ndarray:
    """Evaluate the 2-form as a (2k+m) x (2k+m) antisymmetric matrix at a
    point, ordering (I, z, phi).  Raises SingularFormError when the matrix
    fails invertibility at tolerance 1e-12 on |det|."""
    k, m = chart.k, chart.m
    n = chart.dim
    binding = chart.binding_of(point.I, point.z)
    M = np.zeros((n, n))
    for i in range(k):
        M[i, k + m + i] = 1.0
        M[k + m + i, i] = -1.0
    for A in range(m):
        for B in range(m):
            if A != B:
                M[k + A, k + B] = 2.0 * ex.evaluate(sc.omega_AB[A][B], binding)
    for i in range(k):
        for A in range(m):
            value = ex.evaluate(sc.omega_iA[i][A], binding)
            M[i, k + A] = value
            M[k + A, i] = -value
    det = np.linalg.det(M)
    if abs(det) < SINGULARITY_TOL:
        raise SingularFormError(det)
    return M


def hamiltonian_vf_symplectic_at(Hp: Expr, sc: SymplecticCoeffs,
                                 chart: ChartSpec, point: "State") -> np.ndarray:
    """Solve M xi = grad Hp at a point for the symplectic Hamiltonian
    vector field, ordered (I, z, phi).  With angle-dependent perturbations
    and nonzero z-block or I-z couplings the z components are generically
    nonzero, unlike the bivector field."""
    M = assemble_omega_matrix(sc, chart, point)
    binding = chart.binding_of(point.I, point.z, point.phi)
    names = chart.action_names + chart.param_names + chart.angle_names
    grad = np.array([ex.evaluate(ex.diff(Hp, name), binding) for name in names])
    return np.linalg.solve(M, grad)


# ---------------------------------------------------------------------------
# sampled structure checks

def involution_check(fs: Sequence[Expr], chart: ChartSpec,
                     n_samples: int = 200, seed: int = 0) -> InvolutionReport:
    """Evaluate all pairwise brackets at uniform random chart points and
    report the largest magnitude; passes at 1e-10."""
    rng = np.random.default_rng(seed)
    bindings = [chart.sample_binding(rng) for _ in range(n_samples)]
    max_abs = 0.0
    worst = (0, 0)
    pair_max: dict[str, float] = {}
    for i, j in itertools.combinations(range(len(fs)), 2):
        bracket = poisson_bracket(fs[i], fs[j], chart)
        this_max = max((abs(ex.evaluate(bracket, b)) for b in bindings), default=0.0)
        pair_max[f"{i},{j}"] = this_max
        if this_max > max_abs:
            max_abs, worst = this_max, (i, j)
    return InvolutionReport(passed=max_abs <= INVOLUTION_TOL,
                            max_abs=max_abs, worst_pair=worst, pair_max=pair_max)


def jacobi_check(chart: ChartSpec, n_samples: int = 100, seed: int = 0,
                 n_triples: int = 6) -> JacobiReport:
    """Evaluate the cyclic bracket sum {f,{g,h}} + {g,{h,f}} + {h,{f,g}}
    for random polynomial-trig triples at random points; the constant
    bivector satisfies it identically, so residuals are pure roundoff."""
    rng = np.random.default_rng(seed)
    max_abs = 0.0
    for _ in range(n_triples):
        f, g, h = (random_poly_trig(chart, rng) for _ in range(3))
        total = simplify_fold(
            ex.add(ex.add(poisson_bracket(f, poisson_bracket(g, h, chart), chart),
                          poisson_bracket(g, poisson_bracket(h, f, chart), chart)),
                   poisson_bracket(h, poisson_bracket(f, g, chart), chart)))
        for _ in range(n_samples):
            binding = chart.sample_binding(rng)
            max_abs = max(max_abs, abs(ex.evaluate(total, binding)))
    return JacobiReport(passed=max_abs <= JACOBI_TOL, max_abs=max_abs,
                        n_triples=n_triples)


def validate_symplectic_coeffs(sc: SymplecticCoeffs, chart: ChartSpec,
                               n_samples: int = 32, seed: int = 0) -> CoeffReport:
    """Sampled invariants of the coefficient matrices: antisymmetry of the
    z-block within 1e-12 and invertibility of the assembled form."""
    from .dynamics import State  # deferred; dynamics imports this module

    rng = np.random.default_rng(seed)
    defect = 0.0
    min_det = np.inf
    ok = True
    for _ in range(n_samples):
        binding = chart.sample_binding(rng)
        for A in range(chart.m):
            for B in range(chart.m):
                d = abs(ex.evaluate(sc.omega_AB[A][B], binding)
                        + ex.evaluate(sc.omega_AB[B][A], binding))
                defect = max(defect, d)
        point = State(
            I=np.array([binding[n] for n in chart.action_names]),
            z=np.array([binding[n] for n in chart.param_names]),
            phi=np.array([binding[n] for n in chart.angle_names]))
        try:
            M = assemble_omega_matrix(sc, chart, point)
            min_det = min(min_det, abs(np.linalg.det(M)))
        except SingularFormError as err:
            min_det = min(min_det, abs(err.det))
            ok = False
    if defect > ANTISYMMETRY_TOL:
        ok = False
    return CoeffReport(passed=ok, max_antisymmetry_defect=defect,
                       min_abs_det=float(min_det) if np.isfinite(min_det) else 0.0)


# ---------------------------------------------------------------------------
# random observables for sampled checks

def random_poly_trig(chart: ChartSpec, rng: np.random.Generator,
                     max_terms: int = 3) -> Expr:
    """Random low-degree polynomial-trigonometric observable on the chart:
    sums of c * I^p * z^q monomials and c * (I or z or 1) * trig(integer
    angle combination) terms with O(1) coefficients."""
    n_terms = int(rng.integers(1, max_terms + 1))
    total: Expr = ex.ZERO
    for _ in range(n_terms):
        coeff = ex.const(round(float(rng.uniform(-2.0, 2.0)), 3))
        if rng.random() < 0.5:
            term: Expr = coeff
            name = chart.action_names[rng.integers(0, chart.k)]
            term = ex.mul(term, ex.pow_(ex.var(name), int(rng.integers(1, 3))))
            if chart.m and rng.random() < 0.5:
                zname = chart.param_names[rng.integers(0, chart.m)]
                term = ex.mul(term, ex.var(zname))
        else:
            coeffs = rng.integers(-2, 3, size=chart.k)
            if not coeffs.any():
                coeffs[int(rng.integers(0, chart.k))] = 1
            angle: Expr = ex.ZERO
            for c, name in zip(coeffs, chart.angle_names):
                if c:
                    angle = ex.add(angle, ex.mul(ex.const(float(c)), ex.var(name)))
            trig = ex.sin if rng.random() < 0.5 else ex.cos
            term = ex.mul(coeff, trig(angle))
            if rng.random() < 0.4:
                pool = chart.action_names + chart.param_names
                term = ex.mul(term, ex.var(pool[rng.integers(0, len(pool))]))
        total = ex.add(total, term)
    return simplify_fold(total)
