import logging
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from algebroid import AlgebroidError, AlgebroidModel, lie_algebra_model, structure_constants
from exprlang import ScalarField, variable_family
from optctl import ControlProblem, TrajectoryRecord, critical_trajectory

logger = logging.getLogger(__name__)

CLOSURE_TOLERANCE = 1e-12
BASIS_TOLERANCE = 1e-10
TAYLOR_ORDER = 18


class BasisExtractionError(ValueError):
    pass


def _unit(d: int, i: int, j: int) -> np.ndarray:
    E = np.zeros((d, d))
    E[i, j] = 1.0
    return E


@dataclass(frozen=True, eq=False)
class MatrixGroupContext:
    """
    A matrix Lie group through its algebra basis {E_alpha} (d x d matrices) and the
    structure constants C[gamma, alpha, beta] with [E_a, E_b] = C^g_ab E_g.
    """
    name: str
    basis: np.ndarray
    structure: np.ndarray

    def __post_init__(self) -> None:
        basis = np.asarray(self.basis, dtype=float)
        C = np.asarray(self.structure, dtype=float)
        if basis.ndim != 3 or basis.shape[1] != basis.shape[2]:
            raise ValueError(f'basis must be an r x d x d array, got shape {basis.shape}')
        if C.shape != (basis.shape[0],) * 3:
            raise ValueError(f'structure constants of shape {C.shape} do not match {basis.shape[0]} basis matrices')
        object.__setattr__(self, 'basis', basis)
        object.__setattr__(self, 'structure', C)
        error = self.closure_error()
        if error >= CLOSURE_TOLERANCE:
            raise ValueError(f'{self.name}: basis commutators differ from the structure constants by {error:.3e}')

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @property
    def rank(self) -> int:
        return self.basis.shape[0]

    def closure_error(self) -> float:
        error = 0.0
        for a in range(self.rank):
            for b in range(self.rank):
                commutator = self.basis[a] @ self.basis[b] - self.basis[b] @ self.basis[a]
                expected = np.einsum('g,gij->ij', self.structure[:, a, b], self.basis)
                error = max(error, float(np.max(np.abs(commutator - expected))))
        return error

    def algebra_element(self, coefficients: Sequence[float]) -> np.ndarray:
        return np.einsum('a,aij->ij', np.asarray(coefficients, dtype=float), self.basis)

    def coefficients(self, matrix: np.ndarray) -> np.ndarray:
        """
        Coordinates of an algebra matrix in the basis, by least squares; the
        reconstruction residual must stay below 1e-10 (relative to the entries).
        """
        design = self.basis.reshape(self.rank, -1).T
        target = np.asarray(matrix, dtype=float).reshape(-1)
        coeffs = np.linalg.lstsq(design, target, rcond=None)[0]
        residual = float(np.max(np.abs(design @ coeffs - target)))
        if residual > BASIS_TOLERANCE * max(1.0, float(np.max(np.abs(target)))):
            raise BasisExtractionError(f'matrix is not in the span of the {self.name} basis (residual {residual:.3e})')
        return coeffs

    def sample_element(self, rng: np.random.Generator, spread: float = 1.0) -> np.ndarray:
        return matrix_exp(self.algebra_element(rng.uniform(-spread, spread, self.rank)))


def _so3_basis() -> list:
    L1 = np.array([[0., 0., 0.], [0., 0., -1.], [0., 1., 0.]])
    L2 = np.array([[0., 0., 1.], [0., 0., 0.], [-1., 0., 0.]])
    L3 = np.array([[0., -1., 0.], [1., 0., 0.], [0., 0., 0.]])
    return [L1, L2, L3]


def _heisenberg3_basis() -> list:
    return [_unit(3, 0, 1), _unit(3, 1, 2), _unit(3, 0, 2)]


def _se2_basis() -> list:
    J = np.array([[0., -1., 0.], [1., 0., 0.], [0., 0., 0.]])
    return [J, _unit(3, 0, 2), _unit(3, 1, 2)]


_BASES = {'so3': _so3_basis, 'heisenberg3': _heisenberg3_basis, 'se2': _se2_basis}


def matrix_group(name: str, dim: int | None = None) -> MatrixGroupContext:
    """
    Matrix realization of a catalog algebra: so3 (rotation generators), heisenberg3
    (strictly upper-triangular 3x3), se2 (rigid motions in homogeneous coordinates),
    abelian<r> (diagonal r x r).
    """
    C, _ = structure_constants(name, dim)
    if name in _BASES:
        basis = _BASES[name]()
    elif re.fullmatch(r'abelian_?\d*', name):
        basis = [_unit(C.shape[0], a, a) for a in range(C.shape[0])]
    else:
        raise AlgebroidError(f"no matrix group is registered for '{name}'")
    return MatrixGroupContext(name, np.array(basis), C)


def matrix_exp(A: np.ndarray) -> np.ndarray:
    """
    Matrix exponential by scaling and squaring around a degree-18 Taylor kernel.

    Args:
        A (np.ndarray): Square matrix with finite entries.

    Returns:
        np.ndarray: exp(A).

    Raises:
        OverflowError: If the result is not representable.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f'matrix_exp needs a square matrix, got shape {A.shape}')
    if not np.all(np.isfinite(A)):
        raise ValueError('matrix_exp needs finite entries')
    identity = np.eye(A.shape[0])
    norm = float(np.linalg.norm(A, 1)) if A.size else 0.0
    squarings = max(0, math.ceil(math.log2(norm)) + 1) if norm > 0.0 else 0
    scaled = np.ldexp(A, -squarings)
    result = identity.copy()
    for k in range(TAYLOR_ORDER, 0, -1):
        result = identity + scaled @ result / k
    with np.errstate(over='ignore', invalid='ignore'):
        for _ in range(squarings):
            result = result @ result
    if not np.all(np.isfinite(result)):
        raise OverflowError(f'matrix exponential overflows (1-norm of the argument {norm:.3g})')
    return result


def coadjoint_point(ctx: MatrixGroupContext, g: np.ndarray, xi: Sequence[float]) -> np.ndarray:
    """
    Ad*_g xi, defined by <Ad*_g xi, E_b> = <xi, Ad_{g^-1} E_b> with Ad_g X = g X g^-1.

    Args:
        ctx (MatrixGroupContext): Group realization.
        g (np.ndarray): Invertible d x d group element.
        xi (Sequence[float]): Covector in the dual basis.

    Returns:
        np.ndarray: lambda with lambda_b = <xi, coefficients of g^-1 E_b g>.
    """
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (ctx.rank,):
        raise ValueError(f'xi has length {xi.size}, expected {ctx.rank}')
    g_inv = np.linalg.inv(g)
    columns = np.column_stack([ctx.coefficients(g_inv @ E @ g) for E in ctx.basis])
    return xi @ columns


@dataclass
class CoadjointOrbitSample:
    """
    Points Ad*_g xi of the coadjoint orbit through xi with their group elements.
    """
    xi: np.ndarray
    points: np.ndarray
    elements: np.ndarray
    group: str = ''

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.points, axis=1)

    def pairing_residual(self, ctx: MatrixGroupContext) -> float:
        """
        max |<lambda, E_b> - <xi, Ad_{g^-1} E_b>| over the recorded pairs, with the
        right side read off with the pseudo-inverse of the basis.
        """
        dual = np.linalg.pinv(ctx.basis.reshape(ctx.rank, -1).T)
        worst = 0.0
        for lam, g in zip(self.points, self.elements):
            g_inv = np.linalg.inv(g)
            for b, E in enumerate(ctx.basis):
                expected = float(self.xi @ (dual @ (g_inv @ E @ g).reshape(-1)))
                worst = max(worst, abs(lam[b] - expected))
        return worst


def sample_orbit(ctx: MatrixGroupContext, xi: Sequence[float], samples: int, seed: int = 0,
                 spread: float = 1.0) -> CoadjointOrbitSample:
    """
    Sample the coadjoint orbit through xi with group elements exp(sum c_a E_a),
    c uniform in [-spread, spread].
    """
    if samples < 1:
        raise ValueError(f'samples must be at least 1, got {samples}')
    rng = np.random.default_rng(seed)
    xi = np.asarray(xi, dtype=float)
    elements = np.array([ctx.sample_element(rng, spread) for _ in range(samples)])
    points = np.array([coadjoint_point(ctx, g, xi) for g in elements])
    logger.info('sampled %d points of the %s coadjoint orbit through %s', samples, ctx.name, xi.tolist())
    return CoadjointOrbitSample(xi, points, elements, ctx.name)


def control_matrix(V_map: np.ndarray, u: Sequence[float]) -> np.ndarray:
    """
    V(u) = sum_a u_a V_a for a linear control map given as an m x d x d array.
    """
    return np.einsum('a,aij->ij', np.asarray(u, dtype=float), V_map)


def invariant_field(V_map: np.ndarray) -> Callable:
    """
    The right-invariant field F(h, u) = V(u) h.
    """
    return lambda h, u: control_matrix(V_map, u) @ h


def broken_field(V_map: np.ndarray) -> Callable:
    """
    F(h, u) = V(u) h + h V(u), which is not right-invariant unless V(u) commutes
    with every group element.
    """
    def field_(h, u):
        V = control_matrix(V_map, u)
        return V @ h + h @ V
    return field_


def verify_right_invariance(ctx: MatrixGroupContext, V_map: np.ndarray, samples: int, seed: int = 0,
                            field_: Callable | None = None, spread: float = 1.0,
                            control_spread: float = 1.0) -> float:
    """
    Largest |F(h, u) g - F(h g, u)| over sampled g, h and u; zero up to rounding for a
    right-invariant field.

    Args:
        ctx (MatrixGroupContext): Group realization.
        V_map (np.ndarray): Linear control map as m x d x d matrices.
        samples (int): Number of (g, h, u) triples.
        seed (int): RNG seed.
        field_ (Callable, optional): F(h, u); the invariant construction by default.
        spread (float): Coefficient range for group samples.
        control_spread (float): Range for u; 0 checks the zero control.

    Returns:
        float: Max residual.
    """
    if samples < 1:
        raise ValueError(f'samples must be at least 1, got {samples}')
    V_map = np.asarray(V_map, dtype=float)
    F = field_ or invariant_field(V_map)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        g = ctx.sample_element(rng, spread)
        h = ctx.sample_element(rng, spread)
        u = rng.uniform(-control_spread, control_spread, V_map.shape[0])
        worst = max(worst, float(np.max(np.abs(F(h, u) @ g - F(h @ g, u)))))
    return worst


@dataclass
class ControlSection:
    """
    Reduced control system on the trivial algebroid TM + (M x g): the base part is
    zero and the fiber part is u -> u @ coefficients, row a holding the basis
    coordinates of V_a.
    """
    ctx: MatrixGroupContext
    coefficients: np.ndarray
    base_dim: int = 0

    @property
    def control_dim(self) -> int:
        return self.coefficients.shape[0]

    def fiber(self, u: Sequence[float]) -> np.ndarray:
        return np.asarray(u, dtype=float) @ self.coefficients

    def fields(self) -> tuple:
        """
        Components f^alpha(u) as fields, ready for a ControlProblem on the trivial
        algebroid over a base of dimension base_dim.
        """
        components = [ScalarField.constant(0.0) for _ in range(self.base_dim)]
        for g in range(self.ctx.rank):
            terms = [float(self.coefficients[a, g]) * ScalarField.variable(f'u{a + 1}')
                     for a in range(self.control_dim) if self.coefficients[a, g] != 0.0]
            total = terms[0] if terms else ScalarField.constant(0.0)
            for term in terms[1:]:
                total = total + term
            components.append(total)
        return tuple(components)

    def lift(self) -> np.ndarray:
        """
        Linear control map V_a = sum_g coefficients[a, g] E_g of the right-invariant
        field F(h, u) = V(u) h that this section reduces.
        """
        return np.einsum('ag,gij->aij', self.coefficients, self.ctx.basis)


def reduce_system(ctx: MatrixGroupContext, V_map: np.ndarray, base_dim: int = 0) -> ControlSection:
    """
    Reduce the right-invariant field F(h, u) = V(u) h to its values at the identity,
    f(u) = F(1, u), expressed in the algebra basis.
    """
    V_map = np.asarray(V_map, dtype=float)
    if V_map.ndim != 3 or V_map.shape[1:] != (ctx.dim, ctx.dim):
        raise ValueError(f'control map must be an m x {ctx.dim} x {ctx.dim} array, got shape {V_map.shape}')
    identity = np.eye(ctx.dim)
    rows = [ctx.coefficients(control_matrix(V_map, e) @ identity) for e in np.eye(V_map.shape[0])]
    return ControlSection(ctx, np.array(rows).reshape(V_map.shape[0], ctx.rank), base_dim)


@dataclass
class EquivalenceReport:
    """
    Outcome of integrating the same x-independent problem on the trivial algebroid
    and on the algebra alone.
    """
    discrepancy: float
    base_velocity_residual: float
    full: TrajectoryRecord
    reduced: TrajectoryRecord
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            'discrepancy': self.discrepancy,
            'base_velocity_residual': self.base_velocity_residual,
            'full': self.full.summary(),
            'reduced': self.reduced.summary(),
            **self.metadata,
        }


def _reduced_model(model: AlgebroidModel) -> AlgebroidModel:
    n = model.base_dim
    C = model.eval_structure(np.zeros(n))[n:, n:, n:]
    name = model.metadata.get('algebra', 'custom')
    try:
        _, casimirs = structure_constants(name, C.shape[0])
        sources = casimirs(0)
    except AlgebroidError:
        sources = ()
    return lie_algebra_model(np.array(C), sources, name)


def full_vs_reduced(problem: ControlProblem, steps: int, method: str = 'rk4') -> EquivalenceReport:
    """
    Integrate the critical-trajectory system of an x-independent problem on the
    trivial algebroid TM + (M x g) and on g alone, with the same scheme and steps.

    The base components of f must be constants, so both systems share u*. The
    discrepancy is the max over samples of |eta_full[g part] - eta_reduced|; the base
    velocity residual compares x(t) with the integral of rho dH/deta along the
    recorded samples.
    """
    model = problem.model
    n = model.base_dim
    if not model.is_constant or model.metadata.get('algebra_offset') != n:
        raise ValueError(f'full_vs_reduced needs a trivial algebroid over the base, got the {model.describe()}')
    for expr in problem.f + (problem.L,):
        if any(variable_family(name) == 'x' for name in expr.variables):
            raise ValueError(f'{expr.source} depends on x; the Hamiltonian must be x-independent')
    for expr in problem.f[:n]:
        if expr.variables:
            raise ValueError(f'base component {expr.source} of f must be constant')
    if problem.eta0 is None:
        raise ValueError('full_vs_reduced needs an initial costate eta0')

    reduced_problem = ControlProblem(_reduced_model(model), problem.control_dim, problem.f[n:], problem.L,
                                     problem.horizon, np.zeros(0), problem.eta0[n:])
    full = critical_trajectory(problem, steps, method)
    reduced = critical_trajectory(reduced_problem, steps, method)
    discrepancy = float(np.max(np.abs(full.eta[:, n:] - reduced.eta))) if reduced.eta.size else 0.0

    rho = model.eval_anchor(np.zeros(n))
    velocity = rho[:, :n] @ np.array([f({}) for f in problem.f[:n]]) if n else np.zeros(0)
    expected = problem.x0 + np.outer(full.times - full.times[0], velocity)
    base_residual = float(np.max(np.abs(full.x - expected))) if n else 0.0
    logger.info('full vs reduced: eta discrepancy %.3e, base velocity residual %.3e', discrepancy, base_residual)
    return EquivalenceReport(discrepancy, base_residual, full, reduced,
                             {'algebra': reduced_problem.model.metadata.get('algebra'), 'steps': steps,
                              'method': method})
