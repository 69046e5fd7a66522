from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from algebroid import AlgebroidModel
from exprlang import ScalarField, coordinate_names, make_binding


class VariableMismatchError(ValueError):
    pass


class BasePointMismatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PhasePoint:
    """
    A point (x, eta) of the dual bundle: base coordinates x1..xn and fiber
    coordinates eta1..etar.
    """
    x: np.ndarray
    eta: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, 'x', np.asarray(self.x, dtype=float).reshape(-1))
        object.__setattr__(self, 'eta', np.asarray(self.eta, dtype=float).reshape(-1))

    @classmethod
    def on(cls, model: AlgebroidModel, x: Sequence[float], eta: Sequence[float]) -> 'PhasePoint':
        point = cls(x, eta)
        check_point(model, point)
        return point

    def binding(self, extra: Mapping | None = None) -> dict:
        env = make_binding(x=self.x, eta=self.eta)
        if extra:
            env.update(extra)
        return env

    def same_as(self, other: 'PhasePoint') -> bool:
        return np.array_equal(self.x, other.x) and np.array_equal(self.eta, other.eta)


@dataclass(frozen=True, eq=False)
class ProlongationVector:
    """
    Element of the prolongation at a phase point, in the basis {X_alpha, V_alpha}:
    z are the X coefficients, v the V coefficients. The induced base velocity is
    rho(x) z.
    """
    point: PhasePoint
    z: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, 'z', np.asarray(self.z, dtype=float).reshape(-1))
        object.__setattr__(self, 'v', np.asarray(self.v, dtype=float).reshape(-1))


def check_point(model: AlgebroidModel, p: PhasePoint) -> None:
    if p.x.shape[0] != model.base_dim or p.eta.shape[0] != model.rank:
        raise ValueError(f'phase point has (n, r) = ({p.x.shape[0]}, {p.eta.shape[0]}), '
                         f'model has ({model.base_dim}, {model.rank})')


def _check_vector(model: AlgebroidModel, Z: ProlongationVector) -> None:
    check_point(model, Z.point)
    if Z.z.shape[0] != model.rank or Z.v.shape[0] != model.rank:
        raise ValueError(f'prolongation coefficients must have length {model.rank}')


def _check_variables(model: AlgebroidModel, F: ScalarField, extra: Mapping | None) -> None:
    allowed = set(model.x_names) | set(model.eta_names) | set(extra or ())
    stray = set(F.variables) - allowed
    if stray:
        raise VariableMismatchError(f'{F.source} references {sorted(stray)}, which are not coordinates '
                                    f'of the {model.describe()}')


def phase_gradient(model: AlgebroidModel, F: ScalarField, p: PhasePoint, extra: Mapping | None = None) -> tuple:
    """
    Gradient of F at p, split into (dF/dx, dF/deta).
    """
    check_point(model, p)
    _check_variables(model, F, extra)
    grad = F.gradient(model.x_names + model.eta_names, p.binding(extra))
    return grad[:model.base_dim], grad[model.base_dim:]


def bracket_from_gradients(rho: np.ndarray, C: np.ndarray, eta: np.ndarray, dF: tuple, dG: tuple) -> float:
    """
    Linear Poisson bivector applied to two differentials:
    rho^i_a (dF/dx^i dG/deta_a - dG/dx^i dF/deta_a) - C^g_ab eta_g dF/deta_a dG/deta_b.
    """
    dFx, dFeta = dF
    dGx, dGeta = dG
    anchor_term = dFx @ rho @ dGeta - dGx @ rho @ dFeta
    structure_term = np.einsum('gab,g,a,b->', C, eta, dFeta, dGeta)
    return float(anchor_term - structure_term)


def poisson_bracket(model: AlgebroidModel, F: ScalarField, G: ScalarField, p: PhasePoint,
                    extra: Mapping | None = None) -> float:
    """
    Linear Poisson bracket {F, G} on the dual bundle at p.

    Args:
        model (AlgebroidModel): Algebroid supplying rho and C.
        F (ScalarField): Function of (x, eta).
        G (ScalarField): Function of (x, eta).
        p (PhasePoint): Evaluation point.
        extra (Mapping, optional): Additional bindings (frozen controls, time).

    Returns:
        float: The bracket value.
    """
    dF = phase_gradient(model, F, p, extra)
    dG = phase_gradient(model, G, p, extra)
    return bracket_from_gradients(model.eval_anchor(p.x), model.eval_structure(p.x), p.eta, dF, dG)


def kirillov_kostant(algebra: np.ndarray, f: ScalarField, h: ScalarField, lam: Sequence[float]) -> float:
    """
    Kirillov-Kostant bracket on the dual of a Lie algebra, as the pairing of lam with
    the Lie bracket of the gradients, with the sign of the linear Poisson bivector:
    {f, h}(lam) = -<lam, [grad f, grad h]>.
    """
    lam = np.asarray(lam, dtype=float)
    r = algebra.shape[0]
    names = coordinate_names('eta', r)
    for field_ in (f, h):
        stray = set(field_.variables) - set(names)
        if stray:
            raise VariableMismatchError(f'{field_.source} references {sorted(stray)}; only eta variables are allowed')
    env = make_binding(eta=lam)
    X = f.gradient(names, env)
    Y = h.gradient(names, env)
    bracket = [sum(algebra[g, a, b] * X[a] * Y[b] for a in range(r) for b in range(r)) for g in range(r)]
    return -sum(lam[g] * bracket[g] for g in range(r))


def field_from_gradients(rho: np.ndarray, C: np.ndarray, eta: np.ndarray, dHx: np.ndarray,
                         dHeta: np.ndarray) -> tuple:
    xdot = rho @ dHeta
    etadot = -(rho.T @ dHx + np.einsum('gab,g,b->a', C, eta, dHeta))
    return xdot, etadot


def hamiltonian_vector_field(model: AlgebroidModel, H: ScalarField, p: PhasePoint,
                             extra: Mapping | None = None) -> tuple:
    """
    Hamiltonian vector field of H for the linear Poisson structure:
    xdot^i = rho^i_a dH/deta_a, etadot_a = -(rho^i_a dH/dx^i + C^g_ab eta_g dH/deta_b).

    Returns:
        tuple: (xdot of length n, etadot of length r).
    """
    dHx, dHeta = phase_gradient(model, H, p, extra)
    return field_from_gradients(model.eval_anchor(p.x), model.eval_structure(p.x), p.eta, dHx, dHeta)


def canonical_one_form(model: AlgebroidModel, Z: ProlongationVector) -> float:
    _check_vector(model, Z)
    return float(Z.point.eta @ Z.z)


def symplectic_pairing(model: AlgebroidModel, Z1: ProlongationVector, Z2: ProlongationVector) -> float:
    """
    omega(Z1, Z2) = z1.v2 - z2.v1 + C^g_ab eta_g z1^a z2^b.
    """
    _check_vector(model, Z1)
    _check_vector(model, Z2)
    if not Z1.point.same_as(Z2.point):
        raise BasePointMismatchError('prolongation vectors live at different phase points')
    C = model.eval_structure(Z1.point.x)
    canonical = Z1.z @ Z2.v - Z2.z @ Z1.v
    return float(canonical + np.einsum('gab,g,a,b->', C, Z1.point.eta, Z1.z, Z2.z))


def hamiltonian_section(model: AlgebroidModel, H: ScalarField, p: PhasePoint,
                        extra: Mapping | None = None) -> ProlongationVector:
    """
    Section f_H solving i_{f_H} omega = dH: z = dH/deta, v = etadot of the
    Hamiltonian vector field.
    """
    dHx, dHeta = phase_gradient(model, H, p, extra)
    _, etadot = field_from_gradients(model.eval_anchor(p.x), model.eval_structure(p.x), p.eta, dHx, dHeta)
    return ProlongationVector(p, dHeta, etadot)


def differential(model: AlgebroidModel, H: ScalarField, Z: ProlongationVector,
                 extra: Mapping | None = None) -> float:
    """
    dH(Z) = rho^i_a dH/dx^i z^a + dH/deta_a v^a.
    """
    _check_vector(model, Z)
    dHx, dHeta = phase_gradient(model, H, Z.point, extra)
    rho = model.eval_anchor(Z.point.x)
    return float((rho.T @ dHx) @ Z.z + dHeta @ Z.v)


def verify_hamiltonian_section(model: AlgebroidModel, H: ScalarField, p: PhasePoint,
                               probes: Sequence[ProlongationVector], extra: Mapping | None = None) -> float:
    """
    Largest |omega(f_H, Z) - dH(Z)| over the probe vectors.
    """
    f_H = hamiltonian_section(model, H, p, extra)
    residual = 0.0
    for Z in probes:
        residual = max(residual, abs(symplectic_pairing(model, f_H, Z) - differential(model, H, Z, extra)))
    return residual


def prolongation_anchor(model: AlgebroidModel, Z: ProlongationVector) -> tuple:
    """
    Tangent vector rho'(Z) on the dual bundle: (rho(x) z, v).
    """
    _check_vector(model, Z)
    return model.eval_anchor(Z.point.x) @ Z.z, Z.v.copy()


def linear_function(model: AlgebroidModel, coefficients: Sequence) -> ScalarField:
    """
    Fiber-linear function X^(x, eta) = sum_a X^a(x) eta_a of a section with the given
    coefficient expressions.
    """
    if len(coefficients) != model.rank:
        raise ValueError(f'a section has {model.rank} coefficients, got {len(coefficients)}')
    total = ScalarField.constant(0.0)
    for coefficient, name in zip(coefficients, model.eta_names):
        total = total + ScalarField.coerce(coefficient) * ScalarField.variable(name)
    return total


def section_bracket(model: AlgebroidModel, X: Sequence, Y: Sequence, x: Sequence[float]) -> np.ndarray:
    """
    Algebroid bracket of two sections at x:
    [X, Y]^g = C^g_ab X^a Y^b + rho(X)(Y^g) - rho(Y)(X^g).
    """
    X = [ScalarField.coerce(c) for c in X]
    Y = [ScalarField.coerce(c) for c in Y]
    x = np.asarray(x, dtype=float)
    env = make_binding(x=x)
    rho = model.eval_anchor(x)
    C = model.eval_structure(x)
    Xv = np.array([c(env) for c in X])
    Yv = np.array([c(env) for c in Y])
    dX = np.array([c.gradient(model.x_names, env) for c in X]).reshape(model.rank, model.base_dim)
    dY = np.array([c.gradient(model.x_names, env) for c in Y]).reshape(model.rank, model.base_dim)
    return np.einsum('gab,a,b->g', C, Xv, Yv) + dY @ (rho @ Xv) - dX @ (rho @ Yv)
