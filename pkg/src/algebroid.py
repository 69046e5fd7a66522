import logging
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

from exprlang import EvaluationError, ScalarField, coordinate_names, make_binding

logger = logging.getLogger(__name__)

KINDS = ('lie_algebra', 'tangent', 'trivial', 'coadjoint', 'custom')
CATALOG_TOLERANCE = 1e-10
FD_STEP = 1e-5
RANK_THRESHOLD = 1e-10


class AlgebroidError(ValueError):
    pass


@dataclass(frozen=True)
class AlgebroidModel:
    """
    A Lie algebroid in local coordinates.

    The anchor is an n x r array of expressions in x1..xn; the structure functions
    are kept only for alpha < beta, keyed by 0-based (gamma, alpha, beta), and
    antisymmetrized on read, so C[g, a, b] == -C[g, b, a] holds exactly.
    """
    base_dim: int
    rank: int
    anchor_fields: tuple
    structure_fields: Mapping
    labels: tuple = ()
    casimirs: tuple = ()
    kind: str = 'custom'
    metadata: Mapping = field(default_factory=dict)

    def __post_init__(self) -> None:
        n, r = self.base_dim, self.rank
        if n < 0 or r < 1:
            raise AlgebroidError(f'invalid dimensions: base_dim={n}, rank={r}')
        if len(self.anchor_fields) != n or any(len(row) != r for row in self.anchor_fields):
            raise AlgebroidError(f'anchor must be a {n}x{r} array of expressions')
        allowed = set(self.x_names)
        for row in self.anchor_fields:
            for expr in row:
                stray = set(expr.variables) - allowed
                if stray:
                    raise AlgebroidError(f'anchor entry {expr.source} references {sorted(stray)}')
        for (g, a, b), expr in self.structure_fields.items():
            if not (0 <= g < r and 0 <= a < b < r):
                raise AlgebroidError(f'structure index ({g + 1},{a + 1},{b + 1}) out of range for rank {r}')
            stray = set(expr.variables) - allowed
            if stray:
                raise AlgebroidError(f'structure entry {expr.source} references {sorted(stray)}')
        for casimir in self.casimirs:
            stray = set(casimir.variables) - set(self.eta_names)
            if stray:
                raise AlgebroidError(f'Casimir {casimir.source} references {sorted(stray)}')
        if not self.labels:
            object.__setattr__(self, 'labels', self.x_names + self.eta_names)

    @property
    def x_names(self) -> tuple:
        return coordinate_names('x', self.base_dim)

    @property
    def eta_names(self) -> tuple:
        return coordinate_names('eta', self.rank)

    @cached_property
    def is_constant(self) -> bool:
        exprs = [e for row in self.anchor_fields for e in row] + list(self.structure_fields.values())
        return all(not e.variables for e in exprs)

    @cached_property
    def _constant_arrays(self) -> tuple:
        anchor = self._build_anchor({})
        structure = self._build_structure({})
        anchor.setflags(write=False)
        structure.setflags(write=False)
        return anchor, structure

    def _check_point(self, x: Sequence[float]) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape[0] != self.base_dim:
            raise AlgebroidError(f'base point has length {x.shape[0]}, expected {self.base_dim}')
        return x

    def _build_anchor(self, env: Mapping) -> np.ndarray:
        rho = np.zeros((self.base_dim, self.rank))
        for i, row in enumerate(self.anchor_fields):
            for a, expr in enumerate(row):
                rho[i, a] = expr(env)
        return rho

    def _build_structure(self, env: Mapping) -> np.ndarray:
        C = np.zeros((self.rank, self.rank, self.rank))
        for (g, a, b), expr in self.structure_fields.items():
            value = expr(env)
            C[g, a, b] = value
            C[g, b, a] = -value
        return C

    def eval_anchor(self, x: Sequence[float]) -> np.ndarray:
        """
        Anchor matrix rho[i, alpha] at the base point x (n x r).
        """
        x = self._check_point(x)
        if self.is_constant:
            return self._constant_arrays[0]
        return self._build_anchor(make_binding(x=x))

    def eval_structure(self, x: Sequence[float]) -> np.ndarray:
        """
        Structure tensor C[gamma, alpha, beta] = C^gamma_{alpha beta} at x (r x r x r).
        """
        x = self._check_point(x)
        if self.is_constant:
            return self._constant_arrays[1]
        return self._build_structure(make_binding(x=x))

    def describe(self) -> str:
        return f'{self.kind} algebroid (base_dim={self.base_dim}, rank={self.rank})'


@dataclass
class AxiomReport:
    """
    Result of a numerical certification of the algebroid axioms.

    Residuals are maxima of absolute values over sample points and index
    combinations. `worst_jacobi` holds the 1-based (alpha, beta, gamma, nu) of the
    largest Jacobi residual.
    """
    antisymmetry: float
    anchor_compatibility: float
    jacobi: float
    samples: list
    tolerance: float
    worst_jacobi: tuple = ()
    worst_anchor: tuple = ()
    point_errors: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        residuals = (self.antisymmetry, self.anchor_compatibility, self.jacobi)
        return not self.point_errors and all(value < self.tolerance for value in residuals)

    def to_dict(self) -> dict:
        return {
            'passed': self.passed,
            'tolerance': self.tolerance,
            'antisymmetry_residual': self.antisymmetry,
            'anchor_compatibility_residual': self.anchor_compatibility,
            'jacobi_residual': self.jacobi,
            'worst_jacobi_index': list(self.worst_jacobi),
            'worst_anchor_index': list(self.worst_anchor),
            'samples': [list(map(float, s)) for s in self.samples],
            'point_errors': self.point_errors,
            'metadata': self.metadata,
        }


def _central_difference(fn, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """
    Derivatives of an array-valued function of x, stacked along a new leading axis.
    """
    sample = fn(x)
    out = np.zeros((x.shape[0],) + sample.shape)
    for j in range(x.shape[0]):
        dx = np.zeros_like(x)
        dx[j] = step
        out[j] = (fn(x + dx) - fn(x - dx)) / (2 * step)
    return out


def _residuals_at(model: AlgebroidModel, x: np.ndarray) -> tuple:
    rho = np.array(model.eval_anchor(x))
    C = np.array(model.eval_structure(x))
    antisymmetry = np.max(np.abs(C + np.transpose(C, (0, 2, 1)))) if C.size else 0.0

    # anchor compatibility: rho^j_a d_j rho^i_b - rho^j_b d_j rho^i_a - rho^i_g C^g_ab
    d_rho = _central_difference(model.eval_anchor, x)  # [j, i, a]
    anchor = (np.einsum('ja,jib->iab', rho, d_rho) - np.einsum('jb,jia->iab', rho, d_rho)
              - np.einsum('ig,gab->iab', rho, C))

    # Jacobi: cyclic sum of rho^i_a d_i C^n_bc + C^n_am C^m_bc
    d_C = _central_difference(model.eval_structure, x)  # [i, n, b, c]
    term = np.einsum('ia,inbc->nabc', rho, d_C) + np.einsum('nam,mbc->nabc', C, C)
    jacobi = term + np.einsum('nbca->nabc', term) + np.einsum('ncab->nabc', term)
    return antisymmetry, anchor, jacobi


def certify(model: AlgebroidModel, samples: Sequence, tolerance: float = 1e-8) -> AxiomReport:
    """
    Check the algebroid axioms at sample points: antisymmetry of C, compatibility of
    the anchor with the bracket and the Jacobi identity (including the anchor term).

    Args:
        model (AlgebroidModel): The model to certify.
        samples (Sequence): Base points; use [()] when base_dim is 0.
        tolerance (float): A residual must be strictly below this to pass.

    Returns:
        AxiomReport: Maximum residuals over all samples and index combinations.
    """
    if len(samples) == 0:
        raise AlgebroidError('certification needs at least one sample point')
    report = AxiomReport(0.0, 0.0, 0.0, [np.asarray(s, dtype=float) for s in samples], tolerance,
                         metadata={key: _jsonable(value) for key, value in model.metadata.items()})
    for x in report.samples:
        try:
            antisymmetry, anchor, jacobi = _residuals_at(model, x)
        except EvaluationError as err:
            logger.warning('certification skipped point %s: %s', x.tolist(), err)
            report.point_errors.append({'point': x.tolist(), 'error': str(err)})
            continue
        report.antisymmetry = max(report.antisymmetry, float(antisymmetry))
        if anchor.size and np.max(np.abs(anchor)) >= report.anchor_compatibility:
            i, a, b = np.unravel_index(np.argmax(np.abs(anchor)), anchor.shape)
            report.anchor_compatibility = float(np.abs(anchor[i, a, b]))
            report.worst_anchor = (int(i) + 1, int(a) + 1, int(b) + 1)
        if np.max(np.abs(jacobi)) >= report.jacobi:
            nu, a, b, c = np.unravel_index(np.argmax(np.abs(jacobi)), jacobi.shape)
            report.jacobi = float(np.abs(jacobi[nu, a, b, c]))
            report.worst_jacobi = (int(a) + 1, int(b) + 1, int(c) + 1, int(nu) + 1)
    if not report.passed:
        logger.warning('certification of %s failed: %s', model.describe(), report.to_dict())
    return report


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


# ---------------------------------------------------------------------------
# Catalog
# ---------------------------------------------------------------------------

def _so3() -> np.ndarray:
    C = np.zeros((3, 3, 3))
    for a, b, g in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
        C[g, a, b] = 1.0
        C[g, b, a] = -1.0
    return C


def _heisenberg3() -> np.ndarray:
    C = np.zeros((3, 3, 3))
    C[2, 0, 1], C[2, 1, 0] = 1.0, -1.0
    return C


def _se2() -> np.ndarray:
    # basis (J, P1, P2): [J, P1] = P2, [J, P2] = -P1, [P1, P2] = 0
    C = np.zeros((3, 3, 3))
    C[2, 0, 1], C[2, 1, 0] = 1.0, -1.0
    C[1, 0, 2], C[1, 2, 0] = -1.0, 1.0
    return C


def _casimirs_so3(offset: int) -> list:
    return ['+'.join(f'eta{offset + k}^2' for k in (1, 2, 3))]


def _casimirs_heisenberg3(offset: int) -> list:
    return [f'eta{offset + 3}']


def _casimirs_se2(offset: int) -> list:
    return [f'eta{offset + 2}^2+eta{offset + 3}^2']


NAMED_ALGEBRAS = {
    'so3': (_so3, _casimirs_so3),
    'heisenberg3': (_heisenberg3, _casimirs_heisenberg3),
    'se2': (_se2, _casimirs_se2),
}


def structure_constants(name: str, dim: int | None = None) -> tuple:
    """
    Structure constants of a named Lie algebra and its registered Casimirs.

    Args:
        name (str): One of so3, heisenberg3, se2, abelian<r> (or 'abelian' with dim).
        dim (int, optional): Dimension for 'abelian'.

    Returns:
        tuple: (C array indexed [gamma, alpha, beta], Casimir source builder taking
        the eta index offset).
    """
    if not isinstance(name, str):
        raise AlgebroidError(f"algebra name must be a string, got {name!r}")
    if name in NAMED_ALGEBRAS:
        build, casimirs = NAMED_ALGEBRAS[name]
        return build(), casimirs
    match = re.fullmatch(r'abelian_?(\d*)', name)
    if match:
        r = int(match.group(1)) if match.group(1) else dim
        if not r or r < 1:
            raise AlgebroidError(f"abelian algebra needs a positive dimension, got {r}")
        return np.zeros((r, r, r)), lambda offset: [f'eta{offset + k + 1}' for k in range(r)]
    raise AlgebroidError(f"unknown Lie algebra '{name}' (expected so3, heisenberg3, se2 or abelian<r>)")


def _constant_structure(C: np.ndarray, offset: int = 0) -> dict:
    r = C.shape[0]
    fields = {}
    for g in range(r):
        for a in range(r):
            for b in range(a + 1, r):
                if C[g, a, b] != 0.0:
                    fields[(g + offset, a + offset, b + offset)] = ScalarField.constant(C[g, a, b])
    return fields


def _block_anchor(n: int, rank: int) -> tuple:
    return tuple(tuple(ScalarField.constant(1.0 if a == i else 0.0) for a in range(rank)) for i in range(n))


def _check_algebra(C: np.ndarray) -> np.ndarray:
    C = np.asarray(C, dtype=float)
    if C.ndim != 3 or len(set(C.shape)) != 1:
        raise AlgebroidError(f'structure constants must be an r x r x r array, got shape {C.shape}')
    if not np.array_equal(C, -np.transpose(C, (0, 2, 1))):
        raise AlgebroidError('structure constants must be antisymmetric in the lower indices')
    return C


def lie_algebra_model(C: np.ndarray, casimirs: Sequence[str] = (), name: str = 'custom') -> AlgebroidModel:
    C = _check_algebra(C)
    return AlgebroidModel(0, C.shape[0], (), _constant_structure(C),
                          casimirs=tuple(ScalarField.parse(c) for c in casimirs),
                          kind='lie_algebra', metadata={'algebra': name, 'algebra_offset': 0})


def trivial_model(base_dim: int, C: np.ndarray, casimirs: Sequence[str] = (), name: str = 'custom',
                  kind: str = 'trivial', metadata: Mapping | None = None) -> AlgebroidModel:
    """
    The trivial algebroid TM + (M x g): anchor [I | 0], bracket of constant sections
    given by the algebra constants on the g indices.
    """
    C = _check_algebra(C)
    n = base_dim
    rank = n + C.shape[0]
    return AlgebroidModel(n, rank, _block_anchor(n, rank), _constant_structure(C, offset=n),
                          casimirs=tuple(ScalarField.parse(c) for c in casimirs),
                          kind=kind, metadata={'algebra': name, 'algebra_offset': n, **(metadata or {})})


def tangent_model(base_dim: int) -> AlgebroidModel:
    if base_dim < 1:
        raise AlgebroidError(f'tangent algebroid needs base_dim >= 1, got {base_dim}')
    return AlgebroidModel(base_dim, base_dim, _block_anchor(base_dim, base_dim), {}, kind='tangent')


def custom_model(base_dim: int, rank: int, anchor: Sequence[Sequence], structure: Mapping,
                 casimirs: Sequence[str] = ()) -> AlgebroidModel:
    """
    Build a model from expressions.

    Args:
        base_dim (int): n.
        rank (int): r.
        anchor (Sequence[Sequence]): n rows of r expressions in x1..xn.
        structure (Mapping): 1-based (gamma, alpha, beta) -> expression. Entries with
            alpha > beta are stored negated on the (gamma, beta, alpha) slot.
        casimirs (Sequence[str]): Casimir expressions in eta variables.
    """
    anchor_fields = tuple(tuple(ScalarField.coerce(e) for e in row) for row in anchor)
    fields = {}
    for (g, a, b), expr in structure.items():
        expr = ScalarField.coerce(expr)
        if a == b:
            raise AlgebroidError(f'structure entry ({g},{a},{b}) lies on the diagonal and must vanish')
        key = (g - 1, a - 1, b - 1) if a < b else (g - 1, b - 1, a - 1)
        if key in fields:
            raise AlgebroidError(f'structure entry ({g},{a},{b}) is given twice')
        fields[key] = expr if a < b else -expr
    return AlgebroidModel(base_dim, rank, anchor_fields, fields,
                          casimirs=tuple(ScalarField.parse(c) for c in casimirs), kind='custom')


def coadjoint_action_matrix(C: np.ndarray, xi: Sequence[float]) -> np.ndarray:
    """
    Rows are ad*_{e_alpha} xi, from <ad*_X xi, Y> = <xi, [Y, X]>:
    (ad*_{e_a} xi)_b = sum_g xi_g C^g_{ba}.
    """
    return np.einsum('g,gba->ab', np.asarray(xi, dtype=float), C)


def numerical_rank(matrix: np.ndarray, threshold: float = RANK_THRESHOLD) -> int:
    if matrix.size == 0:
        return 0
    singular = np.linalg.svd(matrix, compute_uv=False)
    if singular[0] == 0.0:
        return 0
    return int(np.sum(singular > threshold * singular[0]))


def coadjoint_model(algebra: np.ndarray, xi: Sequence[float], base_dim: int = 0,
                    casimirs: Sequence[str] = (), name: str = 'custom') -> AlgebroidModel:
    """
    Coadjoint algebroid of the trivial groupoid over an n-dimensional base: same
    anchor and structure functions as the trivial algebroid, with xi and the
    orbit-tangent spanning set {ad*_{e_alpha} xi} recorded in the metadata.

    The spanning set may be rank-deficient (so3 at xi=(0,0,1) has rank 2); its
    numerical rank is recorded rather than assumed.
    """
    C = _check_algebra(algebra)
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (C.shape[0],):
        raise AlgebroidError(f'xi has length {xi.size}, expected {C.shape[0]}')
    if not np.any(xi):
        raise AlgebroidError('xi must be nonzero')
    span = coadjoint_action_matrix(C, xi)
    rank = numerical_rank(span)
    if rank < C.shape[0]:
        logger.info('ad* spanning set at xi=%s has rank %d < %d', xi.tolist(), rank, C.shape[0])
    return trivial_model(base_dim, C, casimirs, name, kind='coadjoint', metadata={
        'xi': xi.tolist(),
        'orbit_span': span.tolist(),
        'orbit_rank': rank,
        'orbit_basis_independent': rank == C.shape[0],
    })


def catalog(kind: str, **params) -> AlgebroidModel:
    """
    Build a standard algebroid.

    Args:
        kind (str): lie_algebra, tangent, trivial, coadjoint or custom.
        **params: base_dim, algebra (name), dim (abelian), constants (explicit
            r x r x r array), xi (coadjoint), anchor/structure/rank (custom).

    Returns:
        AlgebroidModel: The model; catalog models pass certify at 1e-10.
    """
    if kind not in KINDS:
        raise AlgebroidError(f"unknown algebroid kind '{kind}' (expected one of {', '.join(KINDS)})")
    if kind == 'tangent':
        return tangent_model(int(params.get('base_dim', 0)))
    if kind == 'custom':
        return custom_model(int(params['base_dim']), int(params['rank']), params.get('anchor', ()),
                            params.get('structure', {}), params.get('casimirs', ()))

    if 'constants' in params and params['constants'] is not None:
        C, casimirs, name = _check_algebra(params['constants']), list(params.get('casimirs', ())), 'custom'
    else:
        if 'algebra' not in params:
            raise AlgebroidError(f"kind '{kind}' needs an algebra name or explicit constants")
        name = params['algebra']
        C, build_casimirs = structure_constants(name, params.get('dim'))
        offset = 0 if kind == 'lie_algebra' else int(params.get('base_dim', 0))
        casimirs = build_casimirs(offset)

    if kind == 'lie_algebra':
        if int(params.get('base_dim', 0)) != 0:
            raise AlgebroidError('lie_algebra models live over a point (base_dim = 0)')
        return lie_algebra_model(C, casimirs, name)
    if kind == 'trivial':
        return trivial_model(int(params.get('base_dim', 0)), C, casimirs, name)
    return coadjoint_model(C, params.get('xi', ()), int(params.get('base_dim', 0)), casimirs, name)


def sample_points(model: AlgebroidModel, count: int, seed: int = 0, spread: float = 2.0) -> list:
    """
    Random base points in [-spread, spread]^n; a single empty point when n = 0.
    """
    if model.base_dim == 0:
        return [np.zeros(0)]
    rng = np.random.default_rng(seed)
    return [rng.uniform(-spread, spread, model.base_dim) for _ in range(count)]
