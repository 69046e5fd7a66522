import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from algebroid import AlgebroidModel
from exprlang import EvaluationError, ScalarField, coordinate_names, make_binding, max_index, variable_family
from poisson import PhasePoint, hamiltonian_vector_field

logger = logging.getLogger(__name__)

METHODS = ('rk4', 'midpoint')
STATIONARITY_TOL = 1e-11
NEWTON_MAX_ITER = 50
NEWTON_FD_STEP = 1e-6
MAX_HALVINGS = 10
CONDITION_LIMIT = 1e12
SHOOT_FD_STEP = 1e-6


class ControlError(RuntimeError):
    """
    Numerical failure while solving a control problem. last_good_time is the last
    sample time at which the state was accepted, when known.
    """
    def __init__(self, message: str, last_good_time: float | None = None) -> None:
        super().__init__(message)
        self.last_good_time = last_good_time


class SingularHessianError(ControlError):
    pass


class StationarityConvergenceError(ControlError):
    pass


class IntegrationError(ControlError):
    pass


class ShootingError(ControlError):
    def __init__(self, message: str, history: list | None = None) -> None:
        super().__init__(message)
        self.history = list(history or [])


@dataclass(frozen=True, eq=False)
class ControlProblem:
    """
    Optimal control problem on an algebroid: minimize the integral of L(x, u) over
    the horizon subject to xdot = rho(x) f(x, u).
    """
    model: AlgebroidModel
    control_dim: int
    f: tuple
    L: ScalarField
    horizon: tuple
    x0: np.ndarray
    eta0: np.ndarray | None = None
    target: np.ndarray | None = None

    def __post_init__(self) -> None:
        n, r, m = self.model.base_dim, self.model.rank, self.control_dim
        object.__setattr__(self, 'f', tuple(ScalarField.coerce(e) for e in self.f))
        object.__setattr__(self, 'L', ScalarField.coerce(self.L))
        if m < 0:
            raise ValueError(f'control_dim must be non-negative, got {m}')
        if len(self.f) != r:
            raise ValueError(f'control section has {len(self.f)} components, the algebroid has rank {r}')
        for expr in self.f + (self.L,):
            stray = [v for v in expr.variables if variable_family(v) not in ('x', 'u')]
            if stray:
                raise ValueError(f'{expr.source} may only reference x and u variables, found {stray}')
            if max_index(expr.variables, 'x') > n or max_index(expr.variables, 'u') > m:
                raise ValueError(f'{expr.source} references coordinates beyond n={n}, m={m}')
        t0, t1 = (float(t) for t in self.horizon)
        if not t1 > t0:
            raise ValueError(f'horizon must satisfy t1 > t0, got [{t0}, {t1}]')
        object.__setattr__(self, 'horizon', (t0, t1))
        object.__setattr__(self, 'x0', _vector(self.x0, n, 'x0'))
        if self.eta0 is not None:
            object.__setattr__(self, 'eta0', _vector(self.eta0, r, 'eta0'))
        if self.target is not None:
            object.__setattr__(self, 'target', _vector(self.target, n, 'target'))

    @property
    def u_names(self) -> tuple:
        return coordinate_names('u', self.control_dim)

    @cached_property
    def hamiltonian(self) -> ScalarField:
        """
        Pontryagin Hamiltonian H = sum_a eta_a f^a(x, u) - L(x, u) as a field.
        """
        H = -self.L
        for name, component in zip(self.model.eta_names, self.f):
            H = H + ScalarField.variable(name) * component
        return H

    def with_eta0(self, eta0: Sequence[float]) -> 'ControlProblem':
        return dataclasses.replace(self, eta0=np.asarray(eta0, dtype=float))


def _vector(values, size: int, label: str) -> np.ndarray:
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.shape[0] != size:
        raise ValueError(f'{label} has length {values.shape[0]}, expected {size}')
    return values


@dataclass
class TrajectoryRecord:
    """
    Sampled solution of a critical-trajectory (or plain Hamiltonian) integration.
    Row k of every array belongs to times[k].
    """
    times: np.ndarray
    x: np.ndarray
    eta: np.ndarray
    u: np.ndarray
    hamiltonian: np.ndarray
    stationarity: np.ndarray
    casimirs: np.ndarray
    casimir_labels: tuple = ()
    running_cost: np.ndarray | None = None
    method: str = 'rk4'

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    def header(self) -> list:
        n, r, m, k = self.x.shape[1], self.eta.shape[1], self.u.shape[1], self.casimirs.shape[1]
        return (['t'] + list(coordinate_names('x', n)) + list(coordinate_names('eta', r))
                + list(coordinate_names('u', m)) + ['H', 'stat_res']
                + [f'casimir_{j + 1}' for j in range(k)])

    def rows(self) -> np.ndarray:
        return np.column_stack([self.times, self.x, self.eta, self.u, self.hamiltonian,
                                self.stationarity, self.casimirs])

    def energy_drift(self) -> float:
        return float(np.max(np.abs(self.hamiltonian - self.hamiltonian[0])))

    def casimir_drift(self) -> float:
        if self.casimirs.shape[1] == 0:
            return 0.0
        return float(np.max(np.abs(self.casimirs - self.casimirs[0])))

    def max_stationarity(self) -> float:
        return float(np.max(self.stationarity)) if self.stationarity.size else 0.0

    def cost(self) -> float | None:
        """
        Running cost integrated with the trapezoidal rule over the samples.
        """
        if self.running_cost is None:
            return None
        return float(np.sum(0.5 * (self.running_cost[1:] + self.running_cost[:-1]) * np.diff(self.times)))

    def summary(self) -> dict:
        return {
            'steps': self.steps,
            'method': self.method,
            'final_time': float(self.times[-1]),
            'energy_drift': self.energy_drift(),
            'casimir_drift': self.casimir_drift(),
            'max_stationarity': self.max_stationarity(),
            'cost': self.cost(),
        }


def _check_phase(problem: ControlProblem, p: PhasePoint, u: Sequence[float]) -> np.ndarray:
    model = problem.model
    if p.x.shape[0] != model.base_dim or p.eta.shape[0] != model.rank:
        raise ValueError(f'phase point has (n, r) = ({p.x.shape[0]}, {p.eta.shape[0]}), '
                         f'problem has ({model.base_dim}, {model.rank})')
    return _vector(u, problem.control_dim, 'u')


def pontryagin_hamiltonian(problem: ControlProblem, p: PhasePoint, u: Sequence[float]) -> float:
    u = _check_phase(problem, p, u)
    return problem.hamiltonian(p.binding(make_binding(u=u)))


def stationarity_gradient(problem: ControlProblem, p: PhasePoint, u: Sequence[float]) -> np.ndarray:
    """
    dH/du at (x, eta, u).
    """
    u = _check_phase(problem, p, u)
    return problem.hamiltonian.gradient(problem.u_names, p.binding(make_binding(u=u)))


def _condition(matrix: np.ndarray) -> float:
    singular = np.linalg.svd(matrix, compute_uv=False)
    if singular.size == 0:
        return 1.0
    if singular[-1] == 0.0:
        return float('inf')
    return float(singular[0] / singular[-1])


def stationarity_solve(problem: ControlProblem, p: PhasePoint, u_guess: Sequence[float],
                       tol: float = STATIONARITY_TOL, max_iter: int = NEWTON_MAX_ITER) -> np.ndarray:
    """
    Solve dH/du = 0 for u by damped Newton.

    The Jacobian is the forward difference (step 1e-6) of the AD gradient; a trial
    step is halved while it increases the residual.

    Args:
        problem (ControlProblem): The control problem.
        p (PhasePoint): Phase point (x, eta) held fixed.
        u_guess (Sequence[float]): Starting control.
        tol (float): Target max-norm of dH/du.
        max_iter (int): Newton iteration limit.

    Returns:
        np.ndarray: u_star with ||dH/du||_inf < tol.

    Raises:
        SingularHessianError: If the Jacobian condition estimate exceeds 1e12.
        StationarityConvergenceError: If max_iter iterations do not reach tol.
    """
    u = _check_phase(problem, p, u_guess).copy()
    H = problem.hamiltonian
    names = problem.u_names
    env = p.binding()

    def grad(v: np.ndarray) -> np.ndarray:
        env.update(make_binding(u=v))
        return H.gradient(names, env)

    def hessian(v: np.ndarray, g_v: np.ndarray) -> np.ndarray:
        jacobian = np.empty((v.size, v.size))
        for j in range(v.size):
            shifted = v.copy()
            shifted[j] += NEWTON_FD_STEP
            jacobian[:, j] = (grad(shifted) - g_v) / NEWTON_FD_STEP
        condition = _condition(jacobian)
        if condition > CONDITION_LIMIT:
            raise SingularHessianError(f'd2H/du2 is singular at x={p.x.tolist()}, eta={p.eta.tolist()} '
                                       f'(condition estimate {condition:.3g})')
        return jacobian

    g = grad(u)
    residual = float(np.max(np.abs(g))) if g.size else 0.0
    for iteration in range(max_iter + 1):
        # the Hessian is checked at every returned u, including the starting guess
        jacobian = hessian(u, g)
        if residual < tol:
            return u
        if iteration == max_iter:
            break
        step = np.linalg.solve(jacobian, -g)
        scale = 1.0
        for _ in range(MAX_HALVINGS):
            trial = u + scale * step
            g_trial = grad(trial)
            trial_residual = float(np.max(np.abs(g_trial)))
            if trial_residual <= residual:
                break
            scale *= 0.5
        u, g, residual = trial, g_trial, trial_residual
        logger.debug('newton iteration %d: |dH/du| = %.3e (scale %.3g)', iteration + 1, residual, scale)
    raise StationarityConvergenceError(f'dH/du = 0 not reached in {max_iter} iterations '
                                       f'(residual {residual:.3e}, tolerance {tol:.1e})')


def critical_vector_field(problem: ControlProblem, p: PhasePoint, u_guess: Sequence[float],
                          tol: float = STATIONARITY_TOL) -> tuple:
    """
    Right-hand side of the critical-trajectory equations with the control
    eliminated through dH/du = 0.

    Returns:
        tuple: (xdot, etadot, u_star).
    """
    u_star = stationarity_solve(problem, p, u_guess, tol)
    xdot, etadot = hamiltonian_vector_field(problem.model, problem.hamiltonian, p, extra=make_binding(u=u_star))
    return xdot, etadot, u_star


def rk4_step(rhs: Callable, t: float, y: np.ndarray, h: float) -> np.ndarray:
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = rhs(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def midpoint_step(rhs: Callable, t: float, y: np.ndarray, h: float) -> np.ndarray:
    k1 = rhs(t, y)
    return y + h * rhs(t + 0.5 * h, y + 0.5 * h * k1)


_STEPPERS = {'rk4': rk4_step, 'midpoint': midpoint_step}


def _stepper(method: str) -> Callable:
    if method not in _STEPPERS:
        raise ValueError(f"unknown integration method '{method}' (expected one of {', '.join(METHODS)})")
    return _STEPPERS[method]


def _time_grid(horizon: Sequence[float], steps: int) -> np.ndarray:
    if steps < 1:
        raise ValueError(f'steps must be at least 1, got {steps}')
    t0, t1 = horizon
    return np.linspace(t0, t1, steps + 1)


def integrate(rhs: Callable, y0: np.ndarray, times: np.ndarray, method: str = 'rk4',
              on_sample: Callable | None = None) -> np.ndarray:
    """
    Fixed-step integration of ydot = rhs(t, y) over the time grid.

    Args:
        rhs (Callable): Right-hand side (t, y) -> ydot.
        y0 (np.ndarray): Initial state.
        times (np.ndarray): Sample times; the step is their spacing.
        method (str): rk4 or midpoint.
        on_sample (Callable, optional): Called as on_sample(k, t, y) for every
            accepted sample, including the initial one.

    Returns:
        np.ndarray: States, one row per sample.

    Raises:
        IntegrationError: If the state becomes non-finite or an expression fails.
    """
    step = _stepper(method)
    states = np.empty((len(times), y0.size))
    states[0] = y0
    if on_sample:
        on_sample(0, times[0], y0)
    y = np.asarray(y0, dtype=float)
    for k in range(1, len(times)):
        t = times[k - 1]
        try:
            y = step(rhs, t, y, times[k] - t)
        except ControlError as error:
            if error.last_good_time is None:
                error.last_good_time = float(t)
            raise
        except EvaluationError as error:
            raise IntegrationError(f'{error} while stepping from t={t:.17g}', last_good_time=float(t)) from error
        if not np.all(np.isfinite(y)):
            raise IntegrationError(f'state became non-finite after t={t:.17g}', last_good_time=float(t))
        states[k] = y
        if on_sample:
            try:
                on_sample(k, times[k], y)
            except ControlError as error:
                if error.last_good_time is None:
                    error.last_good_time = float(t)
                raise
    return states


def _recorded_casimirs(model: AlgebroidModel) -> tuple:
    return model.casimirs if model.is_constant else ()


def critical_trajectory(problem: ControlProblem, steps: int, method: str = 'rk4',
                        tol: float = STATIONARITY_TOL, u0: Sequence[float] | None = None) -> TrajectoryRecord:
    """
    Integrate the critical-trajectory system from (x0, eta0), eliminating u at every
    stage by stationarity_solve warm-started from the previous stage.

    Args:
        problem (ControlProblem): Problem with eta0 set.
        steps (int): Number of fixed steps over the horizon.
        method (str): rk4 or midpoint.
        tol (float): Stationarity tolerance.
        u0 (Sequence[float], optional): Initial control guess (zeros by default).

    Returns:
        TrajectoryRecord: steps + 1 samples.
    """
    if problem.eta0 is None:
        raise ValueError('critical_trajectory needs an initial costate eta0')
    _stepper(method)
    model = problem.model
    n, r, m = model.base_dim, model.rank, problem.control_dim
    times = _time_grid(problem.horizon, steps)
    casimirs = _recorded_casimirs(model)
    warm = {'u': np.zeros(m) if u0 is None else _vector(u0, m, 'u0')}

    def rhs(t: float, y: np.ndarray) -> np.ndarray:
        xdot, etadot, u_star = critical_vector_field(problem, PhasePoint(y[:n], y[n:]), warm['u'], tol)
        warm['u'] = u_star
        return np.concatenate([xdot, etadot])

    controls = np.empty((len(times), m))
    energy = np.empty(len(times))
    residuals = np.empty(len(times))
    running = np.empty(len(times))
    invariants = np.empty((len(times), len(casimirs)))

    def record(k: int, t: float, y: np.ndarray) -> None:
        p = PhasePoint(y[:n], y[n:])
        u_star = stationarity_solve(problem, p, warm['u'], tol)
        warm['u'] = u_star
        env = p.binding(make_binding(u=u_star))
        value, g = problem.hamiltonian.value_and_gradient(problem.u_names, env)
        controls[k] = u_star
        energy[k] = value
        residuals[k] = float(np.max(np.abs(g))) if g.size else 0.0
        running[k] = problem.L(env)
        invariants[k] = [c(env) for c in casimirs]

    y0 = np.concatenate([problem.x0, problem.eta0])
    states = integrate(rhs, y0, times, method, on_sample=record)
    logger.info('critical trajectory: %d %s steps, max |dH/du| %.2e', steps, method, float(np.max(residuals)))
    return TrajectoryRecord(times, states[:, :n], states[:, n:], controls, energy, residuals, invariants,
                            tuple(c.source for c in casimirs), running, method)


def hamiltonian_trajectory(model: AlgebroidModel, H: ScalarField, x0: Sequence[float], eta0: Sequence[float],
                           horizon: Sequence[float], steps: int, method: str = 'rk4') -> TrajectoryRecord:
    """
    Integrate the Hamiltonian equations of a plain H(x, eta[, t]); the record has no
    control columns and zero stationarity residual.
    """
    H = ScalarField.coerce(H)
    n, r = model.base_dim, model.rank
    x0, eta0 = _vector(x0, n, 'x0'), _vector(eta0, r, 'eta0')
    times = _time_grid(tuple(float(t) for t in horizon), steps)
    timed = 't' in H.variables
    casimirs = _recorded_casimirs(model)

    def rhs(t: float, y: np.ndarray) -> np.ndarray:
        xdot, etadot = hamiltonian_vector_field(model, H, PhasePoint(y[:n], y[n:]),
                                                extra={'t': t} if timed else None)
        return np.concatenate([xdot, etadot])

    energy = np.empty(len(times))
    invariants = np.empty((len(times), len(casimirs)))

    def record(k: int, t: float, y: np.ndarray) -> None:
        env = PhasePoint(y[:n], y[n:]).binding({'t': t} if timed else None)
        energy[k] = H(env)
        invariants[k] = [c(env) for c in casimirs]

    states = integrate(rhs, np.concatenate([x0, eta0]), times, method, on_sample=record)
    return TrajectoryRecord(times, states[:, :n], states[:, n:], np.empty((len(times), 0)), energy,
                            np.zeros(len(times)), invariants, tuple(c.source for c in casimirs), None, method)


def control_trajectory(problem: ControlProblem, controls: Sequence, steps: int, method: str = 'rk4') -> tuple:
    """
    Open-loop trajectory of xdot = rho(x) f(x, u(t)) for control expressions in t.

    Returns:
        tuple: (times, x rows).
    """
    controls = [ScalarField.coerce(c) for c in controls]
    if len(controls) != problem.control_dim:
        raise ValueError(f'expected {problem.control_dim} control expressions, got {len(controls)}')
    for c in controls:
        if set(c.variables) - {'t'}:
            raise ValueError(f'control {c.source} may only depend on t')
    model = problem.model

    def rhs(t: float, x: np.ndarray) -> np.ndarray:
        u = [c({'t': t}) for c in controls]
        env = make_binding(x=x, u=u)
        return model.eval_anchor(x) @ np.array([f(env) for f in problem.f])

    times = _time_grid(problem.horizon, steps)
    return times, integrate(rhs, problem.x0.copy(), times, method)


def _endpoint(problem: ControlProblem, eta0: np.ndarray, steps: int, method: str, tol: float) -> np.ndarray:
    record = critical_trajectory(problem.with_eta0(eta0), steps, method, tol)
    return record.x[-1] - problem.target


def shoot(problem: ControlProblem, eta0_guess: Sequence[float], tol: float = 1e-10, steps: int = 100,
          method: str = 'rk4', max_iter: int = 30, stat_tol: float = STATIONARITY_TOL,
          workers: int = 1) -> np.ndarray:
    """
    Find eta0 with x(t1; eta0) = target by Newton on the endpoint residual.

    Sensitivity columns are central differences (step 1e-6) of the endpoint in each
    costate direction; they are independent integrations and run on a thread pool
    when workers > 1. Non-square sensitivities are solved in the least-squares sense.

    Args:
        problem (ControlProblem): Problem with a target.
        eta0_guess (Sequence[float]): Starting costate.
        tol (float): Endpoint tolerance (max-norm).
        steps (int): Integration steps per trajectory.
        method (str): rk4 or midpoint.
        max_iter (int): Newton iteration limit.
        stat_tol (float): Stationarity tolerance inside each trajectory.
        workers (int): Threads for the sensitivity columns.

    Returns:
        np.ndarray: eta0_star.

    Raises:
        ShootingError: On non-convergence or a singular sensitivity matrix; carries
            the iteration history.
    """
    if problem.target is None:
        raise ValueError('shooting needs a target state')
    r = problem.model.rank
    eta0 = _vector(eta0_guess, r, 'eta0 guess').copy()
    history = []

    def column(j: int) -> np.ndarray:
        shift = np.zeros(r)
        shift[j] = SHOOT_FD_STEP
        plus = _endpoint(problem, eta0 + shift, steps, method, stat_tol)
        minus = _endpoint(problem, eta0 - shift, steps, method, stat_tol)
        return (plus - minus) / (2 * SHOOT_FD_STEP)

    for iteration in range(max_iter + 1):
        residual = _endpoint(problem, eta0, steps, method, stat_tol)
        error = float(np.max(np.abs(residual))) if residual.size else 0.0
        history.append({'iteration': iteration, 'eta0': eta0.tolist(), 'endpoint_error': error})
        logger.info('shooting iteration %d: endpoint error %.3e', iteration, error)
        if error < tol:
            return eta0
        if iteration == max_iter:
            break
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                columns = list(pool.map(column, range(r)))
        else:
            columns = [column(j) for j in range(r)]
        sensitivity = np.column_stack(columns)
        condition = _condition(sensitivity)
        if condition > CONDITION_LIMIT:
            raise ShootingError(f'endpoint sensitivity is singular (condition estimate {condition:.3g})', history)
        if sensitivity.shape[0] == sensitivity.shape[1]:
            delta = np.linalg.solve(sensitivity, -residual)
        else:
            delta = np.linalg.lstsq(sensitivity, -residual, rcond=None)[0]
        eta0 = eta0 + delta
    raise ShootingError(f'shooting did not reach endpoint tolerance {tol:.1e} in {max_iter} iterations '
                        f'(last error {history[-1]["endpoint_error"]:.3e})', history)
