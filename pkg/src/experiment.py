import logging
import os
import timeit
from dataclasses import dataclass, field

import numpy as np

from algebroid import certify, sample_points
from argparser import ConfigError, ProblemConfig, load_config
from coadjoint import matrix_group, sample_orbit
from exprlang import ScalarField
from optctl import ControlError, critical_trajectory, hamiltonian_trajectory, shoot
from poisson import PhasePoint, poisson_bracket
from utils import format_elapsed, plot_trajectory, write_csv, write_json

logger = logging.getLogger(__name__)


@dataclass
class RunReport:
    """
    Summary of one command run: every listed output exists when the command
    succeeds, and the digest depends only on the problem file bytes.
    """
    command: str
    config_digest: str
    wall_time: float = 0.0
    outputs: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            'command': self.command,
            'config_digest': self.config_digest,
            'wall_time': self.wall_time,
            'outputs': list(self.outputs),
            'diagnostics': self.diagnostics,
        }


def report_path(out_path: str) -> str:
    return os.path.splitext(out_path)[0] + '.report.json'


class CommandRunner:
    def __init__(self,
                 config_path: str,
                 out_path: str | None = None,
                 tol: float | None = None,
                 seed: int | None = None,
                 quiet: bool = False,
                 params: dict | None = None):
        """
        Initialize the runner with a problem file and command-line settings.

        Args:
            config_path (str): Problem file.
            out_path (str, optional): Output file; defaults to <out_dir>/<name>.<command>.<ext>.
            tol (float, optional): Certification (validate) or endpoint (shoot) tolerance.
            seed (int, optional): Overrides the seed of sampled points and orbit samples.
            quiet (bool): Suppress summaries; primary results are still printed.
            params (dict, optional): Runtime defaults from params.json.
        """
        self.config_path = config_path
        self.out_path = out_path
        self.tol = tol
        self.seed = seed
        self.quiet = quiet
        self.params = params or {}
        self.config = None

    def say(self, *args) -> None:
        if not self.quiet:
            print(*args)

    def output(self, command: str, extension: str) -> str:
        if self.out_path:
            return self.out_path
        name = os.path.splitext(os.path.basename(self.config_path))[0]
        return os.path.join(self.params.get('out_dir', 'results'), f'{name}.{command}.{extension}')

    def load(self) -> ProblemConfig:
        if self.config is None:
            self.config = load_config(self.config_path)
        return self.config

    def execute(self, command: str, **options) -> int:
        """
        Run one command and return its exit code.

        Raises:
            ConfigError, ControlError, EvaluationError, OSError and the other
            library errors; run.main maps them to exit codes.
        """
        handler = getattr(self, f'cmd_{command}', None)
        if handler is None:
            raise ValueError(f"Command '{command}' not recognized.")
        start_time = timeit.default_timer()
        code = handler(**options)
        logger.info('%s finished in %s', command, format_elapsed(timeit.default_timer() - start_time))
        return code

    def cmd_validate(self) -> int:
        """
        Certify the algebroid axioms at sampled base points; exit 0 iff they hold.
        """
        config = self.load()
        tol = self.tol if self.tol is not None else self.params.get('tol', 1e-8)
        start_time = timeit.default_timer()
        seed = self.seed if self.seed is not None else self.params.get('seed', 0)
        points = sample_points(config.model, int(self.params.get('certify_samples', 10)), seed)
        axioms = certify(config.model, points, tol)
        out = self.output('validate', 'json')
        run = RunReport('validate', config.digest, timeit.default_timer() - start_time, [out],
                        {'axioms': axioms.to_dict()})
        write_json(out, run.to_dict())

        self.say(f'{config.model.describe()}: {len(points)} point(s), tolerance {tol:g}')
        self.say(f'  antisymmetry         {axioms.antisymmetry:.3e}')
        self.say(f'  anchor compatibility {axioms.anchor_compatibility:.3e}')
        self.say(f'  jacobi               {axioms.jacobi:.3e}')
        if axioms.passed:
            self.say('certified')
            return 0
        if axioms.worst_jacobi:
            print('worst Jacobi residual at (alpha, beta, gamma, nu) = {}'.format(tuple(axioms.worst_jacobi)))
        if axioms.worst_anchor:
            print('worst anchor residual at (i, alpha, beta) = {}'.format(tuple(axioms.worst_anchor)))
        print('certification FAILED')
        return 1

    def cmd_solve(self) -> int:
        """
        Integrate critical trajectories (or the Hamiltonian equations of h) and write
        the trajectory CSV plus a run report.
        """
        config = self.load()
        settings = config.integrate
        if settings is None:
            raise ConfigError(config.path, ['solve needs an [integrate] section'])
        if settings.get('eta0') is None:
            raise ConfigError(config.path, ["solve needs [integrate] eta0"])
        out = self.output('solve', 'csv')
        start_time = timeit.default_timer()
        try:
            if config.problem is not None:
                record = critical_trajectory(config.problem, settings['steps'], settings['method'],
                                             self.params.get('stat_tol', 1e-11), settings.get('u0'))
            else:
                record = hamiltonian_trajectory(config.model, config.hamiltonian, settings['x0'],
                                                settings['eta0'], (settings['t0'], settings['t1']),
                                                settings['steps'], settings['method'])
        except ControlError as error:
            self.fail_report('solve', config, out, error, start_time)
            raise

        outputs = [write_csv(out, record.header(), record.rows())]
        if self.params.get('save_plot'):
            outputs.append(plot_trajectory(record, os.path.splitext(out)[0] + '.png'))
        run = RunReport('solve', config.digest, timeit.default_timer() - start_time, outputs,
                        {**record.summary(), 'casimirs': list(record.casimir_labels)})
        outputs.append(write_json(report_path(out), run.to_dict()))

        self.say(f'{record.steps} {record.method} steps -> {out}')
        self.say(f'  energy drift {run.diagnostics["energy_drift"]:.3e}, '
                 f'casimir drift {run.diagnostics["casimir_drift"]:.3e}, '
                 f'max |dH/du| {run.diagnostics["max_stationarity"]:.3e}')
        self.say('  elapsed', format_elapsed(run.wall_time))
        return 0

    def cmd_shoot(self) -> int:
        """
        Solve for eta0 reaching the target, print it and write the optimal trajectory.
        Exit 1 when the final trajectory misses the target by more than the tolerance.
        """
        config = self.load()
        if config.problem is None or config.shoot is None:
            raise ConfigError(config.path, ['shoot needs [control], [integrate] and [shoot] sections'])
        settings, target = config.integrate, config.shoot
        tol = self.tol if self.tol is not None else target['tol']
        guess = target.get('guess')
        if guess is None:
            guess = settings['eta0'] if settings.get('eta0') is not None else np.zeros(config.model.rank)
        out = self.output('shoot', 'csv')
        stat_tol = self.params.get('stat_tol', 1e-11)
        start_time = timeit.default_timer()
        try:
            eta0_star = shoot(config.problem, guess, tol, settings['steps'], settings['method'],
                              target['max_iter'], stat_tol)
            record = critical_trajectory(config.problem.with_eta0(eta0_star), settings['steps'],
                                         settings['method'], stat_tol, settings.get('u0'))
        except ControlError as error:
            for entry in getattr(error, 'history', []):
                print(f"iteration {entry['iteration']}: endpoint error {entry['endpoint_error']:.3e}")
            self.fail_report('shoot', config, out, error, start_time)
            raise

        endpoint_error = float(np.max(np.abs(record.x[-1] - config.problem.target))) if record.x.size else 0.0
        print('eta0_star =', ' '.join(f'{v:.17g}' for v in eta0_star))
        outputs = [write_csv(out, record.header(), record.rows())]
        run = RunReport('shoot', config.digest, timeit.default_timer() - start_time, outputs,
                        {**record.summary(), 'eta0_star': eta0_star.tolist(), 'endpoint_error': endpoint_error,
                         'tolerance': tol})
        outputs.append(write_json(report_path(out), run.to_dict()))
        if endpoint_error >= tol:
            print(f'endpoint error {endpoint_error:.3e} exceeds tolerance {tol:.1e}')
            return 1
        self.say(f'endpoint error {endpoint_error:.3e} -> {out}')
        return 0

    def cmd_orbit(self) -> int:
        """
        Sample the coadjoint orbit through xi and write lambda1..lambdar rows.
        """
        config = self.load()
        if config.orbit is None:
            raise ConfigError(config.path, ['orbit needs an [orbit] section'])
        settings = config.orbit
        ctx = matrix_group(config.model.metadata['algebra'], config.algebra_dim)
        seed = self.seed if self.seed is not None else settings['seed']
        start_time = timeit.default_timer()
        sample = sample_orbit(ctx, settings['xi'], settings['samples'], seed, settings['spread'])
        out = self.output('orbit', 'csv')
        header = [f'lambda{k + 1}' for k in range(ctx.rank)]
        outputs = [write_csv(out, header, sample.points)]
        norms = sample.norms()
        run = RunReport('orbit', config.digest, timeit.default_timer() - start_time, outputs, {
            'group': ctx.name,
            'xi': sample.xi.tolist(),
            'samples': settings['samples'],
            'seed': seed,
            'norm_min': float(norms.min()),
            'norm_max': float(norms.max()),
            'pairing_residual': sample.pairing_residual(ctx),
        })
        outputs.append(write_json(report_path(out), run.to_dict()))
        self.say(f'{settings["samples"]} points of the {ctx.name} orbit through {sample.xi.tolist()} -> {out}')
        return 0

    def cmd_bracket(self, f: str, g: str, x: list | None = None, eta: list | None = None) -> int:
        """
        Print {f, g} at (x, eta) with 17 significant digits.
        """
        config = self.load()
        model = config.model
        x = np.zeros(model.base_dim) if x is None else np.asarray(x, dtype=float)
        eta = np.zeros(model.rank) if eta is None else np.asarray(eta, dtype=float)
        point = PhasePoint.on(model, x, eta)
        value = poisson_bracket(model, ScalarField.parse(f), ScalarField.parse(g), point)
        print(f'{value:.17g}')
        return 0

    def fail_report(self, command: str, config: ProblemConfig, out: str, error: ControlError,
                    start_time: float) -> None:
        run = RunReport(command, config.digest, timeit.default_timer() - start_time, [], {
            'error': str(error),
            'error_type': type(error).__name__,
            'last_good_time': error.last_good_time,
        })
        write_json(report_path(out), run.to_dict())
