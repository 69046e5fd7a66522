import argparse
import ast
import configparser
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from algebroid import KINDS, AlgebroidError, AlgebroidModel, catalog
from exprlang import ParseError, ScalarField, max_index, variable_family
from optctl import METHODS, ControlProblem
from utils import file_digest

COMMANDS = ('validate', 'solve', 'shoot', 'orbit', 'bracket')

DEFAULT_PARAMS = {
    'tol': 1e-8,
    'seed': 0,
    'out_dir': 'results',
    'quiet': False,
    'save_plot': False,
    'certify_samples': 10,
    'stat_tol': 1e-11,
}

SECTION_KEYS = {
    'algebroid': {'kind', 'base_dim', 'rank', 'algebra', 'dim', 'anchor', 'xi', 'casimirs'},
    'control': {'f', 'L', 'control_dim'},
    'hamiltonian': {'h'},
    'integrate': {'t0', 't1', 'steps', 'method', 'x0', 'eta0', 'u0'},
    'shoot': {'target', 'tol', 'guess', 'max_iter'},
    'orbit': {'xi', 'samples', 'seed', 'spread'},
}

_TRIPLE = re.compile(r'\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*')
_BARE_WORD = re.compile(r'[A-Za-z_][A-Za-z0-9_]*')


class ConfigError(ValueError):
    """
    A problem file that cannot be used; errors lists every problem found.
    """
    def __init__(self, path: str, errors: list) -> None:
        super().__init__(f'{path}: ' + '; '.join(errors))
        self.path = str(path)
        self.errors = list(errors)


class UsageError(Exception):
    pass


def load_params(path: str = 'params.json') -> dict:
    """
    Load runtime defaults from a json file; missing keys (or a missing file) fall
    back to the built-in defaults.
    """
    params = dict(DEFAULT_PARAMS)
    if os.path.exists(path):
        with open(path, 'r') as f:
            params.update(json.load(f))
    return params


@dataclass
class ProblemConfig:
    """
    Validated contents of a problem file.

    model is always present; problem is set when the file has [control] and
    [integrate], hamiltonian when it has [hamiltonian]. integrate, shoot and orbit
    hold the normalized section values (None when the section is absent).
    """
    path: str
    digest: str
    model: AlgebroidModel
    problem: ControlProblem | None = None
    hamiltonian: ScalarField | None = None
    integrate: dict | None = None
    shoot: dict | None = None
    orbit: dict | None = None
    sections: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return Path(self.path).stem

    @property
    def algebra_dim(self) -> int:
        return self.model.rank - self.model.metadata.get('algebra_offset', 0)


class _Checker:
    """
    Collects validation errors while decoding section values.
    """
    def __init__(self) -> None:
        self.errors = []

    def fail(self, message: str) -> None:
        self.errors.append(message)

    def integer(self, where: str, value, minimum: int = 0):
        if isinstance(value, bool) or not isinstance(value, int):
            self.fail(f'{where} must be an integer, got {value!r}')
            return None
        if value < minimum:
            self.fail(f'{where} must be at least {minimum}, got {value}')
            return None
        return value

    def number(self, where: str, value):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(f'{where} must be a number, got {value!r}')
            return None
        return float(value)

    def vector(self, where: str, value, length: int | None, what: str = ''):
        if not isinstance(value, (list, tuple)) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            self.fail(f'{where} must be a list of numbers, got {value!r}')
            return None
        if length is not None and len(value) != length:
            self.fail(f'{where} has length {len(value)}, {what} is {length}')
            return None
        return np.array(value, dtype=float)

    def expression(self, where: str, value):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return ScalarField.constant(value)
        if not isinstance(value, str):
            self.fail(f'{where} must be a quoted expression, got {value!r}')
            return None
        try:
            return ScalarField.parse(value)
        except ParseError as error:
            self.fail(f'{where}: {error}')
            return None

    def expressions(self, where: str, value) -> list | None:
        if not isinstance(value, (list, tuple)):
            self.fail(f'{where} must be a list of expressions, got {value!r}')
            return None
        parsed = [self.expression(f'{where}[{k + 1}]', v) for k, v in enumerate(value)]
        return None if any(p is None for p in parsed) else parsed

    def families(self, where: str, expr: ScalarField, allowed: tuple, bounds: dict) -> None:
        stray = [v for v in expr.variables if variable_family(v) not in allowed]
        if stray:
            self.fail(f'{where} references {stray}; only {", ".join(allowed)} variables are allowed')
        for family, bound in bounds.items():
            if max_index(expr.variables, family) > bound:
                self.fail(f'{where} references {family}{max_index(expr.variables, family)} but only '
                          f'{bound} are defined')


def _read_sections(path: str, text: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None, delimiters=('=',), comment_prefixes=('#',),
                                       inline_comment_prefixes=('#',), default_section='__defaults__')
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as error:
        raise ConfigError(path, [str(error).replace('\n', ' ')]) from error
    errors = []
    sections = {}
    for name in parser.sections():
        if name not in SECTION_KEYS:
            errors.append(f'unknown section [{name}]')
            continue
        values = {}
        for key, raw in parser.items(name):
            raw = raw.strip()
            try:
                values[key] = ast.literal_eval(raw)
            except (ValueError, SyntaxError):
                if not _BARE_WORD.fullmatch(raw):
                    errors.append(f'[{name}] {key}: cannot read value {raw!r} (expressions must be quoted)')
                    continue
                values[key] = raw
            if key not in SECTION_KEYS[name] and not (name == 'algebroid' and _TRIPLE.fullmatch(key)):
                errors.append(f'[{name}] unknown key {key!r}')
        sections[name] = values
    if errors:
        raise ConfigError(path, errors)
    return sections


def _build_model(alg: dict, check: _Checker) -> AlgebroidModel | None:
    kind = alg.get('kind')
    if kind not in KINDS:
        check.fail(f"[algebroid] kind must be one of {', '.join(KINDS)}, got {kind!r}")
        return None
    base_dim = check.integer('[algebroid] base_dim', alg.get('base_dim', 0))
    if base_dim is None:
        return None
    try:
        if kind == 'custom':
            rank = check.integer('[algebroid] rank', alg.get('rank'), minimum=1)
            anchor = alg.get('anchor', [])
            structure = {}
            for key, value in alg.items():
                match = _TRIPLE.fullmatch(key)
                if match:
                    triple = tuple(int(g) for g in match.groups())
                    if rank is not None and not all(1 <= k <= rank for k in triple):
                        check.fail(f'[algebroid] structure entry {key} is out of range for rank {rank}')
                        continue
                    expr = check.expression(f'[algebroid] {key}', value)
                    if expr is not None:
                        structure[triple] = expr
            if rank is None:
                return None
            if not isinstance(anchor, (list, tuple)) or len(anchor) != base_dim:
                check.fail(f'[algebroid] anchor must have {base_dim} rows')
                return None
            rows = [check.expressions(f'[algebroid] anchor[{i + 1}]', row) for i, row in enumerate(anchor)]
            if any(row is None for row in rows):
                return None
            return catalog('custom', base_dim=base_dim, rank=rank, anchor=rows, structure=structure,
                           casimirs=alg.get('casimirs', ()))
        options = {key: alg[key] for key in ('algebra', 'dim', 'xi') if key in alg}
        model = catalog(kind, base_dim=base_dim, **options)
    except (AlgebroidError, ParseError, KeyError) as error:
        check.fail(f'[algebroid] {error}')
        return None
    if 'rank' in alg and alg['rank'] != model.rank:
        check.fail(f"[algebroid] rank is {alg['rank']}, but the {model.describe()} has rank {model.rank}")
    return model


def _control_dim(control: dict, integrate: dict, fields: list, check: _Checker) -> int | None:
    if 'control_dim' in control:
        return check.integer('[control] control_dim', control['control_dim'])
    if 'u0' in integrate and isinstance(integrate['u0'], (list, tuple)):
        return len(integrate['u0'])
    return max([max_index(f.variables, 'u') for f in fields] + [0])


def load_config(path: str) -> ProblemConfig:
    """
    Read and validate a problem file.

    Args:
        path (str): Path of the sectioned key-value file.

    Returns:
        ProblemConfig: The validated configuration with its model built.

    Raises:
        ConfigError: Listing every problem found in the file.
        OSError: If the file cannot be read.
    """
    with open(path, 'r', encoding='utf-8') as f:
        text = f.read()
    sections = _read_sections(path, text)
    check = _Checker()

    if 'algebroid' not in sections:
        raise ConfigError(path, ['missing section [algebroid]'])
    model = _build_model(sections['algebroid'], check)

    control = sections.get('control')
    hamiltonian = sections.get('hamiltonian')
    integrate = sections.get('integrate')
    shoot = sections.get('shoot')
    orbit = sections.get('orbit')

    if control is not None and hamiltonian is not None:
        check.fail('give either [hamiltonian] h or [control] f and L, not both')
    if control is None and hamiltonian is None and (integrate is not None or shoot is not None):
        check.fail('[integrate] and [shoot] need a [hamiltonian] or a [control] section')
    if shoot is not None and control is None:
        check.fail('[shoot] needs a [control] section')
    if shoot is not None and integrate is None:
        check.fail('[shoot] needs an [integrate] section for the horizon and steps')

    n = model.base_dim if model else None
    r = model.rank if model else None

    fields, cost, m = None, None, None
    if control is not None:
        for key in ('f', 'L'):
            if key not in control:
                check.fail(f'[control] missing key {key!r}')
        fields = check.expressions('[control] f', control['f']) if 'f' in control else None
        cost = check.expression('[control] L', control['L']) if 'L' in control else None
        if fields is not None:
            m = _control_dim(control, integrate or {}, fields + ([cost] if cost else []), check)
            if r is not None and len(fields) != r:
                check.fail(f'[control] f has {len(fields)} components, rank is {r}')
        if model is not None and m is not None:
            for k, expr in enumerate(fields or []):
                check.families(f'[control] f[{k + 1}]', expr, ('x', 'u'), {'x': n, 'u': m})
            if cost is not None:
                check.families('[control] L', cost, ('x', 'u'), {'x': n, 'u': m})

    h = None
    if hamiltonian is not None:
        if 'h' not in hamiltonian:
            check.fail("[hamiltonian] missing key 'h'")
        else:
            h = check.expression('[hamiltonian] h', hamiltonian['h'])
            if h is not None and model is not None:
                check.families('[hamiltonian] h', h, ('x', 'eta', 't'), {'x': n, 'eta': r})

    settings = None
    if integrate is not None:
        settings = {'t0': check.number('[integrate] t0', integrate.get('t0', 0.0))}
        if 't1' not in integrate:
            check.fail("[integrate] missing key 't1'")
        else:
            settings['t1'] = check.number('[integrate] t1', integrate['t1'])
            if settings['t0'] is not None and settings['t1'] is not None and settings['t1'] <= settings['t0']:
                check.fail(f"[integrate] t1 = {settings['t1']} must exceed t0 = {settings['t0']}")
        if 'steps' not in integrate:
            check.fail("[integrate] missing key 'steps'")
        else:
            settings['steps'] = check.integer('[integrate] steps', integrate['steps'], minimum=1)
        settings['method'] = integrate.get('method', 'rk4')
        if settings['method'] not in METHODS:
            check.fail(f"[integrate] method must be one of {', '.join(METHODS)}, got {settings['method']!r}")
        if model is not None:
            settings['x0'] = check.vector('[integrate] x0', integrate.get('x0', [0.0] * n), n, 'base_dim')
            settings['eta0'] = (check.vector('[integrate] eta0', integrate['eta0'], r, 'rank')
                                if 'eta0' in integrate else None)
        if 'u0' in integrate:
            settings['u0'] = check.vector('[integrate] u0', integrate['u0'], m, 'control_dim')
        else:
            settings['u0'] = None

    shoot_settings = None
    if shoot is not None:
        shoot_settings = {
            'tol': check.number('[shoot] tol', shoot.get('tol', 1e-10)),
            'max_iter': check.integer('[shoot] max_iter', shoot.get('max_iter', 30), minimum=1),
        }
        if 'target' not in shoot:
            check.fail("[shoot] missing key 'target'")
        elif model is not None:
            shoot_settings['target'] = check.vector('[shoot] target', shoot['target'], n, 'base_dim')
        if model is not None:
            shoot_settings['guess'] = (check.vector('[shoot] guess', shoot['guess'], r, 'rank')
                                       if 'guess' in shoot else None)

    orbit_settings = None
    if orbit is not None:
        orbit_settings = {
            'samples': check.integer('[orbit] samples', orbit.get('samples', 100), minimum=1),
            'seed': check.integer('[orbit] seed', orbit.get('seed', 0)),
            'spread': check.number('[orbit] spread', orbit.get('spread', 1.0)),
        }
        if model is not None:
            if model.kind not in ('lie_algebra', 'trivial', 'coadjoint'):
                check.fail(f'[orbit] needs a model built from a named algebra, got the {model.describe()}')
            dim = model.rank - model.metadata.get('algebra_offset', 0)
            xi = orbit.get('xi', sections['algebroid'].get('xi'))
            if xi is None:
                check.fail("[orbit] missing key 'xi'")
            else:
                orbit_settings['xi'] = check.vector('[orbit] xi', xi, dim, 'the algebra dimension')

    problem = None
    if not check.errors and model is not None and fields is not None and settings is not None:
        try:
            problem = ControlProblem(model, m, tuple(fields), cost, (settings['t0'], settings['t1']),
                                     settings['x0'], settings['eta0'],
                                     shoot_settings['target'] if shoot_settings else None)
        except ValueError as error:
            check.fail(f'[control] {error}')

    if check.errors:
        raise ConfigError(path, check.errors)
    return ProblemConfig(str(path), file_digest(path), model, problem, h, settings, shoot_settings,
                         orbit_settings, sections)


class CommandLineParser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        raise UsageError(f'{self.prog}: {message}')


def build_parser(params: dict | None = None) -> argparse.ArgumentParser:
    """
    Command-line parser: algctl {validate,solve,shoot,orbit,bracket} --config PATH
    [--out PATH] [--tol REAL] [--seed INT] [--quiet]. Usage errors raise UsageError.
    """
    params = params or DEFAULT_PARAMS
    common = CommandLineParser(add_help=False)
    common.add_argument('--config', required=True, help='Problem file')
    common.add_argument('--out', default=None, help='Output file (default: a file under out_dir)')
    common.add_argument('--tol', type=float, default=None,
                        help=f"Certification or endpoint tolerance (default {params['tol']})")
    common.add_argument('--seed', type=int, default=None,
                        help=f"Random seed for sampling (default: the problem file, else {params['seed']})")
    common.add_argument('--quiet', action='store_true', default=params['quiet'], help='Only print results')

    parser = CommandLineParser(prog='algctl', description='Optimal control on Lie algebroids.')
    commands = parser.add_subparsers(dest='command', required=True, parser_class=CommandLineParser)
    commands.add_parser('validate', parents=[common], help='Certify the algebroid axioms')
    commands.add_parser('solve', parents=[common], help='Integrate critical trajectories')
    commands.add_parser('shoot', parents=[common], help='Solve the two-point problem for eta0')
    commands.add_parser('orbit', parents=[common], help='Sample a coadjoint orbit')
    bracket = commands.add_parser('bracket', parents=[common], help='Evaluate a Poisson bracket')
    bracket.add_argument('f', help='First function of (x, eta)')
    bracket.add_argument('g', help='Second function of (x, eta)')
    bracket.add_argument('--x', type=float, nargs='*', default=None, help='Base point')
    bracket.add_argument('--eta', type=float, nargs='*', default=None, help='Fiber point')
    return parser
