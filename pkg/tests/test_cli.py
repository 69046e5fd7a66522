"""
Tests for problem-file loading and the algctl command surface.
"""

import json
import logging
import os

import numpy as np
import numpy.testing as npt
import pytest

from argparser import ConfigError, UsageError, build_parser, load_config, load_params
from run import EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, main
from utils import configure_logging, file_digest, format_float, read_csv, write_csv
from conftest import CONFIGS, config_path

ALL_CONFIGS = sorted(name for name in os.listdir(CONFIGS) if name.endswith('.cfg'))


@pytest.fixture(autouse=True)
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def write_config(tmp_path, text: str) -> str:
    path = tmp_path / 'problem.cfg'
    path.write_text(text)
    return str(path)


def shot_costate(output: str) -> np.ndarray:
    line = next(line for line in output.splitlines() if line.startswith('eta0_star ='))
    return np.array([float(v) for v in line.split('=', 1)[1].split()])


class TestLoadConfig:
    @pytest.mark.parametrize('name', ALL_CONFIGS)
    def test_fixtures_load(self, name):
        config = load_config(config_path(name))
        assert config.model is not None
        assert config.digest == file_digest(config_path(name))

    def test_minimal_problem(self):
        config = load_config(config_path('minimal_tangent.cfg'))
        assert (config.model.base_dim, config.model.rank) == (1, 1)
        assert config.hamiltonian({'eta1': 2.0}) == 2.0
        assert config.problem is None and config.integrate is None

    def test_rigid_body_problem(self):
        config = load_config(config_path('so3_rigid_body.cfg'))
        problem = config.problem
        assert problem.control_dim == 3
        assert problem.L({'u1': 1.0, 'u2': 1.0, 'u3': 1.0}) == 3.0
        npt.assert_array_equal(problem.eta0, [1.0, 0.1, 0.0])
        assert config.integrate['steps'] == 1000 and config.integrate['method'] == 'rk4'
        assert config.orbit['samples'] == 500

    def test_custom_structure_keys(self):
        model = load_config(config_path('exp_anchor.cfg')).model
        C = model.eval_structure([0.0, 0.0])
        assert C[1, 0, 1] == 1.0 and C[1, 1, 0] == -1.0

    def test_costate_length_message(self, tmp_path):
        path = write_config(tmp_path, '[algebroid]\nkind = "lie_algebra"\nalgebra = "so3"\n\n'
                                      '[hamiltonian]\nh = "0"\n\n[integrate]\nt1 = 1.0\nsteps = 5\neta0 = [1.0, 2.0]\n')
        with pytest.raises(ConfigError) as info:
            load_config(path)
        assert '[integrate] eta0 has length 2, rank is 3' in info.value.errors

    def test_all_errors_are_collected(self, tmp_path):
        path = write_config(tmp_path, '[algebroid]\nkind = "tangent"\nbase_dim = 1\n\n'
                                      '[control]\nf = ["u1"]\nL = "0.5*u1^2"\n\n[hamiltonian]\nh = "eta1"\n\n'
                                      '[integrate]\nt1 = -1.0\nsteps = 0\n')
        with pytest.raises(ConfigError) as info:
            load_config(path)
        assert len(info.value.errors) == 3

    @pytest.mark.parametrize('body', [
        '[algebroid]\nkind = "tangent"\nbase_dim = 1\n[control]\nf = [u1 + 1]\nL = "0"\n',
        '[algebroid]\nkind = "tangent"\nbase_dim = 1\n[extras]\nkey = 1\n',
        '[algebroid]\nkind = "tangent"\nbase_dim = 1\nflavor = 2\n',
        '[algebroid]\nkind = "groupoid"\n',
        '[hamiltonian]\nh = "eta1"\n',
        '[algebroid]\nkind = "tangent"\nbase_dim = 1\n[hamiltonian]\nh = "eta2 + u1"\n',
        '[algebroid]\nkind = "custom"\nbase_dim = 0\nrank = 2\n3,1,2 = "1"\n',
        '[algebroid]\nkind = "tangent"\nbase_dim = 1\n[hamiltonian]\nh = "sin(eta1"\n',
    ], ids=['unquoted', 'section', 'key', 'kind', 'no-algebroid', 'variables', 'index', 'syntax'])
    def test_invalid_files(self, tmp_path, body):
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path, body))

    def test_bare_words_are_strings(self, tmp_path):
        config = load_config(write_config(tmp_path, '[algebroid]\nkind = lie_algebra\nalgebra = heisenberg3\n'))
        assert config.model.rank == 3

    def test_params_defaults(self, tmp_path):
        assert load_params(str(tmp_path / 'missing.json'))['stat_tol'] == 1e-11
        (tmp_path / 'params.json').write_text(json.dumps({'tol': 1e-6}))
        params = load_params(str(tmp_path / 'params.json'))
        assert params['tol'] == 1e-6 and params['seed'] == 0

    def test_parser_requires_config(self):
        with pytest.raises(UsageError):
            build_parser().parse_args(['solve'])


class TestExitCodes:
    def test_validate_certified(self, tmp_path):
        out = tmp_path / 'so3.json'
        assert main(['validate', '--config', config_path('so3_rigid_body.cfg'), '--out', str(out)]) == EXIT_OK
        report = json.loads(out.read_text())
        assert report['diagnostics']['axioms']['passed'] is True
        assert report['config_digest'] == file_digest(config_path('so3_rigid_body.cfg'))

    def test_validate_position_dependent_anchor(self):
        assert main(['validate', '--config', config_path('exp_anchor.cfg'), '--quiet']) == EXIT_OK

    def test_validate_abelian_residuals_vanish(self, tmp_path):
        out = tmp_path / 'abelian.json'
        assert main(['validate', '--config', config_path('abelian.cfg'), '--out', str(out)]) == EXIT_OK
        axioms = json.loads(out.read_text())['diagnostics']['axioms']
        assert axioms['antisymmetry_residual'] == axioms['jacobi_residual'] == 0.0
        assert axioms['anchor_compatibility_residual'] == 0.0

    def test_validate_broken_jacobi(self, capsys):
        assert main(['validate', '--config', config_path('broken_jacobi.cfg')]) == EXIT_VALIDATION
        out = capsys.readouterr().out
        assert '(1, 2, 3, 1)' in out
        assert 'FAILED' in out

    def test_singular_hessian(self, capsys):
        assert main(['solve', '--config', config_path('singular.cfg')]) == EXIT_NUMERICAL
        assert 'singular' in capsys.readouterr().err

    def test_singular_hessian_with_zero_costate(self, tmp_path):
        with open(config_path('singular.cfg')) as f:
            text = f.read().replace('eta0 = [1.0]', 'eta0 = [0.0]')
        out = tmp_path / 'singular.csv'
        assert main(['solve', '--config', write_config(tmp_path, text), '--out', str(out)]) == EXIT_NUMERICAL
        assert not out.exists()

    def test_failure_report_is_written(self, tmp_path):
        out = tmp_path / 'singular.csv'
        main(['solve', '--config', config_path('singular.cfg'), '--out', str(out)])
        report = json.loads((tmp_path / 'singular.report.json').read_text())
        assert report['diagnostics']['error_type'] == 'SingularHessianError'
        assert not out.exists()

    @pytest.mark.parametrize('argv', [
        ['frobnicate', '--config', 'x.cfg'],
        ['solve'],
        ['solve', '--config', 'missing.cfg'],
        ['validate', '--config', 'x.cfg', '--tol', 'small'],
    ])
    def test_usage_errors(self, argv):
        assert main(argv) == EXIT_USAGE

    def test_invalid_problem_file(self, tmp_path, capsys):
        path = write_config(tmp_path, '[algebroid]\nkind = "tangent"\nbase_dim = 0\n')
        assert main(['validate', '--config', path]) == EXIT_VALIDATION
        assert 'invalid problem file' in capsys.readouterr().err

    def test_missing_sections(self):
        assert main(['solve', '--config', config_path('exp_anchor.cfg')]) == EXIT_VALIDATION
        assert main(['orbit', '--config', config_path('minimal_tangent.cfg')]) == EXIT_VALIDATION
        assert main(['shoot', '--config', config_path('heisenberg.cfg')]) == EXIT_VALIDATION


class TestSolve:
    def test_heisenberg_endpoint(self, tmp_path):
        out = tmp_path / 'heisenberg.csv'
        assert main(['solve', '--config', config_path('heisenberg.cfg'), '--out', str(out)]) == EXIT_OK
        header, rows = read_csv(str(out))
        assert header == ['t', 'eta1', 'eta2', 'eta3', 'u1', 'u2', 'H', 'stat_res', 'casimir_1']
        assert rows.shape == (1001, 9)
        t, eta = rows[-1, 0], rows[-1, 1:4]
        assert t == 1.0
        npt.assert_allclose(eta, [np.cos(2.0), np.sin(2.0), 2.0], atol=1e-9)
        report = json.loads((tmp_path / 'heisenberg.report.json').read_text())
        assert report['outputs'][0] == str(out)
        assert report['diagnostics']['casimirs'] == ['eta3']

    def test_zero_hamiltonian_is_frozen(self, tmp_path):
        out = tmp_path / 'zero.csv'
        assert main(['solve', '--config', config_path('zero_hamiltonian.cfg'), '--out', str(out)]) == EXIT_OK
        header, rows = read_csv(str(out))
        assert header[:4] == ['t', 'eta1', 'eta2', 'eta3']
        npt.assert_array_equal(rows[:, 1:4], np.tile([1.0, 2.0, 3.0], (11, 1)))

    def test_rigid_body_casimir(self, tmp_path):
        out = tmp_path / 'rigid.csv'
        assert main(['solve', '--config', config_path('so3_rigid_body.cfg'), '--out', str(out)]) == EXIT_OK
        header, rows = read_csv(str(out))
        casimir = rows[:, header.index('casimir_1')]
        assert np.max(np.abs(casimir - casimir[0])) < 1e-8
        assert np.max(rows[:, header.index('stat_res')]) < 1e-10

    def test_trivial_algebroid(self, tmp_path):
        out = tmp_path / 'trivial.csv'
        assert main(['solve', '--config', config_path('trivial_so3.cfg'), '--out', str(out)]) == EXIT_OK
        header, rows = read_csv(str(out))
        npt.assert_allclose(rows[:, header.index('x1')], rows[:, 0], atol=1e-12)

    def test_output_is_reproducible(self, tmp_path):
        first, second = tmp_path / 'a.csv', tmp_path / 'b.csv'
        for out in (first, second):
            assert main(['solve', '--config', config_path('heisenberg.cfg'), '--out', str(out), '--quiet']) == 0
        assert first.read_bytes() == second.read_bytes()

    def test_default_output_location(self, workdir):
        assert main(['solve', '--config', config_path('minimal_tangent.cfg')]) == EXIT_VALIDATION
        assert main(['solve', '--config', config_path('abelian.cfg'), '--quiet']) == EXIT_OK
        assert (workdir / 'results' / 'abelian.solve.csv').exists()
        assert (workdir / 'results' / 'abelian.solve.report.json').exists()

    def test_quiet(self, tmp_path, capsys):
        main(['solve', '--config', config_path('abelian.cfg'), '--out', str(tmp_path / 'q.csv'), '--quiet'])
        assert capsys.readouterr().out == ''


class TestShoot:
    def test_unit_transfer(self, tmp_path, capsys):
        code = main(['shoot', '--config', config_path('tangent_1d_shoot.cfg'), '--out', str(tmp_path / 's.csv')])
        assert code == EXIT_OK
        eta0 = shot_costate(capsys.readouterr().out)
        assert abs(eta0[0] - 1.0) < 1e-9
        _, rows = read_csv(str(tmp_path / 's.csv'))
        assert abs(rows[-1, 1] - 1.0) < 1e-10

    def test_rest_solution(self, tmp_path, capsys):
        code = main(['shoot', '--config', config_path('rest_shoot.cfg'), '--out', str(tmp_path / 's.csv')])
        assert code == EXIT_OK
        assert abs(shot_costate(capsys.readouterr().out)[0]) < 1e-9

    def test_decoupled_copies(self, tmp_path, capsys):
        code = main(['shoot', '--config', config_path('tangent_2d_shoot.cfg'), '--out', str(tmp_path / 's.csv')])
        assert code == EXIT_OK
        npt.assert_allclose(shot_costate(capsys.readouterr().out), [1.0, -0.5], atol=1e-9)
        report = json.loads((tmp_path / 's.report.json').read_text())
        assert report['diagnostics']['endpoint_error'] < 1e-10


class TestOrbit:
    def test_so3_sphere(self, tmp_path):
        out = tmp_path / 'orbit.csv'
        assert main(['orbit', '--config', config_path('so3_rigid_body.cfg'), '--out', str(out)]) == EXIT_OK
        header, rows = read_csv(str(out))
        assert header == ['lambda1', 'lambda2', 'lambda3']
        assert rows.shape == (500, 3)
        npt.assert_allclose(np.linalg.norm(rows, axis=1), 1.0, atol=1e-12)

    def test_abelian_point(self, tmp_path):
        out = tmp_path / 'orbit.csv'
        assert main(['orbit', '--config', config_path('abelian.cfg'), '--out', str(out)]) == EXIT_OK
        _, rows = read_csv(str(out))
        npt.assert_allclose(rows, np.tile([1.0, 2.0, 3.0], (20, 1)), atol=1e-14)

    def test_xi_from_coadjoint_model(self, tmp_path):
        out = tmp_path / 'orbit.csv'
        assert main(['orbit', '--config', config_path('coadjoint_heisenberg.cfg'), '--out', str(out)]) == EXIT_OK
        _, rows = read_csv(str(out))
        assert rows.shape == (40, 3)
        npt.assert_allclose(rows[:, 2], 0.0, atol=1e-14)

    def test_heisenberg_orbit_through_dual_generator(self, tmp_path):
        out = tmp_path / 'orbit.csv'
        assert main(['orbit', '--config', config_path('heisenberg.cfg'), '--out', str(out)]) == EXIT_OK
        _, rows = read_csv(str(out))
        npt.assert_allclose(rows, np.tile([1.0, 0.0, 0.0], (50, 1)), atol=1e-13)

    def test_seed_override(self, tmp_path):
        runs = []
        for seed in ('1', '1', '2'):
            out = tmp_path / f'orbit{len(runs)}.csv'
            main(['orbit', '--config', config_path('so3_rigid_body.cfg'), '--out', str(out), '--seed', seed])
            runs.append(out.read_bytes())
        assert runs[0] == runs[1] != runs[2]


class TestBracket:
    def test_canonical_pair(self, capsys):
        assert main(['bracket', 'x1', 'eta1', '--config', config_path('minimal_tangent.cfg')]) == EXIT_OK
        assert capsys.readouterr().out.strip() == '1'

    def test_lie_poisson(self, capsys):
        argv = ['bracket', 'eta1', 'eta2', '--config', config_path('so3_rigid_body.cfg'), '--eta', '0', '0', '1']
        assert main(argv) == EXIT_OK
        assert capsys.readouterr().out.strip() == '-1'

    def test_self_bracket_vanishes(self, capsys):
        argv = ['bracket', 'eta1*eta2 + eta3^2', 'eta1*eta2 + eta3^2', '--config', config_path('so3_rigid_body.cfg'),
                '--eta', '0.3', '-1.2', '2']
        assert main(argv) == EXIT_OK
        assert abs(float(capsys.readouterr().out)) < 1e-14

    def test_point_length_checked(self):
        argv = ['bracket', 'eta1', 'eta2', '--config', config_path('so3_rigid_body.cfg'), '--eta', '1']
        assert main(argv) == EXIT_VALIDATION

    def test_unparsable_function(self):
        assert main(['bracket', 'eta1 +', 'eta2', '--config', config_path('so3_rigid_body.cfg')]) == EXIT_VALIDATION


class TestUtils:
    def test_floats_round_trip(self, tmp_path):
        values = np.array([[0.1, 1 / 3, -2.5e-300, 1e17]])
        path = write_csv(str(tmp_path / 'sub' / 'table.csv'), ['a', 'b', 'c', 'd'], values)
        header, rows = read_csv(path)
        assert header == ['a', 'b', 'c', 'd']
        npt.assert_array_equal(rows, values)
        assert format_float(0.1) == '0.1'

    @pytest.mark.parametrize('setting, quiet, level', [
        ('debug', False, logging.DEBUG),
        ('INFO', False, logging.INFO),
        ('loud', False, logging.WARNING),
        ('debug', True, logging.ERROR),
    ])
    def test_log_level(self, monkeypatch, setting, quiet, level):
        monkeypatch.setenv('ALGCTL_LOG', setting)
        assert configure_logging(quiet) == level
        assert logging.getLogger().level == level
