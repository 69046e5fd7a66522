import os
import sys

import numpy as np
import pytest

_HERE = os.path.dirname(__file__)
ROOT = os.path.abspath(os.path.join(_HERE, '..'))
CONFIGS = os.path.join(ROOT, 'configs')
sys.path.insert(0, os.path.join(ROOT, 'src'))

from algebroid import catalog  # noqa: E402


def config_path(name: str) -> str:
    return os.path.join(CONFIGS, name)


# ---------------------------------------------------------------------------
# Catalog models shared by the algebroid, poisson and optctl suites
# ---------------------------------------------------------------------------
CATALOG_SPECS = {
    'so3': ('lie_algebra', {'algebra': 'so3'}),
    'heisenberg3': ('lie_algebra', {'algebra': 'heisenberg3'}),
    'se2': ('lie_algebra', {'algebra': 'se2'}),
    'abelian2': ('lie_algebra', {'algebra': 'abelian2'}),
    'tangent1': ('tangent', {'base_dim': 1}),
    'tangent3': ('tangent', {'base_dim': 3}),
    'trivial_so3': ('trivial', {'base_dim': 2, 'algebra': 'so3'}),
    'trivial_heisenberg3': ('trivial', {'base_dim': 1, 'algebra': 'heisenberg3'}),
    'coadjoint_so3': ('coadjoint', {'algebra': 'so3', 'xi': [0.0, 0.0, 1.0]}),
    'exp_anchor': ('custom', {'base_dim': 2, 'rank': 2, 'anchor': [['1', '0'], ['0', 'exp(x1)']],
                              'structure': {(2, 1, 2): '1'}}),
}


def build_catalog_model(name: str):
    kind, params = CATALOG_SPECS[name]
    return catalog(kind, **params)


@pytest.fixture(params=sorted(CATALOG_SPECS))
def catalog_model(request):
    return build_catalog_model(request.param)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def random_expression(rng: np.random.Generator, names: list, depth: int = 3) -> str:
    """
    Random smooth expression over the given variables, built from operations that
    stay finite on moderate inputs.
    """
    if depth == 0 or rng.random() < 0.2:
        if rng.random() < 0.3:
            return repr(round(float(rng.uniform(-2.0, 2.0)), 3))
        return str(rng.choice(names))
    a = random_expression(rng, names, depth - 1)
    b = random_expression(rng, names, depth - 1)
    choice = rng.integers(0, 9)
    if choice == 0:
        return f'({a} + {b})'
    if choice == 1:
        return f'({a} - {b})'
    if choice == 2:
        return f'({a} * {b})'
    if choice == 3:
        return f'({a} / (1 + ({b})^2))'
    if choice == 4:
        return f'sin({a})'
    if choice == 5:
        return f'cos({a})'
    if choice == 6:
        return f'exp(0.1*{a})'
    if choice == 7:
        return f'({a})^2'
    return f'-({a})'


@pytest.fixture
def expression_factory(rng):
    def make(names, depth=3):
        return random_expression(rng, list(names), depth)
    return make
