"""
Tests for the expression language: parsing, rendering, evaluation and
forward-mode derivatives.
"""

import math

import numpy as np
import numpy.testing as npt
import pytest

from exprlang import (DomainError, ParseError, ScalarField, UnboundVariableError, derivative, evaluate,
                      gradient, make_binding, max_index, parse, render, value_and_gradient, variable_family)


class TestParse:
    def test_precedence(self):
        assert evaluate(parse('1 + 2*3'), {}) == 7.0
        assert evaluate(parse('(1 + 2)*3'), {}) == 9.0
        assert evaluate(parse('2*3^2'), {}) == 18.0

    def test_power_is_right_associative(self):
        assert evaluate(parse('2^3^2'), {}) == 512.0

    def test_unary_minus_binds_looser_than_power(self):
        assert evaluate(parse('-2^2'), {}) == -4.0
        assert evaluate(parse('2^-1'), {}) == 0.5

    def test_free_variables_in_order_of_appearance(self):
        tree = parse('eta2*x1 + sin(eta2) - u1')
        assert tree.free_variables == ('eta2', 'x1', 'u1')

    def test_scientific_notation(self):
        assert evaluate(parse('1.5e-3 * 2E2'), {}) == pytest.approx(0.3)

    @pytest.mark.parametrize('source', ['1 +', '(x1', 'x1 x2', '*3', ''])
    def test_syntax_errors(self, source):
        with pytest.raises(ParseError):
            parse(source)

    def test_unknown_function_reports_offset(self):
        with pytest.raises(ParseError) as info:
            parse('x1 + foo(x1)')
        assert info.value.offset == 5
        assert 'sin' in info.value.expected

    def test_offset_is_in_bytes(self):
        with pytest.raises(ParseError) as info:
            parse('\u00a0x1 + $')
        assert info.value.offset == 7

    def test_function_name_without_argument(self):
        with pytest.raises(ParseError):
            parse('sin + 1')

    def test_unclosed_function_call(self):
        with pytest.raises(ParseError) as info:
            parse('sin(x1')
        assert info.value.offset == 6
        assert info.value.expected == '")"'
        assert 'end of input' in str(info.value)


class TestRender:
    @pytest.mark.parametrize('source', [
        'x1 + 2*eta1^2',
        '-(x1 - 3)/cos(eta2)',
        'exp(-t)*u1 - sqrt(abs(x2))',
        '2^3^2 - -1',
    ])
    def test_render_reparses_to_same_tree(self, source):
        tree = parse(source)
        assert parse(render(tree)).root == tree.root

    def test_constants_round_trip_exactly(self):
        tree = parse('0.1 + 1e-300')
        assert parse(render(tree)).root == tree.root

    @pytest.mark.parametrize('value', [-2.0, -0.0, -1e-300, 3.5])
    def test_constant_fields_round_trip(self, value):
        field = ScalarField.constant(value)
        assert parse(field.source).root == field.tree.root
        assert field({}) == value

    def test_composed_field_round_trips(self):
        field = ScalarField.constant(-2.0) * ScalarField.variable('x1') - ScalarField.constant(-0.5)
        assert parse(field.source).root == field.tree.root
        assert field({'x1': 3.0}) == -5.5


class TestEvaluate:
    def test_functions(self):
        env = {'x1': 0.3}
        for name, fn in [('sin', math.sin), ('cos', math.cos), ('tan', math.tan), ('exp', math.exp),
                         ('log', math.log), ('sqrt', math.sqrt), ('abs', abs)]:
            assert evaluate(parse(f'{name}(x1)'), env) == fn(0.3)

    def test_unbound_variable(self):
        with pytest.raises(UnboundVariableError) as info:
            evaluate(parse('x1 + x2'), {'x1': 1.0})
        assert info.value.name == 'x2'

    @pytest.mark.parametrize('source, env', [
        ('log(x1)', {'x1': 0.0}),
        ('sqrt(x1)', {'x1': -1.0}),
        ('1/x1', {'x1': 0.0}),
        ('x1^0.5', {'x1': -2.0}),
        ('exp(x1)', {'x1': 1000.0}),
    ])
    def test_domain_errors(self, source, env):
        with pytest.raises(DomainError) as info:
            evaluate(parse(source), env)
        assert info.value.subexpression

    def test_negative_base_with_integer_exponent(self):
        assert evaluate(parse('x1^3'), {'x1': -2.0}) == -8.0


class TestDerivatives:
    def test_polynomial(self):
        tree = parse('x1^3 + 2*x1*eta1')
        env = {'x1': 2.0, 'eta1': 5.0}
        assert derivative(tree, 'x1', env) == 3 * 4.0 + 10.0
        assert derivative(tree, 'eta1', env) == 4.0

    def test_derivative_of_absent_variable_is_zero(self):
        assert derivative(parse('x1^2'), 'eta1', {'x1': 1.0, 'eta1': 2.0}) == 0.0

    def test_gradient_matches_single_derivatives(self):
        tree = parse('sin(x1*eta2) + exp(eta1)/(1 + x1^2)')
        env = make_binding(x=[0.4], eta=[0.2, -1.1])
        names = ('x1', 'eta1', 'eta2')
        npt.assert_allclose(gradient(tree, names, env), [derivative(tree, n, env) for n in names], rtol=1e-15)

    def test_value_and_gradient(self):
        tree = parse('x1*x2')
        value, grad = value_and_gradient(tree, ('x1', 'x2'), {'x1': 3.0, 'x2': 4.0})
        assert value == 12.0
        npt.assert_array_equal(grad, [4.0, 3.0])

    def test_variable_exponent(self):
        tree = parse('x1^x2')
        env = {'x1': 2.0, 'x2': 3.0}
        assert derivative(tree, 'x2', env) == pytest.approx(8.0 * math.log(2.0), rel=1e-15)

    @pytest.mark.parametrize('source, x', [('x1^0', 0.0), ('x1^0', 2.5), ('(x1 - 1)^0', 1.0)])
    def test_zero_exponent(self, source, x):
        tree = parse(source)
        assert evaluate(tree, {'x1': x}) == 1.0
        assert derivative(tree, 'x1', {'x1': x}) == 0.0

    def test_linearity(self, expression_factory, rng):
        names = ['x1', 'x2']
        for _ in range(50):
            f, g = expression_factory(names), expression_factory(names)
            a, b = rng.uniform(-3.0, 3.0, 2)
            env = dict(zip(names, rng.uniform(-1.0, 1.0, 2)))
            combined = parse(f'({a!r})*({f}) + ({b!r})*({g})')
            df, dg = derivative(parse(f), 'x1', env), derivative(parse(g), 'x1', env)
            expected = a * df + b * dg
            assert abs(derivative(combined, 'x1', env) - expected) <= 1e-12 * max(1.0, abs(a * df) + abs(b * dg))

    def test_chain_rule(self, rng):
        tree = parse('sin(exp(x1))')
        for x in rng.uniform(-2.0, 2.0, 20):
            exact = math.cos(math.exp(x)) * math.exp(x)
            assert abs(derivative(tree, 'x1', {'x1': x}) - exact) <= 1e-12 * abs(exact)

    def test_matches_finite_differences_on_random_trees(self, expression_factory, rng):
        names = ['x1', 'x2', 'eta1']
        step = 1e-6
        checked = 0
        while checked < 100:
            tree = parse(expression_factory(names, depth=4))
            point = rng.uniform(-1.0, 1.0, 3)
            env = dict(zip(names, point))
            value, grad = value_and_gradient(tree, names, env)
            for k, name in enumerate(names):
                plus, minus = dict(env), dict(env)
                plus[name] += step
                minus[name] -= step
                fd = (evaluate(tree, plus) - evaluate(tree, minus)) / (2 * step)
                assert abs(grad[k] - fd) <= 1e-6 * max(1.0, abs(fd), abs(value))
            checked += 1


class TestScalarField:
    def test_combinators_build_trees(self):
        eta = ScalarField.variable('eta1')
        field = 2.0 * eta * eta - ScalarField.parse('x1') + 1
        env = {'eta1': 3.0, 'x1': 4.0}
        assert field(env) == 15.0
        assert field.derivative('eta1', env) == 12.0
        assert set(field.variables) == {'eta1', 'x1'}

    def test_negation_and_reverse_subtraction(self):
        field = 1 - (-ScalarField.variable('u1'))
        assert field({'u1': 2.0}) == 3.0

    def test_coerce(self):
        assert ScalarField.coerce('x1')({'x1': 2.0}) == 2.0
        assert ScalarField.coerce(1.5)({}) == 1.5

    def test_families(self):
        assert ScalarField.parse('x1 + eta2*u1 + t').families() == {'x', 'eta', 'u', 't'}


class TestCoordinateHelpers:
    def test_make_binding(self):
        env = make_binding(x=[1, 2], eta=[3], u=[], t=0.5)
        assert env == {'x1': 1.0, 'x2': 2.0, 'eta1': 3.0, 't': 0.5}

    @pytest.mark.parametrize('name, family', [('x1', 'x'), ('eta12', 'eta'), ('u3', 'u'), ('t', 't'),
                                              ('x0', None), ('y1', None), ('eta', None)])
    def test_variable_family(self, name, family):
        assert variable_family(name) == family

    def test_max_index(self):
        assert max_index(['u1', 'u3', 'x7', 'eta2'], 'u') == 3
        assert max_index(['x1'], 'u') == 0
