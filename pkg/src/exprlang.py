import math
import re
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

FUNCTIONS = ('sin', 'cos', 'tan', 'exp', 'log', 'sqrt', 'abs')
BINARY_OPS = ('add', 'sub', 'mul', 'div', 'pow')

_TOKEN_RE = re.compile(r'''
    (?P<ws>\s+)
  | (?P<number>\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[-+*/^()])
''', re.VERBOSE)

_SYMBOLS = {'add': '+', 'sub': '-', 'mul': '*', 'div': '/', 'pow': '^'}

Binding = Mapping[str, float]


class ParseError(ValueError):
    """
    Raised when a source string does not follow the expression grammar.

    Attributes:
        offset (int): Byte offset of the offending token in the UTF-8 source.
        expected (str): Description of what the parser expected at that point.
    """
    def __init__(self, message: str, offset: int, expected: str = '') -> None:
        super().__init__(f'{message} at byte {offset}' + (f', expected {expected}' if expected else ''))
        self.offset = offset
        self.expected = expected


class EvaluationError(ArithmeticError):
    pass


class UnboundVariableError(EvaluationError):
    def __init__(self, name: str) -> None:
        super().__init__(f"variable '{name}' is not bound")
        self.name = name


class DomainError(EvaluationError):
    """
    Raised when an operation is evaluated outside its domain (log of a non-positive
    number, division by zero, ...). `subexpression` is the rendered offending node.
    """
    def __init__(self, reason: str, subexpression: str) -> None:
        super().__init__(f'{reason} in {subexpression}')
        self.reason = reason
        self.subexpression = subexpression


@dataclass(frozen=True)
class Constant:
    value: float


@dataclass(frozen=True)
class Variable:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str
    operand: 'Node'


@dataclass(frozen=True)
class Binary:
    op: str
    left: 'Node'
    right: 'Node'


Node = Constant | Variable | Unary | Binary


def _collect_variables(node: Node, found: list) -> list:
    if isinstance(node, Variable):
        if node.name not in found:
            found.append(node.name)
    elif isinstance(node, Unary):
        _collect_variables(node.operand, found)
    elif isinstance(node, Binary):
        _collect_variables(node.left, found)
        _collect_variables(node.right, found)
    return found


@dataclass(frozen=True)
class ExpressionTree:
    """
    Immutable parsed expression. `free_variables` lists the variable names in order
    of first appearance.
    """
    root: Node
    free_variables: tuple

    @classmethod
    def from_root(cls, root: Node) -> 'ExpressionTree':
        return cls(root, tuple(_collect_variables(root, [])))

    @cached_property
    def _value_fn(self) -> Callable:
        return _compile_value(self.root)

    @cached_property
    def _dual_fn(self) -> Callable:
        return _compile_dual(self.root)

    def __str__(self) -> str:
        return render(self)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

class _Parser:
    """
    Recursive descent parser over the token list, one method per grammar rule.
    """
    def __init__(self, source: str) -> None:
        self.source = source
        self.tokens = self._tokenize(source)
        self.index = 0

    def _byte_offset(self, pos: int) -> int:
        return len(self.source[:pos].encode('utf-8'))

    def _tokenize(self, source: str) -> list:
        tokens = []
        pos = 0
        while pos < len(source):
            match = _TOKEN_RE.match(source, pos)
            if match is None:
                raise ParseError(f'unexpected character {source[pos]!r}', self._byte_offset(pos),
                                 'a number, identifier, operator or parenthesis')
            kind = match.lastgroup
            if kind != 'ws':
                tokens.append((kind, match.group(), pos))
            pos = match.end()
        tokens.append(('end', '', len(source)))
        return tokens

    @property
    def token(self) -> tuple:
        return self.tokens[self.index]

    def _fail(self, expected: str) -> None:
        kind, text, pos = self.token
        what = 'end of input' if kind == 'end' else f'unexpected {text!r}'
        raise ParseError(what, self._byte_offset(pos), expected)

    def _accept(self, text: str) -> bool:
        if self.token[0] == 'op' and self.token[1] == text:
            self.index += 1
            return True
        return False

    def parse(self) -> Node:
        node = self.expr()
        if self.token[0] != 'end':
            self._fail('an operator or end of input')
        return node

    def expr(self) -> Node:
        node = self.term()
        while True:
            if self._accept('+'):
                node = Binary('add', node, self.term())
            elif self._accept('-'):
                node = Binary('sub', node, self.term())
            else:
                return node

    def term(self) -> Node:
        node = self.factor()
        while True:
            if self._accept('*'):
                node = Binary('mul', node, self.factor())
            elif self._accept('/'):
                node = Binary('div', node, self.factor())
            else:
                return node

    def factor(self) -> Node:
        if self._accept('-'):
            return Unary('neg', self.factor())
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self._accept('^'):
            # exponent is a factor, so 2^3^2 == 2^(3^2) and 2^-1 parses
            return Binary('pow', base, self.factor())
        return base

    def atom(self) -> Node:
        kind, text, pos = self.token
        if kind == 'number':
            self.index += 1
            return Constant(float(text))
        if kind == 'ident':
            self.index += 1
            if self.token[0] == 'op' and self.token[1] == '(':
                if text not in FUNCTIONS:
                    raise ParseError(f"unknown function '{text}'", self._byte_offset(pos),
                                     'one of ' + ', '.join(FUNCTIONS))
                self.index += 1
                arg = self.expr()
                if not self._accept(')'):
                    self._fail('")"')
                return Unary(text, arg)
            if text in FUNCTIONS:
                self._fail(f'"(" after function name {text!r}')
            return Variable(text)
        if self._accept('('):
            node = self.expr()
            if not self._accept(')'):
                self._fail('")"')
            return node
        self._fail('a number, identifier or "("')


def parse(source: str) -> ExpressionTree:
    """
    Parse a source string into an expression tree.

    Args:
        source (str): Expression in the grammar documented in the README.

    Returns:
        ExpressionTree: The parsed tree with its free-variable set.

    Raises:
        ParseError: On a syntax error or an unknown function name.
    """
    return ExpressionTree.from_root(_Parser(source).parse())


def render(tree: ExpressionTree | Node) -> str:
    """
    Render a tree back to source. The output is fully parenthesized and re-parses to
    a structurally identical tree for every tree built by parse or ScalarField.
    """
    node = tree.root if isinstance(tree, ExpressionTree) else tree
    if isinstance(node, Constant):
        if math.copysign(1.0, node.value) < 0.0:
            return f'(-{-node.value!r})'
        return repr(node.value)
    if isinstance(node, Variable):
        return node.name
    if isinstance(node, Unary):
        if node.op == 'neg':
            return f'(-{render(node.operand)})'
        return f'{node.op}({render(node.operand)})'
    return f'({render(node.left)} {_SYMBOLS[node.op]} {render(node.right)})'


# ---------------------------------------------------------------------------
# Evaluation: plain values and forward-mode dual numbers
# ---------------------------------------------------------------------------

def _apply_unary(op: str, a: float, node: Node) -> float:
    if op == 'neg':
        return -a
    if op == 'log' and a <= 0.0:
        raise DomainError('log of non-positive value', render(node))
    if op == 'sqrt' and a < 0.0:
        raise DomainError('sqrt of negative value', render(node))
    try:
        return _UNARY_VALUE[op](a)
    except (OverflowError, ValueError) as err:
        raise DomainError(str(err), render(node)) from None


def _apply_binary(op: str, a: float, b: float, node: Node) -> float:
    if op == 'add':
        return a + b
    if op == 'sub':
        return a - b
    if op == 'mul':
        return a * b
    if op == 'div':
        if b == 0.0:
            raise DomainError('division by zero', render(node))
        return a / b
    if a < 0.0 and not float(b).is_integer():
        raise DomainError('negative base with non-integer exponent', render(node))
    if a == 0.0 and b < 0.0:
        raise DomainError('division by zero', render(node))
    try:
        return a ** b
    except OverflowError as err:
        raise DomainError(str(err), render(node)) from None


_UNARY_VALUE = {
    'sin': math.sin,
    'cos': math.cos,
    'tan': math.tan,
    'exp': math.exp,
    'log': math.log,
    'sqrt': math.sqrt,
    'abs': abs,
}

# derivative of each function with respect to its argument
_UNARY_SLOPE = {
    'sin': math.cos,
    'cos': lambda a: -math.sin(a),
    'tan': lambda a: 1.0 / math.cos(a) ** 2,
    'exp': math.exp,
    'log': lambda a: 1.0 / a,
    'abs': lambda a: math.copysign(1.0, a) if a != 0.0 else 0.0,
}


def _compile_value(node: Node) -> Callable:
    if isinstance(node, Constant):
        value = node.value
        return lambda env: value
    if isinstance(node, Variable):
        name = node.name

        def lookup(env):
            try:
                return float(env[name])
            except KeyError:
                raise UnboundVariableError(name) from None
        return lookup
    if isinstance(node, Unary):
        inner = _compile_value(node.operand)
        op = node.op
        return lambda env: _apply_unary(op, inner(env), node)
    left, right = _compile_value(node.left), _compile_value(node.right)
    op = node.op
    return lambda env: _apply_binary(op, left(env), right(env), node)


def _compile_dual(node: Node) -> Callable:
    """
    Compile a node into a function (env, seeds, zero) -> (value, tangent) where
    tangent is a numpy vector holding the derivatives along the seeded variables.
    """
    if isinstance(node, Constant):
        value = node.value
        return lambda env, seeds, zero: (value, zero)
    if isinstance(node, Variable):
        lookup = _compile_value(node)
        name = node.name
        return lambda env, seeds, zero: (lookup(env), seeds.get(name, zero))
    if isinstance(node, Unary):
        inner = _compile_dual(node.operand)
        op = node.op

        def unary(env, seeds, zero):
            a, da = inner(env, seeds, zero)
            value = _apply_unary(op, a, node)
            if op == 'neg':
                return value, -da
            if op == 'sqrt':
                if a == 0.0 and da.any():
                    raise DomainError('derivative of sqrt at zero', render(node))
                return value, da * (0.5 / value) if a != 0.0 else zero
            return value, da * _UNARY_SLOPE[op](a)
        return unary

    left, right = _compile_dual(node.left), _compile_dual(node.right)
    op = node.op

    def binary(env, seeds, zero):
        a, da = left(env, seeds, zero)
        b, db = right(env, seeds, zero)
        value = _apply_binary(op, a, b, node)
        if op == 'add':
            return value, da + db
        if op == 'sub':
            return value, da - db
        if op == 'mul':
            return value, da * b + db * a
        if op == 'div':
            return value, (da * b - db * a) / (b * b)
        # pow
        tangent = zero
        if da.any() and b != 0.0:
            tangent = da * (b * _apply_binary('pow', a, b - 1.0, node))
        if db.any():
            if a > 0.0:
                tangent = tangent + db * (value * math.log(a))
            elif a < 0.0:
                raise DomainError('derivative of pow in the exponent for a negative base', render(node))
        return value, tangent
    return binary


def _check_finite(value: float, tree: ExpressionTree) -> float:
    if not math.isfinite(value):
        raise DomainError('non-finite result', render(tree))
    return value


def evaluate(tree: ExpressionTree, env: Binding) -> float:
    """
    Evaluate a tree at a binding.

    Args:
        tree (ExpressionTree): Tree to evaluate.
        env (Binding): Values of the free variables.

    Returns:
        float: The value.

    Raises:
        UnboundVariableError: If a free variable is missing from env.
        DomainError: On log(0), 1/0 and the like.
    """
    return _check_finite(tree._value_fn(env), tree)


def _forward(tree: ExpressionTree, names: Sequence[str], env: Binding) -> tuple:
    k = len(names)
    eye = np.eye(k)
    seeds = {name: eye[i] for i, name in enumerate(names)}
    value, tangent = tree._dual_fn(env, seeds, np.zeros(k))
    _check_finite(value, tree)
    tangent = np.array(tangent, dtype=float)
    if not np.all(np.isfinite(tangent)):
        raise DomainError('non-finite derivative', render(tree))
    return value, tangent


def derivative(tree: ExpressionTree, var: str, env: Binding) -> float:
    """
    Exact forward-mode derivative of tree with respect to var at env. Returns 0 when
    var does not occur in the tree.
    """
    if var not in env:
        raise UnboundVariableError(var)
    return float(_forward(tree, (var,), env)[1][0])


def gradient(tree: ExpressionTree, names: Sequence[str], env: Binding) -> np.ndarray:
    """
    Derivatives with respect to each name, in one forward pass with vector tangents.

    Args:
        tree (ExpressionTree): Tree to differentiate.
        names (Sequence[str]): Variables to differentiate against.
        env (Binding): Values of the free variables.

    Returns:
        np.ndarray: Vector with len(names) entries.
    """
    for name in names:
        if name not in env:
            raise UnboundVariableError(name)
    return _forward(tree, tuple(names), env)[1]


def value_and_gradient(tree: ExpressionTree, names: Sequence[str], env: Binding) -> tuple:
    for name in names:
        if name not in env:
            raise UnboundVariableError(name)
    value, tangent = _forward(tree, tuple(names), env)
    return value, tangent


# ---------------------------------------------------------------------------
# Scalar fields and coordinate conventions
# ---------------------------------------------------------------------------

def coordinate_names(prefix: str, count: int) -> tuple:
    """
    Reserved variable names: coordinate_names('eta', 3) -> ('eta1', 'eta2', 'eta3').
    """
    return tuple(f'{prefix}{k + 1}' for k in range(count))


def make_binding(x: Iterable = (), eta: Iterable = (), u: Iterable = (), t: float | None = None) -> dict:
    env = {}
    for prefix, values in (('x', x), ('eta', eta), ('u', u)):
        for k, value in enumerate(values):
            env[f'{prefix}{k + 1}'] = float(value)
    if t is not None:
        env['t'] = float(t)
    return env


def variable_family(name: str) -> str | None:
    """
    Return 'x', 'eta', 'u' or 't' for a reserved variable name, None otherwise.
    """
    if name == 't':
        return 't'
    match = re.fullmatch(r'(x|eta|u)([1-9][0-9]*)', name)
    return match.group(1) if match else None


def max_index(names: Iterable[str], family: str) -> int:
    highest = 0
    for name in names:
        match = re.fullmatch(rf'{family}([1-9][0-9]*)', name)
        if match:
            highest = max(highest, int(match.group(1)))
    return highest


class ScalarField:
    """
    A differentiable real-valued function of (x, eta, u, t) backed by an expression
    tree. Fields combine with +, -, * and unary minus into new fields.
    """
    def __init__(self, tree: ExpressionTree) -> None:
        self.tree = tree

    @classmethod
    def parse(cls, source: str) -> 'ScalarField':
        return cls(parse(source))

    @classmethod
    def constant(cls, value: float) -> 'ScalarField':
        value = float(value)
        # negatives are stored the way the parser reads them, as neg(|value|)
        if math.copysign(1.0, value) < 0.0:
            return cls(ExpressionTree.from_root(Unary('neg', Constant(-value))))
        return cls(ExpressionTree.from_root(Constant(value)))

    @classmethod
    def variable(cls, name: str) -> 'ScalarField':
        return cls(ExpressionTree.from_root(Variable(name)))

    @classmethod
    def coerce(cls, value: 'ScalarField | str | float') -> 'ScalarField':
        if isinstance(value, ScalarField):
            return value
        if isinstance(value, str):
            return cls.parse(value)
        return cls.constant(value)

    @property
    def variables(self) -> tuple:
        return self.tree.free_variables

    @property
    def source(self) -> str:
        return render(self.tree)

    def families(self) -> set:
        return {variable_family(name) for name in self.variables}

    def __call__(self, env: Binding) -> float:
        return evaluate(self.tree, env)

    def derivative(self, var: str, env: Binding) -> float:
        return derivative(self.tree, var, env)

    def gradient(self, names: Sequence[str], env: Binding) -> np.ndarray:
        return gradient(self.tree, names, env)

    def value_and_gradient(self, names: Sequence[str], env: Binding) -> tuple:
        return value_and_gradient(self.tree, names, env)

    def _combine(self, op: str, other, swap: bool = False) -> 'ScalarField':
        other = ScalarField.coerce(other)
        left, right = (other.tree.root, self.tree.root) if swap else (self.tree.root, other.tree.root)
        return ScalarField(ExpressionTree.from_root(Binary(op, left, right)))

    def __add__(self, other):
        return self._combine('add', other)

    def __radd__(self, other):
        return self._combine('add', other, swap=True)

    def __sub__(self, other):
        return self._combine('sub', other)

    def __rsub__(self, other):
        return self._combine('sub', other, swap=True)

    def __mul__(self, other):
        return self._combine('mul', other)

    def __rmul__(self, other):
        return self._combine('mul', other, swap=True)

    def __neg__(self):
        return ScalarField(ExpressionTree.from_root(Unary('neg', self.tree.root)))

    def __repr__(self) -> str:
        return f'ScalarField({self.source!r})'
