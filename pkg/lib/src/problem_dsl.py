"""
Declarative problem definitions for homfem
Parses problem files, equation strings and function expressions; resolves materials and initial conditions
"""

import math
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

try:
    from .config_manager import ConfigManager, SolverConfig, load_jsonc
    from .constraints import EssentialBC, PeriodicBC, PLANE_MATCHERS
    from .discretization import UNBOUND_SOURCE, Variable
    from .errors import ConfigError, DanglingReferenceError, EquationSyntaxError, HomfemError
    from .mesh_io import REGION_KINDS, Region
    from .terms import TERM_TABLE, TermArg, TermCall, check_term_call, stiffness_from_lame, \
        stiffness_from_youngpoisson
except ImportError:
    from config_manager import ConfigManager, SolverConfig, load_jsonc
    from constraints import EssentialBC, PeriodicBC, PLANE_MATCHERS
    from discretization import UNBOUND_SOURCE, Variable
    from errors import ConfigError, DanglingReferenceError, EquationSyntaxError, HomfemError
    from mesh_io import REGION_KINDS, Region
    from terms import TERM_TABLE, TermArg, TermCall, check_term_call, stiffness_from_lame, \
        stiffness_from_youngpoisson


TOP_LEVEL_KEYS = ('mesh', 'regions', 'fields', 'variables', 'materials', 'ebcs', 'epbcs', 'ics',
                  'functions', 'constants', 'integrals', 'equations', 'solvers', 'options',
                  'coefs', 'requirements')


# ==================== Tokenizer ====================

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>\*\*|[-+*/^(),.=])
""", re.VERBOSE)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    pos: int


def tokenize(text: str) -> List[Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise EquationSyntaxError(f"unexpected character '{text[pos]}'", text, pos)
        if m.lastgroup != 'ws':
            tokens.append(Token(m.lastgroup, m.group(), pos))
        pos = m.end()
    tokens.append(Token('end', '', len(text)))
    return tokens


class _Cursor:
    def __init__(self, text: str):
        self.text = text
        self.tokens = tokenize(text)
        self.i = 0

    @property
    def current(self) -> Token:
        return self.tokens[self.i]

    def peek(self, offset: int = 1) -> Token:
        return self.tokens[min(self.i + offset, len(self.tokens) - 1)]

    def advance(self) -> Token:
        token = self.tokens[self.i]
        self.i = min(self.i + 1, len(self.tokens) - 1)
        return token

    def accept(self, text: str) -> bool:
        if self.current.kind == 'op' and self.current.text == text:
            self.advance()
            return True
        return False

    def expect(self, text: str, what: Optional[str] = None) -> Token:
        if self.current.kind == 'op' and self.current.text == text:
            return self.advance()
        found = self.current.text or 'end of input'
        raise EquationSyntaxError(f"expected {what or repr(text)}, found '{found}'",
                                  self.text, self.current.pos)

    def expect_name(self, what: str = 'a name') -> Token:
        if self.current.kind != 'name':
            found = self.current.text or 'end of input'
            raise EquationSyntaxError(f"expected {what}, found '{found}'", self.text, self.current.pos)
        return self.advance()

    def error(self, message: str):
        raise EquationSyntaxError(message, self.text, self.current.pos)


# ==================== Equations ====================

@dataclass(frozen=True)
class EquationTerm:
    sign: int
    coef: Optional[float]
    call: TermCall

    @property
    def factor(self) -> float:
        return self.sign * (1.0 if self.coef is None else self.coef)


@dataclass(frozen=True)
class EquationAst:
    lhs: Tuple[EquationTerm, ...]
    rhs: Tuple[EquationTerm, ...]

    def residual_terms(self) -> List[Tuple[float, TermCall]]:
        """(factor, call) pairs of residual = LHS - RHS."""
        out = [(t.factor, t.call) for t in self.lhs]
        out.extend((-t.factor, t.call) for t in self.rhs)
        return out

    @property
    def calls(self) -> List[TermCall]:
        return [t.call for t in self.lhs + self.rhs]


def _parse_arg(cur: _Cursor) -> TermArg:
    first = cur.expect_name('a term argument')
    if cur.current.text == '.' and cur.current.kind == 'op':
        cur.advance()
        second = cur.expect_name('a material parameter name')
        return TermArg('material', f"{first.text}.{second.text}")
    if cur.current.kind == 'op' and cur.current.text == '/':
        if not first.text.startswith('d') or len(first.text) < 2:
            cur.error(f"time derivative must read 'd<variable>/dt', found '{first.text}/'")
        cur.advance()
        dt = cur.expect_name("'dt'")
        if dt.text != 'dt':
            raise EquationSyntaxError(f"expected 'dt', found '{dt.text}'", cur.text, dt.pos)
        return TermArg('derivative', first.text[1:])
    return TermArg('variable', first.text)


def _parse_call(cur: _Cursor) -> TermCall:
    name = cur.expect_name('a term name')
    if name.text not in TERM_TABLE:
        raise EquationSyntaxError(f"unknown term '{name.text}'", cur.text, name.pos)
    cur.expect('.', "'.' after the term name")
    integral = cur.expect_name('an integral name')
    cur.expect('.', "'.' after the integral name")
    region = cur.expect_name('a region name')
    cur.expect('(', "'(' opening the argument list")
    args = [_parse_arg(cur)]
    while not cur.accept(')'):
        if cur.current.kind == 'end':
            cur.error("unbalanced parentheses: missing ')'")
        cur.expect(',', "',' between arguments")
        args.append(_parse_arg(cur))
    return TermCall(name=name.text, integral=integral.text, region=region.text, args=tuple(args))


def _parse_side(cur: _Cursor, stop: Tuple[str, ...]) -> Tuple[EquationTerm, ...]:
    # Literal zero side
    if cur.current.kind == 'number' and (cur.peek().kind == 'end' or cur.peek().text in stop):
        token = cur.advance()
        if float(token.text) != 0.0:
            raise EquationSyntaxError(f"a side may only be the literal 0, found '{token.text}'",
                                      cur.text, token.pos)
        return ()

    items = []
    first = True
    while True:
        sign = 1
        if cur.accept('-'):
            sign = -1
        elif not cur.accept('+') and not first:
            break
        coef = None
        if cur.current.kind == 'number':
            coef = float(cur.advance().text)
            cur.expect('*', "'*' after a coefficient")
        items.append(EquationTerm(sign, coef, _parse_call(cur)))
        first = False
        if cur.current.kind == 'end' or (cur.current.kind == 'op' and cur.current.text in stop):
            break
        if cur.current.text not in ('+', '-'):
            cur.error(f"unexpected '{cur.current.text}' after a term call")
    return tuple(items)


def parse_equation(text: str) -> EquationAst:
    """Parse "lhs = rhs" where each side is 0 or a signed sum of term calls."""
    cur = _Cursor(text)
    if cur.current.kind == 'end':
        cur.error("empty equation")
    lhs = _parse_side(cur, ('=',))
    cur.expect('=', "'='")
    rhs = _parse_side(cur, ())
    if cur.current.kind != 'end':
        cur.error(f"unexpected '{cur.current.text}' after the equation")
    return EquationAst(lhs=lhs, rhs=rhs)


def parse_term_call(text: str) -> TermCall:
    """Parse a single "term.integral.region(args)" call."""
    cur = _Cursor(text)
    call = _parse_call(cur)
    if cur.current.kind != 'end':
        cur.error(f"unexpected '{cur.current.text}' after the term call")
    return call


def _format_side(items: Sequence[EquationTerm]) -> str:
    if not items:
        return '0'
    parts = []
    for n, item in enumerate(items):
        sign = '-' if item.sign < 0 else ('+' if n else '')
        coef = f"{item.coef!r} * " if item.coef is not None else ''
        text = f"{coef}{item.call}"
        parts.append(f"{sign} {text}" if sign else text)
    return ' '.join(parts)


def format_equation(ast: EquationAst) -> str:
    """Render an equation AST back to text that parses to the same AST."""
    return f"{_format_side(ast.lhs)} = {_format_side(ast.rhs)}"


# ==================== Function expressions ====================

EXPRESSION_FUNCTIONS: Dict[str, Callable] = {
    'sin': np.sin, 'cos': np.cos, 'tan': np.tan, 'exp': np.exp, 'log': np.log,
    'sqrt': np.sqrt, 'abs': np.abs, 'sinh': np.sinh, 'cosh': np.cosh, 'tanh': np.tanh,
}
EXPRESSION_CONSTANTS = {'pi': math.pi, 'e': math.e}
COORDINATE_NAMES = ('x', 'y', 'z')


class Expression:
    """Arithmetic expression over named operands, evaluated element-wise with numpy"""

    def __init__(self, text: str, dotted_names: bool = False):
        self.text = text
        self.dotted_names = dotted_names
        self._cur = _Cursor(text)
        if self._cur.current.kind == 'end':
            self._cur.error("empty expression")
        self.tree = self._sum()
        if self._cur.current.kind != 'end':
            self._cur.error(f"unexpected '{self._cur.current.text}' in expression")
        del self._cur
        self.names = frozenset(self._collect(self.tree))

    # expr := term {(+|-) term}; term := unary {(*|/) unary}
    # unary := (+|-) unary | power; power := atom [(**|^) unary]
    def _sum(self):
        node = self._product()
        while self._cur.current.text in ('+', '-') and self._cur.current.kind == 'op':
            op = self._cur.advance().text
            node = ('bin', op, node, self._product())
        return node

    def _product(self):
        node = self._unary()
        while self._cur.current.text in ('*', '/') and self._cur.current.kind == 'op':
            op = self._cur.advance().text
            node = ('bin', op, node, self._unary())
        return node

    def _unary(self):
        if self._cur.accept('-'):
            return ('neg', self._unary())
        if self._cur.accept('+'):
            return self._unary()
        return self._power()

    def _power(self):
        node = self._atom()
        if self._cur.current.kind == 'op' and self._cur.current.text in ('**', '^'):
            self._cur.advance()
            node = ('bin', '**', node, self._unary())
        return node

    def _atom(self):
        cur = self._cur
        token = cur.current
        if token.kind == 'number':
            cur.advance()
            return ('num', float(token.text))
        if cur.accept('('):
            node = self._sum()
            cur.expect(')', "')'")
            return node
        if token.kind == 'name':
            cur.advance()
            name = token.text
            while self.dotted_names and cur.current.text == '.' and cur.current.kind == 'op':
                cur.advance()
                name += '.' + cur.expect_name('a name after \'.\'').text
            if cur.accept('('):
                if name not in EXPRESSION_FUNCTIONS:
                    raise EquationSyntaxError(f"unknown function '{name}'", self.text, token.pos)
                args = [self._sum()]
                while cur.accept(','):
                    args.append(self._sum())
                cur.expect(')', "')'")
                return ('call', name, tuple(args))
            return ('name', name)
        found = token.text or 'end of input'
        raise EquationSyntaxError(f"unexpected '{found}' in expression", self.text, token.pos)

    def _collect(self, node):
        kind = node[0]
        if kind == 'name':
            if node[1] not in EXPRESSION_CONSTANTS:
                yield node[1]
        elif kind == 'neg':
            yield from self._collect(node[1])
        elif kind == 'bin':
            yield from self._collect(node[2])
            yield from self._collect(node[3])
        elif kind == 'call':
            for arg in node[2]:
                yield from self._collect(arg)

    def evaluate(self, env: Mapping[str, Any]):
        return self._eval(self.tree, env)

    def _eval(self, node, env):
        kind = node[0]
        if kind == 'num':
            return node[1]
        if kind == 'name':
            name = node[1]
            if name in env:
                return env[name]
            if name in EXPRESSION_CONSTANTS:
                return EXPRESSION_CONSTANTS[name]
            if name in COORDINATE_NAMES:
                raise ConfigError(f"expression '{self.text}': coordinate '{name}' is not "
                                  f"available in this mesh")
            raise ConfigError(f"expression '{self.text}': unknown name '{name}'")
        if kind == 'neg':
            return -self._eval(node[1], env)
        if kind == 'call':
            return EXPRESSION_FUNCTIONS[node[1]](*[self._eval(a, env) for a in node[2]])
        _, op, left, right = node
        a = self._eval(left, env)
        b = self._eval(right, env)
        try:
            if op == '+':
                return a + b
            if op == '-':
                return a - b
            if op == '*':
                return a * b
            if op == '/':
                return a / b
            return a ** b
        except ValueError as e:
            raise ConfigError(f"expression '{self.text}': {e}")

    def __repr__(self):
        return f"Expression({self.text!r})"


class FunctionRegistry:
    """Named functions of (coordinates, time): expression strings or registered callables"""

    def __init__(self):
        self._functions: Dict[str, Union[Expression, Callable]] = {}
        self._lock = threading.Lock()

    def register(self, name: str, function: Union[str, Expression, Callable]):
        if isinstance(function, str):
            function = Expression(function)
        if not (isinstance(function, Expression) or callable(function)):
            raise ConfigError(f"function '{name}' must be an expression or a callable")
        with self._lock:
            self._functions[name] = function

    def __contains__(self, name: str) -> bool:
        with self._lock:
            return name in self._functions

    def get(self, name: str):
        with self._lock:
            if name not in self._functions:
                raise ConfigError(f"unregistered function '{name}'")
            return self._functions[name]

    def names(self) -> List[str]:
        with self._lock:
            return sorted(self._functions)

    def copy(self) -> 'FunctionRegistry':
        other = FunctionRegistry()
        with self._lock:
            other._functions = dict(self._functions)
        return other

    def evaluate(self, name: str, coors: np.ndarray, t: float = 0.0,
                 constants: Optional[Mapping[str, float]] = None, **kwargs):
        """Call a function with the full coordinate batch (n_points, dim)."""
        function = self.get(name)
        coors = np.asarray(coors, dtype=np.float64)
        if isinstance(function, Expression):
            env = dict(constants or {})
            env.update({c: coors[:, i] for i, c in enumerate(COORDINATE_NAMES[:coors.shape[1]])})
            env['t'] = t
            value = function.evaluate(env)
            return np.broadcast_to(np.asarray(value, dtype=np.float64), (coors.shape[0],)).copy()
        try:
            return function(coors, t, **kwargs)
        except HomfemError:
            raise
        except Exception as e:
            raise ConfigError(f"function '{name}' failed: {e}")


# ==================== Problem configuration ====================

@dataclass(frozen=True)
class MeshSource:
    filename: Optional[Path] = None
    dims: Optional[Tuple[float, ...]] = None
    shape: Optional[Tuple[int, ...]] = None
    centre: Optional[Tuple[float, ...]] = None
    groups: Tuple[Tuple[int, Tuple[float, ...], Tuple[float, ...]], ...] = ()


@dataclass(frozen=True)
class RegionDef:
    name: str
    selector: str
    kind: Optional[str] = None


@dataclass(frozen=True)
class FieldDef:
    name: str
    n_components: Union[int, str]    # int, 'scalar' or 'vector'
    region: str
    order: int = 1
    dtype: str = 'real'

    def components(self, dim: int) -> int:
        if self.n_components == 'scalar':
            return 1
        if self.n_components == 'vector':
            return dim
        return int(self.n_components)


@dataclass(frozen=True)
class MaterialDef:
    name: str
    values: Tuple[Tuple[str, Any], ...] = ()
    function: Optional[str] = None
    homogenized: Optional[Dict[str, Any]] = field(default=None, hash=False, compare=False)


@dataclass(frozen=True)
class InitialCondition:
    name: str
    region: str
    dofs: Tuple[Tuple[str, Any], ...]


@dataclass(frozen=True)
class Options:
    output_dir: Optional[str] = None
    output_prefix: Optional[str] = None
    save_history: bool = False


@dataclass(eq=False)
class ProblemConfig:
    """Cross-referenced problem definition"""

    path: Optional[Path]
    base_dir: Path
    raw: Dict[str, Any]
    mesh: MeshSource
    regions: Dict[str, RegionDef]
    fields: Dict[str, FieldDef]
    variables: Dict[str, Variable]
    materials: Dict[str, MaterialDef]
    ebcs: Dict[str, EssentialBC]
    epbcs: Dict[str, PeriodicBC]
    ics: Dict[str, InitialCondition]
    functions: FunctionRegistry
    constants: Dict[str, float]
    integrals: Dict[str, int]
    equations: Dict[str, EquationAst]
    solvers: SolverConfig
    options: Options
    coefs: Dict[str, Any]
    requirements: Dict[str, Any]

    @property
    def name(self) -> str:
        return self.path.stem if self.path else 'problem'

    @property
    def has_time_derivative(self) -> bool:
        return any(call.has_time_derivative for eq in self.equations.values() for call in eq.calls)

    @property
    def unknowns(self) -> List[str]:
        unknowns = [v for v in self.variables.values() if v.kind == 'unknown']
        return [v.name for v in sorted(unknowns, key=lambda v: (v.order, v.name))]

    def resolve_path(self, value: str) -> Path:
        path = Path(value)
        return path if path.is_absolute() else self.base_dir / path


def _as_list(value, key_path: str, min_len: int, max_len: int) -> list:
    if isinstance(value, str):
        value = [value]
    if not isinstance(value, (list, tuple)) or not min_len <= len(value) <= max_len:
        raise ConfigError(f"{key_path}: expected a list of {min_len} to {max_len} items")
    return list(value)


def _as_map(data: Dict[str, Any], key: str) -> Dict[str, Any]:
    value = data.get(key, {})
    if not isinstance(value, dict):
        raise ConfigError(f"{key}: expected a map")
    return value


def _parse_mesh(value, key_path: str = 'mesh') -> MeshSource:
    if value is None:
        raise ConfigError("missing mesh source: define 'mesh' with 'filename' or 'generate'")
    if isinstance(value, str):
        value = {'filename': value}
    if not isinstance(value, dict) or len({'filename', 'generate'} & set(value)) != 1:
        raise ConfigError(f"{key_path}: exactly one of 'filename' or 'generate' is required")
    if 'filename' in value:
        return MeshSource(filename=Path(value['filename']))
    gen = value['generate']
    try:
        dims = tuple(float(v) for v in gen['dims'])
        shape = tuple(int(v) for v in gen['shape'])
        centre = tuple(float(v) for v in gen.get('centre', [0.5 * d for d in dims]))
        groups = []
        for n, group in enumerate(gen.get('groups', [])):
            box = group['box']
            groups.append((int(group['id']), tuple(float(v) for v in box[0]),
                           tuple(float(v) for v in box[1])))
    except (KeyError, TypeError, ValueError, IndexError) as e:
        raise ConfigError(f"{key_path}.generate: malformed block mesh spec ({e})")
    return MeshSource(dims=dims, shape=shape, centre=centre, groups=tuple(groups))


def _parse_variable(name: str, value, position: int) -> Variable:
    key_path = f"variables.{name}"
    items = _as_list(value, key_path, 2, 4)
    kind = str(items[0]).replace(' field', '')
    try:
        if kind == 'unknown':
            order = int(items[2]) if len(items) > 2 else position
            history = int(items[3]) if len(items) > 3 else 0
            return Variable(name=name, kind='unknown', field=items[1], order=order, history=history)
        if kind == 'test':
            if len(items) < 3:
                raise ConfigError("test variables must name their unknown")
            return Variable(name=name, kind='test', field=items[1], primary=items[2])
        if kind == 'parameter':
            source = items[2] if len(items) > 2 else UNBOUND_SOURCE
            return Variable(name=name, kind='parameter', field=items[1], source=source)
    except HomfemError as e:
        raise ConfigError(f"{key_path}: {e.message}")
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key_path}: {e}")
    raise ConfigError(f"{key_path}: unknown variable kind '{items[0]}'")


def _parse_dof_map(value, key_path: str) -> Tuple[Tuple[str, Any], ...]:
    if not isinstance(value, dict) or not value:
        raise ConfigError(f"{key_path}: expected a non-empty map of DOF specs")
    return tuple(value.items())


def parse_problem_data(data: Dict[str, Any], base_dir: Path = Path('.'), path: Optional[Path] = None,
                       registry: Optional[FunctionRegistry] = None) -> ProblemConfig:
    """Build and cross-check a ProblemConfig from already loaded data."""
    unknown = sorted(set(data) - set(TOP_LEVEL_KEYS))
    if unknown:
        raise ConfigError(f"unknown top-level key '{unknown[0]}'")

    mesh = _parse_mesh(data.get('mesh'))

    regions = {}
    for name, value in _as_map(data, 'regions').items():
        items = _as_list(value, f"regions.{name}", 1, 2)
        kind = items[1] if len(items) > 1 else None
        if kind is not None and kind not in REGION_KINDS:
            raise ConfigError(f"regions.{name}: unknown region kind '{kind}'")
        regions[name] = RegionDef(name=name, selector=str(items[0]), kind=kind)

    fields = {}
    for name, value in _as_map(data, 'fields').items():
        items = _as_list(value, f"fields.{name}", 3, 4)
        n_comp = items[1]
        if not (n_comp in ('scalar', 'vector') or isinstance(n_comp, int)):
            raise ConfigError(f"fields.{name}: components must be an integer, 'scalar' or 'vector'")
        order = int(items[3]) if len(items) > 3 else 1
        fields[name] = FieldDef(name=name, n_components=n_comp, region=items[2], order=order,
                                dtype=str(items[0]))

    variables = {}
    for name, value in _as_map(data, 'variables').items():
        # Unknowns without an explicit position follow declaration order
        position = sum(1 for v in variables.values() if v.kind == 'unknown')
        variables[name] = _parse_variable(name, value, position)

    materials = {}
    for name, value in _as_map(data, 'materials').items():
        if isinstance(value, str):
            materials[name] = MaterialDef(name=name, function=value)
        elif isinstance(value, dict) and set(value) == {'homogenized'}:
            materials[name] = MaterialDef(name=name, homogenized=dict(value['homogenized']))
        elif isinstance(value, dict):
            materials[name] = MaterialDef(name=name, values=tuple(value.items()))
        else:
            raise ConfigError(f"materials.{name}: expected a parameter map or a function name")

    ebcs = {}
    for name, value in _as_map(data, 'ebcs').items():
        items = _as_list(value, f"ebcs.{name}", 2, 2)
        ebcs[name] = EssentialBC(name=name, region=items[0],
                                 dofs=_parse_dof_map(items[1], f"ebcs.{name}"))

    epbcs = {}
    for name, value in _as_map(data, 'epbcs').items():
        items = _as_list(value, f"epbcs.{name}", 3, 4)
        pair = _as_list(items[0], f"epbcs.{name}", 2, 2)
        match = items[2]
        translation = None
        if isinstance(match, (list, tuple)):
            translation = tuple(float(v) for v in match)
            match = 'match_coors'
        elif match not in PLANE_MATCHERS:
            raise ConfigError(f"epbcs.{name}: unknown matching '{match}'")
        tol = float(items[3]) if len(items) > 3 else None
        epbcs[name] = PeriodicBC(name=name, master=pair[0], slave=pair[1],
                                 dofs=_parse_dof_map(items[1], f"epbcs.{name}"), match=match,
                                 translation=translation, tol=tol)

    ics = {}
    for name, value in _as_map(data, 'ics').items():
        items = _as_list(value, f"ics.{name}", 2, 2)
        ics[name] = InitialCondition(name=name, region=items[0],
                                     dofs=_parse_dof_map(items[1], f"ics.{name}"))

    constants = {}
    for name, value in _as_map(data, 'constants').items():
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"constants.{name}: expected a number")
        constants[name] = float(value)

    functions = registry.copy() if registry is not None else FunctionRegistry()
    for name, value in _as_map(data, 'functions').items():
        text = value[0] if isinstance(value, list) and len(value) == 1 else value
        if not isinstance(text, str):
            raise ConfigError(f"functions.{name}: expected an expression string")
        functions.register(name, Expression(text))
    allowed = set(COORDINATE_NAMES) | {'t'} | set(constants)
    for name in _as_map(data, 'functions'):
        function = functions.get(name)
        missing = sorted(function.names - allowed)
        if missing:
            raise DanglingReferenceError(f"functions.{name}", missing[0], 'constant')

    integrals = {}
    for name, value in _as_map(data, 'integrals').items():
        order = value[0] if isinstance(value, list) else value
        if not isinstance(order, int) or order < 1:
            raise ConfigError(f"integrals.{name}: order must be a positive integer")
        integrals[name] = order

    equations = {}
    for name, text in _as_map(data, 'equations').items():
        if not isinstance(text, str):
            raise ConfigError(f"equations.{name}: expected an equation string")
        try:
            equations[name] = parse_equation(text)
        except EquationSyntaxError as e:
            raise EquationSyntaxError(f"equations.{name}: {e.detail}", text, e.position)

    manager = ConfigManager(_as_map(data, 'solvers'))
    options_raw = _as_map(data, 'options')
    unknown_opts = sorted(set(options_raw) - {'output_dir', 'output_prefix', 'save_history'})
    if unknown_opts:
        raise ConfigError(f"options: unknown option '{unknown_opts[0]}'")
    options = Options(output_dir=options_raw.get('output_dir'),
                      output_prefix=options_raw.get('output_prefix'),
                      save_history=bool(options_raw.get('save_history', False)))

    config = ProblemConfig(path=path, base_dir=base_dir, raw=data, mesh=mesh, regions=regions,
                           fields=fields, variables=variables, materials=materials, ebcs=ebcs,
                           epbcs=epbcs, ics=ics, functions=functions, constants=constants,
                           integrals=integrals, equations=equations,
                           solvers=manager.solver_config(), options=options,
                           coefs=_as_map(data, 'coefs'), requirements=_as_map(data, 'requirements'))
    validate_references(config)
    return config


def parse_problem(path: Union[str, Path], registry: Optional[FunctionRegistry] = None) -> ProblemConfig:
    """Load and cross-reference a problem file."""
    path = Path(path)
    data = load_jsonc(path)
    return parse_problem_data(data, base_dir=path.parent, path=path, registry=registry)


# ==================== Reference checks ====================

def _check_function(config: ProblemConfig, key_path: str, value):
    if isinstance(value, str) and value not in config.functions:
        raise DanglingReferenceError(key_path, value, 'function')


def _check_dof_specs(config: ProblemConfig, key_path: str, dofs, allow_values: bool = True):
    for spec, value in dofs:
        var = spec.partition('.')[0]
        if var not in config.variables:
            raise DanglingReferenceError(key_path, var, 'variable')
        if allow_values:
            _check_function(config, key_path, value)


def check_equation(config: ProblemConfig, key_path: str, ast: EquationAst,
                   extra_variables: Sequence[str] = ()):
    """Every integral, region, material and variable named by the equation exists."""
    for call in ast.calls:
        try:
            check_term_call(call)
        except HomfemError as e:
            raise ConfigError(f"{key_path}: {e.message}")
        if call.integral not in config.integrals:
            raise DanglingReferenceError(key_path, call.integral, 'integral')
        if call.region not in config.regions:
            raise DanglingReferenceError(key_path, call.region, 'region')
        for arg in call.args:
            if arg.kind == 'material':
                if arg.name.partition('.')[0] not in config.materials:
                    raise DanglingReferenceError(key_path, arg.name.partition('.')[0], 'material')
            elif arg.name not in config.variables and arg.name not in extra_variables:
                raise DanglingReferenceError(key_path, arg.name, 'variable')
            elif arg.kind == 'derivative' and config.variables[arg.name].kind != 'unknown':
                raise ConfigError(f"{key_path}: time derivative of non-unknown '{arg.name}'")


def validate_references(config: ProblemConfig):
    """Report the first dangling reference with its key path."""
    for name, fdef in config.fields.items():
        if fdef.region not in config.regions:
            raise DanglingReferenceError(f"fields.{name}", fdef.region, 'region')
    for name, var in config.variables.items():
        key_path = f"variables.{name}"
        if var.field not in config.fields:
            raise DanglingReferenceError(key_path, var.field, 'field')
        if var.kind == 'test':
            primary = config.variables.get(var.primary)
            if primary is None or primary.kind != 'unknown':
                raise DanglingReferenceError(key_path, var.primary, 'unknown variable')
        if var.kind == 'parameter' and var.source != UNBOUND_SOURCE:
            source = config.variables.get(var.source)
            if source is None or source.kind != 'unknown':
                raise DanglingReferenceError(key_path, var.source, 'unknown variable')
    for name, mat in config.materials.items():
        if mat.function is not None:
            _check_function(config, f"materials.{name}", mat.function)
        for param, value in mat.values:
            _check_material_value(config, f"materials.{name}.{param}", value)
    for name, bc in config.ebcs.items():
        if bc.region not in config.regions:
            raise DanglingReferenceError(f"ebcs.{name}", bc.region, 'region')
        _check_dof_specs(config, f"ebcs.{name}", bc.dofs)
    for name, bc in config.epbcs.items():
        for region in (bc.master, bc.slave):
            if region not in config.regions:
                raise DanglingReferenceError(f"epbcs.{name}", region, 'region')
        for master_spec, slave_spec in bc.dofs:
            for spec in (master_spec, slave_spec):
                if spec.partition('.')[0] not in config.variables:
                    raise DanglingReferenceError(f"epbcs.{name}", spec.partition('.')[0], 'variable')
    for name, ic in config.ics.items():
        if ic.region not in config.regions:
            raise DanglingReferenceError(f"ics.{name}", ic.region, 'region')
        _check_dof_specs(config, f"ics.{name}", ic.dofs)
    for name, ast in config.equations.items():
        check_equation(config, f"equations.{name}", ast)


def _check_material_value(config: ProblemConfig, key_path: str, value):
    if isinstance(value, str):
        _check_function(config, key_path, value)
    elif isinstance(value, dict) and not set(value) & set(MATERIAL_HELPERS):
        for region, sub in value.items():
            if region not in config.regions:
                raise DanglingReferenceError(key_path, region, 'region')
            _check_material_value(config, f"{key_path}.{region}", sub)


# ==================== Materials and initial conditions ====================

def _helper_stiffness_yp(args, dim: int) -> np.ndarray:
    if isinstance(args, dict):
        return stiffness_from_youngpoisson(int(args.get('dim', dim)), float(args['E']),
                                           float(args['nu']), args.get('plane', 'strain'))
    return stiffness_from_youngpoisson(*args)


def _helper_stiffness_lame(args, dim: int) -> np.ndarray:
    if isinstance(args, dict):
        return stiffness_from_lame(int(args.get('dim', dim)), float(args['lam']), float(args['mu']))
    return stiffness_from_lame(*args)


MATERIAL_HELPERS = {
    'stiffness_from_youngpoisson': _helper_stiffness_yp,
    'stiffness_from_lame': _helper_stiffness_lame,
}


def _resolve_value(config: ProblemConfig, key_path: str, value, t: float, coors: np.ndarray,
                   cells: Optional[np.ndarray], regions: Optional[Mapping[str, Region]]) -> np.ndarray:
    """Values at the points of `coors` (n_cells, n_qp, dim)."""
    n_cells, n_qp, dim = coors.shape
    if isinstance(value, (int, float, list)) and not isinstance(value, bool):
        arr = np.asarray(value, dtype=np.float64)
        return np.broadcast_to(arr, (n_cells, n_qp) + arr.shape)
    if isinstance(value, str):
        flat = np.asarray(config.functions.evaluate(value, coors.reshape((-1, dim)), t, config.constants))
        if flat.shape[0] != n_cells * n_qp:
            raise ConfigError(f"{key_path}: function '{value}' returned {flat.shape[0]} values "
                              f"for {n_cells * n_qp} points")
        return flat.reshape((n_cells, n_qp) + flat.shape[1:])
    if isinstance(value, dict):
        helpers = set(value) & set(MATERIAL_HELPERS)
        if helpers:
            name = helpers.pop()
            try:
                arr = MATERIAL_HELPERS[name](value[name], dim)
            except (KeyError, TypeError, ValueError) as e:
                raise ConfigError(f"{key_path}: bad {name} arguments ({e})")
            return np.broadcast_to(arr, (n_cells, n_qp) + arr.shape)
        if cells is None or regions is None:
            raise ConfigError(f"{key_path}: per-region values need the cell regions")
        parts = {}
        owner = np.full(n_cells, -1, dtype=np.int64)
        for n, (region_name, sub) in enumerate(value.items()):
            region = regions[region_name]
            inside = np.isin(cells, region.cells) & (owner < 0)
            owner[inside] = n
            parts[n] = _resolve_value(config, f"{key_path}.{region_name}", sub, t, coors, cells, regions)
        if np.any(owner < 0):
            raise ConfigError(f"{key_path}: cells {cells[owner < 0][:5].tolist()} are in none of "
                              f"the regions {list(value)}")
        shapes = {p.shape[2:] for p in parts.values()}
        if len(shapes) != 1:
            raise ConfigError(f"{key_path}: per-region values have different shapes {sorted(shapes)}")
        out = np.empty((n_cells, n_qp) + shapes.pop())
        for n, part in parts.items():
            out[owner == n] = part[owner == n]
        return out
    raise ConfigError(f"{key_path}: unsupported material value {value!r}")


def resolve_materials(config: ProblemConfig, t: float, qp_coors: np.ndarray,
                      cells: Optional[np.ndarray] = None,
                      regions: Optional[Mapping[str, Region]] = None,
                      names: Optional[Sequence[str]] = None) -> Dict[str, np.ndarray]:
    """Evaluate material parameters at quadrature points.

    Args:
        qp_coors: (n_cells, n_qp, dim) physical quadrature point coordinates
        cells: global ids of the cells, for per-region values
        names: materials to resolve (all when None)

    Returns:
        "material.parameter" -> array (n_cells, n_qp, ...)
    """
    qp_coors = np.asarray(qp_coors, dtype=np.float64)
    n_cells, n_qp, dim = qp_coors.shape
    out: Dict[str, np.ndarray] = {}
    for name in (names if names is not None else config.materials):
        if name not in config.materials:
            raise ConfigError(f"unknown material '{name}'")
        mat = config.materials[name]
        if mat.homogenized is not None:
            try:
                from .homogenization import homogenized_material
            except ImportError:
                from homogenization import homogenized_material
            values = homogenized_material(config, mat, n_cells * n_qp)
        elif mat.function is not None:
            values = config.functions.evaluate(mat.function, qp_coors.reshape((-1, dim)), t,
                                               config.constants, mode='qp')
            if not isinstance(values, dict):
                raise ConfigError(f"materials.{name}: function '{mat.function}' must return a "
                                  f"parameter map")
        else:
            values = {param: _resolve_value(config, f"materials.{name}.{param}", value, t,
                                            qp_coors, cells, regions)
                      for param, value in mat.values}
        for param, value in values.items():
            arr = np.asarray(value, dtype=np.float64)
            if arr.ndim and arr.shape[0] == n_cells * n_qp and arr.shape[:2] != (n_cells, n_qp):
                arr = arr.reshape((n_cells, n_qp) + arr.shape[1:])
            elif arr.shape[:2] != (n_cells, n_qp):
                arr = np.broadcast_to(arr, (n_cells, n_qp) + arr.shape)
            out[f"{name}.{param}"] = arr
    return out


def resolve_ics(config: ProblemConfig, variable: str, node_coors: np.ndarray, n_components: int,
                region_nodes: Optional[Mapping[str, np.ndarray]] = None, t: float = 0.0) -> np.ndarray:
    """Initial DOF vector of one unknown by nodal interpolation; zero where no IC applies.

    Args:
        node_coors: (n_nodes, dim) coordinates of the variable's field nodes
        region_nodes: IC region name -> node ids (all nodes when missing)
    """
    node_coors = np.asarray(node_coors, dtype=np.float64)
    n_nodes = node_coors.shape[0]
    u0 = np.zeros((n_nodes, n_components))
    for name, ic in config.ics.items():
        for spec, value in ic.dofs:
            var, _, comp = spec.partition('.')
            if var != variable:
                continue
            comps = range(n_components) if comp in ('all', '') else [int(comp)]
            nodes = (region_nodes or {}).get(ic.region, np.arange(n_nodes))
            if isinstance(value, str):
                vals = np.asarray(config.functions.evaluate(value, node_coors[nodes], t, config.constants))
                if vals.shape[0] != nodes.shape[0]:
                    raise ConfigError(f"ics.{name}: function '{value}' returned {vals.shape[0]} "
                                      f"values for {nodes.shape[0]} nodes")
            else:
                vals = np.full(nodes.shape[0], float(value))
            for c in comps:
                u0[nodes, c] = vals if vals.ndim == 1 else vals[:, c]
    return u0.reshape(-1)
