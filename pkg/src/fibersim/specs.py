"""Parsing and validation of the five declarative sections of a workload spec.

A spec document is a restricted YAML subset with top-level keys `einsum`,
`mapping`, `format`, `architecture`, `binding`, plus optional `operators`
and `parameters`.  The einsum and mapping sections mirror the published
accelerator descriptions closely enough that those descriptions are usable
verbatim as fixtures.

Subscript variables are positional: `R[v]` binds variable V to R's single
declared rank whatever that rank is named.  Variables are normalized to
upper case internally and printed lower case.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional, Union

import yaml

from .formats import RankFormat


class SpecError(Exception):
    """Raised for malformed spec documents (syntax or unresolvable references)."""


# ---------------------------------------------------------------------------
# Expression AST


@dataclass(frozen=True)
class Var:
    name: str

    def render(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class AffineSum:
    """Sum of two loop variables used as a subscript, e.g. I[q+s]."""

    left: str
    right: str

    def render(self) -> str:
        return f"{self.left.lower()} + {self.right.lower()}"


Subscript = Union[Var, AffineSum]


@dataclass(frozen=True)
class TensorRef:
    tensor: str
    subscripts: tuple

    def render(self) -> str:
        if not self.subscripts:
            return self.tensor
        inner = ", ".join(s.render() for s in self.subscripts)
        return f"{self.tensor}[{inner}]"


@dataclass(frozen=True)
class BinOp:
    op: str  # '*', '+', '-'
    left: "Expr"
    right: "Expr"

    def render(self) -> str:
        return f"{self.left.render()} {self.op} {self.right.render()}"


@dataclass(frozen=True)
class Take:
    """Intersection-only operator: copies operand `which` where both are nonzero."""

    left: TensorRef
    right: TensorRef
    which: int

    def render(self) -> str:
        return f"take({self.left.render()}, {self.right.render()}, {self.which})"


Expr = Union[TensorRef, BinOp, Take]


def expr_refs(expr: Expr) -> list:
    """All tensor references, left-to-right."""
    if isinstance(expr, TensorRef):
        return [expr]
    if isinstance(expr, Take):
        return [expr.left, expr.right]
    return expr_refs(expr.left) + expr_refs(expr.right)


def expr_vars(expr: Expr) -> list:
    """All variables used anywhere on the right-hand side, deduplicated."""
    seen = []
    for ref in expr_refs(expr):
        for sub in ref.subscripts:
            names = [sub.name] if isinstance(sub, Var) else [sub.left, sub.right]
            for n in names:
                if n not in seen:
                    seen.append(n)
    return seen


# ---------------------------------------------------------------------------
# Expression parsing

_TOKEN_RE = re.compile(r"\s*([A-Za-z_][A-Za-z_0-9]*|\d+|[\[\](),+\-*=])")


def _tokenize(text: str) -> list:
    tokens, pos = [], 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            if text[pos:].strip():
                raise SpecError(f"syntax error in expression {text!r} at column {pos + 1}")
            break
        tokens.append(m.group(1))
        pos = m.end()
    return tokens


class _ExprParser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self) -> Optional[str]:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self) -> str:
        tok = self.peek()
        if tok is None:
            raise SpecError(f"unexpected end of expression in {self.text!r}")
        self.pos += 1
        return tok

    def expect(self, tok: str):
        got = self.next()
        if got != tok:
            raise SpecError(f"expected {tok!r} but found {got!r} in {self.text!r}")

    def parse_statement(self) -> tuple:
        lhs = self.parse_ref()
        self.expect("=")
        expr = self.parse_expr()
        if self.peek() is not None:
            raise SpecError(f"trailing tokens after expression in {self.text!r}")
        return lhs, expr

    def parse_expr(self) -> Expr:
        node = self.parse_term()
        while self.peek() in ("+", "-"):
            op = self.next()
            node = BinOp(op, node, self.parse_term())
        return node

    def parse_term(self) -> Expr:
        node = self.parse_factor()
        while self.peek() == "*":
            self.next()
            node = BinOp("*", node, self.parse_factor())
        return node

    def parse_factor(self) -> Expr:
        tok = self.peek()
        if tok == "(":
            self.next()
            node = self.parse_expr()
            self.expect(")")
            return node
        if tok == "take":
            self.next()
            self.expect("(")
            a = self.parse_ref()
            self.expect(",")
            b = self.parse_ref()
            self.expect(",")
            which = self.next()
            if which not in ("0", "1"):
                raise SpecError(f"take()'s selector must be 0 or 1, found {which!r}")
            self.expect(")")
            return Take(a, b, int(which))
        return self.parse_ref()

    def parse_ref(self) -> TensorRef:
        name = self.next()
        if not name[0].isalpha() and name[0] != "_":
            raise SpecError(f"expected tensor name, found {name!r} in {self.text!r}")
        subs = []
        if self.peek() == "[":
            self.next()
            while True:
                subs.append(self.parse_subscript())
                tok = self.next()
                if tok == "]":
                    break
                if tok != ",":
                    raise SpecError(f"expected ',' or ']' in subscripts of {self.text!r}")
        return TensorRef(name, tuple(subs))

    def parse_subscript(self) -> Subscript:
        a = self.next()
        if self.peek() == "+":
            self.next()
            b = self.next()
            return AffineSum(a.upper(), b.upper())
        return Var(a.upper())


# ---------------------------------------------------------------------------
# Partitioning directives


@dataclass(frozen=True)
class UniformShape:
    size: Union[int, str]  # literal or a name in `parameters`

    def render(self) -> str:
        return f"uniform_shape({self.size})"


@dataclass(frozen=True)
class UniformOccupancy:
    leader: str
    size: Union[int, str]

    def render(self) -> str:
        return f"uniform_occupancy({self.leader}.{self.size})"


@dataclass(frozen=True)
class FlattenRanks:
    def render(self) -> str:
        return "flatten()"


Directive = Union[UniformShape, UniformOccupancy, FlattenRanks]

_DIRECTIVE_RE = re.compile(r"^\s*(uniform_shape|uniform_occupancy|flatten)\s*\((.*)\)\s*$")


def parse_directive(text: str) -> Directive:
    m = _DIRECTIVE_RE.match(str(text))
    if not m:
        raise SpecError(f"unknown directive {text!r}")
    kind, args = m.group(1), m.group(2).strip()
    if kind == "flatten":
        if args:
            raise SpecError(f"flatten() takes no arguments: {text!r}")
        return FlattenRanks()
    if kind == "uniform_shape":
        return UniformShape(_size_arg(args, text))
    leader, _, size = args.partition(".")
    if not leader or not size:
        raise SpecError(f"uniform_occupancy expects LEADER.SIZE: {text!r}")
    return UniformOccupancy(leader.strip(), _size_arg(size, text))


def _size_arg(arg: str, ctx: str) -> Union[int, str]:
    arg = arg.strip()
    if not arg:
        raise SpecError(f"missing size argument in {ctx!r}")
    if arg.isdigit():
        return int(arg)
    return arg


# ---------------------------------------------------------------------------
# Declarations


@dataclass
class EinsumDecl:
    id: str                 # output name, suffixed #n when a tensor is rewritten
    output: str             # output tensor name
    out_subs: tuple         # tuple[Var]
    expr: Expr
    version: int = 1        # how many writes of `output` this one is

    @property
    def is_copy(self) -> bool:
        return isinstance(self.expr, TensorRef) and tuple(
            s for s in self.expr.subscripts) == tuple(self.out_subs)

    def render(self) -> str:
        lhs = TensorRef(self.output, self.out_subs).render()
        if isinstance(self.expr, TensorRef) and not self.expr.subscripts:
            return f"{lhs.split('[')[0]} = {self.expr.render()}"
        return f"{lhs} = {self.expr.render()}"


@dataclass
class SpacetimeDecl:
    space: list = field(default_factory=list)
    time: list = field(default_factory=list)


@dataclass
class MappingDecl:
    rank_order: dict = field(default_factory=dict)      # tensor -> [rank names]
    partitioning: dict = field(default_factory=dict)    # einsum id -> {var|tuple: [Directive]}
    loop_order: dict = field(default_factory=dict)      # einsum id -> [loop vars]
    spacetime: dict = field(default_factory=dict)       # einsum id -> SpacetimeDecl


@dataclass
class Component:
    name: str
    cls: str                # DRAM | Buffer | Intersection | Merger | Compute
    attrs: dict = field(default_factory=dict)

    def attr(self, key, default=None):
        return self.attrs.get(key, default)


@dataclass
class Level:
    name: str
    local: list = field(default_factory=list)       # [Component]
    fanout: int = 1
    children: list = field(default_factory=list)    # [Level]


@dataclass
class Topology:
    name: str
    clock: float            # Hz
    root: Level

    def all_components(self) -> list:
        """(component, depth) pairs; depth counts fanout levels above it."""
        out = []

        def walk(level: Level, depth: int):
            for comp in level.local:
                out.append((comp, depth))
            for child in level.children:
                walk(child, depth + 1)

        walk(self.root, 0)
        return out

    def find(self, name: str) -> Optional[Component]:
        for comp, _ in self.all_components():
            if comp.name == name:
                return comp
        return None

    def depth_of(self, name: str) -> int:
        for comp, depth in self.all_components():
            if comp.name == name:
                return depth
        raise KeyError(name)


@dataclass
class StorageBinding:
    tensor: str             # tensor name or "*"
    config: Optional[str] = None
    rank: Optional[str] = None
    type: str = "elem"      # coord | payload | elem
    evict_on: Optional[str] = None


@dataclass
class OpBinding:
    op: str                 # mul | add | intersect | swizzle
    rank: Optional[str] = None
    tensor: Optional[str] = None


@dataclass
class EinsumBinding:
    topology: str
    components: dict = field(default_factory=dict)  # component name -> [bindings]


@dataclass
class OperatorsDecl:
    add: str = "+"
    mul: str = "*"


@dataclass
class ProblemSpec:
    declaration: dict = field(default_factory=dict)   # tensor -> [rank names]
    einsums: list = field(default_factory=list)       # [EinsumDecl]
    mapping: MappingDecl = field(default_factory=MappingDecl)
    formats: dict = field(default_factory=dict)       # tensor -> config -> rank -> RankFormat
    architecture: dict = field(default_factory=dict)  # topology name -> Topology
    binding: dict = field(default_factory=dict)       # einsum id -> EinsumBinding
    operators: OperatorsDecl = field(default_factory=OperatorsDecl)
    parameters: dict = field(default_factory=dict)

    def einsum(self, eid: str) -> EinsumDecl:
        for e in self.einsums:
            if e.id == eid:
                return e
        raise KeyError(f"no einsum {eid!r}")

    def resolve_size(self, size: Union[int, str]) -> int:
        if isinstance(size, int):
            return size
        if size not in self.parameters:
            raise SpecError(f"partition size parameter {size!r} is not defined")
        return int(self.parameters[size])


# ---------------------------------------------------------------------------
# Iteration-space rewriting (shared by validation and the compiler)


@dataclass
class SplitGroup:
    base: str               # variable being split (may itself be derived, e.g. MK0)
    levels: list            # produced level names, top to bottom
    directives: list        # one per boundary level (top to bottom)


@dataclass
class VarSpace:
    """An einsum's loop variables after partitioning rewrites."""

    variables: list
    splits: dict = field(default_factory=dict)      # base var -> SplitGroup
    flattened: dict = field(default_factory=dict)   # flat var -> (upper, lower)

    def base_of(self, var: str) -> str:
        """Map a loop variable back to its pre-split variable."""
        for group in self.splits.values():
            if var in group.levels:
                return group.base
        return var

    def group_of(self, var: str) -> Optional[SplitGroup]:
        for group in self.splits.values():
            if var in group.levels:
                return group
        return None


def _norm_part_key(key) -> Union[str, tuple]:
    """Partitioning keys are either a var name or a '(A, B)' tuple string."""
    if isinstance(key, (list, tuple)):
        return tuple(str(k).strip().upper() for k in key)
    key = str(key).strip()
    if key.startswith("(") and key.endswith(")"):
        return tuple(p.strip().upper() for p in key[1:-1].split(","))
    return key.upper()


def rewrite_iteration_space(base_vars: list, partitioning: dict) -> VarSpace:
    """Apply partitioning directives, in listed order, to an einsum's variables.

    Splitting var R with n directives yields R{n}..R0; flattening (A, B)
    yields the tuple-coordinate variable AB.
    """
    space = VarSpace(list(base_vars))
    for key, directives in partitioning.items():
        key = _norm_part_key(key)
        if isinstance(key, tuple):
            if len(directives) != 1 or not isinstance(directives[0], FlattenRanks):
                raise SpecError(f"tuple partitioning key {key} only accepts [flatten()]")
            upper, lower = key
            for v in (upper, lower):
                if v not in space.variables:
                    raise SpecError(
                        f"flatten references rank {v!r} absent at this rewrite stage")
            flat = upper + lower
            i = space.variables.index(upper)
            space.variables.remove(lower)
            space.variables[space.variables.index(upper)] = flat
            space.flattened[flat] = (upper, lower)
            continue
        if key not in space.variables:
            raise SpecError(f"partitioning references rank {key!r} absent at this rewrite stage")
        if not directives:
            continue
        for d in directives:
            if isinstance(d, FlattenRanks):
                raise SpecError(f"flatten() requires a tuple key, got {key!r}")
        n = len(directives)
        levels = [f"{key}{i}" for i in range(n, -1, -1)]
        i = space.variables.index(key)
        space.variables[i:i + 1] = levels
        space.splits[key] = SplitGroup(key, levels, list(directives))
    return space


def einsum_base_vars(e: EinsumDecl) -> list:
    """The einsum's iteration variables before partitioning.

    Output variables first (declared order), then the remaining right-hand
    side variables alphabetically.  Variables private to a take()'s
    non-copied operand are excluded: that operand participates only through
    coordinate matching on the shared ranks.
    """
    out_vars = [s.name for s in e.out_subs if isinstance(s, Var)]
    rhs = expr_vars(e.expr)
    excluded = _take_private_vars(e.expr)
    ordered = list(out_vars)
    for v in sorted(rhs):
        if v not in ordered and v not in excluded:
            ordered.append(v)
    return ordered


def _take_private_vars(expr: Expr) -> set:
    """Variables appearing only in non-copied take() operands."""
    private = set()
    used_elsewhere = set()

    def scan(node, in_noncopied):
        if isinstance(node, TensorRef):
            for sub in node.subscripts:
                names = [sub.name] if isinstance(sub, Var) else [sub.left, sub.right]
                (private if in_noncopied else used_elsewhere).update(names)
        elif isinstance(node, Take):
            copied = node.left if node.which == 0 else node.right
            other = node.right if node.which == 0 else node.left
            scan(copied, in_noncopied)
            scan(other, True)
        else:
            scan(node.left, in_noncopied)
            scan(node.right, in_noncopied)

    scan(expr, False)
    return private - used_elsewhere


def default_loop_order(e: EinsumDecl, partitioning: dict) -> list:
    return rewrite_iteration_space(einsum_base_vars(e), partitioning or {}).variables


# ---------------------------------------------------------------------------
# Document parsing

_SECTION_KEYS = {"einsum", "mapping", "format", "architecture", "binding",
                 "operators", "parameters"}


def parse_spec(text: str) -> ProblemSpec:
    """Parse a spec document and fill in defaults for omitted mapping parts."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as err:
        mark = getattr(err, "problem_mark", None)
        if mark is not None:
            raise SpecError(
                f"syntax error at line {mark.line + 1}, column {mark.column + 1}: "
                f"{getattr(err, 'problem', err)}") from err
        raise SpecError(f"syntax error: {err}") from err
    if not isinstance(doc, dict):
        raise SpecError("spec document must be a mapping of sections")
    unknown = set(doc) - _SECTION_KEYS
    if unknown:
        raise SpecError(f"unknown top-level section(s): {sorted(unknown)}")
    if "einsum" not in doc:
        raise SpecError("spec must contain an `einsum` section")

    spec = ProblemSpec()
    spec.parameters = {str(k): int(v) for k, v in (doc.get("parameters") or {}).items()}
    _parse_einsum_section(doc["einsum"], spec)
    _parse_operators(doc.get("operators"), spec)
    _parse_mapping(doc.get("mapping") or {}, spec)
    _parse_format(doc.get("format") or {}, spec)
    _parse_architecture(doc.get("architecture") or {}, spec)
    _parse_binding(doc.get("binding") or {}, spec)
    _fill_defaults(spec)
    return spec


def load_spec(path) -> ProblemSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_spec(fh.read())


def _parse_einsum_section(section, spec: ProblemSpec):
    if not isinstance(section, dict) or "declaration" not in section:
        raise SpecError("einsum section needs `declaration` and `expressions`")
    decl = section["declaration"] or {}
    for tensor, ranks in decl.items():
        if not isinstance(ranks, list) or not all(isinstance(r, str) for r in ranks):
            raise SpecError(f"declaration of {tensor!r} must list rank names")
        spec.declaration[str(tensor)] = [r.upper() for r in ranks]
    versions: dict = {}
    for line in section.get("expressions") or []:
        lhs, expr = _ExprParser(str(line)).parse_statement()
        if lhs.tensor not in spec.declaration:
            raise SpecError(f"expression writes undeclared tensor {lhs.tensor!r}")
        out_subs = lhs.subscripts or _implicit_subs(spec, lhs.tensor)
        expr = _fill_bare_refs(spec, expr)
        for ref in expr_refs(expr):
            if ref.tensor not in spec.declaration:
                raise SpecError(f"expression reads undeclared tensor {ref.tensor!r}")
        versions[lhs.tensor] = versions.get(lhs.tensor, 0) + 1
        version = versions[lhs.tensor]
        eid = lhs.tensor if version == 1 else f"{lhs.tensor}#{version}"
        spec.einsums.append(EinsumDecl(eid, lhs.tensor, tuple(out_subs), expr, version))
    if not spec.einsums:
        raise SpecError("einsum section declares no expressions")


def _implicit_subs(spec: ProblemSpec, tensor: str) -> tuple:
    return tuple(Var(r) for r in spec.declaration[tensor])


def _fill_bare_refs(spec: ProblemSpec, expr: Expr) -> Expr:
    """Copy statements like `P1 = P0` get implicit subscripts from the declaration."""
    if isinstance(expr, TensorRef):
        if not expr.subscripts and expr.tensor in spec.declaration:
            return TensorRef(expr.tensor, _implicit_subs(spec, expr.tensor))
        return expr
    if isinstance(expr, Take):
        return Take(_fill_bare_refs(spec, expr.left), _fill_bare_refs(spec, expr.right),
                    expr.which)
    return BinOp(expr.op, _fill_bare_refs(spec, expr.left), _fill_bare_refs(spec, expr.right))


def _parse_operators(section, spec: ProblemSpec):
    if not section:
        return
    spec.operators = OperatorsDecl(str(section.get("add", "+")), str(section.get("mul", "*")))


def _einsum_key(spec: ProblemSpec, key: str) -> str:
    """Mapping/binding sections address einsums by output name (or full id)."""
    key = str(key)
    for e in spec.einsums:
        if e.id == key:
            return e.id
    for e in spec.einsums:
        if e.output == key:
            return e.id
    raise SpecError(f"section references unknown einsum {key!r}")


def _parse_mapping(section, spec: ProblemSpec):
    mapping = spec.mapping
    for tensor, order in (section.get("rank-order") or {}).items():
        if str(tensor) not in spec.declaration:
            raise SpecError(f"rank-order references undeclared tensor {tensor!r}")
        mapping.rank_order[str(tensor)] = [str(r).upper() for r in order]
    for eid, parts in (section.get("partitioning") or {}).items():
        eid = _einsum_key(spec, eid)
        entry = {}
        for key, directives in (parts or {}).items():
            entry[_norm_part_key(key)] = [parse_directive(d) for d in directives]
        mapping.partitioning[eid] = entry
    for eid, order in (section.get("loop-order") or {}).items():
        eid = _einsum_key(spec, eid)
        mapping.loop_order[eid] = [str(r).upper() for r in order]
    for eid, st in (section.get("spacetime") or {}).items():
        eid = _einsum_key(spec, eid)
        mapping.spacetime[eid] = SpacetimeDecl(
            [str(r).upper() for r in (st or {}).get("space") or []],
            [str(r).upper() for r in (st or {}).get("time") or []])


def _parse_format(section, spec: ProblemSpec):
    for tensor, configs in section.items():
        tensor = str(tensor)
        if tensor not in spec.declaration:
            raise SpecError(f"format references undeclared tensor {tensor!r}")
        spec.formats[tensor] = {}
        for config, ranks in (configs or {}).items():
            entry = {}
            for rank, attrs in (ranks or {}).items():
                attrs = attrs or {}
                unknown = set(attrs) - {"format", "layout", "cbits", "pbits", "fhbits"}
                if unknown:
                    raise SpecError(f"unknown format attribute(s) {sorted(unknown)} "
                                    f"for {tensor}.{config}.{rank}")
                entry[str(rank).upper()] = RankFormat(
                    type=str(attrs.get("format", "C")).upper(),
                    layout=str(attrs.get("layout", "SoA")),
                    cbits=int(attrs.get("cbits", 0)),
                    pbits=int(attrs.get("pbits", 0)),
                    fhbits=int(attrs.get("fhbits", 0)))
            spec.formats[tensor][str(config)] = entry


_COMPONENT_CLASSES = {"DRAM", "Buffer", "Intersection", "Merger", "Compute"}


def _parse_architecture(section, spec: ProblemSpec):
    for name, topo in section.items():
        topo = topo or {}
        if "level" not in topo:
            raise SpecError(f"topology {name!r} needs a `level` tree")
        clock = float(topo.get("clock", 1e9))
        root = _parse_level(topo["level"], str(name))
        spec.architecture[str(name)] = Topology(str(name), clock, root)


def _parse_level(node, topo_name: str) -> Level:
    if not isinstance(node, dict) or "name" not in node:
        raise SpecError(f"levels in topology {topo_name!r} need a `name`")
    comps = []
    for raw in node.get("local") or []:
        raw = dict(raw)
        cname = str(raw.pop("name", ""))
        cls = str(raw.pop("class", ""))
        if not cname or cls not in _COMPONENT_CLASSES:
            raise SpecError(f"component {cname!r} in {topo_name!r} has unknown class {cls!r}")
        comps.append(Component(cname, cls, raw))
    children = [_parse_level(child, topo_name) for child in node.get("subtree") or []]
    return Level(str(node["name"]), comps, int(node.get("fanout", 1)), children)


def _parse_binding(section, spec: ProblemSpec):
    for eid, entry in section.items():
        eid = _einsum_key(spec, eid)
        entry = entry or {}
        binding = EinsumBinding(str(entry.get("topology", "")))
        for comp, items in (entry.get("components") or {}).items():
            parsed = []
            for item in items or []:
                item = dict(item)
                if "op" in item:
                    parsed.append(OpBinding(str(item.pop("op")),
                                            _upper_or_none(item.pop("rank", None)),
                                            _str_or_none(item.pop("tensor", None))))
                else:
                    parsed.append(StorageBinding(
                        tensor=str(item.pop("tensor", "*")),
                        config=_str_or_none(item.pop("config", None)),
                        rank=_upper_or_none(item.pop("rank", None)),
                        type=str(item.pop("type", "elem")),
                        evict_on=_upper_or_none(item.pop("evict-on", item.pop("evict_on", None)))))
                if item:
                    raise SpecError(f"unknown binding attribute(s) {sorted(item)} on {comp!r}")
            binding.components[str(comp)] = parsed
        spec.binding[eid] = binding


def _str_or_none(v):
    return None if v is None else str(v)


def _upper_or_none(v):
    return None if v is None else str(v).upper()


def _fill_defaults(spec: ProblemSpec):
    for tensor, ranks in spec.declaration.items():
        spec.mapping.rank_order.setdefault(tensor, list(ranks))
    for e in spec.einsums:
        parts = spec.mapping.partitioning.get(e.id, {})
        if e.id not in spec.mapping.loop_order:
            spec.mapping.loop_order[e.id] = default_loop_order(e, parts)
        if e.id not in spec.mapping.spacetime:
            spec.mapping.spacetime[e.id] = SpacetimeDecl(
                [], list(spec.mapping.loop_order[e.id]))


# ---------------------------------------------------------------------------
# Validation


@dataclass(frozen=True)
class Violation:
    code: str
    message: str

    def __str__(self):
        return f"[{self.code}] {self.message}"


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    def add(self, code: str, message: str):
        self.violations.append(Violation(code, message))

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self):
        if self.ok:
            return "spec is valid"
        return "\n".join(str(v) for v in self.violations)


def validate(spec: ProblemSpec) -> ValidationReport:
    """Check every declared invariant; violations are data, not exceptions."""
    report = ValidationReport()
    _validate_einsums(spec, report)
    spaces = _validate_mapping(spec, report)
    _validate_formats(spec, report)
    _validate_architecture(spec, report)
    _validate_binding(spec, report, spaces)
    return report


def _validate_einsums(spec: ProblemSpec, report: ValidationReport):
    for e in spec.einsums:
        decl_ranks = spec.declaration[e.output]
        if len(e.out_subs) != len(decl_ranks):
            report.add("einsum.output-arity",
                       f"{e.id}: output has {len(e.out_subs)} subscripts, "
                       f"declaration has {len(decl_ranks)} ranks")
        for ref in expr_refs(e.expr):
            if len(ref.subscripts) != len(spec.declaration[ref.tensor]):
                report.add("einsum.operand-arity",
                           f"{e.id}: {ref.render()} does not match declaration "
                           f"{spec.declaration[ref.tensor]}")
        plain = set()
        for ref in expr_refs(e.expr) + [TensorRef(e.output, e.out_subs)]:
            plain.update(s.name for s in ref.subscripts if isinstance(s, Var))
        for v in expr_vars(e.expr):
            if v not in plain:
                report.add("einsum.unbound-var",
                           f"{e.id}: variable {v.lower()} appears only in index "
                           f"expressions; it must subscript some operand")
        out_vars = {s.name for s in e.out_subs if isinstance(s, Var)}
        rhs_vars = set(expr_vars(e.expr))
        missing = out_vars - rhs_vars
        if missing and not e.is_copy:
            report.add("einsum.output-var",
                       f"{e.id}: output variable(s) {sorted(missing)} never "
                       f"appear in the expression")


def _validate_mapping(spec: ProblemSpec, report: ValidationReport) -> dict:
    for tensor, order in spec.mapping.rank_order.items():
        if sorted(order) != sorted(spec.declaration.get(tensor, [])):
            report.add("mapping.rank-order",
                       f"rank-order of {tensor} is {order}, not a permutation of "
                       f"{spec.declaration.get(tensor)}")
    spaces = {}
    for e in spec.einsums:
        parts = spec.mapping.partitioning.get(e.id, {})
        for key, directives in parts.items():
            for d in directives:
                if isinstance(d, UniformOccupancy):
                    if d.leader not in spec.declaration:
                        report.add("mapping.partition-leader",
                                   f"{e.id}: occupancy leader {d.leader} is not declared")
                    elif d.leader not in [r.tensor for r in expr_refs(e.expr)]:
                        report.add("mapping.partition-leader",
                                   f"{e.id}: occupancy leader {d.leader} is not an "
                                   f"operand of this einsum")
                if isinstance(d, (UniformShape, UniformOccupancy)):
                    try:
                        size = spec.resolve_size(d.size)
                        if size < 1:
                            report.add("mapping.partition-size",
                                       f"{e.id}: partition size {size} must be >= 1")
                    except SpecError as err:
                        report.add("mapping.partition-size", f"{e.id}: {err}")
        try:
            space = rewrite_iteration_space(einsum_base_vars(e), parts)
        except SpecError as err:
            report.add("mapping.partitioning", f"{e.id}: {err}")
            continue
        spaces[e.id] = space
        loop = spec.mapping.loop_order[e.id]
        if sorted(loop) != sorted(space.variables):
            report.add("mapping.loop-order",
                       f"{e.id}: loop-order {loop} must equal the iteration-space "
                       f"ranks {sorted(space.variables)} after partitioning")
        st = spec.mapping.spacetime[e.id]
        declared = set(loop)
        both = set(st.space) & set(st.time)
        if both:
            report.add("mapping.spacetime",
                       f"{e.id}: rank(s) {sorted(both)} appear in both space and time")
        missing = declared - set(st.space) - set(st.time)
        for r in sorted(missing):
            report.add("mapping.spacetime", f"{e.id}: rank {r} unscheduled "
                       f"(in neither space nor time)")
        extra = (set(st.space) | set(st.time)) - declared
        if extra:
            report.add("mapping.spacetime",
                       f"{e.id}: rank(s) {sorted(extra)} are not loop-order ranks")
    return spaces


def base_rank_name(rank: str) -> str:
    return rank.rstrip("0123456789") or rank


def lookup_rank_format(config: dict, rank: str) -> Optional[RankFormat]:
    """Exact entry, else the base-rank entry (K1 falls back to K)."""
    if rank in config:
        return config[rank]
    return config.get(base_rank_name(rank))


def _validate_formats(spec: ProblemSpec, report: ValidationReport):
    for tensor, configs in spec.formats.items():
        ranks = spec.mapping.rank_order.get(tensor, spec.declaration.get(tensor, []))
        for config, entry in configs.items():
            for rank in ranks:
                if lookup_rank_format(entry, rank) is None:
                    report.add("format.coverage",
                               f"{tensor}.{config}: no entry for rank {rank}")
            for rank, rf in entry.items():
                if rf.type not in ("U", "C", "B"):
                    report.add("format.type",
                               f"{tensor}.{config}.{rank}: unknown format type {rf.type}")
                if rf.layout not in ("SoA", "AoS"):
                    report.add("format.layout",
                               f"{tensor}.{config}.{rank}: unknown layout {rf.layout}")
                for attr in ("cbits", "pbits", "fhbits"):
                    if getattr(rf, attr) < 0:
                        report.add("format.bits",
                                   f"{tensor}.{config}.{rank}: {attr} must be >= 0")


def _validate_architecture(spec: ProblemSpec, report: ValidationReport):
    for name, topo in spec.architecture.items():
        seen = set()
        drams = 0
        for comp, _depth in topo.all_components():
            if comp.name in seen:
                report.add("arch.duplicate-component",
                           f"{name}: component name {comp.name} is not unique")
            seen.add(comp.name)
            if comp.cls == "DRAM":
                drams += 1
                if float(comp.attr("bandwidth", 0)) <= 0:
                    report.add("arch.params", f"{name}.{comp.name}: bandwidth must be > 0")
            if comp.cls == "Buffer":
                if comp.attr("type") not in ("buffet", "cache"):
                    report.add("arch.params",
                               f"{name}.{comp.name}: buffer type must be buffet or cache")
                for attr in ("width", "depth"):
                    if int(comp.attr(attr, 0)) < 1:
                        report.add("arch.params", f"{name}.{comp.name}: {attr} must be >= 1")
            if comp.cls == "Intersection" and comp.attr("type") not in (
                    "two-finger", "leader-follower", "skip-ahead"):
                report.add("arch.params", f"{name}.{comp.name}: unknown intersection type")
            if comp.cls == "Merger":
                for attr in ("inputs", "comparator_radix", "outputs"):
                    if int(comp.attr(attr, 0)) < 1:
                        report.add("arch.params", f"{name}.{comp.name}: {attr} must be >= 1")
                if comp.attr("order", "fifo") not in ("fifo", "opt"):
                    report.add("arch.params", f"{name}.{comp.name}: order must be fifo or opt")
            if comp.cls == "Compute" and comp.attr("type") not in ("mul", "add"):
                report.add("arch.params", f"{name}.{comp.name}: compute type must be mul or add")
        if drams != 1:
            report.add("arch.dram", f"{name}: topology must contain exactly one DRAM "
                       f"component (found {drams})")
        if topo.clock <= 0:
            report.add("arch.params", f"{name}: clock must be > 0")


def _validate_binding(spec: ProblemSpec, report: ValidationReport, spaces: dict):
    for eid, binding in spec.binding.items():
        topo = spec.architecture.get(binding.topology)
        if topo is None:
            report.add("binding.topology",
                       f"{eid}: unknown topology {binding.topology!r}")
            continue
        loop = set(spec.mapping.loop_order.get(eid, []))
        per_level_seen: dict = {}
        for cname, items in binding.components.items():
            comp = topo.find(cname)
            if comp is None:
                report.add("binding.component",
                           f"{eid}: component {cname} not in topology {binding.topology}")
                continue
            depth = topo.depth_of(cname)
            for item in items:
                if isinstance(item, StorageBinding):
                    if comp.cls not in ("Buffer", "DRAM"):
                        report.add("binding.component",
                                   f"{eid}: storage binding on non-storage component {cname}")
                        continue
                    if comp.cls == "Buffer" and comp.attr("type") == "buffet" \
                            and item.evict_on is None:
                        report.add("binding.evict-on",
                                   f"{eid}: buffet {cname} binding needs evict-on")
                    if item.evict_on is not None and item.evict_on not in loop:
                        report.add("binding.evict-on",
                                   f"{eid}: evict-on rank {item.evict_on} of {cname} "
                                   f"is not a loop rank")
                    if item.tensor != "*":
                        if item.tensor not in spec.declaration:
                            report.add("binding.tensor",
                                       f"{eid}: {cname} binds undeclared tensor {item.tensor}")
                        else:
                            _check_storage_ref(spec, report, eid, cname, item)
                        key = (depth, item.tensor, item.config, item.rank, item.type)
                        prev = per_level_seen.get(key)
                        if prev is not None and prev != cname:
                            report.add("binding.duplicate",
                                       f"{eid}: {item.tensor}/{item.rank} bound to both "
                                       f"{prev} and {cname} at the same level")
                        per_level_seen[key] = cname
                else:
                    if comp.cls not in ("Compute", "Intersection", "Merger"):
                        report.add("binding.component",
                                   f"{eid}: op binding on storage component {cname}")
                    if item.op not in ("mul", "add", "intersect", "swizzle"):
                        report.add("binding.op", f"{eid}: unknown bound op {item.op!r}")


def _check_storage_ref(spec, report, eid, cname, item: StorageBinding):
    configs = spec.formats.get(item.tensor)
    if configs is None:
        return  # formats default; resolved at model time
    if item.config is not None and item.config not in configs:
        report.add("binding.config",
                   f"{eid}: {cname} binds unknown config {item.tensor}.{item.config}")
        return
    if item.rank is not None:
        config = configs.get(item.config) if item.config else next(iter(configs.values()))
        if config and lookup_rank_format(config, item.rank) is None:
            report.add("binding.rank",
                       f"{eid}: {cname} binds unknown rank {item.tensor}.{item.rank}")


# ---------------------------------------------------------------------------
# Cascade DAG


@dataclass
class CascadeDAG:
    nodes: list                      # einsum ids, in declaration order (topological)
    edges: set                       # {(producer id, consumer id)}
    external_inputs: list            # tensor names read before any write
    producer_of: dict                # tensor name -> id of final producer

    def topological_order(self) -> list:
        return list(self.nodes)

    def consumers(self, eid: str) -> list:
        return [b for (a, b) in sorted(self.edges) if a == eid]


def build_cascade(spec: ProblemSpec) -> CascadeDAG:
    """Producer->consumer edges: A->B when B reads a version of a tensor A wrote.

    Tensor rewrites (e.g. an in-place property update) are versioned, so a
    read placed before the rewrite binds to the external input, not to the
    later einsum; the listed order is therefore always topological.
    """
    current_writer: dict = {}
    edges = set()
    externals: list = []
    for e in spec.einsums:
        for ref in expr_refs(e.expr):
            writer = current_writer.get(ref.tensor)
            if writer is not None:
                edges.add((writer, e.id))
            elif ref.tensor not in externals:
                externals.append(ref.tensor)
        current_writer[e.output] = e.id
    nodes = [e.id for e in spec.einsums]
    order = {eid: i for i, eid in enumerate(nodes)}
    for a, b in edges:
        if order[a] >= order[b]:
            raise SpecError(f"cyclic dependency between einsums {a} and {b}")
    return CascadeDAG(nodes, edges, externals, current_writer)


# ---------------------------------------------------------------------------
# Printing (parse . print is idempotent)


def spec_to_text(spec: ProblemSpec) -> str:
    doc: dict = {}
    doc["einsum"] = {
        "declaration": {t: list(r) for t, r in spec.declaration.items()},
        "expressions": [e.render() for e in spec.einsums],
    }
    mapping: dict = {}
    mapping["rank-order"] = {t: list(r) for t, r in spec.mapping.rank_order.items()}
    if spec.mapping.partitioning:
        mapping["partitioning"] = {
            _einsum_section_key(spec, eid): {
                _part_key_text(key): [d.render() for d in directives]
                for key, directives in parts.items()}
            for eid, parts in spec.mapping.partitioning.items()}
    mapping["loop-order"] = {_einsum_section_key(spec, eid): list(order)
                             for eid, order in spec.mapping.loop_order.items()}
    mapping["spacetime"] = {
        _einsum_section_key(spec, eid): {"space": list(st.space), "time": list(st.time)}
        for eid, st in spec.mapping.spacetime.items()}
    doc["mapping"] = mapping
    if spec.operators != OperatorsDecl():
        doc["operators"] = {"add": spec.operators.add, "mul": spec.operators.mul}
    if spec.parameters:
        doc["parameters"] = dict(spec.parameters)
    if spec.formats:
        doc["format"] = {
            tensor: {config: {rank: _format_attrs(rf) for rank, rf in entry.items()}
                     for config, entry in configs.items()}
            for tensor, configs in spec.formats.items()}
    if spec.architecture:
        doc["architecture"] = {name: _topology_doc(t) for name, t in spec.architecture.items()}
    if spec.binding:
        doc["binding"] = {
            _einsum_section_key(spec, eid): {
                "topology": b.topology,
                "components": {c: [_binding_doc(i) for i in items]
                               for c, items in b.components.items()}}
            for eid, b in spec.binding.items()}
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=False)


def _einsum_section_key(spec: ProblemSpec, eid: str) -> str:
    e = spec.einsum(eid)
    return e.output if e.version == 1 else e.id


def _part_key_text(key) -> str:
    if isinstance(key, tuple):
        return "(" + ", ".join(key) + ")"
    return key


def _format_attrs(rf: RankFormat) -> dict:
    out = {"format": rf.type}
    if rf.layout != "SoA":
        out["layout"] = rf.layout
    for attr in ("cbits", "pbits", "fhbits"):
        if getattr(rf, attr):
            out[attr] = getattr(rf, attr)
    return out


def _topology_doc(topo: Topology) -> dict:
    def level_doc(level: Level) -> dict:
        out: dict = {"name": level.name}
        if level.fanout != 1:
            out["fanout"] = level.fanout
        if level.local:
            out["local"] = [dict({"name": c.name, "class": c.cls}, **c.attrs)
                            for c in level.local]
        if level.children:
            out["subtree"] = [level_doc(ch) for ch in level.children]
        return out

    return {"clock": topo.clock, "level": level_doc(topo.root)}


def _binding_doc(item) -> dict:
    if isinstance(item, OpBinding):
        out = {"op": item.op}
        if item.rank:
            out["rank"] = item.rank
        if item.tensor:
            out["tensor"] = item.tensor
        return out
    out = {"tensor": item.tensor}
    if item.config:
        out["config"] = item.config
    if item.rank:
        out["rank"] = item.rank
    if item.type != "elem":
        out["type"] = item.type
    if item.evict_on:
        out["evict-on"] = item.evict_on
    return out
