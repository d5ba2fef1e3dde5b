"""Lower mapped Einsums to executable loop nests.

For each Einsum the compiler derives, per tensor, the transformations that
make the mapping's loop order traversable concordantly:

  * static preludes: shape-based splits, flattens, and full-tensor swizzles
    (offline and free for input tensors, online and cost-bearing for
    intermediates),
  * dynamic steps executed per fiber during traversal: occupancy-based
    chops (the leader's chunk ranges are only known once the surrounding
    coordinates are fixed) and the per-subtree swizzles they induce, e.g.
    a row-wise multiply-merge's per-row merge.

It also selects a co-iterator per loop rank from the expression structure,
inserts reductions for ranks absent from the output, and computes the
cascade's greedy fusion schedule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from . import specs
from .semiring import Semiring, make_semiring
from .specs import (
    AffineSum,
    BinOp,
    CascadeDAG,
    EinsumDecl,
    FlattenRanks,
    ProblemSpec,
    SpecError,
    Take,
    TensorRef,
    UniformOccupancy,
    UniformShape,
    Var,
    VarSpace,
    einsum_base_vars,
    expr_refs,
    rewrite_iteration_space,
)


class CompileError(Exception):
    pass


# ---------------------------------------------------------------------------
# Transform steps


@dataclass(frozen=True)
class SplitStep:
    rank: str
    sizes: tuple              # chunk size per produced boundary level, top to bottom
    level_ranks: tuple        # produced rank names, top to bottom


@dataclass(frozen=True)
class SwizzleStep:
    from_order: tuple
    to_order: tuple
    online: bool              # cost-bearing (intermediate tensor)
    scope: str = "full"       # full | per-subtree


@dataclass(frozen=True)
class FlattenStep:
    upper: str
    lower: str
    flat_rank: str


@dataclass(frozen=True)
class ChopSpec:
    """Dynamic partitioning applied to one rank when its loop group is entered."""

    base_var: str
    rank: str                 # leaf-side rank being chopped
    level_ranks: tuple        # produced rank names, top to bottom
    directives: tuple         # (kind, size) with kind in {shape, occupancy}
    leader: Optional[str]     # leader tensor name for occupancy levels


@dataclass(frozen=True)
class OnlineSwizzle:
    """Compiler-visible record of a cost-bearing rank swizzle."""

    tensor: str
    from_order: tuple
    to_order: tuple
    scope: str                # full | per-subtree


# ---------------------------------------------------------------------------
# Leaf plans

DRIVE = "drive"
LOOKUP_AFFINE = "affine"
LOOKUP_EXTRACT = "extract"


@dataclass
class LevelStep:
    """What one leaf does when the traversal reaches one loop level."""

    role: str                         # drive | affine | extract
    rank: str                         # the leaf-side rank served at this level
    chop: Optional[ChopSpec] = None   # applied before co-iteration
    swizzle: Optional[SwizzleStep] = None
    affine: Optional[tuple] = None    # (var1, var2) for q+s subscripts
    extract: Optional[tuple] = None   # (flat loop var, component index)


@dataclass
class LeafPlan:
    idx: int
    tensor: str
    subscripts: tuple
    prelude: list                     # static SplitStep/SwizzleStep/FlattenStep
    static_order: list                # leaf rank names after the prelude
    steps: dict                       # loop level index -> LevelStep
    lazy: bool = False                # take()'s non-copied side: coords only
    intermediate: bool = False

    def drive_levels(self) -> list:
        return [i for i, s in self.steps.items() if s.role == DRIVE]


@dataclass
class LoopLevel:
    rank: str
    kind: str                 # sequential | intersect | union | leader-follow
    is_space: bool
    drivers: list             # leaf indices driving this rank
    coiter: object            # ("leaf", idx) | ("and", [...]) | ("or", [...]) | None


@dataclass
class OutputPlan:
    tensor: str
    production_order: list    # base output vars, outermost first
    production_ranks: list    # tensor-side rank names for the production tree
    storage_swizzle: Optional[SwizzleStep]
    out_vars: list            # per declared output position, the bound variable


@dataclass
class LoopNest:
    einsum: EinsumDecl
    loop_ranks: list          # [LoopLevel]
    leaves: list              # [LeafPlan]
    output: OutputPlan
    reduction_ranks: list     # base vars reduced into the output
    semiring: Semiring
    varspace: VarSpace
    space_ranks: list
    time_ranks: list
    online_swizzles: list     # [OnlineSwizzle]
    rank_derivations: dict    # tensor -> {derived rank: ("split", base) | ("flat", up, lo)}
    copy_alias: Optional[str] = None   # tensor aliased by a bare copy einsum

    @property
    def id(self) -> str:
        return self.einsum.id


@dataclass
class FusionSchedule:
    blocks: list              # [[einsum ids]]

    def block_of(self, eid: str) -> int:
        for i, block in enumerate(self.blocks):
            if eid in block:
                return i
        raise KeyError(eid)


# ---------------------------------------------------------------------------
# Variable derivations


def base_constituents(var: str, space: VarSpace, _depth: int = 0) -> list:
    """Original einsum variables contributing to a (possibly derived) loop var."""
    if _depth > 32:
        raise CompileError(f"cyclic rank derivation at {var!r}")
    group = space.group_of(var)
    if group is not None and var != group.base:
        return base_constituents(group.base, space, _depth + 1)
    if var in space.flattened:
        upper, lower = space.flattened[var]
        return (base_constituents(upper, space, _depth + 1)
                + base_constituents(lower, space, _depth + 1))
    return [var]


def collapse_last(loop_vars: list, space: VarSpace, restrict: set) -> list:
    """Base vars in loop order, deduplicated keeping the LAST occurrence.

    This describes the order in which a tensor's ranks are visited at the
    leaf level; it is the rank order the paper quotes for swizzled
    intermediates.
    """
    seq = []
    for lv in loop_vars:
        for bv in base_constituents(lv, space):
            if bv in restrict:
                seq.append(bv)
    out = []
    for i, v in enumerate(seq):
        if v not in seq[i + 1:]:
            out.append(v)
    return out


# ---------------------------------------------------------------------------
# Public sub-operations


def apply_partitioning(spec: ProblemSpec, eid: str) -> VarSpace:
    """Rewrite the einsum's iteration space per its partitioning directives."""
    e = spec.einsum(eid)
    parts = spec.mapping.partitioning.get(eid, {})
    return rewrite_iteration_space(einsum_base_vars(e), parts)


def select_coiterator(expr, var: str, has_lookup: bool = False) -> str:
    """Co-iterator kind for one loop rank, from the expression structure."""
    tree = _coiter_tree(expr, var, {})
    if tree is None:
        return "sequential"
    kinds = _tree_kinds(tree)
    if has_lookup:
        return "leader-follow"
    if "or" in kinds:
        return "union"
    if "and" in kinds:
        return "intersect"
    return "sequential"


def _tree_kinds(tree) -> set:
    if tree[0] == "leaf":
        return set()
    kinds = {tree[0]}
    for child in tree[1]:
        kinds |= _tree_kinds(child)
    return kinds


def lower_index_expression(sub, env: dict):
    """Evaluate a subscript against bound loop coordinates."""
    if isinstance(sub, Var):
        return env[sub.name]
    return env[sub.left] + env[sub.right]


def infer_swizzles(stored_order: list, consumed_order: list) -> Optional[tuple]:
    """The swizzle (from, to) needed to traverse `stored_order` as
    `consumed_order`, or None when they already agree."""
    if list(stored_order) == list(consumed_order):
        return None
    return tuple(stored_order), tuple(consumed_order)


# ---------------------------------------------------------------------------
# Expression analysis


def _leaf_refs(expr) -> list:
    return expr_refs(expr)


def _lazy_leaves(expr) -> set:
    """Leaf indices (by reference order) on non-copied take() sides."""
    lazy = set()
    counter = [0]

    def scan(node, lazy_ctx):
        if isinstance(node, TensorRef):
            if lazy_ctx:
                lazy.add(counter[0])
            counter[0] += 1
        elif isinstance(node, Take):
            scan(node.left, lazy_ctx or node.which != 0)
            scan(node.right, lazy_ctx or node.which != 1)
        else:
            scan(node.left, lazy_ctx)
            scan(node.right, lazy_ctx)

    scan(expr, False)
    return lazy


def _coiter_tree(expr, var: str, drive_map: dict, counter=None):
    """Mirror of the expression restricted to leaves driving `var`.

    Returns ("leaf", idx) | ("and", [children]) | ("or", [children]) | None.
    `drive_map` maps leaf index -> set of base vars it can drive; leaves
    are numbered in reference order.
    """
    if counter is None:
        counter = [0]
    if isinstance(expr, TensorRef):
        idx = counter[0]
        counter[0] += 1
        drives = drive_map.get(idx)
        if drives is None:
            drives = {s.name for s in expr.subscripts if isinstance(s, Var)}
        return ("leaf", idx) if var in drives else None
    if isinstance(expr, Take):
        left = _coiter_tree(expr.left, var, drive_map, counter)
        right = _coiter_tree(expr.right, var, drive_map, counter)
        children = [c for c in (left, right) if c is not None]
        if not children:
            return None
        return children[0] if len(children) == 1 else ("and", children)
    left = _coiter_tree(expr.left, var, drive_map, counter)
    right = _coiter_tree(expr.right, var, drive_map, counter)
    children = [c for c in (left, right) if c is not None]
    if not children:
        return None
    if len(children) == 1:
        return children[0]
    return ("and" if expr.op == "*" else "or", children)


# ---------------------------------------------------------------------------
# Leaf planning


class _LeafBuilder:
    def __init__(self, spec: ProblemSpec, e: EinsumDecl, space: VarSpace,
                 loop_order: list, idx: int, ref: TensorRef, lazy: bool,
                 intermediate: bool):
        self.spec = spec
        self.e = e
        self.space = space
        self.loop = loop_order
        self.idx = idx
        self.ref = ref
        self.lazy = lazy
        self.intermediate = intermediate
        # positional binding: subscript var -> tensor rank name (mapping order
        # governs the stored tree; declaration order governs the binding)
        decl = spec.declaration[ref.tensor]
        self.plain: dict = {}
        for sub, rank in zip(ref.subscripts, decl):
            if isinstance(sub, Var):
                self.plain[sub.name] = rank
        self.affine_subs = [s for s in ref.subscripts if isinstance(s, AffineSum)]
        self.derivations: dict = {}

    # -- ownership ---------------------------------------------------------
    def owns(self, var: str) -> bool:
        if var in self.plain:
            return True
        group = self.space.group_of(var)
        if group is not None and var != group.base:
            return self.owns(group.base)
        if var in self.space.flattened:
            upper, lower = self.space.flattened[var]
            return self.owns(upper) and self.owns(lower)
        return False

    def leaf_rank(self, var: str) -> str:
        """Tensor-side rank name for an owned (possibly derived) variable."""
        if var in self.plain:
            return self.plain[var]
        group = self.space.group_of(var)
        if group is not None and var != group.base:
            base_rank = self.leaf_rank(group.base)
            level = group.levels.index(var)
            suffix = len(group.levels) - 1 - level
            rank = f"{base_rank}{suffix}"
            self.derivations[rank] = ("split", base_rank)
            return rank
        if var in self.space.flattened:
            upper, lower = self.space.flattened[var]
            rank = self.leaf_rank(upper) + self.leaf_rank(lower)
            self.derivations[rank] = ("flat", self.leaf_rank(upper), self.leaf_rank(lower))
            return rank
        raise CompileError(f"{self.ref.tensor} does not own variable {var}")

    # -- participation -----------------------------------------------------
    def participation(self) -> dict:
        """loop level index -> (role, loop var)."""
        steps = {}
        for li, lv in enumerate(self.loop):
            if self.owns(lv):
                steps[li] = (DRIVE, lv)
                continue
            extract = self._extract_component(lv)
            if extract is not None:
                steps[li] = (LOOKUP_EXTRACT, lv)
        for sub in self.affine_subs:
            poss = []
            for v in (sub.left, sub.right):
                poss.append(max((li for li, lv in enumerate(self.loop)
                                 if v in base_constituents(lv, self.space)), default=-1))
            li = max(poss)
            if li < 0:
                raise CompileError(
                    f"affine subscript {sub.render()} of {self.ref.tensor} uses "
                    f"variables absent from the loop order")
            if li in steps:
                raise CompileError(
                    f"{self.ref.tensor}: affine subscript collides with rank at level {li}")
            steps[li] = (LOOKUP_AFFINE, (sub.left, sub.right))
        return steps

    def _extract_component(self, loop_var: str) -> Optional[tuple]:
        """(flat var, component index) when this leaf owns part of a flattened
        rank and must read its coordinate component from the tuple."""
        group = self.space.group_of(loop_var)
        base = group.base if group else loop_var
        if base not in self.space.flattened:
            return None
        if group and loop_var != group.levels[-1]:
            return None  # only the bottom level carries usable tuple coords
        flat_def = self.space.flattened[base]
        owned = [(i, comp) for i, comp in enumerate(flat_def) if self.owns(comp)]
        if len(owned) == 1:
            return (loop_var, owned[0][0], owned[0][1])
        return None

    # -- group properties ----------------------------------------------------
    def group_is_static(self, group) -> bool:
        return all(isinstance(d, UniformShape) for d in group.directives)

    def _resolved_sizes(self, group) -> tuple:
        return tuple(self.spec.resolve_size(d.size)
                     for d in group.directives)

    # -- plan construction ---------------------------------------------------
    def build(self) -> LeafPlan:
        participation = self.participation()
        # service rank per level: the leaf-side rank presented at that level
        service: dict = {}
        for li, (role, info) in sorted(participation.items()):
            if role == DRIVE:
                service[li] = self.leaf_rank(info)
            elif role == LOOKUP_EXTRACT:
                _, _comp_idx, comp_var = self._extract_component(info)
                service[li] = self.leaf_rank(comp_var)
            else:
                # affine lookup descends the rank subscripted by the sum
                pos = self.ref.subscripts.index(
                    next(s for s in self.affine_subs
                         if (s.left, s.right) == info))
                service[li] = self.spec.declaration[self.ref.tensor][pos]

        # Static order: each serviced rank at its level; ranks of a dynamic
        # (occupancy) group collapse to the unchopped base rank at the
        # group's first level.
        static_order: list = []
        chopped_at: dict = {}
        for li in sorted(service):
            role, info = participation[li]
            rank = service[li]
            var = info if isinstance(info, str) else None
            group = self.space.group_of(var) if var else None
            if role == DRIVE and group is not None and _dynamic_group(self, group):
                base_rank = self.leaf_rank(group.base)
                if base_rank not in static_order:
                    static_order.append(base_rank)
                    chopped_at[group.base] = li
            else:
                if rank not in static_order:
                    static_order.append(rank)

        prelude = self._build_prelude(static_order)
        steps = self._build_steps(participation, service, static_order)
        return LeafPlan(self.idx, self.ref.tensor, self.ref.subscripts, prelude,
                        static_order, steps, self.lazy, self.intermediate)

    def _build_prelude(self, static_order: list) -> list:
        """Static chain: shape splits, flattens (with adjacency swizzles),
        then one swizzle to the static order."""
        order = list(self.spec.mapping.rank_order[self.ref.tensor])
        steps: list = []
        parts = self.spec.mapping.partitioning.get(self.e.id, {})
        for key in parts:
            key_n = specs._norm_part_key(key)
            if isinstance(key_n, tuple):
                upper, lower = key_n
                if not (self.owns(upper) and self.owns(lower)):
                    continue
                ur, lr = self.leaf_rank(upper), self.leaf_rank(lower)
                if ur not in order or lr not in order:
                    raise CompileError(
                        f"{self.ref.tensor}: flatten ranks {ur},{lr} not materialized")
                if order.index(lr) != order.index(ur) + 1:
                    new = [r for r in order if r != lr]
                    new.insert(new.index(ur) + 1, lr)
                    steps.append(SwizzleStep(tuple(order), tuple(new),
                                             online=self.intermediate))
                    order = new
                flat = ur + lr
                steps.append(FlattenStep(ur, lr, flat))
                i = order.index(ur)
                order[i:i + 2] = [flat]
                continue
            group = self.space.splits.get(key_n)
            if group is None or not self.owns(group.base):
                continue
            if self.group_is_static(group):
                base_rank = self.leaf_rank(group.base)
                if base_rank not in order:
                    raise CompileError(
                        f"{self.ref.tensor}: split rank {base_rank} not materialized")
                levels = tuple(self.leaf_rank(v) for v in group.levels)
                steps.append(SplitStep(base_rank, self._resolved_sizes(group), levels))
                i = order.index(base_rank)
                order[i:i + 1] = list(levels)
        if order != static_order:
            if sorted(order) != sorted(static_order):
                raise CompileError(
                    f"{self.ref.tensor}: cannot reach static order {static_order} "
                    f"from {order}")
            steps.append(SwizzleStep(tuple(order), tuple(static_order),
                                     online=self.intermediate))
        return steps

    def _build_steps(self, participation: dict, service: dict,
                     static_order: list) -> dict:
        """Symbolic traversal: detect where dynamic chops and per-subtree
        swizzles are needed and record them per loop level."""
        remaining = list(static_order)
        steps: dict = {}
        chopped: set = set()
        levels_sorted = sorted(participation)
        for li in levels_sorted:
            role, info = participation[li]
            rank = service[li]
            step = LevelStep(role=role, rank=rank)
            var = info if isinstance(info, str) else None
            group = self.space.group_of(var) if var else None
            target = rank
            if role == DRIVE and group is not None and _dynamic_group(self, group) \
                    and group.base not in chopped:
                base_rank = self.leaf_rank(group.base)
                if remaining and remaining[0] != base_rank:
                    remaining = self._dyn_swizzle(step, remaining, base_rank, li,
                                                  levels_sorted, participation, service)
                if not remaining or remaining[0] != base_rank:
                    raise CompileError(
                        f"{self.ref.tensor}: cannot chop {base_rank}; "
                        f"remaining order {remaining}")
                leader = None
                for d in group.directives:
                    if isinstance(d, UniformOccupancy):
                        leader = d.leader
                kinds = tuple(
                    ("occupancy" if isinstance(d, UniformOccupancy) else "shape",
                     self.spec.resolve_size(d.size))
                    for d in group.directives)
                levels = tuple(self.leaf_rank(v) for v in group.levels)
                step.chop = ChopSpec(group.base, base_rank, levels, kinds, leader)
                remaining[0:1] = list(levels)
                chopped.add(group.base)
            if remaining and remaining[0] != target:
                remaining = self._dyn_swizzle(step, remaining, target, li,
                                              levels_sorted, participation, service)
            if not remaining or remaining[0] != target:
                raise CompileError(
                    f"{self.ref.tensor}: expected rank {target} at loop level {li}, "
                    f"traversal order is {remaining}")
            if role == LOOKUP_AFFINE:
                step.affine = info
            elif role == LOOKUP_EXTRACT:
                extract = self._extract_component(info)
                step.extract = (info, extract[1])
            steps[li] = step
            remaining = remaining[1:]
        return steps

    def _dyn_swizzle(self, step: LevelStep, remaining: list, target: str,
                     li: int, levels_sorted: list, participation: dict,
                     service: dict) -> list:
        """Reorder the current subtree so `target` is on top; later ranks are
        ordered by the level at which they will be serviced."""
        if target not in remaining:
            raise CompileError(
                f"{self.ref.tensor}: rank {target} not in traversal order {remaining}")
        pos_of = {}
        for lj in levels_sorted:
            if lj < li:
                continue
            role, info = participation[lj]
            var = info if isinstance(info, str) else None
            group = self.space.group_of(var) if var else None
            name = service[lj]
            if role == DRIVE and group is not None and _dynamic_group(self, group) \
                    and self.leaf_rank(group.base) in remaining:
                name = self.leaf_rank(group.base)
            if name in remaining and name not in pos_of:
                pos_of[name] = lj
        new_order = sorted(remaining, key=lambda r: pos_of.get(r, 1_000_000))
        if new_order[0] != target:
            new_order.remove(target)
            new_order.insert(0, target)
        step.swizzle = SwizzleStep(tuple(remaining), tuple(new_order),
                                   online=self.intermediate, scope="per-subtree")
        return new_order


def _dynamic_group(builder: _LeafBuilder, group) -> bool:
    """True when the group must be chopped dynamically (any occupancy level)."""
    return not builder.group_is_static(group)


# ---------------------------------------------------------------------------
# Einsum compilation


def compile_einsum(spec: ProblemSpec, eid: str, cascade: Optional[CascadeDAG] = None) -> LoopNest:
    if cascade is None:
        cascade = specs.build_cascade(spec)
    e = spec.einsum(eid)
    semiring = make_semiring(spec.operators.add, spec.operators.mul)

    if e.is_copy:
        src = e.expr.tensor
        return LoopNest(e, [], [], OutputPlan(e.output, [], [], None,
                                              [s.name for s in e.out_subs]),
                        [], semiring, VarSpace([]), [], [], [], {}, copy_alias=src)

    space = apply_partitioning(spec, eid)
    loop = list(spec.mapping.loop_order[eid])
    if sorted(loop) != sorted(space.variables):
        raise CompileError(f"{eid}: loop order {loop} does not cover the "
                           f"iteration space {sorted(space.variables)}")
    st = spec.mapping.spacetime[eid]

    producers = _producers_before(spec, e)
    refs = _leaf_refs(e.expr)
    lazy = _lazy_leaves(e.expr)
    leaves = []
    derivations: dict = {}
    for idx, ref in enumerate(refs):
        builder = _LeafBuilder(spec, e, space, loop, idx, ref,
                               lazy=idx in lazy,
                               intermediate=ref.tensor in producers)
        leaves.append(builder.build())
        if builder.derivations:
            derivations.setdefault(ref.tensor, {}).update(builder.derivations)

    drive_map = {leaf.idx: {loop[li] for li in leaf.drive_levels()} for leaf in leaves}
    levels = []
    for li, lv in enumerate(loop):
        drivers = [leaf.idx for leaf in leaves
                   if li in leaf.steps and leaf.steps[li].role == DRIVE]
        tree = _coiter_tree(e.expr, lv, drive_map) if drivers else None
        tree = _prune_tree(tree, set(drivers))
        has_lookup = any(li in leaf.steps and leaf.steps[li].role != DRIVE
                         for leaf in leaves)
        kind = _level_kind(tree, has_lookup, drivers)
        levels.append(LoopLevel(lv, kind, lv in st.space, drivers, tree))

    out_vars = [s.name for s in e.out_subs if isinstance(s, Var)]
    production = collapse_last(loop, space, set(out_vars))
    for v in out_vars:
        if v not in production:
            production.append(v)
    decl = spec.declaration[e.output]
    var_rank = dict(zip([s.name for s in e.out_subs], decl))
    production_ranks = [var_rank[v] for v in production]
    stored = list(spec.mapping.rank_order[e.output])
    storage = None
    if production_ranks != stored:
        storage = SwizzleStep(tuple(production_ranks), tuple(stored),
                              online=bool(cascade.consumers(eid)), scope="full")
    output = OutputPlan(e.output, production, production_ranks, storage, out_vars)

    reduction = [v for v in collapse_last(loop, space, set(space_vars_of(loop, space)))
                 if v not in out_vars]

    online: list = []
    if storage is not None and storage.online:
        online.append(OnlineSwizzle(e.output, storage.from_order, storage.to_order, "full"))
    for leaf in leaves:
        if not leaf.intermediate:
            continue
        for step in leaf.prelude:
            if isinstance(step, SwizzleStep):
                online.append(OnlineSwizzle(leaf.tensor, step.from_order,
                                            step.to_order, "full"))
        for li in sorted(leaf.steps):
            sw = leaf.steps[li].swizzle
            if sw is not None:
                online.append(OnlineSwizzle(leaf.tensor, sw.from_order,
                                            sw.to_order, "per-subtree"))

    return LoopNest(e, levels, leaves, output, reduction, semiring, space,
                    list(st.space), list(st.time), online, derivations)


def space_vars_of(loop: list, space: VarSpace) -> list:
    seen = []
    for lv in loop:
        for bv in base_constituents(lv, space):
            if bv not in seen:
                seen.append(bv)
    return seen


def _prune_tree(tree, drivers: set):
    if tree is None:
        return None
    if tree[0] == "leaf":
        return tree if tree[1] in drivers else None
    children = [_prune_tree(c, drivers) for c in tree[1]]
    children = [c for c in children if c is not None]
    if not children:
        return None
    if len(children) == 1:
        return children[0]
    return (tree[0], children)


def _level_kind(tree, has_lookup: bool, drivers: list) -> str:
    if not drivers:
        return "sequential"
    if has_lookup:
        return "leader-follow"
    if tree is None or tree[0] == "leaf":
        return "sequential"
    kinds = _tree_kinds(tree)
    if "or" in kinds:
        return "union"
    return "intersect"


def _producers_before(spec: ProblemSpec, e: EinsumDecl) -> set:
    """Tensors whose current version, at this einsum, was written upstream."""
    produced = set()
    for other in spec.einsums:
        if other.id == e.id:
            break
        produced.add(other.output)
    return produced


def compile_cascade(spec: ProblemSpec, cascade: Optional[CascadeDAG] = None) -> dict:
    if cascade is None:
        cascade = specs.build_cascade(spec)
    return {e.id: compile_einsum(spec, e.id, cascade) for e in spec.einsums}


# ---------------------------------------------------------------------------
# Fusion


def temporal_prefix(loop: list, space_ranks: list) -> list:
    prefix = []
    for lv in loop:
        if lv in space_ranks:
            break
        prefix.append(lv)
    return prefix


def fusion_schedule(spec: ProblemSpec, cascade: Optional[CascadeDAG] = None,
                    nests: Optional[dict] = None) -> FusionSchedule:
    """Greedy maximal fusion blocks in topological order.

    Einsums fuse when (1) they bind the same topology, (2) the temporal loop
    ranks before the first spatial rank agree, and (3) no non-storage
    component is bound by more than one of them.  Ties take the earliest
    topological position.
    """
    if cascade is None:
        cascade = specs.build_cascade(spec)
    order = cascade.topological_order()
    blocks: list = []
    current: list = []
    for eid in order:
        if not current:
            current = [eid]
            continue
        if all(_fusable(spec, eid, other) for other in current):
            current.append(eid)
        else:
            blocks.append(current)
            current = [eid]
    if current:
        blocks.append(current)
    return FusionSchedule(blocks)


def _fusable(spec: ProblemSpec, a: str, b: str) -> bool:
    ba = spec.binding.get(a)
    bb = spec.binding.get(b)
    topo_a = ba.topology if ba else None
    topo_b = bb.topology if bb else None
    if topo_a != topo_b:
        return False
    st_a = spec.mapping.spacetime[a]
    st_b = spec.mapping.spacetime[b]
    pa = temporal_prefix(spec.mapping.loop_order[a], st_a.space)
    pb = temporal_prefix(spec.mapping.loop_order[b], st_b.space)
    if pa != pb:
        return False
    topo = spec.architecture.get(topo_a) if topo_a else None
    if topo is not None:
        non_storage = {c.name for c, _ in topo.all_components()
                       if c.cls in ("Compute", "Intersection", "Merger")}
        used_a = _used_components(ba, non_storage)
        used_b = _used_components(bb, non_storage)
        if used_a & used_b:
            return False
    return True


def _used_components(binding, non_storage: set) -> set:
    if binding is None:
        return set()
    return {name for name, items in binding.components.items()
            if name in non_storage and items}


# ---------------------------------------------------------------------------
# IR dump


def dump_ir(nest: LoopNest) -> str:
    lines = [f"einsum {nest.id}: {nest.einsum.render()}"]
    if nest.copy_alias:
        lines.append(f"  alias of {nest.copy_alias}")
        return "\n".join(lines) + "\n"
    for leaf in nest.leaves:
        tag = "intermediate" if leaf.intermediate else "input"
        lazy = " lazy" if leaf.lazy else ""
        lines.append(f"  tensor {leaf.tensor}[{leaf.idx}] ({tag}{lazy}) "
                     f"static-order {list(leaf.static_order)}")
        for step in leaf.prelude:
            lines.append(f"    prelude {_step_text(step)}")
    for li, level in enumerate(nest.loop_ranks):
        st = "space" if level.is_space else "time"
        extra = []
        for leaf in nest.leaves:
            step = leaf.steps.get(li)
            if step is None:
                continue
            if step.chop:
                extra.append(f"chop {leaf.tensor}.{step.chop.rank}"
                             f"->{list(step.chop.level_ranks)}"
                             + (f" leader={step.chop.leader}" if step.chop.leader else ""))
            if step.swizzle:
                extra.append(f"swizzle {leaf.tensor} {list(step.swizzle.from_order)}"
                             f"->{list(step.swizzle.to_order)}")
            if step.role == LOOKUP_AFFINE:
                extra.append(f"lookup {leaf.tensor}[{step.affine[0].lower()}"
                             f"+{step.affine[1].lower()}]")
            if step.role == LOOKUP_EXTRACT:
                extra.append(f"lookup {leaf.tensor} from {step.extract[0]}")
        suffix = ("  [" + "; ".join(extra) + "]") if extra else ""
        lines.append(f"  loop {level.rank} ({st}, {level.kind})" + suffix)
    lines.append(f"  populate {nest.output.tensor} order "
                 f"{list(nest.output.production_ranks)}"
                 + (f" then swizzle {list(nest.output.storage_swizzle.to_order)}"
                    if nest.output.storage_swizzle else ""))
    if nest.reduction_ranks:
        lines.append(f"  reduce over {list(nest.reduction_ranks)} "
                     f"with {nest.semiring.add_name}")
    for sw in nest.online_swizzles:
        lines.append(f"  online swizzle {sw.tensor}: {list(sw.from_order)} -> "
                     f"{list(sw.to_order)} ({sw.scope})")
    return "\n".join(lines) + "\n"


def _step_text(step) -> str:
    if isinstance(step, SplitStep):
        return f"split {step.rank} sizes {list(step.sizes)} -> {list(step.level_ranks)}"
    if isinstance(step, FlattenStep):
        return f"flatten ({step.upper}, {step.lower}) -> {step.flat_rank}"
    tag = "online" if step.online else "offline"
    return f"swizzle {list(step.from_order)} -> {list(step.to_order)} ({tag})"
