"""Fibertree tensors: hierarchical fibers of coordinate/payload elements.

A Tensor is a tree with one level per named rank.  Intermediate payloads
are child Fibers; leaf payloads are scalars.  Coordinates within a fiber
are strictly increasing; absent elements denote the additive identity.
Coordinates are ints, or tuples of ints after flattening (compared
lexicographically, which Python tuples already do).

Content-preserving transformations (swizzle, partitioning, flattening)
build new trees and never mutate their input.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator, Optional

ABSENT = object()  # sentinel distinct from any payload


class Fiber:
    """An ordered set of (coordinate, payload) elements."""

    __slots__ = ("coords", "payloads")

    def __init__(self, coords=None, payloads=None):
        self.coords: list = list(coords) if coords else []
        self.payloads: list = list(payloads) if payloads else []
        if len(self.coords) != len(self.payloads):
            raise ValueError("coords and payloads must have equal length")

    def __len__(self):
        return len(self.coords)

    def __bool__(self):
        return bool(self.coords)

    def __iter__(self) -> Iterator[tuple]:
        return iter(zip(self.coords, self.payloads))

    def __eq__(self, other):
        if not isinstance(other, Fiber):
            return NotImplemented
        return self.coords == other.coords and self.payloads == other.payloads

    def __repr__(self):
        items = ", ".join(f"{c}->{p!r}" for c, p in self)
        return f"Fiber({{{items}}})"

    def position_of(self, coord) -> int:
        """Index of `coord`, or -1 if absent.  Logarithmic in occupancy."""
        i = bisect.bisect_left(self.coords, coord)
        if i < len(self.coords) and self.coords[i] == coord:
            return i
        return -1

    def copy_shallow(self) -> "Fiber":
        return Fiber(self.coords, self.payloads)


def get_payload(fiber: Fiber, coord):
    """Payload at `coord`, or ABSENT."""
    i = fiber.position_of(coord)
    return ABSENT if i < 0 else fiber.payloads[i]


def populate(fiber: Fiber, coord, default: Callable[[], Any]):
    """Return the payload at `coord`, inserting default() if missing.

    Insertion preserves coordinate order.  Returns the (possibly new)
    payload; callers mutate child fibers in place or re-store scalars
    with set_payload.
    """
    i = bisect.bisect_left(fiber.coords, coord)
    if i < len(fiber.coords) and fiber.coords[i] == coord:
        return fiber.payloads[i]
    value = default()
    fiber.coords.insert(i, coord)
    fiber.payloads.insert(i, value)
    return value


def set_payload(fiber: Fiber, coord, value):
    i = bisect.bisect_left(fiber.coords, coord)
    if i < len(fiber.coords) and fiber.coords[i] == coord:
        fiber.payloads[i] = value
    else:
        fiber.coords.insert(i, coord)
        fiber.payloads.insert(i, value)


def intersect(a: Fiber, b: Fiber) -> Iterable[tuple]:
    """Yield (coord, (payload_a, payload_b)) for coords present in both."""
    ia = ib = 0
    ca, cb = a.coords, b.coords
    while ia < len(ca) and ib < len(cb):
        if ca[ia] < cb[ib]:
            ia += 1
        elif cb[ib] < ca[ia]:
            ib += 1
        else:
            yield ca[ia], (a.payloads[ia], b.payloads[ib])
            ia += 1
            ib += 1


def union(a: Fiber, b: Fiber, default_a=0, default_b=0) -> Iterable[tuple]:
    """Yield (coord, (payload_a | default_a, payload_b | default_b)) over either."""
    ia = ib = 0
    ca, cb = a.coords, b.coords
    while ia < len(ca) or ib < len(cb):
        if ib >= len(cb) or (ia < len(ca) and ca[ia] < cb[ib]):
            yield ca[ia], (a.payloads[ia], default_b)
            ia += 1
        elif ia >= len(ca) or cb[ib] < ca[ia]:
            yield cb[ib], (default_a, b.payloads[ib])
            ib += 1
        else:
            yield ca[ia], (a.payloads[ia], b.payloads[ib])
            ia += 1
            ib += 1


@dataclass
class PartitionSplit:
    """Boundary coordinates of one fiber's partitioning.

    Each boundary labels a new upper-rank element and equals the first
    coordinate of the lower fiber it heads.
    """

    boundaries: list = field(default_factory=list)

    def chunk_of(self, coord) -> int:
        """Index of the chunk holding `coord`.

        Coordinates below the first boundary join chunk 0 so that follower
        content is never dropped (harmless for intersection-driven ranks).
        """
        if not self.boundaries:
            return -1
        return max(0, bisect.bisect_right(self.boundaries, coord) - 1)


@dataclass
class Tensor:
    """A named fibertree with an ordered list of ranks."""

    name: str
    rank_names: list
    shape: list  # per rank: int extent, or tuple of extents for flattened ranks
    root: Fiber = field(default_factory=Fiber)

    def __post_init__(self):
        if len(self.rank_names) != len(self.shape):
            raise ValueError("rank_names and shape must align")

    @property
    def depth(self) -> int:
        return len(self.rank_names)

    def rank_index(self, rank: str) -> int:
        try:
            return self.rank_names.index(rank)
        except ValueError:
            raise KeyError(f"tensor {self.name} has no rank {rank!r}") from None

    def shape_of(self, rank: str):
        return self.shape[self.rank_index(rank)]

    def paths(self) -> Iterator[tuple]:
        """Yield (coordinate tuple, leaf value) for every stored leaf."""
        yield from _walk(self.root, self.depth, ())

    def occupancy(self, rank: str) -> int:
        """Total element count across all fibers of `rank`."""
        depth = self.rank_index(rank)
        total = 0
        for fiber in self.fibers_at(depth):
            total += len(fiber)
        return total

    def fibers_at(self, depth: int) -> Iterator[Fiber]:
        stack = [(self.root, 0)]
        while stack:
            fiber, d = stack.pop()
            if d == depth:
                yield fiber
            else:
                for p in fiber.payloads:
                    stack.append((p, d + 1))

    def is_empty(self) -> bool:
        return not self.root

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return (self.rank_names == other.rank_names and self.shape == other.shape
                and self.root == other.root)


def _walk(fiber: Fiber, depth: int, prefix: tuple) -> Iterator[tuple]:
    if depth == 1:
        for c, p in fiber:
            yield prefix + (c,), p
    else:
        for c, p in fiber:
            yield from _walk(p, depth - 1, prefix + (c,))


def tree_from_paths(paths: Iterable[tuple]) -> Fiber:
    """Build a fibertree from (coordinate tuple, value) pairs, sorting coords."""
    root = Fiber()
    for coords, value in sorted(paths, key=lambda kv: kv[0]):
        fiber = root
        for c in coords[:-1]:
            fiber = populate(fiber, c, Fiber)
        set_payload(fiber, coords[-1], value)
    return root


def from_dense(data, rank_names: list, zero=0, name: str = "T") -> Tensor:
    """Build a fibertree from a rectangular nested array.

    Elements equal to `zero` (and recursively empty fibers) are omitted.
    Pass zero=None to keep every element, producing a fully-populated tree
    (used for tensors whose explicit zeros must generate traffic).
    """
    shape = _dense_shape(data, len(rank_names))
    root = _from_dense(data, len(rank_names), zero)
    return Tensor(name, list(rank_names), shape, root if root is not None else Fiber())


def _dense_shape(data, depth: int) -> list:
    shape = []
    node = data
    for level in range(depth):
        try:
            n = len(node)
        except TypeError:
            raise ValueError("nested array shallower than rank count") from None
        shape.append(n)
        if level < depth - 1:
            if n == 0:
                raise ValueError("cannot infer shape from empty inner array")
            node = node[0]
    _check_rectangular(data, shape)
    return shape


def _check_rectangular(data, shape):
    if not shape:
        return
    if len(data) != shape[0]:
        raise ValueError("ragged input")
    if len(shape) > 1:
        for sub in data:
            _check_rectangular(sub, shape[1:])


def _from_dense(data, depth: int, zero) -> Optional[Fiber]:
    fiber = Fiber()
    for c, item in enumerate(data):
        if depth == 1:
            value = item
            if zero is not None and value == zero:
                continue
            fiber.coords.append(c)
            fiber.payloads.append(value)
        else:
            child = _from_dense(item, depth - 1, zero)
            if child is None:
                continue
            fiber.coords.append(c)
            fiber.payloads.append(child)
    if zero is not None and not fiber:
        return None
    return fiber


def to_dense(t: Tensor, zero=0):
    """Inverse of from_dense up to zero omission (nested Python lists)."""
    for extent in t.shape:
        if not isinstance(extent, int):
            raise ValueError("to_dense requires unflattened integer shapes")
    return _to_dense(t.root, t.shape, zero)


def _to_dense(fiber: Fiber, shape, zero):
    if len(shape) == 1:
        row = [zero] * shape[0]
        for c, p in fiber:
            row[c] = p
        return row
    out = [_to_dense(Fiber(), shape[1:], zero) for _ in range(shape[0])]
    for c, p in fiber:
        out[c] = _to_dense(p, shape[1:], zero)
    return out


def swizzle(t: Tensor, new_order: list) -> Tensor:
    """Reorder the tensor's ranks.  Content-preserving."""
    if sorted(map(str, new_order)) != sorted(map(str, t.rank_names)):
        raise ValueError(f"{new_order} is not a permutation of {t.rank_names}")
    if list(new_order) == list(t.rank_names):
        return Tensor(t.name, list(t.rank_names), list(t.shape), _copy_tree(t.root, t.depth))
    perm = [t.rank_index(r) for r in new_order]
    paths = ((tuple(coords[i] for i in perm), v) for coords, v in t.paths())
    shape = [t.shape[i] for i in perm]
    return Tensor(t.name, list(new_order), shape, tree_from_paths(paths))


def _copy_tree(fiber: Fiber, depth: int) -> Fiber:
    if depth <= 1:
        return fiber.copy_shallow()
    return Fiber(fiber.coords, [_copy_tree(p, depth - 1) for p in fiber.payloads])


def shape_split_boundaries(fiber: Fiber, size: int) -> PartitionSplit:
    """Boundaries for a uniform-shape split: multiples of `size` that occur."""
    seen = []
    for c in fiber.coords:
        base = (c // size) * size
        if not seen or seen[-1] != base:
            seen.append(base)
    return PartitionSplit(seen)


def occupancy_split_boundaries(fiber: Fiber, size: int) -> PartitionSplit:
    """Boundaries for a uniform-occupancy split: every `size`-th coordinate."""
    if size < 1:
        raise ValueError("occupancy chunk size must be >= 1")
    return PartitionSplit([fiber.coords[i] for i in range(0, len(fiber), size)])


def split_fiber(fiber: Fiber, split: PartitionSplit, upper_coords=None) -> Fiber:
    """Group a fiber's elements into an upper fiber of chunk fibers.

    `upper_coords` overrides the chunk labels (used by shape splits, where
    the label is the range base rather than the first present coordinate).
    """
    upper = Fiber()
    if not split.boundaries:
        return upper
    labels = upper_coords if upper_coords is not None else split.boundaries
    chunks = [Fiber() for _ in split.boundaries]
    for c, p in fiber:
        i = split.chunk_of(c)
        chunks[i].coords.append(c)
        chunks[i].payloads.append(p)
    for label, chunk in zip(labels, chunks):
        if chunk:
            upper.coords.append(label)
            upper.payloads.append(chunk)
    return upper


def partition_uniform_shape(t: Tensor, rank: str, size: int,
                            names: Optional[tuple] = None) -> Tensor:
    """Split `rank` at coordinate boundaries i*size.

    The element with coordinate c lands under upper coordinate
    (c // size) * size and keeps its absolute coordinate below.
    """
    if size < 1:
        raise ValueError("shape chunk size must be >= 1")
    depth = t.rank_index(rank)
    upper_name, lower_name = names or (f"{rank}1", f"{rank}0")

    def transform(fiber: Fiber) -> Fiber:
        return split_fiber(fiber, shape_split_boundaries(fiber, size))

    root = _rebuild_at(t.root, depth, transform)
    rank_names = t.rank_names[:depth] + [upper_name, lower_name] + t.rank_names[depth + 1:]
    shape = t.shape[:depth] + [t.shape[depth], min(size, t.shape[depth])] + t.shape[depth + 1:]
    return Tensor(t.name, rank_names, shape, root)


def partition_uniform_occupancy(leader: Tensor, followers: list, rank: str, size: int,
                                names: Optional[tuple] = None) -> dict:
    """Chop the leader's `rank` fibers into chunks of exactly `size` elements
    (last chunk smaller), then apply the leader's coordinate ranges to every
    follower.  Followers must hold `rank` at their root or under the same
    ancestry; here the static form requires `rank` at the root of each
    follower or a context-free leader (rank at the leader's root).  The
    executor applies the per-fiber dynamic form during traversal.

    Returns {tensor name: partitioned tensor} for the leader and followers.
    """
    if size < 1:
        raise ValueError("occupancy chunk size must be >= 1")
    depth = leader.rank_index(rank)
    if depth != 0:
        raise ValueError("static occupancy partitioning requires the rank at the leader's root")
    split = occupancy_split_boundaries(leader.root, size)
    upper_name, lower_name = names or (f"{rank}1", f"{rank}0")

    out = {}
    for t in [leader] + list(followers):
        d = t.rank_index(rank)
        if d != 0:
            raise ValueError("static occupancy partitioning requires the rank at each root")
        root = split_fiber(t.root, split)
        rank_names = [upper_name, lower_name] + t.rank_names[1:]
        shape = [t.shape[0], t.shape[0]] + t.shape[1:]
        out[t.name] = Tensor(t.name, rank_names, shape, root)
    return out


def flatten(t: Tensor, ranks: list, name: Optional[str] = None) -> Tensor:
    """Merge two adjacent ranks into one rank of tuple coordinates.

    Tuple coordinates are (upper, lower), ordered lexicographically, and
    contain exactly the points that had nonempty payloads.
    """
    if len(ranks) != 2:
        raise ValueError("flatten merges exactly two ranks")
    upper, lower = ranks
    du = t.rank_index(upper)
    if du + 1 >= t.depth or t.rank_names[du + 1] != lower:
        raise ValueError(f"ranks {ranks} are not adjacent in {t.rank_names}")
    flat_name = name if name is not None else _flat_name(upper, lower)

    def transform(fiber: Fiber) -> Fiber:
        out = Fiber()
        for cu, child in fiber:
            for cl, p in child:
                out.coords.append(_flat_coord(cu, cl))
                out.payloads.append(p)
        return out

    root = _rebuild_at(t.root, du, transform)
    rank_names = t.rank_names[:du] + [flat_name] + t.rank_names[du + 2:]
    shape = t.shape[:du] + [_flat_shape(t.shape[du], t.shape[du + 1])] + t.shape[du + 2:]
    return Tensor(t.name, rank_names, shape, root)


def _flat_name(upper: str, lower: str) -> str:
    return f"{upper}{lower}"


def _flat_coord(cu, cl) -> tuple:
    u = cu if isinstance(cu, tuple) else (cu,)
    l = cl if isinstance(cl, tuple) else (cl,)
    return u + l


def _flat_shape(su, sl) -> tuple:
    u = su if isinstance(su, tuple) else (su,)
    l = sl if isinstance(sl, tuple) else (sl,)
    return u + l


def _rebuild_at(fiber: Fiber, depth: int, transform) -> Fiber:
    if depth == 0:
        return transform(fiber)
    return Fiber(fiber.coords, [_rebuild_at(p, depth - 1, transform) for p in fiber.payloads])


def compact(t: Tensor) -> Tensor:
    """Drop empty child fibers recursively (explicit zero scalars are kept)."""
    root = _compact(t.root, t.depth)
    return Tensor(t.name, list(t.rank_names), list(t.shape), root or Fiber())


def _compact(fiber: Fiber, depth: int) -> Optional[Fiber]:
    if depth == 1:
        return fiber if fiber else None
    out = Fiber()
    for c, p in fiber:
        child = _compact(p, depth - 1)
        if child is not None:
            out.coords.append(c)
            out.payloads.append(child)
    return out if out else None


def check_coordinate_order(t: Tensor) -> bool:
    """True iff every fiber's coordinates are strictly increasing."""
    for depth in range(t.depth):
        for fiber in t.fibers_at(depth):
            for a, b in zip(fiber.coords, fiber.coords[1:]):
                if not a < b:
                    return False
    return True


def count_leaves(t: Tensor) -> int:
    return sum(1 for _ in t.paths())
