import random

import pytest

from fibersim.fibertree import (
    ABSENT,
    Fiber,
    Tensor,
    check_coordinate_order,
    count_leaves,
    flatten,
    from_dense,
    get_payload,
    intersect,
    occupancy_split_boundaries,
    partition_uniform_occupancy,
    partition_uniform_shape,
    populate,
    split_fiber,
    swizzle,
    to_dense,
    union,
)


def random_dense(rng, shape, density):
    if len(shape) == 1:
        return [rng.randint(1, 9) if rng.random() < density else 0 for _ in range(shape[0])]
    return [random_dense(rng, shape[1:], density) for _ in range(shape[0])]


class TestFromToDense:
    def test_diagonal(self):
        t = from_dense([[1, 0], [0, 2]], ["M", "K"])
        assert t.root.coords == [0, 1]
        k0 = t.root.payloads[0]
        k1 = t.root.payloads[1]
        assert (k0.coords, k0.payloads) == ([0], [1])
        assert (k1.coords, k1.payloads) == ([1], [2])

    def test_all_zero(self):
        t = from_dense([[0, 0, 0]] * 3, ["M", "K"])
        assert t.is_empty()
        assert to_dense(t) == [[0, 0, 0]] * 3

    def test_single_entry(self):
        t = from_dense([[0, 5]], ["M", "K"])
        assert t.root.coords == [0]
        assert t.root.payloads[0].coords == [1]
        assert t.root.payloads[0].payloads == [5]

    def test_one_dim(self):
        t = Tensor("v", ["X"], [5], Fiber([3], [7]))
        assert to_dense(t) == [0, 0, 0, 7, 0]

    def test_empty_to_dense(self):
        t = Tensor("z", ["M", "K"], [2, 2])
        assert to_dense(t) == [[0, 0], [0, 0]]

    def test_round_trip_random(self):
        rng = random.Random(7)
        for _ in range(20):
            data = random_dense(rng, [8, 8], 0.25)
            assert to_dense(from_dense(data, ["M", "K"])) == data

    def test_ragged_raises(self):
        with pytest.raises(ValueError):
            from_dense([[1, 2], [3]], ["M", "K"])

    def test_keep_zeros(self):
        t = from_dense([[1, 0], [0, 0]], ["M", "K"], zero=None)
        assert count_leaves(t) == 4


class TestFiberOps:
    def test_get_payload(self):
        f = Fiber([1, 3], ["a", "b"])
        assert get_payload(f, 3) == "b"
        assert get_payload(f, 2) is ABSENT
        assert get_payload(Fiber(), 0) is ABSENT

    def test_intersect(self):
        a = Fiber([1, 3, 5], [10, 30, 50])
        b = Fiber([3, 4, 5], [3, 4, 5])
        out = list(intersect(a, b))
        assert [c for c, _ in out] == [3, 5]
        assert out[0][1] == (30, 3)

    def test_intersect_empty(self):
        a = Fiber([1, 2], [1, 2])
        assert list(intersect(a, Fiber())) == []

    def test_intersect_matches_set_oracle(self):
        rng = random.Random(3)
        for _ in range(50):
            ca = sorted(rng.sample(range(30), rng.randint(0, 12)))
            cb = sorted(rng.sample(range(30), rng.randint(0, 12)))
            a = Fiber(ca, ca)
            b = Fiber(cb, cb)
            got = [c for c, _ in intersect(a, b)]
            assert got == sorted(set(ca) & set(cb))

    def test_union(self):
        a = Fiber([1, 3], [1, 3])
        b = Fiber([3, 4], [30, 40])
        out = list(union(a, b, default_a=0, default_b=0))
        assert [c for c, _ in out] == [1, 3, 4]
        assert out[0][1] == (1, 0)
        assert out[1][1] == (3, 30)

    def test_union_identity(self):
        b = Fiber([2, 5], [1, 1])
        out = list(union(Fiber(), b))
        assert [c for c, _ in out] == [2, 5]

    def test_union_matches_set_oracle(self):
        rng = random.Random(4)
        for _ in range(50):
            ca = sorted(rng.sample(range(30), rng.randint(0, 12)))
            cb = sorted(rng.sample(range(30), rng.randint(0, 12)))
            got = [c for c, _ in union(Fiber(ca, ca), Fiber(cb, cb))]
            assert got == sorted(set(ca) | set(cb))
            isect = [c for c, _ in intersect(Fiber(ca, ca), Fiber(cb, cb))]
            assert set(isect) <= set(got)

    def test_populate(self):
        f = Fiber()
        populate(f, 5, Fiber)
        populate(f, 2, Fiber)
        p9 = populate(f, 9, Fiber)
        assert f.coords == [2, 5, 9]
        assert populate(f, 9, Fiber) is p9
        assert len(f) == 3


class TestSwizzle:
    def test_transpose_matches_dense(self):
        data = [[1, 2], [0, 3]]
        t = swizzle(from_dense(data, ["M", "K"]), ["K", "M"])
        transposed = [[data[m][k] for m in range(2)] for k in range(2)]
        assert to_dense(t) == transposed
        assert t.rank_names == ["K", "M"]

    def test_identity(self):
        t = from_dense([[1, 0], [0, 2]], ["M", "K"])
        assert swizzle(t, ["M", "K"]) == t

    def test_three_rank_permutation(self):
        rng = random.Random(11)
        data = random_dense(rng, [4, 3, 5], 0.3)
        t = swizzle(from_dense(data, ["M", "K", "N"]), ["M", "N", "K"])
        expect = [[[data[m][k][n] for k in range(3)] for n in range(5)] for m in range(4)]
        assert to_dense(t) == expect
        assert check_coordinate_order(t)

    def test_bad_permutation(self):
        t = from_dense([[1]], ["M", "K"])
        with pytest.raises(ValueError):
            swizzle(t, ["M", "N"])


class TestPartitionShape:
    def test_floor_grouping(self):
        t = Tensor("v", ["X"], [8], Fiber([0, 2, 4, 5], [1, 1, 1, 1]))
        p = partition_uniform_shape(t, "X", 4)
        assert p.rank_names == ["X1", "X0"]
        assert p.root.coords == [0, 4]
        assert p.root.payloads[0].coords == [0, 2]
        assert p.root.payloads[1].coords == [4, 5]

    def test_degenerate_single_partition(self):
        t = Tensor("v", ["X"], [4], Fiber([1, 3], [5, 6]))
        p = partition_uniform_shape(t, "X", 10)
        assert len(p.root) == 1
        assert p.root.payloads[0] == t.root

    def test_round_trip_via_flatten(self):
        rng = random.Random(5)
        for _ in range(20):
            data = random_dense(rng, [12], 0.4)
            t = from_dense(data, ["X"])
            p = partition_uniform_shape(t, "X", 5)
            f = flatten(p, ["X1", "X0"])
            values = {c[-1]: v for (c,), v in
                      ((coords, val) for coords, val in f.paths())}
            expect = {i: v for i, v in enumerate(data) if v}
            assert values == expect


class TestPartitionOccupancy:
    def test_leader_chunks(self):
        leader = Tensor("A", ["K"], [10], Fiber([1, 3, 4, 7, 8], [1, 2, 3, 4, 5]))
        out = partition_uniform_occupancy(leader, [], "K", 2)
        p = out["A"]
        assert p.root.coords == [1, 4, 8]
        assert p.root.payloads[0].coords == [1, 3]
        assert p.root.payloads[1].coords == [4, 7]
        assert p.root.payloads[2].coords == [8]

    def test_followers_adopt_ranges(self):
        leader = Tensor("A", ["K"], [10], Fiber([1, 3, 4, 7, 8], [1] * 5))
        follower = Tensor("B", ["K"], [10], Fiber([2, 5, 9], [7, 8, 9]))
        out = partition_uniform_occupancy(leader, [follower], "K", 2)
        p = out["B"]
        assert p.root.coords == [1, 4, 8]
        assert p.root.payloads[0].coords == [2]
        assert p.root.payloads[1].coords == [5]
        assert p.root.payloads[2].coords == [9]

    def test_single_partition_when_large(self):
        leader = Tensor("A", ["K"], [10], Fiber([1, 3], [1, 2]))
        out = partition_uniform_occupancy(leader, [], "K", 16)
        assert len(out["A"].root) == 1
        assert out["A"].root.payloads[0] == leader.root

    def test_every_nonfinal_chunk_exact(self):
        rng = random.Random(9)
        for _ in range(30):
            coords = sorted(rng.sample(range(40), rng.randint(1, 20)))
            fib = Fiber(coords, [1] * len(coords))
            size = rng.randint(1, 6)
            split = occupancy_split_boundaries(fib, size)
            upper = split_fiber(fib, split)
            sizes = [len(ch) for ch in upper.payloads]
            assert all(s == size for s in sizes[:-1])
            assert 1 <= sizes[-1] <= size
            assert upper.coords == [ch.coords[0] for ch in upper.payloads]


class TestFlatten:
    def test_basic(self):
        t = from_dense([[1, 0, 2], [0, 0, 0], [0, 3, 0]], ["M", "K"])
        f = flatten(t, ["M", "K"])
        assert f.rank_names == ["MK"]
        assert f.root.coords == [(0, 0), (0, 2), (2, 1)]
        assert f.root.payloads == [1, 2, 3]

    def test_single_element(self):
        t = from_dense([[0, 0], [0, 9]], ["M", "K"])
        f = flatten(t, ["M", "K"])
        assert f.root.coords == [(1, 1)]

    def test_occupancy_equals_leaf_count(self):
        rng = random.Random(13)
        for _ in range(20):
            data = random_dense(rng, [6, 7], 0.3)
            t = from_dense(data, ["M", "K"])
            f = flatten(t, ["M", "K"])
            assert len(f.root) == count_leaves(t)

    def test_non_adjacent_raises(self):
        t = from_dense([[[1]]], ["M", "K", "N"])
        with pytest.raises(ValueError):
            flatten(t, ["M", "N"])


class TestContentPreservation:
    def test_composed_transforms(self):
        rng = random.Random(21)
        for _ in range(40):
            shape = [rng.randint(2, 10) for _ in range(rng.choice([2, 3]))]
            density = rng.choice([0.05, 0.3, 1.0])
            data = random_dense(rng, shape, density)
            ranks = ["M", "K", "N"][: len(shape)]
            t = from_dense(data, ranks)
            order = ranks[:]
            rng.shuffle(order)
            s = swizzle(t, order)
            back = swizzle(s, ranks)
            assert to_dense(back) == data
            assert check_coordinate_order(s)
