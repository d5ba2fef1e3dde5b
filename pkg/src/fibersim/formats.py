"""Concrete-representation accounting: footprints and per-access byte costs.

Fibertrees are never actually encoded; this module prices what a chosen
representation would store and move.  A rank's format is one of
  U  uncompressed: data arrays sized by the fiber's shape
  C  compressed:   data arrays sized by the fiber's occupancy
  B  bitmask-style: uncompressed coordinate structure, compressed payloads
with a layout (struct-of-arrays or array-of-structs) and bit widths for
coordinates, payloads, and fiber headers.  A width of 0 means "not stored"
(e.g. U fibers can infer coordinates from position).

For B, cbits is the width of one coordinate slot of the uncompressed
structure; a plain bitmask is cbits=1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import fibertree as ft


@dataclass(frozen=True)
class RankFormat:
    type: str = "C"          # U | C | B
    layout: str = "SoA"      # SoA | AoS
    cbits: int = 0
    pbits: int = 0
    fhbits: int = 0

    def element_bits(self) -> int:
        return self.cbits + self.pbits

    def datum_bits(self, datum: str) -> int:
        if datum == "coord":
            return self.cbits
        if datum == "payload":
            return self.pbits
        if datum == "header":
            return self.fhbits
        raise ValueError(f"unknown datum kind {datum!r}")


DEFAULT_RANK_FORMAT = RankFormat(type="C", layout="SoA", cbits=32, pbits=64, fhbits=0)


def default_config(rank_names) -> dict:
    return {rank: DEFAULT_RANK_FORMAT for rank in rank_names}


def _fiber_shape(extent) -> int:
    # Flattened ranks have tuple extents; an uncompressed structure over a
    # tuple space covers the full cross product.
    if isinstance(extent, tuple):
        return math.prod(_fiber_shape(e) for e in extent)
    return int(extent)


def fiber_bits(rf: RankFormat, shape, occupancy: int) -> int:
    """Stored bits of one fiber, excluding its header."""
    slots = _fiber_shape(shape)
    if rf.type == "U":
        return rf.cbits * slots + rf.pbits * slots
    if rf.type == "C":
        return (rf.cbits + rf.pbits) * occupancy
    if rf.type == "B":
        return rf.cbits * slots + rf.pbits * occupancy
    raise ValueError(f"unknown format type {rf.type!r}")


def footprint(t: ft.Tensor, config: dict) -> dict:
    """Bits per rank (plus 'total') of tensor `t` under `config`.

    `config` maps rank name -> RankFormat and must cover every rank; the
    base-rank fallback used elsewhere is the caller's concern so that this
    stays a pure accounting function.
    """
    bits = {}
    total = 0
    for depth, rank in enumerate(t.rank_names):
        if rank not in config:
            raise KeyError(f"format config has no entry for rank {rank!r}")
        rf = config[rank]
        rank_bits = 0
        for fiber in t.fibers_at(depth):
            rank_bits += fiber_bits(rf, t.shape[depth], len(fiber)) + rf.fhbits
        bits[rank] = rank_bits
        total += rank_bits
    bits["total"] = total
    return bits


def access_bits(rf: RankFormat, datum: str) -> int:
    """Bits moved by one access of `datum` (coord | payload | header | elem)."""
    if datum == "elem":
        return rf.element_bits()
    return rf.datum_bits(datum)


def access_cost(record, config: dict, prev=None) -> tuple:
    """(bytes, 'sequential' | 'random') for one trace record.

    Bytes are the datum's bit width / 8 (line rounding happens only inside
    the cache model).  The stream is sequential when the access continues
    the previous one: the next offset in the same data region, or the
    coord->payload pair of one element in an AoS layout.
    """
    rank = record.rank
    rf = config.get(rank)
    if rf is None:
        from .specs import base_rank_name  # lazy: avoids import cycle
        rf = config.get(base_rank_name(rank))
    if rf is None:
        raise KeyError(f"format config has no entry for rank {rank!r}")
    bits = access_bits(rf, record.datum)
    kind = "random"
    if prev is not None and prev.tensor == record.tensor and prev.rank == record.rank:
        if prev.datum == record.datum and record.offset == prev.offset + 1:
            kind = "sequential"
        elif (rf.layout == "AoS" and prev.datum == "coord"
              and record.datum == "payload" and record.offset == prev.offset):
            kind = "sequential"
    return bits / 8.0, kind
