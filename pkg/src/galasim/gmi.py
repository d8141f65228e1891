"""Collective communication: Broadcast, Reduce, Scatter, Gather and gateways.

Collectives are ordinary kernels inserted into the application graph — no
special-case routing. Intra-cluster traffic carries no extra bytes at all;
inter-cluster messages carry exactly the one-byte header naming the
destination kernel inside the target cluster, consumed by the gateway's
packet decoder.

The message-level algebra lives here as pure functions (the kernels in
:mod:`galasim.behaviors` apply them per packet): gather . scatter is the
identity, broadcast copies are byte-identical, and reduce is a fixed-order
fold over integer segments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fabric import KernelAddress

GMI_OPS = ("broadcast", "reduce", "scatter", "gather", "allgather")
REDUCE_FNS = ("sum", "min", "max")      # extension: the op set is not fixed upstream
REDUCE_WIDTHS = {8: np.int8, 32: np.int32}


class GmiSpecError(ValueError):
    pass


class ReduceFault(Exception):
    """Segment lengths disagree or the fold left the declared integer range."""


@dataclass
class GmiKernelSpec:
    """One collective: its group, root, placement and segmentation policy."""

    op: str
    group: list[KernelAddress]
    root: KernelAddress | None = None
    placement: str = "receiver-side"      # or "sender-side"
    chunking: int | None = None           # bytes per scatter/gather segment
    reduce_fn: str = "sum"
    element_bits: int = 32

    def __post_init__(self):
        if self.op not in GMI_OPS:
            raise GmiSpecError(f"unknown collective op {self.op!r}")
        if not self.group:
            raise GmiSpecError("collective group must be non-empty")
        if len(set(self.group)) != len(self.group):
            raise GmiSpecError("collective group has duplicate members")
        if self.op in ("reduce", "gather") and self.root is not None \
                and self.root not in self.group:
            raise GmiSpecError(f"root {self.root} not in group")
        if self.placement not in ("receiver-side", "sender-side"):
            raise GmiSpecError(f"bad placement {self.placement!r}")
        if self.reduce_fn not in REDUCE_FNS:
            raise GmiSpecError(f"unknown reduce_fn {self.reduce_fn!r}")
        if self.element_bits not in REDUCE_WIDTHS:
            raise GmiSpecError(f"element_bits must be one of {sorted(REDUCE_WIDTHS)}")

    def to_params(self) -> dict:
        return {"op": self.op,
                "group": [[a.cluster_id, a.kernel_id] for a in self.group],
                "root": ([self.root.cluster_id, self.root.kernel_id]
                         if self.root else None),
                "placement": self.placement, "chunking": self.chunking,
                "reduce_fn": self.reduce_fn, "element_bits": self.element_bits}

    @classmethod
    def from_params(cls, p: dict) -> "GmiKernelSpec":
        return cls(op=p["op"],
                   group=[KernelAddress(c, k) for c, k in p["group"]],
                   root=(KernelAddress(*p["root"]) if p.get("root") else None),
                   placement=p.get("placement", "receiver-side"),
                   chunking=p.get("chunking"),
                   reduce_fn=p.get("reduce_fn", "sum"),
                   element_bits=p.get("element_bits", 32))


@dataclass
class GatewaySpec:
    """Kernel 0's dispatch plan: virtual collectives plus a forwarding table."""

    cluster_id: int
    virtual_kernels: dict[int, GmiKernelSpec] = field(default_factory=dict)
    forwarding: dict[int, int] = field(default_factory=dict)   # gmi byte -> kernel id

    def consumers(self) -> set[int]:
        overlap = set(self.virtual_kernels) & set(self.forwarding)
        if overlap:
            raise GmiSpecError(
                f"gmi bytes {sorted(overlap)} are both virtual and forwarded")
        return set(self.virtual_kernels) | set(self.forwarding)


# ------------------------------------------------------- message algebra

def default_chunking(length: int, members: int) -> int:
    return max(1, math.ceil(length / members))


def scatter_segments(msg: bytes, members: int, chunking: int | None = None
                     ) -> list[bytes]:
    """Segment i of the message for member i; short or empty tails allowed."""
    if members < 1:
        raise GmiSpecError("scatter needs at least one member")
    chunk = chunking if chunking else default_chunking(len(msg), members)
    return [msg[i * chunk:(i + 1) * chunk] for i in range(members)]


def gather_segments(segments: list[bytes]) -> bytes:
    """Concatenation in member order, whatever order segments arrived in."""
    return b"".join(segments)


def reduce_segments(segments: list[bytes], fn: str = "sum",
                    element_bits: int = 32) -> bytes:
    """Elementwise fold in group order over equal-length integer segments."""
    if not segments:
        raise ReduceFault("reduce over an empty segment list")
    lengths = {len(s) for s in segments}
    if len(lengths) != 1:
        raise ReduceFault(f"segment lengths differ: {sorted(lengths)}")
    dtype = REDUCE_WIDTHS[element_bits]
    if len(segments[0]) % np.dtype(dtype).itemsize:
        raise ReduceFault(
            f"segment length {len(segments[0])} is not a multiple of the element size")
    arrays = [np.frombuffer(s, dtype=dtype).astype(np.int64) for s in segments]
    acc = arrays[0]
    for a in arrays[1:]:
        if fn == "sum":
            acc = acc + a
        elif fn == "min":
            acc = np.minimum(acc, a)
        else:
            acc = np.maximum(acc, a)
    info = np.iinfo(dtype)
    if acc.size and (acc.min() < info.min or acc.max() > info.max):
        raise ReduceFault(f"reduce result leaves the int{element_bits} range")
    return acc.astype(dtype).tobytes()


def allgather_segments(segments: list[bytes]) -> list[bytes]:
    """gather then broadcast: every member ends up with the full concatenation."""
    whole = gather_segments(segments)
    return [whole for _ in segments]
