"""Packet formats, hierarchical addressing and the simulated network fabric.

A deployment is a cluster of clusters: up to 256 Galapagos clusters of up to
256 streaming kernels each, so 65,536 addressable kernels. Within a cluster
every kernel can reach every other kernel directly; between clusters all
traffic funnels through the destination cluster's Gateway kernel (kernel 0).
Each node therefore keeps two routing tables: one for the kernels of its own
cluster and one holding the gateway node of every other cluster, bounding the
per-node routing state at (own kernels) + (clusters - 1) entries instead of a
full mesh.
"""

from __future__ import annotations

import math
import struct
from collections import deque
from dataclasses import dataclass, field

FLIT_BYTES = 64          # one bus beat; a 768-byte matrix row is 12 flits
MAX_CLUSTERS = 256
MAX_KERNELS_PER_CLUSTER = 256
GATEWAY_KERNEL_ID = 0

HEADER_STRUCT = struct.Struct("<2sBBBBBBI4x")   # 16 bytes on the wire
HEADER_MAGIC = b"GP"

DEFAULT_SWITCH_LATENCY_S = 1.1e-6
DEFAULT_LINK_BYTES_PER_CYCLE = 64   # one flit per cycle
DEFAULT_CLOCK_HZ = 200e6


class RoutingFault(Exception):
    """A packet referenced an address absent from the routing tables."""

    def __init__(self, message: str, unresolved):
        super().__init__(message)
        self.unresolved = unresolved


class ConfigError(Exception):
    """Topology or network configuration is unusable."""


class EncodingError(ValueError):
    """A header field does not fit its wire representation."""


@dataclass(frozen=True, order=True)
class KernelAddress:
    """(cluster_id, kernel_id), each 8 bits. Kernel 0 is the Gateway."""

    cluster_id: int
    kernel_id: int

    def __post_init__(self):
        for name, v in (("cluster_id", self.cluster_id), ("kernel_id", self.kernel_id)):
            if not 0 <= v <= 255:
                raise EncodingError(f"{name}={v} does not fit in 8 bits")

    def __str__(self):
        return f"{self.cluster_id}.{self.kernel_id}"


@dataclass(frozen=True)
class Flit:
    """One 64-byte data beat; ``last`` marks the end of a packet."""

    payload: bytes
    last: bool = False

    def __post_init__(self):
        if len(self.payload) > FLIT_BYTES:
            raise EncodingError(f"flit payload {len(self.payload)} exceeds {FLIT_BYTES} bytes")


def flit_count(num_bytes: int) -> int:
    """Flits needed to carry ``num_bytes`` (an empty packet still takes one beat)."""
    return max(1, math.ceil(num_bytes / FLIT_BYTES))


def to_flits(payload: bytes) -> list[Flit]:
    n = flit_count(len(payload))
    out = []
    for i in range(n):
        chunk = payload[i * FLIT_BYTES:(i + 1) * FLIT_BYTES]
        out.append(Flit(chunk, last=(i == n - 1)))
    return out


@dataclass(frozen=True)
class GalapagosHeader:
    """Framing metadata carried alongside a packet.

    ``inter_cluster`` models the extra TUSER bit that selects between the two
    routing tables: 0 resolves ``receiver`` in the local cluster table, 1
    treats ``receiver.cluster_id`` as a destination cluster whose Gateway
    receives the packet. ``gmi_byte`` is the one-byte collective-layer header
    present on inter-cluster messages only.
    """

    sender: KernelAddress
    receiver: KernelAddress
    message_size: int
    inter_cluster: bool = False
    gmi_byte: int | None = None

    def __post_init__(self):
        if not 0 <= self.message_size <= 0xFFFFFFFF:
            raise EncodingError(f"message_size={self.message_size} out of u32 range")
        if self.gmi_byte is not None and not 0 <= self.gmi_byte <= 255:
            raise EncodingError(f"gmi_byte={self.gmi_byte} out of 0..255")


def encode_header(h: GalapagosHeader) -> bytes:
    flags = (1 if h.inter_cluster else 0) | (2 if h.gmi_byte is not None else 0)
    return HEADER_STRUCT.pack(
        HEADER_MAGIC,
        h.sender.cluster_id, h.sender.kernel_id,
        h.receiver.cluster_id, h.receiver.kernel_id,
        flags, h.gmi_byte or 0, h.message_size,
    )


def decode_header(raw: bytes) -> GalapagosHeader:
    if len(raw) != HEADER_STRUCT.size:
        raise EncodingError(f"header must be {HEADER_STRUCT.size} bytes, got {len(raw)}")
    magic, sc, sk, rc, rk, flags, gmi, size = HEADER_STRUCT.unpack(raw)
    if magic != HEADER_MAGIC:
        raise EncodingError(f"bad header magic {magic!r}")
    return GalapagosHeader(
        sender=KernelAddress(sc, sk),
        receiver=KernelAddress(rc, rk),
        message_size=size,
        inter_cluster=bool(flags & 1),
        gmi_byte=gmi if flags & 2 else None,
    )


@dataclass
class GalapagosPacket:
    """A framed message: header plus payload bytes."""

    header: GalapagosHeader
    payload: bytes
    kind: str = "data"   # "data" | "tensor_header"

    @property
    def flits(self) -> int:
        return flit_count(len(self.payload))

    @property
    def wire_bytes(self) -> int:
        # the GMI byte travels prepended to the payload on inter-cluster hops
        return len(self.payload) + (1 if self.header.gmi_byte is not None else 0)


def attach_gmi_header(payload: bytes, dest_kernel_id: int) -> bytes:
    """Prepend the one-byte inter-cluster header naming the target kernel."""
    if not 0 <= dest_kernel_id <= 255:
        raise EncodingError(f"dest_kernel_id={dest_kernel_id} out of 0..255")
    return bytes([dest_kernel_id]) + payload


def strip_gmi_header(payload: bytes) -> tuple[int, bytes]:
    """Inverse of :func:`attach_gmi_header`."""
    if not payload:
        raise EncodingError("cannot strip GMI header from empty payload")
    return payload[0], payload[1:]


@dataclass
class RoutingTables:
    """Per-node routing state.

    ``local_table`` maps kernel ids of the node's own cluster to node names;
    ``gateway_table`` maps foreign cluster ids to the node hosting that
    cluster's Gateway. The local cluster is deliberately absent from
    ``gateway_table``, keeping the state at (own kernels) + (clusters - 1).
    """

    cluster_id: int
    local_table: dict[int, str] = field(default_factory=dict)
    gateway_table: dict[int, str] = field(default_factory=dict)

    def stored_addresses(self) -> int:
        return len(self.local_table) + len(self.gateway_table)


def route(packet: GalapagosPacket, tables: RoutingTables) -> str:
    """Resolve a packet to the node that must receive it.

    Intra-cluster packets use the local kernel table; inter-cluster packets
    resolve to the destination cluster's Gateway node. A missing entry raises
    :class:`RoutingFault` — it signals a malformed deployment plan, not a
    transient condition.
    """
    h = packet.header
    if h.inter_cluster:
        dst_cluster = h.receiver.cluster_id
        node = tables.gateway_table.get(dst_cluster)
        if node is None:
            raise RoutingFault(
                f"no gateway entry for cluster {dst_cluster}", dst_cluster)
        return node
    node = tables.local_table.get(h.receiver.kernel_id)
    if node is None:
        raise RoutingFault(
            f"no local entry for kernel {h.receiver} in cluster {tables.cluster_id}",
            h.receiver)
    return node


@dataclass
class NetworkConfig:
    """Simulated network parameters.

    ``topology`` lists (node, switch) attachments; ``switch_links`` are
    undirected switch-to-switch edges. Latency of a transfer is serialization
    (bytes / link bandwidth, in cycles) plus ``switch_latency_s`` per switch
    traversed. ``loss_probability`` = 0 gives lossless in-order delivery per
    (sender, receiver) pair.
    """

    switch_latency_s: float = DEFAULT_SWITCH_LATENCY_S
    link_bytes_per_cycle: float = DEFAULT_LINK_BYTES_PER_CYCLE
    loss_probability: float = 0.0
    clock_hz: float = DEFAULT_CLOCK_HZ
    topology: list[tuple[str, str]] = field(default_factory=list)
    switch_links: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.loss_probability <= 1.0:
            raise ConfigError(f"loss_probability={self.loss_probability} not in [0,1]")

    @property
    def switch_latency_cycles(self) -> int:
        return round(self.switch_latency_s * self.clock_hz)

    def node_switch(self, node: str) -> str:
        for n, s in self.topology:
            if n == node:
                return s
        raise ConfigError(f"node {node!r} is not attached to any switch")

    def switch_hops(self, src_node: str, dst_node: str) -> int:
        """Number of switches traversed from src to dst (same switch = 1)."""
        a, b = self.node_switch(src_node), self.node_switch(dst_node)
        if a == b:
            return 1
        adj: dict[str, set[str]] = {}
        for x, y in self.switch_links:
            adj.setdefault(x, set()).add(y)
            adj.setdefault(y, set()).add(x)
        seen = {a}
        frontier = deque([(a, 1)])
        while frontier:
            sw, depth = frontier.popleft()
            for nxt in sorted(adj.get(sw, ())):
                if nxt == b:
                    return depth + 1
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append((nxt, depth + 1))
        raise ConfigError(f"no switch path between {src_node!r} and {dst_node!r}")

    def serialization_cycles(self, num_bytes: int) -> int:
        if math.isinf(self.link_bytes_per_cycle):
            return 0
        return math.ceil(num_bytes / self.link_bytes_per_cycle)

    def transit_cycles(self, num_bytes: int, src_node: str, dst_node: str) -> int:
        """Cycles from start of emission to arrival at the destination node."""
        return (self.serialization_cycles(num_bytes)
                + self.switch_hops(src_node, dst_node) * self.switch_latency_cycles)
