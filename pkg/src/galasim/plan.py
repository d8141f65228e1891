"""Deployment plan: the validated, serializable description a simulation runs.

A plan fixes the kernel graph (addresses, kinds, parameters), the stream
edges with their FIFO capacities, the kernel-to-node mapping, per-node
routing tables, the network topology, and the model-filesystem path. Plans
serialize to JSON with sorted keys, so identical builds are byte-identical
and the file round-trips losslessly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .fabric import GATEWAY_KERNEL_ID, KernelAddress, NetworkConfig, RoutingTables

PLAN_VERSION = 1


@dataclass
class KernelNode:
    address: KernelAddress
    kind: str                      # behavior registry name
    node: str                      # simulated node hosting this kernel
    params: dict = field(default_factory=dict)
    id_class: str = "compute"      # compute | communication | virtual | gateway


@dataclass
class Edge:
    src: KernelAddress
    dst: KernelAddress
    capacity_flits: int
    matrix_rows: int = 0           # >0 marks a matrix-carrying edge (rows x cols)
    matrix_cols: int = 0

    @property
    def inter_cluster(self) -> bool:
        return self.src.cluster_id != self.dst.cluster_id

    @property
    def gmi_byte(self) -> int | None:
        return self.dst.kernel_id if self.inter_cluster else None


@dataclass
class ClusterInfo:
    cluster_id: int
    name: str
    role: str                      # "encoder" | "io" | "generic"
    kernel_ids: list[int] = field(default_factory=list)


@dataclass
class IoSpec:
    """Where stimulus enters and results leave the deployment."""

    input_target: KernelAddress    # entry kernel (gateway byte) of the first cluster
    output_source: KernelAddress   # kernel whose sends are the model output
    io_address: KernelAddress      # the evaluation endpoint's own address


@dataclass
class DeploymentPlan:
    clusters: list[ClusterInfo]
    kernels: dict[KernelAddress, KernelNode]
    edges: list[Edge]
    network: NetworkConfig
    io: IoSpec
    model_fs: str | None = None
    version: int = PLAN_VERSION

    def kernel(self, addr: KernelAddress) -> KernelNode:
        return self.kernels[addr]

    def cluster(self, cluster_id: int) -> ClusterInfo:
        for c in self.clusters:
            if c.cluster_id == cluster_id:
                return c
        raise KeyError(f"no cluster {cluster_id} in plan")

    def nodes(self) -> list[str]:
        return sorted({k.node for k in self.kernels.values()})

    def in_edges(self, addr: KernelAddress) -> list[int]:
        return [i for i, e in enumerate(self.edges) if e.dst == addr]

    def out_edges(self, addr: KernelAddress) -> list[int]:
        return [i for i, e in enumerate(self.edges) if e.src == addr]

    def gateway_node(self, cluster_id: int) -> str:
        addr = KernelAddress(cluster_id, GATEWAY_KERNEL_ID)
        if addr in self.kernels:
            return self.kernels[addr].node
        raise KeyError(f"cluster {cluster_id} has no gateway kernel")

    def routing_tables(self) -> dict[str, RoutingTables]:
        """Derive each node's two tables from the kernel placement.

        Every node stores its own cluster's kernel map plus one gateway entry
        per foreign cluster that any plan kernel addresses.
        """
        tables: dict[str, RoutingTables] = {}
        by_cluster: dict[int, list[KernelNode]] = {}
        for k in self.kernels.values():
            by_cluster.setdefault(k.address.cluster_id, []).append(k)
        all_clusters = sorted(by_cluster)
        for cid, members in by_cluster.items():
            local = {k.address.kernel_id: k.node for k in members}
            foreign = {}
            for other in all_clusters:
                if other != cid:
                    foreign[other] = self.gateway_node(other)
            for k in members:
                tables.setdefault(
                    k.node, RoutingTables(cid, dict(local), dict(foreign)))
        return tables

    # ------------------------------------------------------------- JSON

    def to_json(self) -> str:
        def addr(a: KernelAddress):
            return [a.cluster_id, a.kernel_id]

        doc = {
            "version": self.version,
            "model_fs": self.model_fs,
            "clusters": [{"cluster_id": c.cluster_id, "name": c.name,
                          "role": c.role, "kernel_ids": c.kernel_ids}
                         for c in self.clusters],
            "kernels": [{"address": addr(k.address), "kind": k.kind,
                         "node": k.node, "params": k.params,
                         "id_class": k.id_class}
                        for k in sorted(self.kernels.values(),
                                        key=lambda k: k.address)],
            "edges": [{"src": addr(e.src), "dst": addr(e.dst),
                       "capacity_flits": e.capacity_flits,
                       "matrix_rows": e.matrix_rows,
                       "matrix_cols": e.matrix_cols} for e in self.edges],
            "network": {
                "switch_latency_s": self.network.switch_latency_s,
                "link_bytes_per_cycle": (
                    None if self.network.link_bytes_per_cycle == float("inf")
                    else self.network.link_bytes_per_cycle),
                "loss_probability": self.network.loss_probability,
                "clock_hz": self.network.clock_hz,
                "topology": self.network.topology,
                "switch_links": self.network.switch_links,
            },
            "io": {"input_target": addr(self.io.input_target),
                   "output_source": addr(self.io.output_source),
                   "io_address": addr(self.io.io_address)},
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DeploymentPlan":
        doc = json.loads(text)

        def addr(pair) -> KernelAddress:
            return KernelAddress(pair[0], pair[1])

        net = doc["network"]
        network = NetworkConfig(
            switch_latency_s=net["switch_latency_s"],
            link_bytes_per_cycle=(float("inf") if net["link_bytes_per_cycle"] is None
                                  else net["link_bytes_per_cycle"]),
            loss_probability=net["loss_probability"],
            clock_hz=net["clock_hz"],
            topology=[tuple(t) for t in net["topology"]],
            switch_links=[tuple(t) for t in net["switch_links"]])
        kernels = {}
        for k in doc["kernels"]:
            a = addr(k["address"])
            kernels[a] = KernelNode(a, k["kind"], k["node"], k["params"], k["id_class"])
        return cls(
            clusters=[ClusterInfo(c["cluster_id"], c["name"], c["role"],
                                  c["kernel_ids"]) for c in doc["clusters"]],
            kernels=kernels,
            edges=[Edge(addr(e["src"]), addr(e["dst"]), e["capacity_flits"],
                        e["matrix_rows"], e["matrix_cols"]) for e in doc["edges"]],
            network=network,
            io=IoSpec(addr(doc["io"]["input_target"]),
                      addr(doc["io"]["output_source"]),
                      addr(doc["io"]["io_address"])),
            model_fs=doc["model_fs"],
            version=doc["version"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "DeploymentPlan":
        return cls.from_json(Path(path).read_text())
