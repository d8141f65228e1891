"""Deterministic discrete-event execution of a deployment plan.

Kernels are generator coroutines that communicate only through streams: they
yield Recv/Send/Cost effects and the event loop advances them in cycle order
with a monotonic tie-breaker, so identical inputs produce bit-identical
traces. Stream FIFOs carry backpressure (a full FIFO stalls its producer, an
empty one stalls its consumer); inter-cluster traffic rides the simulated
network into the destination gateway's unbounded ingress buffer, optionally
losing packets under a seeded Bernoulli draw.

Per-port emission is pipelined: a kernel may keep computing while a packet
serializes out, but back-to-back packets on one port are spaced by the link
serialization time, so the measured output interval can never beat it.
"""

from __future__ import annotations

import heapq
import statistics
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fabric import (GalapagosHeader, GalapagosPacket, KernelAddress,
                     RoutingFault, flit_count, route)
from .plan import DeploymentPlan, Edge, KernelNode

NET_PORT = -1   # sentinel: receive from the network ingress instead of an edge


# ------------------------------------------------------------------ effects

@dataclass(frozen=True)
class Recv:
    port: int


@dataclass(frozen=True)
class Send:
    port: int
    payload: bytes
    kind: str = "data"


@dataclass(frozen=True)
class Cost:
    cycles: int


# -------------------------------------------------------------------- trace

@dataclass(frozen=True)
class TraceEvent:
    cycle: int
    event: str
    src: KernelAddress | None
    dst: KernelAddress | None
    nbytes: int

    def to_line(self) -> str:
        def pair(a):
            return f"{a.cluster_id},{a.kernel_id}" if a else ","
        return f"{self.cycle},{self.event},{pair(self.src)},{pair(self.dst)},{self.nbytes}"


TRACE_HEADER = "cycle,event,src_cluster,src_kernel,dst_cluster,dst_kernel,bytes"


@dataclass
class SimTrace:
    events: list[TraceEvent] = field(default_factory=list)
    complete: bool = True
    final_cycle: int = 0

    def add(self, cycle, event, src, dst, nbytes):
        self.events.append(TraceEvent(cycle, event, src, dst, nbytes))

    def finalize(self):
        self.events.sort(key=lambda e: e.cycle)   # stable: record order breaks ties

    def sends_from(self, addr: KernelAddress, kinds=("send",)) -> list[TraceEvent]:
        return [e for e in self.events if e.event in kinds and e.src == addr]

    def write(self, path: str | Path) -> None:
        lines = [TRACE_HEADER]
        if not self.complete:
            lines.append("# incomplete: cycle budget exhausted")
        lines.extend(e.to_line() for e in self.events)
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "SimTrace":
        trace = cls()
        for line in Path(path).read_text().splitlines():
            if not line or line == TRACE_HEADER:
                continue
            if line.startswith("#"):
                trace.complete = "incomplete" not in line
                continue
            parts = line.split(",")
            cyc, ev = int(parts[0]), parts[1]
            src = (KernelAddress(int(parts[2]), int(parts[3]))
                   if parts[2] else None)
            dst = (KernelAddress(int(parts[4]), int(parts[5]))
                   if parts[4] else None)
            trace.events.append(TraceEvent(cyc, ev, src, dst, int(parts[6])))
        if trace.events:
            trace.final_cycle = max(e.cycle for e in trace.events)
        return trace


# --------------------------------------------------------- latency metrics

@dataclass
class LatencyComponents:
    """X/T/I of one encoder: first-output, completion and output-interval cycles."""

    first_output_cycles: int       # X
    completion_cycles: int         # T
    output_interval_cycles: int    # I (0 when fewer than two output packets)
    clock_hz: float
    switch_latency_s: float

    def __post_init__(self):
        if self.first_output_cycles > self.completion_cycles:
            raise ValueError("first output cannot come after completion")

    def report(self) -> str:
        return (f"X={self.first_output_cycles}\nT={self.completion_cycles}\n"
                f"I={self.output_interval_cycles}\nf={self.clock_hz}\n"
                f"d={self.switch_latency_s}\n")

    @classmethod
    def from_report(cls, text: str) -> "LatencyComponents":
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        return cls(int(kv["X"]), int(kv["T"]), int(kv["I"]),
                   float(kv["f"]), float(kv["d"]))


def measure_xti(trace: SimTrace, observer: KernelAddress,
                clock_hz: float, switch_latency_s: float) -> LatencyComponents:
    """Extract X/T/I from the data-packet send events of the observer kernel.

    I is the median inter-packet gap, which is robust to warm-up transients;
    a single output packet reports I = 0.
    """
    sends = trace.sends_from(observer)
    if not sends:
        raise ValueError(f"trace has no output sends from {observer}")
    cycles = [e.cycle for e in sends]
    gaps = [b - a for a, b in zip(cycles, cycles[1:])]
    interval = int(statistics.median(gaps)) if gaps else 0
    return LatencyComponents(cycles[0], cycles[-1], interval,
                             clock_hz, switch_latency_s)


# ------------------------------------------------------------------ errors

class DeadlockError(Exception):
    def __init__(self, cycle: int, blocked: list[str], full_fifos: list[str]):
        super().__init__(
            f"deadlock at cycle {cycle}: blocked kernels {blocked}; "
            f"full FIFOs {full_fifos}")
        self.cycle = cycle
        self.blocked = blocked
        self.full_fifos = full_fifos


class SimulationFault(Exception):
    pass


# ----------------------------------------------------------------- stimulus

@dataclass
class Stimulus:
    """Input schedule: tensors injected as header + row packets at an interval."""

    tensors: list[np.ndarray]
    interval: int = 12
    start_cycle: int = 0
    seed: int = 0
    cycle_budget: int = 200_000_000


# ------------------------------------------------------------------- fifos

class StreamFifo:
    """Bounded stream buffer counted in flits; space is reserved at send time."""

    def __init__(self, edge: Edge, index: int):
        self.edge = edge
        self.index = index
        self.capacity = edge.capacity_flits
        self.reserved = 0
        self.queue: deque[tuple[int, GalapagosPacket]] = deque()
        self.recv_waiter = None
        self.send_waiters: deque = deque()

    def free(self) -> int:
        return self.capacity - self.reserved

    def label(self) -> str:
        return f"{self.edge.src}->{self.edge.dst}"


class _Proc:
    __slots__ = ("kernel", "gen", "clock", "pending", "reply", "done",
                 "lines", "stalled_on")

    def __init__(self, kernel: KernelNode, gen):
        self.kernel = kernel
        self.gen = gen
        self.clock = 0
        self.pending = None
        self.reply = None
        self.done = False
        self.lines: dict[int, int] = {}
        self.stalled_on = None


class KernelEnv:
    """What a kernel behavior can see: its params, ports and the shared plan."""

    def __init__(self, sim: "Simulator", kernel: KernelNode,
                 in_edges: list[int], out_edges: list[int]):
        self.sim = sim
        self.kernel = kernel
        self.params = kernel.params
        self.in_edges = in_edges
        self.out_edges = out_edges
        self.plan = sim.plan
        self.stimulus = sim.stimulus

    @property
    def address(self) -> KernelAddress:
        return self.kernel.address

    def out_edge(self, port: int) -> Edge:
        return self.sim.plan.edges[self.out_edges[port]]

    def model_params(self, encoder: int):
        return self.sim.encoder_params(encoder)

    def note(self, event: str, nbytes: int = 0, dst: KernelAddress | None = None):
        """Record a kernel-level trace event (dead_letter, warning, underfill)."""
        proc = self.sim.procs[self.address]
        self.sim.trace.add(proc.clock, event, self.address, dst, nbytes)

    def collect_output(self, tensor: np.ndarray):
        self.sim.outputs.append(tensor)


# ---------------------------------------------------------------- simulator

class Simulator:
    """Own the full mutable simulation state; single logical thread of control."""

    def __init__(self, plan: DeploymentPlan, behaviors: dict | None = None):
        if behaviors is None:
            from . import behaviors as _b
            behaviors = _b.REGISTRY
        self.plan = plan
        self.behaviors = behaviors
        self.network = plan.network
        self.tables = plan.routing_tables()
        self._params_cache: dict[int, object] = {}

    def encoder_params(self, encoder: int):
        if encoder not in self._params_cache:
            from .modelfs import load_encoder_params
            if not self.plan.model_fs:
                raise SimulationFault("plan has no model filesystem")
            self._params_cache[encoder] = load_encoder_params(
                self.plan.model_fs, encoder)
        return self._params_cache[encoder]

    # ------------------------------------------------------------ plumbing

    def _schedule(self, cycle: int, proc: _Proc):
        self._seq += 1
        heapq.heappush(self._heap, (cycle, self._seq, "resume", proc))

    def _schedule_delivery(self, cycle: int, dst: KernelAddress,
                           pkt: GalapagosPacket):
        self._seq += 1
        heapq.heappush(self._heap, (cycle, self._seq, "deliver", (dst, pkt)))

    def _wake_senders(self, fifo: StreamFifo, cycle: int):
        while fifo.send_waiters:
            proc = fifo.send_waiters.popleft()
            self._schedule(max(cycle, proc.clock), proc)

    # ----------------------------------------------------------------- run

    def run(self, stimulus: Stimulus) -> tuple[SimTrace, list[np.ndarray]]:
        self.stimulus = stimulus
        self.trace = SimTrace()
        self.outputs: list[np.ndarray] = []
        self._heap: list = []
        self._seq = 0
        self._rng = np.random.default_rng(stimulus.seed)

        self.fifos = [StreamFifo(e, i) for i, e in enumerate(self.plan.edges)]
        self._in_map: dict[KernelAddress, list[int]] = {a: [] for a in self.plan.kernels}
        self._out_map: dict[KernelAddress, list[int]] = {a: [] for a in self.plan.kernels}
        for i, e in enumerate(self.plan.edges):
            self._out_map[e.src].append(i)
            self._in_map[e.dst].append(i)
        self.ingress: dict[KernelAddress, deque] = {}
        self.procs: dict[KernelAddress, _Proc] = {}
        env_of: dict[KernelAddress, KernelEnv] = {}
        for addr in sorted(self.plan.kernels):
            kernel = self.plan.kernels[addr]
            in_edges = self._in_map[addr]
            out_edges = self._out_map[addr]
            env = KernelEnv(self, kernel, in_edges, out_edges)
            factory = self.behaviors.get(kernel.kind)
            if factory is None:
                raise SimulationFault(f"no behavior registered for kind {kernel.kind!r}")
            proc = _Proc(kernel, factory(env))
            self.procs[addr] = proc
            self.ingress[addr] = deque()
            env_of[addr] = env
        for addr in sorted(self.procs):
            self._schedule(0, self.procs[addr])

        budget = stimulus.cycle_budget
        final_cycle = 0
        while self._heap:
            cycle, _, kind, payload = heapq.heappop(self._heap)
            if cycle > budget:
                self.trace.complete = False
                final_cycle = budget
                break
            final_cycle = max(final_cycle, cycle)
            if kind == "deliver":
                dst, pkt = payload
                self.ingress[dst].append((cycle, pkt))
                proc = self.procs[dst]
                if (not proc.done and isinstance(proc.pending, Recv)
                        and proc.pending.port == NET_PORT):
                    self._schedule(max(cycle, proc.clock), proc)
            else:
                proc = payload
                if not proc.done:
                    self._advance(proc, cycle)

        self.trace.final_cycle = final_cycle
        if self.trace.complete:
            self._check_deadlock(final_cycle)
        self.trace.finalize()
        return self.trace, self.outputs

    def _check_deadlock(self, cycle: int):
        blocked_send = [str(p.kernel.address) for p in self.procs.values()
                        if not p.done and isinstance(p.pending, Send)]
        stuck_fifos = [f.label() for f in self.fifos if f.queue]
        stuck_ingress = [str(a) for a, q in self.ingress.items() if q]
        if blocked_send or stuck_fifos or stuck_ingress:
            full = [f.label() for f in self.fifos if f.free() <= 0]
            raise DeadlockError(cycle, blocked_send,
                                full or stuck_fifos or stuck_ingress)

    # ------------------------------------------------------- proc stepping

    def _advance(self, proc: _Proc, cycle: int):
        proc.clock = max(proc.clock, cycle)
        while True:
            eff = proc.pending
            if eff is None:
                try:
                    eff = proc.gen.send(proc.reply)
                except StopIteration:
                    proc.done = True
                    return
                proc.reply = None
                proc.pending = eff
            if isinstance(eff, Cost):
                proc.pending = None
                if eff.cycles < 0:
                    raise SimulationFault("negative cost")
                proc.clock += eff.cycles
                continue
            if isinstance(eff, Recv):
                if not self._try_recv(proc, eff):
                    return
                continue
            if isinstance(eff, Send):
                if not self._try_send(proc, eff):
                    return
                continue
            raise SimulationFault(f"kernel yielded unknown effect {eff!r}")

    def _try_recv(self, proc: _Proc, eff: Recv) -> bool:
        addr = proc.kernel.address
        if eff.port == NET_PORT:
            q = self.ingress[addr]
            if not q:
                return False          # delivery event will reschedule us
            arrival, pkt = q[0]
            if arrival > proc.clock:
                self._schedule(arrival, proc)
                return False
            q.popleft()
            self.trace.add(proc.clock, "recv" if pkt.kind == "data" else "recv_hdr",
                           pkt.header.sender, addr, pkt.wire_bytes)
            proc.reply = pkt
            proc.pending = None
            return True
        fifo = self.fifos[self._in_map[addr][eff.port]]
        if not fifo.queue:
            fifo.recv_waiter = proc
            return False
        visible, pkt = fifo.queue[0]
        if visible > proc.clock:
            self._schedule(visible, proc)
            return False
        fifo.queue.popleft()
        fifo.reserved -= pkt.flits
        self._wake_senders(fifo, proc.clock)
        self.trace.add(proc.clock, "recv" if pkt.kind == "data" else "recv_hdr",
                       fifo.edge.src, addr, len(pkt.payload))
        proc.reply = pkt
        proc.pending = None
        return True

    def _try_send(self, proc: _Proc, eff: Send) -> bool:
        addr = proc.kernel.address
        edge_idx = self._out_map[addr][eff.port]
        edge = self.plan.edges[edge_idx]
        if edge.inter_cluster:
            return self._send_network(proc, eff, edge)
        fifo = self.fifos[edge_idx]
        flits = flit_count(len(eff.payload))
        if fifo.free() < flits:
            if proc.stalled_on != (eff.port, id(eff)):
                self.trace.add(proc.clock, "stall", addr, edge.dst, len(eff.payload))
                proc.stalled_on = (eff.port, id(eff))
            if proc not in fifo.send_waiters:
                fifo.send_waiters.append(proc)
            return False
        proc.stalled_on = None
        header = GalapagosHeader(sender=addr, receiver=edge.dst,
                                 message_size=len(eff.payload))
        pkt = GalapagosPacket(header, eff.payload, eff.kind)
        start = max(proc.clock, proc.lines.get(eff.port, 0))
        ser = self.network.serialization_cycles(len(eff.payload))
        src_node = proc.kernel.node
        dst_node = self.plan.kernels[edge.dst].node
        if src_node == dst_node:
            arrival = start + ser
        else:
            resolved = route(pkt, self.tables[src_node])
            if resolved != dst_node:
                raise RoutingFault(
                    f"plan tables route {edge.dst} to {resolved}, kernel lives on {dst_node}",
                    edge.dst)
            arrival = start + self.network.transit_cycles(
                len(eff.payload), src_node, dst_node)
        fifo.reserved += flits
        fifo.queue.append((arrival, pkt))
        proc.lines[eff.port] = start + ser
        self.trace.add(start, "send" if eff.kind == "data" else "send_hdr",
                       addr, edge.dst, len(eff.payload))
        if fifo.recv_waiter is not None and not fifo.recv_waiter.done:
            self._schedule(max(arrival, fifo.recv_waiter.clock), fifo.recv_waiter)
            fifo.recv_waiter = None
        proc.clock = start
        proc.pending = None
        return True

    def _send_network(self, proc: _Proc, eff: Send, edge: Edge) -> bool:
        """Inter-cluster: one-byte GMI header, network transit, gateway ingress."""
        addr = proc.kernel.address
        from .fabric import attach_gmi_header
        wire_payload = attach_gmi_header(eff.payload, edge.gmi_byte)
        header = GalapagosHeader(sender=addr, receiver=edge.dst,
                                 message_size=len(eff.payload),
                                 inter_cluster=True, gmi_byte=edge.gmi_byte)
        pkt = GalapagosPacket(header, wire_payload, eff.kind)
        src_node = proc.kernel.node
        dst_node = route(pkt, self.tables[src_node])
        gateway = KernelAddress(edge.dst.cluster_id, 0)
        start = max(proc.clock, proc.lines.get(eff.port, 0))
        ser = self.network.serialization_cycles(len(wire_payload))
        proc.lines[eff.port] = start + ser
        proc.clock = start
        proc.pending = None
        self.trace.add(start, "send" if eff.kind == "data" else "send_hdr",
                       addr, edge.dst, len(wire_payload))
        if (self.network.loss_probability > 0
                and self._rng.random() < self.network.loss_probability):
            self.trace.add(start, "drop", addr, edge.dst, len(wire_payload))
            return True
        arrival = start + self.network.transit_cycles(
            len(wire_payload), src_node, dst_node)
        self._schedule_delivery(arrival, gateway, pkt)
        return True
