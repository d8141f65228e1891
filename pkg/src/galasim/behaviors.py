"""Kernel behaviors: the generator bodies the simulator runs for each kind.

Matrices travel as a 16-byte framing packet (rows, cols) followed by one
packet per row of INT8 bytes, so a 768-wide row is exactly 12 flits. Every
compute kernel calls the same integer functions as the monolithic executor,
row by row; those functions are row-independent, which is what makes the
distributed run bit-identical to the in-process one.

Cycle cost model (per row, documented constants, not hardware-measured):

* linear family    ceil(h_out / tiles)   one output element per cycle per tile
* dot+softmax      ceil(M / num_pe) * head_dim
* softmax-matmul   ceil(M / num_pe) * out_width
* layernorm        hidden
* collectives      input flits (stream-bound copies)
* gateway          1 + input flits per packet (decode + cut-through)

The entry linear kernels are the slowest stage at every shipped geometry, so
the steady-state output interval of an encoder equals their per-row cost and
the measured X/T are insensitive to any injection interval at or below it.
"""

from __future__ import annotations

import math

import numpy as np

from .fabric import flit_count, strip_gmi_header
from .gmi import reduce_segments, scatter_segments
from .ibert.kernels import attention_dot_product, linear, softmax_matmul
from .ibert.nonlinear import (SOFTMAX_OUT_SCALE, gelu_int, layernorm_int,
                              residual_add, softmax_int)
from .ibert.quant import AccTensor, QuantTensor, requantize
from .ibert.tensor_io import pack_tensor_header, unpack_tensor_header
from .runtime import NET_PORT, Cost, Recv, Send

REGISTRY: dict = {}


def behavior(name: str):
    def wrap(fn):
        REGISTRY[name] = fn
        return fn
    return wrap


def _recv_matrix_header(port):
    pkt = yield Recv(port)
    if pkt.kind != "tensor_header":
        raise ValueError(f"expected tensor header, got {pkt.kind!r} packet")
    return unpack_tensor_header(pkt.payload)


def _recv_rows(port, rows, cols):
    buf = np.empty((rows, cols), dtype=np.int8)
    for r in range(rows):
        pkt = yield Recv(port)
        buf[r] = np.frombuffer(pkt.payload, dtype=np.int8)
    return buf


# ------------------------------------------------------------- I/O endpoint

@behavior("io_endpoint")
def io_endpoint(env):
    """The evaluation endpoint: inject stimulus tensors, then collect outputs."""
    stim = env.stimulus
    if stim.start_cycle:
        yield Cost(stim.start_cycle)
    for tensor in stim.tensors:
        rows, cols = tensor.shape
        # framing first, then rows spaced by the injection interval; the first
        # data packet leaves immediately so X does not depend on the interval
        yield Send(0, pack_tensor_header(rows, cols), "tensor_header")
        for r in range(rows):
            yield Send(0, np.ascontiguousarray(tensor[r], dtype=np.int8).tobytes())
            yield Cost(stim.interval)
    expected, rows = len(stim.tensors), 0
    buf = None
    collected = 0
    while collected < expected:
        pkt = yield Recv(NET_PORT)
        _, data = strip_gmi_header(pkt.payload)
        if pkt.kind == "tensor_header":
            rows, cols = unpack_tensor_header(data)
            buf = np.empty((rows, cols), dtype=np.int8)
            got = 0
            continue
        buf[got] = np.frombuffer(data, dtype=np.int8)
        got += 1
        if got == rows:
            env.collect_output(buf)
            collected += 1


# ----------------------------------------------------------------- gateway

@behavior("gateway")
def gateway(env):
    """Packet decoder + virtual collectives + forwarding behind one ingress."""
    virtual = {int(k): v for k, v in env.params.get("virtual", {}).items()}
    forward = {int(k): v for k, v in env.params.get("forward", {}).items()}
    while True:
        pkt = yield Recv(NET_PORT)
        byte, payload = strip_gmi_header(pkt.payload)
        yield Cost(1 + flit_count(len(payload)))
        if byte in virtual:
            spec = virtual[byte]
            for port in spec["ports"]:
                yield Send(port, payload, pkt.kind)
        elif byte in forward:
            yield Send(forward[byte], payload, pkt.kind)
        else:
            env.note("dead_letter", len(payload), pkt.header.sender)


# ------------------------------------------------------------- collectives

@behavior("broadcast")
def broadcast(env):
    """Copy every inbound packet to each group member, byte-identical."""
    if not env.out_edges:
        env.note("warning")
    while True:
        pkt = yield Recv(0)
        yield Cost(flit_count(len(pkt.payload)))
        for port in range(len(env.out_edges)):
            yield Send(port, pkt.payload, pkt.kind)


@behavior("scatter")
def scatter(env):
    """Split each row across the members: member k gets byte chunk k."""
    members = len(env.out_edges)
    chunking = env.params.get("chunking")
    while True:
        rows, cols = yield from _recv_matrix_header(0)
        chunk = chunking or math.ceil(cols / members)
        widths = [max(0, min(cols, (k + 1) * chunk) - k * chunk)
                  for k in range(members)]
        for k, w in enumerate(widths):
            if w == 0:
                env.note("underfill", 0, env.out_edge(k).dst)
            else:
                yield Send(k, pack_tensor_header(rows, w), "tensor_header")
        for _ in range(rows):
            pkt = yield Recv(0)
            yield Cost(flit_count(len(pkt.payload)))
            for k, seg in enumerate(scatter_segments(pkt.payload, members, chunk)):
                if seg:
                    yield Send(k, seg)


@behavior("gather")
def gather(env):
    """Concatenate member segments in member order, one row per round."""
    members = len(env.in_edges)
    while True:
        shapes = []
        for port in range(members):
            shapes.append((yield from _recv_matrix_header(port)))
        rows = shapes[0][0]
        if any(s[0] != rows for s in shapes):
            raise ValueError(f"gather members disagree on row count: {shapes}")
        total = sum(s[1] for s in shapes)
        yield Send(0, pack_tensor_header(rows, total), "tensor_header")
        for _ in range(rows):
            segs = []
            for port in range(members):
                pkt = yield Recv(port)
                segs.append(pkt.payload)
            row = b"".join(segs)
            yield Cost(flit_count(len(row)))
            yield Send(0, row)


@behavior("reduce")
def reduce_kernel(env):
    """Elementwise integer fold across members, fixed group order."""
    members = len(env.in_edges)
    fn = env.params.get("reduce_fn", "sum")
    bits = env.params.get("element_bits", 32)
    while True:
        shapes = []
        for port in range(members):
            shapes.append((yield from _recv_matrix_header(port)))
        if len(set(shapes)) != 1:
            raise ValueError(f"reduce members disagree on shape: {shapes}")
        rows, cols = shapes[0]
        yield Send(0, pack_tensor_header(rows, cols), "tensor_header")
        for _ in range(rows):
            segs = []
            for port in range(members):
                pkt = yield Recv(port)
                segs.append(pkt.payload)
            out = reduce_segments(segs, fn, bits)
            yield Cost(flit_count(len(out)))
            yield Send(0, out)


@behavior("passthrough")
def passthrough(env):
    """Copy input to output with a declared per-packet cost (test plumbing)."""
    cost = env.params.get("cost", 1)
    while True:
        pkt = yield Recv(0)
        yield Cost(cost)
        yield Send(0, pkt.payload, pkt.kind)


@behavior("consume")
def consume(env):
    while True:
        yield Recv(0)


# ------------------------------------------------------- encoder kernels

def _linear_module(env):
    params = env.model_params(env.params["encoder"])
    name = env.params["module"]
    lp = getattr(params, name)
    in_scale = {
        "q_proj": params.input_scale,
        "k_proj": params.input_scale,
        "v_proj": params.input_scale,
        "attn_out": params.ctx_scale,
        "ffn1": params.ln_attn.out_scale,
        "ffn2": params.gelu_scale,
    }[name]
    return params, lp, in_scale


@behavior("linear_quant")
def linear_quant(env):
    """Linear + Quant (or + GELU), one streamed input row per output row."""
    params, lp, in_scale = _linear_module(env)
    activation = env.params.get("activation", "quant")
    tiles = env.params.get("tiles", 1)
    h_out = lp.weight.cols
    row_cost = math.ceil(h_out / tiles)
    while True:
        rows, cols = yield from _recv_matrix_header(0)
        yield Send(0, pack_tensor_header(rows, h_out), "tensor_header")
        for _ in range(rows):
            pkt = yield Recv(0)
            x = QuantTensor(np.frombuffer(pkt.payload, dtype=np.int8)
                            .reshape(1, cols), in_scale)
            acc = linear(x, lp.weight, lp.bias)
            if activation == "gelu":
                out = gelu_int(acc, params.gelu_scale)
            else:
                out = requantize(acc, lp.out_scale)
            yield Cost(row_cost)
            yield Send(0, out.data.tobytes())


@behavior("dot_softmax")
def dot_softmax(env):
    """One attention head: buffer K, then stream Q rows into scores + softmax."""
    params = env.model_params(env.params["encoder"])
    num_pe = env.params.get("num_pe", params.config.attention_num_pe)
    q_scale = params.q_proj.out_scale
    k_scale = params.k_proj.out_scale
    while True:
        k_rows, k_cols = yield from _recv_matrix_header(1)
        k_data = yield from _recv_rows(1, k_rows, k_cols)
        kmat = QuantTensor(k_data, k_scale)
        rows, cols = yield from _recv_matrix_header(0)
        if (rows, cols) != (k_rows, k_cols):
            raise ValueError(f"Q {rows}x{cols} does not match K {k_rows}x{k_cols}")
        row_cost = math.ceil(rows / num_pe) * cols
        yield Send(0, pack_tensor_header(rows, rows), "tensor_header")
        for _ in range(rows):
            pkt = yield Recv(0)
            q = QuantTensor(np.frombuffer(pkt.payload, dtype=np.int8)
                            .reshape(1, cols), q_scale)
            scores = attention_dot_product(q, kmat, num_pe)
            scores = AccTensor(scores.data, scores.scale / math.sqrt(cols))
            probs = softmax_int(scores)
            yield Cost(row_cost)
            yield Send(0, probs.data.tobytes())


@behavior("smatmul_quant")
def smatmul_quant(env):
    """Softmax matrix multiply + Quant: buffer V, stream probability rows."""
    params = env.model_params(env.params["encoder"])
    num_pe = env.params.get("num_pe", params.config.attention_num_pe)
    v_scale = params.v_proj.out_scale
    while True:
        v_rows, v_cols = yield from _recv_matrix_header(1)
        v_data = yield from _recv_rows(1, v_rows, v_cols)
        vmat = QuantTensor(v_data, v_scale)
        rows, cols = yield from _recv_matrix_header(0)
        if cols != v_rows:
            raise ValueError(f"P inner dim {cols} does not match V rows {v_rows}")
        row_cost = math.ceil(rows / num_pe) * v_cols
        yield Send(0, pack_tensor_header(rows, v_cols), "tensor_header")
        for _ in range(rows):
            pkt = yield Recv(0)
            p = QuantTensor(np.frombuffer(pkt.payload, dtype=np.int8)
                            .reshape(1, cols), SOFTMAX_OUT_SCALE)
            ctx = softmax_matmul(p, vmat, num_pe)
            out = requantize(ctx, params.ctx_scale)
            yield Cost(row_cost)
            yield Send(0, out.data.tobytes())


@behavior("layernorm_res")
def layernorm_res(env):
    """Residual add folded into the layernorm kernel; residual port 0, main 1.

    The residual stream is wired first (it leaves the layer entry), so it
    lands on the lower port index.
    """
    params = env.model_params(env.params["encoder"])
    name = env.params["module"]
    ln = getattr(params, name)
    main_scale = (params.attn_out.out_scale if name == "ln_attn"
                  else params.ffn2.out_scale)
    res_scale = (params.input_scale if name == "ln_attn"
                 else params.ln_attn.out_scale)
    while True:
        r_rows, r_cols = yield from _recv_matrix_header(0)
        rows, cols = yield from _recv_matrix_header(1)
        if (rows, cols) != (r_rows, r_cols):
            raise ValueError(f"residual {r_rows}x{r_cols} does not match main "
                             f"{rows}x{cols}")
        yield Send(0, pack_tensor_header(rows, cols), "tensor_header")
        for _ in range(rows):
            res_pkt = yield Recv(0)
            main_pkt = yield Recv(1)
            main = QuantTensor(np.frombuffer(main_pkt.payload, dtype=np.int8)
                               .reshape(1, cols), main_scale)
            res = QuantTensor(np.frombuffer(res_pkt.payload, dtype=np.int8)
                              .reshape(1, cols), res_scale)
            summed = residual_add(main, res, ln.res_scale)
            out = layernorm_int(summed, ln.gamma, ln.gamma_scale, ln.beta,
                                ln.out_scale)
            yield Cost(cols)
            yield Send(0, out.data.tobytes())
