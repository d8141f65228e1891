"""Trained-model archives and the on-disk model filesystem.

An archive is a single ``.npz`` holding every encoder's integer parameters
and activation scales. ``import_model`` unpacks it into the model filesystem:
one directory per module with raw little-endian weight blobs (INT8), bias
blobs (INT32) and a text metadata file carrying shapes and scales. The import
is idempotent — re-importing writes byte-identical trees.

``make_synthetic_archive`` generates seeded random models (tiny desk-scale or
base-sized) whose activation scales are calibrated stage by stage against a
probe input, so nothing saturates on typical data.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .ibert.encoder import (EncoderConfig, EncoderParams, LayerNormParams,
                            LinearParams, attention_head, head_slice)
from .ibert.nonlinear import (LN_MID_SCALE, gelu_int, layernorm_int,
                              residual_add)
from .ibert.kernels import linear
from .ibert.quant import QuantTensor, requantize

LINEAR_MODULES = ("q_proj", "k_proj", "v_proj", "attn_out", "ffn1", "ffn2")
LN_MODULES = ("ln_attn", "ln_out")
FS_VERSION = 1


class ModelFormatError(Exception):
    """Archive or filesystem contents do not match the declared geometry."""


def _enc_key(i: int, *parts: str) -> str:
    return "/".join((f"encoder_{i:02d}",) + parts)


def _linear_dims(cfg: EncoderConfig) -> dict[str, tuple[int, int]]:
    h, f = cfg.hidden, cfg.ffn
    return {"q_proj": (h, h), "k_proj": (h, h), "v_proj": (h, h),
            "attn_out": (h, h), "ffn1": (h, f), "ffn2": (f, h)}


# ---------------------------------------------------------------- archives

def save_archive(path: str | Path, cfg: EncoderConfig, tensors: dict[str, np.ndarray]) -> None:
    meta = {"version": FS_VERSION, "max_seq_len": cfg.max_seq_len,
            "hidden": cfg.hidden, "heads": cfg.heads, "ffn": cfg.ffn,
            "encoders": cfg.encoders, "attention_num_pe": cfg.attention_num_pe}
    np.savez_compressed(path, __config__=json.dumps(meta, sort_keys=True), **tensors)


def load_archive(path: str | Path) -> tuple[EncoderConfig, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as z:
        if "__config__" not in z:
            raise ModelFormatError("archive has no __config__ entry")
        meta = json.loads(str(z["__config__"]))
        cfg = EncoderConfig(max_seq_len=meta["max_seq_len"], hidden=meta["hidden"],
                            heads=meta["heads"], ffn=meta["ffn"],
                            encoders=meta["encoders"],
                            attention_num_pe=meta.get("attention_num_pe", 12))
        tensors = {k: z[k] for k in z.files if k != "__config__"}
    return cfg, tensors


def _scale_for(probe_abs_max: float, headroom: int = 110) -> float:
    return max(probe_abs_max, 1e-12) / headroom


def _synth_linear(rng, h_in: int, h_out: int, in_scale: float) -> tuple[QuantTensor, np.ndarray]:
    w_scale = 1.0 / (127.0 * math.sqrt(h_in))
    w = QuantTensor(rng.integers(-127, 128, size=(h_in, h_out)).astype(np.int8), w_scale)
    bias_real = rng.normal(0.0, 0.05, size=h_out)
    bias = np.round(bias_real / (in_scale * w_scale)).astype(np.int64)
    return w, bias

def _calibrated_linear(rng, x: QuantTensor, h_out: int) -> tuple[LinearParams, QuantTensor]:
    w, bias = _synth_linear(rng, x.cols, h_out, x.scale)
    acc = linear(x, w, bias)
    p = LinearParams(w, bias, _scale_for(float(np.abs(acc.dequantize()).max())))
    return p, requantize(acc, p.out_scale)


def _synth_layernorm(rng, x_main: QuantTensor, x_res: QuantTensor, cols: int
                     ) -> tuple[LayerNormParams, QuantTensor]:
    gamma_real = rng.uniform(0.7, 1.3, size=cols)
    gamma_scale = float(np.abs(gamma_real).max() / 127.0)
    gamma = np.round(gamma_real / gamma_scale).astype(np.int8)
    beta_real = rng.normal(0.0, 0.05, size=cols)
    beta = np.round(beta_real / (LN_MID_SCALE * gamma_scale)).astype(np.int32)
    res_scale = (x_main.scale + x_res.scale) / 256.0
    summed = residual_add(x_main, x_res, res_scale)
    z = summed.dequantize()
    norm = (z - z.mean(axis=1, keepdims=True)) / np.maximum(z.std(axis=1, keepdims=True), 1e-9)
    out_real = norm * gamma_real + beta_real
    p = LayerNormParams(gamma, gamma_scale, beta,
                        _scale_for(float(np.abs(out_real).max())), res_scale)
    return p, layernorm_int(summed, gamma, gamma_scale, beta, p.out_scale)


def synthesize_encoder(rng, cfg: EncoderConfig, x: QuantTensor
                       ) -> tuple[EncoderParams, QuantTensor]:
    """Random integer parameters with probe-calibrated activation scales."""
    q_p, q = _calibrated_linear(rng, x, cfg.hidden)
    k_p, k = _calibrated_linear(rng, x, cfg.hidden)
    v_p, v = _calibrated_linear(rng, x, cfg.hidden)

    accs = [attention_head(head_slice(q, a, cfg.head_dim),
                           head_slice(k, a, cfg.head_dim),
                           head_slice(v, a, cfg.head_dim), cfg.attention_num_pe)
            for a in range(cfg.heads)]
    ctx_scale = _scale_for(max(float(np.abs(a.dequantize()).max()) for a in accs))
    ctx = np.concatenate([requantize(a, ctx_scale).data for a in accs], axis=1)
    gathered = QuantTensor(ctx, ctx_scale)

    ao_p, attn = _calibrated_linear(rng, gathered, cfg.hidden)
    ln1_p, h1 = _synth_layernorm(rng, attn, x, cfg.hidden)

    w1, b1 = _synth_linear(rng, cfg.hidden, cfg.ffn, h1.scale)
    f1 = linear(h1, QuantTensor(w1.data, w1.scale), b1)
    z = f1.dequantize()
    gelu_real = z * 0.5 * (1.0 + np.vectorize(math.erf)(z / math.sqrt(2.0)))
    gelu_scale = _scale_for(float(np.abs(gelu_real).max()))
    g = gelu_int(f1, gelu_scale)
    ffn1_p = LinearParams(w1, b1, None)

    ffn2_p, f2 = _calibrated_linear(rng, g, cfg.hidden)
    ln2_p, out = _synth_layernorm(rng, f2, h1, cfg.hidden)

    params = EncoderParams(config=cfg, input_scale=x.scale,
                           q_proj=q_p, k_proj=k_p, v_proj=v_p, attn_out=ao_p,
                           ffn1=ffn1_p, ffn2=ffn2_p, ln_attn=ln1_p, ln_out=ln2_p,
                           ctx_scale=ctx_scale, gelu_scale=gelu_scale)
    return params, out


def params_to_tensors(i: int, p: EncoderParams) -> dict[str, np.ndarray]:
    t: dict[str, np.ndarray] = {
        _enc_key(i, "input_scale"): np.float64(p.input_scale),
        _enc_key(i, "ctx_scale"): np.float64(p.ctx_scale),
        _enc_key(i, "gelu_scale"): np.float64(p.gelu_scale),
    }
    for name in LINEAR_MODULES:
        lp: LinearParams = getattr(p, name)
        t[_enc_key(i, name, "weight")] = lp.weight.data
        t[_enc_key(i, name, "weight_scale")] = np.float64(lp.weight.scale)
        t[_enc_key(i, name, "bias")] = lp.bias.astype(np.int32)
        t[_enc_key(i, name, "out_scale")] = np.float64(
            lp.out_scale if lp.out_scale is not None else 0.0)
    for name in LN_MODULES:
        np_: LayerNormParams = getattr(p, name)
        t[_enc_key(i, name, "gamma")] = np_.gamma
        t[_enc_key(i, name, "gamma_scale")] = np.float64(np_.gamma_scale)
        t[_enc_key(i, name, "beta")] = np_.beta.astype(np.int32)
        t[_enc_key(i, name, "out_scale")] = np.float64(np_.out_scale)
        t[_enc_key(i, name, "res_scale")] = np.float64(np_.res_scale)
    return t


def make_synthetic_archive(path: str | Path, cfg: EncoderConfig, seed: int = 0) -> None:
    """Seeded random model archive with stage-calibrated activation scales."""
    rng = np.random.default_rng(seed)
    x = QuantTensor(rng.integers(-127, 128, size=(cfg.max_seq_len, cfg.hidden))
                    .astype(np.int8), 0.02)
    tensors: dict[str, np.ndarray] = {}
    for i in range(cfg.encoders):
        params, x = synthesize_encoder(rng, cfg, x)
        tensors.update(params_to_tensors(i, params))
    save_archive(path, cfg, tensors)


# ---------------------------------------------------- model filesystem

def _write_meta(path: Path, entries: dict) -> None:
    lines = [f"{k}={v!r}" if isinstance(v, str) else f"{k}={v}"
             for k, v in sorted(entries.items())]
    path.write_text("\n".join(lines) + "\n")


def _read_meta(path: Path) -> dict[str, str]:
    out = {}
    for line in path.read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k] = v
    return out


def import_model(archive_path: str | Path, out_dir: str | Path) -> Path:
    """Unpack an archive into the model filesystem tree. Idempotent."""
    cfg, tensors = load_archive(archive_path)
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    dims = _linear_dims(cfg)

    def need(key: str) -> np.ndarray:
        if key not in tensors:
            raise ModelFormatError(f"archive is missing tensor {key!r}")
        return tensors[key]

    (root / "config.json").write_text(json.dumps({
        "version": FS_VERSION, "max_seq_len": cfg.max_seq_len, "hidden": cfg.hidden,
        "heads": cfg.heads, "ffn": cfg.ffn, "encoders": cfg.encoders,
        "attention_num_pe": cfg.attention_num_pe}, sort_keys=True, indent=1) + "\n")

    for i in range(cfg.encoders):
        enc_dir = root / f"encoder_{i:02d}"
        enc_dir.mkdir(exist_ok=True)
        _write_meta(enc_dir / "meta.txt", {
            "input_scale": float(need(_enc_key(i, "input_scale"))),
            "ctx_scale": float(need(_enc_key(i, "ctx_scale"))),
            "gelu_scale": float(need(_enc_key(i, "gelu_scale")))})
        for name in LINEAR_MODULES:
            w = need(_enc_key(i, name, "weight"))
            if w.shape != dims[name]:
                raise ModelFormatError(
                    f"{_enc_key(i, name, 'weight')} has shape {w.shape}, expected {dims[name]}")
            bias = need(_enc_key(i, name, "bias"))
            if bias.shape != (dims[name][1],):
                raise ModelFormatError(f"{_enc_key(i, name, 'bias')} has bad shape {bias.shape}")
            d = enc_dir / name
            d.mkdir(exist_ok=True)
            (d / "weight.bin").write_bytes(w.astype(np.int8).tobytes())
            (d / "bias.bin").write_bytes(bias.astype("<i4").tobytes())
            _write_meta(d / "meta.txt", {
                "rows": w.shape[0], "cols": w.shape[1],
                "weight_scale": float(need(_enc_key(i, name, "weight_scale"))),
                "out_scale": float(need(_enc_key(i, name, "out_scale")))})
        for name in LN_MODULES:
            gamma = need(_enc_key(i, name, "gamma"))
            beta = need(_enc_key(i, name, "beta"))
            if gamma.shape != (cfg.hidden,) or beta.shape != (cfg.hidden,):
                raise ModelFormatError(f"{name} affine vectors must have length {cfg.hidden}")
            d = enc_dir / name
            d.mkdir(exist_ok=True)
            (d / "gamma.bin").write_bytes(gamma.astype(np.int8).tobytes())
            (d / "beta.bin").write_bytes(beta.astype("<i4").tobytes())
            _write_meta(d / "meta.txt", {
                "cols": cfg.hidden,
                "gamma_scale": float(need(_enc_key(i, name, "gamma_scale"))),
                "out_scale": float(need(_enc_key(i, name, "out_scale"))),
                "res_scale": float(need(_enc_key(i, name, "res_scale")))})
    return root


def read_config(model_fs: str | Path) -> EncoderConfig:
    meta = json.loads((Path(model_fs) / "config.json").read_text())
    return EncoderConfig(max_seq_len=meta["max_seq_len"], hidden=meta["hidden"],
                         heads=meta["heads"], ffn=meta["ffn"],
                         encoders=meta["encoders"],
                         attention_num_pe=meta.get("attention_num_pe", 12))


def load_linear(model_fs: str | Path, encoder: int, name: str) -> LinearParams:
    d = Path(model_fs) / f"encoder_{encoder:02d}" / name
    meta = _read_meta(d / "meta.txt")
    rows, cols = int(meta["rows"]), int(meta["cols"])
    w = np.frombuffer((d / "weight.bin").read_bytes(), dtype=np.int8).reshape(rows, cols)
    bias = np.frombuffer((d / "bias.bin").read_bytes(), dtype="<i4").astype(np.int64)
    out_scale = float(meta["out_scale"])
    return LinearParams(QuantTensor(w.copy(), float(meta["weight_scale"])), bias,
                        out_scale if out_scale > 0 else None)


def load_layernorm(model_fs: str | Path, encoder: int, name: str) -> LayerNormParams:
    d = Path(model_fs) / f"encoder_{encoder:02d}" / name
    meta = _read_meta(d / "meta.txt")
    gamma = np.frombuffer((d / "gamma.bin").read_bytes(), dtype=np.int8).copy()
    beta = np.frombuffer((d / "beta.bin").read_bytes(), dtype="<i4").astype(np.int32)
    return LayerNormParams(gamma, float(meta["gamma_scale"]), beta,
                           float(meta["out_scale"]), float(meta["res_scale"]))


def load_encoder_params(model_fs: str | Path, encoder: int) -> EncoderParams:
    cfg = read_config(model_fs)
    enc_meta = _read_meta(Path(model_fs) / f"encoder_{encoder:02d}" / "meta.txt")
    return EncoderParams(
        config=cfg,
        input_scale=float(enc_meta["input_scale"]),
        q_proj=load_linear(model_fs, encoder, "q_proj"),
        k_proj=load_linear(model_fs, encoder, "k_proj"),
        v_proj=load_linear(model_fs, encoder, "v_proj"),
        attn_out=load_linear(model_fs, encoder, "attn_out"),
        ffn1=load_linear(model_fs, encoder, "ffn1"),
        ffn2=load_linear(model_fs, encoder, "ffn2"),
        ln_attn=load_layernorm(model_fs, encoder, "ln_attn"),
        ln_out=load_layernorm(model_fs, encoder, "ln_out"),
        ctx_scale=float(enc_meta["ctx_scale"]),
        gelu_scale=float(enc_meta["gelu_scale"]))


def load_stack(model_fs: str | Path) -> list[EncoderParams]:
    cfg = read_config(model_fs)
    return [load_encoder_params(model_fs, i) for i in range(cfg.encoders)]
