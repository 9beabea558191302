"""Transformer encoder with a single register token and a narrow predictor.

The tokenizer is a bias-free strided 1-d convolution producing
non-overlapping patch embeddings of 25 samples across all leads. Blocks are
pre-norm (attention + MLP with GELU), entirely bias-free, followed by a
final layer norm. The predictor runs at half the encoder width: context
embeddings are projected down, concatenated with one mask token per target
position (mask tokens carry sinusoidal positional encodings), and the
outputs at the mask slots are projected back up to encoder width.

Parameters are a flat name -> Tensor mapping; the EMA teacher is a
gradient-free copy of the encoder-side entries.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "PRESETS",
    "PatchBatch",
    "param_shapes",
    "init_params",
    "count_params",
    "is_encoder_param",
    "is_weight_decayed",
    "make_teacher",
    "sinusoidal_positions",
    "patchify",
    "encode",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class ModelConfig:
    encoder_dim: int
    encoder_blocks: int
    encoder_heads: int
    predictor_dim: int
    predictor_blocks: int
    predictor_heads: int
    mlp_ratio: int = 4
    dropout: float = 0.0
    bias: bool = False
    patch_size: int = 25
    leads: int = 12

    def __post_init__(self):
        if self.predictor_dim * 2 != self.encoder_dim:
            raise ValueError("predictor_dim must be half of encoder_dim")
        if self.encoder_dim % self.encoder_heads or self.predictor_dim % self.predictor_heads:
            raise ValueError("embedding sizes must be divisible by their head counts")
        if self.bias:
            raise ValueError("bias-free architecture only")


PRESETS = {
    "vit_xs": ModelConfig(192, 8, 4, 96, 8, 4),
    "vit_s": ModelConfig(384, 8, 6, 192, 8, 6),
    "vit_b": ModelConfig(768, 12, 12, 384, 12, 12),
}


def _block_shapes(prefix: str, dim: int, mlp_ratio: int):
    hidden = dim * mlp_ratio
    yield f"{prefix}.norm1.scale", (dim,)
    yield f"{prefix}.attn.wq", (dim, dim)
    yield f"{prefix}.attn.wk", (dim, dim)
    yield f"{prefix}.attn.wv", (dim, dim)
    yield f"{prefix}.attn.wo", (dim, dim)
    yield f"{prefix}.norm2.scale", (dim,)
    yield f"{prefix}.mlp.w1", (dim, hidden)
    yield f"{prefix}.mlp.w2", (hidden, dim)


def param_shapes(cfg: ModelConfig):
    """All learnable parameter names with shapes, encoder side first."""
    d, p = cfg.encoder_dim, cfg.predictor_dim
    yield "tokenizer.kernel", (d, cfg.leads, cfg.patch_size)
    yield "encoder.register", (d,)
    for i in range(cfg.encoder_blocks):
        yield from _block_shapes(f"encoder.block{i}", d, cfg.mlp_ratio)
    yield "encoder.norm.scale", (d,)
    yield "predictor.input_proj", (d, p)
    yield "predictor.mask_token", (p,)
    for i in range(cfg.predictor_blocks):
        yield from _block_shapes(f"predictor.block{i}", p, cfg.mlp_ratio)
    yield "predictor.norm.scale", (p,)
    yield "predictor.output_proj", (p, d)


def is_encoder_param(name: str) -> bool:
    return name.startswith(("tokenizer.", "encoder."))


def is_weight_decayed(name: str) -> bool:
    """Weight decay hits linear and convolutional weights only, never norm
    scales or token embeddings."""
    return (
        ".attn.w" in name
        or ".mlp.w" in name
        or name.endswith(("input_proj", "output_proj"))
        or name == "tokenizer.kernel"
    )


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    params = {}
    for name, shape in param_shapes(cfg):
        if name.endswith("norm.scale") or ".norm1." in name or ".norm2." in name:
            data = np.ones(shape, dtype=dtype)
        else:
            data = rng.normal(0.0, 0.02, size=shape).astype(dtype)
        params[name] = T.parameter(data)
    return params


def count_params(cfg: ModelConfig, include_predictor: bool = False) -> int:
    """Exact learnable-parameter count. The headline model size counts the
    encoder side only (the predictor is discarded after pre-training);
    include_predictor adds it back."""
    total = 0
    for name, shape in param_shapes(cfg):
        if include_predictor or is_encoder_param(name):
            total += math.prod(shape)
    return total


def make_teacher(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """A structurally congruent, gradient-free copy of the encoder side."""
    return {
        name: Tensor(p.data.copy(), requires_grad=False)
        for name, p in params.items()
        if is_encoder_param(name)
    }


# ---------------------------------------------------------------------------
# forward pieces


@dataclass
class PatchBatch:
    """Tokenized batch: tokens [batch, n, dim] with the absolute patch index
    of every token ([n] shared, or [batch, n] per element)."""

    tokens: Tensor
    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions)
        if np.any(np.diff(self.positions, axis=-1) <= 0):
            raise ValueError("token positions must be strictly increasing")


def sinusoidal_positions(positions, dim: int) -> Tensor:
    """Standard sine/cosine encoding of absolute indices, interleaved as
    [sin f0, cos f0, sin f1, cos f1, ...]. dim must be even."""
    if dim % 2 != 0:
        raise ValueError("positional encoding dim must be even")
    pos = np.asarray(positions, dtype=np.float64)[..., None]
    half = np.arange(dim // 2, dtype=np.float64)
    freqs = np.power(10000.0, -2.0 * half / dim)
    angles = pos * freqs
    out = np.empty(pos.shape[:-1] + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return Tensor(out)


def patchify(params: dict[str, Tensor], recs: np.ndarray, cfg: ModelConfig) -> PatchBatch:
    """Tokenize raw waveforms [batch, leads, T] into T/patch_size tokens."""
    recs = np.asarray(recs)
    if recs.ndim != 3:
        raise ValueError(f"expected [batch, leads, T], got {recs.shape}")
    x = T.as_tensor(recs.astype(params["tokenizer.kernel"].dtype, copy=False))
    emb = T.conv1d(x, params["tokenizer.kernel"], stride=cfg.patch_size)  # [B, D, n]
    emb = T.transpose(emb, (0, 2, 1))
    return PatchBatch(tokens=emb, positions=np.arange(emb.shape[1]))


def _attention(params, pfx, x, heads, dropout, train, rng):
    b, t, d = x.shape
    dh = d // heads
    q = T.matmul(x, params[f"{pfx}.wq"])
    k = T.matmul(x, params[f"{pfx}.wk"])
    v = T.matmul(x, params[f"{pfx}.wv"])
    q = T.transpose(T.reshape(q, (b, t, heads, dh)), (0, 2, 1, 3))
    kt = T.transpose(T.reshape(k, (b, t, heads, dh)), (0, 2, 3, 1))
    v = T.transpose(T.reshape(v, (b, t, heads, dh)), (0, 2, 1, 3))
    att = T.softmax(T.matmul(q, kt) * (1.0 / math.sqrt(dh)))
    out = T.matmul(att, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, t, d))
    out = T.matmul(out, params[f"{pfx}.wo"])
    return T.dropout(out, dropout, rng, train)


def _mlp(params, pfx, x, dropout, train, rng):
    h = T.gelu(T.matmul(x, params[f"{pfx}.w1"]))
    out = T.matmul(h, params[f"{pfx}.w2"])
    return T.dropout(out, dropout, rng, train)


def _run_blocks(params, prefix, x, blocks, heads, dropout=0.0, train=False, rng=None):
    for i in range(blocks):
        pfx = f"{prefix}.block{i}"
        x = x + _attention(params, f"{pfx}.attn", T.layer_norm(x, params[f"{pfx}.norm1.scale"]), heads, dropout, train, rng)
        x = x + _mlp(params, f"{pfx}.mlp", T.layer_norm(x, params[f"{pfx}.norm2.scale"]), dropout, train, rng)
    return T.layer_norm(x, params[f"{prefix}.norm.scale"])


def encode(
    params: dict[str, Tensor],
    batch: PatchBatch,
    cfg: ModelConfig,
    dropout: float = 0.0,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Run the encoder over a token batch.

    Adds the sinusoidal encoding of each token's absolute position, prepends
    the register token, runs the pre-norm blocks and final norm, and returns
    (patch embeddings [B, n, D], register embedding [B, D]).
    """
    b, n, d = batch.tokens.shape
    if d != cfg.encoder_dim:
        raise ValueError(f"token dim {d} does not match encoder dim {cfg.encoder_dim}")
    pe = sinusoidal_positions(batch.positions, d).data.astype(batch.tokens.dtype)
    if pe.ndim == 2:
        pe = pe[None]
    x = batch.tokens + T.as_tensor(pe)
    register = T.broadcast_to(T.reshape(params["encoder.register"], (1, 1, d)), (b, 1, d))
    x = T.concat([register, x], axis=1)
    x = _run_blocks(params, "encoder", x, cfg.encoder_blocks, cfg.encoder_heads, dropout, train, rng)
    reg_out = T.reshape(T.narrow(x, 1, 0, 1), (b, d))
    return T.narrow(x, 1, 1, n), reg_out


def predict(
    params: dict[str, Tensor],
    context: PatchBatch,
    target_positions: np.ndarray,
    cfg: ModelConfig,
) -> Tensor:
    """Predict encoder-width embeddings at the masked target positions.

    context holds encoded patch embeddings with their positions; one mask
    token (plus its position's sinusoidal encoding at predictor width) is
    appended per target, and only the mask-slot outputs are returned,
    projected back to encoder width: [B, k, encoder_dim].
    """
    target_positions = np.asarray(target_positions)
    b, nc, d = context.tokens.shape
    k = target_positions.shape[-1]
    ctx_pos = context.positions if context.positions.ndim == 2 else np.broadcast_to(context.positions, (b, nc))
    tgt_pos = target_positions if target_positions.ndim == 2 else np.broadcast_to(target_positions, (b, k))
    for e in range(b):
        overlap = np.intersect1d(ctx_pos[e], tgt_pos[e])
        if overlap.size:
            raise ValueError(f"target positions {overlap.tolist()} collide with context (element {e})")

    p = cfg.predictor_dim
    ctx = T.matmul(context.tokens, params["predictor.input_proj"])
    pe = sinusoidal_positions(tgt_pos, p).data.astype(ctx.dtype)
    mask_tokens = T.broadcast_to(T.reshape(params["predictor.mask_token"], (1, 1, p)), (b, k, p)) + T.as_tensor(pe)
    x = T.concat([ctx, mask_tokens], axis=1)
    x = _run_blocks(params, "predictor", x, cfg.predictor_blocks, cfg.predictor_heads)
    return T.matmul(T.narrow(x, 1, nc, k), params["predictor.output_proj"])


# ---------------------------------------------------------------------------
# checkpoint format: MANIFEST (text) + params.bin (raw little-endian payloads)

_DTYPE_TAGS = {np.dtype(np.float32): "f4", np.dtype(np.float64): "f8"}


def save_checkpoint(
    path,
    cfg: ModelConfig,
    step: int,
    tensors: dict[str, np.ndarray | Tensor],
    rng_states: dict | None = None,
    extra_config: dict | None = None,
) -> Path:
    """Write a checkpoint directory: MANIFEST with named entries (shape,
    dtype, byte range) and a single params.bin payload file."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = ["format ecg-jepa-checkpoint 1", f"step {step}"]
    for key, value in sorted(vars_of_config(cfg).items()):
        lines.append(f"config {key}={value}")
    for key, value in sorted((extra_config or {}).items()):
        lines.append(f"extra {key}={value}")
    if rng_states is not None:
        lines.append("rng " + json.dumps(rng_states, sort_keys=True))
    payload = bytearray()
    for name in sorted(tensors):
        arr = tensors[name].data if isinstance(tensors[name], Tensor) else np.asarray(tensors[name])
        tag = _DTYPE_TAGS[arr.dtype]
        raw = np.ascontiguousarray(arr, dtype="<" + tag).tobytes()
        shape = ",".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"tensor {name} {tag} {shape} {len(payload)} {len(raw)}")
        payload.extend(raw)
    (path / "MANIFEST").write_text("\n".join(lines) + "\n")
    (path / "params.bin").write_bytes(bytes(payload))
    return path


def vars_of_config(cfg: ModelConfig) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def config_from_kv(kv: dict[str, str]) -> ModelConfig:
    fields = {}
    for name in ModelConfig.__dataclass_fields__:
        if name not in kv:
            continue
        raw = kv[name]
        if name == "bias":
            fields[name] = raw.lower() in ("1", "true", "yes")
        elif name == "dropout":
            fields[name] = float(raw)
        else:
            fields[name] = int(raw)
    if "model" in kv:
        base = PRESETS[kv["model"]]
        return replace(base, **fields) if fields else base
    return ModelConfig(**fields)


def load_checkpoint(path):
    """Read back (config, step, rng_states, extra, tensors-by-name)."""
    path = Path(path)
    text = (path / "MANIFEST").read_text().splitlines()
    payload = (path / "params.bin").read_bytes()
    step, rng_states = 0, None
    config_kv, extra, tensors = {}, {}, {}
    for line in text:
        kind, _, rest = line.partition(" ")
        if kind == "step":
            step = int(rest)
        elif kind == "config":
            key, _, value = rest.partition("=")
            config_kv[key] = value
        elif kind == "extra":
            key, _, value = rest.partition("=")
            extra[key] = value
        elif kind == "rng":
            rng_states = json.loads(rest)
        elif kind == "tensor":
            name, tag, shape, offset, length = rest.rsplit(" ", 4)
            arr = np.frombuffer(payload, dtype="<" + tag, count=int(length) // int(tag[1]), offset=int(offset))
            if shape != "scalar":
                arr = arr.reshape([int(s) for s in shape.split(",")])
            tensors[name] = arr.astype(np.dtype(tag))  # native-endian copy
    cfg = config_from_kv(config_kv)
    return cfg, step, rng_states, extra, tensors
