"""Pre-training loop: masked latent feature prediction with an EMA teacher.

Each step crops a sampled record batch, masks contiguous patch blocks, lets
the EMA teacher embed the full waveform (no gradients), lets the student
encode the unmasked context, predicts the masked-position embeddings, and
minimizes their mean L1 distance to the teacher's. AdamW with decoupled
weight decay updates the student; the teacher then moves toward the student
by an EMA whose momentum rises linearly over training.

Schedules: linear learning-rate warm-up then cosine decay; cosine weight
decay (rising); linear EMA momentum. Weight decay applies to linear and
convolutional weights only. Metrics are logged per step to a CSV with
header ``step,loss,lr,wd,momentum,mean_std,eff_rank``; checkpoints carry
parameters, the EMA copy, optimizer moments, and RNG states so runs resume
bit-exactly in 64-bit mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from . import tensor as T
from .ingest import EcgRecord, MixtureSampler, RecordStore, sample_batch
from .masking import sample_mask, split_by_mask
from .model import ModelConfig, PatchBatch
from .tensor import Tensor

__all__ = [
    "TrainConfig",
    "TrainState",
    "DivergenceError",
    "METRICS_HEADER",
    "cosine_anneal",
    "lr_at",
    "wd_at",
    "ema_momentum_at",
    "AdamState",
    "adamw_step",
    "ema_update",
    "jepa_step",
    "collapse_metrics",
    "pretrain",
]

METRICS_HEADER = "step,loss,lr,wd,momentum,mean_std,eff_rank"


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    total_steps: int = 100_000
    batch_size: int = 2048
    lr_start: float = 1e-3
    lr_end: float = 1e-6
    warmup_steps: int = 10_000
    wd_start: float = 0.01
    wd_end: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-6
    ema_start: float = 0.998
    ema_end: float = 0.9995
    ratio_min: float = 0.75
    ratio_max: float = 0.85
    seed: int = 0
    crop_patches: int = 200  # training-window length in patches
    checkpoint_every: int = 5000
    dtype: str = "float32"  # float64 for bit-exact gradient/resume test mode
    debug_checks: bool = False

    def __post_init__(self):
        if not (0 < self.lr_end <= self.lr_start):
            raise ValueError("need 0 < lr_end <= lr_start")
        if not (0.5 < self.ema_start <= self.ema_end < 1):
            raise ValueError("need 0.5 < ema_start <= ema_end < 1")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


# ---------------------------------------------------------------------------
# schedules (exact at their endpoints)


def cosine_anneal(step: int, total: int, start: float, end: float) -> float:
    if step <= 0:
        return start
    if step >= total:
        return end
    w = 0.5 * (1.0 + math.cos(math.pi * step / total))
    return w * start + (1.0 - w) * end


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear 0 -> lr_start over the warm-up, then cosine down to lr_end."""
    if step < cfg.warmup_steps:
        return cfg.lr_start * step / cfg.warmup_steps
    return cosine_anneal(step - cfg.warmup_steps, cfg.total_steps - cfg.warmup_steps, cfg.lr_start, cfg.lr_end)


def wd_at(cfg: TrainConfig, step: int) -> float:
    """Cosine from wd_start up to wd_end over the whole run."""
    return cosine_anneal(step, cfg.total_steps, cfg.wd_start, cfg.wd_end)


def ema_momentum_at(cfg: TrainConfig, step: int) -> float:
    """Linear from ema_start to ema_end over the whole run."""
    if step >= cfg.total_steps:
        return cfg.ema_end
    t = step / cfg.total_steps
    return (1.0 - t) * cfg.ema_start + t * cfg.ema_end


# ---------------------------------------------------------------------------
# optimizer and EMA


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    wd: float,
    beta1: float = 0.9,
    beta2: float = 0.99,
    eps: float = 1e-6,
    decayed=M.is_weight_decayed,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Decay multiplies decayed parameters by (1 - lr*wd) alongside the
    bias-corrected moment update. Missing gradients count as zero."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if wd and decayed(name):
            p.data = p.data * (1.0 - lr * wd) - lr * update
        else:
            p.data = p.data - lr * update


def ema_update(teacher: dict[str, Tensor], params: dict[str, Tensor], momentum: float) -> None:
    """teacher <- momentum * teacher + (1 - momentum) * student, elementwise."""
    for name, t in teacher.items():
        t.data = momentum * t.data + (1.0 - momentum) * params[name].data


# ---------------------------------------------------------------------------
# the training step


@dataclass
class TrainState:
    step: int
    adam: AdamState
    rng: np.random.Generator

    @classmethod
    def fresh(cls, params: dict[str, Tensor], seed) -> "TrainState":
        return cls(step=0, adam=AdamState.for_params(params), rng=np.random.default_rng(seed))


def _crop_batch(records: list[EcgRecord], crop_len: int, rng: np.random.Generator, dtype) -> np.ndarray:
    out = np.empty((len(records), records[0].leads, crop_len), dtype=dtype)
    for i, rec in enumerate(records):
        t = rec.length
        if t < crop_len:
            raise ValueError(f"record {rec.record_id} shorter ({t}) than the training window ({crop_len})")
        off = int(rng.integers(t - crop_len + 1))
        out[i] = rec.samples[:, off : off + crop_len]
    return out


def collapse_metrics(targets: np.ndarray) -> dict[str, float]:
    """Collapse diagnostics over teacher targets [batch, k, dim]:
    mean over dims of the per-dim std across all target vectors, and the
    effective rank (entropy-exponential of the covariance spectrum)."""
    flat = np.asarray(targets, dtype=np.float64).reshape(-1, targets.shape[-1])
    mean_std = float(flat.std(axis=0).mean())
    centered = flat - flat.mean(axis=0)
    cov = centered.T @ centered / max(flat.shape[0] - 1, 1)
    eig = np.linalg.eigvalsh(cov)
    eig = np.clip(eig, 0.0, None)
    total = eig.sum()
    if total <= 0:
        return {"mean_std": mean_std, "eff_rank": 0.0}
    p = eig / total
    p = p[p > 0]
    return {"mean_std": mean_std, "eff_rank": float(np.exp(-(p * np.log(p)).sum()))}


def jepa_step(
    records: list[EcgRecord],
    params: dict[str, Tensor],
    teacher: dict[str, Tensor],
    state: TrainState,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
) -> tuple[float, dict[str, float]]:
    """One pre-training step on a record batch; returns (loss, diagnostics).

    The teacher embeds the full waveform without gradients and its
    masked-position outputs (taken after its final norm) are the targets;
    the student encodes only the context and the predictor fills in the
    masked positions. Backward, AdamW on every student parameter, then the
    EMA update, all at the schedules for the current step index.
    """
    crop_len = cfg.crop_patches * model_cfg.patch_size
    batch = _crop_batch(records, crop_len, state.rng, cfg.np_dtype)
    spec = sample_mask(cfg.crop_patches, len(records), state.rng, cfg.ratio_min, cfg.ratio_max)

    teacher_tokens = M.patchify(teacher, batch, model_cfg)
    teacher_emb, _ = M.encode(teacher, teacher_tokens, model_cfg)
    batch_ix = np.arange(len(records))[:, None]
    targets = teacher_emb.data[batch_ix, spec.masked]

    student_tokens = M.patchify(params, batch, model_cfg)
    context, _, target_idx = split_by_mask(student_tokens, spec)
    ctx_emb, _ = M.encode(params, context, model_cfg)
    preds = M.predict(params, PatchBatch(ctx_emb, context.positions), target_idx, model_cfg)
    loss = T.l1_loss(preds, targets)
    loss_value = float(loss.data)
    if not math.isfinite(loss_value):
        raise DivergenceError(f"non-finite loss at step {state.step}")

    T.zero_grads(params)
    T.backward(loss)
    grads = {name: p.grad for name, p in params.items() if p.grad is not None}
    adamw_step(
        params,
        grads,
        state.adam,
        lr=lr_at(cfg, state.step),
        wd=wd_at(cfg, state.step),
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.eps,
    )
    ema_update(teacher, params, ema_momentum_at(cfg, state.step))
    if cfg.debug_checks:
        for name, t in teacher.items():
            assert not t.requires_grad and t.grad is None, f"gradient leaked into teacher {name!r}"
    state.step += 1
    return loss_value, collapse_metrics(targets)


# ---------------------------------------------------------------------------
# orchestration


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def train_config_kv(cfg: TrainConfig) -> dict[str, str]:
    return {k: str(getattr(cfg, k)) for k in cfg.__dataclass_fields__}


def train_config_from_kv(kv: dict[str, str]) -> TrainConfig:
    fields = {}
    for name, f in TrainConfig.__dataclass_fields__.items():
        if name not in kv:
            continue
        raw = kv[name]
        if f.type == "bool" or isinstance(f.default, bool):
            fields[name] = raw.lower() in ("1", "true", "yes")
        elif isinstance(f.default, int):
            fields[name] = int(raw)
        elif isinstance(f.default, float):
            fields[name] = float(raw)
        else:
            fields[name] = raw
    return TrainConfig(**fields)


def save_train_checkpoint(path, model_cfg, cfg, state, params, teacher, sampler_state) -> Path:
    tensors = {}
    tensors.update({f"param/{k}": p for k, p in params.items()})
    tensors.update({f"ema/{k}": p for k, p in teacher.items()})
    tensors.update({f"adam_m/{k}": v for k, v in state.adam.m.items()})
    tensors.update({f"adam_v/{k}": v for k, v in state.adam.v.items()})
    rng_states = {"trainer": state.rng.bit_generator.state, "sampler": sampler_state, "adam_t": state.adam.t}
    return M.save_checkpoint(path, model_cfg, state.step, tensors, rng_states, train_config_kv(cfg))


def load_train_checkpoint(path):
    """Returns (model_cfg, train_cfg, step, rng_states, params, teacher, adam)."""
    model_cfg, step, rng_states, extra, tensors = M.load_checkpoint(path)
    params = {k[len("param/"):]: T.parameter(v) for k, v in tensors.items() if k.startswith("param/")}
    teacher = {k[len("ema/"):]: Tensor(v) for k, v in tensors.items() if k.startswith("ema/")}
    adam = AdamState(
        m={k[len("adam_m/"):]: v.copy() for k, v in tensors.items() if k.startswith("adam_m/")},
        v={k[len("adam_v/"):]: v.copy() for k, v in tensors.items() if k.startswith("adam_v/")},
        t=int(rng_states["adam_t"]) if rng_states else 0,
    )
    train_cfg = train_config_from_kv(extra) if extra else TrainConfig()
    return model_cfg, train_cfg, step, rng_states, params, teacher, adam


def pretrain(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    manifest,
    out_dir,
    resume=None,
) -> Path:
    """Run the pre-training loop over a record manifest.

    Writes ``metrics.csv`` (one row per step) and ``checkpoint-<step>``
    directories into out_dir; returns the final checkpoint path. With
    ``resume`` pointing at a checkpoint, continues from its step with all
    parameter, optimizer, and RNG state restored.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store = RecordStore.from_manifest(manifest)

    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    if resume is None:
        init_rng = np.random.default_rng(seeds[0])
        params = M.init_params(model_cfg, init_rng, cfg.np_dtype)
        teacher = M.make_teacher(params)
        state = TrainState.fresh(params, seeds[1])
        sampler = MixtureSampler(store, rng=np.random.default_rng(seeds[2]))
    else:
        ck_model_cfg, _, step, rng_states, params, teacher, adam = load_train_checkpoint(resume)
        if ck_model_cfg != model_cfg:
            raise ValueError("checkpoint model config does not match the requested one")
        state = TrainState(step=step, adam=adam, rng=np.random.default_rng(0))
        state.rng.bit_generator.state = rng_states["trainer"]
        sampler = MixtureSampler(store, rng=np.random.default_rng(0))
        sampler.set_state(rng_states["sampler"])

    def save(step):
        return save_train_checkpoint(
            out_dir / f"checkpoint-{step}", model_cfg, cfg, state, params, teacher, sampler.state()
        )

    metrics_path = out_dir / "metrics.csv"
    last_saved = None
    with metrics_path.open("w") as metrics:
        metrics.write(METRICS_HEADER + "\n")
        while state.step < cfg.total_steps:
            step = state.step
            records = sample_batch(sampler, cfg.batch_size)
            loss, diag = jepa_step(records, params, teacher, state, cfg, model_cfg)
            row = [
                str(step),
                _fmt(loss),
                _fmt(lr_at(cfg, step)),
                _fmt(wd_at(cfg, step)),
                _fmt(ema_momentum_at(cfg, step)),
                _fmt(diag["mean_std"]),
                _fmt(diag["eff_rank"]),
            ]
            metrics.write(",".join(row) + "\n")
            metrics.flush()
            if state.step % cfg.checkpoint_every == 0:
                last_saved = state.step
                final = save(state.step)
    if last_saved != state.step:
        final = save(state.step)
    return final
