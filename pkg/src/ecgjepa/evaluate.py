"""Downstream evaluation: linear probing, fine-tuning, two-stage fine-tuning.

Training crops records to 2.5 s at random; inference slides a 2.5 s window
at a 1.25 s stride and averages the per-crop sigmoid probabilities. The
linear protocol freezes the encoder and trains a single-query cross-attention
pooler over patch embeddings plus a linear output layer; fine-tuning trains
a linear layer on the register embedding end-to-end; two-stage fine-tuning
resumes from a linear-eval artifact and unfreezes everything. Heads are
trained with per-class binary cross-entropy and AdamW under a cosine
learning-rate schedule, keeping the parameters with the best validation
macro AUC. Scoring is the macro area under the ROC curve (rank statistic,
ties counted half, classes lacking both outcomes skipped).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import rankdata

from . import model as M
from . import tensor as T
from .ingest import EcgRecord, read_manifest, read_record
from .model import ModelConfig, PatchBatch
from .tensor import Tensor
from .trainer import AdamState, adamw_step, cosine_anneal

__all__ = [
    "CROP_SAMPLES",
    "STRIDE_SAMPLES",
    "EvalConfig",
    "LabeledDataset",
    "EvalResult",
    "train_crops",
    "eval_crops",
    "init_head",
    "head_logits",
    "predict_record",
    "predict_fold",
    "train_head",
    "macro_auc",
    "save_eval_artifact",
    "load_eval_artifact",
]

CROP_SAMPLES = 1250  # 2.5 s at 500 Hz
STRIDE_SAMPLES = 625  # 1.25 s

_MODE_DEFAULTS = {
    # lr, lr_end, warmup, weight_decay, beta1, beta2, attention_pooling, dropout
    "linear": (1e-3, 1e-3, 0, 0.1, 0.9, 0.999, True, 0.0),
    "finetune": (1e-3, 1e-5, 200, 0.01, 0.9, 0.99, False, 0.05),
    "two_stage": (1e-4, 1e-6, 200, 0.0, 0.9, 0.999, True, 0.1),
}


@dataclass
class EvalConfig:
    mode: str
    lr: float
    lr_end: float
    warmup_steps: int
    weight_decay: float
    beta1: float
    beta2: float
    attention_pooling: bool
    dropout: float
    steps: int = 5000
    batch_size: int = 128
    eval_every: int = 250
    eps: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.mode not in _MODE_DEFAULTS:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "two_stage" and not self.attention_pooling:
            raise ValueError("two_stage continues the attention-pooled linear artifact")

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "EvalConfig":
        lr, lr_end, warmup, wd, b1, b2, pool, drop = _MODE_DEFAULTS[mode]
        cfg = cls(
            mode=mode,
            lr=lr,
            lr_end=lr_end,
            warmup_steps=warmup,
            weight_decay=wd,
            beta1=b1,
            beta2=b2,
            attention_pooling=pool,
            dropout=drop,
        )
        return replace(cfg, **overrides) if overrides else cfg


@dataclass
class LabeledDataset:
    """Records with multi-hot labels and a train/val/test fold per record."""

    records: list[EcgRecord]
    labels: np.ndarray  # [n, classes]
    folds: np.ndarray  # [n] of "train" | "val" | "test"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.folds = np.asarray(self.folds)
        if len(self.records) != len(self.labels) or len(self.records) != len(self.folds):
            raise ValueError("records, labels, and folds must align")

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    def indices(self, fold: str) -> np.ndarray:
        return np.flatnonzero(self.folds == fold)

    @classmethod
    def from_manifest(cls, path) -> "LabeledDataset":
        records = [read_record(p) for p, _ in read_manifest(path)]
        missing = [r.record_id for r in records if r.labels is None or r.fold is None]
        if missing:
            raise ValueError(f"records without labels/fold: {missing[:5]}")
        labels = np.stack([r.labels for r in records])
        folds = np.array([r.fold for r in records])
        return cls(records=records, labels=labels, folds=folds)


# ---------------------------------------------------------------------------
# cropping


def train_crops(rec: EcgRecord, rng: np.random.Generator) -> EcgRecord:
    """Random 2.5 s training crop (identity for records already that long)."""
    t = rec.length
    if t <= CROP_SAMPLES:
        return rec if t == CROP_SAMPLES else _pad_to_crop(rec)
    off = int(rng.integers(t - CROP_SAMPLES + 1))
    return replace(rec, samples=rec.samples[:, off : off + CROP_SAMPLES])


def eval_crops(rec: EcgRecord) -> list[EcgRecord]:
    """All 2.5 s windows at a 1.25 s stride, starting at 0, while they fit."""
    t = rec.length
    if t < CROP_SAMPLES:
        return [_pad_to_crop(rec)]
    out = []
    for start in range(0, t - CROP_SAMPLES + 1, STRIDE_SAMPLES):
        out.append(replace(rec, samples=rec.samples[:, start : start + CROP_SAMPLES]))
    return out


def _pad_to_crop(rec: EcgRecord) -> EcgRecord:
    warnings.warn(f"record {rec.record_id} shorter than 2.5 s; zero-padding", stacklevel=3)
    pad = np.zeros((rec.leads, CROP_SAMPLES), dtype=rec.samples.dtype)
    pad[:, : rec.length] = rec.samples
    return replace(rec, samples=pad)


# ---------------------------------------------------------------------------
# classifier heads


def init_head(cfg: EvalConfig, encoder_dim: int, num_classes: int, rng: np.random.Generator, dtype=np.float32):
    d = encoder_dim
    params = {}
    if cfg.attention_pooling:
        params["head.query"] = T.parameter(rng.normal(0.0, 0.02, size=(d, 1)).astype(dtype))
        params["head.wk"] = T.parameter(rng.normal(0.0, 0.02, size=(d, d)).astype(dtype))
        params["head.wv"] = T.parameter(rng.normal(0.0, 0.02, size=(d, d)).astype(dtype))
    params["head.wout"] = T.parameter(rng.normal(0.0, 0.02, size=(d, num_classes)).astype(dtype))
    return params


def head_logits(head, cfg: EvalConfig, patch_emb: Tensor, register_emb: Tensor) -> Tensor:
    """Class logits from encoder outputs: cross-attention pooling over patch
    embeddings (one learnable query) or a linear map of the register."""
    if not cfg.attention_pooling:
        return T.matmul(register_emb, head["head.wout"])
    b, t, d = patch_emb.shape
    keys = T.matmul(patch_emb, head["head.wk"])  # [B, T, D]
    scores = T.matmul(keys, head["head.query"]) * (1.0 / math.sqrt(d))  # [B, T, 1]
    attn = T.softmax(T.transpose(scores, (0, 2, 1)))  # [B, 1, T]
    pooled = T.matmul(attn, T.matmul(patch_emb, head["head.wv"]))  # [B, 1, D]
    return T.matmul(T.reshape(pooled, (b, d)), head["head.wout"])


def _decayed(name: str) -> bool:
    if name.startswith("head."):
        return name != "head.query"
    return M.is_weight_decayed(name)


# ---------------------------------------------------------------------------
# inference


def _forward_crops(encoder, head, cfg, model_cfg, crops: np.ndarray) -> np.ndarray:
    tokens = M.patchify(encoder, crops, model_cfg)
    patch_emb, register_emb = M.encode(encoder, tokens, model_cfg)
    logits = head_logits(head, cfg, patch_emb, register_emb)
    return 1.0 / (1.0 + np.exp(-logits.data))


def predict_record(encoder, head, cfg: EvalConfig, model_cfg: ModelConfig, rec: EcgRecord) -> np.ndarray:
    """Per-class probability for one record: sigmoid per crop, arithmetic
    mean over its 2.5 s crops."""
    dtype = next(iter(encoder.values())).dtype
    crops = np.stack([c.samples for c in eval_crops(rec)]).astype(dtype)
    return _forward_crops(encoder, head, cfg, model_cfg, crops).mean(axis=0)


def predict_fold(encoder, head, cfg, model_cfg, dataset: LabeledDataset, fold: str) -> tuple[np.ndarray, np.ndarray]:
    """(scores, labels) over one fold, record by record."""
    idx = dataset.indices(fold)
    scores = np.stack([predict_record(encoder, head, cfg, model_cfg, dataset.records[i]) for i in idx])
    return scores, dataset.labels[idx]


# ---------------------------------------------------------------------------
# metric


def macro_auc(scores, labels) -> float:
    """Macro-averaged ROC AUC by rank statistic; ties count half. Classes
    missing either positives or negatives are skipped; raises if no class
    is scoreable."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels) > 0.5
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    aucs = []
    for c in range(scores.shape[1]):
        pos = labels[:, c]
        npos = int(pos.sum())
        nneg = pos.size - npos
        if npos == 0 or nneg == 0:
            continue
        ranks = rankdata(scores[:, c])
        aucs.append((ranks[pos].sum() - npos * (npos + 1) / 2) / (npos * nneg))
    if not aucs:
        raise ValueError("no class has both positive and negative records")
    return float(np.mean(aucs))


# ---------------------------------------------------------------------------
# head training


@dataclass
class EvalResult:
    encoder: dict[str, Tensor]
    head: dict[str, Tensor]
    cfg: EvalConfig
    best_val_auc: float
    history: list = field(default_factory=list)  # (step, val_auc)


def train_head(
    mode_or_cfg,
    encoder_state: dict[str, np.ndarray | Tensor],
    model_cfg: ModelConfig,
    dataset: LabeledDataset,
    rng: np.random.Generator,
    head_state: dict | None = None,
) -> EvalResult:
    """Train a classification head (and, unless linear, the encoder) on the
    train fold, early-stopping on validation macro AUC (crop-averaged, same
    protocol as test time). Returns the best-validation state.

    ``two_stage`` requires ``head_state`` from a prior linear run.
    """
    cfg = mode_or_cfg if isinstance(mode_or_cfg, EvalConfig) else EvalConfig.for_mode(mode_or_cfg)
    if cfg.mode == "two_stage" and head_state is None:
        raise ValueError("two_stage fine-tuning requires the head of a prior linear-eval artifact")

    trainable_encoder = cfg.mode != "linear"
    encoder = {
        name: Tensor(np.array(p.data if isinstance(p, Tensor) else p), requires_grad=trainable_encoder)
        for name, p in encoder_state.items()
        if M.is_encoder_param(name)
    }
    dtype = next(iter(encoder.values())).dtype
    if head_state is not None:
        head = {name: T.parameter(np.array(p.data if isinstance(p, Tensor) else p)) for name, p in head_state.items()}
    else:
        head = init_head(cfg, model_cfg.encoder_dim, dataset.num_classes, rng, dtype)

    trainable = dict(head)
    if trainable_encoder:
        trainable.update(encoder)
    adam = AdamState.for_params(trainable)
    train_idx = dataset.indices("train")
    if train_idx.size == 0:
        raise ValueError("dataset has no train fold")

    def snapshot():
        return (
            {k: v.data.copy() for k, v in encoder.items()},
            {k: v.data.copy() for k, v in head.items()},
        )

    best = snapshot()
    best_auc = -1.0
    history = []
    for step in range(cfg.steps):
        batch_idx = rng.choice(train_idx, size=cfg.batch_size)
        crops = np.stack(
            [train_crops(dataset.records[i], rng).samples for i in batch_idx]
        ).astype(dtype)
        tokens = M.patchify(encoder, crops, model_cfg)
        patch_emb, register_emb = M.encode(
            encoder, tokens, model_cfg, dropout=cfg.dropout, train=True, rng=rng
        )
        logits = head_logits(head, cfg, patch_emb, register_emb)
        loss = T.bce_with_logits(logits, dataset.labels[batch_idx].astype(dtype))
        T.zero_grads(trainable)
        T.backward(loss)
        grads = {name: p.grad for name, p in trainable.items() if p.grad is not None}
        lr = (
            cfg.lr * step / cfg.warmup_steps
            if step < cfg.warmup_steps
            else cosine_anneal(step - cfg.warmup_steps, cfg.steps - cfg.warmup_steps, cfg.lr, cfg.lr_end)
        )
        adamw_step(
            trainable, grads, adam, lr=lr, wd=cfg.weight_decay,
            beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, decayed=_decayed,
        )
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            val_scores, val_labels = predict_fold(encoder, head, cfg, model_cfg, dataset, "val")
            auc = macro_auc(val_scores, val_labels)
            history.append((step + 1, auc))
            if auc > best_auc:
                best_auc = auc
                best = snapshot()

    enc_data, head_data = best
    best_encoder = {k: Tensor(v) for k, v in enc_data.items()}
    best_head = {k: Tensor(v) for k, v in head_data.items()}
    return EvalResult(encoder=best_encoder, head=best_head, cfg=cfg, best_val_auc=best_auc, history=history)


# ---------------------------------------------------------------------------
# eval artifacts (checkpoint reuse for the two-stage handoff)


def save_eval_artifact(path, result: EvalResult, model_cfg: ModelConfig) -> Path:
    tensors = {f"encoder/{k}": v for k, v in result.encoder.items()}
    tensors.update({f"head/{k}": v for k, v in result.head.items()})
    extra = {"mode": result.cfg.mode, "best_val_auc": repr(result.best_val_auc)}
    return M.save_checkpoint(path, model_cfg, 0, tensors, None, extra)


def load_eval_artifact(path):
    """Returns (model_cfg, mode, encoder dict, head dict)."""
    model_cfg, _, _, extra, tensors = M.load_checkpoint(path)
    encoder = {k[len("encoder/"):]: v for k, v in tensors.items() if k.startswith("encoder/")}
    head = {k[len("head/"):]: v for k, v in tensors.items() if k.startswith("head/")}
    return model_cfg, extra.get("mode", ""), encoder, head
