"""Contiguous-block masking over 1-d patch sequences.

A batch-wide target count k is drawn once (ratio uniform in
[ratio_min, ratio_max] of the patch count), then each batch element is
masked by repeatedly picking one of its remaining unmasked blocks and
masking a contiguous sub-segment of it, until exactly k patches are
masked. The block list shrinks as segments are carved out; a partial
carve leaves up to two unmasked fragments behind. Every masked segment is
at least min_block = ceil(0.05 * N) patches long, except that the final
segment may be trimmed short to land exactly on k.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["MaskSpec", "sample_mask", "split_by_mask"]


@dataclass(frozen=True)
class MaskSpec:
    """Masked/context index sets for one batch, with a shared target count.

    masked and context are [batch, k] / [batch, N-k] int arrays, each row
    sorted; together they partition 0..N-1 for every element.
    """

    num_patches: int
    target_count: int
    masked: np.ndarray
    context: np.ndarray

    def min_block(self) -> int:
        return max(1, math.ceil(0.05 * self.num_patches))


def _mask_one(n: int, k: int, min_block: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices of k masked patches for a single element."""
    blocks = [(0, n)]  # (start, length) of unmasked runs
    flags = np.zeros(n, dtype=bool)
    remaining = k
    while remaining > 0:
        i = int(rng.integers(len(blocks)))
        start, length = blocks[i]
        lo = min(min_block, length)
        seg = int(rng.integers(lo, length + 1))
        if seg > remaining:  # final segment, trimmed to hit k exactly
            seg = remaining
        off = start + int(rng.integers(length - seg + 1))
        flags[off : off + seg] = True
        remaining -= seg
        frags = []
        if off > start:
            frags.append((start, off - start))
        tail = (start + length) - (off + seg)
        if tail > 0:
            frags.append((off + seg, tail))
        blocks[i : i + 1] = frags
    return np.flatnonzero(flags)


def sample_mask(
    num_patches: int,
    batch_size: int,
    rng: np.random.Generator,
    ratio_min: float = 0.75,
    ratio_max: float = 0.85,
) -> MaskSpec:
    """Draw a MaskSpec with one shared masked count for the whole batch.

    num_patches must be >= 20 so the minimum block is at least one patch
    and the ratio window contains a reachable count.
    """
    if num_patches < 20:
        raise ValueError(f"num_patches must be >= 20, got {num_patches}")
    ratio = rng.uniform(ratio_min, ratio_max)
    k = round(ratio * num_patches)
    # round() can step just outside the ratio window when the bounds are
    # fractional; clamp so k/N always stays inside it.
    k = min(max(k, math.ceil(ratio_min * num_patches)), math.floor(ratio_max * num_patches))
    min_block = max(1, math.ceil(0.05 * num_patches))
    masked = np.stack([_mask_one(num_patches, k, min_block, rng) for _ in range(batch_size)])
    everything = np.arange(num_patches)
    context = np.stack([np.setdiff1d(everything, row, assume_unique=True) for row in masked])
    return MaskSpec(num_patches=num_patches, target_count=k, masked=masked, context=context)


def split_by_mask(tokens, spec: MaskSpec):
    """Split a PatchBatch into (context batch, untouched full batch, masked
    index sets). Context tokens keep their original order and positional
    indices."""
    from .model import PatchBatch
    from .tensor import gather_tokens

    n = tokens.tokens.shape[1]
    if n != spec.num_patches:
        raise ValueError(f"mask spec covers {spec.num_patches} patches, batch has {n}")
    if spec.masked.size and (spec.masked.min() < 0 or spec.masked.max() >= n):
        raise IndexError("masked index out of range")
    positions = tokens.positions
    if positions.ndim == 1:
        ctx_positions = positions[spec.context]
    else:
        ctx_positions = np.take_along_axis(positions, spec.context, axis=1)
    context = PatchBatch(tokens=gather_tokens(tokens.tokens, spec.context), positions=ctx_positions)
    return context, tokens, spec.masked
