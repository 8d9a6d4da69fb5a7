"""Per-level transformer encoders with inverse-transform-sampled context.

Each level past the first receives as many sampled context tokens as it
has native ones, drawn from the previous (finer) level's combined feature
map: a probability vector is built from the channelwise means, indices are
drawn by inverting its CDF, and the picked rows join the level's own
tokens in one encoder block. Native tokens carry
sinusoidal positions; context tokens share a single learned embedding, so
their order cannot matter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .background import CombinedFeature
from .config import ModelConfig
from .layers import Conv1d, LayerNorm, Linear, Module, truncated_normal


@dataclass
class SampledContext:
    source_level: int
    indices: np.ndarray      # sorted ascending, within [0, T_source)
    features: Tensor         # K x C, rows aligned with indices


def pdf_from_features(features) -> np.ndarray:
    """Temporal probability vector: softmax over per-location channel means."""
    data = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    means = data.mean(axis=1)
    shifted = means - means.max()
    e = np.exp(shifted)
    return e / e.sum()


def inverse_transform_sample(pdf: np.ndarray, count: int, u_values: np.ndarray) -> np.ndarray:
    """Invert the CDF at each u: smallest index with CDF >= u and positive mass.

    ``u_values`` must be sorted; the result is then sorted too. Duplicate
    indices are allowed (count may exceed the support size).
    """
    pdf = np.asarray(pdf, dtype=np.float64)
    if pdf.ndim != 1:
        raise ValueError(f"pdf must be 1-D, got shape {pdf.shape}")
    if abs(pdf.sum() - 1.0) > 1e-6:
        raise ValueError(f"pdf sums to {pdf.sum()}, expected 1")
    u_values = np.asarray(u_values, dtype=np.float64)
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    if len(u_values) != count:
        raise ValueError(f"need {count} u values, got {len(u_values)}")
    if np.any(np.diff(u_values) < 0):
        raise ValueError("u values must be sorted ascending")
    cdf = np.cumsum(pdf)
    idx = np.searchsorted(cdf, u_values, side="left")
    idx = np.minimum(idx, len(pdf) - 1)
    # never land on zero-mass indices: advance to the next positive entry
    positive = pdf > 0.0
    out = np.empty(count, dtype=np.int64)
    for j, i in enumerate(idx):
        while i < len(pdf) - 1 and not positive[i]:
            i += 1
        out[j] = i
    return out


def stratified_u(count: int) -> np.ndarray:
    """Deterministic evaluation-time u grid: (k + 0.5) / K."""
    return (np.arange(count) + 0.5) / max(count, 1)


def sample_context(source: CombinedFeature, count: int,
                   rng: np.random.Generator | None) -> SampledContext:
    """Draw context rows from the previous level; seeded rng or stratified."""
    pdf = pdf_from_features(source.features)
    u = np.sort(rng.random(count)) if rng is not None else stratified_u(count)
    indices = inverse_transform_sample(pdf, count, u)
    return SampledContext(source_level=source.level, indices=indices,
                          features=ad.gather_rows(source.features, indices))


def positional_encoding(length: int, channels: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(channels, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * (i // 2)) / channels)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


class EncoderBlock(Module):
    """One post-norm transformer encoder block with multi-head self-attention."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, *, with_context: bool):
        c = config.channels
        self.heads = config.heads
        self.wq = Linear(c, c, rng=rng)
        # a key bias shifts every logit of a query row equally, which softmax
        # cancels; keeping it would add provably-zero-gradient parameters
        self.wk = Linear(c, c, rng=rng, bias=False)
        self.wv = Linear(c, c, rng=rng)
        self.wo = Linear(c, c, rng=rng)
        self.norm1 = LayerNorm(c)
        self.norm2 = LayerNorm(c)
        self.ffn1 = Linear(c, config.ffn_mult * c, rng=rng)
        self.ffn2 = Linear(config.ffn_mult * c, c, rng=rng)
        self.context_embed = (Tensor(truncated_normal(rng, (c,), 0.02), requires_grad=True)
                              if with_context else None)
        self.pos_scale = config.pos_scale

    def attention(self, tokens: Tensor, return_weights: bool = False):
        n, c = tokens.shape
        dh = c // self.heads
        q, k, v = self.wq(tokens), self.wk(tokens), self.wv(tokens)
        outs, weights = [], []
        for h in range(self.heads):
            qh = ad.narrow(q, 1, h * dh, dh)
            kh = ad.narrow(k, 1, h * dh, dh)
            vh = ad.narrow(v, 1, h * dh, dh)
            logits = ad.matmul(qh, ad.transpose(kh)) * (1.0 / np.sqrt(dh))
            attn = ad.softmax(logits, axis=-1)
            outs.append(ad.matmul(attn, vh))
            if return_weights:
                weights.append(attn.data.copy())
        mixed = self.wo(ad.concat(outs, axis=1))
        return (mixed, weights) if return_weights else mixed

    def __call__(self, tokens: Tensor) -> Tensor:
        x = self.norm1(tokens + self.attention(tokens))
        ffn = self.ffn2(ad.relu(self.ffn1(x)))
        return self.norm2(x + ffn)


def encode_level(combined: CombinedFeature, context: SampledContext | None,
                 block: EncoderBlock) -> Tensor:
    """Encode one level's tokens, plus optional sampled context rows."""
    t, c = combined.features.shape
    tokens = combined.features + Tensor(block.pos_scale * positional_encoding(t, c))
    if context is not None:
        if context.features.shape[1] != c:
            raise ValueError(
                f"context channels {context.features.shape[1]} != level channels {c}"
            )
        if block.context_embed is None:
            raise ValueError("encoder block was built without a context embedding")
        # canonical order: sorting by source index makes the context an
        # unordered set, so any input permutation encodes identically
        order = np.argsort(context.indices, kind="stable")
        ctx = ad.gather_rows(context.features, order) + block.context_embed
        tokens = ad.concat([tokens, ctx], axis=0)
    encoded = block(tokens)
    return ad.narrow(encoded, 0, 0, t)


@dataclass
class EncodePlan:
    """Discrete sampling decisions, reusable to pin a forward pass."""
    context_indices: list[np.ndarray | None]


class HierarchicalEncoder(Module):
    """N per-level blocks; each coarser level attends over sampled finer context."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.blocks = [EncoderBlock(config, rng, with_context=(i > 0))
                       for i in range(config.levels)]
        self.context_source = config.context_source

    def __call__(self, combined: list[CombinedFeature],
                 rng: np.random.Generator | None = None,
                 plan: EncodePlan | None = None) -> tuple[list[Tensor], EncodePlan]:
        encoded: list[Tensor] = []
        indices_used: list[np.ndarray | None] = []
        for i, (h, block) in enumerate(zip(combined, self.blocks)):
            if i == 0:
                context = None
                indices_used.append(None)
            else:
                count = h.features.shape[0]
                if plan is not None:
                    idx = plan.context_indices[i]
                    source = self._source(combined, encoded, i)
                    context = SampledContext(source_level=i, indices=idx,
                                             features=ad.gather_rows(source.features, idx))
                else:
                    context = sample_context(self._source(combined, encoded, i), count, rng)
                indices_used.append(context.indices)
            encoded.append(encode_level(h, context, block))
        return encoded, EncodePlan(context_indices=indices_used)

    def _source(self, combined: list[CombinedFeature], encoded: list[Tensor],
                i: int) -> CombinedFeature:
        if self.context_source == "encoded":
            return CombinedFeature(level=i, features=encoded[i - 1])
        return combined[i - 1]


class VanillaEncoder(Module):
    """Ablation: all levels concatenated through one shared block, then split."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.block = EncoderBlock(config, rng, with_context=False)

    def __call__(self, combined: list[CombinedFeature],
                 rng: np.random.Generator | None = None,
                 plan: EncodePlan | None = None) -> tuple[list[Tensor], EncodePlan]:
        lengths = [h.features.shape[0] for h in combined]
        c = combined[0].features.shape[1]
        total = sum(lengths)
        tokens = ad.concat([h.features for h in combined], axis=0) + Tensor(
            self.block.pos_scale * positional_encoding(total, c))
        encoded_all = self.block(tokens)
        outs = []
        offset = 0
        for t in lengths:
            outs.append(ad.narrow(encoded_all, 0, offset, t))
            offset += t
        return outs, EncodePlan(context_indices=[None] * len(combined))


class ConvEncoder(Module):
    """Ablation: per-level two-layer temporal convolution stacks."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        c = config.channels
        self.stacks = [
            (Conv1d(c, c, 3, padding=1, rng=rng), Conv1d(c, c, 3, padding=1, rng=rng))
            for _ in range(config.levels)
        ]

    def named_parameters(self, prefix: str = ""):
        for i, (a, b) in enumerate(self.stacks):
            yield from a.named_parameters(f"{prefix}stacks.{i}.0.")
            yield from b.named_parameters(f"{prefix}stacks.{i}.1.")

    def __call__(self, combined: list[CombinedFeature],
                 rng: np.random.Generator | None = None,
                 plan: EncodePlan | None = None) -> tuple[list[Tensor], EncodePlan]:
        outs = []
        for h, (first, second) in zip(combined, self.stacks):
            outs.append(second(ad.relu(first(h.features))))
        return outs, EncodePlan(context_indices=[None] * len(combined))


def build_encoder(config: ModelConfig, rng: np.random.Generator) -> Module:
    if config.encoder_type == "hierarchical":
        return HierarchicalEncoder(config, rng)
    if config.encoder_type == "vanilla":
        return VanillaEncoder(config, rng)
    return ConvEncoder(config, rng)
