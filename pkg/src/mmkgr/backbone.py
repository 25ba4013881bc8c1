"""Tiny transformer backbone: text encoder, vision encoder and a
multimodal encoder that cross-attends from text to vision states.

The three stacks mirror a split pretrained encoder: the text stack and
the fusion stack together play the role of one deep text model, the
vision stack feeds per-image pooled states into the fusion stack. The
[MASK] prediction head is a tied-embedding inner product against the
entity token rows, so its output is one score per entity.

Layers are pre-norm (x + sublayer(norm(x))): a sublayer whose output
projection is zero contributes exactly nothing, which keeps ablation
probes and the fusion-disabled equivalence exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Parameter
from .data import TokenizedQuery, VisualAttribute, Vocabulary
from .tensorfile import load_tensors, save_tensors


class SequenceLengthError(ValueError):
    """Input sequence exceeds the configured maximum (never truncated)."""


@dataclass
class ModelConfig:
    dim: int = 64
    heads: int = 4
    text_layers: int = 2
    vision_layers: int = 2
    fusion_layers: int = 2
    ffn_dim: int = 128
    max_seq_len: int = 64
    max_patches: int = 16
    patch_dim: int = 8
    num_entities: int = 0
    vocab_size: int = 0
    entity_offset: int = 0
    structure_dim: int = 0   # >0 adds a trainable projection from this width
    seed: int = 0

    def validate(self):
        if min(self.text_layers, self.vision_layers, self.fusion_layers) < 1:
            raise ValueError("each encoder needs at least one layer")
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.num_entities < 1 or self.vocab_size < 1:
            raise ValueError("model needs entity and vocabulary sizes")

    @classmethod
    def for_vocab(cls, vocab: Vocabulary, **kwargs) -> "ModelConfig":
        return cls(
            num_entities=vocab.num_entities,
            vocab_size=len(vocab),
            entity_offset=vocab.entity_offset,
            **kwargs,
        )


def _init(rng, *shape):
    return rng.normal(0.0, 0.02, size=shape)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, name):
        self.w = Parameter(_init(rng, d_in, d_out), name=f"{name}.w")
        self.b = Parameter(np.zeros(d_out), name=f"{name}.b")

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.w), self.b)


class LayerNorm(Module):
    def __init__(self, dim, name):
        self.gain = Parameter(np.ones(dim), name=f"{name}.gain")
        self.bias = Parameter(np.zeros(dim), name=f"{name}.bias")

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(Module):
    """Multi-head attention over 2-D (tokens, dim) states; heads are
    column slices of the shared projections."""

    def __init__(self, rng, dim, heads, name):
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(rng, dim, dim, f"{name}.q")
        self.wk = Linear(rng, dim, dim, f"{name}.k")
        self.wv = Linear(rng, dim, dim, f"{name}.v")
        self.wo = Linear(rng, dim, dim, f"{name}.o")

    def __call__(self, queries, keys_values, mask=None):
        q, k, v = self.wq(queries), self.wk(keys_values), self.wv(keys_values)
        outputs = []
        for h in range(self.heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            outputs.append(
                ad.scaled_dot_attention(
                    ad.slice_cols(q, lo, hi),
                    ad.slice_cols(k, lo, hi),
                    ad.slice_cols(v, lo, hi),
                    mask=mask,
                )
            )
        return self.wo(ad.concat(outputs, axis=1))


class FeedForward(Module):
    def __init__(self, rng, dim, ffn_dim, name):
        self.lift = Linear(rng, dim, ffn_dim, f"{name}.lift")
        self.drop = Linear(rng, ffn_dim, dim, f"{name}.drop")

    def __call__(self, x):
        return self.drop(ad.gelu(self.lift(x)))


class EncoderLayer(Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, rng, cfg: ModelConfig, name):
        self.ln_attn = LayerNorm(cfg.dim, f"{name}.ln_attn")
        self.attn = MultiHeadAttention(rng, cfg.dim, cfg.heads, f"{name}.attn")
        self.ln_ffn = LayerNorm(cfg.dim, f"{name}.ln_ffn")
        self.ffn = FeedForward(rng, cfg.dim, cfg.ffn_dim, f"{name}.ffn")

    def __call__(self, x, mask=None):
        normed = self.ln_attn(x)
        x = ad.add(x, self.attn(normed, normed, mask=mask))
        return ad.add(x, self.ffn(self.ln_ffn(x)))


class FusionLayer(Module):
    """Self-attention, then text-to-vision cross-attention, then
    feed-forward. Vision states are consumed as keys/values only."""

    def __init__(self, rng, cfg: ModelConfig, name):
        self.ln_attn = LayerNorm(cfg.dim, f"{name}.ln_attn")
        self.attn = MultiHeadAttention(rng, cfg.dim, cfg.heads, f"{name}.attn")
        self.ln_cross = LayerNorm(cfg.dim, f"{name}.ln_cross")
        self.cross = MultiHeadAttention(rng, cfg.dim, cfg.heads, f"{name}.cross")
        self.ln_ffn = LayerNorm(cfg.dim, f"{name}.ln_ffn")
        self.ffn = FeedForward(rng, cfg.dim, cfg.ffn_dim, f"{name}.ffn")

    def __call__(self, x, vision_states, mask=None, cross_mask=None):
        normed = self.ln_attn(x)
        x = ad.add(x, self.attn(normed, normed, mask=mask))
        if vision_states is not None:
            x = ad.add(x, self.cross(self.ln_cross(x), vision_states, mask=cross_mask))
        return ad.add(x, self.ffn(self.ln_ffn(x)))


BLOCK_MASK_NEG = -1e9


def block_mask(query_sizes, key_sizes) -> np.ndarray:
    """Additive attention mask: zero inside aligned (query, key) blocks,
    a large negative everywhere else. exp(-1e9 + s) underflows to exactly
    0.0, so masked positions contribute nothing to the softmax."""
    total_q, total_k = sum(query_sizes), sum(key_sizes)
    mask = np.full((total_q, total_k), BLOCK_MASK_NEG)
    qo = ko = 0
    for qs, ks in zip(query_sizes, key_sizes):
        mask[qo:qo + qs, ko:ko + ks] = 0.0
        qo += qs
        ko += ks
    return mask


class KGTransformer(Module):
    """The full desk-scale model: embeddings plus the three stacks."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(np.random.PCG64(cfg.seed))
        self.token_emb = Parameter(_init(rng, cfg.vocab_size, cfg.dim), name="token_emb")
        self.pos_emb = Parameter(_init(rng, cfg.max_seq_len, cfg.dim), name="pos_emb")
        self.text_stack = [EncoderLayer(rng, cfg, f"text.{i}") for i in range(cfg.text_layers)]
        self.patch_proj = Linear(rng, cfg.patch_dim, cfg.dim, "patch_proj")
        self.patch_pos_emb = Parameter(_init(rng, cfg.max_patches, cfg.dim), name="patch_pos_emb")
        self.vision_stack = [EncoderLayer(rng, cfg, f"vision.{i}") for i in range(cfg.vision_layers)]
        self.vision_ln = LayerNorm(cfg.dim, "vision_ln")
        self.fusion_stack = [FusionLayer(rng, cfg, f"fusion.{i}") for i in range(cfg.fusion_layers)]
        self.final_ln = LayerNorm(cfg.dim, "final_ln")
        # learned stand-in image for entities with no visual attribute
        self.no_image = Parameter(_init(rng, cfg.max_patches, cfg.patch_dim), name="no_image")
        if cfg.structure_dim > 0 and cfg.structure_dim != cfg.dim:
            self.structure_proj = Linear(rng, cfg.structure_dim, cfg.dim, "structure_proj")
        else:
            self.structure_proj = None

    # -- encoders ----------------------------------------------------------

    def encode_text(self, query: TokenizedQuery) -> ad.Tensor:
        """(T, dim) token states after the text stack."""
        ids = np.asarray(query.token_ids, dtype=np.int64)
        if ids.shape[0] > self.cfg.max_seq_len:
            raise SequenceLengthError(
                f"sequence length {ids.shape[0]} exceeds max_seq_len {self.cfg.max_seq_len}"
            )
        x = ad.add(ad.take_rows(self.token_emb, ids),
                   ad.slice_rows(self.pos_emb, 0, ids.shape[0]))
        for layer in self.text_stack:
            x = layer(x)
        return x

    def encode_image(self, patches) -> ad.Tensor:
        """(1, dim) pooled state of one image's patch matrix."""
        arr = np.asarray(patches, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != self.cfg.patch_dim:
            raise ValueError(
                f"patch matrix {arr.shape} does not match patch_dim {self.cfg.patch_dim}"
            )
        if arr.shape[0] > self.cfg.max_patches:
            raise SequenceLengthError(
                f"{arr.shape[0]} patches exceed max_patches {self.cfg.max_patches}"
            )
        return self._encode_patch_tensor(ad.constant(arr))

    def _encode_patch_tensor(self, patches: ad.Tensor) -> ad.Tensor:
        n = patches.shape[0]
        x = ad.add(self.patch_proj(patches), ad.slice_rows(self.patch_pos_emb, 0, n))
        for layer in self.vision_stack:
            x = layer(x)
        x = self.vision_ln(x)
        pooled = ad.tmean(x, axis=0)          # (dim,)
        return ad.tile_rows(pooled, 1)        # (1, dim)

    def encode_vision(self, attr: VisualAttribute | None) -> ad.Tensor:
        """(I, dim) matrix, one pooled row per image; entities without
        images get the learned placeholder (I = 1)."""
        if attr is None:
            return self._encode_patch_tensor(self.no_image)
        rows = [self._encode_patch_tensor(ad.constant(img)) for img in attr.images]
        return rows[0] if len(rows) == 1 else ad.concat(rows, axis=0)

    def encode_multimodal(self, text_states: ad.Tensor,
                          vision_states: ad.Tensor | None) -> ad.Tensor:
        """(T, dim) fused states; vision enters via cross-attention."""
        x = text_states
        for layer in self.fusion_stack:
            x = layer(x, vision_states)
        return self.final_ln(x)

    # -- prediction head -----------------------------------------------------

    def entity_embeddings(self) -> ad.Tensor:
        off = self.cfg.entity_offset
        return ad.slice_rows(self.token_emb, off, off + self.cfg.num_entities)

    def mlm_logits(self, h_mask: ad.Tensor) -> ad.Tensor:
        """(N,) entity scores: inner products with the tied entity rows."""
        return ad.matmul(self.entity_embeddings(), h_mask)

    def forward_plain(self, query: TokenizedQuery,
                      visual: VisualAttribute | None) -> ad.Tensor:
        """Backbone-only forward (no structural fusion anywhere)."""
        text_states = self.encode_text(query)
        vision_states = self.encode_vision(visual)
        fused = self.encode_multimodal(text_states, vision_states)
        return self.mlm_logits(ad.row(fused, query.mask_pos))

    # -- batched forward (same math, one graph per group of queries with
    #    identical sequence/image geometry) ----------------------------------

    def encode_text_batch(self, queries: list[TokenizedQuery]) -> ad.Tensor:
        """(B*T, dim) stacked token states; all queries share length T."""
        lengths = {len(q.token_ids) for q in queries}
        if len(lengths) != 1:
            raise ValueError("encode_text_batch needs a uniform sequence length")
        t = lengths.pop()
        if t > self.cfg.max_seq_len:
            raise SequenceLengthError(
                f"sequence length {t} exceeds max_seq_len {self.cfg.max_seq_len}"
            )
        b = len(queries)
        flat_ids = np.concatenate([np.asarray(q.token_ids, dtype=np.int64)
                                   for q in queries])
        pos_ids = np.tile(np.arange(t, dtype=np.int64), b)
        x = ad.add(ad.take_rows(self.token_emb, flat_ids),
                   ad.take_rows(self.pos_emb, pos_ids))
        mask = block_mask([t] * b, [t] * b)
        for layer in self.text_stack:
            x = layer(x, mask=mask)
        return x

    def encode_vision_batch(self, attrs: list[VisualAttribute | None]
                            ) -> tuple[ad.Tensor, list[int]]:
        """Stacked per-image pooled states for a batch of entities.

        Returns ((I_total, dim), images-per-entity list); missing
        attributes contribute one placeholder image each.
        """
        patch_tensors: list[ad.Tensor] = []
        patch_counts: list[int] = []
        image_counts: list[int] = []
        for attr in attrs:
            if attr is None:
                patch_tensors.append(self.no_image)
                patch_counts.append(self.no_image.shape[0])
                image_counts.append(1)
                continue
            image_counts.append(len(attr.images))
            for img in attr.images:
                if img.shape[1] != self.cfg.patch_dim:
                    raise ValueError(
                        f"patch matrix {img.shape} does not match patch_dim "
                        f"{self.cfg.patch_dim}"
                    )
                if img.shape[0] > self.cfg.max_patches:
                    raise SequenceLengthError(
                        f"{img.shape[0]} patches exceed max_patches {self.cfg.max_patches}"
                    )
                patch_tensors.append(ad.constant(img))
                patch_counts.append(img.shape[0])
        stacked = patch_tensors[0] if len(patch_tensors) == 1 else ad.concat(patch_tensors, axis=0)
        pos_ids = np.concatenate([np.arange(p, dtype=np.int64) for p in patch_counts])
        x = ad.add(self.patch_proj(stacked), ad.take_rows(self.patch_pos_emb, pos_ids))
        mask = block_mask(patch_counts, patch_counts)
        for layer in self.vision_stack:
            x = layer(x, mask=mask)
        x = self.vision_ln(x)
        pool = np.zeros((len(patch_counts), sum(patch_counts)))
        offset = 0
        for i, p in enumerate(patch_counts):
            pool[i, offset:offset + p] = 1.0 / p
            offset += p
        return ad.matmul(ad.constant(pool), x), image_counts

    def encode_multimodal_batch(self, text_states: ad.Tensor,
                                vision_states: ad.Tensor | None,
                                seq_len: int, image_counts: list[int]) -> ad.Tensor:
        b = len(image_counts)
        self_mask = block_mask([seq_len] * b, [seq_len] * b)
        cross_mask = (
            block_mask([seq_len] * b, image_counts)
            if vision_states is not None
            else None
        )
        x = text_states
        for layer in self.fusion_stack:
            x = layer(x, vision_states, mask=self_mask, cross_mask=cross_mask)
        return self.final_ln(x)

    def mlm_logits_batch(self, mask_states: ad.Tensor) -> ad.Tensor:
        """(B, N) scores from the (B, dim) stacked [MASK] states."""
        return ad.matmul(mask_states, ad.transpose(self.entity_embeddings()))

    def forward_plain_batch(self, queries: list[TokenizedQuery],
                            visuals: list[VisualAttribute | None]) -> ad.Tensor:
        """(B, N) backbone-only logits for a uniform-geometry batch."""
        t = len(queries[0].token_ids)
        text_states = self.encode_text_batch(queries)
        vision_states, image_counts = self.encode_vision_batch(visuals)
        fused = self.encode_multimodal_batch(text_states, vision_states, t, image_counts)
        mask_positions = np.array([i * t + q.mask_pos for i, q in enumerate(queries)])
        return self.mlm_logits_batch(ad.take_rows(fused, mask_positions))

    # -- persistence -----------------------------------------------------------

    def save(self, path):
        blocks = {name: p.data for name, p in self.named_parameters().items()}
        meta = {"model_config": vars(self.cfg)}
        save_tensors(path, blocks, meta)

    @classmethod
    def load(cls, path) -> "KGTransformer":
        blocks, meta = load_tensors(path)
        cfg = ModelConfig(**meta["model_config"])
        model = cls(cfg)
        params = model.named_parameters()
        missing = set(params) - set(blocks)
        extra = set(blocks) - set(params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing={missing}, extra={extra}")
        for name, p in params.items():
            if blocks[name].shape != p.data.shape:
                raise ValueError(f"checkpoint block {name} has shape {blocks[name].shape}")
            p.data = blocks[name]
        return model


def cross_entropy_loss(logits: ad.Tensor, target: int) -> ad.Tensor:
    """-log softmax(logits)[target] via a stable log-sum-exp."""
    n = logits.shape[0]
    if not 0 <= target < n:
        raise ValueError(f"target {target} out of range for {n} entities")
    onehot = np.zeros(n)
    onehot[target] = 1.0
    return ad.sub(ad.logsumexp(logits), ad.tsum(ad.mul(logits, ad.constant(onehot))))


def cross_entropy_batch(logits: ad.Tensor, targets) -> ad.Tensor:
    """(B,) per-row cross-entropies for (B, N) logits."""
    targets = np.asarray(targets, dtype=np.int64)
    b, n = logits.shape
    if targets.shape != (b,) or targets.min() < 0 or targets.max() >= n:
        raise ValueError(f"targets {targets.shape} invalid for logits {logits.shape}")
    onehot = np.zeros((b, n))
    onehot[np.arange(b), targets] = 1.0
    picked = ad.tsum(ad.mul(logits, ad.constant(onehot)), axis=1)
    return ad.sub(ad.logsumexp_rows(logits), picked)


def count_parameters(model: KGTransformer) -> dict[str, dict[str, int]]:
    """Per-group trainable/frozen element counts, keyed by the first
    name component."""
    out: dict[str, dict[str, int]] = {}
    for name, p in model.named_parameters().items():
        group = name.split(".")[0]
        slot = out.setdefault(group, {"trainable": 0, "frozen": 0})
        slot["trainable" if p.trainable else "frozen"] += p.size
    return out
