"""Structure-guided fusion: weighted summation and alignment constraint.

Weighted summation adds a scaled copy of the entity's structural vector
into the token states (one row of the text matrix, every row of the
vision matrix). The alignment constraint is a normalized squared
difference, equal to 2 - 2*cos, pulling text/vision features toward the
structural feature. Both pathways run independently per modality, can
be combined freely, and a disabled flag removes the pathway from the
graph entirely instead of zeroing its weight.

Alignment losses always read the pre-summation features, and the
structural table is frozen: gradients stop at the table row (they still
reach the optional trainable projection in front of it).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .backbone import KGTransformer, cross_entropy_batch, cross_entropy_loss
from .data import MultimodalKG, TokenizedQuery


class FusionError(ValueError):
    pass


@dataclass(frozen=True)
class FusionConfig:
    ws_text: bool = True
    ws_vision: bool = True
    ac_text: bool = True
    ac_vision: bool = True
    ws_text_weight: float = 0.01
    ws_vision_weight: float = 0.01
    ac_text_weight: float = 0.001
    ac_vision_weight: float = 0.001
    ac_vision_per_row: bool = False   # row-wise cosine variant, off by default

    def validate(self):
        for field in ("ws_text_weight", "ws_vision_weight", "ac_text_weight",
                      "ac_vision_weight"):
            v = getattr(self, field)
            if not np.isfinite(v) or v < 0:
                raise FusionError(f"{field} must be finite and >= 0, got {v}")

    @property
    def any_enabled(self) -> bool:
        return self.ws_text or self.ws_vision or self.ac_text or self.ac_vision


def disabled_fusion() -> FusionConfig:
    return FusionConfig(ws_text=False, ws_vision=False, ac_text=False, ac_vision=False)


# the named variants of the ablation study: which pathways to remove
ABLATION_VARIANTS: dict[str, tuple[str, ...]] = {
    "full": (),
    "no_ws_text": ("ws_text",),
    "no_ws_vision": ("ws_vision",),
    "no_ac_text": ("ac_text",),
    "no_ac_vision": ("ac_vision",),
    "no_ws": ("ws_text", "ws_vision"),
    "no_ac": ("ac_text", "ac_vision"),
    "no_text_fusion": ("ws_text", "ac_text"),
    "no_vision_fusion": ("ws_vision", "ac_vision"),
    "none": ("ws_text", "ws_vision", "ac_text", "ac_vision"),
}


def ablation_config(base: FusionConfig, variant: str) -> FusionConfig:
    if variant not in ABLATION_VARIANTS:
        raise FusionError(f"unknown ablation variant {variant!r}")
    return replace(base, **{flag: False for flag in ABLATION_VARIANTS[variant]})


def all_subset_configs(base: FusionConfig) -> dict[str, FusionConfig]:
    """All 16 on/off combinations of the four pathways."""
    flags = ("ws_text", "ws_vision", "ac_text", "ac_vision")
    out = {}
    for bits in range(16):
        values = {f: bool(bits >> i & 1) for i, f in enumerate(flags)}
        key = "+".join(f for f in flags if values[f]) or "none"
        out[key] = replace(base, **values)
    return out


# ---------------------------------------------------------------------------
# fusion operations
# ---------------------------------------------------------------------------


def weighted_sum_text(h_text: ad.Tensor, h_struct: ad.Tensor, weight: float) -> ad.Tensor:
    if h_text.shape != h_struct.shape:
        raise FusionError(f"weighted_sum_text: {h_text.shape} vs {h_struct.shape}")
    return ad.add(h_text, ad.scale(h_struct, weight))


def replace_entity_row(text_states: ad.Tensor, head_entity_pos: int | None,
                       fused_row: ad.Tensor | None) -> ad.Tensor:
    """Swap the head entity's row for the fused vector; pretraining
    templates have no such row, so the matrix passes through."""
    if head_entity_pos is None or fused_row is None:
        return text_states
    return ad.replace_row(text_states, head_entity_pos, fused_row)


def expand_structural(h_struct: ad.Tensor, num_images: int) -> ad.Tensor:
    if num_images <= 0:
        raise FusionError(f"cannot expand to {num_images} rows")
    return ad.tile_rows(h_struct, num_images)


def weighted_sum_vision(vision_states: ad.Tensor, struct_expanded: ad.Tensor,
                        weight: float) -> ad.Tensor:
    if vision_states.shape != struct_expanded.shape:
        raise FusionError(
            f"weighted_sum_vision: {vision_states.shape} vs {struct_expanded.shape}"
        )
    return ad.add(vision_states, ad.scale(struct_expanded, weight))


def _cosine_alignment(a: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    """2 - 2*cos(a, b) over flattened inputs (Frobenius for matrices)."""
    dot = ad.tsum(ad.mul(a, b))
    na = ad.sqrt(ad.tsum(ad.mul(a, a)))
    nb = ad.sqrt(ad.tsum(ad.mul(b, b)))
    if float(na.data) == 0.0 or float(nb.data) == 0.0:
        raise FusionError("alignment loss undefined for zero-norm input")
    return ad.sub(ad.constant(2.0), ad.scale(ad.div(dot, ad.mul(na, nb)), 2.0))


def align_loss_text(h_text: ad.Tensor, h_struct: ad.Tensor) -> ad.Tensor:
    if h_text.shape != h_struct.shape:
        raise FusionError(f"align_loss_text: {h_text.shape} vs {h_struct.shape}")
    return _cosine_alignment(h_text, h_struct)


def align_loss_vision(vision_states: ad.Tensor, struct_expanded: ad.Tensor,
                      per_row: bool = False) -> ad.Tensor:
    if vision_states.shape != struct_expanded.shape:
        raise FusionError(
            f"align_loss_vision: {vision_states.shape} vs {struct_expanded.shape}"
        )
    if not per_row:
        return _cosine_alignment(vision_states, struct_expanded)
    rows = [
        _cosine_alignment(ad.row(vision_states, i), ad.row(struct_expanded, i))
        for i in range(vision_states.shape[0])
    ]
    total = rows[0]
    for term in rows[1:]:
        total = ad.add(total, term)
    return ad.scale(total, 1.0 / len(rows))


def total_alignment_loss(loss_text: ad.Tensor | None, loss_vision: ad.Tensor | None,
                         cfg: FusionConfig) -> ad.Tensor | None:
    """Weighted sum of the enabled alignment terms; None when neither
    pathway contributes."""
    terms = []
    if cfg.ac_text and loss_text is not None:
        terms.append(ad.scale(loss_text, cfg.ac_text_weight))
    if cfg.ac_vision and loss_vision is not None:
        terms.append(ad.scale(loss_vision, cfg.ac_vision_weight))
    if not terms:
        return None
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return total


def total_loss(loss_ce: ad.Tensor, loss_align: ad.Tensor | None) -> ad.Tensor:
    return loss_ce if loss_align is None else ad.add(loss_ce, loss_align)


# ---------------------------------------------------------------------------
# fused forward and the training objective
# ---------------------------------------------------------------------------


class StructureSource:
    """Frozen structural rows, optionally behind the model's trainable
    projection. Gradients never reach the stored matrix."""

    def __init__(self, matrix: np.ndarray, model: KGTransformer):
        if matrix.ndim != 2:
            raise FusionError(f"structure matrix must be 2-D, got {matrix.shape}")
        expected = model.cfg.structure_dim if model.structure_proj is not None else model.cfg.dim
        if matrix.shape[1] != expected:
            raise FusionError(
                f"structure matrix width {matrix.shape[1]} does not match "
                f"the model's expected width {expected}"
            )
        if matrix.shape[0] != model.cfg.num_entities:
            raise FusionError(
                f"structure matrix covers {matrix.shape[0]} entities, "
                f"model has {model.cfg.num_entities}"
            )
        self.matrix = matrix
        self._const = ad.constant(matrix)
        self.model = model

    def vector(self, entity: int) -> ad.Tensor:
        raw = ad.constant(self.matrix[entity])
        if self.model.structure_proj is None:
            return raw
        return ad.row(self.model.structure_proj(ad.tile_rows(raw, 1)), 0)

    def rows(self, entities) -> ad.Tensor:
        """(B, dim) structural rows for an entity id array."""
        raw = ad.take_rows(self._const, np.asarray(entities, dtype=np.int64))
        if self.model.structure_proj is None:
            return raw
        return self.model.structure_proj(raw)


def forward_fused(model: KGTransformer, query: TokenizedQuery,
                  visual, structure: StructureSource | None,
                  cfg: FusionConfig):
    """One fused forward pass; returns (logits, loss terms dict).

    With every pathway disabled this reduces op-for-op to the plain
    backbone forward.
    """
    needs_struct = cfg.any_enabled
    if needs_struct and structure is None:
        raise FusionError("fusion pathways enabled but no structural table given")
    h_struct = structure.vector(query.head_entity) if needs_struct else None

    text_states = model.encode_text(query)
    h_text_head = (
        ad.row(text_states, query.head_entity_pos)
        if query.head_entity_pos is not None
        else None
    )
    if cfg.ws_text and h_text_head is not None:
        fused_row = weighted_sum_text(h_text_head, h_struct, cfg.ws_text_weight)
        text_states = replace_entity_row(text_states, query.head_entity_pos, fused_row)

    vision_states = model.encode_vision(visual)
    struct_expanded = (
        expand_structural(h_struct, vision_states.shape[0])
        if (cfg.ws_vision or cfg.ac_vision)
        else None
    )
    vision_fused = (
        weighted_sum_vision(vision_states, struct_expanded, cfg.ws_vision_weight)
        if cfg.ws_vision
        else vision_states
    )

    fused = model.encode_multimodal(text_states, vision_fused)
    logits = model.mlm_logits(ad.row(fused, query.mask_pos))

    loss_text = (
        align_loss_text(h_text_head, h_struct)
        if (cfg.ac_text and h_text_head is not None)
        else None
    )
    loss_vision = (
        align_loss_vision(vision_states, struct_expanded, per_row=cfg.ac_vision_per_row)
        if cfg.ac_vision
        else None
    )
    return logits, {"align_text": loss_text, "align_vision": loss_vision}


def query_loss(model: KGTransformer, query: TokenizedQuery, visual,
               structure: StructureSource | None, cfg: FusionConfig) -> ad.Tensor:
    if query.target is None:
        raise FusionError("cannot compute a loss for an inference query (target unset)")
    logits, aux = forward_fused(model, query, visual, structure, cfg)
    loss_ce = cross_entropy_loss(logits, query.target)
    loss_align = total_alignment_loss(aux["align_text"], aux["align_vision"], cfg)
    return total_loss(loss_ce, loss_align)


def group_queries(queries: list[TokenizedQuery], mkg: MultimodalKG
                  ) -> list[list[TokenizedQuery]]:
    """Split a batch into groups of identical sequence/image geometry so
    each group can run as one stacked graph."""
    groups: dict[tuple, list[TokenizedQuery]] = {}
    for q in queries:
        attr = mkg.visual_attrs.get(q.head_entity)
        if attr is None:
            vis_key = None
        else:
            vis_key = (len(attr.images), attr.images[0].shape[0])
        key = (len(q.token_ids), q.head_entity_pos is None, vis_key)
        groups.setdefault(key, []).append(q)
    return list(groups.values())


def _cosine_alignment_rows(a: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    """Row-wise 2 - 2*cos between matching rows of two (B, D) blocks."""
    dot = ad.tsum(ad.mul(a, b), axis=1)
    na = ad.sqrt(ad.tsum(ad.mul(a, a), axis=1))
    nb = ad.sqrt(ad.tsum(ad.mul(b, b), axis=1))
    if np.any(na.data == 0.0) or np.any(nb.data == 0.0):
        raise FusionError("alignment loss undefined for zero-norm input")
    cos = ad.div(dot, ad.mul(na, nb))
    return ad.sub(ad.constant(np.full(a.shape[0], 2.0)), ad.scale(cos, 2.0))


def _group_indicator(image_counts: list[int]) -> np.ndarray:
    total = sum(image_counts)
    ind = np.zeros((len(image_counts), total))
    offset = 0
    for i, c in enumerate(image_counts):
        ind[i, offset:offset + c] = 1.0
        offset += c
    return ind


def _align_vision_rows(vision_states: ad.Tensor, struct_expanded: ad.Tensor,
                       image_counts: list[int], per_row: bool) -> ad.Tensor:
    """(B,) vision alignment losses, one per query's image block."""
    ind = ad.constant(_group_indicator(image_counts))
    if per_row:
        row_losses = _cosine_alignment_rows(vision_states, struct_expanded)
        means = np.array([1.0 / c for c in image_counts])
        return ad.mul(ad.matmul(ind, row_losses), ad.constant(means))
    dots = ad.matmul(ind, ad.tsum(ad.mul(vision_states, struct_expanded), axis=1))
    sq_v = ad.matmul(ind, ad.tsum(ad.mul(vision_states, vision_states), axis=1))
    sq_s = ad.matmul(ind, ad.tsum(ad.mul(struct_expanded, struct_expanded), axis=1))
    if np.any(sq_v.data == 0.0) or np.any(sq_s.data == 0.0):
        raise FusionError("alignment loss undefined for zero-norm input")
    cos = ad.div(dots, ad.mul(ad.sqrt(sq_v), ad.sqrt(sq_s)))
    return ad.sub(ad.constant(np.full(len(image_counts), 2.0)), ad.scale(cos, 2.0))


def group_loss_sum(model: KGTransformer, mkg: MultimodalKG,
                   group: list[TokenizedQuery], structure: StructureSource | None,
                   cfg: FusionConfig) -> ad.Tensor:
    """Summed fused loss over one uniform-geometry query group."""
    b = len(group)
    t = len(group[0].token_ids)
    needs_struct = cfg.any_enabled
    if needs_struct and structure is None:
        raise FusionError("fusion pathways enabled but no structural table given")
    head_entities = np.array([q.head_entity for q in group], dtype=np.int64)
    h_struct = structure.rows(head_entities) if needs_struct else None
    has_head_pos = group[0].head_entity_pos is not None

    text_states = model.encode_text_batch(group)
    h_text_head = None
    if has_head_pos:
        flat_head = np.array([i * t + q.head_entity_pos for i, q in enumerate(group)])
        h_text_head = ad.take_rows(text_states, flat_head)
        if cfg.ws_text:
            fused_rows = ad.add(h_text_head, ad.scale(h_struct, cfg.ws_text_weight))
            text_states = ad.replace_rows(text_states, flat_head, fused_rows)

    visuals = [mkg.visual_attrs.get(q.head_entity) for q in group]
    vision_states, image_counts = model.encode_vision_batch(visuals)
    struct_expanded = None
    if cfg.ws_vision or cfg.ac_vision:
        owner = np.repeat(np.arange(b), image_counts)
        struct_expanded = ad.take_rows(h_struct, owner)
    vision_fused = (
        ad.add(vision_states, ad.scale(struct_expanded, cfg.ws_vision_weight))
        if cfg.ws_vision
        else vision_states
    )

    fused = model.encode_multimodal_batch(text_states, vision_fused, t, image_counts)
    mask_positions = np.array([i * t + q.mask_pos for i, q in enumerate(group)])
    logits = model.mlm_logits_batch(ad.take_rows(fused, mask_positions))
    targets = [q.target for q in group]
    if any(tgt is None for tgt in targets):
        raise FusionError("cannot compute a loss for an inference query (target unset)")
    total = ad.tsum(cross_entropy_batch(logits, targets))

    if cfg.ac_text and h_text_head is not None:
        align_t = ad.tsum(_cosine_alignment_rows(h_text_head, h_struct))
        total = ad.add(total, ad.scale(align_t, cfg.ac_text_weight))
    if cfg.ac_vision:
        align_v = ad.tsum(_align_vision_rows(vision_states, struct_expanded,
                                             image_counts, cfg.ac_vision_per_row))
        total = ad.add(total, ad.scale(align_v, cfg.ac_vision_weight))
    return total


def train_step(model: KGTransformer, mkg: MultimodalKG,
               queries: list[TokenizedQuery], structure: StructureSource | None,
               cfg: FusionConfig, optimizer) -> float:
    """One optimizer step over a query batch; returns the mean loss.

    Queries are stacked into uniform-geometry groups and each group runs
    as a single graph; the result is the same objective as the per-query
    path up to floating-point summation order.
    """
    if not queries:
        raise FusionError("empty batch")
    total = None
    for group in group_queries(queries, mkg):
        term = group_loss_sum(model, mkg, group, structure, cfg)
        total = term if total is None else ad.add(total, term)
    batch_loss = ad.scale(total, 1.0 / len(queries))
    optimizer.zero_grad()
    batch_loss.backward()
    optimizer.step()
    return float(batch_loss.data)


class TransformerTailScorer:
    """Scores all candidate tails for (head, relation) queries through
    the fused forward pass; used by the ranking evaluation."""

    def __init__(self, model: KGTransformer, mkg: MultimodalKG, vocab,
                 structure: StructureSource | None, cfg: FusionConfig):
        from .data import build_reason_template

        self._template = build_reason_template
        self.model = model
        self.mkg = mkg
        self.vocab = vocab
        self.structure = structure
        self.cfg = cfg

    def __call__(self, head: int, relation: int) -> np.ndarray:
        query = self._template(head, relation, None, self.mkg, self.vocab)
        visual = self.mkg.visual_attrs.get(head)
        with ad.no_grad():
            logits, _ = forward_fused(self.model, query, visual, self.structure, self.cfg)
        return logits.data
