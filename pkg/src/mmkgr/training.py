"""Two-stage training loops over the templated queries.

Stage one (structure encoding) lives in ``structure``; this module owns
the transformer stages: pretraining over entity-description templates
and finetuning over reasoning templates, both as repeated fused train
steps. A plain variant that never touches the fusion machinery exists
for the fusion-disabled equivalence check; it consumes the RNG stream
identically, so trajectories are comparable bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .backbone import KGTransformer, cross_entropy_batch
from .data import (MultimodalKG, TokenizedQuery, Vocabulary,
                   build_pretrain_template, build_reason_template)
from .fusion import FusionConfig, StructureSource, group_queries, train_step
from .optim import Adam


@dataclass
class TrainConfig:
    epochs: int = 2
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0


def pretrain_queries(mkg: MultimodalKG, vocab: Vocabulary) -> list[TokenizedQuery]:
    return [build_pretrain_template(e, mkg, vocab) for e in range(mkg.num_entities)]


def finetune_queries(mkg: MultimodalKG, vocab: Vocabulary,
                     triples=None) -> list[TokenizedQuery]:
    triples = mkg.train if triples is None else triples
    return [build_reason_template(tr.head, tr.relation, tr.tail, mkg, vocab)
            for tr in triples]


def run_training(model: KGTransformer, mkg: MultimodalKG,
                 queries: list[TokenizedQuery], structure: StructureSource | None,
                 fusion_cfg: FusionConfig, tcfg: TrainConfig) -> list[float]:
    """Epoch loop of fused train steps; returns the per-step mean losses."""
    rng = np.random.default_rng(np.random.PCG64(tcfg.seed))
    optimizer = Adam(model.parameters(), lr=tcfg.lr)
    history: list[float] = []
    for _ in range(tcfg.epochs):
        order = rng.permutation(len(queries))
        for start in range(0, len(queries), tcfg.batch_size):
            batch = [queries[i] for i in order[start:start + tcfg.batch_size]]
            history.append(train_step(model, mkg, batch, structure, fusion_cfg, optimizer))
    return history


def run_training_plain(model: KGTransformer, mkg: MultimodalKG,
                       queries: list[TokenizedQuery],
                       tcfg: TrainConfig) -> list[float]:
    """Backbone-only training: same loop, grouping and RNG usage as
    ``run_training`` but the forward pass never sees fusion code."""
    rng = np.random.default_rng(np.random.PCG64(tcfg.seed))
    optimizer = Adam(model.parameters(), lr=tcfg.lr)
    history: list[float] = []
    for _ in range(tcfg.epochs):
        order = rng.permutation(len(queries))
        for start in range(0, len(queries), tcfg.batch_size):
            batch = [queries[i] for i in order[start:start + tcfg.batch_size]]
            total = None
            for group in group_queries(batch, mkg):
                visuals = [mkg.visual_attrs.get(q.head_entity) for q in group]
                logits = model.forward_plain_batch(group, visuals)
                term = ad.tsum(cross_entropy_batch(logits, [q.target for q in group]))
                total = term if total is None else ad.add(total, term)
            batch_loss = ad.scale(total, 1.0 / len(batch))
            optimizer.zero_grad()
            batch_loss.backward()
            optimizer.step()
            history.append(float(batch_loss.data))
    return history
