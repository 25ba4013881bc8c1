"""Knowledge-graph structure encoder.

Trains an embedding model (TransE, DistMult or the modulus/phase model
HAKE) on the triple graph alone, then exports an entity table for the
downstream transformer. The table is frozen once exported; no gradient
ever flows back into it from the fusion stage.

Scoring conventions (higher is more plausible):

* TransE:    -||h + r - t||_2
* DistMult:  sum(h * r * t)
* HAKE:      -( ||h_m * r_m - t_m||_2
               + phase_weight * ||sin((h_p + r_p - t_p) / 2)||_1 )

TransE and HAKE train with the smooth sigmoid margin loss and optional
self-adversarial negative weighting; DistMult trains with the logistic
loss. Negatives corrupt head or tail uniformly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Module, NonFiniteError, Parameter
from .data import Triple
from .evaluate import FilterIndex, evaluate_ranks
from .optim import Adam
from .tensorfile import load_tensors, save_tensors

MODEL_KINDS = ("transe", "distmult", "hake")


class StructureConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    """Non-finite loss during structure training; message names the epoch."""


@dataclass
class StructureEncoderConfig:
    model: str = "transe"
    dim: int = 32
    margin: float = 1.0
    negatives: int = 8
    epochs: int = 600
    lr: float = 0.05
    adversarial_temperature: float = 1.0   # 0 disables self-adversarial weighting
    phase_weight: float = 0.5              # HAKE only
    batch_size: int = 0                    # 0 = full batch
    seed: int = 0

    def validate(self):
        if self.model not in MODEL_KINDS:
            raise StructureConfigError(f"unknown model kind {self.model!r}")
        if self.dim < 1:
            raise StructureConfigError("dim must be >= 1")
        if self.negatives < 1:
            raise StructureConfigError("need at least one negative per positive")
        if self.model in ("transe", "hake") and self.margin <= 0:
            raise StructureConfigError("margin must be positive")

    def stable_hash(self) -> str:
        from .evaluate import config_hash_of

        return config_hash_of(repr(self))


@dataclass
class StructuralEmbeddingTable:
    """Entity table (matrix) plus the raw per-model parameter blocks."""

    matrix: np.ndarray
    model_kind: str
    num_entities: int
    seed: int
    cfg_hash: str
    raw_blocks: dict[str, np.ndarray] = field(default_factory=dict)
    gram_error: float | None = None
    projected: bool = False

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


class _KGEModel(Module):
    kind = ""

    def __init__(self, num_entities: int, num_relations: int, cfg: StructureEncoderConfig):
        self.num_entities = num_entities
        self.num_relations = num_relations
        self.cfg = cfg

    def score_batch(self, h_idx, r_idx, t_idx) -> ad.Tensor:
        """(B,) plausibility scores through the autodiff graph."""
        raise NotImplementedError

    def score_all_tails(self, h: int, r: int) -> np.ndarray:
        """Fast forward-only (N,) tail scores."""
        raise NotImplementedError

    def entity_table(self) -> np.ndarray:
        raise NotImplementedError

    def raw_blocks(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}


class TransE(_KGEModel):
    kind = "transe"

    def __init__(self, num_entities, num_relations, cfg, rng):
        super().__init__(num_entities, num_relations, cfg)
        bound = 6.0 / np.sqrt(cfg.dim)
        self.ent = Parameter(rng.uniform(-bound, bound, size=(num_entities, cfg.dim)), name="ent")
        self.rel = Parameter(rng.uniform(-bound, bound, size=(num_relations, cfg.dim)), name="rel")

    def _distance(self, h_idx, r_idx, t_idx) -> ad.Tensor:
        h = ad.take_rows(self.ent, h_idx)
        r = ad.take_rows(self.rel, r_idx)
        t = ad.take_rows(self.ent, t_idx)
        diff = ad.sub(ad.add(h, r), t)
        # smooth the norm at zero so gradients stay defined
        return ad.sqrt(ad.add(ad.tsum(ad.mul(diff, diff), axis=1), 1e-12))

    def score_batch(self, h_idx, r_idx, t_idx):
        return ad.scale(self._distance(h_idx, r_idx, t_idx), -1.0)

    def score_all_tails(self, h, r):
        target = self.ent.data[h] + self.rel.data[r]
        return -np.sqrt(((target[None, :] - self.ent.data) ** 2).sum(axis=1) + 1e-12)

    def entity_table(self):
        return self.ent.data.copy()


class DistMult(_KGEModel):
    kind = "distmult"

    def __init__(self, num_entities, num_relations, cfg, rng):
        super().__init__(num_entities, num_relations, cfg)
        scale = 1.0 / np.sqrt(cfg.dim)
        self.ent = Parameter(rng.normal(0.0, scale, size=(num_entities, cfg.dim)), name="ent")
        self.rel = Parameter(rng.normal(0.0, scale, size=(num_relations, cfg.dim)), name="rel")

    def score_batch(self, h_idx, r_idx, t_idx):
        h = ad.take_rows(self.ent, h_idx)
        r = ad.take_rows(self.rel, r_idx)
        t = ad.take_rows(self.ent, t_idx)
        return ad.tsum(ad.mul(ad.mul(h, r), t), axis=1)

    def score_all_tails(self, h, r):
        return self.ent.data @ (self.ent.data[h] * self.rel.data[r])

    def entity_table(self):
        return self.ent.data.copy()


class HAKE(_KGEModel):
    """Modulus/phase embeddings; the raw entity table is the 2d-wide
    concatenation (modulus, phase)."""

    kind = "hake"

    def __init__(self, num_entities, num_relations, cfg, rng):
        super().__init__(num_entities, num_relations, cfg)
        self.ent_mod = Parameter(rng.uniform(-1.0, 1.0, size=(num_entities, cfg.dim)), name="ent_mod")
        self.rel_mod = Parameter(rng.uniform(0.2, 1.2, size=(num_relations, cfg.dim)), name="rel_mod")
        self.ent_phase = Parameter(rng.uniform(-np.pi, np.pi, size=(num_entities, cfg.dim)), name="ent_phase")
        self.rel_phase = Parameter(rng.uniform(-np.pi, np.pi, size=(num_relations, cfg.dim)), name="rel_phase")

    def _distance(self, h_idx, r_idx, t_idx) -> ad.Tensor:
        hm = ad.take_rows(self.ent_mod, h_idx)
        rm = ad.take_rows(self.rel_mod, r_idx)
        tm = ad.take_rows(self.ent_mod, t_idx)
        mod_diff = ad.sub(ad.mul(hm, rm), tm)
        mod_dist = ad.sqrt(ad.add(ad.tsum(ad.mul(mod_diff, mod_diff), axis=1), 1e-12))
        hp = ad.take_rows(self.ent_phase, h_idx)
        rp = ad.take_rows(self.rel_phase, r_idx)
        tp = ad.take_rows(self.ent_phase, t_idx)
        phase = ad.scale(ad.sub(ad.add(hp, rp), tp), 0.5)
        phase_dist = ad.tsum(ad.absolute(ad.sin(phase)), axis=1)
        return ad.add(mod_dist, ad.scale(phase_dist, self.cfg.phase_weight))

    def score_batch(self, h_idx, r_idx, t_idx):
        return ad.scale(self._distance(h_idx, r_idx, t_idx), -1.0)

    def score_all_tails(self, h, r):
        mod_target = self.ent_mod.data[h] * self.rel_mod.data[r]
        mod_dist = np.sqrt(((mod_target[None, :] - self.ent_mod.data) ** 2).sum(axis=1) + 1e-12)
        phase_target = self.ent_phase.data[h] + self.rel_phase.data[r]
        phase_dist = np.abs(np.sin((phase_target[None, :] - self.ent_phase.data) / 2.0)).sum(axis=1)
        return -(mod_dist + self.cfg.phase_weight * phase_dist)

    def entity_table(self):
        return np.concatenate([self.ent_mod.data, self.ent_phase.data], axis=1)


_MODEL_CLASSES = {"transe": TransE, "distmult": DistMult, "hake": HAKE}


def build_model(num_entities: int, num_relations: int,
                cfg: StructureEncoderConfig) -> _KGEModel:
    cfg.validate()
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    return _MODEL_CLASSES[cfg.model](num_entities, num_relations, cfg, rng)


def score_triple(model: _KGEModel, h: int, r: int, t: int) -> float:
    with ad.no_grad():
        return float(model.score_batch(np.array([h]), np.array([r]), np.array([t])).data[0])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _sample_negatives(rng, heads, rels, tails, num_entities, k):
    """Corrupt head or tail uniformly over the other entities.

    The replacement is never the entity it displaces, so a corruption
    can not silently reproduce the positive it came from.
    """
    b = heads.shape[0]
    neg_h = np.repeat(heads, k)
    neg_t = np.repeat(tails, k)
    neg_r = np.repeat(rels, k)
    corrupt_tail = rng.random(b * k) < 0.5
    offsets = rng.integers(1, num_entities, size=b * k)
    neg_t = np.where(corrupt_tail, (neg_t + offsets) % num_entities, neg_t)
    neg_h = np.where(corrupt_tail, neg_h, (neg_h + offsets) % num_entities)
    return neg_h, neg_r, neg_t


def _margin_loss(model, h, r, t, neg_h, neg_r, neg_t, cfg) -> ad.Tensor:
    b, k = h.shape[0], cfg.negatives
    d_pos = model._distance(h, r, t)
    d_neg = model._distance(neg_h, neg_r, neg_t)
    pos_term = ad.tmean(ad.softplus(ad.add(d_pos, -cfg.margin)))
    neg_arg = ad.sub(ad.constant(np.full(b * k, cfg.margin)), d_neg)
    if cfg.adversarial_temperature > 0:
        logits = cfg.adversarial_temperature * (-d_neg.data).reshape(b, k)
        logits = logits - logits.max(axis=1, keepdims=True)
        weights = np.exp(logits)
        weights /= weights.sum(axis=1, keepdims=True)
        w_flat = weights.reshape(-1)
    else:
        w_flat = np.full(b * k, 1.0 / k)
    neg_term = ad.scale(ad.tsum(ad.mul(ad.constant(w_flat), ad.softplus(neg_arg))), 1.0 / b)
    return ad.add(pos_term, neg_term)


def _logistic_loss(model, h, r, t, neg_h, neg_r, neg_t) -> ad.Tensor:
    s_pos = model.score_batch(h, r, t)
    s_neg = model.score_batch(neg_h, neg_r, neg_t)
    return ad.add(ad.tmean(ad.softplus(ad.scale(s_pos, -1.0))), ad.tmean(ad.softplus(s_neg)))


def train_structure_encoder(triples: list[Triple], num_entities: int,
                            num_relations: int, cfg: StructureEncoderConfig,
                            ) -> tuple[StructuralEmbeddingTable, list[float], _KGEModel]:
    """Train on the triple graph; returns the (unprojected) entity table,
    per-epoch mean losses and the live model."""
    cfg.validate()
    if not triples:
        raise StructureConfigError("empty train split")
    model = build_model(num_entities, num_relations, cfg)
    heads = np.array([tr.head for tr in triples], dtype=np.int64)
    rels = np.array([tr.relation for tr in triples], dtype=np.int64)
    tails = np.array([tr.tail for tr in triples], dtype=np.int64)
    rng = np.random.default_rng(np.random.PCG64(cfg.seed + 1))
    optimizer = Adam(model.parameters(), lr=cfg.lr)
    history: list[float] = []
    batch = cfg.batch_size if cfg.batch_size > 0 else len(triples)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(triples))
        epoch_losses = []
        for start in range(0, len(triples), batch):
            idx = order[start:start + batch]
            h, r, t = heads[idx], rels[idx], tails[idx]
            neg_h, neg_r, neg_t = _sample_negatives(rng, h, r, t, num_entities, cfg.negatives)
            optimizer.zero_grad()
            try:
                if cfg.model == "distmult":
                    loss = _logistic_loss(model, h, r, t, neg_h, neg_r, neg_t)
                else:
                    loss = _margin_loss(model, h, r, t, neg_h, neg_r, neg_t, cfg)
                loss.backward()
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite loss at epoch {epoch}") from exc
            optimizer.step()
            epoch_losses.append(float(loss.data))
        history.append(float(np.mean(epoch_losses)))
    table = StructuralEmbeddingTable(
        matrix=model.entity_table(),
        model_kind=cfg.model,
        num_entities=num_entities,
        seed=cfg.seed,
        cfg_hash=cfg.stable_hash(),
        raw_blocks=model.raw_blocks(),
    )
    return table, history, model


def evaluate_structure_model(model: _KGEModel, held_out: list[Triple],
                             all_triples: list[Triple], ks=(1, 3, 10)):
    """The module's own ranking evaluation over its scoring function."""
    findex = FilterIndex(all_triples)
    return evaluate_ranks(model.score_all_tails, held_out, findex, ks=ks)


# ---------------------------------------------------------------------------
# projection and persistence
# ---------------------------------------------------------------------------


def projection_matrix(raw_dim: int, out_dim: int, seed: int) -> np.ndarray:
    """Seeded projection with orthonormal columns (raw >= out) or
    orthonormal rows (raw < out); either way a rigid map."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    n = max(raw_dim, out_dim)
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return q[:raw_dim, :out_dim]


def gram_deviation(raw: np.ndarray, projected: np.ndarray, cap: int = 256) -> float:
    m = min(raw.shape[0], cap)
    g_raw = raw[:m] @ raw[:m].T
    g_proj = projected[:m] @ projected[:m].T
    return float(np.abs(g_raw - g_proj).max())


def project_to_dim(table: StructuralEmbeddingTable, dim: int,
                   seed: int | None = None) -> StructuralEmbeddingTable:
    """Reconcile the raw table width with the transformer width.

    Identity (bitwise) when the widths already match; otherwise applies
    the seeded orthonormal projection and records the Gram deviation of
    the projected inner products.
    """
    if dim <= 0:
        raise StructureConfigError(f"target dim must be positive, got {dim}")
    if table.matrix.shape[1] == dim:
        return table
    seed = table.seed if seed is None else seed
    proj = projection_matrix(table.matrix.shape[1], dim, seed)
    projected = table.matrix @ proj
    return replace(
        table,
        matrix=projected,
        gram_error=gram_deviation(table.matrix, projected),
        projected=True,
    )


def export_table(table: StructuralEmbeddingTable, path):
    blocks = {"table": table.matrix}
    for name, arr in table.raw_blocks.items():
        blocks[f"raw.{name}"] = arr
    meta = {
        "model_kind": table.model_kind,
        "num_entities": table.num_entities,
        "dim": table.dim,
        "seed": table.seed,
        "cfg_hash": table.cfg_hash,
        "gram_error": table.gram_error,
        "projected": table.projected,
    }
    save_tensors(path, blocks, meta)


def import_table(path, expected_num_entities: int | None = None,
                 expected_cfg_hash: str | None = None) -> StructuralEmbeddingTable:
    blocks, meta = load_tensors(path)
    matrix = blocks.pop("table")
    if matrix.shape[0] != meta["num_entities"]:
        raise StructureConfigError(
            f"{path}: header says {meta['num_entities']} entities, table has {matrix.shape[0]} rows"
        )
    if expected_num_entities is not None and matrix.shape[0] != expected_num_entities:
        raise StructureConfigError(
            f"{path}: table covers {matrix.shape[0]} entities, dataset has {expected_num_entities}"
        )
    if expected_cfg_hash is not None and meta["cfg_hash"] != expected_cfg_hash:
        warnings.warn(
            f"{path}: table was trained under config {meta['cfg_hash']}, "
            f"expected {expected_cfg_hash}",
            stacklevel=2,
        )
    raw = {name[len("raw."):]: arr for name, arr in blocks.items() if name.startswith("raw.")}
    return StructuralEmbeddingTable(
        matrix=matrix,
        model_kind=meta["model_kind"],
        num_entities=meta["num_entities"],
        seed=meta["seed"],
        cfg_hash=meta["cfg_hash"],
        raw_blocks=raw,
        gram_error=meta.get("gram_error"),
        projected=meta.get("projected", False),
    )
