"""Ranking evaluation: per-query ranks, Hits@k and mean rank.

Ranks use pessimistic tie-breaking (competitors tied with the target
count as ahead of it), so a constant-score model cannot look good by
luck. The filtered setting removes every other entity known to complete
the same (head, relation) from the competitor set; the target itself is
never removed.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .data import MultimodalKG, Triple


class EvalError(ValueError):
    """Undefined metric request (e.g. empty rank list)."""


class FilterIndex:
    """(head, relation) -> set of known true tails over all splits."""

    def __init__(self, triples):
        self.tails: dict[tuple[int, int], set[int]] = {}
        self.heads: dict[tuple[int, int], set[int]] = {}
        for tr in triples:
            self.tails.setdefault((tr.head, tr.relation), set()).add(tr.tail)
            self.heads.setdefault((tr.tail, tr.relation), set()).add(tr.head)

    @classmethod
    def from_mkg(cls, mkg: MultimodalKG) -> "FilterIndex":
        return cls(mkg.all_triples())

    def known_tails(self, head: int, relation: int) -> set[int]:
        return self.tails.get((head, relation), set())

    def known_heads(self, tail: int, relation: int) -> set[int]:
        return self.heads.get((tail, relation), set())


def rank_entities(scores: np.ndarray, true_entity: int,
                  filter_set: set[int] | None = None) -> int:
    """Rank of the true entity among all candidates, pessimistic ties.

    ``filter_set`` entities are removed from the competition (the true
    entity always competes). Rank 1 means nothing else scored >= target.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    if not 0 <= true_entity < n:
        raise EvalError(f"true entity {true_entity} out of range for {n} candidates")
    target_score = scores[true_entity]
    competing = scores >= target_score
    competing[true_entity] = False
    if filter_set:
        for e in filter_set:
            if e != true_entity and 0 <= e < n:
                competing[e] = False
    return 1 + int(np.count_nonzero(competing))


def hits_at_k(ranks, k: int) -> float:
    ranks = list(ranks)
    if not ranks:
        raise EvalError("hits_at_k over an empty rank list is undefined")
    return sum(1 for r in ranks if r <= k) / len(ranks)


def mean_rank(ranks) -> float:
    ranks = list(ranks)
    if not ranks:
        raise EvalError("mean_rank over an empty rank list is undefined")
    return sum(ranks) / len(ranks)


@dataclass
class RankRecord:
    triple: Triple
    raw_rank: int
    filtered_rank: int

    def __post_init__(self):
        if self.filtered_rank > self.raw_rank:
            raise EvalError("filtered rank cannot exceed raw rank")


@dataclass
class EvalReport:
    mr_raw: float
    mr_filtered: float
    hits_raw: dict[int, float]
    hits_filtered: dict[int, float]
    records: list[RankRecord] = field(default_factory=list)
    config_hash: str = ""
    seed: int = 0

    def metrics_lines(self) -> list[str]:
        """Stable key/value lines (sorted keys, fixed float format)."""
        kv = {
            "mr_raw": self.mr_raw,
            "mr_filtered": self.mr_filtered,
            "num_queries": len(self.records),
        }
        for k, v in self.hits_raw.items():
            kv[f"hits{k}_raw"] = v
        for k, v in self.hits_filtered.items():
            kv[f"hits{k}_filtered"] = v
        lines = [f"config_hash {self.config_hash}", f"seed {self.seed}"]
        for key in sorted(kv):
            val = kv[key]
            lines.append(f"{key} {val}" if isinstance(val, int) else f"{key} {val:.10f}")
        return lines

    def text_report(self) -> str:
        lines = [
            "link prediction evaluation",
            f"  queries: {len(self.records)}",
            f"  config:  {self.config_hash}",
            "  metric        raw        filtered",
            f"  MR       {self.mr_raw:10.3f} {self.mr_filtered:10.3f}",
        ]
        for k in sorted(self.hits_raw):
            lines.append(
                f"  Hits@{k:<3d} {self.hits_raw[k]:10.4f} {self.hits_filtered[k]:10.4f}"
            )
        return "\n".join(lines) + "\n"

    def write_files(self, report_path, metrics_path, ranks_csv_path=None):
        with open(report_path, "w", encoding="utf-8") as fh:
            fh.write(self.text_report())
        with open(metrics_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.metrics_lines()) + "\n")
        if ranks_csv_path is not None:
            with open(ranks_csv_path, "w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["head", "relation", "tail", "raw_rank", "filtered_rank"])
                for rec in self.records:
                    writer.writerow([rec.triple.head, rec.triple.relation,
                                     rec.triple.tail, rec.raw_rank, rec.filtered_rank])


def evaluate_ranks(score_tails, triples, filter_index: FilterIndex | None,
                   ks=(1, 3, 10), config_hash: str = "", seed: int = 0,
                   score_heads=None) -> EvalReport:
    """Run tail ranking over ``triples`` with a pluggable scorer.

    ``score_tails(head, relation) -> (N,) scores``. If ``score_heads``
    is given, each triple is additionally evaluated in the inverse
    direction (predict the head from (tail, relation)), the standard
    both-sides protocol; by default only tails are ranked.
    """
    records: list[RankRecord] = []
    for tr in triples:
        scores = np.asarray(score_tails(tr.head, tr.relation), dtype=np.float64)
        raw = rank_entities(scores, tr.tail, None)
        filt_set = (
            filter_index.known_tails(tr.head, tr.relation) if filter_index else set()
        )
        filt = rank_entities(scores, tr.tail, filt_set)
        records.append(RankRecord(tr, raw, filt))
        if score_heads is not None:
            h_scores = np.asarray(score_heads(tr.tail, tr.relation), dtype=np.float64)
            h_raw = rank_entities(h_scores, tr.head, None)
            h_filt_set = (
                filter_index.known_heads(tr.tail, tr.relation) if filter_index else set()
            )
            h_filt = rank_entities(h_scores, tr.head, h_filt_set)
            records.append(RankRecord(tr, h_raw, h_filt))
    raw_ranks = [rec.raw_rank for rec in records]
    filt_ranks = [rec.filtered_rank for rec in records]
    return EvalReport(
        mr_raw=mean_rank(raw_ranks),
        mr_filtered=mean_rank(filt_ranks),
        hits_raw={k: hits_at_k(raw_ranks, k) for k in ks},
        hits_filtered={k: hits_at_k(filt_ranks, k) for k in ks},
        records=records,
        config_hash=config_hash,
        seed=seed,
    )


def config_hash_of(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]
