"""Multimodal knowledge-graph data model, file ingestion and templating.

Entities and relations are dense integer ids assigned in order of first
appearance. A query is rendered as a token sequence with a tracked
[MASK] slot; reasoning templates also track the position of the head
entity token so fusion can replace that row later.

File formats (all UTF-8 text, documented here and round-trip tested):

* triples:       one ``head<TAB>relation<TAB>tail`` per line
* descriptions:  one ``entity<TAB>free text`` per line
* visual features: per entity, a header line
  ``entity num_images num_patches feature_dim`` followed by
  ``num_images * num_patches`` lines of ``feature_dim`` floats
  (one patch per line, row-major, '%.17g' so float64 round-trips)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CLS, SEP, MASK = "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (CLS, SEP, MASK)
NO_TEXT_WORD = "[NO_TEXT]"
# connector words of the entity-description pretraining template; always
# part of the vocabulary so any entity can be rendered
PRETRAIN_CONNECTOR = ("is", "the", "description", "of")


class DataFormatError(ValueError):
    """Malformed input file; message carries the offending line number."""


class LookupError_(KeyError):
    """Unknown entity/relation name against a fixed id map."""


@dataclass(frozen=True)
class Triple:
    head: int
    relation: int
    tail: int


@dataclass
class TextAttribute:
    """Token ids of an entity description (never empty)."""

    tokens: list[int]


@dataclass
class VisualAttribute:
    """One (num_patches, feature_dim) float matrix per image."""

    images: list[np.ndarray]

    def __post_init__(self):
        if not self.images:
            raise DataFormatError("visual attribute needs at least one image")
        p0, d0 = self.images[0].shape
        for img in self.images:
            if img.shape != (p0, d0):
                raise DataFormatError(
                    f"inconsistent patch shapes {img.shape} vs {(p0, d0)}"
                )


@dataclass
class MultimodalKG:
    num_entities: int
    num_relations: int
    train: list[Triple]
    dev: list[Triple]
    test: list[Triple]
    entity_names: list[str]
    relation_names: list[str]
    descriptions: dict[int, str] = field(default_factory=dict)
    visual_attrs: dict[int, VisualAttribute] = field(default_factory=dict)

    def all_triples(self) -> list[Triple]:
        return self.train + self.dev + self.test


class IdMap:
    """Interns string names to dense ids in first-appearance order."""

    def __init__(self):
        self.name_to_id: dict[str, int] = {}
        self.names: list[str] = []

    def intern(self, name: str) -> int:
        idx = self.name_to_id.get(name)
        if idx is None:
            idx = len(self.names)
            self.name_to_id[name] = idx
            self.names.append(name)
        return idx

    def lookup(self, name: str) -> int:
        try:
            return self.name_to_id[name]
        except KeyError:
            raise LookupError_(f"unknown name {name!r}") from None

    def __len__(self):
        return len(self.names)


def parse_triple_lines(lines, entities: IdMap, relations: IdMap,
                       frozen: bool = False, source: str = "<triples>") -> list[Triple]:
    """Parse tab-separated triples, interning names.

    With ``frozen=True`` (dev/test against a fixed train id map) unknown
    names raise instead of extending the maps. Duplicate lines are kept;
    deduplication is the caller's choice.
    """
    triples = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataFormatError(
                f"{source}:{lineno}: expected head<TAB>relation<TAB>tail, got {line!r}"
            )
        h, r, t = parts
        if frozen:
            triples.append(Triple(entities.lookup(h), relations.lookup(r), entities.lookup(t)))
        else:
            triples.append(Triple(entities.intern(h), relations.intern(r), entities.intern(t)))
    return triples


def load_triples(path, entities: IdMap | None = None, relations: IdMap | None = None,
                 frozen: bool = False) -> tuple[list[Triple], IdMap, IdMap]:
    entities = entities if entities is not None else IdMap()
    relations = relations if relations is not None else IdMap()
    with open(path, encoding="utf-8") as fh:
        triples = parse_triple_lines(fh, entities, relations, frozen=frozen, source=str(path))
    return triples, entities, relations


def load_descriptions(path, entities: IdMap) -> dict[int, str]:
    out: dict[int, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise DataFormatError(f"{path}:{lineno}: expected entity<TAB>text")
            name, text = line.split("\t", 1)
            out[entities.lookup(name)] = text
    return out


def save_descriptions(path, mkg: MultimodalKG):
    with open(path, "w", encoding="utf-8") as fh:
        for eid in sorted(mkg.descriptions):
            fh.write(f"{mkg.entity_names[eid]}\t{mkg.descriptions[eid]}\n")


def load_visual_features(path, entities: IdMap) -> dict[int, VisualAttribute]:
    out: dict[int, VisualAttribute] = {}
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    pos = 0
    while pos < len(lines):
        if not lines[pos]:
            pos += 1
            continue
        header = lines[pos].split()
        if len(header) != 4:
            raise DataFormatError(
                f"{path}:{pos + 1}: expected 'entity num_images num_patches feature_dim'"
            )
        name, n_img, n_patch, dim = header[0], int(header[1]), int(header[2]), int(header[3])
        eid = entities.lookup(name)
        pos += 1
        images = []
        for _ in range(n_img):
            patch_rows = []
            for _ in range(n_patch):
                if pos >= len(lines):
                    raise DataFormatError(f"{path}: truncated patch block for {name!r}")
                values = lines[pos].split()
                if len(values) != dim:
                    raise DataFormatError(
                        f"{path}:{pos + 1}: expected {dim} floats, got {len(values)}"
                    )
                patch_rows.append([float(v) for v in values])
                pos += 1
            images.append(np.array(patch_rows, dtype=np.float64))
        out[eid] = VisualAttribute(images)
    return out


def save_visual_features(path, mkg: MultimodalKG):
    with open(path, "w", encoding="utf-8") as fh:
        for eid in sorted(mkg.visual_attrs):
            attr = mkg.visual_attrs[eid]
            p, d = attr.images[0].shape
            fh.write(f"{mkg.entity_names[eid]} {len(attr.images)} {p} {d}\n")
            for img in attr.images:
                for row_vals in img:
                    fh.write(" ".join("%.17g" % v for v in row_vals) + "\n")


def save_triples(path, triples: list[Triple], mkg: MultimodalKG):
    with open(path, "w", encoding="utf-8") as fh:
        for tr in triples:
            fh.write(
                f"{mkg.entity_names[tr.head]}\t{mkg.relation_names[tr.relation]}\t"
                f"{mkg.entity_names[tr.tail]}\n"
            )


# ---------------------------------------------------------------------------
# vocabulary and query templates
# ---------------------------------------------------------------------------


class Vocabulary:
    """Bijective token <-> id map with disjoint id ranges.

    Layout: specials, then one token per entity (``[E:name]``), one per
    relation (``[R:name]``), then word tokens in sorted order. Entity and
    relation surface forms are wrapped so a word spelled like an entity
    name can never collide with the entity token.
    """

    def __init__(self, entity_names: list[str], relation_names: list[str],
                 words: set[str]):
        self.entity_offset = len(SPECIAL_TOKENS)
        self.relation_offset = self.entity_offset + len(entity_names)
        self.word_offset = self.relation_offset + len(relation_names)
        self.tokens: list[str] = list(SPECIAL_TOKENS)
        self.tokens += [f"[E:{n}]" for n in entity_names]
        self.tokens += [f"[R:{n}]" for n in relation_names]
        self.tokens += sorted(words)
        self.token_to_id = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise DataFormatError("vocabulary token collision")
        self.num_entities = len(entity_names)
        self.num_relations = len(relation_names)

    def __len__(self):
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        try:
            return self.token_to_id[token]
        except KeyError:
            raise LookupError_(f"token {token!r} not in vocabulary") from None

    def entity_token(self, eid: int) -> int:
        return self.entity_offset + eid

    def relation_token(self, rid: int) -> int:
        return self.relation_offset + rid

    def word_token(self, word: str) -> int:
        return self.id_of(word)

    def decode(self, token_ids) -> list[str]:
        return [self.tokens[i] for i in token_ids]

    @property
    def cls_id(self):
        return self.token_to_id[CLS]

    @property
    def sep_id(self):
        return self.token_to_id[SEP]

    @property
    def mask_id(self):
        return self.token_to_id[MASK]


def build_vocabulary(mkg: MultimodalKG) -> Vocabulary:
    """Vocabulary over all description words plus specials, entity and
    relation tokens. The pretraining template's connector words and the
    missing-description placeholder are always included so every entity
    stays renderable."""
    words: set[str] = set()
    for text in mkg.descriptions.values():
        words.update(text.split())
    words.update(PRETRAIN_CONNECTOR)
    words.add(NO_TEXT_WORD)
    return Vocabulary(mkg.entity_names, mkg.relation_names, words)


@dataclass
class TokenizedQuery:
    """A templated token sequence with its tracked positions.

    ``target`` is None for inference-time queries where the ranking
    layer fills in the candidate. ``head_entity_pos`` is None for
    pretraining templates, which carry no head entity token.
    """

    token_ids: list[int]
    mask_pos: int
    target: int | None
    head_entity_pos: int | None = None
    head_entity: int | None = None

    def __post_init__(self):
        if not 0 <= self.mask_pos < len(self.token_ids):
            raise ValueError(f"mask_pos {self.mask_pos} out of range")


def description_word_ids(eid: int, mkg: MultimodalKG, vocab: Vocabulary) -> list[int]:
    """Tokenized description, or the placeholder word when missing/empty."""
    text = mkg.descriptions.get(eid, "")
    words = text.split()
    if not words:
        words = [NO_TEXT_WORD]
    return [vocab.word_token(w) for w in words]


def build_pretrain_template(eid: int, mkg: MultimodalKG, vocab: Vocabulary) -> TokenizedQuery:
    """``[CLS] <description> is the description of [MASK] [SEP]``,
    target = the described entity."""
    desc = description_word_ids(eid, mkg, vocab)
    ids = [vocab.cls_id] + desc + [vocab.word_token(w) for w in PRETRAIN_CONNECTOR]
    mask_pos = len(ids)
    ids += [vocab.mask_id, vocab.sep_id]
    return TokenizedQuery(token_ids=ids, mask_pos=mask_pos, target=eid,
                          head_entity_pos=None, head_entity=eid)


def build_reason_template(head: int, relation: int, tail: int | None,
                          mkg: MultimodalKG, vocab: Vocabulary) -> TokenizedQuery:
    """``[CLS] <head> <description> [SEP] <relation> [SEP] [MASK] [SEP]``.

    ``tail=None`` builds an inference query with the target unset.
    """
    desc = description_word_ids(head, mkg, vocab)
    ids = [vocab.cls_id, vocab.entity_token(head)] + desc + [vocab.sep_id,
           vocab.relation_token(relation), vocab.sep_id]
    mask_pos = len(ids)
    ids += [vocab.mask_id, vocab.sep_id]
    return TokenizedQuery(token_ids=ids, mask_pos=mask_pos, target=tail,
                          head_entity_pos=1, head_entity=head)


def check_query_positions(query: TokenizedQuery, vocab: Vocabulary):
    """Invariant check: tracked positions index the claimed tokens."""
    if query.token_ids[query.mask_pos] != vocab.mask_id:
        raise ValueError("mask_pos does not point at [MASK]")
    if query.head_entity_pos is not None:
        expected = vocab.entity_token(query.head_entity)
        if query.token_ids[query.head_entity_pos] != expected:
            raise ValueError("head_entity_pos does not point at the head entity token")
