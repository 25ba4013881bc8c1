"""Data model, ingestion, vocabulary and template construction."""

import numpy as np
import pytest

from mmkgr.data import (CLS, MASK, NO_TEXT_WORD, PRETRAIN_CONNECTOR, SEP,
                        DataFormatError, IdMap, LookupError_, MultimodalKG,
                        Triple, VisualAttribute, build_pretrain_template,
                        build_reason_template, build_vocabulary,
                        check_query_positions, load_descriptions, load_triples,
                        load_visual_features, save_descriptions, save_triples,
                        save_visual_features)
from mmkgr.synth import SynthConfig, SynthConfigError, generate_synthetic_mkg


def small_mkg(descriptions=None):
    return MultimodalKG(
        num_entities=2, num_relations=1,
        train=[Triple(0, 0, 1)], dev=[], test=[],
        entity_names=["a-ent", "b-ent"], relation_names=["rel0"],
        descriptions=descriptions if descriptions is not None else {0: "a b", 1: "b c"},
    )


class TestLoadTriples:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "t.tsv"
        path.write_text("")
        triples, entities, relations = load_triples(path)
        assert triples == [] and len(entities) == 0 and len(relations) == 0

    def test_hand_counted_fixture(self, tmp_path):
        # 3 lines, 4 distinct entities, 2 distinct relations
        path = tmp_path / "t.tsv"
        path.write_text("pa\tlikes\tqa\nqa\tlikes\tra\npa\tknows\tsa\n")
        triples, entities, relations = load_triples(path)
        assert len(triples) == 3
        assert len(entities) == 4
        assert len(relations) == 2
        # ids assigned in first-appearance order
        assert triples[0] == Triple(0, 0, 1)
        assert triples[1] == Triple(1, 0, 2)
        assert triples[2] == Triple(0, 1, 3)

    def test_duplicate_lines_kept(self, tmp_path):
        path = tmp_path / "t.tsv"
        path.write_text("x\tr\ty\nx\tr\ty\n")
        triples, _, _ = load_triples(path)
        assert len(triples) == 2 and triples[0] == triples[1]

    def test_malformed_line_reports_lineno(self, tmp_path):
        path = tmp_path / "t.tsv"
        path.write_text("x\tr\ty\nbroken line\n")
        with pytest.raises(DataFormatError) as err:
            load_triples(path)
        assert ":2:" in str(err.value)

    def test_frozen_map_rejects_unknown_names(self, tmp_path):
        train = tmp_path / "train.tsv"
        train.write_text("x\tr\ty\n")
        _, entities, relations = load_triples(train)
        test = tmp_path / "test.tsv"
        test.write_text("x\tr\tunseen\n")
        with pytest.raises(LookupError_):
            load_triples(test, entities, relations, frozen=True)


class TestVocabulary:
    def test_enumerated_fixture(self):
        # 3 specials + 2 entities + 1 relation + 3 description words,
        # plus the always-present template connector words and the
        # missing-description placeholder
        vocab = build_vocabulary(small_mkg())
        expected = 3 + 2 + 1 + len({"a", "b", "c"} | set(PRETRAIN_CONNECTOR) | {NO_TEXT_WORD})
        assert len(vocab) == expected
        assert len(vocab) == 14

    def test_no_text_attributes(self):
        vocab = build_vocabulary(small_mkg(descriptions={}))
        assert len(vocab) == 3 + 2 + 1 + len(PRETRAIN_CONNECTOR) + 1

    def test_shared_word_single_token(self):
        vocab = build_vocabulary(small_mkg())  # "b" appears in both descriptions
        assert sum(1 for t in vocab.tokens if t == "b") == 1

    def test_id_ranges_disjoint_and_roundtrip(self):
        vocab = build_vocabulary(small_mkg())
        ids = [vocab.id_of(t) for t in vocab.tokens]
        assert ids == list(range(len(vocab)))
        assert vocab.decode(ids) == vocab.tokens
        assert vocab.entity_offset == 3
        assert vocab.relation_offset == 5
        assert vocab.word_offset == 6

    def test_entity_word_collision_safe(self):
        # an entity named like a description word must stay a distinct token
        mkg = small_mkg(descriptions={0: "a-ent b", 1: "c"})
        vocab = build_vocabulary(mkg)
        assert vocab.entity_token(0) != vocab.word_token("a-ent")

    def test_unknown_token_lookup_fails(self):
        vocab = build_vocabulary(small_mkg())
        with pytest.raises(LookupError_):
            vocab.id_of("zzz")


class TestTemplates:
    def test_pretrain_template_shape(self):
        mkg = small_mkg(descriptions={0: "red city", 1: "b"})
        vocab = build_vocabulary(mkg)
        q = build_pretrain_template(0, mkg, vocab)
        decoded = vocab.decode(q.token_ids)
        assert decoded == [CLS, "red", "city", "is", "the", "description", "of", MASK, SEP]
        assert q.target == 0
        assert q.head_entity_pos is None
        assert q.token_ids[q.mask_pos] == vocab.mask_id
        check_query_positions(q, vocab)

    def test_pretrain_missing_description_uses_placeholder(self):
        mkg = small_mkg(descriptions={0: "red city"})
        vocab = build_vocabulary(mkg)
        q = build_pretrain_template(1, mkg, vocab)
        assert vocab.decode(q.token_ids)[1] == NO_TEXT_WORD
        check_query_positions(q, vocab)

    def test_same_description_different_targets(self):
        mkg = small_mkg(descriptions={0: "same words", 1: "same words"})
        vocab = build_vocabulary(mkg)
        q0 = build_pretrain_template(0, mkg, vocab)
        q1 = build_pretrain_template(1, mkg, vocab)
        assert q0.token_ids == q1.token_ids
        assert (q0.target, q1.target) == (0, 1)

    def test_reason_template_positions(self):
        # [CLS] e_h w1 w2 [SEP] r [SEP] [MASK] [SEP]: 9 tokens,
        # head token at 1, mask at 7 (both counted off the rendered form)
        mkg = small_mkg(descriptions={0: "w1 w2", 1: "x"})
        vocab = build_vocabulary(mkg)
        q = build_reason_template(0, 0, 1, mkg, vocab)
        assert len(q.token_ids) == 9
        assert q.head_entity_pos == 1
        assert q.mask_pos == 7
        assert q.target == 1
        decoded = vocab.decode(q.token_ids)
        assert decoded == [CLS, "[E:a-ent]", "w1", "w2", SEP, "[R:rel0]", SEP, MASK, SEP]
        check_query_positions(q, vocab)

    def test_self_loop_triple_legal(self):
        mkg = small_mkg()
        vocab = build_vocabulary(mkg)
        q = build_reason_template(0, 0, 0, mkg, vocab)
        assert q.target == 0
        assert q.token_ids[q.head_entity_pos] == vocab.entity_token(0)

    def test_inference_query_has_no_target(self):
        mkg = small_mkg()
        vocab = build_vocabulary(mkg)
        q = build_reason_template(0, 0, None, mkg, vocab)
        assert q.target is None
        check_query_positions(q, vocab)


class TestVisualAttribute:
    def test_requires_one_image(self):
        with pytest.raises(DataFormatError):
            VisualAttribute(images=[])

    def test_rejects_mixed_shapes(self):
        with pytest.raises(DataFormatError):
            VisualAttribute(images=[np.zeros((2, 3)), np.zeros((3, 3))])


class TestFileRoundTrips:
    def test_dataset_files_roundtrip(self, tmp_path):
        cfg = SynthConfig(num_entities=8, num_relations=2, num_triples=12,
                          structure_signal=0.8, num_patches=3, patch_dim=4,
                          images_per_entity=2)
        mkg = generate_synthetic_mkg(cfg, seed=5)
        save_triples(tmp_path / "train.tsv", mkg.train, mkg)
        save_descriptions(tmp_path / "d.tsv", mkg)
        save_visual_features(tmp_path / "v.txt", mkg)

        triples, entities, relations = load_triples(tmp_path / "train.tsv")
        loaded_names = [(entities.names[t.head], relations.names[t.relation],
                         entities.names[t.tail]) for t in triples]
        orig_names = [(mkg.entity_names[t.head], mkg.relation_names[t.relation],
                       mkg.entity_names[t.tail]) for t in mkg.train]
        assert loaded_names == orig_names
        id_map = IdMap()
        for name in mkg.entity_names:
            id_map.intern(name)
        descs = load_descriptions(tmp_path / "d.tsv", id_map)
        assert descs == mkg.descriptions
        visuals = load_visual_features(tmp_path / "v.txt", id_map)
        assert set(visuals) == set(mkg.visual_attrs)
        for eid, attr in mkg.visual_attrs.items():
            for got, want in zip(visuals[eid].images, attr.images):
                assert np.array_equal(got, want)  # '%.17g' text is lossless

    def test_visual_file_truncation_detected(self, tmp_path):
        path = tmp_path / "v.txt"
        path.write_text("e0 1 2 3\n0.0 0.0 0.0\n")  # header promises 2 patches
        id_map = IdMap()
        id_map.intern("e0")
        with pytest.raises(DataFormatError):
            load_visual_features(path, id_map)


class TestSyntheticGenerator:
    def test_same_seed_identical_datasets(self):
        cfg = SynthConfig(num_entities=15, num_relations=2, num_triples=24)
        a = generate_synthetic_mkg(cfg, seed=3)
        b = generate_synthetic_mkg(cfg, seed=3)
        assert a.train == b.train and a.dev == b.dev and a.test == b.test
        assert a.descriptions == b.descriptions
        for eid in a.visual_attrs:
            for x, y in zip(a.visual_attrs[eid].images, b.visual_attrs[eid].images):
                assert x.tobytes() == y.tobytes()

    def test_different_seed_differs(self):
        cfg = SynthConfig(num_entities=15, num_relations=2, num_triples=24)
        a = generate_synthetic_mkg(cfg, seed=3)
        b = generate_synthetic_mkg(cfg, seed=4)
        assert a.train != b.train or a.descriptions != b.descriptions

    def test_fully_deterministic_rule_when_signal_one(self):
        from mmkgr.synth import relation_rules

        cfg = SynthConfig(num_entities=20, num_relations=3, num_triples=40,
                          structure_signal=1.0)
        mkg = generate_synthetic_mkg(cfg, seed=1)
        rng = np.random.default_rng(np.random.PCG64(1))
        rules = relation_rules(cfg, rng)
        for tr in mkg.all_triples():
            assert rules[tr.relation, tr.head] == tr.tail

    def test_no_signal_tails_near_uniform(self):
        # Monte-Carlo estimate: with structure_signal=0 the best
        # head/relation-conditional tail predictor is ~uniform
        cfg = SynthConfig(num_entities=10, num_relations=2, num_triples=190,
                          structure_signal=0.0)
        mkg = generate_synthetic_mkg(cfg, seed=2)
        tail_counts = np.zeros(10)
        for tr in mkg.all_triples():
            tail_counts[tr.tail] += 1
        freqs = tail_counts / tail_counts.sum()
        assert freqs.max() < 3.0 / 10  # no tail dominates

    def test_splits_disjoint_and_sized(self):
        cfg = SynthConfig(num_entities=30, num_relations=3, num_triples=60,
                          structure_signal=0.5, train_fraction=0.7, dev_fraction=0.15)
        mkg = generate_synthetic_mkg(cfg, seed=9)
        assert len(mkg.train) + len(mkg.dev) + len(mkg.test) == 60
        assert len(mkg.train) == 42 and len(mkg.dev) == 9
        seen = set()
        for tr in mkg.all_triples():
            key = (tr.head, tr.relation, tr.tail)
            assert key not in seen
            seen.add(key)

    def test_infeasible_config_rejected(self):
        with pytest.raises(SynthConfigError):
            SynthConfig(num_entities=3, num_relations=1, num_triples=10).validate()
        cfg = SynthConfig(num_entities=20, num_relations=1, num_triples=30,
                          structure_signal=1.0)
        with pytest.raises(SynthConfigError):
            generate_synthetic_mkg(cfg, seed=0)  # rule caps distinct triples below 30

    def test_attribute_coverage(self):
        cfg = SynthConfig(num_entities=12, num_relations=2, num_triples=18)
        mkg = generate_synthetic_mkg(cfg, seed=0)
        assert set(mkg.descriptions) == set(range(12))
        assert set(mkg.visual_attrs) == set(range(12))

    def test_text_noise_withholds_identity(self):
        cfg = SynthConfig(num_entities=40, num_relations=2, num_triples=60,
                          structure_signal=0.5, text_noise=1.0)
        mkg = generate_synthetic_mkg(cfg, seed=0)
        assert not any(f"id{e}" in mkg.descriptions[e].split()
                       for e in range(40))
        cfg2 = SynthConfig(num_entities=40, num_relations=2, num_triples=60,
                           structure_signal=0.5, text_noise=0.0)
        mkg2 = generate_synthetic_mkg(cfg2, seed=0)
        assert all(f"id{e}" in mkg2.descriptions[e].split() for e in range(40))
