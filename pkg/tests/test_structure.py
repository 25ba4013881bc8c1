"""Structure encoder: scoring semantics, training behavior, projection
and table persistence."""

import numpy as np
import pytest

from mmkgr import autodiff as ad
from mmkgr.autodiff import Parameter
from mmkgr.data import Triple
from mmkgr.gradcheck import finite_diff_check
from mmkgr.structure import (StructureConfigError, StructureEncoderConfig,
                             build_model, evaluate_structure_model, export_table,
                             gram_deviation, import_table, project_to_dim,
                             score_triple, train_structure_encoder)
from mmkgr.synth import SynthConfig, generate_synthetic_mkg


def toy_graph(seed=0, n=50, r=4, triples=170):
    cfg = SynthConfig(num_entities=n, num_relations=r, num_triples=triples,
                      structure_signal=1.0, rule="chain")
    return generate_synthetic_mkg(cfg, seed=seed)


class TestScoring:
    def test_transe_exact_translation_scores_zero(self):
        cfg = StructureEncoderConfig(model="transe", dim=4, seed=0)
        model = build_model(3, 1, cfg)
        model.ent.data[1] = model.ent.data[0] + model.rel.data[0]
        score = score_triple(model, 0, 0, 1)
        assert score == pytest.approx(0.0, abs=1e-5)  # sqrt smoothing leaves ~1e-6
        # and zero is the maximum: every other tail scores lower
        assert score >= score_triple(model, 0, 0, 2)

    def test_distmult_symmetric_in_head_tail(self):
        cfg = StructureEncoderConfig(model="distmult", dim=8, seed=1)
        model = build_model(6, 2, cfg)
        rng = np.random.default_rng(0)
        for _ in range(20):
            h, r, t = rng.integers(6), rng.integers(2), rng.integers(6)
            assert score_triple(model, h, r, t) == pytest.approx(
                score_triple(model, t, r, h), rel=1e-12
            )

    def test_hake_phase_periodicity(self):
        # equal moduli, phases differing by a full turn: same score as
        # zero phase difference (evaluated directly at both points)
        cfg = StructureEncoderConfig(model="hake", dim=4, seed=2)
        model = build_model(3, 1, cfg)
        model.ent_mod.data[1] = model.ent_mod.data[0] * model.rel_mod.data[0]
        model.ent_mod.data[2] = model.ent_mod.data[1]
        model.ent_phase.data[1] = model.ent_phase.data[0] + model.rel_phase.data[0]
        model.ent_phase.data[2] = model.ent_phase.data[1] + 2.0 * np.pi
        s_zero = score_triple(model, 0, 0, 1)
        s_turn = score_triple(model, 0, 0, 2)
        assert s_turn == pytest.approx(s_zero, abs=1e-9)

    def test_fast_tail_scorer_matches_score_triple(self):
        for kind in ("transe", "distmult", "hake"):
            cfg = StructureEncoderConfig(model=kind, dim=6, seed=3)
            model = build_model(7, 2, cfg)
            scores = model.score_all_tails(2, 1)
            for t in range(7):
                assert scores[t] == pytest.approx(score_triple(model, 2, 1, t), rel=1e-12)

    @pytest.mark.parametrize("kind", ["transe", "distmult", "hake"])
    def test_score_gradients(self, kind):
        cfg = StructureEncoderConfig(model=kind, dim=5, seed=4)
        model = build_model(4, 2, cfg)
        h = np.array([0, 1, 2])
        r = np.array([0, 1, 0])
        t = np.array([1, 2, 3])
        loss_fn = lambda: ad.tsum(model.score_batch(h, r, t))
        report = finite_diff_check(loss_fn, list(model.named_parameters().items()))
        assert report.passed, str(report)


class TestTraining:
    def test_lr_zero_keeps_initialization(self):
        mkg = toy_graph()
        cfg = StructureEncoderConfig(model="transe", dim=8, epochs=1, lr=0.0, seed=5)
        init = build_model(mkg.num_entities, mkg.num_relations, cfg)
        table, _, _ = train_structure_encoder(mkg.train, mkg.num_entities,
                                              mkg.num_relations, cfg)
        assert np.array_equal(table.matrix, init.ent.data)

    def test_same_seed_identical_tables(self):
        mkg = toy_graph()
        cfg = StructureEncoderConfig(model="transe", dim=8, epochs=20, seed=6)
        t1, _, _ = train_structure_encoder(mkg.train, mkg.num_entities,
                                           mkg.num_relations, cfg)
        t2, _, _ = train_structure_encoder(mkg.train, mkg.num_entities,
                                           mkg.num_relations, cfg)
        assert t1.matrix.tobytes() == t2.matrix.tobytes()

    def test_empty_train_split_rejected(self):
        with pytest.raises(StructureConfigError):
            train_structure_encoder([], 3, 1, StructureEncoderConfig())

    @pytest.mark.parametrize("kind", ["transe", "distmult", "hake"])
    def test_loss_nonincreasing_moving_average(self, kind):
        mkg = toy_graph(seed=1)
        cfg = StructureEncoderConfig(model=kind, dim=16, epochs=120, seed=7)
        _, history, _ = train_structure_encoder(mkg.train, mkg.num_entities,
                                                mkg.num_relations, cfg)
        ma = np.convolve(history, np.ones(5) / 5, mode="valid")
        assert np.all(np.diff(ma) <= 1e-6), f"{kind}: moving average increased"

    def test_single_triple_single_epoch_runs(self):
        cfg = StructureEncoderConfig(model="transe", dim=4, epochs=1, seed=8)
        table, history, _ = train_structure_encoder([Triple(0, 0, 1)], 3, 1, cfg)
        assert table.matrix.shape == (3, 4)
        assert len(history) == 1

    def test_compositional_graph_generalization(self):
        # the structural half of the pipeline in one go: train split only,
        # Hits@10 checked on held-out triples
        mkg = toy_graph(seed=2)
        cfg = StructureEncoderConfig(model="transe", dim=32, epochs=300, seed=9)
        _, _, model = train_structure_encoder(mkg.train, mkg.num_entities,
                                              mkg.num_relations, cfg)
        report = evaluate_structure_model(model, mkg.test, mkg.all_triples())
        assert report.hits_filtered[10] >= 0.9

    def test_distmult_rank_symmetry_with_shared_embedding(self):
        # head and tail sharing a representation: both directions of the
        # trilinear score produce the same candidate ranking
        from mmkgr.evaluate import rank_entities

        cfg = StructureEncoderConfig(model="distmult", dim=8, seed=10)
        model = build_model(6, 1, cfg)
        model.ent.data[4] = model.ent.data[1]
        tails = model.score_all_tails(1, 0)
        heads = model.score_all_tails(4, 0)  # symmetric scorer reused
        assert np.allclose(tails, heads, atol=1e-14)
        assert rank_entities(tails, 4) == rank_entities(heads, 1)


class TestProjection:
    def test_identity_when_width_matches(self):
        mkg = toy_graph()
        cfg = StructureEncoderConfig(model="transe", dim=8, epochs=2, seed=11)
        table, _, _ = train_structure_encoder(mkg.train, mkg.num_entities,
                                              mkg.num_relations, cfg)
        same = project_to_dim(table, 8)
        assert same.matrix.tobytes() == table.matrix.tobytes()
        assert not same.projected

    def test_up_projection_preserves_gram(self):
        rng = np.random.default_rng(0)
        from mmkgr.structure import StructuralEmbeddingTable

        table = StructuralEmbeddingTable(
            matrix=rng.normal(size=(10, 8)), model_kind="transe",
            num_entities=10, seed=0, cfg_hash="x",
        )
        wide = project_to_dim(table, 32)
        assert wide.matrix.shape == (10, 32)
        assert wide.gram_error < 1e-10  # rigid embedding into more dims

    def test_down_projection_reports_gram_error(self):
        rng = np.random.default_rng(1)
        from mmkgr.structure import StructuralEmbeddingTable

        table = StructuralEmbeddingTable(
            matrix=rng.normal(size=(10, 32)), model_kind="transe",
            num_entities=10, seed=0, cfg_hash="x",
        )
        narrow = project_to_dim(table, 8)
        assert narrow.matrix.shape == (10, 8)
        manual = gram_deviation(table.matrix, narrow.matrix)
        assert narrow.gram_error == pytest.approx(manual)
        assert narrow.gram_error > 0

    def test_hake_table_width_is_twice_dim(self):
        mkg = toy_graph()
        cfg = StructureEncoderConfig(model="hake", dim=8, epochs=2, seed=12)
        table, _, _ = train_structure_encoder(mkg.train, mkg.num_entities,
                                              mkg.num_relations, cfg)
        assert table.matrix.shape == (mkg.num_entities, 16)
        projected = project_to_dim(table, 32)
        assert projected.matrix.shape == (mkg.num_entities, 32)

    def test_bad_target_dim(self):
        mkg = toy_graph()
        cfg = StructureEncoderConfig(model="transe", dim=8, epochs=1, seed=13)
        table, _, _ = train_structure_encoder(mkg.train, mkg.num_entities,
                                              mkg.num_relations, cfg)
        with pytest.raises(StructureConfigError):
            project_to_dim(table, 0)


class TestPersistence:
    def make_table(self):
        mkg = toy_graph()
        cfg = StructureEncoderConfig(model="hake", dim=8, epochs=3, seed=14)
        table, _, _ = train_structure_encoder(mkg.train, mkg.num_entities,
                                              mkg.num_relations, cfg)
        return table

    def test_export_import_bitwise(self, tmp_path):
        table = self.make_table()
        path = tmp_path / "table.tns"
        export_table(table, path)
        loaded = import_table(path)
        assert loaded.matrix.tobytes() == table.matrix.tobytes()
        assert loaded.model_kind == table.model_kind
        assert loaded.cfg_hash == table.cfg_hash
        assert set(loaded.raw_blocks) == set(table.raw_blocks)
        for name in table.raw_blocks:
            assert loaded.raw_blocks[name].tobytes() == table.raw_blocks[name].tobytes()

    def test_export_twice_identical_files(self, tmp_path):
        table = self.make_table()
        export_table(table, tmp_path / "a.tns")
        export_table(table, tmp_path / "b.tns")
        assert (tmp_path / "a.tns").read_bytes() == (tmp_path / "b.tns").read_bytes()

    def test_wrong_entity_count_rejected(self, tmp_path):
        table = self.make_table()
        path = tmp_path / "table.tns"
        export_table(table, path)
        with pytest.raises(StructureConfigError):
            import_table(path, expected_num_entities=table.num_entities + 1)

    def test_cfg_hash_mismatch_warns(self, tmp_path):
        table = self.make_table()
        path = tmp_path / "table.tns"
        export_table(table, path)
        with pytest.warns(UserWarning, match="config"):
            import_table(path, expected_cfg_hash="different-hash")
