from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import assignment_from_sids, random_model
from sidforge.datamodel import EmbeddingSet
from sidforge.diagnostics import (
    DiagnosticsError,
    active_codes_per_level,
    build_report,
    codebook_utilization,
    collision_rate,
    prefix_entropy,
    prefix_entropy_profile,
    reconstruction_curve,
    render_table,
    report_to_dict,
    semantic_probe,
    unique_ratio,
)
from sidforge.rq import Codebook, LevelFitStats, RqConfig, RqModel, assign_all


def one_level_model(centroids):
    cents = np.ascontiguousarray(np.asarray(centroids, dtype=np.float32))
    cents.setflags(write=False)
    k, dim = cents.shape
    return RqModel(
        config=RqConfig(levels=1, codebook_sizes=(k,)),
        codebooks=(Codebook(level=1, centroids=cents),),
        dim=dim,
        fit_stats=(
            LevelFitStats(level=1, configured_size=k, effective_size=k, mse_trace=(0.0,)),
        ),
    )


def two_level_model(coarse, fine):
    mats = []
    for mat in (coarse, fine):
        mat = np.ascontiguousarray(np.asarray(mat, dtype=np.float32))
        mat.setflags(write=False)
        mats.append(mat)
    sizes = (mats[0].shape[0], mats[1].shape[0])
    return RqModel(
        config=RqConfig(levels=2, codebook_sizes=sizes),
        codebooks=tuple(Codebook(level=i + 1, centroids=m) for i, m in enumerate(mats)),
        dim=mats[0].shape[1],
        fit_stats=tuple(
            LevelFitStats(level=i + 1, configured_size=k, effective_size=k, mse_trace=(0.0,))
            for i, k in enumerate(sizes)
        ),
    )


class TestCollision:
    def test_all_distinct(self):
        assign = assignment_from_sids({"a": (0,), "b": (1,), "c": (2,)})
        assert collision_rate(assign) == 0.0
        assert unique_ratio(assign) == 1.0

    def test_all_identical(self):
        assign = assignment_from_sids({"a": (7,), "b": (7,), "c": (7,)})
        assert collision_rate(assign) == 1.0
        assert unique_ratio(assign) == 0.0

    def test_hand_case(self):
        # two of four items share a SID -> half the items collide
        assign = assignment_from_sids({"a": (0, 1), "b": (0, 1), "c": (2, 0), "d": (3, 3)})
        assert collision_rate(assign) == 0.5
        assert unique_ratio(assign) == 0.5

    def test_sum_is_exactly_one(self, rng):
        for _ in range(30):
            n = int(rng.integers(1, 40))
            sids = {f"i{k}": (int(rng.integers(0, 6)),) for k in range(n)}
            assign = assignment_from_sids(sids)
            assert collision_rate(assign) + unique_ratio(assign) == 1.0

    def test_empty_rejected(self):
        with pytest.raises(DiagnosticsError):
            collision_rate(assignment_from_sids({}))


class TestUtilization:
    def test_counts_against_configured_sizes(self, rng):
        model = random_model(rng, 2, [4, 8], 3)
        assign = assignment_from_sids(
            {"a": (0, 0), "b": (1, 0), "c": (1, 1)}, model_hash=model.model_hash()
        )
        assert active_codes_per_level(assign, model) == (2, 2)
        assert codebook_utilization(assign, model) == (2 / 4 + 2 / 8) / 2

    def test_full_utilization(self, rng):
        model = random_model(rng, 1, [2], 3)
        assign = assignment_from_sids({"a": (0,), "b": (1,)}, model_hash=model.model_hash())
        assert codebook_utilization(assign, model) == 1.0

    def test_shrunk_capacity_reads_as_unused(self, rng):
        # the model kept 2 of 4 configured codes; utilization is over 4
        model = random_model(rng, 1, [2], 3)
        object.__setattr__(model.config, "codebook_sizes", (4,))
        assign = assignment_from_sids({"a": (0,), "b": (1,)}, model_hash=model.model_hash())
        assert codebook_utilization(assign, model) == 0.5

    def test_out_of_range_token_rejected(self, rng):
        model = random_model(rng, 1, [2], 3)
        assign = assignment_from_sids({"a": (5,)})
        with pytest.raises(DiagnosticsError):
            active_codes_per_level(assign, model)


class TestPrefixEntropy:
    def test_uniform_grid(self):
        assign = assignment_from_sids(
            {"a": (0, 0), "b": (0, 1), "c": (1, 0), "d": (1, 1)}
        )
        profile = prefix_entropy_profile(assign)
        assert profile == pytest.approx((1.0, 2.0))
        assert prefix_entropy(assign) == pytest.approx(1.5)

    def test_degenerate_assignment(self):
        assign = assignment_from_sids({"a": (0, 0), "b": (0, 0)})
        assert prefix_entropy(assign) == 0.0

    def test_skewed_distribution(self):
        # 3 items at prefix (0,), 1 at (1,): H = -(0.75 log 0.75 + 0.25 log 0.25)
        assign = assignment_from_sids({"a": (0,), "b": (0,), "c": (0,), "d": (1,)})
        want = -(0.75 * math.log2(0.75) + 0.25 * math.log2(0.25))
        assert prefix_entropy(assign) == pytest.approx(want)


class TestReconstructionCurve:
    def test_perfect_codes_give_unit_similarity(self, rng):
        # Coarse level at scale 100, fine level at scale 0.1, so the greedy
        # encoder provably recovers the generating tokens.
        coarse = np.asarray(rng.normal(size=(4, 5)) * 100.0, dtype=np.float32)
        fine = np.asarray(rng.normal(size=(3, 5)) * 0.1, dtype=np.float32)
        model = two_level_model(coarse, fine)
        tokens = np.array([[i % 4, (i * 2) % 3] for i in range(12)])
        rows = np.stack(
            [
                coarse[a].astype(np.float64) + fine[b].astype(np.float64)
                for a, b in tokens
            ]
        )
        emb = EmbeddingSet([f"i{k}" for k in range(12)], rows.astype(np.float32))
        curve = reconstruction_curve(model, emb)
        assert curve.sims[2] == pytest.approx(1.0, abs=1e-6)
        assert curve.sims[1] <= curve.sims[2]
        assert curve.n_items == 12

    def test_zero_norm_originals_excluded(self, rng):
        model = random_model(rng, 1, [4], 3)
        rows = np.vstack([np.zeros(3), rng.normal(size=(4, 3))]).astype(np.float32)
        emb = EmbeddingSet([f"i{k}" for k in range(5)], rows)
        curve = reconstruction_curve(model, emb)
        assert curve.n_zero_norm_originals == 1
        assert curve.n_items == 5

    def test_h_max_validated(self, rng):
        model = random_model(rng, 2, [4, 4], 3)
        emb = EmbeddingSet(["a"], np.ones((1, 3), dtype=np.float32))
        with pytest.raises(DiagnosticsError):
            reconstruction_curve(model, emb, h_max=3)

    def test_monotone_on_fitted_like_data(self, rng):
        model = random_model(rng, 3, [8, 8, 8], 6)
        rows = np.asarray(rng.normal(size=(300, 6)), dtype=np.float32)
        emb = EmbeddingSet([f"i{k}" for k in range(300)], rows)
        curve = reconstruction_curve(model, emb)
        assert len(curve.sims) == 3


class TestSemanticProbe:
    def test_separable_categories_score_high(self):
        model = one_level_model([[10.0, 0.0], [-10.0, 0.0]])
        sids = {}
        labels = {}
        for i in range(24):
            item = f"i{i:02d}"
            sids[item] = (i % 2,)
            labels[item] = "left" if i % 2 else "right"
        assign = assignment_from_sids(sids, model_hash=model.model_hash())
        acc = semantic_probe(assign, model, labels, split_seed=0)
        assert acc == 1.0

    def test_shuffled_labels_score_low(self):
        model = one_level_model([[10.0, 0.0], [-10.0, 0.0]])
        gen = np.random.default_rng(9)
        sids = {f"i{i:02d}": (int(gen.integers(2)),) for i in range(40)}
        labels = {item: ("A" if gen.random() < 0.5 else "B") for item in sids}
        counts = {"A": sum(v == "A" for v in labels.values())}
        assert 10 <= counts["A"] <= 30
        assign = assignment_from_sids(sids, model_hash=model.model_hash())
        acc = semantic_probe(assign, model, labels, split_seed=1)
        assert acc <= 0.85

    def test_needs_two_categories(self):
        model = one_level_model([[1.0, 0.0]])
        sids = {f"i{i}": (0,) for i in range(20)}
        labels = {item: "only" for item in sids}
        with pytest.raises(DiagnosticsError):
            semantic_probe(assignment_from_sids(sids), model, labels, split_seed=0)

    def test_needs_ten_per_category(self):
        model = one_level_model([[1.0, 0.0], [-1.0, 0.0]])
        sids = {f"i{i}": (i % 2,) for i in range(12)}
        labels = {item: ("A" if s == (0,) else "B") for item, s in sids.items()}
        with pytest.raises(DiagnosticsError):
            semantic_probe(assignment_from_sids(sids), model, labels, split_seed=0)

    def test_split_seed_changes_split_not_contract(self):
        model = one_level_model([[10.0, 0.0], [-10.0, 0.0]])
        sids = {f"i{i:02d}": (i % 2,) for i in range(30)}
        labels = {item: ("A" if s == (0,) else "B") for item, s in sids.items()}
        assign = assignment_from_sids(sids, model_hash=model.model_hash())
        for seed in (0, 1, 2):
            assert semantic_probe(assign, model, labels, split_seed=seed) == 1.0


class TestReport:
    def test_build_and_render(self, rng):
        model = random_model(rng, 2, [8, 8], 4)
        rows = np.asarray(rng.normal(size=(40, 4)), dtype=np.float32)
        emb = EmbeddingSet([f"i{k}" for k in range(40)], rows)
        assign = assign_all(model, emb)
        labels = {item: ("A" if k < 20 else "B") for k, item in enumerate(emb.item_ids)}
        report = build_report(assign, model, emb=emb, labels=labels, probe_seed=0)
        payload = report_to_dict(report)
        assert payload["n_items"] == 40
        assert payload["collision_rate"] + payload["unique_ratio"] == 1.0
        assert "sim_curve" in payload
        assert "probe_accuracy" in payload
        table = render_table(report)
        assert "Collision" in table and "Entropy" in table
        assert len(table.splitlines()) == 2

    def test_probe_requires_seed(self, rng):
        model = random_model(rng, 1, [4], 3)
        assign = assignment_from_sids({"a": (0,)}, model_hash=model.model_hash())
        with pytest.raises(DiagnosticsError):
            build_report(assign, model, labels={"a": "x"}, probe_seed=None)
