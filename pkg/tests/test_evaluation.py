import math

import numpy as np
import pytest
import torch

from recdiff.data import compute_strata
from recdiff.embeddings import pseudo_semantic_matrix
from recdiff.evaluation import (EvalReport, compute_rank, evaluate, export_projection,
                                hr_at_k, ndcg_at_k, ranks_from_scores,
                                write_projection_csv)
from recdiff.intent import kmeans_fit
from recdiff.model import RecDiffModel, pad_batch

from conftest import random_dataset, tiny_config


# ---------------------------------------------------------------- metrics

def test_hr_all_inside():
    assert hr_at_k([1, 2, 3], 10) == 1.0


def test_hr_all_outside():
    assert hr_at_k([11, 12], 10) == 0.0


def test_hr_counting():
    assert hr_at_k([1, 5, 10, 11, 20], 10) == pytest.approx(0.6)


def test_ndcg_rank_one():
    assert ndcg_at_k([1], 10) == pytest.approx(1.0, abs=1e-12)


def test_ndcg_rank_three():
    assert ndcg_at_k([3], 10) == pytest.approx(0.5, abs=1e-12)


def test_ndcg_mixed():
    assert ndcg_at_k([1, 3, 100], 10) == pytest.approx(0.5, abs=1e-12)


def test_metrics_reject_empty():
    with pytest.raises(ValueError):
        hr_at_k([], 5)
    with pytest.raises(ValueError):
        ndcg_at_k([], 5)


def test_metrics_monotone_in_k_and_ndcg_below_hr():
    rng = np.random.default_rng(0)
    for _ in range(50):
        ranks = rng.integers(1, 30, size=12).tolist()
        prev_hr, prev_ndcg = 0.0, 0.0
        for k in range(1, 31):
            hr = hr_at_k(ranks, k)
            ndcg = ndcg_at_k(ranks, k)
            assert hr >= prev_hr - 1e-12
            assert ndcg >= prev_ndcg - 1e-12
            assert ndcg <= hr + 1e-12
            prev_hr, prev_ndcg = hr, ndcg


def _brute_force_metrics(score_rows, targets, k):
    """Full sort oracle: rank = position in the (-score, index) ordering."""
    hits, gains = [], []
    for scores, target in zip(score_rows, targets):
        order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
        rank = order.index(target) + 1
        hits.append(1.0 if rank <= k else 0.0)
        gains.append(1.0 / math.log2(rank + 1) if rank <= k else 0.0)
    return float(np.mean(hits)), float(np.mean(gains))


def test_rank_and_metrics_match_bruteforce_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(2, 21))
        rows = rng.standard_normal((4, n))
        if rng.random() < 0.3:
            rows = np.round(rows)          # force score ties
        targets = rng.integers(0, n, size=4).tolist()
        k = int(rng.integers(1, n + 1))
        ranks = ranks_from_scores(rows, targets)
        hr_oracle, ndcg_oracle = _brute_force_metrics(rows, targets, k)
        assert hr_at_k(ranks, k) == pytest.approx(hr_oracle, abs=1e-12)
        assert ndcg_at_k(ranks, k) == pytest.approx(ndcg_oracle, abs=1e-12)


def test_zero_scores_tie_break_lower_index_first():
    scores = np.zeros(6)
    assert [compute_rank(scores, t) for t in range(6)] == [1, 2, 3, 4, 5, 6]


# ---------------------------------------------------------------- evaluate

def _trained_toyish_model(ds, cfg):
    semantic = pseudo_semantic_matrix(list(ds.item_vocab), cfg.semantic.d_prime, 0)
    model = RecDiffModel(ds.num_items, cfg, semantic, max_len=ds.max_len + 1)
    model.reset_parameters(3)
    model.eval()
    return model


def test_evaluate_matches_bruteforce_report():
    ds = random_dataset(seed=12)
    cfg = tiny_config(model={"dropout": 0.0})
    model = _trained_toyish_model(ds, cfg)
    strata = compute_strata(ds, 0.2, 3)
    report = evaluate(model, ds, strata, ks=(5, 10), compute_silhouette=False)

    with torch.no_grad():
        fused = model.fused_item_embeddings()
        table = model.scoring_table(fused).numpy()
        seqs = [ds.train_prefix(u) + [ds.valid_item(u)] for u in range(ds.num_users)]
        indices, lengths = pad_batch(seqs, ds.padding_index)
        _, h = model.encode(indices, lengths, fused=fused)
        scores = h.numpy() @ table.T

    buckets = {"overall": [], "tail_item": [], "head_item": [], "cold_user": [], "hot_user": []}
    for u in range(ds.num_users):
        order = sorted(range(ds.num_items), key=lambda i: (-scores[u][i], i))
        rank = order.index(ds.test_item(u)) + 1
        buckets["overall"].append(rank)
        key = "tail_item" if strata.item_is_tail[ds.test_item(u)] else "head_item"
        buckets[key].append(rank)
        key = "cold_user" if strata.user_is_cold[u] else "hot_user"
        buckets[key].append(rank)

    for name, ranks in buckets.items():
        got = report.subsets[name]
        assert got.users == len(ranks)
        for k in (5, 10):
            if ranks:
                assert got.hr[k] == pytest.approx(hr_at_k(ranks, k), abs=1e-12)
                assert got.ndcg[k] == pytest.approx(ndcg_at_k(ranks, k), abs=1e-12)
            else:
                assert got.hr[k] is None


def test_stratified_recombination_identity():
    ds = random_dataset(seed=13)
    cfg = tiny_config(model={"dropout": 0.0})
    model = _trained_toyish_model(ds, cfg)
    strata = compute_strata(ds, 0.2, 3)
    report = evaluate(model, ds, strata, ks=(5, 10), compute_silhouette=False)
    overall = report.subsets["overall"]
    for split in (("tail_item", "head_item"), ("cold_user", "hot_user")):
        for k in (5, 10):
            for attr in ("hr", "ndcg"):
                total = 0.0
                for name in split:
                    sub = report.subsets[name]
                    if sub.users:
                        total += sub.users * getattr(sub, attr)[k]
                combined = total / overall.users
                assert combined == pytest.approx(getattr(overall, attr)[k], abs=1e-12)


def test_single_perfect_user_all_ones():
    ds = random_dataset(seed=14)
    cfg = tiny_config(model={"dropout": 0.0, "tie_scoring": False})
    model = _trained_toyish_model(ds, cfg)
    # keep one user and plant a scoring table that ranks their test item first
    ds.user_vocab = ds.user_vocab[:1]
    ds.sequences = ds.sequences[:1]
    with torch.no_grad():
        fused = model.fused_item_embeddings()
        seqs = [ds.train_prefix(0) + [ds.valid_item(0)]]
        indices, lengths = pad_batch(seqs, ds.padding_index)
        _, h = model.encode(indices, lengths, fused=fused)
        model.output_emb.weight.zero_()
        model.output_emb.weight[ds.test_item(0)] = h[0] / float(h[0].norm()) ** 2
    strata = compute_strata(ds, 0.2, 3)
    report = evaluate(model, ds, strata, ks=(5, 10), compute_silhouette=False)
    for name, sub in report.subsets.items():
        if sub.users:
            assert sub.hr[5] == 1.0 and sub.ndcg[10] == 1.0


def test_vocabulary_mismatch_rejected():
    ds = random_dataset(seed=15)
    cfg = tiny_config()
    model = _trained_toyish_model(ds, cfg)
    ds.item_vocab = ds.item_vocab + ["ghost"]
    with pytest.raises(ValueError, match="vocabulary mismatch"):
        evaluate(model, ds, compute_strata(ds, 0.2, 3))


def test_mask_train_items_improves_target_rank():
    ds = random_dataset(seed=16)
    cfg = tiny_config(model={"dropout": 0.0})
    model = _trained_toyish_model(ds, cfg)
    strata = compute_strata(ds, 0.2, 3)
    plain = evaluate(model, ds, strata, ks=(10,), compute_silhouette=False)
    masked = evaluate(model, ds, strata, ks=(10,), mask_train_items=True,
                      compute_silhouette=False)
    assert masked.subsets["overall"].hr[10] >= plain.subsets["overall"].hr[10]
    assert masked.masked_train_items


def test_silhouette_in_report_when_prototypes_given():
    ds = random_dataset(seed=17)
    cfg = tiny_config(model={"dropout": 0.0})
    model = _trained_toyish_model(ds, cfg)
    with torch.no_grad():
        fused = model.fused_item_embeddings()
        seqs = [ds.train_prefix(u) + [ds.valid_item(u)] for u in range(ds.num_users)]
        indices, lengths = pad_batch(seqs, ds.padding_index)
        _, h = model.encode(indices, lengths, fused=fused)
    protos = kmeans_fit(h.numpy().astype(np.float64), k=3, seed=0)
    report = evaluate(model, ds, compute_strata(ds, 0.2, 3), prototypes=protos)
    assert report.silhouette is not None and -1.0 <= report.silhouette <= 1.0


def test_report_serialization_and_table():
    ds = random_dataset(seed=18)
    cfg = tiny_config(model={"dropout": 0.0})
    model = _trained_toyish_model(ds, cfg)
    report = evaluate(model, ds, compute_strata(ds, 0.2, 3), compute_silhouette=False)
    payload = report.to_dict()
    assert set(payload["subsets"]) == {"overall", "tail_item", "head_item",
                                       "cold_user", "hot_user"}
    table = report.format_table()
    assert "Overall" in table and "Tail Item" in table and "HR@10" in table
    assert report.to_json() == EvalReport(**{
        "ks": report.ks, "subsets": report.subsets,
        "silhouette": report.silhouette,
        "masked_train_items": report.masked_train_items}).to_json()


# ---------------------------------------------------------------- projection

def test_projection_of_2d_data_preserves_distances():
    rng = np.random.default_rng(4)
    pts = rng.standard_normal((20, 2)) @ np.array([[2.0, 0.3], [0.3, 0.5]])
    coords = export_projection(pts)
    orig = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    proj = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
    np.testing.assert_allclose(orig, proj, atol=1e-9)


def test_projection_collinear_second_component_zero():
    direction = np.array([1.0, 2.0, 0.5, -1.0, 3.0])
    pts = np.stack([t * direction for t in (0.0, 1.0, 2.0)])
    coords = export_projection(pts)
    assert float(np.var(coords[:, 1])) < 1e-18


def test_projection_matches_eigendecomposition_oracle():
    rng = np.random.default_rng(5)
    pts = rng.standard_normal((50, 8))
    coords = export_projection(pts)
    centered = pts - pts.mean(axis=0)
    cov = np.cov(centered.T)
    eigvals = np.sort(np.linalg.eigvalsh(cov))[::-1]
    got_vars = coords.var(axis=0, ddof=1)
    np.testing.assert_allclose(got_vars, eigvals[:2], rtol=1e-9)


def test_projection_deterministic_sign():
    rng = np.random.default_rng(6)
    pts = rng.standard_normal((30, 5))
    a = export_projection(pts)
    b = export_projection(pts.copy())
    np.testing.assert_array_equal(a, b)


def test_projection_rejects_identical_points():
    with pytest.raises(ValueError, match="degenerate covariance"):
        export_projection(np.ones((5, 3)))


def test_projection_csv(tmp_path):
    coords = np.array([[1.5, -2.0], [0.0, 3.25]])
    write_projection_csv(coords, [0, 1], tmp_path / "proj.csv")
    lines = (tmp_path / "proj.csv").read_text().splitlines()
    assert lines[0] == "x,y,cluster"
    assert lines[1] == "1.5,-2.0,0"
