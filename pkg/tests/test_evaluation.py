from __future__ import annotations

import itertools
import warnings

import numpy as np
import pytest
import torch

from oracles import brute_force_retrieval, random_retrieval_instance
from vtbr.errors import ProtocolError
from vtbr.evaluation import (
    RankingResult,
    RetrievalSet,
    average_precision,
    compute_cmc,
    cross_domain_eval,
    evaluate,
    expected_random_ap,
    first_hit,
    permutation_baseline,
    rank_gallery,
    retrieval_metrics,
    saliency_map,
    save_saliency,
)
from vtbr.model import ModelConfig, VTBRModel


def _ranking(n):
    return RankingResult(np.arange(n), np.arange(n, dtype=float), np.ones(n, dtype=bool))


def test_self_match_ranked_first():
    q = np.array([1.0, 0.0])
    g = np.array([[0.0, 1.0], [1.0, 0.0]])
    r = rank_gallery(q, g, (5, 0), [6, 5], [0, 1])
    assert r.order[0] == 1


def test_same_id_same_camera_masked():
    q = np.array([0.0])
    g = np.array([[0.0], [1.0], [2.0]])
    r = rank_gallery(q, g, (5, 0), [5, 5, 6], [0, 1, 0])
    assert 0 not in r.order and list(r.order) == [1, 2]


def test_all_junk_raises():
    with pytest.raises(ProtocolError):
        rank_gallery(np.zeros(2), np.zeros((1, 2)), (1, 1), [1], [1])


def test_rank_matches_exhaustive_sort():
    rng = np.random.default_rng(0)
    for _ in range(20):
        q = rng.normal(size=3)
        g = rng.normal(size=(10, 3))
        ids, cams = rng.integers(0, 3, 10), rng.integers(0, 2, 10)
        r = rank_gallery(q, g, (0, 0), ids, cams)
        ref = sorted((float(np.sqrt(((q - g[i]) ** 2).sum())), i) for i in range(10) if not (ids[i] == 0 and cams[i] == 0))
        assert list(r.order) == [i for _, i in ref]


def test_ap_hand_values():
    assert average_precision(_ranking(3), [True, False, True]) == pytest.approx(0.8333333333, abs=1e-9)
    assert average_precision(_ranking(4), [True] * 4) == 1.0
    for r in range(1, 6):
        rel = [False] * 5
        rel[r - 1] = True
        assert average_precision(_ranking(5), rel) == pytest.approx(1 / r)
    assert average_precision(_ranking(3), [False] * 3) is None


def test_cmc_hand_values():
    cmc = compute_cmc([_ranking(6)], [[False, True, False, False, False, False]], 6)
    assert cmc[0] == 0.0 and cmc[4] == 1.0
    assert first_hit(_ranking(6), [False, True, False, False, False, False]) == 2
    all_top = compute_cmc([_ranking(3)] * 4, [[True, False, False]] * 4, 3)
    assert np.all(all_top == 1.0)


def test_metrics_match_brute_force():
    rng = np.random.default_rng(42)
    for _ in range(200):
        q, qi, qc, g, gi, gc = random_retrieval_instance(rng)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            mAP, cmc, counts = retrieval_metrics(q, qi, qc, g, gi, gc, ranks=range(1, len(gi) + 1))
        ref_map, ref_cmc, n_eval = brute_force_retrieval(q, qi, qc, g, gi, gc, len(gi))
        assert counts["evaluated"] == n_eval
        assert abs(mAP - ref_map) <= 1e-9
        for r in range(1, len(gi) + 1):
            assert abs(cmc[r] - ref_cmc[r - 1]) <= 1e-9


def test_queries_without_match_are_counted():
    with pytest.warns(UserWarning):
        mAP, cmc, counts = retrieval_metrics(np.zeros((2, 1)), [0, 9], [0, 0], np.zeros((2, 1)), [0, 1], [1, 1])
    assert counts["excluded_queries"] == 1 and counts["evaluated"] == 1


def _expected_ap_brute(n, r):
    rel = [True] * r + [False] * (n - r)
    aps = []
    for perm in set(itertools.permutations(rel)):
        aps.append(average_precision(_ranking(n), list(perm)))
    return float(np.mean(aps))


@pytest.mark.parametrize("n,r", [(1, 1), (2, 1), (3, 2), (5, 1), (5, 3), (6, 6), (7, 2)])
def test_expected_random_ap_closed_form(n, r):
    assert expected_random_ap(n, r) == pytest.approx(_expected_ap_brute(n, r), abs=1e-12)


def _one_hot_set(n_ids=5, per=3):
    ids = np.repeat(np.arange(n_ids), per)
    cams = np.tile(np.arange(per), n_ids)
    imgs = np.eye(n_ids, dtype=np.float32)[ids]
    return RetrievalSet(imgs, ids, cams, imgs, ids, (cams + 1) % per, "X")


def test_identity_encoder_perfect_map():
    rep = evaluate(lambda x: x, _one_hot_set())
    assert rep.mAP == pytest.approx(1.0) and rep.cmc[1] == 1.0


def test_evaluate_deterministic_and_degenerate_transfer():
    data = _one_hot_set()
    enc = lambda x: x * 2.0
    a, b = evaluate(enc, data), evaluate(enc, data)
    assert a.to_json() == b.to_json()
    c = cross_domain_eval(enc, data, "X")
    assert c.mAP == a.mAP and c.cmc == a.cmc
    assert c.protocol["transfer"] == "direct"


def test_content_independent_encoder_near_permutation_baseline():
    ids = np.repeat(np.arange(30), 4)
    cams = np.tile(np.arange(4), 30)
    data = RetrievalSet(np.zeros((30, 1)), np.arange(30), np.zeros(30, int), np.zeros((120, 1)), ids, cams, "T")
    base = permutation_baseline(data.query_ids, data.query_cams, ids, cams)
    maps = []
    for seed in range(40):
        noise = np.random.default_rng(seed)
        enc = lambda x, noise=noise: torch.from_numpy(noise.normal(size=(len(x), 8)))
        maps.append(evaluate(enc, data).mAP)
    assert abs(np.mean(maps) - base) < 0.03


def test_saliency_range_and_determinism(tmp_path):
    torch.manual_seed(0)
    cfg = ModelConfig(vocab_size=12, image_height=16, image_width=8, stage_channels=(4, 8), stage_strides=(2, 1),
                      stem_channels=4, hidden=8, heads=2)
    model = VTBRModel(cfg)
    img = torch.rand(3, 16, 8, generator=torch.Generator().manual_seed(1)).numpy()
    ids = [0, 4, 5, 6, 1]
    a = saliency_map(model, img, ids)
    b = saliency_map(model, img, ids)
    assert a.shape == (16, 8) and np.array_equal(a, b)
    if a.max() > 0:
        assert a.min() >= 0.0 and a.max() == pytest.approx(1.0)
    save_saliency(a, tmp_path / "m")
    raw = (tmp_path / "m.pgm").read_bytes()
    assert raw.startswith(b"P5\n8 16\n255\n") and len(raw) == len(b"P5\n8 16\n255\n") + 128
    assert np.array_equal(np.fromfile(tmp_path / "m.f32", dtype="<f4").reshape(16, 8), a)


def test_saliency_zero_gradient_warns():
    torch.manual_seed(0)
    cfg = ModelConfig(vocab_size=12, image_height=16, image_width=8, stage_channels=(4, 8), stage_strides=(2, 1),
                      stem_channels=4, hidden=8, heads=2)
    model = VTBRModel(cfg)
    with torch.no_grad():
        model.proj.linear.weight.zero_()
    with pytest.warns(UserWarning):
        heat = saliency_map(model, np.zeros((3, 16, 8), np.float32), [0, 4, 1])
    assert not heat.any()
