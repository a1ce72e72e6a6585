import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qks.dataset_io import SyntheticConfig, generate_synthetic, ground_truth_masks, load_split
from qks.evaluation import (
    MetricWarning,
    PreferenceStats,
    UndefinedMetricError,
    average_precision,
    candidate_labels,
    evaluate,
    export_attention_map,
    mean_ap,
    normalize_map,
    predict,
    preference_from_predictions,
    region_mass,
    report_from_scores,
    token_preference_stats,
    topk_prf,
    write_attention_files,
)
from qks.model import ModelConfig, QksHead
from qks.training import TrainSettings, model_config_for, train

# ---------------------------------------------------------------------------
# brute-force oracles, written from the definitions only
# ---------------------------------------------------------------------------


def ahead(scores, i, j):
    """True if item j is ranked before item i (higher score, or equal score
    and smaller index)."""
    return scores[j] > scores[i] or (scores[j] == scores[i] and j < i)


def oracle_ap(scores, rel):
    n = len(scores)
    pos = [i for i in range(n) if rel[i]]
    total = 0.0
    for i in pos:
        rank = 1 + sum(1 for j in range(n) if j != i and ahead(scores, i, j))
        hits = 1 + sum(1 for j in pos if j != i and ahead(scores, i, j))
        total += hits / rank
    return total / len(pos)


def oracle_map(S, Y, cands):
    aps = [oracle_ap(list(S[:, j]), list(Y[:, j])) for j in cands if Y[:, j].any()]
    return sum(aps) / len(aps)


def oracle_prf(S, Y, K, cands):
    hits = 0
    for i in range(S.shape[0]):
        order = sorted(cands, key=lambda j: (-S[i, j], j))[:K]
        hits += sum(1 for j in order if Y[i, j])
    npos = sum(1 for i in range(S.shape[0]) for j in cands if Y[i, j])
    p = hits / (K * S.shape[0])
    r = hits / npos
    return p, r, (0.0 if p + r == 0 else 2 * p * r / (p + r))


# ---------------------------------------------------------------------------
# average precision
# ---------------------------------------------------------------------------


def test_ap_examples():
    assert average_precision([4, 3, 2, 1], [1, 1, 0, 0]) == 1.0
    assert average_precision([4, 3, 2, 1], [1, 0, 1, 0]) == pytest.approx(0.833333, abs=5e-7)
    assert average_precision([4, 3, 2, 1], [1, 0, 1, 0]) == (1 + 2 / 3) / 2
    assert average_precision([4, 3, 2, 1], [0, 0, 0, 1]) == 0.25
    for n in range(1, 12):
        assert average_precision(np.arange(n, 0, -1), np.eye(n)[-1]) == 1 / n


def test_ap_ties_break_by_index():
    assert average_precision([1, 1, 1], [0, 0, 1]) == 1 / 3
    assert average_precision([1, 1, 1], [1, 0, 0]) == 1.0


def test_ap_undefined():
    with pytest.raises(UndefinedMetricError):
        average_precision([1, 2], [0, 0])


def test_map_examples():
    assert mean_ap(np.array([[2.0], [1.0]]), np.array([[1], [0]]))[0] == 1.0
    S = np.array([[2.0, 1.0], [1.0, 2.0]])
    Y = np.array([[1, 0], [0, 1]])
    S[:, 1] = [2.0, 1.0]
    m, per = mean_ap(S, Y)
    assert per == {0: 1.0, 1: 0.5} and m == 0.75


def test_map_skips_labels_without_positives():
    S = np.random.default_rng(0).normal(size=(5, 3))
    Y = np.zeros((5, 3), bool)
    Y[1, 0] = True
    with pytest.warns(MetricWarning, match="skipping 2"):
        m, per = mean_ap(S, Y)
    assert list(per) == [0]
    with pytest.raises(UndefinedMetricError):
        mean_ap(S, np.zeros((5, 3), bool))


# ---------------------------------------------------------------------------
# top-K
# ---------------------------------------------------------------------------


def test_topk_examples():
    Y = np.array([[1, 1, 0, 0], [0, 0, 1, 1]], bool)
    S = np.where(Y, 1.0, 0.0)
    assert topk_prf(S, Y, 2) == (1.0, 1.0, 1.0)
    assert topk_prf(-S, Y, 2) == (0.0, 0.0, 0.0)
    # hand enumeration: image 0 top-2 = {2, 0} -> 1 hit; image 1 top-2 = {1, 3} -> 1 hit
    S = np.array([[0.5, 0.1, 0.9, 0.2], [0.3, 0.8, 0.1, 0.7]])
    Y = np.array([[1, 1, 0, 0], [0, 0, 1, 1]], bool)
    p, r, f = topk_prf(S, Y, 2)
    assert (p, r) == (2 / 4, 2 / 4) and f == 0.5


def test_topk_recall_counts_all_positives():
    S = np.array([[3.0, 2.0, 1.0, 0.0]])
    Y = np.array([[1, 1, 1, 0]], bool)
    p, r, _ = topk_prf(S, Y, 2)
    assert p == 1.0 and r == 2 / 3


def test_topk_errors():
    with pytest.raises(ValueError):
        topk_prf(np.zeros((2, 3)), np.ones((2, 3)), 4)
    with pytest.raises(UndefinedMetricError):
        topk_prf(np.zeros((2, 3)), np.zeros((2, 3)), 2)


# ---------------------------------------------------------------------------
# oracle equivalence and invariances
# ---------------------------------------------------------------------------


def random_instance(seed):
    r = np.random.default_rng(seed)
    n, L = int(r.integers(1, 21)), int(r.integers(1, 11))
    # coarse scores produce plenty of ties
    S = r.integers(-3, 4, size=(n, L)).astype(float) if seed % 2 else r.normal(size=(n, L))
    Y = r.random((n, L)) < r.uniform(0.1, 0.6)
    Y[int(r.integers(n)), int(r.integers(L))] = True
    return S, Y


@pytest.mark.parametrize("seed", range(200))
def test_metrics_match_brute_force(seed):
    S, Y = random_instance(seed)
    cands = list(range(S.shape[1]))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MetricWarning)
        m, _ = mean_ap(S, Y, cands)
    assert abs(m - oracle_map(S, Y, cands)) <= 1e-12
    for K in range(1, min(5, S.shape[1]) + 1):
        got = topk_prf(S, Y, K, cands)
        ref = oracle_prf(S, Y, K, cands)
        assert max(abs(a - b) for a, b in zip(got, ref)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metrics_invariant_to_increasing_transform(seed):
    S, Y = random_instance(seed)
    T = np.tanh(S / 3.0) * 5.0 + 2.0  # strictly increasing, keeps ties
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MetricWarning)
        assert mean_ap(S, Y)[0] == mean_ap(T, Y)[0]
    K = min(3, S.shape[1])
    assert topk_prf(S, Y, K) == topk_prf(T, Y, K)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_zsl_ignores_seen_scores(seed):
    r = np.random.default_rng(seed)
    S = r.normal(size=(15, 8))
    Y = r.random((15, 8)) < 0.3
    Y[0, 5:] = True
    unseen = [5, 6, 7]
    S2 = S.copy()
    S2[:, :5] = r.normal(size=(15, 5)) * 1e6
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MetricWarning)
        a = report_from_scores(S, Y, unseen, "zsl", ks=(1, 3))
        b = report_from_scores(S2, Y, unseen, "zsl", ks=(1, 3))
    assert a.to_dict() == b.to_dict()


def test_report_bounds_and_table():
    r = np.random.default_rng(3)
    S, Y = r.normal(size=(9, 4)), r.random((9, 4)) < 0.4
    Y[0] = True
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MetricWarning)
        rep = report_from_scores(S, Y, list(range(S.shape[1])), "gzsl", ks=(1, 2))
    assert 0 <= rep.mAP <= 1
    for v in rep.prf.values():
        assert all(0 <= v[k] <= 1 for k in ("P", "R", "F1"))
    assert "GZSL" in rep.table() and "K=2" in rep.table()
    json.dumps(rep.to_dict())


# ---------------------------------------------------------------------------
# end to end on a tiny checkpoint
# ---------------------------------------------------------------------------

TINY = dict(H=4, W=4, d=8, n_seen=6, n_unseen=5, n_train=40, n_test=30,
            labels_min=1, labels_max=2, region_min=1, region_max=3, K=2)

# tiny dataset (seed 2) and head trained 60 steps from seed 0; reference
# numbers recomputed with the brute-force oracles above and frozen
GOLDEN_TINY = {
    "zsl": (0.2851616161616161, 0.18518518518518515, 0.21428571428571425),
    "gzsl": (0.49392594778958415, 0.27067669172932335, 0.35233160621761656),
}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    man = generate_synthetic(SyntheticConfig(**TINY, seed=2), tmp_path_factory.mktemp("tiny"))
    cfg = model_config_for(man, m=3, L=1, heads=2)
    res = train(man, cfg, TrainSettings(steps=60, batch_size=8, lr=1e-2, checkpoint_every=0), seed=0)
    return man, res.head


def test_tiny_report_matches_oracles_and_golden(tiny_run):
    man, head = tiny_run
    test = load_split(man, "test")
    S = predict(head, test.features, man.label_table()).scores.astype(np.float64)
    got = {}
    for task in ("zsl", "gzsl"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MetricWarning)
            rep = evaluate(head, man, task)
        cands = candidate_labels(man, task)
        assert abs(rep.mAP - oracle_map(S, test.targets, cands)) <= 1e-12
        for K in (3,):
            ref = oracle_prf(S, test.targets, K, cands)
            got_k = (rep.prf[K]["P"], rep.prf[K]["R"], rep.prf[K]["F1"])
            assert max(abs(a - b) for a, b in zip(got_k, ref)) <= 1e-12
        got[task] = (rep.mAP, rep.prf[3]["F1"], rep.prf[5]["F1"])
    if GOLDEN_TINY is not None:
        for task, vals in GOLDEN_TINY.items():
            np.testing.assert_allclose(got[task], vals, atol=1e-6)


def test_candidates():
    class M:
        seen, unseen = [0, 1, 3], [2]

    assert candidate_labels(M, "zsl") == [2]
    assert candidate_labels(M, "GZSL") == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        candidate_labels(M, "fsl")


def test_gzsl_without_unseen_equals_seen_only():
    r = np.random.default_rng(4)
    S = r.normal(size=(12, 5))
    Y = r.random((12, 5)) < 0.4
    Y[0] = True
    class M:
        seen, unseen = [0, 1, 2, 3, 4], []

    a = report_from_scores(S, Y, candidate_labels(M, "gzsl"), "gzsl")
    b = report_from_scores(S, Y, M.seen, "seen")
    assert a.mAP == b.mAP and a.prf == b.prf


def test_evaluate_rejects_incompatible_head(tiny_run):
    man, _ = tiny_run
    other = QksHead.initialize(ModelConfig(m=2, L=1, d=8, heads=1, C=8, H=3, W=3))
    with pytest.raises(ValueError, match="geometry"):
        evaluate(other, man, "zsl")


# ---------------------------------------------------------------------------
# attention maps and token preferences
# ---------------------------------------------------------------------------


def test_normalize_map_cases():
    row = np.zeros((3, 3))
    row[1, 2] = 1.0
    np.testing.assert_array_equal(normalize_map(row), row)
    with pytest.warns(MetricWarning, match="constant"):
        out = normalize_map(np.full((3, 3), 1 / 9))
    assert np.all(out == 0)


def test_attention_export_files(tiny_run, tmp_path):
    man, head = tiny_run
    test = load_split(man, "test")
    lab = man.images("test")[0]["labels"][0]
    grid = export_attention_map(head, test.features[0], man.label_table(), lab, tmp_path / "map")
    assert grid.shape == (TINY["H"], TINY["W"])
    assert grid.min() >= 0 and grid.max() <= 1
    np.testing.assert_allclose(np.loadtxt(tmp_path / "map.csv", delimiter=","), grid, atol=1e-8)
    raster = np.frombuffer((tmp_path / "map.gray").read_bytes(), np.uint8).reshape(grid.shape)
    np.testing.assert_array_equal(raster, np.round(grid * 255).astype(np.uint8))
    side = json.loads((tmp_path / "map.json").read_text())
    assert (side["height"], side["width"], side["label"]) == (TINY["H"], TINY["W"], lab)
    with pytest.raises(IndexError):
        export_attention_map(head, test.features[0], man.label_table(), 99)


def test_raster_one_hot(tmp_path):
    grid = np.zeros((2, 3))
    grid[0, 1] = 1.0
    paths = write_attention_files(grid, tmp_path / "x")
    assert paths["raster"].read_bytes() == bytes([0, 255, 0, 0, 0, 0])


def test_region_mass():
    row = np.array([0.5, 0.25, 0.25])
    assert region_mass(row, np.array([True, False, True])) == 0.75


def test_preference_counting_identity(tiny_run):
    man, head = tiny_run
    test = load_split(man, "test")
    stats = token_preference_stats(head, man, "gzsl", data=test)
    cands = candidate_labels(man, "gzsl")
    np.testing.assert_array_equal(stats.matrix.sum(axis=1), test.targets[:, cands].sum(axis=0))
    np.testing.assert_array_equal(stats.histogram, stats.matrix.sum(axis=0))


def test_single_token_puts_all_mass_in_column_zero():
    r = np.random.default_rng(0)
    Y = r.random((10, 4)) < 0.5
    stats = preference_from_predictions(np.zeros((10, 4), int), Y, [0, 1, 2, 3], m=1)
    assert stats.matrix.shape == (4, 1)
    np.testing.assert_array_equal(stats.matrix[:, 0], Y.sum(axis=0))


def test_concentration_and_csv(tmp_path):
    s = PreferenceStats([3, 5], np.array([[3, 1, 0], [0, 0, 0]]), np.array([3, 1, 0]))
    c = s.concentration()
    assert c[0] == 0.75 and np.isnan(c[1])
    s.write_csv(tmp_path / "p.csv", label_names={3: "c", 5: "e"})
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "label,name,token_0,token_1,token_2"
    assert lines[1] == "3,c,3,1,0" and lines[-1] == "total,,3,1,0"


# ---------------------------------------------------------------------------
# attention and token sharing on the reference run
# ---------------------------------------------------------------------------


def _reference_region_masses(run):
    masks = ground_truth_masks(run.manifest, "test").reshape(len(run.test), -1)
    p = run.preds
    mass, area = [], []
    for i in range(len(run.test)):
        for lab in np.flatnonzero(run.test.targets[i]):
            row = p.attention[i, :, p.argmax[i, lab], :].mean(0)
            mass.append(region_mass(row, masks[i] == lab))
            area.append(np.mean(masks[i] == lab))
    return np.array(mass), np.array(area)


@pytest.mark.slow
def test_reference_attention_lands_on_regions(reference_run):
    """The winning token attends to the object region far above uniform."""
    mass, area = _reference_region_masses(reference_run)
    assert np.all((mass >= 0) & (mass <= 1 + 1e-6))
    assert mass.mean() >= 2.0 * area.mean(), (mass.mean(), area.mean())


@pytest.mark.slow
def test_reference_token_preferences(reference_run):
    run = reference_run
    st_ = token_preference_stats(run.result.head, run.manifest, "gzsl",
                                 data=run.test, table=run.table, preds=run.preds)
    n_pos = run.test.targets[:, st_.labels].sum()
    assert st_.histogram.sum() == n_pos
    conc = st_.concentration()
    conc = conc[np.isfinite(conc)]
    assert np.all((conc >= 1.0 / run.result.head.cfg.m - 1e-12) & (conc <= 1.0))
