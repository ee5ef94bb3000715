import itertools

import numpy as np
import pytest
from scipy import stats

from conftest import ConstantMock, LinearMock, grid_mask
from ucbs.concepts import ConceptScore, rank_scores
from ucbs.errors import UndefinedCorrelationError, UndefinedRatioError
from ucbs.metrics import (
    Curve,
    RankedItem,
    auc,
    completeness,
    concept_set_sizes,
    derive_seed,
    evaluate_dataset,
    faithfulness,
    friedman_test,
    global_accuracy_auc,
    insertion_deletion_curve,
    pixelmap_to_concept_scores,
    removal_pairs,
    sdc,
    sensitivity_n,
    sensitivity_sweep,
    ssc,
)
from ucbs.segmentation import Image, SegmentMask


def ranked_from(values):
    return rank_scores([ConceptScore(i, float(v), "") for i, v in enumerate(values)])


def sigmoid(t):
    return 1.0 / (1.0 + np.exp(-t))


def test_curve_endpoints_and_shape(linear_setup):
    model, image, mask, seg_w = linear_setup
    ranked = ranked_from(seg_w)
    ins = insertion_deletion_curve(model, image, mask, ranked, "insertion")
    dele = insertion_deletion_curve(model, image, mask, ranked, "deletion")
    assert len(ins.xs) == mask.k + 1 and ins.xs[0] == 0 and ins.xs[-1] == 1
    assert ins.ys[-1] == dele.ys[0]
    assert ins.ys[0] == pytest.approx(0.5)
    # analytic: prefix sums of descending weights through the logistic link
    prefix = np.concatenate([[0.0], np.cumsum(np.sort(seg_w)[::-1])])
    np.testing.assert_allclose(ins.ys, sigmoid(prefix), atol=1e-12)
    assert 0 <= auc(ins) <= 1 and 0 <= auc(dele) <= 1


def test_constant_model_flat_curve(linear_setup):
    _, image, mask, seg_w = linear_setup
    c = insertion_deletion_curve(ConstantMock((0.0, 1.0)), image, mask, ranked_from(seg_w), "deletion")
    expected = sigmoid(1.0)
    assert np.allclose(c.ys, expected, atol=1e-15)
    assert auc(c) == pytest.approx(expected, abs=1e-12)


def test_single_segment_curve(rng):
    image = Image(rng.random((8, 8, 3)), "s")
    mask = SegmentMask(np.zeros((8, 8), dtype=np.int32), 1)
    model = LinearMock(rng.normal(size=(8, 8, 3)))
    c = insertion_deletion_curve(model, image, mask, [ConceptScore(0, 1.0, "")], "insertion")
    full = model.logits(image.pixels[None])[0, 1]
    np.testing.assert_allclose(c.ys, [0.5, sigmoid(full)], atol=1e-15)


def test_curve_rejects_bad_rankings(linear_setup):
    model, image, mask, seg_w = linear_setup
    with pytest.raises(ValueError):
        insertion_deletion_curve(model, image, mask, ranked_from(seg_w)[:-1], "insertion")
    with pytest.raises(ValueError):
        insertion_deletion_curve(model, image, mask, ranked_from(seg_w)[::-1], "insertion")
    with pytest.raises(ValueError):
        insertion_deletion_curve(model, image, mask, ranked_from(seg_w), "sideways")


def test_auc_simple_cases():
    assert auc(Curve([0, 0.3, 1], [0.4, 0.4, 0.4])) == pytest.approx(0.4, abs=1e-15)
    assert auc(Curve([0, 1], [0, 1])) == 0.5
    assert auc(Curve(np.linspace(0, 1, 11), np.linspace(0, 1, 11))) == pytest.approx(0.5, abs=1e-15)


def riemann_oracle(xs, ys, n=1_000_000):
    """Midpoint rule on a fine uniform grid over the piecewise-linear interpolant."""
    mids = (np.arange(n) + 0.5) / n
    return float(np.interp(mids, xs, ys).sum() / n)


@pytest.mark.parametrize("seed", range(5))
def test_auc_matches_fine_grid_oracle(seed):
    rng = np.random.default_rng(seed)
    xs = np.concatenate([[0.0], np.sort(rng.random(8)), [1.0]])
    ys = rng.random(10)
    assert abs(auc(Curve(xs, ys)) - riemann_oracle(xs, ys)) <= 1e-9


def test_global_accuracy_singleton_reduction(linear_setup):
    model, image, mask, seg_w = linear_setup
    ranked = ranked_from(seg_w)
    item = RankedItem(image, mask, ranked, is_target=True)
    for mode in ("insertion", "deletion"):
        probs = insertion_deletion_curve(model, image, mask, ranked, mode)
        # binary logits (0, t): correct iff target probability > 1/2
        expected = auc(Curve(probs.xs, (probs.ys > 0.5).astype(float)))
        got = global_accuracy_auc({"m": model}, [item], mode)
        assert got == {"m": expected}


def test_global_accuracy_identical_models(linear_setup, rng):
    model, image, mask, seg_w = linear_setup
    items = [RankedItem(image, mask, ranked_from(seg_w)),
             RankedItem(image, grid_mask(12, 12, 3, 3), ranked_from(rng.random(9)), is_target=False)]
    twin = LinearMock(model.weights.copy())
    out = global_accuracy_auc({"a": model, "b": twin}, items, "deletion")
    assert out["a"] == out["b"]


def test_sensitivity_n_linear_model_brute_force(linear_setup):
    model, image, mask, seg_w = linear_setup
    full = model.logits(image.pixels[None])[0, 1]
    drops, sums = [], []
    for subset in itertools.combinations(range(mask.k), 2):
        canvas = image.pixels.copy()
        for j in subset:
            canvas[mask.labels == j] = 0
        drops.append(full - model.logits(canvas[None])[0, 1])
        sums.append(seg_w[list(subset)].sum())
    assert np.corrcoef(drops, sums)[0, 1] == pytest.approx(1.0, abs=1e-9)
    for n in range(1, mask.k):
        assert sensitivity_n(model, image, mask, seg_w, n, samples=50, seed=n) == pytest.approx(1.0, abs=1e-9)


def test_sensitivity_n_degenerate_and_errors(linear_setup):
    model, image, mask, seg_w = linear_setup
    with pytest.raises(UndefinedCorrelationError):
        sensitivity_n(model, image, mask, np.ones(mask.k), 2)
    with pytest.raises(UndefinedCorrelationError):
        sensitivity_n(model, image, mask, seg_w, mask.k)
    with pytest.raises(ValueError):
        sensitivity_n(model, image, mask, seg_w, 0)
    with pytest.raises(ValueError):
        sensitivity_n(model, image, mask, seg_w, 2, samples=1)
    sweep = sensitivity_sweep(model, image, mask, seg_w, samples=20, ns=[2, 6])
    assert sweep[6] is None and sweep[2] == pytest.approx(1.0)


def test_sensitivity_n_sign_and_affine(linear_setup, rng):
    model, image, mask, _ = linear_setup
    scores = rng.normal(size=mask.k)
    r = sensitivity_n(model, image, mask, scores, 3, samples=40, seed=5)
    assert sensitivity_n(model, image, mask, -scores, 3, samples=40, seed=5) == -r
    assert sensitivity_n(model, image, mask, 2 * scores + 3, 3, samples=40, seed=5) == pytest.approx(r, abs=1e-12)


def test_faithfulness(linear_setup):
    model, image, mask, seg_w = linear_setup
    assert faithfulness(model, image, mask, seg_w, samples=60, seed=2) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(UndefinedCorrelationError):
        faithfulness(ConstantMock(), image, mask, seg_w, samples=30)
    assert faithfulness(model, image, mask, -seg_w, samples=60, seed=2) == pytest.approx(-1.0, abs=1e-9)


def test_faithfulness_order_invariance(linear_setup, rng):
    model, image, mask, _ = linear_setup
    scores = rng.normal(size=mask.k)
    a = faithfulness(model, image, mask, scores, samples=40, seed=9)
    assert faithfulness(model, image, mask, scores, samples=40, seed=9) == a
    sizes = np.random.default_rng([9, 1]).integers(1, mask.k + 1, size=40)
    drops, sums, _ = removal_pairs(model, image, mask, scores, sizes, 9)
    perm = rng.permutation(40)
    assert np.corrcoef(drops[perm], sums[perm])[0, 1] == pytest.approx(a, abs=1e-12)


def prefix_scan(model, image, mask, ranked):
    """Brute force: build every prefix canvas with explicit pixel loops."""
    order = [s.segment_index for s in ranked]
    h, w = mask.labels.shape
    pred_ins, pred_del = [], []
    for j in range(mask.k + 1):
        ins = np.zeros_like(image.pixels)
        dele = image.pixels.copy()
        chosen = set(order[:j])
        for y in range(h):
            for x in range(w):
                if mask.labels[y, x] in chosen:
                    ins[y, x] = image.pixels[y, x]
                    dele[y, x] = 0
        pred_ins.append(int(np.argmax(model.logits(ins[None])[0])) == model.target)
        pred_del.append(int(np.argmax(model.logits(dele[None])[0])) == model.target)
    s = next((j for j, ok in enumerate(pred_ins) if ok), mask.k + 1)
    if not pred_del[0]:
        d = None
    else:
        d = next((j for j, ok in enumerate(pred_del) if not ok), mask.k + 1)
    return s, d


def test_ssc_sdc_match_prefix_scan():
    rng = np.random.default_rng(77)
    seen_sentinel = seen_none = False
    for trial in range(50):
        rows, cols = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        mask = grid_mask(10, 12, rows, cols)
        image = Image(rng.random((10, 12, 3)), f"t{trial}")
        model = LinearMock(rng.normal(rng.uniform(-0.03, 0.03), 0.1, size=(10, 12, 3)))
        ranked = ranked_from(rng.normal(size=mask.k))
        s, d = ssc(model, image, mask, ranked), sdc(model, image, mask, ranked)
        assert (s, d) == prefix_scan(model, image, mask, ranked)
        seen_sentinel |= s == mask.k + 1 or d == mask.k + 1
        seen_none |= d is None
    assert seen_sentinel and seen_none


def test_ssc_zero_and_sentinels(linear_setup):
    _, image, mask, seg_w = linear_setup
    ranked = ranked_from(seg_w)
    assert ssc(ConstantMock((0.0, 1.0)), image, mask, ranked) == 0
    assert sdc(ConstantMock((0.0, 1.0)), image, mask, ranked) == mask.k + 1
    assert sdc(ConstantMock((1.0, 0.0)), image, mask, ranked) is None
    assert ssc(ConstantMock((1.0, 0.0)), image, mask, ranked) == mask.k + 1
    items = [RankedItem(image, mask, ranked)] * 3
    summary = concept_set_sizes(ConstantMock((1.0, 0.0)), items)
    assert summary["ssc_mean"] is None and summary["ssc_sentinel_rate"] == 1.0
    assert summary["sdc_undefined_count"] == 3


def _items(rng, n=6):
    items = []
    for i in range(n):
        mask = grid_mask(10, 10, 2, 3)
        items.append(RankedItem(Image(rng.random((10, 10, 3)), f"c{i}"), mask,
                                ranked_from(rng.normal(size=mask.k)), is_target=bool(i % 2)))
    return items


def test_completeness(rng):
    model = LinearMock(rng.normal(0, 0.1, size=(10, 10, 3)))
    items = _items(rng)
    assert completeness(model, items, 6) == 1.0
    assert completeness(model, items, 60) == 1.0
    intact = np.array([(np.argmax(model.logits(it.image.pixels[None])[0]) == 1) == it.is_target for it in items])
    zero = np.array([(np.argmax(model.logits(np.zeros((1, 10, 10, 3)))[0]) == 1) == it.is_target
                     for it in items])
    assert completeness(model, items, 0) == pytest.approx(zero.mean() / intact.mean(), abs=1e-15)
    with pytest.raises(UndefinedRatioError):
        completeness(ConstantMock((0.0, 1.0)), [it for it in items if not it.is_target], 1)
    with pytest.raises(ValueError):
        completeness(model, items, -1)


def test_friedman_hand_example():
    res = friedman_test([[1, 2, 3], [1, 2, 3], [1, 2, 3]])
    assert res.statistic == pytest.approx(6.0, abs=1e-12)
    assert list(res.mean_ranks.values()) == [1.0, 2.0, 3.0]
    assert res.p_value == pytest.approx(np.exp(-3.0), abs=1e-12)


def test_friedman_null_case():
    res = friedman_test(np.full((4, 3), 0.7))
    assert res.statistic == 0.0 and not res.reject_h0
    assert all(r == 2.0 for r in res.mean_ranks.values())


def test_friedman_rank_sum_and_scipy():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, t = int(rng.integers(2, 12)), int(rng.integers(2, 7))
        a = rng.integers(0, 4, size=(n, t)).astype(float)
        res = friedman_test(a)
        assert sum(res.mean_ranks.values()) == pytest.approx(t * (t + 1) / 2, abs=1e-12)
        assert 0 <= res.p_value <= 1
        tie_free = rng.random((n, max(t, 3)))
        ours = friedman_test(tie_free).statistic
        assert ours == pytest.approx(stats.friedmanchisquare(*tie_free.T).statistic, abs=1e-9)


def test_friedman_rejects_consistent_ordering():
    rng = np.random.default_rng(1)
    a = np.sort(rng.random((10, 4)), axis=1)
    res = friedman_test(a, treatments=["w", "x", "y", "z"])
    assert res.reject_h0 and res.p_value < 0.05
    assert res.mean_ranks == {"w": 1.0, "x": 2.0, "y": 3.0, "z": 4.0}
    with pytest.raises(ValueError):
        friedman_test([[1, 2]])


def test_pixelmap_adapter():
    mask = SegmentMask(np.array([0] * 10 + [1] * 20).reshape(5, 6).astype(np.int32), 2)
    assert [s.score for s in pixelmap_to_concept_scores(np.zeros((5, 6)), mask)] == [0.0, 0.0]
    assert [s.score for s in pixelmap_to_concept_scores(np.ones((5, 6)), mask)] == [10.0, 20.0]
    with pytest.raises(ValueError):
        pixelmap_to_concept_scores(np.ones((6, 5)), mask)


def test_pixelmap_matches_naive_loop(rng):
    mask = grid_mask(9, 7, 2, 2)
    pm = rng.normal(size=(9, 7))
    naive = [0.0] * 4
    for y in range(9):
        for x in range(7):
            naive[mask.labels[y, x]] += abs(pm[y, x])
    got = [s.score for s in pixelmap_to_concept_scores(pm, mask, "p")]
    np.testing.assert_allclose(got, naive, rtol=0, atol=1e-12)


def test_true_order_dominates_random_orders():
    rng = np.random.default_rng(4)
    mask = grid_mask(12, 12, 3, 4)
    seg_w = rng.normal(size=mask.k)
    pix = seg_w[mask.labels] / np.bincount(mask.labels.ravel())[mask.labels]
    model = LinearMock(np.repeat(pix[:, :, None], 3, axis=2) / 3)
    image = Image(np.ones((12, 12, 3)), "ones")
    best = auc(insertion_deletion_curve(model, image, mask, ranked_from(seg_w), "insertion"))
    true_order = list(np.argsort(-seg_w))
    for _ in range(100):
        order = rng.permutation(mask.k)
        # a fake descending score list that realises this order
        fake = [ConceptScore(int(j), float(mask.k - r), "") for r, j in enumerate(order)]
        other = auc(insertion_deletion_curve(model, image, mask, fake, "insertion"))
        assert best > other if list(order) != true_order else best == other


def test_evaluate_dataset_report(rng):
    model = LinearMock(rng.normal(0, 0.1, size=(10, 10, 3)))
    items = _items(rng, 4)
    metrics = ["insertion", "deletion", "sensn", "faith", "ssc", "sdc", "completeness"]
    rows, rep = evaluate_dataset(model, items, metrics, samples=20, seed=3)
    assert len(rows) == 4 and rep.counts["images"] == 4
    d = rep.to_dict()
    assert set(d["completeness"]) == {"1", "3"}
    assert 0 <= d["insertion_auc"] <= 1
    rows2, rep2 = evaluate_dataset(model, items, metrics, samples=20, seed=3)
    assert rows2 == rows and rep2.to_dict() == d
    assert derive_seed(3, "a") == derive_seed(3, "a") != derive_seed(3, "b")
