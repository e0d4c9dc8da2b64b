import numpy as np
import pytest

from calad.errors import DataError
from calad.metrics import (aupro, auroc, kappa_improvement, mask_regions,
                           pixel_auroc, spearman)


def auroc_oracle(scores, labels):
    """O(n^2) pairwise count: P(pos > neg) + P(tie)/2."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def aupro_oracle(heatmaps, masks, cap):
    """Dense sweep: recompute region overlaps and FPR per threshold."""
    regions = []
    for hm, mask in zip(heatmaps, masks):
        for reg in mask_regions(mask):
            regions.append(np.asarray(hm)[reg])
    negs = np.concatenate([np.asarray(hm)[np.asarray(mask) == 0]
                           for hm, mask in zip(heatmaps, masks)])
    thresholds = np.unique(np.concatenate([np.asarray(h).ravel() for h in heatmaps]))
    fprs, pros = [0.0], [0.0]
    for t in thresholds[::-1]:
        fprs.append(np.mean(negs >= t))
        pros.append(np.mean([np.mean(reg >= t) for reg in regions]))
    area = 0.0
    for i in range(1, len(fprs)):
        x0, x1, y0, y1 = fprs[i - 1], fprs[i], pros[i - 1], pros[i]
        if x1 <= cap:
            area += (x1 - x0) * (y0 + y1) / 2
        elif x0 < cap:
            y_cap = y0 + (y1 - y0) * (cap - x0) / (x1 - x0)
            area += (cap - x0) * (y0 + y_cap) / 2
            break
        else:
            break
    return area / cap


class TestAuroc:
    def test_perfect_separation(self):
        assert auroc([1, 2, 3, 10, 11], [0, 0, 0, 1, 1]) == 1.0

    def test_hand_case(self):
        assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_all_tied(self):
        assert auroc([5.0] * 6, [0, 1, 0, 1, 0, 1]) == 0.5

    def test_single_class_rejected(self):
        with pytest.raises(DataError):
            auroc([1, 2], [1, 1])

    @pytest.mark.parametrize("n", [10, 100, 500])
    def test_matches_pairwise_oracle(self, n):
        rng = np.random.default_rng(n)
        scores = np.round(rng.normal(size=n), 2)  # rounding forces ties
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        assert abs(auroc(scores, labels) - auroc_oracle(scores, labels)) < 1e-12

    def test_invariance_under_increasing_transform(self):
        rng = np.random.default_rng(9)
        scores = rng.normal(size=200)
        labels = rng.integers(0, 2, 200)
        labels[:2] = [0, 1]
        base = auroc(scores, labels)
        assert auroc(np.exp(scores), labels) == base
        assert auroc(3.0 * scores + 7.0, labels) == base
        assert auroc(np.arctan(scores), labels) == base


class TestAupro:
    def test_perfect_heatmap(self):
        mask = np.zeros((8, 8))
        mask[2:5, 2:5] = 1
        assert aupro([mask.astype(float)], [mask], 0.3) == pytest.approx(1.0)

    def test_constant_heatmap_is_half_cap_normalized(self):
        mask = np.zeros((8, 8))
        mask[1:3, 1:3] = 1
        hm = np.full((8, 8), 0.5)
        assert aupro([hm], [mask], 1.0) == pytest.approx(0.5, abs=1e-12)
        assert aupro([hm], [mask], 0.3) == pytest.approx(0.15, abs=1e-12)

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_matches_threshold_sweep_oracle(self, seed):
        rng = np.random.default_rng(seed)
        mask = np.zeros((8, 8), dtype=int)
        mask[1:4, 2:5] = 1
        mask[6:8, 6:8] = 1
        hm = rng.uniform(size=(8, 8))
        for cap in (0.3, 1.0):
            assert abs(aupro([hm], [mask], cap)
                       - aupro_oracle([hm], [mask], cap)) < 1e-9

    def test_multiple_images(self):
        rng = np.random.default_rng(4)
        masks = []
        maps = []
        for _ in range(3):
            m = np.zeros((8, 8), dtype=int)
            m[rng.integers(0, 4):rng.integers(5, 8), 2:6] = 1
            masks.append(m)
            maps.append(rng.uniform(size=(8, 8)))
        assert abs(aupro(maps, masks, 0.3)
                   - aupro_oracle(maps, masks, 0.3)) < 1e-9

    def test_degenerates_to_pixel_auroc(self):
        # single region covering all anomalous pixels, cap 1
        rng = np.random.default_rng(5)
        mask = np.zeros((10, 10), dtype=int)
        mask[3:7, 3:7] = 1
        hm = rng.uniform(size=(10, 10))
        assert abs(aupro([hm], [mask], 1.0) - pixel_auroc([hm], [mask])) < 1e-9

    def test_no_region_rejected(self):
        with pytest.raises(DataError):
            aupro([np.ones((4, 4))], [np.zeros((4, 4))], 0.3)

    def test_four_connectivity(self):
        mask = np.zeros((4, 4), dtype=int)
        mask[0, 0] = 1
        mask[1, 1] = 1  # diagonal neighbors are distinct regions
        assert len(mask_regions(mask)) == 2
        mask[0, 1] = 1  # now they join
        assert len(mask_regions(mask)) == 1


class TestKappa:
    def test_half_recovered(self):
        assert kappa_improvement(0.8, 0.9) == pytest.approx(0.5)

    def test_no_change(self):
        assert kappa_improvement(0.6, 0.6) == 0.0

    def test_reported_scale(self):
        # arithmetic on a published-style AUROC pair
        assert kappa_improvement(0.7265, 0.7792) == pytest.approx(
            (0.7792 - 0.7265) / (1 - 0.7265), abs=1e-12)

    def test_perfect_base_undefined(self):
        assert np.isnan(kappa_improvement(1.0, 1.0))


class TestSpearman:
    def test_identical_orderings(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=50)
        assert spearman(x, x) == pytest.approx(1.0)

    def test_reversed_orderings(self):
        x = np.arange(20.0)
        assert spearman(x, -x) == pytest.approx(-1.0)

    def test_rank_difference_formula(self):
        # 1 - 6 * sum(d^2) / (n (n^2 - 1)) with d = (0, 1, 1, 0)
        assert spearman([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-12)

    def test_constant_input_undefined(self):
        assert np.isnan(spearman([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]))

    def test_antisymmetry(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=30)
        y = rng.normal(size=30)
        assert spearman(x, y) == pytest.approx(-spearman(x, -y), abs=1e-12)
