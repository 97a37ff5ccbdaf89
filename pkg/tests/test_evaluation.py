from collections import deque

import numpy as np
import pytest

from npad.errors import ConfigError
from npad.evaluation import (
    auroc,
    connected_components,
    pro_curve,
    pro_score,
    upsample_map,
)


class TestUpsample:
    def test_constant_stays_constant(self):
        out = upsample_map(np.full((3, 3), 2.5), 9, 7)
        np.testing.assert_allclose(out, 2.5, atol=1e-12)

    def test_hand_bilinear_2x4(self):
        out = upsample_map(np.array([[0.0, 1.0], [0.0, 1.0]]), 2, 4)
        expected = np.array([[0.0, 1 / 3, 2 / 3, 1.0]] * 2)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_identity_dims(self):
        rng = np.random.default_rng(0)
        amap = rng.standard_normal((4, 5))
        np.testing.assert_allclose(upsample_map(amap, 4, 5), amap, atol=1e-12)

    def test_bounds_preserved(self):
        rng = np.random.default_rng(1)
        amap = rng.standard_normal((5, 5))
        out = upsample_map(amap, 17, 23)
        assert out.min() >= amap.min() - 1e-12
        assert out.max() <= amap.max() + 1e-12

    def test_single_row_input(self):
        out = upsample_map(np.array([[1.0, 3.0]]), 3, 4)
        assert out.shape == (3, 4)
        np.testing.assert_allclose(out[0], out[2], atol=1e-12)

    def test_downsample_rejected(self):
        with pytest.raises(ConfigError):
            upsample_map(np.zeros((4, 4)), 2, 4)


def _all_pairs_auroc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


class TestAuroc:
    def test_hand_instance(self):
        scores = np.array([0.1, 0.4, 0.35, 0.8])
        labels = np.array([0, 0, 1, 1])
        assert auroc(scores, labels) == pytest.approx(0.75, abs=1e-12)

    def test_perfect_separation(self):
        assert auroc(np.array([0.1, 0.2, 0.8, 0.9]), np.array([0, 0, 1, 1])) == 1.0

    def test_label_flip_complement(self):
        rng = np.random.default_rng(2)
        scores = rng.standard_normal(40)
        labels = rng.integers(0, 2, size=40)
        if labels.sum() in (0, 40):
            labels[0] = 1 - labels[0]
        assert auroc(scores, 1 - labels) == pytest.approx(
            1.0 - auroc(scores, labels), abs=1e-12
        )

    def test_matches_all_pairs_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            n = int(rng.integers(4, 101))
            # quantized scores force plenty of ties
            scores = np.round(rng.standard_normal(n), 1)
            labels = rng.integers(0, 2, size=n)
            if labels.sum() in (0, n):
                labels[0] = 1 - labels[0]
            assert auroc(scores, labels) == pytest.approx(
                _all_pairs_auroc(scores, labels), abs=1e-12
            )

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(4)
        scores = rng.standard_normal(50)
        labels = rng.integers(0, 2, size=50)
        labels[0], labels[1] = 0, 1
        assert auroc(np.exp(scores), labels) == pytest.approx(
            auroc(scores, labels), abs=1e-12
        )

    def test_single_class_rejected(self):
        with pytest.raises(ConfigError):
            auroc(np.array([0.1, 0.2]), np.array([1, 1]))


def _flood_fill_components(mask):
    """Independent 8-connectivity labeling oracle (BFS, row-major seeds)."""
    height, width = mask.shape
    labels = np.zeros((height, width), dtype=np.int64)
    current = 0
    for h in range(height):
        for w in range(width):
            if mask[h, w] == 1 and labels[h, w] == 0:
                current += 1
                queue = deque([(h, w)])
                labels[h, w] = current
                while queue:
                    ch, cw = queue.popleft()
                    for dh in (-1, 0, 1):
                        for dw in (-1, 0, 1):
                            nh, nw = ch + dh, cw + dw
                            if (
                                0 <= nh < height
                                and 0 <= nw < width
                                and mask[nh, nw] == 1
                                and labels[nh, nw] == 0
                            ):
                                labels[nh, nw] = current
                                queue.append((nh, nw))
    return labels, current


class TestConnectedComponents:
    def test_empty_mask(self):
        labels, n = connected_components(np.zeros((3, 3), dtype=int))
        assert n == 0
        assert labels.sum() == 0

    def test_diagonal_touch_is_one_component(self):
        mask = np.zeros((3, 3), dtype=int)
        mask[0, 0] = mask[1, 1] = 1
        _, n = connected_components(mask)
        assert n == 1

    def test_checkerboard_is_one_component(self):
        mask = np.indices((4, 4)).sum(axis=0) % 2
        labels, n = connected_components(mask)
        oracle_labels, oracle_n = _flood_fill_components(mask)
        assert n == oracle_n == 1
        np.testing.assert_array_equal(labels, oracle_labels)

    def test_matches_flood_fill_oracle_random(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            mask = (rng.random((8, 8)) < 0.35).astype(int)
            labels, n = connected_components(mask)
            oracle_labels, oracle_n = _flood_fill_components(mask)
            assert n == oracle_n
            np.testing.assert_array_equal(labels, oracle_labels)

    def test_first_seen_label_order(self):
        mask = np.zeros((4, 4), dtype=int)
        mask[0, 3] = 1  # first in row-major order
        mask[2, 0] = 1
        labels, n = connected_components(mask)
        assert n == 2
        assert labels[0, 3] == 1
        assert labels[2, 0] == 2

    def test_bad_values_rejected(self):
        with pytest.raises(ConfigError):
            connected_components(np.array([[0, 2]]))


class TestProScore:
    def test_perfect_scorer(self):
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[2:5, 2:5] = 1
        assert pro_score([mask.astype(float)], [mask]) == pytest.approx(1.0)

    def test_hand_instance_three_thresholds(self):
        # component pixels score {0.9, 0.15}, nominal {0.1, 0.8};
        # thresholds are the 0/50/100% quantiles of the pooled scores
        # (0.9, 0.475, 0.1), giving curve points (0,.5), (.5,.5), (1,1)
        # after the (0,0) anchor; the trapezoid up to fpr 0.3 is
        # 0.3 * 0.5 = 0.15, normalized 0.15/0.3 = 0.5
        amap = np.array([[0.9, 0.15], [0.1, 0.8]])
        mask = np.array([[1, 1], [0, 0]])
        got = pro_score([amap], [mask], fpr_cap=0.3, n_thresholds=3)
        assert got == pytest.approx(0.5, abs=1e-9)

    def test_random_scores_near_chance_level(self):
        # chance curve is overlap ~= fpr, so the normalized area up to the
        # cap is cap/2; averaged over fixed seeds this is tightly centered
        values = []
        for seed in range(5):
            rng = np.random.default_rng(100 + seed)
            amap = rng.random((32, 32))
            mask = np.zeros((32, 32), dtype=np.uint8)
            mask[:, :16] = 1
            values.append(pro_score([amap], [mask]))
        assert np.mean(values) == pytest.approx(0.15, abs=0.05)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(6)
        amap = rng.random((10, 10))
        mask = (rng.random((10, 10)) < 0.3).astype(np.uint8)
        mask[0, 0] = 1
        a = pro_score([amap], [mask])
        b = pro_score([np.exp(3.0 * amap)], [mask])
        assert a == pytest.approx(b, abs=1e-12)

    def test_bounded_zero_one(self):
        rng = np.random.default_rng(7)
        for seed in range(5):
            amap = rng.random((12, 12))
            mask = (rng.random((12, 12)) < 0.2).astype(np.uint8)
            mask[3, 3] = 1
            value = pro_score([amap], [mask])
            assert 0.0 <= value <= 1.0

    def test_quadrature_stability(self):
        rng = np.random.default_rng(8)
        maps, masks = [], []
        for _ in range(4):
            amap = rng.random((24, 24))
            mask = np.zeros((24, 24), dtype=np.uint8)
            r0, c0 = rng.integers(0, 16, size=2)
            mask[r0 : r0 + 6, c0 : c0 + 6] = 1
            amap[mask == 1] += 0.8
            maps.append(amap)
            masks.append(mask)
        coarse = pro_score(maps, masks, n_thresholds=200)
        fine = pro_score(maps, masks, n_thresholds=2000)
        assert abs(coarse - fine) < 1e-3

    def test_no_anomalies_rejected(self):
        with pytest.raises(ConfigError):
            pro_score([np.random.default_rng(0).random((4, 4))], [np.zeros((4, 4), int)])

    def test_curve_anchored_and_monotone(self):
        rng = np.random.default_rng(9)
        amap = rng.random((10, 10))
        mask = np.zeros((10, 10), dtype=np.uint8)
        mask[4:7, 4:7] = 1
        fprs, overlaps = pro_curve([amap], [mask])
        assert fprs[0] == 0.0 and overlaps[0] == 0.0
        assert np.all(np.diff(fprs) >= -1e-12)
        assert np.all(np.diff(overlaps) >= -1e-12)
        assert fprs[-1] == pytest.approx(1.0)
