"""Pseudo-label selection: masks, scores, threshold, weights, records."""

import json

import numpy as np
import pytest

from hdrfuse.selection import (SelectionRecord, assign_weights,
                               compute_threshold, pooled_selection_losses,
                               selection_loss, well_exposed_mask)
from hdrfuse.transforms import mu_law_tonemap


class TestWellExposedMask:
    def test_strict_bounds(self):
        frame = np.array([[[0.05, 0.5, 0.5], [0.06, 0.5, 0.5]],
                          [[0.5, 0.95, 0.5], [0.5, 0.94, 0.5]]])
        mask = well_exposed_mask(frame)
        assert not mask[0, 0]  # channel at the lower bound excluded
        assert mask[0, 1]
        assert not mask[1, 0]  # upper bound excluded
        assert mask[1, 1]

    def test_multiple_frames_intersect(self):
        a = np.full((4, 4, 3), 0.5)
        b = np.full((4, 4, 3), 0.5)
        b[0, 0] = 0.99
        mask = well_exposed_mask([a, b])
        assert not mask[0, 0]
        assert mask[1:].all()

    def test_bad_thresholds(self):
        frame = np.full((2, 2, 3), 0.5)
        with pytest.raises(ValueError):
            well_exposed_mask(frame, eps_low=0.9, eps_high=0.1)


class TestSelectionLoss:
    def test_zero_for_identical(self):
        a = np.random.default_rng(0).uniform(size=(8, 8, 3))
        assert selection_loss(a, a.copy()) == 0.0

    def test_matches_direct_computation(self):
        rng = np.random.default_rng(1)
        pred = rng.uniform(size=(8, 8, 3))
        pseudo = rng.uniform(size=(8, 8, 3))
        valid = rng.uniform(size=(8, 8)) > 0.5
        got = selection_loss(pred, pseudo, valid)
        diff = np.abs(mu_law_tonemap(pred) - mu_law_tonemap(pseudo))
        assert abs(got - diff[valid].mean()) < 1e-12

    def test_unselectable_is_nan(self):
        a = np.zeros((4, 4, 3))
        valid = np.zeros((4, 4), dtype=bool)
        assert np.isnan(selection_loss(a, a, valid))

    def test_pooled_grid(self):
        rng = np.random.default_rng(2)
        pred = rng.uniform(size=(8, 8, 3))
        pseudo = rng.uniform(size=(8, 8, 3))
        cells = pooled_selection_losses(pred, pseudo, pool=4)
        assert cells.shape == (4,)
        direct = selection_loss(pred[:4, :4], pseudo[:4, :4])
        assert abs(cells[0] - direct) < 1e-12

    def test_pool_must_divide(self):
        a = np.zeros((8, 8, 3))
        with pytest.raises(ValueError):
            pooled_selection_losses(a, a, pool=3)


class TestThreshold:
    def test_reference_percentile(self):
        # 85th percentile of {1..100} under linear interpolation
        pool = np.arange(1, 101, dtype=float)
        assert abs(compute_threshold(pool, beta=85.0) - 85.15) < 1e-12

    def test_monotone_in_beta(self):
        rng = np.random.default_rng(3)
        losses = rng.uniform(size=200)
        taus = [compute_threshold(losses, b) for b in (10, 30, 50, 70, 90)]
        assert all(a <= b for a, b in zip(taus, taus[1:]))

    def test_ignores_nan(self):
        losses = [1.0, 2.0, float("nan"), 3.0]
        tau = compute_threshold(losses, beta=100.0)
        assert tau == 3.0

    def test_empty_pool_raises(self):
        with pytest.raises(ValueError):
            compute_threshold([float("nan")])

    def test_bad_beta(self):
        with pytest.raises(ValueError):
            compute_threshold([1.0], beta=0.0)
        with pytest.raises(ValueError):
            compute_threshold([1.0], beta=101.0)


class TestWeights:
    def test_one_below_threshold(self):
        losses = np.array([0.1, 0.2, 0.5, 1.0])
        w = assign_weights(losses, tau=0.5)
        assert w[0] == 1.0 and w[1] == 1.0 and w[2] == 1.0

    def test_zero_at_max(self):
        losses = np.array([0.1, 0.5, 1.0])
        w = assign_weights(losses, tau=0.2)
        assert w[-1] == 0.0

    def test_linear_between(self):
        losses = np.array([0.0, 0.5, 0.75, 1.0])
        tau = 0.5
        w = assign_weights(losses, tau)
        m = 1.0
        assert abs(w[2] - (m - 0.75) / (m - tau)) < 1e-12

    def test_all_one_when_max_within(self):
        losses = np.array([0.1, 0.2, 0.3])
        assert np.all(assign_weights(losses, tau=0.3) == 1.0)

    def test_nan_gets_zero(self):
        w = assign_weights([0.1, float("nan"), 0.9], tau=0.2)
        assert w[1] == 0.0
        assert w[0] == 1.0

    def test_bounded(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            losses = rng.uniform(size=20)
            tau = float(rng.uniform(0, 1))
            w = assign_weights(losses, tau)
            assert np.all(w >= 0.0) and np.all(w <= 1.0)

    def test_all_nan(self):
        w = assign_weights([float("nan")] * 3, tau=0.5)
        assert np.all(w == 0.0)


class TestSelectionRecord:
    def test_json_round_trip(self, tmp_path):
        rec = SelectionRecord.build(
            timestep=2, beta=85.0, tau=0.3,
            labeled_losses=[0.1, 0.2],
            sample_ids=["u_0", "u_1", "u_2"],
            unlabeled_losses=[0.05, float("nan"), 0.9],
            weights=[1.0, 0.0, 0.2])
        path = rec.write(tmp_path / "timestep_2.json")
        data = json.loads(path.read_text())
        assert data["timestep"] == 2
        assert data["tau"] == 0.3
        assert data["samples"][0] == {"id": "u_0", "loss": 0.05,
                                      "weight": 1.0, "selectable": True}
        assert data["samples"][1]["loss"] is None
        assert not data["samples"][1]["selectable"]
        assert data["n_full_weight"] == 1
        assert data["n_partial_weight"] == 1

    def test_misaligned_lengths(self):
        with pytest.raises(ValueError):
            SelectionRecord.build(0, 85.0, 0.1, [], ["a"], [0.1, 0.2], [1.0])
