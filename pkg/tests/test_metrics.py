"""Metric correctness against independent brute-force evaluations."""

import json
import math

import numpy as np
import pytest

from hdrfuse.metrics import (METRIC_KEYS, EvalReport, evaluate, mse, psnr,
                             sample_metrics, ssim)
from hdrfuse.transforms import mu_law_tonemap


def brute_psnr(a, b, peak=1.0):
    """Scalar re-computation with explicit accumulation."""
    total = 0.0
    count = 0
    for va, vb in zip(np.ravel(a), np.ravel(b)):
        total += (float(va) - float(vb)) ** 2
        count += 1
    return 10.0 * math.log10(peak * peak / (total / count))


def brute_ssim_channel(x, y, peak=1.0):
    """Direct windowed SSIM with explicit loops; mirrors the textbook
    formula independently of the library implementation."""
    k = 11
    sigma = 1.5
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    ax = np.arange(k) - (k - 1) / 2.0
    g1 = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g1, g1)
    w /= w.sum()
    h, wid = x.shape
    vals = []
    for i in range(h - k + 1):
        for j in range(wid - k + 1):
            px = x[i:i + k, j:j + k]
            py = y[i:i + k, j:j + k]
            mx = (w * px).sum()
            my = (w * py).sum()
            vx = (w * px * px).sum() - mx * mx
            vy = (w * py * py).sum() - my * my
            vxy = (w * px * py).sum() - mx * my
            vals.append(((2 * mx * my + c1) * (2 * vxy + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


class TestPsnr:
    def test_closed_form_20db(self):
        a = np.zeros((10, 10))
        b = np.full((10, 10), 0.1)  # MSE = 0.01
        assert abs(psnr(a, b) - 20.0) < 1e-9

    def test_exact_match_capped(self):
        a = np.random.default_rng(0).uniform(size=(16, 16, 3))
        assert psnr(a, a.copy()) == 99.0
        assert sample_metrics(a, a.copy())["exact"] is True

    def test_near_match_not_capped(self):
        a = np.zeros((64, 64))
        b = a.copy()
        b[0, 0] = 1e-7
        value = psnr(a, b)
        assert value != 99.0
        assert value > 99.0  # tiny error: reported as computed, no cap

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            a = rng.uniform(size=(9, 7, 3))
            b = rng.uniform(size=(9, 7, 3))
            assert abs(psnr(a, b) - brute_psnr(a, b)) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_bad_peak(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4)), np.zeros((4, 4)), peak=0.0)


class TestSsim:
    def test_identity_is_one(self):
        a = np.random.default_rng(2).uniform(size=(20, 20, 3))
        assert abs(ssim(a, a.copy()) - 1.0) < 1e-12

    def test_constant_shift_below_one(self):
        a = np.random.default_rng(3).uniform(0.2, 0.6, size=(24, 24))
        assert ssim(a, a + 0.2) < 1.0

    def test_symmetric(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(size=(16, 16, 3))
        b = rng.uniform(size=(16, 16, 3))
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-10

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            a = rng.uniform(size=(18, 15))
            b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
            assert abs(ssim(a, b) - brute_ssim_channel(a, b)) < 1e-6

    def test_multichannel_averages(self):
        rng = np.random.default_rng(6)
        a = rng.uniform(size=(16, 16, 3))
        b = rng.uniform(size=(16, 16, 3))
        per = [ssim(a[..., c], b[..., c]) for c in range(3)]
        assert abs(ssim(a, b) - np.mean(per)) < 1e-12

    def test_small_image_fallback_warns(self):
        a = np.random.default_rng(7).uniform(size=(6, 6))
        with pytest.warns(UserWarning, match="global statistics"):
            value = ssim(a, a.copy())
        assert abs(value - 1.0) < 1e-12


class TestSampleMetrics:
    def test_tonemapped_variants_tonemap_both(self):
        rng = np.random.default_rng(8)
        pred = rng.uniform(size=(16, 16, 3))
        gt = rng.uniform(size=(16, 16, 3))
        m = sample_metrics(pred, gt)
        expect = psnr(mu_law_tonemap(pred), mu_law_tonemap(gt))
        assert abs(m["psnr_mu"] - expect) < 1e-12

    def test_all_keys_present(self):
        a = np.random.default_rng(9).uniform(size=(16, 16, 3))
        m = sample_metrics(a, a)
        for key in METRIC_KEYS:
            assert key in m


class TestEvalReport:
    def test_means_are_arithmetic(self):
        rng = np.random.default_rng(10)
        report = EvalReport()
        for i in range(4):
            report.add(f"s{i}", rng.uniform(size=(16, 16, 3)),
                       rng.uniform(size=(16, 16, 3)))
        for key in METRIC_KEYS:
            expect = np.mean([s[key] for s in report.samples])
            assert abs(report.summary[key] - expect) < 1e-12

    def test_gt_vs_gt(self):
        gt = np.random.default_rng(11).uniform(size=(16, 16, 3))
        report = evaluate([("a", gt, gt.copy())])
        row = report.samples[0]
        assert row["psnr_l"] == 99.0
        assert abs(row["ssim_l"] - 1.0) < 1e-12
        assert row["exact"]

    def test_empty_report(self):
        report = evaluate([])
        assert report.samples == []
        assert math.isnan(report.summary["psnr_l"])

    def test_json_and_csv_outputs(self, tmp_path):
        rng = np.random.default_rng(12)
        report = evaluate([("x", rng.uniform(size=(16, 16, 3)),
                            rng.uniform(size=(16, 16, 3)))])
        jp = report.write_json(tmp_path / "m.json")
        cp = report.write_csv(tmp_path / "m.csv")
        data = json.loads(jp.read_text())
        assert data["samples"][0]["name"] == "x"
        lines = cp.read_text().strip().splitlines()
        assert lines[0].startswith("name,")
        assert lines[-1].startswith("mean,")
