"""Exposure-domain transform properties."""

import math

import numpy as np
import pytest
import torch

from hdrfuse.transforms import (GammaParams, exposure_adjust, hdr_to_ldr,
                                ldr_to_hdr, make_pretrain_targets,
                                make_six_channel_input, mu_law_tonemap)


class TestRoundTrips:
    def test_ldr_hdr_ldr_identity(self):
        rng = np.random.default_rng(0)
        for t in (1.0, 4.0, 16.0, 0.25):
            x = rng.uniform(0, 1, size=(17, 13, 3))
            back = hdr_to_ldr(ldr_to_hdr(x, t), t)
            assert np.allclose(back, x, atol=1e-6)

    def test_hdr_ldr_hdr_identity_unclipped(self):
        rng = np.random.default_rng(1)
        t = 4.0
        y = rng.uniform(0, 1.0 / t, size=(9, 9, 3))  # stays below clip
        back = ldr_to_hdr(hdr_to_ldr(y, t), t)
        assert np.allclose(back, y, atol=1e-6)

    def test_torch_matches_numpy(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0, 1, size=(8, 8, 3)).astype(np.float32)
        xt = torch.from_numpy(x)
        for fn in (lambda a: ldr_to_hdr(a, 4.0),
                   lambda a: hdr_to_ldr(a, 4.0),
                   lambda a: mu_law_tonemap(a)):
            got = fn(xt).numpy()
            assert np.allclose(got, fn(x), atol=1e-5)


class TestPseudoExposures:
    def test_first_target_is_input_bitexact(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(0, 1, size=(16, 16, 3)).astype(np.float32)
        targets = make_pretrain_targets(x, (1.0, 4.0, 16.0))
        assert targets[0] is x or np.array_equal(targets[0], x)

    def test_targets_get_brighter(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(0.05, 0.6, size=(12, 12, 3))
        t1, t2, t3 = make_pretrain_targets(x, (1.0, 4.0, 16.0))
        assert np.all(t2 >= t1 - 1e-12)
        assert np.all(t3 >= t2 - 1e-12)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(0, 1, size=(10, 10, 3))
        gamma = 2.2
        _, mid, _ = make_pretrain_targets(x, (1.0, 4.0, 16.0), gamma)
        expect = np.clip((x ** gamma * 4.0) ** (1 / gamma), 0, 1)
        assert np.allclose(mid, expect, atol=1e-12)

    def test_saturation_clips_to_one(self):
        x = np.full((4, 4, 3), 0.9)
        _, _, long = make_pretrain_targets(x, (1.0, 4.0, 16.0))
        assert np.all(long == 1.0)

    def test_exposure_adjust_rejects_bad_times(self):
        x = np.zeros((4, 4, 3))
        with pytest.raises(ValueError):
            exposure_adjust(x, 0.0, 4.0)
        with pytest.raises(ValueError):
            exposure_adjust(x, 1.0, -2.0)


class TestMuLaw:
    def test_endpoints_exact(self):
        assert mu_law_tonemap(np.array(0.0)) == 0.0
        assert mu_law_tonemap(np.array(1.0)) == 1.0

    def test_monotone(self):
        x = np.linspace(0, 1, 513)
        y = mu_law_tonemap(x)
        assert np.all(np.diff(y) > 0)

    def test_closed_form_value(self):
        # log(1 + 5000*0.5) / log(1 + 5000)
        got = float(mu_law_tonemap(np.array(0.5)))
        expect = math.log1p(2500.0) / math.log1p(5000.0)
        assert abs(got - expect) < 1e-12

    def test_compresses_highlights(self):
        lo = float(mu_law_tonemap(np.array(0.01)))
        assert lo > 0.4  # strong lift of dark values


class TestSixChannel:
    def test_layout_and_values(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(0, 1, size=(8, 8, 3))
        plane = make_six_channel_input(x, 4.0)
        assert plane.shape == (8, 8, 6)
        assert np.array_equal(plane[..., :3], x)
        assert np.allclose(plane[..., 3:], (x ** 2.2) / 4.0)

    def test_torch_input(self):
        x = torch.rand(8, 8, 3)
        plane = make_six_channel_input(x, 16.0)
        assert plane.shape == (8, 8, 6)


def test_gamma_params_validate():
    with pytest.raises(ValueError):
        GammaParams(gamma=0.0)
    with pytest.raises(ValueError):
        GammaParams(mu=-1.0)
