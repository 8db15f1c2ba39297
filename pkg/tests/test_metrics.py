import math

import numpy as np
import pytest

from physrec.errors import UsageError
from physrec.materials import Elastic, NewtonianFluid, Plasticine
from physrec.metrics import (METRICS_SCHEMA, PSNR_CAP, ScoreRow, param_error,
                             psnr, read_metrics, ssim, write_metrics)


def test_psnr_known_mse():
    a = np.full((8, 8, 3), 0.5)
    b = np.zeros((8, 8, 3))
    assert psnr(a, b) == pytest.approx(10 * math.log10(4.0), abs=1e-12)
    c = np.full((8, 8, 3), 0.1)
    assert psnr(c, np.zeros_like(c)) == pytest.approx(20.0, abs=1e-12)


def test_psnr_cap_and_clipping():
    a = np.random.default_rng(0).uniform(size=(6, 6, 3))
    assert psnr(a, a) == PSNR_CAP
    # out-of-range values are clipped before comparison
    assert psnr(np.full((4, 4), -0.5), np.zeros((4, 4))) == PSNR_CAP
    assert psnr(np.full((4, 4), 1.7), np.ones((4, 4))) == PSNR_CAP


def test_psnr_shape_mismatch():
    with pytest.raises(UsageError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_ssim_identical_is_one():
    img = np.random.default_rng(1).uniform(size=(16, 16, 3))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_images_analytic():
    # flat images have zero variance; score reduces to C1 / (mu1^2+mu2^2+C1)
    a = np.ones((16, 16))
    b = np.zeros((16, 16))
    want = 1e-4 / (1.0 + 1e-4)
    assert ssim(a, b) == pytest.approx(want, abs=1e-12)


def test_ssim_noise_lowers_score():
    gen = np.random.default_rng(2)
    img = gen.uniform(size=(20, 20, 3))
    noisy = np.clip(img + gen.normal(0, 0.2, img.shape), 0, 1)
    s = ssim(img, noisy)
    assert 0.0 < s < 0.95


def test_ssim_minimum_size():
    with pytest.raises(UsageError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_param_error_scales():
    est = Elastic(E=1.05e4, nu=0.33)
    tru = Elastic(E=1.0e4, nu=0.30)
    errs = param_error(est, tru)
    assert errs["log10_E"] == pytest.approx(math.log10(1.05), abs=1e-12)
    assert errs["nu"] == pytest.approx(0.03, abs=1e-12)
    assert set(errs) == {"log10_E", "nu"}


def test_param_error_zero_iff_identical():
    m = NewtonianFluid(mu=200.0, kappa=1e5)
    errs = param_error(m, NewtonianFluid(mu=200.0, kappa=1e5))
    assert all(v == 0.0 for v in errs.values())
    assert set(errs) == {"log10_mu", "log10_kappa"}


def test_param_error_variant_mismatch():
    with pytest.raises(UsageError):
        param_error(Elastic(E=1e4, nu=0.3), NewtonianFluid(mu=1.0, kappa=1e5))


def test_metrics_roundtrip(tmp_path):
    rows = [
        ScoreRow("blk", 1, "eval", loss=0.0123456789012345,
                 psnr=21.5, ssim=0.75,
                 param_errors={"log10_E": 0.1, "nu": 0.02}),
        ScoreRow("blk", 2, "eval", loss=0.01, psnr=23.0, ssim=0.8,
                 param_errors={"log10_E": 0.05, "nu": 0.01}),
    ]
    p = tmp_path / "metrics.csv"
    write_metrics(p, rows)
    text = p.read_text()
    assert text.startswith(METRICS_SCHEMA + "\n")
    assert "param:log10_E" in text and "param:nu" in text
    back = read_metrics(p)
    assert len(back) == 2
    for orig, rt in zip(rows, back):
        assert rt.scene_id == orig.scene_id
        assert rt.round == orig.round
        assert rt.stage == orig.stage
        assert rt.loss == orig.loss  # repr() round-trips float64 exactly
        assert rt.psnr == orig.psnr
        assert rt.param_errors == orig.param_errors


def test_metrics_missing_params_stay_absent(tmp_path):
    rows = [ScoreRow("a", 1, "static", loss=1.0, psnr=10.0, ssim=0.5),
            ScoreRow("a", 1, "eval", loss=0.5, psnr=12.0, ssim=0.6,
                     param_errors={"theta_fric": 0.2})]
    p = tmp_path / "m.csv"
    write_metrics(p, rows)
    back = read_metrics(p)
    assert back[0].param_errors == {}
    assert back[1].param_errors == {"theta_fric": 0.2}


def test_param_error_plasticine_keys():
    est = Plasticine(E=2e6, nu=0.3, tau_y=1.6e4)
    tru = Plasticine(E=2e6, nu=0.3, tau_y=1.54e4)
    errs = param_error(est, tru)
    assert set(errs) == {"log10_E", "log10_tau_y", "nu"}
    assert errs["log10_tau_y"] == pytest.approx(math.log10(1.6 / 1.54), abs=1e-12)
