"""Image quality scores (PSNR, SSIM) and material parameter errors, plus the
metrics.csv schema used by the run reports.

Parameter errors follow the identification scales: absolute log10 difference
for moduli / viscosity / yield stress, plain absolute difference for nu, and
radians for the friction angle.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve

from .errors import UsageError
from .materials import LIN_PARAMS, LOG_PARAMS, MaterialModel, variant_of

PSNR_CAP = 99.0
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


def _as_image(a) -> np.ndarray:
    img = np.asarray(a, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise UsageError("image must be [H,W] or [H,W,C]")
    return img


def psnr(pred, truth) -> float:
    """10 log10(1 / MSE) for [0,1] images; identical images hit the 99 dB cap."""
    p, t = _as_image(pred), _as_image(truth)
    if p.shape != t.shape:
        raise UsageError(f"psnr shape mismatch {p.shape} vs {t.shape}")
    mse = float(np.mean((np.clip(p, 0, 1) - np.clip(t, 0, 1)) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_kernel2d(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(pred, truth) -> float:
    """Reference windowed SSIM: 11x11 Gaussian (sigma 1.5), C1=(0.01)^2,
    C2=(0.03)^2, dynamic range 1; valid-region mean over windows/channels."""
    p, t = _as_image(pred), _as_image(truth)
    if p.shape != t.shape:
        raise UsageError(f"ssim shape mismatch {p.shape} vs {t.shape}")
    H, W = p.shape[:2]
    if H < _SSIM_WINDOW or W < _SSIM_WINDOW:
        raise UsageError(f"ssim needs images at least {_SSIM_WINDOW} px per side")
    k = _gaussian_kernel2d(_SSIM_WINDOW, _SSIM_SIGMA)
    pad = _SSIM_WINDOW // 2
    vals = []
    for c in range(p.shape[2]):
        x, y = p[:, :, c], t[:, :, c]
        mu_x = convolve(x, k, mode="constant")
        mu_y = convolve(y, k, mode="constant")
        xx = convolve(x * x, k, mode="constant")
        yy = convolve(y * y, k, mode="constant")
        xy = convolve(x * y, k, mode="constant")
        var_x = xx - mu_x * mu_x
        var_y = yy - mu_y * mu_y
        cov = xy - mu_x * mu_y
        s = ((2 * mu_x * mu_y + _C1) * (2 * cov + _C2)) / \
            ((mu_x ** 2 + mu_y ** 2 + _C1) * (var_x + var_y + _C2))
        vals.append(s[pad:H - pad, pad:W - pad])  # valid windows only
    return float(np.mean(vals))


def param_error(estimated: MaterialModel, truth: MaterialModel) -> dict:
    """Per-parameter absolute errors on the identification scales."""
    ve, vt = variant_of(estimated), variant_of(truth)
    if ve != vt:
        raise UsageError(f"material variant mismatch: {ve} vs {vt}")
    errs = {}
    for p in LOG_PARAMS[ve]:
        errs[f"log10_{p}"] = abs(math.log10(getattr(estimated, p))
                                 - math.log10(getattr(truth, p)))
    for p in LIN_PARAMS[ve]:
        errs[p] = abs(getattr(estimated, p) - getattr(truth, p))
    return errs


@dataclass
class ScoreRow:
    scene_id: str
    round: int
    stage: str
    loss: float = float("nan")
    psnr: float = float("nan")
    ssim: float = float("nan")
    param_errors: dict = field(default_factory=dict)


METRICS_SCHEMA = "# metrics schema v1: scene_id,round,stage,loss,psnr,ssim,param:<name>..."


def write_metrics(path, rows) -> None:
    param_cols = sorted({k for r in rows for k in r.param_errors})
    header = ["scene_id", "round", "stage", "loss", "psnr", "ssim"] + \
        [f"param:{c}" for c in param_cols]
    with open(path, "w", newline="") as fh:
        fh.write(METRICS_SCHEMA + "\n")
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([r.scene_id, r.round, r.stage,
                        repr(float(r.loss)), repr(float(r.psnr)), repr(float(r.ssim))]
                       + [repr(float(r.param_errors[c])) if c in r.param_errors else ""
                          for c in param_cols])


def read_metrics(path):
    rows = []
    with open(path) as fh:
        text = [ln for ln in fh if not ln.startswith("#")]
    rd = csv.DictReader(io.StringIO("".join(text)))
    for rec in rd:
        errs = {k.split(":", 1)[1]: float(v) for k, v in rec.items()
                if k.startswith("param:") and v not in ("", None)}
        rows.append(ScoreRow(
            scene_id=rec["scene_id"], round=int(rec["round"]), stage=rec["stage"],
            loss=float(rec["loss"]), psnr=float(rec["psnr"]),
            ssim=float(rec["ssim"]), param_errors=errs))
    return rows
