"""Differentiable volume rendering of a sampled density/color field, plus the
photometric losses (pixel loss, view-invariant loss, surface regularizer).

Quadrature: the ray segment [near, far] is split into step_count equal
intervals with one sample at each midpoint, piecewise-constant density and
color per interval:

    T_0 = 1,  T_{k+1} = T_k * exp(-sigma_k * ds),
    C = sum_k T_k * (1 - exp(-sigma_k * ds)) * c_k + c_bg * T_final.

Color samples pass through a sigmoid (raw features / MLP output are logits) so
each sample color is in [0,1]. Loss values use the unclamped composite;
clamping to [0,1] happens only at image export.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dfield

import numpy as np
import torch
import torch.nn.functional as tF

from . import precision
from .errors import UsageError
from .voxel_field import ActivationSpec, alpha_of

_DEFAULT_ACT = ActivationSpec()


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    pose: torch.Tensor  # 4x4 camera-to-world; camera looks along +z, y down
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise UsageError("focal lengths must be positive")
        if not self.near < self.far:
            raise UsageError("camera near must be < far")
        self.pose = precision.tt(self.pose)
        if tuple(self.pose.shape) != (4, 4):
            raise UsageError("pose must be 4x4")

    def rays(self, pixels=None):
        """Ray origins/directions for integer pixel coords [N,2] as (col,row).

        Defaults to every pixel in row-major order. Directions are unit."""
        dt = self.pose.dtype
        if pixels is None:
            xs = torch.arange(self.width, dtype=dt)
            ys = torch.arange(self.height, dtype=dt)
            gy, gx = torch.meshgrid(ys, xs, indexing="ij")
            pix = torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=-1)
        else:
            pix = torch.as_tensor(pixels, dtype=dt)
        d_cam = torch.stack([
            (pix[:, 0] + 0.5 - self.cx) / self.fx,
            (pix[:, 1] + 0.5 - self.cy) / self.fy,
            torch.ones(pix.shape[0], dtype=dt),
        ], dim=-1)
        d_world = d_cam @ self.pose[:3, :3].T
        d_world = d_world / d_world.norm(dim=-1, keepdim=True)
        o = self.pose[:3, 3].expand_as(d_world)
        return o, d_world

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "pose": np.asarray(self.pose.detach()).astype(float).reshape(-1).tolist(),
                "width": self.width, "height": self.height,
                "near": self.near, "far": self.far}

    @staticmethod
    def from_dict(d):
        return Camera(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]),
                      cy=float(d["cy"]),
                      pose=np.asarray(d["pose"], dtype=np.float64).reshape(4, 4),
                      width=int(d["width"]), height=int(d["height"]),
                      near=float(d["near"]), far=float(d["far"]))


@dataclass
class RenderConfig:
    step_count: int = 128
    background: tuple = (0.0, 0.0, 0.0)
    color_mode: str = "lambertian"  # or "view_mlp"
    random_dir_seed: int = 0

    def __post_init__(self):
        if self.step_count < 2:
            raise UsageError("step_count must be >= 2")
        if self.color_mode not in ("lambertian", "view_mlp"):
            raise UsageError(f"unknown color mode {self.color_mode!r}")
        self.background = tuple(float(c) for c in self.background)


def embed_directions(d: torch.Tensor, bands: int) -> torch.Tensor:
    """[d, sin(2^b d), cos(2^b d) for b in 0..bands-1]; width 3 + 6*bands."""
    parts = [d]
    for b in range(bands):
        f = float(2 ** b)
        parts.append(torch.sin(f * d))
        parts.append(torch.cos(f * d))
    return torch.cat(parts, dim=-1)


@dataclass
class ViewMlp:
    """Two-layer MLP: color logits from (raw feature, embedded direction)."""

    w1: torch.Tensor
    b1: torch.Tensor
    w2: torch.Tensor
    b2: torch.Tensor
    bands: int = 4

    def __post_init__(self):
        if self.feature_width < 1:
            raise UsageError("MLP input width must be D + embedding width")
        if self.w2.shape[0] != 3:
            raise UsageError("MLP output width must be 3")

    @property
    def feature_width(self) -> int:
        # solved from total input width
        return int(self.w1.shape[1] - (3 + 6 * self.bands))

    @property
    def hidden(self) -> int:
        return int(self.w1.shape[0])

    def __call__(self, feat: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
        inp = torch.cat([feat, embed_directions(dirs, self.bands)], dim=-1)
        h = torch.relu(inp @ self.w1.T + self.b1)
        return h @ self.w2.T + self.b2

    def leaves(self) -> dict:
        return {"mlp_w1": self.w1, "mlp_b1": self.b1,
                "mlp_w2": self.w2, "mlp_b2": self.b2}


def init_view_mlp(D: int, hidden: int = 128, bands: int = 4, seed: int = 0) -> ViewMlp:
    rng = precision.rng(seed, "view_mlp_init")
    din = D + 3 + 6 * bands
    dt = precision.dtype()
    w1 = torch.as_tensor(rng.normal(0, math.sqrt(2.0 / din), (hidden, din)), dtype=dt)
    w2 = torch.as_tensor(rng.normal(0, math.sqrt(2.0 / hidden), (3, hidden)), dtype=dt)
    return ViewMlp(w1=w1, b1=torch.zeros(hidden, dtype=dt),
                   w2=w2, b2=torch.zeros(3, dtype=dt), bands=bands)


def render_rays(sampler, origins, dirs, near, far, cfg: RenderConfig,
                mlp: ViewMlp = None, override_dirs: torch.Tensor = None,
                with_aux: bool = False):
    """Batched quadrature along rays. Returns RGBA [N,4] (alpha = 1 - T_final).

    with_aux additionally returns {"tau": total optical depth [N],
    "weights": per-sample compositing weights [N,K], "midpoints": sample
    depths [K]}. Alpha saturates (gradient dies once a ray is opaque) but
    optical depth stays linear in density, which is what empty-space
    supervision needs; the weights feed the ray-compactness penalty.

    override_dirs, if given, has shape [N, K, 3] and replaces the ray
    direction fed to the view MLP at every sample point (randomized view
    directions for the view-invariance penalty); geometry is unaffected.
    """
    K = cfg.step_count
    o = torch.as_tensor(origins)
    d = torch.as_tensor(dirs)
    dt = o.dtype
    ds = (far - near) / K
    s = near + (torch.arange(K, dtype=dt) + 0.5) * ds  # midpoints
    pts = o[:, None, :] + s[None, :, None] * d[:, None, :]  # [N,K,3]
    n_rays = pts.shape[0]
    sigma_raw, feat = sampler.raw_at(pts.reshape(-1, 3))
    sigma = tF.softplus(sigma_raw).reshape(n_rays, K)
    if cfg.color_mode == "view_mlp":
        if mlp is None:
            raise UsageError("view_mlp mode requires an MLP")
        if override_dirs is not None:
            mdirs = override_dirs.reshape(-1, 3).to(dt)
        else:
            mdirs = d[:, None, :].expand(n_rays, K, 3).reshape(-1, 3)
        logits = mlp(feat, mdirs)
    else:
        if feat.shape[-1] < 3:
            raise UsageError("lambertian mode needs >= 3 color features")
        logits = feat[:, :3]
    color = torch.sigmoid(logits).reshape(n_rays, K, 3)
    tau = sigma * ds
    # exclusive cumulative optical depth -> transmittance at each sample
    cum = torch.cumsum(tau, dim=1)
    T = torch.exp(-(cum - tau))
    alpha = 1.0 - torch.exp(-tau)
    w = T * alpha
    rgb = (w[:, :, None] * color).sum(dim=1)
    T_final = torch.exp(-cum[:, -1])
    bg = torch.as_tensor(cfg.background, dtype=dt)
    rgb = rgb + T_final[:, None] * bg
    out = torch.cat([rgb, (1.0 - T_final)[:, None]], dim=-1)
    if with_aux:
        return out, {"tau": cum[:, -1], "weights": w, "midpoints": s}
    return out


def ray_compactness(weights: torch.Tensor, midpoints: torch.Tensor,
                    ds: float) -> torch.Tensor:
    """Mean over rays of the weight-distribution spread
    sum_ij w_i w_j |s_i - s_j| + (1/3) sum_i w_i^2 ds.

    Multimodal weights along a ray (a floater in front of the object) pay
    for the gap between modes; a single compact surface pays almost
    nothing. Zero for empty rays."""
    gap = (midpoints[:, None] - midpoints[None, :]).abs()
    cross = torch.einsum("ni,ij,nj->n", weights, gap, weights)
    self_term = (weights ** 2).sum(-1) * (ds / 3.0)
    return (cross + self_term).mean()


def render_pixel(sampler, ray, cfg: RenderConfig, mlp: ViewMlp = None):
    """Single-ray contract: ray = (origin, direction, near, far) -> RGB."""
    o, d, near, far = ray
    out = render_rays(sampler, torch.as_tensor(o).reshape(1, 3),
                      torch.as_tensor(d).reshape(1, 3), float(near), float(far),
                      cfg, mlp)
    return out[0, :3]


def render_image(sampler, camera: Camera, cfg: RenderConfig, mlp: ViewMlp = None,
                 chunk: int = 16384) -> torch.Tensor:
    """Full-frame render -> [H, W, 4] (unclamped)."""
    o, d = camera.rays()
    outs = []
    for i in range(0, o.shape[0], chunk):
        outs.append(render_rays(sampler, o[i:i + chunk], d[i:i + chunk],
                                camera.near, camera.far, cfg, mlp))
    return torch.cat(outs, dim=0).reshape(camera.height, camera.width, 4)


def pixel_loss(pred, truth):
    """Mean over frames, mean over rays, sum over RGB channels of squared
    error. Accepts [N,C] for one frame or [F,N,C]; extra channels beyond RGB
    (alpha) are ignored."""
    p = pred if torch.is_tensor(pred) else precision.tt(pred)
    t = truth if torch.is_tensor(truth) else precision.tt(truth)
    if p.shape != t.shape:
        raise UsageError(f"pixel_loss shape mismatch: {tuple(p.shape)} vs {tuple(t.shape)}")
    if p.ndim == 2:
        p = p[None]
        t = t[None]
    if p.ndim != 3 or p.shape[-1] < 3:
        raise UsageError("pixel_loss expects [frames, rays, >=3 channels]")
    diff = p[..., :3] - t[..., :3]
    return (diff * diff).sum(dim=-1).mean(dim=-1).mean()


def sample_sphere_dirs(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform directions on S^2 (normalized Gaussians)."""
    v = rng.normal(size=(n, 3))
    v /= np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-12)
    return v


def view_invariant_loss(sampler, rays, truth, mlp: ViewMlp, cfg: RenderConfig,
                        seed: int, lam: float = 0.1):
    """L_pixel + lam * L_VI where L_VI re-renders the same rays with the MLP
    fed one fresh uniform-sphere direction per sample point."""
    if cfg.color_mode != "view_mlp":
        raise UsageError("view-invariant loss requires view_mlp color mode")
    o, d, near, far = rays
    t = truth if torch.is_tensor(truth) else precision.tt(truth)
    pred = render_rays(sampler, o, d, near, far, cfg, mlp)
    l_pix = pixel_loss(pred[:, :3], t[:, :3])
    rng = precision.rng(seed, "view_invariant_dirs")
    rand = sample_sphere_dirs(rng, o.shape[0] * cfg.step_count)
    rand = torch.as_tensor(rand, dtype=pred.dtype).reshape(o.shape[0], cfg.step_count, 3)
    pred_vi = render_rays(sampler, o, d, near, far, cfg, mlp, override_dirs=rand)
    l_vi = pixel_loss(pred_vi[:, :3], t[:, :3])
    return l_pix + lam * l_vi


def surface_regularizer(sigma_raw, dx: float, act: ActivationSpec = _DEFAULT_ACT):
    """sum_p clamp(alpha_p, 1e-4, 1e-1) * (dx/2)^2; empty input -> 0."""
    s = sigma_raw if torch.is_tensor(sigma_raw) else precision.tt(sigma_raw)
    if s.numel() == 0:
        return torch.zeros((), dtype=precision.dtype())
    a = alpha_of(s.reshape(-1), act)
    return (torch.clamp(a, 1e-4, 1e-1) * (dx / 2.0) ** 2).sum()
