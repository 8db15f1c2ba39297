"""Eulerian voxel grids: per-node density logits and raw color features,
trilinear sampling, and the density/alpha activations.

Lattice is node-centered: node (i,j,k) sits at origin + (i,j,k) * dx, so a
resolution of n nodes per axis spans (n - 1) * dx. Queries outside the lattice
return a large negative density logit surrogate (softplus underflows to zero
density) and zero color features; the surrogate is finite so adjoints stay
NaN-free.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as tF

from . import precision
from .errors import UsageError

OUT_OF_BOUNDS_LOGIT = -1.0e4


class Lattice(NamedTuple):
    """Minimal lattice description shared by fields, the bridge and the sim."""

    resolution: tuple
    dx: float
    origin: torch.Tensor


@dataclass
class ActivationSpec:
    density_activation: str = "softplus"
    alpha_step: float = 1.0  # path length folded into the alpha conversion

    def __post_init__(self):
        if self.density_activation != "softplus":
            raise UsageError(
                f"unknown density activation {self.density_activation!r}")
        if not self.alpha_step > 0:
            raise UsageError("alpha_step must be > 0")


@dataclass
class VoxelField:
    resolution: tuple  # (nx, ny, nz) node counts
    dx: float
    origin: torch.Tensor      # (3,)
    sigma_raw: torch.Tensor   # [nx, ny, nz] density logits
    color_feat: torch.Tensor  # [nx, ny, nz, D] raw color features

    def __post_init__(self):
        self.resolution = tuple(int(n) for n in self.resolution)
        if len(self.resolution) != 3 or any(n < 2 for n in self.resolution):
            raise UsageError(f"resolution must be 3 ints >= 2, got {self.resolution}")
        if not self.dx > 0:
            raise UsageError("dx must be > 0")
        if tuple(self.sigma_raw.shape) != self.resolution:
            raise UsageError("sigma_raw shape does not match resolution")
        if tuple(self.color_feat.shape[:3]) != self.resolution or self.color_feat.ndim != 4:
            raise UsageError("color_feat shape does not match resolution")

    @property
    def D(self) -> int:
        return int(self.color_feat.shape[3])

    @property
    def n_nodes(self) -> int:
        nx, ny, nz = self.resolution
        return nx * ny * nz

    def extent(self) -> torch.Tensor:
        n = torch.tensor([r - 1 for r in self.resolution], dtype=self.origin.dtype)
        return n * self.dx

    def node_positions(self) -> torch.Tensor:
        """All node coordinates, shape [nx*ny*nz, 3], x index slowest here
        (C order over [nx,ny,nz]); file layout is handled by storage."""
        nx, ny, nz = self.resolution
        ii = torch.arange(nx, dtype=self.origin.dtype)
        jj = torch.arange(ny, dtype=self.origin.dtype)
        kk = torch.arange(nz, dtype=self.origin.dtype)
        g = torch.stack(torch.meshgrid(ii, jj, kk, indexing="ij"), dim=-1)
        return (self.origin + g.reshape(-1, 3) * self.dx)

    def detached(self) -> "VoxelField":
        return VoxelField(self.resolution, self.dx, self.origin.detach().clone(),
                          self.sigma_raw.detach().clone(),
                          self.color_feat.detach().clone())

    @property
    def lattice(self) -> Lattice:
        return Lattice(self.resolution, self.dx, self.origin)

    # renderer sampler protocol
    def raw_at(self, x: torch.Tensor):
        return interp_raw(self, x)


def empty_field(resolution, dx, origin, D=3, sigma_fill=-6.0, color_fill=0.0) -> VoxelField:
    # fill keeps alpha(softplus(-6)) ~ 2.5e-3, under the 0.01 seeding
    # threshold, so never-observed nodes do not seed stray particles
    res = tuple(int(n) for n in resolution)
    dt = precision.dtype()
    return VoxelField(
        resolution=res,
        dx=float(dx),
        origin=precision.tt(origin),
        sigma_raw=torch.full(res, float(sigma_fill), dtype=dt),
        color_feat=torch.full(res + (int(D),), float(color_fill), dtype=dt),
    )


def trilinear_corners(lat, x: torch.Tensor):
    """Shared trilinear machinery for any lattice-like (resolution, dx, origin).

    Returns (corner flat indices [N,8], weights [N,8], inside mask [N]).
    Flat index order is C order over [nx,ny,nz]."""
    u = (x - lat.origin.to(x.dtype)) / lat.dx
    n = torch.tensor(lat.resolution, dtype=x.dtype)
    inside = ((u >= 0.0) & (u <= n - 1.0)).all(dim=-1)
    # clamp so outside queries index valid memory; their result is masked off
    uc = torch.minimum(torch.clamp(u, min=0.0), n - 1.0)
    base = torch.clamp(uc.detach().floor().long(),
                       max=torch.tensor([r - 2 for r in lat.resolution]))
    base = torch.clamp(base, min=0)
    f = uc - base.to(x.dtype)  # in [0,1]; grad d f / d x = 1/dx inside
    _, ny, nz = lat.resolution
    w_axis = torch.stack([1.0 - f, f], dim=-1)  # [N,3,2]
    idx = []
    wts = []
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                corner = (base + torch.tensor([a, b, c])).unbind(-1)
                idx.append((corner[0] * ny + corner[1]) * nz + corner[2])
                wts.append(w_axis[:, 0, a] * w_axis[:, 1, b] * w_axis[:, 2, c])
    return torch.stack(idx, dim=-1), torch.stack(wts, dim=-1), inside


def interp_raw(field: VoxelField, x):
    """Trilinear interpolation of raw node values at points x [..., 3].

    Returns (sigma_raw [...], color_feat [..., D]). Out-of-lattice points get
    the -1e4 logit surrogate and zero features. Total function, differentiable
    w.r.t. node values and x.
    """
    x = torch.as_tensor(x, dtype=field.sigma_raw.dtype)
    single = x.ndim == 1
    pts = x.reshape(-1, 3)
    idx, w, inside = trilinear_corners(field, pts)
    sig_flat = field.sigma_raw.reshape(-1)
    feat_flat = field.color_feat.reshape(-1, field.D)
    sigma = (sig_flat[idx] * w).sum(dim=-1)
    feat = (feat_flat[idx] * w.unsqueeze(-1)).sum(dim=-2)
    fill = torch.full_like(sigma, OUT_OF_BOUNDS_LOGIT)
    sigma = torch.where(inside, sigma, fill)
    feat = feat * inside.unsqueeze(-1).to(feat.dtype)
    if single:
        return sigma[0], feat[0]
    out_shape = x.shape[:-1]
    return sigma.reshape(out_shape), feat.reshape(out_shape + (field.D,))


def density_at(field: VoxelField, x, act: ActivationSpec):
    sigma_raw, _ = interp_raw(field, x)
    return tF.softplus(sigma_raw)


def alpha_of(sigma_raw, act: ActivationSpec):
    """Opacity of a sample: 1 - exp(-softplus(sigma_raw) * alpha_step)."""
    s = torch.as_tensor(sigma_raw, dtype=precision.dtype()) \
        if not torch.is_tensor(sigma_raw) else sigma_raw
    return 1.0 - torch.exp(-tF.softplus(s) * act.alpha_step)


def resample_field(field: VoxelField, new_resolution) -> VoxelField:
    """Trilinear resampling onto a new node count over the same extent.

    Coarse-to-fine static fits use this; dx is recomputed so the physical
    extent is preserved (all axes must agree on the new dx).
    """
    new_res = tuple(int(n) for n in new_resolution)
    ext = field.extent()
    dxs = [float(ext[a]) / (new_res[a] - 1) for a in range(3)]
    if max(dxs) - min(dxs) > 1e-9 * max(dxs):
        raise UsageError(f"resampling to {new_res} breaks cubic cells: dx per axis {dxs}")
    sig = field.sigma_raw.detach()[None, None]
    feat = field.color_feat.detach().permute(3, 0, 1, 2)[None]
    sig_up = tF.interpolate(sig, size=new_res, mode="trilinear", align_corners=True)
    feat_up = tF.interpolate(feat, size=new_res, mode="trilinear", align_corners=True)
    return VoxelField(
        resolution=new_res, dx=dxs[0], origin=field.origin.clone(),
        sigma_raw=sig_up[0, 0].contiguous(),
        color_feat=feat_up[0].permute(1, 2, 3, 0).contiguous(),
    )
