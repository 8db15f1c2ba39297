"""Forward MLS-MPM on a fixed lattice shared with the voxel field.

Physics transfers use the quadratic B-spline kernel (the feature bridge uses
trilinear weights; the two kernel families are deliberately distinct). One
substep is

    p2g_physics  : scatter mass and APIC momentum plus the stress impulse
                   -dt * V0 * 4/dx^2 * tau onto the grid
    grid_update  : momentum -> velocity, gravity, ground plane, domain guard
    g2p_physics  : gather velocity and affine C, advect, update F, plasticity

Appearance features (sigma_feat, color_feat) are never touched by the solver;
they ride with the particles unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dfield, replace

import numpy as np
import torch

from . import precision
from .errors import OutOfSupportError, SimulationUnstable, UsageError
from .materials import MaterialParams, kirchhoff_stress, return_map, sound_speed
from .voxel_field import Lattice


@dataclass
class ParticleSet:
    x: torch.Tensor           # [N,3]
    v: torch.Tensor           # [N,3]
    F: torch.Tensor           # [N,3,3]
    C: torch.Tensor           # [N,3,3]
    Jp: torch.Tensor          # [N] fluid volume ratio / plastic bookkeeping
    sigma_feat: torch.Tensor  # [N] appearance density logits
    color_feat: torch.Tensor  # [N,D] raw color features
    mass: float               # per-particle mass (uniform)
    volume0: float            # per-particle rest volume (uniform)

    def __post_init__(self):
        n = self.x.shape[0]
        shapes = {"x": (n, 3), "v": (n, 3), "F": (n, 3, 3), "C": (n, 3, 3),
                  "Jp": (n,), "sigma_feat": (n,)}
        for name, want in shapes.items():
            got = tuple(getattr(self, name).shape)
            if got != want:
                raise UsageError(f"ParticleSet.{name} shape {got}, want {want}")
        if self.color_feat.shape[0] != n or self.color_feat.ndim != 2:
            raise UsageError("ParticleSet.color_feat must be [N, D]")
        if not (self.mass > 0 and self.volume0 > 0):
            raise UsageError("mass and volume0 must be positive")

    @property
    def count(self) -> int:
        return int(self.x.shape[0])

    @property
    def D(self) -> int:
        return int(self.color_feat.shape[1])

    def detached(self) -> "ParticleSet":
        return ParticleSet(
            x=self.x.detach().clone(), v=self.v.detach().clone(),
            F=self.F.detach().clone(), C=self.C.detach().clone(),
            Jp=self.Jp.detach().clone(),
            sigma_feat=self.sigma_feat.detach().clone(),
            color_feat=self.color_feat.detach().clone(),
            mass=self.mass, volume0=self.volume0)


def fresh_particles(x, sigma_feat, color_feat, mass, volume0, v=None) -> ParticleSet:
    """Rest-state particle set: F = I, C = 0, Jp = 1."""
    x = x if torch.is_tensor(x) else precision.tt(x)
    n = x.shape[0]
    dt = x.dtype
    eye = torch.eye(3, dtype=dt).expand(n, 3, 3).contiguous()
    return ParticleSet(
        x=x,
        v=v if v is not None else torch.zeros(n, 3, dtype=dt),
        F=eye, C=torch.zeros(n, 3, 3, dtype=dt), Jp=torch.ones(n, dtype=dt),
        sigma_feat=sigma_feat if torch.is_tensor(sigma_feat) else precision.tt(sigma_feat),
        color_feat=color_feat if torch.is_tensor(color_feat) else precision.tt(color_feat),
        mass=float(mass), volume0=float(volume0))


@dataclass
class SimConfig:
    resolution: tuple
    dx: float
    origin: tuple = (0.0, 0.0, 0.0)
    dt: float = 1e-4
    substeps_per_frame: int = 10
    gravity: tuple = (0.0, -9.8, 0.0)
    ground_height: float = 0.0
    ground_mode: str = "sticky"        # or "separate"
    ground_friction: float = 0.0       # Coulomb mu_b for separate mode
    speed_limit: float = 100.0         # instability detector
    edge_margin: int = 2               # cells; outward velocity zeroed there
    cfl_fraction: float = 0.3

    def __post_init__(self):
        self.resolution = tuple(int(n) for n in self.resolution)
        if self.ground_mode not in ("sticky", "separate"):
            raise UsageError(f"unknown ground mode {self.ground_mode!r}")
        if not self.dt > 0:
            raise UsageError("dt must be positive")

    @property
    def lattice(self) -> Lattice:
        return Lattice(self.resolution, self.dx, precision.tt(self.origin))

    @property
    def n_nodes(self) -> int:
        nx, ny, nz = self.resolution
        return nx * ny * nz


def check_cfl(cfg: SimConfig, model, density: float) -> None:
    c = sound_speed(model, density)
    bound = cfg.cfl_fraction * cfg.dx / max(c, 1e-12)
    if cfg.dt > bound:
        raise UsageError(
            f"dt {cfg.dt:g} exceeds CFL bound {bound:g} "
            f"(dx {cfg.dx:g}, sound speed {c:g})")


def _bspline_weights(cfg: SimConfig, x: torch.Tensor):
    """Quadratic B-spline stencil. Returns (base [N,3] long, fx [N,3],
    weights list of 3 [N,3] tensors). Raises if any particle leaves the
    supported interior (one cell in from the boundary)."""
    origin = precision.tt(cfg.origin).to(x.dtype)
    u = (x - origin) / cfg.dx
    base = (u.detach() - 0.5).floor()
    n = torch.tensor(cfg.resolution, dtype=x.dtype)
    with torch.no_grad():
        ok = (base >= 0).all(-1) & ((base + 2) <= (n - 1)).all(-1)
        if not bool(ok.all()):
            idx = int((~ok).nonzero(as_tuple=True)[0][0])
            raise OutOfSupportError(
                f"particle {idx} at {x[idx].detach().tolist()} outside supported region",
                index=idx)
    fx = u - base
    w = [0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2]
    return base.long(), fx, w


def p2g_physics(particles: ParticleSet, cfg: SimConfig, model):
    """Scatter to the grid. Returns (grid_mom [G,3], grid_mass [G])."""
    mat = MaterialParams.of(model)
    x, v, F, C, Jp = particles.x, particles.v, particles.F, particles.C, particles.Jp
    base, fx, w = _bspline_weights(cfg, x)
    tau = kirchhoff_stress(mat, F, C, Jp)
    stress_aff = (-cfg.dt * particles.volume0 * 4.0 / (cfg.dx * cfg.dx)) * tau
    affine = stress_aff + particles.mass * C
    nx, ny, nz = cfg.resolution
    G = nx * ny * nz
    dt = x.dtype
    mom = torch.zeros(G, 3, dtype=dt)
    mass = torch.zeros(G, dtype=dt)
    mv = particles.mass * v
    for i in range(3):
        for j in range(3):
            for k in range(3):
                wt = w[i][:, 0] * w[j][:, 1] * w[k][:, 2]
                dpos = (torch.stack([
                    i - fx[:, 0], j - fx[:, 1], k - fx[:, 2]], dim=-1)) * cfg.dx
                idx = ((base[:, 0] + i) * ny + (base[:, 1] + j)) * nz + (base[:, 2] + k)
                contrib = wt[:, None] * (mv + torch.einsum("nab,nb->na", affine, dpos))
                mom = mom.index_add(0, idx, contrib)
                mass = mass.index_add(0, idx, wt * particles.mass)
    return mom, mass


def grid_update(grid_mom: torch.Tensor, grid_mass: torch.Tensor, cfg: SimConfig):
    """Momentum -> velocity, gravity, ground plane, domain-edge guard."""
    nx, ny, nz = cfg.resolution
    dt = grid_mom.dtype
    occupied = grid_mass > 0
    safe_mass = torch.where(occupied, grid_mass, torch.ones_like(grid_mass))
    v = grid_mom / safe_mass[:, None]
    g = torch.as_tensor(cfg.gravity, dtype=dt)
    v = v + cfg.dt * g
    v = torch.where(occupied[:, None], v, torch.zeros_like(v))

    ii = torch.arange(nx).reshape(nx, 1, 1).expand(nx, ny, nz).reshape(-1)
    jj = torch.arange(ny).reshape(1, ny, 1).expand(nx, ny, nz).reshape(-1)
    kk = torch.arange(nz).reshape(1, 1, nz).expand(nx, ny, nz).reshape(-1)
    node_y = float(cfg.origin[1]) + jj.to(dt) * cfg.dx
    below = node_y <= cfg.ground_height + 1e-12

    if cfg.ground_mode == "sticky":
        v = torch.where(below[:, None], torch.zeros_like(v), v)
    else:
        vn = v[:, 1]
        inward = below & (vn < 0)
        vt = torch.stack([v[:, 0], torch.zeros_like(vn), v[:, 2]], dim=-1)
        vt_norm = torch.clamp(torch.linalg.norm(vt, dim=-1), min=1e-12)
        scale = torch.clamp(1.0 - cfg.ground_friction * (-vn) / vt_norm, min=0.0)
        v_proj = vt * scale[:, None]
        v = torch.where(inward[:, None], v_proj, v)

    # keep material inside the lattice: zero outward components near faces
    m = cfg.edge_margin
    for axis, nn, idxs in ((0, nx, ii), (1, ny, jj), (2, nz, kk)):
        lo = (idxs < m) & (v[:, axis] < 0)
        hi = (idxs > nn - 1 - m) & (v[:, axis] > 0)
        comp = torch.where(lo | hi, torch.zeros_like(v[:, axis]), v[:, axis])
        v = torch.cat([v[:, :axis], comp[:, None], v[:, axis + 1:]], dim=1)
    return v


def g2p_physics(grid_v: torch.Tensor, particles: ParticleSet, cfg: SimConfig,
                model) -> ParticleSet:
    """Gather, advect, update F, apply the material's return map."""
    mat = MaterialParams.of(model)
    x = particles.x
    base, fx, w = _bspline_weights(cfg, x)
    nx, ny, nz = cfg.resolution
    dt = x.dtype
    n = particles.count
    v_new = torch.zeros(n, 3, dtype=dt)
    B = torch.zeros(n, 3, 3, dtype=dt)
    for i in range(3):
        for j in range(3):
            for k in range(3):
                wt = w[i][:, 0] * w[j][:, 1] * w[k][:, 2]
                dpos = (torch.stack([
                    i - fx[:, 0], j - fx[:, 1], k - fx[:, 2]], dim=-1)) * cfg.dx
                idx = ((base[:, 0] + i) * ny + (base[:, 1] + j)) * nz + (base[:, 2] + k)
                gv = grid_v[idx]
                v_new = v_new + wt[:, None] * gv
                B = B + wt[:, None, None] * torch.einsum("na,nb->nab", gv, dpos)
    C_new = 4.0 / (cfg.dx * cfg.dx) * B
    x_new = x + cfg.dt * v_new
    eye = torch.eye(3, dtype=dt)
    F_trial = (eye + cfg.dt * C_new) @ particles.F
    F_new, Jp_new, _ = return_map(mat, F_trial, particles.Jp, cfg.dt)
    return ParticleSet(
        x=x_new, v=v_new, F=F_new, C=C_new, Jp=Jp_new,
        sigma_feat=particles.sigma_feat, color_feat=particles.color_feat,
        mass=particles.mass, volume0=particles.volume0)


def substep(particles: ParticleSet, cfg: SimConfig, model) -> ParticleSet:
    mom, mass = p2g_physics(particles, cfg, model)
    v = grid_update(mom, mass, cfg)
    return g2p_physics(v, particles, cfg, model)


def _advance_frame_fn(cfg: SimConfig, mat: MaterialParams, n_sub: int,
                      sigma_feat, color_feat, mass, volume0):
    """Frame advance as a pure tensor function (checkpoint target)."""

    def fn(x, v, F, C, Jp, *mat_tensors):
        keys, _ = mat.flat_tensors()
        m = MaterialParams(mat.variant, dict(zip(keys, mat_tensors)))
        ps = ParticleSet(x=x, v=v, F=F, C=C, Jp=Jp, sigma_feat=sigma_feat,
                         color_feat=color_feat, mass=mass, volume0=volume0)
        for _ in range(n_sub):
            ps = substep(ps, cfg, m)
        return ps.x, ps.v, ps.F, ps.C, ps.Jp

    return fn


def simulate(particles: ParticleSet, cfg: SimConfig, model, n_frames: int,
             frame_dt: float, checkpoint: bool = False):
    """Forward-run n_frames and return per-frame snapshots [t_0 .. t_{N-1}];
    snapshot 0 is the initial state. frame_dt must equal
    dt * substeps_per_frame. With checkpoint=True the per-substep graph is
    recomputed in the backward sweep (memory O(frames * N_p))."""
    if abs(frame_dt - cfg.dt * cfg.substeps_per_frame) > 1e-9 * frame_dt:
        raise UsageError(
            f"frame_dt {frame_dt:g} != dt*substeps "
            f"{cfg.dt * cfg.substeps_per_frame:g}")
    mat = MaterialParams.of(model)
    density = particles.mass / particles.volume0
    check_cfl(cfg, mat, density)
    snaps = [particles]
    fn = _advance_frame_fn(cfg, mat, cfg.substeps_per_frame,
                           particles.sigma_feat, particles.color_feat,
                           particles.mass, particles.volume0)
    _, mat_tensors = mat.flat_tensors()
    ps = particles
    for f in range(1, n_frames):
        state = (ps.x, ps.v, ps.F, ps.C, ps.Jp)
        if checkpoint:
            out = torch.utils.checkpoint.checkpoint(
                fn, *state, *mat_tensors, use_reentrant=False,
                preserve_rng_state=False)
        else:
            out = fn(*state, *mat_tensors)
        ps = ParticleSet(x=out[0], v=out[1], F=out[2], C=out[3], Jp=out[4],
                         sigma_feat=particles.sigma_feat,
                         color_feat=particles.color_feat,
                         mass=particles.mass, volume0=particles.volume0)
        with torch.no_grad():
            speed = float(ps.v.detach().abs().max()) if ps.count else 0.0
            if not math.isfinite(speed) or speed > cfg.speed_limit:
                raise SimulationUnstable(
                    f"instability at frame {f}: max |v| component {speed:g} "
                    f"exceeds bound {cfg.speed_limit:g}",
                    frame=f, max_speed=speed)
        snaps.append(ps)
    return snaps
