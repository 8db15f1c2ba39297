"""Optimization stages and the round-based geometry/physics loop.

Stage order per round: static field fit (frame 0) -> particle seeding ->
shared initial-velocity fit -> material parameter fit (warm-up on the first
half of the frames, then all frames) -> Lagrangian particle refinement ->
synthesis of the held-out ring views at frame 0. Round 1 fits the static
field from real observations only; later rounds add the previous round's
synthesized frame-0 images to the static stage and nowhere else.

Every stage draws randomness through seeds derived from (run seed, stage tag,
round, iteration), so a resumed or re-run stage reproduces bit-identical
results in serial mode.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field as dfield, replace

import numpy as np
import torch

from . import figures, images as imgio, precision
from .adjoint import Tape, backward
from .bridge import SeedSpec, g2p_features, p2g_features, seed_particles
from .errors import PhysrecError, StageError, UsageError
from .materials import (LIN_BOUNDS, LIN_PARAMS, LOG_PARAMS, MaterialParams,
                        model_from_dict, model_to_dict, variant_of)
from .metrics import ScoreRow, param_error, psnr, ssim, write_metrics
from .mpm import ParticleSet, SimConfig, simulate
from .optim import Adam
from .render import (Camera, RenderConfig, ViewMlp, init_view_mlp, pixel_loss,
                     ray_compactness, render_image, render_rays,
                     sample_sphere_dirs, surface_regularizer)
from .scenes import Dataset, split_views
from .storage import (load_field, load_json, load_particles, save_field,
                      save_json, save_particles, sha256_file)
from .voxel_field import (ActivationSpec, Lattice, VoxelField, density_at,
                          empty_field, resample_field)

_ACT = ActivationSpec()


# ---------------------------------------------------------------------------
# stage configuration


@dataclass
class StaticConfig:
    iterations: int = 2000
    # coarse-to-fine: intermediate node counts fitted before the final
    # lattice resolution. Few-view fits need the coarse stages; a flat-
    # resolution fit has enough freedom to scatter matter through the
    # visual hull instead of converging on the object.
    resolution_schedule: tuple = (4, 8, 12)
    scale_iterations: tuple = (900, 1200, 1500)
    surf_weight: float = 1e-3
    surf_schedule: bool = True
    vi_lambda: float = 0.1
    # opacity supervision against the observations' alpha channel (or object
    # masks, when that is what the capture provides). Density colored like
    # the background is invisible to the color loss alone, so without this
    # term free space silts up with background-colored matter that the
    # seeding stage then converts to spurious mass.
    alpha_weight: float = 1.0
    # optical-depth pressure on rays the observation marks empty. The alpha
    # term saturates once a ray turns opaque; depth is linear in density, so
    # fog on empty rays keeps feeling it.
    depth_weight: float = 0.1
    # ray-compactness pressure; suppresses floaters between the cameras and
    # the object, which few-view fits otherwise leave inside the visual hull
    dist_weight: float = 0.01
    lr_sigma: float = 0.1
    lr_color: float = 0.1
    lr_mlp: float = 1e-3
    ray_batch: int = 0                # 0 -> every pixel each iteration


@dataclass
class VelocityConfig:
    frames: int = 4
    iterations: int = 30
    lr: float = 0.3
    ray_batch: int = 0


@dataclass
class PhysicsConfig:
    warmup_iterations: int = 30
    main_iterations: int = 40
    warmup_frames: int = 0            # 0 -> ceil(N/2)
    lr_log: float = 0.1
    lr_lin: float = 0.01
    ray_batch: int = 0


@dataclass
class LpoConfig:
    iterations: int = 100
    feature_lr: float = 0.1
    position_lr_scale: float = 1.0 / 32.0   # position lr = scale * dx
    mode: str = "full"
    betas: tuple = (0.9, 0.999)
    ray_batch: int = 0

    def __post_init__(self):
        if self.mode not in ("full", "features_only", "positions_only",
                             "grid_only", "none"):
            raise UsageError(f"unknown lpo mode {self.mode!r}")


@dataclass
class LoopConfig:
    rounds: int = 4
    synth_views: int = 0              # 0 -> every non-training ring view


@dataclass
class StageConfig:
    static: StaticConfig = dfield(default_factory=StaticConfig)
    velocity: VelocityConfig = dfield(default_factory=VelocityConfig)
    physics: PhysicsConfig = dfield(default_factory=PhysicsConfig)
    lpo: LpoConfig = dfield(default_factory=LpoConfig)
    loop: LoopConfig = dfield(default_factory=LoopConfig)

    def to_dict(self) -> dict:
        return {k: asdict(getattr(self, k)) for k in
                ("static", "velocity", "physics", "lpo", "loop")}

    @staticmethod
    def from_dict(d: dict) -> "StageConfig":
        def mk(cls, key):
            sub = dict(d.get(key, {}))
            for name in ("resolution_schedule", "scale_iterations", "betas"):
                if name in sub and sub[name] is not None:
                    sub[name] = tuple(tuple(v) if isinstance(v, list) else v
                                      for v in sub[name]) \
                        if name == "resolution_schedule" else tuple(sub[name])
            return cls(**sub)

        return StageConfig(static=mk(StaticConfig, "static"),
                           velocity=mk(VelocityConfig, "velocity"),
                           physics=mk(PhysicsConfig, "physics"),
                           lpo=mk(LpoConfig, "lpo"),
                           loop=mk(LoopConfig, "loop"))


@dataclass
class RunConfig:
    stages: StageConfig = dfield(default_factory=StageConfig)
    seed: int = 0
    train_views: int = 3
    split_seed: int = None
    step_count: int = 96
    background: tuple = None          # None -> the dataset's own background
    color_mode: str = "lambertian"
    mlp_hidden: int = 128
    particles_per_cell: int = 8
    alpha_threshold: float = 0.01
    carve_tau: float = 1e-3           # 0 disables occlusion-shadow carving
    keep_largest: bool = True         # drop disconnected seed clumps
    density: float = 1000.0
    fit_substeps: int = 0             # 0 -> dataset's own substep count
    init_material: dict = None
    param_bounds: dict = None         # name -> [lo, hi], natural units

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "seed", "train_views", "split_seed", "step_count", "color_mode",
            "mlp_hidden", "particles_per_cell", "alpha_threshold", "carve_tau",
            "keep_largest", "density", "fit_substeps", "init_material",
            "param_bounds")}
        d["background"] = None if self.background is None \
            else list(self.background)
        d["stages"] = self.stages.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        kw = dict(d)
        kw["stages"] = StageConfig.from_dict(d.get("stages", {}))
        if kw.get("background") is not None:
            kw["background"] = tuple(kw["background"])
        return RunConfig(**kw)

    def render_config(self, scene_background=None) -> RenderConfig:
        bg = self.background if self.background is not None \
            else (scene_background or (0.0, 0.0, 0.0))
        return RenderConfig(step_count=self.step_count, background=tuple(bg),
                            color_mode=self.color_mode)

    @property
    def feature_width(self) -> int:
        return 6 if self.color_mode == "view_mlp" else 3


_DEFAULT_INITS = {
    "elastic": {"type": "elastic", "E": 1e5, "nu": 0.2},
    "newtonian": {"type": "newtonian", "mu": 1e3, "kappa": 3e5},
    "non_newtonian": {"type": "non_newtonian", "mu": 1e4, "kappa": 1e6,
                      "tau_y": 1e3, "eta": 10.0},
    "plasticine": {"type": "plasticine", "E": 1e6, "nu": 0.2, "tau_y": 1e4},
    "granular": {"type": "granular", "theta_fric": math.radians(30.0)},
}


# ---------------------------------------------------------------------------
# material parameter space (log10 for positive-scale params, linear otherwise)


class ParamSpace:
    def __init__(self, model, bounds: dict = None):
        from dataclasses import fields as dc_fields
        self.variant = variant_of(model)
        self.log_names = LOG_PARAMS[self.variant]
        self.lin_names = LIN_PARAMS[self.variant]
        optimized = set(self.log_names) | set(self.lin_names)
        self.fixed = {f.name: float(getattr(model, f.name))
                      for f in dc_fields(model) if f.name not in optimized}
        self.leaves = {}
        for n in self.log_names:
            self.leaves["log10_" + n] = precision.tt(
                math.log10(float(getattr(model, n))), requires_grad=True)
        for n in self.lin_names:
            self.leaves[n] = precision.tt(float(getattr(model, n)),
                                          requires_grad=True)
        self.bounds = dict(bounds or {})

    def material(self) -> MaterialParams:
        p = {}
        for n in self.log_names:
            p[n] = 10.0 ** self.leaves["log10_" + n]
        for n in self.lin_names:
            p[n] = self.leaves[n]
        for n, v in self.fixed.items():
            p[n] = precision.tt(v)
        return MaterialParams(self.variant, p)

    def to_model(self):
        return self.material().to_model()

    def project(self) -> int:
        """Clamp leaves back into validity/configured bounds; returns the
        number of projected leaves."""
        hits = 0
        with torch.no_grad():
            for n in self.lin_names:
                lo, hi = LIN_BOUNDS.get(n, (-math.inf, math.inf))
                if n in self.bounds:
                    lo, hi = max(lo, self.bounds[n][0]), min(hi, self.bounds[n][1])
                v = self.leaves[n]
                c = torch.clamp(v, lo, hi)
                if bool((c != v).any()):
                    hits += 1
                v.copy_(c)
            for n in self.log_names:
                if n not in self.bounds:
                    continue
                lo, hi = self.bounds[n]
                v = self.leaves["log10_" + n]
                c = torch.clamp(v, math.log10(lo), math.log10(hi))
                if bool((c != v).any()):
                    hits += 1
                v.copy_(c)
        return hits


# ---------------------------------------------------------------------------
# observation plumbing


@dataclass
class ViewObservation:
    view: int
    kind: str               # "real" | "synthetic"
    camera: Camera
    image: torch.Tensor     # [H, W, C] current dtype
    path: str = ""


def _flat_rgb(img: torch.Tensor) -> torch.Tensor:
    return img.reshape(-1, img.shape[-1])[:, :3]


def _ray_subset(n: int, batch: int, seed: int, *tags):
    if batch <= 0 or batch >= n:
        return None
    gen = precision.rng(seed, *tags)
    return torch.as_tensor(np.sort(gen.choice(n, size=batch, replace=False)))


def _grads(loss: torch.Tensor, leaves: dict) -> dict:
    return backward(Tape(leaves=dict(leaves), loss=loss)).grads


def _nan_abort(stage: str, it: int, loss: torch.Tensor) -> float:
    v = float(loss.detach())
    if not math.isfinite(v):
        raise StageError(f"loss diverged (non-finite) at iteration {it}",
                         stage=stage)
    return v


def surf_weight_trace(iterations: int, base: float, enabled: bool,
                      scale_iterations) -> list:
    """Weight per iteration: doubles at 100/200/300 up to 8x base, halves at
    each resolution upscale."""
    out, factor = [], 1.0
    scale_set = set(scale_iterations)
    for it in range(iterations):
        if enabled and it in (100, 200, 300):
            factor *= 2.0
        if it in scale_set:
            factor /= 2.0
        out.append(base * factor)
    return out


# ---------------------------------------------------------------------------
# stage: static field fit


def fit_static(entries, lattice: Lattice, cfg: StaticConfig, run: RunConfig,
               seed: int, mlp: ViewMlp = None, rcfg: RenderConfig = None):
    """Fit node density logits / color features (and the view MLP when
    enabled) to the frame-0 observations. Returns (field, mlp, trace).

    rcfg must carry the background the observations were matted over;
    fitting against the wrong background turns all of free space into a
    backdrop-colored wall."""
    if not entries:
        raise StageError("no frame-0 observations", stage="static")
    rcfg = rcfg if rcfg is not None else run.render_config()
    D = run.feature_width
    if rcfg.color_mode == "view_mlp" and mlp is None:
        mlp = init_view_mlp(D, hidden=run.mlp_hidden,
                            seed=precision.sub_seed(seed, "mlp_init"))

    final_res = tuple(lattice.resolution)
    schedule = [tuple((r, r, r)) if isinstance(r, int) else tuple(r)
                for r in cfg.resolution_schedule] or [final_res]
    if schedule[-1] != final_res:
        schedule = schedule + [final_res]
    extent = (final_res[0] - 1) * lattice.dx
    upscales = list(cfg.scale_iterations)[:len(schedule) - 1]

    def make_leaves(fld: VoxelField):
        sig = fld.sigma_raw.detach().clone().requires_grad_(True)
        col = fld.color_feat.detach().clone().requires_grad_(True)
        return sig, col

    res0 = schedule[0]
    dx0 = extent / (res0[0] - 1)
    fld = empty_field(res0, dx0, lattice.origin, D=D)
    sig, col = make_leaves(fld)

    rays = []
    for e in entries:
        o, d = e.camera.rays()
        flat = e.image.reshape(-1, e.image.shape[-1])
        alpha = flat[:, 3:4] if flat.shape[-1] >= 4 else None
        rays.append((o, d, flat[:, :3], alpha))

    def build_adam():
        params = {"sigma": sig, "color": col}
        lrs = {"sigma": cfg.lr_sigma, "color": cfg.lr_color}
        if rcfg.color_mode == "view_mlp":
            for k, t in mlp.leaves().items():
                t.requires_grad_(True)
                params[k] = t
                lrs[k] = cfg.lr_mlp
        return Adam(params, lrs)

    adam = build_adam()
    weights = surf_weight_trace(cfg.iterations, cfg.surf_weight,
                                cfg.surf_schedule, upscales)
    trace = {"loss": [], "surf_weight": weights,
             "resolutions": [], "scale_iterations": upscales}
    stage = 0
    for it in range(cfg.iterations):
        if it in upscales:
            stage += 1
            cur = VoxelField(resolution=schedule[stage - 1],
                             dx=extent / (schedule[stage - 1][0] - 1),
                             origin=precision.tt(lattice.origin),
                             sigma_raw=sig.detach(), color_feat=col.detach())
            fld = resample_field(cur, schedule[stage])
            sig, col = make_leaves(fld)
            adam = build_adam()
        res = schedule[stage]
        dxs = extent / (res[0] - 1)
        cur = VoxelField(resolution=res, dx=dxs,
                         origin=precision.tt(lattice.origin),
                         sigma_raw=sig, color_feat=col)

        preds, truths = [], []
        apreds, atruths, depths, spreads = [], [], [], []
        vi_terms = []
        for ei, (o, d, truth, alpha) in enumerate(rays):
            sel = _ray_subset(o.shape[0], cfg.ray_batch, seed,
                              "static_rays", it, ei)
            if sel is not None:
                o_s, d_s, t_s = o[sel], d[sel], truth[sel]
                a_s = alpha[sel] if alpha is not None else None
            else:
                o_s, d_s, t_s, a_s = o, d, truth, alpha
            cam = entries[ei].camera
            pred, aux = render_rays(cur, o_s, d_s, cam.near, cam.far, rcfg,
                                    mlp, with_aux=True)
            preds.append(pred[:, :3])
            truths.append(t_s)
            if cfg.dist_weight > 0:
                ds_ray = (cam.far - cam.near) / rcfg.step_count
                spreads.append(ray_compactness(aux["weights"],
                                               aux["midpoints"], ds_ray))
            if a_s is not None:
                if cfg.alpha_weight > 0:
                    apreds.append(pred[:, 3:4])
                    atruths.append(a_s)
                if cfg.depth_weight > 0:
                    empty = a_s[:, 0] < 0.05
                    if bool(empty.any()):
                        depths.append(aux["tau"][empty])
            if rcfg.color_mode == "view_mlp" and cfg.vi_lambda > 0:
                gen = precision.rng(seed, "static_vi", it, ei)
                rand = sample_sphere_dirs(gen, o_s.shape[0] * rcfg.step_count)
                rand = torch.as_tensor(rand, dtype=o_s.dtype).reshape(
                    o_s.shape[0], rcfg.step_count, 3)
                pred_vi = render_rays(cur, o_s, d_s, cam.near, cam.far, rcfg,
                                      mlp, override_dirs=rand)
                vi_terms.append((pred_vi[:, :3], t_s))
        loss = pixel_loss(torch.stack(preds), torch.stack(truths))
        if apreds:
            # same reduction as pixel_loss, single channel
            loss_a = torch.mean((torch.stack(apreds) - torch.stack(atruths)) ** 2)
            loss = loss + cfg.alpha_weight * loss_a
        if depths:
            loss = loss + cfg.depth_weight * torch.cat(depths).mean()
        if spreads:
            loss = loss + cfg.dist_weight * torch.stack(spreads).mean()
        if vi_terms:
            loss_vi = pixel_loss(torch.stack([p for p, _ in vi_terms]),
                                 torch.stack([t for _, t in vi_terms]))
            loss = loss + cfg.vi_lambda * loss_vi
        loss = loss + weights[it] * surface_regularizer(sig, dxs, _ACT)
        trace["loss"].append(_nan_abort("static", it, loss))
        trace["resolutions"].append(list(res))
        adam.step(_grads(loss, adam.params))

    final = VoxelField(resolution=schedule[stage],
                       dx=extent / (schedule[stage][0] - 1),
                       origin=precision.tt(lattice.origin),
                       sigma_raw=sig.detach().clone(),
                       color_feat=col.detach().clone())
    if schedule[stage] != final_res:
        final = resample_field(final, final_res)
    return final, mlp, trace


# ---------------------------------------------------------------------------
# dynamic-stage shared plumbing


def carve_shadow(fld: VoxelField, cameras, step_count: int, tau: float):
    """Reset density at nodes no observing camera can see.

    With few views the mutual occlusion shadow behind the object (floor-ward,
    for a downward-looking ring) is unconstrained by any pixel, and the
    static fit is free to leave dense matter there. A node whose
    transmittance from every camera is below tau contributes nothing to any
    rendered pixel, so resetting it cannot change the fit loss; it only
    stops phantom mass from reaching the seeding stage. Returns the carved
    field and the number of nodes reset."""
    if tau <= 0 or not cameras:
        return fld, 0
    pts = fld.node_positions()
    visible = torch.zeros(pts.shape[0], dtype=torch.bool)
    act = _ACT
    with torch.no_grad():
        for cam in cameras:
            c = cam.pose[:3, 3].to(pts.dtype)
            seg = pts - c
            dist = seg.norm(dim=-1).clamp_min(1e-9)
            d = seg / dist[:, None]
            ds = dist / step_count
            t = (torch.arange(step_count, dtype=pts.dtype) + 0.5)[None, :] \
                * ds[:, None]
            samples = c + d[:, None, :] * t[..., None]
            sig = density_at(fld, samples.reshape(-1, 3), act)
            sig = sig.reshape(pts.shape[0], step_count)
            # march up to half a cell short of the node so a dense surface
            # node does not occlude itself
            infront = (t < dist[:, None] - 0.5 * float(fld.dx)).to(sig.dtype)
            T = torch.exp(-(sig * infront).sum(-1) * ds)
            visible |= T > tau
    if bool(visible.all()):
        return fld, 0
    sig_new = fld.sigma_raw.detach().clone()
    flat = sig_new.reshape(-1)
    flat[~visible] = -6.0  # the empty_field fill: alpha well below seeding threshold
    carved = VoxelField(resolution=fld.resolution, dx=fld.dx,
                        origin=fld.origin, sigma_raw=sig_new,
                        color_feat=fld.color_feat)
    return carved, int((~visible).sum())


def _select_particles(ps: ParticleSet, idx) -> ParticleSet:
    return ParticleSet(x=ps.x[idx], v=ps.v[idx], F=ps.F[idx], C=ps.C[idx],
                       Jp=ps.Jp[idx], sigma_feat=ps.sigma_feat[idx],
                       color_feat=ps.color_feat[idx], mass=ps.mass,
                       volume0=ps.volume0)


def largest_component(ps: ParticleSet, cfg: SimConfig) -> ParticleSet:
    """Keep the seeds of the largest face-connected group of occupied cells.

    The pipeline identifies one continuum object. Few-view static fits can
    leave isolated density clumps elsewhere in the visual hull (floaters on
    a camera axis, corner junk); those seed spurious disconnected bodies
    that the later stages cannot remove, only mis-explain."""
    origin = precision.tt(cfg.origin).to(ps.x.dtype)
    cell = torch.floor((ps.x.detach() - origin) / cfg.dx).to(torch.int64)
    occ = {}
    for i, c in enumerate(map(tuple, cell.tolist())):
        occ.setdefault(c, []).append(i)
    seen = set()
    best = []
    for start in occ:
        if start in seen:
            continue
        stack, comp = [start], []
        seen.add(start)
        while stack:
            c = stack.pop()
            comp.append(c)
            for ax in range(3):
                for step in (-1, 1):
                    nb = list(c)
                    nb[ax] += step
                    nb = tuple(nb)
                    if nb in occ and nb not in seen:
                        seen.add(nb)
                        stack.append(nb)
        if sum(len(occ[c]) for c in comp) > sum(len(occ[c]) for c in best):
            best = comp
    idx = torch.tensor(sorted(i for c in best for i in occ[c]))
    if idx.numel() == ps.count:
        return ps
    return _select_particles(ps, idx)


def _prune_to_interior(ps: ParticleSet, cfg: SimConfig) -> ParticleSet:
    """Seeding covers the whole lattice; the simulator supports one cell in
    from the boundary. Seeds outside [1, n-2] cells are unconverged-fit junk
    (a real object there could not be simulated anyway) and are dropped."""
    origin = precision.tt(cfg.origin).to(ps.x.dtype)
    u = (ps.x.detach() - origin) / cfg.dx
    n = torch.tensor([float(c) for c in cfg.resolution], dtype=ps.x.dtype)
    keep = ((u >= 1.0) & (u <= n - 2.0)).all(-1)
    if bool(keep.all()):
        return ps
    idx = keep.nonzero(as_tuple=True)[0]
    if idx.numel() == 0:
        raise StageError("no seeded particle inside the simulable interior",
                         stage="seed")
    return _select_particles(ps, idx)


def _initial_state(x, v, sig, col, mass, volume0) -> ParticleSet:
    n = x.shape[0]
    dt = x.dtype
    eye = torch.eye(3, dtype=dt).expand(n, 3, 3).contiguous()
    return ParticleSet(x=x, v=v, F=eye, C=torch.zeros(n, 3, 3, dtype=dt),
                       Jp=torch.ones(n, dtype=dt), sigma_feat=sig,
                       color_feat=col, mass=mass, volume0=volume0)


class FrameLoss:
    """Pixel loss of a simulated trajectory against per-frame training
    images, with optional per-iteration ray subsampling."""

    def __init__(self, cameras, truth_images, lattice: Lattice,
                 rcfg: RenderConfig, mlp=None, ray_batch: int = 0,
                 seed: int = 0):
        # truth_images[f][v] -> [H,W,C]
        self.cams = cameras
        self.truth = [[_flat_rgb(img) for img in frame] for frame in truth_images]
        self.lattice = lattice
        self.rcfg = rcfg
        self.mlp = mlp
        self.ray_batch = ray_batch
        self.seed = seed
        self.rays = [cam.rays() for cam in cameras]
        self.n_frames = len(truth_images)

    def __call__(self, snaps, it: int, frames=None) -> torch.Tensor:
        frames = range(self.n_frames) if frames is None else frames
        preds, truths = [], []
        for f in frames:
            fld = p2g_features(snaps[f], self.lattice)
            per_view_p, per_view_t = [], []
            for v, cam in enumerate(self.cams):
                o, d = self.rays[v]
                t = self.truth[f][v]
                sel = _ray_subset(o.shape[0], self.ray_batch, self.seed,
                                  "dyn_rays", it, f, v)
                if sel is not None:
                    o, d, t = o[sel], d[sel], t[sel]
                pred = render_rays(fld, o, d, cam.near, cam.far, self.rcfg,
                                   self.mlp)
                per_view_p.append(pred[:, :3])
                per_view_t.append(t)
            preds.append(torch.cat(per_view_p))
            truths.append(torch.cat(per_view_t))
        return pixel_loss(torch.stack(preds), torch.stack(truths))


# ---------------------------------------------------------------------------
# stage: initial velocity


def fit_velocity(floss: FrameLoss, particles: ParticleSet, model,
                 sim_cfg: SimConfig, frame_dt: float, cfg: VelocityConfig,
                 seed: int):
    """Optimize one shared initial velocity over the first cfg.frames frames
    with physics frozen. Returns (lowest-loss v0 [3], trace).

    Normalized gradient steps with a linearly decaying length, not Adam:
    per-coordinate normalization takes full-size sign steps along weakly
    observed axes (depth for a camera pair, say) whose gradients are pure
    noise, and walks out of the basin. The joint gradient direction is
    dominated by the observable axes, so stepping along it leaves the blind
    ones nearly untouched."""
    n_frames = min(cfg.frames, floss.n_frames)
    v0 = torch.zeros(3, dtype=precision.dtype(), requires_grad=True)
    trace = {"loss": []}
    best_loss, best = math.inf, v0.detach().clone()
    for it in range(cfg.iterations):
        ps = _initial_state(particles.x, v0.expand(particles.count, 3),
                            particles.sigma_feat, particles.color_feat,
                            particles.mass, particles.volume0)
        snaps = simulate(ps, sim_cfg, model, n_frames, frame_dt,
                         checkpoint=True)
        loss = floss(snaps, it, frames=range(n_frames))
        val = _nan_abort("velocity", it, loss)
        trace["loss"].append(val)
        if val < best_loss:
            best_loss, best = val, v0.detach().clone()
        g = _grads(loss, {"v0": v0})["v0"]
        gn = float(g.norm())
        if gn == 0.0:
            break  # stationary, e.g. the init already reproduces the video
        step = cfg.lr * (1.0 - it / cfg.iterations)
        with torch.no_grad():
            v0 -= (step / gn) * g
    return best, trace


# ---------------------------------------------------------------------------
# stage: physics parameters


def fit_physics(floss: FrameLoss, particles: ParticleSet, v0, model_init,
                sim_cfg: SimConfig, frame_dt: float, cfg: PhysicsConfig,
                seed: int, bounds: dict = None):
    """Warm-up on the first ceil(N/2) frames, then all frames. Returns
    (fitted model, trace)."""
    space = ParamSpace(model_init, bounds)
    lrs = {}
    for name in space.leaves:
        lrs[name] = cfg.lr_log if name.startswith("log10_") else cfg.lr_lin
    adam = Adam(space.leaves, lrs)
    n_all = floss.n_frames
    n_warm = cfg.warmup_frames or int(math.ceil(n_all / 2.0))
    plan = [("warmup", n_warm, cfg.warmup_iterations),
            ("main", n_all, cfg.main_iterations)]
    trace = {"loss": [], "phase": [], "projections": 0, "params": []}
    it_total = 0
    for phase, n_frames, iters in plan:
        for _ in range(iters):
            mat = space.material()
            ps = _initial_state(particles.x, v0.expand(particles.count, 3),
                                particles.sigma_feat, particles.color_feat,
                                particles.mass, particles.volume0)
            snaps = simulate(ps, sim_cfg, mat, n_frames, frame_dt,
                             checkpoint=True)
            loss = floss(snaps, it_total, frames=range(n_frames))
            trace["loss"].append(_nan_abort("physics", it_total, loss))
            trace["phase"].append(phase)
            adam.step(_grads(loss, space.leaves))
            trace["projections"] += space.project()
            trace["params"].append(model_to_dict(space.to_model()))
            it_total += 1
    return space.to_model(), trace


# ---------------------------------------------------------------------------
# stage: Lagrangian particle refinement


def run_lpo(floss: FrameLoss, particles: ParticleSet, model, v0,
            sim_cfg: SimConfig, frame_dt: float, cfg: LpoConfig,
            seed_spec: SeedSpec, seed: int):
    """Refine particle positions/features (or the voxel grid, in grid_only
    mode) through the whole video. Returns (particles, trace)."""
    dx = sim_cfg.dx
    trace = {"mode": cfg.mode, "iterations": 0, "loss": [],
             "feature_lr": cfg.feature_lr, "position_lr": cfg.position_lr_scale * dx,
             "betas": list(cfg.betas)}
    if cfg.mode == "none":
        return particles, trace

    n = particles.count
    lat = sim_cfg.lattice

    if cfg.mode == "grid_only":
        fld0 = p2g_features(particles, lat)
        sig = fld0.sigma_raw.detach().clone().requires_grad_(True)
        col = fld0.color_feat.detach().clone().requires_grad_(True)
        adam = Adam({"sigma": sig, "color": col}, cfg.feature_lr,
                    betas=cfg.betas)
        for it in range(cfg.iterations):
            fld = VoxelField(resolution=fld0.resolution, dx=fld0.dx,
                             origin=fld0.origin, sigma_raw=sig, color_feat=col)
            spec_it = replace(seed_spec,
                              seed=precision.sub_seed(seed, "reseed", it))
            try:
                ps_it = seed_particles(fld, spec_it)
            except PhysrecError as e:
                raise StageError(f"refined grid emptied out: {e}",
                                 stage="lpo") from e
            ps = _initial_state(ps_it.x, v0.expand(ps_it.count, 3),
                                ps_it.sigma_feat, ps_it.color_feat,
                                ps_it.mass, ps_it.volume0)
            snaps = _guarded_sim(ps, sim_cfg, model, floss.n_frames, frame_dt)
            loss = floss(snaps, it)
            trace["loss"].append(_nan_abort("lpo", it, loss))
            adam.step(_grads(loss, adam.params))
            trace["iterations"] += 1
        final = VoxelField(resolution=fld0.resolution, dx=fld0.dx,
                           origin=fld0.origin, sigma_raw=sig.detach(),
                           color_feat=col.detach())
        sig_p, col_p = g2p_features(final, particles.x)
        out = ParticleSet(x=particles.x.detach().clone(),
                          v=particles.v.detach().clone(),
                          F=particles.F.detach().clone(),
                          C=particles.C.detach().clone(),
                          Jp=particles.Jp.detach().clone(),
                          sigma_feat=sig_p.detach(), color_feat=col_p.detach(),
                          mass=particles.mass, volume0=particles.volume0)
        return out, trace

    opt_pos = cfg.mode in ("full", "positions_only")
    opt_feat = cfg.mode in ("full", "features_only")
    x = particles.x.detach().clone().requires_grad_(opt_pos)
    sig = particles.sigma_feat.detach().clone().requires_grad_(opt_feat)
    col = particles.color_feat.detach().clone().requires_grad_(opt_feat)
    params, lrs = {}, {}
    if opt_pos:
        params["x"] = x
        lrs["x"] = cfg.position_lr_scale * dx
    if opt_feat:
        params["sigma"] = sig
        params["color"] = col
        lrs["sigma"] = lrs["color"] = cfg.feature_lr
    adam = Adam(params, lrs, betas=cfg.betas)
    for it in range(cfg.iterations):
        ps = _initial_state(x, v0.expand(n, 3), sig, col,
                            particles.mass, particles.volume0)
        snaps = _guarded_sim(ps, sim_cfg, model, floss.n_frames, frame_dt)
        loss = floss(snaps, it)
        trace["loss"].append(_nan_abort("lpo", it, loss))
        adam.step(_grads(loss, params))
        trace["iterations"] += 1
    out = _initial_state(x.detach().clone(),
                         particles.v.detach().clone(),
                         sig.detach().clone(), col.detach().clone(),
                         particles.mass, particles.volume0)
    return out, trace


def _guarded_sim(ps, sim_cfg, model, n_frames, frame_dt):
    try:
        return simulate(ps, sim_cfg, model, n_frames, frame_dt,
                        checkpoint=True)
    except PhysrecError as e:
        raise StageError(
            "particles diverged during refinement (position left the grid; "
            f"the position learning rate may be too high): {e}",
            stage="lpo") from e


# ---------------------------------------------------------------------------
# synthesis and scoring


def synthesize_views(particles: ParticleSet, lattice: Lattice, cameras,
                     train_ids, rcfg: RenderConfig, mlp=None, limit: int = 0):
    """Render frame-0 images from ring cameras outside the training set.
    Returns list of (view_id, image [H,W,4] tensor)."""
    held = [v for v in range(len(cameras)) if v not in set(train_ids)]
    if limit > 0:
        held = held[:limit]
    fld = p2g_features(particles, lattice)
    out = []
    with torch.no_grad():
        for v in held:
            out.append((v, render_image(fld, cameras[v], rcfg, mlp)))
    return out


def score_views(particles: ParticleSet, v0, model, sim_cfg: SimConfig,
                frame_dt: float, dataset: Dataset, view_ids, rcfg, mlp=None):
    """Simulate from the recovered initial state and score the rendered test
    views against the dataset. Returns (mean psnr, mean ssim, mean loss)."""
    lat = sim_cfg.lattice
    ps = _initial_state(particles.x, v0.expand(particles.count, 3),
                        particles.sigma_feat, particles.color_feat,
                        particles.mass, particles.volume0)
    psnrs, ssims, losses = [], [], []
    with torch.no_grad():
        snaps = simulate(ps, sim_cfg, model, dataset.n_frames, frame_dt)
        for f, snap in enumerate(snaps):
            fld = p2g_features(snap, lat)
            for v in view_ids:
                pred = render_image(fld, dataset.cameras[v], rcfg, mlp)
                pred_rgb = np.clip(pred[:, :, :3].cpu().numpy(), 0.0, 1.0)
                truth = dataset.image(v, f)[:, :, :3].astype(np.float64)
                psnrs.append(psnr(pred_rgb, truth))
                ssims.append(ssim(pred_rgb, truth))
                losses.append(float(np.mean(
                    np.sum((pred_rgb - truth) ** 2, axis=-1))))
    return (float(np.mean(psnrs)), float(np.mean(ssims)),
            float(np.mean(losses)))


# ---------------------------------------------------------------------------
# run directory, resumable stage guard


class StageState:
    """Completed-stage registry: each stage records the sha256 of every file
    it wrote; re-running verifies and skips."""

    def __init__(self, run_dir):
        self.dir = os.path.join(str(run_dir), "state")
        os.makedirs(self.dir, exist_ok=True)

    def _path(self, key: str) -> str:
        return os.path.join(self.dir, key + ".json")

    def done(self, key: str) -> bool:
        return os.path.exists(self._path(key))

    def verify(self, key: str) -> dict:
        rec = load_json(self._path(key))
        for path, digest in rec["outputs"].items():
            if not os.path.exists(path):
                raise StageError(f"missing artifact {path} for completed "
                                 f"stage {key}", stage=key)
            if sha256_file(path) != digest:
                raise StageError(f"checksum mismatch on {path} for completed "
                                 f"stage {key}", stage=key)
        return rec

    def mark(self, key: str, outputs, extra: dict = None) -> None:
        rec = {"stage": key, "completed": True,
               "outputs": {str(p): sha256_file(p) for p in outputs}}
        if extra:
            rec["extra"] = extra
        save_json(self._path(key), rec)


class Run:
    """A run directory bound to a dataset: owns view splits, per-round
    artifacts, and the stage functions' disk plumbing."""

    def __init__(self, dataset: Dataset, run_dir, cfg: RunConfig):
        self.ds = dataset
        self.dir = str(run_dir)
        self.cfg = cfg
        os.makedirs(self.dir, exist_ok=True)
        self.state = StageState(self.dir)
        self.train_ids, self.test_ids = split_views(
            dataset.n_views, cfg.train_views, cfg.split_seed)
        scene = dataset.spec()
        self.scene = scene
        subs = cfg.fit_substeps or scene.substeps
        self.sim_cfg = replace(scene.sim_config(),
                               dt=dataset.frame_dt / subs,
                               substeps_per_frame=subs)
        self.lattice = self.sim_cfg.lattice
        self.rcfg = cfg.render_config(scene.background)
        self.frame_dt = dataset.frame_dt
        init = cfg.init_material or _DEFAULT_INITS[
            variant_of(dataset.material())]
        self.init_material = model_from_dict(init)
        save_json(os.path.join(self.dir, "config.json"), cfg.to_dict())

    # -- helpers ----------------------------------------------------------

    def round_dir(self, r: int) -> str:
        p = os.path.join(self.dir, f"round_{r:02d}")
        os.makedirs(p, exist_ok=True)
        return p

    def seed_spec(self, r: int) -> SeedSpec:
        return SeedSpec(particles_per_cell=self.cfg.particles_per_cell,
                        alpha_threshold=self.cfg.alpha_threshold,
                        seed=precision.sub_seed(self.cfg.seed, "seed_particles", r),
                        density=self.cfg.density)

    def _real_entries(self):
        out = []
        for v in self.train_ids:
            img = precision.tt(self.ds.image(v, 0))
            out.append(ViewObservation(view=v, kind="real",
                                       camera=self.ds.cameras[v], image=img,
                                       path=self.ds.image_path(v, 0)))
        return out

    def _synth_entries(self, r: int):
        """Synthesized frame-0 images written by round r-1."""
        if r < 2:
            return []
        prev = os.path.join(self.round_dir(r - 1), "synth")
        man = load_json(os.path.join(prev, "synth_manifest.json"))
        out = []
        for rec in man["images"]:
            img = precision.tt(imgio.read_raw(os.path.join(prev, rec["file"])))
            out.append(ViewObservation(view=rec["view"], kind="synthetic",
                                       camera=self.ds.cameras[rec["view"]],
                                       image=img,
                                       path=os.path.join(prev, rec["file"])))
        return out

    def _frame_truth(self, n_frames: int):
        """truth[f][v] tensors for the training views."""
        return [[precision.tt(self.ds.image(v, f)) for v in self.train_ids]
                for f in range(n_frames)]

    def _frame_loss(self, stage: str, ray_batch: int) -> FrameLoss:
        cams = [self.ds.cameras[v] for v in self.train_ids]
        return FrameLoss(cams, self._frame_truth(self.ds.n_frames),
                         self.lattice, self.rcfg, None, ray_batch,
                         precision.sub_seed(self.cfg.seed, stage))

    def _write_inputs(self, r: int, stage: str, entries=None, frames=None):
        recs = []
        if entries is not None:
            for e in entries:
                recs.append({"view": e.view, "kind": e.kind, "path": e.path,
                             "frames": [0]})
        else:
            for v in self.train_ids:
                recs.append({"view": v, "kind": "real",
                             "path": self.ds.image_path(v, 0),
                             "frames": list(frames)})
        path = os.path.join(self.round_dir(r), f"{stage}_inputs.json")
        save_json(path, {"stage": stage, "round": r, "inputs": recs})
        return path

    # -- stages (disk-backed, resumable) ------------------------------------

    def stage_static(self, r: int):
        key = f"round{r:02d}_static"
        rd = self.round_dir(r)
        fpath = os.path.join(rd, "field.vxf")
        if self.state.done(key):
            self.state.verify(key)
            return load_field(fpath), None
        entries = self._real_entries() + self._synth_entries(r)
        manifest = self._write_inputs(r, "static", entries=entries)
        fld, mlp, trace = fit_static(
            entries, self.lattice, self.cfg.stages.static, self.cfg,
            precision.sub_seed(self.cfg.seed, "static", r), rcfg=self.rcfg)
        save_field(fpath, fld)
        save_json(os.path.join(rd, "static_trace.json"),
                  {"loss": trace["loss"], "surf_weight": trace["surf_weight"]})
        self.state.mark(key, [fpath, manifest])
        return load_field(fpath), mlp

    def stage_velocity(self, r: int, fld: VoxelField):
        key = f"round{r:02d}_velocity"
        rd = self.round_dir(r)
        ppath = os.path.join(rd, "seeded.pts")
        vpath = os.path.join(rd, "velocity.json")
        if self.state.done(key):
            self.state.verify(key)
            rec = load_json(vpath)
            return load_particles(ppath), precision.tt(rec["v0"])
        cams = [e.camera for e in self._real_entries() + self._synth_entries(r)]
        fld, carved = carve_shadow(fld, cams, self.cfg.step_count,
                                   self.cfg.carve_tau)
        particles = _prune_to_interior(seed_particles(fld, self.seed_spec(r)),
                                       self.sim_cfg)
        if self.cfg.keep_largest:
            particles = largest_component(particles, self.sim_cfg)
        save_particles(ppath, particles)
        particles = load_particles(ppath)  # quantize like a resumed run
        vcfg = self.cfg.stages.velocity
        manifest = self._write_inputs(r, "velocity",
                                      frames=range(min(vcfg.frames,
                                                       self.ds.n_frames)))
        floss = self._frame_loss("velocity", vcfg.ray_batch)
        v0, trace = fit_velocity(floss, particles, self.init_material,
                                 self.sim_cfg, self.frame_dt, vcfg,
                                 precision.sub_seed(self.cfg.seed, "velocity", r))
        save_json(vpath, {"v0": [float(c) for c in v0.tolist()],
                          "carved_nodes": carved,
                          "loss": trace["loss"]})
        self.state.mark(key, [ppath, vpath, manifest])
        return particles, v0

    def stage_physics(self, r: int, particles: ParticleSet, v0):
        key = f"round{r:02d}_physics"
        rd = self.round_dir(r)
        mpath = os.path.join(rd, "material.json")
        if self.state.done(key):
            self.state.verify(key)
            return model_from_dict(load_json(mpath)["material"])
        pcfg = self.cfg.stages.physics
        manifest = self._write_inputs(r, "physics",
                                      frames=range(self.ds.n_frames))
        floss = self._frame_loss("physics", pcfg.ray_batch)
        model, trace = fit_physics(floss, particles, v0, self.init_material,
                                   self.sim_cfg, self.frame_dt, pcfg,
                                   precision.sub_seed(self.cfg.seed, "physics", r),
                                   bounds=self.cfg.param_bounds)
        save_json(mpath, {"material": model_to_dict(model),
                          "loss": trace["loss"],
                          "projections": trace["projections"]})
        self.state.mark(key, [mpath, manifest])
        return model

    def stage_lpo(self, r: int, particles: ParticleSet, model, v0):
        key = f"round{r:02d}_lpo"
        rd = self.round_dir(r)
        ppath = os.path.join(rd, "particles.pts")
        tpath = os.path.join(rd, "lpo_trace.json")
        if self.state.done(key):
            self.state.verify(key)
            return load_particles(ppath), load_json(tpath)
        lcfg = self.cfg.stages.lpo
        manifest = self._write_inputs(r, "lpo", frames=range(self.ds.n_frames))
        floss = self._frame_loss("lpo", lcfg.ray_batch)
        out, trace = run_lpo(floss, particles, model, v0, self.sim_cfg,
                             self.frame_dt, lcfg, self.seed_spec(r),
                             precision.sub_seed(self.cfg.seed, "lpo", r))
        save_particles(ppath, out)
        save_json(tpath, trace)
        self.state.mark(key, [ppath, tpath, manifest])
        return load_particles(ppath), trace

    def stage_synthesize(self, r: int, particles: ParticleSet):
        key = f"round{r:02d}_synth"
        rd = self.round_dir(r)
        sdir = os.path.join(rd, "synth")
        man_path = os.path.join(sdir, "synth_manifest.json")
        if self.state.done(key):
            self.state.verify(key)
            return load_json(man_path)
        os.makedirs(sdir, exist_ok=True)
        pairs = synthesize_views(particles, self.lattice, self.ds.cameras,
                                 self.train_ids, self.rcfg,
                                 limit=self.cfg.stages.loop.synth_views)
        recs, outputs = [], []
        for v, img in pairs:
            name = f"v{v:02d}_f000.raw"
            arr = img.cpu().numpy()
            imgio.write_raw(os.path.join(sdir, name), arr)
            imgio.write_ppm(os.path.join(sdir, name[:-4] + ".ppm"),
                            arr[:, :, :3])
            recs.append({"view": v, "file": name, "kind": "synthetic"})
            outputs.append(os.path.join(sdir, name))
        man = {"round": r, "train_views": list(self.train_ids),
               "images": recs}
        save_json(man_path, man)
        self.state.mark(key, outputs + [man_path])
        return man

    def run_round(self, r: int):
        fld, _ = self.stage_static(r)
        particles, v0 = self.stage_velocity(r, fld)
        model = self.stage_physics(r, particles, v0)
        refined, lpo_trace = self.stage_lpo(r, particles, model, v0)
        self.stage_synthesize(r, refined)
        return fld, refined, model, v0, lpo_trace


def _score_round(run: Run, r: int, truth_mat):
    """Score one completed round from its on-disk artifacts."""
    rd = run.round_dir(r)
    particles = load_particles(os.path.join(rd, "particles.pts"))
    model = model_from_dict(load_json(os.path.join(rd, "material.json"))["material"])
    v0 = precision.tt(load_json(os.path.join(rd, "velocity.json"))["v0"])
    lpo_trace = load_json(os.path.join(rd, "lpo_trace.json"))
    p, s, l = score_views(particles, v0, model, run.sim_cfg, run.frame_dt,
                          run.ds, run.test_ids, run.rcfg)
    comparable = truth_mat is not None and \
        variant_of(model) == variant_of(truth_mat)
    errs = param_error(model, truth_mat) if comparable else {}
    row = ScoreRow(scene_id=run.scene.name, round=r, stage="eval",
                   loss=l, psnr=p, ssim=s, param_errors=errs)
    per = {"round": r, "psnr": p, "ssim": s, "param_errors": errs,
           "material": model_to_dict(model),
           "v0": [float(c) for c in v0.tolist()],
           "lpo_iterations": lpo_trace.get("iterations")}
    return row, per


def evaluate(run: Run, rounds) -> dict:
    """Score completed rounds on the held-out views; write metrics.csv, the
    report figures and report.json into the run directory."""
    rounds = list(rounds)
    if not rounds:
        raise StageError("no completed rounds to evaluate", stage="eval")
    truth_mat = run.ds.material()
    rows, per_round = [], []
    for r in rounds:
        row, per = _score_round(run, r, truth_mat)
        rows.append(row)
        per_round.append(per)
    write_metrics(os.path.join(run.dir, "metrics.csv"), rows)
    figures.psnr_ssim_figure(rounds, [d["psnr"] for d in per_round],
                             [d["ssim"] for d in per_round],
                             os.path.join(run.dir, "psnr_by_round.png"))
    figures.param_error_figure(rounds, [d["param_errors"] for d in per_round],
                               os.path.join(run.dir, "param_error_by_round.png"))
    report = {
        "scene": run.scene.name,
        "rounds": rounds,
        "train_views": list(run.train_ids),
        "test_views": list(run.test_ids),
        "per_round": per_round,
        "final_material": per_round[-1]["material"],
        "ground_truth": model_to_dict(truth_mat) if truth_mat else None,
        "metrics_csv": "metrics.csv",
        "figures": ["psnr_by_round.png", "param_error_by_round.png"],
    }
    save_json(os.path.join(run.dir, "report.json"), report)
    return report


def completed_rounds(run: Run) -> list:
    out = []
    r = 1
    while run.state.done(f"round{r:02d}_synth"):
        out.append(r)
        r += 1
    return out


def iterate(dataset: Dataset, run_dir, cfg: RunConfig) -> dict:
    """Full loop: R rounds of static -> seed -> velocity -> physics ->
    refinement -> synthesis, then held-out scoring of every round. Writes
    metrics.csv, report.json and the report figures into run_dir."""
    run = Run(dataset, run_dir, cfg)
    for r in range(1, cfg.stages.loop.rounds + 1):
        run.run_round(r)
    return evaluate(run, range(1, cfg.stages.loop.rounds + 1))
