"""Small deterministic problems for gradient verification.

Two variants: `render_problem` differentiates only the particle-to-grid
scatter and the volume renderer; `sim_problem` pushes material parameters,
initial velocity, positions and features through the full differentiable
simulate -> scatter -> render chain. Both start from leaves perturbed away
from the data-generating values so the pixel loss (and every gradient) is
nonzero. Run them in 64-bit mode; central differences in 32-bit drown in
roundoff.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from . import precision
from .bridge import p2g_features
from .materials import MaterialParams
from .mpm import ParticleSet, simulate
from .render import pixel_loss, render_rays
from .scenes import make_scene, seed_primitive

# free-fall box, 64 particles, 2 cameras, no ground contact: smooth enough
# for central differences at the steps below
_SCENE = "tiny-elastic"

FD_STEPS_SIM = {"log10_E": 1e-4, "nu": 1e-4, "v0": 1e-5, "x": 2e-6,
                "sigma": 1e-4, "color": 1e-4}
FD_STEPS_RENDER = {"x": 2e-6, "sigma": 1e-4, "color": 1e-4}


def _flat_views(field, cams, rcfg):
    per = []
    for cam in cams:
        o, d = cam.rays()
        per.append(render_rays(field, o, d, cam.near, cam.far, rcfg)[:, :3])
    return torch.cat(per)


def _perturbed_state(base: ParticleSet, spec, gen):
    dxs = spec.dx
    x = base.x + precision.tt(0.05 * dxs * gen.standard_normal(tuple(base.x.shape)))
    sig = base.sigma_feat + precision.tt(0.3 * gen.standard_normal(base.count))
    col = base.color_feat + precision.tt(
        0.3 * gen.standard_normal(tuple(base.color_feat.shape)))
    return x.detach(), sig.detach(), col.detach()


def render_problem(seed: int = 0):
    """Returns (objective, leaves, h) for the scatter+render path only."""
    spec = make_scene(_SCENE, seed=seed)
    base = seed_primitive(spec)
    lat = spec.lattice()
    rcfg = spec.render_config()
    cams = spec.ring.cameras()
    with torch.no_grad():
        target = _flat_views(p2g_features(base, lat), cams, rcfg)
    gen = precision.rng(seed, "fd_perturb")
    x, sig, col = _perturbed_state(base, spec, gen)
    leaves = {"x": x.requires_grad_(True), "sigma": sig.requires_grad_(True),
              "color": col.requires_grad_(True)}

    def objective(lv):
        fld = p2g_features((lv["x"], lv["sigma"], lv["color"]), lat)
        return pixel_loss(_flat_views(fld, cams, rcfg), target)

    return objective, leaves, dict(FD_STEPS_RENDER)


def sim_problem(seed: int = 0):
    """Returns (objective, leaves, h) for the full dynamics chain."""
    spec = make_scene(_SCENE, seed=seed)
    base = seed_primitive(spec)
    lat = spec.lattice()
    rcfg = spec.render_config()
    cams = spec.ring.cameras()
    sim_cfg = spec.sim_config()
    n_frames = spec.frames
    # 2% volumetric pre-stretch so stress (hence E, nu) actually moves the
    # trajectory; an undeformed free-fall box has zero material gradients
    stretch = 1.02
    with torch.no_grad():
        ps0 = ParticleSet(x=base.x, v=base.v, F=stretch * base.F, C=base.C,
                          Jp=base.Jp, sigma_feat=base.sigma_feat,
                          color_feat=base.color_feat, mass=base.mass,
                          volume0=base.volume0)
        snaps = simulate(ps0, sim_cfg, spec.material, n_frames, spec.frame_dt)
        target = torch.stack([_flat_views(p2g_features(s, lat), cams, rcfg)
                              for s in snaps])
    gen = precision.rng(seed, "fd_perturb")
    x, sig, col = _perturbed_state(base, spec, gen)
    v0 = np.asarray(spec.velocity, dtype=np.float64) \
        + 0.03 * gen.standard_normal(3)
    leaves = {
        "log10_E": precision.tt(math.log10(spec.material.E) + 0.03,
                                requires_grad=True),
        "nu": precision.tt(spec.material.nu - 0.02, requires_grad=True),
        "v0": precision.tt(v0, requires_grad=True),
        "x": x.requires_grad_(True),
        "sigma": sig.requires_grad_(True),
        "color": col.requires_grad_(True),
    }
    mass, volume0 = base.mass, base.volume0
    n = base.count

    def objective(lv):
        mat = MaterialParams("elastic",
                             {"E": 10.0 ** lv["log10_E"], "nu": lv["nu"]})
        dt = lv["x"].dtype
        eye = torch.eye(3, dtype=dt).expand(n, 3, 3).contiguous()
        ps = ParticleSet(x=lv["x"], v=lv["v0"].expand(n, 3),
                         F=stretch * eye, C=torch.zeros(n, 3, 3, dtype=dt),
                         Jp=torch.ones(n, dtype=dt),
                         sigma_feat=lv["sigma"], color_feat=lv["color"],
                         mass=mass, volume0=volume0)
        snaps2 = simulate(ps, sim_cfg, mat, n_frames, spec.frame_dt)
        pred = torch.stack([_flat_views(p2g_features(s, lat), cams, rcfg)
                            for s in snaps2])
        return pixel_loss(pred, target)

    return objective, leaves, dict(FD_STEPS_SIM)
