"""Synthetic scene generation: analytic primitives, camera rings on the upper
hemisphere, forward simulation with known material parameters, and multi-view
dataset export. The generated data is the ground truth that the recovery
pipeline is scored against; it is produced by the same forward model on
purpose, so recovery quality isolates the inverse problem.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import images as imgio
from .bridge import p2g_features
from .errors import UsageError
from .materials import (Elastic, Granular, MaterialModel, NewtonianFluid,
                        NonNewtonianFluid, Plasticine, model_from_dict,
                        model_to_dict, sound_speed)
from .mpm import ParticleSet, SimConfig, fresh_particles, simulate
from .precision import np_dtype, rng, tt
from .render import Camera, RenderConfig, render_image
from .storage import load_json, save_json
from .voxel_field import Lattice

# Reference parameter sets for the benchmark materials; generic object names.
REFERENCE_MATERIALS = {
    "droplet": NewtonianFluid(mu=200.0, kappa=1e5),
    "letter": NewtonianFluid(mu=100.0, kappa=1e5),
    "cream": NonNewtonianFluid(mu=1e4, kappa=1e6, tau_y=3e3, eta=10.0),
    "toothpaste": NonNewtonianFluid(mu=5e3, kappa=1e5, tau_y=200.0, eta=10.0),
    "torus": Elastic(E=1e6, nu=0.3),
    "bird": Elastic(E=3e5, nu=0.3),
    "playdoh": Plasticine(E=2e6, nu=0.3, tau_y=1.54e4),
    "cat": Plasticine(E=1e6, nu=0.3, tau_y=3.85e3),
    "trophy": Granular(theta_fric=math.radians(40.0)),
}


@dataclass
class Primitive:
    kind: str  # box | sphere | torus (torus axis = y)
    center: tuple = (0.4, 0.3, 0.4)
    half: tuple = (0.1, 0.1, 0.1)   # box
    radius: float = 0.08            # sphere
    major: float = 0.12             # torus
    minor: float = 0.045            # torus

    def __post_init__(self):
        if self.kind not in ("box", "sphere", "torus"):
            raise UsageError(f"unknown primitive kind {self.kind!r}")

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        if self.kind == "box":
            h = np.asarray(self.half, dtype=np.float64)
        elif self.kind == "sphere":
            h = np.full(3, self.radius)
        else:
            h = np.array([self.major + self.minor, self.minor,
                          self.major + self.minor])
        return c - h, c + h

    def inside(self, pts: np.ndarray) -> np.ndarray:
        d = pts - np.asarray(self.center, dtype=np.float64)
        if self.kind == "box":
            h = np.asarray(self.half, dtype=np.float64)
            return np.all(np.abs(d) <= h, axis=1)
        if self.kind == "sphere":
            return np.einsum("ij,ij->i", d, d) <= self.radius ** 2
        ring = np.sqrt(d[:, 0] ** 2 + d[:, 2] ** 2) - self.major
        return ring ** 2 + d[:, 1] ** 2 <= self.minor ** 2

    def to_dict(self) -> dict:
        return {"kind": self.kind, "center": list(self.center),
                "half": list(self.half), "radius": self.radius,
                "major": self.major, "minor": self.minor}

    @staticmethod
    def from_dict(d: dict) -> "Primitive":
        return Primitive(kind=d["kind"], center=tuple(d["center"]),
                         half=tuple(d.get("half", (0.1, 0.1, 0.1))),
                         radius=d.get("radius", 0.08),
                         major=d.get("major", 0.12),
                         minor=d.get("minor", 0.045))


@dataclass
class RingSpec:
    """Cameras evenly spaced in azimuth on the upper hemisphere, cycling
    through the elevation bands."""
    count: int = 11
    radius: float = 0.9
    target: tuple = (0.4, 0.25, 0.4)
    elevations: tuple = (32.0, 58.0)  # degrees above horizontal
    width: int = 48
    height: int = 36
    # wide enough that a 0.2-scale object keeps background margin on every
    # side; sparse-view geometry recovery needs the empty rays
    focal: float = 62.0  # pixels
    near: float = 0.25
    far: float = 1.7

    def __post_init__(self):
        if self.count < 1:
            raise UsageError("camera count must be >= 1")

    def cameras(self) -> list:
        cams = []
        tgt = np.asarray(self.target, dtype=np.float64)
        up = np.array([0.0, 1.0, 0.0])
        for i in range(self.count):
            az = 2.0 * math.pi * i / self.count
            el = math.radians(self.elevations[i % len(self.elevations)])
            pos = tgt + self.radius * np.array([
                math.cos(el) * math.cos(az), math.sin(el),
                math.cos(el) * math.sin(az)])
            z = tgt - pos
            z = z / np.linalg.norm(z)
            x = np.cross(z, up)
            x = x / np.linalg.norm(x)
            y = np.cross(z, x)
            pose = np.eye(4)
            pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = x, y, z, pos
            cams.append(Camera(fx=self.focal, fy=self.focal,
                               cx=self.width / 2.0, cy=self.height / 2.0,
                               pose=pose, width=self.width, height=self.height,
                               near=self.near, far=self.far))
        return cams

    def to_dict(self) -> dict:
        return {"count": self.count, "radius": self.radius,
                "target": list(self.target), "elevations": list(self.elevations),
                "width": self.width, "height": self.height, "focal": self.focal,
                "near": self.near, "far": self.far}

    @staticmethod
    def from_dict(d: dict) -> "RingSpec":
        return RingSpec(count=d["count"], radius=d["radius"],
                        target=tuple(d["target"]),
                        elevations=tuple(d["elevations"]),
                        width=d["width"], height=d["height"], focal=d["focal"],
                        near=d["near"], far=d["far"])


@dataclass
class SceneSpec:
    name: str
    primitive: Primitive
    material: MaterialModel
    velocity: tuple = (0.0, 0.0, 0.0)
    ring: RingSpec = field(default_factory=RingSpec)
    frames: int = 8
    fps: float = 24.0
    substeps: int = 21
    resolution: tuple = (16, 16, 16)
    dx: float = 0.05
    origin: tuple = (0.0, 0.0, 0.0)
    gravity: tuple = (0.0, -9.8, 0.0)
    ground_height: float = 0.1
    ground_mode: str = "sticky"
    ground_friction: float = 0.0
    particles_per_cell: int = 8
    density: float = 1000.0
    density_raw: float = 200.0  # appearance logit, softplus-activated at render
    color0: tuple = (0.82, 0.38, 0.25)
    color1: tuple = (0.25, 0.45, 0.82)
    color_axis: int = 1  # world axis of the albedo gradient
    step_count: int = 160
    # white keeps stray fitted density visible on empty rays; against black,
    # dark ghost matter is loss-free and survives into particle seeding
    background: tuple = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.frames < 2:
            raise UsageError("scene needs at least 2 frames")

    @property
    def frame_dt(self) -> float:
        return 1.0 / self.fps

    @property
    def sim_dt(self) -> float:
        return self.frame_dt / self.substeps

    def sim_config(self) -> SimConfig:
        return SimConfig(resolution=tuple(self.resolution), dx=self.dx,
                         origin=tuple(self.origin), dt=self.sim_dt,
                         substeps_per_frame=self.substeps,
                         gravity=tuple(self.gravity),
                         ground_height=self.ground_height,
                         ground_mode=self.ground_mode,
                         ground_friction=self.ground_friction)

    def lattice(self) -> Lattice:
        return self.sim_config().lattice

    def render_config(self) -> RenderConfig:
        return RenderConfig(step_count=self.step_count,
                            background=tuple(self.background))

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "name", "frames", "fps", "substeps", "dx", "ground_height",
            "ground_mode", "ground_friction", "particles_per_cell", "density",
            "density_raw", "color_axis", "step_count", "seed")}
        for k in ("velocity", "resolution", "origin", "gravity", "color0",
                  "color1", "background"):
            d[k] = list(getattr(self, k))
        d["primitive"] = self.primitive.to_dict()
        d["material"] = model_to_dict(self.material)
        d["ring"] = self.ring.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        kw = dict(d)
        kw["primitive"] = Primitive.from_dict(d["primitive"])
        kw["material"] = model_from_dict(d["material"])
        kw["ring"] = RingSpec.from_dict(d["ring"])
        for k in ("velocity", "resolution", "origin", "gravity", "color0",
                  "color1", "background"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return SceneSpec(**kw)


def _logit(p: np.ndarray) -> np.ndarray:
    q = np.clip(p, 1e-4, 1.0 - 1e-4)
    return np.log(q / (1.0 - q))


def seed_primitive(spec: SceneSpec) -> ParticleSet:
    """Dense analytic seeding: stratified jitter over every lattice cell whose
    span intersects the primitive's bounds, keep samples inside the solid."""
    per_axis = round(spec.particles_per_cell ** (1.0 / 3.0))
    if per_axis ** 3 != spec.particles_per_cell:
        raise UsageError("particles_per_cell must be a perfect cube")
    lat = spec.lattice()
    lo, hi = spec.primitive.bounds()
    org = np.asarray(spec.origin, dtype=np.float64)
    c_lo = np.maximum(np.floor((lo - org) / spec.dx).astype(int), 0)
    c_hi = np.minimum(np.ceil((hi - org) / spec.dx).astype(int),
                      np.asarray(lat.resolution) - 2)
    gen = rng(spec.seed, "scene_particles")
    sub = spec.dx / per_axis
    cells = [(ix, iy, iz)
             for ix in range(c_lo[0], c_hi[0] + 1)
             for iy in range(c_lo[1], c_hi[1] + 1)
             for iz in range(c_lo[2], c_hi[2] + 1)]
    pts = []
    for (ix, iy, iz) in cells:
        base = org + np.array([ix, iy, iz]) * spec.dx
        for a in range(per_axis):
            for b in range(per_axis):
                for c in range(per_axis):
                    jit = gen.uniform(0.0, 1.0, size=3)
                    pts.append(base + (np.array([a, b, c]) + jit) * sub)
    pts = np.asarray(pts, dtype=np.float64)
    keep = spec.primitive.inside(pts)
    pts = pts[keep]
    if pts.shape[0] == 0:
        raise UsageError("primitive produced no particles on this lattice")

    lo_b, hi_b = spec.primitive.bounds()
    axis = spec.color_axis
    span = max(hi_b[axis] - lo_b[axis], 1e-9)
    tmix = np.clip((pts[:, axis] - lo_b[axis]) / span, 0.0, 1.0)[:, None]
    rgb = (1.0 - tmix) * np.asarray(spec.color0) + tmix * np.asarray(spec.color1)

    vol0 = sub ** 3
    n = pts.shape[0]
    return fresh_particles(
        x=tt(pts.astype(np_dtype())),
        sigma_feat=tt(np.full(n, spec.density_raw, dtype=np_dtype())),
        color_feat=tt(_logit(rgb).astype(np_dtype())),
        mass=spec.density * vol0, volume0=vol0,
        v=tt(np.tile(np.asarray(spec.velocity, dtype=np_dtype()), (n, 1))))


def render_particles(ps: ParticleSet, lat: Lattice, cam: Camera,
                     cfg: RenderConfig, mlp=None) -> torch.Tensor:
    """Particles -> voxel features -> image, the shared observation path."""
    fld = p2g_features(ps, lat)
    return render_image(fld, cam, cfg, mlp)


def check_scene_cfl(spec: SceneSpec) -> float:
    c = sound_speed(spec.material, spec.density)
    limit = 0.3 * spec.dx / max(c, 1e-9)
    if spec.sim_dt > limit:
        raise UsageError(
            f"scene dt {spec.sim_dt:.3e} exceeds CFL limit {limit:.3e}; "
            f"raise substeps above {math.ceil(spec.frame_dt / limit)}")
    return limit


def generate(spec: SceneSpec, outdir) -> dict:
    """Simulate and render the full dataset; returns the manifest dict."""
    check_scene_cfl(spec)
    os.makedirs(outdir, exist_ok=True)
    ps = seed_primitive(spec)
    cams = spec.ring.cameras()
    with torch.no_grad():
        frames = simulate(ps, spec.sim_config(), spec.material, spec.frames,
                          spec.frame_dt)
        lat = spec.lattice()
        rcfg = spec.render_config()
        files = [[None] * spec.frames for _ in range(spec.ring.count)]
        for f, snap in enumerate(frames):
            fld = p2g_features(snap, lat)
            for v, cam in enumerate(cams):
                img = render_image(fld, cam, rcfg).cpu().numpy()
                name = f"v{v:02d}_f{f:03d}.raw"
                imgio.write_raw(os.path.join(outdir, name), img)
                imgio.write_ppm(os.path.join(outdir, name[:-4] + ".ppm"),
                                img[:, :, :3])
                files[v][f] = name
    manifest = {
        "version": 1,
        "scene": spec.to_dict(),
        "material": model_to_dict(spec.material),
        "cameras": [c.to_dict() for c in cams],
        "n_views": spec.ring.count,
        "n_frames": spec.frames,
        "frame_dt": spec.frame_dt,
        "n_particles": ps.count,
        "image_channels": 4,
        "files": files,
    }
    save_json(os.path.join(outdir, "manifest.json"), manifest)
    return manifest


class Dataset:
    """Read-side view of a generated scene directory."""

    def __init__(self, root):
        self.root = str(root)
        self.manifest = load_json(os.path.join(self.root, "manifest.json"))
        self.cameras = [Camera.from_dict(d) for d in self.manifest["cameras"]]
        self.n_views = self.manifest["n_views"]
        self.n_frames = self.manifest["n_frames"]
        self.frame_dt = self.manifest["frame_dt"]

    def spec(self) -> SceneSpec:
        return SceneSpec.from_dict(self.manifest["scene"])

    def material(self) -> MaterialModel:
        return model_from_dict(self.manifest["material"])

    def image(self, view: int, frame: int) -> np.ndarray:
        name = self.manifest["files"][view][frame]
        return imgio.read_raw(os.path.join(self.root, name))

    def image_path(self, view: int, frame: int) -> str:
        return os.path.join(self.root, self.manifest["files"][view][frame])


def load_dataset(root) -> Dataset:
    return Dataset(root)


def split_views(n_views: int, k: int, seed=None):
    """Deterministic train/test view split. Default is the evenly spaced
    canonical split; passing a seed draws a random split instead."""
    if not 1 <= k < n_views:
        raise UsageError(f"train count {k} out of range for {n_views} views")
    if seed is None:
        train = sorted({(i * n_views) // k for i in range(k)})
    else:
        gen = rng(seed, "view_split")
        train = sorted(gen.permutation(n_views)[:k].tolist())
    test = [v for v in range(n_views) if v not in train]
    return train, test


def make_scene(preset: str, **overrides) -> SceneSpec:
    if preset == "elastic-block":
        spec = SceneSpec(
            name="elastic-block",
            primitive=Primitive(kind="box", center=(0.4, 0.28, 0.4),
                                half=(0.1, 0.1, 0.1)),
            material=Elastic(E=1e4, nu=0.3),
            velocity=(0.0, -0.8, 0.0), frames=8, substeps=21)
    elif preset == "elastic-torus":
        spec = SceneSpec(
            name="elastic-torus",
            primitive=Primitive(kind="torus", center=(0.4, 0.3, 0.4),
                                major=0.12, minor=0.05),
            material=Elastic(E=1e4, nu=0.3),
            velocity=(0.0, -0.6, 0.0), frames=6, substeps=21)
    elif preset == "fluid-droplet":
        spec = SceneSpec(
            name="fluid-droplet",
            primitive=Primitive(kind="sphere", center=(0.4, 0.3, 0.4),
                                radius=0.09),
            material=REFERENCE_MATERIALS["droplet"],
            velocity=(0.0, -0.5, 0.0), frames=6, substeps=28,
            particles_per_cell=27)
    elif preset == "tiny-elastic":
        spec = SceneSpec(
            name="tiny-elastic",
            primitive=Primitive(kind="box", center=(0.4, 0.3, 0.4),
                                half=(0.05, 0.05, 0.05)),
            material=Elastic(E=1e4, nu=0.3),
            velocity=(0.0, -0.5, 0.0), frames=5, substeps=10,
            fps=50.0,
            ring=RingSpec(count=2, width=24, height=18, focal=31.0),
            step_count=48)
    else:
        raise UsageError(f"unknown scene preset {preset!r}")
    if overrides:
        spec = replace(spec, **overrides)
    return spec
