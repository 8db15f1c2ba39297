"""Binary snapshot files for voxel fields and particle sets, plus checksum
helpers used by resumable runs.

Both formats are a one-line magic string, a one-line JSON header, then raw
little-endian float32 payloads. Grid payloads are written x-fastest (index =
ix + iy*nx + iz*nx*ny) and the header records that layout tag.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np
import torch

from .errors import UsageError
from .mpm import ParticleSet
from .precision import np_dtype, tt
from .voxel_field import VoxelField

FIELD_MAGIC = b"VOXFIELD1\n"
PARTICLE_MAGIC = b"PARTICLES1\n"
_LAYOUT = "x-fastest"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_json(path):
    with open(path) as fh:
        return json.load(fh)


def _grid_bytes(t: torch.Tensor) -> bytes:
    # [nx,ny,nz] or [nx,ny,nz,D]; x varies fastest in the file
    a = t.detach().cpu().numpy()
    if a.ndim == 4:
        a = np.moveaxis(a, 3, 0)  # channel-major, each channel x-fastest
    return np.asfortranarray(a.astype("<f4")).tobytes(order="F")


def _read_floats(fh, count: int) -> np.ndarray:
    buf = fh.read(4 * count)
    if len(buf) != 4 * count:
        raise UsageError("truncated snapshot payload")
    return np.frombuffer(buf, dtype="<f4", count=count)


def save_field(path, field: VoxelField) -> None:
    header = {
        "resolution": list(field.resolution),
        "dx": field.dx,
        "origin": [float(v) for v in field.origin.tolist()],
        "D": field.D,
        "layout": _LAYOUT,
        "dtype": "float32",
    }
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(_grid_bytes(field.sigma_raw))
        fh.write(_grid_bytes(field.color_feat))


def _read_header(fh, magic: bytes) -> dict:
    got = fh.read(len(magic))
    if got != magic:
        raise UsageError(f"bad snapshot magic {got!r}")
    line = fh.readline()
    return json.loads(line.decode())


def load_field(path) -> VoxelField:
    with open(path, "rb") as fh:
        h = _read_header(fh, FIELD_MAGIC)
        nx, ny, nz = h["resolution"]
        D = h["D"]
        sig = _read_floats(fh, nx * ny * nz).reshape((nx, ny, nz), order="F")
        col = _read_floats(fh, D * nx * ny * nz).reshape((D, nx, ny, nz), order="F")
    return VoxelField(
        resolution=(nx, ny, nz), dx=float(h["dx"]),
        origin=tt(h["origin"]),
        sigma_raw=tt(sig.astype(np_dtype())),
        color_feat=tt(np.moveaxis(col, 0, 3).astype(np_dtype())))


_PARTICLE_FIELDS = (("x", 3), ("v", 3), ("F", 9), ("C", 9), ("Jp", 1),
                    ("sigma_feat", 1), ("color_feat", None))


def save_particles(path, ps: ParticleSet) -> None:
    header = {
        "count": ps.count, "D": ps.D,
        "mass": ps.mass, "volume0": ps.volume0,
        "fields": [name for name, _ in _PARTICLE_FIELDS],
        "dtype": "float32",
    }
    with open(path, "wb") as fh:
        fh.write(PARTICLE_MAGIC)
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for name, _ in _PARTICLE_FIELDS:
            a = getattr(ps, name).detach().cpu().numpy()
            fh.write(np.ascontiguousarray(a.astype("<f4")).tobytes())


def load_particles(path) -> ParticleSet:
    with open(path, "rb") as fh:
        h = _read_header(fh, PARTICLE_MAGIC)
        n, D = h["count"], h["D"]
        widths = {"x": 3, "v": 3, "F": 9, "C": 9, "Jp": 1,
                  "sigma_feat": 1, "color_feat": D}
        arrays = {}
        for name in h["fields"]:
            w = widths[name]
            a = _read_floats(fh, n * w).astype(np_dtype())
            if name in ("F", "C"):
                a = a.reshape(n, 3, 3)
            elif name in ("Jp", "sigma_feat"):
                a = a.reshape(n)
            else:
                a = a.reshape(n, w)
            arrays[name] = tt(a)
    return ParticleSet(x=arrays["x"], v=arrays["v"], F=arrays["F"],
                       C=arrays["C"], Jp=arrays["Jp"],
                       sigma_feat=arrays["sigma_feat"],
                       color_feat=arrays["color_feat"],
                       mass=float(h["mass"]), volume0=float(h["volume0"]))


def save_trajectory(dirpath, snapshots, prefix="frame") -> list:
    """Per-frame particle snapshots; returns the written paths."""
    import os
    paths = []
    for i, ps in enumerate(snapshots):
        p = os.path.join(dirpath, f"{prefix}{i:03d}.pts")
        save_particles(p, ps)
        paths.append(p)
    return paths
