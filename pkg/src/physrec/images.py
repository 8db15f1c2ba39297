"""Image export: binary PPM (P6) previews and raw float32 dumps with a JSON
sidecar recording width, height, channels. Raw dumps are the authoritative
format (bitwise round trip); PPM is for eyeballing."""

from __future__ import annotations

import json

import numpy as np

from .errors import UsageError


def _check(img) -> np.ndarray:
    a = np.asarray(img)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise UsageError("image must be [H,W] or [H,W,C]")
    return a


def write_ppm(path, img) -> None:
    """Clamps to [0,1]; RGBA input drops alpha."""
    a = _check(img)
    if a.shape[2] == 1:
        a = np.repeat(a, 3, axis=2)
    a = a[:, :, :3]
    q = np.rint(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(q.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise UsageError(f"not a P6 ppm: {magic!r}")
        dims = fh.readline().split()
        maxval = int(fh.readline())
        w, h = int(dims[0]), int(dims[1])
        data = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / float(maxval)


def write_raw(path, img) -> None:
    a = _check(img).astype("<f4")
    h, w, c = a.shape
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(a).tobytes())
    with open(str(path) + ".json", "w") as fh:
        json.dump({"width": w, "height": h, "channels": c,
                   "dtype": "float32", "order": "row-major"}, fh)
        fh.write("\n")


def read_raw(path) -> np.ndarray:
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    h, w, c = meta["height"], meta["width"], meta["channels"]
    data = np.fromfile(path, dtype="<f4", count=h * w * c)
    if data.size != h * w * c:
        raise UsageError(f"raw image {path} shorter than its sidecar claims")
    return data.reshape(h, w, c)
