"""Process-global numeric precision and seed derivation.

All differentiable state is torch on CPU. 64-bit is the verification mode
(gradient checks, conservation suites); 32-bit is allowed for speed. Every
random draw anywhere in the package goes through a numpy Philox generator
derived from (seed, tag...) so runs are bitwise reproducible in serial mode
and independent of torch's global RNG.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch

_DTYPE = torch.float64


def set_precision(bits: int) -> None:
    global _DTYPE
    if bits == 32:
        _DTYPE = torch.float32
    elif bits == 64:
        _DTYPE = torch.float64
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits}")


def precision_bits() -> int:
    return 64 if _DTYPE == torch.float64 else 32


def dtype() -> torch.dtype:
    return _DTYPE


def np_dtype():
    return np.float64 if _DTYPE == torch.float64 else np.float32


def set_threads(n: int) -> None:
    torch.set_num_threads(max(1, int(n)))


def tt(data, requires_grad: bool = False) -> torch.Tensor:
    """Tensor in the active dtype."""
    t = torch.as_tensor(np.asarray(data), dtype=_DTYPE)
    if requires_grad:
        t = t.clone().requires_grad_(True)
    return t


def rng(seed: int, *tags) -> np.random.Generator:
    """Philox generator keyed by the run seed plus a stable tag path.

    Counter-based, so sub-streams for different stages never collide and the
    derivation does not depend on call order.
    """
    crumbs = [zlib.crc32(str(t).encode("utf-8")) for t in tags]
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF] + crumbs)
    return np.random.Generator(np.random.Philox(ss))


def sub_seed(seed: int, *tags) -> int:
    return int(np.random.SeedSequence(
        [int(seed) & 0xFFFFFFFF] + [zlib.crc32(str(t).encode("utf-8")) for t in tags]
    ).generate_state(1)[0])
