"""Constitutive models and their differentiable plumbing.

Five material laws on Kirchhoff stress tau = P F^T:

- Elastic / Plasticine: fixed corotated, tau = 2 mu (F - R) F^T + lam J (J-1) I,
  Plasticine adds a von Mises return map on the trial Hencky strain.
- NewtonianFluid: weakly compressible EOS p = kappa (1 - J) plus viscosity
  mu (grad v + grad v^T); only J is tracked (F kept isotropic).
- NonNewtonianFluid: Hencky elasticity with shear mu / bulk kappa and a
  viscoplastic (overstress) von Mises return map with plastic viscosity eta.
- Granular: Hencky (StVK in log strain) elasticity + Drucker-Prager projection
  with friction angle theta_fric; elastic backbone moduli are fixed defaults
  since only the friction angle is an identified parameter.

Gradient-critical pieces: SVD backward is hand-written with repeated-singular-
value guards (eps 1e-8); rotations come from a fixed-iteration polar Newton
solve which is smooth at F = I; plastic return maps compute their yield masks
on detached values so the active set is frozen in the backward pass, and only
flagged rows enter the projection graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields as dc_fields
from typing import Union

import torch

from . import precision
from .errors import UsageError

SVD_EPS = 1e-8
SIGMA_CLAMP = (0.05, 20.0)


# ---------------------------------------------------------------------------
# model definitions


@dataclass
class NewtonianFluid:
    mu: float       # dynamic viscosity
    kappa: float    # bulk modulus


@dataclass
class NonNewtonianFluid:
    mu: float       # shear modulus
    kappa: float
    tau_y: float    # yield stress
    eta: float      # plastic viscosity


@dataclass
class Elastic:
    E: float
    nu: float


@dataclass
class Plasticine:
    E: float
    nu: float
    tau_y: float


@dataclass
class Granular:
    theta_fric: float       # radians
    E: float = 3.537e5      # fixed backbone, not identified
    nu: float = 0.3


MaterialModel = Union[NewtonianFluid, NonNewtonianFluid, Elastic, Plasticine, Granular]

_VARIANTS = {
    "newtonian": NewtonianFluid,
    "non_newtonian": NonNewtonianFluid,
    "elastic": Elastic,
    "plasticine": Plasticine,
    "granular": Granular,
}

# parameters optimized in log10 space / linear space, per variant
LOG_PARAMS = {
    "newtonian": ("mu", "kappa"),
    "non_newtonian": ("mu", "kappa", "tau_y", "eta"),
    "elastic": ("E",),
    "plasticine": ("E", "tau_y"),
    "granular": (),
}
LIN_PARAMS = {
    "newtonian": (),
    "non_newtonian": (),
    "elastic": ("nu",),
    "plasticine": ("nu",),
    "granular": ("theta_fric",),
}
LIN_BOUNDS = {"nu": (-0.95, 0.495), "theta_fric": (1e-3, math.pi / 2 - 1e-3)}


def variant_of(model: MaterialModel) -> str:
    for name, cls in _VARIANTS.items():
        if isinstance(model, cls):
            return name
    raise UsageError(f"unknown material model {type(model).__name__}")


def validate_model(model: MaterialModel) -> None:
    v = variant_of(model)
    for p in LOG_PARAMS[v]:
        if not getattr(model, p) > 0:
            raise UsageError(f"{v}.{p} must be positive")
    if hasattr(model, "nu") and not (-1.0 < model.nu < 0.5):
        raise UsageError("nu must be in (-1, 0.5)")
    if hasattr(model, "theta_fric") and not (0.0 < model.theta_fric < math.pi / 2):
        raise UsageError("theta_fric must be in (0, pi/2) radians")


def model_to_dict(model: MaterialModel) -> dict:
    d = {"type": variant_of(model)}
    for f in dc_fields(model):
        d[f.name] = float(getattr(model, f.name))
    return d


def model_from_dict(d: dict) -> MaterialModel:
    cls = _VARIANTS.get(d.get("type"))
    if cls is None:
        raise UsageError(f"unknown material type {d.get('type')!r}")
    kwargs = {f.name: float(d[f.name]) for f in dc_fields(cls) if f.name in d}
    m = cls(**kwargs)
    validate_model(m)
    return m


class MaterialParams:
    """Runtime form: variant tag + dict of torch scalars (possibly leaves)."""

    def __init__(self, variant: str, params: dict):
        self.variant = variant
        self.p = params

    @staticmethod
    def of(model) -> "MaterialParams":
        if isinstance(model, MaterialParams):
            return model
        v = variant_of(model)
        p = {f.name: precision.tt(float(getattr(model, f.name)))
             for f in dc_fields(model)}
        return MaterialParams(v, p)

    def to_model(self) -> MaterialModel:
        cls = _VARIANTS[self.variant]
        return cls(**{f.name: float(self.p[f.name].detach()) for f in dc_fields(cls)})

    def flat_tensors(self):
        # deterministic order for checkpoint plumbing
        keys = sorted(self.p.keys())
        return keys, [self.p[k] for k in keys]


def lame_parameters(E, nu):
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


# ---------------------------------------------------------------------------
# guarded SVD and polar rotation


class _GuardedSvd3(torch.autograd.Function):
    """Batched 3x3 SVD whose backward guards repeated singular values.

    F_ij = (s_j^2 - s_i^2) / ((s_j^2 - s_i^2)^2 + eps) replaces the exact
    1/(s_j^2 - s_i^2), keeping adjoints finite at F = I and under plastic
    projections that equalize singular values.
    """

    @staticmethod
    def forward(ctx, A):
        U, S, Vh = torch.linalg.svd(A)
        V = Vh.transpose(-1, -2)
        ctx.save_for_backward(U, S, V)
        return U, S, V

    @staticmethod
    def backward(ctx, gU, gS, gV):
        U, S, V = ctx.saved_tensors
        s2 = S * S
        diff = s2.unsqueeze(-2) - s2.unsqueeze(-1)   # diff[i,j] = s_j^2 - s_i^2
        Fg = diff / (diff * diff + SVD_EPS)
        G = torch.diag_embed(gS if gS is not None else torch.zeros_like(S))
        if gU is not None:
            UtgU = U.transpose(-1, -2) @ gU
            G = G + (Fg * (UtgU - UtgU.transpose(-1, -2))) * S.unsqueeze(-2)
        if gV is not None:
            VtgV = V.transpose(-1, -2) @ gV
            G = G + S.unsqueeze(-1) * (Fg * (VtgV - VtgV.transpose(-1, -2)))
        return U @ G @ V.transpose(-1, -2)


def svd3(A: torch.Tensor):
    """A = U diag(S) V^T with guarded backward; A is [..., 3, 3]."""
    return _GuardedSvd3.apply(A)


def polar_rotation(F: torch.Tensor, iters: int = 14) -> torch.Tensor:
    """Rotation factor of F by Newton iteration R <- (R + R^-T)/2.

    Quadratic convergence for det F > 0; differentiable and smooth at F = I
    where SVD-based extraction is not.
    """
    R = F
    for _ in range(iters):
        R = 0.5 * (R + torch.linalg.inv(R).transpose(-1, -2))
    return R


def _hencky(F: torch.Tensor):
    """U, log-singular-values eps [...,3], V of F."""
    U, S, V = svd3(F)
    return U, torch.log(torch.clamp(S, min=1e-12)), V


# ---------------------------------------------------------------------------
# stress


def _eye_like(F):
    return torch.eye(3, dtype=F.dtype).expand_as(F)


def kirchhoff_stress(mat, F: torch.Tensor, C: torch.Tensor = None,
                     Jp: torch.Tensor = None) -> torch.Tensor:
    """tau = P F^T for a batch [N,3,3]; C is the APIC velocity-gradient proxy
    needed by the fluid's viscous term (defaults to zero)."""
    mat = MaterialParams.of(mat)
    v, p = mat.variant, mat.p
    if v in ("elastic", "plasticine"):
        mu, lam = lame_parameters(p["E"], p["nu"])
        R = polar_rotation(F)
        J = torch.linalg.det(F)
        return (2.0 * mu * (F - R) @ F.transpose(-1, -2)
                + (lam * J * (J - 1.0)).reshape(-1, 1, 1) * _eye_like(F))
    if v == "newtonian":
        J = Jp if Jp is not None else torch.linalg.det(F)
        tau = (-p["kappa"] * J * (1.0 - J)).reshape(-1, 1, 1) * _eye_like(F)
        if C is not None:
            tau = tau + p["mu"] * J.reshape(-1, 1, 1) * (C + C.transpose(-1, -2))
        return tau
    if v == "non_newtonian":
        U, eps, _ = _hencky(F)
        lam = p["kappa"] - 2.0 * p["mu"] / 3.0
        tr = eps.sum(-1, keepdim=True)
        principal = 2.0 * p["mu"] * eps + lam * tr
        return U @ torch.diag_embed(principal) @ U.transpose(-1, -2)
    if v == "granular":
        mu, lam = lame_parameters(p["E"], p["nu"])
        U, eps, _ = _hencky(F)
        tr = eps.sum(-1, keepdim=True)
        principal = 2.0 * mu * eps + lam * tr
        return U @ torch.diag_embed(principal) @ U.transpose(-1, -2)
    raise UsageError(f"unknown material variant {v!r}")


def stress(model, F: torch.Tensor, C: torch.Tensor = None,
           Jp: torch.Tensor = None) -> torch.Tensor:
    """First Piola-Kirchhoff stress P = tau F^-T. Batch or single 3x3."""
    single = F.ndim == 2
    Fb = F.reshape(-1, 3, 3)
    det = torch.linalg.det(Fb)
    if not bool((det.detach() > 0).all()):
        raise UsageError("stress requires det(F) > 0")
    tau = kirchhoff_stress(model, Fb,
                           C.reshape(-1, 3, 3) if C is not None else None,
                           Jp.reshape(-1) if Jp is not None else None)
    P = tau @ torch.linalg.inv(Fb).transpose(-1, -2)
    return P[0] if single else P.reshape(F.shape)


def corotated_energy(F: torch.Tensor, E: float, nu: float) -> torch.Tensor:
    """Energy density of the fixed corotated model (finite-difference oracle
    target): mu sum (s_i - 1)^2 + lam/2 (J - 1)^2."""
    mu, lam = lame_parameters(precision.tt(E), precision.tt(nu))
    S = torch.linalg.svdvals(F.reshape(-1, 3, 3))
    J = torch.linalg.det(F.reshape(-1, 3, 3))
    return (mu * ((S - 1.0) ** 2).sum(-1) + 0.5 * lam * (J - 1.0) ** 2).reshape(F.shape[:-2])


# ---------------------------------------------------------------------------
# plastic return maps (applied to the trial deformation gradient after the
# F update in g2p); masks are detached so the active set is fixed


def _masked_replace(F, mask, project_fn):
    if not bool(mask.any()):
        return F
    idx = mask.nonzero(as_tuple=True)[0]
    return torch.index_put(F, (idx,), project_fn(F[idx]))


def _clamp_singular(F):
    def proj(Fm):
        U, S, V = svd3(Fm)
        Sc = torch.clamp(S, SIGMA_CLAMP[0], SIGMA_CLAMP[1])
        return U @ torch.diag_embed(Sc) @ V.transpose(-1, -2)

    with torch.no_grad():
        # cheap screen first: s_max <= ||F||_F and s_min >= |det| / ||F||_F^2,
        # so most healthy rows skip the SVD entirely
        fro = torch.linalg.matrix_norm(F)
        det = torch.linalg.det(F)
        maybe = (fro > SIGMA_CLAMP[1]) | (det <= 0) \
            | (det / torch.clamp(fro * fro, min=1e-12) < SIGMA_CLAMP[0])
        bad_rows = torch.zeros(F.shape[0], dtype=torch.bool)
        if bool(maybe.any()):
            idx = maybe.nonzero(as_tuple=True)[0]
            S0 = torch.linalg.svdvals(F[idx])
            bad = ((S0 < SIGMA_CLAMP[0]) | (S0 > SIGMA_CLAMP[1])).any(-1)
            bad_rows[idx] = bad
    return _masked_replace(F, bad_rows, proj), int(bad_rows.sum())


def _von_mises_project(Fm, mu, tau_y, extra_denom=0.0):
    """Return-map rows already known to yield: scale back the deviatoric
    Hencky strain by d_gamma = (2 mu ||dev eps|| - tau_y) / (2 mu + extra)."""
    U, eps, V = _hencky(Fm)
    dev = eps - eps.mean(-1, keepdim=True)
    norm = torch.clamp(torch.linalg.norm(dev, dim=-1), min=1e-12)
    dgamma = (2.0 * mu * norm - tau_y) / (2.0 * mu + extra_denom)
    eps_new = eps - (dgamma / norm).unsqueeze(-1) * dev
    return U @ torch.diag_embed(torch.exp(eps_new)) @ V.transpose(-1, -2)


def return_map(mat, F_trial: torch.Tensor, Jp: torch.Tensor, dt: float):
    """(F_new, Jp_new, diagnostics) after plasticity + singular value clamp."""
    mat = MaterialParams.of(mat)
    v, p = mat.variant, mat.p
    diags = {"clamped": 0}
    if v == "elastic":
        F_new, nclamp = _clamp_singular(F_trial)
        diags["clamped"] = nclamp
        return F_new, Jp, diags

    if v == "newtonian":
        J_new = torch.clamp(torch.linalg.det(F_trial),
                            SIGMA_CLAMP[0] ** 3, SIGMA_CLAMP[1] ** 3)
        F_new = J_new.reshape(-1, 1, 1) ** (1.0 / 3.0) * _eye_like(F_trial)
        return F_new, J_new, diags

    if v in ("plasticine", "non_newtonian"):
        if v == "plasticine":
            mu, _ = lame_parameters(p["E"], p["nu"])
            extra = 0.0
        else:
            mu = p["mu"]
            extra = p["eta"] / dt
        with torch.no_grad():
            S0 = torch.linalg.svdvals(F_trial)
            eps0 = torch.log(torch.clamp(S0, min=1e-12))
            dev0 = eps0 - eps0.mean(-1, keepdim=True)
            yielding = 2.0 * float(mu.detach() if torch.is_tensor(mu) else mu) \
                * torch.linalg.norm(dev0, dim=-1) \
                > float(p["tau_y"].detach() if torch.is_tensor(p["tau_y"]) else p["tau_y"])
        F_new = _masked_replace(
            F_trial, yielding,
            lambda Fm: _von_mises_project(Fm, mu, p["tau_y"], extra))
        F_new, nclamp = _clamp_singular(F_new)
        diags["clamped"] = nclamp
        diags["yielding"] = int(yielding.sum())
        return F_new, Jp, diags

    if v == "granular":
        mu, lam = lame_parameters(p["E"], p["nu"])
        sin_t = torch.sin(p["theta_fric"])
        alpha = math.sqrt(2.0 / 3.0) * 2.0 * sin_t / (3.0 - sin_t)
        with torch.no_grad():
            S0 = torch.linalg.svdvals(F_trial)
            eps0 = torch.log(torch.clamp(S0, min=1e-12))
            tr0 = eps0.sum(-1)
            dev0 = eps0 - eps0.mean(-1, keepdim=True)
            norm0 = torch.linalg.norm(dev0, dim=-1)
            muv = float(mu.detach())
            lamv = float(lam.detach())
            alphav = float(alpha.detach() if torch.is_tensor(alpha) else alpha)
            dg0 = norm0 + (3.0 * lamv + 2.0 * muv) / (2.0 * muv) * tr0 * alphav
            expanding = tr0 > 0
            shearing = (~expanding) & (dg0 > 0) & (norm0 > 1e-12)

        def proj_tip(Fm):
            U, _, V = svd3(Fm)
            return U @ V.transpose(-1, -2)

        def proj_cone(Fm):
            U, eps, V = _hencky(Fm)
            dev = eps - eps.mean(-1, keepdim=True)
            norm = torch.clamp(torch.linalg.norm(dev, dim=-1), min=1e-12)
            tr = eps.sum(-1)
            dgamma = norm + (3.0 * lam + 2.0 * mu) / (2.0 * mu) * tr * alpha
            eps_new = eps - (dgamma / norm).unsqueeze(-1) * dev
            return U @ torch.diag_embed(torch.exp(eps_new)) @ V.transpose(-1, -2)

        F_new = _masked_replace(F_trial, expanding, proj_tip)
        F_new = _masked_replace(F_new, shearing, proj_cone)
        F_new, nclamp = _clamp_singular(F_new)
        diags["clamped"] = nclamp
        diags["yielding"] = int(expanding.sum() + shearing.sum())
        return F_new, Jp, diags

    raise UsageError(f"unknown material variant {v!r}")


def sound_speed(model, density: float) -> float:
    """Stiffness scale for the CFL check: sqrt(K_eff / rho)."""
    m = MaterialParams.of(model)
    if m.variant in ("newtonian", "non_newtonian"):
        k = float(m.p["kappa"].detach())
    else:
        k = float(m.p["E"].detach())
    return math.sqrt(k / max(density, 1e-12))
