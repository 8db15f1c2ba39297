import math

import pytest
import torch

from physrec import precision
from physrec.errors import UsageError
from physrec.materials import (LIN_BOUNDS, SIGMA_CLAMP, Elastic, Granular,
                               MaterialParams, NewtonianFluid,
                               NonNewtonianFluid, Plasticine, corotated_energy,
                               kirchhoff_stress, lame_parameters,
                               model_from_dict, model_to_dict, polar_rotation,
                               return_map, sound_speed, stress, svd3,
                               validate_model, variant_of)


def rotmat(axis, angle):
    a = torch.tensor(axis, dtype=torch.float64)
    a = a / a.norm()
    K = torch.tensor([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]],
                     dtype=torch.float64)
    return torch.eye(3, dtype=torch.float64) + math.sin(angle) * K \
        + (1 - math.cos(angle)) * (K @ K)


def test_lame_parameters_reference():
    mu, lam = lame_parameters(1e4, 0.25)
    assert mu == pytest.approx(4000.0, rel=1e-15)
    assert lam == pytest.approx(4000.0, rel=1e-15)


def test_zero_stress_at_rest():
    I = torch.eye(3, dtype=torch.float64).expand(2, 3, 3)
    for m in (Elastic(1e4, 0.3), Plasticine(1e4, 0.3, 100.0),
              Granular(0.5), NonNewtonianFluid(1e3, 1e5, 50.0, 1.0)):
        tau = kirchhoff_stress(m, I)
        assert float(tau.abs().max()) < 1e-10, variant_of(m)
    tau = kirchhoff_stress(NewtonianFluid(1.0, 1e5), I,
                           C=torch.zeros(2, 3, 3, dtype=torch.float64))
    assert float(tau.abs().max()) == 0.0


def test_corotated_stress_matches_energy_gradient():
    # independent oracle: tau = (d psi / d F) F^T with psi in singular values
    E, nu = 1e5, 0.3
    F = torch.tensor([[1.10, 0.02, 0.0],
                      [0.0, 0.97, 0.01],
                      [0.03, 0.0, 1.04]], dtype=torch.float64,
                     requires_grad=True)
    psi = corotated_energy(F, E, nu)
    P = torch.autograd.grad(psi, F)[0]
    tau_energy = P @ F.detach().transpose(-1, -2)
    tau = kirchhoff_stress(Elastic(E, nu), F.detach().reshape(1, 3, 3))[0]
    assert torch.allclose(tau, tau_energy, atol=1e-6, rtol=1e-9)


def test_corotated_energy_zero_under_rotation():
    R = rotmat([1, 2, 3], 0.7).reshape(1, 3, 3)
    assert float(corotated_energy(R, 1e5, 0.3)) < 1e-20


def test_kirchhoff_frame_indifference():
    F = torch.tensor([[1.05, 0.03, 0.0],
                      [0.01, 0.95, 0.02],
                      [0.0, 0.04, 1.02]], dtype=torch.float64).reshape(1, 3, 3)
    R = rotmat([0.3, -1.0, 0.6], 1.1)
    m = Elastic(2e4, 0.35)
    tau = kirchhoff_stress(m, F)
    tau_rot = kirchhoff_stress(m, R @ F)
    assert torch.allclose(tau_rot, R @ tau @ R.T, atol=1e-9, rtol=1e-9)


def test_kirchhoff_is_symmetric():
    gen = precision.rng(7, "tau_sym")
    F = precision.tt(gen.normal(0, 0.08, (5, 3, 3))) \
        + torch.eye(3, dtype=torch.float64)
    for m in (Elastic(1e4, 0.3), Granular(0.6),
              NonNewtonianFluid(1e4, 1e6, 3e3, 10.0)):
        tau = kirchhoff_stress(m, F)
        assert torch.allclose(tau, tau.transpose(-1, -2), atol=1e-8)


def test_newtonian_eos_pressure_sign():
    # compressed (J < 1): compressive (negative) isotropic tau = -kappa J (1-J) I
    F = (0.97 * torch.eye(3, dtype=torch.float64)).reshape(1, 3, 3)
    tau = kirchhoff_stress(NewtonianFluid(0.0, 1e5), F)
    J = 0.97 ** 3
    assert float(tau[0, 0, 0]) == pytest.approx(-1e5 * J * (1 - J), rel=1e-12)
    assert float(tau[0, 0, 1]) == 0.0
    # expanded: tensile
    Fe = (1.03 * torch.eye(3, dtype=torch.float64)).reshape(1, 3, 3)
    assert float(kirchhoff_stress(NewtonianFluid(0.0, 1e5), Fe)[0, 0, 0]) > 0


def test_newtonian_viscous_term():
    C = torch.tensor([[0.0, 2.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
                     dtype=torch.float64).reshape(1, 3, 3)
    I = torch.eye(3, dtype=torch.float64).reshape(1, 3, 3)
    tau = kirchhoff_stress(NewtonianFluid(3.0, 1e5), I, C=C)
    want = 3.0 * (C + C.transpose(-1, -2))
    assert torch.allclose(tau, want, atol=1e-12)


def test_stress_rejects_inverted_elements():
    F = torch.diag(torch.tensor([-1.0, 1.0, 1.0], dtype=torch.float64))
    with pytest.raises(UsageError):
        stress(Elastic(1e4, 0.3), F)


def test_stress_single_and_batch_shapes():
    F = torch.eye(3, dtype=torch.float64) * 1.01
    P1 = stress(Elastic(1e4, 0.3), F)
    assert P1.shape == (3, 3)
    Pb = stress(Elastic(1e4, 0.3), F.expand(4, 3, 3))
    assert Pb.shape == (4, 3, 3)
    assert torch.allclose(Pb[2], P1)


# --- svd3 / polar -----------------------------------------------------------


def test_svd3_reconstructs():
    gen = precision.rng(0, "svd_rec")
    A = precision.tt(gen.normal(size=(6, 3, 3)))
    U, S, V = svd3(A)
    assert torch.allclose(U @ torch.diag_embed(S) @ V.transpose(-1, -2), A,
                          atol=1e-12)


def test_svd3_gradient_matches_fd_separated():
    gen = precision.rng(1, "svd_fd")
    A0 = precision.tt(gen.normal(size=(3, 3))) + torch.diag(
        torch.tensor([2.0, 1.0, 0.5], dtype=torch.float64))
    A = A0.clone().requires_grad_(True)
    W = precision.tt(gen.normal(size=(3,)))

    def f(M):
        _, S, _ = svd3(M.reshape(1, 3, 3))
        return (S[0] * W).sum()

    g = torch.autograd.grad(f(A), A)[0]
    h = 1e-6
    for i in range(3):
        for j in range(3):
            Ap, Am = A0.clone(), A0.clone()
            Ap[i, j] += h
            Am[i, j] -= h
            fd = (float(f(Ap)) - float(f(Am))) / (2 * h)
            assert abs(float(g[i, j]) - fd) < 1e-6


def test_svd3_backward_finite_at_identity():
    A = torch.eye(3, dtype=torch.float64).reshape(1, 3, 3).requires_grad_(True)
    U, S, V = svd3(A)
    loss = (U.sum() + S.sum() + V.sum())
    g = torch.autograd.grad(loss, A)[0]
    assert bool(torch.isfinite(g).all())


def test_polar_rotation_matches_svd_factor():
    gen = precision.rng(2, "polar")
    F = precision.tt(gen.normal(0, 0.2, (4, 3, 3))) \
        + torch.eye(3, dtype=torch.float64)
    R = polar_rotation(F)
    U, _, V = torch.linalg.svd(F)
    R_ref = U @ V
    assert torch.allclose(R, R_ref, atol=1e-10)
    assert torch.allclose(R @ R.transpose(-1, -2),
                          torch.eye(3, dtype=torch.float64).expand(4, 3, 3),
                          atol=1e-12)


def test_polar_rotation_identity_and_smooth():
    I = torch.eye(3, dtype=torch.float64).reshape(1, 3, 3)
    assert torch.allclose(polar_rotation(I), I, atol=1e-15)
    A = I.clone().requires_grad_(True)
    g = torch.autograd.grad(polar_rotation(A).sum(), A)[0]
    assert bool(torch.isfinite(g).all())


# --- return maps ------------------------------------------------------------


def hencky_dev_norm(F):
    S = torch.linalg.svdvals(F)
    eps = torch.log(S)
    dev = eps - eps.mean(-1, keepdim=True)
    return torch.linalg.norm(dev, dim=-1), eps.sum(-1)


def test_elastic_return_map_is_clamp_only():
    F = torch.diag(torch.tensor([1.2, 0.9, 1.0], dtype=torch.float64)).reshape(1, 3, 3)
    F_new, Jp, diags = return_map(Elastic(1e4, 0.3), F, torch.ones(1, dtype=torch.float64), 1e-4)
    assert torch.equal(F_new, F)  # healthy rows skip the SVD entirely
    assert diags["clamped"] == 0


def test_singular_value_clamp():
    F = torch.diag(torch.tensor([30.0, 1.0, 0.01], dtype=torch.float64)).reshape(1, 3, 3)
    F_new, _, diags = return_map(Elastic(1e4, 0.3), F,
                                 torch.ones(1, dtype=torch.float64), 1e-4)
    S = torch.linalg.svdvals(F_new)[0]
    assert float(S.max()) == pytest.approx(SIGMA_CLAMP[1], rel=1e-12)
    assert float(S.min()) == pytest.approx(SIGMA_CLAMP[0], rel=1e-12)
    assert diags["clamped"] == 1


def test_plasticine_projects_onto_yield_surface():
    m = Plasticine(E=1e4, nu=0.3, tau_y=50.0)
    mu, _ = lame_parameters(1e4, 0.3)
    # volume-preserving shear, well past yield
    F = torch.diag(torch.tensor([1.4, 1.0 / 1.4, 1.0], dtype=torch.float64)).reshape(1, 3, 3)
    norm0, tr0 = hencky_dev_norm(F)
    assert 2 * mu * float(norm0) > 50.0
    F_new, _, diags = return_map(m, F, torch.ones(1, dtype=torch.float64), 1e-4)
    norm1, tr1 = hencky_dev_norm(F_new)
    assert 2 * mu * float(norm1) == pytest.approx(50.0, rel=1e-9)
    assert float(tr1) == pytest.approx(float(tr0), abs=1e-12)  # volumetric part kept
    assert diags["yielding"] == 1


def test_plasticine_below_yield_untouched():
    m = Plasticine(E=1e4, nu=0.3, tau_y=1e6)
    F = torch.diag(torch.tensor([1.1, 0.95, 1.0], dtype=torch.float64)).reshape(1, 3, 3)
    F_new, _, diags = return_map(m, F, torch.ones(1, dtype=torch.float64), 1e-4)
    assert torch.equal(F_new, F)
    assert diags["yielding"] == 0


def test_non_newtonian_overstress():
    mu, tau_y, eta, dt = 1e4, 50.0, 10.0, 1e-3
    m = NonNewtonianFluid(mu=mu, kappa=1e6, tau_y=tau_y, eta=eta)
    F = torch.diag(torch.tensor([1.4, 1.0 / 1.4, 1.0], dtype=torch.float64)).reshape(1, 3, 3)
    norm0, _ = hencky_dev_norm(F)
    F_new, _, _ = return_map(m, F, torch.ones(1, dtype=torch.float64), dt)
    norm1, _ = hencky_dev_norm(F_new)
    # viscoplastic flow stops short of the yield surface by the overstress
    want = (2 * mu * float(norm0) - tau_y) * (eta / dt) / (2 * mu + eta / dt)
    got = 2 * mu * float(norm1) - tau_y
    assert got == pytest.approx(want, rel=1e-9)
    assert got > 0


def test_newtonian_forgets_shear():
    F = torch.tensor([[1.0, 0.5, 0.0], [0.0, 1.1, 0.0], [0.0, 0.0, 0.9]],
                     dtype=torch.float64).reshape(1, 3, 3)
    J = float(torch.linalg.det(F))
    F_new, Jp_new, _ = return_map(NewtonianFluid(1.0, 1e5), F,
                                  torch.ones(1, dtype=torch.float64), 1e-4)
    off = F_new[0] - torch.diag(torch.diagonal(F_new[0]))
    assert float(off.abs().max()) == 0.0
    assert float(torch.linalg.det(F_new)) == pytest.approx(J, rel=1e-12)
    assert float(Jp_new) == pytest.approx(J, rel=1e-12)


def test_granular_expansion_resets_to_rotation():
    F = (1.05 * rotmat([1, 0, 0], 0.3)).reshape(1, 3, 3)
    F_new, _, diags = return_map(Granular(0.6), F,
                                 torch.ones(1, dtype=torch.float64), 1e-4)
    S = torch.linalg.svdvals(F_new)[0]
    assert torch.allclose(S, torch.ones(3, dtype=torch.float64), atol=1e-12)
    assert diags["yielding"] == 1


def test_granular_shear_lands_on_cone():
    theta = 0.4
    m = Granular(theta)
    mu, lam = lame_parameters(3.537e5, 0.3)
    sin_t = math.sin(theta)
    alpha = math.sqrt(2.0 / 3.0) * 2.0 * sin_t / (3.0 - sin_t)
    # compressive shear outside the cone
    F = torch.diag(torch.tensor([1.3, 0.7, 0.95], dtype=torch.float64)).reshape(1, 3, 3)
    norm0, tr0 = hencky_dev_norm(F)
    assert float(tr0) < 0
    assert float(norm0) + (3 * lam + 2 * mu) / (2 * mu) * float(tr0) * alpha > 0
    F_new, _, _ = return_map(m, F, torch.ones(1, dtype=torch.float64), 1e-4)
    norm1, tr1 = hencky_dev_norm(F_new)
    resid = float(norm1) + (3 * lam + 2 * mu) / (2 * mu) * float(tr1) * alpha
    assert abs(resid) < 1e-9
    assert float(tr1) == pytest.approx(float(tr0), abs=1e-12)


def test_granular_inside_cone_untouched():
    # mild compression, tiny shear: inside the cone for a big friction angle
    F = torch.diag(torch.tensor([0.99, 0.985, 0.99], dtype=torch.float64)).reshape(1, 3, 3)
    F_new, _, diags = return_map(Granular(1.0), F,
                                 torch.ones(1, dtype=torch.float64), 1e-4)
    assert torch.equal(F_new, F)
    assert diags["yielding"] == 0


# --- model plumbing ---------------------------------------------------------


def test_validate_model_errors():
    with pytest.raises(UsageError):
        validate_model(Elastic(E=-5.0, nu=0.3))
    with pytest.raises(UsageError):
        validate_model(Elastic(E=1e4, nu=0.6))
    with pytest.raises(UsageError):
        validate_model(Granular(theta_fric=2.0))
    with pytest.raises(UsageError):
        validate_model(NewtonianFluid(mu=0.0, kappa=1e5))


def test_model_dict_roundtrip():
    for m in (Elastic(1e4, 0.3), NewtonianFluid(200.0, 1e5),
              NonNewtonianFluid(1e4, 1e6, 3e3, 10.0),
              Plasticine(2e6, 0.3, 1.54e4), Granular(0.7)):
        d = model_to_dict(m)
        assert d["type"] == variant_of(m)
        assert model_from_dict(d) == m


def test_model_from_dict_rejects_unknown():
    with pytest.raises(UsageError):
        model_from_dict({"type": "rubber", "E": 1.0})


def test_material_params_roundtrip_and_order():
    mp = MaterialParams.of(Plasticine(2e6, 0.3, 1.54e4))
    keys, tensors = mp.flat_tensors()
    assert keys == sorted(keys)
    assert all(torch.is_tensor(t) for t in tensors)
    assert mp.to_model() == Plasticine(2e6, 0.3, 1.54e4)


def test_lin_bounds_cover_lin_params():
    assert LIN_BOUNDS["nu"][1] < 0.5
    assert LIN_BOUNDS["theta_fric"][0] > 0


def test_sound_speed():
    assert sound_speed(Elastic(1e4, 0.3), 1000.0) == pytest.approx(math.sqrt(10.0))
    assert sound_speed(NewtonianFluid(1.0, 1e5), 1000.0) == pytest.approx(10.0)
    assert sound_speed(Elastic(4e4, 0.3), 1000.0) > sound_speed(Elastic(1e4, 0.3), 1000.0)
