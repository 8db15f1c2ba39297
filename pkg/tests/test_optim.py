import pytest
import torch

from physrec.errors import UsageError
from physrec.optim import Adam


def test_matches_torch_adam():
    torch.manual_seed(0)
    p_ref = torch.randn(8, dtype=torch.float64, requires_grad=True)
    p_own = p_ref.detach().clone()
    target = torch.randn(8, dtype=torch.float64)
    ref = torch.optim.Adam([p_ref], lr=0.05, betas=(0.9, 0.999), eps=1e-8)
    own = Adam({"p": p_own}, lr=0.05, betas=(0.9, 0.999), eps=1e-8)
    for _ in range(25):
        ref.zero_grad()
        loss = ((p_ref - target) ** 2).sum()
        loss.backward()
        own.step({"p": p_ref.grad.detach().clone()})
        ref.step()
        assert torch.allclose(p_own, p_ref.detach(), atol=1e-12, rtol=0)


def test_zero_gradient_is_exact_fixed_point():
    p = torch.tensor([1.5, -2.0], dtype=torch.float64)
    before = p.clone()
    opt = Adam({"p": p}, lr=0.3)
    for _ in range(5):
        opt.step({"p": torch.zeros_like(p)})
    assert torch.equal(p, before)  # 0 / (0 + eps) stays exactly zero


def test_none_gradient_treated_as_zero():
    p = torch.tensor([4.0], dtype=torch.float64)
    opt = Adam({"p": p}, lr=0.1)
    opt.step({"p": None})
    assert torch.equal(p, torch.tensor([4.0], dtype=torch.float64))


def test_first_step_magnitude():
    p = torch.tensor([0.0], dtype=torch.float64)
    opt = Adam({"p": p}, lr=0.25)
    opt.step({"p": torch.tensor([7.0], dtype=torch.float64)})
    # bias correction makes the first step lr * g / (|g| + eps)
    assert float(p) == pytest.approx(-0.25, rel=1e-7)


def test_per_leaf_learning_rates():
    a = torch.tensor([0.0], dtype=torch.float64)
    b = torch.tensor([0.0], dtype=torch.float64)
    opt = Adam({"a": a, "b": b}, lr={"a": 0.1, "b": 0.01})
    g = torch.tensor([1.0], dtype=torch.float64)
    opt.step({"a": g, "b": g})
    assert float(a) == pytest.approx(-0.1, rel=1e-7)
    assert float(b) == pytest.approx(-0.01, rel=1e-7)


def test_betas_validation():
    p = torch.tensor([0.0], dtype=torch.float64)
    with pytest.raises(UsageError):
        Adam({"p": p}, lr=0.1, betas=(1.0, 0.999))
    with pytest.raises(UsageError):
        Adam({"p": p}, lr=0.1, betas=(0.9, -0.1))


def test_descent_on_quadratic():
    p = torch.tensor([3.0], dtype=torch.float64)
    opt = Adam({"p": p}, lr=0.1)
    for _ in range(200):
        opt.step({"p": 2.0 * p.clone()})
    assert abs(float(p)) < 0.05
