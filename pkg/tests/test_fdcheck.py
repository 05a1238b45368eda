import pytest
import torch

from fdcheck import fd_check


class WrongSquare(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x * x

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return grad * 2 * x * 1.001  # off by 0.1%


def test_checker_accepts_correct_gradient():
    x = torch.randn(80, dtype=torch.float64, requires_grad=True)
    assert fd_check(lambda a: a * a, [x], n_coords=50) < 1e-6


def test_checker_catches_wrong_gradient():
    x = torch.randn(80, dtype=torch.float64, requires_grad=True)
    with pytest.raises(AssertionError, match="autograd"):
        fd_check(WrongSquare.apply, [x], n_coords=50)
