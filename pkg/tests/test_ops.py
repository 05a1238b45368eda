import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from cinerecon import ops
from fdcheck import fd_check


def rnd(*shape, seed=0, dtype=torch.float64):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


# -- warp --------------------------------------------------------------------


def test_zero_flow_warp_is_bit_identity():
    x = rnd(2, 3, 17, 23)
    assert torch.equal(ops.warp(x, torch.zeros(2, 2, 17, 23, dtype=x.dtype)), x)
    xf = x.float()
    assert torch.equal(ops.warp(xf, torch.zeros(2, 2, 17, 23)), xf)


def test_integer_shift_matches_hand_construction():
    x = torch.arange(1.0, 1 + 5 * 6).view(1, 1, 5, 6)
    flow = torch.zeros(1, 2, 5, 6)
    flow[:, 0] = 1.0   # read one column to the right
    flow[:, 1] = -2.0  # and two rows up
    expected = torch.zeros_like(x)
    expected[..., 2:, :-1] = x[..., :-2, 1:]
    assert torch.equal(ops.warp(x, flow), expected)


def test_warp_matches_grid_sample():
    x = rnd(2, 4, 12, 9, seed=1)
    flow = 3 * rnd(2, 2, 12, 9, seed=2)
    gx, gy = ops.pixel_grid(12, 9, x)
    grid = torch.stack([(gx + flow[:, 0]) * 2 / 8 - 1, (gy + flow[:, 1]) * 2 / 11 - 1], dim=-1)
    ref = F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
    torch.testing.assert_close(ops.warp(x, flow), ref, atol=1e-12, rtol=0)


def test_warp_rejects_bad_flow():
    with pytest.raises(ValueError):
        ops.warp(torch.zeros(1, 1, 4, 4), torch.zeros(1, 2, 4, 5))


def test_warp_far_outside_reads_zero():
    x = torch.ones(1, 1, 6, 6)
    flow = torch.full((1, 2, 6, 6), 100.0)
    assert torch.equal(ops.warp(x, flow), torch.zeros_like(x))


def test_compose_constant_flows_add():
    a = torch.zeros(1, 2, 10, 10, dtype=torch.float64)
    b = torch.zeros_like(a)
    a[:, 0] = 1.0
    b[:, 1] = 2.0
    c = ops.compose_flows(a, b)
    # interior pixels, where the second flow is read from inside the image
    assert torch.equal(c[..., :, :-1], torch.stack([a[:, 0], b[:, 1]], 1)[..., :, :-1])


def test_warp_gradients():
    x = rnd(1, 2, 7, 8, seed=3).requires_grad_(True)
    flow = (1.5 * rnd(1, 2, 7, 8, seed=4)).requires_grad_(True)
    fd_check(lambda a: ops.warp(a, flow), [x], n_coords=50)
    fd_check(lambda f: ops.warp(x, f), [flow], n_coords=50, seed=1)
    fd_check(ops.warp, [x, flow], n_coords=60, seed=2)


@settings(max_examples=20, deadline=None)
@given(bound=st.floats(0.1, 50.0), seed=st.integers(0, 1000))
def test_soft_clamp_bounded_and_odd(bound, seed):
    x = 100 * rnd(64, seed=seed)
    y = ops.soft_clamp(x, bound)
    assert torch.all(y.abs() <= bound)
    torch.testing.assert_close(ops.soft_clamp(-x, bound), -y)
    small = 1e-4 * bound * rnd(8, seed=seed)
    torch.testing.assert_close(ops.soft_clamp(small, bound), small, rtol=1e-6, atol=0)


# -- deformable convolution --------------------------------------------------


def brute_dcn(x, offset, mask, weight, bias):
    """Explicit per-output-pixel loops with hand-written bilinear interpolation."""
    x, offset, mask, weight = (t.detach().numpy() for t in (x, offset, mask, weight))
    n, cin, h, w = x.shape
    cout, _, k, _ = weight.shape
    kk = k * k
    groups = offset.shape[1] // (2 * kk)
    cg = cin // groups

    def sample(img, py, px):
        y0, x0 = int(np.floor(py)), int(np.floor(px))
        total = 0.0
        for yy, wy in ((y0, 1 - (py - y0)), (y0 + 1, py - y0)):
            for xx, wx in ((x0, 1 - (px - x0)), (x0 + 1, px - x0)):
                if 0 <= yy < h and 0 <= xx < w:
                    total += wy * wx * img[yy, xx]
        return total

    out = np.zeros((n, cout, h, w))
    for b in range(n):
        for r in range(h):
            for c in range(w):
                for tap in range(kk):
                    ky, kx = divmod(tap, k)
                    for ch in range(cin):
                        g = ch // cg
                        dx = offset[b, (g * kk + tap) * 2, r, c]
                        dy = offset[b, (g * kk + tap) * 2 + 1, r, c]
                        v = sample(x[b, ch], r + ky - k // 2 + dy, c + kx - k // 2 + dx)
                        v *= mask[b, g * kk + tap, r, c]
                        out[b, :, r, c] += weight[:, ch, ky, kx] * v
    if bias is not None:
        out += bias.detach().numpy()[None, :, None, None]
    return torch.from_numpy(out)


def _zero_offset_case(trial, dtype):
    g = torch.Generator().manual_seed(trial)
    groups = [1, 2, 4][trial % 3]
    k = [1, 3, 5][trial % 3]
    x = torch.randn(2, 8, 11, 13, generator=g, dtype=dtype)
    w = torch.randn(6, 8, k, k, generator=g, dtype=dtype)
    b = torch.randn(6, generator=g, dtype=dtype)
    off = torch.zeros(2, groups * k * k * 2, 11, 13, dtype=dtype)
    mask = torch.ones(2, groups * k * k, 11, 13, dtype=dtype)
    return ops.modulated_deform_conv2d(x, off, mask, w, b), F.conv2d(x, w, b, padding=k // 2)


@pytest.mark.parametrize("trial", range(10))
def test_dcn_zero_offset_unit_mask_is_conv(trial):
    out, ref = _zero_offset_case(trial, torch.float64)
    torch.testing.assert_close(out, ref, atol=1e-5, rtol=0)


@pytest.mark.parametrize("trial", range(3))
def test_dcn_zero_offset_float32_relative(trial):
    # single precision only differs by accumulation order
    out, ref = _zero_offset_case(trial, torch.float32)
    assert (out - ref).abs().max() <= 1e-6 * ref.abs().max()


def test_dcn_matches_brute_force_with_fractional_offsets():
    x = rnd(1, 4, 6, 5, seed=10)
    off = 1.7 * rnd(1, 2 * 9 * 2, 6, 5, seed=11)
    mask = torch.sigmoid(rnd(1, 2 * 9, 6, 5, seed=12))
    w = rnd(3, 4, 3, 3, seed=13)
    b = rnd(3, seed=14)
    torch.testing.assert_close(ops.modulated_deform_conv2d(x, off, mask, w, b),
                               brute_dcn(x, off, mask, w, b), atol=1e-10, rtol=0)


def test_dcn_integer_offset_is_shifted_conv():
    x = rnd(1, 2, 8, 8, seed=5)
    w = rnd(2, 2, 3, 3, seed=6)
    off = torch.zeros(1, 18, 8, 8, dtype=x.dtype)
    off[:, 0::2] = 1.0  # every tap reads one column to the right
    mask = torch.ones(1, 9, 8, 8, dtype=x.dtype)
    # output column c reads input columns c .. c+2; only the right edge runs past the image
    shifted = F.pad(x, (0, 2, 1, 1))
    torch.testing.assert_close(ops.modulated_deform_conv2d(x, off, mask, w),
                               F.conv2d(shifted, w), atol=1e-12, rtol=0)


def test_dcn_shape_errors():
    x = torch.zeros(1, 4, 5, 5)
    w = torch.zeros(2, 4, 3, 3)
    with pytest.raises(ValueError):
        ops.modulated_deform_conv2d(x, torch.zeros(1, 17, 5, 5), torch.zeros(1, 9, 5, 5), w)
    with pytest.raises(ValueError):
        ops.modulated_deform_conv2d(x, torch.zeros(1, 18, 5, 5), torch.zeros(1, 8, 5, 5), w)
    with pytest.raises(ValueError):
        ops.modulated_deform_conv2d(x, torch.zeros(1, 18, 5, 5), torch.zeros(1, 9, 5, 5),
                                    torch.zeros(2, 3, 3, 3))


def test_dcn_gradients():
    x = rnd(1, 4, 6, 7, seed=20).requires_grad_(True)
    off = (0.8 * rnd(1, 2 * 9 * 2, 6, 7, seed=21)).requires_grad_(True)
    mask = torch.sigmoid(rnd(1, 2 * 9, 6, 7, seed=22)).requires_grad_(True)
    w = rnd(3, 4, 3, 3, seed=23).requires_grad_(True)
    b = rnd(3, seed=24).requires_grad_(True)
    fn = ops.modulated_deform_conv2d
    fd_check(lambda a: fn(a, off, mask, w, b), [x], n_coords=50)
    fd_check(lambda o: fn(x, o, mask, w, b), [off], n_coords=50, seed=1)
    fd_check(lambda m: fn(x, off, m, w, b), [mask], n_coords=50, seed=2)
    fd_check(lambda ww, bb: fn(x, off, mask, ww, bb), [w, b], n_coords=50, seed=3)


# -- resampling ------------------------------------------------------------------


def test_upsample_matches_interpolate():
    x = rnd(2, 3, 7, 10, seed=7)
    ref = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
    torch.testing.assert_close(ops.upsample2x(x), ref, atol=1e-12, rtol=0)


def test_resampling_preserves_constants_exactly():
    x = torch.full((1, 2, 6, 6), 0.3)
    assert torch.equal(ops.upsample2x(x), torch.full((1, 2, 12, 12), 0.3))
    assert torch.equal(ops.downsample2x(x), torch.full((1, 2, 3, 3), 0.3))


def test_downsample_odd_size():
    x = rnd(1, 1, 5, 7, seed=8)
    y = ops.downsample2x(x)
    assert y.shape[-2:] == (3, 4)
    assert y[0, 0, 0, 0] == x[0, 0, :2, :2].max()


def test_pad_to_multiple():
    x = rnd(1, 1, 10, 13, seed=9)
    p, size = ops.pad_to_multiple(x, 8)
    assert p.shape[-2:] == (16, 16) and size == (10, 13)
    assert torch.equal(p[..., :10, :13], x)
    tiny, _ = ops.pad_to_multiple(rnd(1, 1, 3, 3), 16)
    assert tiny.shape[-2:] == (16, 16)
