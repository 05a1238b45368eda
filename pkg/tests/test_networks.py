import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from cinerecon import forward_model as fm
from cinerecon.config import ConfigError, KNetConfig, MgdaConfig, MrfConfig, toy_config
from cinerecon.knet import KSpaceUNet, UNet, fft2c, ifft2c, reconstruct_kspace, to_image
from cinerecon.mgda import (BRANCHES, MGDA, FlowEstimator, FlowGuidedAlignment, GridPropagation,
                            ResidualBlock, align_pair)
from cinerecon.model import build_model
from cinerecon.mrf import (MRF, AttentionBlock, SwinLayer, mrf_forward, shifted_window_mask,
                           window_partition, window_reverse)
from cinerecon.ops import warp
from cinerecon.training import loss_mse
from fdcheck import fd_check, module_leaves


def rnd(*shape, seed=0, dtype=torch.float64):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def randomize_zero_layers(module, seed=0):
    """Give zero-initialized layers random weights so every path carries gradient."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            if not p.any():
                p.copy_(0.05 * torch.randn(p.shape, generator=g, dtype=p.dtype))


# -- k-space U-Net ------------------------------------------------------------


def test_torch_fft_matches_numpy_forward_model():
    x = rnd(3, 16, 12, seed=1) + 1j * rnd(3, 16, 12, seed=2)
    np.testing.assert_allclose(fft2c(x).numpy(), fm.dft2(x.numpy()), atol=1e-12)
    np.testing.assert_allclose(ifft2c(x).numpy(), fm.idft2(x.numpy()), atol=1e-12)


def test_unet_shapes_for_odd_sizes():
    net = UNet(2, 2, depth=3, base_channels=8)
    assert net(torch.randn(2, 2, 19, 23)).shape == (2, 2, 19, 23)


def test_kspace_unet_shape_and_validation():
    net = KSpaceUNet(KNetConfig(depth=2, base_channels=8))
    k = torch.randn(2, 3, 16, 16, dtype=torch.complex64)
    assert net(k).shape == k.shape and net(k).is_complex()
    assert reconstruct_kspace(k[0], net).shape == k[0].shape
    with pytest.raises(ValueError):
        net(torch.randn(3, 16, 16))


def test_kspace_unet_is_scale_equivariant():
    torch.manual_seed(0)
    net = KSpaceUNet(KNetConfig(depth=2, base_channels=8)).double()
    k = rnd(1, 2, 16, 16, seed=3) + 1j * rnd(1, 2, 16, 16, seed=4)
    torch.testing.assert_close(net(7.0 * k), 7.0 * net(k), rtol=1e-10, atol=1e-10)


def test_data_consistency_restores_measured_samples():
    k_u = torch.randn(1, 2, 8, 8, dtype=torch.complex128)
    k_r = torch.randn(1, 2, 8, 8, dtype=torch.complex128)
    mask = torch.zeros(1, 2, 8, 8, dtype=torch.bool)
    mask[..., ::2, :] = True
    img = to_image(k_r, k_u, mask, data_consistency=True)
    k = fft2c(img)
    torch.testing.assert_close(k[mask], k_u[mask])
    torch.testing.assert_close(k[~mask], k_r[~mask])
    with pytest.raises(ValueError):
        to_image(k_r, data_consistency=True)


def test_kspace_unet_gradients():
    torch.manual_seed(1)
    net = KSpaceUNet(KNetConfig(depth=2, base_channels=8)).double()
    re = rnd(1, 2, 8, 8, seed=5).requires_grad_(True)
    im = rnd(1, 2, 8, 8, seed=6).requires_grad_(True)
    params = list(net.parameters())
    fd_check(lambda a, b: net(torch.complex(a, b)), [re, im], n_coords=50)
    fd_check(lambda *ps: net(torch.complex(re, im)), params, n_coords=60, seed=1)


# -- MGDA --------------------------------------------------------------------


def test_residual_block_gradients():
    torch.manual_seed(2)
    block = ResidualBlock(4)
    (x,), params = module_leaves(block, rnd(2, 4, 6, 6, seed=7))
    fd_check(block, [x], n_coords=50)
    fd_check(lambda *ps: block(x), params, n_coords=50, seed=1)


def test_flow_estimator_structure():
    est = FlowEstimator(1, levels=3, hidden=(8, 8, 8, 8), kernel=3)
    assert len(est.predictors) == 3
    convs = [m for m in est.predictors[0] if isinstance(m, nn.Conv2d)]
    assert len(convs) == 5 and convs[0].in_channels == 4
    src = torch.rand(2, 1, 13, 18)
    flow = est(src, src)
    assert flow.shape == (2, 2, 13, 18)
    assert torch.equal(flow, torch.zeros_like(flow))  # zero-initialized predictors
    with pytest.raises(ValueError):
        est(src, src[..., :17])


def test_flow_estimator_output_is_bounded():
    torch.manual_seed(3)
    est = FlowEstimator(1, levels=2, hidden=(8, 8, 8, 8), kernel=3, clamp_ratio=0.25)
    randomize_zero_layers(est)
    with torch.no_grad():
        for p in est.parameters():
            p.mul_(20)
    flow = est(torch.rand(1, 1, 16, 24), torch.rand(1, 1, 16, 24))
    assert flow.abs().max() <= 0.25 * 24


def _blob(shift_x=0.0, shift_y=0.0, size=32):
    rr, cc = np.mgrid[0:size, 0:size].astype(float)
    img = (np.exp(-((rr - 14 - shift_y) ** 2 + (cc - 15 - shift_x) ** 2) / 30)
           + 0.6 * np.exp(-((rr - 20 - shift_y) ** 2 + (cc - 9 - shift_x) ** 2) / 12))
    return torch.tensor(img, dtype=torch.float32)[None, None]


def test_flow_estimator_learns_a_translation():
    torch.manual_seed(0)
    est = FlowEstimator(1, levels=3, hidden=(16, 16, 16, 8), kernel=5)
    source = _blob()
    target = _blob(2.0, -1.0)  # target content sits 2 right, 1 up
    opt = torch.optim.Adam(est.parameters(), lr=1e-3)
    for _ in range(300):
        loss = F.mse_loss(warp(source, est(source, target)), target)
        opt.zero_grad()
        loss.backward()
        opt.step()
    flow = est(source, target).detach()
    inner = flow[..., 8:24, 6:22]
    # backward warp: out(p) = source(p + flow), so flow = -(shift)
    assert inner[:, 0].mean().item() == pytest.approx(-2.0, abs=0.4)
    assert inner[:, 1].mean().item() == pytest.approx(1.0, abs=0.4)


def test_alignment_at_init_is_half_masked_conv_on_flow_warped_neighbor():
    torch.manual_seed(4)
    mod = FlowGuidedAlignment(4, neighbors=1, kernel_size=3, groups=2).double()
    cur = rnd(1, 4, 8, 8, seed=8)
    nb = rnd(1, 4, 8, 8, seed=9)
    flow = torch.zeros(1, 2, 8, 8, dtype=torch.float64)
    out = align_pair(mod, nb, cur, flow)
    ref = F.conv2d(0.5 * nb, mod.weight, mod.bias, padding=1)
    torch.testing.assert_close(out, ref, atol=1e-12, rtol=0)


def test_alignment_offsets_follow_flow():
    mod = FlowGuidedAlignment(4, neighbors=2, kernel_size=3, groups=4, clamp_ratio=1.0)
    flows = [torch.full((1, 2, 8, 8), 1.5), torch.full((1, 2, 8, 8), -0.5)]
    off = mod.offsets_from(torch.zeros(1, 4 * 9 * 2, 8, 8), flows).view(1, 2, 2, 9, 2, 8, 8)
    torch.testing.assert_close(off[:, 0], torch.full_like(off[:, 0], 8 * torch.tanh(torch.tensor(1.5 / 8))))
    torch.testing.assert_close(off[:, 1], torch.full_like(off[:, 1], 8 * torch.tanh(torch.tensor(-0.5 / 8))))


def test_alignment_validation():
    with pytest.raises(ValueError):
        FlowGuidedAlignment(4, neighbors=2, groups=3)
    mod = FlowGuidedAlignment(4, neighbors=1, groups=2)
    with pytest.raises(ValueError):
        mod(torch.zeros(1, 4, 8, 8), [torch.zeros(1, 4, 8, 8)] * 2, [torch.zeros(1, 2, 8, 8)] * 2)


def test_alignment_gradients():
    torch.manual_seed(5)
    mod = FlowGuidedAlignment(4, neighbors=2, kernel_size=3, groups=4).double()
    randomize_zero_layers(mod)
    cur = rnd(1, 4, 6, 6, seed=10).requires_grad_(True)
    nbs = [rnd(1, 4, 6, 6, seed=11 + i).requires_grad_(True) for i in range(2)]
    flows = [(0.7 * rnd(1, 2, 6, 6, seed=13 + i)).requires_grad_(True) for i in range(2)]
    fd_check(lambda c, a, b, f, g: mod(c, [a, b], [f, g]), [cur, *nbs, *flows], n_coords=60)
    fd_check(lambda *ps: mod(cur, nbs, flows), list(mod.parameters()), n_coords=60, seed=1)


def _features(t, seed=0, c=4, h=8, w=8):
    feats = [rnd(1, c, h, w, seed=seed + i) for i in range(t)]
    fwd = [0.5 * rnd(1, 2, h, w, seed=100 + seed + i) for i in range(t - 1)]
    bwd = [0.5 * rnd(1, 2, h, w, seed=200 + seed + i) for i in range(t - 1)]
    return feats, fwd, bwd


@pytest.mark.parametrize("order,reach", [("FOGP", 1), ("SOGP", 2)])
def test_propagation_dependency_sets(order, reach):
    prop = GridPropagation(4, num_blocks=1, order=order, groups=4).double()
    feats, fwd, bwd = _features(6)
    _, state = prop(feats, fwd, bwd)
    assert tuple(state.features) == BRANCHES
    for name in BRANCHES:
        step = 1 if name.startswith("backward") else -1
        for i, deps in enumerate(state.dependencies[name]):
            expected = {i + step * d for d in range(reach + 1) if 0 <= i + step * d < 6}
            assert deps == expected, (name, i)


def test_propagation_information_flow():
    """Frame 0's output depends on frame 5's input only through backward propagation."""
    torch.manual_seed(6)
    prop = GridPropagation(4, num_blocks=1, order="SOGP", groups=4).double()
    randomize_zero_layers(prop)
    feats, fwd, bwd = _features(6)
    feats = [f.requires_grad_(True) for f in feats]
    out, state = prop(feats, fwd, bwd)
    g = torch.autograd.grad(state.features["forward_1"][0].sum(), feats[5], allow_unused=True)[0]
    assert g is None or not g.any()
    g = torch.autograd.grad(out[0].sum(), feats[5])[0]
    assert g.abs().sum() > 0


def test_fogp_equals_sogp_for_two_frames():
    torch.manual_seed(7)
    a = GridPropagation(4, num_blocks=1, order="FOGP", groups=4).double()
    b = GridPropagation(4, num_blocks=1, order="SOGP", groups=4).double()
    randomize_zero_layers(a)
    b.load_state_dict(a.state_dict())
    feats, fwd, bwd = _features(2)
    out_a, _ = a(feats, fwd, bwd)
    out_b, _ = b(feats, fwd, bwd)
    for x, y in zip(out_a, out_b):
        assert torch.equal(x, y)
    feats, fwd, bwd = _features(4)
    assert not torch.equal(a(feats, fwd, bwd)[0][3], b(feats, fwd, bwd)[0][3])


def test_propagation_validation():
    prop = GridPropagation(4, num_blocks=1, groups=4)
    feats, fwd, bwd = _features(3)
    with pytest.raises(ValueError):
        prop(feats[:1], [], [])
    with pytest.raises(ValueError):
        prop(feats, fwd[:1], bwd)
    with pytest.raises(ValueError):
        GridPropagation(4, order="third")


def test_mgda_shapes_and_bypass():
    cfg = MgdaConfig(channels=8, residual_blocks=1, propagation_blocks=1, pyramid_levels=2,
                     flow_channels=(8, 8, 8, 8), flow_kernel=3, offset_groups=4)
    m = MGDA(cfg)
    x = torch.rand(2, 3, 12, 12)
    assert m(x).shape == (2, 3, 8, 12, 12)
    assert m.last_state is not None

    off = MGDA(MgdaConfig(**{**cfg.__dict__, "enabled": False}))
    y = off(x)
    assert off.last_state is None
    ref = off.extractor(x.reshape(6, 1, 12, 12)).view(2, 3, 8, 12, 12)
    assert torch.equal(y, ref)


def test_mgda_bypass_has_no_cross_frame_dependency():
    m = MGDA(MgdaConfig(enabled=False, channels=4, residual_blocks=1))
    x = torch.rand(1, 4, 8, 8, requires_grad=True)
    g = torch.autograd.grad(m(x)[:, 1].sum(), x)[0]
    assert g[:, 1].abs().sum() > 0
    assert not g[:, [0, 2, 3]].any()


# -- MRF -----------------------------------------------------------------------


def test_window_partition_roundtrip():
    x = rnd(2, 8, 12, 3)
    w = window_partition(x, 4)
    assert w.shape == (2 * 6, 16, 3)
    assert torch.equal(window_reverse(w, 4, 2, 8, 12), x)


def test_shift_mask_blocks_seam_only():
    mask = shifted_window_mask(8, 8, 4, 2, torch.zeros(1))
    assert mask.shape == (4, 16, 16)
    assert not mask[0].any()  # the top-left window holds one region
    assert (mask[3] == -100).any()
    assert torch.equal(mask, mask.transpose(1, 2))


def test_swin_shift_disabled_on_single_window():
    torch.manual_seed(8)
    shifted = SwinLayer(4, 4, 1, shift=2)
    plain = SwinLayer(4, 4, 1, shift=0)
    plain.load_state_dict(shifted.state_dict())
    x = torch.randn(1, 4, 4, 4)
    assert torch.equal(shifted(x), plain(x))


def test_attention_block_gradients():
    torch.manual_seed(9)
    block = AttentionBlock(4, window_size=4, heads=2)
    (x,), params = module_leaves(block, rnd(1, 4, 8, 8, seed=12))
    fd_check(block, [x], n_coords=50)
    fd_check(lambda *ps: block(x), params, n_coords=60, seed=1)


def test_attention_block_rejects_indivisible():
    with pytest.raises(ValueError):
        AttentionBlock(4, window_size=4, heads=2)(torch.zeros(1, 4, 6, 8))


@pytest.mark.parametrize("variant", ["hybrid", "conv", "attention"])
def test_mrf_variants_shape_and_gradient_reach(variant):
    torch.manual_seed(10)
    cfg = MrfConfig.variant(variant, channels=4, window_size=4, blocks_per_stage=1, heads=(1, 2, 4))
    net = MRF(6, cfg)
    x = torch.randn(2, 6, 20, 27)
    out = net(x)
    assert out.shape == (2, 1, 20, 27)
    out.square().mean().backward()
    missing = [n for n, p in net.named_parameters() if p.grad is None or not p.grad.any()]
    assert not missing
    assert mrf_forward(x[0], net).shape == (20, 27)


def test_mrf_branch_widths():
    net = MRF(3, MrfConfig(channels=4, window_size=4, blocks_per_stage=1))
    assert net.widths == (4, 8, 16)
    assert net.pad_multiple == 16
    assert len(net.stages) == 3 and [len(s) for s in net.stages] == [1, 2, 3]


def test_mrf_heads_must_divide_width():
    with pytest.raises(ConfigError):
        MrfConfig(channels=6, heads=(4, 2, 4)).validate()


def test_mrf_gradients():
    torch.manual_seed(11)
    cfg = MrfConfig(channels=2, window_size=2, blocks_per_stage=1, heads=(1, 1, 2))
    net = MRF(2, cfg).double()
    x = rnd(1, 2, 8, 8, seed=13).requires_grad_(True)
    fd_check(net, [x], n_coords=50)


# -- loss and full pipeline ---------------------------------------------------------


def test_loss_mse_value_and_gradient():
    pred = rnd(2, 3, 4, seed=14).requires_grad_(True)
    target = rnd(2, 3, 4, seed=15)
    assert loss_mse(pred, target).item() == pytest.approx(((pred - target) ** 2).mean().item())
    fd_check(lambda p: loss_mse(p, target), [pred], n_coords=24)
    big = rnd(60, seed=16).requires_grad_(True)
    fd_check(lambda p: loss_mse(p, torch.zeros(60, dtype=torch.float64)), [big], n_coords=50)
    with pytest.raises(ValueError):
        loss_mse(pred, target[0])


def _tiny_pipeline_cfg(**kw):
    return toy_config(**{"mgda.channels": 4, "mgda.offset_groups": 4, "mgda.flow_channels": [4, 4, 4, 4],
                         "mgda.flow_kernel": 3, "mgda.pyramid_levels": 2, "mrf.channels": 4,
                         "mrf.heads": [1, 2, 4], "knet.base_channels": 8, **kw})


def _measured(t=3, size=16, acc=4, seed=0):
    from cinerecon.data import synthetic_cine

    seq = fm.attach_phase(synthetic_cine(t, size, seed), fm.synthesize_phase(size, size, seed))
    mask = fm.make_vd_mask(size, acc, 2, seed)
    y = fm.undersample(seq, mask)
    m = torch.from_numpy(np.broadcast_to(mask.broadcast(size), (t, size, size)).copy())
    return torch.from_numpy(y.frames)[None], m[None], seq


def test_untrained_pipeline_returns_zero_filled():
    model = build_model(_tiny_pipeline_cfg(), seed=0).double()
    k, m, _ = _measured()
    out = model(k, m)
    zf = torch.from_numpy(np.abs(fm.idft2(k[0].numpy())))
    torch.testing.assert_close(out[0], zf, atol=1e-6, rtol=0)


def test_stage_outputs_order_and_shapes():
    model = build_model(_tiny_pipeline_cfg(), seed=0)
    k, m, _ = _measured()
    st = model.stage_outputs(k.to(torch.complex64), m)
    assert list(st) == ["k_r", "image", "magnitude", "features", "correction", "output"]
    assert st["features"].shape == (1, 3, 4, 16, 16)
    assert st["output"].shape == (1, 3, 16, 16)


@pytest.mark.parametrize("overrides", [{}, {"mgda.enabled": False}, {"mrf.enabled": False},
                                       {"mgda.enabled": False, "mrf.enabled": False}])
def test_every_parameter_receives_gradient(overrides):
    model = build_model(_tiny_pipeline_cfg(**overrides), seed=0)
    randomize_zero_layers(model)
    k, m, seq = _measured()
    out = model(k.to(torch.complex64), m)
    loss_mse(out, torch.from_numpy(seq.magnitude).float()[None]).backward()
    missing = [n for n, p in model.named_parameters() if p.grad is None or not p.grad.any()]
    assert not missing


def test_data_consistency_full_mask_gives_zero_filled_regardless_of_network():
    model = build_model(_tiny_pipeline_cfg(**{"knet.use_data_consistency": True}), seed=0).double()
    randomize_zero_layers(model)
    k, _, _ = _measured()
    full = torch.ones(k.shape, dtype=torch.bool)
    st = model.stage_outputs(k, full)
    assert not torch.allclose(st["k_r"], k)  # the network does change the spectrum
    torch.testing.assert_close(st["image"], ifft2c(k), atol=1e-12, rtol=0)


def test_data_consistency_keeps_measured_lines_in_pipeline():
    model = build_model(_tiny_pipeline_cfg(**{"knet.use_data_consistency": True}), seed=0).double()
    randomize_zero_layers(model)
    k, m, _ = _measured()
    st = model.stage_outputs(k, m)
    torch.testing.assert_close(fft2c(st["image"])[m], k[m], atol=1e-12, rtol=0)
