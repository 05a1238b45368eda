"""Motion-guided deformable alignment.

Frame features from a residual extractor are propagated along the sequence
in four branches (forward, backward, forward, backward).  At each step the
previously propagated state(s) are aligned to the current frame by a
modulated deformable convolution whose offsets are an estimated optical
flow plus a learned residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import MgdaConfig
from .ops import compose_flows, modulated_deform_conv2d, pad_to_multiple, soft_clamp, warp

BRANCHES = ("forward_1", "backward_1", "forward_2", "backward_2")


class ResidualBlock(nn.Module):
    """conv-LReLU-conv with identity shortcut, no normalization."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.LeakyReLU(0.1)

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


class ResidualStack(nn.Sequential):
    """Input conv to ``channels`` followed by ``num_blocks`` residual blocks."""

    def __init__(self, in_channels: int, channels: int, num_blocks: int):
        layers = [nn.Conv2d(in_channels, channels, 3, padding=1), nn.LeakyReLU(0.1)]
        layers += [ResidualBlock(channels) for _ in range(num_blocks)]
        super().__init__(*layers)


class FeatureExtractor(ResidualStack):
    def __init__(self, in_channels: int = 1, channels: int = 64, num_blocks: int = 5):
        super().__init__(in_channels, channels, num_blocks)


# --------------------------------------------------------------------------
# Optical flow
# --------------------------------------------------------------------------


class FlowPredictor(nn.Sequential):
    """Five conv layers: (target, warped source, flow) -> residual flow."""

    def __init__(self, in_channels: int, hidden: tuple[int, ...], kernel: int):
        layers = []
        widths = (2 * in_channels + 2, *hidden)
        for cin, cout in zip(widths[:-1], widths[1:]):
            layers += [nn.Conv2d(cin, cout, kernel, padding=kernel // 2), nn.ReLU()]
        last = nn.Conv2d(widths[-1], 2, kernel, padding=kernel // 2)
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)
        super().__init__(*layers, last)


class FlowEstimator(nn.Module):
    """Coarse-to-fine spatial pyramid flow.

    ``forward(source, target)`` returns a flow such that
    ``warp(source, flow)`` approximates ``target``.
    """

    def __init__(self, in_channels: int = 1, levels: int = 4,
                 hidden: tuple[int, ...] = (32, 64, 32, 16), kernel: int = 7, clamp_ratio: float = 0.25):
        super().__init__()
        self.levels = levels
        self.clamp_ratio = clamp_ratio
        self.predictors = nn.ModuleList(FlowPredictor(in_channels, hidden, kernel) for _ in range(levels))

    def clamp_bound(self, h: int, w: int) -> float:
        return self.clamp_ratio * max(h, w)

    def forward(self, source: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        if source.shape != target.shape:
            raise ValueError(f"flow inputs differ in shape: {tuple(source.shape)} vs {tuple(target.shape)}")
        h, w = source.shape[-2:]
        multiple = 2 ** (self.levels - 1)
        source, _ = pad_to_multiple(source, multiple, mode="replicate")
        target, _ = pad_to_multiple(target, multiple, mode="replicate")
        pyramid = [(source, target)]
        for _ in range(self.levels - 1):
            s, t = pyramid[-1]
            pyramid.append((F.avg_pool2d(s, 2), F.avg_pool2d(t, 2)))

        flow = None
        for level in reversed(range(self.levels)):
            s, t = pyramid[level]
            if flow is None:
                flow = s.new_zeros(s.shape[0], 2, *s.shape[-2:])
            else:
                flow = 2.0 * F.interpolate(flow, scale_factor=2, mode="bilinear", align_corners=False)
            residual = self.predictors[level](torch.cat([t, warp(s, flow), flow], dim=1))
            flow = flow + residual
        return soft_clamp(flow[..., :h, :w], self.clamp_bound(h, w))


# --------------------------------------------------------------------------
# Flow-guided deformable alignment
# --------------------------------------------------------------------------


class FlowGuidedAlignment(nn.Module):
    """Align ``neighbors`` propagated feature maps to the current frame.

    Conditioning ``F_c = cat(current, warp(n_k, flow_k)..., flow_k...)``
    feeds two heads: one produces the modulation mask (through a sigmoid),
    the other per-tap residual offsets that are added to each neighbor's
    flow.  The offset groups are split evenly between neighbors, so each
    neighbor's channels are sampled around its own flow.
    """

    def __init__(self, channels: int, neighbors: int = 1, kernel_size: int = 3,
                 groups: int = 8, clamp_ratio: float = 0.25):
        super().__init__()
        if groups % neighbors or (neighbors * channels) % groups:
            raise ValueError(f"{groups} offset groups cannot split {neighbors} x {channels} channels")
        self.channels = channels
        self.neighbors = neighbors
        self.kernel_size = kernel_size
        self.groups = groups
        self.clamp_ratio = clamp_ratio
        kk = kernel_size * kernel_size
        cond = channels * (1 + neighbors) + 2 * neighbors
        self.mask_head = nn.Sequential(
            nn.Conv2d(cond, channels, 3, padding=1), nn.LeakyReLU(0.1),
            nn.Conv2d(channels, groups * kk, 3, padding=1))
        self.offset_head = nn.Sequential(
            nn.Conv2d(cond, channels, 3, padding=1), nn.LeakyReLU(0.1),
            nn.Conv2d(channels, groups * kk * 2, 3, padding=1))
        for head in (self.mask_head, self.offset_head):
            nn.init.zeros_(head[-1].weight)
            nn.init.zeros_(head[-1].bias)
        self.weight = nn.Parameter(torch.empty(channels, neighbors * channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(channels))
        nn.init.kaiming_uniform_(self.weight, a=5 ** 0.5)

    def heads(self, current: torch.Tensor, neighbors: list[torch.Tensor],
              flows: list[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
        """Raw head outputs (mask logits, residual offsets) from the conditioning stack."""
        warped = [warp(f, o) for f, o in zip(neighbors, flows)]
        cond = torch.cat([current, *warped, *flows], dim=1)
        return self.mask_head(cond), self.offset_head(cond)

    def offsets_from(self, residual: torch.Tensor, flows: list[torch.Tensor]) -> torch.Tensor:
        """Add each neighbor's flow to its groups' per-tap residuals, then clamp."""
        n, _, h, w = residual.shape
        kk = self.kernel_size ** 2
        per = self.groups // self.neighbors
        res = residual.view(n, self.neighbors, per, kk, 2, h, w)
        base = torch.stack(flows, dim=1).view(n, self.neighbors, 1, 1, 2, h, w)
        total = soft_clamp(res + base, self.clamp_ratio * max(h, w))
        return total.view(n, self.groups * kk * 2, h, w)

    def forward(self, current: torch.Tensor, neighbors: list[torch.Tensor],
                flows: list[torch.Tensor]) -> torch.Tensor:
        if len(neighbors) != self.neighbors or len(flows) != self.neighbors:
            raise ValueError(f"expected {self.neighbors} neighbors and flows")
        for f in (current, *neighbors):
            if f.shape[1] != self.channels:
                raise ValueError(f"feature has {f.shape[1]} channels, expected {self.channels}")
        mask_logits, residual = self.heads(current, neighbors, flows)
        offsets = self.offsets_from(residual, flows)
        return modulated_deform_conv2d(torch.cat(neighbors, dim=1), offsets,
                                       torch.sigmoid(mask_logits), self.weight, self.bias)


def align_pair(module: FlowGuidedAlignment, f_i: torch.Tensor, f_next: torch.Tensor,
               flow: torch.Tensor) -> torch.Tensor:
    """Align frame-i features onto frame i+1 given the flow from i to i+1."""
    return module(f_next, [f_i], [flow])


# --------------------------------------------------------------------------
# Grid propagation
# --------------------------------------------------------------------------


@dataclass
class PropagationState:
    """Per-branch outputs and, for each step, the frames whose propagated
    states it consumed (plus the frame itself)."""

    features: dict[str, list[torch.Tensor]] = field(default_factory=dict)
    dependencies: dict[str, list[set[int]]] = field(default_factory=dict)
    order: tuple[str, ...] = BRANCHES


class GridPropagation(nn.Module):
    """Bidirectional grid propagation, first or second order.

    Every branch has a two-slot alignment module.  In first-order mode the
    second slot always receives zeros, so both modes share one parameter
    layout and coincide when no second-previous frame exists.
    """

    def __init__(self, channels: int, num_blocks: int = 2, order: str = "SOGP",
                 kernel_size: int = 3, groups: int = 8, clamp_ratio: float = 0.25):
        super().__init__()
        if order not in ("FOGP", "SOGP"):
            raise ValueError(f"unknown propagation order {order!r}")
        self.order = order
        self.channels = channels
        self.align = nn.ModuleDict()
        self.backbone = nn.ModuleDict()
        for i, name in enumerate(BRANCHES):
            self.align[name] = FlowGuidedAlignment(channels, 2, kernel_size, groups, clamp_ratio)
            self.backbone[name] = ResidualStack((2 + i) * channels, channels, num_blocks)
        self.fusion = nn.Conv2d((1 + len(BRANCHES)) * channels, channels, 1)

    def _branch(self, name: str, feats: list[torch.Tensor], flows: list[torch.Tensor],
                state: PropagationState) -> None:
        t = len(feats)
        backward = name.startswith("backward")
        frames = range(t - 1, -1, -1) if backward else range(t)
        step = 1 if backward else -1  # offset from i to the previously processed frame
        prop: dict[int, torch.Tensor] = {}
        deps: list[set[int]] = [set() for _ in range(t)]
        for i in frames:
            earlier = [state.features[b][i] for b in state.order[:BRANCHES.index(name)]]
            x_in = torch.cat([feats[i], *earlier], dim=1)
            j1, j2 = i + step, i + 2 * step
            used = {i}
            if j1 in prop:
                # flows[k] links frames k and k+1 in the branch's direction
                f1 = flows[min(i, j1)]
                n1 = prop[j1]
                if self.order == "SOGP" and j2 in prop:
                    f2 = compose_flows(f1, flows[min(j1, j2)])
                    n2 = prop[j2]
                    used |= {j1, j2}
                else:
                    f2 = torch.zeros_like(f1)
                    n2 = torch.zeros_like(n1)
                    used.add(j1)
                aligned = self.align[name](feats[i], [n1, n2], [f1, f2])
            else:
                aligned = torch.zeros_like(feats[i])
            prop[i] = aligned + self.backbone[name](torch.cat([x_in, aligned], dim=1))
            deps[i] = used
        state.features[name] = [prop[i] for i in range(t)]
        state.dependencies[name] = deps

    def forward(self, feats: list[torch.Tensor], forward_flows: list[torch.Tensor],
                backward_flows: list[torch.Tensor]) -> tuple[list[torch.Tensor], PropagationState]:
        """Propagate per-frame features.

        Args:
            feats: T tensors (N, C, H, W).
            forward_flows: T-1 flows; entry i warps frame i onto frame i+1.
            backward_flows: T-1 flows; entry i warps frame i+1 onto frame i.
        """
        t = len(feats)
        if t < 2:
            raise ValueError(f"propagation needs at least 2 frames, got {t}")
        if len(forward_flows) != t - 1 or len(backward_flows) != t - 1:
            raise ValueError("need T-1 flows in each direction")
        state = PropagationState()
        for name in BRANCHES:
            flows = backward_flows if name.startswith("backward") else forward_flows
            self._branch(name, feats, flows, state)
        out = [self.fusion(torch.cat([feats[i]] + [state.features[b][i] for b in BRANCHES], dim=1))
               for i in range(t)]
        return out, state


class MGDA(nn.Module):
    """Images (N, T, H, W) -> aligned features (N, T, C, H, W).

    With ``cfg.enabled`` false the extractor features are returned as they
    are, so each frame is processed on its own.
    """

    def __init__(self, cfg: MgdaConfig | None = None, in_channels: int = 1):
        super().__init__()
        self.cfg = cfg = cfg or MgdaConfig()
        self.extractor = FeatureExtractor(in_channels, cfg.channels, cfg.residual_blocks)
        if cfg.enabled:
            self.flow = FlowEstimator(in_channels, cfg.pyramid_levels, cfg.flow_channels,
                                      cfg.flow_kernel, cfg.offset_clamp)
            self.propagation = GridPropagation(cfg.channels, cfg.propagation_blocks, cfg.propagation,
                                               cfg.kernel_size, cfg.offset_groups, cfg.offset_clamp)
        self.last_state: PropagationState | None = None

    def compute_flows(self, images: torch.Tensor) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        n, t, h, w = images.shape
        prev = images[:, :-1].reshape(-1, 1, h, w)
        nxt = images[:, 1:].reshape(-1, 1, h, w)
        fwd = self.flow(prev, nxt).view(n, t - 1, 2, h, w)
        bwd = self.flow(nxt, prev).view(n, t - 1, 2, h, w)
        return list(fwd.unbind(1)), list(bwd.unbind(1))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        n, t, h, w = images.shape
        feats = self.extractor(images.reshape(n * t, 1, h, w)).view(n, t, -1, h, w)
        if not self.cfg.enabled:
            self.last_state = None
            return feats
        fwd, bwd = self.compute_flows(images)
        out, self.last_state = self.propagation(list(feats.unbind(1)), fwd, bwd)
        return torch.stack(out, dim=1)
