"""Core feature-transform blocks: dense-stack extraction, spatial attention,
the attention-gated module combining them, and the residual chain wiring.

All blocks are pure functions of (input, parameters): no buffers, no running
statistics. Inputs may be (C, H, W) or (B, C, H, W); outputs match.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

DENSE_CHANNELS = 72
DENSE_LAYERS = 6
ATTENTION_KERNEL = 7

CONNECTION_KINDS = ("one_level", "multilevel")


def seeded_generator(seed):
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def init_parameters(module, seed):
    """He-normal conv weights (ReLU gain, fan-in scaled), zero biases.

    Deterministic given the seed; does not touch the global RNG.
    """
    g = seeded_generator(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            std = (2.0 / fan_in) ** 0.5
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=g)
                if m.bias is not None:
                    m.bias.zero_()
    return module


def check_finite(x, where):
    if not torch.isfinite(x).all():
        bad = (~torch.isfinite(x)).sum().item()
        raise ValueError(f"{where}: input contains {bad} non-finite values")


def _check_channels(x, expected, where):
    c = x.shape[-3]
    if c != expected:
        raise ValueError(f"{where}: expected {expected} channels, got {c}")


class DenseBlockUnit(nn.Module):
    """Six 3x3 conv layers, each consuming the concatenation of the block
    input and all previous layer outputs (input widths 72, 144, ..., 432).

    Every layer: conv (72 out, stride 1, pad 1) -> normalization -> ReLU.
    The unit output is the final layer's 72-channel map, so the block is
    channel-preserving and can sit inside residual additions.
    """

    def __init__(self, channels=DENSE_CHANNELS, layers=DENSE_LAYERS, norm="instance"):
        super().__init__()
        if norm not in ("instance", "batch"):
            raise ValueError(f"unknown norm mode {norm!r}")
        self.channels = channels
        self.convs = nn.ModuleList(
            nn.Conv2d(channels * k, channels, 3, padding=1) for k in range(1, layers + 1)
        )
        if norm == "instance":
            self.norms = nn.ModuleList(nn.InstanceNorm2d(channels) for _ in range(layers))
        else:
            self.norms = nn.ModuleList(nn.BatchNorm2d(channels) for _ in range(layers))

    def forward(self, x):
        _check_channels(x, self.channels, "DenseBlockUnit")
        check_finite(x, "DenseBlockUnit")
        feats = [x]
        for conv, norm in zip(self.convs, self.norms):
            y = F.relu(norm(conv(torch.cat(feats, dim=-3))))
            feats.append(y)
        return feats[-1]


class SpatialAttentionUnit(nn.Module):
    """Channel-wise max and mean maps, concatenated (max first), passed
    through a 7x7 conv and a sigmoid. Emits a single-channel gate in (0, 1)
    at the input's spatial resolution.
    """

    def __init__(self, kernel_size=ATTENTION_KERNEL):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    @staticmethod
    def pool(f):
        """Return (max_map, mean_map), each with a single channel."""
        return f.max(dim=-3, keepdim=True).values, f.mean(dim=-3, keepdim=True)

    def forward(self, f):
        if f.shape[-3] < 1:
            raise ValueError("SpatialAttentionUnit: need at least one channel")
        check_finite(f, "SpatialAttentionUnit")
        f_max, f_avg = self.pool(f)
        return torch.sigmoid(self.conv(torch.cat([f_max, f_avg], dim=-3)))


class BlurAttentionModule(nn.Module):
    """Dense-stack features gated by the spatial attention map.

    forward(x) -> (gated_features, attention_map); the attention map is a
    1-channel tensor broadcast across the feature channels, returned so
    callers can export it for visualization.
    """

    def __init__(self, channels=DENSE_CHANNELS, norm="instance"):
        super().__init__()
        self.dbu = DenseBlockUnit(channels, norm=norm)
        self.sau = SpatialAttentionUnit()

    def forward(self, x):
        features = self.dbu(x)
        attention = self.sau(features)
        return attention * features, attention


class ResidualChain(nn.Module):
    """Chains transform modules with residual wiring.

    Each stage computes y_k = module_k(x_k) + x_k. With one_level wiring the
    next stage consumes y_k directly; with multilevel wiring it consumes
    y_k + x_1 where x_1 is the chain input. The chain output is y_M.

    Modules may return either a tensor or a (tensor, attention) pair;
    attention maps are collected in stage order.
    """

    def __init__(self, modules, connection="multilevel"):
        super().__init__()
        modules = list(modules)
        if not modules:
            raise ValueError("ResidualChain: need at least one module")
        if connection not in CONNECTION_KINDS:
            raise ValueError(f"unknown connection kind {connection!r}")
        self.blocks = nn.ModuleList(modules)
        self.connection = connection

    def forward(self, x):
        first = x
        cur = x
        attention_maps = []
        y = cur
        for block in self.blocks:
            out = block(cur)
            if isinstance(out, tuple):
                transformed, attention = out
                attention_maps.append(attention)
            else:
                transformed = out
            y = transformed + cur
            cur = y + first if self.connection == "multilevel" else y
        return y, attention_maps
