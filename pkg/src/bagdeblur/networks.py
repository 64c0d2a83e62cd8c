"""Generator (encoder -> attention chain -> decoder, global skip) and the
fully-convolutional patch critic.

Images are (B, 3, H, W) or (3, H, W) tensors with values in [-1, 1].
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import BlurAttentionModule, ResidualChain, check_finite, init_parameters

ENCODER_CHANNELS = (18, 36, 72)
CRITIC_MIN_SIZE = 70

# Topology of the default generator; ablation variants override this.
DEFAULT_VARIANT = {
    "block_kind": "denseblock_in",
    "use_sau": True,
    "connection_kind": "multilevel",
    "module_count": 4,
}


def _conv_in_relu(in_ch, out_ch, kernel, stride):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2),
        nn.InstanceNorm2d(out_ch),
        nn.ReLU(),
    )


class Generator(nn.Module):
    """Restores a blurred image and exposes the per-module attention maps.

    Encoder: 7x7 stride-1 conv -> 18 ch, then two 3x3 stride-2 convs
    (36, 72 ch), each with instance normalization + ReLU, downsampling by 4.
    Transform chain: residual chain of attention modules at 72 x H/4 x W/4.
    Decoder: two 3x3 stride-2 transposed convs (36, 18 ch, IN + ReLU), then
    a 7x7 stride-1 conv -> 3 ch with tanh producing a residual in [-1, 1].
    Output: clamp(input + residual, -1, 1).
    """

    def __init__(self, transforms=None, connection="multilevel", variant=None, seed=0):
        super().__init__()
        c1, c2, c3 = ENCODER_CHANNELS
        self.encoder = nn.Sequential(
            _conv_in_relu(3, c1, 7, 1),
            _conv_in_relu(c1, c2, 3, 2),
            _conv_in_relu(c2, c3, 3, 2),
        )
        if transforms is None:
            transforms = [BlurAttentionModule(c3) for _ in range(4)]
        self.chain = ResidualChain(transforms, connection)
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(c3, c2, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(c2),
            nn.ReLU(),
            nn.ConvTranspose2d(c2, c1, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(c1),
            nn.ReLU(),
        )
        self.head = nn.Conv2d(c1, 3, 7, padding=3)
        self.variant = dict(variant) if variant is not None else dict(DEFAULT_VARIANT)
        init_parameters(self, seed)
        # damp the residual head so the generator starts near identity
        with torch.no_grad():
            self.head.weight.mul_(0.1)

    def forward(self, image):
        h, w = image.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"generator input must have H, W divisible by 4, got {h}x{w}")
        check_finite(image, "Generator")
        feats = self.encoder(image)
        feats, attention_maps = self.chain(feats)
        residual = torch.tanh(self.head(self.decoder(feats)))
        return torch.clamp(image + residual, -1.0, 1.0), attention_maps


class PatchCritic(nn.Module):
    """70x70-receptive-field patch critic emitting unbounded scores.

    4x4 convolutions: stride 2 -> 64 ch (no normalization), stride 2 ->
    128 ch, stride 2 -> 256 ch, stride 1 -> 512 ch (instance normalization
    on the middle three), each with leaky-ReLU slope 0.2, then a final 4x4
    stride-1 conv -> 1 channel with no activation. Instance normalization
    keeps samples independent, which the gradient penalty relies on.
    """

    def __init__(self, seed=0):
        super().__init__()
        self.stack = nn.Sequential(
            nn.Conv2d(3, 64, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(64, 128, 4, stride=2, padding=1),
            nn.InstanceNorm2d(128),
            nn.LeakyReLU(0.2),
            nn.Conv2d(128, 256, 4, stride=2, padding=1),
            nn.InstanceNorm2d(256),
            nn.LeakyReLU(0.2),
            nn.Conv2d(256, 512, 4, stride=1, padding=1),
            nn.InstanceNorm2d(512),
            nn.LeakyReLU(0.2),
            nn.Conv2d(512, 1, 4, stride=1, padding=1),
        )
        init_parameters(self, seed)

    def forward(self, image):
        h, w = image.shape[-2:]
        if h < CRITIC_MIN_SIZE or w < CRITIC_MIN_SIZE:
            raise ValueError(
                f"critic input must be at least {CRITIC_MIN_SIZE}x{CRITIC_MIN_SIZE}, got {h}x{w}"
            )
        check_finite(image, "PatchCritic")
        return self.stack(image)

    @staticmethod
    def score_map_size(n):
        """Spatial extent of the score map for an n-pixel input edge."""
        for stride in (2, 2, 2, 1, 1):
            n = (n + 2 - 4) // stride + 1
        return n
