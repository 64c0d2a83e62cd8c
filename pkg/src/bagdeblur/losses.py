"""Adversarial (Wasserstein, gradient-penalty) and perceptual content losses,
plus the joint objective combining them.
"""

import hashlib
import os
import re
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

# VGG19 convolutional plan; 'M' marks 2x2 max-pooling.
VGG19_PLAN = (64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
              512, 512, 512, 512, "M", 512, 512, 512, 512)
VGG19_CONV_COUNT = sum(1 for c in VGG19_PLAN if c != "M")

# ImageNet statistics the pretrained extractor expects, RGB order, [0,1] scale.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

WEIGHTS_ENV_VAR = "BAGDEBLUR_VGG19"


@dataclass
class LossConfig:
    lambda_content: float = 100.0
    gp_weight: float = 10.0
    perceptual_layer_index: int = 7
    lipschitz_mode: str = "penalty"  # "penalty" or "clip"
    clip_value: float = 0.01

    def __post_init__(self):
        if self.lambda_content < 0:
            raise ConfigError("lambda_content must be >= 0")
        if self.gp_weight < 0:
            raise ConfigError("gp_weight must be >= 0")
        if not 1 <= self.perceptual_layer_index <= VGG19_CONV_COUNT:
            raise ConfigError(
                f"perceptual_layer_index must be in 1..{VGG19_CONV_COUNT}")
        if self.lipschitz_mode not in ("penalty", "clip"):
            raise ConfigError("lipschitz_mode must be 'penalty' or 'clip'")


def _batched(x):
    return x if x.dim() == 4 else x.unsqueeze(0)


class FeatureExtractor(nn.Module):
    """Frozen VGG19 convolutional prefix ending at the activation of the
    n-th convolution layer (default 7). Inputs are images in [-1, 1]; the
    extractor rescales to [0, 1] and applies the ImageNet per-channel
    normalization internally.
    """

    def __init__(self, layer_index=7):
        super().__init__()
        if not 1 <= layer_index <= VGG19_CONV_COUNT:
            raise ConfigError(f"layer_index must be in 1..{VGG19_CONV_COUNT}")
        self.layer_index = layer_index
        layers = []
        in_ch = 3
        convs_added = 0
        for entry in VGG19_PLAN:
            if entry == "M":
                layers.append(nn.MaxPool2d(2))
            else:
                layers.append(nn.Conv2d(in_ch, entry, 3, padding=1))
                layers.append(nn.ReLU())
                in_ch = entry
                convs_added += 1
                if convs_added == layer_index:
                    break
        self.features = nn.Sequential(*layers)
        mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
        std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
        self.register_buffer("input_mean", mean)
        self.register_buffer("input_std", std)
        self.requires_grad_(False)
        self.eval()

    def train(self, mode=True):  # stays frozen regardless of trainer calls
        return super().train(False)

    def forward(self, image):
        x = _batched(image)
        x = (x + 1.0) * 0.5
        x = (x - self.input_mean) / self.input_std
        return self.features(x)

    # -- weight loading -----------------------------------------------------

    @classmethod
    def from_state_dict(cls, state, layer_index=7):
        """Build from a torchvision-layout VGG19 state dict (features.N.*)."""
        ext = cls(layer_index)
        own = ext.features.state_dict()
        subset = {}
        for key in own:
            src = f"features.{key}" if f"features.{key}" in state else key
            if src not in state:
                raise ConfigError(f"VGG19 state dict is missing {src!r}")
            subset[key] = state[src]
        ext.features.load_state_dict(subset)
        ext.requires_grad_(False)
        return ext

    @classmethod
    def from_file(cls, path, layer_index=7, sha256=None):
        """Load pretrained weights from a .pth file, verifying its checksum.

        The expected digest is taken from `sha256` when given, otherwise from
        a torchvision-style hash tag in the filename (e.g. vgg19-dcbb9e9d.pth,
        where the tag is a prefix of the file's sha256).
        """
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"VGG19 weights file not found: {path}")
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        expected = sha256
        if expected is None:
            m = re.search(r"-([0-9a-f]{8,64})\.pth$", path.name)
            expected = m.group(1) if m else None
        if expected is not None and not digest.startswith(expected.lower()):
            raise ConfigError(
                f"checksum mismatch for {path}: sha256 {digest[:16]}... does not "
                f"start with expected {expected}")
        state = torch.load(path, map_location="cpu", weights_only=True)
        return cls.from_state_dict(state, layer_index)

    @classmethod
    def from_random(cls, seed, layer_index=7):
        """Deterministic He-initialized weights (no pretrained file needed).

        Feature distances under random convolutions are still a valid
        differentiable image discrepancy; use this for tests and development
        when the pretrained file is unavailable.
        """
        ext = cls(layer_index)
        g = torch.Generator()
        g.manual_seed(int(seed))
        with torch.no_grad():
            for m in ext.features.modules():
                if isinstance(m, nn.Conv2d):
                    fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                    m.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=g)
                    m.bias.zero_()
        ext.requires_grad_(False)
        return ext

    @classmethod
    def load(cls, source="auto", layer_index=7):
        """Resolve an extractor from a source string.

        "auto"        -> $BAGDEBLUR_VGG19, then the torch hub checkpoint cache
        "random[:N]"  -> seeded random weights (seed N, default 0)
        anything else -> treated as a weights file path
        """
        if source.startswith("random"):
            _, _, seed = source.partition(":")
            return cls.from_random(int(seed) if seed else 0, layer_index)
        if source != "auto":
            return cls.from_file(source, layer_index)
        env_path = os.environ.get(WEIGHTS_ENV_VAR)
        if env_path:
            return cls.from_file(env_path, layer_index)
        hub = Path(os.environ.get("TORCH_HOME", Path.home() / ".cache" / "torch"))
        for cand in sorted((hub / "hub" / "checkpoints").glob("vgg19-*.pth")):
            return cls.from_file(cand, layer_index)
        raise ConfigError(
            "pretrained VGG19 weights not found. Download vgg19-dcbb9e9d.pth "
            f"(the torchvision VGG19 release) and either set ${WEIGHTS_ENV_VAR} "
            "to its path or place it under $TORCH_HOME/hub/checkpoints/. For "
            "development without pretrained weights use source 'random:<seed>'.")


def gradient_penalty(critic, real, fake, rng=None):
    """Mean squared deviation of the critic's input-gradient norm from 1 on
    random interpolates between real and fake samples.

    The differentiated quantity is each sample's spatial mean of the patch
    score map, so samples must not couple inside the critic.
    """
    real = _batched(real)
    fake = _batched(fake)
    eps = torch.rand((real.shape[0], 1, 1, 1), generator=rng,
                     dtype=real.dtype, device=real.device)
    mixed = (eps * real + (1.0 - eps) * fake).detach().requires_grad_(True)
    scores = critic(mixed).mean(dim=(1, 2, 3))
    grads, = torch.autograd.grad(scores.sum(), mixed, create_graph=True)
    norms = grads.reshape(grads.shape[0], -1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def critic_loss(critic, real, fake, cfg=None, rng=None):
    """Critic objective (lower is better for the critic):
    mean score on fakes minus mean score on reals, plus the weighted
    gradient penalty. `fake` is detached here; pass generator outputs as-is.
    """
    cfg = cfg or LossConfig()
    real = _batched(real)
    fake = _batched(fake).detach()
    loss = critic(fake).mean() - critic(real).mean()
    if cfg.lipschitz_mode == "penalty" and cfg.gp_weight > 0:
        loss = loss + cfg.gp_weight * gradient_penalty(critic, real, fake, rng)
    return loss


def generator_adv_loss(critic, fake):
    """Generator-side adversarial term: negated mean critic score."""
    return -critic(_batched(fake)).mean()


def perceptual_loss(restored, sharp, extractor):
    """Mean squared feature difference, normalized by the feature-map size
    (channels x width x height), averaged over the batch.
    """
    fa = extractor(restored)
    fb = extractor(sharp)
    return ((fa - fb) ** 2).mean(dim=(1, 2, 3)).mean()


def joint_loss(adv, content, cfg=None):
    """Total generator objective: adversarial + lambda * content."""
    cfg = cfg or LossConfig()
    return adv + cfg.lambda_content * content


def clip_critic_weights(critic, clip_value):
    """Hard weight clipping, the config fallback for Lipschitz enforcement."""
    with torch.no_grad():
        for p in critic.parameters():
            p.clamp_(-clip_value, clip_value)
