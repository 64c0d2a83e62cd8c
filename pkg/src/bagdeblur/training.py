"""Adversarial training loop: 5:1 critic/generator updates, Adam with a
linear learning-rate decay tail, checkpointing, loss logging, and periodic
attention-map snapshots.
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .errors import CheckpointError, ConfigError, NumericalError
from .losses import (FeatureExtractor, LossConfig, clip_critic_weights,
                     critic_loss, generator_adv_loss, joint_loss,
                     perceptual_loss)
from .networks import PatchCritic
from .render import RenderSpec, render_attention
from .variants import build_variant, resolve_variant

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 300
    lr0: float = 1e-4
    decay_start: int = 150
    critic_updates_per_gen: int = 5
    batch_size: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    snapshot_every: int = 0
    checkpoint_every: int = 0
    crop: int = 256
    max_steps: int = 0
    deterministic: bool = True
    adversarial: bool = True

    def __post_init__(self):
        if not 0 < self.decay_start <= self.epochs:
            raise ConfigError("need 0 < decay_start <= epochs")
        if self.critic_updates_per_gen < 1:
            raise ConfigError("critic_updates_per_gen must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.crop % 4:
            raise ConfigError("crop size must be divisible by 4")


def lr_schedule(epoch, cfg):
    """Constant lr0 until decay_start, then linear to zero at the last epoch."""
    if not 0 <= epoch <= cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside 0..{cfg.epochs}")
    if epoch < cfg.decay_start:
        return cfg.lr0
    if epoch >= cfg.epochs:  # also covers decay_start == epochs
        return 0.0
    return cfg.lr0 * (cfg.epochs - epoch) / (cfg.epochs - cfg.decay_start)


@dataclass
class LossRecord:
    step: int
    epoch: int
    lr: float
    critic_loss: float
    adv_loss: float
    content_loss: float
    joint_loss: float
    wall_ms: float

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainState:
    cfg: TrainConfig
    loss_cfg: LossConfig
    generator: torch.nn.Module
    critic: torch.nn.Module
    extractor: FeatureExtractor
    opt_g: torch.optim.Optimizer
    opt_c: torch.optim.Optimizer
    extractor_source: str
    epoch: int = 0
    global_step: int = 0
    data_rng: np.random.Generator = None
    torch_rng: torch.Generator = None
    loss_sums: dict = field(default_factory=dict)

    def running_means(self):
        return {k: s / n for k, (s, n) in self.loss_sums.items() if n}

    def _accumulate(self, record):
        for key in ("critic_loss", "adv_loss", "content_loss", "joint_loss"):
            s, n = self.loss_sums.get(key, (0.0, 0))
            self.loss_sums[key] = (s + getattr(record, key), n + 1)


def make_state(cfg, loss_cfg=None, variant="bag", extractor_source="auto"):
    """Fresh networks, optimizers, and RNG streams from the config seed."""
    loss_cfg = loss_cfg or LossConfig()
    generator = build_variant(variant, seed=cfg.seed)
    critic = PatchCritic(seed=cfg.seed + 1)
    extractor = FeatureExtractor.load(extractor_source,
                                      loss_cfg.perceptual_layer_index)
    opt_g = torch.optim.Adam(generator.parameters(), lr=cfg.lr0,
                             betas=(cfg.beta1, cfg.beta2))
    opt_c = torch.optim.Adam(critic.parameters(), lr=cfg.lr0,
                             betas=(cfg.beta1, cfg.beta2))
    torch_rng = torch.Generator()
    torch_rng.manual_seed(cfg.seed + 2)
    return TrainState(
        cfg=cfg, loss_cfg=loss_cfg, generator=generator, critic=critic,
        extractor=extractor, opt_g=opt_g, opt_c=opt_c,
        extractor_source=extractor_source,
        data_rng=np.random.default_rng(cfg.seed + 3), torch_rng=torch_rng,
    )


class PairSampler:
    """Endless stream of cropped training batches.

    Cycles a shuffled order over the index, reshuffling per pass; all
    randomness comes from the state's data RNG, so the stream is a pure
    function of (index, rng state).
    """

    def __init__(self, index, cfg, rng):
        if len(index) == 0:
            raise ConfigError("training index is empty")
        self.index = index
        self.cfg = cfg
        self.rng = rng
        self._order = []

    def _next_pair(self):
        if not self._order:
            self._order = list(self.rng.permutation(len(self.index)))
        sample = self.index.load_pair(self._order.pop(0))
        size = min(self.cfg.crop, sample.blurred.shape[1], sample.blurred.shape[2])
        size -= size % 4
        return data_mod.random_crop_pair(sample, size, self.rng)

    def next_batch(self):
        pairs = [self._next_pair() for _ in range(self.cfg.batch_size)]
        blurred = torch.from_numpy(np.stack([p.blurred for p in pairs]))
        sharp = torch.from_numpy(np.stack([p.sharp for p in pairs]))
        return blurred, sharp


def _check_finite_loss(value, name, step):
    if not torch.isfinite(value).all():
        raise NumericalError(
            f"step {step}: non-finite {name} ({float(value.detach()):g}); "
            "aborting before parameters are touched")


def _guarded_step(optimizer, module, name, step):
    """Apply the optimizer only when every gradient is finite."""
    for pname, p in module.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            optimizer.zero_grad(set_to_none=True)
            raise NumericalError(
                f"step {step}: non-finite gradient in {name} ({pname}); "
                "update skipped")
    optimizer.step()


def training_step(state, next_batch):
    """One protocol step: `critic_updates_per_gen` critic updates (fresh
    batch and freshly generated fake each, generator frozen), then one
    generator update on the joint objective. Returns the step's LossRecord.

    `next_batch` is called once per update and must return a
    (blurred, sharp) tensor pair.
    """
    cfg, loss_cfg = state.cfg, state.loss_cfg
    t0 = time.perf_counter()
    lr = lr_schedule(min(state.epoch, cfg.epochs), cfg)
    for opt in (state.opt_c, state.opt_g):
        for group in opt.param_groups:
            group["lr"] = lr

    critic_losses = []
    if cfg.adversarial:
        for _ in range(cfg.critic_updates_per_gen):
            blurred, sharp = next_batch()
            with torch.inference_mode():
                fake, _ = state.generator(blurred)
            fake = fake.clone()  # leave inference mode
            c_loss = critic_loss(state.critic, sharp, fake, loss_cfg,
                                 rng=state.torch_rng)
            _check_finite_loss(c_loss, "critic loss", state.global_step)
            state.opt_c.zero_grad(set_to_none=True)
            c_loss.backward()
            _guarded_step(state.opt_c, state.critic, "critic", state.global_step)
            if loss_cfg.lipschitz_mode == "clip":
                clip_critic_weights(state.critic, loss_cfg.clip_value)
            critic_losses.append(float(c_loss.detach()))

    blurred, sharp = next_batch()
    restored, _ = state.generator(blurred)
    if cfg.adversarial:
        adv = generator_adv_loss(state.critic, restored)
    else:
        adv = torch.zeros((), dtype=restored.dtype)
    content = perceptual_loss(restored, sharp, state.extractor)
    total = joint_loss(adv, content, loss_cfg)
    _check_finite_loss(total, "joint loss", state.global_step)
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    _guarded_step(state.opt_g, state.generator, "generator", state.global_step)

    state.global_step += 1
    record = LossRecord(
        step=state.global_step,
        epoch=state.epoch,
        lr=lr,
        critic_loss=float(np.mean(critic_losses)) if critic_losses else 0.0,
        adv_loss=float(adv.detach()),
        content_loss=float(content.detach()),
        joint_loss=float(total.detach()),
        wall_ms=(time.perf_counter() - t0) * 1e3,
    )
    state._accumulate(record)
    return record


def train(state, index, out_dir=None, max_steps=None, probe_image=None,
          render_spec=None):
    """Run epochs until cfg.epochs or the step budget is exhausted.

    One epoch is one pass over the training index, counted in protocol steps
    (len(index) steps per epoch). Writes loss_log.jsonl, periodic snapshots,
    and checkpoints under out_dir when given. Returns all LossRecords.
    """
    cfg = state.cfg
    sampler = PairSampler(index, cfg, state.data_rng)
    budget = max_steps if max_steps is not None else cfg.max_steps
    out_dir = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "loss_log.jsonl"
    records = []
    steps_per_epoch = len(index)

    def budget_left():
        return budget <= 0 or state.global_step < budget

    log_file = open(log_path, "a") if log_path else None
    try:
        while state.epoch < cfg.epochs and budget_left():
            for _ in range(steps_per_epoch):
                if not budget_left():
                    break
                record = training_step(state, sampler.next_batch)
                records.append(record)
                if log_file:
                    log_file.write(json.dumps(record.to_dict()) + "\n")
                    log_file.flush()
            state.epoch = min(state.epoch + 1, cfg.epochs)
            if out_dir is not None and probe_image is not None and \
                    cfg.snapshot_every and state.epoch % cfg.snapshot_every == 0:
                snapshot_attention(state, probe_image, state.epoch,
                                   out_dir / "snapshots", render_spec)
            if out_dir is not None and cfg.checkpoint_every and \
                    state.epoch % cfg.checkpoint_every == 0:
                save_checkpoint(state, out_dir / f"checkpoint_e{state.epoch}.pt")
    finally:
        if log_file:
            log_file.close()
    return records


def snapshot_attention(state, probe_image, epoch, out_dir, render_spec=None):
    """Render every attention map of the generator on the probe image to
    `attn_e{epoch}_m{k}.png`. I/O failures are logged and skipped so
    training can continue; returns the paths actually written.
    """
    generator = state.generator if hasattr(state, "generator") else state
    probe = torch.as_tensor(probe_image)
    with torch.no_grad():
        _, maps = generator(probe)
    out_dir = Path(out_dir)
    written = []
    for k, attention in enumerate(maps, start=1):
        path = out_dir / f"attn_e{epoch}_m{k}.png"
        try:
            data_mod.save_image_u8(path, render_attention(attention, render_spec))
            written.append(path)
        except OSError as e:
            log.warning("snapshot %s failed: %s", path, e)
    return written


# -- checkpointing ------------------------------------------------------------

def save_checkpoint(state, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "variant": state.generator.variant,
        "train_cfg": asdict(state.cfg),
        "loss_cfg": asdict(state.loss_cfg),
        "extractor_source": state.extractor_source,
        "epoch": state.epoch,
        "global_step": state.global_step,
        "generator": state.generator.state_dict(),
        "critic": state.critic.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_c": state.opt_c.state_dict(),
        "data_rng": state.data_rng.bit_generator.state,
        "torch_rng": state.torch_rng.get_state(),
        "loss_sums": state.loss_sums,
    }
    torch.save(payload, path)


def _load_payload(path):
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    version = payload.get("format_version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format version {version!r}, "
            f"expected {CHECKPOINT_VERSION}")
    return payload


def load_checkpoint(path, expected_variant=None):
    """Rebuild a full TrainState from a checkpoint archive."""
    payload = _load_payload(path)
    variant = payload["variant"]
    if expected_variant is not None:
        expected = resolve_variant(expected_variant).to_dict()
        if expected != variant:
            raise CheckpointError(
                f"checkpoint variant {variant} does not match expected {expected}")
    cfg = TrainConfig(**payload["train_cfg"])
    loss_cfg = LossConfig(**payload["loss_cfg"])
    state = make_state(cfg, loss_cfg, variant=variant,
                       extractor_source=payload["extractor_source"])
    state.generator.load_state_dict(payload["generator"])
    state.critic.load_state_dict(payload["critic"])
    state.opt_g.load_state_dict(payload["opt_g"])
    state.opt_c.load_state_dict(payload["opt_c"])
    state.epoch = payload["epoch"]
    state.global_step = payload["global_step"]
    state.data_rng = np.random.default_rng()
    state.data_rng.bit_generator.state = payload["data_rng"]
    state.torch_rng.set_state(payload["torch_rng"])
    state.loss_sums = dict(payload["loss_sums"])
    return state


def load_generator(path, expected_variant=None):
    """Load only the generator (for inference and evaluation)."""
    payload = _load_payload(path)
    variant = payload["variant"]
    if expected_variant is not None:
        expected = resolve_variant(expected_variant).to_dict()
        if expected != variant:
            raise CheckpointError(
                f"checkpoint variant {variant} does not match expected {expected}")
    generator = build_variant(variant)
    generator.load_state_dict(payload["generator"])
    generator.eval()
    return generator
