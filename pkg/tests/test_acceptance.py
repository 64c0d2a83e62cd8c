"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s`. Criterion 7 trains a
single-pair overfit at 256x256 and dominates the runtime (tens of minutes
on one CPU core); everything else finishes in a few minutes combined.
"""

import math
import time

import numpy as np
import pytest
import torch
import torch.nn as nn

from bagdeblur.blocks import (BlurAttentionModule, DenseBlockUnit,
                              ResidualChain, SpatialAttentionUnit,
                              init_parameters)
from bagdeblur.data import (ImageSample, KernelSpec, NoiseSpec, denormalize,
                            normalize, random_crop_pair, synthesize_blur)
from bagdeblur.evaluation import psnr, ssim
from bagdeblur.losses import (FeatureExtractor, LossConfig, critic_loss,
                              generator_adv_loss, gradient_penalty,
                              joint_loss, perceptual_loss)
from bagdeblur.networks import Generator, PatchCritic
from bagdeblur.render import COOLWARM_LUT, RenderSpec, render_attention
from bagdeblur.training import (TrainConfig, load_checkpoint, lr_schedule,
                                make_state, save_checkpoint,
                                snapshot_attention, train, training_step)
from bagdeblur.variants import (PRESETS, build_variant, conv_layer_count,
                                make_transform, parameter_count)
from conftest import check_gradients, fval, make_test_image, sample_entries
from test_evaluation import reference_ssim


def _pass(criterion, message, t0=None):
    elapsed = f" [{time.perf_counter() - t0:.1f}s]" if t0 else ""
    print(f"\nACCEPTANCE {criterion} PASS: {message}{elapsed}")


class _ZeroModule(nn.Module):
    def forward(self, x):
        return torch.zeros_like(x)


def test_criterion_1_architecture_invariants():
    t0 = time.perf_counter()
    # attention maps strictly inside (0, 1)
    generator = Generator(seed=0)
    x = torch.rand(1, 3, 64, 64) * 2 - 1
    _, maps = generator(x)
    assert len(maps) == 4
    for a in maps:
        assert (a > 0).all() and (a < 1).all()

    # BAM output equals attention (x) dense features bit-exactly
    bam = init_parameters(BlurAttentionModule(), 1)
    f_in = torch.randn(1, 72, 6, 6)
    out, attention = bam(f_in)
    assert torch.equal(out, attention * bam.dbu(f_in))

    # zero-module chains: multilevel length 4 -> 4x, one-level -> x
    z = torch.randn(1, 5, 6, 6)
    y_multi, _ = ResidualChain([_ZeroModule() for _ in range(4)], "multilevel")(z)
    assert torch.allclose(y_multi, 4 * z, rtol=1e-6, atol=1e-7)
    y_one, _ = ResidualChain([_ZeroModule() for _ in range(4)], "one_level")(z)
    assert torch.equal(y_one, z)

    # generator size-preserving and output-bounded across fuzzed shapes
    rng = np.random.default_rng(0)
    sizes = [(64, 64), (76, 100), (128, 128), (256, 256), (512, 512)]
    sizes.append(tuple(int(rng.integers(16, 129)) * 4 for _ in range(2)))
    for h, w in sizes:
        y, ms = generator(torch.rand(1, 3, h, w) * 2 - 1)
        assert y.shape == (1, 3, h, w)
        assert (y >= -1).all() and (y <= 1).all()
        assert len(ms) == 4
    _pass(1, f"architecture invariants over sizes {sizes}", t0)


def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    results = {}

    # DBU (block invariant: step 1e-3)
    torch.manual_seed(3)
    dbu = init_parameters(DenseBlockUnit(), 3).double()
    x = (torch.randn(1, 72, 4, 4, dtype=torch.float64) * 0.7).requires_grad_(True)
    dbu(x).sum().backward()
    entries = sample_entries([x.data], 24, seed=5)
    analytic = [x.grad.view(-1)[i].item() for _, i in entries]
    results["dbu"] = check_gradients(
        lambda: dbu(x.detach()).sum().item(), entries, analytic, step=1e-3)

    # SAU (step 1e-3)
    torch.manual_seed(8)
    sau = init_parameters(SpatialAttentionUnit(), 8).double()
    xs = torch.randn(1, 3, 5, 5, dtype=torch.float64).requires_grad_(True)
    sau(xs).sum().backward()
    entries = sample_entries([xs.data, sau.conv.weight.data], 10, seed=9)
    analytic = [xs.grad.view(-1)[i].item() for _, i in entries[:10]]
    analytic += [sau.conv.weight.grad.view(-1)[i].item() for _, i in entries[10:]]
    results["sau"] = check_gradients(
        lambda: sau(xs.detach()).sum().item(), entries, analytic, step=1e-3)

    # generator end-to-end on a 3x64x64 input, sampled parameter subset
    torch.manual_seed(2)
    g = Generator(seed=2).double()
    xg = torch.rand(1, 3, 64, 64, dtype=torch.float64) * 1.2 - 0.6
    g.zero_grad()
    y, _ = g(xg)
    y.sum().backward()
    params = [g.encoder[0][0].weight, g.head.weight,
              g.chain.blocks[0].dbu.convs[0].weight,
              g.chain.blocks[3].sau.conv.weight]
    entries = sample_entries([p.data for p in params], 3, seed=7)
    analytic, pos = [], 0
    for p in params:
        n = min(3, p.numel())
        analytic += [p.grad.view(-1)[i].item() for _, i in entries[pos:pos + n]]
        pos += n
    results["generator"] = check_gradients(
        lambda: fval(g(xg)[0].sum().detach()), entries, analytic)

    # critic score gap (leaky-ReLU kinks scale with step; use 1e-4)
    torch.manual_seed(5)
    critic = PatchCritic(seed=5).double()
    real = torch.rand(1, 3, 70, 70, dtype=torch.float64) * 2 - 1
    fake = torch.rand(1, 3, 70, 70, dtype=torch.float64) * 2 - 1
    critic.zero_grad()
    (critic(real).mean() - critic(fake).mean()).backward()
    params = [critic.stack[0].weight, critic.stack[5].weight,
              critic.stack[-1].weight]
    entries = sample_entries([p.data for p in params], 4, seed=8)
    analytic, pos = [], 0
    for p in params:
        n = min(4, p.numel())
        analytic += [p.grad.view(-1)[i].item() for _, i in entries[pos:pos + n]]
        pos += n
    results["critic"] = check_gradients(
        lambda: fval((critic(real).mean() - critic(fake).mean()).detach()),
        entries, analytic, step=1e-4)

    # critic loss with gradient penalty, w.r.t. critic parameters
    torch.manual_seed(12)
    critic2 = PatchCritic(seed=12).double()
    cfg = LossConfig()

    def closs():
        rng = torch.Generator().manual_seed(33)
        return fval(critic_loss(critic2, real, fake, cfg, rng=rng))

    critic2.zero_grad()
    rng = torch.Generator().manual_seed(33)
    critic_loss(critic2, real, fake, cfg, rng=rng).backward()
    params = [critic2.stack[0].weight, critic2.stack[-1].weight]
    entries = sample_entries([p.data for p in params], 4, seed=10)
    analytic, pos = [], 0
    for p in params:
        n = min(4, p.numel())
        analytic += [p.grad.view(-1)[i].item() for _, i in entries[pos:pos + n]]
        pos += n
    results["critic_loss"] = check_gradients(closs, entries, analytic, step=1e-4)

    # adversarial generator loss w.r.t. the fake image
    fake_g = fake.clone().requires_grad_(True)
    generator_adv_loss(critic, fake_g).backward()
    entries = sample_entries([fake_g.data], 10, seed=11)
    analytic = [fake_g.grad.view(-1)[i].item() for _, i in entries]
    results["adv_loss"] = check_gradients(
        lambda: fval(generator_adv_loss(critic, fake_g.detach())),
        entries, analytic, step=1e-4)

    # perceptual loss w.r.t. the restored image
    ext = FeatureExtractor.from_random(seed=1).double()
    torch.manual_seed(6)
    a = (torch.rand(1, 3, 32, 32, dtype=torch.float64) * 2 - 1).requires_grad_(True)
    b = torch.rand(1, 3, 32, 32, dtype=torch.float64) * 2 - 1
    perceptual_loss(a, b, ext).backward()
    entries = sample_entries([a.data], 10, seed=7)
    analytic = [a.grad.view(-1)[i].item() for _, i in entries]
    results["perceptual"] = check_gradients(
        lambda: fval(perceptual_loss(a.detach(), b, ext)),
        entries, analytic, step=1e-4)

    worst = max(results.values())
    assert worst < 1e-3
    _pass(2, "max relative FD error "
             + ", ".join(f"{k}={v:.1e}" for k, v in results.items()), t0)


def test_criterion_3_loss_oracles():
    t0 = time.perf_counter()

    class ConstantCritic(nn.Module):
        def forward(self, x):
            return torch.full((x.shape[0], 1, 3, 3), 2.0, dtype=x.dtype) \
                   + 0.0 * x.sum()

    cfg = LossConfig()
    real = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    fake = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    total = fval(critic_loss(ConstantCritic().double(), real, fake, cfg))
    assert abs(total - cfg.gp_weight * 1.0) < 1e-9

    class UnitLinear(nn.Module):
        def __init__(self):
            super().__init__()
            g = torch.Generator().manual_seed(0)
            w = torch.randn(1, 3, 16, 16, generator=g, dtype=torch.float64)
            self.w = nn.Parameter(w / w.norm())

        def forward(self, x):
            return (x * self.w).sum(dim=(1, 2, 3)).view(-1, 1, 1, 1)

    gp = fval(gradient_penalty(UnitLinear(), real, fake))
    assert abs(gp) < 1e-8

    ext = FeatureExtractor.from_random(seed=0)
    img = torch.rand(1, 3, 64, 64) * 2 - 1
    assert fval(perceptual_loss(img, img, ext)) == 0.0

    assert fval(joint_loss(1.0, 0.5, LossConfig(lambda_content=100))) == 51.0
    _pass(3, f"constant-critic loss {total:.3f} = gp_weight, unit-norm GP "
             f"{gp:.1e}, perceptual(x,x)=0, joint(1,0.5)=51", t0)


def test_criterion_4_metric_oracles():
    t0 = time.perf_counter()
    zeros = np.zeros((3, 16, 16), np.uint8)
    assert psnr(zeros, np.full((3, 16, 16), 255, np.uint8)) == 0.0

    p16 = psnr(zeros, np.full((3, 16, 16), 16, np.uint8))
    closed_form = 20 * math.log10(255.0 / 16.0)
    assert abs(p16 - closed_form) < 5e-4

    img = make_test_image(24, 24, seed=3)
    assert ssim(img, img) == 1.0

    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(10):
        a = rng.integers(0, 256, size=(3, 16, 16), dtype=np.uint8)
        b = rng.integers(0, 256, size=(3, 16, 16), dtype=np.uint8)
        worst = max(worst, abs(ssim(a, b) - reference_ssim(a, b)))
    assert worst < 1e-6
    _pass(4, f"psnr(0,255)=0, psnr(0,16)={p16:.4f} (=20log10(255/16)), "
             f"ssim(a,a)=1, reference gap {worst:.1e}", t0)


@pytest.mark.xfail(strict=True, reason=(
    "stated constant 24.0346 dB conflicts with its own closed form "
    "20*log10(255/16) = 24.0486 dB; the faithful implementation satisfies "
    "the closed form (see test_criterion_4_metric_oracles)"))
def test_criterion_4_literal_constant():
    zeros = np.zeros((3, 16, 16), np.uint8)
    p16 = psnr(zeros, np.full((3, 16, 16), 16, np.uint8))
    assert abs(p16 - 24.0346) < 5e-4


def test_criterion_5_degradation_generator():
    t0 = time.perf_counter()
    sharp = normalize(make_test_image(48, 48, seed=1))
    out = synthesize_blur(sharp, KernelSpec.delta(), NoiseSpec(0.0), seed=0)
    assert np.array_equal(out, sharp)  # bitwise identity

    impulse = np.full((3, 15, 15), -1.0)
    impulse[:, 7, 7] = 1.0
    blurred = synthesize_blur(impulse, KernelSpec.linear_motion(5, 0.0),
                              NoiseSpec(0.0), seed=0)
    row = blurred[0, 7]
    assert np.allclose(row[5:10], -1.0 + 2.0 * 0.2, atol=1e-12)
    assert np.allclose(np.delete(blurred, np.s_[5:10], axis=2)[0, 7], -1.0)
    _pass(5, "delta kernel bitwise identity; length-5 impulse -> five 0.2 taps", t0)


def test_criterion_6_schedule():
    t0 = time.perf_counter()
    cfg = TrainConfig(epochs=300, decay_start=150, lr0=1e-4)
    assert lr_schedule(0, cfg) == 1e-4
    assert lr_schedule(150, cfg) == 1e-4
    assert lr_schedule(225, cfg) == 5e-5
    assert lr_schedule(300, cfg) == 0.0
    _pass(6, "lr 1e-4 at epochs 0 and 150, 5e-5 at 225, 0 at 300", t0)


@pytest.fixture(scope="module")
def overfit_pair():
    sharp_u8 = make_test_image(256, 256, seed=5)
    sharp = normalize(sharp_u8)
    blurred = synthesize_blur(sharp, KernelSpec.linear_motion(5, 0.0),
                              NoiseSpec(0.005), seed=7)
    return sharp_u8, torch.from_numpy(blurred).unsqueeze(0), \
        torch.from_numpy(sharp).unsqueeze(0)


@pytest.mark.slow
def test_criterion_7_desk_scale_learning(overfit_pair):
    t0 = time.perf_counter()
    sharp_u8, blurred_t, sharp_t = overfit_pair
    baseline = psnr(denormalize(blurred_t.squeeze(0).numpy()), sharp_u8)

    # content-loss-only single-pair overfit, <= 1000 generator steps
    cfg = TrainConfig(epochs=1200, decay_start=1200, lr0=5e-4, seed=3,
                      crop=256, adversarial=False)
    state = make_state(cfg, LossConfig(), variant="bag",
                       extractor_source="random:11")

    def batch():
        return blurred_t, sharp_t

    gain = -math.inf
    steps_used = 0
    for step in range(1, 1001):
        training_step(state, batch)
        state.epoch += 1
        if step % 25 == 0:
            with torch.no_grad():
                restored, _ = state.generator(blurred_t)
            current = psnr(denormalize(restored.squeeze(0).numpy()), sharp_u8)
            gain = current - baseline
            steps_used = step
            if gain >= 3.0:
                break
    assert gain >= 3.0, (
        f"PSNR gain {gain:+.2f} dB after {steps_used} generator steps")
    part_a = time.perf_counter() - t0
    print(f"\n  content-only overfit: {gain:+.2f} dB over "
          f"{baseline:.2f} dB baseline at step {steps_used} [{part_a:.0f}s]")

    # full joint-loss training, 200 protocol steps, no numerical aborts
    t1 = time.perf_counter()
    cfg_joint = TrainConfig(epochs=400, decay_start=400, lr0=1e-4, seed=4,
                            crop=256, adversarial=True,
                            critic_updates_per_gen=5)
    state_j = make_state(cfg_joint, LossConfig(), variant="bag",
                         extractor_source="random:11")
    for step in range(200):
        record = training_step(state_j, batch)  # NumericalError would abort
        state_j.epoch = min(state_j.epoch + 1, cfg_joint.epochs)
        assert math.isfinite(record.joint_loss)
        assert math.isfinite(record.critic_loss)
    for p in state_j.generator.parameters():
        assert torch.isfinite(p).all()
    for p in state_j.critic.parameters():
        assert torch.isfinite(p).all()
    _pass(7, f"content-only +{gain:.2f} dB at step {steps_used} "
             f"[{part_a:.0f}s]; 200 joint steps aborted nothing "
             f"[{time.perf_counter() - t1:.0f}s]", t0)


def test_criterion_8_ablation_factory():
    t0 = time.perf_counter()
    x = torch.rand(1, 3, 64, 64) * 2 - 1
    plain_params = parameter_count(make_transform(PRESETS["model_plain"]))
    for name, spec in PRESETS.items():
        generator = build_variant(name, seed=0)
        for transform in generator.chain.blocks:
            assert conv_layer_count(transform) == 7
        _, maps = generator(x)
        assert len(maps) == (4 if spec.use_sau else 0)
        if spec.block_kind.startswith("denseblock"):
            assert parameter_count(make_transform(spec)) > plain_params
    _pass(8, "six presets build; 7 convs per module; attention-map counts "
             "and parameter ordering hold", t0)


def test_criterion_9_determinism_and_persistence(tmp_path):
    t0 = time.perf_counter()
    from bagdeblur.data import load_index
    from conftest import write_gopro_tree
    write_gopro_tree(tmp_path, "train", 3, size=76, kernel_len=3)
    index = load_index(tmp_path, "train")
    cfg = TrainConfig(epochs=20, decay_start=10, seed=0, crop=76,
                      critic_updates_per_gen=5)

    def run(n):
        state = make_state(cfg, LossConfig(), variant="bag",
                           extractor_source="random:0")
        records = train(state, index, max_steps=n)
        return state, [(r.critic_loss, r.adv_loss, r.content_loss,
                        r.joint_loss) for r in records]

    _, seq_a = run(10)
    _, seq_b = run(10)
    assert seq_a == seq_b

    state, _ = run(3)
    path = tmp_path / "ckpt.pt"
    save_checkpoint(state, path)
    loaded = load_checkpoint(path)
    for key, value in state.generator.state_dict().items():
        assert torch.equal(loaded.generator.state_dict()[key], value)
    for key, value in state.critic.state_dict().items():
        assert torch.equal(loaded.critic.state_dict()[key], value)

    resumed_records = train(loaded, index, max_steps=10)
    resumed = [(r.critic_loss, r.adv_loss, r.content_loss, r.joint_loss)
               for r in resumed_records]
    assert resumed == seq_a[3:]
    _pass(9, "identical 10-step loss sequences; bitwise checkpoint round "
             "trip; resumed run matches uninterrupted", t0)


def test_criterion_10_visualization(tmp_path):
    t0 = time.perf_counter()
    state = make_state(TrainConfig(epochs=2, decay_start=1, crop=64, seed=0),
                       LossConfig(), variant="bag", extractor_source="random:0")
    probe = torch.rand(1, 3, 64, 64) * 2 - 1
    for epoch in (5, 50, 100, 150, 200):
        paths = snapshot_attention(state, probe, epoch, tmp_path)
        assert [p.name for p in paths] == \
               [f"attn_e{epoch}_m{k}.png" for k in (1, 2, 3, 4)]
    assert len(list(tmp_path.iterdir())) == 20

    img = render_attention(np.array([[0.1, 0.9]]), RenderSpec(normalize=True))
    assert tuple(img[:, 0, 0]) == tuple(COOLWARM_LUT[0])
    assert tuple(img[:, 0, 1]) == tuple(COOLWARM_LUT[255])

    rng = np.random.default_rng(2)
    a = rng.uniform(0.2, 0.8, size=(12, 12))
    spec = RenderSpec(normalize=True)
    base = render_attention(a, spec)
    for scale, shift in ((2.0, 0.0), (0.25, 1.0), (10.0, -3.0)):
        assert np.array_equal(render_attention(scale * a + shift, spec), base)
    _pass(10, "snapshot grid at epochs {5,50,100,150,200}; endpoint colors "
              "exact; normalization affine-invariant", t0)
