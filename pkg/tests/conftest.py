import numpy as np
import pytest
import torch


def make_test_image(h, w, seed):
    """Textured uint8 test image: smooth low-frequency background plus
    sharp rectangles and horizontal lines (edge content for deblurring)."""
    rng = np.random.default_rng(seed)
    block = 16
    low = rng.uniform(40, 215, size=(3, max(1, h // block), max(1, w // block)))
    img = np.stack([np.kron(c, np.ones((block, block)))[:h, :w] for c in low])
    if img.shape[1] < h or img.shape[2] < w:
        img = np.pad(img, ((0, 0), (0, h - img.shape[1]), (0, w - img.shape[2])),
                     mode="edge")
    for _ in range(max(6, h * w // 2700)):
        y0 = int(rng.integers(0, max(1, h - 8)))
        x0 = int(rng.integers(0, max(1, w - 8)))
        hh = int(rng.integers(4, max(5, h // 5)))
        ww = int(rng.integers(4, max(5, w // 5)))
        col = rng.uniform(0, 255, size=3)
        img[:, y0:min(h, y0 + hh), x0:min(w, x0 + ww)] = col[:, None, None]
    for _ in range(max(3, h // 24)):
        y = int(rng.integers(0, h - 1))
        img[:, y:y + 2, :] = rng.uniform(0, 255, size=3)[:, None, None]
    return img.clip(0, 255).astype(np.uint8)


def write_gopro_tree(root, split, n_pairs, size=48, seed=0, kernel_len=3):
    """Small GoPro-layout dataset built from synthetic pairs."""
    from bagdeblur.data import (KernelSpec, NoiseSpec, denormalize, normalize,
                                save_image_u8, synthesize_blur)
    kernel = KernelSpec.linear_motion(kernel_len, 0.0) if kernel_len > 1 \
        else KernelSpec.delta()
    for i in range(n_pairs):
        seq = f"seq{i % 2}"
        name = f"frame{i:03d}.png"
        sharp_u8 = make_test_image(size, size, seed=seed + i)
        blurred = synthesize_blur(normalize(sharp_u8), kernel,
                                  NoiseSpec(0.0), seed=seed + i)
        save_image_u8(root / split / seq / "sharp" / name, sharp_u8)
        save_image_u8(root / split / seq / "blur" / name, denormalize(blurred))


def fval(t):
    """Loss tensor -> float without autograd warnings."""
    return float(t.detach()) if torch.is_tensor(t) else float(t)


def max_rel_error(analytic, numeric):
    """Max |a - n| normalized by the gradient scale (robust near zeros)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def central_diff(fn, params, entries, step=1e-3):
    """Central finite differences of scalar fn at the given (tensor, index)
    entries; params are mutated in place and restored. fn runs with autograd
    enabled (some objectives differentiate internally)."""

    def poke(tensor, idx, value):
        with torch.no_grad():
            tensor[idx] = value

    grads = []
    for tensor, idx in entries:
        orig = tensor[idx].item()
        poke(tensor, idx, orig + step)
        up = fn()
        poke(tensor, idx, orig - step)
        down = fn()
        poke(tensor, idx, orig)
        grads.append((up - down) / (2 * step))
    return np.array(grads)


def check_gradients(fn, entries, analytic, step=1e-3, tol=1e-3):
    """Assert analytic gradients match central differences at the given step.

    Central differences only estimate the derivative where the function is
    smooth across the whole [-step, +step] window; a ReLU kink inside the
    window makes the estimate meaningless. Entries whose half-step estimate
    disagrees with the full-step one (non-smooth window) are excluded; the
    spec tolerance is asserted over the remaining entries, which must be the
    majority of the sample.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    fd_full = central_diff(fn, None, entries, step)
    fd_half = central_diff(fn, None, entries, step / 2)
    scale = max(np.abs(analytic).max(), np.abs(fd_full).max(), 1e-12)
    smooth = np.abs(fd_full - fd_half) <= 0.25 * tol * scale
    assert smooth.sum() >= max(1, len(entries) // 2), (
        f"only {smooth.sum()}/{len(entries)} FD windows were smooth")
    err = max_rel_error(analytic[smooth], fd_full[smooth])
    assert err < tol, f"max relative FD error {err:.2e} over {smooth.sum()} entries"
    return err


def sample_entries(tensors, per_tensor, seed):
    """A reproducible subset of (tensor, flat-ish index) pairs."""
    rng = np.random.default_rng(seed)
    entries = []
    for t in tensors:
        flat = t.view(-1) if t.dim() else t.view(1)
        n = min(per_tensor, flat.numel())
        for i in rng.choice(flat.numel(), size=n, replace=False):
            entries.append((flat, int(i)))
    return entries


@pytest.fixture(autouse=True)
def _fixed_torch_state():
    torch.manual_seed(0)
