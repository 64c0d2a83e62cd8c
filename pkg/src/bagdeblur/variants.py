"""Ablation variant factory: the six structural presets of the generator's
transform chain, plus the comparison harness that trains and scores them.
"""

from dataclasses import asdict, dataclass

import torch.nn as nn

from .blocks import (DENSE_CHANNELS, CONNECTION_KINDS, BlurAttentionModule,
                     DenseBlockUnit)
from .errors import ConfigError
from .networks import Generator

BLOCK_KINDS = ("plain_conv", "resblock", "denseblock_bn", "denseblock_in")

# Each transform module totals 7 convolution layers regardless of kind, so
# the presets differ only in structure, not depth.
MODULE_CONV_LAYERS = 7


@dataclass(frozen=True)
class VariantSpec:
    block_kind: str
    use_sau: bool
    connection_kind: str
    module_count: int = 4

    def __post_init__(self):
        if self.block_kind not in BLOCK_KINDS:
            raise ConfigError(f"unknown block kind {self.block_kind!r}")
        if self.connection_kind not in CONNECTION_KINDS:
            raise ConfigError(f"unknown connection kind {self.connection_kind!r}")
        if self.module_count < 1:
            raise ConfigError("module_count must be >= 1")
        if self.use_sau and self.block_kind in ("plain_conv", "resblock"):
            raise ConfigError(
                f"no preset combines spatial attention with {self.block_kind!r}; "
                "use_sau requires a denseblock transform (presets model_4, bag)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


PRESETS = {
    "model_plain": VariantSpec("plain_conv", False, "multilevel"),
    "model_1": VariantSpec("resblock", False, "multilevel"),
    "model_2": VariantSpec("denseblock_bn", False, "multilevel"),
    "model_3": VariantSpec("denseblock_in", False, "multilevel"),
    "model_4": VariantSpec("denseblock_in", True, "one_level"),
    "bag": VariantSpec("denseblock_in", True, "multilevel"),
}

# Mean PSNR (dB) each preset reaches after full-scale training (300 epochs,
# GoPro). Reference constants only; desk-scale runs do not approach them.
FULL_SCALE_PSNR_DB = {
    "model_plain": 27.08,
    "model_1": 28.20,
    "model_2": 28.80,
    "model_3": 29.06,
    "model_4": 29.14,
    "bag": 29.41,
}


def normalize_preset(name):
    key = name.strip().lower().replace(" ", "_").replace("-", "_")
    if key not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return key


def resolve_variant(spec):
    """Accept a preset name, a VariantSpec, or its dict form."""
    if isinstance(spec, VariantSpec):
        return spec
    if isinstance(spec, dict):
        return VariantSpec.from_dict(spec)
    return PRESETS[normalize_preset(spec)]


def _conv_in_relu(channels):
    return [nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels), nn.ReLU()]


class ResidualPair(nn.Module):
    """Two 3x3 convs with instance normalization and an identity skip."""

    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.body(x)


def make_transform(spec, channels=DENSE_CHANNELS):
    """Build one chain transform module with exactly 7 convolution layers."""
    if spec.block_kind == "plain_conv":
        layers = []
        for _ in range(MODULE_CONV_LAYERS):
            layers += _conv_in_relu(channels)
        return nn.Sequential(*layers)
    if spec.block_kind == "resblock":
        # three 2-conv residual pairs plus one fusion conv = 7 layers
        return nn.Sequential(ResidualPair(channels), ResidualPair(channels),
                             ResidualPair(channels), *_conv_in_relu(channels))
    norm = "batch" if spec.block_kind == "denseblock_bn" else "instance"
    if spec.use_sau:
        return BlurAttentionModule(channels, norm=norm)
    # SAU-less dense presets append one extra conv to keep the layer count.
    return nn.Sequential(DenseBlockUnit(channels, norm=norm), *_conv_in_relu(channels))


def build_variant(spec, seed=0):
    """Construct a generator whose chain follows the variant description."""
    spec = resolve_variant(spec)
    transforms = [make_transform(spec) for _ in range(spec.module_count)]
    return Generator(transforms=transforms, connection=spec.connection_kind,
                     variant=spec.to_dict(), seed=seed)


def conv_layer_count(module):
    return sum(1 for m in module.modules() if isinstance(m, nn.Conv2d))


def parameter_count(module):
    return sum(p.numel() for p in module.parameters())


# -- ablation harness ---------------------------------------------------------

FLAG_ROWS = (
    ("ResBlock", lambda s: s.block_kind == "resblock"),
    ("DenseBlock-BN", lambda s: s.block_kind == "denseblock_bn"),
    ("DenseBlock-IN", lambda s: s.block_kind == "denseblock_in"),
    ("SAU", lambda s: s.use_sau),
    ("Residual connection", lambda s: s.connection_kind == "one_level"),
    ("Multilevel residual connection", lambda s: s.connection_kind == "multilevel"),
)


def run_ablation(presets, train_cfg, loss_cfg, train_index, eval_index,
                 extractor_source="auto", out_dir=None):
    """Train every preset under the identical config and seed, evaluate mean
    PSNR, and emit a configuration-matrix table (rows: structural flags;
    final row: PSNR). A failing variant is isolated and its cells marked.
    """
    from . import training
    from .evaluation import evaluate_generator

    columns = [normalize_preset(p) for p in presets]
    psnr_cells = {}
    errors = {}
    for name in columns:
        try:
            state = training.make_state(train_cfg, loss_cfg, variant=name,
                                        extractor_source=extractor_source)
            training.train(state, train_index, out_dir=None)
            report = evaluate_generator(state.generator, eval_index,
                                        timing_runs=1, warmup=0)
            psnr_cells[name] = report.mean_psnr_db
        except Exception as e:  # isolate per-variant failures
            psnr_cells[name] = None
            errors[name] = f"{type(e).__name__}: {e}"
    table = {
        "columns": columns,
        "flags": {row: {c: fn(PRESETS[c]) for c in columns} for row, fn in FLAG_ROWS},
        "psnr_db": psnr_cells,
        "errors": errors,
    }
    if out_dir is not None:
        import json
        from pathlib import Path
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "ablation.json", "w") as f:
            json.dump(table, f, indent=2)
        (out_dir / "ablation.txt").write_text(format_ablation_table(table))
    return table


def format_ablation_table(table):
    columns = table["columns"]
    width = max(12, *(len(c) for c in columns)) + 2
    label_w = max(len(r) for r, _ in FLAG_ROWS) + 2
    lines = [" " * label_w + "".join(c.rjust(width) for c in columns)]
    for row, _ in FLAG_ROWS:
        cells = ["x" if table["flags"][row][c] else "" for c in columns]
        lines.append(row.ljust(label_w) + "".join(c.rjust(width) for c in cells))
    psnrs = []
    for c in columns:
        v = table["psnr_db"][c]
        psnrs.append("failed" if v is None else f"{v:.2f}")
    lines.append("PSNR(dB)".ljust(label_w) + "".join(p.rjust(width) for p in psnrs))
    return "\n".join(lines) + "\n"
