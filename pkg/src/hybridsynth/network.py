"""Generator (shared encoder, AHD/AHE decoder groups) and multi-scale patch discriminator."""
from __future__ import annotations

import os
import pickle
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (ConditionTriplet, Decoder, DimensionError, GenerationMode, GenerationResult,
                   HybridSynthError, ImagePlane, ParameterError, RangeTag, Role, fuse_arrays)

CHECKPOINT_FORMAT = 1
CONDITION_CHANNELS = 5  # color(3) + depth(1) + edge(1)


class CheckpointError(HybridSynthError):
    pass


@dataclass
class GeneratorConfig:
    input_resolution: int = 256
    scales: int = 4
    base_channels: int = 64
    resnet_blocks: int = 4
    max_channels: int = 512
    mode: GenerationMode = GenerationMode.RGB_LEVEL
    disc_base_channels: int = 64
    disc_scales: int = 2
    disc_layers: int = 3

    def __post_init__(self):
        self.mode = GenerationMode(self.mode)
        if self.scales != 4:
            raise ParameterError("the generator uses exactly four feature scales")
        for name in ("input_resolution", "base_channels", "resnet_blocks", "max_channels",
                     "disc_base_channels", "disc_scales", "disc_layers"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.input_resolution % 2 ** (self.scales - 1):
            raise ParameterError(f"input_resolution must be divisible by {2 ** (self.scales - 1)}")

    @property
    def output_channels(self) -> int:
        return self.mode.output_channels

    def channels(self, k: int) -> int:
        return min(self.base_channels * 2 ** k, self.max_channels)

    @classmethod
    def desk(cls, resolution: int = 64, mode=GenerationMode.RGB_LEVEL) -> "GeneratorConfig":
        return cls(resolution, 4, 16, 2, 128, mode, 16, 2, 3)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


def conv_block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, 1, bias=False),
        nn.InstanceNorm2d(cout),
        nn.LeakyReLU(0.2),
    )


class ResnetBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, 1, 1, bias=False),
            nn.InstanceNorm2d(ch),
            nn.LeakyReLU(0.2),
            nn.Conv2d(ch, ch, 3, 1, 1, bias=False),
            nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class Up(nn.Module):
    """Nearest upsample, concatenate the skip feature, convolve."""

    def __init__(self, cin: int, cskip: int, cout: int):
        super().__init__()
        self.conv = conv_block(cin + cskip, cout)

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return self.conv(torch.cat([x, skip], dim=1))


class Encoder(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        c = cfg.channels
        self.stem = conv_block(CONDITION_CHANNELS, c(0))
        self.down = nn.ModuleList([conv_block(c(k - 1), c(k), stride=2) for k in range(1, cfg.scales)])
        self.blocks = nn.Sequential(*[ResnetBlock(c(cfg.scales - 1)) for _ in range(cfg.resnet_blocks)])

    def forward(self, x):
        feats = [self.stem(x)]
        for layer in self.down:
            feats.append(layer(feats[-1]))
        feats[-1] = self.blocks(feats[-1])
        return feats


class Branch(nn.Module):
    def __init__(self, cfg: GeneratorConfig, out_ch: int):
        super().__init__()
        c = cfg.channels
        self.up = nn.ModuleList([Up(c(2), c(1), c(1)), Up(c(1), c(0), c(0))])
        self.head = nn.Conv2d(c(0), out_ch, 3, 1, 1)

    def forward(self, x, feats):
        x = self.up[0](x, feats[1])
        x = self.up[1](x, feats[0])
        return self.head(x)


class DecoderGroup(nn.Module):
    """Shared trunk up to 1/4 resolution, then separate texture and mask branches."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        c = cfg.channels
        self.trunk = Up(c(3), c(2), c(2))
        self.texture = Branch(cfg, cfg.output_channels)
        self.mask = Branch(cfg, 1)

    def forward(self, feats, content):
        x = self.trunk(feats[3], feats[2])
        a_gen = torch.tanh(self.texture(x, feats))
        m_gen = torch.sigmoid(self.mask(x, feats))
        return a_gen, m_gen, fuse_arrays(content, a_gen, m_gen)


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoders = nn.ModuleDict({d.value: DecoderGroup(cfg) for d in Decoder})

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        r = self.cfg.input_resolution
        if x.dim() != 4 or x.shape[1] != CONDITION_CHANNELS or tuple(x.shape[2:]) != (r, r):
            raise DimensionError(f"encoder expects (B, {CONDITION_CHANNELS}, {r}, {r}), got {tuple(x.shape)}")
        return self.encoder(x)

    def decode(self, feats, group, content: torch.Tensor):
        try:
            group = Decoder(group)
        except ValueError:
            raise ParameterError(f"unknown decoder group {group!r}") from None
        if content.shape[1] != self.cfg.output_channels:
            raise DimensionError(
                f"content has {content.shape[1]} channels, generator emits {self.cfg.output_channels}")
        return self.decoders[group.value](feats, content)

    def forward(self, x, contents: dict, groups=tuple(Decoder)):
        feats = self.encode(x)
        return {Decoder(g): self.decode(feats, g, contents[Decoder(g)]) for g in groups}


class PatchDiscriminator(nn.Module):
    def __init__(self, cin: int, base: int, layers: int):
        super().__init__()
        mods = [nn.Conv2d(cin, base, 4, 2, 1), nn.LeakyReLU(0.2)]
        ch = base
        for _ in range(layers - 1):
            mods += [nn.Conv2d(ch, min(ch * 2, 512), 4, 2, 1), nn.LeakyReLU(0.2)]
            ch = min(ch * 2, 512)
        mods.append(nn.Conv2d(ch, 1, 3, 1, 1))
        self.net = nn.Sequential(*mods)

    def forward(self, x):
        return self.net(x)


class MultiScaleDiscriminator(nn.Module):
    """Patch discriminators applied to the input and its 2x, 4x, ... downsamplings."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        cin = CONDITION_CHANNELS + cfg.output_channels
        self.scales = nn.ModuleList(
            [PatchDiscriminator(cin, cfg.disc_base_channels, cfg.disc_layers) for _ in range(cfg.disc_scales)])

    def forward(self, conditions: torch.Tensor, candidate: torch.Tensor) -> list[torch.Tensor]:
        if conditions.shape[2:] != candidate.shape[2:] or candidate.shape[1] != self.cfg.output_channels:
            raise DimensionError(
                f"candidate {tuple(candidate.shape)} does not match conditions {tuple(conditions.shape)}")
        x = torch.cat([conditions, candidate], dim=1)
        out = []
        for i, d in enumerate(self.scales):
            if i:
                x = F.avg_pool2d(x, 3, 2, 1, count_include_pad=False)
            out.append(d(x))
        return out


def init_weights(module: nn.Module, seed: int):
    g = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=g) * 0.02)
                if m.bias is not None:
                    m.bias.zero_()


def build_models(cfg: GeneratorConfig, seed: int = 0):
    gen = Generator(cfg)
    disc = MultiScaleDiscriminator(cfg)
    init_weights(gen, seed)
    init_weights(disc, seed + 1)
    return gen, disc


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# -- plane <-> tensor helpers ------------------------------------------------

def plane_to_tensor(plane: ImagePlane) -> torch.Tensor:
    """(H, W, C) plane in any range -> (C, H, W) signed float tensor."""
    data = torch.from_numpy(np.ascontiguousarray(plane.data, dtype=np.float32)).permute(2, 0, 1)
    if plane.range_tag is RangeTag.SIGNED:
        return data
    return data * 2 - 1


def triplet_to_tensor(triplet: ConditionTriplet) -> torch.Tensor:
    return torch.cat([plane_to_tensor(triplet.color), plane_to_tensor(triplet.depth),
                      plane_to_tensor(triplet.edge)], dim=0)


def batch_triplets(triplets) -> torch.Tensor:
    return torch.stack([triplet_to_tensor(t) for t in triplets])


def tensor_to_plane(t: torch.Tensor, role: Role, range_tag: RangeTag = RangeTag.SIGNED) -> ImagePlane:
    arr = t.detach().to(torch.float32).permute(1, 2, 0).cpu().numpy()
    return ImagePlane(np.ascontiguousarray(arr), range_tag, role)


def output_role(mode: GenerationMode, group: Decoder) -> Role:
    if mode is GenerationMode.RGB_LEVEL:
        return Role.COLOR
    return Role.DEPTH if Decoder(group) is Decoder.AHD else Role.EDGE


@torch.no_grad()
def generate(gen: Generator, triplet: ConditionTriplet, contents: dict, groups=tuple(Decoder)):
    """Run one conditioned sample through the generator; returns GenerationResult per group.

    ``contents`` maps each group to the plane blended in by the fusion map.
    """
    gen.eval()
    x = triplet_to_tensor(triplet)[None]
    outs = gen(x, {Decoder(g): plane_to_tensor(contents[Decoder(g)])[None] for g in groups}, groups)
    results = {}
    for g, (a, m, fused) in outs.items():
        role = output_role(gen.cfg.mode, g)
        results[g] = GenerationResult(
            tensor_to_plane(a[0], role),
            tensor_to_plane(m[0], Role.FUSION_MAP, RangeTag.UNIT),
            tensor_to_plane(fused[0], role),
            g,
        )
    return results


# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    config: GeneratorConfig
    generator: Generator
    discriminator: MultiScaleDiscriminator
    train_state: dict = field(default_factory=dict)
    path: str | None = None
    history: list = field(default_factory=list)

    @property
    def mode(self) -> GenerationMode:
        return self.config.mode


def save_checkpoint(path, gen: Generator, disc: MultiScaleDiscriminator, train_state: dict | None = None):
    """Write atomically (temp file + rename) so readers never see a partial checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": gen.cfg.to_dict(),
        "generator": gen.state_dict(),
        "discriminator": disc.state_dict(),
        "train_state": train_state or {},
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "wb") as fh:
        torch.save(payload, fh)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expected_mode=None) -> Checkpoint:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {payload.get('format')!r}")
    cfg = GeneratorConfig(**payload["config"])
    if expected_mode is not None and cfg.mode is not GenerationMode(expected_mode):
        raise CheckpointError(
            f"checkpoint was trained at {cfg.mode.value} level, {GenerationMode(expected_mode).value} "
            "requested; convert it with finetune_depth_level")
    gen, disc = Generator(cfg), MultiScaleDiscriminator(cfg)
    gen.load_state_dict(payload["generator"])
    disc.load_state_dict(payload["discriminator"])
    return Checkpoint(cfg, gen, disc, payload.get("train_state", {}), str(path))
