"""Losses and the training loops for the RGB-level and depth-level generators."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import AugmentConfig, sample_training_pair
from .core import Decoder, DimensionError, GenerationMode, HybridSynthError, ParameterError, derive_rng
from .network import (Checkpoint, GeneratorConfig, MultiScaleDiscriminator, Generator, batch_triplets,
                      build_models, plane_to_tensor, save_checkpoint)

log = logging.getLogger(__name__)


class TrainingDiverged(HybridSynthError, RuntimeError):
    pass


class MissingDecoderOutput(HybridSynthError, RuntimeError):
    pass


# -- perceptual loss -----------------------------------------------------------

class RandomConvFeatures(nn.Module):
    """Frozen, seeded random convolutional stack used as a perceptual backbone.

    Single-channel inputs are repeated to three channels.
    """

    def __init__(self, channels=(16, 32, 64), seed: int = 1234):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        layers, cin = [], 3
        for i, cout in enumerate(channels):
            conv = nn.Conv2d(cin, cout, 3, 1 if i == 0 else 2, 1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * math.sqrt(2.0 / (cin * 9)))
                conv.bias.zero_()
            layers.append(conv)
            cin = cout
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x) -> list[torch.Tensor]:
        if x.shape[1] == 1:
            x = x.repeat(1, 3, 1, 1)
        feats = []
        for conv in self.layers:
            x = F.relu(conv(x))
            feats.append(x)
        return feats


class VGGFeatures(nn.Module):  # pragma: no cover - needs downloaded weights
    """Pretrained VGG19 relu1_1..relu5_1 features (optional backbone)."""

    CUTS = (2, 7, 12, 21, 30)

    def __init__(self):
        super().__init__()
        from torchvision.models import VGG19_Weights, vgg19

        body = vgg19(weights=VGG19_Weights.DEFAULT).features
        self.slices = nn.ModuleList()
        start = 0
        for cut in self.CUTS:
            self.slices.append(body[start:cut])
            start = cut
        self.requires_grad_(False)
        self.eval()
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def forward(self, x):
        if x.shape[1] == 1:
            x = x.repeat(1, 3, 1, 1)
        x = ((x + 1) / 2 - self.mean) / self.std
        feats = []
        for s in self.slices:
            x = s(x)
            feats.append(x)
        return feats


def perceptual_loss(generated: torch.Tensor, target: torch.Tensor, extractor: nn.Module,
                    layer_weights=None) -> torch.Tensor:
    """Weighted sum over layers of the mean absolute feature difference."""
    if generated.shape != target.shape:
        raise DimensionError(f"perceptual loss shapes differ: {tuple(generated.shape)} vs {tuple(target.shape)}")
    fg, ft = extractor(generated), extractor(target)
    weights = layer_weights or [1.0] * len(fg)
    total = generated.new_zeros(())
    for w, a, b in zip(weights, fg, ft):
        total = total + w * (a - b).abs().mean()
    return total


# -- adversarial loss ----------------------------------------------------------

def gan_losses(real_logits, fake_logits) -> tuple[torch.Tensor, torch.Tensor]:
    """Discriminator and non-saturating generator losses from patch logits.

    d = -(mean log D(real) + mean log(1 - D(fake))), g = -mean log D(fake),
    each averaged over patches, then over discriminator scales.
    """
    d_terms = [-(F.logsigmoid(r).mean() + F.logsigmoid(-f).mean()) for r, f in zip(real_logits, fake_logits)]
    return torch.stack(d_terms).mean(), generator_adversarial(fake_logits)


def generator_adversarial(fake_logits) -> torch.Tensor:
    return torch.stack([-F.logsigmoid(f).mean() for f in fake_logits]).mean()


def adversarial_losses(disc: MultiScaleDiscriminator, conditions: torch.Tensor, real_target: torch.Tensor,
                       generated: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns (d_loss, g_loss); d_loss does not backpropagate into the generator."""
    real = disc(conditions, real_target)
    fake_d = disc(conditions, generated.detach())
    fake_g = disc(conditions, generated)
    d_loss, _ = gan_losses(real, fake_d)
    _, g_loss = gan_losses(real, fake_g)
    return d_loss, g_loss


@dataclass
class LossWeights:
    perceptual_weight: float = 1.0
    adversarial_weight: float = 1.0

    def __post_init__(self):
        if self.perceptual_weight < 0 or self.adversarial_weight < 0:
            raise ParameterError("loss weights must be non-negative")


def total_generator_loss(fused: dict, targets: dict, conditions: torch.Tensor, disc: MultiScaleDiscriminator,
                         extractor: nn.Module, weights: LossWeights | None = None,
                         groups=tuple(Decoder)) -> tuple[torch.Tensor, dict]:
    """Sum over decoder groups of weighted perceptual plus generator adversarial terms."""
    weights = weights or LossWeights()
    total = conditions.new_zeros(())
    parts = {}
    for g in groups:
        g = Decoder(g)
        if g not in fused or g not in targets:
            raise MissingDecoderOutput(f"no output for decoder group {g.value}")
        perc = perceptual_loss(fused[g], targets[g], extractor)
        if weights.adversarial_weight:
            adv = generator_adversarial(disc(conditions, fused[g]))
        else:
            adv = conditions.new_zeros(())
        total = total + weights.perceptual_weight * perc + weights.adversarial_weight * adv
        parts[g] = {"perceptual": perc, "adversarial": adv}
    return total, parts


# -- schedule and state --------------------------------------------------------

def lr_at(step: int, total_steps: int, base_lr: float, decay_start: float = 0.5) -> float:
    """Constant, then linear decay reaching exactly 0 at ``total_steps``."""
    start = int(round(decay_start * total_steps))
    if step <= start:
        return base_lr
    if total_steps <= start:
        return 0.0
    return base_lr * max(0.0, (total_steps - step) / (total_steps - start))


@dataclass
class TrainConfig:
    steps: int | None = None
    epochs: int | None = 250
    batch_size: int = 28
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    decay_start: float = 0.5
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    groups: tuple[Decoder, ...] = (Decoder.AHD, Decoder.AHE)
    checkpoint_every: int = 0
    perceptual_seed: int = 1234

    def total_steps(self, n_samples: int) -> int:
        if self.steps is not None:
            return int(self.steps)
        return int(self.epochs) * self.steps_per_epoch(n_samples)

    def steps_per_epoch(self, n_samples: int) -> int:
        return max(1, math.ceil(n_samples / self.batch_size))

    @classmethod
    def desk(cls, steps: int = 200, batch_size: int = 4, seed: int = 0) -> "TrainConfig":
        return cls(steps=steps, epochs=None, batch_size=batch_size, seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["groups"] = [Decoder(g).value for g in self.groups]
        return d


def parameter_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


@dataclass
class Batch:
    ids: list[str]
    conditions: torch.Tensor
    contents: dict
    targets: dict


class Trainer:
    """Alternating discriminator / generator updates over an in-memory sample list.

    All randomness is a function of (seed, step, sample id), so a run resumed
    from a checkpoint reproduces the uninterrupted run step for step.
    """

    def __init__(self, samples, gen: Generator, disc: MultiScaleDiscriminator, cfg: TrainConfig,
                 extractor: nn.Module | None = None, log_path=None, out_dir=None):
        if not samples:
            raise ParameterError("training needs at least one sample")
        self.samples = list(samples)
        self.gen, self.disc, self.cfg = gen, disc, cfg
        self.mode = gen.cfg.mode
        self.dtype = next(gen.parameters()).dtype
        self.extractor = (extractor or RandomConvFeatures(seed=cfg.perceptual_seed)).to(self.dtype)
        self.g_opt = torch.optim.Adam(gen.parameters(), lr=cfg.lr, betas=cfg.betas)
        self.d_opt = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=cfg.betas)
        self.step_index = 0
        self.total = cfg.total_steps(len(self.samples))
        self.per_epoch = cfg.steps_per_epoch(len(self.samples))
        self.history: list[dict] = []
        self.log_path = Path(log_path) if log_path else None
        self.out_dir = Path(out_dir) if out_dir else None

    # data
    def batch_ids(self, step: int) -> list[int]:
        epoch, pos = divmod(step, self.per_epoch)
        order = derive_rng(self.cfg.seed, "order", epoch).permutation(len(self.samples))
        b = self.cfg.batch_size
        return order[pos * b:(pos + 1) * b].tolist()

    def make_batch(self, step: int) -> Batch:
        pairs = []
        for i in self.batch_ids(step):
            s = self.samples[i]
            rng = derive_rng(self.cfg.seed, "augment", step, s.id)
            pairs.append(sample_training_pair(s, self.mode, rng, self.cfg.augment))
        x = batch_triplets([p.inputs for p in pairs]).to(self.dtype)
        contents = {g: torch.stack([plane_to_tensor(p.contents[g]) for p in pairs]).to(self.dtype)
                    for g in Decoder}
        targets = {g: torch.stack([plane_to_tensor(p.targets[g]) for p in pairs]).to(self.dtype)
                   for g in Decoder}
        return Batch([p.sample_id for p in pairs], x, contents, targets)

    # updates
    def set_lr(self, step: int):
        lr = lr_at(step, self.total, self.cfg.lr, self.cfg.decay_start)
        for opt in (self.g_opt, self.d_opt):
            for group in opt.param_groups:
                group["lr"] = lr
        return lr

    def forward(self, batch: Batch):
        self.gen.train()
        return self.gen(batch.conditions, batch.contents, self.cfg.groups)

    def d_step(self, batch: Batch, outs) -> float:
        self.d_opt.zero_grad(set_to_none=True)
        self.disc.requires_grad_(True)
        loss = batch.conditions.new_zeros(())
        for g in self.cfg.groups:
            real = self.disc(batch.conditions, batch.targets[g])
            fake = self.disc(batch.conditions, outs[g][2].detach())
            loss = loss + gan_losses(real, fake)[0]
        self._check(loss, batch, "discriminator")
        loss.backward()
        self.d_opt.step()
        return float(loss.detach())

    def g_step(self, batch: Batch, outs) -> dict:
        self.g_opt.zero_grad(set_to_none=True)
        self.disc.requires_grad_(False)
        fused = {g: outs[g][2] for g in self.cfg.groups}
        total, parts = total_generator_loss(fused, batch.targets, batch.conditions, self.disc,
                                            self.extractor, self.cfg.weights, self.cfg.groups)
        self._check(total, batch, "generator")
        total.backward()
        self.g_opt.step()
        self.disc.requires_grad_(True)
        rec = {"g_total": float(total.detach())}
        for g, p in parts.items():
            rec[f"{g.value}_perceptual"] = float(p["perceptual"].detach())
            rec[f"{g.value}_adversarial"] = float(p["adversarial"].detach())
        return rec

    def _check(self, loss, batch: Batch, what: str):
        if torch.isfinite(loss):
            return
        msg = f"non-finite {what} loss at step {self.step_index} (batch {batch.ids})"
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "divergence.json").write_text(
                json.dumps({"step": self.step_index, "what": what, "batch_ids": batch.ids}, indent=1))
        raise TrainingDiverged(msg)

    def step(self) -> dict:
        s = self.step_index
        lr = self.set_lr(s)
        batch = self.make_batch(s)
        outs = self.forward(batch)
        d_loss = self.d_step(batch, outs)
        rec = {"step": s + 1, "epoch": s // self.per_epoch, "lr": lr, "d_loss": d_loss}
        rec.update(self.g_step(batch, outs))
        rec["perceptual"] = sum(rec[f"{Decoder(g).value}_perceptual"] for g in self.cfg.groups) / len(self.cfg.groups)
        self.step_index += 1
        self.history.append(rec)
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return rec

    def run(self, until: int | None = None, checkpoint_path=None):
        until = self.total if until is None else min(until, self.total)
        every = self.cfg.checkpoint_every
        while self.step_index < until:
            self.step()
            if every and checkpoint_path and self.step_index % every == 0:
                self.save(checkpoint_path)
        return self.history

    # persistence
    def state_dict(self) -> dict:
        return {
            "step": self.step_index,
            "epoch": self.step_index // self.per_epoch,
            "seed": self.cfg.seed,
            "g_opt": self.g_opt.state_dict(),
            "d_opt": self.d_opt.state_dict(),
            "train_config": self.cfg.to_dict(),
        }

    def load_state_dict(self, state: dict):
        self.step_index = int(state["step"])
        self.g_opt.load_state_dict(state["g_opt"])
        self.d_opt.load_state_dict(state["d_opt"])

    def save(self, path):
        return save_checkpoint(path, self.gen, self.disc, self.state_dict())

    def checkpoint(self, path=None) -> Checkpoint:
        ck = Checkpoint(self.gen.cfg, self.gen, self.disc, self.state_dict(), str(path) if path else None)
        ck.history = self.history
        return ck


def train(samples, mode, gen_cfg: GeneratorConfig, cfg: TrainConfig, out_dir=None,
          resume: Checkpoint | None = None, extractor=None, until: int | None = None) -> Checkpoint:
    """Train (or resume training) a generator/discriminator pair on ``samples``.

    Writes ``train_log.jsonl`` and ``checkpoint.pt`` under ``out_dir`` when given.
    """
    mode = GenerationMode(mode)
    if gen_cfg.mode is not mode:
        gen_cfg = GeneratorConfig(**{**gen_cfg.to_dict(), "mode": mode})
    out_dir = Path(out_dir) if out_dir else None
    if resume is not None:
        if resume.config.mode is not mode:
            raise ParameterError("resume checkpoint was trained at a different level")
        gen, disc = resume.generator, resume.discriminator
    else:
        gen, disc = build_models(gen_cfg, cfg.seed)
    ckpt_path = out_dir / "checkpoint.pt" if out_dir else None
    trainer = Trainer(samples, gen, disc, cfg, extractor,
                      log_path=out_dir / "train_log.jsonl" if out_dir else None, out_dir=out_dir)
    if resume is not None and resume.train_state:
        trainer.load_state_dict(resume.train_state)
    if trainer.log_path is not None and trainer.log_path.exists():
        # keep only records the resumed run has already produced
        kept = [ln for ln in trainer.log_path.read_text().splitlines()
                if ln and json.loads(ln)["step"] <= trainer.step_index]
        trainer.log_path.write_text("".join(ln + "\n" for ln in kept))
    t0 = time.perf_counter()
    trainer.run(until, ckpt_path)
    log.info("trained %d steps in %.1fs", trainer.step_index, time.perf_counter() - t0)
    if ckpt_path is not None:
        trainer.save(ckpt_path)
    return trainer.checkpoint(ckpt_path)


def convert_to_depth_level(rgb: Checkpoint, seed: int = 0) -> tuple[Generator, MultiScaleDiscriminator]:
    """Build depth-level models initialized from an RGB-level checkpoint.

    Every tensor whose shape carries over is copied; the 3-channel texture
    heads and the discriminator input layers are re-initialized.
    """
    if rgb.config.mode is not GenerationMode.RGB_LEVEL:
        raise ParameterError("source checkpoint must be RGB level")
    cfg = GeneratorConfig(**{**rgb.config.to_dict(), "mode": GenerationMode.DEPTH_LEVEL})
    gen, disc = build_models(cfg, seed)
    for dst, src in ((gen, rgb.generator), (disc, rgb.discriminator)):
        own = dst.state_dict()
        for k, v in src.state_dict().items():
            if k in own and own[k].shape == v.shape:
                own[k] = v.clone()
        dst.load_state_dict(own)
    return gen, disc


def finetune_depth_level(rgb: Checkpoint, samples, cfg: TrainConfig, out_dir=None, extractor=None) -> Checkpoint:
    gen, disc = convert_to_depth_level(rgb, cfg.seed)
    init = Checkpoint(gen.cfg, gen, disc, {})
    return train(samples, GenerationMode.DEPTH_LEVEL, gen.cfg, cfg, out_dir, resume=init, extractor=extractor)
