import math

import numpy as np
import pytest
import torch

from hybridsynth.core import Decoder, DimensionError, GenerationMode, ParameterError
from hybridsynth.network import CheckpointError, GeneratorConfig, build_models, load_checkpoint
from hybridsynth.training import (LossWeights, MissingDecoderOutput, RandomConvFeatures, TrainConfig, Trainer,
                                  TrainingDiverged, adversarial_losses, convert_to_depth_level,
                                  finetune_depth_level, gan_losses, lr_at, parameter_digest, perceptual_loss,
                                  total_generator_loss, train)

from conftest import make_sample
from oracles import central_difference


def tiny_cfg(mode=GenerationMode.RGB_LEVEL):
    return GeneratorConfig(16, 4, 8, 1, 64, mode, 8, 2, 2)


def tiny_samples(n=4, size=16):
    return [make_sample(f"cat/train/good/{i:03d}", size, size, seed=i) for i in range(n)]


@pytest.fixture(scope="module")
def extractor():
    return RandomConvFeatures(seed=7)


def test_perceptual_identity_and_symmetry(extractor):
    a, b = torch.rand(2, 3, 16, 16) * 2 - 1, torch.rand(2, 3, 16, 16) * 2 - 1
    assert perceptual_loss(a, a.clone(), extractor).item() == 0.0
    assert perceptual_loss(a, b, extractor).item() == perceptual_loss(b, a, extractor).item()
    assert perceptual_loss(a, b, extractor).item() > 0
    with pytest.raises(DimensionError):
        perceptual_loss(a, b[:, :1], extractor)


def test_perceptual_accepts_single_channel(extractor):
    a, b = torch.rand(1, 1, 16, 16), torch.rand(1, 1, 16, 16)
    assert perceptual_loss(a, b, extractor).item() > 0


def test_perceptual_gradient_matches_finite_differences():
    ext = RandomConvFeatures(seed=3).double()
    torch.manual_seed(0)
    target = torch.rand(1, 3, 12, 12, dtype=torch.float64)
    x = torch.rand(1, 3, 12, 12, dtype=torch.float64, requires_grad=True)
    perceptual_loss(x, target, ext).backward()
    rng = np.random.default_rng(0)
    for idx in rng.choice(x.numel(), 32, replace=False):
        num = central_difference(lambda: perceptual_loss(x.detach(), target, ext), x, int(idx))
        ana = x.grad.view(-1)[idx].item()
        assert abs(num - ana) / max(abs(num), abs(ana), 1e-8) < 1e-3


def test_gan_losses_closed_form():
    zeros = [torch.zeros(2, 1, 8, 8), torch.zeros(2, 1, 4, 4)]
    d, g = gan_losses(zeros, zeros)
    assert d.item() == pytest.approx(2 * math.log(2), abs=1e-6)
    assert g.item() == pytest.approx(math.log(2), abs=1e-6)


def test_gan_losses_confident_limit():
    big = math.log(1 / 1e-7 - 1)
    real = [torch.full((1, 1, 4, 4), big)]
    fake = [torch.full((1, 1, 4, 4), -big)]
    d, _ = gan_losses(real, fake)
    assert d.item() < 2e-6


def test_adversarial_losses_leave_generator_out_of_d_loss():
    gen, disc = build_models(tiny_cfg(), 0)
    cond = torch.randn(2, 5, 16, 16)
    generated = torch.randn(2, 3, 16, 16, requires_grad=True)
    d_loss, g_loss = adversarial_losses(disc, cond, torch.randn(2, 3, 16, 16), generated)
    d_loss.backward()
    assert generated.grad is None
    g_loss.backward()
    assert generated.grad is not None and generated.grad.abs().sum() > 0


def _outputs(seed=0):
    torch.manual_seed(seed)
    gen, disc = build_models(tiny_cfg(), seed)
    x = torch.randn(2, 5, 16, 16)
    contents = {g: torch.rand(2, 3, 16, 16) * 2 - 1 for g in Decoder}
    targets = {g: torch.rand(2, 3, 16, 16) * 2 - 1 for g in Decoder}
    fused = {g: o[2] for g, o in gen(x, contents).items()}
    return gen, disc, x, fused, targets


def test_total_loss_weights(extractor):
    _, disc, x, fused, targets = _outputs()
    perc = sum(perceptual_loss(fused[g], targets[g], extractor) for g in Decoder)
    adv = sum(gan_losses([torch.zeros(1)], disc(x, fused[g]))[1] for g in Decoder)
    t10, _ = total_generator_loss(fused, targets, x, disc, extractor, LossWeights(1, 0))
    t00, _ = total_generator_loss(fused, targets, x, disc, extractor, LossWeights(0, 0))
    t11, parts = total_generator_loss(fused, targets, x, disc, extractor, LossWeights(1, 1))
    assert t10.item() == pytest.approx(perc.item(), rel=1e-6)
    assert t00.item() == 0
    assert t11.item() == pytest.approx((perc + adv).item(), rel=1e-6)
    assert set(parts) == set(Decoder)
    with pytest.raises(MissingDecoderOutput):
        total_generator_loss({Decoder.AHD: fused[Decoder.AHD]}, targets, x, disc, extractor)
    with pytest.raises(ParameterError):
        LossWeights(-1, 0)


def test_total_loss_finite_at_init(extractor):
    _, disc, x, fused, targets = _outputs(3)
    total, _ = total_generator_loss(fused, targets, x, disc, extractor)
    assert torch.isfinite(total)


def test_lr_schedule():
    assert lr_at(0, 100, 2e-4) == 2e-4
    assert lr_at(50, 100, 2e-4) == 2e-4
    assert lr_at(75, 100, 2e-4) == pytest.approx(1e-4)
    assert abs(lr_at(100, 100, 2e-4)) < 1e-9
    lrs = [lr_at(s, 100, 1.0) for s in range(101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    second = np.diff(lrs[51:])
    assert np.allclose(second, second[0])


def test_updates_touch_only_their_own_network(extractor):
    gen, disc = build_models(tiny_cfg(), 0)
    tr = Trainer(tiny_samples(), gen, disc, TrainConfig.desk(10, 2), extractor)
    batch = tr.make_batch(0)
    outs = tr.forward(batch)
    g0, d0 = parameter_digest(gen), parameter_digest(disc)
    tr.d_step(batch, outs)
    d1 = parameter_digest(disc)
    assert parameter_digest(gen) == g0 and d1 != d0
    tr.g_step(batch, outs)
    assert parameter_digest(disc) == d1 and parameter_digest(gen) != g0


def _history(seed, steps, samples, ext):
    cfg = TrainConfig.desk(steps, 2, seed)
    return train(samples, GenerationMode.RGB_LEVEL, tiny_cfg(), cfg, extractor=ext).history


def test_resume_reproduces_uninterrupted_run(tmp_path, extractor):
    samples = tiny_samples(5)
    cfg = TrainConfig.desk(6, 2, seed=4)
    full = train(samples, GenerationMode.RGB_LEVEL, tiny_cfg(), cfg, extractor=extractor).history
    part = train(samples, GenerationMode.RGB_LEVEL, tiny_cfg(), cfg, tmp_path, extractor=extractor, until=4)
    assert part.train_state["step"] == 4
    ck = load_checkpoint(tmp_path / "checkpoint.pt")
    rest = train(samples, GenerationMode.RGB_LEVEL, tiny_cfg(), cfg, tmp_path, resume=ck, extractor=extractor)
    assert rest.history == full[4:]
    logged = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert len(logged) == 6


def test_seed_changes_trajectory(extractor):
    samples = tiny_samples(4)
    a = _history(0, 3, samples, extractor)
    b = _history(1, 3, samples, extractor)
    assert a != b
    assert a == _history(0, 3, samples, extractor)


def test_non_finite_loss_aborts_with_dump(tmp_path, extractor):
    gen, disc = build_models(tiny_cfg(), 0)
    with torch.no_grad():
        next(disc.parameters()).fill_(float("nan"))
    tr = Trainer(tiny_samples(), gen, disc, TrainConfig.desk(4, 2), extractor, out_dir=tmp_path)
    with pytest.raises(TrainingDiverged):
        tr.step()
    assert "batch_ids" in (tmp_path / "divergence.json").read_text()


def test_epoch_based_step_count():
    cfg = TrainConfig(epochs=3, batch_size=4)
    assert cfg.total_steps(10) == 9
    assert TrainConfig().lr == 2e-4 and TrainConfig().betas == (0.5, 0.999)


def test_depth_conversion_keeps_encoder(tmp_path, extractor):
    samples = tiny_samples(3)
    rgb = train(samples, GenerationMode.RGB_LEVEL, tiny_cfg(), TrainConfig.desk(2, 2), tmp_path, extractor=extractor)
    gen, disc = convert_to_depth_level(rgb)
    assert parameter_digest(gen.encoder) == parameter_digest(rgb.generator.encoder)
    assert gen.decoders["ahd"].texture.head.weight.shape[0] == 1
    assert gen.decoders["ahd"].mask.head.weight.shape == rgb.generator.decoders["ahd"].mask.head.weight.shape
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "checkpoint.pt", expected_mode=GenerationMode.DEPTH_LEVEL)
    with pytest.raises(ParameterError):
        train(samples, GenerationMode.DEPTH_LEVEL, tiny_cfg(), TrainConfig.desk(1, 2), resume=rgb)


@pytest.mark.slow
def test_depth_finetune_reduces_depth_loss(toy_train, quiet_logs):
    samples = toy_train[:8]
    gen_cfg = GeneratorConfig.desk(64)
    rgb = train(samples, GenerationMode.RGB_LEVEL, gen_cfg, TrainConfig.desk(20, 4, seed=0))
    ck = finetune_depth_level(rgb, samples, TrainConfig.desk(200, 4, seed=0))
    per = [r["ahd_perceptual"] for r in ck.history]
    assert np.mean(per[-10:]) <= 0.7 * np.mean(per[:10])
    assert ck.mode is GenerationMode.DEPTH_LEVEL
