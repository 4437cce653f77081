"""Image-to-latent inversion encoder trained with pixel, perceptual and
adversarial terms plus cycle terms that tie encoder outputs back to the
generator's style space, both pointwise and in distribution."""

import math
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import Checkpoint, append_latents, load_checkpoint, save_checkpoint, write_latents
from .errors import NumericalError
from .gan import (build_image_disc_from, d_logistic_loss, r1_penalty, sampling_generator)
from .nets import EqualizedConv2d, EqualizedLinear, ResBlock, lrelu
from .utils import CsvLogger, save_image_grid, torch_generator

ENCODER_PLAN = {
    # (channels, downsample) per residual block; stems are 16 wide
    32: [(24, True), (24, False), (32, True), (32, False),
         (48, True), (48, False), (48, False), (48, False)],
    64: [(24, True), (24, True), (32, False), (32, True),
         (48, False), (48, True), (48, False), (48, False)],
}


class InversionEncoder(nn.Module):
    """Residual convolutional stack (8 blocks) pooled into a style vector."""

    def __init__(self, resolution=32, d_w=64):
        super().__init__()
        self.resolution = resolution
        self.d_w = d_w
        self.stem = EqualizedConv2d(3, 16, 3, padding=1)
        blocks = []
        ch = 16
        for out_ch, down in ENCODER_PLAN[resolution]:
            blocks.append(ResBlock(ch, out_ch, down=down))
            ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.head = EqualizedLinear(ch, d_w)

    def forward(self, x):
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[1:] != (3, self.resolution, self.resolution):
            raise ValueError(f"expected (N, 3, {self.resolution}, {self.resolution}) images, got {tuple(x.shape)}")
        y = lrelu(self.stem(x))
        for block in self.blocks:
            y = block(y)
        w = self.head(y.mean(dim=(2, 3)))
        return w.squeeze(0) if squeeze else w


class LatentDiscriminator(nn.Module):
    """3-layer MLP scoring whether a style vector comes from the mapping network."""

    def __init__(self, d_w=64, hidden=128):
        super().__init__()
        self.fc1 = EqualizedLinear(d_w, hidden)
        self.fc2 = EqualizedLinear(hidden, hidden)
        self.fc3 = EqualizedLinear(hidden, 1)

    def forward(self, w):
        squeeze = w.dim() == 1
        if squeeze:
            w = w.unsqueeze(0)
        out = self.fc3(lrelu(self.fc2(lrelu(self.fc1(w))))).squeeze(1)
        return out.squeeze(0) if squeeze else out


@dataclass
class LossWeights:
    lambda_vgg: float = 0.00005
    lambda_adv_x: float = 0.08
    lambda_w: float = 0.01
    lambda_adv_w: float = 0.005

    def __post_init__(self):
        for name in ("lambda_vgg", "lambda_adv_x", "lambda_w", "lambda_adv_w"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def loss_pix(x, x_rec):
    """Mean squared pixel difference (per element, so resolution-invariant)."""
    if x.shape != x_rec.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_rec.shape)}")
    return (x - x_rec).square().mean()


def loss_perceptual(x, x_rec, feature_fn):
    """Mean squared difference of extracted features."""
    if feature_fn is None:
        raise ValueError("a feature extractor is required for the perceptual loss")
    return (feature_fn(x) - feature_fn(x_rec)).square().mean()


def loss_adv_images(x_rec, disc):
    """softplus(-D(x_rec)): lower when reconstructions score as real."""
    return F.softplus(-disc(x_rec)).mean()


def loss_adv_latent(w_prime, disc_w):
    """softplus(-D_w(w')): lower when inverted codes score as in-distribution."""
    return F.softplus(-disc_w(w_prime)).mean()


def loss_w_recon(w, w_prime):
    """Mean squared difference between sampled and re-encoded style vectors."""
    if w.shape != w_prime.shape:
        raise ValueError(f"shape mismatch: {tuple(w.shape)} vs {tuple(w_prime.shape)}")
    return (w - w_prime).square().mean()


def encoder_objective(encoder, gen, disc, disc_w, x_real, w_sampled, weights, feature_fn):
    """Full encoder loss over one real-image batch and one sampled-w batch.

    Reconstruction terms use the real branch x -> E(x) -> G; cycle terms use
    the sampled branch w -> G(w) -> E. Returns (total, parts dict); gradients
    reach the encoder only, with the generator held fixed.
    """
    w_enc = encoder(x_real)
    x_rec = gen.synthesize(w_enc)
    parts = {
        "pix": loss_pix(x_real, x_rec),
        "vgg": loss_perceptual(x_real, x_rec, feature_fn),
        "adv_x": loss_adv_images(x_rec, disc),
    }
    if weights.lambda_w > 0 or weights.lambda_adv_w > 0:
        with torch.no_grad():
            x_from_w = gen.synthesize(w_sampled)
        w_prime = encoder(x_from_w)
        parts["w"] = loss_w_recon(w_sampled, w_prime)
        parts["adv_w"] = loss_adv_latent(w_prime, disc_w)
    else:
        zero = torch.zeros((), dtype=x_real.dtype)
        parts["w"] = zero
        parts["adv_w"] = zero
    total = (parts["pix"]
             + weights.lambda_vgg * parts["vgg"]
             + weights.lambda_adv_x * parts["adv_x"]
             + weights.lambda_w * parts["w"]
             + weights.lambda_adv_w * parts["adv_w"])
    if not torch.isfinite(total):
        raise NumericalError("non-finite encoder objective")
    return total, parts


def discriminator_objectives(disc, disc_w, x_real, x_rec, w_sampled, w_prime, r1_gamma=1.0):
    """Logistic objectives for the image and latent discriminators: each
    learns to score its real inputs above the encoder-derived ones."""
    loss_d = d_logistic_loss(disc(x_real), disc(x_rec))
    if r1_gamma > 0:
        loss_d = loss_d + 0.5 * r1_gamma * r1_penalty(disc, x_real)
    loss_dw = d_logistic_loss(disc_w(w_sampled), disc_w(w_prime))
    if r1_gamma > 0:
        loss_dw = loss_dw + 0.5 * r1_gamma * r1_penalty(disc_w, w_sampled)
    return loss_d, loss_dw


def build_encoder_from(ckpt):
    enc = InversionEncoder(**ckpt.extra["encoder_arch"])
    enc.load_state_dict(ckpt.get_state_dict("encoder"))
    return enc


def train_inversion(gan_ckpt_path, dataset, cfg, out_dir, cfg_hash, feature_fn, seed=None):
    """Stage-2 training of the inversion encoder against a frozen generator.

    cycle_enabled=False zeroes the two cycle terms and skips latent
    discriminator updates. Emits loss.csv, reconstruction grids, and a
    latent-code samples file of encoded held-out images.
    """
    os.makedirs(str(out_dir), exist_ok=True)
    ecfg = cfg.encoder
    seed = cfg.seed if seed is None else seed
    gan_ckpt = load_checkpoint(gan_ckpt_path)
    gen = sampling_generator(gan_ckpt)
    gen.requires_grad_(False)
    train = dataset.subset("train")
    images = torch.from_numpy(train.images)

    torch.manual_seed(torch_generator(seed, "enc-init").initial_seed())
    encoder = InversionEncoder(cfg.data.resolution, cfg.model.d_w)
    disc_w = LatentDiscriminator(cfg.model.d_w)
    disc = build_image_disc_from(gan_ckpt)  # fine-tuned from the stage-1 weights

    weights = LossWeights(ecfg.lambda_vgg, ecfg.lambda_adv_x,
                          ecfg.lambda_w if ecfg.cycle_enabled else 0.0,
                          ecfg.lambda_adv_w if ecfg.cycle_enabled else 0.0)
    opt_e = torch.optim.Adam(encoder.parameters(), lr=ecfg.lr, betas=(ecfg.beta1, ecfg.beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=ecfg.lr, betas=(ecfg.beta1, ecfg.beta2))
    opt_dw = torch.optim.Adam(disc_w.parameters(), lr=ecfg.lr, betas=(ecfg.beta1, ecfg.beta2))
    rng = torch_generator(seed, "enc-train")

    grid_idx = torch.arange(32)
    log = CsvLogger(os.path.join(str(out_dir), "loss.csv"),
                    ["step", "loss_E", "pix", "vgg", "adv_x", "w", "adv_w", "loss_D", "loss_Dw"])

    gen_checksum = _param_checksum(gen)

    for step in range(1, ecfg.steps + 1):
        idx = torch.randint(0, len(images), (ecfg.batch_size,), generator=rng)
        x_real = images[idx]
        z = torch.randn(ecfg.batch_size, gen.d_z, generator=rng)
        with torch.no_grad():
            w_sampled = gen.map_latent(z)

        total, parts = encoder_objective(encoder, gen, disc, disc_w, x_real, w_sampled,
                                         weights, feature_fn)
        opt_e.zero_grad(set_to_none=True)
        total.backward()
        opt_e.step()

        with torch.no_grad():
            x_rec = gen.synthesize(encoder(x_real))
        loss_d = d_logistic_loss(disc(x_real), disc(x_rec)) \
            + 0.5 * ecfg.r1_gamma * r1_penalty(disc, x_real)
        opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        opt_d.step()

        loss_dw = torch.zeros(())
        if ecfg.cycle_enabled:
            with torch.no_grad():
                w_prime = encoder(gen.synthesize(w_sampled))
            loss_dw = d_logistic_loss(disc_w(w_sampled), disc_w(w_prime)) \
                + 0.5 * ecfg.r1_gamma * r1_penalty(disc_w, w_sampled)
            opt_dw.zero_grad(set_to_none=True)
            loss_dw.backward()
            opt_dw.step()

        if not torch.isfinite(total + loss_d + loss_dw):
            raise NumericalError(f"non-finite inversion loss at step {step}")

        if step % ecfg.log_interval == 0 or step == ecfg.steps:
            log.append({"step": step, "loss_E": total.item(),
                        **{k: v.item() for k, v in parts.items()},
                        "loss_D": loss_d.item(), "loss_Dw": loss_dw.item()})
        if ecfg.sample_interval and (step % ecfg.sample_interval == 0 or step == ecfg.steps):
            with torch.no_grad():
                recon = gen.synthesize(encoder(images[grid_idx]))
            save_image_grid(
                torch.cat([images[grid_idx[:8]], recon[:8],
                           images[grid_idx[8:16]], recon[8:16]]).numpy(),
                os.path.join(str(out_dir), f"recon_{step:06d}.png"), rows=4, cols=8)

    assert _param_checksum(gen) == gen_checksum, "generator changed during inversion training"

    # encoded held-out codes for distribution diagnostics downstream
    val = dataset.subset("val")
    with torch.no_grad():
        codes = encode_images(encoder, torch.from_numpy(val.images))
    write_latents(os.path.join(str(out_dir), "wsamples.cigw"), codes.numpy())

    ck = Checkpoint(stage=2, step=ecfg.steps, config_hash=cfg_hash,
                    extra={"encoder_arch": {"resolution": cfg.data.resolution, "d_w": cfg.model.d_w},
                           "generator_arch": gan_ckpt.extra["generator_arch"],
                           "cycle_enabled": ecfg.cycle_enabled,
                           "gan_checkpoint": str(gan_ckpt_path)})
    ck.put_state_dict("encoder", encoder.state_dict())
    ck.put_state_dict("latent_disc", disc_w.state_dict())
    ck.put_state_dict("discriminator", disc.state_dict())
    ck.put_optimizer("optimizer/e", opt_e)
    ck.put_optimizer("optimizer/d", opt_d)
    ck.put_optimizer("optimizer/dw", opt_dw)
    ck.put_rng("train", rng)
    path = os.path.join(str(out_dir), "ckpt.cigc")
    save_checkpoint(ck, path)
    return path


def encode_images(encoder, images, batch_size=256):
    outs = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            outs.append(encoder(images[i:i + batch_size]))
    return torch.cat(outs) if outs else torch.zeros(0, encoder.d_w)


def _param_checksum(module):
    total = 0.0
    for p in module.parameters():
        total += float(p.double().abs().sum())
    return total
