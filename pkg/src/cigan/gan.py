"""Text-free style-based generator (mapping network + modulated synthesis),
image discriminator, logistic GAN losses with R1 penalty, and the stage-1
training loop."""

import copy
import math
import os

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import NumericalError
from .nets import EqualizedConv2d, EqualizedLinear, ModulatedConv2d, lrelu
from .utils import CsvLogger, save_image_grid, torch_generator

# Feature widths per synthesis/discriminator resolution, sized for CPU training.
GEN_CHANNELS = {4: 96, 8: 64, 16: 48, 32: 32, 64: 24}
DISC_CHANNELS = {32: 32, 16: 48, 8: 64, 4: 96}


class MappingNetwork(nn.Module):
    """MLP from the noise space to the style space, with input normalization."""

    def __init__(self, d_z=64, d_w=64, n_layers=4, lr_mul=0.01):
        super().__init__()
        dims = [d_z] + [d_w] * n_layers
        self.layers = nn.ModuleList(
            EqualizedLinear(dims[i], dims[i + 1], lr_mul=lr_mul) for i in range(n_layers))
        self.d_z = d_z
        self.d_w = d_w

    def forward(self, z):
        if z.shape[-1] != self.d_z:
            raise ValueError(f"latent dimension mismatch: expected {self.d_z}, got {z.shape[-1]}")
        x = z * torch.rsqrt(z.square().mean(dim=-1, keepdim=True) + 1e-8)
        for layer in self.layers:
            x = lrelu(layer(x))
        return x


class SynthesisNetwork(nn.Module):
    """Learned 4x4 constant, style-modulated 3x3 convolutions with bilinear
    upsampling between resolutions, and a tanh RGB head."""

    def __init__(self, resolution=32, d_w=64, use_noise=False):
        super().__init__()
        if resolution not in (32, 64):
            raise ValueError(f"resolution must be 32 or 64, got {resolution}")
        self.resolution = resolution
        self.d_w = d_w
        self.use_noise = use_noise
        self.const = nn.Parameter(torch.randn(1, GEN_CHANNELS[4], 4, 4))
        self.convs = nn.ModuleList()
        self.noise_scales = nn.ParameterList()
        res, ch = 4, GEN_CHANNELS[4]
        self.convs.append(ModulatedConv2d(ch, ch, 3, d_w))
        self._register_noise(0, res)
        while res < resolution:
            res *= 2
            out_ch = GEN_CHANNELS[res]
            self.convs.append(ModulatedConv2d(ch, out_ch, 3, d_w))
            self._register_noise(len(self.convs) - 1, res)
            ch = out_ch
        self.to_rgb = ModulatedConv2d(ch, 3, 1, d_w, demodulate=False)

    def _register_noise(self, idx, res):
        # fixed per-layer noise images keep synthesis a deterministic map of w
        self.register_buffer(f"noise_{idx}", torch.randn(1, 1, res, res))
        self.noise_scales.append(nn.Parameter(torch.zeros(1)))

    def forward(self, w):
        if w.shape[-1] != self.d_w:
            raise ValueError(f"style dimension mismatch: expected {self.d_w}, got {w.shape[-1]}")
        if not torch.isfinite(w).all():
            raise ValueError("style vector contains non-finite entries")
        x = self.const.expand(w.shape[0], -1, -1, -1)
        for idx, conv in enumerate(self.convs):
            if idx > 0:
                x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = conv(x, w)
            if self.use_noise:
                x = x + getattr(self, f"noise_{idx}") * self.noise_scales[idx]
            x = lrelu(x)
        return torch.tanh(self.to_rgb(x, w))


class Generator(nn.Module):
    def __init__(self, resolution=32, d_z=64, d_w=64, mapping_layers=4, use_noise=False):
        super().__init__()
        self.mapping = MappingNetwork(d_z, d_w, mapping_layers)
        self.synthesis = SynthesisNetwork(resolution, d_w, use_noise)
        self.d_z = d_z
        self.d_w = d_w
        self.resolution = resolution

    def map_latent(self, z):
        squeeze = z.dim() == 1
        w = self.mapping(z.unsqueeze(0) if squeeze else z)
        return w.squeeze(0) if squeeze else w

    def synthesize(self, w):
        squeeze = w.dim() == 1
        img = self.synthesis(w.unsqueeze(0) if squeeze else w)
        return img.squeeze(0) if squeeze else img

    def forward(self, z):
        return self.synthesize(self.map_latent(z))

    @staticmethod
    def arch_config(cfg):
        return {"resolution": cfg.data.resolution, "d_z": cfg.model.d_z, "d_w": cfg.model.d_w,
                "mapping_layers": cfg.model.mapping_layers, "use_noise": cfg.model.use_noise}


class ImageDiscriminator(nn.Module):
    """Convolutional downsampling stack ending in a single scalar logit."""

    def __init__(self, resolution=32):
        super().__init__()
        self.resolution = resolution
        layers = [EqualizedConv2d(3, DISC_CHANNELS[resolution] if resolution in DISC_CHANNELS else 24, 3, padding=1)]
        res = resolution
        ch = layers[0].weight.shape[0]
        while res > 4:
            res //= 2
            out_ch = DISC_CHANNELS[res] if res in DISC_CHANNELS else ch
            layers.append(EqualizedConv2d(ch, out_ch, 3, stride=2, padding=1))
            ch = out_ch
        self.convs = nn.ModuleList(layers)
        self.fc1 = EqualizedLinear(ch * 16, 128)
        self.fc2 = EqualizedLinear(128, 1)

    def forward(self, x):
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[1:] != (3, self.resolution, self.resolution):
            raise ValueError(f"expected (N, 3, {self.resolution}, {self.resolution}) images, got {tuple(x.shape)}")
        for conv in self.convs:
            x = lrelu(conv(x))
        out = self.fc2(lrelu(self.fc1(x.flatten(1)))).squeeze(1)
        return out.squeeze(0) if squeeze else out


def g_nonsaturating_loss(fake_logits):
    """softplus(-D(fake)): minimized by raising the discriminator's score."""
    return F.softplus(-fake_logits).mean()


def d_logistic_loss(real_logits, fake_logits):
    """softplus(D(fake)) + softplus(-D(real)): the discriminator separates
    real above fake; equals 2 ln 2 at indifference."""
    return F.softplus(fake_logits).mean() + F.softplus(-real_logits).mean()


def r1_penalty(disc, real):
    """Squared gradient norm of the discriminator at real inputs."""
    x = real.detach().requires_grad_(True)
    out = disc(x)
    (grad,) = torch.autograd.grad(out.sum(), x, create_graph=True)
    return grad.flatten(1).square().sum(dim=1).mean()


@torch.no_grad()
def update_ema(ema_model, model, decay):
    for p_ema, p in zip(ema_model.parameters(), model.parameters()):
        p_ema.lerp_(p, 1.0 - decay)
    for b_ema, b in zip(ema_model.buffers(), model.buffers()):
        b_ema.copy_(b)


def build_generator_from(ckpt, key="generator"):
    gen = Generator(**ckpt.extra["generator_arch"])
    gen.load_state_dict(ckpt.get_state_dict(key))
    return gen


def sampling_generator(ckpt):
    """The generator used for all sampling/evaluation: the EMA copy when the
    checkpoint carries one, otherwise the raw weights."""
    key = "generator_ema" if any(k.startswith("generator_ema/") for k in ckpt.arrays) else "generator"
    return build_generator_from(ckpt, key)


def build_image_disc_from(ckpt, key="discriminator"):
    disc = ImageDiscriminator(ckpt.extra["generator_arch"]["resolution"])
    disc.load_state_dict(ckpt.get_state_dict(key))
    return disc


def train_gan(dataset, cfg, out_dir, cfg_hash, resume=None):
    """Stage-1 adversarial training on the image dataset alone.

    Returns the final checkpoint path. Emits loss.csv (step, loss_G, loss_D,
    r1) and periodic 8x8 sample grids drawn from the EMA generator.
    """
    os.makedirs(str(out_dir), exist_ok=True)
    train = dataset.subset("train")
    images = torch.from_numpy(train.images)
    gcfg = cfg.gan

    torch.manual_seed(torch_generator(cfg.seed, "gan-init").initial_seed())
    gen = Generator(**Generator.arch_config(cfg))
    disc = ImageDiscriminator(cfg.data.resolution)
    gen_ema = copy.deepcopy(gen)
    gen_ema.requires_grad_(False)

    opt_g = torch.optim.Adam(gen.parameters(), lr=gcfg.lr, betas=(gcfg.beta1, gcfg.beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=gcfg.lr, betas=(gcfg.beta1, gcfg.beta2))
    rng = torch_generator(cfg.seed, "gan-train")
    start_step = 0

    if resume is not None:
        ck = load_checkpoint(resume)
        gen.load_state_dict(ck.get_state_dict("generator"))
        gen_ema.load_state_dict(ck.get_state_dict("generator_ema"))
        disc.load_state_dict(ck.get_state_dict("discriminator"))
        ck.load_optimizer("optimizer/g", opt_g)
        ck.load_optimizer("optimizer/d", opt_d)
        ck.load_rng("train", rng)
        start_step = ck.step

    grid_z = torch.randn(64, cfg.model.d_z, generator=torch_generator(cfg.seed, "gan-grid"))
    log = CsvLogger(os.path.join(str(out_dir), "loss.csv"), ["step", "loss_G", "loss_D", "r1"])

    def snapshot(step):
        ck = Checkpoint(stage=1, step=step, config_hash=cfg_hash,
                        extra={"generator_arch": Generator.arch_config(cfg)})
        ck.put_state_dict("generator", gen.state_dict())
        ck.put_state_dict("generator_ema", gen_ema.state_dict())
        ck.put_state_dict("discriminator", disc.state_dict())
        ck.put_optimizer("optimizer/g", opt_g)
        ck.put_optimizer("optimizer/d", opt_d)
        ck.put_rng("train", rng)
        return ck

    for step in range(start_step + 1, gcfg.steps + 1):
        idx = torch.randint(0, len(images), (gcfg.batch_size,), generator=rng)
        x_real = images[idx]
        z = torch.randn(gcfg.batch_size, cfg.model.d_z, generator=rng)

        # discriminator
        with torch.no_grad():
            x_fake = gen(z)
        r1 = r1_penalty(disc, x_real)
        loss_d = d_logistic_loss(disc(x_real), disc(x_fake)) + 0.5 * gcfg.r1_gamma * r1
        opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        opt_d.step()

        # generator
        z = torch.randn(gcfg.batch_size, cfg.model.d_z, generator=rng)
        loss_g = g_nonsaturating_loss(disc(gen(z)))
        opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        opt_g.step()

        if gcfg.ema_enabled:
            update_ema(gen_ema, gen, gcfg.ema_decay)
        else:
            update_ema(gen_ema, gen, 0.0)

        if not (torch.isfinite(loss_g) and torch.isfinite(loss_d)):
            save_checkpoint(snapshot(step), os.path.join(str(out_dir), "diverged.cigc"))
            raise NumericalError(f"non-finite GAN loss at step {step} "
                                 f"(loss_G={loss_g.item()}, loss_D={loss_d.item()})")

        if step % gcfg.log_interval == 0 or step == gcfg.steps:
            log.append({"step": step, "loss_G": loss_g.item(), "loss_D": loss_d.item(),
                        "r1": r1.item()})
        if gcfg.sample_interval and (step % gcfg.sample_interval == 0 or step == gcfg.steps):
            with torch.no_grad():
                grid = gen_ema(grid_z).numpy()
            save_image_grid(grid, os.path.join(str(out_dir), f"samples_{step:06d}.png"))

    path = os.path.join(str(out_dir), "ckpt.cigc")
    save_checkpoint(snapshot(gcfg.steps if gcfg.steps > start_step else start_step), path)
    return path
