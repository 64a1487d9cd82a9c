"""3D UNet ε-network over latent grids and the bridge training step."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import bridge as B
from . import tensor as T
from .vqvae import VQVAE


@dataclass
class DenoiserConfig:
    in_channels: int = 2
    base: int = 32
    mults: tuple = (1, 2)
    time_dim: int = 64
    attention: bool = True

    @property
    def levels(self) -> int:
        return len(self.mults)

    def validate(self, latent_size: int) -> None:
        if self.base <= 0 or any(m <= 0 for m in self.mults) or self.in_channels <= 0:
            raise ValueError("denoiser widths must be positive")
        if latent_size % (2 ** (self.levels - 1)):
            raise ValueError(f"latent size {latent_size} not divisible by 2^{self.levels - 1}")


class UNet3d(nn.Module):
    """ResBlock encoder with stride-2 downsampling, a ResBlock/attention/ResBlock
    middle, and a mirrored decoder fed by concatenated skip connections."""

    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DenoiserConfig()
        td = cfg.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        widths = [cfg.base * m for m in cfg.mults]
        self.conv_in = nn.Conv3d(cfg.in_channels, widths[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            self.down.append(T.ResBlock3d(prev, w, td))
            last = i == len(widths) - 1
            self.downsample.append(nn.Identity() if last else T.Downsample3d(w))
            prev = w
        self.mid1 = T.ResBlock3d(prev, prev, td)
        self.mid_attn = T.AttentionBlock3d(prev) if cfg.attention else nn.Identity()
        self.mid2 = T.ResBlock3d(prev, prev, td)
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i, w in reversed(list(enumerate(widths))):
            self.up.append(T.ResBlock3d(prev + w, w, td))
            self.upsample.append(T.Upsample3d(w) if i > 0 else nn.Identity())
            prev = w
        self.norm_out = nn.GroupNorm(T._groups(prev), prev)
        self.conv_out = nn.Conv3d(prev, cfg.in_channels, 3, padding=1)

    def forward(self, z, t):
        if z.shape[-1] % (2 ** (self.cfg.levels - 1)):
            raise ValueError(f"latent size {z.shape[-1]} not divisible by 2^{self.cfg.levels - 1}")
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1 and z.shape[0] > 1:
            t = t.expand(z.shape[0])
        temb = self.time_mlp(T.time_embedding(t, self.cfg.time_dim).to(z.dtype))
        h = self.conv_in(z)
        skips = []
        for block, down in zip(self.down, self.downsample):
            h = block(h, temb)
            skips.append(h)
            h = down(h)
        h = self.mid2(self.mid_attn(self.mid1(h, temb)), temb)
        for block, up in zip(self.up, self.upsample):
            h = block(T.concat([h, skips.pop()]), temb)
            h = up(h)
        return self.conv_out(T.silu(self.norm_out(h)))


def denoise(net: UNet3d, z_t, t):
    if not isinstance(t, torch.Tensor) and not 1 <= int(t):
        raise ValueError("denoiser timesteps start at 1")
    return net(z_t, t)


def parameter_count(cfg: DenoiserConfig) -> int:
    return sum(p.numel() for p in UNet3d(cfg).parameters())


def bridge_batch(z0, zT, sched: B.BridgeSchedule, gen: torch.Generator, t=None):
    """Sample per-item timesteps in [1, T-1], bridge states and ε targets."""
    n = z0.shape[0]
    if t is None:
        t = torch.randint(1, sched.T, (n,), generator=gen)
    coeffs = np.array([B.posterior_coeffs(int(ti), sched) for ti in t])
    shape = (n,) + (1,) * (z0.ndim - 1)
    a, b, var = (torch.as_tensor(coeffs[:, j], dtype=z0.dtype).reshape(shape) for j in range(3))
    sigma = torch.as_tensor(np.sqrt(sched.sigma2[t.numpy()]), dtype=z0.dtype).reshape(shape)
    noise = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    z_t = a * z0 + b * zT + var.sqrt() * noise
    target = (z_t - z0) / sigma
    return t, z_t, target


def bridge_endpoints(vq: VQVAE, x_complete, feats, x_partial, noise_scale: float, gen):
    """Frozen complete-shape latent and noisy partial-shape latent (grad flows into e_p)."""
    with torch.no_grad():
        z0 = vq.encode_complete(x_complete, feats)
    zT = B.inject_stochasticity(vq.encode_partial(x_partial), noise_scale, gen)
    return z0, zT


def bridge_loss(net, vq, x_complete, feats, x_partial, sched, gen, noise_scale: float = 1.0, t=None):
    z0, zT = bridge_endpoints(vq, x_complete, feats, x_partial, noise_scale, gen)
    t, z_t, target = bridge_batch(z0, zT, sched, gen, t)
    return T.mse(net(z_t, t), target)


def freeze_vq(vq: VQVAE) -> None:
    for mod in (vq.e_c, vq.cb, vq.dec, vq.fuse):
        for p in mod.parameters():
            p.requires_grad_(False)


def train_bridge_step(net: UNet3d, vq: VQVAE, batch, sched: B.BridgeSchedule, opt,
                      gen: torch.Generator, noise_scale: float = 1.0) -> dict:
    """One optimizer step on the ε-loss; updates the denoiser and ``vq.e_p`` only.

    ``batch`` is ``(x_complete, feats, x_partial)`` as tensors.
    """
    if float(vq.stage) < 1:
        raise RuntimeError("bridge training needs a trained VQ-VAE")
    freeze_vq(vq)
    opt.zero_grad(set_to_none=True)
    loss = bridge_loss(net, vq, *batch, sched, gen, noise_scale)
    loss.backward()
    T.optimizer_step(opt)
    return {"loss": float(loss.detach())}
