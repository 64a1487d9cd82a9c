"""Depth-enhanced VQ-VAE over truncated distance fields.

Two encoders share one latent space: ``e_c`` maps complete TUDF grids (with
optional cross-attention to aggregated depth-view features) and ``e_p`` maps
partial TSDF scans. A nearest-neighbour codebook quantizes latents and the
decoder maps quantized latents back to a TUDF in ``[0, truncation]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import tensor as T
from .grid import SDF, UDF, VoxelGrid
from .views import DEFAULT_VIEWS, PatchDescriptor, shape_features


class StageError(RuntimeError):
    """Training stages invoked out of order."""


@dataclass
class VQConfig:
    D: int = 16
    d: int = 4
    C: int = 2
    K: int = 64
    beta_c: float = 0.25
    widths: tuple = (16, 32, 32)
    truncation: float = 3.0
    fusion: bool = True
    views: tuple = DEFAULT_VIEWS
    patch: int = 4
    dead_code_steps: int = 2000

    def __post_init__(self):
        levels = math.log2(self.D / self.d)
        if self.d >= self.D or levels != int(levels):
            raise ValueError(f"latent size {self.d} must be D/2^k for grid size {self.D}")
        if len(self.widths) != int(levels) + 1:
            raise ValueError(f"need {int(levels) + 1} widths for D={self.D}, d={self.d}")
        if self.K < 2:
            raise ValueError("codebook needs at least two entries")
        if self.D % self.patch:
            raise ValueError("view patch size must divide D")


@dataclass
class VqResult:
    quantized: torch.Tensor
    indices: torch.Tensor
    losses: dict = field(default_factory=dict)


class _StraightThrough(torch.autograd.Function):
    """Forward returns the codebook rows exactly; backward copies the
    incoming gradient to the continuous latent."""

    @staticmethod
    def forward(ctx, z, zq):
        return zq.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


class Codebook(nn.Module):
    def __init__(self, K: int, C: int, dead_code_steps: int = 2000):
        super().__init__()
        self.embed = nn.Parameter(torch.empty(K, C).uniform_(-1.0 / K, 1.0 / K))
        self.register_buffer("usage", torch.zeros(K))
        self.register_buffer("idle", torch.zeros(K))
        self.register_buffer("initialized", torch.zeros(1))
        self.dead_code_steps = dead_code_steps

    @property
    def K(self):
        return self.embed.shape[0]

    def seed_from(self, tokens: torch.Tensor, gen: torch.Generator | None = None,
                  which: torch.Tensor | None = None) -> None:
        """Overwrite entries (all, or the ``which`` mask) with random batch tokens."""
        with torch.no_grad():
            idx = torch.arange(self.K) if which is None else torch.nonzero(which).flatten()
            if idx.numel() == 0:
                return
            pick = torch.randint(0, tokens.shape[0], (idx.numel(),), generator=gen)
            self.embed[idx] = tokens[pick].to(self.embed.dtype)
            self.idle[idx] = 0
            self.usage[idx] = 0
            self.initialized.fill_(1)

    def track(self, indices: torch.Tensor, tokens: torch.Tensor, gen: torch.Generator | None = None) -> int:
        """Update usage counters after a training step; re-seed dead entries."""
        counts = torch.bincount(indices.flatten(), minlength=self.K).to(self.usage.dtype)
        self.usage += counts
        self.idle = torch.where(counts > 0, torch.zeros_like(self.idle), self.idle + 1)
        dead = self.idle >= self.dead_code_steps
        n_dead = int(dead.sum())
        if n_dead:
            self.seed_from(tokens.detach(), gen, dead)
        return n_dead


def tokens_of(z: torch.Tensor) -> torch.Tensor:
    """(N, C, d, d, d) -> (N*d^3, C)."""
    return z.permute(0, 2, 3, 4, 1).reshape(-1, z.shape[1])


def from_tokens(tok: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    n, c, *sp = like.shape
    return tok.reshape(n, *sp, c).permute(0, 4, 1, 2, 3)


def quantize(z: torch.Tensor, cb: Codebook | torch.Tensor, beta_c: float = 0.25) -> VqResult:
    """Snap every latent token to its nearest codebook entry (L2).

    ``losses["codebook"]`` pulls entries toward stop-gradient latents and
    ``losses["commitment"]`` (weighted by ``beta_c``) pulls latents toward
    stop-gradient entries.
    """
    embed = cb.embed if isinstance(cb, Codebook) else cb
    if embed.shape[0] == 0:
        raise ValueError("empty codebook")
    if z.shape[1] != embed.shape[1]:
        raise ValueError(f"latent channels {z.shape[1]} != codebook width {embed.shape[1]}")
    tok = tokens_of(z)
    d2 = (tok.detach()[:, None, :] - embed.detach()[None, :, :]).pow(2).sum(-1)
    idx = d2.argmin(dim=1)
    zq_tok = embed[idx]
    zq = from_tokens(zq_tok, z)
    losses = {
        "codebook": T.mse(zq, z.detach()),
        "commitment": beta_c * T.mse(z, zq.detach()),
    }
    quantized = _StraightThrough.apply(z, zq.detach())
    return VqResult(quantized, idx.reshape(z.shape[0], *z.shape[2:]), losses)


class Encoder(nn.Module):
    """Strided conv trunk to the latent grid, then a projection to C channels."""

    def __init__(self, cfg: VQConfig):
        super().__init__()
        w = cfg.widths
        self.scale = 1.0 / cfg.truncation
        self.conv_in = nn.Conv3d(1, w[0], 3, padding=1)
        blocks = []
        for i in range(len(w) - 1):
            blocks += [T.ResBlock3d(w[i], w[i]), T.Downsample3d(w[i])]
            if w[i] != w[i + 1]:
                blocks.append(nn.Conv3d(w[i], w[i + 1], 1))
        blocks.append(T.ResBlock3d(w[-1], w[-1]))
        self.trunk = nn.Sequential(*blocks)
        self.norm_out = nn.GroupNorm(T._groups(w[-1]), w[-1])
        self.conv_out = nn.Conv3d(w[-1], cfg.C, 1)

    def features(self, x):
        return self.trunk(self.conv_in(x * self.scale))

    def head(self, h):
        return self.conv_out(T.silu(self.norm_out(h)))

    def forward(self, x):
        return self.head(self.features(x))


class DepthFusion(nn.Module):
    """Cross-attention from latent voxels (queries) to view-feature patches."""

    def __init__(self, cfg: VQConfig, feat_channels: int = PatchDescriptor.channels):
        super().__init__()
        width = cfg.widths[-1]
        n_ctx = (cfg.D // cfg.patch) ** 2
        self.embed = nn.Linear(feat_channels, width)
        self.pos = nn.Parameter(torch.zeros(n_ctx, width))
        self.attn = T.CrossAttention(width, width)

    def forward(self, h, feats):
        n, c = h.shape[:2]
        ctx = self.embed(feats.flatten(2).transpose(1, 2)) + self.pos
        tok = h.flatten(2).transpose(1, 2)
        return self.attn(tok, ctx).transpose(1, 2).reshape(h.shape)


class Decoder(nn.Module):
    def __init__(self, cfg: VQConfig):
        super().__init__()
        w = cfg.widths[::-1]
        self.truncation = cfg.truncation
        self.conv_in = nn.Conv3d(cfg.C, w[0], 3, padding=1)
        blocks = [T.ResBlock3d(w[0], w[0])]
        for i in range(len(w) - 1):
            blocks += [T.Upsample3d(w[i]), T.ResBlock3d(w[i], w[i + 1])]
        self.body = nn.Sequential(*blocks)
        self.norm_out = nn.GroupNorm(T._groups(w[-1]), w[-1])
        self.conv_out = nn.Conv3d(w[-1], 1, 3, padding=1)

    def forward(self, zq):
        """Unclamped output; a sigmoid stretched 10% past both ends of
        ``[0, truncation]`` so the bounds are reachable with finite logits."""
        h = self.body(self.conv_in(zq))
        margin = 0.1 * self.truncation
        return (self.truncation + 2 * margin) * torch.sigmoid(self.conv_out(T.silu(self.norm_out(h)))) - margin


class VQVAE(nn.Module):
    def __init__(self, cfg: VQConfig | None = None):
        super().__init__()
        self.cfg = cfg or VQConfig()
        self.e_c = Encoder(self.cfg)
        self.e_p = Encoder(self.cfg)
        self.fuse = DepthFusion(self.cfg)
        self.cb = Codebook(self.cfg.K, self.cfg.C, self.cfg.dead_code_steps)
        self.dec = Decoder(self.cfg)
        # highest completed training stage (0, 1 or 2)
        self.register_buffer("stage", torch.zeros(1))

    def encode_complete(self, x, feats=None, fusion: bool | None = None):
        fusion = self.cfg.fusion if fusion is None else fusion
        _check_grid_tensor(x, self.cfg.D)
        h = self.e_c.features(x)
        if fusion:
            if feats is None:
                raise ValueError("depth fusion is enabled but no view features were given")
            h = self.fuse(h, feats)
        return self.e_c.head(h)

    def encode_partial(self, x):
        _check_grid_tensor(x, self.cfg.D)
        return self.e_p(x)

    def quantize(self, z):
        return quantize(z, self.cb, self.cfg.beta_c)

    def decode(self, zq):
        d, C = self.cfg.d, self.cfg.C
        if zq.ndim != 5 or tuple(zq.shape[1:]) != (C, d, d, d):
            raise ValueError(f"decoder expects (N, {C}, {d}, {d}, {d}), got {tuple(zq.shape)}")
        return self.dec(zq).clamp(0.0, self.cfg.truncation)

    def checkpoint_tensors(self) -> dict:
        out = {}
        for name in ("e_c", "e_p", "dec", "cb", "fuse"):
            out.update(T.module_tensors(getattr(self, name), f"{name}/"))
        out["vq/stage"] = self.stage
        return out

    def load_checkpoint_tensors(self, tensors) -> None:
        for name in ("e_c", "e_p", "dec", "cb", "fuse"):
            T.load_module_tensors(getattr(self, name), f"{name}/", tensors)
        self.stage.copy_(tensors["vq/stage"])

    def param_names(self) -> dict[int, str]:
        names = {}
        for name in ("e_c", "e_p", "dec", "cb", "fuse"):
            for k, p in getattr(self, name).named_parameters():
                names[id(p)] = f"{name}/{k}"
        return names


def _check_grid_tensor(x, D):
    if x.ndim != 5 or x.shape[1] != 1 or tuple(x.shape[2:]) != (D, D, D):
        raise ValueError(f"expected grid batch (N, 1, {D}, {D}, {D}), got {tuple(x.shape)}")


# ---------------------------------------------------------------------------
# grid <-> tensor helpers


def grid_tensor(grids) -> torch.Tensor:
    if isinstance(grids, VoxelGrid):
        grids = [grids]
    arr = np.stack([g.values for g in grids])[:, None].astype(np.float32)
    return torch.from_numpy(arr).to(torch.get_default_dtype())


def feature_tensor(grids, views=DEFAULT_VIEWS, extractor=None) -> torch.Tensor:
    if isinstance(grids, VoxelGrid):
        grids = [grids]
    arr = np.stack([shape_features(g, views, extractor).values for g in grids])
    return torch.from_numpy(arr).to(torch.get_default_dtype())


def to_grid(x: torch.Tensor, truncation: float, kind: str = UDF) -> VoxelGrid:
    values = x.detach().cpu().numpy().reshape(x.shape[-3:]).astype(np.float32)
    values = np.clip(values, 0 if kind == UDF else -truncation, truncation)
    return VoxelGrid(values, kind, 1.0, truncation)


def encode_complete(model: VQVAE, X: VoxelGrid, depth_feats=None, fusion: bool | None = None):
    if X.kind != UDF:
        raise ValueError("E_c consumes UDF grids")
    feats = None
    if depth_feats is not None:
        feats = torch.as_tensor(np.asarray(depth_feats.values))[None].to(torch.get_default_dtype())
    return model.encode_complete(grid_tensor(X), feats, fusion)


def encode_partial(model: VQVAE, Xp: VoxelGrid):
    if Xp.kind != SDF:
        raise ValueError("E_p consumes SDF grids")
    return model.encode_partial(grid_tensor(Xp))


def decode(model: VQVAE, zq: torch.Tensor) -> VoxelGrid:
    return to_grid(model.decode(zq)[0], model.cfg.truncation)


# ---------------------------------------------------------------------------
# training


def vq_parameters(model: VQVAE, stage: int):
    mods = [model.e_c, model.cb, model.dec]
    if stage == 2:
        mods.append(model.fuse)
    return [p for m in mods for p in m.parameters()]


def vq_loss(model: VQVAE, x, feats=None, fusion: bool = False) -> tuple[torch.Tensor, dict, VqResult, torch.Tensor]:
    z = model.encode_complete(x, feats, fusion=fusion)
    vq = model.quantize(z)
    # loss on the unclamped decoder output keeps gradients alive at the bounds
    recon = model.dec(vq.quantized)
    parts = {"reconstruction": T.mse(recon, x), **vq.losses}
    total = parts["reconstruction"] + parts["codebook"] + parts["commitment"]
    return total, parts, vq, z


def vq_training_step(model: VQVAE, x, feats, stage: int, opt, gen: torch.Generator | None = None) -> dict:
    """One optimizer step of VQ-VAE training.

    Stage 1 trains encoder, codebook and decoder without fusion. Stage 2
    requires a finished stage 1 and view features, and trains with fusion on.
    """
    if stage not in (1, 2):
        raise ValueError("stage must be 1 or 2")
    if stage == 2:
        if float(model.stage) < 1:
            raise StageError("stage 2 needs a completed stage-1 model")
        if feats is None:
            raise ValueError("stage 2 needs rendered view features")
    model.train()
    if not float(model.cb.initialized):
        with torch.no_grad():
            model.cb.seed_from(tokens_of(model.encode_complete(x, feats, fusion=stage == 2)), gen)
    opt.zero_grad(set_to_none=True)
    total, parts, vq, z = vq_loss(model, x, feats if stage == 2 else None, fusion=stage == 2)
    total.backward()
    T.optimizer_step(opt)
    reseeded = model.cb.track(vq.indices, tokens_of(z), gen)
    rec = {k: float(v.detach()) for k, v in parts.items()}
    rec["total"] = float(total.detach())
    rec["reseeded"] = reseeded
    return rec


@torch.no_grad()
def reconstruction_l1(model: VQVAE, x, feats=None, fusion: bool = False) -> float:
    model.eval()
    z = model.encode_complete(x, feats, fusion=fusion)
    recon = model.decode(model.quantize(z).quantized)
    return float((recon - x).abs().mean())
