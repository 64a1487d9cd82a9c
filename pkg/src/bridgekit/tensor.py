"""Differentiable array ops, network building blocks, optimizers and CKPT files.

Arrays are ``torch.Tensor`` and reverse-mode gradients come from torch
autograd. The wrappers below pin down the shape contracts the rest of the
package relies on (no implicit broadcasting except bias addition) and raise
``ValueError`` early when they are violated.
"""
from __future__ import annotations

import contextlib
import math
import os
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


@contextlib.contextmanager
def float64_mode():
    """Build and run models in double precision (gradient checking)."""
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


def _same_shape(a: torch.Tensor, b: torch.Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def add(a, b):
    _same_shape(a, b, "add")
    return a + b


def mul(a, b):
    _same_shape(a, b, "mul")
    return a * b


def matmul(a, b):
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims {a.shape[-1]} and {b.shape[-2]} differ")
    return a @ b


def linear(x, weight, bias=None):
    if x.shape[-1] != weight.shape[-1]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight width {weight.shape[-1]}")
    return F.linear(x, weight, bias)


def conv3d(x, weight, bias=None, stride: int = 1, pad: int = 0):
    """x: (N, C_in, D, H, W); weight: (C_out, C_in, k, k, k)."""
    if x.ndim != 5 or weight.ndim != 5 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv3d: incompatible input {tuple(x.shape)} and kernel {tuple(weight.shape)}")
    return F.conv3d(x, weight, bias, stride=stride, padding=pad)


def nearest_upsample(x):
    """Repeat every voxel 2x along each spatial axis."""
    if x.ndim != 5:
        raise ValueError("nearest_upsample expects (N, C, D, H, W)")
    return x.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3).repeat_interleave(2, dim=4)


def group_norm(x, groups: int, weight=None, bias=None, eps: float = 1e-5):
    if x.shape[1] % groups:
        raise ValueError(f"group_norm: {groups} groups do not divide {x.shape[1]} channels")
    return F.group_norm(x, groups, weight, bias, eps)


def silu(x):
    return F.silu(x)


def softmax(x, dim: int = -1):
    return torch.softmax(x, dim=dim)


def mse(a, b):
    _same_shape(a, b, "mse")
    return ((a - b) ** 2).mean()


def concat(xs, dim: int = 1):
    return torch.cat(list(xs), dim=dim)


def reshape(x, shape):
    if math.prod(shape) != x.numel() and -1 not in shape:
        raise ValueError(f"reshape: cannot view {tuple(x.shape)} as {tuple(shape)}")
    return x.reshape(shape)


def attention(q, k, v):
    """softmax(q k^T / sqrt(d_k)) v over the last two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"attention: query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError("attention: keys and values must have the same token count")
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    return softmax(logits, dim=-1) @ v


def time_embedding(t, dim: int):
    """Sinusoidal embedding: ``[sin(t w_i), cos(t w_i)]`` with ``w_i = 10000^(-i/half)``."""
    if dim % 2:
        raise ValueError("time embedding dimension must be even")
    t = torch.as_tensor(t, dtype=torch.get_default_dtype())
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = t.reshape(-1, 1) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


# ---------------------------------------------------------------------------
# blocks


def _groups(channels: int, preferred: int = 8) -> int:
    g = min(preferred, channels)
    while channels % g:
        g -= 1
    return g


class ResBlock3d(nn.Module):
    """GroupNorm -> SiLU -> conv, twice, with an optional additive time embedding
    injected after the first normalization."""

    def __init__(self, c_in: int, c_out: int, temb_dim: int | None = None):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv3d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(temb_dim, c_in) if temb_dim else None
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv3d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv3d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb=None):
        h = self.norm1(x)
        if self.temb is not None:
            h = h + self.temb(temb)[:, :, None, None, None]
        h = self.conv1(silu(h))
        h = self.conv2(silu(self.norm2(h)))
        return self.skip(x) + h


class Downsample3d(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv3d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample3d(nn.Module):
    """Nearest-neighbour x2 followed by a 3x3x3 convolution."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv3d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(nearest_upsample(x))


class AttentionBlock3d(nn.Module):
    """Single-head self-attention over all voxels, residual."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x):
        n, c = x.shape[:2]
        tokens = self.norm(x).reshape(n, c, -1).transpose(1, 2)
        q, k, v = self.qkv(tokens).chunk(3, dim=-1)
        out = self.proj(attention(q, k, v)).transpose(1, 2).reshape(x.shape)
        return x + out


class CrossAttention(nn.Module):
    """Queries from ``x`` tokens, keys/values from ``context`` tokens.

    The output projection starts at zero so a freshly attached block is the
    identity map.
    """

    def __init__(self, channels: int, context_dim: int, width: int | None = None):
        super().__init__()
        width = width or channels
        self.norm = nn.LayerNorm(channels)
        self.q = nn.Linear(channels, width)
        self.k = nn.Linear(context_dim, width)
        self.v = nn.Linear(context_dim, width)
        self.out = nn.Linear(width, channels)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x, context):
        """x: (N, T_q, channels); context: (N, T_kv, context_dim)."""
        h = attention(self.q(self.norm(x)), self.k(context), self.v(context))
        return x + self.out(h)


# ---------------------------------------------------------------------------
# optimization


def make_optimizer(params: Iterable[torch.Tensor], kind: str = "adam", lr: float = 1e-4,
                   betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
    params = list(params)
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
    if kind == "adamw":
        return torch.optim.AdamW(params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")


def optimizer_step(opt: torch.optim.Optimizer) -> None:
    """Apply one update; every managed parameter must carry a gradient."""
    for group in opt.param_groups:
        for p in group["params"]:
            if p.grad is None:
                raise RuntimeError("optimizer_step: parameter has no gradient")
    opt.step()


def optimizer_tensors(opt: torch.optim.Optimizer, names: Mapping[int, str], prefix: str) -> dict:
    """Flatten Adam moment buffers into named tensors for checkpointing."""
    out = {}
    for group in opt.param_groups:
        for p in group["params"]:
            state = opt.state.get(p)
            if not state:
                continue
            name = names[id(p)]
            out[f"{prefix}{name}/exp_avg"] = state["exp_avg"]
            out[f"{prefix}{name}/exp_avg_sq"] = state["exp_avg_sq"]
            out[f"{prefix}{name}/step"] = torch.as_tensor(state["step"]).reshape(1)
    return out


def load_optimizer_tensors(opt: torch.optim.Optimizer, names: Mapping[int, str], prefix: str,
                           tensors: Mapping[str, torch.Tensor]) -> None:
    for group in opt.param_groups:
        for p in group["params"]:
            key = f"{prefix}{names[id(p)]}"
            if f"{key}/step" not in tensors:
                continue
            opt.state[p] = {
                "step": torch.tensor(float(tensors[f"{key}/step"][0])),
                "exp_avg": tensors[f"{key}/exp_avg"].clone().to(p.dtype),
                "exp_avg_sq": tensors[f"{key}/exp_avg_sq"].clone().to(p.dtype),
            }


# ---------------------------------------------------------------------------
# CKPT files


def save_checkpoint(path, tensors: Mapping[str, torch.Tensor]) -> None:
    """Write named f32 tensors in the CKPT layout (little-endian)."""
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, torch.Tensor]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a CKPT file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported CKPT version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            name = buf[off + 4:off + 4 + n].decode("utf-8")
            off += 4 + n
            (ndim,) = struct.unpack_from("<I", buf, off)
            dims = struct.unpack_from(f"<{ndim}I", buf, off + 4)
            off += 4 + 4 * ndim
            size = math.prod(dims) * 4
            if off + size > len(buf):
                raise ValueError("truncated payload")
            arr = np.frombuffer(buf, dtype="<f4", count=math.prod(dims), offset=off).reshape(dims)
            out[name] = torch.from_numpy(arr.astype(np.float32))
            off += size
    except struct.error as exc:
        raise ValueError(f"{path}: truncated CKPT file") from exc
    if off != len(buf):
        raise ValueError(f"{path}: trailing bytes in CKPT file")
    return out


def module_tensors(module: nn.Module, prefix: str) -> dict[str, torch.Tensor]:
    return {f"{prefix}{k}": v for k, v in module.state_dict().items()}


def load_module_tensors(module: nn.Module, prefix: str, tensors: Mapping[str, torch.Tensor]) -> None:
    state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    module.load_state_dict(state, strict=True)


def rng_tensor(gen: torch.Generator) -> torch.Tensor:
    return gen.get_state().to(torch.float32)


def restore_rng(gen: torch.Generator, t: torch.Tensor) -> None:
    gen.set_state(t.to(torch.uint8))
