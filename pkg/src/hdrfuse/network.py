"""Bracket-fusion network and checkpoint container.

Three 6-channel exposure planes go through a shared shallow convolutional
extractor; the non-reference features are re-synthesized by patch-wise
cross-attention against the reference frame; the concatenated features are
fused by a stack of multi-scale residual window-attention blocks and
decoded to a 3-channel radiance image in [0, 1].
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, asdict
from functools import lru_cache
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    embed_dim: int = 60
    num_blocks: int = 3
    depth_per_block: int = 2
    num_heads: int = 6
    window_sizes: tuple[int, ...] = (2, 4, 8)
    attn_patch_size: int = 8
    mlp_ratio: float = 2.0
    global_skip: bool = True
    cross_attn_heads: Optional[int] = None  # None -> num_heads; 1 = single-head

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        heads = self.cross_attn_heads or self.num_heads
        if self.embed_dim % heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by cross_attn_heads {heads}")
        if any(w <= 0 for w in self.window_sizes) or self.attn_patch_size <= 0:
            raise ValueError("window sizes and attn_patch_size must be positive")

    @property
    def divisor(self) -> int:
        """Spatial dims fed to the network must be multiples of this."""
        d = self.attn_patch_size
        for w in self.window_sizes:
            d = math.lcm(d, w)
        return d

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window_sizes"] = list(self.window_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["window_sizes"] = tuple(d.get("window_sizes", (2, 4, 8)))
        return cls(**d)


def window_partition(x: torch.Tensor, w: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * nWindows, w*w, C)."""
    b, h, width, c = x.shape
    x = x.view(b, h // w, w, width // w, w, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, w * w, c)


def window_reverse(windows: torch.Tensor, w: int, h: int, width: int) -> torch.Tensor:
    """Inverse of :func:`window_partition`."""
    b = windows.shape[0] // (h * width // w // w)
    x = windows.view(b, h // w, width // w, w, w, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, width, -1)


def _relative_position_index(w: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(
        torch.arange(w), torch.arange(w), indexing="ij"))
    flat = torch.flatten(coords, 1)
    rel = flat[:, :, None] - flat[:, None, :]
    rel = rel.permute(1, 2, 0).contiguous()
    rel[:, :, 0] += w - 1
    rel[:, :, 1] += w - 1
    rel[:, :, 0] *= 2 * w - 1
    return rel.sum(-1)


@lru_cache(maxsize=64)
def _shift_attn_mask(h: int, w_dim: int, window: int, shift: int) -> torch.Tensor:
    """Group mask for shifted-window attention: -100 between wrapped regions."""
    img_mask = torch.zeros((1, h, w_dim, 1))
    cnt = 0
    for hs in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
        for ws in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            img_mask[:, hs, ws, :] = cnt
            cnt += 1
    mask_windows = window_partition(img_mask, window).squeeze(-1)
    attn_mask = mask_windows.unsqueeze(1) - mask_windows.unsqueeze(2)
    return attn_mask.masked_fill(attn_mask != 0, -100.0)


class WindowAttention(nn.Module):
    """Multi-head self-attention within non-overlapping windows, with a
    learnable relative-position bias per head."""

    def __init__(self, dim: int, window: int, num_heads: int):
        super().__init__()
        self.dim = dim
        self.window = window
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)
        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * window - 1) ** 2, num_heads))
        self.register_buffer("relative_position_index",
                             _relative_position_index(window), persistent=False)
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.num_heads, c // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_position_bias_table[
            self.relative_position_index.view(-1)].view(n, n, -1)
        attn = attn + bias.permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.num_heads, n, n) \
                + mask.to(attn.dtype).to(attn.device).unsqueeze(1).unsqueeze(0)
            attn = attn.view(-1, self.num_heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class SwinLayer(nn.Module):
    """One window-attention transformer layer on a BCHW feature map.

    ``shift`` rolls the window grid by half a window so consecutive layers
    exchange information across window borders; wrapped regions are kept
    from attending to each other by an additive group mask.
    """

    def __init__(self, dim: int, window: int, num_heads: int,
                 mlp_ratio: float = 2.0, shift: bool = False):
        super().__init__()
        self.window = window
        self.shift = window // 2 if shift and window > 1 else 0
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        if h % self.window or w % self.window:
            raise ValueError(
                f"spatial dims {h}x{w} not divisible by window {self.window}")
        tokens = x.permute(0, 2, 3, 1)

        shortcut = tokens
        t = self.norm1(tokens)
        if self.shift:
            t = torch.roll(t, shifts=(-self.shift, -self.shift), dims=(1, 2))
            mask = _shift_attn_mask(h, w, self.window, self.shift)
        else:
            mask = None
        windows = window_partition(t, self.window)
        windows = self.attn(windows, mask)
        t = window_reverse(windows, self.window, h, w)
        if self.shift:
            t = torch.roll(t, shifts=(self.shift, self.shift), dims=(1, 2))
        tokens = shortcut + t
        tokens = tokens + self.mlp(self.norm2(tokens))
        return tokens.permute(0, 3, 1, 2)


class MultiScaleSwinBlock(nn.Module):
    """Residual fusion block with parallel window scales.

    Each internal layer runs one transformer layer per window size on the
    same input, merges the branches with a 1x1 convolution, refines with a
    3x3 convolution, and adds the layer input back.  Consecutive layers
    alternate between plain and shifted window grids.
    """

    def __init__(self, dim: int, window_sizes: Sequence[int], num_heads: int,
                 depth: int, mlp_ratio: float = 2.0):
        super().__init__()
        self.layers = nn.ModuleList()
        self.merges = nn.ModuleList()
        self.refines = nn.ModuleList()
        for n in range(depth):
            self.layers.append(nn.ModuleList([
                SwinLayer(dim, w, num_heads, mlp_ratio, shift=bool(n % 2))
                for w in window_sizes
            ]))
            self.merges.append(nn.Conv2d(dim * len(window_sizes), dim, 1))
            self.refines.append(nn.Conv2d(dim, dim, 3, padding=1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for branches, merge, refine in zip(self.layers, self.merges, self.refines):
            fused = merge(torch.cat([layer(x) for layer in branches], dim=1))
            x = refine(fused) + x
        return x


class FeatureExtractor(nn.Module):
    """Three stacked 3x3 convolutions with nonlinearities in between."""

    def __init__(self, in_channels: int, dim: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, dim, 3, padding=1),
            nn.LeakyReLU(0.1, inplace=True),
            nn.Conv2d(dim, dim, 3, padding=1),
            nn.LeakyReLU(0.1, inplace=True),
            nn.Conv2d(dim, dim, 3, padding=1),
        )

    def forward(self, x):
        return self.body(x)


class CrossFramePatchAttention(nn.Module):
    """Re-synthesize a non-reference feature map from the reference one.

    Both maps are split into non-overlapping patches; inside each patch the
    reference tokens form the queries and the other frame's tokens the keys
    and values.  Attention output is returned directly (no output
    projection), so a one-token patch reproduces its value vector exactly.
    """

    def __init__(self, dim: int, patch_size: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by heads {num_heads}")
        self.patch_size = patch_size
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.w_q = nn.Linear(dim, dim, bias=True)
        self.w_k = nn.Linear(dim, dim, bias=True)
        self.w_v = nn.Linear(dim, dim, bias=True)
        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * patch_size - 1) ** 2, num_heads))
        self.register_buffer("relative_position_index",
                             _relative_position_index(patch_size), persistent=False)
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)

    def attention_weights(self, f_ref: torch.Tensor, f_src: torch.Tensor) -> torch.Tensor:
        """Softmax attention map, shape (B * patches, heads, n, n)."""
        q, k, _ = self._project(f_ref, f_src)
        return self._logits(q, k).softmax(dim=-1)

    def _project(self, f_ref, f_src):
        if f_ref.shape != f_src.shape:
            raise ValueError(
                f"feature shapes differ: {tuple(f_ref.shape)} vs {tuple(f_src.shape)}")
        b, c, h, w = f_ref.shape
        p = self.patch_size
        if h % p or w % p:
            raise ValueError(f"spatial dims {h}x{w} not divisible by patch {p}")
        ref = window_partition(f_ref.permute(0, 2, 3, 1), p)
        src = window_partition(f_src.permute(0, 2, 3, 1), p)
        n = p * p
        hd = c // self.num_heads

        def split(x):
            return x.view(-1, n, self.num_heads, hd).transpose(1, 2)

        return split(self.w_q(ref)), split(self.w_k(src)), split(self.w_v(src))

    def _logits(self, q, k):
        n = q.shape[2]
        logits = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_position_bias_table[
            self.relative_position_index[:n, :n].reshape(-1)].view(n, n, -1)
        return logits + bias.permute(2, 0, 1).unsqueeze(0)

    def forward(self, f_ref: torch.Tensor, f_src: torch.Tensor) -> torch.Tensor:
        b, c, h, w = f_ref.shape
        q, k, v = self._project(f_ref, f_src)
        attn = self._logits(q, k).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(-1, self.patch_size ** 2, c)
        return window_reverse(out, self.patch_size, h, w).permute(0, 3, 1, 2)


class BracketFusionNet(nn.Module):
    """Full fusion model: three 6-channel planes in, radiance in [0, 1] out."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        dim = config.embed_dim
        self.extract = FeatureExtractor(6, dim)
        self.cross_attn = CrossFramePatchAttention(
            dim, config.attn_patch_size,
            config.cross_attn_heads or config.num_heads)
        trunk_dim = 3 * dim
        self.blocks = nn.ModuleList([
            MultiScaleSwinBlock(trunk_dim, config.window_sizes,
                                config.num_heads, config.depth_per_block,
                                config.mlp_ratio)
            for _ in range(config.num_blocks)
        ])
        self.conv_merge = nn.Conv2d(trunk_dim, dim, 3, padding=1)
        self.conv_out = nn.Conv2d(dim, 3, 3, padding=1)
        self.apply(self._init_linear)
        # Bias the head toward dark output: linear radiance is mostly far
        # below mid-grey, and a 0.5 start point re-exposes above the LDR
        # range at long exposure times, which shoves the whole image into
        # deep sigmoid saturation before training can find the scene.
        nn.init.constant_(self.conv_out.bias, -3.0)

    @staticmethod
    def _init_linear(m):
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)

    def extract_features(self, plane: torch.Tensor) -> torch.Tensor:
        if plane.dim() != 4 or plane.shape[1] != 6:
            raise ValueError(
                f"expected B x 6 x H x W input, got {tuple(plane.shape)}")
        return self.extract(plane)

    def _check_dims(self, x: torch.Tensor) -> None:
        d = self.config.divisor
        h, w = x.shape[-2:]
        if h % d or w % d:
            raise ValueError(
                f"spatial dims {h}x{w} must be divisible by {d} "
                f"(lcm of window sizes and attention patch)")

    def forward(self, i1: torch.Tensor, i2: torch.Tensor,
                i3: torch.Tensor) -> torch.Tensor:
        if i1.shape != i2.shape or i2.shape != i3.shape:
            raise ValueError("all three input planes must share one shape")
        self._check_dims(i2)
        f1 = self.extract_features(i1)
        f2 = self.extract_features(i2)
        f3 = self.extract_features(i3)
        aligned1 = self.cross_attn(f2, f1)
        aligned3 = self.cross_attn(f2, f3)
        x = torch.cat([aligned1, f2, aligned3], dim=1)
        for block in self.blocks:
            x = block(x)
        x = self.conv_merge(x)
        if self.config.global_skip:
            x = x + f2
        return torch.sigmoid(self.conv_out(x))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


@dataclass
class Checkpoint:
    """Serialized parameters plus everything needed to rebuild and resume."""

    state_dict: dict
    network: NetworkConfig
    config: dict = field(default_factory=dict)  # gamma/train/etc. snapshot
    stage: str = "pretrained"
    step: int = 0
    seed: int = 0
    format_version: int = CHECKPOINT_FORMAT_VERSION
    ckpt_id: str = ""
    parent: Optional[str] = None

    def build_model(self) -> BracketFusionNet:
        model = BracketFusionNet(self.network)
        model.load_state_dict(self.state_dict)
        return model


STAGES = ("pretrained", "finetuned", "iterated")


def _checkpoint_id(state_dict: dict, stage: str, step: int) -> str:
    h = hashlib.sha256()
    h.update(f"{stage}:{step}".encode())
    for name in sorted(state_dict):
        h.update(name.encode())
        h.update(state_dict[name].detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(path, model: BracketFusionNet, stage: str, step: int,
                    seed: int, config: Optional[dict] = None,
                    parent: Optional[str] = None) -> str:
    """Write a checkpoint file; returns its content-derived id."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}, expected one of {STAGES}")
    state = {k: v.detach().cpu() for k, v in model.state_dict().items()}
    ckpt_id = _checkpoint_id(state, stage, step)
    torch.save({
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "stage": stage,
        "step": step,
        "seed": seed,
        "network": model.config.to_dict(),
        "config": config or {},
        "state_dict": state,
        "ckpt_id": ckpt_id,
        "parent": parent,
    }, path)
    return ckpt_id


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ValueError(f"cannot load checkpoint {path}: {exc}") from exc
    for key in ("format_version", "stage", "state_dict", "network"):
        if key not in raw:
            raise ValueError(f"checkpoint {path} is missing field {key!r}")
    if raw["format_version"] > CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"checkpoint format {raw['format_version']} is newer than "
            f"supported {CHECKPOINT_FORMAT_VERSION}")
    return Checkpoint(
        state_dict=raw["state_dict"],
        network=NetworkConfig.from_dict(raw["network"]),
        config=raw.get("config", {}),
        stage=raw["stage"],
        step=raw.get("step", 0),
        seed=raw.get("seed", 0),
        format_version=raw["format_version"],
        ckpt_id=raw.get("ckpt_id", ""),
        parent=raw.get("parent"),
    )
