"""Vim-style VSS classifier and its SSM-free Gated-CNN counterpart.

Both families share one block class. The VSS block runs a bidirectional
selective scan between the token-axis convolution and the gate; the Gated-CNN
block skips it. Everything else (patch embedding, class token at index 0,
norm + linear head) is identical, so the two differ only by the SSM stage.

Images are channels-last ``(batch, H, W, C)``; uint8 inputs are rescaled to
[0, 1] on entry.
"""

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError, NumericError
from .ssm_core import selective_scan_torch

FAMILIES = ("vss", "gated_cnn")


@dataclass
class ModelConfig:
    family: str = "vss"
    depth: int = 2
    dim: int = 64
    inner_dim: Optional[int] = None  # expanded dim E, defaults to 2 * dim
    d_state: int = 8
    patch_size: int = 4
    num_classes: int = 10
    image_size: int = 32
    channels: int = 3
    conv_width: int = 4
    dt_rank: Optional[int] = None  # defaults to ceil(dim / 16)
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.inner_dim is None:
            self.inner_dim = 2 * self.dim
        if self.dt_rank is None:
            self.dt_rank = math.ceil(self.dim / 16)
        for name in ("dim", "inner_dim", "d_state", "patch_size", "num_classes",
                     "image_size", "channels", "conv_width", "dt_rank"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self):
        return asdict(self)


def patchify(images, P):
    """Split ``(n, H, W, C)`` (or a single ``(H, W, C)``) into ``(n, N, P*P*C)`` patches.

    Patches are ordered row-major over the grid; each is flattened in
    (row, column, channel) order. Works on numpy arrays and torch tensors.
    """
    single = images.ndim == 3
    x = images[None] if single else images
    n, H, W, C = x.shape
    if H % P or W % P:
        raise DimensionError(f"image {H}x{W} not divisible by patch size {P}")
    x = x.reshape(n, H // P, P, W // P, P, C)
    x = x.permute(0, 1, 3, 2, 4, 5) if torch.is_tensor(x) else x.transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(n, (H // P) * (W // P), P * P * C)
    return x[0] if single else x


class PatchEmbedding(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.proj = nn.Linear(cfg.patch_size ** 2 * cfg.channels, cfg.dim, bias=False)
        self.cls_token = nn.Parameter(torch.zeros(cfg.dim))
        self.pos_embed = nn.Parameter(torch.zeros(cfg.num_patches + 1, cfg.dim))

    def forward(self, patches):
        return embed(patches, self)


def embed(patches, pe: PatchEmbedding):
    """``T0 = [t_cls; patches @ M] + E_pos`` with the class token at row 0."""
    if patches.shape[-1] != pe.proj.in_features:
        raise DimensionError(f"patch length {patches.shape[-1]} != {pe.proj.in_features}")
    if patches.shape[-2] + 1 != pe.pos_embed.shape[0]:
        raise DimensionError(f"{patches.shape[-2]} patches but position table has {pe.pos_embed.shape[0]} rows")
    tokens = patches @ pe.proj.weight.t()
    cls = pe.cls_token.expand(*tokens.shape[:-2], 1, -1)
    return torch.cat([cls, tokens], dim=-2) + pe.pos_embed


class SelectiveSsm(nn.Module):
    """One scan direction: per-token B, C, delta from the input; diagonal A per channel."""

    def __init__(self, inner_dim, d_state, dt_rank):
        super().__init__()
        self.d_state = d_state
        self.dt_rank = dt_rank
        self.x_proj = nn.Linear(inner_dim, dt_rank + 2 * d_state, bias=False)
        self.dt_proj = nn.Linear(dt_rank, inner_dim)
        self.A_log = nn.Parameter(torch.zeros(inner_dim, d_state))

    def forward(self, x):
        dt_in, B, C = self.x_proj(x).split([self.dt_rank, self.d_state, self.d_state], dim=-1)
        delta = F.softplus(self.dt_proj(dt_in))
        A = -torch.exp(self.A_log)
        return selective_scan_torch(x.contiguous(), delta.contiguous(), A.contiguous(),
                                    B.contiguous(), C.contiguous())


class MixerBlock(nn.Module):
    """norm -> (x, z) -> token conv + SiLU -> [bidirectional SSM] -> gate -> project -> residual."""

    def __init__(self, cfg: ModelConfig, use_ssm: bool):
        super().__init__()
        E, k = cfg.inner_dim, cfg.conv_width
        self.norm = nn.LayerNorm(cfg.dim)
        self.in_proj = nn.Linear(cfg.dim, 2 * E)
        self.conv_fwd = nn.Conv1d(E, E, k, groups=E, padding=k - 1)
        self.conv_bwd = nn.Conv1d(E, E, k, groups=E, padding=k - 1)
        if use_ssm:
            self.ssm_fwd = SelectiveSsm(E, cfg.d_state, cfg.dt_rank)
            self.ssm_bwd = SelectiveSsm(E, cfg.d_state, cfg.dt_rank)
        else:
            self.ssm_fwd = self.ssm_bwd = None
        self.out_proj = nn.Linear(E, cfg.dim)
        # test hook: replace the scan by the identity
        self.ablate_ssm = False

    def _direction(self, x, conv, ssm):
        M = x.shape[1]
        h = F.silu(conv(x.transpose(1, 2))[..., :M].transpose(1, 2))
        if ssm is not None and not self.ablate_ssm:
            h = ssm(h)
        return h

    def branch(self, T):
        x, z = self.in_proj(self.norm(T)).chunk(2, dim=-1)
        y_fwd = self._direction(x, self.conv_fwd, self.ssm_fwd)
        y_bwd = self._direction(x.flip(1), self.conv_bwd, self.ssm_bwd).flip(1)
        return self.out_proj((y_fwd + y_bwd) * F.silu(z))

    def forward(self, T):
        return T + self.branch(T)


def vss_block_forward(T, block: MixerBlock):
    if block.ssm_fwd is None:
        raise ConfigError("block has no SSM stage; use gated_cnn_block_forward")
    return block(T)


def gated_cnn_block_forward(T, block: MixerBlock):
    if block.ssm_fwd is not None:
        raise ConfigError("block carries SSM parameters; use vss_block_forward")
    return block(T)


class ClassifierHead(nn.Module):
    def __init__(self, dim, num_classes):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc = nn.Linear(dim, num_classes)

    def forward(self, T_L):
        return classify(T_L, self)


def classify(T_L, head: ClassifierHead):
    """Logits from the normalized class token (row 0); other rows are ignored."""
    return head.fc(head.norm(T_L[..., 0, :]))


class VisionSsmClassifier(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.patch_embed = PatchEmbedding(cfg)
        use_ssm = cfg.family == "vss"
        self.blocks = nn.ModuleList(MixerBlock(cfg, use_ssm) for _ in range(cfg.depth))
        self.head = ClassifierHead(cfg.dim, cfg.num_classes)

    def tokens(self, images):
        x = as_image_tensor(images, self.head.fc.weight.dtype)
        cfg = self.config
        if tuple(x.shape[1:]) != (cfg.image_size, cfg.image_size, cfg.channels):
            raise DimensionError(
                f"expected images of shape (n, {cfg.image_size}, {cfg.image_size}, {cfg.channels}), got {tuple(x.shape)}")
        T = self.patch_embed(patchify(x, cfg.patch_size))
        for i, block in enumerate(self.blocks):
            T = block(T)
            if not torch.all(torch.isfinite(T)):
                raise NumericError(f"non-finite activations after block {i}", index=i)
        return T

    def forward(self, images):
        return self.head(self.tokens(images))

    def set_ssm_ablation(self, flag=True):
        for block in self.blocks:
            block.ablate_ssm = flag


def as_image_tensor(images, dtype=torch.float32):
    if torch.is_tensor(images):
        x = images
    else:
        x = torch.from_numpy(np.ascontiguousarray(images))
    if x.dtype == torch.uint8:
        return x.to(dtype) / 255.0
    return x.to(dtype)


def model_forward(images, model: VisionSsmClassifier):
    return model(images)


def _init_weights(model: VisionSsmClassifier, cfg: ModelConfig):
    for module in model.modules():
        if isinstance(module, (nn.Linear, nn.Conv1d)):
            fan_in = module.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            nn.init.uniform_(module.weight, -bound, bound)
            if module.bias is not None:
                nn.init.uniform_(module.bias, -bound, bound)
        elif isinstance(module, nn.LayerNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)
        elif isinstance(module, SelectiveSsm):
            # A = -exp(A_log) log-spaced over [-1, -N]; step sizes log-uniform in [1e-3, 1e-1]
            E, N = module.A_log.shape
            with torch.no_grad():
                module.A_log.copy_(torch.linspace(0.0, math.log(N), N).expand(E, N))
                dt = torch.exp(torch.rand(E) * (math.log(0.1) - math.log(1e-3)) + math.log(1e-3))
                module.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))  # inverse softplus
    nn.init.normal_(model.patch_embed.cls_token, std=0.02)
    nn.init.normal_(model.patch_embed.pos_embed, std=0.02)


def build_model(cfg: ModelConfig, dtype=torch.float32) -> VisionSsmClassifier:
    """Deterministic construction from ``cfg.seed``; global RNG state is left untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = VisionSsmClassifier(cfg)
        _init_weights(model, cfg)
    return model.to(dtype)


def count_parameters(module: nn.Module):
    return sum(p.numel() for p in module.parameters())


def predict(model, images, batch_size=256):
    """Top-1 labels for ``images``; ``model`` is a module or any callable returning logits."""
    if isinstance(model, nn.Module):
        model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            logits = model(images[start:start + batch_size])
            logits = logits if torch.is_tensor(logits) else torch.as_tensor(np.asarray(logits))
            out.append(logits.argmax(dim=-1).cpu().numpy())
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
