"""Miniature vision transformer with LoRA-adapted attention and regression heads."""

from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .targets import TASK_DIMS, tasks_for_variant

LORA_PROJECTIONS = ("q", "k", "v", "o")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TaskHeadSpec:
    name: str
    out_dim: int
    activation: str  # "tanh" | "sigmoid"


def heads_for_variant(variant) -> list[TaskHeadSpec]:
    return [
        TaskHeadSpec(t, TASK_DIMS[t], "tanh" if t == "angle" else "sigmoid")
        for t in tasks_for_variant(variant)
    ]


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    mlp_ratio: float = 4.0
    lora_rank: int = 8
    lora_alpha: float | None = None  # defaults to lora_rank, i.e. scale 1
    lora_targets: tuple[str, ...] = LORA_PROJECTIONS
    freeze_backbone: bool = True
    pos_embed: str = "learned"  # "learned" | "sincos" (fixed 2-D sine-cosine)
    variant: str = "I"
    heads: list[TaskHeadSpec] = field(default_factory=list)

    def __post_init__(self):
        if not self.heads:
            self.heads = heads_for_variant(self.variant)
        self.heads = [h if isinstance(h, TaskHeadSpec) else TaskHeadSpec(**h) for h in self.heads]
        self.lora_targets = tuple(self.lora_targets)
        if self.lora_alpha is None:
            self.lora_alpha = float(self.lora_rank)
        self.validate()

    def validate(self) -> None:
        if self.image_size <= 0 or self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ConfigError(f"patch_size {self.patch_size} must divide image_size {self.image_size}")
        if self.d_model <= 0 or self.n_heads <= 0 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} must be divisible by n_heads {self.n_heads}")
        if self.n_layers < 1 or self.lora_rank < 1 or self.mlp_ratio <= 0:
            raise ConfigError("n_layers, lora_rank and mlp_ratio must be positive")
        if self.pos_embed not in ("learned", "sincos"):
            raise ConfigError(f"unknown pos_embed {self.pos_embed!r}")
        if self.pos_embed == "sincos" and self.d_model % 4:
            raise ConfigError("sincos position embedding needs d_model divisible by 4")
        bad = set(self.lora_targets) - set(LORA_PROJECTIONS)
        if bad:
            raise ConfigError(f"unknown LoRA targets {sorted(bad)}")
        for h in self.heads:
            if h.activation not in ("tanh", "sigmoid"):
                raise ConfigError(f"head {h.name}: unknown activation {h.activation!r}")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def mlp_dim(self) -> int:
        return int(round(self.d_model * self.mlp_ratio))

    @property
    def lora_scale(self) -> float:
        return self.lora_alpha / self.lora_rank

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["heads"] = [TaskHeadSpec(**h) for h in d.get("heads", [])]
        return cls(**d)


class LoRALinear(nn.Module):
    """Dense layer ``y = x W^T + b + scale * (x A^T) B^T``.

    ``A`` is ``r x in``, ``B`` is ``out x r``; ``B`` starts at zero so the
    adapter is a no-op until trained.
    """

    def __init__(self, in_dim: int, out_dim: int, rank: int, scale: float, adapted: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_dim, in_dim))
        self.bias = nn.Parameter(torch.zeros(out_dim))
        self.scale = scale
        if adapted:
            self.lora_A = nn.Parameter(torch.empty(rank, in_dim))
            self.lora_B = nn.Parameter(torch.zeros(out_dim, rank))
        else:
            self.register_parameter("lora_A", None)
            self.register_parameter("lora_B", None)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.linear(x, self.weight, self.bias)
        if self.lora_A is not None:
            y = y + self.scale * F.linear(F.linear(x, self.lora_A), self.lora_B)
        return y

    def delta(self) -> torch.Tensor:
        if self.lora_A is None:
            return torch.zeros_like(self.weight)
        return self.scale * self.lora_B @ self.lora_A


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, r, s = cfg.d_model, cfg.lora_rank, cfg.lora_scale
        self.n_heads = cfg.n_heads
        self.head_dim = d // cfg.n_heads
        self.q = LoRALinear(d, d, r, s, "q" in cfg.lora_targets)
        self.k = LoRALinear(d, d, r, s, "k" in cfg.lora_targets)
        self.v = LoRALinear(d, d, r, s, "v" in cfg.lora_targets)
        self.o = LoRALinear(d, d, r, s, "o" in cfg.lora_targets)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, n, d = x.shape
        h, hd = self.n_heads, self.head_dim
        q = self.q(x).view(b, n, h, hd).transpose(1, 2)
        k = self.k(x).view(b, n, h, hd).transpose(1, 2)
        v = self.v(x).view(b, n, h, hd).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.o(out), attn


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.attn = Attention(cfg)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.fc1 = nn.Linear(cfg.d_model, cfg.mlp_dim)
        self.fc2 = nn.Linear(cfg.mlp_dim, cfg.d_model)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        a, attn = self.attn(self.norm1(x))
        x = x + a
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x, attn


def sincos_2d(grid: int, dim: int) -> torch.Tensor:
    """Fixed ``(1, grid*grid + 1, dim)`` embedding; the class-token row is zero."""
    q = dim // 4
    omega = 1.0 / (10000.0 ** (torch.arange(q, dtype=torch.float64) / q))
    ys, xs = torch.meshgrid(torch.arange(grid, dtype=torch.float64), torch.arange(grid, dtype=torch.float64), indexing="ij")
    ox = xs.reshape(-1, 1) * omega
    oy = ys.reshape(-1, 1) * omega
    emb = torch.cat([ox.sin(), ox.cos(), oy.sin(), oy.cos()], dim=1)
    return torch.cat([torch.zeros(1, dim, dtype=torch.float64), emb]).unsqueeze(0).float()


class ViTRegressor(nn.Module):
    """Patch embedding, pre-norm transformer blocks, class-token pooling, task heads.

    Inputs are float images ``(B, 3, H, W)`` scaled to ``[0, 1]``. The output
    is a dict of per-task predictions: angle in ``[-1, 1]`` (tanh), every other
    head in ``[0, 1]`` (logistic).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.d_model
        self.patch_embed = nn.Linear(3 * cfg.patch_size ** 2, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        if cfg.pos_embed == "learned":
            self.pos_embed = nn.Parameter(torch.zeros(1, cfg.n_patches + 1, d))
        else:
            self.register_buffer("pos_embed", sincos_2d(cfg.image_size // cfg.patch_size, d), persistent=False)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.norm = nn.LayerNorm(d)
        self.heads = nn.ModuleDict({h.name: nn.Linear(d, h.out_dim) for h in cfg.heads})
        self.activations = {h.name: h.activation for h in cfg.heads}

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        b, c, hgt, wid = images.shape
        p = self.cfg.patch_size
        if c != 3 or hgt != self.cfg.image_size or wid != self.cfg.image_size:
            raise ValueError(
                f"expected images of shape (B, 3, {self.cfg.image_size}, {self.cfg.image_size}), got {tuple(images.shape)}"
            )
        x = images.reshape(b, c, hgt // p, p, wid // p, p)
        # (b, gh, gw, c, p, p) -> one row per patch, row-major over the grid
        return x.permute(0, 2, 4, 1, 3, 5).reshape(b, (hgt // p) * (wid // p), c * p * p)

    def features(self, images: torch.Tensor, return_attention: bool = False):
        x = self.patch_embed(self.patchify(images))
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1) + self.pos_embed
        maps = []
        for blk in self.blocks:
            x, attn = blk(x)
            if return_attention:
                maps.append(attn)
        feat = self.norm(x)[:, 0]
        return (feat, maps) if return_attention else feat

    def forward(self, images: torch.Tensor, return_attention: bool = False):
        out = self.features(images, return_attention)
        feat, maps = out if return_attention else (out, None)
        preds = {}
        for name, head in self.heads.items():
            z = head(feat)
            preds[name] = torch.tanh(z) if self.activations[name] == "tanh" else torch.sigmoid(z)
        return (preds, maps) if return_attention else preds

    # parameter bookkeeping -------------------------------------------------

    def lora_parameters(self) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if ".lora_" in n}

    def head_parameters(self) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if n.startswith("heads.")}

    def backbone_parameters(self) -> dict[str, nn.Parameter]:
        skip = set(self.lora_parameters()) | set(self.head_parameters())
        return {n: p for n, p in self.named_parameters() if n not in skip}

    def apply_freeze(self) -> None:
        frozen = self.cfg.freeze_backbone
        for p in self.backbone_parameters().values():
            p.requires_grad_(not frozen)
        for p in list(self.lora_parameters().values()) + list(self.head_parameters().values()):
            p.requires_grad_(True)

    def trainable_parameters(self) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if p.requires_grad}


def count_trainable(model: ViTRegressor) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def expected_trainable_count(cfg: ModelConfig) -> int:
    """Closed-form trainable count implied by ``cfg``."""
    d, r = cfg.d_model, cfg.lora_rank
    lora = cfg.n_layers * len(cfg.lora_targets) * 2 * d * r
    heads = sum((d + 1) * h.out_dim for h in cfg.heads)
    if cfg.freeze_backbone:
        return lora + heads
    pe = 3 * cfg.patch_size ** 2 * d + d
    tokens = d + ((cfg.n_patches + 1) * d if cfg.pos_embed == "learned" else 0)
    per_layer = 4 * (d * d + d) + 2 * 2 * d + (d * cfg.mlp_dim + cfg.mlp_dim) + (cfg.mlp_dim * d + d)
    return pe + tokens + cfg.n_layers * per_layer + 2 * d + lora + heads


def init_params(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> ViTRegressor:
    """Build a model with deterministic initial weights.

    Dense weights, class token and position embeddings: normal(0, 0.02)
    truncated at two standard deviations. LoRA ``A``: normal(0, 0.02);
    LoRA ``B``: zero. Biases zero, LayerNorm affine at identity.
    """
    model = ViTRegressor(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("lora_A"):
                p.normal_(0.0, 0.02, generator=gen)
            elif name.endswith("lora_B") or name.endswith("bias"):
                p.zero_()
            elif ".norm" in name or name.startswith("norm"):
                p.fill_(1.0)
            else:
                nn.init.trunc_normal_(p, 0.0, 0.02, -0.04, 0.04, generator=gen)
    model.to(dtype)
    model.apply_freeze()
    return model


def merge_lora(model: ViTRegressor) -> ViTRegressor:
    """Return a copy whose dense weights absorb ``scale * B @ A`` and carry no adapters."""
    merged = copy.deepcopy(model)
    with torch.no_grad():
        for mod in merged.modules():
            if isinstance(mod, LoRALinear) and mod.lora_A is not None:
                mod.weight.add_(mod.delta())
                mod.lora_A = None
                mod.lora_B = None
    return merged


def strip_lora(model: ViTRegressor) -> ViTRegressor:
    """Copy of the backbone with adapters removed (no merge)."""
    bare = copy.deepcopy(model)
    for mod in bare.modules():
        if isinstance(mod, LoRALinear):
            mod.lora_A = None
            mod.lora_B = None
    return bare


@torch.no_grad()
def extract_attention_maps(model: ViTRegressor, probe: torch.Tensor) -> torch.Tensor:
    """Patch-to-patch attention averaged over the probe batch.

    Returns ``(n_layers, n_heads, P, P)``. The class-token query and key are
    dropped and each row is renormalised over patch keys, so rows sum to 1.
    """
    if probe.shape[0] == 0:
        raise ValueError("probe batch is empty")
    was_training = model.training
    model.eval()
    _, maps = model(probe, return_attention=True)
    model.train(was_training)
    out = []
    for attn in maps:
        sub = attn[:, :, 1:, 1:]
        sub = sub / sub.sum(dim=-1, keepdim=True)
        out.append(sub.mean(dim=0))
    return torch.stack(out)


# checkpoint container --------------------------------------------------------
#
# Layout (all integers little-endian):
#   line 1: b"LINEVIT-CKPT 1\n"
#   line 2: UTF-8 JSON header terminated by b"\n" with keys
#           "config"  - ModelConfig as a dict
#           "tensors" - list of {"name", "shape", "dtype", "offset", "nbytes"}
#           "extra"   - free-form JSON (trainer state, metadata)
#   rest:  raw C-order tensor bytes; offsets are relative to the end of line 2.

CKPT_MAGIC = b"LINEVIT-CKPT 1\n"
_DTYPES = {"float32": np.float32, "float64": np.float64, "int64": np.int64}


def save_tensors(path: str | os.PathLike, config: dict, tensors: dict[str, torch.Tensor], extra: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().contiguous().numpy()
        dt = arr.dtype.name
        if dt not in _DTYPES:
            raise TypeError(f"unsupported dtype {dt} for {name}")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config, "tensors": entries, "extra": extra or {}}, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(header.encode("utf-8") + b"\n")
        for raw in blobs:
            fh.write(raw)


def load_tensors(path: str | os.PathLike) -> tuple[dict, dict[str, torch.Tensor], dict]:
    with open(path, "rb") as fh:
        if fh.readline() != CKPT_MAGIC:
            raise ValueError(f"{path} is not a linevit checkpoint")
        header = json.loads(fh.readline().decode("utf-8"))
        body = fh.read()
    tensors = {}
    for e in header["tensors"]:
        dt = np.dtype(_DTYPES[e["dtype"]]).newbyteorder("<")
        arr = np.frombuffer(body, dtype=dt, count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True).reshape(e["shape"]))
    return header["config"], tensors, header["extra"]


def save_checkpoint(path, model: ViTRegressor, extra: dict | None = None, other: dict[str, torch.Tensor] | None = None) -> None:
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    for k, v in (other or {}).items():
        tensors[k] = v
    save_tensors(path, model.cfg.to_dict(), tensors, extra)


def load_checkpoint(path) -> tuple[ViTRegressor, dict, dict[str, torch.Tensor]]:
    config, tensors, extra = load_tensors(path)
    cfg = ModelConfig.from_dict(config)
    model = ViTRegressor(cfg)
    state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    dtype = next(iter(state.values())).dtype
    model.to(dtype)
    model.load_state_dict(state)
    model.apply_freeze()
    other = {k: v for k, v in tensors.items() if not k.startswith("model/")}
    return model, extra, other


def images_to_tensor(images: np.ndarray | Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    """uint8 ``(B, H, W, 3)`` -> float ``(B, 3, H, W)`` in ``[0, 1]``."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype) / 255.0
