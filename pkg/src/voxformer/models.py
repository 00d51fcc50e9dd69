"""The three classifier architectures and their supporting machinery.

* VViT: flat 3D-patch vision transformer (50-voxel cubic patches, linearly
  projected, class token + learnable positional table, pre-norm encoder).
* CVVT: convolutional voxel vision transformer -- a conv stack downsamples
  the volume to an 80-channel 10x10x10 feature grid whose channels become
  the 80 tokens, shrinking the patch-embedding parameter count.
* ConvNet3D4: shallow four-block 3D CNN, channels 1->128->192->256->512,
  with batch- or instance-norm variants.

Also here: pure shape inference (validates full-size geometry without
full-size compute), grouped parameter counting, and checkpoint I/O.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .tensor import Tensor, ShapeError, concat, leaky_relu, _node

FULL_EXTENTS = (169, 208, 179)


class ShapeUnderflowError(ShapeError):
    """A layer's output extent fell below 1; carries the offending layer name."""

    def __init__(self, layer: str, message: str):
        super().__init__(f"{layer}: {message}")
        self.layer = layer


# ---------------------------------------------------------------------------
# configs

@dataclass(frozen=True)
class ViTSizeConfig:
    embed_dim: int
    num_heads: int
    depth: int = 12
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ShapeError(f"embed_dim {self.embed_dim} not divisible by "
                             f"num_heads {self.num_heads}")


VIT_SIZES = {
    "tiny": ViTSizeConfig(192, 3),
    "small": ViTSizeConfig(384, 6),
    "base": ViTSizeConfig(768, 12),
}


@dataclass(frozen=True)
class VViTConfig:
    size: ViTSizeConfig
    patch_edge: int = 50
    extents: tuple[int, int, int] = FULL_EXTENTS
    num_classes: int = 2

    @property
    def padded_extents(self) -> tuple[int, int, int]:
        e = self.patch_edge
        return tuple(-(-x // e) * e for x in self.extents)

    @property
    def patch_counts(self) -> tuple[int, int, int]:
        return tuple(p // self.patch_edge for p in self.padded_extents)

    @property
    def num_patches(self) -> int:
        return int(np.prod(self.patch_counts))

    @property
    def patch_dim(self) -> int:
        return self.patch_edge ** 3


# One conv stage of the CVVT embedding: (in_channels, out_channels, stride).
StageSpec = tuple[int, int, int]

CVVT_CHANNEL_LADDER = (32, 64, 96, 128)
CVVT_TOKENS = 80
CVVT_GRID = (10, 10, 10)


def _conv_out(extent: int, kernel: int = 3, stride: int = 1, padding: int = 1) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def default_embed_stack(extents: tuple[int, int, int]) -> tuple[StageSpec, ...]:
    """Downsampling stack for the CVVT embedding at the given input extents.

    Stride-2 stages (k3, p1) walk the channel ladder for as long as every
    spatial extent stays at or above the 10-voxel feature grid; a final
    stride-1 stage projects to the 80 token channels.  At the full scan size
    this yields 1->32->64->96->128 downsampling plus 128->80.
    """
    stages: list[StageSpec] = []
    e = tuple(extents)
    ch = 1
    for c in CVVT_CHANNEL_LADDER:
        nxt = tuple(_conv_out(x, stride=2) for x in e)
        if min(nxt) < CVVT_GRID[0]:
            break
        stages.append((ch, c, 2))
        ch, e = c, nxt
    stages.append((ch, CVVT_TOKENS, 1))
    return tuple(stages)


@dataclass(frozen=True)
class CVVTConfig:
    size: ViTSizeConfig
    extents: tuple[int, int, int] = FULL_EXTENTS
    embed_stack: tuple[StageSpec, ...] = None  # derived from extents when None
    feature_grid: tuple[int, int, int] = CVVT_GRID
    num_classes: int = 2

    def __post_init__(self):
        if self.embed_stack is None:
            object.__setattr__(self, "embed_stack", default_embed_stack(self.extents))
        if self.embed_stack[-1][1] != CVVT_TOKENS:
            raise ShapeError(f"embed stack must end in {CVVT_TOKENS} channels, "
                             f"got {self.embed_stack}")

    @property
    def num_patches(self) -> int:
        return CVVT_TOKENS

    @property
    def token_dim(self) -> int:
        return int(np.prod(self.feature_grid))


@dataclass(frozen=True)
class ConvNet3D4Config:
    channels: tuple[int, ...] = (1, 128, 192, 256, 512)
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    conv_bias: bool = False
    pool_kernel: int = 3
    pool_stride: int = 3
    slope: float = 0.2
    dropout: float = 0.4
    norm: str = "instance3d"            # or "batch3d"
    embed_dim: int = 512
    num_classes: int = 2
    extents: tuple[int, int, int] = FULL_EXTENTS

    def __post_init__(self):
        if self.norm not in ("instance3d", "batch3d"):
            raise ValueError(f"norm must be instance3d or batch3d, got {self.norm!r}")
        if len(self.channels) != 5:
            raise ValueError(f"four blocks need five channel counts, got {self.channels}")


ModelConfig = VViTConfig | CVVTConfig | ConvNet3D4Config


# ---------------------------------------------------------------------------
# shape inference (pure arithmetic, no tensor execution)

ShapeTrace = list[tuple[str, tuple[int, ...]]]


def shape_infer(cfg: ModelConfig, extents: tuple[int, int, int] | None = None) -> ShapeTrace:
    """Symbolic forward over shapes (batch dim fixed at 1); raises
    ShapeUnderflowError naming the first layer whose output extent underflows."""
    e = tuple(extents if extents is not None else cfg.extents)
    if len(e) != 3 or any(x < 1 for x in e):
        raise ShapeError(f"extents must be three positive integers, got {e}")
    trace: ShapeTrace = [("input", (1, 1) + e)]

    if isinstance(cfg, VViTConfig):
        edge = cfg.patch_edge
        padded = tuple(-(-x // edge) * edge for x in e)
        counts = tuple(p // edge for p in padded)
        n_patches = int(np.prod(counts))
        trace.append(("pad", (1, 1) + padded))
        trace.append(("patchify", (1, n_patches, cfg.patch_dim)))
        trace.append(("patch_embed", (1, n_patches, cfg.size.embed_dim)))
        trace.append(("tokens", (1, n_patches + 1, cfg.size.embed_dim)))
        trace.append(("encoder", (1, n_patches + 1, cfg.size.embed_dim)))
        trace.append(("head", (1, cfg.num_classes)))
        return trace

    if isinstance(cfg, CVVTConfig):
        cur = e
        for i, (cin, cout, stride) in enumerate(cfg.embed_stack):
            nxt = tuple(_conv_out(x, stride=stride) for x in cur)
            if min(nxt) < 1:
                raise ShapeUnderflowError(f"embed.stage{i}",
                                          f"conv output underflows: {cur} -> {nxt}")
            trace.append((f"embed.stage{i}", (1, cout) + nxt))
            cur = nxt
        if min(cur) < cfg.feature_grid[0]:
            raise ShapeUnderflowError(
                "embed.adaptive_pool",
                f"feature extents {cur} below target grid {cfg.feature_grid}")
        trace.append(("embed.adaptive_pool", (1, CVVT_TOKENS) + cfg.feature_grid))
        trace.append(("token_embed", (1, CVVT_TOKENS, cfg.size.embed_dim)))
        trace.append(("tokens", (1, CVVT_TOKENS + 1, cfg.size.embed_dim)))
        trace.append(("encoder", (1, CVVT_TOKENS + 1, cfg.size.embed_dim)))
        trace.append(("head", (1, cfg.num_classes)))
        return trace

    if isinstance(cfg, ConvNet3D4Config):
        cur = e
        for i in range(4):
            conv = tuple(_conv_out(x, cfg.kernel, cfg.stride, cfg.padding) for x in cur)
            if min(conv) < 1:
                raise ShapeUnderflowError(f"block{i + 1}.conv",
                                          f"conv output underflows: {cur} -> {conv}")
            trace.append((f"block{i + 1}.conv", (1, cfg.channels[i + 1]) + conv))
            pooled = tuple((x - cfg.pool_kernel) // cfg.pool_stride + 1 for x in conv)
            if min(conv) < cfg.pool_kernel or min(pooled) < 1:
                raise ShapeUnderflowError(
                    f"block{i + 1}.pool",
                    f"pool window {cfg.pool_kernel} does not fit extents {conv}")
            trace.append((f"block{i + 1}.pool", (1, cfg.channels[i + 1]) + pooled))
            cur = pooled
        flat = cfg.channels[-1] * int(np.prod(cur))
        trace.append(("flatten", (1, flat)))
        trace.append(("embed", (1, cfg.embed_dim)))
        trace.append(("head", (1, cfg.num_classes)))
        return trace

    raise TypeError(f"unknown config type {type(cfg).__name__}")


# ---------------------------------------------------------------------------
# patch extraction

def vvit_patchify(x: Tensor, patch_edge: int = 50) -> Tensor:
    """Zero-pad each spatial axis up to a multiple of the patch edge, tile
    non-overlapping cubes, and flatten each to a vector.

    Input [N,1,D,H,W] -> [N, P, edge^3] with patches ordered D-major, then H,
    then W.  Lossless: reassembling the patches and cropping the padding
    reconstructs the input.
    """
    if x.ndim != 5 or x.shape[1] != 1:
        raise ShapeError(f"patchify expects [N,1,D,H,W], got {x.shape}")
    n, _, d, h, w = x.shape
    e = int(patch_edge)
    pad = tuple((-x0) % e for x0 in (d, h, w))
    xp = np.pad(x.data[:, 0], ((0, 0),) + tuple((0, p) for p in pad))
    nd, nh, nw = (s // e for s in xp.shape[1:])
    blocks = xp.reshape(n, nd, e, nh, e, nw, e)
    tokens = blocks.transpose(0, 1, 3, 5, 2, 4, 6).reshape(n, nd * nh * nw, e ** 3)

    def backward(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        gb = g.reshape(n, nd, nh, nw, e, e, e).transpose(0, 1, 4, 2, 5, 3, 6)
        gp = gb.reshape(n, nd * e, nh * e, nw * e)
        x._accumulate(gp[:, None, :d, :h, :w])

    return _node(np.ascontiguousarray(tokens), (x,), backward, "vvit_patchify")


def unpatchify(tokens: np.ndarray, extents: tuple[int, int, int],
               patch_edge: int = 50) -> np.ndarray:
    """Inverse of vvit_patchify on raw arrays (test oracle for losslessness)."""
    n = tokens.shape[0]
    e = patch_edge
    counts = tuple(-(-x // e) for x in extents)
    nd, nh, nw = counts
    blocks = tokens.reshape(n, nd, nh, nw, e, e, e).transpose(0, 1, 4, 2, 5, 3, 6)
    full = blocks.reshape(n, nd * e, nh * e, nw * e)
    d, h, w = extents
    return full[:, None, :d, :h, :w]


# ---------------------------------------------------------------------------
# models

def _spawn(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


class _ViTCore(nn.Module):
    """Shared token pipeline: class token, positional table, encoder, head."""

    def __init__(self, num_patches: int, size: ViTSizeConfig, num_classes: int,
                 rng: np.random.Generator, dtype):
        super().__init__()
        e = size.embed_dim
        self.cls_token = Tensor(nn.trunc_normal(rng, (1, 1, e), dtype=dtype),
                                requires_grad=True)
        self.pos_embed = Tensor(nn.trunc_normal(rng, (1, num_patches + 1, e), dtype=dtype),
                                requires_grad=True)
        self.encoder = nn.TransformerEncoder(e, size.num_heads, size.depth,
                                             size.mlp_ratio, rng=rng, dtype=dtype)
        self.head = nn.Linear(e, num_classes, rng=rng, dtype=dtype)

    def forward(self, tokens: Tensor) -> Tensor:
        n = tokens.shape[0]
        cls = self.cls_token if n == 1 else concat([self.cls_token] * n, axis=0)
        t = concat([cls, tokens], axis=1)
        t = t + self.pos_embed
        encoded = self.encoder(t)
        return self.head(encoded[:, 0, :])


class VViT(nn.Module):
    param_groups = {"embedding": ("patch_embed",),
                    "tokens": ("core.cls_token", "core.pos_embed"),
                    "encoder": ("core.encoder",),
                    "head": ("core.head",)}

    def __init__(self, cfg: VViTConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        rng, = _spawn(seed, 1)
        self.patch_embed = nn.Linear(cfg.patch_dim, cfg.size.embed_dim, rng=rng, dtype=dtype)
        self.core = _ViTCore(cfg.num_patches, cfg.size, cfg.num_classes, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        tokens = vvit_patchify(x, self.cfg.patch_edge)
        return self.core(self.patch_embed(tokens))


class CVVT(nn.Module):
    param_groups = {"embedding": ("stages", "token_embed"),
                    "tokens": ("core.cls_token", "core.pos_embed"),
                    "encoder": ("core.encoder",),
                    "head": ("core.head",)}

    def __init__(self, cfg: CVVTConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        rng, = _spawn(seed, 1)
        self.stages = [nn.Conv3d(cin, cout, kernel=3, stride=s, padding=1,
                                 rng=rng, dtype=dtype)
                       for cin, cout, s in cfg.embed_stack]
        self.token_embed = nn.Linear(cfg.token_dim, cfg.size.embed_dim, rng=rng, dtype=dtype)
        self.core = _ViTCore(cfg.num_patches, cfg.size, cfg.num_classes, rng, dtype)

    def embed(self, x: Tensor) -> Tensor:
        """Conv stack -> 10^3 feature grid -> one token per channel."""
        h = x
        for conv in self.stages:
            h = leaky_relu(conv(h), 0.2)
        h = nn.adaptive_avg_pool3d(h, self.cfg.feature_grid)
        n = h.shape[0]
        tokens = h.reshape(n, CVVT_TOKENS, self.cfg.token_dim)
        return self.token_embed(tokens)

    def forward(self, x: Tensor) -> Tensor:
        return self.core(self.embed(x))


class _ConvBlock(nn.Module):
    """Conv -> norm -> max-pool -> leaky ReLU -> channel dropout."""

    def __init__(self, cfg: ConvNet3D4Config, cin: int, cout: int,
                 rng: np.random.Generator, drop_rng: np.random.Generator, dtype):
        super().__init__()
        self.conv = nn.Conv3d(cin, cout, cfg.kernel, cfg.stride, cfg.padding,
                              bias=cfg.conv_bias, rng=rng, dtype=dtype, slope=cfg.slope)
        if cfg.norm == "batch3d":
            self.norm = nn.BatchNorm3d(cout, dtype=dtype)
        else:
            self.norm = nn.InstanceNorm3d(cout, dtype=dtype)
        self.pool = nn.MaxPool3d(cfg.pool_kernel, cfg.pool_stride)
        self.slope = cfg.slope
        self.drop = nn.Dropout3d(cfg.dropout, rng=drop_rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.pool(self.norm(self.conv(x)))
        return self.drop(leaky_relu(h, self.slope))


class ConvNet3D4(nn.Module):
    param_groups = {"blocks": ("blocks",),
                    "embedding": ("embed",),
                    "head": ("head",)}

    def __init__(self, cfg: ConvNet3D4Config, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        trace = shape_infer(cfg)
        flat = dict(trace)["flatten"][1]
        rng, drop_rng = _spawn(seed, 2)
        self.blocks = [_ConvBlock(cfg, cfg.channels[i], cfg.channels[i + 1],
                                  rng, drop_rng, dtype) for i in range(4)]
        self.embed = nn.Linear(flat, cfg.embed_dim, rng=rng, dtype=dtype)
        self.head = nn.Linear(cfg.embed_dim, cfg.num_classes, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for block in self.blocks:
            h = block(h)
        v_emb = self.embed(h.flatten(start_axis=1))
        return self.head(v_emb)


Model = VViT | CVVT | ConvNet3D4


def executed_shape_trace(model: Model, x: Tensor) -> ShapeTrace:
    """Shapes observed while actually running the forward pass (oracle for
    shape_infer); matches the trace's layer names."""
    trace: ShapeTrace = [("input", x.shape)]
    if isinstance(model, ConvNet3D4):
        h = x
        for i, block in enumerate(model.blocks):
            c = block.conv(h)
            trace.append((f"block{i + 1}.conv", c.shape))
            h = block.pool(block.norm(c))
            trace.append((f"block{i + 1}.pool", h.shape))
            h = block.drop(leaky_relu(h, block.slope))
        flat = h.flatten(start_axis=1)
        trace.append(("flatten", flat.shape))
        emb = model.embed(flat)
        trace.append(("embed", emb.shape))
        trace.append(("head", model.head(emb).shape))
        return trace
    if isinstance(model, CVVT):
        h = x
        for i, conv in enumerate(model.stages):
            h = leaky_relu(conv(h), 0.2)
            trace.append((f"embed.stage{i}", h.shape))
        h = nn.adaptive_avg_pool3d(h, model.cfg.feature_grid)
        trace.append(("embed.adaptive_pool", h.shape))
        tokens = model.token_embed(h.reshape(h.shape[0], CVVT_TOKENS, model.cfg.token_dim))
        trace.append(("token_embed", tokens.shape))
        out = model.core(tokens)
        trace.append(("head", out.shape))
        return trace
    if isinstance(model, VViT):
        edge = model.cfg.patch_edge
        padded = tuple(-(-s // edge) * edge for s in x.shape[2:])
        trace.append(("pad", x.shape[:2] + padded))
        tokens = vvit_patchify(x, edge)
        trace.append(("patchify", tokens.shape))
        emb = model.patch_embed(tokens)
        trace.append(("patch_embed", emb.shape))
        out = model.core(emb)
        trace.append(("head", out.shape))
        return trace
    raise TypeError(f"unknown model type {type(model).__name__}")


# ---------------------------------------------------------------------------
# parameter counting

def param_count(model: nn.Module) -> dict[str, int]:
    """Exact parameter counts grouped by named submodule, plus the total."""
    groups: dict[str, int] = {}
    mapping = getattr(model, "param_groups", None)
    for name, t in model.named_parameters():
        group = name.split(".", 1)[0]
        if mapping:
            for g, prefixes in mapping.items():
                if any(name == p or name.startswith(p + ".") for p in prefixes):
                    group = g
                    break
        groups[group] = groups.get(group, 0) + t.size
    groups["total"] = sum(v for k, v in groups.items())
    return groups


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"VOXMDL1\n"


def save_checkpoint(path, model: nn.Module, config: dict) -> None:
    """Container file: magic, u64 manifest length, JSON manifest, raw
    little-endian tensor payloads.  Round-trips byte-exactly."""
    entries = []
    payload = bytearray()
    for name, t in model.named_tensors():
        raw = t.data.astype(t.data.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": t.dtype.name,
                        "shape": list(t.shape), "offset": len(payload),
                        "nbytes": len(raw)})
        payload.extend(raw)
    manifest = json.dumps({"config": config, "tensors": entries},
                          sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        f.write(payload)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise ValueError(f"not a checkpoint file: bad magic in {path}")
    n = struct.unpack("<Q", blob[8:16])[0]
    manifest = json.loads(blob[16:16 + n])
    base = 16 + n
    arrays = {}
    for e in manifest["tensors"]:
        raw = blob[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<"))
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(e["dtype"])
    return manifest["config"], arrays


# ---------------------------------------------------------------------------
# builder

def build_config(model: str, size: str = "tiny", norm: str = "in",
                 extents: tuple[int, int, int] = FULL_EXTENTS,
                 pool_stride: int | None = None, num_classes: int = 2) -> ModelConfig:
    """Config for one of the eight reported model rows.

    ``pool_stride`` (ConvNet3D4 only) defaults to 3; pass 2 for desk-scale
    inputs (the four stride-3 pools need extents of at least 81).
    """
    extents = tuple(int(e) for e in extents)
    if model == "vvit":
        return VViTConfig(size=VIT_SIZES[size], extents=extents, num_classes=num_classes)
    if model == "cvvt":
        return CVVTConfig(size=VIT_SIZES[size], extents=extents, num_classes=num_classes)
    if model == "convnet3d4":
        kind = {"bn": "batch3d", "in": "instance3d"}[norm]
        cfg = ConvNet3D4Config(norm=kind, extents=extents,
                               pool_stride=3 if pool_stride is None else int(pool_stride),
                               num_classes=num_classes)
        return cfg
    raise ValueError(f"unknown model {model!r} (expected vvit, cvvt, or convnet3d4)")


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    shape_infer(cfg)  # validate geometry before allocating parameters
    if isinstance(cfg, VViTConfig):
        return VViT(cfg, seed=seed, dtype=dtype)
    if isinstance(cfg, CVVTConfig):
        return CVVT(cfg, seed=seed, dtype=dtype)
    return ConvNet3D4(cfg, seed=seed, dtype=dtype)


def config_to_dict(cfg: ModelConfig) -> dict:
    if isinstance(cfg, VViTConfig):
        return {"model": "vvit", "size": _size_name(cfg.size),
                "extents": list(cfg.extents), "num_classes": cfg.num_classes,
                "patch_edge": cfg.patch_edge}
    if isinstance(cfg, CVVTConfig):
        return {"model": "cvvt", "size": _size_name(cfg.size),
                "extents": list(cfg.extents), "num_classes": cfg.num_classes,
                "embed_stack": [list(s) for s in cfg.embed_stack]}
    return {"model": "convnet3d4",
            "norm": {"batch3d": "bn", "instance3d": "in"}[cfg.norm],
            "extents": list(cfg.extents), "num_classes": cfg.num_classes,
            "pool_stride": cfg.pool_stride}


def config_from_dict(d: dict) -> ModelConfig:
    kind = d["model"]
    extents = tuple(d["extents"])
    if kind == "vvit":
        return VViTConfig(size=VIT_SIZES[d["size"]], extents=extents,
                          num_classes=d["num_classes"])
    if kind == "cvvt":
        return CVVTConfig(size=VIT_SIZES[d["size"]], extents=extents,
                          embed_stack=tuple(tuple(s) for s in d["embed_stack"]),
                          num_classes=d["num_classes"])
    return build_config("convnet3d4", norm=d["norm"], extents=extents,
                        pool_stride=d["pool_stride"], num_classes=d["num_classes"])


def _size_name(size: ViTSizeConfig) -> str:
    for name, s in VIT_SIZES.items():
        if s == size:
            return name
    raise ValueError(f"non-standard size {size}")
