"""Multi-view vision transformer (MVVT) for scalar regression.

Pipeline: patch embedding of the stacked views, learnable positional
encoding, L pre-LN attention blocks, final layer norm, mean pooling over
tokens and a ReLU MLP head producing one value per sample.

Two fusion modes resolve how views become tokens:

``fused-channels``
    one patch projection over all N*C input channels; tokens are D wide.
``per-view-concat``
    each view X_i = X[:, i*C:(i+1)*C] is projected with the same weights and
    the N embeddings of a patch are concatenated; tokens are N*D wide.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import RngStream, Tensor

FUSION_MODES = ("fused-channels", "per-view-concat")
ACTIVATIONS = ("gelu", "relu")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MvvtConfig:
    num_views: int = 24
    channels: int = 3
    height: int = 224
    width: int = 224
    patch: int = 16
    embed: int = 256
    layers: int = 6
    heads: int = 8
    mlp_dim: int = 0  # 0 -> 4 * token_width
    head_hidden: int = 512
    dropout: float = 0.1
    fusion_mode: str = "fused-channels"
    output_dim: int = 1
    activation: str = "gelu"
    ln_eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError("invalid MvvtConfig: " + "; ".join(problems))

    def problems(self) -> list:
        out = []
        for name in ("num_views", "channels", "height", "width", "patch", "embed", "head_hidden", "output_dim"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        if out:
            return out
        if self.height % self.patch or self.width % self.patch:
            out.append(f"H={self.height}, W={self.width} not divisible by P={self.patch}")
        if self.layers < 1:
            out.append("layers must be >= 1")
        if self.heads < 1:
            out.append("heads must be >= 1")
        elif self.token_width % self.heads:
            out.append(f"token_width {self.token_width} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            out.append("dropout must lie in [0, 1)")
        if self.fusion_mode not in FUSION_MODES:
            out.append(f"fusion_mode must be one of {FUSION_MODES}")
        if self.activation not in ACTIVATIONS:
            out.append(f"activation must be one of {ACTIVATIONS}")
        if self.mlp_dim < 0:
            out.append("mlp_dim must be >= 0")
        if self.ln_eps <= 0:
            out.append("ln_eps must be positive")
        if self.dtype not in T.DTYPES:
            out.append(f"dtype must be one of {tuple(T.DTYPES)}")
        return out

    @property
    def in_channels(self) -> int:
        return self.num_views * self.channels

    @property
    def num_patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def token_width(self) -> int:
        return self.embed if self.fusion_mode == "fused-channels" else self.num_views * self.embed

    @property
    def hidden_mlp(self) -> int:
        return self.mlp_dim or 4 * self.token_width

    @property
    def patch_in(self) -> int:
        c = self.in_channels if self.fusion_mode == "fused-channels" else self.channels
        return c * self.patch * self.patch


def param_shapes(cfg: MvvtConfig) -> dict:
    """Parameter names and shapes in checkpoint order."""
    w, m = cfg.token_width, cfg.hidden_mlp
    shapes = {
        "patch.weight": (cfg.patch_in, cfg.embed),
        "patch.bias": (cfg.embed,),
        "pos_enc": (1, cfg.num_patches, w),
    }
    for i in range(cfg.layers):
        p = f"layers.{i}."
        shapes[p + "ln1.gamma"] = (w,)
        shapes[p + "ln1.beta"] = (w,)
        for proj in ("q", "k", "v", "o"):
            shapes[p + f"attn.{proj}.weight"] = (w, w)
            shapes[p + f"attn.{proj}.bias"] = (w,)
        shapes[p + "ln2.gamma"] = (w,)
        shapes[p + "ln2.beta"] = (w,)
        shapes[p + "mlp_in.weight"] = (w, m)
        shapes[p + "mlp_in.bias"] = (m,)
        shapes[p + "mlp_out.weight"] = (m, w)
        shapes[p + "mlp_out.bias"] = (w,)
    shapes["final_ln.gamma"] = (w,)
    shapes["final_ln.beta"] = (w,)
    shapes["head.in.weight"] = (w, cfg.head_hidden)
    shapes["head.in.bias"] = (cfg.head_hidden,)
    shapes["head.out.weight"] = (cfg.head_hidden, cfg.output_dim)
    shapes["head.out.bias"] = (cfg.output_dim,)
    return shapes


def count_params(cfg: MvvtConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg).values())


class ModelParams(dict):
    """Ordered mapping of parameter name to leaf :class:`Tensor`."""

    def layer(self, i: int) -> dict:
        p = f"layers.{i}."
        return {k[len(p):]: v for k, v in self.items() if k.startswith(p)}

    def zero_grad(self) -> None:
        for t in self.values():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        return ModelParams((k, Tensor(v.data.copy(), requires_grad=True)) for k, v in self.items())

    def num_elements(self) -> int:
        return sum(t.data.size for t in self.values())


def init_params(cfg: MvvtConfig, seed: int) -> ModelParams:
    """Weights ~ truncated normal(0.02, +-2 std), biases 0, LN gamma 1 / beta 0, pos_enc ~ N(0, 0.02)."""
    if not isinstance(cfg, MvvtConfig):
        raise ConfigError("init_params needs an MvvtConfig")
    rng = RngStream(seed)
    dtype = T.DTYPES[cfg.dtype]
    params = ModelParams()
    for name, shape in param_shapes(cfg).items():
        if name == "pos_enc":
            arr = rng.normal(shape, 0.02)
        elif name.endswith(".weight"):
            arr = rng.truncated_normal(shape, 0.02)
        elif name.endswith(".gamma"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return params


# --- forward stages --------------------------------------------------------


def embed_views(x: Tensor, params: ModelParams, cfg: MvvtConfig) -> Tensor:
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise T.ShapeError(
            f"expected input (B, {cfg.in_channels}, {cfg.height}, {cfg.width}), got {x.shape}"
        )
    if x.shape[2:] != (cfg.height, cfg.width):
        raise T.ShapeError(f"expected spatial size {(cfg.height, cfg.width)}, got {x.shape[2:]}")
    w, b = params["patch.weight"], params["patch.bias"]
    if cfg.fusion_mode == "fused-channels":
        return T.patchify_project(x, w, b, cfg.patch)
    c = cfg.channels
    views = [
        T.patchify_project(x[:, i * c:(i + 1) * c], w, b, cfg.patch) for i in range(cfg.num_views)
    ]
    return views[0] if len(views) == 1 else T.concat(views, axis=-1)


def add_positional(tokens: Tensor, params: ModelParams) -> Tensor:
    pos = params["pos_enc"]
    if tokens.shape[-2:] != pos.shape[-2:]:
        raise T.ShapeError(f"tokens {tokens.shape} do not match pos_enc {pos.shape}")
    return T.add(tokens, pos)


def msa(
    x: Tensor, lp: dict, cfg: MvvtConfig, training: bool = False, rng: Optional[RngStream] = None
) -> Tensor:
    """Multi-head self-attention over the token axis of (B, T, width)."""
    b, t, w = x.shape
    h = cfg.heads
    if w % h:
        raise T.ShapeError(f"width {w} not divisible by {h} heads")
    d = w // h

    def heads(proj):
        y = T.linear(x, lp[f"attn.{proj}.weight"], lp[f"attn.{proj}.bias"])
        return T.transpose(T.reshape(y, (b, t, h, d)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    ctx = T.matmul(T.softmax(scores, -1), v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, w))
    out = T.linear(ctx, lp["attn.o.weight"], lp["attn.o.bias"])
    return T.dropout(out, cfg.dropout, training, rng)


def mlp(x: Tensor, lp: dict, cfg: MvvtConfig, training: bool, rng: Optional[RngStream]) -> Tensor:
    act = T.gelu if cfg.activation == "gelu" else T.relu
    y = act(T.linear(x, lp["mlp_in.weight"], lp["mlp_in.bias"]))
    y = T.dropout(y, cfg.dropout, training, rng)
    y = T.linear(y, lp["mlp_out.weight"], lp["mlp_out.bias"])
    return T.dropout(y, cfg.dropout, training, rng)


def mab_block(
    x: Tensor, lp: dict, cfg: MvvtConfig, training: bool = False, rng: Optional[RngStream] = None
) -> Tensor:
    """Z' = MSA(LN(Z)) + Z, then Z = MLP(LN(Z')) + Z'."""
    eps = cfg.ln_eps
    z = T.add(msa(T.layer_norm(x, lp["ln1.gamma"], lp["ln1.beta"], eps), lp, cfg, training, rng), x)
    return T.add(mlp(T.layer_norm(z, lp["ln2.gamma"], lp["ln2.beta"], eps), lp, cfg, training, rng), z)


def encoder(
    x: Tensor, params: ModelParams, cfg: MvvtConfig, training: bool = False, rng: Optional[RngStream] = None
) -> Tensor:
    for i in range(cfg.layers):
        x = mab_block(x, params.layer(i), cfg, training, rng)
    return T.layer_norm(x, params["final_ln.gamma"], params["final_ln.beta"], cfg.ln_eps)


def pool_and_head(
    tokens: Tensor, params: ModelParams, cfg: MvvtConfig, training: bool = False, rng: Optional[RngStream] = None
) -> Tensor:
    pooled = T.mean(tokens, axis=1)
    hidden = T.relu(T.linear(pooled, params["head.in.weight"], params["head.in.bias"]))
    hidden = T.dropout(hidden, cfg.dropout, training, rng)
    return T.linear(hidden, params["head.out.weight"], params["head.out.bias"])


def forward(
    x: Tensor, params: ModelParams, cfg: MvvtConfig, mode: str = "eval", rng: Optional[RngStream] = None
) -> Tensor:
    """(B, N*C, H, W) -> (B, output_dim). ``mode`` is "train" or "eval"."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train" and cfg.dropout > 0
    if training and rng is None:
        raise ValueError("train mode with dropout needs an RngStream")
    z = add_positional(embed_views(x, params, cfg), params)
    z = encoder(z, params, cfg, training, rng)
    return pool_and_head(z, params, cfg, training, rng)


# --- checkpoints -----------------------------------------------------------

MAGIC = b"MVVT"
FORMAT_VERSION = 1

# Checkpoint layout (little-endian):
#   b"MVVT", u32 version, config block, u32 tensor count, then per tensor:
#   u32 name length, utf-8 name, u32 rank, rank x u32 extents, float64 payload.
# Config block, in this order: num_views, channels, height, width, patch,
# embed, layers, heads, mlp_dim, head_hidden (u32 each), dropout (f64),
# fusion_mode (u8 index), output_dim (u32), activation (u8 index),
# ln_eps (f64), dtype (u8 index).
_CFG_STRUCT = struct.Struct("<10IdBIBdB")


def _encode_config(cfg: MvvtConfig) -> bytes:
    return _CFG_STRUCT.pack(
        cfg.num_views, cfg.channels, cfg.height, cfg.width, cfg.patch, cfg.embed, cfg.layers,
        cfg.heads, cfg.mlp_dim, cfg.head_hidden, cfg.dropout, FUSION_MODES.index(cfg.fusion_mode),
        cfg.output_dim, ACTIVATIONS.index(cfg.activation), cfg.ln_eps, list(T.DTYPES).index(cfg.dtype),
    )


def _decode_config(raw: bytes) -> MvvtConfig:
    v = _CFG_STRUCT.unpack(raw)
    return MvvtConfig(
        *v[:11], fusion_mode=FUSION_MODES[v[11]], output_dim=v[12], activation=ACTIVATIONS[v[13]],
        ln_eps=v[14], dtype=list(T.DTYPES)[v[15]],
    )


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, cfg: MvvtConfig, params: ModelParams) -> None:
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), _encode_config(cfg), struct.pack("<I", len(params))]
    for name, shape in param_shapes(cfg).items():
        arr = params[name].data
        if arr.shape != shape:
            raise CheckpointError(f"{name} has shape {arr.shape}, config expects {shape}")
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, expect: Optional[MvvtConfig] = None) -> tuple:
    """Read (config, params). Rejects unknown versions and, if given, a differing config."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an MVVT checkpoint")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off = 8
    cfg = _decode_config(buf[off:off + _CFG_STRUCT.size])
    off += _CFG_STRUCT.size
    if expect is not None and expect != cfg:
        raise CheckpointError(f"checkpoint config {asdict(cfg)} != expected {asdict(expect)}")
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    shapes = param_shapes(cfg)
    if count != len(shapes):
        raise CheckpointError(f"{path}: {count} tensors, config implies {len(shapes)}")
    dtype = T.DTYPES[cfg.dtype]
    params = ModelParams()
    for name, shape in shapes.items():
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        got = buf[off:off + n].decode()
        off += n
        if got != name:
            raise CheckpointError(f"{path}: expected tensor {name}, found {got}")
        (rank,) = struct.unpack_from("<I", buf, off)
        ext = struct.unpack_from(f"<{rank}I", buf, off + 4)
        off += 4 + 4 * rank
        if tuple(ext) != shape:
            raise CheckpointError(f"{path}: {name} has extents {ext}, expected {shape}")
        size = math.prod(shape) * 8
        arr = np.frombuffer(buf, dtype="<f8", count=math.prod(shape), offset=off).reshape(shape)
        off += size
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return cfg, params


def config_fields() -> list:
    return [f.name for f in fields(MvvtConfig)]
