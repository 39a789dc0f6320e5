"""UNeXt: three conv levels, two tokenized-MLP levels, mirrored decoder with additive skips."""
from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import nn
from .tensor import ShapeError, Tensor, add, default_dtype, no_grad

SHIFT_AXES = ("none", "width_only", "height_only", "both")
DEPTH_VARIANTS = ("full", "conv_stage_only")


@dataclass(frozen=True)
class UNeXtConfig:
    channels: Tuple[int, int, int, int, int] = (16, 32, 128, 160, 256)
    # None: each tokenized block's MLP hidden width equals its token width
    hidden_dim: Optional[int] = None
    # None: (C4, C5)
    token_embed_dims: Optional[Tuple[int, int]] = None
    shift_axes: str = "both"
    shift_partitions: int = 5
    shift_offsets: Tuple[int, ...] = (-2, -1, 0, 1, 2)
    use_pos_embed: bool = True
    depth_variant: str = "full"
    in_channels: int = 3
    out_channels: int = 1
    input_scaling: str = "unit"  # pixel values / 255, no mean/std

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "shift_offsets", tuple(int(k) for k in self.shift_offsets))
        if self.token_embed_dims is not None:
            object.__setattr__(self, "token_embed_dims", tuple(int(e) for e in self.token_embed_dims))
        self.validate()

    def validate(self):
        if len(self.channels) != 5 or min(self.channels) < 1:
            raise ValueError(f"channels must be 5 positive integers, got {self.channels}")
        if self.shift_axes not in SHIFT_AXES:
            raise ValueError(f"shift_axes must be one of {SHIFT_AXES}")
        if self.depth_variant not in DEPTH_VARIANTS:
            raise ValueError(f"depth_variant must be one of {DEPTH_VARIANTS}")
        if self.shift_partitions < 1 or len(self.shift_offsets) != self.shift_partitions:
            raise ValueError("shift_offsets length must equal shift_partitions")
        if self.hidden_dim is not None and self.hidden_dim < 1:
            raise ValueError("hidden_dim must be positive")
        if self.token_embed_dims is not None and (len(self.token_embed_dims) != 2 or min(self.token_embed_dims) < 1):
            raise ValueError("token_embed_dims must be 2 positive integers")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("in/out channels must be positive")

    @property
    def embed_dims(self) -> Tuple[int, int]:
        return self.token_embed_dims or (self.channels[3], self.channels[4])

    @property
    def divisor(self) -> int:
        return 32 if self.depth_variant == "full" else 8

    def with_(self, **kw) -> "UNeXtConfig":
        return replace(self, **kw)

    def to_lines(self) -> List[str]:
        out = []
        for k, v in asdict(self).items():
            if isinstance(v, (tuple, list)):
                v = ",".join(str(i) for i in v)
            out.append(f"{k}={'' if v is None else v}")
        return out

    @classmethod
    def from_lines(cls, lines) -> "UNeXtConfig":
        kv = {}
        for line in lines:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
        return cls.from_strings(kv)

    @classmethod
    def from_strings(cls, kv: Dict[str, str]) -> "UNeXtConfig":
        known = cls.__dataclass_fields__
        args = {}
        for k, v in kv.items():
            if k not in known:
                raise ValueError(f"unknown config key {k!r}")
            if k in ("channels", "shift_offsets", "token_embed_dims"):
                args[k] = None if v in ("", "None") else tuple(int(i) for i in v.split(","))
            elif k in ("hidden_dim",):
                args[k] = None if v in ("", "None") else int(v)
            elif k in ("shift_partitions", "in_channels", "out_channels"):
                args[k] = int(v)
            elif k == "use_pos_embed":
                if v.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(f"bad boolean {v!r} for use_pos_embed")
                args[k] = v.lower() in ("true", "1")
            else:
                args[k] = v
        return cls(**args)


CANONICAL = {
    "unext": UNeXtConfig(channels=(16, 32, 128, 160, 256)),
    "unext-s": UNeXtConfig(channels=(8, 16, 32, 64, 128)),
    "unext-l": UNeXtConfig(channels=(32, 64, 128, 256, 512)),
}


def table2_variants(base: Optional[UNeXtConfig] = None) -> List[Tuple[str, UNeXtConfig]]:
    """The ablation lattice, from the bare conv stage up to the full shifted network."""
    base = base or CANONICAL["unext"]
    return [
        ("Conv Stage", base.with_(depth_variant="conv_stage_only")),
        ("Conv Stage + Tok-MLP w/o PE", base.with_(shift_axes="none", use_pos_embed=False)),
        ("Conv Stage + Tok-MLP + PE", base.with_(shift_axes="none", use_pos_embed=True)),
        ("Conv Stage + Shifted Tok-MLP (W) + PE", base.with_(shift_axes="width_only")),
        ("Conv Stage + Shifted Tok-MLP (H) + PE", base.with_(shift_axes="height_only")),
        ("Conv Stage + Shifted Tok-MLP (H+W) + PE", base.with_(shift_axes="both")),
    ]


# ---------------------------------------------------------------- block layout


@dataclass(frozen=True)
class BlockSpec:
    name: str
    kind: str  # "conv" | "tok"
    direction: str  # "enc" | "dec"
    in_ch: int
    out_ch: int
    hidden: int = 0


def block_layout(cfg: UNeXtConfig) -> List[BlockSpec]:
    c1, c2, c3, c4, c5 = cfg.channels
    blocks = [
        BlockSpec("enc1", "conv", "enc", cfg.in_channels, c1),
        BlockSpec("enc2", "conv", "enc", c1, c2),
        BlockSpec("enc3", "conv", "enc", c2, c3),
    ]
    if cfg.depth_variant == "full":
        e4, e5 = cfg.embed_dims
        hid = lambda e: cfg.hidden_dim or e  # noqa: E731
        blocks += [
            BlockSpec("enc4", "tok", "enc", c3, e4, hid(e4)),
            BlockSpec("enc5", "tok", "enc", e4, e5, hid(e5)),
            BlockSpec("dec4", "tok", "dec", e5, e4, hid(e4)),
            BlockSpec("dec3", "tok", "dec", e4, c3, hid(c3)),
        ]
    blocks += [
        BlockSpec("dec2", "conv", "dec", c3, c2),
        BlockSpec("dec1", "conv", "dec", c2, c1),
        BlockSpec("dec0", "conv", "dec", c1, c1),
    ]
    return blocks


def param_shapes(cfg: UNeXtConfig) -> Dict[str, Tuple[int, ...]]:
    """Ordered parameter names and shapes, derived from the config alone."""
    shapes: Dict[str, Tuple[int, ...]] = {}
    for b in block_layout(cfg):
        if b.kind == "conv":
            shapes[f"{b.name}.conv.weight"] = (b.out_ch, b.in_ch, 3, 3)
            shapes[f"{b.name}.conv.bias"] = (b.out_ch,)
            shapes[f"{b.name}.bn.gamma"] = (b.out_ch,)
            shapes[f"{b.name}.bn.beta"] = (b.out_ch,)
        else:
            e, h = b.out_ch, b.hidden
            shapes[f"{b.name}.tokenize.weight"] = (e, b.in_ch, 3, 3)
            shapes[f"{b.name}.tokenize.bias"] = (e,)
            shapes[f"{b.name}.fc1.weight"] = (e, h)
            shapes[f"{b.name}.fc1.bias"] = (h,)
            if cfg.use_pos_embed:
                shapes[f"{b.name}.dwconv.weight"] = (h, 1, 3, 3)
                shapes[f"{b.name}.dwconv.bias"] = (h,)
            shapes[f"{b.name}.fc2.weight"] = (h, e)
            shapes[f"{b.name}.fc2.bias"] = (e,)
            shapes[f"{b.name}.ln.gamma"] = (e,)
            shapes[f"{b.name}.ln.beta"] = (e,)
    c1 = cfg.channels[0]
    shapes["head.weight"] = (cfg.out_channels, c1, 1, 1)
    shapes["head.bias"] = (cfg.out_channels,)
    return shapes


def buffer_shapes(cfg: UNeXtConfig) -> Dict[str, Tuple[int, ...]]:
    out = {}
    for b in block_layout(cfg):
        if b.kind == "conv":
            out[f"{b.name}.bn.running_mean"] = (b.out_ch,)
            out[f"{b.name}.bn.running_var"] = (b.out_ch,)
    return out


# ---------------------------------------------------------------- model


@dataclass
class Model:
    config: UNeXtConfig
    params: Dict[str, Tensor]
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    mode: str = "train"

    def train(self) -> "Model":
        self.mode = "train"
        return self

    def eval(self) -> "Model":
        self.mode = "eval"
        return self

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "Model":
        return Model(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, dtype=v.data.dtype) for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.mode,
        )

    def astype(self, dtype) -> "Model":
        return Model(
            self.config,
            {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, dtype=dtype) for k, v in self.params.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
            self.mode,
        )


def build_model(cfg: UNeXtConfig, seed: int = 0, dtype=None) -> Model:
    """Fan-in-scaled uniform weights, zero biases, unit norm scales; reproducible from ``seed``."""
    dtype = dtype or default_dtype()
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "weight":
            if len(shape) == 4:
                fan_in = shape[1] * shape[2] * shape[3]
            else:
                fan_in = shape[0]
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif leaf == "gamma":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, dtype=dtype)
    buffers = {}
    for name, shape in buffer_shapes(cfg).items():
        buffers[name] = (np.zeros if name.endswith("mean") else np.ones)(shape, dtype=dtype)
    return Model(cfg, params, buffers)


def _norm(model: Model, prefix: str) -> nn.NormParams:
    return nn.NormParams(
        model.params[f"{prefix}.gamma"],
        model.params[f"{prefix}.beta"],
        model.buffers.get(f"{prefix}.running_mean"),
        model.buffers.get(f"{prefix}.running_var"),
    )


def conv_block(model: Model, x: Tensor, name: str, direction: str) -> Tensor:
    """conv3x3 -> BN -> ReLU, then max-pool (enc) or bilinear x2 (dec)."""
    p = model.params
    w = p[f"{name}.conv.weight"]
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"{name}: expected {w.shape[1]} input channels, got {x.shape[1]}")
    y = nn.conv2d(x, nn.Conv2dParams(w, p[f"{name}.conv.bias"], 1, 1))
    y = nn.batchnorm2d(y, _norm(model, f"{name}.bn"), model.mode)
    y = nn.relu(y)
    return nn.maxpool2(y) if direction == "enc" else nn.bilinear_up2(y)


def tokenize(x: Tensor, weight: Tensor, bias: Tensor, stride: int) -> Tuple[Tensor, int, int]:
    """3x3 conv to the token width, then flatten positions row-major. Returns tokens and the grid size."""
    m = nn.conv2d(x, nn.Conv2dParams(weight, bias, stride, 1))
    _, _, h, w = m.shape
    return nn.map_to_tokens(m), h, w


def tok_mlp_block(model: Model, x: Tensor, name: str, direction: str) -> Tensor:
    cfg = model.config
    p = model.params
    parts, offs = cfg.shift_partitions, cfg.shift_offsets
    w_tok = p[f"{name}.tokenize.weight"]
    if x.shape[1] != w_tok.shape[1]:
        raise ShapeError(f"{name}: expected {w_tok.shape[1]} input channels, got {x.shape[1]}")
    if cfg.shift_axes in ("width_only", "both"):
        x = nn.shift_channels(x, "width", parts, offs)
    tokens, h, w = tokenize(x, w_tok, p[f"{name}.tokenize.bias"], 2 if direction == "enc" else 1)
    y = nn.linear_tokens(tokens, p[f"{name}.fc1.weight"], p[f"{name}.fc1.bias"])
    y = nn.tokens_to_map(y, h, w)
    if cfg.use_pos_embed:
        y = nn.depthwise_conv2d(y, nn.Conv2dParams(p[f"{name}.dwconv.weight"], p[f"{name}.dwconv.bias"], 1, 1))
    y = nn.gelu(y)
    if cfg.shift_axes in ("height_only", "both"):
        y = nn.shift_channels(y, "height", parts, offs)
    y = nn.linear_tokens(nn.map_to_tokens(y), p[f"{name}.fc2.weight"], p[f"{name}.fc2.bias"])
    y = nn.layernorm_tokens(add(tokens, y), nn.NormParams(p[f"{name}.ln.gamma"], p[f"{name}.ln.beta"]))
    out = nn.tokens_to_map(y, h, w)
    return nn.bilinear_up2(out) if direction == "dec" else out


def forward(model: Model, x: Tensor) -> Tensor:
    """Logits at input resolution. Eval mode uses running BN statistics and records no tape."""
    cfg = model.config
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected input [n, {cfg.in_channels}, h, w], got {x.shape}")
    d = cfg.divisor
    if x.shape[2] % d or x.shape[3] % d:
        raise ShapeError(f"input extents {x.shape[2]}x{x.shape[3]} must be divisible by {d}")
    ctx = no_grad() if model.mode == "eval" else contextlib.nullcontext()
    with ctx:
        e1 = conv_block(model, x, "enc1", "enc")
        e2 = conv_block(model, e1, "enc2", "enc")
        e3 = conv_block(model, e2, "enc3", "enc")
        if cfg.depth_variant == "full":
            e4 = tok_mlp_block(model, e3, "enc4", "enc")
            e5 = tok_mlp_block(model, e4, "enc5", "enc")
            d4 = add(tok_mlp_block(model, e5, "dec4", "dec"), e4)
            d3 = add(tok_mlp_block(model, d4, "dec3", "dec"), e3)
        else:
            d3 = e3
        d2 = add(conv_block(model, d3, "dec2", "dec"), e2)
        d1 = add(conv_block(model, d2, "dec1", "dec"), e1)
        d0 = conv_block(model, d1, "dec0", "dec")
        return nn.conv2d(d0, nn.Conv2dParams(model.params["head.weight"], model.params["head.bias"], 1, 0))
