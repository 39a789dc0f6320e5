"""Parameter/MAC accounting from the config alone, CPU latency benchmarking, and the
comparison table against published efficiency numbers.

GFLOPs in this literature are multiply-accumulate counts; reports carry both MACs and
2*MACs and say which one the headline uses. Normalization, activation, pooling and
residual/skip additions go to a separate ``minor_ops`` bucket and are excluded from the
headline. Channel shifts cost nothing.
"""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from .arch import Model, UNeXtConfig, forward
from .tensor import ShapeError, Tensor, no_grad

CONVENTION = "GFLOPs = MACs / 1e9 (one multiply-accumulate counted once); flops2 = 2 * MACs"


@dataclass
class LayerCost:
    name: str
    kind: str
    params: int
    macs: int
    minor_ops: int
    out_shape: Tuple[int, ...]


@dataclass
class CostReport:
    rows: List[LayerCost]
    input_shape: Tuple[int, ...]
    tensor_params: Optional[int] = None  # summed from a built model, when one was given

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def flops(self) -> int:
        return 2 * self.macs

    @property
    def gflops_mac_convention(self) -> float:
        return self.macs / 1e9

    @property
    def minor_ops(self) -> int:
        return sum(r.minor_ops for r in self.rows)

    def bucket(self, kind: str) -> int:
        return sum(r.macs for r in self.rows if r.kind == kind)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# {CONVENTION}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "params", "macs", "flops2", "out_shape"])
        for r in self.rows:
            w.writerow([r.name, r.params, r.macs, 2 * r.macs, "x".join(map(str, r.out_shape))])
        w.writerow(["TOTAL", self.params, self.macs, self.flops, ""])
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = [f"_{CONVENTION}_", "", "| name | kind | params | MACs | out_shape |", "|---|---|---:|---:|---|"]
        for r in self.rows:
            lines.append(f"| {r.name} | {r.kind} | {r.params} | {r.macs} | {'x'.join(map(str, r.out_shape))} |")
        lines.append(f"| **total** | | {self.params} ({self.params / 1e6:.3f} M) | "
                     f"{self.macs} ({self.gflops_mac_convention:.3f} G) | |")
        lines.append("")
        lines.append(f"minor bucket (norm/act/pool/add, excluded above): {self.minor_ops} ops")
        return "\n".join(lines)


def _numel(shape) -> int:
    return int(np.prod(shape))


def conv_cost(name: str, in_shape: Sequence[int], cout: int, k: int = 3, stride: int = 1, pad: int = 1,
              bias: bool = True) -> LayerCost:
    """One dense conv layer: weights (+ bias) and out_elems * cin * k * k MACs."""
    n, ci, hh, ww = in_shape
    oh, ow = (hh + 2 * pad - k) // stride + 1, (ww + 2 * pad - k) // stride + 1
    out = (n, cout, oh, ow)
    return LayerCost(name, "conv", cout * ci * k * k + (cout if bias else 0), _numel(out) * ci * k * k, 0, out)


def cost_rows(cfg: UNeXtConfig, input_shape: Sequence[int]) -> List[LayerCost]:
    """Symbolic walk of the network; no tensor math."""
    rows: List[LayerCost] = []
    n, cin, h, w = input_shape
    if cin != cfg.in_channels:
        raise ShapeError(f"input has {cin} channels, config expects {cfg.in_channels}")
    if h % cfg.divisor or w % cfg.divisor:
        raise ShapeError(f"input extents {h}x{w} must be divisible by {cfg.divisor}")

    def conv(name, shape, cout, k=3, stride=1, pad=1):
        rows.append(conv_cost(name, shape, cout, k, stride, pad))
        return rows[-1].out_shape

    def minor(name, kind, shape, params=0, ops=None):
        rows.append(LayerCost(name, kind, params, 0, _numel(shape) if ops is None else ops, shape))
        return shape

    def up(name, shape):
        out = (shape[0], shape[1], 2 * shape[2], 2 * shape[3])
        rows.append(LayerCost(name, "bilinear", 0, 4 * _numel(out), 0, out))
        return out

    def conv_block(name, shape, cout, direction):
        s = conv(f"{name}.conv", shape, cout)
        minor(f"{name}.bn", "norm", s, params=2 * cout)
        minor(f"{name}.relu", "act", s)
        if direction == "enc":
            out = (n, cout, s[2] // 2, s[3] // 2)
            return minor(f"{name}.pool", "pool", out, ops=_numel(s))
        return up(f"{name}.up", s)

    reach = max(abs(k) for k in cfg.shift_offsets)

    def shift(name, axis, shape):
        if reach >= shape[2 if axis == "h" else 3]:
            raise ShapeError(f"{name}: shift offsets {list(cfg.shift_offsets)} exceed extent of {shape}")
        rows.append(LayerCost(name, "shift", 0, 0, 0, shape))

    def tok_block(name, shape, e, hidden, direction):
        if cfg.shift_axes in ("width_only", "both"):
            shift(f"{name}.shift_w", "w", shape)
        t = conv(f"{name}.tokenize", shape, e, stride=2 if direction == "enc" else 1)
        tokens = t[2] * t[3]
        hid = (n, hidden, t[2], t[3])
        rows.append(LayerCost(f"{name}.fc1", "linear", e * hidden + hidden, n * tokens * e * hidden, 0, hid))
        if cfg.use_pos_embed:
            rows.append(LayerCost(f"{name}.dwconv", "dwconv", hidden * 9 + hidden, _numel(hid) * 9, 0, hid))
        minor(f"{name}.gelu", "act", hid)
        if cfg.shift_axes in ("height_only", "both"):
            shift(f"{name}.shift_h", "h", hid)
        rows.append(LayerCost(f"{name}.fc2", "linear", hidden * e + e, n * tokens * hidden * e, 0, t))
        minor(f"{name}.residual", "add", t)
        minor(f"{name}.ln", "norm", t, params=2 * e)
        return up(f"{name}.up", t) if direction == "dec" else t

    c1, c2, c3, _, _ = cfg.channels
    s = (n, cin, h, w)
    e1 = s = conv_block("enc1", s, c1, "enc")
    e2 = s = conv_block("enc2", s, c2, "enc")
    e3 = s = conv_block("enc3", s, c3, "enc")
    if cfg.depth_variant == "full":
        e4d, e5d = cfg.embed_dims
        hid = lambda e: cfg.hidden_dim or e  # noqa: E731
        s = tok_block("enc4", s, e4d, hid(e4d), "enc")
        s = tok_block("enc5", s, e5d, hid(e5d), "enc")
        s = tok_block("dec4", s, e4d, hid(e4d), "dec")
        minor("skip4", "add", s)
        s = tok_block("dec3", s, c3, hid(c3), "dec")
        minor("skip3", "add", s)
    s = conv_block("dec2", s, c2, "dec")
    minor("skip2", "add", s)
    s = conv_block("dec1", s, c1, "dec")
    minor("skip1", "add", s)
    s = conv_block("dec0", s, c1, "dec")
    conv("head", s, cfg.out_channels, k=1, pad=0)
    return rows


def _config_of(model_or_cfg) -> Tuple[UNeXtConfig, Optional[int]]:
    if isinstance(model_or_cfg, Model):
        return model_or_cfg.config, model_or_cfg.param_count()
    return model_or_cfg, None


def count_params(model_or_cfg, input_shape: Sequence[int] = (1, 3, 256, 256)) -> CostReport:
    """Closed-form per-layer report; ``tensor_params`` holds the summed tensor sizes of a built model."""
    cfg, tensor_params = _config_of(model_or_cfg)
    return CostReport(cost_rows(cfg, input_shape), tuple(input_shape), tensor_params)


def count_flops(model_or_cfg, input_shape: Sequence[int] = (1, 3, 256, 256)) -> CostReport:
    return count_params(model_or_cfg, input_shape)


# ---------------------------------------------------------------- latency


@dataclass
class BenchReport:
    image_size: int
    n_images: int
    warmup_runs: int
    runs_ms: List[float]
    thread_count: int
    batch: int = 1
    device: str = "cpu"

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.runs_ms))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_ms"] = self.mean_ms
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def bench_latency(model: Model, image_size: int = 256, n_images: int = 10, warmup: int = 5,
                  threads: int = 1, seed: int = 0) -> BenchReport:
    """Time ``n_images`` single-image eval forwards after ``warmup`` untimed ones."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    mode = model.mode
    model.eval()
    rng = np.random.default_rng(seed)
    dtype = next(iter(model.params.values())).data.dtype
    images = [Tensor(rng.random((1, model.config.in_channels, image_size, image_size)).astype(dtype))
              for _ in range(n_images)]
    runs = []
    with threadpool_limits(limits=threads), no_grad():
        for i in range(warmup):
            forward(model, images[i % n_images])
        for x in images:
            t0 = time.perf_counter_ns()
            forward(model, x)
            runs.append((time.perf_counter_ns() - t0) / 1e6)
    model.mode = mode
    return BenchReport(image_size, n_images, warmup, runs, threads)


# ---------------------------------------------------------------- published numbers

# Published efficiency/accuracy figures (network, params in M, CPU inference ms, GFLOPs,
# ISIC F1, ISIC IoU, BUSI F1, BUSI IoU). Swin-UNet has no timing or accuracy entry.
REFERENCE_TABLE = [
    ("UNet", 31.13, 223, 55.84, 84.03, 74.55, 76.35, 63.85),
    ("UNet++", 9.16, 173, 34.65, 84.96, 75.12, 77.54, 64.33),
    ("ResUNet", 62.74, 333, 94.56, 85.60, 75.62, 78.25, 64.89),
    ("MedT", 1.60, 751, 21.24, 87.35, 79.54, 76.93, 63.89),
    ("TransUNet", 105.32, 246, 38.52, 88.91, 80.51, 79.30, 66.92),
    ("Swin-UNet", 41.35, None, 11.46, None, None, None, None),
    ("UNeXt (published)", 1.47, 25, 0.57, 89.70, 81.70, 79.37, 66.95),
]

# Ablation rows: (variant, params M, ms, GFLOPs, F1, IoU)
REFERENCE_ABLATION = [
    ("Conv Stage", 0.88, 9, 0.36, 80.12, 67.75),
    ("Conv Stage + Tok-MLP w/o PE", 1.46, 22, 0.57, 88.78, 79.32),
    ("Conv Stage + Tok-MLP + PE", 1.47, 23, 0.57, 89.25, 80.76),
    ("Conv Stage + Shifted Tok-MLP (W) + PE", 1.47, 24, 0.57, 89.38, 82.01),
    ("Conv Stage + Shifted Tok-MLP (H) + PE", 1.47, 24, 0.57, 89.25, 81.94),
    ("Conv Stage + Shifted Tok-MLP (H+W) + PE", 1.47, 25, 0.57, 90.41, 82.78),
]

# Width variants: (name, params M, ms, GFLOPs)
REFERENCE_WIDTHS = {
    "unext-s": (0.32, 22, 0.10),
    "unext-l": (3.99, 82, 1.42),
    "unext": (1.47, 25, 0.57),
}


@dataclass
class Comparison:
    header: List[str]
    rows: List[list]
    params_ratio_vs_transunet: float
    gflops_ratio_vs_transunet: float
    notes: List[str] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        for note in self.notes:
            buf.write(f"# {note}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        for r in self.rows:
            w.writerow(["" if v is None else v for v in r])
        return buf.getvalue()

    def to_markdown(self) -> str:
        def fmt(v):
            if v is None:
                return "-"
            return f"{v:.4g}" if isinstance(v, float) else str(v)

        lines = ["| " + " | ".join(self.header) + " |", "|" + "---|" * len(self.header)]
        lines += ["| " + " | ".join(fmt(v) for v in r) + " |" for r in self.rows]
        return "\n".join([f"_{n}_" for n in self.notes] + [""] + lines)


def emit_comparison(cost: CostReport, bench: Optional[BenchReport] = None, name: str = "UNeXt (measured)",
                    reference=REFERENCE_TABLE) -> Comparison:
    params_m = cost.params / 1e6
    gflops = cost.gflops_mac_convention
    trans = next(r for r in reference if r[0] == "TransUNet")
    p_ratio = trans[1] / params_m
    g_ratio = trans[3] / gflops
    with_time = bench is not None
    header = ["network", "params_m"] + (["inference_ms"] if with_time else []) + [
        "gflops", "isic_f1", "isic_iou", "busi_f1", "busi_iou", "source"]
    rows = []
    for net, p, ms, g, *acc in reference:
        rows.append([net, p] + ([ms] if with_time else []) + [g] + list(acc) + ["published"])
    rows.append([name, round(params_m, 4)] + ([round(bench.mean_ms, 3)] if with_time else [])
                + [round(gflops, 4), None, None, None, None, "measured"])
    notes = [CONVENTION,
             f"params ratio TransUNet/measured = {p_ratio:.2f}x; GFLOPs ratio = {g_ratio:.2f}x"]
    if with_time:
        notes.append(f"latency: {bench.n_images} images {bench.image_size}x{bench.image_size}, "
                     f"{bench.thread_count} thread(s), batch 1; hardware-specific")
    return Comparison(header, rows, p_ratio, g_ratio, notes)
