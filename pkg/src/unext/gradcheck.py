"""Finite-difference checks for every differentiable op, the blocks, and the full network.

Each case builds a scalar function of one input (the others held fixed) and returns
the max relative error from :func:`unext.tensor.grad_check`. Tensor-valued outputs are
contracted with a fixed random weight so every output element contributes.
"""
from __future__ import annotations

from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import nn
from .arch import UNeXtConfig, build_model, conv_block, forward, tok_mlp_block
from .tensor import Tensor, add, grad_check, grad_check_report, matmul, mul, neg, permute, precision, reshape, scale, sub, sum_all
from .training import bce_dice_loss

EPS = 1e-4
TOLERANCE = 1e-3
# whole-network step: at 1e-4 one weight nudge moves thousands of BN->ReLU inputs across zero
EPS_FULL = 1e-6


def _contract(out: Tensor, seed: int) -> Tensor:
    r = np.random.default_rng(seed + 10_000).standard_normal(out.shape)
    return sum_all(mul(out, Tensor(r)))


def _away_from_zero(a: np.ndarray, gap: float = 1e-2) -> np.ndarray:
    return np.where(np.abs(a) < gap, np.sign(a + 1e-12) * gap, a)


def _subsample(size: int, rng, k: int = 12) -> Optional[list]:
    return None if size <= k else sorted(rng.choice(size, k, replace=False).tolist())


SKIPPED = {"count": 0}


def _check(fn, x, rng, k=None, kink_guard=False, eps=EPS):
    coords = _subsample(x.size, rng, k) if k else None
    if not kink_guard:
        return grad_check(fn, Tensor(x), eps, coords)
    err, skipped = grad_check_report(fn, Tensor(x), eps, coords, kink_guard=True)
    SKIPPED["count"] += skipped
    return err


def case_matmul(seed):
    rng = np.random.default_rng(seed)
    m, k, n = rng.integers(1, 6, 3)
    a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
    ab = rng.standard_normal((2, m, k))
    return max(
        _check(lambda t: _contract(matmul(t, Tensor(b)), seed), a, rng),
        _check(lambda t: _contract(matmul(Tensor(a), t), seed), b, rng),
        _check(lambda t: _contract(matmul(Tensor(ab), t), seed), b, rng),
    )


def case_ewise(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 4, 4))
    a, b = rng.standard_normal(shape), rng.standard_normal(shape)
    bias = rng.standard_normal(shape[1])
    s = float(rng.standard_normal())
    return max(
        _check(lambda t: _contract(add(t, Tensor(b)), seed), a, rng),
        _check(lambda t: _contract(sub(Tensor(a), t), seed), b, rng),
        _check(lambda t: _contract(mul(t, Tensor(b)), seed), a, rng),
        _check(lambda t: _contract(mul(Tensor(a), t), seed), b, rng),
        _check(lambda t: _contract(add(Tensor(a), t), seed), bias, rng),
        _check(lambda t: _contract(scale(t, s), seed), a, rng),
        _check(lambda t: _contract(neg(t), seed), a, rng),
    )


def case_reshape(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 2, 2))
    return max(
        _check(lambda t: _contract(permute(reshape(t, (2, 3, 4)), (0, 2, 1)), seed), x, rng),
        _check(lambda t: _contract(nn.tokens_to_map(nn.map_to_tokens(t), 2, 2), seed), x, rng),
    )


def _conv_setup(rng):
    n, c, oc = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    h, w = rng.integers(3, 7, 2)
    stride = int(rng.integers(1, 3))
    return (rng.standard_normal((n, c, h, w)), rng.standard_normal((oc, c, 3, 3)),
            rng.standard_normal(oc), stride)


def case_conv2d(seed):
    rng = np.random.default_rng(seed)
    x, w, b, s = _conv_setup(rng)
    run = lambda xx, ww, bb: _contract(nn.conv2d(xx, nn.Conv2dParams(ww, bb, s, 1)), seed)  # noqa: E731
    return max(
        _check(lambda t: run(t, Tensor(w), Tensor(b)), x, rng),
        _check(lambda t: run(Tensor(x), t, Tensor(b)), w, rng),
        _check(lambda t: run(Tensor(x), Tensor(w), t), b, rng),
    )


def case_depthwise(seed):
    rng = np.random.default_rng(seed)
    n, c = rng.integers(1, 3), rng.integers(1, 5)
    h, w = rng.integers(2, 6, 2)
    x, k, b = rng.standard_normal((n, c, h, w)), rng.standard_normal((c, 1, 3, 3)), rng.standard_normal(c)
    run = lambda xx, kk, bb: _contract(nn.depthwise_conv2d(xx, nn.Conv2dParams(kk, bb, 1, 1)), seed)  # noqa: E731
    return max(
        _check(lambda t: run(t, Tensor(k), Tensor(b)), x, rng),
        _check(lambda t: run(Tensor(x), t, Tensor(b)), k, rng),
        _check(lambda t: run(Tensor(x), Tensor(k), t), b, rng),
    )


def case_maxpool(seed):
    rng = np.random.default_rng(seed)
    n, c = rng.integers(1, 3), rng.integers(1, 3)
    h, w = 2 * rng.integers(1, 4, 2)
    # distinct values spaced well beyond the FD step so the argmax never flips
    x = rng.permutation(n * c * h * w).reshape(n, c, h, w) * 0.01
    return _check(lambda t: _contract(nn.maxpool2(t), seed), x.astype(float), rng)


def case_bilinear(seed):
    rng = np.random.default_rng(seed)
    n, c = rng.integers(1, 3), rng.integers(1, 3)
    h, w = rng.integers(1, 6, 2)
    x = rng.standard_normal((n, c, h, w))
    oh, ow = rng.integers(1, 9, 2)
    return max(
        _check(lambda t: _contract(nn.bilinear_up2(t), seed), x, rng),
        _check(lambda t: _contract(nn.bilinear_resize(t, int(oh), int(ow)), seed), x, rng),
    )


def case_batchnorm(seed):
    rng = np.random.default_rng(seed)
    n, c = rng.integers(1, 3), rng.integers(1, 4)
    h, w = rng.integers(2, 5, 2)
    x = rng.standard_normal((n, c, h, w)) * 2 + 0.5
    g, b = rng.standard_normal(c), rng.standard_normal(c)
    rm, rv = rng.standard_normal(c), rng.random(c) + 0.5

    def run(xx, gg, bb, mode):
        p = nn.NormParams(gg, bb, rm.copy(), rv.copy())
        return _contract(nn.batchnorm2d(xx, p, mode), seed)

    errs = []
    for mode in ("train", "eval"):
        errs += [
            _check(lambda t: run(t, Tensor(g), Tensor(b), mode), x, rng),
            _check(lambda t: run(Tensor(x), t, Tensor(b), mode), g, rng),
            _check(lambda t: run(Tensor(x), Tensor(g), t, mode), b, rng),
        ]
    return max(errs)


def case_layernorm(seed):
    rng = np.random.default_rng(seed)
    n, tok, e = rng.integers(1, 3), rng.integers(1, 5), rng.integers(2, 7)
    x = rng.standard_normal((n, tok, e))
    g, b = rng.standard_normal(e), rng.standard_normal(e)
    run = lambda xx, gg, bb: _contract(nn.layernorm_tokens(xx, nn.NormParams(gg, bb)), seed)  # noqa: E731
    return max(
        _check(lambda t: run(t, Tensor(g), Tensor(b)), x, rng),
        _check(lambda t: run(Tensor(x), t, Tensor(b)), g, rng),
        _check(lambda t: run(Tensor(x), Tensor(g), t), b, rng),
    )


def case_activations(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, (3, 4))
    errs = [_check(lambda t: _contract(nn.activation(kind, t), seed), x, rng) for kind in ("gelu", "sigmoid")]
    errs.append(_check(lambda t: _contract(nn.relu(t), seed), _away_from_zero(x), rng))
    return max(errs)


def case_shift(seed):
    rng = np.random.default_rng(seed)
    c, h, w = rng.integers(1, 9), rng.integers(3, 7), rng.integers(3, 7)
    parts = int(rng.integers(1, min(c, 5) + 1))
    offsets = rng.integers(-2, 3, parts).tolist()
    x = rng.standard_normal((1, c, h, w))
    return max(_check(lambda t: _contract(nn.shift_channels(t, ax, parts, offsets), seed), x, rng)
               for ax in ("height", "width"))


def case_linear_tokens(seed):
    rng = np.random.default_rng(seed)
    n, tok, i, o = rng.integers(1, 4, 4)
    x, w, b = rng.standard_normal((n, tok, i)), rng.standard_normal((i, o)), rng.standard_normal(o)
    run = lambda xx, ww, bb: _contract(nn.linear_tokens(xx, ww, bb), seed)  # noqa: E731
    return max(
        _check(lambda t: run(t, Tensor(w), Tensor(b)), x, rng),
        _check(lambda t: run(Tensor(x), t, Tensor(b)), w, rng),
        _check(lambda t: run(Tensor(x), Tensor(w), t), b, rng),
    )


def case_loss(seed):
    rng = np.random.default_rng(seed)
    shape = (int(rng.integers(1, 3)), 1, int(rng.integers(2, 6)), int(rng.integers(2, 6)))
    z = rng.standard_normal(shape) * 3
    y = (rng.random(shape) > 0.5).astype(float)
    return _check(lambda t: bce_dice_loss(t, Tensor(y)), z, rng)


def _param_case(model, run, names, rng, k=6, kink_guard=False, eps=EPS):
    """Check ``run(model)`` w.r.t. a subsample of coordinates of each named parameter."""
    worst = 0.0
    for name in names:
        orig = model.params[name]

        def f(t, name=name):
            model.params[name] = t
            try:
                return run(model)
            finally:
                model.params[name] = orig

        worst = max(worst, _check(f, orig.data, rng, k, kink_guard, eps))
    return worst


TOY_BLOCK = UNeXtConfig(channels=(4, 4, 8, 8, 8), hidden_dim=12, shift_partitions=3, shift_offsets=(-1, 0, 1))


def case_tok_block(seed):
    """Encoder and decoder tokenized blocks on a 1x8x16x16 map."""
    rng = np.random.default_rng(seed)
    model = build_model(TOY_BLOCK, seed, dtype=np.float64)
    x = rng.standard_normal((1, 8, 16, 16))
    errs = []
    for name, direction in (("enc4", "enc"), ("dec4", "dec")):
        run = lambda m, xx=None, name=name, direction=direction: _contract(  # noqa: E731
            tok_mlp_block(m, xx if xx is not None else Tensor(x), name, direction), seed)
        errs.append(_check(lambda t: run(model, t), x, rng, 24))
        names = [k for k in model.params if k.startswith(name + ".")]
        errs.append(_param_case(model, run, names, rng))
    return max(errs)


def case_conv_block(seed):
    rng = np.random.default_rng(seed)
    model = build_model(TOY_BLOCK, seed, dtype=np.float64)
    x = rng.standard_normal((2, 4, 6, 6))
    errs = []
    for name, direction in (("enc2", "enc"), ("dec1", "dec")):
        run = lambda m, xx=None, name=name, direction=direction: _contract(  # noqa: E731
            conv_block(m, xx if xx is not None else Tensor(x), name, direction), seed)
        errs.append(_check(lambda t: run(model, t), x, rng, 24, kink_guard=True))
        names = [k for k in model.params if k.startswith(name + ".")]
        errs.append(_param_case(model, run, names, rng, kink_guard=True))
    return max(errs)


TOY_FULL = UNeXtConfig(channels=(2, 3, 4, 4, 6))


def case_full_model(seed):
    """Whole network + loss; 96x96 is the smallest input whose bottleneck fits the default shifts."""
    rng = np.random.default_rng(seed)
    model = build_model(TOY_FULL, seed, dtype=np.float64)
    x = Tensor(rng.random((1, 3, 96, 96)))
    y = Tensor((rng.random((1, 1, 96, 96)) > 0.5).astype(float))
    run = lambda m: bce_dice_loss(forward(m, x), y)  # noqa: E731
    names = list(rng.choice(list(model.params), 8, replace=False))
    return _param_case(model, run, names, rng, k=3, eps=EPS_FULL)


CASES: Dict[str, Callable[[int], float]] = {
    "matmul": case_matmul,
    "ewise": case_ewise,
    "reshape": case_reshape,
    "conv2d": case_conv2d,
    "depthwise_conv2d": case_depthwise,
    "maxpool2": case_maxpool,
    "bilinear": case_bilinear,
    "batchnorm2d": case_batchnorm,
    "layernorm_tokens": case_layernorm,
    "activation": case_activations,
    "shift_channels": case_shift,
    "linear_tokens": case_linear_tokens,
    "bce_dice_loss": case_loss,
    "conv_block": case_conv_block,
    "tok_mlp_block": case_tok_block,
}


def run_suite(ops: Optional[List[str]] = None, seeds: int = 20, full: bool = False) -> List[Tuple[str, float, bool, int]]:
    """Return (op, worst error over seeds, passed, kink-skipped coordinates) per op."""
    names = ops or list(CASES)
    table = dict(CASES)
    table["full_model"] = case_full_model
    if full and "full_model" not in names:
        names = names + ["full_model"]
    out = []
    with precision(np.float64):
        for name in names:
            if name not in table:
                raise KeyError(f"unknown gradcheck op {name!r}; choose from {sorted(table)}")
            SKIPPED["count"] = 0
            worst = float(max(table[name](s) for s in range(seeds)))
            out.append((name, worst, worst < TOLERANCE, SKIPPED["count"]))
    return out
