"""Loss, optimizer, schedule, metrics, and the fold-based training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .arch import Model, forward
from .nn import _sigmoid
from .tensor import ContractError, Tensor, _node, backward

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainPlan:
    epochs: int = 400
    batch_size: int = 8
    lr_max: float = 1e-4
    lr_min: float = 1e-5
    seed: int = 0
    folds: int = 3
    split_ratio: float = 0.8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not 0 < self.split_ratio < 1:
            raise ValueError("split_ratio must be in (0, 1)")
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


# Short-run schedule for the 8-sample synthetic set: 200 epochs at lr 1e-4 stall near Dice 0.6.
DESK_PLAN = TrainPlan(epochs=200, batch_size=2, lr_max=1e-3, lr_min=1e-4, folds=1)


@dataclass
class MetricReport:
    f1: float
    iou: float
    fold_f1: List[float] = field(default_factory=list)
    fold_iou: List[float] = field(default_factory=list)
    f1_var: float = 0.0
    iou_var: float = 0.0
    checkpoint_epoch: str = "final"

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- loss


def bce_dice_loss(logits: Tensor, target: Tensor, smooth: float = 1.0) -> Tensor:
    """0.5 * mean BCE + (1 - soft Dice), computed from logits without overflow."""
    z = logits.data
    y = target.data.astype(z.dtype)
    if z.shape != y.shape:
        raise ContractError(f"logits {z.shape} and target {y.shape} differ in shape")
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("target values must be 0 or 1")
    n = z.size
    p = _sigmoid(z)
    softplus = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))
    bce = (softplus - y * z).sum() / n
    inter = (p * y).sum()
    num = 2.0 * inter + smooth
    den = p.sum() + y.sum() + smooth
    loss = 0.5 * bce + 1.0 - num / den

    def bw(g):
        g = g.reshape(())
        dp_dice = -(2.0 * y * den - num) / (den * den)
        gz = g * (0.5 * (p - y) / n + dp_dice * p * (1.0 - p))
        return gz.astype(z.dtype), None

    return _node(np.array([loss], dtype=z.dtype), (logits, target), "bce_dice", bw)


# ---------------------------------------------------------------- metrics


def f1_iou(pred_mask, target) -> Tuple[float, float]:
    p = np.asarray(getattr(pred_mask, "data", pred_mask)) > 0.5
    t = np.asarray(getattr(target, "data", target)) > 0.5
    inter = np.logical_and(p, t).sum()
    union = np.logical_or(p, t).sum()
    total = p.sum() + t.sum()
    if total == 0:
        return 1.0, 1.0
    return float(2.0 * inter / total), float(inter / union)


# ---------------------------------------------------------------- optimizer


class Adam:
    """Bias-corrected Adam over a model's named parameters."""

    def __init__(self, params: Dict[str, Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: Optional[Dict[str, np.ndarray]] = None):
        if grads is None:
            grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        for k, g in grads.items():
            if g.shape != self.params[k].shape:
                raise TrainingError(f"gradient for {k} has shape {g.shape}, parameter {self.params[k].shape}")
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {k}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p = self.params[k]
            p.data -= (self.lr * upd).astype(p.data.dtype)


def adam_step(state: Adam, grads: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
    state.step(grads)
    return state.params


def cosine_lr(epoch: int, plan: TrainPlan) -> float:
    if not 0 <= epoch <= plan.epochs:
        raise ContractError(f"epoch {epoch} outside [0, {plan.epochs}]")
    if plan.epochs == 0:
        return plan.lr_max
    return plan.lr_min + 0.5 * (plan.lr_max - plan.lr_min) * (1.0 + math.cos(math.pi * epoch / plan.epochs))


# ---------------------------------------------------------------- data plumbing


def split_folds(ids: Sequence, plan: TrainPlan) -> List[Tuple[list, list]]:
    """``plan.folds`` independent shuffles, each cut into train/val with the train side floored."""
    ids = [getattr(s, "id", s) for s in ids]
    if len(ids) < 5:
        raise ContractError("need at least 5 samples to split")
    n_train = int(math.floor(plan.split_ratio * len(ids)))
    out = []
    for fold in range(plan.folds):
        rng = np.random.default_rng([plan.seed, fold])
        order = rng.permutation(len(ids))
        shuffled = [ids[i] for i in order]
        out.append((shuffled[:n_train], shuffled[n_train:]))
        log.info("fold %d: %d train / %d val", fold, n_train, len(ids) - n_train)
    return out


def stack(samples) -> Tuple[Tensor, Tensor]:
    return Tensor(np.stack([s.image for s in samples])), Tensor(np.stack([s.mask for s in samples]))


def predict_masks(model: Model, samples, batch_size: int = 8) -> np.ndarray:
    mode = model.mode
    model.eval()
    out = []
    for i in range(0, len(samples), batch_size):
        x, _ = stack(samples[i:i + batch_size])
        out.append(_sigmoid(forward(model, x).data) >= 0.5)
    model.mode = mode
    return np.concatenate(out)


def evaluate(model: Model, samples, batch_size: int = 8) -> Tuple[float, float]:
    """Mean per-image F1 and IoU of thresholded predictions."""
    preds = predict_masks(model, samples, batch_size)
    scores = [f1_iou(p, s.mask) for p, s in zip(preds, samples)]
    return float(np.mean([s[0] for s in scores])), float(np.mean([s[1] for s in scores]))


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_f1: Optional[float] = None
    val_iou: Optional[float] = None


def write_csv(rows: Sequence[EpochLog], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_loss", "val_f1", "val_iou"])
        for r in rows:
            w.writerow([r.epoch, f"{r.lr:.8g}", f"{r.train_loss:.8g}",
                        "" if r.val_f1 is None else f"{r.val_f1:.6f}",
                        "" if r.val_iou is None else f"{r.val_iou:.6f}"])


def train_model(model: Model, samples, plan: TrainPlan, val=None, csv_path=None, eval_every: int = 0) -> List[EpochLog]:
    """Mini-batch Adam on bce_dice_loss with the schedule stepped once per epoch."""
    opt = Adam(model.params, plan.lr_max, plan.beta1, plan.beta2, plan.eps)
    rng = np.random.default_rng([plan.seed, 7])
    history = []
    for epoch in range(plan.epochs):
        opt.lr = cosine_lr(epoch, plan)
        model.train()
        order = rng.permutation(len(samples))
        losses = []
        for i in range(0, len(order), plan.batch_size):
            batch = [samples[j] for j in order[i:i + plan.batch_size]]
            x, y = stack(batch)
            model.zero_grad()
            loss = bce_dice_loss(forward(model, x), y)
            lv = loss.item()
            if not math.isfinite(lv):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            backward(loss)
            opt.step()
            losses.append(lv)
        row = EpochLog(epoch, opt.lr, float(np.mean(losses)))
        if val and eval_every and ((epoch + 1) % eval_every == 0 or epoch == plan.epochs - 1):
            row.val_f1, row.val_iou = evaluate(model, val)
        history.append(row)
        log.debug("epoch %d lr %.3g loss %.5f", epoch, opt.lr, row.train_loss)
    model.eval()
    if csv_path is not None:
        write_csv(history, csv_path)
    return history


def fit(model: Model, dataset, plan: TrainPlan, out_dir=None, eval_every: int = 0) -> Tuple[MetricReport, List[Model]]:
    """Train one copy of ``model`` per fold and report the final-epoch validation F1/IoU."""
    from .checkpoint import save_checkpoint

    if not dataset:
        raise ContractError("dataset is empty")
    by_id = {s.id: s for s in dataset}
    f1s, ious, models = [], [], []
    for fold, (tr, va) in enumerate(split_folds(list(by_id), plan)):
        m = model.copy()
        csv_path = None
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            csv_path = Path(out_dir) / f"fold{fold}_log.csv"
        train_model(m, [by_id[i] for i in tr], plan, [by_id[i] for i in va], csv_path, eval_every)
        f1, iou = evaluate(m, [by_id[i] for i in va])
        log.info("fold %d: val F1 %.4f IoU %.4f", fold, f1, iou)
        f1s.append(f1)
        ious.append(iou)
        models.append(m)
        if out_dir is not None:
            save_checkpoint(m, Path(out_dir) / f"fold{fold}.ckpt")
    report = MetricReport(float(np.mean(f1s)), float(np.mean(ious)), f1s, ious,
                          float(np.var(f1s)), float(np.var(ious)))
    return report, models
