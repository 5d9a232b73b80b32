"""Losses and training for the fusion network.

The objective is voxel-wise cross-entropy plus the Lovasz-Softmax
surrogate of the Jaccard loss, evaluated on softmax probabilities of the
splatted channel grid. Gradients flow analytically from the loss through
splatting into the fusion network parameters; Gaussian attributes coming
out of the simulator are constants. The trainer is a deterministic
AdamW loop with linear warmup and cosine decay.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from gsfusion.core import GaussianSet, GridGeometry
from gsfusion.fusion import (
    FusionConfig,
    FusionParams,
    FusionTape,
    _pack_tensors,
    _unpack_tensors,
    fuse_scene,
    fusion_backward,
)
from gsfusion.splat import SplatConfig, _pair_lists, splat, splat_backward


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss."""


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class LossReport:
    ce: float
    lovasz: float
    total: float
    per_class_lovasz: np.ndarray

    def validate(self) -> None:
        if not (np.isfinite(self.ce) and np.isfinite(self.lovasz)
                and np.isfinite(self.total)):
            raise DivergenceError("non-finite loss")


def softmax_probs(channels: np.ndarray) -> np.ndarray:
    """Per-voxel softmax over the class axis (the last one)."""
    ch = np.asarray(channels, dtype=np.float64)
    shifted = ch - np.max(ch, axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=-1, keepdims=True)


def softmax_vjp(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. probabilities back to the channel logits."""
    inner = np.sum(probs * grad_probs, axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


def cross_entropy(probs: np.ndarray, labels: np.ndarray):
    """Mean negative log-probability of the true class.

    Returns (loss, gradient w.r.t. the channel logits), the gradient being
    (probs - onehot) / n_voxels.
    """
    num_classes = probs.shape[-1]
    flat_p = probs.reshape(-1, num_classes)
    flat_l = np.asarray(labels).reshape(-1)
    if np.any((flat_l < 0) | (flat_l >= num_classes)):
        raise ValueError("label out of range")
    n = flat_l.shape[0]
    p_true = flat_p[np.arange(n), flat_l]
    loss = float(np.mean(-np.log(np.maximum(p_true, 1e-300))))
    grad = flat_p.copy()
    grad[np.arange(n), flat_l] -= 1.0
    grad /= n
    return loss, grad.reshape(probs.shape)


def _lovasz_grad_sorted(fg_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Jaccard-loss Lovasz extension along sorted errors."""
    gts = fg_sorted.sum()
    intersection = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jaccard = 1.0 - intersection / union
    out = jaccard.copy()
    out[1:] = jaccard[1:] - jaccard[:-1]
    return out


def lovasz_softmax(probs: np.ndarray, labels: np.ndarray):
    """Lovasz extension of the per-class Jaccard loss, averaged over the
    classes present in `labels`.

    Returns (loss, gradient w.r.t. probs, per-class vector); the vector
    holds zeros for classes absent from the labels. Sort ties are broken
    by voxel index.
    """
    num_classes = probs.shape[-1]
    flat_p = probs.reshape(-1, num_classes)
    flat_l = np.asarray(labels).reshape(-1)
    if flat_l.size == 0:
        raise ValueError("lovasz_softmax needs at least one voxel")
    grad = np.zeros_like(flat_p)
    per_class = np.zeros(num_classes)
    present = np.unique(flat_l)
    for c in present:
        fg = (flat_l == c).astype(np.float64)
        err = np.abs(fg - flat_p[:, c])
        order = np.argsort(-err, kind="stable")
        g = _lovasz_grad_sorted(fg[order])
        per_class[c] = float(err[order] @ g)
        back = np.zeros_like(err)
        back[order] = g
        grad[:, c] = back * (1.0 - 2.0 * fg)
    loss = float(per_class[present].mean())
    grad /= present.size
    return loss, grad.reshape(probs.shape), per_class


def total_loss(channels: np.ndarray, labels: np.ndarray):
    """Cross-entropy plus Lovasz-Softmax on softmaxed channels.

    Returns (LossReport, gradient w.r.t. channels).
    """
    probs = softmax_probs(channels)
    ce, grad_ce = cross_entropy(probs, labels)
    lov, grad_lov_p, per_class = lovasz_softmax(probs, labels)
    grad = grad_ce + softmax_vjp(probs, grad_lov_p)
    report = LossReport(ce=ce, lovasz=lov, total=ce + lov, per_class_lovasz=per_class)
    return report, grad


def backward_fusion(tape: FusionTape | None,
                    grad_fused: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Parameter gradients from a recorded fusion forward pass."""
    if tape is None:
        raise RuntimeError("fusion forward pass was not recorded")
    return fusion_backward(tape, grad_fused)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 300
    warmup_steps: int = 50
    peak_lr: float = 2e-4
    weight_decay: float = 0.01
    batch: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.peak_lr < 0:
            raise ValueError("peak_lr must be non-negative")
        if self.batch < 1:
            raise ValueError("batch must be at least 1")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to peak_lr, then cosine decay to zero."""
    if cfg.steps == 0:
        return 0.0
    if step < cfg.warmup_steps:
        return cfg.peak_lr * (step + 1) / max(cfg.warmup_steps, 1)
    span = max(cfg.steps - cfg.warmup_steps, 1)
    t = (step - cfg.warmup_steps) / span
    return cfg.peak_lr * 0.5 * (1.0 + np.cos(np.pi * t))


class AdamW:
    """Decoupled weight-decay Adam over a dict of parameter arrays.

    Updates in place; `step` takes the gradient dict and the learning rate
    for this step.
    """

    def __init__(self, params: dict[str, np.ndarray], weight_decay: float = 0.01,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            mhat = self.m[k] / b1c
            vhat = self.v[k] / b2c
            p -= lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p)


# ---------------------------------------------------------------------------
# training data and loops
# ---------------------------------------------------------------------------

@dataclass
class TrainExample:
    """One scene from the ego agent's point of view.

    fusion_input: the set the fusion network refines (the stacked ego +
    received set, mirroring the learned episode path); received: the
    neighbor pool; fixed: constant Gaussians splatted alongside (the
    empty-space prior), exempt from fusion and gradients.
    """

    fusion_input: GaussianSet
    received: list[GaussianSet]
    fixed: GaussianSet
    gt_labels: np.ndarray
    geometry: GridGeometry


def scene_loss_and_grads(example: TrainExample, fusion_cfg: FusionConfig,
                         splat_cfg: SplatConfig, params: FusionParams,
                         want_grads: bool = True):
    """Forward pass of one scene and, optionally, parameter gradients."""
    fused, tape = fuse_scene(example.fusion_input, example.received,
                             fusion_cfg, params, record=True)
    full = GaussianSet.concat([fused, example.fixed])
    pairs = _pair_lists(full, example.geometry, splat_cfg)
    channels = splat(full, example.geometry, splat_cfg, pairs=pairs).channels
    report, grad_ch = total_loss(channels, example.gt_labels)
    if not want_grads:
        return report, None
    if tape is None:
        grads = {k: np.zeros_like(v) for k, v in params.as_dict().items()}
        return report, grads
    field_grads = splat_backward(full, example.geometry, splat_cfg, grad_ch, pairs=pairs)
    n = len(fused)
    sliced = {k: v[:n] for k, v in field_grads.items()}
    return report, backward_fusion(tape, sliced)


def train(params0: FusionParams, dataset: list[TrainExample], cfg: TrainConfig,
          fusion_cfg: FusionConfig | None = None,
          splat_cfg: SplatConfig | None = None,
          log_every: int = 0):
    """AdamW training of the fusion network on fixed synthetic scenes.

    Deterministic given cfg.seed. Returns (trained params, curve) where
    curve rows are (step, ce, lovasz, total) averaged over the batch.
    Raises DivergenceError on a non-finite loss.
    """
    if not dataset:
        raise ValueError("empty training dataset")
    fusion_cfg = fusion_cfg or FusionConfig()
    splat_cfg = splat_cfg or SplatConfig()
    params = params0.copy()
    opt = AdamW(params.as_dict(), weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7E41]))
    curve = []
    for step in range(cfg.steps):
        take = min(cfg.batch, len(dataset))
        idx = rng.choice(len(dataset), size=take, replace=False)
        mean_grads = {k: np.zeros_like(v) for k, v in params.as_dict().items()}
        ce = lov = tot = 0.0
        for i in idx:
            report, grads = scene_loss_and_grads(dataset[i], fusion_cfg, splat_cfg, params)
            report.validate()
            ce += report.ce / take
            lov += report.lovasz / take
            tot += report.total / take
            for k in mean_grads:
                mean_grads[k] += grads[k] / take
        if not np.isfinite(tot):
            raise DivergenceError(f"loss diverged at step {step}")
        opt.step(mean_grads, lr_at(step, cfg))
        for k, v in params.as_dict().items():
            if not np.all(np.isfinite(v)):
                raise DivergenceError(f"parameter {k} became non-finite at step {step}")
        curve.append((step, ce, lov, tot))
        if log_every and step % log_every == 0:
            print(f"step {step:4d}  lr {lr_at(step, cfg):.2e}  "
                  f"ce {ce:.4f}  lovasz {lov:.4f}  total {tot:.4f}")
    return params, curve


# ---------------------------------------------------------------------------
# naive-mode per-class channel calibration
# ---------------------------------------------------------------------------

@dataclass
class Calibration:
    """Per-class multiplicative channel gains; exp(0) = exact identity."""

    log_gain: np.ndarray

    def __post_init__(self):
        self.log_gain = np.asarray(self.log_gain, dtype=np.float64).reshape(-1)

    @staticmethod
    def identity(num_classes: int) -> "Calibration":
        return Calibration(np.zeros(num_classes))

    def apply(self, channels: np.ndarray) -> np.ndarray:
        return channels * np.exp(self.log_gain)

    def copy(self) -> "Calibration":
        return Calibration(self.log_gain.copy())


def save_calibration(cal: Calibration, path) -> None:
    with open(path, "wb") as f:
        f.write(_pack_tensors([cal.log_gain]))


def load_calibration(path) -> Calibration:
    with open(path, "rb") as f:
        tensors = _unpack_tensors(f.read())
    if len(tensors) != 1:
        raise ValueError(f"expected 1 tensor for Calibration, found {len(tensors)}")
    return Calibration(tensors[0][:, 0])


def train_calibration(cal0: Calibration, channel_examples: list[tuple[np.ndarray, np.ndarray]],
                      cfg: TrainConfig):
    """Train the per-class gains on precomputed (channels, labels) pairs.

    The stacked channels are constant in naive mode, so each step only
    recalibrates and re-evaluates the loss.
    """
    if not channel_examples:
        raise ValueError("empty training dataset")
    cal = cal0.copy()
    opt = AdamW({"log_gain": cal.log_gain}, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7E42]))
    curve = []
    for step in range(cfg.steps):
        take = min(cfg.batch, len(channel_examples))
        idx = rng.choice(len(channel_examples), size=take, replace=False)
        grad = np.zeros_like(cal.log_gain)
        ce = lov = tot = 0.0
        gain = np.exp(cal.log_gain)
        for i in idx:
            channels, labels = channel_examples[i]
            report, grad_ch = total_loss(channels * gain, labels)
            report.validate()
            ce += report.ce / take
            lov += report.lovasz / take
            tot += report.total / take
            grad += np.sum(grad_ch * channels, axis=tuple(range(channels.ndim - 1))) * gain / take
        if not np.isfinite(tot):
            raise DivergenceError(f"loss diverged at step {step}")
        opt.step({"log_gain": grad}, lr_at(step, cfg))
        if not np.all(np.isfinite(cal.log_gain)):
            raise DivergenceError(f"calibration became non-finite at step {step}")
        curve.append((step, ce, lov, tot))
    return cal, curve


def write_loss_curve(path, curve) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "ce", "lovasz", "total"])
        for row in curve:
            writer.writerow([row[0], f"{row[1]:.10g}", f"{row[2]:.10g}", f"{row[3]:.10g}"])
