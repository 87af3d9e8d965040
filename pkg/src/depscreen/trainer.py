"""Staged fine-tuning: LR range test, SGDR, activation cache, TTA.

``fine_tune`` runs the full procedure::

    freeze body, build activation cache (unaugmented)
    LR range test on the head
    head epochs on cached features
    head epochs with augmentation (full forwards through the frozen body)
    unfreeze, discriminative group rates
    LR range test on the whole network
    SGDR with growing cycles until validation loss turns up
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import AugmentSpec, ImageSet, augment, augment_array
from .dsp import ImageTensor
from .errors import BodyNotFrozen, DivergedImmediately, EmptySplit, NoDescent
from .nn.layers import cross_entropy, softmax
from .nn.model import BODY_GROUPS, HEAD_GROUP, HeadView, Model

log = logging.getLogger(__name__)


# -- SGDR ---------------------------------------------------------------------


@dataclass(frozen=True)
class SgdrSchedule:
    lr_max: float
    lr_min: float | None = None
    cycle_len: int = 1
    cycle_mult: int = 2
    steps_per_epoch: int = 1

    def __post_init__(self):
        if self.lr_min is None:
            object.__setattr__(self, "lr_min", self.lr_max / 100.0)
        if not self.lr_max > self.lr_min >= 0:
            raise ValueError(f"need lr_max > lr_min >= 0, got {self.lr_max}, {self.lr_min}")
        if self.cycle_len < 1 or self.cycle_mult < 1 or self.steps_per_epoch < 1:
            raise ValueError("cycle_len, cycle_mult and steps_per_epoch must be >= 1")

    def cycle_epochs(self, i: int) -> int:
        return self.cycle_len * self.cycle_mult ** i

    def restart_epochs(self, n_cycles: int) -> list[int]:
        """Cumulative epochs at which cycles 0..n_cycles-1 start."""
        out, acc = [], 0
        for i in range(n_cycles):
            out.append(acc)
            acc += self.cycle_epochs(i)
        return out

    def epochs_for_cycles(self, n_cycles: int) -> int:
        return sum(self.cycle_epochs(i) for i in range(n_cycles))


def cosine_annealed(t: float, period: float, lr_max: float, lr_min: float) -> float:
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / period))


def sgdr_position(step: int, schedule: SgdrSchedule) -> tuple[int, float, int]:
    """``(cycle index, epochs into the cycle, cycle length in epochs)``.

    Integer step arithmetic keeps restart boundaries exact.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    spe = schedule.steps_per_epoch
    i, start = 0, 0
    while True:
        length = schedule.cycle_epochs(i) * spe
        if step < start + length:
            return i, (step - start) / spe, schedule.cycle_epochs(i)
        start += length
        i += 1


def sgdr_lr(step: int, schedule: SgdrSchedule) -> float:
    _, t, period = sgdr_position(step, schedule)
    return cosine_annealed(t, period, schedule.lr_max, schedule.lr_min)


# -- batching -------------------------------------------------------------------


def batch_indices(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def endless_batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        yield from batch_indices(n, batch_size, rng)


def _augment_batch(x: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    draws = rng.integers(1, 2**31 - 1, size=x.shape[0])
    return np.stack([augment_array(img, spec, int(d), channels_first=True) for img, d in zip(x, draws)])


# -- LR range test ------------------------------------------------------------


@dataclass
class LrCurve:
    points: list  # (lr, smoothed_loss)
    raw_losses: list = field(default_factory=list)

    @property
    def lrs(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def losses(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    def to_csv(self, path) -> None:
        lines = ["lr,smoothed_loss,raw_loss"]
        for (lr, sm), raw in zip(self.points, self.raw_losses):
            lines.append(f"{lr:.10g},{sm:.10g},{raw:.10g}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def lr_find(
    model,
    inputs,
    labels,
    lr_start: float = 1e-7,
    lr_end: float = 10.0,
    iters: int = 100,
    batch_size: int = 16,
    seed: int = 0,
    momentum: float = 0.9,
    beta: float = 0.98,
) -> LrCurve:
    """Geometric learning-rate sweep recording bias-corrected EMA loss.

    ``model`` is anything with ``loss_and_grads``, ``sgd_step``,
    ``snapshot`` and ``restore``. Its state is restored before returning.
    The sweep stops early once the smoothed loss exceeds four times its
    minimum.
    """
    if iters < 2:
        raise ValueError("iters must be >= 2")
    state = model.snapshot()
    if hasattr(model, "reset_momentum"):
        model.reset_momentum()
    rng = np.random.default_rng(seed)
    batches = endless_batches(len(inputs), batch_size, rng)
    ratio = lr_end / lr_start
    avg, best = 0.0, math.inf
    curve = LrCurve([], [])
    try:
        for i in range(iters):
            lr = lr_start * ratio ** (i / (iters - 1))
            idx = next(batches)
            loss, grads = model.loss_and_grads(inputs[idx], labels[idx])
            if not math.isfinite(loss):
                if i == 0:
                    raise DivergedImmediately(f"loss is {loss} on the first step")
                break
            avg = beta * avg + (1.0 - beta) * loss
            smoothed = avg / (1.0 - beta ** (i + 1))
            curve.points.append((lr, smoothed))
            curve.raw_losses.append(loss)
            best = min(best, smoothed)
            if smoothed > 4.0 * best:
                break
            model.sgd_step(grads, lr, None, momentum)
    finally:
        model.restore(state)
    return curve


def suggest_lr(curve: LrCurve) -> float:
    """Steepest descent point of the smoothed curve, divided by ten.

    Clamped to ``[first lr, lr at the loss minimum]``. The first tenth of
    the sweep is ignored when locating the steepest point: the EMA is still
    warming up there and its slope is noise.
    """
    if len(curve.points) < 10:
        raise ValueError(f"need at least 10 curve points, got {len(curve.points)}")
    lrs, losses = curve.lrs, curve.losses
    slopes = np.gradient(losses, np.log10(lrs))
    skip = len(lrs) // 10
    i = skip + int(np.argmin(slopes[skip:]))
    if slopes[i] >= 0 or np.all(np.diff(losses) >= 0):
        raise NoDescent("loss never decreases over the sweep")
    lr = lrs[i] / 10.0
    return float(min(max(lr, lrs[0]), lrs[int(np.argmin(losses))]))


# -- activation cache ---------------------------------------------------------


@dataclass
class FeatureCache:
    ids: list
    matrix: np.ndarray  # (N, C) pooled features, row order = ids
    body_hash: str

    @property
    def features(self) -> dict:
        return {i: row for i, row in zip(self.ids, self.matrix)}

    def is_valid(self, model: Model) -> bool:
        return model.body_hash() == self.body_hash


def cache_activations(model: Model, data: ImageSet, batch_size: int = 32) -> FeatureCache:
    """Eval-mode pooled features of ``data`` through the frozen body."""
    if not all(model.groups[g].frozen for g in BODY_GROUPS):
        raise BodyNotFrozen("freeze groups 0 and 1 before caching activations")
    chunks = [
        model.features(data.images[lo:lo + batch_size])
        for lo in range(0, len(data), batch_size)
    ]
    ids = data.ids or [str(i) for i in range(len(data))]
    return FeatureCache(list(ids), np.concatenate(chunks), model.body_hash())


# -- evaluation ---------------------------------------------------------------


def predict_proba(model: Model, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    out = [
        softmax(model.forward(images[lo:lo + batch_size]).astype(np.float64))
        for lo in range(0, images.shape[0], batch_size)
    ]
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


def evaluate(model: Model, data: ImageSet, batch_size: int = 32) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) in eval mode."""
    logits = np.concatenate(
        [model.forward(data.images[lo:lo + batch_size]) for lo in range(0, len(data), batch_size)]
    ).astype(np.float64)
    loss, _ = cross_entropy(logits, data.labels)
    acc = float(np.mean(logits.argmax(axis=1) == data.labels))
    return loss, acc


def predict(model: Model, image: ImageTensor) -> np.ndarray:
    """Class probabilities for one image."""
    logits = model.forward(image.chw(model.dtype)[None])
    return softmax(logits.astype(np.float64))[0]


def predict_tta(model: Model, image: ImageTensor, spec: AugmentSpec = AugmentSpec(), k: int = 4) -> np.ndarray:
    """Mean of ``predict`` over the original image and draws 1..k."""
    if k < 0:
        raise ValueError("k must be >= 0")
    probs = [predict(model, image)]
    probs += [predict(model, augment(image, spec, d)) for d in range(1, k + 1)]
    return np.mean(probs, axis=0)


# -- proxy pretraining ----------------------------------------------------------


PROXY_CLASSES = 4


def proxy_images(n: int, size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Oriented sinusoidal gratings in noise; label = orientation (0/45/90/135 deg)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    labels = rng.integers(0, PROXY_CLASSES, size=n)
    out = np.empty((n, 3, size, size), dtype=np.float32)
    for i, lab in enumerate(labels):
        theta = np.pi * lab / PROXY_CLASSES + rng.normal(0, 0.05)
        freq = rng.uniform(4, 24)
        u = xx * np.cos(theta) + yy * np.sin(theta)
        img = 0.5 + 0.35 * np.sin(2 * np.pi * freq * u + rng.uniform(0, 2 * np.pi))
        img += rng.normal(0, 0.1, size=img.shape)
        out[i] = np.clip(img, 0, 1)[None]
    return out, labels


def pretrain_proxy(
    config,
    seed: int = 0,
    n_images: int = 192,
    epochs: int = 3,
    lr: float = 0.05,
    batch_size: int = 16,
    momentum: float = 0.9,
) -> tuple[Model, list[float]]:
    """Stand-in for an ImageNet start: train on gratings, then swap the head.

    Returns a model whose body carries trained filters and running
    statistics and whose head is a fresh ``config.num_classes`` layer.
    """
    from dataclasses import replace as dc_replace

    proxy_cfg = dc_replace(config, num_classes=PROXY_CLASSES,
                           stage_blocks=list(config.stage_blocks),
                           stage_channels=list(config.stage_channels))
    model = Model(proxy_cfg, seed)
    losses = []
    if epochs > 0 and n_images > 0:
        x, y = proxy_images(n_images, config.input_size, seed + 1)
        schedule = SgdrSchedule(lr, cycle_len=epochs, cycle_mult=1,
                                steps_per_epoch=math.ceil(n_images / batch_size))
        rng = np.random.default_rng([seed, 17])
        losses = list(run_epochs(model, x, y, schedule, epochs, batch_size, rng, momentum))
    model.replace_head(config.num_classes, seed + 2)
    model.reset_momentum()
    return model, losses


# -- training -----------------------------------------------------------------


@dataclass
class TrainPlan:
    head_lr: float | None = 0.01
    body_lr: float | None = None
    disc_factor: float = 10.0
    head_epochs_cached: int = 2
    head_epochs_aug: int = 3
    cycle_len: int = 1
    cycle_mult: int = 2
    batch_size: int = 16
    seed: int = 0
    overfit_patience: int = 2
    max_cycles: int = 10
    momentum: float = 0.9
    lr_find_iters: int = 100
    augment: AugmentSpec = field(default_factory=AugmentSpec)

    def __post_init__(self):
        if not 3.0 <= self.disc_factor <= 10.0:
            raise ValueError(f"disc_factor must be in [3, 10], got {self.disc_factor}")
        if self.batch_size < 1 or self.max_cycles < 1 or self.overfit_patience < 1:
            raise ValueError("batch_size, max_cycles and overfit_patience must be >= 1")

    def group_scales(self) -> tuple[float, float, float]:
        d = self.disc_factor
        return (1.0 / d**2, 1.0 / d, 1.0)


@dataclass
class EpochRecord:
    stage: str
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    lr_trace: list = field(default_factory=list)  # (stage, step, lr)
    schedules: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    chosen_lr: dict = field(default_factory=dict)
    best_val_loss: float = math.inf
    best_epoch: int = -1
    stop_reason: str = ""

    def to_csv(self, path) -> None:
        lines = ["epoch,stage,train_loss,val_loss,val_acc"]
        for i, e in enumerate(self.epochs):
            lines.append(f"{i},{e.stage},{e.train_loss:.8f},{e.val_loss:.8f},{e.val_acc:.6f}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    def lr_trace_csv(self, path) -> None:
        lines = ["step,stage,lr"] + [
            f"{i},{stage},{lr:.12g}" for i, (stage, _, lr) in enumerate(self.lr_trace)
        ]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def run_epochs(
    trainable,
    inputs,
    labels,
    schedule: SgdrSchedule,
    n_epochs: int,
    batch_size: int,
    rng: np.random.Generator,
    momentum: float = 0.9,
    augment_spec: AugmentSpec | None = None,
    trace: list | None = None,
    stage: str = "",
    start_step: int = 0,
):
    """Train ``n_epochs`` with SGDR; yields the mean train loss per epoch."""
    step = start_step
    for _ in range(n_epochs):
        total, count = 0.0, 0
        for idx in batch_indices(len(inputs), batch_size, rng):
            xb = inputs[idx]
            if augment_spec is not None:
                xb = _augment_batch(xb, augment_spec, rng)
            lr = sgdr_lr(step, schedule)
            if trace is not None:
                trace.append((stage, step, lr))
            loss, grads = trainable.loss_and_grads(xb, labels[idx])
            trainable.sgd_step(grads, lr, None, momentum)
            total += loss * len(idx)
            count += len(idx)
            step += 1
        yield total / count


def train_head(
    model: Model,
    train: ImageSet,
    lr_max: float,
    n_epochs: int,
    batch_size: int = 16,
    seed: int = 0,
    momentum: float = 0.9,
    cache: FeatureCache | None = None,
    augment_spec: AugmentSpec | None = None,
    trace: list | None = None,
    stage: str = "head",
    on_epoch=None,
) -> list[float]:
    """Head-only epochs (cycle_len 1), from cached features when ``cache`` is given.

    ``on_epoch(train_loss)`` runs after every epoch.
    """
    if not all(model.groups[g].frozen for g in BODY_GROUPS):
        raise BodyNotFrozen("head training needs groups 0 and 1 frozen")
    if cache is not None:
        if not cache.is_valid(model):
            raise BodyNotFrozen("feature cache is stale for this model body")
        trainable, inputs = HeadView(model), cache.matrix
    else:
        trainable, inputs = model, train.images
    schedule = SgdrSchedule(lr_max, cycle_len=1, cycle_mult=1,
                            steps_per_epoch=math.ceil(len(train) / batch_size))
    model.reset_momentum()
    rng = np.random.default_rng(seed)
    losses = []
    for tl in run_epochs(trainable, inputs, train.labels, schedule, n_epochs, batch_size,
                         rng, momentum, augment_spec, trace, stage):
        losses.append(tl)
        if on_epoch is not None:
            on_epoch(tl)
    return losses


def fine_tune(model: Model, train: ImageSet, val: ImageSet, plan: TrainPlan = TrainPlan(), callback=None):
    """Run the staged procedure; returns ``(model, history)``.

    ``model`` is updated in place and ends holding the parameters with the
    lowest validation loss seen at a cycle boundary. ``callback(stage,
    model)`` is invoked after each stage.
    """
    if len(train) == 0 or len(val) == 0:
        raise EmptySplit("training and validation sets must both be non-empty")
    hist = TrainHistory()
    spe = math.ceil(len(train) / plan.batch_size)
    aug = plan.augment
    notify = callback or (lambda stage, m: None)

    def record(stage, train_loss):
        vl, va = evaluate(model, val)
        hist.epochs.append(EpochRecord(stage, len(hist.epochs), train_loss, vl, va))
        log.info("%s epoch %d: train %.4f val %.4f acc %.3f", stage, len(hist.epochs) - 1, train_loss, vl, va)
        return vl

    # freeze the body, then cache its features; augmentation cannot be cached
    model.set_frozen(BODY_GROUPS, True)
    model.set_frozen([HEAD_GROUP], False)
    model.set_lr_scales((1.0, 1.0, 1.0))
    cache = cache_activations(model, train)
    notify("freeze", model)

    head_lr = plan.head_lr
    if plan.lr_find_iters:
        curve = lr_find(HeadView(model), cache.matrix, train.labels, iters=plan.lr_find_iters,
                        batch_size=plan.batch_size, seed=plan.seed, momentum=plan.momentum)
        hist.curves["head"] = curve
        if head_lr is None:
            head_lr = suggest_lr(curve)
    if head_lr is None:
        raise ValueError("head_lr is None and lr_find_iters is 0")
    hist.chosen_lr["head"] = head_lr

    for stage, epochs, use_cache, spec, offset in (
        ("head_cached", plan.head_epochs_cached, True, None, 1),
        ("head_aug", plan.head_epochs_aug, False, aug, 2),
    ):
        if epochs <= 0:
            continue
        hist.schedules[stage] = SgdrSchedule(head_lr, cycle_len=1, cycle_mult=1, steps_per_epoch=spe)
        train_head(model, train, head_lr, epochs, plan.batch_size, plan.seed + offset,
                   plan.momentum, cache if use_cache else None, spec, hist.lr_trace, stage,
                   on_epoch=lambda tl, stage=stage: record(stage, tl))
        notify(stage, model)

    # unfreeze with discriminative rates
    model.set_frozen(range(3), False)
    model.set_lr_scales(plan.group_scales())
    body_lr = plan.body_lr if plan.body_lr is not None else head_lr
    if plan.lr_find_iters:
        curve = lr_find(model, train.images, train.labels, iters=plan.lr_find_iters,
                        batch_size=plan.batch_size, seed=plan.seed + 3, momentum=plan.momentum)
        hist.curves["full"] = curve
        if plan.body_lr is None:
            body_lr = suggest_lr(curve)
    hist.chosen_lr["full"] = body_lr
    notify("unfreeze", model)

    schedule = SgdrSchedule(body_lr, cycle_len=plan.cycle_len, cycle_mult=plan.cycle_mult,
                            steps_per_epoch=spe)
    hist.schedules["sgdr"] = schedule
    best_loss, _ = evaluate(model, val)
    best_state, hist.best_epoch = model.snapshot(), len(hist.epochs) - 1
    model.reset_momentum()
    rng = np.random.default_rng([plan.seed, 9])
    step, streak = 0, 0
    hist.stop_reason = f"cycle cap ({plan.max_cycles})"
    for cycle in range(plan.max_cycles):
        n_ep = schedule.cycle_epochs(cycle)
        vl = math.inf
        for tl in run_epochs(model, train.images, train.labels, schedule, n_ep, plan.batch_size,
                             rng, plan.momentum, aug, hist.lr_trace, "sgdr", step):
            vl = record("sgdr", tl)
        step += n_ep * spe
        if not math.isfinite(vl):
            hist.stop_reason = "non-finite validation loss"
            break
        if vl < best_loss:
            best_loss, best_state, hist.best_epoch = vl, model.snapshot(), len(hist.epochs) - 1
        streak = streak + 1 if vl > best_loss * 1.01 else 0
        if streak >= plan.overfit_patience:
            hist.stop_reason = f"overfit after cycle {cycle}"
            break
    model.restore(best_state)
    hist.best_val_loss = best_loss
    notify("sgdr", model)
    return model, hist
