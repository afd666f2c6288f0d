"""Training loop, plateau schedule, Dice evaluation and cross-validation."""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data_io import stack_samples, write_csv
from .exceptions import ContractViolation, DivergenceError, NonFiniteError
from .mhex import head_loss, deep_supervision_loss
from .models import build_model, forward

logger = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "val_dice", "lr")


@dataclass
class TrainConfig:
    max_epochs: int = 50
    early_stop_patience: int = 10
    lr_reduce_patience: int = 5
    lr: float = 1e-3
    lr_factor: float = 0.5
    batch_size: int = 4
    loss_kind: str = "ce"
    seed: int = 0
    min_delta: float = 1e-6
    dice_smooth: float = 1.0

    def __post_init__(self):
        if self.early_stop_patience < 1 or self.lr_reduce_patience < 1:
            raise ContractViolation("patience values must be >= 1")
        if not self.lr > 0:
            raise ContractViolation("lr must be positive")
        if not 0 < self.lr_factor < 1:
            raise ContractViolation("lr_factor must lie in (0, 1)")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ContractViolation("max_epochs and batch_size must be >= 1")
        if self.loss_kind not in ("ce", "dice"):
            raise ContractViolation(f"loss_kind must be 'ce' or 'dice', got {self.loss_kind!r}")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_dice: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    stop_epoch: int = 0
    best_epoch: int = 0
    lr_reductions: list = field(default_factory=list)

    def rows(self):
        return [
            {"epoch": i + 1, "train_loss": tl, "val_loss": vl, "val_dice": vd, "lr": lr}
            for i, (tl, vl, vd, lr) in enumerate(zip(self.train_loss, self.val_loss, self.val_dice, self.lr))
        ]

    def to_csv(self, path):
        write_csv(path, HISTORY_FIELDS, self.rows())

    def to_dict(self):
        return asdict(self)


class PlateauSchedule:
    """Reduce-on-plateau learning rate plus early stopping on a monitored loss.

    An epoch counts as an improvement when the loss drops more than
    ``min_delta`` below the best so far. After ``lr_patience`` epochs without
    improvement the rate is multiplied by ``factor`` and that counter restarts;
    after ``stop_patience`` such epochs training stops.
    """

    def __init__(self, lr, factor=0.5, lr_patience=5, stop_patience=10, min_delta=1e-6):
        self.lr = lr
        self.factor = factor
        self.lr_patience = lr_patience
        self.stop_patience = stop_patience
        self.min_delta = min_delta
        self.best = np.inf
        self.epoch = 0
        self.wait_lr = 0
        self.wait_stop = 0
        self.reductions = []
        self.should_stop = False

    def step(self, loss):
        """Record one epoch's loss; returns True if it is a new best."""
        self.epoch += 1
        if loss < self.best - self.min_delta:
            self.best = loss
            self.wait_lr = 0
            self.wait_stop = 0
            return True
        self.wait_lr += 1
        self.wait_stop += 1
        if self.wait_lr >= self.lr_patience:
            self.lr *= self.factor
            self.wait_lr = 0
            self.reductions.append(self.epoch)
        if self.wait_stop >= self.stop_patience:
            self.should_stop = True
        return False


class Adam:
    """Adaptive-moment gradient descent over a ``{name: Tensor}`` parameter table."""

    def __init__(self, names, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.names = list(names)
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        updated = {}
        for name in self.names:
            p = params[name].data
            g = grads.get(params[name])
            if g is None:
                g = np.zeros_like(p)
            m = self.m.get(name, 0.0) * self.beta1 + (1.0 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            updated[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return updated


def dice_score(pred_mask, true_mask, c=1):
    """``2|P∩T| / (|P|+|T|)`` for class ``c``; 1 when both are empty."""
    p = np.asarray(pred_mask) == c
    t = np.asarray(true_mask) == c
    if p.shape != t.shape:
        raise ContractViolation(f"mask shapes differ: {p.shape} vs {t.shape}")
    total = np.count_nonzero(p) + np.count_nonzero(t)
    if total == 0:
        return 1.0
    return 2.0 * np.count_nonzero(p & t) / total


def _as_arrays(data):
    if isinstance(data, tuple) and len(data) == 2:
        images, masks = data
        return np.asarray(images, dtype=np.float64), np.asarray(masks, dtype=np.int64)
    if len(data) == 0:
        raise ContractViolation("training and validation sets must be non-empty")
    return stack_samples(data)


def model_loss(model, images, masks, loss_kind="ce", smooth=1.0, overrides=None):
    """Training objective: deep supervision when MHEX+ heads exist, else the final head only."""
    trace = forward(model, images, overrides=overrides)
    if model.with_mhex:
        return deep_supervision_loss(trace.deep_preds, masks, trace.final_logits, loss_kind, smooth=smooth)
    return head_loss(trace.final_logits, masks, loss_kind, smooth)


def predict_masks(model, images, batch_size=16):
    frozen = {k: v.detach() for k, v in model.params.items()}
    out = []
    for start in range(0, len(images), batch_size):
        logits = forward(model, images[start : start + batch_size], overrides=frozen).final_logits
        out.append(logits.data.argmax(axis=1))
    return np.concatenate(out)


def evaluate(model, images, masks, loss_kind="ce", smooth=1.0, batch_size=16):
    """Mean loss (batch-weighted) and mean per-sample foreground Dice."""
    frozen = {k: v.detach() for k, v in model.params.items()}
    k = model.config.class_count
    total, dices = 0.0, []
    for start in range(0, len(images), batch_size):
        x, y = images[start : start + batch_size], masks[start : start + batch_size]
        trace = forward(model, x, overrides=frozen)
        if model.with_mhex:
            loss = deep_supervision_loss(trace.deep_preds, y, trace.final_logits, loss_kind, smooth=smooth)
        else:
            loss = head_loss(trace.final_logits, y, loss_kind, smooth)
        total += loss.item() * len(x)
        pred = trace.final_logits.data.argmax(axis=1)
        for pm, tm in zip(pred, y):
            dices.append(np.mean([dice_score(pm, tm, c) for c in range(1, k)]))
    return total / len(images), float(np.mean(dices))


def train(model, train_set, val_set, cfg=None):
    """Fit ``model`` in place and return ``(model, history)`` with the best-val-loss weights restored.

    Datasets are lists of samples or ``(images, masks)`` array pairs.
    """
    cfg = cfg or TrainConfig()
    x_train, y_train = _as_arrays(train_set)
    x_val, y_val = _as_arrays(val_set)
    if len(x_train) == 0 or len(x_val) == 0:
        raise ContractViolation("training and validation sets must be non-empty")

    rng = np.random.default_rng(cfg.seed)
    schedule = PlateauSchedule(cfg.lr, cfg.lr_factor, cfg.lr_reduce_patience, cfg.early_stop_patience, cfg.min_delta)
    opt = Adam(model.params)
    history = TrainHistory()
    best_state = model.state()

    for epoch in range(1, cfg.max_epochs + 1):
        lr = schedule.lr
        order = rng.permutation(len(x_train))
        running = 0.0
        try:
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                loss = model_loss(model, x_train[idx], y_train[idx], cfg.loss_kind, cfg.dice_smooth)
                grads = T.backward(loss)
                model.set_state(opt.step(model.params, grads, lr))
                running += loss.item() * len(idx)
            val_loss, val_dice = evaluate(model, x_val, y_val, cfg.loss_kind, cfg.dice_smooth)
        except NonFiniteError as exc:
            raise DivergenceError(f"training diverged at epoch {epoch}: {exc}", epoch) from exc
        train_loss = running / len(order)
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.val_dice.append(val_dice)
        history.lr.append(lr)
        logger.info("epoch %d train %.5f val %.5f dice %.4f lr %.2e", epoch, train_loss, val_loss, val_dice, lr)
        if schedule.step(val_loss):
            history.best_epoch = epoch
            best_state = model.state()
        history.stop_epoch = epoch
        if schedule.should_stop:
            break

    history.lr_reductions = list(schedule.reductions)
    model.set_state(best_state)
    return model, history


@dataclass
class CVResult:
    fold_scores: dict
    mean: float
    std: float
    histories: dict = field(default_factory=dict, repr=False)

    def formatted(self):
        return format_score(self.mean, self.std)


def format_score(mean, std):
    """Dice fraction as ``"mm.dd ± s.ss"`` percent."""
    return f"{100 * mean:.2f} ± {100 * std:.2f}"


def split_train_val(ids, every=10):
    """Deterministic validation carve-out: every ``every``-th id."""
    ids = list(ids)
    val = ids[::every]
    train = [i for i in ids if i not in set(val)]
    return train, val


def cross_validate(cfg_model, cfg_train, dataset, plan):
    """Train on ``k-1`` folds and score Dice on the held-out fold, for every fold.

    Early stopping monitors a carve-out of the training folds. Returns the
    per-fold Dice plus mean and sample std.
    """
    by_id = {s.id: s for s in dataset}
    if set(plan.assignments) != set(by_id):
        raise ContractViolation("fold plan does not cover the dataset")
    scores, histories = {}, {}
    for f in range(plan.k):
        held = plan.fold(f)
        rest = sorted(i for i in by_id if plan.assignments[i] != f)
        tr_ids, va_ids = split_train_val(rest)
        model = build_model(cfg_model)
        model, hist = train(model, [by_id[i] for i in tr_ids], [by_id[i] for i in va_ids], cfg_train)
        x, y = stack_samples([by_id[i] for i in sorted(held)])
        pred = predict_masks(model, x)
        k = cfg_model.class_count
        scores[f] = float(np.mean([np.mean([dice_score(p, t, c) for c in range(1, k)]) for p, t in zip(pred, y)]))
        histories[f] = hist
    vals = np.array(list(scores.values()))
    std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return CVResult(scores, float(vals.mean()), std, histories)
