"""Training loop, schedule, and evaluation metrics.

A "step" below always means one optimizer update, i.e. one gradient made from
batch_size * grad_accumulation samples. Losses are averaged over the samples
that actually contributed, so a short trailing batch is not over-weighted.
"""

from dataclasses import dataclass, replace
import math

import numpy as np

from . import grad, model


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    epochs: int
    early_stopping_patience: int
    batch_size: int = 8
    grad_accumulation: int = 4
    warmup_ratio: float = 0.1
    early_stopping_threshold: float = 0.0
    seed: int = 0
    backbone_trainable: bool = False
    # optional per-class loss weights; stratified splits keep classes balanced
    # so this stays off by default
    class_weight: tuple = None

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs <= 0:
            raise ValueError("learning_rate and epochs must be positive")
        if self.batch_size <= 0 or self.grad_accumulation <= 0:
            raise ValueError("batch_size and grad_accumulation must be positive")
        if self.early_stopping_patience <= 0:
            raise ValueError("early_stopping_patience must be positive")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1)")


PRESETS = {
    "freeze": TrainConfig(
        learning_rate=1e-3, epochs=10, early_stopping_patience=5,
        backbone_trainable=False),
    "finetune": TrainConfig(
        learning_rate=2.5e-4, epochs=40, early_stopping_patience=8,
        backbone_trainable=True),
}


def learning_rate_at(step: int, total_steps: int, warmup_steps: int,
                     base: float) -> float:
    """Linear warmup to `base` at step == warmup_steps, then linear decay to 0.

    `step` is 1-indexed over optimizer updates.
    """
    if not 1 <= step <= total_steps:
        raise ValueError(f"step {step} outside 1..{total_steps}")
    if warmup_steps > 0 and step <= warmup_steps:
        return base * step / warmup_steps
    if total_steps <= warmup_steps:
        return base
    return base * (total_steps - step) / (total_steps - warmup_steps)


class Adam:
    """Adaptive-moment optimizer; the learning rate is supplied per step."""

    def __init__(self, keys, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: None for k in keys}
        self.v = {k: None for k in keys}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k in self.m:
            g = grads[k]
            if self.m[k] is None:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + self.eps)


# -- metrics -----------------------------------------------------------------

def per_class_recall(truth, pred) -> dict:
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if truth.size == 0 or truth.shape != pred.shape:
        raise ValueError("truth and predictions must be non-empty, same length")
    out = {}
    for c in (0, 1):
        mask = truth == c
        if not mask.any():
            raise ValueError(f"class {c} absent from truth; recall undefined")
        out[c] = float((pred[mask] == c).sum() / mask.sum())
    return out


def uar(truth, pred) -> float:
    """Mean recall over the two classes, blind to class sizes."""
    recalls = per_class_recall(truth, pred)
    return sum(recalls.values()) / len(recalls)


def confusion(truth, pred) -> np.ndarray:
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    out = np.zeros((2, 2), dtype=int)
    for t, p in zip(truth, pred):
        out[int(t), int(p)] += 1
    return out


@dataclass(frozen=True)
class RocCurve:
    points: tuple  # ((fpr, tpr), ...) swept from the highest threshold down


def roc_auc(truth, scores):
    """ROC curve and trapezoidal AUC; ties move along the curve together.

    The trapezoid value equals the pairwise statistic
    P(score_pos > score_neg) + 0.5 * P(score_pos = score_neg).
    """
    truth = np.asarray(truth)
    scores = np.asarray(scores, dtype=np.float64)
    if truth.shape != scores.shape or truth.size == 0:
        raise ValueError("truth and scores must be non-empty, same length")
    n_pos = int((truth == 1).sum())
    n_neg = int((truth == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present to sweep a ROC curve")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    t = truth[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    # trapezoid sum in integer count units, x2: exact, so the value matches
    # pairwise counting bit for bit instead of to rounding error
    area2 = 0
    i = 0
    while i < s.size:
        j = i
        while j < s.size and s[j] == s[i]:
            j += 1
        dtp = int((t[i:j] == 1).sum())
        dfp = int((t[i:j] == 0).sum())
        area2 += dfp * (2 * tp + dtp)
        tp += dtp
        fp += dfp
        points.append((fp / n_neg, tp / n_pos))
        i = j
    return RocCurve(tuple(points)), area2 / (2.0 * n_pos * n_neg)


def case_label(pred_frozen: int, pred_finetuned: int, truth: int) -> str:
    """O: both right. X: both wrong. A: only frozen right. B: only finetuned."""
    frozen_ok = pred_frozen == truth
    finetuned_ok = pred_finetuned == truth
    if frozen_ok and finetuned_ok:
        return "O"
    if frozen_ok:
        return "A"
    if finetuned_ok:
        return "B"
    return "X"


@dataclass(frozen=True)
class Metrics:
    uar: float
    auc: float
    per_class_recall: dict
    confusion: np.ndarray


def evaluate(truth, pred, scores) -> Metrics:
    _, auc = roc_auc(truth, scores)
    return Metrics(uar=uar(truth, pred), auc=auc,
                   per_class_recall=per_class_recall(truth, pred),
                   confusion=confusion(truth, pred))


# -- training ------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict            # best-dev parameters
    history: list           # one dict per epoch: epoch, train_loss, dev_uar, dev_auc, lr
    stopped_by: str         # "early_stopping" or "epoch_cap"
    best_epoch: int
    best_uar: float


def _as_patches(sample, config: model.ModelConfig) -> model.Patches:
    return sample if isinstance(sample, model.Patches) else model.patchify(sample, config)


def predict(params: dict, config: model.ModelConfig, samples) -> np.ndarray:
    """Logit rows for each sample; argmax is the predicted class."""
    out = np.empty((len(samples), config.num_classes))
    for i, (sample, _) in enumerate(samples):
        out[i] = model.forward_patches(_as_patches(sample, config), params, config).logits
    return out


def scores_from_logits(logits: np.ndarray) -> np.ndarray:
    """Ranking score for the positive class: its logit margin."""
    return logits[:, 1] - logits[:, 0]


def _sample_gradients(patches, label, params, config, weight):
    trace = model.forward_patches(patches, params, config)
    tape = trace.tape
    loss_ref = tape.cross_entropy(trace.logits_ref, label)
    if weight != 1.0:
        loss_ref = tape.scale(loss_ref, weight)
    store = grad.backward(tape, loss_ref)
    loss = float(tape.value(loss_ref))
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss}")
    return loss, {k: store[trace.param_refs[k]] for k in params}


def train(params: dict, config: TrainConfig, train_split, dev_split,
          model_config: model.ModelConfig) -> TrainResult:
    """Cross-entropy training with warmup, accumulation, and dev-UAR early stop.

    `train_split` and `dev_split` are sequences of (spectrogram-or-patches,
    label). Parameters passed in are not mutated; the best-dev copy is returned.
    """
    if len(train_split) == 0 or len(dev_split) == 0:
        raise ValueError("training and dev splits must be non-empty")
    if model_config.backbone_trainable != config.backbone_trainable:
        model_config = replace(model_config,
                               backbone_trainable=config.backbone_trainable)
    samples = [(_as_patches(s, model_config), int(label)) for s, label in train_split]
    dev = [(_as_patches(s, model_config), int(label)) for s, label in dev_split]
    dev_truth = np.array([label for _, label in dev])

    params = {k: v.copy() for k, v in params.items()}
    trainable = (list(params) if config.backbone_trainable
                 else list(model.HEAD_KEYS))
    frozen_backbone = {k: params[k].copy() for k in model.backbone_keys(params)}

    per_step = config.batch_size * config.grad_accumulation
    steps_per_epoch = max(1, math.ceil(len(samples) / per_step))
    total_steps = config.epochs * steps_per_epoch
    warmup_steps = int(round(config.warmup_ratio * total_steps))

    optimizer = Adam(trainable)
    rng = np.random.default_rng(config.seed)
    weights = config.class_weight or (1.0, 1.0)

    history = []
    best_uar = None
    best_params = None
    best_epoch = 0
    stale_epochs = 0
    stopped_by = "epoch_cap"
    step = 0

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(samples))
        epoch_loss = 0.0
        lr = 0.0
        for start in range(0, len(samples), per_step):
            chunk = order[start:start + per_step]
            step += 1
            lr = learning_rate_at(step, total_steps, warmup_steps, config.learning_rate)
            acc = {k: np.zeros_like(params[k]) for k in trainable}
            for idx in chunk:
                patches, label = samples[idx]
                try:
                    loss, grads = _sample_gradients(
                        patches, label, params, model_config, weights[label])
                except FloatingPointError as e:
                    raise FloatingPointError(
                        f"epoch {epoch} step {step}: {e}") from e
                epoch_loss += loss
                for k in trainable:
                    acc[k] += grads[k]
            optimizer.step(params, {k: acc[k] / len(chunk) for k in trainable}, lr)

        logits = predict(params, model_config, dev)
        dev_uar = uar(dev_truth, logits.argmax(axis=1))
        _, dev_auc = roc_auc(dev_truth, scores_from_logits(logits))
        history.append({"epoch": epoch, "train_loss": epoch_loss / len(samples),
                        "dev_uar": dev_uar, "dev_auc": dev_auc, "lr": lr})

        if best_uar is None or dev_uar > best_uar + config.early_stopping_threshold:
            best_uar = dev_uar
            best_params = {k: v.copy() for k, v in params.items()}
            best_epoch = epoch
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs >= config.early_stopping_patience:
                stopped_by = "early_stopping"
                break

    if not config.backbone_trainable:
        for k, v in frozen_backbone.items():
            if not np.array_equal(params[k], v):
                raise AssertionError(f"frozen backbone parameter {k} changed")

    return TrainResult(params=best_params, history=history, stopped_by=stopped_by,
                       best_epoch=best_epoch, best_uar=best_uar)
