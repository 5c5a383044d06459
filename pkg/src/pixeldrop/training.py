"""Training loop, objectives and plain accuracy evaluation.

Every image gets a fresh drop mask each epoch, keyed by (seed, image id,
epoch), so runs replay exactly regardless of batch composition. Besides the
standard cross-entropy on subsampled images there are two dual objectives
that add a uniform-distribution target: variant "originals" pushes the
unmasked image toward uniform probabilities, variant "noisy" does the same
for a sign-noise-perturbed twin that shares the image's mask.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import records_to_arrays
from .masking import DropPolicy, Mask, apply_mask, draw_rate, sample_mask
from .models import checkpoint_from_model
from .rng import rng_for

OBJECTIVES = ("standard", "dual_uniform_originals", "dual_uniform_noisy")
METRICS_FIELDS = ("epoch", "train_loss", "val_acc_clean", "val_acc_drop90")


def default_schedule(epochs):
    """Piecewise-constant steps: 0.1, then /10 at 50% and 75% of the run."""
    sched = [(0, 0.1)]
    if epochs >= 4:
        sched.append((epochs // 2, 0.01))
        sched.append((3 * epochs // 4, 0.001))
    return sched


@dataclass
class TrainConfig:
    """Hyperparameters and objective selection for one training run."""

    epochs: int = 8
    batch_size: int = 64
    schedule: list = None          # [(first epoch, lr), ...], increasing
    momentum: float = 0.9
    weight_decay: float = 1e-4
    policy: DropPolicy = field(default_factory=DropPolicy)
    objective: str = "standard"
    dual_weight: float = 1.0
    noise_eps: float = 16.0 / 255.0
    seed: int = 0

    def __post_init__(self):
        if self.schedule is None:
            self.schedule = default_schedule(self.epochs)
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if not self.schedule or self.schedule[0][0] != 0:
            raise ValueError("schedule must start at epoch 0")
        starts = [e for e, _ in self.schedule]
        if starts != sorted(set(starts)):
            raise ValueError(f"schedule epochs must be strictly increasing, got {starts}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}; pick from {OBJECTIVES}")
        # 0 is allowed so the dual losses can be checked to collapse to the
        # standard one; negative weights invert the objective and are refused.
        if self.dual_weight < 0:
            raise ValueError(f"dual weight must be >= 0, got {self.dual_weight}")
        if not 0.0 < self.noise_eps <= 1.0:
            raise ValueError(f"noise amplitude must lie in (0, 1], got {self.noise_eps}")

    def label(self) -> str:
        base = self.policy.label()
        if self.objective == "dual_uniform_originals":
            return base + "+dual-originals"
        if self.objective == "dual_uniform_noisy":
            return base + "+dual-noisy"
        return base

    def lr_at(self, epoch):
        lr = self.schedule[0][1]
        for start, value in self.schedule:
            if epoch >= start:
                lr = value
        return lr


@dataclass
class TrainBatch:
    """One optimizer step's worth of images, labels, masks and twin noise."""

    pixels: np.ndarray      # [N,3,H,W] float32, unmasked
    labels: np.ndarray      # [N] int64
    mask: Mask              # batched bits, same shape as pixels
    noise: np.ndarray = None  # [N,3,H,W] in {-1,+1}, only for the noisy dual


def _assemble_batch(x, y, ids, epoch, config):
    """Draw per-image rates, masks and (if needed) twin noise for a batch."""
    bits = np.empty_like(x)
    rates = np.empty(len(ids), dtype=np.float64)
    for j, image_id in enumerate(ids):
        rate = draw_rate(config.policy, rng_for(config.seed, "rate", image_id, epoch))
        rates[j] = rate
        bits[j] = sample_mask(x.shape[1:], rate,
                              rng_for(config.seed, "mask", image_id, epoch),
                              granularity=config.policy.granularity).bits
    noise = None
    if config.objective == "dual_uniform_noisy":
        noise = np.empty_like(x)
        for j, image_id in enumerate(ids):
            draws = rng_for(config.seed, "noise", image_id, epoch).random(x.shape[1:])
            noise[j] = np.where(draws < 0.5, -1.0, 1.0)
    return TrainBatch(pixels=x, labels=y, mask=Mask(bits=bits, rate=float(rates.mean())),
                      noise=noise)


def _uniform_target(n, c, dtype):
    return np.full((n, c), 1.0 / c, dtype=dtype)


def dual_objective_loss(model, batch: TrainBatch, config: TrainConfig):
    """Subsampled cross-entropy plus a weighted uniform-distribution term.

    Variant "originals": the uniform term sees the unmasked image. Variant
    "noisy": it sees (X + eps*V) * M with V a fresh {-1,+1} field and M the
    same mask as the main term.

    The twin forward normalizes by its own batch statistics but leaves the
    running buffers untouched: the buffers must keep tracking the main
    term's masked inputs, the distribution deployed inference sees, and
    otherwise drift toward the twin's (unmasked originals in variant A) and
    wreck the masked accuracy the main term is training for.
    """
    if config.objective not in ("dual_uniform_originals", "dual_uniform_noisy"):
        raise ValueError(f"not a dual objective: {config.objective!r}")
    x = Tensor(batch.pixels)
    main = ad.cross_entropy(
        model.forward(apply_mask(x, batch.mask), training=True), batch.labels)

    n, c = batch.pixels.shape[0], model.spec.num_classes
    if config.objective == "dual_uniform_originals":
        twin_input = x
    else:
        if batch.noise is None:
            raise ValueError("noisy dual objective needs batch noise")
        noisy = np.clip(batch.pixels + config.noise_eps * batch.noise, -1.0, 1.0)
        twin_input = apply_mask(Tensor(noisy.astype(batch.pixels.dtype)), batch.mask)
    twin = ad.cross_entropy(model.forward(twin_input, training=True,
                                          update_stats=False),
                            _uniform_target(n, c, np.float64))
    return main + twin * config.dual_weight


def batch_loss(model, batch: TrainBatch, config: TrainConfig):
    """Loss for one batch under the configured objective."""
    if config.objective == "standard":
        masked = apply_mask(Tensor(batch.pixels), batch.mask)
        return ad.cross_entropy(model.forward(masked, training=True), batch.labels)
    return dual_objective_loss(model, batch, config)


def train(model, dataset, config: TrainConfig, metrics_path=None, eval_seed=None):
    """Optimize the model in place; returns (Checkpoint, per-epoch metrics).

    Metrics rows carry the epoch's mean train loss plus validation accuracy
    clean and at drop rate 0.9 (one mask per image). A non-finite loss aborts
    with the offending epoch/batch in the message.
    """
    if dataset.num_classes != model.spec.num_classes:
        raise ValueError(
            f"dataset has {dataset.num_classes} classes, model expects "
            f"{model.spec.num_classes}")
    x_all, y_all, ids_all = records_to_arrays(dataset.train)
    if eval_seed is None:
        eval_seed = config.seed

    params = model.parameters()
    velocities = [np.zeros_like(t.data) for _, t in params]
    metrics = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng_for(config.seed, "order", epoch).permutation(len(ids_all))
        losses = []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            batch = _assemble_batch(x_all[idx], y_all[idx], ids_all[idx], epoch, config)
            model.zero_grad()
            try:
                loss = batch_loss(model, batch, config)
                loss.backward()
            except FloatingPointError as exc:
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} batch {b} "
                    f"(image ids {ids_all[idx][:8].tolist()}...)") from exc
            losses.append(float(loss.data) * len(idx))
            ad.sgd_momentum_step(
                [t.data for _, t in params],
                [t.grad for _, t in params],
                velocities, lr, config.momentum, config.weight_decay)
        row = {
            "epoch": epoch,
            "train_loss": sum(losses) / len(order),
            "val_acc_clean": evaluate(model, dataset.validation, 0.0, 1, eval_seed),
            "val_acc_drop90": evaluate(model, dataset.validation, 0.9, 1, eval_seed,
                                       granularity=config.policy.granularity),
        }
        metrics.append(row)

    ckpt = checkpoint_from_model(model, meta={
        "epochs": config.epochs,
        "policy": config.label(),
        "granularity": config.policy.granularity,
        "seed": config.seed,
        "final_val_acc_clean": metrics[-1]["val_acc_clean"],
    })
    if metrics_path is not None:
        write_metrics_csv(metrics_path, metrics)
    return ckpt, metrics


def evaluate(model, records, drop_rate, n_trials=1, seed=0, batch_size=256,
             granularity="element"):
    """Accuracy with one fresh mask per image per trial, averaged over trials.

    Drop rate 0 is the clean accuracy. Masks are keyed (seed, image id,
    trial), matching the mask stream the averaging defense uses for its
    ensemble samples.
    """
    if not records:
        raise ValueError("evaluate needs at least one record")
    if n_trials < 1:
        raise ValueError(f"n_trials must be >= 1, got {n_trials}")
    x_all, y_all, ids_all = records_to_arrays(records)
    correct = 0
    with ad.no_grad():
        for trial in range(n_trials):
            for start in range(0, len(ids_all), batch_size):
                x = x_all[start:start + batch_size]
                y = y_all[start:start + batch_size]
                ids = ids_all[start:start + batch_size]
                if drop_rate > 0:
                    xm = np.empty_like(x)
                    for j, image_id in enumerate(ids):
                        m = sample_mask(x.shape[1:], drop_rate,
                                        rng_for(seed, "eval", image_id, trial),
                                        granularity=granularity)
                        xm[j] = apply_mask(x[j], m)
                else:
                    xm = x
                logits = model.forward(Tensor(xm), training=False)
                correct += int((logits.data.argmax(axis=1) == y).sum())
    return correct / (len(ids_all) * n_trials)


def write_metrics_csv(path, metrics):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
        writer.writeheader()
        for row in metrics:
            writer.writerow({k: row[k] for k in METRICS_FIELDS})
