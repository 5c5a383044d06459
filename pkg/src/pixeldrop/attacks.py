"""Projected gradient descent attacks under L0, L2 and Linf budgets.

An attack maximizes a per-image objective: cross-entropy of the true label
(misclassification), its negation on the target label (targeted), or the
negated margin losses. Margins follow the convention that a *negative*
misclassification margin Z_y - max_{c!=y} Z_c means the attack already
succeeded, so attacks ascend the negated margin.

Gradients can be averaged over random drop masks (the expectation-over-masks
estimator): each sample contributes the gradient of the objective at X*M,
which by the chain rule is itself multiplied by M. Mask streams are keyed by
(seed, image id, iteration, sample), so attacks replay exactly.
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .masking import sample_mask
from .models import write_container
from .rng import rng_for

NORMS = ("l0", "l2", "linf")
LOSSES = ("ce", "cw")
GOALS = ("misclassify", "targeted")

# Per-dataset budgets and step sizes; the L0 budget is a fraction of the
# image's pixel locations and its step touches exactly one location.
ATTACK_DEFAULTS = {
    ("gtsrb", "l2"): {"eps": 512 / 255, "step": 32 / 255, "iterations": 20},
    ("gtsrb", "linf"): {"eps": 32 / 255, "step": 4 / 255, "iterations": 20},
    ("cifar10", "l2"): {"eps": 1.0, "step": 16 / 255, "iterations": 20},
    ("cifar10", "linf"): {"eps": 16 / 255, "step": 2 / 255, "iterations": 20},
    ("gtsrb", "l0"): {"eps": 0.03, "step": 1.0},
    ("cifar10", "l0"): {"eps": 0.03, "step": 1.0},
}
EOT_DEFAULT_SAMPLES = 10


@dataclass
class AttackConfig:
    """One attack configuration: budget geometry, objective, EOT averaging."""

    norm: str = "linf"
    eps: float = 16 / 255          # L0: fraction of pixel locations
    step: float = 2 / 255          # L0: locations per iteration (always 1)
    iterations: int = 20
    loss: str = "ce"
    goal: str = "misclassify"
    target: int = None             # class index for the targeted goal
    eot_samples: int = 0           # 0 = plain gradient, no masking assumed
    eot_drop_rate: float = 0.9
    seed: int = 0
    random_start: bool = False

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}; pick from {NORMS}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; pick from {LOSSES}")
        if self.goal not in GOALS:
            raise ValueError(f"unknown goal {self.goal!r}; pick from {GOALS}")
        if self.eps <= 0:
            raise ValueError(f"budget must be positive, got {self.eps}")
        if self.norm in ("l2", "linf") and self.step > self.eps:
            raise ValueError(f"step {self.step} exceeds budget {self.eps}")
        if self.norm == "linf" and self.step > 2.0:
            raise ValueError(f"step {self.step} larger than the [-1,1] domain")
        if self.iterations < 1:
            raise ValueError(f"need at least one iteration, got {self.iterations}")
        if self.eot_samples < 0:
            raise ValueError(f"eot_samples must be >= 0, got {self.eot_samples}")
        if not 0.0 <= self.eot_drop_rate < 1.0:
            raise ValueError(f"eot drop rate must lie in [0,1), got {self.eot_drop_rate}")
        if self.goal == "targeted" and self.target is None:
            raise ValueError("targeted goal needs a target class")

    def label(self):
        eot = f"+eot{self.eot_samples}" if self.eot_samples else ""
        return f"{self.norm}-{self.loss}-{self.goal}{eot}"


def default_config(dataset: str, norm: str, side: int, **overrides) -> AttackConfig:
    """The registry entry for (dataset, norm), L0 iterations sized to the image."""
    key = (dataset.lower(), norm)
    if key not in ATTACK_DEFAULTS:
        raise ValueError(f"no attack defaults for {key}")
    params = dict(ATTACK_DEFAULTS[key])
    if norm == "l0":
        params["iterations"] = l0_budget_locations(params["eps"], side)
    merged = {"norm": norm, **params, **overrides}
    return AttackConfig(**merged)


def l0_budget_locations(eps_fraction, side):
    """floor(eps * D) whole pixel locations for a side x side image."""
    return max(1, int(np.floor(eps_fraction * side * side)))


@dataclass
class AdversarialResult:
    """Batched attack output; arrays are indexed like the input batch."""

    x_adv: np.ndarray              # [N,3,H,W] in [-1,1]
    achieved_norm: np.ndarray      # [N] (L0 in pixel locations)
    success: np.ndarray            # [N] bool, per the configured goal
    loss_trajectory: np.ndarray    # [iterations, N] objective per image


def cw_loss(logits, y, goal="misclassify", target=None):
    """Margin losses, per image; the attacker drives them negative.

    misclassify: Z_y - max_{c!=y} Z_c (negative iff argmax != y);
    targeted: max_{c!=t} Z_c - Z_t (negative iff argmax == t).
    """
    z = logits if isinstance(logits, Tensor) else Tensor(logits)
    n, c = z.data.shape
    if c < 2:
        raise ValueError(f"margins need at least 2 classes, got {c}")
    if goal == "misclassify":
        pick = np.asarray(y)
    elif goal == "targeted":
        if target is None:
            raise ValueError("targeted margin needs a target class")
        pick = np.broadcast_to(np.asarray(target), (n,))
    else:
        raise ValueError(f"unknown goal {goal!r}")
    onehot = np.zeros((n, c), dtype=z.data.dtype)
    onehot[np.arange(n), pick] = 1.0
    picked = (z * Tensor(onehot)).sum(axis=1)
    # A large finite penalty instead of -inf keeps every value finite.
    others_max = (z - Tensor(onehot * np.asarray(1e9, dtype=z.data.dtype))).max(axis=1)
    if goal == "misclassify":
        return picked - others_max
    return others_max - picked


def attack_objective(logits, y, config: AttackConfig):
    """Per-image quantity the attack ascends, as a [N] tensor."""
    if config.loss == "ce":
        if config.goal == "misclassify":
            return ad.cross_entropy(logits, y, reduction="none")
        t = np.broadcast_to(np.asarray(config.target), (logits.data.shape[0],))
        return -ad.cross_entropy(logits, t, reduction="none")
    margin = cw_loss(logits, y, config.goal, config.target)
    return -margin


def attack_gradient(model, x, y, config: AttackConfig, ids=None, iteration=0):
    """Ascent direction for the objective, optionally averaged over masks.

    Returns (gradient [N,3,H,W], per-image objective values [N]). With
    eot_samples=0 this is the plain input gradient; otherwise each of the
    eot_samples mask draws contributes grad(objective(X*M)) which carries the
    factor M via the chain rule, and the average is returned.
    """
    x = np.asarray(x, dtype=np.float32)
    if ids is None:
        ids = np.arange(x.shape[0])
    model.requires_grad_(False)
    leaf = Tensor(x, requires_grad=True)

    if config.eot_samples == 0:
        obj = attack_objective(model.forward(leaf, training=False), y, config)
        values = obj.data.copy()
        obj.sum().backward()
    else:
        values = np.zeros(x.shape[0], dtype=np.float64)
        for s in range(config.eot_samples):
            bits = np.empty_like(x)
            for j, image_id in enumerate(ids):
                bits[j] = sample_mask(
                    x.shape[1:], config.eot_drop_rate,
                    rng_for(config.seed, "eot", image_id, iteration, s)).bits
            masked = ad.mul(leaf, Tensor(bits))
            obj = attack_objective(model.forward(masked, training=False), y, config)
            values += obj.data
            # backward accumulates into leaf.grad across samples
            obj.sum().backward()
        values /= config.eot_samples
    grad = leaf.grad / max(config.eot_samples, 1)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite attack gradient")
    return grad, values


def project(norm, x, x0, eps):
    """Project x onto the eps-ball around x0 (L2/Linf; L0 projects by
    construction of the step rule). Already-feasible points pass unchanged."""
    if norm == "linf":
        return x0 + np.clip(x - x0, -eps, eps)
    if norm == "l2":
        # Rescale only genuinely infeasible iterates, and iterate to a
        # fixpoint: float32 storage can round a freshly rescaled point back
        # above the guard, so each retry undershoots a little deeper until
        # the stored bits are feasible. Feasible inputs pass through bitwise.
        out = np.asarray(x, dtype=np.float32).copy()
        x0_64 = x0.astype(np.float64)
        for attempt in range(20):
            delta = out.astype(np.float64) - x0_64
            norms = np.sqrt((delta ** 2).sum(axis=(1, 2, 3), keepdims=True))
            infeasible = norms > eps * (1 + 1e-7)
            if not infeasible.any():
                break
            target = eps * (1 - attempt * 2e-5)
            factor = np.where(infeasible, target / np.maximum(norms, 1e-30), 1.0)
            out = (x0_64 + delta * factor).astype(np.float32)
        return out
    if norm == "l0":
        return x
    raise ValueError(f"unknown norm {norm!r}")


def _modified_locations(x, x0):
    """[N,H,W] bool: any channel differs from the original."""
    return np.any(x != x0, axis=1)


def step_and_project(norm, x, x0, grad, eps, step):
    """One PGD move from iterate x, then projection onto the eps-ball.

    Linf: sign step then coordinate clamp. L2: gradient normalized per image
    (zero gradient leaves the iterate unchanged) then rescale-if-outside.
    L0: flip the not-yet-modified pixel location with the largest channel-sum
    gradient magnitude to the per-channel sign extreme; the budget is
    enforced by the iteration count, one fresh location per step.
    """
    if x.shape != x0.shape or x.shape != grad.shape:
        raise ValueError(f"shape mismatch: {x.shape}, {x0.shape}, {grad.shape}")
    if norm == "linf":
        moved = x + step * np.sign(grad)
        return project(norm, moved, x0, eps)
    if norm == "l2":
        g = grad.astype(np.float64)
        norms = np.sqrt((g ** 2).sum(axis=(1, 2, 3), keepdims=True))
        direction = np.where(norms > 0, g / np.maximum(norms, 1e-30), 0.0)
        moved = (x.astype(np.float64) + step * direction).astype(x.dtype)
        return project(norm, moved, x0, eps)
    if norm == "l0":
        scores = np.abs(grad).sum(axis=1)                    # [N,H,W]
        scores[_modified_locations(x, x0)] = -1.0            # spend each location once
        out = x.copy()
        n, _, h, w = x.shape
        flat = scores.reshape(n, -1)
        order = np.argsort(-flat, axis=1)
        for i in range(n):
            for k in order[i]:
                if flat[i, k] <= 0.0:
                    break                                    # only dead/spent locations left
                r, c = divmod(int(k), w)
                value = np.where(grad[i, :, r, c] >= 0, 1.0, -1.0).astype(x.dtype)
                if np.array_equal(value, x[i, :, r, c]):
                    continue                                 # already at that extreme
                out[i, :, r, c] = value
                break
        return out
    raise ValueError(f"unknown norm {norm!r}")


def measure_norm(norm, x, x0):
    """Per-image perturbation size; L0 counts whole pixel locations."""
    delta = (x.astype(np.float64) - x0.astype(np.float64))
    if norm == "linf":
        return np.abs(delta).max(axis=(1, 2, 3))
    if norm == "l2":
        return np.sqrt((delta ** 2).sum(axis=(1, 2, 3)))
    if norm == "l0":
        return _modified_locations(x, x0).sum(axis=(1, 2)).astype(np.float64)
    raise ValueError(f"unknown norm {norm!r}")


def _random_start(x0, config, ids):
    out = x0.copy()
    for j, image_id in enumerate(ids):
        rng = rng_for(config.seed, "start", image_id)
        if config.norm == "linf":
            out[j] += rng.uniform(-config.eps, config.eps, size=x0.shape[1:]) \
                .astype(x0.dtype)
        elif config.norm == "l2":
            direction = rng.normal(size=x0.shape[1:])
            direction /= max(np.sqrt((direction ** 2).sum()), 1e-30)
            radius = config.eps * rng.random() ** (1.0 / direction.size)
            out[j] += (radius * direction).astype(x0.dtype)
        # L0 starts at the original: a random start would spend budget.
    return np.clip(out, -1.0, 1.0)


def pgd(model, x, y, config: AttackConfig, ids=None) -> AdversarialResult:
    """Iterated ascent with projection; the result obeys budget and range.

    Success is judged on the final iterate with an unmasked eval-mode
    forward: argmax != y for misclassification, == target for targeted.
    """
    x0 = np.asarray(x, dtype=np.float32)
    if x0.ndim != 4:
        raise ValueError(f"pgd expects a [N,3,H,W] batch, got {x0.shape}")
    if np.abs(x0).max() > 1.0:
        raise ValueError("input batch leaves the [-1,1] domain")
    y = np.asarray(y)
    if ids is None:
        ids = np.arange(x0.shape[0])

    if config.norm == "l0":
        side = x0.shape[-1]
        budget = l0_budget_locations(config.eps, side)
        iterations = min(config.iterations, budget)
    else:
        iterations = config.iterations

    xj = _random_start(x0, config, ids) if config.random_start else x0.copy()
    trajectory = np.zeros((iterations, x0.shape[0]), dtype=np.float64)
    for it in range(iterations):
        grad, values = attack_gradient(model, xj, y, config, ids=ids, iteration=it)
        trajectory[it] = values
        xj = step_and_project(config.norm, xj, x0, grad, config.eps, config.step)
        np.clip(xj, -1.0, 1.0, out=xj)

    with ad.no_grad():
        logits = model.forward(Tensor(xj), training=False)
    pred = logits.data.argmax(axis=1)
    if config.goal == "misclassify":
        success = pred != y
    else:
        success = pred == np.broadcast_to(np.asarray(config.target), pred.shape)
    return AdversarialResult(
        x_adv=xj,
        achieved_norm=measure_norm(config.norm, xj, x0),
        success=success,
        loss_trajectory=trajectory,
    )


def export_adversarial(prefix, result: AdversarialResult, config: AttackConfig,
                       ids, x_orig, labels):
    """Write <prefix>.bin (tensor container) and <prefix>.csv (manifest)."""
    write_container(f"{prefix}.bin", {
        "kind": "adversarial_batch",
        "meta": {"norm": config.norm, "eps": config.eps, "loss": config.loss,
                 "goal": config.goal, "eot_samples": config.eot_samples,
                 "seed": config.seed},
    }, {
        "x_adv": result.x_adv,
        "x_orig": np.asarray(x_orig, dtype=np.float32),
        "labels": np.asarray(labels, dtype=np.float32),
        "ids": np.asarray(ids, dtype=np.float32),
    })
    with open(f"{prefix}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "goal", "loss", "norm",
                         "achieved_norm", "success"])
        for j, image_id in enumerate(ids):
            writer.writerow([image_id, config.goal, config.loss, config.norm,
                             f"{result.achieved_norm[j]:.6g}",
                             int(result.success[j])])


def best_of(results):
    """Fold several configurations' results: an image counts as successfully
    attacked if any configuration succeeded (reported accuracy = min)."""
    if not results:
        raise ValueError("best_of needs at least one result")
    success = np.zeros_like(results[0].success)
    for r in results:
        success |= r.success
    return success
