"""Deployed inference: probability averaging over random subsamplings plus
entropy-based rejection.

The pipeline draws n fresh drop masks per image, averages the softmax
outputs, and rejects the input when the entropy of the averaged vector
exceeds a threshold calibrated on clean validation data so that a chosen
fraction (default 1%) of clean images gets rejected. A rejected adversarial
input counts as correctly handled; a rejected clean input counts against
clean accuracy.
"""

import csv
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attacks import pgd
from .autodiff import Tensor
from .data import records_to_arrays
from .masking import apply_mask, sample_mask
from .rng import rng_for

RESULTS_FIELDS = ("dataset", "model_id", "train_policy", "drop_rate",
                  "attack_norm", "eps", "loss", "goal", "eot", "n_samples",
                  "tau", "clean_acc", "adv_acc", "clean_reject", "adv_reject")


@dataclass
class DefenseConfig:
    """Averaging ensemble size, its drop rate, and the rejection threshold."""

    n_samples: int = 10
    drop_rate: float = 0.9
    tau: float = None        # None: never reject (threshold not calibrated)
    seed: int = 0
    granularity: str = "element"

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError(f"need at least one ensemble sample, got {self.n_samples}")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError(f"drop rate must lie in [0,1), got {self.drop_rate}")
        if self.tau is not None and self.tau < 0:
            raise ValueError(f"threshold must be non-negative, got {self.tau}")


@dataclass
class EnsembleDecision:
    """Averaged probabilities, their entropy, and the accept/reject outcome."""

    p_bar: np.ndarray
    entropy: float
    outcome: str             # "accept" | "reject"
    label: int               # argmax of p_bar (meaningful when accepted)


def entropy(p, axis=-1):
    """Shannon entropy -sum p log p in nats, with 0 log 0 = 0.

    Accepts a single vector or a batch; values must be non-negative and sum
    to 1 within 1e-4 along ``axis`` (they are renormalized internally).
    """
    arr = np.asarray(p, dtype=np.float64)
    if (arr < 0).any():
        raise ValueError("negative probability component")
    sums = arr.sum(axis=axis, keepdims=True)
    if np.abs(sums - 1.0).max() > 1e-4:
        raise ValueError("probabilities do not sum to 1 within 1e-4")
    arr = arr / sums
    logs = np.where(arr > 0, np.log(np.where(arr > 0, arr, 1.0)), 0.0)
    return -(arr * logs).sum(axis=axis)


def ensemble_probs(model, x, ids, config: DefenseConfig) -> np.ndarray:
    """Mean softmax over n_samples fresh masks per image: [N, C].

    Mask streams are keyed (seed, image id, sample); sample 0 draws the same
    mask the plain evaluation protocol uses for its first trial.
    """
    x = np.asarray(x, dtype=np.float32)
    total = None
    with ad.no_grad():
        for s in range(config.n_samples):
            if config.drop_rate > 0:
                xm = np.empty_like(x)
                for j, image_id in enumerate(ids):
                    m = sample_mask(x.shape[1:], config.drop_rate,
                                    rng_for(config.seed, "eval", image_id, s),
                                    granularity=config.granularity)
                    xm[j] = apply_mask(x[j], m)
            else:
                xm = x
            p = ad.softmax(model.forward(Tensor(xm), training=False)).data
            total = p if total is None else total + p
    return total / config.n_samples


def decide(p_bar, tau) -> EnsembleDecision:
    """Accept/Reject purely from the averaged vector and the threshold."""
    h = float(entropy(p_bar))
    outcome = "reject" if (tau is not None and h > tau) else "accept"
    return EnsembleDecision(p_bar=p_bar, entropy=h, outcome=outcome,
                            label=int(np.argmax(p_bar)))


def ensemble_predict(model, x, config: DefenseConfig, image_id=0) -> EnsembleDecision:
    """Defended prediction for one [3,H,W] image."""
    p_bar = ensemble_probs(model, np.asarray(x)[None], [image_id], config)[0]
    return decide(p_bar, config.tau)


def calibrate_threshold(model, records, config: DefenseConfig, fpr=0.01) -> float:
    """Entropy threshold at the (1-fpr)-quantile of clean validation entropies.

    With the threshold applied, about ``fpr`` of clean inputs get rejected,
    which is the accuracy cost paid for the rejection defense.
    """
    if not records:
        raise ValueError("calibration needs a non-empty validation set")
    if not 0.0 < fpr < 1.0:
        raise ValueError(f"fpr must lie in (0,1), got {fpr}")
    if len(records) < 1.0 / fpr:
        raise ValueError(
            f"{len(records)} validation records cannot resolve a {fpr:.2%} "
            f"quantile; provide at least {int(np.ceil(1.0 / fpr))}")
    x, _, ids = records_to_arrays(records)
    entropies = []
    batch = 256
    for start in range(0, len(ids), batch):
        p_bar = ensemble_probs(model, x[start:start + batch], ids[start:start + batch],
                               config)
        entropies.append(entropy(p_bar, axis=1))
    return float(np.quantile(np.concatenate(entropies), 1.0 - fpr, method="linear"))


@dataclass
class AccuracyReport:
    """One row of the results table: a defended evaluation, optionally attacked."""

    dataset: str
    model_id: str
    train_policy: str
    drop_rate: float
    n_samples: int
    tau: float
    clean_acc: float
    clean_reject: float
    adv_acc: float = None
    adv_reject: float = None
    attack_norm: str = ""
    eps: float = None
    loss: str = ""
    goal: str = ""
    eot: int = 0


def _decision_stats(model, x, y, ids, config: DefenseConfig, batch=256):
    accept_correct = 0
    rejected = 0
    for start in range(0, len(ids), batch):
        p_bar = ensemble_probs(model, x[start:start + batch], ids[start:start + batch],
                               config)
        h = entropy(p_bar, axis=1)
        reject = (config.tau is not None) & (h > (config.tau if config.tau is not None
                                                 else np.inf))
        pred = p_bar.argmax(axis=1)
        correct = pred == y[start:start + batch]
        accept_correct += int((correct & ~reject).sum())
        rejected += int(reject.sum())
    n = len(ids)
    return accept_correct / n, rejected / n


def robust_accuracy(model, records, attack_config, defense_config: DefenseConfig,
                    dataset="", model_id="", train_policy="") -> AccuracyReport:
    """Defended accuracy on clean records and, optionally, on attacked ones.

    Clean accuracy counts accept-with-true-label only. Adversarial accuracy
    counts an input as correctly handled when it is rejected or accepted
    with the true label.
    """
    if not records:
        raise ValueError("robust_accuracy needs at least one record")
    x, y, ids = records_to_arrays(records)
    clean_acc, clean_reject = _decision_stats(model, x, y, ids, defense_config)
    report = AccuracyReport(
        dataset=dataset, model_id=model_id, train_policy=train_policy,
        drop_rate=defense_config.drop_rate, n_samples=defense_config.n_samples,
        tau=defense_config.tau, clean_acc=clean_acc, clean_reject=clean_reject,
    )
    if attack_config is not None:
        result = pgd(model, x, y, attack_config, ids=ids)
        adv_acc, adv_reject = _adversarial_stats(model, result.x_adv, y, ids,
                                                 defense_config)
        report.adv_acc = adv_acc
        report.adv_reject = adv_reject
        report.attack_norm = attack_config.norm
        report.eps = attack_config.eps
        report.loss = attack_config.loss
        report.goal = attack_config.goal
        report.eot = attack_config.eot_samples
    return report


def _adversarial_stats(model, x_adv, y, ids, config: DefenseConfig, batch=256):
    handled = 0
    rejected = 0
    for start in range(0, len(ids), batch):
        p_bar = ensemble_probs(model, x_adv[start:start + batch],
                               ids[start:start + batch], config)
        h = entropy(p_bar, axis=1)
        reject = (config.tau is not None) & (h > (config.tau if config.tau is not None
                                                  else np.inf))
        pred = p_bar.argmax(axis=1)
        correct = pred == y[start:start + batch]
        handled += int((reject | correct).sum())
        rejected += int(reject.sum())
    n = len(ids)
    return handled / n, rejected / n


def adversarial_report_from_examples(model, x_adv, y, ids,
                                     defense_config: DefenseConfig):
    """(adv_acc, adv_reject) for precomputed adversarial examples."""
    return _adversarial_stats(model, np.asarray(x_adv, dtype=np.float32),
                              np.asarray(y), ids, defense_config)


def append_report(path, report: AccuracyReport):
    """Append one row to the results CSV, writing the header if new."""
    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULTS_FIELDS)
        if fresh:
            writer.writeheader()
        row = {
            "dataset": report.dataset,
            "model_id": report.model_id,
            "train_policy": report.train_policy,
            "drop_rate": f"{report.drop_rate:g}",
            "attack_norm": report.attack_norm,
            "eps": "" if report.eps is None else f"{report.eps:.6g}",
            "loss": report.loss,
            "goal": report.goal,
            "eot": report.eot,
            "n_samples": report.n_samples,
            "tau": "" if report.tau is None else f"{report.tau:.6g}",
            "clean_acc": f"{report.clean_acc:.4f}",
            "adv_acc": "" if report.adv_acc is None else f"{report.adv_acc:.4f}",
            "clean_reject": f"{report.clean_reject:.4f}",
            "adv_reject": "" if report.adv_reject is None else f"{report.adv_reject:.4f}",
        }
        writer.writerow(row)
