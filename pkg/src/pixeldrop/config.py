"""Flat dotted-key experiment configuration.

The file format is one ``key = value`` assignment per line, ``#`` comments,
dotted keys (``train.rate = 0.9``). Numbers are plain decimals. Every
problem in a file is reported at once rather than one at a time, and a
global seed is mandatory so no run can be silently nondeterministic.
"""

import os
from dataclasses import dataclass, field

from .attacks import GOALS, LOSSES, NORMS, AttackConfig, default_config
from .data import load_cifar10, synth_signs
from .defense import DefenseConfig
from .masking import GRANULARITIES, POLICY_KINDS, DropPolicy
from .models import ModelSpec
from .training import OBJECTIVES, TrainConfig

DATASET_KINDS = ("synthetic", "cifar10")


class ConfigError(ValueError):
    """All schema violations of one config file, joined into one message."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


def parse_flat(text):
    """Dotted-key assignments -> dict of raw strings. Collects every bad line."""
    values = {}
    problems = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            problems.append(f"line {lineno}: empty key or value in {raw.strip()!r}")
            continue
        if key in values:
            problems.append(f"line {lineno}: duplicate key {key!r}")
            continue
        values[key] = value
    if problems:
        raise ConfigError(problems)
    return values


def _int(s):
    return int(s, 10)


def _float(s):
    return float(s)


def _choice(options):
    def parse(s):
        if s not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return s
    return parse


def _int_tuple(s):
    return tuple(_int(part.strip()) for part in s.split(","))


def _float_list(s):
    return [_float(part.strip()) for part in s.split(",")]


def _schedule(s):
    # "0:0.03,4:0.01" -> [(0, 0.03), (4, 0.01)]
    out = []
    for part in s.split(","):
        epoch, _, lr = part.strip().partition(":")
        if not _:
            raise ValueError("schedule entries look like epoch:lr")
        out.append((_int(epoch.strip()), _float(lr.strip())))
    return out


# key -> (parser, default); None defaults mean "derived later"
_SCHEMA = {
    "seed": (_int, None),
    "dataset.kind": (_choice(DATASET_KINDS), None),
    "dataset.path": (str, None),
    "dataset.classes": (_int, 8),
    "dataset.per_class": (_int, 120),
    "dataset.side": (_int, 32),
    "dataset.val_per_class": (_int, None),
    "dataset.test_per_class": (_int, None),
    "model.blocks": (_int, 1),
    "model.widths": (_int_tuple, (16, 32, 64)),
    "train.epochs": (_int, 8),
    "train.batch": (_int, 64),
    "train.objective": (_choice(OBJECTIVES), "standard"),
    "train.dual_weight": (_float, 1.0),
    "train.noise_eps": (_float, 16 / 255),
    "train.policy": (_choice(POLICY_KINDS), "none"),
    "train.rate": (_float, 0.0),
    "train.granularity": (_choice(GRANULARITIES), "element"),
    "train.momentum": (_float, 0.9),
    "train.weight_decay": (_float, 1e-4),
    "train.schedule": (_schedule, None),
    "eval.drop_rates": (_float_list, [0.0, 0.9]),
    "eval.trials": (_int, 1),
    "eval.images": (_int, 0),
    "defense.samples": (_int, 10),
    "defense.fpr": (_float, 0.0),
    "explain.images": (_int, 8),
    "explain.rate": (_float, 0.9),
}

_ATTACK_SCHEMA = {
    "norm": _choice(NORMS),
    "eps": _float,
    "step": _float,
    "iterations": _int,
    "loss": _choice(LOSSES),
    "goal": _choice(GOALS),
    "target": _int,
    "eot": _int,
    "eot_rate": _float,
}


@dataclass
class ExperimentConfig:
    """A fully validated experiment: typed values plus raw attack overrides."""

    values: dict
    attacks: dict = field(default_factory=dict)   # name -> {field: value}

    @property
    def seed(self):
        return self.values["seed"]

    def dataset(self):
        """Load/build the dataset selected by the config."""
        if self.values["dataset.kind"] == "cifar10":
            return load_cifar10(self.values["dataset.path"])
        return synth_signs(
            n_per_class=self.values["dataset.per_class"],
            num_classes=self.values["dataset.classes"],
            side=self.values["dataset.side"],
            seed=self.seed,
            val_per_class=self.values["dataset.val_per_class"],
            test_per_class=self.values["dataset.test_per_class"],
        )

    def model_spec(self, num_classes, side):
        return ModelSpec(n=self.values["model.blocks"],
                         widths=self.values["model.widths"],
                         num_classes=num_classes, side=side)

    def train_config(self):
        return TrainConfig(
            epochs=self.values["train.epochs"],
            batch_size=self.values["train.batch"],
            schedule=self.values["train.schedule"],
            momentum=self.values["train.momentum"],
            weight_decay=self.values["train.weight_decay"],
            policy=DropPolicy(kind=self.values["train.policy"],
                              rate=self.values["train.rate"],
                              granularity=self.values["train.granularity"]),
            objective=self.values["train.objective"],
            dual_weight=self.values["train.dual_weight"],
            noise_eps=self.values["train.noise_eps"],
            seed=self.seed,
        )

    def attack_registry_name(self):
        # synthetic runs use the cifar10 budget constants
        return "cifar10" if self.values["dataset.kind"] == "synthetic" else \
            self.values["dataset.kind"]

    def attack_configs(self, side):
        """name -> AttackConfig, registry defaults overlaid with file values."""
        out = {}
        for name in sorted(self.attacks):
            fields = dict(self.attacks[name])
            norm = fields.pop("norm")
            overrides = {}
            for key, value in fields.items():
                overrides[{"eot": "eot_samples", "eot_rate": "eot_drop_rate"}
                          .get(key, key)] = value
            out[name] = default_config(self.attack_registry_name(), norm, side,
                                       seed=self.seed, **overrides)
        return out

    def defense_config(self, drop_rate, tau=None):
        samples = self.values["defense.samples"] if drop_rate > 0 else 1
        return DefenseConfig(n_samples=samples, drop_rate=drop_rate, tau=tau,
                             seed=self.seed)

    def resolved_text(self):
        """Canonical dump of every effective value, replayable as a config."""
        lines = []
        for key in sorted(self.values):
            value = self.values[key]
            if value is None:
                continue
            if key == "train.schedule":
                text = ",".join(f"{e}:{_format_value(lr)}" for e, lr in value)
            else:
                text = _format_value(value)
            lines.append(f"{key} = {text}")
        for name in sorted(self.attacks):
            for key in sorted(self.attacks[name]):
                lines.append(f"attack.{name}.{key} = "
                             f"{_format_value(self.attacks[name][key])}")
        return "\n".join(lines) + "\n"


def _format_value(value):
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)        # shortest exact round-trip form
    return str(value)


def load_config(path, seed_override=None) -> ExperimentConfig:
    """Parse + validate a config file, reporting every problem at once."""
    with open(path) as fh:
        raw = parse_flat(fh.read())
    return build_config(raw, seed_override)


def build_config(raw, seed_override=None) -> ExperimentConfig:
    problems = []
    values = {}
    attacks = {}

    for key, text in raw.items():
        if key.startswith("attack."):
            parts = key.split(".")
            if len(parts) != 3 or not parts[1]:
                problems.append(f"{key}: attack keys look like attack.<name>.<field>")
                continue
            _, name, fieldname = parts
            if fieldname not in _ATTACK_SCHEMA:
                problems.append(f"{key}: unknown attack field {fieldname!r}")
                continue
            try:
                attacks.setdefault(name, {})[fieldname] = _ATTACK_SCHEMA[fieldname](text)
            except ValueError as err:
                problems.append(f"{key}: {err}")
            continue
        if key not in _SCHEMA:
            problems.append(f"unknown key {key!r}")
            continue
        parser, _ = _SCHEMA[key]
        try:
            values[key] = parser(text)
        except ValueError as err:
            problems.append(f"{key}: {err}")

    for key, (_, default) in _SCHEMA.items():
        values.setdefault(key, default)

    if seed_override is not None:
        values["seed"] = int(seed_override)
    if values["seed"] is None:
        problems.append("seed is required (set seed = <int> or pass --seed)")
    if values["dataset.kind"] is None:
        problems.append("dataset.kind is required (synthetic or cifar10)")
    elif values["dataset.kind"] == "cifar10":
        if values["dataset.path"] is None:
            problems.append("dataset.path is required for dataset.kind = cifar10")
        elif not os.path.isdir(values["dataset.path"]):
            problems.append(f"dataset.path {values['dataset.path']!r} is not a directory")
    for name, fields in attacks.items():
        if "norm" not in fields:
            problems.append(f"attack.{name}.norm is required")
    for rate in values["eval.drop_rates"] or []:
        if not 0.0 <= rate < 1.0:
            problems.append(f"eval.drop_rates entries must lie in [0,1), got {rate:g}")
    if not 0.0 <= values["defense.fpr"] < 1.0:
        problems.append(f"defense.fpr must lie in [0,1), got {values['defense.fpr']:g}")

    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(values=values, attacks=attacks)
