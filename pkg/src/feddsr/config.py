"""Experiment configuration: a JSON tree validated field by field.

Missing keys take defaults; unknown keys are rejected before anything runs.
"""
import copy
import json
from dataclasses import dataclass

from .data import PartitionSpec, SceneConfig
from .errors import ConfigError
from .federation import ALGORITHMS, SCHEDULES, Architecture, RoundConfig
from .model import POSITIONS, TAP_RULES, TapSpec, resolve_taps
from .objectives import LossWeights

DEFAULTS = {
    "seed": 0,
    "precision": "single",
    "output": "runs/default",
    "data": {
        "height": 16,
        "width": 16,
        "classes": 4,
        "in_channels": 3,
        "train_samples": 800,
        "test_samples": 200,
        "shapes_min": 1,
        "shapes_max": 3,
        "noise": 0.3,
        "colors": None,
        "vehicles": 8,
        "gamma": 0.3,
        "min_samples": 8,
    },
    "model": {
        "width": 8,
        "taps": {"rule": "after-downsample", "count": 2, "indices": None, "spacing": 1, "position": "input"},
        "adapter_hidden": False,
        "ne_channels": None,
    },
    "training": {
        "rounds": 120,
        "local_epochs": 2,
        "batch_size": 16,
        "lr": 0.1,
        "lr_schedule": "constant",
        "participation": 1.0,
        "algorithm": "fedavg",
        "mu": 0.01,
        "beta": 0.9,
        "alpha": 0.4,
        "lambda": 0.1,
    },
    "evaluation": {
        "every": 1,
        "batch_size": 100,
        "diagnostics_every": 0,
        "checkpoint_every": 0,
        "panel": 0,
        "timing": False,
    },
}

_TYPES = {
    "seed": int, "precision": str, "output": str,
    "data.height": int, "data.width": int, "data.classes": int, "data.in_channels": int,
    "data.train_samples": int, "data.test_samples": int, "data.shapes_min": int, "data.shapes_max": int,
    "data.noise": (int, float), "data.colors": (list, type(None)), "data.vehicles": int,
    "data.gamma": (int, float), "data.min_samples": int,
    "model.width": int, "model.taps.rule": str, "model.taps.count": int,
    "model.taps.indices": (list, type(None)), "model.taps.spacing": int, "model.taps.position": str,
    "model.adapter_hidden": bool, "model.ne_channels": (int, type(None)),
    "training.rounds": int, "training.local_epochs": int, "training.batch_size": int,
    "training.lr": (int, float), "training.lr_schedule": str, "training.participation": (int, float),
    "training.algorithm": str, "training.mu": (int, float), "training.beta": (int, float),
    "training.alpha": (int, float, list), "training.lambda": (int, float, list),
    "evaluation.every": int, "evaluation.batch_size": int, "evaluation.diagnostics_every": int,
    "evaluation.checkpoint_every": int, "evaluation.panel": int, "evaluation.timing": bool,
}


def _merge(defaults, given, path=""):
    if not isinstance(given, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(given).__name__}")
    out = {}
    for key in given:
        if key not in defaults:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key {where!r}")
    for key, dv in defaults.items():
        where = f"{path}.{key}" if path else key
        if key not in given:
            out[key] = copy.deepcopy(dv)
        elif isinstance(dv, dict):
            out[key] = _merge(dv, given[key], where)
        else:
            v = given[key]
            want = _TYPES[where]
            # bools are ints in Python; do not let them through as numbers
            if (isinstance(v, bool) and want is not bool and bool not in (want if isinstance(want, tuple) else (want,))) \
                    or not isinstance(v, want):
                raise ConfigError(f"{where}: wrong type {type(v).__name__}")
            out[key] = v
    return out


def _per_tap(value, m, name):
    if isinstance(value, list):
        if len(value) != m:
            raise ConfigError(f"training.{name}: expected {m} entries (one per tap), got {len(value)}")
        return [float(v) for v in value]
    return [float(value)] * m


@dataclass
class ExperimentConfig:
    tree: dict
    scene: SceneConfig
    partition: PartitionSpec
    tap_spec: TapSpec
    arch: Architecture
    round_cfg: RoundConfig

    @property
    def seed(self):
        return self.tree["seed"]

    @property
    def evaluation(self):
        return self.tree["evaluation"]

    @property
    def data(self):
        return self.tree["data"]

    def experiment_tree(self):
        """The tree without the output location, which does not affect results."""
        return {k: v for k, v in self.tree.items() if k != "output"}

    def to_json(self):
        return json.dumps(self.experiment_tree(), sort_keys=True, indent=2) + "\n"

    def derive(self, **overrides):
        """Copy with dotted-path overrides, e.g. derive(**{"model.taps.count": 3})."""
        tree = copy.deepcopy(self.tree)
        for path, v in overrides.items():
            node = tree
            *head, last = path.split(".")
            for h in head:
                node = node[h]
            node[last] = v
        return parse_config(tree)


def parse_config(raw):
    """Validate a raw config tree (dict) into an ExperimentConfig."""
    tree = _merge(DEFAULTS, raw)
    d, m, tr, ev = tree["data"], tree["model"], tree["training"], tree["evaluation"]
    if tree["precision"] not in ("single", "double"):
        raise ConfigError(f"precision must be 'single' or 'double', got {tree['precision']!r}")
    if not 0 <= tree["seed"] < 2 ** 64:
        raise ConfigError(f"seed must be a 64-bit unsigned integer, got {tree['seed']}")
    scene = SceneConfig(d["height"], d["width"], d["classes"], d["in_channels"], d["shapes_min"],
                        d["shapes_max"], float(d["noise"]), d["colors"])
    for key in ("train_samples", "test_samples"):
        if d[key] < 1:
            raise ConfigError(f"data.{key} must be >= 1, got {d[key]}")
    partition = PartitionSpec(d["vehicles"], float(d["gamma"]), d["min_samples"])
    if d["train_samples"] < partition.vehicles * partition.min_samples:
        raise ConfigError(f"data.train_samples ({d['train_samples']}) < vehicles x min_samples "
                          f"({partition.vehicles} x {partition.min_samples})")
    tp = m["taps"]
    if tp["rule"] not in TAP_RULES:
        raise ConfigError(f"model.taps.rule must be one of {TAP_RULES}, got {tp['rule']!r}")
    if tp["position"] not in POSITIONS:
        raise ConfigError(f"model.taps.position must be one of {POSITIONS}, got {tp['position']!r}")
    tap_spec = TapSpec(tp["rule"], tp["count"], tp["indices"], tp["spacing"], tp["position"])
    try:
        taps = resolve_taps(tap_spec)
    except ConfigError as exc:
        raise ConfigError(f"model.{exc}") from None
    if m["width"] < 2:
        raise ConfigError(f"model.width must be >= 2, got {m['width']}")
    if m["ne_channels"] is not None and m["ne_channels"] < 1:
        raise ConfigError(f"model.ne_channels must be >= 1 or null, got {m['ne_channels']}")
    arch = Architecture(d["in_channels"], m["width"], d["classes"], taps, m["adapter_hidden"], m["ne_channels"])
    if tr["algorithm"] not in ALGORITHMS:
        raise ConfigError(f"training.algorithm must be one of {ALGORITHMS}, got {tr['algorithm']!r}")
    if tr["lr_schedule"] not in SCHEDULES:
        raise ConfigError(f"training.lr_schedule must be one of {SCHEDULES}, got {tr['lr_schedule']!r}")
    try:
        weights = LossWeights(_per_tap(tr["alpha"], len(taps), "alpha"), _per_tap(tr["lambda"], len(taps), "lambda"))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"training.alpha/lambda: {exc}") from None
    round_cfg = RoundConfig(tr["local_epochs"], tr["batch_size"], float(tr["lr"]), tr["lr_schedule"], tr["rounds"],
                            float(tr["participation"]), tr["algorithm"], float(tr["mu"]), float(tr["beta"]), weights)
    for key in ("every", "batch_size"):
        if ev[key] < 1:
            raise ConfigError(f"evaluation.{key} must be >= 1, got {ev[key]}")
    for key in ("diagnostics_every", "checkpoint_every", "panel"):
        if ev[key] < 0:
            raise ConfigError(f"evaluation.{key} must be >= 0, got {ev[key]}")
    return ExperimentConfig(tree, scene, partition, tap_spec, arch, round_cfg)


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return parse_config(raw)
