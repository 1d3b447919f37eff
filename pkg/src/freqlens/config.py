"""Run configuration: one JSON document, validated field by field."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackConfig
from .harness import DEFAULT_SCALES
from .models import ARCHS
from .training import MODES, TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending dotted path."""

    def __init__(self, field: str, message: str, line: int | None = None):
        self.field = field
        self.line = line
        where = f" (line {line})" if line else ""
        super().__init__(f"{field}{where}: {message}")


@dataclass
class DatasetSpec:
    source: str = "synthetic"
    path: str | None = None
    n_train: int = 1000
    n_test: int = 500
    num_classes: int = 4
    shape: tuple[int, int, int] = (3, 16, 16)


@dataclass
class RunConfig:
    seed: int
    arch: str = "tiny_convnet"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: dict = field(default_factory=dict)
    attacks: list[AttackConfig] = field(default_factory=list)
    scales: tuple[float, ...] = DEFAULT_SCALES
    subset: int | None = 500
    sample_n: int = 200
    output_dir: str = "runs/desk"

    def train_config(self, mode: str | None = None) -> TrainConfig:
        opts = dict(self.train)
        if mode is not None:
            opts["mode"] = mode
        opts.setdefault("seed", derive_seed(self.seed, "train"))
        return TrainConfig(**opts)

    @property
    def attack(self) -> AttackConfig:
        """The attack driving sweeps and spectrum reports (first in the list)."""
        return self.attacks[0]


def derive_seed(master: int, tag: str) -> int:
    """Stable sub-seed for one pipeline stage."""
    words = [master] + [ord(ch) for ch in tag]
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint32)[0])


_TOP_KEYS = {"seed", "arch", "dataset", "train", "attacks", "sweep", "subset", "spectrum", "output_dir"}
_TRAIN_KEYS = {"epochs", "batch_size", "learning_rate", "momentum", "seed", "mode"}


def _want(cond: bool, field: str, message: str) -> None:
    if not cond:
        raise ConfigError(field, message)


def _int(doc: dict, key: str, prefix: str, minimum: int | None = None):
    v = doc[key]
    _want(isinstance(v, int) and not isinstance(v, bool), prefix + key, f"expected an integer, got {v!r}")
    if minimum is not None:
        _want(v >= minimum, prefix + key, f"must be >= {minimum}, got {v}")
    return v


def parse_config(doc: dict, base_dir: Path | None = None) -> RunConfig:
    """Validate a decoded JSON document into a RunConfig."""
    _want(isinstance(doc, dict), "<root>", "config must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    _want(not unknown, sorted(unknown)[0] if unknown else "", "unknown field")
    _want("seed" in doc, "seed", "required (no wall-clock seeding)")
    seed = _int(doc, "seed", "", 0)

    arch = doc.get("arch", "tiny_convnet")
    _want(arch in ARCHS, "arch", f"must be one of {ARCHS}, got {arch!r}")

    ds_doc = doc.get("dataset", {})
    _want(isinstance(ds_doc, dict), "dataset", "expected an object")
    ds = DatasetSpec()
    source = ds_doc.get("source", "synthetic")
    _want(source in ("synthetic", "cifar10"), "dataset.source", f"must be 'synthetic' or 'cifar10', got {source!r}")
    ds.source = source
    for key in ("n_train", "n_test", "num_classes"):
        if key in ds_doc:
            setattr(ds, key, _int(ds_doc, key, "dataset.", 1))
    if "shape" in ds_doc:
        shape = ds_doc["shape"]
        _want(isinstance(shape, list) and len(shape) == 3 and all(isinstance(s, int) and s > 0 for s in shape),
              "dataset.shape", f"expected [C, H, W] positive integers, got {shape!r}")
        ds.shape = tuple(shape)
    if source == "cifar10":
        _want("path" in ds_doc, "dataset.path", "required when dataset.source is 'cifar10'")
        path = Path(ds_doc["path"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        _want(path.exists(), "dataset.path", f"path does not exist: {path}")
        ds.path = str(path)
        ds.num_classes, ds.shape = 10, (3, 32, 32)
    else:
        _want(ds.n_train >= ds.num_classes and ds.n_test >= ds.num_classes, "dataset.n_train",
              "synthetic splits need at least num_classes samples")

    train = doc.get("train", {})
    _want(isinstance(train, dict), "train", "expected an object")
    for key in train:
        _want(key in _TRAIN_KEYS, f"train.{key}", "unknown field")
    if "mode" in train:
        _want(train["mode"] in MODES, "train.mode", f"must be one of {MODES}")
    try:
        TrainConfig(**train)
    except (TypeError, ValueError) as exc:
        raise ConfigError("train", str(exc)) from None

    attack_docs = doc.get("attacks", [{"kind": "pgd", "epsilon": 8 / 255, "step_size": 1 / 255, "iterations": 20}])
    _want(isinstance(attack_docs, list) and attack_docs, "attacks", "expected a non-empty list")
    attacks = []
    for i, a in enumerate(attack_docs):
        _want(isinstance(a, dict), f"attacks[{i}]", "expected an object")
        a = dict(a)
        a.setdefault("seed", derive_seed(seed, f"attack{i}"))
        try:
            attacks.append(AttackConfig(**a))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"attacks[{i}]", str(exc)) from None

    scales = DEFAULT_SCALES
    sweep = doc.get("sweep", {})
    _want(isinstance(sweep, dict), "sweep", "expected an object")
    if "scales" in sweep:
        sc = sweep["scales"]
        _want(isinstance(sc, list) and sc and all(isinstance(s, (int, float)) and s >= 0 for s in sc),
              "sweep.scales", "expected a non-empty list of numbers >= 0")
        _want(len(set(sc)) == len(sc), "sweep.scales", "scales must be distinct")
        scales = tuple(float(s) for s in sc)

    subset = doc.get("subset", 500)
    if subset is not None:
        subset = _int(doc, "subset", "", 1)
    sample_n = 200
    spec_doc = doc.get("spectrum", {})
    _want(isinstance(spec_doc, dict), "spectrum", "expected an object")
    if "sample_n" in spec_doc:
        sample_n = _int(spec_doc, "sample_n", "spectrum.", 1)

    out = doc.get("output_dir", "runs/desk")
    _want(isinstance(out, str) and out, "output_dir", "expected a non-empty string")

    return RunConfig(seed, arch, ds, dict(train), attacks, scales, subset, sample_n, out)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("--config", f"file not found: {path}")
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<json>", f"{exc.msg} at column {exc.colno}", exc.lineno) from None
    try:
        return parse_config(doc, base_dir=path.parent)
    except ConfigError as exc:
        if exc.line is None:
            exc.line = _find_line(text, exc.field)
            if exc.line:
                exc.args = (f"{exc.field} (line {exc.line}): {str(exc).split(': ', 1)[1]}",)
        raise


def _find_line(text: str, field: str) -> int | None:
    # best effort: line of the last path component's key
    key = field.split(".")[-1].split("[")[0]
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None
