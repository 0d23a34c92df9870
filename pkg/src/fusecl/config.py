"""Run configuration: YAML schema, validation and canonical hashing.

Schema (every key optional unless noted)::

    name: desk                  # label used in output paths and metrics run ids
    dataset:                    # exactly one of
      synthetic: {num_classes: 10, train_per_class: 200, ...}   # SyntheticSpec fields
      packed: {train: a.clis, test: b.clis, num_classes: 10}
    rounds: [2, 2, 2, 2, 2]     # required
    class_order: seeded         # or "natural"
    seeds: [0, 1, 2, 3, 4]
    budget: 100                 # exemplar memory size B
    train: {max_epochs: 40, ...}                               # TrainConfig fields
    flags: fusion+FC+mask       # preset name or {fusion: true, transforms: ..., ...}
    probes: [drop-extractor-2]  # inference-time probes for `run`
    rows: [none, fusion, ...]   # ablation rows for `ablate`

Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable

import yaml

from .engine import PRESETS, InvalidConfig, MethodFlags, TrainConfig, config_dict
from .evalkit import DEFAULT_ROWS, parse_row, vars_flags
from .stream import (SyntheticSpec, TaskStream, make_class_order, make_synthetic, read_packed_dataset,
                     split_rounds)

TOP_KEYS = {"name", "dataset", "rounds", "class_order", "seeds", "budget", "train", "flags",
            "probes", "rows"}


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = set(given) - set(allowed)
    if unknown:
        raise InvalidConfig(f"unknown key(s) in {section}: {', '.join(sorted(unknown))}")


def _mapping(section: str, value) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise InvalidConfig(f"{section} must be a mapping")
    return value


@dataclass
class RunConfig:
    rounds: list[int]
    name: str = "run"
    synthetic: SyntheticSpec | None = field(default_factory=SyntheticSpec)
    packed: dict | None = None
    class_order: str = "seeded"
    seeds: list[int] = field(default_factory=lambda: [0])
    budget: int = 2000
    train: TrainConfig = field(default_factory=TrainConfig)
    flags: MethodFlags = field(default_factory=MethodFlags)
    flags_name: str | None = "fusion+FC+mask"
    probes: list[str] = field(default_factory=list)
    rows: list = field(default_factory=lambda: list(DEFAULT_ROWS))

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.rounds or any(int(c) < 1 for c in self.rounds):
            raise InvalidConfig("rounds must be a non-empty list of positive class counts")
        if not self.seeds:
            raise InvalidConfig("at least one seed required")
        if self.budget < 1:
            raise InvalidConfig("budget must be positive")
        if self.class_order not in ("seeded", "natural"):
            raise InvalidConfig("class_order must be 'seeded' or 'natural'")
        if (self.synthetic is None) == (self.packed is None):
            raise InvalidConfig("dataset needs exactly one of synthetic or packed")
        if self.synthetic is not None and sum(self.rounds) > self.synthetic.num_classes:
            raise InvalidConfig(f"rounds need {sum(self.rounds)} classes, dataset has "
                                f"{self.synthetic.num_classes}")
        if not str(self.name) or "/" in str(self.name):
            raise InvalidConfig("name must be a non-empty path-free label")
        self.flags.validate()
        if not self.flags.fusion and self.probes:
            raise InvalidConfig("extractor probes need a fusion model")
        for p in self.probes:
            if parse_row(p).probe is None:
                raise InvalidConfig(f"unknown probe {p!r}")
        for r in self.rows:
            parse_row(r)
        if self.budget // sum(self.rounds) == 0:
            raise InvalidConfig(f"budget {self.budget} leaves no exemplars for {sum(self.rounds)} classes")

    # -- (de)serialisation -------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = _mapping("config", d)
        _check_keys("config", d, TOP_KEYS)
        if "rounds" not in d:
            raise InvalidConfig("config needs 'rounds'")
        kw: dict[str, Any] = {"rounds": [int(c) for c in d["rounds"]]}
        for key in ("name", "class_order", "budget"):
            if key in d:
                kw[key] = d[key]
        if "seeds" in d:
            seeds = d["seeds"]
            kw["seeds"] = [int(s) for s in (seeds if isinstance(seeds, list) else [seeds])]
        ds = _mapping("dataset", d.get("dataset"))
        _check_keys("dataset", ds, {"synthetic", "packed"})
        if "packed" in ds:
            packed = _mapping("dataset.packed", ds["packed"])
            _check_keys("dataset.packed", packed, {"train", "test", "num_classes"})
            if not {"train", "test"} <= set(packed):
                raise InvalidConfig("dataset.packed needs train and test paths")
            kw["packed"] = dict(packed)
            kw["synthetic"] = None
            if "synthetic" in ds:
                raise InvalidConfig("dataset needs exactly one of synthetic or packed")
        else:
            syn = _mapping("dataset.synthetic", ds.get("synthetic"))
            _check_keys("dataset.synthetic", syn, {f.name for f in fields(SyntheticSpec)})
            kw["synthetic"] = SyntheticSpec(**syn)
        train = _mapping("train", d.get("train"))
        _check_keys("train", train, {f.name for f in fields(TrainConfig)})
        try:
            kw["train"] = TrainConfig(**train)
        except TypeError as e:
            raise InvalidConfig(str(e)) from None
        flags = d.get("flags", "fusion+FC+mask")
        if isinstance(flags, str):
            if flags not in PRESETS:
                raise InvalidConfig(f"unknown flags preset {flags!r}")
            kw["flags"], kw["flags_name"] = PRESETS[flags], flags
        else:
            flags = _mapping("flags", flags)
            _check_keys("flags", flags, MethodFlags.__dataclass_fields__)
            kw["flags"], kw["flags_name"] = MethodFlags(**flags), None
        if "probes" in d:
            kw["probes"] = list(d["probes"] or [])
        if "rows" in d:
            kw["rows"] = list(d["rows"] or [])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as e:
            raise InvalidConfig(f"{path}: {e}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        ds = ({"packed": dict(self.packed)} if self.packed is not None
              else {"synthetic": asdict(self.synthetic)})
        return {
            "name": self.name,
            "dataset": ds,
            "rounds": list(self.rounds),
            "class_order": self.class_order,
            "seeds": list(self.seeds),
            "budget": self.budget,
            "train": config_dict(self.train),
            "flags": self.flags_name if self.flags_name else vars_flags(self.flags),
            "probes": list(self.probes),
            "rows": list(self.rows),
        }

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:12]

    def with_seeds(self, seeds) -> "RunConfig":
        d = self.to_dict()
        d["seeds"] = list(seeds)
        return RunConfig.from_dict(d)

    # -- data ------------------------------------------------------------------

    def stream_factory(self, base_dir=None) -> Callable[[int], TaskStream]:
        if self.packed is not None:
            root = Path(base_dir or ".")
            n = self.packed.get("num_classes")
            train = read_packed_dataset(root / self.packed["train"], n)
            test = read_packed_dataset(root / self.packed["test"], train.num_classes)
        else:
            train, test = make_synthetic(self.synthetic)
        if sum(self.rounds) > train.num_classes:
            raise InvalidConfig(f"rounds need {sum(self.rounds)} classes, dataset has {train.num_classes}")

        def build(seed: int) -> TaskStream:
            key = "natural" if self.class_order == "natural" else seed
            return split_rounds(make_class_order(train.num_classes, key), self.rounds, train, test)

        return build
