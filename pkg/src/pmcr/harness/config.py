"""Training configuration and its JSON form."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from pmcr.core import Hyperparams
from pmcr.errors import InvalidSpec
from pmcr.harness.synthetic import SyntheticTaskSpec, default_task


@dataclass
class Flags:
    pcm_on: bool = True
    crr_on: bool = True
    dcl_on: bool = True

    @property
    def label(self) -> str:
        off = [n for n, v in (("pcm", self.pcm_on), ("crr", self.crr_on), ("dcl", self.dcl_on)) if not v]
        if not off:
            return "full"
        if len(off) == 3:
            return "baseline"
        return "_".join(f"{n}_off" for n in off)


ABLATIONS = {
    "full": Flags(True, True, True),
    "pcm_off": Flags(False, True, True),
    "crr_off": Flags(True, False, True),
    "dcl_off": Flags(True, True, False),
    "baseline": Flags(False, False, False),
}


@dataclass
class TrainConfig:
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    iterations: int = 2000
    seed: int = 0
    flags: Flags = field(default_factory=Flags)
    output_dir: Optional[str] = None
    data_dir: Optional[str] = None
    data_seed: int = 0
    task: SyntheticTaskSpec = field(default_factory=default_task)
    log_every: int = 1
    record_timing: bool = False

    def validate(self) -> None:
        if self.iterations < 1:
            raise InvalidSpec("iterations must be at least 1")
        self.hyperparams.validate()
        self.task.validate()
        if self.task.image_size != self.hyperparams.image_size:
            raise InvalidSpec("task image_size and hyperparams image_size differ")

    def to_dict(self) -> dict:
        return {
            "hyperparams": self.hyperparams.to_dict(),
            "iterations": self.iterations,
            "seed": self.seed,
            "flags": {"pcm_on": self.flags.pcm_on, "crr_on": self.flags.crr_on, "dcl_on": self.flags.dcl_on},
            "output_dir": self.output_dir,
            "data_dir": self.data_dir,
            "data_seed": self.data_seed,
            "task": self.task.to_dict(),
            "log_every": self.log_every,
            "record_timing": self.record_timing,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {"hyperparams", "iterations", "seed", "flags", "output_dir", "data_dir", "data_seed", "task",
                 "log_every", "record_timing"}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(f"unknown config keys: {sorted(unknown)}")
        hp = Hyperparams.from_dict(d.pop("hyperparams", {}))
        flags = Flags(**d.pop("flags", {}))
        task = SyntheticTaskSpec.from_dict(d.pop("task")) if "task" in d else default_task()
        return cls(hyperparams=hp, flags=flags, task=task, **d)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
