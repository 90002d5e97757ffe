"""Experiment configuration: JSON blocks for lattice, defect, models, schedule and solver."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..solve import SolverConfig

DEFAULTS = {
    "lattice": "triangular",
    "R_DOM": 64.0,
    "defect": {"type": "vacancy", "site": [0, 0]},
    "reference": {"type": "eam"},
    "mm": {"type": "taylor", "K": 1, "virial": False},
    "scheme": "force",
    "schedule": {"R_QM": [4, 6, 8, 12, 16], "width": 4.0, "R_MM": 56.0},
    "solver": {},
    "seed": 0,
    "decay": {"r_min": 3.0, "r_max": 40.0, "bins": 12},
    "tolerances": {},
    "cache_dir": None,
    "initial_guess": "zero",
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("defect", "mm", "reference"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=dict)

    def __post_init__(self):
        self.raw = _merge(DEFAULTS, self.raw)
        sched = self.raw["schedule"]
        R = list(sched["R_QM"])
        if any(b <= a for a, b in zip(R, R[1:])):
            raise ValueError("R_QM schedule must be strictly increasing")
        if self.raw["scheme"] not in ("force", "energy"):
            raise ValueError("scheme must be 'force' or 'energy'")
        for R_QM in R:
            R_MM = self.R_MM(R_QM)
            if R_MM > self.R_DOM:
                raise ValueError(f"R_MM = {R_MM} exceeds R_DOM")
            if R_QM + self.width > R_MM:
                raise ValueError(f"R_QM + width exceeds R_MM at R_QM = {R_QM}")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls(json.loads(Path(path).read_text()))

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def R_DOM(self) -> float:
        return float(self.raw["R_DOM"])

    @property
    def width(self) -> float:
        return float(self.raw["schedule"]["width"])

    @property
    def schedule(self) -> list:
        return [float(r) for r in self.raw["schedule"]["R_QM"]]

    def R_MM(self, R_QM: float) -> float:
        """Fixed R_MM, or the power rule R_MM = factor * R_QM^power capped at ``max``."""
        rule = self.raw["schedule"]["R_MM"]
        if isinstance(rule, dict):
            val = float(rule.get("factor", 1.0)) * R_QM ** float(rule["power"])
            return float(min(max(val, R_QM + self.width), rule.get("max", self.R_DOM)))
        return float(rule)

    @property
    def solver(self) -> SolverConfig:
        return SolverConfig.from_dict(self.raw["solver"])

    def digest(self, keys=None) -> str:
        part = self.raw if keys is None else {k: self.raw[k] for k in keys}
        text = json.dumps(part, sort_keys=True, default=_jsonable)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=1, sort_keys=True, default=_jsonable)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(type(obj))
