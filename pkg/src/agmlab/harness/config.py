"""Experiment configuration: strict JSON schema, hashing, overrides."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

EXPERIMENTS = ("ellipse", "diagnet", "matfac", "track", "converge",
               "project_check", "fixed_point", "shampoo_curl")

_TOP_KEYS = {"experiment", "problem", "optimizers", "steps", "seeds", "n_seeds",
             "seed_base", "record_every", "output_dir", "params", "tolerances"}

_PROBLEM_KEYS = {
    "ellipse": {"kind", "a", "b", "noise_magnitude"},
    "diagnet": {"kind", "d", "n", "kappa", "noise_std", "batch_size", "seed", "checksum"},
    "matfac": {"kind", "dims", "rank", "n_meas", "sigma", "batch_size", "seed", "checksum"},
    "quadratic": {"kind", "h0", "alpha", "sigma0"},
    "separable_cubic": {"kind", "weights", "alpha"},
}

_OPTIMIZER_KEYS = {"kind", "eta", "beta1", "beta2", "c", "eps", "lam", "blocks",
                   "layers", "shape", "label", "steps"}


class ConfigError(ValueError):
    """Invalid experiment configuration (unknown keys are errors)."""


def _check_keys(given: dict, allowed: set, where: str):
    unknown = set(given) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}; "
                          f"allowed: {sorted(allowed)}")


@dataclass
class ExperimentConfig:
    experiment: str
    problem: dict = field(default_factory=dict)
    optimizers: list = field(default_factory=list)
    steps: int = 1000
    seeds: list | None = None
    n_seeds: int = 8
    seed_base: int = 0
    record_every: int = 100
    output_dir: str | None = None
    params: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; "
                              f"known: {list(EXPERIMENTS)}")
        if self.problem:
            kind = self.problem.get("kind")
            if kind is None:
                # partial problem dicts are merged over experiment defaults
                union = set().union(*_PROBLEM_KEYS.values())
                _check_keys(self.problem, union, "problem")
            elif kind not in _PROBLEM_KEYS:
                raise ConfigError(f"unknown problem kind {kind!r}")
            else:
                _check_keys(self.problem, _PROBLEM_KEYS[kind], f"problem ({kind})")
        for i, opt in enumerate(self.optimizers):
            _check_keys(opt, _OPTIMIZER_KEYS, f"optimizers[{i}]")
            if "kind" not in opt:
                raise ConfigError(f"optimizers[{i}] has no 'kind'")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.seeds is not None:
            self.seeds = [int(s) for s in self.seeds]

    def seed_list(self) -> list[int]:
        if self.seeds is not None:
            return list(self.seeds)
        return [self.seed_base + i for i in range(self.n_seeds)]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        _check_keys(d, _TOP_KEYS, "top level")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def with_override(self, dotted_key: str, value) -> "ExperimentConfig":
        """Return a copy with ``a.b.c=value`` applied (values JSON-parsed)."""
        d = self.to_dict()
        parts = dotted_key.split(".")
        node = d
        for p in parts[:-1]:
            node = node[int(p)] if isinstance(node, list) else node.setdefault(p, {})
        leaf = parts[-1]
        if isinstance(node, list):
            node[int(leaf)] = value
        else:
            node[leaf] = value
        return ExperimentConfig.from_dict(d)
