"""Experiment configuration: TOML (or a JSON mirror) into a validated, hashable record."""
from __future__ import annotations

import copy
import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.stats import norm

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .control_value import Budget
from .errors import ConfigurationError
from .measures import EmpiricalMeasure
from .model import ModelSpec, zoo

POLICY_CLASSES = ("constant", "table")


@dataclass
class ModelSection:
    name: str = "bang_bang"
    params: dict = field(default_factory=dict)


@dataclass
class GridSection:
    t0: float = 0.0
    T: float | None = None  # None keeps the model's own horizon
    n_steps: int = 32


@dataclass
class InitSection:
    """Gaussian initial law represented by its midpoint quantiles."""

    mean: float = 0.9
    std: float = 0.3
    atoms: int = 256


@dataclass
class BudgetSection:
    worlds: int = 32
    particles: int = 2048
    train_worlds: int = 8
    train_particles: int = 256
    n_blocks: int = 4
    n_xbins: int = 17
    n_mbins: int = 9
    passes: int = 2
    max_evals: int = 20000
    n_nodes: int = 4096
    train_nodes: int = 256


@dataclass
class ControlSection:
    policy_class: str = "table"
    index: int = 0  # constant action used by ``simulate``


@dataclass
class NPlayerSection:
    n: int = 8
    m: float | None = 8.0
    eps0: float = 0.0
    eps1: float = 0.0
    worlds: int = 2048
    train_worlds: int = 256
    reg_samples: int = 8


@dataclass
class DppSection:
    theta: float = 0.5
    n_nodes: int = 7
    enumerate: bool = True


@dataclass
class SandwichSection:
    n_list: list = field(default_factory=lambda: [8])
    m_list: list = field(default_factory=lambda: [8.0])
    eps_schedule: list = field(default_factory=lambda: [0.2, 0.1, 0.05])


@dataclass
class CompactSection:
    L: float = 1.0
    tau: float = 1.0
    samples: int = 64
    worlds: int = 8
    particles: int = 256
    sigma0: float = 0.3
    eps_list: list = field(default_factory=lambda: [0.2, 0.1, 0.05])


@dataclass
class WassersteinSection:
    instances: int = 100
    max_n: int = 6
    max_d: int = 3
    sort_n: int = 512


@dataclass
class ItoWentzellSection:
    n_steps: list = field(default_factory=lambda: [32, 64, 128])
    worlds: int = 32
    particles: int = 2048
    freq: float = 1.0
    phase: float = 0.3


SECTIONS = {
    "model": ModelSection,
    "grid": GridSection,
    "init": InitSection,
    "budget": BudgetSection,
    "control": ControlSection,
    "nplayer": NPlayerSection,
    "dpp": DppSection,
    "sandwich": SandwichSection,
    "compactset": CompactSection,
    "wasserstein": WassersteinSection,
    "ito_wentzell": ItoWentzellSection,
}


@dataclass
class ExperimentConfig:
    seed: int
    model: ModelSection = field(default_factory=ModelSection)
    grid: GridSection = field(default_factory=GridSection)
    init: InitSection = field(default_factory=InitSection)
    budget: BudgetSection = field(default_factory=BudgetSection)
    control: ControlSection = field(default_factory=ControlSection)
    nplayer: NPlayerSection = field(default_factory=NPlayerSection)
    dpp: DppSection = field(default_factory=DppSection)
    sandwich: SandwichSection = field(default_factory=SandwichSection)
    compactset: CompactSection = field(default_factory=CompactSection)
    wasserstein: WassersteinSection = field(default_factory=WassersteinSection)
    ito_wentzell: ItoWentzellSection = field(default_factory=ItoWentzellSection)

    # --- construction ---------------------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = copy.deepcopy(raw)
        if "seed" not in raw:
            raise ConfigurationError("seed: required (no implicit randomness)")
        unknown = set(raw) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ConfigurationError(f"{sorted(unknown)[0]}: unknown section")
        kwargs = {"seed": raw.pop("seed")}
        for name, section_cls in SECTIONS.items():
            body = raw.get(name, {})
            if not isinstance(body, dict):
                raise ConfigurationError(f"{name}: expected a table")
            allowed = {f.name for f in fields(section_cls)}
            for key in body:
                if key not in allowed:
                    raise ConfigurationError(f"{name}.{key}: unknown field")
            if "m" in body and body["m"] in ("none", "None"):
                body["m"] = None
            kwargs[name] = section_cls(**body)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or not 0 <= self.seed < 2 ** 64:
            raise ConfigurationError("seed: must be an unsigned 64-bit integer")
        for name in SECTIONS:
            section = getattr(self, name)
            for f in fields(section):
                value = getattr(section, f.name)
                where = f"{name}.{f.name}"
                if f.type == "int" and f.name != "index":
                    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                        raise ConfigurationError(f"{where}: must be a positive integer")
                elif f.type.startswith("float"):
                    if value is None and "None" in f.type:
                        continue
                    if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value):
                        raise ConfigurationError(f"{where}: must be a finite number")
                elif f.type == "list":
                    if not isinstance(value, list) or not value:
                        raise ConfigurationError(f"{where}: must be a nonempty list")
        for key in ("eps0", "eps1"):
            if getattr(self.nplayer, key) < 0:
                raise ConfigurationError(f"nplayer.{key}: must be nonnegative")
        if any(e < 0 for e in self.sandwich.eps_schedule):
            raise ConfigurationError("sandwich.eps_schedule: values must be nonnegative")
        if self.nplayer.m is not None and self.nplayer.m <= 0:
            raise ConfigurationError("nplayer.m: must be positive or 'none'")
        if self.control.policy_class not in POLICY_CLASSES:
            raise ConfigurationError(f"control.policy_class: choose from {POLICY_CLASSES}")
        if self.control.index < 0:
            raise ConfigurationError("control.index: must be nonnegative")
        if self.init.std < 0:
            raise ConfigurationError("init.std: must be nonnegative")
        if self.grid.t0 < 0:
            raise ConfigurationError("grid.t0: must be nonnegative")
        if self.budget.n_blocks and self.grid.n_steps % self.budget.n_blocks:
            raise ConfigurationError("budget.n_blocks: must divide grid.n_steps")
        if self.compactset.L < 0:
            raise ConfigurationError("compactset.L: must be nonnegative")
        self.build_model()  # surfaces bad model names and parameters

    # --- derived objects ------------------------------------------------------------

    def build_model(self) -> ModelSpec:
        params = dict(self.model.params)
        if self.grid.T is not None:
            params["horizon"] = self.grid.T
        return zoo(self.model.name, **params)

    def build_budget(self, **overrides) -> Budget:
        b = self.budget
        kw = dict(n_worlds=b.worlds, n_particles=b.particles, n_steps=self.grid.n_steps,
                  train_worlds=b.train_worlds, train_particles=b.train_particles, n_blocks=b.n_blocks,
                  n_xbins=b.n_xbins, n_mbins=b.n_mbins, passes=b.passes, max_evals=b.max_evals,
                  n_nodes=b.n_nodes, train_nodes=b.train_nodes, seed=self.seed)
        kw.update(overrides)
        return Budget(**kw)

    def initial_law(self) -> EmpiricalMeasure:
        q = (np.arange(self.init.atoms) + 0.5) / self.init.atoms
        return EmpiricalMeasure(self.init.mean + self.init.std * norm.ppf(q))

    # --- identity -------------------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    """Reads TOML, or JSON when the suffix is .json; ``seed`` overrides the file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigurationError(f"cannot parse config {path}: {exc}") from None
    if seed is not None:
        raw["seed"] = seed
    try:
        return ExperimentConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None
