"""Declarative run configuration (TOML) with strict key checking."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import re
import typing
from dataclasses import dataclass
from dataclasses import field as _field
from typing import Any

import tomli
import tomli_w

from .costs import COST_KINDS, NO_WEIGHT, SIGMA_MEM_SQ, MapHead
from .errors import ConfigError
from .schedules import InterpolantSchedule, VpRateTable, rectified_flow, vp_to_fm_schedule
from .toy import GaussianMixture, target_from_spec


def _key(name):
    """TOML spelling of a dataclass field (``lam`` is written ``lambda``)."""
    return "lambda" if name == "lam" else name


@dataclass
class TargetSpec:
    kind: str = "mixture"
    means: list = _field(default_factory=lambda: [[-1.5, -1.0], [1.5, 1.0]])
    std: float = 0.5

    def distribution(self) -> GaussianMixture:
        if self.kind not in ("mixture", "gaussian", "point"):
            raise ConfigError(f"target.kind must be mixture, gaussian or point, got {self.kind!r}")
        if not self.means:
            raise ConfigError("target.means must list at least one mean")
        return target_from_spec({"kind": self.kind, "means": self.means, "mean": self.means[0],
                                 "std": self.std})


@dataclass
class FieldSpec:
    dim: int = 2
    hidden: list = _field(default_factory=lambda: [64, 64, 64])
    init_seed: int = 0


@dataclass
class TrainSpec:
    steps: int = 3000
    batch: int = 256
    lr: float = 2e-3
    weight_decay: float = 0.01
    loss_threshold: float = 3.6
    seed: int = 0


@dataclass
class SamplerSpec:
    steps: int = 28
    mode: str = "ode"
    diffusion: str = "zero"
    t_start: float = 1e-3
    paths_per_seed: int = 1


@dataclass
class SceneSpec:
    subjects: int = 2
    maps_per_subject: int = 2
    gamma: float = 1.0
    smoothing: float = 1.0
    seed: int = 0
    grid: list = _field(default_factory=lambda: [8, 8])
    extent: float = 2.0
    slot_noise: float = 0.15

    def head(self, dim: int) -> MapHead:
        return MapHead.random(self.subjects, self.maps_per_subject, dim, seed=self.seed,
                              slot_noise=self.slot_noise, grid_shape=tuple(self.grid),
                              extent=self.extent, gamma=self.gamma, smoothing=self.smoothing)


@dataclass
class CostSpec:
    kind: str = "focus"
    lam: float = 0.0
    gamma_reg: float = 0.0
    weighting: str = SIGMA_MEM_SQ
    scene: str = "A"


@dataclass
class FinetuneSpec:
    lam: float = 100.0
    steps: int = 1000
    batch: int = 5
    subsample: int = 16
    lr: float = 1e-3
    hidden: list = _field(default_factory=lambda: [64, 64])
    seed: int = 0
    checkpoint_every: int = 0
    weighting: str = NO_WEIGHT


@dataclass
class SweepSpec:
    lam: list = _field(default_factory=list)


@dataclass
class RunConfig:
    schedule: Any = "rectified_flow"
    seeds: list = _field(default_factory=lambda: [0, 1, 2, 3, 4])
    out: str = "runs/default"
    target: TargetSpec = _field(default_factory=TargetSpec)
    field: FieldSpec = _field(default_factory=FieldSpec)
    train: TrainSpec = _field(default_factory=TrainSpec)
    sampler: SamplerSpec = _field(default_factory=SamplerSpec)
    scenes: dict = _field(default_factory=lambda: {"A": SceneSpec()})
    cost: CostSpec = _field(default_factory=CostSpec)
    finetune: FinetuneSpec = _field(default_factory=FinetuneSpec)
    sweep: SweepSpec = _field(default_factory=SweepSpec)

    # -- derived objects -------------------------------------------------

    def interpolant(self) -> InterpolantSchedule:
        return schedule_from_spec(self.schedule)

    def scene_head(self, name=None) -> MapHead:
        name = self.cost.scene if name is None else name
        if name not in self.scenes:
            raise ConfigError(f"cost refers to unknown scene {name!r}")
        return self.scenes[name].head(self.field.dim)

    def validate(self):
        schedule_from_spec(self.schedule)
        if self.target.distribution().dim != self.field.dim:
            raise ConfigError("target means do not match field.dim")
        if self.sampler.mode not in ("ode", "sde"):
            raise ConfigError(f"sampler.mode must be 'ode' or 'sde', got {self.sampler.mode!r}")
        if self.sampler.diffusion not in ("zero", "memoryless"):
            raise ConfigError(f"sampler.diffusion must be 'zero' or 'memoryless'")
        if self.cost.kind not in COST_KINDS:
            raise ConfigError(f"cost.kind must be one of {COST_KINDS}")
        for w in (self.cost.weighting, self.finetune.weighting):
            if w not in (NO_WEIGHT, SIGMA_MEM_SQ):
                raise ConfigError(f"unknown weighting {w!r}")
        if self.cost.scene not in self.scenes:
            raise ConfigError(f"cost.scene {self.cost.scene!r} is not declared under [scenes]")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if self.finetune.subsample > self.sampler.steps:
            raise ConfigError("finetune.subsample exceeds sampler.steps")
        return self

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return _to_dict(self)

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def dumps_portable(self) -> str:
        """Like :meth:`dumps` but without ``out``, so copies stored in run directories are location independent."""
        d = self.to_dict()
        d.pop("out")
        return tomli_w.dumps(d)

    def hash(self) -> str:
        """Digest of every setting except the output location."""
        d = self.to_dict()
        d.pop("out")
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict, text: str = "", source: str = "<config>") -> "RunConfig":
        return _from_dict(cls, data, (), text, source).validate()

    @classmethod
    def loads(cls, text: str, source: str = "<config>") -> "RunConfig":
        try:
            data = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{source}: {exc}") from None
        return cls.from_dict(data, text, source)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read(), str(path))


def _to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {_key(f.name): _to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {k: _to_dict(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_dict(v) for v in obj]
    return obj


def _line_of(text: str, section: tuple, key: str) -> int:
    header = re.compile(r"^\s*\[\[?\s*([^\]]+?)\s*\]\]?\s*$")
    assign = re.compile(rf"^\s*\"?{re.escape(key)}\"?\s*=")
    current = ()
    for no, line in enumerate(text.splitlines(), start=1):
        m = header.match(line)
        if m:
            current = tuple(p.strip().strip('"') for p in m.group(1).split("."))
            if current == section + (key,):
                return no
            continue
        if current == section and assign.match(line):
            return no
    return 0


def _fail(source, text, section, key, msg):
    line = _line_of(text, section, key) if text else 0
    where = f"{source}:{line}" if line else source
    raise ConfigError(f"{where}: {msg}")


def _from_dict(cls, data, section, text, source):
    if not isinstance(data, dict):
        _fail(source, text, section[:-1], section[-1] if section else "", f"[{'.'.join(section)}] must be a table")
    hints = typing.get_type_hints(cls)
    by_key = {_key(f.name): f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in by_key:
            _fail(source, text, section, key,
                  f"unknown key {key!r} in [{'.'.join(section) or 'root'}]")
        f = by_key[key]
        hint = hints[f.name]
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _from_dict(hint, value, section + (key,), text, source)
        elif f.name == "scenes":
            if not isinstance(value, dict):
                _fail(source, text, section, key, "scenes must be a table of named scenes")
            kwargs[f.name] = {name: _from_dict(SceneSpec, spec, section + (key, name), text, source)
                              for name, spec in value.items()}
        else:
            kwargs[f.name] = _coerce(value, f, hint, section, key, text, source)
    return cls(**kwargs)


def _coerce(value, f, hint, section, key, text, source):
    if hint is Any:
        return value
    ok = {int: isinstance(value, int) and not isinstance(value, bool),
          float: isinstance(value, (int, float)) and not isinstance(value, bool),
          str: isinstance(value, str),
          list: isinstance(value, list)}.get(hint, True)
    if not ok:
        _fail(source, text, section, key, f"{key!r} expects {hint.__name__}, got {type(value).__name__}")
    if hint is float:
        return float(value)
    return value


def schedule_from_spec(spec) -> InterpolantSchedule:
    if spec == "rectified_flow":
        return rectified_flow()
    if isinstance(spec, dict) and set(spec) == {"vp"} and isinstance(spec["vp"], dict):
        vp = spec["vp"]
        unknown = set(vp) - {"K", "beta_min", "beta_max"}
        if unknown:
            raise ConfigError(f"unknown vp schedule keys {sorted(unknown)}")
        try:
            table = VpRateTable.linear(int(vp["K"]), float(vp.get("beta_min", 1e-4)),
                                       float(vp.get("beta_max", 2e-2)))
        except KeyError:
            raise ConfigError("vp schedule needs K") from None
        return vp_to_fm_schedule(table)
    raise ConfigError(f"schedule must be 'rectified_flow' or {{ vp = {{...}} }}, got {spec!r}")


def vp_table_from_spec(spec) -> VpRateTable:
    if not (isinstance(spec, dict) and "vp" in spec):
        raise ConfigError("convert-vp needs schedule = { vp = { K = ..., beta_min = ..., beta_max = ... } }")
    vp = spec["vp"]
    return VpRateTable.linear(int(vp["K"]), float(vp.get("beta_min", 1e-4)), float(vp.get("beta_max", 2e-2)))


def default_config() -> RunConfig:
    return RunConfig().validate()
