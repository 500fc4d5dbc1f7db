"""Run configuration: one structured-text file drives the whole pipeline."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from hoe.adapters import DEFAULT_KEEP_FRACTION, DEFAULT_RESCALE_CANDIDATES
from hoe.env import EnvSpec
from hoe.errors import InvalidInput
from hoe.simplex import PreferenceVector, validate
from hoe.trainer import PpoConfig


@dataclass
class PolicySpec:
    hidden: tuple[int, ...] = (32, 32)
    # "attribute": frozen token-attribute unembedding over a softplus output;
    # "logits": the last layer emits one logit per token
    head: str = "attribute"
    output_scale: float = 0.01

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.head not in ("attribute", "logits"):
            raise InvalidInput(f"unknown policy head {self.head!r}")


@dataclass
class ExtractionSpec:
    keep_fraction: float = DEFAULT_KEEP_FRACTION
    rank: int = 4
    rescale_candidates: tuple[float, ...] = DEFAULT_RESCALE_CANDIDATES
    merge_keep_fraction: float = 1.0

    def __post_init__(self):
        self.rescale_candidates = tuple(float(c) for c in self.rescale_candidates)
        if not 0 < self.keep_fraction <= 1 or not 0 < self.merge_keep_fraction <= 1:
            raise InvalidInput("keep fractions must lie in (0, 1]")
        if self.rank < 1:
            raise InvalidInput("rank must be positive")
        if not self.rescale_candidates or min(self.rescale_candidates) <= 0:
            raise InvalidInput("rescale candidates must be non-empty and positive")


@dataclass
class ExpertPlan:
    """Preferences of the multi-objective LoRA experts (merged) and of the router experts.

    Single-objective experts (one per objective) are always present.
    """

    merged: list[tuple[float, ...]] = field(default_factory=list)
    routers: list[tuple[float, ...]] = field(default_factory=list)

    @classmethod
    def default(cls, n: int) -> "ExpertPlan":
        if n == 2:
            return cls([(0.5, 0.5)], [(0.5, 0.5)])
        if n == 3:
            return cls([(1 / 3,) * 3], [(0.25, 0.25, 0.5)])
        if n == 5:
            return cls([(1 / 3, 1 / 3, 1 / 3, 0.0, 0.0)], [(0.2,) * 5])
        return cls([(1 / n,) * n], [(1 / n,) * n])

    def validated(self, n: int) -> "ExpertPlan":
        def check(ps):
            out = []
            for p in ps:
                if len(p) != n:
                    raise InvalidInput(f"plan preference {p} has {len(p)} entries for {n} objectives")
                out.append(validate(p, tol=0.015).weights)  # admits two-decimal entries such as 0.33
            return out

        return ExpertPlan(check(self.merged), check(self.routers))

    def merged_prefs(self) -> list[PreferenceVector]:
        return [PreferenceVector(tuple(p)) for p in self.merged]

    def router_prefs(self) -> list[PreferenceVector]:
        return [PreferenceVector(tuple(p)) for p in self.routers]


@dataclass
class OmdSpec:
    alpha: float = 0.1
    smoothing_mu: float = 1.0
    schedule: str = "constant"
    lambda_in_step: bool = True
    z_margin: float = 0.1
    z_star_episodes: int = 200

    def __post_init__(self):
        if self.alpha < 0 or self.smoothing_mu <= 0:
            raise InvalidInput("alpha must be >= 0 and smoothing_mu > 0")
        if self.schedule not in ("constant", "robbins_monro"):
            raise InvalidInput(f"unknown OMD schedule {self.schedule!r}")


@dataclass
class EvalSpec:
    grid_step: float = 0.1
    episodes: int = 200
    baselines: tuple[str, ...] = ("rs", "mod")

    def __post_init__(self):
        self.baselines = tuple(self.baselines)
        unknown = set(self.baselines) - {"rs", "mod", "morlhf"}
        if unknown:
            raise InvalidInput(f"unknown baselines {sorted(unknown)}")
        if self.episodes < 1:
            raise InvalidInput("eval episodes must be >= 1")


def _singles_ppo() -> PpoConfig:
    return PpoConfig(total_iterations=40, learning_rate=0.01)


def _router_ppo() -> PpoConfig:
    return PpoConfig(total_iterations=78, learning_rate=0.01)


def _morlhf_ppo() -> PpoConfig:
    # a [0.5, 0.5] compromise beats the vertices by only 1/6 in linear value; 40 iterations often stop at a vertex
    return PpoConfig(total_iterations=150, learning_rate=0.01, advantage_norm="mixed")



@dataclass
class RunConfig:
    objectives: int = 2
    env: EnvSpec = field(default_factory=EnvSpec)
    policy: PolicySpec = field(default_factory=PolicySpec)
    extraction: ExtractionSpec = field(default_factory=ExtractionSpec)
    plan: ExpertPlan | None = None
    singles: PpoConfig = field(default_factory=_singles_ppo)
    routers: PpoConfig = field(default_factory=_router_ppo)
    morlhf: PpoConfig = field(default_factory=_morlhf_ppo)
    omd: OmdSpec = field(default_factory=OmdSpec)
    scalarization: str = "stch"
    eval: EvalSpec = field(default_factory=EvalSpec)
    oracle_fraction: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.env.n_objectives != self.objectives:
            raise InvalidInput(f"env has {self.env.n_objectives} objectives, config says {self.objectives}")
        if self.scalarization not in ("stch", "linear"):
            raise InvalidInput(f"unknown scalarization {self.scalarization!r}")
        self.plan = (self.plan or ExpertPlan.default(self.objectives)).validated(self.objectives)

    def with_seed(self, seed: int) -> "RunConfig":
        """Same config with every seed (env, trainers, run) set from ``seed``."""
        return replace(
            self,
            seed=seed,
            env=replace(self.env, seed=seed),
            singles=replace(self.singles, seed=seed),
            routers=replace(self.routers, seed=seed),
            morlhf=replace(self.morlhf, seed=seed),
        )

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        data = dict(data or {})
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidInput(f"unknown config keys {sorted(unknown)}")
        n = int(data.get("objectives", data.get("env", {}).get("n_objectives", 2)))
        env = dict(data.get("env") or {})
        env.setdefault("n_objectives", n)
        if "vocab_size" not in env:
            env["vocab_size"] = n + 1
        kw = {"objectives": n, "env": _build(EnvSpec, env)}
        nested = {"policy": PolicySpec, "extraction": ExtractionSpec, "singles": PpoConfig, "routers": PpoConfig,
                  "morlhf": PpoConfig, "omd": OmdSpec, "eval": EvalSpec}
        ppo_defaults = {"singles": _singles_ppo, "routers": _router_ppo, "morlhf": _morlhf_ppo}
        for key, typ in nested.items():
            if key in data:
                base = asdict(ppo_defaults[key]()) if key in ppo_defaults else {}
                kw[key] = _build(typ, {**base, **(data[key] or {})})
        if data.get("plan") is not None:
            plan = data["plan"]
            default = ExpertPlan.default(n)
            kw["plan"] = ExpertPlan(
                [tuple(p) for p in plan.get("merged", default.merged)],
                [tuple(p) for p in plan.get("routers", default.routers)],
            )
        for key in ("scalarization", "oracle_fraction", "seed"):
            if key in data:
                kw[key] = data[key]
        return cls(**kw)


def _build(typ, values: dict):
    names = {f.name for f in fields(typ)}
    unknown = set(values) - names
    if unknown:
        raise InvalidInput(f"unknown {typ.__name__} keys {sorted(unknown)}")
    try:
        return typ(**values)
    except TypeError as exc:
        raise InvalidInput(str(exc)) from exc


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def load_config(path: str | Path | None) -> RunConfig:
    """Read YAML (or JSON, a YAML subset); ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise InvalidInput(f"cannot parse config {path}: {exc}") from exc
    except OSError as exc:
        raise InvalidInput(f"cannot read config {path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise InvalidInput("config root must be a mapping")
    return RunConfig.from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
