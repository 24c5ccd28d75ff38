"""Pipeline configuration: one JSON document with generator, ei, ec and bo sections."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .ec import ECConfig
from .ei import SolverConfig
from .landscape import GeneratorConfig
from .params import EIParams, ParameterError
from .policy import BOConfig, PolicyParams


class ConfigError(ValueError):
    pass


SECTIONS = ("seed", "generator", "ei", "ec", "bo")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    ei: EIParams = field(default_factory=EIParams)
    solver: SolverConfig = field(default_factory=SolverConfig)
    ec: ECConfig = field(default_factory=ECConfig)
    bo: BOConfig = field(default_factory=BOConfig)
    # evaluated before the Latin hypercube design; the identity policy is the no-policy control
    initial_policies: tuple[PolicyParams, ...] = (PolicyParams.identity(),)
    archetype_slack: float = 100.0

    def to_dict(self) -> dict:
        gen = asdict(self.generator)
        ei = self.ei.to_dict()
        ei["solver"] = asdict(self.solver)
        bo = asdict(self.bo)
        bo["initial_policies"] = [p.to_dict() for p in self.initial_policies]
        bo["archetype_slack"] = self.archetype_slack
        return {"seed": self.seed, "generator": gen, "ei": ei, "ec": asdict(self.ec), "bo": bo}

    @classmethod
    def from_dict(cls, data: dict | None) -> "PipelineConfig":
        data = dict(data or {})
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        try:
            seed = int(data.get("seed", 0))
            generator = GeneratorConfig.from_dict(data.get("generator"))
            ei_data = dict(data.get("ei") or {})
            solver = SolverConfig(**(ei_data.pop("solver", None) or {}))
            unknown = set(ei_data) - {"crops", "economics", "neighbor_scope"}
            if unknown:
                raise ConfigError(f"ei: unknown keys {sorted(unknown)}")
            ei = EIParams.from_dict(ei_data)
            ec = ECConfig.from_dict(data.get("ec"))
            bo_data = dict(data.get("bo") or {})
            initial = bo_data.pop("initial_policies", None)
            slack = float(bo_data.pop("archetype_slack", 100.0))
            bo = BOConfig.from_dict(bo_data)
            policies = (tuple(PolicyParams.from_dict(p) for p in initial) if initial is not None
                        else (PolicyParams.identity(),))
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(seed, generator, ei, solver, ec, bo, policies, slack)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    return PipelineConfig.from_dict(data)
