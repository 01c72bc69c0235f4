"""
Shared data models for scenario, parameter and report files
Scenario files (JSON or TOML) are parsed here into engine configurations
"""

import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic import ValidationError as PydanticValidationError

from adversary import STRATEGIES
from app_config import get_config
from exceptions import ConfigurationError, ValidationError
from params import Params
from protocol import UniformThresholds
from simnet import (
    AdversaryConfig,
    ChurnSpec,
    DelayModel,
    ScriptedChurn,
    ScriptedOp,
    SimConfig,
    WorkloadSpec,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ParamsModel(StrictModel):
    """Parameter bundle as written in files"""
    alpha: float = Field(ge=0, lt=1)
    f: int = Field(ge=1)
    ns_min: int = Field(ge=1)
    gamma: Optional[float] = None
    beta: Optional[float] = None
    d: float = Field(default=1.0, gt=0)

    def to_params(self) -> Params:
        return Params(alpha=self.alpha, f=self.f, ns_min=self.ns_min, gamma=self.gamma, beta=self.beta, d=self.d)


class DelayModelSpec(StrictModel):
    name: Literal["uniform", "constant", "bimodal", "split"] = "uniform"
    epsilon: Optional[float] = Field(default=None, gt=0, lt=1)
    fast: float = Field(default=0.1, gt=0, le=1)
    slow: float = Field(default=0.9, gt=0, le=1)
    fast_fraction: float = Field(default=0.5, ge=0, le=1)
    fast_nodes: List[str] = Field(default_factory=list)

    def to_delay_model(self) -> DelayModel:
        epsilon = self.epsilon if self.epsilon is not None else get_config().delay_epsilon
        return DelayModel(self.name, epsilon, self.fast, self.slow, self.fast_fraction, frozenset(self.fast_nodes))


class ScriptedChurnModel(StrictModel):
    time: float = Field(ge=0)
    kind: Literal["enter", "leave"]
    server: Optional[str] = None


class ChurnSpecModel(StrictModel):
    mode: Literal["none", "rate", "scripted"] = "none"
    attempt_gap: float = Field(default=0.25, gt=0)
    leave_bias: float = Field(default=0.5, ge=0, le=1)
    budget_multiplier: float = Field(default=1.0, gt=0)
    events: List[ScriptedChurnModel] = Field(default_factory=list)

    def to_churn(self) -> ChurnSpec:
        events = [ScriptedChurn(e.time, e.kind, e.server) for e in self.events]
        return ChurnSpec(self.mode, self.attempt_gap, self.leave_bias, self.budget_multiplier, events)


class ScriptedOpModel(StrictModel):
    time: float = Field(ge=0)
    client: str
    kind: Literal["read", "write"]
    value: Any = None

    @model_validator(mode="after")
    def write_has_value(self) -> "ScriptedOpModel":
        # null is the register's initial value and cannot be written
        if self.kind == "write" and self.value is None:
            raise ValueError(f"scripted write by {self.client} at t={self.time} needs a non-null value")
        return self


class WorkloadSpecModel(StrictModel):
    ops_per_client: int = Field(default=10, ge=0)
    write_ratio: float = Field(default=0.5, ge=0, le=1)
    think_time: Tuple[float, float] = (0.0, 1.0)
    client_entrants: int = Field(default=0, ge=0)
    entrant_window: Tuple[float, float] = (0.0, 0.5)
    entrant_times: List[float] = Field(default_factory=list)
    crash_clients: int = Field(default=0, ge=0)
    leave_clients: int = Field(default=0, ge=0)
    scripted_ops: List[ScriptedOpModel] = Field(default_factory=list)

    def to_workload(self) -> WorkloadSpec:
        return WorkloadSpec(
            ops_per_client=self.ops_per_client,
            write_ratio=self.write_ratio,
            think_time=self.think_time,
            client_entrants=self.client_entrants,
            entrant_window=self.entrant_window,
            entrant_times=list(self.entrant_times),
            crash_clients=self.crash_clients,
            leave_clients=self.leave_clients,
            scripted_ops=[ScriptedOp(op.time, op.client, op.kind, op.value) for op in self.scripted_ops],
        )


class AdversaryModel(StrictModel):
    strategy: str = "silent"
    params: Dict[str, Any] = Field(default_factory=dict)
    corrupt_count: int = Field(default=0, ge=0)
    corrupt_entrants: int = Field(default=0, ge=0)
    corrupt_ids: List[str] = Field(default_factory=list)
    seed: int = 0

    @field_validator("strategy")
    @classmethod
    def known_strategy(cls, value: str) -> str:
        if value not in STRATEGIES:
            raise ValueError(f"unknown strategy {value!r}; known: {sorted(STRATEGIES)}")
        return value

    def to_adversary(self) -> AdversaryConfig:
        return AdversaryConfig(self.strategy, dict(self.params), self.corrupt_count,
                               self.corrupt_entrants, list(self.corrupt_ids), self.seed)


class UniformModel(StrictModel):
    joined_echoes: int = Field(default=1, ge=1)
    join_replies: int = Field(default=1, ge=1)
    phase_replies: int = Field(default=1, ge=1)
    support: int = Field(default=1, ge=1)


class SimConfigModel(StrictModel):
    params: ParamsModel
    initial_servers: int = Field(ge=1)
    initial_clients: int = Field(default=3, ge=0)
    duration: float = Field(default=20.0, gt=0)
    churn: ChurnSpecModel = Field(default_factory=ChurnSpecModel)
    workload: WorkloadSpecModel = Field(default_factory=WorkloadSpecModel)
    adversary: AdversaryModel = Field(default_factory=AdversaryModel)
    seed: int = 0
    delay: DelayModelSpec = Field(default_factory=DelayModelSpec)
    override_feasibility: bool = False
    client_variant: Literal["abcc", "uniform"] = "abcc"
    uniform: UniformModel = Field(default_factory=UniformModel)
    trace_payloads: Optional[bool] = None
    drain_factor: Optional[float] = Field(default=None, ge=0)

    def to_sim_config(self, seed: Optional[int] = None, duration: Optional[float] = None,
                      override_feasibility: Optional[bool] = None) -> SimConfig:
        """Engine config; unset trace settings are resolved from the environment here and recorded"""
        settings = get_config()
        return SimConfig(
            params=self.params.to_params(),
            initial_servers=self.initial_servers,
            initial_clients=self.initial_clients,
            duration=duration if duration is not None else self.duration,
            churn=self.churn.to_churn(),
            workload=self.workload.to_workload(),
            adversary=self.adversary.to_adversary(),
            seed=seed if seed is not None else self.seed,
            delay=self.delay.to_delay_model(),
            override_feasibility=self.override_feasibility if override_feasibility is None else override_feasibility,
            client_variant=self.client_variant,
            uniform=UniformThresholds(**self.uniform.model_dump()),
            trace_payloads=self.trace_payloads if self.trace_payloads is not None else settings.trace_payloads,
            drain_factor=self.drain_factor if self.drain_factor is not None else settings.drain_factor,
        )


class ScenarioModel(StrictModel):
    """A named, repeatable simulation with its expected outcome"""
    name: str
    description: str = ""
    sim_config: SimConfigModel
    expected: Literal["pass", "violation"] = "pass"
    violation_kind: Optional[Literal["linearizability", "liveness", "audit"]] = None
    repeat: int = Field(default=1, ge=1)

    def check_consistency(self) -> None:
        """Expected violations need a run the engine would otherwise refuse"""
        cfg = self.sim_config
        if self.expected == "violation" and not (cfg.override_feasibility or cfg.client_variant == "uniform"):
            raise ConfigurationError(
                f"scenario {self.name!r} expects a violation but neither overrides feasibility "
                f"nor selects the uniform client"
            )


class LatencyStats(BaseModel):
    count: int = 0
    max: Optional[float] = None
    mean: Optional[float] = None
    p95: Optional[float] = None


class RunSummaryModel(BaseModel):
    seed: int
    linearizable: bool
    liveness_violations: int
    audit_failures: List[str]
    ops: int
    completed_ops: int
    churn_events: int = 0
    matches_expected: bool
    digest: str


class BatchReportModel(BaseModel):
    """Aggregated outcome of a scenario batch"""
    scenario: str
    expected: str
    violation_kind: Optional[str] = None
    runs: List[RunSummaryModel]
    join_latency: LatencyStats
    op_latency: LatencyStats

    @property
    def contradictions(self) -> List[int]:
        return [run.seed for run in self.runs if not run.matches_expected]

    @property
    def ok(self) -> bool:
        return not self.contradictions


def _format_errors(error: PydanticValidationError) -> str:
    parts = []
    for item in error.errors():
        location = ".".join(str(p) for p in item["loc"])
        parts.append(f"{location}: {item['msg']}")
    return "; ".join(parts)


def _read_mapping(path: Path) -> dict:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ValidationError(f"cannot read {path}: {e}") from e
    try:
        if path.suffix.lower() == ".toml":
            return tomllib.loads(text)
        return json.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ValidationError(f"{path}: {e}") from e


def scenario_from_mapping(data: dict) -> ScenarioModel:
    try:
        scenario = ScenarioModel.model_validate(data)
    except PydanticValidationError as e:
        raise ValidationError(f"invalid scenario: {_format_errors(e)}") from e
    scenario.check_consistency()
    return scenario


def load_scenario(path: str) -> ScenarioModel:
    """
    Load a scenario file

    Args:
        path: .json or .toml file

    Returns:
        Parsed ScenarioModel

    Raises:
        ValidationError: Unreadable file or schema mismatch
        ConfigurationError: Expected violation without override or uniform client
    """
    return scenario_from_mapping(_read_mapping(Path(path)))


def _parse_scalar(text: str) -> Any:
    text = text.strip()
    if text.lower() in ("none", "null", "n/a", ""):
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError as e:
        raise ValidationError(f"not a number: {text!r}") from e


def parse_params_text(text: str) -> ParamsModel:
    """key=value lines; '#' starts a comment"""
    data: Dict[str, Any] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"line {number}: expected key=value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        data[key.strip()] = _parse_scalar(value)
    return params_from_mapping(data)


def params_from_mapping(data: dict) -> ParamsModel:
    try:
        return ParamsModel.model_validate(data)
    except PydanticValidationError as e:
        raise ValidationError(f"invalid parameters: {_format_errors(e)}") from e


def parse_params_file(path: str) -> ParamsModel:
    """Read a parameter bundle from JSON or key=value text"""
    target = Path(path)
    if target.suffix.lower() == ".json":
        return params_from_mapping(_read_mapping(target))
    try:
        return parse_params_text(target.read_text(encoding="utf-8"))
    except OSError as e:
        raise ValidationError(f"cannot read {path}: {e}") from e
