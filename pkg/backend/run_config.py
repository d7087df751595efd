import json
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from config import config
from core import Grid, History, ProblemDef, SolverConfig, Trajectory, build_grid
from dde import IntegratorSettings
from exceptions import ConfigError, InvalidParams, MissingCoefficients, NonIntegerDelay
from models import validation_messages
from output_writer import read_control_csv
from registry import ModelBuilder, ModelRegistry, default_registry

logger = logging.getLogger(__name__)


class ModelSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    parameters: Dict[str, Any] = Field(default_factory=dict)


class GridSection(BaseModel):
    """Time mesh; the end time is t0 + horizon"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    t0: float = 0.0
    horizon: Optional[float] = Field(None, gt=0)  # None -> the model's own horizon
    N: int = Field(..., ge=1)


class OutputSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    directory: str = config.OUTPUT_DIR
    precision: int = Field(config.FLOAT_PRECISION, ge=1, le=17)


class RunConfig(BaseModel):
    """Top-level JSON run configuration"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    description: str = ""
    model: ModelSection
    grid: GridSection
    solver: SolverConfig = SolverConfig()
    integrator: IntegratorSettings = IntegratorSettings()
    output: OutputSection = OutputSection()
    # Scalar, one value per control, or a path to a controls CSV (warm start)
    initial_control: Union[float, List[float], str, None] = None


@dataclass
class ResolvedRun:
    """A validated run configuration with its problem, history and grid built"""
    config: RunConfig
    builder: ModelBuilder
    params: BaseModel
    problem: ProblemDef
    history: History
    grid: Grid
    source: Optional[str] = None  # Path of the config file

    def describe_grid(self) -> str:
        steps = ", ".join(str(d) for d in self.grid.delay_steps) or "none"
        return (f"Grid: t0={self.grid.t0:g}, T={self.grid.T:g}, N={self.grid.N}, "
                f"dt={self.grid.dt:.6g}, delay nodes=[{steps}]")

    def initial_control(self) -> Union[None, np.ndarray, Trajectory]:
        value = self.config.initial_control
        if value is None:
            return None
        if isinstance(value, str):
            base = os.path.dirname(self.source) if self.source else ""
            path = value if os.path.isabs(value) else os.path.join(base, value)
            return read_control_csv(path, self.grid, self.problem.control_names)
        array = np.atleast_1d(np.asarray(value, dtype=float))
        if array.shape not in ((1,), (self.problem.m,)):
            raise ConfigError([f"initial_control: expected 1 or {self.problem.m} values, "
                               f"got {array.size}"])
        return array


def parse_run_config(raw: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(validation_messages(e)) from e


def load_run_config(path: str) -> RunConfig:
    """Read and validate a JSON run configuration"""
    try:
        with open(path, "r", encoding="utf-8") as file:
            raw = json.load(file)
    except OSError as e:
        raise ConfigError([f"{path}: {e.strerror or e}"]) from e
    except json.JSONDecodeError as e:
        raise ConfigError([f"{path}: invalid JSON ({e.msg} at line {e.lineno})"]) from e
    if not isinstance(raw, dict):
        raise ConfigError([f"{path}: top level must be a JSON object"])
    return parse_run_config(raw)


def resolve_run(run_config: RunConfig, registry: Optional[ModelRegistry] = None,
                source: Optional[str] = None) -> ResolvedRun:
    """Build the problem, history and grid a run configuration describes"""
    registry = registry or default_registry()
    try:
        builder = registry.get(run_config.model.name)
    except KeyError as e:
        raise ConfigError([f"model.name: {e.args[0]}"]) from e

    try:
        params = builder.parse_params(run_config.model.parameters)
    except InvalidParams as e:
        raise ConfigError([f"model.parameters.{message}" for message in e.messages]) from e
    try:
        problem = builder.build_problem(params)
        history = builder.initial_history(params)
    except MissingCoefficients as e:
        raise ConfigError([f"model.parameters.{name}: required" for name in e.missing]) from e
    except InvalidParams as e:
        raise ConfigError([f"model.parameters: {message}" for message in e.messages]) from e

    horizon = run_config.grid.horizon or problem.horizon
    if horizon is None:
        raise ConfigError(["grid.horizon: required for this model"])
    t0 = run_config.grid.t0
    try:
        grid = build_grid(t0, t0 + horizon, run_config.grid.N, problem.delays)
    except NonIntegerDelay as e:
        raise ConfigError([f"grid.N: {e}"]) from e

    logger.debug(f"Resolved '{problem.name}' run on N={grid.N}")
    return ResolvedRun(config=run_config, builder=builder, params=params, problem=problem,
                       history=history, grid=grid, source=source)


def load_run(path: str, registry: Optional[ModelRegistry] = None) -> ResolvedRun:
    return resolve_run(load_run_config(path), registry, source=path)
