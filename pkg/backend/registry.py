from abc import ABC, abstractmethod
from typing import Any, Dict, List, Mapping, Optional, Type

from pydantic import BaseModel

from core import History, ProblemDef
from models import (LqParams, SidartheVParams, SirvParams, coerce_params,
                    lq_problem_from_params, sidarthe_v_history, sidarthe_v_problem,
                    sirv_history, sirv_problem)


class ModelBuilder(ABC):
    """Abstract base class for named problem builders"""

    name: str = ""
    compartmental: bool = False  # States are population fractions
    params_model: Type[BaseModel]

    def parse_params(self, raw: Optional[Mapping[str, Any]]) -> BaseModel:
        """Validate raw parameters (InvalidParams on failure)"""
        return coerce_params(self.params_model, raw)

    @abstractmethod
    def build_problem(self, params: BaseModel) -> ProblemDef:
        """Return the problem definition for validated parameters"""
        pass

    @abstractmethod
    def initial_history(self, params: BaseModel) -> History:
        """Return the pre-horizon history for validated parameters"""
        pass


class SirvBuilder(ModelBuilder):
    name = "sirv"
    compartmental = True
    params_model = SirvParams

    def build_problem(self, params: SirvParams) -> ProblemDef:
        return sirv_problem(params)

    def initial_history(self, params: SirvParams) -> History:
        return sirv_history(params)


class SidartheVBuilder(ModelBuilder):
    name = "sidarthe_v"
    compartmental = True
    params_model = SidartheVParams

    def build_problem(self, params: SidartheVParams) -> ProblemDef:
        return sidarthe_v_problem(params)

    def initial_history(self, params: SidartheVParams) -> History:
        return sidarthe_v_history(params)


class LqBuilder(ModelBuilder):
    name = "lq"
    params_model = LqParams

    def build_problem(self, params: LqParams) -> ProblemDef:
        return lq_problem_from_params(params)

    def initial_history(self, params: LqParams) -> History:
        return History.constant([params.x0])


class ModelRegistry:
    """Maps model names used in run configs to their builders"""

    def __init__(self):
        self.builders: Dict[str, ModelBuilder] = {}

    def register(self, builder: ModelBuilder):
        """Register a builder under its name; a later registration replaces an earlier one"""
        if not builder.name:
            raise ValueError("Model builder must have a name")
        self.builders[builder.name] = builder

    def get(self, name: str) -> ModelBuilder:
        if name not in self.builders:
            known = ", ".join(self.names()) or "none"
            raise KeyError(f"Unknown model '{name}' (registered: {known})")
        return self.builders[name]

    def names(self) -> List[str]:
        return sorted(self.builders)


def default_registry() -> ModelRegistry:
    """Registry holding the shipped models"""
    registry = ModelRegistry()
    for builder in (SirvBuilder(), SidartheVBuilder(), LqBuilder()):
        registry.register(builder)
    return registry
