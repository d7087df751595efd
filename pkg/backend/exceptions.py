from typing import List, Optional, Union


class EssaError(Exception):
    """Base class for all solver errors"""


class NonIntegerDelay(EssaError, ValueError):
    """A delay is not an exact multiple of the grid spacing"""

    def __init__(self, delay: float, step: float, suggested_nodes: Optional[int]):
        self.delay = delay
        self.step = step
        self.suggested_nodes = suggested_nodes
        hint = f"; use N={suggested_nodes}" if suggested_nodes else ""
        super().__init__(
            f"Delay {delay} is not an integer multiple of the step {step}{hint}"
        )


class NonFiniteState(EssaError, ArithmeticError):
    """State integration produced NaN or infinity"""

    def __init__(self, node: int):
        self.node = node
        super().__init__(f"Non-finite state at node {node}")


class DivergentInitialControl(EssaError, ValueError):
    """The nominal control drives the state to NaN or infinity"""

    def __init__(self, node: int):
        self.node = node
        super().__init__(
            f"The initial control makes the state non-finite at node {node}; "
            f"choose a different initial_control"
        )


class NonFiniteCostate(EssaError, ArithmeticError):
    """Costate integration produced NaN or infinity"""

    def __init__(self, node: int):
        self.node = node
        super().__init__(f"Non-finite costate at node {node}")


class InnerMinStall(EssaError, RuntimeError):
    """Projected Newton could not decrease K below its value at the anchor"""


class MissingHessian(EssaError, ValueError):
    """A terminal cost was supplied without its Hessian"""


class InvalidParams(EssaError, ValueError):
    """Model parameters violate their invariants"""

    def __init__(self, messages: Union[str, List[str]]):
        self.messages = [messages] if isinstance(messages, str) else list(messages)
        super().__init__("\n".join(self.messages))


class MissingCoefficients(EssaError, ValueError):
    """A coefficient file lacks required model coefficients"""

    def __init__(self, missing: List[str]):
        self.missing = list(missing)
        super().__init__(f"Missing coefficients: {', '.join(self.missing)}")


class NoConvergence(EssaError, RuntimeError):
    """An iterative oracle hit its iteration cap"""


class ConfigError(EssaError, ValueError):
    """A run configuration failed validation"""

    def __init__(self, messages: List[str]):
        self.messages = list(messages)
        super().__init__("\n".join(self.messages))
