import logging
from dataclasses import dataclass, replace
from typing import Callable, Iterator, List, Optional

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class IterationRecord:
    """One attempted update of the outer loop"""
    index: int              # Outer iteration i (0 is the nominal control)
    J: float                # Cost of the attempted control
    delta_u_sq: float       # ||u^i - u^{i-1}||^2 in L2[t0, T]
    eps_min: float          # Smallest diagonal entry of C for this attempt
    c_increases: int        # C increases so far within iteration i
    accepted: bool
    residual: Optional[float] = None  # First-order residual, set at termination
    costate_version: int = 0          # Costate computation that drove the sweep


IterationSink = Callable[[IterationRecord], None]


class IterationLog:
    """Collects the iteration records of one solve and forwards them to sinks"""

    def __init__(self, sinks: Optional[List[IterationSink]] = None):
        self.records: List[IterationRecord] = []
        self.sinks: List[IterationSink] = list(sinks or [])

    def add_sink(self, sink: IterationSink):
        self.sinks.append(sink)

    def append(self, record: IterationRecord):
        """Store a record and hand it to every sink"""
        self.records.append(record)
        for sink in self.sinks:
            try:
                sink(record)
            except Exception as e:
                logger.error(f"Iteration sink failed on record {record.index}: {e}")

    def set_final_residual(self, residual: float):
        """Attach the termination residual to the last record (sinks are not re-notified)"""
        if self.records:
            self.records[-1] = replace(self.records[-1], residual=residual)

    def accepted(self) -> List[IterationRecord]:
        return [r for r in self.records if r.accepted]

    def accepted_costs(self) -> List[float]:
        return [r.J for r in self.accepted()]

    def eps_sequence(self) -> List[float]:
        return [r.eps_min for r in self.records]

    def last(self) -> Optional[IterationRecord]:
        return self.records[-1] if self.records else None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[IterationRecord]:
        return iter(self.records)
