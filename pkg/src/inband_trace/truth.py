"""Ground-truth request causality produced by the simulator."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

# canonical labelled tree: (label, sorted child shapes); label = (service, kind)
Shape = tuple


@dataclass(frozen=True)
class CallTree:
    """A service and the downstream calls it makes, in call order."""

    service: str
    calls: tuple[CallTree, ...] = ()

    def hop_count(self) -> int:
        return sum(1 + c.hop_count() for c in self.calls)

    def span_count(self) -> int:
        # root server span plus a client/server pair per call edge
        return 1 + 2 * self.hop_count()

    def shape(self) -> Shape:
        """Labelled span-tree shape this call tree should produce."""
        kids = sorted(
            ((self.service, "CLIENT"), (c.shape(),)) for c in self.calls
        )
        return ((self.service, "SERVER"), tuple(kids))

    def to_dict(self) -> dict:
        return {"service": self.service, "calls": [c.to_dict() for c in self.calls]}


@dataclass
class RequestTruth:
    request_id: int
    client_ip: str
    call_tree: CallTree
    # timestamp of the entry service's first receive of the request
    root_start_ns: Optional[int] = None
    # send/recv events of this request, for drop-process oracles
    event_count: int = 0


@dataclass
class GroundTruth:
    requests: list[RequestTruth] = field(default_factory=list)
    # start timestamp of every span-opening event -> owning request id
    span_owner: dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.requests)
