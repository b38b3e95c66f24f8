"""Simulator -> faults -> engine -> assembler wiring."""

from __future__ import annotations

import gc
from contextlib import contextmanager
from dataclasses import dataclass, replace
from typing import Iterable, Iterator, Optional

from .engine import Engine, EngineConfig, KernelEvent, Span
from .export import TraceTree, assemble, build_report, precision
from .sim import Scenario, Simulator, apply_faults, hop_request_sends
from .truth import GroundTruth

# the agent polls the ring this often (in events); below the default capacity
DRAIN_EVERY = 4096


def fault_seed(scenario: Scenario) -> int:
    """Seed of the probe-miss process, derived from the scenario seed."""
    return (scenario.seed * 0x9E3779B1 + 0x7F4A7C15) & 0xFFFFFFFF


@dataclass
class PipelineResult:
    scenario: Scenario
    trees: list[TraceTree]
    ground_truth: GroundTruth
    engine: Engine
    event_count: int

    @property
    def precision(self) -> float:
        return precision(self.trees, self.ground_truth)

    def report(self) -> dict:
        return build_report(
            scenario=self.scenario.name,
            seed=self.scenario.seed,
            precision_value=self.precision,
            trees=self.trees,
            counters=self.engine.counters.snapshot(),
            config={
                "engine": self.engine.config.to_dict(),
                "scenario": self.scenario.to_dict(),
            },
            requests=len(self.ground_truth),
        )


def faulted_events(scenario: Scenario, events: Iterable[KernelEvent]) -> Iterator[KernelEvent]:
    """Apply the scenario's fault model to an event stream."""
    f = scenario.faults
    if f.dropped_hops:
        events = apply_faults(events, 1.0, 0, hop_request_sends(scenario, f.dropped_hops))
    if f.drop_prob == 0.0:
        return iter(events)
    return apply_faults(events, f.drop_prob, fault_seed(scenario))


def engine_config_for(scenario: Scenario, base: Optional[EngineConfig] = None) -> EngineConfig:
    cfg = base or EngineConfig()
    names = dict(scenario.service_names())
    names.update(cfg.service_names)
    changes: dict = {"service_names": names}
    if scenario.faults.buffer_capacity is not None:
        changes["buffer_capacity"] = scenario.faults.buffer_capacity
    return replace(cfg, **changes)


def replay(events: Iterable[KernelEvent], engine: Engine) -> tuple[list[Span], int]:
    """Feed ``events`` to ``engine``, draining the ring as an agent would."""
    spans: list[Span] = []
    on_event = engine.on_event
    n = 0
    for n, ev in enumerate(events, 1):
        on_event(ev)
        if n % DRAIN_EVERY == 0:
            spans.extend(engine.drain_spans())
    spans.extend(engine.drain_spans())
    return spans, n


@contextmanager
def gc_paused() -> Iterator[None]:
    """Suspend the cyclic collector.

    A run allocates millions of short-lived acyclic objects; generational
    scans over them cost about a third of the runtime.
    """
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was_enabled:
            gc.enable()


def run_pipeline(scenario: Scenario, config: Optional[EngineConfig] = None) -> PipelineResult:
    with gc_paused():
        sim = Simulator(scenario)
        engine = Engine(engine_config_for(scenario, config))
        spans, n = replay(faulted_events(scenario, sim.events()), engine)
        trees = assemble(spans)
    return PipelineResult(scenario, trees, sim.ground_truth, engine, n)
