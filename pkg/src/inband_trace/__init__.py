"""In-band request tracing driven by kernel-style send/recv/thread events.

A deterministic microservice simulator produces the events; the engine
propagates a compact trace context inside HTTP headers and emits spans; the
assembler rebuilds trace trees and scores them against ground truth.
"""

from .context import (
    ContextError,
    IdGenerator,
    SpanId,
    TraceContext,
    TraceId,
    decode_context,
    encode_context,
    generate_span_id,
    generate_trace_id,
)
from .engine import (
    Direction,
    Engine,
    EngineConfig,
    EventKind,
    EventOrderError,
    KernelEvent,
    Span,
    SpanKind,
)
from .export import (
    TraceTree,
    assemble,
    cross_request_edges,
    export_otel,
    load_otel,
    precision,
)
from .genealogy import ROOT_PID_NS, GenealogyError, ThreadRecord, ThreadRegistry
from .http import DEFAULT_HEADER, HttpError, HttpKind, classify, extract, inject
from .pipeline import PipelineResult, run_pipeline
from .sim import (
    FaultModel,
    Scenario,
    ScenarioError,
    ServiceSpec,
    ServingMode,
    Simulator,
    Workload,
    apply_faults,
    builtin_scenarios,
    get_scenario,
    run_scenario,
)
from .truth import CallTree, GroundTruth, RequestTruth

__all__ = [
    "CallTree", "ContextError", "DEFAULT_HEADER", "Direction", "Engine", "EngineConfig",
    "EventKind", "EventOrderError", "FaultModel", "GenealogyError", "GroundTruth",
    "HttpError", "HttpKind", "IdGenerator", "KernelEvent", "PipelineResult", "ROOT_PID_NS",
    "RequestTruth", "Scenario", "ScenarioError", "ServiceSpec", "ServingMode", "Simulator",
    "Span", "SpanId", "SpanKind", "ThreadRecord", "ThreadRegistry", "TraceContext",
    "TraceId", "TraceTree", "Workload", "apply_faults", "assemble", "builtin_scenarios",
    "classify", "cross_request_edges", "decode_context", "encode_context", "export_otel",
    "extract", "generate_span_id", "generate_trace_id", "get_scenario", "inject",
    "load_otel", "precision", "run_pipeline", "run_scenario",
]
