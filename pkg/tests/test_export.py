import io
import json

from hypothesis import given, settings
from hypothesis import strategies as st

from inband_trace.engine import SpanKind
from inband_trace.export import (
    assemble,
    cross_request_edges,
    export_otel,
    load_otel,
    precision,
    span_to_otel,
)
from inband_trace.pipeline import run_pipeline
from inband_trace.sim import builtin_scenarios
from inband_trace.truth import CallTree, GroundTruth, RequestTruth

from test_engine import Feed, one_hop


def _triplet(n=20, **faults):
    s = builtin_scenarios()["triplet-M"].with_workload(total_requests=n, concurrency=4)
    return s.with_faults(**faults) if faults else s


def test_one_hop_assembles_to_one_complete_tree():
    spans = one_hop(Feed())
    (tree,) = assemble(spans)
    assert tree.complete
    assert tree.root.kind is SpanKind.SERVER and tree.root.parent_span_id is None
    assert len(tree.edges()) == 2


def test_missing_server_span_flags_tree():
    spans = one_hop(Feed())
    svc_server = spans[0]
    (tree,) = assemble(spans[1:])
    assert not tree.complete
    assert any("server halves" in i for i in tree.issues)
    # deleting the root leaves a dangling client span
    (tree,) = assemble([s for s in spans if s.parent_span_id is not None])
    assert not tree.complete
    assert svc_server in tree.spans


def test_empty_input():
    assert assemble([]) == []
    buf = io.StringIO()
    assert export_otel([], buf) == 0
    assert buf.getvalue() == ""


@settings(max_examples=25)
@given(st.randoms(use_true_random=False))
def test_assemble_ignores_input_order(rnd):
    spans = run_pipeline(_triplet(6)).trees
    flat = [s for t in spans for s in t.spans]
    shuffled = flat[:]
    rnd.shuffle(shuffled)
    assert assemble(shuffled) == assemble(flat)


def test_otel_document_fields():
    spans = one_hop(Feed())
    doc = span_to_otel(spans[2])
    assert set(doc) == {
        "traceId", "spanId", "name", "kind", "startTimeUnixNano", "endTimeUnixNano", "attributes",
    }
    assert len(doc["traceId"]) == 32 and len(doc["spanId"]) == 16
    assert doc["kind"] == "SERVER" and doc["name"] == "10.0.0.1 SERVER"
    child = span_to_otel(spans[1])
    assert child["parentSpanId"] == doc["spanId"]


def test_json_roundtrip_reassembles_identical_trees(tmp_path):
    result = run_pipeline(_triplet(30, drop_prob=0.05))
    path = tmp_path / "t.jsonl"
    assert export_otel(result.trees, path) == len(result.trees)
    for line in path.read_text().splitlines():
        json.loads(line)
    assert assemble(load_otel(path)) == result.trees


def test_precision_perfect_and_empty():
    result = run_pipeline(_triplet())
    assert result.precision == 1.0
    assert precision([], GroundTruth()) == 1.0
    assert precision([], result.ground_truth) == 0.0


def test_precision_zero_when_a_service_loses_all_spans():
    result = run_pipeline(_triplet())
    spans = [s for t in result.trees for s in t.spans if s.service_name != "backend"]
    assert precision(assemble(spans), result.ground_truth) == 0.0


def test_precision_rejects_wrong_shape():
    result = run_pipeline(_triplet(1))
    gt = result.ground_truth
    wrong = RequestTruth(0, gt.requests[0].client_ip, CallTree("frontend"),
                         gt.requests[0].root_start_ns)
    assert precision(result.trees, GroundTruth([wrong])) == 0.0


def test_fault_free_run_has_no_cross_request_edges():
    result = run_pipeline(_triplet(50))
    assert cross_request_edges(result.trees, result.ground_truth) == []
