import pytest
from hypothesis import given
from hypothesis import strategies as st

from inband_trace.context import IdGenerator, TraceContext, encode_context, generate_span_id
from inband_trace.counters import Counters
from inband_trace.http import (
    DEFAULT_HEADER,
    HttpError,
    HttpKind,
    classify,
    extract,
    header_line,
    inject,
    strip_header,
)

from strategies import contexts, http_messages

CTX = TraceContext(
    IdGenerator().generate_trace_id("10.0.0.1", 1_700_000_000_000, 4242),
    generate_span_id("10.0.0.1", "10.0.0.2", 2),
    generate_span_id("10.255.0.1", "10.0.0.1", 1),
    2,
)


def test_classify_request_offset_counted_by_hand():
    cls = classify(b"GET /index HTTP/1.1\r\nHost: a\r\n\r\n")
    assert cls.kind is HttpKind.REQUEST
    # "GET" 3 + " " 1 + "/index" 6 + " " 1 + "HTTP/1.1" 8 = 19, then CR LF
    assert cls.injection_offset == 21
    assert cls.injection_offset == len(b"GET /index HTTP/1.1\r\n")


def test_classify_response():
    cls = classify(b"HTTP/1.1 200 OK\r\n\r\n")
    assert cls.kind is HttpKind.RESPONSE
    assert cls.injection_offset == 17
    assert classify(b"HTTP/1.0 404\r\n\r\n").kind is HttpKind.RESPONSE


@pytest.mark.parametrize(
    "data",
    [
        b"",
        b"GET / HTTP/1.1",  # no CRLF yet: first line incomplete
        b"FETCH / HTTP/1.1\r\n\r\n",
        b"get / HTTP/1.1\r\n\r\n",
        b"GET / HTTP/2\r\n\r\n",
        b"GET  HTTP/1.1\r\n\r\n",
        b"HTTP/1.1 20 OK\r\n\r\n",
        b"\x16\x03\x01\x02\x00\x01\x00\x01\xfc\x03\x03\x00",
        b'{"from":"a","pad":"xx"}',
    ],
)
def test_not_http(data):
    assert classify(data).kind is HttpKind.NOT_HTTP
    assert extract(data) == (None, classify(data))


@given(st.binary(min_size=12, max_size=12))
def test_random_binary_is_not_http(data):
    # a random 12-byte string cannot hold a method, target, version and CRLF
    assert classify(data).kind is HttpKind.NOT_HTTP


@given(http_messages(), st.binary(max_size=40), st.binary(max_size=40))
def test_classify_ignores_bytes_after_first_crlf(msg, tail_a, tail_b):
    end = msg.index(b"\r\n") + 2
    a = classify(msg[:end] + tail_a)
    b = classify(msg[:end] + tail_b)
    assert a == b
    assert a.injection_offset == end


def test_inject_exact_bytes():
    out = inject(b"GET / HTTP/1.1\r\nHost: a\r\n\r\n", CTX)
    expected = (
        b"GET / HTTP/1.1\r\n"
        + b"x-nahida-ctx: " + encode_context(CTX).encode("ascii") + b"\r\n"
        + b"Host: a\r\n\r\n"
    )
    assert out == expected
    assert header_line(CTX) == b"x-nahida-ctx: " + encode_context(CTX).encode() + b"\r\n"


def test_inject_into_response():
    msg = b"HTTP/1.1 200 OK\r\nContent-Length: 2\r\n\r\nok"
    out = inject(msg, CTX)
    assert out.startswith(b"HTTP/1.1 200 OK\r\nx-nahida-ctx: ")
    assert out.endswith(b"\r\nContent-Length: 2\r\n\r\nok")


def test_inject_refuses_non_http():
    data = b"\x00\x01binary"
    with pytest.raises(HttpError):
        inject(data, CTX)
    assert data == b"\x00\x01binary"


def test_extract_without_header():
    ctx, cls = extract(b"GET / HTTP/1.1\r\nHost: a\r\n\r\n")
    assert ctx is None
    assert cls.kind is HttpKind.REQUEST


def test_truncated_value_counts_as_malformed():
    good = inject(b"GET / HTTP/1.1\r\nHost: a\r\n\r\n", CTX)
    start = good.index(b"x-nahida-ctx: ") + len(b"x-nahida-ctx: ")
    bad = good[: start + 60] + good[start + 68:]
    counters = Counters()
    ctx, cls = extract(bad, counters=counters)
    assert ctx is None
    assert cls.kind is HttpKind.REQUEST
    assert counters["malformed_contexts"] == 1


def test_reinject_replaces_in_place():
    first = inject(b"POST /x HTTP/1.1\r\nHost: a\r\n\r\nbody", CTX)
    other = TraceContext(CTX.trace_id, generate_span_id("10.0.0.1", "10.0.0.2", 9), None, 9)
    second = inject(first, other)
    assert len(second) == len(first)
    assert second.count(b"x-nahida-ctx") == 1
    assert extract(second)[0] == other


def test_header_lookup_is_case_insensitive_and_found_anywhere():
    msg = (
        b"GET / HTTP/1.1\r\nHost: a\r\nX-Nahida-Ctx:  "
        + encode_context(CTX).encode()
        + b" \r\nAccept: */*\r\n\r\n"
    )
    assert extract(msg)[0] == CTX
    # a header-like line in the body is not a header
    body_only = b"POST / HTTP/1.1\r\nHost: a\r\n\r\nx-nahida-ctx: " + encode_context(CTX).encode()
    assert extract(body_only)[0] is None


def test_custom_header_name():
    out = inject(b"GET / HTTP/1.1\r\n\r\n", CTX, "x-trace")
    assert b"x-trace: " in out
    assert extract(out, "x-trace")[0] == CTX
    assert extract(out, DEFAULT_HEADER)[0] is None


@given(http_messages(), contexts())
def test_inject_extract_roundtrip(msg, ctx):
    out = inject(msg, ctx)
    assert extract(out)[0] == ctx


@given(http_messages(), contexts())
def test_inject_touches_only_the_inserted_line(msg, ctx):
    out = inject(msg, ctx)
    line = header_line(ctx)
    assert len(out) == len(msg) + len(line)
    off = classify(msg).injection_offset
    assert out[:off] == msg[:off]
    assert out[off: off + len(line)] == line
    assert out[off + len(line):] == msg[off:]
    assert strip_header(out) == msg
