"""Hypothesis strategies shared by the test modules."""

from hypothesis import strategies as st

from inband_trace.context import SpanId, TraceContext, TraceId

u8 = st.integers(0, 0xFF)
u16 = st.integers(0, 0xFFFF)
u24 = st.integers(0, 0xFFFFFF)
u32 = st.integers(0, 0xFFFFFFFF)
u48 = st.integers(0, (1 << 48) - 1)

trace_ids = st.builds(TraceId, u32, u48, u16, u8, u24)
span_ids = st.builds(SpanId, u24, u24, u16)
nonnull_span_ids = span_ids.filter(lambda s: not s.is_null)


@st.composite
def contexts(draw):
    span = draw(nonnull_span_ids)
    parent = draw(st.none() | nonnull_span_ids.filter(lambda p: p != span))
    return TraceContext(draw(trace_ids), span, parent, draw(u16))


_token = st.text(st.characters(min_codepoint=0x21, max_codepoint=0x7E), min_size=1, max_size=40)
_header_name = st.from_regex(r"[A-Za-z][A-Za-z0-9-]{0,20}", fullmatch=True).filter(
    lambda n: n.lower() != "x-nahida-ctx"
)
_header_value = st.from_regex(r"[ -~]{0,40}", fullmatch=True).map(str.strip)


@st.composite
def http_messages(draw):
    """Whole HTTP/1.x requests or responses with arbitrary headers and body."""
    if draw(st.booleans()):
        method = draw(st.sampled_from(["GET", "POST", "PUT", "DELETE", "HEAD", "OPTIONS", "PATCH"]))
        first = f"{method} {draw(_token)} HTTP/1.{draw(st.integers(0, 1))}"
    else:
        reason = draw(st.from_regex(r"[A-Za-z ]{0,12}", fullmatch=True))
        first = f"HTTP/1.{draw(st.integers(0, 1))} {draw(st.integers(100, 599))}"
        if reason:
            first += f" {reason}"
    headers = draw(st.lists(st.tuples(_header_name, _header_value), max_size=5))
    body = draw(st.binary(max_size=80))
    head = first + "\r\n" + "".join(f"{k}: {v}\r\n" for k, v in headers) + "\r\n"
    return head.encode("ascii") + body
