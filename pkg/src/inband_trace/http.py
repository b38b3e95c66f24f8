"""HTTP/1.x recognition and in-band context injection/extraction.

The context travels as one header line placed right after the request (or
status) line::

    x-nahida-ctx: <68 lowercase hex>\\r\\n

Nothing else in the message is touched. Content-Length stays valid because
the header block is not part of the body.
"""

from __future__ import annotations

import enum
import re
from functools import lru_cache
from typing import NamedTuple, Optional

from .context import ContextError, TraceContext, decode_context, encode_context_bytes
from .counters import Counters

DEFAULT_HEADER = "x-nahida-ctx"
# longest first line we are willing to look at, mirroring a bounded probe
MAX_FIRST_LINE = 8192

_CRLF = b"\r\n"
# anchored at byte 0; neither branch can consume CR or LF, so matching never
# looks past the first CRLF
_FIRST_LINE = re.compile(
    rb"(?:(HTTP/1\.[0-9] [0-9]{3}(?: [^\r\n]{0,%d})?)"
    rb"|(?:GET|POST|PUT|DELETE|HEAD|OPTIONS|PATCH) [\x21-\x7e]{1,%d} HTTP/1\.[0-9])\r\n"
    % (MAX_FIRST_LINE, MAX_FIRST_LINE)
)


class HttpError(ValueError):
    pass


class HttpKind(enum.Enum):
    REQUEST = "request"
    RESPONSE = "response"
    NOT_HTTP = "not_http"


class HttpClass(NamedTuple):
    kind: HttpKind
    # index just past the first CRLF; -1 for NOT_HTTP
    injection_offset: int


NOT_HTTP = HttpClass(HttpKind.NOT_HTTP, -1)


def classify(data: bytes) -> HttpClass:
    m = _FIRST_LINE.match(data)
    if m is None:
        return NOT_HTTP
    return HttpClass(HttpKind.RESPONSE if m.lastindex else HttpKind.REQUEST, m.end())


@lru_cache(maxsize=32)
def _header_patterns(header_name: str) -> tuple[bytes, re.Pattern[bytes]]:
    name = header_name.encode("ascii")
    anywhere = re.compile(rb"\r\n" + re.escape(name) + rb"[ \t]*:[ \t]*([^\r\n]*)", re.I)
    return name.lower(), anywhere


@lru_cache(maxsize=32)
def _line_prefix(header_name: str) -> bytes:
    return header_name.encode("ascii") + b": "


def _header_block_end(data: bytes, offset: int) -> int:
    """Index of the CRLF that terminates the header block (or len(data))."""
    if data.startswith(_CRLF, offset):
        return offset
    end = data.find(b"\r\n\r\n", offset - 2)
    return len(data) if end < 0 else end + 2


def _find_header(data: bytes, offset: int, header_name: str) -> Optional[re.Match[bytes]]:
    lower_name, pattern = _header_patterns(header_name)
    end = _header_block_end(data, offset)
    if lower_name not in data[offset:end].lower():
        return None
    # start at the CRLF ending the first line so every header line is CRLF-led
    return pattern.search(data, offset - 2, end)


def header_line(ctx: TraceContext, header_name: str = DEFAULT_HEADER) -> bytes:
    return _line_prefix(header_name) + encode_context_bytes(ctx) + _CRLF


def inject(data: bytes, ctx: TraceContext, header_name: str = DEFAULT_HEADER) -> bytes:
    """Return ``data`` with the context header spliced in after the first line.

    If the header already exists its value is replaced in place, so a
    re-sent message never carries two contexts.
    """
    return inject_classified(data, classify(data), ctx, header_name)


def inject_classified(
    data: bytes, cls: HttpClass, ctx: TraceContext, header_name: str = DEFAULT_HEADER
) -> bytes:
    """:func:`inject` for callers that already hold ``classify(data)``."""
    if cls.kind is HttpKind.NOT_HTTP:
        raise HttpError("refusing to inject into a non-HTTP message")
    off = cls.injection_offset
    m = _find_header(data, off, header_name)
    if m is not None:
        return data[: m.start(1)] + encode_context_bytes(ctx) + data[m.end(1):]
    return b"".join(
        (data[:off], _line_prefix(header_name), encode_context_bytes(ctx), _CRLF, data[off:])
    )


def extract(
    data: bytes, header_name: str = DEFAULT_HEADER, counters: Optional[Counters] = None
) -> tuple[Optional[TraceContext], HttpClass]:
    """Read the context header from ``data`` without modifying it.

    A header whose value fails to decode yields ``None`` and bumps the
    ``malformed_contexts`` counter when ``counters`` is given.
    """
    return extract_classified(data, classify(data), header_name, counters)


def extract_classified(
    data: bytes, cls: HttpClass, header_name: str = DEFAULT_HEADER,
    counters: Optional[Counters] = None,
) -> tuple[Optional[TraceContext], HttpClass]:
    """:func:`extract` for callers that already hold ``classify(data)``."""
    if cls.kind is HttpKind.NOT_HTTP:
        return None, cls
    off = cls.injection_offset
    fast = _line_prefix(header_name)
    if data.startswith(fast, off):
        start = off + len(fast)
        end = data.find(_CRLF, start)
        value = (data[start:] if end < 0 else data[start:end]).strip()
    else:
        m = _find_header(data, off, header_name)
        if m is None:
            return None, cls
        value = m.group(1).strip()
    try:
        return decode_context(value), cls
    except ContextError:
        if counters is not None:
            counters.incr("malformed_contexts")
        return None, cls


def strip_header(data: bytes, header_name: str = DEFAULT_HEADER) -> bytes:
    """Remove the context header line, if any; the inverse of a fresh inject."""
    cls = classify(data)
    if cls.kind is HttpKind.NOT_HTTP:
        return data
    m = _find_header(data, cls.injection_offset, header_name)
    if m is None:
        return data
    line_start = m.start() + (2 if data.startswith(_CRLF, m.start()) else 0)
    line_end = data.find(_CRLF, m.end(1))
    return data[:line_start] + data[line_end + 2:]
