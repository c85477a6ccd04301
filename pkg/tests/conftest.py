from __future__ import annotations

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from guiforge.data_model import GuiElement, NormBBox, Platform, ScreenshotRecord


def element(eid="e1", bbox=(0.1, 0.1, 0.3, 0.2), **kw) -> GuiElement:
    return GuiElement(element_id=eid, bbox=NormBBox(*bbox), **kw)


def record(elements=(), rid="r1", source="src", **kw) -> ScreenshotRecord:
    kw.setdefault("image_ref", f"img/{rid}.png")
    kw.setdefault("width_px", 360)
    kw.setdefault("height_px", 780)
    kw.setdefault("platform", Platform.MOBILE)
    return ScreenshotRecord(record_id=rid, source=source, elements=tuple(elements), **kw)


class MockServer:
    """Tiny JSON HTTP server; ``handler(body) -> (status, obj)`` decides each reply.

    ``stream_handler(body)`` (if set) returns a list of (delay_s, token) pairs
    that are sent as server-sent events.
    """

    def __init__(self):
        self.requests: list[dict] = []
        self.handler = lambda body: (200, {"text": "(0.5, 0.5)"})
        self.stream_handler = None
        self.in_flight = 0
        self.max_in_flight = 0
        self._lock = threading.Lock()
        server = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, *args):
                pass

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length) or b"{}")
                with server._lock:
                    server.requests.append(body)
                    server.in_flight += 1
                    server.max_in_flight = max(server.max_in_flight, server.in_flight)
                try:
                    if server.stream_handler is not None:
                        self._stream(server.stream_handler(body))
                    else:
                        status, obj = server.handler(body)
                        data = json.dumps(obj).encode()
                        self.send_response(status)
                        self.send_header("Content-Type", "application/json")
                        self.send_header("Content-Length", str(len(data)))
                        self.end_headers()
                        self.wfile.write(data)
                finally:
                    with server._lock:
                        server.in_flight -= 1

            def _stream(self, events):
                self.send_response(200)
                self.send_header("Content-Type", "text/event-stream")
                self.send_header("Connection", "close")
                self.end_headers()
                for delay, token in events:
                    time.sleep(delay)
                    self.wfile.write(f"data: {json.dumps({'token': token})}\n\n".encode())
                    self.wfile.flush()
                self.wfile.write(b"data: [DONE]\n\n")
                self.wfile.flush()
                self.close_connection = True

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.httpd.daemon_threads = True
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}/"
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def mock_server():
    server = MockServer()
    yield server
    server.close()


ACCEPTANCE_LINES: list[str] = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py::test_criterion_" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        verdict = "PASS" if report.passed else "FAIL"
        ACCEPTANCE_LINES.append(f"{verdict}  {name}  ({report.duration:.2f}s)")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
