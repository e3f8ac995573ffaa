"""Plain HTTP/1.1 transport for hosts, guards and authorities."""

from __future__ import annotations

import threading
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable

from .host import CONTENT_TYPE, ENDPOINT, TransportRequest, TransportResponse

Dispatch = Callable[[TransportRequest], TransportResponse]


def envelope_endpoint(handle: Callable[[bytes], bytes]) -> Dispatch:
    """Adapt a bytes-in/bytes-out actor to the ``/ws`` endpoint."""

    def dispatch(req: TransportRequest) -> TransportResponse:
        if req.path != ENDPOINT or req.method != "POST":
            return TransportResponse(404, b"")
        return TransportResponse(200, handle(req.body))

    return dispatch


def make_server(dispatch: Dispatch, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def _serve(self, method: str) -> None:
            n = int(self.headers.get("Content-Length") or 0)
            body = self.rfile.read(n) if n else b""
            resp = dispatch(TransportRequest(self.path, body, dict(self.headers.items()), method))
            self.send_response(resp.status)
            for k, v in resp.headers.items():
                self.send_header(k, v)
            self.send_header("Content-Length", str(len(resp.body)))
            self.end_headers()
            self.wfile.write(resp.body)

        def do_POST(self) -> None:
            self._serve("POST")

        def do_GET(self) -> None:
            self._serve("GET")

        def log_message(self, fmt: str, *args) -> None:
            pass

    server = ThreadingHTTPServer((host, port), Handler)
    server.daemon_threads = True
    return server


def serve_in_thread(server: ThreadingHTTPServer) -> threading.Thread:
    t = threading.Thread(target=server.serve_forever, daemon=True)
    t.start()
    return t


def url_of(server: ThreadingHTTPServer) -> str:
    host, port = server.server_address[:2]
    return f"http://{host}:{port}{ENDPOINT}"


def post(url: str, data: bytes, timeout: float = 30.0) -> tuple[int, bytes]:
    req = urllib.request.Request(url, data=data, method="POST", headers={"Content-Type": CONTENT_TYPE})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as exc:
        # faults travel with 4xx/5xx statuses; the envelope is in the body
        return exc.code, exc.read()
