"""Minimal threaded HTTP server for serving a docroot.

Static files are served from disk; anything that looks like a script is
handed to a pluggable runner (the fixture interpreter or a real CGI
executor). Binds to 127.0.0.1 on an ephemeral port so concurrent sessions
never collide.
"""

from __future__ import annotations

import mimetypes
import os
import posixpath
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable
from urllib.parse import unquote, urlsplit

SCRIPT_EXTS = frozenset({"cgi", "sh", "pl", "php"})
INDEX_NAMES = ("index.html", "index.htm", "index.shtml", "index.php", "index.asp", "index.cgi",
               "default.html", "default.htm")


@dataclass
class ScriptRequest:
    host_path: Path
    url_path: str
    method: str
    query: str
    body: bytes
    headers: dict[str, str]


@dataclass
class ScriptResponse:
    status: int = 200
    headers: list[tuple[str, str]] = field(default_factory=list)
    body: bytes = b""


ScriptRunner = Callable[[ScriptRequest], ScriptResponse]


def is_script(rel_path: str) -> bool:
    name = posixpath.basename(rel_path)
    ext = name.rsplit(".", 1)[1].lower() if "." in name else ""
    return ext in SCRIPT_EXTS or "/cgi-bin/" in "/" + rel_path


class DocrootServer:
    def __init__(self, docroot: str | os.PathLike, runner: ScriptRunner, banner: str | None = None,
                 extra_headers: list[tuple[str, str]] | None = None):
        self.docroot = Path(docroot)
        self.runner = runner
        self.banner = banner
        self.extra_headers = extra_headers or []
        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), self._handler_class())
        self._httpd.daemon_threads = True
        self._thread = threading.Thread(target=self._httpd.serve_forever, kwargs={"poll_interval": 0.05},
                                        daemon=True)

    @property
    def address(self) -> tuple[str, int]:
        host, port = self._httpd.server_address[:2]
        return host, port

    def start(self) -> "DocrootServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        self._thread.join(timeout=5)

    def _map(self, url_path: str) -> Path | None:
        norm = posixpath.normpath("/" + unquote(url_path)).lstrip("/")
        target = self.docroot / norm if norm not in ("", ".") else self.docroot
        try:
            resolved = target.resolve()
            root = self.docroot.resolve()
        except OSError:
            return None
        if resolved != root and root not in resolved.parents:
            return None
        if resolved.is_dir():
            for name in INDEX_NAMES:
                if (resolved / name).is_file():
                    return resolved / name
            return None
        return resolved if resolved.is_file() else None

    def _handler_class(self):
        server = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.0"

            def log_message(self, format, *args):  # noqa: A002 - stdlib signature
                pass

            def version_string(self):
                return server.banner or ""

            def send_response(self, code, message=None):
                self.log_request(code)
                self.send_response_only(code, message)
                if server.banner:
                    self.send_header("Server", server.banner)
                self.send_header("Date", self.date_time_string())

            def _reply(self, resp: ScriptResponse, head_only: bool = False):
                self.send_response(resp.status)
                names = {k.lower() for k, _ in resp.headers}
                for k, v in server.extra_headers:
                    if k.lower() not in names:
                        self.send_header(k, v)
                for k, v in resp.headers:
                    self.send_header(k, v)
                self.send_header("Content-Length", str(len(resp.body)))
                self.end_headers()
                if not head_only:
                    self.wfile.write(resp.body)

            def _handle(self, method: str):
                parts = urlsplit(self.path)
                length = int(self.headers.get("Content-Length") or 0)
                body = self.rfile.read(length) if length else b""
                path = server._map(parts.path)
                if path is None:
                    self._reply(ScriptResponse(404, [("Content-Type", "text/html")],
                                               b"<html><body>404 Not Found</body></html>"), method == "HEAD")
                    return
                rel = path.relative_to(server.docroot.resolve()).as_posix()
                if is_script(rel):
                    req = ScriptRequest(path, parts.path, method, parts.query, body, dict(self.headers.items()))
                    try:
                        resp = server.runner(req)
                    except Exception as exc:  # script failures become 500s, never crash the server
                        resp = ScriptResponse(500, [("Content-Type", "text/plain")], f"script error: {exc}".encode())
                else:
                    ctype = mimetypes.guess_type(path.name)[0] or "application/octet-stream"
                    resp = ScriptResponse(200, [("Content-Type", ctype)], path.read_bytes())
                self._reply(resp, method == "HEAD")

            def do_GET(self):
                self._handle("GET")

            def do_POST(self):
                self._handle("POST")

            def do_HEAD(self):
                self._handle("HEAD")

        return Handler
