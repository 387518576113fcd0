"""
Local chat-completions stub for offline runs and tests.
Serves scripted replies in order on 127.0.0.1 and records every request.
"""

import json
import logging
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Dict, List, Optional, Sequence, Union

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScriptedReply:
    """HTTP status plus either assistant content or a raw body"""

    status: int = 200
    content: Optional[str] = None
    raw_body: Optional[str] = None

    def body(self) -> str:
        if self.raw_body is not None:
            return self.raw_body
        if self.status >= 400:
            return json.dumps({"error": {"message": f"stub error {self.status}"}})
        return json.dumps({"choices": [{"index": 0, "message": {"role": "assistant",
                                                                 "content": self.content or ""}}]})


Script = Sequence[Union[str, ScriptedReply]]


@dataclass(frozen=True)
class RecordedRequest:
    path: str
    headers: Dict[str, str]
    body: Any


class StubChatServer:
    """Threaded stub; use as a context manager"""

    def __init__(self, script: Script = (), default: Optional[Union[str, ScriptedReply]] = None,
                 host: str = "127.0.0.1", port: int = 0):
        self.script: List[ScriptedReply] = [self._as_reply(item) for item in script]
        self.default = None if default is None else self._as_reply(default)
        self.requests: List[RecordedRequest] = []
        self._lock = threading.Lock()
        self._server = ThreadingHTTPServer((host, port), self._handler_class())
        self._thread: Optional[threading.Thread] = None

    @staticmethod
    def _as_reply(item: Union[str, ScriptedReply]) -> ScriptedReply:
        return ScriptedReply(content=item) if isinstance(item, str) else item

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/v1"

    def next_reply(self) -> ScriptedReply:
        with self._lock:
            if self.script:
                return self.script.pop(0)
        if self.default is not None:
            return self.default
        return ScriptedReply(status=500, raw_body='{"error": "script exhausted"}')

    def _handler_class(self):
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                raw = self.rfile.read(length).decode("utf-8") if length else ""
                try:
                    body = json.loads(raw) if raw else None
                except json.JSONDecodeError:
                    body = raw
                with stub._lock:
                    stub.requests.append(RecordedRequest(self.path, dict(self.headers), body))
                if not self.path.endswith("/chat/completions"):
                    reply = ScriptedReply(status=404, raw_body='{"error": "not found"}')
                else:
                    reply = stub.next_reply()
                payload = reply.body().encode("utf-8")
                self.send_response(reply.status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def log_message(self, format, *args):
                logger.debug("stub: " + format, *args)

        return Handler

    def start(self) -> "StubChatServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        logger.debug("Stub chat server listening on %s", self.base_url)
        return self

    def stop(self):
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> "StubChatServer":
        return self.start()

    def __exit__(self, *exc):
        self.stop()
