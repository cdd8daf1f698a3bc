"""HTTP transport: ``POST /rpc`` with an ``X-API-Key`` header."""
from __future__ import annotations

import itertools
import json
import logging
import threading
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any

from .tools import RpcHandler
from .workspace import Workspace

log = logging.getLogger(__name__)


class _Handler(BaseHTTPRequestHandler):
    rpc: RpcHandler  # set on the per-server subclass

    def do_POST(self):
        if self.path.rstrip("/") != "/rpc":
            self.send_error(404, "only POST /rpc is served")
            return
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length)
        reply = self.rpc.handle(body, self.headers.get("X-API-Key"))
        payload = json.dumps(reply).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, fmt, *args):
        log.debug("%s - %s", self.address_string(), fmt % args)


def make_server(workspace: Workspace, port: int = 0, host: str = "127.0.0.1") -> ThreadingHTTPServer:
    handler = type("RpcRequestHandler", (_Handler,), {"rpc": RpcHandler(workspace)})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server


def serve(workspace_dir, port: int, host: str = "127.0.0.1") -> None:
    """Blocking server loop."""
    server = make_server(Workspace(workspace_dir), port, host)
    log.info("serving %s on http://%s:%d/rpc", workspace_dir, host, server.server_address[1])
    try:
        server.serve_forever()
    finally:
        server.server_close()


def start_background(workspace: Workspace, port: int = 0) -> tuple[ThreadingHTTPServer, str]:
    """Start a server thread; returns the server and its ``/rpc`` URL."""
    server = make_server(workspace, port)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    host, port = server.server_address[:2]
    return server, f"http://{host}:{port}/rpc"


class RpcClient:
    def __init__(self, endpoint: str, api_key: str | None, timeout: float = 30.0):
        self.endpoint = endpoint
        self.api_key = api_key
        self.timeout = timeout
        self._ids = itertools.count(1)

    def send_raw(self, body: bytes, api_key: str | None = None) -> dict:
        headers = {"Content-Type": "application/json"}
        key = api_key if api_key is not None else self.api_key
        if key:
            headers["X-API-Key"] = key
        req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return json.loads(resp.read())

    def request(self, method: str, params: dict | None = None) -> dict:
        body = {"jsonrpc": "2.0", "id": next(self._ids), "method": method}
        if params is not None:
            body["params"] = params
        return self.send_raw(json.dumps(body).encode("utf-8"))

    def list_tools(self) -> list[dict]:
        reply = self.request("tools/list")
        if "error" in reply:
            raise RuntimeError(reply["error"]["message"])
        return reply["result"]["tools"]

    def call_tool(self, name: str, arguments: dict) -> dict:
        """The raw envelope minus ``jsonrpc``/``id``: ``{"result": ...}`` or ``{"error": ...}``."""
        reply = self.request("tools/call", {"name": name, "arguments": arguments})
        return {k: v for k, v in reply.items() if k in ("result", "error")}


class LocalClient:
    """Same surface as :class:`RpcClient` without the socket; still authenticates."""

    def __init__(self, handler: RpcHandler | Workspace, api_key: str | None):
        self.handler = handler if isinstance(handler, RpcHandler) else RpcHandler(handler)
        self.api_key = api_key
        self._ids = itertools.count(1)

    def request(self, method: str, params: dict | None = None) -> dict:
        body: dict[str, Any] = {"jsonrpc": "2.0", "id": next(self._ids), "method": method}
        if params is not None:
            body["params"] = params
        # round-trip through JSON so results look exactly like wire results
        return json.loads(json.dumps(self.handler.handle(json.dumps(body), self.api_key)))

    list_tools = RpcClient.list_tools
    call_tool = RpcClient.call_tool
