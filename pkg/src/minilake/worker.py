"""Child-process entry point for SUBPROCESS step isolation.

Reads one request from stdin, writes one reply to stdout. Network access is
switched off before any user-controlled input is decoded.
"""
import socket
import sys

from .sandbox import decode_request, evaluate, write_frame


class _NoSocket(socket.socket):
    # still a class, so modules that subclass socket.socket keep importing
    def __init__(self, *args, **kwargs):
        raise PermissionError("network access is disabled in step sandboxes")


def _no_connection(*args, **kwargs):
    raise PermissionError("network access is disabled in step sandboxes")


def main() -> int:
    socket.socket = _NoSocket  # type: ignore[misc]
    socket.create_connection = _no_connection  # type: ignore[assignment]

    plan_text, inputs = decode_request(sys.stdin.buffer)
    ok, payload = evaluate(plan_text, inputs)
    out = sys.stdout.buffer
    out.write(b"\x00" if ok else b"\x01")
    write_frame(out, payload)
    out.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
