"""Client for an out-of-process score model speaking a framed binary protocol.

Frame layout (little endian): 4-byte magic ``DRVB``, uint32 opcode, float64
sigma, uint64 length, payload.  For score/vjp the length field is the vector
element count and the payload is float32 (vjp requests carry the state and
the cotangent back to back, so request and response lengths match); for
meta/error the length is the payload byte count and the payload is UTF-8
JSON / text.  One request is in flight per connection.

The server side lives in a separate package; this client only needs the
endpoint: ``tcp:HOST:PORT`` (or ``HOST:PORT``) or ``stdio:COMMAND ...``.
"""

from __future__ import annotations

import json
import shlex
import socket
import struct
import subprocess
import numpy as np

from .errors import BridgeError

MAGIC = b"DRVB"
OP_ERROR = 0
OP_SCORE = 1
OP_VJP = 2
OP_META = 3

_HEADER = struct.Struct("<4sId Q")
DEFAULT_TIMEOUT_S = 30.0


def encode_frame(opcode: int, sigma: float, length: int, payload: bytes) -> bytes:
    return _HEADER.pack(MAGIC, opcode, float(sigma), length) + payload


def payload_bytes(opcode: int, length: int, response: bool) -> int:
    """Payload size implied by the header fields.

    Requests: score carries the state (4*length bytes), vjp the state plus
    the cotangent (8*length).  Responses to both carry one float32 vector
    (4*length).  Meta/error payloads are raw bytes of the given length.
    """
    if opcode == OP_SCORE:
        return 4 * length
    if opcode == OP_VJP:
        return 4 * length if response else 8 * length
    return length


class _SocketTransport:
    def __init__(self, host: str, port: int, timeout: float):
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise BridgeError(f"cannot reach score server at {host}:{port}: {exc}") from exc
        self.sock.settimeout(timeout)

    def send(self, data: bytes):
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise BridgeError(f"send failed: {exc}") from exc

    def recv_exact(self, n: int) -> bytes:
        chunks = []
        remaining = n
        try:
            while remaining > 0:
                chunk = self.sock.recv(remaining)
                if not chunk:
                    raise BridgeError("score server closed the connection")
                chunks.append(chunk)
                remaining -= len(chunk)
        except socket.timeout as exc:
            raise BridgeError("score server timed out") from exc
        except OSError as exc:
            raise BridgeError(f"receive failed: {exc}") from exc
        return b"".join(chunks)

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


class _StdioTransport:
    def __init__(self, command: str):
        try:
            self.proc = subprocess.Popen(
                shlex.split(command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
            )
        except OSError as exc:
            raise BridgeError(f"cannot start score server {command!r}: {exc}") from exc

    def send(self, data: bytes):
        if self.proc.poll() is not None:
            raise BridgeError("score server process exited")
        try:
            self.proc.stdin.write(data)
            self.proc.stdin.flush()
        except (OSError, ValueError) as exc:
            raise BridgeError(f"send failed: {exc}") from exc

    def recv_exact(self, n: int) -> bytes:
        data = self.proc.stdout.read(n)
        if data is None or len(data) < n:
            raise BridgeError("score server process closed its output")
        return data

    def close(self):
        for stream in (self.proc.stdin, self.proc.stdout):
            try:
                stream.close()
            except OSError:
                pass
        self.proc.terminate()
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self.proc.kill()


class BridgedScoreModel:
    """Score model served over the bridge; implements the in-process interface.

    ``vjp_score`` is None when the server does not advertise support, which
    makes the sampler fall back to the identity denoiser Jacobian.
    """

    def __init__(self, endpoint: str, timeout: float = DEFAULT_TIMEOUT_S):
        self.endpoint = endpoint
        if endpoint.startswith("stdio:"):
            self._transport = _StdioTransport(endpoint[len("stdio:") :])
        else:
            spec = endpoint[len("tcp:") :] if endpoint.startswith("tcp:") else endpoint
            host, _, port = spec.rpartition(":")
            if not host or not port.isdigit():
                raise BridgeError(f"bad endpoint {endpoint!r}; use tcp:HOST:PORT or stdio:CMD")
            self._transport = _SocketTransport(host, int(port), timeout)
        meta = self._request_meta()
        self.data_rms = meta.get("data_rms")
        self.sample_rate = meta.get("sample_rate")
        self.max_len = meta.get("max_len")
        if not meta.get("supports_vjp", False):
            self.vjp_score = None

    def _roundtrip(self, opcode: int, sigma: float, length: int, payload: bytes):
        self._transport.send(encode_frame(opcode, sigma, length, payload))
        header = self._transport.recv_exact(_HEADER.size)
        magic, op, r_sigma, r_length = _HEADER.unpack(header)
        if magic != MAGIC:
            raise BridgeError("malformed response frame from score server")
        body = self._transport.recv_exact(payload_bytes(op, r_length, response=True))
        if op == OP_ERROR:
            raise BridgeError(f"score server error: {body.decode('utf-8', 'replace')}")
        if op != opcode:
            raise BridgeError(f"unexpected response opcode {op}")
        return r_length, body

    def _request_meta(self) -> dict:
        length, body = self._roundtrip(OP_META, 0.0, 0, b"")
        try:
            return json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise BridgeError(f"bad metadata from score server: {exc}") from exc

    def _vector_call(self, opcode: int, payload_vec: np.ndarray, sigma: float, n: int):
        wire = np.ascontiguousarray(payload_vec, dtype="<f4").tobytes()
        r_length, body = self._roundtrip(opcode, sigma, n, wire)
        if r_length != n:
            raise BridgeError(
                f"score server returned {r_length} samples, expected {n}"
            )
        return np.frombuffer(body, dtype="<f4").astype(np.float64)

    def score(self, x: np.ndarray, sigma: float) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.max_len is not None and x.size > self.max_len:
            raise BridgeError(
                f"state of {x.size} samples exceeds the server limit {self.max_len}"
            )
        return self._vector_call(OP_SCORE, x, sigma, x.size)

    def vjp_score(self, x: np.ndarray, sigma: float, cotangent: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        u = np.asarray(cotangent, dtype=np.float64)
        stacked = np.concatenate([x, u])
        return self._vector_call(OP_VJP, stacked, sigma, x.size)

    def close(self):
        self._transport.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
