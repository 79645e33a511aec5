"""Reference score server used by the bridge tests (TCP and stdio modes).

Computes the isotropic-Gaussian score in float64 on the float32 wire values,
mirroring the in-process prior, so client round trips are bitwise at float32.
"""

import argparse
import json
import socket
import struct
import sys
import threading

import numpy as np

from dereverb.bridge import MAGIC, OP_ERROR, OP_META, OP_SCORE, OP_VJP, encode_frame

_HEADER = struct.Struct("<4sId Q")


class GaussianServer:
    def __init__(self, mean=0.0, variance=1.0, data_rms=0.05, sample_rate=16000,
                 max_len=1_000_000, supports_vjp=True):
        self.mean = mean
        self.variance = variance
        self.meta = {
            "data_rms": data_rms,
            "sample_rate": sample_rate,
            "max_len": max_len,
            "supports_vjp": supports_vjp,
        }
        self.supports_vjp = supports_vjp

    def _respond(self, opcode, sigma, length, payload_f32):
        body = np.ascontiguousarray(payload_f32, dtype="<f4").tobytes()
        return encode_frame(opcode, sigma, length, body)

    def handle(self, opcode, sigma, payload):
        if opcode == OP_META:
            body = json.dumps(self.meta).encode("utf-8")
            return encode_frame(OP_META, 0.0, len(body), body)
        if opcode == OP_SCORE:
            x = np.frombuffer(payload, dtype="<f4").astype(np.float64)
            score = (self.mean - x) / (self.variance + sigma**2)
            return self._respond(OP_SCORE, sigma, x.size, score)
        if opcode == OP_VJP:
            if not self.supports_vjp:
                msg = b"vjp not supported"
                return encode_frame(OP_ERROR, 0.0, len(msg), msg)
            both = np.frombuffer(payload, dtype="<f4").astype(np.float64)
            n = both.size // 2
            u = both[n:]
            out = -u / (self.variance + sigma**2)
            return self._respond(OP_VJP, sigma, n, out)
        msg = f"unknown opcode {opcode}".encode()
        return encode_frame(OP_ERROR, 0.0, len(msg), msg)

    def serve_stream(self, read_exact, write):
        while True:
            header = read_exact(_HEADER.size)
            if header is None:
                return
            magic, opcode, sigma, length = _HEADER.unpack(header)
            if magic != MAGIC:
                msg = b"bad magic"
                write(encode_frame(OP_ERROR, 0.0, len(msg), msg))
                continue
            if opcode == OP_SCORE:
                nbytes = 4 * length
            elif opcode == OP_VJP:
                nbytes = 8 * length
            else:
                nbytes = length if opcode != OP_META else 0
            payload = read_exact(nbytes) if nbytes else b""
            if payload is None:
                return
            write(self.handle(opcode, sigma, payload))


def _sock_reader(conn):
    def read_exact(n):
        chunks = []
        remaining = n
        while remaining > 0:
            chunk = conn.recv(remaining)
            if not chunk:
                return None
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    return read_exact


def serve_tcp(server: GaussianServer, host="127.0.0.1", port=0):
    """Returns (listen socket, thread); one request in flight per connection."""
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind((host, port))
    listener.listen(4)

    def loop():
        while True:
            try:
                conn, _ = listener.accept()
            except OSError:
                return
            with conn:
                try:
                    server.serve_stream(_sock_reader(conn), conn.sendall)
                except OSError:
                    pass

    thread = threading.Thread(target=loop, daemon=True)
    thread.start()
    return listener, thread


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--stdio", action="store_true")
    parser.add_argument("--mean", type=float, default=0.0)
    parser.add_argument("--variance", type=float, default=1.0)
    parser.add_argument("--no-vjp", action="store_true")
    args = parser.parse_args()
    server = GaussianServer(
        mean=args.mean, variance=args.variance, supports_vjp=not args.no_vjp
    )
    if args.stdio:
        stdin = sys.stdin.buffer
        stdout = sys.stdout.buffer

        def read_exact(n):
            data = stdin.read(n)
            return data if data and len(data) == n else None

        def write(data):
            stdout.write(data)
            stdout.flush()

        server.serve_stream(read_exact, write)


if __name__ == "__main__":
    main()
