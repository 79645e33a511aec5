/**
 * Serving loop: one request in flight per connection, incremental frame
 * parsing, malformed frames answered with an error frame while the
 * connection stays open (resynchronization assumes header-aligned input).
 */

import net from "node:net";
import { Readable, Writable } from "node:stream";

import { ScoreModel } from "./model.js";
import {
  HEADER_SIZE,
  MAGIC,
  Op,
  decodeVector,
  encodeFrame,
  encodeVector,
  errorFrame,
  payloadBytes,
} from "./protocol.js";

export function handleRequest(model: ScoreModel, opcode: number, sigma: number, payload: Buffer): Buffer {
  switch (opcode) {
    case Op.Meta: {
      const body = Buffer.from(JSON.stringify(model.meta()), "utf-8");
      return encodeFrame(Op.Meta, 0, body.length, body);
    }
    case Op.Score: {
      const n = payload.length / 4;
      const x = decodeVector(payload, n);
      const score = model.score(x, sigma);
      return encodeFrame(Op.Score, sigma, n, encodeVector(score));
    }
    case Op.Vjp: {
      if (!model.vjpScore) {
        return errorFrame("vjp not supported");
      }
      const n = payload.length / 8;
      const x = decodeVector(payload.subarray(0, 4 * n), n);
      const cot = decodeVector(payload.subarray(4 * n), n);
      const out = model.vjpScore(x, sigma, cot);
      return encodeFrame(Op.Vjp, sigma, n, encodeVector(out));
    }
    default:
      return errorFrame(`unknown opcode ${opcode}`);
  }
}

/** Incremental parser over a byte stream; writes one response per frame. */
export class FrameSession {
  private pending = Buffer.alloc(0);

  constructor(
    private readonly model: ScoreModel,
    private readonly write: (data: Buffer) => void,
  ) {}

  feed(chunk: Buffer): void {
    this.pending = Buffer.concat([this.pending, chunk]);
    for (;;) {
      if (this.pending.length < HEADER_SIZE) {
        return;
      }
      if (!this.pending.subarray(0, 4).equals(MAGIC)) {
        this.pending = Buffer.from(this.pending.subarray(HEADER_SIZE));
        this.write(errorFrame("bad magic"));
        continue;
      }
      const opcode = this.pending.readUInt32LE(4);
      const sigma = this.pending.readDoubleLE(8);
      const length = Number(this.pending.readBigUInt64LE(16));
      const known = opcode === Op.Score || opcode === Op.Vjp || opcode === Op.Meta;
      const bodySize = known ? payloadBytes(opcode, length, false) : length;
      if (this.pending.length < HEADER_SIZE + bodySize) {
        return;
      }
      const payload = Buffer.from(
        this.pending.subarray(HEADER_SIZE, HEADER_SIZE + bodySize),
      );
      this.pending = Buffer.from(this.pending.subarray(HEADER_SIZE + bodySize));
      this.write(handleRequest(this.model, opcode, sigma, payload));
    }
  }
}

export function serveConnection(model: ScoreModel, socket: net.Socket): void {
  const session = new FrameSession(model, (data) => socket.write(data));
  socket.on("data", (chunk) => {
    try {
      session.feed(chunk);
    } catch (err) {
      socket.write(errorFrame(String(err)));
    }
  });
  socket.on("error", () => socket.destroy());
}

export function startTcpServer(model: ScoreModel, host: string, port: number): Promise<net.Server> {
  const server = net.createServer((socket) => serveConnection(model, socket));
  return new Promise((resolve, reject) => {
    server.once("error", reject);
    server.listen(port, host, () => resolve(server));
  });
}

export function serveStdio(model: ScoreModel, input: Readable, output: Writable): Promise<void> {
  const session = new FrameSession(model, (data) => output.write(data));
  return new Promise((resolve) => {
    input.on("data", (chunk: Buffer) => session.feed(chunk));
    input.on("end", () => resolve());
    input.on("close", () => resolve());
  });
}
