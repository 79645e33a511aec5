import { describe, expect, it } from "vitest";

import {
  HEADER_SIZE,
  Op,
  decodeHeader,
  decodeVector,
  encodeFrame,
  encodeVector,
  errorFrame,
  payloadBytes,
} from "../src/protocol.js";

describe("frame codec", () => {
  it("round-trips a header", () => {
    const frame = encodeFrame(Op.Score, 0.375, 7, Buffer.alloc(28));
    const header = decodeHeader(frame);
    expect(header).not.toBeNull();
    expect(header!.opcode).toBe(Op.Score);
    expect(header!.sigma).toBeCloseTo(0.375, 12);
    expect(header!.length).toBe(7);
    expect(frame.length).toBe(HEADER_SIZE + 28);
  });

  it("rejects a bad magic", () => {
    const frame = Buffer.from(encodeFrame(Op.Meta, 0, 0, Buffer.alloc(0)));
    frame.write("XXXX", 0, "ascii");
    expect(() => decodeHeader(frame)).toThrow(/magic/);
  });

  it("returns null on short input", () => {
    expect(decodeHeader(Buffer.alloc(HEADER_SIZE - 1))).toBeNull();
  });

  it("computes payload sizes per direction", () => {
    expect(payloadBytes(Op.Score, 10, false)).toBe(40);
    expect(payloadBytes(Op.Score, 10, true)).toBe(40);
    expect(payloadBytes(Op.Vjp, 10, false)).toBe(80);
    expect(payloadBytes(Op.Vjp, 10, true)).toBe(40);
    expect(payloadBytes(Op.Meta, 13, true)).toBe(13);
  });

  it("round-trips float32 vectors", () => {
    const values = [0.1, -2.5, 1e-7, 3.25];
    const decoded = decodeVector(encodeVector(values), values.length);
    for (let i = 0; i < values.length; i++) {
      expect(decoded[i]).toBe(Math.fround(values[i]));
    }
  });

  it("builds error frames with byte lengths", () => {
    const frame = errorFrame("boom");
    const header = decodeHeader(frame)!;
    expect(header.opcode).toBe(Op.Error);
    expect(header.length).toBe(4);
    expect(frame.subarray(HEADER_SIZE).toString("utf-8")).toBe("boom");
  });
});
