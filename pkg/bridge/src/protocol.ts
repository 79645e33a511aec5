/**
 * Framed binary protocol shared with the core client.
 *
 * Frame = 4-byte magic "DRVB" + uint32 LE opcode + float64 LE sigma +
 * uint64 LE length + payload.
 *
 * For score/vjp the length field is the vector element count: a score
 * request carries `length` float32 values (the state), a vjp request carries
 * `2 * length` (state then cotangent), and responses to both carry `length`
 * float32 values.  Meta and error frames use the length field as the payload
 * byte count (UTF-8 JSON / text).
 */

export const MAGIC = Buffer.from("DRVB", "ascii");
export const HEADER_SIZE = 24;

export enum Op {
  Error = 0,
  Score = 1,
  Vjp = 2,
  Meta = 3,
}

export interface FrameHeader {
  opcode: number;
  sigma: number;
  length: number;
}

export function encodeHeader(opcode: number, sigma: number, length: number): Buffer {
  const buf = Buffer.alloc(HEADER_SIZE);
  MAGIC.copy(buf, 0);
  buf.writeUInt32LE(opcode >>> 0, 4);
  buf.writeDoubleLE(sigma, 8);
  buf.writeBigUInt64LE(BigInt(length), 16);
  return buf;
}

export function encodeFrame(opcode: number, sigma: number, length: number, payload: Buffer): Buffer {
  return Buffer.concat([encodeHeader(opcode, sigma, length), payload]);
}

/** Returns null when fewer than HEADER_SIZE bytes are available. */
export function decodeHeader(buf: Buffer): FrameHeader | null {
  if (buf.length < HEADER_SIZE) {
    return null;
  }
  if (!buf.subarray(0, 4).equals(MAGIC)) {
    throw new Error("bad magic");
  }
  const opcode = buf.readUInt32LE(4);
  const sigma = buf.readDoubleLE(8);
  const length = Number(buf.readBigUInt64LE(16));
  return { opcode, sigma, length };
}

/** Payload byte count implied by a header, by direction. */
export function payloadBytes(opcode: number, length: number, response: boolean): number {
  if (opcode === Op.Score) {
    return 4 * length;
  }
  if (opcode === Op.Vjp) {
    return response ? 4 * length : 8 * length;
  }
  return length;
}

export function encodeVector(values: Float64Array | number[]): Buffer {
  const out = Buffer.alloc(4 * values.length);
  for (let i = 0; i < values.length; i++) {
    out.writeFloatLE(Math.fround(values[i]), 4 * i);
  }
  return out;
}

export function decodeVector(payload: Buffer, count: number): Float64Array {
  const out = new Float64Array(count);
  for (let i = 0; i < count; i++) {
    out[i] = payload.readFloatLE(4 * i);
  }
  return out;
}

export function errorFrame(message: string): Buffer {
  const body = Buffer.from(message, "utf-8");
  return encodeFrame(Op.Error, 0, body.length, body);
}
