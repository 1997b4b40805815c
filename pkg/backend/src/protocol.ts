/**
 * MVD1 wire protocol framing.
 *
 * Frame: "MVD1" | kind u8 | payloadLen u32le | payload
 * Payload: headerLen u32le | header JSON (utf-8) | raw f32le tensors,
 * concatenated in the order the header's "tensors" list declares.
 */

export const MAGIC = Buffer.from("MVD1", "ascii");
export const PROTOCOL_VERSION = "MVD1";

export const KIND_REQUEST = 1;
export const KIND_RESPONSE = 2;
export const KIND_ERROR = 3;
export const KIND_HELLO = 4;

export interface TensorSpec {
  name: string;
  dims: number[];
}

export interface MessageHeader {
  tensors?: TensorSpec[];
  version?: string;
  num_steps?: number;
  alpha_bar?: number[];
  view_id?: number;
  timestep?: number;
  prompt?: string | null;
  reason?: string;
  [key: string]: unknown;
}

export interface WireMessage {
  kind: number;
  header: MessageHeader;
  tensors: Map<string, Float32Array>;
}

export class ProtocolError extends Error {}

const strictUtf8 = new TextDecoder("utf-8", { fatal: true });

function tensorCount(dims: number[]): number {
  return dims.reduce((a, b) => a * b, 1);
}

export function encodeMessage(msg: WireMessage): Buffer {
  const specs = msg.header.tensors ?? [];
  const blobs: Buffer[] = [];
  for (const spec of specs) {
    const arr = msg.tensors.get(spec.name);
    if (!arr || arr.length !== tensorCount(spec.dims)) {
      throw new ProtocolError(`tensor ${spec.name}: data missing or wrong size`);
    }
    const buf = Buffer.alloc(arr.length * 4);
    for (let i = 0; i < arr.length; i++) buf.writeFloatLE(arr[i], i * 4);
    blobs.push(buf);
  }
  const headerBytes = Buffer.from(JSON.stringify(msg.header), "utf-8");
  const payloadLen = 4 + headerBytes.length + blobs.reduce((a, b) => a + b.length, 0);
  const out = Buffer.alloc(9 + payloadLen);
  MAGIC.copy(out, 0);
  out.writeUInt8(msg.kind, 4);
  out.writeUInt32LE(payloadLen, 5);
  out.writeUInt32LE(headerBytes.length, 9);
  headerBytes.copy(out, 13);
  let offset = 13 + headerBytes.length;
  for (const blob of blobs) {
    blob.copy(out, offset);
    offset += blob.length;
  }
  return out;
}

export function decodePayload(kind: number, payload: Buffer): WireMessage {
  if (payload.length < 4) throw new ProtocolError("short payload");
  const headerLen = payload.readUInt32LE(0);
  if (4 + headerLen > payload.length) throw new ProtocolError("short payload");
  let header: MessageHeader;
  try {
    header = JSON.parse(strictUtf8.decode(payload.subarray(4, 4 + headerLen)));
  } catch (e) {
    throw new ProtocolError(`bad header json: ${(e as Error).message}`);
  }
  const tensors = new Map<string, Float32Array>();
  let offset = 4 + headerLen;
  for (const spec of header.tensors ?? []) {
    const count = tensorCount(spec.dims);
    const nbytes = count * 4;
    if (offset + nbytes > payload.length) throw new ProtocolError("short payload");
    const arr = new Float32Array(count);
    for (let i = 0; i < count; i++) arr[i] = payload.readFloatLE(offset + i * 4);
    tensors.set(spec.name, arr);
    offset += nbytes;
  }
  if (offset !== payload.length) {
    throw new ProtocolError("payload length does not match declared tensors");
  }
  return { kind, header, tensors };
}

/** Incremental parser; push chunks, take complete frames out. */
export class FrameParser {
  private buf = Buffer.alloc(0);

  push(chunk: Buffer): Array<{ kind: number; payload: Buffer } | { error: string }> {
    this.buf = Buffer.concat([this.buf, chunk]);
    const out: Array<{ kind: number; payload: Buffer } | { error: string }> = [];
    for (;;) {
      if (this.buf.length < 9) break;
      if (!this.buf.subarray(0, 4).equals(MAGIC)) {
        out.push({ error: `bad magic ${this.buf.subarray(0, 4).toString("hex")}` });
        this.buf = Buffer.alloc(0); // cannot resync without the magic
        break;
      }
      const kind = this.buf.readUInt8(4);
      const payloadLen = this.buf.readUInt32LE(5);
      if (this.buf.length < 9 + payloadLen) break;
      out.push({ kind, payload: this.buf.subarray(9, 9 + payloadLen) });
      this.buf = this.buf.subarray(9 + payloadLen);
    }
    return out;
  }
}

export function helloMessage(): WireMessage {
  return {
    kind: KIND_HELLO,
    header: { version: PROTOCOL_VERSION, tensors: [] },
    tensors: new Map(),
  };
}

export function errorMessage(reason: string): WireMessage {
  return { kind: KIND_ERROR, header: { reason, tensors: [] }, tensors: new Map() };
}

export function responseMessage(eps: Float32Array, dims: number[]): WireMessage {
  return {
    kind: KIND_RESPONSE,
    header: { tensors: [{ name: "eps", dims }] },
    tensors: new Map([["eps", eps]]),
  };
}
