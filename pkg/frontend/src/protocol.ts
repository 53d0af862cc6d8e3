/**
 * Wire codec for the teleop protocol: 8-digit ASCII length prefix plus a
 * UTF-8 JSON payload, identical in both directions.  The decoder hands
 * payloads back as verbatim text so a relay never re-serializes them.
 */

export const PROTOCOL = "pipesnake-teleop/1";
export const LEN_DIGITS = 8;
export const MAX_PAYLOAD = 99_999_999;
export const DEPTH_VALUES = 256;
export const ACTION_DIM = 12;

export class ProtocolError extends Error {}

export interface HelloMsg {
  type: "hello";
  protocol: string;
  rate_hz: number;
  dt: number;
  action_dim: number;
  joint_modes: string[];
  depth_hw: [number, number];
  depth_encoding: string;
  h_max: number;
  fairness: boolean;
}

export interface FrameMsg {
  type: "frame";
  t: number;
  kinematic: number[];
  depth: string;
  distance: number;
  world?: unknown;
}

export interface ResultMsg {
  type: "result";
  distance: number;
  steps: number;
  goal: boolean;
  corners: number;
  success: boolean;
}

export interface ErrorMsg {
  type: "error";
  message: string;
}

export type ServerMsg = HelloMsg | FrameMsg | ResultMsg | ErrorMsg;

const utf8encode = new TextEncoder();
const utf8decode = new TextDecoder("utf-8", { fatal: true });

/** Frame one payload: length prefix + UTF-8 bytes of `text`. */
export function frameText(text: string): Uint8Array {
  const body = utf8encode.encode(text);
  if (body.length > MAX_PAYLOAD) {
    throw new ProtocolError(`payload too large: ${body.length}`);
  }
  const prefix = utf8encode.encode(String(body.length).padStart(LEN_DIGITS, "0"));
  const out = new Uint8Array(LEN_DIGITS + body.length);
  out.set(prefix, 0);
  out.set(body, LEN_DIGITS);
  return out;
}

export function encodeMessage(obj: unknown): Uint8Array {
  return frameText(JSON.stringify(obj));
}

/** Incremental splitter for the byte stream; returns payloads as text. */
export class StreamDecoder {
  private buf = new Uint8Array(0);

  push(chunk: Uint8Array): string[] {
    const joined = new Uint8Array(this.buf.length + chunk.length);
    joined.set(this.buf, 0);
    joined.set(chunk, this.buf.length);
    this.buf = joined;

    const out: string[] = [];
    for (;;) {
      if (this.buf.length < LEN_DIGITS) break;
      let n = 0;
      for (let i = 0; i < LEN_DIGITS; i++) {
        const c = this.buf[i]!;
        if (c < 0x30 || c > 0x39) {
          throw new ProtocolError("corrupt length prefix");
        }
        n = n * 10 + (c - 0x30);
      }
      if (this.buf.length < LEN_DIGITS + n) break;
      const body = this.buf.subarray(LEN_DIGITS, LEN_DIGITS + n);
      out.push(utf8decode.decode(body));
      this.buf = this.buf.slice(LEN_DIGITS + n);
    }
    return out;
  }

  get pending(): number {
    return this.buf.length;
  }
}

export function parseMessage(text: string): Record<string, unknown> {
  let value: unknown;
  try {
    value = JSON.parse(text);
  } catch {
    throw new ProtocolError("payload is not valid JSON");
  }
  if (typeof value !== "object" || value === null || Array.isArray(value)) {
    throw new ProtocolError("payload is not a JSON object");
  }
  return value as Record<string, unknown>;
}

const b64decode: (s: string) => Uint8Array =
  typeof atob === "function"
    ? (s) => Uint8Array.from(atob(s), (c) => c.charCodeAt(0))
    : (s) => new Uint8Array(Buffer.from(s, "base64"));

const b64encode: (b: Uint8Array) => string =
  typeof btoa === "function"
    ? (b) => btoa(String.fromCharCode(...b))
    : (b) => Buffer.from(b).toString("base64");

/** 256 little-endian float32 depth values from the frame's base64 field. */
export function decodeDepth(b64: string): Float32Array {
  let bytes: Uint8Array;
  try {
    bytes = b64decode(b64);
  } catch {
    throw new ProtocolError("depth field is not valid base64");
  }
  if (bytes.length !== DEPTH_VALUES * 4) {
    throw new ProtocolError(`depth payload has ${bytes.length} bytes, want 1024`);
  }
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  const out = new Float32Array(DEPTH_VALUES);
  for (let i = 0; i < DEPTH_VALUES; i++) {
    out[i] = view.getFloat32(i * 4, true);
  }
  return out;
}

export function encodeDepth(values: ArrayLike<number>): string {
  if (values.length !== DEPTH_VALUES) {
    throw new ProtocolError(`depth needs ${DEPTH_VALUES} values`);
  }
  const bytes = new Uint8Array(DEPTH_VALUES * 4);
  const view = new DataView(bytes.buffer);
  for (let i = 0; i < DEPTH_VALUES; i++) {
    view.setFloat32(i * 4, Number(values[i]), true);
  }
  return b64encode(bytes);
}

export const clamp = (x: number): number => Math.min(1, Math.max(-1, x));

/** Client-side mirror of the server's action checks. */
export function buildActionMessage(t: number, values: ArrayLike<number>) {
  if (values.length !== ACTION_DIM) {
    throw new ProtocolError(`action needs ${ACTION_DIM} values`);
  }
  const out: number[] = [];
  for (let i = 0; i < ACTION_DIM; i++) {
    const v = Number(values[i]);
    if (!Number.isFinite(v)) {
      throw new ProtocolError("action values must be finite");
    }
    out.push(clamp(v));
  }
  return { type: "action" as const, t, values: out };
}
