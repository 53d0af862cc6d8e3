/**
 * Pure view-state layer: every server payload folds into a SessionView via
 * applyMessage, so rendering is a plain function of the latest view and the
 * whole layer tests without a DOM.
 */

import {
  DEPTH_VALUES, FrameMsg, HelloMsg, ProtocolError, ResultMsg,
  decodeDepth, parseMessage,
} from "./protocol.js";

export type Status = "connecting" | "connected" | "disconnected";

export interface SessionView {
  status: Status;
  hello: HelloMsg | null;
  frame: FrameMsg | null;
  depth: Float32Array | null;
  /** monotone running max of the served distance field */
  distanceShown: number;
  result: ResultMsg | null;
  banner: string | null;
  controlsEnabled: boolean;
  framesSeen: number;
}

export function initialView(): SessionView {
  return {
    status: "connecting",
    hello: null,
    frame: null,
    depth: null,
    distanceShown: 0,
    result: null,
    banner: null,
    controlsEnabled: false,
    framesSeen: 0,
  };
}

export function onDisconnect(view: SessionView): SessionView {
  return { ...view, status: "disconnected", controlsEnabled: false };
}

export function onSendFailure(view: SessionView, detail: string): SessionView {
  return { ...view, banner: `send failed: ${detail}` };
}

function asHello(msg: Record<string, unknown>): HelloMsg {
  if (typeof msg.protocol !== "string" || typeof msg.h_max !== "number"
      || typeof msg.rate_hz !== "number" || !Array.isArray(msg.joint_modes)
      || typeof msg.fairness !== "boolean") {
    throw new ProtocolError("incomplete hello");
  }
  return msg as unknown as HelloMsg;
}

function asFrame(msg: Record<string, unknown>): { frame: FrameMsg; depth: Float32Array } {
  const { t, kinematic, depth, distance } = msg;
  if (typeof t !== "number" || typeof distance !== "number"
      || !Number.isFinite(distance) || typeof depth !== "string"
      || !Array.isArray(kinematic) || kinematic.length !== 48
      || !kinematic.every((x) => typeof x === "number" && Number.isFinite(x))) {
    throw new ProtocolError("malformed frame");
  }
  const values = decodeDepth(depth);
  if (values.length !== DEPTH_VALUES) {
    throw new ProtocolError("depth size mismatch");
  }
  return { frame: msg as unknown as FrameMsg, depth: values };
}

/** Fold one payload (verbatim text) into the view.  Bad input sets the
 *  banner and leaves the last good frame in place. */
export function applyMessage(view: SessionView, payload: string): SessionView {
  let msg: Record<string, unknown>;
  try {
    msg = parseMessage(payload);
  } catch (err) {
    return { ...view, banner: String((err as Error).message) };
  }
  try {
    switch (msg.type) {
      case "hello": {
        const hello = asHello(msg);
        return {
          ...view, hello, status: "connected", controlsEnabled: true,
          banner: null,
        };
      }
      case "frame": {
        const { frame, depth } = asFrame(msg);
        return {
          ...view, frame, depth, banner: null,
          distanceShown: Math.max(view.distanceShown, frame.distance),
          framesSeen: view.framesSeen + 1,
        };
      }
      case "error":
        return { ...view, banner: `server: ${String(msg.message)}` };
      case "result":
        return { ...view, result: msg as unknown as ResultMsg };
      default:
        return { ...view, banner: `unknown message type ${String(msg.type)}` };
    }
  } catch (err) {
    return { ...view, banner: String((err as Error).message) };
  }
}

export function formatDistance(meters: number): string {
  return `${meters.toFixed(2)} m`;
}

const GEOMETRY_KEYS = new Set(["world", "nodes", "wall_lines", "wall_arcs"]);

/** Paths of any world-geometry payload reachable from `value`; the fairness
 *  invariant is that this comes back empty for the whole client state. */
export function auditWorldGeometry(value: unknown, path = "$"): string[] {
  if (typeof value !== "object" || value === null) return [];
  const found: string[] = [];
  if (!Array.isArray(value)) {
    for (const [key, child] of Object.entries(value)) {
      if (GEOMETRY_KEYS.has(key)) {
        found.push(`${path}.${key}`);
      }
      found.push(...auditWorldGeometry(child, `${path}.${key}`));
    }
  } else {
    value.forEach((child, i) => {
      found.push(...auditWorldGeometry(child, `${path}[${i}]`));
    });
  }
  return found;
}
