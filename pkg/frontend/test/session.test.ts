import { describe, expect, it } from "vitest";

import { encodeDepth } from "../src/protocol.js";
import {
  applyMessage, auditWorldGeometry, formatDistance, initialView,
  onDisconnect, onSendFailure,
} from "../src/session.js";

const HELLO = JSON.stringify({
  type: "hello", protocol: "pipesnake-teleop/1", rate_hz: 10.0, dt: 0.05,
  action_dim: 12,
  joint_modes: ["velocity", "velocity", "position",
    "velocity", "velocity", "position"],
  depth_hw: [16, 16], depth_encoding: "f32le-base64", h_max: 5.0,
  fairness: true,
});

function frameJson(t: number, distance: number, extra: object = {}): string {
  return JSON.stringify({
    type: "frame", t, kinematic: Array(48).fill(0.25),
    depth: encodeDepth(new Float32Array(256).fill(5.0)), distance, ...extra,
  });
}

function connected() {
  return applyMessage(initialView(), HELLO);
}

describe("session state", () => {
  it("hello connects and enables the controls", () => {
    const v = connected();
    expect(v.status).toBe("connected");
    expect(v.controlsEnabled).toBe(true);
    expect(v.hello?.h_max).toBe(5.0);
  });

  it("a frame updates readouts and depth", () => {
    const v = applyMessage(connected(), frameJson(1, 0.5));
    expect(v.frame?.t).toBe(1);
    expect(v.depth?.[0]).toBe(5.0);
    expect(v.framesSeen).toBe(1);
  });

  it("the distance counter is a monotone display of the served value", () => {
    let v = connected();
    v = applyMessage(v, frameJson(1, 1.2));
    v = applyMessage(v, frameJson(2, 0.8)); // robot slid backward
    expect(v.distanceShown).toBe(1.2);
    v = applyMessage(v, frameJson(3, 4.88));
    expect(formatDistance(v.distanceShown)).toBe("4.88 m");
  });

  it("a malformed frame raises the banner and keeps the last good frame", () => {
    let v = applyMessage(connected(), frameJson(1, 0.5));
    const before = v.frame;
    v = applyMessage(v, JSON.stringify({
      type: "frame", t: 2, kinematic: [1, 2, 3], depth: "xx", distance: 1,
    }));
    expect(v.banner).toBeTruthy();
    expect(v.frame).toBe(before);
    expect(v.framesSeen).toBe(1);
    // healthy traffic clears the banner again
    v = applyMessage(v, frameJson(2, 0.6));
    expect(v.banner).toBeNull();
    expect(v.framesSeen).toBe(2);
  });

  it("non-JSON payloads raise the banner without killing the session", () => {
    const v = applyMessage(connected(), "garbage{{{");
    expect(v.banner).toBeTruthy();
    expect(v.status).toBe("connected");
  });

  it("server error messages land in the banner", () => {
    const v = applyMessage(connected(),
      JSON.stringify({ type: "error", message: "action needs 12 values" }));
    expect(v.banner).toContain("action needs 12 values");
  });

  it("result is stored for the summary card", () => {
    const v = applyMessage(connected(), JSON.stringify({
      type: "result", distance: 4.88, steps: 900, goal: false, corners: 2,
      success: false,
    }));
    expect(v.result?.distance).toBe(4.88);
  });

  it("disconnect flips the status and disables the controls", () => {
    const v = onDisconnect(applyMessage(connected(), frameJson(1, 0.5)));
    expect(v.status).toBe("disconnected");
    expect(v.controlsEnabled).toBe(false);
    expect(v.frame?.t).toBe(1); // the last frame stays on screen
  });

  it("a failed send surfaces in the banner", () => {
    const v = onSendFailure(connected(), "socket closed");
    expect(v.banner).toContain("send failed");
  });
});

describe("fairness audit", () => {
  it("finds nothing in a fairness-mode session", () => {
    let v = connected();
    for (let t = 1; t <= 5; t++) {
      v = applyMessage(v, frameJson(t, 0.1 * t));
    }
    expect(auditWorldGeometry(v)).toEqual([]);
  });

  it("flags world geometry when a frame smuggles it in", () => {
    const v = applyMessage(connected(), frameJson(1, 0.5, {
      world: { nodes: [[0, 0]], wall_lines: [[0, 0, 1, 0]], wall_arcs: [] },
    }));
    const leaks = auditWorldGeometry(v);
    expect(leaks.some((p) => p.endsWith(".world"))).toBe(true);
    expect(leaks.some((p) => p.includes("wall_lines"))).toBe(true);
  });
});
