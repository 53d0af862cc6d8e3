import { describe, expect, it } from "vitest";

import {
  buildBindings, currentAction, keyDown, keyUp, sendWithRetry, setSlider,
} from "../src/controls.js";

const MODES = ["velocity", "velocity", "position",
  "velocity", "velocity", "position"];

describe("bindings", () => {
  it("labels six joints from the hello modes plus six velocity wheels", () => {
    const b = buildBindings(MODES);
    expect(b.channels).toHaveLength(12);
    expect(b.channels[2]).toMatchObject({ name: "J3", mode: "position" });
    expect(b.channels[5]).toMatchObject({ name: "J6", mode: "position" });
    expect(b.channels.slice(6).every((c) => c.mode === "velocity")).toBe(true);
    expect(b.channels[6]?.name).toBe("w1");
  });

  it("rejects unknown modes", () => {
    expect(() => buildBindings(["velocity", "x", "position",
      "velocity", "velocity", "position"])).toThrow();
  });

  it("idle state emits all-zero velocity channels and held positions", () => {
    const b = buildBindings(MODES);
    expect(currentAction(b)).toEqual(Array(12).fill(0));
    setSlider(b, 2, 0.4); // position joint holds with no further input
    expect(currentAction(b)[2]).toBe(0.4);
    expect(currentAction(b).filter((_, i) => i !== 2)).toEqual(Array(11).fill(0));
  });
});

describe("sliders", () => {
  it("passes J3 = 0.5 through to values[2]", () => {
    const b = buildBindings(MODES);
    setSlider(b, 2, 0.5);
    expect(currentAction(b)[2]).toBe(0.5);
  });

  it("clamps slider input into [-1, 1]", () => {
    const b = buildBindings(MODES);
    setSlider(b, 0, 1.4);
    setSlider(b, 7, -9);
    expect(currentAction(b)[0]).toBe(1);
    expect(currentAction(b)[7]).toBe(-1);
  });
});

describe("keyboard", () => {
  it("steps the wheel bank with w and clamps at 1.0", () => {
    const b = buildBindings(MODES);
    keyDown(b, "w");
    const first = currentAction(b)[6]!;
    keyDown(b, "w");
    const second = currentAction(b)[6]!;
    expect(first).toBeGreaterThan(0);
    expect(second).toBeGreaterThan(first);
    for (let i = 0; i < 10; i++) keyDown(b, "w");
    expect(currentAction(b).slice(6)).toEqual(Array(6).fill(1));
  });

  it("key release zeroes velocity channels but holds position channels", () => {
    const b = buildBindings(MODES);
    keyDown(b, "w");
    keyDown(b, "]"); // J3, position mode
    expect(currentAction(b)[6]).not.toBe(0);
    expect(currentAction(b)[2]).not.toBe(0);
    const held = currentAction(b)[2];
    keyUp(b, "w");
    keyUp(b, "]");
    expect(currentAction(b).slice(6)).toEqual(Array(6).fill(0));
    expect(currentAction(b)[2]).toBe(held);
  });

  it("brackets drive J3 and shifted brackets drive J6", () => {
    const b = buildBindings(MODES);
    keyDown(b, "[");
    keyDown(b, "}");
    expect(currentAction(b)[2]).toBeLessThan(0);
    expect(currentAction(b)[5]).toBeGreaterThan(0);
  });

  it("ignores unbound keys", () => {
    const b = buildBindings(MODES);
    expect(keyDown(b, "q")).toBe(false);
    expect(currentAction(b)).toEqual(Array(12).fill(0));
  });

  it("currentAction returns a defensive copy", () => {
    const b = buildBindings(MODES);
    const a = currentAction(b);
    a[0] = 99;
    expect(currentAction(b)[0]).toBe(0);
  });
});

describe("send retry", () => {
  it("silently retries once, then reports", () => {
    let calls = 0;
    const flakyOnce = (_: string) => {
      if (++calls === 1) throw new Error("backpressure");
    };
    expect(sendWithRetry(flakyOnce, "x")).toEqual({ ok: true });
    expect(calls).toBe(2);

    let attempts = 0;
    const dead = (_: string) => {
      attempts++;
      throw new Error("socket closed");
    };
    const res = sendWithRetry(dead, "x");
    expect(res.ok).toBe(false);
    expect(res.error).toContain("socket closed");
    expect(attempts).toBe(2);
  });
});
