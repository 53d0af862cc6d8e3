/**
 * Twelve actuator channels bound to sliders and momentary keys.  Velocity
 * channels snap back to zero when their key is released; position channels
 * keep whatever was last commanded.
 */

import { ACTION_DIM, clamp } from "./protocol.js";

export type Mode = "velocity" | "position";

export interface Channel {
  name: string;
  mode: Mode;
  value: number;
}

export interface ControlBindings {
  channels: Channel[];
  step: number;
}

export interface KeyBinding {
  indices: number[];
  sign: number;
  label: string;
}

// WASD drives the wheel bank; brackets steer the two position joints.
export const KEY_BINDINGS: Record<string, KeyBinding> = {
  w: { indices: [6, 7, 8, 9, 10, 11], sign: +1, label: "wheels forward" },
  s: { indices: [6, 7, 8, 9, 10, 11], sign: -1, label: "wheels reverse" },
  "[": { indices: [2], sign: -1, label: "J3 fold -" },
  "]": { indices: [2], sign: +1, label: "J3 fold +" },
  "{": { indices: [5], sign: -1, label: "J6 fold -" },
  "}": { indices: [5], sign: +1, label: "J6 fold +" },
};

export function buildBindings(jointModes: string[], step = 0.25): ControlBindings {
  if (jointModes.length !== 6) {
    throw new Error("need one mode per joint");
  }
  const channels: Channel[] = jointModes.map((mode, i) => {
    if (mode !== "velocity" && mode !== "position") {
      throw new Error(`unknown joint mode ${mode}`);
    }
    return { name: `J${i + 1}`, mode, value: 0 };
  });
  for (let i = 0; i < 6; i++) {
    channels.push({ name: `w${i + 1}`, mode: "velocity", value: 0 });
  }
  return { channels, step };
}

export function setSlider(b: ControlBindings, index: number, value: number): void {
  const ch = b.channels[index];
  if (!ch) throw new Error(`no channel ${index}`);
  ch.value = clamp(value);
}

export function keyDown(b: ControlBindings, key: string): boolean {
  const bind = KEY_BINDINGS[key];
  if (!bind) return false;
  for (const i of bind.indices) {
    const ch = b.channels[i]!;
    ch.value = clamp(ch.value + bind.sign * b.step);
  }
  return true;
}

export function keyUp(b: ControlBindings, key: string): boolean {
  const bind = KEY_BINDINGS[key];
  if (!bind) return false;
  for (const i of bind.indices) {
    const ch = b.channels[i]!;
    if (ch.mode === "velocity") {
      ch.value = 0;
    }
  }
  return true;
}

export function currentAction(b: ControlBindings): number[] {
  const out = b.channels.map((ch) => clamp(ch.value));
  if (out.length !== ACTION_DIM) throw new Error("channel count drifted");
  return out;
}

/** Send with one silent retry; the caller surfaces the returned error. */
export function sendWithRetry(send: (text: string) => void,
                              text: string): { ok: boolean; error?: string } {
  for (let attempt = 0; attempt < 2; attempt++) {
    try {
      send(text);
      return { ok: true };
    } catch (err) {
      if (attempt === 1) return { ok: false, error: String((err as Error).message) };
    }
  }
  return { ok: false, error: "unreachable" };
}
