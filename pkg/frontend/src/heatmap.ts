/**
 * Depth fan rendering: 16x16 meters-valued image to RGBA pixels on a
 * perceptually uniform ramp (viridis), normalized by the sensor horizon.
 */

export const VIRIDIS: ReadonlyArray<readonly [number, number, number]> = [
  [68, 1, 84], [72, 26, 108], [71, 47, 125], [65, 68, 135],
  [57, 86, 140], [49, 104, 142], [42, 120, 142], [35, 136, 142],
  [31, 152, 139], [34, 168, 132], [53, 183, 121], [84, 197, 104],
  [122, 209, 81], [165, 219, 54], [210, 226, 27], [253, 231, 37],
];

/** Ramp color at t in [0,1] (clamped), linearly interpolated. */
export function colorAt(t: number): [number, number, number] {
  const x = Math.min(1, Math.max(0, t)) * (VIRIDIS.length - 1);
  const lo = Math.floor(x);
  const hi = Math.min(lo + 1, VIRIDIS.length - 1);
  const f = x - lo;
  const a = VIRIDIS[lo]!;
  const b = VIRIDIS[hi]!;
  return [
    Math.round(a[0] + f * (b[0] - a[0])),
    Math.round(a[1] + f * (b[1] - a[1])),
    Math.round(a[2] + f * (b[2] - a[2])),
  ];
}

export function depthToRGBA(depth: ArrayLike<number>, hMax: number): Uint8ClampedArray {
  const out = new Uint8ClampedArray(depth.length * 4);
  for (let i = 0; i < depth.length; i++) {
    const [r, g, b] = colorAt(Number(depth[i]) / hMax);
    out[i * 4] = r;
    out[i * 4 + 1] = g;
    out[i * 4 + 2] = b;
    out[i * 4 + 3] = 255;
  }
  return out;
}
