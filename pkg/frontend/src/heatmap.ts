/**
 * Influence heatmap rendering: per-view min/max stretch onto a fixed color
 * ramp, with an optional log scale. The values themselves come from the
 * service; this module only turns them into RGBA pixels.
 */

export interface HeatmapOptions {
  /** stretch log10(value) instead of value; non-positive values stay transparent */
  log?: boolean;
  /** overlay opacity for nonzero cells, 0..255 */
  alpha?: number;
}

/** Blue -> cyan -> yellow -> red, the usual influence ramp. */
const RAMP: [number, number, number][] = [
  [13, 8, 135],
  [126, 3, 168],
  [204, 71, 120],
  [248, 149, 64],
  [240, 249, 33],
];

export function rampColor(t: number): [number, number, number] {
  const x = Math.min(Math.max(t, 0), 1) * (RAMP.length - 1);
  const i = Math.min(Math.floor(x), RAMP.length - 2);
  const f = x - i;
  const [r0, g0, b0] = RAMP[i];
  const [r1, g1, b1] = RAMP[i + 1];
  return [
    Math.round(r0 + (r1 - r0) * f),
    Math.round(g0 + (g1 - g0) * f),
    Math.round(b0 + (b1 - b0) * f),
  ];
}

/**
 * Map values onto RGBA bytes, one pixel per value. Cells with no signal
 * (zero, or non-positive under the log scale) are fully transparent, so an
 * all-zero map renders as a uniform transparent layer. A constant nonzero
 * map has no spread to stretch and renders at the top of the ramp.
 */
export function renderHeatmap(
  values: ArrayLike<number>,
  options: HeatmapOptions = {},
): Uint8ClampedArray<ArrayBuffer> {
  const alpha = options.alpha ?? 170;
  const n = values.length;
  const out = new Uint8ClampedArray(n * 4);
  const scaled = new Float64Array(n);
  let lo = Infinity;
  let hi = -Infinity;
  for (let i = 0; i < n; i++) {
    const v = values[i];
    if (options.log) {
      scaled[i] = v > 0 ? Math.log10(v) : NaN;
    } else {
      scaled[i] = v !== 0 ? v : NaN;
    }
    if (!Number.isNaN(scaled[i])) {
      if (scaled[i] < lo) lo = scaled[i];
      if (scaled[i] > hi) hi = scaled[i];
    }
  }
  if (lo === Infinity) return out; // nothing to show
  const span = hi - lo;
  for (let i = 0; i < n; i++) {
    if (Number.isNaN(scaled[i])) continue;
    const t = span > 0 ? (scaled[i] - lo) / span : 1;
    const [r, g, b] = rampColor(t);
    out[i * 4] = r;
    out[i * 4 + 1] = g;
    out[i * 4 + 2] = b;
    out[i * 4 + 3] = alpha;
  }
  return out;
}

/** Distinct translucent fills for bag codes on the label canvas. */
export function maskColor(code: number): [number, number, number, number] {
  if (code === 0) return [0, 0, 0, 0];
  if (code === 1) return [40, 90, 220, 110]; // negatives: blue wash
  const hue = ((code - 2) * 67) % 360; // positives: rotating hues
  const [r, g, b] = hueToRgb(hue);
  return [r, g, b, 150];
}

function hueToRgb(hue: number): [number, number, number] {
  const h = (((hue % 360) + 360) % 360) / 60;
  const x = Math.round(255 * (1 - Math.abs((h % 2) - 1)));
  if (h < 1) return [255, x, 0];
  if (h < 2) return [x, 255, 0];
  if (h < 3) return [0, 255, x];
  if (h < 4) return [0, x, 255];
  if (h < 5) return [x, 0, 255];
  return [255, 0, x];
}

/** Paint mask codes into RGBA bytes for the overlay canvas. */
export function renderMask(codes: ArrayLike<number>): Uint8ClampedArray<ArrayBuffer> {
  const out = new Uint8ClampedArray(codes.length * 4);
  for (let i = 0; i < codes.length; i++) {
    const [r, g, b, a] = maskColor(codes[i]);
    out[i * 4] = r;
    out[i * 4 + 1] = g;
    out[i * 4 + 2] = b;
    out[i * 4 + 3] = a;
  }
  return out;
}
