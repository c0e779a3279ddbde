/**
 * Spectrum plotting helpers: map band values to canvas polylines. Pure
 * geometry so the view code just strokes the returned points.
 */

export interface Polyline {
  points: [number, number][];
  color: string;
  label: string;
}

export interface SpectrumPlot {
  lines: Polyline[];
  yMin: number;
  yMax: number;
}

/**
 * Lay out one polyline per spectrum inside a width x height box, sharing a
 * y-range across all of them so the curves are comparable.
 */
export function layoutSpectra(
  spectra: { values: number[]; color: string; label: string }[],
  width: number,
  height: number,
  pad = 8,
): SpectrumPlot {
  let yMin = Infinity;
  let yMax = -Infinity;
  for (const s of spectra) {
    for (const v of s.values) {
      if (v < yMin) yMin = v;
      if (v > yMax) yMax = v;
    }
  }
  if (yMin === Infinity) return { lines: [], yMin: 0, yMax: 1 };
  const span = yMax - yMin || 1;
  const innerW = width - 2 * pad;
  const innerH = height - 2 * pad;
  const lines = spectra.map((s) => {
    const n = s.values.length;
    const points = s.values.map((v, i): [number, number] => [
      pad + (n > 1 ? (i / (n - 1)) * innerW : innerW / 2),
      pad + (1 - (v - yMin) / span) * innerH,
    ]);
    return { points, color: s.color, label: s.label };
  });
  return { lines, yMin, yMax };
}
