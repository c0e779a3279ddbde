/**
 * Page wiring: hooks the toolbar, canvas stack, sidebar, and toast area up
 * to the Workbench controller. Painting happens on a mask canvas scaled to
 * the scene grid; zoom and pan are a CSS transform on the whole stack.
 */

import { WorkbenchClient } from './api';
import type { RunConfig } from './api';
import { Workbench } from './workbench';
import { layoutSpectra } from './plot';
import { renderHeatmap, renderMask } from './heatmap';
import type { LabelKind, Tool } from './mask';

const SERVICE_URL = import.meta.env.VITE_SERVICE_URL ?? 'http://127.0.0.1:8000';
const RUN_CONFIG: RunConfig = { m_init: 3, seed: 0, max_iters: 200 };
const SUPERPIXEL_TARGET = 150;

const client = new WorkbenchClient(SERVICE_URL);
const bench = new Workbench(client);

const $ = <T extends HTMLElement>(id: string) => document.getElementById(id) as T;

const quicklook = $<HTMLImageElement>('quicklook');
const maskCanvas = $<HTMLCanvasElement>('mask-canvas');
const heatCanvas = $<HTMLCanvasElement>('heat-canvas');
const stack = $<HTMLDivElement>('canvas-stack');
const stage = $<HTMLDivElement>('stage');
const rankingList = $<HTMLOListElement>('ranking');
const spectrum = $<HTMLCanvasElement>('spectrum');
const influenceReadout = $<HTMLDivElement>('influence-readout');
const hoverReadout = $<HTMLDivElement>('hover-readout');
const staleWarning = $<HTMLDivElement>('stale-warning');
const jobProgress = $<HTMLProgressElement>('job-progress');
const toastArea = $<HTMLDivElement>('toasts');

let tool: Tool = 'brush';
let label: LabelKind = 'positive';
let shownToasts = 0;

// ---- view state --------------------------------------------------------

const view = { scale: 8, x: 0, y: 0 };

function applyTransform(): void {
  stack.style.transform = `translate(${view.x}px, ${view.y}px) scale(${view.scale})`;
}

function drainToasts(): void {
  while (shownToasts < bench.toasts.length) {
    const div = document.createElement('div');
    div.className = 'toast';
    div.textContent = bench.toasts[shownToasts++];
    toastArea.appendChild(div);
    setTimeout(() => div.remove(), 6000);
  }
}

function redrawMask(): void {
  if (!bench.mask) return;
  const ctx = maskCanvas.getContext('2d')!;
  const rgba = renderMask(bench.mask.snapshot());
  ctx.putImageData(new ImageData(rgba, bench.mask.cols, bench.mask.rows), 0, 0);
}

function redrawHeatmap(): void {
  const ctx = heatCanvas.getContext('2d')!;
  ctx.clearRect(0, 0, heatCanvas.width, heatCanvas.height);
  if (!bench.overlay || !bench.cube) return;
  const logScale = $<HTMLInputElement>('log-scale').checked;
  const rgba = renderHeatmap(bench.overlay.values, { log: logScale });
  ctx.putImageData(new ImageData(rgba, bench.cube.cols, bench.cube.rows), 0, 0);
}

function redrawSidebar(): void {
  rankingList.textContent = '';
  if (!bench.overlay) return;
  for (const unit of bench.overlay.ranking) {
    const item = document.createElement('li');
    const score = unit.exact ?? unit.pt;
    item.textContent = `unit ${unit.unitId} - ${score.toExponential(3)}`;
    const flip = document.createElement('button');
    flip.textContent = 'flip';
    flip.addEventListener('click', (ev) => {
      ev.stopPropagation();
      if (bench.flipUnit(unit.unitId)) redrawMask();
      drainToasts();
    });
    item.appendChild(flip);
    item.addEventListener('click', () => zoomToUnit(unit.unitId));
    rankingList.appendChild(item);
  }
}

function zoomToUnit(unitId: number): void {
  if (!bench.cube) return;
  let pixels: number[];
  try {
    pixels = bench.unitPixels(unitId);
  } catch {
    return;
  }
  if (pixels.length === 0) return;
  const cols = bench.cube.cols;
  let rowSum = 0;
  let colSum = 0;
  for (const p of pixels) {
    rowSum += Math.floor(p / cols);
    colSum += p % cols;
  }
  const row = rowSum / pixels.length;
  const col = colSum / pixels.length;
  view.scale = Math.max(view.scale, 16);
  view.x = stage.clientWidth / 2 - col * view.scale;
  view.y = stage.clientHeight / 2 - row * view.scale;
  applyTransform();
}

function redrawSpectra(): void {
  const ctx = spectrum.getContext('2d')!;
  ctx.clearRect(0, 0, spectrum.width, spectrum.height);
  const spectra = [];
  if (bench.baseline) {
    spectra.push({
      values: bench.baseline.endmembers.target,
      color: '#5aa9e6',
      label: 'baseline',
    });
  }
  if (bench.rerun) {
    spectra.push({ values: bench.rerun.endmembers.target, color: '#f08a4b', label: 'rerun' });
  }
  const plot = layoutSpectra(spectra, spectrum.width, spectrum.height);
  for (const line of plot.lines) {
    ctx.strokeStyle = line.color;
    ctx.lineWidth = 1.5;
    ctx.beginPath();
    line.points.forEach(([x, y], i) => (i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y)));
    ctx.stroke();
  }
  influenceReadout.textContent =
    bench.displayedInfluence() === null
      ? ''
      : `influence I = ${bench.displayedInfluence()} (${bench.comparison!.angleDeg.toFixed(2)} deg)`;
}

function refreshStale(): void {
  staleWarning.hidden = !bench.runIsStale();
}

// ---- painting ----------------------------------------------------------

function canvasPixel(ev: MouseEvent): { row: number; col: number } | null {
  if (!bench.cube) return null;
  const rect = maskCanvas.getBoundingClientRect();
  const col = Math.floor(((ev.clientX - rect.left) / rect.width) * bench.cube.cols);
  const row = Math.floor(((ev.clientY - rect.top) / rect.height) * bench.cube.rows);
  if (row < 0 || row >= bench.cube.rows || col < 0 || col >= bench.cube.cols) return null;
  return { row, col };
}

let painting = false;
let rectAnchor: { row: number; col: number } | null = null;

maskCanvas.addEventListener('mousedown', (ev) => {
  if (ev.button !== 0 || !bench.mask) return;
  const at = canvasPixel(ev);
  if (!at) return;
  bench.mask.beginStroke(label);
  painting = true;
  if (tool === 'brush') {
    bench.mask.paintBrush(at.row, at.col, Number($<HTMLInputElement>('brush-size').value) - 1);
    redrawMask();
  } else {
    rectAnchor = at;
  }
});

maskCanvas.addEventListener('mousemove', (ev) => {
  const at = canvasPixel(ev);
  if (at && bench.cube) {
    const parts = [`pixel (${at.row}, ${at.col})`];
    if (bench.overlay) {
      const raw = bench.overlay.values[at.row * bench.cube.cols + at.col];
      parts.push(`influence ${raw.toExponential(6)}`);
    }
    hoverReadout.textContent = parts.join('  |  ');
  }
  if (!painting || !bench.mask || !at) return;
  if (tool === 'brush') {
    bench.mask.paintBrush(at.row, at.col, Number($<HTMLInputElement>('brush-size').value) - 1);
    redrawMask();
  }
});

window.addEventListener('mouseup', (ev) => {
  if (!painting || !bench.mask) return;
  painting = false;
  if (tool === 'rect' && rectAnchor) {
    const at = canvasPixel(ev);
    if (at) {
      bench.mask.paintRect(rectAnchor.row, rectAnchor.col, at.row, at.col);
      redrawMask();
    }
    rectAnchor = null;
  }
  bench.mask.endStroke();
  refreshStale();
});

// ---- zoom / pan --------------------------------------------------------

stage.addEventListener('wheel', (ev) => {
  ev.preventDefault();
  const factor = ev.deltaY < 0 ? 1.2 : 1 / 1.2;
  const next = Math.min(Math.max(view.scale * factor, 1), 64);
  const rect = stage.getBoundingClientRect();
  const px = ev.clientX - rect.left;
  const py = ev.clientY - rect.top;
  view.x = px - ((px - view.x) * next) / view.scale;
  view.y = py - ((py - view.y) * next) / view.scale;
  view.scale = next;
  applyTransform();
});

let panning: { x: number; y: number } | null = null;

stage.addEventListener('mousedown', (ev) => {
  if (ev.button === 1 || (ev.button === 0 && ev.shiftKey)) {
    panning = { x: ev.clientX - view.x, y: ev.clientY - view.y };
    ev.preventDefault();
  }
});

window.addEventListener('mousemove', (ev) => {
  if (!panning) return;
  view.x = ev.clientX - panning.x;
  view.y = ev.clientY - panning.y;
  applyTransform();
});

window.addEventListener('mouseup', () => {
  panning = null;
});

// ---- toolbar -----------------------------------------------------------

function pickButton(group: string, id: string): void {
  document.querySelectorAll(`#toolbar .${group}`).forEach((b) => b.classList.remove('active'));
  $(id).classList.add('active');
}

$('tool-brush').addEventListener('click', () => {
  tool = 'brush';
  pickButton('tool', 'tool-brush');
});
$('tool-rect').addEventListener('click', () => {
  tool = 'rect';
  pickButton('tool', 'tool-rect');
});
$('label-positive').addEventListener('click', () => {
  label = 'positive';
  pickButton('label', 'label-positive');
});
$('label-negative').addEventListener('click', () => {
  label = 'negative';
  pickButton('label', 'label-negative');
});
$('label-erase').addEventListener('click', () => {
  label = 'erase';
  pickButton('label', 'label-erase');
});

$('undo').addEventListener('click', () => {
  if (bench.mask?.undo()) {
    redrawMask();
    refreshStale();
  }
});

$<HTMLInputElement>('cube-file').addEventListener('change', async (ev) => {
  const file = (ev.target as HTMLInputElement).files?.[0];
  if (!file) return;
  const bytes = new Uint8Array(await file.arrayBuffer());
  const id = await bench.loadCube(bytes);
  drainToasts();
  if (!id || !bench.cube) return;
  // region-level review scales far better on large scenes
  $<HTMLInputElement>('use-superpixels').checked = bench.cube.rows * bench.cube.cols > 100_000;
  maskCanvas.width = heatCanvas.width = bench.cube.cols;
  maskCanvas.height = heatCanvas.height = bench.cube.rows;
  quicklook.src = bench.quicklookUrl()!;
  quicklook.width = bench.cube.cols;
  quicklook.height = bench.cube.rows;
  view.scale = Math.max(1, Math.floor(Math.min(
    stage.clientWidth / bench.cube.cols,
    stage.clientHeight / bench.cube.rows,
  )));
  view.x = view.y = 0;
  applyTransform();
  redrawMask();
  redrawHeatmap();
  redrawSidebar();
  redrawSpectra();
});

async function withProgress<T>(work: () => Promise<T>): Promise<T> {
  jobProgress.hidden = false;
  const ticker = setInterval(() => {
    jobProgress.value = bench.jobProgress;
  }, 100);
  try {
    return await work();
  } finally {
    clearInterval(ticker);
    jobProgress.hidden = true;
    drainToasts();
  }
}

$('save-bags').addEventListener('click', async () => {
  await bench.saveBags();
  refreshStale();
  drainToasts();
});

$('reload-bags').addEventListener('click', async () => {
  if (await bench.reloadBags()) redrawMask();
  drainToasts();
});

$('run').addEventListener('click', () =>
  withProgress(async () => {
    await bench.launchRun(RUN_CONFIG);
    refreshStale();
    redrawSpectra();
  }),
);

$('influence').addEventListener('click', () =>
  withProgress(async () => {
    const method = $<HTMLSelectElement>('influence-method').value as 'pt' | 're' | 'exact';
    const granularity = $<HTMLInputElement>('use-superpixels').checked ? 'superpixel' : 'pixel';
    if (granularity === 'superpixel' && !bench.segments) {
      if (!(await bench.computeSegments(SUPERPIXEL_TARGET))) return;
    }
    await bench.fetchOverlay(method, granularity);
    redrawHeatmap();
    redrawSidebar();
  }),
);

$<HTMLInputElement>('log-scale').addEventListener('change', redrawHeatmap);

// ---- boot --------------------------------------------------------------

client
  .health()
  .then((h) => {
    $('service-status').textContent = `service ${h.version} at ${SERVICE_URL}`;
  })
  .catch(() => {
    $('service-status').textContent = `no service at ${SERVICE_URL}`;
  });
