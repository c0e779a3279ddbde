/**
 * The analyst loop behind the page: load a scene, paint bags, fit, rank
 * units by influence, flip the suspicious ones, refit, and read off how far
 * the target signature moved. All numbers displayed by the view layer live
 * on this controller and every one of them was fetched from the service.
 */

import { ApiError, WorkbenchClient } from './api';
import type { Endmembers, InfluenceRecord, Job, RunConfig } from './api';
import { decodeCube, decodePlane, decodeSegments, encodeMask } from './container';
import type { Cube } from './container';
import { MaskModel, codesFromBags } from './mask';
import { pollJob } from './jobs';

export interface RankedUnit {
  unitId: number;
  exact: number | null;
  pt: number;
  re: number;
  metrics: Record<string, number> | null;
}

export interface OverlayState {
  method: 'pt' | 're' | 'exact';
  granularity: 'pixel' | 'superpixel';
  /** per-pixel heatmap values straight from the service */
  values: Float64Array;
  ranking: RankedUnit[];
  /** bag revision the overlay was computed against */
  bagsRevision: number;
}

export interface RunState {
  runId: string;
  endmembers: Endmembers;
  /** bag revision the run was fitted against */
  bagsRevision: number;
}

export interface ComparisonState {
  baselineRunId: string;
  rerunRunId: string;
  /** influence_norm between the two target signatures, service-computed */
  influence: number;
  angleDeg: number;
}

export class Workbench {
  readonly client: WorkbenchClient;
  datasetId: string | null = null;
  cube: Cube | null = null;
  mask: MaskModel | null = null;
  /** bumped on every successful bag save; 0 = never saved */
  bagsRevision = 0;
  baseline: RunState | null = null;
  rerun: RunState | null = null;
  overlay: OverlayState | null = null;
  comparison: ComparisonState | null = null;
  segments: Uint32Array | null = null;
  toasts: string[] = [];
  jobProgress = 0;

  constructor(client: WorkbenchClient) {
    this.client = client;
  }

  toast(message: string): void {
    this.toasts.push(message);
  }

  private async guarded<T>(work: () => Promise<T>): Promise<T | null> {
    try {
      return await work();
    } catch (err) {
      if (err instanceof ApiError && err.violations.length > 0) {
        this.toast(`${err.message}: ${err.violations.join('; ')}`);
      } else {
        this.toast(err instanceof Error ? err.message : String(err));
      }
      return null;
    }
  }

  /** Upload a scene and start from a blank labeling. */
  async loadCube(bytes: Uint8Array): Promise<string | null> {
    return this.guarded(async () => {
      const { dataset_id } = await this.client.uploadDataset(bytes);
      this.datasetId = dataset_id;
      this.cube = decodeCube(bytes);
      this.mask = new MaskModel(this.cube.rows, this.cube.cols);
      this.bagsRevision = 0;
      this.baseline = null;
      this.rerun = null;
      this.overlay = null;
      this.comparison = null;
      this.segments = null;
      return dataset_id;
    });
  }

  quicklookUrl(): string | null {
    return this.datasetId ? this.client.quicklookUrl(this.datasetId) : null;
  }

  /** Push the painted mask to the service; local edits become the bag set. */
  async saveBags(): Promise<boolean> {
    if (!this.datasetId || !this.mask) {
      this.toast('load a scene first');
      return false;
    }
    const problem = this.mask.validate();
    if (problem !== null) {
      this.toast(problem);
      return false;
    }
    const ok = await this.guarded(async () => {
      await this.client.putBags(this.datasetId!, encodeMask(this.mask!.toMask()));
      return true;
    });
    if (ok) this.bagsRevision += 1;
    return ok === true;
  }

  /** Re-read the saved bag set and rebuild the canvas codes from it. */
  async reloadBags(): Promise<boolean> {
    if (!this.datasetId || !this.mask) {
      this.toast('load a scene first');
      return false;
    }
    const ok = await this.guarded(async () => {
      const doc = await this.client.getBags(this.datasetId!);
      this.mask!.loadCodes(codesFromBags(doc, this.mask!.rows, this.mask!.cols));
      return true;
    });
    return ok === true;
  }

  /** True when the displayed run no longer matches the saved labels. */
  runIsStale(): boolean {
    const current = this.rerun ?? this.baseline;
    return current !== null && current.bagsRevision !== this.bagsRevision;
  }

  /**
   * Fit the estimator on the saved labels. The first completed run becomes
   * the baseline; later ones land in the rerun slot and are diffed against
   * the baseline via the service's comparison endpoint.
   */
  async launchRun(config: RunConfig): Promise<RunState | null> {
    if (!this.datasetId || !this.mask) {
      this.toast('load a scene first');
      return null;
    }
    const problem = this.mask.validate();
    if (problem !== null) {
      this.toast(problem);
      return null;
    }
    if (this.bagsRevision === 0) {
      this.toast('save the labels before running');
      return null;
    }
    const revision = this.bagsRevision;
    return this.guarded(async () => {
      const { job_id } = await this.client.startRun(this.datasetId!, config);
      const job = await this.waitFor(job_id);
      const runId = refToRunId(job);
      const endmembers = await this.client.endmembers(runId);
      const state: RunState = { runId, endmembers, bagsRevision: revision };
      if (this.baseline === null) {
        this.baseline = state;
      } else {
        this.rerun = state;
        const diff = await this.client.compareRuns(this.baseline.runId, runId);
        this.comparison = {
          baselineRunId: this.baseline.runId,
          rerunRunId: runId,
          influence: diff.influence,
          angleDeg: diff.angle_deg,
        };
      }
      return state;
    });
  }

  /** The influence figure shown next to the spectrum diff, as displayed. */
  displayedInfluence(): string | null {
    return this.comparison === null ? null : this.comparison.influence.toFixed(6);
  }

  /** Compute and fetch an influence overlay for the current baseline run. */
  async fetchOverlay(
    method: 'pt' | 're' | 'exact',
    granularity: 'pixel' | 'superpixel',
    topK?: number,
  ): Promise<OverlayState | null> {
    const run = this.rerun ?? this.baseline;
    if (!run) {
      this.toast('run the estimator first');
      return null;
    }
    return this.guarded(async () => {
      const { job_id } = await this.client.startInfluence(run.runId, method, granularity, topK);
      await this.waitFor(job_id);
      const result = await this.client.influenceResult(job_id);
      const heat = decodePlane(await this.client.heatmap(job_id));
      const overlay: OverlayState = {
        method,
        granularity,
        values: heat.values,
        ranking: result.records.map((r: InfluenceRecord) => ({
          unitId: r.unit_id,
          exact: r.exact,
          pt: r.pt,
          re: r.re,
          metrics: r.metrics,
        })),
        bagsRevision: run.bagsRevision,
      };
      this.overlay = overlay;
      return overlay;
    });
  }

  /** Segment the scene, then cache the per-pixel segment ids for flips. */
  async computeSegments(targetSegments: number): Promise<boolean> {
    if (!this.datasetId) {
      this.toast('load a scene first');
      return false;
    }
    const ok = await this.guarded(async () => {
      const { job_id } = await this.client.startSuperpixels(this.datasetId!, targetSegments);
      await this.waitFor(job_id);
      this.segments = decodeSegments(await this.client.getSegments(this.datasetId!)).segments;
      return true;
    });
    return ok === true;
  }

  /** Pixel list behind one ranked unit at the overlay's granularity. */
  unitPixels(unitId: number): number[] {
    if (this.overlay?.granularity === 'superpixel') {
      if (!this.segments) throw new Error('segment map not loaded');
      const pixels: number[] = [];
      for (let i = 0; i < this.segments.length; i++) {
        if (this.segments[i] === unitId) pixels.push(i);
      }
      return pixels;
    }
    return [unitId];
  }

  /** One-click label flip of a ranked unit. */
  flipUnit(unitId: number): boolean {
    if (!this.mask) {
      this.toast('load a scene first');
      return false;
    }
    let pixels: number[];
    try {
      pixels = this.unitPixels(unitId);
    } catch (err) {
      this.toast(err instanceof Error ? err.message : String(err));
      return false;
    }
    this.mask.flipLabel(pixels);
    return true;
  }

  private async waitFor(jobId: string): Promise<Job> {
    this.jobProgress = 0;
    try {
      return await pollJob(this.client, jobId, {
        onProgress: (job) => {
          this.jobProgress = job.progress;
        },
      });
    } finally {
      this.jobProgress = 1;
    }
  }
}

function refToRunId(job: Job): string {
  if (!job.result_ref || !job.result_ref.startsWith('runs/')) {
    throw new Error(`job ${job.id} did not produce a run`);
  }
  return job.result_ref.slice('runs/'.length);
}
