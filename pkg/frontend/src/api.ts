/**
 * Typed client for the workbench service. Every number the UI shows comes
 * through here; nothing in the frontend recomputes what the service already
 * reports.
 */

export interface DatasetMeta {
  rows: number;
  cols: number;
  bands: number;
  wavelengths: number[] | null;
}

export interface Job {
  id: string;
  kind: 'run' | 'influence' | 'segment';
  state: 'queued' | 'running' | 'done' | 'failed';
  progress: number;
  result_ref: string | null;
  error: string | null;
}

export interface Endmembers {
  bands: number;
  m: number;
  target: number[];
  background: number[][];
  iterations: number;
  converged: boolean;
}

export interface InfluenceRecord {
  unit_id: number;
  exact: number | null;
  pt: number;
  re: number;
  metrics: Record<string, number> | null;
}

export interface InfluenceResult {
  method: 'pt' | 're' | 'exact';
  granularity: 'pixel' | 'superpixel';
  top_k: number;
  ranking: number[];
  records: InfluenceRecord[];
}

export interface RunComparison {
  influence: number;
  angle_deg: number;
}

export interface BagsDocument {
  bags: { id: string; label: 0 | 1; pixels: number[] }[];
}

export interface RunConfig {
  m_init: number;
  seed: number;
  max_iters?: number;
  rel_tol?: number;
  beta?: number;
  lambda_sparse?: number;
  lambda_mean?: number;
}

/** Service error with the validation report the service attaches. */
export class ApiError extends Error {
  status: number;
  violations: string[];

  constructor(status: number, message: string, violations: string[] = []) {
    super(message);
    this.status = status;
    this.violations = violations;
  }
}

async function raiseFor(res: Response): Promise<never> {
  let message = `${res.status} ${res.statusText}`;
  let violations: string[] = [];
  try {
    const body = await res.json();
    const detail = body.detail ?? body;
    if (typeof detail === 'string') {
      message = detail;
    } else if (detail && typeof detail === 'object') {
      message = detail.message ?? message;
      violations = detail.violations ?? [];
    }
  } catch {
    // non-JSON body: keep the status line
  }
  throw new ApiError(res.status, message, violations);
}

export class WorkbenchClient {
  constructor(readonly baseUrl: string) {}

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await fetch(this.baseUrl + path, init);
    if (!res.ok) await raiseFor(res);
    return (await res.json()) as T;
  }

  private async bytes(path: string): Promise<Uint8Array> {
    const res = await fetch(this.baseUrl + path);
    if (!res.ok) await raiseFor(res);
    return new Uint8Array(await res.arrayBuffer());
  }

  uploadDataset(cubeBytes: Uint8Array): Promise<{ dataset_id: string }> {
    return this.json('/datasets', {
      method: 'POST',
      headers: { 'content-type': 'application/octet-stream' },
      body: cubeBytes as BodyInit,
    });
  }

  datasetMeta(datasetId: string): Promise<DatasetMeta> {
    return this.json(`/datasets/${datasetId}/meta`);
  }

  quicklookUrl(datasetId: string, bands?: [number, number, number]): string {
    const query = bands ? `?bands=${bands.join(',')}` : '';
    return `${this.baseUrl}/datasets/${datasetId}/quicklook${query}`;
  }

  async putBags(datasetId: string, maskBytes: Uint8Array): Promise<void> {
    const res = await fetch(`${this.baseUrl}/datasets/${datasetId}/bags`, {
      method: 'PUT',
      headers: { 'content-type': 'application/octet-stream' },
      body: maskBytes as BodyInit,
    });
    if (!res.ok) await raiseFor(res);
  }

  getBags(datasetId: string): Promise<BagsDocument> {
    return this.json(`/datasets/${datasetId}/bags`);
  }

  getSegments(datasetId: string): Promise<Uint8Array> {
    return this.bytes(`/datasets/${datasetId}/segments`);
  }

  startRun(datasetId: string, config: RunConfig): Promise<{ job_id: string }> {
    return this.json(`/datasets/${datasetId}/runs`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify(config),
    });
  }

  startSuperpixels(datasetId: string, targetSegments: number): Promise<{ job_id: string }> {
    return this.json(`/datasets/${datasetId}/superpixels`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify({ target_segments: targetSegments }),
    });
  }

  startInfluence(
    runId: string,
    method: 'pt' | 're' | 'exact',
    granularity: 'pixel' | 'superpixel',
    topK?: number,
  ): Promise<{ job_id: string }> {
    const body: Record<string, unknown> = { method, granularity };
    if (topK !== undefined) body.top_k = topK;
    return this.json(`/runs/${runId}/influence`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify(body),
    });
  }

  job(jobId: string): Promise<Job> {
    return this.json(`/jobs/${jobId}`);
  }

  influenceResult(jobId: string): Promise<InfluenceResult> {
    return this.json(`/jobs/${jobId}/result`);
  }

  heatmap(jobId: string): Promise<Uint8Array> {
    return this.bytes(`/jobs/${jobId}/heatmap`);
  }

  endmembers(runId: string): Promise<Endmembers> {
    return this.json(`/runs/${runId}/endmembers`);
  }

  targetMap(runId: string): Promise<Uint8Array> {
    return this.bytes(`/runs/${runId}/target-map`);
  }

  compareRuns(runId: string, otherId: string): Promise<RunComparison> {
    return this.json(`/runs/${runId}/compare/${otherId}`);
  }

  health(): Promise<{ status: string; version: string }> {
    return this.json('/health');
  }
}
