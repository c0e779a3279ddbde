/**
 * Poll a job until it settles. Resolves with the final record when the job
 * is done, rejects with the job's error when it fails or the deadline
 * passes. Progress callbacks fire on every observation.
 */

import type { Job, WorkbenchClient } from './api';

export interface PollOptions {
  intervalMs?: number;
  timeoutMs?: number;
  onProgress?: (job: Job) => void;
}

export async function pollJob(
  client: WorkbenchClient,
  jobId: string,
  options: PollOptions = {},
): Promise<Job> {
  const interval = options.intervalMs ?? 250;
  const deadline = Date.now() + (options.timeoutMs ?? 120_000);
  for (;;) {
    const job = await client.job(jobId);
    options.onProgress?.(job);
    if (job.state === 'done') return job;
    if (job.state === 'failed') {
      throw new Error(job.error ?? `job ${jobId} failed`);
    }
    if (Date.now() >= deadline) {
      throw new Error(`job ${jobId} still ${job.state} at the deadline`);
    }
    await new Promise((resolve) => setTimeout(resolve, interval));
  }
}
