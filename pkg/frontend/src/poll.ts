import type { ApiClient } from "./api";
import { ApiError } from "./api";
import type { JobPayload, SplitResultPayload } from "./types";

const sleep = (ms: number) => new Promise((resolve) => setTimeout(resolve, ms));

/** Poll a job until it reaches a terminal state; reports progress on the way. */
export async function pollJob(
  api: ApiClient,
  jobId: string,
  onProgress?: (job: JobPayload) => void,
  intervalMs = 250,
  timeoutMs = 300_000,
): Promise<JobPayload> {
  const deadline = Date.now() + timeoutMs;
  for (;;) {
    const job = await api.getJob(jobId);
    onProgress?.(job);
    if (job.status === "done") return job;
    if (job.status === "failed") throw new Error(job.error ?? "split job failed");
    if (Date.now() > deadline) throw new Error(`job ${jobId} timed out`);
    await sleep(intervalMs);
  }
}

/** Poll for a split result directly; used on resume when the job id was
 * lost to a reload but the log says a split was started. */
export async function pollSplitResult(
  api: ApiClient,
  prototypeId: number,
  intervalMs = 250,
  timeoutMs = 300_000,
): Promise<SplitResultPayload> {
  const deadline = Date.now() + timeoutMs;
  for (;;) {
    try {
      return await api.getSplitResult(prototypeId);
    } catch (err) {
      if (!(err instanceof ApiError) || err.status !== 404) throw err;
      if (Date.now() > deadline) throw new Error(`split result for ${prototypeId} timed out`);
      await sleep(intervalMs);
    }
  }
}
