// Typed client for the /v1 API.  The transport is injectable so tests can
// run against an in-memory server; the browser uses HttpTransport (fetch).

import type {
  Aggregates,
  AssessmentVerdict,
  ConceptLabel,
  JobPayload,
  Judgment,
  PatchGrid,
  PrototypeList,
  SessionSnapshot,
  SplitResultPayload,
} from "./types";

export class ApiError extends Error {
  constructor(public status: number, public detail: string) {
    super(`${status}: ${detail}`);
  }
}

export interface Transport {
  request(method: string, path: string, body?: unknown): Promise<unknown>;
}

export class HttpTransport implements Transport {
  constructor(private baseUrl: string) {}

  async request(method: string, path: string, body?: unknown): Promise<unknown> {
    const resp = await fetch(this.baseUrl + path, {
      method,
      headers: body === undefined ? undefined : { "Content-Type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const payload = await resp.json().catch(() => ({}));
    if (!resp.ok) {
      const detail =
        typeof payload === "object" && payload !== null && "detail" in payload
          ? String((payload as { detail: unknown }).detail)
          : resp.statusText;
      throw new ApiError(resp.status, detail);
    }
    return payload;
  }
}

export class ApiClient {
  constructor(private transport: Transport) {}

  listPrototypes(): Promise<PrototypeList> {
    return this.transport.request("GET", "/v1/prototypes?limit=500") as Promise<PrototypeList>;
  }

  getPatches(prototypeId: number, k = 10): Promise<PatchGrid> {
    return this.transport.request(
      "GET",
      `/v1/prototypes/${prototypeId}/patches?k=${k}`,
    ) as Promise<PatchGrid>;
  }

  submitJudgment(prototypeId: number, sessionId: string, verdict: Judgment): Promise<unknown> {
    return this.transport.request("POST", `/v1/prototypes/${prototypeId}/judgment`, {
      session_id: sessionId,
      verdict,
    });
  }

  recordLabel(
    prototypeId: number,
    sessionId: string,
    patch: number,
    label: ConceptLabel,
  ): Promise<unknown> {
    return this.transport.request("POST", `/v1/prototypes/${prototypeId}/label`, {
      session_id: sessionId,
      patch,
      label,
    });
  }

  submitLabels(
    prototypeId: number,
    sessionId: string,
    labels: Record<number, ConceptLabel>,
  ): Promise<unknown> {
    return this.transport.request("POST", `/v1/prototypes/${prototypeId}/labels`, {
      session_id: sessionId,
      labels,
    });
  }

  startSplit(prototypeId: number, sessionId: string, auto = false): Promise<{ job_id: string }> {
    return this.transport.request("POST", `/v1/prototypes/${prototypeId}/split`, {
      session_id: sessionId,
      auto,
    }) as Promise<{ job_id: string }>;
  }

  getJob(jobId: string): Promise<JobPayload> {
    return this.transport.request("GET", `/v1/jobs/${jobId}`) as Promise<JobPayload>;
  }

  getSplitResult(prototypeId: number, k = 10): Promise<SplitResultPayload> {
    return this.transport.request(
      "GET",
      `/v1/prototypes/${prototypeId}/split_result?k=${k}`,
    ) as Promise<SplitResultPayload>;
  }

  submitAssessment(
    prototypeId: number,
    sessionId: string,
    channelA: AssessmentVerdict,
    channelB: AssessmentVerdict,
  ): Promise<unknown> {
    return this.transport.request("POST", `/v1/prototypes/${prototypeId}/assessment`, {
      session_id: sessionId,
      channel_a: channelA,
      channel_b: channelB,
    });
  }

  getAggregates(): Promise<Aggregates> {
    return this.transport.request("GET", "/v1/aggregates") as Promise<Aggregates>;
  }

  getSession(sessionId: string): Promise<SessionSnapshot> {
    return this.transport.request("GET", `/v1/session/${sessionId}`) as Promise<SessionSnapshot>;
  }
}
