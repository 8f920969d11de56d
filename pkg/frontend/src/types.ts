// Payload shapes of the versioned HTTP+JSON API (see /v1 endpoints).

export type ConceptLabel = "A" | "B" | "SomethingElse";
export type Judgment = "consistent" | "inconsistent";
export type AssessmentVerdict = "more" | "less";

export interface PrototypeSummary {
  prototype_id: number;
  flagged: boolean;
  dissimilarity: number;
  split_status: "none" | "queued" | "running" | "done" | "failed";
}

export interface PrototypeList {
  total: number;
  delta_star: number;
  prototypes: PrototypeSummary[];
}

export interface PatchPayload {
  patch_id: number;
  image_id: string;
  location: [number, number];
  thumbnail_url: string;
  activation: number;
}

export interface PatchGrid {
  prototype_id: number;
  patches: PatchPayload[];
}

export interface JobPayload {
  id: string;
  kind: string;
  status: "queued" | "running" | "done" | "failed";
  prototype_id: number | null;
  progress: { step?: number; loss?: number; acc_s1?: number; acc_s2?: number; acc_sr?: number };
  error: string | null;
}

export interface SplitChannel {
  channel: number;
  patches: PatchPayload[];
}

export interface SplitResultPayload {
  prototype_id: number;
  converged: boolean;
  steps_used: number;
  channel_a: SplitChannel;
  channel_b: SplitChannel;
}

export interface Aggregates {
  channels_assessed: number;
  more_consistent: number;
  fraction_more_consistent: number;
  prototypes_judged: number;
  judged_inconsistent: number;
  fraction_inconsistent: number;
}

export interface SessionSnapshot {
  session_id: string;
  judgments: Record<string, Judgment>;
  labels: Record<string, Record<string, ConceptLabel>>;
  splits_started: number[];
  splits_finished: Record<string, { converged?: boolean; new_channel?: number }>;
  assessments: Record<string, Record<string, AssessmentVerdict>>;
}
