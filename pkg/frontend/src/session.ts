// Session controller: the three-phase study flow as a state machine.
//
// Phase 1  judge      top-k grid, Consistent / Inconsistent choice
// Phase 2  label      every patch gets exactly one of A / B / SomethingElse
//          wait       split job running, progress polled
// Phase 3  assess     two new channel grids, more / less consistent each
//
// The controller holds no authoritative state: every decision is an API
// call, and resume() rebuilds the exact screen from the server's session
// log.  Decision counts and timing are tracked client-side to mirror the
// study's effort statistics.

import type { ApiClient } from "./api";
import { pollJob, pollSplitResult } from "./poll";
import type {
  AssessmentVerdict,
  ConceptLabel,
  JobPayload,
  Judgment,
  PatchPayload,
  SplitResultPayload,
} from "./types";

export type Phase = "idle" | "judge" | "label" | "wait" | "assess" | "done";

export interface Screen {
  phase: Phase;
  prototypeId: number | null;
  patches: PatchPayload[];
  labels: Map<number, ConceptLabel>;
  labelError: string | null;
  progress: JobPayload["progress"] | null;
  result: SplitResultPayload | null;
  position: number; // 0-based index into the review queue
  queueLength: number;
}

export interface EffortSummary {
  decisions: number;
  judgments: number;
  labelsSubmitted: number;
  assessments: number;
  elapsedMs: number;
}

export class SessionController {
  private queue: number[] = [];
  private index = 0;
  private phase: Phase = "idle";
  private patches: PatchPayload[] = [];
  private labels = new Map<number, ConceptLabel>();
  private labelError: string | null = null;
  private progress: JobPayload["progress"] | null = null;
  private result: SplitResultPayload | null = null;

  private judgments = 0;
  private labelsSubmitted = 0;
  private assessments = 0;
  private startedAt = 0;
  private lastActionAt = 0;

  constructor(
    private api: ApiClient,
    readonly sessionId: string,
    private k = 10,
    private q = 2,
    private now: () => number = Date.now,
  ) {}

  screen(): Screen {
    return {
      phase: this.phase,
      prototypeId: this.currentPrototype(),
      patches: this.patches,
      labels: new Map(this.labels),
      labelError: this.labelError,
      progress: this.progress,
      result: this.result,
      position: this.index,
      queueLength: this.queue.length,
    };
  }

  effort(): EffortSummary {
    return {
      decisions: this.judgments + this.labelsSubmitted + this.assessments,
      judgments: this.judgments,
      labelsSubmitted: this.labelsSubmitted,
      assessments: this.assessments,
      elapsedMs: this.startedAt ? this.lastActionAt - this.startedAt : 0,
    };
  }

  currentPrototype(): number | null {
    return this.index < this.queue.length ? this.queue[this.index]! : null;
  }

  /** Load the ranked flagged prototypes and enter phase 1. */
  async start(): Promise<Screen> {
    const listing = await this.api.listPrototypes();
    this.queue = listing.prototypes.filter((p) => p.flagged).map((p) => p.prototype_id);
    this.index = 0;
    this.startedAt = this.now();
    this.lastActionAt = this.startedAt;
    await this.enterPhaseForCurrent();
    return this.screen();
  }

  /** Rebuild phase, pending labels, and effort counters from the server log. */
  async resume(): Promise<Screen> {
    const listing = await this.api.listPrototypes();
    this.queue = listing.prototypes.filter((p) => p.flagged).map((p) => p.prototype_id);
    const snapshot = await this.api.getSession(this.sessionId);
    this.judgments = Object.keys(snapshot.judgments).length;
    this.assessments = Object.values(snapshot.assessments).reduce(
      (acc, channels) => acc + Object.keys(channels).length,
      0,
    );
    this.labelsSubmitted = 0;
    this.startedAt = this.now();
    this.lastActionAt = this.startedAt;

    this.index = this.queue.length;
    for (let i = 0; i < this.queue.length; i++) {
      const proto = this.queue[i]!;
      const judged = snapshot.judgments[String(proto)];
      const assessed = snapshot.assessments[String(proto)];
      const finished = snapshot.splits_finished[String(proto)];
      const started = snapshot.splits_started.includes(proto);
      const pending = snapshot.labels[String(proto)] ?? {};
      if (assessed && Object.keys(assessed).length >= 2) {
        this.labelsSubmitted += Object.keys(pending).length;
        continue; // fully processed
      }
      if (judged === "consistent") continue;
      this.index = i;
      if (judged === undefined) {
        await this.enterPhaseForCurrent();
      } else if (finished) {
        this.labelsSubmitted += Object.keys(pending).length;
        this.result = await this.api.getSplitResult(proto, this.k);
        this.phase = "assess";
      } else if (started) {
        this.labelsSubmitted += Object.keys(pending).length;
        this.phase = "wait";
        this.result = await pollSplitResult(this.api, proto);
        this.phase = "assess";
      } else {
        // mid-labeling: restore the pending labels
        await this.loadPatches(proto);
        this.labels = new Map(
          Object.entries(pending).map(([row, label]) => [Number(row), label]),
        );
        this.phase = "label";
      }
      return this.screen();
    }
    this.phase = "done";
    return this.screen();
  }

  private async enterPhaseForCurrent(): Promise<void> {
    const proto = this.currentPrototype();
    if (proto === null) {
      this.phase = "done";
      return;
    }
    await this.loadPatches(proto);
    this.phase = "judge";
  }

  private async loadPatches(proto: number): Promise<void> {
    const grid = await this.api.getPatches(proto, this.k);
    this.patches = grid.patches;
    this.labels = new Map();
    this.labelError = null;
    this.progress = null;
    this.result = null;
  }

  private touch(): void {
    this.lastActionAt = this.now();
  }

  /** Phase 1: a consistent verdict skips to the next prototype. */
  async judge(verdict: Judgment): Promise<Screen> {
    const proto = this.requirePhase("judge");
    await this.api.submitJudgment(proto, this.sessionId, verdict);
    this.judgments += 1;
    this.touch();
    if (verdict === "consistent") {
      this.index += 1;
      await this.enterPhaseForCurrent();
    } else {
      this.phase = "label";
    }
    return this.screen();
  }

  /** Phase 2: record one label (logged server-side so reloads can resume). */
  async setLabel(patchId: number, label: ConceptLabel): Promise<Screen> {
    const proto = this.requirePhase("label");
    if (!this.patches.some((p) => p.patch_id === patchId)) {
      throw new Error(`patch ${patchId} is not on this screen`);
    }
    await this.api.recordLabel(proto, this.sessionId, patchId, label);
    this.labels.set(patchId, label);
    this.labelError = null;
    this.touch();
    return this.screen();
  }

  /** Client-side gate mirroring the server: null means ready to submit. */
  validateLabels(): string | null {
    if (this.labels.size < this.patches.length) {
      return `label every patch before submitting (${this.labels.size}/${this.patches.length})`;
    }
    const counts = { A: 0, B: 0 };
    for (const label of this.labels.values()) {
      if (label === "A") counts.A += 1;
      if (label === "B") counts.B += 1;
    }
    if (counts.A < this.q) return `concept A below minimum size (${counts.A} < ${this.q})`;
    if (counts.B < this.q) return `concept B below minimum size (${counts.B} < ${this.q})`;
    return null;
  }

  /** Phase 2 -> wait -> phase 3: submit, start the split, poll to the result. */
  async submitAndSplit(): Promise<Screen> {
    const proto = this.requirePhase("label");
    const error = this.validateLabels();
    if (error !== null) {
      this.labelError = error;
      return this.screen();
    }
    const labelMap: Record<number, ConceptLabel> = {};
    for (const [row, label] of this.labels) labelMap[row] = label;
    await this.api.submitLabels(proto, this.sessionId, labelMap);
    this.labelsSubmitted += this.labels.size;
    this.touch();
    this.phase = "wait";
    const { job_id } = await this.api.startSplit(proto, this.sessionId, false);
    await pollJob(this.api, job_id, (job) => {
      this.progress = job.progress;
    });
    this.result = await this.api.getSplitResult(proto, this.k);
    this.phase = "assess";
    return this.screen();
  }

  /** Phase 3: two verdicts, one per result channel, then next prototype. */
  async assess(channelA: AssessmentVerdict, channelB: AssessmentVerdict): Promise<Screen> {
    const proto = this.requirePhase("assess");
    await this.api.submitAssessment(proto, this.sessionId, channelA, channelB);
    this.assessments += 2;
    this.touch();
    this.index += 1;
    await this.enterPhaseForCurrent();
    return this.screen();
  }

  private requirePhase(expected: Phase): number {
    if (this.phase !== expected) {
      throw new Error(`action needs phase ${expected}, session is in ${this.phase}`);
    }
    const proto = this.currentPrototype();
    if (proto === null) throw new Error("no prototype under review");
    return proto;
  }
}
