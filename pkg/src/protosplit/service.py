"""HTTP facade for the interactive labeling loop.

Endpoints live under /v1.  The flow mirrors the three study phases:
browse ranked prototypes and their patch grids (phase 1), submit A/B/
SomethingElse labels (phase 2), start a split job and poll it, then fetch
the two result channels and submit consistency assessments (phase 3).

Detection and splits run as background jobs on a bounded worker pool.
Splits are serialized on the bank (each one appends a channel, shifting
the row layout for everyone), and at most one split job per prototype can
be active.  Every decision is appended to the session log; restarting the
service replays the log, so label state and assessment aggregates survive
restarts.
"""

from __future__ import annotations

import itertools
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal

from fastapi import FastAPI, HTTPException, Response
from pydantic import BaseModel

from .bundle import read_bundle, read_detection_report
from .detection import DetectionConfig, DetectionResult, detect, top_activated_indices
from .errors import ProtosplitError, ValidationError
from .model import corpus_activations
from .pipeline import (
    concept_sets_from_cliques,
    concept_sets_from_labels,
    split_and_finetune,
)
from .session_log import SessionEvent, SessionLog, aggregate_assessments, replay
from .splitting import SplitHyperparams


class LabelSubmission(BaseModel):
    session_id: str
    labels: dict[int, Literal["A", "B", "SomethingElse"]]


class SingleLabel(BaseModel):
    session_id: str
    patch: int
    label: Literal["A", "B", "SomethingElse"]


class JudgmentSubmission(BaseModel):
    session_id: str
    verdict: Literal["consistent", "inconsistent"]


class SplitRequest(BaseModel):
    session_id: str = "default"
    auto: bool = False


class AssessmentSubmission(BaseModel):
    session_id: str
    channel_a: Literal["more", "less"]
    channel_b: Literal["more", "less"]


@dataclass
class Job:
    id: str
    kind: str  # detect | split
    status: str = "queued"  # queued | running | done | failed
    prototype_id: int | None = None
    progress: dict = field(default_factory=dict)
    error: str | None = None

    def payload(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "status": self.status,
            "prototype_id": self.prototype_id,
            "progress": self.progress,
            "error": self.error,
        }


@dataclass
class SplitOutcome:
    prototype_id: int
    new_channel: int
    converged: bool
    steps_used: int


class ServiceState:
    def __init__(self, bundle_path, report_path, log_path, workers, q, seed,
                 detection_config=None, hyper=None):
        self.bundle = read_bundle(bundle_path)
        self.corpus = self.bundle.to_corpus()
        self.bank = self.bundle.to_bank()
        self.q = q
        self.seed = seed
        self.detection_config = detection_config or DetectionConfig(q=q)
        self.hyper = hyper or SplitHyperparams()
        self.detection: DetectionResult | None = None
        if report_path:
            self.detection = read_detection_report(report_path)
        self.log = SessionLog(log_path)
        self.sessions = replay(log_path)
        self.jobs: dict[str, Job] = {}
        self.split_jobs_by_prototype: dict[int, str] = {}
        self.split_outcomes: dict[int, SplitOutcome] = {}
        self.lock = threading.Lock()  # jobs, sessions, bank swaps
        self.bank_lock = threading.Lock()  # serializes split execution
        self.pool = ThreadPoolExecutor(max_workers=workers)
        self._job_counter = itertools.count(1)

    def close(self):
        self.pool.shutdown(wait=False)
        self.log.close()

    def new_job(self, kind, prototype_id=None) -> Job:
        job = Job(id=f"job-{next(self._job_counter)}", kind=kind, prototype_id=prototype_id)
        self.jobs[job.id] = job
        return job

    def record(self, session_id, kind, payload) -> None:
        with self.lock:
            self.log.append(SessionEvent(session_id, kind, payload))
            self.sessions = replay(self.log.path)

    def image_classes(self) -> dict[str, int]:
        if self.bundle.annotations is None:
            return {}
        return self.bundle.annotations.image_classes

    def served_rows(self, prototype_id: int) -> list[int]:
        if self.detection is None:
            raise ValidationError("run detection first")
        rows = self.detection.patch_sets.get(prototype_id)
        if rows is None:
            raise ValidationError(f"prototype {prototype_id} has no served patch set")
        return rows

    def latest_labels(self, prototype_id: int) -> dict[int, str] | None:
        """A submitted label map for the prototype, preferring later sessions."""
        with self.lock:
            best = None
            for state in self.sessions.values():
                labels = state.labels.get(prototype_id)
                if labels:
                    best = dict(labels)
            return best


def build_app(bundle_path, report_path=None, log_path="session_log.jsonl",
              workers=2, q=2, seed=0, detection_config=None, hyper=None) -> FastAPI:
    state = ServiceState(bundle_path, report_path, log_path, workers, q, seed,
                         detection_config, hyper)
    app = FastAPI(title="protosplit", version="1")
    app.state.engine = state

    def patch_payload(row: int, activations, channel: int) -> dict:
        meta = state.bundle.patches[row]
        return {
            "patch_id": row,
            "image_id": meta.image_id,
            "location": [meta.h, meta.w],
            "thumbnail_url": f"/v1/thumbnails/{row}",
            "activation": float(activations[row, channel]),
        }

    def top_payloads(channel: int, k: int) -> list[dict]:
        acts = corpus_activations(state.corpus, state.bank)
        # an original prototype's served set is pinned by the detection
        # report: labels are validated against it, and recomputing after
        # other prototypes were split would drift away from the recorded
        # patch set mid-session; channels without a recorded set (post-split
        # result channels in particular) rank against the current bank
        recorded = state.detection.patch_sets.get(channel) if state.detection else None
        if recorded is not None and channel not in state.split_outcomes:
            rows = recorded[:k]
        else:
            rows, _short = top_activated_indices(
                acts, state.corpus, channel, k, state.detection_config.dedup_per_image
            )
        return [patch_payload(r, acts, channel) for r in rows]

    @app.get("/v1/meta")
    def meta():
        return {
            "num_prototypes": state.bank.num_prototypes,
            "num_classes": state.bank.num_classes,
            "num_patches": len(state.corpus),
            "detection_ready": state.detection is not None,
            "q": state.q,
        }

    @app.post("/v1/detect")
    def start_detect():
        with state.lock:
            job = state.new_job("detect")

        def run(job_id=job.id):
            j = state.jobs[job_id]
            j.status = "running"
            try:
                result = detect(state.corpus, state.bank, state.detection_config)
                with state.lock:
                    state.detection = result
                j.progress = {"flagged": len(result.flagged())}
                j.status = "done"
            except Exception as exc:  # pragma: no cover - defensive
                j.error = str(exc)
                j.status = "failed"

        state.pool.submit(run)
        return {"job_id": job.id}

    @app.get("/v1/prototypes")
    def list_prototypes(offset: int = 0, limit: int = 50):
        if state.detection is None:
            raise HTTPException(status_code=409, detail="run detection first")
        entries = []
        for report in state.detection.reports:
            d = report.prototype_id
            outcome = state.split_outcomes.get(d)
            active = state.split_jobs_by_prototype.get(d)
            if outcome is not None:
                split_status = "done"
            elif active is not None:
                split_status = state.jobs[active].status
            else:
                split_status = "none"
            entries.append(
                {
                    "prototype_id": d,
                    "flagged": report.flagged,
                    "dissimilarity": report.dissimilarity,
                    "split_status": split_status,
                }
            )
        return {
            "total": len(entries),
            "delta_star": state.detection.delta_star,
            "prototypes": entries[offset : offset + limit],
        }

    @app.get("/v1/prototypes/{prototype_id}/patches")
    def get_patches(prototype_id: int, k: int = 10):
        if not (0 <= prototype_id < state.bank.num_prototypes):
            raise HTTPException(status_code=404, detail=f"no prototype {prototype_id}")
        return {"prototype_id": prototype_id, "patches": top_payloads(prototype_id, k)}

    @app.post("/v1/prototypes/{prototype_id}/judgment")
    def submit_judgment(prototype_id: int, body: JudgmentSubmission):
        if not (0 <= prototype_id < state.bank.num_prototypes):
            raise HTTPException(status_code=404, detail=f"no prototype {prototype_id}")
        state.record(
            body.session_id,
            "phase1_judgment",
            {"prototype": prototype_id, "verdict": body.verdict},
        )
        return {"recorded": True}

    @app.post("/v1/prototypes/{prototype_id}/label")
    def record_one_label(prototype_id: int, body: SingleLabel):
        """Log a single in-progress label so a reloaded client can resume;
        the full submission below is what enforces the concept-size gate."""
        try:
            served = state.served_rows(prototype_id)
        except ValidationError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        if body.patch not in served:
            raise HTTPException(
                status_code=400,
                detail=f"patch {body.patch} was not part of prototype {prototype_id}'s served set",
            )
        state.record(
            body.session_id,
            "patch_label",
            {"prototype": prototype_id, "patch": body.patch, "label": body.label},
        )
        return {"recorded": True}

    @app.post("/v1/prototypes/{prototype_id}/labels")
    def submit_labels(prototype_id: int, body: LabelSubmission):
        try:
            served = state.served_rows(prototype_id)
            sets = concept_sets_from_labels(
                dict(body.labels), served, prototype_id, state.corpus, state.bank, q=state.q
            )
        except ValidationError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        for row, label in sorted(body.labels.items()):
            state.record(
                body.session_id,
                "patch_label",
                {"prototype": prototype_id, "patch": row, "label": label},
            )
        return {
            "accepted": True,
            "sizes": {"s1": len(sets.s1), "s2": len(sets.s2), "sr": len(sets.sr)},
        }

    @app.post("/v1/prototypes/{prototype_id}/split")
    def start_split(prototype_id: int, body: SplitRequest):
        if state.detection is None:
            raise HTTPException(status_code=409, detail="run detection first")
        with state.lock:
            active = state.split_jobs_by_prototype.get(prototype_id)
            if active and state.jobs[active].status in ("queued", "running"):
                raise HTTPException(
                    status_code=409, detail=f"split already active for prototype {prototype_id}"
                )
            if prototype_id in state.split_outcomes:
                raise HTTPException(
                    status_code=409, detail=f"prototype {prototype_id} is already split"
                )
            job = state.new_job("split", prototype_id)
            state.split_jobs_by_prototype[prototype_id] = job.id
        state.record(body.session_id, "split_started", {"prototype": prototype_id})

        def run(job_id=job.id, session_id=body.session_id, auto=body.auto):
            j = state.jobs[job_id]
            j.status = "running"
            e = j.prototype_id
            try:
                with state.bank_lock:
                    labels = None if auto else state.latest_labels(e)
                    if labels:
                        sets = concept_sets_from_labels(
                            labels, state.served_rows(e), e, state.corpus, state.bank, q=state.q
                        )
                    else:
                        sets = concept_sets_from_cliques(
                            state.detection, e, state.corpus, state.bank
                        )

                    def on_progress(step, loss, accs):
                        j.progress = {
                            "step": step,
                            "loss": loss,
                            "acc_s1": accs.s1,
                            "acc_s2": accs.s2,
                            "acc_sr": accs.sr,
                        }
                        state.record(
                            session_id,
                            "split_progress",
                            {"prototype": e, "step": step, "loss": loss},
                        )

                    new_bank, result, _finetune = split_and_finetune(
                        state.corpus, state.bank, e, sets,
                        hyper=state.hyper, seed=state.seed,
                        image_classes=state.image_classes(), q=state.q,
                        progress_callback=on_progress,
                    )
                    with state.lock:
                        state.bank = new_bank
                        state.split_outcomes[e] = SplitOutcome(
                            prototype_id=e,
                            new_channel=result.new_channel,
                            converged=result.converged,
                            steps_used=result.steps_used,
                        )
                state.record(
                    session_id,
                    "split_finished",
                    {
                        "prototype": e,
                        "new_channel": result.new_channel,
                        "converged": result.converged,
                        "steps": result.steps_used,
                    },
                )
                j.status = "done"
            except ProtosplitError as exc:
                j.error = str(exc)
                j.status = "failed"
            except Exception as exc:  # pragma: no cover - defensive
                j.error = f"internal: {exc}"
                j.status = "failed"

        state.pool.submit(run)
        return {"job_id": job.id}

    @app.get("/v1/jobs/{job_id}")
    def get_job(job_id: str):
        job = state.jobs.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"no job {job_id}")
        return job.payload()

    @app.get("/v1/prototypes/{prototype_id}/split_result")
    def get_split_result(prototype_id: int, k: int = 10):
        outcome = state.split_outcomes.get(prototype_id)
        if outcome is None:
            raise HTTPException(status_code=404, detail="split result not available")
        return {
            "prototype_id": prototype_id,
            "converged": outcome.converged,
            "steps_used": outcome.steps_used,
            "channel_a": {
                "channel": outcome.prototype_id,
                "patches": top_payloads(outcome.prototype_id, k),
            },
            "channel_b": {
                "channel": outcome.new_channel,
                "patches": top_payloads(outcome.new_channel, k),
            },
        }

    @app.post("/v1/prototypes/{prototype_id}/assessment")
    def submit_assessment(prototype_id: int, body: AssessmentSubmission):
        if prototype_id not in state.split_outcomes:
            raise HTTPException(status_code=409, detail="assessment requires a split result")
        for channel, verdict in (("a", body.channel_a), ("b", body.channel_b)):
            state.record(
                body.session_id,
                "phase3_assessment",
                {"prototype": prototype_id, "channel": channel, "verdict": verdict},
            )
        return {"recorded": True}

    @app.get("/v1/aggregates")
    def get_aggregates():
        with state.lock:
            sessions = state.sessions
        agg = aggregate_assessments(sessions)
        judgments = [v for s in sessions.values() for v in s.judgments.values()]
        agg["prototypes_judged"] = len(judgments)
        agg["judged_inconsistent"] = sum(1 for v in judgments if v == "inconsistent")
        agg["fraction_inconsistent"] = (
            agg["judged_inconsistent"] / len(judgments) if judgments else 0.0
        )
        return agg

    @app.get("/v1/session/{session_id}")
    def get_session(session_id: str):
        with state.lock:
            session = state.sessions.get(session_id)
        if session is None:
            return {"session_id": session_id, "judgments": {}, "labels": {},
                    "splits_started": [], "splits_finished": {}, "assessments": {}}
        return {
            "session_id": session_id,
            "judgments": session.judgments,
            "labels": session.labels,
            "splits_started": session.splits_started,
            "splits_finished": session.splits_finished,
            "assessments": session.assessments,
        }

    @app.get("/v1/thumbnails/{patch_id}")
    def get_thumbnail(patch_id: int):
        if not (0 <= patch_id < len(state.bundle.patches)):
            raise HTTPException(status_code=404, detail=f"no patch {patch_id}")
        ref = state.bundle.patches[patch_id].thumbnail_ref
        blob = state.bundle.thumbnails.get(ref)
        if blob is None:
            raise HTTPException(status_code=404, detail=f"no thumbnail for patch {patch_id}")
        return Response(content=blob, media_type="image/png")

    return app
