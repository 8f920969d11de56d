"""Append-only event log for interactive labeling sessions.

One JSON record per line.  Writes happen in a single write() call against a
file opened in append mode, so records from concurrently active sessions
interleave without corrupting each other; events carry a session id and
replay groups by it.  The log is fsynced on phase boundaries (judgments,
split start/finish, assessments) but not on every label keystroke.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError

EVENT_KINDS = (
    "phase1_judgment",
    "patch_label",
    "split_started",
    "split_progress",
    "split_finished",
    "phase3_assessment",
)
PHASE_BOUNDARIES = {
    "phase1_judgment",
    "split_started",
    "split_finished",
    "phase3_assessment",
}


@dataclass(frozen=True)
class SessionEvent:
    session_id: str
    kind: str
    payload: dict
    ts: float = 0.0

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValidationError(f"unknown event kind {self.kind!r}")


class SessionLog:
    """Single-writer-per-session append log; many logs may share one file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "a", encoding="utf-8")
        self._lock = threading.Lock()

    def append(self, event: SessionEvent) -> None:
        record = {
            "session_id": event.session_id,
            "kind": event.kind,
            "payload": event.payload,
            "ts": event.ts or time.time(),
        }
        line = json.dumps(record, sort_keys=True) + "\n"
        with self._lock:
            self._file.write(line)
            self._file.flush()
            if event.kind in PHASE_BOUNDARIES:
                os.fsync(self._file.fileno())

    def close(self) -> None:
        with self._lock:
            self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def iter_events(path: str | Path):
    path = Path(path)
    if not path.exists():
        return
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            yield SessionEvent(rec["session_id"], rec["kind"], rec["payload"], rec["ts"])


@dataclass
class SessionState:
    """Everything one session has decided so far, rebuilt from the log."""

    session_id: str
    judgments: dict[int, str] = field(default_factory=dict)  # prototype -> verdict
    labels: dict[int, dict[int, str]] = field(default_factory=dict)  # prototype -> row -> label
    splits_started: list[int] = field(default_factory=list)
    splits_finished: dict[int, dict] = field(default_factory=dict)
    assessments: dict[int, dict[str, str]] = field(default_factory=dict)  # prototype -> channel -> verdict

    def label_map(self, prototype_id: int) -> dict[int, str]:
        return dict(self.labels.get(prototype_id, {}))


def replay(path: str | Path) -> dict[str, SessionState]:
    """Rebuild per-session state; later events override earlier ones in order."""
    sessions: dict[str, SessionState] = {}
    for event in iter_events(path):
        state = sessions.setdefault(event.session_id, SessionState(event.session_id))
        payload = event.payload
        if event.kind == "phase1_judgment":
            state.judgments[int(payload["prototype"])] = payload["verdict"]
        elif event.kind == "patch_label":
            proto = int(payload["prototype"])
            state.labels.setdefault(proto, {})[int(payload["patch"])] = payload["label"]
        elif event.kind == "split_started":
            state.splits_started.append(int(payload["prototype"]))
        elif event.kind == "split_finished":
            state.splits_finished[int(payload["prototype"])] = payload
        elif event.kind == "phase3_assessment":
            proto = int(payload["prototype"])
            state.assessments.setdefault(proto, {})[payload["channel"]] = payload["verdict"]
    return sessions


def aggregate_assessments(sessions: dict[str, SessionState]) -> dict:
    """Fraction of assessed channels rated more consistent, plus raw counts."""
    more = 0
    total = 0
    for state in sessions.values():
        for verdicts in state.assessments.values():
            for verdict in verdicts.values():
                total += 1
                if verdict == "more":
                    more += 1
    return {
        "channels_assessed": total,
        "more_consistent": more,
        "fraction_more_consistent": more / total if total else 0.0,
    }
