import json
import threading

import pytest

from protosplit.errors import ValidationError
from protosplit.session_log import (
    SessionEvent,
    SessionLog,
    aggregate_assessments,
    iter_events,
    replay,
)


def test_unknown_kind_rejected():
    with pytest.raises(ValidationError):
        SessionEvent("s1", "bogus_kind", {})


def test_empty_log_empty_state(tmp_path):
    assert replay(tmp_path / "missing.jsonl") == {}


def test_replay_reconstructs_labels_and_judgments(tmp_path):
    path = tmp_path / "log.jsonl"
    with SessionLog(path) as log:
        log.append(SessionEvent("s1", "phase1_judgment", {"prototype": 4, "verdict": "inconsistent"}))
        for patch, label in [(10, "A"), (11, "A"), (12, "B"), (13, "SomethingElse")]:
            log.append(SessionEvent("s1", "patch_label", {"prototype": 4, "patch": patch, "label": label}))
        # relabeling overrides the earlier decision
        log.append(SessionEvent("s1", "patch_label", {"prototype": 4, "patch": 13, "label": "B"}))
    state = replay(path)["s1"]
    assert state.judgments == {4: "inconsistent"}
    assert state.label_map(4) == {10: "A", 11: "A", 12: "B", 13: "B"}


def test_replay_is_idempotent_and_order_preserving(tmp_path):
    path = tmp_path / "log.jsonl"
    with SessionLog(path) as log:
        log.append(SessionEvent("s1", "patch_label", {"prototype": 0, "patch": 1, "label": "A"}))
        log.append(SessionEvent("s1", "patch_label", {"prototype": 0, "patch": 1, "label": "B"}))
    first = replay(path)
    second = replay(path)
    assert first["s1"].label_map(0) == second["s1"].label_map(0) == {1: "B"}


def test_assessment_aggregates(tmp_path):
    path = tmp_path / "log.jsonl"
    with SessionLog(path) as log:
        log.append(SessionEvent("s1", "phase3_assessment", {"prototype": 2, "channel": "a", "verdict": "more"}))
        log.append(SessionEvent("s1", "phase3_assessment", {"prototype": 2, "channel": "b", "verdict": "less"}))
        log.append(SessionEvent("s2", "phase3_assessment", {"prototype": 3, "channel": "a", "verdict": "more"}))
    agg = aggregate_assessments(replay(path))
    assert agg["channels_assessed"] == 3
    assert agg["more_consistent"] == 2
    assert agg["fraction_more_consistent"] == pytest.approx(2 / 3)


def test_interleaved_sessions_never_corrupt_each_other(tmp_path):
    # concurrent writers on the same file, one log handle per session
    path = tmp_path / "log.jsonl"
    per_session = 200
    sessions = [f"s{i}" for i in range(8)]

    def writer(session_id):
        with SessionLog(path) as log:
            for n in range(per_session):
                log.append(
                    SessionEvent(
                        session_id,
                        "patch_label",
                        {"prototype": 1, "patch": n, "label": "A"},
                    )
                )

    threads = [threading.Thread(target=writer, args=(s,)) for s in sessions]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    # every line parses, every session's full sequence is present in order
    events = list(iter_events(path))
    assert len(events) == per_session * len(sessions)
    for s in sessions:
        patches = [e.payload["patch"] for e in events if e.session_id == s]
        assert patches == list(range(per_session))
    state = replay(path)
    assert set(state) == set(sessions)
    for s in sessions:
        assert len(state[s].label_map(1)) == per_session


def test_split_lifecycle_events(tmp_path):
    path = tmp_path / "log.jsonl"
    with SessionLog(path) as log:
        log.append(SessionEvent("s1", "split_started", {"prototype": 7}))
        log.append(SessionEvent("s1", "split_progress", {"prototype": 7, "step": 10, "loss": 0.5}))
        log.append(SessionEvent("s1", "split_finished", {"prototype": 7, "converged": True}))
    state = replay(path)["s1"]
    assert state.splits_started == [7]
    assert state.splits_finished[7]["converged"] is True
