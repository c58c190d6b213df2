import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
import requests
from fastapi.testclient import TestClient

from src.api.llm_gateway import (
    REFUSAL_TEXT,
    CompletionResult,
    MockVerdictBackend,
    RemoteChatBackend,
    TranscriptStore,
    TransportStatus,
    classify_with_llm,
    complete,
    explain_all,
    explain_incident,
    make_backend,
    transcripts_to_markdown,
)
from src.api.service import create_app
from src.core.detector import classify, evaluate_detector
from src.core.errors import GatewayError
from src.core.prompt_codec import (
    CLASSIFY_PROMPT,
    EXPLAIN_KINDS,
    EXPLAIN_SYSTEM_PROMPT,
    PromptKind,
    Verdict,
    build_classify_prompt,
    build_explain_prompt,
    parse_verdict,
    serialize_record,
)
from src.utils.config import GatewayConfig, RetryPolicy

MOCK = GatewayConfig(backend="mock", max_parallel_requests=4)


class _Response:
    def __init__(self, status_code, payload=None):
        self.status_code = status_code
        self._payload = payload

    def json(self):
        if self._payload is None:
            raise ValueError("no body")
        return self._payload


class _ScriptedSession:
    """requests-style session replaying canned responses (or exceptions) in order"""

    def __init__(self, *outcomes):
        self.outcomes = list(outcomes)
        self.calls = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls.append({"url": url, "json": json, "headers": headers, "timeout": timeout})
        outcome = self.outcomes.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        return outcome


class _FixedBackend:
    def __init__(self, text=None, status=TransportStatus.OK):
        self.text = text
        self.status = status
        self.calls = 0

    def complete(self, instruction, input):
        self.calls += 1
        return CompletionResult(self.text, self.status)


class _SlowSession:
    """Thread-safe session that holds each request open briefly and tracks the peak concurrency"""

    def __init__(self, delay=0.02):
        self.delay = delay
        self.in_flight = 0
        self.peak = 0
        self._lock = threading.Lock()

    def post(self, url, json=None, headers=None, timeout=None):
        with self._lock:
            self.in_flight += 1
            self.peak = max(self.peak, self.in_flight)
        time.sleep(self.delay)
        with self._lock:
            self.in_flight -= 1
        return _ok("(Benign)")


def _ok(text):
    return _Response(200, {"choices": [{"message": {"role": "assistant", "content": text}}], "usage": {"prompt_tokens": 3, "completion_tokens": 1}})


def _remote(session, retries=3, key="sk-secret"):
    config = GatewayConfig(backend="remote", endpoint_url="http://testserver/v1", api_key=key, retry_policy=RetryPolicy(max_retries=retries, backoff_base_seconds=0.5))
    delays = []
    return RemoteChatBackend(config, session=session, sleep=delays.append), delays


def test_completion_result_consistency():
    with pytest.raises(GatewayError):
        CompletionResult(None, TransportStatus.OK)
    with pytest.raises(GatewayError):
        CompletionResult("text", TransportStatus.TIMEOUT)


def test_remote_request_shape():
    session = _ScriptedSession(_ok("(Benign)"))
    backend, _ = _remote(session)
    result = backend.complete("INSTRUCTION", "RECORD")
    assert result.ok and result.text == "(Benign)"
    assert result.token_counts == {"prompt": 3, "completion": 1}
    call = session.calls[0]
    assert call["url"] == "http://testserver/v1/chat/completions"
    assert call["headers"]["Authorization"] == "Bearer sk-secret"
    assert call["json"]["messages"] == [{"role": "system", "content": "INSTRUCTION"}, {"role": "user", "content": "RECORD"}]
    assert call["json"]["temperature"] == 0.0


def test_remote_without_key_sends_no_authorization():
    session = _ScriptedSession(_ok("(Benign)"))
    backend, _ = _remote(session, key="")
    backend.complete("i", "x")
    assert "Authorization" not in session.calls[0]["headers"]


def test_rate_limit_then_success_retries_once():
    session = _ScriptedSession(_Response(429), _ok("(Malicious)"))
    backend, delays = _remote(session)
    result = backend.complete("i", "x")
    assert result.transport_status is TransportStatus.OK
    assert result.attempts == 2
    assert backend.requests_sent == 2
    assert delays == [0.5]


def test_server_errors_back_off_exponentially():
    session = _ScriptedSession(_Response(503), _Response(500), _Response(502), _Response(500))
    backend, delays = _remote(session, retries=3)
    result = backend.complete("i", "x")
    assert result.transport_status is TransportStatus.SERVER_ERROR
    assert result.text is None
    assert delays == [0.5, 1.0, 2.0]
    assert backend.requests_sent == 4


def test_connection_errors_are_retried():
    session = _ScriptedSession(requests.ConnectionError("refused"), _ok("(Benign)"))
    backend, _ = _remote(session)
    assert backend.complete("i", "x").ok


def test_timeout_gives_no_text():
    backend, delays = _remote(_ScriptedSession(requests.Timeout("slow")))
    result = backend.complete("i", "x")
    assert result.transport_status is TransportStatus.TIMEOUT
    assert result.text is None
    assert delays == []


@pytest.mark.parametrize("response", [_Response(200, {"choices": []}), _Response(200), _Response(400, {"error": "bad"})])
def test_malformed_answers(response):
    backend, _ = _remote(_ScriptedSession(response))
    assert backend.complete("i", "x").transport_status is TransportStatus.MALFORMED


def test_remote_against_verdict_service(trained_detector, detector_split):
    session = TestClient(create_app(trained_detector))
    backend, _ = _remote(session)
    sample = detector_split.test[0]
    prompt = build_classify_prompt(sample)
    result = backend.complete(prompt["instruction"], prompt["input"])
    assert result.ok
    assert parse_verdict(result.text).label == classify(trained_detector, sample.record_values())["label"]


def test_mock_verdict_matches_detector(trained_detector, detector_split):
    backend = MockVerdictBackend(trained_detector)
    for sample in detector_split.test[:30]:
        prompt = build_classify_prompt(sample)
        expected = classify(trained_detector, sample.record_values())["label"]
        assert parse_verdict(backend.complete(prompt["instruction"], prompt["input"]).text).label == expected


def test_mock_refuses_garbage(trained_detector):
    result = MockVerdictBackend(trained_detector).complete(CLASSIFY_PROMPT, "drop table records;")
    assert result.text == REFUSAL_TEXT
    assert parse_verdict(result.text) is Verdict.UNPARSEABLE


def test_mock_is_deterministic(trained_detector, detector_split):
    backend = MockVerdictBackend(trained_detector)
    text = serialize_record(detector_split.test[1])
    assert backend.complete(CLASSIFY_PROMPT, text) == backend.complete(CLASSIFY_PROMPT, text)


def test_make_backend():
    with pytest.raises(GatewayError):
        make_backend(MOCK)
    assert isinstance(make_backend(GatewayConfig(backend="remote"), session=_ScriptedSession()), RemoteChatBackend)


def test_complete_through_config(trained_detector, detector_split):
    result = complete(MOCK, CLASSIFY_PROMPT, serialize_record(detector_split.test[2]), detector=trained_detector)
    assert parse_verdict(result.text) is not Verdict.UNPARSEABLE


def test_mock_metrics_equal_detector_metrics(trained_detector, detector_split):
    evaluation = classify_with_llm(MOCK, detector_split.test, detector=trained_detector)
    metrics, predictions, _ = evaluate_detector(trained_detector, detector_split.test)
    assert evaluation.metrics == metrics
    assert evaluation.scored_predictions == list(predictions)
    assert evaluation.unparseable_count == 0
    assert evaluation.transport_failures == 0


def test_unparseable_answers_score_zero(detector_split):
    backend = _FixedBackend("I am not sure.")
    evaluation = classify_with_llm(MOCK, detector_split.test, backend=backend)
    assert evaluation.unparseable_count == len(detector_split.test)
    assert evaluation.metrics.precision == evaluation.metrics.recall == evaluation.metrics.f1 == 0.0
    assert evaluation.metrics.macro_f1 == 0.0


def test_transport_failures_abort_the_run(detector_split):
    backend = _FixedBackend(None, TransportStatus.TIMEOUT)
    with pytest.raises(GatewayError) as exc:
        classify_with_llm(MOCK, detector_split.test, backend=backend)
    assert exc.value.code == "too_many_transport_failures"


def test_some_transport_failures_are_scored_wrong(detector_split):
    config = GatewayConfig(backend="mock", abort_failure_fraction=1.0)
    evaluation = classify_with_llm(config, detector_split.test, backend=_FixedBackend(None, TransportStatus.RATE_LIMITED))
    assert evaluation.transport_failures == len(detector_split.test)
    assert evaluation.unparseable_count == 0
    assert evaluation.metrics.tp == evaluation.metrics.tn == 0


def test_empty_testset_rejected():
    with pytest.raises(GatewayError):
        classify_with_llm(MOCK, [], backend=_FixedBackend("(Benign)"))


def test_transcript_resume_skips_answered_records(trained_detector, detector_split, tmp_path):
    path = tmp_path / "classify.jsonl"
    test = detector_split.test[:20]
    first = classify_with_llm(MOCK, test, detector=trained_detector, run_id="abc", transcript_path=path)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 20
    assert "sk-" not in path.read_text(encoding="utf-8")

    counting = _FixedBackend("(Benign)")
    second = classify_with_llm(MOCK, test, backend=counting, run_id="abc", transcript_path=path)
    assert counting.calls == 0
    assert second.resumed == 20
    assert second.metrics == first.metrics

    other = classify_with_llm(MOCK, test, backend=counting, run_id="other-run", transcript_path=path)
    assert counting.calls == 20
    assert other.resumed == 0


def test_resume_requeries_answers_for_other_inputs(trained_detector, detector_split, tmp_path):
    path = tmp_path / "classify.jsonl"
    test = detector_split.test[:12]
    store = TranscriptStore(path)
    for index in range(len(test)):
        store.append({"run_id": "run", "record_index": index, "input_sha256": "0" * 64, "text": "(Malicious)", "transport_status": "ok"})
    store.append({"run_id": "run", "record_index": 0, "text": "(Malicious)", "transport_status": "ok"})

    evaluation = classify_with_llm(MOCK, test, detector=trained_detector, transcript_path=path)
    assert evaluation.resumed == 0
    metrics, _, _ = evaluate_detector(trained_detector, test)
    assert evaluation.metrics == metrics

    again = classify_with_llm(MOCK, test, backend=_FixedBackend("(Benign)"), transcript_path=path)
    assert again.resumed == 12
    assert again.metrics == metrics


def test_parallel_requests_are_bounded():
    session = _SlowSession()
    config = GatewayConfig(backend="remote", endpoint_url="http://testserver/v1", max_parallel_requests=2)
    backend = RemoteChatBackend(config, session=session)
    with ThreadPoolExecutor(max_workers=8) as pool:
        results = list(pool.map(lambda i: backend.complete(CLASSIFY_PROMPT, f"record {i}"), range(16)))
    assert all(r.ok for r in results)
    assert backend.requests_sent == 16
    assert 1 <= session.peak <= 2


def test_transcript_store_ignores_torn_lines_and_failures(tmp_path):
    store = TranscriptStore(tmp_path / "t.jsonl")
    store.append({"run_id": "r", "record_index": 0, "text": "(Benign)", "transport_status": "ok"})
    store.append({"run_id": "r", "record_index": 1, "text": None, "transport_status": "timeout"})
    with store.path.open("a", encoding="utf-8") as f:
        f.write('{"run_id": "r", "record_ind')
    assert list(store.completed("r")) == [0]


def test_explanations_in_fixed_order(trained_detector, detector_split):
    test = detector_split.test
    benign = next(s for s in test if s.label == 0)
    malicious = next(s for s in test if s.label == 1)
    benign_text, malicious_text = serialize_record(benign), serialize_record(malicious)

    transcripts = explain_all(MOCK, benign_text, malicious_text, "(Malicious)", detector=trained_detector)
    assert [t.kind for t in transcripts] == [k.value for k in EXPLAIN_KINDS]
    assert all(t.transport_status == "ok" and t.model_name == "mock-verdict" for t in transcripts)
    pair = transcripts[2]
    assert benign_text in pair.prompt and malicious_text in pair.prompt
    assert "differ" in pair.response or "identical" in pair.response
    assert "most important numerical feature" in transcripts[1].response

    again = explain_all(MOCK, benign_text, malicious_text, "(Malicious)", detector=trained_detector)
    assert [t.response for t in again] == [t.response for t in transcripts]

    markdown = transcripts_to_markdown(transcripts)
    positions = [markdown.index(f"## {k.value}") for k in EXPLAIN_KINDS]
    assert positions == sorted(positions)


@pytest.mark.parametrize("kind", EXPLAIN_KINDS, ids=lambda k: k.value)
def test_explanations_use_their_own_system_message(kind):
    bindings = {
        PromptKind.EXPLAIN_REASONING: {"input": "los: 1.00", "result": "(Malicious)"},
        PromptKind.EXPLAIN_FEATURE_IMPORTANCE: {"input": "los: 1.00"},
        PromptKind.EXPLAIN_PAIR_COMPARISON: {"input1": "los: 1.00", "input2": "los: 0.00"},
    }[kind]
    session = _ScriptedSession(_ok("The path is unusually long."))
    backend, _ = _remote(session)
    transcript = explain_incident(GatewayConfig(backend="remote"), kind, bindings, backend=backend)
    assert transcript.response == "The path is unusually long."
    system, user = session.calls[0]["json"]["messages"]
    assert system == {"role": "system", "content": EXPLAIN_SYSTEM_PROMPT}
    assert system["content"] != CLASSIFY_PROMPT
    assert user == {"role": "user", "content": build_explain_prompt(kind, bindings)}


def test_explanation_with_failing_endpoint():
    transcripts = explain_all(GatewayConfig(backend="remote"), "a", "b", "(Benign)", backend=_FixedBackend(None, TransportStatus.TIMEOUT))
    assert all(t.response is None and t.transport_status == "timeout" for t in transcripts)
    assert "(no response)" in transcripts_to_markdown(transcripts)
    assert json.dumps([t.as_dict() for t in transcripts])
