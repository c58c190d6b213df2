"""
Chat-completions gateway for LLM verdicts and explanations.

Two backends share one interface, ``complete(instruction, input)``:

- RemoteChatBackend: POSTs to ``{endpoint_url}/chat/completions`` with a
  bearer token, retrying rate limits and server errors with exponential
  backoff
- MockVerdictBackend: answers offline from a trained detector, so the whole
  LLM path can run without a network

Transport problems are reported as a status on the result, never as a
verdict and never as an exception; only an aggregate failure rate above the
configured threshold aborts a run.
"""

import hashlib
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Protocol, Sequence, Union

import numpy as np
import requests

from src.core.adversary import LabeledSample
from src.core.detector import ENGINEERED_DESCRIPTIONS, DetectorModel, Metrics, classify, compute_metrics, feature_contributions
from src.core.errors import CodecError, GatewayError
from src.core.features import FEATURE_INFO, RECORD_COLUMNS
from src.core.prompt_codec import (
    EXPLAIN_KINDS,
    EXPLAIN_SYSTEM_PROMPT,
    PromptKind,
    Verdict,
    build_classify_prompt,
    build_explain_prompt,
    detect_explain_kind,
    find_records,
    parse_record_text,
    parse_verdict,
    verdict_text,
)
from src.utils.config import GatewayConfig

logger = logging.getLogger(__name__)

REFUSAL_TEXT = "I can only assess wireless telemetry records given in the expected feature-per-line format."


class TransportStatus(Enum):
    OK = "ok"
    TIMEOUT = "timeout"
    RATE_LIMITED = "rate_limited"
    SERVER_ERROR = "server_error"
    MALFORMED = "malformed"


@dataclass(frozen=True)
class CompletionResult:
    text: Optional[str]
    transport_status: TransportStatus
    latency: float = 0.0
    token_counts: Optional[Dict[str, int]] = None
    attempts: int = 1

    def __post_init__(self):
        if (self.text is not None) != (self.transport_status is TransportStatus.OK):
            raise GatewayError("completion text must be present exactly when the transport status is ok", code="inconsistent_result")

    @property
    def ok(self) -> bool:
        return self.transport_status is TransportStatus.OK


class ChatBackend(Protocol):
    def complete(self, instruction: str, input: str) -> CompletionResult: ...


def _word_counts(prompt: str, completion: str) -> Dict[str, int]:
    return {"prompt": len(prompt.split()), "completion": len(completion.split())}


# -- remote --------------------------------------------------------------------


class RemoteChatBackend:
    """Chat-completions client; `session` may be any object with a requests-style `post`"""

    def __init__(self, config: GatewayConfig, session=None, sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self.session = session if session is not None else requests.Session()
        self.sleep = sleep
        self.requests_sent = 0
        self._slots = threading.BoundedSemaphore(config.max_parallel_requests)
        self._count_lock = threading.Lock()

    @property
    def url(self) -> str:
        return self.config.endpoint_url.rstrip("/") + "/chat/completions"

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = self.config.api_key.get_secret_value()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _body(self, instruction: str, input: str) -> dict:
        return {
            "model": self.config.model_name,
            "messages": [{"role": "system", "content": instruction}, {"role": "user", "content": input}],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_output_tokens,
        }

    def _send_once(self, body: dict):
        with self._slots:
            with self._count_lock:
                self.requests_sent += 1
            return self.session.post(self.url, json=body, headers=self._headers(), timeout=self.config.request_timeout)

    def complete(self, instruction: str, input: str) -> CompletionResult:
        body = self._body(instruction, input)
        policy = self.config.retry_policy
        started = time.perf_counter()
        status = TransportStatus.SERVER_ERROR

        for attempt in range(policy.max_retries + 1):
            if attempt:
                delay = policy.backoff_base_seconds * (2 ** (attempt - 1))
                logger.debug(f"Retrying in {delay:.2f}s (attempt {attempt + 1}, last status {status.value})")
                self.sleep(delay)
            try:
                response = self._send_once(body)
            except requests.Timeout:
                return CompletionResult(None, TransportStatus.TIMEOUT, time.perf_counter() - started, attempts=attempt + 1)
            except requests.ConnectionError as e:
                logger.warning(f"⚠️ Connection to {self.url} failed: {type(e).__name__}")
                status = TransportStatus.SERVER_ERROR
                continue

            if response.status_code == 429:
                status = TransportStatus.RATE_LIMITED
                continue
            if response.status_code >= 500:
                status = TransportStatus.SERVER_ERROR
                continue
            if response.status_code != 200:
                logger.warning(f"⚠️ Endpoint answered HTTP {response.status_code}")
                return CompletionResult(None, TransportStatus.MALFORMED, time.perf_counter() - started, attempts=attempt + 1)
            return self._read(response, started, attempt + 1)

        logger.warning(f"⚠️ Giving up after {policy.max_retries + 1} attempts ({status.value})")
        return CompletionResult(None, status, time.perf_counter() - started, attempts=policy.max_retries + 1)

    def _read(self, response, started: float, attempts: int) -> CompletionResult:
        latency = time.perf_counter() - started
        try:
            payload = response.json()
            text = payload["choices"][0]["message"]["content"]
            if not isinstance(text, str):
                raise TypeError("content is not a string")
        except (ValueError, KeyError, IndexError, TypeError) as e:
            logger.warning(f"⚠️ Malformed completion payload: {e}")
            return CompletionResult(None, TransportStatus.MALFORMED, latency, attempts=attempts)
        usage = payload.get("usage") or {}
        counts = None
        if "prompt_tokens" in usage or "completion_tokens" in usage:
            counts = {"prompt": int(usage.get("prompt_tokens", 0)), "completion": int(usage.get("completion_tokens", 0))}
        return CompletionResult(text, TransportStatus.OK, latency, counts, attempts)


# -- offline mock --------------------------------------------------------------


def _describe(feature: str) -> str:
    if feature in FEATURE_INFO:
        return FEATURE_INFO[feature][0]
    return ENGINEERED_DESCRIPTIONS.get(feature, feature)


class MockVerdictBackend:
    """Deterministic, reentrant stand-in for a fine-tuned model, driven by a detector"""

    def __init__(self, detector: DetectorModel):
        self.detector = detector

    def complete(self, instruction: str, input: str) -> CompletionResult:
        text = self.answer(input)
        return CompletionResult(text, TransportStatus.OK, 0.0, _word_counts(instruction + " " + input, text))

    def answer(self, input: str) -> str:
        try:
            values = parse_record_text(input)
        except CodecError:
            values = None
        if values is not None:
            return verdict_text(classify(self.detector, values)["label"])

        kind = detect_explain_kind(input)
        records = find_records(input)
        if kind is PromptKind.EXPLAIN_REASONING and records:
            return self._reasoning(records[0])
        if kind is PromptKind.EXPLAIN_FEATURE_IMPORTANCE and records:
            return self._importance(records[0])
        if kind is PromptKind.EXPLAIN_PAIR_COMPARISON and len(records) >= 2:
            return self._comparison(records[0], records[1])
        return REFUSAL_TEXT

    def _ranked(self, values: np.ndarray, top: int = 3):
        contributions = feature_contributions(self.detector, values)
        return sorted(contributions.items(), key=lambda item: (-abs(item[1]), item[0]))[:top]

    def _reasoning(self, values: np.ndarray) -> str:
        scored = classify(self.detector, values)
        verdict = "malicious" if scored["label"] else "benign"
        lines = [
            f"The record scores {scored['probability']:.2f} on the attack scale against a threshold of "
            f"{self.detector.decision_threshold:.2f}, so it reads as {verdict}.",
            "The features that weigh most on that score:",
        ]
        for feature, weight in self._ranked(values):
            direction = "towards an attack" if weight > 0 else "towards normal traffic"
            lines.append(f"- {_describe(feature)}: {weight:+.2f}, pointing {direction}")
        return "\n".join(lines)

    def _importance(self, values: np.ndarray) -> str:
        feature, weight = self._ranked(values, top=1)[0]
        return f"The most important numerical feature is {_describe(feature)} (contribution {weight:+.2f})."

    def _comparison(self, benign: np.ndarray, malicious: np.ndarray) -> str:
        changed = [(name, b, m) for name, b, m in zip(RECORD_COLUMNS, benign, malicious) if b != m]
        if not changed:
            return "Both rows carry identical values; the attack left no visible trace in the rendered features."
        lines = [f"The rows differ in {len(changed)} of {len(benign)} features:"]
        for name, b, m in changed:
            lines.append(f"- {_describe(name)}: {b:.2f} -> {m:.2f}")
        flagged = [feature for feature, weight in self._ranked(malicious) if weight > 0]
        if flagged:
            lines.append("The strongest attack indicators in the second row: " + ", ".join(_describe(f) for f in flagged) + ".")
        return "\n".join(lines)


def make_backend(config: GatewayConfig, detector: Optional[DetectorModel] = None, session=None) -> ChatBackend:
    if config.backend == "mock":
        if detector is None:
            raise GatewayError("the mock backend needs a trained detector", code="no_detector")
        return MockVerdictBackend(detector)
    return RemoteChatBackend(config, session=session)


def complete(config: GatewayConfig, instruction: str, input: str, backend: Optional[ChatBackend] = None, detector: Optional[DetectorModel] = None) -> CompletionResult:
    """One completion through the configured backend"""
    backend = backend or make_backend(config, detector)
    return backend.complete(instruction, input)


# -- transcripts ---------------------------------------------------------------


def input_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class TranscriptStore:
    """Append-only JSON Lines transcript keyed by (run_id, record_index)"""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._lock = threading.Lock()

    def completed(self, run_id: str, digests: Optional[Mapping[int, str]] = None) -> Dict[int, dict]:
        """
        Answered entries of a run by record index. With `digests`, an entry
        only counts when its stored input digest matches the one for its index.
        """
        done: Dict[int, dict] = {}
        if not self.path.exists():
            return done
        with self.path.open("r", encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                try:
                    entry = json.loads(line)
                except json.JSONDecodeError:
                    # a torn final line from an interrupted run
                    continue
                if entry.get("run_id") != run_id or entry.get("transport_status") != TransportStatus.OK.value:
                    continue
                index = int(entry["record_index"])
                if digests is not None and entry.get("input_sha256") != digests.get(index):
                    continue
                done[index] = entry
        return done

    def append(self, entry: dict) -> None:
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as f:
                f.write(json.dumps(entry, ensure_ascii=False, sort_keys=True) + "\n")


# -- classification runs -------------------------------------------------------


@dataclass
class LlmEvaluation:
    verdicts: List[Verdict]
    labels: List[int]
    scored_predictions: List[int]
    statuses: List[TransportStatus]
    metrics: Metrics
    unparseable_count: int
    transport_failures: int
    resumed: int = 0
    completions: List[Optional[str]] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {
            "metrics": self.metrics.as_dict(),
            "unparseable_count": self.unparseable_count,
            "transport_failures": self.transport_failures,
            "support": len(self.labels),
        }


def classify_with_llm(
    config: GatewayConfig,
    testset: Sequence[LabeledSample],
    backend: Optional[ChatBackend] = None,
    detector: Optional[DetectorModel] = None,
    run_id: str = "run",
    transcript_path: Optional[Union[str, Path]] = None,
) -> LlmEvaluation:
    """
    Ask the model for a verdict on every test record and score the answers.

    Unparseable answers and transport failures count as wrong for both
    classes. Records already answered in the transcript under the same
    run_id and with the same rendered input are not queried again.
    """
    if not testset:
        raise GatewayError("test set is empty", code="empty_testset")
    backend = backend or make_backend(config, detector)
    if transcript_path is None and config.transcript_dir:
        transcript_path = Path(config.transcript_dir) / "classify.jsonl"
    store = TranscriptStore(transcript_path) if transcript_path else None
    prompts = [build_classify_prompt(sample) for sample in testset]
    digests = {index: input_digest(prompt["input"]) for index, prompt in enumerate(prompts)}
    done = store.completed(run_id, digests) if store else {}

    results: Dict[int, CompletionResult] = {
        index: CompletionResult(entry["text"], TransportStatus.OK, float(entry.get("latency", 0.0)), entry.get("token_counts"))
        for index, entry in done.items()
    }
    pending = [i for i in range(len(testset)) if i not in results]
    if results:
        logger.info(f"🔄 Resuming run '{run_id}': {len(results)} records already answered")

    def ask(index: int) -> None:
        prompt = prompts[index]
        result = backend.complete(prompt["instruction"], prompt["input"])
        results[index] = result
        if store:
            store.append(
                {
                    "run_id": run_id,
                    "record_index": index,
                    "kind": PromptKind.CLASSIFY.value,
                    "input": prompt["input"],
                    "input_sha256": digests[index],
                    "text": result.text,
                    "transport_status": result.transport_status.value,
                    "latency": result.latency,
                    "token_counts": result.token_counts,
                    "attempts": result.attempts,
                }
            )

    with ThreadPoolExecutor(max_workers=config.max_parallel_requests) as pool:
        list(pool.map(ask, pending))

    labels = [s.label for s in testset]
    statuses = [results[i].transport_status for i in range(len(testset))]
    completions = [results[i].text for i in range(len(testset))]
    verdicts = [parse_verdict(text) if text is not None else Verdict.UNPARSEABLE for text in completions]

    transport_failures = sum(status is not TransportStatus.OK for status in statuses)
    if transport_failures > config.abort_failure_fraction * len(testset):
        raise GatewayError(f"{transport_failures}/{len(testset)} requests failed in transport", code="too_many_transport_failures")
    unparseable = sum(v is Verdict.UNPARSEABLE and s is TransportStatus.OK for v, s in zip(verdicts, statuses))

    scored = [v.label if v.label is not None else 1 - truth for v, truth in zip(verdicts, labels)]
    metrics = compute_metrics(scored, labels)
    logger.info(f"✅ LLM verdicts: macro F1 {metrics.macro_f1:.3f}, {unparseable} unparseable, {transport_failures} transport failures")
    return LlmEvaluation(
        verdicts=verdicts,
        labels=labels,
        scored_predictions=scored,
        statuses=statuses,
        metrics=metrics,
        unparseable_count=unparseable,
        transport_failures=transport_failures,
        resumed=len(done),
        completions=completions,
    )


# -- explanations --------------------------------------------------------------


@dataclass(frozen=True)
class ExplanationTranscript:
    kind: str
    prompt: str
    response: Optional[str]
    transport_status: str
    model_name: str
    latency: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def explain_incident(
    config: GatewayConfig,
    kind: Union[PromptKind, str],
    bindings: Mapping[str, str],
    backend: Optional[ChatBackend] = None,
    detector: Optional[DetectorModel] = None,
) -> ExplanationTranscript:
    """Render an explanation prompt, complete it and keep prompt, answer and metadata together"""
    prompt = build_explain_prompt(kind, bindings)
    result = complete(config, EXPLAIN_SYSTEM_PROMPT, prompt, backend=backend, detector=detector)
    mock = isinstance(backend, MockVerdictBackend) or (backend is None and config.backend == "mock")
    model_name = "mock-verdict" if mock else config.model_name
    return ExplanationTranscript(
        kind=PromptKind(kind).value,
        prompt=prompt,
        response=result.text,
        transport_status=result.transport_status.value,
        model_name=model_name,
        latency=result.latency,
    )


def explain_all(
    config: GatewayConfig,
    benign_text: str,
    malicious_text: str,
    predicted: str,
    backend: Optional[ChatBackend] = None,
    detector: Optional[DetectorModel] = None,
) -> List[ExplanationTranscript]:
    """The three explanation prompts over one incident, in fixed order"""
    bindings = {
        PromptKind.EXPLAIN_REASONING: {"input": malicious_text, "result": predicted},
        PromptKind.EXPLAIN_FEATURE_IMPORTANCE: {"input": malicious_text},
        PromptKind.EXPLAIN_PAIR_COMPARISON: {"input1": benign_text, "input2": malicious_text},
    }
    return [explain_incident(config, kind, bindings[kind], backend=backend, detector=detector) for kind in EXPLAIN_KINDS]


def transcripts_to_markdown(transcripts: Sequence[ExplanationTranscript]) -> str:
    sections = ["# Incident explanations", ""]
    for transcript in transcripts:
        sections += [
            f"## {transcript.kind}",
            "",
            f"- model: `{transcript.model_name}`",
            f"- transport status: `{transcript.transport_status}`",
            "",
            "### Prompt",
            "",
            "```text",
            transcript.prompt,
            "```",
            "",
            "### Response",
            "",
            "```text",
            transcript.response if transcript.response is not None else "(no response)",
            "```",
            "",
        ]
    return "\n".join(sections)
