"""
Text bridge between telemetry records and language-model prompts.

Records are rendered one feature per line as
``<description> (<unit>): <value>`` in record column order, values at fixed
2-decimal resolution. The renderer is versioned; `parse_record_text` is its
strict inverse.
"""

import json
import logging
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

from src.core.adversary import BENIGN, MALICIOUS, LabeledSample
from src.core.errors import CodecError
from src.core.features import FEATURE_INFO, RECORD_COLUMNS, format_value
from src.core.signal_emulator import ChannelRecord

logger = logging.getLogger(__name__)

TEMPLATE_VERSION = "1"

CLASSIFY_PROMPT = (
    "Some wireless network state records were compromised by an adversarial attack: values were changed so that "
    "the predicted signal pathloss value was incorrect. Based on the information provided about numerical features "
    "of a wireless signal, give answer if network traffic either (Benign) or (Malicious) and write your answer in "
    "round brackets"
)

# system message for explanation queries; the rendered explanation prompt is the user turn
EXPLAIN_SYSTEM_PROMPT = (
    "You are a wireless network security analyst. The records you are shown describe the dominant propagation path "
    "of a wireless signal, one numerical feature per line. Answer the question in plain prose."
)

BENIGN_OUTPUT = "(Benign)"
MALICIOUS_OUTPUT = "(Malicious)"

SFT_KEYS = ("instruction", "input", "output")

RecordLike = Union[ChannelRecord, LabeledSample, Sequence[float], np.ndarray]


class PromptKind(Enum):
    CLASSIFY = "classify"
    EXPLAIN_REASONING = "explain_reasoning"
    EXPLAIN_FEATURE_IMPORTANCE = "explain_feature_importance"
    EXPLAIN_PAIR_COMPARISON = "explain_pair_comparison"


class Verdict(Enum):
    BENIGN = "Benign"
    MALICIOUS = "Malicious"
    UNPARSEABLE = "Unparseable"

    @property
    def label(self) -> Optional[int]:
        return {Verdict.BENIGN: BENIGN, Verdict.MALICIOUS: MALICIOUS}.get(self)


_PLACEHOLDER = re.compile(r"\{(input|result|input1|input2)\}")


@dataclass(frozen=True)
class PromptTemplate:
    kind: PromptKind
    text: str

    @property
    def placeholders(self) -> List[str]:
        return list(dict.fromkeys(_PLACEHOLDER.findall(self.text)))

    def render(self, bindings: Mapping[str, str]) -> str:
        missing = [name for name in self.placeholders if name not in bindings]
        if missing:
            raise CodecError(f"{self.kind.value} prompt is missing bindings {missing}", code="missing_binding")
        # single pass so bound values are never re-scanned for placeholders
        return _PLACEHOLDER.sub(lambda m: str(bindings[m.group(1)]), self.text)


TEMPLATES: Dict[PromptKind, PromptTemplate] = {
    PromptKind.CLASSIFY: PromptTemplate(PromptKind.CLASSIFY, CLASSIFY_PROMPT),
    PromptKind.EXPLAIN_REASONING: PromptTemplate(
        PromptKind.EXPLAIN_REASONING,
        "Based on {input} info you predicted {result}. Please write your chain of thoughts and reasoning for such an answer.",
    ),
    PromptKind.EXPLAIN_FEATURE_IMPORTANCE: PromptTemplate(
        PromptKind.EXPLAIN_FEATURE_IMPORTANCE,
        "What is the most important numerical feature of {input} in determining malicious intent?",
    ),
    PromptKind.EXPLAIN_PAIR_COMPARISON: PromptTemplate(
        PromptKind.EXPLAIN_PAIR_COMPARISON,
        "Here is an example of a row of (Benign) traffic data {input1} and here is an example of a row of (Malicious) "
        "traffic data {input2}. Analyze both examples and write your thoughts on how adversarial attack affected data.",
    ),
}

EXPLAIN_KINDS = (PromptKind.EXPLAIN_REASONING, PromptKind.EXPLAIN_FEATURE_IMPORTANCE, PromptKind.EXPLAIN_PAIR_COMPARISON)


@dataclass(frozen=True)
class SftExample:
    instruction: str
    input: str
    output: str

    def __post_init__(self):
        if self.output not in (BENIGN_OUTPUT, MALICIOUS_OUTPUT):
            raise CodecError(f"output must be {BENIGN_OUTPUT} or {MALICIOUS_OUTPUT}, got {self.output!r}", code="invalid_output")

    def as_dict(self) -> Dict[str, str]:
        return {"instruction": self.instruction, "input": self.input, "output": self.output}


# -- records <-> text ----------------------------------------------------------


def _line_prefix(column: str) -> str:
    description, unit = FEATURE_INFO[column]
    return f"{description} ({unit}): " if unit else f"{description}: "


_LINE_PREFIXES = [_line_prefix(c) for c in RECORD_COLUMNS]
_VALUE = re.compile(r"-?\d+\.\d{2}")
_EMBEDDED_RECORD = re.compile("\n".join(re.escape(prefix) + _VALUE.pattern for prefix in _LINE_PREFIXES))


def _record_values(record: RecordLike) -> np.ndarray:
    if isinstance(record, (ChannelRecord, LabeledSample)):
        return record.record_values() if isinstance(record, LabeledSample) else record.values()
    values = np.asarray(record, dtype=float).ravel()
    if values.shape[0] != len(RECORD_COLUMNS):
        raise CodecError(f"expected {len(RECORD_COLUMNS)} record values, got {values.shape[0]}", code="wrong_dimension")
    return values


def serialize_record(record: RecordLike) -> str:
    values = _record_values(record)
    return "\n".join(prefix + format_value(v) for prefix, v in zip(_LINE_PREFIXES, values))


def parse_record_text(text: str) -> np.ndarray:
    """Recover the 12 values from `serialize_record` output; anything else is rejected"""
    lines = text.strip("\n").split("\n")
    if len(lines) != len(RECORD_COLUMNS):
        raise CodecError(f"expected {len(RECORD_COLUMNS)} lines, got {len(lines)}", code="not_a_record")
    values = []
    for prefix, line in zip(_LINE_PREFIXES, lines):
        if not line.startswith(prefix) or not _VALUE.fullmatch(line[len(prefix) :]):
            raise CodecError(f"line does not match the record template: {line[:80]!r}", code="not_a_record")
        values.append(float(line[len(prefix) :]))
    return np.array(values)


def find_records(text: str) -> List[np.ndarray]:
    """Every complete rendered record embedded in a longer prompt, in order"""
    return [parse_record_text(m.group(0)) for m in _EMBEDDED_RECORD.finditer(text)]


# -- prompts -------------------------------------------------------------------


def build_classify_prompt(record: RecordLike) -> Dict[str, str]:
    return {"instruction": CLASSIFY_PROMPT, "input": serialize_record(record)}


def build_explain_prompt(kind: Union[PromptKind, str], bindings: Mapping[str, str]) -> str:
    try:
        kind = PromptKind(kind)
    except ValueError as e:
        raise CodecError(f"unknown prompt kind {kind!r}", code="unknown_kind") from e
    if kind not in EXPLAIN_KINDS:
        raise CodecError(f"{kind.value} is not an explanation prompt", code="unknown_kind")
    return TEMPLATES[kind].render(bindings)


def detect_explain_kind(text: str) -> Optional[PromptKind]:
    """Which explanation template produced `text`, judged by its fixed wording"""
    for kind in EXPLAIN_KINDS:
        head, *rest = _PLACEHOLDER.split(TEMPLATES[kind].text)
        tail = rest[-1] if rest else ""
        if text.startswith(head) and text.endswith(tail):
            return kind
    return None


def parse_verdict(completion: str) -> Verdict:
    """Exactly one of "(benign)" / "(malicious)", case-insensitive; otherwise Unparseable"""
    folded = (completion or "").casefold()
    benign = BENIGN_OUTPUT.casefold() in folded
    malicious = MALICIOUS_OUTPUT.casefold() in folded
    if benign == malicious:
        return Verdict.UNPARSEABLE
    return Verdict.BENIGN if benign else Verdict.MALICIOUS


def verdict_text(label: int) -> str:
    return MALICIOUS_OUTPUT if label == MALICIOUS else BENIGN_OUTPUT


# -- SFT datasets --------------------------------------------------------------


def build_sft_dataset(samples: Iterable[LabeledSample]) -> List[SftExample]:
    return [SftExample(instruction=CLASSIFY_PROMPT, input=serialize_record(s), output=verdict_text(s.label)) for s in samples]


def export_sft_jsonl(examples: Sequence[SftExample], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        for example in examples:
            f.write(json.dumps(example.as_dict(), ensure_ascii=False) + "\n")
    logger.info(f"✅ Wrote {len(examples)} SFT examples to {path}")
    return path


def read_sft_jsonl(path: Union[str, Path]) -> List[SftExample]:
    examples = []
    with Path(path).open("r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise CodecError(f"{path}:{number}: invalid JSON: {e}", code="bad_sft_line") from e
            if not isinstance(row, dict) or tuple(sorted(row)) != tuple(sorted(SFT_KEYS)):
                raise CodecError(f"{path}:{number}: expected keys {list(SFT_KEYS)}", code="bad_sft_line")
            examples.append(SftExample(**row))
    return examples
