"""Query-focused instructional step captioning.

Generated captions and subtitles are merged into one time-ordered caption set,
handed to a chat service with a fixed prompt, and the reply is parsed into
validated, non-overlapping step captions.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, NamedTuple, Sequence, Union

from .clients import ChatClient
from .corpus import Corpus, GoldStepSet, MedicalQuestion, StepCaption, VideoRecord
from .errors import DataError, NothingToSummarize, NoValidSteps, UnparseableResponse

logger = logging.getLogger(__name__)

GENERATED = 'generated'
SUBTITLE = 'subtitle'
SOURCES = (GENERATED, SUBTITLE)

STEP_SYSTEM_PROMPT = "You segment medical instructional videos into steps."
STEP_PROMPT_FOOTER = "Return a JSON array of {start, end, step} covering the instructional answer."
REPROMPT_SUFFIX = "\n\nRespond only with a JSON array of objects with keys start, end, step."

# "2:05 - 3:10: Rinse thoroughly", optionally bulleted, HH:MM:SS accepted
FALLBACK_LINE_PATTERN = re.compile(
    r"^\s*(?:[-*•]\s+|\d+[.)]\s+)?"
    r"(\d{1,2}:\d{2}(?::\d{2})?(?:\.\d+)?)\s*[-–]\s*(\d{1,2}:\d{2}(?::\d{2})?(?:\.\d+)?)\s*:\s*(.+?)\s*$"
)
CLOCK_PATTERN = re.compile(r"^(?:(\d+):)?(\d{1,2}):(\d{2}(?:\.\d+)?)$")

# Predicted step sets share the gold-steps schema
StepSet = GoldStepSet


@dataclass(frozen=True)
class SourcedCaption(StepCaption):
    """A caption tagged with where it came from."""

    source: str = SUBTITLE

    def __post_init__(self):
        super().__post_init__()
        if self.source not in SOURCES:
            raise DataError(f"Unknown caption source '{self.source}'")


class DraftStep(NamedTuple):
    """An unvalidated step as proposed by a model."""

    start_s: float
    end_s: float
    text: str


def merge_captions(generated: Sequence[SourcedCaption], subtitles: Sequence[SourcedCaption]) -> list[SourcedCaption]:
    """Union of both caption lists in time order, exact duplicates collapsed.

    Sorted by (start, end, generated before subtitle); an entry repeating the
    start, end and text of an earlier one is dropped.
    """
    ordered = sorted(
        [*generated, *subtitles],
        key=lambda c: (c.start_s, c.end_s, SOURCES.index(c.source)),
    )
    merged = []
    seen = set()
    for caption in ordered:
        key = (caption.start_s, caption.end_s, caption.text)
        if key in seen:
            continue
        seen.add(key)
        merged.append(caption)
    return merged


def build_step_prompt(question: MedicalQuestion, merged: Sequence[SourcedCaption],
                      duration_s: float) -> tuple[str, str]:
    """Build the (system, user) prompt asking for step segmentation.

    Raises:
        NothingToSummarize: If there are no captions
    """
    if not merged:
        raise NothingToSummarize(f"No captions to summarize for question {question.query_id}")
    lines = [
        f"Question: {question.text}",
        f"Video duration: {duration_s:.3f} seconds",
        "Captions:",
        *(f"[{c.start_s:.3f}–{c.end_s:.3f}] ({c.source}) {c.text}" for c in merged),
        STEP_PROMPT_FOOTER,
    ]
    return STEP_SYSTEM_PROMPT, "\n".join(lines)


def _parse_time(value: Any) -> float:
    """Seconds from a number, a numeric string, or "MM:SS" / "H:MM:SS"."""
    if isinstance(value, bool):
        raise ValueError(f"not a time: {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        text = value.strip()
        match = CLOCK_PATTERN.match(text)
        if match:
            hours = int(match.group(1) or 0)
            return hours * 3600 + int(match.group(2)) * 60 + float(match.group(3))
        return float(text)
    raise ValueError(f"not a time: {value!r}")


def _find_json_array(raw: str, failures: list[str]) -> list[Any] | None:
    """First JSON array in the reply, trying each '[' in turn so bracketed prose is skipped."""
    decoder = json.JSONDecoder()
    error = None
    start = raw.find('[')
    while start != -1:
        try:
            data, _ = decoder.raw_decode(raw, start)
        except json.JSONDecodeError as e:
            error = error or e
        else:
            if isinstance(data, list):
                return data
        start = raw.find('[', start + 1)
    if error is not None:
        failures.append(f"JSON array: {error.msg}")
    return None


def _parse_json_steps(raw: str, failures: list[str]) -> list[StepCaption]:
    data = _find_json_array(raw, failures)
    if data is None:
        return []

    steps = []
    for i, item in enumerate(data, start=1):
        try:
            if not isinstance(item, dict):
                raise ValueError("not an object")
            steps.append(StepCaption(_parse_time(item['start']), _parse_time(item['end']), str(item['step']).strip()))
        except KeyError as e:
            failures.append(f"entry {i}: missing key {e}")
        except (ValueError, DataError) as e:
            failures.append(f"entry {i}: {e}")
    return steps


def _parse_line_steps(raw: str, failures: list[str]) -> list[StepCaption]:
    steps = []
    for line_no, line in enumerate(raw.splitlines(), start=1):
        match = FALLBACK_LINE_PATTERN.match(line)
        if not match:
            continue
        try:
            steps.append(StepCaption(_parse_time(match.group(1)), _parse_time(match.group(2)), match.group(3)))
        except (ValueError, DataError) as e:
            failures.append(f"line {line_no}: {e}")
    return steps


def parse_step_response(raw: str) -> list[StepCaption]:
    """Parse a model reply into step captions, in reply order.

    The JSON array of {start, end, step} objects is tried first (prose or code
    fences around it are ignored); lines of the form "MM:SS - MM:SS: text" are
    the fallback. Bad entries are skipped and reported.

    Raises:
        UnparseableResponse: If no entry could be parsed
    """
    failures: list[str] = []
    steps = _parse_json_steps(raw, failures)
    if not steps:
        steps = _parse_line_steps(raw, failures)
    if not steps:
        raise UnparseableResponse(raw, failures)
    for failure in failures:
        logger.warning("Skipped step: %s", failure)
    return steps


def serialize_steps(steps: Sequence[StepCaption]) -> str:
    """Canonical JSON array text accepted by parse_step_response."""
    return json.dumps(
        [{'start': s.start_s, 'end': s.end_s, 'step': s.text} for s in steps],
        ensure_ascii=False,
        indent=2,
    )


def validate_steps(steps: Sequence[Union[StepCaption, DraftStep]], duration_s: float) -> list[StepCaption]:
    """Make steps sorted, non-overlapping and inside [0, duration_s].

    Ends are clamped to the duration and a step overlapping its predecessor
    starts where that one ends. Steps left empty are dropped.

    Raises:
        NoValidSteps: If every step was dropped
    """
    if not duration_s > 0:
        raise DataError(f"Video duration must be positive, got {duration_s}")

    kept: list[StepCaption] = []
    for step in sorted(steps, key=lambda s: s.start_s):
        start = max(0.0, float(step.start_s))
        end = min(float(step.end_s), duration_s)
        if kept and start < kept[-1].end_s:
            start = kept[-1].end_s
        text = step.text.strip()
        if start >= end or not text:
            logger.debug("Dropping step [%s, %s] %r", step.start_s, step.end_s, step.text)
            continue
        kept.append(StepCaption(start, end, text))

    if not kept:
        raise NoValidSteps("Every proposed step was empty or outside the video")
    return kept


def video_captions(video: VideoRecord) -> tuple[list[SourcedCaption], list[SourcedCaption]]:
    """Generated captions and subtitles of a video as sourced captions."""
    generated = [SourcedCaption(c.start_s, c.end_s, c.text, GENERATED) for c in video.captions]
    subtitles = [SourcedCaption(s.start_s, s.end_s, s.text, SUBTITLE) for s in video.segments]
    return generated, subtitles


def run_qfisc(video: VideoRecord, question: MedicalQuestion, chat: ChatClient) -> list[StepCaption]:
    """Merge captions, prompt for steps, parse and validate.

    An unparseable reply gets one re-prompt with a format reminder.

    Raises:
        NothingToSummarize: If the video has neither subtitles nor generated captions
        UnparseableResponse: If the re-prompted reply is still unparseable
    """
    merged = merge_captions(*video_captions(video))
    system, user = build_step_prompt(question, merged, video.duration_s)

    reply = chat.complete_chat(system, user)
    try:
        steps = parse_step_response(reply)
    except UnparseableResponse:
        logger.warning("Unparseable step reply for (%s, %s); re-prompting", question.query_id, video.video_id)
        steps = parse_step_response(chat.complete_chat(system, user + REPROMPT_SUFFIX))
    return validate_steps(steps, video.duration_s)


def caption_steps(
    corpus: Corpus,
    questions: Sequence[MedicalQuestion],
    keys: Sequence[tuple[str, str]],
    chat: ChatClient,
    workers: int = 1,
) -> list[StepSet]:
    """Run QFISC for every (query_id, video_id) key, keeping key order.

    A pair whose reply stays unparseable (or yields no valid step) is logged and omitted.
    """
    by_qid = {q.query_id: q for q in questions}
    jobs = []
    for qid, vid in keys:
        if qid not in by_qid:
            raise DataError(f"Step key ({qid}, {vid}) names an unknown question")
        try:
            jobs.append((by_qid[qid], corpus.get(vid)))
        except KeyError:
            raise DataError(f"Step key ({qid}, {vid}) names a video missing from the corpus")

    def one(job: tuple[MedicalQuestion, VideoRecord]) -> StepSet | None:
        q, video = job
        try:
            steps = run_qfisc(video, q, chat)
        except (UnparseableResponse, NoValidSteps) as e:
            logger.error("Skipping (%s, %s): %s", q.query_id, video.video_id, e)
            return None
        return StepSet(q.query_id, video.video_id, tuple(steps))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return [s for s in pool.map(one, jobs) if s is not None]
