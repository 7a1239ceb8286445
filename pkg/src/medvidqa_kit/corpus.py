"""Corpus data model: videos, transcripts, topics, qrels and gold steps."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, NamedTuple

from .errors import DataError, DuplicateJudgment, EmptyTranscript, MalformedCue, ParseError

logger = logging.getLogger(__name__)

# Times are stored in seconds with millisecond resolution and compared with this tolerance
TIME_EPS = 1e-6


def tokenize(text: str) -> list[str]:
    """Lowercase Unicode-whitespace tokenization shared by retrieval stubs and lookup tables.

    Args:
        text: Text to tokenize

    Returns:
        Non-empty lowercase tokens in order
    """
    return text.lower().split()


def to_millis(seconds: float) -> int:
    return int(round(seconds * 1000))


@dataclass(frozen=True)
class TimeSpan:
    """A half-open interval on the video timeline, in seconds."""

    start_s: float
    end_s: float

    def __post_init__(self):
        if not (0 <= self.start_s < self.end_s):
            raise DataError(f"Invalid time span [{self.start_s}, {self.end_s}]")

    @property
    def duration(self) -> float:
        return self.end_s - self.start_s


@dataclass(frozen=True)
class StepCaption:
    """One instructional step: a time range and its caption."""

    start_s: float
    end_s: float
    text: str

    def __post_init__(self):
        if not (0 <= self.start_s < self.end_s):
            raise DataError(f"Invalid step interval [{self.start_s}, {self.end_s}]")
        if not self.text.strip():
            raise DataError("Step caption text is empty")

    @property
    def span(self) -> TimeSpan:
        return TimeSpan(self.start_s, self.end_s)


@dataclass(frozen=True)
class TranscriptSegment:
    """A single subtitle cue with timing information."""

    index: int
    start_s: float
    end_s: float
    text: str

    def __post_init__(self):
        if self.start_s < 0:
            raise MalformedCue(f"Cue {self.index}: negative start time {self.start_s}")
        if not self.start_s < self.end_s:
            raise MalformedCue(
                f"Cue {self.index}: start {self.start_s} is not before end {self.end_s}"
            )
        if not self.text.strip():
            raise MalformedCue(f"Cue {self.index}: empty text")

    @property
    def tokens(self) -> list[str]:
        return tokenize(self.text)


@dataclass(frozen=True)
class VideoRecord:
    """A video's identity, duration and timestamped transcript."""

    video_id: str
    duration_s: float
    segments: tuple[TranscriptSegment, ...]
    frame_features_path: Path | None = None
    captions: tuple[TranscriptSegment, ...] = ()

    def __post_init__(self):
        starts = [seg.start_s for seg in self.segments]
        if starts != sorted(starts):
            raise DataError(f"Video {self.video_id}: segments are not sorted by start time")
        if self.segments:
            last_end = max(seg.end_s for seg in self.segments)
            if self.duration_s + TIME_EPS < last_end:
                raise DataError(
                    f"Video {self.video_id}: duration {self.duration_s} shorter than "
                    f"last cue end {last_end}"
                )
        if self.duration_s <= 0:
            raise DataError(f"Video {self.video_id}: duration must be positive")


@dataclass(frozen=True)
class MedicalQuestion:
    query_id: str
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise DataError(f"Question {self.query_id} has empty text")


@dataclass(frozen=True)
class QrelEntry:
    """A relevance judgment; relevance 0 means explicitly non-relevant."""

    query_id: str
    video_id: str
    relevance: int
    gold_span: TimeSpan | None = None


@dataclass(frozen=True)
class GoldStepSet:
    query_id: str
    video_id: str
    steps: tuple[StepCaption, ...]

    @property
    def key(self) -> tuple[str, str]:
        return (self.query_id, self.video_id)


@dataclass(frozen=True)
class Corpus:
    """An immutable, video_id-ordered collection of videos."""

    videos: tuple[VideoRecord, ...] = field(default_factory=tuple)

    def __post_init__(self):
        ids = [v.video_id for v in self.videos]
        if len(ids) != len(set(ids)):
            raise DataError("Duplicate video_id in corpus")

    def get(self, video_id: str) -> VideoRecord:
        for video in self.videos:
            if video.video_id == video_id:
                return video
        raise KeyError(video_id)

    def __len__(self) -> int:
        return len(self.videos)

    def __iter__(self):
        return iter(self.videos)


class TokenRange(NamedTuple):
    """Inclusive token index range owned by one segment."""

    segment_index: int
    start_tok: int
    end_tok: int


def transcript_text(video: VideoRecord) -> tuple[str, list[TokenRange]]:
    """Join a video's transcript and record which tokens each segment owns.

    Args:
        video: Video with at least one segment

    Returns:
        Tuple of (segment texts joined by single spaces, per-segment token ranges)

    Raises:
        EmptyTranscript: If the video has no segments
    """
    if not video.segments:
        raise EmptyTranscript(f"Video {video.video_id} has no transcript segments")

    offsets = []
    position = 0
    for i, seg in enumerate(video.segments):
        count = len(seg.tokens)
        offsets.append(TokenRange(i, position, position + count - 1))
        position += count

    full_text = " ".join(seg.text for seg in video.segments)
    return full_text, offsets


def read_json_file(path: Path, what: str) -> Any:
    """Load a JSON input file.

    Raises:
        ParseError: On invalid JSON (carries the line number)
        DataError: If the file is not UTF-8
    """
    try:
        with open(path, 'r', encoding='utf-8-sig') as f:
            return json.load(f)
    except UnicodeDecodeError as e:
        raise DataError(f"{path}: {what} file is not valid UTF-8 ({e.reason} at byte {e.start})") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"Invalid JSON in {what} file: {e.msg}", e.lineno, path) from e


def _read_json_array(path: Path, what: str) -> list[Any]:
    data = read_json_file(path, what)
    if not isinstance(data, list):
        raise DataError(f"{path}: {what} file must hold a JSON array")
    return data


def load_topics(path: Path) -> list[MedicalQuestion]:
    """Load topics from a JSON array of {"qid", "question"} objects, preserving file order."""
    questions = []
    seen = set()
    for i, item in enumerate(_read_json_array(path, "topics")):
        if not isinstance(item, dict) or 'qid' not in item or 'question' not in item:
            raise DataError(f"{path}: topic #{i + 1} must have 'qid' and 'question'")
        qid = str(item['qid'])
        if qid in seen:
            raise DataError(f"{path}: duplicate topic {qid}")
        seen.add(qid)
        questions.append(MedicalQuestion(qid, str(item['question'])))
    logger.debug("Loaded %d topics from %s", len(questions), path)
    return questions


def parse_qrels(lines: Iterable[str], path: Path | None = None) -> list[QrelEntry]:
    """Parse qrels lines "query_id 0 video_id relevance [start_s end_s]".

    Blank lines and lines starting with '#' are skipped.

    Raises:
        ParseError: On an unparseable line (carries the line number)
        DuplicateJudgment: On a repeated (query_id, video_id) pair
    """
    entries = []
    seen: set[tuple[str, str]] = set()
    for line_no, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith('#'):
            continue
        fields = stripped.split()
        if len(fields) not in (4, 6):
            raise ParseError(f"expected 4 or 6 fields, got {len(fields)}", line_no, path)
        qid, _, vid, rel = fields[:4]
        try:
            relevance = int(rel)
        except ValueError:
            raise ParseError(f"relevance must be an integer: {rel!r}", line_no, path)
        if relevance < 0:
            raise ParseError(f"relevance must be >= 0: {relevance}", line_no, path)
        span = None
        if len(fields) == 6:
            try:
                span = TimeSpan(float(fields[4]), float(fields[5]))
            except ValueError as e:
                raise ParseError(f"bad answer span: {e}", line_no, path)
        if (qid, vid) in seen:
            raise DuplicateJudgment(f"Duplicate judgment for ({qid}, {vid}) at line {line_no}")
        seen.add((qid, vid))
        entries.append(QrelEntry(qid, vid, relevance, span))
    return entries


def load_qrels(path: Path) -> list[QrelEntry]:
    try:
        with open(path, 'r', encoding='utf-8-sig') as f:
            return parse_qrels(f, path)
    except UnicodeDecodeError as e:
        raise DataError(f"{path}: qrels file is not valid UTF-8 ({e.reason} at byte {e.start})") from e


def _step_from_json(obj: Any) -> StepCaption:
    if not isinstance(obj, dict):
        raise DataError(f"Step must be an object, got {type(obj).__name__}")
    try:
        return StepCaption(float(obj['start']), float(obj['end']), str(obj['step']))
    except KeyError as e:
        raise DataError(f"Step is missing key {e}") from e
    except (TypeError, ValueError) as e:
        raise DataError(f"Bad step {obj!r}: {e}") from e


def step_sets_from_json(data: list[Any], source: object = None) -> list[GoldStepSet]:
    """Build step sets from the shared {"qid", "vid", "steps"} schema."""
    sets = []
    seen = set()
    for i, item in enumerate(data):
        if not isinstance(item, dict) or not {'qid', 'vid', 'steps'} <= set(item):
            raise DataError(f"{source}: entry #{i + 1} must have 'qid', 'vid' and 'steps'")
        key = (str(item['qid']), str(item['vid']))
        if key in seen:
            raise DataError(f"{source}: duplicate step set for {key}")
        seen.add(key)
        steps = sorted((_step_from_json(s) for s in item['steps']), key=lambda s: s.start_s)
        sets.append(GoldStepSet(key[0], key[1], tuple(steps)))
    return sets


def step_sets_to_json(sets: Iterable[GoldStepSet]) -> list[dict[str, Any]]:
    return [
        {
            'qid': s.query_id,
            'vid': s.video_id,
            'steps': [{'start': st.start_s, 'end': st.end_s, 'step': st.text} for st in s.steps],
        }
        for s in sets
    ]


def load_gold_steps(path: Path) -> list[GoldStepSet]:
    return step_sets_from_json(_read_json_array(path, "gold steps"), path)


def _segments_to_json(segments: Iterable[TranscriptSegment]) -> list[dict[str, Any]]:
    return [
        {'index': s.index, 'start': s.start_s, 'end': s.end_s, 'text': s.text}
        for s in segments
    ]


def _segments_from_json(items: list[dict[str, Any]]) -> tuple[TranscriptSegment, ...]:
    return tuple(
        TranscriptSegment(int(s['index']), float(s['start']), float(s['end']), str(s['text']))
        for s in items
    )


def _features_to_json(path: Path | None, root: Path | None) -> str | None:
    if path is None:
        return None
    if root is not None and path.is_absolute():
        try:
            path = path.relative_to(Path(root).resolve())
        except ValueError:
            raise DataError(f"Frame features {path} lie outside the corpus directory {root}")
    return path.as_posix()


def corpus_to_json(corpus: Corpus, root: Path | None = None) -> dict[str, Any]:
    """Serialize a corpus to the ingest artifact schema.

    Feature paths are stored as posix strings, relative to ``root`` when given,
    so the artifact does not depend on where the corpus directory lives.
    """
    return {
        'videos': [
            {
                'vid': v.video_id,
                'duration': v.duration_s,
                'features': _features_to_json(v.frame_features_path, root),
                'segments': _segments_to_json(v.segments),
                'captions': _segments_to_json(v.captions),
            }
            for v in corpus.videos
        ]
    }


def corpus_from_json(data: dict[str, Any], root: Path | None = None) -> Corpus:
    """Inverse of corpus_to_json; relative feature paths are resolved against ``root``."""
    videos = []
    for item in data['videos']:
        features = Path(item['features']) if item.get('features') else None
        if features is not None and root is not None and not features.is_absolute():
            features = Path(root) / features
        videos.append(VideoRecord(
            video_id=item['vid'],
            duration_s=float(item['duration']),
            segments=_segments_from_json(item['segments']),
            frame_features_path=features,
            captions=_segments_from_json(item.get('captions', [])),
        ))
    return Corpus(tuple(videos))
