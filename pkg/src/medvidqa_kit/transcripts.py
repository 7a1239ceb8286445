"""Transcript file processors: SRT, WebVTT and yt-json parsing, serialization and corpus discovery."""

from __future__ import annotations

import json
import logging
import re
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, List

from .cleaning import clean_text
from .corpus import Corpus, TranscriptSegment, VideoRecord, read_json_file, to_millis
from .errors import DataError, MalformedCue

if TYPE_CHECKING:
    from .config import RuleConfig

logger = logging.getLogger(__name__)

FORMATS = ('srt', 'vtt', 'yt-json')
SUFFIX_FORMATS = {'.srt': 'srt', '.vtt': 'vtt', '.json': 'yt-json'}
FEATURE_SUFFIX = '.feat'

# [HH:]MM:SS,mmm (SRT) and [HH:]MM:SS.mmm (WebVTT)
SRT_TIME_PATTERN = re.compile(r"^(?:(\d+):)?(\d{1,2}):(\d{2}),(\d{3})$")
VTT_TIME_PATTERN = re.compile(r"^(?:(\d+):)?(\d{1,2}):(\d{2})\.(\d{3})$")
TIMING_PATTERN = re.compile(r"^\s*(\S+?)\s*-->\s*(\S+)(?:\s+.*)?$")
VTT_HEADER_PATTERN = re.compile(r"^WEBVTT(?:[ \t].*)?$")
BLANK_LINE_PATTERN = re.compile(r"\n[ \t]*\n")


def validate_safe_path(file_path: Path, base_dir: Path | None = None) -> Path:
    """Validate that a file path doesn't escape its base directory.

    Args:
        file_path: Path to validate
        base_dir: Optional base directory to restrict paths within

    Returns:
        Resolved absolute path

    Raises:
        DataError: If the resolved path lies outside base_dir
    """
    resolved = file_path.resolve()

    if base_dir:
        base_resolved = base_dir.resolve()
        try:
            resolved.relative_to(base_resolved)
        except ValueError:
            raise DataError(
                f"Path '{file_path}' resolves outside the corpus directory '{base_dir}'"
            )

    return resolved


def _parse_timestamp(raw: str, pattern: re.Pattern[str], line_no: int) -> int:
    """Parse a cue timestamp into integer milliseconds."""
    match = pattern.match(raw)
    if not match:
        raise MalformedCue(f"line {line_no}: malformed timestamp {raw!r}")
    hours, minutes, seconds, millis = match.groups()
    minutes_i, seconds_i = int(minutes), int(seconds)
    if seconds_i >= 60 or minutes_i >= 60:
        raise MalformedCue(f"line {line_no}: timestamp out of range {raw!r}")
    return ((int(hours or 0) * 60 + minutes_i) * 60 + seconds_i) * 1000 + int(millis)


def _format_timestamp(seconds: float, separator: str) -> str:
    ms = to_millis(seconds)
    hours, rest = divmod(ms, 3_600_000)
    minutes, rest = divmod(rest, 60_000)
    secs, millis = divmod(rest, 1000)
    return f"{hours:02d}:{minutes:02d}:{secs:02d}{separator}{millis:03d}"


def _finish(cues: list[tuple[int, int, str]], config: RuleConfig | None) -> list[TranscriptSegment]:
    """Clean cue text, drop empty cues, stable-sort by start and number from 1."""
    kept = []
    for start_ms, end_ms, text in cues:
        cleaned = clean_text(text, config)
        if cleaned:
            kept.append((start_ms, end_ms, cleaned))
    kept.sort(key=lambda cue: cue[0])
    return [
        TranscriptSegment(i, start_ms / 1000, end_ms / 1000, text)
        for i, (start_ms, end_ms, text) in enumerate(kept, start=1)
    ]


def _split_blocks(text: str) -> list[tuple[int, list[str]]]:
    """Split normalized text into blank-line separated blocks with their first line number."""
    blocks = []
    chunk_start = 1
    for chunk in BLANK_LINE_PATTERN.split(text):
        lines = [ln.rstrip() for ln in chunk.split('\n')]
        first = 0
        # Extra blank lines belong to the separator run
        while first < len(lines) and not lines[first]:
            first += 1
        while lines and not lines[-1]:
            lines.pop()
        if first < len(lines):
            blocks.append((chunk_start + first, lines[first:]))
        chunk_start += chunk.count('\n') + 2
    return blocks


def _check_cue(start_ms: int, end_ms: int, line_no: int) -> None:
    if start_ms >= end_ms:
        raise MalformedCue(
            f"line {line_no}: cue start {start_ms / 1000:.3f}s is not before end {end_ms / 1000:.3f}s"
        )


class SrtParser:
    """Parser for SubRip (.srt) subtitles."""

    format = 'srt'

    def parse(self, text: str, config: RuleConfig | None = None) -> list[TranscriptSegment]:
        """Parse SRT content.

        Cue numbers are optional; timing lines use comma millisecond separators.

        Args:
            text: Decoded SRT content
            config: Optional cleaning rule configuration

        Returns:
            Segments sorted by start time

        Raises:
            MalformedCue: On a malformed timestamp, a block without a timing line, or start >= end
        """
        cues = []
        for line_no, lines in _split_blocks(text):
            timing_idx = 1 if len(lines) > 1 and lines[0].strip().isdigit() else 0
            timing = TIMING_PATTERN.match(lines[timing_idx]) if timing_idx < len(lines) else None
            if not timing or '-->' not in lines[timing_idx]:
                raise MalformedCue(f"line {line_no}: block has no timing line")
            timing_line = line_no + timing_idx
            start_ms = _parse_timestamp(timing.group(1), SRT_TIME_PATTERN, timing_line)
            end_ms = _parse_timestamp(timing.group(2), SRT_TIME_PATTERN, timing_line)
            _check_cue(start_ms, end_ms, timing_line)
            cues.append((start_ms, end_ms, '\n'.join(lines[timing_idx + 1:])))
        return _finish(cues, config)


class VttParser:
    """Parser for WebVTT (.vtt) subtitles."""

    format = 'vtt'

    def parse(self, text: str, config: RuleConfig | None = None) -> list[TranscriptSegment]:
        """Parse WebVTT content.

        Skips the header block and NOTE, STYLE and REGION blocks; cue identifiers and
        cue settings are accepted and ignored.

        Raises:
            MalformedCue: On a missing WEBVTT header, malformed timestamp, or start >= end
        """
        first_line = text.split('\n', 1)[0]
        if not VTT_HEADER_PATTERN.match(first_line):
            raise MalformedCue("line 1: missing WEBVTT header")

        cues = []
        for line_no, lines in _split_blocks(text)[1:]:
            head = lines[0].split(maxsplit=1)[0] if lines[0].split() else ''
            if head in ('NOTE', 'STYLE', 'REGION') and '-->' not in lines[0]:
                continue
            timing_idx = 0 if '-->' in lines[0] else 1
            if timing_idx >= len(lines) or '-->' not in lines[timing_idx]:
                raise MalformedCue(f"line {line_no}: block has no timing line")
            timing = TIMING_PATTERN.match(lines[timing_idx])
            timing_line = line_no + timing_idx
            if not timing:
                raise MalformedCue(f"line {timing_line}: malformed timing line")
            start_ms = _parse_timestamp(timing.group(1), VTT_TIME_PATTERN, timing_line)
            end_ms = _parse_timestamp(timing.group(2), VTT_TIME_PATTERN, timing_line)
            _check_cue(start_ms, end_ms, timing_line)
            cues.append((start_ms, end_ms, '\n'.join(lines[timing_idx + 1:])))
        return _finish(cues, config)


class YtJsonParser:
    """Parser for YouTube-style transcript JSON: [{"text", "start", "duration"}, ...]."""

    format = 'yt-json'

    def parse(self, text: str, config: RuleConfig | None = None) -> list[TranscriptSegment]:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise MalformedCue(f"line {e.lineno}: invalid JSON: {e.msg}") from e
        if not isinstance(data, list):
            raise DataError("yt-json transcript must be a JSON array")

        cues = []
        for i, entry in enumerate(data, start=1):
            if not isinstance(entry, dict):
                raise MalformedCue(f"entry {i}: expected an object")
            try:
                start_ms = to_millis(float(entry['start']))
                duration_ms = to_millis(float(entry['duration']))
                cue_text = str(entry['text'])
            except KeyError as e:
                raise MalformedCue(f"entry {i}: missing key {e}") from e
            except (TypeError, ValueError) as e:
                raise MalformedCue(f"entry {i}: {e}") from e
            if start_ms < 0:
                raise MalformedCue(f"entry {i}: negative start")
            if duration_ms <= 0:
                raise MalformedCue(f"entry {i}: start is not before end (duration {duration_ms}ms)")
            cues.append((start_ms, start_ms + duration_ms, cue_text))
        return _finish(cues, config)


PARSERS = {
    'srt': SrtParser,
    'vtt': VttParser,
    'yt-json': YtJsonParser,
}


def parse_transcript(raw: bytes, format: str, config: RuleConfig | None = None) -> list[TranscriptSegment]:
    """Parse a transcript byte stream in an explicitly given format.

    Args:
        raw: UTF-8 bytes (a BOM is tolerated)
        format: One of 'srt', 'vtt', 'yt-json' (no sniffing)
        config: Optional cleaning rule configuration

    Returns:
        Segments sorted by start time; empty input gives an empty list

    Raises:
        DataError: On undecodable input or unknown format
        MalformedCue: On malformed cues
    """
    if format not in PARSERS:
        raise DataError(f"Unsupported transcript format: {format}")
    try:
        text = raw.decode('utf-8-sig')
    except UnicodeDecodeError as e:
        raise DataError(f"Transcript is not valid UTF-8: {e}") from e

    text = text.replace('\r\n', '\n').replace('\r', '\n')
    if not text.strip():
        return []
    return PARSERS[format]().parse(text, config)


def _escape(text: str) -> str:
    """Escape cue text so markup stripping and entity decoding on re-parse give it back unchanged."""
    return text.replace('&', '&amp;').replace('<', '&lt;').replace('>', '&gt;')


def serialize_srt(segments: Iterable[TranscriptSegment]) -> str:
    """Serialize segments to canonical SRT (renumbered from 1, one text line per cue)."""
    blocks = [
        f"{i}\n{_format_timestamp(s.start_s, ',')} --> {_format_timestamp(s.end_s, ',')}\n{_escape(s.text)}\n"
        for i, s in enumerate(segments, start=1)
    ]
    return "\n".join(blocks)


def serialize_vtt(segments: Iterable[TranscriptSegment]) -> str:
    """Serialize segments to canonical WebVTT."""
    blocks = [
        f"{_format_timestamp(s.start_s, '.')} --> {_format_timestamp(s.end_s, '.')}\n{_escape(s.text)}\n"
        for s in segments
    ]
    return "WEBVTT\n\n" + "\n".join(blocks)


def parse_file(file_path: Path, config: RuleConfig | None = None) -> list[TranscriptSegment]:
    """Parse a transcript file, choosing the format from its extension.

    Raises:
        DataError: If the extension is not a supported transcript format
    """
    suffix = file_path.suffix.lower()
    if suffix not in SUFFIX_FORMATS:
        raise DataError(f"Unsupported transcript file type: {suffix}")
    return parse_transcript(file_path.read_bytes(), SUFFIX_FORMATS[suffix], config)


def find_files(
    path: Path,
    recursive: bool = False,
    extensions: List[str] | None = None,
) -> List[Path]:
    """Find transcript files to ingest.

    Args:
        path: File or directory path
        recursive: Whether to search recursively in subdirectories
        extensions: File extensions to include (default: .srt, .vtt, .json)

    Returns:
        Sorted list of file paths

    Raises:
        FileNotFoundError: If path does not exist
    """
    if not path.exists():
        raise FileNotFoundError(f"Path does not exist: {path}")

    if extensions is None:
        extensions = list(SUFFIX_FORMATS)

    extensions = [ext.lower() if ext.startswith('.') else f'.{ext.lower()}'
                  for ext in extensions]

    if path.is_file():
        return [path]

    files = []
    pattern = '**/*' if recursive else '*'

    for file_path in path.glob(pattern):
        if file_path.is_file() and file_path.suffix.lower() in extensions:
            validate_safe_path(file_path, path)
            files.append(file_path)

    return sorted(files)


def _index_by_stem(files: List[Path], kind: str) -> dict[str, Path]:
    indexed: dict[str, Path] = {}
    for file_path in files:
        if file_path.stem in indexed:
            raise DataError(
                f"Duplicate {kind} for video '{file_path.stem}': "
                f"{indexed[file_path.stem].name} and {file_path.name}"
            )
        indexed[file_path.stem] = file_path
    return indexed


def _load_manifest(path: Path) -> dict[str, dict]:
    if not path.exists():
        return {}
    manifest = read_json_file(path, "manifest")
    if not isinstance(manifest, dict):
        raise DataError(f"{path}: manifest must be a JSON object keyed by video id")
    for video_id, entry in manifest.items():
        if not isinstance(entry, dict) or not isinstance(entry.get('duration', 0.0), (int, float)):
            raise DataError(f"{path}: entry for {video_id} must be an object with a numeric 'duration'")
    return manifest


def load_corpus(corpus_dir: Path, config: RuleConfig | None = None) -> Corpus:
    """Load a corpus directory.

    Layout: transcripts/<vid>.{srt,vtt,json}, optional features/<vid>.feat,
    optional captions/<vid>.{srt,vtt,json}, optional manifest.json with durations.

    Args:
        corpus_dir: Corpus root directory
        config: Optional cleaning rule configuration

    Returns:
        Corpus ordered by video_id

    Raises:
        FileNotFoundError: If the transcripts directory is missing
        DataError: On duplicate videos, bad durations or malformed transcripts
    """
    transcripts = _index_by_stem(find_files(corpus_dir / 'transcripts'), 'transcript')

    captions_dir = corpus_dir / 'captions'
    captions = _index_by_stem(find_files(captions_dir), 'captions') if captions_dir.is_dir() else {}

    features_dir = corpus_dir / 'features'
    features = (
        _index_by_stem(find_files(features_dir, extensions=[FEATURE_SUFFIX]), 'features')
        if features_dir.is_dir() else {}
    )

    manifest = _load_manifest(corpus_dir / 'manifest.json')

    videos = []
    for video_id in sorted(transcripts):
        segments = parse_file(transcripts[video_id], config)
        generated = parse_file(captions[video_id], config) if video_id in captions else []
        ends = [s.end_s for s in segments] + [c.end_s for c in generated]
        if not ends and video_id not in manifest:
            raise DataError(f"Video {video_id}: empty transcript and no manifest duration")
        duration = float(manifest.get(video_id, {}).get('duration', max(ends, default=0.0)))
        videos.append(VideoRecord(
            video_id=video_id,
            duration_s=duration,
            segments=tuple(segments),
            frame_features_path=features[video_id].resolve() if video_id in features else None,
            captions=tuple(generated),
        ))
        logger.debug("Loaded %s: %d segments, %d captions", video_id, len(segments), len(generated))

    orphans = (set(captions) | set(features)) - set(transcripts)
    for video_id in sorted(orphans):
        logger.warning("Ignoring captions/features for %s: no transcript", video_id)

    return Corpus(tuple(videos))
