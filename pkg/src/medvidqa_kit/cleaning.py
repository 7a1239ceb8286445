"""Cue text cleaning rules applied while ingesting subtitles and captions."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from .config import RuleConfig

# Pre-compiled regex patterns
# Inline VTT timestamps (<00:00:01.000>) and markup tags (<i>, </c>, <c.yellow>, <v Doctor>)
MARKUP_PATTERN = re.compile(r"</?[A-Za-z][A-Za-z0-9._:\- ]*>|<\d{1,2}:\d{2}(?::\d{2})?\.\d{3}>")
# Bracketed non-speech tags: [Music], [Applause], (laughs), ♪ ... ♪
NOISE_TAG_PATTERN = re.compile(r"\[[^\[\]]{1,40}\]|\((?:laughs?|laughter|music|applause|inaudible|silence)\)|♪+[^♪]*♪+",
                               flags=re.IGNORECASE)
SPEAKER_DASH_PATTERN = re.compile(r"^\s*(?:-|>>)\s+")
WHITESPACE_PATTERN = re.compile(r"\s+")

HTML_ENTITIES = {
    '&amp;': '&',
    '&lt;': '<',
    '&gt;': '>',
    '&nbsp;': ' ',
    '&quot;': '"',
    '&#39;': "'",
}
ENTITY_PATTERN = re.compile("|".join(re.escape(e) for e in HTML_ENTITIES))


@dataclass
class CleaningStats:
    """Statistics about cue cleaning operations."""

    markup_stripped: int = 0
    entities_decoded: int = 0
    noise_tags_dropped: int = 0
    speaker_dashes_stripped: int = 0
    whitespace_collapsed: int = 0

    def has_changes(self) -> bool:
        """Check if any changes were made."""
        return any([
            self.markup_stripped,
            self.entities_decoded,
            self.noise_tags_dropped,
            self.speaker_dashes_stripped,
            self.whitespace_collapsed,
        ])

    def format_summary(self) -> str:
        """Format a human-readable summary of changes."""
        changes = []
        if self.markup_stripped:
            changes.append(f"{self.markup_stripped} markup tags stripped")
        if self.entities_decoded:
            changes.append(f"{self.entities_decoded} entities decoded")
        if self.noise_tags_dropped:
            changes.append(f"{self.noise_tags_dropped} noise tags dropped")
        if self.speaker_dashes_stripped:
            changes.append(f"{self.speaker_dashes_stripped} speaker markers stripped")
        if self.whitespace_collapsed:
            changes.append(f"{self.whitespace_collapsed} whitespace runs collapsed")

        if not changes:
            return "No changes made"

        return "Changes: " + ", ".join(changes)


def _strip_markup(text: str) -> str:
    """Remove subtitle markup tags and inline cue timestamps, keeping the tag content."""
    return MARKUP_PATTERN.sub("", text)


def _decode_entities(text: str) -> str:
    return ENTITY_PATTERN.sub(lambda m: HTML_ENTITIES[m.group(0)], text)


def _drop_noise_tags(text: str) -> str:
    """Remove bracketed non-speech annotations such as [Music] or (applause)."""
    return NOISE_TAG_PATTERN.sub(" ", text)


def _strip_speaker_dashes(text: str) -> str:
    # Applied per physical line: multi-speaker cues put one marker per line
    return "\n".join(SPEAKER_DASH_PATTERN.sub("", line) for line in text.split("\n"))


def _collapse_whitespace(text: str) -> str:
    return WHITESPACE_PATTERN.sub(" ", text).strip()


def clean_text(text: str, config: RuleConfig | None = None) -> str:
    """Clean one cue's text.

    Rule order matters: speaker markers are line-anchored, so they run before
    whitespace collapsing joins the cue's lines.

    Args:
        text: Raw cue text (may span several lines)
        config: Optional rule configuration (defaults enable the standard rules)

    Returns:
        Cleaned single-line text, possibly empty
    """
    return clean_text_verbose(text, config)[0]


def clean_text_verbose(text: str, config: RuleConfig | None = None) -> tuple[str, CleaningStats]:
    """Clean one cue's text and return statistics.

    Args:
        text: Raw cue text
        config: Optional rule configuration

    Returns:
        Tuple of (cleaned text, statistics)
    """
    if config is None:
        from .config import RuleConfig
        config = RuleConfig()

    stats = CleaningStats()

    if config.is_enabled('strip_markup'):
        stats.markup_stripped = len(MARKUP_PATTERN.findall(text))
        text = _strip_markup(text)

    if config.is_enabled('decode_entities'):
        stats.entities_decoded = len(ENTITY_PATTERN.findall(text))
        text = _decode_entities(text)

    if config.is_enabled('drop_noise_tags'):
        stats.noise_tags_dropped = len(NOISE_TAG_PATTERN.findall(text))
        text = _drop_noise_tags(text)

    if config.is_enabled('strip_speaker_dashes'):
        stats.speaker_dashes_stripped = sum(
            1 for line in text.split("\n") if SPEAKER_DASH_PATTERN.match(line)
        )
        text = _strip_speaker_dashes(text)

    if config.is_enabled('collapse_whitespace'):
        stats.whitespace_collapsed = sum(
            1 for m in WHITESPACE_PATTERN.finditer(text) if m.group(0) != " "
        )
        text = _collapse_whitespace(text)
    else:
        # Cue text is always a single line
        text = text.replace("\r", " ").replace("\n", " ").strip()

    return text, stats
