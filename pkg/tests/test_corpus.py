"""Tests for the corpus data model and its input files."""

import json

import pytest

from medvidqa_kit.corpus import (
    Corpus,
    GoldStepSet,
    StepCaption,
    TimeSpan,
    TokenRange,
    TranscriptSegment,
    VideoRecord,
    corpus_from_json,
    corpus_to_json,
    load_gold_steps,
    load_qrels,
    load_topics,
    parse_qrels,
    step_sets_from_json,
    step_sets_to_json,
    tokenize,
    transcript_text,
)
from medvidqa_kit.errors import DataError, DuplicateJudgment, EmptyTranscript, MalformedCue, ParseError


def _video(*texts_and_times, video_id="v1", duration=None):
    segments = tuple(
        TranscriptSegment(i, start, end, text)
        for i, (text, start, end) in enumerate(texts_and_times, start=1)
    )
    return VideoRecord(video_id, duration or max(s.end_s for s in segments), segments)


class TestTokenize:

    def test_lowercase_whitespace_split(self):
        assert tokenize("Wash  your\tHANDS\n") == ["wash", "your", "hands"]

    def test_punctuation_stays_attached(self):
        assert tokenize("Rinse, dry.") == ["rinse,", "dry."]

    def test_unicode_whitespace(self):
        assert tokenize("wash　hands") == ["wash", "hands"]


class TestValueTypes:

    def test_time_span_must_be_ordered(self):
        with pytest.raises(DataError):
            TimeSpan(5.0, 5.0)
        with pytest.raises(DataError):
            TimeSpan(-1.0, 2.0)
        assert TimeSpan(1.0, 3.5).duration == 2.5

    def test_step_caption_needs_text(self):
        with pytest.raises(DataError, match="empty"):
            StepCaption(0.0, 1.0, "   ")

    def test_segment_invariants(self):
        with pytest.raises(MalformedCue):
            TranscriptSegment(1, 2.0, 1.0, "x")
        with pytest.raises(MalformedCue):
            TranscriptSegment(1, 0.0, 1.0, "")

    def test_video_segments_must_be_sorted(self):
        segments = (TranscriptSegment(1, 5.0, 6.0, "b"), TranscriptSegment(2, 1.0, 2.0, "a"))
        with pytest.raises(DataError, match="not sorted"):
            VideoRecord("v1", 10.0, segments)

    def test_video_duration_covers_last_cue(self):
        with pytest.raises(DataError, match="shorter than"):
            _video(("a", 0.0, 12.0), duration=10.0)

    def test_corpus_rejects_duplicate_ids(self):
        v = _video(("a", 0.0, 1.0))
        with pytest.raises(DataError, match="Duplicate"):
            Corpus((v, v))

    def test_corpus_get(self):
        corpus = Corpus((_video(("a", 0.0, 1.0)),))
        assert corpus.get("v1").video_id == "v1"
        with pytest.raises(KeyError):
            corpus.get("v2")


class TestTranscriptText:

    def test_offsets(self):
        video = _video(("wash hands", 0.0, 2.0), ("use soap", 2.0, 5.0))
        text, offsets = transcript_text(video)
        assert text == "wash hands use soap"
        assert offsets == [TokenRange(0, 0, 1), TokenRange(1, 2, 3)]

    def test_offsets_partition_tokens(self):
        video = _video(("one", 0.0, 1.0), ("two three four", 1.0, 2.0), ("five six", 2.0, 3.0))
        text, offsets = transcript_text(video)
        covered = [i for r in offsets for i in range(r.start_tok, r.end_tok + 1)]
        assert covered == list(range(len(tokenize(text))))

    def test_empty(self):
        with pytest.raises(EmptyTranscript):
            transcript_text(VideoRecord("v1", 10.0, ()))


class TestTopics:

    def test_file_order_is_kept(self, tmp_path):
        path = tmp_path / "topics.json"
        path.write_text(json.dumps([
            {"qid": "q2", "question": "How to apply a bandage?"},
            {"qid": "q1", "question": "How to wash hands?"},
        ]))
        assert [q.query_id for q in load_topics(path)] == ["q2", "q1"]

    def test_duplicate_topic(self, tmp_path):
        path = tmp_path / "topics.json"
        path.write_text(json.dumps([{"qid": "q1", "question": "a"}, {"qid": "q1", "question": "b"}]))
        with pytest.raises(DataError, match="duplicate topic q1"):
            load_topics(path)

    def test_missing_field(self, tmp_path):
        path = tmp_path / "topics.json"
        path.write_text(json.dumps([{"qid": "q1"}]))
        with pytest.raises(DataError, match="topic #1"):
            load_topics(path)

    def test_invalid_json_carries_line(self, tmp_path):
        path = tmp_path / "topics.json"
        path.write_text('[\n  {"qid": "q1",\n')
        with pytest.raises(ParseError) as excinfo:
            load_topics(path)
        assert excinfo.value.path == path

    def test_non_utf8_file(self, tmp_path):
        path = tmp_path / "topics.json"
        path.write_bytes(b'[{"qid": "q1", "question": "caf\xe9"}]')
        with pytest.raises(DataError, match="not valid UTF-8"):
            load_topics(path)


class TestQrels:

    def test_parse(self):
        entries = parse_qrels([
            "# comment",
            "",
            "q1 0 v1 1 4.0 20.0",
            "q1 0 v2 0",
        ])
        assert [(e.query_id, e.video_id, e.relevance) for e in entries] == [("q1", "v1", 1), ("q1", "v2", 0)]
        assert entries[0].gold_span == TimeSpan(4.0, 20.0)
        assert entries[1].gold_span is None

    def test_bad_field_count_names_line(self):
        with pytest.raises(ParseError) as excinfo:
            parse_qrels(["q1 0 v1 1", "q1 0 v2"])
        assert excinfo.value.line_no == 2

    def test_non_integer_relevance(self):
        with pytest.raises(ParseError, match="integer"):
            parse_qrels(["q1 0 v1 high"])

    def test_negative_relevance(self):
        with pytest.raises(ParseError, match=">= 0"):
            parse_qrels(["q1 0 v1 -1"])

    def test_bad_span(self):
        with pytest.raises(ParseError, match="bad answer span"):
            parse_qrels(["q1 0 v1 1 9.0 3.0"])

    def test_duplicate_judgment(self):
        with pytest.raises(DuplicateJudgment):
            parse_qrels(["q1 0 v1 1", "q1 0 v1 0"])

    def test_load_minicorpus_qrels(self, minicorpus):
        entries = load_qrels(minicorpus / "qrels.txt")
        assert len(entries) == 8
        assert {e.query_id for e in entries} == {"q1", "q2", "q3", "q4"}


class TestStepSets:

    def test_steps_are_sorted_by_start(self):
        sets = step_sets_from_json([{
            "qid": "q1", "vid": "v1",
            "steps": [{"start": 9.5, "end": 15, "step": "scrub"}, {"start": 4, "end": 9.5, "step": "wet"}],
        }])
        assert [s.text for s in sets[0].steps] == ["wet", "scrub"]
        assert sets[0].key == ("q1", "v1")

    def test_json_shape(self):
        step_set = GoldStepSet("q1", "v1", (StepCaption(4.0, 9.5, "wet"),))
        assert step_sets_to_json([step_set]) == [
            {"qid": "q1", "vid": "v1", "steps": [{"start": 4.0, "end": 9.5, "step": "wet"}]}
        ]

    def test_duplicate_key(self):
        item = {"qid": "q1", "vid": "v1", "steps": []}
        with pytest.raises(DataError, match="duplicate step set"):
            step_sets_from_json([item, item])

    def test_step_missing_key(self):
        with pytest.raises(DataError, match="missing key"):
            step_sets_from_json([{"qid": "q1", "vid": "v1", "steps": [{"start": 1, "end": 2}]}])

    def test_load_minicorpus_gold(self, minicorpus):
        sets = load_gold_steps(minicorpus / "gold_steps.json")
        assert [s.key for s in sets] == [("q1", "v1"), ("q2", "v3")]
        assert all(len(s.steps) == 3 for s in sets)


class TestCorpusJson:

    def test_ingest_artifact_round_trip(self, tmp_path):
        features = tmp_path / "v1.feat"
        video = VideoRecord(
            "v1", 24.0,
            (TranscriptSegment(1, 0.0, 4.0, "wash"),),
            frame_features_path=features,
            captions=(TranscriptSegment(1, 0.0, 2.0, "a tap"),),
        )
        data = json.loads(json.dumps(corpus_to_json(Corpus((video,)))))
        assert data["videos"][0]["features"] == features.as_posix()
        assert corpus_from_json(data) == Corpus((video,))

    def test_feature_paths_relative_to_root(self, tmp_path):
        root = tmp_path.resolve() / "corpus"
        video = VideoRecord("v1", 24.0, (TranscriptSegment(1, 0.0, 4.0, "wash"),),
                            frame_features_path=root / "features" / "v1.feat")
        data = corpus_to_json(Corpus((video,)), root)
        assert data["videos"][0]["features"] == "features/v1.feat"
        assert corpus_from_json(data, root) == Corpus((video,))

    def test_feature_path_outside_root(self, tmp_path):
        root = tmp_path.resolve() / "corpus"
        video = VideoRecord("v1", 24.0, (TranscriptSegment(1, 0.0, 4.0, "wash"),),
                            frame_features_path=tmp_path.resolve() / "elsewhere" / "v1.feat")
        with pytest.raises(DataError, match="outside the corpus directory"):
            corpus_to_json(Corpus((video,)), root)
