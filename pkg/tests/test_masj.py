from __future__ import annotations

import pytest

from entrotier import masj
from entrotier.gateway import EndpointConfig
from entrotier.masj import MasjKind, UnknownLabel, encode, parse_label, parse_rating
from entrotier.testing import MockChatServer, ScriptedJudge, completion_body, synthetic_records


def judge_endpoint(base_url: str) -> EndpointConfig:
    return EndpointConfig(base_url=base_url, model="mock-judge", timeout=5.0, retry_backoff=0.01)


class TestEncode:
    def test_education_table_exact(self):
        assert encode("high school and easier", MasjKind.EDUCATION_LEVEL) == 0.2
        assert encode("undergraduate", MasjKind.EDUCATION_LEVEL) == 0.4
        assert encode("graduate", MasjKind.EDUCATION_LEVEL) == 0.6
        assert encode("postgraduate", MasjKind.EDUCATION_LEVEL) == 0.8

    def test_reasoning_table_exact(self):
        assert encode("low", MasjKind.REASONING_STEPS) == 0.25
        assert encode("medium", MasjKind.REASONING_STEPS) == 0.5
        assert encode("high", MasjKind.REASONING_STEPS) == 0.75

    def test_case_and_whitespace_tolerant(self):
        assert encode("  Undergraduate ", MasjKind.EDUCATION_LEVEL) == 0.4
        assert encode("HIGH", MasjKind.REASONING_STEPS) == 0.75

    def test_unknown_label_rejected(self):
        with pytest.raises(UnknownLabel):
            encode("expert", MasjKind.EDUCATION_LEVEL)

    def test_strictly_increasing_along_ordinal_order(self):
        education = ["high school and easier", "undergraduate", "graduate", "postgraduate"]
        values = [encode(label, MasjKind.EDUCATION_LEVEL) for label in education]
        assert values == sorted(values) and len(set(values)) == len(values)
        reasoning = ["low", "medium", "high"]
        values = [encode(label, MasjKind.REASONING_STEPS) for label in reasoning]
        assert values == sorted(values) and len(set(values)) == len(values)


class TestParsing:
    def test_reasoning_format(self):
        text = "Some explanation... [[Number of reasoning steps: high]]"
        assert parse_label(text, MasjKind.REASONING_STEPS) == "high"

    def test_education_format(self):
        text = "The topic is undergraduate-level. Complexity: [[undergraduate]]"
        assert parse_label(text, MasjKind.EDUCATION_LEVEL) == "undergraduate"

    def test_last_bracketed_group_wins(self):
        text = "[[Number of reasoning steps: low]] wait, actually [[Number of reasoning steps: high]]"
        assert parse_label(text, MasjKind.REASONING_STEPS) == "high"

    def test_case_insensitive(self):
        assert parse_label("[[Number of Reasoning Steps: LOW]]", MasjKind.REASONING_STEPS) == "low"

    def test_no_brackets_is_none(self):
        assert parse_label("no structured label here", MasjKind.REASONING_STEPS) is None

    def test_wrong_vocabulary_is_none(self):
        assert parse_label("[[enormous]]", MasjKind.REASONING_STEPS) is None

    def test_rating_parse(self):
        assert parse_rating("9") == 9
        assert parse_rating("I rate this 10.") == 10
        assert parse_rating("zero signal") is None
        assert parse_rating("42") is None  # outside 1..10


class TestJudgeFlow:
    def test_accepted_assessment(self, fixture_record):
        replies = iter(
            [
                "...[[Number of reasoning steps: high]]",
                "9",
            ]
        )

        def behavior(body):
            text = next(replies)
            return completion_body("j", [(text, ((text, 0.9), ("x", 0.1)))])

        with MockChatServer(behavior) as server:
            result = masj.judge(fixture_record, MasjKind.REASONING_STEPS, judge_endpoint(server.base_url))
        assert result.label == "high"
        assert result.self_rating == 9
        assert result.accepted
        assert result.encoded == 0.75

    def test_rating_below_threshold_rejected(self, fixture_record):
        replies = iter(["...Complexity: [[undergraduate]]", "7"])

        def behavior(body):
            text = next(replies)
            return completion_body("j", [(text, ((text, 0.9), ("x", 0.1)))])

        with MockChatServer(behavior) as server:
            result = masj.judge(fixture_record, MasjKind.EDUCATION_LEVEL, judge_endpoint(server.base_url))
        assert result.label == "undergraduate"
        assert not result.accepted
        assert result.encoded == 0.4

    def test_threshold_admits_nine_and_ten_only(self):
        assert masj.SELF_RATING_THRESHOLD == 9
        for rating, expected in [(8, False), (9, True), (10, True)]:
            assert (rating >= masj.SELF_RATING_THRESHOLD) is expected

    def test_unparseable_label_rejected(self, fixture_record):
        replies = iter(["no brackets at all", "10"])

        def behavior(body):
            text = next(replies)
            return completion_body("j", [(text, ((text, 0.9), ("x", 0.1)))])

        with MockChatServer(behavior) as server:
            result = masj.judge(fixture_record, MasjKind.REASONING_STEPS, judge_endpoint(server.base_url))
        assert result.label == "invalid"
        assert not result.accepted
        assert result.encoded is None

    def test_two_sequential_calls_with_quoted_reply(self, fixture_record):
        calls = []

        def behavior(body):
            calls.append(body)
            if len(calls) == 1:
                text = "...[[Number of reasoning steps: medium]]"
            else:
                text = "10"
            return completion_body("j", [(text, ((text, 0.9), ("x", 0.1)))])

        with MockChatServer(behavior) as server:
            masj.judge(fixture_record, MasjKind.REASONING_STEPS, judge_endpoint(server.base_url))
        assert len(calls) == 2
        rating_user = calls[1]["messages"][1]["content"]
        assert "[[Number of reasoning steps: medium]]" in rating_user  # quotes the first reply
        assert fixture_record.question in rating_user  # includes the original question

    def test_scripted_judge_round_trip(self, tmp_path):
        records = synthetic_records(12, seed=1)
        judge = ScriptedJudge(records, reject_every=3)
        with MockChatServer(judge) as server:
            assessments = masj.judge_records(records, MasjKind.EDUCATION_LEVEL, judge_endpoint(server.base_url))
        assert len(assessments) == len(records)
        assert any(a.accepted for a in assessments)
        assert any(not a.accepted for a in assessments)
        for a in assessments:
            assert a.accepted == (a.self_rating >= 9)

        masj.write_assessments(tmp_path, assessments, MasjKind.EDUCATION_LEVEL)
        loaded = masj.read_assessments(tmp_path, MasjKind.EDUCATION_LEVEL)
        assert loaded == assessments

    def test_rejected_never_become_scores(self, tmp_path):
        records = synthetic_records(12, seed=2)
        judge = ScriptedJudge(records, reject_every=3)
        with MockChatServer(judge) as server:
            assessments = masj.judge_records(records, MasjKind.REASONING_STEPS, judge_endpoint(server.base_url))
        scores = masj.assessments_to_scores(assessments)
        accepted_ids = {a.record_id for a in assessments if a.accepted}
        assert {s.record_id for s in scores} == accepted_ids
        assert all(s.method == "masj_reasoning_steps" for s in scores)
        encoded = {a.record_id: a.encoded for a in assessments}
        assert all(s.value == encoded[s.record_id] for s in scores)
