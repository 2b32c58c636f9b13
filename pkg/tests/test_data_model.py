import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from relspam.data_model import (
    ConfigError,
    DataError,
    Group,
    Message,
    SplitPlan,
    build_groups,
    chronological_split,
    message_from_record,
    normalize_link,
    normalize_text,
    read_messages,
    relations_from_names,
    sort_chronologically,
    validate_dataset,
    write_messages,
)


def msg(mid, user="u", text="", ts=0, **kw):
    return Message(id=mid, user_id=user, text=text, timestamp=ts, **kw)


class TestValidation:
    def test_duplicate_ids_reported(self):
        report = validate_dataset([msg("m1"), msg("m1"), msg("m2")])
        assert report.duplicate_ids == ["m1"]
        assert not report.ok

    def test_empty_dataset_is_valid(self):
        report = validate_dataset([])
        assert report.ok
        assert report.n_messages == 0
        assert report.label_coverage == 0.0

    def test_label_coverage(self):
        messages = [msg("a"), msg("b"), msg("c"), msg("d", **{})]
        messages[0].label = 1
        report = validate_dataset(messages)
        assert report.label_coverage == pytest.approx(0.25)
        assert report.ok

    def test_negative_timestamp_flagged(self):
        report = validate_dataset([msg("a", ts=-5)])
        assert report.bad_timestamps == ["a"]
        assert not report.ok


class TestNormalization:
    def test_text_normalization_matches(self):
        assert normalize_text("WIN free followers") == normalize_text("win  FREE followers!")

    def test_strips_leading_and_trailing_punctuation(self):
        assert normalize_text("!!hello there??") == "hello there"

    def test_link_normalization_lowercases_scheme_and_host(self):
        assert normalize_link("HTTP://Example.COM/Path?Q=1") == "http://example.com/Path?Q=1"

    def test_link_without_netloc_is_untouched(self):
        assert normalize_link("x.co/abc") == "x.co/abc"


class TestGroups:
    def test_user_groups_drop_singletons(self):
        messages = [msg("m1", user="u1"), msg("m2", user="u1"), msg("m3", user="u2")]
        groups = build_groups(messages, relations_from_names(["user"]))
        assert groups == [Group(relation="user", key="u1", member_ids=("m1", "m2"))]

    def test_text_groups_use_normalization(self):
        messages = [
            msg("m1", text="WIN free followers"),
            msg("m2", text="win  FREE followers!"),
            msg("m3", text="something else"),
        ]
        groups = build_groups(messages, relations_from_names(["text"]))
        assert len(groups) == 1
        assert groups[0].member_ids == ("m1", "m2")

    def test_shared_link_yields_one_group_not_pairs(self):
        messages = [msg(f"m{i:03d}", user=f"u{i}", links=["http://spam.example/x"]) for i in range(100)]
        groups = build_groups(messages, relations_from_names(["link"]))
        assert len(groups) == 1
        assert len(groups[0]) == 100

    def test_unknown_relation_is_config_error(self):
        with pytest.raises(ConfigError):
            build_groups([msg("m1")], relations_from_names(["bogus"]))

    def test_permutation_invariance(self):
        rng = random.Random(7)
        messages = [
            msg(f"m{i}", user=f"u{i % 5}", text=f"text {i % 4}", ts=i)
            for i in range(30)
        ]
        rels = relations_from_names(["user", "text"])
        base = build_groups(messages, rels)
        for _ in range(5):
            shuffled = messages[:]
            rng.shuffle(shuffled)
            assert build_groups(shuffled, rels) == base

    def test_group_members_exist_in_dataset(self):
        messages = [msg(f"m{i}", user=f"u{i % 3}") for i in range(10)]
        ids = {m.id for m in messages}
        for g in build_groups(messages, relations_from_names(["user"])):
            assert set(g.member_ids) <= ids

    def test_user_hashtag_keys(self):
        messages = [
            msg("m1", user="u1", hashtags=["Win"]),
            msg("m2", user="u1", hashtags=["win"]),
            msg("m3", user="u2", hashtags=["win"]),
        ]
        groups = build_groups(messages, relations_from_names(["user_hashtag"]))
        assert len(groups) == 1
        assert groups[0].member_ids == ("m1", "m2")

    def test_hashtags_parsed_from_text_when_unannotated(self):
        messages = [msg("m1", text="check #win now"), msg("m2", text="also #win")]
        groups = build_groups(messages, relations_from_names(["hashtag"]))
        assert len(groups) == 1


class TestChronologicalSplit:
    def test_ten_subsets_of_hundred(self):
        messages = [msg(f"m{i:03d}", ts=i) for i in range(100)]
        plan = chronological_split(messages, 10, (0.7, 0.05, 0.25))
        assert plan.n_subsets == 10
        for s in plan.subsets:
            n_train = s.train[1] - s.train[0]
            n_val = s.validation[1] - s.validation[0]
            n_test = s.test[1] - s.test[0]
            assert n_train == 7
            assert 0 <= n_val <= 1
            assert 2 <= n_test <= 3
            assert s.train[1] <= s.test[0]

    def test_single_even_split(self):
        messages = [msg(f"m{i}", ts=i) for i in range(10)]
        plan = chronological_split(messages, 1, (0.5, 0.0, 0.5))
        s = plan.subsets[0]
        assert s.train == (0, 5)
        assert s.test == (5, 10)

    def test_tie_break_by_id(self):
        messages = [msg("b", ts=5), msg("a", ts=5), msg("c", ts=1)]
        ordered = sort_chronologically(messages)
        assert [m.id for m in ordered] == ["c", "a", "b"]

    def test_no_future_leakage(self):
        rng = random.Random(3)
        messages = [msg(f"m{i:04d}", ts=rng.randrange(1000)) for i in range(137)]
        ordered = sort_chronologically(messages)
        plan = chronological_split(ordered, 7, (0.6, 0.1, 0.3))
        for s in plan.subsets:
            if s.train[1] > s.train[0] and s.test[1] > s.test[0]:
                max_train_ts = max(m.timestamp for m in ordered[s.train[0]:s.train[1]])
                min_test_ts = min(m.timestamp for m in ordered[s.test[0]:s.test[1]])
                assert max_train_ts <= min_test_ts

    def test_test_ranges_disjoint(self):
        messages = [msg(f"m{i:03d}", ts=i) for i in range(95)]
        plan = chronological_split(messages, 10, (0.7, 0.05, 0.25))
        seen = set()
        for s in plan.subsets:
            rng_ids = set(range(s.test[0], s.test[1]))
            assert not (seen & rng_ids)
            seen |= rng_ids

    def test_too_few_messages_raises(self):
        with pytest.raises(DataError):
            chronological_split([msg("a")], 2, (0.5, 0.0, 0.5))

    def test_bad_fractions_raise(self):
        with pytest.raises(ConfigError):
            chronological_split([msg("a"), msg("b")], 1, (0.5, 0.0, 0.4))

    def test_json_round_trip(self):
        messages = [msg(f"m{i}", ts=i) for i in range(20)]
        plan = chronological_split(messages, 4, (0.7, 0.05, 0.25))
        restored = SplitPlan.from_json(plan.to_json())
        assert restored == plan


@settings(max_examples=50, deadline=None)
@given(
    st.lists(
        st.tuples(st.integers(0, 50), st.sampled_from(["u1", "u2", "u3"]), st.sampled_from(["x", "y", "z", "w"])),
        min_size=4,
        max_size=40,
    )
)
def test_split_invariant_property(rows):
    messages = [msg(f"m{i:02d}", user=u, text=t, ts=ts) for i, (ts, u, t) in enumerate(rows)]
    ordered = sort_chronologically(messages)
    plan = chronological_split(ordered, 2, (0.5, 0.25, 0.25))
    for s in plan.subsets:
        train = ordered[s.train[0]:s.train[1]]
        test = ordered[s.test[0]:s.test[1]]
        if train and test:
            assert max(m.timestamp for m in train) <= min(m.timestamp for m in test)


class TestIngestion:
    def test_round_trip(self, tmp_path):
        messages = [
            Message(id="a", user_id="u1", text="hi #there", timestamp=3, label=1,
                    links=["http://x.co"], hashtags=["there"]),
            Message(id="b", user_id="u2", text="plain", timestamp=5),
        ]
        path = tmp_path / "messages.jsonl"
        write_messages(path, messages)
        assert read_messages(path) == messages

    def test_unknown_fields_ignored(self):
        m = message_from_record({"id": "x", "user_id": "u", "wat": 42, "timestamp": 1})
        assert m.id == "x"

    def test_missing_timestamp_falls_back_to_position(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(json.dumps({"id": "a", "user_id": "u"}) + "\n" + json.dumps({"id": "b", "user_id": "u"}) + "\n")
        messages = read_messages(path)
        assert [m.timestamp for m in messages] == [0, 1]

    def test_label_encoding(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(
            json.dumps({"id": "a", "user_id": "u", "label": 0}) + "\n"
            + json.dumps({"id": "b", "user_id": "u", "label": 1}) + "\n"
            + json.dumps({"id": "c", "user_id": "u"}) + "\n"
        )
        messages = read_messages(path)
        assert [m.label for m in messages] == [0, 1, None]

    def test_bad_label_raises(self):
        with pytest.raises(DataError):
            message_from_record({"id": "a", "user_id": "u", "label": 3})
