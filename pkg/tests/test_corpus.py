import json
from collections import Counter

import pytest

from tripner.corpus import (
    Corpus,
    EntityTriplet,
    Sentence,
    bio_to_triplets,
    infer_coarse_labels,
    load_corpus,
    make_schedule,
    resolve_order,
    restrict_annotations,
    save_jsonl,
    schedule_from_manifest,
    schedule_manifest,
)
from tripner.errors import ConfigError, DataValidationError


class TestLoadJsonl:
    def test_record_maps_to_sentence(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text(
            json.dumps(
                {"tokens": ["Obama", "visited", "Paris"],
                 "entities": [[0, 0, "PER"], [2, 2, "GPE"]]}
            )
            + "\n"
        )
        sentences = load_corpus(path, "jsonl")
        assert len(sentences) == 1
        assert sentences[0].tokens == ("Obama", "visited", "Paris")
        assert sentences[0].entities == (
            EntityTriplet(0, 0, "PER"), EntityTriplet(2, 2, "GPE"),
        )

    def test_empty_file_gives_empty_list(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert load_corpus(path, "jsonl") == []

    def test_out_of_bounds_span_is_validation_error(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps({"tokens": ["a", "b", "c"], "entities": [[3, 3, "X"]]}))
        with pytest.raises(DataValidationError, match="bad.jsonl:1"):
            load_corpus(path, "jsonl")

    def test_malformed_json_names_the_line(self, tmp_path):
        path = tmp_path / "broken.jsonl"
        path.write_text('{"tokens": ["a"]}\n{nope\n')
        with pytest.raises(DataValidationError, match="broken.jsonl:2"):
            load_corpus(path, "jsonl")

    def test_missing_file_is_config_error(self, tmp_path):
        with pytest.raises(ConfigError):
            load_corpus(tmp_path / "absent.jsonl", "jsonl")

    def test_unknown_format_rejected(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text("")
        with pytest.raises(ConfigError):
            load_corpus(path, "parquet")

    def test_ids_default_to_stem_and_line(self, tmp_path):
        path = tmp_path / "corp.jsonl"
        path.write_text('{"tokens": ["a"]}\n{"tokens": ["b"]}\n')
        ids = [s.id for s in load_corpus(path, "jsonl")]
        assert ids == ["corp:1", "corp:2"]

    def test_round_trip_through_save_jsonl(self, tmp_path):
        sentences = [
            Sentence("x", ("a", "b"), (EntityTriplet(0, 1, "T"),)),
            Sentence("y", ("c",)),
        ]
        path = tmp_path / "out.jsonl"
        save_jsonl(sentences, path)
        assert load_corpus(path, "jsonl") == sentences


class TestColumnFormat:
    def test_bio_blocks(self, tmp_path):
        path = tmp_path / "c.conll"
        path.write_text(
            "Obama B-PER\nvisited O\nParis B-GPE\n\nBig B-ORG\nBlue I-ORG\n"
        )
        sentences = load_corpus(path, "column")
        assert len(sentences) == 2
        assert sentences[0].entities == (
            EntityTriplet(0, 0, "PER"), EntityTriplet(2, 2, "GPE"),
        )
        assert sentences[1].entities == (EntityTriplet(0, 1, "ORG"),)

    def test_lenient_continuation_starts_new_entity(self):
        assert bio_to_triplets(["O", "I-PER", "I-PER", "I-ORG"]) == (
            EntityTriplet(1, 2, "PER"), EntityTriplet(3, 3, "ORG"),
        )

    def test_unrecognized_tag_raises(self):
        with pytest.raises(DataValidationError):
            bio_to_triplets(["B-PER", "Q-PER"])

    def test_missing_tag_column_raises(self, tmp_path):
        path = tmp_path / "c.conll"
        path.write_text("token_without_tag\n")
        with pytest.raises(DataValidationError):
            load_corpus(path, "column")


class TestRestrict:
    def test_keeps_only_requested_types(self, sample_sentence):
        restricted = restrict_annotations(sample_sentence, {"A"})
        assert [e.type for e in restricted.entities] == ["A"]
        assert restricted.tokens == sample_sentence.tokens

    def test_full_inventory_is_identity(self, sample_sentence):
        assert restrict_annotations(sample_sentence, {"A", "B"}) == sample_sentence

    def test_empty_types_strips_everything(self, sample_sentence):
        assert restrict_annotations(sample_sentence, set()).entities == ()


def toy_corpus():
    """Five sentences over types X and Y; s3 carries both types."""

    def s(sid, types_at):
        tokens = tuple(f"t{i}" for i in range(4))
        ents = tuple(EntityTriplet(i, i, t) for i, t in types_at)
        return Sentence(sid, tokens, ents)

    train = [
        s("s1", [(0, "X")]),
        s("s2", [(1, "X")]),
        s("s3", [(0, "X"), (2, "Y")]),
        s("s4", [(3, "Y")]),
        s("s5", []),
    ]
    test = [s("t1", [(0, "X")]), s("t2", [(1, "Y")]), s("t3", [])]
    return Corpus(train=train, dev=[s("d1", [(0, "X")]), s("d2", [(2, "Y")])], test=test)


class TestSplitProtocol:
    def test_partition_is_disjoint_and_covers_train(self):
        corpus = toy_corpus()
        schedule = make_schedule(corpus, [("X",), ("Y",)], "split", "all", seed=3)
        ids = [s.id for task in schedule.tasks for s in task.train]
        assert Counter(ids) == Counter(s.id for s in corpus.train)

    def test_annotations_restricted_to_new_types(self):
        schedule = make_schedule(toy_corpus(), [("X",), ("Y",)], "split", "all", seed=3)
        for task in schedule.tasks:
            for sentence in task.train + task.dev:
                assert {e.type for e in sentence.entities} <= set(task.new_types)

    def test_all_test_protocol_reuses_full_test_set(self):
        corpus = toy_corpus()
        schedule = make_schedule(corpus, [("X",), ("Y",)], "split", "all", seed=3)
        for k, task in enumerate(schedule.tasks, start=1):
            assert [s.id for s in task.test] == [s.id for s in corpus.test]
            seen = set(schedule.seen_types(k))
            for sentence in task.test:
                assert {e.type for e in sentence.entities} <= seen

    def test_deterministic_given_seed(self):
        a = make_schedule(toy_corpus(), [("X",), ("Y",)], "split", "all", seed=5)
        b = make_schedule(toy_corpus(), [("X",), ("Y",)], "split", "all", seed=5)
        assert schedule_manifest(a) == schedule_manifest(b)

    def test_train_full_keeps_complete_annotations(self):
        schedule = make_schedule(toy_corpus(), [("X",), ("Y",)], "split", "all", seed=3)
        by_id = {s.id: s for s in toy_corpus().train}
        for task in schedule.tasks:
            for sentence in task.train_full:
                assert sentence == by_id[sentence.id]


class TestFilterProtocol:
    def test_membership_follows_the_filter_rule(self):
        # Enumerated by hand on the 5-sentence toy corpus: X-sentences are
        # s1, s2, s3; Y-sentences are s3, s4. s3 appears in both train sets.
        schedule = make_schedule(toy_corpus(), [("X",), ("Y",)], "filter", "filter", seed=3)
        assert [s.id for s in schedule.tasks[0].train] == ["s1", "s2", "s3"]
        assert [s.id for s in schedule.tasks[1].train] == ["s3", "s4"]

    def test_shared_sentence_carries_only_task_types(self):
        schedule = make_schedule(toy_corpus(), [("X",), ("Y",)], "filter", "filter", seed=3)
        s3_task1 = next(s for s in schedule.tasks[0].train if s.id == "s3")
        s3_task2 = next(s for s in schedule.tasks[1].train if s.id == "s3")
        assert {e.type for e in s3_task1.entities} == {"X"}
        assert {e.type for e in s3_task2.entities} == {"Y"}

    def test_filter_test_keeps_sentences_with_seen_types(self):
        schedule = make_schedule(toy_corpus(), [("X",), ("Y",)], "filter", "filter", seed=3)
        assert [s.id for s in schedule.tasks[0].test] == ["t1"]
        assert [s.id for s in schedule.tasks[1].test] == ["t1", "t2"]

    def test_every_train_sentence_has_a_new_type_entity(self):
        schedule = make_schedule(toy_corpus(), [("X",), ("Y",)], "filter", "all", seed=3)
        for task in schedule.tasks:
            for sentence in task.train:
                assert any(e.type in task.new_types for e in sentence.entities)


class TestScheduleValidation:
    def test_overlapping_type_sets_rejected(self):
        with pytest.raises(ConfigError, match="reuses types"):
            make_schedule(toy_corpus(), [("X",), ("X", "Y")], "split", "all", seed=1)

    def test_unknown_type_rejected(self):
        with pytest.raises(ConfigError, match="absent from the corpus"):
            make_schedule(toy_corpus(), [("Z",)], "split", "all", seed=1)

    def test_unknown_protocols_rejected(self):
        with pytest.raises(ConfigError):
            make_schedule(toy_corpus(), [("X",)], "chunk", "all", seed=1)
        with pytest.raises(ConfigError):
            make_schedule(toy_corpus(), [("X",)], "split", "some", seed=1)

    def test_empty_train_set_names_the_task(self):
        corpus = toy_corpus()
        corpus.train = corpus.train[:1]  # only an X sentence left; filtering Y finds none
        with pytest.raises(ConfigError, match="task 2"):
            make_schedule(corpus, [("X",), ("Y",)], "filter", "all", seed=1)

    def test_single_task_schedule_degenerates_to_plain_training(self):
        corpus = toy_corpus()
        schedule = make_schedule(corpus, [("X", "Y")], "split", "all", seed=1)
        assert len(schedule.tasks) == 1
        assert Counter(s.id for s in schedule.tasks[0].train) == Counter(
            s.id for s in corpus.train
        )


class TestManifest:
    def test_round_trip_restores_exact_schedule(self):
        corpus = toy_corpus()
        schedule = make_schedule(corpus, [("X",), ("Y",)], "split", "filter", seed=9)
        manifest = schedule_manifest(schedule)
        rebuilt = schedule_from_manifest(corpus, json.loads(json.dumps(manifest)))
        for original, restored in zip(schedule.tasks, rebuilt.tasks):
            assert original.new_types == restored.new_types
            assert original.train == restored.train
            assert original.dev == restored.dev
            assert original.test == restored.test
            assert original.train_full == restored.train_full

    def test_unknown_ids_rejected(self):
        corpus = toy_corpus()
        manifest = schedule_manifest(
            make_schedule(corpus, [("X",), ("Y",)], "split", "all", seed=9)
        )
        manifest["tasks"][0]["train_ids"].append("ghost")
        with pytest.raises(DataValidationError, match="ghost"):
            schedule_from_manifest(corpus, manifest)


class TestOrders:
    def test_named_permutation_expands_to_single_type_tasks(self):
        inventory = {"ORG", "PER", "GPE", "DATE", "CARD", "NORP"}
        order, name = resolve_order("onto-1", inventory)
        assert name == "onto-1"
        assert order == [("ORG",), ("PER",), ("GPE",), ("DATE",), ("CARD",), ("NORP",)]

    def test_inline_spec(self):
        order, name = resolve_order("ORG;PER,GPE", {"ORG", "PER", "GPE"})
        assert order == [("ORG",), ("GPE", "PER")]
        assert name == "custom"

    def test_coarse_groups_expand_through_labels(self):
        inventory = {"LOC-gpe", "LOC-park", "PER-actor", "ORG-company",
                     "OTH-god", "PROD-car", "BUID-hotel", "ART-film", "EVET-war"}
        coarse = infer_coarse_labels(inventory)
        order, _ = resolve_order("fewnerd-1", inventory, coarse)
        assert order[0] == ("LOC-gpe", "LOC-park")
        assert order[1] == ("PER-actor",)

    def test_unknown_order_rejected(self):
        with pytest.raises(ConfigError):
            resolve_order("mystery-42", {"X"})


class TestSentenceValidation:
    def test_zero_tokens_rejected(self):
        with pytest.raises(DataValidationError):
            Sentence(id="bad", tokens=())

    def test_inverted_span_rejected(self):
        with pytest.raises(DataValidationError):
            EntityTriplet(3, 1, "X")
