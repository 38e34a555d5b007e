"""Diverse prompt synthesis, parsing, scoring, and parse-then-detect."""

import numpy as np
import pytest

from promptpose import diverseprompt, synthetic
from promptpose.diverseprompt import (ParsedPrompt, Template, build_parse_prompt,
                                      fallback_parse, load_template_bank,
                                      normalize_name, parse_reply,
                                      parse_then_detect, parsing_accuracy,
                                      prompt_space_size, synthesize)
from promptpose.errors import ParseError
from promptpose.gateway import LLMGateway


@pytest.fixture(scope="module")
def bank():
    return load_template_bank()


class TestTemplateBank:
    def test_bank_has_one_hundred_templates(self, bank):
        assert len(bank) == 100

    def test_twenty_verbatim_templates(self, bank):
        assert sum(1 for t in bank if t.verbatim) == 20

    def test_every_template_has_one_keypoint_slot(self, bank):
        for t in bank:
            assert t.text.count("<keypoint>") == 1

    def test_bank_mixes_object_and_object_free(self, bank):
        kinds = {t.has_object for t in bank}
        assert kinds == {True, False}

    def test_template_without_slot_rejected(self):
        with pytest.raises(ParseError):
            Template(text="where is the nose?")

    def test_custom_bank_file(self, tmp_path):
        import json

        path = tmp_path / "bank.json"
        path.write_text(json.dumps(
            {"templates": [{"text": "find <keypoint> now"}]}))
        custom = load_template_bank(str(path))
        assert len(custom) == 1


class TestSynthesize:
    def test_multi_keypoint_object_template(self):
        out = synthesize("where is the <keypoint> for <obj>?",
                         ["left eye", "right eye"], "cat")
        assert out == "where is the left eye, right eye for cat?"

    def test_single_keypoint_no_comma(self):
        out = synthesize("find the <keypoint>", ["nose"])
        assert out == "find the nose"

    def test_object_free_template_ignores_object(self, caplog):
        import logging

        with caplog.at_level(logging.WARNING):
            out = synthesize("find the <keypoint>", ["nose"], "cat")
        assert out == "find the nose"
        assert any("ignored" in r.message for r in caplog.records)

    def test_missing_object_rejected(self):
        with pytest.raises(ValueError):
            synthesize("the <keypoint> of <obj>", ["nose"])

    def test_empty_keypoints_rejected(self):
        with pytest.raises(ValueError):
            synthesize("find the <keypoint>", [])


class TestPromptSpaceSize:
    def test_single_keypoint(self):
        assert prompt_space_size(100, 1) == 100

    def test_headline_value(self):
        assert prompt_space_size(100, 11) == 204700

    def test_tiny_case(self):
        assert prompt_space_size(1, 2) == 3

    def test_matches_brute_force_enumeration(self):
        from itertools import combinations

        for n in range(1, 11):
            subsets = sum(1 for k in range(1, n + 1)
                          for _ in combinations(range(n), k))
            assert prompt_space_size(7, n) == 7 * subsets

    def test_invalid_n(self):
        with pytest.raises(ValueError):
            prompt_space_size(10, 0)


class TestBuildParsePrompt:
    def test_contains_na_instruction(self):
        (role, text), = build_parse_prompt("find the nose")
        assert role == "user"
        assert "set animal type to N/A" in text

    def test_quotes_input_verbatim(self):
        (_, text), = build_parse_prompt("Can you find the nose on cat?")
        assert '"Can you find the nose on cat?"' in text

    def test_prompts_differ_only_in_quoted_span(self):
        (_, a), = build_parse_prompt("AAA")
        (_, b), = build_parse_prompt("BBB")
        assert a.replace("AAA", "") == b.replace("BBB", "")

    def test_empty_text_rejected(self):
        with pytest.raises(ValueError):
            build_parse_prompt("")


class TestParseReply:
    def test_object_with_newline_separator(self):
        parsed = parse_reply(
            "Animal type: cat; \nKeypoint part: left-back leg, left-front leg")
        assert parsed.object == "cat"
        assert parsed.keypoints == ("left-back leg", "left-front leg")
        assert not parsed.failed

    def test_na_object(self):
        parsed = parse_reply(
            "Animal type: N/A; Keypoint part: left-front leg, left ear")
        assert parsed.object is None
        assert parsed.keypoints == ("left-front leg", "left ear")

    def test_no_labels_fails(self):
        assert parse_reply("no labels here").failed

    def test_no_keypoints_fails(self):
        assert parse_reply("Animal type: cat; Keypoint part:").failed

    def test_schema_canonicalization(self):
        schema = synthetic.schema()
        parsed = parse_reply("Animal type: N/A; Keypoint part: Nose, HORN",
                             schema=schema)
        assert parsed.keypoints == ("nose", "horn")


class TestNormalizeName:
    def test_fold_case_and_whitespace(self):
        assert normalize_name("  Left   Ear ") == "left ear"

    def test_hyphens_preserved_without_schema(self):
        assert normalize_name("Left-Back Leg") == "left-back leg"

    def test_schema_match_folds_punctuation(self):
        schema = synthetic.schema()
        assert normalize_name("NOSE", schema=schema) == "nose"

    def test_synonym_table(self):
        assert normalize_name("snout", synonyms={"snout": "nose"}) == "nose"


class TestFallbackParse:
    def test_round_trip_object_template(self, bank):
        template = next(t for t in bank if t.has_object)
        text = synthesize(template, ["nose", "horn"], "redling")
        parsed = fallback_parse(text, bank, schema=synthetic.schema(),
                                species=list(synthetic.SPECIES))
        assert parsed.keypoints == ("nose", "horn")
        assert parsed.object == "redling"

    def test_round_trip_object_free_template(self, bank):
        template = next(t for t in bank if not t.has_object)
        text = synthesize(template, ["tail"])
        parsed = fallback_parse(text, bank, schema=synthetic.schema())
        assert parsed.keypoints == ("tail",)
        assert parsed.object is None

    def test_dictionary_scan_free_text(self, bank):
        parsed = fallback_parse("honestly the nose of my redling is cute",
                                bank, schema=synthetic.schema(),
                                species=list(synthetic.SPECIES))
        assert parsed.keypoints == ("nose",)
        assert parsed.object == "redling"

    def test_unknown_text_fails(self, bank):
        assert fallback_parse("nothing to see here", bank,
                              schema=synthetic.schema()).failed


class TestParsingAccuracy:
    def p(self, kps, obj=None, failed=False):
        return ParsedPrompt(object=obj, keypoints=tuple(kps), failed=failed)

    def test_exact_match(self):
        acc_kp, acc_obj = parsing_accuracy(
            [self.p(["nose", "left ear"], "cat")],
            [self.p(["nose", "left ear"], "cat")])
        assert (acc_kp, acc_obj) == (1.0, 1.0)

    def test_partial_iou_below_threshold(self):
        acc_kp, _ = parsing_accuracy([self.p(["nose"])],
                                     [self.p(["nose", "left ear"])])
        assert acc_kp == 0.0

    def test_failed_parse_counts_as_incorrect(self):
        acc_kp, acc_obj = parsing_accuracy(
            [self.p([], failed=True)], [self.p(["nose"])])
        assert (acc_kp, acc_obj) == (0.0, 0.0)

    def test_absent_object_matches_absent(self):
        _, acc_obj = parsing_accuracy([self.p(["nose"])], [self.p(["nose"])])
        assert acc_obj == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            parsing_accuracy([self.p(["a"])], [])


class TestParseThenDetect:
    def detect_fn(self, calls):
        def fn(prompts):
            calls.append(list(prompts))
            return [(float(i), float(i)) for i in range(len(prompts))]
        return fn

    def test_fallback_fans_out_per_keypoint(self, bank):
        template = next(t for t in bank if t.has_object)
        text = synthesize(template, ["nose", "horn", "tail"], "redling")
        calls = []
        parsed, preds = parse_then_detect(text, synthetic.schema(),
                                          self.detect_fn(calls),
                                          mode="fallback", bank=bank,
                                          species=list(synthetic.SPECIES))
        assert parsed.keypoints == ("nose", "horn", "tail")
        assert len(preds) == 3
        assert len(calls[0]) == 3
        assert "nose" in calls[0][0] and "redling" in calls[0][0]

    def test_none_mode_feeds_raw_text(self, bank):
        calls = []
        parsed, preds = parse_then_detect("whatever text", synthetic.schema(),
                                          self.detect_fn(calls), mode="none")
        assert parsed is None
        assert calls == [["whatever text"]]
        assert len(preds) == 1

    def test_llm_mode_via_mock_gateway(self):
        gw = LLMGateway(mode="mock", mock_handler=lambda req, rep:
                        "Animal type: redling; Keypoint part: nose, horn")
        calls = []
        parsed, preds = parse_then_detect("find them", synthetic.schema(),
                                          self.detect_fn(calls), mode="llm",
                                          gateway=gw)
        assert parsed.keypoints == ("nose", "horn")
        assert len(preds) == 2

    def test_parse_failure_raises(self, bank):
        with pytest.raises(ParseError):
            parse_then_detect("gibberish", synthetic.schema(),
                              self.detect_fn([]), mode="fallback", bank=bank)

    def test_unknown_mode(self, bank):
        with pytest.raises(ValueError):
            parse_then_detect("x", synthetic.schema(), self.detect_fn([]),
                              mode="psychic")
