from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtbr.attributes import AttributeRecord, FrequencyTable
from vtbr.captions import (
    EOS,
    SOS,
    UNK_ID,
    Caption,
    CaptionTemplate,
    RSConfig,
    build_vocabulary,
    decode_ids,
    encode_caption,
    generate_caption,
    load_corpus,
    rs_select,
    save_corpus,
)
from vtbr.errors import LengthMismatchError, TemplateError

TEMPLATE = CaptionTemplate.parse("a person {with <hair> hair} {in <weather> day}")


def _freq(**probs):
    table = {}
    for key, p in probs.items():
        cat, val = key.split("__")
        table[(cat, val)] = p
    return FrequencyTable(table, 10)


def test_rare_kept_common_dropped():
    rec = AttributeRecord(0, 0, {"hair": "long", "weather": "sunny"})
    cap = generate_caption(rec, TEMPLATE, _freq(hair__long=0.5, weather__sunny=0.9), RSConfig(0.8))
    assert cap.text == "a person with long hair"
    assert cap.tokens[0] == SOS and cap.tokens[-1] == EOS


def test_boundary_probability_included():
    rec = AttributeRecord(0, 0, {"hair": "long", "weather": "sunny"})
    cap = generate_caption(rec, TEMPLATE, _freq(hair__long=0.8, weather__sunny=0.81), RSConfig(0.8))
    assert "long" in cap.tokens and "sunny" not in cap.tokens


def test_threshold_extremes():
    rec = AttributeRecord(0, 0, {"hair": "long", "weather": "sunny"})
    freq = _freq(hair__long=1.0, weather__sunny=0.3)
    assert generate_caption(rec, TEMPLATE, freq, RSConfig(1.0)).text == "a person with long hair in sunny day"
    assert generate_caption(rec, TEMPLATE, freq, RSConfig(0.0)).text == "a person"


def test_all_slots_dropped_without_fixed_words_errors():
    tpl = CaptionTemplate.parse("{with <hair> hair}")
    rec = AttributeRecord(0, 0, {"hair": "long"})
    with pytest.raises(TemplateError):
        generate_caption(rec, tpl, _freq(hair__long=0.9), RSConfig(0.8))


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_alpha_monotone(p_hair, p_weather, a1, a2):
    lo, hi = sorted((a1, a2))
    rec = AttributeRecord(0, 0, {"hair": "long", "weather": "sunny"})
    freq = _freq(hair__long=p_hair, weather__sunny=p_weather)
    small = set(generate_caption(rec, TEMPLATE, freq, RSConfig(lo)).tokens)
    big = set(generate_caption(rec, TEMPLATE, freq, RSConfig(hi)).tokens)
    assert small <= big


def test_template_parse_and_errors():
    tpl = CaptionTemplate.parse("{a <upper> shirt} on a pedestrian")
    assert tpl.categories == ["upper"]
    with pytest.raises(TemplateError):
        CaptionTemplate.parse("a person only")
    with pytest.raises(TemplateError):
        CaptionTemplate.parse("{<hair>} and {<hair>}")
    with pytest.raises(TemplateError):
        CaptionTemplate.parse("{<hair> <bag>}")


def test_rs_alpha_validation():
    with pytest.raises(ValueError):
        RSConfig(1.5)


def _caps(texts, ids):
    return [Caption.from_text(t, i, c) for c, (t, i) in enumerate(zip(texts, ids))]


def test_rs_select_dedups_within_identity():
    recs = [AttributeRecord(0, c, {}) for c in range(4)]
    caps = _caps(["a b", "a c", "a b", "a c"], [0] * 4)
    assert rs_select(recs, caps) == [0, 1]


def test_rs_select_distinct_unchanged():
    recs = [AttributeRecord(i // 2, i, {}) for i in range(6)]
    caps = _caps([f"word {i}" for i in range(6)], [r.identity_id for r in recs])
    assert rs_select(recs, caps) == list(range(6))


def test_rs_select_same_caption_other_identity_kept():
    recs = [AttributeRecord(0, 0, {}), AttributeRecord(1, 0, {})]
    caps = _caps(["same words", "same words"], [0, 1])
    assert rs_select(recs, caps) == [0, 1]


def test_rs_select_halves_two_to_one_fixture():
    recs, caps = [], []
    for pid in range(25):
        for cam in range(4):
            recs.append(AttributeRecord(pid, cam, {}))
            caps.append(Caption.from_text(f"person {pid} look {cam % 2}", pid, cam))
    assert len(rs_select(recs, caps)) == len(recs) // 2


def test_rs_select_length_mismatch():
    with pytest.raises(LengthMismatchError):
        rs_select([AttributeRecord(0, 0, {})], [])


def test_vocabulary_min_freq():
    caps = [Caption.from_text("a person walks"), Caption.from_text("a person stands")]
    v1 = build_vocabulary(caps, 1)
    assert set(v1.id_to_token[4:]) == {"a", "person", "walks", "stands"} and len(v1) == 8
    v2 = build_vocabulary(caps, 2)
    assert set(v2.id_to_token[4:]) == {"a", "person"}
    ids = encode_caption(caps[0], v2)
    assert ids[3] == UNK_ID and ids.count(UNK_ID) == 1


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.sampled_from("abcdefgh"), min_size=1, max_size=6), min_size=1, max_size=10))
def test_vocabulary_stable(word_lists):
    caps = [Caption.from_text(" ".join(ws)) for ws in word_lists]
    assert build_vocabulary(caps).id_to_token == build_vocabulary(list(caps)).id_to_token


def test_encode_decode_roundtrip():
    cap = Caption.from_text("a person walks")
    vocab = build_vocabulary([cap])
    ids = encode_caption(cap, vocab)
    assert decode_ids(ids, vocab) == list(cap.tokens)


def test_empty_caption_rejected():
    with pytest.raises(TemplateError):
        Caption((SOS, EOS))


def test_vocab_and_corpus_files(tmp_path):
    caps = [Caption.from_text("b x", 2, 1), Caption.from_text("a y", 1, 0)]
    save_corpus(caps, tmp_path / "c.jsonl", meta={"seed": 0})
    loaded = load_corpus(tmp_path / "c.jsonl")
    assert [c.text for c in loaded] == ["a y", "b x"]
    vocab = build_vocabulary(caps)
    vocab.save(tmp_path / "v.json")
    assert type(vocab).load(tmp_path / "v.json").id_to_token == vocab.id_to_token
