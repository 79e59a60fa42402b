import random

import pytest

from modules.textnorm import DEFAULT_CONFIG, NormalizationConfig, RawTranscript, normalize, tokenize_plain


def test_case_and_punctuation():
    assert normalize("Please open the windows.") == ["please", "open", "the", "windows"]


def test_vendor_tags_are_stripped():
    text = "<silence> one woman and <affirmative> uh one man"
    assert normalize(RawTranscript(text, source="vendor-output", vendor="assemblyai")) == [
        "one", "woman", "and", "uh", "one", "man",
    ]


def test_vendor_tags_kept_when_disabled():
    config = NormalizationConfig(strip_vendor_tags=False)
    assert normalize("<silence> hi", config) == ["silence", "hi"]


def test_apostrophe_is_preserved():
    assert normalize("I'm sorry") == ["i'm", "sorry"]
    assert normalize("I’m sorry") == ["i'm", "sorry"]


def test_empty_input():
    assert normalize("") == []
    assert normalize(RawTranscript("")) == []
    assert normalize("  ...  ") == []


def test_leading_speaker_stamp():
    text = "Speaker 0    00:00:00    Um, in a very big city."
    assert normalize(text) == ["um", "in", "a", "very", "big", "city"]


def test_speaker_stamp_only_at_start():
    assert normalize("at 10 12:30 we met") == ["at", "10", "12", "30", "we", "met"]


def test_speaker_stamp_kept_when_disabled():
    config = NormalizationConfig(strip_leading_speaker_stamp=False)
    assert normalize("0 00:05 hello", config) == ["0", "00", "05", "hello"]


def test_digits_kept_by_default_and_mapped_when_configured():
    assert normalize("I have 2 cats") == ["i", "have", "2", "cats"]
    config = NormalizationConfig(digit_word_map={"2": "two", "21": "twenty one"})
    assert normalize("I have 2 cats and 21 dogs", config) == [
        "i", "have", "two", "cats", "and", "twenty", "one", "dogs",
    ]


def test_hyphen_inside_word_kept_and_edges_trimmed():
    assert normalize("A well-known -story- ends") == ["a", "well-known", "story", "ends"]


def test_intra_word_punctuation_separates_tokens():
    assert normalize("U.S. well...okay 2.5 and/or") == ["u", "s", "well", "okay", "2", "5", "and", "or"]
    assert normalize("end.Next") == ["end", "next"]


def test_fillers_are_ordinary_tokens():
    assert normalize("Um, uh... UH") == ["um", "uh", "uh"]


def test_filler_tokens_are_lowercased():
    config = NormalizationConfig(filler_tokens=frozenset({"UM", "Er"}))
    assert config.filler_tokens == frozenset({"um", "er"})


def test_empty_filler_set_rejected():
    with pytest.raises(ValueError):
        NormalizationConfig(filler_tokens=frozenset())


def test_tokenize_plain_uses_default_config():
    assert tokenize_plain("Author of the danger trail.") == normalize("Author of the danger trail.", DEFAULT_CONFIG)


def test_idempotence_on_random_strings():
    rng = random.Random(1234)
    alphabet = "abcdefghij XYZ 0123 .,!?'-’<>: éüñ\t\n"
    for _ in range(1000):
        text = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 40)))
        tokens = normalize(text)
        assert normalize(" ".join(tokens)) == tokens, text


def test_tag_free_input_ignores_tag_setting():
    rng = random.Random(99)
    alphabet = "abc de 12 ,.'-"
    keep = NormalizationConfig(strip_vendor_tags=False)
    for _ in range(200):
        text = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 30)))
        assert normalize(text) == normalize(text, keep)
