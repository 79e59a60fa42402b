import json
from pathlib import Path

import pytest

from modules.corpus import (
    Recording,
    Speaker,
    Wordlist,
    filter_sentences,
    load_manifest,
    load_prompts,
    load_wordlist,
    sample,
)
from modules.errors import ManifestError, PreconditionError, SamplingError

SAMPLE_DATA = Path(__file__).parent.parent / "sample_data"


def _write_manifest(tmp_path: Path, data: dict) -> Path:
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


def _manifest(**overrides):
    data = {
        "speakers": [
            {"id": "NCC", "l1": "Chinese", "gender": "F"},
            {"id": "TLV", "l1": "Vietnamese", "gender": "M"},
        ],
        "recordings": [
            {"speaker_id": "NCC", "audio_path": "audio/NCC.wav", "duration_s": 48.2,
             "reference_path": "ref/NCC.txt", "speech_type": "spontaneous"},
            {"recording_id": "TLV_a0001", "speaker_id": "TLV", "audio_path": "audio/a0001.wav",
             "duration_s": 2.5, "speech_type": "read"},
        ],
    }
    data.update(overrides)
    return data


def test_load_manifest(tmp_path):
    speakers, recordings = load_manifest(_write_manifest(tmp_path, _manifest()))
    assert speakers["NCC"] == Speaker(id="NCC", l1="Chinese", gender="F")
    assert [r.recording_id for r in recordings] == ["NCC", "TLV_a0001"]
    first = recordings[0]
    assert isinstance(first, Recording)
    assert first.audio_path == str(tmp_path / "audio" / "NCC.wav")
    assert first.reference_path == str(tmp_path / "ref" / "NCC.txt")
    assert recordings[1].reference_path is None


def test_sample_manifest_loads():
    speakers, recordings = load_manifest(SAMPLE_DATA / "manifest.json")
    assert set(speakers) == {"NCC"}
    assert recordings[0].recording_id == "NCC"
    assert Path(recordings[0].reference_path).is_file()


@pytest.mark.parametrize("mutate", [
    lambda d: d["speakers"].append({"id": "NCC", "l1": "Chinese", "gender": "F"}),
    lambda d: d["recordings"][0].update(speaker_id="nobody"),
    lambda d: d["recordings"][0].update(duration_s=0),
    lambda d: d["recordings"][0].update(duration_s="long"),
    lambda d: d["recordings"][0].update(speech_type="sung"),
    lambda d: d["speakers"][0].update(gender="X"),
    lambda d: d["recordings"][1].update(recording_id="NCC"),
    lambda d: d["recordings"][0].pop("audio_path"),
])
def test_manifest_integrity_errors(tmp_path, mutate):
    data = _manifest()
    mutate(data)
    with pytest.raises(ManifestError):
        load_manifest(_write_manifest(tmp_path, data))


def test_unparseable_manifest(tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ManifestError):
        load_manifest(path)


def test_load_wordlist_and_prompts(tmp_path):
    words = tmp_path / "words.txt"
    words.write_text("# NGSL-style list\nAuthor\nof\nthe\ndanger\ntrail\n\nphilip\n", encoding="utf-8")
    prompts = tmp_path / "arctic.data"
    prompts.write_text(
        '( arctic_a0001 "Author of the danger trail, Philip Steels, etc." )\n'
        "The danger of the trail.\n",
        encoding="utf-8",
    )
    wordlist = load_wordlist(words)
    assert "author" in wordlist
    assert len(wordlist) == 6
    loaded = load_prompts(prompts)
    assert loaded == ["Author of the danger trail, Philip Steels, etc.", "The danger of the trail."]
    assert filter_sentences(loaded, wordlist) == ["The danger of the trail."]


def test_empty_wordlist_rejected(tmp_path):
    words = tmp_path / "words.txt"
    words.write_text("# nothing\n", encoding="utf-8")
    with pytest.raises(PreconditionError):
        load_wordlist(words)
    with pytest.raises(PreconditionError):
        Wordlist(frozenset())


def test_filter_keeps_order_and_handles_punctuation():
    wordlist = Wordlist(frozenset({"i", "am", "here", "you", "are"}))
    prompts = ["You are here!", "I am not here.", "I am here."]
    assert filter_sentences(prompts, wordlist) == ["You are here!", "I am here."]


def test_sample_is_deterministic():
    items = [f"s{i}" for i in range(500)]
    first = sample(items, 100, seed=7)
    assert first == sample(items, 100, seed=7)
    assert len(first) == 100
    assert len(set(first)) == 100
    assert set(first) <= set(items)
    assert first != sample(items, 100, seed=8)


def test_sample_edges():
    assert sample(["a", "b"], 0, seed=1) == []
    assert sorted(sample(["a", "b", "c"], 3, seed=1)) == ["a", "b", "c"]
    with pytest.raises(SamplingError):
        sample(["a", "b"], 3, seed=1)
    with pytest.raises(SamplingError):
        sample(["a"], -1, seed=1)


def test_sample_accepts_large_seeds():
    items = list(range(10))
    assert len(sample(items, 5, seed=2 ** 70)) == 5
