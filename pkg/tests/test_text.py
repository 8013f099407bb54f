import pytest
from hypothesis import given, strategies as st

from dslab.benchmark import DJ_PROMPT, object_ref
from dslab.pairs import synth_instructions
from dslab.scene import DEFAULT_OBJECT_LABELS, DEFAULT_SCENE_LABELS, generate_scene
from dslab.text import SPECIALS, UNK, Vocab, detokenize, grammar_vocab, tokenize


@pytest.fixture(scope="module")
def vocab():
    return grammar_vocab(DEFAULT_SCENE_LABELS, DEFAULT_OBJECT_LABELS)


def test_specials_lead_the_vocabulary(vocab):
    assert tuple(vocab.to_list()[:len(SPECIALS)]) == SPECIALS


def test_region_coordinates_are_single_tokens():
    toks = tokenize("lamp region [0.78,0.12,0.94,0.25]")
    assert toks == ["lamp", "region", "[0.78", "0.12", "0.94", "0.25", "]"]


def test_markers_survive_tokenisation():
    assert tokenize("USER: Hi ASSISTANT:") == ["USER:", "hi", "ASSISTANT:"]


@given(st.lists(st.integers(0, 100), min_size=4, max_size=4), st.sampled_from(DEFAULT_OBJECT_LABELS))
def test_region_round_trip(coords, label):
    text = f"{label} region [" + ",".join(f"{c / 100:.2f}" for c in coords) + "]"
    assert detokenize(tokenize(text)) == text


def test_grammar_covers_generated_text(vocab):
    unknown = set()
    for seed in range(200):
        rec = generate_scene(seed)
        texts = list(rec.captions)
        texts += [t for sample in synth_instructions(rec, seed, 2) for _, t in sample.turns]
        if len(rec.objects) >= 2:
            texts.append(DJ_PROMPT.format(a=object_ref(rec, 0), b=object_ref(rec, 1)))
        for t in texts:
            unknown |= {tok for tok in tokenize(t) if tok not in vocab}
    assert not unknown


def test_unknown_maps_to_unk(vocab):
    assert vocab.encode("zebra") == [vocab.id(UNK)]


def test_vocab_list_round_trip(vocab):
    again = Vocab.from_list(vocab.to_list())
    assert again.to_list() == vocab.to_list()
    with pytest.raises(ValueError):
        Vocab.from_list(["a", "b"])
