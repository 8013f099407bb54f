"""Tokenizer and closed-grammar vocabulary shared by the text tower and the toy LM."""

from __future__ import annotations

import re
from typing import Iterable, Sequence

PAD, UNK, BOS, EOS, IMG = "<pad>", "<unk>", "<bos>", "<eos>", "<img>"
USER, ASSISTANT = "USER:", "ASSISTANT:"
SPECIALS = (PAD, UNK, BOS, EOS, IMG, USER, ASSISTANT)

_TOKEN_RE = re.compile(r"USER:|ASSISTANT:|<[a-z]+>|\[?\d+\.\d+|\d+|[A-Za-z_]+|[^\sA-Za-z\d]")


def tokenize(text: str) -> list[str]:
    """Lowercased words; numbers like 0.25 stay whole; punctuation split off.

    A region "[0.10,0.20,0.30,0.40]" becomes "[0.10", "0.20", "0.30", "0.40", "]":
    commas between digits are dropped and the bracket opens the first coordinate,
    so a coordinate always follows the token it is read after. :func:`detokenize`
    restores the written form.
    """
    out = []
    for tok in _TOKEN_RE.findall(re.sub(r"(?<=\d),(?=\d)", " ", text)):
        out.append(tok if tok in (USER, ASSISTANT) else tok.lower())
    return out


def detokenize(tokens: Sequence[str]) -> str:
    text = " ".join(t for t in tokens if t not in (PAD, BOS, EOS, IMG))
    text = re.sub(r"\[ ", "[", text)
    text = re.sub(r" \]", "]", text)
    # numbers inside a bracketed region are comma-separated without spaces
    text = re.sub(r"\[[^\]]*\]", lambda m: re.sub(r"(?<=\d) (?=\d)", ",", m.group(0)), text)
    return text


class Vocab:
    def __init__(self, tokens: Iterable[str]):
        self.itos: list[str] = list(SPECIALS)
        seen = set(self.itos)
        for t in tokens:
            if t not in seen:
                seen.add(t)
                self.itos.append(t)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, self.stoi[UNK])

    def encode(self, text: str) -> list[int]:
        return [self.id(t) for t in tokenize(text)]

    def decode(self, ids: Sequence[int]) -> str:
        return detokenize([self.itos[i] for i in ids])

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocab":
        if tuple(itos[:len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        return cls(itos[len(SPECIALS):])


def grammar_vocab(scene_labels: Sequence[str], object_labels: Sequence[str]) -> Vocab:
    """Every token the caption, prompt, benchmark and instruction templates can emit."""
    from . import benchmark, encoder, pairs, scene

    templates = [
        *scene.CAPTION_TEMPLATES, encoder.ZERO_SHOT_TEMPLATE,
        benchmark.SC_PROMPT, benchmark.REC_PROMPT, benchmark.DJ_PROMPT, benchmark.SEC_PROMPT,
        *pairs.TEMPLATE_TEXTS,
    ]
    words: list[str] = []
    for tpl in templates:
        words.extend(tokenize(re.sub(r"\{[a-z_0-9]*\}", " ", tpl)))
    words.extend(t.lower() for t in scene_labels)
    words.extend(t.lower() for t in object_labels)
    words.extend(f"{k / 100:.2f}" for k in range(101))
    words.extend(f"[{k / 100:.2f}" for k in range(101))
    words.extend("region [ ] , . ? : ;".split())
    return Vocab(sorted(set(words)))
