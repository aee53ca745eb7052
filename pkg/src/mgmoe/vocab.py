"""Closed-world word vocabulary (512 ids) shared by the data generator and the model."""

from __future__ import annotations

import re

PAD, BOS, EOS, REGION_OPEN, REGION_CLOSE, SEG, UNK = range(7)
SPECIALS = ["<pad>", "<bos>", "<eos>", "<region>", "</region>", "<seg>", "<unk>"]

SHAPES = ["disk", "square", "triangle", "ring", "cross", "bar", "blob", "dot"]

_WORDS = """
a an the is are it there this that in of and or to with what which how many
please segment can you show me where find outline mark highlight locate
image picture scene object objects shape shapes region area inside
sure here mask answer question describe list name largest biggest
kind category class type color present visible identify tell see
zero one two three four five six seven eight nine
, . ? :
""".split()

_DIGITS = [str(i) for i in range(10)]

VOCAB_SIZE = 512


def _build():
    words = list(SPECIALS)
    for w in SHAPES + _WORDS + _DIGITS:
        if w not in words:
            words.append(w)
    n_used = len(words)
    words += [f"<unused{i}>" for i in range(VOCAB_SIZE - n_used)]
    return words


ITOS = _build()
STOI = {w: i for i, w in enumerate(ITOS)}
UNUSED = tuple(i for i, w in enumerate(ITOS) if w.startswith("<unused"))

_TOKEN_RE = re.compile(r"<[^>]+>|[a-z0-9]+|[,.?:]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def encode(text: str) -> list[int]:
    return [STOI.get(w, UNK) for w in tokenize(text)]


def decode(ids) -> str:
    return " ".join(ITOS[int(i)] for i in ids)


def shape_id(name: str) -> int:
    return STOI[name]
