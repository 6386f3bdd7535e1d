"""Character-level tokenizer with PAD/BOS/EOS/UNK specials."""

from __future__ import annotations

import logging
import string

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
DEFAULT_ALPHABET = "".join(ch for ch in string.printable if ch not in "\t\n\r\x0b\x0c")
UNK_CHAR = "�"


class CharTokenizer:
    def __init__(self, alphabet: str = DEFAULT_ALPHABET):
        if len(set(alphabet)) != len(alphabet):
            raise ValueError("alphabet contains duplicate characters")
        self.alphabet = alphabet
        self._ids = {ch: i + len(SPECIALS) for i, ch in enumerate(alphabet)}

    @classmethod
    def from_texts(cls, texts, base: str = DEFAULT_ALPHABET) -> "CharTokenizer":
        extra = sorted({ch for t in texts for ch in t} - set(base))
        return cls(base + "".join(extra))

    @property
    def vocab_size(self) -> int:
        return len(SPECIALS) + len(self.alphabet)

    def encode(self, text: str) -> list[int]:
        ids = []
        unknown = set()
        for ch in text:
            idx = self._ids.get(ch)
            if idx is None:
                unknown.add(ch)
                idx = UNK
            ids.append(idx)
        if unknown:
            logger.warning("mapped out-of-alphabet characters to UNK: %s", "".join(sorted(unknown)))
        return ids

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i in (PAD, BOS, EOS):
                continue
            if i == UNK:
                out.append(UNK_CHAR)
            elif len(SPECIALS) <= i < self.vocab_size:
                out.append(self.alphabet[i - len(SPECIALS)])
            else:
                raise ValueError(f"token id {i} outside vocabulary of size {self.vocab_size}")
        return "".join(out)

    def __eq__(self, other):
        return isinstance(other, CharTokenizer) and other.alphabet == self.alphabet

    def __repr__(self):
        return f"CharTokenizer(vocab_size={self.vocab_size})"
