"""Caption grammar vocabulary and tokenization.

The caption language is closed: segments of the form
``<count> <color> <shape>[s]`` joined by ``and``, where count is one of
``a | two | three``. The vocabulary covers exactly these words plus two
reserved tokens: ``<null>`` (the unconditional prompt) and ``<pad>``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("circle", "square", "triangle")
COUNT_WORDS = {"a": 1, "two": 2, "three": 3}
NUMBER_TO_COUNT = {1: "a", 2: "two", 3: "three"}

NULL_TOKEN = "<null>"
PAD_TOKEN = "<pad>"

# Longest caption: three "two green triangles" segments joined by "and".
DEFAULT_SEQ_LEN = 12


def plural(shape: str) -> str:
    return shape + "s"


def singular(word: str) -> str | None:
    """Map a shape word (singular or plural) to its singular form."""
    if word in SHAPES:
        return word
    if word.endswith("s") and word[:-1] in SHAPES:
        return word[:-1]
    return None


def tokenize(prompt: str) -> list[str]:
    """Lowercased whitespace tokenization; token indices define spans."""
    return prompt.lower().split()


def _default_tokens() -> list[str]:
    words = [NULL_TOKEN, PAD_TOKEN, "a", "two", "three", "and"]
    words += list(COLORS)
    words += list(SHAPES)
    words += [plural(s) for s in SHAPES]
    return words


@dataclass(frozen=True)
class Vocabulary:
    """Closed vocabulary with fixed sequence length for the denoiser."""

    tokens: tuple[str, ...] = field(default_factory=lambda: tuple(_default_tokens()))
    seq_len: int = DEFAULT_SEQ_LEN

    def __post_init__(self):
        if NULL_TOKEN not in self.tokens or PAD_TOKEN not in self.tokens:
            raise ValueError("vocabulary must contain the null and pad tokens")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def null_id(self) -> int:
        return self.tokens.index(NULL_TOKEN)

    @property
    def pad_id(self) -> int:
        return self.tokens.index(PAD_TOKEN)

    def token_id(self, word: str) -> int:
        try:
            return self.tokens.index(word)
        except ValueError:
            raise KeyError(f"word not in the caption vocabulary: {word!r}") from None

    def encode(self, prompt: str) -> list[int]:
        """Token ids for a prompt, padded or truncated to ``seq_len``."""
        words = tokenize(prompt)
        ids = [self.token_id(w) for w in words][: self.seq_len]
        ids += [self.pad_id] * (self.seq_len - len(ids))
        return ids

    def null_sequence(self) -> list[int]:
        """The reserved unconditional prompt: all null tokens."""
        return [self.null_id] * self.seq_len

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "seq_len": self.seq_len}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(tokens=tuple(d["tokens"]), seq_len=int(d["seq_len"]))
