"""Token vocabulary with reserved padding and unknown ids."""

from __future__ import annotations

from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

PAD_ID = 0
UNK_ID = 1
RESERVED = 2

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


class Vocabulary:
    """Bijective token/id map; id 0 is padding, id 1 is the unknown token."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.token_to_id: dict[str, int] = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
        self.id_to_token: dict[int, str] = {PAD_ID: PAD_TOKEN, UNK_ID: UNK_TOKEN}
        for token in tokens:
            self.add(token)

    def __len__(self) -> int:
        return len(self.token_to_id)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def add(self, token: str) -> int:
        if not token or any(c.isspace() for c in token):
            raise ValueError(f"bad vocabulary token: {token!r}")
        if token in self.token_to_id:
            return self.token_to_id[token]
        idx = len(self.token_to_id)
        self.token_to_id[token] = idx
        self.id_to_token[idx] = token
        return idx

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.token_to_id.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token.get(i, UNK_TOKEN) for i in ids]

    @classmethod
    def from_corpus(cls, token_lists: Iterable[Sequence[str]], min_freq: int = 1) -> "Vocabulary":
        """Build from tokenized captions; tokens below ``min_freq`` map to unknown."""
        counts = Counter()
        for tokens in token_lists:
            counts.update(tokens)
        kept = sorted(t for t, n in counts.items() if n >= min_freq)
        return cls(kept)

    # One token per line; line index equals id minus the reserved offset.
    def save(self, path: str | Path) -> None:
        ordered = [self.id_to_token[i] for i in range(RESERVED, len(self))]
        Path(path).write_text("\n".join(ordered) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([line for line in lines if line])

    def to_list(self) -> list[str]:
        return [self.id_to_token[i] for i in range(RESERVED, len(self))]
