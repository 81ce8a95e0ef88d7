"""Rule-based part-of-speech tagging and semantic-word filtering.

Captions are tagged with Penn-style tags by a lexicon-plus-suffix tagger,
then reduced to the words that carry visual meaning: nouns, prepositions,
verbs, and adjectives (tag prefixes NN, IN, VB, JJ). Determiners, pronouns
and other function words are dropped before the caption reaches the text
encoder.

Any object with a ``tag(tokens) -> tags`` method can stand in for the
bundled tagger, so a full statistical tagger can be plugged in unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

# Penn-style tag inventory the bundled tagger can emit.
TAG_SET = frozenset({
    "NN", "NNS", "NNP", "NNPS",
    "VB", "VBD", "VBG", "VBN", "VBP", "VBZ",
    "JJ", "JJR", "JJS",
    "IN", "TO", "DT", "CC", "CD", "MD", "EX", "PDT", "POS", "RP", "UH",
    "PRP", "PRP$", "RB", "RBR", "RBS", "WDT", "WP", "WP$", "WRB",
})

# Tag prefixes that survive filtering. A word is kept iff its tag starts
# with one of these.
KEEP_PREFIXES = ("NN", "IN", "VB", "JJ")

# Forms of "to be"; filtered out only when the auxiliary stoplist is enabled.
AUX_VERBS = frozenset({"is", "are", "was", "were", "am", "be", "been", "being"})


class TaggerError(ValueError):
    """Raised for malformed tagger input (empty tokens, unknown tags)."""


@dataclass(frozen=True)
class TaggedToken:
    """One lowercased word plus its part-of-speech tag."""

    text: str
    tag: str

    def __post_init__(self):
        if not self.text or any(c.isspace() for c in self.text):
            raise TaggerError(f"bad token text: {self.text!r}")
        if self.tag not in TAG_SET:
            raise TaggerError(f"unknown tag {self.tag!r} for {self.text!r}")


class Tagger(Protocol):
    def tag(self, tokens: Sequence[str]) -> list[str]: ...


# Closed-class words are forced to their tag regardless of context, plus a
# lexicon of open-class words common in scene captions. Unlisted words fall
# through to the suffix rules and finally to NN.
_CLOSED_CLASS = {
    "a": "DT", "an": "DT", "the": "DT", "this": "DT", "that": "DT",
    "these": "DT", "those": "DT", "some": "DT", "any": "DT", "each": "DT",
    "every": "DT", "no": "DT",
    "to": "TO",
    "and": "CC", "or": "CC", "but": "CC", "nor": "CC",
    "i": "PRP", "you": "PRP", "he": "PRP", "she": "PRP", "it": "PRP",
    "we": "PRP", "they": "PRP", "them": "PRP", "him": "PRP", "her": "PRP",
    "my": "PRP$", "your": "PRP$", "his": "PRP$", "its": "PRP$",
    "our": "PRP$", "their": "PRP$",
    "can": "MD", "could": "MD", "will": "MD", "would": "MD", "shall": "MD",
    "should": "MD", "may": "MD", "might": "MD", "must": "MD",
    "there": "EX",
    "not": "RB", "very": "RB", "too": "RB", "also": "RB", "just": "RB",
    "what": "WP", "who": "WP", "which": "WDT", "where": "WRB", "when": "WRB",
    "how": "WRB", "why": "WRB",
    "one": "CD", "two": "CD", "three": "CD", "four": "CD", "five": "CD",
    "six": "CD", "seven": "CD", "eight": "CD", "nine": "CD", "ten": "CD",
    "several": "JJ", "couple": "NN",
}

_PREPOSITIONS = (
    "in on at of with under over near by from for into onto above below "
    "behind between through outside inside around across against along "
    "among beside during within without upon off toward towards"
).split()

_VERBS = {
    "is": "VBZ", "are": "VBP", "was": "VBD", "were": "VBD", "am": "VBP",
    "be": "VB", "been": "VBN", "being": "VBG",
    "has": "VBZ", "have": "VBP", "had": "VBD",
    "sits": "VBZ", "sit": "VB", "stands": "VBZ", "stand": "VB",
    "stop": "NN",  # caption usage is overwhelmingly "stop sign"
    "holds": "VBZ", "hold": "VB", "holding": "VBG",
    "lies": "VBZ", "lie": "VB", "rests": "VBZ", "rest": "VB",
    "shows": "VBZ", "show": "VB", "flying": "VBG", "flies": "VBZ",
    "parks": "VBZ", "park": "NN", "walking": "VBG", "grazing": "VBG",
}

_ADJECTIVES = (
    "red green blue yellow purple orange pink brown white black gray grey "
    "dark light bright pale deep "
    "big small large little tiny huge tall short long wide narrow "
    "grassy rural urban wooden glass plastic metal fresh ripe "
    "round flat plain solid empty full new old young clean dirty "
    "blank simple colorful"
).split()

_DEFAULT_LEXICON: dict[str, str] = {}
_DEFAULT_LEXICON.update(_CLOSED_CLASS)
_DEFAULT_LEXICON.update({w: "IN" for w in _PREPOSITIONS})
_DEFAULT_LEXICON.update(_VERBS)
_DEFAULT_LEXICON.update({w: "JJ" for w in _ADJECTIVES})

# (suffix, tag) rules tried longest-match first for words not in the lexicon.
_SUFFIX_RULES = (
    ("ing", "VBG"),
    ("edly", "RB"),
    ("ly", "RB"),
    ("ed", "VBD"),
    ("est", "JJS"),
    ("ies", "NNS"),
    ("es", "NNS"),
    ("s", "NNS"),
)


class LexiconTagger:
    """Lexicon lookup, then suffix rules, then NN for unknown words."""

    def __init__(self, lexicon: dict[str, str] | None = None):
        self.lexicon = dict(_DEFAULT_LEXICON if lexicon is None else lexicon)
        for word, tag in self.lexicon.items():
            if tag not in TAG_SET:
                raise TaggerError(f"lexicon tag {tag!r} for {word!r} not in tag set")

    @classmethod
    def from_file(cls, path: str | Path) -> "LexiconTagger":
        """Load a lexicon from UTF-8 text, one ``token<TAB>tag`` per line."""
        lexicon = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                token, tag = line.split("\t")
            except ValueError:
                raise TaggerError(f"{path}:{lineno}: expected 'token<TAB>tag'") from None
            lexicon[token] = tag
        return cls(lexicon)

    def tag_one(self, token: str) -> str:
        if token in self.lexicon:
            return self.lexicon[token]
        if token.replace(".", "", 1).isdigit():
            return "CD"
        for suffix, tag in _SUFFIX_RULES:
            # Suffix must leave a plausible stem ("is" is not "i" + -s).
            if token.endswith(suffix) and len(token) > len(suffix) + 1:
                if suffix == "s" and token.endswith("ss"):
                    continue
                return tag
        return "NN"

    def tag(self, tokens: Sequence[str]) -> list[str]:
        return [self.tag_one(t) for t in tokens]


def tag_tokens(tokens: Sequence[str], tagger: Tagger) -> list[TaggedToken]:
    """Tag each token, in order. Tokens must be lowercased and non-empty."""
    for t in tokens:
        if not t:
            raise TaggerError("empty token")
    tags = tagger.tag(tokens)
    return [TaggedToken(text=t, tag=g) for t, g in zip(tokens, tags)]


def filter_semantic(
    tagged: Sequence[TaggedToken],
    aux_stoplist: bool = False,
) -> list[str]:
    """Keep only nouns, prepositions, verbs, and adjectives, in order.

    With ``aux_stoplist`` enabled, bare forms of "to be" are dropped as well
    even though their tags match the keep set.
    """
    kept = []
    for tok in tagged:
        if not tok.tag.startswith(KEEP_PREFIXES):
            continue
        if aux_stoplist and tok.text in AUX_VERBS:
            continue
        kept.append(tok.text)
    return kept


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    cleaned = []
    for ch in text.lower():
        if ch.isalnum() or ch.isspace() or ch == "'":
            cleaned.append(ch)
    return "".join(cleaned).split()
