"""Recurrent caption encoder producing word and sentence features."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .tagging import Tagger, filter_semantic, tag_tokens, tokenize
from .vocab import UNK_ID, UNK_TOKEN, Vocabulary


class CaptionError(ValueError):
    """Raised when a caption cannot be encoded (e.g. empty after filtering)."""


@dataclass
class Caption:
    """A caption at every pipeline stage, from raw tokens to vocab ids."""

    raw_tokens: list[str]
    tagged: list  # list[TaggedToken]
    filtered_tokens: list[str]
    ids: list[int]

    @property
    def length(self) -> int:
        return len(self.filtered_tokens)


@dataclass
class TextFeatures:
    """Per-word features (length x dim) and one sentence feature (dim)."""

    word_features: torch.Tensor
    sentence_feature: torch.Tensor


@dataclass
class CaptionPipeline:
    """Tokenize, tag, filter, and index captions against one vocabulary.

    With ``use_pos`` off, filtering is skipped and all tokens are kept; the
    vocabulary must then have been built from unfiltered text.
    """

    tagger: Tagger
    vocab: Vocabulary
    use_pos: bool = True
    max_len: int = 16
    aux_stoplist: bool = False

    def prepare(self, text: str) -> Caption:
        raw = tokenize(text)
        tagged = tag_tokens(raw, self.tagger)
        if self.use_pos:
            kept = filter_semantic(tagged, aux_stoplist=self.aux_stoplist)
        else:
            kept = list(raw)
        kept = kept[: self.max_len]
        if not kept:
            # Placeholder keeps downstream shapes valid for captions that
            # filter to nothing.
            kept = [UNK_TOKEN]
        return Caption(raw_tokens=raw, tagged=tagged, filtered_tokens=kept,
                       ids=self.vocab.encode(kept))

    def corpus_tokens(self, text: str) -> list[str]:
        """Tokens this pipeline would feed the vocabulary builder."""
        raw = tokenize(text)
        if not self.use_pos:
            return raw
        return filter_semantic(tag_tokens(raw, self.tagger), aux_stoplist=self.aux_stoplist)


def build_vocabulary(captions, tagger: Tagger, use_pos: bool = True,
                     aux_stoplist: bool = False, min_freq: int = 1) -> Vocabulary:
    """Vocabulary over the (optionally POS-filtered) caption corpus."""
    token_lists = []
    for text in captions:
        raw = tokenize(text)
        if use_pos:
            token_lists.append(filter_semantic(tag_tokens(raw, tagger),
                                               aux_stoplist=aux_stoplist))
        else:
            token_lists.append(raw)
    return Vocabulary.from_corpus(token_lists, min_freq=min_freq)


class TextEncoder(nn.Module):
    """Embedding + bidirectional GRU.

    Word features are the per-step outputs (feature_dim = 2 * hidden), and
    the sentence feature concatenates the final states of both directions,
    so word and sentence features share one width.
    """

    def __init__(self, vocab_size: int, embed_dim: int = 32, feature_dim: int = 32):
        super().__init__()
        if feature_dim % 2 != 0:
            raise ValueError("feature_dim must be even (two GRU directions)")
        self.feature_dim = feature_dim
        self.embedding = nn.Embedding(vocab_size, embed_dim, padding_idx=0)
        self.rnn = nn.GRU(embed_dim, feature_dim // 2, batch_first=True,
                          bidirectional=True)

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor):
        """ids: (B, L) int64, zero-padded; lengths: (B,) actual lengths.

        Returns word features (B, L, D) and sentence features (B, D).
        """
        emb = self.embedding(ids)
        packed = pack_padded_sequence(emb, lengths.cpu(), batch_first=True,
                                      enforce_sorted=False)
        output, hidden = self.rnn(packed)
        words, _ = pad_packed_sequence(output, batch_first=True,
                                       total_length=ids.size(1))
        # hidden: (2, B, D/2) -> (B, D)
        sentence = torch.cat([hidden[0], hidden[1]], dim=1)
        return words, sentence


def encode_text(caption: Caption, encoder: TextEncoder,
                deterministic: bool = False) -> TextFeatures:
    """Encode one caption. ``deterministic`` switches the encoder to eval mode."""
    if not caption.ids:
        raise CaptionError("caption has no ids; substitute the unknown token")
    if deterministic:
        encoder.eval()
    ids = torch.tensor([caption.ids], dtype=torch.long)
    lengths = torch.tensor([len(caption.ids)], dtype=torch.long)
    words, sentence = encoder(ids, lengths)
    return TextFeatures(word_features=words[0], sentence_feature=sentence[0])
