from .tagging import (
    AUX_VERBS,
    KEEP_PREFIXES,
    TAG_SET,
    LexiconTagger,
    TaggedToken,
    Tagger,
    TaggerError,
    filter_semantic,
    tag_tokens,
    tokenize,
)
from .vocab import PAD_ID, RESERVED, UNK_ID, UNK_TOKEN, Vocabulary
from .encoding import (
    Caption,
    CaptionError,
    CaptionPipeline,
    TextEncoder,
    TextFeatures,
    build_vocabulary,
    encode_text,
)

__all__ = [
    "AUX_VERBS", "KEEP_PREFIXES", "TAG_SET", "LexiconTagger", "TaggedToken",
    "Tagger", "TaggerError", "filter_semantic", "tag_tokens", "tokenize",
    "PAD_ID", "RESERVED", "UNK_ID", "UNK_TOKEN", "Vocabulary",
    "Caption", "CaptionError", "CaptionPipeline", "TextEncoder",
    "TextFeatures", "build_vocabulary", "encode_text",
]
