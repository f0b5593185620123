"""
Word-level tokenizer over the synthetic vocabulary, plus the fixed turn templates
"""
import logging
import re

from config import (
    RESERVED_TOKENS, PAD_TOKEN, UNK_TOKEN, EOA_TOKEN, QUESTION_TOKEN, SPEAKERS,
    ENTITY_NAMES, ATTRIBUTE_VALUES, DISTRACTOR_TEMPLATES, DISTRACTOR_ADJECTIVES,
    FACT_TEMPLATE, QUESTION_TEMPLATE
)
from utils.errors import ConfigError

logger = logging.getLogger(__name__)

_PUNCT = re.compile(r"([:?.,!])")
_PLACEHOLDER = re.compile(r"\{[a-z_]+\}")


def normalize_text(text):
    """Lowercase and split punctuation into separate words"""
    return " ".join(_PUNCT.sub(r" \1 ", str(text).lower()).split())


def lexicon_words():
    """Every word the synthetic benchmark and pretraining corpus can produce, in a fixed order"""
    words = [":", "?", ".", ","]
    for template in [FACT_TEMPLATE, QUESTION_TEMPLATE] + DISTRACTOR_TEMPLATES:
        words.extend(normalize_text(_PLACEHOLDER.sub(" ", template)).split())
    words.extend(DISTRACTOR_ADJECTIVES)
    words.extend(SPEAKERS)
    words.extend(ENTITY_NAMES)
    for attribute, values in ATTRIBUTE_VALUES.items():
        words.append(attribute)
        for value in values:
            words.extend(value.split())
    seen = set(RESERVED_TOKENS)
    ordered = []
    for w in words:
        if w not in seen:
            seen.add(w)
            ordered.append(w)
    return ordered


class WordTokenizer:
    """Whitespace word tokenizer with reserved pad / unknown / end-of-answer / question tokens"""

    def __init__(self, vocabulary):
        vocabulary = list(vocabulary)
        if vocabulary[:len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            raise ConfigError(f"vocabulary must start with the reserved tokens {RESERVED_TOKENS}")
        if len(set(vocabulary)) != len(vocabulary):
            raise ConfigError("vocabulary contains duplicate words")
        self.vocabulary = vocabulary
        self.index = {w: i for i, w in enumerate(vocabulary)}
        self.pad_id = self.index[PAD_TOKEN]
        self.unk_id = self.index[UNK_TOKEN]
        self.eoa_id = self.index[EOA_TOKEN]
        self.question_id = self.index[QUESTION_TOKEN]

    @classmethod
    def from_lexicon(cls):
        return cls(RESERVED_TOKENS + lexicon_words())

    @property
    def size(self):
        return len(self.vocabulary)

    def encode(self, text):
        return [self.index.get(w, self.unk_id) for w in normalize_text(text).split()]

    def oov_words(self, text):
        return [w for w in normalize_text(text).split() if w not in self.index]

    def decode(self, token_ids, skip_reserved=True):
        words = []
        for i in token_ids:
            word = self.vocabulary[int(i)] if 0 <= int(i) < self.size else UNK_TOKEN
            if skip_reserved and word in RESERVED_TOKENS:
                continue
            words.append(word)
        return " ".join(words)

    # Fixed templates. Every evaluated condition receives exactly these token sequences.

    def encode_turn(self, speaker, text):
        return self.encode(f"{speaker} : {text}")

    def encode_question(self, question):
        return [self.question_id] + self.encode(question)

    def encode_answer(self, answer):
        return self.encode(answer) + [self.eoa_id]
