"""Module defining `PromptTokenizer`, the word-level tokenizer turning the
prompts and instructions of the canonical grammar into text token ids.
"""

from typing import List

import regex as re

from arflow.errors import GrammarError
from arflow.scene import COLORS, LETTERS, NUMBERS, SHAPES


WORDS = (
    ["a", "and", "the", "is", "text", "left", "right", "of", "above", "below"]
    + list(NUMBERS)
    + list(COLORS)
    + [form for shape in SHAPES for form in (shape, shape + "s")]
    + ["remove", "add", "make", "move", "to", "at", "row", "column"]
    + ["keep", "image", "unchanged"]
    + list(LETTERS)
)
TEXT_VOCAB_SIZE = 64

assert len(WORDS) <= TEXT_VOCAB_SIZE, f"The text vocabulary ({len(WORDS)} words) doesn't fit its region"


class PromptTokenizer:
    """Tokenizer of the canonical grammar.

    Words are looked up as they are. Uppercase words that are not in the
    vocabulary (the glyph text) are split into letters, other words are
    lowercased.
    """

    def __init__(self):
        self.vocab = {w: i for i, w in enumerate(WORDS)}

    def preprocess(self, sentence: str) -> str:
        """Normalize the quotes and drop the punctuation of a sentence.

        Args:
            sentence (str): Sentence to normalize.

        Returns:
            Normalized sentence.
        """
        sentence = sentence.replace("’", "'").replace("‘", "'")
        sentence = re.sub(r"['\"]", " ", sentence)
        return re.sub(r"\s*\.+\s*", " ", sentence)

    def word_split(self, sentence: str) -> List[str]:
        """Split a preprocessed sentence into words."""
        return sentence.strip().split()

    def encode(self, sentence: str) -> List[int]:
        """Convert a sentence into text token ids.

        Args:
            sentence (str): Prompt or instruction.

        Raises:
            GrammarError: If a word is not part of the vocabulary.

        Returns:
            Token ids, all in [0, 64).
        """
        ids = []
        for word in self.word_split(self.preprocess(sentence)):
            if word in self.vocab:
                ids.append(self.vocab[word])
            elif re.fullmatch(r"[A-Z]+", word):
                ids.extend(self.vocab[c] for c in word)
            elif word.lower() in self.vocab:
                ids.append(self.vocab[word.lower()])
            else:
                raise GrammarError(f"The word `{word}` is not part of the prompt vocabulary")
        if not ids:
            raise GrammarError("The prompt is empty")
        return ids

    def decode(self, ids: List[int]) -> str:
        """Convert token ids back into space-separated words."""
        return " ".join(WORDS[i] for i in ids)
