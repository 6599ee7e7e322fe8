"""Tokenization, vocabulary construction and index-sequence codecs."""

import re
from collections import Counter

import numpy as np

PAD, OOV, START, END = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<oov>", "<start>", "<end>")
N_SPECIALS = len(SPECIAL_TOKENS)

_TOKEN_RE = re.compile(r"[.,:;()]|[^\s.,:;()]+")


def tokenize(text):
    """Lowercase and split on whitespace, with . , : ; ( ) as own tokens."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Bidirectional token/index map with reserved specials at 0..3.

    Retained tokens are ordered by (count desc, token asc) so index
    assignment is a pure function of the corpus.
    """

    def __init__(self, tokens, counts=None):
        self.index_to_token = list(SPECIAL_TOKENS) + list(tokens)
        self.token_to_index = {t: i for i, t in enumerate(self.index_to_token)}
        if len(self.token_to_index) != len(self.index_to_token):
            raise ValueError("duplicate token in vocabulary")
        self.counts = dict(counts or {})

    @property
    def size(self):
        return len(self.index_to_token)

    def __len__(self):
        return self.size

    def __contains__(self, token):
        return token in self.token_to_index

    def index(self, token):
        return self.token_to_index.get(token, OOV)

    def token(self, index):
        return self.index_to_token[index]


def build_vocab(corpus, min_count=2):
    """Build a vocabulary from token lists, dropping tokens seen < min_count."""
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for tokens in corpus:
        counts.update(tokens)
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept, {t: counts[t] for t in kept})


def encode(tokens, vocab):
    """Map tokens to indices, wrapped in START/END; unknowns become OOV."""
    return [START] + [vocab.index(t) for t in tokens] + [END]


def decode(indices, vocab):
    """Strip START/END/PAD and map indices back to tokens (OOV to its sentinel)."""
    out = []
    for idx in indices:
        if idx in (START, END, PAD):
            continue
        out.append(vocab.token(idx))
    return out


def strip_pads(indices):
    return [i for i in indices if i != PAD]


def init_word_embeddings(vocab_size, dim=200, rng=None, dtype=np.float64):
    """Trainable word-embedding table, uniform in (-0.05, 0.05)."""
    rng = rng or np.random.default_rng(0)
    return rng.uniform(-0.05, 0.05, size=(vocab_size, dim)).astype(dtype)


def save_vocab(vocab, path):
    """Line-oriented vocab file: 4 reserved lines, then token<TAB>count."""
    with open(path, "w", encoding="utf-8") as fh:
        for tok in SPECIAL_TOKENS:
            fh.write(f"{tok}\n")
        for tok in vocab.index_to_token[N_SPECIALS:]:
            fh.write(f"{tok}\t{vocab.counts.get(tok, 0)}\n")


def load_vocab(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if len(lines) < N_SPECIALS or tuple(lines[:N_SPECIALS]) != SPECIAL_TOKENS:
        raise ValueError(f"{path}: missing reserved-token header")
    tokens, counts = [], {}
    for lineno, line in enumerate(lines[N_SPECIALS:], start=N_SPECIALS + 1):
        try:
            tok, count = line.split("\t")
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected 'token<TAB>count'")
        tokens.append(tok)
        counts[tok] = int(count)
    return Vocabulary(tokens, counts)
