"""Tokenization, vocabularies, windowed co-occurrence counts and the PMI lexicon."""

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import _kernels

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = range(4)

DEFAULT_WINDOW = 3
DEFAULT_THRESHOLD = 0.5

# Function words never admitted as concepts.
STOP_WORDS = frozenset("""
a an the and or but if of at by for with about against between into through
during before after above below to from up down in out on off over under
is are was were be been being am has have had do does did this that these
those there here it its he she they them his her their some near while
""".split())

_PUNCT = re.compile(r"[^\w\s]|_")


def tokenize(text):
    """Lowercase, turn punctuation into separators, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


def load_corpus(path):
    with open(path, encoding="utf-8") as fh:
        return [tokenize(line) for line in fh if line.strip()]


class Vocabulary:
    """Token <-> id map. The four special tokens hold ids 0..3."""

    def __init__(self, words):
        words = list(words)
        if tuple(words[:4]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        if len(set(words)) != len(words):
            raise ValueError("duplicate words in vocabulary")
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}

    pad_id, bos_id, eos_id, unk_id = PAD_ID, BOS_ID, EOS_ID, UNK_ID

    @classmethod
    def build(cls, corpus, min_freq=1):
        """Words sorted by descending frequency, then alphabetically."""
        counts = Counter(tok for sent in corpus for tok in sent)
        kept = sorted((w for w, c in counts.items() if c >= min_freq and w not in SPECIALS),
                      key=lambda w: (-counts[w], w))
        return cls(list(SPECIALS) + kept)

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self.index

    def id(self, word):
        return self.index.get(word, UNK_ID)

    def encode(self, tokens, add_special=True):
        ids = [self.id(t) for t in tokens]
        return [BOS_ID] + ids + [EOS_ID] if add_special else ids

    def decode(self, ids, strip_special=True):
        out = []
        for i in ids:
            if strip_special and i in (PAD_ID, BOS_ID):
                continue
            if strip_special and i == EOS_ID:
                break
            out.append(self.words[i])
        return out

    def to_text(self):
        return "\n".join(self.words) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


@dataclass(frozen=True)
class ConceptVocabulary:
    """Vocabulary ids admitted as concepts, kept sorted by id.

    Position ``i`` in a concept probability vector refers to ``concept_ids[i]``.
    """

    concept_ids: tuple
    min_freq: int
    vocab: Vocabulary = field(repr=False, compare=False)

    def __len__(self):
        return len(self.concept_ids)

    def __contains__(self, word):
        if isinstance(word, str):
            return self.vocab.index.get(word, -1) in self.position
        return word in self.position

    @cached_property
    def position(self):
        return {cid: i for i, cid in enumerate(self.concept_ids)}

    @property
    def words(self):
        return [self.vocab.words[i] for i in self.concept_ids]


def build_concept_vocab(corpus, min_freq, vocab=None):
    if not corpus:
        raise ValueError("empty corpus")
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    if vocab is None:
        vocab = Vocabulary.build(corpus)
    counts = Counter(tok for sent in corpus for tok in sent)
    ids = sorted(vocab.index[w] for w, c in counts.items()
                 if c >= min_freq and w not in STOP_WORDS and w in vocab.index and w not in SPECIALS)
    if not ids:
        raise ValueError(f"no concept word reaches min_freq={min_freq}")
    return ConceptVocabulary(tuple(ids), min_freq, vocab)


def extract_concept_labels(caption, cv):
    """Multi-hot vector over ``cv`` marking the concepts present in ``caption`` (ids)."""
    pos = cv.position
    out = np.zeros(len(cv))
    for tok in caption:
        i = pos.get(tok)
        if i is not None:
            out[i] = 1.0
    return out


@dataclass(frozen=True)
class CooccurrenceTable:
    unigram: np.ndarray  # [V] counts per word id
    pair: dict  # (w1, w2) -> count of w2 following w1 within the window
    total_tokens: int
    total_pairs: int
    window: int
    vocab: Vocabulary = field(repr=False, compare=False)

    def _id(self, w):
        return self.vocab.index[w] if isinstance(w, str) else int(w)

    def pair_count(self, w1, w2):
        return self.pair.get((self._id(w1), self._id(w2)), 0)

    def unigram_count(self, w):
        return int(self.unigram[self._id(w)])


def _as_ids(corpus, vocab):
    if vocab is None:
        vocab = Vocabulary.build(corpus)
    ids = [[vocab.id(t) if isinstance(t, str) else int(t) for t in sent] for sent in corpus]
    return ids, vocab


def count_cooccurrence(corpus, window=DEFAULT_WINDOW, vocab=None):
    """Count unigrams and directed pairs (w_i, w_j) with 0 < j - i <= window.

    ``corpus`` is a list of sentences, each a list of tokens (strings, mapped
    through ``vocab``) or ids.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    ids, vocab = _as_ids(corpus, vocab)
    v = len(vocab)
    lengths = np.array([len(s) for s in ids], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    flat = np.fromiter((t for s in ids for t in s), dtype=np.int64, count=int(offsets[-1]))
    unigram = np.bincount(flat, minlength=v).astype(np.int64)
    codes = _kernels.pair_codes(flat, offsets, window, v)
    uniq, cnt = np.unique(codes, return_counts=True)
    pair = {(int(c // v), int(c % v)): int(n) for c, n in zip(uniq, cnt)}
    return CooccurrenceTable(unigram, pair, int(flat.size), int(cnt.sum()), window, vocab)


def merge_tables(tables):
    """Commutative merge of tables built from disjoint corpus shards."""
    first = tables[0]
    pair = Counter()
    unigram = np.zeros_like(first.unigram)
    for t in tables:
        if t.window != first.window or t.vocab.words != first.vocab.words:
            raise ValueError("tables disagree on window or vocabulary")
        pair.update(t.pair)
        unigram = unigram + t.unigram
    return CooccurrenceTable(unigram, dict(sorted(pair.items())), int(unigram.sum()),
                             int(sum(pair.values())), first.window, first.vocab)


def pmi(table, w1, w2):
    """Natural-log PMI of the ordered pair; -inf when the pair never occurs."""
    c1, c2 = table.unigram_count(w1), table.unigram_count(w2)
    if c1 == 0 or c2 == 0:
        raise ValueError("pmi undefined for a word with zero count")
    joint = table.pair_count(w1, w2)
    if joint == 0:
        return -math.inf
    p12 = joint / table.total_pairs
    return math.log(p12 / ((c1 / table.total_tokens) * (c2 / table.total_tokens)))


@dataclass(frozen=True)
class PmiLexicon:
    entries: dict  # (w1, w2) id pair -> pmi, sorted by key
    threshold: float
    window: int
    vocab: Vocabulary = field(repr=False, compare=False)

    def __len__(self):
        return len(self.entries)

    def _key(self, w1, w2):
        ix = self.vocab.index
        return (ix.get(w1, -1) if isinstance(w1, str) else int(w1),
                ix.get(w2, -1) if isinstance(w2, str) else int(w2))

    def __contains__(self, pair):
        return self._key(*pair) in self.entries

    def score(self, w1, w2):
        return self.entries.get(self._key(w1, w2))

    def rows(self):
        """(w1 word, w2 word, pmi) sorted lexicographically by words."""
        words = self.vocab.words
        return sorted((words[a], words[b], s) for (a, b), s in self.entries.items())

    def to_text(self):
        lines = ["w1\tw2\tpmi"] + [f"{a}\t{b}\t{s:.6f}" for a, b, s in self.rows()]
        return "\n".join(lines) + "\n"

    def to_tsv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_tsv(cls, path, vocab, threshold=DEFAULT_THRESHOLD, window=DEFAULT_WINDOW):
        entries = {}
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n").split("\t")
            if header != ["w1", "w2", "pmi"]:
                raise ValueError(f"{path}: bad lexicon header {header}")
            for line in fh:
                if not line.strip():
                    continue
                a, b, s = line.rstrip("\n").split("\t")
                if a in vocab and b in vocab:
                    entries[(vocab.index[a], vocab.index[b])] = float(s)
        return cls(dict(sorted(entries.items())), threshold, window, vocab)


def pmi_scores(table):
    """Vectorized PMI for every observed pair, keyed like ``table.pair``."""
    if not table.pair:
        return {}
    keys = np.array(list(table.pair.keys()), dtype=np.int64)
    joint = np.array(list(table.pair.values()), dtype=np.float64)
    u = table.unigram.astype(np.float64)
    n = float(table.total_tokens)
    p12 = joint / table.total_pairs
    vals = np.log(p12 / ((u[keys[:, 0]] / n) * (u[keys[:, 1]] / n)))
    return {(int(a), int(b)): float(s) for (a, b), s in zip(keys, vals)}


def build_lexicon(table, threshold=DEFAULT_THRESHOLD):
    """Keep the ordered pairs whose PMI is at least ``threshold``."""
    if math.isnan(threshold):
        raise ValueError("threshold is NaN")
    kept = {k: s for k, s in sorted(pmi_scores(table).items()) if s >= threshold}
    return PmiLexicon(kept, float(threshold), table.window, table.vocab)


def build_resources(sentences, window=DEFAULT_WINDOW, threshold=DEFAULT_THRESHOLD, min_freq=1):
    """Vocabulary, concept vocabulary, co-occurrence table and lexicon for tokenized captions."""
    vocab = Vocabulary.build(sentences)
    cv = build_concept_vocab(sentences, min_freq, vocab)
    table = count_cooccurrence(sentences, window, vocab)
    return vocab, cv, table, build_lexicon(table, threshold)
