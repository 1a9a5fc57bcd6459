"""Task-corpus complexity statistics.

Two numbers summarize a text sample for the policy state: lexical entropy
H = -sum p_hat log2 p_hat over the empirical unigram distribution (bits) and
the out-of-vocabulary rate rho = OOV token occurrences / total tokens.  A
Zipf-distributed synthetic corpus with controlled OOV injection provides
cheap, endlessly varied samples for training; real text files are supported
through the same interface.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation; digits count as tokens."""
    return _TOKEN_RE.findall(text.lower())


def lexical_entropy(tokens) -> float:
    """Empirical unigram entropy in bits; rejects empty input."""
    if len(tokens) == 0:
        raise ValueError("cannot compute entropy of an empty token sequence")
    _, counts = np.unique(np.asarray(tokens), return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())


class Vocabulary:
    """Frozen token set; duplicates in the source are treated as an error."""

    def __init__(self, tokens):
        tokens = list(tokens)
        self._set = frozenset(tokens)
        if len(self._set) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        if not self._set:
            raise ValueError("vocabulary is empty")

    def __contains__(self, token):
        return token in self._set

    def __len__(self):
        return len(self._set)

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls([line.strip() for line in fh if line.strip()])


def oov_rate(tokens, vocab: Vocabulary) -> float:
    """Fraction of token occurrences (not types) outside the vocabulary."""
    if len(tokens) == 0:
        raise ValueError("cannot compute OOV rate of an empty token sequence")
    miss = sum(1 for t in tokens if t not in vocab)
    return miss / len(tokens)


@dataclass
class ComplexityStats:
    entropy_bits: float
    oov_rate: float
    token_count: int

    def validate(self):
        if self.token_count <= 0:
            raise ValueError("token_count must be positive")
        if not 0.0 <= self.oov_rate <= 1.0:
            raise ValueError("oov_rate must lie in [0, 1]")
        if self.entropy_bits < 0.0 or not np.isfinite(self.entropy_bits):
            raise ValueError("entropy_bits must be finite and non-negative")


def stats_for_tokens(tokens, vocab: Vocabulary) -> ComplexityStats:
    return ComplexityStats(
        entropy_bits=lexical_entropy(tokens),
        oov_rate=oov_rate(tokens, vocab),
        token_count=len(tokens),
    )


@dataclass
class SyntheticCorpusConfig:
    vocab_size: int = 1000
    oov_pool: int = 200  # distinct OOV types available for injection
    tokens_per_sample: int = 512
    zipf_low: float = 1.1
    zipf_high: float = 1.6
    oov_low: float = 0.02
    oov_high: float = 0.25

    def validate(self):
        if self.vocab_size < 2 or self.oov_pool < 1 or self.tokens_per_sample < 1:
            raise ValueError("synthetic corpus sizes must be positive (vocab >= 2)")
        if not 0.0 <= self.oov_low <= self.oov_high <= 1.0:
            raise ValueError("oov injection range must satisfy 0 <= low <= high <= 1")
        if self.zipf_low > self.zipf_high or self.zipf_low <= 0:
            raise ValueError("zipf exponent range must satisfy 0 < low <= high")


class SyntheticCorpus:
    """Zipf unigram sampler over an integer vocabulary with OOV injection.

    Token identities are integers: [0, vocab_size) are in-vocabulary, the
    next oov_pool ids are OOV.  Only the counts matter for the statistics.
    """

    def __init__(self, config: SyntheticCorpusConfig):
        config.validate()
        self.config = config

    def _zipf_probs(self, a: float) -> np.ndarray:
        ranks = np.arange(1, self.config.vocab_size + 1, dtype=np.float64)
        w = ranks**-a
        return w / w.sum()

    def sample_stats(self, rng, zipf_a=None, oov_frac=None) -> ComplexityStats:
        """Draw one sample and summarize it; exponent/OOV default to rng draws."""
        cfg = self.config
        if zipf_a is None:
            zipf_a = rng.uniform(cfg.zipf_low, cfg.zipf_high)
        if oov_frac is None:
            oov_frac = rng.uniform(cfg.oov_low, cfg.oov_high)
        n = cfg.tokens_per_sample
        ids = rng.choice(cfg.vocab_size, size=n, p=self._zipf_probs(zipf_a))
        oov_mask = rng.random(n) < oov_frac
        n_oov = int(oov_mask.sum())
        if n_oov:
            ids[oov_mask] = cfg.vocab_size + rng.integers(0, cfg.oov_pool, n_oov)
        counts = np.bincount(ids, minlength=1)
        counts = counts[counts > 0]
        p = counts / n
        return ComplexityStats(
            entropy_bits=float(-(p * np.log2(p)).sum()),
            oov_rate=n_oov / n,
            token_count=n,
        )


class FileCorpus:
    """Line-per-sample text corpus scored against an explicit vocabulary."""

    def __init__(self, corpus_path, vocab_path):
        self.vocab = Vocabulary.from_file(vocab_path)
        with open(corpus_path, encoding="utf-8") as fh:
            self.samples = [toks for toks in (tokenize(line) for line in fh) if toks]
        if not self.samples:
            raise ValueError(f"{corpus_path}: no non-empty samples")

    def sample_stats(self, rng) -> ComplexityStats:
        tokens = self.samples[int(rng.integers(0, len(self.samples)))]
        return stats_for_tokens(tokens, self.vocab)
