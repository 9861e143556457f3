"""Deterministic two-stream corpus mixing, packing, and batching.

Documents are byte-tokenized and joined with a reserved separator byte
(0x00); documents containing that byte are rejected at ingest. Block role
assignment (target vs auxiliary) uses a counter-based RNG keyed on
(seed, step, block index), so which block slots are auxiliary never depends
on corpus content, and batch production is reproducible from the sources,
seeds, and schedule alone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, CorpusError, PersistenceError, ValidationError

log = logging.getLogger(__name__)

DOC_SEPARATOR = 0  # reserved byte value between documents

ROLE_TARGET = "target"
ROLE_AUXILIARY = "auxiliary"
ROLE_CODES = {ROLE_TARGET: 0, ROLE_AUXILIARY: 1}


# ---------------------------------------------------------------------------
# Corpus streams
# ---------------------------------------------------------------------------

class CorpusStream:
    """A seeded, cycling stream of byte-tokenized documents.

    Iteration order is a pure function of (document contents, seed): each
    epoch visits every document once in a seeded permutation, and the
    permutation is re-derived from (seed, epoch) when the stream cycles.
    """

    def __init__(
        self,
        documents: Sequence[str],
        seed: int,
        role: str = ROLE_TARGET,
        cycle: bool = True,
    ):
        if role not in ROLE_CODES:
            raise ConfigError(f"role must be one of {sorted(ROLE_CODES)}")
        docs = tuple(documents)
        for i, doc in enumerate(docs):
            if "\x00" in doc:
                raise ValidationError(
                    f"document {i} contains the reserved separator byte 0x00"
                )
            if "\n" in doc:
                raise ValidationError(f"document {i} contains a newline")
        self.documents = docs
        self.seed = seed
        self.role = role
        self.cycle = cycle
        self.epoch = 0
        self._block_iter: Optional[Iterator[np.ndarray]] = None
        self._seq_len: Optional[int] = None

    @classmethod
    def from_file(cls, path, seed: int, role: str = ROLE_TARGET, cycle: bool = True):
        """Newline-delimited UTF-8, one document per line; blank lines skipped."""
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise PersistenceError(f"cannot read corpus {path!r}: {e}") from e
        docs = [line for line in text.split("\n") if line]
        return cls(docs, seed=seed, role=role, cycle=cycle)

    def __len__(self) -> int:
        return len(self.documents)

    def _document_order(self, epoch: int) -> np.ndarray:
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=(epoch,)))
        )
        return rng.permutation(len(self.documents))

    def iter_tokens(self) -> Iterator[np.ndarray]:
        """Yield one token array per document (bytes + trailing separator)."""
        while True:
            for idx in self._document_order(self.epoch):
                raw = self.documents[idx].encode("utf-8")
                yield np.frombuffer(raw + b"\x00", dtype=np.uint8).astype(np.int64)
            self.epoch += 1
            if not self.cycle:
                return
            log.debug("corpus stream (%s, seed=%d) entering epoch %d",
                      self.role, self.seed, self.epoch)

    def next_block(self, seq_len: int) -> np.ndarray:
        """Next packed block; the packer is created on first use."""
        if self._block_iter is None:
            self._block_iter = pack_sequences(self, seq_len)
            self._seq_len = seq_len
        elif seq_len != self._seq_len:
            raise ValueError(
                f"stream already packing at seq_len={self._seq_len}, got {seq_len}"
            )
        try:
            return next(self._block_iter)
        except StopIteration:
            raise CorpusError(
                f"non-cycling {self.role} stream exhausted after epoch {self.epoch}"
            ) from None


def pack_sequences(stream: CorpusStream, seq_len: int) -> Iterator[np.ndarray]:
    """Chunk the stream's token flow into exact seq_len blocks.

    Documents are concatenated with separator tokens; leftover tails carry
    into the next block and partial blocks are never emitted. For a
    non-cycling stream the iterator ends after one pass, so the total token
    count emitted is floor(total tokens / seq_len) * seq_len.
    """
    if seq_len < 2:
        raise ValueError("seq_len must be at least 2")
    if len(stream.documents) == 0:
        raise CorpusError("corpus has no documents")
    buf: list[np.ndarray] = []
    buffered = 0
    for doc_tokens in stream.iter_tokens():
        buf.append(doc_tokens)
        buffered += doc_tokens.size
        if buffered < seq_len:
            continue
        flat = np.concatenate(buf)
        n_full = flat.size // seq_len
        for j in range(n_full):
            yield flat[j * seq_len : (j + 1) * seq_len].copy()
        rest = flat[n_full * seq_len :]
        buf = [rest] if rest.size else []
        buffered = rest.size


# ---------------------------------------------------------------------------
# Mix schedule
# ---------------------------------------------------------------------------

MIX_MODES = ("none", "full", "curriculum")


@dataclass(frozen=True)
class MixSchedule:
    """Step-indexed auxiliary-language block fraction."""

    mode: str = "none"
    aux_fraction: float = 0.20
    cutoff_fraction: float = 0.10
    total_steps: int = 2000

    def __post_init__(self):
        if self.mode not in MIX_MODES:
            raise ConfigError(f"mix.mode must be one of {MIX_MODES}")
        if not 0.0 <= self.aux_fraction < 1.0:
            raise ConfigError("mix.aux_fraction must be in [0, 1)")
        if not 0.0 < self.cutoff_fraction <= 1.0:
            raise ConfigError("mix.cutoff_fraction must be in (0, 1]")
        if self.total_steps <= 0:
            raise ConfigError("mix.total_steps must be positive")

    @property
    def cutoff_step(self) -> int:
        return round(self.cutoff_fraction * self.total_steps)


def mix_fraction_at(step: int, sched: MixSchedule) -> float:
    """Scheduled auxiliary fraction at a training step."""
    if not 0 <= step < sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps})")
    if sched.mode == "none":
        return 0.0
    if sched.mode == "full":
        return sched.aux_fraction
    return sched.aux_fraction if step < sched.cutoff_step else 0.0


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PackedBatch:
    """batch_size blocks of exactly seq_len tokens with per-token role tags."""

    blocks: np.ndarray      # (B, T) int64
    provenance: np.ndarray  # (B, T) uint8 role codes, uniform within a block

    def __post_init__(self):
        if self.blocks.shape != self.provenance.shape:
            raise ValidationError("provenance shape must match blocks")

    @property
    def block_roles(self) -> list[str]:
        inv = {v: k for k, v in ROLE_CODES.items()}
        return [inv[int(c)] for c in self.provenance[:, 0]]

    def aux_token_fraction(self) -> float:
        return float((self.provenance == ROLE_CODES[ROLE_AUXILIARY]).mean())


def _role_draw(seed: int, step: int, block_index: int) -> float:
    bg = np.random.Philox(key=seed, counter=[step, block_index, 0, 0])
    return float(np.random.Generator(bg).random())


def next_batch(
    target: CorpusStream,
    aux: Optional[CorpusStream],
    sched: MixSchedule,
    step: int,
    batch_size: int,
    seq_len: int,
    seed: int,
) -> PackedBatch:
    """Assemble one batch; block roles are Bernoulli(mix_fraction_at(step)).

    The role of block i depends only on (seed, step, i), never on corpus
    content, so swapping auxiliary text cannot move target-tagged slots.
    """
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    fraction = mix_fraction_at(step, sched)
    blocks = np.empty((batch_size, seq_len), dtype=np.int64)
    provenance = np.empty((batch_size, seq_len), dtype=np.uint8)
    for i in range(batch_size):
        take_aux = _role_draw(seed, step, i) < fraction
        if take_aux:
            if aux is None:
                raise CorpusError("schedule requests auxiliary blocks but no aux stream")
            blocks[i] = aux.next_block(seq_len)
            provenance[i] = ROLE_CODES[ROLE_AUXILIARY]
        else:
            blocks[i] = target.next_block(seq_len)
            provenance[i] = ROLE_CODES[ROLE_TARGET]
    return PackedBatch(blocks, provenance)


# ---------------------------------------------------------------------------
# Synthetic corpora
# ---------------------------------------------------------------------------

# each grammar draws its letters from a disjoint printable-ASCII range
GRAMMAR_LETTER_BASE = {0: ord("a"), 1: ord("A"), 2: ord("!")}
_VOCAB_WORDS = 256
_ZIPF_EXPONENT = 1.1


def synthetic_documents(
    seed: int,
    grammar_id: int,
    n_docs: int,
    min_words: int = 8,
    max_words: int = 48,
) -> list[str]:
    """Seeded synthetic corpus for one 'language'.

    Each grammar id owns a disjoint 26-letter byte range, so two grammars
    act as a reversible byte-mapping of one another with disjoint frequent
    bytes; words are drawn from a per-grammar vocabulary with a zipf-like
    rank distribution.
    """
    if grammar_id not in GRAMMAR_LETTER_BASE:
        raise ConfigError(f"grammar_id must be one of {sorted(GRAMMAR_LETTER_BASE)}")
    if n_docs <= 0:
        raise ConfigError("n_docs must be positive")
    if not 1 <= min_words <= max_words:
        raise ConfigError("need 1 <= min_words <= max_words")
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(grammar_id,)))
    )
    base = GRAMMAR_LETTER_BASE[grammar_id]
    alphabet = [chr(base + i) for i in range(26)]

    # skewed letter preferences, then a zipf-ranked word vocabulary
    letter_w = rng.random(26) + 0.1
    letter_p = letter_w / letter_w.sum()
    vocab = []
    seen = set()
    while len(vocab) < _VOCAB_WORDS:
        length = int(rng.integers(2, 10))
        word = "".join(rng.choice(alphabet, size=length, p=letter_p))
        if word not in seen:
            seen.add(word)
            vocab.append(word)
    ranks = np.arange(1, _VOCAB_WORDS + 1, dtype=np.float64)
    word_p = ranks**-_ZIPF_EXPONENT
    word_p /= word_p.sum()

    docs = []
    for _ in range(n_docs):
        n_words = int(rng.integers(min_words, max_words + 1))
        idx = rng.choice(_VOCAB_WORDS, size=n_words, p=word_p)
        docs.append(" ".join(vocab[i] for i in idx))
    return docs


def write_corpus(documents: Sequence[str], path) -> None:
    """One document per line, UTF-8."""
    try:
        Path(path).write_text("\n".join(documents) + "\n", encoding="utf-8")
    except OSError as e:
        raise PersistenceError(f"cannot write corpus {path!r}: {e}") from e
