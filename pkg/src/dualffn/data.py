"""Synthetic byte corpus with controlled per-position difficulty.

Easy spans repeat a short motif of distinct letters, so the next byte is a
deterministic function of the current one (an order-1 predictor nails
them). Hard spans walk a per-span affine congruential sequence rendered
into a disjoint byte range: the successor of a byte changes from span to
span, so no order-1 statistic helps. A sidecar file labels every position
(0 easy, 1 hard), enabling the difficulty-vs-predicted-loops analysis.

Tokenization is byte-level: ids 0..255 are raw bytes, 256 pads, 257 marks
sequence start.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dualffn.config import RunConfig
from dualffn.rng import Rng

PAD_ID = 256
BOS_ID = 257
VOCAB_SIZE = 258

# Disjoint letter blocks: each motif owns its characters outright, so the
# next easy byte is a deterministic function of the current one everywhere
# except span boundaries.
_EASY_MOTIFS = [
    np.frombuffer(m, dtype=np.uint8)
    for m in (b"abcdef", b"ghijk", b"lmnopqr", b"stuv", b"wxyz")
]
_HARD_BASE = 128  # hard bytes live in [128, 128 + _HARD_MOD)
_HARD_MOD = 97


class DataError(ValueError):
    """Corpus files are missing, inconsistent, or malformed."""


@dataclass(frozen=True)
class CorpusSpec:
    size: int = 262144
    seed: int = 0
    easy_span: tuple[int, int] = (24, 64)
    hard_span: tuple[int, int] = (24, 64)


def generate_corpus(spec: CorpusSpec) -> tuple[np.ndarray, np.ndarray]:
    """Returns (bytes, labels) arrays of length spec.size."""
    gen = Rng(spec.seed).stream("corpus")
    out = np.empty(spec.size, dtype=np.uint8)
    labels = np.empty(spec.size, dtype=np.uint8)
    pos = 0
    hard = False
    while pos < spec.size:
        lo, hi = spec.hard_span if hard else spec.easy_span
        span = min(int(gen.integers(lo, hi + 1)), spec.size - pos)
        if hard:
            a = int(gen.integers(2, _HARD_MOD))
            c = int(gen.integers(1, _HARD_MOD))
            x = int(gen.integers(0, _HARD_MOD))
            for i in range(span):
                out[pos + i] = _HARD_BASE + x
                x = (a * x + c) % _HARD_MOD
            labels[pos : pos + span] = 1
        else:
            motif = _EASY_MOTIFS[int(gen.integers(0, len(_EASY_MOTIFS)))]
            reps = int(np.ceil(span / len(motif)))
            out[pos : pos + span] = np.tile(motif, reps)[:span]
            labels[pos : pos + span] = 0
        pos += span
        hard = not hard
    return out, labels


def write_corpus(path: str, labels_path: str, spec: CorpusSpec) -> None:
    data, labels = generate_corpus(spec)
    with open(path, "wb") as fh:
        fh.write(data.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(labels.tobytes())


def load_corpus(path: str, labels_path: str | None = None):
    try:
        with open(path, "rb") as fh:
            data = np.frombuffer(fh.read(), dtype=np.uint8)
    except OSError as e:
        raise DataError(f"cannot read corpus {path}: {e}") from None
    if data.size == 0:
        raise DataError(f"corpus {path} is empty")
    labels = None
    if labels_path:
        try:
            with open(labels_path, "rb") as fh:
                labels = np.frombuffer(fh.read(), dtype=np.uint8)
        except OSError as e:
            raise DataError(f"cannot read labels {labels_path}: {e}") from None
        if labels.size != data.size:
            raise DataError(
                f"label sidecar length {labels.size} != corpus length {data.size}"
            )
    return data, labels


def split_bounds(n: int, eval_frac: float) -> tuple[int, int]:
    """(train_end, corpus_end): the eval split is the corpus tail."""
    train_end = int(n * (1.0 - eval_frac))
    return train_end, n


def train_batch(corpus: np.ndarray, cfg: RunConfig, step: int) -> np.ndarray:
    """Batch for one step: BOS followed by seq_len-1 corpus bytes.

    Window starts are drawn from a stream keyed by (seed, step), so batch
    order is a pure function of the config: resuming at step k reproduces
    the uninterrupted run's batches exactly.
    """
    train_end, _ = split_bounds(corpus.size, cfg.eval_frac)
    width = cfg.seq_len - 1
    if train_end <= width:
        raise DataError(f"corpus too small: train split {train_end} <= window {width}")
    gen = Rng(cfg.seed).stream(f"batch/{step}")
    starts = gen.integers(0, train_end - width, size=cfg.batch_size)
    batch = np.empty((cfg.batch_size, cfg.seq_len), dtype=np.int64)
    batch[:, 0] = BOS_ID
    for i, s in enumerate(starts):
        batch[i, 1:] = corpus[s : s + width]
    return batch


def eval_batches(
    corpus: np.ndarray,
    cfg: RunConfig,
    labels: np.ndarray | None = None,
    max_batches: int | None = None,
):
    """Sequential non-overlapping windows over the eval tail.

    Yields (batch, label_batch) with label -1 at BOS positions.
    """
    train_end, end = split_bounds(corpus.size, cfg.eval_frac)
    width = cfg.seq_len - 1
    starts = list(range(train_end, end - width + 1, width))
    if not starts:
        raise DataError("eval split shorter than one window")
    batches = [starts[i : i + cfg.batch_size] for i in range(0, len(starts), cfg.batch_size)]
    if max_batches is not None:
        batches = batches[:max_batches]
    for group in batches:
        batch = np.empty((len(group), cfg.seq_len), dtype=np.int64)
        batch[:, 0] = BOS_ID
        lab = np.full((len(group), cfg.seq_len), -1, dtype=np.int64)
        for i, s in enumerate(group):
            batch[i, 1:] = corpus[s : s + width]
            if labels is not None:
                lab[i, 1:] = labels[s : s + width]
        yield batch, lab


def order1_accuracy(corpus: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Accuracy of the modal next-byte-given-current-byte predictor.

    Fit on the first half, score on the second half, split by label.
    Validates the easy/hard construction: easy spans are near-deterministic
    under this statistic, hard spans are not.
    """
    half = corpus.size // 2
    table = np.zeros((256, 256), dtype=np.int64)
    np.add.at(table, (corpus[: half - 1].astype(int), corpus[1:half].astype(int)), 1)
    mode = table.argmax(axis=1)

    cur = corpus[half:-1].astype(int)
    nxt = corpus[half + 1 :].astype(int)
    lab = labels[half + 1 :]
    correct = mode[cur] == nxt
    easy = lab == 0
    hard = lab == 1
    easy_acc = float(correct[easy].mean()) if easy.any() else float("nan")
    hard_acc = float(correct[hard].mean()) if hard.any() else float("nan")
    return easy_acc, hard_acc
