"""Byte-level corpus ingestion.

Text is tokenized as raw bytes (ids 0..255); id 256 is reserved as BOS, so
the vocabulary has 257 entries. The corpus is cut into non-overlapping
windows of ``seq_len`` input bytes, each paired with next-byte targets, and
shuffled with a per-epoch permutation derived deterministically from the
seed, so identical seeds always replay the identical batch stream.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

Array = np.ndarray

VOCAB_SIZE = 257  # 256 byte values + BOS
BOS_ID = 256


def load_windows(path: str, seq_len: int) -> tuple[Array, Array]:
    """Cut a corpus file into (inputs, targets) window arrays.

    Yields ``floor((len - 1) / seq_len)`` windows; window j covers bytes
    ``[j*seq_len, (j+1)*seq_len)`` with targets shifted one byte right.
    """
    if seq_len < 2:
        raise ValueError(f"seq_len must be >= 2, got {seq_len}")
    with open(path, "rb") as fh:
        raw = np.frombuffer(fh.read(), dtype=np.uint8).astype(np.int64)
    n_windows = (len(raw) - 1) // seq_len if len(raw) else 0
    if n_windows < 1:
        raise ValueError(
            f"corpus {path} has {len(raw)} bytes, need at least {seq_len + 1}"
        )
    inputs = raw[: n_windows * seq_len].reshape(n_windows, seq_len)
    targets = raw[1 : n_windows * seq_len + 1].reshape(n_windows, seq_len)
    return inputs, targets


def split_holdout(
    inputs: Array, targets: Array, fraction: float = 0.05
) -> tuple[tuple[Array, Array], tuple[Array, Array]]:
    """Reserve the final ``fraction`` of windows (at least one) for evaluation."""
    n_eval = max(1, int(round(len(inputs) * fraction)))
    if n_eval >= len(inputs):
        raise ValueError("corpus too small to hold out an evaluation split")
    cut = len(inputs) - n_eval
    return (inputs[:cut], targets[:cut]), (inputs[cut:], targets[cut:])


def epoch_order(n_windows: int, seed: int, epoch: int) -> Array:
    """Deterministic window permutation for one epoch."""
    return np.random.default_rng([seed, epoch]).permutation(n_windows)


def batch_at(
    inputs: Array, targets: Array, batch_size: int, seed: int, step: int
) -> tuple[Array, Array]:
    """Batch for a global step, derived statelessly from (seed, step)."""
    per_epoch = len(inputs) // batch_size
    if per_epoch < 1:
        raise ValueError(
            f"batch_size {batch_size} exceeds the {len(inputs)} available windows"
        )
    epoch, idx = divmod(step, per_epoch)
    order = epoch_order(len(inputs), seed, epoch)
    rows = order[idx * batch_size : (idx + 1) * batch_size]
    return inputs[rows], targets[rows]


def ingest_corpus(
    path: str, seq_len: int, batch_size: int, seed: int
) -> Iterator[tuple[Array, Array]]:
    """Endless deterministic batch stream over a corpus file."""
    inputs, targets = load_windows(path, seq_len)
    step = 0
    while True:
        yield batch_at(inputs, targets, batch_size, seed, step)
        step += 1


def eval_batches(inputs: Array, targets: Array, batch_size: int) -> list[tuple[Array, Array]]:
    """Fixed-order batches covering every window once (last one may be short)."""
    return [
        (inputs[i : i + batch_size], targets[i : i + batch_size])
        for i in range(0, len(inputs), batch_size)
    ]
