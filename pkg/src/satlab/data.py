"""Byte-level corpus handling: train/validation split and seeded window sampling."""

from __future__ import annotations

from pathlib import Path
from typing import Iterator

import numpy as np

BYTE_VOCAB = 256


class CorpusError(ValueError):
    pass


def load_corpus(path) -> np.ndarray:
    data = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    if data.size == 0:
        raise CorpusError(f"{path}: empty corpus")
    return data


def split_corpus(corpus: np.ndarray, seq_len: int, val_fraction: float = 0.05):
    """Return ``(train, val)``; the validation tail is the last ``val_fraction`` of bytes."""
    n = corpus.size
    n_val = max(seq_len + 1, int(n * val_fraction))
    if n - n_val <= seq_len + 1:
        raise CorpusError(
            f"corpus of {n} bytes is too short for seq_len={seq_len} with a {n_val}-byte validation tail"
        )
    return corpus[: n - n_val], corpus[n - n_val :]


def window_offsets(n_train: int, seq_len: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    # one generator per (seed, step): any step's batch is reproducible on its own
    rng = np.random.default_rng([seed, step])
    return rng.integers(0, n_train - seq_len, size=batch_size)


def batch_at(train: np.ndarray, seq_len: int, batch_size: int, seed: int, step: int):
    """The training batch for ``step``: ``(inputs, targets)``, each [B, T] int64."""
    if train.size <= seq_len + 1:
        raise CorpusError(f"training split of {train.size} bytes is too short for seq_len={seq_len}")
    offs = window_offsets(train.size, seq_len, batch_size, seed, step)
    win = train[offs[:, None] + np.arange(seq_len + 1)[None, :]].astype(np.int64)
    return win[:, :-1], win[:, 1:]


def make_batches(corpus: np.ndarray, seq_len: int, batch_size: int, seed: int,
                 val_fraction: float = 0.05, start: int = 0) -> Iterator[tuple]:
    """Endless stream of training batches drawn from the non-validation part of ``corpus``."""
    if corpus.size <= seq_len + 1:
        raise CorpusError(f"corpus of {corpus.size} bytes is too short for seq_len={seq_len}")
    train, _ = split_corpus(corpus, seq_len, val_fraction)
    step = start
    while True:
        yield batch_at(train, seq_len, batch_size, seed, step)
        step += 1


def validation_windows(val: np.ndarray, seq_len: int, max_windows: int) -> np.ndarray:
    """Consecutive windows [N, seq_len + 1] tiling the validation tail from its start."""
    n = min(max_windows, (val.size - 1) // seq_len)
    if n <= 0:
        raise CorpusError("validation tail is shorter than one window")
    starts = np.arange(n) * seq_len
    return val[starts[:, None] + np.arange(seq_len + 1)[None, :]].astype(np.int64)


def eval_windows_from_path(path, seq_len: int, val_fraction: float, max_windows: int,
                           vocab_size: int) -> np.ndarray:
    """Evaluation windows for a data file.

    Raw text is byte-level (requires a 256-token vocabulary) and evaluated on
    its validation tail; a ``.npy`` file holds ready-made integer windows
    [N, T + 1] whose ids must fit the vocabulary.
    """
    path = Path(path)
    if path.suffix == ".npy":
        windows = np.load(path)
        if windows.ndim != 2 or not np.issubdtype(windows.dtype, np.integer):
            raise CorpusError(f"{path}: expected a 2-D integer array of token windows")
        if windows.min() < 0 or windows.max() >= vocab_size:
            raise CorpusError(f"{path}: token ids exceed the checkpoint vocabulary of {vocab_size}")
        return windows.astype(np.int64)
    if vocab_size != BYTE_VOCAB:
        raise CorpusError(
            f"byte-level data needs a {BYTE_VOCAB}-token vocabulary, checkpoint has {vocab_size}"
        )
    _, val = split_corpus(load_corpus(path), seq_len, val_fraction)
    return validation_windows(val, seq_len, max_windows)
