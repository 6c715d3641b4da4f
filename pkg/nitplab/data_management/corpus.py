"""Byte-level corpus loading and deterministic chunk batching."""

import logging
from pathlib import Path
from typing import Iterator, Union

import numpy as np

logger = logging.getLogger(__name__)

BYTE_VOCAB = 256
PAD_ID = 256

# Seed stream reserved for chunk-order shuffling.
SHUFFLE_STREAM = 2


class CorpusError(ValueError):
    """Raised for unreadable or undersized corpora."""
    pass


def tokenize(data: Union[bytes, str]) -> np.ndarray:
    """
    Map bytes to token ids 0..255.

    Parameters
    ----------
    data : bytes or str
        Raw bytes, or text that is UTF-8 encoded first.

    Returns
    -------
    np.ndarray
        int64 token ids.
    """
    if isinstance(data, str):
        data = data.encode("utf-8")
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def detokenize(ids) -> bytes:
    """Inverse of ``tokenize``; pad ids are dropped."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() > PAD_ID):
        raise CorpusError(f"Token id outside the byte vocabulary [0, {PAD_ID}]")
    return ids[ids != PAD_ID].astype(np.uint8).tobytes()


def load_corpus(path: Union[str, Path]) -> np.ndarray:
    """
    Read a text file, or every file below a directory in sorted order, as one token stream.

    Parameters
    ----------
    path : str or Path
        File or directory.

    Returns
    -------
    np.ndarray
        Concatenated byte token ids.

    Raises
    ------
    CorpusError
        If the path is missing, unreadable or holds no bytes.
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.rglob("*") if p.is_file())
    elif path.is_file():
        files = [path]
    else:
        raise CorpusError(f"Corpus path {path} does not exist")
    chunks = []
    for f in files:
        try:
            chunks.append(f.read_bytes())
        except OSError as e:
            raise CorpusError(f"Cannot read corpus file {f}: {e}") from e
    data = b"".join(chunks)
    if not data:
        raise CorpusError(f"Corpus at {path} is empty")
    logger.info(f"Loaded corpus {path}: {len(files)} file(s), {len(data)} bytes")
    return tokenize(data)


class ChunkBatcher:
    """
    Non-overlapping seq_len chunks served in a seeded, per-epoch shuffled order.

    ``batch(step)`` depends only on (seed, step), so a resumed run sees exactly
    the batches the uninterrupted run would have seen.
    """

    def __init__(self, tokens: np.ndarray, batch_size: int, seq_len: int, seed: int = 0):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size < batch_size * seq_len:
            raise CorpusError(
                f"Corpus too small: {tokens.size} tokens, need at least {batch_size * seq_len} "
                f"(batch_size {batch_size} x seq_len {seq_len})"
            )
        self.num_chunks = tokens.size // seq_len
        self.chunks = tokens[: self.num_chunks * seq_len].reshape(self.num_chunks, seq_len)
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.seed = seed
        self.batches_per_epoch = self.num_chunks // batch_size
        self._order_epoch = -1
        self._order = None

    def _epoch_order(self, epoch: int) -> np.ndarray:
        if epoch != self._order_epoch:
            rng = np.random.default_rng((self.seed, SHUFFLE_STREAM, epoch))
            self._order = rng.permutation(self.num_chunks)
            self._order_epoch = epoch
        return self._order

    def batch(self, step: int) -> np.ndarray:
        """Token ids of shape batch_size × seq_len for a training step."""
        epoch, index = divmod(step, self.batches_per_epoch)
        order = self._epoch_order(epoch)
        picks = order[index * self.batch_size:(index + 1) * self.batch_size]
        return self.chunks[picks]

    def __iter__(self) -> Iterator[np.ndarray]:
        step = 0
        while True:
            yield self.batch(step)
            step += 1
