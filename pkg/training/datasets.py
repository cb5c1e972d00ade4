"""
Token datasets for desk-scale runs.

Every dataset is a pair of Splits holding ``inputs``, ``targets`` and
``weights`` arrays of shape (n, T). ``weights`` is the loss mask: only
positions with weight 1 contribute to the loss and to accuracy.
"""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from tensor_core.exceptions import ConfigError

from .config import DatasetKind

logger = logging.getLogger(__name__)

BYTE_VOCAB = 256


@dataclass
class Split:
    inputs: np.ndarray
    targets: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def seq_len(self):
        return self.inputs.shape[1]

    def take(self, indices):
        return Split(self.inputs[indices], self.targets[indices], self.weights[indices])


@dataclass
class Dataset:
    train: Split
    eval: Split
    vocab_size: int


def _empty(seq_len):
    shape = (0, seq_len)
    return Split(np.zeros(shape, dtype=np.int64), np.zeros(shape, dtype=np.int64), np.zeros(shape))


def _split(inputs, targets, weights, eval_fraction):
    n_eval = int(round(len(inputs) * eval_fraction))
    n_train = len(inputs) - n_eval
    train = Split(inputs[:n_train], targets[:n_train], weights[:n_train])
    evaluation = Split(inputs[n_train:], targets[n_train:], weights[n_train:]) if n_eval else _empty(inputs.shape[1])
    return train, evaluation


def modular_addition_tokens(a, b, p):
    """
    Encode ``a + b =`` as ``[a, PLUS, b, EQ]`` with PLUS = p and EQ = p + 1.

    Returns:
        ``(tokens, answer)`` where answer = (a + b) mod p is the target at
        the EQ position.
    """
    return [a, p, b, p + 1], (a + b) % p


def make_modular_addition_dataset(p, n_examples, seed, eval_fraction=0.2, vocab_size=None):
    """
    Sequences encoding ``a b = c`` with c = (a + b) mod p.

    Pairs are drawn without replacement from the p*p possible pairs, so the
    train and eval splits are disjoint and together hold at most p*p pairs.

    Raises:
        ConfigError: If the p + 2 tokens do not fit ``vocab_size``.
    """
    if vocab_size is not None and p + 2 > vocab_size:
        raise ConfigError(f"modular addition with p={p} needs vocab_size >= {p + 2}, got {vocab_size}")
    rng = np.random.default_rng(seed)
    n = min(n_examples, p * p)
    chosen = rng.permutation(p * p)[:n]
    inputs = np.zeros((n, 4), dtype=np.int64)
    targets = np.zeros((n, 4), dtype=np.int64)
    weights = np.zeros((n, 4))
    for row, pair in enumerate(chosen):
        a, b = divmod(int(pair), p)
        tokens, answer = modular_addition_tokens(a, b, p)
        inputs[row] = tokens
        targets[row, 3] = answer
        weights[row, 3] = 1.0
    train, evaluation = _split(inputs, targets, weights, eval_fraction)
    return Dataset(train=train, eval=evaluation, vocab_size=p + 2)


def make_copy_dataset(alphabet, length, n, seed, eval_fraction=0.2, vocab_size=None):
    """
    ``s_1 .. s_L SEP s_1 .. s_L`` as next-token prediction; SEP = alphabet.
    The loss covers the positions that predict the copied half.

    Raises:
        ConfigError: If there are fewer than ``n`` distinct strings or the
            alphabet plus separator do not fit ``vocab_size``.
    """
    if vocab_size is not None and alphabet + 1 > vocab_size:
        raise ConfigError(f"copy dataset with alphabet {alphabet} needs vocab_size >= {alphabet + 1}")
    if alphabet ** length < n:
        raise ConfigError(f"only {alphabet ** length} distinct strings of length {length}, {n} requested")
    rng = np.random.default_rng(seed)
    seen = set()
    strings = []
    while len(strings) < n:
        candidate = tuple(int(t) for t in rng.integers(0, alphabet, size=length))
        if candidate not in seen:
            seen.add(candidate)
            strings.append(candidate)
    full = np.array([list(s) + [alphabet] + list(s) for s in strings], dtype=np.int64)
    inputs = full[:, :-1]
    targets = full[:, 1:]
    weights = np.zeros(inputs.shape)
    weights[:, length:] = 1.0
    train, evaluation = _split(inputs, targets, weights, eval_fraction)
    return Dataset(train=train, eval=evaluation, vocab_size=alphabet + 1)


def make_text_dataset(path, seq_len, eval_fraction=0.2):
    """
    Raw bytes of a file cut into non-overlapping windows of ``seq_len + 1``;
    the eval split is the tail of the file.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"text file {path} does not exist")
    data = np.frombuffer(path.read_bytes(), dtype=np.uint8).astype(np.int64)
    window = seq_len + 1
    n_windows = len(data) // window
    if n_windows < 1:
        raise ConfigError(f"text file {path} is shorter than one window of {window} bytes")
    windows = data[:n_windows * window].reshape(n_windows, window)
    inputs = windows[:, :-1]
    targets = windows[:, 1:]
    weights = np.ones(inputs.shape)
    train, evaluation = _split(inputs, targets, weights, eval_fraction)
    return Dataset(train=train, eval=evaluation, vocab_size=BYTE_VOCAB)


def build_dataset(spec, model_cfg):
    """
    Materialize ``spec`` and check it fits ``model_cfg``.

    Raises:
        ConfigError: If the vocabulary or sequence length of the model is too
            small for the task.
    """
    if spec.kind == DatasetKind.MODULAR_ADD:
        dataset = make_modular_addition_dataset(
            spec.p, spec.n_examples, spec.seed, spec.eval_fraction, vocab_size=model_cfg.vocab_size
        )
    elif spec.kind == DatasetKind.COPY:
        dataset = make_copy_dataset(
            spec.alphabet, spec.length, spec.n_examples, spec.seed, spec.eval_fraction,
            vocab_size=model_cfg.vocab_size,
        )
    else:
        if model_cfg.vocab_size < BYTE_VOCAB:
            raise ConfigError(f"text_file dataset needs vocab_size >= {BYTE_VOCAB}")
        dataset = make_text_dataset(spec.path, model_cfg.seq_len, spec.eval_fraction)
    if dataset.train.seq_len > model_cfg.seq_len:
        raise ConfigError(
            f"{spec.kind.value} sequences have length {dataset.train.seq_len}, model seq_len is {model_cfg.seq_len}"
        )
    if len(dataset.train) == 0:
        raise ConfigError(f"{spec.kind.value} dataset has no training examples")
    logger.debug(
        "Built %s dataset: %s train / %s eval examples", spec.kind.value, len(dataset.train), len(dataset.eval)
    )
    return dataset


def sample_batch(split, batch_size, rng):
    """Draw ``batch_size`` examples with replacement."""
    return split.take(rng.integers(0, len(split), size=batch_size))


def iter_batches(split, batch_size):
    """Walk a split in order, for evaluation."""
    for start in range(0, len(split), batch_size):
        yield split.take(slice(start, start + batch_size))
