"""Datasets and the moving super-batch.

A super-batch is a FIFO queue of mini-batches reused across objective
evaluations. Replacement policies:

    NR  never replace
    SB  replace the oldest mini-batch after each objective evaluation
    SF  replace every mini-batch after each objective evaluation
    EB  replace the oldest mini-batch after each gradient-free step
    EF  replace every mini-batch after each gradient-free step
"""
from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Deque, Dict, NamedTuple, Optional, Tuple

import numpy as np

POLICIES = ("NR", "EB", "EF", "SB", "SF")
IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DataConfigError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, *sample_shape), values in [0, 1]
    labels: np.ndarray  # (N,) int64
    classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise DataConfigError("input and label counts differ")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DataConfigError("labels must lie in [0, classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, idx: np.ndarray, split: Optional[str] = None) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.classes, split or self.split)


# -- loaders -----------------------------------------------------------------
def synthetic_gaussian(n: int, dims: int, classes: int, seed: int, noise: float = 0.5,
                       image_shape: Optional[Tuple[int, ...]] = None,
                       split: str = "train", spread: float = 1.0) -> Dataset:
    """Class-conditional Gaussians, clipped to [0, 1].

    Class means depend only on (dims, classes, seed) so different splits
    drawn with different ``split`` names share the same class structure.
    """
    if image_shape is not None and int(np.prod(image_shape)) != dims:
        raise DataConfigError(f"image_shape {image_shape} does not hold {dims} values")
    mean_rng = np.random.default_rng([seed, dims, classes])
    means = 0.5 + 0.25 * spread * mean_rng.standard_normal((classes, dims))
    split_key = sum(ord(ch) * 31 ** i for i, ch in enumerate(split)) % (2 ** 31)
    rng = np.random.default_rng([seed, split_key, n])
    labels = rng.permutation(np.arange(n) % classes).astype(np.int64)
    x = means[labels] + noise * rng.standard_normal((n, dims))
    x = np.clip(x, 0.0, 1.0)
    if image_shape is not None:
        x = x.reshape((n,) + tuple(image_shape))
    return Dataset(x, labels, classes, split)


def _read_idx(path: Path, magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError("IDX header truncated", len(raw))
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise FormatError(f"bad IDX magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError("IDX dimension header truncated", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    payload = len(raw) - header
    if payload != expected:
        raise FormatError(f"IDX payload has {payload} bytes, dimensions {dims} need {expected}",
                          header + min(payload, expected))
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, classes: int = 10, split: str = "train") -> Dataset:
    images = _read_idx(images_path, IDX_IMAGE_MAGIC)
    labels = _read_idx(labels_path, IDX_LABEL_MAGIC)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels", 4)
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(x, labels.astype(np.int64), classes, split)


def load_cifar_binary(path, classes: int = 10, split: str = "train") -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD * CIFAR_RECORD
        raise FormatError(f"file size {len(raw)} is not a multiple of {CIFAR_RECORD}", whole)
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if len(labels) and labels.max() >= classes:
        bad = int(np.argmax(labels >= classes))
        raise FormatError(f"label {labels[bad]} out of range", bad * CIFAR_RECORD)
    x = rec[:, 1:].reshape((-1,) + CIFAR_SHAPE).astype(np.float64) / 255.0
    return Dataset(x, labels, classes, split)


def load_dataset(spec: Dict, split: str = "train") -> Dataset:
    """Load a dataset from a spec dict with a ``source`` key."""
    source = spec.get("source")
    if source == "synthetic-gaussian":
        shape = spec.get("image_shape")
        n_key = "n_train" if split == "train" else "n_test"
        return synthetic_gaussian(int(spec.get(n_key, spec.get("n", 1000))), int(spec["dims"]),
                                  int(spec.get("classes", 2)), int(spec.get("seed", 0)),
                                  float(spec.get("noise", 0.5)),
                                  tuple(shape) if shape else None, split,
                                  float(spec.get("spread", 1.0)))
    if source == "idx":
        return load_idx(spec[f"{split}_images"], spec[f"{split}_labels"],
                        int(spec.get("classes", 10)), split)
    if source == "cifar-binary":
        return load_cifar_binary(spec[f"{split}_file"], int(spec.get("classes", 10)), split)
    raise DataConfigError(f"unknown dataset source {source!r}")


# -- super-batch ---------------------------------------------------------------
class MiniBatch(NamedTuple):
    indices: np.ndarray
    x: np.ndarray
    y: np.ndarray


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class SuperBatch:
    def __init__(self, dataset: Dataset, n_minibatches: int, batch_size: int,
                 policy: str = "SB", seed: int = 0):
        if policy not in POLICIES:
            raise DataConfigError(f"unknown replacement policy {policy!r}; expected one of {POLICIES}")
        if n_minibatches < 1:
            raise DataConfigError("a super-batch needs at least one mini-batch")
        if batch_size < 1 or batch_size > len(dataset):
            raise DataConfigError(f"batch size {batch_size} exceeds dataset size {len(dataset)}")
        self.dataset = dataset
        self.n = int(n_minibatches)
        self.batch_size = int(batch_size)
        self.policy = policy
        self.rng = np.random.default_rng(seed)
        self.evaluations = 0
        self.steps = 0
        self.queue: Deque[MiniBatch] = deque(self._draw() for _ in range(self.n))

    def _make(self, idx: np.ndarray) -> MiniBatch:
        idx = _frozen(np.asarray(idx, dtype=np.int64))
        return MiniBatch(idx, _frozen(self.dataset.inputs[idx]), _frozen(self.dataset.labels[idx]))

    def _draw(self) -> MiniBatch:
        return self._make(self.rng.choice(len(self.dataset), self.batch_size, replace=False))

    def _replace_one(self) -> None:
        self.queue.popleft()
        self.queue.append(self._draw())

    def _replace_all(self) -> None:
        for _ in range(self.n):
            self._replace_one()

    def notify_evaluation(self) -> "SuperBatch":
        self.evaluations += 1
        if self.policy == "SB":
            self._replace_one()
        elif self.policy == "SF":
            self._replace_all()
        return self

    def notify_step(self) -> "SuperBatch":
        self.steps += 1
        if self.policy == "EB":
            self._replace_one()
        elif self.policy == "EF":
            self._replace_all()
        return self

    def snapshot(self) -> Tuple[MiniBatch, ...]:
        return tuple(self.queue)

    def __len__(self) -> int:
        return len(self.queue)

    # -- persistence ---------------------------------------------------------
    def get_state(self) -> dict:
        return {"policy": self.policy, "n": self.n, "batch_size": self.batch_size,
                "evaluations": self.evaluations, "steps": self.steps,
                "rng": self.rng.bit_generator.state,
                "queue": [mb.indices.tolist() for mb in self.queue]}

    def set_state(self, state: dict) -> None:
        if (state["policy"], state["n"], state["batch_size"]) != (self.policy, self.n, self.batch_size):
            raise DataConfigError("super-batch state does not match this configuration")
        self.evaluations = int(state["evaluations"])
        self.steps = int(state["steps"])
        self.rng.bit_generator.state = state["rng"]
        self.queue = deque(self._make(np.array(ix)) for ix in state["queue"])


def superbatch_init(dataset: Dataset, n_minibatches: int, batch_size: int,
                    policy: str = "SB", seed: int = 0) -> SuperBatch:
    return SuperBatch(dataset, n_minibatches, batch_size, policy, seed)


def stack_snapshot(snapshot) -> Tuple[np.ndarray, np.ndarray]:
    """Concatenate a snapshot's mini-batches into one (inputs, labels) pair."""
    return (np.concatenate([mb.x for mb in snapshot]), np.concatenate([mb.y for mb in snapshot]))


def overlap(a, b) -> int:
    """Number of mini-batches (by identity) shared between two snapshots."""
    ids = {id(mb.indices) for mb in a}
    return sum(id(mb.indices) in ids for mb in b)
