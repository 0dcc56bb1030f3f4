"""Labeled examples and the indexed dataset container.

A Dataset holds (x, y, e) triples with per-class, per-environment and
per-(environment, class) index buckets. Class ids are dense 0..C-1;
environment ids are arbitrary non-negative integers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class LabeledExample:
    """One observation: input vector, class id, environment id.

    Latents are retained by the synthetic generator for diagnostics only
    and never enter model-facing code paths.
    """

    x: np.ndarray
    y: int
    e: int
    latent_zc: np.ndarray | None = field(default=None, repr=False)
    latent_zs: np.ndarray | None = field(default=None, repr=False)


class Dataset:
    def __init__(self, examples, n_classes: int | None = None):
        self.examples = list(examples)
        if not self.examples:
            raise ContractError("a Dataset needs at least one example")
        self.X = np.stack([np.asarray(ex.x, dtype=np.float64) for ex in self.examples])
        self.y = np.array([int(ex.y) for ex in self.examples], dtype=np.int64)
        self.e = np.array([int(ex.e) for ex in self.examples], dtype=np.int64)
        if self.y.min() < 0 or self.e.min() < 0:
            raise ContractError("class and environment ids must be non-negative")
        self.n_classes = int(n_classes) if n_classes is not None else int(self.y.max()) + 1
        if self.y.max() >= self.n_classes:
            raise ContractError(f"label {self.y.max()} exceeds n_classes={self.n_classes}")
        self.env_ids = sorted(int(v) for v in np.unique(self.e))
        self.n_envs = len(self.env_ids)

        order = np.arange(len(self.examples))
        self.by_class = {c: order[self.y == c] for c in range(self.n_classes)}
        self.by_env = {env: order[self.e == env] for env in self.env_ids}
        self.by_env_class = {
            (env, c): order[(self.e == env) & (self.y == c)]
            for env in self.env_ids
            for c in range(self.n_classes)
        }

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset([self.examples[i] for i in idx], n_classes=self.n_classes)
