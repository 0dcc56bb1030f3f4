"""Support-set samplers.

The causal assumptions live here: class balancing acts as an intervention
on the label (removing the environment's influence on class prevalence),
and conditioning on a single environment precludes votes that lean on
environment-specific features. Sampling happens once per query mini-batch,
and the support labels must cover the query labels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, LabeledExample
from .errors import ConfigError, ContractError, CoverageError
from .nwhead import onehot
from .rng import Rng

log = logging.getLogger(__name__)


@dataclass
class SupportSpec:
    """What to sample: class balancing, environment conditioning, size.

    ``subsample_classes`` restricts balanced sampling to a class subset for
    many-class tasks; the sampler always widens it to cover the query labels.
    """

    balanced: bool = True
    env: int | None = None
    n_per_class: int = 8
    subsample_classes: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.balanced and self.n_per_class < 1:
            raise ConfigError(f"n_per_class must be >= 1 when balanced, got {self.n_per_class}")


@dataclass
class SupportBatch:
    """A sampled support set: features with one-hot labels and provenance.

    ``features`` holds raw inputs straight out of the sampler; callers
    re-bind it to extracted feature vectors before the NW head sees it.
    """

    features: object  # (N_s, dim) ndarray, or Tensor once embedded
    onehot_labels: np.ndarray
    source_envs: np.ndarray = field(default=None)
    source_indices: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.onehot_labels.shape[0]
        rows_ok = (self.onehot_labels.sum(axis=1) == 1).all() and (
            (self.onehot_labels == 0) | (self.onehot_labels == 1)
        ).all()
        if not rows_ok:
            raise ContractError("onehot_labels rows must have exactly one 1")
        for arr in (self.source_envs, self.source_indices):
            if arr is not None and len(arr) != n:
                raise ContractError("support batch fields have mismatched row counts")

    def __len__(self) -> int:
        return self.onehot_labels.shape[0]

    @property
    def labels(self) -> np.ndarray:
        return self.onehot_labels.argmax(axis=1)


def _included_classes(ds: Dataset, spec: SupportSpec, query_labels) -> list[int]:
    query_labels = {int(c) for c in query_labels}
    outside = query_labels - set(range(ds.n_classes))
    if outside:
        raise CoverageError(
            f"query labels {sorted(outside)} are not classes of the dataset",
            class_id=min(outside),
        )
    if spec.subsample_classes is None:
        return list(range(ds.n_classes))
    return sorted(set(int(c) for c in spec.subsample_classes) | query_labels)


def _class_bucket(ds: Dataset, env: int | None, c: int) -> np.ndarray:
    return ds.by_class[c] if env is None else ds.by_env_class[(env, c)]


def sample_support(ds: Dataset, spec: SupportSpec, query_labels, rng: Rng) -> SupportBatch:
    """Draw one support set according to ``spec``.

    Balanced mode cycles through the included classes and draws exactly
    ``n_per_class`` examples from each, without replacement inside a class
    (with replacement plus a warning when a bucket is smaller than that).
    Unbalanced mode guarantees coverage with one example per class, then
    fills the remainder uniformly. Raises CoverageError naming the missing
    (env, class) pair when a required bucket is empty.
    """
    if spec.env is not None and spec.env not in ds.by_env:
        raise ConfigError(f"environment {spec.env} not present in dataset")
    included = _included_classes(ds, spec, query_labels)

    if spec.balanced:
        parts = []
        for c in included:
            bucket = _class_bucket(ds, spec.env, c)
            if len(bucket) == 0:
                raise CoverageError(
                    f"no examples of class {c} in environment {spec.env}",
                    env=spec.env,
                    class_id=c,
                )
            if len(bucket) >= spec.n_per_class:
                parts.append(rng.choice(bucket, size=spec.n_per_class, replace=False))
            else:
                log.warning(
                    "class %d has %d examples in env %s; sampling %d with replacement",
                    c, len(bucket), spec.env, spec.n_per_class,
                )
                parts.append(rng.choice(bucket, size=spec.n_per_class, replace=True))
        idx = np.concatenate(parts)
    else:
        total = spec.n_per_class * len(included)
        cover = []
        for c in included:
            bucket = _class_bucket(ds, spec.env, c)
            if len(bucket) == 0:
                raise CoverageError(
                    f"no examples of class {c} in environment {spec.env}",
                    env=spec.env,
                    class_id=c,
                )
            cover.append(int(rng.choice(bucket)))
        pool = ds.by_env[spec.env] if spec.env is not None else np.arange(len(ds))
        remaining = np.setdiff1d(pool, np.array(cover, dtype=np.int64))
        fill_n = total - len(cover)
        if fill_n == 0:
            fill = np.array([], dtype=np.int64)
        elif fill_n <= len(remaining):
            fill = rng.choice(remaining, size=fill_n, replace=False)
        else:
            log.warning("support pool smaller than requested size %d; filling with replacement", total)
            fill = rng.choice(pool, size=fill_n, replace=True)
        idx = np.concatenate([np.array(cover, dtype=np.int64), fill.astype(np.int64)])

    idx = idx.astype(np.int64)
    return SupportBatch(
        features=ds.X[idx],
        onehot_labels=onehot(ds.y[idx], ds.n_classes),
        source_envs=ds.e[idx],
        source_indices=idx,
    )


def sample_env_pair(
    ds: Dataset, n_per_class: int, query_labels, rng: Rng
) -> tuple[SupportBatch, SupportBatch]:
    """Two balanced supports conditioned on two distinct environments.

    The environment pair is uniform over unordered pairs; the two supports
    are drawn independently (datapoints may repeat across the pair).
    """
    if ds.n_envs < 2:
        raise ConfigError(f"need >= 2 environments, dataset has {ds.n_envs}")
    envs = rng.choice(np.array(ds.env_ids), size=2, replace=False)
    first = sample_support(
        ds, SupportSpec(balanced=True, env=int(envs[0]), n_per_class=n_per_class), query_labels, rng
    )
    second = sample_support(
        ds, SupportSpec(balanced=True, env=int(envs[1]), n_per_class=n_per_class), query_labels, rng
    )
    return first, second


def sample_query_batch(ds: Dataset, n_q: int, rng: Rng) -> list[LabeledExample]:
    """Uniform draw without replacement; one support is later sampled per
    mini-batch, not per query."""
    if n_q < 1:
        raise ConfigError(f"n_q must be >= 1, got {n_q}")
    if n_q > len(ds):
        raise ConfigError(f"n_q={n_q} exceeds dataset size {len(ds)}")
    idx = rng.choice(len(ds), size=n_q, replace=False)
    return [ds.examples[i] for i in idx]


def sample_balanced_query_batch(ds: Dataset, n_q: int, rng: Rng) -> list[LabeledExample]:
    """Class-and-environment balanced query draw (the balanced-ERM batch).

    Cycles (env, class) cells with class varying fastest, drawing one
    example per visit without replacement inside a cell, so per-batch class
    counts are equal whenever n_classes divides n_q.
    """
    if n_q < 1:
        raise ConfigError(f"n_q must be >= 1, got {n_q}")
    cells = []
    for env in ds.env_ids:
        for c in range(ds.n_classes):
            bucket = ds.by_env_class[(env, c)]
            if len(bucket) == 0:
                log.warning("skipping empty (env=%s, class=%d) cell in balanced query draw", env, c)
                continue
            cells.append(rng.permutation(bucket))
    if not cells:
        raise ConfigError("no non-empty (env, class) cells to draw from")
    picked = []
    offsets = [0] * len(cells)
    cell_i = 0
    while len(picked) < n_q:
        bucket = cells[cell_i]
        picked.append(int(bucket[offsets[cell_i] % len(bucket)]))
        offsets[cell_i] += 1
        cell_i = (cell_i + 1) % len(cells)
    return [ds.examples[i] for i in picked]
