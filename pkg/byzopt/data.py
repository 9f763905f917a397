from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path
from typing import Iterable, List, Optional

import numpy as np
from scipy import sparse

from .models import Dataset, DataFormatError, WorkerPool, WorkerShard
from .streams import derive

logger = logging.getLogger(__name__)

SHARD_MODES = ("full_copy", "disjoint_shuffle")


def _parse_label(token: str, lineno: int, source: str) -> int:
    try:
        value = float(token)
    except ValueError as exc:
        raise DataFormatError(f"{source}:{lineno}: non-numeric label {token!r}") from exc
    # {-1,+1} and {0,1} conventions both land in {0,1}.
    return 0 if value <= 0 else 1


def _parse_feature(token: str, lineno: int, source: str):
    idx_str, sep, val_str = token.partition(":")
    if not sep:
        raise DataFormatError(f"{source}:{lineno}: expected <index>:<value>, got {token!r}")
    try:
        idx = int(idx_str)
        value = float(val_str)
    except ValueError as exc:
        raise DataFormatError(f"{source}:{lineno}: non-numeric feature {token!r}") from exc
    if idx < 1:
        raise DataFormatError(f"{source}:{lineno}: feature index must be >= 1, got {idx}")
    return idx - 1, value


def parse_libsvm(lines: Iterable[str], source: str = "<lines>", dim: Optional[int] = None) -> Dataset:
    labels: List[int] = []
    indptr = [0]
    indices: List[int] = []
    values: List[float] = []
    max_index = -1

    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        labels.append(_parse_label(tokens[0], lineno, source))
        seen = set()
        for token in tokens[1:]:
            idx, value = _parse_feature(token, lineno, source)
            if idx in seen:
                raise DataFormatError(f"{source}:{lineno}: duplicate feature index {idx + 1}")
            seen.add(idx)
            indices.append(idx)
            values.append(value)
            max_index = max(max_index, idx)
        indptr.append(len(indices))

    if not labels:
        raise DataFormatError(f"{source}: no samples found")

    seen_dim = max_index + 1
    if dim is None:
        dim = seen_dim
    elif dim < seen_dim:
        raise DataFormatError(f"{source}: dim override {dim} is smaller than max index {seen_dim}")
    if dim < 1:
        raise DataFormatError(f"{source}: every row is empty and no dim override was given")

    features = sparse.csr_matrix(
        (np.asarray(values, dtype=float), np.asarray(indices, dtype=np.int64), np.asarray(indptr, dtype=np.int64)),
        shape=(len(labels), dim),
    )
    features.sort_indices()
    return Dataset(features=features, labels=np.asarray(labels, dtype=np.int64), dim=int(dim))


def load_libsvm(path, dim: Optional[int] = None, densify: bool = False, add_bias: bool = False) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"LIBSVM file not found: {path}")
    try:
        with path.open("r", encoding="utf-8", newline=None) as fh:
            dataset = parse_libsvm(fh, source=str(path), dim=dim)
    except UnicodeDecodeError as exc:
        raise DataFormatError(f"{path}: not UTF-8 text at byte {exc.start}") from exc
    if add_bias:
        dataset = with_bias(dataset)
    if densify:
        dataset = replace(dataset, features=np.asarray(dataset.features.toarray()))
    logger.info(
        "loaded %s: %d samples, dim %d, %d positive",
        path,
        dataset.size,
        dataset.dim,
        int(dataset.labels.sum()),
    )
    return dataset


def with_bias(dataset: Dataset) -> Dataset:
    ones = np.ones((dataset.size, 1))
    if sparse.issparse(dataset.features):
        features = sparse.hstack([dataset.features, sparse.csr_matrix(ones)], format="csr")
    else:
        features = np.hstack([dataset.features, ones])
    return replace(dataset, features=features, dim=dataset.dim + 1)


def dump_libsvm(dataset: Dataset, path) -> None:
    rows = sparse.csr_matrix(dataset.features)
    rows.sort_indices()
    lines = []
    for i in range(dataset.size):
        start, end = rows.indptr[i], rows.indptr[i + 1]
        feats = " ".join(f"{j + 1}:{float(v)!r}" for j, v in zip(rows.indices[start:end], rows.data[start:end]))
        lines.append(f"{int(dataset.labels[i])} {feats}".rstrip())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _take(dataset: Dataset, idx: np.ndarray, worker_id: int) -> WorkerShard:
    targets = None if dataset.targets is None else dataset.targets[idx]
    return WorkerShard(
        worker_id=worker_id,
        features=dataset.features[idx],
        labels=dataset.labels[idx],
        targets=targets,
    )


def shard(dataset: Dataset, n_good: int, mode: str = "full_copy", seed: int = 0) -> List[WorkerShard]:
    if n_good < 1:
        raise ValueError("n_good must be at least 1")
    if dataset.size == 0:
        raise ValueError("cannot shard an empty dataset")
    if mode == "full_copy":
        return [
            WorkerShard(worker_id=i, features=dataset.features, labels=dataset.labels, targets=dataset.targets)
            for i in range(n_good)
        ]
    if mode == "disjoint_shuffle":
        if dataset.size < n_good:
            raise ValueError(f"disjoint_shuffle needs at least {n_good} samples, got {dataset.size}")
        perm = derive(seed, "data").permutation(dataset.size)
        return [_take(dataset, np.sort(part), i) for i, part in enumerate(np.array_split(perm, n_good))]
    raise ValueError(f"unknown shard mode: {mode}")


def flip_labels(shard_: WorkerShard) -> WorkerShard:
    if shard_.targets is not None:
        raise ValueError("label flipping needs a classification shard")
    return replace(shard_, labels=1 - shard_.labels)


def build_pool(
    dataset: Dataset,
    n_workers: int,
    byz_count: int,
    mode: str = "full_copy",
    seed: int = 0,
    flip_byzantine_labels: bool = False,
) -> WorkerPool:
    """Good workers get shards; Byzantine workers see the entire dataset."""
    good = shard(dataset, n_workers - byz_count, mode, seed)
    byzantine = []
    for j in range(byz_count):
        byz = WorkerShard(
            worker_id=len(good) + j,
            features=dataset.features,
            labels=dataset.labels,
            targets=dataset.targets,
        )
        byzantine.append(flip_labels(byz) if flip_byzantine_labels else byz)
    return WorkerPool(good=good, byzantine=byzantine)


def make_synthetic_logistic(samples: int = 2000, dim: int = 50, seed: int = 0) -> Dataset:
    rng = derive(seed, "data", salt=1)
    features = rng.standard_normal((samples, dim)) / np.sqrt(dim)
    w_true = 2.0 * rng.standard_normal(dim)
    margins = features @ w_true
    probs = 1.0 / (1.0 + np.exp(-margins))
    labels = (rng.random(samples) < probs).astype(np.int64)
    return Dataset(features=sparse.csr_matrix(features), labels=labels, dim=dim)


def make_quadratic(
    samples: int = 200,
    dim: int = 10,
    seed: int = 0,
    spread: float = 1.0,
    curvature_range=(0.5, 2.0),
    shared_curvature: bool = False,
) -> Dataset:
    """Diagonal quadratic ``f_j(x) = 1/2 * sum_t h_jt (x_t - c_jt)^2``."""
    rng = derive(seed, "data", salt=2)
    low, high = curvature_range
    if shared_curvature:
        curvatures = np.tile(rng.uniform(low, high, size=dim), (samples, 1))
    else:
        curvatures = rng.uniform(low, high, size=(samples, dim))
    centers = spread * rng.standard_normal((samples, dim))
    return Dataset(
        features=curvatures,
        labels=np.zeros(samples, dtype=np.int64),
        dim=dim,
        targets=centers,
    )


def contract_targets(dataset: Dataset, factor: float) -> Dataset:
    """Move quadratic centers toward the optimum; the heterogeneity bound scales by factor**2."""
    if dataset.targets is None:
        raise ValueError("contract_targets needs a quadratic dataset")
    h = np.asarray(dataset.features)
    optimum = (h * dataset.targets).sum(axis=0) / h.sum(axis=0)
    return replace(dataset, targets=optimum + factor * (dataset.targets - optimum))
