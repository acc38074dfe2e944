"""Synthetic multimodal datasets, JSON Lines feature files and batching."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .masking import MaskSet, apply_masks


def default_modality_names(M: int) -> tuple[str, ...]:
    return ("a", "v", "l") if M == 3 else tuple(f"m{i}" for i in range(M))


@dataclass
class DatasetSpec:
    M: int = 3
    dims: tuple[int, ...] = (16, 16, 16)
    classes: int = 4
    n_train: int = 640
    n_val: int = 320
    n_test: int = 320
    snr: tuple[float, ...] = (3.0, 3.0, 3.0)
    seed: int = 0
    modalities: tuple[str, ...] | None = None

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.snr = tuple(float(s) for s in self.snr)
        if self.M < 1 or len(self.dims) != self.M or len(self.snr) != self.M:
            raise ValueError("dims and snr need one entry per modality")
        if any(d <= 0 for d in self.dims):
            raise ValueError("dims must be positive")
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if any(s < 0 for s in self.snr):
            raise ValueError("snr must be non-negative")
        if self.modalities is None:
            self.modalities = default_modality_names(self.M)
        self.modalities = tuple(self.modalities)
        if len(self.modalities) != self.M:
            raise ValueError("one modality name per modality is required")


@dataclass
class Dataset:
    """A full (unmasked) split: per-modality matrices, labels and ids."""

    modalities: tuple[str, ...]
    features: list[np.ndarray]
    labels: np.ndarray
    ids: list[str]
    num_classes: int

    def __post_init__(self):
        self.features = [np.asarray(x, dtype=np.float64) for x in self.features]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.labels.shape[0]
        if any(x.ndim != 2 or x.shape[0] != n for x in self.features):
            raise ValueError("every modality matrix needs one row per label")
        if len(self.ids) != n:
            raise ValueError("one id per sample is required")
        if len(self.modalities) != len(self.features):
            raise ValueError("one name per modality is required")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(x.shape[1] for x in self.features)


@dataclass
class MultimodalBatch:
    """A masked mini-batch. Missing rows of ``features`` are exact zeros."""

    features: list[np.ndarray]
    mask: np.ndarray
    labels: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def M(self) -> int:
        return len(self.features)


def generate_synthetic(spec: DatasetSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Gaussian class-prototype data; returns (train, val, test).

    Each modality has one unit-norm prototype per class.  A sample of class
    ``c`` gets ``snr[m] * proto[m][c] + N(0, I)`` in modality ``m``.
    """
    root = np.random.SeedSequence(spec.seed)
    proto_seq, *split_seqs = root.spawn(4)
    proto_rng = np.random.default_rng(proto_seq)
    protos = []
    for d in spec.dims:
        p = proto_rng.standard_normal((spec.classes, d))
        protos.append(p / np.linalg.norm(p, axis=1, keepdims=True))

    splits = []
    for name, n, seq in zip(("train", "val", "test"), (spec.n_train, spec.n_val, spec.n_test), split_seqs):
        rng = np.random.default_rng(seq)
        labels = rng.integers(0, spec.classes, size=n)
        feats = [
            spec.snr[m] * protos[m][labels] + rng.standard_normal((n, d))
            for m, d in enumerate(spec.dims)
        ]
        ids = [f"{name}-{i:05d}" for i in range(n)]
        splits.append(Dataset(spec.modalities, feats, labels, ids, spec.classes))
    return tuple(splits)


def write_features(path, dataset: Dataset) -> None:
    """Write one JSON record per sample; floats use their shortest exact repr."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, sid in enumerate(dataset.ids):
            rec = {
                "id": sid,
                "label": int(dataset.labels[i]),
                "features": {
                    name: dataset.features[m][i].tolist()
                    for m, name in enumerate(dataset.modalities)
                },
            }
            fh.write(json.dumps(rec) + "\n")


class SchemaError(ValueError):
    pass


def load_features(path, num_classes: int | None = None) -> Dataset:
    """Read a JSON Lines feature file.

    Modality order follows the key order of the first record.  Raises
    ``ValueError`` naming the line for unparsable lines and ``SchemaError``
    for missing keys or inconsistent dimensions.
    """
    path = Path(path)
    ids, labels = [], []
    rows: dict[str, list] = {}
    names: tuple[str, ...] | None = None
    dims: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: cannot parse line ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise SchemaError(f"{path}:{lineno}: record must be an object")
            for key in ("id", "label", "features"):
                if key not in rec:
                    raise SchemaError(f"{path}:{lineno}: missing key {key!r}")
            feats = rec["features"]
            if not isinstance(feats, dict) or not feats:
                raise SchemaError(f"{path}:{lineno}: 'features' must be a non-empty object")
            if names is None:
                names = tuple(feats)
                rows = {n: [] for n in names}
            if set(feats) != set(names):
                raise SchemaError(f"{path}:{lineno}: modalities {sorted(feats)} != {sorted(names)}")
            for n in names:
                vec = feats[n]
                if not isinstance(vec, list) or not vec:
                    raise SchemaError(f"{path}:{lineno}: features[{n!r}] must be a non-empty list")
                if dims.setdefault(n, len(vec)) != len(vec):
                    raise SchemaError(
                        f"{path}:{lineno}: modality {n!r} has dimension {len(vec)}, expected {dims[n]}"
                    )
                rows[n].append(vec)
            if isinstance(rec["label"], bool) or not isinstance(rec["label"], int) or rec["label"] < 0:
                raise SchemaError(f"{path}:{lineno}: label must be a non-negative integer")
            ids.append(str(rec["id"]))
            labels.append(rec["label"])
    if names is None:
        raise SchemaError(f"{path}: no records")
    labels = np.array(labels, dtype=np.int64)
    c = int(labels.max()) + 1 if num_classes is None else num_classes
    if labels.max() >= c:
        raise SchemaError(f"{path}: label {labels.max()} outside [0, {c})")
    feats = [np.array(rows[n], dtype=np.float64) for n in names]
    return Dataset(names, feats, labels, ids, c)


def batch_iter(dataset: Dataset, masks: MaskSet, batch_size: int, seed: int = 0,
               shuffle: bool = True) -> list[MultimodalBatch]:
    """Mask the dataset once, then cut it into batches.

    The final partial batch is kept.  With ``shuffle`` the order is a seeded
    permutation; otherwise file order.
    """
    if len(masks) != len(dataset):
        raise ValueError(f"{len(masks)} masks for {len(dataset)} samples")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    masked = apply_masks(dataset.features, masks)
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    batches = []
    for lo in range(0, n, batch_size):
        idx = order[lo:lo + batch_size]
        batches.append(MultimodalBatch(
            features=[x[idx] for x in masked],
            mask=masks.masks[idx].copy(),
            labels=dataset.labels[idx],
            ids=[dataset.ids[i] for i in idx],
        ))
    return batches
