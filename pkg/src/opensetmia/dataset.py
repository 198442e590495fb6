"""Identity-labelled sample populations and the three-way identity split.

A population is a set of individuals, each observed through several
"pictures" (feature vectors in the unit cube). Splits follow the
known/unknown protocol: one third of the identities train the target
model, one third provide non-members for the attack, and the last third
provide never-seen non-members for evaluation.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._util import ContractError, DataFormatError, substream

ROTATIONS = {"rot90": 90, "rot180": 180, "rot270": 270, "rot330": 330}
AUGMENTATIONS = ("flip", "brightness", *ROTATIONS)


@dataclass(frozen=True)
class Sample:
    sample_id: str
    individual_id: int
    features: tuple[float, ...]
    source: str = "synthetic"


class Dataset:
    """Immutable, ordered collection of samples sharing one feature dimension."""

    def __init__(self, sample_ids: Sequence[str], individual_ids, features, sources=None):
        features = np.array(features, dtype=np.float64)
        if features.ndim != 2:
            raise ContractError("features must be a 2-D array (n_samples, feature_dim)")
        n = features.shape[0]
        if n and features.shape[1] < 1:
            raise ContractError("feature_dim must be positive")
        if len(sample_ids) != n or len(individual_ids) != n:
            raise ContractError("sample_ids, individual_ids and features disagree in length")
        if not np.all(np.isfinite(features)):
            raise ContractError("features must be finite")
        if features.size and (features.min() < 0.0 or features.max() > 1.0):
            raise ContractError("features must lie in [0, 1]")
        ids = [str(s) for s in sample_ids]
        if len(set(ids)) != len(ids):
            seen = set()
            dup = next(s for s in ids if s in seen or seen.add(s))
            raise ContractError(f"duplicate sample_id {dup!r}")
        labels = np.asarray(individual_ids, dtype=np.int64)
        features.setflags(write=False)
        labels.setflags(write=False)
        self._ids = tuple(ids)
        self._labels = labels
        self._features = features
        self._sources = tuple(sources) if sources is not None else ("synthetic",) * n
        if len(self._sources) != n:
            raise ContractError("sources length mismatch")
        self._index = {s: i for i, s in enumerate(self._ids)}

    @classmethod
    def from_samples(cls, samples: Iterable[Sample], feature_dim=None):
        samples = list(samples)
        if not samples:
            if feature_dim is None:
                raise ContractError("cannot infer feature_dim of an empty dataset")
            return cls([], [], np.zeros((0, feature_dim)))
        dims = {len(s.features) for s in samples}
        if len(dims) != 1:
            raise ContractError(f"inconsistent feature dimensions {sorted(dims)}")
        return cls(
            [s.sample_id for s in samples],
            [s.individual_id for s in samples],
            np.array([s.features for s in samples], dtype=np.float64),
            [s.source for s in samples],
        )

    @property
    def sample_ids(self) -> tuple[str, ...]:
        return self._ids

    @property
    def individual_ids(self) -> np.ndarray:
        return self._labels

    @property
    def features(self) -> np.ndarray:
        return self._features

    @property
    def sources(self) -> tuple[str, ...]:
        return self._sources

    @property
    def feature_dim(self) -> int:
        return self._features.shape[1]

    @property
    def identities(self) -> frozenset[int]:
        return frozenset(int(i) for i in np.unique(self._labels))

    @property
    def samples(self) -> list[Sample]:
        return [self[i] for i in range(len(self))]

    def __len__(self):
        return len(self._ids)

    def __getitem__(self, i) -> Sample:
        return Sample(self._ids[i], int(self._labels[i]), tuple(self._features[i].tolist()), self._sources[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self._ids == other._ids
            and self._sources == other._sources
            and np.array_equal(self._labels, other._labels)
            and self._features.shape == other._features.shape
            and np.array_equal(self._features, other._features)
        )

    def __repr__(self):
        return f"Dataset(n={len(self)}, dim={self.feature_dim}, identities={len(self.identities)})"

    def take(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            [self._ids[i] for i in indices],
            self._labels[indices],
            self._features[indices],
            [self._sources[i] for i in indices],
        )

    def select_ids(self, sample_ids: Iterable[str]) -> "Dataset":
        try:
            return self.take([self._index[s] for s in sample_ids])
        except KeyError as exc:
            raise ContractError(f"unknown sample_id {exc.args[0]!r}") from None

    def restrict(self, identities: Iterable[int]) -> "Dataset":
        """Subset holding only the given individuals, order preserved."""
        keep = np.isin(self._labels, np.fromiter(identities, dtype=np.int64))
        return self.take(np.flatnonzero(keep))

    def concat(self, other: "Dataset") -> "Dataset":
        if len(self) and len(other) and self.feature_dim != other.feature_dim:
            raise ContractError("cannot concatenate datasets of different feature_dim")
        return Dataset(
            self._ids + other._ids,
            np.concatenate([self._labels, other._labels]),
            np.vstack([self._features, other._features]),
            self._sources + other._sources,
        )


def generate_synthetic_population(
    n_individuals, samples_per_id, feature_dim, intra_class_noise, seed, *, id_offset=0, prefix="syn"
) -> Dataset:
    """Isotropic Gaussian clusters in the unit cube, one per individual.

    Cluster centres are uniform in [0, 1]^D; each picture is its centre
    plus N(0, intra_class_noise^2) noise, clipped back into the cube.
    """
    if n_individuals < 2:
        raise ContractError("n_individuals must be >= 2")
    if samples_per_id < 1:
        raise ContractError("samples_per_id must be positive")
    if feature_dim < 2:
        raise ContractError("feature_dim must be >= 2")
    if not intra_class_noise > 0:
        raise ContractError("intra_class_noise must be > 0")
    rng = substream(seed, "population")
    centers = rng.uniform(0.0, 1.0, size=(n_individuals, feature_dim))
    noise = rng.normal(0.0, intra_class_noise, size=(n_individuals, samples_per_id, feature_dim))
    feats = np.clip(centers[:, None, :] + noise, 0.0, 1.0).reshape(-1, feature_dim)
    labels = np.repeat(np.arange(n_individuals, dtype=np.int64) + id_offset, samples_per_id)
    ids = [f"{prefix}-{i + id_offset:04d}-{k:03d}" for i in range(n_individuals) for k in range(samples_per_id)]
    return Dataset(ids, labels, feats, ["synthetic"] * len(ids))


def _rotate_nearest(img, degrees):
    """Clockwise rotation about the image centre, nearest-neighbour inverse map."""
    rows, cols = img.shape
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    rc, cc = (rows - 1) / 2.0, (cols - 1) / 2.0
    r, c = np.mgrid[0:rows, 0:cols]
    dy, dx = r - rc, c - cc
    src_c = np.rint(cos * dx + sin * dy + cc).astype(np.int64)
    src_r = np.rint(-sin * dx + cos * dy + rc).astype(np.int64)
    inside = (src_r >= 0) & (src_r < rows) & (src_c >= 0) & (src_c < cols)
    out = np.zeros_like(img)
    out[inside] = img[src_r[inside], src_c[inside]]
    return out


def augment(sample: Sample, image_shape, kinds: Sequence[str], seed) -> list[Sample]:
    """One augmented copy of ``sample`` per requested kind.

    Kinds: ``flip`` (horizontal), ``rot90``/``rot180``/``rot270``/``rot330``
    (clockwise) and ``brightness`` (scale by a factor drawn from U[0, 1]).
    Rotations need ``image_shape`` with rows * cols == feature_dim; a flip
    without a shape mirrors the vector as a single-row image.
    """
    x = np.asarray(sample.features, dtype=np.float64)
    if image_shape is not None:
        rows, cols = image_shape
        if rows * cols != x.size:
            raise ContractError(f"image_shape {tuple(image_shape)} does not match feature_dim {x.size}")
    out = []
    for kind in kinds:
        if kind not in AUGMENTATIONS:
            raise ContractError(f"unknown augmentation {kind!r}")
        if kind in ROTATIONS and image_shape is None:
            raise ContractError(f"{kind} requires image_shape")
        img = x.reshape(image_shape) if image_shape is not None else x.reshape(1, -1)
        if kind == "flip":
            y = img[:, ::-1]
        elif kind == "brightness":
            factor = substream(seed, f"brightness:{sample.sample_id}").uniform(0.0, 1.0)
            y = img * factor
        elif ROTATIONS[kind] % 90 == 0:
            y = np.rot90(img, k=-ROTATIONS[kind] // 90)
        else:
            y = _rotate_nearest(img, ROTATIONS[kind])
        y = np.clip(np.asarray(y, dtype=np.float64).ravel(), 0.0, 1.0)
        out.append(Sample(f"{sample.sample_id}~{kind}", sample.individual_id, tuple(y.tolist()), sample.source))
    return out


@dataclass(frozen=True)
class ExperimentSplits:
    """Disjoint target / attack / evaluation partition.

    ``attack_member`` is the target validation set and ``eval_member`` the
    target test set: new pictures of the training identities.
    """

    target_train: Dataset
    target_val: Dataset
    target_test: Dataset
    attack_nonmember: Dataset
    eval_nonmember: Dataset
    seed: int
    samples_per_id_per_portion: int
    id_groups: tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]] = field(default=((), (), ()))

    @property
    def attack_member(self) -> Dataset:
        return self.target_val

    @property
    def eval_member(self) -> Dataset:
        return self.target_test

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "samples_per_id_per_portion": self.samples_per_id_per_portion,
            "id_groups": {f"ID{i + 1}": list(g) for i, g in enumerate(self.id_groups)},
            "target_train": list(self.target_train.sample_ids),
            "target_val": list(self.target_val.sample_ids),
            "target_test": list(self.target_test.sample_ids),
            "attack_member": list(self.attack_member.sample_ids),
            "attack_nonmember": list(self.attack_nonmember.sample_ids),
            "eval_member": list(self.eval_member.sample_ids),
            "eval_nonmember": list(self.eval_nonmember.sample_ids),
        }


def make_splits(dataset: Dataset, samples_per_id_per_portion: int, seed) -> ExperimentSplits:
    m = samples_per_id_per_portion
    if m < 1:
        raise ContractError("samples_per_id_per_portion must be positive")
    ids = sorted(dataset.identities)
    if len(ids) < 3:
        raise ContractError("need at least 3 identities to split")
    labels = dataset.individual_ids
    counts = {i: int(np.sum(labels == i)) for i in ids}
    short = [i for i in ids if counts[i] < 3 * m]
    if short:
        raise ContractError(
            f"identity {short[0]} has {counts[short[0]]} samples, needs {3 * m}; augment first"
        )
    rng = substream(seed, "split")
    order = [ids[j] for j in rng.permutation(len(ids))]
    third = len(ids) // 3
    groups = (tuple(order[:third]), tuple(order[third : 2 * third]), tuple(order[2 * third :]))

    # canonical order so the result is independent of file row order
    sid = np.array(dataset.sample_ids)

    def pictures(identity):
        idx = np.flatnonzero(labels == identity)
        idx = idx[np.argsort(sid[idx], kind="stable")]
        return idx[rng.permutation(idx.size)]

    train, val, test, attack_non, eval_non = [], [], [], [], []
    for identity in sorted(groups[0]):
        idx = pictures(identity)
        train.extend(idx[:m])
        val.extend(idx[m : 2 * m])
        test.extend(idx[2 * m : 3 * m])
    for identity in sorted(groups[1]):
        attack_non.extend(pictures(identity)[:m])
    for identity in sorted(groups[2]):
        eval_non.extend(pictures(identity)[:m])
    return ExperimentSplits(
        dataset.take(train),
        dataset.take(val),
        dataset.take(test),
        dataset.take(attack_non),
        dataset.take(eval_non),
        int(seed),
        m,
        tuple(tuple(sorted(g)) for g in groups),
    )


def splits_from_manifest(dataset: Dataset, manifest: dict) -> ExperimentSplits:
    try:
        groups = tuple(tuple(manifest["id_groups"][f"ID{i}"]) for i in (1, 2, 3))
        return ExperimentSplits(
            dataset.select_ids(manifest["target_train"]),
            dataset.select_ids(manifest["target_val"]),
            dataset.select_ids(manifest["target_test"]),
            dataset.select_ids(manifest["attack_nonmember"]),
            dataset.select_ids(manifest["eval_nonmember"]),
            int(manifest["seed"]),
            int(manifest["samples_per_id_per_portion"]),
            groups,
        )
    except KeyError as exc:
        raise DataFormatError(f"splits manifest missing field {exc.args[0]!r}") from None


def save_splits(splits: ExperimentSplits, path):
    Path(path).write_text(json.dumps(splits.manifest(), indent=1) + "\n", encoding="utf-8")


def load_splits(dataset: Dataset, path) -> ExperimentSplits:
    try:
        manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: {exc}") from None
    return splits_from_manifest(dataset, manifest)


def save_dataset(dataset: Dataset, path):
    """CSV: ``sample_id,individual_id,f0,...``; floats in shortest round-trip form."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "individual_id", *(f"f{j}" for j in range(dataset.feature_dim))])
        for sid, label, row in zip(dataset.sample_ids, dataset.individual_ids, dataset.features):
            writer.writerow([sid, int(label), *(repr(float(v)) for v in row)])


def load_dataset(path, source="external") -> Dataset:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    header = rows[0]
    if header[:2] != ["sample_id", "individual_id"] or len(header) < 3:
        raise DataFormatError(f"{path}: header must start with sample_id,individual_id,f0")
    dim = len(header) - 2
    if header[2:] != [f"f{j}" for j in range(dim)]:
        raise DataFormatError(f"{path}: feature columns must be f0..f{dim - 1}")
    if len(rows) == 1:
        raise DataFormatError(f"{path}: no samples")
    ids, labels = [], []
    feats = np.empty((len(rows) - 1, dim))
    for n, row in enumerate(rows[1:]):
        line = n + 2
        if len(row) != dim + 2:
            raise DataFormatError(f"{path}:{line}: expected {dim + 2} fields, got {len(row)}")
        try:
            labels.append(int(row[1]))
            feats[n] = [float(v) for v in row[2:]]
        except ValueError as exc:
            raise DataFormatError(f"{path}:{line}: {exc}") from None
        if not np.all(np.isfinite(feats[n])) or feats[n].min() < 0.0 or feats[n].max() > 1.0:
            raise DataFormatError(f"{path}:{line}: features must be finite and within [0, 1]")
        ids.append(row[0])
    try:
        return Dataset(ids, labels, feats, [source] * len(ids))
    except ContractError as exc:
        raise DataFormatError(f"{path}: {exc}") from None
