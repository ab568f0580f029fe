"""Datasets, augmentation, and the non-IID labeled/unlabeled partitioner.

Supports two sources: synthetic Gaussian blobs for fast experiments and IDX
image files (the Fashion-MNIST container format). The partitioner realizes
three heterogeneity settings: fully IID, IID labels with Dirichlet-skewed
unlabeled data, and Dirichlet skew on both splits.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SETTINGS = ("iid_iid", "iid_dir", "dir_dir")


class IdxFormatError(ValueError):
    """An IDX file failed to parse; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class PartitionError(ValueError):
    """The requested partition cannot be built from the given dataset."""


def _frozen(arr: np.ndarray, dtype) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=dtype)
    if out is arr:
        out = arr.copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix (N x d), integer labels of length N, and the class count."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self) -> None:
        f = _frozen(self.features, np.float64)
        y = _frozen(self.labels, np.int64)
        if f.ndim != 2:
            raise ValueError(f"features must be 2-d, got shape {f.shape}")
        if y.ndim != 1 or y.shape[0] != f.shape[0]:
            raise ValueError("labels must be 1-d with one entry per feature row")
        if self.class_count < 2:
            raise ValueError("class_count must be at least 2")
        if y.size and (y.min() < 0 or y.max() >= self.class_count):
            raise ValueError(f"labels out of range [0, {self.class_count})")
        if f.shape[0] < self.class_count:
            raise ValueError("need at least one example per class")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True, eq=False)
class ClientData:
    """One client's labeled set, unlabeled features, and diagnostics-only labels.

    ``hidden_unlabeled_labels`` exists solely for imbalance reporting; training
    code receives features only and must never read it.
    """

    labeled_features: np.ndarray
    labeled_labels: np.ndarray
    unlabeled_features: np.ndarray
    hidden_unlabeled_labels: np.ndarray | None
    class_count: int

    def __post_init__(self) -> None:
        lf = _frozen(self.labeled_features, np.float64)
        ly = _frozen(self.labeled_labels, np.int64)
        uf = _frozen(self.unlabeled_features, np.float64)
        if lf.shape[0] != ly.shape[0]:
            raise ValueError("labeled features/labels length mismatch")
        if lf.shape[0] < 1:
            raise ValueError("each client needs at least one labeled example")
        hidden = self.hidden_unlabeled_labels
        if hidden is not None:
            hidden = _frozen(hidden, np.int64)
            if hidden.shape[0] != uf.shape[0]:
                raise ValueError("hidden labels length mismatch")
        object.__setattr__(self, "labeled_features", lf)
        object.__setattr__(self, "labeled_labels", ly)
        object.__setattr__(self, "unlabeled_features", uf)
        object.__setattr__(self, "hidden_unlabeled_labels", hidden)

    @property
    def labeled_count(self) -> int:
        return self.labeled_features.shape[0]

    @property
    def unlabeled_count(self) -> int:
        return self.unlabeled_features.shape[0]

    @property
    def total_count(self) -> int:
        return self.labeled_count + self.unlabeled_count


@dataclass(frozen=True)
class PartitionSpec:
    """How to split a dataset across clients.

    ``labeled_per_class`` is per client in the iid settings and the pooled
    per-class total in ``dir_dir`` (where a Dirichlet draw spreads it across
    clients). ``test_fraction`` optionally carves a class-stratified test
    split out of the source before client allocation.
    """

    setting: str
    client_count: int
    labeled_per_class: int
    dirichlet_gamma: float
    seed: int
    test_fraction: float = 0.0

    def __post_init__(self) -> None:
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of {SETTINGS}, got {self.setting!r}")
        if self.client_count < 2:
            raise ValueError("client_count must be at least 2")
        if self.labeled_per_class < 1:
            raise ValueError("labeled_per_class must be at least 1")
        if self.dirichlet_gamma <= 0:
            raise ValueError("dirichlet_gamma must be positive")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must be in [0, 1)")


@dataclass(frozen=True)
class AugmentSpec:
    """Weak and strong perturbation strengths.

    Weak is additive Gaussian noise; strong adds coordinate dropout on top.
    In image mode weak also applies a small shift and horizontal flip, and
    strong applies a square cutout.
    """

    weak_noise_sigma: float = 0.0
    strong_noise_sigma: float = 0.0
    strong_dropout_prob: float = 0.0
    image_mode: bool = False

    def __post_init__(self) -> None:
        if self.weak_noise_sigma < 0 or self.strong_noise_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")
        if self.weak_noise_sigma > self.strong_noise_sigma:
            raise ValueError("weak noise must not exceed strong noise")
        if not 0.0 <= self.strong_dropout_prob < 1.0:
            raise ValueError("strong_dropout_prob must be in [0, 1)")


@dataclass(frozen=True, eq=False)
class PartitionResult:
    clients: tuple[ClientData, ...]
    test: Dataset | None
    manifest: dict


def _read_be_u32(data: bytes, offset: int, what: str) -> int:
    if offset + 4 > len(data):
        raise IdxFormatError(f"truncated file while reading {what}", offset)
    return struct.unpack(">I", data[offset : offset + 4])[0]


def load_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Parse a big-endian IDX image/label file pair into a Dataset.

    Pixels are scaled to [0, 1] and flattened row-major. Raises
    :class:`IdxFormatError` naming the byte offset on any malformed input.
    """
    img_bytes = Path(images_path).read_bytes()
    lbl_bytes = Path(labels_path).read_bytes()

    magic = _read_be_u32(img_bytes, 0, "image magic")
    if magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(
            f"bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}", 0
        )
    n = _read_be_u32(img_bytes, 4, "image count")
    rows = _read_be_u32(img_bytes, 8, "row count")
    cols = _read_be_u32(img_bytes, 12, "column count")
    payload = n * rows * cols
    if len(img_bytes) < 16 + payload:
        raise IdxFormatError(
            f"truncated image payload: need {payload} bytes, have {len(img_bytes) - 16}",
            16,
        )
    pixels = np.frombuffer(img_bytes, dtype=np.uint8, count=payload, offset=16)

    magic = _read_be_u32(lbl_bytes, 0, "label magic")
    if magic != IDX_LABELS_MAGIC:
        raise IdxFormatError(
            f"bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}", 0
        )
    n_labels = _read_be_u32(lbl_bytes, 4, "label count")
    if n_labels != n:
        raise IdxFormatError(
            f"label count {n_labels} does not match image count {n}", 4
        )
    if len(lbl_bytes) < 8 + n_labels:
        raise IdxFormatError(
            f"truncated label payload: need {n_labels} bytes, have {len(lbl_bytes) - 8}",
            8,
        )
    labels = np.frombuffer(lbl_bytes, dtype=np.uint8, count=n_labels, offset=8)

    features = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    class_count = int(labels.max()) + 1 if n else 2
    return Dataset(features, labels.astype(np.int64), max(class_count, 2))


def class_means(class_count: int, dim: int, spacing: float = 2.0) -> np.ndarray:
    """Blob centers on an even grid with the given spacing.

    Class c sits at the mixed-radix digits of c spread over the coordinates,
    so any (class_count, dim) pair gets distinct, well-separated means.
    """
    side = int(np.ceil(class_count ** (1.0 / dim))) if dim > 0 else class_count
    side = max(side, 2)
    means = np.zeros((class_count, dim))
    for c in range(class_count):
        v = c
        for axis in range(dim):
            means[c, axis] = (v % side) * spacing
            v //= side
    return means


def gen_synthetic(
    class_count: int,
    per_class: int,
    dim: int,
    spread: float,
    seed: int,
) -> Dataset:
    """Gaussian blobs: grid-separated class means, isotropic noise of std spread."""
    if class_count < 2:
        raise ValueError("class_count must be at least 2")
    if per_class < 1:
        raise ValueError("per_class must be at least 1")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    rng = np.random.default_rng(seed)
    means = class_means(class_count, dim)
    labels = np.repeat(np.arange(class_count), per_class)
    noise = rng.standard_normal((labels.size, dim)) * spread
    features = means[labels] + noise
    return Dataset(features, labels, class_count)


def nearest_mean_predict(features: np.ndarray, means: np.ndarray) -> np.ndarray:
    """Brute-force nearest-centroid labels; the reference oracle for blobs."""
    d2 = ((features[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def _largest_remainder_counts(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation of ``total`` items by proportions, largest remainder first."""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        remainders = raw - counts
        # ties broken by lower index: stable argsort on negated remainders
        order = np.argsort(-remainders, kind="stable")
        counts[order[:short]] += 1
    return counts


def _even_proportions(k: int) -> np.ndarray:
    return np.full(k, 1.0 / k)


def dirichlet_partition(dataset: Dataset, spec: PartitionSpec) -> PartitionResult:
    """Split a dataset into per-client labeled/unlabeled shards plus a test split.

    Every source example lands in exactly one of client-labeled,
    client-unlabeled, or test. Per-class client proportions come from
    Dirichlet(gamma) draws in the dir settings and are rounded to integer
    counts by largest remainder. The manifest records source indices per shard.
    """
    rng = np.random.default_rng(spec.seed)
    k = spec.client_count
    c_count = dataset.class_count
    labels = dataset.labels

    by_class = [np.flatnonzero(labels == c).copy() for c in range(c_count)]
    for idx in by_class:
        rng.shuffle(idx)

    test_indices: list[np.ndarray] = []
    if spec.test_fraction > 0.0:
        for c in range(c_count):
            n_test = int(round(len(by_class[c]) * spec.test_fraction))
            test_indices.append(by_class[c][:n_test])
            by_class[c] = by_class[c][n_test:]

    # Labeled quota feasibility.
    per_class_quota = (
        spec.labeled_per_class * k if spec.setting != "dir_dir" else spec.labeled_per_class
    )
    for c in range(c_count):
        if len(by_class[c]) < per_class_quota:
            raise PartitionError(
                f"class {c} has {len(by_class[c])} examples but the labeled quota "
                f"needs {per_class_quota} (short by {per_class_quota - len(by_class[c])})"
            )
    if spec.setting == "dir_dir" and spec.labeled_per_class * c_count < k:
        raise PartitionError(
            f"only {spec.labeled_per_class * c_count} labeled examples for {k} clients; "
            "cannot guarantee one labeled example per client"
        )

    labeled_idx: list[list[np.ndarray]] = [[] for _ in range(k)]
    unlabeled_idx: list[list[np.ndarray]] = [[] for _ in range(k)]

    for c in range(c_count):
        pool = by_class[c]
        if spec.setting == "dir_dir":
            p = rng.dirichlet(np.full(k, spec.dirichlet_gamma))
            lab_counts = _largest_remainder_counts(p, spec.labeled_per_class)
        else:
            lab_counts = np.full(k, spec.labeled_per_class, dtype=np.int64)
        splits = np.split(pool, np.cumsum(lab_counts))
        rest = splits[-1]
        for j in range(k):
            labeled_idx[j].append(splits[j])

        if spec.setting == "iid_iid":
            p = _even_proportions(k)
        else:
            p = rng.dirichlet(np.full(k, spec.dirichlet_gamma))
        unl_counts = _largest_remainder_counts(p, len(rest))
        splits = np.split(rest, np.cumsum(unl_counts))
        for j in range(k):
            unlabeled_idx[j].append(splits[j])

    labeled = [np.concatenate(parts) for parts in labeled_idx]
    unlabeled = [np.concatenate(parts) for parts in unlabeled_idx]

    if spec.setting == "dir_dir":
        _enforce_min_one_labeled(labeled, labels, c_count)

    clients = []
    manifest_clients = {}
    for j in range(k):
        li, ui = labeled[j], unlabeled[j]
        clients.append(
            ClientData(
                labeled_features=dataset.features[li],
                labeled_labels=labels[li],
                unlabeled_features=dataset.features[ui],
                hidden_unlabeled_labels=labels[ui],
                class_count=c_count,
            )
        )
        manifest_clients[str(j)] = {
            "labeled": sorted(int(i) for i in li),
            "unlabeled": sorted(int(i) for i in ui),
        }

    test_idx = (
        np.concatenate(test_indices) if test_indices else np.empty(0, dtype=np.int64)
    )
    test = (
        Dataset(dataset.features[test_idx], labels[test_idx], c_count)
        if test_idx.size
        else None
    )
    manifest = {
        "setting": spec.setting,
        "client_count": k,
        "labeled_per_class": spec.labeled_per_class,
        "dirichlet_gamma": spec.dirichlet_gamma,
        "seed": spec.seed,
        "clients": manifest_clients,
        "test": sorted(int(i) for i in test_idx),
    }
    return PartitionResult(tuple(clients), test, manifest)


def _enforce_min_one_labeled(
    labeled: list[np.ndarray], labels: np.ndarray, class_count: int
) -> None:
    """Move one labeled example from the richest client to any empty one.

    Deterministic: donor is the client with the most labeled examples (lowest
    id on ties) and gives up one example of its lowest-held class.
    """
    while True:
        sizes = np.array([li.size for li in labeled])
        empty = np.flatnonzero(sizes == 0)
        if empty.size == 0:
            return
        receiver = int(empty[0])
        donor = int(sizes.argmax())
        if sizes[donor] <= 1:
            raise PartitionError("not enough labeled examples to cover every client")
        donor_labels = labels[labeled[donor]]
        give_class = int(donor_labels.min())
        pos = int(np.flatnonzero(donor_labels == give_class)[0])
        moved = labeled[donor][pos]
        labeled[donor] = np.delete(labeled[donor], pos)
        labeled[receiver] = np.array([moved], dtype=np.int64)


def augment(
    features: np.ndarray,
    spec: AugmentSpec,
    strength: str,
    rng: np.random.Generator,
) -> np.ndarray:
    """Weak or strong perturbation of a feature batch; shape is preserved."""
    if strength not in ("weak", "strong"):
        raise ValueError(f"strength must be 'weak' or 'strong', got {strength!r}")
    x = np.array(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be 2-d, got shape {x.shape}")
    sigma = spec.weak_noise_sigma if strength == "weak" else spec.strong_noise_sigma

    if spec.image_mode and strength == "weak":
        x = _shift_and_flip(x, rng)
    x = x + sigma * rng.standard_normal(x.shape)
    if strength == "strong":
        if spec.strong_dropout_prob > 0.0:
            keep = rng.random(x.shape) >= spec.strong_dropout_prob
            x = x * keep
        if spec.image_mode:
            x = _cutout(x, rng)
    return x


def _image_side(width: int) -> int:
    side = int(round(np.sqrt(width)))
    if side * side != width:
        raise ValueError(f"image_mode needs square features, got width {width}")
    return side


def _shift_and_flip(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    side = _image_side(x.shape[1])
    imgs = x.reshape(-1, side, side)
    out = np.zeros_like(imgs)
    shifts = rng.integers(-2, 3, size=(imgs.shape[0], 2))
    flips = rng.random(imgs.shape[0]) < 0.5
    for i in range(imgs.shape[0]):
        img = np.roll(imgs[i], shift=tuple(shifts[i]), axis=(0, 1))
        out[i] = img[:, ::-1] if flips[i] else img
    return out.reshape(x.shape)


def _cutout(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    side = _image_side(x.shape[1])
    cut = max(side // 4, 1)
    imgs = x.reshape(-1, side, side).copy()
    tops = rng.integers(0, side - cut + 1, size=imgs.shape[0])
    lefts = rng.integers(0, side - cut + 1, size=imgs.shape[0])
    for i in range(imgs.shape[0]):
        imgs[i, tops[i] : tops[i] + cut, lefts[i] : lefts[i] + cut] = 0.0
    return imgs.reshape(x.shape)


def class_histogram(labels: np.ndarray, class_count: int) -> np.ndarray:
    """Normalized class frequencies; all zeros for an empty label array."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=class_count)
    total = counts.sum()
    return counts / total if total else counts.astype(np.float64)


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


@dataclass(frozen=True)
class ImbalanceReport:
    """Internal (labeled vs unlabeled per client) and external (cross-client) skew."""

    per_client_internal: tuple[float, ...]
    mean_internal: float
    mean_external: float

    def to_dict(self) -> dict:
        return {
            "per_client_internal": list(self.per_client_internal),
            "mean_internal": self.mean_internal,
            "mean_external": self.mean_external,
        }


def imbalance_report(clients: list[ClientData] | tuple[ClientData, ...]) -> ImbalanceReport:
    """Total-variation distances quantifying label skew within and across clients.

    Requires hidden unlabeled labels; external skew compares the combined
    (labeled + unlabeled) class histograms of every client pair.
    """
    internal = []
    combined = []
    for cd in clients:
        if cd.hidden_unlabeled_labels is None:
            raise ValueError("imbalance report needs hidden unlabeled labels")
        lab_hist = class_histogram(cd.labeled_labels, cd.class_count)
        unl_hist = class_histogram(cd.hidden_unlabeled_labels, cd.class_count)
        internal.append(tv_distance(lab_hist, unl_hist) if cd.unlabeled_count else 0.0)
        all_labels = np.concatenate([cd.labeled_labels, cd.hidden_unlabeled_labels])
        combined.append(class_histogram(all_labels, cd.class_count))
    pair_distances = [
        tv_distance(combined[i], combined[j])
        for i in range(len(combined))
        for j in range(i + 1, len(combined))
    ]
    mean_external = float(np.mean(pair_distances)) if pair_distances else 0.0
    return ImbalanceReport(
        per_client_internal=tuple(internal),
        mean_internal=float(np.mean(internal)),
        mean_external=mean_external,
    )


def write_manifest(path: str | Path, result: PartitionResult) -> None:
    Path(path).write_text(json.dumps(result.manifest, indent=2) + "\n")
