"""Synthetic datasets, corruptions, OOD splits and CSV ingestion."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, replace

import numpy as np

from .rng import make_rng


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: str = "train"
    ood: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels).astype(np.int64)
        if x.ndim != 2:
            raise DataError(f"features must be N x D, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise DataError(f"{y.size} labels for {x.shape[0]} rows")
        if np.isnan(x).any():
            raise DataError("features contain NaN")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise DataError(f"labels must lie in [0, {self.n_classes - 1}]")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        if self.ood is not None:
            object.__setattr__(self, "ood", np.asarray(self.ood, dtype=bool))

    def __len__(self):
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx, split: str | None = None) -> "LabeledDataset":
        return LabeledDataset(self.features[idx], self.labels[idx], self.n_classes,
                              split or self.split, None if self.ood is None else self.ood[idx])

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features).astype("<f8").tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        h.update(str(self.n_classes).encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class MixtureSpec:
    """Isotropic Gaussian mixture; ``scale`` is the per-class standard deviation."""

    means: np.ndarray
    scale: tuple[float, ...] | float = 1.0
    samples_per_class: int = 1000
    label_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        if means.ndim != 2:
            raise DataError("means must be a K x D array")
        object.__setattr__(self, "means", means)
        if means.shape[0] < 2:
            raise DataError("a mixture needs at least 2 classes")
        if len({tuple(m) for m in means}) != means.shape[0]:
            raise DataError("class means must be distinct")
        scale = np.broadcast_to(np.asarray(self.scale, dtype=np.float64), (means.shape[0],))
        if np.any(scale <= 0):
            raise DataError("class scales must be positive")
        object.__setattr__(self, "scale", tuple(float(s) for s in scale))
        if self.samples_per_class < 1:
            raise DataError("samples_per_class must be >= 1")
        if not 0 <= self.label_noise < 1:
            raise DataError("label_noise must lie in [0, 1)")

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def circle_means(n_classes: int, radius: float = 1.0, dim: int = 2) -> np.ndarray:
    """Class means evenly spaced on a circle in the first two coordinates."""
    if dim < 2:
        raise DataError("circle layout needs dim >= 2")
    angles = math.pi / 2 + 2 * math.pi * np.arange(n_classes) / n_classes
    means = np.zeros((n_classes, dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def _sample(means: np.ndarray, scale, counts, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for c, (mu, s, n) in enumerate(zip(means, scale, counts)):
        xs.append(mu + s * rng.standard_normal((n, means.shape[1])))
        ys.append(np.full(n, c))
    return np.concatenate(xs), np.concatenate(ys)


def make_gaussian_mixture(spec: MixtureSpec, split: str = "train") -> LabeledDataset:
    rng = make_rng(spec.seed, "mixture")
    x, y = _sample(spec.means, spec.scale, [spec.samples_per_class] * spec.n_classes, rng)
    if spec.label_noise > 0:
        flip = rng.random(y.size) < spec.label_noise
        # shift by 1..K-1 gives a uniformly random *other* class
        shift = rng.integers(1, spec.n_classes, size=y.size)
        y = np.where(flip, (y + shift) % spec.n_classes, y)
    return LabeledDataset(x, y, spec.n_classes, split)


def _allocate(n: int, fractions: np.ndarray) -> np.ndarray:
    """Largest-remainder split of ``n`` items by ``fractions``."""
    raw = n * fractions
    sizes = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - sizes), kind="stable")[: n - sizes.sum()]:
        sizes[i] += 1
    return sizes


def _stratified_sizes(class_counts: np.ndarray, fractions: np.ndarray) -> np.ndarray:
    """C x 3 split sizes: every entry is the floor or ceiling of its exact
    share, and the column totals equal the largest-remainder split of N."""
    raw = class_counts[:, None] * fractions[None, :]
    sizes = np.floor(raw).astype(int)
    demand = _allocate(int(class_counts.sum()), fractions) - sizes.sum(axis=0)
    need = class_counts - sizes.sum(axis=1)
    frac = raw - sizes
    # classes needing most extra units go first; each takes the splits with
    # the largest unmet demand, then the largest remainder
    for c in sorted(range(len(class_counts)), key=lambda c: (-need[c], c)):
        cols = sorted((k for k in range(fractions.size) if demand[k] > 0 and frac[c, k] > 0),
                      key=lambda k: (-demand[k], -frac[c, k], k))
        for k in cols[: need[c]]:
            sizes[c, k] += 1
            demand[k] -= 1
    if np.any(sizes.sum(axis=1) != class_counts):  # defensive: plain per-class rounding
        sizes = np.array([_allocate(int(n), fractions) for n in class_counts])
    return sizes


def train_val_test_split(ds: LabeledDataset, fractions=(0.8, 0.1, 0.1),
                         seed: int = 0) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Stratified, disjoint and exhaustive three-way split."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise DataError(f"fractions must be three nonnegative numbers summing to 1, got {list(fractions)}")
    counts = np.bincount(ds.labels, minlength=ds.n_classes)
    table = _stratified_sizes(counts, fr)
    parts: list[list[np.ndarray]] = [[], [], []]
    for c in range(ds.n_classes):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size == 0:
            continue
        sizes = table[c]
        if np.any((fr > 0) & (sizes == 0)):
            raise DataError(f"class {c} has {idx.size} samples, too few to stratify over {list(fractions)}")
        idx = make_rng(seed, "split", c).permutation(idx)
        bounds = np.cumsum(sizes)[:-1]
        for part, chunk in zip(parts, np.split(idx, bounds)):
            part.append(chunk)
    names = ("train", "val", "test")
    return tuple(ds.subset(np.sort(np.concatenate(p)) if p else np.array([], dtype=int), name)
                 for p, name in zip(parts, names))


# -- corruptions ----------------------------------------------------------

@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in SEVERITY_TABLE:
            raise DataError(f"unknown corruption {self.kind!r}; expected one of {sorted(SEVERITY_TABLE)}")
        if self.severity not in range(1, 6):
            raise DataError(f"severity must be 1..5, got {self.severity}")

    @property
    def level(self) -> float:
        return SEVERITY_TABLE[self.kind][self.severity - 1]


# gaussian-noise / uniform-noise: noise std as a multiple of each feature's std
# feature-mask: fraction of feature entries set to 0
# feature-scale: factor by which features are stretched about their mean
SEVERITY_TABLE: dict[str, tuple[float, ...]] = {
    "gaussian-noise": (0.1, 0.2, 0.4, 0.8, 1.6),
    "uniform-noise": (0.1, 0.2, 0.4, 0.8, 1.6),
    "feature-mask": (0.1, 0.2, 0.3, 0.4, 0.5),
    "feature-scale": (1.1, 1.25, 1.5, 2.0, 3.0),
}


def corrupt(ds: LabeledDataset, spec: CorruptionSpec, seed: int = 0,
            feature_std: np.ndarray | None = None) -> LabeledDataset:
    """Perturb features at a fixed severity; labels are never touched.

    ``feature_std`` defaults to the dataset's own per-feature std.
    """
    x = ds.features
    rng = make_rng(seed, "corrupt", spec.kind, spec.severity)
    std = x.std(axis=0) if feature_std is None else np.asarray(feature_std, dtype=np.float64)
    level = spec.level
    if spec.kind == "gaussian-noise":
        x = x + level * std * rng.standard_normal(x.shape)
    elif spec.kind == "uniform-noise":
        half = math.sqrt(3.0) * level * std
        x = x + rng.uniform(-1.0, 1.0, size=x.shape) * half
    elif spec.kind == "feature-mask":
        n_mask = int(round(level * x.size))
        flat = x.ravel().copy()
        flat[rng.permutation(x.size)[:n_mask]] = 0.0
        x = flat.reshape(x.shape)
    else:
        mu = x.mean(axis=0)
        x = mu + level * (x - mu)
    return replace(ds, features=x)


# -- OOD ------------------------------------------------------------------

FAR_OOD_FACTOR = 3.0


def ood_means(means: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(near, far) component means for a training mixture.

    Near components sit halfway between every pair of training means. Far
    components are the training means reflected through their centroid and
    pushed ``FAR_OOD_FACTOR`` times further out.
    """
    k = means.shape[0]
    near = np.array([(means[i] + means[j]) / 2 for i in range(k) for j in range(i + 1, k)])
    centroid = means.mean(axis=0)
    far = centroid - FAR_OOD_FACTOR * (means - centroid)
    return near, far


def make_ood_splits(spec: MixtureSpec, seed: int = 0,
                    n_ood: int | None = None) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Fresh in-distribution sample plus near- and far-OOD samples of the same dimension.

    All three are drawn from streams keyed by ``seed``, independent of the
    mixture's own training draw.

    OOD rows carry ``ood = True`` and the index of the component they were
    drawn from (modulo K) as a placeholder label; they are for scoring only.
    """
    n_ood = n_ood or spec.samples_per_class * spec.n_classes
    x, y = _sample(spec.means, spec.scale, [spec.samples_per_class] * spec.n_classes,
                   make_rng(seed, "ood", "in"))
    in_dist = LabeledDataset(x, y, spec.n_classes, "test", np.zeros(y.size, dtype=bool))
    near_mu, far_mu = ood_means(spec.means)
    scale = float(np.mean(spec.scale))
    out = []
    for tag, mus in (("near", near_mu), ("far", far_mu)):
        counts = _allocate(n_ood, np.full(len(mus), 1.0 / len(mus)))
        x, comp = _sample(mus, [scale] * len(mus), counts, make_rng(seed, "ood", tag))
        out.append(LabeledDataset(x, comp % spec.n_classes, spec.n_classes, f"{tag}-ood",
                                  np.ones(len(comp), dtype=bool)))
    return in_dist, out[0], out[1]


# -- CSV ------------------------------------------------------------------

def dataset_to_csv(ds: LabeledDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = [f"f{i}" for i in range(ds.dim)] + ["label"]
    if ds.ood is not None:
        header.append("ood")
    w.writerow(header)
    for i in range(len(ds)):
        row = [repr(float(v)) for v in ds.features[i]] + [int(ds.labels[i])]
        if ds.ood is not None:
            row.append(int(ds.ood[i]))
        w.writerow(row)
    return buf.getvalue()


def save_csv(ds: LabeledDataset, path) -> None:
    from .nn import atomic_write_text

    atomic_write_text(path, dataset_to_csv(ds))


def load_csv(path, n_classes: int | None = None, split: str = "train") -> LabeledDataset:
    """Read ``f0..f{D-1},label[,ood]``; K defaults to max label + 1."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    has_ood = bool(header) and header[-1] == "ood"
    n_feat = len(header) - 1 - has_ood
    expected = [f"f{i}" for i in range(n_feat)] + ["label"] + (["ood"] if has_ood else [])
    if n_feat < 1 or header != expected:
        raise DataError(f"{path}: line 1: header must be f0..f{{D-1}},label[,ood], got {header}")
    if len(rows) < 2:
        raise DataError(f"{path}: no data rows")
    feats, labels, ood = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            feats.append([float(v) for v in row[:n_feat]])
            label = float(row[n_feat])
            if label != int(label) or label < 0:
                raise ValueError
            labels.append(int(label))
            if has_ood:
                flag = int(row[-1])
                if flag not in (0, 1):
                    raise ValueError
                ood.append(flag)
        except ValueError:
            raise DataError(f"{path}: line {lineno}: non-numeric or invalid value in {row}") from None
        if not all(math.isfinite(v) for v in feats[-1]):
            raise DataError(f"{path}: line {lineno}: non-finite feature")
    k = n_classes if n_classes is not None else max(labels) + 1
    return LabeledDataset(np.array(feats), np.array(labels), k, split,
                          np.array(ood, dtype=bool) if has_ood else None)
