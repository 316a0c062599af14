"""Dataset model, open-world split manifests, and a synthetic dataset
generator for desk-scale experiments.

A dataset couples a feature matrix with per-instance class-name labels and
a class-embedding table aligned to the class registry.  Splits partition
classes into seen / unseen / unknown for one of the 20-80, 50-50, 80-20
regimes: the named fraction of the base unseen classes keeps its embeddings
(stays unseen), the rest lose both visual data and embeddings (unknown).

Class identity is always the registry name string, never an index, so files
survive reordering.  The reserved names UNKNOWN and REJECT cannot be class
names.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .matio import as_matrix, load_matrix, save_matrix
from .openset import REJECT
from .sampling import UNKNOWN_LABEL

REGIMES = ("20-80", "50-50", "80-20")
UNSEEN_FRACTION = {"20-80": 0.2, "50-50": 0.5, "80-20": 0.8}
_RESERVED = {UNKNOWN_LABEL, REJECT}

DATASET_FILES = ("features.ozm", "labels.txt", "embeddings.ozm", "names.txt")


@dataclass
class Dataset:
    features: np.ndarray  # (n, F)
    labels: list[str]  # per-instance class name
    class_names: list[str]  # registry order matches embedding rows
    embeddings: np.ndarray  # (C, E)

    def validate(self) -> None:
        if len(self.class_names) == 0:
            raise ValidationError("dataset needs at least one class")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValidationError("duplicate class name in registry")
        bad = _RESERVED.intersection(self.class_names)
        if bad:
            raise ValidationError(f"reserved names used as classes: {sorted(bad)}")
        if self.features.shape[0] != len(self.labels):
            raise ValidationError("features and labels differ in length")
        if self.embeddings.shape[0] != len(self.class_names):
            raise ValidationError("embedding rows do not match the class registry")
        registry = set(self.class_names)
        for label in self.labels:
            if label not in registry:
                raise ValidationError(f"label {label!r} missing from the registry")

    def embedding_of(self, class_name: str) -> np.ndarray:
        idx = self.class_names.index(class_name)
        return self.embeddings[idx:idx + 1]


@dataclass
class SplitManifest:
    regime: str
    seen: set[str]
    unseen: set[str]
    unknown: set[str]
    provenance: str = "seeded-random"

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ValidationError(f"regime must be one of {REGIMES}")
        sets = [self.seen, self.unseen, self.unknown]
        if sum(len(s) for s in sets) != len(self.seen | self.unseen | self.unknown):
            raise ValidationError("seen/unseen/unknown sets overlap")
        if not self.seen or not self.unseen:
            raise ValidationError("manifest needs non-empty seen and unseen sets")

    def all_classes(self) -> set[str]:
        return self.seen | self.unseen | self.unknown


@dataclass
class TrainView:
    """Everything the learner may see: seen-class instances, and embeddings
    for seen and unseen classes only."""

    features: np.ndarray
    labels: list[str]
    embeddings: dict[str, np.ndarray]  # class -> (1, E)


@dataclass
class TestView:
    features: np.ndarray
    truths: list[str]  # class name or UNKNOWN


@dataclass
class SyntheticSpec:
    classes: int = 12
    per_class: int = 80
    embedding_dim: int = 4
    feature_dim: int = 16
    spread: float = 1.0
    lattice_step: float = 8.0
    seed: int = 0

    def validate(self) -> None:
        if min(self.classes, self.per_class, self.embedding_dim, self.feature_dim) < 1:
            raise ValidationError("all synthetic-spec counts must be >= 1")
        if self.spread <= 0 or self.lattice_step <= 0:
            raise ValidationError("spread and lattice_step must be positive")


# ---------------------------------------------------------------------------
# synthetic data


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Class embeddings on a jittered lattice; features are class-conditional
    Gaussians whose means are a fixed linear image of the embeddings, shifted
    into the positive orthant (mirroring rectified convnet features).

    Lattice slots are assigned to classes through a seeded permutation and
    the digit base is at least three, so each digit value appears across
    several classes: any class subset then exercises every lattice direction
    and held-out embeddings stay inside the span of the rest, which is what
    makes semantic-to-visual transfer well-posed.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)

    active_dims = min(spec.embedding_dim, 8)
    base = max(3, math.ceil(spec.classes ** (1.0 / active_dims)))
    while base ** active_dims < spec.classes:
        base += 1
    slots = rng.permutation(base ** active_dims)[:spec.classes]
    emb = np.zeros((spec.classes, spec.embedding_dim))
    for c, slot in enumerate(slots):
        digits = int(slot)
        for d in range(active_dims):
            emb[c, d] = digits % base
            digits //= base
    emb *= spec.lattice_step
    emb += rng.uniform(-0.1, 0.1, size=emb.shape) * spec.lattice_step

    # fixed linear semantic-to-visual map with orthonormal columns
    raw = rng.normal(size=(spec.embedding_dim, spec.feature_dim))
    q, _ = np.linalg.qr(raw.T)
    visual_map = q.T  # (E, F), rows orthonormal in F-space

    means = emb @ visual_map
    means -= means.min()
    means += 3.0 * spec.spread  # keep blobs inside the positive orthant

    names = [f"class_{c:02d}" for c in range(spec.classes)]
    features = np.vstack([
        means[c] + spec.spread * rng.standard_normal((spec.per_class, spec.feature_dim))
        for c in range(spec.classes)
    ])
    labels = [names[c] for c in range(spec.classes) for _ in range(spec.per_class)]
    ds = Dataset(features=features, labels=labels, class_names=names, embeddings=emb)
    ds.validate()
    return ds


def true_class_means(spec: SyntheticSpec) -> dict[str, np.ndarray]:
    """The construction's exact class-conditional feature means (oracle)."""
    ds = generate_synthetic(spec)
    out = {}
    for name in ds.class_names:
        rows = [i for i, l in enumerate(ds.labels) if l == name]
        out[name] = ds.features[rows].mean(axis=0)
    return out


# ---------------------------------------------------------------------------
# dataset files


def save_dataset(out_dir, ds: Dataset) -> list[Path]:
    ds.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_matrix(out / "features.ozm", ds.features)
    (out / "labels.txt").write_text("".join(l + "\n" for l in ds.labels), encoding="utf-8")
    save_matrix(out / "embeddings.ozm", ds.embeddings)
    (out / "names.txt").write_text("".join(n + "\n" for n in ds.class_names), encoding="utf-8")
    return [out / f for f in DATASET_FILES]


def load_dataset(dir_path) -> Dataset:
    root = Path(dir_path)
    for name in DATASET_FILES:
        if not (root / name).exists():
            raise ValidationError(f"missing dataset file {root / name}")
    features = load_matrix(root / "features.ozm")
    labels = (root / "labels.txt").read_text(encoding="utf-8").splitlines()
    embeddings = load_matrix(root / "embeddings.ozm")
    names = (root / "names.txt").read_text(encoding="utf-8").splitlines()
    ds = Dataset(features=features, labels=labels, class_names=names, embeddings=embeddings)
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# splits


def make_split(seen_classes, base_unseen, regime: str, seed: int = 0) -> SplitManifest:
    """Regime-fraction partition of the base unseen classes, seeded shuffle.

    ceil(fraction * |base unseen|) classes stay unseen; the rest become
    unknown.  Seen classes pass through untouched.
    """
    if regime not in REGIMES:
        raise ValidationError(f"regime must be one of {REGIMES}")
    base_unseen = sorted(base_unseen)
    seen = set(seen_classes)
    if len(base_unseen) < 2:
        raise ValidationError("need at least two base unseen classes to split")
    if seen.intersection(base_unseen):
        raise ValidationError("seen and base unseen classes overlap")
    keep = math.ceil(UNSEEN_FRACTION[regime] * len(base_unseen))
    order = list(np.random.default_rng(seed).permutation(len(base_unseen)))
    unseen = {base_unseen[i] for i in order[:keep]}
    unknown = {base_unseen[i] for i in order[keep:]}
    manifest = SplitManifest(regime=regime, seen=seen, unseen=unseen, unknown=unknown)
    manifest.validate()
    return manifest


def save_manifest(path, manifest: SplitManifest) -> None:
    manifest.validate()
    lines = [f"regime {manifest.regime} {manifest.provenance}"]
    for name in sorted(manifest.all_classes()):
        if name in manifest.seen:
            role = "seen"
        elif name in manifest.unseen:
            role = "unseen"
        else:
            role = "unknown"
        lines.append(f"{name} {role}")
    Path(path).write_text("".join(l + "\n" for l in lines), encoding="utf-8")


def load_manifest(path) -> SplitManifest:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("regime "):
        raise ValidationError(f"{path}: first line must declare the regime")
    head = lines[0].split()
    if len(head) not in (2, 3):
        raise ValidationError(f"{path}: malformed regime line")
    regime = head[1]
    provenance = head[2] if len(head) == 3 else "canonical"
    seen, unseen, unknown = set(), set(), set()
    for ln in lines[1:]:
        if not ln.strip():
            continue
        parts = ln.split()
        if len(parts) != 2 or parts[1] not in ("seen", "unseen", "unknown"):
            raise ValidationError(f"{path}: malformed class line {ln!r}")
        name, role = parts
        {"seen": seen, "unseen": unseen, "unknown": unknown}[role].add(name)
    manifest = SplitManifest(regime=regime, seen=seen, unseen=unseen,
                             unknown=unknown, provenance=provenance)
    manifest.validate()
    return manifest


def canonical_manifest_path(dataset_tag: str, regime: str) -> Path:
    """Bundled benchmark manifests (currently the animal-attributes set)."""
    from importlib import resources
    name = f"{dataset_tag.lower()}_{regime}.txt"
    path = resources.files("ozsl").joinpath("data", name)
    with resources.as_file(path) as p:
        if not p.exists():
            raise ValidationError(f"no bundled manifest for {dataset_tag} {regime}")
        return p


# ---------------------------------------------------------------------------
# applying a manifest


def apply_manifest(ds: Dataset, manifest: SplitManifest, test_fraction: float = 0.2,
                   seed: int = 0) -> tuple[TrainView, TestView]:
    """Split instances into a leak-free train view and a test view.

    Seen-class instances are divided train/test by a seeded shuffle; unseen
    and unknown instances all go to the test view.  Unknown truths are
    replaced by the UNKNOWN sentinel, and neither unknown embeddings nor
    unknown features are reachable from the train view.
    """
    ds.validate()
    manifest.validate()
    missing = manifest.all_classes() - set(ds.class_names)
    if missing:
        raise ValidationError(f"manifest classes missing from dataset: {sorted(missing)}")
    if not 0.0 < test_fraction < 1.0:
        raise ValidationError("test_fraction must lie in (0, 1)")

    rng = np.random.default_rng(seed)
    labels = np.asarray(ds.labels)
    train_rows: list[int] = []
    test_rows: list[int] = []
    for name in sorted(manifest.seen):
        rows = np.flatnonzero(labels == name)
        rows = rows[rng.permutation(rows.size)]
        n_test = int(round(test_fraction * rows.size))
        n_test = min(max(n_test, 1), rows.size - 1) if rows.size > 1 else 0
        test_rows.extend(rows[:n_test].tolist())
        train_rows.extend(rows[n_test:].tolist())
    for name in sorted(manifest.unseen | manifest.unknown):
        test_rows.extend(np.flatnonzero(labels == name).tolist())
    train_rows.sort()
    test_rows.sort()

    embeddings = {
        name: ds.embedding_of(name)
        for name in sorted(manifest.seen | manifest.unseen)
    }
    train = TrainView(
        features=ds.features[train_rows],
        labels=[ds.labels[i] for i in train_rows],
        embeddings=embeddings,
    )
    truths = [
        UNKNOWN_LABEL if ds.labels[i] in manifest.unknown else ds.labels[i]
        for i in test_rows
    ]
    test = TestView(features=ds.features[test_rows], truths=truths)
    return train, test
