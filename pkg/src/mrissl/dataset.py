"""Sample records, manifests, and the deterministic split / balance steps.

A manifest is the unit every stage exchanges: an ordered list of
:class:`SampleRecord` plus the class taxonomy it is labelled against.
Augmented records never touch the disk; they point at their source image
and carry the seed that replays the augmentation.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

logger = logging.getLogger(__name__)

ORIGINAL = "original"
AUGMENTED = "augmented"
MANIFEST_VERSION = 1

TUMOR_FAMILIES = ("Glioma", "Schwannoma", "Meningioma", "Neurocitoma", "OtherLesions")
TUMOR_SEQUENCES = ("T1", "T1C+", "T2")
NORMAL_SEQUENCES = ("T1", "T2")

# Per-class image counts of the public 17-class brain MRI corpus.
MRI17_CLASS_COUNTS: dict[str, int] = {
    "Glioma-T1C+": 508, "Glioma-T1": 430, "Glioma-T2": 346,
    "Schwannoma-T1": 153, "Schwannoma-T1C+": 194, "Schwannoma-T2": 123,
    "Meningioma-T1": 345, "Meningioma-T1C+": 625, "Meningioma-T2": 329,
    "Neurocitoma-T1": 169, "Neurocitoma-T1C+": 261, "Neurocitoma-T2": 112,
    "OtherLesions-T1": 152, "OtherLesions-T1C+": 48, "OtherLesions-T2": 57,
    "Normal-T1": 272, "Normal-T2": 291,
}
BALANCE_TARGET = 625


class DatasetError(ValueError):
    """Raised when a dataset or manifest violates its contract."""


class TaxonomyMismatchError(DatasetError):
    """The on-disk layout or a manifest disagrees with the class taxonomy."""


def derive_seed(*parts: object) -> int:
    """Hash arbitrary parts into a non-negative 63-bit seed."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "big") & ((1 << 63) - 1)


@dataclass(frozen=True)
class ClassTaxonomy:
    """Ordered class identifiers; the index of a class is its integer label."""

    classes: tuple[str, ...]

    def __post_init__(self):
        if not self.classes:
            raise DatasetError("taxonomy has no classes")
        if len(set(self.classes)) != len(self.classes):
            raise DatasetError("taxonomy class identifiers must be unique")

    @classmethod
    def mri17(cls) -> "ClassTaxonomy":
        """The 17 family x sequence classes (five tumour families plus Normal)."""
        classes = [f"{fam}-{seq}" for fam in TUMOR_FAMILIES for seq in TUMOR_SEQUENCES]
        classes += [f"Normal-{seq}" for seq in NORMAL_SEQUENCES]
        return cls(tuple(classes))

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ClassTaxonomy":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(ln.strip() for ln in lines if ln.strip() and not ln.startswith("#")))

    def to_file(self, path: str | os.PathLike) -> None:
        Path(path).write_text("\n".join(self.classes) + "\n", encoding="utf-8")

    def __len__(self) -> int:
        return len(self.classes)

    def __contains__(self, label: object) -> bool:
        return label in self.classes

    def index(self, label: str) -> int:
        try:
            return self.classes.index(label)
        except ValueError:
            raise TaxonomyMismatchError(f"label {label!r} is not in the taxonomy") from None

    def families(self) -> dict[str, list[str]]:
        """Group class ids by their family prefix (text before the last '-')."""
        out: dict[str, list[str]] = {}
        for c in self.classes:
            fam, _, seq = c.rpartition("-")
            out.setdefault(fam or c, []).append(seq)
        return out

    @property
    def sha256(self) -> str:
        return hashlib.sha256("\n".join(self.classes).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class SampleRecord:
    path: str
    label: str
    origin: str = ORIGINAL
    seed: int = 0

    def __post_init__(self):
        if self.origin not in (ORIGINAL, AUGMENTED):
            raise DatasetError(f"unknown origin {self.origin!r}")
        if self.seed < 0:
            raise DatasetError("seed must be non-negative")

    def sort_key(self) -> tuple:
        return (self.label, self.path, self.origin != ORIGINAL, self.seed)


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[SampleRecord, ...]
    taxonomy: ClassTaxonomy
    skipped: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        for r in self.records:
            if r.label not in self.taxonomy:
                raise TaxonomyMismatchError(f"record {r.path!r} has label {r.label!r} outside the taxonomy")

    @property
    def counts(self) -> dict[str, int]:
        hist = Counter(r.label for r in self.records)
        return {c: hist.get(c, 0) for c in self.taxonomy.classes}

    def __len__(self) -> int:
        return len(self.records)

    def labels(self) -> np.ndarray:
        return np.array([self.taxonomy.index(r.label) for r in self.records], dtype=np.int64)

    def by_class(self) -> dict[str, list[SampleRecord]]:
        groups: dict[str, list[SampleRecord]] = {c: [] for c in self.taxonomy.classes}
        for r in self.records:
            groups[r.label].append(r)
        return groups

    def to_tsv(self) -> str:
        lines = [f"# mrissl-manifest v{MANIFEST_VERSION} taxonomy_sha256={self.taxonomy.sha256}"]
        for r in self.records:
            if any(ch in r.path for ch in "\t\n"):
                raise DatasetError(f"path {r.path!r} cannot be stored in a TSV manifest")
            lines.append(f"{r.path}\t{r.label}\t{r.origin}\t{r.seed}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike, taxonomy: ClassTaxonomy) -> "DatasetManifest":
        text = Path(path).read_text(encoding="utf-8")
        lines = text.splitlines()
        if not lines or not lines[0].startswith("# mrissl-manifest"):
            raise DatasetError(f"{path}: missing manifest header")
        header = dict(tok.split("=", 1) for tok in lines[0].split() if "=" in tok)
        if header.get("taxonomy_sha256") != taxonomy.sha256:
            raise TaxonomyMismatchError(f"{path}: manifest was written for a different taxonomy")
        records = []
        for ln in lines[1:]:
            if not ln:
                continue
            p, label, origin, seed = ln.split("\t")
            records.append(SampleRecord(p, label, origin, int(seed)))
        return cls(tuple(records), taxonomy)


def _is_decodable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError):
        return False


def load_manifest(root: str | os.PathLike, taxonomy: ClassTaxonomy) -> DatasetManifest:
    """Index ``root/<class id>/*`` into a manifest sorted by path.

    Every class of the taxonomy must have a directory. Files PIL cannot
    decode are skipped with a warning and listed in ``manifest.skipped``.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    subdirs = sorted(p.name for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not subdirs:
        raise DatasetError(f"no class directories found under {root}")
    missing = [c for c in taxonomy.classes if c not in subdirs]
    if missing:
        raise TaxonomyMismatchError(f"missing class directories under {root}: {', '.join(missing)}")
    extra = [d for d in subdirs if d not in taxonomy]
    if extra:
        logger.warning("ignoring directories outside the taxonomy: %s", ", ".join(extra))

    records, skipped = [], []
    for label in taxonomy.classes:
        for f in sorted((root / label).iterdir()):
            if not f.is_file() or f.name.startswith("."):
                continue
            if not _is_decodable(f):
                logger.warning("skipping undecodable file %s", f)
                skipped.append(f.as_posix())
                continue
            # seeded by the root-relative path so moving the corpus changes nothing
            seed = derive_seed("record", f.relative_to(root).as_posix())
            records.append(SampleRecord(f.as_posix(), label, ORIGINAL, seed))
    records.sort(key=lambda r: r.path)
    return DatasetManifest(tuple(records), taxonomy, tuple(skipped))


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.80
    val_frac: float = 0.10
    test_frac: float = 0.10
    seed: int = 0
    rounding: str = "val-floor-test-remainder"

    def __post_init__(self):
        fracs = [Fraction(str(f)) for f in (self.train_frac, self.val_frac, self.test_frac)]
        if sum(fracs) != 1 or any(f < 0 for f in fracs):
            raise DatasetError("split fractions must be non-negative and sum to exactly 1")
        if self.rounding != "val-floor-test-remainder":
            raise DatasetError(f"unsupported rounding rule {self.rounding!r}")

    def sizes(self, n: int) -> tuple[int, int, int]:
        """(train, val, test) counts for ``n`` records: train rounds half up, val floors, test takes the rest."""
        n_train = math.floor(Fraction(str(self.train_frac)) * n + Fraction(1, 2))
        n_val = math.floor(Fraction(str(self.val_frac)) * n)
        n_val = min(n_val, n - n_train)
        return n_train, n_val, n - n_train - n_val


def _apportion(quotas: list[Fraction], total: int, upper: list[int], order: list[int]) -> list[int]:
    """Integers summing to ``total``, each within 1 of its quota where the bounds allow.

    Starts from the floors and moves one unit at a time to the entry whose
    quota is furthest away, ties going to the earlier entry of ``order``.
    """
    x = [min(math.floor(q), u) for q, u in zip(quotas, upper)]
    rank = {c: r for r, c in enumerate(order)}
    while sum(x) < total:
        open_ = [i for i in range(len(x)) if x[i] < upper[i]]
        if not open_:
            raise DatasetError("split sizes exceed the available records")
        i = max(open_, key=lambda i: (quotas[i] - x[i], -rank[i]))
        x[i] += 1
    while sum(x) > total:
        i = max((i for i in range(len(x)) if x[i] > 0), key=lambda i: (x[i] - quotas[i], -rank[i]))
        x[i] -= 1
    return x


def stratified_split(
    manifest: DatasetManifest, spec: SplitSpec
) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Split so each part holds its fraction of the corpus and of every class.

    Part totals follow :meth:`SplitSpec.sizes` applied to the whole manifest.
    Those totals are spread over classes by largest remainder, so each
    class's train and val counts are within one record of their exact
    share (test takes what is left). Records are assigned from a per-class
    seeded permutation.
    """
    groups = {c: sorted(recs, key=SampleRecord.sort_key) for c, recs in manifest.by_class().items() if recs}
    for label, recs in groups.items():
        if len(recs) < 3:
            raise DatasetError(f"class {label!r} has {len(recs)} records; at least 3 are needed to split")
    labels = list(groups)
    sizes = [len(groups[c]) for c in labels]
    n_train, n_val, _ = spec.sizes(sum(sizes))
    tie_order = list(np.random.default_rng(derive_seed("split-ties", spec.seed)).permutation(len(labels)))
    train_frac, val_frac = Fraction(str(spec.train_frac)), Fraction(str(spec.val_frac))
    train_k = _apportion([train_frac * n for n in sizes], n_train, sizes, tie_order)
    val_k = _apportion([val_frac * n for n in sizes], n_val, [n - t for n, t in zip(sizes, train_k)], tie_order)

    parts: tuple[list, list, list] = ([], [], [])
    for label, recs, k_tr, k_va in zip(labels, (groups[c] for c in labels), train_k, val_k):
        order = np.random.default_rng(derive_seed("split", spec.seed, label)).permutation(len(recs))
        shuffled = [recs[i] for i in order]
        parts[0].extend(shuffled[:k_tr])
        parts[1].extend(shuffled[k_tr:k_tr + k_va])
        parts[2].extend(shuffled[k_tr + k_va:])
    return tuple(
        DatasetManifest(tuple(sorted(p, key=SampleRecord.sort_key)), manifest.taxonomy) for p in parts
    )


def balance_classes(
    manifest: DatasetManifest, target: int = BALANCE_TARGET, seed: int = 0
) -> DatasetManifest:
    """Top every class up to ``target`` records with replayable augmented copies.

    Replica ``i`` of a class augments the ``i mod n``-th original (in path
    order) and gets the seed ``derive_seed(seed, source seed, i)``, so the
    result does not depend on the input record order. The augmentation
    parameters themselves are applied when the image is materialized.
    """
    counts = manifest.counts
    over = {c: n for c, n in counts.items() if n > target}
    if over:
        raise DatasetError(f"classes exceed the balance target {target}: {over}")
    out = list(manifest.records)
    for label, recs in manifest.by_class().items():
        sources = sorted((r for r in recs if r.origin == ORIGINAL), key=SampleRecord.sort_key)
        need = target - len(recs)
        if need == 0:
            continue
        if not sources:
            raise DatasetError(f"class {label!r} has no original images to augment")
        for i in range(need):
            src = sources[i % len(sources)]
            out.append(SampleRecord(src.path, label, AUGMENTED, derive_seed("balance", seed, src.seed, i)))
    out.sort(key=SampleRecord.sort_key)
    return DatasetManifest(tuple(out), manifest.taxonomy)


def concat_manifests(manifests: Iterable[DatasetManifest]) -> DatasetManifest:
    manifests = list(manifests)
    tax = manifests[0].taxonomy
    if any(m.taxonomy != tax for m in manifests):
        raise TaxonomyMismatchError("cannot concatenate manifests with different taxonomies")
    return DatasetManifest(tuple(r for m in manifests for r in m.records), tax)


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Decode an image file to a single-channel array in its native bit depth."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            return np.asarray(im, dtype=np.uint16 if im.mode.startswith("I;16") else np.int32)
        return np.asarray(im.convert("L"))


def check_class_counts(counts: dict[str, int], expected: dict[str, int] = MRI17_CLASS_COUNTS) -> list[str]:
    """Return a human-readable list of classes whose counts differ from ``expected``."""
    return [f"{c}: {counts.get(c, 0)} != {n}" for c, n in expected.items() if counts.get(c, 0) != n]


def histogram(records: Sequence[SampleRecord]) -> Counter:
    return Counter(r.label for r in records)
