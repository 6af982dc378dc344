"""Deterministic desk-scale corpus: one shared real pool plus fake families.

Real images are smooth procedural textures. A fake image of family F is a
real-style texture plus F's fixed artifact pattern at F's amplitude.
"""

from __future__ import annotations

import json
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .degrade import gaussian_blur
from .errors import ConfigError, ManifestError

SPLITS = ("train", "val", "test")
REAL = "real"
IMAGE_SIZE = 32
DEFAULT_COUNTS = {"train": 400, "val": 10, "test": 100}


@dataclass(frozen=True)
class FamilySpec:
    name: str
    kind: str = "periodic"
    frequency: float = 4.0
    orientation: float = 0.0
    amplitude: float = 0.06

    def validate(self):
        if self.name == REAL:
            raise ConfigError("'real' is reserved for the shared real pool")
        if self.kind not in ("periodic", "checkerboard"):
            raise ConfigError(f"family {self.name}: unknown artifact kind {self.kind!r}")
        if not 0.0 < self.amplitude <= 0.5:
            raise ConfigError(f"family {self.name}: amplitude {self.amplitude} outside (0, 0.5]")
        if self.frequency <= 0:
            raise ConfigError(f"family {self.name}: frequency must be positive")

    def pattern(self, size: int = IMAGE_SIZE) -> np.ndarray:
        """The additive ``[size, size]`` fingerprint of this family."""
        y, x = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
        if self.kind == "periodic":
            u = x * np.cos(self.orientation) + y * np.sin(self.orientation)
            return self.amplitude * np.sin(2 * np.pi * self.frequency * u / size)
        cells = np.floor(x * 2 * self.frequency / size) + np.floor(y * 2 * self.frequency / size)
        return self.amplitude * (1.0 - 2.0 * (cells % 2))


TRAIN_FAMILIES = (
    FamilySpec("fam_a", "periodic", 3.0, 0.0),
    FamilySpec("fam_b", "periodic", 5.0, np.pi / 2),
    FamilySpec("fam_c", "periodic", 4.0, np.pi / 4),
    FamilySpec("fam_d", "periodic", 6.0, 3 * np.pi / 4),
    FamilySpec("fam_e", "periodic", 7.0, np.pi / 3),
)
# Frequencies that divide the image into whole 8-pixel patches (2, 4, 8) repeat
# identically in every patch and are avoided.
TRANSFER_FAMILIES = (
    FamilySpec("tr_a", "checkerboard", 3.0),
    FamilySpec("tr_b", "checkerboard", 6.0),
)
DEFAULT_FAMILIES = TRAIN_FAMILIES + TRANSFER_FAMILIES


def validate_specs(specs) -> None:
    names = [s.name for s in specs]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ConfigError(f"duplicate family names {dupes}")
    for s in specs:
        s.validate()
    for i, a in enumerate(specs):
        for b in specs[i + 1:]:
            gap = np.abs(a.pattern() - b.pattern()).mean()
            if gap <= 0.01:
                raise ConfigError(f"families {a.name} and {b.name} are not distinct (mean gap {gap:.4f})")


@dataclass(frozen=True)
class Record:
    path: str
    label: int
    family: str
    split: str

    def to_json(self) -> str:
        return json.dumps({"path": self.path, "label": self.label, "family": self.family, "split": self.split})


@dataclass
class DatasetManifest:
    records: list[Record]
    seed: int | None = field(default=None, compare=False)
    root: Path | None = field(default=None, compare=False, repr=False)

    def counts(self) -> dict[str, int]:
        return {s: sum(r.split == s for r in self.records) for s in SPLITS}

    def families(self) -> list[str]:
        seen = []
        for r in self.records:
            if r.family != REAL and r.family not in seen:
                seen.append(r.family)
        return seen

    def select(self, split: str, families=None, include_real: bool = True) -> list[Record]:
        """Records of ``split`` in manifest order, restricted to ``families`` (+ reals)."""
        keep = None if families is None else set(families)
        return [r for r in self.records if r.split == split and (
            (r.family == REAL and include_real) or (r.family != REAL and (keep is None or r.family in keep)))]

    def image_path(self, record: Record) -> Path:
        return (self.root or Path(".")) / record.path

    def load_images(self, records) -> np.ndarray:
        return np.stack([load_image(self.image_path(r)) for r in records]) if records else \
            np.zeros((0, IMAGE_SIZE, IMAGE_SIZE, 3))

    def write(self, path) -> None:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(r.to_json() + "\n")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_image(img: np.ndarray, path) -> None:
    u8 = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def _record_rng(seed: int, family: str, split: str, index: int) -> np.random.Generator:
    tag = zlib.crc32(f"{family}/{split}".encode())
    return np.random.default_rng([seed, tag, index])


def real_texture(rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    """Low-frequency sinusoids plus blurred noise around a random base colour."""
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.empty((size, size, 3))
    img[...] = rng.uniform(0.35, 0.65, size=3)
    for _ in range(3):
        f = rng.uniform(0.5, 2.0)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * f * (x * np.cos(theta) + y * np.sin(theta)) + phase)
        img += wave[..., None] * rng.uniform(0.02, 0.08, size=3)
    noise = gaussian_blur(rng.normal(0.0, 1.0, size=(size, size, 3)), 1.5)
    img += 0.05 * noise
    return np.clip(img, 0.0, 1.0)


def synthesize(seed: int, family: str, split: str, index: int, spec: FamilySpec | None = None) -> np.ndarray:
    img = real_texture(_record_rng(seed, family, split, index))
    if spec is not None:
        img = img + spec.pattern(img.shape[0])[..., None]
    return np.clip(img, 0.0, 1.0)


def concept_image(rng: np.random.Generator, amplitude=(0.04, 0.3), size: int = IMAGE_SIZE) -> np.ndarray:
    """Natural texture carrying one strong periodic artifact with random parameters."""
    img = real_texture(rng, size)
    spec = FamilySpec("concept", "periodic", rng.uniform(2.0, 10.0), rng.uniform(0, np.pi),
                      rng.uniform(*amplitude))
    shift = rng.uniform(0, size)
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5 + shift
    u = x * np.cos(spec.orientation) + y * np.sin(spec.orientation)
    pattern = spec.amplitude * np.sin(2 * np.pi * spec.frequency * u / size)
    return np.clip(img + pattern[..., None], 0.0, 1.0)


def _workers() -> int:
    env = os.environ.get("BILORA_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def mean_threshold_accuracy(train_means, train_labels, test_means, test_labels) -> float:
    """Accuracy of 'brightness above the midpoint of class means -> fake'."""
    train_means, train_labels = np.asarray(train_means), np.asarray(train_labels)
    mu_real = train_means[train_labels == 0].mean()
    mu_fake = train_means[train_labels == 1].mean()
    thr = 0.5 * (mu_real + mu_fake)
    pred = (np.asarray(test_means) > thr) == (mu_fake > mu_real)
    return float((pred.astype(int) == np.asarray(test_labels)).mean())


def gen_dataset(out_dir, specs=DEFAULT_FAMILIES, per_family=None, seed: int = 0,
                check_separability: bool = True) -> DatasetManifest:
    """Write PNGs and ``manifest.jsonl`` under ``out_dir`` and return the manifest.

    Each split holds ``per_family[split]`` fakes for every family plus an
    equally sized real pool shared by all families.
    """
    specs = tuple(specs)
    validate_specs(specs)
    counts = dict(DEFAULT_COUNTS if per_family is None else per_family)
    if set(counts) != set(SPLITS) or min(counts.values()) <= 0:
        raise ConfigError(f"per-family counts need positive train/val/test entries, got {counts}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc

    jobs = []
    for split in SPLITS:
        for spec in (None,) + specs:
            family = REAL if spec is None else spec.name
            (out / split / family).mkdir(parents=True, exist_ok=True)
            for i in range(counts[split]):
                rel = f"{split}/{family}/{i:05d}.png"
                jobs.append((Record(rel, int(spec is not None), family, split), spec, i))

    def work(job):
        rec, spec, i = job
        img = synthesize(seed, rec.family, rec.split, i, spec)
        save_image(img, out / rec.path)
        return float(np.rint(img * 255).mean() / 255)

    with ThreadPoolExecutor(max_workers=_workers()) as pool:
        means = list(pool.map(work, jobs))

    manifest = DatasetManifest([j[0] for j in jobs], seed=seed, root=out)
    manifest.write(out / "manifest.jsonl")

    sanity = None
    labels = np.array([r.label for r in manifest.records])
    splits = np.array([r.split for r in manifest.records])
    means = np.array(means)
    tr, te = splits == "train", splits == "test"
    if check_separability:
        sanity = mean_threshold_accuracy(means[tr], labels[tr], means[te], labels[te])
        if counts["test"] >= 20 and sanity > 0.6:
            raise ConfigError(f"brightness alone separates real from fake ({sanity:.3f} > 0.6)")
    meta = {
        "seed": seed,
        "counts": counts,
        "families": [{**asdict(s), "orientation": float(s.orientation)} for s in specs],
        "mean_threshold_accuracy": sanity,
    }
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    root = path.parent
    records = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"unparseable JSON ({exc.msg})", i) from exc
        if not isinstance(obj, dict) or set(obj) != {"path", "label", "family", "split"}:
            raise ManifestError("expected exactly the keys path, label, family, split", i)
        label, family, split = obj["label"], obj["family"], obj["split"]
        if label not in (0, 1) or isinstance(label, bool):
            raise ManifestError(f"label {label!r} is not 0 or 1", i)
        if split not in SPLITS:
            raise ManifestError(f"unknown split {split!r}", i)
        if (label == 1) != (family != REAL):
            raise ManifestError(f"label {label} inconsistent with family {family!r}", i)
        if not (root / obj["path"]).is_file():
            raise ManifestError(f"image file {obj['path']} is missing", i)
        records.append(Record(obj["path"], label, family, split))
    seed = None
    meta = root / "dataset.json"
    if meta.is_file():
        seed = json.loads(meta.read_text(encoding="utf-8")).get("seed")
    return DatasetManifest(records, seed=seed, root=root)
