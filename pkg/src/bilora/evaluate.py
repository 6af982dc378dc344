"""ACC/F1 metrics, per-subset evaluation and the cross-generator matrix.

The positive class is ``fake`` (label 1). An abstaining caption is wrong on
whatever the truth is: a missed fake counts as a false negative, a rejected
real as a false positive.
"""

from __future__ import annotations

import csv
import io
import json
from datetime import datetime, timezone
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DatasetManifest
from .degrade import DEGRADE_NAMES, DegradeSpec, apply_degradation
from .errors import ConfigError, EmptyEvaluationError
from .model import ABSTAIN, CaptionModel
from .tensor import Tensor
from .train import Checkpoint, base_hash, visual_prefixes


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def f1_degenerate(self) -> bool:
        """True when F1 is undefined (no positives predicted or present)."""
        return self.tp == self.fp == self.fn == 0

    @classmethod
    def from_predictions(cls, truth, predictions) -> "ConfusionCounts":
        tp = fp = fn = tn = 0
        for y, p in zip(truth, predictions, strict=True):
            if p is ABSTAIN:
                p = 1 - y
            if y == 1:
                tp, fn = (tp + 1, fn) if p == 1 else (tp, fn + 1)
            else:
                fp, tn = (fp + 1, tn) if p == 1 else (fp, tn + 1)
        return cls(tp, fp, fn, tn)


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise EmptyEvaluationError("accuracy of an empty evaluation")
    return (c.tp + c.tn) / c.total


def f1(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise EmptyEvaluationError("F1 of an empty evaluation")
    if c.tp == 0:
        return 0.0
    precision = c.tp / (c.tp + c.fp)
    recall = c.tp / (c.tp + c.fn)
    return 2 * precision * recall / (precision + recall)


@dataclass
class SubsetResult:
    test_family: str
    degrade: str
    acc: float
    f1: float
    confusion: ConfusionCounts
    predictions: list = field(default_factory=list, repr=False)
    truth: list = field(default_factory=list, repr=False)

    @property
    def n(self) -> int:
        return self.confusion.total


def degrade_label(spec: DegradeSpec) -> str:
    for name, (kind, default) in DEGRADE_NAMES.items():
        if DegradeSpec.from_name(name) == spec:
            return name
    param = {"low_res": spec.scale_factor, "jpeg": spec.quality, "blur": spec.sigma}[spec.kind]
    return f"{spec.kind}:{param}"


def as_spec(degrade) -> DegradeSpec:
    if isinstance(degrade, DegradeSpec):
        return degrade
    if degrade is None:
        return DegradeSpec()
    return DegradeSpec.from_name(degrade)


def as_model(model_or_ckpt) -> CaptionModel:
    return model_or_ckpt.to_model() if isinstance(model_or_ckpt, Checkpoint) else model_or_ckpt


class EvalCache:
    """Degraded test images and frozen visual prefixes, reused across adapters.

    Adapters live only in the decoder, so every checkpoint sharing a base
    shares the visual prefix of a given image.
    """

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._images: dict = {}
        self._prefix: dict = {}

    def images(self, family: str, spec: DegradeSpec) -> tuple[list, np.ndarray]:
        key = (family, spec)
        if key not in self._images:
            recs = subset_records(self.manifest, family)
            imgs = self.manifest.load_images(recs)
            if spec.kind != "none":
                imgs = np.stack([apply_degradation(im, spec) for im in imgs])
            self._images[key] = (recs, imgs)
        return self._images[key]

    def prefix(self, model: CaptionModel, family: str, spec: DegradeSpec) -> np.ndarray:
        key = (base_hash(model), family, spec)
        if key not in self._prefix:
            self._prefix[key] = visual_prefixes(model, self.images(family, spec)[1])
        return self._prefix[key]


def subset_records(manifest: DatasetManifest, test_family: str) -> list:
    if test_family not in manifest.families():
        raise ConfigError(f"family {test_family!r} not in manifest (have {manifest.families()})")
    return manifest.select("test", [test_family])


def eval_subset(model_or_ckpt, manifest: DatasetManifest, test_family: str, degrade=None,
                cache: EvalCache | None = None, batch: int = 256) -> SubsetResult:
    """Caption every test image of the shared real pool plus ``test_family`` fakes."""
    model = as_model(model_or_ckpt)
    spec = as_spec(degrade)
    cache = cache or EvalCache(manifest)
    recs, imgs = cache.images(test_family, spec)
    if not recs:
        raise EmptyEvaluationError(f"no test records for {test_family}")
    if isinstance(model, CaptionModel) and type(model).generate is CaptionModel.generate:
        prefix = cache.prefix(model, test_family, spec)
        preds = []
        for lo in range(0, len(recs), batch):
            preds += model.predict(None, prefix=Tensor(prefix[lo:lo + batch]))
    else:
        preds = model.predict(imgs)
    truth = [r.label for r in recs]
    counts = ConfusionCounts.from_predictions(truth, preds)
    return SubsetResult(test_family, degrade_label(spec), accuracy(counts), f1(counts), counts, preds, truth)


@dataclass
class ReportRow:
    train_family: str
    test_family: str
    degrade: str
    n: int
    acc: float
    f1: float


@dataclass
class EvalReport:
    rows: list[ReportRow]
    metadata: dict = field(default_factory=dict)

    def averages(self) -> dict[tuple[str, str], dict[str, float]]:
        """Mean ACC/F1 over test families for each (train family, degradation)."""
        groups: dict[tuple[str, str], list[ReportRow]] = {}
        for r in self.rows:
            groups.setdefault((r.train_family, r.degrade), []).append(r)
        return {k: {"acc": float(np.mean([r.acc for r in v])), "f1": float(np.mean([r.f1 for r in v]))}
                for k, v in groups.items()}

    def cell(self, train_family: str, test_family: str, degrade: str = "none") -> ReportRow:
        for r in self.rows:
            if (r.train_family, r.test_family, r.degrade) == (train_family, test_family, degrade):
                return r
        raise KeyError((train_family, test_family, degrade))

    def train_families(self) -> list[str]:
        return list(dict.fromkeys(r.train_family for r in self.rows))

    def test_families(self) -> list[str]:
        return list(dict.fromkeys(r.test_family for r in self.rows))

    def degrades(self) -> list[str]:
        return list(dict.fromkeys(r.degrade for r in self.rows))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["train_family", "test_family", "degrade", "n", "acc", "f1"])
        for r in self.rows:
            w.writerow([r.train_family, r.test_family, r.degrade, r.n, f"{100 * r.acc:.2f}", f"{100 * r.f1:.2f}"])
        return buf.getvalue()

    def to_markdown(self) -> str:
        avgs = self.averages()
        tests = self.test_families()
        out = []
        for d in self.degrades():
            out.append(f"### Degradation: {d}\n")
            out.append("| Train \\ Test | " + " | ".join(tests) + " | Average |")
            out.append("|---" * (len(tests) + 2) + "|")
            for tr in self.train_families():
                cells = []
                for te in tests:
                    try:
                        r = self.cell(tr, te, d)
                    except KeyError:
                        cells.append("-")
                        continue
                    text = f"{100 * r.acc:.2f} / {100 * r.f1:.2f}"
                    cells.append(f"**{text}**" if tr == te else text)
                if (tr, d) not in avgs:
                    continue
                a = avgs[(tr, d)]
                out.append(f"| {tr} | " + " | ".join(cells) + f" | {100 * a['acc']:.2f} / {100 * a['f1']:.2f} |")
            out.append("")
        out.append("Cells are ACC (%) / F1 (%), positive class = fake.")
        return "\n".join(out) + "\n"

    def to_json(self) -> str:
        return json.dumps({"rows": [asdict(r) for r in self.rows], "metadata": self.metadata},
                          indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        obj = json.loads(text)
        return cls([ReportRow(**r) for r in obj["rows"]], obj.get("metadata", {}))


def cross_matrix(ckpts: dict, manifest: DatasetManifest, degrades=("none",), test_families=None,
                 cache: EvalCache | None = None) -> EvalReport:
    """Evaluate every checkpoint on every test family under every degradation."""
    if not ckpts:
        raise ConfigError("cross_matrix needs at least one checkpoint")
    tests = list(test_families) if test_families is not None else manifest.families()
    if not tests:
        raise ConfigError("cross_matrix needs at least one test family")
    cache = cache or EvalCache(manifest)
    specs = [as_spec(d) for d in degrades]
    rows = []
    for train_family, ck in ckpts.items():
        model = as_model(ck)
        for spec in specs:
            for test_family in tests:
                try:
                    res = eval_subset(model, manifest, test_family, spec, cache)
                except Exception as exc:
                    raise type(exc)(f"[train={train_family} test={test_family} "
                                    f"degrade={degrade_label(spec)}] {exc}") from exc
                rows.append(ReportRow(train_family, test_family, res.degrade, res.n, res.acc, res.f1))
    meta = {"train_families": list(ckpts), "test_families": tests,
            "degrades": [degrade_label(s) for s in specs], "seed": manifest.seed,
            "created": datetime.now(timezone.utc).isoformat(timespec="seconds")}
    return EvalReport(rows, meta)
