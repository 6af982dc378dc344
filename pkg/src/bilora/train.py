"""Two-stage training: base pretraining and LoRA-only fine-tuning, with Adam."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import REAL, DatasetManifest, concept_image
from .errors import ConfigError, ContractError, FormatError, NumericError, TruncatedFileError, VersionError
from .lora import LoraAdapter, inject, validate_targets
from .model import BOS, EOS, PAD, CaptionModel, ModelConfig
from .tensor import Tensor

log = logging.getLogger(__name__)

MAGIC = b"BLRA"
FORMAT_VERSION = 1
STAGES = ("pretrain", "finetune")


@dataclass
class LoraConfig:
    r: int = 16
    alpha: float = 32.0
    dropout: float = 0.05
    targets: tuple[str, ...] = ("key", "query")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lora: LoraConfig = field(default_factory=LoraConfig)
    seed: int = 0
    stage: str = "finetune"
    families: tuple[str, ...] | None = None
    early_stop: bool = True
    # pretrain only: images with strong random artifacts captioned "fake"
    concept_images: int = 800

    def __post_init__(self):
        if isinstance(self.lora, dict):
            self.lora = LoraConfig(**self.lora)
        self.lora.targets = tuple(sorted(validate_targets(self.lora.targets)))
        if self.families is not None:
            self.families = tuple(self.families)
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.learning_rate <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("learning rate, epochs and batch size must be positive")
        if not 0.0 <= self.lora.dropout < 1.0:
            raise ConfigError(f"LoRA dropout {self.lora.dropout} outside [0, 1)")
        if self.lora.r <= 0 or self.lora.alpha <= 0:
            raise ConfigError("LoRA rank and alpha must be positive")

    @classmethod
    def full_scale_preset(cls, **overrides) -> "TrainConfig":
        """Learning rate used for the full-size captioner (5e-5)."""
        return cls(**{"learning_rate": 5e-5, **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora"]["targets"] = list(self.lora.targets)
        d["families"] = None if self.families is None else list(self.families)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ---------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(state: AdamState, params, grads, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, names=None) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ContractError("params, grads and optimizer state are not aligned")
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            name = names[i] if names else f"#{i}"
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None or not p.requires_grad:
            continue
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ---------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    tensors: OrderedDict
    model_config: dict
    train_config: dict | None = None
    stage: str = "base"
    extra: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def config_blob(self) -> dict:
        return {"model": self.model_config, "train": self.train_config, "stage": self.stage,
                "extra": self.extra, "version": self.version}

    def to_model(self) -> CaptionModel:
        cfg = ModelConfig.from_dict(self.model_config)
        base = OrderedDict((k, Tensor(v.copy(), requires_grad=True))
                           for k, v in self.tensors.items() if not k.startswith("lora."))
        model = CaptionModel(cfg, base)
        adapter_names = [k for k in self.tensors if k.startswith("lora.")]
        if adapter_names:
            lc = TrainConfig.from_dict(self.train_config).lora
            for p in model.params.values():
                p.requires_grad = False
            adapters = {}
            for name in adapter_names:
                _, layer, kind, part = name.split(".")
                if part != "A":
                    continue
                A = Tensor(self.tensors[name].copy(), requires_grad=True)
                B = Tensor(self.tensors[f"lora.{layer}.{kind}.B"].copy(), requires_grad=True)
                adapters[(int(layer), kind)] = LoraAdapter(
                    A, B, lc.r, lc.alpha, lc.dropout, model.projection_name(int(layer), kind))
            model.adapters = adapters
        model.attributes = dict(self.extra.get("attributes", {}))
        return model

    @classmethod
    def from_model(cls, model: CaptionModel, config: TrainConfig | None, stage: str, extra=None):
        tensors = OrderedDict((k, t.data.copy()) for k, t in model.named_tensors().items())
        extra = dict(extra or {})
        if getattr(model, "attributes", None):
            extra.setdefault("attributes", dict(model.attributes))
        return cls(tensors, model.config.to_dict(), None if config is None else config.to_dict(), stage, extra)


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(ckpt.tensors))]
    parts += [_pack_tensor(k, v) for k, v in ckpt.tensors.items()]
    blob = json.dumps(ckpt.config_blob(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)) + blob)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"checkpoint truncated at byte {len(self.buf)} (needed {self.pos + n})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic {buf[:4]!r})")
    r.take(4)
    version, count = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, expected {FORMAT_VERSION}")
    tensors = OrderedDict()
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        if name in tensors:
            raise FormatError(f"{path}: tensor {name} stored twice")
        tensors[name] = arr
    (blen,) = r.unpack("<I")
    try:
        blob = json.loads(r.take(blen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: config blob is not valid JSON") from exc
    if r.pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - r.pos} trailing bytes after config blob")
    return Checkpoint(tensors, blob["model"], blob.get("train"), blob.get("stage", "base"),
                      blob.get("extra", {}), version)


def base_hash(model: CaptionModel) -> str:
    h = hashlib.sha256()
    for name, t in model.params.items():
        h.update(name.encode())
        h.update(t.data.tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------- train


def attribute_words(model: CaptionModel, families) -> dict[str, str]:
    """Pretraining caption word per family: ``plain`` for reals, one unused word per fake family."""
    reserved = {PAD, BOS, EOS, "real", "fake", "plain"}
    pool = [w for w in model.config.vocab if w not in reserved]
    if len(families) > len(pool):
        raise ConfigError(f"{len(families)} families but only {len(pool)} attribute words in the vocab")
    return {REAL: "plain", **{f: w for f, w in zip(families, pool)}}


def _target_caption(stage: str, family: str, attributes) -> str:
    if stage == "finetune":
        return "real" if family == REAL else "fake"
    return attributes[family]


def _caption_accuracy(model, images, captions, prefix=None, batch: int = 256) -> float:
    """Fraction of exact caption matches; a ``plain`` target also accepts ``real``."""
    hits = 0
    for lo in range(0, len(captions), batch):
        sub = None if prefix is None else Tensor(prefix[lo:lo + batch])
        got = model.generate(images[lo:lo + batch] if prefix is None else None, prefix=sub)
        hits += sum(g.text == c or (c == "plain" and g.text == "real")
                    for g, c in zip(got, captions[lo:lo + batch]))
    return hits / len(captions)


def visual_prefixes(model: CaptionModel, images, batch: int = 256) -> np.ndarray:
    with T.no_grad():
        chunks = [model.visual_prefix(images[lo:lo + batch]).data for lo in range(0, len(images), batch)]
    return np.concatenate(chunks) if chunks else np.zeros((0, model.config.query_tokens, model.config.d_model))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    best_epoch: int


def train(model: CaptionModel, manifest: DatasetManifest, config: TrainConfig,
          return_result: bool = False):
    """Minimise caption cross-entropy on the train split; keep the best-val state.

    ``pretrain`` updates every base weight against attribute captions;
    ``finetune`` updates only injected adapters against ``real``/``fake``.
    """
    stage = config.stage
    if stage == "finetune" and not model.adapters:
        raise ContractError("finetune stage needs a model with injected adapters")
    if stage == "pretrain" and model.adapters:
        raise ContractError("pretrain stage expects a model without adapters")
    families = list(config.families) if config.families else manifest.families()
    train_recs = manifest.select("train", families)
    if not train_recs or all(r.family == REAL for r in train_recs):
        raise ContractError("train split has no usable records for the requested families")
    val_recs = manifest.select("val", families)

    if stage == "pretrain":
        model.attributes = attribute_words(model, families)
    attributes = getattr(model, "attributes", {})
    train_caps = [_target_caption(stage, r.family, attributes) for r in train_recs]
    val_caps = [_target_caption(stage, r.family, attributes) for r in val_recs]
    train_imgs = manifest.load_images(train_recs)
    if stage == "pretrain" and config.concept_images:
        crng = np.random.default_rng([config.seed, 3])
        extra = np.stack([concept_image(crng) for _ in range(config.concept_images)])
        train_imgs = np.concatenate([train_imgs, extra])
        train_caps = train_caps + ["fake"] * config.concept_images
    val_imgs = manifest.load_images(val_recs)

    params = model.trainable_parameters()
    names = {id(t): k for k, t in model.named_tensors().items()}
    param_names = [names.get(id(p), "?") for p in params]
    state = AdamState.for_params(params)
    frozen_before = base_hash(model) if stage == "finetune" else None

    # frozen encoder + bridge: the visual prefix is a constant during fine-tuning
    train_prefix = visual_prefixes(model, train_imgs) if stage == "finetune" else None
    val_prefix = visual_prefixes(model, val_imgs) if stage == "finetune" and val_recs else None

    rng = np.random.default_rng(config.seed)
    drop_rng = np.random.default_rng([config.seed, 1])
    mix_rng = np.random.default_rng([config.seed, 2])
    history: list[dict] = []
    best_acc, best_epoch, best_state = -1.0, 0, None
    n = len(train_caps)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            caps = [train_caps[i] for i in idx]
            if stage == "pretrain":
                coins = mix_rng.random(len(caps)) < 0.5
                caps = ["real" if w == "plain" and c else w for w, c in zip(caps, coins)]
            model.zero_grad()
            if train_prefix is not None:
                loss = model.loss(None, caps, training=True, rng=drop_rng, prefix=Tensor(train_prefix[idx]))
            else:
                loss = model.loss(train_imgs[idx], caps, training=True, rng=drop_rng)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"loss is {value} at epoch {epoch}, batch {b}")
            T.backward(loss)
            adam_step(state, params, [p.grad for p in params], config.learning_rate,
                      config.beta1, config.beta2, config.eps, names=param_names)
            losses.append(value)
        val_acc = _caption_accuracy(model, val_imgs, val_caps, val_prefix) if val_recs else float("nan")
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_acc": val_acc})
        log.info("%s epoch %d loss %.4f val_acc %.4f", stage, epoch, np.mean(losses), val_acc)
        score = val_acc if val_recs else -float(np.mean(losses))
        if score > best_acc:
            best_acc, best_epoch = score, epoch
            best_state = {k: t.data.copy() for k, t in model.named_tensors().items()}
        if config.early_stop and val_recs and val_acc == 1.0:
            break
    model.zero_grad()
    for k, t in model.named_tensors().items():
        t.data[...] = best_state[k]
    if frozen_before is not None and base_hash(model) != frozen_before:
        raise AssertionError("frozen base weights changed during fine-tuning")

    extra = {"history": history, "best_epoch": best_epoch, "families": families}
    ckpt = Checkpoint.from_model(model, config, stage, extra)
    if return_result:
        return TrainResult(ckpt, history, best_epoch)
    return ckpt


def prepare_finetune(base: Checkpoint, config: TrainConfig) -> CaptionModel:
    """Load a pretrained base and attach fresh adapters per ``config.lora``."""
    model = base.to_model()
    if model.adapters:
        raise ContractError("base checkpoint already carries adapters")
    lc = config.lora
    return inject(model, lc.targets, r=lc.r, alpha=lc.alpha, dropout_p=lc.dropout, seed=config.seed)
