"""Toy vision-language captioner: patch encoder -> query bridge -> decoder.

The decoder reads the bridge output as a visual prefix followed by ``<bos>``
and emits caption tokens greedily. Only the decoder's self-attention
projections can carry LoRA adapters.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .lora import LoraAdapter, lora_forward
from .tensor import Tensor

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
DEFAULT_VOCAB = (
    PAD, BOS, EOS, "real", "fake", "plain",
    "grid-a", "grid-b", "grid-c", "grid-d", "grid-e",
    "check-a", "check-b", "stripe", "speck", "tone",
)
ATTENTION_SLOTS = {"query": "q", "key": "k", "value": "v", "output": "o"}
NEG_INF = -1e9


@dataclass
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch: int = 8
    d_model: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    query_tokens: int = 4
    vocab: tuple[str, ...] = DEFAULT_VOCAB
    max_caption_len: int = 4
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        self.vocab = tuple(self.vocab)
        if self.image_size % self.patch:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch {self.patch}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        missing = {PAD, BOS, EOS, "real", "fake"} - set(self.vocab)
        if missing:
            raise ConfigError(f"vocab lacks required tokens {sorted(missing)}")
        if len(set(self.vocab)) != len(self.vocab):
            raise ConfigError("vocab has duplicate tokens")
        if min(self.encoder_layers, self.decoder_layers, self.query_tokens, self.max_caption_len) < 1:
            raise ConfigError("layer, query and caption counts must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def max_positions(self) -> int:
        return self.query_tokens + 1 + self.max_caption_len

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocab"] = list(self.vocab)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class Caption:
    tokens: tuple[int, ...]
    text: str

    @classmethod
    def from_words(cls, words, vocab) -> "Caption":
        index = {w: i for i, w in enumerate(vocab)}
        return cls(tuple(index[w] for w in words), " ".join(words))


class Abstain:
    """Caption that names neither class."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "ABSTAIN"


ABSTAIN = Abstain()


def caption_to_label(caption: Caption):
    """``real`` -> 0, ``fake`` -> 1, anything else -> ``ABSTAIN``."""
    words = caption.text.split()
    if not words:
        return ABSTAIN
    return {"real": 0, "fake": 1}.get(words[0], ABSTAIN)


def seq_loss(logits: Tensor, targets, pad_id: int = 0) -> Tensor:
    """Mean token cross-entropy of ``[steps, vocab]`` logits against ``targets``.

    ``targets`` ends with ``<eos>``; ``pad_id`` positions are ignored. Leading
    batch axes are allowed as long as ``targets`` carries the same ones.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ContractError(f"{logits.shape[:-1]} logit steps vs target shape {targets.shape}")
    flat = T.reshape(logits, (-1, logits.shape[-1]))
    flat_targets = targets.reshape(-1)
    return T.cross_entropy(flat, flat_targets, mask=flat_targets != pad_id)


def _linear_init(rng, d_out, d_in):
    return rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_out, d_in))


class CaptionModel:
    def __init__(self, config: ModelConfig | None = None, params: dict | None = None):
        self.config = config or ModelConfig()
        self.token_index = {w: i for i, w in enumerate(self.config.vocab)}
        self.adapters: dict[tuple[int, str], LoraAdapter] = {}
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        if params is None:
            self._init_params()
        else:
            for name, value in params.items():
                self.params[name] = value if isinstance(value, Tensor) else Tensor(value, requires_grad=True)

    # -- parameters ---------------------------------------------------------

    def _init_params(self):
        c = self.config
        rng = np.random.default_rng(c.seed)
        d, hid = c.d_model, c.d_model * c.mlp_ratio
        p: dict[str, np.ndarray] = {}

        def block(prefix):
            p[f"{prefix}.ln1.g"] = np.ones(d)
            p[f"{prefix}.ln1.b"] = np.zeros(d)
            for slot in "qkvo":
                p[f"{prefix}.attn.{slot}.W"] = _linear_init(rng, d, d)
                p[f"{prefix}.attn.{slot}.b"] = np.zeros(d)
            p[f"{prefix}.ln2.g"] = np.ones(d)
            p[f"{prefix}.ln2.b"] = np.zeros(d)
            p[f"{prefix}.mlp.fc1.W"] = _linear_init(rng, hid, d)
            p[f"{prefix}.mlp.fc1.b"] = np.zeros(hid)
            p[f"{prefix}.mlp.fc2.W"] = _linear_init(rng, d, hid)
            p[f"{prefix}.mlp.fc2.b"] = np.zeros(d)

        p["enc.patch.W"] = _linear_init(rng, d, c.patch_dim)
        p["enc.patch.b"] = np.zeros(d)
        p["enc.pos"] = rng.normal(0.0, 0.02, size=(c.num_patches, d))
        for i in range(c.encoder_layers):
            block(f"enc.{i}")
        p["enc.ln.g"] = np.ones(d)
        p["enc.ln.b"] = np.zeros(d)

        p["bridge.query"] = rng.normal(0.0, 1.0, size=(c.query_tokens, d))
        p["bridge.ln_kv.g"] = np.ones(d)
        p["bridge.ln_kv.b"] = np.zeros(d)
        block("bridge")
        p["bridge.proj.W"] = _linear_init(rng, d, d)
        p["bridge.proj.b"] = np.zeros(d)

        p["dec.tok"] = rng.normal(0.0, 1.0, size=(len(c.vocab), d))
        p["dec.pos"] = rng.normal(0.0, 0.02, size=(c.max_positions, d))
        for i in range(c.decoder_layers):
            block(f"dec.{i}")
        p["dec.ln.g"] = np.ones(d)
        p["dec.ln.b"] = np.zeros(d)
        p["dec.head.W"] = _linear_init(rng, len(c.vocab), d)
        p["dec.head.b"] = np.zeros(len(c.vocab))

        for name, value in p.items():
            self.params[name] = Tensor(value, requires_grad=True)

    @staticmethod
    def projection_name(layer: int, kind: str) -> str:
        return f"dec.{layer}.attn.{ATTENTION_SLOTS[kind]}.W"

    def base_parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def adapter_parameters(self) -> list[Tensor]:
        return [t for key in sorted(self.adapters) for t in self.adapters[key].parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        return [t for t in self.base_parameters() + self.adapter_parameters() if t.requires_grad]

    def named_tensors(self) -> OrderedDict:
        """Base parameters plus adapter factors under stable names."""
        out = OrderedDict(self.params)
        for (layer, kind) in sorted(self.adapters):
            ad = self.adapters[(layer, kind)]
            out[f"lora.{layer}.{kind}.A"] = ad.A
            out[f"lora.{layer}.{kind}.B"] = ad.B
        return out

    def adapter(self, layer: int, kind: str) -> LoraAdapter:
        return self.adapters[(layer, kind)]

    def zero_grad(self):
        for t in self.named_tensors().values():
            t.grad = None

    def num_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    # -- building blocks ----------------------------------------------------

    def _linear(self, x: Tensor, name: str) -> Tensor:
        return T.add(T.matmul(x, T.transpose(self.params[f"{name}.W"])), self.params[f"{name}.b"])

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return T.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _project(self, x, prefix, slot, layer, training, rng):
        kind = {v: k for k, v in ATTENTION_SLOTS.items()}[slot]
        adapter = self.adapters.get((layer, kind)) if layer is not None else None
        name = f"{prefix}.attn.{slot}"
        if adapter is None:
            return self._linear(x, name)
        h = lora_forward(adapter, self.params[f"{name}.W"], x, training=training, rng=rng)
        return T.add(h, self.params[f"{name}.b"])

    def _attention(self, xq, xkv, prefix, mask=None, layer=None, training=False, rng=None):
        c = self.config
        H, dh = c.heads, c.d_model // c.heads
        B, Tq, D = xq.shape
        Tk = xkv.shape[1]

        def heads(t, n):
            return T.transpose(T.reshape(t, (B, n, H, dh)), (0, 2, 1, 3))

        q = heads(self._project(xq, prefix, "q", layer, training, rng), Tq)
        k = heads(self._project(xkv, prefix, "k", layer, training, rng), Tk)
        v = heads(self._project(xkv, prefix, "v", layer, training, rng), Tk)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = T.add(scores, Tensor(mask))
        ctx = T.matmul(T.softmax(scores, axis=-1), v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, Tq, D))
        return self._project(ctx, prefix, "o", layer, training, rng)

    def _mlp(self, x, prefix):
        return self._linear(T.gelu(self._linear(x, f"{prefix}.mlp.fc1")), f"{prefix}.mlp.fc2")

    def _block(self, x, prefix, mask=None, layer=None, training=False, rng=None):
        h = self._ln(x, f"{prefix}.ln1")
        x = T.add(x, self._attention(h, h, prefix, mask, layer, training, rng))
        return T.add(x, self._mlp(self._ln(x, f"{prefix}.ln2"), prefix))

    # -- pipeline stages ----------------------------------------------------

    def patchify(self, images) -> np.ndarray:
        c = self.config
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != (c.image_size, c.image_size, c.channels):
            raise ContractError(
                f"expected images of shape {(c.image_size, c.image_size, c.channels)}, got {images.shape[1:]}")
        n, g, p = images.shape[0], c.image_size // c.patch, c.patch
        x = images.reshape(n, g, p, g, p, c.channels).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(n, g * g, c.patch_dim) - 0.5

    def patch_embed(self, images) -> Tensor:
        return self._linear(Tensor(self.patchify(images)), "enc.patch")

    def encode_image(self, images) -> Tensor:
        """``[n, 16, d_model]`` image tokens (or ``[16, d_model]`` for one image)."""
        single = np.asarray(images).ndim == 3
        x = T.add(self.patch_embed(images), self.params["enc.pos"])
        for i in range(self.config.encoder_layers):
            x = self._block(x, f"enc.{i}")
        x = self._ln(x, "enc.ln")
        return x[0] if single else x

    def bridge(self, image_tokens: Tensor) -> Tensor:
        """Learned queries cross-attend to image tokens; returns ``[n, query_tokens, d_model]``."""
        single = image_tokens.ndim == 2
        if single:
            image_tokens = T.reshape(image_tokens, (1,) + image_tokens.shape)
        n = image_tokens.shape[0]
        c = self.config
        q = T.add(Tensor(np.zeros((n, c.query_tokens, c.d_model))), self.params["bridge.query"])
        kv = self._ln(image_tokens, "bridge.ln_kv")
        x = T.add(q, self._attention(self._ln(q, "bridge.ln1"), kv, "bridge"))
        x = T.add(x, self._mlp(self._ln(x, "bridge.ln2"), "bridge"))
        out = self._linear(x, "bridge.proj")
        return out[0] if single else out

    def visual_prefix(self, images) -> Tensor:
        return self.bridge(self.encode_image(np.asarray(images).reshape(
            (-1, self.config.image_size, self.config.image_size, self.config.channels))))

    def decode(self, prefix: Tensor, tokens, training=False, rng=None) -> Tensor:
        """Logits ``[n, len(tokens), vocab]``; step ``j`` predicts the token after ``tokens[:, j]``."""
        tokens = np.asarray(tokens, dtype=np.int64)
        n, L = tokens.shape
        Q = self.config.query_tokens
        Tn = Q + L
        if Tn > self.config.max_positions:
            raise ContractError(f"sequence of {Tn} positions exceeds {self.config.max_positions}")
        x = T.concat([prefix, T.embedding(self.params["dec.tok"], tokens)], axis=1)
        x = T.add(x, self.params["dec.pos"][:Tn])
        mask = np.triu(np.full((Tn, Tn), NEG_INF), k=1)
        for i in range(self.config.decoder_layers):
            x = self._block(x, f"dec.{i}", mask=mask, layer=i, training=training, rng=rng)
        x = self._ln(x[:, Q:], "dec.ln")
        return self._linear(x, "dec.head")

    def next_token_logits(self, prefix: Tensor, tokens) -> np.ndarray:
        return self.decode(prefix, tokens).data[:, -1]

    # -- captioning ---------------------------------------------------------

    def teacher_forcing(self, captions) -> tuple[np.ndarray, np.ndarray]:
        """Decoder inputs (``<bos>`` + words, padded) and targets (words + ``<eos>``, padded)."""
        idx = self.token_index
        rows = [[idx[w] for w in (c.split() if isinstance(c, str) else c)] for c in captions]
        L = max(len(r) for r in rows) + 1
        inputs = np.full((len(rows), L), idx[PAD], dtype=np.int64)
        targets = np.full((len(rows), L), idx[PAD], dtype=np.int64)
        for i, r in enumerate(rows):
            inputs[i, : len(r) + 1] = [idx[BOS]] + r
            targets[i, : len(r) + 1] = r + [idx[EOS]]
        return inputs, targets

    def loss(self, images, captions, training=False, rng=None, prefix=None) -> Tensor:
        inputs, targets = self.teacher_forcing(captions)
        if prefix is None:
            prefix = self.visual_prefix(images)
        logits = self.decode(prefix, inputs, training=training, rng=rng)
        return seq_loss(logits, targets, pad_id=self.token_index[PAD])

    def generate(self, images, max_len: int | None = None, prefix: Tensor | None = None) -> list[Caption]:
        """Greedy captions for a batch; ties go to the lowest token index."""
        max_len = self.config.max_caption_len if max_len is None else max_len
        if max_len < 1:
            raise ContractError(f"max_len must be >= 1, got {max_len}")
        max_len = min(max_len, self.config.max_caption_len)
        with T.no_grad():
            if prefix is None:
                prefix = self.visual_prefix(images)
            n = prefix.shape[0]
            bos, eos = self.token_index[BOS], self.token_index[EOS]
            tokens = np.full((n, 1), bos, dtype=np.int64)
            done = np.zeros(n, dtype=bool)
            out: list[list[int]] = [[] for _ in range(n)]
            for _ in range(max_len):
                nxt = np.argmax(self.next_token_logits(prefix, tokens), axis=-1)
                for i in np.flatnonzero(~done):
                    if nxt[i] == eos:
                        done[i] = True
                    else:
                        out[i].append(int(nxt[i]))
                if done.all():
                    break
                tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
        vocab = self.config.vocab
        return [Caption(tuple(t), " ".join(vocab[j] for j in t)) for t in out]

    def generate_caption(self, image, max_len: int | None = None) -> Caption:
        return self.generate(np.asarray(image)[None], max_len)[0]

    def predict(self, images, prefix=None) -> list:
        return [caption_to_label(c) for c in self.generate(images, prefix=prefix)]
