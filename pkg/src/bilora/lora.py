"""Low-rank adapters for frozen weight matrices.

An adapter for ``W`` of shape ``[d_out, d_in]`` holds ``A`` (``[r, d_in]``) and
``B`` (``[d_out, r]``) and adds ``(alpha / r) * B @ A`` to the frozen product.
``B`` starts at zero, so a fresh adapter leaves the base model unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

PROJECTION_KINDS = ("query", "key", "value", "output")
DEFAULT_TARGETS = frozenset({"query", "key"})


@dataclass
class LoraAdapter:
    A: Tensor
    B: Tensor
    rank: int
    alpha: float
    dropout_p: float
    target_id: str

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def shape(self) -> tuple[int, int]:
        """Shape of the adapted weight, ``(d_out, d_in)``."""
        return self.B.shape[0], self.A.shape[1]

    def delta(self) -> np.ndarray:
        return self.scaling * (self.B.data @ self.A.data)

    def parameters(self) -> list[Tensor]:
        return [self.A, self.B]

    def num_params(self) -> int:
        return self.A.data.size + self.B.data.size


@dataclass(frozen=True)
class ParamBudget:
    trainable: int
    frozen: int

    @property
    def fraction(self) -> float:
        total = self.trainable + self.frozen
        return self.trainable / total if total else 0.0

    @property
    def percent(self) -> float:
        return 100.0 * self.fraction


def init_adapter(d_out: int, d_in: int, r: int, alpha: float, dropout_p: float,
                 seed: int, target_id: str = "") -> LoraAdapter:
    if not 0 < r <= min(d_out, d_in):
        raise ContractError(f"rank {r} outside (0, {min(d_out, d_in)}] for a {d_out}x{d_in} weight")
    if alpha <= 0:
        raise ContractError(f"alpha must be positive, got {alpha}")
    if not 0.0 <= dropout_p < 1.0:
        raise ContractError(f"dropout must lie in [0, 1), got {dropout_p}")
    rng = np.random.default_rng(seed)
    A = Tensor(rng.normal(0.0, 1.0 / r, size=(r, d_in)), requires_grad=True)
    B = Tensor(np.zeros((d_out, r)), requires_grad=True)
    return LoraAdapter(A, B, r, float(alpha), float(dropout_p), target_id)


def _check(adapter: LoraAdapter, W: Tensor, x: Tensor) -> None:
    if W.shape != adapter.shape:
        raise DimensionError(f"adapter expects a weight of shape {adapter.shape}, got {W.shape}")
    if x.shape[-1] != W.shape[1]:
        raise DimensionError(f"input width {x.shape} does not match weight {W.shape}")


def lora_forward(adapter: LoraAdapter, W: Tensor, x: Tensor, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    """``W x + (alpha/r) B A drop(x)`` for ``x`` of shape ``[..., d_in]``.

    Dropout (inverted) touches only the adapter branch and only when
    ``training`` is true.
    """
    _check(adapter, W, x)
    vector = x.ndim == 1
    if vector:
        x = T.reshape(x, (1, x.shape[0]))
    base = T.matmul(x, T.transpose(W))
    xa = x
    if training and adapter.dropout_p > 0.0:
        rng = rng or np.random.default_rng()
        keep = 1.0 - adapter.dropout_p
        mask = (rng.random(x.shape) < keep) / keep
        xa = T.mul(x, Tensor(mask))
    low = T.matmul(T.matmul(xa, T.transpose(adapter.A)), T.transpose(adapter.B))
    h = T.add(base, T.scale(low, adapter.scaling))
    if vector:
        h = T.reshape(h, (W.shape[0],))
    return h


def merge(adapter: LoraAdapter, W: Tensor) -> Tensor:
    """Fold the adapter into a new frozen weight ``W + (alpha/r) B A``."""
    if W.shape != adapter.shape:
        raise DimensionError(f"adapter expects a weight of shape {adapter.shape}, got {W.shape}")
    return Tensor(W.data + adapter.delta())


def count_params(layers: int, d_model: int, matrices_per_layer: int, r: int,
                 frozen_total: int) -> ParamBudget:
    """Trainable-parameter census for square ``d_model`` projections."""
    if min(layers, d_model, matrices_per_layer, r) <= 0 or frozen_total < 0:
        raise ContractError("count_params needs positive counts")
    trainable = layers * matrices_per_layer * r * (d_model + d_model)
    return ParamBudget(trainable, frozen_total)


def validate_targets(targets) -> frozenset[str]:
    targets = frozenset(targets)
    unknown = targets - set(PROJECTION_KINDS)
    if unknown:
        raise ConfigError(f"unknown projection kinds {sorted(unknown)}; expected a subset of {PROJECTION_KINDS}")
    return targets


def inject(model, targets=DEFAULT_TARGETS, r: int = 16, alpha: float = 32.0,
           dropout_p: float = 0.05, seed: int = 0):
    """Freeze ``model`` and attach one adapter per targeted decoder projection.

    Returns the same model, which now carries ``model.adapters`` keyed by
    ``(layer, kind)``.
    """
    targets = validate_targets(targets)
    for p in model.params.values():
        p.requires_grad = False
        p.grad = None
    adapters = {}
    ss = np.random.SeedSequence(seed)
    layer_seeds = ss.spawn(model.config.decoder_layers * len(PROJECTION_KINDS))
    for layer in range(model.config.decoder_layers):
        for j, kind in enumerate(PROJECTION_KINDS):
            if kind not in targets:
                continue
            name = model.projection_name(layer, kind)
            d_out, d_in = model.params[name].shape
            child = layer_seeds[layer * len(PROJECTION_KINDS) + j]
            adapters[(layer, kind)] = init_adapter(
                d_out, d_in, r, alpha, dropout_p,
                seed=int(child.generate_state(1)[0]), target_id=name)
    model.adapters = adapters
    return model
