"""Backbone: per-modality MLP encoders, fusion, prediction head and task loss.

Two fusion variants share one interface so the calibration and rebalancing
modules never need to know which one is in use:

* ``concat``: ``relu(concat(z) @ W + b)``
* ``attention``: ``sum_m softmax(scores)_m * (z_m @ W_m + b_m)``
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import (
    ShapeError, Tensor, as_tensor, concat, relu, softmax, softmax_cross_entropy, weighted_sum,
)
from .model import ModelState, linear, role_rng, uniform_linear

VARIANTS = ("concat", "attention")


@dataclass
class BackboneConfig:
    variant: str = "concat"
    d_emb: int = 32
    d_h: int = 32
    hidden: int = 64

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"model.variant must be one of {VARIANTS}")
        if min(self.d_emb, self.d_h, self.hidden) < 1:
            raise ValueError("model dimensions must be positive")


@dataclass
class Prediction:
    logits: Tensor
    probs: Tensor
    hidden: Tensor | None = None

    def labels(self) -> np.ndarray:
        # argmax ties resolve to the lowest class index
        return np.argmax(self.probs.data, axis=1)


def encoder_group(m: int) -> str:
    return f"encoder:{m}"


def init_backbone(dims: Sequence[int], num_classes: int, config: BackboneConfig,
                  seed: int) -> ModelState:
    state = ModelState()
    for m, d in enumerate(dims):
        rng = role_rng(seed, encoder_group(m))
        W1, b1 = uniform_linear(rng, d, config.hidden)
        W2, b2 = uniform_linear(rng, config.hidden, config.d_emb)
        state.add_group(encoder_group(m), {"W1": W1, "b1": b1, "W2": W2, "b2": b2})
    rng = role_rng(seed, "fusion")
    M = len(dims)
    if config.variant == "concat":
        W, b = uniform_linear(rng, M * config.d_emb, config.d_h)
        state.add_group("fusion", {"W": W, "b": b})
    else:
        fusion = {"scores": Tensor(np.zeros((1, M)), requires_grad=True)}
        for m in range(M):
            W, b = uniform_linear(rng, config.d_emb, config.d_h)
            fusion[f"W{m}"] = W
            fusion[f"b{m}"] = b
        state.add_group("fusion", fusion)
    W, b = uniform_linear(role_rng(seed, "head"), config.d_h, num_classes)
    state.add_group("head", {"W": W, "b": b})
    return state


def encode(features, params: ModelState) -> list[Tensor]:
    z = []
    for m, x in enumerate(features):
        enc = params[encoder_group(m)]
        x = as_tensor(x)
        if x.shape[1] != enc["W1"].shape[0]:
            raise ShapeError(f"modality {m}: width {x.shape[1]} != encoder input {enc['W1'].shape[0]}")
        z.append(linear(relu(linear(x, enc["W1"], enc["b1"])), enc["W2"], enc["b2"]))
    return z


def fuse(z: Sequence[Tensor], params: ModelState, variant: str) -> Tensor:
    fusion = params["fusion"]
    if variant == "concat":
        return relu(linear(concat(z), fusion["W"], fusion["b"]))
    if variant == "attention":
        alpha = softmax(fusion["scores"])
        projected = [linear(zm, fusion[f"W{m}"], fusion[f"b{m}"]) for m, zm in enumerate(z)]
        return weighted_sum(projected, alpha)
    raise ValueError(f"unknown fusion variant {variant!r}")


def predict(h: Tensor, params: ModelState) -> Prediction:
    head = params["head"]
    logits = linear(h, head["W"], head["b"])
    return Prediction(logits=logits, probs=softmax(logits), hidden=h)


def task_loss(pred: Prediction, labels, reduction: str = "mean") -> Tensor:
    loss, _ = softmax_cross_entropy(pred.logits, labels, reduction=reduction)
    return loss


def forward(features, params: ModelState, variant: str) -> Prediction:
    """Encoder -> fusion -> head on already-calibrated features."""
    return predict(fuse(encode(features, params), params, variant), params)
