"""Feature calibration: batch-level descriptors, cross-modal context and
sigmoid gating of each modality's features.

The gate ``1 + sigmoid(w)`` lies in (1, 2) and multiplies whole rows, so a
masked (all-zero) row stays exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import Tensor, ShapeError, as_tensor, concat, mul, relu, sigmoid, sum_
from .model import linear, role_rng, uniform_linear, zero_linear


@dataclass
class FcmConfig:
    epsilon: float = 1e-8
    d_global: int | None = None
    descriptor_scope: str = "batch"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("fcm.epsilon must be positive")
        if self.descriptor_scope not in ("batch", "frozen"):
            raise ValueError("fcm.descriptor_scope must be 'batch' or 'frozen'")

    def resolve_d_global(self, dims: Sequence[int]) -> int:
        if self.d_global is not None:
            return int(self.d_global)
        return max(1, int(round(float(np.mean(dims)))))


def init_fcm_params(dims: Sequence[int], d_global: int, seed: int) -> dict[str, Tensor]:
    """Context layer gets the usual uniform init; the calibration layers start
    at zero so every gate is exactly 1.5 before the first update."""
    W_g, b_g = uniform_linear(role_rng(seed, "fcm"), sum(dims), d_global)
    params = {"W_global": W_g, "b_global": b_g}
    for m, d in enumerate(dims):
        W, b = zero_linear(d_global, d)
        params[f"W_cal{m}"] = W
        params[f"b_cal{m}"] = b
    return params


def global_descriptor(x, present, epsilon: float) -> Tensor:
    """Mean of the present rows of ``x`` as a ``(1, d)`` row.

    ``x`` already holds zeros for missing rows; ``present`` is the 0/1 column
    of the mask for this modality.
    """
    x = as_tensor(x)
    count = float(np.sum(present))
    return mul(sum_(x, axis=0), 1.0 / (epsilon + count))


def cross_modal_context(descriptors: Sequence[Tensor], params: dict[str, Tensor]) -> Tensor:
    joined = concat(descriptors)
    if joined.shape[1] != params["W_global"].shape[0]:
        raise ShapeError(
            f"descriptor width {joined.shape[1]} != context input {params['W_global'].shape[0]}"
        )
    return relu(linear(joined, params["W_global"], params["b_global"]))


def gates(context: Tensor, params: dict[str, Tensor], M: int) -> list[Tensor]:
    """Per-modality ``(1, d_m)`` gating rows ``1 + sigmoid(w_m)``."""
    return [
        1.0 + sigmoid(linear(context, params[f"W_cal{m}"], params[f"b_cal{m}"]))
        for m in range(M)
    ]


def batch_descriptors(features, mask, epsilon: float) -> list[Tensor]:
    return [global_descriptor(x, mask[:, m], epsilon) for m, x in enumerate(features)]


def calibrate(features, mask, params: dict[str, Tensor], config: FcmConfig,
              descriptors: Sequence[Tensor] | None = None) -> list[Tensor]:
    """Return the recalibrated feature matrices, one per modality.

    ``descriptors`` overrides the per-batch descriptors (frozen scope).
    """
    features = [as_tensor(x) for x in features]
    if descriptors is None:
        descriptors = batch_descriptors(features, np.asarray(mask), config.epsilon)
    context = cross_modal_context(descriptors, params)
    return [mul(x, g) for x, g in zip(features, gates(context, params, len(features)))]
