"""Gradient rebalancing: unimodal heads, KL learning progress, modulation
coefficients, the spatial-alignment loss and the gradient-scaling check.

Conventions
-----------
* ``mu`` is always a plain numpy array; it scales updates and weights the
  alignment loss but is never differentiated.
* Progress values are floored at ``delta_floor`` before the coefficients are
  formed, which keeps every coefficient non-negative and makes
  ``sum(mu) == rho * (M - 1)`` hold for any input.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .autograd import (
    ContractError, Tensor, abs_, as_tensor, backward, cosine_similarity, kl_divergence,
    matmul, mul, one_hot, relu, sgd_step, softmax, softmax_cross_entropy, sub, transpose,
)
from .backbone import Prediction, encoder_group
from .model import ModelState, linear, role_rng, uniform_linear

MOD_LOSS_MODES = ("current", "lagged")


@dataclass
class GrmConfig:
    rho: float = 1.4
    tau: float = 0.5
    delta_floor: float = 1e-8
    mod_loss_mode: str = "current"
    detach_unimodal: bool = True

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("grm.rho must be positive")
        if self.tau < 0:
            raise ValueError("grm.tau must be non-negative")
        if not self.delta_floor > 0:
            raise ValueError("grm.delta_floor must be positive")
        if self.mod_loss_mode not in MOD_LOSS_MODES:
            raise ValueError(f"grm.mod_loss_mode must be one of {MOD_LOSS_MODES}")


@dataclass
class ModulationState:
    """Per-modality KL bookkeeping carried between iterations.

    ``mu`` starts at ones, i.e. no modulation until a progress signal exists.
    """

    prev_kl: np.ndarray
    delta_kl: np.ndarray
    mu: np.ndarray
    carried_mod_loss: float = 0.0
    t: int = 0

    @classmethod
    def initial(cls, M: int) -> "ModulationState":
        return cls(prev_kl=np.zeros(M), delta_kl=np.zeros(M), mu=np.ones(M))


def unimodal_group(m: int) -> str:
    return f"uni:{m}"


def init_unimodal_heads(M: int, d_emb: int, d_h: int, num_classes: int, seed: int) -> ModelState:
    """Two-layer heads whose prediction weights are ``(d_h, num_classes)``,
    the same shape as the main head."""
    state = ModelState()
    for m in range(M):
        rng = role_rng(seed, unimodal_group(m))
        W_map, b_map = uniform_linear(rng, d_emb, d_h)
        W_pred, b_pred = uniform_linear(rng, d_h, num_classes)
        state.add_group(unimodal_group(m), {
            "W_map": W_map, "b_map": b_map, "W_pred": W_pred, "b_pred": b_pred,
        })
    return state


def unimodal_forward(z: Sequence[Tensor], heads: ModelState, detach: bool = True) -> list[Prediction]:
    preds = []
    for m, zm in enumerate(z):
        p = heads[unimodal_group(m)]
        zin = zm.detach() if detach else zm
        h = relu(linear(zin, p["W_map"], p["b_map"]))
        logits = linear(h, p["W_pred"], p["b_pred"])
        preds.append(Prediction(logits=logits, probs=softmax(logits), hidden=h))
    return preds


def kl_to_reference(unimodal: Prediction, multimodal: Prediction) -> float:
    """``sum_i KL(unimodal_i || multimodal_i)`` as a plain float."""
    p = unimodal.probs.data if isinstance(unimodal, Prediction) else np.asarray(unimodal)
    q = multimodal.probs.data if isinstance(multimodal, Prediction) else np.asarray(multimodal)
    if p.shape != q.shape:
        raise ValueError(f"prediction shapes {p.shape} and {q.shape} differ")
    return kl_divergence(Tensor(p), Tensor(q)).item()


def update_progress(state: ModulationState, current_kl) -> ModulationState:
    current = np.asarray(current_kl, dtype=np.float64).copy()
    delta = current.copy() if state.t == 0 else state.prev_kl - current
    return replace(state, prev_kl=current, delta_kl=delta, t=state.t + 1)


def modulation_coefficients(delta, rho: float, floor: float = 1e-8) -> np.ndarray:
    """``rho * (sum of the other modalities' progress) / (total progress)``."""
    if not rho > 0:
        raise ValueError("rho must be positive")
    d = np.maximum(np.asarray(delta, dtype=np.float64), floor)
    total = d.sum()
    return rho * (total - d) / total


def modulated_encoder_step(model: ModelState, mu, lr: float,
                           groups: Sequence[str] | None = None) -> None:
    """Encoder ``m`` moves by ``lr * mu[m] * grad``; every other listed group by ``lr * grad``.

    ``groups`` defaults to all groups of ``model``.  Unimodal heads are not
    stepped here.
    """
    mu = np.asarray(mu, dtype=np.float64)
    names = list(model.groups) if groups is None else list(groups)
    for name in names:
        if name.startswith("uni:"):
            continue
        params = model.tensors(name)
        missing = [p for p in params if p.grad is None]
        if missing:
            raise ContractError(f"group {name!r} has parameters without gradients")
        if name.startswith("encoder:"):
            sgd_step(params, lr, float(mu[int(name.split(":")[1])]))
        else:
            sgd_step(params, lr, 1.0)


def head_gradient_closed_form(h, probs, labels) -> Tensor:
    """Gradient of mean softmax cross-entropy w.r.t. a linear head's weights.

    Equals ``h.T @ (probs - onehot(labels)) / B`` and stays in the graph of
    ``h`` and ``probs``, so losses built on it are differentiable upstream.
    """
    h, probs = as_tensor(h), as_tensor(probs)
    B, C = probs.shape
    residual = sub(probs, one_hot(labels, C))
    return mul(matmul(transpose(h), residual), 1.0 / B)


def spatial_alignment_loss(grad_main: Tensor, grad_uni: Sequence[Tensor], mu):
    """``sum_m |cos(grad_uni[m], grad_main) * mu[m]|``.

    Returns ``(loss, cosines)`` with the cosines as a float array.
    """
    mu = np.asarray(mu, dtype=np.float64)
    cosines = [cosine_similarity(g, grad_main) for g in grad_uni]
    terms = [abs_(mul(c, float(w))) for c, w in zip(cosines, mu)]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total, np.array([c.item() for c in cosines])


def pairwise_min_cosine(grads: Sequence[np.ndarray]) -> float:
    """Smallest cosine over all pairs of the given gradient matrices."""
    best = np.inf
    for i in range(len(grads)):
        for j in range(i + 1, len(grads)):
            best = min(best, cosine_similarity(Tensor(grads[i]), Tensor(grads[j])).item())
    return float(best)


def equilibrium_gap(encoder_grads: Sequence[np.ndarray], mu) -> float:
    """Largest pairwise difference of ``||mu_m * g_m||`` divided by their mean."""
    mu = np.asarray(mu, dtype=np.float64)
    norms = np.array([abs(w) * np.linalg.norm(np.ravel(g)) for w, g in zip(mu, encoder_grads)])
    avg = norms.mean()
    if avg == 0:
        return 0.0
    return float((norms.max() - norms.min()) / avg)


def encoder_gradients(model: ModelState, M: int) -> list[np.ndarray]:
    out = []
    for m in range(M):
        parts = [np.zeros(t.size) if t.grad is None else t.grad.ravel() for t in model.tensors(encoder_group(m))]
        out.append(np.concatenate(parts))
    return out


# --------------------------------------------------------------------------
# expected gradient scaling under random missingness
# --------------------------------------------------------------------------


@dataclass
class BranchProblem:
    """Fixed data and parameters of one modality branch (encoder + head)."""

    x: np.ndarray
    labels: np.ndarray
    encoder: dict[str, Tensor]
    head: dict[str, Tensor]

    def loss(self, weights=None) -> Tensor:
        e, hd = self.encoder, self.head
        z = linear(relu(linear(self.x, e["W1"], e["b1"])), e["W2"], e["b2"])
        h = relu(linear(z, hd["W_map"], hd["b_map"]))
        logits = linear(h, hd["W_pred"], hd["b_pred"])
        loss, _ = softmax_cross_entropy(logits, self.labels, weights=weights)
        return loss

    def encoder_grad(self, weights=None) -> np.ndarray:
        for t in self.encoder.values():
            t.grad = None
        backward(self.loss(weights))
        g = np.concatenate([
            np.zeros(t.size) if t.grad is None else t.grad.ravel() for t in self.encoder.values()
        ])
        for t in self.encoder.values():
            t.grad = None
        return g


def default_branch_problem(seed: int, n: int = 32, d: int = 8, classes: int = 4,
                           hidden: int = 16, d_emb: int = 8, d_h: int = 8) -> BranchProblem:
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=n)
    protos = rng.standard_normal((classes, d))
    x = protos[labels] + rng.standard_normal((n, d))
    W1, b1 = uniform_linear(rng, d, hidden)
    W2, b2 = uniform_linear(rng, hidden, d_emb)
    Wm, bm = uniform_linear(rng, d_emb, d_h)
    Wp, bp = uniform_linear(rng, d_h, classes)
    return BranchProblem(
        x=x, labels=labels,
        encoder={"W1": W1, "b1": b1, "W2": W2, "b2": b2},
        head={"W_map": Wm, "b_map": bm, "W_pred": Wp, "b_pred": bp},
    )


def verify_lemma1(factory: Callable[[int], BranchProblem], r_m: float, draws: int,
                  seed: int) -> float:
    """Monte-Carlo estimate of how much random missingness shrinks the
    expected encoder gradient.

    Each draw keeps every sample independently with probability ``1 - r_m``
    and differentiates the availability-weighted loss from scratch.  The
    draws are averaged and projected onto the full-data gradient:
    ``<mean_masked, full> / <full, full>``, whose expectation is ``1 - r_m``.
    """
    if draws < 1000:
        raise ValueError("draws must be at least 1000")
    if not 0.0 <= r_m < 1.0:
        raise ValueError("r_m must lie in [0, 1)")
    problem = factory(seed)
    full = problem.encoder_grad()
    rng = np.random.default_rng([seed, 0x1E44A])
    n = problem.x.shape[0]
    avg = np.zeros_like(full)
    for k in range(1, draws + 1):
        keep = (rng.random(n) >= r_m).astype(np.float64)
        g = problem.encoder_grad(keep)
        # running mean: stays bit-exact when every draw is identical
        avg += (g - avg) / k
    return float(avg @ full / (full @ full))
