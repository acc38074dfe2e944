"""Missing-modality masks: pattern distributions, imbalance divergence and
the deterministic mask-set generator.

A mask pattern is a tuple of M bits, ``1`` meaning the modality is present.
Patterns are indexed by ``sum(e[m] << m)``, so modality 0 is the least
significant bit, the all-missing pattern has index 0 and the all-present
pattern has index ``2**M - 1``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import PROB_FLOOR


def validate_rates(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("missing-rate vector needs at least two modalities")
    if np.any(~np.isfinite(r)) or np.any(r < 0) or np.any(r >= 1):
        raise ValueError(f"missing rates must lie in [0, 1), got {r.tolist()}")
    return r


def pattern_index(e) -> int:
    return sum(int(b) << m for m, b in enumerate(e))


def all_patterns(M: int, include_all_missing: bool = False) -> list[tuple[int, ...]]:
    """Patterns in ascending index order."""
    start = 0 if include_all_missing else 1
    return [tuple((k >> m) & 1 for m in range(M)) for k in range(start, 2 ** M)]


def _pattern_mass(e, r) -> float:
    return math.prod((1.0 - rm) if bit else rm for bit, rm in zip(e, r))


def imr_distribution(r) -> dict[tuple[int, ...], float]:
    """Pattern probabilities under modality-specific Bernoulli missingness,
    renormalised to exclude the all-missing pattern."""
    r = validate_rates(r)
    norm = 1.0 - math.prod(r)
    return {e: float(_pattern_mass(e, r) / norm) for e in all_patterns(r.size)}


def smr_distribution(r_shared: float, M: int) -> dict[tuple[int, ...], float]:
    if M < 2:
        raise ValueError("M must be at least 2")
    if not 0.0 <= r_shared < 1.0:
        raise ValueError(f"shared missing rate must lie in [0, 1), got {r_shared}")
    norm = 1.0 - r_shared ** M
    return {
        e: (1.0 - r_shared) ** sum(e) * r_shared ** (M - sum(e)) / norm
        for e in all_patterns(M)
    }


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    q = np.maximum(q, PROB_FLOOR)
    pos = p > 0
    return float(np.sum(p[pos] * np.log(p[pos] / q[pos])))


def delta_imr(r, r_shared: float, measure: str = "kl") -> float:
    """Divergence of the IMR pattern distribution from the SMR one.

    ``measure`` is ``"kl"`` for ``KL(p_imr || p_smr)`` or ``"js"`` for the
    Jensen-Shannon divergence (natural log, so bounded by ``ln 2``).
    """
    r = validate_rates(r)
    p_imr = imr_distribution(r)
    p_smr = smr_distribution(r_shared, r.size)
    p = np.array([p_imr[e] for e in p_imr])
    q = np.array([p_smr[e] for e in p_imr])
    measure = measure.lower()
    if measure == "kl":
        return max(_kl(p, q), 0.0)
    if measure == "js":
        m = 0.5 * (p + q)
        return max(0.5 * _kl(p, m) + 0.5 * _kl(q, m), 0.0)
    raise ValueError(f"unknown divergence {measure!r}; use 'kl' or 'js'")


def largest_remainder(quotas, total: int) -> np.ndarray:
    """Integer apportionment of ``quotas`` summing to ``total``.

    Floors every quota, then hands the leftover units to the largest
    fractional remainders; ties go to the lower index.
    """
    quotas = np.asarray(quotas, dtype=np.float64)
    counts = np.floor(quotas).astype(np.int64)
    leftover = int(total - counts.sum())
    if leftover < 0:
        raise ValueError("quotas exceed the total")
    remainders = quotas - counts
    # stable sort on -remainder keeps index order among ties
    order = np.argsort(-remainders, kind="stable")
    counts[order[:leftover]] += 1
    return counts


@dataclass(frozen=True)
class MaskSet:
    """Per-sample availability bits, shape ``(N, M)``, plus realised ratios."""

    masks: np.ndarray
    realized_ratios: np.ndarray

    def __post_init__(self):
        masks = np.asarray(self.masks, dtype=np.int8)
        if masks.ndim != 2:
            raise ValueError("masks must be an (N, M) array")
        if np.any((masks != 0) & (masks != 1)):
            raise ValueError("mask entries must be 0 or 1")
        if np.any(masks.sum(axis=1) == 0):
            raise ValueError("every mask needs at least one present modality")
        masks.setflags(write=False)
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "realized_ratios", np.asarray(self.realized_ratios, dtype=np.float64))

    @classmethod
    def from_masks(cls, masks) -> "MaskSet":
        masks = np.asarray(masks, dtype=np.int8)
        return cls(masks, realized_missing_ratios(masks))

    @property
    def N(self) -> int:
        return self.masks.shape[0]

    @property
    def M(self) -> int:
        return self.masks.shape[1]

    def __len__(self):
        return self.N

    def pattern_counts(self) -> dict[tuple[int, ...], int]:
        counts = {e: 0 for e in all_patterns(self.M)}
        for row in self.masks:
            counts[tuple(int(b) for b in row)] += 1
        return counts


def realized_missing_ratios(masks) -> np.ndarray:
    masks = np.asarray(masks)
    return (1 - masks).sum(axis=0) / masks.shape[0]


def pattern_counts_for(r, N: int) -> dict[tuple[int, ...], int]:
    """Deterministic per-pattern sample counts before shuffling.

    Every pattern (all-missing included) gets its target share of ``N``
    apportioned by largest remainder; the all-missing count is then spread
    over the M patterns with exactly one present modality, leftover units
    going to those patterns in index order.
    """
    r = validate_rates(r)
    if N < 1:
        raise ValueError("N must be positive")
    M = r.size
    patterns = all_patterns(M, include_all_missing=True)
    quotas = [N * _pattern_mass(e, r) for e in patterns]
    counts = dict(zip(patterns, largest_remainder(quotas, N).tolist()))
    orphaned = counts.pop(patterns[0])
    share, extra = divmod(orphaned, M)
    singles = [e for e in patterns if sum(e) == 1]  # already in index order
    for k, e in enumerate(singles):
        counts[e] += share + (1 if k < extra else 0)
    return counts


def generate_masks(r, N: int, seed: int) -> MaskSet:
    """Build ``N`` masks whose pattern frequencies follow ``r`` and assign
    them to sample positions with a seeded shuffle."""
    counts = pattern_counts_for(r, N)
    rows = [e for e, c in counts.items() for _ in range(c)]
    masks = np.array(rows, dtype=np.int8).reshape(N, -1)
    perm = np.random.default_rng(seed).permutation(N)
    return MaskSet.from_masks(masks[perm])


def error_bound(r) -> float:
    """Worst-case ``|realised - target|`` when all pattern targets are integral."""
    r = validate_rates(r)
    return math.prod(r) / r.size


def apply_masks(features, masks) -> list[np.ndarray]:
    """Zero the rows of each modality matrix where the modality is missing.

    ``features`` is a list of ``(N, d_m)`` arrays; ``masks`` a ``MaskSet`` or
    an ``(N, M)`` bit array.  Present rows are returned bit-identical.
    """
    bits = masks.masks if isinstance(masks, MaskSet) else np.asarray(masks)
    if bits.shape[1] != len(features):
        raise ValueError(f"mask has {bits.shape[1]} modalities, data has {len(features)}")
    out = []
    for m, x in enumerate(features):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != bits.shape[0]:
            raise ValueError(f"mask count {bits.shape[0]} != sample count {x.shape[0]}")
        out.append(np.where(bits[:, m:m + 1] == 1, x, 0.0))
    return out


def empirical_ratio_stats(r_shared: float, N: int, trials: int, seed: int, M: int = 3):
    """Monte-Carlo mean and variance of the empirical missing ratio.

    Uses unconstrained independent Bernoulli masking (the all-missing
    pattern is allowed), which is the model behind the Binomial claim.
    Returns two length-``M`` arrays.
    """
    if trials < 1:
        raise ValueError("trials must be positive")
    if not 0.0 <= r_shared < 1.0:
        raise ValueError("r_shared must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    missing = np.empty((trials, M))
    chunk = max(1, 2_000_000 // (N * M))
    for lo in range(0, trials, chunk):
        hi = min(trials, lo + chunk)
        dropped = rng.random((hi - lo, N, M)) < r_shared
        missing[lo:hi] = dropped.mean(axis=1)
    var = missing.var(axis=0, ddof=1) if trials > 1 else np.zeros(M)
    return missing.mean(axis=0), var


# --------------------------------------------------------------------------
# JSON Lines persistence
# --------------------------------------------------------------------------


def write_masks(path, masks: MaskSet, ids=None) -> None:
    ids = [str(i) for i in range(masks.N)] if ids is None else list(ids)
    if len(ids) != masks.N:
        raise ValueError("one id per mask is required")
    with open(path, "w", encoding="utf-8") as fh:
        for sid, row in zip(ids, masks.masks):
            fh.write(json.dumps({"id": sid, "mask": [int(b) for b in row]}) + "\n")


def read_masks(path) -> tuple[list[str], MaskSet]:
    ids, rows = [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            ids.append(str(rec["id"]))
            rows.append([int(b) for b in rec["mask"]])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: malformed mask record ({exc})") from exc
    if len({len(r) for r in rows}) > 1:
        raise ValueError(f"{path}: masks have inconsistent modality counts")
    return ids, MaskSet.from_masks(np.array(rows, dtype=np.int8))


def iter_pattern_table(r, r_shared: float):
    """Yield ``(pattern, p_imr, p_smr)`` rows in index order."""
    r = validate_rates(r)
    p_imr = imr_distribution(r)
    p_smr = smr_distribution(r_shared, r.size)
    for e in all_patterns(r.size):
        yield e, p_imr[e], p_smr[e]
