"""Class embedding statistical alignment.

A small per-reference-point prototype memory is filled with class latents
(z_C) during supervised onboarding via stratified reservoir sampling: each
RP keeps an unbiased fixed-size sample of its own stream, never raw
fingerprints. During unsupervised adaptation, the maximum mean discrepancy
between the current batch of class latents and the pooled prototypes is the
alignment loss; with the encoder frozen it carries no gradient into the
classifier, so by default it is computed and reported as a drift diagnostic
while the classifier trains on the pseudo-label cross-entropy. Setting
`align_in_stage1` on the adaptation config instead feeds its gradient into
the encoder update (extension, off by default).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import backend as K
from . import mlvae
from .errors import LifecycleError, ShapeError
from .nn import AdamState, adam_step


@dataclass(frozen=True)
class KernelConfig:
    """RBF-mixture kernel for the MMD estimate (biased V-statistic).

    With `bandwidths=None` the median heuristic is used: the median pairwise
    distance of the pooled sample, scaled by {1/4, 1/2, 1, 2, 4}, computed
    once per alignment call.
    """

    bandwidths: tuple[float, ...] | None = None
    median_scales: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)

    def __post_init__(self):
        if self.bandwidths is not None:
            if len(self.bandwidths) == 0:
                raise ValueError("KernelConfig needs at least one bandwidth")
            if any(b <= 0 for b in self.bandwidths):
                raise ValueError("bandwidths must be positive")

    def resolve(self, pooled: np.ndarray) -> tuple[float, ...]:
        if self.bandwidths is not None:
            return tuple(self.bandwidths)
        return tuple(s * _median_distance(pooled) for s in self.median_scales)


def _median_distance(pooled: np.ndarray) -> float:
    """Median pairwise Euclidean distance; falls back to 1.0 when degenerate."""
    n = pooled.shape[0]
    if n < 2:
        return 1.0
    d2 = K.pairwise_sq_dists(pooled, pooled)
    iu = np.triu_indices(n, k=1)
    med = float(np.median(np.sqrt(d2[iu])))
    return med if med > 0.0 else 1.0


def mmd_loss(current: np.ndarray, prototypes: np.ndarray,
             cfg: KernelConfig | None = None) -> float | None:
    """Squared MMD between the two samples under the RBF mixture.

    Biased V-statistic: mean k(c,c') + mean k(r,r') - 2 mean k(c,r), summed
    over the bandwidth mixture. Returns None (alignment skipped) when either
    sample is empty.
    """
    value, _ = _mmd_value_grad(current, prototypes, cfg or KernelConfig(), need_grad=False)
    return value


def mmd_loss_grad(current: np.ndarray, prototypes: np.ndarray,
                  cfg: KernelConfig | None = None):
    """(MMD^2, gradient w.r.t. the current sample's rows)."""
    return _mmd_value_grad(current, prototypes, cfg or KernelConfig(), need_grad=True)


def _mmd_value_grad(current, prototypes, cfg: KernelConfig, need_grad: bool):
    x = np.ascontiguousarray(np.atleast_2d(np.asarray(current, dtype=np.float64)))
    y = np.ascontiguousarray(np.atleast_2d(np.asarray(prototypes, dtype=np.float64)))
    if x.size == 0 or y.size == 0:
        return None, None
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"latent widths differ: {x.shape[1]} vs {y.shape[1]}")
    n, m = x.shape[0], y.shape[0]
    dxx = K.pairwise_sq_dists(x, x)
    dyy = K.pairwise_sq_dists(y, y)
    dxy = K.pairwise_sq_dists(x, y)
    total = 0.0
    grad = np.zeros_like(x) if need_grad else None
    for gamma in cfg.resolve(np.concatenate([x, y], axis=0)):
        denom = 2.0 * gamma * gamma
        kxx = np.exp(-dxx / denom)
        kyy = np.exp(-dyy / denom)
        kxy = np.exp(-dxy / denom)
        # fsum is correctly rounded regardless of order, so swapping the two
        # samples gives the bitwise-identical value (symmetry is exact)
        total += (math.fsum(kxx.flat) / (n * n) + math.fsum(kyy.flat) / (m * m)
                  - 2.0 * math.fsum(kxy.flat) / (n * m))
        if need_grad:
            # d/dx_p of mean k(x,x'): pairs (p,j) and (i,p) are symmetric
            gxx = (x * kxx.sum(axis=1)[:, None] - kxx @ x) * (-2.0 / (n * n * gamma * gamma))
            gxy = (x * kxy.sum(axis=1)[:, None] - kxy @ y) * (2.0 / (n * m * gamma * gamma))
            grad += gxx + gxy
    return total, grad


class RepresentationMemory:
    """Per-RP prototype store with stratified reservoir sampling.

    The k-th latent seen for an RP survives with probability capacity/k,
    replacing a uniformly random occupant, so each stratum holds an unbiased
    sample of its stream. Stored vectors are copies and never mutated.
    Replacement draws come from streams derived from (seed, rp, k), so the
    result is independent of how inserts interleave across RPs.
    """

    def __init__(self, n_rps: int, dim: int, capacity: int = 1, seed: int = 0):
        if n_rps < 1 or capacity < 1:
            raise ValueError("n_rps and capacity must be >= 1")
        self.n_rps = int(n_rps)
        self.dim = int(dim)
        self.capacity = int(capacity)
        self.seed = int(seed)
        self.slots: list[list[np.ndarray]] = [[] for _ in range(n_rps)]
        self.seen: list[int] = [0] * n_rps

    def insert(self, rp: int, z_c: np.ndarray) -> None:
        if not 0 <= rp < self.n_rps:
            raise IndexError(f"rp index {rp} out of range [0, {self.n_rps})")
        z = np.array(z_c, dtype=np.float64, copy=True)
        if z.shape != (self.dim,):
            raise ShapeError(f"prototype: expected shape ({self.dim},), got {z.shape}")
        z.flags.writeable = False
        self.seen[rp] += 1
        k = self.seen[rp]
        if len(self.slots[rp]) < self.capacity:
            self.slots[rp].append(z)
            return
        j = int(np.random.default_rng((self.seed, rp, k)).integers(0, k))
        if j < self.capacity:
            self.slots[rp][j] = z

    def prototypes(self) -> np.ndarray:
        """Pooled prototype matrix (total x dim), RP-major order."""
        rows = [z for slot in self.slots for z in slot]
        if not rows:
            return np.empty((0, self.dim))
        return np.array(rows)

    def covered_rps(self) -> list[int]:
        return [rp for rp in range(self.n_rps) if self.slots[rp]]

    def total(self) -> int:
        return sum(len(s) for s in self.slots)

    def state(self) -> dict:
        return {
            "n_rps": self.n_rps,
            "dim": self.dim,
            "capacity": self.capacity,
            "seed": self.seed,
            "seen": list(self.seen),
            "counts": [len(s) for s in self.slots],
            "arrays": self.prototypes(),
        }

    @classmethod
    def from_state(cls, meta: dict, arrays: np.ndarray) -> "RepresentationMemory":
        mem = cls(meta["n_rps"], meta["dim"], meta["capacity"], meta["seed"])
        mem.seen = [int(v) for v in meta["seen"]]
        i = 0
        for rp, count in enumerate(meta["counts"]):
            for _ in range(count):
                z = np.array(arrays[i], dtype=np.float64, copy=True)
                z.flags.writeable = False
                mem.slots[rp].append(z)
                i += 1
        return mem


def make_align_fn(memory: RepresentationMemory, cfg: KernelConfig):
    """Alignment hook for mlvae.loss_and_grads: MMD of the batch z_C against
    the pooled prototype set."""
    protos = memory.prototypes()

    def align_fn(z_c: np.ndarray, need_grad: bool):
        value, grad = _mmd_value_grad(z_c, protos, cfg, need_grad)
        if value is None:
            return 0.0, None
        return value, grad

    return align_fn


def align_step(model: mlvae.MlvaeModel, pseudo_x: np.ndarray, pseudo_labels: np.ndarray,
               memory: RepresentationMemory, cfg: KernelConfig,
               optimizer: AdamState, weights: dict[str, float] | None = None) -> dict:
    """One classifier-only update from pseudo-labeled samples.

    The encoder and decoder stay frozen; the MMD alignment term is evaluated
    against the stored prototypes and reported alongside the cross-entropy
    that actually drives the update. Returns a loss report; an empty batch
    is a warned no-op.
    """
    x = np.atleast_2d(np.asarray(pseudo_x, dtype=np.float64))
    if x.size == 0:
        return {"skipped": True, "reason": "empty pseudo-labeled batch"}
    if memory.total() < 1:
        raise LifecycleError("align_step requires at least one stored prototype")
    losses, grads = mlvae.loss_and_grads(
        model, x, eps=None,
        labels=np.asarray(pseudo_labels, dtype=np.int64),
        terms=("c", "align"),
        weights=weights,
        train_encoder=False, train_decoder=False, train_classifier=True,
        align_fn=make_align_fn(memory, cfg),
    )
    adam_step(model.params(blocks=("classifier",)), grads, optimizer)
    losses["skipped"] = False
    return losses
