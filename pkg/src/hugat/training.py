"""Multi-task objectives and the full-batch training loop."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .attributes import RegionTargets
from .autodiff import Tensor
from .errors import ConfigError, DivergenceDetected, NonFiniteValue
from .graph import HeterogeneousUrbanGraph
from .model import HanParameters, ModelConfig, _mask_of, forward_detailed, init_parameters

KL_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.3  # check-in
    beta: float = 0.6  # land use
    gamma: float = 0.1  # mobility

    def __post_init__(self):
        w = (self.alpha, self.beta, self.gamma)
        if any(x < 0 or not math.isfinite(x) for x in w):
            raise ConfigError(f"loss weights must be non-negative, got {w}")
        if abs(sum(w) - 1.0) > 1e-12:
            raise ConfigError(f"loss weights must sum to 1, got {sum(w)!r}")

    @classmethod
    def mobility_only(cls) -> "LossWeights":
        return cls(0.0, 0.0, 1.0)


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 1000
    lr: float = 0.001
    seed: int = 0
    replicates: int = 5
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")

    def replicate_seeds(self) -> List[int]:
        return [self.seed + r for r in range(self.replicates)]


# ---------------------------------------------------------------- objectives


def estimated_od(Z):
    """``(p_org|dst, p_dst|org)`` implied by inner products of embeddings.

    ``p_org|dst[i, j]`` is a softmax over origins ``i`` (columns sum to 1);
    ``p_dst|org[i, j]`` is a softmax over destinations ``j`` (rows sum to 1).
    """
    Z = ad.as_tensor(Z)
    logits = ad.matmul(Z, ad.transpose(Z))
    return ad.softmax(logits, axis=0), ad.softmax(logits, axis=1)


def _kl_sum(p: np.ndarray, log_q: Tensor) -> Tensor:
    """``sum p * (log p - log q)`` over all entries, with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    support = p > 0
    entropy_term = float(np.sum(p[support] * np.log(p[support])))
    weighted = ad.sum(ad.mul(Tensor(p), ad.clip_min(log_q, math.log(KL_FLOOR))))
    return ad.add(ad.scale(weighted, -1.0), entropy_term)


def mobility_loss(p_org_given_dst, p_dst_given_org, p_hat_org, p_hat_dst) -> Tensor:
    """KL between observed and estimated trip conditionals, summed over every slice.

    ``p_hat_*`` are probability tensors; they are clamped at ``1e-12`` before the log.
    """
    log_org = ad.log(ad.clip_min(ad.as_tensor(p_hat_org), KL_FLOOR))
    log_dst = ad.log(ad.clip_min(ad.as_tensor(p_hat_dst), KL_FLOOR))
    return ad.add(_kl_sum(p_org_given_dst, log_org), _kl_sum(p_dst_given_org, log_dst))


def mobility_loss_from_embeddings(Z, targets: RegionTargets) -> Tensor:
    # log-softmax avoids exp underflow; identical to log(clamp(softmax)) above the floor
    Z = ad.as_tensor(Z)
    logits = ad.matmul(Z, ad.transpose(Z))
    return ad.add(
        _kl_sum(targets.trips.p_org_given_dst, ad.log_softmax(logits, axis=0)),
        _kl_sum(targets.trips.p_dst_given_org, ad.log_softmax(logits, axis=1)),
    )


def embedding_hellinger(Z) -> Tensor:
    """Pairwise Hellinger distance between ``softmax(z_i)`` rows (zero diagonal).

    Uses ``H(p, q)^2 = 1 - sum sqrt(p * q)`` for probability vectors.
    """
    Z = ad.as_tensor(Z)
    n = Z.shape[0]
    root = ad.sqrt(ad.softmax(Z, axis=1))
    affinity = ad.matmul(root, ad.transpose(root))
    off = 1.0 - np.eye(n)
    # the diagonal is pinned to 1 under the root so its derivative stays finite
    inner = ad.add(ad.mul(ad.clip_min(ad.sub(1.0, affinity), 0.0), off), np.eye(n))
    return ad.mul(ad.sqrt(inner), off)


def similarity_loss(Z, S) -> Tensor:
    """``sum_{i != j} (S_ij - S_hat_ij)^2`` with ``S_hat`` from :func:`embedding_hellinger`."""
    S = np.asarray(S, dtype=np.float64)
    off = 1.0 - np.eye(S.shape[0])
    diff = ad.mul(ad.sub(S, embedding_hellinger(Z)), off)
    return ad.sum(ad.square(diff))


def checkin_loss(Z, S_chk) -> Tensor:
    return similarity_loss(Z, S_chk)


def landuse_loss(Z, S_land) -> Tensor:
    return similarity_loss(Z, S_land)


@dataclass
class LossBreakdown:
    chk: Tensor
    land: Tensor
    mob: Tensor
    total: Tensor

    def values(self):
        return (self.chk.item(), self.land.item(), self.mob.item(), self.total.item())


def combine(l_chk, l_land, l_mob, w: LossWeights = LossWeights()) -> Tensor:
    return ad.add(ad.add(ad.scale(l_chk, w.alpha), ad.scale(l_land, w.beta)),
                  ad.scale(l_mob, w.gamma))


def loss_breakdown(Z, targets: RegionTargets, w: LossWeights = LossWeights()) -> LossBreakdown:
    l_chk = checkin_loss(Z, targets.s_chk)
    l_land = landuse_loss(Z, targets.s_land)
    l_mob = mobility_loss_from_embeddings(Z, targets)
    return LossBreakdown(l_chk, l_land, l_mob, combine(l_chk, l_land, l_mob, w))


def total_loss(Z, targets: RegionTargets, w: LossWeights = LossWeights()) -> Tensor:
    return loss_breakdown(Z, targets, w).total


# ---------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    chk: float
    land: float
    mob: float
    total: float


@dataclass
class TrainingResult:
    params: HanParameters
    Z: np.ndarray
    history: List[EpochRecord]
    betas: List[np.ndarray]
    seed: int

    def write_history(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "L_chk", "L_land", "L_mob", "total"])
            for r in self.history:
                w.writerow([r.epoch, repr(r.chk), repr(r.land), repr(r.mob), repr(r.total)])

    def write_betas(self, path, metapath_names: Sequence[str]) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch"] + list(metapath_names))
            for epoch, beta in enumerate(self.betas, start=1):
                w.writerow([epoch] + [repr(float(b)) for b in beta])


def train(
    g: HeterogeneousUrbanGraph,
    adjacencies: Sequence,
    targets: RegionTargets,
    cfg: TrainingConfig = TrainingConfig(),
    model_cfg: Optional[ModelConfig] = None,
    seed: Optional[int] = None,
    callback=None,
) -> TrainingResult:
    """Full-batch Adam on the weighted three-term loss for ``cfg.epochs`` epochs.

    ``history[e]`` holds the losses evaluated at the parameters before the
    ``e + 1``-th update; the returned ``Z`` is computed after the last update.
    """
    if model_cfg is None:
        model_cfg = ModelConfig(feature_dim=g.feature_dim)
    seed = cfg.seed if seed is None else seed
    names = [a.metapath.name for a in adjacencies]
    params = init_parameters(model_cfg, names, seed)
    named = params.named()
    masks = [_mask_of(a) for a in adjacencies]
    state = ad.AdamState(lr=cfg.lr)
    history: List[EpochRecord] = []
    betas: List[np.ndarray] = []
    for epoch in range(1, cfg.epochs + 1):
        try:
            out = forward_detailed(g, adjacencies, params, masks)
            parts = loss_breakdown(out.Z, targets, cfg.weights)
        except NonFiniteValue as exc:
            raise DivergenceDetected(f"epoch {epoch}: {exc}") from exc
        record = EpochRecord(epoch, *parts.values())
        if not math.isfinite(record.total):
            raise DivergenceDetected(f"epoch {epoch}: loss is {record.total}")
        history.append(record)
        betas.append(out.beta.data.copy())
        for p in named.values():
            p.grad = None
        ad.backward(parts.total)
        ad.adam_step(named, {k: p.grad for k, p in named.items() if p.grad is not None}, state)
        if callback is not None:
            callback(record)
    Z = forward_detailed(g, adjacencies, params, masks).Z.data.copy()
    if not np.all(np.isfinite(Z)):
        raise DivergenceDetected("final embeddings are non-finite")
    return TrainingResult(params, Z, history, betas, seed)


def train_replicates(g, adjacencies, targets, cfg: TrainingConfig = TrainingConfig(),
                     model_cfg: Optional[ModelConfig] = None) -> List[TrainingResult]:
    return [train(g, adjacencies, targets, cfg, model_cfg, seed=s) for s in cfg.replicate_seeds()]


def write_embeddings(Z, path) -> None:
    Z = np.asarray(Z)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region_id"] + [f"z_{k}" for k in range(Z.shape[1])])
        for i, row in enumerate(Z):
            w.writerow([i] + [repr(float(x)) for x in row])
