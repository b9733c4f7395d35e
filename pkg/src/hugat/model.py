"""Two-level attention region encoder.

Region features are projected per node type, attended over each meta-path's
neighbours with ``K`` heads, fused across meta-paths with semantic attention
and mapped to the output dimension by a dense layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EmptyNeighborSet, ShapeMismatch
from .graph import HeterogeneousUrbanGraph, NodeType
from .metapath import MetaPathAdjacency

# meta-paths sparser than this use the edge-list attention kernels
SPARSE_DENSITY = 0.25


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 250
    heads: int = 10
    # 128 hidden features over 10 heads is not integral; 13 per head gives 130
    head_dim: int = 13
    semantic_dim: int = 128
    out_dim: int = 32
    slope: float = 0.2

    @property
    def hidden_dim(self) -> int:
        return self.heads * self.head_dim


@dataclass
class HanParameters:
    proj: Dict[NodeType, Tensor]
    node_attn: Dict[str, Tensor]  # meta-path name -> (K, 2 * head_dim), one row per head
    sem_W: Tensor
    sem_b: Tensor
    sem_q: Tensor
    dense_W: Tensor
    dense_b: Tensor
    heads: int
    head_dim: int
    slope: float = 0.2

    @property
    def metapath_names(self) -> List[str]:
        return list(self.node_attn)

    def named(self) -> Dict[str, Tensor]:
        out = {f"proj.{t.value}": p for t, p in self.proj.items()}
        out.update({f"attn.{k}": a for k, a in self.node_attn.items()})
        out.update({
            "sem.W": self.sem_W, "sem.b": self.sem_b, "sem.q": self.sem_q,
            "dense.W": self.dense_W, "dense.b": self.dense_b,
        })
        return out

    def save(self, path) -> None:
        blob = {
            "heads": self.heads,
            "head_dim": self.head_dim,
            "slope": self.slope,
            "metapaths": self.metapath_names,
            "params": {
                name: {"shape": list(t.shape), "values": [repr(float(x)) for x in t.data.ravel()]}
                for name, t in self.named().items()
            },
        }
        Path(path).write_text(json.dumps(blob, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "HanParameters":
        blob = json.loads(Path(path).read_text(encoding="utf-8"))

        def t(name):
            entry = blob["params"][name]
            data = np.array([float(x) for x in entry["values"]]).reshape(entry["shape"])
            return Tensor(data, requires_grad=True, name=name)

        return cls(
            proj={nt: t(f"proj.{nt.value}") for nt in NodeType},
            node_attn={mp: t(f"attn.{mp}") for mp in blob["metapaths"]},
            sem_W=t("sem.W"), sem_b=t("sem.b"), sem_q=t("sem.q"),
            dense_W=t("dense.W"), dense_b=t("dense.b"),
            heads=blob["heads"], head_dim=blob["head_dim"], slope=blob["slope"],
        )


def _glorot(rng, shape, fan_in, fan_out, name):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def init_parameters(cfg: ModelConfig, metapath_names: Sequence[str], seed: int) -> HanParameters:
    rng = np.random.default_rng(seed)
    m, K, dh = cfg.feature_dim, cfg.heads, cfg.head_dim
    D, ds = cfg.hidden_dim, cfg.semantic_dim
    proj = {t: _glorot(rng, (m, dh), m, dh, f"proj.{t.value}") for t in NodeType}
    attn = {name: _glorot(rng, (K, 2 * dh), 2 * dh, 1, f"attn.{name}") for name in metapath_names}
    return HanParameters(
        proj=proj,
        node_attn=attn,
        sem_W=_glorot(rng, (D, ds), D, ds, "sem.W"),
        sem_b=Tensor(np.zeros(ds), requires_grad=True, name="sem.b"),
        sem_q=_glorot(rng, (ds,), ds, 1, "sem.q"),
        dense_W=_glorot(rng, (D, cfg.out_dim), D, cfg.out_dim, "dense.W"),
        dense_b=Tensor(np.zeros(cfg.out_dim), requires_grad=True, name="dense.b"),
        heads=K,
        head_dim=dh,
        slope=cfg.slope,
    )


def project_features(g: HeterogeneousUrbanGraph, params: HanParameters) -> Dict[NodeType, Tensor]:
    out = {}
    for t, feats in g.features.items():
        M = params.proj[t]
        if feats.shape[1] != M.shape[0]:
            raise ShapeMismatch(f"{t.value}: features have dim {feats.shape[1]}, "
                                f"projection expects {M.shape[0]}")
        out[t] = ad.matmul(Tensor(feats), M)
    return out


def _mask_of(adjacency) -> np.ndarray:
    mask = adjacency.mask() if isinstance(adjacency, MetaPathAdjacency) else np.asarray(adjacency, bool)
    if not mask.any(axis=1).all():
        raise EmptyNeighborSet("every region needs at least one meta-path neighbour")
    return mask


def attention_all_heads(h: Tensor, mask: np.ndarray, attn: Tensor, slope: float = 0.2) -> Tensor:
    """``(K, N, N)`` attention weights, zero outside the neighbour mask."""
    dh = h.shape[1]
    if attn.shape[1] != 2 * dh:
        raise ShapeMismatch(f"attention vectors have dim {attn.shape[1]}, need {2 * dh}")
    s_src, s_dst = _head_scores(h, attn)
    return ad.attention_softmax(s_src, s_dst, mask, slope)


def _head_scores(h: Tensor, attn: Tensor) -> Tuple[Tensor, Tensor]:
    """Per-head source and target halves of ``a . [h_i || h_j]``, each ``(K, N)``."""
    dh = h.shape[1]
    a_src = ad.transpose(ad.getitem(attn, (slice(None), slice(0, dh))))  # (dh, K)
    a_dst = ad.transpose(ad.getitem(attn, (slice(None), slice(dh, 2 * dh))))
    return ad.transpose(ad.matmul(h, a_src)), ad.transpose(ad.matmul(h, a_dst))


def node_level_attention(h: Tensor, adjacency, params: HanParameters, head: int,
                         metapath: Optional[str] = None) -> Tensor:
    """Attention weights ``alpha[i, j]`` of one head; rows sum to 1 over ``N_i``."""
    name = metapath or adjacency.metapath.name
    alpha = attention_all_heads(h, _mask_of(adjacency), params.node_attn[name], params.slope)
    return ad.getitem(alpha, head)


def metapath_aggregate(h: Tensor, alphas, heads: int) -> Tensor:
    """Concatenate ``elu(sum_j alpha_ij h_j)`` over heads into ``(N, K * dh)``."""
    if isinstance(alphas, (list, tuple)):
        alphas = ad.concat([ad.reshape(a, (1,) + a.shape) for a in alphas], axis=0)
    if alphas.shape[0] != heads or alphas.ndim != 3:
        raise ShapeMismatch(f"expected {heads} heads of attention, got {alphas.shape}")
    n, dh = h.shape
    # one (K*N, N) @ (N, dh) product instead of K batched ones
    flat = ad.matmul(ad.reshape(alphas, (heads * n, n)), h)
    agg = ad.elu(ad.reshape(flat, (heads, n, dh)))
    return ad.reshape(ad.transpose(agg, (1, 0, 2)), (n, heads * dh))


def semantic_attention(Ys: Sequence[Tensor], params: HanParameters) -> Tuple[Tensor, Tensor]:
    """Meta-path weights ``beta`` (softmax of mean ``q . tanh(W y + b)``) and the fused ``Y``."""
    shapes = {Y.shape for Y in Ys}
    if len(shapes) != 1:
        raise ShapeMismatch(f"meta-path embeddings disagree in shape: {sorted(shapes)}")
    n, D = Ys[0].shape
    P = len(Ys)
    stacked = ad.concat([ad.reshape(Y, (1, n, D)) for Y in Ys], axis=0)  # (P, N, D)
    hidden = ad.tanh(ad.add(ad.matmul(stacked, params.sem_W), params.sem_b))
    q = ad.reshape(params.sem_q, (-1, 1))
    w = ad.mean(ad.reshape(ad.matmul(hidden, q), (P, n)), axis=1)
    beta = ad.softmax(w, axis=0)
    fused = ad.sum(ad.mul(ad.reshape(beta, (P, 1, 1)), stacked), axis=0)
    return beta, fused


@dataclass
class ForwardResult:
    Z: Tensor
    beta: Tensor
    metapath_embeddings: List[Tensor] = field(default_factory=list)


def _sparse_metapath_embedding(h: Tensor, adj: MetaPathAdjacency, attn: Tensor,
                               params: HanParameters) -> Tensor:
    rows, cols, indptr = adj.csr
    src, dst = _head_scores(h, attn)
    alpha = ad.segment_attention(src, dst, rows, cols, indptr, params.slope)
    agg = ad.elu(ad.segment_aggregate(alpha, h, rows, cols, indptr))  # (K, N, dh)
    n, dh = h.shape
    return ad.reshape(ad.transpose(agg, (1, 0, 2)), (n, params.heads * dh))


def forward_detailed(g: HeterogeneousUrbanGraph, adjacencies: Sequence, params: HanParameters,
                     masks: Optional[Sequence[np.ndarray]] = None,
                     sparse: bool = True) -> ForwardResult:
    """Forward pass keeping the meta-path weights and per-meta-path embeddings.

    ``sparse`` lets sparse meta-paths use the edge-list kernels; both routes
    compute the same function.
    """
    feats = g.features[NodeType.REGION]
    M = params.proj[NodeType.REGION]
    if feats.shape[1] != M.shape[0]:
        raise ShapeMismatch(f"region features dim {feats.shape[1]} vs projection {M.shape[0]}")
    h = ad.matmul(Tensor(feats), M)
    if masks is None:
        masks = [_mask_of(a) for a in adjacencies]
    Ys = []
    for adj, mask in zip(adjacencies, masks):
        attn = params.node_attn[adj.metapath.name]
        if sparse and isinstance(adj, MetaPathAdjacency) and adj.density < SPARSE_DENSITY:
            Ys.append(_sparse_metapath_embedding(h, adj, attn, params))
        else:
            alpha = attention_all_heads(h, mask, attn, params.slope)
            Ys.append(metapath_aggregate(h, alpha, params.heads))
    beta, Y = semantic_attention(Ys, params)
    Z = ad.add(ad.matmul(Y, params.dense_W), params.dense_b)
    return ForwardResult(Z, beta, Ys)


def forward(g: HeterogeneousUrbanGraph, adjacencies: Sequence, params: HanParameters,
            masks: Optional[Sequence[np.ndarray]] = None, sparse: bool = True) -> Tensor:
    return forward_detailed(g, adjacencies, params, masks, sparse).Z
