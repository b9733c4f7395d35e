"""Downstream checks on region embeddings.

Regression tasks (crime, income, bike flow) use Lasso with k-fold
cross-validation; clustering uses k-means scored by NMI and ARI against
reference districts.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .errors import DegenerateTarget, KTooLarge, MissingDistance, ShapeMismatch, UnknownRegion

DEFAULT_LAMBDAS = tuple(np.logspace(-4, 2, 50))


# ---------------------------------------------------------------- regression


def regression_metrics(y, y_hat) -> Tuple[float, float, float]:
    """``(mae, rmse, r2)``; raises :class:`DegenerateTarget` when ``y`` is constant."""
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape or len(y) < 2:
        raise ShapeMismatch(f"need two equal-length vectors of length >= 2, got {y.shape}, {y_hat.shape}")
    resid = y - y_hat
    mae = float(np.mean(np.abs(resid)))
    rmse = float(np.sqrt(np.mean(resid ** 2)))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise DegenerateTarget("target is constant; R^2 is undefined")
    return mae, rmse, 1.0 - float(np.sum(resid ** 2)) / ss_tot


@dataclass
class LassoFit:
    coef: np.ndarray
    intercept: float
    lam: float

    def predict(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.coef + self.intercept


class _Standardizer:
    def __init__(self, X):
        self.mean = X.mean(axis=0)
        sd = X.std(axis=0)
        self.scale = np.where(sd > 0, sd, 1.0)
        self.live = sd > 0

    def __call__(self, X):
        return (X - self.mean) / self.scale * self.live


def _lasso_path(X, y, lambdas, tol=1e-10, max_sweeps=2000) -> List[LassoFit]:
    """Fits for each ``lam`` (any order), warm-started along decreasing ``lam``.

    The objective is ``(1 / 2n) |y - b0 - X b|^2 + lam |b|_1`` with ``X``
    standardised internally; coefficients are returned in original units.
    """
    n = X.shape[0]
    std = _Standardizer(X)
    Xs = std(X)
    y_mean = float(y.mean())
    G = Xs.T @ Xs / n
    c = Xs.T @ (y - y_mean) / n
    beta = np.zeros(X.shape[1])
    fits: Dict[int, LassoFit] = {}
    for idx in sorted(range(len(lambdas)), key=lambda i: -lambdas[i]):
        _kernels.lasso_gram_cd(G, c, float(lambdas[idx]), beta, tol, max_sweeps)
        coef = beta * std.live / std.scale
        fits[idx] = LassoFit(coef.copy(), y_mean - float(std.mean @ coef), float(lambdas[idx]))
    return [fits[i] for i in range(len(lambdas))]


def lasso_fit(X, y, lam: float) -> LassoFit:
    X, y = _check_xy(X, y)
    return _lasso_path(X, y, [lam])[0]


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] != len(y):
        raise ShapeMismatch(f"X {X.shape} does not match y {y.shape}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("features and targets must be finite")
    return X, y


def fold_assignment(n: int, folds: int, seed: int) -> np.ndarray:
    """Seeded shuffle, then round-robin into ``folds`` groups."""
    order = np.random.default_rng(seed).permutation(n)
    out = np.empty(n, dtype=np.int64)
    out[order] = np.arange(n) % folds
    return out


@dataclass
class RegressionReport:
    task: str
    mae: float
    rmse: float
    r2: float
    folds: np.ndarray
    lam: float
    degenerate: bool = False
    predictions: Optional[np.ndarray] = None
    cv_errors: Optional[np.ndarray] = None

    def as_dict(self) -> dict:
        return {"task": self.task, "mae": self.mae, "rmse": self.rmse, "r2": self.r2,
                "lambda": self.lam, "degenerate": self.degenerate}


def lasso_cv_fit(X, y, folds: int = 5, lambda_grid: Sequence[float] = DEFAULT_LAMBDAS,
                 seed: int = 0, task: str = "regression") -> RegressionReport:
    """Pick ``lambda`` by mean held-out MSE, then score the out-of-fold predictions."""
    X, y = _check_xy(X, y)
    n = len(y)
    if folds < 2 or n < folds:
        raise ShapeMismatch(f"need 2 <= folds <= N, got folds={folds}, N={n}")
    lambdas = list(lambda_grid)
    assign = fold_assignment(n, folds, seed)
    preds = np.zeros((len(lambdas), n))
    for f in range(folds):
        test = assign == f
        for li, fit in enumerate(_lasso_path(X[~test], y[~test], lambdas)):
            preds[li, test] = fit.predict(X[test])
    cv_errors = np.array([
        np.mean([np.mean((preds[li, assign == f] - y[assign == f]) ** 2) for f in range(folds)])
        for li in range(len(lambdas))
    ])
    best = int(np.argmin(cv_errors))  # ties go to the first (largest-grid-order) entry
    y_hat = preds[best]
    try:
        mae, rmse, r2 = regression_metrics(y, y_hat)
        degenerate = False
    except DegenerateTarget:
        resid = y - y_hat
        mae, rmse, r2 = float(np.mean(np.abs(resid))), float(np.sqrt(np.mean(resid ** 2))), 0.0
        degenerate = True
    return RegressionReport(task, mae, rmse, r2, assign, float(lambdas[best]), degenerate,
                            y_hat, cv_errors)


def flow_features(Z, distances, flows) -> Tuple[np.ndarray, np.ndarray]:
    """Rows ``[z_i, z_j, z_i * z_j, d_ij]`` and targets for ``(i, j, count)`` triples."""
    Z = np.asarray(Z, dtype=np.float64)
    D = np.asarray(distances, dtype=np.float64)
    n = Z.shape[0]
    if D.shape != (n, n):
        raise ShapeMismatch(f"distance matrix {D.shape} does not match {n} regions")
    pairs = np.array([(int(i), int(j)) for i, j, _ in flows], dtype=np.int64).reshape(-1, 2)
    y = np.array([float(c) for _, _, c in flows])
    if len(pairs) and (pairs.min() < 0 or pairs.max() >= n):
        raise UnknownRegion("flow references a region outside the embedding")
    i, j = pairs[:, 0], pairs[:, 1]
    d = D[i, j]
    if not np.all(np.isfinite(d)):
        k = int(np.flatnonzero(~np.isfinite(d))[0])
        raise MissingDistance(f"no distance for pair ({i[k]}, {j[k]})")
    X = np.hstack([Z[i], Z[j], Z[i] * Z[j], d[:, None]])
    return X, y


def flow_regression(Z, distances, flows, folds: int = 5, seed: int = 0,
                    lambda_grid: Sequence[float] = DEFAULT_LAMBDAS) -> RegressionReport:
    X, y = flow_features(Z, distances, flows)
    return lasso_cv_fit(X, y, folds, lambda_grid, seed, task="flow")


# ---------------------------------------------------------------- clustering


@dataclass
class KMeansRun:
    labels: np.ndarray
    centers: np.ndarray
    objective: float
    history: List[float]  # within-cluster sum of squares after each Lloyd iteration


@dataclass
class ClusteringReport:
    k: int
    labels: np.ndarray
    objective: float
    restarts: int
    runs: List[KMeansRun] = field(default_factory=list)
    nmi: Optional[float] = None
    ari: Optional[float] = None

    def as_dict(self) -> dict:
        return {"k": self.k, "objective": self.objective, "restarts": self.restarts,
                "nmi": self.nmi, "ari": self.ari}


def _sq_dists(X, C):
    # the direct form, so assignment and objective agree to the last bit
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1)


def _kmeanspp(X, k, rng):
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # every point already coincides with a centre
            nxt = int(rng.choice(np.setdiff1d(np.arange(n), chosen)))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(1))
    return X[chosen].copy()


def _lloyd(X, centers, max_iter, tol) -> KMeansRun:
    history = []
    labels = np.argmin(_sq_dists(X, centers), axis=1)
    for _ in range(max_iter):
        for c in range(len(centers)):
            members = labels == c
            if members.any():  # an empty cluster keeps its centre
                centers[c] = X[members].mean(0)
        dist = _sq_dists(X, centers)
        obj = float(((X - centers[labels]) ** 2).sum())
        history.append(obj)
        new = np.argmin(dist, axis=1)
        # keep the current assignment on ties so the objective cannot rise
        keep = dist[np.arange(len(X)), labels] <= dist[np.arange(len(X)), new]
        new = np.where(keep, labels, new)
        if np.array_equal(new, labels) or (len(history) > 1 and history[-2] - obj <= tol * obj):
            labels = new
            break
        labels = new
    obj = float(((X - centers[labels]) ** 2).sum())
    if obj < history[-1]:
        history.append(obj)
    return KMeansRun(labels, centers, history[-1], history)


def _canonical(labels) -> np.ndarray:
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(np.argsort(first))
    remap = dict(zip(np.unique(labels), order))
    return np.array([remap[x] for x in labels], dtype=np.int64)


def kmeans(Z, k: int, restarts: int = 10, seed: int = 0, max_iter: int = 300,
           tol: float = 0.0) -> ClusteringReport:
    """Lloyd iterations from k-means++ seeds; the best of ``restarts`` runs by objective."""
    X = np.asarray(Z, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise KTooLarge(f"k={k} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    runs = [_lloyd(X, _kmeanspp(X, k, rng), max_iter, tol) for _ in range(restarts)]
    best = min(runs, key=lambda r: r.objective)
    return ClusteringReport(k, _canonical(best.labels), best.objective, restarts, runs)


def _contingency(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeMismatch(f"label vectors differ in shape: {a.shape}, {b.shape}")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1 if len(ai) else 0, bi.max() + 1 if len(bi) else 0))
    np.add.at(table, (ai, bi), 1.0)
    return table


def _entropy(counts) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi(labels_a, labels_b) -> float:
    """Mutual information over the arithmetic mean of the two entropies (0 if both are 0)."""
    table = _contingency(labels_a, labels_b)
    n = table.sum()
    ha, hb = _entropy(table.sum(1)), _entropy(table.sum(0))
    denom = 0.5 * (ha + hb)
    if denom <= 0:
        return 0.0
    nz = table > 0
    outer = np.outer(table.sum(1), table.sum(0))
    mi = float(np.sum(table[nz] / n * np.log(table[nz] * n / outer[nz])))
    return float(min(max(mi / denom, 0.0), 1.0))


def ari(labels_a, labels_b) -> float:
    """Adjusted Rand index under the permutation model (1 when the index is trivially maximal)."""
    table = _contingency(labels_a, labels_b)
    n = table.sum()

    def pairs(x):
        return float(np.sum(x * (x - 1) / 2.0))

    index = pairs(table)
    sa, sb = pairs(table.sum(1)), pairs(table.sum(0))
    total = n * (n - 1) / 2.0
    expected = sa * sb / total if total else 0.0
    top = 0.5 * (sa + sb)
    if top == expected:
        return 1.0
    return float((index - expected) / (top - expected))


def evaluate_clustering(Z, truth, k: Optional[int] = None, restarts: int = 10,
                        seed: int = 0) -> ClusteringReport:
    truth = np.asarray(truth)
    k = len(np.unique(truth)) if k is None else k
    report = kmeans(Z, k, restarts, seed)
    report.nmi = nmi(truth, report.labels)
    report.ari = ari(truth, report.labels)
    return report


# ---------------------------------------------------------------- inspection


def nearest_neighbors(Z, region_id: int, n: int) -> List[int]:
    """The ``n`` closest other regions by Euclidean distance, ties broken by id."""
    Z = np.asarray(Z, dtype=np.float64)
    N = Z.shape[0]
    if not 0 <= region_id < N:
        raise UnknownRegion(f"region {region_id} not in 0..{N - 1}")
    if not 0 <= n < N:
        raise KTooLarge(f"n={n} must be below the region count {N}")
    d = np.sqrt(((Z - Z[region_id]) ** 2).sum(1))
    others = [j for j in range(N) if j != region_id]
    others.sort(key=lambda j: (d[j], j))
    return others[:n]


# ---------------------------------------------------------------- batteries


@dataclass
class EvalData:
    """Ground truth for the downstream battery; every field is optional."""

    crime: Optional[Dict[int, float]] = None
    income: Optional[Dict[int, float]] = None
    flows: Optional[List[Tuple[int, int, float]]] = None
    distances: Optional[np.ndarray] = None
    districts: Optional[np.ndarray] = None

    @classmethod
    def from_tables(cls, tables) -> "EvalData":
        n = tables.num_regions
        D = None
        if tables.distances:
            D = np.full((n, n), np.nan)
            for i, j, d in tables.distances:
                D[i, j] = d
        districts = None
        if tables.districts:
            names = {i: name for i, name in tables.districts}
            if len(names) != n:
                raise ShapeMismatch("district labels must cover every region")
            districts = np.array([names[i] for i in range(n)])
        return cls(
            crime=dict(tables.crime) or None,
            income=dict(tables.income) or None,
            flows=list(tables.bike_flows) or None,
            distances=D,
            districts=districts,
        )


@dataclass
class EvaluationSummary:
    crime: Optional[RegressionReport] = None
    income: Optional[RegressionReport] = None
    flow: Optional[RegressionReport] = None
    clustering: Optional[ClusteringReport] = None

    def as_dict(self) -> dict:
        return {name: (None if rep is None else rep.as_dict())
                for name, rep in (("crime", self.crime), ("income", self.income),
                                  ("flow", self.flow), ("clustering", self.clustering))}


def _region_regression(Z, values: Dict[int, float], task, folds, seed):
    ids = sorted(values)
    return lasso_cv_fit(Z[ids], [values[i] for i in ids], folds, seed=seed, task=task)


def evaluate_embeddings(Z, data: EvalData, folds: int = 5, seed: int = 0,
                        k: Optional[int] = None, restarts: int = 10) -> EvaluationSummary:
    Z = np.asarray(Z, dtype=np.float64)
    out = EvaluationSummary()
    if data.crime:
        out.crime = _region_regression(Z, data.crime, "crime", folds, seed)
    if data.income:
        out.income = _region_regression(Z, data.income, "income", folds, seed)
    if data.flows and data.distances is not None:
        out.flow = flow_regression(Z, data.distances, data.flows, folds, seed)
    if data.districts is not None:
        out.clustering = evaluate_clustering(Z, data.districts, k, restarts, seed)
    return out


ABLATION_COLUMNS = ("metapath_set", "crime_r2", "income_r2", "flow_r2", "nmi")


@dataclass
class AblationRow:
    metapath_set: str
    mode: str  # "single" or "cumulative"
    crime_r2: Optional[float]
    income_r2: Optional[float]
    flow_r2: Optional[float]
    nmi: Optional[float]
    Z: np.ndarray = field(repr=False, default=None)


def ablation_configurations(names: Sequence[str]) -> List[Tuple[str, Tuple[str, ...]]]:
    """Each meta-path alone, then growing prefixes of ``names`` in order."""
    singles = [("single", (n,)) for n in names]
    cumulative = [("cumulative", tuple(names[:i + 1])) for i in range(len(names))]
    return singles + cumulative


def metapath_ablation(g, adjacencies, targets, data: EvalData, train_cfg, model_cfg=None,
                      seed: Optional[int] = None, folds: int = 5,
                      k: Optional[int] = None) -> List[AblationRow]:
    """Retrain on each meta-path alone and on cumulative prefixes; score every run."""
    from .training import train

    by_name = {a.metapath.name: a for a in adjacencies}
    seed = train_cfg.seed if seed is None else seed
    cache: Dict[Tuple[str, ...], np.ndarray] = {}
    rows = []
    for mode, subset in ablation_configurations(list(by_name)):
        if subset not in cache:
            res = train(g, [by_name[n] for n in subset], targets, train_cfg, model_cfg, seed=seed)
            cache[subset] = res.Z
        Z = cache[subset]
        summary = evaluate_embeddings(Z, data, folds, seed, k)
        rows.append(AblationRow(
            "+".join(subset), mode,
            None if summary.crime is None else summary.crime.r2,
            None if summary.income is None else summary.income.r2,
            None if summary.flow is None else summary.flow.r2,
            None if summary.clustering is None else summary.clustering.nmi,
            Z,
        ))
    return rows


def _cell(x) -> str:
    return "" if x is None else repr(float(x))


def write_ablation_csv(rows: Sequence[AblationRow], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([r.metapath_set, _cell(r.crime_r2), _cell(r.income_r2),
                        _cell(r.flow_r2), _cell(r.nmi)])


def write_regression_csv(report: RegressionReport, y, path) -> None:
    """Out-of-fold predictions: ``index, fold, y, y_hat``."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "fold", "y", "y_hat"])
        for i, (f, yt, yp) in enumerate(zip(report.folds, y, report.predictions)):
            w.writerow([i, int(f), repr(float(yt)), repr(float(yp))])


def write_clusters_csv(labels, coords, path) -> None:
    """Plot-ready map data: ``region_id, cluster`` plus coordinates when known."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if coords is None:
            w.writerow(["region_id", "cluster"])
            for i, c in enumerate(labels):
                w.writerow([i, int(c)])
        else:
            w.writerow(["region_id", "cluster", "x", "y"])
            for i, (c, xy) in enumerate(zip(labels, coords)):
                w.writerow([i, int(c), repr(float(xy[0])), repr(float(xy[1]))])
