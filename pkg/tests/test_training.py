import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hugat import autodiff as ad
from hugat import training
from hugat.attributes import hellinger_matrix
from hugat.errors import ConfigError, DivergenceDetected, NonFiniteValue
from hugat.training import (
    LossWeights, TrainingConfig, combine, embedding_hellinger, estimated_od, loss_breakdown,
    mobility_loss, mobility_loss_from_embeddings, similarity_loss, total_loss, train,
    write_embeddings,
)

from conftest import random_distributions


def kl_columns_and_rows(p_org, p_dst, q_org, q_dst):
    """Plain-numpy KL sums with 0 log 0 = 0."""
    def kl(p, q):
        nz = p > 0
        return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))
    return kl(p_org, q_org) + kl(p_dst, q_dst)


def softmax(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def test_estimated_od_normalises(rng):
    Z = rng.normal(size=(7, 4))
    p_org, p_dst = estimated_od(Z)
    np.testing.assert_allclose(p_org.data.sum(axis=0), 1.0, atol=1e-12)
    np.testing.assert_allclose(p_dst.data.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(p_dst.data, softmax(Z @ Z.T, 1), atol=1e-14)


def test_mobility_loss_matches_direct_kl(rng, toy):
    _, _, _, targets = toy
    Z = rng.normal(size=(targets.num_regions, 5))
    t = targets.trips
    expected = kl_columns_and_rows(t.p_org_given_dst, t.p_dst_given_org,
                                   softmax(Z @ Z.T, 0), softmax(Z @ Z.T, 1))
    assert mobility_loss_from_embeddings(Z, targets).item() == pytest.approx(expected, rel=1e-12)
    p_org, p_dst = estimated_od(Z)
    assert mobility_loss(t.p_org_given_dst, t.p_dst_given_org, p_org, p_dst).item() == \
        pytest.approx(expected, rel=1e-12)


def test_kl_is_zero_at_target(rng):
    p = random_distributions(rng, 6, 6)
    q = random_distributions(rng, 6, 6).T  # column-stochastic
    assert abs(mobility_loss(q, p, q, p).item()) < 1e-12


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_kl_is_non_negative(seed):
    rng = np.random.default_rng(seed)
    p = random_distributions(rng, 5, 5)
    q = random_distributions(rng, 5, 5, zeros=False)
    assert mobility_loss(p.T, p, q.T, q).item() >= -1e-12


def test_embedding_hellinger_matches_pairwise(rng):
    Z = rng.normal(size=(6, 4)) * 2
    S_hat = embedding_hellinger(Z).data
    np.testing.assert_allclose(S_hat, hellinger_matrix(softmax(Z, 1)), atol=1e-7)


def test_similarity_loss_counts_ordered_pairs(rng):
    Z = rng.normal(size=(5, 3))
    S = hellinger_matrix(random_distributions(rng, 5, 4))
    S_hat = hellinger_matrix(softmax(Z, 1))
    off = ~np.eye(5, dtype=bool)
    expected = float(np.sum((S - S_hat)[off] ** 2))
    assert similarity_loss(Z, S).item() == pytest.approx(expected, rel=1e-7)
    assert similarity_loss(Z, S_hat).item() == pytest.approx(0.0, abs=1e-12)


def test_similarity_loss_gradient(rng):
    Z = ad.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    S = hellinger_matrix(random_distributions(rng, 4, 3))
    report = ad.gradient_check(lambda: similarity_loss(Z, S), [Z], floor=1e-5)
    assert report.max_rel_error < 1e-6, report.worst


def test_total_is_weighted_sum(rng, toy):
    _, _, _, targets = toy
    Z = rng.normal(size=(targets.num_regions, 8))
    parts = loss_breakdown(Z, targets)
    chk, land, mob, total = parts.values()
    assert abs(total - (0.3 * chk + 0.6 * land + 0.1 * mob)) <= 1e-12 * max(1.0, abs(total))
    w = LossWeights(0.2, 0.2, 0.6)
    assert total_loss(Z, targets, w).item() == pytest.approx(0.2 * chk + 0.2 * land + 0.6 * mob,
                                                             rel=1e-14)
    assert combine(parts.chk, parts.land, parts.mob, LossWeights.mobility_only()).item() == mob


@pytest.mark.parametrize("w", [(0.5, 0.5, 0.5), (-0.1, 0.6, 0.5), (float("nan"), 0.5, 0.5)])
def test_bad_weights(w):
    with pytest.raises(ConfigError):
        LossWeights(*w)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainingConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainingConfig(lr=0.0)
    assert TrainingConfig(seed=7, replicates=3).replicate_seeds() == [7, 8, 9]


@pytest.fixture(scope="module")
def short_run(toy):
    _, g, adjs, targets = toy
    return train(g, adjs, targets, TrainingConfig(epochs=60, lr=0.01), seed=2)


def test_training_reduces_loss(short_run):
    h = short_run.history
    assert len(h) == 60 and [r.epoch for r in h] == list(range(1, 61))
    assert h[-1].total < h[0].total
    assert all(np.isfinite(r.total) for r in h)
    for beta in short_run.betas:
        assert abs(beta.sum() - 1) < 1e-12


def test_training_is_deterministic(toy, short_run):
    _, g, adjs, targets = toy
    again = train(g, adjs, targets, TrainingConfig(epochs=60, lr=0.01), seed=2)
    assert np.array_equal(again.Z, short_run.Z)
    assert [r.total for r in again.history] == [r.total for r in short_run.history]


def test_mobility_only_variant(toy):
    _, g, adjs, targets = toy
    cfg = TrainingConfig(epochs=5, weights=LossWeights.mobility_only())
    res = train(g, adjs, targets, cfg, seed=0)
    assert all(r.total == pytest.approx(r.mob, rel=1e-15) for r in res.history)


def test_divergence_is_reported(toy, monkeypatch):
    _, g, adjs, targets = toy

    def explode(*args, **kwargs):
        raise NonFiniteValue("exp produced a non-finite value")

    monkeypatch.setattr(training, "loss_breakdown", explode)
    with pytest.raises(DivergenceDetected):
        train(g, adjs, targets, TrainingConfig(epochs=3), seed=0)


def test_artifacts(tmp_path, short_run):
    short_run.write_history(tmp_path / "h.csv")
    short_run.write_betas(tmp_path / "b.csv", ["RR", "RCR", "RT_OR", "RT_DR", "RT_CR"])
    write_embeddings(short_run.Z, tmp_path / "z.csv")
    rows = list(csv.reader((tmp_path / "h.csv").open()))
    assert rows[0] == ["epoch", "L_chk", "L_land", "L_mob", "total"] and len(rows) == 61
    z = list(csv.reader((tmp_path / "z.csv").open()))
    assert z[0][:2] == ["region_id", "z_0"] and len(z[0]) == 33
    assert float(z[1][1]) == short_run.Z[0, 0]
