import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal
from sklearn.metrics import adjusted_rand_score

from dtmap.analysis import (
    CvReport,
    ModelSpec,
    association_test,
    cluster_embeddings,
    cluster_mean_trajectories,
    energy_distance,
    evaluate_cv,
    fold_seed,
    load_clusters,
    save_association,
    save_clusters,
)
from dtmap.dtm import DtmConfig, fit_dtm, mc_heldout_ll
from dtmap.embeddings import EmbeddingSet
from dtmap.spline_basis import design_matrix
from dtmap.trajdata import Dataset, SimConfig, Trajectory, simulate, split_folds
from oracles import mixed_model_data


def _es(X, ids=None):
    ids = ids if ids is not None else [f"s{i:03d}" for i in range(len(X))]
    return EmbeddingSet(ids, X)


def _two_clouds(rng, n=30):
    a = rng.normal(size=(n, 2))
    b = rng.normal(size=(n, 2)) + [600.0, 0.0]
    return np.vstack([a, b]), np.repeat([0, 1], n)


# ---------------------------------------------------------------------------
# clustering


def test_separated_clouds_recovered(rng):
    X, truth = _two_clouds(rng)
    labels = cluster_embeddings(_es(X), 2)
    assert adjusted_rand_score(truth, labels) == 1.0


def test_singletons_when_one_cluster_per_subject(rng):
    X = rng.normal(size=(12, 2))
    assert len(set(cluster_embeddings(_es(X), 12))) == 12
    assert set(cluster_embeddings(_es(X), 1)) == {0}
    with pytest.raises(ValueError):
        cluster_embeddings(_es(X), 13)


def test_clustering_order_invariant(rng):
    X = rng.normal(size=(40, 2))
    es = _es(X)
    base = dict(zip(es.subject_ids, cluster_embeddings(es, 4)))
    perm = rng.permutation(40)
    shuffled = _es(X[perm], [es.subject_ids[i] for i in perm])
    again = dict(zip(shuffled.subject_ids, cluster_embeddings(shuffled, 4)))
    # same labels, not merely the same partition, because numbering follows sorted ids
    assert again == base


@settings(max_examples=25)
@given(seed=st.integers(0, 10_000), angle=st.floats(0, 2 * np.pi), shift=st.floats(-50, 50))
def test_clustering_rigid_motion_invariant(seed, angle, shift):
    X = np.random.default_rng(seed).normal(size=(25, 2))
    R = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    a = cluster_embeddings(_es(X), 3)
    b = cluster_embeddings(_es(X @ R.T + shift), 3)
    assert adjusted_rand_score(a, b) == 1.0


def test_cluster_csv_round_trip(tmp_path, rng):
    es = _es(rng.normal(size=(10, 2)))
    labels = cluster_embeddings(es, 3)
    save_clusters(es.subject_ids, labels, tmp_path / "c.csv")
    assert load_clusters(tmp_path / "c.csv") == dict(zip(es.subject_ids, labels.tolist()))


def test_cluster_mean_trajectories():
    ds = Dataset([Trajectory("a", [0.0, 1.0], [1.0, 3.0]), Trajectory("b", [0.1, 2.0], [3.0, 5.0]),
                  Trajectory("c", [0.0], [10.0])])
    out = cluster_mean_trajectories(ds, {"a": 0, "b": 0, "c": 1}, [0.0, 1.0, 2.0])
    np.testing.assert_allclose(out[0], [2.0, 3.0, 5.0])
    assert out[1][0] == 10.0 and np.isnan(out[1][1:]).all()


# ---------------------------------------------------------------------------
# association


def _energy_loops(X, Y):
    def mean_dist(A, B):
        return np.mean([[np.linalg.norm(a - b) for b in B] for a in A])
    return 2 * mean_dist(X, Y) - mean_dist(X, X) - mean_dist(Y, Y)


def test_energy_distance_matches_loops(rng):
    X = rng.normal(size=(7, 2))
    Y = rng.normal(size=(5, 2)) + 1
    assert energy_distance(X, Y) == pytest.approx(_energy_loops(X, Y), rel=1e-12)
    y = np.r_[np.ones(7, bool), np.zeros(5, bool)]
    res = association_test(_es(np.vstack([X, Y])), y, n_perm=100)
    assert res.statistic == pytest.approx(_energy_loops(X, Y), rel=1e-12)
    assert (res.n_pos, res.n_neg) == (7, 5)


@settings(max_examples=20)
@given(seed=st.integers(0, 10_000), n_perm=st.integers(100, 400))
def test_p_value_bounds(seed, n_perm):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(20, 2))
    y = rng.permutation(np.r_[np.ones(8, bool), np.zeros(12, bool)])
    p = association_test(_es(X), y, n_perm=n_perm, seed=seed).p_value
    assert 1 / (1 + n_perm) <= p <= 1
    assert p > 0
    assert p * (1 + n_perm) == pytest.approx(round(p * (1 + n_perm)))


def test_association_deterministic_and_input_checks(rng):
    X = rng.normal(size=(30, 2))
    y = np.arange(30) % 2 == 0
    a = association_test(_es(X), y, n_perm=200, seed=3)
    b = association_test(_es(X), y, n_perm=200, seed=3)
    assert a == b
    with pytest.raises(ValueError):
        association_test(_es(X), np.ones(30, bool), n_perm=200)
    with pytest.raises(ValueError):
        association_test(_es(X), y, n_perm=99)
    with pytest.raises(ValueError):
        association_test(_es(X), y[:-1], n_perm=200)


def test_association_dict_outcome_drops_missing(rng):
    es = _es(rng.normal(size=(10, 2)))
    outcome = {sid: i < 3 for i, sid in enumerate(es.subject_ids[:6])}
    res = association_test(es, outcome, n_perm=100)
    assert (res.n_pos, res.n_neg) == (3, 3)


def test_identical_groups_give_p_one():
    X = np.zeros((10, 2))
    assert association_test(_es(X), np.arange(10) < 5, n_perm=100).p_value == 1.0


def test_more_permutations_change_p_value_little(rng):
    X = rng.normal(size=(40, 2))
    X[:20] += 0.4
    y = np.arange(40) < 20
    p1 = association_test(_es(X), y, n_perm=2000, seed=1).p_value
    p2 = association_test(_es(X), y, n_perm=4000, seed=1).p_value
    assert abs(p1 - p2) < 2 / np.sqrt(2000)


def test_association_csv(tmp_path, rng):
    res = association_test(_es(rng.normal(size=(10, 2))), np.arange(10) < 4, n_perm=100)
    save_association({"ILD": res}, tmp_path / "a.csv")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "outcome,statistic,p_value,n_perm,n_pos,n_neg"
    assert lines[1].startswith("ILD,") and lines[1].endswith(",100,4,6")


# ---------------------------------------------------------------------------
# cross-validation


def test_fold_seed_is_order_free():
    assert fold_seed(3, 1) == fold_seed(3, 1)
    assert len({fold_seed(3, f) for f in range(10)}) == 10


def test_cv_report_summary_recomputes(tmp_path):
    rep = CvReport(["lmm"], {"lmm": np.array([-3.0, -4.0, -2.5])}, {"lmm": np.array([-1.0, -1.2, -0.9])})
    vals = rep.subject_ll["lmm"]
    assert rep.mean("lmm") == pytest.approx(np.mean(vals), abs=1e-12)
    assert rep.sd("lmm") == pytest.approx(np.std(vals, ddof=1), abs=1e-12)
    assert rep.k == 3
    rep.save(tmp_path / "cv.csv")
    back = CvReport.load(tmp_path / "cv.csv")
    np.testing.assert_array_equal(back.subject_ll["lmm"], vals)
    np.testing.assert_array_equal(back.obs_ll["lmm"], rep.obs_ll["lmm"])
    assert back.summary() == rep.summary()


def test_cv_duplicate_specs_identical():
    ds, _ = simulate(SimConfig(m=40), 6)
    rep = evaluate_cv(ds, ["lmm", "lmm", ModelSpec("fpca", q=2)], k=3, seed=1)
    assert rep.models == ["lmm", "lmm#2", "fpca"]
    np.testing.assert_array_equal(rep.subject_ll["lmm"], rep.subject_ll["lmm#2"])
    np.testing.assert_array_equal(rep.obs_ll["lmm"], rep.obs_ll["lmm#2"])


def test_cv_input_errors():
    ds, _ = simulate(SimConfig(m=10), 6)
    with pytest.raises(ValueError):
        evaluate_cv(ds, ["lmm"], k=1)
    with pytest.raises(ValueError):
        evaluate_cv(ds, ["lmm"], k=2, d=5 + 5)
    with pytest.raises(ValueError):
        evaluate_cv(ds, ["spline"], k=2)


def test_lmm_cv_near_generative_likelihood():
    cov = np.diag([1.0, 0.8, 0.6, 0.8, 1.0]) + 0.3
    mu, sigma2, k = 2.0, 0.25, 5
    ds, basis, _ = mixed_model_data(300, mu, cov, sigma2, seed=4)
    rep = evaluate_cv(ds, ["lmm"], k=k, seed=2)
    # oracle: the generating model's own held-out LL on the same folds
    folds = split_folds(ds, k, 2)
    gen = []
    for f in range(k):
        _, test = folds.train_test(ds, f)
        lls = []
        for tr in test:
            B = design_matrix(basis, tr.times).rows
            C = B @ cov @ B.T + sigma2 * np.eye(tr.n)
            lls.append(multivariate_normal(np.full(tr.n, mu), C).logpdf(tr.values))
        gen.append(np.mean(lls))
    assert abs(rep.mean("lmm") - np.mean(gen)) <= 2 * rep.sd("lmm")


def test_more_mc_samples_reduce_variance():
    ds, _ = simulate(SimConfig(m=60, map_kind="nonlinear-warp"), 8)
    state = fit_dtm(ds, DtmConfig(p=10, epochs=2))
    tr = ds.trajectories[0]
    one = [mc_heldout_ll(state, tr, 1, s)["subject_ll"] for s in range(10)]
    many = [mc_heldout_ll(state, tr, 512, s)["subject_ll"] for s in range(10)]
    assert np.var(many) < np.var(one)


@pytest.mark.slow
def test_cv_with_dtm_is_reproducible():
    ds, _ = simulate(SimConfig(m=40, map_kind="nonlinear-warp"), 5)
    spec = ModelSpec("dtm", dtm=DtmConfig(p=8, epochs=1))
    a = evaluate_cv(ds, [spec], k=2, seed=0, mc_samples=32)
    b = evaluate_cv(ds, [spec], k=2, seed=0, mc_samples=32)
    np.testing.assert_array_equal(a.subject_ll["dtm"], b.subject_ll["dtm"])
