import numpy as np
import pytest

from dynamo.atlas import (
    AtlasError,
    accuracy_landscape,
    average_embeddings,
    classical_mds,
    components_for_variance,
    convex_hull_2d,
    evaluate_at,
    export_landscape_csv,
    export_spectrum_csv,
    fit_pca,
    grid_accuracies,
    hidden_state_matrix,
    in_hull_2d,
    silhouette,
    ssl_optimize,
    svcca_distance,
)
from dynamo.models import init_base_model, init_meta_model
from dynamo.tasks import TaskSpec, gen_valence_task, split_dataset


def _random_orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _tiny_meta(seed=0):
    return init_meta_model("gru", 12, 3, 4, 2, {0: 2}, seed=seed)


def _tiny_ds(n=80, seed=3):
    spec = TaskSpec("valence_sentiment", vocab_size=12, num_classes=2,
                    t_min=3, t_max=6, noise_rate=0.0, seed=seed, num_sequences=n)
    return split_dataset(gen_valence_task(spec), (0.3, 0.3, 0.05), seed=seed)


# -- PCA ------------------------------------------------------------------------


def test_fit_pca_two_point_instance():
    atlas = fit_pca(np.array([[1.0, 0.0], [-1.0, 0.0]]))
    assert np.allclose(atlas.spectrum, [1.0, 0.0])
    assert np.allclose(atlas.axes[0], [1.0, 0.0])
    assert np.allclose(atlas.mean, [0.0, 0.0])


def test_fit_pca_identical_embeddings_zero_spectrum():
    atlas = fit_pca(np.tile([2.0, -1.0, 3.0], (5, 1)))
    assert np.allclose(atlas.spectrum, 0.0)


def test_fit_pca_rotation_covariance():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((12, 4)) * np.array([3.0, 2.0, 1.0, 0.5])
    q = _random_orthogonal(rng, 4)
    a1 = fit_pca(X)
    a2 = fit_pca(X @ q)
    assert np.allclose(a1.spectrum, a2.spectrum, atol=1e-10)
    for i in range(4):
        rotated = a1.axes[i] @ q
        assert (np.allclose(a2.axes[i], rotated, atol=1e-8)
                or np.allclose(a2.axes[i], -rotated, atol=1e-8))


def test_fit_pca_invariants_and_reconstruction():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((7, 5))
    atlas = fit_pca(X)
    assert np.allclose(atlas.axes @ atlas.axes.T, np.eye(5), atol=1e-8)
    total_var = ((X - X.mean(axis=0)) ** 2).sum() / len(X)
    assert atlas.spectrum.sum() == pytest.approx(total_var, abs=1e-8)
    assert np.all(np.diff(atlas.spectrum) <= 1e-12)
    coords = atlas.project(X)
    assert np.allclose(atlas.reconstruct(coords), X, atol=1e-8)


def test_fit_pca_needs_two_rows():
    with pytest.raises(AtlasError):
        fit_pca(np.zeros((1, 3)))


def test_components_for_variance():
    assert components_for_variance(np.array([9.0, 1.0]), 0.95) == 2
    assert components_for_variance(np.array([19.0, 1.0]), 0.95) == 1
    assert components_for_variance(np.array([3.0, 2.0, 1.0, 0.0]), 1.0) == 3
    assert components_for_variance(np.zeros(4), 0.95) == 0
    with pytest.raises(AtlasError):
        components_for_variance(np.array([1.0]), 0.0)


def test_average_embeddings():
    assert np.allclose(average_embeddings([[2.0, 0.0], [0.0, 2.0]]), [1.0, 1.0])
    assert np.allclose(average_embeddings([[3.0, 4.0]]), [3.0, 4.0])
    assert np.allclose(average_embeddings([[1.0, 2.0], [9.0, 9.0]],
                                          weights=[1.0, 0.0]), [1.0, 2.0])
    with pytest.raises(AtlasError):
        average_embeddings([])
    with pytest.raises(AtlasError):
        average_embeddings([[1.0], [2.0]], weights=[0.7, 0.7])


# -- evaluation -------------------------------------------------------------------


def test_evaluate_at_deterministic_and_matches_grid():
    meta = _tiny_meta()
    ds = _tiny_ds()
    theta = np.array([0.2, -0.1])
    a = evaluate_at(meta, theta, 0, ds)
    b = evaluate_at(meta, theta, 0, ds)
    assert a == b
    accs = grid_accuracies(meta, np.stack([theta, np.zeros(2)]), 0, ds)
    assert accs[0] == a


def test_evaluate_at_single_example_split():
    meta = _tiny_meta()
    ds = _tiny_ds()
    ds.splits["test"] = ds.splits["test"][:1]
    acc = evaluate_at(meta, np.zeros(2), 0, ds)
    assert acc in (0.0, 1.0)


def test_evaluate_at_empty_split_errors():
    meta = _tiny_meta()
    ds = _tiny_ds()
    ds.splits["test"] = []
    with pytest.raises(AtlasError):
        evaluate_at(meta, np.zeros(2), 0, ds)


def test_landscape_contains_exact_node_values(tmp_path):
    meta = _tiny_meta()
    ds = _tiny_ds()
    base_thetas = np.array([[0.5, 0.0], [-0.5, 0.0], [0.0, 0.4], [0.0, -0.4]])
    grid = accuracy_landscape(meta, 0, ds, base_thetas, grid=(3, 3),
                              extent_scale=1.0, best_base_accuracy=0.8)
    assert grid.accuracy.shape == (3, 3)
    assert np.all(grid.accuracy >= 0.0) and np.all(grid.accuracy <= 1.0)
    # grid node values equal direct evaluation at the same theta
    th = grid.theta_at(grid.us[1], grid.vs[2])
    assert grid.accuracy[1, 2] == evaluate_at(meta, th, 0, ds)
    assert grid.argmax_accuracy == grid.accuracy.max()
    assert grid.relative is not None
    export_landscape_csv(grid, tmp_path / "land.csv", comment="config_hash=x")
    lines = (tmp_path / "land.csv").read_text().splitlines()
    assert lines[0].startswith("#") and lines[1].startswith("u,v,theta_0")
    assert len(lines) == 2 + 9


def test_landscape_1x1_grid_is_single_evaluation():
    meta = _tiny_meta()
    ds = _tiny_ds()
    base_thetas = np.array([[0.3, 0.1], [-0.3, -0.1]])
    grid = accuracy_landscape(meta, 0, ds, base_thetas, grid=(1, 1),
                              extent_scale=1.0)
    th = grid.theta_at(grid.us[0], grid.vs[0])
    assert grid.accuracy[0, 0] == evaluate_at(meta, th, 0, ds)


def test_landscape_rejects_dependent_plane():
    meta = _tiny_meta()
    ds = _tiny_ds()
    with pytest.raises(AtlasError):
        accuracy_landscape(meta, 0, ds, np.zeros((2, 2)),
                           plane=(np.zeros(2), np.ones(2), 2 * np.ones(2)))


def test_hull_helpers():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.5, 0.5]])
    hull = convex_hull_2d(pts)
    assert len(hull) == 4
    assert in_hull_2d((0.5, 0.5), hull)
    assert in_hull_2d((0.0, 0.0), hull)
    assert not in_hull_2d((1.5, 0.5), hull)
    assert not in_hull_2d((-0.1, 0.2), hull)


# -- SSL --------------------------------------------------------------------------


def test_ssl_zero_steps_returns_init():
    meta = _tiny_meta()
    ds = _tiny_ds()
    theta, thetas, losses = ssl_optimize(meta, 0, ds, steps=0)
    assert np.array_equal(theta, np.zeros(2))
    assert thetas.shape == (1, 2) and losses.shape == (1,)


def test_ssl_freezes_meta_and_loss_never_increases():
    meta = _tiny_meta()
    ds = _tiny_ds()
    before = {k: v.copy() for k, v in meta.params.items()}
    theta, thetas, losses = ssl_optimize(meta, 0, ds, steps=25, lr=0.5)
    for k, v in before.items():
        assert np.array_equal(meta.params[k], v)
    assert np.all(np.diff(losses) <= 1e-12)
    assert losses[-1] <= losses[0]
    assert thetas.shape == (26, 2)
    assert np.array_equal(thetas[-1], theta)


def test_ssl_empty_split_errors():
    meta = _tiny_meta()
    ds = _tiny_ds()
    ds.splits["ssl_labeled"] = []
    with pytest.raises(AtlasError):
        ssl_optimize(meta, 0, ds, steps=1)


# -- SVCCA / MDS / silhouette -------------------------------------------------------


def test_svcca_identity_is_zero():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((200, 8))
    assert svcca_distance(A, A, dims_kept=8) < 1e-8


def test_svcca_orthogonal_invariance():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((300, 10))
    q = _random_orthogonal(rng, 10)
    assert svcca_distance(A, A @ q, dims_kept=10) < 1e-6


def test_svcca_independent_matrices_near_sqrt2():
    rng = np.random.default_rng(4)
    A = rng.standard_normal((5000, 6))
    B = rng.standard_normal((5000, 6))
    d = svcca_distance(A, B, dims_kept=6)
    assert abs(d - np.sqrt(2.0)) < 0.1


def test_svcca_symmetry_and_validation():
    rng = np.random.default_rng(5)
    A = rng.standard_normal((100, 5))
    B = rng.standard_normal((100, 7))
    assert svcca_distance(A, B, 5) == pytest.approx(svcca_distance(B, A, 5), abs=1e-10)
    with pytest.raises(AtlasError):
        svcca_distance(A, rng.standard_normal((50, 5)))
    with pytest.raises(AtlasError):
        svcca_distance(A, B, dims_kept=6)


def test_svcca_rank_deficiency_warns():
    rng = np.random.default_rng(6)
    base = rng.standard_normal((100, 2))
    A = np.concatenate([base, base], axis=1)  # rank 2 in 4 columns
    B = rng.standard_normal((100, 4))
    with pytest.warns(UserWarning):
        svcca_distance(A, B, dims_kept=4)


def test_classical_mds_collinear_exact():
    pts = np.array([0.0, 1.0, 3.0])
    D = np.abs(pts[:, None] - pts[None, :])
    coords = classical_mds(D, out_dim=2)
    rec = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
    assert np.allclose(rec, D, atol=1e-8)


def test_classical_mds_zero_matrix():
    coords = classical_mds(np.zeros((4, 4)), out_dim=2)
    assert np.allclose(coords, 0.0)


def test_classical_mds_permutation_equivariance():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((6, 3))
    D = np.linalg.norm(X[:, None] - X[None, :], axis=-1)
    perm = rng.permutation(6)
    c1 = classical_mds(D, 2)
    c2 = classical_mds(D[np.ix_(perm, perm)], 2)
    d1 = np.linalg.norm(c1[:, None] - c1[None, :], axis=-1)
    d2 = np.linalg.norm(c2[:, None] - c2[None, :], axis=-1)
    assert np.allclose(d1[np.ix_(perm, perm)], d2, atol=1e-8)


def test_classical_mds_rejects_asymmetric():
    D = np.array([[0.0, 1.0], [2.0, 0.0]])
    with pytest.raises(AtlasError):
        classical_mds(D, 1)


def test_silhouette_separated_clusters():
    rng = np.random.default_rng(8)
    a = rng.normal(0.0, 0.05, size=(10, 2))
    b = rng.normal(10.0, 0.05, size=(10, 2))
    X = np.concatenate([a, b])
    labels = [0] * 10 + [1] * 10
    assert silhouette(X, labels) > 0.9


def test_silhouette_degenerate_and_relabel():
    X = np.zeros((6, 2))
    labels = [0, 0, 0, 1, 1, 1]
    assert silhouette(X, labels) == 0.0
    rng = np.random.default_rng(9)
    Y = rng.standard_normal((8, 3))
    lab = [0, 1, 0, 1, 0, 1, 0, 1]
    swapped = [1 - v for v in lab]
    assert silhouette(Y, lab) == pytest.approx(silhouette(Y, swapped))
    with pytest.raises(AtlasError):
        silhouette(Y, [0] * 8)


def test_hidden_state_matrix_shapes():
    m = init_base_model("gru", 12, 3, 5, 2, 0, seed=1)
    seqs = [[1, 2, 3], [4, 5]]
    acts = hidden_state_matrix(m, seqs)
    assert acts.shape == (5, 5)


def test_spectrum_csv_export(tmp_path):
    atlas = fit_pca(np.array([[1.0, 0.0], [-1.0, 0.0], [0.5, 0.2]]))
    export_spectrum_csv(atlas, tmp_path / "spec.csv", comment="config_hash=y")
    lines = (tmp_path / "spec.csv").read_text().splitlines()
    assert lines[1] == "component,eigenvalue,cumulative_fraction"
    assert len(lines) == 2 + 2
