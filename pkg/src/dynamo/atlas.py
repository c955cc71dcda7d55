"""Analyses over the learned embedding space: PCA and spectra, model
averaging, accuracy landscapes, semi-supervised embedding optimization, the
SVCCA + classical-MDS pairwise baseline, and cluster-quality scoring."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .models import MetaModel, rollout_batch
from .numgrad import Graph
from .tasks import SequenceDataset


class AtlasError(Exception):
    pass


# -- PCA over embeddings ---------------------------------------------------------


@dataclass
class EmbeddingAtlas:
    embeddings: np.ndarray          # (N, d)
    metadata: list[dict]            # one record per row
    mean: np.ndarray                # (d,)
    axes: np.ndarray                # (d, d), rows are principal axes
    spectrum: np.ndarray            # (d,) covariance eigenvalues, descending

    def project(self, thetas: np.ndarray, k: int | None = None) -> np.ndarray:
        k = self.axes.shape[0] if k is None else k
        return (np.atleast_2d(thetas) - self.mean) @ self.axes[:k].T

    def reconstruct(self, coords: np.ndarray) -> np.ndarray:
        return self.mean + np.atleast_2d(coords) @ self.axes[:coords.shape[-1]]


def fit_pca(embeddings: np.ndarray, metadata: list[dict] | None = None) -> EmbeddingAtlas:
    """Center, SVD, axes sorted by descending eigenvalue (covariance divisor N).
    Sign convention: each axis's largest-magnitude coordinate is positive."""
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise AtlasError("need at least two embeddings")
    n, d = X.shape
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=True)
    spectrum = np.zeros(d)
    spectrum[:len(s)] = (s * s) / n
    axes = vt
    for i in range(d):
        j = int(np.argmax(np.abs(axes[i])))
        if axes[i, j] < 0:
            axes[i] = -axes[i]
    meta = list(metadata) if metadata is not None else [{} for _ in range(n)]
    return EmbeddingAtlas(X.copy(), meta, mean, axes, spectrum)


def components_for_variance(spectrum: np.ndarray, threshold: float) -> int:
    """Smallest k whose leading eigenvalues explain `threshold` of the variance."""
    if not 0.0 < threshold <= 1.0:
        raise AtlasError("threshold must be in (0, 1]")
    spectrum = np.asarray(spectrum, dtype=np.float64)
    total = spectrum.sum()
    if total <= 0.0:
        return 0
    if threshold >= 1.0:
        return int((spectrum > 0).sum())
    cum = np.cumsum(spectrum) / total
    return int(np.searchsorted(cum, threshold - 1e-15) + 1)


def average_embeddings(thetas, weights=None) -> np.ndarray:
    thetas = [np.asarray(t, dtype=np.float64) for t in thetas]
    if not thetas:
        raise AtlasError("cannot average an empty set of embeddings")
    if weights is None:
        return np.mean(thetas, axis=0)
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != len(thetas) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise AtlasError("weights must be nonnegative and sum to 1")
    return np.tensordot(w, np.stack(thetas), axes=1)


# -- accuracy evaluation -----------------------------------------------------------


def _grouped_test_data(ds: SequenceDataset, split: str):
    idxs = ds.indices(split)
    if not idxs:
        raise AtlasError(f"empty split {split!r}")
    seqs, labels = ds.subset(idxs)
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(seqs):
        by_len.setdefault(len(s), []).append(i)
    groups = []
    for T, rows in sorted(by_len.items()):
        mat = np.array([seqs[i] for i in rows], dtype=np.int64)
        groups.append((mat, labels[rows]))
    return groups, len(seqs)


def grid_accuracies(meta: MetaModel, thetas: np.ndarray, task_group: int,
                    ds: SequenceDataset, split: str = "test",
                    chunk: int = 32) -> np.ndarray:
    """Test accuracy of the meta-model at each of the given embeddings.

    Embeddings are evaluated in chunks with the input batch tiled per
    embedding, so a whole landscape costs a handful of batched rollouts.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    groups, n_total = _grouped_test_data(ds, split)
    M = thetas.shape[0]
    correct = np.zeros(M)
    for mat, labels in groups:
        B = mat.shape[0]
        for lo in range(0, M, chunk):
            th = thetas[lo:lo + chunk]
            m = th.shape[0]
            tiled = np.tile(mat, (m, 1))
            theta_rows = np.repeat(th, B, axis=0)
            _, logits = rollout_batch(meta, tiled, theta=theta_rows,
                                      task_group=task_group)
            pred = logits[-1].argmax(axis=1).reshape(m, B)
            correct[lo:lo + m] += (pred == labels[None, :]).sum(axis=1)
    return correct / n_total


def evaluate_at(meta: MetaModel, theta: np.ndarray, task_group: int,
                ds: SequenceDataset, split: str = "test") -> float:
    """Final-step argmax accuracy of the meta-model conditioned on theta."""
    return float(grid_accuracies(meta, np.asarray(theta)[None, :], task_group,
                                 ds, split)[0])


# -- accuracy landscape ---------------------------------------------------------


@dataclass
class LandscapeGrid:
    origin: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    us: np.ndarray
    vs: np.ndarray
    accuracy: np.ndarray            # (nu, nv)
    base_uv: np.ndarray             # (N, 2) projections of the base embeddings
    relative: np.ndarray | None = None
    argmax_uv: tuple[float, float] = (0.0, 0.0)
    argmax_theta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    argmax_accuracy: float = 0.0

    def theta_at(self, u: float, v: float) -> np.ndarray:
        return self.origin + u * self.u_axis + v * self.v_axis


def plane_from_pca(atlas: EmbeddingAtlas) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if atlas.axes.shape[0] < 2:
        raise AtlasError("need at least a 2-D embedding space for a plane")
    return atlas.mean, atlas.axes[0], atlas.axes[1]


def accuracy_landscape(meta: MetaModel, task_group: int, ds: SequenceDataset,
                       base_thetas: np.ndarray, plane=None,
                       grid: tuple[int, int] = (15, 15),
                       extent_scale: float = 1.5,
                       best_base_accuracy: float | None = None,
                       split: str = "test") -> LandscapeGrid:
    """Accuracy over a 2-plane in embedding space (default: top-2 PCA plane
    through the embedding mean, spanning `extent_scale` times the base
    embeddings' bounding box)."""
    base_thetas = np.asarray(base_thetas, dtype=np.float64)
    if plane is None:
        origin, u_axis, v_axis = plane_from_pca(fit_pca(base_thetas))
    else:
        origin, u_axis, v_axis = (np.asarray(p, dtype=np.float64) for p in plane)
        if np.linalg.matrix_rank(np.stack([u_axis, v_axis])) < 2:
            raise AtlasError("plane basis must be linearly independent")
    rel = base_thetas - origin
    base_uv = np.stack([rel @ u_axis / (u_axis @ u_axis),
                        rel @ v_axis / (v_axis @ v_axis)], axis=1)

    def _coords(vals, count):
        lo, hi = float(vals.min()), float(vals.max())
        c, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        half = half * extent_scale if half > 0 else 1.0
        return np.linspace(c - half, c + half, count)

    us = _coords(base_uv[:, 0], grid[0])
    vs = _coords(base_uv[:, 1], grid[1])
    uu, vv = np.meshgrid(us, vs, indexing="ij")
    thetas = origin + uu[..., None] * u_axis + vv[..., None] * v_axis
    accs = grid_accuracies(meta, thetas.reshape(-1, len(origin)), task_group,
                           ds, split).reshape(grid)
    k = int(np.argmax(accs))
    ki, kj = divmod(k, grid[1])
    out = LandscapeGrid(origin, u_axis, v_axis, us, vs, accs, base_uv)
    out.argmax_uv = (float(us[ki]), float(vs[kj]))
    out.argmax_theta = out.theta_at(*out.argmax_uv)
    out.argmax_accuracy = float(accs[ki, kj])
    if best_base_accuracy:
        out.relative = accs / best_base_accuracy
    return out


def convex_hull_2d(points: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull; returns hull vertices counterclockwise."""
    pts = sorted({(float(x), float(y)) for x, y in np.asarray(points)})
    if len(pts) <= 2:
        return np.array(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def in_hull_2d(point, hull: np.ndarray, tol: float = 1e-12) -> bool:
    """Point-in-convex-polygon test; boundary counts as inside."""
    if len(hull) == 0:
        return False
    if len(hull) == 1:
        return bool(np.allclose(point, hull[0], atol=1e-9))
    if len(hull) == 2:
        a, b = hull
        ab, ap = b - a, np.asarray(point) - a
        crossv = ab[0] * ap[1] - ab[1] * ap[0]
        t = np.dot(ap, ab) / np.dot(ab, ab)
        return bool(abs(crossv) < 1e-9 and -tol <= t <= 1 + tol)
    x, y = point
    for i in range(len(hull)):
        ax, ay = hull[i]
        bx, by = hull[(i + 1) % len(hull)]
        if (bx - ax) * (y - ay) - (by - ay) * (x - ax) < -tol:
            return False
    return True


# -- semi-supervised optimization of the embedding --------------------------------


def _build_theta_loss_graph(meta: MetaModel, task_group: int, T: int, B: int) -> Graph:
    """Mean final-step cross entropy as a function of theta alone; the meta
    parameters enter as frozen (non-parameter) leaves."""
    from .models import cell_step_graph

    g = Graph()
    refs = {name: g.leaf(name, arr.shape, param=False)
            for name, arr in meta.params.items() if not name.startswith("head")}
    head_w = g.leaf(f"head{task_group}_w",
                    meta.params[f"head{task_group}_w"].shape, param=False)
    head_b = g.leaf(f"head{task_group}_b",
                    meta.params[f"head{task_group}_b"].shape, param=False)
    theta = g.leaf("theta", (1, meta.embed_dim))
    theta_rows = g.matmul(g.const(np.ones((B, 1))), theta)
    h = g.const(np.zeros((B, meta.hidden_dim)))
    parts = []
    for t in range(T):
        x = g.leaf(f"x{t}", (B, meta.vocab_size), param=False)
        inp = g.concat(theta_rows, g.matmul(x, refs["embed"]))
        h = cell_step_graph(g, meta.cell_kind, refs, inp, h)
        lm = g.leaf(f"lm{t}", (B, 1), param=False)
        parts.append(g.mul(h, lm))
    h_last = parts[0]
    for p in parts[1:]:
        h_last = g.add(h_last, p)
    logits = g.add(g.matmul(h_last, head_w), head_b)
    onehot = g.leaf("labels", (B, meta.head_dims[task_group]), param=False)
    g.output(g.reduce_mean(g.softmax_log_loss(logits, onehot)))
    return g


def ssl_optimize(meta: MetaModel, task_group: int, ds: SequenceDataset,
                 theta_init: np.ndarray | None = None, steps: int = 100,
                 lr: float = 1.0, split: str = "ssl_labeled"
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradient descent on the labeled-split loss with respect to theta only,
    with step-halving backoff so the recorded loss never increases.

    Returns (theta_final, thetas (steps+1, d), losses (steps+1,)).
    """
    idxs = ds.indices(split)
    if not idxs:
        raise AtlasError(f"empty split {split!r}")
    seqs, labels = ds.subset(idxs)
    B = len(seqs)
    lengths = np.array([len(s) for s in seqs])
    T = int(lengths.max())
    mat = np.zeros((B, T), dtype=np.int64)
    for b, s in enumerate(seqs):
        mat[b, :len(s)] = s
    g = _build_theta_loss_graph(meta, task_group, T, B)
    bindings = {k: v for k, v in meta.params.items() if not k.startswith("head")}
    bindings[f"head{task_group}_w"] = meta.params[f"head{task_group}_w"]
    bindings[f"head{task_group}_b"] = meta.params[f"head{task_group}_b"]
    onehot = np.zeros((B, meta.head_dims[task_group]))
    onehot[np.arange(B), labels] = 1.0
    bindings["labels"] = onehot
    for t in range(T):
        tok = np.zeros((B, meta.vocab_size))
        tok[np.arange(B), mat[:, t]] = 1.0
        bindings[f"x{t}"] = tok
        bindings[f"lm{t}"] = (lengths == t + 1).astype(float)[:, None]

    def loss_at(th):
        bindings["theta"] = th[None, :]
        return float(g.forward(bindings).data)

    theta = (np.zeros(meta.embed_dim) if theta_init is None
             else np.asarray(theta_init, dtype=np.float64).copy())
    thetas = [theta.copy()]
    cur = loss_at(theta)
    losses = [cur]
    lr_cur = lr
    lr_floor = lr * 1e-9
    for _ in range(steps):
        loss_at(theta)
        grad = g.backward()["theta"].data.reshape(-1)
        while True:
            cand = theta - lr_cur * grad
            cand_loss = loss_at(cand)
            if cand_loss <= cur or lr_cur <= lr_floor:
                break
            lr_cur *= 0.5
        if cand_loss <= cur:
            theta, cur = cand, cand_loss
        thetas.append(theta.copy())
        losses.append(cur)
    return theta, np.stack(thetas), np.array(losses)


# -- pairwise representation baseline (SVCCA + classical MDS) ---------------------


def hidden_state_matrix(model, sequences: list[list[int]], theta=None,
                        task_group=None) -> np.ndarray:
    """Hidden states over a common sequence set, rows ordered by (seq, t)."""
    from .models import rollout

    rows = []
    for s in sequences:
        hs, _ = rollout(model, s, theta=theta, task_group=task_group)
        rows.append(hs)
    return np.concatenate(rows, axis=0)


def _svd_reduce(acts: np.ndarray, dims_kept: int, var_kept: float = 0.99):
    Xc = acts - acts.mean(axis=0)
    u, s, _ = np.linalg.svd(Xc, full_matrices=False)
    nz = s > max(1e-10 * s[0], 1e-300) if s.size else np.zeros(0, dtype=bool)
    rank = int(nz.sum())
    if rank == 0:
        raise AtlasError("activation matrix has zero variance")
    energy = np.cumsum(s[:rank] ** 2) / np.sum(s[:rank] ** 2)
    k99 = int(np.searchsorted(energy, var_kept - 1e-15) + 1)
    k = min(k99, dims_kept, rank)
    if k < min(dims_kept, acts.shape[1]) and rank < min(dims_kept, acts.shape[1]):
        warnings.warn(f"rank-deficient activations: keeping {k} directions")
    return u[:, :k]


def svcca_distance(acts_a: np.ndarray, acts_b: np.ndarray, dims_kept: int = 20) -> float:
    """CCA-based dissimilarity between two activation matrices over the same
    samples: sqrt(mean over canonical pairs of 2*(1 - rho))."""
    A, B = np.asarray(acts_a, float), np.asarray(acts_b, float)
    if A.shape[0] != B.shape[0]:
        raise AtlasError("activation matrices need the same sample count")
    if dims_kept > min(A.shape[1], B.shape[1], A.shape[0]):
        raise AtlasError("dims_kept exceeds the usable dimension count")
    qa = _svd_reduce(A, dims_kept)
    qb = _svd_reduce(B, dims_kept)
    rho = np.linalg.svd(qa.T @ qb, compute_uv=False)
    rho = np.clip(rho, 0.0, 1.0)
    # correlations cannot exceed 1; values this close are numerically 1
    rho[rho > 1.0 - 1e-12] = 1.0
    r = min(qa.shape[1], qb.shape[1])
    return float(np.sqrt(np.mean(2.0 * (1.0 - rho[:r]))))


def classical_mds(distances: np.ndarray, out_dim: int) -> np.ndarray:
    """Torgerson MDS: double-center -D^2/2, eigendecompose, scale by sqrt of
    the top eigenvalues (negative eigenvalues clamp to zero with a warning)."""
    D = np.asarray(distances, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise AtlasError("distance matrix must be square")
    if not np.allclose(D, D.T, atol=1e-10):
        raise AtlasError("distance matrix must be symmetric")
    if np.any(D < 0) or not np.allclose(np.diag(D), 0.0, atol=1e-12):
        raise AtlasError("distances must be nonnegative with a zero diagonal")
    n = D.shape[0]
    J = np.eye(n) - np.ones((n, n)) / n
    Bmat = -0.5 * J @ (D * D) @ J
    evals, evecs = np.linalg.eigh(Bmat)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    top = evals[:out_dim]
    if np.any(top < -1e-8 * max(1.0, abs(evals[0]))):
        warnings.warn("distance matrix is not Euclidean-realizable; "
                      "clamping negative eigenvalues")
    top = np.clip(top, 0.0, None)
    return evecs[:, :out_dim] * np.sqrt(top)


def silhouette(embeddings: np.ndarray, labels) -> float:
    """Mean silhouette score with Euclidean distances; singletons score 0."""
    X = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise AtlasError("silhouette needs at least two clusters")
    diff = X[:, None, :] - X[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    scores = np.zeros(len(X))
    for i in range(len(X)):
        own = labels == labels[i]
        n_own = own.sum()
        if n_own == 1:
            scores[i] = 0.0
            continue
        a = dist[i][own].sum() / (n_own - 1)
        b = min(dist[i][labels == c].mean() for c in uniq if c != labels[i])
        m = max(a, b)
        scores[i] = 0.0 if m == 0 else (b - a) / m
    return float(scores.mean())


# -- CSV exports -------------------------------------------------------------------


def _write_csv(path, header: str, rows: list[str], comment: str | None) -> None:
    lines = []
    if comment:
        lines.append(f"# {comment}\n")
    lines.append(header + "\n")
    lines.extend(r + "\n" for r in rows)
    with open(path, "w") as f:
        f.writelines(lines)


def export_atlas_csv(atlas: EmbeddingAtlas, path, comment=None, top_k: int = 3) -> None:
    d = atlas.embeddings.shape[1]
    k = min(top_k, d)
    meta_keys = sorted({key for m in atlas.metadata for key in m})
    header = ",".join(["model_id"] + meta_keys
                      + [f"theta_{j}" for j in range(d)]
                      + [f"pc_{j}" for j in range(k)])
    proj = atlas.project(atlas.embeddings, k)
    rows = []
    for i, (theta, md) in enumerate(zip(atlas.embeddings, atlas.metadata)):
        cells = [str(md.get("model_id", f"base_{i}"))]
        cells += [str(md.get(key, "")) for key in meta_keys]
        cells += [f"{x:.10g}" for x in theta]
        cells += [f"{x:.10g}" for x in proj[i]]
        rows.append(",".join(cells))
    _write_csv(path, header, rows, comment)


def export_spectrum_csv(atlas: EmbeddingAtlas, path, comment=None) -> None:
    total = atlas.spectrum.sum()
    rows = []
    cum = 0.0
    for j, lam in enumerate(atlas.spectrum):
        cum += lam
        frac = cum / total if total > 0 else 0.0
        rows.append(f"{j},{lam:.10g},{frac:.10g}")
    _write_csv(path, "component,eigenvalue,cumulative_fraction", rows, comment)


def export_landscape_csv(grid: LandscapeGrid, path, comment=None) -> None:
    d = len(grid.origin)
    header = ",".join(["u", "v"] + [f"theta_{j}" for j in range(d)]
                      + ["accuracy"] + (["relative_accuracy"] if grid.relative
                                        is not None else []))
    rows = []
    for i, u in enumerate(grid.us):
        for j, v in enumerate(grid.vs):
            theta = grid.theta_at(u, v)
            cells = [f"{u:.10g}", f"{v:.10g}"]
            cells += [f"{x:.10g}" for x in theta]
            cells.append(f"{grid.accuracy[i, j]:.10g}")
            if grid.relative is not None:
                cells.append(f"{grid.relative[i, j]:.10g}")
            rows.append(",".join(cells))
    _write_csv(path, header, rows, comment)


def export_ssl_csv(thetas: np.ndarray, losses: np.ndarray, accuracies: np.ndarray,
                   path, comment=None) -> None:
    d = thetas.shape[1]
    header = ",".join(["step"] + [f"theta_{j}" for j in range(d)]
                      + ["labeled_loss", "test_accuracy"])
    rows = []
    for step in range(len(thetas)):
        cells = [str(step)] + [f"{x:.10g}" for x in thetas[step]]
        cells += [f"{losses[step]:.10g}", f"{accuracies[step]:.10g}"]
        rows.append(",".join(cells))
    _write_csv(path, header, rows, comment)
