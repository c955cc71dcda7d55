"""Fixed-point analysis of embedding-conditioned recurrent maps, line-attractor
summaries, and token-valence scoring of one-step transitions.

Approximate fixed points of h -> F(x*, h) are found by running gradient
descent with per-candidate step halving on q(h) = ||F(x*, h) - h||^2 from a
batch of candidate states, then deduplicating by a radius filter. Retained
residuals are always re-evaluated through the plain numpy step, independently
of the descent graph.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import atlas as atlas_mod
from .models import BaseModel, MetaModel, cell_step, cell_step_graph, rollout
from .numgrad import Graph


class DynamicsError(Exception):
    pass


@dataclass
class FixedPointSet:
    points: np.ndarray          # (K, H)
    residuals: np.ndarray       # (K,) independently re-evaluated ||F(x*,h)-h||
    theta: np.ndarray | None
    x_star: np.ndarray
    candidate_index: np.ndarray  # (K,) provenance: which candidate converged here
    descent_steps: np.ndarray    # (K,)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class AttractorSummary:
    axis: np.ndarray            # (H,) principal axis, oriented by readout margin
    extent: float               # spread of projections along the axis
    thickness: float            # sqrt(mean variance over off-axis components)
    positions: np.ndarray       # (K,) sorted projections along the axis
    readouts: np.ndarray        # (K, C) head logits, ordered along the axis
    margins: np.ndarray         # (K,) scalar margins, same order


def readout_margin(logits: np.ndarray) -> np.ndarray:
    """Scalar decision margin per row: positive minus negative logit for
    binary heads, distance from the uniform logit vector otherwise."""
    logits = np.atleast_2d(logits)
    if logits.shape[-1] == 2:
        return logits[:, 1] - logits[:, 0]
    return np.linalg.norm(logits - logits.mean(axis=-1, keepdims=True), axis=-1)


def _meta_input(model, theta: np.ndarray | None, x_star: np.ndarray) -> np.ndarray:
    if isinstance(model, MetaModel):
        if theta is None:
            raise DynamicsError("meta models need an embedding vector")
        return np.concatenate([np.asarray(theta, float), np.asarray(x_star, float)])
    return np.asarray(x_star, float)


def collect_candidates(model, theta, sequences: list[list[int]],
                       samples_per_seq: int, task_group: int | None = None,
                       seed: int = 0) -> np.ndarray:
    """Hidden states subsampled uniformly across time from rollouts."""
    if not sequences:
        raise DynamicsError("empty candidate batch")
    rng = np.random.default_rng(seed)
    rows = []
    for seq in sequences:
        hs, _ = rollout(model, seq, theta=theta, task_group=task_group)
        take = rng.integers(0, len(hs), size=samples_per_seq)
        rows.append(hs[take])
    return np.concatenate(rows, axis=0)


def _build_q_graph(model, n: int) -> Graph:
    g = Graph()
    refs = {name: g.leaf(name, arr.shape, param=False)
            for name, arr in model.params.items()
            if not name.startswith(("head", "embed", "stem", "w_out", "b_out",
                                    "w_theta"))}
    h = g.leaf("h", (n, model.hidden_dim))
    cell_in = g.leaf("u", (n, _cell_input_dim(model)), param=False)
    h2 = cell_step_graph(g, model.cell_kind, refs, cell_in, h)
    q = g.squared_l2(g.sub(h2, h), axis=1)
    g.mark("q", q)
    g.output(g.reduce_sum(q))
    return g


def _cell_input_dim(model) -> int:
    if isinstance(model, MetaModel):
        return model.input_dim + model.embed_dim
    return model.input_dim


def find_fixed_points(model, theta, x_star: np.ndarray | None,
                      candidates: np.ndarray, tol: float = 1e-4,
                      max_steps: int = 5000, dedup_radius: float = 1e-2,
                      lr: float = 0.2) -> FixedPointSet:
    """Descend q(h) from each candidate; retain points with re-evaluated
    residual <= tol; deduplicate greedily keeping the lowest residual in
    each ball of `dedup_radius`."""
    if tol <= 0:
        raise DynamicsError("tol must be positive")
    if model.cell_kind == "residual_mlp":
        raise DynamicsError("fixed-point analysis applies to recurrent cells")
    if x_star is None:
        x_star = np.zeros(model.input_dim)
    candidates = np.atleast_2d(np.asarray(candidates, float))
    n = candidates.shape[0]
    u = _meta_input(model, theta, x_star)
    if n == 0:
        return FixedPointSet(np.zeros((0, model.hidden_dim)), np.zeros(0),
                             None if theta is None else np.asarray(theta, float),
                             x_star, np.zeros(0, int), np.zeros(0, int))
    g = _build_q_graph(model, n)
    bindings = {k: v for k, v in model.params.items()
                if not k.startswith(("head", "embed", "stem", "w_out", "b_out",
                                     "w_theta"))}
    bindings["u"] = np.tile(u, (n, 1))

    h = candidates.copy()
    bindings["h"] = h
    g.forward(bindings)
    q = g.value("q").copy()
    # stop comfortably inside the tolerance: descending further would slide
    # candidates along slow manifolds and collapse their diversity
    stop2 = (0.9 * tol) ** 2
    step_sizes = np.full(n, lr)
    steps_used = np.zeros(n, dtype=int)
    active = (q > stop2)
    for _ in range(max_steps):
        if not active.any():
            break
        bindings["h"] = h
        g.forward(bindings)
        grad = g.backward()["h"].data
        cand = h - step_sizes[:, None] * grad
        bindings["h"] = cand
        g.forward(bindings)
        q_new = g.value("q")
        improved = active & (q_new < q)
        h[improved] = cand[improved]
        q[improved] = q_new[improved]
        steps_used[active] += 1
        step_sizes[improved] *= 1.1
        stuck = active & ~improved
        step_sizes[stuck] *= 0.5
        active = (q > stop2) & (step_sizes > 1e-16)

    # independent residual re-evaluation through the plain numpy step
    theta_arr = None if theta is None else np.asarray(theta, float)
    stepped = cell_step(model, np.tile(u, (n, 1)), h)
    residuals = np.linalg.norm(stepped - h, axis=1)
    keep = residuals <= tol
    pts, res = h[keep], residuals[keep]
    idx = np.nonzero(keep)[0]
    used = steps_used[keep]

    order = np.argsort(res, kind="stable")
    kept_rows: list[int] = []
    for r in order:
        if all(np.linalg.norm(pts[r] - pts[k]) > dedup_radius for k in kept_rows):
            kept_rows.append(r)
    kept_rows = np.array(kept_rows, dtype=int)
    if len(kept_rows):
        return FixedPointSet(pts[kept_rows], res[kept_rows], theta_arr, x_star,
                             idx[kept_rows], used[kept_rows])
    return FixedPointSet(np.zeros((0, model.hidden_dim)), np.zeros(0), theta_arr,
                         x_star, np.zeros(0, int), np.zeros(0, int))


def _head_logits(model, points: np.ndarray, task_group: int | None) -> np.ndarray:
    if isinstance(model, MetaModel):
        if task_group is None:
            task_group = next(iter(model.head_dims))
        w, b = model.head(task_group)
    else:
        w, b = model.params["w_out"], model.params["b_out"]
    return np.atleast_2d(points) @ w + b


def summarize_attractor(fps: FixedPointSet, model,
                        task_group: int | None = None) -> AttractorSummary:
    """PCA summary of the fixed-point cloud: first component axis, extent along
    it, RMS off-axis thickness, and readouts ordered along the axis. The axis
    is oriented so the readout margin tends to increase with position."""
    if len(fps) < 2:
        raise DynamicsError("need at least two fixed points to summarize")
    pca = atlas_mod.fit_pca(fps.points)
    axis = pca.axes[0].copy()
    positions = (fps.points - pca.mean) @ axis
    off = pca.spectrum[1:]
    thickness = float(np.sqrt(off.mean())) if len(off) else 0.0
    extent = float(positions.max() - positions.min())
    logits = _head_logits(model, fps.points, task_group)
    margins = readout_margin(logits)
    if positions.std() > 0 and margins.std() > 0:
        if np.corrcoef(positions, margins)[0, 1] < 0:
            axis = -axis
            positions = -positions
    order = np.argsort(positions, kind="stable")
    return AttractorSummary(axis, extent, thickness, positions[order],
                            logits[order], margins[order])


def neutral_fixed_point(fps: FixedPointSet, model,
                        task_group: int | None = None) -> np.ndarray:
    """The retained fixed point whose readout is closest to decision-neutral;
    ties break toward the lower residual."""
    if len(fps) == 0:
        raise DynamicsError("empty fixed-point set")
    margins = np.abs(readout_margin(_head_logits(model, fps.points, task_group)))
    best = np.lexsort((fps.residuals, margins))[0]
    return fps.points[best]


def word_score(meta: MetaModel, theta: np.ndarray, h_star: np.ndarray,
               w_pos: list[int], w_neg: list[int], w_neu: list[int],
               task_group: int | None = None) -> float:
    """Sum of one-step readout margins from h* over the positive set, minus
    the negative set, minus absolute margins over the neutral set."""
    if task_group is None:
        task_group = next(iter(meta.head_dims))
    if meta.head_dims[task_group] != 2:
        raise DynamicsError("word scores need a binary readout head")
    theta = np.asarray(theta, float)

    def margins(tokens):
        if not tokens:
            return np.zeros(0)
        toks = np.asarray(tokens)
        if toks.min() < 0 or toks.max() >= meta.vocab_size:
            raise DynamicsError("token out of vocabulary")
        emb = meta.params["embed"][toks]
        x = np.concatenate([np.broadcast_to(theta, (len(toks), len(theta))), emb],
                           axis=1)
        h = cell_step(meta, x, np.broadcast_to(h_star, (len(toks), len(h_star))))
        return readout_margin(_head_logits(meta, h, task_group))

    return float(margins(w_pos).sum() - margins(w_neg).sum()
                 - np.abs(margins(w_neu)).sum())


@dataclass
class ScoreGrid:
    origin: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    us: np.ndarray
    vs: np.ndarray
    scores: np.ndarray      # (nu, nv); NaN marks nodes with no fixed point

    def theta_at(self, u: float, v: float) -> np.ndarray:
        return self.origin + u * self.u_axis + v * self.v_axis


def score_map(meta: MetaModel, task_group: int, base_thetas: np.ndarray,
              sequences: list[list[int]], token_sets: tuple[list, list, list],
              plane=None, grid: tuple[int, int] = (7, 7),
              extent_scale: float = 1.5, samples_per_seq: int = 4,
              tol: float = 1e-4, max_steps: int = 5000,
              dedup_radius: float = 1e-2, seed: int = 0) -> ScoreGrid:
    """Word score over a plane in embedding space: per node, find fixed points
    of the node's conditioned map, take the neutral one, and score one-step
    transitions. Nodes where no fixed point survives are marked NaN."""
    base_thetas = np.asarray(base_thetas, float)
    if plane is None:
        origin, u_axis, v_axis = atlas_mod.plane_from_pca(atlas_mod.fit_pca(base_thetas))
    else:
        origin, u_axis, v_axis = (np.asarray(p, float) for p in plane)
    rel = base_thetas - origin
    base_u = rel @ u_axis / (u_axis @ u_axis)
    base_v = rel @ v_axis / (v_axis @ v_axis)

    def _coords(vals, count):
        lo, hi = float(vals.min()), float(vals.max())
        c, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        half = half * extent_scale if half > 0 else 1.0
        return np.linspace(c - half, c + half, count)

    us, vs = _coords(base_u, grid[0]), _coords(base_v, grid[1])
    w_pos, w_neg, w_neu = token_sets
    scores = np.full(grid, np.nan)
    for i, u in enumerate(us):
        for j, v in enumerate(vs):
            theta = origin + u * u_axis + v * v_axis
            cands = collect_candidates(meta, theta, sequences, samples_per_seq,
                                       task_group=task_group, seed=seed)
            fps = find_fixed_points(meta, theta, None, cands, tol=tol,
                                    max_steps=max_steps, dedup_radius=dedup_radius)
            if len(fps) == 0:
                continue
            h_star = neutral_fixed_point(fps, meta, task_group)
            scores[i, j] = word_score(meta, theta, h_star, w_pos, w_neg, w_neu,
                                      task_group)
    return ScoreGrid(origin, u_axis, v_axis, us, vs, scores)


def spearman(x, y) -> float:
    """Spearman rank correlation (average ranks are not needed here; values
    from continuous descent are almost surely distinct)."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    rx = np.argsort(np.argsort(x)).astype(float)
    ry = np.argsort(np.argsort(y)).astype(float)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    return float((rx * ry).sum() / denom) if denom > 0 else 0.0


# -- CSV exports -------------------------------------------------------------------


def export_fixed_points_csv(fps: FixedPointSet, model, path, comment=None,
                            task_group: int | None = None) -> None:
    """Rows: index, residual, top-3 PCA projections of the cloud, margin."""
    k = min(3, fps.points.shape[1] if len(fps) else 0)
    if len(fps) >= 2:
        pca = atlas_mod.fit_pca(fps.points)
        proj = pca.project(fps.points, k)
    else:
        proj = np.zeros((len(fps), k))
    margins = (readout_margin(_head_logits(model, fps.points, task_group))
               if len(fps) else np.zeros(0))
    lines = []
    if comment:
        lines.append(f"# {comment}\n")
    header = ["index", "residual"] + [f"pc_{j}" for j in range(k)] + ["margin"]
    lines.append(",".join(header) + "\n")
    for i in range(len(fps)):
        cells = [str(i), f"{fps.residuals[i]:.10g}"]
        cells += [f"{proj[i, j]:.10g}" for j in range(k)]
        cells.append(f"{margins[i]:.10g}")
        lines.append(",".join(cells) + "\n")
    with open(path, "w") as f:
        f.writelines(lines)


def export_score_map_csv(grid: ScoreGrid, path, comment=None) -> None:
    """Missing nodes export as empty score cells and read back as NaN."""
    d = len(grid.origin)
    lines = []
    if comment:
        lines.append(f"# {comment}\n")
    header = ["u", "v"] + [f"theta_{j}" for j in range(d)] + ["score"]
    lines.append(",".join(header) + "\n")
    for i, u in enumerate(grid.us):
        for j, v in enumerate(grid.vs):
            theta = grid.theta_at(u, v)
            s = grid.scores[i, j]
            cells = [f"{u:.10g}", f"{v:.10g}"]
            cells += [f"{x:.10g}" for x in theta]
            cells.append("" if np.isnan(s) else f"{s:.10g}")
            lines.append(",".join(cells) + "\n")
    with open(path, "w") as f:
        f.writelines(lines)


def load_score_map_csv(path) -> np.ndarray:
    """Score column of an exported score map; empty cells come back as NaN."""
    rows = []
    with open(path) as f:
        for line in f:
            if line.startswith("#") or line.startswith("u,"):
                continue
            cell = line.rstrip("\n").split(",")[-1]
            rows.append(float(cell) if cell else np.nan)
    return np.array(rows)
