"""Base-model task training and the joint meta-model / state-map / embedding
optimization.

The joint loop follows the sampled-model scheme: each step draws one base
model uniformly, draws a minibatch from that model's unlabeled split, rolls
the base out without gradients, rolls the meta-model out at that model's
embedding, and takes one optimizer step on (meta params, that model's state
map, that model's embedding) against hidden-trajectory + weighted output
losses. Ragged sequence lengths are handled by masking inside a cached
unrolled graph, so per-sequence time averages stay exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import models
from .models import (
    BaseModel,
    MetaModel,
    StateMap,
    apply_state_map,
    cell_step_graph,
    declare_params,
    init_meta_model,
    init_state_map,
    rollout_batch,
)
from .numgrad import Graph
from .tasks import SequenceDataset, bag_of_tokens

OPTIMIZERS = ("adam_decoupled_wd", "sgd_nesterov")
HIDDEN_METRICS = ("L2_squared", "L1")
OUTPUT_DIVERGENCES = ("squared_L2_on_logits", "KL_on_softmax")


class TrainerError(Exception):
    pass


class NumericError(TrainerError):
    """A loss or gradient stopped being finite."""


@dataclass
class TrainConfig:
    optimizer: str = "adam_decoupled_wd"
    lr: float = 1e-3
    cosine: bool = True
    cosine_freq: float = 7.0 / 32.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 0            # base-model training
    max_steps: int = 0         # meta training
    batch_size: int = 16
    lam: float = 1.0           # output-loss weight
    hidden_metric: str = "L2_squared"
    output_divergence: str = "KL_on_softmax"
    normalize_hidden_by_dim: bool = True
    theta_lr: float | None = None  # defaults to the shared lr
    seed: int = 0

    def validate(self):
        if self.optimizer not in OPTIMIZERS:
            raise TrainerError(f"unknown optimizer {self.optimizer!r}")
        if self.hidden_metric not in HIDDEN_METRICS:
            raise TrainerError(f"unknown hidden metric {self.hidden_metric!r}")
        if self.output_divergence not in OUTPUT_DIVERGENCES:
            raise TrainerError(f"unknown divergence {self.output_divergence!r}")
        if self.lr <= 0:
            raise TrainerError("learning rate must be positive")
        if self.lam < 0:
            raise TrainerError("output-loss weight must be >= 0")
        if self.batch_size < 1:
            raise TrainerError("batch_size must be >= 1")


def lr_multiplier(cfg: TrainConfig, step: int, total: int) -> float:
    """Cosine annealing sweeping `cosine_freq` of a full cycle over the run."""
    if not cfg.cosine or total <= 0:
        return 1.0
    return 0.5 * (1.0 + np.cos(2.0 * np.pi * cfg.cosine_freq * step / total))


# -- optimizers ----------------------------------------------------------------


class Optimizer:
    """Adam with decoupled weight decay, or Nesterov SGD, over named arrays.

    Each step updates only the supplied subset of parameters; moment buffers
    and bias-correction counters are tracked per parameter so that sparsely
    updated parameters (state maps, embeddings) see consistent statistics.
    """

    def __init__(self, handles: dict[str, np.ndarray], cfg: TrainConfig,
                 no_decay: set[str] = frozenset()):
        self.handles = handles
        self.cfg = cfg
        self.no_decay = set(no_decay)
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def step(self, grads: dict[str, np.ndarray], lr: float,
             theta_lr: float | None = None) -> None:
        cfg = self.cfg
        for name, g in grads.items():
            p = self.handles[name]
            if g.shape != p.shape:
                g = g.reshape(p.shape)
            eff_lr = lr
            if theta_lr is not None and name.startswith("theta"):
                eff_lr = theta_lr
            if cfg.optimizer == "adam_decoupled_wd":
                b1, b2 = cfg.betas
                m = self._m.setdefault(name, np.zeros_like(p))
                v = self._v.setdefault(name, np.zeros_like(p))
                t = self._t.get(name, 0) + 1
                self._t[name] = t
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * (g * g)
                mhat = m / (1 - b1 ** t)
                vhat = v / (1 - b2 ** t)
                p -= eff_lr * mhat / (np.sqrt(vhat) + cfg.eps)
                if cfg.weight_decay and name not in self.no_decay:
                    p -= eff_lr * cfg.weight_decay * p
            else:
                mu = cfg.momentum
                buf = self._m.setdefault(name, np.zeros_like(p))
                buf *= mu
                buf += g
                p -= eff_lr * (g + mu * buf)
                if cfg.weight_decay and name not in self.no_decay:
                    p -= eff_lr * cfg.weight_decay * p


# -- reference (numpy) losses ---------------------------------------------------


def _metric_rows(diff: np.ndarray, metric: str) -> np.ndarray:
    if metric == "L1":
        return np.abs(diff).sum(axis=-1)
    return (diff * diff).sum(axis=-1)


def hidden_loss(meta_traj: np.ndarray, base_traj: np.ndarray, vmap: StateMap,
                metric: str = "L2_squared", normalize_by_dim: bool = False,
                residual: bool = False) -> float:
    """Time-mean distance between mapped meta hidden states and base hidden
    states. The residual family uses one map per block and averages over
    feature coordinates as well."""
    T = len(meta_traj)
    if len(base_traj) != T:
        raise TrainerError(f"trajectory length mismatch {T} vs {len(base_traj)}")
    if T < 1:
        raise TrainerError("empty trajectory")
    total = 0.0
    dim = base_traj[0].shape[-1]
    for t in range(T):
        block = t if residual else 0
        mapped = apply_state_map(vmap, meta_traj[t], block=block)
        total += _metric_rows(mapped - base_traj[t], metric)
    total /= T
    if residual or normalize_by_dim:
        total /= dim
    return float(total)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kl_from_logits(base_logits: np.ndarray, meta_logits: np.ndarray) -> np.ndarray:
    """Row-wise KL(softmax(base) || softmax(meta))."""
    p = _softmax(base_logits)
    zb = base_logits - base_logits.max(axis=-1, keepdims=True)
    lp = zb - np.log(np.exp(zb).sum(axis=-1, keepdims=True))
    zm = meta_logits - meta_logits.max(axis=-1, keepdims=True)
    lq = zm - np.log(np.exp(zm).sum(axis=-1, keepdims=True))
    return (p * (lp - lq)).sum(axis=-1)


def output_loss(meta_outputs: np.ndarray, base_outputs: np.ndarray,
                divergence: str = "KL_on_softmax") -> float:
    """Time-mean divergence between per-step meta and base outputs."""
    T = len(meta_outputs)
    if len(base_outputs) != T:
        raise TrainerError("output trajectory length mismatch")
    mo, bo = np.asarray(meta_outputs), np.asarray(base_outputs)
    if mo.shape != bo.shape:
        raise TrainerError(
            f"output shape mismatch {mo.shape} vs {bo.shape}; check that the "
            "meta readout head matches the base model's task group")
    if divergence == "KL_on_softmax":
        return float(kl_from_logits(bo, mo).mean())
    return float(((mo - bo) ** 2).sum(axis=-1).mean())


# -- joint loss graphs -----------------------------------------------------------


class _LossGraphCache:
    """Unrolled joint-loss graphs keyed by structural signature."""

    def __init__(self, meta: MetaModel, cfg: TrainConfig):
        self.meta = meta
        self.cfg = cfg
        self._graphs: dict[tuple, Graph] = {}

    def recurrent(self, T: int, B: int, base_hidden: int, task_group: int) -> Graph:
        key = ("rec", T, B, base_hidden, task_group)
        g = self._graphs.get(key)
        if g is None:
            g = _build_recurrent_loss_graph(self.meta, self.cfg, T, B,
                                            base_hidden, task_group)
            self._graphs[key] = g
        return g

    def residual(self, B: int, base_hidden: int, task_group: int) -> Graph:
        key = ("res", B, base_hidden, task_group)
        g = self._graphs.get(key)
        if g is None:
            g = _build_residual_loss_graph(self.meta, self.cfg, B,
                                           base_hidden, task_group)
            self._graphs[key] = g
        return g


def _build_recurrent_loss_graph(meta: MetaModel, cfg: TrainConfig, T: int, B: int,
                                base_hidden: int, task_group: int) -> Graph:
    g = Graph()
    refs = declare_params(g, {k: v for k, v in meta.params.items()
                              if not k.startswith("head")})
    head_w = g.leaf(f"head{task_group}_w", meta.params[f"head{task_group}_w"].shape)
    head_b = g.leaf(f"head{task_group}_b", meta.params[f"head{task_group}_b"].shape)
    v_w = g.leaf("vmap_w0", (meta.hidden_dim, base_hidden))
    v_b = g.leaf("vmap_b0", (base_hidden,))
    theta = g.leaf("theta", (1, meta.embed_dim))
    ones = g.const(np.ones((B, 1)))
    theta_rows = g.matmul(ones, theta)
    h = g.const(np.zeros((B, meta.hidden_dim)))
    hidden_terms, out_terms = [], []
    kl = cfg.output_divergence == "KL_on_softmax"
    for t in range(T):
        x = g.leaf(f"x{t}", (B, meta.vocab_size), param=False)
        inp = g.concat(theta_rows, g.matmul(x, refs["embed"]))
        h = cell_step_graph(g, meta.cell_kind, refs, inp, h)
        mapped = g.add(g.matmul(h, v_w), v_b)
        diff = g.sub(mapped, g.leaf(f"hb{t}", (B, base_hidden), param=False))
        rows = (g.l1(diff, axis=1) if cfg.hidden_metric == "L1"
                else g.squared_l2(diff, axis=1))
        wh = g.leaf(f"wh{t}", (B,), param=False)
        hidden_terms.append(g.reduce_sum(g.mul(rows, wh)))
        logits = g.add(g.matmul(h, head_w), head_b)
        wo = g.leaf(f"wo{t}", (B,), param=False)
        if kl:
            pb = g.leaf(f"pb{t}", (B, meta.head_dims[task_group]), param=False)
            ce = g.affine(g.reduce_sum(g.mul(g.log_softmax(logits), pb), axis=1), -1.0)
            out_terms.append(g.reduce_sum(g.mul(ce, wo)))
        else:
            ob = g.leaf(f"ob{t}", (B, meta.head_dims[task_group]), param=False)
            out_terms.append(g.reduce_sum(g.mul(g.squared_l2(g.sub(logits, ob), axis=1), wo)))
    hidden_total = hidden_terms[0]
    for term in hidden_terms[1:]:
        hidden_total = g.add(hidden_total, term)
    out_total = out_terms[0]
    for term in out_terms[1:]:
        out_total = g.add(out_total, term)
    if kl:
        out_total = g.add(out_total, g.leaf("kl_const", (), param=False))
    g.mark("hidden_loss", hidden_total)
    g.mark("output_loss", out_total)
    g.output(g.add(hidden_total, g.affine(out_total, cfg.lam)))
    return g


def _build_residual_loss_graph(meta: MetaModel, cfg: TrainConfig, B: int,
                               base_hidden: int, task_group: int) -> Graph:
    if base_hidden != meta.hidden_dim:
        raise TrainerError("residual family requires meta hidden dim == base hidden dim")
    g = Graph()
    refs = declare_params(g, {k: v for k, v in meta.params.items()
                              if not k.startswith("head")})
    head_w = g.leaf(f"head{task_group}_w", meta.params[f"head{task_group}_w"].shape)
    head_b = g.leaf(f"head{task_group}_b", meta.params[f"head{task_group}_b"].shape)
    theta = g.leaf("theta", (1, meta.embed_dim))
    ones = g.const(np.ones((B, 1)))
    theta_rows = g.matmul(ones, theta)
    feat = g.leaf("feat", (B, meta.input_dim), param=False)
    h = g.add(g.matmul(feat, refs["stem_w"]), refs["stem_b"])
    nb = meta.num_blocks
    hidden_terms, out_terms = [], []
    kl = cfg.output_divergence == "KL_on_softmax"
    whid = 1.0 / (B * nb * base_hidden)
    for t in range(nb):
        h = cell_step_graph(g, "residual_mlp", refs, None, h, block=t,
                            theta_rows=theta_rows)
        v_w = g.leaf(f"vmap_w{t}", (meta.hidden_dim, base_hidden))
        v_b = g.leaf(f"vmap_b{t}", (base_hidden,))
        mapped = g.add(g.matmul(h, v_w), v_b)
        diff = g.sub(mapped, g.leaf(f"hb{t}", (B, base_hidden), param=False))
        rows = (g.l1(diff, axis=1) if cfg.hidden_metric == "L1"
                else g.squared_l2(diff, axis=1))
        hidden_terms.append(g.affine(g.reduce_sum(rows), whid))
        if t < nb - 1:
            # feature stream: unmapped per-coordinate squared distance
            fd = g.sub(h, g.leaf(f"fb{t}", (B, base_hidden), param=False))
            out_terms.append(g.affine(g.reduce_sum(g.mul(fd, fd)),
                                      1.0 / (B * nb * base_hidden)))
    logits = g.add(g.matmul(h, head_w), head_b)
    C = meta.head_dims[task_group]
    if kl:
        pb = g.leaf("pb", (B, C), param=False)
        ce = g.affine(g.reduce_sum(g.mul(g.log_softmax(logits), pb)), -1.0 / (B * nb))
        out_terms.append(g.add(ce, g.leaf("kl_const", (), param=False)))
    else:
        ob = g.leaf("ob", (B, C), param=False)
        out_terms.append(g.affine(g.squared_l2(g.sub(logits, ob)), 1.0 / (B * nb)))
    hidden_total = hidden_terms[0]
    for term in hidden_terms[1:]:
        hidden_total = g.add(hidden_total, term)
    out_total = out_terms[0]
    for term in out_terms[1:]:
        out_total = g.add(out_total, term)
    g.mark("hidden_loss", hidden_total)
    g.mark("output_loss", out_total)
    g.output(g.add(hidden_total, g.affine(out_total, cfg.lam)))
    return g


def _pad_batch(sequences: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Pad a ragged token batch with token 0; returns (B, T) ids and lengths."""
    B = len(sequences)
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    T = int(lengths.max())
    mat = np.zeros((B, T), dtype=np.int64)
    for b, s in enumerate(sequences):
        mat[b, :len(s)] = s
    return mat, lengths


def _onehot(ids: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((len(ids), width))
    out[np.arange(len(ids)), ids] = 1.0
    return out


def meta_emulation_losses(meta: MetaModel, base: BaseModel, vmap: StateMap,
                          theta: np.ndarray, sequences: list[list[int]],
                          cfg: TrainConfig) -> tuple[float, float, float]:
    """Reference evaluation of (hidden, output, total) losses for one batch,
    computed with plain rollouts rather than the training graph."""
    normalize = cfg.normalize_hidden_by_dim
    htot = otot = 0.0
    if base.cell_kind == "residual_mlp":
        feats = sequences  # already features for the residual family
        for f in feats:
            hs_b, outs_b = models.rollout(base, f)
            hs_m, outs_m = models.rollout(meta, f, theta=theta,
                                          task_group=base.task_group)
            htot += hidden_loss(hs_m, hs_b, vmap, cfg.hidden_metric, residual=True)
            nb = base.num_blocks
            terms = []
            for t in range(nb - 1):
                d = outs_m[t] - outs_b[t]
                terms.append(float((d * d).sum()) / base.hidden_dim)
            if cfg.output_divergence == "KL_on_softmax":
                terms.append(float(kl_from_logits(outs_b[-1][None, :],
                                                  outs_m[-1][None, :])[0]))
            else:
                d = outs_m[-1] - outs_b[-1]
                terms.append(float((d * d).sum()))
            otot += sum(terms) / nb
        n = len(feats)
    else:
        for seq in sequences:
            hs_b, logits_b = models.rollout(base, seq)
            hs_m, logits_m = models.rollout(meta, seq, theta=theta,
                                            task_group=base.task_group)
            htot += hidden_loss(hs_m, hs_b, vmap, cfg.hidden_metric,
                                normalize_by_dim=normalize)
            otot += output_loss(logits_m, logits_b, cfg.output_divergence)
        n = len(sequences)
    htot /= n
    otot /= n
    return htot, otot, htot + cfg.lam * otot


# -- base-model training ---------------------------------------------------------


def _build_base_task_graph(model: BaseModel, T: int, B: int) -> Graph:
    g = Graph()
    refs = declare_params(g, model.params)
    if model.cell_kind == "residual_mlp":
        feat = g.leaf("feat", (B, model.input_dim), param=False)
        h = g.add(g.matmul(feat, refs["stem_w"]), refs["stem_b"])
        for t in range(model.num_blocks):
            h = cell_step_graph(g, "residual_mlp", refs, None, h, block=t)
        h_last = h
    else:
        h = g.const(np.zeros((B, model.hidden_dim)))
        parts = []
        for t in range(T):
            x = g.leaf(f"x{t}", (B, model.vocab_size), param=False)
            h = cell_step_graph(g, model.cell_kind, refs, g.matmul(x, refs["embed"]), h)
            lm = g.leaf(f"lm{t}", (B, 1), param=False)
            parts.append(g.mul(h, lm))
        h_last = parts[0]
        for p in parts[1:]:
            h_last = g.add(h_last, p)
    logits = g.add(g.matmul(h_last, refs["w_out"]), refs["b_out"])
    onehot = g.leaf("labels", (B, model.output_dim), param=False)
    g.output(g.reduce_mean(g.softmax_log_loss(logits, onehot)))
    return g


def model_accuracy(model: BaseModel, ds: SequenceDataset, split: str = "test") -> float:
    idxs = ds.indices(split)
    if not idxs:
        raise TrainerError(f"empty split {split!r}")
    seqs, labels = ds.subset(idxs)
    if model.cell_kind == "residual_mlp":
        feats = bag_of_tokens(ds, idxs)
        _, outs = models.rollout(model, feats)
        logits = outs[-1]
    else:
        logits = models.final_logits(model, seqs)
    return float((logits.argmax(axis=1) == labels).mean())


def train_base(model: BaseModel, ds: SequenceDataset, cfg: TrainConfig,
               subfraction: float = 1.0) -> tuple[BaseModel, list[float]]:
    """Minibatch training of one base model on its base_train share (optionally
    a leading sub-fraction of it). Returns the model and per-epoch test accuracy."""
    cfg.validate()
    idxs = ds.base_train_subset(subfraction)
    if len(ds.indices("base_train")) == 0:
        raise TrainerError("dataset has no base_train split")
    if not idxs:
        raise TrainerError("base_train sub-fraction selected zero examples")
    rng = np.random.default_rng(cfg.seed)
    handles = dict(model.params)
    opt = Optimizer(handles, cfg)
    graphs: dict[tuple, Graph] = {}
    n_batches = int(np.ceil(len(idxs) / cfg.batch_size))
    total_steps = max(1, cfg.epochs * n_batches)
    acc_curve: list[float] = []
    step = 0
    is_residual = model.cell_kind == "residual_mlp"
    feats_all = bag_of_tokens(ds, idxs) if is_residual else None
    for _ in range(cfg.epochs):
        order = rng.permutation(len(idxs))
        for k in range(n_batches):
            rows = order[k * cfg.batch_size:(k + 1) * cfg.batch_size]
            batch_idx = [idxs[r] for r in rows]
            labels = np.array([ds.labels[i] for i in batch_idx])
            B = len(rows)
            bindings = dict(model.params)
            bindings["labels"] = _onehot(labels, model.output_dim)
            if is_residual:
                key = (0, B)
                g = graphs.get(key)
                if g is None:
                    g = graphs[key] = _build_base_task_graph(model, 0, B)
                bindings["feat"] = feats_all[rows]
            else:
                seqs = [ds.sequences[i] for i in batch_idx]
                mat, lengths = _pad_batch(seqs)
                T = mat.shape[1]
                key = (T, B)
                g = graphs.get(key)
                if g is None:
                    g = graphs[key] = _build_base_task_graph(model, T, B)
                for t in range(T):
                    bindings[f"x{t}"] = _onehot(mat[:, t], model.vocab_size)
                    bindings[f"lm{t}"] = (lengths == t + 1).astype(float)[:, None]
            loss = float(g.forward(bindings).data)
            if not np.isfinite(loss):
                raise NumericError(f"base training loss became {loss}")
            grads = {k2: v.data for k2, v in g.backward().items()}
            opt.step(grads, cfg.lr * lr_multiplier(cfg, step, total_steps))
            step += 1
        acc_curve.append(model_accuracy(model, ds))
    return model, acc_curve


# -- meta training (the joint loop) ----------------------------------------------


@dataclass
class MetaTrainState:
    meta: MetaModel
    state_maps: list[StateMap]
    embeddings: np.ndarray  # (N, d), row n is theta_n
    step: int = 0
    history: list[tuple[int, int, float, float, float]] = field(default_factory=list)
    base_ids: list[str] = field(default_factory=list)


def init_meta_state(bases: list[BaseModel], meta_cfg: dict, seed: int) -> MetaTrainState:
    """Build the meta model, one state map per base, and zero embeddings.

    meta_cfg keys: hidden_dim, input_dim, embed_dim (optional overrides);
    hidden defaults to twice the largest base hidden dim for recurrent
    families and to the shared base hidden dim for the residual family.
    """
    if not bases:
        raise TrainerError("need at least one base model")
    kinds = {b.cell_kind for b in bases}
    residual = "residual_mlp" in kinds
    if residual and kinds != {"residual_mlp"}:
        raise TrainerError("cannot mix residual and recurrent base models")
    vocab = bases[0].vocab_size
    if any(b.vocab_size != vocab for b in bases):
        raise TrainerError("base models must share the input vocabulary")
    if residual:
        hiddens = {b.hidden_dim for b in bases}
        blocks = {b.num_blocks for b in bases}
        feats = {b.input_dim for b in bases}
        if len(hiddens) != 1 or len(blocks) != 1 or len(feats) != 1:
            raise TrainerError("residual bases must share widths and block count")
        hidden_dim = meta_cfg.get("hidden_dim", bases[0].hidden_dim)
        if hidden_dim != bases[0].hidden_dim:
            raise TrainerError("residual family requires matching meta hidden dim")
        input_dim = bases[0].input_dim
        cell = "residual_mlp"
        num_blocks = bases[0].num_blocks
    else:
        cell = meta_cfg.get("cell_kind", "gru")
        hidden_dim = meta_cfg.get("hidden_dim", 2 * max(b.hidden_dim for b in bases))
        input_dim = meta_cfg.get("input_dim", max(b.input_dim for b in bases))
        num_blocks = 0
    embed_dim = meta_cfg.get("embed_dim", 16)
    head_dims: dict[int, int] = {}
    for b in bases:
        if head_dims.setdefault(b.task_group, b.output_dim) != b.output_dim:
            raise TrainerError(f"task group {b.task_group} has conflicting output dims")
    meta = init_meta_model(cell, vocab, input_dim, hidden_dim, embed_dim,
                           head_dims, seed=seed, num_blocks=num_blocks)
    maps = [init_state_map(hidden_dim, b.hidden_dim,
                           num_blocks if residual else 0, seed=seed + 1 + i)
            for i, b in enumerate(bases)]
    thetas = np.zeros((len(bases), embed_dim))
    ids = [b.info.get("model_id", f"base_{i}") for i, b in enumerate(bases)]
    return MetaTrainState(meta, maps, thetas, base_ids=ids)


class MetaTrainer:
    """Holds the graph cache and parameter handles for one joint run."""

    def __init__(self, state: MetaTrainState, bases: list[BaseModel],
                 datasets: list[SequenceDataset], cfg: TrainConfig):
        cfg.validate()
        if len(datasets) != len(bases):
            raise TrainerError("need one dataset per base model")
        for ds in datasets:
            if not ds.indices("meta_unlabeled"):
                raise TrainerError("dataset has no meta_unlabeled split")
        self.state = state
        self.bases = bases
        self.datasets = datasets
        self.cfg = cfg
        self.cache = _LossGraphCache(state.meta, cfg)
        self.rng = np.random.default_rng(cfg.seed)
        self._residual = bases[0].cell_kind == "residual_mlp"
        self._feats = ([bag_of_tokens(ds, ds.indices("meta_unlabeled"))
                        for ds in datasets] if self._residual else None)
        handles: dict[str, np.ndarray] = dict(state.meta.params)
        no_decay = set()
        for i, vm in enumerate(state.state_maps):
            for t in range(len(vm.weights)):
                handles[f"v{i}_w{t}"] = vm.weights[t]
                handles[f"v{i}_b{t}"] = vm.biases[t]
        for i in range(len(bases)):
            handles[f"theta{i}"] = state.embeddings[i]
            no_decay.add(f"theta{i}")
        self.opt = Optimizer(handles, cfg, no_decay=no_decay)

    def _bindings_recurrent(self, i: int, seqs: list[list[int]]) -> tuple[Graph, dict]:
        base = self.bases[i]
        cfg = self.cfg
        meta = self.state.meta
        mat, lengths = _pad_batch(seqs)
        B, T = mat.shape
        g = self.cache.recurrent(T, B, base.hidden_dim, base.task_group)
        hs_b, logits_b = rollout_batch(base, mat)
        wnorm = 1.0 / (lengths * B)
        mask = np.arange(T)[:, None] < lengths[None, :]
        hscale = 1.0 / base.hidden_dim if cfg.normalize_hidden_by_dim else 1.0
        bindings = {k: v for k, v in meta.params.items() if not k.startswith("head")}
        tg = base.task_group
        bindings[f"head{tg}_w"] = meta.params[f"head{tg}_w"]
        bindings[f"head{tg}_b"] = meta.params[f"head{tg}_b"]
        bindings["vmap_w0"] = self.state.state_maps[i].weights[0]
        bindings["vmap_b0"] = self.state.state_maps[i].biases[0]
        bindings["theta"] = self.state.embeddings[i][None, :]
        kl = cfg.output_divergence == "KL_on_softmax"
        kl_const = 0.0
        for t in range(T):
            w = mask[t] * wnorm
            bindings[f"x{t}"] = _onehot(mat[:, t], meta.vocab_size)
            bindings[f"hb{t}"] = hs_b[t]
            bindings[f"wh{t}"] = w * hscale
            bindings[f"wo{t}"] = w
            if kl:
                p = _softmax(logits_b[t])
                bindings[f"pb{t}"] = p
                plogp = np.where(p > 0, p * np.log(np.clip(p, 1e-300, None)), 0.0)
                kl_const += float((plogp.sum(axis=1) * w).sum())
            else:
                bindings[f"ob{t}"] = logits_b[t]
        if kl:
            bindings["kl_const"] = kl_const
        return g, bindings

    def _bindings_residual(self, i: int, rows: np.ndarray) -> tuple[Graph, dict]:
        base = self.bases[i]
        meta = self.state.meta
        feats = self._feats[i][rows]
        B = feats.shape[0]
        g = self.cache.residual(B, base.hidden_dim, base.task_group)
        bindings = {k: v for k, v in meta.params.items() if not k.startswith("head")}
        tg = base.task_group
        bindings[f"head{tg}_w"] = meta.params[f"head{tg}_w"]
        bindings[f"head{tg}_b"] = meta.params[f"head{tg}_b"]
        bindings["theta"] = self.state.embeddings[i][None, :]
        bindings["feat"] = feats
        h = feats @ base.params["stem_w"] + base.params["stem_b"]
        nb = base.num_blocks
        for t in range(nb):
            h = models.cell_step(base, None, h, block=t)
            bindings[f"hb{t}"] = h
            if t < nb - 1:
                bindings[f"fb{t}"] = h
            bindings[f"vmap_w{t}"] = self.state.state_maps[i].weights[t]
            bindings[f"vmap_b{t}"] = self.state.state_maps[i].biases[t]
        logits_b = h @ base.params["w_out"] + base.params["b_out"]
        if self.cfg.output_divergence == "KL_on_softmax":
            p = _softmax(logits_b)
            bindings["pb"] = p
            plogp = (p * np.log(np.clip(p, 1e-300, None))).sum()
            bindings["kl_const"] = float(plogp) / (B * nb)
        else:
            bindings["ob"] = logits_b
        return g, bindings

    def _grad_names(self, i: int, task_group: int) -> dict[str, str]:
        """Graph leaf name -> optimizer handle name for the sampled cohort."""
        names = {}
        for k in self.state.meta.params:
            if k.startswith("head"):
                continue
            names[k] = k
        if self.cfg.lam > 0:
            names[f"head{task_group}_w"] = f"head{task_group}_w"
            names[f"head{task_group}_b"] = f"head{task_group}_b"
        for t in range(len(self.state.state_maps[i].weights)):
            names[f"vmap_w{t}"] = f"v{i}_w{t}"
            names[f"vmap_b{t}"] = f"v{i}_b{t}"
        names["theta"] = f"theta{i}"
        return names

    def run(self, steps: int | None = None) -> MetaTrainState:
        cfg = self.cfg
        total = cfg.max_steps if steps is None else steps
        N = len(self.bases)
        for tau in range(total):
            i = int(self.rng.integers(0, N))
            if self._residual:
                pool = len(self._feats[i])
                rows = self.rng.choice(pool, size=min(cfg.batch_size, pool),
                                       replace=pool < cfg.batch_size)
                g, bindings = self._bindings_residual(i, rows)
            else:
                pool = self.datasets[i].indices("meta_unlabeled")
                take = self.rng.choice(len(pool), size=min(cfg.batch_size, len(pool)),
                                       replace=len(pool) < cfg.batch_size)
                seqs = [self.datasets[i].sequences[pool[k]] for k in take]
                g, bindings = self._bindings_recurrent(i, seqs)
            total_loss_val = float(g.forward(bindings).data)
            if not np.isfinite(total_loss_val):
                raise NumericError(f"meta loss became {total_loss_val} at step {tau}")
            hid = float(g.value("hidden_loss"))
            out = float(g.value("output_loss"))
            grads_graph = g.backward()
            name_map = self._grad_names(i, self.bases[i].task_group)
            grads = {handle: grads_graph[leaf].data
                     for leaf, handle in name_map.items()}
            lr = cfg.lr * lr_multiplier(cfg, self.state.step, cfg.max_steps or total)
            theta_lr = None
            if cfg.theta_lr is not None:
                theta_lr = cfg.theta_lr * lr_multiplier(cfg, self.state.step,
                                                        cfg.max_steps or total)
            self.opt.step(grads, lr, theta_lr=theta_lr)
            self.state.history.append((self.state.step, i, hid, out, total_loss_val))
            self.state.step += 1
        return self.state


def train_meta(bases: list[BaseModel], datasets: list[SequenceDataset],
               cfg: TrainConfig, meta_cfg: dict | None = None) -> MetaTrainState:
    """Joint training of the meta model, state maps, and embeddings."""
    state = init_meta_state(bases, meta_cfg or {}, seed=cfg.seed)
    trainer = MetaTrainer(state, bases, datasets, cfg)
    return trainer.run()


def export_loss_history(history, path, comment: str | None = None) -> None:
    lines = []
    if comment:
        lines.append(f"# {comment}\n")
    lines.append("step,model_id,hidden_loss,output_loss,total_loss\n")
    for step, mid, hid, out, tot in history:
        lines.append(f"{step},{mid},{hid:.10g},{out:.10g},{tot:.10g}\n")
    with open(path, "w") as f:
        f.writelines(lines)


# -- diagnostics ------------------------------------------------------------------


def conjugacy_residual(state: MetaTrainState, base: BaseModel, n: int,
                       sequences: list[list[int]]) -> dict:
    """One-step conjugacy defect for base n under the trained state."""
    return conjugacy_defect(state.meta, base, state.state_maps[n],
                            state.embeddings[n], sequences)


def conjugacy_defect(meta, base: BaseModel, vmap: StateMap,
                     theta: np.ndarray, sequences: list[list[int]]) -> dict:
    """Distribution of the one-step conjugacy defect over a batch.

    For each step t the defect compares pushing the meta state forward and
    then mapping, against mapping first and stepping through the base cell.
    """
    vals = []
    for seq in sequences:
        hs_m, _ = models.rollout(meta, seq, theta=theta, task_group=base.task_group)
        emb_b = base.params["embed"][np.asarray(seq)]
        prev = np.zeros(meta.hidden_dim)
        for t in range(len(seq)):
            lhs = apply_state_map(vmap, hs_m[t])
            rhs = models.cell_step(base, emb_b[t], apply_state_map(vmap, prev))
            vals.append(float(np.linalg.norm(lhs - rhs)))
            prev = hs_m[t]
    arr = np.array(vals)
    return {"mean": float(arr.mean()), "max": float(arr.max()), "count": len(arr)}
