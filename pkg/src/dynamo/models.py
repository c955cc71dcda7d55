"""Base-model and meta-model cells, rollouts, and hidden-state maps.

Three cell families are supported: GRU, vanilla RNN, and a residual MLP
whose block index plays the role of time. The meta-model is the same cell
with the model embedding vector appended to the input at every step (GRU /
vanilla RNN) or injected as a learned bias inside each block (residual MLP),
plus one readout head per task group.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numgrad import Graph

CELL_KINDS = ("gru", "vanilla_rnn", "residual_mlp")


class ModelError(Exception):
    pass


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class BaseModel:
    """A trained network to be emulated. `input_dim` is the cell input width
    (token-embedding dim for recurrent cells, feature dim for residual)."""

    cell_kind: str
    vocab_size: int
    input_dim: int
    hidden_dim: int
    output_dim: int
    task_group: int
    params: dict[str, np.ndarray]
    num_blocks: int = 0
    info: dict = field(default_factory=dict)

    @property
    def h0(self) -> np.ndarray:
        return np.zeros(self.hidden_dim)


@dataclass
class MetaModel:
    """Embedding-conditioned cell with one readout head per task group."""

    cell_kind: str
    vocab_size: int
    input_dim: int
    hidden_dim: int
    embed_dim: int
    head_dims: dict[int, int]
    params: dict[str, np.ndarray]
    num_blocks: int = 0

    @property
    def h0(self) -> np.ndarray:
        return np.zeros(self.hidden_dim)

    def head(self, task_group: int) -> tuple[np.ndarray, np.ndarray]:
        if task_group not in self.head_dims:
            raise ModelError(f"no readout head for task group {task_group}")
        return self.params[f"head{task_group}_w"], self.params[f"head{task_group}_b"]


@dataclass
class StateMap:
    """Affine map from meta hidden space into one base model's hidden space;
    one (weight, bias) pair per block for the residual family."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def weight(self) -> np.ndarray:
        return self.weights[0]

    @property
    def bias(self) -> np.ndarray:
        return self.biases[0]


@dataclass
class ModelEmbedding:
    theta: np.ndarray
    model_id: str = "free"

    def __post_init__(self):
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("embedding entries must be finite")


# -- single-step cell maps ---------------------------------------------------


def gru_step(params: dict, x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """h' = (1-z)*hcand + z*h with z, r gates on [x; h] and hcand on [x; r*h]."""
    xh = np.concatenate([x, h], axis=-1)
    z = _sigmoid(xh @ params["w_z"] + params["b_z"])
    r = _sigmoid(xh @ params["w_r"] + params["b_r"])
    xrh = np.concatenate([x, r * h], axis=-1)
    hcand = np.tanh(xrh @ params["w_h"] + params["b_h"])
    return (1.0 - z) * hcand + z * h


def vanilla_rnn_step(params: dict, x: np.ndarray, h: np.ndarray) -> np.ndarray:
    return np.tanh(x @ params["w_x"] + h @ params["w_h"] + params["b"])


def residual_block_step(block_params: dict, features: np.ndarray,
                        theta: np.ndarray | None = None,
                        w_theta: np.ndarray | None = None) -> np.ndarray:
    """z = relu(A1 f + b1 [+ W theta]); out = relu(f + A2 z + b2)."""
    pre = features @ block_params["a1"] + block_params["b1"]
    if theta is not None:
        pre = pre + theta @ w_theta
    z = np.maximum(pre, 0.0)
    return np.maximum(features + z @ block_params["a2"] + block_params["b2"], 0.0)


def apply_state_map(vmap: StateMap, h_meta: np.ndarray, block: int = 0) -> np.ndarray:
    return h_meta @ vmap.weights[block] + vmap.biases[block]


def _block_params(params: dict, t: int) -> dict:
    return {"a1": params[f"blk{t}_a1"], "b1": params[f"blk{t}_b1"],
            "a2": params[f"blk{t}_a2"], "b2": params[f"blk{t}_b2"]}


def cell_step(model, x: np.ndarray, h: np.ndarray, block: int = 0,
              theta: np.ndarray | None = None) -> np.ndarray:
    """One application of the model's transition map. For meta models, `x`
    must already include the embedding (recurrent) or `theta` is passed
    through to the block bias (residual)."""
    if model.cell_kind == "gru":
        return gru_step(model.params, x, h)
    if model.cell_kind == "vanilla_rnn":
        return vanilla_rnn_step(model.params, x, h)
    if model.cell_kind == "residual_mlp":
        w_theta = model.params.get("w_theta") if theta is not None else None
        return residual_block_step(_block_params(model.params, block), h,
                                   theta=theta, w_theta=w_theta)
    raise ModelError(f"unknown cell kind {model.cell_kind}")


# -- rollouts ----------------------------------------------------------------


def rollout(model, inputs, theta: np.ndarray | None = None,
            task_group: int | None = None):
    """Run a model over one input.

    Recurrent cells: `inputs` is a token-id sequence; returns
    (hiddens (T, H), logits (T, C)) with the readout applied at every step.
    Residual cells: `inputs` is a feature vector; block index plays the role
    of time and the returned outputs are the per-block features with the
    head logits in place of the final block's entry.

    Meta models consume [theta; x_t] at every step and require theta and a
    valid task_group.
    """
    is_meta = isinstance(model, MetaModel)
    if is_meta:
        if theta is None:
            raise ModelError("meta rollout requires theta")
        theta = np.asarray(theta, dtype=np.float64)
        if task_group is None:
            if len(model.head_dims) != 1:
                raise ModelError("task_group required with multiple heads")
            task_group = next(iter(model.head_dims))
        w_out, b_out = model.head(task_group)
    else:
        w_out, b_out = model.params["w_out"], model.params["b_out"]

    if model.cell_kind == "residual_mlp":
        feats = np.asarray(inputs, dtype=np.float64)
        h = feats @ model.params["stem_w"] + model.params["stem_b"]
        hiddens, outputs = [], []
        for t in range(model.num_blocks):
            h = cell_step(model, None, h, block=t, theta=theta if is_meta else None)
            hiddens.append(h)
            outputs.append(h)
        outputs[-1] = hiddens[-1] @ w_out + b_out
        return np.stack(hiddens), outputs

    tokens = np.asarray(inputs)
    if tokens.size == 0:
        raise ModelError("empty input sequence")
    emb = model.params["embed"][tokens]
    if is_meta:
        emb = np.concatenate([np.broadcast_to(theta, (len(tokens), len(theta))), emb],
                             axis=-1)
    h = model.h0
    hiddens = []
    for t in range(len(tokens)):
        h = cell_step(model, emb[t], h)
        hiddens.append(h)
    hiddens = np.stack(hiddens)
    logits = hiddens @ w_out + b_out
    return hiddens, logits


def rollout_batch(model, token_mat: np.ndarray, theta: np.ndarray | None = None,
                  task_group: int | None = None):
    """Fixed-length batched rollout for recurrent cells.

    token_mat is (B, T); returns (hiddens (T, B, H), logits (T, B, C)).
    For meta models `theta` may be a single vector or a (B, d) matrix with one
    embedding per row (used when sweeping many embeddings in one pass).
    """
    is_meta = isinstance(model, MetaModel)
    B, T = token_mat.shape
    if is_meta:
        if task_group is None:
            task_group = next(iter(model.head_dims))
        w_out, b_out = model.head(task_group)
        theta = np.asarray(theta, dtype=np.float64)
        theta_rows = theta if theta.ndim == 2 else np.broadcast_to(theta, (B, len(theta)))
    else:
        w_out, b_out = model.params["w_out"], model.params["b_out"]
    if T == 0:
        raise ModelError("empty input sequence")
    h = np.zeros((B, model.hidden_dim))
    hiddens = np.empty((T, B, model.hidden_dim))
    for t in range(T):
        x = model.params["embed"][token_mat[:, t]]
        if is_meta:
            x = np.concatenate([theta_rows, x], axis=-1)
        h = cell_step(model, x, h)
        hiddens[t] = h
    logits = hiddens @ w_out + b_out
    return hiddens, logits


def final_logits(model, sequences: list[list[int]], theta=None, task_group=None) -> np.ndarray:
    """Last-step logits for a ragged batch of sequences (grouped by length)."""
    if model.cell_kind == "residual_mlp":
        raise ModelError("final_logits is for recurrent models")
    n = len(sequences)
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(sequences):
        by_len.setdefault(len(s), []).append(i)
    out = None
    for T, idxs in sorted(by_len.items()):
        mat = np.array([sequences[i] for i in idxs], dtype=np.int64)
        _, logits = rollout_batch(model, mat, theta=theta, task_group=task_group)
        if out is None:
            out = np.empty((n, logits.shape[-1]))
        out[idxs] = logits[-1]
    return out


# -- initialization ----------------------------------------------------------


def _dense(rng, fan_in, fan_out):
    return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)


def _init_cell_params(rng, cell_kind, input_dim, hidden_dim, num_blocks):
    p = {}
    if cell_kind == "gru":
        k = input_dim + hidden_dim
        for gate in ("z", "r", "h"):
            p[f"w_{gate}"] = _dense(rng, k, hidden_dim)
            p[f"b_{gate}"] = np.zeros(hidden_dim)
    elif cell_kind == "vanilla_rnn":
        p["w_x"] = _dense(rng, input_dim, hidden_dim)
        p["w_h"] = _dense(rng, hidden_dim, hidden_dim)
        p["b"] = np.zeros(hidden_dim)
    elif cell_kind == "residual_mlp":
        for t in range(num_blocks):
            p[f"blk{t}_a1"] = _dense(rng, hidden_dim, hidden_dim)
            p[f"blk{t}_b1"] = np.zeros(hidden_dim)
            p[f"blk{t}_a2"] = _dense(rng, hidden_dim, hidden_dim)
            p[f"blk{t}_b2"] = np.zeros(hidden_dim)
    else:
        raise ModelError(f"unknown cell kind {cell_kind}")
    return p


def init_base_model(cell_kind: str, vocab_size: int, input_dim: int,
                    hidden_dim: int, output_dim: int, task_group: int,
                    seed: int, num_blocks: int = 0, info: dict | None = None) -> BaseModel:
    rng = np.random.default_rng(seed)
    if cell_kind == "residual_mlp" and num_blocks < 1:
        raise ModelError("residual_mlp needs num_blocks >= 1")
    params = {}
    if cell_kind == "residual_mlp":
        params["stem_w"] = _dense(rng, input_dim, hidden_dim)
        params["stem_b"] = np.zeros(hidden_dim)
    else:
        params["embed"] = 0.5 * rng.standard_normal((vocab_size, input_dim))
    params.update(_init_cell_params(rng, cell_kind, input_dim, hidden_dim, num_blocks))
    params["w_out"] = _dense(rng, hidden_dim, output_dim)
    params["b_out"] = np.zeros(output_dim)
    return BaseModel(cell_kind, vocab_size, input_dim, hidden_dim, output_dim,
                     task_group, params, num_blocks=num_blocks, info=dict(info or {}))


def init_meta_model(cell_kind: str, vocab_size: int, input_dim: int,
                    hidden_dim: int, embed_dim: int, head_dims: dict[int, int],
                    seed: int, num_blocks: int = 0) -> MetaModel:
    rng = np.random.default_rng(seed)
    params = {}
    if cell_kind == "residual_mlp":
        params["stem_w"] = _dense(rng, input_dim, hidden_dim)
        params["stem_b"] = np.zeros(hidden_dim)
        params["w_theta"] = _dense(rng, embed_dim, hidden_dim)
        cell_in = input_dim
    else:
        params["embed"] = 0.5 * rng.standard_normal((vocab_size, input_dim))
        cell_in = input_dim + embed_dim
    params.update(_init_cell_params(rng, cell_kind, cell_in, hidden_dim, num_blocks))
    for group in sorted(head_dims):
        params[f"head{group}_w"] = _dense(rng, hidden_dim, head_dims[group])
        params[f"head{group}_b"] = np.zeros(head_dims[group])
    return MetaModel(cell_kind, vocab_size, input_dim, hidden_dim, embed_dim,
                     dict(head_dims), params, num_blocks=num_blocks)


def init_state_map(meta_hidden: int, base_hidden: int, num_blocks: int,
                   seed: int) -> StateMap:
    rng = np.random.default_rng(seed)
    n = max(1, num_blocks)
    weights = [rng.standard_normal((meta_hidden, base_hidden)) / np.sqrt(meta_hidden)
               for _ in range(n)]
    biases = [np.zeros(base_hidden) for _ in range(n)]
    return StateMap(weights, biases)


# -- graph builders (trainer-side mirrors of the numpy steps) -----------------


def declare_params(g: Graph, params: dict[str, np.ndarray], prefix: str = "",
                   trainable: bool = True) -> dict[str, int]:
    """Declare one graph leaf per named parameter; returns name -> node ref."""
    return {name: g.leaf(prefix + name, arr.shape, param=trainable)
            for name, arr in params.items()}


def cell_step_graph(g: Graph, cell_kind: str, refs: dict[str, int], x: int, h: int,
                    block: int = 0, theta_rows: int | None = None) -> int:
    """Graph twin of `cell_step`. `x` is (B, cell_in); `h` is (B, H).

    For residual cells, pass the block features as `h` and the broadcast
    embedding rows as `theta_rows` (meta only); `x` is ignored.
    """
    if cell_kind == "gru":
        xh = g.concat(x, h)
        z = g.sigmoid(g.add(g.matmul(xh, refs["w_z"]), refs["b_z"]))
        r = g.sigmoid(g.add(g.matmul(xh, refs["w_r"]), refs["b_r"]))
        xrh = g.concat(x, g.mul(r, h))
        hc = g.tanh(g.add(g.matmul(xrh, refs["w_h"]), refs["b_h"]))
        return g.add(g.mul(g.affine(z, -1.0, 1.0), hc), g.mul(z, h))
    if cell_kind == "vanilla_rnn":
        pre = g.add(g.add(g.matmul(x, refs["w_x"]), g.matmul(h, refs["w_h"])), refs["b"])
        return g.tanh(pre)
    if cell_kind == "residual_mlp":
        pre = g.add(g.matmul(h, refs[f"blk{block}_a1"]), refs[f"blk{block}_b1"])
        if theta_rows is not None:
            pre = g.add(pre, g.matmul(theta_rows, refs["w_theta"]))
        z = g.relu(pre)
        return g.relu(g.add(h, g.add(g.matmul(z, refs[f"blk{block}_a2"]),
                                     refs[f"blk{block}_b2"])))
    raise ModelError(f"unknown cell kind {cell_kind}")
