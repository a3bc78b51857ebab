"""The set-to-sequence recommender network.

Pipeline for a batch of episodes:

1. ``encode``: candidate embeddings pass through a self-attention branch and
   an MLP branch with mean-pooled context; the two are concatenated.
2. ``init_state``: an LSTM reads the projected ``[embedding; mastery]``
   history records to produce the starting student state.
3. ``roll_path``: at every step each candidate is scored against the state
   and the fused target embedding, a softmax over not-yet-chosen candidates
   gives the step distribution, and the chosen candidate's encoding drives
   the next LSTM step. A small MLP on the new state predicts the mastery
   feedback for the chosen concept.

All functions operate on batches; a single episode is a batch of one.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .episode import Batch, Episode, make_batch
from .tensor import Node

VARIANTS = ("combined", "attention_only", "mlp_only")
CHECKPOINT_FORMAT = "srcpath-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    num_concepts: int
    embed_dim: int = 64
    lstm_hidden: int = 64
    score_dim: int = 64
    dropout_rate: float = 0.5
    encoder_variant: str = "combined"

    def __post_init__(self):
        for name in ("num_concepts", "embed_dim", "lstm_hidden", "score_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.encoder_variant not in VARIANTS:
            raise ValueError(f"encoder_variant must be one of {VARIANTS}")

    @property
    def uses_attention(self) -> bool:
        return self.encoder_variant in ("combined", "attention_only")

    @property
    def uses_mlp(self) -> bool:
        return self.encoder_variant in ("combined", "mlp_only")

    @property
    def enc_width(self) -> int:
        return 2 * self.embed_dim if self.encoder_variant == "combined" else self.embed_dim


class ModelParams:
    """Named trainable tensors of the network."""

    def __init__(self, tensors: dict[str, Node]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Node:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.items())

    def names(self) -> list[str]:
        return list(self.tensors)

    def nodes(self) -> list[Node]:
        return list(self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams({k: T.parameter(v.value.copy()) for k, v in self.tensors.items()})

    def zero_grad(self) -> None:
        for node in self.tensors.values():
            node.zero_grad()

    def size(self) -> int:
        return sum(v.value.size for v in self.tensors.values())


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, forget bias 1."""
    d, H, a = config.embed_dim, config.lstm_hidden, config.score_dim
    enc = config.enc_width

    def uniform(fan_in, shape):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    shapes: dict[str, np.ndarray] = {"embedding": uniform(d, (config.num_concepts, d))}
    if config.uses_attention:
        for name in ("enc_wq", "enc_wk", "enc_wv"):
            shapes[name] = uniform(d, (d, d))
    if config.uses_mlp:
        shapes["enc_mlp_w1"] = uniform(d, (d, d))
        shapes["enc_mlp_b1"] = np.zeros(d)
        shapes["enc_mlp_w2"] = uniform(d, (d, d))
        shapes["enc_mlp_b2"] = np.zeros(d)
    shapes["hist_proj"] = uniform(d + 1, (d + 1, enc))
    shapes["lstm_w"] = uniform(enc + H, (enc + H, 4 * H))
    lstm_b = np.zeros(4 * H)
    lstm_b[H : 2 * H] = 1.0
    shapes["lstm_b"] = lstm_b
    shapes["score_v"] = uniform(a, (a, 1))
    shapes["score_state"] = uniform(H, (H, a))
    shapes["score_cand"] = uniform(enc, (enc, a))
    shapes["score_target"] = uniform(d, (d, a))
    shapes["score_b"] = np.zeros(a)
    shapes["kt_w1"] = uniform(H, (H, a))
    shapes["kt_b1"] = np.zeros(a)
    shapes["kt_w2"] = uniform(a, (a, 1))
    shapes["kt_b2"] = np.zeros(1)
    return ModelParams({k: T.parameter(v) for k, v in shapes.items()})


# ------------------------------------------------------------------ encoder


def encoder_mlp(x: Node, params: ModelParams, dropout_rate: float = 0.0, rng=None) -> Node:
    hidden = T.tanh(T.add(T.matmul(x, params["enc_mlp_w1"]), params["enc_mlp_b1"]))
    if rng is not None and dropout_rate > 0:
        hidden = T.dropout(hidden, dropout_rate, rng)
    return T.add(T.matmul(hidden, params["enc_mlp_w2"]), params["enc_mlp_b2"])


def _as_candidate_matrix(candidates, num_concepts: int) -> np.ndarray:
    cand = np.asarray(candidates, dtype=np.intp)
    if cand.ndim == 1:
        cand = cand[None, :]
    if cand.shape[-1] < 1 or cand.shape[-1] > num_concepts:
        raise ValueError("candidate count must lie in [1, num_concepts]")
    if cand.min() < 0 or cand.max() >= num_concepts:
        raise IndexError("unknown concept id in candidates")
    for row in cand:
        if len(set(row.tolist())) != len(row):
            raise ValueError("duplicate concept in candidate set")
    return cand


def encode(candidates, params: ModelParams, config: ModelConfig, training: bool = False, rng=None) -> Node:
    """Set-aware candidate representations, shape (B, m, enc_width).

    ``candidates`` is a (m,) or (B, m) array of concept ids. Dropout on the MLP
    hidden layer is active only when ``training`` and an ``rng`` is given.
    """
    cand = _as_candidate_matrix(candidates, config.num_concepts)
    x = T.gather_rows(params["embedding"], cand)
    parts = []
    if config.uses_attention:
        q = T.matmul(x, params["enc_wq"])
        k = T.matmul(x, params["enc_wk"])
        v = T.matmul(x, params["enc_wv"])
        logits = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(config.embed_dim))
        parts.append(T.matmul(T.softmax(logits), v))
    if config.uses_mlp:
        local = encoder_mlp(x, params, config.dropout_rate, rng if training else None)
        parts.append(T.add(local, T.mean(local, axis=1, keepdims=True)))
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=-1)


# ------------------------------------------------------------------ decoder


def init_state(history_concepts, history_y, history_mask, params: ModelParams, config: ModelConfig):
    """Run the LSTM over history records; rows with no history stay at zero.

    Arrays are (B, L); ``history_mask`` marks real records (left-aligned).
    """
    hc = np.asarray(history_concepts, dtype=np.intp)
    hy = np.asarray(history_y, dtype=np.float64)
    hm = np.asarray(history_mask, dtype=bool)
    if hc.ndim == 1:
        hc, hy, hm = hc[None], hy[None], hm[None]
    if np.any(hy[hm] < 0) or np.any(hy[hm] > 1):
        raise ValueError("history mastery must lie in [0, 1]")
    B = hc.shape[0]
    H = config.lstm_hidden
    h = T.constant(np.zeros((B, H)))
    c = T.constant(np.zeros((B, H)))
    for t in range(hc.shape[1]):
        step = hm[:, t]
        if not step.any():
            continue
        x = T.gather_rows(params["embedding"], hc[:, t])
        inp = T.matmul(T.concat([x, T.constant(hy[:, t : t + 1])], axis=-1), params["hist_proj"])
        h_new, c_new = T.lstm_step(inp, h, c, params["lstm_w"], params["lstm_b"])
        if step.all():
            h, c = h_new, c_new
        else:
            keep = T.constant(step[:, None].astype(np.float64))
            hold = T.constant(1.0 - keep.value)
            h = T.add(T.mul(h_new, keep), T.mul(h, hold))
            c = T.add(T.mul(c_new, keep), T.mul(c, hold))
    return h, c


def target_embedding(target_weights, params: ModelParams) -> Node:
    """Mean of target-concept embeddings, (B, d)."""
    return T.matmul(T.constant(np.atleast_2d(target_weights)), params["embedding"])


def _score(h: Node, cand_proj: Node, target_proj: Node, params: ModelParams) -> Node:
    B, m, a = cand_proj.shape
    state_proj = T.reshape(T.matmul(h, params["score_state"]), (B, 1, a))
    pre = T.add(T.add(T.add(cand_proj, state_proj), target_proj), params["score_b"])
    return T.reshape(T.matmul(T.tanh(pre), params["score_v"]), (B, m))


def step_scores(h: Node, enc: Node, x_target: Node, params: ModelParams) -> Node:
    """Pointer scores ``v . tanh(W1 h + W2 e_j + W3 x_T + b)`` per candidate, (B, m)."""
    B = enc.shape[0]
    a = params["score_b"].shape[0]
    cand_proj = T.matmul(enc, params["score_cand"])
    target_proj = T.reshape(T.matmul(x_target, params["score_target"]), (B, 1, a))
    return _score(h, cand_proj, target_proj, params)


def step_distribution(scores: Node, selected) -> Node:
    """Softmax over candidates not yet selected; selected ones get probability 0."""
    selected = np.asarray(selected, dtype=bool)
    if np.any(selected.all(axis=-1)):
        raise ValueError("every candidate is already selected")
    return T.masked_softmax(scores, ~selected)


def kt_head(h: Node, params: ModelParams) -> Node:
    """Predicted mastery of the concept just studied, (B, 1)."""
    hidden = T.tanh(T.add(T.matmul(h, params["kt_w1"]), params["kt_b1"]))
    return T.sigmoid(T.add(T.matmul(hidden, params["kt_w2"]), params["kt_b2"]))


@dataclass
class PathSample:
    positions: np.ndarray  # (B, n) indices into each candidate list
    paths: np.ndarray  # (B, n) concept ids
    step_probs: Node  # (B, n)
    step_logprobs: Node  # (B, n)
    kt_preds: Node  # (B, n)
    distributions: np.ndarray  # (B, n, m) step distributions

    def path(self, b: int = 0) -> list[int]:
        return [int(c) for c in self.paths[b]]


def _pick(probs: np.ndarray, allowed: np.ndarray, rng) -> int:
    if rng is None:
        return int(np.argmax(np.where(allowed, probs, -1.0)))
    cdf = np.cumsum(probs)
    k = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    if k >= len(probs) or not allowed[k]:
        k = int(np.flatnonzero(allowed)[-1])
    return k


def roll_path(
    episodes: Sequence[Episode] | Episode,
    params: ModelParams,
    config: ModelConfig,
    mode: str = "sample",
    rngs=None,
    training: bool = False,
    dropout_rng=None,
    forced=None,
) -> PathSample:
    """Decode one path per episode.

    ``mode="sample"`` draws each step from the step distribution using
    ``rngs`` (one generator per episode, or a single shared one);
    ``mode="greedy"`` takes the argmax with the smallest index winning ties;
    ``mode="forced"`` replays the candidate positions given in ``forced``
    (B, n), which scores fixed paths.
    """
    if isinstance(episodes, Episode):
        episodes = [episodes]
    if mode not in ("sample", "greedy", "forced"):
        raise ValueError(f"unknown decoding mode {mode!r}")
    batch = make_batch(episodes, config.num_concepts)
    B, m = batch.candidates.shape
    n = batch.n
    if mode == "sample":
        if rngs is None:
            raise ValueError("sampling needs an rng")
        if isinstance(rngs, np.random.Generator):
            rngs = [rngs] * B
        if len(rngs) != B:
            raise ValueError("need one rng per episode")
    else:
        rngs = [None] * B
    if mode == "forced":
        forced = np.asarray(forced, dtype=np.intp)
        if forced.shape != (B, n):
            raise ValueError("forced positions must have shape (batch, n)")
        if forced.min() < 0 or forced.max() >= m:
            raise IndexError("forced position outside the candidate list")

    enc = encode(batch.candidates, params, config, training=training, rng=dropout_rng)
    h, c = init_state(batch.hist_concepts, batch.hist_y, batch.hist_mask, params, config)
    a = params["score_b"].shape[0]
    cand_proj = T.matmul(enc, params["score_cand"])
    x_target = target_embedding(batch.target_weights, params)
    target_proj = T.reshape(T.matmul(x_target, params["score_target"]), (B, 1, a))

    selected = np.zeros((B, m), dtype=bool)
    positions = np.zeros((B, n), dtype=np.intp)
    dists = np.zeros((B, n, m))
    probs_taken, logps, kts = [], [], []
    rows = np.arange(B)
    for i in range(n):
        probs = step_distribution(_score(h, cand_proj, target_proj, params), selected)
        pv = probs.value
        dists[:, i] = pv
        for b in range(B):
            if mode == "forced":
                if selected[b, forced[b, i]]:
                    raise ValueError("forced path repeats a candidate")
                positions[b, i] = forced[b, i]
            else:
                positions[b, i] = _pick(pv[b], ~selected[b], rngs[b])
        onehot = np.zeros((B, m))
        onehot[rows, positions[:, i]] = 1.0
        p_taken = T.total(T.mul(probs, T.constant(onehot)), axis=-1, keepdims=True)
        probs_taken.append(p_taken)
        logps.append(T.log(p_taken, eps=T.EPS))
        selected[rows, positions[:, i]] = True
        chosen = T.reshape(T.matmul(T.constant(onehot[:, None, :]), enc), (B, enc.shape[-1]))
        h, c = T.lstm_step(chosen, h, c, params["lstm_w"], params["lstm_b"])
        kts.append(kt_head(h, params))

    paths = np.take_along_axis(batch.candidates, positions, axis=1)
    return PathSample(
        positions,
        paths,
        T.concat(probs_taken, axis=-1),
        T.concat(logps, axis=-1),
        T.concat(kts, axis=-1),
        dists,
    )


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(path, params: ModelParams, config: ModelConfig, extra: dict | None = None) -> None:
    """JSON checkpoint; floats are written with ``repr`` so f64 values round-trip exactly."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "params": {
            name: {"shape": list(node.shape), "data": node.value.reshape(-1).tolist()}
            for name, node in params
        },
    }
    if extra:
        doc["extra"] = extra
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a model checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    config = ModelConfig(**doc["config"])
    tensors = {}
    for name, entry in doc["params"].items():
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        tensors[name] = T.parameter(arr)
    return ModelParams(tensors), config
