"""Latent-as-query fusion blocks and the classification head.

All attention here is single-head over row-token matrices ``(tokens, c)``:
a trainable query matrix attends over the concatenation of modality tokens
(co-attention), then each modality re-attends over that fused set
(refinement).  Along the time axis the same two steps run with a temporal
query matrix ("self-fusion").  Spatial and temporal streams are combined by
a time-mean gate by default; an outer-product variant is available for
comparison.

Ops accept an optional ``probs_out`` list; when given, the softmax
probability matrices are appended as plain arrays (queries in rows), which
is what the attention-export path consumes.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor


@dataclass
class AttentionWeights:
    """Square projection triple for one attention role."""

    wq: Tensor
    wk: Tensor
    wv: Tensor


@dataclass
class BottleneckParams:
    """Pre-MLP plus down/up projections of the residual bottleneck."""

    pre_w: Tensor
    pre_b: Tensor
    down: Tensor
    up: Tensor


def init_attention_weights(c, rng, std=0.02):
    def w(name):
        return Tensor(rng.normal(0.0, std, size=(c, c)), requires_grad=True, name=name)

    return AttentionWeights(wq=w("wq"), wk=w("wk"), wv=w("wv"))


def init_bottleneck_params(c, rng, std=0.02):
    if c % 4 != 0:
        raise ConfigError(f"bottleneck needs a channel width divisible by 4, got {c}")
    inner = c // 4
    return BottleneckParams(
        pre_w=Tensor(rng.normal(0.0, std, size=(c, c)), requires_grad=True, name="pre_w"),
        pre_b=Tensor(np.zeros(c), requires_grad=True, name="pre_b"),
        down=Tensor(rng.normal(0.0, std, size=(c, inner)), requires_grad=True, name="down"),
        up=Tensor(rng.normal(0.0, std, size=(inner, c)), requires_grad=True, name="up"),
    )


def _attend(queries, keys_values, w, probs_out):
    """softmax(Q K^T / sqrt(c)) V with Q = queries@wq, K/V from keys_values."""
    queries, keys_values = T.as_tensor(queries), T.as_tensor(keys_values)
    if queries.ndim != 2 or keys_values.ndim != 2:
        raise ShapeError("attention expects rank-2 token matrices")
    if keys_values.shape[0] == 0:
        raise ContractError("attention over an empty key/value set")
    c = queries.shape[1]
    if keys_values.shape[1] != c:
        raise ShapeError(
            f"channel mismatch: queries have {c}, keys/values have {keys_values.shape[1]}"
        )
    q = T.matmul(queries, w.wq)
    k = T.matmul(keys_values, w.wk)
    v = T.matmul(keys_values, w.wv)
    probs = T.softmax_rows(T.matmul(q, T.transpose(k, (1, 0))) / np.sqrt(c))
    if probs_out is not None:
        probs_out.append(probs.data.copy())
    return T.matmul(probs, v)


def latent_query_coattention(j, l_joint, w, probs_out=None):
    """Fuse the joint token set under a trainable query matrix.

    `j` is the (n_q, c) latent query, `l_joint` the (m, c) concatenation of
    available modality tokens (fixed order: fMRI, sMRI, tabular).  Returns
    (n_q, c) fused tokens.
    """
    return _attend(j, l_joint, w, probs_out)


def refine_with_joint(l_mod, h_joint, w, probs_out=None):
    """Refine one modality's (k, c) tokens against the fused set."""
    return _attend(l_mod, h_joint, w, probs_out)


def temporal_self_fusion(l_te, j_te, w_fuse, w_refine, probs_out=None):
    """Two-step fusion along time: latent-query pass, then self pass.

    With `probs_out` given, the first appended matrix is the temporal
    co-attention (queries = j_te, keys = time tokens), the second the
    refinement pass.
    """
    h_joint = _attend(j_te, l_te, w_fuse, probs_out)
    return _attend(l_te, h_joint, w_refine, probs_out)


def combine_spatiotemporal(h_sp, h_te, mode="gate"):
    """Blend spatial tokens (k, c) with temporal tokens (t, c).

    gate:  channelwise product with the time-mean of `h_te`, keeping k rows.
    outer: every (spatial, time) pair multiplied, giving k*t rows.
    """
    h_sp, h_te = T.as_tensor(h_sp), T.as_tensor(h_te)
    if h_sp.shape[1] != h_te.shape[1]:
        raise ShapeError(
            f"channel mismatch between spatial {h_sp.shape} and temporal {h_te.shape} tokens"
        )
    if mode == "gate":
        return h_sp * T.tensor_mean(h_te, axis=0)
    if mode == "outer":
        k, c = h_sp.shape
        t = h_te.shape[0]
        pairs = T.reshape(h_sp, (k, 1, c)) * T.reshape(h_te, (1, t, c))
        return T.reshape(pairs, (k * t, c))
    raise ConfigError(f"unknown spatiotemporal combine mode {mode!r}")


def bottleneck_refine(h, p):
    """Residual down-up refinement: H' + up(GELU(down(H'))).

    H' is a one-layer MLP (linear + GELU) of the input tokens; the down and
    up projections are bias-free.
    """
    h = T.as_tensor(h)
    pre = T.gelu(T.matmul(h, p.pre_w) + p.pre_b)
    inner = T.gelu(T.matmul(pre, p.down))
    return pre + T.matmul(inner, p.up)


def classify(token_sets, head_w, head_b, pooled_out=None):
    """Mean-pool each refined token set, concatenate, project to 2 logits.

    `pooled_out`, when given a list, receives a copy of the concatenated
    pooled feature vector: this is the embedding the head sees.
    """
    sets = list(token_sets)
    if not sets:
        raise ConfigError("classification head needs at least one modality token set")
    pooled = T.concat([T.tensor_mean(s, axis=0) for s in sets], axis=0)
    if pooled_out is not None:
        pooled_out.append(pooled.data.copy())
    width = pooled.shape[0]
    if head_w.shape[0] != width:
        raise ShapeError(
            f"head expects input width {head_w.shape[0]}, pooled features have {width}"
        )
    logits = T.matmul(T.reshape(pooled, (1, width)), head_w) + head_b
    return T.reshape(logits, (2,))
