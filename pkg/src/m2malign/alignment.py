"""Cross-modal patch alignment: similarity, discrepancy weighting, losses.

Functional and structural latents are compared patch-by-patch: at every
time step the (N, c) functional patch vectors are dotted against the (N, c)
structural ones, giving a (T, N, N) similarity stack whose diagonal holds
the positive pairs.  A contrastive loss pulls each diagonal entry above its
row; optionally every negative term is scaled by a weight derived from a
discrepancy measure between the two patches, so that near-duplicate
cross-modal patches (small discrepancy) are contrasted gently and clearly
unrelated ones at full strength.

Weights are always plain arrays, never graph nodes: within one step they
are constants, otherwise the optimizer could cheat by shrinking them
instead of aligning patches.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor

MEASURES = ("dot", "cosine", "kl", "jsd", "mmd")
DENOMINATOR_MODES = ("standard", "literal")

_COSINE_GUARD = 1e-12
_MMD_BANDWIDTH_FLOOR = 1e-12


@dataclass(frozen=True)
class M2MConfig:
    """Knobs of the alignment loss.

    `loss_weight` is the multiplier applied to the alignment term when it
    is combined with the classification loss.  `denominator_mode` chooses
    whether the positive pair participates in the contrastive denominator
    ("standard") or only the negatives do ("literal"); the literal form can
    go negative and exists for fidelity experiments.
    """

    tau: float = 0.5
    measure: str = "dot"
    weighting: bool = True
    denominator_mode: str = "standard"
    loss_weight: float = 0.1
    symmetric: bool = False
    epsilon_floor: float = 0.1

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if self.measure not in MEASURES:
            raise ConfigError(f"unknown measure {self.measure!r}, pick one of {MEASURES}")
        if self.denominator_mode not in DENOMINATOR_MODES:
            raise ConfigError(f"denominator_mode must be one of {DENOMINATOR_MODES}")
        if not 0.0 <= self.epsilon_floor < 1.0:
            raise ConfigError(f"epsilon_floor must lie in [0, 1), got {self.epsilon_floor}")
        if self.loss_weight < 0:
            raise ConfigError(f"loss weight must be nonnegative, got {self.loss_weight}")


@dataclass
class WeightMatrix:
    """Detached negative-pair weights, one (N, N) slice per time step.

    `w` anchors on functional rows; `w_rev` (only built for symmetric
    losses) anchors on structural rows.
    """

    w: np.ndarray
    w_rev: np.ndarray = None


def patch_series(latent):
    """Detached (t, N, c) patch vectors of a (c, h, w, d, t) latent."""
    data = latent.data if isinstance(latent, Tensor) else np.asarray(latent)
    c = data.shape[0]
    return np.ascontiguousarray(data.reshape(c, -1, data.shape[4]).transpose(2, 1, 0))


def similarity_matrix(lf, ls):
    """Per-time-step patch similarity stack (T, N, N).

    Entry [t, i, j] is the channel dot product of functional patch i at
    time t with structural patch j.  Both latents must live on the same
    (h, w, d) grid with matching channels; the structural latent carries a
    single time step.
    """
    lf, ls = T.as_tensor(lf), T.as_tensor(ls)
    if lf.ndim != 5 or ls.ndim != 5:
        raise ShapeError("latents must be rank-5 (c, h, w, d, t) tensors")
    if ls.shape[4] != 1:
        raise ShapeError(f"structural latent must have a single time step, got {ls.shape[4]}")
    if lf.shape[:4] != ls.shape[:4]:
        raise ShapeError(
            f"latent grids disagree: functional {lf.shape[:4]} vs structural {ls.shape[:4]}"
        )
    c, h, w, d, t = lf.shape
    n = h * w * d
    f_tokens = T.transpose(T.reshape(lf, (c, n, t)), (2, 1, 0))  # (t, N, c)
    s_tokens = T.reshape(ls, (c, n))  # (c, N)
    return T.matmul(f_tokens, s_tokens)


# -- discrepancy measures ----------------------------------------------------


def _softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def _kl(p, q):
    return float(np.sum(p * (np.log(p) - np.log(q))))


def discrepancy(a, b, measure):
    """Dissimilarity of two c-channel patch vectors; higher = more discrepant.

    Similarity measures (dot, cosine) are negated.  kl and jsd first lift
    the vectors to distributions via a channel softmax; mmd treats the c
    channel values as scalar samples under a Gaussian kernel with the
    median-distance bandwidth.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if measure == "dot":
        return float(-(a @ b))
    if measure == "cosine":
        return float(-(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b) + _COSINE_GUARD))
    if measure == "kl":
        return _kl(_softmax(a), _softmax(b))
    if measure == "jsd":
        p, q = _softmax(a), _softmax(b)
        m = 0.5 * (p + q)
        return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)
    if measure == "mmd":
        pooled = np.concatenate([a, b])
        dists = np.abs(pooled[:, None] - pooled[None, :])
        sigma = max(float(np.median(dists[np.triu_indices(len(pooled), k=1)])),
                    _MMD_BANDWIDTH_FLOOR)
        gamma = 1.0 / (2.0 * sigma * sigma)

        def kmean(x, y):
            return float(np.mean(np.exp(-gamma * (x[:, None] - y[None, :]) ** 2)))

        return kmean(a, a) + kmean(b, b) - 2.0 * kmean(a, b)
    raise ConfigError(f"unknown measure {measure!r}, pick one of {MEASURES}")


def discrepancy_matrix(anchors, others, measure):
    """(N_a, N_b) matrix of discrepancy(anchors[i], others[j], measure)."""
    anchors = np.asarray(anchors, dtype=np.float64)
    others = np.asarray(others, dtype=np.float64)
    if measure == "dot":
        return -(anchors @ others.T)
    if measure == "cosine":
        norms = np.linalg.norm(anchors, axis=1)[:, None] * np.linalg.norm(others, axis=1)
        return -(anchors @ others.T) / (norms + _COSINE_GUARD)
    if measure == "kl":
        p = _row_softmax(anchors)
        q = _row_softmax(others)
        return (p * np.log(p)).sum(axis=1)[:, None] - p @ np.log(q).T
    if measure == "jsd":
        p = _row_softmax(anchors)[:, None, :]
        q = _row_softmax(others)[None, :, :]
        m = 0.5 * (p + q)
        kl_pm = (p * (np.log(p) - np.log(m))).sum(axis=2)
        kl_qm = (q * (np.log(q) - np.log(m))).sum(axis=2)
        return 0.5 * kl_pm + 0.5 * kl_qm
    if measure == "mmd":
        out = np.empty((anchors.shape[0], others.shape[0]))
        for i, a in enumerate(anchors):
            for j, b in enumerate(others):
                out[i, j] = discrepancy(a, b, "mmd")
        return out
    raise ConfigError(f"unknown measure {measure!r}, pick one of {MEASURES}")


def _row_softmax(m):
    e = np.exp(m - m.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def weights_from_matrix(d, cfg):
    """Per-row min-max weights from a raw discrepancy matrix.

    Off-diagonal entries of each row are normalized to [0, 1] over that
    row's negatives (rows whose negatives are all equal map to 1), then
    floored at epsilon: w = eps + (1 - eps) * d_norm.  The diagonal is set
    to 1 but never consumed, positives are unweighted by construction.
    """
    d = np.asarray(d, dtype=np.float64)
    n = d.shape[0]
    if n < 2:
        raise ContractError("negative weighting needs at least two patches")
    eps = cfg.epsilon_floor
    off = ~np.eye(n, dtype=bool)
    w = np.ones_like(d)
    for i in range(n):
        row = d[i, off[i]]
        lo, hi = row.min(), row.max()
        if hi > lo:
            w[i, off[i]] = eps + (1.0 - eps) * (row - lo) / (hi - lo)
    return w


def weights_from_discrepancy(anchor_patches, other_patches, cfg):
    """Eq.-style self-weighting: discrepancy matrix -> per-row min-max weights.

    Inputs are detached (N, c) patch matrices; the result is a plain array,
    constant within the current optimization step.
    """
    anchors = np.asarray(anchor_patches, dtype=np.float64)
    others = np.asarray(other_patches, dtype=np.float64)
    if anchors.shape != others.shape:
        raise ShapeError(f"patch sets disagree: {anchors.shape} vs {others.shape}")
    return weights_from_matrix(discrepancy_matrix(anchors, others, cfg.measure), cfg)


def build_weights(lf, ls, cfg):
    """WeightMatrix for a latent pair, one slice per functional time step."""
    f_series = patch_series(lf)
    s_patches = patch_series(ls)[0]
    w = np.stack([weights_from_discrepancy(f_t, s_patches, cfg) for f_t in f_series])
    w_rev = None
    if cfg.symmetric:
        w_rev = np.stack(
            [weights_from_discrepancy(s_patches, f_t, cfg) for f_t in f_series]
        )
    return WeightMatrix(w=w, w_rev=w_rev)


# -- contrastive losses ------------------------------------------------------


def _weighted_nce(s_t, w_t, cfg):
    """Shared kernel of Eqs. style contrastive losses on one (N, N) slice.

    Row-stable: logits are shifted by their detached row max before
    exponentiation, so ``loss_i = -(a_ii - m_i - log z_i)`` is exact in
    float64.  `w_t` scales only off-diagonal (negative) terms; in standard
    mode the positive joins the denominator with weight one.
    """
    n = s_t.shape[0]
    eye = np.eye(n)
    if cfg.denominator_mode == "standard":
        mask = w_t * (1.0 - eye) + eye
    else:
        if n < 2:
            raise ContractError("literal denominator needs at least two patches")
        mask = w_t * (1.0 - eye)
    a = s_t / cfg.tau
    m = a.data.max(axis=1, keepdims=True)
    z = T.tensor_sum(T.exp(a - Tensor(m)) * Tensor(mask), axis=1)
    pos = T.tensor_sum(a * Tensor(eye), axis=1)
    per_anchor = Tensor(m.reshape(n)) + T.log(z) - pos
    return T.tensor_mean(per_anchor)


def info_nce_loss(s_t, cfg):
    """Contrastive loss on one similarity slice with diagonal positives.

    Mean over anchors of -log(exp(s_ii / tau) / Z_i); the denominator
    follows cfg.denominator_mode.
    """
    s_t = T.as_tensor(s_t)
    if s_t.ndim != 2 or s_t.shape[0] != s_t.shape[1]:
        raise ShapeError(f"similarity slice must be square, got {s_t.shape}")
    return _weighted_nce(s_t, np.ones(s_t.shape), cfg)


def m2m_loss(s, weights, cfg):
    """Discrepancy-weighted contrastive loss over all time steps.

    Per time step the anchors are averaged, then the per-step losses are
    summed over t.  `weights` may be a WeightMatrix, a raw (T, N, N) array,
    or None; with cfg.weighting false (or None given) every negative weighs
    one, which makes the loss equal info_nce_loss summed over time,
    bit for bit.  Symmetric mode adds the structural-anchored loss of the
    transposed slices and halves the sum.
    """
    s = T.as_tensor(s)
    if s.ndim != 3 or s.shape[1] != s.shape[2]:
        raise ShapeError(f"similarity stack must be (T, N, N), got {s.shape}")
    t_steps, n, _ = s.shape

    if isinstance(weights, WeightMatrix):
        w, w_rev = weights.w, weights.w_rev
    else:
        w, w_rev = weights, None
    if not cfg.weighting or w is None:
        w = np.ones(s.shape)
        w_rev = np.ones(s.shape)
    else:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != s.shape:
            raise ShapeError(f"weight stack {w.shape} does not match similarities {s.shape}")
    if cfg.symmetric and w_rev is None:
        raise ContractError(
            "symmetric loss with weighting needs reverse-anchored weights; "
            "build them with build_weights"
        )

    total = None
    for t in range(t_steps):
        s_t = T.reshape(T.narrow(s, 0, t, 1), (n, n))
        term = _weighted_nce(s_t, w[t], cfg)
        if cfg.symmetric:
            rev = _weighted_nce(T.transpose(s_t, (1, 0)), w_rev[t], cfg)
            term = 0.5 * (term + rev)
        total = term if total is None else total + term
    return total


def total_loss(ce, m2m, cfg):
    """Training objective: classification term plus weighted alignment term."""
    return T.as_tensor(ce) + cfg.loss_weight * T.as_tensor(m2m)


# -- retrieval evaluation ----------------------------------------------------


def recall_at_k(sim, k=1, anchors=None):
    """Fraction of anchors whose own column ranks in the row's top k.

    `sim` is an (N, N) matrix or a (T, N, N) stack (averaged over time
    first).  Ties with the positive count half a rank, so a constant row
    scores a hit only when half the competitors fit inside k.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim == 3:
        sim = sim.mean(axis=0)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ShapeError(f"similarity must be square, got {sim.shape}")
    rows = list(range(sim.shape[0])) if anchors is None else list(anchors)
    if not rows:
        raise ContractError("recall needs at least one anchor")
    hits = 0
    for i in rows:
        row = sim[i]
        rank = float((row > row[i]).sum()) + 0.5 * float((row == row[i]).sum() - 1)
        hits += rank < k
    return hits / len(rows)
