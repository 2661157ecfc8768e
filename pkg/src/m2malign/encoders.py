"""Volume and tabular encoders producing channel-major latent features.

A 4D volume ``(1, H, W, D, T)`` is cut into non-overlapping patches of size
``(p_h, p_w, p_d, p_t)``, each patch is linearly embedded, learned positional
vectors are added (factorized into a spatial table and a temporal table), and
a stack of attention stages refines the tokens.  Between stages the spatial
grid is coarsened by concatenating ``m**3`` neighbouring tokens and
projecting to the next stage width; the temporal axis is never merged.

Token order is row-major over ``(h, w, d, t)`` with ``t`` fastest, and every
shape in this module is documented against that order.  The final token
matrix is reassembled into a latent feature tensor ``(c, h, w, d, t)``; sMRI
volumes ride the same code path with a temporal extent of one.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

# Hidden width multiplier of the per-stage MLP.
_MLP_RATIO = 4

_INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    """Hyperparameters of the hierarchical volume encoder.

    `stage_channels` lists the token width per stage; `heads` gives the
    attention head count per stage (default: 2 where the width allows it,
    else 1).  `merge` is the spatial coarsening factor applied between
    stages.  Only full attention over all tokens is supported; the
    `full_attention` flag exists so configs can state that explicitly.
    """

    patch: tuple = (2, 2, 2, 1)
    stage_channels: tuple = (8, 16)
    heads: tuple = None
    merge: int = 2
    full_attention: bool = True

    def __post_init__(self):
        patch = tuple(int(p) for p in self.patch)
        if len(patch) != 4 or any(p < 1 for p in patch):
            raise ConfigError(f"patch must be four positive ints, got {self.patch!r}")
        stages = tuple(int(c) for c in self.stage_channels)
        if not stages or any(c < 1 for c in stages):
            raise ConfigError("stage_channels must be a nonempty list of positive widths")
        if self.heads is None:
            heads = tuple(2 if c % 2 == 0 else 1 for c in stages)
        else:
            heads = tuple(int(h) for h in self.heads)
        if len(heads) != len(stages):
            raise ConfigError(
                f"need one head count per stage: {len(heads)} heads for {len(stages)} stages"
            )
        for c, h in zip(stages, heads):
            if h < 1 or c % h != 0:
                raise ConfigError(f"head count {h} does not divide stage width {c}")
        if self.merge < 1:
            raise ConfigError(f"merge factor must be >= 1, got {self.merge}")
        if not self.full_attention:
            raise ConfigError("windowed attention is not supported; full_attention must stay on")
        object.__setattr__(self, "patch", patch)
        object.__setattr__(self, "stage_channels", stages)
        object.__setattr__(self, "heads", heads)

    @property
    def n_stages(self):
        return len(self.stage_channels)

    @property
    def out_channels(self):
        return self.stage_channels[-1]

    def spatial_reduction(self):
        """Total downsampling per spatial axis: patch size times all merges."""
        m = self.merge ** (self.n_stages - 1)
        return (self.patch[0] * m, self.patch[1] * m, self.patch[2] * m)


def latent_grid(cfg, volume_shape):
    """Latent grid (h, w, d, t) for a volume of shape (1, H, W, D, T).

    Raises ShapeError naming the first indivisible axis.
    """
    if len(volume_shape) != 5 or volume_shape[0] != 1:
        raise ShapeError(f"expected a (1, H, W, D, T) volume, got {tuple(volume_shape)}")
    _, H, W, D, Tlen = volume_shape
    red = cfg.spatial_reduction()
    for axis, extent, div in zip("HWD", (H, W, D), red):
        if extent % div != 0:
            raise ShapeError(
                f"axis {axis} of extent {extent} is not divisible by "
                f"patch*merge^(stages-1) = {div}"
            )
    if Tlen % cfg.patch[3] != 0:
        raise ShapeError(
            f"axis T of extent {Tlen} is not divisible by temporal patch {cfg.patch[3]}"
        )
    return (H // red[0], W // red[1], D // red[2], Tlen // cfg.patch[3])


def init_volume_encoder_params(cfg, volume_shape, rng):
    """Fresh parameter dict for `encode_volume`.

    Weights draw from Normal(0, 0.02), biases start at zero.  Positional
    tables are sized for the post-patching grid of `volume_shape`.
    """
    h, w, d, t = latent_grid(cfg, volume_shape)
    m = cfg.merge ** (cfg.n_stages - 1)
    h0, w0, d0 = h * m, w * m, d * m  # grid right after patch embedding
    p_h, p_w, p_d, p_t = cfg.patch
    c0 = cfg.stage_channels[0]

    params = {}

    def weight(name, shape):
        params[name] = Tensor(rng.normal(0.0, _INIT_STD, size=shape), requires_grad=True, name=name)

    def bias(name, width):
        params[name] = Tensor(np.zeros(width), requires_grad=True, name=name)

    weight("embed_w", (p_h * p_w * p_d * p_t, c0))
    bias("embed_b", c0)
    weight("pos_spatial", (h0 * w0 * d0, c0))
    weight("pos_temporal", (t, c0))

    for i, c in enumerate(cfg.stage_channels):
        for role in ("q", "k", "v", "o"):
            weight(f"stage{i}.attn_w{role}", (c, c))
            bias(f"stage{i}.attn_b{role}", c)
        weight(f"stage{i}.mlp_w1", (c, _MLP_RATIO * c))
        bias(f"stage{i}.mlp_b1", _MLP_RATIO * c)
        weight(f"stage{i}.mlp_w2", (_MLP_RATIO * c, c))
        bias(f"stage{i}.mlp_b2", c)
        if i + 1 < cfg.n_stages:
            weight(f"merge{i}.w", (cfg.merge ** 3 * c, cfg.stage_channels[i + 1]))
            bias(f"merge{i}.b", cfg.stage_channels[i + 1])
    return params


def _patch_tokens(arr, patch):
    """Flatten a (H, W, D, T) array into (n_tokens, patch_volume) rows.

    Tokens are ordered row-major over (h, w, d, t) with t fastest; each row
    is the patch content flattened row-major over (p_h, p_w, p_d, p_t).
    """
    H, W, D, Tlen = arr.shape
    p_h, p_w, p_d, p_t = patch
    h1, w1, d1, t1 = H // p_h, W // p_w, D // p_d, Tlen // p_t
    split = arr.reshape(h1, p_h, w1, p_w, d1, p_d, t1, p_t)
    tokens = split.transpose(0, 2, 4, 6, 1, 3, 5, 7)
    return np.ascontiguousarray(tokens).reshape(h1 * w1 * d1 * t1, p_h * p_w * p_d * p_t)


def _merge_indices(h, w, d, t, m):
    """Gather order that groups each m^3 spatial neighbourhood contiguously."""
    grid = np.arange(h * w * d * t, dtype=np.intp).reshape(h, w, d, t)
    grouped = grid.reshape(h // m, m, w // m, m, d // m, m, t)
    return grouped.transpose(0, 2, 4, 6, 1, 3, 5).reshape(-1)


def _self_attention(x, params, stage, heads):
    n, c = x.shape
    ch = c // heads

    def project(role):
        p = T.matmul(x, params[f"stage{stage}.attn_w{role}"]) + params[f"stage{stage}.attn_b{role}"]
        return T.transpose(T.reshape(p, (n, heads, ch)), (1, 0, 2))

    q, k, v = project("q"), project("k"), project("v")
    scores = T.matmul(q, T.transpose(k, (0, 2, 1))) / np.sqrt(ch)
    attn = T.softmax_last(scores)
    ctx = T.reshape(T.transpose(T.matmul(attn, v), (1, 0, 2)), (n, c))
    out = T.matmul(ctx, params[f"stage{stage}.attn_wo"]) + params[f"stage{stage}.attn_bo"]
    return x + out


def _mlp(x, params, stage):
    hidden = T.gelu(T.matmul(x, params[f"stage{stage}.mlp_w1"]) + params[f"stage{stage}.mlp_b1"])
    return x + T.matmul(hidden, params[f"stage{stage}.mlp_w2"]) + params[f"stage{stage}.mlp_b2"]


def encode_volume(v, cfg, params):
    """Encode a (1, H, W, D, T) volume into a (c, h, w, d, t) latent feature.

    Deterministic for fixed params; the temporal axis survives every stage
    so ``t = T / p_t`` in the output.  A structural volume (T == 1) uses the
    very same path with a temporal patch of one.
    """
    data = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
    h, w, d, t = latent_grid(cfg, data.shape)
    m = cfg.merge ** (cfg.n_stages - 1)
    hs, ws, ds = h * m, w * m, d * m

    x = Tensor(_patch_tokens(data[0], cfg.patch))
    x = T.matmul(x, params["embed_w"]) + params["embed_b"]

    n_sp = hs * ws * ds
    x = x + T.gather_rows(params["pos_spatial"], np.repeat(np.arange(n_sp), t))
    x = x + T.gather_rows(params["pos_temporal"], np.tile(np.arange(t), n_sp))

    for i, c in enumerate(cfg.stage_channels):
        x = _self_attention(x, params, i, cfg.heads[i])
        x = _mlp(x, params, i)
        if i + 1 < cfg.n_stages:
            idx = _merge_indices(hs, ws, ds, t, cfg.merge)
            hs, ws, ds = hs // cfg.merge, ws // cfg.merge, ds // cfg.merge
            grouped = T.reshape(T.gather_rows(x, idx), (hs * ws * ds * t, cfg.merge ** 3 * c))
            x = T.matmul(grouped, params[f"merge{i}.w"]) + params[f"merge{i}.b"]

    c_last = cfg.out_channels
    return T.reshape(T.transpose(x, (1, 0)), (c_last, h, w, d, t))


def init_tabular_encoder_params(n_features, channels, rng, n_tokens=1, hidden=None):
    """Two-layer MLP parameters mapping F features to (channels, n_tokens)."""
    if hidden is None:
        hidden = 2 * channels
    return {
        "w1": Tensor(rng.normal(0.0, _INIT_STD, size=(n_features, hidden)),
                     requires_grad=True, name="w1"),
        "b1": Tensor(np.zeros(hidden), requires_grad=True, name="b1"),
        "w2": Tensor(rng.normal(0.0, _INIT_STD, size=(hidden, n_tokens * channels)),
                     requires_grad=True, name="w2"),
        "b2": Tensor(np.zeros(n_tokens * channels), requires_grad=True, name="b2"),
    }


def encode_tabular(x, params, channels, n_tokens=1):
    """Encode an F-vector into (channels, n_tokens) latent tokens."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if data.ndim != 1:
        raise ShapeError(f"tabular input must be a flat vector, got shape {data.shape}")
    expected = params["w1"].shape[0]
    if data.shape[0] != expected:
        raise ShapeError(f"tabular input has {data.shape[0]} features, encoder expects {expected}")
    row = Tensor(data.reshape(1, -1))
    hidden = T.gelu(T.matmul(row, params["w1"]) + params["b1"])
    out = T.matmul(hidden, params["w2"]) + params["b2"]
    return T.transpose(T.reshape(out, (n_tokens, channels)), (1, 0))


def decompose_spatiotemporal(lf):
    """Split a (c, h, w, d, t) latent into its time-mean spatial map and
    space-mean temporal profile: ((c, h, w, d), (c, t))."""
    if lf.ndim != 5:
        raise ShapeError(f"latent feature must be rank 5, got shape {lf.shape}")
    spatial = T.tensor_mean(lf, axis=4)
    temporal = T.tensor_mean(lf, axis=(1, 2, 3))
    return spatial, temporal


# -- token views -----------------------------------------------------------
# Downstream fusion and alignment work on token matrices; these helpers fix
# the (single) flattening convention: patches row-major over (h, w, d).


def spatial_tokens(spatial):
    """(c, h, w, d) -> (N, c) token matrix, N = h*w*d."""
    c = spatial.shape[0]
    return T.transpose(T.reshape(spatial, (c, -1)), (1, 0))


def temporal_tokens(temporal):
    """(c, t) -> (t, c) token matrix."""
    return T.transpose(temporal, (1, 0))


def patch_time_tokens(lf):
    """(c, h, w, d, t) -> (t, N, c): per-time-step patch vectors."""
    c, h, w, d, t = lf.shape
    return T.transpose(T.reshape(lf, (c, h * w * d, t)), (2, 1, 0))
