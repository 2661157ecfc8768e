"""The full multimodal classifier wired from encoders and fusion blocks.

A forward pass encodes each configured modality (functional volume,
structural volume, tabular vector), fuses the concatenated spatial tokens
under a trainable latent query, refines every modality against the fused
set, runs the two-step temporal fusion on the functional time profile,
gates space with time, pushes each stream through a residual bottleneck,
and classifies the pooled concatenation.  The two volume latents are also
returned untouched so the alignment loss can act on them directly.

Each fusion stage can be switched off for ablations: no temporal fusion
means the raw time tokens pass straight through, no spatial fusion swaps
the latent-query attention for plain addition of the modality token sets,
no refinement leaves modality tokens as the encoders produced them.

Parameters live in one nested dict; `flatten_params` presents them as a
flat name -> tensor mapping for the optimizer, gradient tape, and
checkpoint bundles.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .encoders import (
    EncoderConfig,
    decompose_spatiotemporal,
    encode_tabular,
    encode_volume,
    init_tabular_encoder_params,
    init_volume_encoder_params,
    latent_grid,
    spatial_tokens,
    temporal_tokens,
)
from .errors import ConfigError, ContractError, ShapeError
from .fusion import (
    AttentionWeights,
    BottleneckParams,
    bottleneck_refine,
    classify,
    combine_spatiotemporal,
    init_attention_weights,
    init_bottleneck_params,
    latent_query_coattention,
    refine_with_joint,
    temporal_self_fusion,
)
from .tensor import Tensor

MODALITIES = ("fmri", "smri", "tabular")
ATTENTION_TAGS = ("joint-spatial", "refine-fmri", "refine-smri", "refine-tabular", "temporal")

ST_COMBINE_MODES = ("gate", "outer")


@dataclass(frozen=True)
class ModelConfig:
    """Shapes, modality subset, and ablation toggles of the classifier.

    `volume_shape` is the functional volume's (H, W, D, T); the structural
    volume shares the spatial extents with T = 1.  Query counts default to
    the matching token counts (`None`).  With `share_encoder_weights` both
    volumes run through one parameter set, which requires a temporal patch
    of one so the flattened patches line up.
    """

    volume_shape: tuple
    n_tabular: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    use_fmri: bool = True
    use_smri: bool = True
    use_tabular: bool = True
    temporal_self_fusion: bool = True
    spatial_fusion: bool = True
    modality_refinement: bool = True
    alignment: bool = True
    st_combine: str = "gate"
    n_spatial_queries: int = None
    n_temporal_queries: int = None
    share_encoder_weights: bool = False
    tabular_tokens: int = 1

    def __post_init__(self):
        shape = tuple(int(v) for v in self.volume_shape)
        if len(shape) != 4 or any(v < 1 for v in shape):
            raise ConfigError(f"volume_shape must be (H, W, D, T), got {self.volume_shape!r}")
        object.__setattr__(self, "volume_shape", shape)
        if not (self.use_fmri or self.use_smri or self.use_tabular):
            raise ConfigError("at least one modality must be enabled")
        if self.use_tabular and self.n_tabular < 1:
            raise ConfigError("tabular modality enabled but n_tabular < 1")
        if self.st_combine not in ST_COMBINE_MODES:
            raise ConfigError(f"st_combine must be one of {ST_COMBINE_MODES}")
        if self.alignment and not (self.use_fmri and self.use_smri):
            raise ConfigError("alignment needs both volume modalities enabled")
        if self.share_encoder_weights:
            if not (self.use_fmri and self.use_smri):
                raise ConfigError("shared encoder weights need both volume modalities")
            if self.encoder.patch[3] != 1:
                raise ConfigError(
                    "shared encoder weights need a temporal patch of 1, "
                    f"got {self.encoder.patch[3]}"
                )
        if self.tabular_tokens < 1:
            raise ConfigError("tabular_tokens must be >= 1")

    @property
    def channels(self):
        return self.encoder.out_channels

    def fmri_shape(self):
        return (1, *self.volume_shape)

    def smri_shape(self):
        h, w, d, _ = self.volume_shape
        return (1, h, w, d, 1)

    def smri_encoder_config(self):
        p = self.encoder.patch
        return replace(self.encoder, patch=(p[0], p[1], p[2], 1))

    def grid(self):
        """Latent (h, w, d, t) of the functional volume."""
        return latent_grid(self.encoder, self.fmri_shape())

    def n_patches(self):
        h, w, d, _ = self.grid()
        return h * w * d

    def joint_token_count(self):
        n = 0
        if self.use_fmri:
            n += self.n_patches()
        if self.use_smri:
            n += self.n_patches()
        if self.use_tabular:
            n += self.tabular_tokens
        return n

    def modality_subset(self):
        return tuple(m for m in MODALITIES if getattr(self, f"use_{m}"))


@dataclass
class ModelOutput:
    """Logits plus the raw volume latents and the softmax score matrices."""

    logits: Tensor
    functional_latent: Tensor = None
    structural_latent: Tensor = None
    attention: dict = field(default_factory=dict)
    pooled: np.ndarray = None


def init_model_params(cfg, rng):
    """Nested parameter dict for `forward`, freshly initialized.

    Projection weights draw from Normal(0, 0.02); the latent query matrices
    draw from Normal(0, 1).  Only parameters the configuration actually
    uses are created, so checkpoints state exactly what a run trained.
    """
    c = cfg.channels
    params = {}
    if cfg.use_fmri:
        params["fmri_encoder"] = init_volume_encoder_params(cfg.encoder, cfg.fmri_shape(), rng)
    if cfg.use_smri and not cfg.share_encoder_weights:
        params["smri_encoder"] = init_volume_encoder_params(
            cfg.smri_encoder_config(), cfg.smri_shape(), rng
        )
    if cfg.use_tabular:
        params["tabular_encoder"] = init_tabular_encoder_params(
            cfg.n_tabular, c, rng, n_tokens=cfg.tabular_tokens
        )

    if cfg.spatial_fusion:
        n_q = cfg.n_spatial_queries or cfg.joint_token_count()
        params["j_spatial"] = Tensor(rng.normal(size=(n_q, c)), requires_grad=True, name="j_spatial")
        params["joint_attn"] = init_attention_weights(c, rng)
    if cfg.modality_refinement:
        for m in cfg.modality_subset():
            params[f"refine_{m}"] = init_attention_weights(c, rng)
    if cfg.use_fmri and cfg.temporal_self_fusion:
        m_q = cfg.n_temporal_queries or cfg.grid()[3]
        params["j_temporal"] = Tensor(
            rng.normal(size=(m_q, c)), requires_grad=True, name="j_temporal"
        )
        params["temporal_fuse"] = init_attention_weights(c, rng)
        params["temporal_refine"] = init_attention_weights(c, rng)
    for m in cfg.modality_subset():
        params[f"bottleneck_{m}"] = init_bottleneck_params(c, rng)

    width = c * len(cfg.modality_subset())
    params["head_w"] = Tensor(rng.normal(0.0, 0.02, size=(width, 2)), requires_grad=True, name="head_w")
    params["head_b"] = Tensor(np.zeros(2), requires_grad=True, name="head_b")
    return params


def _added_tokens(token_sets):
    """Ablation stand-in for spatial fusion: sum the modality token sets.

    Sets with a single token broadcast over the rows of the widest set;
    differing multi-token counts have no sensible sum and are rejected.
    """
    counts = {s.shape[0] for s in token_sets if s.shape[0] > 1}
    if len(counts) > 1:
        raise ShapeError(f"cannot add token sets with row counts {sorted(counts)}")
    total = token_sets[0]
    for s in token_sets[1:]:
        total = total + s
    return total


def forward(params, cfg, fmri=None, smri=None, tabular=None):
    """Run the classifier; returns logits, volume latents, attention scores.

    Inputs for disabled modalities are ignored; a missing input for an
    enabled one is a contract violation.  Attention matrices come back as
    plain arrays keyed by stage tag, rows being queries.
    """
    attn = {}
    lf = ls = None
    token_sets = []  # (modality, tokens) in the fixed fMRI, sMRI, tabular order

    if cfg.use_fmri:
        if fmri is None:
            raise ContractError("model configured for fMRI but no functional volume given")
        lf = encode_volume(fmri, cfg.encoder, params["fmri_encoder"])
        f_spatial, f_temporal = decompose_spatiotemporal(lf)
        l_f_sp = spatial_tokens(f_spatial)
        l_f_te = temporal_tokens(f_temporal)
        token_sets.append(("fmri", l_f_sp))
    if cfg.use_smri:
        if smri is None:
            raise ContractError("model configured for sMRI but no structural volume given")
        enc = params["fmri_encoder"] if cfg.share_encoder_weights else params["smri_encoder"]
        ls = encode_volume(smri, cfg.smri_encoder_config(), enc)
        l_s_sp = spatial_tokens(T.reshape(ls, ls.shape[:4]))
        token_sets.append(("smri", l_s_sp))
    if cfg.use_tabular:
        if tabular is None:
            raise ContractError("model configured for tabular input but none given")
        l_tab = T.transpose(
            encode_tabular(tabular, params["tabular_encoder"], cfg.channels, cfg.tabular_tokens),
            (1, 0),
        )
        token_sets.append(("tabular", l_tab))

    if cfg.spatial_fusion:
        l_joint = T.concat([s for _, s in token_sets], axis=0)
        probs = []
        h_joint = latent_query_coattention(params["j_spatial"], l_joint, params["joint_attn"], probs)
        attn["joint-spatial"] = probs[0]
    else:
        h_joint = _added_tokens([s for _, s in token_sets])

    refined = {}
    for m, tokens in token_sets:
        if cfg.modality_refinement:
            probs = []
            refined[m] = refine_with_joint(tokens, h_joint, params[f"refine_{m}"], probs)
            attn[f"refine-{m}"] = probs[0]
        else:
            refined[m] = tokens

    if cfg.use_fmri:
        if cfg.temporal_self_fusion:
            probs = []
            h_f_te = temporal_self_fusion(
                l_f_te, params["j_temporal"], params["temporal_fuse"],
                params["temporal_refine"], probs,
            )
            attn["temporal"] = probs[0]
        else:
            h_f_te = l_f_te
        refined["fmri"] = combine_spatiotemporal(refined["fmri"], h_f_te, cfg.st_combine)

    streams = [bottleneck_refine(refined[m], params[f"bottleneck_{m}"]) for m in refined]
    pooled_out = []
    logits = classify(streams, params["head_w"], params["head_b"], pooled_out=pooled_out)
    return ModelOutput(
        logits=logits,
        functional_latent=lf,
        structural_latent=ls,
        attention=attn,
        pooled=pooled_out[0],
    )


def forward_subject(params, cfg, subject):
    return forward(params, cfg, fmri=subject.fmri, smri=subject.smri, tabular=subject.tabular)


def _flat_items(prefix, value):
    if isinstance(value, Tensor):
        yield prefix, value
    elif isinstance(value, dict):
        for key in value:
            yield from _flat_items(f"{prefix}.{key}" if prefix else key, value[key])
    elif isinstance(value, AttentionWeights):
        for key in ("wq", "wk", "wv"):
            yield f"{prefix}.{key}", getattr(value, key)
    elif isinstance(value, BottleneckParams):
        for key in ("pre_w", "pre_b", "down", "up"):
            yield f"{prefix}.{key}", getattr(value, key)
    else:
        raise ContractError(f"unexpected parameter node {prefix!r}: {type(value).__name__}")


def flatten_params(params):
    """Flat ``dotted.name -> Tensor`` view sharing storage with the nest."""
    return dict(_flat_items("", params))


def load_into(params, loaded):
    """Copy a flat name -> Tensor mapping into an existing parameter nest.

    Shapes must match exactly; unknown or missing names are errors, so a
    checkpoint silently trained with another configuration cannot leak in.
    """
    flat = flatten_params(params)
    if set(flat) != set(loaded):
        missing = sorted(set(flat) - set(loaded))
        extra = sorted(set(loaded) - set(flat))
        raise ContractError(f"parameter names differ: missing {missing}, unexpected {extra}")
    for name, t in flat.items():
        src = loaded[name]
        if src.shape != t.shape:
            raise ShapeError(f"{name}: checkpoint shape {src.shape} vs model shape {t.shape}")
        t.data = src.data.copy()
    return params
