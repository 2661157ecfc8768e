"""Canned finite-difference scenarios for the fusion and loss gradients.

Each scenario builds a small, fixed-seed problem, watches its trainable
tensors, and exposes a scalar loss closure for `finite_diff_check`.  The
CLI `gradcheck` command and the acceptance tests share this list, so a
regression in any backward rule shows up in both.

Parameter scales are deliberately moderate (around 0.3 to 0.7): far below
that, true gradients sink under the finite-difference noise floor of
``ulp(loss) / h``; far above, the softmaxes saturate and gradients vanish
for the opposite reason.  Alignment weights are frozen at the base point
before checking, since the training path treats them as constants of the
current step.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .alignment import M2MConfig, MEASURES, build_weights, m2m_loss, similarity_matrix
from .encoders import EncoderConfig
from .fusion import (
    AttentionWeights,
    BottleneckParams,
    bottleneck_refine,
    latent_query_coattention,
    refine_with_joint,
)
from .gradcheck import finite_diff_check
from .model import ModelConfig, flatten_params, forward, init_model_params
from .tensor import Tensor
from .training import cross_entropy

SCALES = ("tiny", "small")


@dataclass
class Scenario:
    name: str
    loss_fn: object
    params: dict


@dataclass
class ScenarioResult:
    name: str
    max_rel_err: float
    n_coords: int
    worst_param: str
    seconds: float

    def passed(self, tol=1e-4):
        return self.max_rel_err < tol


def _weights(rng, c, std, prefix):
    def tensor(name):
        return Tensor(rng.normal(0.0, std, size=(c, c)), requires_grad=True, name=name)

    return AttentionWeights(wq=tensor(f"{prefix}.wq"), wk=tensor(f"{prefix}.wk"),
                            wv=tensor(f"{prefix}.wv"))


def _direction(rng, shape):
    return Tensor(rng.normal(size=shape))


def coattention_scenario(rng, n_queries=2, n_keys=3, c=8):
    j = Tensor(rng.normal(0.0, 0.7, size=(n_queries, c)), requires_grad=True, name="j")
    keys = Tensor(rng.normal(0.0, 0.7, size=(n_keys, c)))
    w = _weights(rng, c, 0.5, "w")
    d = _direction(rng, (n_queries, c))
    params = {"j": j, "wq": w.wq, "wk": w.wk, "wv": w.wv}

    def loss():
        return T.tensor_sum(latent_query_coattention(j, keys, w) * d)

    return Scenario("coattention", loss, params)


def refinement_scenario(rng, n_tokens=3, n_joint=4, c=8):
    tokens = Tensor(rng.normal(0.0, 0.7, size=(n_tokens, c)), requires_grad=True, name="tokens")
    joint = Tensor(rng.normal(0.0, 0.7, size=(n_joint, c)))
    w = _weights(rng, c, 0.5, "w")
    d = _direction(rng, (n_tokens, c))
    params = {"tokens": tokens, "wq": w.wq, "wk": w.wk, "wv": w.wv}

    def loss():
        return T.tensor_sum(refine_with_joint(tokens, joint, w) * d)

    return Scenario("refinement", loss, params)


def bottleneck_scenario(rng, n_tokens=3, c=8):
    h = Tensor(rng.normal(0.0, 0.7, size=(n_tokens, c)), requires_grad=True, name="h")
    p = BottleneckParams(
        pre_w=Tensor(rng.normal(0.0, 0.5, size=(c, c)), requires_grad=True, name="pre_w"),
        pre_b=Tensor(rng.normal(0.0, 0.3, size=c), requires_grad=True, name="pre_b"),
        down=Tensor(rng.normal(0.0, 0.5, size=(c, c // 4)), requires_grad=True, name="down"),
        up=Tensor(rng.normal(0.0, 0.5, size=(c // 4, c)), requires_grad=True, name="up"),
    )
    d = _direction(rng, (n_tokens, c))
    params = {"h": h, "pre_w": p.pre_w, "pre_b": p.pre_b, "down": p.down, "up": p.up}

    def loss():
        return T.tensor_sum(bottleneck_refine(h, p) * d)

    return Scenario("bottleneck", loss, params)


def m2m_scenario(rng, measure, n=4, c=8, t=2):
    lf = Tensor(rng.normal(0.0, 0.6, size=(c, 2, 1, 2, t)), requires_grad=True, name="lf")
    ls = Tensor(rng.normal(0.0, 0.6, size=(c, 2, 1, 2, 1)), requires_grad=True, name="ls")
    cfg = M2MConfig(measure=measure, tau=0.5)
    frozen = build_weights(lf, ls, cfg)

    def loss():
        return m2m_loss(similarity_matrix(lf, ls), frozen, cfg)

    return Scenario(f"m2m-{measure}", loss, {"lf": lf, "ls": ls})


def full_model_scenario(seed=4, volume_shape=(4, 4, 2, 2)):
    """One training step's loss (cross-entropy + weighted alignment).

    The weight scales and the seed are calibrated together so that every
    watched coordinate keeps a true gradient comfortably above the
    finite-difference noise floor of roughly ``ulp(loss) / h``: bottleneck
    projections are drawn smaller than the rest so the gated fMRI tokens
    do not push the inner GELU into its flat tail, and the label is the
    smaller logit so cross-entropy stays away from its saturated zone.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    cfg = ModelConfig(
        volume_shape=volume_shape,
        n_tabular=3,
        encoder=EncoderConfig(patch=(2, 2, 2, 1), stage_channels=(8,)),
        share_encoder_weights=True,
    )
    params = init_model_params(cfg, rng)
    flat = flatten_params(params)
    for name, p in flat.items():
        std = 0.15 if name.startswith("bottleneck") else 0.35
        p.data = rng.normal(0.0, std, size=p.shape)
    # the key-projection bias adds the same offset to every logit in an
    # attention row, which the softmax cancels exactly; its true gradient
    # is identically zero, so both estimators return rounding noise there
    watch = {name: p for name, p in flat.items() if not name.endswith(".attn_bk")}

    h, w, d, t = volume_shape
    inputs = {
        "fmri": Tensor(rng.normal(0.0, 0.7, size=(1, h, w, d, t))),
        "smri": Tensor(rng.normal(0.0, 0.7, size=(1, h, w, d, 1))),
        "tabular": rng.normal(0.0, 0.7, size=3),
    }
    m2m_cfg = M2MConfig(tau=1.0, loss_weight=0.05)
    base = forward(params, cfg, **inputs)
    label = int(np.argmin(base.logits.data))
    frozen = build_weights(base.functional_latent, base.structural_latent, m2m_cfg)

    def loss():
        out = forward(params, cfg, **inputs)
        ce = cross_entropy(out.logits, label)
        align = m2m_loss(
            similarity_matrix(out.functional_latent, out.structural_latent), frozen, m2m_cfg
        )
        return ce + m2m_cfg.loss_weight * align

    return Scenario("full-model", loss, watch)


def _stream(seed, index):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7, index)))


def build_scenarios(scale="tiny", seed=0):
    """The gradient-check suite; `small` enlarges a few token counts."""
    if scale not in SCALES:
        raise ValueError(f"scale must be one of {SCALES}, got {scale!r}")
    big = scale == "small"
    scenarios = [
        coattention_scenario(_stream(seed, 0), n_queries=4 if big else 2, n_keys=6 if big else 3),
        refinement_scenario(_stream(seed, 1), n_tokens=5 if big else 3, n_joint=6 if big else 4),
        bottleneck_scenario(_stream(seed, 2), n_tokens=5 if big else 3),
    ]
    scenarios += [
        m2m_scenario(_stream(seed, 3 + i), measure, t=3 if big else 2)
        for i, measure in enumerate(MEASURES)
    ]
    # default full-model seeds are calibrated per volume shape; see the
    # scenario docstring for what the calibration protects against
    scenarios.append(
        full_model_scenario(
            seed=seed + (10 if big else 4),
            volume_shape=(4, 4, 4, 2) if big else (4, 4, 2, 2),
        )
    )
    return scenarios


def run_scenarios(scale="tiny", h=1e-5, seed=0):
    results = []
    for scenario in build_scenarios(scale, seed):
        start = time.perf_counter()
        report = finite_diff_check(scenario.loss_fn, scenario.params, h=h)
        results.append(
            ScenarioResult(
                name=scenario.name,
                max_rel_err=report.max_rel_err,
                n_coords=report.n_coords,
                worst_param=report.worst_param,
                seconds=time.perf_counter() - start,
            )
        )
    return results
