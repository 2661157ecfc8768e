"""Optimization: AdamW, warmup-cosine schedule, stratified CV, train loops.

Everything here is deterministic given the config seed.  Randomness flows
from `numpy.random.SeedSequence(seed, spawn_key=...)` streams: one for the
fold split, one per fold for parameter init, one per fold for batch order.
Batches are visited in a seeded permutation that is re-drawn every epoch;
within a batch, subjects are processed in index order.

The classification term is the mean cross-entropy over the batch; the
alignment term is the mean of the per-subject alignment losses, scaled by
the configured loss weight.  When alignment is toggled off (or its weight
is zero) the term is skipped entirely rather than multiplied by zero, so
the two ways of disabling it produce bit-identical trajectories.
"""

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .alignment import build_weights, m2m_loss, similarity_matrix
from .encoders import encode_volume, init_volume_encoder_params
from .errors import ConfigError, ContractError, StratificationError
from .metrics import MetricsReport, accuracy, pr_auc, roc_auc
from .model import flatten_params, forward_subject, init_model_params
from .tensor import GradientTape, Tensor
from .tensorfile import save_params

LR_MIN = 0.0


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer, schedule, and cross-validation settings."""

    lr_max: float = 0.001
    warmup_epochs: int = 20
    total_epochs: int = 100
    folds: int = 5
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.lr_max <= 0:
            raise ConfigError(f"lr_max must be positive, got {self.lr_max}")
        if self.total_epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epoch counts cannot be negative")
        if self.total_epochs > 0 and self.warmup_epochs >= self.total_epochs:
            raise ConfigError(
                f"warmup ({self.warmup_epochs}) must end before the last epoch "
                f"({self.total_epochs})"
            )
        if self.folds < 2:
            raise ConfigError(f"cross-validation needs >= 2 folds, got {self.folds}")
        b1, b2 = self.betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay cannot be negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        object.__setattr__(self, "betas", (float(b1), float(b2)))


def lr_at_epoch(e, cfg):
    """Linear warmup to lr_max, then cosine decay to zero.

    The warmup hits lr_max at its final epoch, the cosine branch starts
    there and ends at zero on the last epoch.  A degenerate one-epoch
    cosine span stays at lr_max (there is no room to decay).
    """
    if not 0 <= e < cfg.total_epochs:
        raise ContractError(f"epoch {e} outside [0, {cfg.total_epochs})")
    if e < cfg.warmup_epochs:
        return cfg.lr_max * (e + 1) / cfg.warmup_epochs
    span = cfg.total_epochs - 1 - cfg.warmup_epochs
    if span == 0:
        return cfg.lr_max
    frac = (e - cfg.warmup_epochs) / span
    return float(LR_MIN + 0.5 * (cfg.lr_max - LR_MIN) * (1.0 + np.cos(np.pi * frac)))


@dataclass
class OptimizerState:
    """First/second moment accumulators per parameter plus the step count."""

    m: dict
    v: dict
    step: int = 0


def init_optimizer_state(flat_params):
    return OptimizerState(
        m={name: np.zeros(p.shape) for name, p in flat_params.items()},
        v={name: np.zeros(p.shape) for name, p in flat_params.items()},
    )


def adamw_step(flat_params, grads, state, lr, cfg):
    """One decoupled-weight-decay Adam update, applied in place.

    `grads` maps parameter name to gradient array.  Decay pulls directly on
    the parameter (θ −= lr·wd·θ) instead of entering the moments.
    """
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    for name, p in flat_params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"{name}: gradient shape {g.shape} vs parameter {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data -= lr * (m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * p.data)
    return flat_params


def stratified_folds(labels, folds, seed):
    """Partition indices into `folds` validation groups, class-balanced.

    Each class's indices are shuffled with the seeded generator and dealt
    round-robin, so per-fold class counts differ by at most one and the
    split is a pure function of (labels, folds, seed).
    """
    y = np.asarray(labels)
    if y.ndim != 1 or y.size == 0:
        raise ContractError("labels must be a nonempty vector")
    if folds < 2:
        raise ConfigError(f"need at least 2 folds, got {folds}")
    class_counts = np.bincount(y, minlength=2)
    if np.count_nonzero(class_counts) < 2:
        raise StratificationError("both classes are needed to stratify")
    if class_counts[class_counts > 0].min() < folds:
        raise StratificationError(
            f"minority class has {class_counts[class_counts > 0].min()} samples, "
            f"cannot fill {folds} folds"
        )
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    assignments = [[] for _ in range(folds)]
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        rng.shuffle(idx)
        for offset, i in enumerate(idx):
            assignments[offset % folds].append(int(i))
    return [np.array(sorted(group)) for group in assignments]


def cross_entropy(logits, label):
    """Stable two-class cross-entropy of a (2,) logit tensor."""
    shift = float(logits.data.max())
    z = logits - shift
    lse = T.log(T.tensor_sum(T.exp(z)))
    return lse - T.tensor_sum(T.narrow(z, 0, int(label), 1))


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _alignment_enabled(model_cfg, m2m_cfg):
    return model_cfg.alignment and m2m_cfg.loss_weight > 0


def _subject_alignment_loss(out, m2m_cfg):
    sim = similarity_matrix(out.functional_latent, out.structural_latent)
    weights = build_weights(out.functional_latent, out.structural_latent, m2m_cfg)
    return m2m_loss(sim, weights, m2m_cfg)


@dataclass
class FoldResult:
    """Trained parameters, per-epoch loss rows, and validation metrics."""

    params: dict
    history: list
    metrics: dict
    scores: np.ndarray = None
    labels: np.ndarray = None


def evaluate(params, model_cfg, subjects):
    """Positive-class probabilities, logits, and labels for a subject list."""
    logits = np.empty((len(subjects), 2))
    labels = np.empty(len(subjects), dtype=int)
    for i, s in enumerate(subjects):
        logits[i] = forward_subject(params, model_cfg, s).logits.data
        labels[i] = s.label
    scores = 1.0 / (1.0 + np.exp(logits[:, 0] - logits[:, 1]))
    return scores, logits, labels


def train_fold(train_subjects, val_subjects, model_cfg, m2m_cfg, train_cfg, seed_seq=None):
    """Train on one split and score the held-out subjects.

    Deterministic for a fixed seed sequence; `cross_validate` passes one
    child sequence per fold.  Raises StratificationError if the training
    half lacks a class, since cross-entropy against a single class would
    just saturate the head.
    """
    labels = {s.label for s in train_subjects}
    if labels != {0, 1}:
        raise StratificationError(f"training split holds only class(es) {sorted(labels)}")
    if seed_seq is None:
        seed_seq = np.random.SeedSequence(train_cfg.seed)
    init_ss, order_ss = seed_seq.spawn(2)

    params = init_model_params(model_cfg, np.random.default_rng(init_ss))
    flat = flatten_params(params)
    state = init_optimizer_state(flat)
    order_rng = np.random.default_rng(order_ss)
    with_alignment = _alignment_enabled(model_cfg, m2m_cfg)

    history = []
    for epoch in range(train_cfg.total_epochs):
        lr = lr_at_epoch(epoch, train_cfg)
        ce_sum = 0.0
        m2m_sum = 0.0
        total_sum = 0.0
        for batch in _batches(len(train_subjects), train_cfg.batch_size, order_rng):
            tape = GradientTape().watch(flat.values())
            ce_terms = []
            m2m_terms = []
            for i in batch:
                subject = train_subjects[int(i)]
                out = forward_subject(params, model_cfg, subject)
                ce_terms.append(cross_entropy(out.logits, subject.label))
                if with_alignment:
                    m2m_terms.append(_subject_alignment_loss(out, m2m_cfg))
            ce = _mean_terms(ce_terms)
            if with_alignment:
                m2m = _mean_terms(m2m_terms)
                loss = ce + m2m_cfg.loss_weight * m2m
                m2m_value = m2m.item()
            else:
                loss = ce
                m2m_value = 0.0
            grads = tape.gradients(loss)
            adamw_step(flat, {n: grads[p] for n, p in flat.items()}, state, lr, train_cfg)
            ce_sum += ce.item() * len(batch)
            m2m_sum += m2m_value * len(batch)
            total_sum += loss.item() * len(batch)
        n = len(train_subjects)
        history.append(
            {
                "epoch": epoch,
                "ce": ce_sum / n,
                "m2m": m2m_sum / n,
                "total": total_sum / n,
                "lr": lr,
            }
        )

    result = FoldResult(params=params, history=history, metrics={})
    if val_subjects:
        scores, logits, labels = evaluate(params, model_cfg, val_subjects)
        result.scores, result.labels = scores, labels
        result.metrics = {
            "pr_auc": pr_auc(scores, labels),
            "roc_auc": roc_auc(scores, labels),
            "accuracy": accuracy(logits, labels),
        }
    return result


def _mean_terms(terms):
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))


@dataclass
class CVResult:
    report: MetricsReport
    folds: list = field(default_factory=list)
    fold_indices: list = field(default_factory=list)


def cross_validate(subjects, model_cfg, m2m_cfg, train_cfg):
    """Stratified k-fold training; aggregates fold metrics into a report."""
    labels = [s.label for s in subjects]
    val_groups = stratified_folds(labels, train_cfg.folds, train_cfg.seed)
    root = np.random.SeedSequence(train_cfg.seed, spawn_key=(1,))
    fold_seeds = root.spawn(train_cfg.folds)

    report = MetricsReport()
    results = []
    for k, val_idx in enumerate(val_groups):
        val_set = set(int(i) for i in val_idx)
        train_subjects = [s for i, s in enumerate(subjects) if i not in val_set]
        val_subjects = [subjects[int(i)] for i in val_idx]
        fold = train_fold(
            train_subjects, val_subjects, model_cfg, m2m_cfg, train_cfg, seed_seq=fold_seeds[k]
        )
        report.add_fold(**fold.metrics)
        results.append(fold)
    return CVResult(report=report, folds=results, fold_indices=val_groups)


def fit_alignment(subjects, model_cfg, m2m_cfg, train_cfg):
    """Train the two volume encoders with the alignment loss alone.

    No labels and no classifier are involved; this isolates whether the
    contrastive objective can recover the planted patch correspondence.
    Returns the encoder parameter dict and the per-epoch loss history.
    """
    if not subjects:
        raise ContractError("no subjects to fit")
    seed_seq = np.random.SeedSequence(train_cfg.seed)
    init_ss, order_ss = seed_seq.spawn(2)
    rng = np.random.default_rng(init_ss)

    params = {"fmri_encoder": init_volume_encoder_params(model_cfg.encoder, model_cfg.fmri_shape(), rng)}
    if not model_cfg.share_encoder_weights:
        params["smri_encoder"] = init_volume_encoder_params(
            model_cfg.smri_encoder_config(), model_cfg.smri_shape(), rng
        )
    flat = flatten_params(params)
    state = init_optimizer_state(flat)
    order_rng = np.random.default_rng(order_ss)

    def latents(subject):
        lf = encode_volume(subject.fmri, model_cfg.encoder, params["fmri_encoder"])
        enc = params["fmri_encoder"] if model_cfg.share_encoder_weights else params["smri_encoder"]
        ls = encode_volume(subject.smri, model_cfg.smri_encoder_config(), enc)
        return lf, ls

    history = []
    for epoch in range(train_cfg.total_epochs):
        lr = lr_at_epoch(epoch, train_cfg)
        loss_sum = 0.0
        for batch in _batches(len(subjects), train_cfg.batch_size, order_rng):
            tape = GradientTape().watch(flat.values())
            terms = []
            for i in batch:
                lf, ls = latents(subjects[int(i)])
                sim = similarity_matrix(lf, ls)
                terms.append(m2m_loss(sim, build_weights(lf, ls, m2m_cfg), m2m_cfg))
            loss = _mean_terms(terms)
            grads = tape.gradients(loss)
            adamw_step(flat, {n: grads[p] for n, p in flat.items()}, state, lr, train_cfg)
            loss_sum += loss.item() * len(batch)
        history.append({"epoch": epoch, "m2m": loss_sum / len(subjects), "lr": lr})
    return params, history


def resolved_config_dict(model_cfg, m2m_cfg, train_cfg, data_spec=None):
    payload = {"model": asdict(model_cfg), "m2m": asdict(m2m_cfg), "train": asdict(train_cfg)}
    if data_spec is not None:
        payload["data"] = data_spec.to_dict()
    return payload


def write_run_dir(out_dir, model_cfg, m2m_cfg, train_cfg, cv_result, data_spec=None):
    """Materialize a training run: config, per-fold losses, metrics, params.

    Layout::

        out_dir/config.json
        out_dir/metrics.json
        out_dir/fold_k/losses.csv      (epoch, ce, m2m, total, lr)
        out_dir/fold_k/scores.csv      (subject_idx, score, label)
        out_dir/fold_k/checkpoint/     (tensor bundle)
    """
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(
            resolved_config_dict(model_cfg, m2m_cfg, train_cfg, data_spec),
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    with open(out / "metrics.json", "w") as fh:
        fh.write(cv_result.report.to_json())
    for k, fold in enumerate(cv_result.folds):
        fold_dir = out / f"fold_{k}"
        fold_dir.mkdir(exist_ok=True)
        write_loss_csv(fold_dir / "losses.csv", fold.history)
        if fold.scores is not None:
            write_scores_csv(fold_dir / "scores.csv", cv_result.fold_indices[k], fold)
        save_params(fold_dir / "checkpoint", flatten_params(fold.params))
    return out


def write_scores_csv(path, subject_indices, fold):
    """Held-out scores as CSV; the score is the positive-class probability."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("subject_idx", "score", "label"))
        for idx, score, label in zip(subject_indices, fold.scores, fold.labels):
            writer.writerow([int(idx), repr(float(score)), int(label)])


def write_loss_csv(path, history):
    """Loss history as CSV; alignment-only runs leave ce/total blank."""
    columns = ("epoch", "ce", "m2m", "total", "lr")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in history:
            writer.writerow([_csv_cell(row.get(col, "")) for col in columns])


def _csv_cell(value):
    return repr(value) if isinstance(value, float) else value
