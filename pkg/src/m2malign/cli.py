"""Command-line workflows: data generation, training, evaluation, export.

Subcommands
-----------
gen-data       materialize a synthetic dataset directory
train          fit the classifier on a whole dataset
cv             stratified k-fold cross-validation with a metrics report
gradcheck      run the canned finite-difference scenarios
align-analyze  alignment-only encoder fit plus planted-correspondence recall
export-attn    attention score matrix of one subject as CSV (plus heatmap)
export-embed   pooled classifier embeddings for every subject as CSV
metrics        recompute the metrics report from a run's score files

Exit codes: 0 success; 1 for usage, contract, or config errors (the
ValueError family); 2 for IO errors (the OSError family).  Every command
echoes its fully resolved configuration to stdout before doing work, so a
run can always be reproduced from its own log.
"""

import argparse
import csv
import json
import math
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from .alignment import M2MConfig, recall_at_k, similarity_matrix
from .checks import SCALES, run_scenarios
from .encoders import EncoderConfig, encode_volume, latent_grid
from .errors import ConfigError, ContractError, GradCheckAborted
from .metrics import MetricsReport, pr_auc, roc_auc
from .model import (
    ATTENTION_TAGS,
    ModelConfig,
    flatten_params,
    forward_subject,
    init_model_params,
    load_into,
)
from .plots import save_fold_metrics, save_heatmap, save_loss_curves
from .synthdata import SynthSpec, generate_dataset, load_dataset, save_dataset
from .tensorfile import load_params, save_params
from .training import (
    TrainConfig,
    cross_validate,
    fit_alignment,
    resolved_config_dict,
    train_fold,
    write_loss_csv,
    write_run_dir,
)

CONFIG_SECTIONS = ("data", "model", "m2m", "train")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with code 2 on bad usage; the contract wants 1."""

    def error(self, message):
        raise _UsageError(message)


# -- configuration plumbing ---------------------------------------------------


def _load_config(path):
    if path is None:
        return {}
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(cfg) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _build(cls, section, what):
    known = {f.name for f in dataclass_fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown {what} fields: {sorted(unknown)}")
    return cls(**section)


def _load_or_generate(cfg, args):
    """The dataset plus the SynthSpec recipe behind it (None when unrecorded)."""
    data_dir = getattr(args, "data", None)
    if data_dir:
        ds = load_dataset(data_dir)
        return ds, ds.spec
    spec = SynthSpec.from_dict(cfg.get("data", {}))
    return generate_dataset(spec), spec


def _model_sections(cfg, ds):
    """Model/m2m/train configs with shape defaults taken from the data."""
    model_d = dict(cfg.get("model", {}))
    encoder = model_d.pop("encoder", {})
    if not isinstance(encoder, EncoderConfig):
        encoder = _build(EncoderConfig, dict(encoder), "encoder")
    model_d["encoder"] = encoder
    sample = ds.samples[0]
    model_d.setdefault("volume_shape", tuple(sample.fmri.shape[1:]))
    if model_d.get("use_tabular", True):
        model_d.setdefault("n_tabular", int(np.asarray(sample.tabular).shape[0]))
    model_cfg = _build(ModelConfig, model_d, "model")
    m2m_cfg = _build(M2MConfig, dict(cfg.get("m2m", {})), "m2m")
    train_cfg = _build(TrainConfig, dict(cfg.get("train", {})), "train")
    return model_cfg, m2m_cfg, train_cfg


def _echo(payload):
    print(json.dumps(payload, indent=2, sort_keys=True))


def _write_config(out_dir, payload):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- attention/embedding export -----------------------------------------------


def percentile_mask(scores, p):
    """Boolean mask keeping the top (100-p)% of entries, ties included.

    The threshold is the k-th largest score with k = ceil(size*(100-p)/100),
    and every entry >= threshold is kept: distinct scores keep exactly k
    entries, a constant matrix keeps all of them.
    """
    flat = np.asarray(scores, dtype=np.float64).reshape(-1)
    if not 0.0 < p < 100.0:
        raise ContractError(f"percentile must lie strictly between 0 and 100, got {p}")
    k = math.ceil(flat.size * (100.0 - p) / 100.0)
    threshold = np.sort(flat)[-k]
    return np.asarray(scores) >= threshold


def write_attention_csv(path, matrix, percentile=None):
    """Long-form (query_idx, key_idx, score[, kept]) rows; returns kept count."""
    matrix = np.asarray(matrix, dtype=np.float64)
    kept = None
    if percentile is not None:
        kept = percentile_mask(matrix, percentile)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["query_idx", "key_idx", "score"] + (["kept"] if kept is not None else [])
        writer.writerow(header)
        for q in range(matrix.shape[0]):
            for key in range(matrix.shape[1]):
                row = [q, key, repr(float(matrix[q, key]))]
                if kept is not None:
                    row.append(int(kept[q, key]))
                writer.writerow(row)
    return int(kept.sum()) if kept is not None else matrix.size


def top_time_indices(matrix, k):
    """Key indices ranked by mean attention over queries, ties by position."""
    mean = np.asarray(matrix, dtype=np.float64).mean(axis=0)
    order = np.argsort(-mean, kind="stable")
    return [int(i) for i in order[:k]]


def _load_run(args):
    """Saved config, dataset, and checkpointed parameters of a run dir."""
    run = Path(args.run)
    with open(run / "config.json") as fh:
        saved = json.load(fh)
    if getattr(args, "data", None):
        ds = load_dataset(args.data)
    elif saved.get("data"):
        ds = generate_dataset(SynthSpec.from_dict(saved["data"]))
    else:
        raise ConfigError(
            f"{run} recorded no data recipe; pass --data with the dataset directory"
        )
    model_cfg, _, _ = _model_sections(saved, ds)

    checkpoint = run / "checkpoint"
    if not checkpoint.is_dir():
        checkpoint = run / f"fold_{args.fold}" / "checkpoint"
    params = init_model_params(model_cfg, np.random.default_rng(0))
    load_into(params, load_params(checkpoint))
    return saved, ds, model_cfg, params


def _pick_subject(ds, index):
    if not 0 <= index < len(ds.samples):
        raise ContractError(f"subject index {index} outside dataset of {len(ds.samples)}")
    return ds.samples[index]


# -- subcommand handlers ------------------------------------------------------


def _cmd_gen_data(args):
    cfg = _load_config(args.config)
    spec = SynthSpec.from_dict(cfg.get("data", {}))
    _echo({"data": spec.to_dict()})
    ds = generate_dataset(spec)
    manifest = save_dataset(ds, args.out)
    print(f"wrote {len(ds.samples)} subjects under {manifest.parent}")
    return 0


def _cmd_train(args):
    cfg = _load_config(args.config)
    ds, spec = _load_or_generate(cfg, args)
    model_cfg, m2m_cfg, train_cfg = _model_sections(cfg, ds)
    resolved = resolved_config_dict(model_cfg, m2m_cfg, train_cfg, spec)
    _echo(resolved)

    fold = train_fold(list(ds.samples), [], model_cfg, m2m_cfg, train_cfg)
    out = Path(args.out)
    _write_config(out, resolved)
    write_loss_csv(out / "losses.csv", fold.history)
    save_params(out / "checkpoint", flatten_params(fold.params))
    save_loss_curves(out / "loss_curves.png", fold.history)
    if fold.history:
        last = fold.history[-1]
        print(f"epoch {last['epoch']}: ce={last['ce']:.4f} m2m={last['m2m']:.4f}")
    print(f"wrote {out}")
    return 0


def _cmd_cv(args):
    cfg = _load_config(args.config)
    ds, spec = _load_or_generate(cfg, args)
    model_cfg, m2m_cfg, train_cfg = _model_sections(cfg, ds)
    _echo(resolved_config_dict(model_cfg, m2m_cfg, train_cfg, spec))

    result = cross_validate(list(ds.samples), model_cfg, m2m_cfg, train_cfg)
    out = write_run_dir(args.out, model_cfg, m2m_cfg, train_cfg, result, data_spec=spec)
    save_fold_metrics(out / "fold_metrics.png", result.report)
    for k, fold in enumerate(result.folds):
        save_loss_curves(out / f"fold_{k}" / "loss_curves.png", fold.history)
    for line in result.report.summary_lines():
        print(line)
    print(f"wrote {out / 'metrics.json'}")
    return 0


def _cmd_gradcheck(args):
    _echo({"scale": args.scale, "h": args.h, "seed": args.seed, "tolerance": args.tol})
    try:
        results = run_scenarios(args.scale, h=args.h, seed=args.seed)
    except GradCheckAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 1
    for r in results:
        verdict = "ok" if r.passed(args.tol) else f"FAIL (worst: {r.worst_param})"
        print(
            f"{r.name}: max_rel_err={r.max_rel_err:.3e} "
            f"over {r.n_coords} coords in {r.seconds:.2f}s {verdict}"
        )
    worst = max(r.max_rel_err for r in results)
    print(f"worst overall: {worst:.3e} (tolerance {args.tol:g})")
    return 0 if all(r.passed(args.tol) for r in results) else 1


def _cmd_align_analyze(args):
    cfg = _load_config(args.config)
    ds, spec = _load_or_generate(cfg, args)
    model_cfg, m2m_cfg, train_cfg = _model_sections(cfg, ds)
    resolved = resolved_config_dict(model_cfg, m2m_cfg, train_cfg, spec)
    _echo(resolved)
    if ds.truth is None:
        raise ContractError("dataset carries no ground truth; regenerate it from a spec")

    params, history = fit_alignment(list(ds.samples), model_cfg, m2m_cfg, train_cfg)
    grid = latent_grid(model_cfg.encoder, ds.samples[0].fmri.shape)[:3]
    anchors = np.flatnonzero(ds.truth.ownership(grid) >= 0)
    if anchors.size == 0:
        raise ContractError("no latent patch is owned by any component at this grid")

    smri_enc = params["fmri_encoder" if model_cfg.share_encoder_weights else "smri_encoder"]
    recalls = []
    first_sim = None
    for s in ds.samples:
        lf = encode_volume(s.fmri, model_cfg.encoder, params["fmri_encoder"])
        ls = encode_volume(s.smri, model_cfg.smri_encoder_config(), smri_enc)
        sim = similarity_matrix(lf, ls).data
        if first_sim is None:
            first_sim = sim.mean(axis=0)
        recalls.append(recall_at_k(sim, k=1, anchors=anchors))

    out = Path(args.out)
    _write_config(out, resolved)
    write_loss_csv(out / "losses.csv", history)
    save_loss_curves(out / "loss_curves.png", history)
    save_heatmap(
        out / "similarity_subject0.png",
        first_sim,
        title="time-mean patch similarity (subject 0)",
        xlabel="structural patch",
        ylabel="functional patch",
    )
    with open(out / "recall.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("subject_idx", "recall_at_1"))
        for i, r in enumerate(recalls):
            writer.writerow([i, repr(float(r))])

    n_patches = int(np.prod(grid))
    mean_recall = float(np.mean(recalls))
    print(
        f"mean recall@1 over {len(recalls)} subjects and {anchors.size} anchors: "
        f"{mean_recall:.4f} (chance 1/{n_patches} = {1.0 / n_patches:.4f})"
    )
    print(f"wrote {out}")
    return 0


def _cmd_export_attn(args):
    saved, ds, model_cfg, params = _load_run(args)
    _echo(saved)
    subject = _pick_subject(ds, args.subject)
    output = forward_subject(params, model_cfg, subject)
    if args.source not in output.attention:
        raise ConfigError(
            f"this configuration produces no {args.source!r} scores; "
            f"available: {sorted(output.attention)}"
        )
    matrix = output.attention[args.source]
    out = Path(args.out)
    kept = write_attention_csv(out, matrix, percentile=args.percentile)
    if args.percentile is not None:
        print(f"kept {kept} of {matrix.size} entries at the {args.percentile:g}th percentile")
    if args.source == "temporal":
        top = top_time_indices(matrix, args.top_k)
        print(f"top-{args.top_k} time indices by mean attention: {', '.join(map(str, top))}")
    if not args.no_figure:
        figure = save_heatmap(
            out.with_suffix(".png"),
            matrix,
            title=f"{args.source} attention (subject {args.subject})",
            xlabel="key token",
            ylabel="query token",
        )
        print(f"wrote {figure}")
    print(f"wrote {out}")
    return 0


def _cmd_export_embed(args):
    saved, ds, model_cfg, params = _load_run(args)
    _echo(saved)
    embeddings = [forward_subject(params, model_cfg, s).pooled for s in ds.samples]
    width = embeddings[0].shape[0]
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_idx", "label"] + [f"e{i}" for i in range(width)])
        for i, (s, e) in enumerate(zip(ds.samples, embeddings)):
            writer.writerow([i, s.label] + [repr(float(v)) for v in e])
    print(f"wrote {args.out} ({len(embeddings)} subjects x {width} dims)")
    return 0


def _cmd_metrics(args):
    run = Path(args.run)
    with open(run / "config.json") as fh:
        _echo(json.load(fh))
    fold_dirs = sorted(
        (p for p in run.glob("fold_*") if (p / "scores.csv").is_file()),
        key=lambda p: int(p.name.split("_")[1]),
    )
    if not fold_dirs:
        raise ContractError(f"{run} holds no fold score files")

    report = MetricsReport()
    for fold_dir in fold_dirs:
        with open(fold_dir / "scores.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        scores = np.array([float(r["score"]) for r in rows])
        labels = np.array([int(r["label"]) for r in rows])
        # score > 0.5 reproduces the argmax-with-ties-to-0 rule exactly,
        # since the score is the monotone sigmoid of the logit gap
        report.add_fold(
            pr_auc=pr_auc(scores, labels),
            roc_auc=roc_auc(scores, labels),
            accuracy=float(np.mean((scores > 0.5).astype(int) == labels)),
        )
    for line in report.summary_lines():
        print(line)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report.to_json())
        print(f"wrote {args.out}")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="m2malign", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, handler, help_text, data_source=False, run_based=False):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(handler=handler)
        if data_source:
            p.add_argument("--config", help="JSON config with data/model/m2m/train sections")
            p.add_argument("--data", help="dataset directory (overrides the data section)")
        if run_based:
            p.add_argument("--run", required=True, help="run directory written by train or cv")
            p.add_argument("--fold", type=int, default=0, help="fold checkpoint to load")
            p.add_argument("--data", help="dataset directory for specless runs")
        return p

    p = add("gen-data", _cmd_gen_data, "write a synthetic dataset directory")
    p.add_argument("--config", help="JSON config; only the data section is read")
    p.add_argument("--out", required=True, help="output directory")

    p = add("train", _cmd_train, "fit the classifier on the whole dataset", data_source=True)
    p.add_argument("--out", required=True, help="run directory to create")

    p = add("cv", _cmd_cv, "stratified k-fold cross-validation", data_source=True)
    p.add_argument("--out", required=True, help="run directory to create")

    p = add("gradcheck", _cmd_gradcheck, "finite-difference gradient verification")
    p.add_argument("--scale", choices=SCALES, default="tiny")
    p.add_argument("--h", type=float, default=1e-5, help="central-difference step")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error accepted")

    p = add(
        "align-analyze",
        _cmd_align_analyze,
        "alignment-only fit plus planted-correspondence recall",
        data_source=True,
    )
    p.add_argument("--out", required=True, help="output directory")

    p = add("export-attn", _cmd_export_attn, "attention scores of one subject", run_based=True)
    p.add_argument("--source", required=True, choices=ATTENTION_TAGS)
    p.add_argument("--subject", type=int, default=0)
    p.add_argument("--percentile", type=float, help="keep only the top (100-p)%% of scores")
    p.add_argument("--top-k", type=int, default=3, help="time indices reported for temporal")
    p.add_argument("--no-figure", action="store_true", help="skip the heatmap PNG")
    p.add_argument("--out", required=True, help="CSV path")

    p = add("export-embed", _cmd_export_embed, "pooled embeddings per subject", run_based=True)
    p.add_argument("--out", required=True, help="CSV path")

    p = add("metrics", _cmd_metrics, "recompute the report from fold scores")
    p.add_argument("--run", required=True, help="run directory written by cv")
    p.add_argument("--out", help="also write the recomputed metrics JSON here")

    return parser


def main(argv=None):
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.handler(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
