"""Synthetic multimodal volumes with planted cross-modal correspondences.

Structural components are Gaussian blobs parked on distinct cells of a
coarse site lattice, each nudged toward a component-specific cell corner.
The nudge matters: it gives every component a distinct signature *within*
its patch block, so patch-wise dot products can tell corresponding patches
apart (centered blobs would all look alike block-locally).  Functional
components are mixtures of those blobs selected by a binary correspondence
matrix, with distinct mixing weights keeping block-mates distinguishable.

A functional volume is the sum of component maps modulated by strictly
positive per-component time courses (mean exactly one over a full cycle)
plus noise; the structural volume is the blob sum plus noise.  Label-1
subjects get an amplitude boost on a designated component subset in both
modalities and a mean shift on the first half of their tabular features.

Every subject draws from its own counter-based RNG stream keyed by
(seed, subject index), so single subjects regenerate independently and
generation order never matters.
"""

import csv
import json
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, FileFormatError, ShapeError, TabularParseError
from .tensor import Tensor
from .tensorfile import read_tensor, write_tensor

# modulation depth of the component time courses; kept below 1 so courses
# stay strictly positive and co-located patches agree in sign at every t
_TC_DEPTH = 0.9

_STD_GUARD = 1e-12

# within-cell corner directions cycled over components; a quarter-cell nudge
# along one of these keeps the blob inside its block while separating the
# block-local signatures of different components
_CORNERS = [
    (1, 1, 1), (1, 1, -1), (1, -1, 1), (1, -1, -1),
    (-1, 1, 1), (-1, 1, -1), (-1, -1, 1), (-1, -1, -1),
]


@dataclass
class SynthSpec:
    """Full recipe for one synthetic dataset; a pure function of its fields."""

    n_subjects: int = 16
    grid: tuple = (16, 16, 16, 8)
    k_functional: int = 4
    k_structural: int = 4
    correspondence: np.ndarray = None
    class_effect: float = 1.0
    noise_sigma: float = 0.1
    tabular_dim: int = 6
    tabular_signal: float = 1.0
    positive_fraction: float = 0.5
    site_grid: tuple = (2, 2, 2)
    blob_sigma: float = None
    zscore: bool = True
    seed: int = 0

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        self.site_grid = tuple(int(g) for g in self.site_grid)
        if self.n_subjects < 1:
            raise ConfigError("need at least one subject")
        if len(self.grid) != 4 or any(g < 1 for g in self.grid):
            raise ConfigError(f"grid must be four positive extents, got {self.grid}")
        if self.k_functional < 2 or self.k_structural < 2:
            raise ConfigError("need at least two components per modality")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ConfigError("positive_fraction must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be nonnegative")
        if self.tabular_dim < 1:
            raise ConfigError("tabular_dim must be positive")
        n_sites = int(np.prod(self.site_grid))
        if self.k_structural > n_sites:
            raise ConfigError(
                f"{self.k_structural} structural components need distinct sites, "
                f"site grid offers {n_sites}"
            )
        if self.correspondence is None:
            if self.k_functional != self.k_structural:
                raise ConfigError(
                    "default identity correspondence needs k_functional == k_structural"
                )
            self.correspondence = np.eye(self.k_functional)
        corr = np.asarray(self.correspondence, dtype=np.float64)
        if corr.shape != (self.k_functional, self.k_structural):
            raise ConfigError(
                f"correspondence must be ({self.k_functional}, {self.k_structural}), "
                f"got {corr.shape}"
            )
        if not np.isin(corr, (0.0, 1.0)).all():
            raise ConfigError("correspondence entries must be 0 or 1")
        if (corr.sum(axis=1) == 0).any() or (corr.sum(axis=0) == 0).any():
            raise ConfigError("correspondence has orphan rows or columns")
        self.correspondence = corr
        if self.blob_sigma is None:
            self.blob_sigma = min(self.grid[:3]) / 10.0

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else (
                list(v) if isinstance(v, tuple) else v
            )
        return out

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class GroundTruth:
    """Generator internals needed to score alignment and ablations."""

    correspondence: np.ndarray
    functional_maps: np.ndarray  # (K_f, H, W, D), shared across subjects
    structural_maps: np.ndarray  # (K_s, H, W, D)
    centers: np.ndarray  # (K_s, 3) blob centers in voxel coordinates
    mixing: np.ndarray  # (K_f, K_s) blob mixture weights
    class_components_f: np.ndarray
    class_components_s: np.ndarray
    labels: np.ndarray

    def ownership(self, latent_grid):
        """Map each latent patch to its dominant structural component.

        Integrates every component map over each patch block; patch i is
        owned by the argmax component j when it holds at least half of the
        best patch's share of j, else -1 (background).  Returned as an (N,)
        index vector in row-major (h, w, d) patch order.
        """
        h, w, d = latent_grid
        K, H, W, D = self.structural_maps.shape
        if H % h or W % w or D % d:
            raise ShapeError(f"latent grid {latent_grid} does not tile volume {(H, W, D)}")
        blocks = self.structural_maps.reshape(K, h, H // h, w, W // w, d, D // d)
        mass = blocks.sum(axis=(2, 4, 6)).reshape(K, h * w * d)  # (K, N)
        owner = mass.argmax(axis=0)
        best = mass.max(axis=1)  # per component: its best patch's mass
        out = np.full(h * w * d, -1, dtype=np.intp)
        for i in range(h * w * d):
            j = owner[i]
            if mass[j, i] >= 0.5 * best[j]:
                out[i] = j
        return out


@dataclass
class VolumeSample:
    fmri: Tensor  # (1, H, W, D, T)
    smri: Tensor  # (1, H, W, D, 1)
    tabular: np.ndarray  # (F,)
    label: int
    subject_id: int
    raw: bool = False


@dataclass
class SynthDataset:
    samples: list
    truth: GroundTruth
    spec: SynthSpec
    folds: list = None

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.intp)


def _stream(seed, *key):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def _blob(center, shape, sigma):
    axes = np.ogrid[: shape[0], : shape[1], : shape[2]]
    sq = sum((ax - c) ** 2 for ax, c in zip(axes, center))
    return np.exp(-sq / (2.0 * sigma * sigma))


def _shared_structure(spec):
    """Dataset-level structure: blob sites, maps, mixing weights, labels."""
    rng = _stream(spec.seed, 0)
    H, W, D, _ = spec.grid
    sh, sw, sd = spec.site_grid
    cell = np.array([H / sh, W / sw, D / sd])
    cells = [(i, j, k) for i in range(sh) for j in range(sw) for k in range(sd)]
    chosen = rng.permutation(len(cells))[: spec.k_structural]
    centers = np.array(
        [
            (np.array(cells[c]) + 0.5) * cell + np.array(_CORNERS[j % len(_CORNERS)]) * cell / 4.0
            for j, c in enumerate(chosen)
        ]
    )
    smaps = np.stack([_blob(c, (H, W, D), spec.blob_sigma) for c in centers])
    mixing = rng.uniform(0.6, 1.4, size=spec.correspondence.shape) * spec.correspondence
    fmaps = np.einsum("kj,jhwd->khwd", mixing, smaps)

    class_f = np.arange(math.ceil(spec.k_functional / 2))
    class_s = np.flatnonzero(spec.correspondence[class_f].sum(axis=0) > 0)

    n_pos = round(spec.n_subjects * spec.positive_fraction)
    labels = np.array([1] * n_pos + [0] * (spec.n_subjects - n_pos), dtype=np.intp)
    rng.shuffle(labels)
    return GroundTruth(
        correspondence=spec.correspondence,
        functional_maps=fmaps,
        structural_maps=smaps,
        centers=centers,
        mixing=mixing,
        class_components_f=class_f,
        class_components_s=class_s,
        labels=labels,
    )


def _time_courses(rng, k, t_len):
    """Strictly positive per-component modulations, shape (k, t_len)."""
    courses = np.ones((k, t_len))
    steps = np.arange(t_len)
    for i in range(k):
        freqs = rng.integers(1, max(t_len // 2, 1) + 1, size=3)
        amps = rng.uniform(0.5, 1.5, size=3)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
        raw = sum(a * np.sin(2.0 * np.pi * f * steps / t_len + p)
                  for f, a, p in zip(freqs, amps, phases))
        peak = np.abs(raw).max()
        if peak > 0:
            courses[i] += _TC_DEPTH * raw / peak
    return courses


def _zscore(v):
    return (v - v.mean()) / max(v.std(), _STD_GUARD)


def generate_subject(spec, truth, idx):
    """One subject's sample from its own (seed, index)-keyed stream."""
    rng = _stream(spec.seed, 1, idx)
    H, W, D, T = spec.grid
    label = int(truth.labels[idx])

    courses = _time_courses(rng, spec.k_functional, T)
    amp_f = rng.uniform(0.8, 1.2, size=spec.k_functional)
    amp_s = rng.uniform(0.8, 1.2, size=spec.k_structural)
    if label == 1:
        amp_f[truth.class_components_f] *= 1.0 + spec.class_effect
        amp_s[truth.class_components_s] *= 1.0 + spec.class_effect

    fmri = np.einsum("khwd,kt->hwdt", truth.functional_maps * amp_f[:, None, None, None], courses)
    if spec.noise_sigma > 0:
        fmri = fmri + spec.noise_sigma * rng.standard_normal((H, W, D, T))
    smri = np.einsum("k,khwd->hwd", amp_s, truth.structural_maps)
    if spec.noise_sigma > 0:
        smri = smri + spec.noise_sigma * rng.standard_normal((H, W, D))

    if spec.zscore:
        fmri, smri = _zscore(fmri), _zscore(smri)

    tabular = rng.standard_normal(spec.tabular_dim)
    if label == 1:
        tabular[: math.ceil(spec.tabular_dim / 2)] += spec.tabular_signal

    return VolumeSample(
        fmri=Tensor(fmri.reshape(1, H, W, D, T)),
        smri=Tensor(smri.reshape(1, H, W, D, 1)),
        tabular=tabular,
        label=label,
        subject_id=idx,
        raw=not spec.zscore,
    )


def generate_dataset(spec):
    truth = _shared_structure(spec)
    samples = [generate_subject(spec, truth, i) for i in range(spec.n_subjects)]
    return SynthDataset(samples=samples, truth=truth, spec=spec)


def block_patch_similarity(fmri, smri, latent_grid):
    """Voxel-space patch similarity stack (T, N, N) on raw volumes.

    Partitions both volumes into the latent grid's blocks and dots the
    flattened functional block at each time step against every flattened
    structural block; the ground-truth analogue of the latent similarity.
    """
    f = fmri.data if isinstance(fmri, Tensor) else np.asarray(fmri)
    s = smri.data if isinstance(smri, Tensor) else np.asarray(smri)
    _, H, W, D, T = f.shape
    h, w, d = latent_grid
    if H % h or W % w or D % d:
        raise ShapeError(f"latent grid {latent_grid} does not tile volume {(H, W, D)}")
    bh, bw, bd = H // h, W // w, D // d

    def blocks(vol, t_len):
        split = vol.reshape(h, bh, w, bw, d, bd, t_len)
        return split.transpose(0, 2, 4, 1, 3, 5, 6).reshape(h * w * d, bh * bw * bd, t_len)

    fb = blocks(f[0], T)
    sb = blocks(s[0], 1)[:, :, 0]
    return np.einsum("ibt,jb->tij", fb, sb)


# -- dataset files -----------------------------------------------------------


def save_dataset(ds, out_dir, folds=None):
    """Write volumes, tabular CSV, and a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    subjects = []
    for s in ds.samples:
        f_name = f"fmri_{s.subject_id:03d}.m2mt"
        s_name = f"smri_{s.subject_id:03d}.m2mt"
        write_tensor(out / f_name, s.fmri)
        write_tensor(out / s_name, s.smri)
        entry = {"id": s.subject_id, "fmri": f_name, "smri": s_name, "label": s.label}
        if folds is not None:
            entry["fold"] = int(folds[s.subject_id])
        subjects.append(entry)

    with open(out / "tabular.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i + 1}" for i in range(ds.spec.tabular_dim)] + ["label"])
        for s in ds.samples:
            writer.writerow([repr(float(v)) for v in s.tabular] + [s.label])

    manifest = {
        "format": "m2malign-dataset",
        "version": 1,
        "grid": list(ds.spec.grid),
        "n_subjects": len(ds.samples),
        "tabular_csv": "tabular.csv",
        "subjects": subjects,
        "synth_spec": ds.spec.to_dict(),
    }
    path = out / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path


def load_dataset(dir_path):
    """Rebuild a dataset from its manifest directory.

    Volumes come back float32-quantized; ground truth is regenerated from
    the embedded spec when present (generation is deterministic), else the
    truth field stays None.
    """
    root = Path(dir_path)
    try:
        with open(root / "manifest.json") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{root}: unreadable dataset manifest: {exc}") from exc
    if manifest.get("format") != "m2malign-dataset":
        raise FileFormatError(f"{root}: not a dataset manifest")

    features, csv_labels = load_tabular_csv(root / manifest["tabular_csv"])
    spec = truth = None
    if manifest.get("synth_spec"):
        spec = SynthSpec.from_dict(manifest["synth_spec"])
        truth = _shared_structure(spec)

    samples, folds = [], []
    for row, entry in enumerate(manifest["subjects"]):
        if row >= len(csv_labels):
            raise FileFormatError(f"{root}: tabular CSV has fewer rows than subjects")
        if int(csv_labels[row]) != int(entry["label"]):
            raise FileFormatError(
                f"{root}: label mismatch for subject {entry['id']} between manifest and CSV"
            )
        samples.append(
            VolumeSample(
                fmri=read_tensor(root / entry["fmri"]),
                smri=read_tensor(root / entry["smri"]),
                tabular=features[row],
                label=int(entry["label"]),
                subject_id=int(entry["id"]),
                raw=bool(spec and not spec.zscore),
            )
        )
        folds.append(entry.get("fold"))
    has_folds = all(f is not None for f in folds) and folds
    return SynthDataset(
        samples=samples,
        truth=truth,
        spec=spec,
        folds=[int(f) for f in folds] if has_folds else None,
    )


def load_tabular_csv(path):
    """Parse a feature CSV whose final column is the {0,1} label.

    Returns (features (n, F) float array, labels (n,) int array).  Parse
    failures carry 1-based data row and column indices.
    """
    try:
        fh = open(path, newline="")
    except OSError:
        raise
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TabularParseError(f"{path}: empty file, header row required", row=0, col=0)
        if not header or header[-1].strip() != "label":
            raise TabularParseError(
                f"{path}: final column must be named 'label', got {header[-1:]!r}",
                row=0, col=len(header),
            )
        n_features = len(header) - 1
        feats, labels = [], []
        for row_idx, cells in enumerate(reader, start=1):
            if len(cells) != len(header):
                raise TabularParseError(
                    f"{path}: row {row_idx} has {len(cells)} cells, header has {len(header)}",
                    row=row_idx, col=len(cells),
                )
            vals = []
            for col_idx, cell in enumerate(cells[:-1], start=1):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise TabularParseError(
                        f"{path}: non-numeric cell {cell!r} at row {row_idx} col {col_idx}",
                        row=row_idx, col=col_idx,
                    ) from None
            if cells[-1].strip() not in ("0", "1"):
                raise TabularParseError(
                    f"{path}: label must be 0 or 1, got {cells[-1]!r} at row {row_idx}",
                    row=row_idx, col=len(header),
                )
            feats.append(vals)
            labels.append(int(cells[-1]))
    features = np.array(feats, dtype=np.float64) if feats else np.empty((0, n_features))
    return features, np.array(labels, dtype=np.intp)
