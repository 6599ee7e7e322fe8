"""Synthetic image/report/label triples with planted cross-modal structure.

Every disease class owns a small bright blob at a class-specific grid
location and a phrase naming the class term and its location, so labels
are recoverable from the image (up to pixel noise) and essentially
noise-free from the report.  Negative classes are mentioned as "no
<term>" phrases at random, mirroring how free-text reports mix findings
with negation statements.  The last class is "no finding" and is set
exactly when no disease class is positive.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .text import tokenize

_TERMS = (
    "opacity", "shadow", "streak", "haze", "blur", "speck", "smudge",
    "ring", "band", "flare", "glow", "spot", "web", "knot",
)
_ADJECTIVES = (
    "dense", "faint", "coarse", "fine", "broad", "narrow", "round",
    "linear", "soft", "sharp", "dim", "dark", "grainy", "curved",
)
_ROW_WORDS = {1: ("middle",), 2: ("upper", "lower"), 3: ("upper", "middle", "lower")}
_COL_WORDS = {
    1: ("central",),
    2: ("left", "right"),
    3: ("left", "central", "right"),
    4: ("leftmost", "left", "right", "rightmost"),
    5: ("leftmost", "left", "central", "right", "rightmost"),
}
NO_FINDING_SENTENCE = "the scan is clear . no acute disease ."
MAX_COLS = 5


class DatasetFormatError(ValueError):
    pass


@dataclass
class SyntheticSpec:
    """Knobs of the generator; fully determines the output given the seed."""

    n_classes: int = 15
    train: int = 2000
    val: int = 500
    test: int = 500
    grid: int = 32
    noise: float = 1.5
    label_prior: float = 0.06
    negation_prob: float = 0.3
    blob: int = 5
    amplitude: float = 1.0
    shuffle_phrases: bool = False
    seed: int = 0

    def validate(self):
        if self.n_classes < 2:
            raise ValueError("need at least one disease class plus 'no finding'")
        if self.n_classes - 1 > len(_TERMS):
            raise ValueError(f"at most {len(_TERMS) + 1} classes supported")
        for name in ("label_prior", "negation_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if min(self.train, self.val, self.test) < 0 or self.grid < 8:
            raise ValueError("split sizes must be >= 0 and grid >= 8")
        if self.noise < 0 or self.amplitude <= 0 or self.blob < 1:
            raise ValueError("noise >= 0, amplitude > 0, blob >= 1 required")
        motif_centers(self)  # raises if the blobs do not fit disjointly


@dataclass
class Sample:
    image: np.ndarray  # grid x grid x 1, float32
    report: str
    labels: np.ndarray  # (n_classes,), int8


@dataclass
class Dataset:
    samples: list
    split: str
    grid: int
    channels: int
    n_classes: int
    no_finding_index: int
    class_names: list

    def __len__(self):
        return len(self.samples)

    def label_matrix(self):
        return np.stack([s.labels for s in self.samples]).astype(np.int8)


def motif_centers(spec):
    """Disjoint (y, x) blob centers for every disease class."""
    n_diseases = spec.n_classes - 1
    ncols = min(MAX_COLS, n_diseases)
    nrows = math.ceil(n_diseases / ncols)
    if nrows > max(_ROW_WORDS):
        raise ValueError("motif layout supports at most 3 rows of classes")
    margin = spec.blob // 2 + 1
    span = spec.grid - 1 - 2 * margin
    xs = [round(margin + span * i / max(1, ncols - 1)) for i in range(ncols)]
    ys = [round(margin + span * i / max(1, nrows - 1)) for i in range(nrows)]
    if ncols > 1 and min(np.diff(xs)) < spec.blob:
        raise ValueError(f"grid {spec.grid} too small for {n_diseases} disjoint motifs")
    if nrows > 1 and min(np.diff(ys)) < spec.blob:
        raise ValueError(f"grid {spec.grid} too small for {nrows} motif rows")
    return [(ys[k // ncols], xs[k % ncols]) for k in range(n_diseases)], nrows, ncols


def class_phrases(spec):
    """Per disease class: (positive phrase variants, negation phrase)."""
    centers, nrows, ncols = motif_centers(spec)
    rows = _ROW_WORDS[nrows]
    cols = _COL_WORDS[ncols]
    phrases = []
    for k in range(spec.n_classes - 1):
        adj, term = _ADJECTIVES[k], _TERMS[k]
        row_w, col_w = rows[k // ncols], cols[k % ncols]
        positives = (
            f"{adj} {term} is seen in the {row_w} {col_w} zone .",
            f"{adj} {term} is noted in the {row_w} {col_w} zone .",
        )
        phrases.append((positives, f"no {term} ."))
    return phrases


def class_names(spec):
    return list(_TERMS[: spec.n_classes - 1]) + ["no_finding"]


def _render_record(spec, centers, phrases, rec_id):
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, rec_id]))
    n_diseases = spec.n_classes - 1
    positive = rng.random(n_diseases) < spec.label_prior
    variant_choice = rng.integers(0, 2, size=n_diseases)
    negated = rng.random(n_diseases) < spec.negation_prob

    labels = np.zeros(spec.n_classes, dtype=np.int8)
    labels[:n_diseases] = positive
    if not positive.any():
        labels[n_diseases] = 1

    sentences = []
    if positive.any():
        for k in np.flatnonzero(positive):
            sentences.append(phrases[k][0][variant_choice[k]])
    else:
        sentences.append(NO_FINDING_SENTENCE)
    for k in range(n_diseases):
        if not positive[k] and negated[k]:
            sentences.append(phrases[k][1])
    if spec.shuffle_phrases:
        sentences = [sentences[i] for i in rng.permutation(len(sentences))]
    report = " ".join(sentences)

    canvas = np.zeros((spec.grid, spec.grid), dtype=np.float64)
    half = spec.blob // 2
    for k in np.flatnonzero(positive):
        cy, cx = centers[k]
        canvas[cy - half : cy + half + 1, cx - half : cx + half + 1] += spec.amplitude
    canvas += rng.normal(0.0, spec.noise, size=canvas.shape)
    image = canvas.astype(np.float32)[:, :, None]
    return Sample(image=image, report=report, labels=labels)


def generate(spec):
    """Deterministic train/val/test datasets; record ids are globally unique."""
    spec.validate()
    centers, _, _ = motif_centers(spec)
    phrases = class_phrases(spec)
    names = class_names(spec)
    out = {}
    next_id = 0
    for split, count in (("train", spec.train), ("val", spec.val), ("test", spec.test)):
        samples = [
            _render_record(spec, centers, phrases, rec_id)
            for rec_id in range(next_id, next_id + count)
        ]
        next_id += count
        out[split] = Dataset(
            samples=samples,
            split=split,
            grid=spec.grid,
            channels=1,
            n_classes=spec.n_classes,
            no_finding_index=spec.n_classes - 1,
            class_names=names,
        )
    return out


# ---------------------------------------------------------------------------
# File format: one header line, then hex-image TAB "report" TAB label list.
# ---------------------------------------------------------------------------


def save_dataset(dataset, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            "#tienet-data\tv1"
            f"\tsplit={dataset.split}"
            f"\tgrid={dataset.grid}"
            f"\tchannels={dataset.channels}"
            f"\tclasses={dataset.n_classes}"
            f"\tno_finding={dataset.no_finding_index}"
            f"\tnames={','.join(dataset.class_names)}\n"
        )
        for s in dataset.samples:
            hex_img = np.ascontiguousarray(s.image, dtype="<f4").tobytes().hex()
            labels = ",".join(str(int(v)) for v in s.labels)
            fh.write(f'{hex_img}\t"{s.report}"\t{labels}\n')


def load_dataset(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#tienet-data\tv1"):
        raise DatasetFormatError(f"{path}:1: missing dataset header")
    meta = {}
    for part in lines[0].split("\t")[2:]:
        key, _, value = part.partition("=")
        meta[key] = value
    try:
        grid = int(meta["grid"])
        channels = int(meta["channels"])
        n_classes = int(meta["classes"])
        no_finding = int(meta["no_finding"])
        names = meta["names"].split(",") if meta["names"] else []
    except KeyError as exc:
        raise DatasetFormatError(f"{path}:1: header missing field {exc}")
    samples = []
    expected_pixels = grid * grid * channels
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DatasetFormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
        hex_img, quoted, label_field = parts
        try:
            raw = bytes.fromhex(hex_img)
        except ValueError:
            raise DatasetFormatError(f"{path}:{lineno}: invalid image hex")
        if len(raw) != 4 * expected_pixels:
            raise DatasetFormatError(
                f"{path}:{lineno}: image has {len(raw) // 4} values, "
                f"expected {expected_pixels}"
            )
        image = np.frombuffer(raw, dtype="<f4").reshape(grid, grid, channels).copy()
        if len(quoted) < 2 or quoted[0] != '"' or quoted[-1] != '"':
            raise DatasetFormatError(f"{path}:{lineno}: report not quoted")
        try:
            labels = np.array([int(v) for v in label_field.split(",")], dtype=np.int8)
        except ValueError:
            raise DatasetFormatError(f"{path}:{lineno}: bad label list")
        if labels.size != n_classes:
            raise DatasetFormatError(
                f"{path}:{lineno}: {labels.size} labels, expected {n_classes}"
            )
        samples.append(Sample(image=image, report=quoted[1:-1], labels=labels))
    split = meta.get("split", "unknown")
    return Dataset(
        samples=samples,
        split=split,
        grid=grid,
        channels=channels,
        n_classes=n_classes,
        no_finding_index=no_finding,
        class_names=names,
    )


# ---------------------------------------------------------------------------
# Counting and sanity checks
# ---------------------------------------------------------------------------


@dataclass
class ClassCounts:
    q: int                # total records
    q_m: np.ndarray       # per-class positive counts
    p_count: int          # records with >= 1 disease-class positive
    n_count: int          # the rest


def class_counts(labels, no_finding_index=None):
    """Per-class and disease/no-disease record counts.

    When no_finding_index is given, that column is excluded from the
    disease test (a record positive only for "no finding" has no disease).
    """
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("labels must be a records x classes matrix")
    q = labels.shape[0]
    q_m = labels.sum(axis=0).astype(int)
    disease = labels.astype(bool)
    if no_finding_index is not None:
        disease = np.delete(disease, no_finding_index, axis=1)
    p_count = int(disease.any(axis=1).sum())
    return ClassCounts(q=q, q_m=q_m, p_count=p_count, n_count=q - p_count)


def planted_learnability(dataset, train_frac=0.8, iters=250, lr=0.1, l2=1e-4):
    """Per-class AUC of a pixel-level logistic probe (dataset self-test).

    Fits one linear logistic layer on raw pixels with full-batch Adam and
    scores the held-out tail of the dataset.  At noise level 0 every class
    should be close to perfectly separable.
    """
    from .metrics import roc_auc

    n = len(dataset)
    split = max(1, int(n * train_frac))
    x = np.stack([s.image.reshape(-1) for s in dataset.samples]).astype(np.float64)
    x = np.hstack([x, np.ones((n, 1))])
    y = dataset.label_matrix().astype(np.float64)
    w = np.zeros((x.shape[1], y.shape[1]))
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    xt, yt = x[:split], y[:split]
    for t in range(1, iters + 1):
        p = 1.0 / (1.0 + np.exp(-(xt @ w)))
        g = xt.T @ (p - yt) / split + l2 * w
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        m_hat = m / (1.0 - 0.9**t)
        v_hat = v / (1.0 - 0.999**t)
        w -= lr * m_hat / (np.sqrt(v_hat) + 1e-8)
    scores = x[split:] @ w
    aucs = []
    for cls in range(y.shape[1]):
        curve = roc_auc(scores[:, cls], y[split:, cls])
        aucs.append(None if curve is None else curve.auc)
    return aucs


def tokenized_reports(dataset):
    return [tokenize(s.report) for s in dataset.samples]


def with_overrides(spec, **kwargs):
    """Copy of a spec with fields replaced (convenience for tests/CLI)."""
    return replace(spec, **kwargs)
