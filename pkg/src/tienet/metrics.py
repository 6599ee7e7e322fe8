"""Evaluation metrics: per-class ROC/AUC and text-overlap scores."""

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np


@dataclass
class RocCurve:
    """Full ROC sweep for one class: (fpr, tpr) anchor points and the area."""

    points: np.ndarray
    auc: float


@dataclass
class TextScore:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    meteor: float


def roc_auc(scores, labels):
    """ROC curve and trapezoidal AUC; None when labels are single-class.

    Tied scores are collapsed into one threshold group, so the trapezoid
    over the sweep equals the pairwise statistic
    P(s+ > s-) + 0.5 P(s+ = s-).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    n_pos = int((labels == 1).sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    pts = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < s.size:
        j = i
        while j < s.size and s[j] == s[i]:
            j += 1
        group_pos = int((y[i:j] == 1).sum())
        tp += group_pos
        fp += (j - i) - group_pos
        pts.append((fp / n_neg, tp / n_pos))
        i = j
    pts = np.asarray(pts)
    widths = np.diff(pts[:, 0])
    heights = (pts[1:, 1] + pts[:-1, 1]) / 2.0
    return RocCurve(points=pts, auc=float((widths * heights).sum()))


def aggregate(aucs, counts):
    """Macro average and sample-count-weighted average over defined classes.

    Classes with auc None are skipped entirely; classes with count 0 are
    skipped in the weighted average only.
    """
    if len(aucs) != len(counts):
        raise ValueError("aucs and counts length mismatch")
    if any(c < 0 for c in counts):
        raise ValueError("negative class count")
    defined = [(a, c) for a, c in zip(aucs, counts) if a is not None]
    if not defined:
        raise ValueError("no class with a defined AUC")
    avg = sum(a for a, _ in defined) / len(defined)
    weighted = [(a, c) for a, c in defined if c > 0]
    total = sum(c for _, c in weighted)
    if total == 0:
        raise ValueError("all class counts are zero")
    wavg = sum(a * c for a, c in weighted) / total
    return avg, wavg


# ---------------------------------------------------------------------------
# Text metrics (single reference)
# ---------------------------------------------------------------------------


def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(candidate, reference, n):
    """BLEU-n with clipped precisions and brevity penalty; no smoothing."""
    if not 1 <= n <= 4:
        raise ValueError(f"bleu_n order must be in 1..4, got {n}")
    c = len(candidate)
    r = len(reference)
    if c == 0:
        return 0.0
    log_sum = 0.0
    for k in range(1, n + 1):
        cand_counts = _ngram_counts(candidate, k)
        total = sum(cand_counts.values())
        if total == 0:
            return 0.0
        ref_counts = _ngram_counts(reference, k)
        clipped = sum(min(v, ref_counts[g]) for g, v in cand_counts.items())
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total)
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum / n)


def _lcs_length(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference):
    """LCS-based F-measure with equal precision/recall weighting."""
    lcs = _lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return 2.0 * p * r / (p + r)


def _greedy_alignment(candidate, reference):
    """Match each candidate token to the earliest unused identical reference
    position, scanning the candidate left to right."""
    used = [False] * len(reference)
    pairs = []
    for ci, tok in enumerate(candidate):
        for ri, ref_tok in enumerate(reference):
            if not used[ri] and ref_tok == tok:
                used[ri] = True
                pairs.append((ci, ri))
                break
    return pairs


def meteor_simple(candidate, reference):
    """Exact-match unigram harmonic mean with a fragmentation penalty."""
    if not candidate or not reference:
        return 0.0
    pairs = _greedy_alignment(candidate, reference)
    matches = len(pairs)
    if matches == 0:
        return 0.0
    p = matches / len(candidate)
    r = matches / len(reference)
    f = 10.0 * p * r / (r + 9.0 * p)
    chunks = 1
    for (c0, r0), (c1, r1) in zip(pairs, pairs[1:]):
        if c1 != c0 + 1 or r1 != r0 + 1:
            chunks += 1
    penalty = 0.5 * (chunks / matches) ** 3
    return f * (1.0 - penalty)


def score_report(candidate, reference):
    """All text metrics for one candidate/reference token pair."""
    return TextScore(
        bleu1=bleu_n(candidate, reference, 1),
        bleu2=bleu_n(candidate, reference, 2),
        bleu3=bleu_n(candidate, reference, 3),
        bleu4=bleu_n(candidate, reference, 4),
        rouge_l=rouge_l(candidate, reference),
        meteor=meteor_simple(candidate, reference),
    )


# ---------------------------------------------------------------------------
# Table / file rendering
# ---------------------------------------------------------------------------


def save_roc_points(curve, path):
    with open(path, "w", encoding="utf-8") as fh:
        for fpr, tpr in curve.points:
            fh.write(f"{fpr:.10f}\t{tpr:.10f}\n")


def format_summary_table(class_names, mode_aucs, counts):
    """Per-class AUC table with AVG / #wAVG rows and a sample-count column.

    mode_aucs maps a mode label to a per-class list of AUC-or-None.
    Undefined cells render as '--'.
    """
    modes = list(mode_aucs)

    def cell(value):
        return "--" if value is None else f"{value:.4f}"

    lines = ["\t".join(["class"] + modes + ["#"])]
    for i, name in enumerate(class_names):
        row = [name] + [cell(mode_aucs[m][i]) for m in modes] + [str(counts[i])]
        lines.append("\t".join(row))
    avg_row, wavg_row = ["AVG"], ["#wAVG"]
    for m in modes:
        avg, wavg = aggregate(mode_aucs[m], counts)
        avg_row.append(f"{avg:.4f}")
        wavg_row.append(f"{wavg:.4f}")
    lines.append("\t".join(avg_row + ["--"]))
    lines.append("\t".join(wavg_row + ["--"]))
    return "\n".join(lines) + "\n"
