"""Losses, class weighting, Adam, and the epoch loop."""

import time
import warnings
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import text
from .autodiff import Tensor
from .data import class_counts
from .metrics import roc_auc
from .model import MODE_I, MODE_IGR, MODE_IR, MODE_R

PROB_CLAMP = 1e-7
TOKEN_PROB_FLOOR = 1e-12


@dataclass
class ClassWeights:
    beta_p: float
    beta_n: float
    lam: np.ndarray


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    accum_steps: int = 1
    epochs: int = 4
    dropout: float = 0.5
    l2: float = 1e-4
    alpha: float = 0.85
    report_dropout: float = 0.2
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.report_dropout <= 1.0:
            raise ValueError("dropout probabilities must be in [0, 1)")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if min(self.batch_size, self.accum_steps, self.epochs) < 1:
            raise ValueError("batch_size, accum_steps and epochs must be positive")
        if self.lr < 0 or self.l2 < 0:
            raise ValueError("lr and l2 must be nonnegative")


def compute_class_weights(labels, no_finding_index=None):
    """Positive/negative balance and per-class rarity weights.

    beta_p = |N|/(|P|+|N|) and beta_n = |P|/(|P|+|N|), where |P| counts
    records carrying at least one disease label; lambda_m = (Q - Q_m)/Q.
    When every record is diseased (or none is) the betas degenerate to
    zero on one side, so we warn and fall back to 0.5/0.5.
    """
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.shape[0] == 0:
        raise ValueError("need a nonempty records x classes label matrix")
    counts = class_counts(labels, no_finding_index)
    if counts.p_count == 0 or counts.n_count == 0:
        warnings.warn(
            "degenerate class balance (|P| or |N| is zero); using beta = 0.5/0.5"
        )
        beta_p = beta_n = 0.5
    else:
        beta_p = counts.n_count / counts.q
        beta_n = counts.p_count / counts.q
    lam = (counts.q - counts.q_m) / counts.q
    return ClassWeights(beta_p=beta_p, beta_n=beta_n, lam=lam)


def classification_loss(probs, labels, weights):
    """Weighted binary cross entropy over classes for one sample.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    y = np.asarray(labels, dtype=np.float64)
    if probs.shape != y.shape:
        raise ValueError(f"probs shape {probs.shape} != labels shape {y.shape}")
    f = ad.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos_w = Tensor((weights.lam * weights.beta_p * y).astype(probs.dtype))
    neg_w = Tensor((weights.lam * weights.beta_n * (1.0 - y)).astype(probs.dtype))
    pos_term = ad.sum_along(ad.mul(ad.log(f), pos_w))
    neg_term = ad.sum_along(ad.mul(ad.log(ad.sub(1.0, f)), neg_w))
    return ad.scale(ad.add(pos_term, neg_term), -1.0)


def generative_loss(step_dists, targets):
    """Mean next-token negative log likelihood over the teacher-forced steps."""
    if step_dists is None or targets is None:
        raise ValueError("generative loss needs step distributions and targets")
    if step_dists.shape[0] != len(targets):
        raise ValueError(
            f"{step_dists.shape[0]} step distributions vs {len(targets)} targets"
        )
    picked = ad.gather_per_row(step_dists, targets)
    logp = ad.log(ad.clamp(picked, TOKEN_PROB_FLOOR, 1.0))
    return ad.scale(ad.mean_along(logp), -1.0)


def attention_penalty(attn):
    """Row-diversity penalty ||G G^T - I||_F^2."""
    r = attn.shape[0]
    gram = ad.matmul(attn, ad.transpose(attn))
    diff = ad.sub(gram, Tensor(np.eye(r, dtype=attn.dtype)))
    return ad.sum_along(ad.mul(diff, diff))


def joint_loss(l_c, l_r, alpha, penalty=None, penal_coeff=1.0):
    """alpha * L_C + (1 - alpha) * L_R, plus the attention penalty term."""
    total = ad.add(ad.scale(l_c, alpha), ad.scale(l_r, 1.0 - alpha))
    if penalty is not None and penal_coeff != 0.0:
        total = ad.add(total, ad.scale(penalty, penal_coeff))
    return total


def report_dropout(tokens, p, rng):
    """Replace non-special tokens by OOV with probability p (seedable)."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"drop probability must be in [0, 1], got {p}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    specials = (text.PAD, text.START, text.END)
    out = list(tokens)
    if p == 0.0:
        return out
    draws = rng.random(len(out))
    for i, tok in enumerate(out):
        if tok not in specials and draws[i] < p:
            out[i] = text.OOV
    return out


class AdamOptimizer:
    """Adam with bias correction; L2 folds into the gradient pre-moments."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, l2=0.0):
        self.params = OrderedDict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.l2 = l2
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.l2:
                g = g + self.l2 * p.data
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# Epoch orchestration
# ---------------------------------------------------------------------------


@dataclass
class EpochRow:
    epoch: int
    train_lc: float
    train_lr: float
    val_objective: float
    val_auc: float
    seconds: float


@dataclass
class TrainResult:
    rows: list
    best_epoch: int
    best_objective: float
    weights: ClassWeights


def encode_reports(dataset, vocab):
    return [text.encode(text.tokenize(s.report), vocab) for s in dataset.samples]


def _sample_total_loss(model, res, labels, weights, cfg, mode):
    """Total loss tensor plus float (l_c, l_r) readouts for one sample."""
    l_c = classification_loss(res.probs, labels, weights)
    penalty = None
    if res.attn_matrix is not None and model.config.penal_coeff != 0.0:
        penalty = attention_penalty(res.attn_matrix)
    if mode == MODE_IGR:
        l_r = generative_loss(res.token_dists, res.targets)
        total = joint_loss(l_c, l_r, cfg.alpha, penalty, model.config.penal_coeff)
        return total, l_c.item(), l_r.item()
    total = l_c
    if penalty is not None:
        total = ad.add(total, ad.scale(penalty, model.config.penal_coeff))
    return total, l_c.item(), 0.0


def evaluate_split(model, dataset, vocab, cfg, mode=None):
    """Validation/test pass: mean objective, per-class scores, generations.

    The objective mirrors the training loss (teacher-forced for igr,
    dropout off); classification scores for igr come from self-generated
    reports, matching inference conditions.
    """
    mode = mode or model.config.mode
    weights = compute_class_weights(
        np.stack([s.labels for s in dataset.samples]), dataset.no_finding_index
    )
    encoded = None if mode == MODE_I else encode_reports(dataset, vocab)
    scores = np.zeros((len(dataset), model.config.m_cls))
    generated = [] if mode == MODE_IGR else None
    obj_sum = 0.0
    with ad.no_grad():
        for i, sample in enumerate(dataset.samples):
            tokens = None if encoded is None else encoded[i]
            if mode == MODE_IGR:
                teacher = model.forward(
                    sample.image, tokens, mode=mode,
                    teacher_forcing=True, need_token_dists=True,
                )
                total, _, _ = _sample_total_loss(
                    model, teacher, sample.labels, weights, cfg, mode
                )
                obj_sum += total.item()
                inference = model.forward(sample.image, None, mode=mode,
                                          teacher_forcing=False)
                scores[i] = inference.probs.data
                generated.append(inference.generated)
            else:
                image = None if mode == MODE_R else sample.image
                res = model.forward(image, tokens, mode=mode)
                total, _, _ = _sample_total_loss(
                    model, res, sample.labels, weights, cfg, mode
                )
                obj_sum += total.item()
                scores[i] = res.probs.data
    return obj_sum / max(1, len(dataset)), scores, generated


def per_class_aucs(scores, labels):
    aucs = []
    for cls in range(labels.shape[1]):
        curve = roc_auc(scores[:, cls], labels[:, cls])
        aucs.append(None if curve is None else curve.auc)
    return aucs


def macro_auc(scores, labels):
    aucs = [a for a in per_class_aucs(scores, labels) if a is not None]
    if not aucs:
        raise ValueError("no class has both positives and negatives")
    return sum(aucs) / len(aucs)


def train(model, train_ds, val_ds, vocab, cfg, mode=None):
    """Run the epoch loop; the model ends up holding the best-validation state.

    Gradients accumulate over accum_steps micro-batches of batch_size
    samples before each optimizer step, which matches a single large
    batch up to float summation order.
    """
    cfg.validate()
    mode = mode or model.config.mode
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("train and validation splits must be nonempty")
    labels = np.stack([s.labels for s in train_ds.samples])
    weights = compute_class_weights(labels, train_ds.no_finding_index)
    encoded = None if mode == MODE_I else encode_reports(train_ds, vocab)
    opt = AdamOptimizer(model.parameters(), lr=cfg.lr, l2=cfg.l2)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101]))
    dropout_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 102]))
    repdrop_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 103]))

    rows = []
    best_state = None
    best_objective = float("inf")
    best_epoch = -1
    window = cfg.batch_size * cfg.accum_steps
    n = len(train_ds)

    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        order = shuffle_rng.permutation(n)
        lc_sum = lr_sum = 0.0
        pos = 0
        while pos < n:
            chunk = order[pos : pos + window]
            pos += window
            opt.zero_grad()
            inv = 1.0 / len(chunk)
            for idx in chunk:
                sample = train_ds.samples[idx]
                tokens = None
                if encoded is not None:
                    tokens = encoded[idx]
                    if mode == MODE_IR and cfg.report_dropout > 0.0:
                        tokens = report_dropout(tokens, cfg.report_dropout, repdrop_rng)
                image = None if mode == MODE_R else sample.image
                res = model.forward(
                    image, tokens, mode=mode, teacher_forcing=True,
                    dropout_p=cfg.dropout, rng=dropout_rng,
                    need_token_dists=(mode == MODE_IGR),
                )
                total, lc, lr_val = _sample_total_loss(
                    model, res, sample.labels, weights, cfg, mode
                )
                lc_sum += lc
                lr_sum += lr_val
                ad.scale(total, inv).backward()
            opt.step()
        val_obj, val_scores, _ = evaluate_split(model, val_ds, vocab, cfg, mode)
        val_labels = np.stack([s.labels for s in val_ds.samples])
        val_auc = macro_auc(val_scores, val_labels)
        rows.append(EpochRow(
            epoch=epoch,
            train_lc=lc_sum / n,
            train_lr=lr_sum / n,
            val_objective=val_obj,
            val_auc=val_auc,
            seconds=time.perf_counter() - started,
        ))
        if val_obj < best_objective:
            best_objective = val_obj
            best_epoch = epoch
            best_state = OrderedDict(
                (k, p.data.copy()) for k, p in model.parameters().items()
            )
    if best_state is not None:
        model.load_state(best_state)
    return TrainResult(rows=rows, best_epoch=best_epoch,
                       best_objective=best_objective, weights=weights)


def format_log(rows):
    lines = ["epoch\ttrain_lc\ttrain_lr\tval_objective\tval_auc\tseconds"]
    for r in rows:
        lines.append(
            f"{r.epoch}\t{r.train_lc:.6f}\t{r.train_lr:.6f}"
            f"\t{r.val_objective:.6f}\t{r.val_auc:.6f}\t{r.seconds:.3f}"
        )
    return "\n".join(lines) + "\n"
