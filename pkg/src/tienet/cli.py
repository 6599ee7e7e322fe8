"""Command-line entry point: gen / train / eval / generate / gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 bad usage or configuration.
Every command writes a ``manifest.json`` listing the artifacts it
produced; outputs are byte-stable given identical inputs and seed
(timestamps live only in the manifest).
"""

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import data as dat
from . import metrics, text, training
from .autodiff import Tensor, gradcheck
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, apply_keys, parse_set_args, read_kv_file, snapshot
from .model import (
    MODE_I, MODE_IGR, MODE_IR, MODE_R, MODES,
    ModelConfig, TieNetModel, save_trace,
)

MODE_LABELS = {MODE_R: "R", MODE_IR: "I+R", MODE_I: "I", MODE_IGR: "I+GR"}
GRADCHECK_TOL = 1e-4


def _out_dir(args):
    out = args.out or os.environ.get("TIENET_OUT")
    if not out:
        raise ConfigError("no output directory: pass --out or set TIENET_OUT")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(out_dir, command, cfg_snapshot, seed, mode, artifacts, started):
    manifest = {
        "command": command,
        "seed": seed,
        "mode": mode,
        "config": cfg_snapshot,
        "artifacts": sorted(str(a) for a in artifacts),
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def _gather_kv(args):
    kv = {}
    if getattr(args, "config", None):
        kv.update(read_kv_file(args.config))
    kv.update(parse_set_args(getattr(args, "set", None)))
    for flag in ("seed", "lr", "epochs"):
        value = getattr(args, flag, None)
        if value is not None:
            kv[flag] = str(value)
    return kv


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def cmd_gen(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    spec = dat.SyntheticSpec()
    kv = {}
    if args.spec:
        kv.update(read_kv_file(args.spec))
    kv.update(parse_set_args(args.set))
    if args.seed is not None:
        kv["seed"] = str(args.seed)
    apply_keys(kv, spec)
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc))
    out_dir = _out_dir(args)
    datasets = dat.generate(spec)
    artifacts = []
    for split, ds in datasets.items():
        path = out_dir / f"{split}.ds"
        dat.save_dataset(ds, path)
        artifacts.append(path)
    artifacts.append(_write_manifest(
        out_dir, "gen", snapshot(spec), spec.seed, None, artifacts, started
    ))
    print(f"wrote {len(datasets)} splits to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _load_split(data_dir, split):
    path = Path(data_dir) / f"{split}.ds"
    if not path.exists():
        raise ConfigError(f"dataset split not found: {path}")
    return dat.load_dataset(path)


def cmd_train(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    train_ds = _load_split(args.data, "train")
    val_ds = _load_split(args.data, "val")

    model_cfg = ModelConfig(d_in=train_ds.grid, in_channels=train_ds.channels,
                            m_cls=train_ds.n_classes, mode=args.mode)
    train_cfg = training.TrainConfig()
    kv = _gather_kv(args)
    kv.pop("mode", None)
    apply_keys(kv, train_cfg, model_cfg)
    model_cfg.alpha = train_cfg.alpha
    try:
        train_cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc))

    vocab = None
    if args.mode != MODE_I:
        corpus = [text.tokenize(s.report) for s in train_ds.samples]
        vocab = text.build_vocab(corpus, min_count=2)
        model_cfg.vocab_size = len(vocab)
    try:
        model_cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc))

    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 0]))
    model = TieNetModel(model_cfg, rng=rng)
    result = training.train(model, train_ds, val_ds, vocab, train_cfg)

    out_dir = _out_dir(args)
    artifacts = []
    ckpt = out_dir / "checkpoint.ckpt"
    save_checkpoint(model.state_arrays(), ckpt)
    artifacts.append(ckpt)
    log_path = out_dir / "train.log"
    log_path.write_text(training.format_log(result.rows), encoding="utf-8")
    artifacts.append(log_path)
    snap = snapshot(model_cfg) + snapshot(train_cfg)
    snap_path = out_dir / "config.snapshot"
    snap_path.write_text(snap, encoding="utf-8")
    artifacts.append(snap_path)
    if vocab is not None:
        vocab_path = out_dir / "vocab.txt"
        text.save_vocab(vocab, vocab_path)
        artifacts.append(vocab_path)
    artifacts.append(_write_manifest(
        out_dir, "train", snap, train_cfg.seed, args.mode, artifacts, started
    ))
    best = result.rows[result.best_epoch - 1]
    print(f"best epoch {result.best_epoch}: val_objective={best.val_objective:.6f} "
          f"val_auc={best.val_auc:.4f}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _rebuild_model(ckpt_path, mode_override=None, config_path=None, vocab_path=None):
    ckpt_path = Path(ckpt_path)
    run_dir = ckpt_path.parent
    config_path = Path(config_path) if config_path else run_dir / "config.snapshot"
    if not config_path.exists():
        raise ConfigError(f"config snapshot not found: {config_path}")
    kv = read_kv_file(config_path)
    model_cfg = ModelConfig()
    train_cfg = training.TrainConfig()
    apply_keys(kv, model_cfg, train_cfg)
    if mode_override:
        model_cfg.mode = mode_override
    vocab = None
    if model_cfg.mode != MODE_I:
        vocab_path = Path(vocab_path) if vocab_path else run_dir / "vocab.txt"
        if not vocab_path.exists():
            raise ConfigError(f"vocabulary file not found: {vocab_path}")
        vocab = text.load_vocab(vocab_path)
        model_cfg.vocab_size = len(vocab)
    model = TieNetModel(model_cfg)
    model.load_state(load_checkpoint(ckpt_path))
    return model, vocab, train_cfg


def cmd_eval(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    modes = args.mode or []
    checkpoints = args.checkpoint or []
    if not checkpoints:
        raise ConfigError("eval needs at least one --checkpoint")
    if len(modes) not in (0, len(checkpoints)):
        raise ConfigError("--mode must be given once per --checkpoint (or not at all)")
    ds = _load_split(args.data, args.split)
    labels = ds.label_matrix()
    counts = labels.sum(axis=0).astype(int)
    out_dir = _out_dir(args)
    artifacts = []
    mode_aucs = {}
    text_rows = []
    eval_modes = []
    for i, ckpt in enumerate(checkpoints):
        override = modes[i] if modes else None
        model, vocab, train_cfg = _rebuild_model(
            ckpt, override, args.config, args.vocab
        )
        mode = model.config.mode
        eval_modes.append(mode)
        label = MODE_LABELS[mode]
        _, scores, generated = training.evaluate_split(model, ds, vocab, train_cfg)
        aucs = []
        for cls in range(ds.n_classes):
            curve = metrics.roc_auc(scores[:, cls], labels[:, cls])
            if curve is None:
                aucs.append(None)
                continue
            aucs.append(curve.auc)
            roc_path = out_dir / f"roc_{mode}_{ds.class_names[cls]}.tsv"
            metrics.save_roc_points(curve, roc_path)
            artifacts.append(roc_path)
        mode_aucs[label] = aucs
        if generated is not None:
            refs = [text.tokenize(s.report) for s in ds.samples]
            cands = [text.decode(g, vocab) for g in generated]
            matched = [metrics.score_report(c, r) for c, r in zip(cands, refs)]
            shuffled = [
                metrics.bleu_n(cands[j], refs[(j + 1) % len(refs)], 1)
                for j in range(len(cands))
            ]
            n = len(matched)
            text_rows = [
                ("bleu1", sum(m.bleu1 for m in matched) / n),
                ("bleu2", sum(m.bleu2 for m in matched) / n),
                ("bleu3", sum(m.bleu3 for m in matched) / n),
                ("bleu4", sum(m.bleu4 for m in matched) / n),
                ("rouge_l", sum(m.rouge_l for m in matched) / n),
                ("meteor", sum(m.meteor for m in matched) / n),
                ("bleu1_shuffled_pairs", sum(shuffled) / n),
            ]
    summary = metrics.format_summary_table(ds.class_names, mode_aucs, counts)
    summary_path = out_dir / "summary.tsv"
    summary_path.write_text(summary, encoding="utf-8")
    artifacts.append(summary_path)
    if text_rows:
        tm_path = out_dir / "textmetrics.tsv"
        tm_path.write_text(
            "".join(f"{k}\t{v:.6f}\n" for k, v in text_rows), encoding="utf-8"
        )
        artifacts.append(tm_path)
    artifacts.append(_write_manifest(
        out_dir, "eval", summary, None, ",".join(eval_modes), artifacts, started
    ))
    print(summary, end="")
    return 0


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def cmd_generate(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    model, vocab, _ = _rebuild_model(args.checkpoint, None, args.config, args.vocab)
    if model.config.mode not in (MODE_IR, MODE_IGR):
        raise ConfigError("report generation needs an ir- or igr-mode checkpoint")
    if args.image_file:
        raw = Path(args.image_file).read_text(encoding="utf-8").strip()
        side = model.config.d_in
        image = np.frombuffer(bytes.fromhex(raw), dtype="<f4").reshape(
            side, side, model.config.in_channels
        )
    elif args.data is not None and args.index is not None:
        ds = _load_split(args.data, args.split)
        if not 0 <= args.index < len(ds):
            raise ConfigError(f"--index {args.index} out of range for {len(ds)} records")
        image = ds.samples[args.index].image
    else:
        raise ConfigError("generate needs --image-file or --data plus --index")
    rng = np.random.default_rng(args.seed or 0)
    ids, _ = model.generate(image, temperature=args.temperature, rng=rng)
    tokens = text.decode(ids, vocab)
    report = " ".join(tokens)
    res = model.forward(image, ids, mode=model.config.mode, teacher_forcing=True)

    out_dir = _out_dir(args)
    artifacts = []
    report_path = out_dir / "report.txt"
    report_path.write_text(report + "\n", encoding="utf-8")
    artifacts.append(report_path)
    trace_path = out_dir / "trace.txt"
    token_strs = [vocab.token(i) for i in ids]
    save_trace(res.trace, trace_path, tokens=token_strs)
    artifacts.append(trace_path)
    artifacts.append(_write_manifest(
        out_dir, "generate", report, args.seed, model.config.mode, artifacts, started
    ))
    print(report)
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def tiny_gradcheck_config():
    """Smallest full config that still exercises every parameter group."""
    return ModelConfig(
        d_in=16, in_channels=1, conv_channels=(2, 2, 3), channels=3,
        d_h=4, d_w=3, s=5, r=2, m_cls=3, vocab_size=7,
        mode=MODE_IGR, max_decode_len=6, alpha=0.6, penal_coeff=1.0,
    )


def run_gradcheck(corrupt=None, seed=13):
    """Finite-difference check of the joint loss for every parameter.

    Returns a list of (name, max relative error) with the tape-recorded
    gradient compared against central differences at h=1e-6.  ``corrupt``
    adds an off-tape term that depends on the named parameter's first
    coordinate, simulating a broken backward rule (negative control).

    The default test point (seed, embedding rescale, image scale) is
    chosen so every nonzero gradient coordinate sits well above the
    float64 cancellation floor of the central differences; a coordinate
    with a ~1e-7 gradient cannot be compared relatively at step 1e-6.
    """
    cfg = tiny_gradcheck_config()
    rng = np.random.default_rng(seed)
    model = TieNetModel(cfg, rng=rng)
    emb = model.parameters()["embedding.table"]
    emb.data = rng.uniform(-0.8, 0.8, emb.data.shape)
    image = rng.normal(0.0, 1.5, size=(cfg.d_in, cfg.d_in, 1))
    tokens = [text.START, 4, 5, 6, text.END]
    labels = np.array([1, 0, 1], dtype=np.int8)
    weights = training.ClassWeights(beta_p=0.6, beta_n=0.4,
                                    lam=np.array([0.8, 0.5, 0.9]))

    def loss_fn(corrupt_param=None):
        def f(_param):
            res = model.forward(image, tokens, mode=MODE_IGR,
                                teacher_forcing=True, need_token_dists=True)
            l_c = training.classification_loss(res.probs, labels, weights)
            l_r = training.generative_loss(res.token_dists, res.targets)
            pen = training.attention_penalty(res.attn_matrix)
            total = training.joint_loss(l_c, l_r, cfg.alpha, pen, cfg.penal_coeff)
            if corrupt_param is not None:
                # off-tape contribution: value moves, recorded gradient not
                total = total + float(corrupt_param.data.reshape(-1)[0]) * 0.01
            return total
        return f

    results = []
    for name, param in model.parameters().items():
        broken = param if (corrupt and corrupt in name) else None
        err = gradcheck(loss_fn(broken), [param])
        results.append((name, err))
    return results


def cmd_gradcheck(args):
    results = run_gradcheck(
        corrupt=args.corrupt,
        seed=args.seed if args.seed is not None else 13,
    )
    width = max(len(name) for name, _ in results)
    all_ok = True
    for name, err in results:
        ok = err <= GRADCHECK_TOL
        all_ok &= ok
        print(f"{name:<{width}}  {err:12.3e}  {'PASS' if ok else 'FAIL'}")
    print(f"{'overall':<{width}}  {'':12}  {'PASS' if all_ok else 'FAIL'}")
    return 0 if all_ok else 1


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tienet",
        description="Synthetic-data training and evaluation for the "
                    "text-image embedding classifier/reporter.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help="output directory (default: $TIENET_OUT)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key")

    p_gen = sub.add_parser("gen", help="generate synthetic dataset splits")
    p_gen.add_argument("--spec", help="key=value spec file")
    common(p_gen)
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", help="train one mode on a dataset")
    p_train.add_argument("--config", help="key=value training config file")
    p_train.add_argument("--data", required=True, help="directory with *.ds splits")
    p_train.add_argument("--mode", required=True, choices=MODES)
    p_train.add_argument("--lr", type=float, default=None)
    p_train.add_argument("--epochs", type=int, default=None)
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="AUC summary table and ROC exports")
    p_eval.add_argument("--checkpoint", action="append", required=True)
    p_eval.add_argument("--mode", action="append", choices=MODES,
                        help="override checkpoint mode (once per checkpoint)")
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--split", default="test")
    p_eval.add_argument("--config", help="config snapshot (default: next to checkpoint)")
    p_eval.add_argument("--vocab", help="vocab file (default: next to checkpoint)")
    common(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_generate = sub.add_parser("generate", help="decode a report for one image")
    p_generate.add_argument("--checkpoint", required=True)
    p_generate.add_argument("--data")
    p_generate.add_argument("--split", default="test")
    p_generate.add_argument("--index", type=int)
    p_generate.add_argument("--image-file", help="file with one hex-packed image")
    p_generate.add_argument("--temperature", type=float, default=None)
    p_generate.add_argument("--config")
    p_generate.add_argument("--vocab")
    common(p_generate)
    p_generate.set_defaults(func=cmd_generate)

    p_gc = sub.add_parser("gradcheck", help="finite-difference check per parameter")
    p_gc.add_argument("--corrupt", help=argparse.SUPPRESS)
    common(p_gc)
    p_gc.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args) or 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
