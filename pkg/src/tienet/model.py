"""The joint classification / report-generation architecture.

A small convolutional backbone plus a 1x1 transition layer turns the
input image into a D x D x C feature grid X.  A single-layer LSTM walks
the report tokens with additive spatial attention over X.  Two pooled
summaries feed the multi-label classifier:

* a text embedding: an r-row attention matrix G over the LSTM states H
  gives M = G H^T, max-pooled over rows (``aete``), and
* a visual embedding: per-token saliency (column max of G) reweights the
  per-step spatial maps into one combined map that pools X (``swgap``).

Inference modes share parameters but wire the classifier differently:

* ``r``           report only; X is replaced by zeros.
* ``ir``          image + report (both embeddings).
* ``igr``         image only at inference; the model first generates a
                  report, then classifies from the self-generated text.
* ``i-baseline``  image only through plain global average pooling.
"""

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import text
from .autodiff import Tensor

MODE_R = "r"
MODE_IR = "ir"
MODE_IGR = "igr"
MODE_I = "i-baseline"
MODES = (MODE_R, MODE_IR, MODE_IGR, MODE_I)

_MASK_OFF = -1e30  # additive logit mask for padded token columns


@dataclass
class ModelConfig:
    d_in: int = 32                    # input image side
    in_channels: int = 1
    conv_channels: tuple = (8, 16, 32)
    channels: int = 32                # C: transition-layer output channels
    d_h: int = 32                     # LSTM state size
    d_w: int = 32                     # word-embedding size
    s: int = 64                       # attention hidden size
    r: int = 5                        # attention rows
    m_cls: int = 15
    vocab_size: int = 0
    mode: str = MODE_IR
    max_decode_len: int = 40
    alpha: float = 0.85
    penal_coeff: float = 1.0
    classifier_hidden: int = 0        # 0 = single linear layer
    use_global_ctx: bool = True       # feed meanpool(X) to the LSTM input
    dtype: str = "f64"

    @property
    def grid(self):
        """Spatial side D of the feature grid after three stride-2 blocks."""
        return self.d_in // 8

    def numpy_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.d_in % 8 != 0 or self.d_in < 8:
            raise ValueError(f"d_in must be a positive multiple of 8, got {self.d_in}")
        if len(self.conv_channels) != 3:
            raise ValueError("conv_channels must list three block widths")
        positive = (
            self.in_channels, self.channels, self.d_h, self.d_w, self.s,
            self.r, self.m_cls, self.max_decode_len,
        )
        if min(positive) < 1 or min(self.conv_channels) < 1:
            raise ValueError("all model extents must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.mode != MODE_I and self.vocab_size < text.N_SPECIALS + 1:
            raise ValueError("vocab_size must be set before building an RNN-mode model")
        if self.dtype not in ("f32", "f64"):
            raise ValueError(f"dtype must be 'f32' or 'f64', got {self.dtype!r}")

    def classifier_input_dim(self, mode=None):
        mode = mode or self.mode
        if mode == MODE_R:
            return self.d_h
        if mode in (MODE_IR, MODE_IGR):
            return self.d_h + self.channels
        return self.channels


@dataclass
class AttentionTrace:
    """Interpretability record of one forward pass."""

    attn_matrix: np.ndarray      # G, r x T
    embedding: np.ndarray        # M, r x d_h
    spatial_maps: np.ndarray     # T x D x D
    saliency: np.ndarray         # per-token column max of G, length T
    combined_map: np.ndarray     # saliency-weighted sum of maps, D x D
    token_mask: np.ndarray       # bool, True at real (non-pad) positions

    def validate(self, atol=1e-6):
        r, t = self.attn_matrix.shape
        if self.spatial_maps.shape[0] != t or self.saliency.shape != (t,):
            raise ValueError("trace blocks disagree on sequence length")
        real = self.token_mask
        row_sums = self.attn_matrix[:, real].sum(axis=1)
        if np.abs(row_sums - 1.0).max() > atol:
            raise ValueError("attention matrix rows do not sum to 1 over real tokens")
        map_sums = self.spatial_maps.reshape(t, -1).sum(axis=1)
        if np.abs(map_sums - 1.0).max() > atol:
            raise ValueError("spatial attention maps do not sum to 1")
        expected_sal = np.where(real, self.attn_matrix.max(axis=0), 0.0)
        if np.abs(self.saliency - expected_sal).max() > atol:
            raise ValueError("saliency is not the column max of the attention matrix")


@dataclass
class ForwardResult:
    probs: Tensor
    logits: Tensor
    token_dists: Tensor | None      # teacher-forced next-token distributions
    targets: list | None            # token ids the distributions should predict
    attn_matrix: Tensor | None      # G, kept on tape for the diversity penalty
    trace: AttentionTrace | None
    generated: list | None = None   # self-generated token ids (igr inference)


def _glorot(rng, fan_in, fan_out, shape, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class TieNetModel:
    """All learnable parameters plus the forward wiring for one mode."""

    def __init__(self, config, rng=None):
        config.validate()
        self.config = config
        self.params = OrderedDict()
        self._init_params(rng if rng is not None else np.random.default_rng(0))

    # ------------------------------------------------------------------
    # Parameters
    # ------------------------------------------------------------------

    def _add(self, name, array):
        self.params[name] = Tensor(array, requires_grad=True)
        return self.params[name]

    def _init_params(self, rng):
        cfg = self.config
        dt = cfg.numpy_dtype()
        has_backbone = cfg.mode != MODE_R
        has_rnn = cfg.mode != MODE_I

        if has_backbone:
            chans = (cfg.in_channels,) + tuple(cfg.conv_channels)
            for i in range(3):
                cin, cout = chans[i], chans[i + 1]
                std = np.sqrt(2.0 / (9 * cin))
                self._add(
                    f"backbone.conv{i + 1}.kernel",
                    rng.normal(0.0, std, size=(3, 3, cin, cout)).astype(dt),
                )
                self._add(f"backbone.conv{i + 1}.bias", np.zeros(cout, dt))
            self._add(
                "backbone.transition.kernel",
                _glorot(rng, chans[-1], cfg.channels, (1, 1, chans[-1], cfg.channels), dt),
            )
            self._add("backbone.transition.bias", np.zeros(cfg.channels, dt))

        if has_rnn:
            c, d_h, d_w, s, v = cfg.channels, cfg.d_h, cfg.d_w, cfg.s, cfg.vocab_size
            for gate in ("h", "c"):
                self._add(f"init.phi_{gate}.weight", _glorot(rng, c, d_h, (d_h, c), dt))
                self._add(f"init.phi_{gate}.bias", np.zeros(d_h, dt))
            self._add("attention.u_x", _glorot(rng, c, s, (s, c), dt))
            self._add("attention.u_h", _glorot(rng, d_h, s, (s, d_h), dt))
            self._add("attention.v", _glorot(rng, s, 1, (s,), dt))
            self._add("embedding.table", rng.uniform(-0.05, 0.05, size=(v, d_w)).astype(dt))
            d_in = d_w + c + (c if cfg.use_global_ctx else 0)
            self._add("lstm.w", _glorot(rng, d_in, d_h, (4 * d_h, d_in), dt))
            self._add("lstm.u", _glorot(rng, d_h, d_h, (4 * d_h, d_h), dt))
            lstm_b = np.zeros(4 * d_h, dt)
            lstm_b[d_h : 2 * d_h] = 1.0  # forget-gate bias
            self._add("lstm.b", lstm_b)
            self._add("output.proj", _glorot(rng, d_h, v, (d_h, v), dt))
            self._add("output.bias", np.zeros(v, dt))
            self._add("aete.w_s1", _glorot(rng, d_h, s, (s, d_h), dt))
            self._add("aete.w_s2", _glorot(rng, s, cfg.r, (cfg.r, s), dt))

        in_dim = cfg.classifier_input_dim()
        if cfg.classifier_hidden > 0:
            hid = cfg.classifier_hidden
            self._add("classifier.hidden.weight", _glorot(rng, in_dim, hid, (hid, in_dim), dt))
            self._add("classifier.hidden.bias", np.zeros(hid, dt))
            in_dim = hid
        self._add("classifier.out.weight", _glorot(rng, in_dim, cfg.m_cls, (cfg.m_cls, in_dim), dt))
        self._add("classifier.out.bias", np.zeros(cfg.m_cls, dt))

    def parameters(self):
        return self.params

    def state_arrays(self):
        return OrderedDict((k, p.data) for k, p in self.params.items())

    def load_state(self, arrays):
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValueError(
                f"parameter set mismatch: missing {sorted(missing)}, extra {sorted(extra)}"
            )
        for name, p in self.params.items():
            arr = np.asarray(arrays[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"{name}: checkpoint shape {arr.shape} != model shape {p.data.shape}"
                )
            p.data = arr.copy()
            p.grad = None

    # ------------------------------------------------------------------
    # Architecture pieces
    # ------------------------------------------------------------------

    def backbone_forward(self, image):
        """Image [d_in, d_in, in_channels] -> feature grid X [D, D, C]."""
        cfg = self.config
        expected = (cfg.d_in, cfg.d_in, cfg.in_channels)
        arr = np.asarray(image)
        if arr.shape != expected:
            raise ad.ShapeError(f"backbone: image shape {arr.shape}, expected {expected}")
        x = Tensor(arr.astype(cfg.numpy_dtype()))
        for i in (1, 2, 3):
            x = ad.conv2d(
                x,
                self.params[f"backbone.conv{i}.kernel"],
                self.params[f"backbone.conv{i}.bias"],
                stride=2,
                pad=1,
            )
            x = ad.relu(x)
        return ad.conv2d(
            x,
            self.params["backbone.transition.kernel"],
            self.params["backbone.transition.bias"],
            stride=1,
            pad=0,
        )

    def _zero_feature_grid(self):
        cfg = self.config
        d2 = cfg.grid * cfg.grid
        return Tensor(np.zeros((d2, cfg.channels), cfg.numpy_dtype()))

    def init_hidden(self, x_flat):
        """Initial LSTM state from the mean-pooled feature grid."""
        pooled = ad.mean_along(x_flat, axis=0)
        h0 = ad.tanh(ad.add(ad.matmul(self.params["init.phi_h.weight"], pooled),
                            self.params["init.phi_h.bias"]))
        c0 = ad.tanh(ad.add(ad.matmul(self.params["init.phi_c.weight"], pooled),
                            self.params["init.phi_c.bias"]))
        return h0, c0

    def _attend(self, h_prev, xu, x_flat):
        """One attention step over the flattened grid; returns (map, context)."""
        u = ad.matmul(self.params["attention.u_h"], h_prev)
        scores = ad.attn_scores(xu, u, self.params["attention.v"])
        a = ad.softmax(scores, axis=0)
        return a, ad.matmul(a, x_flat)

    def spatial_attention(self, h_prev, x_grid):
        """Attention map over X for a given previous state, as a D x D grid."""
        cfg = self.config
        x_flat = ad.reshape(x_grid, (cfg.grid * cfg.grid, cfg.channels))
        xu = ad.matmul(x_flat, ad.transpose(self.params["attention.u_x"]))
        a, _ = self._attend(h_prev, xu, x_flat)
        return ad.reshape(a, (cfg.grid, cfg.grid))

    def lstm_step(self, token_id, a_flat, x_flat, state):
        """One teacher-forced step; a_flat is the attention map over the grid."""
        h_prev, c_prev = state
        emb = ad.embedding_row(self.params["embedding.table"], token_id)
        att_vec = ad.matmul(a_flat, x_flat)
        parts = [emb, att_vec]
        if self.config.use_global_ctx:
            parts.append(ad.mean_along(x_flat, axis=0))
        return self._cell(ad.concat(parts), h_prev, c_prev)

    def _cell(self, inp, h_prev, c_prev):
        hc = ad.lstm_cell(
            self.params["lstm.w"], self.params["lstm.u"], self.params["lstm.b"],
            inp, h_prev, c_prev,
        )
        d_h = self.config.d_h
        return ad.narrow(hc, 0, 0, d_h), ad.narrow(hc, 0, d_h, d_h)

    def run_encoder_rnn(self, token_ids, x_grid=None, need_dists=False):
        """Teacher-forced pass over a token sequence.

        Returns (H [d_h, T], maps [T, D*D], dists [T-1, V] or None).
        Pad tokens are dropped before the walk, so T counts real tokens.
        x_grid None means report-only mode: the feature grid is zeros and
        the outputs are independent of any image.
        """
        cfg = self.config
        token_ids = text.strip_pads(token_ids)
        if len(token_ids) < 2:
            raise ValueError("token sequence must hold at least START and END")
        if x_grid is None:
            x_flat = self._zero_feature_grid()
        else:
            x_flat = ad.reshape(x_grid, (cfg.grid * cfg.grid, cfg.channels))
        xu = ad.matmul(x_flat, ad.transpose(self.params["attention.u_x"]))
        ctx = ad.mean_along(x_flat, axis=0) if cfg.use_global_ctx else None
        h, c = self.init_hidden(x_flat)

        hs, maps, logit_rows = [], [], []
        n_steps = len(token_ids)
        for step, tok in enumerate(token_ids):
            a, att_vec = self._attend(h, xu, x_flat)
            emb = ad.embedding_row(self.params["embedding.table"], tok)
            parts = [emb, att_vec] + ([ctx] if ctx is not None else [])
            h, c = self._cell(ad.concat(parts), h, c)
            hs.append(h)
            maps.append(a)
            if need_dists and step < n_steps - 1:
                logits = ad.add(ad.matmul(h, self.params["output.proj"]),
                                self.params["output.bias"])
                logit_rows.append(logits)
        big_h = ad.transpose(ad.stack_rows(hs))
        map_mat = ad.stack_rows(maps)
        dists = None
        if need_dists:
            dists = ad.softmax(ad.stack_rows(logit_rows), axis=1)
        return big_h, map_mat, dists

    def attention_scores_matrix(self, big_h, token_mask=None):
        """Pre-softmax attention logits over hidden states, r x T."""
        hidden = ad.tanh(ad.matmul(self.params["aete.w_s1"], big_h))
        scores = ad.matmul(self.params["aete.w_s2"], hidden)
        if token_mask is not None:
            offsets = np.where(np.asarray(token_mask, bool), 0.0, _MASK_OFF)
            offsets = offsets.astype(scores.dtype)
            scores = ad.add(scores, ad.expand_rows(Tensor(offsets), self.config.r))
        return scores

    def aete_from_scores(self, scores, big_h):
        """Row-stochastic G, embedding M = G H^T and its max-over-rows pooling."""
        attn = ad.softmax(scores, axis=1)
        emb = ad.matmul(attn, ad.transpose(big_h))
        pooled = ad.max_along(emb, axis=0)
        return attn, emb, pooled

    def aete(self, big_h, token_mask=None):
        return self.aete_from_scores(
            self.attention_scores_matrix(big_h, token_mask), big_h
        )

    def swgap(self, attn, map_mat, x_flat, token_mask=None):
        """Saliency-weighted pooling of X; returns (saliency, map, pooled X)."""
        sal = ad.max_along(attn, axis=0)
        if token_mask is not None:
            keep = np.asarray(token_mask, bool).astype(sal.dtype)
            sal = ad.mul(sal, Tensor(keep))
        combined = ad.matmul(sal, map_mat)
        pooled = ad.matmul(combined, x_flat)
        return sal, combined, pooled

    def classify(self, x_aete=None, x_swgap=None, x_gap=None, *,
                 mode=None, dropout_p=0.0, rng=None):
        mode = mode or self.config.mode
        if mode == MODE_R:
            if x_aete is None or x_swgap is not None or x_gap is not None:
                raise ValueError("report-only classification takes the text embedding only")
            feat = x_aete
        elif mode in (MODE_IR, MODE_IGR):
            if x_aete is None or x_swgap is None:
                raise ValueError(f"mode {mode} needs both text and visual embeddings")
            feat = ad.concat([x_aete, x_swgap])
        else:
            if x_gap is None or x_aete is not None or x_swgap is not None:
                raise ValueError("image-baseline classification takes pooled X only")
            feat = x_gap
        if dropout_p > 0.0:
            feat = ad.dropout(feat, dropout_p, rng)
        if self.config.classifier_hidden > 0:
            feat = ad.relu(ad.add(
                ad.matmul(self.params["classifier.hidden.weight"], feat),
                self.params["classifier.hidden.bias"],
            ))
        logits = ad.add(ad.matmul(self.params["classifier.out.weight"], feat),
                        self.params["classifier.out.bias"])
        return logits, ad.sigmoid(logits)

    # ------------------------------------------------------------------
    # Whole-model passes
    # ------------------------------------------------------------------

    def _check_mode(self, mode):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        own = self.config.mode
        compatible = mode == own or {mode, own} == {MODE_IR, MODE_IGR}
        if not compatible:
            raise ValueError(f"model built for mode {own!r} cannot run mode {mode!r}")

    def forward(self, image=None, tokens=None, *, mode=None, teacher_forcing=None,
                dropout_p=0.0, rng=None, need_token_dists=None):
        """Full pass for one sample; tokens are vocabulary ids with START/END.

        In igr mode ``teacher_forcing=True`` walks the provided tokens
        (training and loss evaluation) while ``False`` — the default —
        first generates a report from the image and classifies from the
        self-generated sequence, matching inference conditions.
        """
        mode = mode or self.config.mode
        self._check_mode(mode)

        if mode == MODE_I:
            if image is None:
                raise ValueError("image-baseline mode requires an image")
            x = self.backbone_forward(image)
            cfg = self.config
            x_flat = ad.reshape(x, (cfg.grid * cfg.grid, cfg.channels))
            x_gap = ad.mean_along(x_flat, axis=0)
            logits, probs = self.classify(x_gap=x_gap, mode=mode,
                                          dropout_p=dropout_p, rng=rng)
            return ForwardResult(probs=probs, logits=logits, token_dists=None,
                                 targets=None, attn_matrix=None, trace=None)

        generated = None
        if mode == MODE_IGR and not teacher_forcing:
            if image is None:
                raise ValueError("igr inference requires an image")
            generated, _ = self.generate(image, rng=rng)
            tokens = generated
        if tokens is None:
            raise ValueError(f"mode {mode} requires a report token sequence")
        if mode in (MODE_IR, MODE_IGR) and image is None:
            raise ValueError(f"mode {mode} requires an image")

        if need_token_dists is None:
            need_token_dists = mode == MODE_IGR and bool(teacher_forcing)

        x_grid = None if mode == MODE_R else self.backbone_forward(image)
        big_h, map_mat, dists = self.run_encoder_rnn(
            tokens, x_grid, need_dists=need_token_dists
        )
        attn, emb, x_aete = self.aete(big_h)
        if mode == MODE_R:
            x_flat = self._zero_feature_grid()
        else:
            cfg = self.config
            x_flat = ad.reshape(x_grid, (cfg.grid * cfg.grid, cfg.channels))
        sal, combined, x_swgap = self.swgap(attn, map_mat, x_flat)

        if mode == MODE_R:
            logits, probs = self.classify(x_aete=x_aete, mode=mode,
                                          dropout_p=dropout_p, rng=rng)
        else:
            logits, probs = self.classify(x_aete=x_aete, x_swgap=x_swgap, mode=mode,
                                          dropout_p=dropout_p, rng=rng)

        d = self.config.grid
        n_real = len(text.strip_pads(tokens))
        trace = AttentionTrace(
            attn_matrix=attn.data.copy(),
            embedding=emb.data.copy(),
            spatial_maps=map_mat.data.reshape(-1, d, d).copy(),
            saliency=sal.data.copy(),
            combined_map=combined.data.reshape(d, d).copy(),
            token_mask=np.ones(n_real, dtype=bool),
        )
        targets = text.strip_pads(tokens)[1:] if need_token_dists else None
        return ForwardResult(probs=probs, logits=logits, token_dists=dists,
                             targets=targets, attn_matrix=attn, trace=trace,
                             generated=generated)

    def generate(self, image, temperature=None, rng=None, max_len=None):
        """Greedy (or temperature-sampled) report decoding from an image.

        Returns (token ids including START/END, per-step softmax rows).
        PAD and START never get selected; END is appended if the cap hits.
        """
        cfg = self.config
        if cfg.mode == MODE_I:
            raise ValueError("image-baseline models do not generate reports")
        cap = max_len if max_len is not None else cfg.max_decode_len
        with ad.no_grad():
            x = self.backbone_forward(image)
            x_flat = ad.reshape(x, (cfg.grid * cfg.grid, cfg.channels))
            xu = ad.matmul(x_flat, ad.transpose(self.params["attention.u_x"]))
            ctx = ad.mean_along(x_flat, axis=0) if cfg.use_global_ctx else None
            h, c = self.init_hidden(x_flat)
            ids = [text.START]
            dists = []
            cur = text.START
            for _ in range(cap):
                a, att_vec = self._attend(h, xu, x_flat)
                emb = ad.embedding_row(self.params["embedding.table"], cur)
                parts = [emb, att_vec] + ([ctx] if ctx is not None else [])
                h, c = self._cell(ad.concat(parts), h, c)
                logits = (self.params["output.proj"].data.T @ h.data
                          + self.params["output.bias"].data)
                shifted = logits - logits.max()
                probs = np.exp(shifted)
                probs /= probs.sum()
                dists.append(probs)
                choice = probs.copy()
                choice[text.PAD] = 0.0
                choice[text.START] = 0.0
                if temperature is None:
                    nxt = int(np.argmax(choice))
                else:
                    scaled = np.exp(shifted / temperature)
                    scaled[text.PAD] = 0.0
                    scaled[text.START] = 0.0
                    scaled /= scaled.sum()
                    nxt = int(rng.choice(len(scaled), p=scaled))
                ids.append(nxt)
                cur = nxt
                if nxt == text.END:
                    break
            if ids[-1] != text.END:
                ids.append(text.END)
        return ids, dists


# ---------------------------------------------------------------------------
# Trace export
# ---------------------------------------------------------------------------


def save_trace(trace, path, tokens=None):
    """Write an attention trace as labeled row-major text blocks."""
    trace.validate()

    def block(fh, name, mat):
        mat = np.atleast_2d(np.asarray(mat, dtype=np.float64))
        fh.write(f"{name} {mat.shape[0]} {mat.shape[1]}\n")
        for row in mat:
            fh.write(" ".join(f"{v:.10e}" for v in row) + "\n")

    t = trace.spatial_maps.shape[0]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("#tienet-trace v1\n")
        if tokens is not None:
            fh.write("tokens " + " ".join(tokens) + "\n")
        block(fh, "G", trace.attn_matrix)
        block(fh, "M", trace.embedding)
        block(fh, "A_T", trace.spatial_maps.reshape(t, -1))
        block(fh, "G_SAL", trace.saliency)
        block(fh, "A_WS", trace.combined_map)
