"""The network: permutation-invariant data encoder, causal expression decoder,
alignment features, and the three loss terms.

The encoder embeds each (x-row, y) point, runs induced set-attention blocks
(inducing queries attend to the points, points attend back), and pools with k
trainable seed queries so the output shape never depends on the point count.
The decoder's first half is causal self-attention only — its midpoint states,
mean-pooled and projected, are the skeleton alignment feature — and the
second half adds cross-attention over the encoder's k slots before the symbol
and constant heads.  Training couples the two sides with a symmetric
contrastive loss over in-batch pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, dropout, embed, gelu, l2_normalize, layer_norm, log_softmax, softmax
from .errors import CheckpointError, EmptyBatch, LengthExceeded, ShapeMismatch
from .vocab import Vocabulary

NEG_MASK = -1e30  # additive pre-softmax mask; finite, underflows to exactly 0 after exp


@dataclass
class ModelConfig:
    d_h: int = 128
    heads: int = 4
    isab_blocks: int = 2
    m_inducing: int = 16
    k_slots: int = 8
    dec_layers: int = 6  # even; first half unimodal, second half cross-attends
    vocab_size: int = 25
    n_max: int = 32
    d_max: int = 2
    theta: float = 0.1
    w_ce: float = 1.0
    w_mse: float = 1.0
    w_con: float = 1.0
    dropout_p: float = 0.0  # desk-scale runs underfit; raise for larger corpora
    ff_mult: int = 2
    ce_include_pad: bool = False

    def __post_init__(self):
        if self.dec_layers % 2 != 0 or self.dec_layers < 2:
            raise ValueError("dec_layers must be even and >= 2")
        if self.d_h % self.heads != 0:
            raise ValueError("d_h must be divisible by heads")
        if self.theta <= 0:
            raise ValueError("theta must be > 0")
        if min(self.w_ce, self.w_mse, self.w_con) < 0:
            raise ValueError("loss weights must be >= 0")

    @classmethod
    def for_vocab(cls, vocab: Vocabulary, **kw) -> "ModelConfig":
        kw.setdefault("vocab_size", vocab.size)
        kw.setdefault("d_max", vocab.d_max)
        return cls(**kw)

    def to_json_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class DecoderOutput:
    """Per-position symbol logits and mantissa predictions, plus the
    unit-norm skeleton alignment vector taken at the decoder midpoint."""

    symbol_logits: Tensor | None  # (B, T, vocab)
    constant_preds: Tensor | None  # (B, T)
    skel_vec: Tensor  # (B, d_h)


def _he(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    return rng.normal(0.0, scale, size=shape)


class Model:
    """Parameter store plus forward passes.  Single-threaded, float64."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng([seed])
        d, ff = cfg.d_h, cfg.d_h * cfg.ff_mult

        def add(name: str, shape, scale: float = 0.02, zeros: bool = False):
            data = np.zeros(shape) if zeros else _he(rng, shape, scale)
            self.params[name] = ad.parameter(data)

        def add_mha(prefix: str):
            for w in ("Wq", "Wk", "Wv", "Wo"):
                add(f"{prefix}.{w}", (d, d))
            for b in ("bq", "bk", "bv", "bo"):
                add(f"{prefix}.{b}", (d,), zeros=True)

        def add_ff(prefix: str):
            add(f"{prefix}.W1", (d, ff))
            add(f"{prefix}.b1", (ff,), zeros=True)
            add(f"{prefix}.W2", (ff, d))
            add(f"{prefix}.b2", (d,), zeros=True)

        add("enc.in.W", (cfg.d_max + 1, d))
        add("enc.in.b", (d,), zeros=True)
        for i in range(cfg.isab_blocks):
            add(f"enc.isab{i}.ind", (cfg.m_inducing, d), scale=1.0)
            for mab in ("mab0", "mab1"):
                add_mha(f"enc.isab{i}.{mab}.attn")
                add_ff(f"enc.isab{i}.{mab}.ff")
        add("enc.pma.seed", (cfg.k_slots, d), scale=1.0)
        add_mha("enc.pma.mab.attn")
        add_ff("enc.pma.mab.ff")

        add("dec.embed.tok", (cfg.vocab_size, d))
        add("dec.embed.pos", (cfg.n_max, d))
        add("dec.embed.val", (d,))
        for i in range(cfg.dec_layers):
            add_mha(f"dec.layer{i}.self")
            if i >= cfg.dec_layers // 2:
                add_mha(f"dec.layer{i}.cross")
            add_ff(f"dec.layer{i}.ff")

        add("align.data.W", (d, d))
        add("align.data.b", (d,), zeros=True)
        add("align.skel.W", (d, d))
        add("align.skel.b", (d,), zeros=True)

        add("head.sym.W", (d, cfg.vocab_size))
        add("head.sym.b", (cfg.vocab_size,), zeros=True)
        add("head.const.W", (d, 1))
        add("head.const.b", (1,), zeros=True)

        self._causal_masks: dict[int, np.ndarray] = {}

    # --- shared blocks --------------------------------------------------------

    def _linear(self, x: Tensor, w_name: str, b_name: str) -> Tensor:
        """(B, T, d_in) @ (d_in, d_out) + bias, flattened to one GEMM."""
        p = self.params
        B, T, d_in = x.shape
        d_out = p[w_name].shape[1]
        out = x.reshape(B * T, d_in) @ p[w_name] + p[b_name]
        return out.reshape(B, T, d_out)

    def _mha(self, prefix: str, q: Tensor, kv: Tensor, mask: np.ndarray | None = None) -> Tensor:
        p, cfg = self.params, self.cfg
        heads, d = cfg.heads, cfg.d_h
        hd = d // heads
        B, Tq = q.shape[0], q.shape[1]
        Tk = kv.shape[1]
        Q = self._linear(q, f"{prefix}.Wq", f"{prefix}.bq")
        K = self._linear(kv, f"{prefix}.Wk", f"{prefix}.bk")
        V = self._linear(kv, f"{prefix}.Wv", f"{prefix}.bv")
        Qh = Q.reshape(B, Tq, heads, hd).transpose((0, 2, 1, 3))
        Kh = K.reshape(B, Tk, heads, hd).transpose((0, 2, 3, 1))
        Vh = V.reshape(B, Tk, heads, hd).transpose((0, 2, 1, 3))
        scores = (Qh @ Kh).scale(1.0 / np.sqrt(hd))
        if mask is not None:
            scores = scores + Tensor(mask)
        attn = softmax(scores, axis=-1)
        out = (attn @ Vh).transpose((0, 2, 1, 3)).reshape(B, Tq, d)
        return self._linear(out, f"{prefix}.Wo", f"{prefix}.bo")

    def _ff(self, prefix: str, h: Tensor) -> Tensor:
        up = gelu(self._linear(h, f"{prefix}.W1", f"{prefix}.b1"))
        return self._linear(up, f"{prefix}.W2", f"{prefix}.b2")

    def _mab(self, prefix: str, q: Tensor, kv: Tensor) -> Tensor:
        """Set-attention building block: attention then feed-forward, each with
        a residual connection and post-normalization."""
        h = layer_norm(q + self._mha(f"{prefix}.attn", q, kv))
        return layer_norm(h + self._ff(f"{prefix}.ff", h))

    def _broadcast_rows(self, name: str, batch: int) -> Tensor:
        return self.params[name] + Tensor(np.zeros((batch, 1, 1)))

    # --- encoder ---------------------------------------------------------------

    def encode_data(self, X: np.ndarray, y: np.ndarray, train: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
        """Point sets (B, n, d<=d_max) + targets (B, n) -> k slots (B, k, d_h)."""
        cfg = self.cfg
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if X.ndim != 3 or y.shape != X.shape[:2]:
            raise ShapeMismatch(f"bad encoder input shapes X{X.shape} y{y.shape}")
        B, n, d_in = X.shape
        if d_in > cfg.d_max:
            raise ShapeMismatch(f"{d_in} input variables exceed d_max={cfg.d_max}")
        if d_in < cfg.d_max:
            X = np.concatenate([X, np.zeros((B, n, cfg.d_max - d_in))], axis=2)
        rows = Tensor(np.concatenate([X, y[:, :, None]], axis=2))
        h = self._linear(rows, "enc.in.W", "enc.in.b")
        for i in range(cfg.isab_blocks):
            ind = self._broadcast_rows(f"enc.isab{i}.ind", B)
            induced = self._mab(f"enc.isab{i}.mab0", ind, h)
            h = self._mab(f"enc.isab{i}.mab1", h, induced)
        h = dropout(h, cfg.dropout_p, train, rng)
        seeds = self._broadcast_rows("enc.pma.seed", B)
        return self._mab("enc.pma.mab", seeds, h)

    def data_alignment_vec(self, slots: Tensor) -> Tensor:
        """Mean over the k slots, projected and L2-normalized: (B, d_h) units."""
        pooled = slots.mean(axis=1)
        return l2_normalize(pooled @ self.params["align.data.W"] + self.params["align.data.b"], axis=-1)

    # --- decoder ---------------------------------------------------------------

    def _causal_mask(self, T: int) -> np.ndarray:
        if T not in self._causal_masks:
            m = np.triu(np.full((T, T), NEG_MASK), k=1)
            self._causal_masks[T] = m[None, None, :, :]
        return self._causal_masks[T]

    def decode(self, symbols: np.ndarray, mantissas: np.ndarray, slots: Tensor | None,
               pad_id: int, train: bool = False, rng: np.random.Generator | None = None,
               detach_mid: bool = False, upto_mid: bool = False) -> DecoderOutput:
        """Causal decode of (B, T) token prefixes co-indexed with mantissas.

        The first dec_layers/2 layers see no data; their output (mean-pooled
        over non-pad positions, projected, normalized) is the skeleton
        alignment vector.  The remaining layers cross-attend to the k data
        slots.  detach_mid cuts the graph at the midpoint so symbol/constant
        losses cannot reach the unimodal half; upto_mid skips the second half
        entirely (slots may then be None).
        """
        cfg = self.cfg
        symbols = np.asarray(symbols)
        mantissas = np.asarray(mantissas, dtype=np.float64)
        if symbols.ndim != 2 or symbols.shape != mantissas.shape:
            raise ShapeMismatch(f"bad decoder input shapes {symbols.shape} {mantissas.shape}")
        B, T = symbols.shape
        if T > cfg.n_max:
            raise LengthExceeded(f"sequence length {T} exceeds n_max={cfg.n_max}")
        p = self.params
        half = cfg.dec_layers // 2

        # token + position + mantissa-value channels
        pos_ids = np.broadcast_to(np.arange(T), (B, T))
        h = embed(p["dec.embed.tok"], symbols) + embed(p["dec.embed.pos"], pos_ids) \
            + Tensor(mantissas[:, :, None]) * p["dec.embed.val"]
        mask = self._causal_mask(T)

        def run_first(h: Tensor) -> Tensor:
            for i in range(half):
                xn = layer_norm(h)
                h = h + self._mha(f"dec.layer{i}.self", xn, xn, mask)
                h = h + self._ff(f"dec.layer{i}.ff", layer_norm(h))
            return h

        if detach_mid:
            with ad.no_grad():
                mid = run_first(h)
            mid = mid.detach()
        else:
            mid = run_first(h)

        nonpad = (symbols != pad_id).astype(np.float64)
        counts = np.maximum(nonpad.sum(axis=1, keepdims=True), 1.0)
        pooled = (mid * Tensor(nonpad[:, :, None])).sum(axis=1) * Tensor(1.0 / counts)
        skel_vec = l2_normalize(pooled @ p["align.skel.W"] + p["align.skel.b"], axis=-1)

        if upto_mid:
            return DecoderOutput(None, None, skel_vec)
        if slots is None:
            raise ShapeMismatch("second decoder half needs data slots")

        h = mid
        for i in range(half, cfg.dec_layers):
            xn = layer_norm(h)
            h = h + self._mha(f"dec.layer{i}.self", xn, xn, mask)
            h = h + self._mha(f"dec.layer{i}.cross", layer_norm(h), slots)
            h = h + self._ff(f"dec.layer{i}.ff", layer_norm(h))
        h = layer_norm(h)
        logits = self._linear(h, "head.sym.W", "head.sym.b")
        consts = self._linear(h, "head.const.W", "head.const.b").reshape(B, T)
        return DecoderOutput(logits, consts, skel_vec)

    # --- persistence -----------------------------------------------------------

    def save(self, path: str, step: int = 0) -> None:
        ad.save_checkpoint(path, {k: t.data for k, t in self.params.items()},
                           step=step, extra={"config": self.cfg.to_json_dict()})

    @classmethod
    def load(cls, path: str, expect: ModelConfig | None = None) -> tuple["Model", int]:
        manifest, tensors = ad.load_checkpoint(path)
        cfg = ModelConfig.from_json_dict(manifest["extra"]["config"])
        if expect is not None and expect.to_json_dict() != cfg.to_json_dict():
            raise CheckpointError("checkpoint config does not match the expected config")
        model = cls(cfg, seed=0)
        if set(tensors) != set(model.params):
            raise CheckpointError("checkpoint tensor names do not match the model")
        for name, arr in tensors.items():
            if model.params[name].data.shape != arr.shape:
                raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, "
                                      f"expected {model.params[name].data.shape}")
            model.params[name].data = arr.copy()
        return model, int(manifest["step"])

    def frozen_after_phase1(self) -> set[str]:
        """Parameter names locked during the fusion phase of two-step training."""
        half = self.cfg.dec_layers // 2
        frozen = set()
        for name in self.params:
            if name.startswith(("enc.", "align.", "dec.embed.")):
                frozen.add(name)
            elif name.startswith("dec.layer"):
                layer = int(name.split(".")[1][5:])
                if layer < half:
                    frozen.add(name)
        return frozen


# --- losses ----------------------------------------------------------------


def ce_loss(symbol_logits: Tensor, targets: np.ndarray, pad_id: int,
            include_pad: bool = False) -> Tensor:
    """Mean token-level cross-entropy over non-pad targets by default.

    Positions past EOS carry no signal the sampler ever uses (generation
    stops at EOS), and averaging them in dilutes the gradient on real
    tokens; include_pad=True restores the all-positions mean."""
    targets = np.asarray(targets)
    if symbol_logits.shape[:2] != targets.shape:
        raise ShapeMismatch(f"logits {symbol_logits.shape} vs targets {targets.shape}")
    B, T = targets.shape
    lp = log_softmax(symbol_logits, axis=-1)
    picked = lp[np.arange(B)[:, None], np.arange(T)[None, :], targets]
    if include_pad:
        return -picked.mean()
    keep = (targets != pad_id).astype(np.float64)
    total = max(float(keep.sum()), 1.0)
    return -(picked * Tensor(keep)).sum() / total


def mse_constants(constant_preds: Tensor, target_mantissas: np.ndarray) -> Tensor:
    """Mean squared error over every position (targets are 0 off-placeholder)."""
    t = np.asarray(target_mantissas, dtype=np.float64)
    if constant_preds.shape != t.shape:
        raise ShapeMismatch(f"preds {constant_preds.shape} vs targets {t.shape}")
    diff = constant_preds - Tensor(t)
    return (diff * diff).mean()


def contrastive_loss(data_vecs: Tensor, skel_vecs: Tensor, theta: float) -> Tensor:
    """Symmetric in-batch InfoNCE at temperature theta.

    -(1/N) * [sum_i log softmax_j(x_i . y_j / theta)[i]
              + sum_i log softmax_j(y_i . x_j / theta)[i]]
    """
    if data_vecs.shape[0] == 0:
        raise EmptyBatch("contrastive loss needs at least one pair")
    if data_vecs.shape != skel_vecs.shape:
        raise ShapeMismatch(f"batch shapes differ: {data_vecs.shape} vs {skel_vecs.shape}")
    n = data_vecs.shape[0]
    sims = (data_vecs @ skel_vecs.transpose()).scale(1.0 / theta)
    diag = (np.arange(n), np.arange(n))
    row_term = log_softmax(sims, axis=1)[diag]
    col_term = log_softmax(sims.transpose(), axis=1)[diag]
    return -(row_term.sum() + col_term.sum()).scale(1.0 / n)


def total_loss(ce: Tensor, mse: Tensor, con: Tensor,
               weights: tuple[float, float, float]) -> Tensor:
    w_ce, w_mse, w_con = weights
    return ce.scale(w_ce) + mse.scale(w_mse) + con.scale(w_con)


def shift_targets(symbols: np.ndarray, mantissas: np.ndarray, pad_id: int
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Next-token training targets: sequences shifted left, PAD/0 filled."""
    tgt_s = np.concatenate([symbols[:, 1:], np.full((symbols.shape[0], 1), pad_id,
                                                    dtype=symbols.dtype)], axis=1)
    tgt_m = np.concatenate([mantissas[:, 1:], np.zeros((mantissas.shape[0], 1))], axis=1)
    return tgt_s, tgt_m
