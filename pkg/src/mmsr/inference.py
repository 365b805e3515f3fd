"""Decoding and constant refinement.

Beam search runs over an injectable step function so the ranking logic can be
tested against exhaustive enumeration with hand-built probability tables; the
model is adapted through ModelStepper (full re-forward per step — no KV cache,
which at this scale costs little and keeps the decoder single-sourced).
Constant refinement is a dense BFGS with Armijo backtracking on the
expression-evaluation kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .autodiff import Tensor, no_grad
from .corpus import PointSet
from .errors import DegenerateTarget, NoValidSequence
from .exprs import Expr, TokenizedExpr, from_preorder
from .kernels.programs import flatten
from .model import Model
from .vocab import Vocabulary


@dataclass
class BeamConfig:
    beam_width: int = 10
    n_candidates: int = 10
    max_len: int = 32
    alpha: float = 0.7  # length-normalization exponent

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if not 1 <= self.n_candidates <= self.beam_width:
            raise ValueError("need 1 <= n_candidates <= beam_width")
        if self.max_len < 2:
            raise ValueError("max_len must allow at least one token plus EOS")


@dataclass
class BeamHyp:
    """A finished hypothesis: tokens start at BOS and end at EOS."""
    tokens: tuple[int, ...]
    mantissas: tuple[float, ...]
    log_prob: float

    @property
    def gen_len(self) -> int:
        return len(self.tokens) - 1

    def score(self, alpha: float) -> float:
        return self.log_prob / (self.gen_len ** alpha)


def beam_search(step_fn, cfg: BeamConfig, bos_id: int, eos_id: int,
                vocab_size: int, banned_ids: frozenset[int] = frozenset(),
                const_ids: frozenset[int] = frozenset(),
                validate=None) -> list[BeamHyp]:
    """Width-B beam search with length-normalized scores.

    step_fn(tokens (n, t) int64, mantissas (n, t) f64) must return
    (log_probs (n, V), next_mantissa (n,)) for the last position.  A beam
    finishes at EOS or is discarded at max_len without one.  Mantissas are
    recorded only for tokens in const_ids.  Ranking: log_prob / gen_len**alpha,
    ties broken by token sequence ascending.  With beam_width=1 every step
    keeps the single argmax extension, i.e. greedy decoding.

    `validate` (if given) filters finished hypotheses; raises NoValidSequence
    when nothing terminates or survives the filter.
    """
    live: list[tuple[float, tuple[int, ...], tuple[float, ...]]] = [
        (0.0, (bos_id,), (0.0,))]
    finished: list[BeamHyp] = []
    allowed = [v for v in range(vocab_size) if v not in banned_ids]
    while live and len(live[0][1]) < cfg.max_len + 1:
        toks = np.array([t for _, t, _ in live], dtype=np.int64)
        mants = np.array([m for _, _, m in live], dtype=np.float64)
        log_probs, next_mant = step_fn(toks, mants)
        cands = []
        for b, (lp, t, m) in enumerate(live):
            for v in allowed:
                mant = float(next_mant[b]) if v in const_ids else 0.0
                cands.append((lp + float(log_probs[b, v]), t + (v,), m + (mant,)))
        cands.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for lp, t, m in cands[:cfg.beam_width]:
            if t[-1] == eos_id:
                finished.append(BeamHyp(t, m, lp))
            else:
                live.append((lp, t, m))
    if validate is not None:
        finished = [h for h in finished if validate(h)]
    if not finished:
        raise NoValidSequence("no beam terminated with a valid sequence")
    finished.sort(key=lambda h: (-h.score(cfg.alpha), h.tokens))
    return finished[:cfg.n_candidates]


class ModelStepper:
    """Adapts a trained model to the beam-search step interface for one
    point set (its encoder slots are computed once and broadcast)."""

    def __init__(self, model: Model, vocab: Vocabulary, points: PointSet):
        self.model = model
        self.vocab = vocab
        with no_grad():
            slots = model.encode_data(points.X[None, :, :], points.y[None, :])
        self.slots = slots.data

    def __call__(self, tokens: np.ndarray, mantissas: np.ndarray
                 ) -> tuple[np.ndarray, np.ndarray]:
        n = tokens.shape[0]
        slots = Tensor(np.broadcast_to(self.slots, (n,) + self.slots.shape[1:]))
        with no_grad():
            out = self.model.decode(tokens, mantissas, slots, self.vocab.pad_id)
        z = out.symbol_logits.data[:, -1, :]
        z = z - z.max(axis=1, keepdims=True)
        log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return log_probs, out.constant_preds.data[:, -1]


def hyp_to_tokenized(hyp: BeamHyp, n_max: int) -> TokenizedExpr:
    symbols = np.zeros(n_max, dtype=np.uint16)  # 0 is the PAD id
    mants = np.zeros(n_max, dtype=np.float64)
    symbols[:len(hyp.tokens)] = hyp.tokens
    mants[:len(hyp.tokens)] = hyp.mantissas
    return TokenizedExpr(symbols=symbols, mantissas=mants, valid_len=len(hyp.tokens))


@dataclass
class RefineResult:
    mse_init: float
    mse: float
    grad_norm: float
    iterations: int
    converged: bool
    domain_drift: bool


def refine_bfgs(expr: Expr, X: np.ndarray, y: np.ndarray, max_iter: int = 200,
                gtol: float = 1e-8, c1: float = 1e-4, min_step: float = 1e-12
                ) -> tuple[Expr, RefineResult]:
    """Minimize MSE over the expression's constants with BFGS.

    Line search is Armijo backtracking by halving; steps that evaluate
    invalidly (domain violation / overflow) are rejected, and if no valid
    step exists the search stops with domain_drift set.  Returns the best
    iterate seen — never worse than the starting constants.  Expressions
    without constants are returned unchanged.
    """
    theta = np.array(expr.constants(), dtype=np.float64)
    if theta.size == 0:
        return expr, RefineResult(0.0, 0.0, 0.0, 0, True, False)
    prog = flatten(expr)
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)

    mse, grad, ok = kernels.mse_and_grad(prog, theta, X, y)
    if not ok:
        # Rough constants do not even evaluate: nothing to refine from.
        return expr, RefineResult(float("inf"), float("inf"), float("inf"), 0,
                                  False, True)
    mse0 = float(mse)
    best_theta, best_mse = theta.copy(), mse
    n = theta.size
    H = np.eye(n)
    it = 0
    converged = float(np.linalg.norm(grad)) < gtol
    drift = False
    while it < max_iter and not converged:
        it += 1
        p = -H @ grad
        if p @ grad >= 0.0:  # not a descent direction; reset curvature
            H = np.eye(n)
            p = -grad
        step = 1.0
        accepted = False
        saw_invalid = False
        while step >= min_step:
            theta_new = theta + step * p
            mse_new, grad_new, ok = kernels.mse_and_grad(prog, theta_new, X, y)
            if not ok:
                saw_invalid = True
                step *= 0.5
                continue
            if mse_new <= mse + c1 * step * float(p @ grad):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            drift = saw_invalid
            break
        s = theta_new - theta
        yv = grad_new - grad
        sy = float(s @ yv)
        if sy > 1e-12:
            rho = 1.0 / sy
            I = np.eye(n)
            H = (I - rho * np.outer(s, yv)) @ H @ (I - rho * np.outer(yv, s)) \
                + rho * np.outer(s, s)
        theta, mse, grad = theta_new, mse_new, grad_new
        if mse < best_mse:
            best_theta, best_mse = theta.copy(), mse
        converged = float(np.linalg.norm(grad)) < gtol
    _, g_best, ok_best = kernels.mse_and_grad(prog, best_theta, X, y)
    gnorm = float(np.linalg.norm(g_best)) if ok_best else float("inf")
    return expr.with_constants([float(c) for c in best_theta]), RefineResult(
        mse_init=mse0, mse=float(best_mse), grad_norm=gnorm, iterations=it,
        converged=bool(converged), domain_drift=bool(drift))


def r2_score(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Coefficient of determination; raises DegenerateTarget on constant y."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1 or y_true.size < 2:
        raise ValueError("need two 1-d arrays of equal length >= 2")
    ss_tot = float(np.sum((y_true - y_true.mean()) ** 2))
    if ss_tot == 0.0:
        raise DegenerateTarget("target variance is zero; R^2 undefined")
    ss_res = float(np.sum((y_true - y_pred) ** 2))
    return 1.0 - ss_res / ss_tot


@dataclass
class Candidate:
    tokens: TokenizedExpr
    rough_expr: Expr
    refined_expr: Expr
    log_prob: float
    norm_score: float
    r2_fit: float
    r2_select: float
    refine: RefineResult | None = None

    def to_json_dict(self, vocab: Vocabulary) -> dict:
        return {
            "infix": self.refined_expr.infix(),
            "tokens": self.tokens.names(vocab),
            "constants": list(self.refined_expr.constants()),
            "log_prob": self.log_prob,
            "norm_score": self.norm_score,
            "r2_fit": self.r2_fit,
            "r2_select": self.r2_select,
        }


MAX_INVALID_FRAC = 0.01  # candidates failing to evaluate on >= 1% of fit rows drop


def _fit_select_split(n: int) -> tuple[slice, slice]:
    cut = max(2, int(round(n * 0.8)))
    cut = min(cut, n - 2)
    return slice(0, cut), slice(cut, n)


def predict(model: Model, vocab: Vocabulary, points: PointSet,
            cfg: BeamConfig | None = None) -> tuple[Candidate, list[Candidate]]:
    """Full pipeline for one point set: encode, beam-decode, parse, refine
    constants on the first 80% of rows, select by R^2 on the held-back 20%.

    Returns (best, all_surviving_candidates).  Ties on the selection R^2 are
    broken by shorter token length, then higher raw log-probability.
    """
    cfg = cfg or BeamConfig(max_len=model.cfg.n_max)
    if cfg.max_len > model.cfg.n_max:
        raise ValueError("max_len exceeds the model's trained sequence length")
    if points.n < 4:
        raise ValueError("need at least 4 rows to split into fit/select")
    stepper = ModelStepper(model, vocab, points)
    banned = frozenset({vocab.pad_id, vocab.bos_id})
    const_ids = frozenset(i for i in range(vocab.size) if vocab.is_placeholder(i))

    def valid(hyp: BeamHyp) -> bool:
        try:
            from_preorder(hyp_to_tokenized(hyp, model.cfg.n_max), vocab)
            return True
        except Exception:
            return False

    hyps = beam_search(stepper, cfg, vocab.bos_id, vocab.eos_id,
                       vocab.size, banned, const_ids, validate=valid)

    fit_sl, sel_sl = _fit_select_split(points.n)
    X_fit, y_fit = points.X[fit_sl], points.y[fit_sl]
    X_sel, y_sel = points.X[sel_sl], points.y[sel_sl]

    cands: list[Candidate] = []
    for hyp in hyps:
        tok = hyp_to_tokenized(hyp, model.cfg.n_max)
        rough = from_preorder(tok, vocab)
        prog = flatten(rough)
        consts = np.array(rough.constants(), dtype=np.float64)
        _, valid_rows = kernels.evaluate(prog, consts, X_fit)
        if valid_rows.mean() < 1.0 - MAX_INVALID_FRAC:
            continue
        Xf, yf = X_fit[valid_rows], y_fit[valid_rows]
        refined, res = refine_bfgs(rough, Xf, yf)
        rprog = flatten(refined)
        rconsts = np.array(refined.constants(), dtype=np.float64)
        yhat_f, vf = kernels.evaluate(rprog, rconsts, Xf)
        r2_fit = r2_score(yf, yhat_f) if vf.all() else float("-inf")
        yhat_s, vs = kernels.evaluate(rprog, rconsts, X_sel)
        r2_sel = r2_score(y_sel, yhat_s) if vs.all() else float("-inf")
        cands.append(Candidate(tokens=tok, rough_expr=rough, refined_expr=refined,
                               log_prob=hyp.log_prob,
                               norm_score=hyp.score(cfg.alpha),
                               r2_fit=r2_fit, r2_select=r2_sel, refine=res))
    if not cands:
        raise NoValidSequence("every candidate was dropped during fitting")
    cands.sort(key=lambda c: (-c.r2_select, c.tokens.valid_len, -c.log_prob))
    return cands[0], cands
