"""Synthetic (point set, expression) pair generation and the corpus file format.

Expressions are grown top-down from weighted primitives, paired with uniform
input samples, and filtered: a pair survives only if every row evaluates
finite, the target is bounded and non-constant, and the skeleton is new to
the corpus.  Records are streamed to a little-endian binary file behind a
JSON header so corpora are byte-reproducible from (config, seed) alone.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CorpusFormatError, LengthExceeded, Unsatisfiable
from .exprs import Expr, TokenizedExpr, constant, from_preorder, to_preorder, variable
from .kernels import evaluate as kernel_evaluate
from .kernels import flatten
from .vocab import OPERATORS, Vocabulary

MAGIC = b"MMSR1"

DEFAULT_OP_WEIGHTS = {
    "+": 1.0,
    "-": 1.0,
    "*": 1.0,
    "/": 0.5,
    "sin": 0.5,
    "cos": 0.5,
    "exp": 0.25,
    "log": 0.25,
    "sqrt": 0.25,
    # pseudo-primitive: stop growing and place a variable/constant leaf
    "leaf": 2.5,
}

Y_ABS_MAX = 1e6


@dataclass
class GenConfig:
    """Knobs for expression sampling and pair construction."""

    seed: int = 0
    d_max: int = 2
    max_depth: int = 5
    n_max: int = 32
    op_weights: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_OP_WEIGHTS))
    p_const_leaf: float = 0.35
    # ((mantissa low, mantissa high), (exponent low, exponent high)); sign is uniform
    const_band: tuple[tuple[float, float], tuple[int, int]] = ((0.1, 1.0), (-2, 2))
    n_points: int = 200
    # one (low, high) for every variable, or a per-variable sequence of them
    x_range: tuple = (-4.0, 4.0)
    max_resample: int = 10

    def __post_init__(self):
        if self.d_max < 1:
            raise ValueError("d_max must be >= 1")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.n_points < 2:
            raise ValueError("n_points must be >= 2")
        if not 0.0 <= self.p_const_leaf <= 1.0:
            raise ValueError("p_const_leaf must lie in [0, 1]")
        unknown = set(self.op_weights) - set(OPERATORS) - {"leaf"}
        if unknown:
            raise ValueError(f"op_weights has unknown primitives {sorted(unknown)}")
        if any(w < 0 for w in self.op_weights.values()):
            raise ValueError("op_weights must be nonnegative")
        if sum(self.op_weights.values()) <= 0:
            raise ValueError("op_weights must be normalizable")
        (m_lo, m_hi), (e_lo, e_hi) = self.const_band
        if not (0.0 < m_lo < m_hi <= 1.0):
            raise ValueError("mantissa band must satisfy 0 < low < high <= 1")
        if not (-5 <= e_lo <= e_hi <= 5):
            raise ValueError("exponent band must lie inside [-5, 5]")
        for lo, hi in self.x_ranges():
            if not lo < hi:
                raise ValueError("x_range low must be < high")

    def x_ranges(self) -> list[tuple[float, float]]:
        """Per-variable (low, high), broadcasting a single pair to all d_max."""
        r = self.x_range
        if len(r) == 2 and np.isscalar(r[0]):
            return [(float(r[0]), float(r[1]))] * self.d_max
        ranges = [(float(lo), float(hi)) for lo, hi in r]
        if len(ranges) != self.d_max:
            raise ValueError(f"x_range lists {len(ranges)} variables, d_max is {self.d_max}")
        return ranges

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "d_max": self.d_max,
            "max_depth": self.max_depth,
            "n_max": self.n_max,
            "op_weights": self.op_weights,
            "p_const_leaf": self.p_const_leaf,
            "const_band": [list(self.const_band[0]), list(self.const_band[1])],
            "n_points": self.n_points,
            "x_range": [list(p) for p in self.x_ranges()],
            "max_resample": self.max_resample,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        if "const_band" in d:
            band = d["const_band"]
            d["const_band"] = (tuple(band[0]), tuple(band[1]))
        if "x_range" in d:
            r = d["x_range"]
            d["x_range"] = tuple(tuple(p) for p in r) if r and not np.isscalar(r[0]) else tuple(r)
        return cls(**d)


@dataclass(frozen=True)
class PointSet:
    """Numeric side of one example: inputs X (n rows, d columns) and targets y."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ValueError(f"inconsistent shapes X{self.X.shape} y{self.y.shape}")
        if not (np.isfinite(self.X).all() and np.isfinite(self.y).all()):
            raise ValueError("point set entries must be finite")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class TrainingPair:
    """One supervised example: sampled points plus the serialized expression."""

    points: PointSet
    target: TokenizedExpr
    source_expr: Expr


@dataclass(frozen=True)
class Rejected:
    """A pair that failed a filter, with the reason for the stats report."""

    reason: str  # domain_violation | overflow | degenerate_target | too_long


@dataclass
class CorpusStats:
    requested: int = 0
    accepted: int = 0
    attempts: int = 0
    duplicates: int = 0
    rejections: dict[str, int] = field(default_factory=dict)
    op_histogram: dict[str, int] = field(default_factory=dict)
    depth_histogram: dict[int, int] = field(default_factory=dict)

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.attempts if self.attempts else 0.0

    def to_json_dict(self) -> dict:
        return {
            "requested": self.requested,
            "accepted": self.accepted,
            "attempts": self.attempts,
            "duplicates": self.duplicates,
            "acceptance_rate": self.acceptance_rate,
            "rejections": dict(sorted(self.rejections.items())),
            "op_histogram": dict(sorted(self.op_histogram.items())),
            "depth_histogram": {str(k): v for k, v in sorted(self.depth_histogram.items())},
        }


def sample_constant(cfg: GenConfig, rng: np.random.Generator) -> Expr:
    (m_lo, m_hi), (e_lo, e_hi) = cfg.const_band
    mantissa = rng.uniform(m_lo, m_hi)
    exponent = int(rng.integers(e_lo, e_hi + 1))
    sign = -1.0 if rng.random() < 0.5 else 1.0
    return constant(sign * mantissa * 10.0 ** exponent)


def sample_expression(cfg: GenConfig, rng: np.random.Generator) -> Expr:
    """Grow a random tree top-down; 'leaf' weight and the depth bound stop growth."""
    names = sorted(cfg.op_weights)
    weights = np.array([cfg.op_weights[k] for k in names], dtype=np.float64)
    probs = weights / weights.sum()

    def leaf() -> Expr:
        if rng.random() < cfg.p_const_leaf:
            return sample_constant(cfg, rng)
        return variable(int(rng.integers(1, cfg.d_max + 1)))

    def grow(depth_left: int) -> Expr:
        if depth_left == 0:
            return leaf()
        pick = names[int(rng.choice(len(names), p=probs))]
        if pick == "leaf":
            return leaf()
        if pick in ("sin", "cos", "exp", "log", "sqrt"):
            return Expr(pick, (grow(depth_left - 1),))
        return Expr(pick, (grow(depth_left - 1), grow(depth_left - 1)))

    return grow(cfg.max_depth)


def sample_pair(
    cfg: GenConfig, expr: Expr, rng: np.random.Generator, vocab: Vocabulary | None = None
) -> TrainingPair | Rejected:
    """Attach uniformly sampled points to an expression, or reject it.

    Fresh X is drawn up to max_resample+1 times; a draw is kept only if every
    row evaluates finite, max |y| <= 1e6, and y varies across rows.  The
    stored expression is the tokenizer round-trip of the sampled one, so
    re-evaluating stored constants reproduces stored y bit-exactly.
    """
    vocab = vocab or Vocabulary(cfg.d_max)
    try:
        target = to_preorder(expr, cfg.n_max, vocab)
    except LengthExceeded:
        return Rejected("too_long")
    stored = from_preorder(target, vocab)
    prog = flatten(stored)
    ranges = cfg.x_ranges()
    reason = "domain_violation"
    for _ in range(cfg.max_resample + 1):
        X = np.empty((cfg.n_points, cfg.d_max), dtype=np.float64)
        for j, (lo, hi) in enumerate(ranges):
            X[:, j] = rng.uniform(lo, hi, cfg.n_points)
        y, valid = kernel_evaluate(prog, prog.consts, X)
        if not valid.all():
            reason = "domain_violation"
            continue
        if np.abs(y).max() > Y_ABS_MAX:
            reason = "overflow"
            continue
        if np.ptp(y) == 0.0 or float(np.var(y)) < 1e-20:
            reason = "degenerate_target"
            continue
        return TrainingPair(PointSet(X, y), target, stored)
    return Rejected(reason)


def _count_ops(expr: Expr, hist: dict[str, int]) -> None:
    if expr.op in OPERATORS:
        hist[expr.op] = hist.get(expr.op, 0) + 1
    for c in expr.children:
        _count_ops(c, hist)


def generate_corpus(cfg: GenConfig, count: int, path: str, attempt_budget: int | None = None) -> CorpusStats:
    """Stream `count` accepted, skeleton-deduplicated pairs to `path`.

    Attempt i uses its own rng stream seeded (cfg.seed, i), so the corpus is
    a pure function of the config regardless of interleaving.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    if attempt_budget is None:
        attempt_budget = 2000 + 200 * count
    vocab = Vocabulary(cfg.d_max)
    stats = CorpusStats(requested=count)
    seen: set[bytes] = set()
    header = json.dumps(
        {"version": 1, "count": count, "config": cfg.to_json_dict()},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        attempt = 0
        while stats.accepted < count:
            if attempt >= attempt_budget:
                raise Unsatisfiable(
                    f"accepted {stats.accepted}/{count} pairs in {attempt} attempts"
                )
            rng = np.random.default_rng([cfg.seed, attempt])
            attempt += 1
            stats.attempts += 1
            expr = sample_expression(cfg, rng)
            out = sample_pair(cfg, expr, rng, vocab)
            if isinstance(out, Rejected):
                stats.rejections[out.reason] = stats.rejections.get(out.reason, 0) + 1
                continue
            key = out.target.skeleton_key()
            if key in seen:
                stats.duplicates += 1
                continue
            seen.add(key)
            _write_record(fh, out)
            stats.accepted += 1
            _count_ops(out.source_expr, stats.op_histogram)
            depth = out.source_expr.depth()
            stats.depth_histogram[depth] = stats.depth_histogram.get(depth, 0) + 1
    return stats


def _write_record(fh, pair: TrainingPair) -> None:
    tok, pts = pair.target, pair.points
    fh.write(tok.symbols.astype("<u2", copy=False).tobytes())
    fh.write(tok.mantissas.astype("<f8", copy=False).tobytes())
    fh.write(np.ascontiguousarray(pts.X, dtype="<f8").tobytes())
    fh.write(pts.y.astype("<f8", copy=False).tobytes())
    audit = pair.source_expr.infix().encode("utf-8")
    fh.write(struct.pack("<I", len(audit)))
    fh.write(audit)


@dataclass
class Corpus:
    """A fully loaded corpus file."""

    config: GenConfig
    pairs: list[TrainingPair]

    def __len__(self) -> int:
        return len(self.pairs)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CorpusFormatError(f"truncated file: expected {n} bytes for {what}, got {len(data)}")
    return data


def load_corpus(path: str) -> Corpus:
    """Read a corpus file back into memory, validating layout throughout."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CorpusFormatError(f"bad magic {magic!r}")
        (header_len,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        try:
            header = json.loads(_read_exact(fh, header_len, "header").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorpusFormatError(f"unreadable header: {exc}") from exc
        if header.get("version") != 1:
            raise CorpusFormatError(f"unsupported version {header.get('version')!r}")
        cfg = GenConfig.from_json_dict(header["config"])
        count = header["count"]
        vocab = Vocabulary(cfg.d_max)
        n_max, n_pts, d = cfg.n_max, cfg.n_points, cfg.d_max
        pairs: list[TrainingPair] = []
        for i in range(count):
            rec = f"record {i}"
            symbols = np.frombuffer(_read_exact(fh, 2 * n_max, rec), dtype="<u2").astype(np.uint16)
            mantissas = np.frombuffer(_read_exact(fh, 8 * n_max, rec), dtype="<f8").astype(np.float64)
            X = np.frombuffer(_read_exact(fh, 8 * n_pts * d, rec), dtype="<f8").reshape(n_pts, d).copy()
            y = np.frombuffer(_read_exact(fh, 8 * n_pts, rec), dtype="<f8").astype(np.float64)
            (audit_len,) = struct.unpack("<I", _read_exact(fh, 4, rec))
            _read_exact(fh, audit_len, rec)  # audit string: human-readable only
            eos = np.nonzero(symbols == vocab.eos_id)[0]
            if len(eos) == 0:
                raise CorpusFormatError(f"record {i} has no EOS")
            tok = TokenizedExpr(symbols, mantissas, int(eos[0]) + 1)
            expr = from_preorder(tok, vocab)
            pairs.append(TrainingPair(PointSet(X, y), tok, expr))
        if fh.read(1):
            raise CorpusFormatError("trailing bytes after final record")
    return Corpus(cfg, pairs)
