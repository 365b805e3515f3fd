"""Benchmark suites: a built-in set of one- and two-variable targets in the
style of the standard symbolic-regression collections, a CSV loader for user
suites, and an in-distribution suite sampled from a corpus config.

Powers are written as explicit products (the operator set has no pow), and
every expression evaluates validly over its stated sampling box.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .corpus import GenConfig, PointSet, Rejected, sample_expression, sample_pair
from .errors import SuiteFormatError
from .exprs import Expr, evaluate, parse_infix


@dataclass(frozen=True)
class SuiteEntry:
    name: str
    expr: Expr
    d: int
    x_low: float
    x_high: float
    n_points: int

    def infix(self) -> str:
        return self.expr.infix()


_BUILTIN_SPECS: list[tuple[str, str, int, float, float, int]] = [
    # polynomial ladders
    ("poly-cubic", "((x1*x1)*x1) + (x1*x1) + x1", 1, -1.0, 1.0, 200),
    ("poly-quartic", "(((x1*x1)*x1)*x1) + ((x1*x1)*x1) + (x1*x1) + x1", 1, -1.0, 1.0, 200),
    ("poly-quintic", "((((x1*x1)*x1)*x1)*x1) + (((x1*x1)*x1)*x1) + ((x1*x1)*x1) + (x1*x1) + x1",
     1, -1.0, 1.0, 200),
    ("poly-sextic", "(((((x1*x1)*x1)*x1)*x1)*x1) + ((((x1*x1)*x1)*x1)*x1) + (((x1*x1)*x1)*x1) + ((x1*x1)*x1) + (x1*x1) + x1",
     1, -1.0, 1.0, 200),
    # trig compositions
    ("trig-prod", "sin(x1*x1) * cos(x1) - 1.0", 1, -1.0, 1.0, 200),
    ("trig-nested", "sin(x1) + sin(x1 + x1*x1)", 1, -1.0, 1.0, 200),
    ("trig-two-var", "sin(x1) + sin(x2*x2)", 2, -1.0, 1.0, 200),
    ("trig-cross", "2.0 * sin(x1) * cos(x2)", 2, -1.0, 1.0, 200),
    ("trig-scaled", "0.3 * x1 * sin(6.283185307179586 * x1)", 1, -1.0, 1.0, 200),
    # logs / roots on positive boxes
    ("log-sum", "log(x1 + 1.0) + log(x1*x1 + 1.0)", 1, 0.0, 2.0, 200),
    ("sqrt-plain", "sqrt(x1)", 1, 0.0, 4.0, 200),
    ("sqrt-shifted", "sqrt(x1 + 1.5)", 1, 0.0, 4.0, 200),
    ("log-times", "x1 * log(x1 + 2.0)", 1, 0.0, 4.0, 200),
    # constants to refine
    ("const-linear", "1.57 + 2.43 * x1", 1, -4.0, 4.0, 200),
    ("const-sine", "sin(1.5 * x1) * 0.8", 1, -4.0, 4.0, 200),
    ("const-root", "1.3 + 0.13 * sqrt(x1)", 1, 0.0, 4.0, 200),
    ("const-exp", "exp(0.5 * x1) * 0.25", 1, -4.0, 4.0, 200),
    # rational / mixed two-variable
    ("ratio-shift", "x1 / (x2 + 3.0)", 2, -2.0, 2.0, 200),
    ("mixed-prod", "x1 * x2 + sin((x1 - 1.0) * (x2 - 1.0))", 2, -2.0, 2.0, 200),
    ("plane", "0.5 * x1 + 1.25 * x2 - 0.75", 2, -4.0, 4.0, 200),
]


def builtin_suite() -> list[SuiteEntry]:
    return [SuiteEntry(name, parse_infix(infix), d, lo, hi, n)
            for name, infix, d, lo, hi, n in _BUILTIN_SPECS]


def load_suite_csv(path: str) -> list[SuiteEntry]:
    """Columns: name, infix, d, x_low, x_high, n_points."""
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"name", "infix", "d", "x_low", "x_high", "n_points"}
        if reader.fieldnames is None or not need.issubset(reader.fieldnames):
            raise SuiteFormatError(f"suite CSV must have columns {sorted(need)}")
        for i, row in enumerate(reader):
            try:
                expr = parse_infix(row["infix"])
                entry = SuiteEntry(row["name"], expr, int(row["d"]),
                                   float(row["x_low"]), float(row["x_high"]),
                                   int(row["n_points"]))
            except Exception as exc:
                raise SuiteFormatError(f"row {i}: {exc}") from exc
            if entry.d < 1 or entry.n_points < 4 or not entry.x_low < entry.x_high:
                raise SuiteFormatError(f"row {i}: bad dimensions or range")
            if expr.max_var_index() > entry.d:
                raise SuiteFormatError(f"row {i}: expression uses more than d variables")
            entries.append(entry)
    if not entries:
        raise SuiteFormatError("suite CSV has no rows")
    return entries


def sample_entry_points(entry: SuiteEntry, seed: int, max_tries: int = 100) -> PointSet:
    """Uniform points on the entry's box, rejection-filtered to valid rows."""
    rng = np.random.default_rng([seed, 31])
    rows_X: list[np.ndarray] = []
    rows_y: list[np.ndarray] = []
    have = 0
    for _ in range(max_tries):
        X = rng.uniform(entry.x_low, entry.x_high, (entry.n_points, entry.d))
        y, valid = evaluate(entry.expr, X)
        keep = valid & np.isfinite(y) & (np.abs(y) <= 1e6)
        if keep.any():
            rows_X.append(X[keep])
            rows_y.append(y[keep])
            have += int(keep.sum())
        if have >= entry.n_points:
            X_all = np.concatenate(rows_X)[:entry.n_points]
            y_all = np.concatenate(rows_y)[:entry.n_points]
            return PointSet(X=X_all, y=y_all)
    raise SuiteFormatError(f"{entry.name}: could not sample enough valid points")


def indistribution_suite(cfg: GenConfig, count: int, seed: int) -> list[tuple[SuiteEntry, PointSet]]:
    """Fresh (expression, points) draws from the generator distribution.

    Uses a seed stream disjoint from corpus generation for the same base seed,
    so evaluation targets are new samples, not training rows.
    """
    out = []
    attempt = 0
    while len(out) < count:
        rng = np.random.default_rng([seed, 57, attempt])
        attempt += 1
        if attempt > 200 * count + 2000:
            raise SuiteFormatError("in-distribution sampling budget exhausted")
        pair = sample_pair(cfg, sample_expression(cfg, rng), rng)
        if isinstance(pair, Rejected):
            continue
        ranges = cfg.x_ranges()
        entry = SuiteEntry(name=f"gen-{len(out):03d}", expr=pair.source_expr,
                           d=cfg.d_max, x_low=min(lo for lo, _ in ranges),
                           x_high=max(hi for _, hi in ranges), n_points=cfg.n_points)
        out.append((entry, pair.points))
    return out
