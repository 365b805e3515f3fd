"""Training loop: one-step joint optimization or two-step align-then-fuse.

One-step mode optimizes w_ce*CE + w_mse*MSE + w_con*CON jointly every batch.
Two-step mode first trains the encoder, the unimodal decoder half, and both
alignment projections with the contrastive loss alone, then freezes them
(gradients exactly zero — the graph is cut at the midpoint) and trains the
cross-attending half plus the output heads with CE + MSE.  Single-threaded
and bit-reproducible for a fixed config.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, no_grad
from .corpus import TrainingPair
from .errors import EmptyBatch, NonFiniteLoss, NonFiniteValue
from .model import (Model, ce_loss, contrastive_loss, mse_constants, shift_targets,
                    total_loss)
from .vocab import Vocabulary


@dataclass
class TrainConfig:
    mode: str = "one-step"  # or "two-step"
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    warmup_steps: int = 200
    lr_schedule: str = "cosine"  # "cosine" decays to lr/10 after warmup; or "constant"
    adam_beta2: float = 0.98  # short-run default; 0.999 adapts too slowly here
    clip_norm: float = 1.0  # global gradient-norm ceiling; 0 disables
    subsample_points: int = 64  # points fed to the encoder per pair per step; 0 = all
    w_ce: float = 1.0
    w_mse: float = 1.0
    w_con: float = 1.0
    seed: int = 0
    eval_split: float = 0.1
    eval_limit: int = 512  # held-out pairs per between-epoch probe; 0 = all
    phase1_epochs: int = 2  # two-step only: contrastive-pretraining epochs
    checkpoint_every: int = 0  # epochs between snapshots; 0 = final only

    def __post_init__(self):
        if self.mode not in ("one-step", "two-step"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0.0 < self.adam_beta2 < 1.0:
            raise ValueError("adam_beta2 must lie in (0, 1)")
        if not 0.0 < self.eval_split < 1.0:
            raise ValueError("eval_split must lie in (0, 1)")
        if self.clip_norm < 0 or self.subsample_points < 0 or self.eval_limit < 0:
            raise ValueError("clip_norm, subsample_points, eval_limit must be >= 0")
        if self.batch_size < 2 and self.w_con > 0:
            raise ValueError("contrastive loss needs in-batch negatives: batch_size >= 2")
        if self.epochs < 1 or (self.mode == "two-step" and not 0 < self.phase1_epochs < self.epochs):
            raise ValueError("bad epoch configuration")

    def weights(self) -> tuple[float, float, float]:
        return (self.w_ce, self.w_mse, self.w_con)

    def to_json_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class EpochRow:
    epoch: int
    phase: int  # 0 one-step; 1/2 in two-step mode
    step: int
    train_total: float
    train_ce: float
    train_mse: float
    train_con: float
    heldout_total: float
    heldout_ce: float
    heldout_mse: float
    heldout_con: float
    heldout_token_acc: float
    wall_time: float  # seconds; kept out of the deterministic report files

    DETERMINISTIC_FIELDS = ("epoch", "phase", "step", "train_total", "train_ce",
                            "train_mse", "train_con", "heldout_total", "heldout_ce",
                            "heldout_mse", "heldout_con", "heldout_token_acc")


@dataclass
class TrainReport:
    config: TrainConfig
    rows: list[EpochRow] = field(default_factory=list)

    def to_csv(self) -> str:
        """Deterministic per-epoch table (wall time excluded; see timing sidecar)."""
        cols = EpochRow.DETERMINISTIC_FIELDS
        lines = [",".join(cols)]
        for r in self.rows:
            lines.append(",".join(_fmt(getattr(r, c)) for c in cols))
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict:
        return {
            "config": self.config.to_json_dict(),
            "epochs": [{c: getattr(r, c) for c in EpochRow.DETERMINISTIC_FIELDS}
                       for r in self.rows],
            "final": {c: getattr(self.rows[-1], c) for c in EpochRow.DETERMINISTIC_FIELDS}
            if self.rows else {},
        }

    def timing_json_dict(self) -> dict:
        return {"wall_time_per_epoch": [r.wall_time for r in self.rows],
                "wall_time_total": sum(r.wall_time for r in self.rows)}


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def split_pairs(pairs: list[TrainingPair], eval_split: float, seed: int
                ) -> tuple[list[TrainingPair], list[TrainingPair]]:
    """Deterministic shuffled split into (train, heldout)."""
    if not pairs:
        raise EmptyBatch("corpus has no pairs")
    order = np.random.default_rng([seed, 101]).permutation(len(pairs))
    n_eval = max(1, int(round(len(pairs) * eval_split)))
    ev = {int(i) for i in order[:n_eval]}
    train = [p for i, p in enumerate(pairs) if i not in ev]
    held = [p for i, p in enumerate(pairs) if i in ev]
    return train, held


def _group_by_points(pairs: list[TrainingPair]) -> dict[tuple[int, int], list[int]]:
    groups: dict[tuple[int, int], list[int]] = {}
    for i, p in enumerate(pairs):
        groups.setdefault((p.points.n, p.points.d), []).append(i)
    return groups


class _Batcher:
    """Rectangular batches of same-shaped point sets, reshuffled per epoch.

    Within each (n, d) group the shuffled rows are stably re-sorted by token
    length before chunking, so batches hold near-uniform sequence lengths and
    the trimmed token axis wastes little compute on padding.  The shuffle
    still randomizes which equal-length rows share a batch, and batch order
    is randomized across the whole epoch.
    """

    def __init__(self, pairs: list[TrainingPair], batch_size: int, seed: int):
        self.pairs = pairs
        self.batch_size = batch_size
        self.seed = seed
        self.groups = _group_by_points(pairs)

    def batches_per_epoch(self) -> int:
        b = self.batch_size
        return sum((len(g) + b - 1) // b for g in self.groups.values())

    def epoch_batches(self, epoch: int) -> list[list[int]]:
        rng = np.random.default_rng([self.seed, 11, epoch])
        batches: list[list[int]] = []
        for key in sorted(self.groups):
            idx = np.array(self.groups[key])
            idx = idx[rng.permutation(len(idx))]
            lens = np.array([self.pairs[int(i)].target.valid_len for i in idx])
            idx = idx[np.argsort(lens, kind="stable")]
            for lo in range(0, len(idx), self.batch_size):
                batches.append([int(i) for i in idx[lo:lo + self.batch_size]])
        order = rng.permutation(len(batches))
        return [batches[int(i)] for i in order]


def lr_at(cfg: TrainConfig, phase_step: int, phase_total: int) -> float:
    """Learning rate at a 1-based optimizer step within the current phase.

    Linear warmup to cfg.lr over warmup_steps; afterwards either held constant
    or cosine-decayed to 0.1 * lr by the phase's final step.
    """
    lr = cfg.lr * min(1.0, phase_step / max(cfg.warmup_steps, 1))
    if cfg.lr_schedule == "cosine" and phase_step > cfg.warmup_steps:
        span = max(phase_total - cfg.warmup_steps, 1)
        s = min(1.0, (phase_step - cfg.warmup_steps) / span)
        lr = cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * s)))
    return lr


def assemble_batch(pairs: list[TrainingPair], idx: list[int], pad_id: int,
                   trim: bool = True, n_sub: int = 0,
                   rng: np.random.Generator | None = None) -> dict:
    """Stack one batch; optionally trim the token axis to the batch's longest
    sequence plus one (keeping every sequence's EOS-to-PAD transition).

    n_sub > 0 feeds the encoder a fresh random size-n_sub subset of each
    pair's points (the batch stays rectangular; sets with <= n_sub points
    pass through whole).  The slot summary is permutation-invariant, so this
    only thins the evidence per step — it never changes what a set means.
    """
    sel = [pairs[i] for i in idx]
    X = np.stack([p.points.X for p in sel])
    y = np.stack([p.points.y for p in sel])
    if n_sub and n_sub < X.shape[1]:
        if rng is None:
            raise ValueError("point subsampling needs an explicit rng")
        rows = np.stack([rng.permutation(X.shape[1])[:n_sub] for _ in sel])
        take = np.arange(len(sel))[:, None]
        X, y = X[take, rows], y[take, rows]
    syms = np.stack([p.target.symbols for p in sel]).astype(np.int64)
    mants = np.stack([p.target.mantissas for p in sel])
    tgt_s, tgt_m = shift_targets(syms, mants, pad_id)
    if trim:
        t = min(syms.shape[1], max(p.target.valid_len for p in sel) + 1)
        syms, mants = syms[:, :t], mants[:, :t]
        tgt_s, tgt_m = tgt_s[:, :t], tgt_m[:, :t]
    return {"X": X, "y": y, "symbols": syms, "mantissas": mants,
            "tgt_symbols": tgt_s, "tgt_mantissas": tgt_m}


def batch_losses(model: Model, batch: dict, vocab: Vocabulary,
                 weights: tuple[float, float, float], train: bool,
                 rng: np.random.Generator | None, phase: int = 0):
    """Forward pass returning (total, ce, mse, con) loss tensors.

    phase 0: joint.  phase 1: contrastive only (decoder stops at midpoint).
    phase 2: CE+MSE only, graph cut so the frozen half receives no gradient.
    """
    cfg = model.cfg
    if phase == 1:
        slots = model.encode_data(batch["X"], batch["y"], train=train, rng=rng)
        out = model.decode(batch["symbols"], batch["mantissas"], None, vocab.pad_id,
                           train=train, rng=rng, upto_mid=True)
        con = contrastive_loss(model.data_alignment_vec(slots), out.skel_vec, cfg.theta)
        zero = con.detach().scale(0.0)
        return con.scale(weights[2]), zero, zero, con
    if phase == 2:
        with no_grad():
            slots = model.encode_data(batch["X"], batch["y"], train=train, rng=rng)
        out = model.decode(batch["symbols"], batch["mantissas"], slots, vocab.pad_id,
                           train=train, rng=rng, detach_mid=True)
        ce = ce_loss(out.symbol_logits, batch["tgt_symbols"], vocab.pad_id, cfg.ce_include_pad)
        mse = mse_constants(out.constant_preds, batch["tgt_mantissas"])
        with no_grad():
            con = contrastive_loss(model.data_alignment_vec(slots), out.skel_vec.detach(),
                                   cfg.theta)
        return ce.scale(weights[0]) + mse.scale(weights[1]), ce, mse, con
    slots = model.encode_data(batch["X"], batch["y"], train=train, rng=rng)
    out = model.decode(batch["symbols"], batch["mantissas"], slots, vocab.pad_id,
                       train=train, rng=rng)
    ce = ce_loss(out.symbol_logits, batch["tgt_symbols"], vocab.pad_id, cfg.ce_include_pad)
    mse = mse_constants(out.constant_preds, batch["tgt_mantissas"])
    con = contrastive_loss(model.data_alignment_vec(slots), out.skel_vec, cfg.theta)
    return total_loss(ce, mse, con, weights), ce, mse, con


def evaluate_epoch(model: Model, pairs: list[TrainingPair], vocab: Vocabulary,
                   weights: tuple[float, float, float], batch_size: int = 32
                   ) -> dict[str, float]:
    """Held-out losses plus teacher-forced next-token accuracy (non-pad targets).

    Deterministic, no parameter mutation, dropout off.  Loss aggregates are
    means over batches weighted by batch size; the contrastive term is
    computed within each batch (it needs in-batch negatives).
    """
    if not pairs:
        raise EmptyBatch("no held-out pairs")
    groups = _group_by_points(pairs)
    sums = {"total": 0.0, "ce": 0.0, "mse": 0.0, "con": 0.0}
    n_seen = 0
    correct = 0
    n_tokens = 0
    cfg = model.cfg
    with no_grad():
        for key in sorted(groups):
            idx = groups[key]
            for lo in range(0, len(idx), batch_size):
                sel = idx[lo:lo + batch_size]
                batch = assemble_batch(pairs, sel, vocab.pad_id, trim=False)
                slots = model.encode_data(batch["X"], batch["y"])
                out = model.decode(batch["symbols"], batch["mantissas"], slots, vocab.pad_id)
                ce = ce_loss(out.symbol_logits, batch["tgt_symbols"], vocab.pad_id,
                             cfg.ce_include_pad)
                mse = mse_constants(out.constant_preds, batch["tgt_mantissas"])
                con = contrastive_loss(model.data_alignment_vec(slots), out.skel_vec,
                                       cfg.theta)
                tot = total_loss(ce, mse, con, weights)
                b = len(sel)
                sums["total"] += float(tot.data) * b
                sums["ce"] += float(ce.data) * b
                sums["mse"] += float(mse.data) * b
                sums["con"] += float(con.data) * b
                n_seen += b
                pred = np.argmax(out.symbol_logits.data, axis=-1)
                keep = batch["tgt_symbols"] != vocab.pad_id
                correct += int((pred[keep] == batch["tgt_symbols"][keep]).sum())
                n_tokens += int(keep.sum())
    out = {k: v / n_seen for k, v in sums.items()}
    out["token_acc"] = correct / max(n_tokens, 1)
    return out


def train(model: Model, pairs: list[TrainingPair], cfg: TrainConfig,
          vocab: Vocabulary | None = None, ckpt_path: str | None = None,
          log=None) -> TrainReport:
    """Run the configured regime over the corpus; mutates the model in place.

    Returns the per-epoch report; writes intermediate checkpoints when
    checkpoint_every > 0 and a path is given.
    """
    vocab = vocab or Vocabulary(model.cfg.d_max)
    train_pairs, held_pairs = split_pairs(pairs, cfg.eval_split, cfg.seed)
    batcher = _Batcher(train_pairs, cfg.batch_size, cfg.seed)
    drop_rng = np.random.default_rng([cfg.seed, 23])
    sub_rng = np.random.default_rng([cfg.seed, 31])
    probe_pairs = held_pairs[:cfg.eval_limit] if cfg.eval_limit else held_pairs
    report = TrainReport(config=cfg)
    weights = cfg.weights()

    phases: list[tuple[int, int]]  # (phase tag, epochs)
    if cfg.mode == "one-step":
        phases = [(0, cfg.epochs)]
    else:
        phases = [(1, cfg.phase1_epochs), (2, cfg.epochs - cfg.phase1_epochs)]

    step = 0
    epoch_no = 0
    for phase, n_epochs in phases:
        opt = Adam(model.params, lr=cfg.lr, beta2=cfg.adam_beta2)
        skip = model.frozen_after_phase1() if phase == 2 else set()
        phase_step = 0
        phase_total = n_epochs * batcher.batches_per_epoch()
        for _ in range(n_epochs):
            t0 = time.time()
            agg = np.zeros(4)
            n_seen = 0
            for bi, idx in enumerate(batcher.epoch_batches(epoch_no)):
                batch = assemble_batch(train_pairs, idx, vocab.pad_id,
                                       n_sub=cfg.subsample_points, rng=sub_rng)
                try:
                    tot, ce, mse, con = batch_losses(model, batch, vocab, weights,
                                                     train=True, rng=drop_rng, phase=phase)
                    if not np.isfinite(tot.data):
                        raise NonFiniteValue("loss is non-finite")
                    opt.zero_grad()
                    tot.backward()
                except NonFiniteValue as exc:
                    raise NonFiniteLoss(f"epoch {epoch_no} batch {bi}: {exc}",
                                        batch_index=bi) from exc
                if cfg.clip_norm:
                    clip_grad_norm(model.params, cfg.clip_norm, skip=skip)
                phase_step += 1
                opt.step(lr=lr_at(cfg, phase_step, phase_total), skip=skip)
                step += 1
                b = len(idx)
                agg += b * np.array([float(tot.data), float(ce.data),
                                     float(mse.data), float(con.data)])
                n_seen += b
            ev = last_ev = evaluate_epoch(model, probe_pairs, vocab, weights, cfg.batch_size)
            row = EpochRow(
                epoch=epoch_no, phase=phase, step=step,
                train_total=float(agg[0] / n_seen), train_ce=float(agg[1] / n_seen),
                train_mse=float(agg[2] / n_seen), train_con=float(agg[3] / n_seen),
                heldout_total=ev["total"], heldout_ce=ev["ce"],
                heldout_mse=ev["mse"], heldout_con=ev["con"],
                heldout_token_acc=ev["token_acc"], wall_time=time.time() - t0,
            )
            report.rows.append(row)
            if log:
                log(f"epoch {epoch_no} phase {phase}: "
                    f"train {row.train_total:.4f} heldout {row.heldout_total:.4f} "
                    f"acc {row.heldout_token_acc:.3f} ({row.wall_time:.0f}s)")
            epoch_no += 1
            if ckpt_path and cfg.checkpoint_every and epoch_no % cfg.checkpoint_every == 0:
                model.save(ckpt_path, step=step)
    if ckpt_path:
        model.save(ckpt_path, step=step)
    return report


def write_report(report: TrainReport, csv_path: str, json_path: str,
                 timing_path: str | None = None) -> None:
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    if timing_path:
        with open(timing_path, "w", encoding="utf-8") as fh:
            json.dump(report.timing_json_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")
