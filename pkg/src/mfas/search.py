"""Fusion-strategy search, strategy derivation and per-fold derived-model training."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .coattention import DualStreamCoAttention, head_loss
from .config import RunConfig
from .data import Fold, load_manifest, make_cv_plan
from .encoder import LEVELS, LayerTapBundle
from .features import SegmentTable, batches, build_segment_table, extract_taps
from .fusion import FusionStrategy, SearchSpace, choose_level, derive_strategy
from .metrics import MetricsReport, compute_metrics, utterance_vote
from .training import check_finite, load_encoder, seed_everything, write_json

log = logging.getLogger(__name__)


class ExtractorStateError(RuntimeError):
    pass


@dataclass
class FeatureBank:
    """Frozen-extractor outputs for every segment of a manifest."""

    taps: LayerTapBundle  # base (continuous) encoder, each (S, T, D)
    x_t: torch.Tensor  # last layer of the ASR encoder, (S, T, D)
    table: SegmentTable

    @property
    def n_frames(self) -> int:
        return self.x_t.shape[1]

    @property
    def dim(self) -> int:
        return self.x_t.shape[2]


def build_feature_bank(cfg: RunConfig, table: SegmentTable) -> FeatureBank:
    missing = [p for p in (cfg.base_checkpoint, cfg.asr_checkpoint) if not p]
    if missing:
        raise ExtractorStateError("both base_checkpoint and asr_checkpoint must be configured")
    try:
        base = load_encoder(cfg.base_checkpoint)
        asr = load_encoder(cfg.asr_checkpoint)
    except CheckpointError as exc:
        raise ExtractorStateError(str(exc)) from exc
    taps = extract_taps(base, table.wav)
    x_t = extract_taps(asr, table.wav)[-1]
    return FeatureBank(LayerTapBundle(taps), x_t, table)


class MFASModel(nn.Module):
    """Search space + dual-stream co-attention head over cached extractor features."""

    def __init__(self, cfg: RunConfig, n_frames: int, dim: int):
        super().__init__()
        self.space = SearchSpace(dim, cfg.attn_heads)
        self.head = DualStreamCoAttention(cfg.head_config(n_frames))

    def forward(self, bank: FeatureBank, rows, level: str, strategy: FusionStrategy | None = None):
        rows = torch.as_tensor(rows)
        x_e = bank.taps.level(level)[rows]
        x_o = self.space(level, x_e, bank.x_t[rows], strategy)
        logits, _ = self.head(bank.table.spec[rows], bank.taps.target[rows], x_o)
        return logits

    def model_parameters(self):
        return [p for n, p in self.named_parameters() if n != "space.alpha"]


class SearchTrainer:
    """Alternating first-order updates: weights on train batches, alpha on validation batches."""

    def __init__(self, cfg: RunConfig, bank: FeatureBank, model: MFASModel | None = None):
        self.cfg = cfg
        self.bank = bank
        self.model = model or MFASModel(cfg, bank.n_frames, bank.dim)
        self.model_opt = torch.optim.AdamW(self.model.model_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.alpha_opt = torch.optim.SGD([self.model.space.alpha], lr=cfg.alpha_lr, weight_decay=0.0)
        self.level_rng = np.random.default_rng(cfg.seed + 11)

    def _loss(self, rows, level, strategy=None):
        logits = self.model(self.bank, rows, level, strategy)
        loss = head_loss(logits, self.bank.table.label[torch.as_tensor(rows)])
        check_finite(loss, "search")
        return loss

    def _zero(self):
        self.model_opt.zero_grad(set_to_none=True)
        self.alpha_opt.zero_grad(set_to_none=True)

    def model_step(self, rows, strategy: FusionStrategy | None = None) -> float:
        self.model.train()
        if strategy is None:
            level, _ = choose_level(self.bank.taps, self.level_rng)
        else:
            level = strategy.selected_level
        self._zero()
        loss = self._loss(rows, level, strategy)
        loss.backward()
        self.model_opt.step()
        return loss.item()

    def alpha_step(self, rows) -> float:
        self.model.train()
        level, _ = choose_level(self.bank.taps, self.level_rng)
        self._zero()
        loss = self._loss(rows, level)
        loss.backward()
        self.alpha_opt.step()
        return loss.item()


@torch.no_grad()
def evaluate(model: MFASModel, bank: FeatureBank, rows, level: str, strategy=None, batch_size: int = 32) -> MetricsReport:
    model.eval()
    rows = np.asarray(rows)
    logits = torch.cat([model(bank, b, level, strategy) for b in batches(rows, batch_size)]).numpy()
    utt_of_seg = bank.table.record[rows]
    utts, pred = utterance_vote(logits, utt_of_seg)
    first = {u: r for r, u in zip(rows[::-1], utt_of_seg[::-1])}
    labels = [int(bank.table.label[first[u]]) for u in utts]
    return compute_metrics(pred, labels)


def _cycle(rows, batch_size, rng):
    while True:
        yield from batches(rows, batch_size, rng)


def search_fold(cfg: RunConfig, bank: FeatureBank, fold: Fold, export_dir=None) -> dict:
    seed_everything(cfg.seed)
    trainer = SearchTrainer(cfg, bank)
    train_rows, val_rows = bank.table.rows(fold.train), bank.table.rows(fold.val)
    rng = np.random.default_rng(cfg.seed + 13)
    val_iter = _cycle(val_rows, cfg.batch_size, np.random.default_rng(cfg.seed + 17))
    history = []
    for epoch in range(cfg.search_epochs):
        m_losses, a_losses = [], []
        for b in batches(train_rows, cfg.batch_size, rng):
            m_losses.append(trainer.model_step(b))
            a_losses.append(trainer.alpha_step(next(val_iter)))
        snap = trainer.model.space.alpha_table()
        snap.update(epoch=epoch, fold=fold.index, model_loss=float(np.mean(m_losses)), alpha_loss=float(np.mean(a_losses)))
        history.append(snap)
        if export_dir is not None:
            write_json(export_dir / f"fold{fold.index}" / f"epoch{epoch:03d}.json", snap)
        log.info("search fold %d epoch %d: model %.4f alpha %.4f", fold.index, epoch, snap["model_loss"], snap["alpha_loss"])

    alpha = trainer.model.space.alpha.detach().clone()
    probe_strategy = derive_strategy(alpha, {lvl: (0.0, 0.0) for lvl in LEVELS})
    scores = {}
    for lvl in LEVELS:
        strat = FusionStrategy(probe_strategy.ops, lvl)
        tuned = SearchTrainer(cfg, bank, copy.deepcopy(trainer.model))
        for _ in range(cfg.level_eval_epochs):
            for b in batches(train_rows, cfg.batch_size, rng):
                tuned.model_step(b, strat)
        rep = evaluate(tuned.model, bank, val_rows, lvl, strat)
        scores[lvl] = (rep.ua, rep.wa)
    strategy = derive_strategy(alpha, scores)
    return {
        "fold": fold.index,
        "held_out": fold.held_out,
        "alpha": alpha.tolist(),
        "alpha_history": history,
        "validation_scores": {k: list(v) for k, v in scores.items()},
        "strategy": strategy.to_dict(),
    }


def _prepare(cfg: RunConfig, bank: FeatureBank | None, records):
    if records is None:
        records = load_manifest(cfg.manifest)
    if bank is None:
        bank = build_feature_bank(cfg, build_segment_table(records))
    plan = make_cv_plan(records, cfg.cv_strategy, cfg.val_fraction, cfg.seed)
    folds = plan.folds if cfg.folds is None else [plan.folds[i] for i in cfg.folds]
    return records, bank, plan, folds


def run_search(cfg: RunConfig, bank: FeatureBank | None = None, records=None, export: bool = True) -> dict:
    records, bank, plan, folds = _prepare(cfg, bank, records)
    export_dir = cfg.path("alpha") if export else None
    results = [search_fold(cfg, bank, f, export_dir) for f in folds]
    out = {"cv_strategy": plan.strategy, "seed": cfg.seed, "folds": results}
    if export:
        write_json(cfg.path("search.json"), out)
    return out


def train_derived(cfg: RunConfig, bank: FeatureBank, rows, strategy: FusionStrategy, epochs: int) -> MFASModel:
    seed_everything(cfg.seed)
    trainer = SearchTrainer(cfg, bank)
    rng = np.random.default_rng(cfg.seed + 19)
    for _ in range(epochs):
        for b in batches(rows, cfg.batch_size, rng):
            trainer.model_step(b, strategy)
    return trainer.model


def aggregate(rows: list[dict]) -> dict:
    keys = ("ua", "wa")
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


def run_derive_train_eval(
    cfg: RunConfig, strategies: dict[int, FusionStrategy], bank: FeatureBank | None = None,
    records=None, save: bool = True,
) -> dict:
    """Retrain each fold's derived single-path model on its training portion, score its held-out fold."""
    records, bank, plan, folds = _prepare(cfg, bank, records)
    rows = []
    for fold in folds:
        if fold.index not in strategies:
            continue
        strat = strategies[fold.index]
        model = train_derived(cfg, bank, bank.table.rows(fold.train_full), strat, cfg.derive_epochs)
        rep = evaluate(model, bank, bank.table.rows(fold.test), strat.selected_level, strat)
        rows.append({"fold": fold.index, "held_out": fold.held_out, "strategy": strat.to_dict(), **rep.to_dict()})
        if save:
            save_checkpoint(
                cfg.path("derived", f"fold{fold.index}.pt"),
                {"model": model.state_dict()},
                {"strategy": strat.to_dict(), "run": cfg.to_dict()},
                meta={"fold": fold.index, "n_frames": bank.n_frames, "dim": bank.dim},
            )
    report = {"cv_strategy": plan.strategy, "folds": rows, "mean": aggregate(rows) if rows else {}}
    if save:
        write_json(cfg.path("derive_report.json"), report)
    return report


def run_eval(cfg: RunConfig, bank: FeatureBank | None = None, records=None) -> dict:
    """Score saved derived models on their held-out folds."""
    records, bank, plan, folds = _prepare(cfg, bank, records)
    rows = []
    for fold in folds:
        path = cfg.path("derived", f"fold{fold.index}.pt")
        if not path.exists():
            continue
        sections, configs, meta = load_checkpoint(path)
        strat = FusionStrategy.from_dict(configs["strategy"])
        model = MFASModel(cfg, meta["n_frames"], meta["dim"])
        model.load_state_dict(sections["model"])
        rep = evaluate(model, bank, bank.table.rows(fold.test), strat.selected_level, strat)
        rows.append({"fold": fold.index, "held_out": fold.held_out, "strategy": strat.to_dict(), **rep.to_dict()})
    if not rows:
        raise ExtractorStateError(f"no derived models found under {cfg.path('derived')}")
    report = {"cv_strategy": plan.strategy, "folds": rows, "mean": aggregate(rows)}
    write_json(cfg.path("eval_report.json"), report)
    return report


def strategies_from_search(search: dict) -> dict[int, FusionStrategy]:
    return {int(f["fold"]): FusionStrategy.from_dict(f["strategy"]) for f in search["folds"]}
