"""Masked pretraining, the detached emotion probe, and the toy CTC stage."""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import numpy as np
import torch

from .audio import SEGMENT_SAMPLES
from .checkpoint import load_checkpoint, save_checkpoint
from .coattention import ReconstructionProbe, head_loss
from .config import RunConfig
from .data import load_manifest, make_cv_plan
from .encoder import EncoderConfig, SpeechEncoder, conv_output_length, sample_mask
from .features import RngStream, SegmentTable, batches, build_segment_table
from .metrics import compute_metrics, utterance_mean, utterance_vote
from .pretrain import (
    CtcConfig,
    CtcHead,
    GumbelQuantizer,
    TeacherState,
    continuous_loss,
    continuous_targets,
    ctc_finetune_step,
    greedy_decode,
    quantize_targets,
    quantized_contrastive_loss,
)

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def check_finite(loss: torch.Tensor, what: str) -> None:
    if not torch.isfinite(loss).all():
        raise NumericalError(f"non-finite {what} loss: {loss.item()}")


class Pretrainer:
    """Owns the encoder, its objective-specific state and (optionally) the probe."""

    def __init__(self, cfg: RunConfig, n_frames: int = 149, with_probe: bool | None = None, total_steps: int = 1):
        self.cfg = cfg
        seed_everything(cfg.seed)
        enc_cfg = cfg.encoder_config()
        if cfg.deterministic:
            enc_cfg.dropout = 0.0
        self.encoder = SpeechEncoder(enc_cfg)
        params = list(self.encoder.parameters())
        self.quantizer = self.teacher = None
        if cfg.objective == "quantized":
            self.codebook_cfg = cfg.codebook_config()
            self.quantizer = GumbelQuantizer(enc_cfg.model_dim, self.codebook_cfg)
            params += list(self.quantizer.parameters())
        else:
            self.cont_cfg = cfg.continuous_config()
            if self.cont_cfg.n_layers > enc_cfg.n_layers:
                raise ValueError(f"L_c={self.cont_cfg.n_layers} exceeds encoder depth {enc_cfg.n_layers}")
            self.teacher = TeacherState(self.encoder, self.cont_cfg.ema_decay)
        self.optimizer = torch.optim.AdamW(params, lr=cfg.pretrain_lr, weight_decay=cfg.weight_decay)
        self.mask_rng = np.random.default_rng(cfg.seed + 1)
        self.torch_gen = torch.Generator().manual_seed(cfg.seed + 2)
        self.step_count = 0
        self.total_steps = max(total_steps, 1)

        self.probe = None
        if cfg.probe if with_probe is None else with_probe:
            # private RNG stream: the probe must not perturb encoder training
            self.probe_rng = RngStream(cfg.seed + 3)
            with self.probe_rng.active():
                self.probe = ReconstructionProbe(cfg.head_config(n_frames, with_vad=True))
            self.probe_opt = torch.optim.AdamW(self.probe.parameters(), lr=cfg.probe_lr, weight_decay=cfg.weight_decay)

    def modules(self):
        mods = {"encoder": self.encoder}
        if self.quantizer is not None:
            mods["quantizer"] = self.quantizer
        if self.teacher is not None:
            mods["teacher"] = self.teacher.model
        if self.probe is not None:
            mods["probe"] = self.probe
        return mods

    def reconstruction_loss(self, wav: torch.Tensor):
        enc = self.encoder
        x = enc.encode_frames(wav)
        mask = sample_mask(x.shape[1], enc.cfg.mask_prob, enc.cfg.mask_span, self.mask_rng, batch_size=x.shape[0])
        bundle = enc.transform_with_taps(enc.apply_mask(x, mask))
        x_hat = bundle.target
        if self.quantizer is not None:
            temp = self.codebook_cfg.temperature(self.step_count / self.total_steps)
            q, probs, codes = quantize_targets(x, mask, self.quantizer, temp, self.torch_gen)
            loss = quantized_contrastive_loss(
                x_hat, q, mask, self.codebook_cfg, self.torch_gen, codes=codes, probs=probs
            )
        else:
            y = continuous_targets(wav, self.teacher, self.cont_cfg)
            loss = continuous_loss(x_hat, y, mask)
        return loss, x_hat

    def step(self, wav, spec=None, label=None, vad=None) -> dict:
        self.encoder.train()
        if self.quantizer is not None:
            self.quantizer.train()
        loss, x_hat = self.reconstruction_loss(wav)
        check_finite(loss, "reconstruction")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        if self.teacher is not None:
            self.teacher.update(self.encoder)
        self.step_count += 1
        out = {"loss": loss.item()}
        if self.probe is not None and spec is not None:
            with self.probe_rng.active():
                self.probe.train()
                logits, vad_hat = self.probe(spec, x_hat)
                p_loss = head_loss(logits, label, vad_hat, vad)
                check_finite(p_loss, "probe")
                self.probe_opt.zero_grad(set_to_none=True)
                p_loss.backward()
                self.probe_opt.step()
            out["probe_loss"] = p_loss.item()
        return out

    @torch.no_grad()
    def evaluate_probe(self, table: SegmentTable, rows: np.ndarray, batch_size: int = 16):
        self.encoder.eval()
        self.probe.eval()
        logits, vads = [], []
        for b in batches(rows, batch_size):
            _, bundle = self.encoder(table.wav[b])
            lg, vd = self.probe(table.spec[b], bundle.target)
            logits.append(lg)
            vads.append(vd)
        self.encoder.train()
        return probe_metrics(table, rows, torch.cat(logits).numpy(), torch.cat(vads).numpy())


def probe_metrics(table: SegmentTable, rows, seg_logits, seg_vad):
    utt_of_seg = table.record[rows]
    utts, pred = utterance_vote(seg_logits, utt_of_seg)
    _, vad_hat = utterance_mean(seg_vad, utt_of_seg)
    first = {u: r for r, u in zip(rows[::-1], utt_of_seg[::-1])}
    labels = [int(table.label[first[u]]) for u in utts]
    vad_true = np.stack([table.vad[first[u]].numpy() for u in utts])
    return compute_metrics(pred, labels, vad_pred=vad_hat, vad_true=vad_true)


def ctc_finetune(encoder: SpeechEncoder, table: SegmentTable, rows, cfg: RunConfig, ctc_cfg: CtcConfig | None = None):
    """Fine-tune encoder + linear CTC head on the toy transcripts (ASR-version stand-in)."""
    ctc_cfg = ctc_cfg or CtcConfig()
    rows = np.asarray([r for r in rows if table.transcripts[r]])
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(cfg.seed + 4)
    head = CtcHead(encoder.cfg.model_dim, ctc_cfg)
    torch.random.set_rng_state(gen_state)
    opt = torch.optim.AdamW(list(encoder.parameters()) + list(head.parameters()), lr=cfg.ctc_lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 5)
    history = []
    for epoch in range(cfg.ctc_epochs):
        encoder.train()
        losses = []
        for b in batches(rows, cfg.batch_size, rng):
            _, bundle = encoder(table.wav[b])
            loss = ctc_finetune_step(bundle, head, [table.transcripts[i] for i in b])
            check_finite(loss, "ctc")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append({"epoch": epoch, "ctc_loss": float(np.mean(losses)) if losses else math.nan,
                        "token_accuracy": ctc_sequence_accuracy(encoder, head, table, rows)})
        log.info("ctc epoch %d: %s", epoch, history[-1])
    return head, history


@torch.no_grad()
def ctc_sequence_accuracy(encoder, head, table, rows, batch_size: int = 16) -> float:
    encoder.eval()
    hits = 0
    for b in batches(rows, batch_size):
        _, bundle = encoder(table.wav[b])
        for i, seq in zip(b, greedy_decode(head(bundle.target))):
            hits += seq == list(table.transcripts[i])
    encoder.train()
    return hits / max(len(rows), 1)


def run_pretrain(cfg: RunConfig, table: SegmentTable | None = None, records=None) -> dict:
    """Train one extractor; with ``cfg.probe`` also train and score the detached probe.

    Returns a dict with the checkpoint path, per-epoch history and (probe mode)
    the held-out probe metrics of the last epoch.
    """
    if records is None:
        records = load_manifest(cfg.manifest)
    if table is None:
        table = build_segment_table(records)
    all_rows = np.arange(len(table))
    if cfg.probe:
        plan = make_cv_plan(records, cfg.cv_strategy, cfg.val_fraction, cfg.seed)
        fold = plan.folds[(cfg.probe_folds or [0])[0]]
        train_rows, test_rows = table.rows(fold.train_full), table.rows(fold.test)
    else:
        train_rows, test_rows = all_rows, None

    steps_per_epoch = math.ceil(len(train_rows) / cfg.batch_size)
    trainer = Pretrainer(cfg, n_frames=_frames_for(cfg), total_steps=cfg.pretrain_epochs * steps_per_epoch)
    data_rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.pretrain_epochs):
        stats = []
        for b in batches(train_rows, cfg.batch_size, data_rng):
            stats.append(trainer.step(table.wav[b], table.spec[b], table.label[b], table.vad[b]))
        row = {"epoch": epoch, "loss": float(np.mean([s["loss"] for s in stats]))}
        if trainer.probe is not None:
            row["probe_loss"] = float(np.mean([s["probe_loss"] for s in stats]))
            row.update(trainer.evaluate_probe(table, test_rows).to_dict())
        history.append(row)
        log.info("pretrain epoch %d: %s", epoch, row)

    ctc_history, ctc_head = [], None
    if cfg.ctc_epochs > 0:
        ctc_head, ctc_history = ctc_finetune(trainer.encoder, table, train_rows, cfg)
    sections = {k: m.state_dict() for k, m in trainer.modules().items() if k != "probe"}
    if ctc_head is not None:
        sections["ctc_head"] = ctc_head.state_dict()

    out = {"history": history, "ctc_history": ctc_history, "trainer": trainer}
    if cfg.checkpoint:
        save_checkpoint(
            cfg.checkpoint,
            sections,
            {"encoder": trainer.encoder.cfg.to_dict(), "run": cfg.to_dict()},
            meta={"objective": cfg.objective, "epochs": cfg.pretrain_epochs},
        )
        out["checkpoint"] = cfg.checkpoint
    return out


def _frames_for(cfg: RunConfig) -> int:
    e = cfg.encoder_config()
    return conv_output_length(SEGMENT_SAMPLES, e.conv_kernels, e.conv_strides)


def load_encoder(path) -> SpeechEncoder:
    sections, configs, _ = load_checkpoint(path)
    enc = SpeechEncoder(EncoderConfig(**configs["encoder"]))
    enc.load_state_dict(sections["encoder"])
    enc.requires_grad_(False)
    enc.eval()
    return enc


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
