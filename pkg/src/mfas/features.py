"""Segment-level tensors for a manifest, plus frozen-extractor feature caches."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np
import torch

from .audio import cached_spectrogram, read_wav, segment_utterance
from .data import ManifestRecord
from .encoder import SpeechEncoder


@dataclass
class SegmentTable:
    wav: torch.Tensor  # (S, 48000)
    spec: torch.Tensor  # (S, 300, 200)
    label: torch.Tensor  # (S,)
    vad: torch.Tensor  # (S, 3)
    record: np.ndarray  # (S,) record index of each segment
    transcripts: list  # per segment; None when the utterance spans several segments

    def __len__(self) -> int:
        return self.wav.shape[0]

    def rows(self, record_ids) -> np.ndarray:
        return np.flatnonzero(np.isin(self.record, np.asarray(list(record_ids))))


def build_segment_table(records: list[ManifestRecord], spec_normalize: bool = False) -> SegmentTable:
    wavs, specs, labels, vads, rec_idx, transcripts = [], [], [], [], [], []
    for i, r in enumerate(records):
        segs = segment_utterance(read_wav(r.audio_path), parent_id=r.utterance_id)
        for seg in segs:
            wavs.append(seg.samples)
            specs.append(cached_spectrogram(r.audio_path, seg.index, seg, spec_normalize))
            labels.append(r.label_index)
            vads.append(r.vad)
            rec_idx.append(i)
            transcripts.append(r.transcript if len(segs) == 1 else None)
    return SegmentTable(
        wav=torch.from_numpy(np.stack(wavs)),
        spec=torch.from_numpy(np.stack(specs)),
        label=torch.tensor(labels, dtype=torch.long),
        vad=torch.tensor(vads, dtype=torch.float32),
        record=np.asarray(rec_idx),
        transcripts=transcripts,
    )


def batches(rows: np.ndarray, batch_size: int, rng: np.random.Generator | None = None):
    rows = np.asarray(rows)
    if rng is not None:
        rows = rows[rng.permutation(rows.size)]
    for start in range(0, rows.size, batch_size):
        yield rows[start : start + batch_size]


@torch.no_grad()
def extract_taps(encoder: SpeechEncoder, wav: torch.Tensor, batch_size: int = 16) -> list[torch.Tensor]:
    """All layer outputs on unmasked input, each (S, T, D)."""
    was_training = encoder.training
    encoder.eval()
    outs = []
    for start in range(0, wav.shape[0], batch_size):
        _, bundle = encoder(wav[start : start + batch_size])
        outs.append(bundle.taps)
    encoder.train(was_training)
    return [torch.cat([o[i] for o in outs]) for i in range(len(outs[0]))]


class RngStream:
    """A private torch RNG stream: draws inside ``with stream:`` never touch the global one."""

    def __init__(self, seed: int):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.state = torch.get_rng_state()

    @contextlib.contextmanager
    def active(self):
        with torch.random.fork_rng(devices=[]):
            torch.set_rng_state(self.state)
            yield
            self.state = torch.get_rng_state()
