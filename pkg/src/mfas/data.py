"""Manifests, the synthetic toy corpus, and cross-validation plans."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, write_wav
from .coattention import CLASSES

log = logging.getLogger(__name__)

LABEL_ALIASES = {"excited": "happy", "ang": "angry", "sad": "sad", "hap": "happy", "exc": "happy", "neu": "neutral"}
N_TOKENS = 12  # toy vocabulary, ids 1..12 (0 is the CTC blank)
CV_STRATEGIES = {"leave_one_session": ("session_id", 5), "leave_one_speaker": ("speaker_id", 10)}


class DataError(Exception):
    """Bad or missing input data."""


class ManifestParseError(DataError):
    pass


class IngestError(DataError):
    pass


class CvConfigError(ValueError):
    pass


@dataclass
class ManifestRecord:
    audio_path: str
    utterance_id: str
    speaker_id: str
    session_id: str
    label: str
    valence: float = 0.0
    activation: float = 0.0
    dominance: float = 0.0
    transcript: list[int] | None = None
    extras: dict = field(default_factory=dict)

    @property
    def label_index(self) -> int:
        return CLASSES.index(self.label)

    @property
    def vad(self) -> tuple[float, float, float]:
        return (self.valence, self.activation, self.dominance)

    def to_json(self) -> str:
        d = asdict(self)
        if not d["extras"]:
            d.pop("extras")
        return json.dumps(d, sort_keys=True)


_REQUIRED = ("audio_path", "utterance_id", "speaker_id", "session_id", "label")


def _parse_record(obj: dict, lineno: int, base: Path) -> ManifestRecord:
    if not isinstance(obj, dict):
        raise ManifestParseError(f"line {lineno}: expected an object")
    missing = [k for k in _REQUIRED if not obj.get(k)]
    if missing:
        raise ManifestParseError(f"line {lineno}: missing fields {missing}")
    label = str(obj["label"]).lower()
    label = LABEL_ALIASES.get(label, label)
    if label not in CLASSES:
        raise ManifestParseError(f"line {lineno}: unknown emotion label {obj['label']!r}")
    known = {f for f in ManifestRecord.__dataclass_fields__ if f != "extras"}
    extras = {k: v for k, v in obj.items() if k not in known and k != "extras"}
    extras.update(obj.get("extras") or {})
    path = Path(obj["audio_path"])
    if not path.is_absolute():
        path = base / path
    transcript = obj.get("transcript")
    try:
        return ManifestRecord(
            audio_path=str(path),
            utterance_id=str(obj["utterance_id"]),
            speaker_id=str(obj["speaker_id"]),
            session_id=str(obj["session_id"]),
            label=label,
            valence=float(obj.get("valence", 0.0)),
            activation=float(obj.get("activation", 0.0)),
            dominance=float(obj.get("dominance", 0.0)),
            transcript=[int(t) for t in transcript] if transcript is not None else None,
            extras=extras,
        )
    except (TypeError, ValueError) as exc:
        raise ManifestParseError(f"line {lineno}: {exc}") from exc


def load_manifest(path, check_audio: bool = True) -> list[ManifestRecord]:
    """Read a JSON-lines manifest; audio paths resolve relative to the manifest."""
    path = Path(path)
    base = path.parent
    records, seen = [], {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(f"line {lineno}: {exc.msg}") from exc
            rec = _parse_record(obj, lineno, base)
            if rec.utterance_id in seen:
                raise ManifestParseError(
                    f"line {lineno}: duplicate utterance_id {rec.utterance_id!r} (first on line {seen[rec.utterance_id]})"
                )
            seen[rec.utterance_id] = lineno
            records.append(rec)
    if not records:
        log.warning("manifest %s is empty", path)
    if check_audio:
        missing = [r.audio_path for r in records if not Path(r.audio_path).exists()]
        if missing:
            raise IngestError("missing audio files:\n  " + "\n  ".join(missing))
    return records


def write_manifest(path, records: list[ManifestRecord]) -> None:
    base = Path(path).parent.resolve()
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            p = Path(r.audio_path)
            rel = p.resolve().relative_to(base) if p.is_absolute() and base in p.resolve().parents else p
            d = json.loads(r.to_json())
            d["audio_path"] = str(rel)
            fh.write(json.dumps(d, sort_keys=True) + "\n")


# -- synthetic toy corpus ----------------------------------------------------

# (F1, F2) per token id 1..12, log-spaced so each class motif occupies its own band
_TOKEN_FORMANTS = [(250.0 * 2 ** (0.36 * i), 250.0 * 2 ** (0.36 * i) * 1.8) for i in range(12)]
# per class: (pitch range, energy range, contour slope)
_CLASS_PROSODY = {
    "angry": ((0.6, 1.0), (0.6, 1.0), -0.25),
    "sad": ((0.0, 0.35), (0.0, 0.4), -0.05),
    "happy": ((0.5, 0.9), (0.3, 0.7), 0.25),
    "neutral": ((0.25, 0.6), (0.2, 0.6), 0.0),
}
N_SPEAKERS = 10
N_SESSIONS = 5


def class_motif(klass: int) -> list[int]:
    return [3 * klass + 1, 3 * klass + 2, 3 * klass + 3]


def vad_from_params(pitch: float, energy: float, slope: float) -> np.ndarray:
    """Planted dimensional targets on a 1..5 scale (before noise)."""
    valence = 1.0 + 2.0 * energy + 2.0 * (slope + 0.25) / 0.5
    activation = 1.0 + 4.0 * pitch
    dominance = 1.0 + 2.0 * energy + 2.0 * pitch
    return np.array([valence, activation, dominance])


def _synth_tone(token: int, f0: np.ndarray, amp: float, rng: np.random.Generator) -> np.ndarray:
    f1, f2 = _TOKEN_FORMANTS[token - 1]
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE + rng.uniform(0, 2 * np.pi)
    out = np.zeros_like(f0)
    f_mean = float(f0.mean())
    for h in range(1, int(7000 // f_mean) + 1):
        fh = h * f_mean
        gain = np.exp(-(((fh - f1) / (0.2 * f1)) ** 2)) + 0.7 * np.exp(-(((fh - f2) / (0.2 * f2)) ** 2)) + 0.02 / h
        out += gain * np.sin(h * phase)
    out /= np.abs(out).max() + 1e-9
    # steady partials at the formants: a timbre cue that does not move with pitch
    t = np.arange(f0.size) / SAMPLE_RATE
    out += np.sin(2 * np.pi * f1 * t + rng.uniform(0, 2 * np.pi))
    out += 0.7 * np.sin(2 * np.pi * f2 * t + rng.uniform(0, 2 * np.pi))
    env = np.hanning(f0.size)
    out *= env / (np.abs(out).max() + 1e-9)
    return amp * out


def synthesize_utterance(
    tokens: list[int], pitch: float, energy: float, slope: float, speaker_shift: float,
    duration: float, rng: np.random.Generator,
) -> np.ndarray:
    n = int(duration * SAMPLE_RATE)
    wav = rng.normal(0.0, 0.003, n)
    t = np.arange(n) / n
    f0 = (110.0 + 140.0 * pitch + speaker_shift) * (1.0 + slope * (t - 0.5))
    amp = 0.15 + 0.6 * energy
    tok_len = int(0.75 * n / len(tokens))
    free = n - len(tokens) * tok_len
    gaps = rng.dirichlet(np.ones(len(tokens) + 1)) * free
    pos = 0.0
    for i, tok in enumerate(tokens):
        pos += gaps[i]
        start = int(pos)
        stop = start + tok_len
        wav[start:stop] += _synth_tone(tok, f0[start:stop], amp, rng)
        pos += tok_len
    return np.clip(wav, -1.0, 1.0)


def generate_toy_dataset(
    out_dir, n_utterances: int = 80, seed: int = 0, rigged: bool = False,
    min_seconds: float = 1.6, max_seconds: float = 2.8, long_prob: float = 0.0,
) -> list[ManifestRecord]:
    """Synthesize a 4-class, 10-speaker, 5-session corpus and write its manifest.

    Each utterance speaks its class's 3-token motif (vowel-like formant
    patterns) over a harmonic source. Normally pitch range, energy and contour
    slope also depend on the class; with ``rigged`` they are drawn
    independently of it, so only the token motif carries the label.
    Activation is an affine function of the planted pitch parameter.
    """
    if n_utterances < 40:
        raise ValueError("need at least 40 utterances")
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    speaker_shift = rng.uniform(-15.0, 15.0, N_SPEAKERS)
    records = []
    for i in range(n_utterances):
        klass = i % len(CLASSES)
        spk = (i // len(CLASSES)) % N_SPEAKERS
        name = CLASSES[klass]
        if rigged:
            pitch, energy, slope = rng.uniform(), rng.uniform(), rng.uniform(-0.25, 0.25)
        else:
            (p_lo, p_hi), (e_lo, e_hi), base_slope = _CLASS_PROSODY[name]
            pitch, energy = rng.uniform(p_lo, p_hi), rng.uniform(e_lo, e_hi)
            slope = base_slope + rng.uniform(-0.05, 0.05)
        tokens = [int(t) for t in rng.permutation(class_motif(klass))]
        duration = rng.uniform(min_seconds, max_seconds)
        if rng.uniform() < long_prob:
            duration = rng.uniform(3.2, 5.0)
        wav = synthesize_utterance(tokens, pitch, energy, slope, speaker_shift[spk], duration, rng)
        vad = vad_from_params(pitch, energy, slope) + rng.normal(0.0, 0.1, 3)
        utt = f"utt{i:04d}"
        path = out_dir / "audio" / f"{utt}.wav"
        write_wav(path, wav)
        records.append(
            ManifestRecord(
                audio_path=str(path.resolve()),
                utterance_id=utt,
                speaker_id=f"spk{spk:02d}",
                session_id=f"ses{spk // 2 + 1}",
                label=name,
                valence=round(float(vad[0]), 6),
                activation=round(float(vad[1]), 6),
                dominance=round(float(vad[2]), 6),
                transcript=tokens,
                extras={"pitch": round(float(pitch), 6), "energy": round(float(energy), 6),
                        "slope": round(float(slope), 6), "rigged": bool(rigged)},
            )
        )
    write_manifest(out_dir / "manifest.jsonl", records)
    return records


# -- cross-validation --------------------------------------------------------


@dataclass
class Fold:
    index: int
    held_out: list[str]
    train: list[int]
    val: list[int]
    test: list[int]

    @property
    def train_full(self) -> list[int]:
        return sorted(self.train + self.val)


@dataclass
class CvPlan:
    strategy: str
    folds: list[Fold]

    def assignments(self) -> dict[int, list[str]]:
        return {f.index: f.held_out for f in self.folds}


def stratified_split(indices, labels, fraction: float, rng: np.random.Generator):
    """Split ``indices`` into (kept, held) with ``fraction`` of each class held."""
    by_class = defaultdict(list)
    for i in indices:
        by_class[labels[i]].append(i)
    keep, held = [], []
    for c in sorted(by_class):
        items = list(rng.permutation(by_class[c]))
        n_held = int(round(fraction * len(items)))
        if len(items) >= 2:
            n_held = min(max(n_held, 1), len(items) - 1)
        else:
            n_held = 0
        held += [int(x) for x in items[:n_held]]
        keep += [int(x) for x in items[n_held:]]
    return sorted(keep), sorted(held)


def make_cv_plan(
    records: list[ManifestRecord], strategy: str = "leave_one_session",
    val_fraction: float = 0.2, seed: int = 0, n_folds: int | None = None,
) -> CvPlan:
    if strategy not in CV_STRATEGIES:
        raise CvConfigError(f"unknown CV strategy {strategy!r}")
    attr, default_folds = CV_STRATEGIES[strategy]
    n_folds = default_folds if n_folds is None else n_folds
    keys = sorted({getattr(r, attr) for r in records})
    if len(keys) < 2:
        raise CvConfigError("need at least two distinct partition keys")
    if len(keys) < n_folds:
        raise CvConfigError(f"{strategy} needs {n_folds} distinct {attr} values, found {len(keys)}")
    groups = [keys[i::n_folds] for i in range(n_folds)]
    labels = [r.label_index for r in records]
    rng = np.random.default_rng(seed)
    folds = []
    for f, held in enumerate(groups):
        held_set = set(held)
        test = [i for i, r in enumerate(records) if getattr(r, attr) in held_set]
        rest = [i for i, r in enumerate(records) if getattr(r, attr) not in held_set]
        train, val = stratified_split(rest, labels, val_fraction, rng)
        folds.append(Fold(f, list(held), train, val, test))
    return CvPlan(strategy, folds)
