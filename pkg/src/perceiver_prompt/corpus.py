"""Synthetic multi-speaker corpus with FDA-style severity labels.

Each symbol is a voiced "phone" with its own (F1, F2) formant pair and
duration. Speakers have a natural voice (pitch, vocal-tract scale). Patients
additionally carry a fixed disorder profile whose strength grows as the FDA
score falls; the formant shift is applied at synthesis, the rest by
:func:`apply_disorder`.
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .audio import SAMPLE_RATE, Waveform, write_wav
from .model import DEFAULT_SYMBOLS

FDA_MAX = 145.0
SEVERITIES = ("F1", "F2", "F3", "F4")
HEALTHY = "HEALTHY"
TASKS = ("T1_char", "T2_word", "T3_sentence")
TASK_LENGTHS = {"T1_char": (1, 1), "T2_word": (2, 3), "T3_sentence": (5, 12)}
# FDA score ranges used when drawing patients for each level
SEVERITY_SCORE_RANGES = {"F1": (30.0, 69.0), "F2": (70.0, 89.0), "F3": (90.0, 134.0), "F4": (135.0, 144.0)}

_F1_GRID = (300.0, 480.0, 680.0, 900.0)
_F2_GRID = (950.0, 1350.0, 1750.0, 2150.0, 2550.0)
CROSSFADE_MS = 10.0
EDGE_SILENCE_MS = 50.0


class UnknownSymbolError(KeyError):
    pass


def severity_of(fda_score: float) -> str:
    """Half-open buckets at {70, 90, 135}; 145 is the least severe score."""
    if not 0.0 <= fda_score <= FDA_MAX:
        raise ValueError(f"FDA score {fda_score} outside [0, {FDA_MAX:g}]")
    if fda_score < 70:
        return "F1"
    if fda_score < 90:
        return "F2"
    if fda_score < 135:
        return "F3"
    return "F4"


@dataclass(frozen=True)
class PhoneSpec:
    f1: float
    f2: float
    f3: float
    duration_ms: float


def phone_inventory(symbols=DEFAULT_SYMBOLS) -> dict[str, PhoneSpec]:
    if len(symbols) > len(_F1_GRID) * len(_F2_GRID):
        raise ValueError("too many symbols for the formant grid")
    out = {}
    for i, s in enumerate(symbols):
        f1 = _F1_GRID[i % len(_F1_GRID)]
        f2 = _F2_GRID[i // len(_F1_GRID)]
        dur = 80.0 + 70.0 * ((i * 7) % len(symbols)) / (len(symbols) - 1)
        out[s] = PhoneSpec(f1, f2, 2900.0 + 40.0 * (i % 5), dur)
    return out


@dataclass(frozen=True)
class VoiceParams:
    f0: float = 140.0
    formant_scale: float = 1.0
    rate: float = 1.0


@dataclass(frozen=True)
class DisorderProfile:
    formant_shift: float = 1.0
    speaking_rate: float = 1.0
    jitter: float = 0.0
    snr_db: float = float("inf")
    drop_prob: float = 0.0
    lowpass_hz: float = SAMPLE_RATE / 2

    @classmethod
    def neutral(cls) -> DisorderProfile:
        return cls()

    @classmethod
    def from_score(cls, fda_score: float, direction: float = 1.0) -> DisorderProfile:
        """Distortion strength grows linearly with (145 - score); ``direction`` signs the formant shift."""
        d = (FDA_MAX - fda_score) / FDA_MAX
        return cls(
            formant_shift=float(1.0 + np.sign(direction) * 0.4 * d),
            speaking_rate=1.0 - 0.5 * d,
            jitter=0.5 * d,
            snr_db=40.0 - 30.0 * d,
            drop_prob=0.1 * d,
            lowpass_hz=8000.0 - 5000.0 * d,
        )

    def is_neutral(self) -> bool:
        return self == DisorderProfile()


@dataclass
class SyntheticSpeaker:
    id: str
    fda_score: float
    severity: str
    voice: VoiceParams
    profile: DisorderProfile
    seed: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["profile"]["snr_db"] = None if np.isinf(self.profile.snr_db) else self.profile.snr_db
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticSpeaker:
        prof = dict(d["profile"])
        if prof["snr_db"] is None:
            prof["snr_db"] = float("inf")
        return cls(d["id"], d["fda_score"], d["severity"], VoiceParams(**d["voice"]), DisorderProfile(**prof), d["seed"])


@dataclass
class UtteranceRecord:
    utt_id: str
    speaker_id: str
    wav_path: str
    transcript: str
    task: str
    fda_score: float
    severity: str

    def __post_init__(self):
        lo, hi = TASK_LENGTHS[self.task]
        if not lo <= len(self.transcript) <= hi:
            raise ValueError(f"{self.utt_id}: transcript length {len(self.transcript)} not valid for {self.task}")


# -- synthesis ------------------------------------------------------------------
def _phone(spec: PhoneSpec, voice: VoiceParams, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    n = int(round(spec.duration_ms / voice.rate * sr / 1000.0))
    t = np.arange(n) / sr
    f0 = voice.f0 * (1.0 + 0.03 * rng.standard_normal())
    formants = np.array([spec.f1, spec.f2, spec.f3]) * voice.formant_scale
    bws = np.array([80.0, 120.0, 180.0])
    gains = np.array([1.0, 0.7, 0.35])
    harmonics = np.arange(1, int(7000 // f0) + 1) * f0
    env = (gains[None, :] * np.exp(-0.5 * ((harmonics[:, None] - formants[None, :]) / bws[None, :]) ** 2)).sum(1)
    env += 0.01
    phases = rng.uniform(0, 2 * np.pi, harmonics.size)
    x = (env[:, None] * np.sin(2 * np.pi * harmonics[:, None] * t[None, :] + phases[:, None])).sum(0)
    return x / (np.abs(x).max() + 1e-9)


def synth_clean(transcript: str, voice: VoiceParams = VoiceParams(), seed: int = 0,
                inventory: dict[str, PhoneSpec] | None = None) -> Waveform:
    """Concatenate crossfaded symbol phones, padded with short edge silences; peak 0.5."""
    inventory = inventory or phone_inventory()
    rng = np.random.default_rng(seed)
    fade = int(CROSSFADE_MS * SAMPLE_RATE / 1000)
    ramp = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, fade))
    out = np.zeros(0)
    for ch in transcript:
        if ch not in inventory:
            raise UnknownSymbolError(f"symbol {ch!r} has no phone")
        seg = _phone(inventory[ch], voice, rng)
        seg[:fade] *= ramp
        seg[-fade:] *= ramp[::-1]
        if out.size:
            seg[:fade] += out[-fade:]
            out = np.concatenate([out[:-fade], seg])
        else:
            out = seg
    edge = np.zeros(int(EDGE_SILENCE_MS * SAMPLE_RATE / 1000))
    out = np.concatenate([edge, 0.5 * out, edge])
    return Waveform(out.astype(np.float32))


def time_stretch(x: np.ndarray, rate: float, frame: int = 320, hop: int = 160, tol: int = 80) -> np.ndarray:
    """WSOLA: output is ~len(x)/rate long with the spectrum kept. rate < 1 slows speech down."""
    if abs(rate - 1.0) < 1e-9 or x.size < frame:
        return x
    win = np.hanning(frame)
    n_out = int(round(x.size / rate))
    n_frames = max(1, (n_out - frame) // hop + 1)
    pad = np.concatenate([np.zeros(tol), x, np.zeros(frame + tol)])
    out = np.zeros(n_frames * hop + frame)
    norm = np.zeros_like(out)
    prev_nat = None
    for k in range(n_frames):
        centre = int(round(k * hop * rate)) + tol
        if prev_nat is None:
            start = centre
        else:
            lo, hi = max(0, centre - tol), min(pad.size - frame, centre + tol)
            seg = pad[lo:hi + frame]
            c = np.correlate(seg, prev_nat, mode="valid")
            start = lo + int(np.argmax(c))
        out[k * hop:k * hop + frame] += win * pad[start:start + frame]
        norm[k * hop:k * hop + frame] += win
        prev_nat = pad[start + hop:start + hop + frame]
        if prev_nat.size < frame:
            prev_nat = np.pad(prev_nat, (0, frame - prev_nat.size))
    out = out / np.maximum(norm, 1e-3)
    return out[:n_out]


def apply_disorder(w: Waveform, profile: DisorderProfile, seed: int = 0) -> Waveform:
    """Rate warp, block jitter, spectral low-pass, frame drops and additive noise; clipped to [-1, 1]."""
    if profile.is_neutral():
        return Waveform(w.samples.copy(), w.sample_rate)
    rng = np.random.default_rng(seed)
    sr = w.sample_rate
    x = w.samples.astype(np.float64)
    x = time_stretch(x, profile.speaking_rate)
    if profile.jitter > 0:
        block = int(0.04 * sr)
        n_blocks = x.size // block + 2
        gains = np.exp(profile.jitter * rng.standard_normal(n_blocks))
        env = np.interp(np.arange(x.size), np.arange(n_blocks) * block, gains)
        x = x * env
    if profile.lowpass_hz < sr / 2 - 100:
        sos = signal.butter(4, profile.lowpass_hz, btype="low", fs=sr, output="sos")
        x = signal.sosfiltfilt(sos, x)
    if profile.drop_prob > 0:
        frame = int(0.01 * sr)
        keep = rng.random(x.size // frame + 1) >= profile.drop_prob
        mask = np.repeat(keep, frame)[: x.size].astype(np.float64)
        x = x * np.convolve(mask, np.ones(16) / 16, mode="same")
    if np.isfinite(profile.snr_db):
        rms = np.sqrt(np.mean(x * x)) + 1e-12
        x = x + rng.standard_normal(x.size) * rms / (10.0 ** (profile.snr_db / 20.0))
    return Waveform(np.clip(x, -1.0, 1.0).astype(np.float32), sr)


# -- corpus ---------------------------------------------------------------------------
@dataclass
class CorpusConfig:
    n_patients: int = 16
    n_healthy: int = 6
    utts_per_task: int = 20
    healthy_utts_per_task: int = 80
    n_test_patients: int = 4
    seed: int = 0


@dataclass
class Corpus:
    root: Path
    records: list[UtteranceRecord]
    speakers: dict[str, SyntheticSpeaker]
    train_speakers: list[str]
    test_speakers: list[str]
    healthy_speakers: list[str] = field(default_factory=list)

    def by_speaker(self, records=None) -> dict[str, list[str]]:
        idx = defaultdict(list)
        for r in records if records is not None else self.records:
            idx[r.speaker_id].append(r.utt_id)
        return dict(idx)

    def subset(self, speakers) -> list[UtteranceRecord]:
        s = set(speakers)
        return [r for r in self.records if r.speaker_id in s]

    @property
    def train_patients(self) -> list[str]:
        return [s for s in self.train_speakers if s not in set(self.healthy_speakers)]

    def wav_path(self, rec: UtteranceRecord) -> Path:
        return self.root / rec.wav_path


def make_speakers(cfg: CorpusConfig) -> tuple[dict[str, SyntheticSpeaker], list[str], list[str], list[str]]:
    if min(cfg.n_patients, cfg.n_healthy, cfg.utts_per_task, cfg.healthy_utts_per_task) < 1:
        raise ValueError("corpus counts must be >= 1")
    if not 1 <= cfg.n_test_patients < cfg.n_patients:
        raise ValueError("need 1 <= n_test_patients < n_patients")
    rng = np.random.default_rng([cfg.seed, 1])
    speakers: dict[str, SyntheticSpeaker] = {}
    levels = [SEVERITIES[i % 4] for i in range(cfg.n_patients)]
    by_level = defaultdict(list)
    for i, lvl in enumerate(levels):
        lo, hi = SEVERITY_SCORE_RANGES[lvl]
        score = float(np.round(rng.uniform(lo, hi), 1))
        voice = VoiceParams(f0=float(rng.uniform(100, 220)), formant_scale=float(rng.uniform(0.97, 1.03)))
        direction = 1.0 if (i + i // 4) % 2 == 0 else -1.0
        sid = f"P{i:02d}"
        speakers[sid] = SyntheticSpeaker(sid, score, severity_of(score), voice,
                                         DisorderProfile.from_score(score, direction), seed=int(rng.integers(2**31)))
        by_level[lvl].append(sid)
    healthy = []
    for j in range(cfg.n_healthy):
        voice = VoiceParams(f0=float(rng.uniform(100, 220)), formant_scale=float(rng.uniform(0.97, 1.03)))
        sid = f"H{j:02d}"
        speakers[sid] = SyntheticSpeaker(sid, FDA_MAX, HEALTHY, voice, DisorderProfile.neutral(),
                                         seed=int(rng.integers(2**31)))
        healthy.append(sid)
    # stratified, speaker-disjoint test pool; every level keeps a training speaker
    test: list[str] = []
    for k in range(cfg.n_test_patients):
        lvl = SEVERITIES[k % 4]
        remaining = [s for s in by_level[lvl] if s not in test]
        if len(remaining) < 2:
            raise ValueError(f"cannot hold out another {lvl} speaker with {cfg.n_patients} patients")
        test.append(remaining[-1])
    train = [s for s in speakers if s not in test]
    return speakers, train, test, healthy


def speaker_voice(spk: SyntheticSpeaker) -> VoiceParams:
    """Voice used for synthesis: natural voice with the profile's formant shift folded in."""
    return VoiceParams(spk.voice.f0, spk.voice.formant_scale * spk.profile.formant_shift, spk.voice.rate)


def random_transcript(task: str, rng: np.random.Generator, symbols=DEFAULT_SYMBOLS) -> str:
    lo, hi = TASK_LENGTHS[task]
    n = int(rng.integers(lo, hi + 1))
    return "".join(symbols[i] for i in rng.integers(0, len(symbols), n))


def render_utterance(spk: SyntheticSpeaker, transcript: str, utt_seed: int) -> Waveform:
    clean = synth_clean(transcript, speaker_voice(spk), seed=utt_seed)
    return apply_disorder(clean, spk.profile, seed=utt_seed + 1)


def generate_corpus(root, cfg: CorpusConfig = CorpusConfig()) -> Corpus:
    """Write WAVs, ``manifest.jsonl`` and ``speakers.json`` under ``root``."""
    root = Path(root)
    speakers, train, test, healthy = make_speakers(cfg)
    records = []
    for sid, spk in speakers.items():
        rng = np.random.default_rng([cfg.seed, 2, spk.seed])
        n_utts = cfg.healthy_utts_per_task if spk.severity == HEALTHY else cfg.utts_per_task
        for task in TASKS:
            for j in range(n_utts):
                text = random_transcript(task, rng)
                uid = f"{sid}_{task[:2]}_{j:03d}"
                w = render_utterance(spk, text, int(rng.integers(2**31)))
                rel = f"wavs/{sid}/{uid}.wav"
                write_wav(root / rel, w)
                records.append(UtteranceRecord(uid, sid, rel, text, task, spk.fda_score, spk.severity))
    corpus = Corpus(root, records, speakers, train, test, healthy)
    write_manifest(root / "manifest.jsonl", records)
    meta = {"config": asdict(cfg), "train_speakers": train, "test_speakers": test, "healthy_speakers": healthy,
            "speakers": {k: v.to_dict() for k, v in speakers.items()}}
    (root / "speakers.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return corpus


def write_manifest(path, records) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def read_manifest(path) -> list[UtteranceRecord]:
    with open(path) as f:
        return [UtteranceRecord(**json.loads(line)) for line in f if line.strip()]


def load_corpus(root) -> Corpus:
    root = Path(root)
    if not (root / "manifest.jsonl").exists():
        raise FileNotFoundError(f"no corpus manifest at {root / 'manifest.jsonl'}; run `generate` first")
    meta = json.loads((root / "speakers.json").read_text())
    speakers = {k: SyntheticSpeaker.from_dict(v) for k, v in meta["speakers"].items()}
    return Corpus(root, read_manifest(root / "manifest.jsonl"), speakers, meta["train_speakers"],
                  meta["test_speakers"], meta["healthy_speakers"])
