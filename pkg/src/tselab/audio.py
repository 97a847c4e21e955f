"""Audio I/O, synthetic speaker corpus generation, and mixture construction.

All audio is mono float64 in [-1, 1] at 8 kHz by default.  WAV files are
RIFF/WAVE, mono, 16-bit PCM little-endian; the codec is written directly so
that malformed files are rejected with messages naming the offending chunk or
field, and so that written bytes are bit-reproducible.

Mixtures pair a target and an interferer at an exact SNR (full-utterance
power ratio); if the sum clips, mixture and both sources are rescaled by a
common factor so the relative source powers, and therefore the SI-SDR of the
ideal solution, are unchanged.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AudioFormatError, DataError, DegenerateSignalError

DEFAULT_SAMPLE_RATE = 8000
_PCM16_SCALE = 32767.0


@dataclass
class Waveform:
    """Mono time-domain signal."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioFormatError(f"waveform must be mono 1-D, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise AudioFormatError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise AudioFormatError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    def power(self) -> float:
        return float(np.mean(self.samples ** 2)) if len(self.samples) else 0.0


# ---------------------------------------------------------------------------
# WAV codec (RIFF/WAVE, mono, 16-bit PCM)
# ---------------------------------------------------------------------------

def read_wav(path) -> Waveform:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise AudioFormatError(f"{path}: truncated header, missing RIFF chunk")
    if raw[0:4] != b"RIFF":
        raise AudioFormatError(f"{path}: missing RIFF chunk id")
    if raw[8:12] != b"WAVE":
        raise AudioFormatError(f"{path}: missing WAVE form type")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise AudioFormatError(f"{path}: chunk {cid.decode('latin1')!r} truncated")
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned

    if fmt is None:
        raise AudioFormatError(f"{path}: missing fmt chunk")
    if data is None:
        raise AudioFormatError(f"{path}: missing data chunk")
    if len(fmt) < 16:
        raise AudioFormatError(f"{path}: fmt chunk too short ({len(fmt)} bytes)")
    audio_format, channels, sample_rate, _, _, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if audio_format != 1:
        raise AudioFormatError(f"{path}: audio format {audio_format} is not PCM")
    if channels != 1:
        raise AudioFormatError(f"{path}: {channels} channels, only mono supported")
    if bits != 16:
        raise AudioFormatError(f"{path}: {bits}-bit samples, only 16-bit PCM supported")
    pcm = np.frombuffer(data[:len(data) - (len(data) % 2)], dtype="<i2")
    return Waveform(pcm.astype(np.float64) / _PCM16_SCALE, sample_rate=sample_rate)


def write_wav(path, waveform: Waveform) -> None:
    clipped = np.clip(waveform.samples, -1.0, 1.0)
    pcm = np.round(clipped * _PCM16_SCALE).astype("<i2")
    body = pcm.tobytes()
    sr = waveform.sample_rate
    header = b"".join([
        b"RIFF", struct.pack("<I", 36 + len(body)), b"WAVE",
        b"fmt ", struct.pack("<IHHIIHH", 16, 1, 1, sr, sr * 2, 2, 16),
        b"data", struct.pack("<I", len(body)),
    ])
    Path(path).write_bytes(header + body)


# ---------------------------------------------------------------------------
# synthetic speakers
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpeakerProfile:
    """Fixed timbre of one synthetic speaker: pitch, harmonic spectrum,
    vibrato and breathiness.  Utterances from one profile share these and
    differ only in the seeded prosody/envelope."""

    f0_hz: float
    harmonic_weights: np.ndarray
    vibrato_rate: float
    noise_floor: float
    seed: int

    def __post_init__(self):
        self.harmonic_weights = np.asarray(self.harmonic_weights, dtype=np.float64)
        if self.f0_hz <= 0:
            raise DataError(f"f0_hz must be positive, got {self.f0_hz}")
        if np.any(self.harmonic_weights < 0):
            raise DataError("harmonic weights must be nonnegative")
        total = self.harmonic_weights.sum()
        if total <= 0:
            raise DataError("harmonic weights must not all be zero")
        self.harmonic_weights = self.harmonic_weights / total


def make_speaker_profiles(count: int, seed: int) -> list[SyntheticSpeakerProfile]:
    """Deterministic bank of distinct speaker timbres."""
    rng = np.random.default_rng([seed, 0xA5])
    profiles = []
    for i in range(count):
        n_harm = int(rng.integers(5, 10))
        weights = rng.uniform(0.05, 1.0, size=n_harm) * (0.92 ** np.arange(n_harm))
        profiles.append(SyntheticSpeakerProfile(
            f0_hz=float(rng.uniform(90.0, 280.0)),
            harmonic_weights=weights,
            vibrato_rate=float(rng.uniform(4.0, 7.0)),
            noise_floor=float(rng.uniform(0.01, 0.04)),
            seed=seed * 1000 + i,
        ))
    return profiles


def _smooth_curve(rng: np.random.Generator, n: int, n_points: int,
                  lo: float, hi: float) -> np.ndarray:
    """Random control points joined by cosine interpolation."""
    points = rng.uniform(lo, hi, size=max(2, n_points))
    xs = np.linspace(0.0, len(points) - 1.0, n)
    i0 = np.minimum(xs.astype(int), len(points) - 2)
    frac = xs - i0
    w = 0.5 - 0.5 * np.cos(np.pi * frac)
    return points[i0] * (1 - w) + points[i0 + 1] * w


def synth_speaker_utterance(profile: SyntheticSpeakerProfile, duration_s: float,
                            seed: int, sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Harmonic-plus-noise utterance, deterministic for (profile, seed)."""
    if duration_s <= 0:
        raise DataError(f"duration must be positive, got {duration_s}")
    rng = np.random.default_rng([profile.seed & 0x7FFFFFFF, seed & 0x7FFFFFFF])
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate

    prosody = _smooth_curve(rng, n, n_points=3 + n // (sample_rate // 2), lo=0.92, hi=1.08)
    vibrato = 1.0 + 0.02 * np.sin(2 * np.pi * profile.vibrato_rate * t
                                  + rng.uniform(0, 2 * np.pi))
    f0_t = profile.f0_hz * prosody * vibrato
    phase = 2 * np.pi * np.cumsum(f0_t) / sample_rate

    sig = np.zeros(n)
    nyquist = sample_rate / 2.0
    for h, w in enumerate(profile.harmonic_weights, start=1):
        if h * profile.f0_hz * 1.1 >= nyquist:
            break
        sig += w * np.sin(h * phase + rng.uniform(0, 2 * np.pi))

    # syllable-like amplitude envelope, ~8 control points per second
    envelope = _smooth_curve(rng, n, n_points=max(3, int(duration_s * 8)), lo=0.15, hi=1.0)
    sig = sig * envelope + profile.noise_floor * rng.standard_normal(n) * envelope

    peak = np.max(np.abs(sig))
    if peak > 0:
        sig *= 0.9 / peak
    return Waveform(sig, sample_rate=sample_rate)


# ---------------------------------------------------------------------------
# mixing
# ---------------------------------------------------------------------------

@dataclass
class MixResult:
    """Target + interferer mixed at an exact SNR; all three share any peak
    rescaling applied to keep the mixture inside [-1, 1]."""

    mixture: Waveform
    target: Waveform
    interferer: Waveform
    snr_db: float
    peak_scale: float


def mix_at_snr(target: Waveform, interferer: Waveform, snr_db: float) -> MixResult:
    """Scale the interferer so 10*log10(P_target / P_interferer) == snr_db
    exactly, then sum.  Length mismatch is resolved by truncating the longer
    source (min policy)."""
    if target.sample_rate != interferer.sample_rate:
        raise DataError(f"sample rate mismatch: {target.sample_rate} vs "
                        f"{interferer.sample_rate}")
    n = min(len(target), len(interferer))
    if n == 0:
        raise DegenerateSignalError("cannot mix empty signals")
    ts = target.samples[:n]
    infs = interferer.samples[:n]
    p_t = float(np.mean(ts ** 2))
    p_i = float(np.mean(infs ** 2))
    if p_t == 0.0:
        raise DegenerateSignalError("target has zero power")
    if p_i == 0.0:
        raise DegenerateSignalError("interferer has zero power")

    gain = np.sqrt(p_t / (p_i * 10.0 ** (snr_db / 10.0)))
    scaled_int = infs * gain
    mixture = ts + scaled_int
    peak = float(np.max(np.abs(mixture)))
    peak_scale = 1.0 if peak <= 1.0 else 1.0 / peak
    sr = target.sample_rate
    return MixResult(
        mixture=Waveform(mixture * peak_scale, sr),
        target=Waveform(ts * peak_scale, sr),
        interferer=Waveform(scaled_int * peak_scale, sr),
        snr_db=float(snr_db),
        peak_scale=peak_scale,
    )


def measured_snr_db(target: Waveform, interferer: Waveform) -> float:
    return 10.0 * np.log10(target.power() / interferer.power())


# ---------------------------------------------------------------------------
# corpora and manifests
# ---------------------------------------------------------------------------

@dataclass
class UtterancePool:
    """Clean per-speaker utterances; the sampling pool for mixture creation."""

    by_speaker: dict[str, list[Path]]
    base_dir: Path

    @property
    def speakers(self) -> list[str]:
        return sorted(self.by_speaker)

    def load(self, path: Path) -> Waveform:
        return read_wav(path)

    @classmethod
    def from_manifest(cls, manifest_path) -> "UtterancePool":
        manifest_path = Path(manifest_path)
        base = manifest_path.parent
        by_speaker: dict[str, list[Path]] = {}
        with open(manifest_path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{manifest_path}:{line_no}: bad JSON: {exc}") from exc
                path = base / row["path"]
                if not path.exists():
                    raise DataError(f"{manifest_path}:{line_no}: missing file {path}")
                by_speaker.setdefault(str(row["speaker"]), []).append(path)
        return cls(by_speaker=by_speaker, base_dir=base)


def write_corpus_manifest(path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


@dataclass
class ManifestEntry:
    mix: str
    target: str
    enroll: str
    speaker: str
    snr_db: float


@dataclass
class Manifest:
    """Mixture list for one split; JSON-lines on disk with keys
    {mix, target, enroll, speaker, snr_db}, paths relative to the manifest."""

    entries: list[ManifestEntry]
    split: str
    base_dir: Path = field(default_factory=Path)

    @property
    def speakers(self) -> set[str]:
        return {e.speaker for e in self.entries}

    def resolve(self, rel: str) -> Path:
        return self.base_dir / rel

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps({"mix": e.mix, "target": e.target,
                                     "enroll": e.enroll, "speaker": e.speaker,
                                     "snr_db": e.snr_db}, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path, split: str, check_paths: bool = True) -> "Manifest":
        path = Path(path)
        base = path.parent
        entries = []
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                missing = {"mix", "target", "enroll", "speaker", "snr_db"} - set(row)
                if missing:
                    raise DataError(f"{path}:{line_no}: missing keys {sorted(missing)}")
                entry = ManifestEntry(mix=row["mix"], target=row["target"],
                                      enroll=row["enroll"], speaker=str(row["speaker"]),
                                      snr_db=float(row["snr_db"]))
                if check_paths:
                    for rel in (entry.mix, entry.target, entry.enroll):
                        if not (base / rel).exists():
                            raise DataError(f"{path}:{line_no}: missing file {base / rel}")
                entries.append(entry)
        return cls(entries=entries, split=split, base_dir=base)


def validate_speaker_disjoint(train: Manifest, valid: Manifest | None,
                              test: Manifest) -> None:
    """Train+valid speakers must not appear in the test split."""
    seen = train.speakers | (valid.speakers if valid is not None else set())
    overlap = seen & test.speakers
    if overlap:
        raise DataError(f"test speakers overlap train/valid: {sorted(overlap)}")


@dataclass
class MixtureExample:
    """One in-memory training example."""

    mixture: Waveform
    target: Waveform
    interferer: Waveform
    enrollment: Waveform
    target_speaker_id: str
    snr_db: float


def dynamic_mix(pool: UtterancePool, rng: np.random.Generator,
                snr_min: float = 0.0, snr_max: float = 5.0) -> MixtureExample:
    """Sample a fresh (speaker pair, utterance pair, enrollment, SNR) mixture.

    The enrollment utterance is always distinct from the target utterance, so
    the pool needs at least 2 speakers with at least 2 utterances each.
    """
    speakers = [s for s in pool.speakers if len(pool.by_speaker[s]) >= 2]
    if len(speakers) < 2:
        raise DataError(f"dynamic mixing needs >= 2 speakers with >= 2 utterances, "
                        f"have {len(speakers)}")
    tgt_spk, int_spk = rng.choice(speakers, size=2, replace=False)
    tgt_utts = pool.by_speaker[tgt_spk]
    tgt_idx, enroll_idx = rng.choice(len(tgt_utts), size=2, replace=False)
    int_utt = pool.by_speaker[int_spk][rng.integers(len(pool.by_speaker[int_spk]))]
    snr_db = float(rng.uniform(snr_min, snr_max))

    mixed = mix_at_snr(pool.load(tgt_utts[tgt_idx]), pool.load(int_utt), snr_db)
    return MixtureExample(
        mixture=mixed.mixture,
        target=mixed.target,
        interferer=mixed.interferer,
        enrollment=pool.load(tgt_utts[enroll_idx]),
        target_speaker_id=str(tgt_spk),
        snr_db=snr_db,
    )
