"""Speaker embedding networks on log-mel features.

A small dilated-conv frame encoder feeds one of two pooling heads:

- ``stats``: per-dimension mean and standard deviation, concatenated
  (x-vector style);
- ``gaussian``: per-dimension Gaussian posterior inference under a
  standard-normal prior (xi-vector style).  Frames supply value estimates z
  and log precisions; only the posterior mean is kept:
  ``phi_d = sum_t w_td * z_td / (1 + sum_t w_td)`` with ``w = exp(log_prec)``.

Training is plain speaker-classification cross entropy; extraction stops at
the embedding layer.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tt
from .audio import UtterancePool, Waveform
from .ckpt import load_checkpoint, save_checkpoint
from .errors import DataError, ShapeError
from .tensor import Tape, Tensor

# ---------------------------------------------------------------------------
# log-mel front end
# ---------------------------------------------------------------------------


@dataclass
class LogMelConfig:
    win_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 24
    n_fft: int = 256
    fmin_hz: float = 0.0
    fmax_hz: float | None = None  # defaults to Nyquist
    floor: float = 1e-10


@dataclass
class FrameFeatures:
    frames: np.ndarray  # [T, n_mels]
    config: LogMelConfig


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int,
                   fmin_hz: float = 0.0, fmax_hz: float | None = None) -> np.ndarray:
    """Triangular filters [n_mels, n_fft//2 + 1], evenly spaced on the mel scale."""
    fmax_hz = fmax_hz or sample_rate / 2.0
    mel_edges = np.linspace(_hz_to_mel(fmin_hz), _hz_to_mel(fmax_hz), n_mels + 2)
    hz_edges = _mel_to_hz(mel_edges)
    bin_hz = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    bank = np.zeros((n_mels, len(bin_hz)))
    for i in range(n_mels):
        lo, mid, hi = hz_edges[i], hz_edges[i + 1], hz_edges[i + 2]
        rising = (bin_hz - lo) / max(mid - lo, 1e-12)
        falling = (hi - bin_hz) / max(hi - mid, 1e-12)
        bank[i] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def band_center_hz(config: LogMelConfig, sample_rate: int, band: int) -> float:
    fmax = config.fmax_hz or sample_rate / 2.0
    mel_edges = np.linspace(_hz_to_mel(config.fmin_hz), _hz_to_mel(fmax),
                            config.n_mels + 2)
    return float(_mel_to_hz(mel_edges[band + 1]))


def logmel(waveform: Waveform, config: LogMelConfig | None = None) -> FrameFeatures:
    """Log mel-filterbank energies; T = floor((len - win)/hop) + 1 frames."""
    config = config or LogMelConfig()
    sr = waveform.sample_rate
    win = int(round(config.win_ms * sr / 1000.0))
    hop = int(round(config.hop_ms * sr / 1000.0))
    x = waveform.samples
    if len(x) < win:
        raise ShapeError(f"logmel: input of {len(x)} samples shorter than "
                         f"window of {win}")
    n_frames = (len(x) - win) // hop + 1
    idx = hop * np.arange(n_frames)[:, None] + np.arange(win)[None, :]
    frames = x[idx] * np.hanning(win)
    spectrum = np.abs(np.fft.rfft(frames, n=config.n_fft, axis=1))
    bank = mel_filterbank(config.n_mels, config.n_fft, sr,
                          config.fmin_hz, config.fmax_hz)
    energies = spectrum @ bank.T
    return FrameFeatures(np.log(np.maximum(energies, config.floor)), config)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def stats_pool(frames: Tensor, eps: float = 1e-8) -> Tensor:
    """Concatenated per-dimension mean and population std over frames [T, D]."""
    if frames.ndim != 2 or frames.shape[0] < 2:
        raise ShapeError(f"stats_pool: need [T>=2, D] frames, got {frames.shape}")
    t_len, dim = frames.shape
    mean = tt.tmean(frames, axis=0)  # [D]
    centered = tt.sub(frames, tt.expand(tt.reshape(mean, (1, dim)), (t_len, dim)))
    var = tt.tmean(tt.mul(centered, centered), axis=0)
    std = tt.sqrt(tt.add(var, Tensor(eps)))
    return tt.concat([mean, std], axis=0)


def gaussian_posterior_pool(z: Tensor, log_prec: Tensor) -> Tensor:
    """Posterior mean of a per-dimension Gaussian with standard-normal prior:
    precisions 1 + sum_t exp(log_prec), evidence-weighted frame values."""
    if z.shape != log_prec.shape or z.ndim != 2:
        raise ShapeError(f"gaussian_posterior_pool: shapes {z.shape} and "
                         f"{log_prec.shape} must match as [T, D]")
    weights = tt.exp(log_prec)
    numerator = tt.tsum(tt.mul(weights, z), axis=0)
    precision = tt.add(tt.tsum(weights, axis=0), Tensor(1.0))
    return tt.div(numerator, precision)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class EmbedderConfig:
    sample_rate: int = 8000
    logmel: LogMelConfig = field(default_factory=LogMelConfig)
    channels: int = 64          # paper-scale preset uses 512
    emb_dim: int = 32           # paper-scale preset uses 512
    pooling: str = "stats"      # "stats" (x-vector) | "gaussian" (xi-vector)
    conv_kernel: int = 3
    dilations: tuple = (1, 2, 3)

    def kind(self) -> str:
        return "xvec" if self.pooling == "stats" else "xivec"


@dataclass
class Embedding:
    vector: np.ndarray
    kind: str
    speaker_id: str | None = None


class EmbedderModel:
    """Dilated-conv frame encoder + pooling + linear embedding layer, with a
    speaker-classification head used only during training."""

    def __init__(self, config: EmbedderConfig, n_speakers: int, seed: int = 0):
        if config.pooling not in ("stats", "gaussian"):
            raise DataError(f"unknown pooling {config.pooling!r}")
        self.config = config
        self.n_speakers = n_speakers
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng([seed & 0x7FFFFFFF, 0xE1])
        c, k = config.channels, config.conv_kernel
        c_in = config.logmel.n_mels
        for i, _ in enumerate(config.dilations):
            self._add(f"conv{i}.kernel", tt.parameter(rng, (c, c_in, k),
                                                      fan_in=c_in * k, fan_out=c))
            self._add(f"conv{i}.ln_gain", Tensor(np.ones(c), requires_grad=True))
            self._add(f"conv{i}.ln_bias", Tensor(np.zeros(c), requires_grad=True))
            c_in = c
        if config.pooling == "gaussian":
            self._add("pool.z_w", tt.parameter(rng, (c, c)))
            self._add("pool.z_b", Tensor(np.zeros(c), requires_grad=True))
            self._add("pool.prec_w", tt.parameter(rng, (c, c)))
            self._add("pool.prec_b", Tensor(np.zeros(c), requires_grad=True))
            pooled_dim = c
        else:
            pooled_dim = 2 * c
        self._add("emb.w", tt.parameter(rng, (pooled_dim, config.emb_dim)))
        self._add("emb.b", Tensor(np.zeros(config.emb_dim), requires_grad=True))
        self._add("cls.w", tt.parameter(rng, (config.emb_dim, n_speakers)))
        self._add("cls.b", Tensor(np.zeros(n_speakers), requires_grad=True))

    def _add(self, name: str, t: Tensor) -> None:
        self.params[name] = t

    def _linear(self, x: Tensor, w_name: str, b_name: str) -> Tensor:
        w, b = self.params[w_name], self.params[b_name]
        y = tt.matmul(x, w)
        return tt.add(y, tt.expand(tt.reshape(b, (1, b.shape[0])), y.shape))

    def frame_encode(self, feats: np.ndarray) -> Tensor:
        """[T, n_mels] features -> [T', channels] frame activations."""
        x = tt.transpose(Tensor(feats))  # [F, T]
        for i, dilation in enumerate(self.config.dilations):
            x = tt.conv1d(x, self.params[f"conv{i}.kernel"], stride=1,
                          dilation=dilation)
            x = tt.relu(x)
            xt = tt.layernorm(tt.transpose(x), self.params[f"conv{i}.ln_gain"],
                              self.params[f"conv{i}.ln_bias"])
            x = tt.transpose(xt)
        return tt.transpose(x)

    def embed_tensor(self, feats: np.ndarray) -> Tensor:
        h = self.frame_encode(feats)
        if self.config.pooling == "gaussian":
            z = self._linear(h, "pool.z_w", "pool.z_b")
            log_prec = self._linear(h, "pool.prec_w", "pool.prec_b")
            pooled = gaussian_posterior_pool(z, log_prec)
        else:
            pooled = stats_pool(h)
        row = tt.reshape(pooled, (1, pooled.shape[0]))
        return tt.reshape(self._linear(row, "emb.w", "emb.b"), (self.config.emb_dim,))

    def logits(self, feats: np.ndarray) -> Tensor:
        emb = self.embed_tensor(feats)
        row = tt.reshape(emb, (1, self.config.emb_dim))
        return tt.reshape(self._linear(row, "cls.w", "cls.b"), (self.n_speakers,))

    def embed(self, waveform: Waveform, speaker_id: str | None = None) -> Embedding:
        feats = logmel(waveform, self.config.logmel).frames
        vector = self.embed_tensor(feats).data.copy()
        return Embedding(vector=vector, kind=self.config.kind(), speaker_id=speaker_id)

    def save(self, path, meta: dict | None = None) -> None:
        cfg = asdict(self.config)
        cfg["dilations"] = list(self.config.dilations)
        save_checkpoint(path, kind="embedder", config=cfg,
                        blobs={k: v.data for k, v in self.params.items()},
                        meta={"n_speakers": self.n_speakers, **(meta or {})})

    @classmethod
    def load(cls, path) -> "EmbedderModel":
        _, cfg, meta, blobs = load_checkpoint(path, expect_kind="embedder")
        cfg = dict(cfg)
        cfg["logmel"] = LogMelConfig(**cfg["logmel"])
        cfg["dilations"] = tuple(cfg["dilations"])
        model = cls(EmbedderConfig(**cfg), n_speakers=int(meta["n_speakers"]))
        for name, arr in blobs.items():
            model.params[name].data = arr
        return model


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Stable -log softmax(logits)[label]; the max shift is a constant and
    does not change the gradient."""
    shift = float(np.max(logits.data))
    shifted = tt.sub(logits, Tensor(shift))
    lse = tt.log(tt.tsum(tt.exp(shifted)))
    onehot = np.zeros(logits.shape[0])
    onehot[label] = 1.0
    return tt.sub(lse, tt.tsum(tt.mul(shifted, Tensor(onehot))))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class EmbedderTrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    seed: int = 0
    valid_fraction: float = 0.05
    grad_clip_norm: float = 5.0


def train_embedder(pool: UtterancePool, config: EmbedderConfig,
                   train_cfg: EmbedderTrainConfig):
    """Speaker-classification training; returns (model, per-epoch log rows)."""
    from .trainer import AdamState, adam_step  # optimizer lives with the trainer

    speakers = pool.speakers
    if len(speakers) < 2:
        raise DataError(f"embedder training needs >= 2 speakers, have {len(speakers)}")
    label_of = {s: i for i, s in enumerate(speakers)}

    items = []  # (features, label) with per-utterance features cached up front
    for spk in speakers:
        for path in pool.by_speaker[spk]:
            feats = logmel(pool.load(path), config.logmel).frames
            items.append((feats, label_of[spk]))

    rng = np.random.default_rng([train_cfg.seed & 0x7FFFFFFF, 0x5E])
    order = rng.permutation(len(items))
    n_valid = max(1, int(round(train_cfg.valid_fraction * len(items))))
    if len(items) - n_valid < len(speakers):
        raise DataError("corpus too small to split off a validation set")
    valid_idx = order[:n_valid]
    train_idx = order[n_valid:]

    model = EmbedderModel(config, n_speakers=len(speakers), seed=train_cfg.seed)
    adam = AdamState.for_params(model.params)
    log = []
    for epoch in range(1, train_cfg.epochs + 1):
        started = time.perf_counter()
        epoch_rng = np.random.default_rng([train_cfg.seed & 0x7FFFFFFF, epoch])
        losses = []
        hits = 0
        for i in epoch_rng.permutation(train_idx):
            feats, label = items[i]
            for p in model.params.values():
                p.zero_grad()
            with Tape() as tape:
                logit_t = model.logits(feats)
                loss = cross_entropy(logit_t, label)
            tape.backward(loss)
            adam_step(model.params, adam, lr=train_cfg.lr,
                      clip_norm=train_cfg.grad_clip_norm)
            losses.append(loss.item())
            hits += int(np.argmax(logit_t.data) == label)
        valid_hits = sum(int(np.argmax(model.logits(items[i][0]).data) == items[i][1])
                         for i in valid_idx)
        log.append({
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "train_acc": hits / len(train_idx),
            "valid_acc": valid_hits / len(valid_idx),
            "wall_s": time.perf_counter() - started,
        })
    return model, log


# ---------------------------------------------------------------------------
# embedding archive (binary + JSONL mirror)
# ---------------------------------------------------------------------------

ARCHIVE_MAGIC = b"TSEEMB01"


def save_embedding_archive(path, embeddings: list[Embedding],
                           jsonl_mirror: bool = True) -> None:
    if not embeddings:
        raise DataError("refusing to write an empty embedding archive")
    dim = len(embeddings[0].vector)
    out = [ARCHIVE_MAGIC, struct.pack("<II", len(embeddings), dim)]
    for emb in embeddings:
        if len(emb.vector) != dim:
            raise DataError(f"embedding dim {len(emb.vector)} != archive dim {dim}")
        spk = (emb.speaker_id or "").encode("utf-8")
        out.append(struct.pack("<H", len(spk)))
        out.append(spk)
        out.append(np.asarray(emb.vector, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(out))
    if jsonl_mirror:
        with open(str(path) + ".jsonl", "w", encoding="utf-8") as fh:
            for emb in embeddings:
                fh.write(json.dumps({"speaker": emb.speaker_id, "kind": emb.kind,
                                     "vector": np.asarray(emb.vector, dtype=np.
                                                          float32).tolist()}) + "\n")


def load_embedding_archive(path) -> list[Embedding]:
    raw = Path(path).read_bytes()
    if len(raw) < len(ARCHIVE_MAGIC) + 8 or raw[:len(ARCHIVE_MAGIC)] != ARCHIVE_MAGIC:
        raise DataError(f"{path}: not an embedding archive (bad magic)")
    count, dim = struct.unpack_from("<II", raw, len(ARCHIVE_MAGIC))
    pos = len(ARCHIVE_MAGIC) + 8
    embeddings = []
    for _ in range(count):
        (slen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        spk = raw[pos:pos + slen].decode("utf-8")
        pos += slen
        vec = np.frombuffer(raw[pos:pos + 4 * dim], dtype="<f4").astype(np.float64)
        if len(vec) != dim:
            raise DataError(f"{path}: truncated record")
        pos += 4 * dim
        embeddings.append(Embedding(vector=vec, kind="archived", speaker_id=spk or None))
    return embeddings
