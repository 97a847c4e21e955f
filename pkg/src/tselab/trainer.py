"""Optimization: differentiable SI-SDR loss, Adam, plateau LR schedule, and
the target-extraction training loop.

Reproducibility contract: every stochastic choice in epoch ``e`` is drawn
from ``default_rng([seed, e])``, so resuming from a checkpoint replays the
exact example stream of an unbroken run.  Checkpoints carry parameters,
Adam moments, and the scheduler state.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
import numpy as np

from . import tensor as tt
from .audio import Manifest, MixtureExample, UtterancePool, dynamic_mix, read_wav
from .ckpt import load_checkpoint, save_checkpoint
from .errors import DataError, DegenerateSignalError, NumericalError, ShapeError
from .tensor import Tape, Tensor

_LOG10 = math.log(10.0)


def si_sdr_loss(target, estimate: Tensor, eps: float = 1e-8) -> Tensor:
    """Negative SI-SDR as a differentiable scalar; both signals are
    zero-meaned inside, the log ratio is eps-guarded so a perfect estimate
    yields a large finite negative value."""
    ref = np.asarray(getattr(target, "samples", target), dtype=np.float64)
    if estimate.shape != ref.shape:
        raise ShapeError(f"si_sdr_loss: target {ref.shape} vs estimate "
                         f"{estimate.shape}")
    ref = ref - ref.mean()
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise DegenerateSignalError("si_sdr_loss: silent target")
    ref_t = Tensor(ref)
    est = tt.sub(estimate, tt.tmean(estimate))
    alpha = tt.scale(tt.tsum(tt.mul(est, ref_t)), 1.0 / ref_energy)
    projection = tt.mul(ref_t, alpha)
    noise = tt.sub(est, projection)
    num = tt.add(tt.tsum(tt.mul(projection, projection)), Tensor(eps))
    den = tt.add(tt.tsum(tt.mul(noise, noise)), Tensor(eps))
    return tt.scale(tt.sub(tt.log(num), tt.log(den)), -10.0 / _LOG10)


def si_sdr_value(target: np.ndarray, estimate: np.ndarray, eps: float = 1e-8) -> float:
    """The eps-guarded SI-SDR the loss optimizes, as a plain float (used for
    validation so the schedule signal is always finite)."""
    ref = np.asarray(target, dtype=np.float64)
    ref = ref - ref.mean()
    est = np.asarray(estimate, dtype=np.float64)
    est = est - est.mean()
    alpha = float(np.dot(est, ref)) / float(np.dot(ref, ref))
    projection = alpha * ref
    noise = est - projection
    return 10.0 * math.log10((float(np.dot(projection, projection)) + eps)
                             / (float(np.dot(noise, noise)) + eps))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float,
              clip_norm: float | None = None, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in place; optional global-norm clipping of
    the gradients first.  NaN gradients abort, naming the parameter."""
    grads: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if np.any(np.isnan(g)):
            raise NumericalError(f"NaN gradient in parameter {name!r}")
        grads[name] = g
    if clip_norm is not None:
        total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if total > clip_norm:
            factor = clip_norm / total
            grads = {k: g * factor for k, g in grads.items()}
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# plateau schedule
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr_init: float = 1.5e-4
    batch_size: int = 1           # utterance-level training
    plateau_patience_epochs: int = 2
    lr_factor: float = 0.5
    max_epochs: int = 100
    grad_clip_norm: float = 5.0
    seed: int = 0
    dynamic_mixing: bool = False
    warm_epochs: int = 20         # no LR decay during the warm period
    improve_eps: float = 1e-6
    snr_min: float = 0.0
    snr_max: float = 5.0
    examples_per_epoch: int | None = None  # required for dynamic mixing

    def __post_init__(self):
        if self.lr_init <= 0:
            raise DataError(f"lr_init must be positive, got {self.lr_init}")
        if self.plateau_patience_epochs < 1:
            raise DataError("plateau patience must be >= 1")
        if not 0.0 < self.lr_factor < 1.0:
            raise DataError(f"lr_factor must be in (0, 1), got {self.lr_factor}")


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    current_lr: float = 0.0
    best_valid_loss: float = math.inf
    epochs_since_improvement: int = 0
    n_decays: int = 0


def plateau_schedule(state: TrainState, valid_loss: float, cfg: TrainConfig) -> float:
    """Called once at the end of each epoch (state.epoch already set).
    Halves the LR after `patience` consecutive non-improving epochs, but never
    inside the warm period."""
    if valid_loss < state.best_valid_loss - cfg.improve_eps:
        state.best_valid_loss = valid_loss
        state.epochs_since_improvement = 0
    else:
        state.epochs_since_improvement += 1
    if (state.epoch > cfg.warm_epochs
            and state.epochs_since_improvement >= cfg.plateau_patience_epochs):
        state.current_lr *= cfg.lr_factor
        state.n_decays += 1
        state.epochs_since_improvement = 0
    return state.current_lr


# ---------------------------------------------------------------------------
# TSE training loop
# ---------------------------------------------------------------------------


def load_manifest_examples(manifest: Manifest) -> list[MixtureExample]:
    """Materialize manifest rows; the interferer is recovered as
    mixture - target (exact, mixtures are built as target + interferer)."""
    from .audio import Waveform

    examples = []
    for e in manifest.entries:
        mixture = read_wav(manifest.resolve(e.mix))
        target = read_wav(manifest.resolve(e.target))
        examples.append(MixtureExample(
            mixture=mixture,
            target=target,
            interferer=Waveform(mixture.samples - target.samples,
                                mixture.sample_rate),
            enrollment=read_wav(manifest.resolve(e.enroll)),
            target_speaker_id=e.speaker,
            snr_db=e.snr_db,
        ))
    return examples


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    valid_loss: float
    lr: float
    wall_s: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    log: list[EpochLog] = field(default_factory=list)
    state: TrainState = field(default_factory=TrainState)


def _as_examples(source) -> list[MixtureExample]:
    if isinstance(source, Manifest):
        return load_manifest_examples(source)
    return list(source)


def train_tse(model, train_source, valid_source, cue_fn, cfg: TrainConfig,
              ckpt_path=None, log_path=None, resume_from=None) -> TrainResult:
    """Train a separator with per-utterance Adam steps and a plateau schedule.

    ``train_source`` is a list of MixtureExamples, a Manifest, or (with
    dynamic mixing) an UtterancePool; ``cue_fn`` maps an enrollment Waveform
    to the speaker-cue vector.  The best-validation checkpoint (parameters +
    Adam moments + schedule state) is written to ``ckpt_path`` and a rolling
    ``<ckpt_path>.last`` enables exact resumption.
    """
    if cfg.dynamic_mixing:
        if not isinstance(train_source, UtterancePool):
            raise DataError("dynamic mixing requires an UtterancePool")
        if not cfg.examples_per_epoch:
            raise DataError("dynamic mixing requires examples_per_epoch")
        pool = train_source
        fixed_train = None
    else:
        pool = None
        fixed_train = _as_examples(train_source)
        if not fixed_train:
            raise DataError("empty training set")
    valid_examples = _as_examples(valid_source)
    if not valid_examples:
        raise DataError("empty validation set")

    state = TrainState(current_lr=cfg.lr_init)
    adam = AdamState.for_params(model.params)
    result = TrainResult(state=state)
    if resume_from is not None:
        _load_train_checkpoint(resume_from, model, adam, state)
    elif hasattr(model, "verify_gradient_flow"):
        # once, at initialization: every parameter must receive gradient
        model.verify_gradient_flow(seed=cfg.seed)
        for p in model.params.values():
            p.zero_grad()

    cue_cache: dict[int, np.ndarray] = {}

    def cue_of(example: MixtureExample, key: int | None) -> np.ndarray:
        if key is not None and key in cue_cache:
            return cue_cache[key]
        cue = np.asarray(cue_fn(example.enrollment), dtype=np.float64)
        if key is not None:
            cue_cache[key] = cue
        return cue

    valid_cues = [cue_of(ex, None) for ex in valid_examples]

    def validation_loss() -> float:
        values = []
        for ex, cue in zip(valid_examples, valid_cues):
            est = model.extract(ex.mixture, cue)
            values.append(-si_sdr_value(ex.target.samples, est.samples))
        return float(np.mean(values))

    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(state.epoch + 1, cfg.max_epochs + 1):
            started = time.perf_counter()
            epoch_rng = np.random.default_rng([cfg.seed & 0x7FFFFFFF, epoch])
            if cfg.dynamic_mixing:
                batch = [dynamic_mix(pool, epoch_rng, cfg.snr_min, cfg.snr_max)
                         for _ in range(cfg.examples_per_epoch)]
                keys = [None] * len(batch)
            else:
                order = epoch_rng.permutation(len(fixed_train))
                batch = [fixed_train[i] for i in order]
                keys = [int(i) for i in order]

            losses = []
            for example, key in zip(batch, keys):
                cue = cue_of(example, key)
                for p in model.params.values():
                    p.zero_grad()
                with Tape() as tape:
                    est = model.estimate_tensor(example.mixture.samples, cue)
                    target = example.target.samples[:est.shape[0]]
                    loss = si_sdr_loss(target, est)
                tape.backward(loss)
                adam_step(model.params, adam, lr=state.current_lr,
                          clip_norm=cfg.grad_clip_norm)
                state.step += 1
                losses.append(loss.item())

            state.epoch = epoch
            valid_loss = validation_loss()
            improved = valid_loss < state.best_valid_loss - cfg.improve_eps
            plateau_schedule(state, valid_loss, cfg)
            row = EpochLog(epoch=epoch, train_loss=float(np.mean(losses)),
                           valid_loss=valid_loss, lr=state.current_lr,
                           wall_s=time.perf_counter() - started)
            result.log.append(row)
            if log_fh:
                log_fh.write(json.dumps(row.as_dict()) + "\n")
                log_fh.flush()
            if ckpt_path is not None:
                _save_train_checkpoint(str(ckpt_path) + ".last", model, adam,
                                       state, cfg)
                if improved:
                    _save_train_checkpoint(ckpt_path, model, adam, state, cfg)
    finally:
        if log_fh:
            log_fh.close()
    return result


def _save_train_checkpoint(path, model, adam: AdamState, state: TrainState,
                           cfg: TrainConfig) -> None:
    blobs: dict[str, np.ndarray] = {}
    for name, p in model.params.items():
        blobs[f"param.{name}"] = p.data
        blobs[f"adam.m.{name}"] = adam.m[name]
        blobs[f"adam.v.{name}"] = adam.v[name]
    save_checkpoint(path, kind="separator-train",
                    config={"separator": model.config_dict(),
                            "train": asdict(cfg)},
                    blobs=blobs,
                    meta={"state": asdict(state), "adam_t": adam.t,
                          "dynamic_mixing": cfg.dynamic_mixing})


def _load_train_checkpoint(path, model, adam: AdamState, state: TrainState) -> None:
    _, _, meta, blobs = load_checkpoint(path, expect_kind="separator-train")
    for name, p in model.params.items():
        p.data = blobs[f"param.{name}"]
        adam.m[name] = blobs[f"adam.m.{name}"]
        adam.v[name] = blobs[f"adam.v.{name}"]
    adam.t = int(meta["adam_t"])
    for key, value in meta["state"].items():
        setattr(state, key, value)
