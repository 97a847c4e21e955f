"""Target-speaker extraction network.

Pipeline: strided conv encoder -> chunked dual-path masking module -> mask ->
transposed-conv decoder.  The masking module alternates intra-chunk
(short-range, attend over the K frames of each chunk) and inter-chunk
(long-range, attend over the S chunks) transformer stacks N times.  The first
layer of every stack is multi-head cross attention that fuses the broadcast
speaker cue into queries, keys and values; the remaining layers are plain
self-attention.  With N blocks the cue is therefore injected at 2N sites,
which the model counts per forward pass (``fusion_calls``).

Passing ``cue=None`` runs the cue-free degenerate separator: fusion layers
reduce to plain self-attention, bit-for-bit identical to a model whose
cue-side projections are all zero.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tt
from .audio import Waveform
from .ckpt import load_checkpoint, save_checkpoint
from .errors import DataError, NumericalError, ShapeError
from .tensor import Tape, Tensor, custom_op

# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class SeparatorConfig:
    enc_kernel: int = 16
    enc_stride: int = 8
    feature_dim: int = 16        # D
    chunk_len: int = 8           # K
    chunk_overlap: float = 0.5
    n_blocks: int = 1            # N: intra+inter repetitions
    n_ca_layers: int = 1         # cross-attention layers per stack
    n_sa_layers: int = 3         # self-attention layers per stack
    n_heads: int = 2
    ff_dim: int = 64
    cue_dim: int = 32
    mask_nonlinearity: str = "relu"  # "relu" | "sigmoid"
    normalize_cue: bool = False

    def __post_init__(self):
        if self.chunk_len < 2:
            raise DataError(f"chunk_len must be >= 2, got {self.chunk_len}")
        if not 0.0 < self.chunk_overlap < 1.0:
            raise DataError(f"chunk_overlap must be in (0, 1), got {self.chunk_overlap}")
        if self.n_ca_layers < 1:
            raise DataError("at least one cross-attention layer is required "
                            "(the cue is fused at the first layer)")
        if self.feature_dim % self.n_heads != 0:
            raise DataError(f"feature_dim {self.feature_dim} not divisible by "
                            f"n_heads {self.n_heads}")
        if self.mask_nonlinearity not in ("relu", "sigmoid"):
            raise DataError(f"unknown mask nonlinearity {self.mask_nonlinearity!r}")


def desk_config(cue_dim: int = 32, **overrides) -> SeparatorConfig:
    """Small preset used by all tests and the acceptance suite."""
    base = dict(feature_dim=16, chunk_len=8, n_blocks=1, n_heads=2, ff_dim=64,
                cue_dim=cue_dim)
    base.update(overrides)
    return SeparatorConfig(**base)


def paper_config(cue_dim: int = 512, **overrides) -> SeparatorConfig:
    """Full-scale preset: D=256, K=250, N=4, 8 heads."""
    base = dict(feature_dim=256, chunk_len=250, n_blocks=4, n_heads=8,
                ff_dim=1024, cue_dim=cue_dim)
    base.update(overrides)
    return SeparatorConfig(**base)


PRESETS = {"desk": desk_config, "paper": paper_config}


# ---------------------------------------------------------------------------
# chunking
# ---------------------------------------------------------------------------


@dataclass
class ChunkTensor:
    """[B, S, K, D] chunk layout plus what is needed to invert it exactly."""

    data: Tensor
    orig_len: int
    hop: int

    @property
    def n_chunks(self) -> int:
        return self.data.shape[1]

    @property
    def chunk_len(self) -> int:
        return self.data.shape[2]


def _chunk_geometry(t_len: int, chunk_len: int, hop: int):
    t_pad = chunk_len if t_len <= chunk_len else (
        chunk_len + hop * math.ceil((t_len - chunk_len) / hop))
    n_chunks = (t_pad - chunk_len) // hop + 1
    idx = hop * np.arange(n_chunks)[:, None] + np.arange(chunk_len)[None, :]
    return t_pad, n_chunks, idx


def chunk(h: Tensor, chunk_len: int, hop: int | None = None,
          overlap: float = 0.5) -> ChunkTensor:
    """Segment [T, D] into overlapping chunks [1, S, K, D], zero-padding the
    tail so every frame is covered and the layout inverts exactly."""
    if h.ndim != 2:
        raise ShapeError(f"chunk: expected [T, D], got {h.shape}")
    if chunk_len < 2:
        raise DataError(f"chunk_len must be >= 2, got {chunk_len}")
    if hop is None:
        hop = int(round(chunk_len * (1.0 - overlap)))
    if hop < 1 or hop > chunk_len:
        raise DataError(f"hop must be in [1, chunk_len], got {hop}")
    t_len, dim = h.shape
    t_pad, n_chunks, idx = _chunk_geometry(t_len, chunk_len, hop)

    padded = np.zeros((t_pad, dim))
    padded[:t_len] = h.data
    out = padded[idx][None]  # [1, S, K, D]

    def _vjp(g: np.ndarray) -> np.ndarray:
        acc = np.zeros((t_pad, dim))
        np.add.at(acc, idx, g[0])
        return acc[:t_len]

    return ChunkTensor(data=custom_op(out, [h], [_vjp]), orig_len=t_len, hop=hop)


def overlap_add(ct: ChunkTensor) -> Tensor:
    """Exact inverse of :func:`chunk`: overlapping frames are summed and
    divided by their coverage counts, padding is dropped."""
    _, n_chunks, chunk_len, dim = ct.data.shape
    t_len, hop = ct.orig_len, ct.hop
    t_pad = (n_chunks - 1) * hop + chunk_len
    idx = hop * np.arange(n_chunks)[:, None] + np.arange(chunk_len)[None, :]
    counts = np.bincount(idx.ravel(), minlength=t_pad).astype(np.float64)

    acc = np.zeros((t_pad, dim))
    np.add.at(acc, idx, ct.data.data[0])
    out = (acc / counts[:, None])[:t_len]

    def _vjp(g: np.ndarray) -> np.ndarray:
        spread = np.zeros((t_pad, dim))
        spread[:t_len] = g / counts[:t_len, None]
        return spread[idx][None]

    return custom_op(out, [ct.data], [_vjp])


# ---------------------------------------------------------------------------
# transformer pieces
# ---------------------------------------------------------------------------


def _scaled_param(rng, shape, factor: float) -> Tensor:
    t = tt.parameter(rng, shape)
    t.data = t.data * factor
    return t


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim // 2)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : dim - dim // 2])
    return pe


class _AttentionLayer:
    """One transformer encoder layer: (cross- or self-) attention sublayer
    then a position-wise feed-forward sublayer, each with residual + LN."""

    def __init__(self, model: "SeparatorModel", prefix: str, cross: bool):
        self.model = model
        self.prefix = prefix
        self.cross = cross
        cfg = model.config
        d, ff = cfg.feature_dim, cfg.ff_dim
        rng = model._rng
        p = model._p
        p(f"{prefix}.q_w", tt.parameter(rng, (d, d)))
        p(f"{prefix}.k_w", tt.parameter(rng, (d, d)))
        p(f"{prefix}.v_w", tt.parameter(rng, (d, d)))
        # residual branches start small so each layer is near-identity at init
        p(f"{prefix}.out_w", _scaled_param(rng, (d, d), 0.1))
        p(f"{prefix}.out_b", Tensor(np.zeros(d), requires_grad=True))
        if cross:
            p(f"{prefix}.cue_w", tt.parameter(rng, (cfg.cue_dim, d)))
            p(f"{prefix}.cue_b", Tensor(np.zeros(d), requires_grad=True))
            p(f"{prefix}.q_cue", tt.parameter(rng, (d, d)))
            p(f"{prefix}.k_cue", tt.parameter(rng, (d, d)))
            p(f"{prefix}.v_cue", tt.parameter(rng, (d, d)))
        p(f"{prefix}.ln1_g", Tensor(np.ones(d), requires_grad=True))
        p(f"{prefix}.ln1_b", Tensor(np.zeros(d), requires_grad=True))
        p(f"{prefix}.ff1_w", tt.parameter(rng, (d, ff)))
        p(f"{prefix}.ff1_b", Tensor(np.zeros(ff), requires_grad=True))
        p(f"{prefix}.ff2_w", _scaled_param(rng, (ff, d), 0.1))
        p(f"{prefix}.ff2_b", Tensor(np.zeros(d), requires_grad=True))
        p(f"{prefix}.ln2_g", Tensor(np.ones(d), requires_grad=True))
        p(f"{prefix}.ln2_b", Tensor(np.zeros(d), requires_grad=True))

    def _w(self, name: str) -> Tensor:
        return self.model.params[f"{self.prefix}.{name}"]

    def _heads(self, x2d: Tensor, batch_shape: tuple) -> Tensor:
        cfg = self.model.config
        d_head = cfg.feature_dim // cfg.n_heads
        b, n, length = batch_shape
        x = tt.reshape(x2d, (b, n, length, cfg.n_heads, d_head))
        return tt.transpose(x, (0, 1, 3, 2, 4))  # [B, n, H, L, d_head]

    def __call__(self, x: Tensor, cue_row: Tensor | None) -> Tensor:
        cfg = self.model.config
        b, n, length, d = x.shape
        flat = tt.reshape(x, (b * n * length, d))

        q = tt.matmul(flat, self._w("q_w"))
        k = tt.matmul(flat, self._w("k_w"))
        v = tt.matmul(flat, self._w("v_w"))
        if self.cross and cue_row is not None:
            self.model.fusion_calls += 1
            cue_b = self._w("cue_b")
            e = tt.add(tt.matmul(cue_row, self._w("cue_w")),
                       tt.reshape(cue_b, (1, d)))  # [1, D]
            q = tt.add(q, tt.expand(tt.matmul(e, self._w("q_cue")), q.shape))
            k = tt.add(k, tt.expand(tt.matmul(e, self._w("k_cue")), k.shape))
            v = tt.add(v, tt.expand(tt.matmul(e, self._w("v_cue")), v.shape))

        d_head = d // cfg.n_heads
        qh = self._heads(q, (b, n, length))
        kh = self._heads(k, (b, n, length))
        vh = self._heads(v, (b, n, length))
        scores = tt.scale(tt.matmul(qh, tt.transpose(kh, (0, 1, 2, 4, 3))),
                          1.0 / math.sqrt(d_head))
        weights = tt.softmax(scores, axis=-1)
        ctx = tt.matmul(weights, vh)                      # [B, n, H, L, d_head]
        ctx = tt.transpose(ctx, (0, 1, 3, 2, 4))          # [B, n, L, H, d_head]
        ctx2d = tt.reshape(ctx, (b * n * length, d))
        out_b = self._w("out_b")
        attn = tt.add(tt.matmul(ctx2d, self._w("out_w")),
                      tt.expand(tt.reshape(out_b, (1, d)), (b * n * length, d)))
        x = tt.layernorm(tt.add(x, tt.reshape(attn, (b, n, length, d))),
                         self._w("ln1_g"), self._w("ln1_b"))

        flat = tt.reshape(x, (b * n * length, d))
        hidden = tt.relu(tt.add(tt.matmul(flat, self._w("ff1_w")),
                                tt.expand(tt.reshape(self._w("ff1_b"), (1, cfg.ff_dim)),
                                          (b * n * length, cfg.ff_dim))))
        ff = tt.add(tt.matmul(hidden, self._w("ff2_w")),
                    tt.expand(tt.reshape(self._w("ff2_b"), (1, d)),
                              (b * n * length, d)))
        return tt.layernorm(tt.add(x, tt.reshape(ff, (b, n, length, d))),
                            self._w("ln2_g"), self._w("ln2_b"))


class _TransformerStack:
    """L_CA fusion layers followed by L_SA self-attention layers; sinusoidal
    positions are added once at the stack input."""

    def __init__(self, model: "SeparatorModel", prefix: str):
        cfg = model.config
        self.layers = [
            _AttentionLayer(model, f"{prefix}.layer{i}", cross=i < cfg.n_ca_layers)
            for i in range(cfg.n_ca_layers + cfg.n_sa_layers)
        ]

    def __call__(self, x: Tensor, cue_row: Tensor | None) -> Tensor:
        b, n, length, d = x.shape
        pe = sinusoidal_encoding(length, d)
        x = tt.add(x, tt.expand(Tensor(pe[None, None]), x.shape))
        for layer in self.layers:
            x = layer(x, cue_row)
        return x


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------


class SeparatorModel:
    def __init__(self, config: SeparatorConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.fusion_calls = 0
        self._rng = np.random.default_rng([seed & 0x7FFFFFFF, 0x5E9])
        d, k = config.feature_dim, config.enc_kernel
        self._p("enc.kernel", tt.parameter(self._rng, (d, 1, k), fan_in=k, fan_out=d))
        self.blocks = [
            (_TransformerStack(self, f"block{i}.intra"),
             _TransformerStack(self, f"block{i}.inter"))
            for i in range(config.n_blocks)
        ]
        self._p("post.w", tt.parameter(self._rng, (d, d)))
        self._p("post.b", Tensor(np.zeros(d), requires_grad=True))
        self._p("out.w", tt.parameter(self._rng, (d, d)))
        # positive bias: the initial mask is close to a pass-through, so the
        # untrained model starts near the identity system
        self._p("out.b", Tensor(np.ones(d), requires_grad=True))
        self._p("dec.kernel", tt.parameter(self._rng, (d, 1, k), fan_in=d, fan_out=k))
        del self._rng  # init-only

    def _p(self, name: str, t: Tensor) -> Tensor:
        self.params[name] = t
        return t

    def config_dict(self) -> dict:
        return asdict(self.config)

    @property
    def hop(self) -> int:
        return int(round(self.config.chunk_len * (1.0 - self.config.chunk_overlap)))

    # -- forward pieces -----------------------------------------------------

    def encode(self, samples) -> Tensor:
        """Waveform [L] -> relu(conv) features [T, D]."""
        samples = np.asarray(getattr(samples, "samples", samples), dtype=np.float64)
        if len(samples) < self.config.enc_kernel:
            raise ShapeError(f"encode: input of {len(samples)} samples shorter "
                             f"than kernel {self.config.enc_kernel}")
        x = tt.conv1d(Tensor(samples[None, :]), self.params["enc.kernel"],
                      stride=self.config.enc_stride)
        return tt.transpose(tt.relu(x))

    def _cue_row(self, cue) -> Tensor | None:
        if cue is None:
            return None
        if isinstance(cue, Tensor):
            row = tt.reshape(cue, (1, cue.shape[-1]))
        else:
            row = Tensor(np.asarray(cue, dtype=np.float64).reshape(1, -1))
        if row.shape[1] != self.config.cue_dim:
            raise ShapeError(f"cue dim {row.shape[1]} != configured "
                             f"{self.config.cue_dim}")
        if self.config.normalize_cue:
            norm = tt.sqrt(tt.add(tt.tsum(tt.mul(row, row)), Tensor(1e-12)))
            row = tt.div(row, tt.expand(tt.reshape(norm, (1, 1)), row.shape))
        return row

    def masking_forward(self, h: Tensor, cue) -> Tensor:
        """Encoder features [T, D] + cue -> single nonnegative mask [T, D]."""
        cfg = self.config
        self.fusion_calls = 0
        cue_row = self._cue_row(cue)
        ct = chunk(h, cfg.chunk_len, hop=self.hop)
        x = ct.data
        for intra, inter in self.blocks:
            x = intra(x, cue_row)                 # attend over K within chunks
            x = tt.transpose(x, (0, 2, 1, 3))     # [B, K, S, D]
            x = inter(x, cue_row)                 # attend over S across chunks
            x = tt.transpose(x, (0, 2, 1, 3))
        b, s, k_len, d = x.shape
        flat = tt.reshape(x, (b * s * k_len, d))
        flat = tt.relu(tt.add(tt.matmul(flat, self.params["post.w"]),
                              tt.expand(tt.reshape(self.params["post.b"], (1, d)),
                                        (b * s * k_len, d))))
        x = tt.reshape(flat, (b, s, k_len, d))
        frames = overlap_add(ChunkTensor(x, orig_len=ct.orig_len, hop=ct.hop))
        t_len = frames.shape[0]
        logits = tt.add(tt.matmul(frames, self.params["out.w"]),
                        tt.expand(tt.reshape(self.params["out.b"], (1, d)),
                                  (t_len, d)))
        if cfg.mask_nonlinearity == "relu":
            return tt.relu(logits)
        return tt.sigmoid(logits)

    def decode(self, masked: Tensor) -> Tensor:
        """Masked features [T, D] -> waveform [(T-1)*stride + kernel]."""
        y = tt.conv1d_transpose(tt.transpose(masked), self.params["dec.kernel"],
                                stride=self.config.enc_stride)
        return tt.reshape(y, (y.shape[1],))

    def estimate_tensor(self, samples, cue) -> Tensor:
        h = self.encode(samples)
        mask = self.masking_forward(h, cue)
        return self.decode(tt.mul(h, mask))

    def extract(self, mixture: Waveform, cue) -> Waveform:
        """Full extraction; output trimmed/zero-padded to the input length."""
        est = self.estimate_tensor(mixture.samples, cue).data
        n = len(mixture.samples)
        if len(est) >= n:
            out = est[:n]
        else:
            out = np.zeros(n)
            out[:len(est)] = est
        return Waveform(out, mixture.sample_rate)

    # -- persistence & checks -----------------------------------------------

    def save(self, path, meta: dict | None = None) -> None:
        save_checkpoint(path, kind="separator", config=self.config_dict(),
                        blobs={k: v.data for k, v in self.params.items()},
                        meta=meta or {})

    @classmethod
    def load(cls, path) -> "SeparatorModel":
        _, cfg, _, blobs = load_checkpoint(path, expect_kind="separator")
        model = cls(SeparatorConfig(**cfg))
        if set(blobs) != set(model.params):
            raise DataError("checkpoint parameters do not match the architecture")
        for name, arr in blobs.items():
            model.params[name].data = arr
        return model

    def verify_gradient_flow(self, seed: int = 0, n_samples: int = 400) -> None:
        """One random forward/backward; raises if any parameter gets no
        gradient (dead parameter)."""
        rng = np.random.default_rng([seed & 0x7FFFFFFF, 0xF10])
        samples = rng.uniform(-0.5, 0.5, n_samples)
        cue = rng.standard_normal(self.config.cue_dim)
        weights = rng.standard_normal((_enc_out_len(self.config, n_samples) - 1)
                                      * self.config.enc_stride + self.config.enc_kernel)
        for p in self.params.values():
            p.zero_grad()
        with Tape() as tape:
            est = self.estimate_tensor(samples, cue)
            loss = tt.tsum(tt.mul(est, Tensor(weights)))
        tape.backward(loss)
        dead = [name for name, p in self.params.items()
                if p.grad is None or not np.any(p.grad)]
        if dead:
            raise NumericalError(f"dead parameters (zero gradient): {dead}")


def _enc_out_len(cfg: SeparatorConfig, n_samples: int) -> int:
    return (n_samples - cfg.enc_kernel) // cfg.enc_stride + 1
