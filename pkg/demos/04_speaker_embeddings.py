"""Speaker embeddings: pooling heads, classification training, archives.

Trains a small embedder on synthetic speakers and shows that held-out
utterances cluster by speaker under cosine similarity.
"""

import tempfile
from pathlib import Path

import numpy as np

from tselab.audio import make_speaker_profiles, synth_speaker_utterance
from tselab.embedder import (EmbedderConfig, EmbedderTrainConfig, LogMelConfig,
                             gaussian_posterior_pool, load_embedding_archive,
                             logmel, save_embedding_archive, stats_pool,
                             train_embedder)
from tselab.metrics import cosine_score
from tselab.tensor import Tensor

print("== log-mel front end ==")
profile = make_speaker_profiles(1, seed=3)[0]
wave = synth_speaker_utterance(profile, 1.0, seed=0)
feats = logmel(wave, LogMelConfig(n_mels=16))
print(f"1 s at 8 kHz with 25 ms / 10 ms windows -> {feats.frames.shape} frames")

print("\n== the two pooling heads ==")
frames = Tensor(np.array([[0.0], [2.0]]))
print(f"stats_pool of frames [0, 2]: {stats_pool(frames).data}  (mean, std)")
z = Tensor(np.array([[1.0], [3.0]]))
log_prec = Tensor(np.zeros((2, 1)))
print(f"gaussian posterior mean of values [1, 3] at unit precision: "
      f"{gaussian_posterior_pool(z, log_prec).data}  (= 4/3: prior pulls to 0)")

print("\n== train a small xi-vector-style embedder ==")


class InMemoryPool:
    def __init__(self, waves):
        self.waves = waves
        self.by_speaker = {s: [(s, i) for i in range(len(u))] for s, u in waves.items()}

    @property
    def speakers(self):
        return sorted(self.by_speaker)

    def load(self, key):
        return self.waves[key[0]][key[1]]


profiles = make_speaker_profiles(4, seed=5)
pool = InMemoryPool({f"spk{i}": [synth_speaker_utterance(p, 0.4, seed=u)
                                 for u in range(10)]
                     for i, p in enumerate(profiles)})
config = EmbedderConfig(logmel=LogMelConfig(n_mels=16), channels=12, emb_dim=8,
                        pooling="gaussian")
model, log = train_embedder(pool, config, EmbedderTrainConfig(epochs=10, lr=2e-3,
                                                              seed=0))
print(f"epoch 1:  train acc {log[0]['train_acc']:.2f}")
print(f"epoch 10: train acc {log[-1]['train_acc']:.2f}, "
      f"valid acc {log[-1]['valid_acc']:.2f}")

print("\n== held-out utterances cluster by speaker ==")
held = {i: [model.embed(synth_speaker_utterance(p, 0.4, seed=50 + u), f"spk{i}")
            for u in range(3)] for i, p in enumerate(profiles)}
intra = [cosine_score(a.vector, b.vector)
         for i in held for a in held[i] for b in held[i] if a is not b]
inter = [cosine_score(a.vector, b.vector)
         for i in held for j in held if i < j for a in held[i] for b in held[j]]
print(f"mean cosine within speaker:  {np.mean(intra):+.3f}")
print(f"mean cosine across speakers: {np.mean(inter):+.3f}")

print("\n== binary archive round trip ==")
flat = [e for embs in held.values() for e in embs]
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "embeddings.bin"
    save_embedding_archive(path, flat)
    loaded = load_embedding_archive(path)
    print(f"wrote {len(flat)} embeddings, read back {len(loaded)}; "
          f"first speaker: {loaded[0].speaker_id}; "
          f"JSONL mirror: {path.with_suffix('.bin.jsonl').name} alongside")
