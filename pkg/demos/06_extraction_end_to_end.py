"""End-to-end target speaker extraction on a two-speaker fixture.

Trains the desk-preset separator to overfit four training examples (about
half a minute on a laptop CPU), then shows that the extracted signal follows
the enrollment cue: swapping the cue swaps which speaker comes out.  Writes
the audio under demo_output/.
"""

import time
from pathlib import Path

import numpy as np

from tselab.audio import (MixtureExample, make_speaker_profiles, mix_at_snr,
                          synth_speaker_utterance, write_wav)
from tselab.metrics import si_sdr, si_sdr_improvement
from tselab.separator import SeparatorModel, desk_config
from tselab.trainer import TrainConfig, train_tse

out = Path(__file__).resolve().parent.parent / "demo_output"
out.mkdir(exist_ok=True)

print("== fixture: 2 speakers, 2 mixtures, both extraction directions ==")
profiles = make_speaker_profiles(2, seed=2)
utts = {s: [synth_speaker_utterance(p, 0.3, seed=u) for u in range(3)]
        for s, p in enumerate(profiles)}
examples = []
for (ua, ub), snr in zip([(0, 0), (1, 1)], (1.0, 4.0)):
    mixed = mix_at_snr(utts[0][ua], utts[1][ub], snr_db=snr)
    examples.append(MixtureExample(mixed.mixture, mixed.target, mixed.interferer,
                                   utts[0][2], "speaker0", snr))
    examples.append(MixtureExample(mixed.mixture, mixed.interferer, mixed.target,
                                   utts[1][2], "speaker1", snr))


def spectral_cue(waveform):
    """Cheap enrollment signature (stand-in for a trained embedder here)."""
    spec = np.abs(np.fft.rfft(waveform.samples, n=512))[:32]
    return spec / (np.linalg.norm(spec) + 1e-9)


print("\n== train the desk-preset separator (D=16, K=8, N=1) ==")
model = SeparatorModel(desk_config(cue_dim=32), seed=7)
started = time.perf_counter()
result = train_tse(model, examples, examples[:2], spectral_cue,
                   TrainConfig(lr_init=2e-3, max_epochs=80, seed=3))
print(f"80 epochs in {time.perf_counter() - started:.0f}s; "
      f"train -SI-SDR went {result.log[0].train_loss:.1f} -> "
      f"{result.log[-1].train_loss:.1f} dB")

print("\n== extraction follows the cue ==")
for i, example in enumerate(examples):
    estimate = model.extract(example.mixture, spectral_cue(example.enrollment))
    right = si_sdr(example.target.samples, estimate.samples)
    wrong = si_sdr(example.interferer.samples, estimate.samples)
    gain = si_sdr_improvement(example.target.samples, estimate.samples,
                              example.mixture.samples)
    print(f"example {i} (target {example.target_speaker_id}): "
          f"SI-SDRi {gain:+5.1f} dB | vs own target {right:+5.1f} dB, "
          f"vs other speaker {wrong:+5.1f} dB")
    if i == 0:
        write_wav(out / "demo_mixture.wav", example.mixture)
        write_wav(out / "demo_target.wav", example.target)
        write_wav(out / "demo_extracted.wav", estimate)

swapped = model.extract(examples[0].mixture, spectral_cue(examples[1].enrollment))
write_wav(out / "demo_extracted_swapped_cue.wav", swapped)
print(f"\nwrote mixture/target/extracted (and a swapped-cue extraction) to {out}")
