"""What the evaluation metrics measure, on controlled signals."""

import numpy as np

from tselab.metrics import TrialScores, eer, min_dcf, sdr, si_sdr, si_sdr_improvement

rng = np.random.default_rng(1)
clean = rng.standard_normal(8000)
noise = rng.standard_normal(8000)

print("== SI-SDR vs SDR ==")
estimate = clean + 0.3 * noise
print(f"noisy estimate:      SI-SDR {si_sdr(clean, estimate):6.2f} dB, "
      f"SDR {sdr(clean, estimate):6.2f} dB")
print(f"estimate scaled x10: SI-SDR {si_sdr(clean, 10 * estimate):6.2f} dB "
      f"(unchanged), SDR {sdr(clean, 10 * estimate):6.2f} dB (collapses)")
print(f"perfect estimate:    SI-SDR {si_sdr(clean, clean.copy())} (sentinel)")
print(f"doubled clean:       SI-SDR {si_sdr(clean, 2 * clean)} but "
      f"SDR {sdr(clean, 2 * clean):.2f} dB")

print("\n== improvement over the mixture ==")
mixture = clean + noise
print(f"mixture as estimate: SI-SDRi {si_sdr_improvement(clean, mixture, mixture):+.3f} dB")
print(f"denoised estimate:   SI-SDRi {si_sdr_improvement(clean, estimate, mixture):+.3f} dB")

print("\n== EER / minDCF on verification trials ==")
separated = TrialScores([0.9, 0.8, 0.2, 0.1], [True, True, False, False])
print(f"perfectly separated scores: EER {eer(separated):.3f}, "
      f"minDCF {min_dcf(separated):.3f}")

# a tied crossing: the frontier interpolation lands between operating points
crossed = TrialScores([0.9, 0.8, 0.85, 0.1], [True, True, False, False])
print(f"one error on each side:     EER {eer(crossed):.3f} "
      f"(interpolated, not a raw operating point)")

n = 2000
labels = np.arange(n) % 2 == 0
scores = rng.standard_normal(n) + 1.2 * labels
trials = TrialScores(scores, labels)
print(f"overlapping gaussians:      EER {eer(trials):.3f}, "
      f"minDCF {min_dcf(trials):.3f}")
monotone = TrialScores(np.tanh(scores) * 3 + 1, labels)
print(f"after monotone transform:   EER {eer(monotone):.3f} (invariant)")
