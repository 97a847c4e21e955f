"""tselab: a desk-scale target speaker extraction laboratory.

Submodules: :mod:`tselab.tensor` (tape autodiff), :mod:`tselab.audio`
(synthesis, WAV I/O, mixing), :mod:`tselab.metrics` (SI-SDR/SDR, EER/minDCF),
:mod:`tselab.embedder` (x-/xi-vector style speaker embeddings),
:mod:`tselab.lda` (sparse LDA cues), :mod:`tselab.separator` (dual-path
transformer with cross-attention cue fusion), :mod:`tselab.trainer`
(SI-SDR training loop), and :mod:`tselab.cli` (the ``tse-lab`` command).
"""

__version__ = "0.1.0"
