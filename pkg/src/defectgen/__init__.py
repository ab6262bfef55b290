"""Defect-sample synthesis with a trimap-controlled latent diffusion model.

Subpackages cover the diffusion arithmetic (:mod:`defectgen.schedule`), the
trainable networks (:mod:`defectgen.models`), trimap construction
(:mod:`defectgen.trimap`), training and generation loops
(:mod:`defectgen.pipeline`), anomaly-localization metrics
(:mod:`defectgen.metrics`), the toy-benchmark evaluation harness
(:mod:`defectgen.harness`), and the command line (:mod:`defectgen.cli`).
"""

__version__ = "0.1.0"
