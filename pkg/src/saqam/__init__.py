"""SAQAM: a learned binaural speech quality metric.

Subpackages by concern: ``audio`` (I/O and STFT), ``binaural`` (BRIRs,
perturbations, triplets), ``model`` (the network), ``losses``, ``metric``
(D1/D2/D3 distances), ``training``, ``evaluation`` and ``enhance``.
"""

__version__ = "0.1.0"
