"""Joint-modal label denoising for weakly supervised audio-visual parsing.

Subpackages by role:

- ``tensorcore``: numerics (softmax, attention, BCE, finite differences, RNG)
- ``model``: the parsing network, its analytic backward pass and checkpoints
- ``denoiser``: noise-ratio estimation and the batch label-denoising steps
- ``synthgen``: synthetic datasets with modality-specific label noise
- ``metrics``: segment/event F-scores and denoising precision/recall
- ``cli`` / ``harness``: the experiment pipeline and benchmark grid
"""

__version__ = "0.1.0"
