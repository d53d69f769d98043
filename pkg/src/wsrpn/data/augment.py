"""Training-time augmentation: brightness/contrast jitter and Gaussian blur,
each applied with probability 0.5. Both are geometry-preserving, so labels
and boxes never change. Validation and test data are never augmented.
"""

import numpy as np
from scipy.ndimage import gaussian_filter


def augment(image: np.ndarray, rng) -> np.ndarray:
    """Randomly jittered/blurred copy of ``image``, deterministic in rng.

    ``rng`` is a numpy Generator or an int seed. Jitter scales contrast
    around the image mean and brightness by factors in [0.8, 1.2]; blur uses
    a Gaussian kernel with std uniform in [0.1, 2.0] pixels.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    out = np.asarray(image, dtype=float)

    if rng.uniform() < 0.5:
        contrast = rng.uniform(0.8, 1.2)
        brightness = rng.uniform(0.8, 1.2)
        m = out.mean()
        out = np.clip((m + (out - m) * contrast) * brightness, 0.0, 1.0)
    if rng.uniform() < 0.5:
        sigma = rng.uniform(0.1, 2.0)
        out = np.clip(gaussian_filter(out, sigma, mode="reflect"), 0.0, 1.0)
    return out
