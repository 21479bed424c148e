"""Procedural stripe textures with injectable structural defects.

Defects keep the intensity statistics of the surrounding texture and only
break its structure (orientation, phase or frequency inside a disk), so an
untrained reconstruction model cannot tell them apart by pixel magnitude.
"""

import numpy as np

from .data import ImageSet

DEFECT_KINDS = ("rotated", "inverted", "frequency")
PERIOD = 8.0


def _stripes(size, angle, freq, phase):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return 0.5 * np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)


def _params(rng):
    return np.pi / 4 + rng.normal(0, 0.05), 2 * np.pi / PERIOD * (1 + rng.normal(0, 0.02)), rng.uniform(0, 2 * np.pi)


def texture(rng, size=64, channels=3, noise=0.03, params=None):
    """Oriented stripe texture in [-1, 1] with random phase and mild jitter."""
    angle, freq, phase = params or _params(rng)
    tint = 1.0 + rng.normal(0, 0.03, size=(channels, 1, 1))
    img = _stripes(size, angle, freq, phase)[None] * tint + rng.normal(0, noise, size=(channels, size, size))
    return np.clip(img, -1, 1)


def defective_texture(rng, size=64, channels=3, kind=None, noise=0.03):
    """A texture with one disk-shaped structural defect, plus the defect mask."""
    kind = kind or DEFECT_KINDS[rng.integers(len(DEFECT_KINDS))]
    angle, freq, phase = _params(rng)
    if kind == "rotated":
        alt = (angle + np.pi / 2, freq, phase)
    elif kind == "inverted":
        alt = (angle, freq, phase + np.pi)
    elif kind == "frequency":
        alt = (angle, 2 * freq, phase)
    else:
        raise ValueError(f"unknown defect kind {kind!r}")
    radius = rng.uniform(size / 8, size / 5)
    cy, cx = rng.uniform(radius, size - radius, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    mask = (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= radius ** 2
    pattern = np.where(mask, _stripes(size, *alt), _stripes(size, angle, freq, phase))
    tint = 1.0 + rng.normal(0, 0.03, size=(channels, 1, 1))
    img = pattern[None] * tint + rng.normal(0, noise, size=(channels, size, size))
    return np.clip(img, -1, 1), mask


def texture_dataset(n_train=200, n_test_normal=50, n_test_defect=50, size=64, channels=3, seed=0):
    """Normal-only train set and a labelled test set (label 1 = defect).

    Returns ``(train, test)`` as :class:`~densegan.data.ImageSet`; defective
    test images carry their defect kind as class tag.
    """
    rng = np.random.default_rng(seed)
    train = np.stack([texture(rng, size, channels) for _ in range(n_train)])
    normal = [texture(rng, size, channels) for _ in range(n_test_normal)]
    defects, kinds = [], []
    for k in range(n_test_defect):
        kind = DEFECT_KINDS[k % len(DEFECT_KINDS)]
        defects.append(defective_texture(rng, size, channels, kind)[0])
        kinds.append(kind)
    test = np.stack(normal + defects)
    labels = np.r_[np.zeros(n_test_normal, int), np.ones(n_test_defect, int)]
    tags = ["normal"] * n_test_normal + kinds
    ids = [f"normal_{i:03d}" for i in range(n_test_normal)] + [f"defect_{i:03d}" for i in range(n_test_defect)]
    return (ImageSet(train.astype(np.float32), ids=[f"train_{i:03d}" for i in range(n_train)]),
            ImageSet(test.astype(np.float32), labels, tags, ids=ids))
