"""Per-modality z-score normalization over the nonzero (brain) support."""

import numpy as np

from .errors import DegenerateInputError
from .volume import MODALITIES, Case


def normalize_volume(volume: np.ndarray, name: str = "volume") -> np.ndarray:
    """Zero mean / unit population std over voxels that are exactly nonzero.

    Background voxels (== 0) stay exactly 0.
    """
    volume = np.asarray(volume, dtype=np.float64)
    support = volume != 0
    values = volume[support]
    if values.size < 2 or np.all(values == values[0]):
        raise DegenerateInputError(f"{name}: need at least two distinct nonzero intensities")
    mean = values.mean()
    std = values.std()
    out = np.zeros_like(volume)
    out[support] = (values - mean) / std
    return out


def normalize_case(case: Case) -> Case:
    mods = np.stack([
        normalize_volume(vol, name) for vol, name in zip(case.modalities, MODALITIES)
    ]).astype(np.float32)
    return case.replace(modalities=mods)
