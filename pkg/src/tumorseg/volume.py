"""Case data model, region decomposition, volume file IO and synthetic phantoms.

Labels follow the BraTS convention: 0 background, 1 necrotic/non-enhancing
core (NCR/NET), 2 edema (ED), 4 enhancing tumor (ET).  Evaluation regions
are nested: WT = {1, 2, 4}, TC = {1, 4}, ET = {4}.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import FormatError, RangeError, ShapeError, SpecError

MODALITIES = ("flair", "t1", "t1ce", "t2")
LABEL_VALUES = (0, 1, 2, 4)
REGIONS = ("wt", "tc", "et")
REGION_LABELS = {"wt": (1, 2, 4), "tc": (1, 4), "et": (4,)}

PathLike = Union[str, Path]


def check_labelmap(labels: np.ndarray) -> np.ndarray:
    """Validate a label volume and return it as ``uint8``.

    Raises:
        FormatError: if any voxel holds a value outside {0, 1, 2, 4}.
    """
    labels = np.asarray(labels)
    bad = ~np.isin(labels, LABEL_VALUES)
    if bad.any():
        values = sorted(set(np.unique(labels[bad]).tolist()))
        raise FormatError(f"label values {values} not in {LABEL_VALUES}")
    return labels.astype(np.uint8, copy=False)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Case:
    """Four co-registered modality volumes with optional ground truth.

    ``modalities`` has shape (4, D, H, W) in :data:`MODALITIES` order.
    Arrays are copied and made read-only on construction.
    """

    modalities: np.ndarray
    labels: Optional[np.ndarray] = None
    id: str = "case"
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        mods = np.asarray(self.modalities, dtype=np.float32)
        if mods.ndim != 4 or mods.shape[0] != len(MODALITIES):
            raise ShapeError(f"modalities must have shape (4, D, H, W), got {mods.shape}")
        object.__setattr__(self, "modalities", _frozen(mods))
        if self.labels is not None:
            labels = check_labelmap(self.labels)
            if labels.shape != mods.shape[1:]:
                raise ShapeError(f"labels shape {labels.shape} != modality shape {mods.shape[1:]}")
            object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.modalities.shape[1:])

    @property
    def brain_mask(self) -> np.ndarray:
        return np.any(self.modalities != 0, axis=0)

    def replace(self, **changes) -> "Case":
        fields = dict(modalities=self.modalities, labels=self.labels, id=self.id, spacing=self.spacing)
        fields.update(changes)
        return Case(**fields)


class RegionMasks(NamedTuple):
    wt: np.ndarray
    tc: np.ndarray
    et: np.ndarray


def regions_from_labels(labels: np.ndarray) -> RegionMasks:
    labels = np.asarray(labels)
    return RegionMasks(
        wt=np.isin(labels, REGION_LABELS["wt"]),
        tc=np.isin(labels, REGION_LABELS["tc"]),
        et=labels == 4,
    )


def region_mask(labels: np.ndarray, region: str) -> np.ndarray:
    if region not in REGION_LABELS:
        raise ValueError(f"unknown region {region!r}; expected one of {REGIONS}")
    return np.isin(labels, REGION_LABELS[region])


# ---------------------------------------------------------------------------
# Synthetic phantoms
# ---------------------------------------------------------------------------

# Per-class (mean, std) for each modality in MODALITIES order.  Class keys
# are "brain" (healthy tissue) and the tumor labels 1, 2, 4.
DEFAULT_INTENSITY_PROFILES = {
    "brain": ((100.0, 10.0), (120.0, 10.0), (110.0, 10.0), (100.0, 10.0)),
    2: ((180.0, 12.0), (95.0, 10.0), (105.0, 10.0), (190.0, 12.0)),
    1: ((140.0, 12.0), (60.0, 10.0), (70.0, 10.0), (210.0, 12.0)),
    4: ((160.0, 12.0), (110.0, 10.0), (230.0, 12.0), (150.0, 12.0)),
}

_REFERENCE_RADII = (9.0, 6.0, 3.0)
_BRAIN_SEMI_AXES = (0.42, 0.38, 0.40)


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of a nested-sphere tumor phantom.

    ``radii`` is the (wt, tc, et) sphere radius triple in voxels.  When left
    as ``None`` it scales ``(9, 6, 3)`` by ``min(shape) / 64``.
    """

    shape: Tuple[int, int, int] = (64, 64, 64)
    n_tumors: int = 2
    radii: Optional[Tuple[float, float, float]] = None
    intensity_profiles: dict = field(default_factory=lambda: DEFAULT_INTENSITY_PROFILES)
    seed: int = 0
    id: str = "phantom"

    def resolved_radii(self) -> Tuple[float, float, float]:
        if self.radii is not None:
            return tuple(float(r) for r in self.radii)
        scale = min(self.shape) / 64.0
        return tuple(r * scale for r in _REFERENCE_RADII)

    def validate(self):
        if len(self.shape) != 3 or min(self.shape) < 16:
            raise SpecError(f"phantom shape must be 3D with every extent >= 16, got {self.shape}")
        wt, tc, et = self.resolved_radii()
        if not (wt > tc > et >= 0):
            raise SpecError(f"radii must satisfy wt > tc > et >= 0, got {(wt, tc, et)}")
        if self.n_tumors < 0:
            raise SpecError("n_tumors must be non-negative")


def _place_centers(spec: PhantomSpec, semi_axes, center, rng) -> list:
    r = spec.resolved_radii()[0]
    room = np.asarray(semi_axes) - r - 1.0
    if spec.n_tumors and np.any(room <= 0):
        raise SpecError(f"tumor radius {r} does not fit in brain semi-axes {tuple(semi_axes)}")
    centers = []
    for _ in range(spec.n_tumors):
        for _attempt in range(10_000):
            u = rng.uniform(-1.0, 1.0, size=3)
            if np.sum(u ** 2) > 1.0:
                continue
            c = center + u * room
            if all(np.linalg.norm(c - other) >= 2 * r + 1 for other in centers):
                centers.append(c)
                break
        else:
            raise SpecError(f"cannot place {spec.n_tumors} non-overlapping tumors of radius {r}")
    return centers


def make_phantom(spec: PhantomSpec = PhantomSpec()) -> Case:
    """Generate a labelled 4-modality case from ``spec``; pure in ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    shape = tuple(int(s) for s in spec.shape)
    grid = np.indices(shape, dtype=np.float64)
    center = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    semi_axes = np.asarray(_BRAIN_SEMI_AXES) * np.asarray(shape)

    rel = sum(((grid[i] - center[i]) / semi_axes[i]) ** 2 for i in range(3))
    brain = rel <= 1.0

    labels = np.zeros(shape, dtype=np.uint8)
    r_wt, r_tc, r_et = spec.resolved_radii()
    for c in _place_centers(spec, semi_axes, center, rng):
        dist = np.sqrt(sum((grid[i] - c[i]) ** 2 for i in range(3)))
        labels[dist < r_wt] = 2
        labels[dist < r_tc] = 1
        if r_et > 0:
            labels[dist < r_et] = 4

    modalities = np.zeros((len(MODALITIES),) + shape, dtype=np.float32)
    profiles = spec.intensity_profiles
    for m in range(len(MODALITIES)):
        for cls, mask in (("brain", brain & (labels == 0)), (2, labels == 2), (1, labels == 1), (4, labels == 4)):
            mean, std = profiles[cls][m]
            n = int(mask.sum())
            modalities[m][mask] = rng.normal(mean, std, size=n)
        # brain voxels must stay distinguishable from exact-zero background
        modalities[m][brain] = np.maximum(modalities[m][brain], 1.0)

    return Case(modalities=modalities, labels=labels, id=spec.id)


# ---------------------------------------------------------------------------
# File IO: raw little-endian arrays with JSON sidecars, NIfTI read support
# ---------------------------------------------------------------------------


def _write_raw(arr: np.ndarray, path: Path, extra: Optional[dict] = None):
    arr = np.ascontiguousarray(arr)
    dtype = arr.dtype.newbyteorder("<")
    path.with_suffix(".raw").write_bytes(arr.astype(dtype).tobytes())
    meta = {"shape": list(arr.shape), "dtype": dtype.str}
    meta.update(extra or {})
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def _read_raw(path: Path, shape=None, dtype=None) -> np.ndarray:
    raw = path.with_suffix(".raw")
    if not raw.exists():
        raise FileNotFoundError(f"missing volume file {raw}")
    if shape is None or dtype is None:
        meta = json.loads(path.with_suffix(".json").read_text())
        shape, dtype = meta["shape"], meta["dtype"]
    data = np.frombuffer(raw.read_bytes(), dtype=np.dtype(dtype))
    if data.size != math.prod(shape):
        raise FormatError(f"{raw}: {data.size} values do not fill shape {tuple(shape)}")
    return data.reshape(shape).astype(np.dtype(dtype).newbyteorder("="))


def _strip(path: PathLike) -> Path:
    path = Path(path)
    if path.suffix in (".raw", ".json"):
        path = path.with_suffix("")
    return path


def _is_nifti(path: PathLike) -> bool:
    return str(path).endswith((".nii", ".nii.gz"))


def save_case(case: Case, root: PathLike) -> Path:
    """Write ``case`` to ``root/<id>/`` in the raw+json layout."""
    out = Path(root) / case.id
    out.mkdir(parents=True, exist_ok=True)
    for name, vol in zip(MODALITIES, case.modalities):
        vol.astype("<f4").tofile(out / f"{name}.raw")
    if case.labels is not None:
        case.labels.astype(np.uint8).tofile(out / "labels.raw")
    meta = {
        "id": case.id,
        "shape": list(case.shape),
        "spacing": list(case.spacing),
        "dtype": {"modalities": "<f4", "labels": "|u1"},
        "has_labels": case.labels is not None,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out


def _load_raw_case(path: Path) -> Case:
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"missing meta.json in {path}")
    meta = json.loads(meta_path.read_text())
    shape = tuple(meta["shape"])
    dtypes = meta.get("dtype", {})
    mods = []
    for name in MODALITIES:
        f = path / f"{name}.raw"
        if not f.exists():
            raise FileNotFoundError(f"missing modality {name!r} ({f})")
        mods.append(_read_raw(f, shape, dtypes.get("modalities", "<f4")))
    labels = None
    if (path / "labels.raw").exists():
        labels = check_labelmap(_read_raw(path / "labels.raw", shape, dtypes.get("labels", "|u1")))
    return Case(np.stack(mods), labels, id=meta.get("id", path.name), spacing=tuple(meta.get("spacing", (1, 1, 1))))


def _find_nifti(path: Path, key: str) -> Optional[Path]:
    for pattern in (f"{key}.nii.gz", f"{key}.nii", f"*_{key}.nii.gz", f"*_{key}.nii"):
        hits = sorted(path.glob(pattern))
        if hits:
            return hits[0]
    return None


def _load_nifti_case(path: Path) -> Case:
    import nibabel as nib

    mods, spacing = [], (1.0, 1.0, 1.0)
    for name in MODALITIES:
        f = _find_nifti(path, name)
        if f is None:
            raise FileNotFoundError(f"missing modality {name!r} in {path}")
        img = nib.load(str(f))
        spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
        mods.append(np.asarray(img.dataobj, dtype=np.float32))
    labels = None
    seg = _find_nifti(path, "seg") or _find_nifti(path, "labels")
    if seg is not None:
        data = np.asarray(nib.load(str(seg)).dataobj)
        if not np.all(np.equal(np.mod(data, 1), 0)):
            raise FormatError(f"{seg}: non-integer label values")
        labels = check_labelmap(data.astype(np.int64))
    return Case(np.stack(mods), labels, id=path.name, spacing=spacing)


def load_case(path: PathLike, format: str = "raw") -> Case:
    """Load a case directory.

    Args:
        path: Case directory.
        format: ``"raw"`` for the raw+json layout written by :func:`save_case`,
            ``"nifti"`` for BraTS-style ``<id>_{flair,t1,t1ce,t2,seg}.nii.gz``.

    Raises:
        FileNotFoundError: a modality file is missing (the message names it).
        FormatError: the label file holds a value outside {0, 1, 2, 4}.
    """
    path = Path(path)
    if format == "raw":
        return _load_raw_case(path)
    if format == "nifti":
        return _load_nifti_case(path)
    raise ValueError(f"unknown case format {format!r}")


def save_labelmap(labels: np.ndarray, path: PathLike) -> Path:
    labels = check_labelmap(labels)
    if _is_nifti(path):
        import nibabel as nib

        nib.save(nib.Nifti1Image(labels, np.eye(4)), str(path))
        return Path(path)
    path = _strip(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_raw(labels, path, {"kind": "labelmap"})
    return path.with_suffix(".raw")


def load_labelmap(path: PathLike) -> np.ndarray:
    if _is_nifti(path):
        import nibabel as nib

        return check_labelmap(np.asarray(nib.load(str(path)).dataobj).astype(np.int64))
    return check_labelmap(_read_raw(_strip(path)))


def save_uncertainty(values: np.ndarray, path: PathLike) -> Path:
    """Write an integer uncertainty map with values in [0, 100].

    Raises:
        RangeError: a value is outside [0, 100] or not an integer.
    """
    values = np.asarray(values)
    if values.size and (values.min() < 0 or values.max() > 100):
        raise RangeError(f"uncertainty values must lie in [0, 100], got [{values.min()}, {values.max()}]")
    if not np.all(np.equal(np.mod(values, 1), 0)):
        raise RangeError("uncertainty values must be integers")
    values = values.astype(np.uint8)
    if _is_nifti(path):
        import nibabel as nib

        nib.save(nib.Nifti1Image(values, np.eye(4)), str(path))
        return Path(path)
    path = _strip(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_raw(values, path, {"kind": "uncertainty"})
    return path.with_suffix(".raw")


def load_uncertainty(path: PathLike) -> np.ndarray:
    if _is_nifti(path):
        import nibabel as nib

        return np.asarray(nib.load(str(path)).dataobj).astype(np.uint8)
    return _read_raw(_strip(path))


def uncertainty_path(root: PathLike, case_id: str, region: str) -> Path:
    if region not in REGIONS + ("global",):
        raise ValueError(f"unknown uncertainty region {region!r}")
    return Path(root) / f"{case_id}_unc_{region}"


def list_cases(root: PathLike) -> Sequence[Path]:
    """Case directories (those containing ``meta.json``) under ``root``, sorted."""
    return sorted(p.parent for p in Path(root).glob("*/meta.json"))
