"""Synthetic four-phase lesion volumes with known masks and subtype labels.

Each case holds one ellipsoidal lesion whose mean intensity follows its
class's enhancement curve across the phases, on a background that follows a
shared curve.  Intensities are in normalized units (roughly 0..1).
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

# phases: non-contrast, arterial, portal, delayed
DEFAULT_CURVES = (
    (0.20, 0.90, 0.50, 0.70),  # ccRCC-like: arterial + delayed enhancement
    (0.20, 0.40, 0.80, 0.50),  # pRCC-like
    (0.20, 0.50, 0.75, 0.45),  # chRCC-like
    (0.15, 0.35, 0.40, 0.35),  # AML-like
    (0.20, 0.85, 0.60, 0.50),  # oncocytoma-like
)
SUBTYPE_NAMES = ("ccRCC-like", "pRCC-like", "chRCC-like", "AML-like", "oncocytoma-like")
DEFAULT_BACKGROUND = (0.30, 0.45, 0.50, 0.40)
SPLITS = ("train", "val", "test")
MAGIC = "PHV1"


class VolumeFormatError(ValueError):
    """A PHV1 file cannot be decoded."""


class BadMagicError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class PayloadLengthError(VolumeFormatError):
    """Payload is longer than the header shape, or not a whole number of floats."""


@dataclass
class PhantomConfig:
    volume_shape: tuple[int, int, int] = (16, 16, 8)
    curves: tuple[tuple[float, ...], ...] = DEFAULT_CURVES
    background: tuple[float, ...] = DEFAULT_BACKGROUND
    background_noise: float = 0.05
    heterogeneity: float = 0.05
    lesion_fraction_min: float = 0.005
    lesion_fraction_max: float = 0.10
    min_lesion_voxels: int = 8
    separability_margin: float = 0.05
    cases_per_class: int = 5
    split_ratios: tuple[float, float, float] = (0.65, 0.15, 0.20)
    voxel_spacing: tuple[float, float, float] = (1.5, 1.5, 3.0)

    def __post_init__(self):
        self.volume_shape = tuple(int(s) for s in self.volume_shape)
        self.curves = tuple(tuple(float(v) for v in c) for c in self.curves)
        self.background = tuple(float(v) for v in self.background)
        self.split_ratios = tuple(float(r) for r in self.split_ratios)
        self.voxel_spacing = tuple(float(v) for v in self.voxel_spacing)
        if len(self.volume_shape) != 3 or any(s % 2 for s in self.volume_shape):
            raise ValueError(f"volume_shape must be three even extents, got {self.volume_shape}")
        n_phases = len(self.background)
        if any(len(c) != n_phases for c in self.curves):
            raise ValueError("every enhancement curve needs one value per phase")
        if self.min_pairwise_distance() <= self.separability_margin:
            raise ValueError(
                f"enhancement curves are closer than the separability margin "
                f"({self.min_pairwise_distance():.4f} <= {self.separability_margin})"
            )
        if not 0 < self.lesion_fraction_min <= self.lesion_fraction_max < 1:
            raise ValueError("lesion fraction bounds must satisfy 0 < min <= max < 1")
        if len(self.split_ratios) != 3 or any(r < 0 for r in self.split_ratios) or abs(sum(self.split_ratios) - 1) > 1e-9:
            raise ValueError(f"split_ratios must be three non-negative values summing to 1, got {self.split_ratios}")

    @property
    def n_classes(self) -> int:
        return len(self.curves)

    @property
    def n_phases(self) -> int:
        return len(self.background)

    def min_pairwise_distance(self) -> float:
        c = np.asarray(self.curves)
        d = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=-1)
        return float(d[np.triu_indices(len(c), k=1)].min())

    def to_dict(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d))

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class PhantomCase:
    case_id: str
    label: int
    volumes: np.ndarray  # [N, H, W, D] float64
    mask: np.ndarray  # [H, W, D] float64 in {0, 1}
    seed: int = 0


@dataclass
class ManifestEntry:
    case_id: str
    label: int
    path: str
    mask_path: str
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    config_hash: str
    seed: int
    config: dict = field(default_factory=dict)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def summary(self) -> dict[str, list[int]]:
        n_classes = max((e.label for e in self.entries), default=-1) + 1
        out = {}
        for s in SPLITS:
            counts = [0] * n_classes
            for e in self.split(s):
                counts[e.label] += 1
            out[s] = counts
        return out

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "config": self.config,
            "cases": [asdict(e) for e in self.entries],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls([ManifestEntry(**e) for e in d["cases"]], d["config_hash"], int(d["seed"]), d.get("config", {}))


# ---------------------------------------------------------------- PHV1 volumes

def save_volume(path, array, spacing=None) -> None:
    """Write ``array`` as PHV1: a JSON header line, then little-endian float32."""
    array = np.asarray(array, dtype=np.float64)
    header = {"magic": MAGIC, "shape": list(array.shape), "dtype": "f32le"}
    if spacing is not None:
        header["spacing"] = [float(s) for s in spacing]
    line = json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n"
    with open(path, "wb") as fh:
        fh.write(line.encode("ascii"))
        fh.write(array.astype("<f4").tobytes(order="C"))


def read_volume_header(raw: bytes) -> tuple[dict, bytes]:
    newline = raw.find(b"\n")
    if newline < 0:
        raise BadMagicError("missing PHV1 header line")
    try:
        header = json.loads(raw[:newline].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadMagicError(f"unreadable PHV1 header: {exc}") from exc
    if not isinstance(header, dict) or header.get("magic") != MAGIC:
        raise BadMagicError(f"bad magic {header.get('magic') if isinstance(header, dict) else header!r}, expected {MAGIC}")
    if header.get("dtype") != "f32le":
        raise VolumeFormatError(f"unsupported dtype {header.get('dtype')!r}")
    return header, raw[newline + 1:]


def load_volume(path) -> np.ndarray:
    """Read a PHV1 file back into a float64 array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    header, payload = read_volume_header(raw)
    shape = tuple(int(s) for s in header["shape"])
    expected = int(np.prod(shape)) * 4
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, header shape {shape} needs {expected}")
    if len(payload) != expected:
        raise PayloadLengthError(f"{path}: payload has {len(payload)} bytes, header shape {shape} needs {expected}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(shape)


# ---------------------------------------------------------------- generation

def case_seed(global_seed: int, index: int) -> int:
    """Child seed of case ``index``; independent of generation order."""
    return int(np.random.SeedSequence([int(global_seed), int(index)]).generate_state(1)[0])


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return r2 <= 1.0


def sample_lesion_mask(config: PhantomConfig, rng: np.random.Generator, max_tries: int = 1000) -> np.ndarray:
    shape = config.volume_shape
    total = int(np.prod(shape))
    lo = max(config.min_lesion_voxels, int(np.ceil(config.lesion_fraction_min * total)))
    hi = int(np.floor(config.lesion_fraction_max * total))
    r_max = [s / 2.0 - 0.5 for s in shape]
    if lo > hi or min(r_max) < 1.0:
        raise ValueError(f"volume {shape} is too small to host a lesion of {lo}..{hi} voxels")
    for _ in range(max_tries):
        radii = [rng.uniform(1.0, rm) for rm in r_max]
        center = [rng.uniform(r - 0.5, s - 0.5 - r) for r, s in zip(radii, shape)]
        mask = _ellipsoid(shape, center, radii)
        if lo <= mask.sum() <= hi:
            return mask.astype(np.float64)
    raise ValueError(f"could not place a lesion of {lo}..{hi} voxels in {shape} after {max_tries} tries")


def generate_case(label: int, config: PhantomConfig, seed: int, case_id: str = "") -> PhantomCase:
    """One co-registered multi-phase case; fully determined by ``(label, config, seed)``."""
    if not 0 <= label < config.n_classes:
        raise ValueError(f"label {label} outside 0..{config.n_classes - 1}")
    rng = np.random.default_rng(seed)
    mask = sample_lesion_mask(config, rng)
    lesion = mask.astype(bool)
    shape = config.volume_shape
    volumes = np.empty((config.n_phases,) + shape)
    for p in range(config.n_phases):
        vol = config.background[p] + config.background_noise * rng.standard_normal(shape)
        inside = config.curves[label][p] + config.heterogeneity * rng.standard_normal(shape)
        volumes[p] = np.where(lesion, inside, vol)
    return PhantomCase(case_id or f"case_{seed}", int(label), volumes, mask, int(seed))


def stratified_split(labels, ratios=(0.65, 0.15, 0.20)) -> list[str]:
    """Assign a split tag to each index so every class appears in every split."""
    labels = np.asarray(labels)
    tags = [""] * len(labels)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        n = len(idx)
        # val and test get at least one case each; train takes the remainder
        n_val = max(1, int(round(ratios[1] * n)))
        n_test = max(1, int(round(ratios[2] * n)))
        n_train = n - n_val - n_test
        if n_train < 1:
            raise ValueError(f"class {cls} has {n} cases, too few to appear in train/val/test with ratios {ratios}")
        for i, j in enumerate(idx):
            tags[j] = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
    return tags


def generate_cases(config: PhantomConfig, seed: int, per_class: int | None = None, offset: int = 0) -> list[PhantomCase]:
    """Balanced in-memory cases: ``per_class`` of each class, interleaved by class."""
    per_class = config.cases_per_class if per_class is None else per_class
    cases = []
    for i in range(per_class * config.n_classes):
        index = offset + i
        label = i % config.n_classes
        cases.append(generate_case(label, config, case_seed(seed, index), f"case_{index:04d}"))
    return cases


def generate_dataset(config: PhantomConfig, seed: int, out_dir) -> DatasetManifest:
    """Write a balanced, stratified PHV1 dataset plus ``manifest.json``."""
    if config.cases_per_class < 1:
        raise ValueError("cases_per_class must be at least 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    cases = generate_cases(config, seed)
    tags = stratified_split([c.label for c in cases], config.split_ratios)
    entries = []
    for case, tag in zip(cases, tags):
        vol_name, mask_name = f"{case.case_id}.phv", f"{case.case_id}_mask.phv"
        save_volume(out / vol_name, case.volumes, config.voxel_spacing)
        save_volume(out / mask_name, case.mask, config.voxel_spacing)
        entries.append(ManifestEntry(case.case_id, case.label, vol_name, mask_name, tag))
    manifest = DatasetManifest(entries, config.digest(), int(seed), config.to_dict())
    write_manifest(out / "manifest.json", manifest)
    return manifest


def write_manifest(path, manifest: DatasetManifest) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> DatasetManifest:
    return DatasetManifest.from_dict(json.loads(Path(path).read_text()))


def load_case(dataset_dir, entry: ManifestEntry) -> PhantomCase:
    root = Path(dataset_dir)
    volumes = load_volume(root / entry.path)
    mask = (load_volume(root / entry.mask_path) > 0.5).astype(np.float64)
    return PhantomCase(entry.case_id, entry.label, volumes, mask)


def load_split(dataset_dir, split: str) -> list[PhantomCase]:
    manifest = read_manifest(Path(dataset_dir) / "manifest.json")
    return [load_case(dataset_dir, e) for e in manifest.split(split)]


def lesion_means(case: PhantomCase) -> np.ndarray:
    """Mean raw intensity inside the lesion, one value per phase."""
    m = case.mask.astype(bool)
    return np.array([v[m].mean() for v in case.volumes])


def nearest_curve_predict(case: PhantomCase, config: PhantomConfig) -> int:
    d = np.linalg.norm(np.asarray(config.curves) - lesion_means(case), axis=1)
    return int(np.argmin(d))
