from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba as nb
import numpy as np
import tifffile
import yaml
from scipy import ndimage

from imc_io import CANONICAL_CHANNELS, MAX_INTENSITY, ChannelStack, ClassLabel

logger = logging.getLogger(__name__)

MITO_CHANNELS = tuple(c for c in CANONICAL_CHANNELS if c != "Dystrophin")
NOISE_CLIP = 3.0

DEFAULT_BASELINES = {
    "COX4": 1800.0,
    "Dystrophin": 3000.0,
    "GRIM19": 1500.0,
    "MTCO1": 1600.0,
    "NDUFB8": 1400.0,
    "OSCP": 1700.0,
    "SDHA": 1900.0,
    "TOM22": 2100.0,
    "UqCRC2": 1500.0,
    "VDAC1": 2400.0,
}


class ParameterError(ValueError):
    pass


@nb.njit
def nearest_center_labels(height, width, centers):
    """
    Voronoi labels (1-based) and, per pixel, the distance to the nearest cell
    edge, measured to the bisector with each other center.
    """
    labels = np.zeros((height, width), dtype=np.int32)
    edge_distance = np.full((height, width), np.inf)
    for r in range(height):
        for c in range(width):
            best = 0
            best_d = np.inf
            for k in range(centers.shape[0]):
                dr = r - centers[k, 0]
                dc = c - centers[k, 1]
                d = dr * dr + dc * dc
                if d < best_d:
                    best_d = d
                    best = k
            labels[r, c] = best + 1
            for k in range(centers.shape[0]):
                if k == best:
                    continue
                gr = centers[k, 0] - centers[best, 0]
                gc = centers[k, 1] - centers[best, 1]
                span = np.sqrt(gr * gr + gc * gc)
                if span == 0:
                    continue
                dr = r - centers[k, 0]
                dc = c - centers[k, 1]
                to_edge = (dr * dr + dc * dc - best_d) / (2.0 * span)
                if to_edge < edge_distance[r, c]:
                    edge_distance[r, c] = to_edge
    return labels, edge_distance


@dataclass(frozen=True)
class TissueParams:
    """
    Parameters of one synthetic skeletal-muscle section.

    Distances are in pixels, with 1 pixel = 1 micrometer. Intensities are
    ion counts. The phenotype fractions and gains only act on patient stacks.
    """

    image_size: int = 512
    fiber_count: int = 30
    mean_fiber_diameter: float = 80.0
    membrane_thickness: int = 2
    baseline_intensity: dict = field(default_factory=lambda: dict(DEFAULT_BASELINES))
    noise_sd: float = 50.0
    hole_fraction: float = 0.05
    deficient_fiber_fraction: float = 0.5
    deficiency_factor: float = 0.3
    rrf_fraction: float = 0.1
    rrf_gain: float = 2.0
    subsarcolemmal_width: int = 3
    subsarcolemmal_boost: float = 0.3
    fiber_intensity_sd: float = 0.1
    deficient_channels: tuple = ("NDUFB8", "GRIM19", "MTCO1", "COX4")
    membrane_channel: str = "Dystrophin"
    channels: tuple = CANONICAL_CHANNELS

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "deficient_channels", tuple(self.deficient_channels))
        for name in ("hole_fraction", "deficient_fiber_fraction", "rrf_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1], got {value}")
        if not 0.0 < self.deficiency_factor <= 1.0:
            raise ParameterError(f"deficiency_factor must lie in (0, 1], got {self.deficiency_factor}")
        if self.rrf_gain < 1.0:
            raise ParameterError(f"rrf_gain must be >= 1, got {self.rrf_gain}")
        if self.fiber_count < 1 or self.image_size < 1:
            raise ParameterError("fiber_count and image_size must be >= 1")
        if self.mean_fiber_diameter <= 0 or self.membrane_thickness < 1:
            raise ParameterError("mean_fiber_diameter must be > 0 and membrane_thickness >= 1")
        if self.noise_sd < 0 or self.fiber_intensity_sd < 0:
            raise ParameterError("noise_sd and fiber_intensity_sd must be >= 0")
        if self.membrane_channel not in self.channels:
            raise ParameterError(f"membrane channel {self.membrane_channel} is not among the channels")
        unknown = [c for c in self.deficient_channels if c not in self.channels]
        if unknown:
            raise ParameterError(f"deficient channels {unknown} are not among the channels")
        missing = [c for c in self.channels if c not in self.baseline_intensity]
        if missing:
            raise ParameterError(f"no baseline intensity for {missing}")

    @classmethod
    def from_dict(cls, values):
        values = dict(values or {})
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParameterError(f"Unknown tissue parameters: {', '.join(sorted(unknown))}")
        if "baseline_intensity" in values:
            values["baseline_intensity"] = {**DEFAULT_BASELINES, **values["baseline_intensity"]}
        return cls(**values)

    def to_dict(self):
        values = asdict(self)
        values["channels"] = list(self.channels)
        values["deficient_channels"] = list(self.deficient_channels)
        return values


@dataclass
class GroundTruth:
    fiber_label_mask: np.ndarray
    deficient_fiber_ids: frozenset
    rrf_fiber_ids: frozenset
    membrane_mask: np.ndarray
    subsarcolemmal_mask: np.ndarray

    @property
    def fiber_ids(self):
        ids = np.unique(self.fiber_label_mask)
        return frozenset(int(i) for i in ids[ids > 0])

    @property
    def hole_mask(self):
        return self.fiber_label_mask == 0


def _sample_centers(params, rng):
    size = params.image_size
    spacing = 0.5 * params.mean_fiber_diameter
    if params.fiber_count * spacing**2 > size * size:
        raise ParameterError(
            f"A {size}x{size} image cannot host {params.fiber_count} fibres "
            f"of diameter {params.mean_fiber_diameter}"
        )
    centers = []
    attempts = 0
    while len(centers) < params.fiber_count:
        attempts += 1
        if attempts > 1000 * params.fiber_count:
            raise ParameterError(
                f"Could not place {params.fiber_count} fibres {spacing:.1f} px apart in {size}x{size}"
            )
        candidate = rng.uniform(0, size, size=2)
        if all((candidate[0] - r) ** 2 + (candidate[1] - c) ** 2 >= spacing**2 for r, c in centers):
            centers.append((candidate[0], candidate[1]))
    return np.asarray(centers, dtype=np.float64)


def _punch_holes(labels, params, rng):
    if params.hole_fraction == 0:
        return labels
    target = params.hole_fraction * labels.size
    areas = np.bincount(labels.ravel())
    removed = 0
    holes = []
    for fiber_id in rng.permutation(np.arange(1, params.fiber_count + 1)):
        if removed >= target or len(holes) == params.fiber_count - 1:
            break
        holes.append(fiber_id)
        removed += areas[fiber_id]
    labels = labels.copy()
    labels[np.isin(labels, holes)] = 0
    return labels


def generate_tissue(params, class_label, seed):
    """
    Generates one subject's channel stack and the masks it was built from.

    Fibres are the Voronoi cells of seeded random centers; whole fibres are
    removed to make holes. The membrane channel is bright on fibre boundaries
    only. Mitochondrial channels fill fibre interiors, brighter in the
    subsarcolemmal band. Patient stacks get deficient fibres (reduced
    deficient channels) and RRFs (boosted band); control stacks never do.
    Gaussian noise is truncated at NOISE_CLIP standard deviations, so holes
    stay at or below 3 * noise_sd.

    Returns:
        tuple: (ChannelStack, GroundTruth)

    Raises:
        ParameterError: If the image is too small to host fiber_count fibres.
    """
    class_label = ClassLabel.parse(class_label)
    rng = np.random.default_rng([int(seed), class_label.value])
    size = params.image_size

    centers = _sample_centers(params, rng)
    labels, edge_distance = nearest_center_labels(size, size, centers)
    labels = _punch_holes(labels, params, rng)
    tissue = labels > 0

    # Half the thickness on each side of a shared edge; the tissue side only along holes.
    membrane = (edge_distance < params.membrane_thickness / 2.0) & tissue
    interior = tissue & ~membrane
    depth = ndimage.distance_transform_edt(~membrane)
    band = interior & (depth <= params.subsarcolemmal_width)

    fiber_ids = np.unique(labels[tissue])
    patient = class_label is ClassLabel.PATIENT
    deficient_draw = rng.random(fiber_ids.size)
    rrf_draw = rng.random(fiber_ids.size)
    deficient_ids = frozenset(
        int(i) for i in fiber_ids[deficient_draw < (params.deficient_fiber_fraction if patient else 0.0)]
    )
    rrf_ids = frozenset(int(i) for i in fiber_ids[rrf_draw < (params.rrf_fraction if patient else 0.0)])

    fiber_factor = np.ones(labels.max() + 1)
    fiber_factor[fiber_ids] = np.exp(rng.normal(0.0, params.fiber_intensity_sd, fiber_ids.size))
    gradient = np.where(
        band, 1.0 + params.subsarcolemmal_boost * (1.0 - depth / params.subsarcolemmal_width), 1.0
    )
    deficient_mask = np.isin(labels, list(deficient_ids))
    rrf_band = band & np.isin(labels, list(rrf_ids))

    channels = {}
    for name in params.channels:
        base = params.baseline_intensity[name]
        if name == params.membrane_channel:
            signal = np.where(membrane, base, 0.0)
        else:
            signal = np.where(interior, base * fiber_factor[labels] * gradient, 0.0)
            signal = np.where(rrf_band, signal * params.rrf_gain, signal)
            if name in params.deficient_channels:
                signal = np.where(deficient_mask, signal * params.deficiency_factor, signal)
        if params.noise_sd > 0:
            noise = rng.normal(0.0, params.noise_sd, signal.shape)
            signal = signal + np.clip(noise, -NOISE_CLIP * params.noise_sd, NOISE_CLIP * params.noise_sd)
        channels[name] = np.rint(np.clip(signal, 0, MAX_INTENSITY)).astype(np.uint16)

    stack = ChannelStack(
        subject_id=f"{class_label}_{seed}",
        class_label=class_label,
        channels=channels,
    )
    truth = GroundTruth(
        fiber_label_mask=labels,
        deficient_fiber_ids=deficient_ids,
        rrf_fiber_ids=rrf_ids,
        membrane_mask=membrane,
        subsarcolemmal_mask=band,
    )
    return stack, truth


def generate_cohort(params, n_control, n_patient, seed):
    """Generates n_control + n_patient subjects with per-subject seeds derived from `seed`."""
    if n_control < 0 or n_patient < 0:
        raise ParameterError("Cohort counts must be >= 0")
    labels = [ClassLabel.CONTROL] * n_control + [ClassLabel.PATIENT] * n_patient
    children = np.random.SeedSequence(int(seed)).spawn(len(labels))
    cohort = []
    for index, (label, child) in enumerate(zip(labels, children)):
        subject_seed = int(child.generate_state(1)[0])
        stack, truth = generate_tissue(params, label, subject_seed)
        number = index + 1 if label is ClassLabel.CONTROL else index - n_control + 1
        stack.subject_id = f"{'C' if label is ClassLabel.CONTROL else 'P'}{number:02d}"
        cohort.append((stack, truth))
        logger.debug(
            "Generated %s: %d fibres, %d deficient, %d RRF",
            stack.subject_id,
            len(truth.fiber_ids),
            len(truth.deficient_fiber_ids),
            len(truth.rrf_fiber_ids),
        )
    return cohort


def save_ground_truth(truth, params, directory, subject_id):
    """Writes label and membrane masks as TIFF plus a YAML record of fibre ids and parameters."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tifffile.imwrite(directory / f"{subject_id}.labels.tif", truth.fiber_label_mask.astype(np.uint16))
    tifffile.imwrite(directory / f"{subject_id}.membrane.tif", truth.membrane_mask.astype(np.uint8))
    tifffile.imwrite(directory / f"{subject_id}.subsarcolemmal.tif", truth.subsarcolemmal_mask.astype(np.uint8))
    record = {
        "subject_id": subject_id,
        "deficient_fiber_ids": sorted(truth.deficient_fiber_ids),
        "rrf_fiber_ids": sorted(truth.rrf_fiber_ids),
        "params": params.to_dict(),
    }
    with open(directory / f"{subject_id}.truth.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump(record, f, sort_keys=False)


def load_ground_truth(directory, subject_id):
    directory = Path(directory)
    with open(directory / f"{subject_id}.truth.yaml", encoding="utf-8") as f:
        record = yaml.safe_load(f)
    truth = GroundTruth(
        fiber_label_mask=tifffile.imread(directory / f"{subject_id}.labels.tif").astype(np.int32),
        deficient_fiber_ids=frozenset(record["deficient_fiber_ids"]),
        rrf_fiber_ids=frozenset(record["rrf_fiber_ids"]),
        membrane_mask=tifffile.imread(directory / f"{subject_id}.membrane.tif").astype(bool),
        subsarcolemmal_mask=tifffile.imread(directory / f"{subject_id}.subsarcolemmal.tif").astype(bool),
    )
    return truth, TissueParams.from_dict(record["params"])
