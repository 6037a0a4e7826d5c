from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd
import tifffile
import yaml

logger = logging.getLogger(__name__)

CANONICAL_CHANNELS = (
    "COX4",
    "Dystrophin",
    "GRIM19",
    "MTCO1",
    "NDUFB8",
    "OSCP",
    "SDHA",
    "TOM22",
    "UqCRC2",
    "VDAC1",
)
MAX_INTENSITY = 65535
PARTITIONS = ("train", "validation", "test")
_TIFF_SUFFIXES = (".ome.tiff", ".ome.tif", ".tiff", ".tif")


class StackError(Exception):
    pass


class StructuralError(StackError):
    pass


class ChannelValidationError(StackError):
    pass


class SplitError(ValueError):
    pass


class ClassLabel(Enum):
    CONTROL = 0
    PATIENT = 1

    def __str__(self):
        return self.name.lower()

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(int(value))
        except (TypeError, ValueError):
            try:
                return cls[str(value).upper()]
            except KeyError as exc:
                raise ValueError(f"Invalid class label: {value}") from exc


class ChannelMode(Enum):
    STRICT = "strict"
    PERMISSIVE = "permissive"


class EdgePolicy(Enum):
    DROP = "drop"
    PAD_ZERO = "pad_zero"


@dataclass(frozen=True)
class Normalization:
    kind: str = "unit_max"
    p_lo: float = 1.0
    p_hi: float = 99.0
    eps: float = 1e-8

    KINDS = ("unit_max", "percentile_clip", "zscore")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"Unknown normalization policy: {self.kind}")
        if self.kind == "percentile_clip" and not 0 <= self.p_lo < self.p_hi <= 100:
            raise ValueError("percentile_clip needs 0 <= p_lo < p_hi <= 100")

    def __str__(self):
        if self.kind == "percentile_clip":
            return f"percentile_clip({self.p_lo:g},{self.p_hi:g})"
        return self.kind

    @classmethod
    def parse(cls, value):
        """Accepts 'unit_max', 'zscore', 'percentile_clip(1,99)' or {'percentile_clip': [1, 99]}."""
        if isinstance(value, cls):
            return value
        if isinstance(value, dict):
            ((kind, args),) = value.items()
            return cls(kind, *args) if args else cls(kind)
        text = str(value).strip()
        if "(" in text:
            kind, _, rest = text.partition("(")
            lo, hi = (float(v) for v in rest.rstrip(")").split(","))
            return cls(kind.strip(), lo, hi)
        return cls(text)


@dataclass
class ChannelStack:
    subject_id: str
    class_label: ClassLabel
    channels: dict[str, np.ndarray]
    subtype: str | None = None
    pixel_size: float = 1.0

    def __post_init__(self):
        self.class_label = ClassLabel.parse(self.class_label)
        if not self.channels:
            raise StructuralError(f"Stack {self.subject_id} has no channels")
        reference = _reference_shape(self.channels)
        for name, grid in self.channels.items():
            if grid.ndim != 2:
                raise StructuralError(f"Channel {name} is not a 2D grid (ndim={grid.ndim})")
            if grid.shape != reference:
                raise StructuralError(
                    f"Channel {name} has shape {grid.shape}, expected {reference}"
                )
            self.channels[name] = _as_uint16(name, grid)

    @property
    def channel_names(self):
        return list(self.channels)

    @property
    def shape(self):
        return next(iter(self.channels.values())).shape

    def as_array(self, names=None):
        """Returns an H x W x C float32 array of the requested channels."""
        names = list(names) if names is not None else self.channel_names
        return np.stack([self.channels[n] for n in names], axis=-1).astype(np.float32)


@dataclass
class Patch:
    source_subject: str
    class_label: ClassLabel
    origin: tuple[int, int]
    data: np.ndarray
    channel_names: tuple[str, ...]
    normalization: str = "none"

    def __post_init__(self):
        self.class_label = ClassLabel.parse(self.class_label)
        self.origin = (int(self.origin[0]), int(self.origin[1]))
        self.channel_names = tuple(self.channel_names)
        if self.data.ndim != 3:
            raise StructuralError(f"Patch data must be H x W x C, got {self.data.shape}")
        if self.data.shape[2] != len(self.channel_names):
            raise StructuralError(
                f"Patch has {self.data.shape[2]} planes but {len(self.channel_names)} channel names"
            )
        if not np.all(np.isfinite(self.data)):
            raise StackError(f"Patch {self.patch_id} contains non-finite values")

    @property
    def patch_id(self):
        return f"{self.source_subject}_r{self.origin[0]:05d}_c{self.origin[1]:05d}"


@dataclass
class DatasetSplit:
    train: list[Patch]
    validation: list[Patch]
    test: list[Patch]
    ratios: tuple[float, float, float]
    seed: int
    group_by_subject: bool = False

    def fingerprint(self):
        digest = hashlib.sha256()
        for name in PARTITIONS:
            digest.update(name.encode())
            for patch in getattr(self, name):
                digest.update(patch.patch_id.encode())
        return digest.hexdigest()

    def assignments(self):
        return pd.DataFrame(
            [
                {"patch_id": p.patch_id, "subject": p.source_subject, "label": str(p.class_label), "partition": name}
                for name in PARTITIONS
                for p in getattr(self, name)
            ]
        )


def _reference_shape(channels):
    shapes = [grid.shape for grid in channels.values()]
    # Most common shape wins; ties go to the larger grid so the odd one out is named.
    return max(set(shapes), key=lambda s: (shapes.count(s), math.prod(s)))


def _as_uint16(name, grid):
    if grid.dtype == np.uint16:
        return grid
    if not np.issubdtype(grid.dtype, np.integer):
        raise ChannelValidationError(f"Channel {name} has non-integer dtype {grid.dtype}")
    if grid.size and (grid.min() < 0 or grid.max() > MAX_INTENSITY):
        raise ChannelValidationError(f"Channel {name} has intensities outside [0, {MAX_INTENSITY}]")
    return grid.astype(np.uint16)


def file_stem(path):
    name = Path(path).name
    for suffix in _TIFF_SUFFIXES:
        if name.lower().endswith(suffix):
            return name[: -len(suffix)]
    return Path(path).stem


def sidecar_path(path):
    return Path(path).with_name(f"{file_stem(path)}.meta.yaml")


def _ome_channel_names(tif):
    if not tif.is_ome or not tif.ome_metadata:
        return None
    try:
        image = tifffile.xml2dict(tif.ome_metadata)["OME"]["Image"]
        image = image[0] if isinstance(image, list) else image
        channels = image["Pixels"]["Channel"]
    except (KeyError, IndexError, TypeError):
        return None
    channels = channels if isinstance(channels, list) else [channels]
    names = [str(c.get("Name", "")) for c in channels]
    return names if all(names) else None


def _page_names(tif):
    names = []
    for page in tif.pages:
        tag = page.tags.get("PageName")
        if tag is None:
            return None
        names.append(str(tag.value))
    return names


def read_pages(path):
    try:
        with tifffile.TiffFile(path) as tif:
            pages = [page.asarray() for page in tif.pages]
            names = _ome_channel_names(tif) or _page_names(tif)
    except (tifffile.TiffFileError, ValueError, OSError) as e:
        raise StackError(f"Cannot decode {path}: {e}") from e
    for index, page in enumerate(pages):
        if page.ndim != 2:
            raise StructuralError(f"Page {index} of {path} is not a single 2D plane: {page.shape}")
    return pages, names


def load_stack(
    path,
    channel_map=None,
    mode=ChannelMode.STRICT,
    *,
    subject_id=None,
    class_label=None,
    subtype=None,
):
    """
    Loads a multichannel OME-TIFF or plain multipage TIFF into a ChannelStack.

    Params:
        path: Stack file, one 16-bit page per channel.
        channel_map (dict, optional): file page index (int) or file channel
            name (str) -> canonical channel name. Only mapped channels are
            loaded. Without a map the file's own channel names are used.
        mode (ChannelMode): STRICT requires every canonical channel.
        subject_id, class_label, subtype: subject identity. When omitted they
            are read from the `<stem>.meta.yaml` sidecar written by write_stack.

    Raises:
        FileNotFoundError: If the file does not exist.
        StackError: If the file cannot be decoded or the identity is unknown.
        StructuralError: If channel grids differ in shape (names the channel).
        ChannelValidationError: On duplicate names, bad intensities or, in
            strict mode, missing canonical channels.
    """
    path = Path(path)
    mode = ChannelMode(mode)
    if not path.exists():
        raise FileNotFoundError(f"No such stack file: {path}")

    pages, file_names = read_pages(path)

    if channel_map is None:
        if file_names is None:
            raise StackError(f"{path} carries no channel names; a channel_map is required")
        selected = list(enumerate(file_names))
    else:
        selected = []
        for key, canonical in channel_map.items():
            if isinstance(key, str) and not key.isdigit():
                if file_names is None or key not in file_names:
                    raise StackError(f"Channel {key!r} named in channel_map is not in {path}")
                index = file_names.index(key)
            else:
                index = int(key)
                if not 0 <= index < len(pages):
                    raise StackError(f"Page {index} named in channel_map is out of range for {path}")
            selected.append((index, str(canonical)))

    names = [name for _, name in selected]
    duplicates = sorted({n for n in names if names.count(n) > 1})
    if duplicates:
        raise ChannelValidationError(f"Duplicate channel names: {', '.join(duplicates)}")

    if mode is ChannelMode.STRICT:
        missing = [c for c in CANONICAL_CHANNELS if c not in names]
        if missing:
            raise ChannelValidationError(
                f"{path} lacks canonical channels {', '.join(missing)} (use permissive mode to allow)"
            )

    identity = {}
    sidecar = sidecar_path(path)
    if sidecar.exists():
        with open(sidecar, encoding="utf-8") as f:
            identity = yaml.safe_load(f) or {}
    subject_id = subject_id or identity.get("subject_id") or file_stem(path)
    class_label = class_label if class_label is not None else identity.get("class_label")
    if class_label is None:
        raise StackError(f"No class label given for {path} and no sidecar metadata found")
    subtype = subtype if subtype is not None else identity.get("subtype")

    stack = ChannelStack(
        subject_id=str(subject_id),
        class_label=class_label,
        channels={name: pages[index] for index, name in selected},
        subtype=subtype,
        pixel_size=float(identity.get("pixel_size", 1.0)),
    )
    logger.debug("Loaded %s: %d channels of %s", stack.subject_id, len(names), stack.shape)
    return stack


def write_stack(stack, path):
    """Writes a ChannelStack as an OME-TIFF (one page per channel) plus its identity sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.stack([stack.channels[n] for n in stack.channel_names]).astype(np.uint16)
    tifffile.imwrite(
        path,
        data,
        ome=True,
        photometric="minisblack",
        metadata={
            "axes": "CYX",
            "Channel": {"Name": stack.channel_names},
            "PhysicalSizeX": stack.pixel_size,
            "PhysicalSizeXUnit": "µm",
            "PhysicalSizeY": stack.pixel_size,
            "PhysicalSizeYUnit": "µm",
        },
    )
    with open(sidecar_path(path), "w", encoding="utf-8") as f:
        yaml.safe_dump(
            {
                "subject_id": stack.subject_id,
                "class_label": str(stack.class_label),
                "subtype": stack.subtype,
                "pixel_size": float(stack.pixel_size),
                "channels": stack.channel_names,
            },
            f,
            sort_keys=False,
        )
    return path


def patchify(stack, channel_selection, patch_size=512, stride=None, edge_policy=EdgePolicy.DROP):
    """
    Cuts a stack into square windows over the selected channels.

    Windows are emitted in row-major origin order. With EdgePolicy.DROP only
    windows lying fully inside the image are kept (an image smaller than the
    window yields an empty list); with PAD_ZERO every window start inside the
    image is kept and the part beyond the edge is zero.

    Params:
        stack (ChannelStack): Source stack.
        channel_selection (list of str): Channel names, in output plane order.
        patch_size (int): Window height and width.
        stride (int, optional): Step between window origins. Defaults to patch_size.
        edge_policy (EdgePolicy): DROP or PAD_ZERO.

    Returns:
        list of Patch holding raw intensities as float32.
    """
    channel_selection = list(channel_selection)
    edge_policy = EdgePolicy(edge_policy)
    stride = patch_size if stride is None else stride
    if not channel_selection:
        raise ValueError("channel_selection must name at least one channel")
    if patch_size < 1 or stride < 1:
        raise ValueError("patch_size and stride must be >= 1")
    missing = [c for c in channel_selection if c not in stack.channels]
    if missing:
        raise ChannelValidationError(f"Stack {stack.subject_id} has no channel(s) {', '.join(missing)}")

    height, width = stack.shape
    image = stack.as_array(channel_selection)
    if edge_policy is EdgePolicy.DROP:
        rows = range(0, height - patch_size + 1, stride)
        cols = range(0, width - patch_size + 1, stride)
    else:
        rows = range(0, height, stride)
        cols = range(0, width, stride)

    patches = []
    for row in rows:
        for col in cols:
            window = image[row : row + patch_size, col : col + patch_size]
            if window.shape[:2] != (patch_size, patch_size):
                padded = np.zeros((patch_size, patch_size, len(channel_selection)), dtype=np.float32)
                padded[: window.shape[0], : window.shape[1]] = window
                window = padded
            patches.append(
                Patch(
                    source_subject=stack.subject_id,
                    class_label=stack.class_label,
                    origin=(row, col),
                    data=np.ascontiguousarray(window),
                    channel_names=channel_selection,
                )
            )
    return patches


def select_channels(patch, names):
    """Returns a view of the patch restricted to `names`, in that order."""
    names = list(names)
    missing = [n for n in names if n not in patch.channel_names]
    if missing:
        raise ChannelValidationError(f"Patch {patch.patch_id} has no channel(s) {', '.join(missing)}")
    index = [patch.channel_names.index(n) for n in names]
    return replace(patch, data=np.ascontiguousarray(patch.data[..., index]), channel_names=tuple(names))


def _normalize_channel(channel, policy):
    if policy.kind == "unit_max":
        return channel / MAX_INTENSITY
    if policy.kind == "percentile_clip":
        lo, hi = np.percentile(channel, [policy.p_lo, policy.p_hi])
        if hi <= lo:
            return np.zeros_like(channel)
        return np.clip((channel - lo) / (hi - lo), 0.0, 1.0)
    sd = channel.std()
    if sd < policy.eps:
        return np.zeros_like(channel)
    return (channel - channel.mean()) / max(sd, policy.eps)


def normalize_patch(patch, policy=Normalization()):
    """
    Normalizes every channel of a patch independently.

    unit_max divides by 65535; percentile_clip clips to the channel's
    [p_lo, p_hi] percentiles and rescales to [0, 1]; zscore standardizes.
    The data-dependent policies map constant channels to zeros.
    """
    policy = Normalization.parse(policy)
    data = patch.data.astype(np.float64)
    out = np.empty_like(data)
    for k in range(data.shape[2]):
        out[..., k] = _normalize_channel(data[..., k], policy)
    return replace(patch, data=out.astype(np.float32), normalization=str(policy))


def _floor_count(n, ratio):
    return int(math.floor(n * ratio + 1e-9))


def _validate_ratios(ratios):
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise SplitError(f"ratios must be three non-negative fractions, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must sum to 1, got {sum(ratios)}")
    return ratios


def _grouped_partition(patches, ratios, rng):
    _, val_ratio, test_ratio = ratios
    assigned = {}
    for label in sorted({p.class_label for p in patches}, key=lambda c: c.value):
        stratum = [p for p in patches if p.class_label is label]
        subjects = sorted({p.source_subject for p in stratum})
        counts = {s: sum(p.source_subject == s for p in stratum) for s in subjects}
        order = [subjects[i] for i in rng.permutation(len(subjects))]
        for partition, ratio in (("test", test_ratio), ("validation", val_ratio)):
            target = _floor_count(len(stratum), ratio)
            filled = 0
            # Stop short of the last subject so train keeps one of every class.
            while target > 0 and filled < target and len(order) > 1:
                subject = order.pop(0)
                assigned[subject] = partition
                filled += counts[subject]
        for subject in order:
            assigned[subject] = "train"
    return {name: [p for p in patches if assigned[p.source_subject] == name] for name in PARTITIONS}


def split_dataset(patches, ratios=(0.8, 0.1, 0.1), seed=0, group_by_subject=False):
    """
    Splits patches into train / validation / test partitions.

    Without grouping, the patches are shuffled by seed and validation and test
    receive floor(n * ratio) patches each, the remainder going to train. With
    group_by_subject, whole subjects are assigned per class stratum until each
    partition reaches its floor target, so no subject straddles partitions.

    Raises:
        SplitError: For invalid ratios or fewer patches than partitions.
    """
    ratios = _validate_ratios(ratios)
    patches = list(patches)
    if len(patches) < 3:
        raise SplitError(f"Need at least 3 patches to fill 3 partitions, got {len(patches)}")
    rng = np.random.default_rng(seed)

    if group_by_subject:
        parts = _grouped_partition(patches, ratios, rng)
    else:
        n = len(patches)
        order = rng.permutation(n)
        n_val = _floor_count(n, ratios[1])
        n_test = _floor_count(n, ratios[2])
        parts = {
            "validation": [patches[i] for i in order[:n_val]],
            "test": [patches[i] for i in order[n_val : n_val + n_test]],
            "train": [patches[i] for i in order[n_val + n_test :]],
        }

    split = DatasetSplit(
        train=parts["train"],
        validation=parts["validation"],
        test=parts["test"],
        ratios=ratios,
        seed=seed,
        group_by_subject=group_by_subject,
    )
    logger.info(
        "Split %d patches: %d train / %d validation / %d test",
        len(patches),
        len(split.train),
        len(split.validation),
        len(split.test),
    )
    return split


def patch_checksum(patch):
    return hashlib.sha256(np.ascontiguousarray(patch.data, dtype=np.float32).tobytes()).hexdigest()


def save_patches(patches, directory):
    """Writes one .npy tensor per patch plus a patches.csv manifest; returns the manifest frame."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for patch in patches:
        np.save(directory / f"{patch.patch_id}.npy", patch.data.astype(np.float32))
        rows.append(
            {
                "patch_id": patch.patch_id,
                "subject": patch.source_subject,
                "label": str(patch.class_label),
                "row": patch.origin[0],
                "col": patch.origin[1],
                "channels": "|".join(patch.channel_names),
                "normalization": patch.normalization,
                "sha256": patch_checksum(patch),
            }
        )
    manifest = pd.DataFrame(
        rows, columns=["patch_id", "subject", "label", "row", "col", "channels", "normalization", "sha256"]
    )
    manifest.to_csv(directory / "patches.csv", index=False)
    return manifest


def load_patches(directory):
    directory = Path(directory)
    manifest = pd.read_csv(directory / "patches.csv", dtype={"subject": str, "patch_id": str})
    patches = []
    for record in manifest.itertuples(index=False):
        patch = Patch(
            source_subject=record.subject,
            class_label=record.label,
            origin=(record.row, record.col),
            data=np.load(directory / f"{record.patch_id}.npy"),
            channel_names=record.channels.split("|"),
            normalization=record.normalization,
        )
        if patch_checksum(patch) != record.sha256:
            raise StackError(f"Checksum mismatch for patch {record.patch_id}")
        patches.append(patch)
    return patches
