"""Dataset plumbing: manifests, face crops, augmentation, and label handling.

A dataset is described by a CSV manifest with one row per sample. Images are
cropped around the face (landmark extremes grown upward so the forehead
stays in frame), resized, scaled to [0, 1], and mean-centered per channel.
Augmentation draws from a generator seeded by (run seed, epoch, sample id),
so epoch N of a given run always sees identical pixels.
"""

from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError, LabelError, ProtocolError
from .layers import mix_seed

# ---------------------------------------------------------------------------
# action unit class lists

DISFA_AUS: Tuple[int, ...] = (1, 2, 4, 5, 6, 9, 12, 15, 17, 20, 25, 26)
EMOTIONET_AUS: Tuple[int, ...] = (1, 2, 4, 5, 6, 9, 12, 17, 20, 25, 26)

AU_NAMES: Dict[int, str] = {
    1: "inner brow raiser",
    2: "outer brow raiser",
    4: "brow lowerer",
    5: "upper lid raiser",
    6: "cheek raiser",
    9: "nose wrinkler",
    12: "lip corner puller",
    15: "lip corner depressor",
    17: "chin raiser",
    20: "lip stretcher",
    25: "lips part",
    26: "jaw drop",
}

MAX_INTENSITY = 5


@dataclass(frozen=True)
class AuClassList:
    """Ordered action unit ids; the order defines label column order."""

    ids: Tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.ids:
            raise ConfigError("class list cannot be empty")
        if len(set(self.ids)) != len(self.ids):
            raise ConfigError(f"duplicate action unit ids in {self.ids}")
        if any(a < 1 for a in self.ids):
            raise ConfigError(f"action unit ids must be positive, got {self.ids}")

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(AU_NAMES.get(a, f"au{a}") for a in self.ids)

    def index_of(self, au: int) -> int:
        try:
            return self.ids.index(au)
        except ValueError:
            raise ProtocolError(f"action unit {au} is not in the class list {self.ids}")


def resolve_au_list(value) -> AuClassList:
    """Accepts 'disfa', 'emotionet', or an explicit id list."""
    if isinstance(value, AuClassList):
        return value
    if isinstance(value, str):
        key = value.strip().lower()
        if key == "disfa":
            return AuClassList(DISFA_AUS)
        if key == "emotionet":
            return AuClassList(EMOTIONET_AUS)
        raise ConfigError(f"unknown class list name {value!r}")
    if isinstance(value, (list, tuple)):
        return AuClassList(tuple(int(a) for a in value))
    raise ConfigError(f"cannot interpret {value!r} as a class list")


def align_au_classes(values: np.ndarray, source: AuClassList,
                     target: AuClassList) -> np.ndarray:
    """Select and reorder the last axis from source's unit order to target's.

    Every target unit must exist in the source; anything missing is a
    protocol error naming the offenders.
    """
    values = np.asarray(values)
    if values.shape[-1] != len(source):
        raise ProtocolError(
            f"values have {values.shape[-1]} columns but the source list has "
            f"{len(source)} units"
        )
    missing = [a for a in target.ids if a not in source.ids]
    if missing:
        raise ProtocolError(
            "target action units missing from source: "
            + ", ".join(str(a) for a in missing)
        )
    idx = [source.ids.index(a) for a in target.ids]
    return np.take(values, idx, axis=-1)


def binarize_intensity(values: Sequence[int], threshold: int = 2) -> np.ndarray:
    """Intensities 0..5 to presence bits: present iff intensity >= threshold."""
    if not 1 <= threshold <= MAX_INTENSITY:
        raise ConfigError(f"threshold must be in 1..{MAX_INTENSITY}, got {threshold}")
    arr = np.asarray(values)
    if arr.size and (arr.min() < 0 or arr.max() > MAX_INTENSITY):
        bad = arr[(arr < 0) | (arr > MAX_INTENSITY)].flat[0]
        raise LabelError(f"intensity {bad} outside 0..{MAX_INTENSITY}")
    return (arr >= threshold).astype(np.int64)


# ---------------------------------------------------------------------------
# manifest

MANIFEST_COLUMNS = (
    "id", "image_path", "split", "landmarks", "bbox",
    "au_intensities", "au_binary", "emotion",
)
SPLITS = ("train", "val", "test")


@dataclass
class SampleRecord:
    id: str
    image_path: str
    split: str
    landmarks: Optional[List[Tuple[float, float]]] = None
    bbox: Optional[Tuple[float, float, float, float]] = None
    au_intensities: Optional[List[int]] = None
    au_binary: Optional[List[int]] = None
    emotion: Optional[int] = None


def _parse_landmarks(text: str, where: str) -> List[Tuple[float, float]]:
    points = []
    for part in text.split(";"):
        xy = part.split(":")
        if len(xy) != 2:
            raise DataError(f"{where}: landmark {part!r} is not x:y")
        try:
            points.append((float(xy[0]), float(xy[1])))
        except ValueError:
            raise DataError(f"{where}: landmark {part!r} has non-numeric coordinates")
    if len(points) < 2:
        raise DataError(f"{where}: need at least 2 landmarks, got {len(points)}")
    return points


def _parse_bbox(text: str, where: str) -> Tuple[float, float, float, float]:
    parts = text.split(":")
    if len(parts) != 4:
        raise DataError(f"{where}: bbox {text!r} is not x:y:w:h")
    try:
        x, y, w, h = (float(p) for p in parts)
    except ValueError:
        raise DataError(f"{where}: bbox {text!r} has non-numeric fields")
    if w <= 0 or h <= 0:
        raise DataError(f"{where}: bbox must have positive width and height")
    return (x, y, w, h)


def _parse_int_list(text: str, where: str, what: str, lo: int, hi: int) -> List[int]:
    out = []
    for part in text.split("|"):
        try:
            v = int(part)
        except ValueError:
            raise DataError(f"{where}: {what} value {part!r} is not an integer")
        if not lo <= v <= hi:
            raise DataError(f"{where}: {what} value {v} outside {lo}..{hi}")
        out.append(v)
    return out


class Manifest:
    """Ordered sample records plus an id index."""

    def __init__(self, records: List[SampleRecord], root: str = "."):
        self.records = records
        self.root = root
        self._by_id: Dict[str, SampleRecord] = {}
        for r in records:
            if r.id in self._by_id:
                raise DataError(f"duplicate sample id {r.id!r}")
            self._by_id[r.id] = r

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, sample_id: str) -> SampleRecord:
        try:
            return self._by_id[sample_id]
        except KeyError:
            raise DataError(f"unknown sample id {sample_id!r}")

    def split_ids(self, split: str) -> List[str]:
        if split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
        return [r.id for r in self.records if r.split == split]


def load_manifest(path: str) -> Manifest:
    """Parse and validate a manifest CSV; errors carry 1-based line numbers."""
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"manifest {path} is empty")
        if tuple(header) != MANIFEST_COLUMNS:
            raise DataError(
                f"manifest {path} line 1: header must be "
                f"{','.join(MANIFEST_COLUMNS)}"
            )
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue  # blank trailing line
            where = f"manifest {path} line {lineno}"
            if len(row) != len(MANIFEST_COLUMNS):
                raise DataError(
                    f"{where}: expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}"
                )
            rid, image_path, split, lm, bbox, inten, binary, emo = row
            if not rid:
                raise DataError(f"{where}: empty sample id")
            if not image_path:
                raise DataError(f"{where}: empty image path")
            if split not in SPLITS:
                raise DataError(f"{where}: split must be one of {SPLITS}, got {split!r}")
            rec = SampleRecord(id=rid, image_path=image_path, split=split)
            if lm:
                rec.landmarks = _parse_landmarks(lm, where)
            if bbox:
                rec.bbox = _parse_bbox(bbox, where)
            if inten:
                rec.au_intensities = _parse_int_list(inten, where, "intensity", 0,
                                                     MAX_INTENSITY)
            if binary:
                rec.au_binary = _parse_int_list(binary, where, "presence", 0, 1)
            if emo:
                try:
                    rec.emotion = int(emo)
                except ValueError:
                    raise DataError(f"{where}: emotion {emo!r} is not an integer")
                if rec.emotion < 0:
                    raise DataError(f"{where}: emotion index must be non-negative")
            if rec.au_intensities is None and rec.au_binary is None and rec.emotion is None:
                raise DataError(f"{where}: sample has no labels at all")
            records.append(rec)
    manifest = Manifest(records, root=os.path.dirname(os.path.abspath(path)))
    return manifest


def assign_subject_disjoint_splits(manifest: Manifest,
                                   fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1),
                                   seed: int = 0,
                                   subject_of=None) -> Dict[str, str]:
    """Assign splits so no subject straddles a boundary; mutates the records.

    ``subject_of`` maps a sample id to its subject key; the default takes the
    prefix before the first underscore. Returns subject -> split. Fractions
    apply to subject counts, rounded by largest remainder.
    """
    if abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigError("split fractions must be non-negative and sum to 1")
    if subject_of is None:
        subject_of = lambda sid: sid.split("_", 1)[0]  # noqa: E731
    subjects = []
    for rec in manifest:
        s = subject_of(rec.id)
        if s not in subjects:
            subjects.append(s)
    rng = np.random.Generator(np.random.PCG64(seed))
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    n = len(order)
    raw = [f * n for f in fractions]
    take = [int(v) for v in raw]
    for _ in range(n - sum(take)):
        rema = [r - t for r, t in zip(raw, take)]
        take[rema.index(max(rema))] += 1
    assignment: Dict[str, str] = {}
    start = 0
    for count, name in zip(take, SPLITS):
        for s in order[start:start + count]:
            assignment[s] = name
        start += count
    for rec in manifest.records:
        rec.split = assignment[subject_of(rec.id)]
    return assignment


def save_manifest(manifest: Manifest, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for r in manifest.records:
            writer.writerow([
                r.id,
                r.image_path,
                r.split,
                ";".join(f"{x:g}:{y:g}" for x, y in r.landmarks) if r.landmarks else "",
                ":".join(f"{v:g}" for v in r.bbox) if r.bbox else "",
                "|".join(str(v) for v in r.au_intensities)
                if r.au_intensities is not None else "",
                "|".join(str(v) for v in r.au_binary)
                if r.au_binary is not None else "",
                "" if r.emotion is None else str(r.emotion),
            ])


# ---------------------------------------------------------------------------
# image pipeline


def load_image(path: str, sample_id: Optional[str] = None) -> np.ndarray:
    """Decode to an RGB uint8 [H, W, 3] array."""
    tag = f"sample {sample_id}: " if sample_id else ""
    if not os.path.isfile(path):
        raise DataError(f"{tag}image file not found: {path}")
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except Exception as e:  # PIL raises a zoo of types for corrupt files
        raise DataError(f"{tag}cannot decode image {path}: {e}") from e


def resize_image(img: np.ndarray, out_hw: int) -> np.ndarray:
    if img.shape[0] == out_hw and img.shape[1] == out_hw:
        return img
    return np.asarray(Image.fromarray(img).resize((out_hw, out_hw), Image.BILINEAR))


def crop_face(img: np.ndarray, landmarks=None, bbox=None,
              forehead_margin: float = 0.25, out_hw: int = 128,
              sample_id: Optional[str] = None) -> np.ndarray:
    """Crop to the face region and resize to out_hw x out_hw.

    With landmarks, the box spans their extremes grown upward by
    ``forehead_margin`` times the face height. With a bbox it is used as
    given. With neither, the whole image is used.
    """
    tag = f"sample {sample_id}: " if sample_id else ""
    H, W = img.shape[0], img.shape[1]
    if landmarks:
        xs = [p[0] for p in landmarks]
        ys = [p[1] for p in landmarks]
        x0, x1 = min(xs), max(xs)
        y0, y1 = min(ys), max(ys)
        y0 -= forehead_margin * (y1 - y0)
    elif bbox:
        x, y, w, h = bbox
        x0, y0, x1, y1 = x, y, x + w, y + h
    else:
        return resize_image(img, out_hw)
    xi0 = max(0, int(np.floor(x0)))
    yi0 = max(0, int(np.floor(y0)))
    xi1 = min(W, int(np.ceil(x1)) + 1)
    yi1 = min(H, int(np.ceil(y1)) + 1)
    if xi1 - xi0 < 2 or yi1 - yi0 < 2:
        raise DataError(f"{tag}face region {x0:.1f}..{x1:.1f} x {y0:.1f}..{y1:.1f} "
                        f"is degenerate after clamping to the {W}x{H} image")
    return resize_image(img[yi0:yi1, xi0:xi1], out_hw)


@dataclass(frozen=True)
class AugmentSpec:
    """Augmentation ranges; draws come from the caller's generator."""

    enabled: bool = True
    rotation_degrees: float = 15.0
    scale_factor: float = 0.1

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentSpec":
        return cls(enabled=bool(d.get("enabled", True)),
                   rotation_degrees=float(d.get("rotation_degrees", 15.0)),
                   scale_factor=float(d.get("scale_factor", 0.1)))


def rotate_image(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the center, bilinear, edges replicated, size preserved."""
    if degrees == 0.0:
        return img
    return ndimage.rotate(img, degrees, axes=(1, 0), reshape=False, order=1,
                          mode="nearest")


def zoom_crop(img: np.ndarray, scale: float) -> np.ndarray:
    """Scale up by cropping the center 1/scale window and resizing back."""
    if scale < 1.0:
        raise ConfigError(f"zoom scale must be >= 1, got {scale}")
    hw = img.shape[0]
    side = int(round(hw / scale))
    if side >= hw:
        return img
    off = (hw - side) // 2
    window = img[off:off + side, off:off + side]
    return np.asarray(Image.fromarray(window).resize((hw, hw), Image.BILINEAR))


def augment_image(img: np.ndarray, spec: AugmentSpec,
                  rng: np.random.Generator) -> np.ndarray:
    """Random rotation then random zoom-crop; identity when disabled."""
    if not spec.enabled:
        return img
    if spec.rotation_degrees > 0:
        angle = float(rng.uniform(-spec.rotation_degrees, spec.rotation_degrees))
        img = rotate_image(img, angle)
    if spec.scale_factor > 0:
        scale = 1.0 + float(rng.uniform(0.0, spec.scale_factor))
        img = zoom_crop(img, scale)
    return img


def sample_rng(seed: int, epoch: int, sample_id: str) -> np.random.Generator:
    """Generator that is a pure function of (run seed, epoch, sample id)."""
    digest = hashlib.blake2s(sample_id.encode("utf-8"), digest_size=8).digest()
    sid = int.from_bytes(digest, "little")
    return np.random.Generator(np.random.PCG64(mix_seed(seed, epoch, sid)))


# ---------------------------------------------------------------------------
# dataset: images + labels ready for batching


class FaceDataset:
    """Cropped, resized, cached images with label access by sample id."""

    def __init__(self, manifest: Manifest, out_hw: int = 128,
                 forehead_margin: float = 0.25, binarize_threshold: int = 2,
                 au_list: Optional[AuClassList] = None):
        self.manifest = manifest
        self.out_hw = out_hw
        self.forehead_margin = forehead_margin
        self.binarize_threshold = binarize_threshold
        self.au_list = au_list
        self._cache: Dict[str, np.ndarray] = {}

    def ids(self, split: str) -> List[str]:
        return self.manifest.split_ids(split)

    def image(self, sample_id: str) -> np.ndarray:
        """Cropped + resized uint8 image, cached after first load."""
        cached = self._cache.get(sample_id)
        if cached is not None:
            return cached
        rec = self.manifest[sample_id]
        path = rec.image_path
        if not os.path.isabs(path):
            path = os.path.join(self.manifest.root, path)
        raw = load_image(path, sample_id=sample_id)
        img = crop_face(raw, rec.landmarks, rec.bbox, self.forehead_margin,
                        self.out_hw, sample_id=sample_id)
        self._cache[sample_id] = img
        return img

    def au_row(self, sample_id: str) -> np.ndarray:
        rec = self.manifest[sample_id]
        if rec.au_binary is not None:
            row = np.asarray(rec.au_binary, dtype=np.int64)
        elif rec.au_intensities is not None:
            row = binarize_intensity(rec.au_intensities, self.binarize_threshold)
        else:
            raise DataError(f"sample {sample_id}: no action unit labels")
        if self.au_list is not None and row.size != len(self.au_list):
            raise DataError(
                f"sample {sample_id}: {row.size} unit labels but the class list "
                f"names {len(self.au_list)}"
            )
        return row

    def au_matrix(self, ids: Sequence[str]) -> np.ndarray:
        if not ids:
            return np.zeros((0, len(self.au_list) if self.au_list else 0),
                            dtype=np.int64)
        return np.stack([self.au_row(i) for i in ids])

    def emotion_vector(self, ids: Sequence[str]) -> np.ndarray:
        out = []
        for sample_id in ids:
            rec = self.manifest[sample_id]
            if rec.emotion is None:
                raise DataError(f"sample {sample_id}: no emotion label")
            out.append(rec.emotion)
        return np.asarray(out, dtype=np.int64)

    def channel_means(self, split: str = "train") -> List[float]:
        """Mean of each channel over the split's unit-scaled images."""
        ids = self.ids(split)
        if not ids:
            raise DataError(f"split {split!r} has no samples to average")
        acc = np.zeros(3, dtype=np.float64)
        for sample_id in ids:
            acc += self.image(sample_id).astype(np.float64).mean(axis=(0, 1))
        return [float(v) for v in acc / (255.0 * len(ids))]

    def batch(self, ids: Sequence[str], means: Sequence[float],
              augment: Optional[AugmentSpec] = None, seed: int = 0,
              epoch: int = 0) -> np.ndarray:
        """float32 [N, 3, H, W] batch: augment, scale to [0,1], center, transpose."""
        mean_arr = np.asarray(means, dtype=np.float32).reshape(1, 1, 3)
        out = np.empty((len(ids), 3, self.out_hw, self.out_hw), dtype=np.float32)
        for n, sample_id in enumerate(ids):
            img = self.image(sample_id)
            if augment is not None and augment.enabled:
                img = augment_image(img, augment, sample_rng(seed, epoch, sample_id))
            x = img.astype(np.float32) / np.float32(255.0) - mean_arr
            out[n] = x.transpose(2, 0, 1)
        return out
