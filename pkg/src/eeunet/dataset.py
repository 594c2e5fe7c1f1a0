"""Slice extraction, preprocessing, synthetic phantoms and patient-level folds."""
import json
import math
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError, DimMismatch, EmptyFold, IoFailure, TooFewPatients, UnknownLabel
from .nifti import read_nifti

IMAGE_SIZE = 128
CLASS_NAMES = ("background", "RV", "Myo", "LV")
PHASES = ("ED", "ES")
PATHOLOGIES = ("NOR", "MINF", "DCM", "HCM", "ARV")
# source label -> project label; ACDC already uses 0=bg, 1=RV, 2=Myo, 3=LV
DEFAULT_LABEL_MAP = {0: 0, 1: 1, 2: 2, 3: 3}


@dataclass
class SliceMeta:
    patient_id: str
    phase: str = "ED"
    slice_index: int = 0
    pathology: str = "NOR"


@dataclass
class SliceSample:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1, 2, 3}
    spacing: tuple  # (row, col) mm
    meta: SliceMeta

    def validate(self, size=IMAGE_SIZE):
        expected = self.image.shape if size is None else (size, size)
        if self.image.shape != expected or self.mask.shape != expected:
            raise DimMismatch(f"expected {expected}, got {self.image.shape} / {self.mask.shape}")
        if not np.isfinite(self.image).all() or self.image.min() < 0 or self.image.max() > 1:
            raise DataError("image values must lie in [0, 1]")
        if self.mask.max(initial=0) > 3:
            raise UnknownLabel(f"mask label {int(self.mask.max())} outside {{0,1,2,3}}")
        if not all(s > 0 for s in self.spacing):
            raise DataError(f"spacing must be positive, got {self.spacing}")
        return self


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple  # tuple of frozensets of patient ids

    @property
    def k(self):
        return len(self.folds)

    def fold_of(self, patient_id):
        for i, f in enumerate(self.folds):
            if patient_id in f:
                return i
        raise KeyError(patient_id)

    def split(self, samples, fold_index):
        """Return (train, test) sample lists with the test fold held out."""
        if not 0 <= fold_index < self.k:
            raise ValueError(f"fold_index {fold_index} outside 0..{self.k - 1}")
        held_out = self.folds[fold_index]
        train = [s for s in samples if s.meta.patient_id not in held_out]
        test = [s for s in samples if s.meta.patient_id in held_out]
        leaked = {s.meta.patient_id for s in train} & {s.meta.patient_id for s in test}
        assert not leaked, f"patient leakage between train and test: {sorted(leaked)}"
        return train, test


# ----------------------------------------------------------------------------
# preprocessing


def normalize_slice(raw):
    """Clip to the slice's [1st, 99th] percentile and rescale to [0, 1].

    Percentiles use nearest-rank interpolation. Constant slices map to zeros.
    """
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = np.percentile(raw, [1.0, 99.0], method="nearest")
    if hi <= lo:
        return np.zeros(raw.shape, dtype=np.float32)
    out = (np.clip(raw, lo, hi) - lo) / (hi - lo)
    return out.astype(np.float32)


def _bilinear_axis(n_in, n_out):
    # align_corners=False: source coordinate of output pixel centre, clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize(grid, target=(IMAGE_SIZE, IMAGE_SIZE), mode="bilinear"):
    """Resize a 2D grid.

    ``bilinear`` follows the align-corners-false convention (pixel centres at
    half-integer positions, edge-clamped); ``nearest`` picks the source pixel
    containing the output pixel centre, so its value set is a subset of the
    input's.
    """
    grid = np.asarray(grid)
    h, w = grid.shape
    th, tw = target
    if (h, w) == (th, tw):
        return grid.copy()
    if mode == "nearest":
        rows = np.minimum(np.floor((np.arange(th) + 0.5) * h / th).astype(np.int64), h - 1)
        cols = np.minimum(np.floor((np.arange(tw) + 0.5) * w / tw).astype(np.int64), w - 1)
        return grid[np.ix_(rows, cols)]
    if mode != "bilinear":
        raise ValueError(f"unknown resize mode {mode!r}")
    r0, r1, fr = _bilinear_axis(h, th)
    c0, c1, fc = _bilinear_axis(w, tw)
    g = grid.astype(np.float64)
    top = g[r0][:, c0] * (1 - fc) + g[r0][:, c1] * fc
    bottom = g[r1][:, c0] * (1 - fc) + g[r1][:, c1] * fc
    out = top * (1 - fr)[:, None] + bottom * fr[:, None]
    return out.astype(grid.dtype if grid.dtype.kind == "f" else np.float64)


def remap_labels(mask, label_map=None):
    label_map = DEFAULT_LABEL_MAP if label_map is None else label_map
    mask = np.asarray(mask)
    if mask.dtype.kind == "f":
        if not np.all(mask == np.round(mask)):
            raise UnknownLabel("mask contains non-integer labels")
        mask = np.round(mask).astype(np.int64)
    present = np.unique(mask)
    unknown = [int(v) for v in present if int(v) not in label_map]
    if unknown:
        raise UnknownLabel(f"mask labels {unknown} not in label map {sorted(label_map)}")
    lut = np.zeros(int(present.max()) + 1 if present.size else 1, dtype=np.uint8)
    for src, dst in label_map.items():
        if 0 <= src < lut.size:
            lut[src] = dst
    if present.size and present.min() < 0:
        raise UnknownLabel(f"negative mask label {int(present.min())}")
    return lut[mask]


def volume_to_slices(vol, mask_vol, meta, frame=None, size=IMAGE_SIZE, label_map=None):
    """Cut a (volume, mask) pair into preprocessed short-axis SliceSamples.

    ``meta`` is a SliceMeta template whose slice_index is filled per slice.
    4D cine volumes need ``frame`` to pick the time point.
    """
    img = vol.data
    msk = mask_vol.data
    if img.ndim == 4:
        if frame is None:
            raise DimMismatch("4D volume needs a frame index")
        img = img[..., frame]
    if msk.ndim == 4:
        if frame is None:
            raise DimMismatch("4D mask needs a frame index")
        msk = msk[..., frame]
    if img.shape != msk.shape:
        raise DimMismatch(f"image dims {img.shape} != mask dims {msk.shape}")
    if not np.allclose(vol.spacing, mask_vol.spacing, rtol=1e-5):
        raise DimMismatch(f"image spacing {vol.spacing} != mask spacing {mask_vol.spacing}")
    labels = remap_labels(msk, label_map)
    nx, ny, nz = img.shape
    spacing = (nx * vol.spacing[0] / size, ny * vol.spacing[1] / size)
    out = []
    for k in range(nz):
        image = resize(normalize_slice(img[:, :, k]), (size, size), "bilinear")
        image = np.clip(image, 0.0, 1.0).astype(np.float32)
        mask = resize(labels[:, :, k], (size, size), "nearest").astype(np.uint8)
        m = SliceMeta(meta.patient_id, meta.phase, k, meta.pathology)
        out.append(SliceSample(image, mask, spacing, m))
    return out


# ----------------------------------------------------------------------------
# folds


def make_folds(patients, k=5, seed=0):
    """Stratified patient-level k-fold split.

    ``patients`` is a sequence of ``(patient_id, pathology)`` pairs. Patients
    of each class are shuffled and dealt round-robin, with the dealing
    position carried across classes so fold sizes differ by at most one.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    ids = {}
    for pid, cls in patients:
        ids[pid] = cls
    if len(ids) < k:
        raise TooFewPatients(f"{len(ids)} patients cannot fill {k} folds")
    by_class = defaultdict(list)
    for pid in sorted(ids):
        by_class[ids[pid]].append(pid)
    rng = np.random.default_rng(seed)
    folds = [set() for _ in range(k)]
    cursor = 0
    for cls in sorted(by_class):
        members = by_class[cls]
        for idx in rng.permutation(len(members)):
            folds[cursor % k].add(members[idx])
            cursor += 1
    return FoldPlan(tuple(frozenset(f) for f in folds))


# ----------------------------------------------------------------------------
# synthetic phantoms


def _phantom_once(rng, size, noise):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = size / 2
    cy, cx = c + rng.uniform(-8, 8), c + rng.uniform(-8, 8)
    r_lv = rng.uniform(14, 22)
    w_myo = rng.uniform(6, 10)
    r_out = r_lv + w_myo
    phi = rng.uniform(0, 2 * math.pi)
    d_rv = r_out * rng.uniform(0.7, 0.9)
    r_rv = r_out * rng.uniform(1.0, 1.2)
    ry, rx = cy - d_rv * math.sin(phi), cx + d_rv * math.cos(phi)

    dist_lv = np.hypot(yy - cy, xx - cx)
    dist_rv = np.hypot(yy - ry, xx - rx)
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[(dist_rv <= r_rv) & (dist_lv > r_out)] = 1
    mask[(dist_lv > r_lv) & (dist_lv <= r_out)] = 2
    mask[dist_lv <= r_lv] = 3

    means = (
        rng.uniform(0.02, 0.10),
        rng.uniform(0.58, 0.66),
        rng.uniform(0.30, 0.38),
        rng.uniform(0.84, 0.95),
    )
    image = np.asarray(means)[mask]
    if noise > 0:
        image = image + rng.normal(0.0, noise, image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask


def gen_phantom(seed, count, noise=0.03, size=IMAGE_SIZE, prefix="phantom"):
    """Generate ``count`` synthetic short-axis slices.

    LV is a filled disk, myocardium an annulus around it, and RV a crescent
    cut from an offset disk by the epicardial circle. Every sample is its own
    patient; phases alternate and pathology labels cycle so folds stratify.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0 <= noise <= 0.05:
        raise ValueError("noise sigma must lie in [0, 0.05]")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        while True:
            image, mask = _phantom_once(rng, size, noise)
            if np.bincount(mask.ravel(), minlength=4).min() >= 20:
                break
        meta = SliceMeta(
            f"{prefix}{seed}_{i:03d}",
            PHASES[i % 2],
            0,
            PATHOLOGIES[(i // 2) % len(PATHOLOGIES)],
        )
        out.append(SliceSample(image, mask, (1.0, 1.0), meta))
    return out


def augment(sample, seed, enabled=False, max_angle=10.0):
    """Random rotation in [-max_angle, max_angle] degrees plus a coin-flip
    horizontal flip, applied identically to image (bilinear) and mask
    (nearest). Identity when ``enabled`` is false."""
    if not enabled:
        return sample
    rng = np.random.default_rng(seed)
    angle = rng.uniform(-max_angle, max_angle)
    flip = rng.random() < 0.5
    image, mask = rotate_pair(sample.image, sample.mask, angle)
    if flip:
        image, mask = image[:, ::-1].copy(), mask[:, ::-1].copy()
    return SliceSample(image, mask, sample.spacing, sample.meta)


def rotate_pair(image, mask, angle_deg):
    if angle_deg == 0:
        return image.copy(), mask.copy()
    img = ndimage.rotate(image, angle_deg, reshape=False, order=1, mode="constant", cval=0.0)
    msk = ndimage.rotate(mask, angle_deg, reshape=False, order=0, mode="constant", cval=0)
    return np.clip(img, 0.0, 1.0).astype(np.float32), msk.astype(np.uint8)


# ----------------------------------------------------------------------------
# ACDC ingestion


def read_acdc_info(path):
    info = {}
    for line in Path(path).read_text().splitlines():
        if ":" in line:
            key, value = line.split(":", 1)
            info[key.strip()] = value.strip()
    return info


def load_acdc_patient(patient_dir, label_map=None, size=IMAGE_SIZE):
    """Preprocess the annotated ED and ES frames of one ACDC patient folder."""
    patient_dir = Path(patient_dir)
    info = read_acdc_info(patient_dir / "Info.cfg")
    pid = patient_dir.name
    pathology = info.get("Group", "NOR")
    samples = []
    for phase in PHASES:
        frame = int(info[phase])
        stem = f"{pid}_frame{frame:02d}"
        img_path = _first_existing(patient_dir, stem)
        gt_path = _first_existing(patient_dir, stem + "_gt")
        meta = SliceMeta(pid, phase, 0, pathology)
        samples += volume_to_slices(read_nifti(img_path), read_nifti(gt_path), meta, size=size, label_map=label_map)
    return samples


def _first_existing(directory, stem):
    for suffix in (".nii.gz", ".nii"):
        p = directory / (stem + suffix)
        if p.exists():
            return p
    raise IoFailure(f"missing {directory / stem}.nii[.gz]")


# ----------------------------------------------------------------------------
# on-disk dataset
#
# Each sample is one little-endian binary record:
#   magic "EESL" | u32 version=1 | u16 H | u16 W | 4 x u8 label map
#   | f32 row spacing | f32 col spacing | f32 image[H*W] | u8 mask[H*W]
#   | u32 meta length | UTF-8 JSON meta
# manifest.tsv lists file, patient, phase, slice, pathology and fold.

_RECORD_MAGIC = b"EESL"
_RECORD_HEAD = struct.Struct("<4sIHH4Bff")


def encode_record(sample, label_map=(0, 1, 2, 3)):
    h, w = sample.image.shape
    head = _RECORD_HEAD.pack(_RECORD_MAGIC, 1, h, w, *label_map, *sample.spacing)
    meta = json.dumps(sample.meta.__dict__, sort_keys=True).encode()
    return b"".join(
        [
            head,
            sample.image.astype("<f4").tobytes(),
            sample.mask.astype(np.uint8).tobytes(),
            struct.pack("<I", len(meta)),
            meta,
        ]
    )


def decode_record(blob):
    if len(blob) < _RECORD_HEAD.size or blob[:4] != _RECORD_MAGIC:
        raise DataError("not a slice record")
    magic, version, h, w, *rest = _RECORD_HEAD.unpack_from(blob, 0)
    if version != 1:
        raise DataError(f"unsupported record version {version}")
    spacing = (rest[4], rest[5])
    off = _RECORD_HEAD.size
    need = off + 5 * h * w + 4
    if len(blob) < need:
        raise DataError("truncated slice record")
    image = np.frombuffer(blob, "<f4", h * w, off).reshape(h, w).astype(np.float32)
    off += 4 * h * w
    mask = np.frombuffer(blob, np.uint8, h * w, off).reshape(h, w).copy()
    off += h * w
    (n,) = struct.unpack_from("<I", blob, off)
    meta = SliceMeta(**json.loads(blob[off + 4 : off + 4 + n].decode()))
    return SliceSample(image, mask, spacing, meta)


@dataclass
class SliceDataset:
    samples: list
    plan: FoldPlan = None
    extra: dict = field(default_factory=dict)

    def patients(self):
        seen = {}
        for s in self.samples:
            seen.setdefault(s.meta.patient_id, s.meta.pathology)
        return list(seen.items())

    def split(self, fold_index):
        if self.plan is None:
            raise DataError("dataset has no fold plan")
        train, test = self.plan.split(self.samples, fold_index)
        if not train or not test:
            raise EmptyFold(f"fold {fold_index} leaves an empty train or test set")
        return train, test


def save_dataset(ds, out_dir):
    out_dir = Path(out_dir)
    try:
        (out_dir / "records").mkdir(parents=True, exist_ok=True)
        lines = ["file\tpatient_id\tphase\tslice_index\tpathology\tfold"]
        for i, s in enumerate(ds.samples):
            name = f"records/{i:06d}.bin"
            (out_dir / name).write_bytes(encode_record(s))
            fold = ds.plan.fold_of(s.meta.patient_id) if ds.plan else -1
            m = s.meta
            lines.append(f"{name}\t{m.patient_id}\t{m.phase}\t{m.slice_index}\t{m.pathology}\t{fold}")
        (out_dir / "manifest.tsv").write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write dataset to {out_dir}: {exc}") from exc


def load_dataset(data_dir):
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.tsv"
    try:
        rows = manifest.read_text().splitlines()[1:]
    except OSError as exc:
        raise IoFailure(f"cannot read {manifest}: {exc}") from exc
    samples = []
    folds = defaultdict(set)
    for row in rows:
        if not row.strip():
            continue
        name, pid, _phase, _idx, _path, fold = row.split("\t")
        try:
            blob = (data_dir / name).read_bytes()
        except OSError as exc:
            raise IoFailure(f"cannot read {data_dir / name}: {exc}") from exc
        samples.append(decode_record(blob).validate(size=None))
        if int(fold) >= 0:
            folds[int(fold)].add(pid)
    plan = FoldPlan(tuple(frozenset(folds[i]) for i in sorted(folds))) if folds else None
    return SliceDataset(samples, plan)

