"""Synthetic gaze data, the DGZS01 on-disk record format and fold construction.

Each synthetic eye crop shows an elliptical eye opening on a skin
background with an iris disc (and pupil) whose centre offset is a linear
function of the gaze target. Subjects differ in iris size and colour,
eyelid aperture, skin tone and head placement; samples add an
illumination gain and pixel noise.
"""

from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DGZS01"
FORMAT_VERSION = 1
MASK_SIZE = 16
TARGET_KINDS = ("gaze3d", "gaze2d")
_HEADER = struct.Struct("<6s5I")
_TAIL = struct.Struct("<I2d2dI")


class DataError(ValueError):
    """Malformed, inconsistent or out-of-range data."""


def default_data_dir():
    return Path(os.environ.get("DEESCO_DATA_DIR", "data"))


# ---------------------------------------------------------------------------
# samples and records
# ---------------------------------------------------------------------------

@dataclass
class GazeSample:
    left_crop: np.ndarray
    right_crop: np.ndarray
    position_mask: np.ndarray
    target_kind: str
    target: tuple
    subject_id: int
    screen_half_extent_mm: tuple = (0.0, 0.0)

    @property
    def gaze3d(self):
        return self.target if self.target_kind == "gaze3d" else None

    @property
    def gaze2d(self):
        return self.target if self.target_kind == "gaze2d" else None


def encode_record(sample):
    left = np.asarray(sample.left_crop, dtype="<f4")
    right = np.asarray(sample.right_crop, dtype="<f4")
    mask = np.asarray(sample.position_mask, dtype="<f4")
    if left.shape != right.shape or left.ndim != 3:
        raise DataError(f"crop shapes differ or are not HxWxC: {left.shape} vs {right.shape}")
    h, w, c = left.shape
    mh, mw = mask.shape
    body = b"".join([
        _HEADER.pack(MAGIC, h, w, c, mh, mw),
        left.tobytes(),
        right.tobytes(),
        mask.tobytes(),
        _TAIL.pack(TARGET_KINDS.index(sample.target_kind), *sample.target,
                   *sample.screen_half_extent_mm, sample.subject_id),
    ])
    return body + struct.pack("<I", zlib.crc32(body))


def decode_record(buf, name="<record>"):
    if len(buf) < _HEADER.size + _TAIL.size + 4:
        raise DataError(f"{name}: record truncated ({len(buf)} bytes)")
    magic, h, w, c, mh, mw = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DataError(f"{name}: bad magic {magic!r}")
    n_img, n_mask = h * w * c, mh * mw
    expected = _HEADER.size + 4 * (2 * n_img + n_mask) + _TAIL.size + 4
    if len(buf) != expected:
        raise DataError(f"{name}: record has {len(buf)} bytes, expected {expected} for {h}x{w}x{c}")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        raise DataError(f"{name}: checksum mismatch")
    pos = _HEADER.size
    left = np.frombuffer(buf, "<f4", n_img, pos).reshape(h, w, c)
    pos += 4 * n_img
    right = np.frombuffer(buf, "<f4", n_img, pos).reshape(h, w, c)
    pos += 4 * n_img
    mask = np.frombuffer(buf, "<f4", n_mask, pos).reshape(mh, mw)
    pos += 4 * n_mask
    kind, t0, t1, sx, sy, subject = _TAIL.unpack_from(buf, pos)
    if kind >= len(TARGET_KINDS):
        raise DataError(f"{name}: unknown target kind {kind}")
    return GazeSample(left.astype(np.float64), right.astype(np.float64), mask.astype(np.float64),
                      TARGET_KINDS[kind], (t0, t1), subject, (sx, sy))


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

@dataclass
class SynthParams:
    crop_size: tuple = (32, 32)
    target_kind: str = "gaze3d"
    gaze_range: tuple = (math.pi / 4, math.pi / 4)
    screen_half_extent_mm: tuple = (150.0, 95.0)
    noise_std: float = 0.02
    gain_range: tuple = (0.8, 1.2)
    iris_radius: tuple = (0.13, 0.17)
    aperture: tuple = (0.30, 0.40)
    eye_half_width: float = 0.44
    offset_max: tuple = (0.22, 0.10)

    def __post_init__(self):
        self.crop_size = tuple(int(v) for v in self.crop_size)
        self.gaze_range = tuple(float(v) for v in self.gaze_range)
        self.screen_half_extent_mm = tuple(float(v) for v in self.screen_half_extent_mm)
        for name in ("gain_range", "iris_radius", "aperture", "offset_max"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))

    def validate(self):
        if self.target_kind not in TARGET_KINDS:
            raise DataError(f"unknown target kind {self.target_kind!r}")
        if min(self.gaze_range) <= 0:
            raise DataError("gaze ranges must be positive")
        if self.iris_radius[1] >= self.aperture[0] or self.iris_radius[1] >= self.eye_half_width:
            raise DataError("iris radius must be smaller than the eye opening")
        if self.offset_max[0] + self.iris_radius[1] > self.eye_half_width:
            raise DataError("horizontal iris travel leaves the eye opening")
        return self


@dataclass
class SubjectAppearance:
    iris_radius: float
    iris_color: np.ndarray
    aperture: float
    skin_color: np.ndarray
    head_cell: tuple


def _subject_appearance(rng, params):
    hue = rng.uniform(0, 2 * math.pi)
    iris = 0.30 + 0.15 * np.array([math.cos(hue), math.cos(hue - 2.1), math.cos(hue + 2.1)])
    return SubjectAppearance(
        iris_radius=rng.uniform(*params.iris_radius),
        iris_color=iris,
        aperture=rng.uniform(*params.aperture),
        skin_color=rng.uniform([0.55, 0.40, 0.30], [0.85, 0.70, 0.60]),
        head_cell=(int(rng.integers(5, 11)), int(rng.integers(5, 11))),
    )


def iris_offset_px(norm_target, params):
    """Pixel offset of the iris centre from the crop centre for a normalised target."""
    h, w = params.crop_size
    return norm_target[0] * params.offset_max[0] * w, norm_target[1] * params.offset_max[1] * h


def render_eye(norm_target, app, params, gain=1.0, noise=None):
    """Render one H x W x 3 eye crop in [0, 1]."""
    h, w = params.crop_size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    ox, oy = iris_offset_px(norm_target, params)
    # soft edges (~1 px) keep sub-pixel iris motion visible in the image
    ew, eh = params.eye_half_width * w, app.aperture * h
    ell = np.sqrt(((xs - cx) / ew) ** 2 + ((ys - cy) / eh) ** 2)
    eye = np.clip((1.0 - ell) * min(ew, eh) + 0.5, 0.0, 1.0)
    r = app.iris_radius * h
    d = np.hypot(xs - cx - ox, ys - cy - oy)
    iris = np.clip(r - d + 0.5, 0.0, 1.0) * eye
    pupil = np.clip(0.45 * r - d + 0.5, 0.0, 1.0) * eye
    sclera = np.array([0.95, 0.95, 0.93])
    img = app.skin_color * (1 - eye[..., None]) + sclera * eye[..., None]
    img = img * (1 - iris[..., None]) + app.iris_color * iris[..., None]
    img = img * (1 - pupil[..., None]) + 0.05 * pupil[..., None]
    img = img * gain
    if noise is not None:
        img = img + noise
    return np.clip(img, 0.0, 1.0)


def position_mask(head_cell, jitter=(0, 0)):
    mask = np.zeros((MASK_SIZE, MASK_SIZE))
    cx, cy = head_cell[0] + jitter[0], head_cell[1] + jitter[1]
    for ex in (cx - 2, cx + 2):
        mask[min(max(cy - 1, 0), MASK_SIZE - 1), min(max(ex, 0), MASK_SIZE - 1)] = 1.0
    return mask


def synth_sample(seed, subject, index, app, params):
    rng = np.random.default_rng([seed, 1, subject, index])
    norm = rng.uniform(-1.0, 1.0, size=2)
    gain = rng.uniform(*params.gain_range)
    h, w = params.crop_size
    crops = [
        render_eye(norm, app, params, gain, rng.normal(0.0, params.noise_std, size=(h, w, 3)))
        for _ in range(2)
    ]
    jitter = tuple(int(v) for v in rng.integers(-1, 2, size=2))
    if params.target_kind == "gaze3d":
        target = (norm[0] * params.gaze_range[0], norm[1] * params.gaze_range[1])
        screen = (0.0, 0.0)
    else:
        target = (float(norm[0]), float(norm[1]))
        screen = params.screen_half_extent_mm
    return GazeSample(crops[0], crops[1], position_mask(app.head_cell, jitter), params.target_kind,
                      tuple(float(t) for t in target), subject, screen)


def synth_generate(path, seed, n_subjects, samples_per_subject, params=None):
    """Write a synthetic dataset (manifest + one DGZS01 record per sample) to ``path``."""
    params = (params or SynthParams()).validate()
    if n_subjects < 2:
        raise DataError("need at least 2 subjects (leave-one-subject-out requires it)")
    if samples_per_subject < 1:
        raise DataError("need at least one sample per subject")
    path = Path(path)
    (path / "samples").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in range(n_subjects):
        app = _subject_appearance(np.random.default_rng([seed, 0, s]), params)
        for i in range(samples_per_subject):
            sample = synth_sample(seed, s, i, app, params)
            rel = f"samples/s{s:03d}_{i:05d}.dgzs"
            (path / rel).write_bytes(encode_record(sample))
            entries.append({"file": rel, "subject": s})
    manifest = {
        "format": "DGZS01",
        "version": FORMAT_VERSION,
        "count": len(entries),
        "subjects": list(range(n_subjects)),
        "target_kind": params.target_kind,
        "crop": [params.crop_size[0], params.crop_size[1], 3],
        "gaze_range": list(params.gaze_range),
        "screen_half_extent_mm": list(params.screen_half_extent_mm) if params.target_kind == "gaze2d" else None,
        "generator": {"seed": seed, "n_subjects": n_subjects, "samples_per_subject": samples_per_subject,
                      "params": asdict(params)},
        "samples": entries,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

@dataclass
class GazeBatch:
    """NCHW arrays for a batch of samples plus normalised targets."""

    left: np.ndarray
    right: np.ndarray
    mask: np.ndarray
    targets: np.ndarray
    subjects: np.ndarray
    raw_targets: np.ndarray = field(default=None)

    def __len__(self):
        return self.left.shape[0]


class GazeDataset:
    """A manifest-backed dataset; records are read lazily and validated on access."""

    def __init__(self, path):
        self.path = Path(path)
        mpath = self.path / "manifest.json"
        if not mpath.is_file():
            raise DataError(f"no manifest.json under {self.path}")
        try:
            self.manifest = json.loads(mpath.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest is not valid JSON: {exc}") from exc
        m = self.manifest
        if m.get("format") != "DGZS01" or m.get("version") != FORMAT_VERSION:
            raise DataError(f"unsupported dataset format {m.get('format')!r} v{m.get('version')}")
        if m["count"] != len(m["samples"]):
            raise DataError(f"manifest declares {m['count']} samples but lists {len(m['samples'])}")
        self.target_kind = m["target_kind"]
        self.gaze_range = tuple(m["gaze_range"])
        self.crop = tuple(m["crop"])
        self.subject_ids = np.array([e["subject"] for e in m["samples"]], dtype=np.int64)
        self._arrays = None

    def __len__(self):
        return len(self.manifest["samples"])

    @property
    def subjects(self):
        return sorted(set(self.subject_ids.tolist()))

    def read(self, i):
        entry = self.manifest["samples"][i]
        f = self.path / entry["file"]
        try:
            buf = f.read_bytes()
        except OSError as exc:
            raise DataError(f"sample {i} ({entry['file']}): {exc}") from exc
        sample = decode_record(buf, name=f"sample {i} ({entry['file']})")
        self._validate(sample, i, entry)
        return sample

    __getitem__ = read

    def _validate(self, sample, i, entry):
        where = f"sample {i} ({entry['file']})"
        if sample.left_crop.shape != self.crop:
            raise DataError(f"{where}: crop shape {sample.left_crop.shape} != manifest {self.crop}")
        if sample.subject_id != entry["subject"]:
            raise DataError(f"{where}: subject {sample.subject_id} != manifest {entry['subject']}")
        if sample.target_kind != self.target_kind:
            raise DataError(f"{where}: target kind {sample.target_kind} != {self.target_kind}")
        limits = self.gaze_range if self.target_kind == "gaze3d" else (1.0, 1.0)
        if any(abs(t) > lim * (1 + 1e-12) for t, lim in zip(sample.target, limits)):
            raise DataError(f"{where}: target {sample.target} outside declared range {limits}")

    def __iter__(self):
        for i in range(len(self)):
            yield self.read(i)

    def iter_shuffled(self, seed):
        for i in np.random.default_rng(seed).permutation(len(self)):
            yield self.read(int(i))

    def arrays(self):
        """All samples stacked as NCHW float64 arrays (cached)."""
        if self._arrays is None:
            samples = list(self)
            self._arrays = {
                "left": np.stack([s.left_crop for s in samples]).transpose(0, 3, 1, 2).copy(),
                "right": np.stack([s.right_crop for s in samples]).transpose(0, 3, 1, 2).copy(),
                "mask": np.stack([s.position_mask for s in samples])[:, None].copy(),
                "target": np.array([s.target for s in samples], dtype=np.float64),
                "subject": np.array([s.subject_id for s in samples], dtype=np.int64),
                "screen": np.array([s.screen_half_extent_mm for s in samples], dtype=np.float64),
            }
        return self._arrays

    def batch(self, indices):
        a = self.arrays()
        idx = np.asarray(indices, dtype=np.int64)
        raw = a["target"][idx]
        return GazeBatch(a["left"][idx], a["right"][idx], a["mask"][idx],
                         normalize_targets(raw, self.target_kind, self.gaze_range), a["subject"][idx], raw)

    def indices_for_subjects(self, subjects):
        return np.flatnonzero(np.isin(self.subject_ids, list(subjects)))


def load_dataset(path):
    return GazeDataset(path)


# ---------------------------------------------------------------------------
# targets and folds
# ---------------------------------------------------------------------------

def normalize_targets(targets, kind, gaze_range):
    t = np.asarray(targets, dtype=np.float64)
    if kind == "gaze3d":
        if min(gaze_range) <= 0:
            raise DataError("gaze ranges must be positive")
        out = t / np.asarray(gaze_range)
    elif kind == "gaze2d":
        out = t.copy()
    else:
        raise DataError(f"unknown target kind {kind!r}")
    if np.any(np.abs(out) > 1 + 1e-12):
        raise DataError("target outside the declared range")
    return out


def denormalize_targets(norm, kind, gaze_range):
    n = np.asarray(norm, dtype=np.float64)
    if kind == "gaze3d":
        return n * np.asarray(gaze_range)
    return n.copy()


@dataclass
class Fold:
    fold_id: int
    train_subjects: list
    test_subjects: list


def make_folds(subjects, scheme="loso", k=None):
    """Subject-disjoint folds: one per subject (``loso``) or ``k`` contiguous groups (``kfold``)."""
    subjects = sorted(set(int(s) for s in subjects))
    if scheme == "loso":
        if len(subjects) < 2:
            raise DataError("leave-one-subject-out needs at least 2 subjects")
        groups = [[s] for s in subjects]
    elif scheme == "kfold":
        if k is None or k < 2:
            raise DataError("kfold needs k >= 2")
        if k > len(subjects):
            raise DataError(f"kfold with k={k} but only {len(subjects)} subjects")
        groups = [g.tolist() for g in np.array_split(np.array(subjects), k)]
    else:
        raise DataError(f"unknown fold scheme {scheme!r}")
    return [Fold(i, [s for s in subjects if s not in g], g) for i, g in enumerate(groups)]
