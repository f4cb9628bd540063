"""Domain types, annotation schema, and corpus persistence.

A corpus is a directory with a ``manifest.json`` pointing at one grayscale
PNG per frame and one JSON annotation per frame. The manifest schema:

    { "profile": {...},
      "subjects": [ { "id": "F1",
                      "videos": [ { "index": 1,
                                    "frames": [ { "image": "...", "annotation": "..." } ] } ] } ] }

Annotation JSON per frame:

    { "c1": [[x, y], ...], "c2": [...], "c3": [...],
      "landmarks": { "GLTB": [x, y], "TB": [x, y], "VEL": [x, y],
                     "LL": [x, y], "UL": [x, y] } }

Conventions fixed here and used everywhere else:
  * coordinate origin at the top-left pixel center, x rightward, y downward;
  * contour coordinates are serialized with 3 decimal places;
  * frames are stored as 16-bit grayscale PNG; intensities are recovered by
    dividing by 65535, so values live in [0, 1].

Corpus objects are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
from PIL import Image

from .errors import DataError

LANDMARK_KEYS = ("GLTB", "TB", "VEL", "LL", "UL")
CONTOUR_KEYS = ("c1", "c2", "c3")

_SUBJECT_ID_RE = re.compile(r"^[A-Za-z][0-9]+$")

PNG_MAX = 65535  # 16-bit storage


@dataclass(frozen=True)
class CorpusProfile:
    """Acquisition parameters of a corpus."""

    name: str
    frame_width: int
    frame_height: int
    pixel_spacing: float  # mm per pixel
    frame_rate: float  # frames per second
    subsample_stride: int = 1

    def __post_init__(self) -> None:
        if self.frame_width < 16 or self.frame_height < 16:
            raise DataError(f"profile {self.name!r}: frame dims must be >= 16")
        if self.pixel_spacing <= 0:
            raise DataError(f"profile {self.name!r}: pixel_spacing must be > 0")
        if self.frame_rate <= 0:
            raise DataError(f"profile {self.name!r}: frame_rate must be > 0")
        if self.subsample_stride < 1:
            raise DataError(f"profile {self.name!r}: subsample_stride must be >= 1")
        fixed = BUILTIN_PROFILES.get(self.name)
        if fixed is not None and self != fixed:
            raise DataError(
                f"profile {self.name!r} is reserved and must match its fixed parameters"
            )

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "frame_width": self.frame_width,
            "frame_height": self.frame_height,
            "pixel_spacing": self.pixel_spacing,
            "frame_rate": self.frame_rate,
            "subsample_stride": self.subsample_stride,
        }

    @staticmethod
    def from_json(obj: Mapping) -> "CorpusProfile":
        try:
            return CorpusProfile(
                name=str(obj["name"]),
                frame_width=int(obj["frame_width"]),
                frame_height=int(obj["frame_height"]),
                pixel_spacing=float(obj["pixel_spacing"]),
                frame_rate=float(obj["frame_rate"]),
                subsample_stride=int(obj.get("subsample_stride", 1)),
            )
        except KeyError as exc:
            raise DataError(f"manifest profile is missing field {exc}") from exc


# The two acquisition profiles with pinned parameters. Any profile reusing
# these names must match them exactly.
BUILTIN_PROFILES: dict[str, CorpusProfile] = {}
BUILTIN_PROFILES["corpusA"] = CorpusProfile("corpusA", 68, 68, 2.9, 23.18, 1)
BUILTIN_PROFILES["corpusB"] = CorpusProfile("corpusB", 84, 84, 2.4, 83.277, 4)


@dataclass(frozen=True)
class Subject:
    id: str
    corpus: str

    def __post_init__(self) -> None:
        if not _SUBJECT_ID_RE.match(self.id):
            raise DataError(f"subject id {self.id!r} must be one letter followed by digits")


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Frame:
    """One grayscale frame with provenance. Pixels are float32 in [0, 1]."""

    pixels: np.ndarray
    subject: str
    video_index: int
    frame_index: int

    def __post_init__(self) -> None:
        px = _readonly(np.asarray(self.pixels, dtype=np.float32))
        object.__setattr__(self, "pixels", px)
        if px.ndim != 2:
            raise DataError("frame pixels must be a 2-D grid")
        if px.size and (float(px.min()) < 0.0 or float(px.max()) > 1.0):
            raise DataError(
                f"frame {self.subject}/v{self.video_index}/f{self.frame_index}: "
                "intensities must lie in [0, 1]"
            )

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class ContourSet:
    """Three ordered boundary polylines plus the five anatomical landmarks."""

    c1: np.ndarray  # (N, 2) float64, columns (x, y)
    c2: np.ndarray
    c3: np.ndarray
    landmarks: Mapping[str, tuple[float, float]]

    def __post_init__(self) -> None:
        for name in CONTOUR_KEYS:
            poly = _readonly(np.asarray(getattr(self, name), dtype=np.float64))
            object.__setattr__(self, name, poly)
            if poly.ndim != 2 or poly.shape[1] != 2:
                raise DataError(f"contour {name} must be an (N, 2) array")
        lm = {k: (float(v[0]), float(v[1])) for k, v in dict(self.landmarks).items()}
        object.__setattr__(self, "landmarks", lm)
        missing = [k for k in LANDMARK_KEYS if k not in lm]
        if missing:
            raise DataError(f"missing landmark(s): {', '.join(missing)}")

    def contours(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.c1, self.c2, self.c3)

    def validate_bounds(self, width: int, height: int) -> None:
        """Check vertex counts and that all coordinates lie in [0, w) x [0, h)."""
        for name, poly in zip(CONTOUR_KEYS, self.contours()):
            if poly.shape[0] < 3:
                raise DataError(f"contour {name} needs >= 3 vertices, got {poly.shape[0]}")
            if poly.size and (
                poly[:, 0].min() < 0
                or poly[:, 0].max() >= width
                or poly[:, 1].min() < 0
                or poly[:, 1].max() >= height
            ):
                raise DataError(f"contour {name} has out-of-bounds vertices")
        for key, (x, y) in self.landmarks.items():
            if not (0 <= x < width and 0 <= y < height):
                raise DataError(f"landmark {key} out of bounds: ({x}, {y})")

    def to_json(self) -> dict:
        def pts(poly: np.ndarray) -> list:
            return [[round(float(x), 3), round(float(y), 3)] for x, y in poly]

        return {
            "c1": pts(self.c1),
            "c2": pts(self.c2),
            "c3": pts(self.c3),
            "landmarks": {
                k: [round(v[0], 3), round(v[1], 3)] for k, v in self.landmarks.items()
            },
        }

    @staticmethod
    def from_json(obj: Mapping) -> "ContourSet":
        try:
            return ContourSet(
                c1=np.asarray(obj["c1"], dtype=np.float64),
                c2=np.asarray(obj["c2"], dtype=np.float64),
                c3=np.asarray(obj["c3"], dtype=np.float64),
                landmarks={k: tuple(v) for k, v in obj["landmarks"].items()},
            )
        except KeyError as exc:
            raise DataError(f"annotation is missing field {exc}") from exc


@dataclass(frozen=True)
class MaskTriple:
    """Three binary grids; 0 = air, 1 = tissue."""

    m1: np.ndarray
    m2: np.ndarray
    m3: np.ndarray

    def __post_init__(self) -> None:
        shapes = set()
        for name in ("m1", "m2", "m3"):
            m = _readonly(np.asarray(getattr(self, name), dtype=np.uint8))
            object.__setattr__(self, name, m)
            if m.ndim != 2:
                raise DataError(f"mask {name} must be 2-D")
            if m.size and int(m.max()) > 1:
                raise DataError(f"mask {name} must be binary")
            shapes.add(m.shape)
        if len(shapes) != 1:
            raise DataError("mask dimensions differ between m1/m2/m3")

    def masks(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.m1, self.m2, self.m3)

    def as_stack(self) -> np.ndarray:
        """Stack to a (3, H, W) uint8 array."""
        return np.stack(self.masks(), axis=0)

    @staticmethod
    def from_stack(stack: np.ndarray) -> "MaskTriple":
        return MaskTriple(stack[0], stack[1], stack[2])


@dataclass(frozen=True)
class VideoClip:
    subject: str
    video_index: int
    frames: tuple[Frame, ...]
    annotations: tuple[ContourSet, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        if len(self.frames) != len(self.annotations):
            raise DataError(
                f"clip {self.subject}/v{self.video_index}: "
                f"{len(self.frames)} frames but {len(self.annotations)} annotations"
            )
        if not self.frames:
            raise DataError(f"clip {self.subject}/v{self.video_index}: empty clip")
        indices = [f.frame_index for f in self.frames]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise DataError(
                f"clip {self.subject}/v{self.video_index}: frame_index must be strictly increasing"
            )

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class Corpus:
    profile: CorpusProfile
    subjects: tuple[Subject, ...]
    clips: Mapping[str, tuple[VideoClip, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "subjects", tuple(self.subjects))
        object.__setattr__(self, "clips", dict(self.clips))
        seen = set()
        for s in self.subjects:
            if s.id in seen:
                raise DataError(f"duplicate subject id {s.id!r}")
            seen.add(s.id)
        for sid, clips in self.clips.items():
            if sid not in seen:
                raise DataError(f"clips reference unknown subject {sid!r}")
            for clip in clips:
                for fr in clip.frames:
                    if fr.pixels.shape != (self.profile.frame_height, self.profile.frame_width):
                        raise DataError(
                            f"frame {sid}/v{clip.video_index}/f{fr.frame_index}: dims "
                            f"{fr.pixels.shape[::-1]} do not match profile "
                            f"{self.profile.frame_width}x{self.profile.frame_height}"
                        )
                for cs in clip.annotations:
                    cs.validate_bounds(self.profile.frame_width, self.profile.frame_height)

    def subject_ids(self) -> tuple[str, ...]:
        return tuple(s.id for s in self.subjects)

    def clips_for(self, subject_id: str) -> tuple[VideoClip, ...]:
        try:
            return self.clips[subject_id]
        except KeyError:
            raise DataError(f"unknown subject {subject_id!r}") from None

    def clip(self, subject_id: str, video_index: int) -> VideoClip:
        for c in self.clips_for(subject_id):
            if c.video_index == video_index:
                return c
        raise DataError(f"subject {subject_id!r} has no video {video_index}")

    def iter_frames(self) -> Iterator[tuple[Frame, ContourSet]]:
        for sid in self.subject_ids():
            for clip in self.clips.get(sid, ()):
                yield from zip(clip.frames, clip.annotations)

    def n_frames(self) -> int:
        return sum(len(c) for clips in self.clips.values() for c in clips)


# ---------------------------------------------------------------------------
# PNG helpers
# ---------------------------------------------------------------------------

def save_frame_png(pixels: np.ndarray, path: Path) -> None:
    """Quantize a [0, 1] float grid to 16-bit grayscale PNG."""
    arr = np.asarray(pixels, dtype=np.float64)
    q = np.rint(arr * PNG_MAX).astype(np.uint16)
    Image.fromarray(q, mode="I;16").save(path, format="PNG")


def load_frame_png(path: Path) -> np.ndarray:
    if not Path(path).is_file():
        raise DataError(f"missing image file: {path}")
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise DataError(f"image {path} is not single-channel grayscale")
    if arr.dtype == np.uint8:
        scale = 255.0
    else:
        arr = arr.astype(np.uint16)
        scale = float(PNG_MAX)
    return (arr.astype(np.float64) / scale).astype(np.float32)


def save_mask_png(mask: np.ndarray, path: Path) -> None:
    arr = (np.asarray(mask, dtype=np.uint8) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def load_mask_png(path: Path) -> np.ndarray:
    if not Path(path).is_file():
        raise DataError(f"missing mask file: {path}")
    with Image.open(path) as img:
        arr = np.asarray(img)
    return (arr > 127).astype(np.uint8)


# ---------------------------------------------------------------------------
# Manifest save / load
# ---------------------------------------------------------------------------

def _json_bytes(obj: object) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


def _frame_stem(subject_id: str, video_index: int, frame_index: int) -> str:
    return f"{subject_id}_v{video_index:02d}_f{frame_index:04d}"


def save_corpus(corpus: Corpus, directory: Path) -> Path:
    """Write frames, annotations, and a manifest; returns the manifest path.

    Output bytes are a deterministic function of the corpus contents.
    """
    directory = Path(directory)
    images_dir = directory / "images"
    ann_dir = directory / "annotations"
    try:
        directory.mkdir(parents=True, exist_ok=True)
        images_dir.mkdir(exist_ok=True)
        ann_dir.mkdir(exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create corpus directory {directory}: {exc}") from exc

    subjects_json = []
    for subject in corpus.subjects:
        videos_json = []
        for clip in corpus.clips.get(subject.id, ()):
            frames_json = []
            for frame, contours in zip(clip.frames, clip.annotations):
                stem = _frame_stem(subject.id, clip.video_index, frame.frame_index)
                image_rel = f"images/{stem}.png"
                ann_rel = f"annotations/{stem}.json"
                save_frame_png(frame.pixels, directory / image_rel)
                (directory / ann_rel).write_bytes(_json_bytes(contours.to_json()))
                frames_json.append({"image": image_rel, "annotation": ann_rel})
            videos_json.append({"index": clip.video_index, "frames": frames_json})
        subjects_json.append({"id": subject.id, "videos": videos_json})

    manifest = {"profile": corpus.profile.to_json(), "subjects": subjects_json}
    manifest_path = directory / "manifest.json"
    manifest_path.write_bytes(_json_bytes(manifest))
    return manifest_path


def load_corpus(manifest_path: Path) -> Corpus:
    """Load and fully validate a corpus from its manifest."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DataError(f"missing manifest file: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc

    root = manifest_path.parent
    profile = CorpusProfile.from_json(manifest.get("profile", {}))

    subjects: list[Subject] = []
    clips: dict[str, tuple[VideoClip, ...]] = {}
    for subj_obj in manifest.get("subjects", []):
        sid = str(subj_obj["id"])
        subjects.append(Subject(id=sid, corpus=profile.name))
        subject_clips = []
        for video_obj in subj_obj.get("videos", []):
            vidx = int(video_obj["index"])
            frames: list[Frame] = []
            annotations: list[ContourSet] = []
            for t, frame_obj in enumerate(video_obj.get("frames", []), start=1):
                pixels = load_frame_png(root / frame_obj["image"])
                ann_path = root / frame_obj["annotation"]
                if not ann_path.is_file():
                    raise DataError(f"missing annotation file: {ann_path}")
                contours = ContourSet.from_json(json.loads(ann_path.read_text()))
                frames.append(
                    Frame(
                        pixels=pixels,
                        subject=sid,
                        video_index=vidx,
                        frame_index=_infer_frame_index(frame_obj["image"], default=t),
                    )
                )
                annotations.append(contours)
            subject_clips.append(
                VideoClip(subject=sid, video_index=vidx, frames=tuple(frames),
                          annotations=tuple(annotations))
            )
        clips[sid] = tuple(subject_clips)

    return Corpus(profile=profile, subjects=tuple(subjects), clips=clips)


_FRAME_INDEX_RE = re.compile(r"_f(\d+)\.png$")


def _infer_frame_index(image_rel: str, default: int) -> int:
    m = _FRAME_INDEX_RE.search(image_rel)
    return int(m.group(1)) if m else default


def corpora_equal(a: Corpus, b: Corpus, coord_tol: float = 5e-4) -> bool:
    """Observational equality: same structure, exact pixels, coords within tol."""
    if a.profile != b.profile or a.subject_ids() != b.subject_ids():
        return False
    for sid in a.subject_ids():
        ca, cb = a.clips.get(sid, ()), b.clips.get(sid, ())
        if len(ca) != len(cb):
            return False
        for clip_a, clip_b in zip(ca, cb):
            if clip_a.video_index != clip_b.video_index or len(clip_a) != len(clip_b):
                return False
            for fa, fb in zip(clip_a.frames, clip_b.frames):
                if fa.frame_index != fb.frame_index or not np.array_equal(fa.pixels, fb.pixels):
                    return False
            for sa, sb in zip(clip_a.annotations, clip_b.annotations):
                for pa, pb in zip(sa.contours(), sb.contours()):
                    if pa.shape != pb.shape or np.abs(pa - pb).max() > coord_tol:
                        return False
                for key in LANDMARK_KEYS:
                    if any(
                        abs(x - y) > coord_tol
                        for x, y in zip(sa.landmarks[key], sb.landmarks[key])
                    ):
                        return False
    return True
