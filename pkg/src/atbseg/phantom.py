"""Deterministic synthetic vocal-tract-like corpus generation.

Every generator output is a pure function of its seeds. Subjects are star
polygons (radial perturbation around per-contour centers), which are simple
by construction; clips displace the control points sinusoidally over time.
Rendering composes a flat two-level intensity image from the rasterized
union of the three contours, a 1 px Gaussian blur, and a per-clip static
noise field (static so that zero-amplitude motion yields bit-identical
frames).

Ground truth is exact: the annotation written for each frame is the same
geometry the renderer rasterized.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .corpus import (
    BUILTIN_PROFILES,
    Corpus,
    CorpusProfile,
    ContourSet,
    Frame,
    Subject,
    VideoClip,
    save_corpus,
)
from .errors import ConfigError, DataError
from .rasterize import masks_from_contours
from .seeding import stable_seed

DEFAULT_MASTER_SEED = 20250
N_CONTROL_POINTS = 8

# Vertical band centers for the three contours, normalized units.
_BAND_CENTERS = (0.38, 0.50, 0.62)
# Subjects are variations on a shared base shape: a fixed radial profile per
# contour plus per-subject radius/angle/center jitter. Worst-case radius is
# 0.16, which keeps every polygon area above 5% of the frame.
_BASE_RADIUS = 0.20
_SHAPE_WOBBLE = 0.015
_RADIUS_JITTER = 0.020
_ANGLE_JITTER = 0.10
_CENTER_JITTER_X = 0.05
_CENTER_JITTER_Y = 0.02


@dataclass(frozen=True)
class PhantomAnatomy:
    """Synthetic subject: three simple polygons plus intensity parameters."""

    subject_seed: int
    control_points: tuple[np.ndarray, np.ndarray, np.ndarray]  # (K, 2) in [0,1]^2
    tissue_mean: float
    air_mean: float
    noise_sigma: float

    def __post_init__(self) -> None:
        pts = tuple(np.asarray(p, dtype=np.float64) for p in self.control_points)
        object.__setattr__(self, "control_points", pts)
        for i, p in enumerate(pts, start=1):
            if p.shape[0] < 6:
                raise DataError(f"contour {i}: need >= 6 control points")
            if p.min() < 0.0 or p.max() > 1.0:
                raise DataError(f"contour {i}: control points must lie in [0,1]^2")
            if not is_simple_polygon(p):
                raise DataError(f"contour {i}: control points do not form a simple polygon")
        if not (self.tissue_mean > self.air_mean):
            raise DataError("tissue_mean must exceed air_mean")
        if not (0.0 <= self.noise_sigma < 0.2):
            raise DataError("noise_sigma must lie in [0, 0.2)")


@dataclass(frozen=True)
class MotionSpec:
    amplitude: float = 0.03  # fraction of frame width
    period: float = 12.0  # frames
    phase_seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 <= self.amplitude <= 0.1):
            raise ConfigError(f"motion amplitude must lie in [0, 0.1], got {self.amplitude}")
        if not self.period > 1:
            raise ConfigError(f"motion period must exceed 1 frame, got {self.period}")


def polygon_area(points: np.ndarray) -> float:
    """Shoelace area of a closed polygon given as an (N, 2) vertex array."""
    x = points[:, 0]
    y = points[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)))


def _segments_properly_intersect(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        v = float((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
        return (v > 0) - (v < 0)

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    return o1 != o2 and o3 != o4 and 0 not in (o1, o2, o3, o4)


def is_simple_polygon(points: np.ndarray) -> bool:
    """True iff no two non-adjacent edges properly intersect."""
    n = points.shape[0]
    edges = [(points[i], points[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            if _segments_properly_intersect(*edges[i], *edges[j]):
                return False
    return True


def generate_subject(seed: int) -> PhantomAnatomy:
    """Deterministic anatomy for a seed; polygons each cover >= 5% of the frame."""
    rng = np.random.default_rng(seed)
    contours = []
    base_angles = np.linspace(0.0, 2.0 * np.pi, N_CONTROL_POINTS, endpoint=False)
    for ci, band_center in enumerate(_BAND_CENTERS):
        cx = 0.5 + rng.uniform(-_CENTER_JITTER_X, _CENTER_JITTER_X)
        cy = band_center + rng.uniform(-_CENTER_JITTER_Y, _CENTER_JITTER_Y)
        angles = base_angles + rng.uniform(-_ANGLE_JITTER, _ANGLE_JITTER, N_CONTROL_POINTS)
        radii = (
            _BASE_RADIUS
            + _SHAPE_WOBBLE * np.sin(2.0 * angles + 2.0 * np.pi * ci / 3.0)
            + rng.uniform(-_RADIUS_JITTER, _RADIUS_JITTER, N_CONTROL_POINTS)
        )
        pts = np.stack(
            [cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1
        )
        contours.append(pts)
    return PhantomAnatomy(
        subject_seed=seed,
        control_points=tuple(contours),
        tissue_mean=0.60 + 0.20 * rng.uniform(),
        air_mean=0.08 + 0.12 * rng.uniform(),
        noise_sigma=0.005 + 0.02 * rng.uniform(),
    )


def _landmarks_from(c1: np.ndarray, c2: np.ndarray, c3: np.ndarray) -> dict:
    # Synthetic anchors: fixed control points of each contour stand in for
    # the anatomical landmark positions.
    mid = c1.shape[0] // 2
    return {
        "GLTB": (float(c1[0, 0]), float(c1[0, 1])),
        "VEL": (float(c1[mid, 0]), float(c1[mid, 1])),
        "UL": (float(c1[1, 0]), float(c1[1, 1])),
        "TB": (float(c2[0, 0]), float(c2[0, 1])),
        "LL": (float(c3[0, 0]), float(c3[0, 1])),
    }


def generate_clip(
    anatomy: PhantomAnatomy,
    profile: CorpusProfile,
    n_frames: int,
    motion: MotionSpec,
    video_index: int = 1,
    subject_id: str | None = None,
) -> VideoClip:
    """Render a clip: sinusoidal control-point motion over the anatomy."""
    if n_frames < 1:
        raise ConfigError("n_frames must be >= 1")
    w, h = profile.frame_width, profile.frame_height
    if subject_id is None:
        subject_id = f"S{anatomy.subject_seed % 1000}"

    phase_rng = np.random.default_rng(stable_seed(motion.phase_seed, "phase"))
    phases = [
        phase_rng.uniform(0.0, 2.0 * np.pi, size=pts.shape)
        for pts in anatomy.control_points
    ]
    noise_rng = np.random.default_rng(
        stable_seed(anatomy.subject_seed, motion.phase_seed, "noise")
    )
    noise = noise_rng.standard_normal((h, w)) * anatomy.noise_sigma

    frames: list[Frame] = []
    annotations: list[ContourSet] = []
    for t in range(n_frames):
        polys = []
        for pts, phi in zip(anatomy.control_points, phases):
            disp = motion.amplitude * np.sin(2.0 * np.pi * t / motion.period + phi)
            moved = pts + disp
            polys.append(np.stack([moved[:, 0] * (w - 1), moved[:, 1] * (h - 1)], axis=1))
        cs = ContourSet(
            c1=polys[0], c2=polys[1], c3=polys[2],
            landmarks=_landmarks_from(*polys),
        )
        masks = masks_from_contours(cs, w, h)
        union = (masks.m1 | masks.m2 | masks.m3).astype(np.float64)
        img = anatomy.air_mean + (anatomy.tissue_mean - anatomy.air_mean) * union
        img = gaussian_filter(img, sigma=1.0)
        img = np.clip(img + noise, 0.0, 1.0)
        frames.append(
            Frame(
                pixels=img.astype(np.float32),
                subject=subject_id,
                video_index=video_index,
                frame_index=1 + t * profile.subsample_stride,
            )
        )
        annotations.append(cs)
    return VideoClip(
        subject=subject_id,
        video_index=video_index,
        frames=tuple(frames),
        annotations=tuple(annotations),
    )


def build_corpus(
    profile: CorpusProfile,
    subject_ids: list[str],
    clip_lengths: list[int],
    master_seed: int,
    amplitude: float = 0.03,
) -> Corpus:
    """Assemble an in-memory phantom corpus with one clip per entry of clip_lengths."""
    subjects = tuple(Subject(id=sid, corpus=profile.name) for sid in subject_ids)
    clips: dict[str, tuple[VideoClip, ...]] = {}
    for sid in subject_ids:
        anatomy = generate_subject(stable_seed(master_seed, profile.name, sid))
        subject_clips = []
        for vidx, n_frames in enumerate(clip_lengths, start=1):
            motion = MotionSpec(
                amplitude=amplitude,
                period=10.0 + (vidx % 5),
                phase_seed=stable_seed(master_seed, sid, vidx),
            )
            subject_clips.append(
                generate_clip(
                    anatomy, profile, n_frames, motion, video_index=vidx, subject_id=sid
                )
            )
        clips[sid] = tuple(subject_clips)
    return Corpus(profile=profile, subjects=subjects, clips=clips)


PHANTOM_A_SUBJECTS = ["P1", "P2", "P3", "P4", "P5", "P6"]
PHANTOM_A_CLIPS = 15
PHANTOM_A_FRAMES = 40
PHANTOM_B_SUBJECTS = ["Q1", "Q2"]
PHANTOM_B_CLIP_LENGTHS = [91, 69]


def generate_benchmark_suite(
    out_dir: Path, master_seed: int = DEFAULT_MASTER_SEED
) -> tuple[Path, Path]:
    """Write the two phantom corpora and return their manifest paths.

    phantomA: 68x68 profile, 6 subjects P1..P6, 15 clips x 40 frames each.
    phantomB: 84x84 profile, 2 subjects Q1..Q2, clips of 91 and 69 frames.
    """
    out_dir = Path(out_dir)
    corpus_a = build_corpus(
        BUILTIN_PROFILES["corpusA"],
        PHANTOM_A_SUBJECTS,
        [PHANTOM_A_FRAMES] * PHANTOM_A_CLIPS,
        master_seed=stable_seed(master_seed, "phantomA"),
    )
    corpus_b = build_corpus(
        BUILTIN_PROFILES["corpusB"],
        PHANTOM_B_SUBJECTS,
        PHANTOM_B_CLIP_LENGTHS,
        master_seed=stable_seed(master_seed, "phantomB"),
    )
    manifest_a = save_corpus(corpus_a, out_dir / "phantomA")
    manifest_b = save_corpus(corpus_b, out_dir / "phantomB")
    return manifest_a, manifest_b
