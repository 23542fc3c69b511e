"""Multi-camera tracklet corpora: synthesis and line-delimited JSON I/O.

A synthetic identity is a standard-normal prototype vector.  Each camera
applies its own affine distortion x -> (I + s G / sqrt(D)) x + b to every
prototype, where s is ``camera_shift_scale`` and the offset b has
per-coordinate std ``OFFSET_GAIN * s``; the offset is what makes raw
cross-camera ranking hard.  Each tracklet (fragment) of an identity in a
camera is a set of frames drawn around that distorted prototype with
isotropic Gaussian noise of std ``identity_spread``.  Per-camera tracklet labels are
assigned in enumeration order, so one identity fragmented into several
tracklets receives several distinct labels, just as an automatic tracker
would produce.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from utal.errors import ConfigError, CorpusFormatError

OFFSET_GAIN = 3.0

__all__ = [
    "OFFSET_GAIN",
    "Camera",
    "Corpus",
    "GenConfig",
    "Tracklet",
    "corpus_to_lines",
    "generate_corpus",
    "load_corpus",
    "save_corpus",
]


@dataclass(eq=False)
class Tracklet:
    label: int
    frames: np.ndarray
    gt_identity: int | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise CorpusFormatError("tracklet needs a non-empty 2-D frame array")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Tracklet):
            return NotImplemented
        return (
            self.label == other.label
            and self.gt_identity == other.gt_identity
            and self.frames.shape == other.frames.shape
            and bool(np.array_equal(self.frames, other.frames))
        )


@dataclass(eq=True)
class Camera:
    index: int
    tracklets: list[Tracklet] = field(default_factory=list)

    @property
    def num_tracklets(self) -> int:
        return len(self.tracklets)


@dataclass(eq=True)
class Corpus:
    """Tracklets grouped by camera.

    ``gt_identity`` is carried for evaluation and the weakly supervised
    mode only; unsupervised training never reads it.
    """

    cameras: list[Camera]
    raw_dim: int

    def __post_init__(self):
        if len(self.cameras) < 2:
            raise CorpusFormatError(f"need at least 2 cameras, got {len(self.cameras)}")
        for t, cam in enumerate(self.cameras):
            if cam.index != t:
                raise CorpusFormatError(f"camera indices must be contiguous, found {cam.index} at position {t}")
            if not cam.tracklets:
                raise CorpusFormatError(f"camera {t} has no tracklets")
            labels = [tr.label for tr in cam.tracklets]
            if labels != list(range(len(labels))):
                raise CorpusFormatError(f"camera {t} labels must be 0..M-1 in order")
            for tr in cam.tracklets:
                if tr.frames.shape[1] != self.raw_dim:
                    raise CorpusFormatError(
                        f"camera {t} tracklet {tr.label}: frame dim {tr.frames.shape[1]} != raw_dim {self.raw_dim}"
                    )

    @property
    def num_cameras(self) -> int:
        return len(self.cameras)

    @property
    def tracklets_per_camera(self) -> list[int]:
        return [cam.num_tracklets for cam in self.cameras]

    @property
    def num_tracklets(self) -> int:
        return sum(self.tracklets_per_camera)

    @property
    def num_frames(self) -> int:
        return sum(tr.num_frames for cam in self.cameras for tr in cam.tracklets)

    @property
    def has_ground_truth(self) -> bool:
        return all(tr.gt_identity is not None for cam in self.cameras for tr in cam.tracklets)

    def identities(self, camera: int) -> np.ndarray:
        """Ground-truth identity of every tracklet of ``camera`` (label order)."""
        ids = [tr.gt_identity for tr in self.cameras[camera].tracklets]
        if any(i is None for i in ids):
            raise CorpusFormatError(f"camera {camera} has tracklets without gt_identity")
        return np.array(ids, dtype=int)

    def with_identities(self, mapping) -> "Corpus":
        """Copy of the corpus with gt identities replaced by ``mapping(t, label, old)``."""
        cams = [
            Camera(
                cam.index,
                [Tracklet(tr.label, tr.frames, mapping(cam.index, tr.label, tr.gt_identity)) for tr in cam.tracklets],
            )
            for cam in self.cameras
        ]
        return Corpus(cams, self.raw_dim)


@dataclass(kw_only=True)
class GenConfig:
    seed: int
    num_cameras: int = 3
    num_identities: int = 20
    raw_dim: int = 32
    frames_per_tracklet_range: tuple[int, int] = (2, 6)
    fragmentation_factor_range: tuple[int, int] = (1, 3)
    identity_spread: float = 0.1
    camera_shift_scale: float = 0.3
    presence_prob: float = 1.0

    def validate(self):
        if not isinstance(self.seed, (int, np.integer)) or isinstance(self.seed, bool):
            raise ConfigError("seed", f"must be an integer, got {self.seed!r}")
        if self.num_cameras < 2:
            raise ConfigError("num_cameras", "must be >= 2")
        for name in ("num_identities", "raw_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be positive")
        for name in ("frames_per_tracklet_range", "fragmentation_factor_range"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ConfigError(name, f"need 1 <= min <= max, got ({lo}, {hi})")
        if self.identity_spread < 0:
            raise ConfigError("identity_spread", "must be >= 0")
        if self.camera_shift_scale < 0:
            raise ConfigError("camera_shift_scale", "must be >= 0")
        if not 0.0 <= self.presence_prob <= 1.0:
            raise ConfigError("presence_prob", "must lie in [0, 1]")


def generate_corpus(cfg: GenConfig) -> Corpus:
    """Synthesise a corpus; a pure function of ``cfg`` (seed included)."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    dim = cfg.raw_dim
    prototypes = rng.standard_normal((cfg.num_identities, dim))
    # per-camera affine distortion x -> A x + b
    mixing = rng.standard_normal((cfg.num_cameras, dim, dim)) / np.sqrt(dim)
    offsets = rng.standard_normal((cfg.num_cameras, dim))
    transforms = [
        (np.eye(dim) + cfg.camera_shift_scale * mixing[t], OFFSET_GAIN * cfg.camera_shift_scale * offsets[t])
        for t in range(cfg.num_cameras)
    ]

    f_lo, f_hi = cfg.fragmentation_factor_range
    n_lo, n_hi = cfg.frames_per_tracklet_range
    cameras = []
    for t, (a, b) in enumerate(transforms):
        tracklets = []
        for ident in range(cfg.num_identities):
            present = rng.random() < cfg.presence_prob
            n_frag = int(rng.integers(f_lo, f_hi + 1))
            if not present:
                continue
            centre = a @ prototypes[ident] + b
            for _ in range(n_frag):
                n_frames = int(rng.integers(n_lo, n_hi + 1))
                frames = centre + cfg.identity_spread * rng.standard_normal((n_frames, dim))
                tracklets.append(Tracklet(len(tracklets), frames, ident))
        if not tracklets:
            raise ConfigError("presence_prob", f"camera {t} received no tracklets; raise presence_prob or num_identities")
        cameras.append(Camera(t, tracklets))
    return Corpus(cameras, dim)


def corpus_to_lines(corpus: Corpus) -> Iterable[str]:
    for cam in corpus.cameras:
        for tr in cam.tracklets:
            yield json.dumps(
                {
                    "camera": cam.index,
                    "label": tr.label,
                    "gt_identity": tr.gt_identity,
                    "frames": tr.frames.tolist(),
                }
            )


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in corpus_to_lines(corpus):
            fh.write(line + "\n")


def _parse_record(obj, lineno):
    if not isinstance(obj, dict):
        raise CorpusFormatError("expected a JSON object", lineno)
    missing = {"camera", "label", "frames"} - obj.keys()
    if missing:
        raise CorpusFormatError(f"missing field(s) {sorted(missing)}", lineno)
    cam, label, gt = obj["camera"], obj["label"], obj.get("gt_identity")
    for name, val in (("camera", cam), ("label", label)):
        if not isinstance(val, int) or isinstance(val, bool) or val < 0:
            raise CorpusFormatError(f"{name} must be a non-negative integer", lineno)
    if gt is not None and (not isinstance(gt, int) or isinstance(gt, bool)):
        raise CorpusFormatError("gt_identity must be an integer or null", lineno)
    frames = obj["frames"]
    if not isinstance(frames, list) or not frames:
        raise CorpusFormatError("frames must be a non-empty array", lineno)
    try:
        arr = np.array(frames, dtype=float)
    except (TypeError, ValueError) as exc:
        raise CorpusFormatError(f"frames must be equal-length numeric arrays ({exc})", lineno) from None
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise CorpusFormatError("frames must be equal-length numeric arrays", lineno)
    return cam, label, gt, arr


def load_corpus(path) -> Corpus:
    """Read a corpus file; camera ids and per-camera labels are re-densified."""
    records = []
    raw_dim = None
    with open(Path(path), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"invalid JSON ({exc.msg})", lineno) from None
            cam, label, gt, frames = _parse_record(obj, lineno)
            if raw_dim is None:
                raw_dim = frames.shape[1]
            elif frames.shape[1] != raw_dim:
                raise CorpusFormatError(f"frame dimension {frames.shape[1]} != {raw_dim} of earlier lines", lineno)
            records.append((cam, label, gt, frames, lineno))
    if not records:
        raise CorpusFormatError("no tracklets")

    by_cam: dict[int, dict[int, tuple]] = {}
    for cam, label, gt, frames, lineno in records:
        bucket = by_cam.setdefault(cam, {})
        if label in bucket:
            raise CorpusFormatError(f"duplicate label {label} in camera {cam}", lineno)
        bucket[label] = (gt, frames)
    cameras = []
    for t, cam in enumerate(sorted(by_cam)):
        bucket = by_cam[cam]
        tracklets = [Tracklet(i, bucket[lab][1], bucket[lab][0]) for i, lab in enumerate(sorted(bucket))]
        cameras.append(Camera(t, tracklets))
    return Corpus(cameras, raw_dim)
