"""Synthetic videos with person tracks, planted action segments and two-stream features.

Every track carries Gaussian per-frame features: ``mu[s][c] + sigma * noise``
where ``c`` is the class whose (jittered) segment covers the frame, or 0 for
background. The feature onset and offset of each segment are shifted by up
to ``jitter`` frames relative to its ground-truth interval, so per-frame
evidence blurs boundaries while evidence integrated over time does not.

Class means come from ``seed`` alone; the sampled videos come from
``(seed, split)``, so a train and a test split share one signal model.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .tracks import STREAMS, GroundTruthInstance, PersonTrack, assign_frame_labels

FRAME_W, FRAME_H = 320.0, 240.0


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    n_videos: int = 12
    frames_per_video: int = 160
    n_classes: int = 3
    tracks_per_video: int = 2
    track_length: tuple[int, int] = (100, 160)
    segments_per_track: tuple[int, int] = (0, 2)
    segment_length: tuple[int, int] = (30, 60)
    min_gap: int = 20
    feature_dims: tuple[int, ...] = (8, 8)
    mean_scale: float = 1.0
    sigma: float = 1.0
    jitter: int = 3
    box_noise: float = 0.05
    stream_weights: tuple[tuple[float, ...], ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise SpecError("sigma must be positive")
        if self.segment_length[0] < 1 or self.segment_length[1] < self.segment_length[0]:
            raise SpecError(f"bad segment length range {self.segment_length}")
        if self.track_length[1] > self.frames_per_video or self.track_length[0] < 1 \
                or self.track_length[1] < self.track_length[0]:
            raise SpecError(f"bad track length range {self.track_length}")
        lo, hi = self.segments_per_track
        if lo < 0 or hi < lo:
            raise SpecError(f"bad segment count range {self.segments_per_track}")
        if lo and lo * self.segment_length[0] + (lo - 1) * self.min_gap > self.track_length[0]:
            raise SpecError("the required segments cannot fit in the shortest track")
        if self.n_classes < 1 or self.jitter < 0 or self.box_noise < 0:
            raise SpecError("invalid class count, jitter or box noise")
        if len(self.feature_dims) > len(STREAMS):
            raise SpecError(f"at most {len(STREAMS)} streams")
        if self.stream_weights is not None:
            w = np.asarray(self.stream_weights, dtype=np.float64)
            if w.shape != (len(self.feature_dims), self.n_classes):
                raise SpecError(f"stream weights must be (streams, classes), got {w.shape}")

    @property
    def streams(self) -> tuple[str, ...]:
        return STREAMS[:len(self.feature_dims)]

    def weights(self) -> np.ndarray:
        if self.stream_weights is None:
            return np.ones((len(self.feature_dims), self.n_classes))
        return np.asarray(self.stream_weights, dtype=np.float64)


@dataclass
class SyntheticDataset:
    tracks: list[PersonTrack]
    ground_truth: list[GroundTruthInstance]
    labels: dict[tuple[str, str], np.ndarray]
    video_lengths: dict[str, int]
    means: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def track_labels(self, track: PersonTrack) -> np.ndarray:
        return self.labels[(track.video_id, track.track_id)]


def class_means(spec: SyntheticSpec) -> dict[str, np.ndarray]:
    """Per-stream ``(C + 1, D)`` means after applying stream informativeness.

    A weight of 0 makes a class indistinguishable from background in that stream.
    """
    rng = np.random.default_rng([spec.seed, 0])
    w = spec.weights()
    out = {}
    for s, (name, d) in enumerate(zip(spec.streams, spec.feature_dims)):
        raw = rng.normal(size=(spec.n_classes + 1, d))
        raw *= spec.mean_scale / np.linalg.norm(raw, axis=1, keepdims=True)
        mu = raw.copy()
        mu[1:] = raw[0] + w[s][:, None] * (raw[1:] - raw[0])
        out[name] = mu
    return out


def _box_walk(rng, n):
    w, h = rng.uniform(40, 70), rng.uniform(90, 150)
    cx = rng.uniform(w / 2 + 10, FRAME_W - w / 2 - 10)
    cy = rng.uniform(h / 2 + 10, FRAME_H - h / 2 - 10)
    steps = rng.normal(0.0, 1.5, size=(n, 2))
    steps[0] = 0.0
    centers = np.array([cx, cy]) + np.cumsum(steps, axis=0)
    centers[:, 0] = np.clip(centers[:, 0], w / 2, FRAME_W - w / 2)
    centers[:, 1] = np.clip(centers[:, 1], h / 2, FRAME_H - h / 2)
    return np.column_stack([centers[:, 0] - w / 2, centers[:, 1] - h / 2,
                            centers[:, 0] + w / 2, centers[:, 1] + h / 2])


def _plant_segments(rng, spec, length):
    """Non-overlapping segments inside ``[0, length)`` separated by ``min_gap`` frames."""
    lo, hi = spec.segments_per_track
    n = int(rng.integers(lo, hi + 1))
    for _ in range(100):
        lens = rng.integers(spec.segment_length[0], spec.segment_length[1] + 1, size=n)
        slack = length - lens.sum() - max(n - 1, 0) * spec.min_gap
        if slack >= 0:
            break
        n = max(lo, n - 1) if n > lo else n
    else:
        raise SpecError("could not pack the planted segments into the track")
    # distribute the slack over n + 1 gaps
    cuts = np.sort(rng.integers(0, slack + 1, size=n))
    gaps = np.diff(np.concatenate([[0], cuts]))
    segs, pos = [], 0
    for k in range(n):
        pos += gaps[k] + (spec.min_gap if k else 0)
        segs.append((int(pos), int(pos + lens[k] - 1)))
        pos += lens[k]
    return segs


def generate(spec: SyntheticSpec, split: str = "train") -> SyntheticDataset:
    rng = np.random.default_rng([spec.seed, 1, zlib.crc32(split.encode())])
    means = class_means(spec)
    tracks, gts, labels, lengths = [], [], {}, {}
    for v in range(spec.n_videos):
        vid = f"{split}{v:03d}"
        lengths[vid] = spec.frames_per_video
        video_tracks, video_gts = [], []
        for k in range(spec.tracks_per_video):
            n = int(rng.integers(spec.track_length[0], spec.track_length[1] + 1))
            start = int(rng.integers(0, spec.frames_per_video - n + 1))
            boxes = _box_walk(rng, n)
            feat_class = np.zeros(n, dtype=np.int64)
            track_gts = []
            for a, b in _plant_segments(rng, spec, n):
                c = int(rng.integers(1, spec.n_classes + 1))
                gt_boxes = boxes[a:b + 1].copy()
                size = np.tile(gt_boxes[:, 2:] - gt_boxes[:, :2], 2)
                gt_boxes += spec.box_noise * size * rng.normal(size=gt_boxes.shape)
                gt_boxes[:, 2:] = np.maximum(gt_boxes[:, 2:], gt_boxes[:, :2] + 1.0)
                track_gts.append(GroundTruthInstance(vid, start + a, gt_boxes, class_id=c))
                lo = max(0, a + int(rng.integers(-spec.jitter, spec.jitter + 1)))
                hi = min(n - 1, b + int(rng.integers(-spec.jitter, spec.jitter + 1)))
                feat_class[lo:hi + 1] = c
            feats = {}
            for name in spec.streams:
                noise = rng.normal(size=(n, means[name].shape[1]))
                # float32 rounding makes features round-trip the TFV format exactly
                feats[name] = (means[name][feat_class] + spec.sigma * noise).astype(np.float32).astype(np.float64)
            video_tracks.append(PersonTrack(vid, start, boxes, track_id=f"t{k}", features=feats))
            video_gts.extend(track_gts)
        for track in video_tracks:
            labels[(vid, track.track_id)] = assign_frame_labels(track, video_gts)
        tracks.extend(video_tracks)
        gts.extend(video_gts)
    return SyntheticDataset(tracks, gts, labels, lengths, means)


def make_stream_asymmetric(spec: SyntheticSpec, factor: float = 1.0) -> SyntheticSpec:
    """Make each stream informative for its own half of the classes.

    Stream 0 owns classes ``1..ceil(C/2)``, stream 1 the rest; a stream's
    weight for a class it does not own becomes ``1 - factor``.
    """
    if spec.n_classes < 2:
        raise SpecError("stream asymmetry needs at least two classes")
    if len(spec.feature_dims) != 2:
        raise SpecError("stream asymmetry needs exactly two streams")
    if factor == 0:
        return spec
    w = spec.weights().copy()
    half = (spec.n_classes + 1) // 2
    w[0, half:] *= 1.0 - factor
    w[1, :half] *= 1.0 - factor
    return replace(spec, stream_weights=tuple(map(tuple, w)))
