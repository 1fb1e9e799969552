"""Synthetic motion corpus, residual views, and speed-controlled clip sampling.

Videos are procedurally generated: each class is a motion pattern of moving
sprites over a per-video static texture, so class identity lives in the
motion, never in appearance. Clips are sampled at playback speed 1x or 2x
(speed s takes every s-th frame); the motion view of a clip is the absolute
frame difference across a gap of t clip frames, computed on the
speed-sampled sequence in integer pixel space before [0,1] normalization.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .seeding import substream

RGB = "rgb"
LONG_RES = "lres"
SPEEDS = (1, 2)
SPEED_MODES = ("different", "same", "random")

DATASET_MAGIC = b"MCPV"
DATASET_VERSION = 1


@dataclass
class VideoRecord:
    id: int
    frames: np.ndarray  # (T, H, W, 3) uint8
    label: int


@dataclass
class Clip:
    data: np.ndarray  # (L, H, W, 3) float32 in [0, 1]
    view: str
    speed: int
    source_id: int
    start: int


@dataclass
class MipTriplet:
    rgb: Clip
    lres_same: Clip  # same speed as rgb
    lres_diff: Clip  # the other speed


@dataclass
class CipPair:
    rgb: Clip
    lres: Clip


@dataclass
class DatasetStore:
    records: list[VideoRecord]
    split: str

    def __len__(self):
        return len(self.records)

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def manifest(self) -> str:
        lines = [f"{r.id}\t{r.label}\t{r.frames.shape[0]}" for r in self.records]
        return "\n".join(lines) + "\n"


# ---- synthetic corpus --------------------------------------------------------

PATTERNS = ("linear", "orbit", "bounce", "zoom", "rotate", "oscillate", "walk",
            "cross")

_PALETTE = np.array([
    (235, 45, 45), (45, 215, 60), (60, 90, 240), (240, 220, 40),
    (225, 60, 225), (50, 220, 220), (245, 245, 245), (245, 140, 30),
], dtype=np.int64)


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    block = max(1, size // 8)
    coarse = rng.integers(30, 190, size=(math.ceil(size / block),
                                         math.ceil(size / block), 3))
    tex = np.repeat(np.repeat(coarse, block, 0), block, 1)[:size, :size]
    tex = tex + rng.integers(-15, 16, size=(size, size, 3))
    tex = np.clip(tex, 0, 255).astype(np.uint8)
    # static decoy sprites: appearance statistics (sprite-pixel coverage,
    # vivid colors) must not correlate with the motion class
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(2.6, 4.6)
        half = size / 2.0
        dy = (yy - cy + half) % size - half
        dx = (xx - cx + half) % size - half
        tex[dy * dy + dx * dx <= r * r] = _color(rng)
    return tex


def _color(rng: np.random.Generator) -> np.ndarray:
    base = _PALETTE[rng.integers(0, len(_PALETTE))]
    return np.clip(base + rng.integers(-20, 21, 3), 0, 255).astype(np.uint8)


def _bounce_path(rng, T, size, radius, speed_lo=1.5, speed_hi=2.5):
    lo, hi = radius + 1.0, size - 2.0 - radius
    pos = np.empty((T, 2))
    p = rng.uniform(lo, hi, 2)
    angle = rng.uniform(0, 2 * np.pi)
    v = rng.uniform(speed_lo, speed_hi) * np.array([np.cos(angle), np.sin(angle)])
    for i in range(T):
        pos[i] = p
        p = p + v
        for axis in range(2):
            if p[axis] < lo:
                p[axis] = 2 * lo - p[axis]
                v[axis] = -v[axis]
            elif p[axis] > hi:
                p[axis] = 2 * hi - p[axis]
                v[axis] = -v[axis]
    return pos


def _sprites_for(pattern: str, rng: np.random.Generator, T: int, size: int):
    """Returns a list of (positions (T,2), radii (T,), color) trajectories."""
    tt = np.arange(T)
    if pattern == "linear":
        r = rng.uniform(3.4, 4.8)
        p0 = rng.uniform(0, size, 2)
        angle = rng.uniform(0, 2 * np.pi)
        v = rng.uniform(1.0, 2.0) * np.array([np.cos(angle), np.sin(angle)])
        pos = p0 + tt[:, None] * v
        return [(pos, np.full(T, r), _color(rng))]
    if pattern == "orbit":
        r = rng.uniform(3.4, 4.8)
        center = rng.uniform(0.35 * size, 0.65 * size, 2)
        rad = rng.uniform(0.2 * size, 0.33 * size)
        w = rng.choice([-1, 1]) * rng.uniform(0.18, 0.35)
        phase = rng.uniform(0, 2 * np.pi)
        pos = center + rad * np.stack(
            [np.cos(w * tt + phase), np.sin(w * tt + phase)], axis=1)
        return [(pos, np.full(T, r), _color(rng))]
    if pattern == "bounce":
        r = rng.uniform(3.4, 4.8)
        return [(_bounce_path(rng, T, size, r, 1.2, 2.0), np.full(T, r),
                 _color(rng))]
    if pattern == "zoom":
        center = np.tile(rng.uniform(0.35 * size, 0.65 * size, 2), (T, 1))
        base = rng.uniform(3.6, 4.4)
        amp = rng.uniform(1.6, 2.4)
        w = 2 * np.pi / rng.uniform(20, 30)
        radii = base + amp * np.sin(w * tt + rng.uniform(0, 2 * np.pi))
        return [(center, radii, _color(rng))]
    if pattern == "rotate":
        center = rng.uniform(0.4 * size, 0.6 * size, 2)
        rad = rng.uniform(0.18 * size, 0.28 * size)
        w = rng.choice([-1, 1]) * rng.uniform(0.18, 0.35)
        phase = rng.uniform(0, 2 * np.pi)
        arm = rad * np.stack([np.cos(w * tt + phase), np.sin(w * tt + phase)], axis=1)
        r = rng.uniform(2.4, 3.3)
        color = _color(rng)
        return [(center + arm, np.full(T, r), color),
                (center - arm, np.full(T, r), color)]
    if pattern == "oscillate":
        r = rng.uniform(3.4, 4.8)
        y = np.full(T, rng.uniform(0.3 * size, 0.7 * size))
        amp = rng.uniform(0.2 * size, 0.3 * size)
        w = rng.uniform(0.25, 0.5)
        x = size / 2 + amp * np.sin(w * tt + rng.uniform(0, 2 * np.pi))
        return [(np.stack([y, x], axis=1), np.full(T, r), _color(rng))]
    if pattern == "walk":
        r = rng.uniform(3.4, 4.8)
        steps = rng.normal(0, 1.5, (T, 2))
        pos = rng.uniform(0, size, 2) + np.cumsum(steps, axis=0)
        return [(pos, np.full(T, r), _color(rng))]
    if pattern == "cross":
        y1 = rng.uniform(0.25 * size, 0.45 * size)
        y2 = rng.uniform(0.55 * size, 0.75 * size)
        s1 = rng.uniform(1.0, 2.0)
        s2 = rng.uniform(1.0, 2.0)
        r = rng.uniform(2.4, 3.3)
        pos1 = np.stack([np.full(T, y1), (s1 * tt) % size], axis=1)
        pos2 = np.stack([np.full(T, y2), (size - 1 - s2 * tt) % size], axis=1)
        return [(pos1, np.full(T, r), _color(rng)),
                (pos2, np.full(T, r), _color(rng))]
    raise ValueError(f"unknown pattern {pattern!r}")


def _render_video(rng: np.random.Generator, pattern: str, T: int, size: int,
                  ) -> np.ndarray:
    background = _texture(rng, size)
    sprites = _sprites_for(pattern, rng, T, size)
    frames = np.repeat(background[None], T, axis=0)
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    half = size / 2.0
    for pos, radii, color in sprites:
        for t in range(T):
            # torus distance so sprites wrap cleanly across borders
            dy = (yy - pos[t, 0] + half) % size - half
            dx = (xx - pos[t, 1] + half) % size - half
            mask = dy * dy + dx * dx <= radii[t] * radii[t]
            frames[t][mask] = color
    return frames


def generate_synthetic_dataset(num_classes: int, videos_per_class: int,
                               frames: int, size: int, seed: int,
                               id_offset: int = 0, split: str = "train",
                               ) -> DatasetStore:
    """Procedural labeled corpus; bit-reproducible for a given seed."""
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if num_classes > len(PATTERNS):
        raise ValueError(f"at most {len(PATTERNS)} motion patterns are defined")
    if frames < 48:
        raise ValueError(
            "videos need >= 48 frames for 2x-speed 16-frame clips with lookahead")
    records = []
    for label in range(num_classes):
        for v in range(videos_per_class):
            rng = substream(seed, "video", split, label, v)
            vid = id_offset + label * videos_per_class + v
            records.append(VideoRecord(
                id=vid,
                frames=_render_video(rng, PATTERNS[label], frames, size),
                label=label))
    return DatasetStore(records=records, split=split)


# ---- residual views ----------------------------------------------------------


def _check_frames(frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ValueError("expected frames shaped (T, H, W, 3)")
    return frames


def long_range_residual_clip(frames, start: int, length: int, t: int,
                             source_id: int = -1, speed: int = 1) -> Clip:
    """Absolute frame difference across a gap of t frames, then [0,1] scaling.

    The difference is taken in integer pixel space so |a - b| == |b - a|
    bit-exactly.
    """
    frames = _check_frames(frames)
    if t < 1:
        raise ValueError("gap t must be >= 1")
    if start < 0 or start + length - 1 + t >= frames.shape[0]:
        raise IndexError(
            f"residual window [{start}, {start + length - 1}] + gap {t} exceeds "
            f"{frames.shape[0]} frames")
    a = frames[start:start + length].astype(np.int16)
    b = frames[start + t:start + t + length].astype(np.int16)
    data = (np.abs(a - b) / np.float32(255.0)).astype(np.float32)
    return Clip(data=data, view=LONG_RES, speed=speed, source_id=source_id,
                start=start)


def residual_clip(frames, start: int, length: int,
                  source_id: int = -1, speed: int = 1) -> Clip:
    """Consecutive-frame difference: the gap-1 special case."""
    return long_range_residual_clip(frames, start, length, 1,
                                    source_id=source_id, speed=speed)


def sample_clip(video: VideoRecord, start: int, speed: int, length: int) -> Clip:
    """RGB view: frames start, start+speed, ..., normalized to [0, 1]."""
    T = video.frames.shape[0]
    last = start + speed * (length - 1)
    if start < 0 or last >= T:
        raise IndexError(
            f"clip needs frame {last} but video {video.id} has {T} frames")
    data = (video.frames[start:last + 1:speed] / np.float32(255.0)).astype(np.float32)
    return Clip(data=data, view=RGB, speed=speed, source_id=video.id, start=start)


def _accelerated(video: VideoRecord, start: int, speed: int, count: int,
                 ) -> np.ndarray:
    """Raw uint8 frames at indices start + speed*k, k < count."""
    T = video.frames.shape[0]
    last = start + speed * (count - 1)
    if start < 0 or last >= T:
        raise IndexError(
            f"accelerated sequence needs frame {last} but video {video.id} "
            f"has {T} frames")
    return video.frames[start:last + 1:speed]


def _lres_from_speed(video: VideoRecord, start: int, speed: int, length: int,
                     t: int) -> Clip:
    # the motion view of a speed-s clip differences the speed-sampled sequence
    acc = _accelerated(video, start, speed, length + t)
    clip = long_range_residual_clip(acc, 0, length, t,
                                    source_id=video.id, speed=speed)
    clip.start = start
    return clip


def _other_speed(speed: int) -> int:
    return SPEEDS[1] if speed == SPEEDS[0] else SPEEDS[0]


def _draw_start(rng, video: VideoRecord, max_span: int, length: int, t: int,
                center_speed: int | None) -> int:
    T = video.frames.shape[0]
    if T - 1 - max_span < 0:
        raise ValueError(
            f"video {video.id} too short ({T} frames) for span {max_span}")
    if center_speed is not None:
        start = similarity_center_sampling(video, length + t, center_speed)
        return min(start, T - 1 - max_span)
    return int(rng.integers(0, T - max_span))


def sample_mip_triplet(video: VideoRecord, seed: int, length: int = 16,
                       t: int = 4, center: bool = False) -> MipTriplet:
    """RGB clip plus two motion clips: one at the RGB speed, one at the other.

    All three share the temporal start so speed is the only difference.
    """
    rng = substream(seed)
    s_r = int(SPEEDS[rng.integers(0, len(SPEEDS))])
    s_diff = _other_speed(s_r)
    max_span = max(SPEEDS) * (length - 1 + t)
    start = _draw_start(rng, video, max_span, length, t,
                        max(SPEEDS) if center else None)
    return MipTriplet(
        rgb=sample_clip(video, start, s_r, length),
        lres_same=_lres_from_speed(video, start, s_r, length, t),
        lres_diff=_lres_from_speed(video, start, s_diff, length, t))


def sample_cip_pair(video: VideoRecord, seed: int, length: int = 16, t: int = 4,
                    speed_mode: str = "different", center: bool = False,
                    ) -> CipPair:
    """RGB clip and motion clip from one video; speeds differ by default.

    speed_mode 'same' and 'random' are the ablation overrides.
    """
    if speed_mode not in SPEED_MODES:
        raise ValueError(f"speed_mode must be one of {SPEED_MODES}")
    rng = substream(seed)
    s_r = int(SPEEDS[rng.integers(0, len(SPEEDS))])
    if speed_mode == "different":
        s_l = _other_speed(s_r)
    elif speed_mode == "same":
        s_l = s_r
    else:
        s_l = int(SPEEDS[rng.integers(0, len(SPEEDS))])
    max_span = max(s_r * (length - 1), s_l * (length - 1 + t))
    start = _draw_start(rng, video, max_span, length, t,
                        max(SPEEDS) if center else None)
    return CipPair(
        rgb=sample_clip(video, start, s_r, length),
        lres=_lres_from_speed(video, start, s_l, length, t))


# ---- augmentation --------------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    top: int
    left: int
    side_h: int
    side_w: int
    flip: bool
    gains: tuple[float, float, float]


def identity_augment(clip: Clip) -> AugmentParams:
    h, w = clip.data.shape[1:3]
    return AugmentParams(0, 0, h, w, False, (1.0, 1.0, 1.0))


def draw_augment_params(rng: np.random.Generator, height: int, width: int,
                        ) -> AugmentParams:
    area = rng.uniform(0.75, 1.0)
    scale = math.sqrt(area)
    side_h = max(1, round(height * scale))
    side_w = max(1, round(width * scale))
    top = int(rng.integers(0, height - side_h + 1))
    left = int(rng.integers(0, width - side_w + 1))
    flip = bool(rng.random() < 0.5)
    gains = tuple(float(g) for g in rng.uniform(0.8, 1.2, 3))
    return AugmentParams(top, left, side_h, side_w, flip, gains)


def _nearest_index(dst: int, src: int) -> np.ndarray:
    return np.minimum((np.arange(dst) + 0.5) * src // dst, src - 1).astype(np.int64)


def apply_augment(clip: Clip, params: AugmentParams) -> Clip:
    """Crop+resize, flip, brightness; one parameter set for the whole clip."""
    h, w = clip.data.shape[1:3]
    data = clip.data[:, params.top:params.top + params.side_h,
                     params.left:params.left + params.side_w, :]
    if params.side_h != h or params.side_w != w:
        data = data[:, _nearest_index(h, params.side_h), :, :]
        data = data[:, :, _nearest_index(w, params.side_w), :]
    if params.flip:
        data = data[:, :, ::-1, :]
    gains = np.asarray(params.gains, dtype=np.float32)
    if np.any(gains != 1.0):
        data = np.clip(data * gains, 0.0, 1.0)
    return Clip(data=np.ascontiguousarray(data), view=clip.view, speed=clip.speed,
                source_id=clip.source_id, start=clip.start)


def augment(clip: Clip, seed: int) -> Clip:
    rng = substream(seed)
    return apply_augment(clip, draw_augment_params(rng, *clip.data.shape[1:3]))


# ---- companion sampler ------------------------------------------------------------


def similarity_center_sampling(video: VideoRecord, length: int, speed: int) -> int:
    """Start index whose window centers on the least-similar consecutive pair.

    Similarity is negated mean absolute pixel difference; ties break toward
    the lowest index; the window is clamped into bounds.
    """
    f = video.frames.astype(np.int16)
    diffs = np.abs(f[1:] - f[:-1]).mean(axis=(1, 2, 3))
    center = int(np.argmax(diffs)) + 1
    start = center - (speed * length) // 2
    max_start = video.frames.shape[0] - 1 - speed * (length - 1)
    return int(np.clip(start, 0, max_start))


# ---- dataset file format ------------------------------------------------------------


def save_dataset(store: DatasetStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<II", DATASET_VERSION, len(store.records)))
        for rec in store.records:
            T, H, W, _ = rec.frames.shape
            fh.write(struct.pack("<IIIII", rec.id, rec.label, T, H, W))
            fh.write(rec.frames.tobytes())


def load_dataset(path, split: str = "train") -> DatasetStore:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DATASET_MAGIC:
            raise ValueError(f"{path}: not a dataset file (magic {magic!r})")
        version, count = struct.unpack("<II", fh.read(8))
        if version != DATASET_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        records = []
        for _ in range(count):
            vid, label, T, H, W = struct.unpack("<IIIII", fh.read(20))
            raw = fh.read(T * H * W * 3)
            frames = np.frombuffer(raw, dtype=np.uint8).reshape(T, H, W, 3)
            records.append(VideoRecord(id=vid, frames=frames.copy(), label=label))
    return DatasetStore(records=records, split=split)


def save_manifest(store: DatasetStore, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(store.manifest())
