"""Procedural toy-video corpus and two-view construction.

Clips are short videos of a bright square sprite gliding over a random
smooth background. The class label is the motion pattern alone (axis and
speed); backgrounds and start positions are drawn independently of the
label, so class identity is recoverable from motion but not from any
single frame. Each clip stores T+1 raw frames so that both the photometric
view (first T frames) and the frame-difference view (T consecutive
absolute differences) cover T frames.

All functions are pure in their inputs plus an explicit seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seeding import derive_seed, rng_for

__all__ = [
    "VIEW_RGB",
    "VIEW_RES",
    "Clip",
    "ViewPair",
    "CorpusSplit",
    "motion_pattern",
    "render_clip",
    "generate_corpus",
    "residual_view",
    "crop_resize",
    "hflip",
    "augment",
    "make_view_pair",
    "split_support_query",
    "save_corpus",
    "load_corpus",
]

VIEW_RGB = "rgb"
VIEW_RES = "res"

CORPUS_MAGIC = b"MCNC"
CORPUS_VERSION = 1

_MIN_SIDE = 8
_SPRITE_VALUE = 0.95


@dataclass(frozen=True)
class Clip:
    """A raw clip: (T+1, H, W, C) float64 frames in [0, 1] plus identity."""

    frames: np.ndarray
    label: int
    clip_id: int

    @property
    def n_view_frames(self) -> int:
        return self.frames.shape[0] - 1


@dataclass(frozen=True)
class ViewPair:
    """The two augmented T-frame views of one clip."""

    rgb_view: np.ndarray
    res_view: np.ndarray
    clip_id: int


@dataclass(frozen=True)
class CorpusSplit:
    support: tuple[Clip, ...]
    query: tuple[Clip, ...]
    eval_train: tuple[Clip, ...]
    eval_test: tuple[Clip, ...]


def motion_pattern(class_index: int) -> tuple[int, int]:
    """Per-frame sprite velocity (vx, vy) for a class.

    Even classes move horizontally, odd classes vertically; speed grows by
    one pixel per frame every two classes. Horizontal mirroring maps each
    trajectory onto another instance of the same class, so the flip
    augmentation never crosses class boundaries.
    """
    if class_index < 0:
        raise ValueError(f"class index must be non-negative, got {class_index}")
    speed = 1 + class_index // 2
    if class_index % 2 == 0:
        return (speed, 0)
    return (0, speed)


def _smooth_background(rng: np.random.Generator, h: int, w: int, c: int) -> np.ndarray:
    """Low-resolution noise upsampled bilinearly: cheap smooth texture."""
    coarse = rng.uniform(0.0, 0.5, size=(1, 4, 4, c))
    return _resize_bilinear(coarse, h, w)[0]


def render_clip(seed: int, n_frames: int, h: int, w: int, c: int,
                velocity: tuple[int, int], noise_std: float,
                label: int, clip_id: int) -> Clip:
    """Render one clip with the given per-frame sprite velocity.

    ``velocity`` may be (0, 0), which produces a static sprite; the public
    corpus never contains that pattern but tests use it as a degenerate
    control.
    """
    if h < _MIN_SIDE or w < _MIN_SIDE:
        raise ValueError(f"frame dims too small to render the sprite: {h}x{w} (need >= {_MIN_SIDE})")
    if n_frames < 2 or c < 1:
        raise ValueError(f"need n_frames >= 2 and c >= 1, got {n_frames} and {c}")
    if noise_std < 0.0:
        raise ValueError(f"noise_std must be non-negative, got {noise_std}")
    rng = np.random.default_rng(seed)
    background = _smooth_background(rng, h, w, c)
    sprite_h = max(2, h // 4)
    sprite_w = max(2, w // 4)
    y0 = int(rng.integers(0, h))
    x0 = int(rng.integers(0, w))
    vx, vy = velocity
    frames = np.empty((n_frames, h, w, c), dtype=np.float64)
    for n in range(n_frames):
        frame = background.copy()
        rows = (np.arange(sprite_h) + y0 + n * vy) % h
        cols = (np.arange(sprite_w) + x0 + n * vx) % w
        frame[np.ix_(rows, cols)] = _SPRITE_VALUE
        frames[n] = frame
    if noise_std > 0.0:
        frames += rng.normal(0.0, noise_std, size=frames.shape)
    np.clip(frames, 0.0, 1.0, out=frames)
    return Clip(frames=frames, label=label, clip_id=clip_id)


def generate_corpus(n_classes: int, clips_per_class: int, n_view_frames: int,
                    h: int, w: int, c: int, seed: int,
                    noise_std: float = 0.005) -> list[Clip]:
    """Generate ``n_classes * clips_per_class`` clips, labels 0..n_classes-1.

    Each clip stores ``n_view_frames + 1`` raw frames. Per-clip randomness
    is derived from ``(seed, clip_id)`` only, so clips can be produced in
    any order or in parallel without changing the corpus.
    """
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    if clips_per_class < 2:
        raise ValueError(f"need at least 2 clips per class, got {clips_per_class}")
    if n_view_frames < 2:
        raise ValueError(f"need at least 2 view frames, got {n_view_frames}")
    clips: list[Clip] = []
    clip_id = 0
    for label in range(n_classes):
        velocity = motion_pattern(label)
        for _ in range(clips_per_class):
            clip_seed = derive_seed(seed, "clip", clip_id)
            clips.append(render_clip(clip_seed, n_view_frames + 1, h, w, c,
                                     velocity, noise_std, label, clip_id))
            clip_id += 1
    return clips


def residual_view(frames: np.ndarray) -> np.ndarray:
    """Absolute consecutive frame differences: N frames -> N-1 residuals."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[0] < 2:
        raise ValueError(f"residual_view: need (N>=2, H, W, C) frames, got shape {frames.shape}")
    return np.abs(frames[:-1] - frames[1:])


# ---------------------------------------------------------------------------
# augmentation


def _resize_bilinear(frames: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (T, H, W, C) stack, corners aligned."""
    t, h, w, c = frames.shape
    if (h, w) == (out_h, out_w):
        return frames.copy()
    ys = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).reshape(1, out_h, 1, 1)
    wx = (xs - x0).reshape(1, 1, out_w, 1)
    top = frames[:, y0][:, :, x0] * (1 - wx) + frames[:, y0][:, :, x1] * wx
    bottom = frames[:, y1][:, :, x0] * (1 - wx) + frames[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bottom * wy


def crop_resize(view: np.ndarray, top: int, left: int, crop_h: int, crop_w: int) -> np.ndarray:
    """Crop a window out of every frame and resize back to the input size."""
    t, h, w, c = view.shape
    if not (0 <= top and top + crop_h <= h and 0 <= left and left + crop_w <= w):
        raise ValueError(
            f"crop window {crop_h}x{crop_w} at ({top}, {left}) exceeds frame {h}x{w}"
        )
    window = view[:, top:top + crop_h, left:left + crop_w, :]
    return _resize_bilinear(window, h, w)


def hflip(view: np.ndarray) -> np.ndarray:
    """Mirror every frame left-right."""
    return view[:, :, ::-1, :].copy()


def augment(view: np.ndarray, seed: int,
            scale_range: tuple[float, float] = (0.7, 1.0),
            flip_p: float = 0.5,
            jitter: float = 0.1) -> np.ndarray:
    """Random crop-and-resize, horizontal flip, and brightness shift.

    One spatial transform is drawn per call and applied to every frame of
    the view; the brightness shift is a single additive constant, clamped
    back to [0, 1]. The draw order is fixed (scale, top, left, flip,
    shift) so a given seed always produces the same transform.
    """
    view = np.asarray(view, dtype=np.float64)
    if view.ndim != 4:
        raise ValueError(f"augment: need a (T, H, W, C) view, got shape {view.shape}")
    lo, hi = scale_range
    if not (0.0 < lo <= hi <= 1.0):
        raise ValueError(f"augment: bad scale range {scale_range}")
    rng = np.random.default_rng(seed)
    t, h, w, c = view.shape
    scale = rng.uniform(lo, hi)
    crop_h = max(1, int(round(scale * h)))
    crop_w = max(1, int(round(scale * w)))
    top = int(rng.integers(0, h - crop_h + 1))
    left = int(rng.integers(0, w - crop_w + 1))
    out = crop_resize(view, top, left, crop_h, crop_w)
    if rng.random() < flip_p:
        out = hflip(out)
    if jitter > 0.0:
        out = out + rng.uniform(-jitter, jitter)
    return np.clip(out, 0.0, 1.0)


def make_view_pair(clip: Clip, seed: int,
                   scale_range: tuple[float, float] = (0.7, 1.0),
                   flip_p: float = 0.5,
                   jitter: float = 0.1) -> ViewPair:
    """Build the two augmented views of one clip.

    The residual view is computed from the raw frames first, then each
    view is augmented with its own derived seed. Brightness jitter is
    applied to the photometric view only: residual magnitudes are the
    motion signal, and an additive offset would drown them.
    """
    rgb_raw = clip.frames[:-1]
    res_raw = residual_view(clip.frames)
    rgb_view = augment(rgb_raw, derive_seed(seed, "rgb"),
                       scale_range=scale_range, flip_p=flip_p, jitter=jitter)
    res_view = augment(res_raw, derive_seed(seed, "res"),
                       scale_range=scale_range, flip_p=flip_p, jitter=0.0)
    return ViewPair(rgb_view=rgb_view, res_view=res_view, clip_id=clip.clip_id)


# ---------------------------------------------------------------------------
# splits


def _stratified_halves(clips: list[Clip], fraction: float, rng: np.random.Generator
                       ) -> tuple[list[Clip], list[Clip]]:
    by_label: dict[int, list[Clip]] = {}
    for clip in clips:
        by_label.setdefault(clip.label, []).append(clip)
    first: list[Clip] = []
    second: list[Clip] = []
    for label in sorted(by_label):
        members = sorted(by_label[label], key=lambda cl: cl.clip_id)
        if len(members) < 2:
            raise ValueError(f"class {label} has {len(members)} clip(s); need at least 2 to split")
        order = rng.permutation(len(members))
        n_first = int(round(fraction * len(members)))
        n_first = min(max(n_first, 1), len(members) - 1)
        chosen = set(order[:n_first].tolist())
        for i, clip in enumerate(members):
            (first if i in chosen else second).append(clip)
    first.sort(key=lambda cl: cl.clip_id)
    second.sort(key=lambda cl: cl.clip_id)
    return first, second


def split_support_query(clips: list[Clip], support_fraction: float, seed: int,
                        eval_train_fraction: float = 0.5) -> CorpusSplit:
    """Class-stratified support/query and eval-train/eval-test splits.

    The two partitions are independent: support/query feed training, the
    eval pair feeds the probe and retrieval harness. Within each
    partition the halves are disjoint and every class appears on both
    sides.
    """
    for name, fraction in (("support_fraction", support_fraction),
                           ("eval_train_fraction", eval_train_fraction)):
        if not 0.0 < fraction < 1.0:
            raise ValueError(f"{name} must be in (0, 1), got {fraction}")
    support, query = _stratified_halves(clips, support_fraction, rng_for(seed, "train-split"))
    eval_train, eval_test = _stratified_halves(clips, eval_train_fraction, rng_for(seed, "eval-split"))
    return CorpusSplit(support=tuple(support), query=tuple(query),
                       eval_train=tuple(eval_train), eval_test=tuple(eval_test))


# ---------------------------------------------------------------------------
# flat binary corpus format
#
# header: magic "MCNC", then little-endian uint32 fields
#   version, n_clips, n_classes, n_frames (raw, T+1), H, W, C
# per clip: little-endian int64 clip_id, int64 label,
#   then n_frames*H*W*C little-endian float64 pixels


def save_corpus(path: str, clips: list[Clip]) -> None:
    if not clips:
        raise ValueError("save_corpus: empty corpus")
    shapes = {clip.frames.shape for clip in clips}
    if len(shapes) > 1:
        raise ValueError(f"save_corpus: clips disagree on frame shape: {sorted(shapes)}")
    n_frames, h, w, c = clips[0].frames.shape
    n_classes = max(clip.label for clip in clips) + 1
    header = np.array([CORPUS_VERSION, len(clips), n_classes, n_frames, h, w, c],
                      dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(CORPUS_MAGIC)
        fh.write(header.tobytes())
        for clip in clips:
            fh.write(np.array([clip.clip_id, clip.label], dtype="<i8").tobytes())
            fh.write(clip.frames.astype("<f8").tobytes())


def load_corpus(path: str) -> list[Clip]:
    with open(path, "rb") as fh:
        payload = fh.read()
    if payload[:4] != CORPUS_MAGIC:
        raise ValueError(f"corpus file {path!r}: bad magic {payload[:4]!r}, expected {CORPUS_MAGIC!r}")
    header = np.frombuffer(payload, dtype="<u4", count=7, offset=4)
    version, n_clips, n_classes, n_frames, h, w, c = (int(x) for x in header)
    if version != CORPUS_VERSION:
        raise ValueError(
            f"corpus file {path!r}: format version {version}, this build reads version {CORPUS_VERSION}"
        )
    offset = 4 + header.nbytes
    frame_count = n_frames * h * w * c
    record = 16 + 8 * frame_count
    expected = offset + n_clips * record
    if len(payload) != expected:
        raise ValueError(f"corpus file {path!r}: size {len(payload)} != expected {expected}")
    clips: list[Clip] = []
    for _ in range(n_clips):
        clip_id, label = (int(x) for x in np.frombuffer(payload, dtype="<i8", count=2, offset=offset))
        offset += 16
        frames = np.frombuffer(payload, dtype="<f8", count=frame_count, offset=offset)
        offset += 8 * frame_count
        clips.append(Clip(frames=frames.reshape(n_frames, h, w, c).copy(), label=label, clip_id=clip_id))
    if n_classes != max(clip.label for clip in clips) + 1:
        raise ValueError(f"corpus file {path!r}: header says {n_classes} classes, records disagree")
    return clips
