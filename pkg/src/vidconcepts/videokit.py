"""Triplet construction, augmentation and the synthetic video corpus.

Clips are plain ``float32`` arrays laid out ``[T, H, W, Ch]`` with values in
``[0, 1]``. Frame differences share that layout but are signed.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidInputError

MANIFEST_NAME = "manifest.tsv"
MANIFEST_COLUMNS = ("sample_id", "static_label", "dynamic_label", "path")

DYNAMIC_KINDS = ("horizontal_drift", "vertical_drift", "circular_orbit", "oscillation")


@dataclass
class Triplet:
    v: np.ndarray
    s: np.ndarray
    d: np.ndarray

    def as_tuple(self):
        return self.v, self.s, self.d


@dataclass
class SynthSample:
    clip: np.ndarray
    static_label: int
    dynamic_label: int
    sample_id: str = ""


@dataclass
class AugmentConfig:
    """Spatio-temporal crop + horizontal flip, applied identically to v, s, d."""

    crop_frames: int | None = None  # None keeps the full temporal extent
    crop_scale: tuple[float, float] = (0.6, 1.0)  # fraction of side length
    out_size: tuple[int, int] | None = None  # None keeps the input H, W
    flip: bool = True


def _check_clip(clip, min_frames=1):
    clip = np.asarray(clip)
    if clip.ndim != 4:
        raise InvalidInputError(f"clip must be [T, H, W, Ch], got shape {clip.shape}")
    if clip.shape[0] < min_frames or min(clip.shape) == 0:
        raise InvalidInputError(
            f"clip needs at least {min_frames} frame(s) and nonzero extents, got {clip.shape}")
    return clip


def make_static_frame(clip, rng_seed):
    """Replicate one uniformly chosen frame of ``clip`` across time."""
    clip = _check_clip(clip)
    t = int(np.random.default_rng(rng_seed).integers(clip.shape[0]))
    return np.repeat(clip[t:t + 1], clip.shape[0], axis=0)


def make_frame_difference(clip):
    """Adjacent-frame differences; the last difference is repeated to keep length T."""
    clip = _check_clip(clip, min_frames=2)
    diff = clip[1:] - clip[:-1]
    return np.concatenate([diff, diff[-1:]], axis=0)


def _resize_frames(frames, size):
    if frames.shape[1:3] == tuple(size):
        return frames
    x = torch.from_numpy(np.ascontiguousarray(frames)).permute(0, 3, 1, 2)
    x = F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)
    return x.permute(0, 2, 3, 1).contiguous().numpy()


def augment(clip, rng, cfg: AugmentConfig | None = None):
    cfg = cfg or AugmentConfig()
    clip = _check_clip(clip)
    T, H, W, _ = clip.shape
    tc = T if cfg.crop_frames is None else int(cfg.crop_frames)
    if not 1 <= tc <= T:
        raise InvalidInputError(f"crop_frames={tc} outside [1, {T}]")
    lo, hi = cfg.crop_scale
    scale = float(rng.uniform(lo, hi))
    ch, cw = max(1, int(round(H * scale))), max(1, int(round(W * scale)))
    t0 = int(rng.integers(T - tc + 1))
    y0 = int(rng.integers(H - ch + 1))
    x0 = int(rng.integers(W - cw + 1))
    flip = bool(cfg.flip and rng.random() < 0.5)
    out = clip[t0:t0 + tc, y0:y0 + ch, x0:x0 + cw]
    out = _resize_frames(out, cfg.out_size or (H, W))
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0), dtype=clip.dtype)


def center_crop(clip, cfg: AugmentConfig | None = None, scale=1.0):
    """Deterministic evaluation view: centered window, no flip."""
    cfg = cfg or AugmentConfig()
    clip = _check_clip(clip)
    T, H, W, _ = clip.shape
    tc = T if cfg.crop_frames is None else int(cfg.crop_frames)
    ch, cw = max(1, int(round(H * scale))), max(1, int(round(W * scale)))
    t0, y0, x0 = (T - tc) // 2, (H - ch) // 2, (W - cw) // 2
    out = clip[t0:t0 + tc, y0:y0 + ch, x0:x0 + cw]
    return np.ascontiguousarray(_resize_frames(out, cfg.out_size or (H, W)), dtype=clip.dtype)


def make_triplet(clip, rng_seed, aug: AugmentConfig | None = None, train=True):
    """Build (v, s, d) from one clip.

    The static frame is drawn from inside the cropped window, and all three
    members come from the same crop and flip.
    """
    clip = _check_clip(clip, min_frames=2)
    rng = np.random.default_rng(rng_seed)
    v = augment(clip, rng, aug) if train else center_crop(clip, aug)
    if v.shape[0] < 2:
        raise InvalidInputError("crop left fewer than 2 frames")
    s = make_static_frame(v, int(rng.integers(2**63)))
    d = make_frame_difference(v)
    return Triplet(v=v, s=s, d=d)


# ---------------------------------------------------------------- synthetic data

# The sprite is added on top of the background, never pasted over it, so frame
# differences carry motion only and no trace of the background color.
BACKGROUND_MAX = 0.55
SPRITE_GAIN = 1.0 - BACKGROUND_MAX

_PALETTE = 0.8 * np.array([
    [0.65, 0.15, 0.15],
    [0.12, 0.50, 0.18],
    [0.15, 0.22, 0.65],
    [0.60, 0.55, 0.10],
    [0.50, 0.15, 0.55],
    [0.10, 0.50, 0.55],
    [0.55, 0.35, 0.12],
    [0.35, 0.35, 0.35],
], dtype=np.float32)


def _background(label, n_classes, H, W, Ch, rng):
    base = _PALETTE[label % len(_PALETTE)]
    if label >= len(_PALETTE):
        base = np.roll(base, label // len(_PALETTE)) * 0.8
    base = np.resize(base, Ch)
    theta = np.pi * label / n_classes
    freq = 3.0 + 2.0 * (label % 3)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float32)
    phase = rng.uniform(0, 2 * np.pi)
    proj = (xx * np.cos(theta) + yy * np.sin(theta)) / max(H, W)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * proj + phase)
    gain = 1.0 + rng.uniform(-0.08, 0.08)
    bg = base[None, None, :] * gain * (0.7 + 0.3 * stripes[..., None])
    bg = bg + rng.normal(0.0, 0.02, size=(H, W, Ch))
    return np.clip(bg, 0.0, BACKGROUND_MAX).astype(np.float32)


def trajectory_offsets(dynamic_label, T, extent):
    """Sprite displacement (dy, dx) per frame; the offset at t=0 is zero."""
    kind = dynamic_label % len(DYNAMIC_KINDS)
    variant = dynamic_label // len(DYNAMIC_KINDS)
    sign = -1.0 if variant % 2 else 1.0
    amp = extent / (1.0 + 0.5 * (variant // 2))
    u = np.arange(T, dtype=np.float64) / max(T - 1, 1)
    if kind == 0:
        dy, dx = np.zeros(T), sign * 0.45 * amp * u
    elif kind == 1:
        dy, dx = sign * 0.45 * amp * u, np.zeros(T)
    elif kind == 2:
        r = 0.18 * amp
        ang = sign * 2 * np.pi * u
        dy, dx = r * np.sin(ang), r * (np.cos(ang) - 1.0)
    else:
        a = 0.15 * amp * np.sin(2 * np.pi * 2 * u)
        dy, dx = a, -sign * a
    return np.stack([dy, dx], axis=1)


def render_clip(static_label, dynamic_label, shape, n_static_classes, rng,
                sprite_frac=0.15, start=None):
    T, H, W, Ch = shape
    size = max(2, int(round(sprite_frac * min(H, W))))
    bg = _background(static_label, n_static_classes, H, W, Ch, rng)
    offs = trajectory_offsets(dynamic_label, T, min(H, W))
    if start is None:
        lo = -offs.min(axis=0)
        hi = np.array([H - size, W - size]) - offs.max(axis=0)
        hi = np.maximum(hi, lo)
        start = np.array([rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1])])
    pos = np.rint(np.asarray(start, dtype=np.float64)[None, :] + offs).astype(int)
    pos[:, 0] = np.clip(pos[:, 0], 0, H - size)
    pos[:, 1] = np.clip(pos[:, 1], 0, W - size)
    clip = np.repeat(bg[None], T, axis=0)
    for t, (y, x) in enumerate(pos):
        clip[t, y:y + size, x:x + size] += SPRITE_GAIN
    return clip


def generate_synth_dataset(n_samples, n_static_classes, n_dynamic_classes, shape,
                           rng_seed, sprite_frac=0.15, fixed_start=None):
    """Render clips whose background depends only on the static label and whose
    sprite trajectory depends only on the dynamic label.

    ``fixed_start`` pins the sprite's first position (row, col) for every sample.
    """
    if n_static_classes < 2 or n_dynamic_classes < 2:
        raise InvalidInputError("need at least 2 static and 2 dynamic classes")
    T, H, W, Ch = (int(x) for x in shape)
    size = max(2, int(round(sprite_frac * min(H, W))))
    if T < 2 or H < size or W < size or Ch < 1:
        raise InvalidInputError(f"degenerate shape {tuple(shape)} for sprite size {size}")
    rng = np.random.default_rng(rng_seed)
    static = rng.integers(n_static_classes, size=n_samples)
    dynamic = rng.integers(n_dynamic_classes, size=n_samples)
    clips = np.empty((n_samples, T, H, W, Ch), dtype=np.float32)
    width = max(4, len(str(n_samples - 1)))
    samples = []
    for i in range(n_samples):
        clips[i] = render_clip(int(static[i]), int(dynamic[i]), (T, H, W, Ch),
                               n_static_classes, rng, sprite_frac, start=fixed_start)
        samples.append(SynthSample(clips[i], int(static[i]), int(dynamic[i]),
                                   f"synth_{i:0{width}d}"))
    return samples


# ---------------------------------------------------------------- persistence

@dataclass
class ClipDataset:
    """Stacked clips plus labels; what the trainer and evaluator consume."""

    clips: np.ndarray
    static_labels: np.ndarray
    dynamic_labels: np.ndarray
    ids: list = field(default_factory=list)
    n_static_classes: int = 0
    n_dynamic_classes: int = 0

    def __len__(self):
        return len(self.clips)

    @property
    def action_labels(self):
        return self.static_labels * max(self.n_dynamic_classes, 1) + self.dynamic_labels

    def labels(self, kind):
        if kind == "static":
            return self.static_labels
        if kind == "dynamic":
            return self.dynamic_labels
        if kind == "action":
            return self.action_labels
        raise InvalidInputError(f"unknown label kind {kind!r}")

    @classmethod
    def from_samples(cls, samples: Sequence[SynthSample], n_static_classes=None,
                     n_dynamic_classes=None):
        if not samples:
            raise InvalidInputError("empty sample list")
        st = np.array([s.static_label for s in samples], dtype=np.int64)
        dy = np.array([s.dynamic_label for s in samples], dtype=np.int64)
        base = samples[0].clip.base
        if base is not None and base.ndim == 5 and len(base) == len(samples):
            clips = base
        else:
            clips = np.stack([s.clip for s in samples])
        return cls(clips, st, dy, [s.sample_id for s in samples],
                   n_static_classes or int(st.max()) + 1,
                   n_dynamic_classes or int(dy.max()) + 1)


def save_dataset(samples, out_dir, n_static_classes=None, n_dynamic_classes=None):
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(MANIFEST_COLUMNS)]
    for s in samples:
        rel = f"clips/{s.sample_id}.npy"
        np.save(out / rel, s.clip)
        lines.append(f"{s.sample_id}\t{s.static_label}\t{s.dynamic_label}\t{rel}")
    ns = n_static_classes or max(s.static_label for s in samples) + 1
    nd = n_dynamic_classes or max(s.dynamic_label for s in samples) + 1
    header = f"# n_static_classes={ns} n_dynamic_classes={nd}"
    (out / MANIFEST_NAME).write_text("\n".join([header] + lines) + "\n")
    return out / MANIFEST_NAME


def read_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    meta, rows = {}, []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                k, _, v = tok.partition("=")
                meta[k] = int(v)
            continue
        fields = line.split("\t")
        if tuple(fields) == MANIFEST_COLUMNS:
            continue
        if len(fields) != len(MANIFEST_COLUMNS):
            raise InvalidInputError(f"malformed manifest line: {line!r}")
        rows.append((fields[0], int(fields[1]), int(fields[2]), fields[3]))
    return meta, rows


def load_dataset(data_dir):
    data_dir = Path(data_dir)
    meta, rows = read_manifest(data_dir)
    if not rows:
        raise InvalidInputError(f"no samples listed in {data_dir}")
    first = np.load(data_dir / rows[0][3])
    clips = np.empty((len(rows),) + first.shape, dtype=np.float32)
    for i, (_, _, _, rel) in enumerate(rows):
        clips[i] = np.load(data_dir / rel)
    st = np.array([r[1] for r in rows], dtype=np.int64)
    dy = np.array([r[2] for r in rows], dtype=np.int64)
    return ClipDataset(clips, st, dy, [r[0] for r in rows],
                       meta.get("n_static_classes", int(st.max()) + 1),
                       meta.get("n_dynamic_classes", int(dy.max()) + 1))


_IMAGE_EXT = {".png", ".jpg", ".jpeg", ".bmp"}


def load_frame_folder(folder, size=None):
    """Read one clip stored as a folder of frame images (sorted by file name)."""
    from PIL import Image

    files = sorted(p for p in Path(folder).iterdir() if p.suffix.lower() in _IMAGE_EXT)
    if not files:
        raise InvalidInputError(f"no frame images in {folder}")
    frames = []
    for p in files:
        img = Image.open(p).convert("RGB")
        if size is not None:
            img = img.resize((size[1], size[0]), Image.BILINEAR)
        frames.append(np.asarray(img, dtype=np.float32) / 255.0)
    return np.stack(frames)


def load_frame_folders(root, size=None):
    """Map clip id -> clip for each sub-folder of ``root``."""
    root = Path(root)
    return {p.name: load_frame_folder(p, size) for p in sorted(root.iterdir()) if p.is_dir()}


def sample_seed(seed, epoch, index):
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1, np.uint64)[0])


def triplet_batch(clips, indices, seed, epoch, aug=None, train=True):
    """Stack triplets for ``indices`` into three ``[B, Ch, T, H, W]`` tensors."""
    vs, ss, ds = [], [], []
    for i in indices:
        tri = make_triplet(clips[i], sample_seed(seed, epoch, int(i)), aug, train=train)
        vs.append(tri.v)
        ss.append(tri.s)
        ds.append(tri.d)
    return tuple(torch.from_numpy(np.stack(x)).permute(0, 4, 1, 2, 3).contiguous()
                 for x in (vs, ss, ds))


def experiment_root():
    return Path(os.environ.get("VIDCONCEPTS_ROOT", "."))
