"""Dataset ingestion and preprocessing.

Directory layout: root/<person_id>/<camera_id>/<frame>.ppm with frames
ordered by file name. Binary PPM (P6, maxval 255) is decoded natively; PNG
works too when Pillow is importable. Each sequence is converted to five
channels per frame: YUV color, standardized per channel over the whole
sequence, plus horizontal and vertical dense optical flow scaled to [-1, 1].
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FLOW_MAX_PX = 8.0
FLOW_WINDOW_RADIUS = 2  # 5x5 uniform window
FLOW_DAMPING = 1e-4
CROP_MARGIN = 8
FRAME_CHANNELS = 5


class DatasetError(Exception):
    """Raised when frame files or dataset structure cannot be used."""


# ---- frame file formats ----


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an (H,W,3) uint8 array as binary PPM."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DatasetError(f"{path}: expected (H,W,3) pixels, got shape {rgb.shape}")
    h, w = rgb.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def _ppm_token(blob: bytes, pos: int, path) -> tuple[bytes, int]:
    while pos < len(blob):
        c = blob[pos]
        if c in b" \t\r\n":
            pos += 1
        elif c == ord("#"):
            while pos < len(blob) and blob[pos] not in b"\r\n":
                pos += 1
        else:
            break
    start = pos
    while pos < len(blob) and blob[pos] not in b" \t\r\n":
        pos += 1
    if start == pos:
        raise DatasetError(f"{path}: truncated PPM header")
    return blob[start:pos], pos


def read_ppm(path) -> np.ndarray:
    """Decode a binary PPM (P6, maxval 255) into an (H,W,3) uint8 array."""
    blob = Path(path).read_bytes()
    magic, pos = _ppm_token(blob, 0, path)
    if magic != b"P6":
        raise DatasetError(f"{path}: not a binary PPM (magic {magic!r})")
    fields = []
    for _ in range(3):
        token, pos = _ppm_token(blob, pos, path)
        if not token.isdigit():
            raise DatasetError(f"{path}: bad PPM header field {token!r}")
        fields.append(int(token))
    w, h, maxval = fields
    if maxval != 255:
        raise DatasetError(f"{path}: unsupported PPM maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    raster = blob[pos:pos + w * h * 3]
    if len(raster) != w * h * 3:
        raise DatasetError(f"{path}: PPM raster shorter than {w}x{h} pixels")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


def _read_png(path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError as exc:
        raise DatasetError(f"{path}: PNG frames need Pillow installed") from exc
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def read_frame(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    if path.suffix.lower() == ".png":
        return _read_png(path)
    raise DatasetError(f"{path}: unsupported frame format {path.suffix!r}")


# ---- raw dataset ----


@dataclass
class RawSequence:
    person_id: str
    camera_id: str
    frames: list[np.ndarray]
    paths: tuple[str, ...]


def load_dataset(root) -> list[RawSequence]:
    """Walk root/<person>/<camera>/ and decode every frame, sorted by name.

    Identities with fewer than two cameras load fine but trigger a warning,
    since they cannot form cross-camera pairs. Mixed frame sizes inside one
    sequence are an error.
    """
    root = Path(root)
    if not root.exists():
        raise DatasetError(f"dataset root {root} does not exist")
    sequences = []
    cams_per_person: dict[str, int] = {}
    for person_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        cam_dirs = sorted(p for p in person_dir.iterdir() if p.is_dir())
        cams_per_person[person_dir.name] = len(cam_dirs)
        for cam_dir in cam_dirs:
            paths = sorted(
                p for p in cam_dir.iterdir()
                if p.suffix.lower() in (".ppm", ".png") and not p.name.startswith(".")
            )
            if not paths:
                continue
            frames = [read_frame(p) for p in paths]
            first = frames[0].shape
            for p, f in zip(paths, frames):
                if f.shape != first:
                    raise DatasetError(
                        f"{p}: frame size {f.shape[:2]} differs from {first[:2]} "
                        f"earlier in the same sequence"
                    )
            sequences.append(RawSequence(
                person_id=person_dir.name,
                camera_id=cam_dir.name,
                frames=frames,
                paths=tuple(str(p) for p in paths),
            ))
    for person, n_cams in cams_per_person.items():
        if n_cams < 2:
            warnings.warn(
                f"identity {person} has {n_cams} camera(s); it cannot form "
                f"cross-camera pairs", stacklevel=2,
            )
    return sequences


# ---- color conversion and flow ----


def rgb_to_yuv(frame: np.ndarray) -> np.ndarray:
    """BT.601 YUV from (H,W,3) RGB in 0..255; returns (3,H,W) float64."""
    f = np.asarray(frame, dtype=np.float64)
    r, g, b = f[..., 0], f[..., 1], f[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    u = 0.492 * (b - y)
    v = 0.877 * (r - y)
    return np.stack([y, u, v])


def standardize_channels(stack: np.ndarray) -> np.ndarray:
    """Zero-mean unit-variance per channel over a (T,C,H,W) stack.

    Channels with (numerically) zero variance come back as all zeros.
    """
    out = np.empty_like(stack)
    for c in range(stack.shape[1]):
        channel = stack[:, c]
        std = channel.std()
        out[:, c] = 0.0 if std < 1e-12 else (channel - channel.mean()) / std
    return out


def rgb_to_yuv_normalized(frames) -> np.ndarray:
    """YUV-convert a whole sequence and standardize each channel over it."""
    return standardize_channels(np.stack([rgb_to_yuv(f) for f in frames]))


def _box_sum(img: np.ndarray, radius: int) -> np.ndarray:
    """Sum over a (2r+1)^2 window, truncated at the image border."""
    h, w = img.shape
    ii = np.zeros((h + 1, w + 1))
    ii[1:, 1:] = img.cumsum(axis=0).cumsum(axis=1)
    r0 = np.clip(np.arange(h) - radius, 0, h)
    r1 = np.clip(np.arange(h) + radius + 1, 0, h)
    c0 = np.clip(np.arange(w) - radius, 0, w)
    c1 = np.clip(np.arange(w) + radius + 1, 0, w)
    return (ii[np.ix_(r1, c1)] - ii[np.ix_(r0, c1)]
            - ii[np.ix_(r1, c0)] + ii[np.ix_(r0, c0)])


def lucas_kanade_flow(prev: np.ndarray, nxt: np.ndarray) -> np.ndarray:
    """Dense optical flow from prev to nxt, scaled by 1/8 px and clamped.

    Per pixel the classic normal equations are solved over a 5x5 uniform
    window with Tikhonov damping, using central-difference spatial gradients
    of prev and temporal difference nxt - prev. Returns (2,H,W): horizontal
    flow first, vertical second, both in [-1, 1] (multiply by FLOW_MAX_PX
    for pixels).
    """
    prev = np.asarray(prev, dtype=np.float64)
    nxt = np.asarray(nxt, dtype=np.float64)
    if prev.shape != nxt.shape or prev.ndim != 2:
        raise DatasetError(f"flow needs two equal (H,W) frames, got {prev.shape} and {nxt.shape}")
    gy, gx = np.gradient(prev)
    gt = nxt - prev
    sxx = _box_sum(gx * gx, FLOW_WINDOW_RADIUS) + FLOW_DAMPING
    syy = _box_sum(gy * gy, FLOW_WINDOW_RADIUS) + FLOW_DAMPING
    sxy = _box_sum(gx * gy, FLOW_WINDOW_RADIUS)
    sxt = _box_sum(gx * gt, FLOW_WINDOW_RADIUS)
    syt = _box_sum(gy * gt, FLOW_WINDOW_RADIUS)
    det = sxx * syy - sxy * sxy
    u = (-syy * sxt + sxy * syt) / det
    v = (sxy * sxt - sxx * syt) / det
    return np.clip(np.stack([u, v]) / FLOW_MAX_PX, -1.0, 1.0)


# ---- preprocessed sequences ----


@dataclass
class SequenceSample:
    """One camera view of one person: (T,5,H,W) float frames.

    Channel order: standardized Y, U, V, then horizontal and vertical flow.
    """

    person_id: str
    camera_id: str
    frames: np.ndarray
    paths: tuple[str, ...] = ()

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_hw(self) -> tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[3]


def preprocess_sequence(raw: RawSequence) -> SequenceSample:
    """Attach standardized YUV and optical flow channels to a raw sequence.

    Flow at step t is computed between luminance frames t and t+1; the last
    frame reuses the previous flow field (zero flow for one-frame sequences).
    """
    yuv = rgb_to_yuv_normalized(raw.frames)
    lum = [rgb_to_yuv(f)[0] for f in raw.frames]
    n = len(lum)
    flows = [lucas_kanade_flow(lum[t], lum[t + 1]) for t in range(n - 1)]
    flows.append(flows[-1] if flows else np.zeros((2,) + lum[0].shape))
    return SequenceSample(
        person_id=raw.person_id,
        camera_id=raw.camera_id,
        frames=np.concatenate([yuv, np.stack(flows)], axis=1),
        paths=raw.paths,
    )


def preprocess_dataset(raws: list[RawSequence]) -> list[SequenceSample]:
    return [preprocess_sequence(r) for r in raws]


def by_identity(samples: list[SequenceSample]) -> dict[str, dict[str, SequenceSample]]:
    index: dict[str, dict[str, SequenceSample]] = {}
    for s in samples:
        index.setdefault(s.person_id, {})[s.camera_id] = s
    return index


# ---- augmentation and sampling ----


def _apply_crop_mirror(frames: np.ndarray, off_h: int, off_w: int, mirror: bool) -> np.ndarray:
    t, c, h, w = frames.shape
    out = frames[:, :, off_h:off_h + h - CROP_MARGIN, off_w:off_w + w - CROP_MARGIN].copy()
    if mirror:
        out = out[:, :, :, ::-1].copy()
        out[:, 3] = -out[:, 3]  # horizontal flow flips sign with the image
    return out


def augment(sample: SequenceSample, mode: str, rng=0) -> SequenceSample:
    """Crop 8 pixels off each spatial dim, optionally mirroring.

    Training mode draws one uniform crop offset and one mirror coin per
    sequence; test mode center-crops deterministically and never mirrors.
    """
    if mode not in ("train", "test"):
        raise ValueError(f"unknown augmentation mode {mode!r}")
    h, w = sample.frame_hw
    if h <= CROP_MARGIN or w <= CROP_MARGIN:
        raise DatasetError(f"frames of {h}x{w} are too small to crop by {CROP_MARGIN}")
    if mode == "train":
        rng = np.random.default_rng(rng)
        off_h = int(rng.integers(0, CROP_MARGIN + 1))
        off_w = int(rng.integers(0, CROP_MARGIN + 1))
        mirror = bool(rng.random() < 0.5)
    else:
        off_h = off_w = CROP_MARGIN // 2
        mirror = False
    return SequenceSample(
        person_id=sample.person_id,
        camera_id=sample.camera_id,
        frames=_apply_crop_mirror(sample.frames, off_h, off_w, mirror),
        paths=sample.paths,
    )


def sample_subsequence(sample: SequenceSample, k: int, rng=0) -> SequenceSample:
    """k consecutive frames from a uniform random start; short sequences
    wrap around cyclically from frame 0 to reach length k."""
    if k < 1:
        raise ValueError(f"subsequence length must be positive, got {k}")
    n = sample.n_frames
    if n == 0:
        raise DatasetError(f"sequence {sample.person_id}/{sample.camera_id} has no frames")
    if n >= k:
        rng = np.random.default_rng(rng)
        start = int(rng.integers(0, n - k + 1))
        idx = np.arange(start, start + k)
    else:
        idx = np.arange(k) % n
    return SequenceSample(
        person_id=sample.person_id,
        camera_id=sample.camera_id,
        frames=sample.frames[idx],
        paths=sample.paths,
    )


# ---- splits and the training pair stream ----


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    test: tuple[str, ...]
    seed: int
    trial: int


def make_split(ids, seed: int, trial: int, mode: str = "half") -> DatasetSplit:
    """Seeded identity split. mode="half" is the usual disjoint 50/50 split
    (odd counts give the extra identity to train); mode="all" puts every
    identity in both halves, for memorization checks."""
    ids = sorted(ids)
    if mode == "all":
        return DatasetSplit(tuple(ids), tuple(ids), seed, trial)
    if mode != "half":
        raise ValueError(f"unknown split mode {mode!r}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(trial,)))
    perm = rng.permutation(len(ids))
    n_train = (len(ids) + 1) // 2
    train = tuple(sorted(ids[i] for i in perm[:n_train]))
    test = tuple(sorted(ids[i] for i in perm[n_train:]))
    return DatasetSplit(train, test, seed, trial)


def write_split_files(split: DatasetSplit, out_dir) -> None:
    out_dir = Path(out_dir) / f"trial_{split.trial}"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "train.txt").write_text("".join(f"{i}\n" for i in split.train))
    (out_dir / "test.txt").write_text("".join(f"{i}\n" for i in split.test))


@dataclass
class PairBatch:
    """One training example: a probe/gallery sequence pair with labels."""

    probe: SequenceSample
    gallery: SequenceSample
    same_person: bool
    probe_label: int
    gallery_label: int


def identity_labels(ids) -> dict[str, int]:
    return {pid: i for i, pid in enumerate(sorted(ids))}


def _pick_cameras(cams: dict[str, SequenceSample], pid: str, rng) -> tuple[str, str]:
    names = sorted(cams)
    if len(names) < 2:
        raise DatasetError(f"identity {pid} needs two cameras, found {len(names)}")
    if len(names) == 2:
        return names[0], names[1]
    chosen = sorted(rng.choice(len(names), size=2, replace=False))
    return names[chosen[0]], names[chosen[1]]


def pair_stream(index: dict[str, dict[str, SequenceSample]], train_ids, k: int, seed: int = 0):
    """Endless alternating positive/negative pair generator.

    Each epoch visits the train identities in a fresh random order and yields
    two pairs per identity: a positive (its two cameras) then a negative (its
    first camera against the second camera of a random other identity). Every
    sequence is a random k-frame subsequence with fresh crop/mirror draws.
    """
    ids = sorted(train_ids)
    if len(ids) < 2:
        raise DatasetError(f"pairing needs at least two identities, got {len(ids)}")
    labels = identity_labels(ids)
    rng = np.random.default_rng(seed)

    def draw(pid: str, cam: str) -> SequenceSample:
        return augment(sample_subsequence(index[pid][cam], k, rng), "train", rng)

    while True:
        for i in rng.permutation(len(ids)):
            pid = ids[i]
            cam_a, cam_b = _pick_cameras(index[pid], pid, rng)
            yield PairBatch(draw(pid, cam_a), draw(pid, cam_b), True,
                            labels[pid], labels[pid])
            others = [q for q in ids if q != pid]
            other = others[int(rng.integers(0, len(others)))]
            other_a, other_b = _pick_cameras(index[other], other, rng)
            yield PairBatch(draw(pid, cam_a), draw(other, other_b), False,
                            labels[pid], labels[other])


# ---- synthetic data ----


def _smooth_noise(rng, h: int, w: int, passes: int = 2) -> np.ndarray:
    img = rng.standard_normal((h, w))
    for _ in range(passes):
        img = _box_sum(img, 1) / 9.0
    img -= img.mean()
    peak = np.abs(img).max()
    return img / peak if peak > 0 else img


def _identity_texture(rng, idx: int, h: int, w: int) -> np.ndarray:
    """A distinct smooth RGB pattern per identity: sinusoid gratings with
    identity-specific frequency and phase, plus a little smooth noise."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    channels = []
    for ch in range(3):
        fx = 2.0 * np.pi * (1 + (idx * 3 + ch) % 4) / w
        fy = 2.0 * np.pi * (1 + (idx * 2 + ch) % 3) / h
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(fx * xx + fy * yy + phase)
        channels.append(127.5 + 70.0 * wave + 30.0 * _smooth_noise(rng, h, w))
    return np.stack(channels, axis=-1)


def synth_dataset(root, n_ids: int = 8, n_cams: int = 2, frames_per_seq: int = 16,
                  size: tuple[int, int] = (24, 16), seed: int = 0,
                  signal_frames: int | None = None) -> int:
    """Write a synthetic PPM dataset under root and return the file count.

    Each identity is a moving textured pattern (1 px/frame drift, so optical
    flow is real); each camera applies its own gain/offset plus pixel noise.
    With signal_frames=n, only n frames per sequence show the identity
    texture; the remaining frames are structureless noise drawn per camera
    and frame index, identical across identities, so they carry no identity
    information at all.
    """
    h, w = size
    root = Path(root)
    seq = np.random.SeedSequence(seed)
    id_seeds = seq.spawn(n_ids)
    shared_noise = None
    if signal_frames is not None:
        shared_noise = []
        for noise_seed in seq.spawn(n_cams):
            noise_rng = np.random.default_rng(noise_seed)
            shared_noise.append([
                127.5 + 60.0 * np.stack(
                    [_smooth_noise(noise_rng, h, w) for _ in range(3)], axis=-1)
                for _ in range(frames_per_seq)
            ])
    n_files = 0
    for i in range(n_ids):
        pid = f"p{i:03d}"
        id_rng = np.random.default_rng(id_seeds[i])
        texture = _identity_texture(id_rng, i, h, w)
        cam_seeds = id_seeds[i].spawn(n_cams)
        for c in range(n_cams):
            cam_rng = np.random.default_rng(cam_seeds[c])
            gain = 1.0 + 0.18 * (c - (n_cams - 1) / 2.0)
            offset = 14.0 * c - 7.0 * (n_cams - 1) / 2.0
            if signal_frames is not None:
                keep = min(signal_frames, frames_per_seq)
                signal_at = set(cam_rng.choice(frames_per_seq, size=keep, replace=False).tolist())
            else:
                signal_at = None
            for t in range(frames_per_seq):
                if signal_at is not None and t not in signal_at:
                    img = shared_noise[c][t]
                else:
                    img = np.roll(texture, shift=(t * (1 + i % 2), t), axis=(0, 1))
                img = img * gain + offset + cam_rng.normal(0.0, 2.0, img.shape)
                rgb = np.clip(np.rint(img), 0, 255).astype(np.uint8)
                write_ppm(root / pid / f"cam{c}" / f"{t:05d}.ppm", rgb)
                n_files += 1
    return n_files
