"""Seeded video generators and the on-disk formats they are stored in."""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPRITE_SEED = 20160904
SHAPES = ("box", "cross", "disc")


@dataclass
class SpriteBank:
    sprites: np.ndarray  # (n, s, s) in [0, 1]
    source: str = "synthetic"

    def __post_init__(self):
        self.sprites = np.asarray(self.sprites, dtype=np.float64)
        if self.sprites.ndim != 3 or self.sprites.shape[1] != self.sprites.shape[2]:
            if self.sprites.size:
                raise ValueError(f"sprites must be (n, s, s), got {self.sprites.shape}")
        if self.source not in ("synthetic", "idx-file"):
            raise ValueError(f"unknown sprite source {self.source!r}")

    def __len__(self):
        return len(self.sprites)

    @property
    def size(self) -> int:
        return self.sprites.shape[1]

    def split(self, test_fraction: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
        """Disjoint (train, test) index pools; the test pool is the tail of the bank."""
        n = len(self)
        cut = n - max(1, int(round(n * test_fraction))) if n > 1 else n
        return np.arange(cut), np.arange(cut, n)


# ---------------------------------------------------------------------------
# sprites


def box_sprite(size: int, thickness: int) -> np.ndarray:
    s = np.zeros((size, size))
    t = max(1, min(thickness, size // 2))
    s[:t] = s[-t:] = 1.0
    s[:, :t] = s[:, -t:] = 1.0
    return s


def cross_sprite(size: int, thickness: int) -> np.ndarray:
    s = np.zeros((size, size))
    t = max(1, min(thickness, size))
    lo = (size - t) // 2
    s[lo:lo + t] = 1.0
    s[:, lo:lo + t] = 1.0
    return s


def disc_sprite(size: int, radius: float) -> np.ndarray:
    c = (size - 1) / 2.0
    i, j = np.mgrid[:size, :size]
    return (((i - c) ** 2 + (j - c) ** 2) <= radius ** 2).astype(np.float64)


def synthetic_sprites(count: int, size: int, rng) -> SpriteBank:
    """Filled boxes, crosses and discs with random thickness or radius."""
    if size < 3:
        raise ValueError(f"sprite size must be >= 3, got {size}")
    rng = np.random.default_rng(rng)
    out = np.zeros((count, size, size))
    for k in range(count):
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        if shape == "box":
            out[k] = box_sprite(size, int(rng.integers(1, max(1, size // 3) + 1)))
        elif shape == "cross":
            out[k] = cross_sprite(size, int(rng.integers(1, max(1, size // 3) + 1)))
        else:
            lo = max(1.0, size / 4)
            out[k] = disc_sprite(size, float(rng.uniform(lo, (size - 1) / 2 + 0.5)))
    return SpriteBank(out, "synthetic")


def default_bank(size: int, count: int = 64) -> SpriteBank:
    return synthetic_sprites(count, size, SPRITE_SEED)


class IdxFormatError(ValueError):
    pass


def _fit_size(img: np.ndarray, size: int) -> np.ndarray:
    """Center-crop or zero-pad a 2-D image to ``size x size``."""
    out = np.zeros((size, size))
    h, w = img.shape
    sh, sw = max(0, (h - size) // 2), max(0, (w - size) // 2)
    crop = img[sh:sh + size, sw:sw + size]
    dh, dw = (size - crop.shape[0]) // 2, (size - crop.shape[1]) // 2
    out[dh:dh + crop.shape[0], dw:dw + crop.shape[1]] = crop
    return out


def load_idx(path, size: int | None = None) -> SpriteBank:
    """Read an IDX3 unsigned-byte image file (e.g. MNIST digits) into a sprite bank."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise IdxFormatError(f"truncated IDX header: need 16 bytes, file has {len(raw)} "
                             f"({16 - len(raw)} missing at offset {len(raw)})")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != 0x00000803:
        raise IdxFormatError(f"bad magic 0x{magic:08x} at byte offset 0, expected 0x00000803")
    need = n * rows * cols
    have = len(raw) - 16
    if have < need:
        raise IdxFormatError(f"truncated IDX data: {need - have} bytes missing "
                             f"(expected {need} from offset 16, found {have})")
    imgs = np.frombuffer(raw, dtype=np.uint8, count=need, offset=16)
    imgs = imgs.reshape(n, rows, cols).astype(np.float64) / 255.0
    size = size or max(rows, cols, 1)
    if n == 0:
        return SpriteBank(np.zeros((0, size, size)), "idx-file")
    return SpriteBank(np.stack([_fit_size(im, size) for im in imgs]), "idx-file")


def write_idx(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(path).write_bytes(struct.pack(">IIII", 0x00000803, n, rows, cols) + images.tobytes())


# ---------------------------------------------------------------------------
# bouncing sprites


@dataclass(frozen=True)
class MovingSpriteConfig:
    canvas: int = 16
    num_sprites: int = 2
    frames: int = 6
    sprite_size: int = 6
    speed: tuple = (1, 2)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "speed", tuple(int(v) for v in self.speed))
        if self.sprite_size > self.canvas:
            raise ValueError(f"sprite size {self.sprite_size} exceeds canvas {self.canvas}")
        if self.speed[0] < 0 or self.speed[1] < self.speed[0]:
            raise ValueError(f"speed range must satisfy 0 <= lo <= hi, got {self.speed}")
        if self.frames < 1 or self.num_sprites < 1:
            raise ValueError("need at least one frame and one sprite")


MOVING_PRESETS = {
    "desk": MovingSpriteConfig(),
    "paper": MovingSpriteConfig(canvas=64, num_sprites=2, frames=20, sprite_size=28,
                                speed=(1, 4)),
}


def bounce_step(p: int, v: int, limit: int) -> tuple[int, int]:
    """Advance one frame, reflecting off 0 and ``limit`` (p' = 2*limit - p, v' = -v)."""
    if limit == 0:
        return 0, v
    p += v
    while p < 0 or p > limit:
        if p < 0:
            p, v = -p, -v
        else:
            p, v = 2 * limit - p, -v
    return p, v


def bounce_trajectory(p0, v0, limit: int, frames: int) -> np.ndarray:
    """Integer (row, col) positions for ``frames`` frames starting at ``p0``."""
    pos = np.zeros((frames, 2), dtype=np.int64)
    p, v = list(p0), list(v0)
    for t in range(frames):
        pos[t] = p
        for a in range(2):
            p[a], v[a] = bounce_step(p[a], v[a], limit)
    return pos


def render_frames(sprites, trajectories, canvas: int) -> np.ndarray:
    """Composite sprites (per-pixel max) at their trajectory positions: ``(T, N, N, 1)``."""
    frames = trajectories[0].shape[0]
    out = np.zeros((frames, canvas, canvas))
    for sprite, traj in zip(sprites, trajectories):
        s = sprite.shape[0]
        for t, (r, c) in enumerate(traj):
            np.maximum(out[t, r:r + s, c:c + s], sprite, out=out[t, r:r + s, c:c + s])
    return np.clip(out, 0.0, 1.0)[..., None]


def generate_sequence(bank: SpriteBank, config: MovingSpriteConfig, rng,
                      pool=None, positions=None, velocities=None) -> np.ndarray:
    """One bouncing-sprite sequence, real-valued in [0, 1], shape ``(T, N, N, 1)``.

    Velocity components are drawn from ``+-[speed_lo, speed_hi]``. Explicit
    ``positions`` / ``velocities`` override the draws; they are ``(x, y)``
    pairs, one per sprite, with x to the right and y down.
    """
    rng = np.random.default_rng(rng)
    if bank.size > config.canvas:
        raise ValueError(f"sprite size {bank.size} exceeds canvas {config.canvas}")
    limit = config.canvas - bank.size
    pool = np.arange(len(bank)) if pool is None else np.asarray(pool)
    sprites, trajs = [], []
    for k in range(config.num_sprites):
        sprites.append(bank.sprites[int(rng.choice(pool))])
        if positions is not None:
            p0 = [int(positions[k][1]), int(positions[k][0])]
        else:
            p0 = [int(v) for v in rng.integers(0, limit + 1, size=2)]
        if velocities is not None:
            v0 = [int(velocities[k][1]), int(velocities[k][0])]
        else:
            mag = rng.integers(config.speed[0], config.speed[1] + 1, size=2)
            sign = rng.choice([-1, 1], size=2)
            v0 = [int(m * s) for m, s in zip(mag, sign)]
        trajs.append(bounce_trajectory(p0, v0, limit, config.frames))
    return render_frames(sprites, trajs, config.canvas)


def to_video(x) -> np.ndarray:
    """Quantize [0, 1] reals to 0..255 intensities."""
    return np.rint(np.clip(np.asarray(x), 0.0, 1.0) * 255.0).astype(np.uint8)


def moving_batch(bank: SpriteBank, config: MovingSpriteConfig, rng, batch: int,
                 pool=None) -> np.ndarray:
    return np.stack([to_video(generate_sequence(bank, config, rng, pool)) for _ in range(batch)])


# ---------------------------------------------------------------------------
# synthetic pushing world


@dataclass(frozen=True)
class PushConfig:
    canvas: int = 16
    frames: int = 6
    pusher_size: int = 3
    object_size: int = 3
    pusher_value: int = 255
    object_value: int = 128
    seed: int = 0
    channels: int = 1

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if max(self.pusher_size, self.object_size) > self.canvas:
            raise ValueError("squares must fit on the canvas")


PUSH_PRESETS = {
    "desk": PushConfig(),
    "paper": PushConfig(canvas=64, frames=12, pusher_size=8, object_size=8, channels=3),
}


@dataclass
class ActionEpisode:
    frames: np.ndarray  # (T, N, N, 1) uint8
    states: np.ndarray  # (T, 5)
    actions: np.ndarray  # (T, 5)

    def __post_init__(self):
        if not len(self.frames) == len(self.states) == len(self.actions):
            raise ValueError("need one state and one action per frame")


def _overlap(a, sa, b, sb) -> bool:
    return (a[0] < b[0] + sb and b[0] < a[0] + sa and a[1] < b[1] + sb and b[1] < a[1] + sa)


def push_step(pusher, obj, delta, config: PushConfig):
    """Move the pusher by ``delta`` (clamped to the canvas); the object moves by the
    pusher's realized displacement iff the two squares then overlap."""
    lp = config.canvas - config.pusher_size
    lo = config.canvas - config.object_size
    new_p = [int(np.clip(pusher[a] + delta[a], 0, lp)) for a in range(2)]
    moved = [new_p[a] - pusher[a] for a in range(2)]
    new_o = list(obj)
    if _overlap(new_p, config.pusher_size, obj, config.object_size):
        new_o = [int(np.clip(obj[a] + moved[a], 0, lo)) for a in range(2)]
    return new_p, new_o


def render_push(pusher, obj, config: PushConfig) -> np.ndarray:
    """Gray frame, or with three channels a red pusher over a cyan object."""
    f = np.zeros((config.canvas, config.canvas, config.channels), dtype=np.uint8)
    obj_ch = slice(1, 3) if config.channels == 3 else slice(0, 1)
    s = config.object_size
    f[obj[0]:obj[0] + s, obj[1]:obj[1] + s, obj_ch] = config.object_value
    s = config.pusher_size
    f[pusher[0]:pusher[0] + s, pusher[1]:pusher[1] + s] = 0
    f[pusher[0]:pusher[0] + s, pusher[1]:pusher[1] + s, 0] = config.pusher_value
    return f


def generate_action_episode(config: PushConfig, rng, actions=None, pusher=None,
                            obj=None) -> ActionEpisode:
    """Pusher square driven by per-frame (drow, dcol) actions shoving a passive object.

    ``actions[t]`` moves frame ``t`` to frame ``t + 1``; the last action is
    drawn but has no visible effect inside the episode.
    """
    rng = np.random.default_rng(rng)
    Tn, N = config.frames, config.canvas
    if actions is None:
        deltas = rng.integers(-1, 2, size=(Tn, 2))
    else:
        deltas = np.asarray(actions, dtype=np.int64)[:, :2]
    if pusher is None:
        pusher = [int(v) for v in rng.integers(0, N - config.pusher_size + 1, size=2)]
    if obj is None:
        for _ in range(100):
            obj = [int(v) for v in rng.integers(0, N - config.object_size + 1, size=2)]
            if not _overlap(pusher, config.pusher_size, obj, config.object_size):
                break
    pusher, obj = list(pusher), list(obj)
    frames = np.zeros((Tn, N, N, config.channels), dtype=np.uint8)
    states = np.zeros((Tn, 5))
    acts = np.zeros((Tn, 5))
    for t in range(Tn):
        frames[t] = render_push(pusher, obj, config)
        states[t, :2] = np.asarray(pusher) / N
        acts[t, :2] = deltas[t]
        pusher, obj = push_step(pusher, obj, deltas[t], config)
    return ActionEpisode(frames, states, acts)


def conditioning(states, actions, context_frames: int) -> np.ndarray:
    """Per-step conditioning ``[action, state]``; states are zeroed after the context."""
    states = np.array(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    states[..., context_frames:, :] = 0.0
    return np.concatenate([actions, states], axis=-1)


def pushing_batch(config: PushConfig, rng, batch: int):
    eps = [generate_action_episode(config, rng) for _ in range(batch)]
    return (np.stack([e.frames for e in eps]), np.stack([e.states for e in eps]),
            np.stack([e.actions for e in eps]))


# ---------------------------------------------------------------------------
# datasets and files

VSEQ_MAGIC = b"VSEQ"
VSEQ_VERSION = 1


@dataclass
class Dataset:
    videos: np.ndarray  # (S, T, N, N, C) uint8
    config: dict = field(default_factory=dict)
    states: np.ndarray | None = None
    actions: np.ndarray | None = None

    def __len__(self):
        return len(self.videos)

    @property
    def has_cond(self) -> bool:
        return self.actions is not None

    def cond(self, context_frames: int) -> np.ndarray | None:
        if not self.has_cond:
            return None
        return conditioning(self.states, self.actions, context_frames)


def make_fixed_test_set(config, seed: int, count: int, kind: str = "moving",
                        bank: SpriteBank | None = None) -> Dataset:
    """Reproducible evaluation set; moving sprites come from the held-out sprite pool."""
    rng = np.random.default_rng(seed)
    if kind == "moving":
        bank = bank or default_bank(config.sprite_size)
        _, test_pool = bank.split()
        videos = [to_video(generate_sequence(bank, config, rng, test_pool)) for _ in range(count)]
        N = config.canvas
        arr = np.stack(videos) if videos else np.zeros((0, config.frames, N, N, 1), np.uint8)
        echo = {"kind": "moving", "seed": seed, "count": count, "source": bank.source,
                **dataclasses.asdict(config)}
        echo["speed"] = list(config.speed)
        return Dataset(arr, echo)
    if kind == "pushing":
        eps = [generate_action_episode(config, rng) for _ in range(count)]
        N, Tn = config.canvas, config.frames
        if eps:
            videos = np.stack([e.frames for e in eps])
            states = np.stack([e.states for e in eps])
            actions = np.stack([e.actions for e in eps])
        else:
            videos = np.zeros((0, Tn, N, N, config.channels), np.uint8)
            states = actions = np.zeros((0, Tn, 5))
        echo = {"kind": "pushing", "seed": seed, "count": count, **dataclasses.asdict(config)}
        return Dataset(videos, echo, states, actions)
    raise ValueError(f"unknown dataset kind {kind!r}")


def dataset_bytes(ds: Dataset) -> bytes:
    videos = np.asarray(ds.videos, dtype=np.uint8)
    S, Tn, H, W, C = videos.shape
    header = dict(ds.config, shape=[S, Tn, H, W, C], has_cond=ds.has_cond)
    meta = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(VSEQ_MAGIC)
    buf.write(struct.pack("<I", VSEQ_VERSION))
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", S * Tn))
    buf.write(videos.tobytes())
    if ds.has_cond:
        buf.write(np.ascontiguousarray(ds.states, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(ds.actions, dtype="<f8").tobytes())
    return buf.getvalue()


def save_dataset(path, ds: Dataset) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != VSEQ_MAGIC:
        raise ValueError(f"{path}: not a VSEQ file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VSEQ_VERSION:
        raise ValueError(f"{path}: unsupported VSEQ version {version}")
    (n,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12:12 + n].decode())
    pos = 12 + n
    (frames,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    S, Tn, H, W, C = header.pop("shape")
    if frames != S * Tn:
        raise ValueError(f"{path}: frame count {frames} != {S} x {Tn}")
    size = S * Tn * H * W * C
    if len(raw) < pos + size:
        raise ValueError(f"{path}: truncated frame data")
    videos = np.frombuffer(raw, np.uint8, size, pos).reshape(S, Tn, H, W, C).copy()
    pos += size
    has_cond = header.pop("has_cond")
    states = actions = None
    if has_cond:
        k = S * Tn * 5
        states = np.frombuffer(raw, "<f8", k, pos).reshape(S, Tn, 5).copy()
        actions = np.frombuffer(raw, "<f8", k, pos + 8 * k).reshape(S, Tn, 5).copy()
    return Dataset(videos, header, states, actions)


def write_pgm(path, image) -> None:
    img = np.asarray(image)
    if img.ndim == 3:
        img = img[..., 0]
    img = img.astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts, pos = [], 0
    while len(parts) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        parts.append(raw[pos:end])
        pos = end
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    return np.frombuffer(raw, np.uint8, w * h, pos + 1).reshape(h, w).copy()
