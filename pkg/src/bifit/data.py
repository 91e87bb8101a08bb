"""Moving-shapes clips with per-frame masks and templated referring phrases.

Scenes hold 2-4 colored shapes drifting along straight lines. The phrase
names the one object that uniquely matches its attribute conjunction; some
scenes contain an appearance twin of the target so that only the motion
phrase disambiguates. Everything is a pure function of the seed.

On disk a split is `clips/<id>/frame_%03d.ppm` + `mask_%03d.pbm`, a
`manifest.jsonl` with boxes/visibility/token ids, and the vocabulary.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .config import DataConfig
from .errors import DatasetIOError, GenerationError, InputError

SHAPES = ("square", "circle", "triangle")
COLORS = {
    "red": (0.90, 0.12, 0.10),
    "green": (0.10, 0.78, 0.16),
    "blue": (0.14, 0.22, 0.88),
    "yellow": (0.92, 0.84, 0.12),
}
SIZES = ("small", "large")
MOTIONS = ("left", "right", "up", "down", "still")
_VELOCITY = {"left": (-1, 0), "right": (1, 0), "up": (0, -1), "down": (0, 1), "still": (0, 0)}
BACKGROUND = 0.12

VOCAB = ("the", "small", "large", "red", "green", "blue", "yellow",
         "square", "circle", "triangle", "moving", "staying",
         "left", "right", "up", "down", "still")
_WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}


def tokenize(text: str) -> np.ndarray:
    """Lowercase, whitespace-split, map through the fixed vocabulary."""
    words = text.lower().split()
    if not words:
        raise InputError("empty expression")
    ids = []
    for w in words:
        if w not in _WORD_TO_ID:
            raise InputError(f"unknown word {w!r}")
        ids.append(_WORD_TO_ID[w])
    return np.asarray(ids, dtype=np.int64)


@dataclass
class ObjectSpec:
    shape: str
    color: str
    size: str
    radius: int
    start: tuple[float, float]   # (x, y) center at frame 0
    speed: float
    motion: str

    def attributes(self) -> dict:
        return {"shape": self.shape, "color": self.color,
                "size": self.size, "motion": self.motion}

    def center(self, t: int) -> tuple[float, float]:
        dx, dy = _VELOCITY[self.motion]
        return (self.start[0] + dx * self.speed * t,
                self.start[1] + dy * self.speed * t)


@dataclass
class SceneSpec:
    seed: int
    objects: list[ObjectSpec] = field(default_factory=list)
    target_index: int = 0
    mention: dict = field(default_factory=dict)   # attribute -> value used in the phrase
    occluder_index: int = -1                      # distractor drawn above the target, -1 = none


def _mentions_match(obj: ObjectSpec, mention: dict) -> bool:
    attrs = obj.attributes()
    return all(attrs[k] == v for k, v in mention.items())


def expression_text(spec: SceneSpec) -> str:
    m = spec.mention
    words = ["the"]
    if "size" in m:
        words.append(m["size"])
    words.append(m["color"])
    words.append(m["shape"])
    if "motion" in m:
        if m["motion"] == "still":
            words.extend(["staying", "still"])
        else:
            words.extend(["moving", m["motion"]])
    return " ".join(words)


def _sample_object(rng: np.random.Generator, height: int, width: int) -> ObjectSpec:
    size = SIZES[rng.integers(0, len(SIZES))]
    radius = int(rng.integers(5, 9)) if size == "small" else int(rng.integers(10, 15))
    x = float(rng.uniform(radius + 1, width - radius - 2))
    y = float(rng.uniform(radius + 1, height - radius - 2))
    motion = MOTIONS[rng.integers(0, len(MOTIONS))]
    return ObjectSpec(
        shape=SHAPES[rng.integers(0, len(SHAPES))],
        color=list(COLORS)[rng.integers(0, len(COLORS))],
        size=size, radius=radius, start=(x, y),
        speed=float(rng.uniform(2.5, 5.0)), motion=motion,
    )


def make_scene(seed: int, cfg: DataConfig, retries: int = 64) -> SceneSpec:
    """Sample a scene whose phrase picks out exactly one object.

    Three families, weighted by the config fractions: motion scenes give the
    target an appearance twin, so the motion phrase is the only separating
    attribute; occlusion scenes park the target and sweep a larger distractor
    across it, hiding it completely for a frame or two mid-clip; the rest are
    plain multi-object scenes. Raises after `retries` failed attempts to
    satisfy uniqueness.
    """
    rng = np.random.default_rng(np.random.PCG64(seed))
    for _ in range(retries):
        count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        objects = [_sample_object(rng, cfg.height, cfg.width) for _ in range(count)]
        target_index = int(rng.integers(0, count))
        target = objects[target_index]
        occluder_index = -1
        draw = float(rng.uniform())
        motion_scene = draw < cfg.motion_fraction and count >= 2
        occluded_scene = (not motion_scene and count >= 2
                          and draw < cfg.motion_fraction + cfg.occluded_fraction)
        if motion_scene:
            mention = {"color": target.color, "shape": target.shape, "motion": target.motion}
            twin_index = int(rng.integers(0, count - 1))
            twin_index += twin_index >= target_index
            twin = objects[twin_index]
            twin.shape, twin.color, twin.size = target.shape, target.color, target.size
            twin.radius = target.radius
            others = [m for m in MOTIONS if m != target.motion]
            twin.motion = others[rng.integers(0, len(others))]
        else:
            mention = {"color": target.color, "shape": target.shape}
            if rng.uniform() < 0.25:
                mention["size"] = target.size
        if occluded_scene:
            target.motion = "still"
            occluder_index = int(rng.integers(0, count - 1))
            occluder_index += occluder_index >= target_index
            occ = objects[occluder_index]
            occ.color = [c for c in COLORS if c != target.color][rng.integers(0, len(COLORS) - 1)]
            occ.shape = "square"   # a square of radius r+3 covers any shape of radius r
            occ.size = "large"
            occ.radius = target.radius + int(rng.integers(3, 6))
            occ.speed = float(rng.uniform(3.5, 5.0))
            occ.motion = MOTIONS[rng.integers(0, len(MOTIONS) - 1)]  # skip "still"
            cross_t = float(rng.uniform(0.35, 0.65)) * (cfg.frames - 1)
            dx, dy = _VELOCITY[occ.motion]
            occ.start = (target.start[0] - dx * occ.speed * cross_t,
                         target.start[1] - dy * occ.speed * cross_t)
        hits = sum(_mentions_match(o, mention) for o in objects)
        if hits == 1 and _mentions_match(target, mention):
            return SceneSpec(seed=seed, objects=objects, target_index=target_index,
                             mention=mention, occluder_index=occluder_index)
    raise GenerationError(f"could not build a uniquely-referring scene for seed {seed}")


def _rasterize(obj: ObjectSpec, t: int, height: int, width: int) -> np.ndarray:
    """Exact binary mask of the object at frame t on the pixel-center grid."""
    cx, cy = obj.center(t)
    r = obj.radius
    ys, xs = np.mgrid[0:height, 0:width]
    if obj.shape == "square":
        return (np.abs(xs - cx) <= r) & (np.abs(ys - cy) <= r)
    if obj.shape == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r ** 2
    # upward triangle: apex (cx, cy-r), base corners (cx -/+ r, cy+r)
    ax, ay = cx, cy - r
    bx, by = cx - r, cy + r
    qx, qy = cx + r, cy + r
    d1 = (bx - ax) * (ys - ay) - (by - ay) * (xs - ax)
    d2 = (qx - bx) * (ys - by) - (qy - by) * (xs - bx)
    d3 = (ax - qx) * (ys - qy) - (ay - qy) * (xs - qx)
    return ((d1 >= 0) & (d2 >= 0) & (d3 >= 0)) | ((d1 <= 0) & (d2 <= 0) & (d3 <= 0))


def mask_box(mask: np.ndarray) -> np.ndarray:
    """Tight normalized cxcywh box of a binary mask; zeros when empty."""
    if not mask.any():
        return np.zeros(4, dtype=np.float64)
    h, w = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    y0, y1 = rows[0], rows[-1] + 1
    x0, x1 = cols[0], cols[-1] + 1
    return np.asarray([(x0 + x1) / (2 * w), (y0 + y1) / (2 * h),
                       (x1 - x0) / w, (y1 - y0) / h], dtype=np.float64)


def generate_clip(spec: SceneSpec, frames: int, height: int, width: int):
    """Render one clip.

    Returns (video [T,H,W,3] float, masks [T,H,W] bool, boxes [T,4],
    visibility [T], token ids, expression text). The mask is always the
    target's full shape extent. The target is drawn above ordinary
    distractors; a designated occluder is drawn above the target, so its
    pixels can hide the target without shrinking the annotation.
    """
    video = np.full((frames, height, width, 3), BACKGROUND, dtype=np.float32)
    target = spec.objects[spec.target_index]
    masks = np.zeros((frames, height, width), dtype=bool)
    order = [o for i, o in enumerate(spec.objects)
             if i not in (spec.target_index, spec.occluder_index)] + [target]
    if spec.occluder_index >= 0:
        order.append(spec.objects[spec.occluder_index])
    for t in range(frames):
        for obj in order:
            m = _rasterize(obj, t, height, width)
            video[t][m] = COLORS[obj.color]
            if obj is target:
                masks[t] = m
    boxes = np.stack([mask_box(m) for m in masks])
    visibility = masks.any(axis=(1, 2)).astype(np.float64)
    text = expression_text(spec)
    return video, masks, boxes, visibility, tokenize(text), text


def downsample_mask(mask: np.ndarray, factor: int = 4) -> np.ndarray:
    """Block-mean downsample; a block at least half covered stays on."""
    h, w = mask.shape
    if h % factor or w % factor:
        raise InputError(f"mask {h}x{w} not divisible by block factor {factor}")
    blocks = mask.reshape(h // factor, factor, w // factor, factor).astype(np.float64)
    return blocks.mean(axis=(1, 3)) >= 0.5


# ---------------------------------------------------------------- disk layout

def write_ppm(path: str, image: np.ndarray) -> None:
    """8-bit binary PPM from a float [H, W, 3] image in [0, 1]."""
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_ppm(path: str) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DatasetIOError(f"cannot read frame {path}: {exc}") from exc
    fields, pos = _header_fields(blob, 4, path)
    if fields[0] != b"P6":
        raise DatasetIOError(f"{path}: not a binary PPM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise DatasetIOError(f"{path}: unsupported max value {maxval}")
    if len(blob) - pos < h * w * 3:
        raise DatasetIOError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=h * w * 3, offset=pos)
    return pixels.reshape(h, w, 3).astype(np.float32) / 255.0


def write_pbm(path: str, mask: np.ndarray) -> None:
    """Packed binary PBM; a set bit marks a mask pixel."""
    mask = mask.astype(bool)
    h, w = mask.shape
    packed = np.packbits(mask, axis=1)
    with open(path, "wb") as fh:
        fh.write(f"P4\n{w} {h}\n".encode())
        fh.write(packed.tobytes())


def read_pbm(path: str) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DatasetIOError(f"cannot read mask {path}: {exc}") from exc
    fields, pos = _header_fields(blob, 3, path)
    if fields[0] != b"P4":
        raise DatasetIOError(f"{path}: not a packed PBM")
    w, h = int(fields[1]), int(fields[2])
    row_bytes = (w + 7) // 8
    if len(blob) - pos < h * row_bytes:
        raise DatasetIOError(f"{path}: truncated mask data")
    raw = np.frombuffer(blob, dtype=np.uint8, count=h * row_bytes, offset=pos)
    bits = np.unpackbits(raw.reshape(h, row_bytes), axis=1)[:, :w]
    return bits.astype(bool)


def _header_fields(blob: bytes, count: int, path: str):
    """Parse `count` whitespace-separated header tokens; return (tokens, offset)."""
    fields, pos = [], 0
    while len(fields) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetIOError(f"{path}: malformed header")
        fields.append(blob[start:pos])
    return fields, pos + 1  # single whitespace after the last header token


def write_dataset(clips: list[dict], directory: str) -> None:
    """Store rendered clips under `directory` and write the manifest.

    Each clip dict carries clip_id, video, masks, boxes, visibility,
    token_ids, expression (as produced by generate_clip).
    """
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "vocab.txt"), "w") as fh:
        fh.write("\n".join(VOCAB) + "\n")
    records = []
    for clip in clips:
        cid = clip["clip_id"]
        clip_dir = os.path.join(directory, "clips", cid)
        os.makedirs(clip_dir, exist_ok=True)
        frame_paths, mask_paths = [], []
        for t in range(clip["video"].shape[0]):
            fp = os.path.join("clips", cid, f"frame_{t:03d}.ppm")
            mp = os.path.join("clips", cid, f"mask_{t:03d}.pbm")
            write_ppm(os.path.join(directory, fp), clip["video"][t])
            write_pbm(os.path.join(directory, mp), clip["masks"][t])
            frame_paths.append(fp)
            mask_paths.append(mp)
        records.append({
            "clip_id": cid,
            "frames": frame_paths,
            "masks": mask_paths,
            "expression": clip["expression"],
            "token_ids": [int(i) for i in clip["token_ids"]],
            "boxes": [[round(float(v), 8) for v in b] for b in clip["boxes"]],
            "visibility": [int(v) for v in clip["visibility"]],
        })
    with open(os.path.join(directory, "manifest.jsonl"), "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_dataset(directory: str) -> list[dict]:
    """Load and validate the manifest; paths come back absolute."""
    manifest = os.path.join(directory, "manifest.jsonl")
    if not os.path.isfile(manifest):
        raise DatasetIOError(f"no manifest at {manifest}")
    records = []
    with open(manifest) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetIOError(f"{manifest}:{line_no}: bad record: {exc}") from exc
            for key in ("clip_id", "frames", "masks", "expression", "token_ids",
                        "boxes", "visibility"):
                if key not in rec:
                    raise DatasetIOError(f"{manifest}:{line_no}: missing field {key!r}")
            for rel in rec["frames"] + rec["masks"]:
                full = os.path.join(directory, rel)
                if not os.path.isfile(full):
                    raise DatasetIOError(f"missing file {full}")
            rec["frames"] = [os.path.join(directory, p) for p in rec["frames"]]
            rec["masks"] = [os.path.join(directory, p) for p in rec["masks"]]
            records.append(rec)
    return records


def load_clip(record: dict):
    """Read one manifest record's pixels: (video [T,H,W,3], masks [T,H,W])."""
    video = np.stack([read_ppm(p) for p in record["frames"]])
    masks = np.stack([read_pbm(p) for p in record["masks"]])
    return video, masks


def build_split(cfg: DataConfig, directory: str, count: int, seed_offset: int) -> None:
    """Generate `count` clips seeded from cfg.seed + seed_offset and store them."""
    clips = []
    for i in range(count):
        seed = cfg.seed * 1_000_003 + seed_offset + i
        spec = make_scene(seed, cfg)
        video, masks, boxes, visibility, ids, text = generate_clip(
            spec, cfg.frames, cfg.height, cfg.width)
        clips.append({"clip_id": f"clip_{seed_offset + i:05d}", "video": video,
                      "masks": masks, "boxes": boxes, "visibility": visibility,
                      "token_ids": ids, "expression": text})
    write_dataset(clips, directory)


def build_dataset(cfg: DataConfig, root: str) -> tuple[str, str]:
    """Write the train and validation splits under `root`; returns their paths."""
    train_dir = os.path.join(root, "train")
    val_dir = os.path.join(root, "val")
    build_split(cfg, train_dir, cfg.train_clips, 0)
    build_split(cfg, val_dir, cfg.val_clips, 500_000)
    return train_dir, val_dir
