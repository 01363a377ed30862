"""Synthetic paired RGB/depth scenes, LiDAR-style depth preprocessing and dataset I/O.

A scene is a ground plane under a sky with three flat-shaded objects of
equal area (a disc, a square and a triangle).  Its *structure* (layout
class, view angle, per-object position, size and depth) fully determines
the depth image; its *appearance* class picks a palette and illumination
level and only affects the RGB image.  Even appearance classes are "day"
palettes, odd ones are "night".

The view angle swings the camera sideways, so nearer objects shift further
(parallax) while the horizon stays fixed.  Per-sample jitter is kept small
next to the differences between layouts; with large jitter a cross-modal
matcher can identify scenes from jitter alone and never needs the layout.
"""

from __future__ import annotations

import colorsys
import itertools
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensorio import FormatError, decode_array, encode_array

MAX_OBJECTS = 4
MAX_RANGE = 20.0  # metres; depth images are divided by this
DATASET_MAGIC = b"MMD1"
_FACTOR_FMT = "<IIdI" + "dddd" * MAX_OBJECTS
FACTOR_RECORD_SIZE = struct.calcsize(_FACTOR_FMT)

_KINDS = ("disc", "square", "triangle")


@dataclass(frozen=True)
class SceneFactors:
    appearance_class: int
    structure_class: int
    view_angle: float
    shape_params: tuple  # ((x, y, size, depth), ...) in frame fractions / metres


@dataclass
class MultimodalSample:
    rgb: np.ndarray  # (3, H, W) in [0, 1]
    depth: np.ndarray  # (1, H, W) in [0, 1]
    factors: SceneFactors


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (N, 3) sensor frame, z forward, metres
    fx: float
    fy: float
    cx: float
    cy: float


# ---------------------------------------------------------------------------
# scene generation


_SLOT_DEPTHS = (4.0, 7.0, 11.0)
HORIZON = 0.42  # image-height fraction
# half-extent factors giving disc, square and triangle the same area (pi * half^2)
_EQUAL_AREA = (1.0, float(np.sqrt(np.pi) / 2), float(np.sqrt(np.pi / 2)))
# per-sample variation around the layout template
VIEW_RANGE = 0.12  # radians, uniform in [-VIEW_RANGE, VIEW_RANGE]
X_JITTER = 0.04
Y_JITTER = 0.03
SCALE_JITTER = 0.10  # relative, for object size and depth


def _layout_template(structure_class: int):
    """Deterministic base layout: list of (kind, x, y, size, depth).

    Every layout holds one object of each kind at the same three depths, so
    object count and image coverage carry no class information.  Classes
    differ in which kind sits in which horizontal slot and how near each
    slot is; objects rest roughly on the ground plane.
    """
    perms = list(itertools.permutations(range(len(_KINDS))))
    kinds = perms[structure_class % 6]
    depth_order = perms[(5 * structure_class + 1) % 6]
    objs = []
    for slot in range(3):
        depth = _SLOT_DEPTHS[depth_order[slot]]
        y = HORIZON + 1.6 / depth - 0.1
        objs.append((kinds[slot], 0.22 + 0.28 * slot, y, 0.2, depth))
    return objs


def palette(appearance_class: int) -> dict:
    """Colors and illumination of one appearance class."""
    day = appearance_class % 2 == 0
    hue = (0.61803398875 * (appearance_class // 2) + 0.55) % 1.0
    light = 1.0 if day else 0.3
    sky_top = np.array(colorsys.hsv_to_rgb(hue, 0.55 if day else 0.7, 0.95 if day else 0.35))
    sky_bottom = np.array(colorsys.hsv_to_rgb((hue + 0.08) % 1.0, 0.25 if day else 0.5, 1.0 if day else 0.5))
    ground = np.array(colorsys.hsv_to_rgb((hue + 0.45) % 1.0, 0.45, 0.55 if day else 0.25))
    # one object color per palette: per-object colors would let color statistics reveal the layout
    obj = np.array(colorsys.hsv_to_rgb((hue + 0.5) % 1.0, 0.85, 0.95))
    return {"day": day, "light": light, "sky_top": sky_top, "sky_bottom": sky_bottom, "ground": ground, "object": obj}


def sample_factors(rng, n_palettes: int, n_layouts: int) -> SceneFactors:
    rng = np.random.default_rng(rng)
    a = int(rng.integers(n_palettes))
    s = int(rng.integers(n_layouts))
    view = float(rng.uniform(-VIEW_RANGE, VIEW_RANGE))
    params = []
    for _kind, x, y, size, depth in _layout_template(s):
        params.append(
            (
                float(np.clip(x + rng.uniform(-X_JITTER, X_JITTER), 0.05, 0.95)),
                float(np.clip(y + rng.uniform(-Y_JITTER, Y_JITTER), 0.05, 0.95)),
                float(size * rng.uniform(1 - SCALE_JITTER, 1 + SCALE_JITTER)),
                float(depth * rng.uniform(1 - SCALE_JITTER, 1 + SCALE_JITTER)),
            )
        )
    return SceneFactors(a, s, view, tuple(params))


def _geometry(factors: SceneFactors, size: int):
    """Per-pixel depth (metres) and object-id map (-1 = background)."""
    c = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(c, c, indexing="ij")
    horizon = HORIZON
    below = yy > horizon + 1e-3
    depth = np.full((size, size), MAX_RANGE)
    depth[below] = np.minimum(MAX_RANGE, 1.6 / (yy[below] - horizon))
    ids = np.full((size, size), -1, dtype=np.int64)

    kinds = [o[0] for o in _layout_template(factors.structure_class)]
    order = sorted(range(len(factors.shape_params)), key=lambda k: -factors.shape_params[k][3])
    for k in order:  # far to near, nearer objects overwrite
        x, y, s, d = factors.shape_params[k]
        # parallax: nearer objects shift further with the view angle
        x = x - 1.0 * factors.view_angle / d
        half = 1.6 * s / np.sqrt(d) * _EQUAL_AREA[kinds[k]]
        dx, dy = xx - x, yy - y
        if kinds[k] == 0:
            inside = dx * dx + dy * dy <= half * half
        elif kinds[k] == 1:
            inside = (np.abs(dx) <= half) & (np.abs(dy) <= half)
        else:
            inside = (dy <= half) & (dy >= -half) & (np.abs(dx) <= 0.5 * (dy + half))
        mask = inside & (depth > d)
        depth[mask] = d
        ids[mask] = k
    return depth, ids, yy, horizon


def render_scene(factors: SceneFactors, size: int = 32) -> MultimodalSample:
    depth_m, ids, yy, horizon = _geometry(factors, size)
    pal = palette(factors.appearance_class)

    t = np.clip(yy / max(horizon, 1e-3), 0.0, 1.0)[None]
    sky = (1 - t) * pal["sky_top"][:, None, None] + t * pal["sky_bottom"][:, None, None]
    fog = (depth_m / MAX_RANGE)[None]
    ground = (1 - fog) * pal["ground"][:, None, None] + fog * pal["sky_bottom"][:, None, None]
    rgb = np.where((yy > horizon + 1e-3)[None], ground, sky)
    rgb[:, ids >= 0] = pal["object"][:, None]
    rgb = np.clip(rgb * pal["light"], 0.0, 1.0)
    depth = (depth_m / MAX_RANGE)[None]
    return MultimodalSample(rgb=np.ascontiguousarray(rgb), depth=np.ascontiguousarray(depth), factors=factors)


def generate_scene(rng, n_palettes: int = 4, n_layouts: int = 4, size: int = 32) -> MultimodalSample:
    if n_palettes < 2 or n_layouts < 2:
        raise ValueError("need at least 2 palettes and 2 layouts")
    if size < 16:
        raise ValueError("size must be >= 16")
    return render_scene(sample_factors(rng, n_palettes, n_layouts), size)


def generate_dataset(n: int, n_palettes: int = 4, n_layouts: int = 4, size: int = 32, seed: int = 0) -> list:
    """``n`` samples; sample ``i`` uses its own seed derived from ``(seed, i)``."""
    return [generate_scene(np.random.default_rng([seed, i]), n_palettes, n_layouts, size) for i in range(n)]


# ---------------------------------------------------------------------------
# LiDAR-style preprocessing


def project_pointcloud(pc: PointCloud, size: int) -> np.ndarray:
    """Sparse (size, size) depth image; 0 marks pixels without a return."""
    pts = np.asarray(pc.points, dtype=np.float64).reshape(-1, 3)
    pts = pts[pts[:, 2] > 0]
    img = np.full((size, size), np.inf)
    if len(pts):
        x, y, z = pts.T
        col = np.floor(pc.fx * x / z + pc.cx + 0.5).astype(np.int64)
        row = np.floor(pc.fy * y / z + pc.cy + 0.5).astype(np.int64)
        ok = (col >= 0) & (col < size) & (row >= 0) & (row < size)
        np.minimum.at(img, (row[ok], col[ok]), z[ok])
    img[np.isinf(img)] = 0.0
    return img


def backproject(depth: np.ndarray, fx: float, fy: float, cx: float, cy: float) -> np.ndarray:
    """(N, 3) points for every nonzero pixel of ``depth``."""
    rows, cols = np.nonzero(depth)
    z = depth[rows, cols]
    return np.stack([(cols - cx) * z / fx, (rows - cy) * z / fy, z], axis=1)


def densify_depth(sparse: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Fill zero pixels with the value of the nearest nonzero pixel.

    Distances are Euclidean in pixel units; ties go to the seed that comes
    first in row-major order.
    """
    sparse = np.asarray(sparse, dtype=np.float64)
    seeds = np.flatnonzero(sparse)
    if seeds.size == 0:
        raise ValueError("densify_depth: input has no nonzero pixels")
    h, w = sparse.shape
    sr, sc = np.divmod(seeds, w)
    flat = sparse.ravel()
    out = flat.copy()
    holes = np.flatnonzero(flat == 0)
    for start in range(0, holes.size, chunk):
        idx = holes[start : start + chunk]
        r, c = np.divmod(idx, w)
        d2 = (r[:, None] - sr[None]) ** 2 + (c[:, None] - sc[None]) ** 2
        # argmin returns the first minimum; seeds are in row-major order
        out[idx] = flat[seeds[np.argmin(d2, axis=1)]]
    return out.reshape(h, w)


def simulate_lidar(depth_m: np.ndarray, rng, keep: float = 0.15, focal: float | None = None) -> PointCloud:
    """Back-project a random subset of depth pixels into a sparse point cloud."""
    rng = np.random.default_rng(rng)
    h, w = depth_m.shape
    f = float(focal if focal is not None else w)
    mask = rng.random(depth_m.shape) < keep
    sub = np.where(mask, depth_m, 0.0)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    return PointCloud(backproject(sub, f, f, cx, cy), f, f, cx, cy)


# ---------------------------------------------------------------------------
# arrays, splits and files


@dataclass
class Arrays:
    """Stacked view of a sample list, ready for batching."""

    rgb: np.ndarray  # (N, 3, H, W)
    depth: np.ndarray  # (N, 1, H, W)
    appearance: np.ndarray  # (N,)
    structure: np.ndarray  # (N,)
    view_angle: np.ndarray  # (N,)

    def __len__(self):
        return len(self.appearance)

    def subset(self, idx) -> "Arrays":
        idx = np.asarray(idx)
        return Arrays(self.rgb[idx], self.depth[idx], self.appearance[idx], self.structure[idx], self.view_angle[idx])


def to_arrays(samples) -> Arrays:
    if len(samples) == 0:
        raise ValueError("to_arrays: empty sample list")
    return Arrays(
        rgb=np.stack([s.rgb for s in samples]),
        depth=np.stack([s.depth for s in samples]),
        appearance=np.array([s.factors.appearance_class for s in samples]),
        structure=np.array([s.factors.structure_class for s in samples]),
        view_angle=np.array([s.factors.view_angle for s in samples]),
    )


def _largest_remainder(n: int, fractions) -> list:
    raw = np.asarray(fractions, dtype=np.float64) * n
    sizes = np.floor(raw).astype(int)
    for k in np.argsort(-(raw - sizes), kind="stable")[: n - sizes.sum()]:
        sizes[k] += 1
    return sizes.tolist()


def split(samples, fractions, rng=0) -> list:
    """Seeded partition of ``samples``, stratified on the appearance class."""
    fractions = list(fractions)
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    rng = np.random.default_rng(rng)
    labels = np.array([s.factors.appearance_class for s in samples])
    # spread each class evenly along one ordering, then cut contiguous chunks
    keys = np.empty(len(samples))
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        perm = rng.permutation(members)
        keys[perm] = (np.arange(len(perm)) + rng.uniform(0.25, 0.75)) / len(perm)
    order = np.lexsort((rng.random(len(samples)), keys))
    sizes = _largest_remainder(len(samples), fractions)
    parts, start = [], 0
    for sz in sizes:
        parts.append([samples[i] for i in order[start : start + sz]])
        start += sz
    return parts


def _pack_factors(f: SceneFactors) -> bytes:
    slots = list(f.shape_params) + [(0.0, 0.0, 0.0, 0.0)] * (MAX_OBJECTS - len(f.shape_params))
    flat = [v for slot in slots for v in slot]
    return struct.pack(_FACTOR_FMT, f.appearance_class, f.structure_class, f.view_angle, len(f.shape_params), *flat)


def _unpack_factors(buf, offset: int) -> SceneFactors:
    if offset + FACTOR_RECORD_SIZE > len(buf):
        raise FormatError("truncated factor record", offset)
    vals = struct.unpack_from(_FACTOR_FMT, buf, offset)
    a, s, view, n = vals[:4]
    if n > MAX_OBJECTS:
        raise FormatError(f"object count {n} exceeds {MAX_OBJECTS}", offset)
    flat = vals[4:]
    params = tuple(tuple(flat[4 * k : 4 * k + 4]) for k in range(n))
    return SceneFactors(a, s, view, params)


def dataset_bytes(samples) -> bytes:
    chunks = [DATASET_MAGIC, struct.pack("<I", len(samples))]
    for s in samples:
        chunks += [encode_array(s.rgb), encode_array(s.depth), _pack_factors(s.factors)]
    return b"".join(chunks)


def save_dataset(samples, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(samples))


def parse_dataset(buf) -> list:
    if bytes(buf[:4]) != DATASET_MAGIC:
        raise FormatError("bad MMD1 magic", 0)
    if len(buf) < 8:
        raise FormatError("truncated MMD1 sample count", 4)
    (count,) = struct.unpack_from("<I", buf, 4)
    pos, out = 8, []
    for _ in range(count):
        rgb, pos = decode_array(buf, pos)
        depth, pos = decode_array(buf, pos)
        factors = _unpack_factors(buf, pos)
        pos += FACTOR_RECORD_SIZE
        out.append(MultimodalSample(rgb, depth, factors))
    if pos != len(buf):
        raise FormatError("trailing bytes after last sample", pos)
    return out


def load_dataset(path) -> list:
    with open(path, "rb") as fh:
        return parse_dataset(fh.read())


def load_tsr_pairs(directory) -> list:
    """Load ``<stem>.rgb.tsr`` / ``<stem>.depth.tsr`` pairs from a directory.

    Optional ``labels.json`` maps stem -> {"appearance_class", "structure_class"};
    missing labels are recorded as -1.
    """
    directory = Path(directory)
    labels = {}
    if (directory / "labels.json").exists():
        labels = json.loads((directory / "labels.json").read_text())
    out = []
    for rgb_path in sorted(directory.glob("*.rgb.tsr")):
        stem = rgb_path.name[: -len(".rgb.tsr")]
        depth_path = directory / f"{stem}.depth.tsr"
        if not depth_path.exists():
            raise FileNotFoundError(f"missing depth image for {stem}")
        rgb, _ = decode_array(rgb_path.read_bytes())
        depth, _ = decode_array(depth_path.read_bytes())
        if depth.ndim == 2:
            depth = depth[None]
        lab = labels.get(stem, {})
        f = SceneFactors(int(lab.get("appearance_class", -1)), int(lab.get("structure_class", -1)), 0.0, ())
        out.append(MultimodalSample(rgb, depth, f))
    return out


def _to_u8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(path, image) -> None:
    """Binary PPM (P6) of a (3, H, W) or (1, H, W) image with values in [0, 1]."""
    px = _to_u8(image)
    h, w, _ = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(raw) and not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise FormatError("not a P6 PPM", 0)
    w, h = int(tokens[1]), int(tokens[2])
    px = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return px.reshape(h, w, 3).transpose(2, 0, 1) / 255.0


def image_grid(images, ncols: int, pad: int = 1) -> np.ndarray:
    """Tile equally-sized (C, H, W) images into one (3, H', W') image."""
    imgs = [np.repeat(i, 3, axis=0) if i.shape[0] == 1 else i for i in images]
    c, h, w = imgs[0].shape
    nrows = -(-len(imgs) // ncols)
    grid = np.ones((c, nrows * (h + pad) + pad, ncols * (w + pad) + pad))
    for k, img in enumerate(imgs):
        r, q = divmod(k, ncols)
        grid[:, pad + r * (h + pad) : pad + r * (h + pad) + h, pad + q * (w + pad) : pad + q * (w + pad) + w] = img
    return grid


def class_balance(samples) -> dict:
    counts = {}
    for s in samples:
        key = (s.factors.appearance_class, s.factors.structure_class)
        counts[key] = counts.get(key, 0) + 1
    return counts

