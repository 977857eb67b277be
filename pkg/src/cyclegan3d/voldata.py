"""Volume containers, file formats, augmentation and the phantom dataset.

Voxels are stored (c, d, h, w) in float32 and normalized to [-1, 1].
Two interchange formats are supported:

* ``vvf`` -- b"VVF1", u32 LE header length, JSON header, float32 LE voxels.
* ``png_stack`` -- a directory holding ``volume.json`` and ``slice_###.png``.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from .rng import Rng

VVF_MAGIC = b"VVF1"
MODALITY_CHANNELS = {"oct": 1, "confocal": 3}


class VolumeError(Exception):
    """Base class for volume I/O failures."""


class VolumeFormatError(VolumeError):
    """Malformed container or metadata."""


class MissingSliceError(VolumeError):
    pass


class BitDepthError(VolumeError):
    pass


class VolumeShapeError(VolumeError):
    pass


@dataclass
class Volume:
    voxels: np.ndarray
    modality: str
    name: str = ""
    bit_depth: int = 32

    def __post_init__(self):
        v = np.asarray(self.voxels, dtype=np.float32)
        if v.ndim != 4:
            raise VolumeShapeError(f"voxels must be (c, d, h, w), got shape {v.shape}")
        expected = MODALITY_CHANNELS.get(self.modality)
        if expected is None:
            raise VolumeFormatError(f"unknown modality {self.modality!r}")
        if v.shape[0] != expected:
            raise VolumeShapeError(f"{self.modality} volumes have {expected} channel(s), got {v.shape[0]}")
        self.voxels = v

    @property
    def channels(self):
        return self.voxels.shape[0]

    @property
    def shape(self):
        """(depth, height, width)."""
        return self.voxels.shape[1:]

    def with_voxels(self, voxels):
        return Volume(voxels, self.modality, self.name, self.bit_depth)

    def batch(self):
        """(1, c, d, h, w) view for the networks."""
        return self.voxels[None]


# ------------------------------------------------------------------- vvf

def save_vvf(path, vol):
    c, d, h, w = vol.voxels.shape
    header = json.dumps({"channels": c, "depth": d, "height": h, "width": w,
                         "precision": "float32", "modality": vol.modality}).encode()
    with open(path, "wb") as f:
        f.write(VVF_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(vol.voxels.astype("<f4").tobytes())


def load_vvf(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != VVF_MAGIC or len(blob) < 8:
        raise VolumeFormatError(f"{path}: not a VVF1 file")
    (n,) = struct.unpack("<I", blob[4:8])
    try:
        head = json.loads(blob[8:8 + n].decode())
        shape = tuple(int(head[k]) for k in ("channels", "depth", "height", "width"))
        modality = head["modality"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise VolumeFormatError(f"{path}: bad header ({exc})") from None
    if head.get("precision", "float32") != "float32":
        raise VolumeFormatError(f"{path}: unsupported precision {head['precision']!r}")
    body = blob[8 + n:]
    count = int(np.prod(shape))
    if len(body) != 4 * count:
        raise VolumeShapeError(f"{path}: header says {shape} ({4 * count} bytes), body has {len(body)}")
    vox = np.frombuffer(body, dtype="<f4").reshape(shape).astype(np.float32)
    name = os.path.splitext(os.path.basename(path))[0]
    return Volume(vox, modality, name)


# ------------------------------------------------------------- png stack

def quantize(voxels):
    """[-1, 1] -> uint8 with round-half-away-from-zero."""
    q = (np.clip(voxels.astype(np.float64), -1, 1) + 1) * 127.5
    return np.floor(q + 0.5).astype(np.uint8)


def normalize(raw, maxval):
    return (2.0 * raw.astype(np.float64) / maxval - 1.0).astype(np.float32)


_MODE_BITS = {"L": 8, "RGB": 8, "I;16": 16, "I;16B": 16, "I;16L": 16, "I": 16}


def save_png_stack(path, vol):
    os.makedirs(path, exist_ok=True)
    c, d, h, w = vol.voxels.shape
    meta = {"depth": d, "height": h, "width": w, "channels": c, "bitdepth": 8, "modality": vol.modality}
    with open(os.path.join(path, "volume.json"), "w") as f:
        json.dump(meta, f, indent=1)
    q = quantize(vol.voxels)
    for k in range(d):
        img = q[0, k] if c == 1 else np.moveaxis(q[:, k], 0, -1)
        Image.fromarray(np.ascontiguousarray(img), "L" if c == 1 else "RGB").save(
            os.path.join(path, f"slice_{k:03d}.png"))


def load_png_stack(path, expected_shape=None):
    meta_path = os.path.join(path, "volume.json")
    try:
        with open(meta_path) as f:
            meta = json.load(f)
        d, h, w, c = (int(meta[k]) for k in ("depth", "height", "width", "channels"))
    except FileNotFoundError:
        raise VolumeFormatError(f"{path}: missing volume.json") from None
    except (ValueError, KeyError) as exc:
        raise VolumeFormatError(f"{meta_path}: bad metadata ({exc})") from None
    slices, depths = [], set()
    for k in range(d):
        fp = os.path.join(path, f"slice_{k:03d}.png")
        if not os.path.exists(fp):
            raise MissingSliceError(f"{path}: slice_{k:03d}.png missing ({d} slices declared)")
        with Image.open(fp) as img:
            bits = _MODE_BITS.get(img.mode)
            if bits is None:
                raise BitDepthError(f"{fp}: unsupported PNG mode {img.mode}")
            arr = np.array(img)
        depths.add(bits)
        if len(depths) > 1:
            raise BitDepthError(f"{path}: mixed bit depths {sorted(depths)}")
        if arr.ndim == 2:
            arr = arr[None]
        else:
            arr = np.moveaxis(arr, -1, 0)
        if arr.shape != (c, h, w):
            raise VolumeShapeError(f"{fp}: slice shape {arr.shape}, volume.json says {(c, h, w)}")
        slices.append(arr)
    bits = depths.pop()
    if int(meta.get("bitdepth", bits)) != bits:
        raise BitDepthError(f"{path}: volume.json bitdepth {meta['bitdepth']}, slices are {bits}-bit")
    raw = np.stack(slices, axis=1)
    if expected_shape is not None and tuple(raw.shape) != tuple(expected_shape):
        raise VolumeShapeError(f"{path}: shape {raw.shape} does not match manifest {tuple(expected_shape)}")
    modality = meta.get("modality", "oct" if c == 1 else "confocal")
    vol = Volume(normalize(raw, 2 ** bits - 1), modality, os.path.basename(os.path.normpath(path)), bits)
    return vol


# -------------------------------------------------------------- dispatch

def detect_format(path):
    if os.path.isdir(path):
        return "png_stack"
    if path.endswith(".vvf"):
        return "vvf"
    raise VolumeFormatError(f"cannot infer volume format of {path}")


def load_volume(path, fmt=None, expected_shape=None):
    fmt = fmt or detect_format(path)
    if fmt == "vvf":
        vol = load_vvf(path)
        if expected_shape is not None and vol.voxels.shape != tuple(expected_shape):
            raise VolumeShapeError(f"{path}: shape {vol.voxels.shape} does not match {tuple(expected_shape)}")
        return vol
    if fmt == "png_stack":
        return load_png_stack(path, expected_shape)
    raise VolumeFormatError(f"unknown format {fmt!r}")


def save_volume(path, vol, fmt=None):
    fmt = fmt or ("png_stack" if not str(path).endswith(".vvf") else "vvf")
    try:
        if fmt == "vvf":
            save_vvf(path, vol)
        elif fmt == "png_stack":
            save_png_stack(path, vol)
        else:
            raise VolumeFormatError(f"unknown format {fmt!r}")
    except OSError as exc:
        raise VolumeError(f"writing {path}: {exc}") from exc


def list_volumes(directory, fmt=None):
    """Paths of the volumes stored directly inside ``directory``, sorted by name."""
    if not os.path.isdir(directory):
        raise VolumeError(f"{directory}: not a directory")
    out = []
    for name in sorted(os.listdir(directory)):
        p = os.path.join(directory, name)
        if name.endswith(".vvf") and fmt in (None, "vvf"):
            out.append(p)
        elif os.path.isdir(p) and os.path.exists(os.path.join(p, "volume.json")) and fmt in (None, "png_stack"):
            out.append(p)
    return out


def load_volume_dir(directory, fmt=None):
    return [load_volume(p) for p in list_volumes(directory, fmt)]


# ------------------------------------------------------------ manifests

@dataclass
class DatasetManifest:
    root: str
    oct: list = field(default_factory=list)
    confocal: list = field(default_factory=list)

    def __post_init__(self):
        paths = [e["path"] for e in self.oct + self.confocal]
        if len(paths) != len(set(paths)):
            raise VolumeFormatError("manifest lists a path more than once")

    def entries(self, modality, split=None):
        return [e for e in getattr(self, modality) if split is None or e["split"] == split]

    def load(self, modality, split=None):
        return [load_volume(os.path.join(self.root, e["path"]), e["format"], e["shape"])
                for e in self.entries(modality, split)]

    def to_json(self):
        return {"root": ".", "oct": self.oct, "confocal": self.confocal}

    def save(self, path=None):
        path = path or os.path.join(self.root, "manifest.json")
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1)
        return path

    @classmethod
    def read(cls, path):
        with open(path) as f:
            data = json.load(f)
        root = os.path.join(os.path.dirname(os.path.abspath(path)), data.get("root", "."))
        return cls(os.path.normpath(root), data["oct"], data["confocal"])


# ---------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    zoom_range: tuple = (0.9, 1.1)
    crop: tuple | None = None  # (h, w); None keeps the input extent


@dataclass(frozen=True)
class AugmentDraw:
    flip: bool
    zoom: float
    offset: tuple  # fractional crop position in [0, 1) per plane axis


def draw_augment(rng, cfg=AugmentConfig()):
    flip = bool(rng.random() < cfg.flip_prob)
    zoom = float(rng.uniform(*cfg.zoom_range))
    offset = (float(rng.random()), float(rng.random()))
    return AugmentDraw(flip, zoom, offset)


def hflip(voxels):
    return voxels[..., ::-1].copy()


def apply_augment(vol, draw, crop=None):
    """Flip, zoom within each depth slice, then crop (or reflect-pad and crop) to ``crop``."""
    v = vol.voxels
    h, w = v.shape[2:]
    th, tw = crop or (h, w)
    if th > h or tw > w:
        raise VolumeShapeError(f"crop {(th, tw)} larger than volume plane {(h, w)}")
    if draw.flip:
        v = hflip(v)
    if draw.zoom != 1.0:
        zh, zw = max(1, int(round(h * draw.zoom))), max(1, int(round(w * draw.zoom)))
        v = ndimage.zoom(v, (1, 1, zh / h, zw / w), order=1, mode="nearest", grid_mode=True)
    ph, pw = max(0, th - v.shape[2]), max(0, tw - v.shape[3])
    if ph or pw:
        v = np.pad(v, ((0, 0), (0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)), mode="reflect")
    y0 = int(draw.offset[0] * (v.shape[2] - th + 1))
    x0 = int(draw.offset[1] * (v.shape[3] - tw + 1))
    v = v[:, :, y0:y0 + th, x0:x0 + tw]
    return vol.with_voxels(np.clip(v, -1, 1))


def augment(x, y, rng, cfg=AugmentConfig()):
    """Independent flip/zoom/crop draws for the OCT and confocal volume."""
    return (apply_augment(x, draw_augment(rng.spawn("x"), cfg), cfg.crop),
            apply_augment(y, draw_augment(rng.spawn("y"), cfg), cfg.crop))


def depth_window(vol, n_slices, rng=None):
    """Contiguous slab of ``n_slices``: random start with ``rng``, centered without."""
    d = vol.shape[0]
    if d < n_slices:
        raise VolumeShapeError(f"{vol.name or 'volume'} has depth {d} < {n_slices} slices")
    start = (d - n_slices) // 2 if rng is None else int(rng.integers(0, d - n_slices + 1))
    return vol.with_voxels(vol.voxels[:, start:start + n_slices])


# --------------------------------------------------------------- phantom

def _vessel_tree(rng, h, w, n_roots=2, max_segments=40):
    """Random branching polyline segments (y0, x0, y1, x1, radius) in the plane."""
    segs = []
    stack = []
    for _ in range(n_roots):
        stack.append((rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w,
                      rng.uniform(0, 2 * np.pi), rng.uniform(2.0, 3.2), 0))
    while stack and len(segs) < max_segments:
        y, x, ang, rad, depth = stack.pop()
        length = rng.uniform(0.12, 0.25) * min(h, w)
        ny, nx = y + length * np.sin(ang), x + length * np.cos(ang)
        segs.append((y, x, ny, nx, rad))
        if depth >= 4 or rad < 0.9 or not (0 <= ny < h and 0 <= nx < w):
            continue
        n_child = 2 if rng.random() < 0.55 else 1
        for _ in range(n_child):
            stack.append((ny, nx, ang + rng.uniform(-0.7, 0.7), rad * rng.uniform(0.7, 0.9), depth + 1))
    return segs


def _render_tree(segs, h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    mask = np.zeros((h, w))
    for y0, x0, y1, x1, r in segs:
        dy, dx = y1 - y0, x1 - x0
        t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / max(dy * dy + dx * dx, 1e-9), 0, 1)
        dist = np.hypot(yy - (y0 + t * dy), xx - (x0 + t * dx))
        mask = np.maximum(mask, np.clip(r + 0.5 - dist, 0, 1))
    return mask


def _depth_profile(rng, d):
    centre = rng.uniform(0.35, 0.65) * (d - 1)
    width = max(1.0, d / 3)
    return np.exp(-0.5 * ((np.arange(d) - centre) / width) ** 2)


def phantom_confocal(rng, shape):
    d, h, w = shape
    plane = _render_tree(_vessel_tree(rng, h, w), h, w)
    prof = _depth_profile(rng, d)
    vessels = prof[:, None, None] * plane[None]
    yy, xx = np.mgrid[0:h, 0:w]
    green = np.zeros((h, w))
    ys, xs = np.nonzero(plane > 0.5)
    for i in rng.integers(0, max(len(ys), 1), size=min(len(ys), 12)):
        green += np.exp(-((yy - ys[i]) ** 2 + (xx - xs[i]) ** 2) / 3.0)
    green = np.clip(green, 0, 1) * plane
    blue = np.zeros((d, h, w))
    n_nuclei = int(0.02 * h * w)
    for _ in range(n_nuclei):
        k, cy, cx = rng.integers(0, d), rng.uniform(0, h), rng.uniform(0, w)
        blue[k] += 0.35 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 1.5)
    rgb = np.stack([0.95 * vessels, 0.8 * prof[:, None, None] * green[None], np.clip(blue, 0, 0.45)])
    return (2 * np.clip(rgb, 0, 1) - 1).astype(np.float32)


def phantom_oct(rng, shape):
    d, h, w = shape
    plane = _render_tree(_vessel_tree(rng, h, w), h, w)
    prof = _depth_profile(rng, d)
    layers = 0.35 + 0.1 * np.sin(np.linspace(0, np.pi, d))[:, None, None]
    signal = layers + 0.3 * prof[:, None, None] * plane[None]
    speckle = rng.generator.gamma(4.0, 0.25, size=(d, h, w))
    gray = np.clip(signal * speckle, 0, 1)
    return (2 * gray - 1)[None].astype(np.float32)


def make_phantom_dataset(out_dir, n_per_domain, shape=(9, 64, 64), seed=0, fmt="vvf", n_eval=0):
    """Write unpaired OCT-like and confocal-like phantoms plus ``manifest.json``.

    Each index draws the two domains from different vessel trees, so no
    pair shares anatomy.  Output is a pure function of the arguments.
    """
    root = Rng(seed)
    entries = {"oct": [], "confocal": []}
    plan = [("train", i) for i in range(n_per_domain)] + [("eval", i) for i in range(n_eval)]
    for split, i in plan:
        for modality, render in (("oct", phantom_oct), ("confocal", phantom_confocal)):
            vox = render(root.spawn(split, modality, i), tuple(shape))
            sub = modality if split == "train" else os.path.join("eval", modality)
            name = f"phantom_{i:03d}"
            rel = os.path.join(sub, name + (".vvf" if fmt == "vvf" else ""))
            os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
            save_volume(os.path.join(out_dir, rel), Volume(vox, modality, name), fmt)
            entries[modality].append({"path": rel, "format": fmt, "shape": list(vox.shape), "split": split})
    manifest = DatasetManifest(out_dir, entries["oct"], entries["confocal"])
    manifest.save()
    return manifest
