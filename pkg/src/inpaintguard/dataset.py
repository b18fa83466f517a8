"""Procedural shape corpus for training and evaluating the inpainter.

Every sample is a 32x32 image of one hard-edged shape (disk, square, or
triangle) over a textured background: a four-corner gradient plus two
oriented sinusoidal plaids. Shapes are rendered by evaluating an
analytic inclusion test at pixel centers, so the stored segmentation
mask is exact by construction and the bounding box is the tight hull of
the rendered pixels.

Sample i of a dataset with master seed s is generated from the tuple
(s, i), so datasets are reproducible and samples are independent of
generation order.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .imageio import pgm_read, ppm_read, ppm_write
from .masks import Box, MaskSpec, all_keep_mask, box_to_mask, mask_to_pgm

IMAGE_SIZE = 32
CLASS_NAMES = {1: "disk", 2: "square", 3: "triangle"}
_NAME_TO_CLASS = {v: k for k, v in CLASS_NAMES.items()}
_MIN_SHAPE_PIXELS = 20


@dataclass
class ShapeSample:
    index: int
    class_id: int
    image: np.ndarray
    seg: MaskSpec
    bbox: Box
    seed: tuple
    geometry: dict


def _pixel_centers(size):
    c = np.arange(size, dtype=np.float64) + 0.5
    return np.meshgrid(c, c)


def _disk_inside(size, cx, cy, r):
    gx, gy = _pixel_centers(size)
    return (gx - cx) ** 2 + (gy - cy) ** 2 <= r * r


def _triangle_inside(size, verts):
    # pixel center on the non-negative side of all three CCW edges
    gx, gy = _pixel_centers(size)
    inside = np.ones((size, size), dtype=bool)
    for i in range(3):
        ax, ay = verts[i]
        bx, by = verts[(i + 1) % 3]
        cross = (bx - ax) * (gy - ay) - (by - ay) * (gx - ax)
        inside &= cross >= 0.0
    return inside


def _signed_area(verts):
    (ax, ay), (bx, by), (cx, cy) = verts
    return 0.5 * ((bx - ax) * (cy - ay) - (by - ay) * (cx - ax))


def _sample_geometry(rng, class_id, size):
    """Shape parameters plus the boolean inclusion grid."""
    if class_id == 1:
        r = float(rng.uniform(5.0, 10.0))
        cx = float(rng.uniform(r + 1.0, size - r - 1.0))
        cy = float(rng.uniform(r + 1.0, size - r - 1.0))
        return {"cx": cx, "cy": cy, "r": r}, _disk_inside(size, cx, cy, r)
    if class_id == 2:
        side = int(rng.integers(8, 17))
        x0 = int(rng.integers(1, size - side))
        y0 = int(rng.integers(1, size - side))
        inside = np.zeros((size, size), dtype=bool)
        inside[y0:y0 + side, x0:x0 + side] = True
        return {"x0": x0, "y0": y0, "side": side}, inside
    for _ in range(1000):
        verts = [(float(rng.uniform(2.0, size - 2.0)),
                  float(rng.uniform(2.0, size - 2.0))) for _ in range(3)]
        area = _signed_area(verts)
        if area < 0:
            verts = [verts[0], verts[2], verts[1]]
            area = -area
        if area < 40.0:
            continue
        inside = _triangle_inside(size, verts)
        if int(inside.sum()) >= _MIN_SHAPE_PIXELS:
            return {"vertices": [list(v) for v in verts]}, inside
    raise ContractError("triangle sampling failed to converge")


def make_sample(master_seed, index, size=IMAGE_SIZE):
    rng = np.random.default_rng([master_seed, index])
    class_id = int(rng.integers(1, 4))
    geometry, inside = _sample_geometry(rng, class_id, size)

    corners = rng.random((4, 3))
    gx, gy = _pixel_centers(size)
    fx = (gx - 0.5) / (size - 1)
    fy = (gy - 0.5) / (size - 1)
    image = np.empty((3, size, size), dtype=np.float64)
    for c in range(3):
        top = (1.0 - fx) * corners[0, c] + fx * corners[1, c]
        bot = (1.0 - fx) * corners[2, c] + fx * corners[3, c]
        image[c] = (1.0 - fy) * top + fy * bot
    # two oriented plaids so the background varies locally, not just
    # as a slow ramp; wavelengths stay well above the 2px patch pitch
    for _ in range(2):
        theta = float(rng.uniform(0.0, np.pi))
        freq = float(rng.uniform(0.35, 0.9))
        phase = float(rng.uniform(0.0, 2.0 * np.pi))
        weights = rng.uniform(0.06, 0.2, size=3)
        wave = np.sin(freq * (np.cos(theta) * gx + np.sin(theta) * gy) + phase)
        image += weights[:, None, None] * wave[None]
    np.clip(image, 0.0, 1.0, out=image)
    color = rng.random(3)
    image[:, inside] = color[:, None]

    ys, xs = np.nonzero(inside)
    bbox = Box(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
    seg = MaskSpec(np.where(inside, 0, 1).astype(np.uint8), "segmentation", bbox)
    return ShapeSample(index, class_id, image, seg, bbox,
                       (int(master_seed), int(index)), geometry)


def random_training_mask(rng, bbox, bounds=(IMAGE_SIZE, IMAGE_SIZE)):
    """Draw one training-time keep/hole mask.

    Branch probabilities: 0.4 random rectangle hole (sides 8..24),
    0.4 hole over the sample's bounding box, 0.1 hole everywhere but
    the box, 0.1 no hole at all. The branch draw always comes first so
    the stream layout is stable.
    """
    h, w = bounds
    u = float(rng.random())
    if u < 0.4:
        rw = int(rng.integers(8, 25))
        rh = int(rng.integers(8, 25))
        x0 = int(rng.integers(0, w - rw + 1))
        y0 = int(rng.integers(0, h - rh + 1))
        rect = Box(x0, y0, x0 + rw, y0 + rh)
        return MaskSpec(box_to_mask(rect, bounds).grid, "custom", rect)
    if u < 0.8:
        return box_to_mask(bbox, bounds, hole_inside=True)
    if u < 0.9:
        return box_to_mask(bbox, bounds, hole_inside=False)
    return all_keep_mask(bounds)


def class_tokens(class_id, prompt_len=4):
    if class_id not in CLASS_NAMES:
        raise ConfigError(f"unknown class id {class_id}")
    return np.full(prompt_len, class_id, dtype=np.int64)


def prompt_tokens(text, prompt_len=4, vocab=8):
    """Parse a prompt string into token ids.

    Accepts a shape name ("disk", "square", "triangle"), the empty
    string (null prompt), or comma-separated integer ids padded by
    repetition of the last id.
    """
    text = text.strip()
    if text == "":
        return np.zeros(prompt_len, dtype=np.int64)
    if text in _NAME_TO_CLASS:
        return class_tokens(_NAME_TO_CLASS[text], prompt_len)
    try:
        ids = [int(tok) for tok in text.split(",")]
    except ValueError:
        raise ConfigError(f"prompt must be a shape name or id list, got {text!r}")
    if not ids or len(ids) > prompt_len:
        raise ConfigError(f"prompt must have 1..{prompt_len} ids")
    for i in ids:
        if not 0 <= i < vocab:
            raise ConfigError(f"token id {i} outside vocabulary 0..{vocab - 1}")
    while len(ids) < prompt_len:
        ids.append(ids[-1])
    return np.asarray(ids, dtype=np.int64)


def _json_bytes(obj):
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode("utf-8")


def _meta_record(sample):
    return {
        "index": sample.index,
        "class_id": sample.class_id,
        "class_name": CLASS_NAMES[sample.class_id],
        "bbox": [sample.bbox.x0, sample.bbox.y0, sample.bbox.x1, sample.bbox.y1],
        "seed": list(sample.seed),
        "geometry": sample.geometry,
    }


def gen_dataset(count, seed, out_dir):
    """Write `count` samples plus a manifest; returns the manifest dict."""
    if count < 1:
        raise ConfigError("dataset count must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for index in range(count):
        sample = make_sample(seed, index)
        stem = f"{index:05d}"
        with open(os.path.join(out_dir, stem + ".ppm"), "wb") as f:
            f.write(ppm_write(sample.image))
        with open(os.path.join(out_dir, stem + ".mask.pgm"), "wb") as f:
            f.write(mask_to_pgm(sample.seg))
        with open(os.path.join(out_dir, stem + ".meta.json"), "wb") as f:
            f.write(_json_bytes(_meta_record(sample)))
        entry = _meta_record(sample)
        entry.update(image=stem + ".ppm", mask=stem + ".mask.pgm",
                     meta=stem + ".meta.json")
        del entry["geometry"]
        entries.append(entry)
    manifest = {"count": count, "master_seed": int(seed),
                "image_size": IMAGE_SIZE, "entries": entries}
    with open(os.path.join(out_dir, "manifest.json"), "wb") as f:
        f.write(_json_bytes(manifest))
    return manifest


def load_dataset(path):
    """Read a generated dataset directory back into ShapeSample values.

    Images come back at 8-bit precision (the PPM round trip quantizes);
    masks and metadata are exact.
    """
    with open(os.path.join(path, "manifest.json"), "rb") as f:
        manifest = json.loads(f.read().decode("utf-8"))
    samples = []
    for entry in manifest["entries"]:
        with open(os.path.join(path, entry["image"]), "rb") as f:
            image = ppm_read(f.read())
        with open(os.path.join(path, entry["mask"]), "rb") as f:
            grid = (pgm_read(f.read()) > 0.5).astype(np.uint8)
        with open(os.path.join(path, entry["meta"]), "rb") as f:
            meta = json.loads(f.read().decode("utf-8"))
        bbox = Box(*meta["bbox"])
        seg = MaskSpec(grid, "segmentation", bbox)
        samples.append(ShapeSample(meta["index"], meta["class_id"], image, seg,
                                   bbox, tuple(meta["seed"]), meta["geometry"]))
    if len(samples) != manifest["count"]:
        raise ContractError("manifest count disagrees with entry list")
    return samples
