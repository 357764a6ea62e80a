"""
Toy multi-view dataset: procedural category meshes, a software z-buffer rasterizer,
the JSON-lines manifest and the torch datasets built on top of it.

Directory layout written by `render_toy_dataset`:

    <out>/
        dataset.json          render settings + category metadata
        manifest.jsonl        one ManifestRecord per line
        images/000000.png     8-bit RGB, background exactly 0
        depth/000000.png      16-bit depth in units of DEPTH_UNIT (0 = background)
"""
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
import trimesh
from PIL import Image
from pydantic import BaseModel, ConfigDict, ValidationError
from torch.utils.data import Dataset
from tqdm import tqdm

from .config import RenderConfig, resolve_data_path
from .errors import ConfigurationError, DatasetError
from .geometry import Pose, encode_relative_depth, encode_target_depth, euler_to_rotation, to_chw

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
METADATA_NAME = "dataset.json"
DEPTH_UNIT = 1e-4
OBJECT_RADIUS = 0.45
AMBIENT = 0.35
LIGHT_DIR = np.array([-0.3, 0.6, -1.0]) / np.linalg.norm([-0.3, 0.6, -1.0])


# --- Manifest ---

class ManifestRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    path: str
    instance_id: str
    rx: float
    ry: float
    rz: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 1.0
    f: float = 1.0
    split: Literal["train", "val", "test"]
    category: Optional[str] = None
    depth_path: Optional[str] = None

    @property
    def pose(self) -> Pose:
        return Pose(rx=self.rx, ry=self.ry, rz=self.rz, tx=self.tx, ty=self.ty, tz=self.tz, focal=self.f)


def write_manifest(path: str, records: Sequence[ManifestRecord]):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(record.model_dump_json() + "\n")


def read_manifest(path: str) -> List[ManifestRecord]:
    """Parse a manifest; the first malformed line raises DatasetError with its line number."""
    if not os.path.exists(path):
        raise ConfigurationError(f"Manifest not found: {path}")
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(ManifestRecord.model_validate_json(line))
            except ValidationError as err:
                raise DatasetError(f"malformed manifest record: {err.errors()[0]['msg']}", path, line_number) from err
    if not records:
        raise DatasetError("manifest is empty", path)
    return records


# --- Procedural categories ---

Part = Tuple[trimesh.Trimesh, np.ndarray]


def _upright(mesh: trimesh.Trimesh) -> trimesh.Trimesh:
    """trimesh cylinders run along z; our objects stand along y."""
    mesh.apply_transform(trimesh.transformations.rotation_matrix(-math.pi / 2, [1, 0, 0]))
    return mesh


def _cylinder(radius: float, height: float, center_y: float, sections: int = 24) -> trimesh.Trimesh:
    mesh = _upright(trimesh.creation.cylinder(radius=radius, height=height, sections=sections))
    mesh.apply_translation([0.0, center_y, 0.0])
    return mesh


def _box(extents, center, rotation: Optional[np.ndarray] = None) -> trimesh.Trimesh:
    mesh = trimesh.creation.box(extents=extents)
    if rotation is not None:
        mesh.apply_transform(rotation)
    mesh.apply_translation(center)
    return mesh


def _color(rng: np.random.Generator, low: float = 0.25, high: float = 0.95) -> np.ndarray:
    return rng.uniform(low, high, size=3)


def _laptop(rng: np.random.Generator) -> List[Part]:
    width = rng.uniform(0.8, 1.1)
    depth = rng.uniform(0.55, 0.75)
    thickness = rng.uniform(0.03, 0.06)
    hinge = math.radians(rng.uniform(75.0, 120.0))
    shell, keys, screen = _color(rng), _color(rng, 0.1, 0.4), _color(rng, 0.2, 0.6)

    parts = [(_box([width, thickness, depth], [0.0, 0.0, 0.0]), shell)]
    # keyboard plate on the front two thirds of the base
    parts.append((_box([0.85 * width, 0.01, 0.55 * depth], [0.0, thickness / 2 + 0.005, -0.15 * depth]), keys))
    # lid hinged at the back edge (+z); hinge = 0 is closed, 90 deg is upright
    tilt = trimesh.transformations.rotation_matrix(hinge, [1, 0, 0])
    lid_dir = np.array([0.0, math.sin(hinge), -math.cos(hinge)])
    hinge_point = np.array([0.0, thickness, depth / 2])
    lid_center = hinge_point + lid_dir * depth / 2
    parts.append((_box([width, thickness, depth], lid_center, tilt), shell))
    inner_normal = np.array([0.0, -math.cos(hinge), -math.sin(hinge)])
    screen_center = lid_center + inner_normal * (thickness / 2 + 0.005)
    parts.append((_box([0.9 * width, 0.01, 0.85 * depth], screen_center, tilt), screen))
    return parts


def _mug(rng: np.random.Generator) -> List[Part]:
    radius = rng.uniform(0.25, 0.35)
    height = rng.uniform(0.5, 0.8)
    body, handle = _color(rng), _color(rng)
    bar = 0.06
    reach = rng.uniform(0.12, 0.2)
    grip = rng.uniform(0.45, 0.7) * height
    x_out = radius + reach
    parts = [(_cylinder(radius, height, 0.0), body)]
    parts.append((_box([bar, grip, bar], [x_out, 0.0, 0.0]), handle))
    for y in (grip / 2 - bar / 2, -grip / 2 + bar / 2):
        parts.append((_box([reach + bar, bar, bar], [radius + reach / 2, y, 0.0]), handle))
    return parts


def _bottle(rng: np.random.Generator) -> List[Part]:
    radius = rng.uniform(0.18, 0.26)
    height = rng.uniform(0.6, 0.9)
    neck_r = radius * rng.uniform(0.35, 0.5)
    neck_h = rng.uniform(0.15, 0.25)
    glass, label, cap = _color(rng), _color(rng), _color(rng)
    parts = [(_cylinder(radius, height, 0.0), glass)]
    parts.append((_cylinder(radius * 1.02, height * 0.4, -0.05 * height), label))
    parts.append((_cylinder(neck_r, neck_h, height / 2 + neck_h / 2), glass))
    parts.append((_cylinder(neck_r * 1.15, 0.05, height / 2 + neck_h + 0.025), cap))
    return parts


def _can(rng: np.random.Generator) -> List[Part]:
    radius = rng.uniform(0.2, 0.3)
    height = rng.uniform(0.5, 0.75)
    body, band, rim = _color(rng), _color(rng), _color(rng, 0.6, 0.9)
    parts = [(_cylinder(radius, height, 0.0), body)]
    parts.append((_cylinder(radius * 1.02, height * 0.3, 0.0), band))
    for y in (height / 2, -height / 2):
        parts.append((_cylinder(radius * 0.96, 0.03, y), rim))
    return parts


@dataclass(frozen=True)
class Category:
    name: str
    build: Callable[[np.random.Generator], List[Part]]
    symmetric: bool


CATEGORIES: Dict[str, Category] = {
    "laptop": Category("laptop", _laptop, symmetric=False),
    "mug": Category("mug", _mug, symmetric=False),
    "bottle": Category("bottle", _bottle, symmetric=True),
    "can": Category("can", _can, symmetric=True),
}


def get_category(name: str) -> Category:
    if name not in CATEGORIES:
        raise ConfigurationError(f"Unknown category '{name}' (known: {', '.join(sorted(CATEGORIES))})")
    return CATEGORIES[name]


@dataclass
class ToyMesh:
    """Triangle soup with per-face base colors, centered and scaled to OBJECT_RADIUS."""
    vertices: np.ndarray
    faces: np.ndarray
    face_colors: np.ndarray


def build_instance(category: str, rng: np.random.Generator) -> ToyMesh:
    parts = get_category(category).build(rng)
    mesh = trimesh.util.concatenate([m for m, _ in parts])
    colors = np.concatenate([np.tile(c, (len(m.faces), 1)) for m, c in parts])
    vertices = np.asarray(mesh.vertices, dtype=np.float64)
    vertices = vertices - (vertices.max(axis=0) + vertices.min(axis=0)) / 2
    vertices *= OBJECT_RADIUS / np.linalg.norm(vertices, axis=1).max()
    return ToyMesh(vertices, np.asarray(mesh.faces, dtype=np.int64), colors)


# --- Rasterizer ---

def rasterize(mesh: ToyMesh, pose: Pose, size: int, supersample: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """
    Render a mesh with a pinhole camera (y up, looking along +z) and Lambert shading.

    Args:
        mesh: Object-space mesh
        pose: Object pose; the image plane spans [-1, 1] in normalized coordinates
        size: Output resolution (square)
        supersample: Per-axis supersampling factor used for anti-aliasing

    Returns:
        (rgb H x W x 3 in [0, 1], depth H x W with 0 on the background)
    """
    res = size * supersample
    rotation = euler_to_rotation(pose.rx, pose.ry, pose.rz).numpy()
    cam = mesh.vertices @ rotation.T + pose.translation
    if (cam[:, 2] <= 1e-6).any():
        raise ConfigurationError("object intersects the camera plane; increase tz")

    px = (pose.focal * cam[:, 0] / cam[:, 2] + 1.0) * res / 2 - 0.5
    py = (1.0 - pose.focal * cam[:, 1] / cam[:, 2]) * res / 2 - 0.5
    inv_z = 1.0 / cam[:, 2]

    tri = cam[mesh.faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True) + 1e-12
    shade = AMBIENT + (1.0 - AMBIENT) * np.abs(normals @ LIGHT_DIR)
    face_rgb = np.clip(mesh.face_colors * shade[:, None], 0.0, 1.0)

    zbuf = np.full((res, res), np.inf)
    color = np.zeros((res, res, 3))
    for k, (a, b, c) in enumerate(mesh.faces):
        xs, ys = px[[a, b, c]], py[[a, b, c]]
        area = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (ys[1] - ys[0])
        if abs(area) < 1e-12:
            continue
        x0, x1 = max(int(np.floor(xs.min())), 0), min(int(np.ceil(xs.max())), res - 1)
        y0, y1 = max(int(np.floor(ys.min())), 0), min(int(np.ceil(ys.max())), res - 1)
        if x0 > x1 or y0 > y1:
            continue
        gx, gy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        w0 = ((xs[1] - gx) * (ys[2] - gy) - (xs[2] - gx) * (ys[1] - gy)) / area
        w1 = ((xs[2] - gx) * (ys[0] - gy) - (xs[0] - gx) * (ys[2] - gy)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        # perspective-correct depth
        z = 1.0 / (w0 * inv_z[a] + w1 * inv_z[b] + w2 * inv_z[c])
        region = zbuf[y0:y1 + 1, x0:x1 + 1]
        closer = inside & (z < region)
        region[closer] = z[closer]
        color[y0:y1 + 1, x0:x1 + 1][closer] = face_rgb[k]

    covered = np.isfinite(zbuf)
    depth = np.where(covered, zbuf, 0.0)
    if supersample > 1:
        blocks = (size, supersample, size, supersample)
        count = covered.reshape(blocks).sum(axis=(1, 3))
        color = color.reshape(size, supersample, size, supersample, 3).mean(axis=(1, 3))
        depth = np.where(count > 0, depth.reshape(blocks).sum(axis=(1, 3)) / np.maximum(count, 1), 0.0)
    return color, depth


# --- Dataset rendering ---

def _write_png(path: str, array: np.ndarray):
    Image.fromarray(array).save(path, format="PNG")


def render_toy_dataset(config: RenderConfig) -> List[ManifestRecord]:
    """
    Render `instances` training instances (+ `test_instances` unseen ones) at `views`
    out-of-plane poses each and write images, depth maps and the manifest.

    Training poses carry rz = 0 and T = (0, 0, ref_depth). Output is byte-identical
    for identical configs.
    """
    category = get_category(config.category)
    rng = np.random.default_rng(config.seed)
    try:
        os.makedirs(os.path.join(config.out, "images"), exist_ok=True)
        os.makedirs(os.path.join(config.out, "depth"), exist_ok=True)
    except OSError as err:
        raise DatasetError(f"cannot create dataset directory: {err}", config.out) from err

    elev_lo, elev_hi = (math.radians(v) for v in config.elevation_range_deg)
    n_val = int(round(config.val_fraction * config.views))
    total = config.instances + config.test_instances
    records: List[ManifestRecord] = []
    index = 0
    for instance in tqdm(range(total), desc=f"render {category.name}", unit="instance"):
        mesh = build_instance(category.name, rng)
        instance_id = f"{category.name}_{instance:03d}"
        order = rng.permutation(config.views)
        for view in range(config.views):
            rx = float(rng.uniform(elev_lo, elev_hi))
            ry = float(rng.uniform(0.0, 2 * math.pi))
            pose = Pose(rx=rx, ry=ry, tz=config.ref_depth, focal=config.focal)
            if instance >= config.instances:
                split = "test"
            else:
                split = "val" if order[view] < n_val else "train"
            rgb, depth = rasterize(mesh, pose, config.image_size, config.supersample)
            name = f"{index:06d}.png"
            try:
                _write_png(os.path.join(config.out, "images", name), np.round(rgb * 255).astype(np.uint8))
                depth_units = np.clip(np.round(depth / DEPTH_UNIT), 0, 65535).astype(np.uint16)
                _write_png(os.path.join(config.out, "depth", name), depth_units)
            except OSError as err:
                raise DatasetError(f"cannot write sample: {err}", config.out) from err
            records.append(ManifestRecord(
                path=f"images/{name}", depth_path=f"depth/{name}", instance_id=instance_id,
                rx=rx, ry=ry, tz=config.ref_depth, f=config.focal, split=split, category=category.name,
            ))
            index += 1

    write_manifest(os.path.join(config.out, MANIFEST_NAME), records)
    metadata = {
        "category": category.name,
        "symmetric": category.symmetric,
        "image_size": config.image_size,
        "depth_unit": DEPTH_UNIT,
        "render": config.model_dump(mode="json"),
    }
    with open(os.path.join(config.out, METADATA_NAME), "w", encoding="utf-8") as f:
        json.dump(metadata, f, indent=2, sort_keys=True)
    logger.info("Rendered %d samples (%d instances) to %s", len(records), total, config.out)
    return records


# --- Reading samples ---

class ToyDataset:
    """Random access to a rendered dataset directory."""

    def __init__(self, root: str):
        root = resolve_data_path(root)
        if not os.path.isdir(root):
            raise ConfigurationError(f"Dataset directory not found: {root}")
        self.root = root
        self.records = read_manifest(os.path.join(root, MANIFEST_NAME))
        self.metadata: Dict = {}
        meta_path = os.path.join(root, METADATA_NAME)
        if os.path.exists(meta_path):
            with open(meta_path, "r", encoding="utf-8") as f:
                self.metadata = json.load(f)

    @property
    def category(self) -> Optional[str]:
        return self.metadata.get("category") or self.records[0].category

    @property
    def symmetric(self) -> bool:
        if "symmetric" in self.metadata:
            return bool(self.metadata["symmetric"])
        return self.category in CATEGORIES and CATEGORIES[self.category].symmetric

    @property
    def image_size(self) -> int:
        return self.load_rgb(self.records[0]).shape[-1]

    def split(self, name: str) -> List[int]:
        return [i for i, r in enumerate(self.records) if r.split == name]

    def instances(self, split: Optional[str] = None) -> Dict[str, List[int]]:
        groups: Dict[str, List[int]] = {}
        for i, record in enumerate(self.records):
            if split is None or record.split == split:
                groups.setdefault(record.instance_id, []).append(i)
        return groups

    def _file(self, relative: str) -> str:
        path = os.path.join(self.root, relative)
        if not os.path.exists(path):
            raise DatasetError(f"missing sample file {relative}", self.root)
        return path

    def load_rgb(self, record: ManifestRecord) -> torch.Tensor:
        with Image.open(self._file(record.path)) as img:
            array = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        return to_chw(array)

    def load_depth(self, record: ManifestRecord) -> torch.Tensor:
        """Absolute depth in scene units, 1 x H x W, 0 on the background."""
        if not record.depth_path:
            raise DatasetError(f"record {record.path} has no depth map", self.root)
        with Image.open(self._file(record.depth_path)) as img:
            array = np.asarray(img).astype(np.float32) * DEPTH_UNIT
        return torch.from_numpy(array).unsqueeze(0)

    def load_image(self, record: ManifestRecord, modality: str = "rgb", depth: str = "relative",
                   depth_range: float = 1.0) -> torch.Tensor:
        """
        C x H x W image. For rgbd the fourth channel is either the generator's relative
        depth encoding (training) or the absolute target encoding (fitting).
        """
        rgb = self.load_rgb(record)
        if modality == "rgb":
            return rgb
        d = self.load_depth(record)
        if depth == "relative":
            channel = encode_relative_depth(d, record.tz, depth_range)
        else:
            channel = encode_target_depth(d)
        return torch.cat([rgb, channel.to(rgb.dtype)], dim=0)


class PairDataset(Dataset):
    """
    Training pairs for the conditional VAE: (encoder view, target view, target pose).

    The encoder view is another random view of the same instance (cross-view), or the
    target itself when `same_view` is set. Source selection depends only on
    (seed, epoch, index), so batches are identical across workers and reruns.
    """

    def __init__(self, data: ToyDataset, split: str, modality: str = "rgb", depth_range: float = 1.0,
                 same_view: bool = False, seed: int = 0, max_samples: Optional[int] = None):
        self.data = data
        self.modality = modality
        self.depth_range = depth_range
        self.same_view = same_view
        self.seed = seed
        self.epoch = 0
        self.indices = data.split(split)
        if max_samples is not None:
            self.indices = self.indices[:max_samples]
        if not self.indices:
            raise DatasetError(f"split '{split}' is empty", data.root)
        self._by_instance = data.instances(split)

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.indices)

    def _source(self, position: int, index: int) -> int:
        if self.same_view:
            return index
        candidates = self._by_instance[self.data.records[index].instance_id]
        others = [i for i in candidates if i != index] or candidates
        rng = np.random.default_rng((self.seed, self.epoch, position))
        return others[int(rng.integers(len(others)))]

    def __getitem__(self, position: int):
        index = self.indices[position]
        target = self.data.records[index]
        source = self.data.records[self._source(position, index)]
        load = lambda r: self.data.load_image(r, self.modality, "relative", self.depth_range)
        pose = torch.tensor([target.rx, target.ry, target.rz, target.tx, target.ty, target.tz], dtype=torch.float32)
        return load(source), load(target), pose
