"""Persistence and dataset ingestion.

Covers NeRF-synthetic style ``transforms_*.json`` datasets, Gaussian and point
cloud PLY files, checkpoint archives, 8-bit images and key=value config files.
"""
from __future__ import annotations

import dataclasses
import io as _io
import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ._validation import ValidationError
from .encoding import HashGrid
from .geometry import Camera, GaussianCloud, scene_aabb, sh_coeff_count
from .mlp import ModulationVariant, TinyMLP

CHECKPOINT_VERSION = 1
DEFAULT_BACKGROUND = (1.0, 1.0, 1.0)
# converts an OpenGL-style camera (y up, looking down -z) to x right, y down, z forward
_GL_TO_CV = np.diag([1.0, -1.0, -1.0, 1.0])


class DatasetError(ValidationError):
    """Malformed dataset file; the message names the file and the field."""


class PlyError(ValidationError):
    pass


class CheckpointError(ValidationError):
    pass


# ---------------------------------------------------------------- images


def read_image(path, background=DEFAULT_BACKGROUND) -> np.ndarray:
    """Read an 8-bit PNG or binary PPM as float64 (H, W, 3) in [0, 1].

    Alpha is composited over ``background``.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "PPM"):
                raise ValidationError(f"{path}: unsupported image format {im.format}")
            if im.mode in ("I", "I;16", "I;16B", "F"):
                raise ValidationError(f"{path}: only 8-bit images are supported (mode {im.mode})")
            has_alpha = im.mode in ("RGBA", "LA", "PA") or (im.mode == "P" and "transparency" in im.info)
            arr = np.asarray(im.convert("RGBA" if has_alpha else "RGB"), dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise
    except ValidationError:
        raise
    except OSError as exc:
        raise ValidationError(f"{path}: cannot decode image ({exc})") from exc
    if arr.shape[2] == 4:
        alpha = arr[..., 3:]
        arr = arr[..., :3] * alpha + np.asarray(background, dtype=np.float64) * (1.0 - alpha)
    return arr


def to_uint8(img) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, img) -> None:
    """Write (H, W, 3) values in [0, 1] as 8-bit PNG or PPM, chosen by suffix."""
    path = Path(path)
    fmt = {".png": "PNG", ".ppm": "PPM"}.get(path.suffix.lower())
    if fmt is None:
        raise ValidationError(f"{path}: unsupported image format (use .png or .ppm)")
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"write_image expects (H, W, 3), got {arr.shape}")
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    Image.fromarray(arr, "RGB").save(path, format=fmt)


# ---------------------------------------------------------------- datasets


@dataclass
class Frame:
    camera: Camera
    split: str = "train"
    image_path: Path | None = None
    image: np.ndarray | None = None


@dataclass
class DatasetManifest:
    """Cameras with their images, grouped by split.

    Images are decoded lazily and cached. ``points`` is an optional
    ``(positions, colors)`` pair used to initialize Gaussians.
    """

    frames: list = field(default_factory=list)
    background: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_BACKGROUND))
    aabb: np.ndarray | None = None
    points: tuple | None = None
    root: Path | None = None

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        self._cache: dict[str, list] = {}

    def split_frames(self, split: str) -> list:
        return [f for f in self.frames if f.split == split]

    def cameras(self, split: str = "train") -> list:
        return [f.camera for f in self.split_frames(split)]

    def images(self, split: str = "train") -> list:
        if split not in self._cache:
            out = []
            for f in self.split_frames(split):
                img = f.image
                if img is None:
                    if f.image_path is None:
                        raise DatasetError(f"frame in split {split!r} has neither image nor file_path")
                    img = read_image(f.image_path, self.background)
                cam = f.camera
                if img.shape[:2] != (cam.height, cam.width):
                    where = f.image_path or f"split {split!r}"
                    raise DatasetError(
                        f"{where}: image is {img.shape[1]}x{img.shape[0]} but the camera expects "
                        f"{cam.width}x{cam.height}"
                    )
                out.append(img)
            self._cache[split] = out
        return self._cache[split]

    @property
    def splits(self) -> list:
        return sorted({f.split for f in self.frames})


def _field(d, key, path, kind=None):
    if not isinstance(d, dict) or key not in d:
        raise DatasetError(f"{path}: missing field {key!r}")
    value = d[key]
    if kind is not None and not isinstance(value, kind):
        raise DatasetError(f"{path}: field {key!r} has the wrong type ({type(value).__name__})")
    return value


def camera_from_transform(matrix, width, height, fx, fy=None, cx=None, cy=None, near=0.01, far=100.0,
                          where="transform_matrix") -> Camera:
    """Renderer camera from an OpenGL-convention camera-to-world matrix."""
    c2w = np.asarray(matrix, dtype=np.float64)
    if c2w.shape == (3, 4):
        c2w = np.vstack([c2w, [0, 0, 0, 1]])
    if c2w.shape != (4, 4) or not np.all(np.isfinite(c2w)):
        raise DatasetError(f"{where}: expected a finite 4x4 matrix, got shape {c2w.shape}")
    c2w_cv = c2w @ _GL_TO_CV
    if abs(np.linalg.det(c2w_cv[:3, :3])) < 1e-8:
        raise DatasetError(f"{where}: matrix is not invertible")
    w2c = np.linalg.inv(c2w_cv)
    # re-orthonormalize the rotation block: JSON round trips lose a few ulps
    u, _, vt = np.linalg.svd(w2c[:3, :3])
    rot = u @ vt
    if np.linalg.norm(rot - w2c[:3, :3]) > 1e-4:
        raise DatasetError(f"{where}: rotation block is not orthonormal")
    w2c[:3, :3] = rot
    w2c[3] = (0, 0, 0, 1)
    fy = fx if fy is None else fy
    cx = width / 2.0 if cx is None else cx
    cy = height / 2.0 if cy is None else cy
    try:
        return Camera(int(width), int(height), float(fx), float(fy), float(cx), float(cy), w2c, near, far)
    except ValidationError as exc:
        raise DatasetError(f"{where}: {exc}") from exc


def camera_to_transform(cam: Camera) -> np.ndarray:
    """Inverse of :func:`camera_from_transform`: OpenGL camera-to-world matrix."""
    return np.linalg.inv(cam.world_to_camera) @ _GL_TO_CV


def _image_size(path: Path):
    try:
        with Image.open(path) as im:
            return im.size
    except FileNotFoundError as exc:
        raise DatasetError(f"{path}: referenced image does not exist") from exc
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read image header ({exc})") from exc


def _resolve_image(base: Path, file_path: str) -> Path:
    p = base / file_path
    if p.suffix == "" and not p.exists():
        p = p.with_suffix(".png")
    return p


def _parse_frames(doc, path: Path, split: str, allow_empty: bool, need_images: bool):
    angle = doc.get("camera_angle_x") if isinstance(doc, dict) else None
    frames = _field(doc, "frames", path, list)
    if not frames and not allow_empty:
        raise DatasetError(f"{path}: field 'frames' is empty")
    near = float(doc.get("near", 0.01))
    far = float(doc.get("far", 100.0))
    out = []
    for i, fr in enumerate(frames):
        where = f"{path}: frames[{i}]"
        if not isinstance(fr, dict):
            raise DatasetError(f"{where}: expected an object")
        matrix = _field(fr, "transform_matrix", where, list)
        img_path = None
        if need_images or "file_path" in fr:
            img_path = _resolve_image(path.parent, str(_field(fr, "file_path", where)))
        w = fr.get("w", doc.get("w"))
        h = fr.get("h", doc.get("h"))
        if w is None or h is None:
            if img_path is None:
                raise DatasetError(f"{where}: missing field 'w'/'h' and no image to read the size from")
            w, h = _image_size(img_path)
        fx = fr.get("fl_x", doc.get("fl_x"))
        if fx is None:
            a = fr.get("camera_angle_x", angle)
            if a is None:
                raise DatasetError(f"{path}: missing field 'camera_angle_x'")
            try:
                a = float(a)
            except (TypeError, ValueError) as exc:
                raise DatasetError(f"{path}: field 'camera_angle_x' is not a number") from exc
            if not 0 < a < math.pi:
                raise DatasetError(f"{path}: field 'camera_angle_x' must be in (0, pi), got {a}")
            fx = 0.5 * float(w) / math.tan(0.5 * a)
        fy = fr.get("fl_y", doc.get("fl_y"))
        cx = fr.get("cx", doc.get("cx"))
        cy = fr.get("cy", doc.get("cy"))
        try:
            cam = camera_from_transform(matrix, w, h, fx, fy, cx, cy, near, far, where=f"{where}.transform_matrix")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, DatasetError):
                raise
            raise DatasetError(f"{where}: field 'transform_matrix' is malformed ({exc})") from exc
        out.append(Frame(cam, fr.get("split", split), img_path))
    return out


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"{path}: file not found") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DatasetError(f"{path}: not valid JSON ({exc})") from exc


def load_transforms(path, background=None) -> DatasetManifest:
    """Load a dataset from a transforms file or a directory of them.

    A directory is scanned for ``transforms_{train,val,test}.json`` (or a
    single ``transforms.json``); the split comes from the file name unless a
    frame carries its own ``split`` field. Optional top-level fields
    ``background``, ``aabb`` and ``ply_file_path`` extend the format; a
    ``points3d.ply`` next to the transforms is picked up automatically.
    """
    path = Path(path)
    if path.is_dir():
        files = [(path / f"transforms_{s}.json", s) for s in ("train", "val", "test")]
        files = [(p, s) for p, s in files if p.exists()]
        if not files and (path / "transforms.json").exists():
            files = [(path / "transforms.json", "train")]
        if not files:
            raise DatasetError(f"{path}: no transforms_*.json files found")
        root = path
    elif path.exists():
        stem = path.stem
        split = stem.split("_", 1)[1] if stem.startswith("transforms_") else "train"
        files = [(path, split)]
        root = path.parent
    else:
        raise DatasetError(f"{path}: file not found")
    frames, docs = [], []
    for p, split in files:
        doc = _read_json(p)
        if not isinstance(doc, dict):
            raise DatasetError(f"{p}: expected a JSON object at the top level")
        docs.append(doc)
        frames.extend(_parse_frames(doc, p, split, allow_empty=False, need_images=True))
    first = docs[0]
    if background is None:
        background = first.get("background", DEFAULT_BACKGROUND)
    try:
        background = np.asarray(background, dtype=np.float64).reshape(3)
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"{files[0][0]}: field 'background' must be 3 numbers") from exc
    points = None
    ply = first.get("ply_file_path")
    ply_path = root / ply if ply else root / "points3d.ply"
    if ply or ply_path.exists():
        points = load_points_ply(ply_path)
    aabb = first.get("aabb")
    if aabb is not None:
        aabb = np.asarray(aabb, dtype=np.float64)
        if aabb.shape != (2, 3) or np.any(aabb[1] <= aabb[0]):
            raise DatasetError(f"{files[0][0]}: field 'aabb' must be [[lo x3], [hi x3]] with hi > lo")
    elif points is not None:
        aabb = scene_aabb(points[0], 0.1)
    else:
        # without geometry, the region enclosed by the cameras is the best guess
        centers = np.stack([f.camera.center for f in frames])
        aabb = scene_aabb(centers, 0.0) if len(frames) > 1 else None
        if aabb is not None and np.any(aabb[1] <= aabb[0]):
            aabb = None
    return DatasetManifest(frames, background, aabb, points, root)


def load_poses(path) -> list:
    """Cameras from a transforms-style poses file; the frame list may be empty.

    Image size comes from top-level or per-frame ``w``/``h`` fields.
    """
    path = Path(path)
    doc = _read_json(path)
    if isinstance(doc, dict):
        return [f.camera for f in _parse_frames(doc, path, "poses", allow_empty=True, need_images=False)]
    raise DatasetError(f"{path}: expected a JSON object with 'frames'")


def save_transforms(path, frames, camera_angle_x=None, extra=None) -> None:
    """Write ``[(camera, file_path), ...]`` as a transforms file (inverse of the loader)."""
    path = Path(path)
    doc = dict(extra or {})
    out = []
    for cam, file_path in frames:
        fr = {"transform_matrix": camera_to_transform(cam).tolist(), "w": cam.width, "h": cam.height,
              "fl_x": cam.fx, "fl_y": cam.fy, "cx": cam.cx, "cy": cam.cy}
        if file_path is not None:
            fr["file_path"] = str(file_path)
        out.append(fr)
    if camera_angle_x is not None:
        doc["camera_angle_x"] = camera_angle_x
    doc["frames"] = out
    if frames:
        doc.setdefault("near", frames[0][0].near)
        doc.setdefault("far", frames[0][0].far)
    path.write_text(json.dumps(doc, indent=1))


# ---------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_PLY_NAMES = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort", "i4": "int", "u4": "uint",
              "f4": "float", "f8": "double"}


def gaussian_ply_properties(sh_degree: int) -> list:
    n_rest = 3 * (sh_coeff_count(sh_degree) - 1)
    return (
        ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        + [f"f_rest_{i}" for i in range(n_rest)]
        + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    )


def _read_ply(data: bytes, where):
    """Parse a PLY into (vertex structured array, property names)."""
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise PlyError(f"{where}: not a PLY file")
    nl = data.find(b"\n", end)
    if nl < 0:
        raise PlyError(f"{where}: truncated header")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[nl + 1:]
    fmt = None
    elements = []  # (name, count, [(prop, dtype)])
    for line in header[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise PlyError(f"{where}: property before any element")
            if tok[1] == "list":
                raise PlyError(f"{where}: list properties are not supported ({line.strip()})")
            if tok[1] not in _PLY_TYPES:
                raise PlyError(f"{where}: unknown property type {tok[1]!r}")
            elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("binary_little_endian", "binary_big_endian", "ascii"):
        raise PlyError(f"{where}: unsupported PLY format {fmt!r}")
    if not elements or elements[0][0] != "vertex":
        raise PlyError(f"{where}: first element must be 'vertex'")
    _, count, props = elements[0]
    names = [p for p, _ in props]
    if fmt == "ascii":
        rows = body.decode("ascii").split("\n")[:count]
        if len(rows) < count:
            raise PlyError(f"{where}: truncated vertex data")
        vals = np.array([r.split()[: len(props)] for r in rows], dtype=np.float64).reshape(count, len(props))
        arr = np.empty(count, dtype=[(p, t) for p, t in props])
        for j, p in enumerate(names):
            arr[p] = vals[:, j]
        return arr, names
    order = "<" if fmt == "binary_little_endian" else ">"
    dtype = np.dtype([(p, order + t) for p, t in props])
    if len(body) < dtype.itemsize * count:
        raise PlyError(f"{where}: truncated vertex data ({len(body)} bytes, need {dtype.itemsize * count})")
    return np.frombuffer(body, dtype=dtype, count=count), names


def _write_ply(arr) -> bytes:
    """Binary little-endian PLY with one ``vertex`` element holding ``arr``'s fields."""
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(arr)}"]
    header += [f"property {_PLY_NAMES[arr.dtype[p].str[1:]]} {p}" for p in arr.dtype.names]
    header.append("end_header")
    return ("\n".join(header) + "\n").encode("ascii") + arr.tobytes()


def ply_bytes(cloud: GaussianCloud) -> bytes:
    """Binary little-endian PLY of a Gaussian cloud (float32 properties)."""
    n = len(cloud)
    names = gaussian_ply_properties(cloud.sh_degree)
    cols = np.zeros((n, len(names)), dtype="<f4")
    cols[:, 0:3] = cloud.means
    cols[:, 6:9] = cloud.sh[:, :, 0]
    k = sh_coeff_count(cloud.sh_degree)
    r = 3 * (k - 1)
    cols[:, 9:9 + r] = cloud.sh[:, :, 1:].reshape(n, r)  # channel-major
    cols[:, 9 + r] = cloud.opacity_logits
    cols[:, 10 + r:13 + r] = cloud.log_scales
    cols[:, 13 + r:17 + r] = cloud.rotations
    # reinterpret the row-major float block as one record per vertex
    return _write_ply(cols.view(np.dtype([(p, "<f4") for p in names])).reshape(n))


def save_ply(cloud: GaussianCloud, path) -> None:
    Path(path).write_bytes(ply_bytes(cloud))


def cloud_from_ply_bytes(data: bytes, where="<bytes>", dtype=np.float32) -> GaussianCloud:
    arr, names = _read_ply(data, where)
    n_rest = sum(1 for p in names if p.startswith("f_rest_"))
    degree = {0: 0, 9: 1, 24: 2, 45: 3}.get(n_rest)
    expected = gaussian_ply_properties(degree if degree is not None else 0)
    if degree is None or names != expected:
        # normals are optional on load
        no_normals = [p for p in expected if p not in ("nx", "ny", "nz")]
        if degree is None or names != no_normals:
            raise PlyError(
                f"{where}: unexpected Gaussian property layout\n  found:    {' '.join(names)}\n"
                f"  expected: {' '.join(gaussian_ply_properties(degree if degree is not None else 3))}"
            )
    n = len(arr)
    k = sh_coeff_count(degree)

    def col(*ps):
        return np.stack([arr[p] for p in ps], axis=1).astype(dtype) if ps else np.zeros((n, 0), dtype)

    sh = np.empty((n, 3, k), dtype=dtype)
    sh[:, :, 0] = col("f_dc_0", "f_dc_1", "f_dc_2")
    sh[:, :, 1:] = col(*[f"f_rest_{i}" for i in range(3 * (k - 1))]).reshape(n, 3, k - 1)
    return GaussianCloud(
        means=col("x", "y", "z"),
        log_scales=col("scale_0", "scale_1", "scale_2"),
        rotations=col("rot_0", "rot_1", "rot_2", "rot_3"),
        opacity_logits=arr["opacity"].astype(dtype),
        sh=sh,
        sh_degree=degree,
    )


def load_ply(path, dtype=np.float32) -> GaussianCloud:
    path = Path(path)
    return cloud_from_ply_bytes(path.read_bytes(), str(path), dtype)


def load_points_ply(path):
    """(positions (N, 3) float64, colors (N, 3) in [0, 1] or None) from a point-cloud PLY."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError as exc:
        raise PlyError(f"{path}: file not found") from exc
    arr, names = _read_ply(data, str(path))
    missing = [p for p in ("x", "y", "z") if p not in names]
    if missing:
        raise PlyError(f"{path}: point cloud lacks {missing}; found {names}")
    pts = np.stack([arr[p] for p in ("x", "y", "z")], axis=1).astype(np.float64)
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack([arr[c] for c in ("red", "green", "blue")], axis=1).astype(np.float64)
        if arr.dtype["red"].kind == "u":
            colors /= float(np.iinfo(arr.dtype["red"]).max)
    return pts, colors


def save_points_ply(path, points, colors=None) -> None:
    pts = np.asarray(points, dtype="<f4")
    n = len(pts)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    arr = np.empty(n, dtype=fields)
    arr["x"], arr["y"], arr["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    if colors is not None:
        c = to_uint8(colors)
        arr["red"], arr["green"], arr["blue"] = c[:, 0], c[:, 1], c[:, 2]
    Path(path).write_bytes(_write_ply(arr))


# ---------------------------------------------------------------- config files


def _coerce(value: str, typ, key, where):
    try:
        if typ in (bool, "bool"):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ in (int, "int"):
            return int(value)
        if typ in (float, "float"):
            return float(value)
        return value.strip()
    except ValueError as exc:
        raise ValidationError(f"{where}: bad value for {key!r}: {value!r}") from exc


def parse_config_text(text: str, where="<config>") -> dict:
    """Parse ``key = value`` lines into a TrainConfig-compatible dict."""
    from .trainer import TrainConfig

    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{where}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValidationError(f"{where}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(value, types[key], key, f"{where}:{lineno}")
    return out


def load_config(path, **overrides):
    from .trainer import TrainConfig

    path = Path(path)
    d = parse_config_text(path.read_text(), str(path))
    d.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(d)


def config_text(config) -> str:
    lines = []
    for k, v in config.to_dict().items():
        lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


def save_config(config, path) -> None:
    Path(path).write_text(config_text(config))


# ---------------------------------------------------------------- checkpoints

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr) -> bytes:
    buf = _io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _camera_dict(cam: Camera, split: str) -> dict:
    return {"split": split, "width": cam.width, "height": cam.height, "fx": cam.fx, "fy": cam.fy,
            "cx": cam.cx, "cy": cam.cy, "near": cam.near, "far": cam.far,
            "world_to_camera": cam.world_to_camera.tolist()}


def _camera_from_dict(d: dict) -> Camera:
    return Camera(d["width"], d["height"], d["fx"], d["fy"], d["cx"], d["cy"],
                  np.array(d["world_to_camera"]), d["near"], d["far"])


@dataclass
class Checkpoint:
    state: object
    config: object
    cameras: list  # [(split, Camera)]
    background: np.ndarray
    variant: ModulationVariant
    version: int = CHECKPOINT_VERSION

    def split_cameras(self, split: str | None = None) -> list:
        return [c for s, c in self.cameras if split is None or s == split]


def save_checkpoint(path, state, config, dataset=None, cameras=None, background=None) -> None:
    """Single zip archive of everything needed to resume or render.

    Byte-identical for identical states: entries are written in a fixed order
    with a fixed timestamp.
    """
    if cameras is None:
        cameras = []
        if dataset is not None:
            for split in getattr(dataset, "splits", ["train", "test"]):
                cameras += [(split, c) for c in dataset.cameras(split)]
    if background is None:
        background = dataset.background if dataset is not None else np.zeros(3)
    meta = {
        "version": CHECKPOINT_VERSION,
        "iteration": int(state.iteration),
        "extent": float(state.extent),
        "variant": config.variant_enum.value,
        "config": config.to_dict(),
        "rng": state.rng.bit_generator.state,
        "rng_kind": type(state.rng.bit_generator).__name__,
        "grid": {"levels": state.grid.levels, "base_resolution": state.grid.base_resolution,
                 "max_resolution": state.grid.max_resolution, "table_size": state.grid.table_size,
                 "feature_dim": state.grid.feature_dim, "aabb": state.grid.aabb.tolist()},
        "mlp": {"output_dim": state.mlp.output_dim, "input_dim": state.mlp.input_dim,
                "hidden": state.mlp.hidden},
        "optimizer_steps": {k: int(g.step) for k, g in state.optimizer.items()},
        "cameras": [_camera_dict(c, s) for s, c in cameras],
        "background": [float(x) for x in np.asarray(background).reshape(3)],
        "events": list(state.events),
    }
    entries = [("meta.json", json.dumps(meta, sort_keys=True).encode()),
               ("cloud.ply", ply_bytes(state.cloud)),
               ("tables.npy", _npy_bytes(state.grid.tables)),
               ("grad_accum.npy", _npy_bytes(state.grad_accum)),
               ("grad_denom.npy", _npy_bytes(state.grad_denom))]
    entries += [(f"mlp/{k}.npy", _npy_bytes(v)) for k, v in state.mlp.params.items()]
    for k in sorted(state.optimizer):
        g = state.optimizer[k]
        entries += [(f"adam/{k}.m.npy", _npy_bytes(g.m)), (f"adam/{k}.v.npy", _npy_bytes(g.v))]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, data in entries:
            zf.writestr(zipfile.ZipInfo(name, date_time=_ZIP_DATE), data)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    from .trainer import AdamGroup, TrainConfig, TrainState

    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: checkpoint not found")
    try:
        with zipfile.ZipFile(path) as zf:
            data = {n: zf.read(n) for n in zf.namelist()}
    except (zipfile.BadZipFile, EOFError, OSError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint (truncated or corrupt: {exc})") from exc
    if "meta.json" not in data:
        raise CheckpointError(f"{path}: missing meta.json")
    meta = json.loads(data["meta.json"])
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {meta.get('version')} is not supported (expected {CHECKPOINT_VERSION})"
        )

    def arr(name):
        if name not in data:
            raise CheckpointError(f"{path}: missing entry {name}")
        return np.load(_io.BytesIO(data[name]), allow_pickle=False)

    config = TrainConfig.from_dict(meta["config"])
    cloud = cloud_from_ply_bytes(data["cloud.ply"], f"{path}:cloud.ply")
    tables = arr("tables.npy")
    gm = meta["grid"]
    grid = HashGrid(np.array(gm["aabb"]), gm["levels"], gm["base_resolution"], gm["max_resolution"],
                    gm["table_size"], gm["feature_dim"], tables=tables, dtype=tables.dtype)
    mm = meta["mlp"]
    params = {k: arr(f"mlp/{k}.npy") for k in TinyMLP.PARAM_NAMES}
    net = TinyMLP(mm["output_dim"], mm["input_dim"], mm["hidden"], params=params, dtype=params["w1"].dtype)
    optimizer = {}
    for k, step in meta["optimizer_steps"].items():
        optimizer[k] = AdamGroup(arr(f"adam/{k}.m.npy"), arr(f"adam/{k}.v.npy"), step)
    bitgen = getattr(np.random, meta["rng_kind"])()
    bitgen.state = meta["rng"]
    state = TrainState(cloud=cloud, grid=grid, mlp=net, optimizer=optimizer, extent=meta["extent"],
                       iteration=meta["iteration"], grad_accum=arr("grad_accum.npy"),
                       grad_denom=arr("grad_denom.npy"), rng=np.random.Generator(bitgen),
                       events=list(meta.get("events", [])), variant=ModulationVariant(meta["variant"]))
    state.check_consistent()
    cams = [(d["split"], _camera_from_dict(d)) for d in meta["cameras"]]
    return Checkpoint(state, config, cams, np.array(meta["background"]), ModulationVariant(meta["variant"]))
