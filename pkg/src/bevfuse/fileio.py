"""Bit-exact on-disk formats.

Manifests are UTF-8 YAML trees written with sorted keys, so identical data
always serializes to identical bytes. Bulk numeric payloads live in sibling
little-endian float32 blobs whose byte lengths are declared in the manifest
and verified on load.

Detection files are line oriented: one record per line,
``scene_id class_id x y z l w h yaw vx vy score``, space separated, each
float printed with 9 significant digits (lossless for float32 values).
"""

import os
from dataclasses import dataclass

import numpy as np
import yaml

from .cameras import CameraIntrinsics, CameraPose, CameraRig, CameraView
from .errors import ConfigError, ParseError
from .geometry import Box3D

FORMAT_VERSION = 1
_FLOAT_FMT = "%.9g"


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def _plain(value):
    """Recursively convert numpy scalars/arrays so YAML stays portable."""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    return value


def save_manifest(path, tree):
    text = yaml.safe_dump(_plain(tree), sort_keys=True, default_flow_style=False)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def load_manifest(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            tree = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ParseError(f"{path}: {e}") from None
    if not isinstance(tree, dict):
        raise ParseError(f"{path}: manifest root must be a mapping")
    return tree


def _write_blob(path, array):
    data = np.ascontiguousarray(array, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def _read_blob(path, byte_length, shape):
    size = os.path.getsize(path)
    if size != byte_length:
        raise ParseError(f"{path}: blob is {size} bytes, manifest declares {byte_length}")
    arr = np.fromfile(path, dtype="<f4")
    if arr.size * 4 != byte_length:
        raise ParseError(f"{path}: blob length is not a whole number of float32 records")
    try:
        return arr.reshape(shape).astype(np.float32)
    except ValueError:
        raise ParseError(f"{path}: blob does not hold {shape} floats") from None


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

@dataclass
class SceneRecord:
    """One frame: images, point cloud, calibration, and ground truth."""

    scene_id: str
    rig: CameraRig
    images: list          # per camera, float32 3 x H x W
    points: np.ndarray    # N x 4 float32 (x, y, z, intensity)
    boxes: list           # ground-truth Box3D


def _box_to_tree(box):
    return {
        "class_id": int(box.class_id),
        "center": [float(box.x), float(box.y), float(box.z)],
        "size": [float(box.l), float(box.w), float(box.h)],
        "yaw": float(box.yaw),
        "velocity": [float(box.vx), float(box.vy)],
    }


def _box_from_tree(tree):
    return Box3D(
        x=tree["center"][0], y=tree["center"][1], z=tree["center"][2],
        l=tree["size"][0], w=tree["size"][1], h=tree["size"][2],
        yaw=tree["yaw"], vx=tree["velocity"][0], vy=tree["velocity"][1],
        class_id=tree["class_id"],
    )


def save_scene(directory, scene):
    """Write ``<scene_id>.yaml`` plus sibling point/image blobs; returns the
    manifest path."""
    os.makedirs(directory, exist_ok=True)
    base = scene.scene_id
    points_blob = f"{base}_points.bin"
    points_length = _write_blob(os.path.join(directory, points_blob), scene.points)
    cameras = []
    for i, (view, image) in enumerate(zip(scene.rig, scene.images)):
        blob = f"{base}_cam{i}.bin"
        length = _write_blob(os.path.join(directory, blob), image)
        cameras.append({
            "image_blob": blob,
            "byte_length": length,
            "width": view.width,
            "height": view.height,
            "fx": view.intrinsics.fx, "fy": view.intrinsics.fy,
            "cx": view.intrinsics.cx, "cy": view.intrinsics.cy,
            "rotation": view.pose.rotation.tolist(),
            "translation": view.pose.translation.tolist(),
        })
    tree = {
        "format_version": FORMAT_VERSION,
        "scene_id": base,
        "points_blob": points_blob,
        "points_count": int(scene.points.shape[0]),
        "points_byte_length": points_length,
        "cameras": cameras,
        "boxes": [_box_to_tree(b) for b in scene.boxes],
    }
    path = os.path.join(directory, f"{base}.yaml")
    save_manifest(path, tree)
    return path


def load_scene(manifest_path):
    tree = load_manifest(manifest_path)
    directory = os.path.dirname(manifest_path)
    try:
        points = _read_blob(
            os.path.join(directory, tree["points_blob"]),
            tree["points_byte_length"],
            (tree["points_count"], 4),
        )
        views = []
        images = []
        for cam in tree["cameras"]:
            intr = CameraIntrinsics(fx=cam["fx"], fy=cam["fy"], cx=cam["cx"], cy=cam["cy"])
            pose = CameraPose(cam["rotation"], cam["translation"])
            views.append(CameraView(intrinsics=intr, pose=pose,
                                    width=cam["width"], height=cam["height"]))
            images.append(_read_blob(
                os.path.join(directory, cam["image_blob"]),
                cam["byte_length"],
                (3, cam["height"], cam["width"]),
            ))
        boxes = [_box_from_tree(b) for b in tree.get("boxes", [])]
        scene_id = tree["scene_id"]
    except (KeyError, TypeError, IndexError) as e:
        raise ParseError(f"{manifest_path}: missing or malformed field ({e})") from None
    return SceneRecord(scene_id=scene_id, rig=CameraRig(views),
                       images=images, points=points, boxes=boxes)


def list_scenes(directory):
    names = sorted(
        n for n in os.listdir(directory)
        if n.startswith("scene_") and n.endswith(".yaml")
    )
    if not names:
        raise ConfigError(f"{directory}: no scene manifests found")
    return [os.path.join(directory, n) for n in names]


# ---------------------------------------------------------------------------
# detections
# ---------------------------------------------------------------------------

def _fmt(v):
    return _FLOAT_FMT % float(np.float32(v))


def write_detections(path, records):
    """Write (scene_id, Box3D) records, one per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for scene_id, b in records:
            fields = [str(scene_id), str(int(b.class_id))] + [
                _fmt(v) for v in (b.x, b.y, b.z, b.l, b.w, b.h, b.yaw, b.vx, b.vy, b.score)
            ]
            f.write(" ".join(fields) + "\n")


def read_detections(path):
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 12:
                raise ParseError(f"{path}:{lineno}: expected 12 fields, got {len(parts)}")
            try:
                scene_id = parts[0]
                class_id = int(parts[1])
                vals = [float(p) for p in parts[2:]]
            except ValueError as e:
                raise ParseError(f"{path}:{lineno}: {e}") from None
            try:
                box = Box3D(
                    x=vals[0], y=vals[1], z=vals[2], l=vals[3], w=vals[4], h=vals[5],
                    yaw=vals[6], vx=vals[7], vy=vals[8],
                    class_id=class_id, score=vals[9],
                )
            except Exception as e:
                raise ParseError(f"{path}:{lineno}: {e}") from None
            records.append((scene_id, box))
    return records


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(directory, config, params, optimizer_state=None):
    """Write ``manifest.yaml`` plus one float32 blob per parameter tensor."""
    os.makedirs(directory, exist_ok=True)
    entries = {}
    for name, p in params.items():
        blob = f"{name}.bin"
        length = _write_blob(os.path.join(directory, blob), p.data)
        entries[name] = {"blob": blob, "byte_length": length,
                         "shape": [int(s) for s in p.shape]}
    tree = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "parameters": entries,
    }
    if optimizer_state is not None:
        opt_entries = {"step": int(optimizer_state["step"]), "moments": {}}
        for kind in ("m", "v"):
            for name, arr in optimizer_state[kind].items():
                blob = f"opt_{kind}.{name}.bin"
                length = _write_blob(os.path.join(directory, blob), arr)
                opt_entries["moments"][f"{kind}.{name}"] = {
                    "blob": blob, "byte_length": length,
                    "shape": [int(s) for s in arr.shape],
                }
        tree["optimizer"] = opt_entries
    path = os.path.join(directory, "manifest.yaml")
    save_manifest(path, tree)
    return path


def load_checkpoint(path):
    """Load a checkpoint manifest (or its directory).

    Returns (config tree, {name: float32 array}, optimizer state or None).
    """
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.yaml")
    tree = load_manifest(path)
    directory = os.path.dirname(path)
    try:
        params = {
            name: _read_blob(os.path.join(directory, e["blob"]),
                             e["byte_length"], tuple(e["shape"]))
            for name, e in tree["parameters"].items()
        }
        config_tree = tree["config"]
    except (KeyError, TypeError) as e:
        raise ParseError(f"{path}: missing or malformed field ({e})") from None
    opt_state = None
    if "optimizer" in tree:
        opt = tree["optimizer"]
        opt_state = {"step": int(opt["step"]), "m": {}, "v": {}}
        for key, e in opt["moments"].items():
            kind, name = key.split(".", 1)
            opt_state[kind][name] = _read_blob(
                os.path.join(directory, e["blob"]), e["byte_length"], tuple(e["shape"])
            )
    return config_tree, params, opt_state
