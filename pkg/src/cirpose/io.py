"""File formats at the library boundary.

* COCO-style keypoint annotation JSON (read and write).
* Results JSON, one record per detection, keypoints in image pixels.
* A little-endian tensor container used for target dumps, prediction dumps
  and checkpoints.
* A flat ``key = value`` text format used for configs and eval reports.
* CSV scatter of (instance score, OKS) per kept candidate.

Every writer formats floats with six decimals and orders its output
deterministically, so identical inputs give byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
import re
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import (
    COCO_KEYPOINT_NAMES,
    FalloffConstants,
    GridGeometry,
    InstanceAnnotation,
    Pose,
    PoseError,
)

FORMAT_VERSION = 1


class IoFormatError(ValueError):
    """Base class for malformed input files."""


class ParseError(IoFormatError):
    pass


class MissingField(ParseError):
    def __init__(self, field_path: str):
        super().__init__(f"missing required field {field_path!r}")
        self.field = field_path


class InconsistentK(ParseError):
    pass


class IoError(OSError):
    pass


class ConfigError(IoFormatError):
    pass


# ---------------------------------------------------------------- annotations


@dataclass(frozen=True)
class ImageInfo:
    id: object
    width: int
    height: int

    def geometry(self, stride: int) -> GridGeometry:
        return GridGeometry(max(1, math.ceil(self.height / stride)), max(1, math.ceil(self.width / stride)), stride)


@dataclass(frozen=True, eq=False)
class Category:
    id: object
    name: str
    keypoint_names: tuple[str, ...]
    falloff: FalloffConstants

    @property
    def num_keypoints(self) -> int:
        return len(self.keypoint_names)


@dataclass(eq=False)
class Dataset:
    """Images, their annotations (grid units) and the keypoint category.

    ``skipped`` counts annotations dropped on load: crowd regions and
    instances without any labeled keypoint, neither of which can be
    supervised or evaluated here.
    """

    images: list[ImageInfo]
    annotations: dict[object, list[InstanceAnnotation]]
    category: Category
    stride: int = 4
    skipped: int = 0

    @property
    def num_keypoints(self) -> int:
        return self.category.num_keypoints

    @property
    def falloff(self) -> FalloffConstants:
        return self.category.falloff

    def image(self, image_id) -> ImageInfo:
        for info in self.images:
            if info.id == image_id:
                return info
        raise KeyError(image_id)

    def num_instances(self) -> int:
        return sum(len(v) for v in self.annotations.values())


def _get(obj, key, where):
    if not isinstance(obj, dict):
        raise ParseError(f"{where}: expected an object, got {type(obj).__name__}")
    if key not in obj:
        raise MissingField(f"{where}.{key}" if where else key)
    return obj[key]


def _number(value, where) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"{where}: expected a number, got {value!r}")
    if not math.isfinite(value):
        raise ParseError(f"{where}: non-finite number")
    return float(value)


def _image_id(value, where):
    if isinstance(value, bool) or not isinstance(value, (int, str)):
        raise ParseError(f"{where}: image id must be an integer or string, got {value!r}")
    return value


def _parse_category(doc) -> Category:
    cats = _get(doc, "categories", "")
    if not isinstance(cats, list) or not cats:
        raise ParseError("categories: expected a non-empty list")
    cat = cats[0]
    names = _get(cat, "keypoints", "categories[0]")
    if not isinstance(names, list) or not names or not all(isinstance(n, str) for n in names):
        raise ParseError("categories[0].keypoints: expected a non-empty list of names")
    for j, other in enumerate(cats[1:], start=1):
        if "keypoints" in other and len(other["keypoints"]) != len(names):
            raise InconsistentK(f"categories[{j}] declares {len(other['keypoints'])} keypoints, "
                                f"categories[0] declares {len(names)}")
    if "falloff" in cat:
        raw = cat["falloff"]
        if not isinstance(raw, list):
            raise ParseError("categories[0].falloff: expected a list")
        vals = [_number(v, f"categories[0].falloff[{i}]") for i, v in enumerate(raw)]
        if len(vals) != len(names):
            raise InconsistentK(f"categories[0].falloff has {len(vals)} entries for {len(names)} keypoints")
        try:
            falloff = FalloffConstants(vals)
        except ValueError as exc:
            raise ParseError(f"categories[0].falloff: {exc}") from None
    elif len(names) == len(COCO_KEYPOINT_NAMES):
        falloff = FalloffConstants.coco()
    else:
        raise MissingField("categories[0].falloff")
    return Category(cat.get("id", 1), str(cat.get("name", "")), tuple(names), falloff)


def parse_annotations(doc, stride: int = 4) -> Dataset:
    """Build a :class:`Dataset` from an already-decoded annotation document."""
    if not isinstance(doc, dict):
        raise ParseError("top level: expected an object")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    category = _parse_category(doc)
    k = category.num_keypoints

    raw_images = _get(doc, "images", "")
    if not isinstance(raw_images, list):
        raise ParseError("images: expected a list")
    images = []
    seen = set()
    for j, img in enumerate(raw_images):
        where = f"images[{j}]"
        iid = _image_id(_get(img, "id", where), f"{where}.id")
        if iid in seen:
            raise ParseError(f"{where}.id: duplicate image id {iid!r}")
        seen.add(iid)
        w = _number(_get(img, "width", where), f"{where}.width")
        h = _number(_get(img, "height", where), f"{where}.height")
        if w < 1 or h < 1 or w != int(w) or h != int(h):
            raise ParseError(f"{where}: width and height must be positive integers")
        images.append(ImageInfo(iid, int(w), int(h)))

    raw_anns = _get(doc, "annotations", "")
    if not isinstance(raw_anns, list):
        raise ParseError("annotations: expected a list")
    annotations: dict[object, list[InstanceAnnotation]] = {img.id: [] for img in images}
    skipped = 0
    for j, ann in enumerate(raw_anns):
        where = f"annotations[{j}]"
        iid = _image_id(_get(ann, "image_id", where), f"{where}.image_id")
        if iid not in annotations:
            raise ParseError(f"{where}.image_id: unknown image id {iid!r}")
        kps = _get(ann, "keypoints", where)
        if not isinstance(kps, list) or len(kps) % 3:
            raise ParseError(f"{where}.keypoints: expected a flat list of (x, y, v) triples")
        if len(kps) // 3 != k:
            raise InconsistentK(f"{where}.keypoints has {len(kps) // 3} keypoints, category declares {k}")
        vals = np.array([_number(v, f"{where}.keypoints[{i}]") for i, v in enumerate(kps)]).reshape(k, 3)
        vis = vals[:, 2]
        if np.any((vis != 0) & (vis != 1) & (vis != 2)):
            raise ParseError(f"{where}.keypoints: visibility flags must be 0, 1 or 2")
        if ann.get("iscrowd", 0) or not np.any(vis > 0):
            skipped += 1
            continue
        if "area" in ann:
            area = _number(ann["area"], f"{where}.area")
        elif "bbox" in ann:
            bbox = ann["bbox"]
            if not isinstance(bbox, list) or len(bbox) != 4:
                raise ParseError(f"{where}.bbox: expected [x, y, w, h]")
            area = _number(bbox[2], f"{where}.bbox[2]") * _number(bbox[3], f"{where}.bbox[3]")
        else:
            raise MissingField(f"{where}.area")
        pose = Pose(vals[:, :2] / stride, vis.astype(np.int64))
        try:
            annotations[iid].append(InstanceAnnotation.from_pose(pose, area, stride))
        except PoseError as exc:
            raise ParseError(f"{where}: {exc}") from None
    return Dataset(images, annotations, category, stride, skipped)


def load_annotations(path, stride: int = 4) -> Dataset:
    """Read a COCO-keypoint-style annotation file; coordinates become grid units."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_annotations(doc, stride)


def dataset_from_scenes(scenes, falloff: FalloffConstants, keypoint_names: Sequence[str]) -> Dataset:
    """Wrap synthetic scenes as a dataset whose image ids are 0..n-1."""
    images, anns = [], {}
    stride = scenes[0].geom.stride if scenes else 4
    for j, scene in enumerate(scenes):
        g = scene.geom
        images.append(ImageInfo(j, g.width * g.stride, g.height * g.stride))
        anns[j] = list(scene.annotations)
    category = Category(1, "person", tuple(keypoint_names), falloff)
    return Dataset(images, anns, category, stride)


def _fmt(value: float) -> str:
    s = f"{float(value):.6f}"
    return "0.000000" if s == "-0.000000" else s


def _id_json(image_id) -> str:
    return json.dumps(image_id)


def write_annotations(dataset: Dataset, path) -> None:
    """Write ``dataset`` back as annotation JSON (pixels, six decimals)."""
    cat = dataset.category
    lines = ["{", '"categories": [{"id": %s, "name": %s, "keypoints": %s, "falloff": [%s]}],' % (
        json.dumps(cat.id), json.dumps(cat.name), json.dumps(list(cat.keypoint_names)),
        ", ".join(_fmt(v) for v in cat.falloff.k))]
    imgs = ",\n".join('{"id": %s, "width": %d, "height": %d}' % (_id_json(i.id), i.width, i.height)
                      for i in dataset.images)
    lines.append('"images": [\n' + imgs + "\n],")
    recs = []
    ann_id = 1
    for info in dataset.images:
        for ann in dataset.annotations.get(info.id, []):
            kp = []
            for (x, y), v in zip(ann.pose.xy * dataset.stride, ann.pose.visibility):
                kp += [_fmt(x), _fmt(y), str(int(v))]
            recs.append('{"id": %d, "image_id": %s, "category_id": %s, "area": %s, "keypoints": [%s]}' % (
                ann_id, _id_json(info.id), json.dumps(cat.id), _fmt(ann.area), ", ".join(kp)))
            ann_id += 1
    lines.append('"annotations": [\n' + ",\n".join(recs) + "\n]")
    lines.append("}")
    _write_text(path, "\n".join(lines) + "\n")


def _write_text(path, text: str):
    try:
        Path(path).write_text(text, encoding="utf-8", newline="\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from None


# -------------------------------------------------------------------- results


def _pose_of(item) -> Pose:
    return item if isinstance(item, Pose) else item.pose


def write_results(detections: Mapping[object, Sequence], path, stride: int = 4, category_id=1) -> None:
    """Write detections (``Pose`` or ``Candidate`` per image) as a results file.

    Images are emitted in the mapping's order, detections in the given order.
    Keypoints are converted to pixels and all visibilities written as 1.
    """
    recs = []
    for image_id, items in detections.items():
        for item in items:
            pose = _pose_of(item)
            if not 0.0 <= pose.score <= 1.0:
                raise ValueError(f"score {pose.score} outside [0, 1]")
            kp = []
            for x, y in pose.xy * stride:
                kp += [_fmt(x), _fmt(y), "1"]
            recs.append('{"image_id": %s, "category_id": %s, "keypoints": [%s], "score": %s}' % (
                _id_json(image_id), json.dumps(category_id), ", ".join(kp), _fmt(pose.score)))
    text = "[]\n" if not recs else "[\n" + ",\n".join(recs) + "\n]\n"
    _write_text(path, text)


def read_results(path, stride: int = 4, num_keypoints: int | None = None) -> dict[object, list[Pose]]:
    """Parse a results file into per-image poses in grid units, keeping file order."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, list):
        raise ParseError(f"{path}: results must be a list of records")
    out: dict[object, list[Pose]] = {}
    for j, rec in enumerate(doc):
        where = f"results[{j}]"
        iid = _image_id(_get(rec, "image_id", where), f"{where}.image_id")
        kps = _get(rec, "keypoints", where)
        if not isinstance(kps, list) or not kps or len(kps) % 3:
            raise ParseError(f"{where}.keypoints: expected a flat list of (x, y, v) triples")
        if num_keypoints is not None and len(kps) != 3 * num_keypoints:
            raise InconsistentK(f"{where}.keypoints has {len(kps) // 3} keypoints, expected {num_keypoints}")
        score = _number(_get(rec, "score", where), f"{where}.score")
        if not 0.0 <= score <= 1.0:
            raise ParseError(f"{where}.score: {score} outside [0, 1]")
        vals = np.array([_number(v, f"{where}.keypoints[{i}]") for i, v in enumerate(kps)]).reshape(-1, 3)
        out.setdefault(iid, []).append(Pose(vals[:, :2] / stride, np.ones(len(vals), dtype=np.int64), score))
    return out


# ---------------------------------------------------------- tensor container

MAGIC = b"CIRT"
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
DTYPE_CODES = {"f32": 1, "f64": 2}


def write_tensors(path, tensors: Mapping[str, np.ndarray], dtype: str | Mapping[str, str] = "f32") -> None:
    """Write named arrays: header ``CIRT``, u32 version, u32 count, then per tensor
    u16 name length, UTF-8 name, u8 dtype code, u8 ndim, u32 dims, row-major payload.
    All integers little-endian. ``dtype`` is one code for every tensor or a per-name map.
    """
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        code_name = dtype if isinstance(dtype, str) else dtype.get(name, "f32")
        code = DTYPE_CODES[code_name]
        arr = np.asarray(arr, dtype=DTYPES[code], order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from None


def read_tensors(path) -> dict[str, np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from None
    if buf[:4] != MAGIC:
        raise ParseError(f"{path}: not a tensor container (bad magic)")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ParseError(f"{path}: truncated at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported container version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in DTYPES:
            raise ParseError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        out[name] = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if pos != len(buf):
        raise ParseError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


# ------------------------------------------------------ key-value documents


def write_keyvalue(path, values: Mapping[str, object]) -> None:
    """Write a flat ``key = value`` document; ``version`` always comes first."""
    lines = [f"version = {FORMAT_VERSION}"]
    for key, val in values.items():
        if key == "version":
            continue
        if isinstance(val, float):
            val = _fmt(val)
        elif isinstance(val, (tuple, list)):
            val = "x".join(str(v) for v in val)
        lines.append(f"{key} = {val}")
    _write_text(path, "\n".join(lines) + "\n")


def read_keyvalue(path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = val
    if out.get("version") != str(FORMAT_VERSION):
        raise ConfigError(f"{path}: missing or unsupported version (expected version = {FORMAT_VERSION})")
    return out


_GRID = re.compile(r"^\s*(\d+)\s*[x,]\s*(\d+)\s*$")
CONFIG_KEYS = ("seed", "steps", "lr", "gamma", "n_semantic", "lambda_i", "lambda_d", "grid",
               "instance_label", "batch_size", "stride")


def parse_train_config(values: Mapping[str, str]):
    """Turn key-value strings into a ``TrainConfig``; unknown keys are errors."""
    from .trainer import TrainConfig

    conv = {}
    types = {f.name: f.type for f in fields(TrainConfig)}
    for key, raw in values.items():
        if key == "version":
            continue
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            if key == "grid":
                m = _GRID.match(raw)
                if not m:
                    raise ValueError(raw)
                conv[key] = (int(m.group(1)), int(m.group(2)))
            elif key == "instance_label":
                conv[key] = raw
            elif types[key] == "int":
                conv[key] = int(raw)
            else:
                conv[key] = float(raw)
        except ValueError:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
    try:
        return TrainConfig(**conv)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_train_config(path):
    return parse_train_config(read_keyvalue(path))


def write_train_config(path, config) -> None:
    write_keyvalue(path, {k: getattr(config, k) for k in CONFIG_KEYS})


def write_report(path, result) -> None:
    """Eval report: the six summary metrics as a key-value document."""
    write_keyvalue(path, {k: float(v) for k, v in result.as_dict().items()})


def report_text(result) -> str:
    return "\n".join(f"{k} = {_fmt(v)}" for k, v in result.as_dict().items())


# -------------------------------------------------------------------- scatter


@dataclass(frozen=True)
class ScatterRow:
    image_id: object
    cell_x: int
    cell_y: int
    score: float
    oks: float


def write_scatter(path, rows: Sequence[ScatterRow]) -> None:
    """CSV of (instance score, best OKS against ground truth) per kept candidate."""
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["image_id", "cell_x", "cell_y", "score", "oks"])
            for r in rows:
                out.writerow([r.image_id, r.cell_x, r.cell_y, _fmt(r.score), _fmt(r.oks)])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from None


# ---------------------------------------------------------------- checkpoints

_SHAPE_FIELDS = ("num_keypoints", "channels", "keypoint_channels", "instance_channels", "num_semantic",
                 "query_gain", "semantic_gain", "refine_gain")


def save_checkpoint(path, model) -> None:
    """Parameters as float64 tensors plus the model shape, so a reload is exact."""
    tensors = {"meta/shape": np.array([getattr(model.shape, f) for f in _SHAPE_FIELDS], dtype=np.float64)}
    for name in sorted(model.params):
        tensors[f"param/{name}"] = model.params[name]
    write_tensors(path, tensors, "f64")


def load_checkpoint(path):
    from .model import ModelShape, TinyModel

    t = read_tensors(path)
    if "meta/shape" not in t:
        raise ParseError(f"{path}: not a checkpoint (no meta/shape)")
    vals = t["meta/shape"]
    kw = {f: (int(v) if f not in ("query_gain", "semantic_gain", "refine_gain") else float(v))
          for f, v in zip(_SHAPE_FIELDS, vals)}
    shape = ModelShape(**kw)
    ref = TinyModel.create(shape, 0)
    params = {}
    for name, arr in ref.params.items():
        key = f"param/{name}"
        if key not in t or t[key].shape != arr.shape:
            raise ParseError(f"{path}: parameter {name!r} missing or misshapen")
        params[name] = np.array(t[key], dtype=np.float64)
    return TinyModel(shape, params)
