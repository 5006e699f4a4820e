"""Bit-exact tensor file I/O, dataset manifests, synthetic scenes, overlays.

Tensor files use the ubiquitous versioned binary array container (magic
``\\x93NUMPY``, version 1.0, ASCII dict header padded so the payload starts
on a 64-byte boundary, little-endian payload): anything in the wider
ecosystem can produce the feature/depth inputs. Only ``'<f4'`` (data) and
``'|u1'`` (labels) payloads are accepted, C order only.
"""

from __future__ import annotations

import ast
import hashlib
import io
import os
import zipfile
from dataclasses import dataclass

import numpy as np

from .core import Rng, Tensor2, Tensor3
from .sampling import SampleSet
from .training import Crop, Dataset

_MAGIC = b"\x93NUMPY"
_VERSION = b"\x01\x00"
_SUPPORTED_DESCR = ("<f4", "|u1")


class TensorFormatError(ValueError):
    """Malformed tensor file; message carries the failing byte offset."""


def write_tensor(path, arr: np.ndarray) -> None:
    """Write a 1/2/3-d array as '<f4' (floats) or '|u1' (uint8), C order."""
    with open(path, "wb") as fh:
        fh.write(tensor_bytes(arr))


def tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim not in (1, 2, 3):
        raise ValueError("only 1-d, 2-d and 3-d tensors are supported")
    if arr.dtype == np.uint8:
        descr, payload = "|u1", np.ascontiguousarray(arr)
    else:
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        descr, payload = "<f4", np.ascontiguousarray(arr, dtype="<f4")
    header = "{'descr': '%s', 'fortran_order': False, 'shape': %s, }" % (
        descr,
        str(tuple(int(s) for s in arr.shape)),
    )
    # pad with spaces + trailing newline so the payload starts at a
    # multiple of 64 bytes (magic 6 + version 2 + length field 2 + header)
    base = len(_MAGIC) + len(_VERSION) + 2
    pad = -(base + len(header) + 1) % 64
    header_bytes = (header + " " * pad + "\n").encode("ascii")
    out = io.BytesIO()
    out.write(_MAGIC)
    out.write(_VERSION)
    out.write(len(header_bytes).to_bytes(2, "little"))
    out.write(header_bytes)
    out.write(payload.tobytes(order="C"))
    return out.getvalue()


def read_tensor(path) -> np.ndarray:
    """Read a tensor file; returns float32 or uint8 exactly as stored."""
    with open(path, "rb") as fh:
        data = fh.read()
    return tensor_from_bytes(data)


def tensor_from_bytes(data: bytes) -> np.ndarray:
    if data[:6] != _MAGIC:
        raise TensorFormatError(f"bad magic at offset 0: {data[:6]!r}")
    if data[6:8] != _VERSION:
        raise TensorFormatError(f"unsupported version at offset 6: {data[6:8]!r}")
    hlen = int.from_bytes(data[8:10], "little")
    header_end = 10 + hlen
    if len(data) < header_end:
        raise TensorFormatError(f"truncated header at offset {len(data)}")
    try:
        header = ast.literal_eval(data[10:header_end].decode("ascii").strip())
    except (ValueError, SyntaxError, UnicodeDecodeError) as e:
        raise TensorFormatError(f"unparseable header at offset 10: {e}") from e
    descr = header.get("descr")
    if descr not in _SUPPORTED_DESCR:
        raise TensorFormatError(f"unsupported descr at offset 10: {descr!r}")
    if header.get("fortran_order") is not False:
        raise TensorFormatError("fortran_order must be False (offset 10)")
    shape = tuple(int(s) for s in header.get("shape", ()))
    count = int(np.prod(shape)) if shape else 1
    itemsize = 4 if descr == "<f4" else 1
    expected = count * itemsize
    payload = data[header_end:]
    if len(payload) != expected:
        raise TensorFormatError(
            f"payload size {len(payload)} != header shape product {expected}"
            f" (offset {header_end})"
        )
    dtype = np.dtype("<f4") if descr == "<f4" else np.dtype("|u1")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def read_feature_map(path) -> Tensor3:
    arr = read_tensor(path)
    if arr.ndim != 3:
        raise ValueError(f"feature tensor must be 3-d: {path}")
    return Tensor3(arr.astype(np.float64))


def read_depth_map(path) -> tuple[Tensor2, bool]:
    """Load an H x W depth map; min-max normalize if outside [0, 1].

    Returns (map, normalized_flag).
    """
    arr = read_tensor(path).astype(np.float64)
    if arr.ndim != 2:
        raise ValueError(f"depth tensor must be 2-d: {path}")
    lo, hi = float(arr.min()), float(arr.max())
    normalized = False
    if lo < 0.0 or hi > 1.0:
        span = hi - lo
        arr = (arr - lo) / span if span > 0 else np.zeros_like(arr)
        normalized = True
    return Tensor2(arr), normalized


def read_label_map(path) -> np.ndarray:
    arr = read_tensor(path)
    if arr.dtype != np.uint8 or arr.ndim != 2:
        raise ValueError(f"label tensor must be 2-d '|u1': {path}")
    return arr


# --- manifest ---------------------------------------------------------------
#
# One tab-separated record per crop:
#   image_id <TAB> crop_id <TAB> feature_path <TAB> depth_path
#       [<TAB> label_path|-] [<TAB> knn_spec|-]
# knn_spec is a comma-separated list of image_id:crop_id references.
# Paths are relative to the manifest's directory. Lines starting with '#'
# are comments.


@dataclass
class LoadReport:
    messages: list[str]

    def add(self, msg: str) -> None:
        self.messages.append(msg)


def write_manifest(path, records: list[dict]) -> None:
    lines = ["# image_id\tcrop_id\tfeatures\tdepth\tlabels\tknn"]
    for r in records:
        knn = (
            ",".join(f"{i}:{c}" for i, c in r["knn"]) if r.get("knn") else "-"
        )
        lines.append(
            "\t".join(
                [
                    r["image_id"],
                    r["crop_id"],
                    r["features"],
                    r["depth"],
                    r.get("labels") or "-",
                    knn,
                ]
            )
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_manifest(path) -> tuple[Dataset, LoadReport]:
    """Load and validate a manifest; fails fast on any shape mismatch."""
    report = LoadReport([])
    base = os.path.dirname(os.path.abspath(path))
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < 4:
                raise ValueError(f"manifest line {ln}: expected >= 4 fields")
            rows.append((ln, parts))

    crops: list[Crop] = []
    key_to_index: dict[tuple[str, str], int] = {}
    knn_specs: list[list[tuple[str, str]] | None] = []
    shape_ref: tuple[int, int, int] | None = None
    for ln, parts in rows:
        image_id, crop_id, fpath, dpath = parts[:4]
        lpath = parts[4] if len(parts) > 4 and parts[4] != "-" else None
        kspec = parts[5] if len(parts) > 5 and parts[5] != "-" else None
        feats = read_feature_map(os.path.join(base, fpath))
        depth, normalized = read_depth_map(os.path.join(base, dpath))
        if normalized:
            report.add(f"normalized depth map to [0,1]: {dpath}")
        if (feats.height, feats.width) != (depth.height, depth.width):
            raise ValueError(
                f"manifest line {ln}: feature grid {feats.height}x{feats.width}"
                f" != depth grid {depth.height}x{depth.width}"
            )
        shape = (feats.channels, feats.height, feats.width)
        if shape_ref is None:
            shape_ref = shape
        elif shape != shape_ref:
            raise ValueError(f"manifest line {ln}: tensor shape {shape} != {shape_ref}")
        labels = None
        if lpath is not None:
            labels = read_label_map(os.path.join(base, lpath))
            if labels.shape != (feats.height, feats.width):
                raise ValueError(f"manifest line {ln}: label shape mismatch")
        key = (image_id, crop_id)
        if key in key_to_index:
            raise ValueError(f"manifest line {ln}: duplicate crop {key}")
        key_to_index[key] = len(crops)
        crops.append(Crop(image_id, crop_id, feats, depth, labels))
        knn_specs.append(
            [tuple(x.split(":", 1)) for x in kspec.split(",")] if kspec else None
        )
    if not crops:
        raise ValueError("manifest contains no records")
    for crop, spec in zip(crops, knn_specs):
        if spec is None:
            continue
        crop.knn = []
        for key in spec:
            if key not in key_to_index:
                raise ValueError(f"unknown knn reference {key} for crop {crop.crop_id}")
            crop.knn.append(key_to_index[key])
    return Dataset(crops), report


# --- checkpoints ------------------------------------------------------------


def write_checkpoint(path, tensors: dict[str, np.ndarray], digest: str) -> None:
    """All parameter tensors plus the config digest, in one stored-zip file.

    Fixed member timestamps keep the bytes reproducible; members are
    ordinary tensor files readable by any array tool.
    """
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(tensors):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, tensor_bytes(tensors[name]))
        info = zipfile.ZipInfo("config_digest.txt", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, digest + "\n")


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    tensors = {}
    digest = ""
    with zipfile.ZipFile(path, "r") as zf:
        for name in zf.namelist():
            if name == "config_digest.txt":
                digest = zf.read(name).decode("utf-8").strip()
            elif name.endswith(".npy"):
                tensors[name[:-4]] = tensor_from_bytes(zf.read(name))
    return tensors, digest


# --- synthetic scenes -------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Desk-scale scene generator: rectangles on depth plateaus.

    Ground-truth classes correlate with depth plateaus, with a
    position-dependent nuisance direction in feature space as the
    confounder that depth guidance is meant to overcome.
    """

    scenes: int = 12
    height: int = 16
    width: int = 16
    feature_dim: int = 8
    classes: int = 4
    planes: int = 3  # foreground rectangles per scene; background is its own plateau
    noise: float = 0.1  # per-pixel feature noise sigma
    nuisance: float = 0.25  # strength of the position-dependent confounder
    seed: int = 0

    def __post_init__(self):
        if self.classes > self.planes + 1:
            raise ValueError("classes must be <= planes + 1")
        if min(self.scenes, self.height, self.width, self.feature_dim, self.classes) < 1:
            raise ValueError("all counts must be >= 1")
        if self.classes > self.feature_dim:
            raise ValueError("feature_dim must be >= classes for distinct embeddings")


_CROP_OFFSET = 2  # canvas exceeds the crop by this much on each axis
_DEPTH_NOISE = 0.02  # amplitude of the smooth in-plateau depth variation
_BG_DEPTH = 0.95
# foreground plateau range; the low end stays above sqrt(default depth bias)
# so no plateau's self-product falls below the bias (self-repulsion)
_FG_DEPTH_RANGE = (0.8, 0.2)
# cosine between the two deliberately confusable foreground classes: close
# enough that the feature-driven attraction sits near its threshold, so the
# depth contrast between their plateaus casts the deciding vote
_CONFUSABLE_COS = 0.45


def _orthonormal(c: int, k: int, rng: Rng) -> np.ndarray:
    """k orthonormal directions in R^c via Gram-Schmidt on seeded Gaussians."""
    vecs = []
    while len(vecs) < k:
        v = rng.normals((c,))
        for u in vecs:
            v = v - np.dot(v, u) * u
        n = float(np.sqrt(np.dot(v, v)))
        if n > 1e-6:
            vecs.append(v / n)
    return np.stack(vecs)


def _embedding_directions(cfg: SynthConfig, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Class embeddings plus a nuisance direction.

    Classes 1 and 2 (when present, and when the feature dim has room) share
    a common component so their cosine equals ``_CONFUSABLE_COS``; all other
    class directions are mutually orthogonal, as is the nuisance direction.
    """
    k, c = cfg.classes, cfg.feature_dim
    need = k + 3  # shared dir + two differentials + nuisance, minus reuse
    if k >= 3 and c >= need:
        base = _orthonormal(c, need, rng)
        shared, d1, d2 = base[k], base[1], base[2]
        cos_conf = np.sqrt(_CONFUSABLE_COS)
        sin_conf = np.sqrt(1.0 - _CONFUSABLE_COS)
        embeddings = base[:k].copy()
        embeddings[1] = cos_conf * shared + sin_conf * d1
        embeddings[2] = cos_conf * shared + sin_conf * d2
        return embeddings, base[k + 2]
    extra = 1 if c > k else 0
    base = _orthonormal(c, k + extra, rng)
    if extra:
        return base[:k], base[k]
    v = rng.normals((c,))
    return base, v / float(np.sqrt(np.dot(v, v)))


def _smooth_field(h: int, w: int, rng: Rng) -> np.ndarray:
    """Smooth noise in [-1, 1]: bilinear upsampling of a coarse seeded grid."""
    ch, cw = max(2, h // 4), max(2, w // 4)
    coarse = rng.uniforms((ch, cw), -1.0, 1.0)
    ys = np.linspace(0, ch - 1, h)
    xs = np.linspace(0, cw - 1, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, ch - 1)
    x1 = np.minimum(x0 + 1, cw - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    return (
        coarse[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
        + coarse[np.ix_(y1, x0)] * fy * (1 - fx)
        + coarse[np.ix_(y0, x1)] * (1 - fy) * fx
        + coarse[np.ix_(y1, x1)] * fy * fx
    )


def _class_depths(classes: int) -> np.ndarray:
    """Per-class depth plateau, constant across scenes (class 0 = background).

    The confusable pair (classes 1 and 2) gets the extreme plateaus so the
    depth contrast between them is maximal.
    """
    depths = np.empty(classes)
    depths[0] = _BG_DEPTH
    if classes > 1:
        fg = np.linspace(*_FG_DEPTH_RANGE, classes - 1)
        order = [0, classes - 2] + list(range(1, classes - 2))
        for cls_off, fg_idx in zip(range(1, classes), order):
            depths[cls_off] = fg[fg_idx]
    return depths


def _scene_arrays(cfg: SynthConfig, scene: int, rng: Rng):
    """Canvas-resolution (labels, depth) for one scene."""
    hc = cfg.height + _CROP_OFFSET
    wc = cfg.width + _CROP_OFFSET
    labels = np.zeros((hc, wc), dtype=np.uint8)  # background class 0
    depths = _class_depths(cfg.classes)
    depth = np.full((hc, wc), depths[0], dtype=np.float64)
    min_side = 3
    # roughly equal area share per region keeps centering dynamics balanced;
    # the nearest region stays deliberately small (structure random sampling
    # tends to miss)
    share_side = max(min_side, int(round(np.sqrt(hc * wc / (cfg.planes + 1)))))
    for p in range(cfg.planes):
        cls = 1 + (p % (cfg.classes - 1)) if cfg.classes > 1 else 0
        if p == cfg.planes - 1 and cfg.planes > 1:
            rh, rw = min_side, min_side + 1
        else:
            rh = share_side + rng.randint(3) - 1
            rw = share_side + rng.randint(3) - 1
        rh, rw = min(rh, hc), min(rw, wc)
        r0 = rng.randint(hc - rh + 1)
        c0 = rng.randint(wc - rw + 1)
        labels[r0 : r0 + rh, c0 : c0 + rw] = cls
        depth[r0 : r0 + rh, c0 : c0 + rw] = depths[cls]
    depth = depth + _DEPTH_NOISE * _smooth_field(hc, wc, rng)
    return labels, np.clip(depth, 0.0, 1.0)


def generate_synthetic(cfg: SynthConfig):
    """In-memory synthetic dataset: two overlapping crops per scene.

    Returns (crop record list, class embeddings); each record holds
    features (C, H, W) float64, depth (H, W), labels (H, W) uint8.
    """
    rng = Rng(cfg.seed)
    emb_rng = rng.spawn(1)
    scene_rng = rng.spawn(2)
    noise_rng = rng.spawn(3)
    embeddings, nuisance_dir = _embedding_directions(cfg, emb_rng)

    records = []
    offsets = ((0, 0), (_CROP_OFFSET, _CROP_OFFSET))
    for s in range(cfg.scenes):
        labels_c, depth_c = _scene_arrays(cfg, s, scene_rng)
        hc, wc = labels_c.shape
        # position-dependent blend toward a shared distractor direction: on
        # the right half of the scene every class washes out toward the same
        # appearance while the depth plateaus stay crisp
        ramp = np.clip(np.linspace(-0.6, 1.6, wc), 0.0, 1.0)
        blend = cfg.nuisance * np.tile(ramp, (hc, 1))[:, :, None]
        feat_c = embeddings[labels_c.reshape(-1)].reshape(hc, wc, cfg.feature_dim)
        feat_c = (1.0 - blend) * feat_c + blend * nuisance_dir
        feat_c = feat_c + cfg.noise * noise_rng.normals((hc, wc, cfg.feature_dim))
        for ci, (dr, dc) in enumerate(offsets):
            h, w = cfg.height, cfg.width
            f = feat_c[dr : dr + h, dc : dc + w].transpose(2, 0, 1)
            records.append(
                {
                    "image_id": f"scene{s:03d}",
                    "crop_id": f"crop{ci}",
                    "features": np.ascontiguousarray(f),
                    "depth": depth_c[dr : dr + h, dc : dc + w].copy(),
                    "labels": labels_c[dr : dr + h, dc : dc + w].copy(),
                }
            )
    return records, embeddings


def gen_synthetic(cfg: SynthConfig, out_dir) -> str:
    """Generate the synthetic dataset on disk; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    records, _ = generate_synthetic(cfg)
    manifest_records = []
    for r in records:
        stem = f"{r['image_id']}_{r['crop_id']}"
        write_tensor(os.path.join(out_dir, f"{stem}_feat.npy"), r["features"])
        write_tensor(os.path.join(out_dir, f"{stem}_depth.npy"), r["depth"])
        write_tensor(os.path.join(out_dir, f"{stem}_label.npy"), r["labels"])
        manifest_records.append(
            {
                "image_id": r["image_id"],
                "crop_id": r["crop_id"],
                "features": f"{stem}_feat.npy",
                "depth": f"{stem}_depth.npy",
                "labels": f"{stem}_label.npy",
            }
        )
    manifest_path = os.path.join(out_dir, "manifest.tsv")
    write_manifest(manifest_path, manifest_records)
    return manifest_path


def dataset_from_records(records) -> Dataset:
    """Wrap in-memory generator output as a training dataset."""
    crops = [
        Crop(
            r["image_id"],
            r["crop_id"],
            Tensor3(np.asarray(r["features"], dtype=np.float64)),
            Tensor2(np.asarray(r["depth"], dtype=np.float64)),
            r.get("labels"),
        )
        for r in records
    ]
    return Dataset(crops)


# --- overlays ---------------------------------------------------------------


def write_overlay(
    depth: Tensor2,
    samples: SampleSet,
    path,
    scale: int = 8,
    color: tuple[int, int, int] = (255, 40, 40),
) -> None:
    """Binary P6 image: grayscale depth with a 3x3 marker per sampled cell."""
    if scale < 1:
        raise ValueError("scale must be >= 1")
    h, w = depth.height, depth.width
    gray = np.clip(np.rint(depth.data * 255.0), 0, 255).astype(np.uint8)
    img = np.repeat(np.repeat(gray, scale, axis=0), scale, axis=1)
    rgb = np.stack([img, img, img], axis=-1)
    hh, ww = rgb.shape[:2]
    for r, c in samples.indices:
        if not (0 <= r < h and 0 <= c < w):
            raise ValueError(f"sample ({r},{c}) out of bounds")
        cy = r * scale + scale // 2
        cx = c * scale + scale // 2
        y0, y1 = max(0, cy - 1), min(hh, cy + 2)
        x0, x1 = max(0, cx - 1), min(ww, cx + 2)
        rgb[y0:y1, x0:x1] = color
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (ww, hh))
        fh.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    """Parse a binary P6 image back into an (H, W, 3) uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise ValueError("not a P6 image")
    parts = data.split(b"\n", 3)
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3).copy()


def file_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
