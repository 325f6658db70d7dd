"""Binary and structured-text codecs for every pipeline artifact.

All binary formats are little-endian with a 4-byte magic followed by explicit
shapes, so round-trips are bit-exact across platforms:

  PLCD  point cloud: u32 count; per point f32 x,y,z,intensity, u16 sem, u16 inst
  FMAP  feature maps: u32 K,H',W',D; f32 row-major data
  TOKS  fused tokens: u32 count, D; per token u16 r,theta,z; 2*D f32 content
  MSK2  2D mask, RLE: u32 cam,H,W, run count; u32 runs starting with zeros
  QRYS  queries: u32 n_prior,n_noprior,n_semantic,D; prior records then vectors
  PVOX  per-voxel provenance: u32 count; per voxel u16 r,theta,z, u8 tag
  SPEW  embedding weights: u32 dim; shape-prefixed f64 blocks

Camera calibrations are JSON (numbers parse as 64-bit floats); images are
binary PPM (P6).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import BadConfigError, BadMagicError, ShapeMismatchError, TruncatedFileError
from .geometry import CameraModel
from .grid import PointCloud
from .queries import LocationHint, Mask2D, QuerySet
from .tokens import N_BANDS, PHI_HIDDEN, SpeParams, TokenSet

PLCD_DTYPE = np.dtype(
    [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("intensity", "<f4"), ("semantic", "<u2"), ("instance", "<u2")]
)
PVOX_DTYPE = np.dtype([("r", "<u2"), ("theta", "<u2"), ("z", "<u2"), ("tag", "u1")])
ORIGIN_CODES = {"geometric": 0, "texture": 1}
ORIGIN_NAMES = {v: k for k, v in ORIGIN_CODES.items()}


class _Reader:
    """Cursor over a byte buffer with truncation checks."""

    def __init__(self, data: bytes, path):
        self.data = data
        self.off = 0
        self.path = path

    def magic(self, expected: bytes):
        got = self.take(4)
        if got != expected:
            raise BadMagicError(f"{self.path}: expected magic {expected!r}, got {got!r}")

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise TruncatedFileError(f"{self.path}: needs {self.off + n} bytes, has {len(self.data)}")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def u32(self, count: int = 1):
        vals = np.frombuffer(self.take(4 * count), dtype="<u4")
        return int(vals[0]) if count == 1 else vals.astype(np.int64)

    def array(self, dtype, count: int) -> np.ndarray:
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize * count), dtype=dtype, count=count)

    def done(self):
        if self.off != len(self.data):
            raise ShapeMismatchError(f"{self.path}: {len(self.data) - self.off} trailing bytes")


def _u32(*vals) -> bytes:
    return np.asarray(vals, dtype="<u4").tobytes()


def write_point_cloud(path, cloud: PointCloud):
    rec = np.empty(len(cloud), dtype=PLCD_DTYPE)
    rec["x"], rec["y"], rec["z"] = cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.xyz[:, 2]
    rec["intensity"] = cloud.intensity
    rec["semantic"] = cloud.semantic if cloud.semantic is not None else 0
    rec["instance"] = cloud.instance if cloud.instance is not None else 0
    Path(path).write_bytes(b"PLCD" + _u32(len(cloud)) + rec.tobytes())


def read_point_cloud(path) -> PointCloud:
    r = _Reader(Path(path).read_bytes(), path)
    r.magic(b"PLCD")
    n = r.u32()
    rec = r.array(PLCD_DTYPE, n)
    r.done()
    xyz = np.column_stack([rec["x"], rec["y"], rec["z"]])
    return PointCloud(xyz, rec["intensity"].copy(), rec["semantic"].copy(), rec["instance"].copy())


def write_feature_maps(path, maps: np.ndarray):
    """Write a (K, H', W', D) float32 tensor."""
    maps = np.ascontiguousarray(maps, dtype="<f4")
    if maps.ndim != 4:
        raise ShapeMismatchError("feature maps must be (K, H', W', D)")
    Path(path).write_bytes(b"FMAP" + _u32(*maps.shape) + maps.tobytes())


def read_feature_maps(path) -> np.ndarray:
    r = _Reader(Path(path).read_bytes(), path)
    r.magic(b"FMAP")
    k, h, w, d = (r.u32() for _ in range(4))
    data = r.array("<f4", k * h * w * d)
    r.done()
    return data.reshape(k, h, w, d).copy()


def write_tokens(path, tokens: TokenSet):
    idx3 = tokens.indices3
    dim2 = 2 * tokens.dim
    rec_dtype = np.dtype([("idx", "<u2", 3), ("content", "<f4", dim2)])
    rec = np.empty(len(tokens), dtype=rec_dtype)
    rec["idx"] = idx3.astype(np.uint16)
    rec["content"] = tokens.content.astype(np.float32)
    Path(path).write_bytes(b"TOKS" + _u32(len(tokens), tokens.dim) + rec.tobytes())


def read_tokens(path, spec) -> tuple[np.ndarray, np.ndarray]:
    """Read token records: returns ((M, 3) voxel indices, (M, 2*D) float32 content)."""
    r = _Reader(Path(path).read_bytes(), path)
    r.magic(b"TOKS")
    n = r.u32()
    dim = r.u32()
    rec = r.array(np.dtype([("idx", "<u2", 3), ("content", "<f4", 2 * dim)]), n)
    r.done()
    idx3 = rec["idx"].astype(np.int64).reshape(n, 3)
    if n and (idx3 >= np.array(spec.shape)).any():
        raise ShapeMismatchError("token voxel index outside the grid spec")
    return idx3, rec["content"].reshape(n, 2 * dim).copy()


def write_mask(path, mask: Mask2D):
    flat = mask.bitmap.reshape(-1)
    changes = np.flatnonzero(np.diff(flat))
    bounds = np.concatenate([[0], changes + 1, [len(flat)]])
    runs = np.diff(bounds)
    if len(flat) and flat[0]:
        runs = np.concatenate([[0], runs])  # runs always start with a zero run
    h, w = mask.bitmap.shape
    Path(path).write_bytes(
        b"MSK2" + _u32(mask.camera_id, h, w, len(runs)) + runs.astype("<u4").tobytes()
    )


def read_mask(path) -> Mask2D:
    r = _Reader(Path(path).read_bytes(), path)
    r.magic(b"MSK2")
    cam_id, h, w, n_runs = (r.u32() for _ in range(4))
    runs = r.array("<u4", n_runs).astype(np.int64)
    r.done()
    if runs.sum() != h * w:
        raise ShapeMismatchError(f"{path}: runs sum to {runs.sum()}, expected {h * w}")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    val = False
    for run in runs:
        if val:
            flat[pos:pos + run] = True
        pos += run
        val = not val
    return Mask2D(cam_id, flat.reshape(h, w))


def write_queries(path, qs: QuerySet):
    parts = [
        b"QRYS",
        _u32(qs.num_prior, len(qs.no_prior), len(qs.semantic), qs.dim),
    ]
    for i, h in enumerate(qs.hints):
        parts.append(np.asarray(h.position, dtype="<f4").tobytes())
        parts.append(np.asarray([h.confidence], dtype="<f4").tobytes())
        parts.append(bytes([ORIGIN_CODES[h.origin]]))
        parts.append(qs.prior_content[i].astype("<f4").tobytes())
    parts.append(qs.no_prior.astype("<f4").tobytes())
    parts.append(qs.semantic.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_queries(path) -> QuerySet:
    r = _Reader(Path(path).read_bytes(), path)
    r.magic(b"QRYS")
    n_prior, n_lt, n_sem, dim = (r.u32() for _ in range(4))
    hints = []
    content = np.zeros((n_prior, 2 * dim), dtype=np.float32)
    for i in range(n_prior):
        pos = r.array("<f4", 3).astype(np.float64)
        conf = float(r.array("<f4", 1)[0])
        code = r.take(1)[0]
        if code not in ORIGIN_NAMES:
            raise ShapeMismatchError(f"{path}: unknown hint origin code {code}")
        hints.append(LocationHint(pos, conf, ORIGIN_NAMES[code]))
        content[i] = r.array("<f4", 2 * dim)
    no_prior = r.array("<f4", n_lt * dim).reshape(n_lt, dim).copy()
    semantic = r.array("<f4", n_sem * dim).reshape(n_sem, dim).copy()
    r.done()
    return QuerySet(
        dim=dim,
        prior_content=content,
        prior_spe=np.zeros((n_prior, dim), dtype=np.float32),
        hints=hints,
        no_prior=no_prior,
        semantic=semantic,
    )


def write_provenance(path, idx3: np.ndarray, tags: np.ndarray):
    idx3 = np.asarray(idx3, dtype=np.int64).reshape(-1, 3)
    rec = np.empty(len(idx3), dtype=PVOX_DTYPE)
    rec["r"], rec["theta"], rec["z"] = (idx3[:, i].astype(np.uint16) for i in range(3))
    rec["tag"] = np.asarray(tags, dtype=np.uint8)
    Path(path).write_bytes(b"PVOX" + _u32(len(idx3)) + rec.tobytes())


def read_provenance(path) -> tuple[np.ndarray, np.ndarray]:
    r = _Reader(Path(path).read_bytes(), path)
    r.magic(b"PVOX")
    n = r.u32()
    rec = r.array(PVOX_DTYPE, n)
    r.done()
    idx3 = np.column_stack([rec["r"], rec["theta"], rec["z"]]).astype(np.int64)
    return idx3, rec["tag"].copy()


def write_ppm(path, image: np.ndarray):
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeMismatchError("PPM images must be (H, W, 3) uint8")
    h, w, _ = image.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + image.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(b"P6"):
        raise BadMagicError(f"{path}: not a binary PPM")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedFileError(f"{path}: incomplete PPM header")
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ShapeMismatchError(f"{path}: only maxval 255 supported")
    payload = data[pos:pos + w * h * 3]
    if len(payload) < w * h * 3:
        raise TruncatedFileError(f"{path}: PPM payload short")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def write_calibration(path, cams: list[CameraModel]):
    payload = {
        "cameras": [
            {
                "K": [float(v) for v in cam.intrinsic.reshape(-1)],
                "T": [float(v) for v in cam.extrinsic.reshape(-1)],
                "width": cam.width,
                "height": cam.height,
            }
            for cam in cams
        ]
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def read_calibration(path) -> list[CameraModel]:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise BadConfigError(f"cannot parse calibration {path}: {exc}") from exc
    cams = []
    for i, entry in enumerate(payload.get("cameras", [])):
        try:
            K = np.asarray(entry["K"], dtype=np.float64).reshape(3, 3)
            T = np.asarray(entry["T"], dtype=np.float64).reshape(4, 4)
            cam = CameraModel(K, T, int(entry["width"]), int(entry["height"]))
        except (KeyError, ValueError) as exc:
            raise BadConfigError(f"camera {i} in {path}: {exc}") from exc
        if not cam.is_proper:
            raise BadConfigError(f"camera {i} in {path}: extrinsic rotation must be proper")
        cams.append(cam)
    if not cams:
        raise BadConfigError(f"{path}: no cameras")
    return cams


def write_spe_params(path, params: SpeParams):
    arrays = [params.coord_scales, params.psi_w, params.phi_w1, params.phi_b1, params.phi_w2, params.phi_b2]
    parts = [b"SPEW", _u32(params.dim, len(arrays))]
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        parts.append(_u32(a.ndim, *a.shape))
        parts.append(a.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_spe_params(path) -> SpeParams:
    r = _Reader(Path(path).read_bytes(), path)
    r.magic(b"SPEW")
    dim = r.u32()
    n_arrays = r.u32()
    arrays = []
    for _ in range(n_arrays):
        ndim = r.u32()
        shape = tuple(int(r.u32()) for _ in range(ndim))
        arrays.append(r.array("<f8", int(np.prod(shape))).reshape(shape).copy())
    r.done()
    if n_arrays != 6:
        raise ShapeMismatchError(f"{path}: expected 6 weight blocks, found {n_arrays}")
    scales, psi_w, w1, b1, w2, b2 = arrays
    if psi_w.shape != (dim, 5 * N_BANDS * 2) or w1.shape != (PHI_HIDDEN, 8):
        raise ShapeMismatchError(f"{path}: weight shapes inconsistent with dim {dim}")
    return SpeParams(dim, scales, psi_w, w1, b1, w2, b2)
