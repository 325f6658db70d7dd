"""Modality-synchronized augmentation by voxel-wise scene mixing.

A boolean selection mask over the full R x Theta x Z grid decides, per voxel,
whether the augmented scene keeps the original voxel or takes the one from a
second scan. Because every voxel is paired with an image rectangle, the same
mask drives a synchronized patch swap on the camera images, keeping both
modalities aligned. Slicing the mask along the height, angle, or radius axis
reproduces scene-swapping augmentations; building it from the voxels covered
by transformed donor instances reproduces instance pasting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import IndexOutOfRangeError, InsufficientInstancesError, SpecMismatchError
from .geometry import CameraModel, InstanceTransform, similarity_matrix, transform_camera, transform_instance
from .grid import CylGrid, CylGridSpec, PairingTable, PointCloud, pair_voxel_image, voxelize

AXES = ("radius", "angle", "height")


@dataclass
class MultiModalSample:
    """A LiDAR scan with its camera images and calibrations."""

    cloud: PointCloud
    images: list[np.ndarray]  # (H, W, 3) uint8 per camera
    cams: list[CameraModel]

    def __post_init__(self):
        if len(self.images) != len(self.cams):
            raise ValueError("image count must equal camera count")
        self.images = [np.ascontiguousarray(im, dtype=np.uint8) for im in self.images]

    def copy_images(self) -> list[np.ndarray]:
        return [im.copy() for im in self.images]


@dataclass
class AugConfig:
    """Probabilities and ranges for the augmentation pipeline."""

    p_instance: float = 0.4
    p_height_swap: float = 0.05
    p_angle_swap: float = 0.05
    split_choices: tuple[int, ...] = (3, 4, 5)
    instance_count_range: tuple[int, int] = (1, 5)
    strategy_mode: str = "independent"  # or "categorical"
    # instance-paste transform ranges
    paste_translation: float = 2.0
    paste_rotation: float = np.pi
    paste_scale_range: tuple[float, float] = (0.95, 1.05)
    # global transforms applied after mixing
    rotation_range: float = 0.0
    flip_prob: float = 0.0
    scale_range: tuple[float, float] = (1.0, 1.0)
    rng_seed: int = 0

    def __post_init__(self):
        for p in (self.p_instance, self.p_height_swap, self.p_angle_swap):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        if not self.split_choices:
            raise ValueError("split_choices must be non-empty")
        if self.strategy_mode not in ("independent", "categorical"):
            raise ValueError("strategy_mode must be 'independent' or 'categorical'")
        if self.strategy_mode == "categorical":
            if self.p_instance + self.p_height_swap + self.p_angle_swap > 1.0 + 1e-12:
                raise ValueError("categorical probabilities must sum to <= 1")


def instance_paste_mask(instances: list[np.ndarray], spec: CylGridSpec) -> np.ndarray:
    """Union of the voxel-index sets covered by pasted instances, as a dense bool mask."""
    mask = np.zeros(spec.shape, dtype=bool)
    for idx3 in instances:
        idx3 = np.asarray(idx3, dtype=np.int64).reshape(-1, 3)
        if len(idx3) == 0:
            continue
        if (idx3 < 0).any() or (idx3 >= np.array(spec.shape)).any():
            raise IndexOutOfRangeError("instance voxel index outside grid")
        mask[idx3[:, 0], idx3[:, 1], idx3[:, 2]] = True
    return mask


def scene_swap_mask(axis: str, selected, spec: CylGridSpec) -> np.ndarray:
    """Mask selecting whole slices of one axis; the other two axes are fully covered."""
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}")
    n = {"radius": spec.r_bins, "angle": spec.theta_bins, "height": spec.z_bins}[axis]
    sel = np.unique(np.asarray(list(selected), dtype=np.int64))
    if len(sel) and (sel[0] < 0 or sel[-1] >= n):
        raise IndexOutOfRangeError(f"selected {axis} bins outside [0, {n})")
    mask = np.zeros(spec.shape, dtype=bool)
    if axis == "radius":
        mask[sel, :, :] = True
    elif axis == "angle":
        mask[:, sel, :] = True
    else:
        mask[:, :, sel] = True
    return mask


def alternating_slices(n_bins: int, splits: int) -> np.ndarray:
    """Bins of the odd-indexed slices when an axis is cut into `splits` equal parts."""
    parts = np.array_split(np.arange(n_bins), splits)
    odd = parts[1::2]
    return np.concatenate(odd) if odd else np.zeros(0, dtype=np.int64)


def _check_mask(mask: np.ndarray, spec: CylGridSpec) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != spec.shape:
        raise SpecMismatchError(f"mask shape {mask.shape} != grid shape {spec.shape}")
    if mask.dtype != bool:
        if not np.isin(mask, (0, 1)).all():
            raise SpecMismatchError("mask entries must be 0 or 1")
        mask = mask.astype(bool)
    return mask


def _remap_instances(org_inst: np.ndarray | None, new_inst: np.ndarray | None) -> np.ndarray | None:
    """Give incoming points fresh instance ids above the original scan's maximum."""
    if new_inst is None:
        return None
    base = int(org_inst.max()) if org_inst is not None and len(org_inst) else 0
    out = new_inst.astype(np.int64)
    ids = np.unique(out[out > 0])
    if base + len(ids) > np.iinfo(np.uint16).max:
        raise ValueError("instance id space exhausted while remapping")
    for rank, old in enumerate(ids):
        out[new_inst == old] = base + 1 + rank
    return out.astype(np.uint16)


def apply_mix(org: CylGrid, new: CylGrid, mask: np.ndarray) -> CylGrid:
    """Voxel-wise mix: where the mask is set take the new grid's voxel, else the original.

    Point lists, labels, and per-voxel source tags travel with their voxel;
    image pairings are carried over from the contributing grid. Incoming
    nonzero instance ids are remapped above the original scan's maximum so
    panoptic ground truth stays consistent.
    """
    if org.spec != new.spec:
        raise SpecMismatchError("grids must share one spec")
    mask = _check_mask(mask, org.spec)
    flat_mask = mask.reshape(-1)

    org_keep = ~flat_mask[org.voxel_ids]
    new_keep = flat_mask[new.voxel_ids]
    org_pts = org.order[np.repeat(org_keep, org.counts)]
    new_pts = new.order[np.repeat(new_keep, new.counts)]

    org_cloud = org.cloud.select(org_pts)
    new_cloud = new.cloud.select(new_pts)
    if org_cloud.has_labels and new_cloud.has_labels:
        new_cloud.instance = _remap_instances(org_cloud.instance, new_cloud.instance)
    merged = PointCloud.concat([org_cloud, new_cloud])

    mixed = voxelize(merged, org.spec)
    # Tags follow the contributing grid, not the merged points, so tags set by
    # earlier augmentation rounds survive on untouched voxels.
    rows_org = org.rows_of(mixed.voxel_ids)
    rows_new = new.rows_of(mixed.voxel_ids)
    from_new = flat_mask[mixed.voxel_ids]
    src = np.zeros(mixed.num_voxels, dtype=np.uint8)
    o = (~from_new) & (rows_org >= 0)
    n = from_new & (rows_new >= 0)
    src[o] = org.source[rows_org[o]]
    src[n] = new.source[rows_new[n]]
    mixed.source = src

    cams = set(org.pairings) | set(new.pairings)
    for cam_id in cams:
        tables = []
        for side, keep in ((org, ~flat_mask), (new, flat_mask)):
            table = side.pairings.get(cam_id)
            if table is None:
                continue
            sel = keep[table.flat_ids]
            tables.append((table.flat_ids[sel], table.rects[sel]))
        ids = np.concatenate([t[0] for t in tables]) if tables else np.zeros(0, dtype=np.int64)
        rects = np.concatenate([t[1] for t in tables]) if tables else np.zeros((0, 4), dtype=np.int32)
        perm = np.argsort(ids)
        mixed.pairings[cam_id] = PairingTable(ids[perm], rects[perm])
    return mixed


def sync_image_swap(
    org_imgs: list[np.ndarray],
    new_imgs: list[np.ndarray],
    mask: np.ndarray,
    new_pairings: dict[int, PairingTable],
) -> tuple[list[np.ndarray], dict[int, np.ndarray]]:
    """Copy the image rectangles paired with every masked voxel from the new scan.

    Voxels are processed in ascending (r, theta, z) order; since all copies in
    one call read from the same source images, overlapping rectangles resolve
    to identical pixels either way. Returns the output images and, per camera,
    the (k, 4) array of rectangles that were swapped.
    """
    if len(org_imgs) != len(new_imgs):
        raise SpecMismatchError("image sets must have equal camera counts")
    flat_mask = np.asarray(mask).reshape(-1).astype(bool)
    out_imgs = []
    swapped: dict[int, np.ndarray] = {}
    for cam_id, (org_im, new_im) in enumerate(zip(org_imgs, new_imgs)):
        if org_im.shape != new_im.shape:
            raise SpecMismatchError("paired images must share a shape")
        out = org_im.copy()
        table = new_pairings.get(cam_id)
        if table is None or len(table.flat_ids) == 0:
            out_imgs.append(out)
            swapped[cam_id] = np.zeros((0, 4), dtype=np.int32)
            continue
        sel = flat_mask[table.flat_ids]
        rects = table.rects[sel]  # flat_ids sorted == lexicographic voxel order
        paint = np.zeros(org_im.shape[:2], dtype=bool)
        for u0, v0, u1, v1 in rects:
            paint[v0:v1 + 1, u0:u1 + 1] = True
        out[paint] = new_im[paint]
        out_imgs.append(out)
        swapped[cam_id] = rects
    return out_imgs, swapped


def donor_instance_ids(cloud: PointCloud) -> np.ndarray:
    """Sorted nonzero instance ids present in a labeled cloud."""
    if not cloud.has_labels:
        return np.zeros(0, dtype=np.int64)
    return np.unique(cloud.instance[cloud.instance > 0]).astype(np.int64)


def paste_instances(
    org: MultiModalSample,
    donor: MultiModalSample,
    spec: CylGridSpec,
    s: int,
    transforms: list[InstanceTransform] | None = None,
    instance_ids: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[MultiModalSample, np.ndarray, dict[int, np.ndarray]]:
    """Paste `s` donor instances into the original sample.

    Donor points keep their semantic labels and get fresh instance ids; voxels
    covered by the transformed instances replace the original content, and the
    paired image rectangles are copied from the donor images. Transformed
    points falling outside the grid range are range-cropped, and a transform
    may legally move an instance out of every camera frustum (it then simply
    gets no image pairing). Returns the new sample, the paste mask, and the
    swapped rectangles per camera.
    """
    avail = donor_instance_ids(donor.cloud)
    if s > len(avail):
        raise InsufficientInstancesError(f"requested {s} instances, donor has {len(avail)}")
    if instance_ids is None:
        if rng is not None:
            instance_ids = rng.choice(avail, size=s, replace=False)
        else:
            instance_ids = avail[:s]
    if transforms is None:
        transforms = [InstanceTransform.identity()] * len(instance_ids)
    if len(transforms) != len(instance_ids):
        raise ValueError("one transform per pasted instance")
    if s == 0:
        return (
            MultiModalSample(org.cloud, org.copy_images(), org.cams),
            np.zeros(spec.shape, dtype=bool),
            {cam_id: np.zeros((0, 4), dtype=np.int32) for cam_id in range(len(org.cams))},
        )

    pieces = []
    for inst_id, t in zip(instance_ids, transforms):
        idx = np.flatnonzero(donor.cloud.instance == inst_id)
        part = donor.cloud.select(idx)
        part.xyz = transform_instance(part.xyz, t).astype(np.float32)
        pieces.append(part)
    paste_cloud = PointCloud.concat(pieces)
    paste_cloud.source = np.ones(len(paste_cloud), dtype=np.uint8)

    paste_grid = pair_voxel_image(voxelize(paste_cloud, spec), donor.cams)
    mask = np.zeros(spec.shape, dtype=bool)
    mask.reshape(-1)[paste_grid.voxel_ids] = True

    org_grid = voxelize(org.cloud, spec)
    mixed = apply_mix(org_grid, paste_grid, mask)
    images, rects = sync_image_swap(org.images, donor.images, mask, paste_grid.pairings)
    return MultiModalSample(mixed.cloud, images, org.cams), mask, rects


@dataclass
class AugResult:
    """Augmented sample plus the bookkeeping needed by provenance checks.

    `masks` holds the per-strategy selection masks in the bin space that
    existed when each strategy ran (before the global transform); the final
    grid's per-voxel tags are re-derived from per-point provenance after the
    transform, and `global_transform` maps old points to new ones.
    """

    sample: MultiModalSample
    grid: CylGrid
    applied: dict[str, bool]
    masks: dict[str, np.ndarray] = field(default_factory=dict)
    swapped_rects: dict[int, np.ndarray] = field(default_factory=dict)
    global_transform: np.ndarray = field(default_factory=lambda: np.eye(3))


def _merge_rects(acc: dict[int, np.ndarray], extra: dict[int, np.ndarray]):
    for cam_id, rects in extra.items():
        if cam_id in acc and len(acc[cam_id]):
            acc[cam_id] = np.concatenate([acc[cam_id], rects])
        else:
            acc[cam_id] = rects


def _scene_swap(work, new, spec, axis, splits, rects_acc, masks, new_pairings):
    n_bins = {"angle": spec.theta_bins, "height": spec.z_bins}[axis]
    selected = alternating_slices(n_bins, splits)
    mask = scene_swap_mask(axis, selected, spec)
    work_grid = voxelize(work.cloud, spec)
    mixed = apply_mix(work_grid, _new_grid_for(new, spec, new_pairings), mask)
    images, rects = sync_image_swap(work.images, new.images, mask, new_pairings)
    _merge_rects(rects_acc, rects)
    masks[axis] = mask
    return MultiModalSample(mixed.cloud, images, work.cams)


def _new_grid_for(new: MultiModalSample, spec: CylGridSpec, pairings) -> CylGrid:
    grid = voxelize(new.cloud, spec)
    grid.pairings = pairings
    return grid


def augment(
    org: MultiModalSample,
    new: MultiModalSample,
    spec: CylGridSpec,
    cfg: AugConfig,
) -> AugResult:
    """Run the full augmentation pipeline with seeded randomness.

    Instance pasting, height swapping, and angle swapping are applied with
    their configured probabilities (independently by default, or as one
    categorical draw), then the global rotation/flip/scale is applied to the
    merged cloud with the camera extrinsics adjusted by the inverse transform
    so projection geometry is unchanged. Deterministic given cfg.rng_seed.
    """
    if len(org.cams) != len(new.cams):
        raise SpecMismatchError("samples must share the camera rig structure")
    rng = np.random.default_rng(cfg.rng_seed)

    if cfg.strategy_mode == "independent":
        u = rng.random(3)
        do_paste = u[0] < cfg.p_instance
        do_height = u[1] < cfg.p_height_swap
        do_angle = u[2] < cfg.p_angle_swap
    else:
        u = rng.random()
        do_paste = u < cfg.p_instance
        do_height = cfg.p_instance <= u < cfg.p_instance + cfg.p_height_swap
        do_angle = (
            cfg.p_instance + cfg.p_height_swap
            <= u
            < cfg.p_instance + cfg.p_height_swap + cfg.p_angle_swap
        )

    work = MultiModalSample(
        PointCloud(org.cloud.xyz, org.cloud.intensity, org.cloud.semantic, org.cloud.instance),
        org.copy_images(),
        org.cams,
    )
    new_cloud = PointCloud(
        new.cloud.xyz,
        new.cloud.intensity,
        new.cloud.semantic,
        new.cloud.instance,
        np.ones(len(new.cloud), dtype=np.uint8),
    )
    new_work = MultiModalSample(new_cloud, new.images, new.cams)

    applied = {"instance": False, "height": False, "angle": False}
    masks: dict[str, np.ndarray] = {}
    rects_acc: dict[int, np.ndarray] = {}
    new_pairings = None

    if do_paste:
        lo, hi = cfg.instance_count_range
        s = int(rng.integers(lo, hi + 1))
        avail = donor_instance_ids(new_work.cloud)
        s = min(s, len(avail))
        if s > 0:
            ids = rng.choice(avail, size=s, replace=False)
            transforms = [
                InstanceTransform(
                    np.array([
                        rng.uniform(-cfg.paste_translation, cfg.paste_translation),
                        rng.uniform(-cfg.paste_translation, cfg.paste_translation),
                        0.0,
                    ]),
                    rng.uniform(-cfg.paste_rotation, cfg.paste_rotation),
                    rng.uniform(*cfg.paste_scale_range),
                )
                for _ in range(s)
            ]
            work, mask, rects = paste_instances(
                work, new_work, spec, s, transforms=transforms, instance_ids=ids
            )
            applied["instance"] = True
            masks["instance"] = mask
            _merge_rects(rects_acc, rects)

    if do_height or do_angle:
        new_pairings = pair_voxel_image(voxelize(new_work.cloud, spec), new_work.cams).pairings
    if do_height:
        splits = int(rng.choice(np.asarray(cfg.split_choices)))
        work = _scene_swap(work, new_work, spec, "height", splits, rects_acc, masks, new_pairings)
        applied["height"] = True
    if do_angle:
        splits = int(rng.choice(np.asarray(cfg.split_choices)))
        work = _scene_swap(work, new_work, spec, "angle", splits, rects_acc, masks, new_pairings)
        applied["angle"] = True

    # Global transforms; draws always consume the stream so seeds stay aligned.
    angle = rng.uniform(-cfg.rotation_range, cfg.rotation_range)
    flip = rng.random() < cfg.flip_prob
    scale = rng.uniform(*cfg.scale_range)
    A = similarity_matrix(angle, flip, scale)
    identity = angle == 0.0 and not flip and scale == 1.0
    if not identity:
        cloud = work.cloud
        cloud.xyz = (cloud.xyz.astype(np.float64) @ A.T).astype(np.float32)
        cams = [transform_camera(c, A) for c in work.cams]
        work = MultiModalSample(cloud, work.images, cams)

    final_grid = pair_voxel_image(voxelize(work.cloud, spec), work.cams)
    return AugResult(work, final_grid, applied, masks, rects_acc, A)
