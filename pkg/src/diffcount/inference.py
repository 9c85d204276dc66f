"""Full-image prediction: tiling, per-tile DDIM, stitching, counting, fusion."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .counting import DEFAULT_THRESHOLD, CrowdMap, detect_contours
from .data import standardize
from .diffusion import DEFAULT_SAMPLING_STEPS, ddim_sample
from .fusion import FusionConfig, FusionStep, fuse_steps
from .groundtruth import DEFAULT_SCALE, unscale_density
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

PATCH_SIZE = 256
NUM_REALIZATIONS = 4


@dataclass
class TilePlan:
    """Crop boxes and the disjoint regions each crop writes back.

    Boxes are (x0, y0, x1, y1), half-open. ``tiles`` live in the padded
    frame; ``owned_regions`` live in the original frame and partition it.
    """

    height: int
    width: int
    patch_size: int
    tiles: list[tuple[int, int, int, int]]
    owned_regions: list[tuple[int, int, int, int]]

    @property
    def padded_height(self) -> int:
        return max(self.height, self.patch_size)

    @property
    def padded_width(self) -> int:
        return max(self.width, self.patch_size)


def _axis_plan(length, patch):
    if length <= patch:
        return [0], [(0, length)]
    starts = list(range(0, length - patch + 1, patch))
    owned = [(s, s + patch) for s in starts]
    end = starts[-1] + patch
    if end < length:
        # trailing crop is anchored at the far edge; its overlap is dropped
        starts.append(length - patch)
        owned.append((end, length))
    return starts, owned


def plan_tiles(height: int, width: int, patch_size: int = PATCH_SIZE) -> TilePlan:
    if height < 1 or width < 1:
        raise ValueError(f"image must be at least 1x1, got {height}x{width}")
    if patch_size < 1:
        raise ValueError(f"patch_size must be positive, got {patch_size}")
    ys, own_y = _axis_plan(height, patch_size)
    xs, own_x = _axis_plan(width, patch_size)
    tiles, owned = [], []
    for y0, (oy0, oy1) in zip(ys, own_y):
        for x0, (ox0, ox1) in zip(xs, own_x):
            tiles.append((x0, y0, x0 + patch_size, y0 + patch_size))
            owned.append((ox0, oy0, ox1, oy1))
    return TilePlan(height, width, patch_size, tiles, owned)


def pad_to_plan(image: np.ndarray, plan: TilePlan) -> np.ndarray:
    """Reflect-pad bottom/right so every tile fits; no-op when large enough."""
    ph, pw = plan.padded_height - plan.height, plan.padded_width - plan.width
    if ph == 0 and pw == 0:
        return image
    rest = [(0, 0)] * (image.ndim - 2)
    # a reflect margin must be shorter than its axis, so grow in rounds;
    # a one-pixel axis has nothing to mirror and is repeated instead
    for axis in (0, 1):
        target = plan.padded_height if axis == 0 else plan.padded_width
        while image.shape[axis] < target:
            n = image.shape[axis]
            widths = [(0, 0), (0, 0)] + rest
            widths[axis] = (0, target - n if n == 1 else min(target - n, n - 1))
            image = np.pad(image, widths, mode="edge" if n == 1 else "reflect")
    return image


def extract_tiles(image: np.ndarray, plan: TilePlan) -> list[np.ndarray]:
    padded = pad_to_plan(image, plan)
    return [padded[y0:y1, x0:x1] for x0, y0, x1, y1 in plan.tiles]


def stitch(plan: TilePlan, tile_maps) -> np.ndarray:
    """Write each tile's owned region into the full map."""
    out = np.zeros((plan.height, plan.width), dtype=np.asarray(tile_maps[0]).dtype)
    for (tx0, ty0, _, _), (ox0, oy0, ox1, oy1), tile in zip(plan.tiles, plan.owned_regions, tile_maps):
        out[oy0:oy1, ox0:ox1] = np.asarray(tile)[oy0 - ty0:oy1 - ty0, ox0 - tx0:ox1 - tx0]
    return out


def tile_seed(realization_seed: int, tile_index: int) -> int:
    """Independent, reproducible seed for one (realization, tile) pair."""
    return int(np.random.SeedSequence([int(realization_seed), int(tile_index)]).generate_state(1)[0])


@dataclass
class Prediction:
    density_maps: list[np.ndarray]
    crowd_maps: list[CrowdMap]
    fused: CrowdMap
    count: int
    fusion_steps: list[FusionStep] = field(default_factory=list)

    @property
    def realization_counts(self) -> list[int]:
        return [len(m) for m in self.crowd_maps]

    def summary(self, image: str = "") -> dict:
        return {
            "image": image,
            "realization_counts": self.realization_counts,
            "fused_count": int(self.count),
        }


def sample_density_maps(model, images, schedule: NoiseSchedule, seeds, sampling_steps=DEFAULT_SAMPLING_STEPS,
                        patch_size=PATCH_SIZE, batch_size=32, scale=DEFAULT_SCALE) -> list[list[np.ndarray]]:
    """Stitched unscaled density maps, ``[image][realization]``.

    All tiles of all images and realizations are pooled into shared sampler
    batches; each tile's noise depends only on its own seed.
    """
    jobs = []  # (image index, realization, tile index, plan, standardized tile, seed)
    plans = []
    for i, image in enumerate(images):
        plan = plan_tiles(image.shape[0], image.shape[1], patch_size)
        plans.append(plan)
        tiles = [standardize(t) for t in extract_tiles(image, plan)]
        for r, seed in enumerate(seeds):
            for k, tile in enumerate(tiles):
                jobs.append((i, r, k, tile, tile_seed(seed, k)))
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    outputs = {}
    try:
        for start in range(0, len(jobs), batch_size):
            chunk = jobs[start:start + batch_size]
            y = torch.from_numpy(np.stack([j[3] for j in chunk]))
            try:
                x0 = ddim_sample(model, y, schedule, sampling_steps, seed=[j[4] for j in chunk])
            except Exception as exc:
                where = ", ".join(f"image {j[0]} realization {j[1]} tile {plans[j[0]].tiles[j[2]]}" for j in chunk[:3])
                raise RuntimeError(f"sampling failed for {where}{' ...' if len(chunk) > 3 else ''}") from exc
            for j, out in zip(chunk, x0.double().cpu().numpy()):
                outputs[j[:3]] = unscale_density(out[0], scale)
    finally:
        if was_training:
            model.train()
    result = []
    for i, plan in enumerate(plans):
        per_real = []
        for r in range(len(seeds)):
            per_real.append(stitch(plan, [outputs[(i, r, k)] for k in range(len(plan.tiles))]))
        result.append(per_real)
    return result


def combine(density_maps, threshold=DEFAULT_THRESHOLD, fusion: FusionConfig = FusionConfig()) -> Prediction:
    crowd_maps = [detect_contours(d, threshold) for d in density_maps]
    fused, steps = fuse_steps(crowd_maps, fusion)
    return Prediction(list(density_maps), crowd_maps, fused, len(fused), steps)


def predict_full(model, image, schedule: NoiseSchedule, num_realizations: int = NUM_REALIZATIONS,
                 seeds=None, sampling_steps: int = DEFAULT_SAMPLING_STEPS, patch_size: int = PATCH_SIZE,
                 threshold: float = DEFAULT_THRESHOLD, fusion: FusionConfig = FusionConfig(),
                 batch_size: int = 32) -> Prediction:
    """Sample ``num_realizations`` density maps for one image and fuse their crowd maps.

    ``image`` is H x W x 3 in [0, 1].
    """
    if seeds is None:
        seeds = list(range(num_realizations))
    if len(seeds) != num_realizations:
        raise ValueError(f"need {num_realizations} seeds, got {len(seeds)}")
    maps = sample_density_maps(model, [image], schedule, seeds, sampling_steps, patch_size, batch_size)[0]
    return combine(maps, threshold, fusion)


def predict_many(model, images, schedule: NoiseSchedule, seeds, sampling_steps=DEFAULT_SAMPLING_STEPS,
                 patch_size=PATCH_SIZE, threshold=DEFAULT_THRESHOLD, fusion: FusionConfig = FusionConfig(),
                 batch_size=32) -> list[Prediction]:
    maps = sample_density_maps(model, images, schedule, seeds, sampling_steps, patch_size, batch_size)
    return [combine(m, threshold, fusion) for m in maps]
