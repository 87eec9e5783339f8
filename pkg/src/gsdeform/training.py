"""Losses, timestamp-aware density control and the optimisation loop."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .data import Dataset, load_dnerf_dataset, to_uint8
from .deformation import (
    MIN_SCALE,
    DeformationModel,
    DeformationOutput,
    DeformedGaussians,
    apply_deformation,
    residual_rotation,
)
from .errors import ContractError, DataError, NumericError, ParameterError
from .gaussians import GaussianCloud, matrix_to_rot6d
from .metrics import _check_pair, psnr, ssim_torch
from .nn import AdamState, ExponentialLR, adam_step, load_module_tensors, load_weights, save_weights
from .rasterizer import Camera, project, rasterize, screen_grad_norm

log = logging.getLogger(__name__)

SPLIT_FACTOR = 1.6


# -- losses ----------------------------------------------------------------


@dataclass
class LossReport:
    l1: float
    d_ssim: float
    motion: float
    total: float
    lam: float = 0.2
    omega: float = 0.01


def photometric_loss(render: torch.Tensor, target: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean absolute error and ``1 - SSIM``, both differentiable."""
    _check_pair(render, target)
    l1 = (render - target).abs().mean()
    d_ssim = 1.0 - ssim_torch(render, target)
    return l1, d_ssim


def motion_loss(dx: torch.Tensor) -> torch.Tensor:
    return dx.abs().mean() if dx.numel() else dx.new_zeros(())


def total_loss(l1, d_ssim, motion, lam: float = 0.2, omega: float = 0.01):
    return (1.0 - lam) * l1 + lam * d_ssim + omega * motion


# -- configuration -----------------------------------------------------------


@dataclass
class TrainConfig:
    iterations: int = 3000
    warmup: int = -1  # -1: iterations * 3000 / 40000
    seed: int = 0
    precision: int = 64
    background: str = "1,1,1"
    sh_degree: int = 1
    n_init: int = 2000
    init_extent: float = 1.3
    init_opacity: float = 0.1
    grid_size: float = 0.0  # 0: initial bounding-box diagonal / 64
    use_geometry: bool = True
    lam: float = 0.2
    omega: float = 0.01
    densify_grad: float = 2e-4
    densify_opacity: float = 0.005
    densify_scale: float = 0.01  # fraction of scene extent
    densify_interval: int = 100
    densify_from: int = 500
    densify_until: int = -1  # -1: iterations * 15000 / 40000
    max_gaussians: int = 5000
    lr_position_init: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_sh: float = 2.5e-3
    lr_opacity: float = 0.05
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_net_init: float = 8e-4
    lr_net_final: float = 1.6e-6
    eval_interval: int = 100
    checkpoint_interval: int = 0  # 0: only the final checkpoint

    @property
    def warmup_iters(self) -> int:
        if self.warmup >= 0:
            return self.warmup
        return int(round(self.iterations * 3000 / 40000))

    @property
    def densify_stop(self) -> int:
        if self.densify_until >= 0:
            return self.densify_until
        return int(round(self.iterations * 15000 / 40000))

    @property
    def dtype(self) -> torch.dtype:
        if self.precision not in (32, 64):
            raise ParameterError(f"precision must be 32 or 64, got {self.precision}")
        return torch.float64 if self.precision == 64 else torch.float32

    @property
    def background_rgb(self) -> tuple[float, float, float]:
        return parse_background(self.background)

    def validate(self) -> "TrainConfig":
        _ = (self.dtype, self.background_rgb)  # both raise on bad values
        if self.iterations < 0:
            raise ParameterError(f"iterations must be >= 0, got {self.iterations}")
        if self.sh_degree not in (0, 1, 2, 3):
            raise ParameterError(f"sh_degree must be 0..3, got {self.sh_degree}")
        for name in ("n_init", "densify_interval", "max_gaussians"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be positive")
        for name in ("lam", "densify_opacity"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1]")
        return self

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]


def parse_background(value) -> tuple[float, float, float]:
    if isinstance(value, str):
        named = {"white": (1.0, 1.0, 1.0), "black": (0.0, 0.0, 0.0)}
        if value.lower() in named:
            return named[value.lower()]
        parts = [float(p) for p in value.split(",")]
    else:
        parts = [float(p) for p in value]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise ParameterError(f"background needs 1 or 3 components, got {value!r}")
    return tuple(parts)


def coerce(field_type, raw: str):
    if field_type in (bool, "bool"):
        if isinstance(raw, bool):
            return raw
        lowered = str(raw).strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ParameterError(f"not a boolean: {raw!r}")
    if field_type in (int, "int"):
        return int(float(raw)) if isinstance(raw, str) and "e" in raw.lower() else int(raw)
    if field_type in (float, "float"):
        return float(raw)
    return str(raw)


CONFIG_ALIASES = {"lambda": "lam"}


def parse_config_text(text: str, allowed: dict[str, object]) -> dict[str, object]:
    """Parse ``key = value`` lines (``#`` comments); unknown keys are rejected.

    ``lambda`` is accepted as a spelling of ``lam``.
    """
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = CONFIG_ALIASES.get(key, key)
        if key not in allowed:
            raise ParameterError(f"line {lineno}: unknown config key {key!r}")
        out[key] = coerce(allowed[key], value)
    return out


def config_from_dict(values: dict) -> TrainConfig:
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    unknown = set(values) - set(types)
    if unknown:
        raise ParameterError(f"unknown config keys: {sorted(unknown)}")
    return TrainConfig(**{k: coerce(types[k], v) for k, v in values.items()})


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {getattr(cfg, k)}\n" for k in TrainConfig.keys())


# -- density statistics ---------------------------------------------------------


@dataclass
class DensifyStats:
    grad_accum: torch.Tensor
    obs_count: torch.Tensor
    max_scale_t: torch.Tensor

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(torch.zeros(n, dtype=torch.float64), torch.zeros(n, dtype=torch.float64), torch.zeros(n, dtype=torch.float64))

    def __len__(self) -> int:
        return self.grad_accum.shape[0]

    def record(self, grad_norm: torch.Tensor, visible: torch.Tensor, scales_t: torch.Tensor) -> None:
        self.grad_accum[visible] += grad_norm[visible].to(torch.float64)
        self.obs_count[visible] += 1
        current = scales_t.detach().max(dim=1).values.to(torch.float64)
        self.max_scale_t[visible] = torch.maximum(self.max_scale_t[visible], current[visible])

    def mean_grad(self) -> torch.Tensor:
        return torch.where(self.obs_count > 0, self.grad_accum / self.obs_count.clamp_min(1), torch.zeros_like(self.grad_accum))


@dataclass
class DensifyResult:
    cloud: GaussianCloud
    stats: DensifyStats
    cloned: int = 0
    split: int = 0
    pruned: int = 0
    dropped: int = 0
    keep: torch.Tensor | None = None  # surviving original rows, in order
    n_new: int = 0  # rows appended after the survivors


def sample_split_children(g: DeformedGaussians, rows: torch.Tensor, generator: torch.Generator, n_children: int = 2):
    """Draw children from each deformed Gaussian in ``rows`` treated as a PDF.

    Returns timestamp-space positions, scales (divided by 1.6) and rotations,
    parent-major: children of ``rows[0]`` first.
    """
    rows = rows.repeat_interleave(n_children)
    R = g.rotations[rows].detach()
    s = g.scales[rows].detach()
    eps = torch.randn(rows.shape[0], 3, generator=generator, dtype=torch.float64).to(s.dtype)
    x = g.positions[rows].detach() + (R @ (s * eps).unsqueeze(-1)).squeeze(-1)
    return x, s / SPLIT_FACTOR, R, rows


def invert_to_canonical(x_t, s_t, R_t, d: DeformationOutput):
    """Undo ``apply_deformation`` row by row.

    Returns canonical positions, scales, 6D rotations and a mask of rows
    whose canonical scale stayed positive.
    """
    x_c = x_t - d.dx
    s_c = s_t - d.ds
    R_res = residual_rotation(d.dr6)
    R_c = R_res.transpose(-1, -2) @ R_t
    ok = (s_c > 0).all(dim=1) & torch.isfinite(s_c).all(dim=1)
    return x_c, s_c, matrix_to_rot6d(R_c), ok


def density_control(
    cloud: GaussianCloud,
    deformation: DeformationOutput | None,
    stats: DensifyStats,
    cfg: TrainConfig,
    scene_extent: float,
    generator: torch.Generator,
    prune: bool = True,
) -> DensifyResult:
    """Clone / split on timestamp-space attributes, map children back to canonical space, prune.

    ``deformation`` is the field evaluated for the whole cloud at the current
    timestamp (``None`` means the identity, e.g. during warm-up).
    """
    n = len(cloud)
    if len(stats) != n:
        raise ContractError(f"stats track {len(stats)} Gaussians, cloud has {n}")
    dtype = cloud.dtype
    if deformation is None:
        deformation = DeformationOutput.zeros(n, dtype)
    with torch.no_grad():
        d = DeformationOutput(deformation.dx.detach(), deformation.dr6.detach(), deformation.ds.detach())
        g = apply_deformation(cloud.replace(), d)
        grads = stats.mean_grad()
        qualify = grads > cfg.densify_grad
        big = stats.max_scale_t > cfg.densify_scale * scene_extent
        # a clamped deformed scale cannot be inverted to canonical space
        invertible = (g.scales > MIN_SCALE).all(dim=1)
        clone_rows = torch.nonzero(qualify & ~big).reshape(-1)
        split_rows = torch.nonzero(qualify & big & invertible).reshape(-1)

        budget = max(cfg.max_gaussians - n, 0)
        if clone_rows.numel() + split_rows.numel() > budget:
            # split adds one net row, clone adds one; keep the strongest gradients
            cand = torch.cat([clone_rows, split_rows])
            order = torch.argsort(grads[cand], descending=True, stable=True)[:budget]
            chosen = torch.zeros(n, dtype=torch.bool)
            chosen[cand[order]] = True
            clone_rows = clone_rows[chosen[clone_rows]]
            split_rows = split_rows[chosen[split_rows]]

        state = cloud.state()
        new_parts = {k: [] for k in state}
        # clones: exact canonical copies
        for k, v in state.items():
            new_parts[k].append(v[clone_rows])

        dropped = 0
        if split_rows.numel():
            x_t, s_t, R_t, parent = sample_split_children(g, split_rows, generator)
            x_c, s_c, r6_c, ok = invert_to_canonical(x_t, s_t, R_t, d.select(parent))
            dropped = int((~ok).sum())
            parent = parent[ok]
            new_parts["positions"].append(x_c[ok])
            new_parts["rot6d"].append(r6_c[ok])
            new_parts["log_scales"].append(torch.log(s_c[ok]))
            new_parts["opacity_logits"].append(state["opacity_logits"][parent])
            new_parts["sh"].append(state["sh"][parent])

        keep = torch.ones(n, dtype=torch.bool)
        keep[split_rows] = False
        merged = {k: torch.cat([v[keep]] + new_parts[k]) for k, v in state.items()}
        n_new = merged["positions"].shape[0] - int(keep.sum())
        survivors = torch.nonzero(keep).reshape(-1)

        pruned = 0
        if prune:
            alive = torch.sigmoid(merged["opacity_logits"]) >= cfg.densify_opacity
            pruned = int((~alive).sum())
            merged = {k: v[alive] for k, v in merged.items()}
            n_keep = survivors.shape[0]
            survivors = survivors[alive[:n_keep]]
            n_new = int(alive[n_keep:].sum())
    new_cloud = GaussianCloud(**{k: v.clone() for k, v in merged.items()})
    return DensifyResult(
        new_cloud,
        DensifyStats.zeros(len(new_cloud)),
        cloned=int(clone_rows.numel()),
        split=int(split_rows.numel()),
        pruned=pruned,
        dropped=dropped,
        keep=survivors,
        n_new=n_new,
    )


def remap_optimizer(state: AdamState, prefix: str, keep: torch.Tensor, n_new: int) -> None:
    """Compact moments to surviving rows and append zeros for new rows."""
    for name in list(state.m):
        if name.startswith(prefix):
            state.compact(name, keep)
            state.extend(name, n_new)


# -- training loop ---------------------------------------------------------------


def scene_extent_from_cameras(cameras: list[Camera]) -> float:
    centers = np.stack([c.center for c in cameras])
    mid = centers.mean(axis=0)
    return float(np.linalg.norm(centers - mid, axis=1).max() * 1.1) or 1.0


def frame_hash(image) -> str:
    return hashlib.sha256(to_uint8(image).tobytes()).hexdigest()


@dataclass
class StepRecord:
    iteration: int
    t: float
    loss: LossReport
    psnr: float
    num_gaussians: int


class Trainer:
    """Owns the cloud, the deformation model, both optimisers and the stats."""

    def __init__(self, dataset: Dataset, cfg: TrainConfig, init_cloud: GaussianCloud | None = None):
        self.cfg = cfg.validate()
        self.dataset = dataset
        self.frames = dataset.train
        if not self.frames:
            raise ParameterError("dataset has no training frames")
        self.dtype = cfg.dtype
        self.background = cfg.background_rgb
        self.scene_extent = scene_extent_from_cameras([f.camera for f in self.frames])
        self.targets = [torch.as_tensor(f.image, dtype=self.dtype) for f in self.frames]
        rng = np.random.default_rng(cfg.seed)
        if init_cloud is None:
            if dataset.points is not None:
                init_cloud = GaussianCloud.from_points(
                    dataset.points, cfg.sh_degree, init_opacity=cfg.init_opacity, dtype=self.dtype
                )
            else:
                pts = rng.uniform(-cfg.init_extent, cfg.init_extent, size=(cfg.n_init, 3))
                colors = rng.uniform(0.0, 1.0, size=(cfg.n_init, 3))
                init_cloud = GaussianCloud.from_points(
                    pts, cfg.sh_degree, colors=colors, init_opacity=cfg.init_opacity, dtype=self.dtype
                )
        self.cloud = init_cloud.to(self.dtype)
        grid = cfg.grid_size
        if grid <= 0:
            pos = self.cloud.positions.detach()
            diag = float(torch.linalg.vector_norm(pos.max(0).values - pos.min(0).values))
            grid = max(diag, 1e-6) / 64.0
        self.grid_size = grid
        gen = torch.Generator().manual_seed(cfg.seed)
        self.model = DeformationModel(grid, use_geometry=cfg.use_geometry, generator=gen, dtype=self.dtype)
        self.cloud_opt = self._cloud_optimizer()
        self.net_opt = AdamState(
            {name: ExponentialLR(cfg.lr_net_init, cfg.lr_net_final, max(cfg.iterations - cfg.warmup_iters, 1))
             for name in self.net_params()},
            eps=1e-8,
        )
        self.stats = DensifyStats.zeros(len(self.cloud))
        self.iteration = 0
        self.history: list[StepRecord] = []
        self.density_log: list[dict] = []

    def _cloud_optimizer(self) -> AdamState:
        cfg, e = self.cfg, self.scene_extent
        return AdamState(
            {
                "cloud.positions": ExponentialLR(cfg.lr_position_init * e, cfg.lr_position_final * e, cfg.iterations),
                "cloud.rot6d": ExponentialLR(cfg.lr_rotation, cfg.lr_rotation, 1),
                "cloud.log_scales": ExponentialLR(cfg.lr_scale, cfg.lr_scale, 1),
                "cloud.opacity_logits": ExponentialLR(cfg.lr_opacity, cfg.lr_opacity, 1),
                "cloud.sh": ExponentialLR(cfg.lr_sh, cfg.lr_sh, 1),
            }
        )

    def net_params(self) -> dict[str, torch.Tensor]:
        return {f"net.{k}": p for k, p in self.model.named_parameters()}

    # -- rendering -----------------------------------------------------------------

    def deformed(self, t: float, warm: bool | None = None):
        """Gaussians at time ``t``; warm-up (or ``warm=True``) skips the network."""
        if warm is None:
            warm = self.iteration < self.cfg.warmup_iters
        if warm:
            return DeformedGaussians.canonical(self.cloud), None
        return self.model(self.cloud, t)

    def render(self, cam: Camera, t: float, warm: bool | None = None, tile_size=16):
        g, d = self.deformed(t, warm)
        splats = project(g, cam)
        return rasterize(splats, cam, self.background, tile_size), g, d

    @torch.no_grad()
    def render_image(self, cam: Camera, t: float, warm: bool | None = None) -> np.ndarray:
        result, _, _ = self.render(cam, t, warm)
        return result.image.detach().to(torch.float64).numpy()

    # -- optimisation --------------------------------------------------------------

    def frame_index(self, iteration: int) -> int:
        return int(np.random.default_rng([self.cfg.seed, iteration]).integers(len(self.frames)))

    def loss_for(self, frame_idx: int):
        frame = self.frames[frame_idx]
        result, g, d = self.render(frame.camera, frame.t)
        l1, d_ssim = photometric_loss(result.image, self.targets[frame_idx])
        motion = motion_loss(d.dx) if d is not None else l1.new_zeros(())
        total = total_loss(l1, d_ssim, motion, self.cfg.lam, self.cfg.omega)
        return total, (l1, d_ssim, motion), result, g, d

    def step(self) -> StepRecord:
        cfg = self.cfg
        it = self.iteration
        warm = it < cfg.warmup_iters
        idx = self.frame_index(it)
        frame = self.frames[idx]
        total, (l1, d_ssim, motion), result, g, d = self.loss_for(idx)
        if not torch.isfinite(total):
            lr = self.cloud_opt.lr("cloud.positions")
            raise NumericError(f"non-finite loss at iteration {it} (position lr {lr:.3g})")

        cloud_params = self.cloud.parameters()
        net_params = {} if warm else self.net_params()
        names = list(cloud_params) + list(net_params)
        tensors = list(cloud_params.values()) + list(net_params.values())
        mean2d = result.splats.mean2d
        inputs = tensors + ([mean2d] if mean2d.requires_grad else [])
        grads = torch.autograd.grad(total, inputs, allow_unused=True)
        grad_map = {n: (torch.zeros_like(p) if gr is None else gr) for n, p, gr in zip(names, tensors, grads)}
        try:
            adam_step(self.cloud_opt, cloud_params, grad_map)
            if net_params:
                adam_step(self.net_opt, net_params, grad_map)
        except NumericError as exc:
            raise NumericError(f"iteration {it}: {exc} (position lr {self.cloud_opt.lr('cloud.positions'):.3g})") from exc

        with torch.no_grad():
            if mean2d.requires_grad and grads[-1] is not None:
                norms = screen_grad_norm(grads[-1], result.splats, frame.camera.width, frame.camera.height)
                visible = torch.zeros(len(self.cloud), dtype=torch.bool)
                visible[result.splats.index] = True
                self.stats.record(norms, visible, g.scales)

        report = LossReport(*(float(v.detach()) for v in (l1, d_ssim, motion, total)), cfg.lam, cfg.omega)
        image = result.image.detach()
        rec = StepRecord(it, frame.t, report, psnr(image.to(torch.float64), self.targets[idx].to(torch.float64)), len(self.cloud))
        self.iteration += 1

        if cfg.densify_from <= self.iteration < cfg.densify_stop and self.iteration % cfg.densify_interval == 0:
            self.densify(frame.t)
        return rec

    def densify(self, t: float) -> DensifyResult:
        warm = self.iteration <= self.cfg.warmup_iters
        with torch.no_grad():
            d = None if warm else self.model.deformation(self.cloud, t)
        gen = torch.Generator().manual_seed(self.cfg.seed * 1_000_003 + self.iteration)
        res = density_control(self.cloud, d, self.stats, self.cfg, self.scene_extent, gen)
        remap_optimizer(self.cloud_opt, "cloud.", res.keep, res.n_new)
        self.cloud = res.cloud
        self.stats = res.stats
        self.model.encoder.invalidate()
        entry = {"iteration": self.iteration, "cloned": res.cloned, "split": res.split,
                 "pruned": res.pruned, "dropped": res.dropped, "num_gaussians": len(self.cloud)}
        self.density_log.append(entry)
        log.debug("density control %s", entry)
        return res

    def train(self, iterations: int | None = None, callback: Callable[[StepRecord], None] | None = None):
        end = self.cfg.iterations if iterations is None else self.iteration + iterations
        while self.iteration < end:
            rec = self.step()
            self.history.append(rec)
            if callback is not None:
                callback(rec)
        return self.history

    # -- checkpoints ---------------------------------------------------------------

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tensors = {}
        tensors.update(self.cloud.parameters())
        tensors.update(self.net_params())
        for tag, opt in (("cloud", self.cloud_opt), ("net", self.net_opt)):
            for name in opt.m:
                tensors[f"adam.{tag}.m.{name}"] = opt.m[name]
                tensors[f"adam.{tag}.v.{name}"] = opt.v[name]
        for k in ("grad_accum", "obs_count", "max_scale_t"):
            tensors[f"stats.{k}"] = getattr(self.stats, k)
        anchor = self.model.encoder.anchor
        if anchor is not None:
            tensors["encoder.anchor"] = anchor
        if self.model.encoder.frame is not None:
            tensors["encoder.frame"] = self.model.encoder.frame
        save_weights(path, tensors)
        meta = {
            "iteration": self.iteration,
            "config": dataclasses.asdict(self.cfg),
            "grid_size": self.grid_size,
            "scene_extent": self.scene_extent,
            "cloud_opt_step": self.cloud_opt.step,
            "net_opt_step": self.net_opt.step,
            "resolution": [self.frames[0].camera.height, self.frames[0].camera.width],
            "data_root": str(Path(self.dataset.root).resolve()) if self.dataset.root is not None else None,
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
        return path

    @classmethod
    def load(cls, path, dataset: Dataset | None = None, overrides: dict | None = None) -> "Trainer":
        """Restore a checkpoint; ``dataset=None`` reloads the dataset recorded in it."""
        path = Path(path)
        meta = read_checkpoint_meta(path)
        if dataset is None:
            if not meta.get("data_root"):
                raise DataError(f"{path} records no dataset directory; pass one explicitly")
            dataset = load_dnerf_dataset(meta["data_root"])
        check_resolution(meta, dataset)
        cfg_values = dict(meta["config"])
        cfg_values.update(overrides or {})
        cfg = config_from_dict(cfg_values)
        weights = load_weights(path)
        cloud = cloud_from_weights(weights, cfg.dtype)
        trainer = cls(dataset, dataclasses.replace(cfg, grid_size=meta["grid_size"]), init_cloud=cloud)
        trainer.scene_extent = meta["scene_extent"]
        trainer.cloud_opt = trainer._cloud_optimizer()
        load_module_tensors("net", trainer.model, weights)
        for tag, opt in (("cloud", trainer.cloud_opt), ("net", trainer.net_opt)):
            for name in opt.schedules:
                key_m, key_v = f"adam.{tag}.m.{name}", f"adam.{tag}.v.{name}"
                if key_m in weights:
                    opt.m[name] = torch.as_tensor(weights[key_m], dtype=trainer.dtype)
                    opt.v[name] = torch.as_tensor(weights[key_v], dtype=trainer.dtype)
        trainer.cloud_opt.step = meta["cloud_opt_step"]
        trainer.net_opt.step = meta["net_opt_step"]
        trainer.stats = DensifyStats(
            *(torch.as_tensor(weights[f"stats.{k}"], dtype=torch.float64) for k in ("grad_accum", "obs_count", "max_scale_t"))
        )
        if "encoder.frame" in weights:
            trainer.model.encoder.set_frame(weights["encoder.frame"].astype(np.float64))
        if "encoder.anchor" in weights:
            trainer.model.encoder.set_anchor(torch.as_tensor(weights["encoder.anchor"], dtype=trainer.dtype))
        trainer.iteration = meta["iteration"]
        return trainer


def read_checkpoint_meta(path) -> dict:
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if not path.exists():
        raise DataError(f"checkpoint {path} not found")
    if not sidecar.exists():
        raise DataError(f"checkpoint metadata {sidecar} not found")
    try:
        return json.loads(sidecar.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{sidecar}: malformed JSON ({exc})") from exc


def check_resolution(meta: dict, dataset: Dataset) -> None:
    want = tuple(meta.get("resolution", ()))
    if want and dataset.frames:
        have = dataset.resolution
        if have != want:
            raise DataError(
                f"checkpoint was trained at {want[1]}x{want[0]} but the dataset is {have[1]}x{have[0]}"
            )


def cloud_from_weights(weights: dict[str, np.ndarray], dtype) -> GaussianCloud:
    def get(name):
        return torch.as_tensor(weights[f"cloud.{name}"], dtype=dtype)

    return GaussianCloud(get("positions"), get("rot6d"), get("log_scales"), get("opacity_logits"), get("sh"))


METRICS_HEADER = ["iter", "l1", "d_ssim", "motion", "total", "psnr", "num_gaussians"]


def train_loop(
    dataset: Dataset,
    cfg: TrainConfig | None,
    out_dir,
    resume=None,
    progress: Callable[[StepRecord], None] | None = None,
    overrides: dict | None = None,
) -> Trainer:
    """Train and write checkpoints plus ``metrics.csv`` into ``out_dir``.

    When resuming, the checkpoint's config applies with ``overrides`` on top
    and ``cfg`` is ignored.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume:
        trainer = Trainer.load(resume, dataset, overrides)
        mode = "a"
    else:
        trainer = Trainer(dataset, cfg if cfg is not None else TrainConfig())
        mode = "w"
    (out / "config.txt").write_text(format_config(trainer.cfg))
    metrics_path = out / "metrics.csv"
    if resume and not metrics_path.exists():
        mode = "w"
    with open(metrics_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(METRICS_HEADER)

        def on_step(rec: StepRecord):
            last = rec.iteration + 1 == trainer.cfg.iterations
            if rec.iteration % max(trainer.cfg.eval_interval, 1) == 0 or last:
                r = rec.loss
                writer.writerow([rec.iteration, f"{r.l1:.8g}", f"{r.d_ssim:.8g}", f"{r.motion:.8g}",
                                 f"{r.total:.8g}", f"{rec.psnr:.6g}", rec.num_gaussians])
                fh.flush()
            ck = trainer.cfg.checkpoint_interval
            if ck and trainer.iteration % ck == 0 and trainer.iteration < trainer.cfg.iterations:
                trainer.save(out / f"ckpt_{trainer.iteration:06d}.gsdw")
            if progress is not None:
                progress(rec)

        trainer.train(callback=on_step)
    trainer.save(out / "final.gsdw")
    # hash what the stored (float32) checkpoint renders, not the in-memory state
    write_train_render_hashes(Trainer.load(out / "final.gsdw", dataset), out / "train_renders.json")
    return trainer


def write_train_render_hashes(trainer: Trainer, path) -> None:
    hashes = {}
    for i, frame in enumerate(trainer.frames):
        image = trainer.render_image(frame.camera, frame.t)
        hashes[str(i)] = {"name": frame.name, "t": frame.t, "sha256": frame_hash(image)}
    Path(path).write_text(json.dumps(hashes, indent=2))
