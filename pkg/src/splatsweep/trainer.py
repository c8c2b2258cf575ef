"""Photometric fitting of a Gaussian cloud with adaptive density control.

The loop is guidance-agnostic: each step samples a camera, renders, asks a
``GuidanceSource`` for an image-space gradient and back-propagates it into
the splats with per-group Adam updates. The only guidance shipped here is a
photometric oracle over known (camera, image) pairs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from typing import Protocol, Sequence

import numpy as np

from .camera import Camera
from .errors import InvalidParameterError, ShapeError, UnknownCameraError
from .gsmath import GaussianCloud, cloud_covariances
from .metrics import ssim_and_grad
from .rasterizer import DEFAULT_SETTINGS, RasterSettings, RenderOutput, render, render_backward

log = logging.getLogger(__name__)

PARAM_GROUPS = ("positions", "rotations", "log_scales", "opacity_logits", "sh_coeffs")


@dataclass
class TrainConfig:
    lambda_dssim: float = 0.2
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    iterations: int = 5000
    densify_interval: int = 100
    densify_from: int = 100
    densify_until: float = 0.5  # fraction of iterations
    densify_grad_threshold: float = 2e-4
    prune_opacity_threshold: float = 0.005
    split_scale_threshold: float = 0.01  # world units (1% of a unit scene)
    split_factor: float = 1.6
    max_splats: int = 20000
    t_max: float = 0.98
    t_min: float = 0.02
    alpha_weight: float = 0.1
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    log_interval: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidParameterError("iterations must be >= 1")
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise InvalidParameterError("lambda_dssim must be in [0, 1]")
        for name in ("densify_grad_threshold", "prune_opacity_threshold", "split_scale_threshold", "split_factor"):
            if getattr(self, name) <= 0:
                raise InvalidParameterError(f"{name} must be positive")
        if self.densify_interval < 1 or self.max_splats < 1:
            raise InvalidParameterError("densify_interval and max_splats must be >= 1")

    def learning_rates(self, iteration: int) -> dict[str, float]:
        frac = min(iteration / max(self.iterations - 1, 1), 1.0)
        lr_pos = self.lr_position * (self.lr_position_final / self.lr_position) ** frac
        return {
            "positions": lr_pos,
            "rotations": self.lr_rotation,
            "log_scales": self.lr_scale,
            "opacity_logits": self.lr_opacity,
            "sh_coeffs": self.lr_sh,
        }


@dataclass
class Adam:
    """Per-group first/second moment estimates with bias correction."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    @classmethod
    def for_cloud(cls, cloud: GaussianCloud) -> Adam:
        params = cloud.param_dict()
        return cls(m={k: np.zeros_like(v) for k, v in params.items()}, v={k: np.zeros_like(v) for k, v in params.items()})

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lrs: dict[str, float]) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for k, p in params.items():
            g = grads[k]
            self.m[k] *= self.beta1
            self.m[k] += (1.0 - self.beta1) * g
            self.v[k] *= self.beta2
            self.v[k] += (1.0 - self.beta2) * g * g
            p -= (lrs[k] / bc1) * self.m[k] / (np.sqrt(self.v[k] / bc2) + self.eps)

    def select(self, index) -> Adam:
        return replace(self, m={k: v[index] for k, v in self.m.items()}, v={k: v[index] for k, v in self.v.items()})

    def extend(self, n_new: int) -> Adam:
        def pad(a):
            return np.concatenate([a, np.zeros((n_new,) + a.shape[1:])])

        return replace(self, m={k: pad(v) for k, v in self.m.items()}, v={k: pad(v) for k, v in self.v.items()})


@dataclass(frozen=True)
class DensifyReport:
    iteration: int
    pruned: int
    cloned: int
    split: int
    size: int
    min_opacity: float


@dataclass
class TrainState:
    cloud: GaussianCloud
    optimizer: Adam
    grad2d_accum: np.ndarray  # summed |d loss / d NDC mean| per splat
    grad_pos_accum: np.ndarray  # summed world-space position gradient, (N, 3)
    grad_count: np.ndarray  # number of views in which the splat was visible
    rng: np.random.Generator
    iteration: int = 0
    skipped_steps: int = 0
    history: list[dict] = field(default_factory=list)
    densify_events: list[DensifyReport] = field(default_factory=list)

    @classmethod
    def initial(cls, cloud: GaussianCloud, seed: int = 0) -> TrainState:
        n = len(cloud)
        return cls(
            cloud.copy(),
            Adam.for_cloud(cloud),
            np.zeros(n),
            np.zeros((n, 3)),
            np.zeros(n, dtype=np.int64),
            np.random.default_rng(seed),
        )


@dataclass
class GuidanceResult:
    grad_rgb: np.ndarray
    grad_alpha: np.ndarray | None
    loss: float


class GuidanceSource(Protocol):
    """Anything that turns a render into an image-space gradient.

    A diffusion-based score-distillation source would implement the same two
    methods; ``restore`` is what texture refinement uses to get a clean target
    from a noise-perturbed render.
    """

    def __call__(self, render: RenderOutput, camera: Camera, timestep: float) -> GuidanceResult: ...

    def restore(self, image: np.ndarray, camera: Camera, timestep: float) -> np.ndarray: ...


def loss_l1_dssim(rendered, target, lam: float) -> tuple[float, np.ndarray]:
    """``(1 - lam) * L1 + lam * (1 - SSIM) / 2`` and its gradient w.r.t. ``rendered``."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ShapeError(f"rendered {rendered.shape} and target {target.shape} differ")
    diff = rendered - target
    n = diff.size
    loss = (1.0 - lam) * float(np.abs(diff).mean())
    grad = (1.0 - lam) * np.sign(diff) / n
    if lam > 0.0:
        s, gs = ssim_and_grad(rendered, target)
        loss += lam * (1.0 - s) / 2.0
        grad -= lam * gs / 2.0
    return loss, grad


class PhotometricGuidance:
    """Compares renders against stored images at exactly matching poses."""

    def __init__(self, views: Sequence[tuple[Camera, np.ndarray, np.ndarray | None]], lam: float = 0.2,
                 alpha_weight: float = 0.1):
        if not views:
            raise InvalidParameterError("photometric guidance needs at least one view")
        self.lam = lam
        self.alpha_weight = alpha_weight
        self._views = {}
        for view in views:
            cam, rgb = view[0], view[1]
            alpha = view[2] if len(view) > 2 else None
            self._views[cam.pose_key()] = (np.asarray(rgb, dtype=np.float64), None if alpha is None else np.asarray(alpha, dtype=np.float64))
        self.cameras = [v[0] for v in views]

    def target(self, camera: Camera) -> tuple[np.ndarray, np.ndarray | None]:
        try:
            return self._views[camera.pose_key()]
        except KeyError:
            raise UnknownCameraError(f"no guidance view registered for camera at {camera.position.tolist()}") from None

    def __call__(self, render: RenderOutput, camera: Camera, timestep: float) -> GuidanceResult:
        rgb, alpha = self.target(camera)
        loss, grad = loss_l1_dssim(render.rgb, rgb, self.lam)
        grad_alpha = None
        if alpha is not None and self.alpha_weight > 0:
            diff = render.alpha - alpha
            loss += self.alpha_weight * float(np.abs(diff).mean())
            grad_alpha = self.alpha_weight * np.sign(diff) / diff.size
        return GuidanceResult(grad, grad_alpha, loss)

    def restore(self, image: np.ndarray, camera: Camera, timestep: float) -> np.ndarray:
        return self.target(camera)[0]


def photometric_guidance(views, lam: float = 0.2, alpha_weight: float = 0.1) -> PhotometricGuidance:
    return PhotometricGuidance(views, lam, alpha_weight)


def timestep_schedule(iteration: int, total: int, t_max: float, t_min: float) -> float:
    """Linearly decreasing timestep: ``t_max`` at iteration 0, ``t_min`` at the last."""
    if total <= 1:
        return t_max
    if not 0 <= iteration < total:
        raise InvalidParameterError(f"iteration {iteration} outside [0, {total})")
    f = iteration / (total - 1)
    # weighted form so both endpoints come out exactly
    return t_max * (1.0 - f) + t_min * f


def train_step(
    state: TrainState,
    guidance: GuidanceSource,
    cameras: Sequence[Camera],
    config: TrainConfig,
    settings: RasterSettings = DEFAULT_SETTINGS,
) -> TrainState:
    """One optimization step, in place; returns ``state`` for chaining."""
    it = state.iteration
    camera = cameras[int(state.rng.integers(len(cameras)))]
    t = timestep_schedule(min(it, config.iterations - 1), config.iterations, config.t_max, config.t_min)
    bg = config.background
    out = render(camera, state.cloud, bg, settings, keep_context=True)
    res = guidance(out, camera, t)
    grads = render_backward(camera, state.cloud, res.grad_rgb, res.grad_alpha, bg, settings, out.context)
    gdict = grads.as_dict()
    if not grads.all_finite() or not np.isfinite(res.loss):
        log.warning("non-finite gradient at iteration %d; step skipped", it)
        state.skipped_steps += 1
    else:
        state.optimizer.step(state.cloud.param_dict(), gdict, config.learning_rates(it))
        # screen-space statistic in NDC units, as magnitudes are resolution-independent there
        ndc = grads.means2d * (0.5 * np.array([camera.width, camera.height]))
        vis = grads.visible
        state.grad2d_accum[vis] += np.linalg.norm(ndc[vis], axis=1)
        state.grad_pos_accum[vis] += grads.positions[vis]
        state.grad_count[vis] += 1
    state.iteration += 1
    if config.log_interval and (state.iteration % config.log_interval == 0 or state.iteration == 1):
        state.history.append({"iteration": state.iteration, "loss": res.loss, "splat_count": len(state.cloud), "timestep": t})
    until = int(config.densify_until * config.iterations)
    if (
        state.iteration % config.densify_interval == 0
        and config.densify_from <= state.iteration <= until
    ):
        state.densify_events.append(adaptive_control(state, config))
    return state


def adaptive_control(state: TrainState, config: TrainConfig) -> DensifyReport:
    """Prune transparent splats, clone small high-gradient ones, split large ones."""
    cloud = state.cloud
    keep = cloud.opacities >= config.prune_opacity_threshold
    n_pruned = int(np.count_nonzero(~keep))
    cloud = cloud.take(keep)
    opt = state.optimizer.select(keep)
    accum = state.grad2d_accum[keep]
    pos_accum = state.grad_pos_accum[keep]
    counts = state.grad_count[keep]

    mean_grad = np.where(counts > 0, accum / np.maximum(counts, 1), 0.0)
    candidates = np.flatnonzero(mean_grad > config.densify_grad_threshold)
    budget = config.max_splats - len(cloud)
    if budget <= 0:
        candidates = candidates[:0]
    elif len(candidates) > budget:
        # keep the strongest candidates; stable for determinism
        rank = np.argsort(-mean_grad[candidates], kind="stable")[:budget]
        candidates = np.sort(candidates[rank])
    max_scale = cloud.scales.max(axis=1) if len(cloud) else np.zeros(0)
    small = candidates[max_scale[candidates] < config.split_scale_threshold]
    large = candidates[max_scale[candidates] >= config.split_scale_threshold]

    # clones: copy stepped along the descent direction by one positional lr
    lr_pos = config.learning_rates(state.iteration)["positions"]
    gdir = -pos_accum[small]
    gnorm = np.linalg.norm(gdir, axis=1, keepdims=True)
    gdir = np.where(gnorm > 0, gdir / np.where(gnorm > 0, gnorm, 1.0), 0.0)
    clones = cloud.take(small)
    clones.positions = clones.positions + lr_pos * gdir

    # splits: two children drawn from the parent's Gaussian, shrunk
    parents = cloud.take(large)
    children = parents.take(np.repeat(np.arange(len(large)), 2))
    if len(large):
        chol = np.linalg.cholesky(cloud_covariances(parents))
        z = state.rng.standard_normal((len(large), 2, 3))
        offsets = np.einsum("nij,nkj->nki", chol, z).reshape(-1, 3)
        children.positions = children.positions + offsets
        children.log_scales = children.log_scales - np.log(config.split_factor)

    survivors = np.ones(len(cloud), dtype=bool)
    survivors[large] = False
    new_cloud = cloud.take(survivors).concat(clones).concat(children)
    n_new = len(clones) + len(children)
    state.optimizer = opt.select(survivors).extend(n_new)
    state.cloud = new_cloud
    n = len(new_cloud)
    state.grad2d_accum = np.zeros(n)
    state.grad_pos_accum = np.zeros((n, 3))
    state.grad_count = np.zeros(n, dtype=np.int64)
    min_opacity = float(new_cloud.opacities.min()) if n else float("nan")
    return DensifyReport(state.iteration, n_pruned, len(small), len(large), n, min_opacity)


def fit(
    cloud: GaussianCloud,
    guidance: GuidanceSource,
    cameras: Sequence[Camera],
    config: TrainConfig,
    settings: RasterSettings = DEFAULT_SETTINGS,
    callback=None,
) -> TrainState:
    state = TrainState.initial(cloud, config.seed)
    for _ in range(config.iterations):
        train_step(state, guidance, cameras, config, settings)
        if callback is not None:
            callback(state)
    return state


def config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
