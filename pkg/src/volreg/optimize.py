"""Multi-resolution registration drivers.

Four engine families share one driver contract: compute before/after
similarity reports, optimize coarse-to-fine over a halving pyramid, and
fall back to the identity field whenever optimization would leave the
global correlation worse than it started, so registration never degrades
the reported metric.

All engines are deterministic: there is no stochastic sampling, traces are
reproducible bit-for-bit for identical inputs and configuration.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field as dc_field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from . import kernels
from .models import (AffineTransform, FfdGrid, RegularizerWeights,
                     affine_to_displacement, bending_energy, diffusion_energy,
                     ffd_to_displacement, information_objective,
                     nmi_gradient_on_controls)
from .similarity import (SimilarityReport, objective_gradient, objective_value,
                         similarity_report, _cc_loss_grad)
from .volume import Volume3, downscale, downscaled_dims
from .warp import (DisplacementField3, VelocityField3, apply_displacement,
                   compose, exp_velocity, resize_field)

ENGINES = ("affine", "ffd", "dense-diffeomorphic", "dense-voxelmorph-energy")
OBJECTIVES = ("msd", "cc", "local_cc", "mi", "nmi")
OPTIMIZERS = ("gradient-descent-with-backtracking", "adam")

ENGINE_OBJECTIVES = {
    "affine": ("msd", "cc"),
    "ffd": ("nmi", "mi"),
    "dense-diffeomorphic": ("local_cc", "msd"),
    "dense-voxelmorph-energy": ("local_cc", "msd"),
}
_DEFAULT_OBJECTIVE = {
    "affine": "msd",
    "ffd": "nmi",
    "dense-diffeomorphic": "local_cc",
    "dense-voxelmorph-energy": "local_cc",
}
_DEFAULT_OPTIMIZER = {
    "affine": "gradient-descent-with-backtracking",
    "ffd": "gradient-descent-with-backtracking",
    "dense-diffeomorphic": "gradient-descent-with-backtracking",
    "dense-voxelmorph-energy": "adam",
}
_DEFAULT_STEP = {
    "affine": 4.0,
    "ffd": 2.0,
    "dense-diffeomorphic": 2.0,
    "dense-voxelmorph-energy": 0.25,
}

CONFIG_SCHEMA = "volreg-config/1"
MAX_HALVINGS = 10
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
ADAM_DECAY = 9.0  # hyperbolic step decay over one level's iterations
VELOCITY_SMOOTH_SIGMA = 1.0  # voxels, applied to each update


@dataclass
class RegistrationConfig:
    engine: str = "ffd"
    objective: str | None = None
    levels: int = 3
    iterations: int = 100
    optimizer: str | None = None
    step: float | None = None
    weights: RegularizerWeights = dc_field(default_factory=RegularizerWeights)
    window: int = 9
    bins: int = 64
    seed: int = 0
    control_spacing: float | None = None

    def __post_init__(self) -> None:
        if self.engine not in ENGINES:
            raise ValueError(f"unknown engine {self.engine!r}; choose from {ENGINES}")
        if self.objective is None:
            self.objective = _DEFAULT_OBJECTIVE[self.engine]
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.objective not in ENGINE_OBJECTIVES[self.engine]:
            raise ValueError(
                f"objective {self.objective!r} is incompatible with engine "
                f"{self.engine!r}; allowed: {ENGINE_OBJECTIVES[self.engine]}")
        if self.optimizer is None:
            self.optimizer = _DEFAULT_OPTIMIZER[self.engine]
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.step is None:
            self.step = _DEFAULT_STEP[self.engine]
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step <= 0:
            raise ValueError("step must be > 0")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if self.bins < 2:
            raise ValueError("bins must be >= 2")
        if self.control_spacing is not None and self.control_spacing < 2:
            raise ValueError("control_spacing must be >= 2 voxels")

    _JSON_KEYS = ("schema", "engine", "objective", "levels", "iterations",
                  "optimizer", "step", "lambda_diffusion", "lambda_bending",
                  "window", "bins", "seed", "control_spacing")

    @classmethod
    def from_json_dict(cls, doc: dict) -> "RegistrationConfig":
        unknown = sorted(set(doc) - set(cls._JSON_KEYS))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        schema = doc.get("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise ValueError(f"unsupported config schema {schema!r}")
        weights = RegularizerWeights(
            diffusion=float(doc.get("lambda_diffusion", 1.0)),
            bending=float(doc.get("lambda_bending", 0.01)))
        kwargs = {}
        for key in ("engine", "objective", "optimizer"):
            if key in doc:
                kwargs[key] = doc[key]
        for key in ("levels", "iterations", "window", "bins", "seed"):
            if key in doc:
                kwargs[key] = int(doc[key])
        for key in ("step", "control_spacing"):
            if key in doc and doc[key] is not None:
                kwargs[key] = float(doc[key])
        return cls(weights=weights, **kwargs)

    @classmethod
    def from_json_file(cls, path) -> "RegistrationConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))

    def to_json_dict(self) -> dict:
        return {
            "schema": CONFIG_SCHEMA,
            "engine": self.engine,
            "objective": self.objective,
            "levels": self.levels,
            "iterations": self.iterations,
            "optimizer": self.optimizer,
            "step": self.step,
            "lambda_diffusion": self.weights.diffusion,
            "lambda_bending": self.weights.bending,
            "window": self.window,
            "bins": self.bins,
            "seed": self.seed,
            "control_spacing": self.control_spacing,
        }


@dataclass
class RegistrationResult:
    field: DisplacementField3
    traces: list
    before: SimilarityReport
    after: SimilarityReport
    duration: float
    iterations_run: int
    converged: bool
    config: RegistrationConfig
    transform: AffineTransform | None = None
    fell_back_to_identity: bool = False


def multires_schedule(dims, levels: int):
    """(factor, dims) per level, coarsest first; factors halve per level."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    out = []
    for lev in range(levels):
        factor = 1.0 / (2 ** (levels - 1 - lev))
        lev_dims = downscaled_dims(dims, factor)
        out.append((factor, lev_dims))
    if min(out[0][1]) < 8:
        raise ValueError(
            f"dims {tuple(dims)} too small for {levels} levels: coarsest "
            f"level {out[0][1]} drops below 8 voxels per axis")
    return out


def _backtracking_minimize(x0, value_fn, grad_fn, step0: float,
                           iterations: int):
    """Plain gradient descent with a halve-on-failure line search.

    Steps are taken along the inf-norm-normalized gradient so `step` is a
    displacement in parameter units; a step is accepted only when the loss
    strictly improves (max 10 halvings, then the run is converged).
    """
    x = x0
    f = value_fn(x)
    trace = []
    step = step0
    iters = 0
    converged = False
    for _ in range(iterations):
        iters += 1
        g = grad_fn(x)
        gmax = float(np.max(np.abs(g)))
        if gmax == 0.0 or not np.isfinite(gmax):
            converged = True
            break
        d = g / gmax
        s = step
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            xt = x - s * d
            ft = value_fn(xt)
            if ft < f:
                x, f = xt, ft
                trace.append(f)
                accepted = True
                step = min(s * 2.0, step0 * 8.0)
                break
            s *= 0.5
        if not accepted:
            converged = True
            break
    return x, f, trace, iters, converged


def _adam_minimize(x0, value_fn, grad_fn, lr: float, iterations: int):
    """Fixed-hyperparameter adam (b1=0.9, b2=0.999, eps=1e-8).

    The step size decays hyperbolically to damp the end-of-run dither.
    adam is not monotone, so the best iterate seen is returned and, as with
    the backtracking optimizer, the trace records accepted (improving)
    objective values only."""
    x = x0.copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    trace = []
    iters = 0
    converged = False
    best_x = x.copy()
    best_f = value_fn(x)
    for t in range(1, iterations + 1):
        iters += 1
        g = grad_fn(x)
        if not np.isfinite(g).all():
            converged = True
            break
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        mhat = m / (1.0 - ADAM_BETA1 ** t)
        vhat = v / (1.0 - ADAM_BETA2 ** t)
        step = lr / (1.0 + ADAM_DECAY * (t - 1) / iterations)
        x = x - step * mhat / (np.sqrt(vhat) + ADAM_EPS)
        f = value_fn(x)
        if f < best_f:
            best_f = f
            best_x = x.copy()
            trace.append(f)
        if float(np.max(np.abs(g))) < 1e-12:
            converged = True
            break
    return best_x, trace, iters, converged


def _pyramid(fixed: Volume3, moving: Volume3, levels: int):
    sched = multires_schedule(fixed.dims, levels)
    return [(factor, downscale(fixed, factor), downscale(moving, factor))
            for factor, _dims in sched]


def _dense_loss_and_grad(fixed: Volume3, moving: Volume3, cfg: RegistrationConfig):
    """Loss/gradient closures for a dense displacement on one level."""

    def value(u_arr: np.ndarray) -> float:
        return objective_value(fixed, moving, DisplacementField3(u_arr),
                               cfg.objective, cfg.window)

    def grad(u_arr: np.ndarray) -> np.ndarray:
        return objective_gradient(fixed, moving, DisplacementField3(u_arr),
                                  cfg.objective, cfg.window)

    return value, grad


def register(fixed: Volume3, moving: Volume3, cfg: RegistrationConfig) -> RegistrationResult:
    """Run the configured engine and report before/after metrics."""
    if fixed.dims != moving.dims:
        raise ValueError(f"fixed dims {fixed.dims} != moving dims {moving.dims}")
    t0 = time.monotonic()
    before = similarity_report(fixed, moving, cfg.bins)
    engine = _ENGINE_FUNCS[cfg.engine]
    field, traces, iters, converged, transform = engine(fixed, moving, cfg)
    warped = apply_displacement(moving, field)
    after = similarity_report(fixed, warped, cfg.bins)
    fell_back = False
    if after.cc < before.cc:
        field = DisplacementField3.zeros(fixed.dims)
        after = before
        fell_back = True
    return RegistrationResult(
        field=field, traces=traces, before=before, after=after,
        duration=time.monotonic() - t0, iterations_run=iters,
        converged=converged, config=cfg, transform=transform,
        fell_back_to_identity=fell_back)


# ---------------------------------------------------------------- affine


def _affine_params_to_field(q: np.ndarray, dims, radius: float) -> DisplacementField3:
    m = q[:9].reshape(3, 3) / radius
    t = q[9:]
    center = np.array([(n - 1) / 2.0 for n in dims])
    a = np.eye(3) + m
    b = t - m @ center
    return affine_to_displacement(AffineTransform(np.hstack([a, b[:, None]])), dims)


def _register_affine(fixed: Volume3, moving: Volume3, cfg: RegistrationConfig):
    levels = _pyramid(fixed, moving, cfg.levels)
    # parameters: 9 scaled linear entries + 3 translations, all voxel units
    q = np.zeros(12, dtype=np.float64)
    traces = []
    total_iters = 0
    converged = False
    prev_dims = None
    prev_radius = None
    for _factor, fx, mv in levels:
        dims = fx.dims
        radius = max(dims) / 2.0
        if prev_dims is not None:
            scale = np.array([n_new / n_old for n_new, n_old in zip(dims, prev_dims)])
            q = q.copy()
            q[9:] *= scale
            m = q[:9].reshape(3, 3)
            q[:9] = (m * scale[:, None] / scale[None, :]).reshape(-1) \
                * (radius / prev_radius)

        def value(qv: np.ndarray) -> float:
            u = _affine_params_to_field(qv, dims, radius)
            if cfg.objective == "cc":
                w = kernels.warp_scalar(mv.data, u.u)
                return _cc_loss_grad(fx.data.astype(np.float64), w)[0]
            return objective_value(fx, mv, u, "msd")

        def grad(qv: np.ndarray) -> np.ndarray:
            u = _affine_params_to_field(qv, dims, radius)
            if cfg.objective == "cc":
                w, gmov = kernels.warp_scalar_with_grad(mv.data, u.u)
                _, d_dw = _cc_loss_grad(fx.data.astype(np.float64), w)
                dense = d_dw[..., None] * gmov
            else:
                dense = objective_gradient(fx, mv, u, "msd")
            center = np.array([(n - 1) / 2.0 for n in dims])
            xs = np.arange(dims[0], dtype=np.float64)[:, None, None] - center[0]
            ys = np.arange(dims[1], dtype=np.float64)[None, :, None] - center[1]
            zs = np.arange(dims[2], dtype=np.float64)[None, None, :] - center[2]
            coords = (xs, ys, zs)
            gq = np.empty(12, dtype=np.float64)
            for c in range(3):
                gc = dense[..., c]
                for d in range(3):
                    gq[3 * c + d] = float((gc * coords[d]).sum()) / radius
                gq[9 + c] = float(gc.sum())
            return gq

        q, _f, trace, iters, converged = _backtracking_minimize(
            q, value, grad, cfg.step, cfg.iterations)
        traces.append(trace)
        total_iters += iters
        prev_dims = dims
        prev_radius = radius

    dims = fixed.dims
    radius = max(dims) / 2.0
    m = q[:9].reshape(3, 3) / radius
    t = q[9:]
    center = np.array([(n - 1) / 2.0 for n in dims])
    transform = AffineTransform(
        np.hstack([np.eye(3) + m, (t - m @ center)[:, None]]))
    field = affine_to_displacement(transform, dims)
    return field, traces, total_iters, converged, transform


# ------------------------------------------------------------------- ffd


def _level_bins(cfg_bins: int, dims) -> int:
    """Cap histogram bins so coarse levels keep a few samples per bin."""
    n = dims[0] * dims[1] * dims[2]
    return max(8, min(cfg_bins, int(round(n ** (1.0 / 3.0)))))


def _register_ffd(fixed: Volume3, moving: Volume3, cfg: RegistrationConfig):
    spacing = cfg.control_spacing if cfg.control_spacing is not None else 8.0
    levels = _pyramid(fixed, moving, cfg.levels)
    base = DisplacementField3.zeros(levels[0][1].dims)
    traces = []
    total_iters = 0
    converged = False
    for _factor, fx, mv in levels:
        dims = fx.dims
        base = resize_field(base, dims)
        moving_eff = apply_displacement(mv, base)
        grid = FfdGrid(dims, spacing)
        bins = _level_bins(cfg.bins, dims)
        lam = cfg.weights.bending
        metric = cfg.objective  # "nmi" or "mi"

        def value(coeffs: np.ndarray) -> float:
            g = FfdGrid(dims, spacing, coeffs)
            info = information_objective(fx, moving_eff, g, bins, metric)
            bend = bending_energy(g)[0] if lam > 0 else 0.0
            return lam * bend - info

        def grad(coeffs: np.ndarray) -> np.ndarray:
            g = FfdGrid(dims, spacing, coeffs)
            ginfo = nmi_gradient_on_controls(fx, moving_eff, g, step=0.1,
                                             bins=bins, metric=metric)
            if lam > 0:
                gbend = bending_energy(g)[1]
                return lam * gbend - ginfo
            return -ginfo

        coeffs, _f, trace, iters, converged = _backtracking_minimize(
            grid.coeffs, value, grad, cfg.step, cfg.iterations)
        traces.append(trace)
        total_iters += iters
        level_field = ffd_to_displacement(FfdGrid(dims, spacing, coeffs))
        base = compose(base, level_field)
    return base, traces, total_iters, converged, None


# ---------------------------------------------------- dense diffeomorphic


def _register_diffeomorphic(fixed: Volume3, moving: Volume3, cfg: RegistrationConfig):
    levels = _pyramid(fixed, moving, cfg.levels)
    vel = np.zeros(levels[0][1].dims + (3,), dtype=np.float64)
    traces = []
    total_iters = 0
    converged = False
    for _factor, fx, mv in levels:
        dims = fx.dims
        if vel.shape[:3] != dims:
            vel = resize_field(DisplacementField3(vel), dims).u
        value_u, grad_u = _dense_loss_and_grad(fx, mv, cfg)

        def value(v_arr: np.ndarray) -> float:
            u = exp_velocity(VelocityField3(v_arr))
            return value_u(u.u)

        def grad(v_arr: np.ndarray) -> np.ndarray:
            # demons-style: take the image-term gradient at u=exp(v) and
            # smooth it; exact differentiation through the exponential is
            # deliberately not attempted
            u = exp_velocity(VelocityField3(v_arr))
            g = grad_u(u.u)
            for c in range(3):
                g[..., c] = gaussian_filter(g[..., c], VELOCITY_SMOOTH_SIGMA,
                                            mode="nearest")
            return g

        vel, _f, trace, iters, converged = _backtracking_minimize(
            vel, value, grad, cfg.step, cfg.iterations)
        traces.append(trace)
        total_iters += iters
    field = exp_velocity(VelocityField3(vel))
    return field, traces, total_iters, converged, None


# ------------------------------------------------- dense energy minimizer


def _register_voxelmorph_energy(fixed: Volume3, moving: Volume3,
                                cfg: RegistrationConfig):
    levels = _pyramid(fixed, moving, cfg.levels)
    u = np.zeros(levels[0][1].dims + (3,), dtype=np.float64)
    lam = cfg.weights.diffusion
    traces = []
    total_iters = 0
    converged = False
    for factor, fx, mv in levels:
        dims = fx.dims
        if u.shape[:3] != dims:
            u = resize_field(DisplacementField3(u), dims).u
        value_u, grad_u = _dense_loss_and_grad(fx, mv, cfg)

        def value(u_arr: np.ndarray) -> float:
            e = value_u(u_arr)
            if lam > 0:
                e += lam * diffusion_energy(DisplacementField3(u_arr))[0]
            return e

        def grad(u_arr: np.ndarray) -> np.ndarray:
            g = grad_u(u_arr)
            if lam > 0:
                g = g + lam * diffusion_energy(DisplacementField3(u_arr))[1]
            return g

        # displacements shrink with the level factor, so the voxel step does too
        step = cfg.step * factor
        if cfg.optimizer == "adam":
            u, trace, iters, converged = _adam_minimize(
                u, value, grad, step, cfg.iterations)
        else:
            u, _f, trace, iters, converged = _backtracking_minimize(
                u, value, grad, step, cfg.iterations)
        traces.append(trace)
        total_iters += iters
    return DisplacementField3(u), traces, total_iters, converged, None


_ENGINE_FUNCS = {
    "affine": _register_affine,
    "ffd": _register_ffd,
    "dense-diffeomorphic": _register_diffeomorphic,
    "dense-voxelmorph-energy": _register_voxelmorph_energy,
}


def _make_public(engine_name: str):
    def runner(fixed: Volume3, moving: Volume3,
               cfg: RegistrationConfig | None = None) -> RegistrationResult:
        if cfg is None:
            cfg = RegistrationConfig(engine=engine_name)
        elif cfg.engine != engine_name:
            kwargs = {"engine": engine_name}
            if cfg.objective not in ENGINE_OBJECTIVES[engine_name]:
                kwargs["objective"] = None
            cfg = replace(cfg, **kwargs)
        return register(fixed, moving, cfg)
    runner.__name__ = f"register_{engine_name.replace('-', '_')}"
    return runner


register_affine = _make_public("affine")
register_ffd = _make_public("ffd")
register_dense_diffeomorphic = _make_public("dense-diffeomorphic")
register_voxelmorph_energy = _make_public("dense-voxelmorph-energy")
