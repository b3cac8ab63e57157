"""Optimization of the three fields from posed images under known lighting."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import metrics_io, transport
from .diffmath import autodiff as ad
from .diffmath.autodiff import GradientTape
from .diffmath.optim import AdamState, adam_step, lr_schedule
from .fields import Architecture, ModelFields, NervModel
from .transport import LightingBatch, RenderOptions

GROUPS = ("shape", "reflectance", "visibility")
PENALTY_STEPS = 100


@dataclass
class TrainConfig:
    batch_pixel_rays: int = 512
    batch_supervision_rays: int = 256
    n_samples: int = 256
    n_indirect: int = 128
    lam: float = 20.0
    lr_start: float = 1e-5
    lr_end: float = 1e-6
    total_steps: int = 1_000_000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    normals: str = "analytic"
    indirect: bool = True
    width: int = 256
    layers: int = 8
    head_width: int = 128
    head_layers: int = 4
    seed: int = 0
    shade_samples: int | None = None
    supervision_samples: int | None = None
    checkpoint_every: int = 1000
    log_every: int = 1

    def __post_init__(self):
        for k in ("batch_pixel_rays", "batch_supervision_rays", "n_samples", "total_steps",
                  "width", "layers", "head_width", "head_layers"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        if self.n_indirect < 0 or self.lam < 0:
            raise ValueError("n_indirect and lam must be nonnegative")
        if not (self.lr_start >= self.lr_end > 0):
            raise ValueError("need lr_start >= lr_end > 0")
        Architecture(normals=self.normals)

    @property
    def architecture(self) -> Architecture:
        return Architecture(self.width, self.layers, self.head_width, self.head_layers, self.normals)

    def render_options(self, seed=None) -> RenderOptions:
        return RenderOptions(
            n_samples=self.n_samples, n_indirect=self.n_indirect, vis_mode="nvf",
            indirect=self.indirect, shade_samples=self.shade_samples,
            seed=self.seed if seed is None else seed,
        )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def desk_config(**overrides) -> TrainConfig:
    """CPU-sized profile: small networks, 64 samples per ray, top-8 shading."""
    base = dict(
        batch_pixel_rays=64, batch_supervision_rays=64, n_samples=64, n_indirect=32,
        lr_start=5e-4, lr_end=5e-5, total_steps=50_000, width=64, layers=4,
        head_width=32, head_layers=2, shade_samples=8, supervision_samples=32,
        checkpoint_every=500, log_every=10,
    )
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class LossBreakdown:
    photometric: float
    visibility: float
    depth: float
    total: float
    lam: float

    def check(self):
        ok = abs(self.total - (self.photometric + self.lam * (self.visibility + self.depth)))
        return ok <= 1e-9 * max(1.0, abs(self.total))


# ---------------------------------------------------------------- data


class TrainingImages:
    """Training split held as flat pixel arrays with one lighting per image."""

    def __init__(self, images, poses, lightings):
        if not images:
            raise ValueError("dataset has no training images")
        self.images = [np.asarray(i, float) for i in images]
        self.poses = list(poses)
        self.lightings = LightingBatch(lightings)
        rays = [p.rays() for p in self.poses]
        self.origins = np.stack([r[0] for r in rays])  # (I, HW, 3)
        self.dirs = np.stack([r[1] for r in rays])
        self.colors = np.stack([i.reshape(-1, 3) for i in self.images])
        self.pixels = self.colors.shape[1]

    @classmethod
    def from_dataset(cls, ds):
        entries = ds.split("train")
        return cls([ds.image(e) for e in entries], [ds.pose(e) for e in entries], [ds.lighting(e) for e in entries])

    @property
    def count(self):
        return len(self.images)


@dataclass
class PixelBatch:
    origins: np.ndarray
    dirs: np.ndarray
    colors: np.ndarray
    light_idx: np.ndarray
    ray_ids: np.ndarray


def sample_pixel_rays(data: TrainingImages, batch: int, rng) -> PixelBatch:
    """Uniform draw over all (image, pixel) pairs."""
    flat = rng.integers(0, data.count * data.pixels, size=batch)
    img, pix = np.divmod(flat, data.pixels)
    return PixelBatch(data.origins[img, pix], data.dirs[img, pix], data.colors[img, pix], img, flat)


@dataclass
class SupervisionBatch:
    x: np.ndarray  # (M, 3) query points
    dirs: np.ndarray  # (M, 3)
    vis: np.ndarray  # (M,) targets, gradient-blocked
    depth: np.ndarray  # (M,)


def random_box_rays(bbox, count, rng):
    """Rays from a sphere around the box toward random directions; misses are redrawn."""
    lo, hi = bbox
    centre = 0.5 * (lo + hi)
    radius = transport.bbox_diag(bbox)
    o_out, d_out = [], []
    need = count
    while need > 0:
        o = rng.normal(size=(2 * need + 8, 3))
        o = centre + radius * o / np.linalg.norm(o, axis=1, keepdims=True)
        d = rng.normal(size=o.shape)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        _, _, hit = transport.ray_box(o, d, lo, hi)
        o_out.append(o[hit][:need])
        d_out.append(d[hit][:need])
        need -= int(min(hit.sum(), need))
    return np.concatenate(o_out), np.concatenate(d_out)


def ray_supervision(sigma, o, d, t, delta, t_near, t_far, cols=None) -> SupervisionBatch:
    """Targets at samples of each ray, looking forward and backward.

    ``cols`` (B, K) restricts the query points to those sample columns.
    """
    sigma = ad.value_of(sigma)
    vf, df, vb, db = transport.bidirectional_targets(sigma, t, delta, t_near, t_far)
    if cols is not None:
        vf, df, vb, db, t = (np.take_along_axis(a, cols, axis=1) for a in (vf, df, vb, db, t))
    x = (o[:, None, :] + t[..., None] * d[:, None, :]).reshape(-1, 3)
    n = t.shape[1]
    fwd = np.repeat(d, n, axis=0)
    return SupervisionBatch(
        np.concatenate([x, x]), np.concatenate([fwd, -fwd]),
        np.concatenate([vf.ravel(), vb.ravel()]), np.concatenate([df.ravel(), db.ravel()]),
    )


def sample_supervision_rays(bbox, count, rng, density_fn, n_samples, seed=0, iteration=0) -> SupervisionBatch:
    """Random rays through the box with visibility and depth targets from ``density_fn``."""
    bbox = (np.asarray(bbox[0], float), np.asarray(bbox[1], float))
    o, d = random_box_rays(bbox, count, rng)
    tn, tf, _ = transport.ray_box(o, d, *bbox)
    ids = np.arange(count) + (1 << 40)
    t, delta = transport.stratified_depths(tn, tf, n_samples, seed, ids, iteration)
    x = o[:, None, :] + t[..., None] * d[:, None, :]
    with ad.no_record():
        sigma = np.asarray(ad.value_of(density_fn(x.reshape(-1, 3)))).reshape(count, n_samples)
    return ray_supervision(sigma, o, d, t, delta, tn, tf)


def merge_supervision(batches) -> SupervisionBatch:
    return SupervisionBatch(*(np.concatenate([getattr(b, k) for b in batches]) for k in ("x", "dirs", "vis", "depth")))


# ---------------------------------------------------------------- loss


def tonemap_t(x):
    return x / (1.0 + x)


def consistency_terms(model: NervModel, sup: SupervisionBatch):
    """Mean squared visibility error and mean squared depth error (depth in units of the box diagonal)."""
    V, D = model.visibility_pairs(sup.x, sup.dirs)
    vis = ad.mean((V - sup.vis) ** 2)
    dep = ad.mean(((D - sup.depth) / model.diag) ** 2)
    return vis, dep


def compute_loss(model: NervModel, pixels: PixelBatch, lights: LightingBatch, config: TrainConfig,
                 rng, step=0, density_override=None):
    """Loss Tensor and breakdown; must run inside a recording tape for gradients.

    The photometric term is the mean over rays of the squared tone-mapped
    colour error. The consistency terms average over sample points of the
    random supervision rays and over the shaded sample points of the pixel
    rays.
    """
    fields = ModelFields(model, "nvf")
    opts = config.render_options()
    br = transport.render_rays(fields, pixels.origins, pixels.dirs, lights, pixels.light_idx, opts,
                               ray_ids=pixels.ray_ids, iteration=step)
    diff = tonemap_t(br.total) - tonemap_t(pixels.colors)
    photo = ad.mean(ad.tsum(diff * diff, axis=1))

    density_fn = density_override or model.density
    sups = [sample_supervision_rays(model.bbox, config.batch_supervision_rays, rng, density_fn,
                                    config.supervision_samples or config.n_samples, config.seed, step)]
    ex = br.extras
    if "t" in ex and len(ex["hit_index"]):
        hi = ex["hit_index"]
        o, d = pixels.origins[hi], pixels.dirs[hi]
        tn, tf, _ = transport.ray_box(o, d, *model.bbox)
        sig = ex["sigma"] if density_override is None else np.asarray(
            density_override((o[:, None] + ex["t"][..., None] * d[:, None]).reshape(-1, 3))
        ).reshape(ex["t"].shape)
        sups.append(ray_supervision(sig, o, d, ex["t"], ex["delta"], tn, tf, ex["shade_index"]))
    vis, dep = consistency_terms(model, merge_supervision(sups))
    total = photo + config.lam * (vis + dep)
    lb = LossBreakdown(float(photo.value), float(vis.value), float(dep.value), float(total.value), config.lam)
    return total, lb, br


def loss_gradients(model, pixels, lights, config, rng, step=0):
    """Loss breakdown plus gradients for every parameter, keyed by name."""
    params = model.named_parameters()
    with GradientTape() as tape:
        total, lb, _ = compute_loss(model, pixels, lights, config, rng, step)
    grads = tape.gradient(total, list(params.values()))
    return lb, dict(zip(params.keys(), (g.value for g in grads)))


# ---------------------------------------------------------------- optimizer


class Trainer:
    """Holds a model, its per-field Adam states, and the step counter."""

    def __init__(self, model: NervModel, config: TrainConfig, data: TrainingImages | None = None):
        self.model = model
        self.config = config
        self.data = data
        self.step = 0
        self.penalty_until = -1
        self.states = {
            g: AdamState.zeros_like(model.group(g), config.beta1, config.beta2, config.eps) for g in GROUPS
        }

    def lr(self, step=None):
        step = self.step if step is None else step
        c = self.config
        lr = lr_schedule(min(step, c.total_steps), c.total_steps, c.lr_start, c.lr_end)
        return 0.5 * lr if step < self.penalty_until else lr

    def batch_rng(self, step):
        return np.random.default_rng([self.config.seed, step])

    def train_step(self):
        """One batch, one loss, one Adam update per field. Returns (LossBreakdown, rejected)."""
        step = self.step
        rng = self.batch_rng(step)
        pixels = sample_pixel_rays(self.data, self.config.batch_pixel_rays, rng)
        try:
            lb, grads = loss_gradients(self.model, pixels, self.data.lightings, self.config, rng, step)
            finite = np.isfinite(lb.total) and all(np.all(np.isfinite(g)) for g in grads.values())
        except FloatingPointError:
            lb, finite = LossBreakdown(np.nan, np.nan, np.nan, np.nan, self.config.lam), False
        if not finite:
            self.penalty_until = step + 1 + PENALTY_STEPS
            self.step += 1
            return lb, True
        lr = self.lr(step)
        named = self.model.named_parameters()
        for g in GROUPS:
            params = self.model.group(g)
            ids = {id(p) for p in params}
            gl = [grads[k] for k, p in named.items() if id(p) in ids]
            adam_step(params, gl, self.states[g], lr)
            for arr in self.states[g].m + self.states[g].v:
                arr[...] = arr.astype(np.float32)
        self.model.snap_to_float32()
        self.step += 1
        return lb, False

    # ------------------------------------------------------------ persistence

    def save(self, path):
        arrays = dict(self.model.state_arrays())
        for g in GROUPS:
            for i, (m, v) in enumerate(zip(self.states[g].m, self.states[g].v)):
                arrays[f"adam.{g}.{i}.m"] = m
                arrays[f"adam.{g}.{i}.v"] = v
        meta = {
            "config": self.config.to_dict(),
            "step": self.step,
            "penalty_until": self.penalty_until,
            "adam_t": {g: self.states[g].t for g in GROUPS},
            "bbox": [self.model.bbox[0].tolist(), self.model.bbox[1].tolist()],
        }
        metrics_io.save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path, data=None, config=None):
        arrays, meta = metrics_io.load_checkpoint(path)
        saved = TrainConfig.from_dict(meta["config"])
        if config is not None and config.architecture != saved.architecture:
            raise ValueError(
                f"checkpoint architecture {saved.architecture} does not match requested {config.architecture}"
            )
        config = config or saved
        model = NervModel(config.architecture, tuple(map(tuple, meta["bbox"])), seed=config.seed)
        model.load_arrays({k: v.astype(np.float64) for k, v in arrays.items()})
        tr = cls(model, config, data)
        tr.step = int(meta["step"])
        tr.penalty_until = int(meta.get("penalty_until", -1))
        for g in GROUPS:
            st = tr.states[g]
            st.t = int(meta["adam_t"][g])
            for i in range(len(st.m)):
                st.m[i][...] = arrays[f"adam.{g}.{i}.m"]
                st.v[i][...] = arrays[f"adam.{g}.{i}.v"]
        return tr


def load_model(path) -> tuple[NervModel, TrainConfig, dict]:
    """Model and config from a checkpoint, ignoring optimizer state."""
    arrays, meta = metrics_io.load_checkpoint(path)
    config = TrainConfig.from_dict(meta["config"])
    model = NervModel(config.architecture, tuple(map(tuple, meta["bbox"])), seed=config.seed)
    model.load_arrays({k: v.astype(np.float64) for k, v in arrays.items()})
    return model, config, meta


def log_line(step, lr, lb: LossBreakdown, rejected=False, **extra) -> str:
    rec = {"step": step, "lr": lr, "photometric": lb.photometric, "visibility": lb.visibility,
           "depth": lb.depth, "total": lb.total}
    if rejected:
        rec["rejected"] = True
    rec.update(extra)
    return json.dumps(rec, allow_nan=True)


# ---------------------------------------------------------------- visibility-only fitting


def fit_visibility_to_frozen_shape(model: NervModel, steps: int, density_fn=None, batch_rays=64,
                                   n_samples=64, lr_start=1e-3, lr_end=1e-4, seed=0, callback=None):
    """Train only the visibility networks against targets from a frozen density.

    ``density_fn`` defaults to the model's own shape field. Returns the list of
    per-step consistency losses.
    """
    density_fn = density_fn or model.density
    params = model.group("visibility")
    state = AdamState.zeros_like(params)
    history = []
    for step in range(steps):
        rng = np.random.default_rng([seed, step, 7])
        sup = sample_supervision_rays(model.bbox, batch_rays, rng, density_fn, n_samples, seed, step)
        with GradientTape() as tape:
            vis, dep = consistency_terms(model, sup)
            loss = vis + dep
        grads = tape.gradient(loss, params)
        adam_step(params, [g.value for g in grads], state, lr_schedule(step, max(steps, 1), lr_start, lr_end))
        history.append(float(loss.value))
        if callback:
            callback(step, float(vis.value), float(dep.value))
    return history
