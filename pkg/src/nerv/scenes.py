"""Procedural analytic scenes, the reference renderer and dataset generation."""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import brdf, metrics_io, transport
from .diffmath.autodiff import Tensor
from .transport import LightingBatch, LightingCondition, RenderOptions, ShadingSample

EPS_GRAD = 1e-8


# ---------------------------------------------------------------- signed distances


class Sphere:
    def __init__(self, center, radius, material=0):
        self.center = np.asarray(center, float)
        self.radius = float(radius)
        self.material = material

    def eval(self, x):
        p = x - self.center
        r = np.linalg.norm(p, axis=-1)
        g = p / np.maximum(r, 1e-300)[..., None]
        g[r == 0] = 0.0
        return r - self.radius, g, np.full(len(x), self.material)

    def distance(self, x):
        p = x - self.center
        return np.sqrt(np.einsum("...i,...i->...", p, p)) - self.radius


class Box:
    def __init__(self, center, half_extents, material=0):
        self.center = np.asarray(center, float)
        self.half = np.asarray(half_extents, float)
        self.material = material

    def eval(self, x):
        p = x - self.center
        q = np.abs(p) - self.half
        qp = np.maximum(q, 0.0)
        out_len = np.linalg.norm(qp, axis=-1)
        qmax = q.max(axis=-1)
        d = out_len + np.minimum(qmax, 0.0)
        sgn = np.where(p >= 0, 1.0, -1.0)
        g_out = sgn * qp / np.maximum(out_len, 1e-300)[..., None]
        axis = q.argmax(axis=-1)
        g_in = np.zeros_like(p)
        g_in[np.arange(len(p)), axis] = sgn[np.arange(len(p)), axis]
        # inside, two faces equally near: the medial axis, gradient undefined
        qs = np.sort(q, axis=-1)
        g_in[qs[:, -1] - qs[:, -2] < 1e-12] = 0.0
        g = np.where((out_len > 0)[..., None], g_out, g_in)
        return d, g, np.full(len(x), self.material)

    def distance(self, x):
        q = np.abs(x - self.center) - self.half
        qp = np.maximum(q, 0.0)
        return np.sqrt(np.einsum("...i,...i->...", qp, qp)) + np.minimum(q.max(axis=-1), 0.0)


class Union:
    def __init__(self, *children):
        self.children = children

    def eval(self, x):
        best_d = np.full(len(x), np.inf)
        best_g = np.zeros((len(x), 3))
        best_m = np.full(len(x), -1)
        for c in self.children:
            d, g, m = c.eval(x)
            closer = d < best_d
            best_d = np.where(closer, d, best_d)
            best_g = np.where(closer[:, None], g, best_g)
            best_m = np.where(closer, m, best_m)
        return best_d, best_g, best_m

    def distance(self, x):
        out = self.children[0].distance(x)
        for c in self.children[1:]:
            np.minimum(out, c.distance(x), out=out)
        return out


class SmoothUnion:
    """Polynomial smooth minimum with blend radius k."""

    def __init__(self, a, b, k=0.1):
        self.a, self.b, self.k = a, b, float(k)

    def eval(self, x):
        da, ga, ma = self.a.eval(x)
        db, gb, mb = self.b.eval(x)
        h = np.clip(0.5 + 0.5 * (db - da) / self.k, 0.0, 1.0)
        d = db + h * (da - db) - self.k * h * (1.0 - h)
        g = h[:, None] * ga + (1.0 - h[:, None]) * gb
        return d, g, np.where(h > 0.5, ma, mb)

    def distance(self, x):
        da, db = self.a.distance(x), self.b.distance(x)
        h = np.clip(0.5 + 0.5 * (db - da) / self.k, 0.0, 1.0)
        return db + h * (da - db) - self.k * h * (1.0 - h)


class Empty:
    def eval(self, x):
        n = len(x)
        return np.full(n, np.inf), np.zeros((n, 3)), np.full(n, -1)

    def distance(self, x):
        return np.full(np.shape(x)[:-1], np.inf)


# ---------------------------------------------------------------- scenes


@dataclass
class Material:
    albedo: tuple
    roughness: float


class AnalyticScene:
    """Density sigma_max * logistic(-sdf / w) over an SDF, with per-primitive materials."""

    def __init__(self, name, root, materials, bbox=((-1, -1, -1), (1, 1, 1)), sigma_max=None, width=None):
        self.name = name
        self.root = root
        self.materials = list(materials)
        self.bbox = (np.asarray(bbox[0], float), np.asarray(bbox[1], float))
        diag = transport.bbox_diag(self.bbox)
        self.sigma_max = 50.0 / diag if sigma_max is None else float(sigma_max)
        self.width = 0.02 * diag if width is None else float(width)
        self._alb = np.array([m.albedo for m in self.materials] + [(0.0, 0.0, 0.0)], float)
        self._rough = np.array([m.roughness for m in self.materials] + [1.0], float)

    @property
    def diag(self) -> float:
        return transport.bbox_diag(self.bbox)

    def sdf(self, x):
        return self.root.distance(np.asarray(x, float))

    def density(self, x):
        d = self.root.distance(np.asarray(x, float))
        with np.errstate(over="ignore"):
            return self.sigma_max / (1.0 + np.exp(d / self.width))

    def normal(self, x):
        """Outward unit normal -grad(sigma)/|grad(sigma)| and a validity flag."""
        x = np.asarray(x, float).reshape(-1, 3)
        d, g, _ = self.root.eval(x)
        with np.errstate(over="ignore"):
            e = np.exp(-np.abs(d) / self.width)
            slope = self.sigma_max / self.width * e / (1.0 + e) ** 2
        gl = np.linalg.norm(g, axis=-1)
        valid = (gl > 1e-6) & (slope * gl > EPS_GRAD)
        n = g / np.maximum(gl, 1e-300)[:, None]
        n[~valid] = 0.0
        return n, valid

    def material(self, x):
        x = np.asarray(x, float).reshape(-1, 3)
        _, _, m = self.root.eval(x)
        return self._alb[m], self._rough[m]


def _ground(material=0):
    return Box((0.0, 0.0, -0.75), (0.95, 0.95, 0.2), material)


def make_scene(name: str) -> AnalyticScene:
    if name == "sphere-plane":
        return AnalyticScene(
            name,
            Union(Sphere((0.0, 0.0, -0.08), 0.42, 0), _ground(1)),
            [Material((0.75, 0.35, 0.2), 0.8), Material((0.55, 0.55, 0.55), 0.35)],
        )
    if name == "two-box":
        return AnalyticScene(
            name,
            Union(
                Box((-0.34, 0.0, -0.3), (0.22, 0.3, 0.25), 0),
                Box((0.34, 0.05, -0.25), (0.2, 0.25, 0.3), 1),
                _ground(2),
            ),
            [Material((0.8, 0.1, 0.08), 0.8), Material((0.1, 0.75, 0.15), 0.8), Material((0.75, 0.75, 0.75), 0.9)],
        )
    if name == "opaque-sphere":
        return AnalyticScene(name, Union(Sphere((0.0, 0.0, 0.0), 0.5, 0)), [Material((0.7, 0.7, 0.7), 0.6)])
    if name == "sphere-wall":
        return AnalyticScene(
            name,
            Union(Sphere((0.3, 0.0, 0.0), 0.35, 0), Box((-0.6, 0.0, 0.0), (0.1, 0.8, 0.8), 1)),
            [Material((0.9, 0.9, 0.9), 0.9), Material((0.9, 0.9, 0.9), 0.9)],
        )
    if name == "empty":
        return AnalyticScene(name, Empty(), [])
    raise ValueError(f"unknown scene {name!r}; choose from {SCENES}")


SCENES = ("sphere-plane", "two-box", "opaque-sphere", "sphere-wall", "empty")


class AnalyticFields:
    """Oracle fields: closed-form geometry and materials, brute-force visibility."""

    def __init__(self, scene: AnalyticScene, n_light_steps: int = 256):
        self.scene = scene
        self.bbox = scene.bbox
        self.n_light_steps = n_light_steps
        self.counts = {"density": 0, "visibility": 0}

    def _density_np(self, x):
        x = np.asarray(x, float)
        self.counts["density"] += int(np.prod(x.shape[:-1]))
        return self.scene.density(x)

    def density(self, x):
        return Tensor(self._density_np(x))

    def sample(self, x) -> ShadingSample:
        x = np.asarray(x, float).reshape(-1, 3)
        sig = self._density_np(x)
        n, valid = self.scene.normal(x)
        alb, rough = self.scene.material(x)
        return ShadingSample(Tensor(sig), Tensor(n), valid, Tensor(alb), Tensor(rough))

    def env_visibility(self, x, dirs, active):
        P, Dn = active.shape
        V = np.zeros((P, Dn))
        pi, di = np.nonzero(active)
        if len(pi):
            V[pi, di] = transport.transmittance_brute(
                self._density_np, x[pi], dirs[di], self.n_light_steps, self.bbox
            )
        return Tensor(V)

    def light_visibility(self, x, dirs):
        return Tensor(transport.transmittance_brute(self._density_np, x, dirs, self.n_light_steps, self.bbox))

    def ray_depth(self, x, dirs):
        return Tensor(transport.expected_depth_brute(self._density_np, x, dirs, self.n_light_steps, self.bbox))


# ---------------------------------------------------------------- cameras


@dataclass
class CameraPose:
    position: tuple
    look_at: tuple = (0.0, 0.0, 0.0)
    up: tuple = (0.0, 0.0, 1.0)
    fov: float = 40.0  # vertical, degrees
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if not (0.0 < self.fov < 120.0):
            raise ValueError("fov must lie in (0, 120) degrees")

    def frame(self):
        pos = np.asarray(self.position, float)
        fwd = np.asarray(self.look_at, float) - pos
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(self.up, float))
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        return right, up, fwd

    def rays(self):
        """Pixel-centre rays in row-major order: origins and unit directions (H*W, 3)."""
        right, up, fwd = self.frame()
        tan = np.tan(np.radians(self.fov) / 2)
        aspect = self.width / self.height
        j = (np.arange(self.width) + 0.5) / self.width * 2 - 1
        i = 1 - (np.arange(self.height) + 0.5) / self.height * 2
        I, J = np.meshgrid(i, j, indexing="ij")
        d = (J * tan * aspect)[..., None] * right + (I * tan)[..., None] * up + fwd
        d = d.reshape(-1, 3)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.broadcast_to(np.asarray(self.position, float), d.shape).copy()
        return o, d

    def to_dict(self):
        return {"pos": list(map(float, self.position)), "lookat": list(map(float, self.look_at)),
                "up": list(map(float, self.up)), "fov": float(self.fov),
                "width": int(self.width), "height": int(self.height)}

    @classmethod
    def from_dict(cls, d, width=None, height=None):
        return cls(tuple(d["pos"]), tuple(d["lookat"]), tuple(d["up"]), float(d["fov"]),
                   int(d.get("width", width or 64)), int(d.get("height", height or 64)))


def orbit_pose(azimuth, elevation, radius=3.2, target=(0.0, 0.0, -0.3), fov=40.0, res=64):
    az, el = np.radians(azimuth), np.radians(elevation)
    t = np.asarray(target, float)
    pos = t + radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    return CameraPose(tuple(pos), tuple(t), (0.0, 0.0, 1.0), fov, res, res)


# ---------------------------------------------------------------- rendering


@dataclass
class RenderQuality:
    n_samples: int = 128
    n_light_steps: int = 16
    n_indirect: int = 32
    shade_samples: int | None = None
    min_weight: float = 1e-6
    indirect: bool = True

    def options(self, seed=0) -> RenderOptions:
        return RenderOptions(
            n_samples=self.n_samples, n_indirect=self.n_indirect, vis_mode="trace",
            indirect=self.indirect, n_light_steps=self.n_light_steps,
            shade_samples=self.shade_samples, min_weight=self.min_weight, seed=seed,
        )


def render_image(fields, pose: CameraPose, lighting: LightingCondition, opts: RenderOptions, chunk=256):
    """Render a full image through any fields object; returns (H, W, 3) arrays
    ``total``, ``direct``, ``indirect`` and an (H, W) ``depth`` map."""
    o, d = pose.rays()
    lb = LightingBatch([lighting])
    out = {k: np.zeros((len(o), 3)) for k in ("total", "direct", "indirect")}
    depth = np.zeros(len(o))
    for a in range(0, len(o), chunk):
        ids = np.arange(a, min(a + chunk, len(o)))
        br = transport.render_rays(fields, o[ids], d[ids], lb, 0, opts, ray_ids=ids)
        out["total"][ids] = br.total.value
        out["direct"][ids] = br.direct.value
        out["indirect"][ids] = br.indirect.value
        depth[ids] = br.depth
    shp = (pose.height, pose.width, 3)
    res = {k: v.reshape(shp) for k, v in out.items()}
    res["depth"] = depth.reshape(pose.height, pose.width)
    return res


def _direct_light(scene, x, n, valid, alb, rough, wo, lighting, n_steps, cull=True):
    """Plain-numpy direct lighting with brute-force transmittance."""
    P = len(x)
    out = np.zeros((P, 3))
    if P == 0:
        return out
    dens = scene.density
    if np.any(lighting.env > 0):
        dirs, solid = transport.env_grid(*lighting.env.shape[:2])
        E = lighting.env.reshape(-1, 3)
        R = brdf.eval_brdf(alb[:, None], rough[:, None], n[:, None], dirs[None], wo[:, None]).value
        act = (n @ dirs.T > 0) & ((n * wo).sum(-1) > 0)[:, None] & valid[:, None]
        if not cull:
            act[:] = True
        V = np.zeros(act.shape)
        pi, di = np.nonzero(act)
        V[pi, di] = transport.transmittance_brute(dens, x[pi], dirs[di], n_steps, scene.bbox)
        out += np.einsum("pd,pdc,dc,d->pc", V, R, E, solid)
    for p, I in zip(lighting.light_positions, lighting.light_intensities):
        to = p - x
        dist2 = (to**2).sum(-1)
        wi = to / np.sqrt(dist2)[:, None]
        R = brdf.eval_brdf(alb, rough, n, wi, wo).value
        V = transport.transmittance_brute(dens, x, wi, n_steps, scene.bbox)
        out += V[:, None] * R * I / dist2[:, None]
    return out * valid[:, None]


def _scene_sample(scene, x):
    n, valid = scene.normal(x)
    alb, rough = scene.material(x)
    return n, valid, alb, rough


def reference_rays(scene: AnalyticScene, origins, dirs, lighting: LightingCondition,
                   quality: "RenderQuality", seed=0, ray_ids=None, t_samples=None):
    """Ground-truth radiance for rays, written directly in numpy.

    Independent of the autodiff renderer: compositing uses an explicit
    cumulative product and every visibility or depth query marches the
    analytic density. Returns dict of (B, 3) ``total``/``direct``/``indirect``
    and (B,) ``depth``.
    """
    o_all = np.asarray(origins, float).reshape(-1, 3)
    d_all = np.asarray(dirs, float).reshape(-1, 3)
    B = len(o_all)
    ids_all = np.arange(B) if ray_ids is None else np.asarray(ray_ids)
    tn_all, tf_all, hit = transport.ray_box(o_all, d_all, *scene.bbox)
    res = {k: np.zeros((B, 3)) for k in ("total", "direct", "indirect")}
    res["depth"] = tf_all.copy()
    hi = np.nonzero(hit)[0]
    if len(hi) == 0:
        return res
    o, d, tn, tf, ids = o_all[hi], d_all[hi], tn_all[hi], tf_all[hi], ids_all[hi]
    if t_samples is None:
        t, delta = transport.stratified_depths(tn, tf, quality.n_samples, seed, ids)
    else:
        t = np.asarray(t_samples, float).reshape(B, -1)[hi]
        delta = (tf - tn) / t.shape[1]
    Bh, n = t.shape
    x = o[:, None] + t[..., None] * d[:, None]
    sig = scene.density(x)
    alpha = 1.0 - np.exp(-sig * delta[:, None])
    trans = np.cumprod(np.concatenate([np.ones((Bh, 1)), np.exp(-sig * delta[:, None])[:, :-1]], axis=1), axis=1)
    w = trans * alpha
    K = quality.shade_samples
    if K is not None and K < n:
        cols = np.sort(np.argpartition(-w, K - 1, axis=1)[:, :K], axis=1)
        rows = np.broadcast_to(np.arange(Bh)[:, None], cols.shape)
    else:
        rows, cols = np.nonzero(w > quality.min_weight) if quality.min_weight > 0 else np.indices((Bh, n))
    rows, cols = rows.reshape(-1), cols.reshape(-1)
    xs = x[rows, cols]
    nn, valid, alb, rough = _scene_sample(scene, xs)
    Ls = _direct_light(scene, xs, nn, valid, alb, rough, -d[rows], lighting, quality.n_light_steps)
    direct = np.zeros((Bh, 3))
    np.add.at(direct, rows, w[rows, cols][:, None] * Ls)
    opacity = w.sum(axis=1)
    t_prime = (w * t).sum(axis=1) + (1.0 - opacity) * tf
    indirect = np.zeros((Bh, 3))
    nd = quality.n_indirect
    if quality.indirect and nd > 0:
        xh = o + t_prime[:, None] * d
        nh, vh, ah, rh = _scene_sample(scene, xh)
        n_safe = np.where(vh[:, None], nh, [0.0, 0.0, 1.0])
        hd = transport.hemisphere_dirs(n_safe, nd, seed, ids)  # (Bh, nd, 3)
        xr = np.repeat(xh, nd, axis=0)
        dr = hd.reshape(-1, 3)
        depth = transport.expected_depth_brute(scene.density, xr, dr, quality.n_light_steps, scene.bbox)
        _, t_exit, _ = transport.ray_box(xr, dr, *scene.bbox)
        keep = (depth < transport.RenderOptions.escape_fraction * t_exit) & np.repeat(vh, nd)
        L2 = np.zeros((Bh * nd, 3))
        k = np.nonzero(keep)[0]
        if len(k):
            x2 = xr[k] + depth[k, None] * dr[k]
            n2, v2, a2, r2 = _scene_sample(scene, x2)
            L2[k] = _direct_light(scene, x2, n2, v2, a2, r2, -dr[k], lighting, quality.n_light_steps)
        R = brdf.eval_brdf(ah[:, None], rh[:, None], nh[:, None], hd, -d[:, None]).value
        L_ind = (L2.reshape(Bh, nd, 3) * R).sum(axis=1) * (2 * np.pi / nd)
        indirect = opacity[:, None] * L_ind
    res["direct"][hi] = direct
    res["indirect"][hi] = indirect
    res["total"][hi] = direct + indirect
    res["depth"][hi] = t_prime
    return res


def reference_render(scene: AnalyticScene, pose: CameraPose, lighting: LightingCondition,
                     quality: "RenderQuality | None" = None, seed=0, chunk=128):
    """Ground-truth HDR image plus breakdown channels, as (H, W, 3) arrays."""
    quality = quality or RenderQuality()
    o, d = pose.rays()
    parts = []
    for a in range(0, len(o), chunk):
        ids = np.arange(a, min(a + chunk, len(o)))
        parts.append(reference_rays(scene, o[ids], d[ids], lighting, quality, seed, ray_ids=ids))
    out = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    shp = (pose.height, pose.width, 3)
    res = {k: out[k].reshape(shp) for k in ("total", "direct", "indirect")}
    res["depth"] = out["depth"].reshape(pose.height, pose.width)
    return res


# ---------------------------------------------------------------- lighting regimes

REGIMES = ("point", "colorful+point", "ambient+point")
AMBIENT_GREY = 0.1


def light_radius(scene: AnalyticScene) -> float:
    return 4.0 * scene.diag


def random_point_light(rng, radius):
    """White light uniform on the upper hemisphere; unit irradiance at the origin."""
    v = rng.normal(size=3)
    v[2] = abs(v[2])
    v /= np.linalg.norm(v)
    return radius * v, np.full(3, radius**2)


def colorful_lights(rng, radius, count=8):
    pos, rgb = [], []
    for _ in range(count):
        p, _ = random_point_light(rng, radius)
        c = rng.uniform(0.05, 1.0, 3)
        c /= c.max()
        pos.append(p)
        rgb.append(c * radius**2 * 0.25)
    return np.array(pos), np.array(rgb)


def training_lighting(regime, rng, radius, fixed_colorful=None):
    p, i = random_point_light(rng, radius)
    if regime == "point":
        return LightingCondition(light_positions=p[None], light_intensities=i[None])
    if regime == "colorful+point":
        cp, ci = fixed_colorful
        return LightingCondition(light_positions=np.vstack([cp, p]), light_intensities=np.vstack([ci, i]))
    if regime == "ambient+point":
        return LightingCondition.constant_env(AMBIENT_GREY, light_positions=p[None], light_intensities=i[None])
    raise ValueError(f"unknown regime {regime!r}; valid regimes: {', '.join(REGIMES)}")


def test_lighting(k, rng, radius):
    """Novel illumination: alternately one white point light or eight colorful ones."""
    if k % 2 == 0:
        p, i = random_point_light(rng, radius)
        return LightingCondition(light_positions=p[None], light_intensities=i[None])
    cp, ci = colorful_lights(rng, radius)
    return LightingCondition(light_positions=cp, light_intensities=ci)


# ---------------------------------------------------------------- datasets


@dataclass
class DatasetSpec:
    scene: str = "sphere-plane"
    regime: str = "ambient+point"
    n_train: int = 16
    n_test: int = 8
    resolution: int = 64
    seed: int = 0
    quality: RenderQuality = field(default_factory=RenderQuality)

    def __post_init__(self):
        if isinstance(self.quality, dict):
            self.quality = RenderQuality(**self.quality)
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; valid regimes: {', '.join(REGIMES)}")
        if self.scene not in SCENES:
            raise ValueError(f"unknown scene {self.scene!r}; valid scenes: {', '.join(SCENES)}")


def dataset_views(spec: DatasetSpec):
    """Deterministic (split, pose, lighting) list for a spec."""
    scene = make_scene(spec.scene)
    radius = light_radius(scene)
    rng = np.random.default_rng([spec.seed, 1])
    fixed = colorful_lights(np.random.default_rng([spec.seed, 2]), radius)
    views = []
    for k in range(spec.n_train):
        az, el = rng.uniform(0, 360), rng.uniform(15, 60)
        views.append(("train", orbit_pose(az, el, res=spec.resolution), training_lighting(spec.regime, rng, radius, fixed)))
    trng = np.random.default_rng([spec.seed, 3])
    for k in range(spec.n_test):
        # a separate stream keeps test draws independent of the training count
        az, el = trng.uniform(0, 360), trng.uniform(20, 55)
        views.append(("test", orbit_pose(az, el, res=spec.resolution), test_lighting(k, trng, radius)))
    return scene, views


def generate_dataset(spec: DatasetSpec, out_dir, progress=None):
    """Render and write a dataset: per image an HDR PFM, an 8-bit PNG preview and
    the environment grid as PFM, plus ``dataset.json``. Writes into a temporary
    directory that is renamed on success and removed on failure.
    """
    out_dir = os.path.abspath(out_dir)
    parent = os.path.dirname(out_dir) or "."
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".gen-", dir=parent)
    try:
        scene, views = dataset_views(spec)
        images = []
        split = {"train": [], "test": []}
        for idx, (sp, pose, light) in enumerate(views):
            os.makedirs(os.path.join(tmp, sp), exist_ok=True)
            stem = f"{sp}/{idx:03d}"
            img = reference_render(scene, pose, light, spec.quality, seed=spec.seed * 1000 + idx)
            metrics_io.write_pfm(os.path.join(tmp, stem + ".pfm"), img["total"])
            metrics_io.write_png(os.path.join(tmp, stem + ".png"), img["total"])
            metrics_io.write_pfm(os.path.join(tmp, stem + "_env.pfm"), light.env)
            entry = {"file": stem + ".pfm", "split": sp, "pose": pose.to_dict()}
            entry.update(light.to_dict(env_file=stem + "_env.pfm"))
            images.append(entry)
            split[sp].append(idx)
            if progress:
                progress(idx + 1, len(views))
        manifest = {
            "scene": spec.scene, "regime": spec.regime, "seed": spec.seed,
            "resolution": spec.resolution, "quality": asdict(spec.quality),
            "images": images, "split": split,
        }
        write_manifest(os.path.join(tmp, "dataset.json"), manifest)
        if os.path.exists(out_dir):
            shutil.rmtree(out_dir)
        os.rename(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return os.path.join(out_dir, "dataset.json")


def write_manifest(path, manifest):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def read_manifest(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


class Dataset:
    """A generated dataset loaded into memory."""

    def __init__(self, root):
        self.root = root
        self.manifest = read_manifest(os.path.join(root, "dataset.json"))
        self.scene_name = self.manifest["scene"]
        self.entries = self.manifest["images"]

    def load_env(self, rel):
        return metrics_io.read_pfm(os.path.join(self.root, rel))

    def split(self, name):
        return [self.entries[i] for i in self.manifest["split"][name]]

    def pose(self, entry):
        return CameraPose.from_dict(entry["pose"])

    def lighting(self, entry):
        return LightingCondition.from_dict(entry, env_loader=self.load_env)

    def image(self, entry):
        return metrics_io.read_pfm(os.path.join(self.root, entry["file"]))
