"""Light transport through a density/reflectance volume.

Conventions: world up is +z. A ray is ``origin + t * direction``; for camera
rays the viewer direction is ``wo = -direction``. Environment grids are
indexed by the direction *toward* the emitter, so ``env[i, j]`` is the
radiance arriving at a point from the direction of cell (i, j).

A *fields* object supplies everything the renderer queries:

``bbox``               (lo, hi) corners of the scene box
``counts``             dict with "density" and "visibility" query totals
``sample(x)``          :class:`ShadingSample` at points (P, 3)
``density(x)``         densities (P,)
``env_visibility(x, dirs, active)``  (P, Dn) visibility toward grid dirs
``light_visibility(x, dirs)``        (P,) visibility toward point lights
``ray_depth(x, dirs)``               (P,) expected termination depth
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import brdf
from .diffmath import autodiff as ad
from .diffmath.autodiff import Tensor

ENV_HEIGHT = 12
ENV_WIDTH = 24


# ---------------------------------------------------------------- lighting


def env_grid(height: int = ENV_HEIGHT, width: int = ENV_WIDTH):
    """Cell-centre directions (H*W, 3) and exact cell solid angles (H*W,).

    Rows run over polar angle from +z; columns over azimuth from +x.
    """
    th0 = np.arange(height) * np.pi / height
    th1 = th0 + np.pi / height
    thc = 0.5 * (th0 + th1)
    phc = (np.arange(width) + 0.5) * 2 * np.pi / width
    T, P = np.meshgrid(thc, phc, indexing="ij")
    dirs = np.stack(
        [np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], axis=-1
    ).reshape(-1, 3)
    band = (np.cos(th0) - np.cos(th1)) * (2 * np.pi / width)
    solid = np.repeat(band, width)
    return dirs, solid


def env_lookup(env: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Nearest-cell radiance for arbitrary directions (..., 3)."""
    h, w = env.shape[:2]
    z = np.clip(dirs[..., 2], -1.0, 1.0)
    th = np.arccos(z)
    ph = np.mod(np.arctan2(dirs[..., 1], dirs[..., 0]), 2 * np.pi)
    i = np.clip((th / np.pi * h).astype(int), 0, h - 1)
    j = np.clip((ph / (2 * np.pi) * w).astype(int), 0, w - 1)
    return env[i, j]


@dataclass
class LightingCondition:
    """Known illumination: a lat-long environment grid plus point lights."""

    env: np.ndarray = field(default_factory=lambda: np.zeros((ENV_HEIGHT, ENV_WIDTH, 3)))
    light_positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    light_intensities: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.env = np.asarray(self.env, dtype=np.float64)
        self.light_positions = np.asarray(self.light_positions, dtype=np.float64).reshape(-1, 3)
        self.light_intensities = np.asarray(self.light_intensities, dtype=np.float64).reshape(-1, 3)
        if self.env.ndim != 3 or self.env.shape[2] != 3:
            raise ValueError("env must be (H, W, 3)")
        if np.any(self.env < 0) or np.any(self.light_intensities < 0):
            raise ValueError("radiance must be nonnegative")
        if len(self.light_positions) != len(self.light_intensities):
            raise ValueError("light positions/intensities length mismatch")

    @classmethod
    def constant_env(cls, rgb, height=ENV_HEIGHT, width=ENV_WIDTH, **kw):
        env = np.broadcast_to(np.asarray(rgb, float), (height, width, 3)).copy()
        return cls(env=env, **kw)

    @property
    def num_lights(self) -> int:
        return len(self.light_positions)

    def scaled(self, s: float) -> "LightingCondition":
        return LightingCondition(self.env * s, self.light_positions.copy(), self.light_intensities * s)

    def __add__(self, other: "LightingCondition") -> "LightingCondition":
        return LightingCondition(
            self.env + other.env,
            np.concatenate([self.light_positions, other.light_positions]),
            np.concatenate([self.light_intensities, other.light_intensities]),
        )

    def to_dict(self, env_file: str | None = None) -> dict:
        lights = [
            {"pos": p.tolist(), "rgb": c.tolist()}
            for p, c in zip(self.light_positions, self.light_intensities)
        ]
        h, w = self.env.shape[:2]
        env = {"width": w, "height": h}
        flat = self.env.reshape(-1, 3)
        if env_file is not None:
            env["file"] = env_file
        elif np.all(flat == flat[0]):
            env["constant"] = flat[0].tolist()
        else:
            env["values"] = self.env.tolist()
        return {"lights": lights, "env": env}

    @classmethod
    def from_dict(cls, d: dict, env_loader=None) -> "LightingCondition":
        env_d = d.get("env", {"width": ENV_WIDTH, "height": ENV_HEIGHT, "constant": [0, 0, 0]})
        h, w = int(env_d["height"]), int(env_d["width"])
        if "constant" in env_d:
            env = np.broadcast_to(np.asarray(env_d["constant"], float), (h, w, 3)).copy()
        elif "values" in env_d:
            env = np.asarray(env_d["values"], float)
        elif "file" in env_d:
            if env_loader is None:
                raise ValueError("environment file given but no loader")
            env = env_loader(env_d["file"])
        else:
            raise ValueError("env needs one of constant/values/file")
        lights = d.get("lights", [])
        pos = np.array([l["pos"] for l in lights], float).reshape(-1, 3)
        rgb = np.array([l["rgb"] for l in lights], float).reshape(-1, 3)
        return cls(env, pos, rgb)


class LightingBatch:
    """Several lighting conditions packed for vectorized shading.

    Point lights are zero-padded to a common count.
    """

    def __init__(self, lightings):
        lightings = list(lightings)
        shapes = {l.env.shape for l in lightings}
        if len(shapes) != 1:
            raise ValueError("all environment grids in a batch must share a shape")
        h, w, _ = shapes.pop()
        self.height, self.width = h, w
        self.dirs, self.solid = env_grid(h, w)
        self.env = np.stack([l.env.reshape(-1, 3) for l in lightings])  # (K, Dn, 3)
        nl = max([l.num_lights for l in lightings] + [0])
        self.light_pos = np.zeros((len(lightings), nl, 3))
        self.light_rgb = np.zeros((len(lightings), nl, 3))
        for k, l in enumerate(lightings):
            self.light_pos[k, : l.num_lights] = l.light_positions
            self.light_rgb[k, : l.num_lights] = l.light_intensities
        self.env_active = bool(np.any(self.env > 0))
        self.num_lights = nl


# ---------------------------------------------------------------- geometry


def ray_box(origins, dirs, lo, hi):
    """Slab intersection. Returns (t_near, t_far, hit) with t_near clamped at 0."""
    o = np.asarray(origins, float)
    d = np.asarray(dirs, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (np.asarray(lo) - o) * inv
        t1 = (np.asarray(hi) - o) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t0), np.inf, np.maximum(t0, t1))
    t_near = np.maximum(tmin.max(axis=-1), 0.0)
    t_far = tmax.min(axis=-1)
    hit = t_far > t_near
    return t_near, t_far, hit


def bbox_diag(bbox) -> float:
    lo, hi = bbox
    return float(np.linalg.norm(np.asarray(hi) - np.asarray(lo)))


def orthonormal_frame(n):
    """Two tangents completing each unit normal in n (..., 3) to a frame."""
    n = np.asarray(n, float)
    a = np.where(np.abs(n[..., :1]) > 0.9, [0.0, 1.0, 0.0], [1.0, 0.0, 0.0])
    t = np.cross(n, a)
    t /= np.linalg.norm(t, axis=-1, keepdims=True)
    b = np.cross(n, t)
    return t, b


# ---------------------------------------------------------------- randomness

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLD = np.uint64(0x9E3779B97F4A7C15)


def _mix(z):
    z = z.astype(np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def hash_uniform(seed: int, stream: int, ids, n: int) -> np.ndarray:
    """Deterministic uniforms (len(ids), n) in [0, 1) keyed by (seed, stream, id, j).

    Independent of how rays are batched, so a ray renders identically alone
    or inside an image.
    """
    ids = np.asarray(ids, dtype=np.uint64).reshape(-1, 1)
    j = np.arange(n, dtype=np.uint64).reshape(1, -1)
    with np.errstate(over="ignore"):
        key = _mix(np.uint64(seed) * _GOLD + np.uint64(stream))
        z = _mix(key ^ (ids * _GOLD)) + j * _GOLD
        z = _mix(z)
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


STREAM_STRATIFY = 1
STREAM_HEMISPHERE = 2


def stratified_depths(t_near, t_far, n, seed, ray_ids, iteration=0):
    """One jittered depth per bin; returns (t (B, n), delta (B,))."""
    delta = (t_far - t_near) / n
    u = hash_uniform(seed + 7919 * iteration, STREAM_STRATIFY, ray_ids, n)
    t = t_near[:, None] + (np.arange(n)[None, :] + u) * delta[:, None]
    return t, delta


def hemisphere_dirs(normals, d, seed, ray_ids, iteration=0):
    """Uniform directions on the hemisphere around each normal: (B, d, 3)."""
    u = hash_uniform(seed + 7919 * iteration, STREAM_HEMISPHERE, ray_ids, 2 * d)
    u1, u2 = u[:, :d], u[:, d:]
    cos_t = u1
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t**2))
    phi = 2 * np.pi * u2
    t, b = orthonormal_frame(normals)
    return (
        (sin_t * np.cos(phi))[..., None] * t[:, None, :]
        + (sin_t * np.sin(phi))[..., None] * b[:, None, :]
        + cos_t[..., None] * normals[:, None, :]
    )


# ---------------------------------------------------------------- brute-force oracles


def _segments(x, w, bbox):
    t_near, t_far, hit = ray_box(x, w, *bbox)
    return t_near, t_far, hit


def _march(density_fn, x, w, n_steps, bbox, chunk=1 << 18):
    """Midpoint densities along each in-box segment; returns (s, sigma, ds, t0, t1, hit)."""
    if n_steps < 2:
        raise ValueError("n_steps must be >= 2")
    x = np.asarray(x, float).reshape(-1, 3)
    w = np.asarray(w, float).reshape(-1, 3)
    t0, t1, hit = _segments(x, w, bbox)
    t1 = np.where(hit, t1, t0)
    ds = (t1 - t0) / n_steps
    s = t0[:, None] + (np.arange(n_steps)[None, :] + 0.5) * ds[:, None]
    sigma = np.empty_like(s)
    rows = max(1, chunk // n_steps)
    for a in range(0, len(x), rows):
        pts = x[a : a + rows, None, :] + s[a : a + rows, :, None] * w[a : a + rows, None, :]
        sigma[a : a + rows] = np.asarray(density_fn(pts.reshape(-1, 3))).reshape(-1, n_steps)
    return s, sigma, ds, t0, t1, hit


def transmittance_brute(density_fn, x, w, n_steps, bbox):
    """exp(-integral of density) from each x along w to the box exit (midpoint rule)."""
    shp = np.shape(x)[:-1]
    s, sigma, ds, *_ = _march(density_fn, x, w, n_steps, bbox)
    return np.exp(-(sigma * ds[:, None]).sum(axis=1)).reshape(shp)


def expected_depth_brute(density_fn, x, w, n_steps, bbox):
    """Expected termination distance from x along w; leftover transmittance lands at the exit."""
    shp = np.shape(x)[:-1]
    s, sigma, ds, t0, t1, hit = _march(density_fn, x, w, n_steps, bbox)
    tau = sigma * ds[:, None]
    T = np.exp(-(np.cumsum(tau, axis=1) - tau))
    wts = T * (1.0 - np.exp(-tau))
    rest = np.exp(-tau.sum(axis=1))
    d = (wts * s).sum(axis=1) + rest * t1
    return np.where(hit, d, 0.0).reshape(shp)


def visibility_and_depth_brute(density_fn, x, w, n_steps, bbox):
    shp = np.shape(x)[:-1]
    s, sigma, ds, t0, t1, hit = _march(density_fn, x, w, n_steps, bbox)
    tau = sigma * ds[:, None]
    csum = np.cumsum(tau, axis=1)
    T = np.exp(-(csum - tau))
    wts = T * (1.0 - np.exp(-tau))
    rest = np.exp(-csum[:, -1])
    d = np.where(hit, (wts * s).sum(axis=1) + rest * t1, 0.0)
    return rest.reshape(shp), d.reshape(shp)


# ---------------------------------------------------------------- quadrature


def compositing_weights(sigma, delta):
    """w_j = V_j * (1 - exp(-sigma_j delta)) with V_j = exp(-sum_{s<j} sigma_s delta).

    ``sigma`` (B, N) Tensor or array, ``delta`` (B,) array. Returns (w, V).
    """
    sigma = ad.as_tensor(sigma)
    tau = sigma * np.asarray(delta, float)[:, None]
    # exclusive running sum built from a prefix so V never increases by rounding
    excl = ad.concatenate([Tensor(np.zeros(tau.shape[:-1] + (1,))), ad.cumsum(tau[..., :-1], axis=-1)], axis=-1)
    V = ad.exp(-excl)
    w = V * (1.0 - ad.exp(-tau))
    return w, V


def composite_quadrature(sigma, delta, radiance):
    """sum_j V_j alpha_j L_j for (B, N) densities and (B, N, 3) radiance."""
    w, _ = compositing_weights(sigma, delta)
    return ad.tsum(ad.expand_dims(w, -1) * radiance, axis=1)


def bidirectional_targets(sigma, t, delta, t_near, t_far):
    """Visibility and expected depth at every sample, looking both ways along the ray.

    Returns arrays (B, N): v_fwd, d_fwd (toward the exit), v_bwd, d_bwd (toward
    the entry). Each excludes the sample's own density; the leftover
    transmittance is placed at the box boundary.
    """
    sigma = np.asarray(sigma, float)
    tau = sigma * delta[:, None]
    alpha = 1.0 - np.exp(-tau)
    c = np.cumsum(tau, axis=1)
    total = c[:, -1:]
    v_bwd = np.exp(-(c - tau))
    v_fwd = np.exp(-(total - c))
    n = sigma.shape[1]
    jj = np.arange(n)[:, None]
    kk = np.arange(n)[None, :]
    # k ahead of j: optical depth strictly between them is c_{k-1} - c_j
    ahead = kk > jj
    od = (c - tau)[:, None, :] - c[:, :, None]
    with np.errstate(over="ignore"):
        wf = np.where(ahead, np.exp(-np.where(ahead, od, 0.0)), 0.0) * alpha[:, None, :]
    dist_f = t[:, None, :] - t[:, :, None]
    d_fwd = (wf * dist_f).sum(axis=2) + v_fwd * (t_far[:, None] - t)
    behind = kk < jj
    od_b = (c - tau)[:, :, None] - c[:, None, :]
    with np.errstate(over="ignore"):
        wb = np.where(behind, np.exp(-np.where(behind, od_b, 0.0)), 0.0) * alpha[:, None, :]
    dist_b = t[:, :, None] - t[:, None, :]
    d_bwd = (wb * dist_b).sum(axis=2) + v_bwd * (t - t_near[:, None])
    return v_fwd, d_fwd, v_bwd, d_bwd


# ---------------------------------------------------------------- shading


@dataclass
class ShadingSample:
    sigma: Tensor  # (P,)
    normal: Tensor  # (P, 3)
    valid: np.ndarray  # (P,) bool, False where the normal is degenerate
    albedo: Tensor  # (P, 3)
    roughness: Tensor  # (P,)

    def take(self, idx) -> "ShadingSample":
        return ShadingSample(
            self.sigma[idx], self.normal[idx], self.valid[idx], self.albedo[idx], self.roughness[idx]
        )


def shade_direct(fields, x, s: ShadingSample, wo, lights: LightingBatch, light_idx, unit_visibility=False, cull=True):
    """Direct reflected radiance (P, 3) at points x toward wo.

    Sums the environment grid (visibility x radiance x reflectance x solid
    angle) and every point light (visibility x intensity / dist^2 x reflectance).
    """
    x = np.asarray(x, float)
    P = len(x)
    wo = np.asarray(wo, float)
    light_idx = np.asarray(light_idx, int)
    out = Tensor(np.zeros((P, 3)))
    if P == 0:
        return out
    validf = s.valid.astype(np.float64)
    if lights.env_active:
        dirs, solid = lights.dirs, lights.solid
        R = brdf.eval_brdf(
            ad.expand_dims(s.albedo, 1),
            ad.expand_dims(s.roughness, 1),
            ad.expand_dims(s.normal, 1),
            dirs[None, :, :],
            wo[:, None, :],
        )  # (P, Dn, 3)
        n_val = s.normal.value
        active = (n_val @ dirs.T > 0) & ((n_val * wo).sum(-1) > 0)[:, None] & s.valid[:, None]
        if not cull:
            active = np.ones_like(active)
        if unit_visibility:
            V = Tensor(active.astype(np.float64))
        else:
            V = fields.env_visibility(x, dirs, active)
        E = lights.env[light_idx]  # (P, Dn, 3)
        weight = E * solid[None, :, None]
        out = out + ad.tsum(ad.expand_dims(V, -1) * R * weight, axis=1)
    if lights.num_lights:
        lp = lights.light_pos[light_idx]  # (P, L, 3)
        li = lights.light_rgb[light_idx]
        to = lp - x[:, None, :]
        dist2 = (to**2).sum(-1)
        wi = to / np.sqrt(dist2)[..., None]
        R = brdf.eval_brdf(
            ad.expand_dims(s.albedo, 1),
            ad.expand_dims(s.roughness, 1),
            ad.expand_dims(s.normal, 1),
            wi,
            wo[:, None, :],
        )
        L = lp.shape[1]
        if unit_visibility:
            V = Tensor(np.ones((P, L)))
        else:
            V = ad.reshape(
                fields.light_visibility(np.repeat(x, L, axis=0), wi.reshape(-1, 3)), (P, L)
            )
        irr = li / dist2[..., None]
        out = out + ad.tsum(ad.expand_dims(V, -1) * R * irr, axis=1)
    return out * validf[:, None]


@dataclass
class RenderOptions:
    n_samples: int = 256
    n_indirect: int = 128
    vis_mode: str = "nvf"  # "nvf" or "trace"
    indirect: bool = True
    n_light_steps: int = 256
    shade_samples: int | None = None  # shade only the K highest-weight samples
    min_weight: float = 0.0  # with shade_samples None, skip samples whose weight is at most this
    cull_backfacing: bool = True
    escape_fraction: float = 0.98
    seed: int = 0
    unit_visibility: bool = False

    def __post_init__(self):
        if self.vis_mode not in ("nvf", "trace"):
            raise ValueError(f"vis_mode must be 'nvf' or 'trace', got {self.vis_mode!r}")


@dataclass
class RadianceBreakdown:
    total: Tensor  # (B, 3)
    direct: Tensor
    indirect: Tensor
    opacity: np.ndarray  # (B,)
    depth: np.ndarray  # (B,) expected termination depth t'
    extras: dict = field(default_factory=dict)


def shade_indirect(fields, x_hit, s_hit: ShadingSample, wo, lights, light_idx, opts: RenderOptions, ray_ids, iteration=0):
    """One-bounce indirect radiance (B, 3) leaving x_hit toward wo.

    Secondary points sit at the visibility field's expected depth along
    ``n_indirect`` uniform hemisphere directions; each is shaded with direct
    light only. Directions whose depth reaches ``escape_fraction`` of the box
    exit are treated as escaping and contribute nothing.
    """
    B = len(x_hit)
    d = opts.n_indirect
    if B == 0 or d == 0:
        return Tensor(np.zeros((B, 3)))
    n_val = s_hit.normal.value
    n_safe = np.where(s_hit.valid[:, None], n_val, [0.0, 0.0, 1.0])
    dirs = hemisphere_dirs(n_safe, d, opts.seed, ray_ids, iteration)  # (B, d, 3)
    xr = np.repeat(x_hit, d, axis=0)
    dr = dirs.reshape(-1, 3)
    depth = ad.value_of(fields.ray_depth(xr, dr))
    _, t_exit, _ = ray_box(xr, dr, *fields.bbox)
    keep = (depth < opts.escape_fraction * t_exit) & np.repeat(s_hit.valid, d)
    x2 = xr + depth[:, None] * dr
    idx = np.nonzero(keep)[0]
    L2 = Tensor(np.zeros((B * d, 3)))
    if len(idx):
        s2 = fields.sample(x2[idx])
        shaded = shade_direct(
            fields, x2[idx], s2, -dr[idx], lights, np.repeat(light_idx, d)[idx],
            unit_visibility=opts.unit_visibility, cull=opts.cull_backfacing,
        )
        L2 = ad.scatter(shaded, idx, (B * d, 3))
    L2 = ad.reshape(L2, (B, d, 3))
    R = brdf.eval_brdf(
        ad.expand_dims(s_hit.albedo, 1),
        ad.expand_dims(s_hit.roughness, 1),
        ad.expand_dims(s_hit.normal, 1),
        dirs,
        wo[:, None, :],
    )
    return ad.tsum(L2 * R, axis=1) * (2 * np.pi / d)


def render_rays(fields, origins, dirs, lights: LightingBatch, light_idx, opts: RenderOptions,
                ray_ids=None, iteration=0, t_samples=None):
    """Render rays; returns a :class:`RadianceBreakdown` with (B, 3) radiance.

    ``t_samples`` (B, n) injects sample depths instead of stratified jitter.
    Rays missing the box render black.
    """
    origins = np.asarray(origins, float).reshape(-1, 3)
    dirs = np.asarray(dirs, float).reshape(-1, 3)
    B = len(origins)
    light_idx = np.broadcast_to(np.asarray(light_idx, int), (B,))
    ray_ids = np.arange(B) if ray_ids is None else np.asarray(ray_ids)
    t_near, t_far, hit = ray_box(origins, dirs, *fields.bbox)
    hi = np.nonzero(hit)[0]
    zeros = np.zeros((B, 3))
    if len(hi) == 0:
        z = Tensor(zeros)
        return RadianceBreakdown(z, z, z, np.zeros(B), t_far.copy())

    o, d, tn, tf = origins[hi], dirs[hi], t_near[hi], t_far[hi]
    n = opts.n_samples
    if t_samples is None:
        t, delta = stratified_depths(tn, tf, n, opts.seed, ray_ids[hi], iteration)
    else:
        t = np.asarray(t_samples, float).reshape(B, -1)[hi]
        n = t.shape[1]
        delta = (tf - tn) / n
    Bh = len(hi)
    x = o[:, None, :] + t[..., None] * d[:, None, :]
    wo = -d
    K = opts.shade_samples
    ray_of = None
    if (K is None or K >= n) and opts.min_weight <= 0:
        samp = fields.sample(x.reshape(-1, 3))
        sigma = ad.reshape(samp.sigma, (Bh, n))
        w, _ = compositing_weights(sigma, delta)
        sel = np.arange(Bh * n)
        top = None
        ws = ad.reshape(w, (-1,))
    else:
        sigma = ad.reshape(fields.density(x.reshape(-1, 3)), (Bh, n))
        w, _ = compositing_weights(sigma, delta)
        if K is None or K >= n:
            top = None
            sel = np.nonzero(w.value.reshape(-1) > opts.min_weight)[0]
            ray_of = sel // n
        else:
            top = np.sort(np.argpartition(-w.value, K - 1, axis=1)[:, :K], axis=1)
            sel = (top + n * np.arange(Bh)[:, None]).reshape(-1)
        samp = fields.sample(x.reshape(-1, 3)[sel])
        ws = ad.reshape(w, (-1,))[sel]
    if ray_of is None:
        per = len(sel) // Bh
        ray_of = np.repeat(np.arange(Bh), per)
    L_dir = shade_direct(
        fields, x.reshape(-1, 3)[sel], samp,
        wo[ray_of], lights, light_idx[hi][ray_of],
        unit_visibility=opts.unit_visibility, cull=opts.cull_backfacing,
    )
    if top is None and opts.min_weight > 0 and (K is None or K >= n):
        direct = ad.scatter(ad.expand_dims(ws, -1) * L_dir, ray_of, (Bh, 3))
    else:
        direct = ad.tsum(ad.reshape(ad.expand_dims(ws, -1) * L_dir, (Bh, per, 3)), axis=1)
    opacity = ad.tsum(w, axis=1)
    t_prime = (w.value * t).sum(axis=1) + (1.0 - opacity.value) * tf
    extras = {"t": t, "delta": delta, "weights": w.value, "hit_index": hi, "shade_index": top}
    if opts.indirect:
        x_hit = o + t_prime[:, None] * d
        s_hit = fields.sample(x_hit)
        L_ind = shade_indirect(fields, x_hit, s_hit, wo, lights, light_idx[hi], opts, ray_ids[hi], iteration)
        indirect = ad.expand_dims(opacity, -1) * L_ind
        extras["hit_sample"] = s_hit
    else:
        indirect = Tensor(np.zeros((Bh, 3)))
    total = direct + indirect
    extras["sigma"] = sigma

    def full(tn_):
        return ad.scatter(tn_, hi, (B, 3)) if Bh < B else tn_

    op = np.zeros(B)
    op[hi] = opacity.value
    depth = t_far.copy()
    depth[hi] = t_prime
    return RadianceBreakdown(full(total), full(direct), full(indirect), op, depth, extras)


# ---------------------------------------------------------------- instrumentation


def count_queries(fields, opts: RenderOptions, lights: LightingBatch, n_rays=1, origin=None, direction=None):
    """Render ``n_rays`` identical rays and report per-ray query totals.

    ``fields.counts`` must be instrumented; shading of every sample and every
    grid direction is forced so counts follow the closed forms.
    """
    o = np.array([[0.0, -3.0, 0.0]]) if origin is None else np.asarray(origin, float).reshape(1, 3)
    dvec = np.array([[0.0, 1.0, 0.0]]) if direction is None else np.asarray(direction, float).reshape(1, 3)
    o = np.repeat(o, n_rays, axis=0)
    dvec = np.repeat(dvec, n_rays, axis=0)
    # every sample and direction shaded and no secondary ray escapes, so the
    # totals are exactly the worst case the closed forms describe
    run = dataclasses.replace(opts, shade_samples=None, min_weight=0.0, cull_backfacing=False, escape_fraction=np.inf)
    fields.counts["density"] = 0
    fields.counts["visibility"] = 0
    render_rays(fields, o, dvec, lights, 0, run)
    return {
        "density_evals": fields.counts["density"] // n_rays,
        "visibility_evals": fields.counts["visibility"] // n_rays,
    }


def closed_form_counts(mode: str, n: int, ell: int, d: int = 0, m: int | None = None) -> dict:
    """Per-ray query counts for one camera ray.

    ``nvf-direct``      n density, n*ell visibility
    ``brute-direct``    n + n*ell*m density (m light-ray steps), no visibility
    ``nvf-indirect``    nvf-direct plus 1 + d density (bounce point and secondaries),
                        d depth queries and d*ell visibility at the secondaries
    ``brute-indirect``  brute-direct plus, per camera sample, d secondary rays of
                        m steps each shaded by brute direct light (analytic only)
    """
    m = n if m is None else m
    if mode == "nvf-direct":
        return {"density_evals": n, "visibility_evals": n * ell}
    if mode == "brute-direct":
        return {"density_evals": n + n * ell * m, "visibility_evals": 0}
    if mode == "nvf-indirect":
        return {"density_evals": n + 1 + d, "visibility_evals": n * ell + d + d * ell}
    if mode == "brute-indirect":
        return {"density_evals": n + n * ell * m + n * d * m * (1 + ell * m), "visibility_evals": 0}
    raise ValueError(f"unknown mode {mode!r}")
