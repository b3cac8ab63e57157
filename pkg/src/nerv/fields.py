"""Neural shape, reflectance and visibility fields, and their renderer adapter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import brdf, transport
from .diffmath import autodiff as ad
from .diffmath.autodiff import GradientTape, Tensor
from .diffmath.nn import ACTIVATIONS, DenseNetwork, PositionalEncodingSpec, forward, positional_encode
from .transport import ShadingSample

EPS_GRAD = 1e-8
FEATURE_WIDTH = 8
POSITION_ENCODING = PositionalEncodingSpec(8)
DIRECTION_ENCODING = PositionalEncodingSpec(5)
UNIT_BOX = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


@dataclass(frozen=True)
class Architecture:
    width: int = 256
    layers: int = 8
    head_width: int = 128
    head_layers: int = 4
    normals: str = "analytic"  # or "mlp"

    def __post_init__(self):
        if self.normals not in ("analytic", "mlp"):
            raise ValueError(f"normals must be 'analytic' or 'mlp', got {self.normals!r}")
        if min(self.width, self.layers, self.head_width, self.head_layers) < 1:
            raise ValueError("network sizes must be positive")


def analytic_normal(density_fn, x):
    """-grad(density)/|grad(density)| at points x (P, 3).

    Returns (sigma Tensor (P,), normal Tensor (P, 3), valid mask). When an
    outer tape is recording, the normals stay differentiable with respect to
    whatever ``density_fn`` depends on.
    """
    outer = ad.is_recording()
    with GradientTape() as tape:
        xt = tape.watch(Tensor(np.asarray(x, float)))
        sigma = density_fn(xt)
    g = tape.gradient(sigma, xt, create_graph=outer)
    gn = ad.norm(g)
    valid = gn.value > EPS_GRAD
    n = -g / ad.expand_dims(ad.where(valid, gn, 1.0), -1)
    n = n * valid[:, None].astype(np.float64)
    return sigma, n, valid


class NervModel:
    """Shape, reflectance and visibility networks over one bounding box."""

    def __init__(self, arch: Architecture = Architecture(), bbox=UNIT_BOX, seed=0):
        self.arch = arch
        self.bbox = (np.asarray(bbox[0], float), np.asarray(bbox[1], float))
        self.diag = transport.bbox_diag(self.bbox)
        self.pos_enc = POSITION_ENCODING
        self.dir_enc = DIRECTION_ENCODING
        rng = np.random.default_rng(seed)
        pw = self.pos_enc.width(3)
        dw = self.dir_enc.width(3)
        shape_out = 4 if arch.normals == "mlp" else 1
        self.shape = DenseNetwork.mlp(pw, arch.width, arch.layers, shape_out, rng, "shape")
        self.reflectance = DenseNetwork.mlp(pw, arch.width, arch.layers, 4, rng, "reflectance")
        self.vis_trunk = DenseNetwork.mlp(pw, arch.width, arch.layers, FEATURE_WIDTH, rng, "vis_trunk")
        self.vis_head = DenseNetwork.mlp(FEATURE_WIDTH + dw, arch.head_width, arch.head_layers, 2, rng, "vis_head")
        self.snap_to_float32()

    # ------------------------------------------------------------ parameters

    @property
    def networks(self):
        return [self.shape, self.reflectance, self.vis_trunk, self.vis_head]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for net in self.networks:
            out.update(net.named_parameters())
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def group(self, name):
        """Parameters of one field: 'shape', 'reflectance' or 'visibility'."""
        if name == "visibility":
            return self.vis_trunk.parameters() + self.vis_head.parameters()
        return {"shape": self.shape, "reflectance": self.reflectance}[name].parameters()

    def snap_to_float32(self):
        """Round weights onto the float32 grid so checkpoints hold them exactly."""
        for p in self.parameters():
            p.value[...] = p.value.astype(np.float32)

    def state_arrays(self):
        return {k: v.value for k, v in self.named_parameters().items()}

    def load_arrays(self, arrays):
        params = self.named_parameters()
        for name, p in params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint lacks array {name!r}")
            a = np.asarray(arrays[name])
            if a.shape != p.shape:
                raise ValueError(f"array {name!r} has shape {a.shape}, model expects {p.shape}")
            p.value[...] = a

    # ------------------------------------------------------------ fields

    def encode_position(self, x):
        return positional_encode(x, self.pos_enc)

    def _shape_raw(self, x):
        return forward(self.shape, self.encode_position(x))

    def density(self, x) -> Tensor:
        """Softplus density at points (P, 3)."""
        return ad.softplus(self._shape_raw(x)[:, 0])

    def sample(self, x) -> ShadingSample:
        """Density, normal, albedo and roughness at points (P, 3)."""
        x = np.asarray(x, float).reshape(-1, 3)
        if self.arch.normals == "analytic":
            sigma, n, valid = analytic_normal(self.density, x)
        else:
            raw = self._shape_raw(x)
            sigma = ad.softplus(raw[:, 0])
            n, valid = _normalize(raw[:, 1:4])
        alb, rough = self.reflectance_at(x)
        return ShadingSample(sigma, n, valid, alb, rough)

    def reflectance_at(self, x):
        raw = forward(self.reflectance, self.encode_position(x))
        albedo = ad.sigmoid(raw[:, 0:3])
        rough = brdf.GAMMA_MIN + (1.0 - brdf.GAMMA_MIN) * ad.sigmoid(raw[:, 3])
        return albedo, rough

    def mlp_normal(self, x):
        if self.arch.normals != "mlp":
            raise RuntimeError("model was built with analytic normals; no normal head exists")
        return _normalize(self._shape_raw(x)[:, 1:4])

    def features(self, x) -> Tensor:
        return forward(self.vis_trunk, self.encode_position(x))

    def _head_first(self):
        w = self.vis_head.weights[0]
        return w[:FEATURE_WIDTH], w[FEATURE_WIDTH:], self.vis_head.biases[0]

    def _head_rest(self, pre):
        net = self.vis_head
        h = ACTIVATIONS[net.activations[0]](pre)
        for w, b, act in zip(net.weights[1:], net.biases[1:], net.activations[1:]):
            h = ACTIVATIONS[act](ad.matmul(h, w) + b)
        if not np.all(np.isfinite(h.value)):
            raise FloatingPointError("vis_head: non-finite activation")
        V = ad.sigmoid(h[:, 0])
        D = self.diag * ad.sigmoid(h[:, 1])
        return V, D

    def visibility_pairs(self, x, dirs):
        """Visibility in [0, 1] and expected depth in [0, diag] for paired (x_i, w_i)."""
        feat = self.features(x)
        wa, wb, b = self._head_first()
        pre = ad.matmul(feat, wa) + ad.matmul(positional_encode(dirs, self.dir_enc), wb) + b
        return self._head_rest(pre)

    def visibility_grid(self, x, dirs, active):
        """Visibility for points (P,) against directions (Dn,) where ``active``; zero elsewhere.

        The first head layer is split so the point and direction halves are
        computed once each and summed per active pair.
        """
        P, Dn = active.shape
        pi, di = np.nonzero(active)
        if len(pi) == 0:
            return Tensor(np.zeros((P, Dn)))
        feat = self.features(x)
        wa, wb, b = self._head_first()
        a = ad.matmul(feat, wa)  # (P, h)
        e = ad.matmul(positional_encode(dirs, self.dir_enc), wb)  # (Dn, h)
        pre = a[pi] + e[di] + b
        V, _ = self._head_rest(pre)
        return ad.reshape(ad.scatter(V, pi * Dn + di, (P * Dn,)), (P, Dn))


def _normalize(v):
    ln = ad.norm(v)
    valid = ln.value > 1e-12
    n = v / ad.expand_dims(ad.where(valid, ln, 1.0), -1)
    return n * valid[:, None].astype(np.float64), valid


class ModelFields:
    """Exposes a :class:`NervModel` through the renderer's fields interface.

    ``vis_mode`` chooses where visibility comes from: "nvf" queries the
    visibility network, "trace" marches the shape network's density toward
    point lights (environment visibility and bounce depths stay learned),
    and "brute" marches density for every visibility and depth query.
    Visibility values enter rendering as constants: the visibility network
    learns only from the consistency terms of the training loss.
    """

    def __init__(self, model: NervModel, vis_mode="nvf", n_light_steps=64):
        if vis_mode not in ("nvf", "trace", "brute"):
            raise ValueError(f"unknown vis_mode {vis_mode!r}")
        self.model = model
        self.bbox = model.bbox
        self.vis_mode = vis_mode
        self.n_light_steps = n_light_steps
        self.counts = {"density": 0, "visibility": 0}

    def _density_np(self, x):
        x = np.asarray(x, float)
        self.counts["density"] += int(np.prod(x.shape[:-1]))
        with ad.no_record():
            return self.model.density(x.reshape(-1, 3)).value.reshape(x.shape[:-1])

    def _march_visibility(self, x, dirs):
        return Tensor(transport.transmittance_brute(self._density_np, x, dirs, self.n_light_steps, self.bbox))

    def density(self, x):
        x = np.asarray(x, float).reshape(-1, 3)
        self.counts["density"] += len(x)
        return self.model.density(x)

    def sample(self, x):
        x = np.asarray(x, float).reshape(-1, 3)
        self.counts["density"] += len(x)
        return self.model.sample(x)

    def env_visibility(self, x, dirs, active):
        if self.vis_mode == "brute":
            P, Dn = active.shape
            V = np.zeros((P, Dn))
            pi, di = np.nonzero(active)
            if len(pi):
                V[pi, di] = self._march_visibility(x[pi], dirs[di]).value
            return Tensor(V)
        self.counts["visibility"] += int(active.sum())
        with ad.no_record():
            return self.model.visibility_grid(x, dirs, active)

    def light_visibility(self, x, dirs):
        if self.vis_mode in ("trace", "brute"):
            return self._march_visibility(x, dirs)
        self.counts["visibility"] += len(x)
        with ad.no_record():
            return self.model.visibility_pairs(x, dirs)[0]

    def ray_depth(self, x, dirs):
        if self.vis_mode == "brute":
            return Tensor(transport.expected_depth_brute(self._density_np, x, dirs, self.n_light_steps, self.bbox))
        self.counts["visibility"] += len(x)
        with ad.no_record():
            return self.model.visibility_pairs(x, dirs)[1]


# ---------------------------------------------------------------- point queries


def density_at(model: NervModel, x):
    """Density (P,) at points (P, 3) as a numpy array."""
    return model.density(np.asarray(x, float).reshape(-1, 3)).value


def normal_at(model: NervModel, x):
    """Analytic unit normals (P, 3) and a mask of non-degenerate points."""
    _, n, valid = analytic_normal(model.density, np.asarray(x, float).reshape(-1, 3))
    return n.value, valid


def brdf_params_at(model: NervModel, x) -> brdf.BrdfParams:
    x = np.asarray(x, float).reshape(-1, 3)
    s = model.sample(x)
    return brdf.BrdfParams(s.albedo.value, s.roughness.value, s.normal.value)


def visibility_query(model: NervModel, x, w):
    """(visibility, expected depth) arrays for paired points and directions."""
    V, D = model.visibility_pairs(np.asarray(x, float).reshape(-1, 3), np.asarray(w, float).reshape(-1, 3))
    return V.value, D.value


def mlp_normal_at(model: NervModel, x):
    n, valid = model.mlp_normal(np.asarray(x, float).reshape(-1, 3))
    return n.value, valid
