"""Microfacet reflectance with the Lambert cosine folded in.

All functions broadcast over leading axes and accept numpy arrays or
:class:`~nerv.diffmath.Tensor` values; results are Tensors so that the same
code serves rendering and training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffmath import autodiff as ad

F0 = 0.04
GAMMA_MIN = 0.08


@dataclass
class BrdfParams:
    albedo: np.ndarray  # (..., 3) in [0, 1]
    roughness: np.ndarray  # (...,) in [GAMMA_MIN, 1]
    normal: np.ndarray  # (..., 3) unit

    def validate(self):
        a = ad.value_of(self.albedo)
        g = ad.value_of(self.roughness)
        n = ad.value_of(self.normal)
        if np.any(a < 0) or np.any(a > 1):
            raise ValueError("albedo outside [0, 1]")
        if np.any(g < GAMMA_MIN - 1e-12) or np.any(g > 1 + 1e-12):
            raise ValueError("roughness outside [GAMMA_MIN, 1]")
        if np.any(np.abs(np.linalg.norm(n, axis=-1) - 1.0) > 1e-6):
            raise ValueError("normal is not unit length")
        return self


def ggx_D(n_dot_h, gamma):
    """GGX normal distribution with rho = gamma^2."""
    rho = ad.power(ad.as_tensor(gamma), 2.0)
    rho2 = rho * rho
    c = ad.as_tensor(n_dot_h)
    denom = c * c * (rho2 - 1.0) + 1.0
    return rho2 / (np.pi * denom * denom)


def fresnel_schlick(wi_dot_h):
    c = ad.clip(wi_dot_h, 0.0, 1.0)
    return F0 + (1.0 - F0) * ad.power(1.0 - c, 5.0)


def smith_G(n_dot_wi, n_dot_wo, gamma):
    """Schlick-Smith shadowing with k = gamma^4 / 2; zero for nonpositive cosines."""
    ni = ad.as_tensor(n_dot_wi)
    no = ad.as_tensor(n_dot_wo)
    ok = (ni.value > 0) & (no.value > 0)
    ni = ad.where(ok, ni, 1.0)
    no = ad.where(ok, no, 1.0)
    k = ad.power(ad.as_tensor(gamma), 4.0) * 0.5
    g = (no * ni) / ((no * (1.0 - k) + k) * (ni * (1.0 - k) + k))
    return g * ok.astype(np.float64)


def _terms(albedo, roughness, normal, wi, wo):
    n = ad.as_tensor(normal)
    wi = ad.as_tensor(wi)
    wo = ad.as_tensor(wo)
    ndi = ad.dot(n, wi)
    ndo = ad.dot(n, wo)
    front = (ndi.value > 0) & (ndo.value > 0)
    ndi_s = ad.where(front, ndi, 1.0)
    ndo_s = ad.where(front, ndo, 1.0)

    h_raw = wi + wo
    h_len = ad.norm(h_raw)
    ok_h = h_len.value > 1e-12
    h = h_raw / ad.expand_dims(ad.where(ok_h, h_len, 1.0), -1)
    F = fresnel_schlick(ad.dot(wi, h))
    D = ggx_D(ad.dot(n, h), roughness)
    G = smith_G(ndi_s, ndo_s, roughness)
    frontf = front.astype(np.float64)
    spec = D * F * G / (4.0 * ndo_s) * (frontf * ok_h)
    diffuse_scale = ndi_s * (1.0 - F) * (frontf / np.pi)
    return spec, diffuse_scale


def specular_term(roughness, normal, wi, wo):
    """First summand of the reflectance: D F G / (4 n.wo), zero when backfacing."""
    spec, _ = _terms(None, roughness, normal, wi, wo)
    return spec


def eval_brdf(albedo, roughness, normal, wi, wo):
    """Reflectance R(wi, wo) per RGB channel, shape broadcast(...) + (3,).

    ``wi`` points toward the light, ``wo`` toward the viewer. Returns zero when
    either direction lies below the surface.
    """
    spec, dscale = _terms(albedo, roughness, normal, wi, wo)
    return ad.expand_dims(spec, -1) + ad.expand_dims(dscale, -1) * albedo


def eval_params(params: BrdfParams, wi, wo):
    return eval_brdf(params.albedo, params.roughness, params.normal, wi, wo)
