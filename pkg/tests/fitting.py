"""Shared fitting helpers for tests that need a trained-looking model."""

import numpy as np

from nerv.diffmath import AdamState, GradientTape, Tensor, adam_step, lr_schedule
from nerv.diffmath import autodiff as ad


def unit_dirs(rng, n):
    w = rng.normal(size=(n, 3))
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def fit_shape(model, scene, steps, seed=0):
    """Regress the shape network onto an analytic density and its gradient.

    Extra samples are drawn around the radius-0.5 shell of the opaque sphere."""
    params = model.group("shape")
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(seed)
    gscale = scene.sigma_max / (4 * scene.width)
    for s in range(steps):
        shell = unit_dirs(rng, 768) * (0.5 + rng.uniform(-4, 4, (768, 1)) * scene.width)
        x = np.concatenate([rng.uniform(-1, 1, (256, 3)), shell])
        d, gd, _ = scene.root.eval(x)
        lg = 1 / (1 + np.exp(d / scene.width))
        target_grad = -(scene.sigma_max * lg * (1 - lg) / scene.width)[:, None] * gd
        with GradientTape() as tape:
            with GradientTape() as inner:
                xt = inner.watch(Tensor(x))
                sig = model.density(xt)
            gx = inner.gradient(sig, xt, create_graph=True)
            loss = ad.mean((sig - scene.density(x)) ** 2) / scene.sigma_max**2
            loss = loss + 0.1 * ad.mean(ad.tsum((gx - target_grad) ** 2, axis=1)) / gscale**2
        grads = tape.gradient(loss, params)
        adam_step(params, [g.value for g in grads], state, lr_schedule(s, steps, 3e-3, 1e-4))
