"""Block-level finite-difference gradient suite (used by ``hartleyseg gradcheck``)."""

from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from . import blocks as B
from .networks import Model, NetworkConfig
from .training import one_hot, pearson_loss

TOLERANCE = 1e-3


def _named(f, names):
    """Adapt ``f(tape, x, params_dict)`` to :func:`grad_check`'s positional form."""

    def wrapped(tape, x, *flat):
        return f(tape, x, dict(zip(names, flat)))

    return wrapped


def _case_block(kind, rng, d=3, k_max=(2, 2, 2), heads=2, chain=1, loss="pearson"):
    x = rng.normal(size=(d, 4, 4, 4))
    params = {}
    for i in range(chain):
        params.update({f"{i}.{k}": v for k, v in B.init_block(kind, d, k_max, heads, rng).items()})
    target = one_hot(rng.integers(0, d, size=(4, 4, 4)), d)
    kernel = "hartley_mha" if kind == "mha" else "hartley_shared"

    def f(tape, u, p):
        for i in range(chain):
            sub = {k[len(f"{i}."):]: v for k, v in p.items() if k.startswith(f"{i}.")}
            u = B.residual_block(u, sub, kernel, k_max)
        if loss == "sum":
            return u.sum()
        return pearson_loss(ad.softmax(u, axis=0), target)

    names = list(params)
    return _named(f, names), [x] + [params[n] for n in names]


def _case_layer(kernel, rng, d=3, k_max=(2, 2, 1)):
    x = rng.normal(size=(d, 4, 4, 2))
    params = B.init_layer(kernel, d, d, k_max, 2, rng)
    names = list(params)

    def f(tape, u, p):
        return (B.operator_layer(u, p, kernel, k_max) * np.linspace(-1, 1, u.value.size).reshape(u.shape)).sum()

    return _named(f, names), [x] + [params[n] for n in names]


def _case_selu(rng):
    x = rng.uniform(0.2, 2.0, size=8) * rng.choice([-1.0, 1.0], size=8)
    w = rng.normal(size=8)
    return (lambda tape, v: (ad.selu(v) * w).sum()), [x]


def _case_layer_norm(rng):
    x, g, b = rng.normal(size=(4, 3, 2, 2)), rng.normal(size=4), rng.normal(size=4)
    w = rng.normal(size=x.shape)
    return (lambda tape, v, gg, bb: (ad.layer_norm(v, gg, bb) * w).sum()), [x, g, b]


def _case_pearson(rng):
    logits = rng.normal(size=(3, 4, 4, 2))
    target = one_hot(rng.integers(0, 3, size=(4, 4, 2)), 3)
    return (lambda tape, v: pearson_loss(ad.softmax(v, axis=0), target)), [logits]


def _case_resampling(rng):
    x = rng.normal(size=(2, 4, 4, 2))
    w_down, b_down = rng.normal(size=(3, 2, 2, 2, 2)), rng.normal(size=3)
    w_up, b_up = rng.normal(size=(3, 2, 2, 2, 2)), rng.normal(size=2)
    weight = rng.normal(size=(2, 4, 4, 2))

    def f(tape, v, wd, bd, wu, bu):
        return (ad.conv_up(ad.selu(ad.conv_down(v, wd, bd)), wu, bu) * weight).sum()

    return f, [x, w_down, b_down, w_up, b_up]


def _case_network(rng, variant):
    cfg = NetworkConfig(variant=variant, in_channels=2, n_classes=3, width=3, k_max=(1, 1, 1),
                        n_blocks=2, n_heads=2)
    model = Model.build(cfg, seed=int(rng.integers(1 << 16)))
    x = rng.normal(size=(2, 4, 4, 4))
    target = one_hot(rng.integers(0, 3, size=(4, 4, 4)), 3)
    names = list(model.params)

    def f(tape, v, *flat):
        main, aux = model.forward(v, params=dict(zip(names, flat)))
        losses = [pearson_loss(main, target)] + [pearson_loss(a, target) for a in aux]
        total = losses[0]
        for extra in losses[1:]:
            total = total + extra
        return total

    return f, [x] + [model.params[n] for n in names]


def gradient_suite(seed: int = 0, step: float = 1e-5):
    """Run every check; returns ``[(name, max_rel_error, seconds), ...]``.

    The default step is small enough that a perturbation rarely carries a
    SELU pre-activation across its kink at 0, where central differences
    average the two one-sided slopes.
    """
    rng = np.random.default_rng(seed)
    cases = {
        "selu": _case_selu(rng),
        "layer_norm": _case_layer_norm(rng),
        "pearson_loss": _case_pearson(rng),
        "resampling_convs": _case_resampling(rng),
        "fourier_layer": _case_layer("fourier", rng),
        "hartley_conv_layer": _case_layer("hartley", rng),
        "hartley_shared_layer": _case_layer("hartley_shared", rng),
        "hartley_mha_layer": _case_layer("hartley_mha", rng),
        "hno_block": _case_block("hno", rng),
        "hartley_mha_block": _case_block("mha", rng, loss="sum"),
        "hno_block_chain3": _case_block("hno", rng, chain=3),
        "hnoseg_network": _case_network(rng, "hnoseg"),
        "hartleymha_network": _case_network(rng, "hartleymha"),
        "fno_network": _case_network(rng, "fno"),
    }
    results = []
    for name, (f, inputs) in cases.items():
        start = time.perf_counter()
        err = ad.grad_check(f, inputs, step=step)
        results.append((name, err, time.perf_counter() - start))
    return results


def format_results(results, tol: float = TOLERANCE) -> str:
    lines = [f"{'check':<24} {'max rel err':>12}  result"]
    for name, err, _ in results:
        lines.append(f"{name:<24} {err:>12.3e}  {'PASS' if err < tol else 'FAIL'}")
    return "\n".join(lines)
