"""Embedded oracle checks behind ``gtfmn selftest``."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import tensor as T
from .data import bicubic_resize, gamma_darken
from .metrics import psnr_mse, ssim
from .model import GtfmnConfig, GtfmnModel, synthesize_illumination_map
from .optim import Adam, l1_loss
from .tensor import Tensor, finite_difference_grad, relative_error

GRAD_RTOL = 1e-5


def _gradcheck(fn: Callable[[list[Tensor]], Tensor], arrays: list[np.ndarray]) -> float:
    tensors = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
    fn(tensors).backward()
    worst = 0.0
    for i, t in enumerate(tensors):
        def f(x, i=i):
            args = [Tensor(a.data) for a in tensors]
            args[i] = x
            return fn(args)
        worst = max(worst, relative_error(t.grad, finite_difference_grad(f, t, 1e-4)))
    return worst


def check_conv2d() -> None:
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = T.conv2d(x, Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), padding=1)
    assert np.array_equal(out.data, np.full((1, 1, 2, 2), 10.0)), out.data
    ident = T.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    assert np.array_equal(ident.data, x.data)


def check_pixel_shuffle() -> None:
    x = Tensor(np.arange(1.0, 5.0).reshape(1, 4, 1, 1))
    assert np.array_equal(T.pixel_shuffle(x, 2).data, [[[[1.0, 2.0], [3.0, 4.0]]]])
    r = np.random.default_rng(0).normal(size=(2, 8, 3, 5))
    assert np.array_equal(T.pixel_unshuffle(T.pixel_shuffle(Tensor(r), 2), 2).data, r)


def check_layer_gradients() -> None:
    rng = np.random.default_rng(1)
    cases = {
        "conv2d": (lambda a: T.mean(T.sigmoid(T.conv2d(a[0], a[1], a[2], padding=1))),
                   [rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)) * 0.3, rng.normal(size=3)]),
        "depthwise": (lambda a: T.mean(T.sigmoid(T.conv2d(a[0], a[1], padding=2, groups=2))),
                      [rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(2, 1, 5, 5)) * 0.3]),
        "channel_norm": (lambda a: T.sum(T.mul(T.channel_norm(a[0]), a[1])),
                         [rng.normal(size=(1, 3, 3, 3)), rng.normal(size=(1, 3, 3, 3))]),
        "pixel_shuffle": (lambda a: T.sum(T.mul(T.pixel_shuffle(a[0], 2), a[1])),
                          [rng.normal(size=(1, 4, 2, 2)), rng.normal(size=(1, 1, 4, 4))]),
        "leaky_relu": (lambda a: T.sum(T.mul(T.leaky_relu(a[0], 0.2), a[1])),
                       [rng.normal(size=(2, 5)) + 0.01, rng.normal(size=(2, 5))]),
        "avg_pool": (lambda a: T.sum(T.mul(T.adaptive_avg_pool_global(a[0]), a[1])),
                     [rng.normal(size=(1, 2, 3, 4)), rng.normal(size=(1, 2, 1, 1))]),
        "l1_loss": (lambda a: l1_loss(a[0], a[1]), [rng.normal(size=(1, 3, 2, 2)), rng.normal(size=(1, 3, 2, 2))]),
    }
    for name, (fn, arrays) in cases.items():
        err = _gradcheck(fn, arrays)
        assert err < GRAD_RTOL, f"{name}: relative error {err:.2e}"


def kink_free_target(pred: np.ndarray, rng: np.random.Generator, margin: float = 0.05) -> np.ndarray:
    """Target whose residuals are at least ``margin`` away from the L1 kink."""
    offset = rng.uniform(margin, 0.3, pred.shape) * rng.choice([-1.0, 1.0], pred.shape)
    return pred + offset


def check_model_gradients() -> None:
    model = GtfmnModel(GtfmnConfig(width=4, depth=1), seed=2, dtype=np.float64)
    rng = np.random.default_rng(3)
    x = Tensor(rng.uniform(size=(1, 3, 8, 8)))
    y = Tensor(kink_free_target(model(x)[0].data, rng))
    l1_loss(model(x)[0], y).backward()
    # one representative tensor per parameter group keeps this under a few seconds
    groups = ["illumination.enc.0.weight", "illumination.struct_dec.weight", "illumination.global_fc2.bias",
              "head.weight", "blocks.0.norm.weight", "blocks.0.msa.2.weight", "blocks.0.adapter1.weight",
              "blocks.0.ffn2.weight", "recon.bias"]
    params = dict(model.named_parameters())
    for name in groups:
        p = params[name]

        def f(t, p=p):
            saved = p.data
            p.data = t.data
            try:
                return l1_loss(model(x)[0], y)
            finally:
                p.data = saved

        err = relative_error(p.grad, finite_difference_grad(f, p, 1e-4))
        assert err < GRAD_RTOL, f"{name}: relative error {err:.2e}"


def make_illumination_checks(epsilon: float):
    def fixed_point():
        m = synthesize_illumination_map(Tensor(np.full((1, 1, 4, 4), 0.5)), Tensor(np.full((1, 1, 1, 1), 0.5)), epsilon)
        assert np.allclose(m.values.data, 0.5, atol=1e-3), m.values.data

    def clamped():
        ms = Tensor(np.array([0.2, 0.6]).reshape(1, 1, 1, 2))
        # the reference values assume a negligible epsilon
        m = synthesize_illumination_map(ms, Tensor(np.full((1, 1, 1, 1), 0.8)), 1e-12)
        assert np.allclose(m.values.data.ravel(), [0.4, 1.0], atol=1e-9), m.values.data.ravel()

    def zero_map():
        with np.errstate(invalid="ignore", divide="ignore"):
            m = synthesize_illumination_map(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.full((1, 1, 1, 1), 0.7)), epsilon)
        assert np.all(m.values.data == 0.0), "zero spatial map did not give M == 0"

    return {"illum_fixed_point": fixed_point, "illum_clamped": clamped, "illum_zero_map": zero_map}


def check_metrics() -> None:
    ref = np.full((3, 16, 16), 0.3)
    p, _ = psnr_mse(ref + 0.1, ref)
    assert abs(p - 20.0) < 1e-4, p
    p, m = psnr_mse(ref + 1 / 255, ref)
    assert abs(p - 48.1308) < 1e-3 and abs(m - 1.0) < 1e-6, (p, m)
    rng = np.random.default_rng(4)
    a, b = rng.uniform(size=(2, 3, 16, 16))
    assert abs(ssim(a, a) - 1.0) < 1e-9
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-9


def check_degradation() -> None:
    assert abs(float(gamma_darken(np.array(0.5), 2.2)) - 0.21764) < 1e-5
    assert np.allclose(bicubic_resize(np.full((3, 12, 12), 0.42), (6, 6)), 0.42, atol=1e-6)


def check_adam() -> None:
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam([p], lr=2e-4)
    p.grad = np.array([3.0])
    opt.step()
    assert abs(p.data[0] + 2e-4 * 3 / (3 + 1e-8)) < 1e-15, p.data


def build_checks(epsilon: float = 1e-4) -> dict[str, Callable[[], None]]:
    checks = {
        "conv2d_oracle": check_conv2d,
        "pixel_shuffle_bijection": check_pixel_shuffle,
        "layer_gradients": check_layer_gradients,
        "model_gradients": check_model_gradients,
    }
    checks.update(make_illumination_checks(epsilon))
    checks.update({"metric_oracles": check_metrics, "degradation_oracles": check_degradation, "adam_first_step": check_adam})
    return checks


def run_selftest(epsilon: float = 1e-4, emit: Callable[[str], None] = print) -> bool:
    """Run every check, print a pass/fail table, return True iff all pass."""
    results = []
    for name, fn in build_checks(epsilon).items():
        start = time.perf_counter()
        try:
            fn()
            ok, msg = True, ""
        except Exception as exc:  # every failure is reported, not raised
            ok, msg = False, f"{type(exc).__name__}: {exc}"
        results.append((name, ok, time.perf_counter() - start, msg))
    width = max(len(r[0]) for r in results)
    for name, ok, dt, msg in results:
        line = f"{name:<{width}}  {'PASS' if ok else 'FAIL'}  {dt:6.2f}s"
        emit(line + (f"  {msg}" if msg else ""))
    failed = [r[0] for r in results if not r[1]]
    emit(f"{len(results) - len(failed)}/{len(results)} checks passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return not failed
