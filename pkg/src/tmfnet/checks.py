"""Named verification suites: finite-difference checks per operation and
fast-path-versus-oracle equivalence runs. Shared by the CLI and the test
suite so both report identical numbers.
"""

from __future__ import annotations

import json
import time
from importlib import resources

import numpy as np

from . import functional as F
from . import kernels
from .autograd import HIGH_DTYPE, Tensor
from .blocks import GlfFusion, PpmContext, StaticFusion, TmpContext, nbp, nbp_fast
from .data import Trimap, gen_trimap
from .gradcheck import check_gradients
from .losses import alpha_loss, composition_loss, laplacian_loss, total_loss
from .model import ArchConfig, build_network


def _rng(seed=0):
    return np.random.default_rng([seed, 0x9C])


def _t(rng, shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True,
                  dtype=HIGH_DTYPE)


def _mask(rng, n, h, w):
    return Tensor((rng.random((n, 1, h, w)) > 0.4).astype(np.float64))


# ---------------------------------------------------------------------------
# gradient checks
# ---------------------------------------------------------------------------

def _check_conv2d(seed=0):
    rng = _rng(seed)
    x = _t(rng, (2, 3, 7, 8))
    w = _t(rng, (4, 3, 3, 3), 0.5)
    b = _t(rng, (4,))
    return check_gradients(
        lambda: F.total_sum(F.mul(F.conv2d(x, w, b, stride=2), 0.5)),
        {"x": x, "w": w, "b": b})


def _check_avg_pool(seed=0):
    rng = _rng(seed)
    x = _t(rng, (2, 2, 6, 7))
    return check_gradients(
        lambda: F.total_sum(F.mul(F.avg_pool(x, 3), F.avg_pool(x, 3))), {"x": x})


def _check_avg_pool_sat(seed=0):
    rng = _rng(seed)
    x = _t(rng, (2, 2, 6, 7))
    return check_gradients(
        lambda: F.total_sum(F.mul(F.avg_pool_sat(x, 5), F.avg_pool_sat(x, 5))), {"x": x})


def _check_bilinear(seed=0):
    rng = _rng(seed)
    x = _t(rng, (2, 3, 5, 6))
    return check_gradients(
        lambda: F.total_sum(F.mul(F.bilinear_resize(x, 9, 8), F.bilinear_resize(x, 9, 8))),
        {"x": x})


def _check_batch_norm(seed=0):
    rng = _rng(seed)
    x = _t(rng, (3, 4, 5, 5))
    gamma = Tensor(rng.normal(1.0, 0.1, 4), requires_grad=True, dtype=HIGH_DTYPE)
    beta = _t(rng, (4,))

    def loss():
        rm = np.zeros(4)
        rv = np.ones(4)
        y = F.batch_norm(x, gamma, beta, rm, rv, training=True)
        return F.total_sum(F.mul(y, y))

    return check_gradients(loss, {"x": x, "gamma": gamma, "beta": beta})


def _check_pixel_shuffle(seed=0):
    rng = _rng(seed)
    x = _t(rng, (2, 8, 4, 5))
    return check_gradients(
        lambda: F.total_sum(F.mul(F.pixel_shuffle(x), F.pixel_shuffle(x))), {"x": x})


def _check_nbp(seed=0):
    rng = _rng(seed)
    x = _t(rng, (2, 3, 6, 6))
    m = _mask(rng, 2, 6, 6)
    return check_gradients(
        lambda: F.total_sum(F.mul(nbp(x, m, 3), nbp(x, m, 3))), {"x": x})


def _check_nbp_fast(seed=0):
    rng = _rng(seed)
    x = _t(rng, (2, 3, 6, 6))
    m = _mask(rng, 2, 6, 6)
    return check_gradients(
        lambda: F.total_sum(F.mul(nbp_fast(x, m, 5), nbp_fast(x, m, 5))), {"x": x})


def _check_glf_fusion_op(seed=0):
    rng = _rng(seed)
    x = _t(rng, (1, 8, 5, 5))
    k = _t(rng, (1, 18, 5, 5), 0.5)
    return check_gradients(
        lambda: F.total_sum(F.mul(F.group_fusion(x, k, 2), F.group_fusion(x, k, 2))),
        {"x": x, "k": k})


def _module_params(module, limit=None, rng=None):
    wrt = dict(module.named_parameters())
    if limit is not None and len(wrt) > limit:
        names = sorted(wrt)
        rng = rng or np.random.default_rng(0)
        keep = rng.choice(len(names), size=limit, replace=False)
        wrt = {names[i]: wrt[names[i]] for i in keep}
    return wrt


def _check_tmp(seed=0):
    rng = _rng(seed)
    mod = TmpContext(4, 4, np.random.default_rng(seed), reduce_channels=1,
                     pool_kernels=(3, 3, 1, 1), dtype=HIGH_DTYPE)
    x = _t(rng, (1, 4, 5, 5))
    m = _mask(rng, 1, 5, 5)
    wrt = {"x": x, **_module_params(mod)}
    return check_gradients(lambda: F.total_sum(F.mul(mod(x, m), mod(x, m))), wrt,
                           step=1e-5, max_entries=64, rng=rng)


def _check_ppm(seed=0):
    rng = _rng(seed)
    mod = PpmContext(4, 4, np.random.default_rng(seed), reduce_channels=1,
                     dtype=HIGH_DTYPE)
    x = _t(rng, (1, 4, 7, 7))
    wrt = {"x": x, **_module_params(mod)}
    return check_gradients(lambda: F.total_sum(F.mul(mod(x), mod(x))), wrt,
                           step=1e-5, max_entries=64, rng=rng)


def _check_glf_kernels(seed=0):
    rng = _rng(seed)
    mod = GlfFusion(3, 4, 8, 4, np.random.default_rng(seed), group_width=4,
                    global_channels=5, dtype=HIGH_DTYPE)
    x = _t(rng, (1, 8, 6, 6))
    g = _t(rng, (1, 5, 1, 1))
    wrt = {"x": x, "g": g,
           "kg_local.weight": mod.kg_local.weight,
           "kg_global.weight": mod.kg_global.weight,
           "kg_out.weight": mod.kg_out.weight,
           "kg_out.bias": mod.kg_out.bias}
    return check_gradients(
        lambda: F.total_sum(F.mul(mod.generate_kernels(x, g), mod.generate_kernels(x, g))),
        wrt, max_entries=64, rng=rng)


def _check_glf(seed=0):
    rng = _rng(seed)
    mod = GlfFusion(3, 4, 8, 4, np.random.default_rng(seed), group_width=4,
                    global_channels=5, dtype=HIGH_DTYPE)
    x_low = _t(rng, (1, 3, 6, 6))
    x_high = _t(rng, (1, 4, 3, 3))
    g = _t(rng, (1, 5, 1, 1))
    wrt = {"x_low": x_low, "x_high": x_high, "g": g, **_module_params(mod, limit=6)}
    return check_gradients(
        lambda: F.total_sum(F.mul(mod(x_low, x_high, g), mod(x_low, x_high, g))),
        wrt, step=1e-5, max_entries=64, rng=rng)


def _check_static_fusion(seed=0):
    rng = _rng(seed)
    mod = StaticFusion(3, 4, 4, np.random.default_rng(seed), dtype=HIGH_DTYPE)
    x_low = _t(rng, (1, 3, 6, 6))
    x_high = _t(rng, (1, 4, 3, 3))
    wrt = {"x_low": x_low, "x_high": x_high, **_module_params(mod)}
    return check_gradients(
        lambda: F.total_sum(F.mul(mod(x_low, x_high), mod(x_low, x_high))),
        wrt, step=1e-5, max_entries=64, rng=rng)


def _separated(base: np.ndarray, rng) -> np.ndarray:
    # keep |base - result| >= 0.1 everywhere: the robust-L1 kink is smoothed
    # at the 1e-6 scale, far below the finite-difference step
    mag = rng.uniform(0.1, 0.4, size=base.shape)
    return np.where(base > 0.5, base - mag, base + mag)


def _loss_fixture(seed=0, h=16, w=16):
    rng = _rng(seed)
    pred = Tensor(rng.random((1, 1, h, w)), requires_grad=True, dtype=HIGH_DTYPE)
    gt = _separated(pred.data, rng)
    fg = rng.random((1, 3, h, w))
    bg = rng.random((1, 3, h, w))
    image = _separated(pred.data * fg + (1 - pred.data) * bg, rng)
    region = (rng.random((1, 1, h, w)) > 0.5).astype(np.float64)
    return pred, gt, fg, bg, image, region


def _check_alpha_loss(seed=0):
    pred, gt, fg, bg, image, region = _loss_fixture(seed)
    return check_gradients(lambda: alpha_loss(pred, gt, region), {"pred": pred})


def _check_composition_loss(seed=0):
    pred, gt, fg, bg, image, region = _loss_fixture(seed)
    return check_gradients(
        lambda: composition_loss(pred, fg, bg, image, region), {"pred": pred})


def _check_laplacian_loss(seed=0):
    pred, gt, fg, bg, image, region = _loss_fixture(seed, 32, 32)
    return check_gradients(lambda: laplacian_loss(pred, gt), {"pred": pred},
                           max_entries=192, rng=_rng(seed))


def _check_total_loss(seed=0):
    pred, gt, fg, bg, image, region = _loss_fixture(seed)
    return check_gradients(
        lambda: total_loss(pred, gt, fg, bg, image, region)["total"], {"pred": pred})


def _check_network(seed=0):
    rng = _rng(seed)
    cfg = ArchConfig(toy_channels=(4, 4, 8, 8, 8), context_out=8,
                     stage_internal=(8, 8, 8), stage_out=(8, 8, 8),
                     group_width=4, head_channels=4, global_channels=8)
    net = build_network(cfg, seed=seed, dtype=HIGH_DTYPE)
    net.train()
    # keep predictions strictly inside (0, 1): finite differences across
    # the output clamp's corner are meaningless, as for any hinge
    net.head2.weight.data *= 0.05
    image = Tensor(rng.random((1, 3, 32, 32)), requires_grad=True, dtype=HIGH_DTYPE)
    alpha = (rng.random((32, 32)) > 0.5).astype(np.float64)
    trimap = gen_trimap(alpha, 5, 5)
    # binary target: |pred - gt| ~ 0.5, far from the robust-L1 kink
    gt = (rng.random((1, 1, 32, 32)) > 0.5).astype(np.float64)
    region = trimap.unknown_mask()[None, None].astype(np.float64)

    def loss():
        pred = net.forward(image, [trimap])
        return alpha_loss(pred, gt, region)

    wrt = {"image": image, **_module_params(net, limit=10, rng=rng)}
    # the finer step keeps central differences off activation corners;
    # float64 roundoff noise stays negligible at this scale
    return check_gradients(loss, wrt, step=1e-5, max_entries=48, rng=rng)


GRADCHECK_SCOPES = {
    "conv2d": _check_conv2d,
    "avg_pool": _check_avg_pool,
    "avg_pool_sat": _check_avg_pool_sat,
    "bilinear": _check_bilinear,
    "batch_norm": _check_batch_norm,
    "pixel_shuffle": _check_pixel_shuffle,
    "nbp": _check_nbp,
    "nbp_fast": _check_nbp_fast,
    "glf_spatial_fusion": _check_glf_fusion_op,
    "tmp": _check_tmp,
    "ppm": _check_ppm,
    "glf_kernels": _check_glf_kernels,
    "glf": _check_glf,
    "static_fusion": _check_static_fusion,
    "alpha_loss": _check_alpha_loss,
    "composition_loss": _check_composition_loss,
    "laplacian_loss": _check_laplacian_loss,
    "total_loss": _check_total_loss,
    "network": _check_network,
}


def run_gradcheck(scope: str = "all", rel_tol: float = 1e-3) -> dict:
    """Run finite-difference suites; returns {op: max rel err}."""
    if scope == "all":
        names = list(GRADCHECK_SCOPES)
    elif scope in GRADCHECK_SCOPES:
        names = [scope]
    else:
        raise KeyError(scope)
    report = {}
    for name in names:
        rep = GRADCHECK_SCOPES[name]()
        report[name] = max(rep.values()) if rep else 0.0
    return report


# ---------------------------------------------------------------------------
# oracle equivalence
# ---------------------------------------------------------------------------

def loop_group_fusion(xg: np.ndarray, kg: np.ndarray) -> np.ndarray:
    """Direct six-nested-loop evaluation of the grouped spatial fusion."""
    n, g, cg, h, w = xg.shape
    y = np.zeros_like(xg)
    for ni in range(n):
        for gi in range(g):
            for ci in range(cg):
                for i in range(h):
                    for j in range(w):
                        acc = 0.0
                        for u in (-1, 0, 1):
                            for v in (-1, 0, 1):
                                ii, jj = i + u, j + v
                                if 0 <= ii < h and 0 <= jj < w:
                                    acc += kg[ni, gi, u + 1, v + 1, i, j] * xg[ni, gi, ci, ii, jj]
                        y[ni, gi, ci, i, j] = acc
    return y


def oracle_nbp(trials: int = 100, seed: int = 0) -> dict:
    """nbp_fast against naive nbp on random cases, all kernel sizes."""
    rng = np.random.default_rng([seed, 1])
    worst = 0.0
    ks = (3, 5, 11, 17, 31)
    for trial in range(trials):
        h = int(rng.integers(4, 65))
        w = int(rng.integers(4, 65))
        c = int(rng.integers(1, 4))
        x = Tensor(rng.normal(size=(1, c, h, w)).astype(np.float32))
        m = Tensor((rng.random((1, 1, h, w)) > rng.random()).astype(np.float32))
        k = int(ks[trial % len(ks)])
        diff = np.abs(nbp(x, m, k).data - nbp_fast(x, m, k).data).max()
        worst = max(worst, float(diff))
    t0 = time.perf_counter()
    big_x = Tensor(rng.normal(size=(1, 4, 128, 128)).astype(np.float32))
    big_m = Tensor((rng.random((1, 1, 128, 128)) > 0.5).astype(np.float32))
    nbp_fast(big_x, big_m, 31)
    fast_s = time.perf_counter() - t0
    t0 = time.perf_counter()
    nbp(big_x, big_m, 31)
    naive_s = time.perf_counter() - t0
    return {"max_abs_diff": worst, "trials": trials,
            "throughput_note": f"128x128 k=31: fast {fast_s * 1e3:.1f} ms vs naive {naive_s * 1e3:.1f} ms",
            "speedup": naive_s / max(fast_s, 1e-9)}


def oracle_fusion(trials: int = 100, seed: int = 0) -> dict:
    """group_fusion (active backend) against the nested-loop oracle."""
    rng = np.random.default_rng([seed, 2])
    worst = 0.0
    for trial in range(trials):
        groups = int((1, 2, 4)[trial % 3])
        cg = int(rng.integers(1, 4))
        h = int(rng.integers(2, 8))
        w = int(rng.integers(2, 8))
        xg = rng.normal(size=(1, groups, cg, h, w)).astype(np.float32)
        kg = rng.normal(size=(1, groups, 3, 3, h, w)).astype(np.float32)
        got = kernels.group_fusion_forward(xg, kg)
        want = loop_group_fusion(xg.astype(np.float64), kg.astype(np.float64))
        worst = max(worst, float(np.abs(got - want).max()))
    return {"max_abs_diff": worst, "trials": trials}


def golden_metrics_path():
    return resources.files("tmfnet.resources").joinpath("metrics_8x8_golden.json")


def oracle_metrics() -> dict:
    """Metric implementations against the committed golden fixture."""
    from .metrics import evaluate_pair

    doc = json.loads(golden_metrics_path().read_text())
    worst = 0.0
    for case in doc["cases"]:
        pred = np.array(case["pred"], dtype=np.float64)
        gt = np.array(case["gt"], dtype=np.float64)
        region = np.array(case["region"], dtype=bool)
        got = evaluate_pair(pred, gt, region)
        for key in ("sad", "mse", "grad", "conn"):
            worst = max(worst, abs(got[key] - case["expected"][key]))
    return {"max_abs_diff": worst, "cases": len(doc["cases"])}


ORACLE_SCOPES = {
    "nbp": oracle_nbp,
    "fusion": oracle_fusion,
    "metrics": lambda trials=0, seed=0: oracle_metrics(),
}


def run_oracles(scope: str = "all", trials: int = 100, seed: int = 0) -> dict:
    if scope == "all":
        names = list(ORACLE_SCOPES)
    elif scope in ORACLE_SCOPES:
        names = [scope]
    else:
        raise KeyError(scope)
    return {name: ORACLE_SCOPES[name](trials=trials, seed=seed) for name in names}
