"""Central-finite-difference gradient verification.

Checks run in high precision (float64): finite differences are unusable in
float32. The comparison filters entries whose numeric gradient magnitude
is below 1e-6 and reports the max relative error over the rest.
"""

from __future__ import annotations

import numpy as np

from .autograd import HIGH_DTYPE, Tape, Tensor


class GradCheckFailure(AssertionError):
    pass


def _rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric))


def check_gradients(loss_fn, wrt: dict[str, Tensor], rel_tol: float = 1e-3,
                    step: float = 1e-4, max_entries: int | None = None,
                    rng: np.random.Generator | None = None,
                    raise_on_fail: bool = True) -> dict[str, float]:
    """Compare tape gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must rebuild the forward pass from the tensors in ``wrt``
    on every call (their ``.data`` is perturbed in place for the numeric
    probes). Checks every entry unless ``max_entries`` caps the sampled
    coordinates per tensor. Returns {name: max relative error}.
    """
    for name, t in wrt.items():
        if t.data.dtype != HIGH_DTYPE:
            raise ValueError(f"gradcheck requires float64 tensors; {name} is {t.data.dtype}")
        t.grad = None

    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    analytic = {}
    for name, t in wrt.items():
        if t.grad is None:
            raise GradCheckFailure(f"no gradient reached {name}")
        analytic[name] = t.grad.copy()
        t.grad = None

    report = {}
    for name, t in wrt.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            if rng is None:
                rng = np.random.default_rng(0)
            idx = rng.choice(n, size=max_entries, replace=False)
        else:
            idx = np.arange(n)
        worst = 0.0
        ana = analytic[name].reshape(-1)
        for i in idx:
            keep = flat[i]
            flat[i] = keep + step
            up = float(loss_fn().data)
            flat[i] = keep - step
            down = float(loss_fn().data)
            flat[i] = keep
            numeric = (up - down) / (2.0 * step)
            if abs(numeric) <= 1e-6 and abs(ana[i]) <= 1e-6:
                continue
            worst = max(worst, _rel_err(float(ana[i]), numeric))
        report[name] = worst
        if raise_on_fail and worst > rel_tol:
            raise GradCheckFailure(
                f"gradient mismatch for {name}: max rel err {worst:.3e} > {rel_tol:.1e}"
            )
    return report
