"""Central finite-difference checking of tape gradients.

The checker perturbs leaf tensors in place between forward evaluations, so the
supplied function must rebuild its graph from the leaves on every call (all
code in this package does). Relative error uses an absolute floor so float
noise on near-zero gradients is not mistaken for a broken backward rule —
genuine backward bugs show up as O(1) relative mass, orders of magnitude above
either floor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np

from .tensor import Tensor, no_grad

# Frozen checker constants: step sizes and rel-error floors per dtype. The
# f32 step is large because the dominating error there is function-evaluation
# rounding (~1e-7·|f| / 2·eps); central-difference truncation at 3e-2 is still
# orders of magnitude below the 1e-2 acceptance tolerance.
EPS = {np.float32: 3e-2, np.float64: 1e-3}
FLOOR = {np.float32: 1e-3, np.float64: 1e-7}


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    worst_index: tuple
    analytic: float
    numeric: float

    def __str__(self):
        return (f"{self.name}: max rel err {self.max_rel_err:.3e} at {self.worst_index} "
                f"(analytic {self.analytic:.6e}, numeric {self.numeric:.6e})")


def check_gradients(
    f: Callable[[], Tensor],
    leaves: Mapping[str, Tensor],
    eps: float | None = None,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[GradCheckResult]:
    """Compare tape gradients of scalar ``f()`` against central differences.

    Args:
        f: builds and returns the scalar output from the (shared) leaves.
        leaves: named leaf tensors to check; each must have requires_grad.
        eps: FD step; defaults to the dtype-specific frozen constant.
        max_entries: if set, check at most this many coordinates per leaf
            (chosen with ``rng``); otherwise every coordinate is checked.
        rng: source for coordinate subsampling.

    Returns:
        One result per leaf with the worst relative error found.
    """
    for t in leaves.values():
        t.zero_grad()
    out = f()
    out.backward()
    analytic = {}
    for name, t in leaves.items():
        if t.grad is None:
            raise AssertionError(f"leaf '{name}' received no gradient")
        analytic[name] = t.grad.copy()

    results = []
    for name, t in leaves.items():
        step = eps if eps is not None else EPS[t.data.dtype.type]
        floor = FLOOR[t.data.dtype.type]
        flat = t.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(n, size=max_entries, replace=False)
        else:
            idxs = range(n)
        worst = GradCheckResult(name, 0.0, (), 0.0, 0.0)
        ana_flat = analytic[name].reshape(-1)
        with no_grad():
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * step)
                ana = float(ana_flat[i])
                rel = abs(num - ana) / max(floor, abs(num), abs(ana))
                if rel > worst.max_rel_err:
                    worst = GradCheckResult(
                        name, rel, np.unravel_index(int(i), t.shape), ana, num
                    )
        results.append(worst)
    return results


def assert_gradients_close(
    f: Callable[[], Tensor],
    leaves: Mapping[str, Tensor],
    rtol: float,
    **kwargs,
) -> list[GradCheckResult]:
    """``check_gradients`` + assertion that every leaf is within ``rtol``."""
    results = check_gradients(f, leaves, **kwargs)
    bad = [r for r in results if r.max_rel_err >= rtol]
    if bad:
        raise AssertionError("gradient check failed:\n" + "\n".join(str(r) for r in bad))
    return results


def cast_leaves(leaves: Mapping[str, Tensor], dtype) -> dict[str, Tensor]:
    """Fresh requires-grad leaves with the same values in another dtype."""
    return {
        name: Tensor(t.data.astype(dtype), requires_grad=True)
        for name, t in leaves.items()
    }
