"""Independent oracles and property checks.

Nothing in here calls the analytic derivative code it is used to validate:
finite differences only evaluate forward passes, the loop references are
written element by element, and the derivative formulas are transcribed
in their raw exponential form.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

REL_FLOOR = 1e-12


@dataclass
class GradCheckReport:
    target: str
    max_rel_err: float
    max_abs_err: float
    worst_point: tuple
    passed: bool
    tolerance: float
    seed: Optional[int] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = "gradcheck"
        d["worst_point"] = [int(i) for i in self.worst_point]
        return d


@dataclass
class PropertyResult:
    property_id: str
    trials: int
    failures: int = 0
    first_failure: Optional[str] = None
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def fail(self, msg: str) -> None:
        self.failures += 1
        if self.first_failure is None:
            self.first_failure = msg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = "property"
        d["passed"] = self.passed
        return d


def rel_err(analytic, numeric):
    a, n = np.abs(analytic), np.abs(numeric)
    return np.abs(np.asarray(analytic) - numeric) / np.maximum(np.maximum(a, n), REL_FLOOR)


# ---------------------------------------------------------------- finite differences


def central_diff(f: Callable[[float], float], x: float, h: float = 1e-6) -> float:
    if not h > 0:
        raise ValueError("step h must be positive")
    return (f(x + h) - f(x - h)) / (2 * h)


def central_diff5(f: Callable[[float], float], x: float, h: float = 1e-3) -> float:
    """Fourth-order central difference over the points x +/- h, x +/- 2h."""
    if not h > 0:
        raise ValueError("step h must be positive")
    return (8 * (f(x + h) - f(x - h)) - (f(x + 2 * h) - f(x - 2 * h))) / (12 * h)


def weighted_sum(t: np.ndarray, w: np.ndarray) -> float:
    """``sum(t * w)`` with an exactly rounded final summation (keeps FD noise low)."""
    return math.fsum(np.asarray(t * w, dtype=np.float64).ravel())


def gradcheck_tensor(
    loss: Callable[[np.ndarray], float],
    params: np.ndarray,
    grad: np.ndarray,
    h: float = 1e-3,
    tol: float = 1e-6,
    target: str = "params",
    seed: Optional[int] = None,
    stencil: int = 5,
) -> GradCheckReport:
    """Compare ``grad`` against central differences of ``loss`` at every coordinate of ``params``.

    ``stencil=5`` (default) uses the fourth-order rule, whose rounding noise
    at ``h=1e-3`` is ~1e-13 instead of ~1e-9 for the 3-point rule at
    ``h=1e-6``; ``stencil=3`` is the plain ``(f(x+h) - f(x-h)) / 2h``.
    """
    if stencil not in (3, 5):
        raise ValueError("stencil must be 3 or 5")
    p = np.array(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != p.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {p.shape}")
    numeric = np.empty_like(p)

    def at(idx, x):
        p[idx] = x
        return loss(p)

    for idx in np.ndindex(p.shape):
        orig = p[idx]
        if stencil == 3:
            numeric[idx] = (at(idx, orig + h) - at(idx, orig - h)) / (2 * h)
        else:
            near = at(idx, orig + h) - at(idx, orig - h)
            wide = at(idx, orig + 2 * h) - at(idx, orig - 2 * h)
            numeric[idx] = (8 * near - wide) / (12 * h)
        p[idx] = orig
    if not np.all(np.isfinite(numeric)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(numeric))[0])
        return GradCheckReport(target, math.inf, math.inf, bad, False, tol, seed)
    abs_err = np.abs(grad - numeric)
    rel = rel_err(grad, numeric)
    worst = np.unravel_index(int(np.argmax(rel)), p.shape) if p.size else ()
    max_rel = float(rel.max()) if p.size else 0.0
    return GradCheckReport(
        target=target,
        max_rel_err=max_rel,
        max_abs_err=float(abs_err.max()) if p.size else 0.0,
        worst_point=tuple(int(i) for i in worst),
        passed=bool(max_rel <= tol),
        tolerance=tol,
        seed=seed,
    )


# ---------------------------------------------------------------- loop references


def loop_pointwise_conv(t, weight, bias=None):
    n, c, h, w = t.shape
    o_ch = weight.shape[0]
    out = np.zeros((n, o_ch, h, w))
    for b in range(n):
        for o in range(o_ch):
            for i in range(h):
                for j in range(w):
                    acc = 0.0 if bias is None else float(bias[o])
                    for k in range(c):
                        acc += weight[o, k] * t[b, k, i, j]
                    out[b, o, i, j] = acc
    return out


def loop_depthwise_conv(t, weight, stride, pad):
    n, c, h, w = t.shape
    k = weight.shape[1]
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for di in range(k):
                        for dj in range(k):
                            r, s = i * stride + di - pad, j * stride + dj - pad
                            if 0 <= r < h and 0 <= s < w:
                                acc += weight[ch, di, dj] * t[b, ch, r, s]
                    out[b, ch, i, j] = acc
    return out


def loop_conv2d(t, weight, stride, pad):
    n, c, h, w = t.shape
    o_ch, _, k, _ = weight.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, o_ch, ho, wo))
    for b in range(n):
        for o in range(o_ch):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ch in range(c):
                        for di in range(k):
                            for dj in range(k):
                                r, s = i * stride + di - pad, j * stride + dj - pad
                                if 0 <= r < h and 0 <= s < w:
                                    acc += weight[o, ch, di, dj] * t[b, ch, r, s]
                    out[b, o, i, j] = acc
    return out


def loop_max_pool(t, kernel, stride, pad):
    n, c, h, w = t.shape
    ho = (h + 2 * pad - kernel) // stride + 1
    wo = (w + 2 * pad - kernel) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = -math.inf
                    for di in range(kernel):
                        for dj in range(kernel):
                            r, s = i * stride + di - pad, j * stride + dj - pad
                            if 0 <= r < h and 0 <= s < w:
                                best = max(best, t[b, ch, r, s])
                    out[b, ch, i, j] = best
    return out


def loop_dense(t, weight, bias):
    n, d = t.shape
    out = np.zeros((n, weight.shape[0]))
    for b in range(n):
        for o in range(weight.shape[0]):
            acc = float(bias[o])
            for k in range(d):
                acc += weight[o, k] * t[b, k]
            out[b, o] = acc
    return out


def loop_global_avg_pool(t):
    n, c, h, w = t.shape
    out = np.zeros((n, c, 1, 1))
    for b in range(n):
        for ch in range(c):
            out[b, ch, 0, 0] = math.fsum(t[b, ch].ravel()) / (h * w)
    return out


# ---------------------------------------------------------------- literal derivative forms


def literal_first_derivative(x, p1, p2, beta):
    """ACON-C slope written with raw exponentials (overflows for large |beta (p1-p2) x|)."""
    e = np.exp(-beta * (p1 * x - p2 * x))
    den = (1 + e) ** 2
    return (p1 - p2) * (1 + e) / den + beta * (p1 - p2) ** 2 * e * x / den + p2


def literal_second_derivative(x, p1, p2, beta):
    e = np.exp(beta * (p1 - p2) * x)
    num = (beta * (p2 - p1) * x + 2) * e + beta * (p1 - p2) * x + 2
    return beta * (p2 - p1) ** 2 * e * num / (e + 1) ** 3


def inflection_residual(y: float) -> float:
    return (y - 2) * math.exp(y) - (y + 2)


def root_solver(lo: float = 2.0, hi: float = 3.0, tol: float = 1e-12) -> float:
    """Positive root of ``(y - 2) e^y = y + 2`` by bisection."""
    flo = inflection_residual(lo)
    if flo * inflection_residual(hi) > 0:
        raise ValueError("root is not bracketed")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        fm = inflection_residual(mid)
        if (fm < 0) == (flo < 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------- property checks


def check_bounds_claim(p1: float, p2: float, beta: float, grid_n: int = 200_001) -> PropertyResult:
    """Grid-sample ACON-C's slope and compare with the closed-form extremes."""
    from .family import DomainError, acon_c_dx, derivative_bounds

    if not beta > 0:
        raise DomainError(f"bounds claim needs beta > 0, got {beta}")
    b = derivative_bounds(p1, p2, beta)
    res = PropertyResult(f"bounds(p1={p1},p2={p2},beta={beta})", trials=4)
    width = 1.0 / abs((p1 - p2) * beta)
    lo_x = min(b.x_at_upper, b.x_at_lower) - 10 * width
    hi_x = max(b.x_at_upper, b.x_at_lower) + 10 * width
    xs = np.linspace(lo_x, hi_x, max(grid_n, 100_001))
    slope = acon_c_dx(xs, p1, p2, beta)
    top, bottom = max(b.upper, b.lower), min(b.upper, b.lower)
    gmax, gmin = float(slope.max()), float(slope.min())
    if gmax > top + 1e-9:
        res.fail(f"grid max {gmax!r} exceeds bound {top!r}")
    if gmin < bottom - 1e-9:
        res.fail(f"grid min {gmin!r} below bound {bottom!r}")
    if top - gmax > 1e-6 or gmin - bottom > 1e-6:
        res.fail(f"bounds not attained on grid: ({gmin!r}, {gmax!r}) vs ({bottom!r}, {top!r})")
    far = 1e3 * width * np.sign((p1 - p2) * beta)
    tails = (float(acon_c_dx(far, p1, p2, beta)), float(acon_c_dx(-far, p1, p2, beta)))
    if abs(tails[0] - p1) > 1e-9 or abs(tails[1] - p2) > 1e-9:
        res.fail(f"tail slopes {tails} do not approach ({p1}, {p2})")
    res.details = {
        "upper": b.upper,
        "lower": b.lower,
        "x_at_upper": b.x_at_upper,
        "x_at_lower": b.x_at_lower,
        "root_y": b.root_y,
        "grid_max": gmax,
        "grid_min": gmin,
        "linear_upper": 1.0998 * p1 - 0.0998 * p2,
        "linear_lower": 1.0998 * p2 - 0.0998 * p1,
    }
    return res


def _acon_c_loss_parts(rng, shape=(2, 4, 3, 3)):
    from .family import AconParams

    c = shape[1]
    x = rng.normal(size=shape)
    params = AconParams(rng.normal(1.0, 0.5, c), rng.normal(0.0, 0.5, c), rng.uniform(0.5, 2.0, c))
    g = rng.normal(size=shape)
    return x, params, g


def gradcheck_acon_c(seed: int, tol: float = 1e-6, corrupt: bool = False) -> list[GradCheckReport]:
    """Check every output of ``acon_c_backward`` on a random 2x4x3x3 problem."""
    from .family import AconParams, acon_c, acon_c_backward

    rng = np.random.default_rng(seed)
    x, prm, g = _acon_c_loss_parts(rng)
    gx, gp1, gp2, gb = acon_c_backward(x, prm, g)
    if corrupt:
        gx = gx.copy()
        gx[(0,) * gx.ndim] += 1.0
    checks = [
        ("acon_c.x", x, gx, lambda v: weighted_sum(acon_c(v, prm), g)),
        ("acon_c.p1", prm.p1, gp1, lambda v: weighted_sum(acon_c(x, AconParams(v, prm.p2, prm.beta)), g)),
        ("acon_c.p2", prm.p2, gp2, lambda v: weighted_sum(acon_c(x, AconParams(prm.p1, v, prm.beta)), g)),
        ("acon_c.beta", prm.beta, gb, lambda v: weighted_sum(acon_c(x, AconParams(prm.p1, prm.p2, v)), g)),
    ]
    return [gradcheck_tensor(f, p, a, tol=tol, target=name, seed=seed) for name, p, a, f in checks]


def gradcheck_meta_acon(level: str, seed: int, tol: float = 1e-6, include_beta_path: bool = True,
                        shape=(2, 4, 3, 3)) -> list[GradCheckReport]:
    from .meta import RoutingSpec, RoutingState, meta_acon_backward, meta_acon_forward

    rng = np.random.default_rng(seed)
    c = shape[1]
    x = rng.normal(size=shape)
    p1, p2 = rng.normal(1.0, 0.5, c), rng.normal(0.0, 0.5, c)
    rspec = RoutingSpec(level, channels=c, reduction_r=2)
    state = RoutingState.initial(rspec, rng)
    if level == "channel":
        state = RoutingState(state.w1 * 3, state.w2 * 3)
    g = rng.normal(size=shape)
    out = meta_acon_forward(x, p1, p2, rspec, state)
    grads = meta_acon_backward(out.cache, g, include_beta_path=include_beta_path)

    def fwd(x_=x, p1_=p1, p2_=p2, st=state):
        return weighted_sum(meta_acon_forward(x_, p1_, p2_, rspec, st).y, g)

    checks = [
        (f"meta_acon[{level}].x", x, grads["x"], lambda v: fwd(x_=v)),
        (f"meta_acon[{level}].p1", p1, grads["p1"], lambda v: fwd(p1_=v)),
        (f"meta_acon[{level}].p2", p2, grads["p2"], lambda v: fwd(p2_=v)),
    ]
    if level == "channel":
        checks += [
            ("meta_acon[channel].w1", state.w1, grads["w1"], lambda v: fwd(st=RoutingState(v, state.w2))),
            ("meta_acon[channel].w2", state.w2, grads["w2"], lambda v: fwd(st=RoutingState(state.w1, v))),
        ]
    return [gradcheck_tensor(f, p, a, tol=tol, target=name, seed=seed) for name, p, a, f in checks]


def gradcheck_acon_frelu(seed: int, downsample: bool, tol: float = 1e-6) -> list[GradCheckReport]:
    from .family import acon_frelu, acon_frelu_backward

    rng = np.random.default_rng(seed)
    # Distinct values spaced 0.01 apart keep max-pool windows clear of ties.
    x = (rng.permutation(2 * 3 * 6 * 6) - 108.0).reshape(2, 3, 6, 6) * 0.01
    x += rng.uniform(-0.002, 0.002, x.shape)
    w = rng.normal(size=(3, 3, 3)) * 0.5
    beta = rng.uniform(0.5, 2.0, 3)
    g = rng.normal(size=acon_frelu(x, w, beta, downsample).shape)
    gx, gw, gb = acon_frelu_backward(x, w, beta, g, downsample)
    tag = "frelu_down" if downsample else "frelu"
    checks = [
        (f"{tag}.x", x, gx, lambda v: weighted_sum(acon_frelu(v, w, beta, downsample), g)),
        (f"{tag}.dw_weight", w, gw, lambda v: weighted_sum(acon_frelu(x, v, beta, downsample), g)),
        (f"{tag}.beta", beta, gb, lambda v: weighted_sum(acon_frelu(x, w, v, downsample), g)),
    ]
    return [gradcheck_tensor(f, p, a, tol=tol, target=name, seed=seed) for name, p, a, f in checks]


def check_smooth_max_grad(seed: int, trials: int = 200, tol: float = 1e-8) -> PropertyResult:
    from .smoothmax import smooth_max2, smooth_max2_grad

    rng = np.random.default_rng(seed)
    res = PropertyResult("smooth_max2_grad_vs_fd", trials)
    for _ in range(trials):
        a, b = rng.uniform(-2, 2, 2)
        if abs(a - b) < 0.1:
            # d/dbeta carries (a - b)^2 and would sit below the stencil's noise floor.
            b = a + math.copysign(0.1, b - a)
        beta = rng.uniform(-2, 2)
        ga, gb, gbeta = smooth_max2_grad(a, b, beta)
        num = (
            central_diff5(lambda t: smooth_max2(t, b, beta), a),
            central_diff5(lambda t: smooth_max2(a, t, beta), b),
            central_diff5(lambda t: smooth_max2(a, b, t), beta),
        )
        err = max(float(rel_err(an, nu)) for an, nu in zip((ga, gb, gbeta), num))
        if not err <= tol:
            res.fail(f"a={a!r} b={b!r} beta={beta!r}: rel err {err:.3g}")
    return res


def check_limits(seed: int, trials: int = 20) -> PropertyResult:
    """ACON-C's slope tends to p1 / p2 as x -> +inf / -inf (beta > 0)."""
    from .family import acon_c_dx

    rng = np.random.default_rng(seed)
    res = PropertyResult("slope_limits", trials)
    for _ in range(trials):
        p1, p2 = rng.normal(0, 2, 2)
        beta = rng.uniform(0.05, 5)
        far = 1e3 / ((p1 - p2) * beta)
        hi, lo = float(acon_c_dx(far, p1, p2, beta)), float(acon_c_dx(-far, p1, p2, beta))
        if abs(hi - p1) > 1e-9 or abs(lo - p2) > 1e-9:
            res.fail(f"p1={p1!r} p2={p2!r} beta={beta!r}: tails ({hi!r}, {lo!r})")
    return res


def check_smooth_max_limits(seed: int, trials: int = 10_000) -> PropertyResult:
    from .smoothmax import smooth_max2

    rng = np.random.default_rng(seed)
    a = rng.uniform(-100, 100, trials)
    b = rng.uniform(-100, 100, trials)
    res = PropertyResult("smooth_max_limits", trials)
    mean_gap = np.abs(smooth_max2(a, b, 0.0) - (a + b) / 2)
    scale = np.maximum(np.abs(a), np.abs(b))
    bad = np.flatnonzero(mean_gap > 4 * np.finfo(float).eps * np.maximum(scale, 1.0))
    far = np.abs(a - b) >= 0.1
    max_gap = np.abs(smooth_max2(a, b, 1e3) - np.maximum(a, b))
    bad_max = np.flatnonzero(far & (max_gap > 1e-9))
    res.failures = int(bad.size + bad_max.size)
    if bad.size:
        i = bad[0]
        res.first_failure = f"beta=0 at a={a[i]!r} b={b[i]!r}: gap {mean_gap[i]!r}"
    elif bad_max.size:
        i = bad_max[0]
        res.first_failure = f"beta=1e3 at a={a[i]!r} b={b[i]!r}: gap {max_gap[i]!r}"
    res.details = {"max_mean_gap": float(mean_gap.max()), "max_max_gap": float(max_gap[far].max())}
    return res


def check_collapse(seed: int, trials: int = 100, tol: float = 1e-14) -> PropertyResult:
    """ACON-C(p1=1, p2=p) == ACON-B(p) and ACON-B(0) == ACON-A, elementwise."""
    from .family import AconParams, acon_a, acon_b, acon_c

    rng = np.random.default_rng(seed)
    res = PropertyResult("family_collapse", trials)
    worst = 0.0
    for t in range(trials):
        shape = (2, 4, 3, 3)
        c = shape[1]
        x = rng.normal(0, 3, shape)
        p = rng.uniform(-1, 1, c)
        beta = rng.uniform(-3, 3, c)
        c_vs_b = np.max(np.abs(acon_c(x, AconParams(np.ones(c), p, beta)) - acon_b(x, p, beta)))
        b_vs_a = np.max(np.abs(acon_b(x, np.zeros(c), beta) - acon_a(x, beta)))
        worst = max(worst, float(c_vs_b), float(b_vs_a))
        if c_vs_b > tol or b_vs_a > tol:
            res.fail(f"trial {t}: |C-B|={c_vs_b!r} |B-A|={b_vs_a!r}")
    res.details = {"max_abs_diff": worst}
    return res


SUITES = ("grad", "bounds", "limits", "collapse")


def run_suite(suite: str, seed: int = 0, tol: float = 1e-6, bounds_params=None, corrupt: bool = False) -> list:
    """Run one named suite (or ``all``) and return its report objects."""
    if suite == "all":
        out = []
        for s in SUITES:
            out += run_suite(s, seed, tol, bounds_params, corrupt)
        return out
    if suite == "grad":
        out = []
        for k in range(3):
            out += gradcheck_acon_c(seed + k, tol, corrupt=corrupt and k == 0)
            for level in ("layer", "channel", "pixel"):
                out += gradcheck_meta_acon(level, seed + k, tol)
        out += gradcheck_acon_frelu(seed, False, tol) + gradcheck_acon_frelu(seed, True, tol)
        out.append(check_smooth_max_grad(seed))
        return out
    if suite == "bounds":
        triples = bounds_params or [(1.0, 0.0, 0.5), (1.0, 0.0, 1.0), (1.0, 0.0, 4.0), (1.2, -0.8, 2.0)]
        out = [check_bounds_claim(*t) for t in triples]
        root = root_solver()
        res = PropertyResult("inflection_root", 1, details={"root_y": root})
        if abs(root - 2.39936) > 1e-5 or abs(inflection_residual(root)) > 1e-10:
            res.fail(f"root {root!r}")
        out.append(res)
        return out
    if suite == "limits":
        return [check_limits(seed), check_smooth_max_limits(seed)]
    if suite == "collapse":
        return [check_collapse(seed)]
    raise ValueError(f"unknown suite {suite!r}; choose from {SUITES + ('all',)}")


def report_passed(r) -> bool:
    return bool(r.passed)
