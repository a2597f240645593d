"""Central finite-difference gradient oracle.

Runs the graph in float64 and compares analytic gradients against
symmetric differences (f(x+eps) - f(x-eps)) / (2 eps).  The scalar loss
is a fixed random projection of the output so one check covers every
output component.
"""

import zlib

import numpy as np

from patret import tensor as T

EPS = 1e-4
TOL = 1e-3


def gradcheck(make, arrays, diff_idx, rng, tol=TOL, eps=EPS):
    """Assert analytic grads of ``make(tensors)`` match finite differences.

    ``make`` builds an output Tensor from a list of input Tensors;
    ``arrays`` are the input values (cast to f64 here); gradients are
    checked for the positions in ``diff_idx``.  Returns the worst
    relative error seen.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tracked = [
        T.Tensor(a.copy(), requires_grad=(i in diff_idx))
        for i, a in enumerate(arrays)
    ]
    out = make(tracked)
    proj = rng.standard_normal(out.data.shape)
    loss = T.sum(T.mul(out, T.Tensor(proj)))
    loss.backward()

    def loss_at_current_arrays():
        o = make([T.Tensor(a) for a in arrays])
        return float((o.data * proj).sum())

    worst = 0.0
    for i in diff_idx:
        a = arrays[i]
        numeric = np.zeros_like(a)
        flat, nflat = a.reshape(-1), numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = loss_at_current_arrays()
            flat[j] = orig - eps
            fm = loss_at_current_arrays()
            flat[j] = orig
            nflat[j] = (fp - fm) / (2.0 * eps)
        analytic = tracked[i].grad
        assert analytic is not None, f"no gradient reached input {i}"
        denom = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), 1.0)
        rel = np.abs(analytic - numeric) / denom
        assert rel.max() < tol, (
            f"input {i}: worst relative error {rel.max():.2e} >= {tol:.0e}"
        )
        worst = max(worst, float(rel.max()))
    return worst


# ---------------------------------------------------------------------------
# randomized instance generators, one per primitive
#
# Each returns (make, arrays, diff_idx).  Inputs stay away from the
# kinks of relu / clip / max_pool so the symmetric difference is valid.


def _case_add(rng):
    shapes = rng.choice(len(_BCAST_PAIRS))
    sa, sb = _BCAST_PAIRS[shapes]
    return (
        lambda t: T.add(t[0], t[1]),
        [rng.standard_normal(sa), rng.standard_normal(sb)],
        (0, 1),
    )


def _case_mul(rng):
    sa, sb = _BCAST_PAIRS[rng.choice(len(_BCAST_PAIRS))]
    return (
        lambda t: T.mul(t[0], t[1]),
        [rng.standard_normal(sa), rng.standard_normal(sb)],
        (0, 1),
    )


_BCAST_PAIRS = [
    ((3, 4), (3, 4)),
    ((3, 4), (4,)),
    ((3, 4), (3, 1)),
    ((3, 4), ()),
    ((2, 1, 3), (4, 3)),
]


def _case_matmul(rng):
    n, m, k = rng.integers(2, 6, size=3)
    return (
        lambda t: T.matmul(t[0], t[1]),
        [rng.standard_normal((n, m)), rng.standard_normal((m, k))],
        (0, 1),
    )


def _case_relu(rng):
    x = rng.standard_normal((4, 5))
    x = np.where(np.abs(x) < 0.05, 0.2 * np.sign(x) + (x == 0) * 0.2, x)
    return lambda t: T.relu(t[0]), [x], (0,)


def _case_power(rng):
    base = rng.uniform(0.2, 2.0, size=(3, 4))
    expo = rng.uniform(-2.0, 2.0, size=(4,))
    return lambda t: T.power(t[0], t[1]), [base, expo], (0, 1)


def _case_log(rng):
    return lambda t: T.log(t[0]), [rng.uniform(0.1, 3.0, size=(3, 4))], (0,)


def _case_exp(rng):
    return lambda t: T.exp(t[0]), [rng.uniform(-2, 2, size=(3, 4))], (0,)


def _case_reshape(rng):
    n, m = rng.integers(2, 5, size=2)
    return lambda t: T.reshape(t[0], (m, n)), [rng.standard_normal((n, m))], (0,)


def _case_mean(rng):
    axis = [None, 0, 1, (0, 2)][rng.choice(4)]
    keep = bool(rng.choice(2))
    x = rng.standard_normal((3, 4, 2))
    return lambda t: T.mean(t[0], axis=axis, keepdims=keep), [x], (0,)


def _case_sum(rng):
    axis = [None, 0, 2, (1, 2)][rng.choice(4)]
    keep = bool(rng.choice(2))
    x = rng.standard_normal((3, 4, 2))
    return lambda t: T.sum(t[0], axis=axis, keepdims=keep), [x], (0,)


def _case_clip(rng):
    x = rng.uniform(-2, 2, size=(4, 5))
    x = np.where(np.abs(np.abs(x) - 1.0) < 0.05, x * 0.5, x)
    return lambda t: T.clip(t[0], -1.0, 1.0), [x], (0,)


def _case_l2_normalize(rng):
    axis = int(rng.choice([0, 1, -1]))
    while True:
        x = rng.standard_normal((4, 5))
        if np.sqrt((x * x).sum(axis=axis)).min() > 0.3:
            break
    return lambda t: T.l2_normalize(t[0], axis=axis), [x], (0,)


def _case_batchnorm_train(rng):
    n, d = int(rng.integers(4, 9)), int(rng.integers(3, 7))
    x = rng.standard_normal((n, d)) * rng.uniform(0.5, 2.0)
    gamma = rng.uniform(0.5, 1.5, size=d)
    beta = rng.standard_normal(d)
    rm, rv = np.zeros(d), np.ones(d)
    return (
        lambda t: T.batchnorm(t[0], t[1], t[2], rm, rv, training=True),
        [x, gamma, beta],
        (0, 1, 2),
    )


def _case_batchnorm_eval(rng):
    n, d = int(rng.integers(2, 6)), int(rng.integers(3, 7))
    x = rng.standard_normal((n, d))
    gamma = rng.uniform(0.5, 1.5, size=d)
    beta = rng.standard_normal(d)
    rm = rng.standard_normal(d) * 0.5
    rv = rng.uniform(0.5, 2.0, size=d)
    return (
        lambda t: T.batchnorm(t[0], t[1], t[2], rm, rv, training=False),
        [x, gamma, beta],
        (0, 1, 2),
    )


def _case_max_pool(rng):
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    h = w = int(rng.choice([4, 5, 6]))
    kernel = int(rng.choice([2, 3]))
    stride = int(rng.choice([1, 2]))
    # distinct values with gaps far above eps keep the argmax stable
    x = rng.permutation(n * c * h * w).astype(np.float64).reshape(n, c, h, w)
    x = x * 0.1 - x.mean() * 0.1
    return lambda t: T.max_pool(t[0], kernel, stride), [x], (0,)


def _case_conv2d(rng):
    n, c, k = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
    h = w = int(rng.choice([4, 5, 6]))
    kh = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.choice([0, 1]))
    x = rng.standard_normal((n, c, h, w))
    kern = rng.standard_normal((k, c, kh, kh))
    if rng.choice(2):
        b = rng.standard_normal(k)
        return (
            lambda t: T.conv2d(t[0], t[1], t[2], stride=stride, pad=pad),
            [x, kern, b],
            (0, 1, 2),
        )
    return (
        lambda t: T.conv2d(t[0], t[1], stride=stride, pad=pad),
        [x, kern],
        (0, 1),
    )


def _case_composed(rng):
    """relu(x @ w + b) scaled and reduced: a multi-op graph in one check."""
    while True:
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((4, 3))
        b = rng.standard_normal(3)
        if np.abs(x @ w + b).min() > 5e-3:
            break
    c = rng.standard_normal((3, 3))

    def make(t):
        h = T.relu(T.add(T.matmul(t[0], t[1]), t[2]))
        return T.mean(T.mul(h, t[3]), axis=0)

    return make, [x, w, b, c], (0, 1, 2)


PRIMITIVE_CASES = {
    "add": _case_add,
    "mul": _case_mul,
    "matmul": _case_matmul,
    "relu": _case_relu,
    "power": _case_power,
    "log": _case_log,
    "exp": _case_exp,
    "reshape": _case_reshape,
    "mean": _case_mean,
    "sum": _case_sum,
    "clip": _case_clip,
    "l2_normalize": _case_l2_normalize,
    "batchnorm_train": _case_batchnorm_train,
    "batchnorm_eval": _case_batchnorm_eval,
    "max_pool": _case_max_pool,
    "conv2d": _case_conv2d,
    "composed": _case_composed,
}


# ---------------------------------------------------------------------------
# loss heads and GeM, checked end to end through their full composition


def _case_softmax_head(rng):
    from patret.model import HeadParams, softmax_ce_loss

    n = int(rng.integers(2, 5))
    d = int(rng.integers(3, 7))
    c = int(rng.integers(2, 6))
    labels = rng.integers(0, c, size=n)

    def make(t):
        head = HeadParams("softmax", W=t[1], b=t[2])
        return softmax_ce_loss(t[0], labels, head)

    return (
        make,
        [rng.standard_normal((n, d)), rng.standard_normal((d, c)),
         rng.standard_normal(c)],
        (0, 1, 2),
    )


def _case_arcface_head(rng):
    """Targets placed at angles theta_y in [0.1, pi-0.6] from their class
    column, away from the arccos boundaries."""
    from patret.model import HeadParams, arcface_loss

    n = int(rng.integers(2, 5))
    d = int(rng.integers(3, 7))
    c = int(rng.integers(2, 6))
    w = rng.standard_normal((d, c))
    wn = w / np.linalg.norm(w, axis=0)
    labels = rng.integers(0, c, size=n)
    x = np.empty((n, d))
    for i in range(n):
        wy = wn[:, labels[i]]
        while True:
            u = rng.standard_normal(d)
            u -= (u @ wy) * wy
            nu = np.linalg.norm(u)
            if nu > 1e-6:
                break
        theta = rng.uniform(0.1, np.pi - 0.6)
        x[i] = rng.uniform(0.5, 2.0) * (np.cos(theta) * wy + np.sin(theta) * u / nu)

    def make(t):
        head = HeadParams("arcface", W=t[1], s=20.0, margin=0.5)
        return arcface_loss(t[0], labels, head)

    return make, [x, w], (0, 1)


def _case_gem(rng):
    from patret.model import GemParams, gem_pool

    n = int(rng.integers(1, 3))
    ch = int(rng.integers(2, 5))
    h = w = int(rng.integers(2, 5))
    x = rng.uniform(0.05, 2.0, size=(n, ch, h, w))
    p = rng.uniform(0.5, 4.0, size=ch)

    def make(t):
        return gem_pool(t[0], GemParams(p=t[1]))

    return make, [x, p], (0, 1)


HEAD_CASES = {
    "softmax_head": _case_softmax_head,
    "arcface_head": _case_arcface_head,
    "gem_pool": _case_gem,
}


def run_case_trials(cases, name, trials=100, seed=0):
    """Run ``trials`` randomized gradchecks for one named case."""
    rng = np.random.default_rng(np.random.SeedSequence([zlib.crc32(name.encode()), seed]))
    worst = 0.0
    for _ in range(trials):
        make, arrays, diff_idx = cases[name](rng)
        worst = max(worst, gradcheck(make, arrays, diff_idx, rng))
    return worst


def run_primitive_trials(name, trials=100, seed=0):
    """Run ``trials`` randomized gradchecks for one primitive; worst error."""
    return run_case_trials(PRIMITIVE_CASES, name, trials, seed)

