"""Shared oracles for the test suite."""

import math

import numpy as np

from advbench import tensor as T

H = 1e-3


def _random_case(name, rng):
    """(inputs dict, fn building the primitive from Tensors) for one primitive; None if a kink is too close."""
    u = lambda *shape: rng.uniform(-2, 2, size=shape)  # noqa: E731
    n, d = rng.integers(1, 4), rng.integers(1, 5)
    if name in ("add", "sub", "mul"):
        shape = (n, d)
        fn = {"add": T.add, "sub": T.sub, "mul": T.mul}[name]
        return {"a": u(*shape), "b": u(*shape)}, lambda a, b: fn(a, b)
    if name == "scalar_mul":
        c = float(rng.uniform(-2, 2))
        return {"a": u(n, d)}, lambda a: T.mul(c, a)
    if name == "matmul":
        k, m = rng.integers(1, 5), rng.integers(1, 5)
        return {"a": u(n, k), "b": u(k, m)}, lambda a, b: T.matmul(a, b)
    if name == "bias_add":
        if rng.uniform() < 0.5:
            return {"x": u(n, d), "b": u(d)}, lambda x, b: T.bias_add(x, b)
        c = rng.integers(1, 3)
        return {"x": u(n, c, 2, 3), "b": u(c)}, lambda x, b: T.bias_add(x, b)
    if name == "conv2d":
        c, o = rng.integers(1, 3), rng.integers(1, 3)
        hh, ww = rng.integers(3, 6), rng.integers(3, 6)
        return {"x": u(n, c, hh, ww), "w": u(o, c, 3, 3)}, lambda x, w: T.conv2d(x, w)
    if name == "pad2d":
        p = int(rng.integers(0, 3))
        return {"x": u(n, 1, 3, 4)}, lambda x: T.pad2d(x, p)
    if name == "maxpool2x2":
        x = u(n, rng.integers(1, 3), rng.integers(2, 6), rng.integers(2, 6))
        ho, wo = x.shape[2] // 2, x.shape[3] // 2
        blocks = x[:, :, : 2 * ho, : 2 * wo].reshape(x.shape[0], x.shape[1], ho, 2, wo, 2)
        blocks = np.sort(blocks.transpose(0, 1, 2, 4, 3, 5).reshape(x.shape[0], x.shape[1], ho, wo, 4), axis=-1)
        if (blocks[..., -1] - blocks[..., -2]).min() < 4 * H:
            return None
        return {"x": x}, lambda x: T.maxpool2x2(x)
    if name == "relu":
        x = u(n, d)
        if np.abs(x).min() < 2 * H:
            return None
        return {"x": x}, lambda x: T.relu(x)
    if name == "sigmoid":
        return {"x": u(n, d)}, lambda x: T.sigmoid(x)
    if name == "softplus":
        return {"x": u(n, d)}, lambda x: T.softplus(x)
    if name == "clamp":
        lo, hi = -1.0, 1.0
        x = u(n, d)
        if min(np.abs(x - lo).min(), np.abs(x - hi).min()) < 2 * H:
            return None
        return {"x": x}, lambda x: T.clamp(x, lo, hi)
    if name == "reshape":
        return {"x": u(n, d)}, lambda x: T.reshape(x, (d, n))
    if name == "sum":
        return {"x": u(n, d)}, lambda x: T.sum(x)
    if name == "mean":
        return {"x": u(n, d)}, lambda x: T.mean(x)
    raise KeyError(name)


PRIMITIVES = (
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "matmul",
    "bias_add",
    "conv2d",
    "pad2d",
    "maxpool2x2",
    "relu",
    "sigmoid",
    "softplus",
    "clamp",
    "reshape",
    "sum",
    "mean",
)


def relative_error(analytic, numeric, floor=1e-4):
    """Max |a - n| / |n| over coordinates with |n| > floor (0 if none qualify)."""
    analytic, numeric = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    sel = np.abs(numeric) > floor
    if not sel.any():
        return 0.0
    return float((np.abs(analytic - numeric)[sel] / np.abs(numeric)[sel]).max())


def gradcheck_primitive(name, rng):
    """Worst relative error between float32 autodiff and a float64 central-difference oracle."""
    case = None
    while case is None:
        case = _random_case(name, rng)
    inputs, prim = case
    names = list(inputs)
    out_shape = prim(*(T.Tensor(inputs[k]) for k in names)).shape
    weights = rng.uniform(0.5, 1.5, size=out_shape) * rng.choice([-1.0, 1.0], size=out_shape)

    def scalar(**tensors):
        return T.sum(T.mul(prim(*(tensors[k] for k in names)), T.Tensor(weights)))

    graph = T.Graph(scalar, names)
    graph.forward(**{k: v.astype(np.float32) for k, v in inputs.items()})
    grads = graph.backward()
    worst = 0.0
    with T.precision(np.float64):
        for k in names:
            def f(arr, k=k):
                vals = {j: T.Tensor(arr if j == k else inputs[j]) for j in names}
                return scalar(**vals)

            numeric = T.finite_difference_grad(f, inputs[k].astype(np.float64), H)
            worst = max(worst, relative_error(grads[k].data, numeric))
    return worst


# ---------------------------------------------------------------- scalar metric oracles
# Written with plain loops and the math module, independent of advbench.metrics.


def oracle_topk(scores, k):
    order = sorted(range(len(scores)), key=lambda i: (-float(scores[i]), i))
    return set(order[:k])


def oracle_k_accuracy(pred, truth, k):
    return len(oracle_topk(pred, k) & oracle_topk(truth, k)) / k


def _sig(z):
    return 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))


def oracle_loss(kind, z, t, mask):
    idx = [i for i in range(len(z)) if mask[i]]
    if kind == "mse":
        return sum((_sig(z[i]) - t[i]) ** 2 for i in idx) / len(idx)
    if kind == "bce":
        total = 0.0
        for i in idx:
            # log(1 + e^z) - t z, written stably
            total += max(z[i], 0.0) + math.log1p(math.exp(-abs(z[i]))) - t[i] * z[i]
        return total / len(idx)
    pairs = [(i, j) for i in idx for j in idx if t[i] > t[j]]
    return sum(max(0.0, 1.0 - (z[i] - z[j])) for i, j in pairs) / len(pairs)


def oracle_mlacc(p, t, th, mask):
    idx = [i for i in range(len(p)) if mask[i]]
    return sum(1 for i in idx if (p[i] >= th[i]) == (t[i] >= 0.5)) / len(idx)


def oracle_risk(p, c_row):
    return sum(float(a) * float(b) for a, b in zip(p, c_row)) / 17.0


def oracle_auc(scores, positive):
    pos = [s for s, y in zip(scores, positive) if y]
    neg = [s for s, y in zip(scores, positive) if not y]
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(pos) * len(neg))


def oracle_pearson_p(r, n):
    """Two-sided p from the Student t survival function, evaluated with mpmath."""
    import mpmath

    mpmath.mp.dps = 40
    df = n - 2
    t = mpmath.mpf(r) * mpmath.sqrt(df / (1 - mpmath.mpf(r) ** 2))
    # P(|T| > t) = I_{df/(df+t^2)}(df/2, 1/2)
    x = df / (df + t * t)
    return float(mpmath.betainc(df / 2, 0.5, 0, x, regularized=True))


def _random_truth(rng):
    states = rng.choice([1, 0, -1, -2], size=18, p=[0.25, 0.45, 0.15, 0.15])
    states[rng.integers(18)] = 1
    states[rng.integers(18)] = 0
    return states


def metric_oracle_errors(n_cases, seed=0):
    """Worst |library - oracle| per metric over ``n_cases`` random inputs."""
    from advbench import metrics as M
    from advbench.data import available_mask, ranking_view

    rng = np.random.default_rng(seed)
    worst = dict.fromkeys(["k_accuracy", "mlacc", "mse", "bce", "ol", "risk", "auc"], 0.0)

    def note(name, got, want):
        worst[name] = max(worst[name], abs(float(got) - float(want)))

    for _ in range(n_cases):
        states = _random_truth(rng)
        t = ranking_view(states[None])[0]
        mask = available_mask(states[None])[0]
        # coarse grids force ties in the top-k and the AUC
        z = np.round(rng.uniform(-4, 4, 18), int(rng.integers(0, 3)))
        p = 1 / (1 + np.exp(-z))
        k = int(rng.integers(1, 19))
        note("k_accuracy", M.k_accuracy_input(p, t, k), oracle_k_accuracy(p, t, k))
        th = rng.uniform(0.05, 0.95, 18)
        note("mlacc", M.mlacc(p, t, th, mask), oracle_mlacc(p, t, th, mask))
        for kind in ("mse", "bce", "ol"):
            note(kind, M.attack_loss_value(kind, z, t, mask), oracle_loss(kind, z, t, mask))
        c_row = rng.uniform(0, 1, 18)
        c_row[rng.integers(18)] = 0.0
        note("risk", M.risk(p, c_row), oracle_risk(p, c_row))
        n = int(rng.integers(4, 40))
        scores = np.round(rng.uniform(size=n), 1)
        pos = rng.uniform(size=n) < 0.4
        pos[0], pos[1] = True, False
        note("auc", M.binary_auc(scores, pos), oracle_auc(scores, pos))
    return worst


# one (criterion, passed, detail) entry per acceptance criterion, printed at session end
ACCEPTANCE_RESULTS = {}
