"""Independent reference computations shared by the unit and acceptance suites."""

import numpy as np
import torch
from scipy import sparse

from ntkdp import tape as T
from ntkdp.grid import DomainSet, SparseGrid

FD_STEP = 1e-4
KINK_MARGIN = 10 * FD_STEP


# --------------------------------------------------------------------------
# central finite differences


def _away_from(x, kinks, rng, scale=1.0):
    """Resample entries of ``x`` that sit within the finite-difference margin of a kink."""
    x = x.copy()
    for _ in range(100):
        bad = np.zeros(x.shape, bool)
        for k in kinks:
            bad |= np.abs(x - k) < KINK_MARGIN
        if not bad.any():
            return x
        x[bad] = rng.normal(size=int(bad.sum())) * scale
    raise RuntimeError("could not move inputs off the kinks")


def _random_domain(rng, dim=6, n=40):
    return DomainSet.from_coords(rng.integers(0, dim, size=(n, 3)), dim)


def op_cases():
    """``name -> builder(rng)``; each builder returns (inputs, fn) where fn(tape, nodes) -> node."""
    cases = {}

    def conv(stride, kernel):
        def build(rng):
            d = _random_domain(rng, 6, 60)
            rule = T.make_rule(d, kernel=kernel, stride=stride, padding=0 if kernel == 2 else None)
            cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            inputs = [rng.normal(size=(len(d), cin)), rng.normal(size=(rule.n_offsets, cin, cout)),
                      rng.normal(size=cout)]
            return inputs, lambda tp, n: T.sparse_conv(n[0], n[1], n[2], rule)
        return build

    cases["sparse_conv_s1_k3"] = conv(1, 3)
    cases["sparse_conv_s2_k2"] = conv(2, 2)
    cases["sparse_conv_s2_k3"] = conv(2, 3)
    cases["sparse_conv_k1"] = conv(1, 1)

    def inorm(rng):
        n = int(rng.integers(4, 30))
        return [rng.normal(size=(n, 3)) * 2 + 1], lambda tp, x: T.instance_norm(x[0])

    def lrelu(rng):
        x = _away_from(rng.normal(size=(20, 3)), [0.0], rng)
        return [x], lambda tp, n: T.leaky_relu(n[0], 0.2)

    def concat(rng):
        return [rng.normal(size=(10, 2)), rng.normal(size=(10, 3))], lambda tp, n: T.concat_channels(n[0], n[1])

    def clip(rng):
        x = _away_from(rng.normal(size=(25, 2)), [-0.5, 0.5], rng)
        return [x], lambda tp, n: T.clip(n[0], 0.5)

    def gather(rng):
        idx = rng.integers(0, 8, size=20)
        return [rng.normal(size=(8, 3))], lambda tp, n: T.gather_rows(n[0], idx)

    def linmap(rng):
        d = _random_domain(rng, 5, 30)
        from ntkdp.grid import laplacian_matrix
        L = laplacian_matrix(d)
        return [rng.normal(size=(len(d), 2))], lambda tp, n: T.linear_map(n[0], L)

    def sqnorm(rng):
        return [rng.normal(size=(12, 3))], lambda tp, n: T.sq_norm(n[0])

    def msd(rng):
        rows = rng.choice(15, size=7, replace=False)
        tgt = rng.normal(size=7)
        return [rng.normal(size=(15, 1))], lambda tp, n: T.masked_sq_diff(n[0], tgt, rows)

    def msl(rng):
        d = _random_domain(rng, 5, 30)
        mask = DomainSet(d.dim, d.keys[rng.random(len(d)) < 0.5] if len(d) > 1 else d.keys)
        if not len(mask):
            mask = DomainSet(d.dim, d.keys[:1])
        target = SparseGrid(d, rng.normal(size=len(d)))
        return [rng.normal(size=(len(d), 1))], lambda tp, n: T.masked_sq_loss(n[0], target, mask, d)

    def add(rng):
        return [rng.normal(size=(6, 2)), rng.normal(size=(6, 2))], lambda tp, n: T.add(n[0], n[1])

    def scale(rng):
        c = float(rng.normal())
        return [rng.normal(size=(6, 2))], lambda tp, n: T.scale(n[0], c)

    def total(rng):
        return ([rng.normal(size=(4, 1)) for _ in range(3)], lambda tp, n: T.total([n[0], n[1], n[2]]))

    def select(rng):
        r, c = int(rng.integers(0, 5)), int(rng.integers(0, 2))
        return [rng.normal(size=(5, 2))], lambda tp, n: T.select(n[0], r, c)

    def chain(rng):
        # conv -> norm -> leaky relu -> head, the block pattern of the network
        d = _random_domain(rng, 6, 50)
        r3 = T.make_rule(d, kernel=3)
        r1 = T.make_rule(d, kernel=1)
        inputs = [rng.normal(size=(len(d), 2)), rng.normal(size=(27, 2, 3)), rng.normal(size=3),
                  rng.normal(size=(1, 3, 1))]

        def fn(tp, n):
            h = T.instance_norm(T.sparse_conv(n[0], n[1], n[2], r3))
            return T.sparse_conv(T.leaky_relu(h), n[3], None, r1)
        return inputs, fn

    cases.update({
        "instance_norm": inorm, "leaky_relu": lrelu, "concat_channels": concat, "clip": clip,
        "gather_rows": gather, "linear_map": linmap, "sq_norm": sqnorm, "masked_sq_diff": msd,
        "masked_sq_loss": msl, "add": add, "scale": scale, "total": total, "select": select,
        "conv_norm_lrelu_chain": chain,
    })
    return cases


def _evaluate(fn, inputs, proj):
    tp = T.Tape()
    nodes = [tp.variable(x) for x in inputs]
    out = fn(tp, nodes)
    return tp, nodes, out, float(np.sum(out.value * proj))


def gradient_error(builder, rng, max_entries=40) -> float:
    """Relative error between tape gradients and central differences of a random projection."""
    inputs, fn = builder(rng)
    tp, nodes, out, _ = _evaluate(fn, inputs, 0.0)
    proj = rng.normal(size=out.value.shape)
    grads = tp.backward(out, proj, accumulate=False, wrt=nodes)
    got, want = [], []
    for k, x in enumerate(inputs):
        g = grads.get(nodes[k].id, np.zeros_like(x))
        flat = np.arange(x.size)
        if flat.size > max_entries:
            flat = rng.choice(flat, size=max_entries, replace=False)
        for e in flat:
            plus = [v.copy() for v in inputs]
            minus = [v.copy() for v in inputs]
            plus[k].flat[e] += FD_STEP
            minus[k].flat[e] -= FD_STEP
            fp = _evaluate(fn, plus, proj)[3]
            fm = _evaluate(fn, minus, proj)[3]
            want.append((fp - fm) / (2 * FD_STEP))
            got.append(g.flat[e])
    got, want = np.array(got), np.array(want)
    return float(np.linalg.norm(got - want) / max(np.linalg.norm(want), 1e-12))


# --------------------------------------------------------------------------
# dense convolution


def dense_conv(x_dense: np.ndarray, w: np.ndarray, b: np.ndarray, kernel: int, stride: int, padding: int):
    """torch conv3d in float64; ``x_dense`` is (H, H, H, Cin), ``w`` is (K, Cin, Cout) in cube order."""
    cin, cout = w.shape[1], w.shape[2]
    wt = torch.from_numpy(w.reshape(kernel, kernel, kernel, cin, cout).transpose(4, 3, 0, 1, 2).copy())
    xt = torch.from_numpy(x_dense.transpose(3, 0, 1, 2)[None].copy())
    y = torch.nn.functional.conv3d(xt, wt, torch.from_numpy(b), stride=stride, padding=padding)
    return y[0].numpy().transpose(1, 2, 3, 0)


def sparse_as_dense_conv(rng, dim=8, stride=None):
    """Random fully occupied conv case; returns the max abs deviation from the dense oracle."""
    stride = int(rng.choice([1, 2])) if stride is None else stride
    kernel = int(rng.choice([1, 2, 3])) if stride == 2 else int(rng.choice([1, 3]))
    padding = (kernel - 1) // 2
    cin, cout = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    d = DomainSet.full(dim)
    x = rng.normal(size=(len(d), cin))
    w = rng.normal(size=(kernel**3, cin, cout))
    b = rng.normal(size=cout)
    if kernel == 1 and stride == 2:
        rule = T.make_rule(d, kernel=1, stride=2, padding=0)
    else:
        rule = T.make_rule(d, kernel=kernel, stride=stride, padding=padding)
    tp = T.Tape()
    y = T.sparse_conv(tp.constant(x), tp.constant(w), tp.constant(b), rule)
    dense = dense_conv(SparseGrid(d, x).to_dense(), w, b, kernel, stride, padding)
    got = SparseGrid(rule.out_domain, y.value).to_dense()
    if got.shape != dense.shape:
        raise AssertionError(f"shape {got.shape} vs {dense.shape}")
    return float(np.abs(got - dense).max())


# --------------------------------------------------------------------------
# set formulas for the completion domain


def brute_dilate(keys: set, dim: int, n: int) -> set:
    cur = set(keys)
    for _ in range(n):
        nxt = set(cur)
        for (i, j, k) in cur:
            for a in (-1, 0, 1):
                for b in (-1, 0, 1):
                    for c in (-1, 0, 1):
                        p = (i + a, j + b, k + c)
                        if 0 <= p[0] < dim and 0 <= p[1] < dim and 0 <= p[2] < dim:
                            nxt.add(p)
        cur = nxt
    return cur


def brute_init_domain(omega: set, vacant: set, boundary: set, dim: int, n: int) -> set:
    return (brute_dilate(omega, dim, n) - vacant) | brute_dilate(boundary, dim, 2)


def brute_update_domain(values: dict, eta: float, omega: set, dim: int, n: int) -> set:
    near = {c for c, v in values.items() if abs(v) < eta}
    return brute_dilate(near, dim, n) | omega


def random_set(rng, dim, n):
    return DomainSet.from_coords(rng.integers(0, dim, size=(n, 3)), dim)


def alg1_configs(n_cases=100, seed=0):
    """Random small instances: (omega, vacant, boundary, prediction, eta, n, dim)."""
    rng = np.random.default_rng(seed)
    for _ in range(n_cases):
        dim = int(rng.integers(4, 11))
        omega = random_set(rng, dim, int(rng.integers(0, 12)))
        vacant = random_set(rng, dim, int(rng.integers(0, 40))) - omega
        boundary = random_set(rng, dim, int(rng.integers(0, 4)))
        pred_dom = random_set(rng, dim, int(rng.integers(1, 60)))
        pred = SparseGrid(pred_dom, rng.uniform(-1.5, 1.5, size=len(pred_dom)))
        yield omega, vacant, boundary, pred, float(rng.uniform(0.1, 1.0)), int(rng.integers(0, 4)), dim


def sphere_sdf_grid(dim: int, radius: float, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    idx = np.indices((dim,) * 3).reshape(3, -1).T
    p = (idx + 0.5) / dim - 0.5
    return (np.linalg.norm(p - np.asarray(center), axis=1) - radius).reshape((dim,) * 3)


def csr(a) -> sparse.csr_matrix:
    return sparse.csr_matrix(a)
