"""Central finite-difference checks for every operator and a composed network.

Error metric for one tensor: ``max|analytic - numeric| / max(max|analytic|,
max|numeric|, 1e-6)``. The floor keeps the ratio meaningful for gradients
that are numerically zero.
"""
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor

FD_STEP = 1e-5
TOLERANCE = 1e-4
SCALE_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    coords: int
    skipped: int = 0

    @property
    def passed(self):
        # a check whose every probe was skipped proves nothing
        return self.coords > 0 and self.max_rel_error < TOLERANCE


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), SCALE_FLOOR)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def _evaluate(loss_fn):
    """Loss value plus the ReLU activation pattern seen while computing it."""
    masks = []
    ops.relu_observers.append(masks)
    try:
        value = loss_fn().item()
    finally:
        ops.relu_observers.remove(masks)
    return value, masks


def _same_pattern(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def numeric_grad(loss_fn, tensor, coords, step=FD_STEP):
    """Central differences of ``loss_fn()`` w.r.t. ``tensor`` at flat ``coords``.

    Returns ``(values, valid)``; a probe is invalid when some ReLU changes
    sign between the two evaluations, i.e. the interval straddles a kink.
    """
    flat = tensor.data.reshape(-1)
    out = np.empty(len(coords))
    valid = np.ones(len(coords), dtype=bool)
    for k, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + step
        hi, hi_masks = _evaluate(loss_fn)
        flat[i] = orig - step
        lo, lo_masks = _evaluate(loss_fn)
        flat[i] = orig
        out[k] = (hi - lo) / (2 * step)
        valid[k] = _same_pattern(hi_masks, lo_masks)
    return out, valid


def check(loss_fn, tensors, rng=None, max_coords=None, step=FD_STEP):
    """Compare reverse-mode and finite-difference gradients of a scalar.

    ``loss_fn`` rebuilds the graph from ``tensors`` (leaves with
    ``requires_grad``) on every call. With ``max_coords`` a random subset of
    each tensor's entries is probed, replacing probes that straddle a ReLU
    kink. Returns ``(worst error, probes compared, probes skipped)``.
    """
    for t in tensors:
        t.zero_grad()
    loss_fn().backward()
    analytic = [t.grad.copy() for t in tensors]
    worst, probed, skipped = 0.0, 0, 0
    for t, g in zip(tensors, analytic):
        if max_coords is None or t.size <= max_coords:
            coords = np.arange(t.size)
            num, valid = numeric_grad(loss_fn, t, coords, step)
        else:
            order = rng.permutation(t.size)
            coords, num, valid = [], [], []
            for start in range(0, t.size, max_coords):
                batch = np.sort(order[start:start + max_coords])
                n, ok = numeric_grad(loss_fn, t, batch, step)
                coords.extend(batch[ok])
                num.extend(n[ok])
                skipped += int((~ok).sum())
                if len(coords) >= max_coords:
                    break
            coords = np.array(coords[:max_coords], dtype=np.int64)
            num = np.array(num[:max_coords])
            valid = np.ones(len(coords), dtype=bool)
        skipped += int((~valid).sum())
        if valid.any():
            worst = max(worst, relative_error(g.reshape(-1)[coords][valid], num[valid]))
        probed += int(valid.sum())
    return worst, probed, skipped


def _param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _projection(rng, shape):
    """Random weights turning a tensor output into a scalar loss."""
    return rng.normal(size=shape)


def _project(out, r):
    return ops.sum(ops.mul(out, r))


def _away_from_zero(rng, *shape, margin=0.05):
    """Normal samples pushed off the ReLU kink so differences stay on one side."""
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def op_cases(rng):
    """(name, loss_fn, tensors) for each registered operator."""
    cases = []

    x = _param(rng, 2, 3, 8, 8)
    for k, stride, pad in ((3, 1, 1), (3, 2, 1), (3, 1, 0), (3, 2, 0), (1, 1, 0)):
        w = _param(rng, 4, 3, k, k)
        r = _projection(rng, (2, 4) + ops_conv_shape(8, 8, k, stride, pad))
        cases.append((f"conv2d k{k} s{stride} p{pad}",
                      lambda x=x, w=w, s=stride, p=pad, r=r: _project(ops.conv2d(x, w, s, p), r),
                      [x, w]))

    xb = _param(rng, 4, 3, 5, 5, scale=2.0)
    gamma = Tensor(rng.uniform(0.5, 1.5, size=3), requires_grad=True)
    beta = _param(rng, 3)
    r = _projection(rng, (4, 3, 5, 5))
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
    cases.append(("batchnorm2d train",
                  lambda r=r: _project(ops.batchnorm2d(xb, gamma, beta, rm.copy(), rv.copy(), True), r),
                  [xb, gamma, beta]))
    cases.append(("batchnorm2d eval",
                  lambda r=r: _project(ops.batchnorm2d(xb, gamma, beta, rm.copy(), rv.copy(), False), r),
                  [xb, gamma, beta]))

    xr = Tensor(_away_from_zero(rng, 3, 7), requires_grad=True)
    r = _projection(rng, (3, 7))
    cases.append(("relu", lambda r=r: _project(ops.relu(xr), r), [xr]))
    xt = _param(rng, 3, 7)
    cases.append(("tanh", lambda r=r: _project(ops.tanh(xt), r), [xt]))

    xl, wl, bl = _param(rng, 5, 4), _param(rng, 3, 4), _param(rng, 3)
    r = _projection(rng, (5, 3))
    cases.append(("linear", lambda r=r: _project(ops.linear(xl, wl, bl), r), [xl, wl, bl]))

    a, b = _param(rng, 2, 3, 4, 4), _param(rng, 2, 5, 4, 4)
    r = _projection(rng, (2, 8, 4, 4))
    cases.append(("concat_channels", lambda r=r: _project(ops.concat_channels([a, b]), r), [a, b]))
    xs = _param(rng, 2, 8, 3, 3)
    r1, r2 = _projection(rng, (2, 3, 3, 3)), _projection(rng, (2, 5, 3, 3))

    def split_loss():
        p, q = ops.split(xs, [3, 5])
        return ops.add(_project(p, r1), _project(q, r2))

    cases.append(("split", split_loss, [xs]))

    xg = _param(rng, 2, 3, 5, 4)
    r = _projection(rng, (2, 3))
    cases.append(("global_avg_pool", lambda r=r: _project(ops.global_avg_pool(xg), r), [xg]))
    xp = _param(rng, 2, 3, 7, 6)
    r = _projection(rng, (2, 3, 3, 3))
    cases.append(("avg_pool2x2", lambda r=r: _project(ops.avg_pool2x2(xp), r), [xp]))

    xm = _param(rng, 4, 5)
    r = _projection(rng, (4, 5))
    cases.append(("softmax", lambda r=r: _project(ops.softmax(xm), r), [xm]))
    logits = _param(rng, 6, 4, scale=2.0)
    target = rng.dirichlet(np.ones(4), size=6)
    target /= target.sum(axis=1, keepdims=True)
    r = _projection(rng, (6,))
    cases.append(("softmax_cross_entropy",
                  lambda r=r: _project(ops.softmax_cross_entropy(logits, target), r), [logits]))

    u, v = _param(rng, 3, 4), _param(rng, 1, 4)
    cases.append(("add/sub/mul broadcast",
                  lambda: ops.mean(ops.mul(ops.sub(ops.add(u, v), ops.mul(u, v)), u)), [u, v]))
    q = _param(rng, 2, 3, 2, 2)
    cases.append(("square_sum", lambda: ops.square_sum(q), [q]))
    return cases


def ops_conv_shape(h, w, k, stride, pad):
    return ((h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)


def objective_cases(rng):
    """Losses built on top of the ops: multi-task sum, soft-share penalty, combiner."""
    from ..nets import combine_logits
    from ..objectives import LossWeights, SoftShareWeights, overall_loss, soft_share_penalty

    cases = []
    per_task = [_param(rng, 5) for _ in range(4)]
    v = (rng.random(5) < 0.6).astype(float)
    cases.append(("overall_loss",
                  lambda: overall_loss(per_task, LossWeights(2.0, 2.0, 2.0), v), per_task))

    fa = [_param(rng, 2, 3, s, s) for s in (4, 3, 2, 1)]
    fb = [_param(rng, 2, 3, s, s) for s in (4, 3, 2, 1)]
    weights = SoftShareWeights(tuple(rng.uniform(0.1, 2.0, size=4)))
    cases.append(("soft_share_penalty", lambda: soft_share_penalty(fa, fb, weights), fa + fb))

    bl, ly = _param(rng, 4, 2), _param(rng, 4, 2)
    params = {"fc1.weight": _param(rng, 10, 4), "fc1.bias": _param(rng, 10),
              "fc2.weight": _param(rng, 4, 10), "fc2.bias": _param(rng, 4)}
    r = _projection(rng, (4, 4))
    cases.append(("combine_logits", lambda: _project(combine_logits(bl, ly, params), r),
                  [bl, ly] + list(params.values())))
    return cases


def network_case(rng, sharing_mode="hard_all", batch=4):
    """Full multi-task loss of a desk-scale network, all parameters."""
    from .. import nets
    from ..objectives import SoftShareWeights, overall_loss, task_losses
    from ..training import TrainConfig, _soft_penalty, build_targets

    cfg = nets.ModelConfig(sharing_mode=sharing_mode)
    net = nets.build(cfg, seed=int(rng.integers(2**31)))
    x = rng.uniform(0.2, 0.6, size=(batch, 1, 32, 32))
    bq = rng.integers(4, size=batch)
    pi = rng.integers(3, size=batch)
    targets = build_targets(bq, pi, 0.1)
    buffers = {k: b.copy() for k, b in net.buffers.items()}
    # small block weights keep the loss O(10); with unit weights the penalty is
    # ~1e4 and central differences lose most of their significant digits
    tcfg = TrainConfig(epochs=1, warmup_epochs=0,
                       soft_share_weights=SoftShareWeights((1e-3,) * 4))

    def loss_fn():
        # restore running stats so every evaluation sees identical buffers
        for k, b in buffers.items():
            net.buffers[k][...] = b
        out = nets.forward(net, x, "train")
        loss = overall_loss(task_losses(out, targets))
        pen = _soft_penalty(net, out, tcfg)
        return loss if pen is None else ops.add(loss, pen)

    return f"network {sharing_mode}", loss_fn, list(net.params.values())


def run_suite(seed=0, network_modes=("hard_all",), network_coords=4):
    """Check every operator, the objectives and the composed network(s)."""
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, tensors in op_cases(rng) + objective_cases(rng):
        results.append(CheckResult(name, *check(fn, tensors)))
    for mode in network_modes:
        name, fn, tensors = network_case(rng, mode)
        results.append(CheckResult(name, *check(fn, tensors, rng=rng, max_coords=network_coords)))
    return results
