import os
import subprocess
import sys

import numpy as np
import pytest
from scipy import ndimage

from mtspine import _pykernels, kernels

compiled = pytest.mark.skipif("compiled" not in kernels.available_backends(),
                              reason="compiled kernels not built")

IMPLS = {"python": _pykernels}
if "compiled" in kernels.available_backends():
    from mtspine import _kernels

    IMPLS["compiled"] = _kernels

CONV_CASES = [(3, 1, 1), (3, 2, 1), (3, 1, 0), (3, 2, 0), (1, 1, 0), (1, 2, 0)]


def naive_im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
    out = np.zeros((c, k, k, n, ho, wo))
    for ci in range(c):
        for i in range(k):
            for j in range(k):
                for y in range(ho):
                    for xx in range(wo):
                        out[ci, i, j, :, y, xx] = xp[:, ci, y * stride + i, xx * stride + j]
    return out.reshape(c * k * k, n * ho * wo)


@pytest.mark.parametrize("k,stride,pad", CONV_CASES)
def test_python_im2col_matches_loops(k, stride, pad):
    x = np.random.default_rng(0).normal(size=(2, 3, 7, 6))
    np.testing.assert_array_equal(_pykernels.im2col(x, k, k, stride, pad), naive_im2col(x, k, stride, pad))


@pytest.mark.parametrize("k,stride,pad", CONV_CASES)
def test_col2im_is_adjoint_of_im2col(k, stride, pad):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 2, 6, 7))
    cols = _pykernels.im2col(x, k, k, stride, pad)
    y = rng.normal(size=cols.shape)
    back = _pykernels.col2im(y, x.shape, k, k, stride, pad)
    assert np.isclose(np.sum(cols * y), np.sum(x * back), rtol=1e-12)


@compiled
@pytest.mark.parametrize("shape", [(2, 3, 8, 8), (1, 2, 7, 5), (3, 1, 4, 9), (1, 1, 2, 2)])
@pytest.mark.parametrize("k,stride,pad", CONV_CASES)
def test_backends_bitwise_equal(shape, k, stride, pad):
    if _pykernels.conv_out_size(shape[2], k, stride, pad) < 1:
        pytest.skip("no output positions")
    rng = np.random.default_rng(2)
    x = rng.normal(size=shape)
    a = IMPLS["compiled"].im2col(x, k, k, stride, pad)
    np.testing.assert_array_equal(a, _pykernels.im2col(x, k, k, stride, pad))
    cols = rng.normal(size=a.shape)
    np.testing.assert_array_equal(IMPLS["compiled"].col2im(cols, shape, k, k, stride, pad),
                                  _pykernels.col2im(cols, shape, k, k, stride, pad))


@pytest.mark.parametrize("backend", sorted(IMPLS))
@pytest.mark.parametrize("seed", range(8))
def test_labelling_matches_scipy(backend, seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((23, 31)) < rng.uniform(0.2, 0.7)
    labels, count = IMPLS[backend].label_components(mask)
    ref, ref_count = ndimage.label(mask)  # 4-connectivity, raster order
    assert count == ref_count
    np.testing.assert_array_equal(labels, ref)


def test_labelling_edge_cases():
    for impl in IMPLS.values():
        labels, count = impl.label_components(np.zeros((4, 5), bool))
        assert count == 0 and not labels.any()
        labels, count = impl.label_components(np.ones((3, 3), bool))
        assert count == 1 and (labels == 1).all()
        labels, count = impl.label_components(np.eye(3, dtype=bool))  # diagonal is not 4-connected
        assert count == 3


def test_backend_switch():
    prev = kernels.backend
    try:
        kernels.use_backend("python")
        assert kernels.backend == "python"
        with pytest.raises(ValueError):
            kernels.use_backend("gpu")
    finally:
        kernels.use_backend(prev)


def test_env_forces_python_backend():
    out = subprocess.run(
        [sys.executable, "-c", "import mtspine.kernels as k; print(k.backend)"],
        env={**os.environ, "MTSPINE_KERNELS": "python"},
        capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "python"


@compiled
def test_training_step_identical_across_backends():
    from mtspine import nets, training
    from mtspine.objectives import overall_loss, task_losses

    rng = np.random.default_rng(3)
    batch = rng.uniform(0.2, 0.6, size=(4, 1, 32, 32))
    targets = training.build_targets([0, 1, 2, 3], [0, 1, 2, 0], 0.1)
    grads = {}
    prev = kernels.backend
    try:
        for name in ("compiled", "python"):
            kernels.use_backend(name)
            net = nets.build(nets.ModelConfig(), seed=0)
            overall_loss(task_losses(nets.forward(net, batch, "train"), targets)).backward()
            grads[name] = {k: p.grad.copy() for k, p in net.params.items()}
    finally:
        kernels.use_backend(prev)
    for k in grads["python"]:
        np.testing.assert_array_equal(grads["compiled"][k], grads["python"][k])
