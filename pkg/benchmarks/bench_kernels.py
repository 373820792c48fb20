"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Covers im2col/col2im at the shapes of the desk-scale stem and first dense
block, connected-component labelling of a phantom slice, and one full
forward/backward/SGD step on a batch of 32.
"""
import argparse
import timeit

import numpy as np

from mtspine import datagen, kernels, nets, training
from mtspine.objectives import overall_loss, task_losses


def cases(rng):
    x = rng.normal(size=(32, 16, 16, 16))
    cols = kernels.im2col(x, 3, 3, 1, 1)
    spec = datagen.PhantomSpec(seed=0, counts=((1, 0, 0), (0, 0, 0), (0, 0, 0), (0, 0, 1)))
    mask = datagen.bone_mask(datagen.generate_phantoms(spec)[1].image)

    net = nets.build(nets.ModelConfig(), seed=0)
    batch = rng.uniform(0.2, 0.6, size=(32, 1, 32, 32))
    targets = training.build_targets(rng.integers(4, size=32), rng.integers(3, size=32), 0.1)
    velocity = {}

    def step():
        net.zero_grad()
        out = nets.forward(net, batch, "train")
        overall_loss(task_losses(out, targets)).backward()
        training.sgd_step(net.params, 1e-4, 0.9, velocity)

    return {
        "im2col 32x16x16x16 k3": lambda: kernels.im2col(x, 3, 3, 1, 1),
        "col2im 32x16x16x16 k3": lambda: kernels.col2im(cols, x.shape, 3, 3, 1, 1),
        "label_components 64x64": lambda: kernels.label_components(mask),
        "train step batch 32": step,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled kernels not built; timing the python fallback only")
    previous = kernels.backend
    timings = {}
    for name in backends:
        kernels.use_backend(name)
        for label, fn in cases(np.random.default_rng(0)).items():
            timer = timeit.Timer(fn)
            number, _ = timer.autorange()
            best = min(timer.repeat(repeat=args.repeat, number=number)) / number
            timings[(label, name)] = best
    kernels.use_backend(previous)

    labels = list(dict.fromkeys(label for label, _ in timings))
    header = f"{'kernel':<26}" + "".join(f"{b + ' (ms)':>16}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for label in labels:
        row = f"{label:<26}" + "".join(f"{timings[(label, b)] * 1e3:16.3f}" for b in backends)
        if len(backends) == 2:
            row += f"{timings[(label, 'python')] / timings[(label, 'compiled')]:9.2f}x"
        print(row)


if __name__ == "__main__":
    main()
