"""Compare the compiled and pure-numpy kernel backends.

Times each kernel and a full training step (forward + backward + AdamW) on
batches shaped like real training batches: 64 prefix sequences with
lengths drawn from 7..42, padded to the batch maximum.

    python benchmarks/bench_kernels.py [--batch 64] [--repeat 7] [--number 10]
"""

import argparse
import timeit

import numpy as np

from adherence_forecast.model import _kernels_py, kernels, network
from adherence_forecast.model.optim import OptimizerState, adamw_step


def make_batch(rng, batch, hp):
    lengths = rng.integers(7, 43, size=batch)
    t = int(lengths.max())
    mask = np.arange(t)[None, :] < lengths[:, None]
    values = rng.normal(size=(batch, hp.input_dim, t)) * mask[:, None, :]
    return values, mask


def best(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number * 1e3


def bench_backend(backend, values, mask, hp, repeat, number):
    rng = np.random.default_rng(1)
    params = network.init_model(hp, 0)
    b, _, t = values.shape
    d, h = hp.d_model, hp.n_heads
    q, k, v = (rng.normal(size=(b, t, d)) for _ in range(3))
    keep = rng.random((b, h, t, t)) < 0.9
    ctx, probs = backend.attention_forward(q, k, v, mask, h, keep, 1 / 0.9)
    gamma, beta = np.ones(d), np.zeros(d)
    _, xhat, inv = backend.layer_norm_forward(q, gamma, beta, 1e-5)
    state = OptimizerState.for_params(params, 1e-3)
    dlogits = rng.normal(size=(b, 2))

    def step():
        logits, trace = network.forward(params, values, mask, train=True, rng=rng, backend=backend)
        grads = network.backward(params, trace, dlogits, backend=backend)
        adamw_step(params, grads, state)

    return {
        "attention_forward": best(lambda: backend.attention_forward(q, k, v, mask, h, keep, 1 / 0.9),
                                  repeat, number),
        "attention_backward": best(lambda: backend.attention_backward(ctx, q, k, v, probs, mask, h,
                                                                      keep, 1 / 0.9), repeat, number),
        "layer_norm_forward": best(lambda: backend.layer_norm_forward(q, gamma, beta, 1e-5),
                                   repeat, number),
        "layer_norm_backward": best(lambda: backend.layer_norm_backward(q, xhat, inv, gamma),
                                    repeat, number),
        "eval_forward": best(lambda: network.forward(params, values, mask, backend=backend),
                             repeat, number),
        "train_step": best(step, repeat, number),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--number", type=int, default=10)
    args = ap.parse_args(argv)

    hp = network.HyperParams()
    values, mask = make_batch(np.random.default_rng(0), args.batch, hp)
    backends = {"python": _kernels_py}
    if kernels.compiled_available():
        from adherence_forecast.model import _kernels
        backends["cython"] = _kernels
    else:
        print("compiled extension not built; timing the numpy backend only")

    results = {name: bench_backend(mod, values, mask, hp, args.repeat, args.number)
               for name, mod in backends.items()}
    print(f"batch={args.batch} T_max={values.shape[2]}  (ms per call, best of {args.repeat})")
    header = f"{'kernel':<22}" + "".join(f"{n:>10}" for n in results)
    if len(results) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for key in results["python"]:
        row = f"{key:<22}" + "".join(f"{results[n][key]:>10.3f}" for n in results)
        if len(results) == 2:
            row += f"{results['python'][key] / results['cython'][key]:>9.2f}x"
        print(row)


if __name__ == "__main__":
    main()
