"""Meta-train a scale network, then race it against isotropic noise.

A small quadratic family is built so that one block is steep and near its
optimum while the other is flat and far away.  Isotropic perturbations waste
budget on the steep block; the learned per-block scales shift it to the flat
one.  After meta-training we fine-tune a held-out task with both methods and
compare steps to half the initial loss.

Takes roughly half a minute on one CPU.

Run: python demos/race_demo.py
"""

import numpy as np

from zoft.errors import DivergenceError
from zoft.meta_trainer import MetaConfig, train
from zoft.paramspace import NoiseSeed
from zoft.pertnn import init as pertnn_init
from zoft.testbeds import QuadraticFamily
from zoft.zo_optimizer import ZOConfig, run_finetune


def steps_to_half(records):
    target = 0.5 * records[0].loss
    return next((r.t for r in records if r.loss <= target), None)


def main():
    family = QuadraticFamily(
        block_sizes=(48, 16), ranks=(48.0, 16.0), opnorms=(1.0, 0.05),
        shift_scale=1.0, init_scale=(0.204, 1.58), seed=0,
    )
    tasks = family.make_tasks(8)
    meta_cfg = MetaConfig(eta1=0.05, eta2=0.05, steps=500, reset_period=50, seed=0)
    print("meta-training on 8 tasks for 500 steps ...")
    trained, log = train(meta_cfg, tasks,
                         pertnn_init(tasks[0].partition, 32, NoiseSeed(0)))
    print(f"meta objective: first {log.records[0].l_zo:.4f}, "
          f"last {log.records[-1].l_zo:.4f}")

    held_out = family.make_task(100)
    grid = [0.02, 0.05, 0.125]
    print(f"\nfine-tuning held-out task, best lr from {grid}, 5 seeds:")
    print(f"{'method':<12}{'best lr':>9}{'median steps to half loss':>28}"
          f"{'median final':>16}")
    for method, params in (("mezo", None), ("finetuner", trained)):
        by_lr = {}
        for lr in grid:
            steps, finals = [], []
            for seed in range(5):
                try:
                    recs = run_finetune(
                        held_out,
                        ZOConfig(learning_rate=lr, steps=400, mode=method, seed=seed),
                        params,
                    )
                except DivergenceError:
                    steps.append(401)
                    finals.append(float("inf"))
                    continue
                stt = steps_to_half(recs)
                steps.append(stt if stt is not None else 401)
                finals.append(np.mean([r.loss for r in recs[-40:]]))
            by_lr[lr] = (float(np.median(finals)), float(np.median(steps)))
        lr = min(grid, key=lambda v: by_lr[v])
        final, steps = by_lr[lr]
        print(f"{method:<12}{lr:>9g}{steps:>28g}{final:>16.4f}")


if __name__ == "__main__":
    main()
