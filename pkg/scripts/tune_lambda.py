"""Pick the test-time control strength on the toy scene.

Trains (or loads) a base field, then for each lambda in the grid samples paired
controlled/base ODE paths and reports mean endpoint focus cost, paired win
count, sign-test p-value and energy distance to the base endpoints.

    python scripts/tune_lambda.py --config configs/toy.toml --paths 64
"""
import argparse
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from flowctl.config import RunConfig
from flowctl.costs import RunningCost, cost_state
from flowctl.field import MLP, AdamWConfig, TrainConfig, train_cfm
from flowctl.io import load_checkpoint, save_checkpoint
from flowctl.metrics import energy_distance
from flowctl.sampler import SamplerConfig, draw_initial, sample_controlled_ode, sample_ode

GRID = [0.01, 0.03, 0.1, 0.3, 1.0, 3.0]


def base_field(cfg: RunConfig, checkpoint: Path):
    if checkpoint.is_file():
        return load_checkpoint(checkpoint)
    net = MLP.init(cfg.field.dim, tuple(cfg.field.hidden), seed=cfg.field.init_seed)
    train_cfm(net, cfg.interpolant(), cfg.target.distribution().pairs,
              TrainConfig(steps=cfg.train.steps, batch=cfg.train.batch,
                          optimizer=AdamWConfig(lr=cfg.train.lr, weight_decay=cfg.train.weight_decay),
                          seed=cfg.train.seed))
    checkpoint.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(checkpoint, net)
    return net


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/toy.toml")
    ap.add_argument("--checkpoint", default="runs/toy/field.fctl")
    ap.add_argument("--paths", type=int, default=64)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--lambda", dest="grid", type=float, nargs="+", default=GRID)
    args = ap.parse_args()

    cfg = RunConfig.load(args.config)
    sched = cfg.interpolant()
    net = base_field(cfg, Path(args.checkpoint))
    head = cfg.scene_head()
    cost = RunningCost(head, cfg.cost.kind, cfg.cost.gamma_reg, cfg.cost.weighting, sched)
    scfg = SamplerConfig(steps=cfg.sampler.steps, t_start=cfg.sampler.t_start)
    x0 = draw_initial(args.seed, args.paths, cfg.field.dim)
    base_end = sample_ode(net, sched, scfg, x0).terminal
    base_cost = cost_state(head, cfg.cost.kind, base_end)
    null = energy_distance(base_end, sample_ode(net, sched, scfg, draw_initial(args.seed + 1, args.paths,
                                                                               cfg.field.dim)).terminal)
    print(f"base mean cost {base_cost.mean():.4f}, self-distance null {null:.4f}")
    print(f"{'lambda':>8} {'cost':>8} {'wins':>6} {'p':>10} {'ED':>8} {'ED/null':>8}")
    for lam in args.grid:
        end = sample_controlled_ode(net, sched, scfg, cost, lam, x0).terminal
        c = cost_state(head, cfg.cost.kind, end)
        wins = int(np.sum(c < base_cost))
        p = binomtest(wins, args.paths).pvalue
        ed = energy_distance(end, base_end)
        print(f"{lam:>8g} {c.mean():>8.4f} {wins:>6d} {p:>10.2e} {ed:>8.4f} {ed / null:>8.2f}")


if __name__ == "__main__":
    main()
