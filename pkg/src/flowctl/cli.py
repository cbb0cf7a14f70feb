"""``flowctl`` batch command line: train, sample, finetune, eval, convert-vp."""
from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, default_config, vp_table_from_spec
from .control import (
    AMConfig,
    apply_control_inference,
    controlled_memoryless_sde,
    finetune_adjoint_matching,
)
from .costs import COSINE, FOCUS, RunningCost, cost_state, maps_from_state, write_pgm
from .errors import (
    ConfigError,
    CostError,
    DimensionMismatch,
    GridMismatch,
    IntegrityError,
    KeyMismatch,
    NumericalError,
    ScheduleError,
    TrainingDiverged,
)
from .field import CONTROL_TAG, FIELD_TAG, MLP, AdamWConfig, TrainConfig, smooth, train_cfm
from .io import (
    load_checkpoint,
    save_checkpoint,
    save_trajectory,
    write_fm_schedule,
    write_loss_curve,
    write_trajectory_csv,
    write_vp_table,
)
from .metrics import EloTable, MetricReport, Outcome, composite_score, elo_update, write_match_log
from .sampler import ODE, SDE, SamplerConfig, draw_initial, sample_controlled_ode, sample_controlled_sde
from .schedules import memoryless, vp_to_fm_schedule, zero_diffusion

logger = logging.getLogger("flowctl")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISSING, EXIT_INTEGRITY, EXIT_MISMATCH = 0, 2, 3, 4, 5, 6
FIELD_FILE = "field.fctl"
CONTROL_FILE = "control.fctl"
ENDPOINTS_FILE = "endpoints.csv"


class MissingArtifact(Exception):
    pass


# -- helpers -----------------------------------------------------------------

def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg.seeds = [int(args.seed)]
    if args.out:
        cfg.out = args.out
    return cfg


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: RunConfig, extra=None):
    """Config copy plus ``manifest.json`` with the config hash, tool version and output digests."""
    (out / "config.toml").write_text(cfg.dumps_portable(), encoding="utf-8")
    files = {str(p.relative_to(out)): _sha256(p) for p in sorted(out.rglob("*"))
             if p.is_file() and p.name != "manifest.json" and not _in_child_run(out, p)}
    manifest = {"tool": "flowctl", "version": __version__, "command": command,
                "config_hash": cfg.hash(), "seeds": list(cfg.seeds), "files": files}
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _in_child_run(out: Path, p: Path) -> bool:
    return any((parent / "manifest.json").exists() for parent in p.parents
               if parent != out and out in parent.parents)


def _require(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifact(f"missing artifact: {path}")
    return path


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("FLOWCTL_THREADS", "1")))
    except ValueError:
        raise ConfigError("FLOWCTL_THREADS must be an integer") from None


# -- train ---------------------------------------------------------------------

def cmd_train(cfg: RunConfig, checkpoint_out=None) -> dict:
    sched = cfg.interpolant()
    target = cfg.target.distribution()
    net = MLP.init(cfg.field.dim, tuple(cfg.field.hidden), seed=cfg.field.init_seed)
    tcfg = TrainConfig(steps=cfg.train.steps, batch=cfg.train.batch,
                       optimizer=AdamWConfig(lr=cfg.train.lr, weight_decay=cfg.train.weight_decay),
                       loss_threshold=cfg.train.loss_threshold, seed=cfg.train.seed)
    res = train_cfm(net, sched, target.pairs, tcfg)
    out = _outdir(cfg)
    save_checkpoint(Path(checkpoint_out) if checkpoint_out else out / FIELD_FILE, net)
    write_loss_curve(out / "loss_curve.csv", res.losses, smooth(res.losses, tcfg.smooth_window))
    info = {"smoothed_final_loss": res.smoothed_final, "converged": res.converged,
            "checksum": net.checksum()}
    write_manifest(out, "train", cfg, info)
    return info


# -- sample --------------------------------------------------------------------

def _sampler_config(cfg: RunConfig, sched) -> SamplerConfig:
    s = cfg.sampler
    if s.mode == SDE:
        # a zero-diffusion SDE is the ODE; sde mode therefore defaults to the memoryless schedule
        diff = memoryless(sched)
    else:
        diff = memoryless(sched) if s.diffusion == "memoryless" else zero_diffusion()
    return SamplerConfig(steps=s.steps, mode=s.mode, diffusion=diff, t_start=s.t_start)


def _sample_one(cfg: RunConfig, field, control, sched, scfg, seed):
    n = cfg.sampler.paths_per_seed
    x0 = draw_initial(seed, n, cfg.field.dim)
    x0 = x0[0] if n == 1 else x0
    if control is not None:
        if scfg.mode == SDE:
            return controlled_memoryless_sde(field, control, sched, scfg, x0, seed=seed)
        return apply_control_inference(field, control, sched, scfg, x0)
    cost = RunningCost(cfg.scene_head(), cfg.cost.kind, cfg.cost.gamma_reg, cfg.cost.weighting, sched)
    if scfg.mode == SDE:
        return sample_controlled_sde(field, sched, scfg, cost, cfg.cost.lam, x0, seed=seed)
    return sample_controlled_ode(field, sched, scfg, cost, cfg.cost.lam, x0)


def _run_sample(cfg: RunConfig, checkpoint_in, control_path=None) -> dict:
    field = load_checkpoint(_require(checkpoint_in), expect_tag=FIELD_TAG)
    if field.dim != cfg.field.dim:
        raise ConfigError(f"checkpoint dim {field.dim} != field.dim {cfg.field.dim}")
    control = load_checkpoint(_require(control_path), expect_tag=CONTROL_TAG) if control_path else None
    sched = cfg.interpolant()
    scfg = _sampler_config(cfg, sched)
    head = cfg.scene_head()
    out = _outdir(cfg)
    (out / "trajectories").mkdir(exist_ok=True)
    (out / "maps").mkdir(exist_ok=True)
    rows = []
    for seed in cfg.seeds:
        traj = _sample_one(cfg, field, control, sched, scfg, seed)
        save_trajectory(out / "trajectories" / f"seed_{seed}.ftrj", traj)
        batched = traj.states.ndim == 3
        write_trajectory_csv(out / "trajectories" / f"seed_{seed}.csv", traj, 0 if batched else None)
        ends = np.atleast_2d(traj.terminal)
        rows.extend((seed, p, e) for p, e in enumerate(ends))
        for s, subject in enumerate(maps_from_state(head, ends[0])):
            for k, pm in enumerate(subject.maps):
                write_pgm(out / "maps" / f"seed_{seed}_subject_{s}_map_{k}.pgm", pm)
    with open(out / ENDPOINTS_FILE, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "path", *(f"x_{j}" for j in range(cfg.field.dim))])
        for seed, p, e in rows:
            w.writerow([seed, p, *(repr(float(v)) for v in e)])
    ends = np.array([e for _, _, e in rows])
    info = {"mean_endpoint_cost": float(np.mean(cost_state(head, cfg.cost.kind, ends)))}
    write_manifest(out, "sample", cfg, info)
    return info


def _sweep_child(args):
    text, lam, out, checkpoint_in, control_path = args
    cfg = RunConfig.loads(text)
    cfg.cost.lam, cfg.out = lam, out
    return lam, _run_sample(cfg, checkpoint_in, control_path)


def cmd_sample(cfg: RunConfig, checkpoint_in=None, control_path=None, lam=None) -> dict:
    """Single run, or a λ sweep expanded into child runs ``<out>/lambda_<value>``."""
    checkpoint_in = checkpoint_in or Path(cfg.out) / FIELD_FILE
    if lam is not None:
        cfg.cost.lam = float(lam)
    if lam is not None or not cfg.sweep.lam:
        return _run_sample(cfg, checkpoint_in, control_path)
    out = _outdir(cfg)
    _require(checkpoint_in)
    jobs = [(cfg.dumps(), float(v), str(out / f"lambda_{float(v):g}"), str(checkpoint_in), control_path)
            for v in cfg.sweep.lam]
    workers = min(_threads(), len(jobs))
    if workers == 1:
        results = [_sweep_child(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_child, jobs))
    summary = {f"{lam:g}": r["mean_endpoint_cost"] for lam, r in results}
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "mean_endpoint_cost", "run"])
        for (lam, r), job in zip(results, jobs):
            w.writerow([repr(lam), repr(r["mean_endpoint_cost"]), Path(job[2]).name])
    write_manifest(out, "sample-sweep", cfg, {"sweep": summary})
    return {"sweep": summary}


# -- finetune ------------------------------------------------------------------

def cmd_finetune(cfg: RunConfig, checkpoint_in=None, checkpoint_out=None) -> dict:
    out = _outdir(cfg)
    field = load_checkpoint(_require(checkpoint_in or out / FIELD_FILE), expect_tag=FIELD_TAG)
    base_sum = field.checksum()
    sched = cfg.interpolant()
    ft = cfg.finetune
    cost = RunningCost(cfg.scene_head(), cfg.cost.kind, cfg.cost.gamma_reg, ft.weighting, sched)
    am = AMConfig(lam=ft.lam, steps_total=ft.steps, batch_trajectories=ft.batch,
                  subsample_steps=ft.subsample, sampler_steps=cfg.sampler.steps,
                  t_start=cfg.sampler.t_start, hidden=tuple(ft.hidden),
                  optimizer=AdamWConfig(lr=ft.lr), checkpoint_every=ft.checkpoint_every)
    res = finetune_adjoint_matching(field, sched, cost, am, seed=ft.seed)
    if field.checksum() != base_sum:
        raise IntegrityError("base field checksum changed")
    target = Path(checkpoint_out) if checkpoint_out else out / CONTROL_FILE
    save_checkpoint(target, res.control)
    for step, theta in sorted(res.snapshots.items()):
        snap = res.control.copy()
        snap.theta[:] = theta
        save_checkpoint(out / f"control_step_{step}.fctl", snap)
    write_loss_curve(out / "am_loss_curve.csv", res.losses, smooth(res.losses))
    info = {"final_loss": float(res.losses[-1]) if len(res.losses) else None,
            "control_norm": float(np.linalg.norm(res.control.theta)),
            "base_checksum": base_sum}
    write_manifest(out, "finetune", cfg, info)
    return info


# -- eval ----------------------------------------------------------------------

EVAL_METRICS = {"disentanglement": FOCUS, "separation": COSINE}


def _read_endpoints(run: Path) -> dict:
    path = _require(run / ENDPOINTS_FILE)
    by_seed = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            by_seed.setdefault(int(row[0]), []).append([float(v) for v in row[2:]])
    return {s: np.array(v) for s, v in by_seed.items()}


def evaluate_run(run: Path, scenes: dict, dim: int) -> MetricReport:
    """Per (scene, seed) metrics, all oriented so larger is better."""
    manifest = run / "manifest.json"
    chash = json.loads(manifest.read_text())["config_hash"] if manifest.exists() else "unknown"
    report = MetricReport(chash)
    for seed, ends in sorted(_read_endpoints(run).items()):
        if ends.shape[1] != dim:
            raise DimensionMismatch(f"{run}: endpoints have dim {ends.shape[1]}, expected {dim}")
        for name, spec in sorted(scenes.items()):
            head = spec.head(dim)
            report.add(name, seed, {m: 1.0 - float(np.mean(cost_state(head, kind, ends)))
                                    for m, kind in EVAL_METRICS.items()})
    return report


def _labels(runs):
    names = [Path(r).name or str(r) for r in runs]
    seen = {}
    out = []
    for n in names:
        seen[n] = seen.get(n, 0) + 1
        out.append(n if names.count(n) == 1 else f"{n}#{seen[n]}")
    return out


def cmd_eval(base_run, candidates, out, cfg: RunConfig = None) -> list:
    base_run = Path(base_run)
    if cfg is None:
        cfg = RunConfig.load(_require(base_run / "config.toml"))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    base = evaluate_run(base_run, cfg.scenes, cfg.field.dim)
    (out / "report_base.json").write_text(base.to_json() + "\n")
    labels = _labels(candidates)
    reports = {}
    table = []
    for label, run in zip(labels, candidates):
        rep = evaluate_run(Path(run), cfg.scenes, cfg.field.dim)
        comp = composite_score(rep, base)
        reports[label] = rep
        (out / f"report_{label}.json").write_text(rep.to_json() + "\n")
        table.append((label, comp.value, comp.skipped, rep.summary()))
    table.sort(key=lambda r: (-r[1], r[0]))

    elo = EloTable.with_candidates(["base", *labels])
    everyone = {"base": base, **reports}
    base_vals = base.values()
    for (scene, seed, metric) in sorted(base_vals):
        if metric != "disentanglement":
            continue
        for a, b in itertools.combinations(everyone, 2):
            va = everyone[a].values()[(scene, seed, metric)]
            vb = everyone[b].values()[(scene, seed, metric)]
            res = Outcome.DRAW if va == vb else (Outcome.A_WINS if va > vb else Outcome.B_WINS)
            elo_update(elo, a, b, res)
    write_match_log(out / "matches.jsonl", elo)

    with open(out / "composite.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["candidate", "composite", "skipped", "elo",
                    *(f"{m}_mean" for m in EVAL_METRICS), *(f"{m}_std" for m in EVAL_METRICS)])
        for label, value, skipped, summ in table:
            w.writerow([label, f"{value:.6f}", skipped, f"{elo.ratings[label]:.2f}",
                        *(f"{summ[m]['mean']:.6f}" for m in EVAL_METRICS),
                        *(f"{summ[m]['std']:.6f}" for m in EVAL_METRICS)])
    manifest = {"tool": "flowctl", "version": __version__, "command": "eval",
                "config_hash": cfg.hash(), "base": str(base_run), "candidates": [str(c) for c in candidates]}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return table


# -- convert-vp ----------------------------------------------------------------

def cmd_convert_vp(cfg: RunConfig) -> dict:
    table = vp_table_from_spec(cfg.schedule)
    sched = vp_to_fm_schedule(table)
    out = _outdir(cfg)
    write_vp_table(out / "vp_table.csv", table)
    write_fm_schedule(out / "fm_schedule.csv", sched)
    write_manifest(out, "convert-vp", cfg, {"K": len(table.betas)})
    return {"K": len(table.betas)}


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run-config TOML file")
    common.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--checkpoint-in", help="input field checkpoint")
    common.add_argument("--checkpoint-out", help="output checkpoint path")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="flowctl", description=__doc__)
    p.add_argument("--version", action="version", version=f"flowctl {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train a base field with the CFM loss")

    s = sub.add_parser("sample", parents=[common], help="sample trajectories (base or controlled)")
    s.add_argument("--mode", choices=[ODE, SDE])
    s.add_argument("--steps", type=int)
    s.add_argument("--lambda", dest="lam", type=float, help="test-time control strength")
    s.add_argument("--paths", type=int, help="paths per seed")
    s.add_argument("--control", help="learned control checkpoint to apply")

    f = sub.add_parser("finetune", parents=[common], help="fit a control net by adjoint matching")
    f.add_argument("--lambda", dest="lam", type=float)
    f.add_argument("--steps", type=int)
    f.add_argument("--batch", type=int)
    f.add_argument("--subsample", type=int)

    e = sub.add_parser("eval", parents=[common], help="score candidate runs against a base run")
    e.add_argument("--base", required=True)
    e.add_argument("--candidate", nargs="+", required=True)

    sub.add_parser("convert-vp", parents=[common], help="emit the FM schedule of a VP rate table")
    return p


def _dispatch(args) -> int:
    if args.command == "eval":
        cfg = RunConfig.load(args.config) if args.config else None
        out = args.out or str(Path(args.base) / "eval")
        table = cmd_eval(args.base, args.candidate, out, cfg)
        print(f"{'candidate':<24} {'composite':>10} {'skipped':>8}")
        for label, value, skipped, _ in table:
            print(f"{label:<24} {value:>10.4f} {skipped:>8d}")
        return EXIT_OK

    cfg = _load_config(args)
    if args.command == "train":
        info = cmd_train(cfg, args.checkpoint_out)
    elif args.command == "sample":
        if args.mode:
            cfg.sampler.mode = args.mode
        if args.steps:
            cfg.sampler.steps = args.steps
        if args.paths:
            cfg.sampler.paths_per_seed = args.paths
        cfg.validate()
        info = cmd_sample(cfg, args.checkpoint_in, args.control, args.lam)
    elif args.command == "finetune":
        ft = cfg.finetune
        for name in ("lam", "steps", "batch", "subsample"):
            if getattr(args, name) is not None:
                setattr(ft, name, getattr(args, name))
        cfg.validate()
        info = cmd_finetune(cfg, args.checkpoint_in, args.checkpoint_out)
    else:
        info = cmd_convert_vp(cfg)
    print(json.dumps(info, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, ScheduleError, CostError) as exc:
        code, msg = EXIT_CONFIG, f"config error: {exc}"
    except (TrainingDiverged, NumericalError) as exc:
        code, msg = EXIT_DIVERGED, f"diverged: {exc}"
    except MissingArtifact as exc:
        code, msg = EXIT_MISSING, str(exc)
    except IntegrityError as exc:
        code, msg = EXIT_INTEGRITY, f"integrity error: {exc}"
    except (KeyMismatch, GridMismatch, DimensionMismatch) as exc:
        code, msg = EXIT_MISMATCH, f"evaluation mismatch: {exc}"
    print(f"flowctl: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
