"""Command-line entry point: ``train``, ``eval``, ``sweep``, ``inspect``, ``export-plots``.

Exit codes: 0 success, 1 some sweep runs failed, 2 configuration or input
error, 3 numeric abort (repeated non-finite training steps).
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig, apply_overrides, from_dict, load_config, run_directory
from .errors import CheckpointError, ConfigError, ContractError, LatentRLError, NumericAbort
from .evaluation import EvalReport, evaluate, load_report, write_problem_csv
from .rollout import generate_trajectories, top_tokens
from .rng import stream
from .sampler import NOISE_KINDS, SamplerConfig
from .tasks import DEFAULT_VOCAB, save_dataset
from .trainer import MetricsWriter, Trainer, load_checkpoint, moving_average, read_metrics

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
SWEEP_DOMAIN = 6


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def run_training(cfg: RunConfig, run_dir: Path, quiet: bool = False) -> dict:
    """Train per ``cfg`` inside ``run_dir``; returns a small summary dict."""
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(cfg.to_yaml())
    train_set, eval_set = cfg.train_dataset(), cfg.eval_dataset()
    save_dataset(train_set, run_dir / "train.jsonl")
    save_dataset(eval_set, run_dir / "eval.jsonl")
    ck_dir = run_dir / "checkpoints"
    ck_dir.mkdir(exist_ok=True)
    meta = {"run_config": cfg.to_dict()}

    trainer = Trainer.fresh(cfg.model, cfg.sampler, cfg.trainer, train_set)
    trainer.save(ck_dir / "step_00000.ckpt", meta)
    writer = MetricsWriter(run_dir, cfg.to_dict())
    try:
        while trainer.step < cfg.trainer.total_steps:
            rec = trainer.train_step()
            writer.write(rec)
            if not quiet and (rec.step % 10 == 0 or rec.aborted):
                flag = " ABORTED " + rec.note if rec.aborted else ""
                print(f"step {rec.step:5d} reward {rec.reward_mean:.3f} loss {rec.loss_total:+.4f} "
                      f"kl {rec.kl:.4f} entropy {rec.entropy_mean:.3f}{flag}", flush=True)
            if cfg.checkpoint_every and trainer.step % cfg.checkpoint_every == 0:
                trainer.save(ck_dir / f"step_{trainer.step:05d}.ckpt", meta)
    finally:
        writer.close()
    trainer.save(run_dir / "final.ckpt", meta)

    ev = cfg.eval
    report = evaluate(trainer.params, eval_set[:ev.n_problems], ev.k,
                      replace(cfg.sampler, temperature=ev.temperature),
                      n_latent=cfg.trainer.effective_latent,
                      max_answer_len=cfg.trainer.max_answer_len, seed=cfg.seed)
    report.save(run_dir / "eval_report.json", run_dir / "eval_problems.csv")
    rewards = [h.reward_mean for h in trainer.history]
    summary = {"final_pass_at_1": report.pass_at_1, f"final_pass_at_{ev.k}": report.pass_at_k,
               "final_reward": float(np.mean(rewards[-20:])) if rewards else float("nan"),
               "steps": trainer.step}
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def cmd_train(config_path: str, overrides: Sequence[str] = (), output: str | None = None,
              quiet: bool = False) -> int:
    try:
        cfg = load_config(config_path, overrides)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    run_dir = run_directory(cfg, output)
    try:
        summary = run_training(cfg, run_dir, quiet)
    except NumericAbort as exc:
        _err(f"numeric abort: {exc}")
        return EXIT_NUMERIC
    print(f"run directory: {run_dir}")
    for key in sorted(summary):
        print(f"{key}: {summary[key]}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(checkpoint: str, k: int | None = None, n_problems: int | None = None,
             output: str | None = None, dataset: str | None = None, seed: int = 0) -> int:
    try:
        ck = load_checkpoint(checkpoint)
    except (CheckpointError, ContractError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    try:
        cfg = from_dict(ck["meta"].get("run_config") or {})
    except ConfigError as exc:
        _err(f"checkpoint run_config: {exc}")
        return EXIT_CONFIG
    if dataset:
        from .tasks import load_dataset
        try:
            problems = load_dataset(dataset)
        except (OSError, ContractError) as exc:
            _err(str(exc))
            return EXIT_CONFIG
    else:
        problems = cfg.eval_dataset()
    problems = problems[:n_problems or cfg.eval.n_problems]
    k = k or cfg.eval.k
    if k < 1:
        _err("--k must be >= 1")
        return EXIT_CONFIG
    tcfg = ck.get("train_config", cfg.trainer)
    report = evaluate(ck["params"], problems, k, replace(cfg.sampler, temperature=cfg.eval.temperature),
                      n_latent=tcfg.effective_latent, max_answer_len=tcfg.max_answer_len, seed=seed)
    out = Path(output) if output else Path(checkpoint).resolve().parent
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(checkpoint).stem
    report.save(out / f"eval_{stem}.json", out / f"eval_{stem}.csv")
    a = report.aggregate
    print(f"problems {a.n_problems}  pass@1 {a.pass_at_1:.4f}  pass@{k} {a.pass_at_k:.4f}  "
          f"entropy {a.entropy_mean:.4f}  tokens {a.tokens_mean:.3f}")
    for kind in sorted(report.per_kind):
        s = report.per_kind[kind]
        print(f"  {kind:<10} n={s.n_problems:<4d} pass@1 {s.pass_at_1:.4f}  pass@{k} {s.pass_at_k:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def derived_seed(seed: int, n_latent: int, tau_g: float) -> int:
    return int(np.random.SeedSequence([seed, SWEEP_DOMAIN, n_latent, round(tau_g * 1000)])
               .generate_state(1)[0] % (2 ** 31))


def _sweep_child(args) -> dict:
    tree, n_latent, tau_g, run_dir = args
    row = {"L_g": n_latent, "tau_g": tau_g, "seed": tree["seed"], "run_dir": str(run_dir)}
    try:
        cfg = from_dict(tree)
        s = run_training(cfg, Path(run_dir), quiet=True)
        row.update(status="ok", final_pass_at_1=s["final_pass_at_1"], final_reward=s["final_reward"])
    except (LatentRLError, ValueError, FloatingPointError) as exc:
        row.update(status=f"failed: {type(exc).__name__}: {exc}",
                   final_pass_at_1=float("nan"), final_reward=float("nan"))
    return row


SWEEP_FIELDS = ("L_g", "tau_g", "seed", "status", "final_pass_at_1", "final_reward", "run_dir")


def cmd_sweep(config_path: str, lg_values: Sequence[int], tau_values: Sequence[float],
              overrides: Sequence[str] = (), jobs: int = 1, output: str | None = None) -> int:
    if not lg_values or not tau_values:
        _err("sweep grid is empty")
        return EXIT_CONFIG
    try:
        base = load_config(config_path, overrides)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    root = run_directory(base, output)
    root.mkdir(parents=True, exist_ok=True)
    tree = base.to_dict()
    tasks = []
    for lg in sorted(set(int(v) for v in lg_values)):
        for tau in sorted(set(float(v) for v in tau_values)):
            child = apply_overrides(tree, [f"trainer.n_latent={lg}", f"sampler.tau_g={tau}"])
            child["seed"] = derived_seed(base.seed, lg, tau)
            child["output_dir"] = None
            try:
                from_dict(child)
            except ConfigError as exc:
                _err(f"L_g={lg} tau_g={tau}: {exc}")
                return EXIT_CONFIG
            tasks.append((child, lg, tau, root / f"lg{lg}_tau{tau:g}"))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_child, tasks))
    else:
        rows = []
        for t in tasks:
            rows.append(_sweep_child(t))
            print(f"L_g={t[1]} tau_g={t[2]}: {rows[-1]['status']}", flush=True)
    rows.sort(key=lambda r: (r["L_g"], r["tau_g"]))
    with (root / "sweep_summary.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        w.writerows(rows)
    failed = [r for r in rows if r["status"] != "ok"]
    print(f"sweep directory: {root} ({len(rows) - len(failed)} ok, {len(failed)} failed)")
    return EXIT_PARTIAL if failed else EXIT_OK


# ---------------------------------------------------------------------------
# inspect
# ---------------------------------------------------------------------------

def cmd_inspect(checkpoint: str, query: str, n_rollouts: int = 1, noise: str | None = None,
                tau_g: float | None = None, seed: int = 0, top: int = 5,
                n_latent: int | None = None, max_answer_len: int | None = None) -> int:
    try:
        ck = load_checkpoint(checkpoint)
    except CheckpointError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    try:
        ids = [DEFAULT_VOCAB.bos, *DEFAULT_VOCAB.tokenize(query)]
    except ContractError as exc:
        _err(f"query {query!r}: {exc}")
        return EXIT_CONFIG
    scfg = ck.get("sampler_config", SamplerConfig())
    tcfg = ck.get("train_config")
    changes = {}
    if noise is not None:
        changes["noise_kind"] = noise
    if tau_g is not None:
        changes["tau_g"] = tau_g
    try:
        scfg = replace(scfg, **changes)
    except ContractError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    nl = n_latent if n_latent is not None else (tcfg.effective_latent if tcfg else 8)
    na = max_answer_len if max_answer_len is not None else (tcfg.max_answer_len if tcfg else 6)
    if n_rollouts < 1:
        _err("n_rollouts must be >= 1")
        return EXIT_CONFIG
    rngs = [stream(seed, 7, i) for i in range(n_rollouts)]
    trajs = generate_trajectories(ck["params"], ids, nl, scfg, na, rngs, DEFAULT_VOCAB.eos)
    print(f"query: {query}  noise: {scfg.noise_kind}  tau_g: {scfg.tau_g}  latent steps: {nl}")
    for i, t in enumerate(trajs):
        print(f"rollout {i} (seed {seed}, stream {i})")
        for s, z in enumerate(t.latent_tokens):
            cells = "  ".join(f"{tok}:{p:.3f}" for tok, p in top_tokens(z, DEFAULT_VOCAB, top))
            print(f"  latent {s:3d}  {cells}")
        print(f"  answer  {DEFAULT_VOCAB.detokenize(t.answer_ids)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# export-plots
# ---------------------------------------------------------------------------

def cmd_export_plots(run_dir: str, output: str | None = None, window: int = 20) -> int:
    """Plot-ready CSVs from a training run or a sweep directory."""
    src = Path(run_dir)
    if not src.is_dir():
        _err(f"{src}: not a directory")
        return EXIT_CONFIG
    out = Path(output) if output else src / "plots"
    out.mkdir(parents=True, exist_ok=True)
    wrote = []
    metrics = src / "metrics.jsonl"
    if metrics.is_file():
        _, steps = read_metrics(metrics)
        steps = sorted(steps, key=lambda r: r["step"])
        ma = moving_average([r["reward_mean"] for r in steps], window)
        with (out / "training_curves.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "lr", "reward_mean", "reward_ma", "kl", "entropy_mean",
                        "tokens_mean", "loss_total"])
            for r, m in zip(steps, ma):
                w.writerow([r["step"], r["lr"], r["reward_mean"], m, r["kl"], r["entropy_mean"],
                            r["tokens_mean"], r["loss_total"]])
        wrote.append("training_curves.csv")
    report_path = src / "eval_report.json"
    if report_path.is_file():
        report = load_report(report_path)
        _write_report_tables(report, out)
        wrote += ["pass_curve.csv", "accuracy_bins.csv", "problems.csv"]
    summary = src / "sweep_summary.csv"
    if summary.is_file():
        with summary.open() as fh:
            rows = sorted(csv.DictReader(fh), key=lambda r: (int(r["L_g"]), float(r["tau_g"])))
        taus = sorted({float(r["tau_g"]) for r in rows})
        lgs = sorted({int(r["L_g"]) for r in rows})
        for metric in ("final_pass_at_1", "final_reward"):
            with (out / f"sweep_{metric}.csv").open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["L_g"] + [f"tau_{t:g}" for t in taus])
                for lg in lgs:
                    cells = {float(r["tau_g"]): r[metric] for r in rows if int(r["L_g"]) == lg}
                    w.writerow([lg] + [cells.get(t, "") for t in taus])
            wrote.append(f"sweep_{metric}.csv")
    if not wrote:
        _err(f"{src}: no metrics, eval report or sweep summary found")
        return EXIT_CONFIG
    for name in wrote:
        print(out / name)
    return EXIT_OK


def _write_report_tables(report: EvalReport, out: Path) -> None:
    with (out / "pass_curve.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "pass_at_k"])
        for j in sorted(report.curve):
            w.writerow([j, report.curve[j]])
    with (out / "accuracy_bins.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "count"])
        for lab, c in zip(report.bins.labels(), report.bins.counts):
            w.writerow([lab, c])
    write_problem_csv(report, out / "problems.csv")


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentrl", description="Latent-exploration policy optimisation at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a YAML config")
    t.add_argument("config")
    t.add_argument("--override", "-o", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--output", help="run directory (default: timestamped under $LATENTRL_OUTPUT_ROOT)")
    t.add_argument("--quiet", action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--k", type=int)
    e.add_argument("--n-problems", type=int)
    e.add_argument("--dataset", help="dataset JSONL (default: the run's evaluation split)")
    e.add_argument("--output")
    e.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("sweep", help="grid over latent length and Gumbel temperature")
    s.add_argument("config")
    s.add_argument("--lg", type=int, nargs="+", required=True, help="latent lengths")
    s.add_argument("--tau", type=float, nargs="+", required=True, help="Gumbel temperatures")
    s.add_argument("--override", "-o", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--output")

    i = sub.add_parser("inspect", help="print latent top-k tokens and answers for a query")
    i.add_argument("checkpoint")
    i.add_argument("query")
    i.add_argument("--n-rollouts", type=int, default=1)
    i.add_argument("--noise", choices=NOISE_KINDS)
    i.add_argument("--tau", type=float)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--top", type=int, default=5)
    i.add_argument("--n-latent", type=int)

    x = sub.add_parser("export-plots", help="write plot-ready CSVs from a run or sweep directory")
    x.add_argument("run_dir")
    x.add_argument("--output")
    x.add_argument("--window", type=int, default=20)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "train":
        return cmd_train(args.config, args.override, args.output, args.quiet)
    if args.command == "eval":
        return cmd_eval(args.checkpoint, args.k, args.n_problems, args.output, args.dataset, args.seed)
    if args.command == "sweep":
        return cmd_sweep(args.config, args.lg, args.tau, args.override, args.jobs, args.output)
    if args.command == "inspect":
        return cmd_inspect(args.checkpoint, args.query, args.n_rollouts, args.noise, args.tau,
                           args.seed, args.top, args.n_latent)
    return cmd_export_plots(args.run_dir, args.output, args.window)


if __name__ == "__main__":
    sys.exit(main())
