"""Command-line entry point: ``ilhf <subcommand> [--config PATH] [--seed N] [--out DIR] [--parallel N]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness as H
from .agent import AdamConfig, PretrainLog, init_agent, pretrain
from .datagen import generate_corpus, sample_process_params, write_corpus
from .rng import stream

log = logging.getLogger("ilhf")

RUN_COMMANDS = {
    "didactic": "didactic",
    "main": "main",
    "ablate-tau": "ablation_tau",
    "ablate-ensemble": "ablation_ensemble",
    "head2head": "head2head",
}


def build_config(args, preset_name: str) -> H.ExperimentConfig:
    base = H.preset(preset_name)
    cfg = H.load_config(args.config, base) if args.config else base
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.n_seeds is not None:
        cfg.seeds = list(range(args.n_seeds))
    if args.episodes is not None:
        cfg.finetune.episodes = args.episodes
    if args.log_interactions:
        cfg.log_interactions = True
    cfg.validate()
    return cfg


def _summary(result: H.RunResult) -> str:
    lines = []
    if len(result.seeds) >= 2:
        agg = H.aggregate(result)
        width = max(len(n) for n in agg)
        for name, a in agg.items():
            lines.append(f"{name:<{width}}  start {a.mean[0]:.4f}  final {a.mean[-1]:.4f} +/- {a.stderr[-1]:.4f}")
        for row in H.head2head_summary(result):
            lines.append(f"{row['candidate']} vs {row['reference']}: ratio {row['ratio']:.4f} +/- {row['stderr']:.4f}")
    else:
        for seed, r in result.seeds.items():
            for name, series in sorted(r.metrics.items()):
                lines.append(f"seed {seed} {name}: start {series[0][1]:.4f} final {series[-1][1]:.4f}")
    return "\n".join(lines)


def cmd_run(args) -> int:
    cfg = build_config(args, RUN_COMMANDS[args.command])
    out = Path(args.out or f"runs/{args.command}")
    log.info("running %s: %d seeds -> %s (fingerprint %s)", cfg.experiment, len(cfg.seeds), out, cfg.fingerprint()[:12])
    result = H.run_experiment(
        cfg, out, parallel=args.parallel, resume=not args.fresh,
        progress=lambda seed, sec: log.info("seed %d done in %.1fs", seed, sec),
    )
    if len(result.seeds) >= 2:
        for fig in H.figures_for(cfg):
            H.emit_plot_data(result, fig, out / "plots")
    print(_summary(result))
    return 0


def cmd_pretrain(args) -> int:
    cfg = build_config(args, "main")
    out = Path(args.out or "runs/pretrain")
    writer = H.RunWriter(out)
    for seed in cfg.seeds:
        S = lambda label: stream(cfg.master_seed, seed, label)
        proc_index = seed if cfg.resample_process else 0
        ideal, shadow = sample_process_params(stream(cfg.master_seed, proc_index, "process"), cfg.d, cfg.perturbation_variance)
        H.save_process(out / f"seed_{seed:04d}" / "process.json", ideal, shadow)
        for tau in cfg.taus:
            tag = "" if len(cfg.taus) == 1 else f"@tau={tau}"
            corpus = generate_corpus(shadow, cfg.pretrain.samples, 2 * tau, S(f"corpus{tag}"))
            write_corpus(out / f"seed_{seed:04d}" / f"corpus_tau{tau}.txt", corpus)
            plog = PretrainLog()
            agent = pretrain(
                init_agent(S(f"agent_init{tag}"), cfg.D), corpus, cfg.pretrain.epochs, S(f"shuffle{tag}"),
                adam=AdamConfig(lr=cfg.pretrain.lr), batch_size=cfg.pretrain.batch_size, log=plog,
            )
            writer.write_json(out / f"seed_{seed:04d}" / f"agent_tau{tau}.json",
                              agent.to_dict({"seed": seed, "stage": "pretrain", "tau": tau}))
            print(f"seed {seed} tau {tau}: NLL/document {plog.epoch_loss[0]:.3f} -> {plog.epoch_loss[-1]:.3f}")
    return 0


def cmd_plot(args) -> int:
    if not args.out:
        raise SystemExit("plot-data needs --out pointing at a finished run directory")
    result = H.load_run(args.out)
    figures = args.figure or H.figures_for(result.config)
    for fig in figures:
        path = H.emit_plot_data(result, fig, Path(args.out) / "plots", normalize_autocorr=not args.verbatim_autocorr)
        print(path)
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ilhf", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file merged onto the subcommand's preset")
    common.add_argument("--seed", type=int, help="master seed (default 0)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--parallel", type=int, default=1, help="worker processes over seeds")
    common.add_argument("--n-seeds", type=int, help="use seeds 0..N-1 instead of the preset's")
    common.add_argument("--episodes", type=int, help="override the number of fine-tuning episodes")
    common.add_argument("--log-interactions", action="store_true", help="write per-episode interaction CSVs")
    common.add_argument("--fresh", action="store_true", help="ignore completed seeds already in --out")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="sample processes and pretrain agents only").set_defaults(func=cmd_pretrain)
    for name, preset in RUN_COMMANDS.items():
        sub.add_parser(name, parents=[common], help=f"run the {preset} experiment").set_defaults(func=cmd_run)
    plot = sub.add_parser("plot-data", parents=[common], help="write plot-ready CSVs for a finished run")
    plot.add_argument("--figure", action="append", choices=H.FIGURES, help="figure id (repeatable)")
    plot.add_argument("--verbatim-autocorr", action="store_true", help="keep the 1/(tau-k) prefactor")
    plot.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except H.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
