import argparse
import sys
from pathlib import Path

from dotenv import load_dotenv
from rich.console import Console
from rich.panel import Panel
from rich.table import Table
from rich.theme import Theme

from loopclosure.config import (
    PRESET_MIXES,
    ConfigError,
    ExperimentConfig,
    default_out_dir,
    default_threads,
    load_config,
)
from loopclosure.evaluation import pr_frame
from loopclosure.experiment import ExperimentRunner, sweep

theme = Theme(
    {
        "info": "cyan",
        "warning": "yellow",
        "stage": "bold magenta",
    }
)
# 產物寫入檔案，所有診斷訊息走 stderr
console = Console(theme=theme, stderr=True)

BANNER = r"""
 _                            _
| |    ___   ___  _ __    ___| | ___  ___ _   _ _ __ ___
| |   / _ \ / _ \| '_ \  / __| |/ _ \/ __| | | | '__/ _ \
| |__| (_) | (_) | |_) || (__| | (_) \__ \ |_| | | |  __/
|_____\___/ \___/| .__/  \___|_|\___/|___/\__,_|_|  \___|
                 |_|
"""


def _load(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load(args)
    out = Path(args.out) if args.out else default_out_dir()
    console.rule(f"[stage]run {cfg.mix_label} seed={cfg.seed}")
    with console.status("[bold magenta]正在執行增量回環驗證..."):
        result = ExperimentRunner(cfg, console).run(out)

    table = Table(title="PR 曲線", show_header=True, header_style="dim")
    frame = pr_frame(result.pr_points)
    for col in frame.columns:
        table.add_column(col, justify="right")
    for row in frame.itertuples(index=False):
        table.add_row(*(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row))
    console.print(table)
    console.print(f"[info]PR area {result.pr_area:.4f} → {out}[/info]")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _load(args)
    mixes = [m.strip() for m in args.mixes.split(",") if m.strip()]
    if not mixes:
        raise ConfigError("--mixes needs at least one entry")
    out = Path(args.out) if args.out else default_out_dir() / "sweep"
    threads = args.threads if args.threads is not None else default_threads()
    console.rule(f"[stage]sweep {len(mixes)} mixes × {args.replicates} seeds")
    with console.status("[bold magenta]正在執行策略組合掃描..."):
        summary = sweep(cfg, mixes, out, threads=threads, replicates=args.replicates, console=console)

    table = Table(title="策略組合比較", show_header=True, header_style="dim")
    for col in ("mix", "n_runs", "pr_area", "success_ratio", "delta_pr_area", "delta_ci_low", "delta_ci_high"):
        table.add_column(col, justify="right")
    for row in summary.itertuples(index=False):
        table.add_row(
            row.mix,
            str(row.n_runs),
            f"{row.pr_area:.4f}",
            f"{row.success_ratio:.4f}",
            f"{row.delta_pr_area:+.4f}",
            f"{row.delta_ci_low:+.4f}",
            f"{row.delta_ci_high:+.4f}",
        )
    console.print(table)
    console.print(f"[info]summary → {out / 'summary.csv'}[/info]")
    return 0


def cmd_mixes(args: argparse.Namespace) -> int:
    table = Table(title="預設策略組合", show_header=True, header_style="dim")
    table.add_column("name")
    table.add_column("US:NS:TS")
    table.add_column("BF:DF:US")
    table.add_column("說明")
    for name, p in PRESET_MIXES.items():
        table.add_row(name, p.constraint_mix, p.hypothesis_mix, p.description)
    console.print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loopclosure",
        description="Incremental loop closure verification by guided sampling on a synthetic world.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default="", help="key = value config file (defaults when omitted)")
        p.add_argument("--out", default="", help="output directory (default: $LOOPCLOSURE_OUT or ./runs)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p_run = sub.add_parser("run", help="run one configuration and write its artifacts")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="compare strategy mixes on paired worlds")
    common(p_sweep)
    p_sweep.add_argument(
        "--mixes", required=True, help="comma-separated presets or US:NS:TS@BF:DF:US; the first is the baseline"
    )
    p_sweep.add_argument("--threads", type=int, default=None, help="worker processes (default: $SWEEP_THREADS or 1)")
    p_sweep.add_argument("--replicates", type=int, default=1, help="seeds per mix: seed, seed+1, ...")
    p_sweep.set_defaults(func=cmd_sweep)

    p_mixes = sub.add_parser("mixes", help="list preset strategy mixes")
    p_mixes.set_defaults(func=cmd_mixes)
    return parser


def main(argv: list[str] | None = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    console.print(Panel(BANNER, style="bold cyan", subtitle="v0.2.0"))
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        console.print(Panel(f"執行錯誤：{e}", title="Error", border_style="red"))
        return 1


if __name__ == "__main__":
    sys.exit(main())
