"""
實驗工具（Markdown 輸出）

供 MCP server 與 CLI 呼叫；所有函式都不丟出例外，失敗時回傳以 ❌ 開頭的訊息。
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import pandas as pd

from loopclosure.config import PRESET_MIXES, ConfigError, ExperimentConfig, default_out_dir, load_config, resolve_mix
from loopclosure.evaluation import pr_frame
from loopclosure.experiment import RunResult, mix_dirname, run, sweep

# 最近一次執行結果（session 用）
_last_run: RunResult | None = None


def _base_config(config_path: str, seed: int | None) -> ExperimentConfig:
    cfg = load_config(config_path) if config_path else ExperimentConfig()
    return cfg.with_seed(seed) if seed is not None else cfg


def list_mixes() -> str:
    """列出所有預設的策略組合。"""
    lines = ["## 可用策略組合（約束 US:NS:TS ／ 假設 BF:DF:US）\n"]
    for name, p in PRESET_MIXES.items():
        lines.append(f"- **`{name}`**：`{p.constraint_mix}` ／ `{p.hypothesis_mix}` — {p.description}")
    return "\n".join(lines)


def _format_run(result: RunResult, mix: str) -> str:
    row = result.summary_row(mix)
    lines = [
        f"## 🔁 執行結果：`{mix}`（seed {row['seed']}）\n",
        "| 指標 | 數值 |",
        "|------|------|",
        f"| 回環約束數 | {row['n_constraints']} |",
        f"| 驗證次數 | {row['n_verifications']} |",
        f"| 判定匹配 | {row['n_matched']} |",
        f"| 匹配且正確 | {row['n_matched_correct']} |",
        f"| 假設數 | {row['n_hypotheses']} |",
        f"| PR 曲線面積 | {row['pr_area']:.4f} |",
        f"| 成功率 | {row['success_ratio'] * 100:.1f}% |",
        f"| 航位推算 RMSE | {row['rmse_dead_reckoning']:.2f} m |",
        f"| 校正後 RMSE | {row['rmse_corrected']:.2f} m |",
    ]
    if result.out_dir is not None:
        lines.append(f"\n產物目錄：`{result.out_dir}`")
    return "\n".join(lines)


def run_experiment(
    mix: str = "ts",
    config_path: str = "",
    seed: int | None = None,
    course_length: int = 0,
    out_dir: str = "",
) -> str:
    """以指定策略組合執行一次完整實驗並寫出產物。

    Args:
        mix: 預設名稱（見 list_mixes）或 'US:NS:TS@BF:DF:US'
        config_path: 設定檔路徑，空字串使用預設值
        seed: 覆寫設定檔中的種子
        course_length: 大於 0 時覆寫路線長度
        out_dir: 輸出目錄，空字串時使用 LOOPCLOSURE_OUT/<mix>
    """
    global _last_run
    try:
        cfg = _base_config(config_path, seed)
        constraint_mix, hypothesis_mix = resolve_mix(mix)
        cfg = cfg.with_mix(constraint_mix, hypothesis_mix)
        if course_length > 0:
            cfg = replace(cfg, course_length=course_length)
        target = Path(out_dir) if out_dir else default_out_dir() / mix_dirname(mix)
        _last_run = run(cfg, target)
        return _format_run(_last_run, mix)
    except ConfigError as e:
        return f"❌ 設定錯誤：{e}"
    except Exception as e:
        return f"❌ 實驗執行錯誤：{str(e)}"


def sweep_mixes(
    mixes: str = "uniform,ts",
    config_path: str = "",
    replicates: int = 1,
    threads: int = 1,
    out_dir: str = "",
) -> str:
    """對多個策略組合進行成對比較（同一種子共用同一個世界）。

    Args:
        mixes: 逗號分隔的組合，第一個為比較基準
        replicates: 每個組合的種子數（seed, seed+1, …）
        threads: 平行執行的行程數
    """
    names = [m.strip() for m in mixes.split(",") if m.strip()]
    if not names:
        return "❌ 請至少指定一個策略組合。"
    try:
        cfg = _base_config(config_path, None)
        target = Path(out_dir) if out_dir else default_out_dir() / "sweep"
        summary = sweep(cfg, names, target, threads=threads, replicates=replicates)
    except ConfigError as e:
        return f"❌ 設定錯誤：{e}"
    except Exception as e:
        return f"❌ 掃描執行錯誤：{str(e)}"

    shown = summary[["mix", "n_runs", "pr_area", "success_ratio", "delta_pr_area", "delta_ci_low", "delta_ci_high"]]
    return (
        f"## 📊 策略組合比較（基準：`{names[0]}`，{replicates} 個種子）\n\n"
        + shown.to_markdown(index=False, floatfmt=".4f")
        + f"\n\n產物目錄：`{target}`"
    )


def get_pr_curve() -> str:
    """最近一次執行的 PR 曲線。"""
    if _last_run is None:
        return "⚠️ 尚未執行任何實驗，請先呼叫 `run_experiment` 工具。"
    return "## 📈 PR 曲線\n\n" + pr_frame(_last_run.pr_points).to_markdown(index=False, floatfmt=".4f")


def get_window_ratios(strategy: str = "ALL", last: int = 20) -> str:
    """最近一次執行各時間窗的匹配與正確比例。

    Args:
        strategy: TS / NS / US / ALL
        last: 只顯示最後幾個時間窗
    """
    if _last_run is None:
        return "⚠️ 尚未執行任何實驗，請先呼叫 `run_experiment` 工具。"
    frame: pd.DataFrame = _last_run.window_ratios
    part = frame[frame["strategy"] == strategy.upper()]
    if part.empty:
        return f"📭 沒有 `{strategy}` 策略的驗證記錄。"
    return f"## 🪟 各時間窗比例（{strategy.upper()}）\n\n" + part.tail(last).to_markdown(
        index=False, floatfmt=".3f"
    )
