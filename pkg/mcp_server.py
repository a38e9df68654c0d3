"""
guided-loop-closure MCP Server

以 FastMCP 包裝回環驗證實驗工具，供 MCP Client 呼叫。

啟動方式：
    uv run mcp_server.py
"""

from dotenv import load_dotenv
from mcp.server.fastmcp import FastMCP

from loopclosure.tools import (
    get_pr_curve,
    get_window_ratios,
    list_mixes,
    run_experiment,
    sweep_mixes,
)

load_dotenv()

mcp = FastMCP(
    name="guided-loop-closure",
    instructions=(
        "你是一個回環偵測實驗助理。世界為合成模擬，驗證結果由 oracle 產生，不含真實影像。\n"
        "策略組合以 US:NS:TS（約束層級）與 BF:DF:US（假設層級）表示，"
        "使用 list_mixes_tool 可查看預設組合。\n"
        "完整路線（2000 步）的單次執行約需數十秒；探索時可用 course_length 縮短。"
    ),
)


@mcp.tool()
def list_mixes_tool() -> str:
    """列出所有預設的策略組合與其比例。

    Returns:
        策略組合清單 Markdown 格式
    """
    return list_mixes()


@mcp.tool()
def run_experiment_tool(
    mix: str = "ts",
    seed: int = 0,
    course_length: int = 0,
    config_path: str = "",
) -> str:
    """以指定策略組合執行一次增量回環驗證實驗，傳回 PR 面積、成功率與軌跡誤差摘要。

    Args:
        mix: 預設組合名稱（如 ts、df_ts、uniform）或 'US:NS:TS@BF:DF:US'
        seed: 隨機種子，相同種子結果逐位元相同
        course_length: 路線步數，0 代表使用設定檔數值
        config_path: 設定檔路徑（選填）

    Returns:
        執行摘要 Markdown 格式
    """
    return run_experiment(mix, config_path=config_path, seed=seed, course_length=course_length)


@mcp.tool()
def sweep_mixes_tool(mixes: str = "uniform,ts", replicates: int = 1, threads: int = 1) -> str:
    """比較多個策略組合；同一種子下所有組合共用同一個世界。

    Args:
        mixes: 逗號分隔的組合，第一個為比較基準
        replicates: 每個組合的種子數
        threads: 平行行程數

    Returns:
        比較表（含相對基準的 PR 面積差與 95% 信賴區間）Markdown 格式
    """
    return sweep_mixes(mixes, replicates=replicates, threads=threads)


@mcp.tool()
def get_pr_curve_tool() -> str:
    """取得最近一次實驗的 PR 曲線（各門檻的 precision / recall）。

    Returns:
        PR 表 Markdown 格式，若尚未執行則提示先呼叫 run_experiment_tool
    """
    return get_pr_curve()


@mcp.tool()
def get_window_ratios_tool(strategy: str = "ALL", last: int = 20) -> str:
    """取得最近一次實驗各時間窗的匹配比例與正確比例。

    Args:
        strategy: TS / NS / US / ALL
        last: 顯示最後幾個時間窗

    Returns:
        各時間窗比例 Markdown 表格
    """
    return get_window_ratios(strategy, last)


if __name__ == "__main__":
    mcp.run(transport="stdio")
