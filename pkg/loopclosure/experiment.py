"""
實驗執行：增量主迴圈與策略組合掃描

每個時間步：里程計 → 檢索 → 寫入帳本 → 一致性矩陣新增列 → 視窗邊界時產生假設
→ 新增一致性欄 → K 輪引導抽樣。執行完畢後在輸出目錄寫出所有產物；
產物中沒有時間戳記，相同設定與種子的兩次執行逐位元相同。
"""

from __future__ import annotations

import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from rich.console import Console

from loopclosure.config import ExperimentConfig, dump_config, resolve_mix
from loopclosure.consistency import ConsistencyMatrix
from loopclosure.evaluation import (
    PRPoint,
    guided_vs_uniform_trial,
    is_correct,
    label_hypotheses,
    paired_bootstrap_ci,
    per_window_ratios,
    pr_area,
    pr_frame,
    pr_sweep,
)
from loopclosure.g2o_io import write_g2o, write_graph, write_trajectory
from loopclosure.geometry import integrate_arrays
from loopclosure.hypotheses import HypothesisEngine
from loopclosure.ledger import ConstraintLedger, LoopConstraint
from loopclosure.pose_graph import (
    Edge,
    PoseGraph,
    loop_information,
    odometry_information,
    optimize,
    rmse,
)
from loopclosure.sampler import GuidedSampler
from loopclosure.world import (
    RetrievalCandidate,
    WorldModel,
    generate_course,
    loop_measurement,
    retrieve,
    sample_odometry_array,
    verify_oracle,
    write_world,
)

SUMMARY_COLUMNS = [
    "mix", "constraint_mix", "hypothesis_mix", "seed",
    "n_constraints", "n_verifications", "n_matched", "n_matched_correct",
    "n_hypotheses", "pr_area", "success_ratio",
    "guided_ratio_best", "uniform_ratio_best",
    "rmse_dead_reckoning", "rmse_corrected",
    "n_ts", "n_ns", "n_us", "n_fallbacks",
]


@dataclass
class RunResult:
    config: ExperimentConfig
    world: WorldModel
    ledger: ConstraintLedger
    engine: HypothesisEngine
    consistency: ConsistencyMatrix
    sampler: GuidedSampler
    pr_points: list[PRPoint]
    window_ratios: pd.DataFrame
    hypothesis_labels: pd.DataFrame
    guided_vs_uniform: pd.DataFrame
    dead_reckoned: np.ndarray
    corrected: np.ndarray
    candidates: list[RetrievalCandidate] = field(repr=False, default_factory=list)
    out_dir: Path | None = None

    @property
    def pr_area(self) -> float:
        return pr_area(self.pr_points)

    def summary_row(self, mix: str | None = None) -> dict:
        cfg = self.config
        records = self.ledger.records
        n_matched = sum(r.verdict for r in records)
        n_mc = sum(
            1 for r in records if r.verdict and is_correct(self.world, self.ledger.constraints[r.constraint_id])
        )
        tags = pd.Series([r.strategy_tag for r in records], dtype=object).value_counts()
        first = self.guided_vs_uniform.iloc[0] if len(self.guided_vs_uniform) else None
        return {
            "mix": mix or cfg.mix_label,
            "constraint_mix": cfg.constraint_mix,
            "hypothesis_mix": cfg.hypothesis_mix,
            "seed": cfg.seed,
            "n_constraints": len(self.ledger),
            "n_verifications": len(records),
            "n_matched": n_matched,
            "n_matched_correct": n_mc,
            "n_hypotheses": len(self.engine),
            "pr_area": self.pr_area,
            "success_ratio": n_mc / len(records) if records else 0.0,
            "guided_ratio_best": float(first["guided_ratio"]) if first is not None else float("nan"),
            "uniform_ratio_best": float(first["uniform_ratio"]) if first is not None else float("nan"),
            "rmse_dead_reckoning": rmse(self.dead_reckoned, self.world.ground_truth),
            "rmse_corrected": rmse(self.corrected, self.world.ground_truth),
            "n_ts": int(tags.get("TS", 0)),
            "n_ns": int(tags.get("NS", 0)),
            "n_us": int(tags.get("US", 0)),
            "n_fallbacks": self.sampler.fallbacks,
        }


class ExperimentRunner:
    """Runs one configuration end to end and optionally writes its artifacts."""

    def __init__(self, config: ExperimentConfig, console: Console | None = None):
        self.config = config
        self.console = console

    def _log(self, msg: str) -> None:
        if self.console:
            self.console.print(f"  [dim][run] {msg}[/dim]")

    def _measure(self, world: WorldModel):
        sigma = (self.config.loop_sigma_xy, self.config.loop_sigma_theta)
        return lambda c: loop_measurement(world, c.i, c.j, sigma, self.config.seed)

    def _oracle(self, world: WorldModel):
        oracle_cfg = self.config.oracle()
        return lambda c: verify_oracle(world, oracle_cfg, c.pair, self.config.seed)

    def corrected_graph(
        self, world: WorldModel, odometry: np.ndarray, ledger: ConstraintLedger
    ) -> PoseGraph:
        """所有已驗證匹配的約束都加入為回環邊 j→i。"""
        cfg = self.config
        odo_info = odometry_information(cfg.sigma_xy, cfg.sigma_theta)
        loop_info = loop_information(odo_info, cfg.loop_info_scale)
        measure = self._measure(world)
        matched: list[LoopConstraint] = sorted(
            ledger.verified_matched(cfg.verification_threshold), key=lambda c: c.id
        )
        edges = [Edge(c.j, c.i, measure(c), loop_info) for c in matched]
        return PoseGraph.from_odometry(odometry, odo_info, origin=world.pose(0), loop_edges=edges)

    def run(self, out_dir: str | Path | None = None) -> RunResult:
        cfg = self.config
        world = generate_course(
            cfg.course_kind,
            cfg.course_length,
            cfg.seed,
            revisit_radius=cfg.revisit_radius,
            min_travel=cfg.triviality_cutoff,
            n_clusters=cfg.n_clusters,
            score_model=cfg.score_model(),
        )
        odometry = sample_odometry_array(world, (cfg.sigma_xy, cfg.sigma_theta), cfg.seed)
        self._log(f"{cfg.course_kind}: {len(world)} locations, {world.total_travel:.0f} m travelled")

        odo_info = odometry_information(cfg.sigma_xy, cfg.sigma_theta)
        ledger = ConstraintLedger()
        consistency = ConsistencyMatrix(cfg.consistency_threshold)
        engine = HypothesisEngine(
            cfg.window_size,
            odo_info,
            loop_information(odo_info, cfg.loop_info_scale),
            origin=world.pose(0),
            max_iters=cfg.max_iters,
            tol=cfg.tol,
            console=self.console,
        )
        sampler = GuidedSampler(cfg.strategy_mix(), cfg.verification_threshold, ns_seed_rule=cfg.ns_seed_rule)
        measure = self._measure(world)
        oracle = self._oracle(world)

        candidates: list[RetrievalCandidate] = []
        for t in range(len(world)):
            found = retrieve(world, t, cfg.n_candidates, min_gap=cfg.triviality_cutoff)
            candidates.extend(found)
            for c in ledger.ingest(t, found):
                consistency.add_constraint_row(c)
            h = engine.maybe_spawn(t, ledger, odometry, measure)
            if h is not None:
                consistency.add_hypothesis_column(h)
                sampler.register_hypothesis(h, engine, ledger, consistency)
            for _ in range(cfg.verifications_per_step):
                sampler.sampling_round(engine, ledger, consistency, oracle, executed_at=t)

        self._log(
            f"{len(ledger)} constraints, {len(ledger.records)} verifications, {len(engine)} hypotheses"
        )

        points = pr_sweep(world, ledger, cfg.thresholds, cfg.verification_threshold)
        ratios = per_window_ratios(ledger, world, cfg.window_size)
        labels = label_hypotheses(world, engine.hypotheses, consistency, ledger)
        trial = guided_vs_uniform_trial(
            world,
            ledger,
            consistency,
            engine.hypotheses,
            cfg.trial_rounds,
            seed=cfg.seed,
            error_bins=cfg.error_bins,
            threshold=cfg.verification_threshold,
        )
        dead_reckoned = integrate_arrays(odometry, world.pose(0).as_array())
        graph = self.corrected_graph(world, odometry, ledger)
        solved, report = optimize(graph, max_iters=cfg.max_iters, tol=cfg.tol)
        if report.singular:
            self._log("final optimization: singular normal equations, keeping dead reckoning")
        elif not report.converged:
            self._log(f"final optimization stopped after {report.iterations} iterations")
        corrected = solved.poses

        result = RunResult(
            config=cfg,
            world=world,
            ledger=ledger,
            engine=engine,
            consistency=consistency,
            sampler=sampler,
            pr_points=points,
            window_ratios=ratios,
            hypothesis_labels=labels,
            guided_vs_uniform=trial,
            dead_reckoned=dead_reckoned,
            corrected=corrected,
            candidates=candidates,
        )
        if out_dir is not None:
            self.write_artifacts(result, Path(out_dir), graph.with_poses(corrected))
        return result

    def write_artifacts(self, result: RunResult, out: Path, corrected_graph: PoseGraph) -> None:
        out.mkdir(parents=True, exist_ok=True)
        cfg = result.config
        csv = {"index": False, "lineterminator": "\n", "float_format": "%.17g"}

        dump_config(cfg, out / "config.txt")
        write_world(out, result.world, result.candidates)
        odo_info = odometry_information(cfg.sigma_xy, cfg.sigma_theta)
        src = np.arange(len(result.world) - 1)
        odometry = corrected_graph.odometry
        write_g2o(
            out / "odometry.g2o",
            result.dead_reckoned,
            ((int(s), int(s) + 1, odometry[s], odo_info) for s in src),
        )
        write_trajectory(out / "dead_reckoned.g2o", result.dead_reckoned)
        write_graph(out / "corrected.g2o", corrected_graph)

        result.ledger.dump_csv(out / "ledger.csv", lambda c: is_correct(result.world, c))
        result.engine.dump(out / "hypotheses")
        result.hypothesis_labels.to_csv(out / "hypothesis_labels.csv", **csv)
        pr_frame(result.pr_points).to_csv(out / "pr_curve.csv", **csv)
        result.window_ratios.to_csv(out / "window_ratios.csv", **csv)
        result.guided_vs_uniform.to_csv(out / "guided_vs_uniform.csv", **csv)
        pd.DataFrame([result.summary_row()], columns=SUMMARY_COLUMNS).to_csv(out / "summary.csv", **csv)
        if cfg.dump_consistency:
            result.consistency.dump_triplets(out / "consistency.csv")
        result.out_dir = out
        self._log(f"artifacts written to {out}")


def run(config: ExperimentConfig, out_dir: str | Path | None = None, console: Console | None = None) -> RunResult:
    return ExperimentRunner(config, console).run(out_dir)


def mix_dirname(mix: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "-", mix.replace("@", "_"))


def _run_one(config: ExperimentConfig, mix: str, out_dir: str | None) -> dict:
    return ExperimentRunner(config).run(out_dir).summary_row(mix)


def sweep(
    base: ExperimentConfig,
    mixes: list[str],
    out_dir: str | Path,
    *,
    threads: int = 1,
    replicates: int = 1,
    console: Console | None = None,
) -> pd.DataFrame:
    """每個策略組合 × 每個種子各跑一次；同一種子下所有組合共用同一個世界。

    summary.csv 每個組合一列；delta 欄位為相對第一個組合的成對 PR 面積差與 95% bootstrap 區間。
    """
    if not mixes:
        raise ValueError("sweep needs at least one mix")
    if replicates < 1:
        raise ValueError("replicates must be positive")
    repeated = sorted({m for m in mixes if mixes.count(m) > 1})
    if repeated:
        raise ValueError(f"mixes listed more than once: {', '.join(repeated)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    jobs = []
    for mix in mixes:
        constraint_mix, hypothesis_mix = resolve_mix(mix)
        for r in range(replicates):
            cfg = base.with_mix(constraint_mix, hypothesis_mix).with_seed(base.seed + r)
            run_dir = out / mix_dirname(mix) / f"seed_{cfg.seed}"
            jobs.append((cfg, mix, str(run_dir)))

    if console:
        console.print(f"  [dim][sweep] {len(jobs)} runs, {threads} worker(s)[/dim]")
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_run_one, *zip(*jobs)))
    else:
        rows = [_run_one(*job) for job in jobs]

    runs = pd.DataFrame(rows, columns=SUMMARY_COLUMNS)
    csv = {"index": False, "lineterminator": "\n", "float_format": "%.17g"}
    runs.to_csv(out / "runs.csv", **csv)

    baseline = runs[runs["mix"] == mixes[0]].set_index("seed")["pr_area"]
    summary = []
    for mix in mixes:
        part = runs[runs["mix"] == mix]
        deltas = part.set_index("seed")["pr_area"] - baseline
        mean, low, high = paired_bootstrap_ci(deltas.to_numpy(), seed=base.seed)
        summary.append({
            "mix": mix,
            "constraint_mix": part["constraint_mix"].iloc[0],
            "hypothesis_mix": part["hypothesis_mix"].iloc[0],
            "n_runs": len(part),
            "pr_area": float(part["pr_area"].mean()),
            "success_ratio": float(part["success_ratio"].mean()),
            "rmse_corrected": float(part["rmse_corrected"].mean()),
            "delta_pr_area": mean,
            "delta_ci_low": low,
            "delta_ci_high": high,
        })
    frame = pd.DataFrame(summary)
    frame.to_csv(out / "summary.csv", **csv)
    return frame
