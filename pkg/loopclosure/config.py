"""
實驗設定

扁平的 `key = value` 文字檔，`#` 開頭為註解；鍵名與 ExperimentConfig 欄位完全相同。
預設值取自原始實驗（N_t=50、W=10、T_p=10 m、100 m 內的回環視為過短）。
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from loopclosure.evaluation import DEFAULT_ERROR_BINS, DEFAULT_THRESHOLDS
from loopclosure.sampler import NS_SEED_RULES, StrategyMix, parse_ratio
from loopclosure.world import COURSE_KINDS, OracleConfig, ScoreModel


class ConfigError(ValueError):
    """Configuration file could not be parsed or holds invalid values."""


@dataclass(frozen=True)
class MixPreset:
    name: str
    constraint_mix: str  # US:NS:TS
    hypothesis_mix: str  # BF:DF:US
    description: str


# 原始研究中探討的 13 種策略組合
PRESET_MIXES: dict[str, MixPreset] = {
    p.name: p
    for p in (
        MixPreset("uniform", "1:0:0", "0:0:1", "均勻抽樣（無引導）"),
        MixPreset("ns", "0:1:0", "0:0:1", "鄰居抽樣"),
        MixPreset("ts", "0:0:1", "0:0:1", "軌跡抽樣"),
        MixPreset("ns_ts", "0:1:1", "0:0:1", "軌跡 + 鄰居各半"),
        MixPreset("mixed", "2:1:1", "0:0:1", "一半均勻，其餘軌跡 + 鄰居"),
        MixPreset("bf_ns", "0:1:0", "1:0:0", "BF 假設 + 鄰居抽樣"),
        MixPreset("bf_ts", "0:0:1", "1:0:0", "BF 假設 + 軌跡抽樣"),
        MixPreset("bf_ns_ts", "0:1:1", "1:0:0", "BF 假設 + 軌跡/鄰居各半"),
        MixPreset("bf_mixed", "2:1:1", "1:0:0", "BF 假設 + 混合"),
        MixPreset("df_ns", "0:1:0", "0:1:0", "DF 假設 + 鄰居抽樣"),
        MixPreset("df_ts", "0:0:1", "0:1:0", "DF 假設 + 軌跡抽樣"),
        MixPreset("df_ns_ts", "0:1:1", "0:1:0", "DF 假設 + 軌跡/鄰居各半"),
        MixPreset("df_mixed", "2:1:1", "0:1:0", "DF 假設 + 混合"),
    )
}


@dataclass(frozen=True)
class ExperimentConfig:
    course_kind: str = "campus_multi_loop"
    course_length: int = 2000
    n_clusters: int = 8
    revisit_radius: float = 10.0
    triviality_cutoff: float = 100.0
    sigma_xy: float = 0.02
    sigma_theta: float = 0.005
    loop_sigma_xy: float = 0.05
    loop_sigma_theta: float = 0.01
    loop_info_scale: float = 10.0
    score_true_mean: float = 0.7
    score_aliased_mean: float = 0.5
    score_distractor_mean: float = 0.3
    score_sigma: float = 0.15
    p_true_accept: float = 0.8
    p_false_accept: float = 0.1
    oracle_noise_sigma: float = 1.0
    n_candidates: int = 50
    window_size: int = 10
    verifications_per_step: int = 10
    consistency_threshold: float = 10.0
    verification_threshold: float = 0.5
    constraint_mix: str = "0:0:1"
    hypothesis_mix: str = "0:0:1"
    ns_seed_rule: str = "usable"
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    error_bins: tuple[float, ...] = DEFAULT_ERROR_BINS
    trial_rounds: int = 2000
    max_iters: int = 50
    tol: float = 1e-6
    dump_consistency: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.course_kind not in COURSE_KINDS:
            raise ConfigError(f"course_kind must be one of {', '.join(COURSE_KINDS)}, got {self.course_kind!r}")
        if self.course_length < 10:
            raise ConfigError(f"course_length must be at least 10, got {self.course_length}")
        for name in ("n_candidates", "window_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("verifications_per_step", "n_clusters", "trial_rounds", "max_iters", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("revisit_radius", "consistency_threshold", "loop_info_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.ns_seed_rule not in NS_SEED_RULES:
            raise ConfigError(f"ns_seed_rule must be one of {', '.join(NS_SEED_RULES)}, got {self.ns_seed_rule!r}")
        if not 0.0 <= self.verification_threshold <= 1.0:
            raise ConfigError("verification_threshold must lie in [0, 1]")
        if any(not 0.0 <= t <= 1.0 for t in self.thresholds) or not self.thresholds:
            raise ConfigError("thresholds must be a non-empty list within [0, 1]")
        if not self.error_bins or list(self.error_bins) != sorted(set(self.error_bins)):
            raise ConfigError("error_bins must be strictly increasing")
        try:
            parse_ratio(self.constraint_mix)
            parse_ratio(self.hypothesis_mix)
            self.oracle()
            self.score_model()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    # ── 衍生物件 ──

    def oracle(self) -> OracleConfig:
        return OracleConfig(self.p_true_accept, self.p_false_accept, self.oracle_noise_sigma)

    def score_model(self) -> ScoreModel:
        return ScoreModel(
            self.score_true_mean, self.score_aliased_mean, self.score_distractor_mean, self.score_sigma
        )

    @property
    def mix_label(self) -> str:
        return f"{self.constraint_mix}@{self.hypothesis_mix}"

    def sampler_seed(self) -> int:
        """世界種子不變，抽樣串流依策略組合分開。"""
        digest = hashlib.blake2b(f"{self.seed}|{self.mix_label}".encode(), digest_size=8).digest()
        return int.from_bytes(digest, "little")

    def strategy_mix(self) -> StrategyMix:
        return StrategyMix.from_ratios(self.constraint_mix, self.hypothesis_mix, self.sampler_seed())

    def with_mix(self, constraint_mix: str, hypothesis_mix: str) -> ExperimentConfig:
        return replace(self, constraint_mix=constraint_mix, hypothesis_mix=hypothesis_mix)

    def with_seed(self, seed: int) -> ExperimentConfig:
        return replace(self, seed=seed)


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {raw}")
            return low in ("true", "1", "yes")
        if kind.startswith("tuple"):
            return tuple(float(v) for v in raw.replace(",", " ").split())
        return raw
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({e})") from e


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw)
    return ExperimentConfig(**values)


def load_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e.strerror or e}") from e
    return parse_config(text, str(p))


def format_config(config: ExperimentConfig) -> str:
    lines = [f"{f.name} = {_format_value(getattr(config, f.name))}" for f in fields(config)]
    return "\n".join(lines) + "\n"


def dump_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(format_config(config), encoding="utf-8", newline="\n")


def resolve_mix(name_or_ratios: str) -> tuple[str, str]:
    """'ts' 之類的預設名稱，或 'US:NS:TS@BF:DF:US' 形式。"""
    key = name_or_ratios.strip()
    if key in PRESET_MIXES:
        p = PRESET_MIXES[key]
        return p.constraint_mix, p.hypothesis_mix
    constraint, _, hypothesis = key.partition("@")
    hypothesis = hypothesis or "0:0:1"
    try:
        parse_ratio(constraint)
        parse_ratio(hypothesis)
    except ValueError as e:
        raise ConfigError(f"Unknown mix: {key}. Use a preset ({', '.join(PRESET_MIXES)}) or US:NS:TS@BF:DF:US") from e
    return constraint, hypothesis


def default_threads() -> int:
    raw = os.getenv("SWEEP_THREADS", "").strip()
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError as e:
        raise ConfigError(f"SWEEP_THREADS must be an integer, got {raw!r}") from e


def default_out_dir() -> Path:
    return Path(os.getenv("LOOPCLOSURE_OUT", "runs"))
