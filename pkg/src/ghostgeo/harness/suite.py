"""Multi-episode evaluation and single-axis ablation sweeps."""

from __future__ import annotations

from dataclasses import dataclass, field

from ghostgeo.encoder import EncoderParams
from ghostgeo.errors import DomainError
from ghostgeo.harness.config import Fusion, PipelineConfig, Scope, Truncation
from ghostgeo.harness.episode import EpisodeOutcome, Policy, run_episode
from ghostgeo.harness.toytask import ToyTaskSpec, train_toy
from ghostgeo.metrics import EpisodeResult, Summary, aggregate, format_table, write_jsonl
from ghostgeo.synthscene import PRESETS, make_preset

AXES = ("scope", "fusion", "depth", "points")


def resolve_presets(preset: str | list[str]) -> list[str]:
    names = list(PRESETS) if preset == "all" else ([preset] if isinstance(preset, str) else list(preset))
    unknown = [n for n in names if n not in PRESETS]
    if not names or unknown:
        raise DomainError(f"unknown or empty preset selection {unknown or names}; choose from {sorted(PRESETS)} or 'all'")
    return names


@dataclass
class SuiteRun:
    results: list[EpisodeResult]
    summary: Summary
    outcomes: list[EpisodeOutcome] = field(default_factory=list, repr=False)

    def nonlocal_max(self) -> int:
        """Largest number of enhanced non-adjacent ghosts seen at any perception step."""
        return max((len(e["nonlocal"]) for o in self.outcomes for e in o.log if e["event"] == "perceive"), default=0)


def eval_suite(
    presets,
    params: EncoderParams,
    cfg: PipelineConfig,
    seeds,
    policy: Policy | str = Policy.GREEDY,
    max_steps: int = 30,
    out=None,
) -> SuiteRun:
    """One episode per (preset, seed), in that nested order; results are an ordered fold."""
    names = resolve_presets(presets)
    results, outcomes = [], []
    for name in names:
        for seed in seeds:
            spec = make_preset(name, seed)
            o = run_episode(
                spec.scene, spec.start, spec.goal, policy, params, cfg, max_steps, seed, spec.reference, f"{name}-{seed}"
            )
            results.append(o.result)
            outcomes.append(o)
    if out is not None:
        write_jsonl(results, out)
    return SuiteRun(results, aggregate(results), outcomes)


def axis_configs(axis: str, base: PipelineConfig) -> dict[str, PipelineConfig]:
    if axis == "scope":
        return {"Local": base.with_(scope=Scope.LOCAL), "Global": base.with_(scope=Scope.GLOBAL)}
    if axis == "fusion":
        return {"Weighted": base.with_(fusion=Fusion.WEIGHTED), "Direct": base.with_(fusion=Fusion.DIRECT)}
    if axis == "depth":
        return {
            "3.0": base.with_(truncation=Truncation.Z3D, d_max=3.0),
            "5.0": base.with_(truncation=Truncation.Z3D, d_max=5.0),
            "None": base.with_(truncation=Truncation.NONE),
        }
    if axis == "points":
        return {str(n): base.with_(n_pts=n) for n in (256, 512, 1024)}
    raise DomainError(f"unknown ablation axis {axis!r}; choose from {AXES}")


@dataclass
class AblationRow:
    label: str
    cfg: PipelineConfig
    run: SuiteRun
    toy_val_acc: float | None = None
    toy_baseline_acc: float | None = None


def ablate(
    axis: str,
    params: EncoderParams,
    base: PipelineConfig,
    presets="all",
    seeds=range(5),
    policy: Policy | str = Policy.GREEDY,
    max_steps: int = 30,
    toy: ToyTaskSpec | None = None,
    toy_iters: int = 1000,
) -> list[AblationRow]:
    """Run the same seeds under every setting of one axis; optionally train the toy task per setting."""
    rows = []
    for label, cfg in axis_configs(axis, base).items():
        run = eval_suite(presets, params, cfg, seeds, policy, max_steps)
        row = AblationRow(label, cfg, run)
        if toy is not None:
            res = train_toy(toy, EncoderParams.initialize(cfg.D, toy.seed), cfg, toy_iters)
            row.toy_val_acc, row.toy_baseline_acc = res.val_acc, res.baseline_val_acc
        rows.append(row)
    return rows


def ablation_table(axis: str, rows: list[AblationRow]) -> str:
    text = format_table({f"{axis}={r.label}": r.run.summary for r in rows})
    extra = [f"{axis}={r.label}: nonlocal_enhanced_max={r.run.nonlocal_max()}" for r in rows]
    extra += [
        f"{axis}={r.label}: toy_val_acc={r.toy_val_acc:.4f} baseline={r.toy_baseline_acc:.4f}"
        for r in rows
        if r.toy_val_acc is not None
    ]
    return text + "\n" + "\n".join(extra)
