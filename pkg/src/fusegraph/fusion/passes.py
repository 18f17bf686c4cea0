"""Rule registry, per-rule passes and the ordered fusion pipeline."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

from ..errors import ConfigError
from ..graph_ir import Graph, OpKind, check
from .attention import match_attention
from .layernorm import match_layer_norm
from .match import GraphView, Matcher, canonicalize, find_matches, rewrite
from .relpos import match_relpos_attention


@dataclass(frozen=True)
class Rule:
    name: str
    anchor: OpKind
    matcher: Matcher


RULES: dict[str, Rule] = {
    r.name: r
    for r in (
        Rule("layer_norm", OpKind.Sqrt, match_layer_norm),
        Rule("relpos_attention", OpKind.Softmax, match_relpos_attention),
        Rule("attention", OpKind.Softmax, match_attention),
    )
}
DEFAULT_RULES = ("layer_norm", "relpos_attention", "attention")


@dataclass
class FusionReport:
    rule: str
    matches: int = 0
    nodes_removed: int = 0
    nodes_added: int = 0
    match_values: list[dict] = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PipelineReport:
    rules: list[FusionReport]
    nodes_before: int
    nodes_after: int

    @property
    def matches(self) -> int:
        return sum(r.matches for r in self.rules)

    def by_rule(self) -> dict[str, int]:
        return {r.rule: r.matches for r in self.rules}

    def to_dict(self) -> dict:
        return {
            "total_matches": self.matches,
            "nodes_before": self.nodes_before,
            "nodes_after": self.nodes_after,
            "rules": [r.to_dict() for r in self.rules],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def apply_rule(g: Graph, rule: Rule | str) -> tuple[Graph, FusionReport]:
    if isinstance(rule, str):
        rule = resolve_rules([rule])[0]
    g = canonicalize(check(g))
    view = GraphView(g)
    matches, diagnostics = find_matches(view, rule.anchor, rule.matcher)
    report = FusionReport(rule.name, len(matches), diagnostics=diagnostics)
    for m in matches:
        report.nodes_removed += len(m.nodes)
        report.nodes_added += 1
        report.match_values.append(m.describe())
    return check(rewrite(g, matches)), report


def fuse_attention(g: Graph) -> tuple[Graph, FusionReport]:
    return apply_rule(g, "attention")


def fuse_relpos_attention(g: Graph) -> tuple[Graph, FusionReport]:
    return apply_rule(g, "relpos_attention")


def fuse_layer_norm(g: Graph) -> tuple[Graph, FusionReport]:
    return apply_rule(g, "layer_norm")


def resolve_rules(names: Optional[Sequence[str]]) -> list[Rule]:
    if names is None:
        names = DEFAULT_RULES
    unknown = [n for n in names if n not in RULES]
    if unknown:
        raise ConfigError(f"unknown fusion rule(s) {', '.join(unknown)}; available: {', '.join(RULES)}")
    return [RULES[n] for n in names]


def fusion_pipeline(g: Graph, rules: Optional[Sequence[str]] = None) -> tuple[Graph, PipelineReport]:
    """Apply ``rules`` in order (default: layer_norm, relpos_attention, attention)."""
    before = len(g.nodes)
    reports = []
    for rule in resolve_rules(rules):
        g, report = apply_rule(g, rule)
        reports.append(report)
    return g, PipelineReport(reports, before, len(g.nodes))


