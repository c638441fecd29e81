"""Growth-chart math, measurement reflection, and grounded report rendering.

Percentiles use a fixed rational approximation of the normal CDF so results
are bit-stable across platforms. Reports are rendered exclusively from
evidence-bank entries: every numeral printed is read from a cited entry,
which makes the groundedness check a mechanical set comparison.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, replace

from .core import Measurement, TaskKind, Unit, canonical_json, format_number
from .errors import (
    ChartFormatError,
    EmptyBank,
    OutOfDomain,
    OutOfRange,
)
from .fusion import biometry_with_fallback

PERCENTILE_LOW_DEFAULT = 0.1
PERCENTILE_HIGH_DEFAULT = 99.9

_CHART_HEADER = ["measure", "ga_weeks", "mean_mm", "sd_mm"]

# Rational approximation constants for the standard normal CDF
# (Abramowitz & Stegun 26.2.17 form; absolute error < 7.5e-8).
_P = 0.2316419
_B = (0.319381530, -0.356563782, 1.781477937, -1.821255978, 1.330274429)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def normal_cdf(z: float) -> float:
    t = 1.0 / (1.0 + _P * abs(z))
    poly = t * (_B[0] + t * (_B[1] + t * (_B[2] + t * (_B[3] + t * _B[4]))))
    pdf = _INV_SQRT_2PI * math.exp(-0.5 * z * z)
    upper = 1.0 - pdf * poly
    return upper if z >= 0 else 1.0 - upper


@dataclass(frozen=True)
class GrowthChart:
    """Mean/SD reference curve for one measure over a GA domain."""

    measure: TaskKind
    rows: tuple  # of (ga_weeks, mean_mm, sd_mm)
    source: str = ""

    def __post_init__(self):
        if self.measure not in (TaskKind.HC, TaskKind.AC):
            raise ChartFormatError("chart measure must be HC or AC")
        if len(self.rows) < 2:
            raise ChartFormatError("chart needs at least 2 rows")
        gas = [r[0] for r in self.rows]
        means = [r[1] for r in self.rows]
        if any(b <= a for a, b in zip(gas, gas[1:])):
            raise ChartFormatError("ga must be strictly increasing")
        if any(b <= a for a, b in zip(means, means[1:])):
            raise ChartFormatError("mean must be strictly increasing in ga")
        if any(r[2] <= 0 for r in self.rows):
            raise ChartFormatError("sd must be positive")

    @property
    def ga_min(self) -> float:
        return self.rows[0][0]

    @property
    def ga_max(self) -> float:
        return self.rows[-1][0]

    def interpolate(self, ga: float) -> tuple:
        """Piecewise-linear (mean, sd) at ga; raises OutOfDomain outside."""
        if not (self.ga_min <= ga <= self.ga_max):
            raise OutOfDomain(
                f"ga {ga} outside chart domain [{self.ga_min}, {self.ga_max}]"
            )
        for (g0, m0, s0), (g1, m1, s1) in zip(self.rows, self.rows[1:]):
            if g0 <= ga <= g1:
                f = 0.0 if g1 == g0 else (ga - g0) / (g1 - g0)
                return m0 + f * (m1 - m0), s0 + f * (s1 - s0)
        raise OutOfDomain(f"ga {ga} not bracketed")  # unreachable on valid charts


def load_charts(path: str) -> dict:
    """Parse the chart CSV (header: measure,ga_weeks,mean_mm,sd_mm)."""
    by_measure: dict = {}
    with open(path, encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ChartFormatError("chart file is empty") from None
        if [h.strip() for h in header] != _CHART_HEADER:
            raise ChartFormatError(
                f"expected header {','.join(_CHART_HEADER)!r}, got {','.join(header)!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ChartFormatError(f"line {lineno}: expected 4 columns")
            measure = row[0].strip()
            try:
                ga, mean, sd = float(row[1]), float(row[2]), float(row[3])
            except ValueError as exc:
                raise ChartFormatError(f"line {lineno}: non-numeric value") from exc
            by_measure.setdefault(measure, []).append((ga, mean, sd))
    charts = {}
    for measure, rows in by_measure.items():
        task = TaskKind(measure)
        rows.sort(key=lambda r: r[0])
        charts[task] = GrowthChart(measure=task, rows=tuple(rows), source=path)
    return charts


def percentile_lookup(chart: GrowthChart, ga: float, value: float) -> float:
    """Normative percentile of `value` at gestational age `ga`."""
    mean, sd = chart.interpolate(ga)
    return 100.0 * normal_cdf((value - mean) / sd)


def invert_growth_curve(chart: GrowthChart, value: float, tol_mm: float = 1e-6) -> float:
    """Gestational age whose chart mean equals `value`, by bisection."""
    lo_val = chart.rows[0][1]
    hi_val = chart.rows[-1][1]
    if not (lo_val <= value <= hi_val):
        raise OutOfRange(f"value {value} outside chart mean range [{lo_val}, {hi_val}]")
    lo, hi = chart.ga_min, chart.ga_max
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f = chart.interpolate(mid)[0]
        if abs(f - value) <= tol_mm:
            return mid
        if f < value:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class Finding:
    """One verified observation: a task, its measurement, optional percentile."""

    task: TaskKind
    measurement: Measurement
    percentile: float | None = None
    flags: tuple = ()


def consistency_check_and_reflect(
    findings: list,
    ga_estimate: float,
    charts: dict,
    per_tool_fallbacks: dict | None = None,
    low: float = PERCENTILE_LOW_DEFAULT,
    high: float = PERCENTILE_HIGH_DEFAULT,
) -> tuple:
    """Chart-check HC/AC findings; re-measure implausible ones from fallbacks.

    A percentile outside (low, high) triggers one re-measurement over the
    per-tool masks; a still-extreme value is kept but flagged. Applying the
    check twice yields identical findings and flags (idempotence).
    """
    if not math.isfinite(ga_estimate):
        raise ValueError("ga estimate must be finite")
    fallbacks = per_tool_fallbacks or {}
    verified = []
    global_flags: set = set()
    for finding in findings:
        if finding.task not in (TaskKind.HC, TaskKind.AC) or finding.task not in charts:
            verified.append(finding)
            continue
        chart = charts[finding.task]
        try:
            pct = percentile_lookup(chart, ga_estimate, finding.measurement.value)
        except OutOfDomain:
            flags = tuple(sorted(set(finding.flags) | {"chart_domain"}))
            verified.append(replace(finding, flags=flags))
            global_flags.add("chart_domain")
            continue
        if low < pct < high:
            verified.append(replace(finding, percentile=round(pct, 1)))
            continue
        replaced = False
        masks = fallbacks.get(finding.task, [])
        if masks:
            try:
                refit, _ = biometry_with_fallback(None, masks)
                refit_pct = percentile_lookup(chart, ga_estimate, refit.value)
                if low < refit_pct < high:
                    flags = tuple(sorted(set(finding.flags) | {"reflection_applied"}))
                    verified.append(
                        Finding(
                            task=finding.task,
                            measurement=Measurement(
                                value=refit.value,
                                unit=finding.measurement.unit,
                                provenance="reflection:" + refit.provenance,
                            ),
                            percentile=round(refit_pct, 1),
                            flags=flags,
                        )
                    )
                    global_flags.add("reflection_applied")
                    replaced = True
            except Exception:
                pass
        if not replaced:
            flags = tuple(sorted(set(finding.flags) | {"out_of_range"}))
            verified.append(replace(finding, percentile=round(pct, 1), flags=flags))
            global_flags.add("out_of_range")
    return verified, tuple(sorted(global_flags))


@dataclass(frozen=True)
class Report:
    """Three-section clinical narrative with bank-entry citations."""

    findings: str
    impression: str
    note: str
    citations: tuple
    flags: tuple = ()

    def __post_init__(self):
        if not (self.findings and self.impression and self.note):
            raise ValueError("all three report sections must be non-empty")

    @property
    def text(self) -> str:
        return (
            f"Findings:\n{self.findings}\n\n"
            f"Impression:\n{self.impression}\n\n"
            f"Note:\n{self.note}\n"
        )

    def to_dict(self) -> dict:
        return {
            "findings": self.findings,
            "impression": self.impression,
            "note": self.note,
            "citations": list(self.citations),
            "flags": list(self.flags),
        }


_NUMERAL = re.compile(r"\d+(?:\.\d+)?")


def numerals_in(text: str) -> set:
    return set(_NUMERAL.findall(text))


def check_groundedness(report: Report, bank) -> list:
    """Numerals in the report that appear in no cited bank entry (should be [])."""
    cited_json = "".join(
        canonical_json(e.to_dict()) for e in bank.entries if e.id in set(report.citations)
    )
    allowed = numerals_in(cited_json)
    return sorted(numerals_in(report.text) - allowed)


_TASK_PHRASE = {
    TaskKind.HC: "head circumference",
    TaskKind.AC: "abdominal circumference",
    TaskKind.AOP: "angle of progression",
    TaskKind.GA: "estimated gestational age",
    TaskKind.STOMACH_SEG: "stomach area",
    TaskKind.STANDARD_PLANE: "standard plane",
    TaskKind.BRAIN_SUBPLANE: "cranial sub-plane",
}

_UNIT_PHRASE = {"mm": "mm", "degrees": "degrees", "cm2": "cm2", "weeks": "weeks"}


def _render_tool_entry(entry) -> tuple:
    """One Findings line from a tool entry; returns (line or None, flags)."""
    p = entry.payload
    flags = tuple(p.get("flags", []))
    kind = p.get("kind")
    if kind == "label":
        phrase = _TASK_PHRASE.get(TaskKind(p["task"]), p["task"]) if "task" in p else "view"
        return f"- Identified {phrase}: {p['label']} [entry {entry.id}].", flags
    if kind == "measurement":
        phrase = _TASK_PHRASE.get(TaskKind(p["task"]), p["task"]) if "task" in p else "value"
        unit = _UNIT_PHRASE.get(p.get("unit", ""), p.get("unit", ""))
        line = f"- Measured {phrase}: {format_number(p['value'])} {unit}"
        if p.get("percentile") is not None:
            line += f" (percentile {format_number(p['percentile'])})"
        line += f" [entry {entry.id}]."
        return line, flags
    if kind == "mask":
        phrase = _TASK_PHRASE.get(TaskKind(p["task"]), p["task"]) if "task" in p else "region"
        return (
            f"- Segmented {phrase}: {format_number(p['area_px'])} px foreground "
            f"[entry {entry.id}].",
            flags,
        )
    return None, flags


def generate_report(bank, decision=None) -> Report:
    """Render Findings/Impression/Note strictly from bank entries.

    Findings enumerates tool evidence; Impression states the decision or a
    measurement summary; Note records tallies, retrieval, and flags with
    entry ids. Citations cover every entry whose content was used.
    """
    entries = bank.entries
    if not entries:
        raise EmptyBank("cannot generate a report from an empty bank")
    citations = []
    flags: list = []

    finding_lines = []
    for entry in entries:
        if entry.tag != "tool":
            continue
        line, entry_flags = _render_tool_entry(entry)
        if line:
            finding_lines.append(line)
            citations.append(entry.id)
            for f in entry_flags:
                if f not in flags:
                    flags.append(f)
    if not finding_lines:
        finding_lines.append("- No tool-derived observations were recorded for this study.")

    for entry in entries:
        if entry.tag == "context" and entry.payload.get("flags"):
            citations.append(entry.id)
            for f in entry.payload["flags"]:
                if f not in flags:
                    flags.append(f)

    if decision is not None:
        option_text = ""
        for entry in entries:
            if entry.tag == "context":
                for opt in entry.payload.get("options", []):
                    if opt.get("key") == decision.key:
                        option_text = opt.get("text", "")
                if entry.id not in citations:
                    citations.append(entry.id)
        impression = f"Answer: ({decision.key})"
        if option_text:
            impression += f" {option_text}"
        impression += f", decided by {decision.justification.get('rule', decision.mode.value)}."
    else:
        measured = [e for e in entries if e.tag == "tool" and e.payload.get("kind") == "measurement"]
        labeled = [e for e in entries if e.tag == "tool" and e.payload.get("kind") == "label"]
        parts = []
        if labeled:
            parts.append(f"{labeled[0].payload['label']} view")
        if measured:
            parts.append("biometry within the documented entries" if not flags else "biometry reviewed with flags")
        impression = (
            "Study demonstrates " + " with ".join(parts) + "."
            if parts
            else "Study recorded without tool-derived observations."
        )

    note_lines = []
    for entry in entries:
        if entry.tag == "vote" and entry.payload.get("kind") == "tally":
            counts = entry.payload.get("counts", {})
            tally = ", ".join(
                f"{k}: {format_number(c)}" for k, c in sorted(counts.items())
            )
            note_lines.append(f"- Voter tally ({tally}) [entry {entry.id}].")
            citations.append(entry.id)
    rag_ids = [e.id for e in entries if e.tag == "rag"]
    if rag_ids:
        ids_text = ", ".join(f"entry {format_number(i)}" for i in rag_ids)
        note_lines.append(f"- Retrieved knowledge snippets: {ids_text}.")
        citations.extend(rag_ids)
    if flags:
        note_lines.append(f"- Flags: {', '.join(flags)}.")
    cited_sorted = sorted(set(citations))
    ids_text = ", ".join(format_number(i) for i in cited_sorted)
    note_lines.append(f"- Supporting evidence bank entries: {ids_text}.")

    report = Report(
        findings="\n".join(finding_lines),
        impression=impression,
        note="\n".join(note_lines),
        citations=tuple(cited_sorted),
        flags=tuple(flags),
    )
    for cid in report.citations:
        if bank.get(cid) is None:
            raise ValueError(f"citation {cid} does not resolve in the bank")
    return report


def polish_report(report: Report, bank, backend) -> Report:
    """LLM prose rewrite gated by the groundedness check.

    The polished text is kept only when it introduces no numeral missing
    from the cited entries; otherwise the template version stands.
    """
    prompt = (
        "Rewrite the following structured ultrasound report as flowing prose. "
        "Keep every number exactly as written and do not add new facts.\n\n"
        + report.text
        + "\nReturn three sections labeled Findings:, Impression:, Note:."
    )
    try:
        reply = backend.complete("Reporter", prompt)
    except Exception:
        return report
    m = re.search(
        r"Findings:\s*(.*?)\s*Impression:\s*(.*?)\s*Note:\s*(.*)", reply, re.DOTALL
    )
    if not m:
        return report
    try:
        polished = Report(
            findings=m.group(1).strip(),
            impression=m.group(2).strip(),
            note=m.group(3).strip(),
            citations=report.citations,
            flags=report.flags,
        )
    except ValueError:
        return report
    if check_groundedness(polished, bank):
        return report
    return polished
