"""Run reports written next to every CLI artifact."""

from __future__ import annotations

import json
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

PHASES = ("oed", "charge", "fim", "validate")


@dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class RunReport:
    digest: str
    phase: str
    seeds: dict[str, int]
    metrics: dict = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    properties: list[PropertyResult] = field(default_factory=list)

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")

    @property
    def ok(self) -> bool:
        return all(p.passed for p in self.properties)

    @contextmanager
    def timed(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = time.perf_counter() - t0

    def check(self, name: str, passed: bool, detail: str = "") -> bool:
        self.properties.append(PropertyResult(name, bool(passed), detail))
        return bool(passed)

    def to_dict(self) -> dict:
        return {
            "phase": self.phase,
            "scenario_digest": self.digest,
            "seeds": self.seeds,
            "ok": self.ok,
            "metrics": _jsonable(self.metrics),
            "timings_s": self.timings,
            "properties": [{"name": p.name, "passed": p.passed, "detail": p.detail}
                           for p in self.properties],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"phase:    {self.phase}", f"scenario: {self.digest}",
                 "seeds:    " + ", ".join(f"{k}={v}" for k, v in sorted(self.seeds.items()))]
        for k, v in sorted(self.metrics.items()):
            lines.append(f"{k}: {_fmt(v)}")
        for p in self.properties:
            lines.append(f"[{'PASS' if p.passed else 'FAIL'}] {p.name}" + (f"  ({p.detail})" if p.detail else ""))
        for k, v in self.timings.items():
            lines.append(f"time {k}: {v:.2f} s")
        lines.append("result: " + ("ok" if self.ok else "FAILED"))
        return "\n".join(lines)

    def write(self, out_dir: Path, fmt: str) -> Path:
        path = Path(out_dir) / f"{self.phase}_report.{'json' if fmt == 'json' else 'txt'}"
        path.write_text((self.to_json() if fmt == "json" else self.to_text()) + "\n")
        return path


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, dict):
        return ", ".join(f"{k}={_fmt(x)}" for k, x in v.items())
    if isinstance(v, (list, tuple)) and len(v) <= 8:
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    if isinstance(v, (list, tuple)):
        return f"<{len(v)} values>"
    return str(v)


def _jsonable(v):
    # JSON has no inf/nan; keep them readable as strings
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if hasattr(v, "item"):
        return _jsonable(v.item())
    return v
