"""Route completion, infraction score and driving score."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..numgrid import UsageError
from .world import CATEGORIES, EpisodeResult

DEFAULT_PENALTIES = {"collision_vehicle": 0.60, "collision_layout": 0.65, "off_road": 0.80}


@dataclass
class RouteScore:
    name: str
    seed: int
    rc: float
    is_: float
    ds: float
    km: float
    status: str
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "seed": self.seed, "RC": self.rc, "IS": self.is_,
                "DS": self.ds, "km": self.km, "status": self.status, "counts": dict(self.counts)}


@dataclass
class MetricsReport:
    routes: list
    driving_score: float
    route_completion: float
    infraction_score: float
    total_km: float
    rates: dict  # category -> events per km, or None when nothing was driven

    def to_dict(self) -> dict:
        return {
            "DS": self.driving_score, "RC": self.route_completion, "IS": self.infraction_score,
            "km": self.total_km, "rates_per_km": dict(self.rates),
            "routes": [r.to_dict() for r in self.routes],
        }

    def table(self) -> str:
        lines = [f"{'route':<22}{'DS':>8}{'RC':>8}{'IS':>7}  status"]
        for r in self.routes:
            lines.append(f"{r.name:<22}{r.ds:8.2f}{r.rc:8.2f}{r.is_:7.3f}  {r.status}")
        lines.append(f"{'mean':<22}{self.driving_score:8.2f}{self.route_completion:8.2f}"
                     f"{self.infraction_score:7.3f}")
        lines.append("per km: " + ", ".join(
            f"{k}={'n/a' if v is None else f'{v:.3f}'}" for k, v in self.rates.items()))
        return "\n".join(lines)


def infraction_score(kinds: Sequence[str], penalties: Optional[dict] = None) -> float:
    pen = DEFAULT_PENALTIES if penalties is None else penalties
    score = 1.0
    for k in kinds:
        score *= pen.get(k, 1.0)
    return score


def score_route(ep: EpisodeResult, penalties: Optional[dict] = None) -> RouteScore:
    kinds = [e.kind for e in ep.events]
    rc = ep.route_completion
    is_ = infraction_score(kinds, penalties)
    counts = {c: kinds.count(c) for c in CATEGORIES}
    return RouteScore(ep.name, ep.seed, rc, is_, rc * is_, ep.odometer / 1000.0, ep.status, counts)


def score(episodes: Sequence[EpisodeResult], penalties: Optional[dict] = None) -> MetricsReport:
    """Per-route scores and their means; rates are per kilometre driven."""
    if not episodes:
        raise UsageError("score needs at least one episode")
    routes = sorted((score_route(e, penalties) for e in episodes), key=lambda r: (r.seed, r.name))
    km = float(sum(r.km for r in routes))
    rates = {c: (sum(r.counts[c] for r in routes) / km if km > 0 else None) for c in CATEGORIES}
    return MetricsReport(
        routes=routes,
        driving_score=float(np.mean([r.ds for r in routes])),
        route_completion=float(np.mean([r.rc for r in routes])),
        infraction_score=float(np.mean([r.is_ for r in routes])),
        total_km=km,
        rates=rates,
    )
