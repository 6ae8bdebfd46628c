"""Built-in reproduction experiments: background-load validation and the danger-zone run."""
from __future__ import annotations

import copy
import gc
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sps

from .scenario import ScenarioConfig, bundled, load_scenario, run, validate
from .stats import empirical_cdf, mean_ci

logger = logging.getLogger(__name__)

FG_STREAM = "fg_response_time"


# -- background validation ---------------------------------------------------

@dataclass
class CountResult:
    count: int
    ks: float
    ks_pvalue: float
    wall: dict = field(default_factory=dict)        # mode -> list of seconds
    responses: dict = field(default_factory=dict)   # mode -> pooled samples

    def wall_ci(self, mode: str) -> tuple[float, float]:
        return mean_ci(self.wall[mode])


@dataclass
class BgValidationReport:
    counts: list
    reps: int
    results: list
    mu: float

    def by_count(self, count: int) -> CountResult:
        return next(r for r in self.results if r.count == count)

    def mean_wall(self, mode: str) -> list[float]:
        return [float(np.mean(r.wall[mode])) for r in self.results]

    @property
    def max_ks(self) -> float:
        return max(r.ks for r in self.results)

    def generator_spread(self) -> float:
        """(max - min) / min of the generator-mode mean wall times across counts."""
        w = self.mean_wall("generator")
        return (max(w) - min(w)) / min(w)

    def generator_slope(self) -> tuple[float, float, float]:
        """Least-squares slope of generator wall time vs count, its p-value and relative size.

        The relative size is the fitted change over the whole count range
        divided by the mean wall time.
        """
        x = np.concatenate([[r.count] * len(r.wall["generator"]) for r in self.results])
        y = np.concatenate([r.wall["generator"] for r in self.results])
        fit = sps.linregress(x, y)
        rel = fit.slope * (x.max() - x.min()) / y.mean()
        return float(fit.slope), float(fit.pvalue), float(rel)

    def explicit_monotone(self) -> bool:
        w = self.mean_wall("explicit")
        return all(b > a for a, b in zip(w, w[1:]))

    def ratio_at(self, count: int) -> float:
        r = self.by_count(count)
        return float(np.mean(r.wall["explicit"]) / np.mean(r.wall["generator"]))

    def summary(self) -> dict:
        slope, p, rel = self.generator_slope()
        rows = []
        for r in self.results:
            row = {"count": r.count, "ks": r.ks, "ks_pvalue": r.ks_pvalue}
            for mode in ("explicit", "generator"):
                m, h = r.wall_ci(mode)
                row[f"{mode}_wall_mean"] = m
                row[f"{mode}_wall_ci95"] = h
                row[f"{mode}_fg_mean"] = float(np.mean(r.responses[mode]))
                row[f"{mode}_fg_samples"] = len(r.responses[mode])
            rows.append(row)
        return {"mu": self.mu, "reps": self.reps, "counts": rows,
                "generator_slope": slope, "generator_slope_pvalue": p,
                "generator_relative_change": rel, "generator_spread": self.generator_spread(),
                "explicit_monotone": self.explicit_monotone(),
                "ratio_at_max": self.ratio_at(max(self.counts))}

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for r in self.results:
            for mode, samples in r.responses.items():
                values, q = empirical_cdf(samples)
                with (out / f"fg_cdf_{mode}_{r.count}.csv").open("w") as fh:
                    fh.write("value,quantile\n")
                    fh.writelines(f"{v!r},{p!r}\n" for v, p in zip(values.tolist(), q.tolist()))
        (out / "bg_validation.json").write_text(json.dumps(self.summary(), indent=2) + "\n")
        return out


def background_variant(base: ScenarioConfig, count: int, mode: str, seed: int) -> ScenarioConfig:
    doc = copy.deepcopy(base.doc)
    doc["seed"] = seed
    for svc in doc["services"]:
        bg = svc.get("background")
        if bg is not None:
            svc["background"] = {"mode": mode, "apps": count, "rate": bg.get("rate", 0.024)}
    return ScenarioConfig(validate(doc), base.source)


def timed_run(config: ScenarioConfig):
    """Run once with the collector paused; returns (result, wall seconds)."""
    gc.collect()
    gc.disable()
    try:
        t0 = time.perf_counter()
        result = run(config)
        return result, time.perf_counter() - t0
    finally:
        gc.enable()


def experiment_bg_validation(counts=(10, 100, 300), reps: int = 15, *, base: ScenarioConfig | None = None,
                             seed: int = 1, out_dir=None, progress=None) -> BgValidationReport:
    """Compare explicit background apps with the generator at each count.

    Repetition ``i`` of every (count, mode) pair uses seed ``seed + i``. Runs
    are interleaved by repetition so that slow drifts of the machine affect
    every count alike.
    """
    base = base or load_scenario(bundled("bg_validation"))
    counts = sorted(counts)
    walls = {(c, m): [] for c in counts for m in ("explicit", "generator")}
    samples = {(c, m): [] for c in counts for m in ("explicit", "generator")}
    mu = None
    for i in range(reps):
        for c in counts:
            for mode in ("explicit", "generator"):
                result, wall = timed_run(background_variant(base, c, mode, seed + i))
                walls[c, mode].append(wall)
                samples[c, mode].append(result.world.stats.values(FG_STREAM))
                mu = next(iter(result.manifest["services"].values()))["mu"]
                if progress is not None:
                    progress(i, c, mode, wall)
    results = []
    for c in counts:
        resp = {m: np.concatenate(samples[c, m]) for m in ("explicit", "generator")}
        ks = sps.ks_2samp(resp["explicit"], resp["generator"])
        results.append(CountResult(c, float(ks.statistic), float(ks.pvalue),
                                   {m: walls[c, m] for m in ("explicit", "generator")}, resp))
    report = BgValidationReport(counts, reps, results, mu)
    if out_dir is not None:
        report.write(out_dir)
    return report


# -- danger zone ----------------------------------------------------------------

EXPECTED_SEQUENCE = (("START", None), ("ACK", None), ("SUBSCRIBE", "entering"),
                     ("NOTIFY", "entering"), ("UE_INFORMED", "entering"), ("MODIFY", "leaving"),
                     ("NOTIFY", "leaving"), ("UE_INFORMED", "leaving"), ("STOP", None), ("ACK", None))


class SequenceViolation(AssertionError):
    def __init__(self, ue_id: str, position: int, got, expected):
        super().__init__(f"{ue_id}: step {position + 1} was {got}, expected {expected}")
        self.ue_id = ue_id
        self.position = position
        self.got = got
        self.expected = expected


def check_sequence(ue_id: str, events) -> int:
    """Number of expected steps observed, in order; raises on the first mismatch."""
    steps = [(e[2], e[3]) for e in events if e[1] == ue_id]
    for i, (name, detail) in enumerate(steps):
        if i >= len(EXPECTED_SEQUENCE):
            raise SequenceViolation(ue_id, i, name, "end of sequence")
        want, want_detail = EXPECTED_SEQUENCE[i]
        if name != want or (want_detail is not None and detail != want_detail):
            raise SequenceViolation(ue_id, i, (name, detail), (want, want_detail))
    return len(steps)


@dataclass
class DangerZoneReport:
    mode: str
    events: list
    steps: dict          # ue id -> number of expected steps observed
    notifications: int   # delivered by the Location Service
    callbacks: int = 0   # delivered over HTTP (real-time mode)
    wall_time: float = 0.0

    @property
    def complete(self) -> bool:
        return bool(self.steps) and all(n == len(EXPECTED_SEQUENCE) for n in self.steps.values())

    def lines(self) -> list[str]:
        t0 = self.events[0][0] if self.events else 0.0
        return [f"{t - t0:10.4f}  {actor:8s} {name}{'' if d is None else ' ' + str(d)}"
                for t, actor, name, d in self.events]


def experiment_danger_zone(mode: str = "sim", config: ScenarioConfig | None = None,
                           out_dir=None, pace: float = 1.0) -> DangerZoneReport:
    """Run the danger-zone scenario and check every vehicle's event sequence.

    In ``realtime`` mode the WarningAlert MEC app and the UE apps run outside
    the simulation and reach it through the gateway over UDP and HTTP.
    """
    config = config or load_scenario(bundled("danger_zone"))
    ue_ids = [ue["id"] for ue in config.doc["ues"] if ue.get("apps")]
    if mode == "realtime":
        report = _danger_zone_realtime(config, pace)
    else:
        result = run(config.with_overrides(mode="sim"), out_dir)
        events = list(result.world.timeline.events)
        loc = result.world.system.service("LocationService")
        report = DangerZoneReport("sim", events, {}, len(loc.sent),
                                  wall_time=result.manifest["wall_time"])
    for ue in ue_ids:
        report.steps[ue] = check_sequence(ue, report.events)
    return report


def _danger_zone_realtime(config: ScenarioConfig, pace: float) -> DangerZoneReport:
    from .apps import Timeline
    from .external import ExternalWarningAlertApp, ExternalWarningAlertUeApp

    timeline = Timeline()
    engine = None
    doc = copy.deepcopy(config.doc)
    doc["mode"] = "realtime"
    doc["pace"] = pace
    ue_specs = [(ue, ua) for ue in doc["ues"] for ua in ue.pop("apps", [])]
    targets = {ua["app"] for _, ua in ue_specs}
    # the MEC app runs outside: onboard it with an emulated endpoint
    mec_app = ExternalWarningAlertApp("", timeline)
    host, port = mec_app.address
    for app in doc["apps"]:
        if app["name"] in targets:
            app.pop("provider", None)
            app["external"] = {"address": host, "port": port}
    gw = doc.setdefault("gateway", {})
    gw["device_apps"] = {ue["id"]: 0 for ue, _ in ue_specs}
    ues = []
    pending = [len(ue_specs)]

    def finished(_app):
        # every UE app is done: no reason to keep the clock running
        pending[0] -= 1
        if pending[0] == 0:
            engine.stop()

    def ready(world):
        nonlocal engine
        engine = world.engine
        mec_app.registry_url = f"{world.gateway.base_url}/v1/mp1/services"
        mec_app.start()
        for ue, ua in ue_specs:
            app = ExternalWarningAlertUeApp(world.gateway.device_apps[ue["id"]], ue["id"],
                                            ua["center"], ua["radius"], timeline, app_name=ua["app"],
                                            on_done=finished)
            # the engine is not running yet, so scheduling directly is safe
            world.engine.schedule_at(ua.get("start_at", 0.0), app.start)
            ues.append(app)

    try:
        result = run(ScenarioConfig(validate(doc), config.source), on_ready=ready)
    finally:
        mec_app.close()
    for ue in ues:
        ue.join(timeout=5)
        if ue.error is not None:
            logger.warning("UE app %s: %s", ue.ue_id, ue.error)
    events = sorted(timeline.events, key=lambda e: e[0])
    loc = result.world.system.service("LocationService")
    delivered = sum(r.delivered for r in result.world.gateway.callbacks.values())
    return DangerZoneReport("realtime", events, {}, len(loc.sent), delivered,
                            wall_time=result.manifest["wall_time"])

