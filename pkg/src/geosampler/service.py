"""Live campaign service: persistence, state machine, HTTP/JSON API.

A campaign wraps one village and one design configuration. The field team
is the oracle: the service issues batches, accepts human-entered
observations, refits synchronously when a batch completes, and reports the
termination gauge. State is persisted as an append-only event log plus a
JSON snapshot per campaign; replaying the log through the (deterministic)
engine reproduces the committed state exactly.
"""

from __future__ import annotations

import json
import math
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import HTMLResponse, JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

import numpy as np

from .design import (
    DesignConfig,
    draw_initial_design,
    evaluate_design,
    schedule_t,
    select_batch,
    utility_scores,
    _standardize_pop,
)
from .inference import FitConfig, ModelVariant, fit_report, risk_map
from .priors import PriorConfig
from .village import (
    CovariateSchema,
    CovariateSet,
    VillageFrame,
    VillageError,
    load_village,
)

EVENTS_FILE = "events.jsonl"
SNAPSHOT_FILE = "snapshot.json"
VILLAGE_FILE = "village.csv"
SCHEMA_FILE = "village.schema.json"
CONFIG_FILE = "config.json"

STATUS_AWAITING = "AwaitingObservations"
STATUS_READY = "ReadyForBatch"
STATUS_TERMINATED = "Terminated"


class CampaignError(Exception):
    def __init__(self, code: str, message: str, status_code: int = 400, field_name=None):
        super().__init__(message)
        self.code = code
        self.message = message
        self.status_code = status_code
        self.field_name = field_name

    def payload(self) -> dict:
        out = {"code": self.code, "message": self.message}
        if self.field_name:
            out["field"] = self.field_name
        return out


@dataclass
class CampaignConfig:
    design: DesignConfig
    prior: PriorConfig
    fit: FitConfig
    variant: ModelVariant
    covset: CovariateSet

    @staticmethod
    def from_json(obj: dict, covset: str = "all") -> "CampaignConfig":
        try:
            return CampaignConfig(
                design=DesignConfig.from_json(obj.get("design", {})),
                prior=PriorConfig.from_json(obj.get("prior", {})),
                fit=FitConfig.from_json(obj.get("fit", {})),
                variant=ModelVariant(obj.get("variant", "full")),
                covset=CovariateSet(covset),
            )
        except (ValueError, TypeError) as exc:
            raise CampaignError("invalid_config", str(exc), 422, "config") from exc

    def to_json(self) -> dict:
        return {
            "design": self.design.to_json(),
            "prior": self.prior.to_json(),
            "fit": self.fit.to_json(),
            "variant": self.variant.value,
            "covset": self.covset.value,
        }


@dataclass
class CampaignRecord:
    """In-memory read/write model of one campaign; all-plain-data summaries."""

    campaign_id: str
    frame: VillageFrame
    config: CampaignConfig
    observations: dict[str, bool] = field(default_factory=dict)
    visited: list[tuple[str, int]] = field(default_factory=list)
    outstanding: list[str] = field(default_factory=list)
    current_batch: list[str] = field(default_factory=list)
    batch_counter: int = 0
    status: str = STATUS_AWAITING
    p_below_traj: list[float] = field(default_factory=list)
    t_traj: list[Optional[float]] = field(default_factory=list)
    risk_mean: list[float] = field(default_factory=list)
    risk_var: list[float] = field(default_factory=list)
    utility_rows: list[dict] = field(default_factory=list)
    fit_summary: Optional[dict] = None
    last_refit_seconds: Optional[float] = None

    @property
    def m_visited(self) -> int:
        return len(self.visited)

    def observed_status(self, hid: str) -> Optional[str]:
        if hid not in self.observations:
            return None
        return "infested" if self.observations[hid] else "clear"

    def next_iteration(self) -> int:
        return len(self.p_below_traj) + 1

    def refit(self) -> None:
        """Synchronous refit after a completed batch; updates all summaries."""
        started = time.perf_counter()
        cfg = self.config
        iteration = self.next_iteration()
        fit, draws, pred, report = evaluate_design(
            self.frame, self.observations, cfg.design, iteration,
            cfg.prior, cfg.fit, cfg.variant,
        )
        mean, var = risk_map(fit, draws, pred)
        self.risk_mean = [float(x) for x in mean]
        self.risk_var = [float(x) for x in var]
        self.p_below_traj.append(report.p_below)
        self.fit_summary = fit_report(fit, draws)
        if report.decision:
            self.t_traj.append(None)
            self.utility_rows = []
            self.status = STATUS_TERMINATED
        else:
            m1 = sum(1 for _, b in self.visited if b == 0)
            t = schedule_t(self.m_visited, m1, self.frame.n, cfg.design.alpha)
            scores = utility_scores(pred, t)
            r_std = _standardize_pop(pred.risk_mean)
            v_std = _standardize_pop(pred.risk_var)
            self.t_traj.append(t)
            self.utility_rows = [
                {
                    "id": hid,
                    "U": float(u),
                    "t": t,
                    "r_std": float(rs),
                    "v_std": float(vs),
                }
                for hid, u, rs, vs in zip(pred.unvisited_ids, scores, r_std, v_std)
            ]
            self.status = STATUS_READY
        self.last_refit_seconds = time.perf_counter() - started

    def snapshot(self) -> dict:
        """JSON read model served to the UI; deterministic (no timestamps)."""
        frame = self.frame
        batch_set = set(self.outstanding)
        houses = []
        for i, h in enumerate(frame.houses):
            houses.append(
                {
                    "id": h.id,
                    "x": float(frame.scaled_coords[i, 0]),
                    "y": float(frame.scaled_coords[i, 1]),
                    "visited": h.id in self.observations,
                    "status": self.observed_status(h.id),
                    "risk_mean": self.risk_mean[i] if self.risk_mean else None,
                    "risk_var": self.risk_var[i] if self.risk_var else None,
                    "in_current_batch": h.id in batch_set,
                }
            )
        design = self.config.design
        return {
            "campaign_id": self.campaign_id,
            "status": self.status,
            "config": self.config.to_json(),
            "n": frame.n,
            "diameter_m": frame.diameter_m,
            "houses": houses,
            "outstanding": list(self.outstanding),
            "current_batch": list(self.current_batch),
            "visited": [{"id": hid, "batch": b} for hid, b in self.visited],
            "p_below_trajectory": list(self.p_below_traj),
            "t_trajectory": list(self.t_traj),
            "threshold": {
                "target_rate": design.target_rate,
                "confidence": design.confidence,
                "threshold_count": check_termination_threshold(design, frame.n),
            },
            "iteration": len(self.p_below_traj),
            "batch_counter": self.batch_counter,
            "terminated": self.status == STATUS_TERMINATED,
            "utility": list(self.utility_rows),
            "last_fit": self.fit_summary,
            "refit_in_progress": False,
        }

    def report(self) -> dict:
        """Deterministic campaign report (the exported artifact)."""
        return {
            "campaign_id": self.campaign_id,
            "status": self.status,
            "config": self.config.to_json(),
            "visited": [{"id": hid, "batch": b} for hid, b in self.visited],
            "observations": {
                hid: ("infested" if v else "clear")
                for hid, v in sorted(self.observations.items())
            },
            "p_below_trajectory": list(self.p_below_traj),
            "t_trajectory": list(self.t_traj),
            "risk_mean": list(self.risk_mean),
            "risk_var": list(self.risk_var),
            "final_size": self.m_visited,
            "terminated": self.status == STATUS_TERMINATED,
        }


def check_termination_threshold(design: DesignConfig, n: int) -> int:
    return int(math.ceil(design.target_rate * n))


class CampaignStore:
    """Disk-backed registry; one writer per campaign via a per-id lock."""

    def __init__(self, state_dir: str | Path):
        self.state_dir = Path(state_dir)
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self._records: dict[str, CampaignRecord] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._registry_lock = threading.Lock()
        for sub in sorted(self.state_dir.iterdir()):
            if (sub / SNAPSHOT_FILE).exists():
                try:
                    rec = load_campaign(sub)
                    self._records[rec.campaign_id] = rec
                except Exception:  # noqa: BLE001 - a corrupt dir must not block startup
                    continue

    def lock(self, campaign_id: str) -> threading.Lock:
        with self._registry_lock:
            if campaign_id not in self._locks:
                self._locks[campaign_id] = threading.Lock()
            return self._locks[campaign_id]

    def get(self, campaign_id: str) -> CampaignRecord:
        rec = self._records.get(campaign_id)
        if rec is None:
            raise CampaignError("unknown_campaign", f"no campaign {campaign_id!r}", 404)
        return rec

    def campaign_dir(self, campaign_id: str) -> Path:
        return self.state_dir / campaign_id

    # -- event log helpers ---------------------------------------------------

    def _append_event(self, campaign_id: str, event: dict) -> None:
        path = self.campaign_dir(campaign_id) / EVENTS_FILE
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")

    def _write_snapshot(self, rec: CampaignRecord) -> None:
        path = self.campaign_dir(rec.campaign_id) / SNAPSHOT_FILE
        tmp = path.with_suffix(".json.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(rec.snapshot(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        tmp.replace(path)

    # -- operations ----------------------------------------------------------

    def create_campaign(
        self,
        village_csv: str,
        schema: Optional[dict],
        config: dict,
        covset: str = "all",
        campaign_id: Optional[str] = None,
        actor: str = "field",
    ) -> CampaignRecord:
        campaign_id = campaign_id or uuid.uuid4().hex[:12]
        if campaign_id in self._records:
            raise CampaignError(
                "duplicate_campaign", f"campaign {campaign_id!r} exists", 409
            )
        cfg = CampaignConfig.from_json(config, covset=covset)
        cdir = self.campaign_dir(campaign_id)
        cdir.mkdir(parents=True, exist_ok=True)
        (cdir / VILLAGE_FILE).write_text(village_csv, encoding="utf-8")
        schema_obj = schema or {"covariates": {}}
        (cdir / SCHEMA_FILE).write_text(
            json.dumps(schema_obj, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        (cdir / CONFIG_FILE).write_text(
            json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        try:
            rec = _initialize_record(campaign_id, cdir, cfg)
        except (VillageError, ValueError) as exc:
            raise CampaignError("invalid_village", str(exc), 422, "village_csv") from exc
        self._append_event(
            campaign_id,
            {
                "event": "created",
                "campaign_id": campaign_id,
                "covset": covset,
                "initial_design": list(rec.outstanding),
                "timestamp": time.time(),
                "actor": actor,
            },
        )
        self._write_snapshot(rec)
        self._records[campaign_id] = rec
        return rec

    def submit_observations(
        self, campaign_id: str, items: list[dict], actor: str = "field"
    ) -> CampaignRecord:
        rec = self.get(campaign_id)
        _apply_observations(rec, items)
        self._append_event(
            campaign_id,
            {
                "event": "observations",
                "items": [
                    {"house_id": it["house_id"], "status": it["status"]} for it in items
                ],
                "timestamp": time.time(),
                "actor": actor,
            },
        )
        self._write_snapshot(rec)
        return rec

    def next_batch(self, campaign_id: str, actor: str = "field") -> tuple[CampaignRecord, list[dict], bool]:
        rec = self.get(campaign_id)
        batch, issued = _next_batch(rec)
        if issued:
            self._append_event(
                campaign_id,
                {
                    "event": "batch_issued",
                    "ids": [row["id"] for row in batch],
                    "batch": rec.batch_counter,
                    "timestamp": time.time(),
                    "actor": actor,
                },
            )
            self._write_snapshot(rec)
        return rec, batch, issued


def _initialize_record(
    campaign_id: str, cdir: Path, cfg: CampaignConfig
) -> CampaignRecord:
    frame = load_village(cdir / VILLAGE_FILE, cfg.covset, cdir / SCHEMA_FILE)
    initial = draw_initial_design(frame, cfg.design)
    rec = CampaignRecord(campaign_id=campaign_id, frame=frame, config=cfg)
    rec.outstanding = list(initial)
    rec.current_batch = list(initial)
    rec.batch_counter = 0
    rec.status = STATUS_AWAITING
    return rec


def _apply_observations(rec: CampaignRecord, items: list[dict]) -> None:
    if rec.status == STATUS_TERMINATED:
        raise CampaignError("terminated", "campaign already terminated", 409)
    if not items:
        raise CampaignError("empty_submission", "no observations supplied", 422, "observations")
    seen = set()
    outstanding = set(rec.outstanding)
    for it in items:
        hid = it["house_id"]
        if it["status"] not in ("infested", "clear"):
            raise CampaignError(
                "invalid_status", f"status must be infested|clear, got {it['status']!r}",
                422, "observations",
            )
        if hid in seen:
            raise CampaignError(
                "duplicate_house", f"house {hid!r} appears twice in submission", 422,
                "observations",
            )
        if hid not in outstanding:
            raise CampaignError(
                "not_outstanding",
                f"house {hid!r} is not awaiting observation", 409, "observations",
            )
        seen.add(hid)
    # validated; apply atomically
    for it in items:
        hid = it["house_id"]
        rec.observations[hid] = it["status"] == "infested"
        rec.outstanding.remove(hid)
        rec.visited.append((hid, rec.batch_counter))
    if not rec.outstanding:
        rec.refit()


def _next_batch(rec: CampaignRecord) -> tuple[list[dict], bool]:
    """Issue (or idempotently re-serve) the recommended batch."""
    if rec.status == STATUS_TERMINATED:
        raise CampaignError("terminated", "campaign already terminated", 409)
    if rec.status == STATUS_AWAITING:
        # idempotent replay: the last utility-issued batch with no
        # observations against it is served again unchanged
        if (
            rec.batch_counter > 0
            and rec.current_batch
            and set(rec.outstanding) == set(rec.current_batch)
        ):
            by_id = {row["id"]: row for row in rec.utility_rows}
            return [by_id[hid] for hid in rec.current_batch], False
        raise CampaignError(
            "awaiting_observations",
            "outstanding houses must be observed before a new batch", 409,
        )
    # ReadyForBatch: select from the stored utility scores
    ids = [row["id"] for row in rec.utility_rows]
    scores = np.array([row["U"] for row in rec.utility_rows])
    batch_ids = select_batch(scores, ids, rec.config.design.batch_size)
    rec.batch_counter += 1
    rec.current_batch = list(batch_ids)
    rec.outstanding = list(batch_ids)
    rec.status = STATUS_AWAITING
    by_id = {row["id"]: row for row in rec.utility_rows}
    return [by_id[hid] for hid in batch_ids], True


def load_campaign(cdir: str | Path) -> CampaignRecord:
    """Resume a campaign from its snapshot (fast path; no refit)."""
    cdir = Path(cdir)
    cfg_obj = json.loads((cdir / CONFIG_FILE).read_text(encoding="utf-8"))
    cfg = CampaignConfig.from_json(cfg_obj, covset=cfg_obj.get("covset", "all"))
    snap = json.loads((cdir / SNAPSHOT_FILE).read_text(encoding="utf-8"))
    frame = load_village(cdir / VILLAGE_FILE, cfg.covset, cdir / SCHEMA_FILE)
    rec = CampaignRecord(campaign_id=snap["campaign_id"], frame=frame, config=cfg)
    rec.observations = {
        h["id"]: h["status"] == "infested" for h in snap["houses"] if h["visited"]
    }
    rec.visited = [(v["id"], v["batch"]) for v in snap["visited"]]
    rec.outstanding = list(snap["outstanding"])
    rec.current_batch = list(snap["current_batch"])
    rec.batch_counter = int(snap["batch_counter"])
    rec.status = snap["status"]
    rec.p_below_traj = list(snap["p_below_trajectory"])
    rec.t_traj = list(snap["t_trajectory"])
    rec.risk_mean = list(h["risk_mean"] for h in snap["houses"]) if snap["houses"][0]["risk_mean"] is not None else []
    rec.risk_var = list(h["risk_var"] for h in snap["houses"]) if snap["houses"][0]["risk_var"] is not None else []
    rec.utility_rows = list(snap["utility"])
    rec.fit_summary = snap["last_fit"]
    return rec


def replay_campaign(cdir: str | Path) -> CampaignRecord:
    """Rebuild a campaign purely from its audit log (slow path; refits)."""
    cdir = Path(cdir)
    cfg_obj = json.loads((cdir / CONFIG_FILE).read_text(encoding="utf-8"))
    cfg = CampaignConfig.from_json(cfg_obj, covset=cfg_obj.get("covset", "all"))
    rec: Optional[CampaignRecord] = None
    with open(cdir / EVENTS_FILE, "r", encoding="utf-8") as fh:
        for line in fh:
            event = json.loads(line)
            kind = event["event"]
            if kind == "created":
                rec = _initialize_record(event["campaign_id"], cdir, cfg)
                if list(rec.outstanding) != list(event["initial_design"]):
                    raise CampaignError(
                        "replay_mismatch", "initial design differs from the log", 500
                    )
            elif kind == "observations":
                assert rec is not None
                _apply_observations(rec, event["items"])
            elif kind == "batch_issued":
                assert rec is not None
                batch, issued = _next_batch(rec)
                got = [row["id"] for row in batch]
                if got != list(event["ids"]):
                    raise CampaignError(
                        "replay_mismatch",
                        f"recomputed batch {got} != logged {event['ids']}", 500,
                    )
            else:
                raise CampaignError("replay_mismatch", f"unknown event {kind!r}", 500)
    if rec is None:
        raise CampaignError("replay_mismatch", "empty event log", 500)
    return rec


# ---------------------------------------------------------------------------
# HTTP layer


class ObservationItem(BaseModel):
    house_id: str
    status: str


class SubmitObservationsRequest(BaseModel):
    observations: list[ObservationItem]
    actor: str = "field"


class CreateCampaignRequest(BaseModel):
    village_csv: str
    covariate_schema: Optional[dict] = Field(default=None, alias="schema")
    config: dict = Field(default_factory=dict)
    covset: str = "all"
    campaign_id: Optional[str] = None
    actor: str = "field"

    model_config = {"populate_by_name": True}


_FALLBACK_INDEX = """<!doctype html>
<html><head><title>geosampler campaign service</title></head>
<body><h1>geosampler campaign service</h1>
<p>No UI bundle found. Build the frontend (see README) or use the JSON API:
POST /campaigns, GET /campaigns/{id}, POST /campaigns/{id}/observations,
POST /campaigns/{id}/next-batch, GET /campaigns/{id}/report.</p>
</body></html>"""


def create_app(state_dir: str | Path, ui_dir: Optional[str | Path] = None) -> FastAPI:
    store = CampaignStore(state_dir)
    app = FastAPI(title="geosampler campaign service")
    app.state.store = store

    @app.exception_handler(CampaignError)
    async def campaign_error_handler(_req: Request, exc: CampaignError):
        return JSONResponse(status_code=exc.status_code, content=exc.payload())

    @app.exception_handler(RequestValidationError)
    async def validation_handler(_req: Request, exc: RequestValidationError):
        first = exc.errors()[0] if exc.errors() else {}
        loc = ".".join(str(x) for x in first.get("loc", []) if x != "body")
        return JSONResponse(
            status_code=422,
            content={
                "code": "validation_error",
                "message": first.get("msg", "invalid request"),
                "field": loc or None,
            },
        )

    @app.post("/campaigns", status_code=201)
    def create_campaign(req: CreateCampaignRequest):
        rec = store.create_campaign(
            village_csv=req.village_csv,
            schema=req.covariate_schema,
            config=req.config,
            covset=req.covset,
            campaign_id=req.campaign_id,
            actor=req.actor,
        )
        with store.lock(rec.campaign_id):
            return rec.snapshot()

    @app.get("/campaigns/{campaign_id}")
    def campaign_snapshot(campaign_id: str):
        rec = store.get(campaign_id)
        with store.lock(campaign_id):
            return rec.snapshot()

    @app.post("/campaigns/{campaign_id}/observations")
    def submit_observations(campaign_id: str, req: SubmitObservationsRequest):
        with store.lock(campaign_id):
            rec = store.submit_observations(
                campaign_id,
                [it.model_dump() for it in req.observations],
                actor=req.actor,
            )
            return rec.snapshot()

    @app.post("/campaigns/{campaign_id}/next-batch")
    def next_batch(campaign_id: str):
        with store.lock(campaign_id):
            rec, batch, issued = store.next_batch(campaign_id)
            return {
                "campaign_id": campaign_id,
                "batch": batch,
                "newly_issued": issued,
                "status": rec.status,
            }

    @app.get("/campaigns/{campaign_id}/report")
    def campaign_report(campaign_id: str):
        rec = store.get(campaign_id)
        with store.lock(campaign_id):
            return rec.report()

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")
    else:

        @app.get("/", response_class=HTMLResponse)
        def index():
            return _FALLBACK_INDEX

    return app
