"""In-process simulation of the federated calibration protocol.

The server talks to clients only through serialized :class:`RoundEnvelope`
objects and keeps a transcript of everything on the wire. Replies are
collected in ascending client-id order regardless of execution order.
"""

from __future__ import annotations

import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import wire
from .client_stats import (
    ClientCgMessage,
    Estimator,
    client_cg_comm_efficient,
    client_cg_private,
    client_prior_message,
    DEFAULT_WILSON_Z,
)
from .domain import ClientDataset, FairnessSpec, Federation, validate_federation
from .optimizer import OptimizerConfig, OptimizerTrace, fair_opt_descent
from .privacy import DpConfig, Mechanism, Protocol, add_noise, client_rng, pac_accept, pair_variance
from .quantile import (
    DEFAULT_COMPRESSION,
    conformal_rank,
    fcp_quantile,
    fcp_quantile_sketch,
    is_vacuous,
    sketch_build,
)
from .scores import ClientScores, ScoreConfig, score_client
from .server_agg import CoverageGapResult, PriorEstimates, aggregate_priors, gamma_by_client, multi_label_cg, server_cg
from .wire import Kind, ProtocolTag, RoundEnvelope, SERVER_ID

log = logging.getLogger(__name__)


class FederationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProtocolChoice:
    default: Protocol = Protocol.COMM_EFFICIENT
    overrides: Mapping[int, Protocol] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "default", Protocol(self.default))
        object.__setattr__(self, "overrides", {int(k): Protocol(v) for k, v in dict(self.overrides).items()})

    def for_client(self, client_id: int) -> Protocol:
        return self.overrides.get(client_id, self.default)

    @classmethod
    def uniform(cls, protocol: Protocol | str) -> "ProtocolChoice":
        return cls(Protocol(protocol))


@dataclass(frozen=True)
class CalibrationSettings:
    alpha: float = 0.1
    estimator: Estimator = Estimator.INTERVAL
    tightened_lower: bool = True
    quantile_mode: str = "exact"
    compression: int = DEFAULT_COMPRESSION
    wilson_z: float = DEFAULT_WILSON_Z

    def __post_init__(self) -> None:
        object.__setattr__(self, "estimator", Estimator(self.estimator))
        if self.quantile_mode not in ("exact", "sketch"):
            raise ValueError(f"quantile_mode must be 'exact' or 'sketch', got {self.quantile_mode!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")


class SimulatedClient:
    """A client holding its data and scores; answers decoded requests."""

    def __init__(self, dataset: ClientDataset, scores: ClientScores, spec: FairnessSpec, dp: DpConfig | None = None,
                 wilson_z: float = DEFAULT_WILSON_Z, responsive: bool = True) -> None:
        self.dataset = dataset
        self.scores = scores
        self.spec = spec
        self.dp = dp or DpConfig()
        self.wilson_z = wilson_z
        self.responsive = responsive
        self._priors: PriorEstimates | None = None

    @property
    def client_id(self) -> int:
        return self.dataset.client_id

    def handle(self, env: RoundEnvelope) -> RoundEnvelope | None:
        if not self.responsive:
            return None
        reply_kind, payload = self._dispatch(env)
        if reply_kind is None:
            return None
        return RoundEnvelope(env.round_id, self.client_id, SERVER_ID, reply_kind, payload)

    def _dispatch(self, env: RoundEnvelope):
        if env.kind is Kind.PRIOR_REQUEST:
            return Kind.PRIOR_REPLY, wire.encode_prior_reply(client_prior_message(self.dataset, self.spec))
        if env.kind is Kind.PRIOR_BROADCAST:
            cols = wire.decode_prior_broadcast(env.payload)
            self._priors = PriorEstimates(cols.groups, cols.labels, cols.L, cols.U, cols.pi)
            return None, b""
        if env.kind is Kind.QUANTILE_REQUEST:
            mode, compression = wire.decode_quantile_request(env.payload)
            true_scores = self.scores.calib_true(self.dataset)
            max_score = self.scores.max_calib_score
            if mode is wire.QuantileMode.SKETCH:
                reply = wire.QuantileReply(self.dataset.n_k, max_score, sketch=sketch_build(true_scores, compression))
            else:
                reply = wire.QuantileReply(self.dataset.n_k, max_score, scores=np.sort(true_scores))
            return Kind.QUANTILE_REPLY, wire.encode_quantile_reply(reply)
        if env.kind in (Kind.CG_REQUEST, Kind.AUDIT_REQUEST):
            req = wire.decode_cg_request(env.payload)
            msg = self._coverage_message(req, env.round_id)
            reply = Kind.CG_REPLY if env.kind is Kind.CG_REQUEST else Kind.AUDIT_REPLY
            return reply, wire.encode_cg_reply(msg)
        raise FederationError(f"client {self.client_id}: unexpected request kind {env.kind.name}")

    def _coverage_message(self, req: wire.CgRequest, round_id: int) -> ClientCgMessage:
        calib = self.scores.calib
        if req.protocol is ProtocolTag.ENHANCED_PRIVACY:
            if self._priors is None:
                raise FederationError(f"client {self.client_id}: priors not received")
            msg = client_cg_private(self.dataset, calib, self.spec, req.lam, req.tilde_y, self._priors,
                                    req.estimator, req.tightened_lower, self.wilson_z, req.active_groups)
        else:
            msg = client_cg_comm_efficient(self.dataset, calib, self.spec, req.lam, req.tilde_y,
                                           req.estimator, req.tightened_lower, self.wilson_z)
        if self.dp.enabled:
            if self._priors is None:
                raise FederationError(f"client {self.client_id}: priors not received")
            rng = client_rng(self.dp.seed, self.client_id, round_id, req.tilde_y)
            msg = add_noise(msg, self.dp, self._priors, rng, req.active_groups)
        return msg


@dataclass
class RoundRecord:
    round_id: int
    lam: float
    cg: float
    per_label: list[CoverageGapResult]
    messages: int
    accepted: bool | None = None
    variance: float | None = None


class Server:
    """Single logical reducer driving a set of simulated clients."""

    def __init__(self, clients: Sequence[SimulatedClient], spec: FairnessSpec, settings: CalibrationSettings,
                 protocol: ProtocolChoice | None = None, dp: DpConfig | None = None, max_workers: int = 1) -> None:
        if not clients:
            raise FederationError("no clients")
        self.clients = {c.client_id: c for c in sorted(clients, key=lambda c: c.client_id)}
        self.spec = spec
        self.settings = settings
        self.protocol = protocol or ProtocolChoice()
        self.dp = dp or DpConfig()
        self.max_workers = max_workers
        self.transcript: list[RoundEnvelope] = []
        self.bytes_up: dict[int, int] = {k: 0 for k in self.clients}
        self.bytes_down: dict[int, int] = {k: 0 for k in self.clients}
        self.priors: PriorEstimates | None = None
        self.n_by_client: dict[int, int] = {}
        self.rounds: list[RoundRecord] = []
        self._round = 0

    @property
    def client_ids(self) -> tuple[int, ...]:
        return tuple(self.clients)

    def _next_round(self) -> int:
        self._round += 1
        return self._round

    def _exchange(self, requests: Mapping[int, RoundEnvelope], expect_reply: bool = True) -> dict[int, RoundEnvelope]:
        ids = sorted(requests)
        for k in ids:
            self.transcript.append(requests[k])
            self.bytes_down[k] += wire.account_bytes(requests[k])
        # Clients see only the decoded bytes, never server objects.
        calls = [(self.clients[k], RoundEnvelope.from_bytes(requests[k].to_bytes())) for k in ids]
        if self.max_workers > 1:
            with ThreadPoolExecutor(self.max_workers) as pool:
                replies = list(pool.map(lambda cr: cr[0].handle(cr[1]), calls))
        else:
            replies = [client.handle(env) for client, env in calls]
        if not expect_reply:
            return {}
        missing = [k for k, r in zip(ids, replies) if r is None]
        if missing:
            raise FederationError(f"no reply from clients {missing}; aborting run")
        out = {}
        for k, reply in zip(ids, replies):
            reply = RoundEnvelope.from_bytes(reply.to_bytes())
            self.transcript.append(reply)
            self.bytes_up[k] += wire.account_bytes(reply)
            out[k] = reply
        return out

    def _broadcast(self, kind: Kind, payload: bytes, round_id: int) -> dict[int, RoundEnvelope]:
        return {k: RoundEnvelope(round_id, SERVER_ID, k, kind, payload) for k in self.clients}

    def run_quantile_round(self) -> tuple[float, float, dict]:
        """Returns ``(lambda_0, lambda_max, info)``."""
        s = self.settings
        mode = wire.QuantileMode.SKETCH if s.quantile_mode == "sketch" else wire.QuantileMode.EXACT
        rid = self._next_round()
        replies = self._exchange(self._broadcast(Kind.QUANTILE_REQUEST, wire.encode_quantile_request(mode, s.compression), rid))
        decoded = {k: wire.decode_quantile_reply(r.payload) for k, r in replies.items()}
        ids = sorted(decoded)
        n_total = sum(decoded[k].n_k for k in ids)
        if mode is wire.QuantileMode.SKETCH:
            lambda_0 = fcp_quantile_sketch([decoded[k].sketch for k in ids], s.alpha)
        else:
            lambda_0 = fcp_quantile([decoded[k].scores for k in ids], s.alpha)
        lambda_max = max(max(d.max_candidate_score for d in decoded.values()), lambda_0)
        info = {
            "N": n_total,
            "K": len(ids),
            "rank": conformal_rank(n_total, len(ids), s.alpha),
            "vacuous_coverage": is_vacuous(n_total, len(ids), s.alpha),
            "sketch_loosened_guarantee": mode is wire.QuantileMode.SKETCH,
            "guarantee_interval": [1 - s.alpha, min(1.0, 1 - s.alpha + len(ids) / (n_total + len(ids)))],
        }
        return lambda_0, lambda_max, info

    def run_prior_round(self) -> PriorEstimates:
        rid = self._next_round()
        replies = self._exchange(self._broadcast(Kind.PRIOR_REQUEST, b"", rid))
        messages = {k: wire.decode_prior_reply(r.payload) for k, r in replies.items()}
        self.n_by_client = {k: m.n_k for k, m in messages.items()}
        self.priors = aggregate_priors(messages, self.spec.groups, self.spec.positive_labels)
        if self._needs_priors_on_clients():
            p = self.priors
            payload = wire.encode_prior_broadcast(p.groups, p.labels, p.L, p.U, p.pi)
            self._exchange(self._broadcast(Kind.PRIOR_BROADCAST, payload, rid), expect_reply=False)
        return self.priors

    def _needs_priors_on_clients(self) -> bool:
        return self.dp.enabled or any(self.protocol.for_client(k) is Protocol.ENHANCED_PRIVACY for k in self.clients)

    def coverage_gap(self, lam: float, audit: bool = False) -> RoundRecord:
        """One round: a request per client per positive label, reduced per label."""
        if self.priors is None:
            raise FederationError("prior round has not run")
        rid = self._next_round()
        kind = Kind.AUDIT_REQUEST if audit else Kind.CG_REQUEST
        per_label = []
        messages = 0
        worst_accept: list[bool] = []
        variances: list[float] = []
        for tilde_y in self.spec.positive_labels:
            active = self.priors.active_groups(tilde_y)
            requests = {}
            for k in self.clients:
                tag = ProtocolTag.ENHANCED_PRIVACY if self.protocol.for_client(k) is Protocol.ENHANCED_PRIVACY else ProtocolTag.COMM_EFFICIENT
                req = wire.CgRequest(float(lam), tilde_y, tag, self.settings.estimator, self.settings.tightened_lower, active)
                requests[k] = RoundEnvelope(rid, SERVER_ID, k, kind, wire.encode_cg_request(req))
            replies = self._exchange(requests)
            messages += 2 * len(replies)
            decoded = {k: wire.decode_cg_reply(r.payload) for k, r in replies.items()}
            result = server_cg(decoded, self.priors, self.client_ids, self.n_by_client)
            per_label.append(result)
            if self.dp.enabled and result.argmax_pair is not None:
                gamma = gamma_by_client(self.n_by_client)
                var = pair_variance(decoded, gamma, result.groups, self.priors.groups, result.argmax_pair, self.dp.mechanism)
                variances.append(var)
                worst_accept.append(self._accept(result.cg, var))
        cg = multi_label_cg(per_label)
        accepted = all(worst_accept) if self.dp.enabled else cg <= self.spec.closeness
        record = RoundRecord(rid, float(lam), cg, per_label, messages, accepted, max(variances) if variances else None)
        self.rounds.append(record)
        return record

    def _accept(self, cg_est: float, variance: float) -> bool:
        if self.dp.mechanism is Mechanism.GAUSSIAN:
            return pac_accept(cg_est, self.spec.closeness, variance, self.dp.beta)
        return cg_est <= self.spec.closeness

    def bytes_by_client(self) -> dict[int, dict[str, int]]:
        return {k: {"up": self.bytes_up[k], "down": self.bytes_down[k]} for k in self.clients}

    def dump_transcript(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for env in self.transcript:
                fh.write(env.to_json() + "\n")


def build_clients(datasets: Sequence[ClientDataset], spec: FairnessSpec, score_config: ScoreConfig,
                  dp: DpConfig | None = None, wilson_z: float = DEFAULT_WILSON_Z,
                  unresponsive: Iterable[int] = ()) -> list[SimulatedClient]:
    down = set(unresponsive)
    return [
        SimulatedClient(ds, score_client(ds, score_config), spec, dp, wilson_z, responsive=ds.client_id not in down)
        for ds in datasets
    ]


def run_prior_round(clients: Sequence[SimulatedClient], spec: FairnessSpec) -> PriorEstimates:
    server = Server(clients, spec, CalibrationSettings())
    return server.run_prior_round()


@dataclass
class RunReport:
    lambda_0: float
    lambda_max: float
    lambda_opt: float
    feasible: bool
    trace: OptimizerTrace
    priors: PriorEstimates
    bytes_by_client: dict[int, dict[str, int]]
    messages_per_round: list[int]
    quantile_info: dict
    flags: dict
    rounds: list[RoundRecord] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "lambda_0": self.lambda_0,
            "lambda_max": self.lambda_max,
            "lambda_opt": self.lambda_opt,
            "feasible": self.feasible,
            "trace": self.trace.to_dict(),
            "priors": self.priors.to_dict(),
            "bytes_by_client": {str(k): v for k, v in self.bytes_by_client.items()},
            "messages_per_round": self.messages_per_round,
            "quantile": self.quantile_info,
            "flags": self.flags,
        }


def run_fairopt(
    datasets: Sequence[ClientDataset] | Federation,
    spec: FairnessSpec,
    score_config: ScoreConfig,
    opt_config: OptimizerConfig | None = None,
    protocol: ProtocolChoice | None = None,
    dp: DpConfig | None = None,
    settings: CalibrationSettings | None = None,
    server: Server | None = None,
) -> RunReport:
    """Calibrate, collect priors, then search for the smallest fair threshold."""
    settings = settings or CalibrationSettings()
    dp = dp or DpConfig()
    opt_config = opt_config or OptimizerConfig()
    if server is None:
        if isinstance(datasets, Federation):
            datasets = datasets.clients
        report = validate_federation(datasets, spec)
        for w in report.warnings:
            log.warning(w)
        clients = build_clients(datasets, spec, score_config, dp, settings.wilson_z)
        server = Server(clients, spec, settings, protocol, dp)
    lambda_0, lambda_max, qinfo = server.run_quantile_round()
    if opt_config.lambda_max is not None:
        lambda_max = max(opt_config.lambda_max, lambda_0)
    opt_config = replace(opt_config, lambda_max=lambda_max)
    priors = server.run_prior_round()

    def oracle(lam: float) -> float:
        return server.coverage_gap(lam).cg

    lambda_opt, trace = fair_opt_descent(oracle, lambda_0, spec.closeness, opt_config)
    degenerate = [
        {"group": g, "label": y} for g in priors.groups for y in priors.labels if priors.is_degenerate(g, y)
    ]
    flags = {
        "vacuous_coverage": qinfo["vacuous_coverage"],
        "sketch_loosened_guarantee": qinfo["sketch_loosened_guarantee"],
        "degenerate_pairs": degenerate,
        "n_disclosed_to_server": True,
        "privacy_spend_epsilon": (len(server.rounds) * dp.epsilon) if dp.enabled else 0.0,
        "pac_variance": "arg-max pair" if dp.mechanism is Mechanism.GAUSSIAN else None,
    }
    return RunReport(
        lambda_0=lambda_0,
        lambda_max=lambda_max,
        lambda_opt=lambda_opt,
        feasible=trace.feasible,
        trace=trace,
        priors=priors,
        bytes_by_client=server.bytes_by_client(),
        messages_per_round=[r.messages for r in server.rounds],
        quantile_info=qinfo,
        flags=flags,
        rounds=list(server.rounds),
    )


class AuditMode(str, enum.Enum):
    GLOBAL = "global"
    SUBSET = "subset"
    MARGINAL = "marginal"


@dataclass
class AuditReport:
    lam: float
    cg: float
    passed: bool
    participants: tuple[int, ...]
    mode: AuditMode
    per_label: list[CoverageGapResult]
    closeness: float
    variance: float | None = None
    caveats: tuple[str, ...] = ()

    def contributions(self) -> dict[str, dict]:
        out = {}
        for res in self.per_label:
            entry: dict = {"cg": res.cg, "path": res.path.value, "groups": list(res.groups)}
            if res.lower_cov is not None:
                entry["lower_cov"] = res.lower_cov.tolist()
                entry["upper_cov"] = res.upper_cov.tolist()
            if res.pw is not None:
                entry["pw"] = res.pw.tolist()
            out[str(res.tilde_y)] = entry
        return out

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "cg": self.cg,
            "pass": self.passed,
            "participants": list(self.participants),
            "mode": self.mode.value if self.mode is not AuditMode.MARGINAL else f"marginal({self.participants[0]})",
            "closeness": self.closeness,
            "variance": self.variance,
            "per_label": self.contributions(),
            "caveats": list(self.caveats),
        }


def audit(
    federation: Federation | Sequence[ClientDataset],
    spec: FairnessSpec,
    lam: float,
    score_config: ScoreConfig,
    subset: Iterable[int] | None = None,
    dp: DpConfig | None = None,
    settings: CalibrationSettings | None = None,
    protocol: ProtocolChoice | None = None,
) -> AuditReport:
    """Check whether a fixed threshold meets the closeness criterion.

    Runs one prior round and one coverage-gap round over ``subset`` only; the
    verdict applies to the mixture of the participating clients.
    """
    datasets = federation.clients if isinstance(federation, Federation) else tuple(federation)
    all_ids = tuple(ds.client_id for ds in datasets)
    chosen = tuple(sorted(set(all_ids if subset is None else subset)))
    if not chosen:
        raise FederationError("audit needs at least one participating client")
    unknown = set(chosen) - set(all_ids)
    if unknown:
        raise FederationError(f"unknown clients {sorted(unknown)}")
    dp = dp or DpConfig()
    settings = settings or CalibrationSettings()
    members = [ds for ds in datasets if ds.client_id in chosen]
    server = Server(build_clients(members, spec, score_config, dp, settings.wilson_z), spec, settings, protocol, dp)
    server.run_prior_round()
    record = server.coverage_gap(lam, audit=True)
    if len(chosen) == len(all_ids):
        mode = AuditMode.GLOBAL
    elif len(chosen) == 1:
        mode = AuditMode.MARGINAL
    else:
        mode = AuditMode.SUBSET
    caveats = []
    if mode is not AuditMode.GLOBAL:
        caveats.append("guarantee holds for the mixture of participating clients only")
    caveats.append("participants are not required to have trained the audited predictor")
    return AuditReport(lam, record.cg, bool(record.accepted), chosen, mode, record.per_label, spec.closeness,
                       record.variance, tuple(caveats))
