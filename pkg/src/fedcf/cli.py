"""Command-line entry point: ``fedcf {gen,calibrate,optimize,audit,evaluate}``.

Settings come from an optional JSON config file; command-line flags override
it. Every command is deterministic given the config and ``--seed``.

Exit codes: 0 success (an infeasible search still counts), 1 runtime
failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .client_stats import Estimator
from .data_io import SyntheticConfig, generate_synthetic, load_federation, save_federation
from .domain import FairnessSpec, Federation, ValidationError
from .evaluation import evaluate
from .federation import CalibrationSettings, ProtocolChoice, Server, audit, build_clients, run_fairopt
from .optimizer import OptimizerConfig
from .privacy import DpConfig, Mechanism
from .scores import ScoreConfig, score_federation

log = logging.getLogger("fedcf")

SCHEMA_VERSION = 1

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


DEFAULTS: dict = {
    "alpha": 0.1,
    "fairness": {"metric": "equal_opportunity", "positive_labels": [0], "closeness": 0.1, "groups": None},
    "score": {"kind": "aps", "nu": 0.1, "k_reg": 1, "diffusion": 0.5},
    "estimator": "interval",
    "tightened_lower": True,
    "quantile_mode": "exact",
    "compression": 100,
    "optimizer": {"rounds": 50, "eta": None, "mu": 0.9, "lambda_max": None},
    "protocol": {"default": "comm_efficient", "overrides": {}},
    "dp": {"mechanism": "none", "epsilon": 1.0, "delta": 1e-5, "beta": 0.95},
    "synthetic": {},
    "paths": {"data": None, "transcript": None},
    "seed": 0,
}


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


@dataclass(frozen=True)
class RunConfig:
    """Resolved settings for one invocation."""

    raw: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def fairness_spec(self, num_groups: int) -> FairnessSpec:
        f = self.raw["fairness"]
        groups = f.get("groups") or list(range(num_groups))
        return FairnessSpec(f["metric"], tuple(groups), tuple(f["positive_labels"]), float(f["closeness"]))

    def score_config(self) -> ScoreConfig:
        s = self.raw["score"]
        return ScoreConfig(
            kind=s["kind"], nu=float(s["nu"]), k_reg=int(s["k_reg"]), diffusion=float(s["diffusion"]), seed=self.seed
        )

    def settings(self) -> CalibrationSettings:
        r = self.raw
        return CalibrationSettings(
            alpha=float(r["alpha"]),
            estimator=Estimator(r["estimator"]),
            tightened_lower=bool(r["tightened_lower"]),
            quantile_mode=r["quantile_mode"],
            compression=int(r["compression"]),
        )

    def optimizer(self) -> OptimizerConfig:
        o = self.raw["optimizer"]
        return OptimizerConfig(num_rounds=int(o["rounds"]), eta=o["eta"], mu=float(o["mu"]), lambda_max=o["lambda_max"])

    def protocol(self) -> ProtocolChoice:
        p = self.raw["protocol"]
        return ProtocolChoice(p["default"], {int(k): v for k, v in p.get("overrides", {}).items()})

    def dp(self) -> DpConfig:
        d = self.raw["dp"]
        return DpConfig(Mechanism(d["mechanism"]), float(d["epsilon"]), float(d["delta"]), float(d["beta"]), seed=self.seed)

    def synthetic(self) -> SyntheticConfig:
        s = dict(self.raw["synthetic"])
        for key in ("group_bias",):
            if s.get(key) is not None:
                s[key] = tuple(tuple(row) for row in s[key])
        for key in ("group_accuracy", "fractions", "group_weights"):
            if s.get(key) is not None:
                s[key] = tuple(s[key])
        s["seed"] = self.seed
        return SyntheticConfig(**s)

    def validate(self) -> None:
        alpha = float(self.raw["alpha"])
        c = float(self.raw["fairness"]["closeness"])
        if not 0.0 < alpha < 1.0:
            raise UsageError(f"alpha must lie in (0, 1), got {alpha}")
        if not 0.0 < c <= 1.0:
            raise UsageError(f"closeness must lie in (0, 1], got {c}")
        # Construct every sub-config once so bad values surface as usage errors.
        self.score_config()
        self.settings()
        self.optimizer()
        self.protocol()
        self.dp()


def _common_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="JSON config file")
    parser.add_argument("--seed", type=int, default=default, help="seed (overrides config)")
    parser.add_argument("--out", default=default, help="output path (stdout when omitted)")
    parser.add_argument("--force", action="store_true", default=default if suppress else False, help="overwrite --out")
    parser.add_argument("-v", "--verbose", action="store_true", default=default if suppress else False)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="federation CSV written by `gen`")
    p.add_argument("--alpha", type=float)
    p.add_argument("--metric", choices=["demographic_parity", "equal_opportunity", "predictive_equality", "dp", "eo", "pe"])
    p.add_argument("--positive-labels", help="comma-separated label ids")
    p.add_argument("--closeness", type=float)
    p.add_argument("--estimator", choices=[e.value for e in Estimator])
    p.add_argument("--quantile-mode", choices=["exact", "sketch"])
    p.add_argument("--protocol", choices=["comm_efficient", "enhanced_privacy"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedcf", description="Federated conformal fairness toolkit")
    _common_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="write a synthetic federation to CSV")
    _common_flags(gen, suppress=True)
    gen.add_argument("--clients", type=int, required=True)
    gen.add_argument("--classes", type=int, required=True)
    gen.add_argument("--groups", type=int, required=True)
    gen.add_argument("--examples-per-client", type=int)

    cal = sub.add_parser("calibrate", help="compute lambda_0 and check test coverage")
    _common_flags(cal, suppress=True)
    _add_run_flags(cal)

    opt = sub.add_parser("optimize", help="search for the smallest fair threshold")
    _common_flags(opt, suppress=True)
    _add_run_flags(opt)
    opt.add_argument("--rounds", type=int)
    opt.add_argument("--transcript", help="write the message transcript (JSON lines)")

    aud = sub.add_parser("audit", help="check a fixed threshold over a subset of clients")
    _common_flags(aud, suppress=True)
    _add_run_flags(aud)
    aud.add_argument("--lambda", dest="lam", type=float, required=True)
    aud.add_argument("--clients", help="comma-separated participating client ids")
    aud.add_argument("--dp", choices=[m.value for m in Mechanism], help="noise mechanism for the audit")

    ev = sub.add_parser("evaluate", help="test-set metrics at a threshold")
    _common_flags(ev, suppress=True)
    _add_run_flags(ev)
    ev.add_argument("--lambda", dest="lam", required=True, help="threshold value, or 'max'")
    return parser


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def resolve_config(args: argparse.Namespace) -> RunConfig:
    raw = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                raw = _merge(raw, json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    if args.seed is not None:
        raw["seed"] = args.seed
    flag_map = {
        "alpha": ("alpha",),
        "metric": ("fairness", "metric"),
        "closeness": ("fairness", "closeness"),
        "estimator": ("estimator",),
        "quantile_mode": ("quantile_mode",),
        "data": ("paths", "data"),
        "rounds": ("optimizer", "rounds"),
        "transcript": ("paths", "transcript"),
    }
    for attr, keys in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            target = raw
            for k in keys[:-1]:
                target = target[k]
            target[keys[-1]] = value
    if getattr(args, "positive_labels", None):
        raw["fairness"]["positive_labels"] = _int_list(args.positive_labels)
    if getattr(args, "protocol", None):
        raw["protocol"] = {"default": args.protocol, "overrides": {}}
    if getattr(args, "dp", None):
        raw["dp"]["mechanism"] = args.dp
    if args.command == "gen":
        raw["synthetic"].update(
            num_clients=args.clients, num_classes=args.classes, num_groups=args.groups,
        )
        if args.examples_per_client is not None:
            raw["synthetic"]["examples_per_client"] = args.examples_per_client
    config = RunConfig(raw)
    try:
        config.validate()
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    return config


def _check_out(args: argparse.Namespace) -> Path | None:
    if not args.out:
        return None
    out = Path(args.out)
    if out.exists() and not args.force:
        raise UsageError(f"{out} exists; pass --force to overwrite")
    return out


def _emit(payload: dict, out: Path | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True, default=_json_default)
    if out is None:
        print(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n", encoding="utf-8")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _load_data(config: RunConfig) -> Federation:
    path = config.raw["paths"]["data"]
    if path is None:
        return generate_synthetic(config.synthetic())
    return load_federation(path)


def _pooled_test(fed: Federation, score_config: ScoreConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    scores = score_federation(fed.clients, score_config)
    mats, labels, groups = [], [], []
    for ds in fed.clients:
        if not ds.test:
            continue
        mats.append(scores[ds.client_id].test)
        labels.append(ds.test_arrays.labels)
        groups.append(ds.test_arrays.groups)
    if not mats:
        raise ValidationError("federation has no test examples")
    return np.vstack(mats), np.concatenate(labels), np.concatenate(groups)


def cmd_gen(args, config: RunConfig) -> int:
    if not args.out:
        raise UsageError("gen requires --out")
    out = _check_out(args)
    fed = generate_synthetic(config.synthetic())
    save_federation(fed, out)
    log.info("wrote %d clients to %s", len(fed.clients), out)
    return EXIT_OK


def cmd_calibrate(args, config: RunConfig) -> dict:
    fed = _load_data(config)
    spec = config.fairness_spec(fed.num_groups)
    score_config = config.score_config()
    settings = config.settings()
    server = Server(build_clients(fed.clients, spec, score_config, None, settings.wilson_z), spec, settings)
    lambda_0, lambda_max, info = server.run_quantile_round()
    test_scores, test_labels, _ = _pooled_test(fed, score_config)
    true = test_scores[np.arange(len(test_labels)), test_labels]
    return {
        "schema_version": SCHEMA_VERSION,
        "config_digest": config.digest,
        "lambda_0": lambda_0,
        "lambda_max": lambda_max,
        "N": info["N"],
        "K": info["K"],
        "alpha": settings.alpha,
        "rank": info["rank"],
        "guarantee_interval": info["guarantee_interval"],
        "vacuous_coverage": info["vacuous_coverage"],
        "quantile_mode": settings.quantile_mode,
        "test_coverage": float(np.mean(true <= lambda_0)),
        "bytes_by_client": {str(k): v for k, v in server.bytes_by_client().items()},
    }


def cmd_optimize(args, config: RunConfig) -> dict:
    fed = _load_data(config)
    spec = config.fairness_spec(fed.num_groups)
    score_config = config.score_config()
    settings, dp, protocol = config.settings(), config.dp(), config.protocol()
    clients = build_clients(fed.clients, spec, score_config, dp, settings.wilson_z)
    server = Server(clients, spec, settings, protocol, dp)
    report = run_fairopt(fed, spec, score_config, config.optimizer(), protocol, dp, settings, server=server)
    transcript = config.raw["paths"].get("transcript")
    if transcript:
        server.dump_transcript(transcript)
    scores, labels, groups = _pooled_test(fed, score_config)
    body = report.to_dict()
    body.update(
        schema_version=SCHEMA_VERSION,
        config_digest=config.digest,
        eval={
            "lambda_0": evaluate(scores, labels, groups, report.lambda_0, spec).to_dict(),
            "lambda_opt": evaluate(scores, labels, groups, report.lambda_opt, spec).to_dict(),
        },
    )
    return body


def cmd_audit(args, config: RunConfig) -> dict:
    fed = _load_data(config)
    spec = config.fairness_spec(fed.num_groups)
    subset = _int_list(args.clients) if args.clients else None
    rep = audit(fed, spec, args.lam, config.score_config(), subset, config.dp(), config.settings(), config.protocol())
    body = rep.to_dict()
    body.update(schema_version=SCHEMA_VERSION, config_digest=config.digest, dp_mechanism=config.dp().mechanism.value)
    return body


def cmd_evaluate(args, config: RunConfig) -> dict:
    fed = _load_data(config)
    spec = config.fairness_spec(fed.num_groups)
    score_config = config.score_config()
    scores, labels, groups = _pooled_test(fed, score_config)
    if args.lam == "max":
        lam = float(scores.max())
    else:
        try:
            lam = float(args.lam)
        except ValueError as exc:
            raise UsageError(f"--lambda must be a number or 'max', got {args.lam!r}") from exc
    body = evaluate(scores, labels, groups, lam, spec).to_dict()
    body.update(schema_version=SCHEMA_VERSION, config_digest=config.digest)
    return body


COMMANDS = {
    "calibrate": cmd_calibrate,
    "optimize": cmd_optimize,
    "audit": cmd_audit,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on bad usage
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        if args.command == "gen":
            return cmd_gen(args, config)
        out = _check_out(args)
    except (UsageError, ValidationError) as exc:
        print(f"fedcf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        payload = COMMANDS[args.command](args, config)
    except UsageError as exc:
        print(f"fedcf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 1
        log.debug("runtime failure", exc_info=True)
        print(f"fedcf: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    _emit(payload, out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
