"""Command-line experiment runner.

Configuration is a flat ``key = value`` file with dotted keys; ``--set``
overrides individual keys and ``--seed`` overrides ``seed``. Every key has a
default, so an empty config is the canonical desk run. Unknown keys are
rejected.

Exit codes: 0 success, 1 a verification assertion failed, 2 configuration
error, 3 training diverged.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import verify as V
from .compressor import Level
from .controller import AccordionConfig
from .errors import ConfigError, DivergenceError
from .model import Dataset, Model, gen_least_squares, gen_two_gaussian, init_model
from .simulator import CSV_HEADER, RunResult, TrainConfig, run

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_ASSERT, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

# canonical desk run; cadence of 3 epochs over 30 keeps the 10-of-300 proportion
DEFAULTS: dict[str, object] = {
    "seed": 0,
    "label": "",
    "model.kind": "mlp",
    "model.hidden": 16,
    "model.outputs": 2,
    "model.lam": 0.0,
    "data.generator": "two-gaussian",
    "data.n": 4096,
    "data.d": 20,
    "data.mu_nnz": 5,
    "data.mu_value": 4.0,
    "data.sigma": 8.0,
    "data.noise": 0.1,
    "train.workers": 4,
    "train.epochs": 30,
    "train.batch": 32,
    "train.lr": 0.1,
    "train.warmup": 5,
    "train.decay_epochs": (15, 25),
    "train.decay_factor": 10.0,
    "train.momentum": 0.9,
    "train.nesterov": True,
    "train.reference_batch": 0,
    "schedule": "accordion",
    "compressor.scheme": "powersgd",
    "compressor.low.rank": 2,
    "compressor.high.rank": 1,
    "compressor.low.k": 0.99,
    "compressor.high.k": 0.25,
    "compressor.low.batch": 512,
    "compressor.high.batch": 4096,
    "accordion.eta": 0.5,
    "accordion.period": 3,
    "accordion.monotone": True,
    "report.format": "csv",
}
SCHEDULES = ("accordion", "static-low", "static-high")
GENERATORS = ("two-gaussian", "least-squares")


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for key {key!r}") from None
    return raw


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunSpec:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, pairs) -> "RunSpec":
        vals = dict(self.values)
        for key, raw in pairs:
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            vals[key] = _parse_value(key, raw, DEFAULTS[key])
        spec = RunSpec(vals)
        spec.validate()
        return spec

    @classmethod
    def parse(cls, text: str) -> "RunSpec":
        pairs = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, raw = line.split("=", 1)
            pairs.append((key.strip(), raw))
        return cls().with_overrides(pairs)

    def serialize(self) -> str:
        return "".join(f"{k} = {_format_value(self.values[k])}\n" for k in sorted(self.values))

    def validate(self) -> None:
        v = self.values
        if v["schedule"] not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        if v["data.generator"] not in GENERATORS:
            raise ConfigError(f"data.generator must be one of {GENERATORS}")
        if v["report.format"] not in ("csv", "json"):
            raise ConfigError("report.format must be csv or json")
        self.levels()

    def levels(self) -> tuple[Level, Level]:
        scheme = self.values["compressor.scheme"]
        key = {"powersgd": "rank", "topk": "k", "batchsize": "batch"}.get(scheme)
        if scheme == "dense":
            return Level("dense"), Level("dense")
        if key is None:
            raise ConfigError(f"unknown compressor.scheme {scheme!r}")
        return Level(scheme, self.values[f"compressor.low.{key}"]), Level(scheme, self.values[f"compressor.high.{key}"])

    def data_key(self) -> tuple:
        return tuple(sorted((k, v) for k, v in self.values.items() if k.startswith("data.") or k == "seed"))

    def train_config(self) -> TrainConfig:
        v = self.values
        low, high = self.levels()
        acc = static = None
        if v["schedule"] == "accordion":
            if low == high:
                raise ConfigError("accordion needs two distinct levels")
            acc = AccordionConfig(
                level_low=low,
                level_high=high,
                eta=v["accordion.eta"],
                period_epochs=v["accordion.period"],
                mode="batchsize" if low.scheme == "batchsize" else "compression",
                batch_monotone_increase=v["accordion.monotone"],
            )
        else:
            static = low if v["schedule"] == "static-low" else high
        return TrainConfig(
            workers=v["train.workers"],
            epochs=v["train.epochs"],
            batch_per_worker=v["train.batch"],
            base_lr=v["train.lr"],
            warmup_epochs=v["train.warmup"],
            decay_epochs=v["train.decay_epochs"],
            decay_factor=v["train.decay_factor"],
            momentum=v["train.momentum"],
            nesterov=v["train.nesterov"],
            accordion=acc,
            static_level=static,
            seed=v["seed"],
            reference_batch=v["train.reference_batch"] or None,
        )

    def build(self):
        """Return ``(model, dataset)`` for this spec."""
        v = self.values
        d, seed = v["data.d"], v["seed"]
        if v["data.generator"] == "two-gaussian":
            mu = np.zeros(d)
            mu[: v["data.mu_nnz"]] = v["data.mu_value"]
            data = gen_two_gaussian(mu, v["data.sigma"], v["data.n"], seed)
        else:
            data, _ = gen_least_squares(d, v["data.n"], v["data.noise"], seed, outputs=v["model.outputs"])
        model = init_model(v["model.kind"], d, seed, hidden_width=v["model.hidden"], outputs=v["model.outputs"], lam=v["model.lam"])
        return model, data


def load_spec(config_path=None, overrides=(), seed=None) -> RunSpec:
    text = Path(config_path).read_text() if config_path else ""
    pairs = list(overrides)
    if seed is not None:
        pairs.append(("seed", str(seed)))
    return RunSpec.parse(text).with_overrides(pairs)


def train_spec(spec: RunSpec, keep_checkpoints: bool = False) -> RunResult:
    model, data = spec.build()
    return run(spec.train_config(), model, data, keep_checkpoints=keep_checkpoints)


def metrics_csv(result: RunResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in result.metrics:
        writer.writerow(row.csv_fields())
    return buf.getvalue()


def summary(spec: RunSpec, result: RunResult) -> dict:
    last = result.metrics[-1]
    return {
        "label": spec["label"],
        "final_metric": last.eval_metric,
        "final_loss": last.train_loss,
        "total_floats": last.floats_cumulative,
        "level_trace": [r.levels for r in result.metrics],
        "seed": spec["seed"],
    }


def cmd_train(spec: RunSpec, out: Path | None = None) -> int:
    result = train_spec(spec)
    text = metrics_csv(result)
    info = summary(spec, result)
    if out is None:
        sys.stdout.write(text)
        print(json.dumps(info), file=sys.stderr)
    else:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(text)
        (out / "summary.json").write_text(json.dumps(info, indent=2) + "\n")
    return EXIT_OK


def compare(specs: list[RunSpec]) -> list[dict]:
    """Train every spec and tabulate final metric and communication against the first."""
    if not specs:
        raise ConfigError("nothing to compare")
    key = specs[0].data_key()
    for s in specs[1:]:
        if s.data_key() != key:
            raise ConfigError("compared runs must share data settings and seed")
    rows = []
    for i, s in enumerate(specs):
        info = summary(s, train_spec(s))
        rows.append(
            {
                "label": s["label"] or f"{s['schedule']}:{s['compressor.scheme']}",
                "final_metric": info["final_metric"],
                "total_floats": info["total_floats"],
            }
        )
    base = rows[0]["total_floats"]
    for r in rows:
        r["ratio"] = r["total_floats"] / base
    return rows


def format_table(rows: list[dict], fmt: str) -> str:
    if fmt == "json":
        return json.dumps(rows, indent=2) + "\n"
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["label", "final_metric", "total_floats", "ratio"], lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def cmd_compare(specs: list[RunSpec], out: Path | None = None) -> int:
    text = format_table(compare(specs), specs[0]["report.format"])
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text)
    return EXIT_OK


# -- verification -----------------------------------------------------------

VERIFY_DEFAULTS: dict[str, dict[str, object]] = {
    "lemma": {"dim": 20, "k1": 3, "k2": 3, "lam": 0.1, "n": 1000, "trials": 100, "instances": 100,
              "sigmas": "1e-6,1e-5,1e-4", "seed": 0},
    "overlap": {"fixture": "lasso", "dim": 100, "k1": 5, "k2": 5, "fraction": 0.1, "count": 200,
                "sigma_ratio": 0.05, "lam": 1.0, "seed": 0},
    "hessian": {"fixture": "quadratic", "k": 2, "seed": 0},
    "trace": {"window": 3, "eta": 0.5, "seed": 0},
}


def _verify_params(which: str, overrides) -> dict:
    if which not in VERIFY_DEFAULTS:
        raise ConfigError(f"unknown verification {which!r}; choose from {sorted(VERIFY_DEFAULTS)}")
    params = dict(VERIFY_DEFAULTS[which])
    for key, raw in overrides:
        if key not in params:
            raise ConfigError(f"unknown key {key!r} for verify {which}")
        params[key] = _parse_value(key, raw, params[key])
    return params


def lasso_overlap_instance(dim: int, k1: int, k2: int, sigma_ratio: float, seed: int, lam: float = 1.0) -> V.LemmaParams:
    """A sparse LASSO instance in the small-noise regime, with disjoint supports for mu and w.

    With small sigma the expected gradient on supp(w) is about ``lam * sign(w)``,
    so ``lam`` must stand clear of the per-sample noise for the support to show.
    """
    rng = np.random.default_rng([seed, 0x0FE])
    support = rng.choice(dim, k1 + k2, replace=False)
    mu = np.zeros(dim)
    w = np.zeros(dim)
    mu[support[:k1]] = rng.uniform(1.0, 2.0, k1) * rng.choice([-1.0, 1.0], k1)
    w[support[k1:]] = rng.uniform(1.0, 2.0, k2) * rng.choice([-1.0, 1.0], k2)
    return V.LemmaParams(mu=mu, w=w, lam=lam, sigma=sigma_ratio * float(np.linalg.norm(mu)))


def verify_lemma(p: dict) -> dict:
    rng = np.random.default_rng([p["seed"], 0x1E3])
    sizes_ok = True
    for _ in range(p["instances"]):
        inst = V.random_sparse_instance(p["dim"], p["k1"], p["k2"], rng, lam=p["lam"])
        g = V.expected_lasso_grad(inst)
        allowed = (inst.mu != 0) | (inst.w != 0)
        sizes_ok &= bool(np.count_nonzero(g) <= p["k1"] + p["k2"] and not np.any((g != 0) & ~allowed))
    base = V.random_sparse_instance(p["dim"], p["k1"], p["k2"], np.random.default_rng([p["seed"], 7]), lam=p["lam"])
    sweep = []
    checks = {"support_size <= k1 + k2 on all instances": sizes_ok}
    for s in (float(x) for x in str(p["sigmas"]).split(",")):
        inst = V.LemmaParams(base.mu, base.w, base.lam, s, n=p["n"], trials=p["trials"])
        rep = V.lemma_montecarlo(inst, seed=p["seed"])
        sweep.append({"sigma": s, **rep.to_dict()})
        for name, ok in rep.checks().items():
            checks[f"sigma={s:g}: {name}"] = ok
    return {"checks": checks, "sweep": sweep}


def verify_overlap(p: dict) -> dict:
    if p["fixture"] == "identical":
        g = np.random.default_rng(p["seed"]).standard_normal(p["dim"])
        value = V.topk_overlap([g] * 3, p["fraction"])
        return {"overlap": value, "checks": {"identical gradients overlap == 1": value == 1.0}}
    inst = lasso_overlap_instance(p["dim"], p["k1"], p["k2"], p["sigma_ratio"], p["seed"], p["lam"])
    grads = V.sample_lasso_grads(inst, p["count"], np.random.default_rng([p["seed"], 0x0F1]))
    value = V.topk_overlap(list(grads), p["fraction"], seed=p["seed"])
    return {"overlap": value, "sigma": inst.sigma, "checks": {"mean top-K overlap >= 0.9": value >= 0.9}}


def verify_hessian(p: dict) -> dict:
    if p["fixture"] != "quadratic":
        raise ConfigError("verify hessian supports fixture=quadratic")
    # least squares with X^T X / n = diag(3, 1)
    data = Dataset(np.array([[np.sqrt(6.0), 0.0], [0.0, np.sqrt(2.0)]]), np.zeros(2))
    model = Model("least-squares", {"W": np.array([[0.3, -0.2]])})
    rep = V.hessian_top_eigs(model, data, k=p["k"], seed=p["seed"])[0]
    sym = V.hvp_symmetry_error(V.make_hvp(model, data.features, data.labels), 2, seed=p["seed"])
    expected = [3.0, 1.0][: p["k"]]
    ok = all(abs(a - b) <= 1e-4 for a, b in zip(rep.eigenvalues, expected))
    return {
        "eigenvalues": rep.eigenvalues,
        "converged": rep.converged,
        "symmetry_error": sym,
        "checks": {"eigenvalues match [3, 1]": ok, "hvp symmetry <= 1e-4": sym <= 1e-4},
    }


def required_windows(cfg: TrainConfig, window: int) -> set[int]:
    need = set(range(0, min(cfg.warmup_epochs, cfg.epochs - 1) + 1))
    for d in cfg.decay_epochs:
        need |= set(range(d, min(cfg.epochs - 1, d + window) + 1))
    return need


def critical_regime_traces(spec: RunSpec, window: int, eta: float, seed: int = 0) -> dict:
    """Hessian and gradient-norm critical-regime flags on a run, with the expected windows."""
    model, data = spec.build()
    cfg = spec.train_config()
    result = run(cfg, model, data, keep_checkpoints=True)
    # value for epoch e is measured on the parameters entering epoch e
    entering = [model] + result.checkpoints[:-1]
    eigs = [r.eigenvalues[0] for r in V.hessian_top_eigs(model, data, 1, entering, iters=500, tol=1e-7, seed=seed)]
    norms = V.full_gradient_norms(entering, data)
    need = required_windows(cfg, window)
    hess_flags = V.critical_trace(eigs, window, eta)
    grad_flags = V.critical_trace(norms, window, eta)
    sym = V.hvp_symmetry_error(V.make_hvp(result.model, data.features, data.labels), model.num_params(), seed=seed)
    return {
        "required": sorted(need),
        "hessian_top_eig": eigs,
        "grad_norm": norms,
        "hessian_flags": sorted(hess_flags),
        "grad_flags": sorted(grad_flags),
        "hessian_missing": sorted(need - hess_flags),
        "grad_missing": sorted(need - grad_flags),
        "symmetry_error": sym,
        "decay_levels": {d: result.metrics[d].levels for d in cfg.decay_epochs},
    }


def verify_trace(p: dict, spec: RunSpec) -> dict:
    rep = critical_regime_traces(spec, p["window"], p["eta"], p["seed"])
    rep["checks"] = {
        "gradient-norm flags cover warmup and post-decay windows": not rep["grad_missing"],
        "hessian flags cover warmup and post-decay windows": not rep["hessian_missing"],
        "hvp symmetry <= 1e-4": rep["symmetry_error"] <= 1e-4,
    }
    return rep


def cmd_verify(which: str, overrides=(), spec: RunSpec | None = None, out: Path | None = None) -> int:
    params = _verify_params(which, overrides)
    if which == "lemma":
        report = verify_lemma(params)
    elif which == "overlap":
        report = verify_overlap(params)
    elif which == "hessian":
        report = verify_hessian(params)
    else:
        report = verify_trace(params, spec or RunSpec())
    report["verification"] = which
    report["passed"] = all(report["checks"].values())
    text = json.dumps(report, indent=2, default=_json_default) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text)
    return EXIT_OK if report["passed"] else EXIT_ASSERT


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj)}")


# -- entry point ------------------------------------------------------------


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="accordion", description="Adaptive gradient-communication experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=Path, default=None)
        p.add_argument("--set", dest="overrides", type=_kv, action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("train", help="run one configuration and emit metrics")
    p.add_argument("--config", type=Path, default=None)
    common(p)

    p = sub.add_parser("compare", help="run several configurations on the same data")
    p.add_argument("--config", type=Path, action="append", default=[])
    p.add_argument("--variant", action="append", default=[], metavar="KEY=VALUE[,KEY=VALUE]",
                   help="overrides applied to the base config; one run per variant")
    common(p)

    p = sub.add_parser("verify", help="run a verification and report pass/fail")
    p.add_argument("which", choices=sorted(VERIFY_DEFAULTS))
    p.add_argument("--config", type=Path, default=None, help="run config for the trace verification")
    common(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            return cmd_train(load_spec(args.config, args.overrides, args.seed), args.out)
        if args.command == "compare":
            configs = args.config or [None]
            if args.variant:
                if len(configs) != 1:
                    raise ConfigError("--variant applies to a single base --config")
                specs = [
                    load_spec(configs[0], list(args.overrides) + [_kv(kv) for kv in var.split(",")], args.seed)
                    for var in args.variant
                ]
            else:
                specs = [load_spec(c, args.overrides, args.seed) for c in configs]
            return cmd_compare(specs, args.out)
        if args.which == "trace":
            return cmd_verify("trace", args.overrides, load_spec(args.config, [], args.seed), args.out)
        seed = [("seed", str(args.seed))] if args.seed is not None else []
        return cmd_verify(args.which, list(args.overrides) + seed, None, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
