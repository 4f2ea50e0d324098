"""Command-line driver: parse an INI experiment file, run a pipeline, write reports.

Exit codes: 0 success, 2 invalid configuration, 3 audit failure, 4 degenerate
decay fit, 5 output digests differ from a manifest given with ``--verify``.
"""
from __future__ import annotations

import argparse
import configparser
import io as _io
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import __version__
from .audit import audit
from .corrector import fit_corrector
from .coupling import DegenerateFitError, default_start_pairs, fit_decay, fm_distance_curve
from .io import sha256_file, write_csv, write_json
from .lil import (clt_check, heyde_scott_sums, lil_report, quadratic_variation_curve,
                  sigma2_green_kubo, sigma2_sn_over_n, sigma2_stationary, theta_from_partial_sums)
from .model import ModelSpec, ObservableSpec, as_states
from .oracle import (DiscreteKernel, discretize, embed_kernel_as_model, exact_chi,
                     exact_green_kubo, exact_sigma2, exact_stationary, kernel_observable,
                     load_kernel_csv, two_state_example)
from .parallel import set_threads
from .registry import builtin_model, builtin_names
from .rng import SeededStream
from .simulator import default_burn_in, simulate

log = logging.getLogger("ifslil")

COMMANDS = ("audit", "simulate", "decay", "sigma", "qvar", "lil", "oracle", "full")
KERNEL_MODELS = ("two-state-oracle", "kernel")
EXIT_OK, EXIT_CONFIG, EXIT_AUDIT, EXIT_DEGENERATE, EXIT_DIGEST = 0, 2, 3, 4, 5

# section -> key -> (type, default, constraint); "" means "not set"
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {"command": ("str", "full", COMMANDS), "seed": ("int", 0, ">=0"),
            "out": ("str", "out", None), "n": ("int", 1000, ">0"),
            "x0": ("floats", "", None), "replica": ("int", 0, ">=0")},
    "model": {"name": ("str", "exp-contraction", None), "epsilon": ("float?", "", ">=0"),
              "kernel_csv": ("str", "", None), "states": ("floats", "", None)},
    "observable": {"name": ("str", "default", ("default", "zero", "constant", "identity", "vector")),
                   "values": ("floats", "", None), "constant": ("float", 0.0, None)},
    "audit": {"grid_points": ("int", 201, ">0"), "nodes": ("int", 64, ">0")},
    "decay": {"n_max": ("int", 40, ">0"), "replicas": ("int", 256, ">0"),
              "fm_n_max": ("int", 40, ">0"), "fm_replicas": ("int", 256, ">0")},
    "corrector": {"tol": ("float?", "", ">0"), "nodes": ("int", 65, ">0"),
                  "max_rows": ("int?", "", ">0")},
    "sigma": {"samples": ("int", 100000, ">0"), "n": ("int", 100000, ">0"),
              "replicas": ("int", 64, ">0"), "block": ("int", 128, ">0"),
              "lag_max": ("int?", "", ">0")},
    "qvar": {"n": ("int", 100000, ">0"), "replicas": ("int", 32, ">0"),
             "gamma": ("float", 1.0, ">0"), "vartheta": ("float", 1.0, ">0"),
             "empirical": ("bool", False, None)},
    "lil": {"n_max": ("int", 1048576, ">0"), "seeds": ("ints", "0,1,2,3,4,5,6,7", None),
            "path_nodes": ("int", 4096, ">0")},
    "clt": {"n": ("int", 10000, ">0"), "replicas": ("int", 1000, ">0")},
    "oracle": {"points": ("int", 200, ">0"), "t_nodes": ("int", 256, ">0")},
}


class ConfigError(ValueError):
    pass


def _parse(kind: str, raw: str, where: str):
    raw = raw.strip()
    try:
        if kind == "str":
            return raw
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in ("int?", "float?") and raw == "":
            return None
        if kind in ("floats", "ints"):
            if raw == "":
                return ()
            conv = int if kind == "ints" else float
            return tuple(conv(v) for v in raw.split(","))
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {kind}") from None
    raise ConfigError(f"{where}: unknown type {kind}")


def _render(kind: str, v) -> str:
    if v is None:
        return ""
    if kind == "bool":
        return "true" if v else "false"
    if kind in ("floats", "ints"):
        return ",".join(format(x, ".17g") if kind == "floats" else str(x) for x in v)
    if kind.startswith("float"):
        return format(float(v), ".17g")
    return str(v)


def _check(kind: str, v, rule, where: str) -> None:
    if v is None or rule is None:
        return
    if isinstance(rule, tuple):
        if v not in rule:
            raise ConfigError(f"{where}: {v!r} not one of {', '.join(rule)}")
        return
    vals = v if isinstance(v, tuple) else (v,)
    for x in vals:
        if rule == ">0" and not x > 0:
            raise ConfigError(f"{where}: must be positive, got {x}")
        if rule == ">=0" and not x >= 0:
            raise ConfigError(f"{where}: must be non-negative, got {x}")


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key: str):
        section, name = key.split(".")
        return self.values[section][name]

    def set(self, key: str, value) -> None:
        section, name = key.split(".")
        kind, _, rule = SCHEMA[section][name]
        _check(kind, value, rule, key)
        self.values[section][name] = value

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        for section in cp.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            for key in cp[section]:
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key {section}.{key}")
        values: dict[str, dict[str, Any]] = {}
        for section, keys in SCHEMA.items():
            values[section] = {}
            for key, (kind, default, rule) in keys.items():
                where = f"{section}.{key}"
                if cp.has_option(section, key):
                    v = _parse(kind, cp.get(section, key), where)
                else:
                    v = _parse(kind, default, where) if isinstance(default, str) else default
                _check(kind, v, rule, where)
                values[section][key] = v
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        return cls.from_text(text)

    def validate(self) -> None:
        name = self["model.name"]
        if name not in builtin_names() and name not in KERNEL_MODELS:
            raise ConfigError(f"model.name {name!r} unknown; known: "
                              f"{', '.join(builtin_names() + list(KERNEL_MODELS))}")
        if name == "kernel" and not self["model.kernel_csv"]:
            raise ConfigError("model.kernel_csv is required for model.name = kernel")
        if self["observable.name"] == "vector" and not self["observable.values"]:
            raise ConfigError("observable.values is required for observable.name = vector")
        if name == "kernel" and self["observable.name"] == "default" and not self["observable.values"]:
            raise ConfigError("a kernel model needs observable.values")
        if len(set(self["lil.seeds"])) != len(self["lil.seeds"]) or not self["lil.seeds"]:
            raise ConfigError("lil.seeds must be a non-empty list of distinct integers")
        if any(s < 0 for s in self["lil.seeds"]):
            raise ConfigError("lil.seeds must be non-negative")

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for section, keys in SCHEMA.items():
            cp[section] = {k: _render(kind, self.values[section][k]) for k, (kind, _, _) in keys.items()}
        buf = _io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {s: {k: (list(v) if isinstance(v, tuple) else v) for k, v in kv.items()}
                for s, kv in self.values.items()}


def _zero_observable() -> ObservableSpec:
    tiny = np.finfo(float).tiny
    return ObservableSpec(lambda x: np.zeros(np.asarray(x).shape[0]), tiny, tiny, name="zero")


@dataclass
class Experiment:
    model: ModelSpec
    obs: ObservableSpec
    kernel: Optional[DiscreteKernel] = None
    g_mean: Optional[float] = None


def build_experiment(cfg: ExperimentConfig) -> Experiment:
    name = cfg["model.name"]
    kernel = None
    g_mean = None
    if name in KERNEL_MODELS:
        if name == "two-state-oracle":
            kernel, g_default = two_state_example()
        else:
            states = cfg["model.states"] or None
            try:
                kernel = load_kernel_csv(cfg["model.kernel_csv"], states)
            except (OSError, ValueError) as exc:
                raise ConfigError(f"cannot load kernel: {exc}") from None
            g_default = None
        model = embed_kernel_as_model(kernel, name)
        vals = cfg["observable.values"] or g_default
        if cfg["observable.name"] in ("default", "vector"):
            g = np.asarray(vals, dtype=float)
            if g.size != kernel.size:
                raise ConfigError(f"observable.values has {g.size} entries, kernel has {kernel.size} states")
            obs = kernel_observable(kernel, g)
            # the exact stationary law is available, so centering is exact
            g_mean = float(exact_stationary(kernel) @ g)
        else:
            obs = _simple_observable(cfg, model)
    else:
        params = {} if cfg["model.epsilon"] is None else {"epsilon": cfg["model.epsilon"]}
        try:
            model, default_obs = builtin_model(name, **params)
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from None
        obs = default_obs if cfg["observable.name"] == "default" else _simple_observable(cfg, model)
    if cfg["observable.name"] in ("zero", "constant"):
        g_mean = float(cfg["observable.constant"]) if cfg["observable.name"] == "constant" else 0.0
    return Experiment(model, obs, kernel, g_mean)


def _simple_observable(cfg: ExperimentConfig, model: ModelSpec) -> ObservableSpec:
    kind = cfg["observable.name"]
    if kind == "zero":
        return _zero_observable()
    if kind == "constant":
        c = float(cfg["observable.constant"])
        if c == 0.0:
            return _zero_observable()
        return ObservableSpec(lambda x: np.full(np.asarray(x).shape[0], c),
                              np.finfo(float).tiny, abs(c), name="constant")
    if kind == "identity":
        lo, hi = model.audit_window
        return ObservableSpec(lambda x: np.asarray(x)[:, 0], 1.0,
                              float(max(abs(lo[0]), abs(hi[0]), 1.0)), name="x")
    raise ConfigError(f"observable {kind!r} needs a kernel model")


class Run:
    """Collects output files so the manifest can list their digests."""

    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.files: list[Path] = []
        self.root = SeededStream(cfg["run.seed"], 0)
        self.status = EXIT_OK

    def stream(self, tag: str) -> SeededStream:
        return self.root.child(tag)

    def json(self, name: str, obj) -> None:
        self.files.append(write_json(self.out / name, obj))

    def csv(self, name: str, header, rows) -> None:
        self.files.append(write_csv(self.out / name, header, rows))


def _pairs_dict(model: ModelSpec, pairs) -> list:
    return [[as_states(x, model.d)[0].tolist(), as_states(y, model.d)[0].tolist()] for x, y in pairs]


def step_audit(run: Run, ex: Experiment) -> bool:
    if not ex.model.audit_required:
        run.json("audit.json", {"skipped": True, "reason": "model embeds a finite kernel",
                                "overall": True})
        return True
    rep = audit(ex.model, run.cfg["audit.grid_points"], run.cfg["audit.nodes"], run.stream("audit"))
    run.json("audit.json", rep.to_dict())
    log.info("audit %s: %s", ex.model.name, "pass" if rep.ok else "FAIL")
    return rep.ok


def step_decay(run: Run, ex: Experiment):
    pairs = default_start_pairs(ex.model)
    fit = fit_decay(ex.model, ex.obs, pairs, run.cfg["decay.n_max"], run.cfg["decay.replicas"],
                    run.stream("decay"))
    for i, (mean, se) in enumerate(fit.curves):
        run.csv(f"decay_pair{i}.csv", ["n", "value", "stderr"],
                ([k, mean[k], se[k]] for k in range(mean.size)))
    d = fit.to_dict()
    d["start_pairs"] = _pairs_dict(ex.model, pairs)
    d["converging"] = fit.converging
    run.json("decay.json", d)
    if not fit.converging:
        raise DegenerateFitError(f"fitted q_hat = {fit.q_hat:.4g} does not decay")
    x0 = ex.model.audit_window[1]
    fm = fm_distance_curve(ex.model, x0, run.cfg["decay.fm_n_max"], run.cfg["decay.fm_replicas"],
                           run.stream("fm"), burn_in=default_burn_in(fit.q_hat))
    run.csv("fm_curve.csv", ["n", "value", "stderr"], fm)
    log.info("decay: q_hat=%.4f C_hat=%.4f r2=%.4f", fit.q_hat, fit.C_hat, fit.r_squared)
    return fit


def step_corrector(run: Run, ex: Experiment, fit):
    chi = fit_corrector(ex.model, ex.obs, fit, tol=run.cfg["corrector.tol"],
                        stream=run.stream("corrector"), g_mean=ex.g_mean,
                        node_count=run.cfg["corrector.nodes"], max_rows=run.cfg["corrector.max_rows"])
    d = chi.to_dict()
    d["g_mean_stderr"] = chi.g_mean_stderr
    run.json("corrector.json", d)
    header = [f"x_{i}" for i in range(ex.model.d)] + ["chi", "stderr"]
    run.csv("corrector_table.csv", header, chi.table_rows())
    log.info("corrector: N=%d replicas=%d", chi.truncation_N, chi.replicas)
    return chi


def step_sigma(run: Run, ex: Experiment, fit, chi):
    c = run.cfg
    s1 = sigma2_stationary(ex.model, ex.obs, chi, c["sigma.samples"], run.stream("sigma-z"))
    s2 = sigma2_sn_over_n(ex.model, ex.obs, chi, c["sigma.n"], c["sigma.replicas"],
                          run.stream("sigma-sn"), block=c["sigma.block"])
    s3 = sigma2_green_kubo(ex.model, ex.obs, c["sigma.n"], c["sigma.replicas"], c["sigma.lag_max"],
                           run.stream("sigma-gk"), q_hat=fit.q_hat, g_mean=chi.g_mean_estimate)
    ests = [s1, s2, s3]
    agree = {}
    for i in range(3):
        for j in range(i + 1, 3):
            a, b = ests[i], ests[j]
            agree[f"{a.method}~{b.method}"] = bool(a.ci95[0] <= b.ci95[1] and b.ci95[0] <= a.ci95[1])
    run.json("sigma.json", {"estimates": [e.to_dict() for e in ests], "pairwise_ci_overlap": agree,
                            "tol_note": f"corrector tolerance {chi.tol:.6g}"})
    log.info("sigma^2: %s", ", ".join(f"{e.method}={e.value:.6g}" for e in ests))
    return s1


def step_qvar(run: Run, ex: Experiment, chi, sigma):
    c = run.cfg
    qv = quadratic_variation_curve(ex.model, ex.obs, chi, c["qvar.n"], c["qvar.replicas"],
                                   run.stream("qvar"))
    run.csv("qvar.csv", ["k", "median", "q25", "q75"], ([p.k, p.median, p.q25, p.q75] for p in qv))
    hs = heyde_scott_sums(ex.model, ex.obs, chi, c["qvar.gamma"], c["qvar.vartheta"], c["qvar.n"],
                          c["qvar.replicas"], run.stream("heyde-scott"), sigma2=sigma.value,
                          empirical=c["qvar.empirical"])
    run.csv("heyde_scott.csv", ["k", "th1", "th2"], hs.rows())
    ratio = qv[-1].median / sigma.value if sigma.value > 0 else float("nan")
    run.json("qvar.json", {"k": qv[-1].k, "median": qv[-1].median, "ratio_to_sigma2": ratio,
                           "heyde_scott": hs.summary()})


def step_lil(run: Run, ex: Experiment, chi, sigma):
    c = run.cfg
    rep = lil_report(ex.model, ex.obs, chi, c["lil.n_max"], c["lil.seeds"], sigma, run.stream("lil"))
    d = rep.to_dict()
    clt = clt_check(ex.model, ex.obs, sigma, c["clt.n"], c["clt.replicas"], run.stream("clt"),
                    g_mean=chi.g_mean_estimate,
                    burn_in=default_burn_in(chi.q_hat) if 0 < chi.q_hat < 1 else 60)
    d["clt_check"] = {"pvalue": clt.pvalue, "statistic": clt.statistic, "n": clt.n,
                      "replicas": clt.replicas, "degenerate": clt.degenerate}
    run.json("lil.json", d)
    if not rep.degenerate:
        n = min(c["lil.path_nodes"], c["lil.n_max"])
        seed = rep.seeds[0]
        traj = simulate_seed_path(ex, chi, rep, n)
        path = theta_from_partial_sums(traj, n, math.sqrt(sigma.value))
        run.csv(f"theta_path_seed{seed}.csv", ["t", "value"], path.rows())
    log.info("lil: %d of %d seeds in band, strassen median %.3f", rep.in_band_count(),
             len(rep.seeds), rep.strassen_median())


def simulate_seed_path(ex: Experiment, chi, rep, n: int) -> np.ndarray:
    """Partial sums of the first seed's path, regenerated from its substream."""
    from .simulator import iterate, stationary_samples
    from .lil import _burn
    s = rep.seeds[0]
    x0 = stationary_samples(ex.model, _burn(chi, None), s + 1, stream=rep.stream.child("start"))[s:s + 1]
    S = np.zeros(n + 1)
    acc = 0.0
    for k, x, _, _ in iterate(ex.model, x0, rep.stream.child("run"), np.array([s]), n):
        acc += float(ex.obs(x)[0] - chi.g_mean_estimate)
        S[k] = acc
    return S


def step_simulate(run: Run, ex: Experiment) -> None:
    x0 = run.cfg["run.x0"] or ex.model.base_point
    traj = simulate(ex.model, np.asarray(x0, float), run.cfg["run.n"], run.stream("simulate"),
                    run.cfg["run.replica"])
    path = run.out / "trajectory.csv"
    traj.to_csv(path)
    run.files.append(path)


def step_oracle(run: Run, ex: Experiment) -> None:
    if ex.kernel is not None:
        kernel = ex.kernel
    else:
        kernel = discretize(ex.model, points=run.cfg["oracle.points"], t_nodes=run.cfg["oracle.t_nodes"])
    pi = exact_stationary(kernel)
    g = ex.obs(kernel.states)
    mean = float(pi @ g)
    gc = g - mean
    chi = exact_chi(kernel, gc, pi)
    s2 = exact_sigma2(kernel, gc, chi, pi)
    gk = exact_green_kubo(kernel, gc, pi)
    run.json("oracle.json", {"states": kernel.size, "defect": kernel.defect, "g_mean": mean,
                             "sigma2": s2, "green_kubo": gk, "stationary_mean": (pi @ kernel.states).tolist()})
    header = [f"x_{i}" for i in range(kernel.states.shape[1])] + ["pi", "g_centered", "chi"]
    run.csv("oracle_table.csv", header,
            (list(s) + [p, gg, cc] for s, p, gg, cc in zip(kernel.states, pi, gc, chi)))


def execute(run: Run, ex: Experiment, command: str) -> int:
    if command == "simulate":
        step_simulate(run, ex)
        return EXIT_OK
    if command == "oracle":
        step_oracle(run, ex)
        return EXIT_OK
    if not step_audit(run, ex):
        return EXIT_AUDIT
    if command == "audit":
        return EXIT_OK
    fit = step_decay(run, ex)
    if command == "decay":
        return EXIT_OK
    chi = step_corrector(run, ex, fit)
    if command in ("sigma", "full"):
        sigma = step_sigma(run, ex, fit, chi)
    else:
        sigma = sigma2_stationary(ex.model, ex.obs, chi, run.cfg["sigma.samples"], run.stream("sigma-z"))
    if command in ("qvar", "full"):
        step_qvar(run, ex, chi, sigma)
    if command in ("lil", "full"):
        step_lil(run, ex, chi, sigma)
    return EXIT_OK


def write_manifest(run: Run, status: int, started: datetime, elapsed: float, threads: int) -> Path:
    files = sorted(run.files, key=lambda p: p.name)
    manifest = {
        "artifact": "ifslil", "version": __version__, "command": run.cfg["run.command"],
        "master_seed": run.cfg["run.seed"], "root_stream_id": run.root.stream_id,
        "exit_status": status, "threads": threads,
        "started_utc": started.strftime("%Y-%m-%dT%H:%M:%SZ"), "wall_clock_ms": int(round(elapsed * 1000)),
        "config": run.cfg.to_dict(), "config_text": run.cfg.to_text(),
        "files": {p.name: sha256_file(p) for p in files},
    }
    path = run.out / "manifest.json"
    write_json(path, manifest)
    return path


def verify_manifest(manifest_path, out: Path) -> list[str]:
    """Names whose digest in ``out`` differs from (or is missing against) the manifest."""
    ref = json.loads(Path(manifest_path).read_text(encoding="utf-8"))["files"]
    bad = []
    for name, digest in ref.items():
        p = out / name
        if not p.exists() or sha256_file(p) != digest:
            bad.append(name)
    return bad


def parse_args(argv=None) -> argparse.Namespace:
    ap = argparse.ArgumentParser(prog="ifslil", description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, help="INI experiment file (defaults used when omitted)")
    ap.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    ap.add_argument("--out", type=Path, help="output directory (overrides run.out)")
    ap.add_argument("--command", choices=COMMANDS, help="pipeline to run (overrides run.command)")
    ap.add_argument("--threads", type=int, default=1, help="worker threads, 0 = CPU count")
    ap.add_argument("--verify", type=Path, help="compare output digests with this manifest")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig.from_text("")
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg.set("run.seed", args.seed)
        if args.out is not None:
            cfg.set("run.out", str(args.out))
        if args.command is not None:
            cfg.set("run.command", args.command)
        if args.threads < 0:
            raise ConfigError("--threads must be >= 0")
        ex = build_experiment(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    threads = set_threads(args.threads)
    out = Path(cfg["run.out"])
    out.mkdir(parents=True, exist_ok=True)
    run = Run(cfg, out)
    started = datetime.now(timezone.utc)
    t0 = time.perf_counter()
    try:
        status = execute(run, ex, cfg["run.command"])
    except DegenerateFitError as exc:
        print(f"degenerate fit: {exc}", file=sys.stderr)
        status = EXIT_DEGENERATE
    if status == EXIT_AUDIT:
        print("audit failed; see audit.json", file=sys.stderr)
    write_manifest(run, status, started, time.perf_counter() - t0, threads)
    if args.verify is not None and status == EXIT_OK:
        bad = verify_manifest(args.verify, out)
        if bad:
            print(f"digest mismatch: {', '.join(bad)}", file=sys.stderr)
            return EXIT_DIGEST
    return status


if __name__ == "__main__":
    sys.exit(main())
