"""Experiment runner: config parsing, orchestration, manifests, CSV output.

Configs are line-oriented ``key = value`` files with one ``[section]``
per component: ``[experiment]`` names the kind, ``[model]`` the process
parameters, and a section named after the kind carries its knobs.
Every field has a serialized default and unknown keys are rejected with
line-precise diagnostics.

Reruns are reproducible: replica seeds derive from the master seed by
counter hashing, workers collect into a deterministic order, and the
manifest records digests of every output file (its own timing fields are
excluded from the byte-identity contract).
"""

from __future__ import annotations

import argparse
import concurrent.futures as cf
import dataclasses
import hashlib
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, analysis, network, point_process, renewal
from .rng_field import (
    GaussianFloorLaw,
    GeometricLaw,
    ModelConfig,
    derive_seed,
    pmf_selfcheck,
)

KINDS = (
    "pmf-check",
    "window-dump",
    "coalescence",
    "renewal",
    "scaling",
    "eta",
    "hyperuniformity",
    "connectivity",
    "dual-check",
)


class SpecError(ValueError):
    """Config parse/validation failure with line-precise context."""


@dataclass
class ExperimentSpec:
    kind: str
    model: ModelConfig
    params: dict
    out_dir: str = "howard_out"

    def serialize(self) -> str:
        lines = ["[experiment]", f"kind = {self.kind}", "", "[model]",
                 f"seed = {self.model.seed}", f"p = {self.model.p!r}"]
        law = self.model.law
        if isinstance(law, GeometricLaw):
            lines += ["law = geometric",
                      f"theta_x = {law.theta_x!r}",
                      f"theta_y = {law.theta_y!r}"]
        else:
            lines += ["law = gaussian_floor",
                      f"sigma_x = {law.sigma_x!r}",
                      f"sigma_y = {law.sigma_y!r}"]
        lines += ["", f"[{self.kind}]"]
        if self.out_dir != "howard_out":
            lines.append(f"out_dir = {self.out_dir}")
        for k in sorted(self.params):
            v = self.params[k]
            if isinstance(v, (list, tuple)):
                v = " ".join(repr(x) for x in v)
            else:
                v = repr(v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


# per-kind parameter schema: name -> (type tag, default)
_INT, _FLOAT, _INT_LIST, _FLOAT_LIST, _STR = "int", "float", "ints", "floats", "str"

SCHEMAS: dict[str, dict[str, tuple[str, object]]] = {
    "pmf-check": {
        "n_samples": (_INT, 1_000_000),
        "alpha": (_FLOAT, 0.01),
    },
    "window-dump": {
        "x_lo": (_INT, -32), "x_hi": (_INT, 32),
        "y_lo": (_INT, 0), "y_hi": (_INT, 32),
        "epsilon": (_FLOAT, 1e-12),
    },
    "coalescence": {
        "separations": (_INT_LIST, [1, 2]),
        "replicas": (_INT, 2000),
        "horizon": (_INT, 100_000),
        "fit_lo": (_FLOAT, 100.0),
        "fit_hi": (_FLOAT, 10_000.0),
    },
    "renewal": {
        "n_increments": (_INT, 1000),
        "horizon_l": (_INT, 64),
        "eps_out": (_FLOAT, 5e-4),
        "per_run": (_INT, 25),
        "height_steps": (_INT, 600),
        "height_runs": (_INT, 4),
    },
    "scaling": {
        "n_increments": (_INT, 1000),
        "horizon_l": (_INT, 64),
        "eps_out": (_FLOAT, 5e-4),
        "per_run": (_INT, 25),
        "n_scale": (_INT, 1000),
        "t": (_FLOAT, 1.0),
        "replicas": (_INT, 200),
    },
    "eta": {
        "t0": (_FLOAT, 0.0),
        "t": (_FLOAT, 0.5),
        "a": (_FLOAT, 0.0),
        "epsilons": (_FLOAT_LIST, [0.4, 0.2, 0.1]),
        "n_scale": (_INT, 2000),
        "sigma": (_FLOAT, 55.0),
        "gamma": (_FLOAT, 1365.0),
        "replicas": (_INT, 100),
    },
    "hyperuniformity": {
        "sides": (_INT_LIST, [16, 32, 64, 128, 256, 512]),
        "replicas": (_INT, 200),
    },
    "connectivity": {
        "width": (_INT, 50),
        "n_paths": (_INT, 10),
        "heights": (_INT_LIST, [1000, 10_000, 100_000]),
        "replicas": (_INT, 200),
    },
    "dual-check": {
        "windows": (_INT, 100),
        "width": (_INT, 60),
        "height": (_INT, 40),
        "paths": (_INT, 3),
        "duals": (_INT, 4),
    },
}

_MODEL_KEYS = {"seed", "p", "law", "theta_x", "theta_y", "sigma_x", "sigma_y"}


def _convert(tag: str, raw: str, line_no: int, key: str):
    try:
        if tag == _INT:
            return int(raw)
        if tag == _FLOAT:
            return float(raw)
        if tag == _INT_LIST:
            return [int(t) for t in raw.split()]
        if tag == _FLOAT_LIST:
            return [float(t) for t in raw.split()]
        return raw
    except ValueError:
        raise SpecError(
            f"line {line_no}: key '{key}' expects {tag}, got {raw!r}"
        ) from None


def parse_spec(text: str, kind: str | None = None) -> ExperimentSpec:
    """Parse and validate a config; diagnostics carry line numbers."""
    section = None
    seen: dict[str, dict[str, tuple[str, int]]] = {}
    for i, rawline in enumerate(text.splitlines(), start=1):
        line = rawline.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            seen.setdefault(section, {})
            continue
        if "=" not in line:
            raise SpecError(f"line {i}: expected 'key = value', got {rawline!r}")
        if section is None:
            raise SpecError(f"line {i}: key outside any [section]")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key in seen[section]:
            raise SpecError(f"line {i}: duplicate key '{key}' in [{section}]")
        seen[section][key] = (value, i)

    exp = seen.pop("experiment", {})
    if "kind" in exp:
        cfg_kind = exp.pop("kind")[0]
        if kind is not None and cfg_kind != kind:
            raise SpecError(
                f"config kind '{cfg_kind}' does not match requested '{kind}'")
        kind = cfg_kind
    if exp:
        k, (_, i) = next(iter(exp.items()))
        raise SpecError(f"line {i}: unknown key '{k}' in [experiment]")
    if kind is None:
        raise SpecError("no experiment kind given (CLI or [experiment] section)")
    if kind not in KINDS:
        raise SpecError(f"unknown experiment kind '{kind}'; "
                        f"choose from {', '.join(KINDS)}")

    model_raw = seen.pop("model", {})
    law_name = "geometric"
    law_kwargs: dict[str, float] = {}
    model_kwargs: dict[str, object] = {"seed": 1, "p": 0.5}
    for key, (value, line_no) in model_raw.items():
        if key not in _MODEL_KEYS:
            raise SpecError(f"line {line_no}: unknown key '{key}' in [model]")
        if key == "law":
            if value not in ("geometric", "gaussian_floor"):
                raise SpecError(
                    f"line {line_no}: law must be geometric or gaussian_floor")
            law_name = value
        elif key == "seed":
            model_kwargs["seed"] = _convert(_INT, value, line_no, key)
        elif key == "p":
            p = _convert(_FLOAT, value, line_no, key)
            if not 0.0 <= p <= 1.0:
                raise SpecError(
                    f"line {line_no}: p = {value} outside [0, 1]")
            model_kwargs["p"] = p
        else:
            law_kwargs[key] = _convert(_FLOAT, value, line_no, key)
    try:
        if law_name == "geometric":
            allowed = {"theta_x", "theta_y"}
            law = GeometricLaw(**{k: v for k, v in law_kwargs.items()
                                  if k in allowed})
            extra = set(law_kwargs) - allowed
        else:
            allowed = {"sigma_x", "sigma_y"}
            law = GaussianFloorLaw(**{k: v for k, v in law_kwargs.items()
                                      if k in allowed})
            extra = set(law_kwargs) - allowed
        if extra:
            raise SpecError(
                f"keys {sorted(extra)} do not apply to law '{law_name}'")
        model = ModelConfig(law=law, **model_kwargs)
    except ValueError as e:
        raise SpecError(str(e)) from None

    schema = SCHEMAS[kind]
    params = {k: default for k, (_, default) in schema.items()}
    kind_raw = seen.pop(kind, {})
    out_dir = "howard_out"
    for key, (value, line_no) in kind_raw.items():
        if key == "out_dir":
            out_dir = value
            continue
        if key not in schema:
            raise SpecError(
                f"line {line_no}: unknown key '{key}' in [{kind}]")
        params[key] = _convert(schema[key][0], value, line_no, key)
    if seen:
        sec = next(iter(seen))
        raise SpecError(f"unknown section [{sec}]")
    return ExperimentSpec(kind=kind, model=model, params=params,
                          out_dir=out_dir)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(str(v) for v in row) + "\n")


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _parallel_map(fn, items, threads: int):
    """Deterministically ordered map, optionally thread-parallel."""
    if threads <= 1:
        return [fn(i) for i in items]
    with cf.ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# experiment implementations
# ---------------------------------------------------------------------------

def _run_pmf_check(spec, out, threads):
    p = spec.params
    reports = pmf_selfcheck(spec.model.law, p["n_samples"],
                            seed=spec.model.seed, p=spec.model.p,
                            alpha=p["alpha"])
    rows = []
    for name, rep in reports.items():
        for b in rep.bins:
            rows.append((name, b.value, f"{b.expected:.6f}", b.observed))
    _write_csv(out / "pmf_check.csv",
               ["marginal", "value", "expected", "observed"], rows)
    summary = {
        name: {"statistic": rep.statistic, "p_value": rep.p_value,
               "dof": rep.dof, "passed": rep.passed}
        for name, rep in reports.items()
    }
    summary["passed"] = all(r.passed for r in reports.values())
    return summary, ["pmf_check.csv"]


def _run_window_dump(spec, out, threads):
    p = spec.params
    wspec = point_process.WindowSpec(p["x_lo"], p["x_hi"], p["y_lo"],
                                     p["y_hi"], epsilon=p["epsilon"])
    real = point_process.materialize_window(spec.model, wspec)
    text = point_process.dump_realization(real)
    (out / "window.txt").write_text(text)
    n_points = sum(len(r.xs) for r in real.rows.values())
    n_special = sum(sum(r.special) for r in real.rows.values())
    return {
        "points": n_points,
        "special": n_special,
        "margins": list(real.margins),
        "passed": True,
    }, ["window.txt"]


def _run_coalescence(spec, out, threads):
    p = spec.params
    rows = []
    summary = {"separations": {}}
    passed = True
    for sep in p["separations"]:
        def one(r, sep=sep):
            seed = derive_seed(spec.model.seed, sep * 1_000_000 + r)
            return network.coalescence_time(
                spec.model, (0, 0), (sep, 0), p["horizon"], seed=seed)
        samples = _parallel_map(one, range(p["replicas"]), threads)
        for r, s in enumerate(samples):
            rows.append((sep, r, "" if s.censored else s.time,
                         int(s.censored)))
        curve = analysis.survival_estimate(samples)
        fit = analysis.tail_exponent(curve, (p["fit_lo"], p["fit_hi"]))
        summary["separations"][str(sep)] = {
            "n": len(samples),
            "censored": curve.n_censored,
            "slope": fit.slope,
            "slope_ci": list(fit.ci),
            "r2": fit.r2,
            "intercept": fit.intercept,
            "t_center": fit.t_center,
        }
        passed = passed and (-0.6 <= fit.slope <= -0.4)
    _write_csv(out / "coalescence.csv",
               ["separation", "replica", "time", "censored"], rows)
    summary["passed"] = passed
    return summary, ["coalescence.csv"]


def _collect_increments(model, n_increments, horizon_l, eps_out, per_run,
                        threads, seed_base=0):
    """Replica-parallel increment harvest; returns list of (seed, dx, dy)."""
    runs = max(1, math.ceil(n_increments / per_run))

    def one(r):
        seed = derive_seed(model.seed, seed_base + r)
        incs, _trunc = renewal.renewal_increments(
            model, (0, 0), n_renewals=per_run, horizon_l=horizon_l,
            eps_out=eps_out, seed=seed)
        return [(seed, dx, dy) for dx, dy in incs]

    out = []
    batch = 0
    while len(out) < n_increments and batch < runs * 4:
        chunk = _parallel_map(one, range(batch, batch + runs), threads)
        for lst in chunk:
            out.extend(lst)
        batch += runs
    return out[:n_increments]


def _run_renewal(spec, out, threads):
    p = spec.params
    triples = _collect_increments(spec.model, p["n_increments"],
                                  p["horizon_l"], p["eps_out"],
                                  p["per_run"], threads)
    rows = []
    sigma_index = {}
    for ell, (seed, dx, dy) in enumerate(triples):
        sigma_index[seed] = sigma_index.get(seed, 0) + dy
        rows.append((seed, ell, dx, dy, sigma_index[seed]))
    _write_csv(out / "increments.csv",
               ["seed", "ell", "dx", "dy", "sigma_index"], rows)

    height_rows = []
    for r in range(p["height_runs"]):
        seed = derive_seed(spec.model.seed, 10_000_000 + r)
        model = dataclasses.replace(spec.model, seed=seed)
        cap = renewal.height_cap_for_budget(model.law, model.p, p["eps_out"])
        half = cap * cap + 200
        real = point_process.materialize_window(
            model, point_process.WindowSpec(
                -half, half, 0, p["height_steps"] + p["horizon_l"] + 1,
                epsilon=1e-6))
        scan = renewal.detect_renewals(real, model, [(0, 0)],
                                       max_steps=p["height_steps"],
                                       horizon_l=p["horizon_l"],
                                       height_cap=cap)
        for h in scan.heights:
            height_rows.append((seed, h.j, h.tau, h.L, h.N_next))
    _write_csv(out / "heights.csv",
               ["seed", "j", "tau", "L", "N_next"], height_rows)

    incs = [(dx, dy) for _, dx, dy in triples]
    dxs = np.array([dx for dx, _ in incs], dtype=float)
    dys = np.array([dy for _, dy in incs], dtype=float)
    summary = {
        "n_increments": len(incs),
        "sigma": float(dxs.std(ddof=1)) if len(incs) > 1 else None,
        "gamma": float(dys.mean()),
        "passed": True,
    }
    if len(incs) >= 100:
        est = renewal.estimate_sigma_gamma(incs)
        summary.update(se_sigma=est["se_sigma"], se_gamma=est["se_gamma"])
    if len(incs) >= 1000:
        sym = analysis.symmetry_test(dxs)
        diag = analysis.iid_diagnostics(dxs)
        summary.update(
            symmetry_sign_p=sym["sign_p"],
            acf1_dx=diag["acf"][1],
            passed=(not sym["rejected"]) and diag["passed"],
        )
    return summary, ["increments.csv", "heights.csv"]


def _run_scaling(spec, out, threads):
    p = spec.params
    triples = _collect_increments(spec.model, p["n_increments"],
                                  p["horizon_l"], p["eps_out"],
                                  p["per_run"], threads)
    incs = [(dx, dy) for _, dx, dy in triples]
    est = renewal.estimate_sigma_gamma(incs)
    don = analysis.donsker_test(spec.model, est["sigma"], est["gamma"],
                                p["n_scale"], p["t"], p["replicas"])
    summary = {
        "sigma": est["sigma"], "gamma": est["gamma"],
        "n_increments": est["n"],
        "ks_statistic": don["ks_statistic"],
        "p_value": don["p_value"],
        "sample_variance": don["sample_variance"],
        "n_steps": don["n_steps"],
        "replicas": don["replicas"],
        "passed": don["p_value"] > 0.01
        and 0.8 < don["sample_variance"] / p["t"] < 1.2,
    }
    return summary, []


def _run_eta(spec, out, threads):
    p = spec.params
    rows = []
    summary = {"epsilons": {}}
    for eps in p["epsilons"]:
        res = analysis.eta_statistic(
            spec.model, p["t0"], p["t"], p["a"], p["a"] + eps,
            p["n_scale"], p["sigma"], p["gamma"], p["replicas"])
        for i, c in enumerate(res["counts"]):
            rows.append((eps, i, int(c)))
        summary["epsilons"][str(eps)] = {
            "p_ge2": res["p_ge2"],
            "p_ge3": res["p_ge3"],
            "p_ge3_over_eps": res["p_ge3"] / eps,
            "mean": res["mean_count"],
        }
    _write_csv(out / "eta.csv", ["epsilon", "replica", "count"], rows)
    summary["passed"] = True
    return summary, ["eta.csv"]


def _run_hyperuniformity(spec, out, threads):
    p = spec.params
    box = point_process.box_counts(spec.model, p["sides"], p["replicas"])
    fit = analysis.hyperuniformity_fit(box)
    rng = np.random.default_rng(spec.model.seed)
    control = {}
    for side in p["sides"]:
        lam = box[side]["mean"]
        counts = rng.poisson(lam, size=p["replicas"])
        control[side] = {"mean": counts.mean(),
                         "variance": counts.var(ddof=1), "counts": counts}
    cfit = analysis.hyperuniformity_fit(control)
    rows = [(s, box[s]["mean"], box[s]["variance"],
             control[s]["variance"]) for s in p["sides"]]
    _write_csv(out / "boxes.csv",
               ["side", "mean", "variance", "poisson_variance"], rows)
    summary = {
        "alpha": fit["alpha"], "alpha_ci": list(fit["ci"]),
        "poisson_alpha": cfit["alpha"],
        "passed": fit["alpha"] < 2.0 and 1.6 < cfit["alpha"] < 2.4,
    }
    return summary, ["boxes.csv"]


def _run_connectivity(spec, out, threads):
    p = spec.params
    h_max = max(p["heights"])
    steps = network.connectivity_merge_steps(
        spec.model, p["width"], p["n_paths"], h_max, p["replicas"])
    rows = [(r, int(s)) for r, s in enumerate(steps)]
    _write_csv(out / "connectivity.csv", ["replica", "merge_step"], rows)
    fracs = {
        str(h): float(np.mean((steps >= 0) & (steps <= h)))
        for h in p["heights"]
    }
    vals = [fracs[str(h)] for h in sorted(p["heights"])]
    summary = {
        "fractions": fracs,
        "monotone": all(a <= b for a, b in zip(vals, vals[1:])),
        "passed": all(a <= b for a, b in zip(vals, vals[1:])),
    }
    return summary, ["connectivity.csv"]


def _run_dual_check(spec, out, threads):
    p = spec.params
    rows = []
    total = 0
    for w in range(p["windows"]):
        seed = derive_seed(spec.model.seed, 40_000_000 + w)
        model = dataclasses.replace(spec.model, seed=seed)
        half = p["width"] // 2
        real = point_process.materialize_window(
            model, point_process.WindowSpec(-half - 40, half + 40,
                                            0, p["height"]))
        starts = [(x, 0) for x in network.spaced_starts(p["width"], p["paths"])]
        starts = [(x - half, y) for x, y in starts]
        primal = [network.trace_path(real, model, s, p["height"])
                  for s in starts]
        top = real.rows[p["height"]]
        duals = [network.trace_dual(real, model, d, p["height"])
                 for d in network.dual_vertices(top)[:p["duals"]]]
        v = network.check_noncrossing(primal, duals)
        rows.append((w, seed, v))
        total += v
    _write_csv(out / "dual_check.csv", ["window", "seed", "violations"], rows)
    return {"total_violations": total, "windows": p["windows"],
            "passed": total == 0}, ["dual_check.csv"]


_RUNNERS = {
    "pmf-check": _run_pmf_check,
    "window-dump": _run_window_dump,
    "coalescence": _run_coalescence,
    "renewal": _run_renewal,
    "scaling": _run_scaling,
    "eta": _run_eta,
    "hyperuniformity": _run_hyperuniformity,
    "connectivity": _run_connectivity,
    "dual-check": _run_dual_check,
}


def run(spec: ExperimentSpec, out_dir: str | Path | None = None,
        threads: int = 1) -> dict:
    """Execute one experiment; returns the manifest dict.

    Writes the experiment outputs, ``summary.json`` and ``manifest.json``
    into the output directory.
    """
    out = Path(out_dir if out_dir is not None else spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    summary, files = _RUNNERS[spec.kind](spec, out, threads)
    elapsed = time.time() - t0
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n")
    files = list(files) + ["summary.json"]
    manifest = {
        "kind": spec.kind,
        "spec": spec.serialize(),
        "master_seed": spec.model.seed,
        "seed_rule": "replica seed = splitmix64(seed_state(master) ^ "
                     "(index+1)*K); see rng_field.derive_seed",
        "version": __version__,
        "threads": threads,
        "wall_seconds": elapsed,
        "outputs": {f: _digest(out / f) for f in files},
        "passed": bool(summary.get("passed", True)),
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="howard-web",
        description="Monte Carlo experiments on the perturbed Howard "
                    "drainage network",
    )
    parser.add_argument("kind", choices=KINDS)
    parser.add_argument("--config", type=Path, default=None,
                        help="key = value config file")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the master seed")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--gate", action="store_true",
                        help="nonzero exit when statistical gates fail")
    parser.add_argument("--out", type=Path, default=None)
    args = parser.parse_args(argv)

    text = args.config.read_text() if args.config else ""
    try:
        spec = parse_spec(text, kind=args.kind)
    except SpecError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    if args.seed is not None:
        spec = dataclasses.replace(
            spec, model=dataclasses.replace(spec.model, seed=args.seed))
    manifest = run(spec, out_dir=args.out, threads=args.threads)
    print(json.dumps({k: manifest[k] for k in
                      ("kind", "passed", "wall_seconds", "outputs")},
                     indent=2))
    if args.gate and not manifest["passed"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
