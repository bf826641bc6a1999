"""Command-line front end: synth, sample, fit, select, predict, validate, compare.

Every command reads a JSON configuration (``--config``), applies
``--set dotted.key=value`` overrides, and requires ``--seed``. Outputs go
to the configured directory and each CSV starts with a comment line
carrying the configuration hash and seed.

Exit codes: 0 success, 1 numerical failure, 2 I/O or configuration error.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
import zlib

import numpy as np

from .errors import (
    DesignError,
    FemAssemblyError,
    InvalidDomainError,
    ModelDataError,
    NonConvergenceError,
    NumericalDegeneracyError,
    SurfaceError,
)
from .inference import HyperGrid, score_model, write_draws, write_fit_json
from .mesh import read_domain_geojson
from .model import MARK_COVARIATES, LatentVariant, MarkedSample
from .predict import (
    FitSpec,
    compare_direct,
    fit_sample,
    holdout_validate,
    predict_regions,
    write_estimates_csv,
    write_intensity_grid,
)
from .spde import PcPrior
from .surface import Surface
from .survey import (
    DesignSpec,
    Population,
    PopulationConfig,
    generate_population,
    ht_estimate,
    proportional_design,
    read_regions_geojson,
    run_survey,
)

log = logging.getLogger("markedlgcp")

DEFAULT_CONFIG = {
    "output_dir": "out",
    "population_dir": None,  # defaults to output_dir
    "paths": {"sample": None, "domain": None, "regions": None, "design": None, "offset1": None},
    "population": {},
    "design": {"fraction": 0.03, "n_jh": 3, "k_rule": "areas"},
    "mesh": {"max_edge": 2.5, "cutoff": 0.5},
    "prior": {"rho0": 400.0, "alpha_rho": 0.5, "sigma0": 1.0, "alpha_sigma": 0.5, "fixed_variance": 1000.0},
    "model": {"variant": "independent", "covariates": list(MARK_COVARIATES)},
    "grid": {"half_width": 3, "coarse_step": 0.5},
    "n_draws": 1000,
    "bandwidth": 2.0,
    "cell": 1.0,
    "write_draws": False,
    "thinning_correction": True,
    "validate": {"k": 26, "paired": False},
    "select": {"variants": ["none", "shared", "scaled", "independent"]},
}

_FAIL_NUMERIC = (NonConvergenceError, NumericalDegeneracyError, FemAssemblyError, FloatingPointError)
_FAIL_IO = (OSError, json.JSONDecodeError, KeyError, ValueError, InvalidDomainError, ModelDataError, DesignError,
            SurfaceError)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _set_path(cfg: dict, dotted: str, raw: str) -> None:
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a section")
    node[keys[-1]] = value


def load_config(path: str | None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        with open(path) as fh:
            user = json.load(fh)
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: configuration must be a JSON object")
        cfg = _merge(cfg, user)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        _set_path(cfg, k.strip(), v.strip())
    return cfg


def config_hash(cfg: dict) -> str:
    """SHA-256 of the effective configuration; the output directory is left
    out so identical runs written to different places carry the same header."""
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def stage_seed(master: int, stage: str) -> int:
    """Independent, reproducible seed per pipeline stage."""
    return int(np.random.SeedSequence([int(master), zlib.crc32(stage.encode())]).generate_state(1)[0])


class Run:
    def __init__(self, cfg: dict, seed: int):
        self.cfg = cfg
        self.seed = int(seed)
        self.hash = config_hash(cfg)
        self.out = cfg["output_dir"]
        os.makedirs(self.out, exist_ok=True)

    @property
    def header(self) -> str:
        return f"# config_sha256={self.hash} seed={self.seed}"

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    @property
    def pop_dir(self) -> str:
        return self.cfg.get("population_dir") or self.out

    def input_path(self, key: str, default_name: str, base: str | None = None) -> str:
        p = self.cfg["paths"].get(key) or os.path.join(base or self.out, default_name)
        if not os.path.exists(p):
            raise FileNotFoundError(f"required input not found: {p}")
        return p

    def meta(self) -> dict:
        return {"config_sha256": self.hash, "seed": self.seed}

    # -- model pieces ------------------------------------------------------
    def priors(self, n: int = 1) -> tuple:
        p = self.cfg["prior"]
        return (PcPrior(float(p["rho0"]), float(p["alpha_rho"]), float(p["sigma0"]), float(p["alpha_sigma"])),) * n

    def fit_spec(self, variant: str | None = None, covariates=None) -> FitSpec:
        c = self.cfg
        variant = LatentVariant(variant or c["model"]["variant"]).value
        g = c["grid"]
        return FitSpec(
            variant=variant,
            covariates=tuple(c["model"]["covariates"] if covariates is None else covariates),
            max_edge=float(c["mesh"]["max_edge"]),
            cutoff=float(c["mesh"]["cutoff"]),
            priors=self.priors(),
            v0=float(c["prior"]["fixed_variance"]),
            bandwidth=float(c["bandwidth"]),
            cell=float(c["cell"]),
            n_draws=int(c["n_draws"]),
            grid=HyperGrid(half_width=int(g.get("half_width", 3)), coarse_step=float(g.get("coarse_step", 0.5))),
        )

    def domain(self):
        return read_domain_geojson(self.input_path("domain", "domain.geojson", self.pop_dir))

    def regions(self):
        return read_regions_geojson(self.input_path("regions", "regions.geojson", self.pop_dir))

    def sample(self) -> MarkedSample:
        return MarkedSample.from_csv(self.input_path("sample", "sample.csv"))

    def offset1(self) -> Surface | None:
        p = self.cfg["paths"].get("offset1") or os.path.join(self.pop_dir, "surface_offset1.csv")
        if self.cfg["paths"].get("offset1") and not os.path.exists(p):
            raise FileNotFoundError(f"required input not found: {p}")
        return Surface.from_csv(p, "offset1") if os.path.exists(p) else None

    def population(self) -> Population:
        self.input_path("population", "population.csv", self.pop_dir)
        return Population.read(self.pop_dir)

    def design(self, pop: Population) -> DesignSpec:
        p = self.cfg["paths"].get("design")
        if p:
            if not os.path.exists(p):
                raise FileNotFoundError(f"required input not found: {p}")
            return DesignSpec.read(p)
        d = self.cfg["design"]
        return proportional_design(pop, float(d["fraction"]), int(d["n_jh"]), d.get("k_rule", "areas"))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(run: Run) -> int:
    cfg = PopulationConfig.from_dict(run.cfg["population"])
    pop = generate_population(cfg, stage_seed(run.seed, "synth"))
    pop.write(run.pop_dir, run.header)
    print(f"buildings={pop.n_buildings} dwellings={pop.n_dwellings} dir={run.pop_dir}")
    return 0


def cmd_sample(run: Run) -> int:
    pop = run.population()
    design = run.design(pop)
    sample = run_survey(pop, design, stage_seed(run.seed, "sample"))
    sample.to_csv(run.path("sample.csv"), run.header)
    design.write(run.path("design.json"))
    from .survey import sample_surfaces
    from .surface import PixelGrid

    grid = PixelGrid.covering(pop.domain.bounds, float(run.cfg["cell"]))
    for name, s in sample_surfaces(sample, grid, float(run.cfg["bandwidth"])).items():
        s.to_csv(run.path(f"surface_{name}.csv"), run.header)
    print(f"sampled buildings={len(sample)} unemployed={int(sample.mark.sum())}")
    return 0


def _fit(run: Run, variant=None, covariates=None):
    sample = run.sample()
    domain = run.domain()
    spec = run.fit_spec(variant, covariates)
    return fit_sample(sample, domain, spec, stage_seed(run.seed, "fit"), run.offset1()), domain, sample


def cmd_fit(run: Run) -> int:
    pf, _, _ = _fit(run)
    pf.mesh.to_csv(run.out)
    score = score_model(pf.result.model, pf.result.draws, pf.result.hyper)
    write_fit_json(run.path("fit.json"), pf.result, run.meta(), score)
    if run.cfg.get("write_draws"):
        write_draws(run.path("draws.bin"), pf.result.draws)
    print(f"fit variant={pf.result.model.variant.value} grid_points={len(pf.result.hyper)} dic={score.dic:.3f}")
    return 0


def variant_formula(variant: str, covariates) -> str:
    v = LatentVariant(variant)
    pts = "alpha1 + offset1" + {"none": "", "shared": " + W", "scaled": " + W", "independent": " + W1"}[v.value]
    marks = " + ".join(["alpha2 + offset2"] + list(covariates))
    marks += {"none": "", "shared": " + W", "scaled": " + alpha3 W", "independent": " + W2"}[v.value]
    return f"{pts} ; {marks}"


def cmd_select(run: Run) -> int:
    sel = run.cfg["select"]
    entries = sel["variants"]
    if len(entries) < 2:
        raise ConfigError("model selection needs at least two variants")
    rows = []
    for e in entries:
        variant, covs = (e, None) if isinstance(e, str) else (e["variant"], e.get("covariates"))
        pf, _, _ = _fit(run, variant, covs)
        s = score_model(pf.result.model, pf.result.draws, pf.result.hyper)
        rows.append((variant_formula(variant, pf.result.model.marks.names), s))
    rows.sort(key=lambda r: r[1].dic)
    import csv

    with open(run.path("selection.csv"), "w", newline="") as fh:
        fh.write(run.header + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "dic", "waic", "p_dic", "p_waic"])
        for f, s in rows:
            w.writerow([f, repr(s.dic), repr(s.waic), repr(s.p_dic), repr(s.p_waic)])
    for f, s in rows:
        print(f"{s.dic:12.3f} {s.waic:12.3f}  {f}")
    return 0


def _predict(run: Run, with_direct: bool):
    pf, domain, sample = _fit(run)
    regions = run.regions()
    field, est = predict_regions(pf, domain, regions, stage_seed(run.seed, "predict"),
                                 correct=bool(run.cfg["thinning_correction"]))
    direct = {}
    if with_direct:
        for r in regions:
            d = ht_estimate(sample, r)
            if not d.empty:
                direct[r.id] = d
    rows = compare_direct(est, direct)
    write_estimates_csv(run.path("estimates.csv"), rows, run.header)
    write_intensity_grid(run.path("intensity_grid.csv"), field, run.header)
    return pf, rows


def cmd_predict(run: Run) -> int:
    _, rows = _predict(run, with_direct=False)
    total = sum(r.mean for r in rows)
    print(f"regions={len(rows)} total={total:.3f}")
    return 0


def cmd_compare(run: Run) -> int:
    _, rows = _predict(run, with_direct=True)
    missing = [r.region_id for r in rows if not r.available]
    if missing:
        print(f"no direct estimate for {len(missing)} regions: {' '.join(missing)}")
    covered = [r.covered for r in rows if r.available]
    print(f"regions={len(rows)} direct_available={len(covered)} direct_in_interval={sum(covered)}")
    return 0


def cmd_validate(run: Run) -> int:
    pop = run.population()
    design = run.design(pop)
    v = run.cfg["validate"]
    rep = holdout_validate(pop, design, run.fit_spec(), k=int(v["k"]), seed=stage_seed(run.seed, "validate"),
                           paired=bool(v.get("paired", False)))
    import csv

    full = {r.region_id: r for r in rep.full_rows} if rep.full_rows else {}
    with open(run.path("validation.csv"), "w", newline="") as fh:
        fh.write(run.header + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region_id", "held_out", "truth", "mean", "pred_lo95", "pred_hi95", "covered", "full_mean"])
        for r in rep.rows:
            fm = full.get(r.region_id)
            w.writerow([r.region_id, int(r.held_out), repr(r.truth), repr(r.mean), repr(r.pred_lo95),
                        repr(r.pred_hi95), int(r.covered), "" if fm is None else repr(fm.mean)])
    print(f"held_out={len(rep.held_out)} coverage={rep.coverage:.3f}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "sample": cmd_sample,
    "fit": cmd_fit,
    "select": cmd_select,
    "predict": cmd_predict,
    "validate": cmd_validate,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="markedlgcp", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, required=True, help="master seed")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a configuration entry, e.g. mesh.max_edge=2.0")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "select":
            p.add_argument("--variants", nargs="+", help="variants to compare")
        if name == "validate":
            p.add_argument("-k", type=int, help="number of held-out regions")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if args.out:
            overrides.append(f"output_dir={json.dumps(args.out)}")
        if getattr(args, "variants", None):
            overrides.append(f"select.variants={json.dumps(args.variants)}")
        if getattr(args, "k", None) is not None:
            overrides.append(f"validate.k={args.k}")
        cfg = load_config(args.config, overrides)
        run = Run(cfg, args.seed)
        return COMMANDS[args.command](run)
    except _FAIL_NUMERIC as exc:
        print(f"error: {exc}", file=sys.stderr)
        hyper = getattr(exc, "hyper", None)
        if hyper is not None:
            print(f"failing hyperparameters: {np.asarray(hyper).tolist()}", file=sys.stderr)
        return 1
    except _FAIL_IO as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
