"""Command-line pipeline: ``mobarrier <stage> --config run.json``.

Each stage reads its declared inputs from the work directory (or from the
``inputs`` section of the config), writes its outputs there and appends a
provenance record to ``run_manifest.json``.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from . import barriers, behavior, embed, features, gravity, ingest, stats, synth
from .geo import GeometryError, PoiTable, ZoneMap, haversine, load_barrier_layers

log = logging.getLogger("mobarrier")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
STAGES = ("synth", "ingest", "embed", "gravity", "detect", "features", "regress", "lrt", "cbr", "report")
SCHEMA_VERSION = 1

DEFAULT_CONFIG = {
    "workdir": "run",
    "seed": 1,
    "threads": 1,
    "inputs": {"stays": None, "zones": None, "pois": None, "demographics": None, "barriers": None,
               "truth": None},
    "synth": {},
    "ingest": {},
    "embed": {},
    "detect": {"q_main": 0.05, "q_soft": 0.25, "max_km": features.MAX_PAIR_KM},
    "features": {"max_km": features.MAX_PAIR_KM},
    "regress": {},
    "cbr": {"group_column": "cbsa_id"},
}

# published reference values, reported next to (never mixed with) computed ones
REFERENCE_VALUES = {
    "r2_embedding_boston": {"value": 0.61, "source": "published Boston normalized-flux fit, embedding distance"},
    "r2_geographic_boston": {"value": 0.33, "source": "published Boston normalized-flux fit, geographic distance"},
    "mean_r2_gap": {"value": 0.185, "source": "published mean R2 gain across 11 metro areas"},
    "zero_cbr_share": {"value": 0.565, "source": "published share of 2019 users never crossing a soft barrier"},
    "median_attribution_m": {"value": 20.6, "source": "published median stay-to-POI attribution distance"},
}


class ConfigError(ValueError):
    pass


class MissingInput(FileNotFoundError):
    pass


# --- configuration ------------------------------------------------------------------

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _check_keys(section: str, given: dict, cls) -> None:
    allowed = {f.name for f in fields(cls)}
    extra = sorted(set(given) - allowed)
    if extra:
        raise ConfigError(f"unknown keys in [{section}]: {extra}")


def load_config(path=None, seed=None, threads=None, deterministic=False) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{p}: top level must be an object")
        unknown = sorted(set(user) - set(DEFAULT_CONFIG))
        if unknown:
            raise ConfigError(f"unknown config sections: {unknown}")
        cfg = _merge(cfg, user)
    if seed is not None:
        cfg["seed"] = int(seed)
    if threads is not None:
        cfg["threads"] = int(threads)
    cfg["deterministic"] = bool(deterministic)
    if deterministic:
        cfg["threads"] = 1
    _check_keys("synth", cfg["synth"], synth.SynthConfig)
    _check_keys("ingest", cfg["ingest"], ingest.IngestConfig)
    _check_keys("embed", cfg["embed"], embed.TrainConfig)
    if cfg["threads"] < 1:
        raise ConfigError("threads must be >= 1")
    return cfg


def config_digest(cfg: dict) -> str:
    """Digest of the effective config, ignoring where outputs are written."""
    doc = {k: v for k, v in cfg.items() if k != "workdir"}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# --- stage context ---------------------------------------------------------------

class Context:
    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.workdir = Path(cfg["workdir"])
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []

    def path(self, rel: str) -> Path:
        return self.workdir / rel

    def source(self, key: str) -> Path:
        """Pipeline input file: explicit path from ``inputs`` or the synthetic city."""
        given = self.cfg["inputs"].get(key)
        default = {"stays": "stays.csv", "zones": "zones.geojson", "pois": "pois.csv",
                   "demographics": "demographics.csv", "barriers": "barriers.geojson", "truth": "truth.json"}[key]
        return Path(given) if given else self.path("city") / default

    def need(self, path: Path) -> Path:
        if not path.exists():
            raise MissingInput(f"missing input: {path}")
        self.inputs.append(path)
        return path

    def out(self, rel: str) -> Path:
        p = self.path(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(p)
        return p

    def write_json(self, rel: str, doc: dict) -> None:
        doc = {"schema_version": SCHEMA_VERSION, **doc}
        self.out(rel).write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")

    def write_csv(self, rel: str, df: pd.DataFrame) -> None:
        df.to_csv(self.out(rel), index=False, float_format="%.10g")

    def _rel(self, p: Path) -> str:
        try:
            return str(p.resolve().relative_to(self.workdir.resolve()))
        except ValueError:
            return str(p)

    def record(self, stage: str) -> None:
        manifest = self.workdir / "run_manifest.json"
        doc = json.loads(manifest.read_text()) if manifest.exists() else {"schema_version": SCHEMA_VERSION,
                                                                          "records": []}
        doc["records"].append({
            "stage": stage,
            "version": __version__,
            "config_digest": config_digest(self.cfg),
            "inputs": {self._rel(p): file_digest(p) for p in sorted(set(self.inputs))},
            "outputs": {self._rel(p): file_digest(p) for p in sorted(set(self.outputs))},
        })
        manifest.write_text(json.dumps(doc, indent=2) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def _read_csv(path: Path, required, **kw) -> pd.DataFrame:
    df = pd.read_csv(path, **kw)
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise ingest.SchemaError(f"{path}: missing columns {missing}; found {list(df.columns)}")
    return df


def _make(cls, section: dict, **override):
    try:
        return cls(**{**section, **override})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def _pairs_frame(pairs, **cols) -> pd.DataFrame:
    return pd.DataFrame({"zone_i": [a for a, _ in pairs], "zone_j": [b for _, b in pairs], **cols})


# --- stages -----------------------------------------------------------------------

def stage_synth(ctx: Context) -> None:
    scfg = _make(synth.SynthConfig, ctx.cfg["synth"], seed=ctx.cfg["seed"])
    city = synth.generate_city(scfg)
    out = ctx.path("city")
    synth.write_city(city, out)
    for name in ("zones.geojson", "pois.csv", "demographics.csv", "barriers.geojson", "stays.csv", "truth.json",
                 "manifest.json"):
        ctx.outputs.append(out / name)


def stage_ingest(ctx: Context) -> None:
    icfg = _make(ingest.IngestConfig, ctx.cfg["ingest"])
    stays = ingest.read_stays_csv(ctx.need(ctx.source("stays")))
    zones = ZoneMap.from_geojson(ctx.need(ctx.source("zones")))
    pois = PoiTable.from_csv(ctx.need(ctx.source("pois")))
    trajs, report = ingest.build_trajectories(stays, icfg, zones=zones)
    trajs, excluded = ingest.prune_flows(trajs, icfg, report)
    ingest.attach_pois(trajs, pois, icfg)
    if not report.reconciles():
        raise ValueError("ingest counts do not reconcile")

    flows = ingest.undirected_flows(trajs)
    ex = sorted(excluded)
    ctx.write_csv("ingest/excluded_pairs.csv", _pairs_frame(ex))
    ingest.write_trajectories(trajs, ctx.out("ingest/trajectories.csv"))

    # attribution distances for the report
    pos = {p: k for k, p in enumerate(pois.poi_id)}
    dist = []
    for t in trajs:
        for la, lo, p in zip(t.lat, t.lon, t.extra["poi_id"]):
            if isinstance(p, str):
                k = pos[p]
                dist.append(haversine(la, lo, pois.lat[k], pois.lon[k]) * 1000.0)
    ctx.write_json("ingest/report.json", {
        **report.to_dict(),
        "n_users": len(trajs),
        "n_segments": sum(len(t.segments) for t in trajs),
        "n_pairs_after_pruning": len(flows),
        "n_excluded_pairs": len(ex),
        "attributed_share": len(dist) / max(1, sum(len(t) for t in trajs)),
        "median_attribution_m": float(np.median(dist)) if dist else None,
    })


def _trajectories(ctx: Context):
    return ingest.read_trajectories(ctx.need(ctx.path("ingest/trajectories.csv")))


def _model(ctx: Context):
    ctx.need(ctx.path("embed/model.json"))
    ctx.need(ctx.path("embed/model.in.f32"))
    ctx.need(ctx.path("embed/model.out.f32"))
    return embed.load_model(ctx.path("embed/model"))


def stage_embed(ctx: Context) -> None:
    trajs = _trajectories(ctx)
    ecfg = _make(embed.TrainConfig, ctx.cfg["embed"], seed=ctx.cfg["seed"], threads=ctx.cfg["threads"])
    model = embed.train(trajs, ecfg)
    embed.save_model(model, ctx.path("embed/model"))
    for suffix in (".json", ".in.f32", ".out.f32"):
        ctx.outputs.append(ctx.path("embed/model" + suffix))


def _flows(ctx: Context) -> gravity.FlowMatrix:
    masses = _read_csv(ctx.need(ctx.path("gravity/masses.csv")), ["zone_id", "users"], dtype={"zone_id": str})
    return gravity.FlowMatrix.from_csv(ctx.need(ctx.path("gravity/flows.csv")),
                                       dict(zip(masses["zone_id"], masses["users"])))


def stage_gravity(ctx: Context) -> None:
    trajs = _trajectories(ctx)
    model = _model(ctx)
    zones = ZoneMap.from_geojson(ctx.need(ctx.source("zones")))
    flows = gravity.aggregate_flows(trajs)
    flows.to_csv(ctx.out("gravity/flows.csv"))
    ctx.write_csv("gravity/masses.csv", pd.DataFrame(sorted(flows.masses.items()), columns=["zone_id", "users"]))

    pairs = sorted(p for p in flows.symmetric() if p[0] in zones and p[1] in zones)
    d_phys = np.array([haversine(*zones.centroid(a), *zones.centroid(b)) for a, b in pairs])
    d_emb = embed.distance_table(model, pairs)
    ok = np.isfinite(d_emb) & (d_phys > 0)
    pairs = [p for p, k in zip(pairs, ok) if k]
    geo_fit = gravity.fit_normalized_flux(flows, pairs, d_phys[ok], "log_geo")
    emb_fit = gravity.fit_normalized_flux(flows, pairs, d_emb[ok], "embed_cosine")
    ctx.write_json("gravity/fits.json", {
        "fits": [geo_fit.to_dict(), emb_fit.to_dict()],
        "r2_gap_embed_minus_geo": gravity.r2_gap(emb_fit, geo_fit),
    })


def stage_detect(ctx: Context) -> None:
    dcfg = ctx.cfg["detect"]
    model = _model(ctx)
    zones = ZoneMap.from_geojson(ctx.need(ctx.source("zones")))
    excl = _read_csv(ctx.need(ctx.path("ingest/excluded_pairs.csv")), ["zone_i", "zone_j"], dtype=str)
    excluded = set(zip(excl["zone_i"], excl["zone_j"]))
    flows = _flows(ctx)

    pairs, d_phys = features.candidate_pairs(zones, dcfg["max_km"])
    d_emb = embed.distance_table(model, pairs)
    pairs, d_phys, d_emb, dropped = barriers.residual_table(pairs, d_phys, d_emb)
    if dropped:
        log.warning("%d candidate pairs dropped: zone outside the embedding vocabulary", dropped)
    keep = np.array([p not in excluded for p in pairs], dtype=bool)
    fit_pairs = [p for p, k in zip(pairs, keep) if k]
    rmodel = barriers.fit_residual_model(fit_pairs, d_phys[keep], d_emb[keep])
    main = barriers.detect_barriers(rmodel, excluded, dcfg["q_main"], "all")
    nonzero = set(flows.symmetric())
    soft = barriers.detect_barriers(rmodel, excluded, dcfg["q_soft"], "nonzero_flow", nonzero_pairs=nonzero)
    main.to_csv(ctx.out("detect/barriers_main.csv"))
    soft.to_csv(ctx.out("detect/barriers_soft.csv"))
    ctx.write_csv("detect/residuals.csv", _pairs_frame(
        rmodel.pairs, d_phys_km=rmodel.d_phys, d_embed=rmodel.d_embed, residual=rmodel.residuals,
        bin=features.distance_bin(rmodel.d_phys)))
    doc = {
        "intercept": rmodel.intercept, "beta": rmodel.beta, "n_pairs": len(rmodel.pairs),
        "dropped_out_of_vocab": dropped, "n_excluded": int((~keep).sum()),
        "bin_sizes_main": {str(k): v for k, v in main.bin_sizes.items()},
        "bin_sizes_soft": {str(k): v for k, v in soft.bin_sizes.items()},
        "skipped_bins_main": main.skipped_bins, "skipped_bins_soft": soft.skipped_bins,
        "n_flagged_main": len(main.table), "n_flagged_soft": len(soft.table),
    }
    truth_path = ctx.source("truth")
    if truth_path.exists():
        truth = synth.load_truth(ctx.need(truth_path))
        doc["recovery"] = synth.evaluate_recovery(main.pairs, truth, eligible=rmodel.pairs)
    ctx.write_json("detect/summary.json", doc)


def _demographics(ctx: Context):
    return features.read_demographics(ctx.need(ctx.source("demographics")))


def stage_features(ctx: Context) -> None:
    zones = ZoneMap.from_geojson(ctx.need(ctx.source("zones")))
    pois = PoiTable.from_csv(ctx.need(ctx.source("pois")))
    layers = load_barrier_layers(ctx.need(ctx.source("barriers")))
    demo = _demographics(ctx)
    df = features.assemble_pair_features(zones, pois, layers, demo, max_km=ctx.cfg["features"]["max_km"])
    ctx.write_csv("features/pairs.csv", df)


def _pair_table(ctx: Context, rel: str, required) -> pd.DataFrame:
    return _read_csv(ctx.need(ctx.path(rel)), required, dtype={"zone_i": str, "zone_j": str})


FEATURE_REQUIRED = ["zone_i", "zone_j", "bin_index", *[c for g in stats.GROUPS.values() for c in g]]


def stage_regress(ctx: Context) -> None:
    feats = _pair_table(ctx, "features/pairs.csv", FEATURE_REQUIRED)
    main = _pair_table(ctx, "detect/barriers_main.csv", barriers.BARRIER_COLUMNS)
    sample = stats.balanced_sample(feats, set(zip(main["zone_i"], main["zone_j"])), seed=ctx.cfg["seed"])
    ctx.write_csv("regress/sample.csv", sample)
    coefs, _ = stats.fit_bins(stats.standardize(sample), ablation=False)
    ctx.write_csv("regress/coefficients.csv", coefs)
    dis = [c for c in stats.DISAGGREGATED_POI if c in sample.columns]
    if dis:
        groups = stats.feature_groups(disaggregate_poi=True)
        groups["POI"] = dis + ["poi_js"]
        coefs_cat, _ = stats.fit_bins(stats.standardize(sample, groups), ablation=False)
        ctx.write_csv("regress/coefficients_poi_categories.csv", coefs_cat)


def stage_lrt(ctx: Context) -> None:
    sample = _pair_table(ctx, "regress/sample.csv", FEATURE_REQUIRED + ["label"])
    _, lrt_df = stats.fit_bins(stats.standardize(sample), ablation=True)
    ctx.write_csv("lrt/lrt.csv", lrt_df)


def stage_cbr(ctx: Context) -> None:
    trajs = _trajectories(ctx)
    soft = _pair_table(ctx, "detect/barriers_soft.csv", barriers.BARRIER_COLUMNS)
    pois = PoiTable.from_csv(ctx.need(ctx.source("pois")))
    demo_df = _read_csv(ctx.need(ctx.source("demographics")), ["zone_id"], dtype={"zone_id": str})
    moves = behavior.classify_movements(trajs, set(zip(soft["zone_i"], soft["zone_j"])),
                                        dict(zip(pois.poi_id, pois.category)))
    homes = behavior.home_zones(trajs)
    ratios = behavior.cbr(moves, homes)
    summ = behavior.activity_summaries(moves)
    ctx.write_csv("cbr/movements.csv", moves)
    ctx.write_csv("cbr/cbr.csv", ratios)
    ctx.write_csv("cbr/hourly.csv", summ["hourly"])
    ctx.write_csv("cbr/category.csv", summ["category"])
    ctx.write_csv("cbr/exploration.csv", summ["exploration"])

    # fixed-effects regression of the ratio on home-zone attributes
    regs = list(synth.CBR_REGRESSORS)
    missing = [c for c in regs if c not in demo_df.columns]
    doc = {"n_users": len(ratios), "zero_cbr_share": float((ratios["ratio"] == 0).mean()) if len(ratios) else None,
           "excluded_no_category": summ["category"].attrs.get("excluded", 0)}
    if missing:
        log.warning("CBR regression skipped; demographics lack %s", missing)
        doc["regression"] = None
    else:
        d = ratios.merge(demo_df, left_on="home_zone", right_on="zone_id", how="inner")
        gcol = ctx.cfg["cbr"]["group_column"]
        groups = d[gcol].astype(str).to_numpy() if gcol in d.columns else np.zeros(len(d), dtype=np.int64)
        X = d[regs].to_numpy(float)
        X = (X - X.mean(axis=0)) / np.where(X.std(axis=0) > 0, X.std(axis=0), 1.0)
        fit = stats.fit_linear_fe(d["ratio"].to_numpy(float), X, groups, regs)
        ctx.write_csv("cbr/fe_coefficients.csv", fit.table())
        doc["regression"] = {"r2": fit.r2, "within_r2": fit.within_r2, "n": fit.n, "n_groups": fit.n_groups}
    ctx.write_json("cbr/summary.json", doc)


def stage_report(ctx: Context) -> None:
    def load(rel):
        return json.loads(ctx.need(ctx.path(rel)).read_text())

    ing = load("ingest/report.json")
    grav = load("gravity/fits.json")
    det = load("detect/summary.json")
    cb = load("cbr/summary.json")
    lrt_df = _read_csv(ctx.need(ctx.path("lrt/lrt.csv")), ["bin", "group", "lambda", "normalized_share"])
    expl = _read_csv(ctx.need(ctx.path("cbr/exploration.csv")), ["kind", "rate"])
    fits = {f["kind"]: f for f in grav["fits"]}
    computed = {
        "ingest": {k: ing[k] for k in ("n_input", "kept", "n_pruned", "n_rejected", "n_users",
                                       "median_attribution_m")},
        "gravity": {"r2_embedding": fits["embed_cosine"]["r2"], "r2_geographic": fits["log_geo"]["r2"],
                    "r2_gap": grav["r2_gap_embed_minus_geo"], "geo_slope": fits["log_geo"]["slope"],
                    "n_pairs": fits["log_geo"]["n"]},
        "barriers": {"n_main": det["n_flagged_main"], "n_soft": det["n_flagged_soft"],
                     "recovery": det.get("recovery")},
        "lrt_mean_share": {g: float(v) for g, v in
                           lrt_df.groupby("group")["normalized_share"].mean().sort_index().items()},
        "cbr": {"zero_cbr_share": cb["zero_cbr_share"], "regression": cb["regression"],
                "exploration": dict(zip(expl["kind"], expl["rate"].astype(float)))},
    }
    ctx.write_json("report/report.json", {"computed": computed, "reference_values": REFERENCE_VALUES})


STAGE_FUNCS = {
    "synth": stage_synth, "ingest": stage_ingest, "embed": stage_embed, "gravity": stage_gravity,
    "detect": stage_detect, "features": stage_features, "regress": stage_regress, "lrt": stage_lrt,
    "cbr": stage_cbr, "report": stage_report,
}


def run_stage(name: str, cfg: dict) -> None:
    ctx = Context(cfg)
    log.info("stage %s", name)
    STAGE_FUNCS[name](ctx)
    ctx.record(name)


def run(command: str, cfg: dict) -> None:
    if command == "all":
        stages = list(STAGES)
        if all(cfg["inputs"].get(k) for k in ("stays", "zones", "pois", "demographics", "barriers")):
            stages.remove("synth")
        for s in stages:
            run_stage(s, cfg)
    else:
        run_stage(command, cfg)


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, ingest.IngestConfigError, synth.SynthError)):
        return EXIT_CONFIG
    if isinstance(exc, (embed.NumericError, gravity.FitError, stats.StatsError, np.linalg.LinAlgError,
                        FloatingPointError)):
        return EXIT_NUMERIC
    return EXIT_DATA


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mobarrier", description="Mobility barrier detection pipeline")
    ap.add_argument("command", choices=[*STAGES, "all"])
    ap.add_argument("--config", help="JSON config with per-stage sections")
    ap.add_argument("--threads", type=int, help="worker cap for parallel stages")
    ap.add_argument("--deterministic", action="store_true", help="single-threaded seeded execution")
    ap.add_argument("--seed", type=int, help="overrides the config seed")
    ap.add_argument("--workdir", help="overrides the config workdir")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.threads, args.deterministic)
        if args.workdir:
            cfg["workdir"] = args.workdir
        run(args.command, cfg)
    except (ConfigError, ingest.IngestConfigError, synth.SynthError, embed.EmbeddingError, embed.NumericError,
            gravity.FitError, stats.StatsError, features.FeatureError, behavior.BehaviorError, GeometryError,
            MissingInput, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        code = _exit_code(exc)
        print(f"mobarrier {args.command}: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
