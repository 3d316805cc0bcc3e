"""Stage runner: each stage reads and writes files in the output directory,
so stages can be run one at a time or in sequence."""
from __future__ import annotations

import json
import logging
import platform
import time
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import spearmanr

from . import analytics, counterfactual as cf, text
from .akm import akm_fit
from .cluster import apply_clusters, choose_g, cluster_employers, employer_features
from .config import STAGES, RunConfig
from .errors import ConfigurationError, JobValuesError
from .estimate import (EmployerEstimates, assemble_estimates, calibrate_sigma_and_decompose, joint_estimate,
                       weighted_corr)
from .flows import NONEMP, build_flows, estimation_set, stability_filter
from .io import (ads_frame, flows_to_triplets, read_ads, read_panel, sha256_file, write_ads, write_csv, write_json,
                 write_jsonl)
from .model import solve_values
from .simulate import SimConfig, draw_attribute_plan, draw_economy, draw_establishments, simulate_panel, synthesize_ads

logger = logging.getLogger(__name__)

# artifact file names
PANEL, ADS, ESTABLISHMENTS = "panel.csv", "ads.jsonl", "establishments.csv"
TRUTH, TRUTH_SCALARS, PLAN = "truth_employers.csv", "truth_scalars.json", "attribute_plan.csv"
AD_ATTRIBUTES, PREVALENCE, NGRAMS = "ad_attributes.csv", "prevalence.csv", "top_ngrams.csv"
CLUSTERS, CLUSTER_LOG = "clusters.csv", "cluster_objective.csv"
ESTIMATES, SCALARS, FLOWS, TRACE, AKM = ("estimates.csv", "estimate_scalars.json", "flows.csv",
                                         "estimate_trace.jsonl", "akm_coefficients.csv")
BY_GROUP = "estimates_by_group.csv"
MANIFEST = "manifest.json"

PRODUCERS = {
    PANEL: "simulate", ADS: "simulate", ESTABLISHMENTS: "simulate", TRUTH: "simulate", PLAN: "simulate",
    AD_ATTRIBUTES: "extract", CLUSTERS: "cluster", ESTIMATES: "estimate", SCALARS: "estimate",
}
REQUIRES = {
    "simulate": (),
    "extract": (ADS,),
    "cluster": (PANEL,),
    "estimate": (PANEL, CLUSTERS),
    "regress": (ESTIMATES, SCALARS, AD_ATTRIBUTES, CLUSTERS, ADS, PANEL),
    "counterfactual": (ESTIMATES, SCALARS, AD_ATTRIBUTES, CLUSTERS),
    "validate": (AD_ATTRIBUTES,),
}
VALUE_COLUMNS = ("V", "psi", "a")


class StageDependencyError(ConfigurationError):
    """A stage was requested before the stage producing its inputs."""


@dataclass
class _Context:
    cfg: RunConfig
    out: Path
    inputs: dict
    outputs: dict

    def path(self, name: str) -> Path:
        explicit = {PANEL: self.cfg.paths.panel, ADS: self.cfg.paths.ads,
                    ESTABLISHMENTS: self.cfg.paths.establishments}.get(name)
        return Path(explicit) if explicit is not None else self.out / name

    def read(self, name: str) -> Path:
        p = self.path(name)
        self.inputs[str(p)] = sha256_file(p)
        return p

    def optional(self, name: str) -> Path | None:
        p = self.path(name)
        return self.read(name) if p.exists() else None

    def wrote(self, p: Path) -> None:
        self.outputs[p.name] = sha256_file(p)


def _dictionary(cfg: RunConfig) -> text.AttributeDictionary:
    return text.AttributeDictionary.from_csv(cfg.paths.dictionary)


# ---------------------------------------------------------------------------
# stages


def stage_simulate(ctx: _Context) -> None:
    c = ctx.cfg
    s = c.simulate
    sim = SimConfig(seed=c.seed, n_workers=s.n_workers, n_periods=s.n_periods, wage_noise_sd=s.wage_noise_sd,
                    worker_effect_sd=s.worker_effect_sd, demographics=dict(s.demographics),
                    param_sampler=s.economy.model_dump(), year_education_trend=s.year_education_trend,
                    age_coefs=tuple(s.age_coefs), n_industries=s.n_industries, n_locations=s.n_locations,
                    n_occupations=s.n_occupations)
    params = draw_economy(sim)
    est = draw_establishments(params, sim)
    result = simulate_panel(params, sim, est)
    d = _dictionary(c)
    employer, plan = draw_attribute_plan(params, d, c.seed, s.ads_per_employer, s.attribute_base_range,
                                         s.attribute_loading)
    ads = synthesize_ads(params, plan, d, c.seed, employer_of_ad=employer, establishments=est,
                         base_date=s.base_date, n_years=s.n_periods)
    vals = solve_values(params, params.flow_utility())
    truth = pd.DataFrame({"establishment_id": np.arange(params.J), "psi": params.psi, "a": params.a,
                          "delta": params.delta, "rho": params.rho, "f": params.f,
                          "sigmaV": params.sigma * (vals.V - vals.V_N), "V": vals.V - vals.V_N})
    ctx.wrote(write_csv(result.panel, ctx.out / PANEL))
    ctx.wrote(write_ads(ads, ctx.out / ADS))
    ctx.wrote(write_csv(est, ctx.out / ESTABLISHMENTS))
    ctx.wrote(write_csv(truth, ctx.out / TRUTH))
    ctx.wrote(write_json({"sigma": params.sigma, "lambda0": params.lambda0, "lambda1": params.lambda1,
                          "beta": params.beta, "u_N": params.u_N}, ctx.out / TRUTH_SCALARS))
    ctx.wrote(write_csv(pd.DataFrame(plan, columns=d.names).rename_axis("ad_id").reset_index(), ctx.out / PLAN))


def stage_extract(ctx: _Context) -> None:
    c = ctx.cfg
    d = _dictionary(c)
    abbrev = text.load_abbreviations(c.paths.abbreviations)
    ads = read_ads(ctx.read(ADS))
    det = text.extract_corpus(ads, d, abbrev)
    ctx.wrote(write_csv(det, ctx.out / AD_ATTRIBUTES, index=True))
    prev, _ = text.prevalence(det)
    ctx.wrote(write_csv(prev, ctx.out / PREVALENCE))
    items = [s for ad in ads for _, lst in text.extract_lists(ad.text, abbrev) for s in lst]
    grams = text.top_ngrams(items, c.text.ngram_max, c.text.top_k, text.load_stopwords(c.paths.stopwords))
    ctx.wrote(write_csv(pd.DataFrame({"ngram": [" ".join(g) for g, _ in grams], "n": [len(g) for g, _ in grams],
                                      "count": [k for _, k in grams]}), ctx.out / NGRAMS))


def _stable_panel(ctx: _Context) -> pd.DataFrame:
    panel = read_panel(ctx.read(PANEL))
    fc = ctx.cfg.flows
    if fc.stability_filter:
        keep = stability_filter(panel, fc.min_periods, fc.min_nonsingleton)
        drop = (panel["employer_id"] != NONEMP) & ~panel["employer_id"].isin(keep)
        logger.info("stability filter keeps %d employers", len(keep))
        panel = panel[~drop]
    return panel


def stage_cluster(ctx: _Context) -> None:
    c = ctx.cfg
    panel = _stable_panel(ctx)
    flows = build_flows(panel, c.flows.gap_days)
    if not c.cluster.enabled:
        assign = pd.Series(np.arange(flows.J), index=pd.Index(flows.ids, name="establishment_id"), name="cluster_id")
        history = pd.DataFrame(columns=["run", "iteration", "objective"])
    else:
        est_path = ctx.optional(ESTABLISHMENTS)
        est = pd.read_csv(est_path, dtype={"occupation": str}) if est_path else None
        feats = employer_features(panel, flows, est, c.cluster.n_locations)
        G = c.cluster.G or choose_g(flows.J, c.cluster.divisor)
        assign, res = cluster_employers(feats, flows.L, G, seed=c.seed, n_init=c.cluster.n_init,
                                        max_iter=c.cluster.max_iter)
        history = pd.DataFrame([{"run": r, "iteration": i, "objective": v}
                                for r, log in enumerate(res.history) for i, v in enumerate(log)])
    ctx.wrote(write_csv(assign.reset_index(), ctx.out / CLUSTERS))
    ctx.wrote(write_csv(history, ctx.out / CLUSTER_LOG))


def _read_clusters(ctx: _Context) -> pd.Series:
    df = pd.read_csv(ctx.read(CLUSTERS))
    return pd.Series(df["cluster_id"].to_numpy(), index=df["establishment_id"].to_numpy())


def _estimate_sample(cpanel: pd.DataFrame, cfg: RunConfig):
    e = cfg.estimate
    flows = build_flows(cpanel, cfg.flows.gap_days)
    sub = flows.restrict(estimation_set(flows))
    joint = joint_estimate(sub, tol=e.tol, ftol=e.ftol, max_iter=e.max_iter, max_rounds=e.max_rounds,
                           round_tol=e.round_tol, shrinkage=e.shrinkage, probe_iter=e.probe_iter)
    akm = akm_fit(cpanel, {int(i): int(i) for i in sub.ids}, tol=e.akm_tol, iter_lim=e.akm_iter_lim)
    psi = akm.psi.reindex(sub.ids).to_numpy()
    dec = calibrate_sigma_and_decompose(joint.sigmaV, joint.sigmaV_N, joint.search, psi, sub.L)
    return assemble_estimates(joint, psi, dec), joint, akm, sub, dec


def _scalars(est: EmployerEstimates, dec) -> dict:
    out = est.scalars()
    out["corr_psi_a"] = dec.corr_psi_a
    return out


def stage_estimate(ctx: _Context) -> None:
    c = ctx.cfg
    cpanel = apply_clusters(_stable_panel(ctx), _read_clusters(ctx))
    est, joint, akm, flows, dec = _estimate_sample(cpanel, c)
    ctx.wrote(write_csv(est.to_frame(), ctx.out / ESTIMATES))
    ctx.wrote(write_json(_scalars(est, dec), ctx.out / SCALARS))
    ctx.wrote(write_csv(flows_to_triplets(flows), ctx.out / FLOWS))
    ctx.wrote(write_jsonl(joint.trace, ctx.out / TRACE))
    ctx.wrote(write_csv(akm.beta_x.rename_axis("term").reset_index(), ctx.out / AKM))
    if c.estimate.group_by:
        frames = []
        for g, sub in cpanel.groupby(c.estimate.group_by, sort=True):
            try:
                e_g, _, _, _, d_g = _estimate_sample(sub, c)
            except JobValuesError as exc:
                logger.warning("group %s=%s failed: %s", c.estimate.group_by, g, exc)
                frames.append(pd.DataFrame({"group": [g], "error": [str(exc)]}))
                continue
            frames.append(e_g.to_frame().assign(group=g, sigma_hat=e_g.sigma_hat, lambda0=e_g.lambda0,
                                                lambda1=e_g.lambda1, corr_psi_a=d_g.corr_psi_a))
        ctx.wrote(write_csv(pd.concat(frames, ignore_index=True), ctx.out / BY_GROUP))


# ---------------------------------------------------------------------------
# cluster-level ad content and controls


def _load_estimates(ctx: _Context) -> EmployerEstimates:
    df = pd.read_csv(ctx.read(ESTIMATES))
    sc = json.loads(ctx.read(SCALARS).read_text(encoding="utf-8"))
    return EmployerEstimates.from_frame(df, sc["sigma_hat"], sc["lambda0"], sc["lambda1"], sc["sigmaV_N"])


@dataclass
class _ClusterData:
    est: EmployerEstimates
    shares: pd.DataFrame
    controls: pd.DataFrame | None
    regressors: list
    pay: list
    nonpay: list
    ads: pd.DataFrame


def _cluster_data(ctx: _Context) -> _ClusterData:
    c = ctx.cfg
    d = _dictionary(c)
    est_all = _load_estimates(ctx)
    clusters = _read_clusters(ctx)
    ads = pd.read_csv(ctx.read(AD_ATTRIBUTES), index_col="ad_id")
    ads["cluster_id"] = ads["establishment_id"].map(clusters)
    ads = ads[ads["cluster_id"].isin(est_all.ids)]
    content = d.names + [f"cat_{k}" for k in text.CATEGORIES] + ["n_words"]
    shares = ads.groupby("cluster_id")[content].mean()
    keep = np.isin(est_all.ids, shares.index)
    if keep.sum() < len(est_all.ids):
        logger.warning("%d clusters without ads dropped from regressions", int((~keep).sum()))
    est = _subset(est_all, keep)
    shares = shares.reindex(est.ids)
    shares["n_words"] = shares["n_words"] / 100.0
    if c.regress.regressors == "category":
        pay = [f"cat_{k}" for k in text.PAY_CATEGORIES]
        nonpay = [f"cat_{k}" for k in text.NONPAY_CATEGORIES]
    else:
        pay = [a.name for a in d.attributes if a.category in text.PAY_CATEGORIES]
        nonpay = [a.name for a in d.attributes if a.category not in text.PAY_CATEGORIES]
    varying = shares.columns[shares.std(ddof=0) > 0]
    pay = [x for x in pay if x in varying]
    nonpay = [x for x in nonpay if x in varying]
    regressors = pay + nonpay + (["n_words"] if c.regress.include_word_count and "n_words" in varying else [])
    controls = _controls(ctx, clusters, est)
    return _ClusterData(est, shares, controls, regressors, pay, nonpay, ads)


def _subset(e: EmployerEstimates, keep) -> EmployerEstimates:
    f = e.f[keep] / e.f[keep].sum()
    return EmployerEstimates(e.ids[keep], e.sigmaV[keep], e.sigmaV_N, e.psi[keep], e.u_scaled[keep], e.sigma_hat,
                             e.a[keep], e.s[keep], f, e.delta[keep], e.rho[keep], e.lambda0, e.lambda1, e.L[keep])


def _controls(ctx: _Context, clusters: pd.Series, est: EmployerEstimates) -> pd.DataFrame | None:
    """Worker-year weighted industry/occupation/location composition of each
    cluster, one level per block omitted."""
    wanted = ctx.cfg.regress.controls
    if not wanted:
        return None
    est_path = ctx.optional(ESTABLISHMENTS)
    panel = read_panel(ctx.read(PANEL))
    emp = panel[panel["employer_id"] != NONEMP]
    wy = emp.groupby("employer_id").size().rename("wy")
    if est_path is not None:
        info = pd.read_csv(est_path, dtype={"occupation": str}).set_index("establishment_id")
    else:
        info = emp.groupby("employer_id")["occupation"].first().to_frame()
    info = info.join(wy, how="inner")
    info["cluster_id"] = clusters.reindex(info.index).to_numpy()
    info = info[info["cluster_id"].isin(est.ids)]
    blocks = []
    for col in wanted:
        if col not in info.columns:
            raise ConfigurationError(f"control {col!r} unavailable: no such establishment attribute")
        key = info[col].astype(str).str[:2] if col == "occupation" else info[col].astype(str)
        tab = pd.crosstab(info["cluster_id"], key, values=info["wy"], aggfunc="sum", normalize="index").fillna(0.0)
        tab = tab.reindex(est.ids).fillna(0.0)
        ref = tab.sum().idxmax()
        tab = tab.drop(columns=[ref])
        tab = tab.loc[:, tab.std(ddof=0) > 0]
        tab.columns = [f"{col}_{x}" for x in tab.columns]
        blocks.append(tab)
    out = pd.concat(blocks, axis=1)
    return out if out.shape[1] else None


def _resolve_tokens(tokens, data: _ClusterData, dictionary) -> list:
    cols = []
    for t in tokens:
        if t == "pay":
            cols += data.pay
        elif t == "nonpay":
            cols += data.nonpay
        elif f"cat_{t}" in data.shares.columns:
            cols.append(f"cat_{t}")
        elif t in data.shares.columns:
            cols.append(t)
        else:
            raise ConfigurationError(f"unknown regressor {t!r} in scenario definition")
    return list(dict.fromkeys(c for c in cols if data.shares[c].std(ddof=0) > 0))


# ---------------------------------------------------------------------------
# regressions, counterfactuals, validation


def _values(est: EmployerEstimates) -> dict:
    return {"V": est.V, "psi": est.psi, "a": est.a}


def stage_regress(ctx: _Context) -> None:
    c = ctx.cfg
    data = _cluster_data(ctx)
    est, shares, controls, w = data.est, data.shares, data.controls, data.est.L
    content = [x for x in shares.columns if x != "n_words" and shares[x].std(ddof=0) > 0]
    tables = [analytics.attribute_on_value(shares[content], v, controls, w).assign(value=k)
              for k, v in _values(est).items()]
    ctx.wrote(write_csv(pd.concat(tables, ignore_index=True), ctx.out / "attribute_on_value.csv"))

    rows, coefs, posted = [], [], {}
    sets = {"pay": data.pay, "nonpay": data.nonpay, "all": data.regressors}
    for k, v in _values(est).items():
        for name, cols in sets.items():
            if not cols:
                continue
            fit = analytics.value_on_attributes(v, shares[cols], None, w)
            row = {"value": k, "regressors": name, "n": fit.result.n, "r2": fit.result.r2,
                   "adjusted_r2": fit.result.adjusted_r2, "partial_r2": None}
            if controls is not None:
                row["partial_r2"] = analytics.partial_r2(v, shares[cols], controls, w)
            rows.append(row)
            coefs.append(fit.result.table(f"{k}~{name}"))
        posted[k] = analytics.value_on_attributes(v, shares[data.regressors], controls, w).fitted
    ctx.wrote(write_csv(pd.DataFrame(rows), ctx.out / "r2_table.csv"))
    ctx.wrote(write_csv(pd.concat(coefs, ignore_index=True), ctx.out / "regression_coefficients.csv"))

    steps = min(c.regress.forward_steps, len(data.regressors))
    fs_rows = []
    for k, v in _values(est).items():
        path = analytics.forward_selection(v, shares[data.regressors], controls, w, steps)
        fs_rows.append({"value": k, "step": 0, "added": "", "adjusted_r2": path.adjusted_r2[0]})
        fs_rows += [{"value": k, "step": i + 1, "added": a, "adjusted_r2": r}
                    for i, (a, r) in enumerate(zip(path.order, path.adjusted_r2[1:]))]
    ctx.wrote(write_csv(pd.DataFrame(fs_rows), ctx.out / "forward_selection.csv"))

    ctx.wrote(write_csv(_logit_table(ctx, data), ctx.out / "logit_r2.csv"))

    ads = ads_frame(read_ads(ctx.read(ADS))).set_index("ad_id").loc[data.ads.index]
    pv = pd.DataFrame({f"posted_{k}": v for k, v in posted.items()}, index=est.ids)
    dur_rows = []
    for col in pv.columns:
        res, dropped = analytics.duration_regression(ads, data.ads["cluster_id"], pv[[col]],
                                                     None if controls is None else controls.set_index(est.ids),
                                                     pd.Series(w, index=est.ids))
        t = res.table(col)
        dur_rows.append(t.assign(dropped_ads=dropped))
    ctx.wrote(write_csv(pd.concat(dur_rows, ignore_index=True), ctx.out / "duration_regression.csv"))

    hires = analytics.hires_from_panel(read_panel(ctx.read(PANEL)), c.simulate.base_date)
    links = analytics.link_ads_to_hires(ads.reset_index(), hires, c.regress.link_window_days)
    ctx.wrote(write_csv(links, ctx.out / "ad_hire_links.csv"))


def _logit_table(ctx: _Context, data: _ClusterData) -> pd.DataFrame:
    """Pseudo-R² of each attribute on ad-level cell dummies."""
    c = ctx.cfg
    d = _dictionary(c)
    ads = data.ads
    if not c.regress.logit_cells:
        return pd.DataFrame(columns=["attribute", "pseudo_r2", "n", "note"])
    est_path = ctx.optional(ESTABLISHMENTS)
    info = pd.read_csv(est_path, dtype={"occupation": str}).set_index("establishment_id") if est_path else None
    frame = pd.DataFrame(index=ads.index)
    for col in c.regress.logit_cells:
        if info is None or col not in info.columns:
            raise ConfigurationError(f"logit cell variable {col!r} unavailable")
        frame[col] = info[col].reindex(ads["establishment_id"]).astype(str).to_numpy()
    X = analytics.cell_dummies(frame, c.regress.logit_cells, c.regress.min_cell)
    rows = []
    for name in d.names:
        y = ads[name].to_numpy(dtype=float)
        try:
            r = analytics.logit_fit(y, X)
            rows.append({"attribute": name, "pseudo_r2": r.pseudo_r2, "n": len(y), "note": ""})
        except JobValuesError as exc:
            rows.append({"attribute": name, "pseudo_r2": np.nan, "n": len(y), "note": str(exc)})
    return pd.DataFrame(rows)


def stage_counterfactual(ctx: _Context) -> None:
    c = ctx.cfg
    data = _cluster_data(ctx)
    d = _dictionary(c)
    defs = {name: _resolve_tokens(toks, data, d) for name, toks in c.counterfactual.scenarios.items()}
    scenarios = cf.build_scenarios(data.est, data.shares, data.controls, defs)
    table = cf.scenario_table(data.est, scenarios, logistic=c.counterfactual.logistic)
    ctx.wrote(write_csv(table, ctx.out / "counterfactual.csv"))


def stage_validate(ctx: _Context) -> None:
    c = ctx.cfg
    d = _dictionary(c)
    det = pd.read_csv(ctx.read(AD_ATTRIBUTES), index_col="ad_id")
    manual_path = c.paths.manual_labels or (ctx.out / PLAN if (ctx.out / PLAN).exists() else None)
    if manual_path is not None:
        ctx.inputs[str(manual_path)] = sha256_file(manual_path)
        manual = pd.read_csv(manual_path, index_col="ad_id")
        common = det.index.intersection(manual.index)
        cols = [n for n in d.names if n in manual.columns]
        per = text.validation_metrics(det.loc[common, cols], manual.loc[common, cols])
        pooled = text.validation_metrics(det.loc[common, cols].to_numpy().ravel(),
                                              manual.loc[common, cols].to_numpy().ravel())
        per.loc["all"] = pooled
        ctx.wrote(write_csv(per.rename_axis("attribute").reset_index(), ctx.out / "validation.csv"))
    truth_path, est_path = ctx.path(TRUTH), ctx.path(ESTIMATES)
    if truth_path.exists() and est_path.exists() and ctx.path(CLUSTERS).exists():
        ctx.wrote(write_json(_recovery(ctx), ctx.out / "recovery.json"))


def _recovery(ctx: _Context) -> dict:
    est = _load_estimates(ctx)
    truth = pd.read_csv(ctx.read(TRUTH)).set_index("establishment_id")
    scal = json.loads(ctx.read(TRUTH_SCALARS).read_text(encoding="utf-8")) if ctx.path(TRUTH_SCALARS).exists() else {}
    clusters = _read_clusters(ctx)
    panel = read_panel(ctx.read(PANEL))
    wy = panel[panel["employer_id"] != NONEMP].groupby("employer_id").size()
    t = truth.join(wy.rename("wy"), how="inner")
    t["cluster_id"] = clusters.reindex(t.index).to_numpy()
    t = t.dropna(subset=["cluster_id"])
    agg = pd.DataFrame({k: (t[k] * t["wy"]).groupby(t["cluster_id"]).sum() / t["wy"].groupby(t["cluster_id"]).sum()
                        for k in ("sigmaV", "psi", "a")})
    agg = agg.reindex(est.ids)
    ok = agg.notna().all(axis=1).to_numpy()
    w = est.L[ok]
    out = {
        "n_clusters": int(ok.sum()),
        "spearman_V": float(spearmanr(est.sigmaV[ok], agg["sigmaV"].to_numpy()[ok])[0]),
        "corr_psi": weighted_corr(est.psi[ok], agg["psi"].to_numpy()[ok], w),
        "corr_a": weighted_corr(est.a[ok], agg["a"].to_numpy()[ok], w),
        "corr_psi_a_hat": weighted_corr(est.psi[ok], est.a[ok], w),
        "corr_psi_a_true": weighted_corr(agg["psi"].to_numpy()[ok], agg["a"].to_numpy()[ok], w),
        "sigma_hat": est.sigma_hat,
        "lambda0_hat": est.lambda0,
        "lambda1_hat": est.lambda1,
    }
    out.update({f"{k}_true": v for k, v in scal.items()})
    return out


STAGE_FUNCS = {
    "simulate": stage_simulate, "extract": stage_extract, "cluster": stage_cluster, "estimate": stage_estimate,
    "regress": stage_regress, "counterfactual": stage_counterfactual, "validate": stage_validate,
}
assert tuple(STAGE_FUNCS) == STAGES


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "pandas", "pyyaml", "pydantic"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def run_pipeline(cfg: RunConfig, stages=None) -> dict:
    """Run ``stages`` (default: those listed in the config) in the given order.

    Every stage checks that its input files exist, either from explicit
    paths, from earlier stages of this run or from a previous run in the
    same output directory.  Returns the manifest, which is also written to
    ``manifest.json``.
    """
    stages = list(cfg.stages if stages is None else stages)
    bad = [s for s in stages if s not in STAGES]
    if bad:
        raise ConfigurationError(f"unknown stages {bad}")
    out = Path(cfg.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"config": cfg.echo(), "versions": _versions(), "stages": []}
    for name in stages:
        ctx = _Context(cfg, out, {}, {})
        missing = [f for f in REQUIRES[name] if not ctx.path(f).exists()]
        if missing:
            need = sorted({PRODUCERS.get(f, "?") for f in missing})
            raise StageDependencyError(f"stage {name!r} needs {missing}; run {need} first")
        logger.info("stage %s", name)
        t0 = time.perf_counter()
        STAGE_FUNCS[name](ctx)
        manifest["stages"].append({"name": name, "inputs": ctx.inputs, "outputs": ctx.outputs,
                                   "seconds": round(time.perf_counter() - t0, 3)})
    write_json(manifest, out / MANIFEST)
    return manifest
