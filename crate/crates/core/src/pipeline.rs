//! Stage runner: orbit, summability check, hyperbolicity, inducing,
//! binding estimates, variation sums and density, with artifacts written
//! to a directory. Also the cheap parameter scan.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::density::{
    birkhoff_histogram, density_csv, estimate_density, l1_distance, BirkhoffParams, DensityParams, Grid,
};
use crate::distortion::{summability_report, SummabilityParams};
use crate::hyperbolicity::{
    choose_delta, compute_h_delta, estimate_kappa, Sampling, DEFAULT_CANDIDATES, DEFAULT_MARGIN, H_PER_OCTAVE,
};
use crate::inducing::{build_partition, verify_binding_lemmas, InducingContext, PartitionParams, DEFAULT_P_MAX};
use crate::map::{MapConfig, MapSpec};
use crate::orbit::{compute_all_orbits, growth_fit, star_star_sum, star_sum, SumVerdict, DEFAULT_STAR_EPSILON};

pub const DEFAULT_ORBIT_N: usize = 60;
pub const DEFAULT_LEMMA_SAMPLES: usize = 1000;
pub const DEFAULT_RESIDUAL_TOL: f64 = 0.02;
pub const DEFAULT_CONSISTENCY_TOL: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub orbit_n: usize,
    pub star_epsilon: f64,
    pub candidates: Vec<f64>,
    pub margin: f64,
    pub sampling: Sampling,
    pub p_max: usize,
    pub partition: PartitionParams,
    pub lemma_samples: usize,
    pub summability: SummabilityParams,
    pub density: DensityParams,
    pub birkhoff: BirkhoffParams,
    /// Largest accepted invariance residual of the pulled-back density.
    pub residual_tol: f64,
    /// Largest accepted `L1` gap between pulled-back density and histogram.
    pub consistency_tol: f64,
    /// Skip the selection and use this `(delta, q0)`.
    pub fixed: Option<(f64, usize)>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            orbit_n: DEFAULT_ORBIT_N,
            star_epsilon: DEFAULT_STAR_EPSILON,
            candidates: DEFAULT_CANDIDATES.to_vec(),
            margin: DEFAULT_MARGIN,
            sampling: Sampling::default(),
            p_max: DEFAULT_P_MAX,
            partition: PartitionParams::default(),
            lemma_samples: DEFAULT_LEMMA_SAMPLES,
            summability: SummabilityParams::default(),
            density: DensityParams::default(),
            birkhoff: BirkhoffParams::default(),
            residual_tol: DEFAULT_RESIDUAL_TOL,
            consistency_tol: DEFAULT_CONSISTENCY_TOL,
            fixed: None,
        }
    }
}

impl PipelineConfig {
    /// Use `seed` for every random stream.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sampling.seed = seed;
        self.birkhoff.seed = seed;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Orbit,
    StarCheck,
    Hyperbolicity,
    Induce,
    BindingLemmas,
    Summability,
    Density,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Orbit => "orbit",
            Stage::StarCheck => "star-check",
            Stage::Hyperbolicity => "hyperbolicity",
            Stage::Induce => "induce",
            Stage::BindingLemmas => "binding-lemmas",
            Stage::Summability => "summability",
            Stage::Density => "density",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub pass: bool,
    pub summary: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub map: String,
    pub stages: Vec<StageRecord>,
    /// Stage whose error stopped the run.
    pub aborted_at: Option<String>,
    pub error: Option<String>,
    pub pass: bool,
}

impl PipelineReport {
    /// 0 when every verdict passed, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.pass {
            0
        } else {
            1
        }
    }
}

/// Where artifacts go; `None` keeps them in memory only.
pub struct Artifacts {
    dir: Option<PathBuf>,
    pub written: Vec<String>,
}

impl Artifacts {
    pub fn new(dir: Option<&Path>) -> std::io::Result<Self> {
        if let Some(d) = dir {
            fs::create_dir_all(d)?;
        }
        Ok(Self {
            dir: dir.map(Path::to_path_buf),
            written: Vec::new(),
        })
    }

    pub fn put(&mut self, name: &str, contents: &str) -> std::io::Result<()> {
        if let Some(d) = &self.dir {
            fs::write(d.join(name), contents)?;
        }
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn put_json(&mut self, name: &str, v: &Value) -> std::io::Result<()> {
        let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
        s.push('\n');
        self.put(name, &s)
    }
}

/// Average `h` over blocks of cells to land on a coarser grid.
pub fn coarsen(h: &[f64], factor: usize) -> Vec<f64> {
    h.chunks(factor).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

struct Run<'a> {
    report: PipelineReport,
    out: &'a mut Artifacts,
}

impl Run<'_> {
    fn stage(&mut self, stage: &str, pass: bool, summary: Value) {
        log::info!("stage {stage}: {}", if pass { "pass" } else { "fail" });
        self.report.stages.push(StageRecord {
            stage: stage.to_string(),
            pass,
            summary,
        });
    }

    fn abort(mut self, stage: &str, err: impl std::fmt::Display) -> std::io::Result<PipelineReport> {
        log::error!("stage {stage} aborted: {err}");
        self.report.aborted_at = Some(stage.to_string());
        self.report.error = Some(err.to_string());
        self.finish()
    }

    fn finish(mut self) -> std::io::Result<PipelineReport> {
        self.report.pass = self.report.aborted_at.is_none() && self.report.stages.iter().all(|s| s.pass);
        let v = serde_json::to_value(&self.report).expect("report serializes");
        self.out.put_json("report.json", &v)?;
        Ok(self.report)
    }
}

/// Run every stage in order up to `last`. Computation errors stop the run
/// and are recorded in the report; only I/O errors are returned as `Err`.
pub fn run_pipeline(
    map: &MapSpec,
    cfg: &PipelineConfig,
    last: Stage,
    out: &mut Artifacts,
) -> std::io::Result<PipelineReport> {
    let mut run = Run {
        report: PipelineReport {
            map: map.name.clone(),
            stages: Vec::new(),
            aborted_at: None,
            error: None,
            pass: false,
        },
        out,
    };
    run.out.put_json("map.json", &map.summary())?;
    run.out.put_json("config.json", &serde_json::to_value(cfg).expect("config serializes"))?;

    // Orbits.
    let orbits = match compute_all_orbits(map, cfg.orbit_n) {
        Ok(o) => o,
        Err(e) => return run.abort("orbit", e),
    };
    for rec in &orbits {
        run.out.put(&format!("orbit_{}.csv", file_label(&rec.label())), &rec.to_csv())?;
    }
    let hits: Vec<_> = orbits.iter().filter(|r| r.hit_critical.is_some()).map(|r| r.label()).collect();
    run.stage(
        "orbit",
        true,
        json!({ "n_max": cfg.orbit_n, "points": orbits.len(), "hit_critical": hits }),
    );
    if last == Stage::Orbit {
        return run.finish();
    }

    // Summability along critical orbits.
    let mut rows = Vec::new();
    let mut star_pass = true;
    for rec in &orbits {
        let s = star_sum(rec, cfg.star_epsilon);
        let ss = star_star_sum(rec, cfg.star_epsilon);
        star_pass &= s.verdict != SumVerdict::Fail;
        rows.push(json!({
            "point": rec.label(),
            "star": s.verdict,
            "star_partial": s.partial_sums.last(),
            "star_tail_increment": s.tail_increment,
            "star_star": ss.verdict,
            "star_star_partial": ss.partial_sums.last(),
            "star_star_diagnostic_only": true,
            "growth_fit": growth_fit(rec),
            "label": s.label,
        }));
    }
    let star = json!({ "epsilon": cfg.star_epsilon, "points": rows });
    run.out.put_json("star.json", &star)?;
    run.stage("star-check", star_pass, star);
    if last == Stage::StarCheck {
        return run.finish();
    }

    // Hyperbolicity: delta and q0.
    let (delta, q0) = if let Some((delta, q0)) = cfg.fixed {
        if let Err(e) = map.check_delta(delta) {
            return run.abort("hyperbolicity", e);
        }
        let v = json!({ "delta": delta, "q0": q0, "fixed": true });
        run.out.put_json("hyperbolicity.json", &v)?;
        run.stage("hyperbolicity", true, v);
        (delta, q0)
    } else {
        let exp = match choose_delta(map, &cfg.candidates, cfg.margin, &cfg.sampling, cfg.p_max) {
            Ok(r) => r,
            Err(e) => {
                if let crate::hyperbolicity::HyperbolicityError::SelectionFailure(d) = &e {
                    run.out.put_json("hyperbolicity.json", &json!({ "candidates": d }))?;
                }
                return run.abort("hyperbolicity", e);
            }
        };
        let hv = serde_json::to_value(&exp).expect("report serializes");
        run.out.put_json("hyperbolicity.json", &hv)?;
        run.stage(
            "hyperbolicity",
            true,
            json!({ "delta": exp.delta, "q0": exp.q0, "h_delta": exp.h_delta, "kappa_hat": exp.kappa_hat,
                    "c_hat": exp.c_hat, "lambda_hat": exp.lambda_hat, "fixed": false }),
        );
        (exp.delta, exp.q0)
    };
    if last == Stage::Hyperbolicity {
        return run.finish();
    }

    // Inducing partition.
    let ctx = match InducingContext::new(map, delta, q0, cfg.p_max) {
        Ok(c) => c,
        Err(e) => return run.abort("induce", e),
    };
    let part = match build_partition(&ctx, cfg.partition) {
        Ok(p) => p,
        Err(e) => return run.abort("induce", e),
    };
    run.out.put("partition.csv", &part.to_csv())?;
    let ps = part.summary();
    run.out.put_json("partition.json", &ps)?;
    run.stage("induce", true, ps);
    if last == Stage::Induce {
        return run.finish();
    }

    // Binding estimates and induced expansion.
    let lemmas = match verify_binding_lemmas(&ctx, &part, cfg.lemma_samples) {
        Ok(r) => r,
        Err(e) => return run.abort("binding-lemmas", e),
    };
    let lv = serde_json::to_value(&lemmas).expect("report serializes");
    run.out.put_json("binding_lemmas.json", &lv)?;
    run.stage(
        "binding-lemmas",
        lemmas.pass,
        json!({ "samples": lemmas.samples, "binding_ratio_max": lemmas.binding_ratio_max,
                "gamma_hat": lemmas.gamma_hat, "margin_ratio": lemmas.margin_ratio,
                "c1": lemmas.c1, "c2": lemmas.c2, "min_inf_df": lemmas.min_inf_df,
                "expansion_pass": lemmas.expansion_pass }),
    );
    if last == Stage::BindingLemmas {
        return run.finish();
    }

    // Variation and inducing-time sums.
    let summ = match summability_report(&ctx, &part, cfg.summability) {
        Ok(r) => r,
        Err(e) => return run.abort("summability", e),
    };
    run.out.put("summability.csv", &summ.to_csv())?;
    let (pv, pt) = summ.plot_data();
    run.out.put("summability_var_omega.csv", &pv)?;
    run.out.put("summability_tau_len.csv", &pt)?;
    let mut sv = serde_json::to_value(&summ).expect("report serializes");
    if let Some(o) = sv.as_object_mut() {
        o.remove("rows");
    }
    run.out.put_json("summability.json", &sv)?;
    run.stage("summability", summ.pass, sv);
    if last == Stage::Summability {
        return run.finish();
    }

    // Densities.
    let est = match estimate_density(map, &part, &cfg.density) {
        Ok(e) => e,
        Err(e) => return run.abort("density", e),
    };
    run.out.put("density.csv", &est.to_csv())?;
    run.out.put("density_induced.csv", &est.induced_csv())?;
    let hist = match birkhoff_histogram(map, &cfg.birkhoff) {
        Ok(h) => h,
        Err(e) => return run.abort("density", e),
    };
    let other = BirkhoffParams {
        seed: cfg.birkhoff.seed.wrapping_add(1),
        ..cfg.birkhoff.clone()
    };
    let hist2 = match birkhoff_histogram(map, &other) {
        Ok(h) => h,
        Err(e) => return run.abort("density", e),
    };
    run.out.put("birkhoff.csv", &density_csv(&hist.grid, &hist.density))?;
    let agreement = l1_distance(&hist.grid, &hist.density, &hist2.density);
    let consistency = if est.grid.m % hist.grid.m == 0 {
        let h = coarsen(&est.h_map, est.grid.m / hist.grid.m);
        Some(l1_distance(&hist.grid, &h, &hist.density))
    } else if hist.grid.m % est.grid.m == 0 {
        let h = coarsen(&hist.density, hist.grid.m / est.grid.m);
        Some(l1_distance(&est.grid, &est.h_map, &h))
    } else {
        None
    };
    let mut dv = est.summary();
    if let Some(o) = dv.as_object_mut() {
        o.insert("birkhoff".into(), serde_json::to_value(&cfg.birkhoff).expect("params serialize"));
        o.insert("birkhoff_restarts".into(), json!(hist.restarts));
        o.insert("birkhoff_l1".into(), json!(consistency));
        o.insert("seed_agreement_l1".into(), json!(agreement));
        o.insert("residual_tol".into(), json!(cfg.residual_tol));
        o.insert("consistency_tol".into(), json!(cfg.consistency_tol));
    }
    run.out.put_json("density.json", &dv)?;
    let pass = est.invariance_residual <= cfg.residual_tol && consistency.is_some_and(|c| c <= cfg.consistency_tol);
    run.stage("density", pass, dv);
    run.finish()
}

fn file_label(s: &str) -> String {
    s.chars()
        .map(|c| match c {
            '+' => 'p',
            '-' => 'm',
            c if c.is_ascii_alphanumeric() || c == '.' => c,
            _ => '_',
        })
        .collect()
}

/// One row of a parameter scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub params: Vec<(String, f64)>,
    /// Worst verdict over binding critical points.
    pub star_verdict: Option<SumVerdict>,
    /// Largest partial sum at `N` over binding critical points.
    pub star_partial: Option<f64>,
    pub growth_margin: Option<f64>,
    pub h_delta: Option<usize>,
    pub kappa_hat: Option<f64>,
    pub hit_critical: bool,
    pub pass: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanParams {
    pub n: usize,
    pub epsilon: f64,
    pub sampling: Sampling,
    pub p_max: usize,
}

impl Default for ScanParams {
    fn default() -> Self {
        Self {
            n: DEFAULT_ORBIT_N,
            epsilon: DEFAULT_STAR_EPSILON,
            sampling: Sampling::default(),
            p_max: DEFAULT_P_MAX,
        }
    }
}

fn scan_one(family: &str, params: &[(String, f64)], sp: &ScanParams) -> ScanRow {
    let mut row = ScanRow {
        params: params.to_vec(),
        star_verdict: None,
        star_partial: None,
        growth_margin: None,
        h_delta: None,
        kappa_hat: None,
        hit_critical: false,
        pass: false,
        error: None,
    };
    let p: Vec<(&str, f64)> = params.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    let map = match MapSpec::build(&MapConfig::family(family, &p)) {
        Ok(m) => m,
        Err(e) => {
            row.error = Some(e.to_string());
            return row;
        }
    };
    let orbits = match compute_all_orbits(&map, sp.n) {
        Ok(o) => o,
        Err(e) => {
            row.error = Some(e.to_string());
            return row;
        }
    };
    row.hit_critical = orbits.iter().any(|r| r.hit_critical.is_some());
    let mut verdict = None;
    for rec in orbits.iter().filter(|r| r.binds()) {
        let s = star_sum(rec, sp.epsilon);
        if let Some(&last) = s.partial_sums.last() {
            row.star_partial = Some(row.star_partial.map_or(last, |v: f64| v.max(last)));
        }
        verdict = Some(match (verdict, s.verdict) {
            (Some(SumVerdict::Fail), _) | (_, SumVerdict::Fail) => SumVerdict::Fail,
            _ => s.verdict,
        });
        if let Some(g) = growth_fit(rec) {
            row.growth_margin = Some(row.growth_margin.map_or(g.margin, |m: f64| m.min(g.margin)));
        }
    }
    row.star_verdict = verdict.or(Some(SumVerdict::NotApplicable));
    match compute_h_delta(&map, map.delta, H_PER_OCTAVE, sp.p_max) {
        Ok(h) => row.h_delta = Some(h.h),
        Err(e) => row.error = Some(e.to_string()),
    }
    row.kappa_hat = estimate_kappa(&map, map.delta, &sp.sampling).map(|k| k.kappa_hat);
    row.pass = row.error.is_none() && !row.hit_critical && row.star_verdict != Some(SumVerdict::Fail);
    row
}

/// Cheap stages for every parameter tuple; rows keep the input order.
pub fn scan(family: &str, grid: &[Vec<(String, f64)>], sp: &ScanParams) -> Vec<ScanRow> {
    grid.par_iter().map(|p| scan_one(family, p, sp)).collect()
}

pub fn scan_csv(rows: &[ScanRow]) -> String {
    let names: Vec<&str> = rows.first().map(|r| r.params.iter().map(|p| p.0.as_str()).collect()).unwrap_or_default();
    let mut s = names.join(",");
    if !s.is_empty() {
        s.push(',');
    }
    s.push_str("star_verdict,star_partial,growth_margin,h_delta,kappa_hat,hit_critical,pass,error\n");
    let f = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    for r in rows {
        for (_, v) in &r.params {
            s.push_str(&format!("{v},"));
        }
        let verdict = r
            .star_verdict
            .map(|v| serde_json::to_value(v).unwrap().as_str().unwrap_or_default().to_string())
            .unwrap_or_default();
        s.push_str(&format!(
            "{verdict},{},{},{},{},{},{},{}\n",
            f(r.star_partial),
            f(r.growth_margin),
            r.h_delta.map(|h| h.to_string()).unwrap_or_default(),
            f(r.kappa_hat),
            r.hit_critical,
            r.pass,
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
        ));
    }
    s
}

/// Parse `name=lo:hi:step` or `name=v1,v2,...` specs into the cartesian
/// product of values.
pub fn parse_grid(specs: &[String]) -> Result<Vec<Vec<(String, f64)>>, String> {
    let mut axes: Vec<(String, Vec<f64>)> = Vec::new();
    for spec in specs {
        let (name, vals) = spec.split_once('=').ok_or_else(|| format!("expected name=values, got `{spec}`"))?;
        let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("bad number `{t}`: {e}"));
        let values = if vals.contains(':') {
            let parts: Vec<&str> = vals.split(':').collect();
            if parts.len() != 3 {
                return Err(format!("range must be lo:hi:step, got `{vals}`"));
            }
            let (lo, hi, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
            if !(step > 0.0) || hi < lo {
                return Err(format!("empty or invalid range `{vals}`"));
            }
            let n = ((hi - lo) / step + 1e-9).floor() as usize;
            // Rounded so 1.6 + 0.1 k prints as 1.7, not 1.7000000000000002.
            (0..=n).map(|k| ((lo + step * k as f64) * 1e12).round() / 1e12).collect()
        } else if vals.trim().is_empty() {
            Vec::new()
        } else {
            vals.split(',').map(num).collect::<Result<Vec<_>, _>>()?
        };
        axes.push((name.trim().to_string(), values));
    }
    let mut out: Vec<Vec<(String, f64)>> = vec![Vec::new()];
    if axes.is_empty() {
        return Ok(Vec::new());
    }
    for (name, values) in &axes {
        let mut next = Vec::new();
        for prefix in &out {
            for &v in values {
                let mut p = prefix.clone();
                p.push((name.clone(), v));
                next.push(p);
            }
        }
        out = next;
    }
    Ok(out)
}

/// Density grid helper for callers that only have a map.
pub fn grid_for(map: &MapSpec, m: usize) -> Grid {
    Grid::new(map.domain, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let g = parse_grid(&["a=1.6:2.0:0.1".into()]).unwrap();
        assert_eq!(g.len(), 5);
        assert!((g[4][0].1 - 2.0).abs() < 1e-12);
        let g = parse_grid(&["a=1,2".into(), "s=0.5,0.6,0.7".into()]).unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g[1], vec![("a".to_string(), 1.0), ("s".to_string(), 0.6)]);
        assert!(parse_grid(&[]).unwrap().is_empty());
        assert!(parse_grid(&["a=".into()]).unwrap().is_empty());
        assert!(parse_grid(&["a".into()]).is_err());
    }

    #[test]
    fn unimodal_scan() {
        let grid = parse_grid(&["a=1.6:2.0:0.1".into()]).unwrap();
        let sp = ScanParams { n: 40, ..Default::default() };
        let rows = scan("unimodal", &grid, &sp);
        assert_eq!(rows.len(), 5);
        let last = &rows[4];
        assert_eq!(last.star_partial, Some(0.0));
        assert!(scan("unimodal", &[], &sp).is_empty());
        let csv = scan_csv(&rows);
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.starts_with("a,star_verdict"));
    }

    #[test]
    fn coarsen_averages_blocks() {
        assert_eq!(coarsen(&[1.0, 3.0, 2.0, 2.0], 2), vec![2.0, 2.0]);
    }

    #[test]
    fn file_labels_are_safe() {
        assert_eq!(file_label("0+"), "0p");
        assert_eq!(file_label("-0.5-"), "m0.5m");
    }
}
