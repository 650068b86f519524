//! Imputation of post-dropout cells under MAR, copy-reference or
//! delta-adjusted pattern-mixture mechanisms, and tipping-point grids.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{analyze_all, AnalysisSpec, PooledCoefficient};
use crate::data::{Dataset, SubjectRecord};
use crate::family::Family;
use crate::mda::{run_mda, McmcConfig, ModelSpec, PosteriorDraw};
use crate::samplers::RngStream;
use crate::{Error, Result};

/// One entry of a pattern-specific shift table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaEntry {
    /// Treatment arm, 0 or 1.
    pub arm: u8,
    pub visit: String,
    /// Dropout pattern `s` (index of the last observed visit).
    pub pattern: usize,
    pub delta: f64,
}

/// Shifts added to the linear predictor of post-dropout draws: the mean for
/// normal and skew families, the log-odds for binary and ordinal, each
/// category's log-odds against the reference for nominal, the log-mean for
/// counts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaShift {
    pub delta0: f64,
    pub delta1: f64,
    /// Entries that override the arm-level shift for a visit and pattern.
    #[serde(default)]
    pub table: Vec<DeltaEntry>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mechanism {
    #[default]
    Mar,
    CopyReference,
    Delta(DeltaShift),
}

impl DeltaShift {
    pub fn arms(delta0: f64, delta1: f64) -> Self {
        DeltaShift { delta0, delta1, table: Vec::new() }
    }

    fn is_zero(&self) -> bool {
        self.delta0 == 0.0 && self.delta1 == 0.0 && self.table.iter().all(|e| e.delta == 0.0)
    }

    /// Shift for arm `g`, zero-based visit `j` and pattern `s`.
    pub fn get(&self, ds: &Dataset, g: u8, j: usize, s: usize) -> f64 {
        self.table
            .iter()
            .rev()
            .find(|e| e.arm == g && e.pattern == s && ds.visit_names[j] == e.visit)
            .map_or(if g == 0 { self.delta0 } else { self.delta1 }, |e| e.delta)
    }
}

impl Mechanism {
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        if let Mechanism::Delta(d) = self {
            if !(d.delta0.is_finite() && d.delta1.is_finite()) || d.table.iter().any(|e| !e.delta.is_finite()) {
                return Err(Error::config("mechanism: non-finite shift"));
            }
            for e in &d.table {
                if e.arm > 1 || !ds.visit_names.contains(&e.visit) || e.pattern >= ds.p() {
                    return Err(Error::config(format!("mechanism.table: invalid entry {e:?}")));
                }
            }
        }
        if matches!(self, Mechanism::Mar) {
            return Ok(());
        }
        let Some(t) = ds.treatment else {
            return Err(Error::config("mechanism: no treatment covariate declared"));
        };
        if let Some(s) = ds.subjects.iter().find(|s| s.x[t] != 0.0 && s.x[t] != 1.0) {
            return Err(Error::config(format!(
                "mechanism: treatment `{}` must be 0/1, subject {} has {}",
                ds.covariate_names[t], s.id, s.x[t]
            )));
        }
        Ok(())
    }

    /// Sub-stream key of the post-dropout draws. MAR and an all-zero shift
    /// share a key, so they produce identical imputations.
    pub fn stream_key(&self) -> u64 {
        match self {
            Mechanism::Mar => 0,
            Mechanism::Delta(d) if d.is_zero() => 0,
            Mechanism::CopyReference => 1,
            Mechanism::Delta(d) => {
                let mut h = 0x243F_6A88_85A3_08D3u64;
                let mix = |h: u64, v: u64| (h ^ v).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(29);
                h = mix(h, d.delta0.to_bits());
                h = mix(h, d.delta1.to_bits());
                for e in &d.table {
                    h = mix(h, u64::from(e.arm));
                    h = mix(h, e.pattern as u64);
                    h = mix(h, e.delta.to_bits());
                    for b in e.visit.bytes() {
                        h = mix(h, u64::from(b));
                    }
                }
                h | 2
            }
        }
    }
}

/// Draw visits `s..p` of one subject in order; `values` holds covariates
/// and responses with every pre-dropout cell filled.
pub fn impute_dropout(
    ds: &Dataset,
    spec: &ModelSpec,
    params: &[Family],
    values: &mut [f64],
    s: usize,
    mechanism: &Mechanism,
    rng: &mut RngStream,
) {
    let q = ds.q();
    let arm = ds.treatment.map_or(0, |t| u8::from(values[t] == 1.0));
    let mut pred = values.to_vec();
    if let (Mechanism::CopyReference, Some(t)) = (mechanism, ds.treatment) {
        pred[t] = 0.0;
    }
    for j in s..ds.p() {
        let z = spec.visits[j].design.eval(&pred);
        let shift = match mechanism {
            Mechanism::Delta(d) => d.get(ds, arm, j, s),
            _ => 0.0,
        };
        let y = params[j].sample_response_shifted(&z, shift, rng);
        values[q + j] = y;
        pred[q + j] = y;
    }
}

/// Complete dataset `k` from one posterior draw.
pub fn complete_draw(
    ds: &Dataset,
    spec: &ModelSpec,
    draw: &PosteriorDraw,
    mechanism: &Mechanism,
    base: &RngStream,
    k: usize,
) -> Result<Dataset> {
    let q = ds.q();
    let key = mechanism.stream_key();
    let subjects = ds
        .subjects
        .iter()
        .enumerate()
        .map(|(i, subj)| {
            let mut v = draw.values[i].clone();
            if subj.s < ds.p() {
                let mut rng = base.derive(&[key, k as u64, i as u64]);
                impute_dropout(ds, spec, &draw.params, &mut v, subj.s, mechanism, &mut rng);
            }
            SubjectRecord::new(subj.id.clone(), v[..q].to_vec(), v[q..].iter().map(|&y| Some(y)).collect())
        })
        .collect();
    Dataset::new(ds.covariate_names.clone(), ds.visit_names.clone(), ds.visit_types.clone(), subjects, ds.treatment)
}

/// Stream used for post-dropout draws.
pub fn dropout_stream(seed: u64) -> RngStream {
    RngStream::new(seed).derive(&[0xB2])
}

/// One completed dataset per posterior draw.
pub fn generate_imputations(
    ds: &Dataset,
    spec: &ModelSpec,
    draws: &[PosteriorDraw],
    mechanism: &Mechanism,
    seed: u64,
) -> Result<Vec<Dataset>> {
    mechanism.validate(ds)?;
    let base = dropout_stream(seed);
    draws.par_iter().enumerate().map(|(k, d)| complete_draw(ds, spec, d, mechanism, &base, k)).collect()
}

/// Run the sampler and complete its draws under `mechanism`.
pub fn impute_mda(ds: &Dataset, spec: &ModelSpec, cfg: &McmcConfig, mechanism: &Mechanism) -> Result<Vec<Dataset>> {
    mechanism.validate(ds)?;
    let out = run_mda(ds, spec, cfg)?;
    generate_imputations(ds, spec, &out.draws, mechanism, cfg.seed)
}

/// Significance band of a p-value with thresholds 0.05, 0.01, 0.001, 0.0001.
pub fn significance_band(p: f64) -> &'static str {
    match p {
        p if p < 1e-4 => "<0.0001",
        p if p < 1e-3 => "<0.001",
        p if p < 1e-2 => "<0.01",
        p if p < 0.05 => "<0.05",
        _ => ">=0.05",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TippingCell {
    pub delta0: f64,
    pub delta1: f64,
    pub result: PooledCoefficient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TippingGrid {
    pub delta0: Vec<f64>,
    pub delta1: Vec<f64>,
    /// Row-major over `delta0`, then `delta1`.
    pub cells: Vec<TippingCell>,
}

pub const TIPPING_COLUMNS: [&str; 8] = ["delta0", "delta1", "estimate", "total_variance", "t", "df", "p", "band"];

impl TippingGrid {
    pub fn cell(&self, a: usize, b: usize) -> &TippingCell {
        &self.cells[a * self.delta1.len() + b]
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(TIPPING_COLUMNS)?;
        for c in &self.cells {
            let r = &c.result;
            wtr.write_record(&[
                c.delta0.to_string(),
                c.delta1.to_string(),
                r.estimate.to_string(),
                r.total.to_string(),
                r.t.to_string(),
                r.df.to_string(),
                r.p.to_string(),
                significance_band(r.p).to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Shift grid evaluated on a single set of posterior draws.
pub fn tipping_grid_from_draws(
    ds: &Dataset,
    spec: &ModelSpec,
    draws: &[PosteriorDraw],
    seed: u64,
    delta0: &[f64],
    delta1: &[f64],
    analysis: &AnalysisSpec,
) -> Result<TippingGrid> {
    if delta0.is_empty() || delta1.is_empty() {
        return Err(Error::config("tipping grid: both shift lists must be non-empty"));
    }
    analysis.validate(ds)?;
    let target = analysis.target(ds).ok_or_else(|| Error::config("analysis.coefficient: no treatment declared"))?;
    let pairs: Vec<(f64, f64)> = delta0.iter().flat_map(|&a| delta1.iter().map(move |&b| (a, b))).collect();
    let cells = pairs
        .into_iter()
        .map(|(a, b)| {
            let mech = Mechanism::Delta(DeltaShift::arms(a, b));
            let sets = generate_imputations(ds, spec, draws, &mech, seed)?;
            let pooled = analyze_all(&sets, analysis)?;
            let result = pooled.get(&target).cloned().expect("target validated");
            Ok(TippingCell { delta0: a, delta1: b, result })
        })
        .collect::<Result<_>>()?;
    Ok(TippingGrid { delta0: delta0.to_vec(), delta1: delta1.to_vec(), cells })
}

pub fn tipping_point_grid(
    ds: &Dataset,
    spec: &ModelSpec,
    cfg: &McmcConfig,
    delta0: &[f64],
    delta1: &[f64],
    analysis: &AnalysisSpec,
) -> Result<TippingGrid> {
    if delta0.is_empty() || delta1.is_empty() {
        return Err(Error::config("tipping grid: both shift lists must be non-empty"));
    }
    Mechanism::Delta(DeltaShift::default()).validate(ds)?;
    let out = run_mda(ds, spec, cfg)?;
    tipping_grid_from_draws(ds, spec, &out.draws, cfg.seed, delta0, delta1, analysis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{VisitType, INTERCEPT};
    use crate::family::FamilyKind;
    use crate::numeric::expit;

    fn one_visit(g: f64) -> (Dataset, ModelSpec, Vec<Family>) {
        let subjects = vec![
            SubjectRecord::new("a", vec![1.0, g], vec![None]),
            SubjectRecord::new("b", vec![1.0, 1.0 - g], vec![Some(1.0)]),
        ];
        let ds = Dataset::new(vec![INTERCEPT.into(), "g".into()], vec!["y".into()], vec![VisitType::Binary], subjects, Some(1))
            .unwrap();
        let spec = ModelSpec::default_for(&ds);
        let mut f = Family::new(FamilyKind::Logistic, 2);
        f.coef = vec![0.2, 0.9];
        (ds, spec, vec![f])
    }

    #[test]
    fn control_arm_copy_reference_equals_mar() {
        let (ds, spec, params) = one_visit(0.0);
        for seed in 0..50 {
            let mut a = vec![1.0, 0.0, f64::NAN];
            let mut b = a.clone();
            impute_dropout(&ds, &spec, &params, &mut a, 0, &Mechanism::Mar, &mut RngStream::new(seed));
            impute_dropout(&ds, &spec, &params, &mut b, 0, &Mechanism::CopyReference, &mut RngStream::new(seed));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_shift_shares_the_mar_stream() {
        assert_eq!(Mechanism::Delta(DeltaShift::arms(0.0, 0.0)).stream_key(), Mechanism::Mar.stream_key());
        assert_ne!(Mechanism::Delta(DeltaShift::arms(0.5, 0.0)).stream_key(), Mechanism::Mar.stream_key());
        assert_ne!(
            Mechanism::Delta(DeltaShift::arms(0.5, 0.0)).stream_key(),
            Mechanism::Delta(DeltaShift::arms(0.0, 0.5)).stream_key()
        );
    }

    #[test]
    fn shift_moves_the_log_odds() {
        let (ds, spec, params) = one_visit(1.0);
        let n = 100_000;
        let mut rng = RngStream::new(7);
        let mech = Mechanism::Delta(DeltaShift::arms(0.0, -1.0));
        let mut hits = [0usize; 2];
        for _ in 0..n {
            for (k, m) in [&Mechanism::Mar, &mech].into_iter().enumerate() {
                let mut v = vec![1.0, 1.0, f64::NAN];
                impute_dropout(&ds, &spec, &params, &mut v, 0, m, &mut rng);
                hits[k] += usize::from(v[2] == 1.0);
            }
        }
        let logit = |h: usize| (h as f64 / (n - h) as f64).ln();
        let diff = logit(hits[1]) - logit(hits[0]);
        let se = hits.iter().map(|&h| 1.0 / h as f64 + 1.0 / (n - h) as f64).sum::<f64>().sqrt();
        assert!((diff + 1.0).abs() < 3.0 * se, "{diff} ± {se}");
        assert!((hits[0] as f64 / n as f64 - expit(1.1)).abs() < 0.01);
    }

    #[test]
    fn table_overrides_arm_shift() {
        let (ds, _, _) = one_visit(1.0);
        let d = DeltaShift {
            delta0: 0.1,
            delta1: 0.2,
            table: vec![DeltaEntry { arm: 1, visit: "y".into(), pattern: 0, delta: -3.0 }],
        };
        assert_eq!(d.get(&ds, 1, 0, 0), -3.0);
        assert_eq!(d.get(&ds, 0, 0, 0), 0.1);
        let bad = Mechanism::Delta(DeltaShift { table: vec![DeltaEntry { arm: 2, ..d.table[0].clone() }], ..d });
        assert!(bad.validate(&ds).is_err());
    }

    #[test]
    fn copy_reference_needs_binary_treatment() {
        let subjects = vec![SubjectRecord::new("a", vec![1.0, 0.5], vec![None])];
        let ds = Dataset::new(vec![INTERCEPT.into(), "g".into()], vec!["y".into()], vec![VisitType::Binary], subjects, Some(1))
            .unwrap();
        assert!(matches!(Mechanism::CopyReference.validate(&ds), Err(Error::Config(_))));
        assert!(Mechanism::Mar.validate(&ds).is_ok());
    }

    #[test]
    fn bands() {
        assert_eq!(significance_band(0.2), ">=0.05");
        assert_eq!(significance_band(0.03), "<0.05");
        assert_eq!(significance_band(5e-5), "<0.0001");
    }
}
