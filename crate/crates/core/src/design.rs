//! Linear-predictor designs: products of covariates, responses and level indicators.

use serde::{Deserialize, Serialize};

use crate::data::{ColumnRef, Dataset, VisitType};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Factor {
    Covariate(usize),
    Visit(usize),
    /// Indicator `y_visit == level`.
    Level { visit: usize, level: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term(pub Vec<Factor>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub q: usize,
    pub terms: Vec<Term>,
    pub names: Vec<String>,
}

fn predictor_terms(ds: &Dataset, visits: impl Iterator<Item = usize>) -> (Vec<Term>, Vec<String>) {
    let mut terms = Vec::new();
    let mut names = Vec::new();
    for k in 0..ds.q() {
        terms.push(Term(vec![Factor::Covariate(k)]));
        names.push(ds.covariate_names[k].clone());
    }
    for v in visits {
        match ds.visit_types[v] {
            VisitType::Nominal(k) => {
                for level in 1..k {
                    terms.push(Term(vec![Factor::Level { visit: v, level }]));
                    names.push(format!("{}[{level}]", ds.visit_names[v]));
                }
            }
            _ => {
                terms.push(Term(vec![Factor::Visit(v)]));
                names.push(ds.visit_names[v].clone());
            }
        }
    }
    (terms, names)
}

impl Design {
    /// All covariates and all earlier visits as main effects.
    pub fn main_effects(ds: &Dataset, visit: usize) -> Design {
        let (terms, names) = predictor_terms(ds, 0..visit);
        Design { q: ds.q(), terms, names }
    }

    /// All covariates and every other visit.
    pub fn all_others(ds: &Dataset, visit: usize) -> Design {
        let (terms, names) = predictor_terms(ds, (0..ds.p()).filter(|&v| v != visit));
        Design { q: ds.q(), terms, names }
    }

    /// Parse terms such as `x`, `y1`, `y0:g` or `y2[3]` (level indicator).
    pub fn parse(ds: &Dataset, terms: &[String]) -> Result<Design> {
        let mut out = Vec::with_capacity(terms.len());
        for t in terms {
            let mut factors = Vec::new();
            for f in t.split(':') {
                let f = f.trim();
                let (name, level) = match f.find('[') {
                    Some(i) if f.ends_with(']') => {
                        let lv: u32 = f[i + 1..f.len() - 1]
                            .parse()
                            .map_err(|_| Error::config(format!("bad level in term `{t}`")))?;
                        (&f[..i], Some(lv))
                    }
                    _ => (f, None),
                };
                let col = ds
                    .column(name)
                    .ok_or_else(|| Error::config(format!("term `{t}` references unknown column `{name}`")))?;
                factors.push(match (col, level) {
                    (ColumnRef::Covariate(k), None) => Factor::Covariate(k),
                    (ColumnRef::Visit(v), None) => Factor::Visit(v),
                    (ColumnRef::Visit(v), Some(level)) => {
                        if !ds.visit_types[v].levels().is_some_and(|k| level >= 1 && level <= k) {
                            return Err(Error::config(format!("level {level} invalid in term `{t}`")));
                        }
                        Factor::Level { visit: v, level }
                    }
                    (ColumnRef::Covariate(_), Some(_)) => {
                        return Err(Error::config(format!("level indicator on covariate in `{t}`")))
                    }
                });
            }
            out.push(Term(factors));
        }
        Ok(Design { q: ds.q(), terms: out, names: terms.to_vec() })
    }

    pub fn dim(&self) -> usize {
        self.terms.len()
    }

    fn factor_value(&self, f: &Factor, values: &[f64]) -> f64 {
        match *f {
            Factor::Covariate(k) => values[k],
            Factor::Visit(v) => values[self.q + v],
            Factor::Level { visit, level } => f64::from(u8::from(values[self.q + visit] == f64::from(level))),
        }
    }

    pub fn eval_into(&self, values: &[f64], out: &mut [f64]) {
        for (o, t) in out.iter_mut().zip(&self.terms) {
            *o = t.0.iter().map(|f| self.factor_value(f, values)).product();
        }
    }

    pub fn eval(&self, values: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.dim()];
        self.eval_into(values, &mut z);
        z
    }

    /// `∂z/∂y_visit` at `values` (level indicators are constant in the value).
    pub fn derivative(&self, values: &[f64], visit: usize) -> Vec<f64> {
        self.terms
            .iter()
            .map(|t| {
                let mut total = 0.0;
                for (a, f) in t.0.iter().enumerate() {
                    if *f == Factor::Visit(visit) {
                        let rest: f64 = t
                            .0
                            .iter()
                            .enumerate()
                            .filter(|&(b, _)| b != a)
                            .map(|(_, g)| self.factor_value(g, values))
                            .product();
                        total += rest;
                    }
                }
                total
            })
            .collect()
    }

    fn term_visits(t: &Term) -> impl Iterator<Item = usize> + '_ {
        t.0.iter().filter_map(|f| match *f {
            Factor::Visit(v) | Factor::Level { visit: v, .. } => Some(v),
            Factor::Covariate(_) => None,
        })
    }

    pub fn references(&self, visit: usize) -> bool {
        self.terms.iter().any(|t| Self::term_visits(t).any(|v| v == visit))
    }

    /// True when some term multiplies the two visits together.
    pub fn couples(&self, a: usize, b: usize) -> bool {
        self.terms.iter().any(|t| {
            let vs: Vec<usize> = Self::term_visits(t).collect();
            if a == b {
                vs.iter().filter(|&&v| v == a).count() > 1
            } else {
                vs.contains(&a) && vs.contains(&b)
            }
        })
    }

    pub fn max_visit(&self) -> Option<usize> {
        self.terms.iter().flat_map(Self::term_visits).max()
    }

    pub fn covariate_index(&self, k: usize) -> Option<usize> {
        self.terms.iter().position(|t| t.0 == [Factor::Covariate(k)])
    }
}
