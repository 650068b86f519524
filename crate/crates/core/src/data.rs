//! Subject-level datasets, missingness classification and monotone ordering.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const INTERCEPT: &str = "(intercept)";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisitType {
    Continuous,
    Binary,
    Ordinal(u32),
    Nominal(u32),
    Count,
}

impl VisitType {
    pub fn is_discrete(self) -> bool {
        !matches!(self, VisitType::Continuous)
    }

    /// Number of categories for categorical kinds.
    pub fn levels(self) -> Option<u32> {
        match self {
            VisitType::Binary => Some(2),
            VisitType::Ordinal(k) | VisitType::Nominal(k) => Some(k),
            _ => None,
        }
    }

    pub fn check(self, v: f64) -> std::result::Result<(), String> {
        if !v.is_finite() {
            return Err(format!("non-finite value {v}"));
        }
        match self {
            VisitType::Continuous => Ok(()),
            VisitType::Count => {
                if v < 0.0 || v.fract() != 0.0 {
                    Err(format!("count value {v} is not a non-negative integer"))
                } else {
                    Ok(())
                }
            }
            _ => {
                let k = self.levels().unwrap();
                if v.fract() != 0.0 || v < 1.0 || v > k as f64 {
                    Err(format!("categorical value {v} outside 1..={k}"))
                } else {
                    Ok(())
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub x: Vec<f64>,
    /// Responses; unobserved cells hold NaN until imputed.
    pub y: Vec<f64>,
    pub observed: Vec<bool>,
    /// One-based index of the last observed response, 0 if none.
    pub s: usize,
}

impl SubjectRecord {
    pub fn new(id: impl Into<String>, x: Vec<f64>, y: Vec<Option<f64>>) -> Self {
        let observed: Vec<bool> = y.iter().map(Option::is_some).collect();
        let y = y.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        let s = observed.iter().rposition(|&o| o).map_or(0, |j| j + 1);
        SubjectRecord { id: id.into(), x, y, observed, s }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub covariate_names: Vec<String>,
    pub visit_names: Vec<String>,
    pub visit_types: Vec<VisitType>,
    pub subjects: Vec<SubjectRecord>,
    /// Covariate index of the treatment indicator.
    pub treatment: Option<usize>,
}

/// A named column: covariate or response.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColumnRef {
    Covariate(usize),
    Visit(usize),
}

impl Dataset {
    pub fn new(
        covariate_names: Vec<String>,
        visit_names: Vec<String>,
        visit_types: Vec<VisitType>,
        subjects: Vec<SubjectRecord>,
        treatment: Option<usize>,
    ) -> Result<Self> {
        let ds = Dataset { covariate_names, visit_names, visit_types, subjects, treatment };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let (q, p) = (self.q(), self.p());
        if self.visit_types.len() != p {
            return Err(Error::Schema("visit_types length differs from visit count".into()));
        }
        if let Some(t) = self.treatment {
            if t >= q {
                return Err(Error::Schema(format!("treatment index {t} out of range")));
            }
        }
        for (r, s) in self.subjects.iter().enumerate() {
            if s.x.len() != q || s.y.len() != p || s.observed.len() != p {
                return Err(Error::Schema(format!("subject {} has wrong arity", s.id)));
            }
            if let Some(k) = s.x.iter().position(|v| !v.is_finite()) {
                return Err(Error::Schema(format!(
                    "missing covariate `{}` for subject {}",
                    self.covariate_names[k], s.id
                )));
            }
            for j in 0..p {
                if s.observed[j] {
                    self.visit_types[j].check(s.y[j]).map_err(|m| Error::Parse {
                        row: r + 1,
                        column: self.visit_names[j].clone(),
                        message: m,
                    })?;
                }
            }
            let last = s.observed.iter().rposition(|&o| o).map_or(0, |j| j + 1);
            if last != s.s {
                return Err(Error::Schema(format!("subject {} has inconsistent pattern", s.id)));
            }
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.visit_names.len()
    }

    pub fn q(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn has_intercept(&self) -> bool {
        self.covariate_names.first().is_some_and(|c| c == INTERCEPT)
    }

    pub fn column(&self, name: &str) -> Option<ColumnRef> {
        if let Some(k) = self.covariate_names.iter().position(|c| c == name) {
            return Some(ColumnRef::Covariate(k));
        }
        self.visit_names.iter().position(|c| c == name).map(ColumnRef::Visit)
    }

    /// Covariates followed by responses for one subject.
    pub fn row_values(&self, i: usize) -> Vec<f64> {
        let s = &self.subjects[i];
        s.x.iter().chain(s.y.iter()).copied().collect()
    }

    /// Keep only the named visits, recomputing patterns.
    pub fn select_visits(&self, names: &[&str]) -> Result<Dataset> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.visit_names
                    .iter()
                    .position(|v| v == n)
                    .ok_or_else(|| Error::Schema(format!("unknown visit `{n}`")))
            })
            .collect::<Result<_>>()?;
        let subjects = self
            .subjects
            .iter()
            .map(|s| {
                let y = idx.iter().map(|&j| s.observed[j].then_some(s.y[j])).collect();
                SubjectRecord::new(s.id.clone(), s.x.clone(), y)
            })
            .collect();
        Dataset::new(
            self.covariate_names.clone(),
            idx.iter().map(|&j| self.visit_names[j].clone()).collect(),
            idx.iter().map(|&j| self.visit_types[j]).collect(),
            subjects,
            self.treatment,
        )
    }

    pub fn missing_count(&self) -> usize {
        self.subjects.iter().map(|s| s.observed.iter().filter(|&&o| !o).count()).sum()
    }

    /// Write as CSV with `id`, covariates (without the intercept) and responses.
    pub fn write_csv<W: Write>(&self, w: W, missing_token: &str) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let skip = usize::from(self.has_intercept());
        let mut header = vec!["id".to_string()];
        header.extend(self.covariate_names[skip..].iter().cloned());
        header.extend(self.visit_names.iter().cloned());
        wtr.write_record(&header)?;
        for s in &self.subjects {
            let mut rec = vec![s.id.clone()];
            rec.extend(s.x[skip..].iter().map(|v| v.to_string()));
            for j in 0..self.p() {
                rec.push(if s.observed[j] { s.y[j].to_string() } else { missing_token.to_string() });
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path, missing_token: &str) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f), missing_token)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitColumn {
    pub name: String,
    pub kind: VisitType,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSchema {
    #[serde(default)]
    pub id: Option<String>,
    pub covariates: Vec<String>,
    pub visits: Vec<VisitColumn>,
    #[serde(default = "default_missing")]
    pub missing_token: String,
    #[serde(default = "default_true")]
    pub intercept: bool,
    /// Treatment indicator column; defaults to the last covariate.
    #[serde(default)]
    pub treatment: Option<String>,
}

fn default_missing() -> String {
    "NA".into()
}

fn default_true() -> bool {
    true
}

impl ColumnSchema {
    pub fn new(covariates: &[&str], visits: &[(&str, VisitType)]) -> Self {
        ColumnSchema {
            id: Some("id".into()),
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
            visits: visits.iter().map(|(n, k)| VisitColumn { name: n.to_string(), kind: *k }).collect(),
            missing_token: default_missing(),
            intercept: true,
            treatment: None,
        }
    }
}

pub fn load_dataset(path: &Path, schema: &ColumnSchema) -> Result<Dataset> {
    read_dataset(std::fs::File::open(path)?, schema)
}

pub fn read_dataset<R: Read>(reader: R, schema: &ColumnSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found in header")))
    };
    let id_col = schema.id.as_deref().map(find).transpose()?;
    let cov_cols: Vec<usize> = schema.covariates.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let visit_cols: Vec<usize> = schema.visits.iter().map(|v| find(&v.name)).collect::<Result<_>>()?;
    let is_missing = |s: &str| s.is_empty() || s == schema.missing_token;
    let parse = |row: usize, column: &str, s: &str| -> Result<f64> {
        s.parse::<f64>().map_err(|e| Error::Parse {
            row,
            column: column.to_string(),
            message: format!("`{s}`: {e}"),
        })
    };

    let mut subjects = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        let id = match id_col {
            Some(c) => rec.get(c).unwrap_or("").to_string(),
            None => row.to_string(),
        };
        let mut x = Vec::with_capacity(cov_cols.len() + 1);
        if schema.intercept {
            x.push(1.0);
        }
        for (name, &c) in schema.covariates.iter().zip(&cov_cols) {
            let cell = rec.get(c).unwrap_or("");
            if is_missing(cell) {
                return Err(Error::Schema(format!("missing covariate `{name}` at row {row}")));
            }
            x.push(parse(row, name, cell)?);
        }
        let mut y = Vec::with_capacity(visit_cols.len());
        for (v, &c) in schema.visits.iter().zip(&visit_cols) {
            let cell = rec.get(c).unwrap_or("");
            if is_missing(cell) {
                y.push(None);
                continue;
            }
            let val = parse(row, &v.name, cell)?;
            v.kind.check(val).map_err(|m| Error::Domain(format!("row {row}, column `{}`: {m}", v.name)))?;
            y.push(Some(val));
        }
        subjects.push(SubjectRecord::new(id, x, y));
    }

    let mut covariate_names: Vec<String> = Vec::new();
    if schema.intercept {
        covariate_names.push(INTERCEPT.into());
    }
    covariate_names.extend(schema.covariates.iter().cloned());
    let treatment = match &schema.treatment {
        Some(t) => Some(
            covariate_names
                .iter()
                .position(|c| c == t)
                .ok_or_else(|| Error::Schema(format!("treatment column `{t}` is not a covariate")))?,
        ),
        None if !schema.covariates.is_empty() => Some(covariate_names.len() - 1),
        None => None,
    };
    Dataset::new(
        covariate_names,
        schema.visits.iter().map(|v| v.name.clone()).collect(),
        schema.visits.iter().map(|v| v.kind).collect(),
        subjects,
        treatment,
    )
}

/// Missing cells of one subject, as zero-based visit indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CellSets {
    pub discrete: Vec<usize>,
    pub continuous: Vec<usize>,
    pub post: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MissingnessPartition {
    pub subjects: Vec<CellSets>,
    /// `n[j]` is the number of subjects observed at least through visit `j` (zero-based).
    pub n: Vec<usize>,
}

pub fn pattern_counts(ds: &Dataset) -> Vec<usize> {
    (0..ds.p()).map(|j| ds.subjects.iter().filter(|s| s.s > j).count()).collect()
}

pub fn classify_missingness(ds: &Dataset) -> MissingnessPartition {
    let subjects = ds
        .subjects
        .iter()
        .map(|s| {
            let mut c = CellSets::default();
            for j in 0..ds.p() {
                if j >= s.s {
                    c.post.push(j);
                } else if !s.observed[j] {
                    if ds.visit_types[j].is_discrete() {
                        c.discrete.push(j);
                    } else {
                        c.continuous.push(j);
                    }
                }
            }
            c
        })
        .collect();
    MissingnessPartition { subjects, n: pattern_counts(ds) }
}

/// Permutation that stably orders subjects by descending pattern.
pub fn monotone_order(ds: &Dataset) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..ds.n()).collect();
    idx.sort_by(|&a, &b| ds.subjects[b].s.cmp(&ds.subjects[a].s));
    idx
}

pub fn sort_monotone(ds: &Dataset) -> (Dataset, Vec<usize>) {
    let order = monotone_order(ds);
    let mut out = ds.clone();
    out.subjects = order.iter().map(|&i| ds.subjects[i].clone()).collect();
    let n = pattern_counts(&out);
    (out, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subj(y: &[Option<f64>]) -> SubjectRecord {
        SubjectRecord::new("a", vec![1.0], y.to_vec())
    }

    fn ds(types: Vec<VisitType>, subjects: Vec<SubjectRecord>) -> Dataset {
        let p = types.len();
        Dataset::new(
            vec![INTERCEPT.into()],
            (1..=p).map(|j| format!("y{j}")).collect(),
            types,
            subjects,
            None,
        )
        .unwrap()
    }

    #[test]
    fn classify_mixed_subject() {
        use VisitType::*;
        let d = ds(
            vec![Continuous, Continuous, Binary, Binary],
            vec![subj(&[Some(1.0), None, Some(2.0), None])],
        );
        let m = classify_missingness(&d);
        assert_eq!(d.subjects[0].s, 3);
        assert_eq!(m.subjects[0].continuous, vec![1]);
        assert!(m.subjects[0].discrete.is_empty());
        assert_eq!(m.subjects[0].post, vec![3]);
    }

    #[test]
    fn classify_boundaries() {
        use VisitType::*;
        let d = ds(vec![Continuous, Binary], vec![subj(&[Some(0.0), Some(1.0)]), subj(&[None, None])]);
        let m = classify_missingness(&d);
        assert_eq!(m.subjects[0], CellSets::default());
        assert_eq!(d.subjects[1].s, 0);
        assert_eq!(m.subjects[1].post, vec![0, 1]);
    }

    #[test]
    fn sort_examples() {
        use VisitType::*;
        let t = vec![Continuous; 3];
        let d = ds(
            t.clone(),
            vec![
                subj(&[Some(1.0), None, None]),
                subj(&[Some(1.0), Some(1.0), Some(1.0)]),
                subj(&[Some(1.0), Some(1.0), None]),
            ],
        );
        let (sorted, n) = sort_monotone(&d);
        let pats: Vec<usize> = sorted.subjects.iter().map(|s| s.s).collect();
        assert_eq!(pats, vec![3, 2, 1]);
        assert_eq!(n, vec![3, 2, 1]);
        let empty = ds(t, vec![]);
        let (e, n) = sort_monotone(&empty);
        assert_eq!(e.n(), 0);
        assert_eq!(n, vec![0, 0, 0]);
    }

    #[test]
    fn load_with_na_and_errors() {
        let schema = ColumnSchema::new(&["x"], &[("y1", VisitType::Continuous), ("y2", VisitType::Count)]);
        let csv = "id,x,y1,y2\n1,0.5,1.0,2\n2,1.5,NA,3\n3,2.5,0.1,\n";
        let d = read_dataset(csv.as_bytes(), &schema).unwrap();
        assert_eq!(d.n(), 3);
        assert_eq!(d.missing_count(), 2);
        assert_eq!(d.subjects[2].s, 1);

        let bad = "id,x,y1\n1,0.5,1.0\n";
        match read_dataset(bad.as_bytes(), &schema) {
            Err(Error::Schema(m)) => assert!(m.contains("y2")),
            other => panic!("{other:?}"),
        }
        let neg = "id,x,y1,y2\n1,0.5,1.0,-1\n";
        assert!(matches!(read_dataset(neg.as_bytes(), &schema), Err(Error::Domain(_))));
        let junk = "id,x,y1,y2\n1,0.5,abc,1\n";
        match read_dataset(junk.as_bytes(), &schema) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 1);
                assert_eq!(column, "y1");
            }
            other => panic!("{other:?}"),
        }
        let nocov = "id,x,y1,y2\n1,NA,1.0,1\n";
        assert!(matches!(read_dataset(nocov.as_bytes(), &schema), Err(Error::Schema(_))));
    }

    #[test]
    fn ordinal_range_checked() {
        let schema = ColumnSchema::new(&["x"], &[("y", VisitType::Ordinal(3))]);
        assert!(read_dataset("id,x,y\n1,0,4\n".as_bytes(), &schema).is_err());
        assert!(read_dataset("id,x,y\n1,0,3\n".as_bytes(), &schema).is_ok());
    }
}
