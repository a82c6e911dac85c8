//! Dataset schema, CSV ingestion, and subject-wise splitting.
//!
//! CSV contract: a header row naming `subject_id`, `time`, `response`, an
//! optional `x` column, and one column per covariate (any other name). Empty
//! covariate cells mean "missing"; `subject_id`, `time`, `response`, and `x`
//! must always be present in a row. Floats are written in shortest
//! round-trip form, so a write/load cycle is bit-exact.

pub mod synthetic;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observation: a subject at an ordinal time, a covariate vector (entries
/// may be missing), an optional spatial location, and the response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub subject_id: String,
    pub time: u32,
    pub covariates: Vec<Option<f64>>,
    pub x: Option<f64>,
    pub response: f64,
}

impl Record {
    pub fn complete_covariates(&self) -> Option<Vec<f64>> {
        self.covariates.iter().copied().collect()
    }

    pub fn is_complete(&self) -> bool {
        self.covariates.iter().all(Option::is_some)
    }
}

/// An immutable collection of records with the covariate schema and optional
/// named landmark depths for per-location evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub covariate_names: Vec<String>,
    pub spatial: bool,
    #[serde(default)]
    pub landmarks: BTreeMap<String, f64>,
}

impl Dataset {
    pub fn new(covariate_names: Vec<String>, spatial: bool) -> Self {
        Dataset {
            records: Vec::new(),
            covariate_names,
            spatial,
            landmarks: BTreeMap::new(),
        }
    }

    pub fn num_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|n| n == name)
    }

    /// Validates per-record invariants against the schema.
    pub fn validate(&self) -> Result<()> {
        for (i, rec) in self.records.iter().enumerate() {
            if rec.covariates.len() != self.num_covariates() {
                return Err(Error::Data(format!(
                    "record {i}: {} covariates, schema has {}",
                    rec.covariates.len(),
                    self.num_covariates()
                )));
            }
            if rec.subject_id.is_empty() {
                return Err(Error::Data(format!("record {i}: empty subject id")));
            }
            if !rec.response.is_finite() {
                return Err(Error::Data(format!("record {i}: non-finite response")));
            }
            if self.spatial {
                match rec.x {
                    Some(x) if (0.0..=1.0).contains(&x) => {}
                    Some(x) => {
                        return Err(Error::Data(format!("record {i}: x = {x} outside [0, 1]")))
                    }
                    None => return Err(Error::Data(format!("record {i}: missing x"))),
                }
            }
        }
        Ok(())
    }

    /// Subject ids in order of first appearance.
    pub fn subjects(&self) -> Vec<String> {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        for rec in &self.records {
            if seen.insert(rec.subject_id.clone()) {
                out.push(rec.subject_id.clone());
            }
        }
        out
    }

    /// A dataset with the same schema restricted to the given subjects.
    pub fn filter_subjects(&self, keep: &std::collections::BTreeSet<&str>) -> Dataset {
        Dataset {
            records: self
                .records
                .iter()
                .filter(|r| keep.contains(r.subject_id.as_str()))
                .cloned()
                .collect(),
            covariate_names: self.covariate_names.clone(),
            spatial: self.spatial,
            landmarks: self.landmarks.clone(),
        }
    }

    /// Records with complete covariate vectors.
    pub fn complete_records(&self) -> Vec<&Record> {
        self.records.iter().filter(|r| r.is_complete()).collect()
    }

    /// Writes the CSV form (see module docs for the header contract).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["subject_id".to_string(), "time".to_string()];
        if self.spatial {
            header.push("x".to_string());
        }
        header.push("response".to_string());
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)
            .map_err(|e| Error::Data(e.to_string()))?;
        for rec in &self.records {
            let mut row = vec![rec.subject_id.clone(), rec.time.to_string()];
            if self.spatial {
                row.push(format_float(rec.x.unwrap_or(f64::NAN)));
            }
            row.push(format_float(rec.response));
            for c in &rec.covariates {
                row.push(c.map(format_float).unwrap_or_default());
            }
            w.write_record(&row).map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Shortest decimal form that round-trips to the same f64.
fn format_float(v: f64) -> String {
    format!("{v}")
}

/// Loads a dataset from CSV. The schema is taken from the header; every
/// column other than `subject_id`, `time`, `x`, and `response` is a
/// covariate. Parse failures name the row and column.
pub fn load_csv<P: AsRef<Path>>(path: P) -> Result<Dataset> {
    let file = std::fs::File::open(&path).map_err(|e| {
        Error::Data(format!("cannot open {}: {e}", path.as_ref().display()))
    })?;
    read_csv(std::io::BufReader::new(file))
}

pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Dataset> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r
        .headers()
        .map_err(|e| Error::Data(format!("cannot read header: {e}")))?
        .clone();

    let find = |name: &str| header.iter().position(|h| h == name);
    let subject_col = find("subject_id")
        .ok_or_else(|| Error::Data("missing mandatory column \"subject_id\"".into()))?;
    let time_col =
        find("time").ok_or_else(|| Error::Data("missing mandatory column \"time\"".into()))?;
    let response_col = find("response")
        .ok_or_else(|| Error::Data("missing mandatory column \"response\"".into()))?;
    let x_col = find("x");

    let special = [Some(subject_col), Some(time_col), Some(response_col), x_col];
    let covariate_cols: Vec<(usize, String)> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| !special.contains(&Some(*i)))
        .map(|(i, name)| (i, name.to_string()))
        .collect();

    let mut ds = Dataset::new(
        covariate_cols.iter().map(|(_, n)| n.clone()).collect(),
        x_col.is_some(),
    );

    for (row_idx, row) in r.records().enumerate() {
        // Header is row 1; data starts at row 2.
        let row_no = row_idx + 2;
        let row = row.map_err(|e| Error::Data(format!("row {row_no}: {e}")))?;
        let cell = |col: usize| row.get(col).unwrap_or("");

        let parse_f64 = |col: usize, name: &str| -> Result<f64> {
            let raw = cell(col);
            raw.trim().parse::<f64>().map_err(|_| Error::Csv {
                row: row_no,
                column: name.to_string(),
                message: format!("\"{raw}\" is not a number"),
            })
        };

        let subject_id = cell(subject_col).to_string();
        if subject_id.is_empty() {
            return Err(Error::Csv {
                row: row_no,
                column: "subject_id".into(),
                message: "empty subject id".into(),
            });
        }
        let time = cell(time_col).trim().parse::<u32>().map_err(|_| Error::Csv {
            row: row_no,
            column: "time".into(),
            message: format!("\"{}\" is not an ordinal time", cell(time_col)),
        })?;
        let response = parse_f64(response_col, "response")?;
        let x = match x_col {
            Some(col) => Some(parse_f64(col, "x")?),
            None => None,
        };
        let mut covariates = Vec::with_capacity(covariate_cols.len());
        for (col, name) in &covariate_cols {
            let raw = cell(*col).trim();
            if raw.is_empty() {
                covariates.push(None);
            } else {
                covariates.push(Some(parse_f64(*col, name)?));
            }
        }
        ds.records.push(Record {
            subject_id,
            time,
            covariates,
            x,
            response,
        });
    }
    ds.validate()?;
    Ok(ds)
}

/// Subject-wise split specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Fraction of subjects assigned to training (the rest go to test).
    pub train_fraction: f64,
    /// Fraction of the training subjects carved out for validation.
    pub validation_fraction: f64,
    pub seed: u64,
    /// Route every subject with more than one record to the test set.
    pub longitudinal_to_test: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            validation_fraction: 0.15,
            seed: 0,
            longitudinal_to_test: true,
        }
    }
}

/// Splits by subject so no subject appears in two partitions. Longitudinal
/// subjects (more than one record) go to test when the rule is enabled;
/// proportions are within one subject of the spec.
pub fn split_by_subject(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0)
        || !(spec.validation_fraction > 0.0 && spec.validation_fraction < 1.0)
    {
        return Err(Error::Config("split fractions must be in (0, 1)".into()));
    }
    let subjects = ds.subjects();
    if subjects.len() < 3 {
        return Err(Error::Data(format!(
            "need at least 3 subjects to split, found {}",
            subjects.len()
        )));
    }

    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for rec in &ds.records {
        *counts.entry(rec.subject_id.as_str()).or_insert(0) += 1;
    }

    let mut test: Vec<&str> = Vec::new();
    let mut pool: Vec<&str> = Vec::new();
    for s in &subjects {
        if spec.longitudinal_to_test && counts[s.as_str()] > 1 {
            test.push(s);
        } else {
            pool.push(s);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    pool.shuffle(&mut rng);

    let n_total = subjects.len();
    let test_target = ((1.0 - spec.train_fraction) * n_total as f64).round() as usize;
    while test.len() < test_target {
        match pool.pop() {
            Some(s) => test.push(s),
            None => break,
        }
    }
    if pool.is_empty() {
        return Err(Error::Data(
            "no subjects left for training after the longitudinal rule".into(),
        ));
    }

    let val_target = (spec.validation_fraction * pool.len() as f64).round() as usize;
    let val_target = val_target.clamp(1, pool.len() - 1);
    let mut val: Vec<&str> = Vec::new();
    for _ in 0..val_target {
        val.push(pool.pop().expect("val target < pool size"));
    }

    fn to_set<'a>(subjects: &[&'a str]) -> std::collections::BTreeSet<&'a str> {
        subjects.iter().copied().collect()
    }
    Ok((
        ds.filter_subjects(&to_set(&pool)),
        ds.filter_subjects(&to_set(&val)),
        ds.filter_subjects(&to_set(&test)),
    ))
}

/// Splits the subjects of a training dataset into fit and validation parts
/// (subject-wise, deterministic in the seed).
pub fn carve_validation(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut subjects = ds.subjects();
    if subjects.len() < 2 {
        return Err(Error::Data(
            "need at least 2 subjects to carve a validation split".into(),
        ));
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(crate::math::derive_seed(seed, "val-split", 0));
    subjects.shuffle(&mut rng);
    let n_val =
        ((subjects.len() as f64 * fraction).round() as usize).clamp(1, subjects.len() - 1);
    let (val_subjects, train_subjects) = subjects.split_at(n_val);
    let train_set: std::collections::BTreeSet<&str> =
        train_subjects.iter().map(|s| s.as_str()).collect();
    let val_set: std::collections::BTreeSet<&str> =
        val_subjects.iter().map(|s| s.as_str()).collect();
    Ok((ds.filter_subjects(&train_set), ds.filter_subjects(&val_set)))
}
