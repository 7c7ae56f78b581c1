//! CSV dataset ingestion with deterministic one-hot encoding.
//!
//! Column typing is inferred: a column where every value parses as a number
//! is numeric; anything else is categorical and expands into one indicator
//! column per distinct value, ordered by first appearance. The label column
//! is named by the caller and must hold at most two distinct values; the
//! class index follows numeric order when both values parse as numbers and
//! lexicographic order otherwise.

use super::TrainError;
use std::io::Read;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    /// Class names by index; length 1 if the file held a single class.
    pub label_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn width(&self) -> usize {
        self.feature_names.len()
    }

    pub fn from_csv_path<P: AsRef<Path>>(path: P, label_col: &str) -> Result<Self, TrainError> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(file, label_col)
    }

    pub fn from_csv_reader<R: Read>(reader: R, label_col: &str) -> Result<Self, TrainError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers: Vec<String> = rdr
            .headers()
            .map_err(csv_err)?
            .iter()
            .map(str::to_string)
            .collect();
        let label_idx = headers
            .iter()
            .position(|h| h == label_col)
            .ok_or_else(|| TrainError::LabelColumnMissing {
                name: label_col.to_string(),
                available: headers.clone(),
            })?;

        let mut records: Vec<Vec<String>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != headers.len() {
                return Err(TrainError::Csv {
                    line: rec.position().map(|p| p.line()).unwrap_or(0),
                    msg: format!("expected {} fields, got {}", headers.len(), rec.len()),
                });
            }
            records.push(rec.iter().map(str::to_string).collect());
        }
        if records.is_empty() {
            return Err(TrainError::EmptyDataset);
        }

        // Label mapping.
        let mut label_names: Vec<String> = Vec::new();
        for rec in &records {
            let v = &rec[label_idx];
            if !label_names.iter().any(|l| l == v) {
                label_names.push(v.clone());
            }
            if label_names.len() > 2 {
                return Err(TrainError::NonBinaryLabels {
                    distinct: label_names.len(),
                });
            }
        }
        if label_names.len() == 2 {
            let nums: Option<Vec<f64>> =
                label_names.iter().map(|s| s.parse::<f64>().ok()).collect();
            match nums {
                Some(ns) if ns[0] > ns[1] => label_names.swap(0, 1),
                Some(_) => {}
                // Lexicographic order keeps class indices independent of row
                // order for string labels.
                None => label_names.sort(),
            }
        }
        let labels: Vec<u8> = records
            .iter()
            .map(|rec| label_names.iter().position(|l| *l == rec[label_idx]).unwrap() as u8)
            .collect();

        // Column typing over the feature columns.
        enum Col {
            Numeric,
            Categorical(Vec<String>),
        }
        let feature_cols: Vec<usize> =
            (0..headers.len()).filter(|&c| c != label_idx).collect();
        let mut kinds: Vec<Col> = Vec::with_capacity(feature_cols.len());
        for &c in &feature_cols {
            let numeric = records.iter().all(|r| r[c].parse::<f64>().is_ok());
            if numeric {
                kinds.push(Col::Numeric);
            } else {
                let mut cats: Vec<String> = Vec::new();
                for r in &records {
                    if !cats.iter().any(|v| *v == r[c]) {
                        cats.push(r[c].clone());
                    }
                }
                kinds.push(Col::Categorical(cats));
            }
        }

        let mut feature_names = Vec::new();
        for (&c, kind) in feature_cols.iter().zip(&kinds) {
            match kind {
                Col::Numeric => feature_names.push(headers[c].clone()),
                Col::Categorical(cats) => {
                    for cat in cats {
                        feature_names.push(format!("{}={}", headers[c], cat));
                    }
                }
            }
        }

        let mut rows = Vec::with_capacity(records.len());
        for rec in &records {
            let mut row = Vec::with_capacity(feature_names.len());
            for (&c, kind) in feature_cols.iter().zip(&kinds) {
                match kind {
                    Col::Numeric => row.push(rec[c].parse::<f64>().unwrap()),
                    Col::Categorical(cats) => {
                        for cat in cats {
                            row.push(if *cat == rec[c] { 1.0 } else { 0.0 });
                        }
                    }
                }
            }
            rows.push(row);
        }

        Ok(Dataset {
            feature_names,
            rows,
            labels,
            label_names,
        })
    }

    /// Deterministic shuffled split; returns `(train, valid)` where `valid`
    /// holds `round(len * valid_fraction)` rows.
    pub fn split(&self, valid_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        let valid_n = ((self.len() as f64) * valid_fraction).round() as usize;
        let (valid_idx, train_idx) = idx.split_at(valid_n.min(self.len()));
        (self.subset(train_idx), self.subset(valid_idx))
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            feature_names: self.feature_names.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            label_names: self.label_names.clone(),
        }
    }
}

fn csv_err(e: csv::Error) -> TrainError {
    let line = match e.position() {
        Some(p) => p.line(),
        None => 0,
    };
    TrainError::Csv {
        line,
        msg: e.to_string(),
    }
}
