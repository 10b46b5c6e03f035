//! Multi-subject weighted-network datasets: per-subject edge counts and mean
//! lengths plus subject covariates, with CSV ingestion and emission.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum DataError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv parse error in {path} line {line}: {msg}")]
    Parse { path: String, line: u64, msg: String },
    #[error("subject {subject}: missing covariate field {field}")]
    MissingCovariate { subject: String, field: String },
    #[error("edge file line {line}: subject {subject} not present in covariate file")]
    UnknownSubject { line: u64, subject: String },
    #[error("edge file line {line}: mean_length given but count is 0 for {subject} ({a},{b})")]
    LengthWithoutFibers {
        line: u64,
        subject: String,
        a: String,
        b: String,
    },
    #[error("edge file line {line}: count >= 1 but mean_length missing for {subject} ({a},{b})")]
    MissingLength {
        line: u64,
        subject: String,
        a: String,
        b: String,
    },
    #[error("edge file line {line}: nonpositive mean_length {value}")]
    NonPositiveLength { line: u64, value: f64 },
    #[error("conflicting counts for subject {subject} edge ({a},{b}): {x} vs {y}")]
    AsymmetricCounts {
        subject: String,
        a: String,
        b: String,
        x: u64,
        y: u64,
    },
    #[error("self-edge ({a},{a}) present but self_edges flag is off")]
    UnexpectedSelfEdge { a: String },
    #[error("dataset invariant violated: {0}")]
    Invariant(String),
}

/// Names of the canonical covariate columns.
pub const COVARIATE_NAMES: [&str; 4] = ["mci", "ad", "male", "age"];

/// Per-subject edge observations plus covariate rows.
///
/// Edges are stored as a canonical list of region pairs (j < k, or j <= k
/// when self-edges are enabled); counts and lengths are indexed
/// `[subject][edge]`. A length is present exactly where the count is >= 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConnectomeDataset {
    pub region_names: Vec<String>,
    pub subject_ids: Vec<String>,
    /// Covariate rows, one per subject; age is centered at ingestion.
    pub covariates: Vec<Vec<f64>>,
    pub covariate_names: Vec<String>,
    /// Canonical edge list (region index pairs, j <= k).
    pub edges: Vec<(usize, usize)>,
    pub counts: Vec<Vec<u64>>,
    /// Raw mean lengths (not log scale), present iff count >= 1.
    pub lengths: Vec<Vec<Option<f64>>>,
    pub self_edges: bool,
}

impl ConnectomeDataset {
    pub fn num_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn num_regions(&self) -> usize {
        self.region_names.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn num_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    /// Canonical edge index set over `j` regions.
    pub fn edge_list(num_regions: usize, self_edges: bool) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        for j in 0..num_regions {
            let start = if self_edges { j } else { j + 1 };
            for k in start..num_regions {
                edges.push((j, k));
            }
        }
        edges
    }

    /// Total number of (subject, edge) cells with an observed length.
    pub fn observed_length_cells(&self) -> usize {
        self.counts
            .iter()
            .flat_map(|row| row.iter())
            .filter(|&&n| n >= 1)
            .count()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.num_subjects();
        if self.covariates.len() != n || self.counts.len() != n || self.lengths.len() != n {
            return Err(DataError::Invariant("per-subject array length mismatch".into()));
        }
        for (i, (cnt, len)) in self.counts.iter().zip(&self.lengths).enumerate() {
            if cnt.len() != self.edges.len() || len.len() != self.edges.len() {
                return Err(DataError::Invariant(format!(
                    "subject {i}: edge array length mismatch"
                )));
            }
            for (e, (&c, l)) in cnt.iter().zip(len).enumerate() {
                match (c, l) {
                    (0, Some(_)) => {
                        return Err(DataError::Invariant(format!(
                            "subject {} edge {:?}: length present with zero count",
                            self.subject_ids[i], self.edges[e]
                        )))
                    }
                    (c, None) if c >= 1 => {
                        return Err(DataError::Invariant(format!(
                            "subject {} edge {:?}: count {} without length",
                            self.subject_ids[i], self.edges[e], c
                        )))
                    }
                    _ => {}
                }
            }
        }
        for (i, z) in self.covariates.iter().enumerate() {
            if z.len() != self.covariate_names.len() {
                return Err(DataError::Invariant(format!("subject {i}: covariate row length")));
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(DataError::Invariant(format!(
                    "subject {}: non-finite covariate",
                    self.subject_ids[i]
                )));
            }
        }
        Ok(())
    }

    /// Split subjects into (train, test) halves, first half training.
    pub fn split_half(&self) -> (ConnectomeDataset, ConnectomeDataset) {
        let n = self.num_subjects();
        let cut = n / 2;
        (self.subset(&(0..cut).collect::<Vec<_>>()), self.subset(&(cut..n).collect::<Vec<_>>()))
    }

    pub fn subset(&self, subjects: &[usize]) -> ConnectomeDataset {
        ConnectomeDataset {
            region_names: self.region_names.clone(),
            subject_ids: subjects.iter().map(|&i| self.subject_ids[i].clone()).collect(),
            covariates: subjects.iter().map(|&i| self.covariates[i].clone()).collect(),
            covariate_names: self.covariate_names.clone(),
            edges: self.edges.clone(),
            counts: subjects.iter().map(|&i| self.counts[i].clone()).collect(),
            lengths: subjects.iter().map(|&i| self.lengths[i].clone()).collect(),
            self_edges: self.self_edges,
        }
    }

    /// Ingest the edge + covariate CSV pair. Age is centered here.
    pub fn from_csv_files(
        edges_path: &Path,
        covariates_path: &Path,
        self_edges: bool,
    ) -> Result<Self, DataError> {
        let cov_file = std::fs::File::open(covariates_path).map_err(|e| DataError::Io {
            path: covariates_path.display().to_string(),
            source: e,
        })?;
        let edge_file = std::fs::File::open(edges_path).map_err(|e| DataError::Io {
            path: edges_path.display().to_string(),
            source: e,
        })?;
        Self::from_csv_readers(
            edge_file,
            edges_path.display().to_string(),
            cov_file,
            covariates_path.display().to_string(),
            self_edges,
        )
    }

    pub fn from_csv_readers<R1: Read, R2: Read>(
        edges: R1,
        edges_name: String,
        covariates: R2,
        covariates_name: String,
        self_edges: bool,
    ) -> Result<Self, DataError> {
        // covariates: subject,mci,ad,male,age
        let mut rdr = csv::Reader::from_reader(covariates);
        let mut subject_ids = Vec::new();
        let mut cov_rows: Vec<Vec<f64>> = Vec::new();
        let mut subject_index = HashMap::new();
        for result in rdr.records() {
            let rec = result.map_err(|e| DataError::Parse {
                path: covariates_name.clone(),
                line: e.position().map(|p| p.line()).unwrap_or(0),
                msg: e.to_string(),
            })?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            if rec.len() < 5 {
                return Err(DataError::Parse {
                    path: covariates_name.clone(),
                    line,
                    msg: format!("expected 5 fields, got {}", rec.len()),
                });
            }
            let subject = rec[0].to_string();
            let mut row = Vec::with_capacity(4);
            for (f, name) in COVARIATE_NAMES.iter().enumerate() {
                let field = rec[f + 1].trim();
                if field.is_empty() {
                    return Err(DataError::MissingCovariate {
                        subject,
                        field: name.to_string(),
                    });
                }
                let v: f64 = field.parse().map_err(|_| DataError::Parse {
                    path: covariates_name.clone(),
                    line,
                    msg: format!("bad {name} value {field:?}"),
                })?;
                row.push(v);
            }
            subject_index.insert(subject.clone(), subject_ids.len());
            subject_ids.push(subject);
            cov_rows.push(row);
        }
        if subject_ids.is_empty() {
            return Err(DataError::Invariant("covariate file has no subjects".into()));
        }
        // center age
        let mean_age = cov_rows.iter().map(|r| r[3]).sum::<f64>() / cov_rows.len() as f64;
        for r in &mut cov_rows {
            r[3] -= mean_age;
        }

        // edges: subject,region_a,region_b,count,mean_length
        let mut rdr = csv::Reader::from_reader(edges);
        let mut region_index: HashMap<String, usize> = HashMap::new();
        let mut region_names: Vec<String> = Vec::new();
        // (subject, region j, region k) -> (count, length, line)
        let mut cells: HashMap<(usize, usize, usize), (u64, Option<f64>, u64)> = HashMap::new();
        for result in rdr.records() {
            let rec = result.map_err(|e| DataError::Parse {
                path: edges_name.clone(),
                line: e.position().map(|p| p.line()).unwrap_or(0),
                msg: e.to_string(),
            })?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            if rec.len() < 5 {
                return Err(DataError::Parse {
                    path: edges_name.clone(),
                    line,
                    msg: format!("expected 5 fields, got {}", rec.len()),
                });
            }
            let subject = rec[0].to_string();
            let &si = subject_index
                .get(&subject)
                .ok_or_else(|| DataError::UnknownSubject {
                    line,
                    subject: subject.clone(),
                })?;
            let a = rec[1].to_string();
            let b = rec[2].to_string();
            let count: u64 = rec[3].trim().parse().map_err(|_| DataError::Parse {
                path: edges_name.clone(),
                line,
                msg: format!("bad count {:?}", &rec[3]),
            })?;
            let length_field = rec[4].trim();
            let length = if length_field.is_empty() {
                None
            } else {
                let v: f64 = length_field.parse().map_err(|_| DataError::Parse {
                    path: edges_name.clone(),
                    line,
                    msg: format!("bad mean_length {:?}", length_field),
                })?;
                if v <= 0.0 {
                    return Err(DataError::NonPositiveLength { line, value: v });
                }
                Some(v)
            };
            match (count, &length) {
                (0, Some(_)) => {
                    return Err(DataError::LengthWithoutFibers {
                        line,
                        subject,
                        a,
                        b,
                    })
                }
                (c, None) if c >= 1 => {
                    return Err(DataError::MissingLength {
                        line,
                        subject,
                        a,
                        b,
                    })
                }
                _ => {}
            }
            let ra = *region_index.entry(a.clone()).or_insert_with(|| {
                region_names.push(a.clone());
                region_names.len() - 1
            });
            let rb = *region_index.entry(b.clone()).or_insert_with(|| {
                region_names.push(b.clone());
                region_names.len() - 1
            });
            if ra == rb && !self_edges {
                return Err(DataError::UnexpectedSelfEdge { a });
            }
            let (j, k) = if ra <= rb { (ra, rb) } else { (rb, ra) };
            if let Some(&(prev, _, _)) = cells.get(&(si, j, k)) {
                if prev != count {
                    return Err(DataError::AsymmetricCounts {
                        subject,
                        a,
                        b,
                        x: prev,
                        y: count,
                    });
                }
            } else {
                cells.insert((si, j, k), (count, length, line));
            }
        }

        let edges = Self::edge_list(region_names.len(), self_edges);
        let n = subject_ids.len();
        let mut counts = vec![vec![0u64; edges.len()]; n];
        let mut lengths = vec![vec![None; edges.len()]; n];
        for (e, &(j, k)) in edges.iter().enumerate() {
            for i in 0..n {
                if let Some(&(c, l, _)) = cells.get(&(i, j, k)) {
                    counts[i][e] = c;
                    lengths[i][e] = l;
                }
            }
        }
        let ds = ConnectomeDataset {
            region_names,
            subject_ids,
            covariates: cov_rows,
            covariate_names: COVARIATE_NAMES.iter().map(|s| s.to_string()).collect(),
            edges,
            counts,
            lengths,
            self_edges,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Write the edge table in the ingestion schema.
    pub fn write_edges_csv<W: Write>(&self, w: W) -> Result<(), std::io::Error> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["subject", "region_a", "region_b", "count", "mean_length"])?;
        for (i, sid) in self.subject_ids.iter().enumerate() {
            for (e, &(j, k)) in self.edges.iter().enumerate() {
                let length = self.lengths[i][e]
                    .map(|l| format!("{l}"))
                    .unwrap_or_default();
                wtr.write_record([
                    sid.as_str(),
                    self.region_names[j].as_str(),
                    self.region_names[k].as_str(),
                    &self.counts[i][e].to_string(),
                    &length,
                ])?;
            }
        }
        wtr.flush()
    }

    /// Write the covariate table in the ingestion schema.
    pub fn write_covariates_csv<W: Write>(&self, w: W) -> Result<(), std::io::Error> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["subject", "mci", "ad", "male", "age"])?;
        for (i, sid) in self.subject_ids.iter().enumerate() {
            let z = &self.covariates[i];
            wtr.write_record([
                sid.as_str(),
                &format!("{}", z[0]),
                &format!("{}", z[1]),
                &format!("{}", z[2]),
                &format!("{}", z[3]),
            ])?;
        }
        wtr.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const COVS: &str = "subject,mci,ad,male,age\ns1,0,0,1,70\ns2,1,0,0,78\n";

    #[test]
    fn ingest_round_trip() {
        let edges = "subject,region_a,region_b,count,mean_length\n\
                     s1,A,B,3,12.5\ns1,A,C,0,\ns1,B,C,1,4.0\n\
                     s2,A,B,0,\ns2,A,C,2,8.0\ns2,B,C,0,\n";
        let ds = ConnectomeDataset::from_csv_readers(
            edges.as_bytes(),
            "edges".into(),
            COVS.as_bytes(),
            "covs".into(),
            false,
        )
        .unwrap();
        assert_eq!(ds.num_subjects(), 2);
        assert_eq!(ds.num_regions(), 3);
        assert_eq!(ds.num_edges(), 3);
        // age centered at 74
        assert_eq!(ds.covariates[0][3], -4.0);
        assert_eq!(ds.covariates[1][3], 4.0);
        assert_eq!(ds.counts[0], vec![3, 0, 1]);
        assert_eq!(ds.lengths[0][0], Some(12.5));
        assert_eq!(ds.lengths[0][1], None);
        ds.validate().unwrap();

        let mut edge_buf = Vec::new();
        ds.write_edges_csv(&mut edge_buf).unwrap();
        let mut cov_buf = Vec::new();
        ds.write_covariates_csv(&mut cov_buf).unwrap();
        let ds2 = ConnectomeDataset::from_csv_readers(
            edge_buf.as_slice(),
            "edges".into(),
            cov_buf.as_slice(),
            "covs".into(),
            false,
        )
        .unwrap();
        assert_eq!(ds2.counts, ds.counts);
        assert_eq!(ds2.lengths, ds.lengths);
    }

    #[test]
    fn length_iff_count_positive() {
        let edges = "subject,region_a,region_b,count,mean_length\ns1,A,B,0,5.0\n";
        let err = ConnectomeDataset::from_csv_readers(
            edges.as_bytes(),
            "edges".into(),
            COVS.as_bytes(),
            "covs".into(),
            false,
        )
        .unwrap_err();
        assert!(matches!(err, DataError::LengthWithoutFibers { line: 2, .. }));

        let edges = "subject,region_a,region_b,count,mean_length\ns1,A,B,4,\n";
        let err = ConnectomeDataset::from_csv_readers(
            edges.as_bytes(),
            "edges".into(),
            COVS.as_bytes(),
            "covs".into(),
            false,
        )
        .unwrap_err();
        assert!(matches!(err, DataError::MissingLength { line: 2, .. }));
    }

    #[test]
    fn missing_covariate_rejected() {
        let covs = "subject,mci,ad,male,age\ns1,0,0,,70\n";
        let edges = "subject,region_a,region_b,count,mean_length\n";
        let err = ConnectomeDataset::from_csv_readers(
            edges.as_bytes(),
            "edges".into(),
            covs.as_bytes(),
            "covs".into(),
            false,
        )
        .unwrap_err();
        assert!(matches!(err, DataError::MissingCovariate { .. }));
    }

    #[test]
    fn self_edge_flag() {
        let edges = "subject,region_a,region_b,count,mean_length\ns1,A,A,2,3.0\ns2,A,A,0,\n";
        assert!(ConnectomeDataset::from_csv_readers(
            edges.as_bytes(),
            "edges".into(),
            COVS.as_bytes(),
            "covs".into(),
            false,
        )
        .is_err());
        let ds = ConnectomeDataset::from_csv_readers(
            edges.as_bytes(),
            "edges".into(),
            COVS.as_bytes(),
            "covs".into(),
            true,
        )
        .unwrap();
        assert_eq!(ds.edges, vec![(0, 0)]);
    }
}
