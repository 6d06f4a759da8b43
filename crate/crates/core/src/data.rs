//! Dataset file ingestion: line-delimited SMILES and labeled CSV.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("CSV header missing required column `smiles`")]
    MissingSmilesColumn,
    #[error("empty dataset")]
    Empty,
}

/// One molecule per line, UTF-8; `#`-prefixed lines are comments and blank
/// lines are skipped. Returns (1-based line number, string).
pub fn read_smiles_lines<R: Read>(reader: R) -> Result<Vec<(usize, String)>, DataError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push((i + 1, trimmed.to_string()));
    }
    if out.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(out)
}

pub fn read_smiles_file(path: &Path) -> Result<Vec<(usize, String)>, DataError> {
    read_smiles_lines(std::fs::File::open(path)?)
}

/// A labeled dataset: a `smiles` column plus numeric label columns, in
/// header order.
#[derive(Debug, Clone)]
pub struct LabeledData {
    pub smiles: Vec<String>,
    pub line_numbers: Vec<usize>,
    pub label_names: Vec<String>,
    pub labels: Vec<Vec<f64>>,
}

/// Comma-separated with a header row; fields are trimmed, quoting is not
/// supported (molecular CSVs in this pipeline never quote). Every non-smiles
/// column must parse as a finite number.
pub fn read_labeled_csv<R: Read>(reader: R) -> Result<LabeledData, DataError> {
    let mut lines = BufReader::new(reader).lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((i, line)) => {
                let line = line?;
                let trimmed = line.trim();
                if trimmed.is_empty() || trimmed.starts_with('#') {
                    continue;
                }
                break (i + 1, trimmed.to_string());
            }
            None => return Err(DataError::Empty),
        }
    };
    let columns: Vec<String> = header.1.split(',').map(|c| c.trim().to_string()).collect();
    let smiles_col = columns
        .iter()
        .position(|c| c.eq_ignore_ascii_case("smiles"))
        .ok_or(DataError::MissingSmilesColumn)?;
    let label_names: Vec<String> =
        columns.iter().enumerate().filter(|&(i, _)| i != smiles_col).map(|(_, c)| c.clone()).collect();

    let mut data = LabeledData {
        smiles: Vec::new(),
        line_numbers: Vec::new(),
        label_names,
        labels: Vec::new(),
    };
    for (i, line) in lines {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let line_no = i + 1;
        let fields: Vec<&str> = trimmed.split(',').map(|f| f.trim()).collect();
        if fields.len() != columns.len() {
            return Err(DataError::Line {
                line: line_no,
                message: format!("expected {} fields, found {}", columns.len(), fields.len()),
            });
        }
        let mut labels = Vec::with_capacity(columns.len() - 1);
        for (col, field) in fields.iter().enumerate() {
            if col == smiles_col {
                continue;
            }
            let value: f64 = field.parse().map_err(|_| DataError::Line {
                line: line_no,
                message: format!("column `{}`: `{field}` is not a number", columns[col]),
            })?;
            if !value.is_finite() {
                return Err(DataError::Line {
                    line: line_no,
                    message: format!("column `{}`: non-finite label", columns[col]),
                });
            }
            labels.push(value);
        }
        data.smiles.push(fields[smiles_col].to_string());
        data.line_numbers.push(line_no);
        data.labels.push(labels);
    }
    if data.smiles.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(data)
}

pub fn read_labeled_csv_file(path: &Path) -> Result<LabeledData, DataError> {
    read_labeled_csv(std::fs::File::open(path)?)
}

/// Deterministic train/validation split: shuffles indices with the seed and
/// takes the first `val_fraction` share as validation (at least one row in
/// each split when possible).
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut crate::rng::StreamKey::new(seed).child(crate::rng::tags::SPLIT).rng());
    let mut n_val = ((n as f64) * val_fraction).round() as usize;
    if n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    } else {
        n_val = 0;
    }
    let val = order[..n_val].to_vec();
    let train = order[n_val..].to_vec();
    (train, val)
}

/// Reference set for novelty computations.
pub fn to_reference_set(smiles: &[(usize, String)]) -> HashSet<String> {
    smiles.iter().map(|(_, s)| s.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smiles_lines_skip_comments_and_blanks() {
        let text = "# corpus\nCCO\n\n  c1ccccc1  \n# done\nCCN\n";
        let rows = read_smiles_lines(text.as_bytes()).unwrap();
        assert_eq!(
            rows,
            vec![(2, "CCO".to_string()), (4, "c1ccccc1".to_string()), (6, "CCN".to_string())]
        );
    }

    #[test]
    fn smiles_empty_is_error() {
        assert!(matches!(read_smiles_lines("# nothing\n".as_bytes()), Err(DataError::Empty)));
    }

    #[test]
    fn csv_parses_labels_in_header_order() {
        let text = "smiles,logp,mw\nCCO,-0.3,46.07\nCCN,  -0.1 ,45.08\n";
        let data = read_labeled_csv(text.as_bytes()).unwrap();
        assert_eq!(data.label_names, vec!["logp", "mw"]);
        assert_eq!(data.smiles, vec!["CCO", "CCN"]);
        assert_eq!(data.labels[0], vec![-0.3, 46.07]);
        assert_eq!(data.line_numbers, vec![2, 3]);
    }

    #[test]
    fn csv_smiles_column_anywhere() {
        let text = "y,smiles\n1.5,CCO\n";
        let data = read_labeled_csv(text.as_bytes()).unwrap();
        assert_eq!(data.smiles, vec!["CCO"]);
        assert_eq!(data.labels[0], vec![1.5]);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let text = "smiles,y\nCCO,1.0\nCCN,not_a_number\n";
        match read_labeled_csv(text.as_bytes()) {
            Err(DataError::Line { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected line error, got {other:?}"),
        }
        let nan = "smiles,y\nCCO,NaN\n";
        assert!(matches!(read_labeled_csv(nan.as_bytes()), Err(DataError::Line { line: 2, .. })));
        let missing = "mol,y\nCCO,1\n";
        assert!(matches!(
            read_labeled_csv(missing.as_bytes()),
            Err(DataError::MissingSmilesColumn)
        ));
        let ragged = "smiles,y\nCCO\n";
        assert!(matches!(read_labeled_csv(ragged.as_bytes()), Err(DataError::Line { line: 2, .. })));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (train_a, val_a) = split_indices(20, 0.25, 7);
        let (train_b, val_b) = split_indices(20, 0.25, 7);
        assert_eq!(train_a, train_b);
        assert_eq!(val_a, val_b);
        assert_eq!(val_a.len(), 5);
        let mut all: Vec<usize> = train_a.iter().chain(&val_a).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        let (_, val_c) = split_indices(20, 0.25, 8);
        assert_ne!(val_a, val_c);
    }

    #[test]
    fn split_small_datasets() {
        let (train, val) = split_indices(2, 0.5, 1);
        assert_eq!(train.len() + val.len(), 2);
        assert_eq!(val.len(), 1);
        let (train, val) = split_indices(1, 0.5, 1);
        assert_eq!(train.len(), 1);
        assert!(val.is_empty());
    }
}
