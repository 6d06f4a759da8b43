//! Distribution-learning metrics over generated molecule strings and
//! numerical schedule diagnostics.
//!
//! The validity check is a syntactic screen, not a cheminformatics oracle:
//! it verifies tokenizability, balanced parentheses and brackets, paired
//! ring-bond digits, non-dangling bond symbols, and a permissive per-atom
//! bond-count cap for bare organic-subset atoms (bracket atoms are counted
//! structurally but exempt from the cap). Uniqueness and novelty operate on
//! raw strings without canonicalization.

use crate::bfn::flow_sample;
use crate::rng::StreamKey;
use crate::schedule::ScheduleParams;
use crate::tokenizer::{tokenize, TokenSequence};
use crate::vocab::Vocabulary;
use rayon::prelude::*;
use std::collections::{HashMap, HashSet};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty input list")]
    EmptyInput,
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("invalid argument: {0}")]
    BadArgument(String),
}

/// Least-squares line fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Fit y = a + b*x; degenerate (zero-variance) targets define R^2 = 1.
pub fn line_fit(xs: &[f64], ys: &[f64]) -> Result<LineFit, MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::BadArgument("x/y length mismatch".into()));
    }
    if xs.len() < 2 {
        return Err(MetricsError::TooFewPoints { need: 2, got: xs.len() });
    }
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|&x| (x - mean_x) * (x - mean_x)).sum();
    let syy: f64 = ys.iter().map(|&y| (y - mean_y) * (y - mean_y)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(&x, &y)| (x - mean_x) * (y - mean_y)).sum();
    if syy == 0.0 {
        return Ok(LineFit { slope: 0.0, intercept: mean_y, r_squared: 1.0 });
    }
    if sxx == 0.0 {
        return Err(MetricsError::BadArgument("x values are all identical".into()));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let sse: f64 = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    Ok(LineFit { slope, intercept, r_squared: 1.0 - sse / syy })
}

/// Fraction of strings passing the syntactic validity screen.
pub fn validity(smiles: &[String], vocab: &Vocabulary) -> f64 {
    if smiles.is_empty() {
        return 0.0;
    }
    let valid = smiles.iter().filter(|s| is_syntactically_valid(s, vocab)).count();
    valid as f64 / smiles.len() as f64
}

/// |distinct| / |list|.
pub fn uniqueness(smiles: &[String]) -> Result<f64, MetricsError> {
    if smiles.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let distinct: HashSet<&str> = smiles.iter().map(|s| s.as_str()).collect();
    Ok(distinct.len() as f64 / smiles.len() as f64)
}

/// Fraction of distinct strings absent from the reference set.
pub fn novelty(smiles: &[String], reference: &HashSet<String>) -> Result<f64, MetricsError> {
    if smiles.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let distinct: HashSet<&str> = smiles.iter().map(|s| s.as_str()).collect();
    let novel = distinct.iter().filter(|s| !reference.contains(**s)).count();
    Ok(novel as f64 / distinct.len() as f64)
}

/// Monte-Carlo entropy of the flow distribution on an even time grid, with a
/// least-squares linearity fit. The reference token is arbitrary by symmetry
/// of the flow construction.
#[derive(Debug, Clone)]
pub struct EntropyCurve {
    /// (t, mean entropy in nats, standard error of the mean).
    pub points: Vec<(f64, f64, f64)>,
    pub fit: LineFit,
}

pub fn entropy_curve(
    params: &ScheduleParams,
    n_points: usize,
    n_samples: usize,
    stream: &StreamKey,
) -> Result<EntropyCurve, MetricsError> {
    if n_points < 3 {
        return Err(MetricsError::TooFewPoints { need: 3, got: n_points });
    }
    if n_samples < 100 {
        return Err(MetricsError::BadArgument(format!("n_samples {n_samples} < 100")));
    }
    let reference = TokenSequence::from_raw(vec![0]);
    let points: Vec<(f64, f64, f64)> = (0..n_points)
        .into_par_iter()
        .map(|i| {
            let t = i as f64 / (n_points - 1) as f64;
            let point_stream = stream.child(crate::rng::tags::ENTROPY_MC).child(i as u64);
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for s in 0..n_samples {
                let theta = flow_sample(&reference, t, params, &point_stream.child(s as u64))
                    .expect("flow_sample on a valid schedule");
                let h = row_entropy(theta.grid().row(0));
                sum += h;
                sum_sq += h * h;
            }
            let n = n_samples as f64;
            let mean = sum / n;
            let var = (sum_sq / n - mean * mean).max(0.0);
            let stderr = (var / n).sqrt();
            (t, mean, stderr)
        })
        .collect();
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let fit = line_fit(&xs, &ys)?;
    Ok(EntropyCurve { points, fit })
}

fn row_entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// R^2 of a line fit to the cumulative sum of loss estimates over the grid.
pub fn cumulative_loss_linearity(losses: &[(f64, f64)]) -> Result<f64, MetricsError> {
    if losses.len() < 3 {
        return Err(MetricsError::TooFewPoints { need: 3, got: losses.len() });
    }
    let xs: Vec<f64> = losses.iter().map(|&(t, _)| t).collect();
    let mut acc = 0.0;
    let ys: Vec<f64> = losses
        .iter()
        .map(|&(_, l)| {
            acc += l;
            acc
        })
        .collect();
    Ok(line_fit(&xs, &ys)?.r_squared)
}

const MASKED_VALENCE: Option<u32> = None;

fn organic_cap(symbol: &str) -> Option<Option<u32>> {
    // None in the inner option means "atom recognized, cap not enforced".
    let cap = match symbol {
        "B" => 3,
        "C" => 4,
        "N" => 3,
        "O" => 2,
        "P" => 5,
        "S" => 6,
        "F" | "Cl" | "Br" | "I" => 1,
        "b" => 3,
        "c" => 4,
        "n" => 3,
        "o" => 2,
        "p" => 3,
        "s" => 2,
        _ => return None,
    };
    Some(Some(cap))
}

struct AtomRecord {
    cap: Option<u32>,
    bonds: u32,
}

/// Structural screen described in the module docs.
pub fn is_syntactically_valid(smiles: &str, vocab: &Vocabulary) -> bool {
    if smiles.is_empty() || tokenize(smiles, vocab).is_err() {
        return false;
    }
    let bytes = smiles.as_bytes();
    let mut atoms: Vec<AtomRecord> = Vec::new();
    let mut prev: Option<usize> = None;
    let mut pending_bond: Option<u32> = None;
    let mut branch_stack: Vec<Option<usize>> = Vec::new();
    let mut open_rings: HashMap<u32, (usize, Option<u32>)> = HashMap::new();

    let add_atom = |atoms: &mut Vec<AtomRecord>,
                        prev: &mut Option<usize>,
                        pending: &mut Option<u32>,
                        cap: Option<u32>|
     -> bool {
        let idx = atoms.len();
        atoms.push(AtomRecord { cap, bonds: 0 });
        if let Some(p) = *prev {
            let order = pending.take().unwrap_or(1);
            atoms[p].bonds += order;
            atoms[idx].bonds += order;
        } else if pending.take().is_some() {
            return false;
        }
        *prev = Some(idx);
        true
    };

    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            '[' => {
                let Some(close) = smiles[i..].find(']').map(|o| i + o) else {
                    return false;
                };
                if close == i + 1 {
                    return false; // empty bracket atom
                }
                if smiles[i + 1..close].contains('[') {
                    return false;
                }
                if !add_atom(&mut atoms, &mut prev, &mut pending_bond, MASKED_VALENCE) {
                    return false;
                }
                i = close + 1;
            }
            ']' => return false, // unmatched close
            'A'..='Z' => {
                let two = if i + 1 < bytes.len() { &smiles[i..i + 2] } else { "" };
                let (symbol, len) = if two == "Cl" || two == "Br" {
                    (two, 2)
                } else {
                    (&smiles[i..i + 1], 1)
                };
                let Some(cap) = organic_cap(symbol) else {
                    return false; // element outside the bare organic subset
                };
                if !add_atom(&mut atoms, &mut prev, &mut pending_bond, cap) {
                    return false;
                }
                i += len;
            }
            'a'..='z' => {
                let symbol = &smiles[i..i + 1];
                let Some(cap) = organic_cap(symbol) else {
                    return false;
                };
                if !add_atom(&mut atoms, &mut prev, &mut pending_bond, cap) {
                    return false;
                }
                i += 1;
            }
            '-' | '=' | '#' | '$' | ':' | '/' | '\\' => {
                if pending_bond.is_some() || prev.is_none() {
                    return false;
                }
                pending_bond = Some(match c {
                    '=' => 2,
                    '#' => 3,
                    '$' => 4,
                    _ => 1,
                });
                i += 1;
            }
            '(' => {
                if prev.is_none() || pending_bond.is_some() {
                    return false;
                }
                branch_stack.push(prev);
                i += 1;
            }
            ')' => {
                if pending_bond.is_some() {
                    return false;
                }
                match branch_stack.pop() {
                    Some(saved) => prev = saved,
                    None => return false,
                }
                i += 1;
            }
            '.' => {
                if pending_bond.is_some() || !branch_stack.is_empty() || prev.is_none() {
                    return false;
                }
                prev = None;
                i += 1;
            }
            '0'..='9' | '%' => {
                let (ring_id, len) = if c == '%' {
                    if i + 2 >= bytes.len()
                        || !bytes[i + 1].is_ascii_digit()
                        || !bytes[i + 2].is_ascii_digit()
                    {
                        return false;
                    }
                    let id = (bytes[i + 1] - b'0') as u32 * 10 + (bytes[i + 2] - b'0') as u32;
                    (100 + id, 3)
                } else {
                    ((c as u8 - b'0') as u32, 1)
                };
                let Some(here) = prev else {
                    return false;
                };
                match open_rings.remove(&ring_id) {
                    Some((other, open_order)) => {
                        if other == here {
                            return false; // ring bond to itself
                        }
                        let order = match (open_order, pending_bond.take()) {
                            (Some(a), Some(b)) if a != b => return false,
                            (Some(a), _) => a,
                            (None, Some(b)) => b,
                            (None, None) => 1,
                        };
                        atoms[other].bonds += order;
                        atoms[here].bonds += order;
                    }
                    None => {
                        open_rings.insert(ring_id, (here, pending_bond.take()));
                    }
                }
                i += len;
            }
            _ => return false,
        }
    }

    if pending_bond.is_some() || !branch_stack.is_empty() || !open_rings.is_empty() {
        return false;
    }
    if prev.is_none() {
        return false; // trailing fragment separator
    }
    atoms.iter().all(|a| match a.cap {
        Some(cap) => a.bonds <= cap,
        None => true,
    })
}
