//! Scanner asserting that no training sample leaves a worker.
//!
//! A row counts as leaked if its feature values appear, consecutively and
//! bit-exactly, either as numbers written out in a payload's text or as
//! little-endian f64 bytes anywhere in it.

use std::collections::HashMap;

use crate::data::Dataset;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Leak {
    /// What carried it, e.g. `payload #12` or an object key.
    pub carrier: String,
    pub dataset: usize,
    pub row: usize,
}

/// Index of feature rows keyed by the bits of their first value.
#[derive(Debug, Clone)]
pub struct RowIndex {
    rows: Vec<(usize, usize, Vec<f64>)>,
    by_first: HashMap<u64, Vec<usize>>,
    dims: usize,
}

impl RowIndex {
    pub fn new(datasets: &[&Dataset]) -> Self {
        let mut rows = Vec::new();
        let mut by_first: HashMap<u64, Vec<usize>> = HashMap::new();
        let dims = datasets.first().map_or(0, |d| d.dims());
        for (di, d) in datasets.iter().enumerate() {
            for (ri, row) in d.rows().enumerate() {
                by_first.entry(row[0].to_bits()).or_default().push(rows.len());
                rows.push((di, ri, row.to_vec()));
            }
        }
        Self {
            rows,
            by_first,
            dims,
        }
    }

    fn hits_in(&self, values: &[f64], carrier: &str, out: &mut Vec<Leak>) {
        if self.dims == 0 {
            return;
        }
        for start in 0..values.len() {
            let Some(cands) = self.by_first.get(&values[start].to_bits()) else {
                continue;
            };
            for &c in cands {
                let (di, ri, row) = &self.rows[c];
                let window = values.get(start..start + row.len());
                if window.is_some_and(|w| w.iter().zip(row).all(|(a, b)| a.to_bits() == b.to_bits())) {
                    out.push(Leak {
                        carrier: carrier.to_string(),
                        dataset: *di,
                        row: *ri,
                    });
                }
            }
        }
    }

    /// All leaks found in one payload.
    pub fn scan(&self, carrier: &str, payload: &[u8]) -> Vec<Leak> {
        let mut out = Vec::new();
        self.hits_in(&text_numbers(payload), carrier, &mut out);
        for offset in 0..8 {
            self.hits_in(&raw_f64s(payload, offset), carrier, &mut out);
        }
        out
    }
}

/// Every maximal numeric token in the payload's text, in order.
pub fn text_numbers(payload: &[u8]) -> Vec<f64> {
    let text = String::from_utf8_lossy(payload);
    text.split(|c: char| !(c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E')))
        .filter(|t| t.bytes().any(|b| b.is_ascii_digit()))
        .filter_map(|t| t.parse::<f64>().ok())
        .collect()
}

/// The payload read as little-endian f64s starting at `offset`.
pub fn raw_f64s(payload: &[u8], offset: usize) -> Vec<f64> {
    payload
        .get(offset..)
        .unwrap_or(&[])
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Labels;

    fn data() -> Dataset {
        Dataset::new(vec![0.123456789, -2.5, 3.75, 4.0625], 2, Labels::Class(vec![0, 1]), 1.0).unwrap()
    }

    #[test]
    fn finds_json_rows() {
        let d = data();
        let idx = RowIndex::new(&[&d]);
        let leak = br#"{"x":[0.123456789,-2.5]}"#;
        assert_eq!(idx.scan("p", leak).len(), 1);
        assert!(idx.scan("p", br#"{"x":[0.123456789,2.5]}"#).is_empty());
    }

    #[test]
    fn finds_raw_bytes_at_any_offset() {
        let d = data();
        let idx = RowIndex::new(&[&d]);
        let mut blob = vec![7u8, 1, 2];
        blob.extend_from_slice(&3.75f64.to_le_bytes());
        blob.extend_from_slice(&4.0625f64.to_le_bytes());
        let leaks = idx.scan("blob", &blob);
        assert_eq!(leaks, vec![Leak {
            carrier: "blob".into(),
            dataset: 0,
            row: 1
        }]);
    }
}
