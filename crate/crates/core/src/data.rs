//! Observed samples `(Y, X, W)` and their CSV representation.
//!
//! Categories of `X` are 1-based labels `1..=K` on disk; in memory they are
//! stored as 0-based indices so every other module can index arrays directly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An i.i.d. sample of outcome `y`, discrete regressor `x` and binary instrument `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    k: usize,
    y: Vec<f64>,
    x: Vec<usize>,
    w: Vec<u8>,
}

impl Sample {
    /// Build a sample from 0-based category indices.
    ///
    /// `k` is the number of categories; pass `None` to use the largest observed
    /// category.
    pub fn new(y: Vec<f64>, x: Vec<usize>, w: Vec<u8>, k: Option<usize>) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::InvalidSample("sample has no observations".into()));
        }
        if x.len() != n || w.len() != n {
            return Err(Error::InvalidSample(format!(
                "column lengths differ (y: {n}, x: {}, w: {})",
                x.len(),
                w.len()
            )));
        }
        if let Some(row) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: row + 1 });
        }
        if let Some(row) = w.iter().position(|&v| v > 1) {
            return Err(Error::InvalidInstrument {
                row: row + 1,
                value: w[row].to_string(),
            });
        }
        let observed = x.iter().copied().max().unwrap_or(0) + 1;
        let k = k.unwrap_or(observed);
        if k == 0 {
            return Err(Error::InvalidSample("K must be at least 1".into()));
        }
        if let Some(row) = x.iter().position(|&v| v >= k) {
            return Err(Error::InvalidCategory {
                row: row + 1,
                value: x[row] as i64 + 1,
            });
        }
        Ok(Self { k, y, x, w })
    }

    /// Build a sample from 1-based category labels.
    pub fn from_labels(y: Vec<f64>, labels: Vec<i64>, w: Vec<u8>, k: Option<usize>) -> Result<Self> {
        let mut x = Vec::with_capacity(labels.len());
        for (i, &label) in labels.iter().enumerate() {
            if label <= 0 {
                return Err(Error::InvalidCategory { row: i + 1, value: label });
            }
            x.push(label as usize - 1);
        }
        Self::new(y, x, w, k)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// 0-based category indices.
    pub fn x(&self) -> &[usize] {
        &self.x
    }

    pub fn w(&self) -> &[u8] {
        &self.w
    }

    /// Number of observations with `W = instrument`.
    pub fn instrument_count(&self, instrument: u8) -> usize {
        self.w.iter().filter(|&&v| v == instrument).count()
    }

    /// Error unless both instrument values occur.
    pub fn require_both_instruments(&self) -> Result<()> {
        for ell in 0..2u8 {
            if self.instrument_count(ell) == 0 {
                return Err(Error::DegenerateInstrument { missing: ell });
            }
        }
        Ok(())
    }

    /// Observation-wise iterator over `(y, x, w)`.
    pub fn iter(&self) -> impl Iterator<Item = (f64, usize, u8)> + '_ {
        self.y
            .iter()
            .zip(&self.x)
            .zip(&self.w)
            .map(|((&y, &x), &w)| (y, x, w))
    }

    /// Sub-sample of the first `m` observations.
    pub fn head(&self, m: usize) -> Result<Self> {
        let m = m.min(self.n());
        Self::new(
            self.y[..m].to_vec(),
            self.x[..m].to_vec(),
            self.w[..m].to_vec(),
            Some(self.k),
        )
    }

    /// Relabel categories: observation in category `c` moves to `perm[c]`.
    pub fn permute_categories(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.k {
            return Err(Error::InvalidArgument("permutation length must equal K".into()));
        }
        let x = self.x.iter().map(|&c| perm[c]).collect();
        Self::new(self.y.clone(), x, self.w.clone(), Some(self.k))
    }
}

/// Column names used when reading or writing a sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub y: String,
    pub x: String,
    pub w: String,
    /// Declared number of categories; `None` means the largest observed label.
    pub k: Option<usize>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            y: "y".into(),
            x: "x".into(),
            w: "w".into(),
            k: None,
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Sample> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

/// Parse a sample from any CSV reader. Row numbers in diagnostics count data
/// rows from 1 (the header is not counted).
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Sample> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = match rdr.headers() {
        Ok(h) if !h.is_empty() && !(h.len() == 1 && h[0].is_empty()) => h.clone(),
        Ok(_) => return Err(Error::EmptyFile),
        Err(e) => return Err(Error::Csv { row: 0, message: e.to_string() }),
    };
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let (iy, ix, iw) = (col(&schema.y)?, col(&schema.x)?, col(&schema.w)?);

    let mut y = Vec::new();
    let mut labels = Vec::new();
    let mut w = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Csv { row, message: e.to_string() })?;
        let field = |idx: usize| record.get(idx).unwrap_or("");

        let ys = field(iy);
        let yv: f64 = ys.parse().map_err(|_| Error::NonNumeric {
            row,
            column: schema.y.clone(),
            value: ys.to_string(),
        })?;
        if !yv.is_finite() {
            return Err(Error::NonFinite { row });
        }

        let xs = field(ix);
        let xv: i64 = xs.parse().map_err(|_| Error::NonNumeric {
            row,
            column: schema.x.clone(),
            value: xs.to_string(),
        })?;
        if xv <= 0 {
            return Err(Error::InvalidCategory { row, value: xv });
        }
        if let Some(k) = schema.k {
            if xv as usize > k {
                return Err(Error::InvalidCategory { row, value: xv });
            }
        }

        let ws = field(iw);
        let wv = match ws {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                return match other.parse::<f64>() {
                    Ok(_) => Err(Error::InvalidInstrument { row, value: other.to_string() }),
                    Err(_) => Err(Error::NonNumeric {
                        row,
                        column: schema.w.clone(),
                        value: other.to_string(),
                    }),
                }
            }
        };
        y.push(yv);
        labels.push(xv);
        w.push(wv);
    }
    if y.is_empty() {
        return Err(Error::EmptyFile);
    }
    Sample::from_labels(y, labels, w, schema.k)
}

/// Write a sample with header `y,x,w` (1-based categories). Values are written
/// with shortest round-trip formatting, so reading the file back reproduces
/// the sample exactly.
pub fn write_csv<W: Write>(sample: &Sample, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Csv { row: 0, message: e.to_string() };
    wtr.write_record(["y", "x", "w"]).map_err(io)?;
    for (y, x, w) in sample.iter() {
        wtr.write_record([format!("{y:?}"), (x + 1).to_string(), w.to_string()])
            .map_err(io)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Cell counts `n_{ℓ,k}` indexed `[instrument][category]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CellCounts {
    pub k: usize,
    pub counts: [Vec<usize>; 2],
}

impl CellCounts {
    pub fn get(&self, instrument: u8, category: usize) -> usize {
        self.counts[instrument as usize][category]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn instrument_total(&self, instrument: u8) -> usize {
        self.counts[instrument as usize].iter().sum()
    }
}

pub fn split_counts(sample: &Sample) -> CellCounts {
    let mut counts = [vec![0usize; sample.k()], vec![0usize; sample.k()]];
    for (_, x, w) in sample.iter() {
        counts[w as usize][x] += 1;
    }
    CellCounts { k: sample.k(), counts }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FOUR_ROWS: &str = "y,x,w\n1.0,1,0\n2.0,1,1\n3.0,2,0\n4.0,2,1\n";

    fn parse(text: &str, schema: &CsvSchema) -> Result<Sample> {
        read_csv(text.as_bytes(), schema)
    }

    #[test]
    fn parses_four_row_example() {
        let s = parse(FOUR_ROWS, &CsvSchema::default()).unwrap();
        assert_eq!(s.n(), 4);
        assert_eq!(s.k(), 2);
        assert_eq!(s.y(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.x(), &[0, 0, 1, 1]);
        assert_eq!(s.w(), &[0, 1, 0, 1]);
    }

    #[test]
    fn rejects_instrument_value_two_with_row_number() {
        let text = "y,x,w\n1.0,1,0\n2.0,1,1\n3.0,2,2\n";
        let err = parse(text, &CsvSchema::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidInstrument { row: 3, .. }));
        assert!(err.to_string().contains("invalid instrument value, row 3"));
    }

    #[test]
    fn declared_k_allows_empty_category() {
        let schema = CsvSchema { k: Some(3), ..CsvSchema::default() };
        let s = parse(FOUR_ROWS, &schema).unwrap();
        assert_eq!(s.k(), 3);
        let counts = split_counts(&s);
        assert_eq!(counts.get(0, 2) + counts.get(1, 2), 0);
    }

    #[test]
    fn distinct_diagnostics() {
        let d = CsvSchema::default();
        assert!(matches!(parse("y,x\n1,1\n", &d), Err(Error::MissingColumn(c)) if c == "w"));
        assert!(matches!(
            parse("y,x,w\n1,1,0\nabc,1,1\n", &d),
            Err(Error::NonNumeric { row: 2, .. })
        ));
        assert!(matches!(parse("y,x,w\n1,0,0\n", &d), Err(Error::InvalidCategory { row: 1, value: 0 })));
        assert!(matches!(parse("y,x,w\n1,-2,0\n", &d), Err(Error::InvalidCategory { row: 1, value: -2 })));
        assert!(matches!(parse("y,x,w\n", &d), Err(Error::EmptyFile)));
        assert!(matches!(parse("", &d), Err(Error::EmptyFile)));
        assert!(matches!(parse("y,x,w\nNaN,1,0\n", &d), Err(Error::NonFinite { row: 1 })));
        assert!(matches!(parse("y,x,w\ninf,1,0\n", &d), Err(Error::NonFinite { row: 1 })));
        assert!(matches!(parse("y,x,w\n1,1,x\n", &d), Err(Error::NonNumeric { row: 1, .. })));
        let k2 = CsvSchema { k: Some(2), ..CsvSchema::default() };
        assert!(matches!(parse("y,x,w\n1,3,0\n", &k2), Err(Error::InvalidCategory { row: 1, value: 3 })));
    }

    #[test]
    fn schema_remaps_columns() {
        let schema = CsvSchema {
            y: "outcome".into(),
            x: "treat".into(),
            w: "z".into(),
            k: None,
        };
        let s = parse("z,outcome,treat\n0,1.5,2\n1,2.5,1\n", &schema).unwrap();
        assert_eq!(s.y(), &[1.5, 2.5]);
        assert_eq!(s.x(), &[1, 0]);
        assert_eq!(s.w(), &[0, 1]);
    }

    #[test]
    fn split_counts_on_four_rows() {
        let s = parse(FOUR_ROWS, &CsvSchema::default()).unwrap();
        let c = split_counts(&s);
        assert_eq!(c.get(0, 0), 1);
        assert_eq!(c.get(1, 0), 1);
        assert_eq!(c.get(0, 1), 1);
        assert_eq!(c.get(1, 1), 1);
        assert_eq!(c.total(), 4);
    }

    #[test]
    fn all_zero_instrument_has_empty_w1_cells() {
        let s = Sample::new(vec![1.0, 2.0, 3.0], vec![0, 1, 1], vec![0, 0, 0], None).unwrap();
        let c = split_counts(&s);
        assert!(c.counts[1].iter().all(|&v| v == 0));
        assert!(matches!(s.require_both_instruments(), Err(Error::DegenerateInstrument { missing: 1 })));
    }

    #[test]
    fn write_then_read_round_trips() {
        let s = Sample::new(
            vec![0.1, -3.25e-7, 1e300, 2.0 / 3.0],
            vec![0, 2, 1, 0],
            vec![1, 0, 0, 1],
            Some(3),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_csv(&s, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &CsvSchema { k: Some(3), ..CsvSchema::default() }).unwrap();
        assert_eq!(back, s);
    }
}
