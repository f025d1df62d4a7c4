//! Latency histograms over probe-sample CSV files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    pub width: u64,
    /// Bucket start to count.
    pub buckets: BTreeMap<u64, u64>,
}

impl Histogram {
    pub fn new(width: u64) -> Result<Histogram> {
        if width == 0 {
            return Err(Error::Usage("bucket width must be at least 1".into()));
        }
        Ok(Histogram { width, buckets: BTreeMap::new() })
    }

    pub fn from_latencies(width: u64, latencies: &[u64]) -> Result<Histogram> {
        let mut h = Histogram::new(width)?;
        for &l in latencies {
            h.add(l);
        }
        Ok(h)
    }

    pub fn add(&mut self, latency: u64) {
        *self.buckets.entry(latency / self.width * self.width).or_default() += 1;
    }

    pub fn total(&self) -> u64 {
        self.buckets.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    /// Bucket starts of local maxima, highest count first.
    pub fn modes(&self) -> Vec<u64> {
        let v: Vec<(u64, u64)> = self.buckets.iter().map(|(&k, &c)| (k, c)).collect();
        let mut peaks: Vec<(u64, u64)> = (0..v.len())
            .filter(|&i| {
                let left = i == 0 || v[i - 1].1 < v[i].1 || v[i - 1].0 + self.width != v[i].0;
                let right = i + 1 == v.len() || v[i + 1].1 <= v[i].1 || v[i].0 + self.width != v[i + 1].0;
                left && right
            })
            .map(|i| v[i])
            .collect();
        peaks.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        peaks.into_iter().map(|(k, _)| k).collect()
    }

    /// One line per non-empty bucket with a bar scaled to `max_bar` columns.
    pub fn render_ascii(&self, max_bar: usize) -> String {
        let mut out = String::new();
        let peak = self.buckets.values().copied().max().unwrap_or(0);
        for (&start, &count) in &self.buckets {
            let len = if peak == 0 { 0 } else { (count as f64 / peak as f64 * max_bar as f64).ceil() as usize };
            let label = if self.width == 1 {
                format!("{start}")
            } else {
                format!("{start}-{}", start + self.width - 1)
            };
            let _ = writeln!(out, "{label:>11} | {:<max_bar$} {count}", "#".repeat(len));
        }
        out
    }

    /// Rows `bucket_start,bucket_end,count`; the end is exclusive.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bucket_start", "bucket_end", "count"])?;
        for (&start, &count) in &self.buckets {
            w.write_record([start.to_string(), (start + self.width).to_string(), count.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads the `latency` column of a sample CSV. Empty input yields no
/// samples; a header without a `latency` column or a non-integer value is an
/// error.
pub fn read_latencies<R: Read>(input: R) -> Result<Vec<u64>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    let col = headers
        .iter()
        .position(|h| h.trim() == "latency")
        .ok_or_else(|| Error::Usage("sample file has no `latency` column".into()))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = rec.get(col).unwrap_or("").trim();
        let v = field
            .parse()
            .map_err(|_| Error::Usage(format!("row {}: latency `{field}` is not an integer", i + 2)))?;
        out.push(v);
    }
    Ok(out)
}
