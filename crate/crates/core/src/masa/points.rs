use super::MasaError;

/// `n × d` row-major matrix of finite points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointBatch {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl PointBatch {
    pub fn new(d: usize, data: Vec<f64>) -> Result<Self, MasaError> {
        if d == 0 || !data.len().is_multiple_of(d) {
            return Err(MasaError::DimensionMismatch { expected: d, got: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(MasaError::MalformedPayload(format!("non-finite coordinate at index {i}")));
        }
        Ok(PointBatch { n: data.len() / d, d, data })
    }

    pub fn empty(d: usize) -> Self {
        PointBatch { n: 0, d, data: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dims(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.d.max(1))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn extend(&mut self, other: &PointBatch) -> Result<(), MasaError> {
        if other.d != self.d {
            return Err(MasaError::DimensionMismatch { expected: self.d, got: other.d });
        }
        self.data.extend_from_slice(&other.data);
        self.n += other.n;
        Ok(())
    }
}

/// Renders points in the cluster wire format: `n,d\n` then one
/// comma-separated row per point, each `\n`-terminated. Coordinates use the
/// shortest decimal that round-trips.
pub fn format_points(batch: &PointBatch) -> Vec<u8> {
    use std::io::Write;
    let mut out = Vec::with_capacity(16 + batch.n * batch.d * 21);
    let _ = writeln!(out, "{},{}", batch.n, batch.d);
    for row in batch.rows() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(b',');
            }
            let _ = write!(out, "{v}");
        }
        out.push(b'\n');
    }
    out
}

/// Parses the cluster wire format produced by [`format_points`].
pub fn parse_points(payload: &[u8]) -> Result<PointBatch, MasaError> {
    let bad = |m: String| MasaError::MalformedPayload(m);
    let text = std::str::from_utf8(payload).map_err(|e| bad(format!("not UTF-8: {e}")))?;
    let mut lines = text.split_inclusive('\n');
    let header = lines.next().ok_or_else(|| bad("empty payload".into()))?;
    let header = header.strip_suffix('\n').ok_or_else(|| bad("unterminated header".into()))?;
    let (n, d) = header.split_once(',').ok_or_else(|| bad(format!("bad header `{header}`")))?;
    let n: usize = n.parse().map_err(|_| bad(format!("bad point count `{n}`")))?;
    let d: usize = d.parse().map_err(|_| bad(format!("bad dimension `{d}`")))?;
    if d == 0 {
        return Err(bad("dimension must be >= 1".into()));
    }
    let mut data = Vec::with_capacity(n.saturating_mul(d).min(1 << 24));
    for i in 0..n {
        let line = lines.next().ok_or_else(|| bad(format!("expected {n} rows, found {i}")))?;
        let line = line.strip_suffix('\n').ok_or_else(|| bad(format!("row {i} is not terminated")))?;
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field.parse().map_err(|_| bad(format!("row {i}: bad number `{field}`")))?;
            if !v.is_finite() {
                return Err(bad(format!("row {i}: non-finite value")));
            }
            data.push(v);
        }
        if data.len() - before != d {
            return Err(bad(format!("row {i} has {} values, expected {d}", data.len() - before)));
        }
    }
    if lines.next().is_some() {
        return Err(bad(format!("trailing data after {n} rows")));
    }
    Ok(PointBatch { n, d, data })
}
