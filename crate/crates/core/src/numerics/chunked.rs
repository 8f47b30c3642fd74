//! Multi-head scaled dot-product attention restricted to aligned chunks.
//!
//! Rows `[b·k, (b+1)·k)` form chunk `b`; a query only attends to keys of its
//! own chunk. Masked keys get a score of −∞ (probability exactly zero) and
//! masked queries produce zero output rows.

use super::kernels::{dot, softmax_in_place};
use super::meter::ScoreBuffer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ChunkGeometry {
    pub rows: usize,
    pub width: usize,
    pub chunk: usize,
    pub heads: usize,
    pub scale: f64,
}

impl ChunkGeometry {
    pub fn new(rows: usize, width: usize, chunk: usize, heads: usize) -> Self {
        let scale = if heads > 0 && width >= heads {
            1.0 / ((width / heads) as f64).sqrt()
        } else {
            1.0
        };
        ChunkGeometry {
            rows,
            width,
            chunk,
            heads,
            scale,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn chunks(&self) -> usize {
        self.rows / self.chunk
    }

    pub fn score_len(&self) -> usize {
        self.chunks() * self.heads * self.chunk * self.chunk
    }

    pub fn validate(&self, mask_len: usize) -> Result<()> {
        if self.chunk == 0 || self.heads == 0 {
            return Err(Error::Config("chunk size and head count must be >= 1".into()));
        }
        if !self.rows.is_multiple_of(self.chunk) {
            return Err(Error::Contract(format!(
                "{} rows are not divisible by chunk size {}",
                self.rows, self.chunk
            )));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if mask_len != self.rows {
            return Err(Error::Dimension(format!(
                "mask has {mask_len} entries for {} rows",
                self.rows
            )));
        }
        Ok(())
    }
}

pub(crate) fn forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    mask: &[bool],
    g: ChunkGeometry,
) -> Result<(Vec<f64>, ScoreBuffer)> {
    g.validate(mask.len())?;
    let (c, w, dh) = (g.chunk, g.width, g.head_dim());
    let scale = g.scale;
    let mut out = vec![0.0; g.rows * w];
    let mut probs = ScoreBuffer::zeros(g.score_len());
    let p_all = probs.as_mut_slice();

    for b in 0..g.chunks() {
        let base = b * c;
        for h in 0..g.heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..c {
                let qi = base + i;
                if !mask[qi] {
                    continue;
                }
                let p_off = ((b * g.heads + h) * c + i) * c;
                let p_row = &mut p_all[p_off..p_off + c];
                let q_row = &q[qi * w..qi * w + w][cols.clone()];
                let mut any = false;
                for (j, p) in p_row.iter_mut().enumerate() {
                    let kj = base + j;
                    if mask[kj] {
                        *p = dot(q_row, &k[kj * w..kj * w + w][cols.clone()]) * scale;
                        any = true;
                    } else {
                        *p = f64::NEG_INFINITY;
                    }
                }
                if !any {
                    return Err(Error::DegenerateRow(format!(
                        "query row {qi} has no unmasked key in its chunk"
                    )));
                }
                softmax_in_place(p_row);
                let o_row = &mut out[qi * w..qi * w + w][cols.clone()];
                for (j, &p) in p_row.iter().enumerate() {
                    let vj = base + j;
                    if !mask[vj] {
                        continue;
                    }
                    let v_row = &v[vj * w..vj * w + w][cols.clone()];
                    for (o, &x) in o_row.iter_mut().zip(v_row) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    Ok((out, probs))
}

/// Gradients of `(q, k, v)` given the output gradient and saved probabilities.
pub(crate) fn backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    mask: &[bool],
    probs: &[f64],
    d_out: &[f64],
    g: ChunkGeometry,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (c, w, dh) = (g.chunk, g.width, g.head_dim());
    let scale = g.scale;
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; c];

    for b in 0..g.chunks() {
        let base = b * c;
        for h in 0..g.heads {
            let lo = h * dh;
            for i in 0..c {
                let qi = base + i;
                if !mask[qi] {
                    continue;
                }
                let p_off = ((b * g.heads + h) * c + i) * c;
                let p_row = &probs[p_off..p_off + c];
                let do_row = &d_out[qi * w + lo..qi * w + lo + dh];
                let mut weighted = 0.0;
                for j in 0..c {
                    let kj = base + j;
                    if !mask[kj] {
                        dp[j] = 0.0;
                        continue;
                    }
                    dp[j] = dot(do_row, &v[kj * w + lo..kj * w + lo + dh]);
                    weighted += p_row[j] * dp[j];
                    let dv_row = &mut dv[kj * w + lo..kj * w + lo + dh];
                    for (acc, &g_o) in dv_row.iter_mut().zip(do_row) {
                        *acc += p_row[j] * g_o;
                    }
                }
                for j in 0..c {
                    let kj = base + j;
                    if !mask[kj] {
                        continue;
                    }
                    let ds = p_row[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for t in 0..dh {
                        dq[qi * w + lo + t] += ds * k[kj * w + lo + t];
                        dk[kj * w + lo + t] += ds * q[qi * w + lo + t];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
