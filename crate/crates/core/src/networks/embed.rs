use crate::error::{Error, Result};

/// Sinusoidal step embedding: `dim / 2` sines followed by `dim / 2` cosines at
/// geometric frequencies running from 1 down to 1/10000.
pub fn sinusoidal_embed(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::config(
            "model.time_embed_dim",
            format!("embedding width must be a positive even number, got {dim}"),
        ));
    }
    let half = dim / 2;
    let log_span = 10_000f64.ln();
    let freqs: Vec<f64> = (0..half)
        .map(|k| {
            if half == 1 {
                1.0
            } else {
                (-log_span * k as f64 / (half - 1) as f64).exp()
            }
        })
        .collect();
    let t = t as f64;
    let mut out: Vec<f64> = freqs.iter().map(|w| (t * w).sin()).collect();
    out.extend(freqs.iter().map(|w| (t * w).cos()));
    Ok(out)
}
