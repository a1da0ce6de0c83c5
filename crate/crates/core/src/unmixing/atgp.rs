use super::nnls::dot;
use super::EndmemberSet;
use crate::error::{Error, Result};

const RANK_FLOOR: f64 = 1e-12;

/// Automatic target generation process.
///
/// `pixels` is pixel-major (`pixels[p * bands + k]`). The first target is the
/// pixel of largest norm; each following target maximizes the norm of the
/// residual left after projecting out the span of the targets found so far.
/// Ties go to the lowest pixel index.
pub fn atgp(pixels: &[f64], bands: usize, m: usize) -> Result<EndmemberSet> {
    if bands == 0 || pixels.is_empty() || !pixels.len().is_multiple_of(bands) {
        return Err(Error::Shape(format!(
            "{} values do not form whole {bands}-band pixels",
            pixels.len()
        )));
    }
    if m == 0 {
        return Err(Error::Config("endmember count must be at least 1".into()));
    }
    if m > bands {
        return Err(Error::Config(format!("cannot extract {m} endmembers from {bands} bands")));
    }
    let n = pixels.len() / bands;
    if m > n {
        return Err(Error::Config(format!("cannot extract {m} endmembers from {n} pixels")));
    }

    let mut residual = pixels.to_vec();
    let mut chosen: Vec<usize> = Vec::with_capacity(m);
    while chosen.len() < m {
        let mut best = (0usize, -1.0f64);
        for p in 0..n {
            let r = &residual[p * bands..(p + 1) * bands];
            let norm = dot(r, r);
            if norm > best.1 {
                best = (p, norm);
            }
        }
        let (pick, norm2) = best;
        if norm2.sqrt() < RANK_FLOOR {
            return Err(Error::Degenerate(format!(
                "ATGP found only {} of {m} endmembers before the residual vanished",
                chosen.len()
            )));
        }
        chosen.push(pick);
        let norm = norm2.sqrt();
        let u: Vec<f64> = residual[pick * bands..(pick + 1) * bands]
            .iter()
            .map(|v| v / norm)
            .collect();
        for r in residual.chunks_exact_mut(bands) {
            let c = dot(&u, r);
            for (ri, ui) in r.iter_mut().zip(&u) {
                *ri -= c * ui;
            }
        }
    }

    let columns = chosen
        .iter()
        .map(|&p| pixels[p * bands..(p + 1) * bands].to_vec())
        .collect();
    EndmemberSet::new(columns, Some(chosen))
}
