//! Cost model of a transformer block with MLP ratio 4 over `L` tokens of
//! width `D`:
//!
//! ```text
//! FLOPs = 24·D²·L + 4·D·L²        r_L = 4·D·L² / (24·D²·L) = L / (6·D)
//! ```
//!
//! A task is long-sequence when the quadratic term dominates, `L > 6·D`.

use num_rational::Ratio;
use serde::Serialize;

use crate::{Error, Result};

/// Linear-in-`L` FLOPs (projections and MLP): `24·D²·L`.
pub fn linear_flops(d: u64, l: u64) -> u64 {
    24 * d * d * l
}

/// Quadratic-in-`L` FLOPs (score and context products): `4·D·L²`.
pub fn quadratic_flops(d: u64, l: u64) -> u64 {
    4 * d * l * l
}

pub fn transformer_block_flops(d: u64, l: u64) -> u64 {
    linear_flops(d, l) + quadratic_flops(d, l)
}

/// Block MACs; every FLOP in the block is half of a multiply-accumulate.
pub fn transformer_block_macs(d: u64, l: u64) -> u64 {
    transformer_block_flops(d, l) / 2
}

fn check(d: u64, l: u64) -> Result<()> {
    if d == 0 || l == 0 {
        return Err(Error::domain("complexity", format!("need D, L >= 1, got D={d}, L={l}")));
    }
    Ok(())
}

/// `L / (6D)` in lowest terms.
pub fn quadratic_ratio(d: u64, l: u64) -> Result<Ratio<u64>> {
    check(d, l)?;
    Ok(Ratio::new(l, 6 * d))
}

/// The same ratio formed from the two FLOP terms, for cross-checking.
pub fn quadratic_ratio_from_terms(d: u64, l: u64) -> Result<Ratio<u128>> {
    check(d, l)?;
    Ok(Ratio::new(quadratic_flops(d, l) as u128, linear_flops(d, l) as u128))
}

/// Long-sequence threshold `τ = 6D`.
pub fn threshold(d: u64) -> u64 {
    6 * d
}

/// Tokens produced by non-overlapping `patch × patch` patches.
pub fn patch_tokens(height: u64, width: u64, patch: u64) -> u64 {
    (height / patch) * (width / patch)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityVerdict {
    pub tokens: u64,
    pub dim: u64,
    /// `r_L` as `"num/den"`.
    pub r_l: String,
    pub r_l_value: f64,
    pub tau: u64,
    pub is_long_sequence: bool,
    pub block_flops: u64,
    pub block_macs: u64,
    pub linear_flops: u64,
    pub quadratic_flops: u64,
}

pub fn classify_sequence_task(l: u64, d: u64) -> Result<ComplexityVerdict> {
    let r = quadratic_ratio(d, l)?;
    Ok(ComplexityVerdict {
        tokens: l,
        dim: d,
        r_l: format!("{}/{}", r.numer(), r.denom()),
        r_l_value: *r.numer() as f64 / *r.denom() as f64,
        tau: threshold(d),
        is_long_sequence: r > Ratio::from_integer(1),
        block_flops: transformer_block_flops(d, l),
        block_macs: transformer_block_macs(d, l),
        linear_flops: linear_flops(d, l),
        quadratic_flops: quadratic_flops(d, l),
    })
}

impl ComplexityVerdict {
    pub fn to_table(&self) -> String {
        let rows = [
            ("tokens L", self.tokens.to_string()),
            ("channels D", self.dim.to_string()),
            ("24·D²·L", self.linear_flops.to_string()),
            ("4·D·L²", self.quadratic_flops.to_string()),
            ("block FLOPs", self.block_flops.to_string()),
            ("block MACs", self.block_macs.to_string()),
            ("r_L = L/(6D)", format!("{} ≈ {:.4}", self.r_l, self.r_l_value)),
            ("τ = 6D", self.tau.to_string()),
            (
                "verdict",
                if self.is_long_sequence {
                    "long-sequence (L > 6D)"
                } else {
                    "not long-sequence (L <= 6D)"
                }
                .to_string(),
            ),
        ];
        let w = rows.iter().map(|(k, _)| k.chars().count()).max().unwrap_or(0);
        rows.iter().map(|(k, v)| format!("{k:<w$}  {v}\n", w = w)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_flops_examples() {
        assert_eq!(transformer_block_flops(384, 196), 752_640_000);
        assert_eq!(transformer_block_flops(7, 0), 0);
        assert_eq!(transformer_block_flops(1, 1), 28);
    }

    #[test]
    fn thresholds() {
        assert_eq!(quadratic_ratio(384, 2304).unwrap(), Ratio::from_integer(1));
        assert_eq!(quadratic_ratio(768, 4608).unwrap(), Ratio::from_integer(1));
        assert!(!classify_sequence_task(196, 384).unwrap().is_long_sequence);
        assert!(classify_sequence_task(4000, 384).unwrap().is_long_sequence);
        let ade = classify_sequence_task(4096, 768).unwrap();
        assert!(!ade.is_long_sequence);
        assert!((ade.r_l_value - 0.889).abs() < 1e-3);
        assert_eq!(patch_tokens(224, 224, 16), 196);
    }
}
