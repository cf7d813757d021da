use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::text::TokenId;

/// One categorical draw per row of a log-probability matrix, temperature 1.
pub fn sample_replacements<R: Rng + ?Sized>(log_probs: &Tensor, rng: &mut R) -> Result<Vec<TokenId>> {
    let (m, _) = log_probs.dims2();
    (0..m)
        .map(|r| {
            let dist = WeightedIndex::new(log_probs.row(r).iter().map(|lp| lp.exp()))
                .map_err(|e| Error::Validation(format!("row {r} is not a distribution: {e}")))?;
            Ok(dist.sample(rng) as TokenId)
        })
        .collect()
}
