use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TileError;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// Seeded shuffle followed by a cut at `round(n * ratio)` boundaries; the test
/// share takes whatever remains.
pub fn split_dataset(ids: &[String], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit, TileError> {
    if ids.is_empty() {
        return Err(TileError::InvalidSplit("empty id list".into()));
    }
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(TileError::InvalidSplit(format!("ratios {ratios:?} must be finite and non-negative")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(TileError::InvalidSplit(format!("ratios {ratios:?} sum to {sum}, not 1")));
    }
    let mut unique = ids.to_vec();
    unique.sort();
    unique.dedup();
    if unique.len() != ids.len() {
        return Err(TileError::InvalidSplit("duplicate ids".into()));
    }

    let n = ids.len();
    let n_train = ((n as f64 * ratios[0]).round() as usize).min(n);
    let n_val = ((n as f64 * ratios[1]).round() as usize).min(n - n_train);

    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test_ids = shuffled.split_off(n_train + n_val);
    let val_ids = shuffled.split_off(n_train);
    Ok(DatasetSplit { train_ids: shuffled, val_ids, test_ids })
}
