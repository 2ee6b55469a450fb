use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Inverse-size dataset weights normalized to mean 1:
/// `w_k = (1 / size_k) / mean_j(1 / size_j)`.
pub fn dataset_weights(sizes: &BTreeMap<String, usize>) -> Result<BTreeMap<String, f64>> {
    if sizes.is_empty() {
        return Err(Error::Config("dataset weights need at least one dataset".into()));
    }
    if let Some((name, _)) = sizes.iter().find(|(_, &s)| s == 0) {
        return Err(Error::Config(format!("dataset {name} has no subjects")));
    }
    let mean_inv = sizes.values().map(|&s| 1.0 / s as f64).sum::<f64>() / sizes.len() as f64;
    Ok(sizes.iter().map(|(k, &s)| (k.clone(), (1.0 / s as f64) / mean_inv)).collect())
}
