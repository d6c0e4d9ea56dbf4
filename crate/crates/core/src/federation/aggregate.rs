//! Sample-weighted federated averaging.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::FederationError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub participant: String,
    pub params: Vec<f64>,
    pub sample_count: u64,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

/// `Σ n_k w_k / Σ n_k`.
pub fn aggregate_round(results: &[RoundResult]) -> Result<Vec<f64>, FederationError> {
    let first = results.first().ok_or(FederationError::EmptyRound)?;
    let d = first.params.len();
    if let Some(r) = results.iter().find(|r| r.params.len() != d) {
        return Err(FederationError::DimensionMismatch(format!(
            "{} sent {} parameters, expected {d}",
            r.participant,
            r.params.len()
        )));
    }
    let total: u64 = results.iter().map(|r| r.sample_count).sum();
    if total == 0 {
        return Err(FederationError::ZeroTotalSamples);
    }
    let total = total as f64;
    Ok((0..d)
        .map(|j| results.iter().map(|r| r.sample_count as f64 * r.params[j]).sum::<f64>() / total)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(p: &[f64], n: u64) -> RoundResult {
        RoundResult { participant: format!("p{n}"), params: p.to_vec(), sample_count: n, metrics: BTreeMap::new() }
    }

    #[test]
    fn examples() {
        assert_eq!(aggregate_round(&[r(&[0.1, -7.0], 9)]).unwrap(), vec![0.1, -7.0]);
        assert_eq!(aggregate_round(&[r(&[1.0, 3.0], 1), r(&[3.0, 5.0], 3)]).unwrap(), vec![2.5, 4.5]);
        assert!(matches!(aggregate_round(&[]), Err(FederationError::EmptyRound)));
        assert!(matches!(aggregate_round(&[r(&[1.0], 0), r(&[2.0], 0)]), Err(FederationError::ZeroTotalSamples)));
        assert!(matches!(
            aggregate_round(&[r(&[1.0], 1), r(&[2.0, 1.0], 1)]),
            Err(FederationError::DimensionMismatch(_))
        ));
        // Duplicating every entry leaves the weighted mean unchanged.
        let once = [r(&[1.0, 3.0], 1), r(&[3.0, 5.0], 3)];
        let twice: Vec<RoundResult> = once.iter().chain(once.iter()).cloned().collect();
        assert_eq!(aggregate_round(&once).unwrap(), aggregate_round(&twice).unwrap());
    }
}
