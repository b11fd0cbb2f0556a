//! Domain datasets: construction, splits, standardization and multi-source
//! concatenation.

pub mod idx;
pub mod synthetic;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MudaError, Result};
use crate::ndcore::Tensor;

pub use idx::{decode_idx, encode_idx, read_idx, read_idx_file, write_idx, IdxData, IdxDtype};
pub use synthetic::{
    blob_centers, make_blob_domain, make_shifted_blobs, make_two_moons, rotate_point, BlobSpec, MOONS_NOISE_STD,
};

/// Samples from one domain. Labels are optional; on target domains they are
/// kept for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    inputs: Tensor,
    labels: Option<Vec<usize>>,
    domain_id: String,
    num_classes: usize,
}

impl DomainDataset {
    pub fn new(
        inputs: Tensor,
        labels: Option<Vec<usize>>,
        domain_id: impl Into<String>,
        num_classes: usize,
    ) -> Result<Self> {
        inputs.ensure_matrix("dataset inputs")?;
        if !inputs.is_finite() {
            return Err(MudaError::Validation(
                "dataset inputs contain NaN or infinite values".into(),
            ));
        }
        if num_classes < 2 {
            return Err(MudaError::Validation(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if let Some(labels) = &labels {
            if labels.len() != inputs.rows() {
                return Err(MudaError::Shape {
                    context: "labels vs inputs",
                    left: vec![labels.len()],
                    right: inputs.shape().to_vec(),
                });
            }
            if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
                return Err(MudaError::Validation(format!(
                    "label {bad} out of range for {num_classes} classes"
                )));
            }
        }
        Ok(DomainDataset {
            inputs,
            labels,
            domain_id: domain_id.into(),
            num_classes,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Labels, or a validation error naming the domain.
    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels()
            .ok_or_else(|| MudaError::Validation(format!("domain `{}` has no labels", self.domain_id)))
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(MudaError::Validation("cannot select an empty subset".into()));
        }
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        DomainDataset::new(
            self.inputs.select_rows(indices),
            labels,
            self.domain_id.clone(),
            self.num_classes,
        )
    }

    /// Copy with labels removed.
    pub fn unlabeled(&self) -> Self {
        DomainDataset {
            labels: None,
            ..self.clone()
        }
    }

    pub fn with_domain_id(mut self, id: impl Into<String>) -> Self {
        self.domain_id = id.into();
        self
    }
}

/// Shuffled split into disjoint parts with the given fractions.
/// Part boundaries are `round(cumulative_fraction · N)`.
pub fn split(ds: &DomainDataset, fractions: &[f64], seed: u64) -> Result<Vec<DomainDataset>> {
    if fractions.is_empty() || fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
        return Err(MudaError::config("split.fractions", "fractions must lie in [0, 1]"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(MudaError::config(
            "split.fractions",
            format!("fractions sum to {total}, not 1"),
        ));
    }
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = Vec::with_capacity(fractions.len());
    let mut cum = 0.0;
    let mut start = 0;
    for (i, f) in fractions.iter().enumerate() {
        cum += f;
        let end = if i + 1 == fractions.len() {
            n
        } else {
            ((cum * n as f64).round() as usize).min(n)
        };
        if end <= start {
            return Err(MudaError::Validation(format!("split part {i} would be empty")));
        }
        parts.push(ds.select(&order[start..end])?);
        start = end;
    }
    Ok(parts)
}

/// Concatenates labeled source domains in input order.
pub fn source_combine(datasets: &[DomainDataset]) -> Result<DomainDataset> {
    let first = datasets
        .first()
        .ok_or_else(|| MudaError::Validation("source_combine needs at least one dataset".into()))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for ds in datasets {
        if ds.num_classes != first.num_classes {
            return Err(MudaError::Validation(format!(
                "class count mismatch: `{}` has {}, `{}` has {}",
                first.domain_id, first.num_classes, ds.domain_id, ds.num_classes
            )));
        }
        if ds.dim() != first.dim() {
            return Err(MudaError::Shape {
                context: "source_combine input dimension",
                left: first.inputs.shape().to_vec(),
                right: ds.inputs.shape().to_vec(),
            });
        }
        labels.extend_from_slice(ds.require_labels()?);
        data.extend_from_slice(ds.inputs.data());
    }
    let id = datasets
        .iter()
        .map(|d| d.domain_id.as_str())
        .collect::<Vec<_>>()
        .join("+");
    DomainDataset::new(
        Tensor::new(vec![labels.len(), first.dim()], data)?,
        Some(labels),
        id,
        first.num_classes,
    )
}

/// Per-dimension mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// `(x − mean)/std` per dimension. Without `stats`, they are computed from
/// `ds` (population std) and returned for reuse on other domains. Constant
/// dimensions pass through unchanged (recorded as mean 0, std 1).
pub fn standardize(ds: &DomainDataset, stats: Option<&Standardization>) -> Result<(DomainDataset, Standardization)> {
    let d = ds.dim();
    let stats = match stats {
        Some(s) => {
            if s.mean.len() != d || s.std.len() != d {
                return Err(MudaError::Shape {
                    context: "standardization stats vs data",
                    left: vec![s.mean.len()],
                    right: vec![d],
                });
            }
            s.clone()
        }
        None => {
            let n = ds.len() as f64;
            let mut mean = vec![0.0; d];
            for r in 0..ds.len() {
                for (m, v) in mean.iter_mut().zip(ds.inputs.row_slice(r)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![0.0; d];
            for r in 0..ds.len() {
                for ((s, v), m) in var.iter_mut().zip(ds.inputs.row_slice(r)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            let mut std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
            for (m, s) in mean.iter_mut().zip(std.iter_mut()) {
                if *s == 0.0 {
                    *m = 0.0;
                    *s = 1.0;
                }
            }
            Standardization { mean, std }
        }
    };
    let mut inputs = ds.inputs.clone();
    for r in 0..ds.len() {
        for ((v, m), s) in inputs.row_slice_mut(r).iter_mut().zip(&stats.mean).zip(&stats.std) {
            let s = if *s > 0.0 { *s } else { 1.0 };
            *v = (*v - m) / s;
        }
    }
    let out = DomainDataset { inputs, ..ds.clone() };
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, id: &str, k: usize) -> DomainDataset {
        let inputs = Tensor::new(vec![n, 2], (0..2 * n).map(|v| v as f64).collect()).unwrap();
        let labels = (0..n).map(|i| i % k).collect();
        DomainDataset::new(inputs, Some(labels), id, k).unwrap()
    }

    #[test]
    fn validation() {
        let x = Tensor::zeros(&[2, 2]);
        assert!(DomainDataset::new(x.clone(), Some(vec![0, 2]), "a", 2).is_err());
        assert!(DomainDataset::new(x.clone(), Some(vec![0]), "a", 2).is_err());
        assert!(DomainDataset::new(x.map(|_| f64::NAN), None, "a", 2).is_err());
        assert!(DomainDataset::new(x, None, "a", 2).is_ok());
    }

    #[test]
    fn half_split_of_thousand() {
        let ds = toy(1000, "s", 2);
        let parts = split(&ds, &[0.5, 0.5], 3).unwrap();
        assert_eq!(parts[0].len(), 500);
        assert_eq!(parts[1].len(), 500);
        // disjoint and exhaustive: first coordinate is a unique id (2·i)
        let mut ids: Vec<u64> = parts
            .iter()
            .flat_map(|p| (0..p.len()).map(move |r| p.inputs().get2(r, 0) as u64))
            .collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..1000).map(|i| 2 * i).collect::<Vec<_>>());
        assert!(parts.iter().all(|p| p.labels().is_some()));
        assert_eq!(split(&ds, &[0.5, 0.5], 3).unwrap(), parts);
        assert_ne!(split(&ds, &[0.5, 0.5], 4).unwrap(), parts);
    }

    #[test]
    fn split_errors() {
        let ds = toy(3, "s", 2);
        assert!(split(&ds, &[0.5, 0.6], 0).is_err());
        assert!(split(&ds, &[0.1, 0.9], 0).is_err());
    }

    #[test]
    fn combine() {
        let all = source_combine(&[toy(3, "a", 2), toy(5, "b", 2)]).unwrap();
        assert_eq!(all.len(), 8);
        assert_eq!(all.domain_id(), "a+b");
        assert_eq!(all.inputs().row_slice(3), toy(5, "b", 2).inputs().row_slice(0));
        let one = toy(4, "a", 2);
        assert_eq!(source_combine(std::slice::from_ref(&one)).unwrap(), one);
        assert!(source_combine(&[toy(3, "a", 2), toy(3, "b", 3)]).is_err());
        assert!(source_combine(&[toy(3, "a", 2), toy(3, "b", 2).unlabeled()]).is_err());
    }

    #[test]
    fn standardize_own_stats_and_constant_dims() {
        let inputs = Tensor::from_rows(&[vec![1., 5.], vec![2., 5.], vec![4., 5.]]).unwrap();
        let ds = DomainDataset::new(inputs, None, "s", 2).unwrap();
        let (z, stats) = standardize(&ds, None).unwrap();
        let col0: Vec<f64> = (0..3).map(|r| z.inputs().get2(r, 0)).collect();
        let mean = col0.iter().sum::<f64>() / 3.0;
        let std = (col0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!(mean.abs() < 1e-10 && (std - 1.0).abs() < 1e-10);
        assert!((0..3).all(|r| z.inputs().get2(r, 1) == 5.0));

        let (again, _) = standardize(&ds, Some(&stats)).unwrap();
        assert_eq!(again, z);
    }
}
