//! Multi-domain classification data: typed problem instances and the
//! hierarchical-Gaussian toy generator.
//!
//! Each class i has a global mean; each domain j of that class draws its
//! samples from `N(mu_ij, sigma_ij^2 I)` in 2-D. Domain means either come
//! from a fixed table ([`table7_specs`]) or are themselves sampled from
//! `N(mu_i, sigma_i^2 I)` ([`sample_domain_means`]).

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffmath::Matrix;
use crate::error::{Error, Result};

pub const FEATURE_DIM: usize = 2;

/// Generative description of one class across all domains.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    /// Class-level mean (mu_i).
    pub class_mean: [f64; 2],
    /// Class-level standard deviation (sigma_i) used when resampling
    /// per-domain means.
    pub class_sigma: f64,
    /// Per-domain means (mu_ij), one per domain.
    pub domain_means: Vec<[f64; 2]>,
    /// Within-domain standard deviation (sigma_ij), shared by the class's domains.
    pub domain_sigma: f64,
}

impl ClassSpec {
    fn validate(&self, n_domains: usize) -> Result<()> {
        if !(self.class_sigma > 0.0) {
            return Err(Error::Param(format!("class sigma must be > 0, got {}", self.class_sigma)));
        }
        if !(self.domain_sigma > 0.0) {
            return Err(Error::Param(format!(
                "domain sigma must be > 0, got {}",
                self.domain_sigma
            )));
        }
        if self.domain_means.len() != n_domains {
            return Err(Error::Param(format!(
                "class has {} domain means, expected {n_domains}",
                self.domain_means.len()
            )));
        }
        Ok(())
    }
}

/// Labeled samples from a single domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain_id: usize,
    /// n x FEATURE_DIM inputs.
    pub inputs: Matrix,
    /// Integer class indices, one per input row.
    pub labels: Vec<usize>,
}

impl DomainDataset {
    pub fn new(domain_id: usize, inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(Error::Dim(format!(
                "domain {domain_id}: {} labels for {} rows",
                labels.len(),
                inputs.rows()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Param(format!("domain {domain_id} is empty")));
        }
        Ok(DomainDataset { domain_id, inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A domain-generalization problem: p >= 2 training domains plus held-out
/// test domains, all sharing one category space.
#[derive(Debug, Clone, PartialEq)]
pub struct DGProblem {
    pub training: Vec<DomainDataset>,
    pub test: Vec<DomainDataset>,
    pub n_classes: usize,
}

impl DGProblem {
    pub fn new(training: Vec<DomainDataset>, test: Vec<DomainDataset>, n_classes: usize) -> Result<Self> {
        if training.len() < 2 {
            return Err(Error::Param(format!(
                "need at least 2 training domains for the feedback pair, got {}",
                training.len()
            )));
        }
        if test.is_empty() {
            return Err(Error::Param("need at least 1 test domain".into()));
        }
        for ds in training.iter().chain(&test) {
            if let Some(&bad) = ds.labels.iter().find(|&&l| l >= n_classes) {
                return Err(Error::Param(format!(
                    "domain {} has label {bad} outside [0, {n_classes})",
                    ds.domain_id
                )));
            }
        }
        Ok(DGProblem { training, test, n_classes })
    }
}

/// The fixed toy-dataset parameters: three classes, four domains, all
/// per-domain sigmas 0.2 and class sigmas 0.4.
pub fn table7_specs() -> Vec<ClassSpec> {
    let root3_half = libm::sqrt(3.0) / 2.0;
    alloc::vec![
        ClassSpec {
            class_mean: [0.0, root3_half],
            class_sigma: 0.4,
            domain_means: alloc::vec![
                [0.71, 1.03],
                [-0.04, 0.20],
                [0.08, 1.22],
                [-0.52, 0.54],
            ],
            domain_sigma: 0.2,
        },
        ClassSpec {
            class_mean: [-0.5, 0.0],
            class_sigma: 0.4,
            domain_means: alloc::vec![
                [-0.11, 0.90],
                [-0.45, 0.15],
                [-0.68, 0.03],
                [-0.81, -0.11],
            ],
            domain_sigma: 0.2,
        },
        ClassSpec {
            class_mean: [0.5, 0.0],
            class_sigma: 0.4,
            domain_means: alloc::vec![
                [1.25, -0.39],
                [-0.20, 0.52],
                [0.80, 0.23],
                [0.83, -0.12],
            ],
            domain_sigma: 0.2,
        },
    ]
}

/// Draws the class-balanced toy problem: every domain gets
/// `samples_per_class_per_domain` draws per class from `N(mu_ij, sigma_ij^2 I)`.
/// The last domain becomes the test domain, the rest train.
pub fn generate_toy(
    specs: &[ClassSpec],
    samples_per_class_per_domain: usize,
    rng: &mut impl Rng,
) -> Result<DGProblem> {
    if specs.is_empty() {
        return Err(Error::Param("need at least one class spec".into()));
    }
    if samples_per_class_per_domain == 0 {
        return Err(Error::Param("samples per class per domain must be > 0".into()));
    }
    let n_domains = specs[0].domain_means.len();
    if n_domains < 3 {
        return Err(Error::Param(format!(
            "need at least 3 domains (2 train + 1 test), got {n_domains}"
        )));
    }
    for spec in specs {
        spec.validate(n_domains)?;
    }

    let n_classes = specs.len();
    let per_domain = n_classes * samples_per_class_per_domain;
    let mut domains = Vec::with_capacity(n_domains);
    for d in 0..n_domains {
        let mut data = Vec::with_capacity(per_domain * FEATURE_DIM);
        let mut labels = Vec::with_capacity(per_domain);
        for (class, spec) in specs.iter().enumerate() {
            let mean = spec.domain_means[d];
            for _ in 0..samples_per_class_per_domain {
                for (axis, mu) in mean.iter().enumerate() {
                    let z: f64 = rng.sample(StandardNormal);
                    let _ = axis;
                    data.push(mu + spec.domain_sigma * z);
                }
                labels.push(class);
            }
        }
        let inputs = Matrix::from_vec(per_domain, FEATURE_DIM, data)?;
        domains.push(DomainDataset::new(d, inputs, labels)?);
    }
    let test = domains.split_off(n_domains - 1);
    DGProblem::new(domains, test, n_classes)
}

/// Samples per-domain means `mu_ij ~ N(mu_i, sigma_i^2 I)` for each class,
/// used instead of the fixed table when fresh draws are requested.
pub fn sample_domain_means(
    class_level: &[([f64; 2], f64)],
    n_domains: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<[f64; 2]>>> {
    if n_domains == 0 {
        return Err(Error::Param("need at least one domain".into()));
    }
    let mut out = Vec::with_capacity(class_level.len());
    for (mean, sigma) in class_level {
        if !(*sigma > 0.0) {
            return Err(Error::Param(format!("class sigma must be > 0, got {sigma}")));
        }
        let mut per_domain = Vec::with_capacity(n_domains);
        for _ in 0..n_domains {
            let z0: f64 = rng.sample(StandardNormal);
            let z1: f64 = rng.sample(StandardNormal);
            per_domain.push([mean[0] + sigma * z0, mean[1] + sigma * z1]);
        }
        out.push(per_domain);
    }
    Ok(out)
}

/// Uniform sample of `batch_size` distinct rows.
pub fn minibatch(
    dataset: &DomainDataset,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<(Matrix, Vec<usize>)> {
    let n = dataset.len();
    if batch_size == 0 || batch_size > n {
        return Err(Error::Param(format!(
            "batch size {batch_size} invalid for domain of {n} samples"
        )));
    }
    let picked = rand::seq::index::sample(rng, n, batch_size);
    let cols = dataset.inputs.cols();
    let mut data = Vec::with_capacity(batch_size * cols);
    let mut labels = Vec::with_capacity(batch_size);
    for idx in picked.iter() {
        data.extend_from_slice(dataset.inputs.row(idx));
        labels.push(dataset.labels[idx]);
    }
    Ok((Matrix::from_vec(batch_size, cols, data)?, labels))
}

/// One-hot rows for integer labels.
pub fn one_hot(labels: &[usize], n_classes: usize) -> Result<Matrix> {
    let mut out = Matrix::zeros(labels.len(), n_classes);
    for (r, &label) in labels.iter().enumerate() {
        if label >= n_classes {
            return Err(Error::Param(format!("label {label} outside [0, {n_classes})")));
        }
        out.set(r, label, 1.0);
    }
    Ok(out)
}
