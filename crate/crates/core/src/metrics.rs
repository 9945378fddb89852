//! FID and unbiased MMD over extracted features, with the PSD matrix square
//! root FID needs, plus the small CNN used as the default extractor.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{encode_blob, sha256_hex};
use crate::config::RunConfig;
use crate::data::{derive_seed, hflip};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nets::{build_extractor, NetKind, Network};
use crate::optim::Adam;
use crate::tensor::Tensor;

/// `n x d` feature matrix, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl FeatureSet {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::Shape(format!("{n}x{d} features need {} values, got {}", n * d, data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { term: "features".into() });
        }
        Ok(Self { n, d, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("feature rows differ in length".into()));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Sample mean and unbiased (N - 1) covariance, symmetrized.
pub fn gaussian_stats(fs: &FeatureSet) -> Result<GaussianStats> {
    if fs.n < 2 {
        return Err(Error::Precondition(format!("covariance needs at least 2 samples, got {}", fs.n)));
    }
    let x = DMatrix::from_row_slice(fs.n, fs.d, &fs.data);
    let mean = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (fs.n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mean, cov })
}

const SYM_TOL: f64 = 1e-8;

/// Square root of a symmetric PSD matrix through its eigendecomposition.
/// Eigenvalues down to `-1e-8` (relative to the largest magnitude) are
/// clamped to zero.
pub fn sqrtm_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::Shape(format!("sqrtm needs a square matrix, got {}x{}", a.nrows(), a.ncols())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { term: "sqrtm input".into() });
    }
    let scale = a.amax().max(1.0);
    let asym = (a - a.transpose()).amax();
    if asym > SYM_TOL * scale {
        return Err(Error::Numeric(format!("matrix is not symmetric (max asymmetry {asym:e})")));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.min();
    if min < -SYM_TOL * scale {
        return Err(Error::Numeric(format!("matrix is not PSD (eigenvalue {min:e})")));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    let b = q * DMatrix::from_diagonal(&roots) * q.transpose();
    Ok((&b + b.transpose()) * 0.5)
}

/// FID with its diagnostic pieces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub fid: f64,
    /// Unclamped value.
    pub raw: f64,
    /// `||B B - M||_F / ||M||_F` of the inner square root.
    pub sqrt_residual: f64,
}

pub fn fid_stats(a: &GaussianStats, b: &GaussianStats) -> Result<FidReport> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Shape(format!(
            "feature dims differ: {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let s1 = sqrtm_psd(&a.cov)?;
    let m = &s1 * &b.cov * &s1;
    let m = (&m + m.transpose()) * 0.5;
    let root = sqrtm_psd(&m)?;
    let norm = m.norm();
    let sqrt_residual = if norm > 0.0 { (&root * &root - &m).norm() / norm } else { 0.0 };
    let dmu = (&a.mean - &b.mean).norm_squared();
    let raw = dmu + a.cov.trace() + b.cov.trace() - 2.0 * root.trace();
    Ok(FidReport {
        fid: raw.max(0.0),
        raw,
        sqrt_residual,
    })
}

pub fn fid_report(real: &FeatureSet, gen: &FeatureSet) -> Result<FidReport> {
    if real.d != gen.d {
        return Err(Error::Shape(format!("feature dims differ: {} vs {}", real.d, gen.d)));
    }
    fid_stats(&gaussian_stats(real)?, &gaussian_stats(gen)?)
}

pub fn fid(real: &FeatureSet, gen: &FeatureSet) -> Result<f64> {
    Ok(fid_report(real, gen)?.fid)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdReport {
    pub mmd: f64,
    pub bandwidth: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median Euclidean distance over all distinct pairs of the pooled sample;
/// 1 when that median is 0.
pub fn median_bandwidth(real: &FeatureSet, gen: &FeatureSet) -> f64 {
    let rows: Vec<&[f64]> = (0..real.n).map(|i| real.row(i)).chain((0..gen.n).map(|i| gen.row(i))).collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let k = d.len();
    let med = if k % 2 == 1 { d[k / 2] } else { 0.5 * (d[k / 2 - 1] + d[k / 2]) };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Unbiased MMD^2 estimate with a Gaussian kernel.
pub fn mmd_report(real: &FeatureSet, gen: &FeatureSet, bandwidth: Bandwidth) -> Result<MmdReport> {
    if real.n < 2 || gen.n < 2 {
        return Err(Error::Precondition(format!(
            "MMD needs at least 2 samples per set, got {} and {}",
            real.n, gen.n
        )));
    }
    if real.d != gen.d {
        return Err(Error::Shape(format!("feature dims differ: {} vs {}", real.d, gen.d)));
    }
    let sigma = match bandwidth {
        Bandwidth::Auto => median_bandwidth(real, gen),
        Bandwidth::Fixed(s) if s > 0.0 && s.is_finite() => s,
        Bandwidth::Fixed(s) => return Err(Error::Precondition(format!("bandwidth must be positive, got {s}"))),
    };
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let k = |a: &[f64], b: &[f64]| (-sq_dist(a, b) * gamma).exp();
    let within = |fs: &FeatureSet| {
        let mut s = 0.0;
        for i in 0..fs.n {
            for j in i + 1..fs.n {
                s += k(fs.row(i), fs.row(j));
            }
        }
        // each unordered pair stands for (i, j) and (j, i)
        2.0 * s / (fs.n * (fs.n - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..real.n {
        for j in 0..gen.n {
            cross += k(real.row(i), gen.row(j));
        }
    }
    let mmd = within(real) + within(gen) - 2.0 * cross / (real.n * gen.n) as f64;
    Ok(MmdReport { mmd, bandwidth: sigma })
}

pub fn mmd(real: &FeatureSet, gen: &FeatureSet, bandwidth: Bandwidth) -> Result<f64> {
    Ok(mmd_report(real, gen, bandwidth)?.mmd)
}

/// Pooled features of the extractor for each image, in order.
pub fn extract_features(images: &[Tensor], extractor: &Network) -> Result<FeatureSet> {
    if extractor.kind() != NetKind::Extractor {
        return Err(Error::State(format!("{} is not a feature extractor", extractor.kind())));
    }
    if images.is_empty() {
        return Err(Error::Precondition("no images to extract features from".into()));
    }
    let channels = extractor.params()[0].value.shape()[1];
    let mut rows = Vec::new();
    for chunk in images.chunks(16) {
        for img in chunk {
            let (_, c, _, _) = img.dims4()?;
            if c != channels {
                return Err(Error::Shape(format!("extractor expects {channels} channel(s), got {c}")));
            }
        }
        let batch = Tensor::concat_batch(&chunk.iter().collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let b = extractor.bind(&mut g, false);
        let x = g.constant(batch);
        let f = extractor.features(&mut g, &b, x);
        let t = g.value(f);
        let d = t.shape()[1];
        rows.extend(t.data().chunks(d).map(|r| r.to_vec()));
    }
    FeatureSet::from_rows(&rows)
}

/// Digest of an extractor's parameter values.
pub fn extractor_fingerprint(extractor: &Network) -> String {
    let entries: Vec<(&str, &Tensor)> = extractor.params().iter().map(|p| (p.name.as_str(), &p.value)).collect();
    sha256_hex(&encode_blob(&entries))
}

/// Trains the extractor's linear head and trunk to tell domain A (label 0)
/// from domain B (label 1); returns the trained network and the final
/// training accuracy.
pub fn train_extractor(a: &[Tensor], b: &[Tensor], cfg: &RunConfig) -> Result<(Network, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Precondition("extractor training needs images of both domains".into()));
    }
    let mut net = build_extractor(cfg, derive_seed(cfg.seed, 0xFE, 0));
    let mut opt = Adam::new(&net, 0.9, 0.999, cfg.adam_eps);
    let half = 4;
    for step in 0..cfg.extractor_steps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xFE, step + 1));
        let mut imgs = Vec::new();
        let mut labels = Vec::new();
        for (set, label) in [(a, 0.0), (b, 1.0)] {
            for _ in 0..half {
                let img = &set[rng.random_range(0..set.len())];
                imgs.push(if rng.random_bool(0.5) { hflip(img) } else { img.clone() });
                labels.push(label);
            }
        }
        let x = Tensor::concat_batch(&imgs.iter().collect::<Vec<_>>())?;
        let y = Tensor::new(&[labels.len(), 1, 1, 1], labels)?;
        let mut g = Graph::new();
        let bound = net.bind(&mut g, true);
        let xv = g.constant(x);
        let logits = net.forward_logits(&mut g, &bound, xv);
        let loss = g.bce_with_logits(logits, &y);
        if !g.item(loss).is_finite() {
            return Err(Error::Diverged {
                step,
                term: "extractor".into(),
            });
        }
        let mut grads = g.backward(loss);
        let gs: Vec<_> = bound.vars().iter().map(|&v| grads.take(v)).collect();
        opt.step(&mut net, &gs, 1e-3)?;
    }
    let mut correct = 0usize;
    for (set, label) in [(a, false), (b, true)] {
        for img in set {
            let logit = net.apply(img).data()[0];
            if (logit > 0.0) == label {
                correct += 1;
            }
        }
    }
    let acc = correct as f64 / (a.len() + b.len()) as f64;
    Ok((net, acc))
}

/// The `evaluate` report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid: f64,
    pub mmd: f64,
    pub mmd_times_10: f64,
    pub bandwidth: f64,
    pub n: usize,
    pub m: usize,
    pub extractor_fingerprint: String,
}

pub fn evaluate_features(real: &FeatureSet, gen: &FeatureSet, fingerprint: String) -> Result<EvalReport> {
    let f = fid(real, gen)?;
    let m = mmd_report(real, gen, Bandwidth::Auto)?;
    Ok(EvalReport {
        fid: f,
        mmd: m.mmd,
        mmd_times_10: 10.0 * m.mmd,
        bandwidth: m.bandwidth,
        n: real.n,
        m: gen.n,
        extractor_fingerprint: fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_examples() {
        let fs = FeatureSet::from_rows(&[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap();
        let s = gaussian_stats(&fs).unwrap();
        assert_eq!(s.mean.as_slice(), &[1.0, 1.0]);
        assert_eq!(s.cov, DMatrix::from_row_slice(2, 2, &[2.0, 2.0, 2.0, 2.0]));
        let same = FeatureSet::from_rows(&[vec![1.0, 3.0], vec![1.0, 3.0], vec![1.0, 3.0]]).unwrap();
        assert_eq!(gaussian_stats(&same).unwrap().cov, DMatrix::zeros(2, 2));
        let one = FeatureSet::from_rows(&[vec![1.0]]).unwrap();
        assert!(matches!(gaussian_stats(&one), Err(Error::Precondition(_))));
    }

    #[test]
    fn sqrtm_examples() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert!((sqrtm_psd(&i).unwrap() - &i).amax() < 1e-15);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let r = sqrtm_psd(&d).unwrap();
        assert!((r - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))).amax() < 1e-14);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(sqrtm_psd(&asym), Err(Error::Numeric(_))));
        let neg = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(sqrtm_psd(&neg).is_err());
        let nan = DMatrix::from_element(1, 1, f64::NAN);
        assert!(sqrtm_psd(&nan).is_err());
    }

    #[test]
    fn fid_point_sets() {
        let fs = FeatureSet::from_rows(&[vec![0.0], vec![1.0], vec![-1.0]]).unwrap();
        assert!(fid(&fs, &fs).unwrap() <= 1e-12);
        let d = 3.0;
        let shifted = FeatureSet::from_rows(&[vec![d], vec![1.0 + d], vec![-1.0 + d]]).unwrap();
        assert!((fid(&fs, &shifted).unwrap() - d * d).abs() < 1e-9);
        let two = FeatureSet::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(fid(&fs, &two).is_err());
    }

    #[test]
    fn mmd_examples() {
        let same = FeatureSet::from_rows(&[vec![0.5, 1.0], vec![0.5, 1.0]]).unwrap();
        assert_eq!(mmd(&same, &same, Bandwidth::Fixed(1.0)).unwrap(), 0.0);
        // all distances zero: the auto bandwidth falls back to 1
        assert_eq!(mmd_report(&same, &same, Bandwidth::Auto).unwrap().bandwidth, 1.0);
        assert!(mmd(&same, &same, Bandwidth::Fixed(0.0)).is_err());
        let one = FeatureSet::from_rows(&[vec![0.5, 1.0]]).unwrap();
        assert!(mmd(&one, &same, Bandwidth::Auto).is_err());
    }

    #[test]
    fn bandwidth_is_pooled_median() {
        let a = FeatureSet::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let b = FeatureSet::from_rows(&[vec![3.0], vec![7.0]]).unwrap();
        // distances 1, 3, 7, 2, 6, 4 -> median (3 + 4) / 2
        assert_eq!(median_bandwidth(&a, &b), 3.5);
    }
}
