//! Evaluation metrics: circular hue statistics, a Fréchet distance over a
//! fixed random orthonormal projection of pixels (labeled toy-FID: it keeps
//! the Fréchet computation but none of the pretrained features, so values
//! are not comparable to published FID numbers), Laplacian sharpness, win
//! rates, and the per-stage report bundle.

use serde::{Deserialize, Serialize};

use crate::error::{HgError, Result};
use crate::imageops::{laplacian_std, rgb_to_hsv, to_unit};
use crate::rng::RngStream;
use crate::sampler::{sample_batch, InferenceModel, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::world::World;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StageReport {
    pub stage: String,
    pub n_samples: usize,
    pub seed: u64,
    pub mean_oracle_score: f64,
    pub mean_alignment: f64,
    pub toy_fid: f64,
    pub sharpness: f64,
    /// Degrees in [0, 180]; absent for the base model itself.
    pub hue_distance_vs_base: Option<f64>,
    /// Fraction in [0, 1]; absent for the base model itself.
    pub win_rate_vs_base: Option<f64>,
}

impl StageReport {
    pub fn validate(&self) -> Result<()> {
        let finite = self.mean_oracle_score.is_finite()
            && self.mean_alignment.is_finite()
            && self.toy_fid.is_finite()
            && self.sharpness.is_finite();
        if !finite {
            return Err(HgError::numeric(format!(
                "non-finite metric in stage report {}",
                self.stage
            )));
        }
        if self.toy_fid < 0.0 {
            return Err(HgError::numeric("toy_fid must be >= 0"));
        }
        if let Some(h) = self.hue_distance_vs_base {
            if !(0.0..=180.0).contains(&h) {
                return Err(HgError::numeric("hue distance outside [0, 180]"));
            }
        }
        if let Some(w) = self.win_rate_vs_base {
            if !(0.0..=1.0).contains(&w) {
                return Err(HgError::numeric("win rate outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Circular mean of hue over every retained pixel of every image, in
/// degrees [0, 360). Pixels are mapped to [0,1] RGB first; pixels with
/// saturation < 1e-3 carry no hue and are excluded. Errors when nothing is
/// retained or the mean resultant length is below 1e-9 (antipodal mass).
pub fn hue_circular_mean(images: &[Tensor]) -> Result<f64> {
    if images.is_empty() {
        return Err(HgError::validation("hue_circular_mean: no images"));
    }
    let mut sin_acc = 0.0;
    let mut cos_acc = 0.0;
    let mut kept = 0u64;
    for img in images {
        let shape = img.shape();
        let block = shape[1] * shape[2];
        for i in 0..block {
            let r = to_unit(img.data()[i]);
            let g = to_unit(img.data()[block + i]);
            let b = to_unit(img.data()[2 * block + i]);
            let (h, s, _) = rgb_to_hsv(r, g, b);
            if s < 1e-3 {
                continue;
            }
            let h = h.to_radians();
            sin_acc += h.sin();
            cos_acc += h.cos();
            kept += 1;
        }
    }
    if kept == 0 {
        return Err(HgError::numeric(
            "hue_circular_mean: every pixel excluded (all achromatic)",
        ));
    }
    let resultant = (sin_acc * sin_acc + cos_acc * cos_acc).sqrt() / kept as f64;
    if resultant < 1e-9 {
        return Err(HgError::numeric(
            "hue_circular_mean: resultant vanishes (antipodal hue mass)",
        ));
    }
    let deg = sin_acc.atan2(cos_acc).to_degrees().rem_euclid(360.0);
    Ok(deg)
}

/// Wrapped distance between the circular hue means of two sets, degrees in
/// [0, 180].
pub fn hue_distance(model_images: &[Tensor], base_images: &[Tensor]) -> Result<f64> {
    let a = hue_circular_mean(model_images)?;
    let b = hue_circular_mean(base_images)?;
    let d = (a - b).abs();
    Ok(d.min(360.0 - d))
}

/// Population std of the 3x3 Laplacian response, averaged over images.
pub fn laplacian_sharpness(images: &[Tensor]) -> f64 {
    if images.is_empty() {
        return 0.0;
    }
    images.iter().map(laplacian_std).sum::<f64>() / images.len() as f64
}

/// Fraction of pairs where a's oracle score beats b's; ties count 0.5.
/// Items are paired index-wise (same prompt and seed).
pub fn win_rate(world: &World, a: &[Tensor], b: &[Tensor], prompts: &[u32]) -> Result<f64> {
    if a.len() != b.len() || a.len() != prompts.len() || a.is_empty() {
        return Err(HgError::validation(format!(
            "win_rate: length mismatch ({}, {}, {})",
            a.len(),
            b.len(),
            prompts.len()
        )));
    }
    let mut half_points = 0u64;
    for ((ia, ib), &p) in a.iter().zip(b).zip(prompts) {
        let sa = world.score(ia, p)?.total;
        let sb = world.score(ib, p)?.total;
        half_points += match sa.partial_cmp(&sb) {
            Some(std::cmp::Ordering::Greater) => 2,
            Some(std::cmp::Ordering::Equal) => 1,
            Some(std::cmp::Ordering::Less) => 0,
            None => return Err(HgError::numeric("win_rate: NaN score")),
        };
    }
    Ok(half_points as f64 / (2 * a.len()) as f64)
}

// ---------------------------------------------------------------------------
// Fréchet distance machinery
// ---------------------------------------------------------------------------

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (flat row-major
/// k x k). Returns (eigenvalues, eigenvectors as columns).
fn jacobi_eigen(mat: &[f64], k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = mat.to_vec();
    let mut v = vec![0.0; k * k];
    for i in 0..k {
        v[i * k + i] = 1.0;
    }
    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for p in 0..k {
            for q in 0..k {
                if p != q {
                    s += a[p * k + q] * a[p * k + q];
                }
            }
        }
        s
    };
    let norm: f64 = mat.iter().map(|x| x * x).sum::<f64>().max(1e-300);
    for _sweep in 0..100 {
        if off(&a) <= 1e-24 * norm {
            break;
        }
        for p in 0..k {
            for q in (p + 1)..k {
                let apq = a[p * k + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * k + p];
                let aqq = a[q * k + q];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for i in 0..k {
                    let aip = a[i * k + p];
                    let aiq = a[i * k + q];
                    a[i * k + p] = c * aip - s * aiq;
                    a[i * k + q] = s * aip + c * aiq;
                }
                for j in 0..k {
                    let apj = a[p * k + j];
                    let aqj = a[q * k + j];
                    a[p * k + j] = c * apj - s * aqj;
                    a[q * k + j] = s * apj + c * aqj;
                }
                for i in 0..k {
                    let vip = v[i * k + p];
                    let viq = v[i * k + q];
                    v[i * k + p] = c * vip - s * viq;
                    v[i * k + q] = s * vip + c * viq;
                }
            }
        }
    }
    let eig = (0..k).map(|i| a[i * k + i]).collect();
    (eig, v)
}

fn symmetrize(mat: &mut [f64], k: usize) {
    for p in 0..k {
        for q in (p + 1)..k {
            let m = 0.5 * (mat[p * k + q] + mat[q * k + p]);
            mat[p * k + q] = m;
            mat[q * k + p] = m;
        }
    }
}

/// Symmetric PSD square root via eigendecomposition, eigenvalues clamped
/// at zero.
fn sqrtm_psd(mat: &[f64], k: usize) -> Vec<f64> {
    let mut m = mat.to_vec();
    symmetrize(&mut m, k);
    let (eig, v) = jacobi_eigen(&m, k);
    let roots: Vec<f64> = eig.iter().map(|&l| l.max(0.0).sqrt()).collect();
    // V diag(sqrt) V^T
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let mut acc = 0.0;
            for r in 0..k {
                acc += v[i * k + r] * roots[r] * v[j * k + r];
            }
            out[i * k + j] = acc;
        }
    }
    out
}

fn matmul_flat(a: &[f64], b: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let mut acc = 0.0;
            for r in 0..k {
                acc += a[i * k + r] * b[r * k + j];
            }
            out[i * k + j] = acc;
        }
    }
    out
}

/// Squared Fréchet distance between two Gaussians:
/// ||mu1-mu2||^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2), clamped at 0.
pub fn frechet_gaussians(mu1: &[f64], cov1: &[f64], mu2: &[f64], cov2: &[f64]) -> Result<f64> {
    let k = mu1.len();
    if mu2.len() != k || cov1.len() != k * k || cov2.len() != k * k {
        return Err(HgError::validation("frechet_gaussians: dimension mismatch"));
    }
    let mean_sq: f64 = mu1
        .iter()
        .zip(mu2)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let s1h = sqrtm_psd(cov1, k);
    let inner = matmul_flat(&matmul_flat(&s1h, cov2, k), &s1h, k);
    let cross = sqrtm_psd(&inner, k);
    let tr = |m: &[f64]| (0..k).map(|i| m[i * k + i]).sum::<f64>();
    let d2 = mean_sq + tr(cov1) + tr(cov2) - 2.0 * tr(&cross);
    Ok(d2.max(0.0))
}

/// Random orthonormal projection [d, k] from a seeded stream
/// (Gram-Schmidt on Gaussian columns).
fn orthonormal_projection(d: usize, k: usize, seed: u64) -> Vec<f64> {
    let mut rng = RngStream::new(seed).derive(0xf1d);
    let mut cols: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| rng.normal()).collect())
        .collect();
    for j in 0..k {
        for i in 0..j {
            let dot: f64 = cols[j].iter().zip(&cols[i]).map(|(a, b)| a * b).sum();
            let prev = cols[i].clone();
            for (vj, vi) in cols[j].iter_mut().zip(&prev) {
                *vj -= dot * vi;
            }
        }
        let norm: f64 = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        for vj in cols[j].iter_mut() {
            *vj /= norm;
        }
    }
    // column-major assembly into row-major [d, k]
    let mut out = vec![0.0; d * k];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..d {
            out[i * k + j] = col[i];
        }
    }
    out
}

fn sample_stats(feats: &[f64], n: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mu = vec![0.0; k];
    for r in 0..n {
        for j in 0..k {
            mu[j] += feats[r * k + j];
        }
    }
    for m in mu.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; k * k];
    for r in 0..n {
        for i in 0..k {
            let di = feats[r * k + i] - mu[i];
            for j in 0..k {
                cov[i * k + j] += di * (feats[r * k + j] - mu[j]);
            }
        }
    }
    for c in cov.iter_mut() {
        *c /= (n - 1) as f64;
    }
    (mu, cov)
}

/// Fréchet distance (squared) between two image sets after projecting
/// flattened pixels through a fixed seeded orthonormal map to `proj_dim`
/// features. Sample covariance uses n-1, hence |set| >= proj_dim + 1.
pub fn toy_fid(set_a: &[Tensor], set_b: &[Tensor], proj_dim: usize, proj_seed: u64) -> Result<f64> {
    if set_a.len() < proj_dim + 1 || set_b.len() < proj_dim + 1 {
        return Err(HgError::validation(format!(
            "toy_fid: need at least {} images per set, got {} and {}",
            proj_dim + 1,
            set_a.len(),
            set_b.len()
        )));
    }
    let d = set_a[0].numel();
    let q = orthonormal_projection(d, proj_dim, proj_seed);
    let project = |set: &[Tensor]| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(set.len() * proj_dim);
        for img in set {
            if img.numel() != d {
                return Err(HgError::ShapeMismatch {
                    op: "toy_fid",
                    lhs: set_a[0].shape().to_vec(),
                    rhs: img.shape().to_vec(),
                });
            }
            for j in 0..proj_dim {
                let mut acc = 0.0;
                for i in 0..d {
                    acc += img.data()[i] * q[i * proj_dim + j];
                }
                out.push(acc);
            }
        }
        Ok(out)
    };
    let fa = project(set_a)?;
    let fb = project(set_b)?;
    let (mu_a, cov_a) = sample_stats(&fa, set_a.len(), proj_dim);
    let (mu_b, cov_b) = sample_stats(&fb, set_b.len(), proj_dim);
    frechet_gaussians(&mu_a, &cov_a, &mu_b, &cov_b)
}

/// Everything evaluate_stage needs besides the model under test.
pub struct EvalContext<'a> {
    pub world: &'a World,
    pub sched: &'a NoiseSchedule,
    pub sampler: &'a SamplerConfig,
    pub n_samples: usize,
    pub seed: u64,
    pub fid_proj_dim: usize,
    pub fid_proj_seed: u64,
}

impl EvalContext<'_> {
    pub fn prompt_ids(&self) -> Vec<u32> {
        (0..self.n_samples)
            .map(|i| (i % self.world.prompts.len()) as u32)
            .collect()
    }

    /// The evaluation sample set for a model: one image per (prompt, seed)
    /// slot, identical slots across models for pairwise metrics.
    pub fn draw_samples(&self, model: &InferenceModel) -> Result<Vec<Tensor>> {
        let ids = self.prompt_ids();
        let prompts: Vec<Option<u32>> = ids.iter().map(|&p| Some(p)).collect();
        let mut rngs: Vec<RngStream> = (0..self.n_samples)
            .map(|i| RngStream::new(self.seed).derive(0x5a4d71e5 ^ i as u64))
            .collect();
        sample_batch(model, &prompts, &mut rngs, self.sampler, self.sched)
    }
}

/// Sample the model and score it against the world, the eval real set, and
/// (when given) the cached base-model samples.
pub fn evaluate_stage(
    stage: &str,
    model: &InferenceModel,
    ctx: &EvalContext<'_>,
    base_samples: Option<&[Tensor]>,
) -> Result<(StageReport, Vec<Tensor>)> {
    let samples = ctx.draw_samples(model)?;
    let ids = ctx.prompt_ids();
    let mut score_acc = 0.0;
    let mut align_acc = 0.0;
    for (img, &p) in samples.iter().zip(&ids) {
        let s = ctx.world.score(img, p)?;
        score_acc += s.total;
        align_acc += s.alignment;
    }
    let n = samples.len() as f64;
    let real_eval: Vec<Tensor> = ctx
        .world
        .eval_reals
        .iter()
        .map(|r| r.pixels.clone())
        .collect();
    let fid = toy_fid(&samples, &real_eval, ctx.fid_proj_dim, ctx.fid_proj_seed)?;
    let (hue, wins) = match base_samples {
        Some(base) => {
            if base.len() != samples.len() {
                return Err(HgError::validation(
                    "evaluate_stage: base sample cache size mismatch",
                ));
            }
            (
                Some(hue_distance(&samples, base)?),
                Some(win_rate(ctx.world, &samples, base, &ids)?),
            )
        }
        None => (None, None),
    };
    let report = StageReport {
        stage: stage.to_string(),
        n_samples: samples.len(),
        seed: ctx.seed,
        mean_oracle_score: score_acc / n,
        mean_alignment: align_acc / n,
        toy_fid: fid,
        sharpness: laplacian_sharpness(&samples),
        hue_distance_vs_base: hue,
        win_rate_vs_base: wins,
    };
    report.validate()?;
    Ok((report, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageops::hsv_to_rgb;

    fn solid_hue_image(h_deg: f64) -> Tensor {
        let (r, g, b) = hsv_to_rgb(h_deg, 1.0, 1.0);
        let mut data = vec![2.0 * r - 1.0; 16];
        data.extend(vec![2.0 * g - 1.0; 16]);
        data.extend(vec![2.0 * b - 1.0; 16]);
        Tensor::new(vec![3, 4, 4], data).unwrap()
    }

    #[test]
    fn all_red_has_zero_mean_hue() {
        let imgs = vec![solid_hue_image(0.0), solid_hue_image(0.0)];
        assert!(hue_circular_mean(&imgs).unwrap().abs() < 1e-9);
    }

    #[test]
    fn antipodal_hues_are_degenerate() {
        let imgs = vec![solid_hue_image(90.0), solid_hue_image(270.0)];
        assert!(hue_circular_mean(&imgs).is_err());
    }

    #[test]
    fn achromatic_images_error() {
        let gray = Tensor::full(vec![3, 4, 4], 0.0);
        assert!(hue_circular_mean(&[gray]).is_err());
    }

    fn rotate_hue(img: &Tensor, delta_deg: f64) -> Tensor {
        let shape = img.shape().to_vec();
        let block = shape[1] * shape[2];
        let mut data = img.data().to_vec();
        for i in 0..block {
            let r = to_unit(img.data()[i]);
            let g = to_unit(img.data()[block + i]);
            let b = to_unit(img.data()[2 * block + i]);
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h + delta_deg, s, v);
            data[i] = 2.0 * r2 - 1.0;
            data[block + i] = 2.0 * g2 - 1.0;
            data[2 * block + i] = 2.0 * b2 - 1.0;
        }
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn hue_rotation_equivariance() {
        let mut rng = RngStream::new(4);
        let imgs: Vec<Tensor> = (0..5)
            .map(|_| rng.normal_tensor(vec![3, 4, 4]).clamp(-0.9, 0.9))
            .collect();
        let before = hue_circular_mean(&imgs).unwrap();
        let rotated: Vec<Tensor> = imgs.iter().map(|i| rotate_hue(i, 40.0)).collect();
        let after = hue_circular_mean(&rotated).unwrap();
        let shift = (after - before).rem_euclid(360.0);
        assert!((shift - 40.0).abs() < 1e-9, "shift {shift}");
    }

    #[test]
    fn hue_distance_wraps() {
        let a = vec![solid_hue_image(350.0)];
        let b = vec![solid_hue_image(10.0)];
        let d = hue_distance(&a, &b).unwrap();
        assert!((d - 20.0).abs() < 1e-9);
        let same = hue_distance(&a, &a).unwrap();
        assert!(same.abs() < 1e-12);
    }

    #[test]
    fn frechet_one_dimensional_case() {
        // N(0,1) vs N(3,4): 9 + (1 + 4 - 2*2) = 10
        let d2 = frechet_gaussians(&[0.0], &[1.0], &[3.0], &[4.0]).unwrap();
        assert!((d2 - 10.0).abs() < 1e-12, "{d2}");
    }

    #[test]
    fn frechet_matches_analytic_commuting_case() {
        // shared eigenbasis: tr term reduces to sum (sqrt(l1) - sqrt(l2))^2
        let theta: f64 = 0.6;
        let (c, s) = (theta.cos(), theta.sin());
        let rot = [c, -s, s, c];
        let compose = |d: [f64; 2]| {
            // R diag(d) R^T
            let mut m = [0.0; 4];
            for i in 0..2 {
                for j in 0..2 {
                    m[i * 2 + j] = rot[i * 2] * d[0] * rot[j * 2] + rot[i * 2 + 1] * d[1] * rot[j * 2 + 1];
                }
            }
            m
        };
        let cov1 = compose([2.0, 0.5]);
        let cov2 = compose([1.0, 3.0]);
        let mu1 = [1.0f64, -2.0];
        let mu2 = [0.0f64, 0.5];
        let analytic = (mu1[0] - mu2[0]).powi(2)
            + (mu1[1] - mu2[1]).powi(2)
            + (2.0f64.sqrt() - 1.0).powi(2)
            + (0.5f64.sqrt() - 3.0f64.sqrt()).powi(2);
        let d2 = frechet_gaussians(&mu1, &cov1, &mu2, &cov2).unwrap();
        assert!((d2 - analytic).abs() < 1e-6, "{d2} vs {analytic}");
    }

    #[test]
    fn toy_fid_identity_and_symmetry() {
        let mut rng = RngStream::new(7);
        let a: Vec<Tensor> = (0..6).map(|_| rng.normal_tensor(vec![3, 2, 2])).collect();
        let b: Vec<Tensor> = (0..6).map(|_| rng.normal_tensor(vec![3, 2, 2])).collect();
        let self_d = toy_fid(&a, &a, 4, 11).unwrap();
        assert!(self_d < 1e-8, "{self_d}");
        let ab = toy_fid(&a, &b, 4, 11).unwrap();
        let ba = toy_fid(&b, &a, 4, 11).unwrap();
        assert!((ab - ba).abs() < 1e-8);
        assert!(ab >= 0.0);
        // precondition: need proj_dim + 1 items
        assert!(toy_fid(&a[..4], &b, 4, 11).is_err());
    }

    #[test]
    fn projection_is_orthonormal() {
        let d = 48;
        let k = 8;
        let q = orthonormal_projection(d, k, 3);
        for i in 0..k {
            for j in 0..k {
                let dot: f64 = (0..d).map(|r| q[r * k + i] * q[r * k + j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10, "({i},{j}): {dot}");
            }
        }
    }

    #[test]
    fn sharpness_blur_ordering() {
        let mut rng = RngStream::new(9);
        let imgs: Vec<Tensor> = (0..100).map(|_| rng.normal_tensor(vec![3, 6, 6])).collect();
        let blurred: Vec<Tensor> = imgs.iter().map(crate::imageops::box_blur3).collect();
        assert!(laplacian_sharpness(&blurred) < laplacian_sharpness(&imgs));
        let flat = vec![Tensor::full(vec![3, 6, 6], -0.2)];
        assert_eq!(laplacian_sharpness(&flat), 0.0);
    }

    #[test]
    fn win_rate_identities() {
        let wcfg = crate::world::WorldConfig {
            prompts: 4,
            reals_per_prompt: 1,
            eval_reals_per_prompt: 1,
            blob_sigma: 2.5,
            checker_amp: 0.15,
            noise_amp: 0.02,
            pilot_count: 20,
            floor_percentile: 25.0,
        };
        let world = crate::world::build_world(&wcfg, 3, 16, 16, 5).unwrap();
        let imgs: Vec<Tensor> = world.reals.iter().map(|r| r.pixels.clone()).collect();
        let ids: Vec<u32> = world.reals.iter().map(|r| r.prompt_id).collect();
        assert_eq!(win_rate(&world, &imgs, &imgs, &ids).unwrap(), 0.5);
        // strictly dominated: blurred copies lose every pair
        let blurred: Vec<Tensor> = imgs.iter().map(crate::imageops::box_blur3).collect();
        assert_eq!(win_rate(&world, &imgs, &blurred, &ids).unwrap(), 1.0);
        let wr = win_rate(&world, &blurred, &imgs, &ids).unwrap();
        assert_eq!(
            win_rate(&world, &imgs, &blurred, &ids).unwrap() + wr,
            1.0,
            "complement must hold"
        );
        assert!(win_rate(&world, &imgs[..2], &blurred, &ids).is_err());
    }
}
