//! Procedural data and the deterministic preference oracle.
//!
//! Each prompt describes a colored Gaussian blob at a grid position with a
//! high-frequency checkerboard texture inside it: the blob placement and hue
//! act as the "composition/pose" the alignment term can see, the texture as
//! the fine detail the sharpness term rewards. The oracle scores an image
//! against its prompt as alignment + quality + sharpness, with fixed weights
//! (1.0, 0.5, 1.0, 0.3) for (centroid, hue, lowpass, sharpness) terms.

use serde::{Deserialize, Serialize};

use crate::error::{HgError, Result};
use crate::imageops::{hsv_to_rgb, laplacian_std, lowpass, rgb_to_hsv, to_unit};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const W_ALIGN: f64 = 1.0;
pub const W_HUE: f64 = 0.5;
pub const W_QUALITY: f64 = 1.0;
pub const W_SHARP: f64 = 0.3;

/// Blob mask threshold for the hue region and texture extent.
const MASK_THRESHOLD: f64 = 0.1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub prompts: usize,
    pub reals_per_prompt: usize,
    pub eval_reals_per_prompt: usize,
    pub blob_sigma: f64,
    pub checker_amp: f64,
    pub noise_amp: f64,
    /// Pilot generations used to set the quality floor.
    pub pilot_count: usize,
    /// Percentile (0-100) of pilot scores used as the floor.
    pub floor_percentile: f64,
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompts == 0 {
            return Err(HgError::validation("world.prompts must be positive"));
        }
        if self.reals_per_prompt == 0 || self.eval_reals_per_prompt == 0 {
            return Err(HgError::validation(
                "world real-image counts must be positive",
            ));
        }
        if self.blob_sigma <= 0.0 {
            return Err(HgError::validation("world.blob_sigma must be positive"));
        }
        if !(0.0..=100.0).contains(&self.floor_percentile) {
            return Err(HgError::validation(
                "world.floor_percentile must be in [0, 100]",
            ));
        }
        if self.pilot_count == 0 {
            return Err(HgError::validation("world.pilot_count must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptSpec {
    pub id: u32,
    /// Blob center in (col, row) pixel coordinates.
    pub center: (f64, f64),
    /// Target hue in radians [0, 2pi).
    pub hue: f64,
    /// Checker cell size in pixels; smaller is higher frequency.
    pub tex_freq: u32,
}

#[derive(Clone, Debug)]
pub struct RealImage {
    pub pixels: Tensor,
    pub prompt_id: u32,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleScore {
    pub total: f64,
    pub alignment: f64,
    pub quality: f64,
    pub sharpness: f64,
}

/// Distinct (center, hue) per prompt id: centers cycle a 3x3 grid, hue is
/// unique per id, texture alternates between 1- and 2-pixel checker cells.
pub fn make_prompts(count: usize, height: usize, width: usize) -> Vec<PromptSpec> {
    const FRACS: [f64; 3] = [0.3, 0.5, 0.7];
    (0..count)
        .map(|i| {
            let cx = FRACS[i % 3] * (width - 1) as f64;
            let cy = FRACS[(i / 3) % 3] * (height - 1) as f64;
            PromptSpec {
                id: i as u32,
                center: (cx, cy),
                hue: 2.0 * std::f64::consts::PI * i as f64 / count as f64,
                tex_freq: 1 + (i % 2) as u32,
            }
        })
        .collect()
}

fn blob_mask(spec: &PromptSpec, sigma: f64, y: usize, x: usize) -> f64 {
    let dx = x as f64 - spec.center.0;
    let dy = y as f64 - spec.center.1;
    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
}

fn checker(spec: &PromptSpec, y: usize, x: usize) -> f64 {
    let k = spec.tex_freq as usize;
    if (x / k + y / k) % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

fn render(
    spec: &PromptSpec,
    cfg: &WorldConfig,
    channels: usize,
    height: usize,
    width: usize,
    textured: bool,
    rng: Option<&mut RngStream>,
) -> Tensor {
    debug_assert_eq!(channels, 3, "hue rendering assumes RGB");
    let color = hsv_to_rgb(spec.hue.to_degrees(), 1.0, 1.0);
    let color = [color.0, color.1, color.2];
    let block = height * width;
    let mut data = vec![0.0; channels * block];
    for y in 0..height {
        for x in 0..width {
            let m = blob_mask(spec, cfg.blob_sigma, y, x);
            // multiplicative texture keeps the hue inside the blob exact
            let tex = if textured && m >= MASK_THRESHOLD {
                1.0 + cfg.checker_amp * checker(spec, y, x)
            } else {
                1.0
            };
            for ch in 0..channels {
                let unit = (m * color[ch] * tex).clamp(0.0, 1.0);
                data[ch * block + y * width + x] = 2.0 * unit - 1.0;
            }
        }
    }
    if let Some(rng) = rng {
        for v in &mut data {
            *v = (*v + rng.uniform_range(-cfg.noise_amp, cfg.noise_amp)).clamp(-1.0, 1.0);
        }
    }
    Tensor::new(vec![channels, height, width], data).expect("shape by construction")
}

/// One textured sample image for a prompt (no quality floor applied).
pub fn gen_real(
    spec: &PromptSpec,
    cfg: &WorldConfig,
    channels: usize,
    height: usize,
    width: usize,
    rng: &mut RngStream,
) -> RealImage {
    let seed = rng.seed();
    let pixels = render(spec, cfg, channels, height, width, true, Some(rng));
    RealImage {
        pixels,
        prompt_id: spec.id,
        seed,
    }
}

/// Clean reference render (no texture, no noise); its lowpass is the
/// "ideal" low-frequency content the quality term compares against.
pub fn render_ideal(
    spec: &PromptSpec,
    cfg: &WorldConfig,
    channels: usize,
    height: usize,
    width: usize,
) -> Tensor {
    render(spec, cfg, channels, height, width, false, None)
}

fn circular_distance(a: f64, b: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let d = (a - b).rem_euclid(two_pi);
    d.min(two_pi - d)
}

/// Deterministic preference score of an image for a prompt.
pub fn oracle_score(x: &Tensor, spec: &PromptSpec, cfg: &WorldConfig) -> Result<OracleScore> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(HgError::validation(format!(
            "oracle_score expects [C,H,W], got {:?}",
            shape
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let block = h * w;

    // centroid of unit-intensity
    let mut total_i = 0.0;
    let mut sx = 0.0;
    let mut sy = 0.0;
    for y in 0..h {
        for x_ in 0..w {
            let mut inten = 0.0;
            for ch in 0..c {
                inten += to_unit(x.data()[ch * block + y * w + x_]);
            }
            inten /= c as f64;
            total_i += inten;
            sx += inten * x_ as f64;
            sy += inten * y as f64;
        }
    }
    let centroid = if total_i > 1e-12 {
        (sx / total_i, sy / total_i)
    } else {
        ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
    };
    let dx = centroid.0 - spec.center.0;
    let dy = centroid.1 - spec.center.1;
    let centroid_dist = (dx * dx + dy * dy).sqrt();

    // circular-mean hue over the prompt's blob region, saturated pixels only
    let mut sin_acc = 0.0;
    let mut cos_acc = 0.0;
    let mut kept = 0usize;
    for y in 0..h {
        for x_ in 0..w {
            if blob_mask(spec, cfg.blob_sigma, y, x_) < MASK_THRESHOLD {
                continue;
            }
            let r = to_unit(x.data()[y * w + x_]);
            let g = to_unit(x.data()[block + y * w + x_]);
            let b = to_unit(x.data()[2 * block + y * w + x_]);
            let (hue_deg, sat, _) = rgb_to_hsv(r, g, b);
            if sat < 1e-3 {
                continue;
            }
            let hue = hue_deg.to_radians();
            sin_acc += hue.sin();
            cos_acc += hue.cos();
            kept += 1;
        }
    }
    let hue_dist = if kept == 0 || (sin_acc * sin_acc + cos_acc * cos_acc).sqrt() < 1e-12 {
        std::f64::consts::PI
    } else {
        circular_distance(
            sin_acc.atan2(cos_acc).rem_euclid(2.0 * std::f64::consts::PI),
            spec.hue,
        )
    };

    let alignment = -W_ALIGN * centroid_dist - W_HUE * hue_dist;

    let ideal = render_ideal(spec, cfg, c, h, w);
    let quality = -W_QUALITY * lowpass(x).l2_distance(&lowpass(&ideal))?;

    let sharpness = W_SHARP * laplacian_std(x);

    Ok(OracleScore {
        total: alignment + quality + sharpness,
        alignment,
        quality,
        sharpness,
    })
}

/// The full procedural dataset: prompts, training reals, evaluation reals,
/// and the pilot-derived quality floors every accepted real image meets.
///
/// Floors are per prompt: absolute score levels differ across prompts
/// (texture frequency and hue move the sharpness/quality baselines), so a
/// pooled floor would be unreachable for the weakest prompts.
#[derive(Clone, Debug)]
pub struct World {
    pub cfg: WorldConfig,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub prompts: Vec<PromptSpec>,
    pub reals: Vec<RealImage>,
    pub eval_reals: Vec<RealImage>,
    /// Pilot-percentile score floor, indexed by prompt id.
    pub quality_floors: Vec<f64>,
}

impl World {
    pub fn score(&self, x: &Tensor, prompt_id: u32) -> Result<OracleScore> {
        let spec = self
            .prompts
            .get(prompt_id as usize)
            .ok_or_else(|| HgError::validation(format!("unknown prompt id {prompt_id}")))?;
        oracle_score(x, spec, &self.cfg)
    }

    pub fn real_for_prompt(&self, prompt_id: u32) -> Result<&RealImage> {
        self.reals
            .iter()
            .find(|r| r.prompt_id == prompt_id)
            .ok_or_else(|| HgError::validation(format!("no real image for prompt {prompt_id}")))
    }
}

/// Nearest-rank percentile of an unsorted slice.
fn percentile(mut xs: Vec<f64>, pct: f64) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let rank = ((pct / 100.0) * (xs.len() as f64 - 1.0)).round() as usize;
    xs[rank.min(xs.len() - 1)]
}

pub fn build_world(
    cfg: &WorldConfig,
    channels: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<World> {
    cfg.validate()?;
    let prompts = make_prompts(cfg.prompts, height, width);

    // per-prompt quality floors from pilot generations cycled over prompts
    let pilot_rng = RngStream::new(seed).derive(0x9a11);
    let mut pilot_scores: Vec<Vec<f64>> = vec![Vec::new(); prompts.len()];
    for i in 0..cfg.pilot_count.max(prompts.len()) {
        let spec = &prompts[i % prompts.len()];
        let mut rng = pilot_rng.derive(i as u64);
        let img = gen_real(spec, cfg, channels, height, width, &mut rng);
        pilot_scores[spec.id as usize].push(oracle_score(&img.pixels, spec, cfg)?.total);
    }
    let quality_floors: Vec<f64> = pilot_scores
        .into_iter()
        .map(|scores| percentile(scores, cfg.floor_percentile))
        .collect();

    let gen_floored = |spec: &PromptSpec, base: RngStream| -> Result<RealImage> {
        let floor = quality_floors[spec.id as usize];
        let mut best: Option<(f64, RealImage)> = None;
        for attempt in 0..100u64 {
            let mut rng = base.derive(attempt);
            let img = gen_real(spec, cfg, channels, height, width, &mut rng);
            let s = oracle_score(&img.pixels, spec, cfg)?.total;
            if s >= floor {
                return Ok(img);
            }
            if best.as_ref().map(|(bs, _)| s > *bs).unwrap_or(true) {
                best = Some((s, img));
            }
        }
        // a fixed-percentile floor is beaten by a fresh draw with
        // probability ~(1 - pct/100); 100 misses in a row cannot happen
        // with this noise model, but avoid looping forever regardless
        Ok(best.expect("at least one attempt").1)
    };

    let train_rng = RngStream::new(seed).derive(0x7ea1);
    let mut reals = Vec::with_capacity(prompts.len() * cfg.reals_per_prompt);
    for spec in &prompts {
        for j in 0..cfg.reals_per_prompt {
            let base = train_rng.derive(((spec.id as u64) << 16) | j as u64);
            reals.push(gen_floored(spec, base)?);
        }
    }
    let eval_rng = RngStream::new(seed).derive(0xe7a1);
    let mut eval_reals = Vec::with_capacity(prompts.len() * cfg.eval_reals_per_prompt);
    for spec in &prompts {
        for j in 0..cfg.eval_reals_per_prompt {
            let base = eval_rng.derive(((spec.id as u64) << 16) | j as u64);
            eval_reals.push(gen_floored(spec, base)?);
        }
    }

    Ok(World {
        cfg: cfg.clone(),
        channels,
        height,
        width,
        prompts,
        reals,
        eval_reals,
        quality_floors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageops::box_blur3;

    fn test_cfg() -> WorldConfig {
        WorldConfig {
            prompts: 8,
            reals_per_prompt: 1,
            eval_reals_per_prompt: 1,
            blob_sigma: 2.5,
            checker_amp: 0.15,
            noise_amp: 0.02,
            pilot_count: 100,
            floor_percentile: 25.0,
        }
    }

    fn spec(i: usize) -> PromptSpec {
        make_prompts(8, 16, 16)[i].clone()
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = test_cfg();
        let s = spec(2);
        let a = gen_real(&s, &cfg, 3, 16, 16, &mut RngStream::new(5));
        let b = gen_real(&s, &cfg, 3, 16, 16, &mut RngStream::new(5));
        assert_eq!(a.pixels, b.pixels);
    }

    #[test]
    fn prompts_have_distinct_center_hue_pairs() {
        let prompts = make_prompts(32, 16, 16);
        for i in 0..prompts.len() {
            for j in 0..i {
                assert!(
                    prompts[i].center != prompts[j].center || prompts[i].hue != prompts[j].hue
                );
            }
        }
    }

    #[test]
    fn rendered_centroid_is_near_prompt_center() {
        let cfg = test_cfg();
        for i in 0..8 {
            let s = spec(i);
            let img = gen_real(&s, &cfg, 3, 16, 16, &mut RngStream::new(i as u64));
            let shape = img.pixels.shape().to_vec();
            let (h, w, block) = (shape[1], shape[2], shape[1] * shape[2]);
            let mut total = 0.0;
            let mut sx = 0.0;
            let mut sy = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let mut inten = 0.0;
                    for ch in 0..3 {
                        inten += to_unit(img.pixels.data()[ch * block + y * w + x]);
                    }
                    total += inten;
                    sx += inten * x as f64;
                    sy += inten * y as f64;
                }
            }
            let (cx, cy) = (sx / total, sy / total);
            let dist = ((cx - s.center.0).powi(2) + (cy - s.center.1).powi(2)).sqrt();
            assert!(dist < 1.0, "prompt {i}: centroid off by {dist}");
        }
    }

    #[test]
    fn self_alignment_is_near_perfect() {
        let cfg = test_cfg();
        let s = spec(4);
        let img = gen_real(&s, &cfg, 3, 16, 16, &mut RngStream::new(9));
        let sc = oracle_score(&img.pixels, &s, &cfg).unwrap();
        assert!(sc.alignment >= -0.1, "alignment {}", sc.alignment);
        assert_eq!(sc.total, sc.alignment + sc.quality + sc.sharpness);
    }

    #[test]
    fn fresh_real_beats_blurred_copy() {
        let cfg = test_cfg();
        for i in 0..100 {
            let s = spec(i % 8);
            let img = gen_real(&s, &cfg, 3, 16, 16, &mut RngStream::new(1000 + i as u64));
            let blurred = box_blur3(&img.pixels);
            let orig = oracle_score(&img.pixels, &s, &cfg).unwrap().total;
            let blur = oracle_score(&blurred, &s, &cfg).unwrap().total;
            assert!(orig > blur, "trial {i}: {orig} vs {blur}");
        }
    }

    #[test]
    fn shifted_image_scores_lower_alignment() {
        let cfg = test_cfg();
        let s = spec(4); // center prompt so a 4px roll keeps the blob in frame
        let img = gen_real(&s, &cfg, 3, 16, 16, &mut RngStream::new(2));
        let block = 256;
        let mut rolled = vec![0.0; 3 * block];
        for ch in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    rolled[ch * block + y * 16 + (x + 4) % 16] =
                        img.pixels.data()[ch * block + y * 16 + x];
                }
            }
        }
        let rolled = Tensor::new(vec![3, 16, 16], rolled).unwrap();
        let a = oracle_score(&img.pixels, &s, &cfg).unwrap().alignment;
        let b = oracle_score(&rolled, &s, &cfg).unwrap().alignment;
        assert!(b < a, "{b} vs {a}");
    }

    #[test]
    fn uniform_gray_has_zero_sharpness() {
        let cfg = test_cfg();
        let s = spec(0);
        let img = Tensor::full(vec![3, 16, 16], 0.25);
        let sc = oracle_score(&img, &s, &cfg).unwrap();
        assert_eq!(sc.sharpness, 0.0);
    }

    #[test]
    fn corruptions_lose_to_originals() {
        let cfg = test_cfg();
        let mut wins = 0;
        let trials = 1000;
        for i in 0..trials {
            let s = spec(i % 8);
            let mut rng = RngStream::new(31 + i as u64);
            let img = gen_real(&s, &cfg, 3, 16, 16, &mut rng);
            let corrupted = if i % 2 == 0 {
                box_blur3(&img.pixels)
            } else {
                box_blur3(&img.pixels.scale(0.8))
            };
            let orig = oracle_score(&img.pixels, &s, &cfg).unwrap().total;
            let corr = oracle_score(&corrupted, &s, &cfg).unwrap().total;
            if orig > corr {
                wins += 1;
            }
        }
        assert!(wins as f64 / trials as f64 >= 0.99, "wins {wins}/{trials}");
    }

    #[test]
    fn score_is_stable_under_femto_noise() {
        let cfg = test_cfg();
        let s = spec(3);
        let img = gen_real(&s, &cfg, 3, 16, 16, &mut RngStream::new(8));
        let mut rng = RngStream::new(9);
        let jittered = img.pixels.map(|v| v + 1e-9 * (rng.uniform() - 0.5) * 2.0);
        let a = oracle_score(&img.pixels, &s, &cfg).unwrap().total;
        let b = oracle_score(&jittered, &s, &cfg).unwrap().total;
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn world_reals_meet_quality_floor() {
        let cfg = test_cfg();
        let world = build_world(&cfg, 3, 16, 16, 77).unwrap();
        assert_eq!(world.reals.len(), 8);
        assert_eq!(world.eval_reals.len(), 8);
        for r in &world.reals {
            let s = world.score(&r.pixels, r.prompt_id).unwrap();
            assert!(s.total >= world.quality_floors[r.prompt_id as usize]);
        }
        let again = build_world(&cfg, 3, 16, 16, 77).unwrap();
        assert_eq!(world.quality_floors, again.quality_floors);
        assert_eq!(world.reals[3].pixels, again.reals[3].pixels);
    }
}
