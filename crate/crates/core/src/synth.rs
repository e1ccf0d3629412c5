//! Procedural video clips of moving, occluding shapes with exact ground truth.
//!
//! Each clip is a pure function of its configuration and seed. An instance's
//! category is its shape (disk, rectangle, triangle) and its colour is drawn
//! from a small per-category palette.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::{load_tensor, save_tensor};
use crate::losses::GroundTruth;
use crate::tensor::{DType, Tensor};

pub const MASK_STRIDE: usize = 8;
const MAX_ATTEMPTS: usize = 200;

const PALETTE: [[[f64; 3]; 2]; 3] = [
    [[0.92, 0.22, 0.20], [0.95, 0.60, 0.12]],
    [[0.20, 0.80, 0.30], [0.12, 0.70, 0.72]],
    [[0.25, 0.35, 0.95], [0.72, 0.30, 0.90]],
];
const BACKGROUND: f64 = 0.15;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub size: usize,
    pub frames: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Number of shape categories in use (1 to 3).
    pub categories: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Upper bound on speed in pixels per frame.
    pub max_speed: f64,
    /// Amplitude of the static per-pixel texture.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 128,
            frames: 8,
            min_instances: 1,
            max_instances: 4,
            categories: 3,
            min_radius: 12.0,
            max_radius: 22.0,
            max_speed: 3.0,
            noise: 0.03,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Generation(m));
        if self.size == 0 || !self.size.is_multiple_of(64) {
            return fail(format!("clip size {} must be a positive multiple of 64", self.size));
        }
        if self.frames == 0 {
            return fail("clips need at least one frame".into());
        }
        if !(1..=PALETTE.len()).contains(&self.categories) {
            return fail(format!("categories must be between 1 and {}", PALETTE.len()));
        }
        if self.min_instances > self.max_instances {
            return fail(format!("min_instances {} exceeds max_instances {}", self.min_instances, self.max_instances));
        }
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius) || !self.max_speed.is_finite() || self.max_speed < 0.0 {
            return fail("radius and speed ranges are invalid".into());
        }
        if 2.0 * self.max_radius >= self.size as f64 {
            return fail(format!("radius {} does not fit a {}-pixel frame", self.max_radius, self.size));
        }
        let footprint = self.max_instances as f64 * (2.0 * self.min_radius).powi(2);
        if footprint > 0.8 * (self.size * self.size) as f64 {
            return fail(format!("{} instances of radius {} cannot fit in the frame", self.max_instances, self.min_radius));
        }
        Ok(())
    }

    pub fn mask_size(&self) -> usize {
        self.size / MASK_STRIDE
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Disk { r: f64 },
    Rect { rx: f64, ry: f64 },
    Triangle { r: f64 },
}

impl Shape {
    fn contains(&self, dx: f64, dy: f64) -> bool {
        match *self {
            Shape::Disk { r } => dx * dx + dy * dy <= r * r,
            Shape::Rect { rx, ry } => dx.abs() <= rx && dy.abs() <= ry,
            // Apex at (0, −r), base at y = r spanning x ∈ [−r, r].
            Shape::Triangle { r } => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }

    fn extent(&self) -> (f64, f64) {
        match *self {
            Shape::Disk { r } | Shape::Triangle { r } => (r, r),
            Shape::Rect { rx, ry } => (rx, ry),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceTrack {
    pub track_id: u64,
    pub category: usize,
    pub shape: Shape,
    pub color: [f64; 3],
    /// Centre per frame.
    pub centers: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthClip {
    pub seed: u64,
    /// RGB frames `[3, H, W]` in `[0, 1]`.
    pub frames: Vec<Tensor>,
    /// Ground truth at stride 8 per frame.
    pub gt: Vec<GroundTruth>,
    pub instances: Vec<InstanceTrack>,
}

/// Derives the seed of the `index`-th clip of a dataset.
pub fn clip_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_clip(config: &SynthConfig, seed: u64) -> Result<SynthClip> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texture = Tensor::uniform(&[3, config.size, config.size], -config.noise, config.noise, &mut rng);
    for _ in 0..MAX_ATTEMPTS {
        let instances = sample_instances(config, &mut rng)?;
        let (frames, gt) = render(config, &instances, &texture);
        if gt.iter().all(|g| g.masks.iter().all(is_connected)) {
            return Ok(SynthClip { seed, frames, gt, instances });
        }
    }
    Err(Error::Generation(format!("no valid layout found for seed {seed} after {MAX_ATTEMPTS} attempts")))
}

/// `count` clips with seeds derived from `base_seed`.
pub fn generate_dataset(config: &SynthConfig, base_seed: u64, count: usize) -> Result<Vec<SynthClip>> {
    (0..count as u64).map(|i| generate_clip(config, clip_seed(base_seed, i))).collect()
}

fn sample_instances(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<InstanceTrack>> {
    let n = rng.random_range(config.min_instances..=config.max_instances);
    let size = config.size as f64;
    let mut used = vec![[false; 2]; PALETTE.len()];
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let category = rng.random_range(0..config.categories);
        let r = rng.random_range(config.min_radius..=config.max_radius);
        let shape = match category {
            0 => Shape::Disk { r },
            1 => Shape::Rect { rx: r * rng.random_range(0.7..=1.0), ry: r * rng.random_range(0.7..=1.0) },
            _ => Shape::Triangle { r },
        };
        let shade = match used[category] {
            [false, false] => rng.random_range(0..2),
            [false, true] => 0,
            [true, false] => 1,
            [true, true] => rng.random_range(0..2),
        };
        used[category][shade] = true;

        let (ex, ey) = shape.extent();
        let mut c = (rng.random_range(ex..=size - ex), rng.random_range(ey..=size - ey));
        let speed = rng.random_range(0.0..=config.max_speed);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let mut v = (speed * angle.cos(), speed * angle.sin());
        let jitter = Normal::new(0.0, 0.1 * speed).map_err(|e| Error::Generation(e.to_string()))?;
        let mut centers = Vec::with_capacity(config.frames);
        centers.push(c);
        for _ in 1..config.frames {
            v.0 += jitter.sample(rng);
            v.1 += jitter.sample(rng);
            c = (c.0 + v.0, c.1 + v.1);
            bounce(&mut c.0, &mut v.0, ex, size - ex);
            bounce(&mut c.1, &mut v.1, ey, size - ey);
            centers.push(c);
        }
        out.push(InstanceTrack { track_id: k as u64 + 1, category, shape, color: PALETTE[category][shade], centers });
    }
    Ok(out)
}

fn bounce(x: &mut f64, v: &mut f64, lo: f64, hi: f64) {
    if *x < lo {
        *x = 2.0 * lo - *x;
        *v = -*v;
    } else if *x > hi {
        *x = 2.0 * hi - *x;
        *v = -*v;
    }
    *x = x.clamp(lo, hi);
}

fn render(config: &SynthConfig, instances: &[InstanceTrack], texture: &Tensor) -> (Vec<Tensor>, Vec<GroundTruth>) {
    let s = config.size;
    let ms = config.mask_size();
    let mut frames = Vec::with_capacity(config.frames);
    let mut gts = Vec::with_capacity(config.frames);
    for t in 0..config.frames {
        // Later instances are drawn on top.
        let mut owner = vec![usize::MAX; s * s];
        for (k, inst) in instances.iter().enumerate() {
            let (cx, cy) = inst.centers[t];
            for y in 0..s {
                for x in 0..s {
                    if inst.shape.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy) {
                        owner[y * s + x] = k;
                    }
                }
            }
        }
        let mut img = texture.clone();
        let data = img.data_mut();
        for (i, &o) in owner.iter().enumerate() {
            for ch in 0..3 {
                let base = if o == usize::MAX { BACKGROUND } else { instances[o].color[ch] };
                data[ch * s * s + i] = (base + data[ch * s * s + i]).clamp(0.0, 1.0);
            }
        }
        frames.push(img);

        let mut gt = GroundTruth { masks: vec![], categories: vec![], track_ids: vec![] };
        for (k, inst) in instances.iter().enumerate() {
            let mut mask = Tensor::zeros(&[ms, ms]);
            let mut any = false;
            for my in 0..ms {
                for mx in 0..ms {
                    let mut count = 0;
                    for dy in 0..MASK_STRIDE {
                        let row = (my * MASK_STRIDE + dy) * s + mx * MASK_STRIDE;
                        count += owner[row..row + MASK_STRIDE].iter().filter(|&&o| o == k).count();
                    }
                    if 2 * count > MASK_STRIDE * MASK_STRIDE {
                        mask.data_mut()[my * ms + mx] = 1.0;
                        any = true;
                    }
                }
            }
            if any {
                gt.masks.push(mask);
                gt.categories.push(inst.category);
                gt.track_ids.push(inst.track_id);
            }
        }
        gts.push(gt);
    }
    (frames, gts)
}

/// Whether the foreground of a binary mask is one 4-connected component.
pub fn is_connected(mask: &Tensor) -> bool {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let fg = |i: usize| mask.data()[i] > 0.5;
    let Some(start) = (0..h * w).find(|&i| fg(i)) else {
        return true;
    };
    let mut seen = vec![false; h * w];
    let mut stack = vec![start];
    seen[start] = true;
    let mut reached = 0;
    while let Some(i) = stack.pop() {
        reached += 1;
        let (y, x) = (i / w, i % w);
        let mut visit = |j: usize| {
            if fg(j) && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        };
        if y > 0 {
            visit(i - w);
        }
        if y + 1 < h {
            visit(i + w);
        }
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < w {
            visit(i + 1);
        }
    }
    reached == (0..h * w).filter(|&i| fg(i)).count()
}

/// Writes frames as portable tensor files plus a ground-truth manifest.
pub fn export_clip(clip: &SynthClip, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (t, frame) in clip.frames.iter().enumerate() {
        save_tensor(&dir.join(format!("frame_{t:04}.kvt")), &frame.to_dtype(DType::F32))?;
    }
    crate::rle::write_ground_truth(&dir.join(crate::rle::GT_FILE), &clip.gt)
}

/// Reads the `*.kvt` frames of a clip directory in name order.
pub fn load_frames(dir: &Path) -> Result<Vec<Tensor>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "kvt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Format(format!("no .kvt frames in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let t = load_tensor(p)?;
            if t.rank() != 3 || t.shape()[0] != 3 {
                return Err(Error::Format(format!("{} is not a [3, H, W] frame", p.display())));
            }
            Ok(t)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangle_membership() {
        let t = Shape::Triangle { r: 4.0 };
        assert!(t.contains(0.0, -3.9));
        assert!(!t.contains(1.0, -3.9));
        assert!(t.contains(3.9, 3.9));
    }

    #[test]
    fn connectivity() {
        let m = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(is_connected(&m));
        let m = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(!is_connected(&m));
    }
}
