//! Synthetic DE-MRI-like short-axis phantoms with exact ground truth.
//!
//! Each slice holds a blood-pool disk (label 1) inside a myocardial annulus
//! (label 2). Pathological cases carry a subendocardial infarct wedge
//! (label 3) over a contiguous run of slices, optionally with a dark
//! no-reflow core (label 4) in the wedge interior.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::CaseRecord;
use crate::volume::{LabelMap, Spacing, Volume, INFARCTION, NO_REFLOW};

/// Mean intensity per label before noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Intensities {
    pub background: f64,
    pub blood: f64,
    pub myocardium: f64,
    pub infarct: f64,
    pub no_reflow: f64,
}

impl Default for Intensities {
    fn default() -> Self {
        Intensities {
            background: 0.4,
            blood: 0.8,
            myocardium: 0.15,
            infarct: 1.1,
            no_reflow: 0.02,
        }
    }
}

impl Intensities {
    fn for_label(&self, label: u8) -> f64 {
        match label {
            0 => self.background,
            1 => self.blood,
            2 => self.myocardium,
            3 => self.infarct,
            _ => self.no_reflow,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub shape: [usize; 3],
    pub spacing: Spacing,
    /// Basal cavity radius range in voxels.
    pub cavity_radius: [f64; 2],
    /// Myocardial wall thickness range in voxels.
    pub myocardium_thickness: [f64; 2],
    /// Relative radius reduction from the first to the last slice.
    pub apex_shrink: f64,
    /// Largest in-plane center shift between adjacent slices, in voxels.
    pub max_center_drift: f64,
    pub infarct_probability: f64,
    /// Angular extent range of the infarct wedge, degrees.
    pub infarct_angle_deg: [f64; 2],
    /// Fraction of the wall depth the wedge reaches, from the endocardium.
    pub infarct_transmurality: [f64; 2],
    /// Probability of a no-reflow core given an infarct.
    pub no_reflow_probability: f64,
    pub intensities: Intensities,
    pub noise_sigma: f64,
    /// Lesion size every pathological case of a generated dataset reaches.
    pub min_lesion_voxels: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            shape: [6, 64, 64],
            spacing: Spacing::TARGET,
            cavity_radius: [9.0, 14.0],
            myocardium_thickness: [4.0, 6.0],
            apex_shrink: 0.3,
            max_center_drift: 2.0,
            infarct_probability: 0.67,
            infarct_angle_deg: [45.0, 120.0],
            infarct_transmurality: [0.5, 1.0],
            no_reflow_probability: 0.5,
            intensities: Intensities::default(),
            noise_sigma: 0.08,
            min_lesion_voxels: 30,
            seed: 42,
        }
    }
}

fn check_range(field: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && lo <= r[0] && r[0] <= r[1] && r[1] <= hi) {
        return Err(Error::config(field, format!("range must satisfy {lo} <= min <= max <= {hi}")));
    }
    Ok(())
}

fn check_probability(field: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(field, "must be in [0, 1]"));
    }
    Ok(())
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&n| n == 0) {
            return Err(Error::config("shape", "every axis must be non-empty"));
        }
        check_range("cavity_radius", self.cavity_radius, 1.0, f64::MAX)?;
        check_range("myocardium_thickness", self.myocardium_thickness, 1.0, f64::MAX)?;
        check_range("infarct_angle_deg", self.infarct_angle_deg, 0.0, 360.0)?;
        check_range("infarct_transmurality", self.infarct_transmurality, 0.0, 1.0)?;
        if !(0.0..1.0).contains(&self.apex_shrink) {
            return Err(Error::config("apex_shrink", "must be in [0, 1)"));
        }
        if !(self.max_center_drift >= 0.0 && self.max_center_drift.is_finite()) {
            return Err(Error::config("max_center_drift", "must be non-negative"));
        }
        check_probability("infarct_probability", self.infarct_probability)?;
        check_probability("no_reflow_probability", self.no_reflow_probability)?;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be non-negative"));
        }
        let i = &self.intensities;
        if [i.background, i.blood, i.myocardium, i.infarct, i.no_reflow]
            .iter()
            .any(|v| !v.is_finite())
        {
            return Err(Error::config("intensities", "must be finite"));
        }
        let outer = self.max_outer_radius();
        let half = self.shape[1].min(self.shape[2]) as f64 / 2.0;
        if outer + 1.0 > half {
            return Err(Error::config(
                "cavity_radius",
                format!("outer radius {outer} does not fit a {}x{} slice", self.shape[1], self.shape[2]),
            ));
        }
        Ok(())
    }

    fn max_outer_radius(&self) -> f64 {
        self.cavity_radius[1] + self.myocardium_thickness[1]
    }
}

/// Decorrelated child seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Angle of `theta` measured counter-clockwise from `start`, in `[0, 2π)`.
fn angle_from(theta: f64, start: f64) -> f64 {
    (theta - start).rem_euclid(2.0 * PI)
}

struct Wedge {
    start: f64,
    extent: f64,
    transmurality: f64,
    first: usize,
    last: usize,
    no_reflow: bool,
}

fn render_labels(config: &PhantomConfig, rng: &mut ChaCha8Rng, pathological: bool) -> Result<LabelMap> {
    let [nz, ny, nx] = config.shape;
    let cavity = uniform(rng, config.cavity_radius);
    let thickness = uniform(rng, config.myocardium_thickness);
    let margin = config.max_outer_radius() + 1.0;
    let (cy_lo, cy_hi) = (margin - 0.5, ny as f64 - margin - 0.5);
    let (cx_lo, cx_hi) = (margin - 0.5, nx as f64 - margin - 0.5);
    let mut cy = (ny as f64 - 1.0) / 2.0 + rng.gen_range(-2.0..=2.0);
    let mut cx = (nx as f64 - 1.0) / 2.0 + rng.gen_range(-2.0..=2.0);

    let wedge = if pathological {
        let extent = uniform(rng, config.infarct_angle_deg).to_radians();
        let run = rng.gen_range(nz.min(2)..=nz);
        let first = rng.gen_range(0..=nz - run);
        Some(Wedge {
            start: rng.gen_range(0.0..2.0 * PI),
            extent,
            transmurality: uniform(rng, config.infarct_transmurality),
            first,
            last: first + run - 1,
            no_reflow: rng.gen_bool(config.no_reflow_probability),
        })
    } else {
        None
    };

    let mut data = vec![0u8; nz * ny * nx];
    for z in 0..nz {
        if z > 0 && config.max_center_drift > 0.0 {
            let r = rng.gen_range(0.0..=config.max_center_drift);
            let phi = rng.gen_range(0.0..2.0 * PI);
            cy = (cy + r * phi.sin()).clamp(cy_lo.min(cy_hi), cy_hi.max(cy_lo));
            cx = (cx + r * phi.cos()).clamp(cx_lo.min(cx_hi), cx_hi.max(cx_lo));
        }
        let scale = if nz > 1 {
            1.0 - config.apex_shrink * z as f64 / (nz - 1) as f64
        } else {
            1.0
        };
        let r_in = cavity * scale;
        let wall = thickness * scale.sqrt();
        let r_out = r_in + wall;
        let plane = &mut data[z * ny * nx..(z + 1) * ny * nx];
        let active = wedge.as_ref().filter(|w| (w.first..=w.last).contains(&z));
        let mut infarct = vec![false; ny * nx];
        let mut core = vec![false; ny * nx];
        for y in 0..ny {
            for x in 0..nx {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let d = (dy * dy + dx * dx).sqrt();
                let i = y * nx + x;
                if d < r_in {
                    plane[i] = 1;
                } else if d < r_out {
                    plane[i] = 2;
                    if let Some(w) = active {
                        let a = angle_from(dy.atan2(dx), w.start);
                        let depth = (d - r_in) / wall;
                        if a <= w.extent && depth < w.transmurality {
                            infarct[i] = true;
                            let centered = (a - w.extent / 2.0).abs() <= w.extent * 0.3;
                            core[i] = w.no_reflow && centered && depth < 0.7 * w.transmurality;
                        }
                    }
                }
            }
        }
        for y in 0..ny {
            for x in 0..nx {
                let i = y * nx + x;
                if !infarct[i] {
                    continue;
                }
                let interior = y > 0
                    && x > 0
                    && y + 1 < ny
                    && x + 1 < nx
                    && infarct[i - 1]
                    && infarct[i + 1]
                    && infarct[i - nx]
                    && infarct[i + nx];
                plane[i] = if core[i] && interior { NO_REFLOW } else { INFARCTION };
            }
        }
    }
    LabelMap::new(config.shape, data, config.spacing)
}

fn render_image(config: &PhantomConfig, labels: &LabelMap, seed: u64) -> Result<Volume> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<f32> = (0..5).map(|l| config.intensities.for_label(l) as f32).collect();
    let data: Vec<f32> = if config.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::config("noise_sigma", e.to_string()))?;
        labels
            .data()
            .iter()
            .map(|&l| (config.intensities.for_label(l) + noise.sample(&mut rng)) as f32)
            .collect()
    } else {
        labels.data().iter().map(|&l| means[l as usize]).collect()
    };
    Volume::new(config.shape, data, config.spacing)
}

fn lesion_voxels(labels: &LabelMap) -> usize {
    labels.count_labels(&[INFARCTION, NO_REFLOW])
}

/// One case; pathology drawn with `infarct_probability`.
pub fn generate_case(config: &PhantomConfig, case_seed: u64) -> Result<CaseRecord> {
    generate_case_as(config, case_seed, None)
}

/// One case with the pathology decision optionally forced.
pub fn generate_case_as(config: &PhantomConfig, case_seed: u64, pathological: Option<bool>) -> Result<CaseRecord> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(case_seed, 0));
    let draw = rng.gen_bool(config.infarct_probability);
    let labels = render_labels(config, &mut rng, pathological.unwrap_or(draw))?;
    let image = render_image(config, &labels, derive_seed(case_seed, 1))?;
    let flag = lesion_voxels(&labels) > 0;
    CaseRecord::new(format!("phantom_{case_seed:016x}"), image, Some(labels), None, Some(flag))
}

/// A generated case plus the seed that produced it.
#[derive(Debug, Clone)]
pub struct GeneratedCase {
    pub seed: u64,
    pub record: CaseRecord,
}

const MAX_ATTEMPTS: u64 = 200;

/// `n_cases` cases with exactly `round(n * fraction)` pathological ones, ids
/// `case_000`, `case_001`, ... Pathological cases are regenerated until their
/// lesion reaches `min_lesion_voxels`.
pub fn generate_dataset(config: &PhantomConfig, n_cases: usize, pathological_fraction: f64, seed: u64) -> Result<Vec<GeneratedCase>> {
    config.validate()?;
    if !(0.0..=1.0).contains(&pathological_fraction) {
        return Err(Error::config("pathological_fraction", "must be in [0, 1]"));
    }
    let n_path = (n_cases as f64 * pathological_fraction).round() as usize;
    if n_path > 0 && config.max_outer_radius() <= config.cavity_radius[0] {
        return Err(Error::config("myocardium_thickness", "leaves no room for lesions"));
    }
    let mut order: Vec<usize> = (0..n_cases).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut flags = vec![false; n_cases];
    for &i in &order[..n_path] {
        flags[i] = true;
    }
    let width = n_cases.saturating_sub(1).to_string().len().max(3);
    let mut out = Vec::with_capacity(n_cases);
    for (i, &pathological) in flags.iter().enumerate() {
        let mut found = None;
        for attempt in 0..MAX_ATTEMPTS {
            let case_seed = derive_seed(seed, (i as u64) * MAX_ATTEMPTS + attempt);
            let mut record = generate_case_as(config, case_seed, Some(pathological))?;
            let lesions = record.labels.as_ref().map_or(0, lesion_voxels);
            if !pathological || lesions >= config.min_lesion_voxels.max(1) {
                record.id = format!("case_{i:0width$}");
                found = Some(GeneratedCase { seed: case_seed, record });
                break;
            }
        }
        out.push(found.ok_or_else(|| {
            Error::config(
                "min_lesion_voxels",
                format!("no lesion of {} voxels after {MAX_ATTEMPTS} attempts", config.min_lesion_voxels),
            )
        })?);
    }
    Ok(out)
}
