//! Segmentation and classification metrics.
//!
//! Hausdorff distances are taken between foreground voxel-center sets, using
//! an exact Euclidean distance transform that honors anisotropic spacing.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{label_mask, voxel_volume, LabelMap, Mask, Spacing};

/// Structures reported per case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Myocardium,
    Infarction,
    NoReflow,
    WholeLv,
    Lesions,
}

impl Target {
    pub const ALL: [Target; 5] = [
        Target::Myocardium,
        Target::Infarction,
        Target::NoReflow,
        Target::WholeLv,
        Target::Lesions,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Target::Myocardium => "myocardium",
            Target::Infarction => "infarction",
            Target::NoReflow => "no_reflow",
            Target::WholeLv => "whole_lv",
            Target::Lesions => "lesions",
        }
    }

    fn is_lesion(&self) -> bool {
        matches!(self, Target::Infarction | Target::NoReflow | Target::Lesions)
    }
}

/// Which labels count as myocardium.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MyocardiumDefinition {
    /// Healthy myocardium plus infarction and no-reflow.
    #[default]
    WithLesions,
    HealthyOnly,
}

impl MyocardiumDefinition {
    pub fn labels(&self) -> &'static [u8] {
        match self {
            MyocardiumDefinition::WithLesions => &[2, 3, 4],
            MyocardiumDefinition::HealthyOnly => &[2],
        }
    }
}

/// Label set making up each target.
pub fn target_labels(target: Target, myo: MyocardiumDefinition) -> &'static [u8] {
    match target {
        Target::Myocardium => myo.labels(),
        Target::Infarction => &[3],
        Target::NoReflow => &[4],
        Target::WholeLv => &[1, 2, 3, 4],
        Target::Lesions => &[3, 4],
    }
}

fn check_shapes(a: &Mask, b: &Mask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "masks {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `2|A∩B| / (|A| + |B|)`; 1.0 when both are empty.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p && g) as usize;
        a += p as usize;
        b += g as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Voxel-level `(TP/(TP+FN), TN/(TN+FP))`; an empty denominator gives 1.0.
pub fn sensitivity_specificity(pred: &Mask, gt: &Mask) -> Result<(f64, f64)> {
    check_shapes(pred, gt)?;
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let rate = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok((rate(tp, tp + fneg), rate(tn, tn + fp)))
}

/// Symmetric Hausdorff distance in mm between the two foreground sets.
/// `None` when either set is empty.
pub fn hausdorff_mm(pred: &Mask, gt: &Mask, spacing: Spacing) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    if pred.count() == 0 || gt.count() == 0 {
        return Ok(None);
    }
    let ab = directed_hausdorff(pred, gt, spacing);
    let ba = directed_hausdorff(gt, pred, spacing);
    Ok(Some(ab.max(ba)))
}

/// `max_{a in A} min_{b in B} |a - b|`, both sets non-empty.
pub fn directed_hausdorff(a: &Mask, b: &Mask, spacing: Spacing) -> f64 {
    let dist2 = squared_distance_transform(b, spacing);
    a.data()
        .iter()
        .zip(&dist2)
        .filter(|(&inside, _)| inside)
        .map(|(_, &d)| d)
        .fold(0.0f64, f64::max)
        .sqrt()
}

/// Squared Euclidean distance (mm²) from every voxel center to the nearest
/// foreground voxel center. Separable lower-envelope algorithm, one pass per axis.
pub fn squared_distance_transform(mask: &Mask, spacing: Spacing) -> Vec<f64> {
    let [nz, ny, nx] = mask.shape();
    let mut f: Vec<f64> = mask
        .data()
        .iter()
        .map(|&m| if m { 0.0 } else { f64::INFINITY })
        .collect();
    let longest = nz.max(ny).max(nx);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut scratch = EnvelopeScratch::new(longest);
    // X lines
    for z in 0..nz {
        for y in 0..ny {
            let base = (z * ny + y) * nx;
            line[..nx].copy_from_slice(&f[base..base + nx]);
            distance_1d(&line[..nx], spacing.dx, &mut out[..nx], &mut scratch);
            f[base..base + nx].copy_from_slice(&out[..nx]);
        }
    }
    // Y lines
    for z in 0..nz {
        for x in 0..nx {
            for y in 0..ny {
                line[y] = f[(z * ny + y) * nx + x];
            }
            distance_1d(&line[..ny], spacing.dy, &mut out[..ny], &mut scratch);
            for y in 0..ny {
                f[(z * ny + y) * nx + x] = out[y];
            }
        }
    }
    // Z lines
    for y in 0..ny {
        for x in 0..nx {
            for z in 0..nz {
                line[z] = f[(z * ny + y) * nx + x];
            }
            distance_1d(&line[..nz], spacing.dz, &mut out[..nz], &mut scratch);
            for z in 0..nz {
                f[(z * ny + y) * nx + x] = out[z];
            }
        }
    }
    f
}

struct EnvelopeScratch {
    sites: Vec<usize>,
    bounds: Vec<f64>,
}

impl EnvelopeScratch {
    fn new(n: usize) -> Self {
        EnvelopeScratch {
            sites: vec![0; n],
            bounds: vec![0.0; n + 1],
        }
    }
}

/// `out[q] = min_p (w (q - p))^2 + f[p]` over finite `f[p]`.
fn distance_1d(f: &[f64], w: f64, out: &mut [f64], s: &mut EnvelopeScratch) {
    let n = f.len();
    let pos = |i: usize| i as f64 * w;
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                s.sites[0] = q;
                s.bounds[0] = f64::NEG_INFINITY;
                s.bounds[1] = f64::INFINITY;
                break;
            }
            let v = s.sites[k as usize];
            let inter = ((f[q] + pos(q) * pos(q)) - (f[v] + pos(v) * pos(v))) / (2.0 * (pos(q) - pos(v)));
            if inter <= s.bounds[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            s.sites[k as usize] = q;
            s.bounds[k as usize] = inter;
            s.bounds[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while s.bounds[j + 1] < pos(q) {
            j += 1;
        }
        let v = s.sites[j];
        let d = (q as f64 - v as f64) * w;
        *o = d * d + f[v];
    }
}

/// `(V_pred, V_gt, |V_pred - V_gt|)` in mm³.
pub fn volumes(pred: &Mask, gt: &Mask, spacing: Spacing) -> Result<(f64, f64, f64)> {
    check_shapes(pred, gt)?;
    let vv = voxel_volume(spacing);
    let vp = pred.count() as f64 * vv;
    let vg = gt.count() as f64 * vv;
    Ok((vp, vg, (vp - vg).abs()))
}

/// `|100 V(lesion_pred)/V(myo) - 100 V(lesion_gt)/V(myo)|` with the
/// myocardium volume taken from ground truth.
pub fn volume_diff_ratio(lesion_pred: &Mask, lesion_gt: &Mask, myo_total_gt: &Mask, spacing: Spacing) -> Result<f64> {
    check_shapes(lesion_pred, lesion_gt)?;
    check_shapes(lesion_pred, myo_total_gt)?;
    let vv = voxel_volume(spacing);
    let myo = myo_total_gt.count() as f64 * vv;
    if myo == 0.0 {
        return Err(Error::Invalid("myocardium mask is empty".into()));
    }
    let p = 100.0 * lesion_pred.count() as f64 * vv / myo;
    let g = 100.0 * lesion_gt.count() as f64 * vv / myo;
    Ok((p - g).abs())
}

/// Fraction of positions where `predictions[i] == truths[i]`.
pub fn accuracy<T: PartialEq>(predictions: &[T], truths: &[T]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Invalid("accuracy of an empty list".into()));
    }
    let correct = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Every metric for one target of one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub target: Target,
    pub dice: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// `None` when either mask is empty.
    pub hausdorff_mm: Option<f64>,
    pub volume_pred_mm3: f64,
    pub volume_gt_mm3: f64,
    pub volume_diff_mm3: f64,
    /// Lesion targets only; `None` when the ground-truth myocardium is empty.
    pub volume_diff_ratio_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub targets: Vec<TargetReport>,
}

impl SegReport {
    pub fn get(&self, target: Target) -> Option<&TargetReport> {
        self.targets.iter().find(|t| t.target == target)
    }
}

pub fn evaluate_case(pred: &LabelMap, gt: &LabelMap, myo: MyocardiumDefinition) -> Result<SegReport> {
    if !pred.same_geometry(gt) {
        return Err(Error::Shape(format!(
            "prediction {:?}@{:?} vs ground truth {:?}@{:?}",
            pred.shape(),
            pred.spacing(),
            gt.shape(),
            gt.spacing()
        )));
    }
    let spacing = gt.spacing();
    let myo_total = label_mask(gt, &[2, 3, 4]);
    let has_myo = myo_total.count() > 0;
    let mut targets = Vec::with_capacity(Target::ALL.len());
    for target in Target::ALL {
        let labels = target_labels(target, myo);
        let p = label_mask(pred, labels);
        let g = label_mask(gt, labels);
        let (sensitivity, specificity) = sensitivity_specificity(&p, &g)?;
        let (vp, vg, dv) = volumes(&p, &g, spacing)?;
        let vdr = if target.is_lesion() && has_myo {
            Some(volume_diff_ratio(&p, &g, &myo_total, spacing)?)
        } else {
            None
        };
        targets.push(TargetReport {
            target,
            dice: dice(&p, &g)?,
            sensitivity,
            specificity,
            hausdorff_mm: hausdorff_mm(&p, &g, spacing)?,
            volume_pred_mm3: vp,
            volume_gt_mm3: vg,
            volume_diff_mm3: dv,
            volume_diff_ratio_pct: vdr,
        });
    }
    Ok(SegReport { targets })
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

pub const SEG_CSV_HEADER: &str = "case_id,target,dice,sensitivity,specificity,hausdorff_mm,volume_pred_mm3,volume_gt_mm3,volume_diff_mm3,volume_diff_ratio_pct";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v}"))
}

/// One row per (case, target), cases in id order.
pub fn seg_report_csv(reports: &[(String, SegReport)]) -> String {
    let mut sorted: Vec<&(String, SegReport)> = reports.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = String::from(SEG_CSV_HEADER);
    out.push('\n');
    for (id, r) in sorted {
        for t in &r.targets {
            let _ = writeln!(
                out,
                "{id},{},{},{},{},{},{},{},{},{}",
                t.target.name(),
                t.dice,
                t.sensitivity,
                t.specificity,
                opt(t.hausdorff_mm),
                t.volume_pred_mm3,
                t.volume_gt_mm3,
                t.volume_diff_mm3,
                opt(t.volume_diff_ratio_pct)
            );
        }
    }
    out
}

/// Mean and sample standard deviation over the defined values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std, n })
    }

    /// `"mean ± std"` after scaling, two decimals.
    pub fn display(&self, scale: f64) -> String {
        format!("{:.2} ± {:.2}", self.mean * scale, self.std * scale)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub cases: usize,
    pub dice: Option<Stat>,
    /// Dice in percent, `"mean ± std"`.
    pub dice_pct: Option<String>,
    pub sensitivity: Option<Stat>,
    pub specificity: Option<Stat>,
    pub hausdorff_mm: Option<Stat>,
    pub volume_diff_mm3: Option<Stat>,
    pub volume_diff_ratio_pct: Option<Stat>,
}

/// Per-target summary, keyed by target name.
pub fn summarize(reports: &[(String, SegReport)]) -> BTreeMap<String, TargetSummary> {
    let mut sorted: Vec<&(String, SegReport)> = reports.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = BTreeMap::new();
    for target in Target::ALL {
        let rows: Vec<&TargetReport> = sorted.iter().filter_map(|(_, r)| r.get(target)).collect();
        let collect = |f: &dyn Fn(&TargetReport) -> Option<f64>| -> Vec<f64> { rows.iter().filter_map(|r| f(r)).collect() };
        let dice = Stat::of(&collect(&|r| Some(r.dice)));
        out.insert(
            target.name().to_string(),
            TargetSummary {
                cases: rows.len(),
                dice_pct: dice.as_ref().map(|s| s.display(100.0)),
                dice,
                sensitivity: Stat::of(&collect(&|r| Some(r.sensitivity))),
                specificity: Stat::of(&collect(&|r| Some(r.specificity))),
                hausdorff_mm: Stat::of(&collect(&|r| r.hausdorff_mm)),
                volume_diff_mm3: Stat::of(&collect(&|r| Some(r.volume_diff_mm3))),
                volume_diff_ratio_pct: Stat::of(&collect(&|r| r.volume_diff_ratio_pct)),
            },
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> Spacing {
        Spacing::new(1.0, 1.0, 1.0).unwrap()
    }

    fn mask(shape: [usize; 3], on: &[[usize; 3]], spacing: Spacing) -> Mask {
        Mask::from_fn(shape, spacing, |z, y, x| on.contains(&[z, y, x])).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = mask([1, 4, 4], &[[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1]], unit());
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let b = mask([1, 4, 4], &[[0, 0, 0], [0, 0, 1], [0, 3, 3], [0, 2, 2]], unit());
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        let e = mask([1, 4, 4], &[], unit());
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(dice(&a, &e).unwrap(), 0.0);
        assert!(dice(&a, &mask([1, 4, 5], &[], unit())).is_err());
    }

    #[test]
    fn sensitivity_specificity_examples() {
        let gt = mask([1, 10, 10], &[[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, 3]], unit());
        assert_eq!(sensitivity_specificity(&gt, &gt).unwrap(), (1.0, 1.0));
        let empty = mask([1, 10, 10], &[], unit());
        assert_eq!(sensitivity_specificity(&empty, &gt).unwrap(), (0.0, 1.0));
        let pred = mask([1, 10, 10], &[[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 5, 5]], unit());
        let (se, sp) = sensitivity_specificity(&pred, &gt).unwrap();
        assert_eq!(se, 0.75);
        assert!((sp - 95.0 / 96.0).abs() < 1e-15);
    }

    #[test]
    fn hausdorff_examples() {
        let a = mask([1, 1, 3], &[[0, 0, 0]], Spacing::TARGET);
        assert_eq!(hausdorff_mm(&a, &a, Spacing::TARGET).unwrap(), Some(0.0));
        let b = mask([1, 1, 3], &[[0, 0, 2]], Spacing::TARGET);
        let h = hausdorff_mm(&a, &b, Spacing::TARGET).unwrap().unwrap();
        assert!((h - 2.916).abs() < 1e-12);

        let s = Spacing::new(10.0, 1.0, 1.0).unwrap();
        let a = mask([2, 1, 1], &[[0, 0, 0]], s);
        let b = mask([2, 1, 1], &[[0, 0, 0], [1, 0, 0]], s);
        assert_eq!(directed_hausdorff(&a, &b, s), 0.0);
        assert_eq!(directed_hausdorff(&b, &a, s), 10.0);
        assert_eq!(hausdorff_mm(&a, &b, s).unwrap(), Some(10.0));

        let e = mask([2, 1, 1], &[], s);
        assert_eq!(hausdorff_mm(&a, &e, s).unwrap(), None);
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let s = Spacing::new(3.0, 1.5, 0.7).unwrap();
        let m = Mask::from_fn([4, 5, 6], s, |z, y, x| (z * 7 + y * 3 + x * 5) % 11 == 0).unwrap();
        let on: Vec<[usize; 3]> = (0..4)
            .flat_map(|z| (0..5).flat_map(move |y| (0..6).map(move |x| [z, y, x])))
            .filter(|&[z, y, x]| m.get(z, y, x))
            .collect();
        let dt = squared_distance_transform(&m, s);
        for z in 0..4 {
            for y in 0..5 {
                for x in 0..6 {
                    let best = on
                        .iter()
                        .map(|p| {
                            let dz = (p[0] as f64 - z as f64) * 3.0;
                            let dy = (p[1] as f64 - y as f64) * 1.5;
                            let dx = (p[2] as f64 - x as f64) * 0.7;
                            dz * dz + dy * dy + dx * dx
                        })
                        .fold(f64::INFINITY, f64::min);
                    assert!((dt[m.index(z, y, x)] - best).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn volume_examples() {
        let s = Spacing::TARGET;
        let a = Mask::from_fn([1, 10, 10], s, |_, _, _| true).unwrap();
        let (vp, vg, dv) = volumes(&a, &a, s).unwrap();
        assert!((vp - 2125.764).abs() < 1e-9 && (vg - 2125.764).abs() < 1e-9 && dv == 0.0);

        let empty = mask([1, 10, 10], &[], unit());
        let fifty = Mask::from_fn([1, 10, 10], unit(), |_, y, _| y < 5).unwrap();
        assert_eq!(volumes(&empty, &fifty, unit()).unwrap(), (0.0, 50.0, 50.0));

        let big = Mask::from_fn([1, 12, 10], unit(), |_, _, _| true).unwrap();
        let hundred = Mask::from_fn([1, 12, 10], unit(), |_, y, _| y < 10).unwrap();
        assert_eq!(volumes(&big, &hundred, unit()).unwrap().2, 20.0);
    }

    #[test]
    fn volume_diff_ratio_examples() {
        let myo = Mask::from_fn([1, 10, 10], unit(), |_, _, _| true).unwrap();
        let gt = Mask::from_fn([1, 10, 10], unit(), |_, y, _| y == 0).unwrap();
        let pred = Mask::from_fn([1, 10, 10], unit(), |_, y, x| y == 0 || (y == 1 && x < 5)).unwrap();
        assert_eq!(volume_diff_ratio(&gt, &gt, &myo, unit()).unwrap(), 0.0);
        assert!((volume_diff_ratio(&pred, &gt, &myo, unit()).unwrap() - 5.0).abs() < 1e-12);
        let seven = Mask::from_fn([1, 10, 10], unit(), |_, y, x| y == 0 && x < 7).unwrap();
        let empty = mask([1, 10, 10], &[], unit());
        assert!((volume_diff_ratio(&empty, &seven, &myo, unit()).unwrap() - 7.0).abs() < 1e-12);
        assert!(volume_diff_ratio(&empty, &seven, &empty, unit()).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let t: Vec<u8> = vec![1; 50];
        let mut p = t.clone();
        p[..4].iter_mut().for_each(|v| *v = 0);
        assert_eq!(accuracy(&p, &t).unwrap(), 0.92);
        assert_eq!(accuracy(&t, &t).unwrap(), 1.0);
        assert!(accuracy::<u8>(&[], &[]).is_err());
        assert!(accuracy(&[1u8], &[1, 2]).is_err());
    }

    #[test]
    fn evaluate_perfect_and_empty() {
        let gt = LabelMap::from_fn([2, 6, 6], Spacing::TARGET, |z, y, x| match (y, x) {
            (2..=3, 2..=3) => 1,
            (1..=4, 1..=4) => if z == 0 && y == 1 { 3 } else { 2 },
            _ => 0,
        })
        .unwrap();
        let r = evaluate_case(&gt, &gt, MyocardiumDefinition::default()).unwrap();
        for t in &r.targets {
            assert_eq!(t.dice, 1.0);
            assert_eq!(t.volume_diff_mm3, 0.0);
            if t.volume_gt_mm3 > 0.0 {
                assert_eq!(t.hausdorff_mm, Some(0.0));
            }
        }
        let bg = LabelMap::filled([2, 6, 6], 0, Spacing::TARGET).unwrap();
        let r = evaluate_case(&bg, &gt, MyocardiumDefinition::default()).unwrap();
        for t in &r.targets {
            if t.target != Target::NoReflow {
                assert_eq!(t.dice, 0.0);
                assert_eq!(t.sensitivity, 0.0);
            }
        }
        assert!(evaluate_case(&bg.with_spacing(Spacing::new(1.0, 1.0, 1.0).unwrap()), &gt, MyocardiumDefinition::default()).is_err());
    }

    #[test]
    fn summary_and_csv() {
        let gt = LabelMap::from_fn([1, 4, 4], Spacing::TARGET, |_, y, _| (y % 3) as u8).unwrap();
        let r = evaluate_case(&gt, &gt, MyocardiumDefinition::default()).unwrap();
        let reports = vec![("b".to_string(), r.clone()), ("a".to_string(), r)];
        let csv = seg_report_csv(&reports);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], SEG_CSV_HEADER);
        assert_eq!(lines.len(), 1 + 2 * Target::ALL.len());
        assert!(lines[1].starts_with("a,myocardium,1,"));
        let s = summarize(&reports);
        assert_eq!(s["whole_lv"].dice_pct.as_deref(), Some("100.00 ± 0.00"));
        assert!(s["infarction"].hausdorff_mm.is_none());
    }
}
