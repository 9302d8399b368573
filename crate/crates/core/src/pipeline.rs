//! Two-stage cascade: whole-LV segmentation, ROI crop, lesion segmentation,
//! label composition and the lesion-count classifier. Also fold management,
//! patch sampling, training, ensembling and dataset I/O.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{one_hot, poly_lr, sgd_step, total_loss, TrainHyper};
use crate::phantom::{derive_seed, PhantomConfig};
use crate::preprocess::{preprocess_image, resample_label, resample_label_to, PreprocessConfig, PREPROCESS_ORDER};
use crate::unet::{
    backward, crop_back, forward, init_params, pad_to, predict_logits, softmax, Checkpoint, Tensor4, UNetConfig,
    UNetParams,
};
use crate::volume::{
    read_labels, read_volume, write_miv, BBox, Grid, LabelMap, ProbMap, Spacing, Volume, Voxel, INFARCTION,
    LV_CAVITY, MYOCARDIUM, NO_REFLOW,
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub stage: u8,
    pub patch_size: [usize; 2],
    pub batch_size: usize,
    /// Optimizer steps per epoch.
    pub iterations_per_epoch: usize,
    pub unet: UNetConfig,
    pub hyper: TrainHyper,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig::stage1()
    }
}

impl StageConfig {
    /// Short-schedule optimizer setting shared by both stage presets.
    pub fn desk_hyper() -> TrainHyper {
        TrainHyper {
            lr0: 0.05,
            momentum: 0.9,
            ..TrainHyper::default()
        }
    }

    /// Whole-LV stage, three classes {background, cavity, myocardium}.
    pub fn stage1() -> Self {
        StageConfig {
            stage: 1,
            patch_size: [64, 64],
            batch_size: 4,
            iterations_per_epoch: 8,
            unet: UNetConfig {
                num_classes: 3,
                ..UNetConfig::default()
            },
            hyper: StageConfig::desk_hyper(),
        }
    }

    /// Lesion stage, three classes {background, infarction, no-reflow}.
    pub fn stage2() -> Self {
        StageConfig {
            stage: 2,
            patch_size: [48, 48],
            batch_size: 8,
            iterations_per_epoch: 8,
            unet: UNetConfig {
                num_classes: 3,
                ..UNetConfig::default()
            },
            hyper: StageConfig::desk_hyper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.hyper.validate()?;
        match (self.stage, self.unet.num_classes) {
            (1, 2 | 3) | (2, 3) => {}
            (1 | 2, _) => {
                return Err(Error::config(
                    "unet.num_classes",
                    "stage 1 takes 2 or 3 classes, stage 2 takes 3",
                ))
            }
            _ => return Err(Error::config("stage", "must be 1 or 2")),
        }
        if self.unet.in_channels != 1 {
            return Err(Error::config("unet.in_channels", "must be 1"));
        }
        let m = self.unet.grid_multiple();
        if self.patch_size.iter().any(|&p| p == 0 || p % m != 0) {
            return Err(Error::config(
                "patch_size",
                format!("each side must be a positive multiple of {m}"),
            ));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.iterations_per_epoch < 1 {
            return Err(Error::config("iterations_per_epoch", "must be at least 1"));
        }
        Ok(())
    }
}

/// Lesion-count rule: fewer than `min_voxels` lesion voxels means normal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierRule {
    pub lesion_labels: Vec<u8>,
    pub min_voxels: usize,
}

impl Default for ClassifierRule {
    fn default() -> Self {
        ClassifierRule {
            lesion_labels: vec![INFARCTION, NO_REFLOW],
            min_voxels: 10,
        }
    }
}

impl ClassifierRule {
    pub fn validate(&self) -> Result<()> {
        if self.min_voxels < 1 {
            return Err(Error::config("classifier.min_voxels", "must be at least 1"));
        }
        Ok(())
    }
}

/// Where stage-2 lesion labels may overwrite stage-1 labels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionMask {
    #[default]
    LvForeground,
    Myocardium,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub preprocess: PreprocessConfig,
    #[serde(deserialize_with = "stage1_over_preset")]
    pub stage1: StageConfig,
    #[serde(deserialize_with = "stage2_over_preset")]
    pub stage2: StageConfig,
    /// In-plane ROI dilation, voxels.
    pub roi_margin: usize,
    pub lesion_mask: LesionMask,
    pub classifier: ClassifierRule,
    pub folds: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            preprocess: PreprocessConfig::default(),
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            roi_margin: 5,
            lesion_mask: LesionMask::default(),
            classifier: ClassifierRule::default(),
            folds: 5,
        }
    }
}

/// Recursively overlays `patch` onto `base`.
fn merge_json(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge_json(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

// Fields missing from a stage section, at any depth, fall back to that stage's preset.
fn over_preset<'de, D: serde::Deserializer<'de>>(d: D, preset: StageConfig) -> std::result::Result<StageConfig, D::Error> {
    let patch = serde_json::Value::deserialize(d)?;
    let mut base = serde_json::to_value(preset).map_err(serde::de::Error::custom)?;
    merge_json(&mut base, patch);
    serde_json::from_value(base).map_err(serde::de::Error::custom)
}

fn stage1_over_preset<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<StageConfig, D::Error> {
    over_preset(d, StageConfig::stage1())
}

fn stage2_over_preset<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<StageConfig, D::Error> {
    over_preset(d, StageConfig::stage2())
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.stage1.stage != 1 || self.stage2.stage != 2 {
            return Err(Error::config("stage", "stage1/stage2 sections must carry stage ids 1 and 2"));
        }
        self.classifier.validate()?;
        if self.folds < 1 {
            return Err(Error::config("folds", "must be at least 1"));
        }
        Ok(())
    }

    pub fn stage(&self, id: u8) -> Result<&StageConfig> {
        match id {
            1 => Ok(&self.stage1),
            2 => Ok(&self.stage2),
            _ => Err(Error::config("stage", "must be 1 or 2")),
        }
    }
}

// ---------------------------------------------------------------------------
// Cases and folds
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub id: String,
    pub image: Volume,
    pub labels: Option<LabelMap>,
    pub fold: Option<usize>,
    pub pathological: Option<bool>,
}

impl CaseRecord {
    pub fn new(
        id: impl Into<String>,
        image: Volume,
        labels: Option<LabelMap>,
        fold: Option<usize>,
        pathological: Option<bool>,
    ) -> Result<Self> {
        let id = id.into();
        if let Some(l) = &labels {
            if !l.same_geometry(&image) {
                return Err(Error::Shape(format!(
                    "case {id}: labels {:?}@{:?} vs image {:?}@{:?}",
                    l.shape(),
                    l.spacing(),
                    image.shape(),
                    image.spacing()
                )));
            }
        }
        Ok(CaseRecord {
            id,
            image,
            labels,
            fold,
            pathological,
        })
    }

    /// Image and labels moved onto the preprocessing grid.
    pub fn preprocessed(&self, config: &PreprocessConfig) -> Result<CaseRecord> {
        let image = preprocess_image(&self.image, config)?;
        let labels = match &self.labels {
            Some(l) => Some(resample_label(l, config.target_spacing)?),
            None => None,
        };
        CaseRecord::new(self.id.clone(), image, labels, self.fold, self.pathological)
    }
}

/// Seeded stratified assignment of `cases` to `k` folds; returns one fold
/// index per case. Each pathology group is shuffled, the groups are
/// concatenated and dealt round-robin.
pub fn make_folds(cases: &[CaseRecord], k: usize, seed: u64) -> Result<Vec<usize>> {
    let flags: Vec<Option<bool>> = cases.iter().map(|c| c.pathological).collect();
    make_folds_by_flag(&flags, k, seed)
}

pub fn make_folds_by_flag(flags: &[Option<bool>], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || flags.len() < k {
        return Err(Error::Invalid(format!("{} cases cannot fill {k} folds", flags.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dealt = Vec::with_capacity(flags.len());
    for group in [Some(true), Some(false), None] {
        let mut members: Vec<usize> = (0..flags.len()).filter(|&i| flags[i] == group).collect();
        rand::seq::SliceRandom::shuffle(members.as_mut_slice(), &mut rng);
        dealt.extend(members);
    }
    let mut folds = vec![0; flags.len()];
    for (pos, &case) in dealt.iter().enumerate() {
        folds[case] = pos % k;
    }
    Ok(folds)
}

// ---------------------------------------------------------------------------
// Targets
// ---------------------------------------------------------------------------

/// 1 on the whole LV (cavity, myocardium and lesions), 0 elsewhere.
pub fn stage1_targets(labels: &LabelMap) -> LabelMap {
    relabel(labels, |l| (l != 0) as u8)
}

/// 0 background, 1 cavity, 2 myocardium including lesions.
pub fn stage1_targets_3class(labels: &LabelMap) -> LabelMap {
    relabel(labels, |l| match l {
        0 => 0,
        1 => 1,
        _ => 2,
    })
}

/// 0 everything else, 1 infarction, 2 no-reflow.
pub fn stage2_targets(labels: &LabelMap) -> LabelMap {
    relabel(labels, |l| match l {
        3 => 1,
        4 => 2,
        _ => 0,
    })
}

fn relabel(labels: &LabelMap, f: impl Fn(u8) -> u8) -> LabelMap {
    labels.map(|&l| f(l)).expect("targets stay within the label range")
}

/// Training targets for `stage`.
pub fn stage_targets(labels: &LabelMap, stage: &StageConfig) -> LabelMap {
    match (stage.stage, stage.unet.num_classes) {
        (1, 2) => stage1_targets(labels),
        (1, _) => stage1_targets_3class(labels),
        _ => stage2_targets(labels),
    }
}

// ---------------------------------------------------------------------------
// ROI
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiSpec {
    pub bbox: BBox,
    pub margin: usize,
    pub source_shape: [usize; 3],
}

/// Bounding box of the non-zero voxels, dilated in-plane by `margin` and
/// clipped. Falls back to the full grid when nothing is foreground.
pub fn compute_roi(pred: &LabelMap, margin: usize) -> RoiSpec {
    let shape = pred.shape();
    let [nz, ny, nx] = shape;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for z in 0..nz {
        let slice = pred.slice(z);
        for y in 0..ny {
            for x in 0..nx {
                if slice[y * nx + x] != 0 {
                    for (a, v) in [z, y, x].into_iter().enumerate() {
                        lo[a] = lo[a].min(v);
                        hi[a] = hi[a].max(v);
                    }
                }
            }
        }
    }
    let bbox = if lo[0] == usize::MAX {
        BBox::full(shape)
    } else {
        for a in 1..3 {
            lo[a] = lo[a].saturating_sub(margin);
            hi[a] = (hi[a] + margin).min(shape[a] - 1);
        }
        BBox { lo, hi }
    };
    RoiSpec {
        bbox,
        margin,
        source_shape: shape,
    }
}

fn check_roi<T: Voxel>(grid: &Grid<T>, roi: &RoiSpec) -> Result<()> {
    if !roi.bbox.fits(grid.shape()) {
        return Err(Error::Shape(format!(
            "roi {:?}..={:?} outside grid {:?}",
            roi.bbox.lo,
            roi.bbox.hi,
            grid.shape()
        )));
    }
    Ok(())
}

/// Sub-grid copy of the ROI box.
pub fn crop<T: Voxel>(grid: &Grid<T>, roi: &RoiSpec) -> Result<Grid<T>> {
    check_roi(grid, roi)?;
    let BBox { lo, hi } = roi.bbox;
    let ext = roi.bbox.extents();
    let nx = grid.shape()[2];
    let mut data = Vec::with_capacity(ext.iter().product());
    for z in lo[0]..=hi[0] {
        let slice = grid.slice(z);
        for y in lo[1]..=hi[1] {
            data.extend_from_slice(&slice[y * nx + lo[2]..=y * nx + hi[2]]);
        }
    }
    Grid::new(ext, data, grid.spacing())
}

/// `base` with the ROI box replaced by `patch`.
pub fn paste_back<T: Voxel>(base: &Grid<T>, patch: &Grid<T>, roi: &RoiSpec) -> Result<Grid<T>> {
    check_roi(base, roi)?;
    if patch.shape() != roi.bbox.extents() {
        return Err(Error::Shape(format!(
            "patch {:?} does not match roi extents {:?}",
            patch.shape(),
            roi.bbox.extents()
        )));
    }
    let [_, ny, nx] = base.shape();
    let BBox { lo, hi } = roi.bbox;
    let w = hi[2] - lo[2] + 1;
    let mut data = base.data().to_vec();
    let mut src = patch.data().chunks_exact(w);
    for z in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            let d = (z * ny + y) * nx + lo[2];
            data[d..d + w].copy_from_slice(src.next().expect("extents checked"));
        }
    }
    Grid::new(base.shape(), data, base.spacing())
}

// ---------------------------------------------------------------------------
// Patch sampling
// ---------------------------------------------------------------------------

/// A case reduced to what one stage trains on.
#[derive(Debug, Clone)]
pub struct PreparedCase {
    pub id: String,
    pub image: Volume,
    pub target: LabelMap,
    foreground: Vec<usize>,
}

impl PreparedCase {
    pub fn new(id: impl Into<String>, image: Volume, target: LabelMap) -> Result<Self> {
        if !image.same_geometry(&target) {
            return Err(Error::Shape("image and target grids differ".into()));
        }
        let foreground = target
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != 0)
            .map(|(i, _)| i)
            .collect();
        Ok(PreparedCase {
            id: id.into(),
            image,
            target,
            foreground,
        })
    }

    pub fn has_foreground(&self) -> bool {
        !self.foreground.is_empty()
    }
}

/// Stage inputs from preprocessed cases with ground truth. Stage 2 works on
/// the ground-truth whole-LV ROI dilated by `roi_margin`.
pub fn prepare_case(case: &CaseRecord, stage: &StageConfig, roi_margin: usize) -> Result<PreparedCase> {
    let labels = case
        .labels
        .as_ref()
        .ok_or_else(|| Error::Invalid(format!("case {} has no ground truth", case.id)))?;
    if stage.stage == 1 {
        return PreparedCase::new(case.id.clone(), case.image.clone(), stage_targets(labels, stage));
    }
    let roi = compute_roi(&stage1_targets(labels), roi_margin);
    PreparedCase::new(
        case.id.clone(),
        crop(&case.image, &roi)?,
        stage2_targets(&crop(labels, &roi)?),
    )
}

/// One 2D training window. `top`/`left` may be negative when the patch is
/// larger than the slice; outside voxels are zero image, background target.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub z: usize,
    pub top: isize,
    pub left: isize,
    pub image: Vec<f32>,
    pub target: Vec<u8>,
}

impl Patch {
    pub fn has_foreground(&self) -> bool {
        self.target.iter().any(|&l| l != 0)
    }
}

fn window_start(rng: &mut ChaCha8Rng, n: usize, p: usize, must_cover: Option<usize>) -> isize {
    if p >= n {
        return -(((p - n) / 2) as isize);
    }
    let (mut lo, mut hi) = (0, n - p);
    if let Some(v) = must_cover {
        lo = lo.max((v + 1).saturating_sub(p));
        hi = hi.min(v);
    }
    rng.gen_range(lo..=hi) as isize
}

/// Draw number `draw` from `case`. Even draws on a case with foreground are
/// centred so that a random foreground voxel lies in the window.
pub fn sample_patch(case: &PreparedCase, patch_size: [usize; 2], draw: u64, rng: &mut ChaCha8Rng) -> Patch {
    let [nz, ny, nx] = case.image.shape();
    let [ph, pw] = patch_size;
    let (z, anchor) = if draw % 2 == 0 && case.has_foreground() {
        let v = case.foreground[rng.gen_range(0..case.foreground.len())];
        (v / (ny * nx), Some(((v / nx) % ny, v % nx)))
    } else {
        (rng.gen_range(0..nz), None)
    };
    let top = window_start(rng, ny, ph, anchor.map(|a| a.0));
    let left = window_start(rng, nx, pw, anchor.map(|a| a.1));
    let img = case.image.slice(z);
    let tgt = case.target.slice(z);
    let mut image = vec![0.0f32; ph * pw];
    let mut target = vec![0u8; ph * pw];
    for py in 0..ph {
        let y = top + py as isize;
        if y < 0 || y >= ny as isize {
            continue;
        }
        for px in 0..pw {
            let x = left + px as isize;
            if x < 0 || x >= nx as isize {
                continue;
            }
            let s = y as usize * nx + x as usize;
            image[py * pw + px] = img[s];
            target[py * pw + px] = tgt[s];
        }
    }
    Patch {
        z,
        top,
        left,
        image,
        target,
    }
}

/// `count` seeded draws from one preprocessed case.
pub fn sample_patches(case: &CaseRecord, stage: &StageConfig, roi_margin: usize, seed: u64, count: usize) -> Result<Vec<Patch>> {
    let prepared = prepare_case(case, stage, roi_margin)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count as u64)
        .map(|d| sample_patch(&prepared, stage.patch_size, d, &mut rng))
        .collect())
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub dice: f64,
    pub cross_entropy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub loss_trace: Vec<LossRecord>,
}

impl TrainOutcome {
    /// One JSON object per iteration.
    pub fn loss_trace_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.loss_trace {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Mean loss over the iterations of `epoch`.
    pub fn epoch_loss(&self, epoch: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .loss_trace
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| r.loss)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Trains one stage on every case whose fold differs from `fold`.
/// Cases must already be on the preprocessing grid and carry ground truth.
pub fn train_stage(cases: &[CaseRecord], stage: &StageConfig, fold: usize, roi_margin: usize, seed: u64) -> Result<TrainOutcome> {
    stage.validate()?;
    let mut train = Vec::new();
    for case in cases {
        let f = case
            .fold
            .ok_or_else(|| Error::Invalid(format!("case {} has no fold assignment", case.id)))?;
        if f != fold {
            train.push(prepare_case(case, stage, roi_margin)?);
        }
    }
    train_prepared(&train, stage, Some(fold), seed)
}

/// Training loop over already prepared cases.
pub fn train_prepared(cases: &[PreparedCase], stage: &StageConfig, fold: Option<usize>, seed: u64) -> Result<TrainOutcome> {
    stage.validate()?;
    if cases.is_empty() {
        return Err(Error::Invalid("no training cases".into()));
    }
    let mut params: UNetParams<f32> = init_params(stage.unet, derive_seed(seed, 1))?;
    let mut velocity = params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let [ph, pw] = stage.patch_size;
    let b = stage.batch_size;
    let classes = stage.unet.num_classes;
    let mut trace = Vec::with_capacity(stage.hyper.max_epochs * stage.iterations_per_epoch);
    let mut draw = 0u64;
    for epoch in 0..stage.hyper.max_epochs {
        let lr = poly_lr(epoch, &stage.hyper)?;
        for iteration in 0..stage.iterations_per_epoch {
            let mut image = Vec::with_capacity(b * ph * pw);
            let mut target = Vec::with_capacity(b * ph * pw);
            for _ in 0..b {
                let case = &cases[rng.gen_range(0..cases.len())];
                let p = sample_patch(case, stage.patch_size, draw, &mut rng);
                draw += 1;
                image.extend_from_slice(&p.image);
                target.extend_from_slice(&p.target);
            }
            let input = Tensor4::new([b, 1, ph, pw], image)?;
            let target = one_hot::<f32>(&target, b, classes, ph, pw)?;
            let (logits, cache) = forward(&params, &input)?;
            let probs = softmax(&logits);
            let out = total_loss(&probs, &target, stage.hyper.dice_epsilon)?;
            let record = LossRecord {
                epoch,
                iteration,
                lr,
                loss: out.loss as f64,
                dice: out.dice as f64,
                cross_entropy: out.cross_entropy as f64,
            };
            if !record.loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "stage {} loss at epoch {epoch} iteration {iteration}: dice {} ce {}",
                    stage.stage, record.dice, record.cross_entropy
                )));
            }
            let grads = backward(&params, &cache, &out.grad_logits)?;
            if !grads.params.all_finite() {
                return Err(Error::NonFinite(format!(
                    "stage {} gradient at epoch {epoch} iteration {iteration}",
                    stage.stage
                )));
            }
            sgd_step(&mut params, &grads.params, &mut velocity, stage.hyper.momentum, lr)?;
            trace.push(record);
        }
    }
    if !params.all_finite() {
        return Err(Error::NonFinite(format!("stage {} parameters after training", stage.stage)));
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            stage: stage.stage,
            fold,
            params,
        },
        loss_trace: trace,
    })
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Slice-wise softmax averaged over `checkpoints` in ascending fold order.
pub fn predict_stage(checkpoints: &[Checkpoint], image: &Volume, stage: &StageConfig) -> Result<ProbMap> {
    if checkpoints.is_empty() {
        return Err(Error::Checkpoint(format!("no stage {} checkpoints", stage.stage)));
    }
    for c in checkpoints {
        if c.stage != stage.stage || c.params.config != stage.unet {
            return Err(Error::Checkpoint(format!(
                "checkpoint (stage {}, fold {:?}) does not match the stage {} architecture",
                c.stage, c.fold, stage.stage
            )));
        }
    }
    let mut members: Vec<&Checkpoint> = checkpoints.iter().collect();
    members.sort_by_key(|c| c.fold.unwrap_or(usize::MAX));

    let [nz, ny, nx] = image.shape();
    let classes = stage.unet.num_classes;
    let input = Tensor4::new([nz, 1, ny, nx], image.data().to_vec())?;
    let (padded, record) = pad_to(&input, stage.patch_size[0], stage.patch_size[1], stage.unet.grid_multiple());
    let plane = ny * nx;
    let mut acc = vec![0.0f64; nz * classes * plane];
    for m in &members {
        let probs = crop_back(&softmax(&predict_logits(&m.params, &padded)?), &record);
        for (a, &p) in acc.iter_mut().zip(probs.data()) {
            *a += p as f64;
        }
    }
    // (Z, C, Y, X) -> (C, Z, Y, X)
    let k = members.len() as f64;
    let mut data = vec![0.0f32; nz * classes * plane];
    for z in 0..nz {
        for c in 0..classes {
            let src = &acc[(z * classes + c) * plane..(z * classes + c + 1) * plane];
            let dst = &mut data[(c * nz + z) * plane..(c * nz + z + 1) * plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s / k) as f32;
            }
        }
    }
    ProbMap::new(classes, image.shape(), data, image.spacing())
}

/// Final labels from the stage-1 map and the stage-2 map on the ROI.
pub fn compose_final(stage1: &ProbMap, stage2: &ProbMap, roi: &RoiSpec, mask: LesionMask) -> Result<LabelMap> {
    if stage1.shape() != roi.source_shape || stage2.shape() != roi.bbox.extents() || !roi.bbox.fits(roi.source_shape) {
        return Err(Error::Shape(format!(
            "stage 1 {:?}, stage 2 {:?}, roi {:?} over {:?}",
            stage1.shape(),
            stage2.shape(),
            roi.bbox,
            roi.source_shape
        )));
    }
    let base = stage1.argmax();
    let base = match stage1.classes() {
        2 => relabel(&base, |l| if l == 1 { MYOCARDIUM } else { 0 }),
        3 => base,
        c => return Err(Error::Shape(format!("stage 1 map has {c} classes"))),
    };
    if stage2.classes() != 3 {
        return Err(Error::Shape(format!("stage 2 map has {} classes", stage2.classes())));
    }
    let lesions = stage2.argmax();
    let mut data = base.data().to_vec();
    let [_, ny, nx] = roi.source_shape;
    let BBox { lo, hi } = roi.bbox;
    let mut li = 0;
    for z in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for x in lo[2]..=hi[2] {
                let l = lesions.data()[li];
                li += 1;
                let i = (z * ny + y) * nx + x;
                let allowed = match mask {
                    LesionMask::LvForeground => data[i] == LV_CAVITY || data[i] == MYOCARDIUM,
                    LesionMask::Myocardium => data[i] == MYOCARDIUM,
                };
                if l != 0 && allowed {
                    data[i] = if l == 1 { INFARCTION } else { NO_REFLOW };
                }
            }
        }
    }
    LabelMap::new(base.shape(), data, base.spacing())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseClass {
    Normal,
    Pathological,
}

impl CaseClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            CaseClass::Normal => "normal",
            CaseClass::Pathological => "pathological",
        }
    }

    pub fn from_flag(pathological: bool) -> Self {
        if pathological {
            CaseClass::Pathological
        } else {
            CaseClass::Normal
        }
    }
}

pub fn classify(labels: &LabelMap, rule: &ClassifierRule) -> CaseClass {
    CaseClass::from_flag(labels.count_labels(&rule.lesion_labels) >= rule.min_voxels)
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Final labels on the original image grid.
    pub labels: LabelMap,
    pub class: CaseClass,
    pub roi: RoiSpec,
    /// Final labels on the preprocessing grid.
    pub preprocessed_labels: LabelMap,
}

/// Full inference for one raw image.
pub fn run_pipeline(image: &Volume, stage1: &[Checkpoint], stage2: &[Checkpoint], config: &PipelineConfig) -> Result<PipelineOutput> {
    config.validate()?;
    let pre = preprocess_image(image, &config.preprocess)?;
    let p1 = predict_stage(stage1, &pre, &config.stage1)?;
    let roi = compute_roi(&p1.argmax(), config.roi_margin);
    let p2 = predict_stage(stage2, &crop(&pre, &roi)?, &config.stage2)?;
    let composed = compose_final(&p1, &p2, &roi, config.lesion_mask)?;
    let labels = resample_label_to(&composed, image.shape(), image.spacing())?;
    let class = classify(&labels, &config.classifier);
    Ok(PipelineOutput {
        labels,
        class,
        roi,
        preprocessed_labels: composed,
    })
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub image: String,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub pathological: Option<bool>,
    #[serde(default)]
    pub fold: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessingRecord {
    pub order: Vec<String>,
    pub target_spacing: Spacing,
    pub zscore_epsilon: f64,
}

impl From<&PreprocessConfig> for PreprocessingRecord {
    fn from(c: &PreprocessConfig) -> Self {
        PreprocessingRecord {
            order: PREPROCESS_ORDER.iter().map(|s| s.to_string()).collect(),
            target_spacing: c.target_spacing,
            zscore_epsilon: c.zscore_epsilon,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub phantom: Option<PhantomConfig>,
    #[serde(default)]
    pub pathological_fraction: Option<f64>,
    #[serde(default)]
    pub preprocessing: Option<PreprocessingRecord>,
    pub cases: Vec<CaseEntry>,
}

impl DatasetManifest {
    /// Manifest entries for `cases` with the default file names.
    pub fn entries(cases: &[CaseRecord], seeds: Option<&[u64]>) -> Vec<CaseEntry> {
        cases
            .iter()
            .enumerate()
            .map(|(i, c)| CaseEntry {
                id: c.id.clone(),
                image: format!("{}_image.miv", c.id),
                label: c.labels.as_ref().map(|_| format!("{}_label.miv", c.id)),
                seed: seeds.map(|s| s[i]),
                pathological: c.pathological,
                fold: c.fold,
            })
            .collect()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Invalid(e.to_string()))?;
    s.push('\n');
    write_file(path.as_ref(), s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Header(format!("{}: {e}", path.display())))
}

/// Writes MIV pairs named by `manifest` plus `manifest.json`.
pub fn write_dataset(dir: impl AsRef<Path>, manifest: &DatasetManifest, cases: &[CaseRecord]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if manifest.cases.len() != cases.len() {
        return Err(Error::Invalid("manifest and case list differ in length".into()));
    }
    for (entry, case) in manifest.cases.iter().zip(cases) {
        write_miv(&case.image, dir.join(&entry.image))?;
        if let (Some(name), Some(labels)) = (&entry.label, &case.labels) {
            write_miv(labels, dir.join(name))?;
        }
    }
    write_json(dir.join(MANIFEST_FILE), manifest)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<CaseRecord>)> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest = read_json(dir.join(MANIFEST_FILE))?;
    let mut cases = Vec::with_capacity(manifest.cases.len());
    for e in &manifest.cases {
        let image = read_volume(dir.join(&e.image))?;
        let labels = match &e.label {
            Some(name) => Some(read_labels(dir.join(name))?),
            None => None,
        };
        cases.push(CaseRecord::new(e.id.clone(), image, labels, e.fold, e.pathological)?);
    }
    Ok((manifest, cases))
}

/// `<dir>/<id>_pred.miv`.
pub fn prediction_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_pred.miv"))
}

pub const CLASSIFICATION_CSV_HEADER: &str = "case_id,prediction";

/// Classification CSV, rows sorted by case id.
pub fn classification_csv(rows: &[(String, CaseClass)]) -> String {
    let mut sorted: Vec<&(String, CaseClass)> = rows.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = String::from(CLASSIFICATION_CSV_HEADER);
    out.push('\n');
    for (id, c) in sorted {
        out.push_str(id);
        out.push(',');
        out.push_str(c.as_str());
        out.push('\n');
    }
    out
}

pub fn parse_classification_csv(text: &str) -> Result<Vec<(String, CaseClass)>> {
    let mut lines = text.lines();
    if lines.next() != Some(CLASSIFICATION_CSV_HEADER) {
        return Err(Error::Header(format!("expected header `{CLASSIFICATION_CSV_HEADER}`")));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (id, p) = l
                .split_once(',')
                .ok_or_else(|| Error::Header(format!("malformed row `{l}`")))?;
            let class = match p {
                "normal" => CaseClass::Normal,
                "pathological" => CaseClass::Pathological,
                _ => return Err(Error::Header(format!("unknown class `{p}`"))),
            };
            Ok((id.to_string(), class))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::label_mask;

    fn labels(shape: [usize; 3], data: Vec<u8>) -> LabelMap {
        LabelMap::new(shape, data, Spacing::TARGET).unwrap()
    }

    fn record(id: &str, pathological: Option<bool>) -> CaseRecord {
        let image = Volume::filled([1, 2, 2], 0.0, Spacing::TARGET).unwrap();
        CaseRecord::new(id, image, None, None, pathological).unwrap()
    }

    #[test]
    fn folds_are_balanced_stratified_and_seeded() {
        let cases: Vec<CaseRecord> = (0..10).map(|i| record(&format!("c{i}"), Some(i < 6))).collect();
        let folds = make_folds(&cases, 5, 3).unwrap();
        assert_eq!(folds, make_folds(&cases, 5, 3).unwrap());
        for f in 0..5 {
            let members: Vec<usize> = (0..10).filter(|&i| folds[i] == f).collect();
            assert_eq!(members.len(), 2);
            assert!(members.iter().any(|&i| i < 6));
        }
        assert!(make_folds(&cases[..4], 5, 3).is_err());
    }

    #[test]
    fn stage_targets_examples() {
        let l = labels([1, 1, 5], vec![0, 1, 2, 3, 4]);
        assert_eq!(stage1_targets(&l).data(), &[0, 1, 1, 1, 1]);
        assert_eq!(stage1_targets_3class(&l).data(), &[0, 1, 2, 2, 2]);
        assert_eq!(stage2_targets(&l).data(), &[0, 0, 0, 1, 2]);
        let bg = labels([1, 2, 2], vec![0; 4]);
        assert!(stage1_targets(&bg).data().iter().all(|&v| v == 0));
        let t = stage1_targets(&l);
        let m = label_mask(&l, &[1, 2, 3, 4]);
        assert!(t.data().iter().zip(m.data()).all(|(&a, &b)| (a == 1) == b));
    }

    #[test]
    fn roi_examples() {
        let pred = LabelMap::from_fn([3, 8, 8], Spacing::TARGET, |z, y, x| {
            (z == 1 && (2..=3).contains(&y) && (4..=6).contains(&x)) as u8
        })
        .unwrap();
        let roi = compute_roi(&pred, 1);
        assert_eq!(roi.bbox, BBox { lo: [1, 1, 3], hi: [1, 4, 7] });
        assert_eq!(compute_roi(&pred, 0).bbox, BBox { lo: [1, 2, 4], hi: [1, 3, 6] });
        let empty = labels([3, 8, 8], vec![0; 192]);
        assert_eq!(compute_roi(&empty, 5).bbox, BBox::full([3, 8, 8]));
    }

    #[test]
    fn crop_and_paste_round_trip() {
        let g = LabelMap::from_fn([3, 8, 8], Spacing::TARGET, |z, y, x| ((z + y + x) % 5) as u8).unwrap();
        let full = RoiSpec {
            bbox: BBox::full([3, 8, 8]),
            margin: 0,
            source_shape: [3, 8, 8],
        };
        assert_eq!(crop(&g, &full).unwrap(), g);
        let roi = RoiSpec {
            bbox: BBox { lo: [1, 2, 3], hi: [2, 5, 4] },
            margin: 0,
            source_shape: [3, 8, 8],
        };
        let c = crop(&g, &roi).unwrap();
        assert_eq!(c.shape(), [2, 4, 2]);
        assert_eq!(c.get(0, 0, 0), g.get(1, 2, 3));
        let zero = LabelMap::filled([3, 8, 8], 0, Spacing::TARGET).unwrap();
        let pasted = paste_back(&zero, &c, &roi).unwrap();
        assert_eq!(crop(&pasted, &roi).unwrap(), c);
        let bad = RoiSpec {
            bbox: BBox { lo: [0, 0, 0], hi: [3, 0, 0] },
            ..roi
        };
        assert!(crop(&g, &bad).is_err());
    }

    fn prepared(fg: bool) -> PreparedCase {
        let image = Volume::from_fn([3, 16, 16], Spacing::TARGET, |z, y, x| (z * 256 + y * 16 + x) as f32).unwrap();
        let target = LabelMap::from_fn([3, 16, 16], Spacing::TARGET, |z, y, x| (fg && z == 2 && y == 13 && x == 1) as u8).unwrap();
        PreparedCase::new("p", image, target).unwrap()
    }

    #[test]
    fn whole_slice_patches() {
        let case = prepared(true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in 0..10 {
            let p = sample_patch(&case, [16, 16], d, &mut rng);
            assert_eq!((p.top, p.left), (0, 0));
            assert_eq!(p.image, case.image.slice(p.z));
        }
        let p = sample_patch(&case, [20, 24], 1, &mut rng);
        assert_eq!((p.top, p.left), (-2, -4));
        assert_eq!(p.image[0], 0.0);
        assert_eq!(p.image[2 * 24 + 4], case.image.slice(p.z)[0]);
    }

    #[test]
    fn oversampling_rule() {
        let case = prepared(true);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let hits = (0..1000)
            .filter(|&d| sample_patch(&case, [8, 8], d, &mut rng).has_foreground())
            .count();
        assert!(hits >= 450, "{hits}");
        let bg = prepared(false);
        let zs: std::collections::BTreeSet<usize> = (0..200).map(|d| sample_patch(&bg, [8, 8], d, &mut rng).z).collect();
        assert_eq!(zs.len(), 3);
    }

    fn probmap(classes: usize, shape: [usize; 3], argmax: &[usize]) -> ProbMap {
        let n: usize = shape.iter().product();
        let mut data = vec![0.0f32; classes * n];
        for (v, &c) in argmax.iter().enumerate() {
            data[c * n + v] = 1.0;
        }
        ProbMap::new(classes, shape, data, Spacing::TARGET).unwrap()
    }

    #[test]
    fn compose_rules() {
        let shape = [1, 1, 4];
        let s1 = probmap(3, shape, &[0, 1, 2, 2]);
        let roi = RoiSpec {
            bbox: BBox { lo: [0, 0, 0], hi: [0, 0, 3] },
            margin: 0,
            source_shape: shape,
        };
        let none = probmap(3, shape, &[0, 0, 0, 0]);
        assert_eq!(compose_final(&s1, &none, &roi, LesionMask::LvForeground).unwrap().data(), &[0, 1, 2, 2]);
        let les = probmap(3, shape, &[1, 2, 1, 2]);
        assert_eq!(compose_final(&s1, &les, &roi, LesionMask::LvForeground).unwrap().data(), &[0, 4, 3, 4]);
        assert_eq!(compose_final(&s1, &les, &roi, LesionMask::Myocardium).unwrap().data(), &[0, 1, 3, 4]);
        let small = RoiSpec {
            bbox: BBox { lo: [0, 0, 2], hi: [0, 0, 3] },
            ..roi
        };
        let les2 = probmap(3, [1, 1, 2], &[1, 0]);
        assert_eq!(compose_final(&s1, &les2, &small, LesionMask::LvForeground).unwrap().data(), &[0, 1, 3, 2]);
        let binary = probmap(2, shape, &[0, 1, 1, 0]);
        assert_eq!(compose_final(&binary, &none, &roi, LesionMask::LvForeground).unwrap().data(), &[0, 2, 2, 0]);
        assert!(compose_final(&s1, &les2, &roi, LesionMask::LvForeground).is_err());
    }

    #[test]
    fn classification_boundary() {
        let rule = ClassifierRule::default();
        for (n, want) in [(0, CaseClass::Normal), (9, CaseClass::Normal), (10, CaseClass::Pathological)] {
            let l = LabelMap::from_fn([1, 4, 8], Spacing::TARGET, |_, y, x| if y * 8 + x < n { 3 + (x % 2) as u8 } else { 2 }).unwrap();
            assert_eq!(classify(&l, &rule), want);
        }
        let csv = classification_csv(&[("b".into(), CaseClass::Normal), ("a".into(), CaseClass::Pathological)]);
        assert_eq!(csv, "case_id,prediction\na,pathological\nb,normal\n");
        assert_eq!(parse_classification_csv(&csv).unwrap()[0].1, CaseClass::Pathological);
    }

    #[test]
    fn partial_stage_sections_keep_presets() {
        let c: PipelineConfig = serde_json::from_str(r#"{"stage2":{"batch_size":2,"hyper":{"lr0":0.1}}}"#).unwrap();
        assert_eq!(c.stage2.stage, 2);
        assert_eq!(c.stage2.batch_size, 2);
        assert_eq!(c.stage2.patch_size, StageConfig::stage2().patch_size);
        assert_eq!(c.stage2.hyper.lr0, 0.1);
        assert_eq!(c.stage2.hyper.momentum, 0.9);
        assert!(c.validate().is_ok());
        let c: PipelineConfig = serde_json::from_str(r#"{"stage1":{"hyper":{"max_epochs":3}}}"#).unwrap();
        assert_eq!(c.stage1.hyper.max_epochs, 3);
        assert_eq!(c.stage1.hyper.lr0, StageConfig::stage1().hyper.lr0);
        assert_eq!(c.stage1.hyper.momentum, 0.9);
        let d: PipelineConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(d, PipelineConfig::default());
    }

    #[test]
    fn stage_config_validation() {
        assert!(StageConfig::stage1().validate().is_ok());
        assert!(StageConfig::stage2().validate().is_ok());
        let mut s = StageConfig::stage2();
        s.unet.num_classes = 2;
        assert!(s.validate().is_err());
        let mut s = StageConfig::stage1();
        s.patch_size = [30, 32];
        assert!(s.validate().is_err());
        s.patch_size = [32, 32];
        s.batch_size = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn ensemble_of_identical_members() {
        let mut stage = StageConfig::stage1();
        stage.unet.base_channels = 2;
        let params = init_params::<f32>(stage.unet, 4).unwrap();
        let image = Volume::from_fn([2, 12, 10], Spacing::TARGET, |z, y, x| ((z + 2 * y + 3 * x) % 7) as f32 - 3.0).unwrap();
        let one = predict_stage(
            &[Checkpoint {
                stage: 1,
                fold: Some(0),
                params: params.clone(),
            }],
            &image,
            &stage,
        )
        .unwrap();
        let five: Vec<Checkpoint> = (0..5)
            .map(|f| Checkpoint {
                stage: 1,
                fold: Some(f),
                params: params.clone(),
            })
            .collect();
        let ens = predict_stage(&five, &image, &stage).unwrap();
        assert_eq!(ens.shape(), [2, 12, 10]);
        for (a, b) in one.data().iter().zip(ens.data()) {
            assert!((a - b).abs() <= 1e-7);
        }
        let wrong = Checkpoint {
            stage: 2,
            fold: None,
            params,
        };
        assert!(predict_stage(&[wrong], &image, &stage).is_err());
        assert!(predict_stage(&[], &image, &stage).is_err());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let mut stage = StageConfig::stage1();
        stage.unet.base_channels = 4;
        stage.patch_size = [16, 16];
        stage.batch_size = 2;
        stage.iterations_per_epoch = 4;
        stage.hyper.max_epochs = 6;
        stage.hyper.momentum = 0.9;
        stage.hyper.lr0 = 0.05;
        let target = LabelMap::from_fn([2, 16, 16], Spacing::TARGET, |_, y, x| {
            let d = ((y as f64 - 7.5).powi(2) + (x as f64 - 7.5).powi(2)).sqrt();
            if d < 3.0 { 1 } else if d < 5.0 { 2 } else { 0 }
        })
        .unwrap();
        let image = target.map(|&l| [0.0f32, 2.0, -1.0][l as usize]).unwrap();
        let case = PreparedCase::new("c", image, target).unwrap();
        let a = train_prepared(std::slice::from_ref(&case), &stage, Some(0), 11).unwrap();
        let b = train_prepared(std::slice::from_ref(&case), &stage, Some(0), 11).unwrap();
        assert_eq!(a.loss_trace_lines(), b.loss_trace_lines());
        assert_eq!(a.loss_trace.len(), 24);
        assert!(a.epoch_loss(5).unwrap() < a.epoch_loss(0).unwrap());
    }
}
