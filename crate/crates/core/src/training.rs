//! Dataset preparation, splitting, augmentation and the training loop.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, read_weights, write_weights, AdamState, Graph, Tensor};
use crate::counting::{count_from_density, count_from_gaussian, CountResult};
use crate::error::{Error, Result};
use crate::geometry::{center_to_origin, read_point_cloud, PointCloud};
use crate::gnet::{build_model, GNetConfig, GNetModel};
use crate::projection::{
    circular_shift_plane, crop_roi, fill_holes_cubic, normalize_input_channels, project_equirectangular,
    ProjectionConfig, RasterGrid,
};
use crate::synthbench::dataset_files;
use crate::scalar::Scalar;
use crate::targetmaps::{
    density_map, gaussian_map, read_annotation, DensityMapConfig, GaussianMapConfig, KeypointSet, MapKind, SigmaMode, TargetMap,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    GaussianFixed,
    GaussianAdaptive,
    Density,
}

impl TargetMode {
    pub const ALL: [TargetMode; 3] = [TargetMode::GaussianFixed, TargetMode::GaussianAdaptive, TargetMode::Density];

    pub fn default_loss(self) -> LossKind {
        match self {
            TargetMode::Density => LossKind::Mse,
            _ => LossKind::Bce,
        }
    }

    /// Learning rates of the reference training setup.
    pub fn default_lr(self) -> f64 {
        match self {
            TargetMode::Density => 1e-5,
            _ => 1e-6,
        }
    }

    /// Method name used in evaluation reports.
    pub fn method_name(self) -> &'static str {
        match self {
            TargetMode::GaussianFixed => "gnet",
            TargetMode::GaussianAdaptive => "gnet_a",
            TargetMode::Density => "density",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub target_mode: TargetMode,
    pub loss: LossKind,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    /// Relative improvement of the best validation loss that resets patience.
    pub min_delta: f64,
    pub augment: bool,
    pub seed: u64,
    pub split_fraction: f64,
    /// Share of the training split held out for plateau detection.
    pub val_fraction: f64,
}

impl TrainConfig {
    pub fn for_mode(target_mode: TargetMode) -> Self {
        Self {
            target_mode,
            loss: target_mode.default_loss(),
            lr: target_mode.default_lr(),
            batch_size: 4,
            max_epochs: 200,
            plateau_patience: 20,
            min_delta: 0.005,
            augment: true,
            seed: 0,
            split_fraction: 0.8,
            val_fraction: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad(format!("split_fraction must lie in (0, 1), got {}", self.split_fraction));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive".into());
        }
        if !(self.min_delta >= 0.0 && self.min_delta < 1.0) {
            return bad(format!("min_delta must lie in [0, 1), got {}", self.min_delta));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_mode(TargetMode::GaussianAdaptive)
    }
}

/// One training example: network input plus targets for every regime.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    /// `3 x H x W`.
    pub input: Tensor<T>,
    pub keypoints: KeypointSet,
    pub gaussian_fixed: TargetMap<T>,
    pub gaussian_adaptive: TargetMap<T>,
    pub density: TargetMap<T>,
}

/// Target map settings used to build samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSettings {
    pub gaussian: GaussianMapConfig,
    pub density: DensityMapConfig,
}

impl Default for MapSettings {
    fn default() -> Self {
        Self {
            gaussian: GaussianMapConfig::default(),
            density: DensityMapConfig::default(),
        }
    }
}

impl<T: Scalar> Sample<T> {
    pub fn new(input: Tensor<T>, keypoints: KeypointSet, maps: &MapSettings) -> Result<Self> {
        let (c, h, w) = match input.shape() {
            &[c, h, w] => (c, h, w),
            s => return Err(Error::shape(format!("sample input must be C x H x W, got {s:?}"))),
        };
        if c == 0 || (h, w) != (keypoints.height(), keypoints.width()) {
            return Err(Error::shape(format!(
                "input {h}x{w} does not match keypoint raster {}x{}",
                keypoints.height(),
                keypoints.width()
            )));
        }
        let fixed = GaussianMapConfig { mode: SigmaMode::Fixed, ..maps.gaussian };
        let adaptive = GaussianMapConfig { mode: SigmaMode::Adaptive, ..maps.gaussian };
        Ok(Self {
            gaussian_fixed: gaussian_map(&keypoints, &fixed)?,
            gaussian_adaptive: gaussian_map(&keypoints, &adaptive)?,
            density: density_map(&keypoints, &maps.density)?,
            input,
            keypoints,
        })
    }

    pub fn target(&self, mode: TargetMode) -> &TargetMap<T> {
        match mode {
            TargetMode::GaussianFixed => &self.gaussian_fixed,
            TargetMode::GaussianAdaptive => &self.gaussian_adaptive,
            TargetMode::Density => &self.density,
        }
    }

    pub fn height(&self) -> usize {
        self.keypoints.height()
    }

    pub fn width(&self) -> usize {
        self.keypoints.width()
    }
}

/// Centre, project, fill holes and crop a cloud.
pub fn prepare_raster<T: Scalar>(cloud: &PointCloud<T>, proj: &ProjectionConfig) -> Result<RasterGrid<T>> {
    let grid = project_equirectangular(&center_to_origin(cloud)?, proj)?;
    crop_roi(&fill_holes_cubic(&grid, proj.wrap_azimuth)?, proj)
}

/// [`prepare_raster`] followed by input normalisation.
pub fn prepare_input<T: Scalar>(cloud: &PointCloud<T>, proj: &ProjectionConfig) -> Result<Tensor<T>> {
    normalize_input_channels(&prepare_raster(cloud, proj)?)
}

/// Reads an annotation and checks it against the cropped raster size.
pub fn load_keypoints(path: &Path, proj: &ProjectionConfig) -> Result<KeypointSet> {
    let ann = read_annotation(path)?;
    let (h, w) = (proj.height(), proj.width());
    let (start, end) = proj.roi_rows(h);
    if (ann.height, ann.width) != (end - start, w) || (ann.delta - proj.delta).abs() > 1e-12 {
        return Err(Error::Format {
            what: "annotation",
            msg: format!(
                "{}: {}x{} at delta {} does not match the {}x{} raster at delta {}",
                path.display(),
                ann.height,
                ann.width,
                ann.delta,
                end - start,
                w,
                proj.delta
            ),
        });
    }
    ann.keypoints()
}

/// Loads every `(mesh, annotation)` pair of a dataset directory, named by
/// file stem and in name order.
pub fn load_dataset<T: Scalar>(
    dir: &Path,
    proj: &ProjectionConfig,
    maps: &MapSettings,
) -> Result<Vec<(String, Sample<T>)>> {
    use rayon::prelude::*;
    let files = dataset_files(dir)?;
    if files.is_empty() {
        return Err(Error::EmptyInput("dataset directory has no mesh/annotation pairs"));
    }
    files
        .par_iter()
        .map(|(mesh, ann)| {
            let name = mesh.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let cloud = read_point_cloud::<T>(mesh)?;
            let kps = load_keypoints(ann, proj)?;
            Ok((name, build_sample(&cloud, kps, proj, maps)?))
        })
        .collect()
}

pub fn build_sample<T: Scalar>(
    cloud: &PointCloud<T>,
    keypoints: KeypointSet,
    proj: &ProjectionConfig,
    maps: &MapSettings,
) -> Result<Sample<T>> {
    Sample::new(prepare_input(cloud, proj)?, keypoints, maps)
}

pub const MIN_DATASET: usize = 5;

/// Deterministic shuffled split; the train share is `round(n * fraction)`.
pub fn split_dataset<S: Clone>(samples: &[S], fraction: f64, seed: u64) -> Result<(Vec<S>, Vec<S>)> {
    if samples.len() < MIN_DATASET {
        return Err(Error::DatasetTooSmall { got: samples.len(), need: MIN_DATASET });
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let idx = split_indices(samples.len(), fraction, seed);
    let pick = |r: &[usize]| r.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    Ok((pick(&idx.0), pick(&idx.1)))
}

/// Index form of [`split_dataset`]; both halves are sorted.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn shift_map<T: Scalar>(map: &TargetMap<T>, offset: usize) -> TargetMap<T> {
    TargetMap {
        values: circular_shift_plane(&map.values, map.width, offset),
        ..map.clone()
    }
}

/// Rotates the sample `offset` columns about the azimuth axis.
pub fn shift_sample<T: Scalar>(s: &Sample<T>, offset: usize) -> Sample<T> {
    let (h, w) = (s.height(), s.width());
    let c = s.input.shape()[0];
    let mut data = Vec::with_capacity(s.input.len());
    for ch in 0..c {
        data.extend(circular_shift_plane(&s.input.data()[ch * h * w..(ch + 1) * h * w], w, offset));
    }
    Sample {
        input: Tensor::new(vec![c, h, w], data).expect("same shape"),
        keypoints: s.keypoints.shifted(offset),
        gaussian_fixed: shift_map(&s.gaussian_fixed, offset),
        gaussian_adaptive: shift_map(&s.gaussian_adaptive, offset),
        density: shift_map(&s.density, offset),
    }
}

/// Random horizontal translation by an offset drawn from `[0, W)`.
pub fn augment_sample<T: Scalar, R: Rng + ?Sized>(s: &Sample<T>, rng: &mut R) -> Sample<T> {
    let offset = rng.gen_range(0..s.width());
    shift_sample(s, offset)
}

/// Padding applied to reach a size the network accepts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn for_shape(h: usize, w: usize, divisor: usize) -> Self {
        let split = |n: usize| {
            let extra = n.div_ceil(divisor) * divisor - n;
            (extra / 2, extra - extra / 2)
        };
        let (top, bottom) = split(h);
        let (left, right) = split(w);
        Self { top, bottom, left, right }
    }

    pub fn is_none(&self) -> bool {
        *self == Self::default()
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Mirror-pads the two trailing axes of a `... x H x W` tensor.
pub fn reflect_pad<T: Scalar>(x: &Tensor<T>, pad: Padding) -> Result<Tensor<T>> {
    let rank = x.rank();
    if rank < 2 {
        return Err(Error::shape(format!("reflect_pad needs at least 2 axes, got {:?}", x.shape())));
    }
    let (h, w) = (x.shape()[rank - 2], x.shape()[rank - 1]);
    if pad.top.max(pad.bottom) >= h.max(2) || pad.left.max(pad.right) >= w.max(2) {
        return Err(Error::shape(format!("padding {pad:?} too large for {h}x{w}")));
    }
    let (ph, pw) = (h + pad.top + pad.bottom, w + pad.left + pad.right);
    let planes = x.len() / (h * w);
    let cols: Vec<usize> = (0..pw).map(|c| reflect(c as isize - pad.left as isize, w)).collect();
    let mut out = Vec::with_capacity(planes * ph * pw);
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for r in 0..ph {
            let sr = reflect(r as isize - pad.top as isize, h);
            out.extend(cols.iter().map(|&c| src[sr * w + c]));
        }
    }
    let mut shape = x.shape().to_vec();
    shape[rank - 2] = ph;
    shape[rank - 1] = pw;
    Tensor::new(shape, out)
}

fn stack<T: Scalar>(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let shape = items[0].shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * items[0].len());
    for t in items {
        if t.shape() != shape.as_slice() {
            return Err(Error::shape(format!("cannot batch {:?} with {:?}", t.shape(), shape)));
        }
        data.extend_from_slice(t.data());
    }
    let mut full = vec![items.len()];
    full.extend(shape);
    Tensor::new(full, data)
}

fn target_tensor<T: Scalar>(m: &TargetMap<T>) -> Tensor<T> {
    Tensor::new(vec![1, m.height, m.width], m.values.clone()).expect("map shape")
}

/// Loss of one batch; runs backward and collects gradients when training.
fn batch_loss<T: Scalar>(
    model: &mut GNetModel<T>,
    batch: &[&Sample<T>],
    mode: TargetMode,
    loss: LossKind,
    training: bool,
) -> Result<f64> {
    let (h, w) = (batch[0].height(), batch[0].width());
    let pad = Padding::for_shape(h, w, model.config().divisor());
    let inputs: Vec<Tensor<T>> = batch.iter().map(|s| reflect_pad(&s.input, pad)).collect::<Result<_>>()?;
    let targets: Vec<Tensor<T>> = batch.iter().map(|s| target_tensor(s.target(mode))).collect();
    let x = stack(&inputs.iter().collect::<Vec<_>>())?;
    let y = stack(&targets.iter().collect::<Vec<_>>())?;
    let mut g = Graph::new();
    let xi = g.input(x);
    let yi = g.input(y);
    let (out, bindings) = model.forward(&mut g, xi, training)?;
    let out = if pad.is_none() { out } else { g.crop2d(out, pad.top, pad.left, h, w)? };
    let l = match loss {
        LossKind::Bce => g.bce_loss(out, yi)?,
        LossKind::Mse => g.mse_loss(out, yi)?,
    };
    let value = g.value(l).data()[0].as_f64();
    if training && value.is_finite() {
        g.backward(l)?;
        model.collect_grads(&mut g, &bindings);
    }
    Ok(value)
}

/// Mean per-sample loss in inference mode.
pub fn evaluate_loss<T: Scalar>(
    model: &mut GNetModel<T>,
    samples: &[Sample<T>],
    mode: TargetMode,
    loss: LossKind,
    batch_size: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample<T>> = chunk.iter().collect();
        total += batch_loss(model, &refs, mode, loss, false)? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Everything needed to continue training or to reproduce a prediction.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: GNetConfig,
    pub weights: Vec<(String, Tensor<T>)>,
    pub optimizer: AdamState<T>,
    /// Last completed epoch (1-based); 0 before training.
    pub epoch: usize,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub stale_epochs: usize,
    pub history: Vec<EpochRecord>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn initial(model: &GNetModel<T>, lr: f64) -> Self {
        Self {
            config: *model.config(),
            weights: model.named_tensors(),
            optimizer: AdamState::new(model.params(), lr),
            epoch: 0,
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
            stale_epochs: 0,
            history: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Weights with the lowest validation loss.
    pub best: Checkpoint<T>,
    /// State after the final epoch, for resuming.
    pub last: Checkpoint<T>,
    pub stopped_early: bool,
}

impl<T> TrainOutcome<T> {
    pub fn history(&self) -> &[EpochRecord] {
        &self.last.history
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Runs Adam over shuffled mini-batches until the validation loss stops
/// improving by more than `min_delta` for `plateau_patience` epochs, or
/// `max_epochs` is reached. `resume` continues from a saved checkpoint; the
/// batch order of each epoch depends only on the seed and the epoch index.
/// `on_epoch` sees every completed epoch.
pub fn train<T: Scalar>(
    model: &mut GNetModel<T>,
    train_set: &[Sample<T>],
    val_set: &[Sample<T>],
    cfg: &TrainConfig,
    resume: Option<Checkpoint<T>>,
    mut on_epoch: impl FnMut(&EpochRecord, &GNetModel<T>),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    if val_set.is_empty() {
        return Err(Error::EmptyInput("validation set"));
    }
    let (h, w) = (train_set[0].height(), train_set[0].width());
    if train_set.iter().chain(val_set).any(|s| (s.height(), s.width()) != (h, w)) {
        return Err(Error::shape("all samples must share one raster size"));
    }
    let pad = Padding::for_shape(h, w, model.config().divisor());
    model.config().check_input(h + pad.top + pad.bottom, w + pad.left + pad.right)?;

    let mut state = match resume {
        Some(ck) => {
            if ck.config != *model.config() {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint was saved from {:?}, model is {:?}",
                    ck.config,
                    model.config()
                )));
            }
            model.load_named_tensors(&ck.weights)?;
            ck
        }
        None => Checkpoint::initial(model, cfg.lr),
    };
    state.optimizer.lr = cfg.lr;
    let mut best = state.clone();
    if state.best_epoch > 0 {
        // weights of the best epoch are not carried by a resumed state
        best.weights = Vec::new();
    }
    let mut stopped_early = false;
    while state.epoch < cfg.max_epochs {
        if state.stale_epochs >= cfg.plateau_patience && state.epoch > 0 {
            stopped_early = true;
            break;
        }
        let epoch = state.epoch + 1;
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let owned: Vec<Sample<T>>;
            let refs: Vec<&Sample<T>> = if cfg.augment {
                owned = chunk.iter().map(|&i| augment_sample(&train_set[i], &mut rng)).collect();
                owned.iter().collect()
            } else {
                chunk.iter().map(|&i| &train_set[i]).collect()
            };
            let l = batch_loss(model, &refs, cfg.target_mode, cfg.loss, true)?;
            if !l.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            adam_step(model.params_mut(), &mut state.optimizer)?;
            total += l * chunk.len() as f64;
        }
        let train_loss = total / train_set.len() as f64;
        let val_loss = evaluate_loss(model, val_set, cfg.target_mode, cfg.loss, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let record = EpochRecord { epoch, train_loss, val_loss };
        state.history.push(record);
        state.epoch = epoch;
        if val_loss < state.best_val_loss * (1.0 - cfg.min_delta) || state.best_epoch == 0 {
            state.best_val_loss = val_loss;
            state.best_epoch = epoch;
            state.stale_epochs = 0;
        } else {
            state.stale_epochs += 1;
        }
        state.weights = model.named_tensors();
        if state.best_epoch == epoch {
            best = state.clone();
        }
        on_epoch(&record, model);
    }
    if best.weights.is_empty() {
        best = state.clone();
    }
    let last = state;
    best.history = last.history.clone();
    Ok(TrainOutcome { best, last, stopped_early })
}

/// Predicted map plus the padding that was applied and cropped away.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub map: TargetMap<T>,
    pub padding: Padding,
}

/// Runs the model on a `3 x H x W` input, mirror-padding sizes the network
/// cannot take and cropping the output back.
pub fn predict<T: Scalar>(model: &mut GNetModel<T>, input: &Tensor<T>, kind: MapKind) -> Result<Prediction<T>> {
    let (h, w) = match input.shape() {
        &[_, h, w] => (h, w),
        s => return Err(Error::shape(format!("prediction input must be C x H x W, got {s:?}"))),
    };
    let pad = Padding::for_shape(h, w, model.config().divisor());
    let x = reflect_pad(input, pad)?;
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let y = model.infer(x.reshape(shape)?)?;
    let pw = w + pad.left + pad.right;
    let mut values = Vec::with_capacity(h * w);
    for r in pad.top..pad.top + h {
        values.extend_from_slice(&y.data()[r * pw + pad.left..r * pw + pad.left + w]);
    }
    Ok(Prediction {
        map: TargetMap { height: h, width: w, values, kind },
        padding: pad,
    })
}

/// Counts a predicted map with the rule matching its training regime.
pub fn count_prediction<T: Scalar>(map: &TargetMap<T>, mode: TargetMode, p_t: f64, wrap: bool) -> CountResult {
    let mut res = match mode {
        TargetMode::Density => count_from_density(map).0,
        _ => count_from_gaussian(map, p_t, 1, wrap),
    };
    res.method = mode.method_name().into();
    if mode == TargetMode::Density {
        res.p_t = None;
    }
    res
}

pub fn map_kind(mode: TargetMode) -> MapKind {
    match mode {
        TargetMode::Density => MapKind::Density,
        _ => MapKind::Gaussian,
    }
}

/// Sidecar of a saved checkpoint; tensors live in SMW1 files next to it.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    model: GNetConfig,
    epoch: usize,
    best_val_loss: f64,
    best_epoch: usize,
    stale_epochs: usize,
    history: Vec<EpochRecord>,
    adam_lr: f64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    adam_step: u64,
}

/// Writes `<name>.smw` (weights), `<name>.adam.smw` (moments) and
/// `<name>.json` into `dir`.
pub fn save_checkpoint<T: Scalar>(dir: &Path, name: &str, ck: &Checkpoint<T>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries: Vec<(&str, &Tensor<T>)> = ck.weights.iter().map(|(n, t)| (n.as_str(), t)).collect();
    write_weights(&dir.join(format!("{name}.smw")), &entries)?;
    let moments: Vec<(String, Tensor<T>)> = ck
        .optimizer
        .m
        .iter()
        .chain(&ck.optimizer.v)
        .enumerate()
        .map(|(i, v)| (format!("{}{}", if i < ck.optimizer.m.len() { "m" } else { "v" }, i), Tensor::new(vec![v.len()], v.clone()).expect("flat")))
        .collect();
    let entries: Vec<(&str, &Tensor<T>)> = moments.iter().map(|(n, t)| (n.as_str(), t)).collect();
    write_weights(&dir.join(format!("{name}.adam.smw")), &entries)?;
    let meta = CheckpointMeta {
        model: ck.config,
        epoch: ck.epoch,
        best_val_loss: ck.best_val_loss,
        best_epoch: ck.best_epoch,
        stale_epochs: ck.stale_epochs,
        history: ck.history.clone(),
        adam_lr: ck.optimizer.lr,
        adam_beta1: ck.optimizer.beta1,
        adam_beta2: ck.optimizer.beta2,
        adam_eps: ck.optimizer.eps,
        adam_step: ck.optimizer.step,
    };
    let path = dir.join(format!("{name}.json"));
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint<T: Scalar>(dir: &Path, name: &str) -> Result<Checkpoint<T>> {
    let path = dir.join(format!("{name}.json"));
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let weights = read_weights(&dir.join(format!("{name}.smw")))?;
    let moments = read_weights::<T>(&dir.join(format!("{name}.adam.smw")))?;
    if moments.len() % 2 != 0 {
        return Err(Error::Format { what: "optimizer state", msg: "odd number of moment tensors".into() });
    }
    let half = moments.len() / 2;
    let (m, v): (Vec<_>, Vec<_>) = moments.into_iter().enumerate().partition(|(i, _)| *i < half);
    let flat = |xs: Vec<(usize, (String, Tensor<T>))>| xs.into_iter().map(|(_, (_, t))| t.into_data()).collect();
    Ok(Checkpoint {
        config: meta.model,
        weights,
        optimizer: AdamState {
            lr: meta.adam_lr,
            beta1: meta.adam_beta1,
            beta2: meta.adam_beta2,
            eps: meta.adam_eps,
            step: meta.adam_step,
            m: flat(m),
            v: flat(v),
        },
        epoch: meta.epoch,
        best_val_loss: meta.best_val_loss,
        best_epoch: meta.best_epoch,
        stale_epochs: meta.stale_epochs,
        history: meta.history,
    })
}

/// Rebuilds the model a checkpoint was saved from and loads its weights.
pub fn load_model<T: Scalar>(dir: &Path, name: &str) -> Result<(GNetModel<T>, Checkpoint<T>)> {
    let ck = load_checkpoint::<T>(dir, name)?;
    let mut model = build_model(ck.config, 0)?;
    model.load_named_tensors(&ck.weights)?;
    Ok((model, ck))
}

/// `epoch,train_loss,val_loss` with shortest round-trip float formatting.
pub fn write_metrics_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("epoch,train_loss,val_loss\n");
    for r in history {
        text.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_loss));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_sample(seed: u64, h: usize, w: usize) -> Sample<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<(f64, f64)> = (0..6)
            .map(|_| (rng.gen_range(2.0..h as f64 - 2.0), rng.gen_range(0.0..w as f64)))
            .collect();
        let kps = KeypointSet::new(h, w, pts).unwrap();
        let input = Tensor::uniform(&[3, h, w], 0.0, 1.0, &mut rng);
        Sample::new(input, kps, &MapSettings::default()).unwrap()
    }

    #[test]
    fn split_sizes() {
        let v: Vec<usize> = (0..781).collect();
        let (tr, te) = split_dataset(&v, 0.8, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (625, 156));
        let (tr, te) = split_dataset(&(0..10).collect::<Vec<_>>(), 0.8, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        assert!(matches!(
            split_dataset(&[1, 2, 3, 4], 0.8, 0),
            Err(Error::DatasetTooSmall { got: 4, need: 5 })
        ));
    }

    #[test]
    fn split_is_deterministic_disjoint_and_exhaustive() {
        let v: Vec<usize> = (0..50).collect();
        let a = split_dataset(&v, 0.8, 9).unwrap();
        assert_eq!(a, split_dataset(&v, 0.8, 9).unwrap());
        assert_ne!(a, split_dataset(&v, 0.8, 10).unwrap());
        let mut all: Vec<usize> = a.0.iter().chain(&a.1).copied().collect();
        all.sort_unstable();
        assert_eq!(all, v);
    }

    #[test]
    fn zero_shift_is_identity_and_count_is_kept() {
        let s = toy_sample(0, 16, 40);
        assert_eq!(shift_sample(&s, 0), s);
        let shifted = augment_sample(&s, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(shifted.keypoints.len(), s.keypoints.len());
    }

    #[test]
    fn shifted_targets_match_regenerated_targets() {
        let s = toy_sample(3, 20, 48);
        for offset in [1, 7, 30, 47] {
            let shifted = shift_sample(&s, offset);
            let regenerated = Sample::new(shifted.input.clone(), shifted.keypoints.clone(), &MapSettings::default()).unwrap();
            assert_eq!(shifted, regenerated, "offset {offset}");
        }
    }

    #[test]
    fn density_targets_sum_to_count() {
        let s = toy_sample(5, 24, 60);
        assert!((s.density.sum() - 6.0).abs() < 6e-6);
    }

    #[test]
    fn padding_arithmetic_and_reflection() {
        assert_eq!(Padding::for_shape(96, 360, 16), Padding { top: 0, bottom: 0, left: 4, right: 4 });
        assert!(Padding::for_shape(192, 720, 16).is_none());
        let x = Tensor::new(vec![1, 2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = reflect_pad(&x, Padding { top: 1, bottom: 0, left: 2, right: 1 }).unwrap();
        assert_eq!(p.shape(), &[1, 3, 6]);
        assert_eq!(&p.data()[6..12], &[3.0, 2.0, 1.0, 2.0, 3.0, 2.0]);
        assert_eq!(&p.data()[0..6], &[6.0, 5.0, 4.0, 5.0, 6.0, 5.0]);
    }

    fn tiny_model() -> GNetModel<f32> {
        build_model(GNetConfig { base_width: 4, ..GNetConfig::default() }, 1).unwrap()
    }

    #[test]
    fn predict_crops_padding() {
        let mut m = tiny_model();
        let s = toy_sample(1, 16, 40);
        let p = predict(&mut m, &s.input, MapKind::Gaussian).unwrap();
        assert_eq!((p.map.height, p.map.width), (16, 40));
        assert_eq!(p.padding, Padding { top: 0, bottom: 0, left: 4, right: 4 });
        assert!(p.map.values.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(predict(&mut m, &s.input, MapKind::Gaussian).unwrap(), p);
    }

    #[test]
    fn zero_learning_rate_keeps_loss_flat() {
        let mut m = tiny_model();
        let data: Vec<Sample<f32>> = (0..3).map(|i| toy_sample(i, 16, 32)).collect();
        let cfg = TrainConfig { lr: 0.0, max_epochs: 3, augment: false, ..TrainConfig::for_mode(TargetMode::GaussianFixed) };
        let out = train(&mut m, &data, &data[..1], &cfg, None, |_, _| {}).unwrap();
        let h = out.history();
        assert_eq!(h.len(), 3);
        for r in h {
            assert!((r.train_loss - h[0].train_loss).abs() < 1e-6 * h[0].train_loss);
        }
    }

    #[test]
    fn plateau_stops_training() {
        let mut m = tiny_model();
        let data = vec![toy_sample(0, 16, 32)];
        let cfg = TrainConfig { lr: 0.0, max_epochs: 50, plateau_patience: 2, ..TrainConfig::for_mode(TargetMode::GaussianFixed) };
        let out = train(&mut m, &data, &data, &cfg, None, |_, _| {}).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.history().len(), 3);
        assert_eq!(out.best.epoch, 1);
    }

    #[test]
    fn resumed_training_matches_uninterrupted_run() {
        let data: Vec<Sample<f32>> = (0..3).map(|i| toy_sample(i, 16, 32)).collect();
        let cfg = TrainConfig { lr: 1e-3, max_epochs: 3, batch_size: 2, ..TrainConfig::for_mode(TargetMode::GaussianAdaptive) };
        let mut a = tiny_model();
        let full = train(&mut a, &data, &data[..1], &cfg, None, |_, _| {}).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut b = tiny_model();
        let first = train(&mut b, &data, &data[..1], &TrainConfig { max_epochs: 2, ..cfg }, None, |_, _| {}).unwrap();
        save_checkpoint(dir.path(), "last", &first.last).unwrap();
        let ck = load_checkpoint(dir.path(), "last").unwrap();
        let mut c = tiny_model();
        let resumed = train(&mut c, &data, &data[..1], &cfg, Some(ck), |_, _| {}).unwrap();
        assert_eq!(resumed.history(), full.history());
        assert_eq!(c.named_tensors(), a.named_tensors());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny_model();
        let data = vec![toy_sample(2, 16, 32)];
        let cfg = TrainConfig { lr: 1e-3, max_epochs: 3, ..TrainConfig::for_mode(TargetMode::Density) };
        let out = train(&mut m, &data, &data, &cfg, None, |_, _| {}).unwrap();
        save_checkpoint(dir.path(), "best", &out.best).unwrap();
        let ck: Checkpoint<f32> = load_checkpoint(dir.path(), "best").unwrap();
        assert_eq!(ck.weights, out.best.weights);
        assert_eq!(ck.optimizer.m, out.best.optimizer.m);
        assert_eq!(ck.optimizer.v, out.best.optimizer.v);
        assert_eq!(ck.optimizer.step, out.best.optimizer.step);
        assert_eq!(ck.history, out.best.history);
        assert_eq!(ck.best_val_loss.to_bits(), out.best.best_val_loss.to_bits());
        assert_eq!(
            (ck.config, ck.epoch, ck.best_epoch, ck.stale_epochs),
            (out.best.config, out.best.epoch, out.best.best_epoch, out.best.stale_epochs)
        );
        let (mut fresh, _) = load_model::<f32>(dir.path(), "best").unwrap();
        m.load_named_tensors(&out.best.weights).unwrap();
        let a = predict(&mut m, &data[0].input, MapKind::Density).unwrap();
        let b = predict(&mut fresh, &data[0].input, MapKind::Density).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { lr: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { split_fraction: 1.0, ..Default::default() }.validate().is_err());
        assert_eq!(TrainConfig::for_mode(TargetMode::Density).loss, LossKind::Mse);
        assert_eq!(TrainConfig::for_mode(TargetMode::GaussianFixed).lr, 1e-6);
    }
}
