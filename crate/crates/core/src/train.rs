//! Training loop, evaluation and checkpoints.
//!
//! Everything random in a run is derived from `seed`: stream 0 initializes
//! the model, stream 1 splits sequences into train and validation, stream 2
//! drives batch order and window cropping. A checkpoint stores the optimizer
//! moments, SWA average and stream position, so a resumed run continues
//! bit-identically.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::asl::{f1_scores, AslConfig, F1Report};
use crate::error::{Error, Result};
use crate::hga::RoiSpec;
use crate::model::{batch_loss_and_grad, predict, DataDims, Model, ModelConfig, ModelKind, Window};
use crate::optim::{adamw_step, clip_grad_norm, lr_at, AdamConfig, AdamState, Schedule, SwaState};
use crate::params::Parameters;
use crate::rng::{Rng, RngState};
use crate::synth::Dataset;

pub const CHECKPOINT_VERSION: u32 = 1;
const CKPT_MAGIC: &[u8; 8] = b"AGSSMCKP";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Asl,
    Bce,
    Focal,
}

/// Flat key-value training configuration; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: Option<u64>,
    pub lr_peak: f64,
    /// Kept for configuration compatibility; no pretrained backbone here.
    pub lr_foundation: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub clip_len: usize,
    pub swa_start_epoch: usize,
    pub grad_clip: f64,
    pub val_fraction: f64,
    pub threshold: f64,
    pub loss: LossKind,
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub margin: f64,
    pub clamp_eps: f64,
    pub focal_gamma: f64,
    pub model: ModelKind,
    pub d_model: usize,
    pub state_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub region_dim: usize,
    /// Optional RoI definition file; the built-in 7-region layout otherwise.
    pub roi_file: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let asl = AslConfig::default();
        Self {
            seed: None,
            lr_peak: 2e-4,
            lr_foundation: 1e-5,
            weight_decay: 1e-4,
            warmup_epochs: 5,
            total_epochs: 30,
            batch_size: 16,
            clip_len: 256,
            swa_start_epoch: 25,
            grad_clip: 1.0,
            val_fraction: 0.25,
            threshold: 0.5,
            loss: LossKind::Asl,
            gamma_pos: asl.gamma_pos,
            gamma_neg: asl.gamma_neg,
            margin: asl.margin,
            clamp_eps: asl.clamp_eps,
            focal_gamma: 2.0,
            model: ModelKind::AgSsm,
            d_model: 32,
            state_dim: 16,
            layers: 2,
            heads: 8,
            region_dim: 32,
            roi_file: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("`seed` is required; set it explicitly for reproducibility".into()))
    }

    pub fn loss_config(&self) -> AslConfig {
        match self.loss {
            LossKind::Asl => AslConfig {
                gamma_pos: self.gamma_pos,
                gamma_neg: self.gamma_neg,
                margin: self.margin,
                clamp_eps: self.clamp_eps,
            },
            LossKind::Bce => AslConfig {
                clamp_eps: self.clamp_eps,
                ..AslConfig::bce()
            },
            LossKind::Focal => AslConfig {
                clamp_eps: self.clamp_eps,
                ..AslConfig::focal(self.focal_gamma)
            },
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            kind: self.model,
            d_model: self.d_model,
            state_dim: self.state_dim,
            layers: self.layers,
            heads: self.heads,
            region_dim: self.region_dim,
        }
    }

    pub fn roi(&self) -> Result<RoiSpec> {
        match &self.roi_file {
            Some(p) => RoiSpec::load(Path::new(p)),
            None => Ok(RoiSpec::default_68()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return Err(Error::Config(format!("lr_peak must be positive, got {}", self.lr_peak)));
        }
        if self.total_epochs == 0 || self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "need warmup_epochs < total_epochs, got {} and {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.swa_start_epoch > self.total_epochs {
            return Err(Error::Config(format!(
                "swa_start_epoch {} exceeds total_epochs {}",
                self.swa_start_epoch, self.total_epochs
            )));
        }
        if self.batch_size == 0 || self.clip_len == 0 {
            return Err(Error::Config("batch_size and clip_len must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip > 0.0) {
            return Err(Error::Config("weight_decay must be >= 0 and grad_clip > 0".into()));
        }
        self.loss_config().validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Deterministic train / validation split of sequence indices.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::with_stream(seed, 1).shuffle(&mut idx);
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    pub swa: SwaState,
    pub rng: RngState,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub best_val_f1: f64,
    pub best_epoch: usize,
}

impl Checkpoint {
    /// Model with the SWA average loaded, if any snapshot was taken.
    pub fn swa_model(&self) -> Result<Option<Model>> {
        if self.swa.n_models == 0 {
            return Ok(None);
        }
        let mut m = self.model.clone();
        m.params.load_flat(&self.swa.avg)?;
        Ok(Some(m))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CkptHeader {
    format_version: u32,
    config: TrainConfig,
    model_config: ModelConfig,
    dims: DataDims,
    roi: String,
    tensors: Vec<TensorMeta>,
    num_params: usize,
    adam_step: u64,
    swa_models: u64,
    rng: RngState,
    epoch: usize,
    step: u64,
    best_val_f1: f64,
    best_epoch: usize,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    ckpt.model.params.visit(&mut |name, t| {
        tensors.push(TensorMeta {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        })
    });
    let header = CkptHeader {
        format_version: CHECKPOINT_VERSION,
        config: ckpt.config.clone(),
        model_config: ckpt.model.config.clone(),
        dims: ckpt.model.dims,
        roi: ckpt.model.roi.to_string(),
        tensors,
        num_params: ckpt.model.params.num_params(),
        adam_step: ckpt.adam.step,
        swa_models: ckpt.swa.n_models,
        rng: ckpt.rng,
        epoch: ckpt.epoch,
        step: ckpt.step,
        best_val_f1: ckpt.best_val_f1,
        best_epoch: ckpt.best_epoch,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for block in [&ckpt.model.params.flatten(), &ckpt.adam.m, &ckpt.adam.v, &ckpt.swa.avg] {
        for v in block.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = |d: &str| Error::format(path, d);
    if buf.len() < 20 + 32 || &buf[..8] != CKPT_MAGIC {
        return Err(fmt("not a checkpoint (bad magic or too short)"));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version.to_string(),
            expected: CHECKPOINT_VERSION.to_string(),
        });
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity {
            path: path.to_path_buf(),
            detail: "sha256 digest does not match contents".into(),
        });
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    if body.len() < 20 + hlen {
        return Err(fmt("header extends past end of file"));
    }
    let header: CkptHeader = serde_json::from_slice(&body[20..20 + hlen]).map_err(|e| fmt(&format!("header: {e}")))?;
    let payload = &body[20 + hlen..];
    let n = header.num_params;
    if payload.len() != 4 * n * 8 {
        return Err(fmt(&format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            4 * n * 8
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let roi = RoiSpec::parse(&header.roi)?;
    let mut model = Model::init(header.model_config, header.dims, roi, &mut Rng::new(0))?;
    let mut shapes_ok = true;
    let mut k = 0;
    model.params.visit(&mut |name, t| {
        let meta = header.tensors.get(k);
        shapes_ok &= meta.is_some_and(|m| m.name == name && m.shape == t.shape());
        k += 1;
    });
    if !shapes_ok || k != header.tensors.len() || model.params.num_params() != n {
        return Err(fmt("tensor layout does not match the model configuration"));
    }
    model.params.load_flat(&values[..n])?;
    Ok(Checkpoint {
        config: header.config,
        model,
        adam: AdamState {
            m: values[n..2 * n].to_vec(),
            v: values[2 * n..3 * n].to_vec(),
            step: header.adam_step,
        },
        swa: SwaState {
            avg: values[3 * n..].to_vec(),
            n_models: header.swa_models,
        },
        rng: header.rng,
        epoch: header.epoch,
        step: header.step,
        best_val_f1: header.best_val_f1,
        best_epoch: header.best_epoch,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: usize,
    pub macro_f1: f64,
    pub per_class: Vec<f64>,
}

impl From<(F1Report, usize)> for EvalReport {
    fn from((r, frames): (F1Report, usize)) -> Self {
        Self {
            frames,
            macro_f1: r.macro_f1,
            per_class: r.per_class,
        }
    }
}

/// Per-class and macro F1 of `model` over the selected sequences.
pub fn evaluate_model(model: &Model, data: &Dataset, indices: &[usize], threshold: f64) -> Result<EvalReport> {
    let preds: Vec<Result<Vec<f64>>> = indices.par_iter().map(|&i| predict(model, &data.samples[i])).collect();
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for (r, &i) in preds.into_iter().zip(indices) {
        probs.extend(r?);
        labels.extend(data.samples[i].labels.iter().map(|&v| f64::from(v)));
    }
    let frames = probs.len() / model.dims.classes;
    Ok((f1_scores(&probs, &labels, model.dims.classes, threshold)?, frames).into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    All,
}

/// Evaluates a checkpoint (or its SWA average) on one split of `data`.
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset, use_swa: bool, split: Split) -> Result<EvalReport> {
    check_compatible(&ckpt.model, data)?;
    let model = if use_swa {
        ckpt.swa_model()?
            .ok_or_else(|| Error::InvalidArgument("checkpoint has no SWA snapshots yet".into()))?
    } else {
        ckpt.model.clone()
    };
    let seed = ckpt.config.seed()?;
    let (train, val) = split_indices(data.samples.len(), ckpt.config.val_fraction, seed);
    let indices = match split {
        Split::Train => train,
        Split::Val => val,
        Split::All => (0..data.samples.len()).collect(),
    };
    evaluate_model(&model, data, &indices, ckpt.config.threshold)
}

fn check_compatible(model: &Model, data: &Dataset) -> Result<()> {
    if DataDims::of(&data.config) != model.dims {
        return Err(Error::shape(
            "evaluate",
            format!(
                "dataset dims {:?} do not match model dims {:?}",
                DataDims::of(&data.config),
                model.dims
            ),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub grad_norm: f64,
    pub val_macro_f1: f64,
    pub val_per_class: Vec<f64>,
    pub swa_models: u64,
    pub val_macro_f1_swa: Option<f64>,
    /// Present on the final epoch only.
    pub train_macro_f1: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub resume: Option<Checkpoint>,
    /// Stop after this many completed epochs (for interrupted runs).
    pub stop_after: Option<usize>,
    /// Output directory for checkpoints and `history.jsonl`.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Trains per `config`, logging one record per epoch.
pub fn train(config: &TrainConfig, data: &Dataset, opts: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    data.config.validate()?;
    let seed = config.seed()?;
    let frames = data.config.frames;
    let clip = config.clip_len.min(frames);
    let (train_idx, val_idx) = split_indices(data.samples.len(), config.val_fraction, seed);
    if train_idx.is_empty() {
        return Err(Error::Config("dataset too small for a train/validation split".into()));
    }
    let steps_per_epoch = train_idx.len().div_ceil(config.batch_size) as u64;
    let schedule = Schedule::new(
        config.lr_peak,
        config.warmup_epochs as u64 * steps_per_epoch,
        config.total_epochs as u64 * steps_per_epoch,
    );
    let loss_cfg = config.loss_config();
    let adam_cfg = config.adam();

    let mut ck = match &opts.resume {
        Some(ck) => {
            if &ck.config != config {
                return Err(Error::Config(
                    "resume checkpoint was written with a different configuration".into(),
                ));
            }
            check_compatible(&ck.model, data)?;
            ck.clone()
        }
        None => {
            let model = Model::init(
                config.model_config(),
                DataDims::of(&data.config),
                config.roi()?,
                &mut Rng::with_stream(seed, 0),
            )?;
            let n = model.params.num_params();
            Checkpoint {
                config: config.clone(),
                model,
                adam: AdamState::new(n),
                swa: SwaState::new(n),
                rng: Rng::with_stream(seed, 2).state(),
                epoch: 0,
                step: 0,
                best_val_f1: f64::NEG_INFINITY,
                best_epoch: 0,
            }
        }
    };
    let mut rng = Rng::from_state(ck.rng);
    let mut history = Vec::new();
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("config.toml");
        fs::write(&cfg_path, config.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    }
    let end = opts.stop_after.unwrap_or(config.total_epochs).min(config.total_epochs);

    while ck.epoch < end {
        let mut order = train_idx.clone();
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut lr = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let windows: Vec<Window> = batch
                .iter()
                .map(|&i| Window {
                    sample: &data.samples[i],
                    start: if clip < frames { rng.below(frames - clip + 1) } else { 0 },
                    len: clip,
                })
                .collect();
            let (loss, grads) = batch_loss_and_grad(&ck.model, &windows, &loss_cfg).map_err(|e| match e {
                Error::NonFinite(what) => {
                    Error::NonFinite(format!("{what} in epoch {} batch {b} (step {})", ck.epoch + 1, ck.step))
                }
                other => other,
            })?;
            let mut g = grads.flatten();
            norm_sum += clip_grad_norm(&mut g, config.grad_clip);
            lr = lr_at(ck.step, &schedule);
            let mut flat = ck.model.params.flatten();
            adamw_step(&mut flat, &g, &mut ck.adam, lr, &adam_cfg)?;
            ck.model.params.load_flat(&flat)?;
            ck.step += 1;
            loss_sum += loss;
        }
        if ck.epoch >= config.swa_start_epoch {
            ck.swa.update(&ck.model.params.flatten())?;
        }
        ck.epoch += 1;

        let val = evaluate_model(&ck.model, data, &val_idx, config.threshold)?;
        let val_swa = match ck.swa_model()? {
            Some(m) => Some(evaluate_model(&m, data, &val_idx, config.threshold)?.macro_f1),
            None => None,
        };
        let is_final = ck.epoch == config.total_epochs;
        let train_f1 = if is_final {
            Some(evaluate_model(&ck.model, data, &train_idx, config.threshold)?.macro_f1)
        } else {
            None
        };
        let improved = val.macro_f1 > ck.best_val_f1;
        if improved {
            ck.best_val_f1 = val.macro_f1;
            ck.best_epoch = ck.epoch;
        }
        ck.rng = rng.state();
        let record = EpochRecord {
            epoch: ck.epoch,
            step: ck.step,
            lr,
            train_loss: loss_sum / steps_per_epoch as f64,
            grad_norm: norm_sum / steps_per_epoch as f64,
            val_macro_f1: val.macro_f1,
            val_per_class: val.per_class,
            swa_models: ck.swa.n_models,
            val_macro_f1_swa: val_swa,
            train_macro_f1: train_f1,
        };
        if let Some(dir) = &opts.out_dir {
            append_history(&dir.join("history.jsonl"), &record)?;
            save_checkpoint(&ck, &dir.join("last.ckpt"))?;
            if improved {
                save_checkpoint(&ck, &dir.join("best.ckpt"))?;
            }
            if is_final {
                save_checkpoint(&ck, &dir.join("final.ckpt"))?;
            }
        }
        history.push(record);
    }
    Ok(TrainOutcome {
        checkpoint: ck,
        history,
    })
}

fn append_history(path: &Path, record: &EpochRecord) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(record).expect("record serializes");
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn data() -> Dataset {
        generate(&SynthConfig {
            frames: 16,
            num_sequences: 8,
            classes: 3,
            prevalence_head: 0.3,
            prevalence_tail: 0.1,
            mean_duration: 4.0,
            grid_h: 4,
            grid_w: 4,
            d_v: 4,
            d_a: 4,
            signal_amp: 2.0,
            seed: 1,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn config() -> TrainConfig {
        TrainConfig {
            seed: Some(9),
            lr_peak: 1e-2,
            warmup_epochs: 1,
            total_epochs: 4,
            batch_size: 3,
            clip_len: 12,
            swa_start_epoch: 2,
            d_model: 4,
            state_dim: 2,
            layers: 1,
            heads: 2,
            region_dim: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_parsing() {
        let cfg = TrainConfig::from_toml("seed = 3\nlr_peak = 0.001\nloss = \"bce\"\nmodel = \"framewise\"\n").unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.loss, LossKind::Bce);
        assert_eq!(cfg.model, ModelKind::Framewise);
        assert!(TrainConfig::from_toml("seed = 3\nlearning_rate = 0.1\n").is_err());
        assert!(TrainConfig::from_toml("lr_peak = 0.1\n").unwrap().validate().is_err());
        let round = TrainConfig::from_toml(&config().to_toml()).unwrap();
        assert_eq!(round, config());
        let bad = TrainConfig {
            warmup_epochs: 4,
            ..config()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            swa_start_epoch: 5,
            ..config()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (a, b) = split_indices(20, 0.25, 4);
        assert_eq!((a.len(), b.len()), (15, 5));
        assert_eq!(split_indices(20, 0.25, 4), (a.clone(), b.clone()));
        let mut all: Vec<usize> = a.into_iter().chain(b).collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn training_is_deterministic() {
        let d = data();
        let a = train(&config(), &d, &TrainOptions::default()).unwrap();
        let b = train(&config(), &d, &TrainOptions::default()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.history.len(), 4);
        assert_eq!(a.checkpoint.swa.n_models, 2);
        assert!(a.history.iter().all(|r| r.train_loss.is_finite()));
    }

    #[test]
    fn interrupted_run_resumes_bit_identically() {
        let d = data();
        let full = train(&config(), &d, &TrainOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let first = train(
            &config(),
            &d,
            &TrainOptions {
                stop_after: Some(2),
                out_dir: Some(dir.path().to_path_buf()),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        assert_eq!(first.checkpoint.epoch, 2);
        let loaded = load_checkpoint(&dir.path().join("last.ckpt")).unwrap();
        assert_eq!(loaded, first.checkpoint);
        let rest = train(
            &config(),
            &d,
            &TrainOptions {
                resume: Some(loaded),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        assert_eq!(rest.checkpoint, full.checkpoint);
        assert_eq!(rest.history, full.history[2..]);
    }

    #[test]
    fn resume_with_other_config_is_rejected() {
        let d = data();
        let first = train(
            &config(),
            &d,
            &TrainOptions {
                stop_after: Some(1),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        let other = TrainConfig {
            lr_peak: 0.5,
            ..config()
        };
        let r = train(
            &other,
            &d,
            &TrainOptions {
                resume: Some(first.checkpoint),
                ..TrainOptions::default()
            },
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn outputs_and_evaluation_consistency() {
        let d = data();
        let dir = tempfile::tempdir().unwrap();
        let out = train(
            &config(),
            &d,
            &TrainOptions {
                out_dir: Some(dir.path().to_path_buf()),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        for f in ["best.ckpt", "final.ckpt", "last.ckpt", "config.toml", "history.jsonl"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let lines = fs::read_to_string(dir.path().join("history.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 4);
        let ck = load_checkpoint(&dir.path().join("final.ckpt")).unwrap();
        let last = out.history.last().unwrap();
        let r = evaluate(&ck, &d, false, Split::Train).unwrap();
        assert_eq!(Some(r.macro_f1), last.train_macro_f1);
        let r = evaluate(&ck, &d, false, Split::Val).unwrap();
        assert_eq!(r.macro_f1, last.val_macro_f1);
        let r = evaluate(&ck, &d, true, Split::Val).unwrap();
        assert_eq!(Some(r.macro_f1), last.val_macro_f1_swa);
    }

    #[test]
    fn swa_with_one_snapshot_equals_that_snapshot() {
        let d = data();
        let cfg = TrainConfig {
            swa_start_epoch: 3,
            ..config()
        };
        let out = train(&cfg, &d, &TrainOptions::default()).unwrap();
        let ck = out.checkpoint;
        assert_eq!(ck.swa.n_models, 1);
        assert_eq!(ck.swa.avg, ck.model.params.flatten());
        assert_eq!(
            evaluate(&ck, &d, true, Split::All).unwrap(),
            evaluate(&ck, &d, false, Split::All).unwrap()
        );
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let d = data();
        let out = train(
            &config(),
            &d,
            &TrainOptions {
                stop_after: Some(1),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&out.checkpoint, &path).unwrap();
        let bytes = fs::read(&path).unwrap();

        let mut tampered = bytes.clone();
        let n = tampered.len();
        tampered[n - 100] ^= 1;
        fs::write(&path, &tampered).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity { .. })));

        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(load_checkpoint(&path).is_err());

        let mut versioned = bytes.clone();
        versioned[8] = 7;
        fs::write(&path, &versioned).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Version { .. })));

        fs::write(&path, b"hello").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn evaluation_rejects_mismatched_data() {
        let d = data();
        let out = train(
            &config(),
            &d,
            &TrainOptions {
                stop_after: Some(1),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        let other = generate(&SynthConfig {
            d_v: 5,
            ..d.config.clone()
        })
        .unwrap();
        assert!(evaluate(&out.checkpoint, &other, false, Split::All).is_err());
        assert!(evaluate(&out.checkpoint, &d, true, Split::All).is_err());
    }
}
