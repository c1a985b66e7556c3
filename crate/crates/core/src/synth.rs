//! Synthetic audio-visual sequences with planted structure.
//!
//! Each class follows a two-state Markov chain calibrated to its target
//! prevalence. While a class is active, a class-specific vector is added to
//! the patch tokens covered by the class's facial region, and every onset is
//! announced by an audio burst `audio_lag` frames early. With a nonzero
//! `audio_sustain` the class's audio pattern also accompanies the whole active
//! run, shifted by the same lag. Everything else is Gaussian noise. Landmarks follow a fixed 68-point face template with small
//! per-frame jitter.
//!
//! Datasets are stored as a directory holding `manifest.json` and `data.bin`
//! (little-endian `f32` payloads with per-tensor shape headers).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hga::{map_landmarks_to_patches, FrameDims, GridDims, LandmarkSet, RoiSpec, NUM_LANDMARKS};
use crate::rng::Rng;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"AGSSMDAT";
const MANIFEST: &str = "manifest.json";
const DATA: &str = "data.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Frames per sequence.
    pub frames: usize,
    pub num_sequences: usize,
    pub classes: usize,
    /// Prevalence decays geometrically from head (class 0) to tail (last class).
    pub prevalence_head: f64,
    pub prevalence_tail: f64,
    /// Mean length of an active run, in frames.
    pub mean_duration: f64,
    pub audio_lag: usize,
    pub noise_std: f64,
    pub signal_amp: f64,
    pub audio_amp: f64,
    /// Amplitude of the audio pattern held over each active run (0 = bursts only).
    pub audio_sustain: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub d_v: usize,
    pub d_a: usize,
    /// Landmark jitter standard deviation in pixels.
    pub landmark_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 256,
            num_sequences: 64,
            classes: 12,
            prevalence_head: 0.3,
            // 1:50 between the most and the least frequent class.
            prevalence_tail: 0.3 / 50.0,
            mean_duration: 8.0,
            audio_lag: 2,
            noise_std: 1.0,
            signal_amp: 1.0,
            audio_amp: 3.0,
            audio_sustain: 0.0,
            grid_h: 16,
            grid_w: 16,
            frame_h: 224,
            frame_w: 224,
            d_v: 64,
            d_a: 32,
            landmark_jitter: 1.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn grid(&self) -> GridDims {
        GridDims {
            h_patches: self.grid_h,
            w_patches: self.grid_w,
        }
    }

    pub fn frame(&self) -> FrameDims {
        FrameDims {
            height: self.frame_h,
            width: self.frame_w,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn prevalence(&self) -> Vec<f64> {
        if self.classes == 1 {
            return vec![self.prevalence_head];
        }
        let ratio = (self.prevalence_tail / self.prevalence_head).powf(1.0 / (self.classes - 1) as f64);
        (0..self.classes)
            .map(|c| self.prevalence_head * ratio.powi(c as i32))
            .collect()
    }

    /// Markov transition probabilities `(P(0->1), P(1->0))` per class.
    pub fn transitions(&self) -> Result<Vec<(f64, f64)>> {
        let beta = 1.0 / self.mean_duration;
        self.prevalence()
            .into_iter()
            .enumerate()
            .map(|(c, pi)| {
                let alpha = pi * beta / (1.0 - pi);
                if alpha > 1.0 {
                    return Err(Error::Config(format!(
                        "class {c}: prevalence {pi} with mean duration {} needs onset probability {alpha} > 1",
                        self.mean_duration
                    )));
                }
                Ok((alpha, beta))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("num_sequences", self.num_sequences),
            ("classes", self.classes),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("frame_h", self.frame_h),
            ("frame_w", self.frame_w),
            ("d_v", self.d_v),
            ("d_a", self.d_a),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        for (name, p) in [
            ("prevalence_head", self.prevalence_head),
            ("prevalence_tail", self.prevalence_tail),
        ] {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Config(format!("{name} = {p} outside (0, 1)")));
            }
        }
        if !(self.mean_duration >= 1.0) {
            return Err(Error::Config(format!(
                "mean_duration {} must be >= 1",
                self.mean_duration
            )));
        }
        if self.frames < self.audio_lag + 1 {
            return Err(Error::Config(format!(
                "frames ({}) must exceed audio_lag ({})",
                self.frames, self.audio_lag
            )));
        }
        let nonneg = [
            self.noise_std,
            self.signal_amp,
            self.audio_amp,
            self.audio_sustain,
            self.landmark_jitter,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(
                "amplitudes and noise levels must be finite and >= 0".into(),
            ));
        }
        self.transitions()?;
        Ok(())
    }
}

/// One generated sequence. All tensors are row-major `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    /// `[T, N_v, D_v]`
    pub patch_tokens: Vec<f32>,
    /// `[T, 68, 2]` as `(x, y)` pixels.
    pub landmarks: Vec<f32>,
    /// `[T, D_a]`
    pub audio: Vec<f32>,
    /// `[T, C]` in `{0, 1}`
    pub labels: Vec<f32>,
}

impl SynthSample {
    pub fn landmark_set(&self, t: usize) -> LandmarkSet {
        let row = &self.landmarks[t * NUM_LANDMARKS * 2..(t + 1) * NUM_LANDMARKS * 2];
        let xy: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
        LandmarkSet::from_flat(&xy).expect("generated landmarks are finite")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub samples: Vec<SynthSample>,
}

/// Fixed per-dataset structure shared by all sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Planted {
    /// Unit-norm visual direction per class, `[C][D_v]`.
    pub visual: Vec<Vec<f64>>,
    /// Unit-norm audio burst per class, `[C][D_a]`.
    pub audio: Vec<Vec<f64>>,
    /// Index into [`RoiSpec::default_68`] for each class.
    pub region: Vec<usize>,
}

fn unit_vector(rng: &mut Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let norm = crate::tensor::l2_norm(&v);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

pub fn planted(config: &SynthConfig) -> Planted {
    let mut rng = Rng::with_stream(config.seed, u64::MAX);
    let m = RoiSpec::default_68().len();
    Planted {
        visual: (0..config.classes).map(|_| unit_vector(&mut rng, config.d_v)).collect(),
        audio: (0..config.classes).map(|_| unit_vector(&mut rng, config.d_a)).collect(),
        region: (0..config.classes).map(|c| c % m).collect(),
    }
}

/// 68-point face layout in pixels: jaw, brows, nose, eyes, mouth.
pub fn face_template(frame: FrameDims) -> Vec<(f64, f64)> {
    use std::f64::consts::PI;
    let mut pts = Vec::with_capacity(NUM_LANDMARKS);
    for i in 0..17 {
        let th = PI - i as f64 * PI / 16.0;
        pts.push((0.5 + 0.40 * th.cos(), 0.45 + 0.45 * th.sin()));
    }
    for x0 in [0.20, 0.58] {
        for k in 0..5 {
            let s = k as f64 / 4.0;
            pts.push((x0 + 0.22 * s, 0.30 - 0.03 * (PI * s).sin()));
        }
    }
    for k in 0..4 {
        pts.push((0.5, 0.38 + 0.06 * k as f64));
    }
    for k in 0..5 {
        pts.push((0.44 + 0.03 * k as f64, 0.60));
    }
    for cx in [0.32, 0.68] {
        for k in 0..6 {
            let th = PI - k as f64 * PI / 3.0;
            pts.push((cx + 0.06 * th.cos(), 0.40 - 0.025 * th.sin()));
        }
    }
    for (n, rx, ry) in [(12, 0.14, 0.06), (8, 0.09, 0.03)] {
        for k in 0..n {
            let th = PI - k as f64 * 2.0 * PI / n as f64;
            pts.push((0.5 + rx * th.cos(), 0.74 - ry * th.sin()));
        }
    }
    debug_assert_eq!(pts.len(), NUM_LANDMARKS);
    pts.into_iter()
        .map(|(x, y)| (x * frame.width as f64, y * frame.height as f64))
        .collect()
}

fn generate_sequence(
    config: &SynthConfig,
    planted: &Planted,
    transitions: &[(f64, f64)],
    template: &[(f64, f64)],
    roi: &RoiSpec,
    index: usize,
) -> SynthSample {
    let (t_len, c_len, n_v, d_v, d_a) = (
        config.frames,
        config.classes,
        config.num_patches(),
        config.d_v,
        config.d_a,
    );
    let mut rng = Rng::with_stream(config.seed, index as u64);
    let prevalence = config.prevalence();

    let mut labels = vec![0f32; t_len * c_len];
    for c in 0..c_len {
        let (alpha, beta) = transitions[c];
        let mut on = rng.bernoulli(prevalence[c]);
        for t in 0..t_len {
            if t > 0 {
                on = if on { !rng.bernoulli(beta) } else { rng.bernoulli(alpha) };
            }
            labels[t * c_len + c] = if on { 1.0 } else { 0.0 };
        }
    }

    let mut landmarks = Vec::with_capacity(t_len * NUM_LANDMARKS * 2);
    for _ in 0..t_len {
        for &(x, y) in template {
            landmarks.push((x + config.landmark_jitter * rng.normal()) as f32);
            landmarks.push((y + config.landmark_jitter * rng.normal()) as f32);
        }
    }

    let mut tokens = vec![0f64; t_len * n_v * d_v];
    tokens.iter_mut().for_each(|v| *v = config.noise_std * rng.normal());
    let mut audio = vec![0f64; t_len * d_a];
    audio.iter_mut().for_each(|v| *v = config.noise_std * rng.normal());

    let mut sample = SynthSample {
        patch_tokens: Vec::new(),
        landmarks,
        audio: Vec::new(),
        labels,
    };
    for t in 0..t_len {
        let active: Vec<usize> = (0..c_len).filter(|&c| sample.labels[t * c_len + c] == 1.0).collect();
        if !active.is_empty() {
            let sets = map_landmarks_to_patches(&sample.landmark_set(t), roi, config.grid(), config.frame())
                .expect("template covers all regions");
            for &c in &active {
                for &p in &sets[planted.region[c]] {
                    let row = &mut tokens[(t * n_v + p) * d_v..(t * n_v + p + 1) * d_v];
                    crate::tensor::axpy(config.signal_amp, &planted.visual[c], row);
                }
            }
        }
        for c in 0..c_len {
            let onset = sample.labels[t * c_len + c] == 1.0 && t > 0 && sample.labels[(t - 1) * c_len + c] == 0.0;
            if onset && t >= config.audio_lag {
                let s = t - config.audio_lag;
                crate::tensor::axpy(config.audio_amp, &planted.audio[c], &mut audio[s * d_a..(s + 1) * d_a]);
            }
            if config.audio_sustain > 0.0 && sample.labels[t * c_len + c] == 1.0 && t >= config.audio_lag {
                let s = t - config.audio_lag;
                crate::tensor::axpy(
                    config.audio_sustain,
                    &planted.audio[c],
                    &mut audio[s * d_a..(s + 1) * d_a],
                );
            }
        }
    }
    sample.patch_tokens = tokens.into_iter().map(|v| v as f32).collect();
    sample.audio = audio.into_iter().map(|v| v as f32).collect();
    sample
}

/// Generates `num_sequences` sequences; sequence `i` draws from its own
/// stream, so the result does not depend on the worker count.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let planted = planted(config);
    let transitions = config.transitions()?;
    let template = face_template(config.frame());
    let roi = RoiSpec::default_68();
    let samples = (0..config.num_sequences)
        .into_par_iter()
        .map(|i| generate_sequence(config, &planted, &transitions, &template, &roi, i))
        .collect();
    Ok(Dataset {
        config: config.clone(),
        samples,
    })
}

impl Dataset {
    pub fn frames(&self) -> usize {
        self.samples.len() * self.config.frames
    }

    /// Empirical positive rate per class.
    pub fn prevalence(&self) -> Vec<f64> {
        let c_len = self.config.classes;
        let mut pos = vec![0u64; c_len];
        for s in &self.samples {
            for row in s.labels.chunks_exact(c_len) {
                for (p, &y) in pos.iter_mut().zip(row) {
                    *p += u64::from(y == 1.0);
                }
            }
        }
        let n = self.frames().max(1) as f64;
        pos.into_iter().map(|p| p as f64 / n).collect()
    }

    /// Same sequences with the audio stream set to zero.
    pub fn without_audio(&self) -> Self {
        let mut out = self.clone();
        for s in &mut out.samples {
            s.audio.iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }

    /// Sequences selected by index, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            config: self.config.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

fn tensor_specs(c: &SynthConfig, sequences: usize) -> Vec<(String, Vec<usize>)> {
    let mut specs = Vec::with_capacity(sequences * 4);
    for i in 0..sequences {
        specs.push((format!("seq{i}/patch_tokens"), vec![c.frames, c.num_patches(), c.d_v]));
        specs.push((format!("seq{i}/landmarks"), vec![c.frames, NUM_LANDMARKS, 2]));
        specs.push((format!("seq{i}/audio"), vec![c.frames, c.d_a]));
        specs.push((format!("seq{i}/labels"), vec![c.frames, c.classes]));
    }
    specs
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: SynthConfig,
    sequences: usize,
    data_file: String,
    data_bytes: u64,
    data_sha256: String,
    tensors: Vec<TensorEntry>,
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `manifest.json` and `data.bin` into `dir` (created if missing).
pub fn export(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let mut entries = Vec::new();
    let specs = tensor_specs(&dataset.config, dataset.samples.len());
    for (k, (name, shape)) in specs.into_iter().enumerate() {
        let s = &dataset.samples[k / 4];
        let payload = match k % 4 {
            0 => &s.patch_tokens,
            1 => &s.landmarks,
            2 => &s.audio,
            _ => &s.labels,
        };
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset: buf.len() as u64,
        });
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in &shape {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in payload {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: "agssm-dataset".into(),
        version: FORMAT_VERSION,
        config: dataset.config.clone(),
        sequences: dataset.samples.len(),
        data_file: DATA.into(),
        data_bytes: buf.len() as u64,
        data_sha256: hex(&Sha256::digest(&buf)),
        tensors: entries,
    };
    let data_path = dir.join(DATA);
    fs::write(&data_path, &buf).map_err(|e| Error::io(&data_path, e))?;
    let manifest_path = dir.join(MANIFEST);
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    f.write_all(text.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads a dataset written by [`export`], verifying version, shapes, length
/// and checksum before returning anything.
pub fn import(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    let found = raw.get("version").cloned().unwrap_or(serde_json::Value::Null);
    if found != serde_json::Value::from(FORMAT_VERSION) {
        return Err(Error::Version {
            path: manifest_path,
            found: found.to_string(),
            expected: FORMAT_VERSION.to_string(),
        });
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    manifest.config.validate()?;

    let data_path: PathBuf = dir.join(&manifest.data_file);
    let buf = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    if buf.len() as u64 != manifest.data_bytes {
        return Err(Error::format(
            &data_path,
            format!(
                "expected {} bytes, found {} (truncated or padded)",
                manifest.data_bytes,
                buf.len()
            ),
        ));
    }
    let mut cur = Cursor {
        buf: &buf,
        pos: 0,
        path: &data_path,
    };
    if cur.take(MAGIC.len())? != MAGIC {
        return Err(Error::format(&data_path, "bad magic"));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: data_path,
            found: version.to_string(),
            expected: FORMAT_VERSION.to_string(),
        });
    }
    let digest = hex(&Sha256::digest(&buf));
    if digest != manifest.data_sha256 {
        return Err(Error::Integrity {
            path: data_path,
            detail: format!("sha256 {digest} does not match manifest {}", manifest.data_sha256),
        });
    }

    let mut dataset = Dataset {
        config: manifest.config.clone(),
        samples: Vec::with_capacity(manifest.sequences),
    };
    let specs = tensor_specs(&manifest.config, manifest.sequences);
    if specs.len() != manifest.tensors.len() {
        return Err(Error::format(
            &manifest_path,
            "tensor list does not match the configuration",
        ));
    }
    let mut parts: Vec<Vec<f32>> = Vec::with_capacity(4);
    for ((name, shape), entry) in specs.iter().zip(&manifest.tensors) {
        if &entry.name != name || &entry.shape != shape || entry.offset != cur.pos as u64 {
            return Err(Error::format(
                &manifest_path,
                format!(
                    "tensor entry {:?} does not match expected {name:?} {shape:?}",
                    entry.name
                ),
            ));
        }
        let name_len = cur.u32()? as usize;
        if cur.take(name_len)? != name.as_bytes() {
            return Err(Error::format(&data_path, format!("record name mismatch for {name}")));
        }
        let ndim = cur.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u64()? as usize);
        }
        if &dims != shape {
            return Err(Error::format(
                &data_path,
                format!("{name}: header shape {dims:?}, expected {shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        let bytes = cur.take(n * 4)?;
        parts.push(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect(),
        );
        if parts.len() == 4 {
            let mut it = parts.drain(..);
            let sample = SynthSample {
                patch_tokens: it.next().expect("4 parts"),
                landmarks: it.next().expect("4 parts"),
                audio: it.next().expect("4 parts"),
                labels: it.next().expect("4 parts"),
            };
            drop(it);
            if sample.labels.iter().any(|&y| y != 0.0 && y != 1.0) {
                return Err(Error::format(&data_path, format!("{name}: labels are not binary")));
            }
            dataset.samples.push(sample);
        }
    }
    if cur.pos != buf.len() {
        return Err(Error::format(&data_path, "trailing bytes after last tensor"));
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            frames: 48,
            num_sequences: 6,
            grid_h: 8,
            grid_w: 8,
            d_v: 8,
            d_a: 6,
            seed: 7,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.samples[0].labels, c.samples[0].labels);
    }

    #[test]
    fn worker_count_does_not_matter() {
        let a = generate(&small()).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| generate(&small()).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn shapes_and_binary_labels() {
        let cfg = small();
        let d = generate(&cfg).unwrap();
        for s in &d.samples {
            assert_eq!(s.patch_tokens.len(), 48 * 64 * 8);
            assert_eq!(s.landmarks.len(), 48 * 68 * 2);
            assert_eq!(s.audio.len(), 48 * 6);
            assert_eq!(s.labels.len(), 48 * 12);
            assert!(s.labels.iter().all(|&y| y == 0.0 || y == 1.0));
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(generate(&SynthConfig {
            audio_lag: 48,
            ..small()
        })
        .is_err());
        assert!(generate(&SynthConfig {
            prevalence_tail: 0.0,
            ..small()
        })
        .is_err());
        // onset probability pi*beta/(1-pi) = 0.9*1/0.1 > 1
        let infeasible = SynthConfig {
            prevalence_head: 0.9,
            mean_duration: 1.0,
            ..small()
        };
        assert!(matches!(generate(&infeasible), Err(Error::Config(_))));
    }

    #[test]
    fn template_is_inside_the_frame_and_regions_separate() {
        let frame = FrameDims {
            height: 224,
            width: 224,
        };
        let pts = face_template(frame);
        assert_eq!(pts.len(), 68);
        assert!(pts
            .iter()
            .all(|&(x, y)| (0.0..224.0).contains(&x) && (0.0..224.0).contains(&y)));
        let lm = LandmarkSet::new(pts).unwrap();
        let sets = map_landmarks_to_patches(
            &lm,
            &RoiSpec::default_68(),
            GridDims {
                h_patches: 8,
                w_patches: 8,
            },
            frame,
        )
        .unwrap();
        // eyes and mouth do not share patches
        for eye in [2, 3] {
            assert!(sets[eye].iter().all(|p| !sets[5].contains(p)));
        }
    }

    #[test]
    fn empirical_prevalence_matches_target() {
        let cfg = SynthConfig {
            frames: 2000,
            num_sequences: 100,
            grid_h: 2,
            grid_w: 2,
            d_v: 1,
            d_a: 1,
            seed: 11,
            ..SynthConfig::default()
        };
        let d = generate(&cfg).unwrap();
        assert!(d.frames() >= 100_000);
        for (c, (emp, target)) in d.prevalence().iter().zip(cfg.prevalence()).enumerate() {
            assert!((emp / target - 1.0).abs() < 0.2, "class {c}: {emp} vs {target}");
        }
    }

    #[test]
    fn sustained_audio_follows_shifted_labels() {
        let cfg = SynthConfig {
            frames: 300,
            num_sequences: 3,
            classes: 1,
            prevalence_head: 0.3,
            noise_std: 0.0,
            audio_amp: 2.0,
            audio_sustain: 0.5,
            audio_lag: 2,
            grid_h: 2,
            grid_w: 2,
            d_v: 2,
            d_a: 4,
            seed: 5,
            ..SynthConfig::default()
        };
        let d = generate(&cfg).unwrap();
        let pattern = &planted(&cfg).audio[0];
        for s in &d.samples {
            for t in 0..cfg.frames {
                let (on, onset) = match s.labels.get(t + 2) {
                    Some(&l) => (f64::from(l), f64::from(u8::from(l == 1.0 && s.labels[t + 1] == 0.0))),
                    None => (0.0, 0.0),
                };
                let k = 0.5 * on + 2.0 * onset;
                for j in 0..4 {
                    let want = (k * pattern[j]) as f32;
                    assert!((s.audio[t * 4 + j] - want).abs() <= 1e-6, "frame {t}");
                }
            }
        }
    }

    #[test]
    fn audio_leads_onsets_by_the_configured_lag() {
        let cfg = SynthConfig {
            frames: 400,
            num_sequences: 20,
            grid_h: 2,
            grid_w: 2,
            d_v: 2,
            d_a: 16,
            audio_lag: 3,
            seed: 12,
            ..SynthConfig::default()
        };
        let d = generate(&cfg).unwrap();
        let pl = planted(&cfg);
        let (t_len, c_len, d_a) = (cfg.frames, cfg.classes, cfg.d_a);
        for c in [0, 5] {
            let mut xcorr = vec![0.0; 9];
            for s in &d.samples {
                let burst: Vec<f64> = (0..t_len)
                    .map(|t| {
                        let a: Vec<f64> = s.audio[t * d_a..(t + 1) * d_a].iter().map(|&v| f64::from(v)).collect();
                        f64::from(u8::from(crate::tensor::dot(&a, &pl.audio[c]) > 0.5 * cfg.audio_amp))
                    })
                    .collect();
                let onset: Vec<f64> = (0..t_len)
                    .map(|t| {
                        let on = s.labels[t * c_len + c] == 1.0 && t > 0 && s.labels[(t - 1) * c_len + c] == 0.0;
                        f64::from(u8::from(on))
                    })
                    .collect();
                for (lag, x) in xcorr.iter_mut().enumerate() {
                    *x += (0..t_len - lag).map(|t| burst[t] * onset[t + lag]).sum::<f64>();
                }
            }
            let best = xcorr
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(best, 3, "class {c}: {xcorr:?}");
        }
    }

    /// Least-squares linear probe on flattened patch tokens for one class,
    /// with the decision threshold chosen on the training half.
    fn probe_f1(d: &Dataset, class: usize, mask_region: bool) -> (f64, f64) {
        let cfg = &d.config;
        let (n_v, d_v, c_len) = (cfg.num_patches(), cfg.d_v, cfg.classes);
        let pl = planted(cfg);
        let roi = RoiSpec::default_68();
        let dim = n_v * d_v + 1;
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
        for s in &d.samples {
            for t in 0..cfg.frames {
                let mut x: Vec<f64> = s.patch_tokens[t * n_v * d_v..(t + 1) * n_v * d_v]
                    .iter()
                    .map(|&v| f64::from(v))
                    .collect();
                if mask_region {
                    let sets = map_landmarks_to_patches(&s.landmark_set(t), &roi, cfg.grid(), cfg.frame()).unwrap();
                    for &p in &sets[pl.region[class]] {
                        x[p * d_v..(p + 1) * d_v].iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                x.push(1.0);
                rows.push((x, f64::from(s.labels[t * c_len + class])));
            }
        }
        let half = rows.len() / 2;
        let (train, test) = rows.split_at(half);
        let mut ata = vec![0.0; dim * dim];
        let mut atb = vec![0.0; dim];
        for (x, y) in train {
            for i in 0..dim {
                atb[i] += x[i] * y;
                for j in 0..dim {
                    ata[i * dim + j] += x[i] * x[j];
                }
            }
        }
        for i in 0..dim {
            ata[i * dim + i] += 1e-3;
        }
        let w = solve(ata, atb, dim);
        let score = |x: &[f64]| crate::tensor::dot(x, &w);
        let f1_at = |set: &[(Vec<f64>, f64)], thr: f64| {
            let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
            for (x, y) in set {
                match (score(x) >= thr, *y == 1.0) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fn_ += 1.0,
                    _ => {}
                }
            }
            if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fn_)
            }
        };
        let mut scores: Vec<f64> = train.iter().map(|(x, _)| score(x)).collect();
        scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let thr = scores
            .iter()
            .step_by(scores.len() / 200)
            .copied()
            .max_by(|&a, &b| f1_at(train, a).partial_cmp(&f1_at(train, b)).unwrap())
            .unwrap();
        let positives = test.iter().filter(|(_, y)| *y == 1.0).count() as f64 / test.len() as f64;
        let chance = 2.0 * positives / (1.0 + positives);
        (f1_at(test, thr), chance)
    }

    fn solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Vec<f64> {
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| a[i * n + col].abs().partial_cmp(&a[j * n + col].abs()).unwrap())
                .unwrap();
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            b.swap(col, piv);
            for r in col + 1..n {
                let f = a[r * n + col] / a[col * n + col];
                for k in col..n {
                    a[r * n + k] -= f * a[col * n + k];
                }
                b[r] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let s: f64 = (r + 1..n).map(|k| a[r * n + k] * x[k]).sum();
            x[r] = (b[r] - s) / a[r * n + r];
        }
        x
    }

    #[test]
    fn class_signal_lives_in_its_region() {
        let cfg = SynthConfig {
            frames: 200,
            num_sequences: 20,
            grid_h: 4,
            grid_w: 4,
            d_v: 6,
            d_a: 2,
            signal_amp: 3.0,
            seed: 13,
            ..SynthConfig::default()
        };
        let d = generate(&cfg).unwrap();
        let (with_signal, chance) = probe_f1(&d, 0, false);
        let (masked, _) = probe_f1(&d, 0, true);
        assert!(with_signal > 0.8, "{with_signal}");
        assert!(masked < chance + 0.05, "masked {masked}, chance {chance}");
    }

    #[test]
    fn zeroing_audio_removes_only_the_audio_cue() {
        let d = generate(&small()).unwrap();
        let z = d.without_audio();
        for (a, b) in d.samples.iter().zip(&z.samples) {
            assert!(b.audio.iter().all(|&v| v == 0.0));
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.patch_tokens, b.patch_tokens);
            assert_eq!(a.landmarks, b.landmarks);
        }
    }

    #[test]
    fn export_import_round_trip() {
        let d = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export(&d, dir.path()).unwrap();
        let back = import(dir.path()).unwrap();
        assert_eq!(back, d);
        let bits = |s: &SynthSample| s.patch_tokens.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.samples[3]), bits(&d.samples[3]));

        let again = tempfile::tempdir().unwrap();
        export(&back, again.path()).unwrap();
        for f in [MANIFEST, DATA] {
            assert_eq!(
                fs::read(dir.path().join(f)).unwrap(),
                fs::read(again.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn truncated_data_is_rejected() {
        let d = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export(&d, dir.path()).unwrap();
        let path = dir.path().join(DATA);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        assert!(matches!(import(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn corrupted_payload_is_rejected() {
        let d = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export(&d, dir.path()).unwrap();
        let path = dir.path().join(DATA);
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(import(dir.path()), Err(Error::Integrity { .. })));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let d = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export(&d, dir.path()).unwrap();
        let mpath = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&mpath).unwrap();
        fs::write(&mpath, text.replacen("\"version\": 1", "\"version\": 2", 1)).unwrap();
        assert!(matches!(import(dir.path()), Err(Error::Version { .. })));

        fs::write(&mpath, text).unwrap();
        let path = dir.path().join(DATA);
        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 9;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(import(dir.path()), Err(Error::Version { .. })));
    }

    #[test]
    fn missing_directory_is_an_io_error() {
        assert!(matches!(import(Path::new("/nonexistent/agssm")), Err(Error::Io { .. })));
    }
}
