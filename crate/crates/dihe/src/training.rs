//! Joint training of encoder, generator and discriminator under the six
//! ablation modes, plus preprocessing, triplet sampling and evaluation.

use crate::imgio::{gaussian_blur, load_png, resize_bilinear};
use crate::losses::{self, LossWeights};
use crate::networks::{
    bind, bind_const, named_params, DescriptorSpec, DiscriminatorConfig, DiscriminatorNet, EncoderConfig,
    EncoderNet, GeneratorConfig, GeneratorNet, NetworkError,
};
use crate::retrieval::{self, RetrievalError};
use crate::synthdata::{derive_seed, DataError, DatasetManifest};
use crate::taxonomy::{build_taxonomy, TaxonomyError, TaxonomyTree};
use crate::tensor::{checkpoint, AdamConfig, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset error: {0}")]
    Data(#[from] DataError),
    #[error("taxonomy error: {0}")]
    Taxonomy(#[from] TaxonomyError),
    #[error("network error: {0}")]
    Network(#[from] NetworkError),
    #[error("image error: {0}")]
    Image(#[from] crate::imgio::ImageError),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error("retrieval error: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error("state serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("unknown mode '{0}'")]
    BadMode(String),
    #[error("config line {line}: {message}")]
    BadConfigLine { line: usize, message: String },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("config key '{key}': cannot parse '{value}'")]
    BadValue { key: String, value: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("empty sampling pool: {0}")]
    EmptyPool(String),
    #[error("non-finite {term} loss ({value}) at step {step}")]
    NonFinite { step: u64, term: String, value: f32 },
    #[error("unknown scenario '{0}' in manifest")]
    UnknownScenario(String),
}

/// The six ablation rows. String forms are the config-file spellings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Triplet,
    Hierarchy,
    TripletGan,
    HierarchyGan,
    TripletGanAdv,
    HierarchyGanAdv,
}

pub const ALL_MODES: [Mode; 6] = [
    Mode::Triplet,
    Mode::Hierarchy,
    Mode::TripletGan,
    Mode::HierarchyGan,
    Mode::TripletGanAdv,
    Mode::HierarchyGanAdv,
];

impl Mode {
    pub fn parse(s: &str) -> Result<Mode, TrainError> {
        match s {
            "triplet" => Ok(Mode::Triplet),
            "hierarchy" => Ok(Mode::Hierarchy),
            "triplet+GAN" => Ok(Mode::TripletGan),
            "hierarchy+GAN" => Ok(Mode::HierarchyGan),
            "triplet+GAN+adv" => Ok(Mode::TripletGanAdv),
            "hierarchy+GAN+adv" => Ok(Mode::HierarchyGanAdv),
            other => Err(TrainError::BadMode(other.to_string())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Triplet => "triplet",
            Mode::Hierarchy => "hierarchy",
            Mode::TripletGan => "triplet+GAN",
            Mode::HierarchyGan => "hierarchy+GAN",
            Mode::TripletGanAdv => "triplet+GAN+adv",
            Mode::HierarchyGanAdv => "hierarchy+GAN+adv",
        }
    }

    pub fn uses_gan(self) -> bool {
        !matches!(self, Mode::Triplet | Mode::Hierarchy)
    }

    /// Whether the generator receives the embedding-distance term.
    pub fn adversarial_embedding(self) -> bool {
        matches!(self, Mode::TripletGanAdv | Mode::HierarchyGanAdv)
    }

    pub fn hierarchical(self) -> bool {
        matches!(self, Mode::Hierarchy | Mode::HierarchyGan | Mode::HierarchyGanAdv)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lr_gen: f32,
    pub lr_disc: f32,
    pub lr_enc: f32,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub total_steps: u64,
    pub pretrain_steps: u64,
    pub crop_min_fraction: f32,
    pub seed: u64,
    pub manifest: PathBuf,
    pub image_size: usize,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::HierarchyGanAdv,
            lr_gen: 1e-4,
            lr_disc: 1e-4,
            lr_enc: 1e-5,
            weights: LossWeights::default(),
            batch_size: 8,
            total_steps: 3000,
            pretrain_steps: 500,
            crop_min_fraction: 0.8,
            seed: 1,
            manifest: PathBuf::from("manifest.json"),
            image_size: 64,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    /// Applies one `key = value` pair. Every key here has a CLI flag of the
    /// same name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
            value.parse().map_err(|_| TrainError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
            })
        }
        match key {
            "mode" => self.mode = Mode::parse(value)?,
            "lr_gen" => self.lr_gen = num(key, value)?,
            "lr_disc" => self.lr_disc = num(key, value)?,
            "lr_enc" => self.lr_enc = num(key, value)?,
            "lambda_reg" => self.weights.lambda_reg = num(key, value)?,
            "lambda_emb" => self.weights.lambda_emb = num(key, value)?,
            "alpha_min" => self.weights.alpha_min = num(key, value)?,
            "alpha_max" => self.weights.alpha_max = num(key, value)?,
            "fixed_alpha" => self.weights.fixed_alpha = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "steps" => self.total_steps = num(key, value)?,
            "pretrain_steps" => self.pretrain_steps = num(key, value)?,
            "crop_min_fraction" => self.crop_min_fraction = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "manifest" => self.manifest = PathBuf::from(value),
            "image_size" => self.image_size = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            other => return Err(TrainError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, TrainError> {
        let mut cfg = TrainConfig::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, TrainError> {
        Self::from_pairs(&parse_config_text(&fs::read_to_string(path)?)?)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.crop_min_fraction > 0.0 && self.crop_min_fraction <= 1.0) {
            return Err(TrainError::InvalidConfig(
                "crop_min_fraction must be in (0, 1]".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        if self.weights.alpha_min > self.weights.alpha_max {
            return Err(TrainError::InvalidConfig("alpha_min must not exceed alpha_max".into()));
        }
        if self.image_size % 8 != 0 || self.image_size == 0 {
            return Err(TrainError::InvalidConfig(
                "image_size must be a positive multiple of 8".into(),
            ));
        }
        Ok(())
    }
}

/// Flat `key = value` config text. `#` starts a comment; blank lines ignored.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, TrainError> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| TrainError::BadConfigLine {
            line: i + 1,
            message: "expected key = value".into(),
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(TrainError::BadConfigLine { line: i + 1, message: "empty key".into() });
        }
        pairs.push((key.to_string(), value.to_string()));
    }
    Ok(pairs)
}

/// Rescales preserving aspect ratio to fit `target` and pads the right and
/// bottom with zeros. Input and output are (h, w, 3) in [-1, 1].
pub fn preprocess(image: &Tensor<f32>, target: usize) -> Tensor<f32> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if h == target && w == target {
        return image.clone();
    }
    let scale = target as f32 / h.max(w) as f32;
    let nh = ((h as f32 * scale).round() as usize).clamp(1, target);
    let nw = ((w as f32 * scale).round() as usize).clamp(1, target);
    let resized = resize_bilinear(image, nh, nw);
    let mut out = vec![0.0f32; target * target * 3];
    for y in 0..nh {
        let src = &resized.data()[y * nw * 3..(y + 1) * nw * 3];
        out[y * target * 3..y * target * 3 + nw * 3].copy_from_slice(src);
    }
    Tensor::new(vec![target, target, 3], out)
}

/// Crop rectangle (y0, ch, x0, cw) with both side fractions uniform in
/// [min_fraction, 1].
fn crop_rect(h: usize, w: usize, min_fraction: f32, rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    let fh = if min_fraction >= 1.0 { 1.0 } else { rng.gen_range(min_fraction..1.0) };
    let fw = if min_fraction >= 1.0 { 1.0 } else { rng.gen_range(min_fraction..1.0) };
    let ch = ((h as f32 * fh).round() as usize).clamp(1, h);
    let cw = ((w as f32 * fw).round() as usize).clamp(1, w);
    let y0 = if ch < h { rng.gen_range(0..=h - ch) } else { 0 };
    let x0 = if cw < w { rng.gen_range(0..=w - cw) } else { 0 };
    (y0, ch, x0, cw)
}

fn extract(image: &Tensor<f32>, y0: usize, ch: usize, x0: usize, cw: usize) -> Tensor<f32> {
    let w = image.shape()[1];
    let mut data = Vec::with_capacity(ch * cw * 3);
    for y in y0..y0 + ch {
        data.extend_from_slice(&image.data()[(y * w + x0) * 3..(y * w + x0 + cw) * 3]);
    }
    Tensor::new(vec![ch, cw, 3], data)
}

/// Random axis-aligned crop rescaled back to the input size.
pub fn random_crop(image: &Tensor<f32>, min_fraction: f32, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let (y0, ch, x0, cw) = crop_rect(h, w, min_fraction, rng);
    if ch == h && cw == w {
        return image.clone();
    }
    resize_bilinear(&extract(image, y0, ch, x0, cw), h, w)
}

/// Jitter ranges for the classical (GAN-free) anchor augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentJitter {
    pub blur_sigma: (f32, f32),
    pub gain: (f32, f32),
}

impl Default for AugmentJitter {
    fn default() -> Self {
        AugmentJitter { blur_sigma: (0.0, 0.8), gain: (0.9, 1.1) }
    }
}

/// Crop, blur, per-channel gain jitter; the anchor synthesizer for modes
/// without a generator.
pub fn classic_augment(
    image: &Tensor<f32>,
    min_fraction: f32,
    jitter: &AugmentJitter,
    rng: &mut ChaCha8Rng,
) -> Tensor<f32> {
    let cropped = random_crop(image, min_fraction, rng);
    let sigma = sample(rng, jitter.blur_sigma);
    let blurred = if sigma > 0.0 { gaussian_blur(&cropped, sigma) } else { cropped };
    let gains: [f32; 3] = std::array::from_fn(|_| sample(rng, jitter.gain));
    if gains == [1.0; 3] {
        return blurred;
    }
    let mut out = blurred;
    for px in out.data_mut().chunks_mut(3) {
        for (v, g) in px.iter_mut().zip(gains) {
            *v = (*v * g).clamp(-1.0, 1.0);
        }
    }
    out
}

fn sample(rng: &mut ChaCha8Rng, range: (f32, f32)) -> f32 {
    if range.0 >= range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

/// A reference image with its labels, preprocessed to the training size.
#[derive(Debug, Clone)]
pub struct RefImage {
    pub product_id: String,
    pub fine_class: String,
    pub image: Tensor<f32>,
}

/// Preloaded training pools: seen references, their fine classes, and the
/// unlabeled domain-B images.
pub struct TrainData {
    pub taxonomy: TaxonomyTree,
    pub refs: Vec<RefImage>,
    pub classes: Vec<String>,
    pub by_class: BTreeMap<String, Vec<usize>>,
    pub domain_b: Vec<Tensor<f32>>,
}

/// Loads the scenario-A (seen) references and the domain-B pool.
pub fn load_train_data(
    manifest: &DatasetManifest,
    dataset_dir: &Path,
    size: usize,
) -> Result<TrainData, TrainError> {
    let taxonomy = build_taxonomy(&manifest.taxonomy_edges)?;
    let seen = manifest
        .splits
        .get("A")
        .ok_or_else(|| TrainError::UnknownScenario("A".into()))?;
    let mut refs = Vec::new();
    let mut by_class: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for id in &seen.reference_ids {
        let spec = manifest
            .product(id)
            .ok_or_else(|| TrainError::EmptyPool(format!("product '{}' not in manifest", id)))?;
        let image = preprocess(&load_png(&dataset_dir.join(&spec.reference))?, size);
        by_class.entry(spec.fine_class.clone()).or_default().push(refs.len());
        refs.push(RefImage {
            product_id: spec.product_id.clone(),
            fine_class: spec.fine_class.clone(),
            image,
        });
    }
    let classes: Vec<String> = by_class.keys().cloned().collect();
    let mut domain_b = Vec::new();
    for rel in &manifest.domain_b_unlabeled {
        domain_b.push(preprocess(&load_png(&dataset_dir.join(rel))?, size));
    }
    Ok(TrainData { taxonomy, refs, classes, by_class, domain_b })
}

/// One sampled triplet: indices into the reference and domain-B pools.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletSample {
    pub positive: usize,
    pub negative: usize,
    pub domain_b: usize,
    pub class_p: String,
    pub class_n: String,
}

/// Positive uniform over seen references; negative uniform over the other
/// fine classes, then uniform within; domain-B uniform over the pool.
pub fn sample_triplet(data: &TrainData, rng: &mut ChaCha8Rng) -> Result<TripletSample, TrainError> {
    if data.classes.len() < 2 {
        return Err(TrainError::EmptyPool("need at least two fine classes".into()));
    }
    if data.domain_b.is_empty() {
        return Err(TrainError::EmptyPool("domain-B pool is empty".into()));
    }
    let positive = rng.gen_range(0..data.refs.len());
    let class_p = data.refs[positive].fine_class.clone();
    let others: Vec<&String> = data.classes.iter().filter(|c| **c != class_p).collect();
    let class_n = others[rng.gen_range(0..others.len())].clone();
    let members = &data.by_class[&class_n];
    let negative = members[rng.gen_range(0..members.len())];
    let domain_b = rng.gen_range(0..data.domain_b.len());
    Ok(TripletSample { positive, negative, domain_b, class_p, class_n })
}

/// One loss-log row; inactive terms are zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub l_enc: f32,
    pub l_disc: f32,
    pub l_adv: f32,
    pub l_reg: f32,
    pub l_emb: f32,
    pub margin_mean: f32,
}

pub fn loss_csv(log: &[StepLog]) -> String {
    let mut out = String::from("step,L_enc,L_disc,L_adv,L_reg,L_emb,margin_mean\n");
    for row in log {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.step, row.l_enc, row.l_disc, row.l_adv, row.l_reg, row.l_emb, row.margin_mean
        ));
    }
    out
}

/// The three networks plus the descriptor assembly spec.
pub struct Networks {
    pub encoder: EncoderNet,
    pub generator: GeneratorNet,
    pub discriminator: DiscriminatorNet,
    pub spec: DescriptorSpec,
}

/// Everything needed to continue (or replay) a run bit-exactly.
pub struct TrainState {
    pub nets: Networks,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub log: Vec<StepLog>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    step: u64,
    rng: ChaCha8Rng,
    encoder: EncoderConfig,
    generator: GeneratorConfig,
    discriminator: DiscriminatorConfig,
    spec: DescriptorSpec,
    param_steps: Vec<(String, u64)>,
    log: Vec<StepLog>,
}

const PREFIXES: [&str; 3] = ["enc.", "gen.", "disc."];

impl TrainState {
    /// Fresh networks seeded from labeled child seeds of the run seed.
    pub fn init(seed: u64) -> Self {
        let encoder = EncoderNet::new(
            EncoderConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "enc")),
        );
        let generator = GeneratorNet::new(
            GeneratorConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "gen")),
        );
        let discriminator = DiscriminatorNet::new(
            DiscriminatorConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "disc")),
        );
        TrainState {
            nets: Networks {
                encoder,
                generator,
                discriminator,
                spec: DescriptorSpec::default(),
            },
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "train")),
            log: Vec::new(),
        }
    }

    fn param_views(&self) -> [Vec<&crate::tensor::Parameter>; 3] {
        [
            self.nets.encoder.params(),
            self.nets.generator.params(),
            self.nets.discriminator.params(),
        ]
    }

    /// Inference weights only (no optimizer state), prefixed per network.
    pub fn named_weights(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for (prefix, params) in PREFIXES.iter().zip(self.param_views()) {
            for (name, value) in named_params(params) {
                out.push((format!("{}{}", prefix, name), value));
            }
        }
        out
    }

    /// Writes `state.json` (counters, RNG, log) and `weights.bin` (values
    /// plus Adam moments) under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir)?;
        let mut tensors = Vec::new();
        let mut param_steps = Vec::new();
        for (prefix, params) in PREFIXES.iter().zip(self.param_views()) {
            for p in params {
                let name = format!("{}{}", prefix, p.name);
                tensors.push((name.clone(), p.value.clone()));
                tensors.push((format!("{}.adam_m", name), p.m.clone()));
                tensors.push((format!("{}.adam_v", name), p.v.clone()));
                param_steps.push((name, p.step));
            }
        }
        checkpoint::save(&dir.join("weights.bin"), &tensors)?;
        let meta = StateMeta {
            step: self.step,
            rng: self.rng.clone(),
            encoder: self.nets.encoder.config.clone(),
            generator: self.nets.generator.config.clone(),
            discriminator: self.nets.discriminator.config.clone(),
            spec: self.nets.spec.clone(),
            param_steps,
            log: self.log.clone(),
        };
        fs::write(dir.join("state.json"), serde_json::to_string(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let meta: StateMeta = serde_json::from_str(&fs::read_to_string(dir.join("state.json"))?)?;
        let tensors = checkpoint::load(&dir.join("weights.bin"))?;
        let mut rng_dummy = ChaCha8Rng::seed_from_u64(0);
        let mut state = TrainState {
            nets: Networks {
                encoder: EncoderNet::new(meta.encoder, &mut rng_dummy),
                generator: GeneratorNet::new(meta.generator, &mut rng_dummy),
                discriminator: DiscriminatorNet::new(meta.discriminator, &mut rng_dummy),
                spec: meta.spec,
            },
            step: meta.step,
            rng: meta.rng,
            log: meta.log,
        };
        let lookup = |name: &str| -> Result<Tensor<f32>, TrainError> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| TrainError::Network(NetworkError::MissingParameter(name.into())))
        };
        for (prefix, params) in PREFIXES.iter().zip([
            state.nets.encoder.params_mut(),
            state.nets.generator.params_mut(),
            state.nets.discriminator.params_mut(),
        ]) {
            for p in params {
                let name = format!("{}{}", prefix, p.name);
                p.value = lookup(&name)?;
                p.m = lookup(&format!("{}.adam_m", name))?;
                p.v = lookup(&format!("{}.adam_v", name))?;
                p.step = meta
                    .param_steps
                    .iter()
                    .find(|(n, _)| n == &name)
                    .map(|(_, s)| *s)
                    .ok_or_else(|| TrainError::Network(NetworkError::MissingParameter(name)))?;
            }
        }
        Ok(state)
    }
}

fn stack(images: &[&Tensor<f32>]) -> Tensor<f32> {
    let shaped: Vec<Tensor<f32>> = images
        .iter()
        .map(|t| {
            let s = t.shape().to_vec();
            (*t).clone().reshaped(vec![1, s[0], s[1], s[2]])
        })
        .collect();
    let refs: Vec<&Tensor<f32>> = shaped.iter().collect();
    Tensor::concat(&refs, 0)
}

fn check_finite(step: u64, term: &str, value: f32) -> Result<f32, TrainError> {
    if !value.is_finite() {
        return Err(TrainError::NonFinite { step, term: term.to_string(), value });
    }
    Ok(value)
}

/// Unit rows that make the embedding term identically zero when the
/// adversarial weight is off, without running the encoder.
fn dummy_descriptors(n: usize) -> Tensor<f32> {
    Tensor::full(vec![n, 1], 1.0f32)
}

struct Batch {
    positives: Tensor<f32>,
    negatives: Tensor<f32>,
    domain_b: Tensor<f32>,
    cropped_positives: Tensor<f32>,
    class_pairs: Vec<(String, String)>,
}

fn sample_batch(
    state: &mut TrainState,
    data: &TrainData,
    config: &TrainConfig,
) -> Result<Batch, TrainError> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut dom = Vec::new();
    let mut pairs = Vec::new();
    for _ in 0..config.batch_size {
        let t = sample_triplet(data, &mut state.rng)?;
        pos.push(&data.refs[t.positive].image);
        neg.push(&data.refs[t.negative].image);
        dom.push(&data.domain_b[t.domain_b]);
        pairs.push((t.class_p, t.class_n));
    }
    let cropped: Vec<Tensor<f32>> = pos
        .iter()
        .map(|img| random_crop(img, config.crop_min_fraction, &mut state.rng))
        .collect();
    let cropped_refs: Vec<&Tensor<f32>> = cropped.iter().collect();
    Ok(Batch {
        positives: stack(&pos),
        negatives: stack(&neg),
        domain_b: stack(&dom),
        cropped_positives: stack(&cropped_refs),
        class_pairs: pairs,
    })
}

/// Discriminator then generator sub-updates on one batch. Used both for
/// pretraining and for the GAN part of a joint step. `lambda_emb_on`
/// controls whether the embedding term reaches the generator.
fn gan_substeps(
    state: &mut TrainState,
    batch: &Batch,
    config: &TrainConfig,
    lambda_emb_on: bool,
    step: u64,
) -> Result<(f32, f32, f32, f32), TrainError> {
    // Discriminator: fresh forward, generator frozen via plain-tensor fakes.
    let fakes = state.nets.generator.translate(&batch.cropped_positives)?;
    let l_disc;
    {
        let tape = Tape::new();
        let db = bind(state.nets.discriminator.params(), &tape);
        let real = tape.constant(batch.domain_b.clone());
        let fake = tape.constant(fakes);
        let d_real = state.nets.discriminator.forward(&tape, &db, real);
        let d_fake = state.nets.discriminator.forward(&tape, &db, fake);
        let loss = losses::discriminator_loss(&tape, d_real, d_fake);
        l_disc = check_finite(step, "discriminator", tape.value(loss).item())?;
        let grads = tape.backward(loss);
        crate::networks::apply_grads(
            state.nets.discriminator.params_mut(),
            &db,
            &grads,
            &AdamConfig::with_lr(config.lr_disc),
        );
    }

    // Generator: adversarial + regularization (+ embedding when on).
    let mut weights = config.weights;
    if !lambda_emb_on {
        weights.lambda_emb = 0.0;
    }
    let e_p_plain = if lambda_emb_on {
        state
            .nets
            .encoder
            .encode_images(&batch.positives, &state.nets.spec)?
    } else {
        dummy_descriptors(config.batch_size)
    };
    let (l_adv, l_reg, l_emb);
    {
        let tape = Tape::new();
        let gb = bind(state.nets.generator.params(), &tape);
        let db = bind_const(state.nets.discriminator.params(), &tape);
        let input = tape.constant(batch.cropped_positives.clone());
        let g_out = state.nets.generator.forward(&tape, &gb, input)?;
        let d_fake = state.nets.discriminator.forward(&tape, &db, g_out);
        let e_p = tape.constant(e_p_plain);
        let e_g = if lambda_emb_on {
            let eb = bind_const(state.nets.encoder.params(), &tape);
            state.nets.encoder.encode(&tape, &eb, g_out, &state.nets.spec)?
        } else {
            tape.constant(dummy_descriptors(config.batch_size))
        };
        let gl = losses::generator_loss(&tape, d_fake, input, g_out, e_p, e_g, &weights);
        l_adv = check_finite(step, "generator adversarial", tape.value(gl.adv).item())?;
        l_reg = check_finite(step, "generator regularization", tape.value(gl.reg).item())?;
        l_emb = check_finite(step, "generator embedding", tape.value(gl.emb).item())?;
        let grads = tape.backward(gl.total);
        crate::networks::apply_grads(
            state.nets.generator.params_mut(),
            &gb,
            &grads,
            &AdamConfig::with_lr(config.lr_gen),
        );
    }
    Ok((l_disc, l_adv, l_reg, l_emb))
}

/// One joint training step: discriminator, generator, encoder, in that
/// order, each on a freshly recomputed forward pass.
pub fn train_step(
    state: &mut TrainState,
    data: &TrainData,
    config: &TrainConfig,
) -> Result<StepLog, TrainError> {
    let step = state.step + 1;
    let batch = sample_batch(state, data, config)?;

    let (l_disc, l_adv, l_reg, l_emb) = if config.mode.uses_gan() {
        gan_substeps(state, &batch, config, config.mode.adversarial_embedding(), step)?
    } else {
        (0.0, 0.0, 0.0, 0.0)
    };

    // Anchor synthesis: post-update generator output, or the classical
    // augmentation pipeline when no GAN is trained.
    let anchors = if config.mode.uses_gan() {
        state.nets.generator.translate(&batch.cropped_positives)?
    } else {
        let singles: Vec<Tensor<f32>> = batch
            .positives
            .split(0, &vec![1; config.batch_size])
            .into_iter()
            .map(|t| {
                let s = t.shape().to_vec();
                let img = t.reshaped(vec![s[1], s[2], s[3]]);
                classic_augment(
                    &img,
                    config.crop_min_fraction,
                    &AugmentJitter::default(),
                    &mut state.rng,
                )
            })
            .collect();
        let refs: Vec<&Tensor<f32>> = singles.iter().collect();
        stack(&refs)
    };

    let margins = losses::batch_margins(
        &data.taxonomy,
        &batch.class_pairs,
        &config.weights,
        config.mode.hierarchical(),
    )?;
    let margin_mean = margins.iter().sum::<f32>() / margins.len() as f32;

    let l_enc;
    {
        let tape = Tape::new();
        let eb = bind(state.nets.encoder.params(), &tape);
        let a = tape.constant(anchors);
        let p = tape.constant(batch.positives.clone());
        let n = tape.constant(batch.negatives.clone());
        let e_a = state.nets.encoder.encode(&tape, &eb, a, &state.nets.spec)?;
        let e_p = state.nets.encoder.encode(&tape, &eb, p, &state.nets.spec)?;
        let e_n = state.nets.encoder.encode(&tape, &eb, n, &state.nets.spec)?;
        let loss = losses::encoder_loss(&tape, e_a, e_p, e_n, &margins);
        l_enc = check_finite(step, "encoder", tape.value(loss).item())?;
        let grads = tape.backward(loss);
        crate::networks::apply_grads(
            state.nets.encoder.params_mut(),
            &eb,
            &grads,
            &AdamConfig::with_lr(config.lr_enc),
        );
    }

    state.step = step;
    let row = StepLog { step, l_enc, l_disc, l_adv, l_reg, l_emb, margin_mean };
    state.log.push(row);
    Ok(row)
}

/// GAN warm-up: generator and discriminator only, embedding weight forced
/// to zero, encoder untouched.
pub fn pretrain_gan(
    state: &mut TrainState,
    data: &TrainData,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    for _ in 0..config.pretrain_steps {
        let step = state.step + 1;
        let batch = sample_batch(state, data, config)?;
        let (l_disc, l_adv, l_reg, _) = gan_substeps(state, &batch, config, false, step)?;
        state.step = step;
        state.log.push(StepLog {
            step,
            l_enc: 0.0,
            l_disc,
            l_adv,
            l_reg,
            l_emb: 0.0,
            margin_mean: 0.0,
        });
    }
    Ok(())
}

/// Full run: init, pretrain when the mode has a GAN, then the joint steps.
/// When `out` is given, checkpoints land there every `checkpoint_every`
/// steps along with the final state and `loss.csv`.
pub fn train(
    config: &TrainConfig,
    data: &TrainData,
    out: Option<&Path>,
) -> Result<TrainState, TrainError> {
    config.validate()?;
    let mut state = TrainState::init(config.seed);
    if config.mode.uses_gan() {
        pretrain_gan(&mut state, data, config)?;
    }
    for i in 0..config.total_steps {
        train_step(&mut state, data, config)?;
        if let Some(dir) = out {
            if config.checkpoint_every > 0 && (i + 1) % config.checkpoint_every == 0 {
                state.save(dir)?;
            }
        }
    }
    if let Some(dir) = out {
        state.save(dir)?;
        fs::write(dir.join("loss.csv"), loss_csv(&state.log))?;
    }
    Ok(state)
}

/// Builds the scenario's reference DB and scores its queries.
pub fn evaluate_scenario(
    encoder: &EncoderNet,
    spec: &DescriptorSpec,
    manifest: &DatasetManifest,
    dataset_dir: &Path,
    scenario: &str,
    size: usize,
    ks: &[usize],
) -> Result<Vec<(usize, f64)>, TrainError> {
    let split = manifest
        .splits
        .get(scenario)
        .ok_or_else(|| TrainError::UnknownScenario(scenario.to_string()))?;
    let mut refs = Vec::new();
    for id in &split.reference_ids {
        let product = manifest
            .product(id)
            .ok_or_else(|| TrainError::EmptyPool(format!("product '{}' not in manifest", id)))?;
        let image = preprocess(&load_png(&dataset_dir.join(&product.reference))?, size);
        refs.push((id.clone(), image));
    }
    let db = retrieval::build_db(encoder, spec, &refs)?;
    let mut queries = Vec::new();
    for &qi in &split.query_indices {
        let entry = &manifest.queries[qi];
        let image = preprocess(&load_png(&dataset_dir.join(&entry.image))?, size);
        let shape = image.shape().to_vec();
        let batched = image.reshaped(vec![1, shape[0], shape[1], shape[2]]);
        let desc = encoder.encode_images(&batched, spec)?;
        queries.push((desc.data().to_vec(), entry.product_id.clone()));
    }
    Ok(retrieval::accuracy_at_k(&db, &queries, ks)?)
}

/// One mode's accuracies, one inner Vec per seed, each flattened
/// scenario-major then K-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: String,
    pub per_seed: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub scenarios: Vec<String>,
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn mean(&self, row: &AblationRow) -> Vec<f64> {
        let cols = self.scenarios.len() * self.ks.len();
        let mut out = vec![0.0; cols];
        for seed_row in &row.per_seed {
            for (o, v) in out.iter_mut().zip(seed_row) {
                *o += v;
            }
        }
        out.iter().map(|v| v / row.per_seed.len() as f64).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode");
        for s in &self.scenarios {
            for k in &self.ks {
                out.push_str(&format!(",{}@{}", s, k));
            }
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.mode);
            for v in self.mean(row) {
                out.push_str(&format!(",{:.4}", v));
            }
            out.push('\n');
        }
        out
    }
}

/// Trains the given modes for every seed on identical data and evaluates
/// scenarios A, B and C at K = 1 and 5.
pub fn ablate_modes(
    base: &TrainConfig,
    data: &TrainData,
    manifest: &DatasetManifest,
    dataset_dir: &Path,
    modes: &[Mode],
    seeds: &[u64],
) -> Result<AblationTable, TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::InvalidConfig("ablate needs at least one seed".into()));
    }
    let scenarios = vec!["A".to_string(), "B".to_string(), "C".to_string()];
    let ks = vec![1usize, 5];
    let mut rows = Vec::new();
    for &mode in modes {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.mode = mode;
            cfg.seed = seed;
            let state = train(&cfg, data, None)?;
            let mut flat = Vec::new();
            for scenario in &scenarios {
                let accs = evaluate_scenario(
                    &state.nets.encoder,
                    &state.nets.spec,
                    manifest,
                    dataset_dir,
                    scenario,
                    cfg.image_size,
                    &ks,
                )?;
                flat.extend(accs.into_iter().map(|(_, a)| a));
            }
            per_seed.push(flat);
        }
        rows.push(AblationRow { mode: mode.as_str().to_string(), per_seed });
    }
    Ok(AblationTable { scenarios, ks, seeds: seeds.to_vec(), rows })
}

/// The full six-row sweep of the ablation table.
pub fn ablate(
    base: &TrainConfig,
    data: &TrainData,
    manifest: &DatasetManifest,
    dataset_dir: &Path,
    seeds: &[u64],
) -> Result<AblationTable, TrainError> {
    ablate_modes(base, data, manifest, dataset_dir, &ALL_MODES, seeds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_catalog, CatalogConfig};

    fn zncc_of(a: &Tensor<f32>, b: &Tensor<f32>) -> f32 {
        let tape = Tape::new();
        let x = tape.input(a.clone());
        let y = tape.input(b.clone());
        tape.value(tape.zncc(x, y)).item()
    }

    fn small_catalog() -> CatalogConfig {
        CatalogConfig {
            seed: 11,
            n_macro: 2,
            n_fine_per_macro: 2,
            n_products_per_fine: 2,
            image_size: 48,
            queries_per_product: 1,
            domain_b_per_product: 1,
            seen_fraction: 0.5,
            ..CatalogConfig::default()
        }
    }

    fn small_config(manifest: PathBuf) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            total_steps: 3,
            pretrain_steps: 2,
            image_size: 48,
            manifest,
            ..TrainConfig::default()
        }
    }

    fn dataset(dir: &Path) -> (DatasetManifest, TrainData) {
        let manifest = generate_catalog(&small_catalog(), dir).unwrap();
        let data = load_train_data(&manifest, dir, 48).unwrap();
        (manifest, data)
    }

    fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Tensor<f32> {
        let data: Vec<f32> = (0..size * size * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![size, size, 3], data)
    }

    /// In-memory pool with one reference per fine class, balanced by
    /// construction.
    fn balanced_data(n_classes: usize) -> TrainData {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut edges = Vec::new();
        let mut refs = Vec::new();
        let mut by_class = BTreeMap::new();
        for i in 0..n_classes {
            let class = format!("c{}", i);
            edges.push((class.clone(), "root".to_string()));
            by_class.insert(class.clone(), vec![i]);
            refs.push(RefImage {
                product_id: format!("c{}_p0", i),
                fine_class: class,
                image: random_image(&mut rng, 8),
            });
        }
        let classes = by_class.keys().cloned().collect();
        TrainData {
            taxonomy: build_taxonomy(&edges).unwrap(),
            refs,
            classes,
            by_class,
            domain_b: vec![random_image(&mut rng, 8)],
        }
    }

    #[test]
    fn config_text_parses_with_comments_and_overrides() {
        let text = "# run settings\nmode = triplet+GAN\nsteps = 42\n\nlr_enc = 0.002 # fast\n";
        let cfg = TrainConfig::from_pairs(&parse_config_text(text).unwrap()).unwrap();
        assert_eq!(cfg.mode, Mode::TripletGan);
        assert_eq!(cfg.total_steps, 42);
        assert!((cfg.lr_enc - 0.002).abs() < 1e-9);
        // Untouched keys keep their defaults.
        assert_eq!(cfg.batch_size, 8);
    }

    #[test]
    fn config_errors() {
        assert!(matches!(
            parse_config_text("just words\n"),
            Err(TrainError::BadConfigLine { line: 1, .. })
        ));
        let mut cfg = TrainConfig::default();
        assert!(matches!(cfg.set("nope", "1"), Err(TrainError::UnknownKey(_))));
        assert!(matches!(
            cfg.set("steps", "many"),
            Err(TrainError::BadValue { .. })
        ));
        cfg.crop_min_fraction = 0.0;
        assert!(matches!(cfg.validate(), Err(TrainError::InvalidConfig(_))));
    }

    #[test]
    fn mode_strings_roundtrip() {
        for mode in ALL_MODES {
            assert_eq!(Mode::parse(mode.as_str()).unwrap(), mode);
        }
        assert!(matches!(Mode::parse("tripletgan"), Err(TrainError::BadMode(_))));
        assert!(Mode::HierarchyGanAdv.uses_gan());
        assert!(Mode::HierarchyGanAdv.adversarial_embedding());
        assert!(!Mode::HierarchyGan.adversarial_embedding());
        assert!(!Mode::Hierarchy.uses_gan());
        assert!(Mode::Hierarchy.hierarchical());
        assert!(!Mode::TripletGanAdv.hierarchical());
    }

    #[test]
    fn preprocess_square_input_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 16);
        assert_eq!(preprocess(&img, 16), img);
    }

    #[test]
    fn preprocess_wide_input_pads_bottom_with_zeros() {
        let img = Tensor::full(vec![32, 64, 3], 0.5f32);
        let out = preprocess(&img, 64);
        assert_eq!(out.shape(), &[64, 64, 3]);
        for &v in &out.data()[..32 * 64 * 3] {
            assert!((v - 0.5).abs() < 1e-5);
        }
        for &v in &out.data()[32 * 64 * 3..] {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn preprocess_white_stays_white() {
        let img = Tensor::full(vec![10, 10, 3], 1.0f32);
        let out = preprocess(&img, 20);
        for &v in out.data() {
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn random_crop_identity_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 16);
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(random_crop(&img, 1.0, &mut r1), img);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let mut r3 = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(random_crop(&img, 0.5, &mut r2), random_crop(&img, 0.5, &mut r3));
    }

    #[test]
    fn crop_rect_respects_min_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let (y0, ch, x0, cw) = crop_rect(40, 40, 0.8, &mut rng);
            assert!(ch as f32 >= (40.0f32 * 0.8).floor());
            assert!(cw as f32 >= (40.0f32 * 0.8).floor());
            assert!(y0 + ch <= 40 && x0 + cw <= 40);
            // Area bound: fraction >= min_fraction^2 up to rounding.
            assert!((ch * cw) as f32 >= 0.8 * 0.8 * 40.0 * 40.0 - 80.0);
        }
    }

    #[test]
    fn classic_augment_identity_when_disabled() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = random_image(&mut rng, 16);
        let off = AugmentJitter { blur_sigma: (0.0, 0.0), gain: (1.0, 1.0) };
        let mut r = ChaCha8Rng::seed_from_u64(8);
        assert_eq!(classic_augment(&img, 1.0, &off, &mut r), img);
    }

    #[test]
    fn classic_augment_stays_in_range_and_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = random_image(&mut rng, 16);
        let jitter = AugmentJitter { blur_sigma: (0.0, 2.0), gain: (0.3, 2.0) };
        let mut r1 = ChaCha8Rng::seed_from_u64(10);
        let a = classic_augment(&img, 0.7, &jitter, &mut r1);
        assert!(a.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        let mut r2 = ChaCha8Rng::seed_from_u64(10);
        assert_eq!(classic_augment(&img, 0.7, &jitter, &mut r2), a);
    }

    #[test]
    fn sample_triplet_classes_differ() {
        let data = balanced_data(4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let t = sample_triplet(&data, &mut rng).unwrap();
            assert_ne!(t.class_p, t.class_n);
            assert_ne!(t.positive, t.negative);
        }
    }

    #[test]
    fn sample_triplet_two_products_forces_the_other() {
        let data = balanced_data(2);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let t = sample_triplet(&data, &mut rng).unwrap();
            assert_eq!(t.negative, 1 - t.positive);
        }
    }

    #[test]
    fn negative_class_frequency_is_uniform() {
        let data = balanced_data(4);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 10000;
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for _ in 0..n {
            let t = sample_triplet(&data, &mut rng).unwrap();
            *counts.entry(t.class_n).or_insert(0) += 1;
        }
        let p = 0.25f64;
        let sigma = (p * (1.0 - p) * n as f64).sqrt();
        for (_, c) in counts {
            assert!((c as f64 - p * n as f64).abs() < 3.0 * sigma, "count {}", c);
        }
    }

    #[test]
    fn sample_triplet_empty_pools_error() {
        let mut data = balanced_data(1);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        assert!(matches!(sample_triplet(&data, &mut rng), Err(TrainError::EmptyPool(_))));
        data = balanced_data(2);
        data.domain_b.clear();
        assert!(matches!(sample_triplet(&data, &mut rng), Err(TrainError::EmptyPool(_))));
    }

    #[test]
    fn pretrain_zero_steps_is_a_no_op_and_encoder_is_isolated() {
        let dir = tempfile::tempdir().unwrap();
        let (_, data) = dataset(dir.path());
        let mut cfg = small_config(dir.path().join("manifest.json"));
        cfg.mode = Mode::HierarchyGanAdv;

        let mut state = TrainState::init(cfg.seed);
        let before = state.named_weights();
        let mut zero = cfg.clone();
        zero.pretrain_steps = 0;
        pretrain_gan(&mut state, &data, &zero).unwrap();
        assert_eq!(state.named_weights(), before);

        pretrain_gan(&mut state, &data, &cfg).unwrap();
        let after = state.named_weights();
        let enc_before: Vec<_> = before.iter().filter(|(n, _)| n.starts_with("enc.")).collect();
        let enc_after: Vec<_> = after.iter().filter(|(n, _)| n.starts_with("enc.")).collect();
        assert_eq!(enc_before, enc_after);
        assert_ne!(before, after);
    }

    #[test]
    fn pretraining_improves_reconstruction_zncc() {
        let dir = tempfile::tempdir().unwrap();
        let (_, data) = dataset(dir.path());
        let mut cfg = small_config(dir.path().join("manifest.json"));
        cfg.mode = Mode::HierarchyGan;
        cfg.pretrain_steps = 60;
        cfg.lr_gen = 3e-3;
        cfg.lr_disc = 1e-4;

        let probe = data.refs[0].image.clone();
        let shape = probe.shape().to_vec();
        let batched = probe.clone().reshaped(vec![1, shape[0], shape[1], shape[2]]);

        let mut state = TrainState::init(cfg.seed);
        let z0 = zncc_of(&probe, &state.nets.generator.translate(&batched).unwrap()
            .reshaped(shape.clone()));
        pretrain_gan(&mut state, &data, &cfg).unwrap();
        let z1 = zncc_of(&probe, &state.nets.generator.translate(&batched).unwrap()
            .reshaped(shape));
        assert!(z1 > z0, "zncc before {} after {}", z0, z1);
    }

    #[test]
    fn triplet_mode_touches_only_the_encoder() {
        let dir = tempfile::tempdir().unwrap();
        let (_, data) = dataset(dir.path());
        let mut cfg = small_config(dir.path().join("manifest.json"));
        cfg.mode = Mode::Triplet;

        let mut state = TrainState::init(cfg.seed);
        let before = state.named_weights();
        train_step(&mut state, &data, &cfg).unwrap();
        let after = state.named_weights();
        for ((name, a), (_, b)) in before.iter().zip(&after) {
            if name.starts_with("enc.") {
                continue;
            }
            assert_eq!(a, b, "{} changed in triplet mode", name);
        }
        assert_ne!(before, after, "encoder did not move");
    }

    #[test]
    fn hierarchy_margins_stay_in_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let (_, data) = dataset(dir.path());
        let mut cfg = small_config(dir.path().join("manifest.json"));
        cfg.mode = Mode::Hierarchy;
        let mut state = TrainState::init(cfg.seed);
        for _ in 0..5 {
            let row = train_step(&mut state, &data, &cfg).unwrap();
            assert!(row.margin_mean >= cfg.weights.alpha_min);
            assert!(row.margin_mean <= cfg.weights.alpha_max);
        }
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let (_, data) = dataset(dir.path());
        let mut cfg = small_config(dir.path().join("manifest.json"));
        cfg.mode = Mode::Triplet;
        cfg.total_steps = 0;
        let state = train(&cfg, &data, None).unwrap();
        assert_eq!(state.named_weights(), TrainState::init(cfg.seed).named_weights());
        assert!(state.log.is_empty());
    }

    #[test]
    fn identical_config_and_seed_is_bit_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (_, data) = dataset(dir.path());
        let mut cfg = small_config(dir.path().join("manifest.json"));
        cfg.mode = Mode::HierarchyGanAdv;
        let a = train(&cfg, &data, None).unwrap();
        let b = train(&cfg, &data, None).unwrap();
        assert_eq!(a.named_weights(), b.named_weights());
        assert_eq!(loss_csv(&a.log), loss_csv(&b.log));
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let (_, data) = dataset(dir.path());
        let mut cfg = small_config(dir.path().join("manifest.json"));
        cfg.mode = Mode::TripletGanAdv;
        cfg.pretrain_steps = 1;

        let mut full = TrainState::init(cfg.seed);
        pretrain_gan(&mut full, &data, &cfg).unwrap();
        for _ in 0..4 {
            train_step(&mut full, &data, &cfg).unwrap();
        }

        let mut half = TrainState::init(cfg.seed);
        pretrain_gan(&mut half, &data, &cfg).unwrap();
        for _ in 0..2 {
            train_step(&mut half, &data, &cfg).unwrap();
        }
        let state_dir = dir.path().join("state");
        half.save(&state_dir).unwrap();
        let mut resumed = TrainState::load(&state_dir).unwrap();
        for _ in 0..2 {
            train_step(&mut resumed, &data, &cfg).unwrap();
        }

        assert_eq!(resumed.step, full.step);
        assert_eq!(resumed.named_weights(), full.named_weights());
        assert_eq!(loss_csv(&resumed.log), loss_csv(&full.log));
        assert_eq!(resumed.rng, full.rng);
    }

    #[test]
    fn ablation_with_zero_steps_reports_identical_rows() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, data) = dataset(dir.path());
        let mut cfg = small_config(dir.path().join("manifest.json"));
        cfg.total_steps = 0;
        cfg.pretrain_steps = 0;
        let table = ablate(&cfg, &data, &manifest, dir.path(), &[cfg.seed]).unwrap();
        assert_eq!(table.rows.len(), 6);
        for row in &table.rows {
            assert_eq!(row.per_seed.len(), 1);
            assert_eq!(row.per_seed[0].len(), 6);
            assert_eq!(row.per_seed[0], table.rows[0].per_seed[0]);
        }
        let csv = table.to_csv();
        assert!(csv.starts_with("mode,A@1,A@5,B@1,B@5,C@1,C@5\n"));
        assert_eq!(csv.lines().count(), 7);
    }
}
