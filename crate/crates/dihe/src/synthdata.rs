//! Procedural product catalog: rendered reference images with a class
//! taxonomy, domain-shifted query images, an unlabeled domain-B pool and
//! the three evaluation scenario splits.

use crate::imgio::{self, gaussian_blur};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] crate::imgio::ImageError),
    #[error("manifest parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("not enough products: have {have} unseen, requested {want}")]
    NotEnoughProducts { have: usize, want: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Deterministic child seed for a labeled subcomponent (FNV-1a over the
/// parent seed and label).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in seed.to_le_bytes().iter().chain(label.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductSpec {
    pub product_id: String,
    pub fine_class: String,
    pub base_color: [f32; 3],
    pub pattern_id: u32,
    pub accent_color: [f32; 3],
    pub glyph_seed: u64,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub image: String,
    pub product_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSplit {
    pub reference_ids: Vec<String>,
    pub query_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub taxonomy_edges: Vec<(String, String)>,
    pub products: Vec<ProductSpec>,
    pub queries: Vec<QueryEntry>,
    pub domain_b_unlabeled: Vec<String>,
    pub splits: BTreeMap<String, ScenarioSplit>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn product(&self, id: &str) -> Option<&ProductSpec> {
        self.products.iter().find(|p| p.product_id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainShiftParams {
    pub blur_sigma: (f32, f32),
    pub gain: (f32, f32),
    pub brightness: (f32, f32),
    pub occlusion_prob: f32,
    pub occlusion_max_fraction: f32,
}

impl Default for DomainShiftParams {
    fn default() -> Self {
        DomainShiftParams {
            blur_sigma: (0.5, 1.5),
            gain: (0.7, 1.3),
            brightness: (-0.2, 0.2),
            occlusion_prob: 0.3,
            occlusion_max_fraction: 0.25,
        }
    }
}

impl DomainShiftParams {
    /// Parameters that leave the image untouched.
    pub fn identity() -> Self {
        DomainShiftParams {
            blur_sigma: (0.0, 0.0),
            gain: (1.0, 1.0),
            brightness: (0.0, 0.0),
            occlusion_prob: 0.0,
            occlusion_max_fraction: 0.0,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        let ordered = self.blur_sigma.0 <= self.blur_sigma.1
            && self.gain.0 <= self.gain.1
            && self.brightness.0 <= self.brightness.1;
        if !ordered {
            return Err(DataError::InvalidConfig("domain shift ranges must be ordered".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob)
            || !(0.0..=1.0).contains(&self.occlusion_max_fraction)
        {
            return Err(DataError::InvalidConfig("occlusion fractions must be in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogConfig {
    pub seed: u64,
    pub n_macro: usize,
    pub n_fine_per_macro: usize,
    pub n_products_per_fine: usize,
    pub image_size: usize,
    pub queries_per_product: usize,
    pub domain_b_per_product: usize,
    pub shift: DomainShiftParams,
    pub seen_fraction: f32,
    pub extra_unseen_products: usize,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        CatalogConfig {
            seed: 7,
            n_macro: 4,
            n_fine_per_macro: 5,
            n_products_per_fine: 3,
            image_size: 64,
            queries_per_product: 2,
            domain_b_per_product: 1,
            shift: DomainShiftParams::default(),
            seen_fraction: 0.4,
            extra_unseen_products: 0,
        }
    }
}

fn sample_range(rng: &mut ChaCha8Rng, range: (f32, f32)) -> f32 {
    if range.0 >= range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

/// Renders the studio reference image of a product: base-colored background,
/// a pattern family shared by the fine class, and a few accent glyphs that
/// tell products of the same fine class apart.
pub fn render_reference(spec: &ProductSpec, size: usize) -> Tensor<f32> {
    let mut data = vec![0.0f32; size * size * 3];
    let base = spec.base_color;
    // Pattern color is a fixed shade of the base so same-class products match.
    let shade: [f32; 3] = std::array::from_fn(|c| (base[c] * 0.5 - 0.3).clamp(-1.0, 1.0));
    for y in 0..size {
        for x in 0..size {
            let on = match spec.pattern_id % 3 {
                0 => (x / 6) % 2 == 0,                                   // stripes
                1 => ((x / 8) + (y / 8)) % 2 == 0,                       // checker
                _ => {
                    let dx = x as f32 - size as f32 / 2.0;
                    let dy = y as f32 - size as f32 / 2.0;
                    ((dx * dx + dy * dy).sqrt() as usize / 6) % 2 == 0   // rings
                }
            };
            let color = if on { base } else { shade };
            for c in 0..3 {
                data[(y * size + x) * 3 + c] = color[c];
            }
        }
    }
    let mut img = Tensor::new(vec![size, size, 3], data);
    // 2-4 accent glyphs keyed by the glyph seed.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.glyph_seed);
    let n_glyphs = rng.gen_range(2..=4);
    for _ in 0..n_glyphs {
        let gw = rng.gen_range(size / 12..size / 5).max(2);
        let gh = rng.gen_range(size / 12..size / 5).max(2);
        let gx = rng.gen_range(0..size - gw);
        let gy = rng.gen_range(0..size - gh);
        let disc = rng.gen_bool(0.5);
        for y in gy..gy + gh {
            for x in gx..gx + gw {
                if disc {
                    let dx = (x as f32 - (gx as f32 + gw as f32 / 2.0)) / (gw as f32 / 2.0);
                    let dy = (y as f32 - (gy as f32 + gh as f32 / 2.0)) / (gh as f32 / 2.0);
                    if dx * dx + dy * dy > 1.0 {
                        continue;
                    }
                }
                for c in 0..3 {
                    img.data_mut()[(y * size + x) * 3 + c] = spec.accent_color[c];
                }
            }
        }
    }
    img
}

/// Simulates the in-store capture domain: blur, per-channel gain, brightness
/// shift and an optional occluding rectangle, clamped back to [-1, 1].
pub fn apply_store_domain(
    image: &Tensor<f32>,
    params: &DomainShiftParams,
    seed: u64,
) -> Result<Tensor<f32>, DataError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = sample_range(&mut rng, params.blur_sigma);
    let gains: [f32; 3] = std::array::from_fn(|_| sample_range(&mut rng, params.gain));
    let brightness = sample_range(&mut rng, params.brightness);
    let mut out = gaussian_blur(image, sigma);
    let (h, w) = (out.shape()[0], out.shape()[1]);
    if gains != [1.0; 3] || brightness != 0.0 {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = &mut out.data_mut()[(y * w + x) * 3 + c];
                    // Gain acts on [0,1] intensities, brightness on top.
                    let lin = (*v + 1.0) * 0.5 * gains[c] + brightness;
                    *v = (lin * 2.0 - 1.0).clamp(-1.0, 1.0);
                }
            }
        }
    }
    if params.occlusion_prob > 0.0 && rng.gen::<f32>() < params.occlusion_prob {
        let max_side = ((params.occlusion_max_fraction * w.min(h) as f32) as usize).max(1);
        let ow = rng.gen_range(1..=max_side);
        let oh = rng.gen_range(1..=max_side);
        let ox = rng.gen_range(0..w - ow + 1);
        let oy = rng.gen_range(0..h - oh + 1);
        let color: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..0.0));
        for y in oy..oy + oh {
            for x in ox..ox + ow {
                for c in 0..3 {
                    out.data_mut()[(y * w + x) * 3 + c] = color[c];
                }
            }
        }
    }
    Ok(out)
}

/// Computes the three scenario splits over the manifest's products.
/// Scenario A: reference set = the training (seen) products. Scenario B:
/// seen and unseen references mixed. Scenario C: unseen products only.
pub fn make_splits(
    products: &[ProductSpec],
    queries: &[QueryEntry],
    seen_fraction: f32,
    extra_unseen_products: usize,
    seed: u64,
) -> Result<BTreeMap<String, ScenarioSplit>, DataError> {
    if !(seen_fraction > 0.0 && seen_fraction <= 1.0) {
        return Err(DataError::InvalidConfig(format!(
            "seen_fraction {} outside (0,1]",
            seen_fraction
        )));
    }
    let mut ids: Vec<String> = products.iter().map(|p| p.product_id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "splits"));
    // Fisher-Yates so seen/unseen membership is not correlated with class.
    for i in (1..ids.len()).rev() {
        ids.swap(i, rng.gen_range(0..=i));
    }
    let n_seen = ((seen_fraction * products.len() as f32).ceil() as usize)
        .clamp(1, products.len());
    let (seen, unseen) = ids.split_at(n_seen);
    if unseen.len() < extra_unseen_products {
        return Err(DataError::NotEnoughProducts {
            have: unseen.len(),
            want: extra_unseen_products,
        });
    }
    let mut seen: Vec<String> = seen.to_vec();
    let mut unseen: Vec<String> = unseen.to_vec();
    seen.sort();
    unseen.sort();
    let query_indices = |refs: &[String]| -> Vec<usize> {
        queries
            .iter()
            .enumerate()
            .filter(|(_, q)| refs.contains(&q.product_id))
            .map(|(i, _)| i)
            .collect()
    };
    let mut all = seen.clone();
    all.extend(unseen.iter().cloned());
    all.sort();
    let mut splits = BTreeMap::new();
    splits.insert(
        "A".to_string(),
        ScenarioSplit { query_indices: query_indices(&seen), reference_ids: seen },
    );
    splits.insert(
        "B".to_string(),
        ScenarioSplit { query_indices: query_indices(&all), reference_ids: all },
    );
    splits.insert(
        "C".to_string(),
        ScenarioSplit { query_indices: query_indices(&unseen), reference_ids: unseen },
    );
    Ok(splits)
}

/// Generates the full dataset tree under `out_dir`: reference/, queries/,
/// domain_b/ and manifest.json. Deterministic for a fixed config.
pub fn generate_catalog(cfg: &CatalogConfig, out_dir: &Path) -> Result<DatasetManifest, DataError> {
    if cfg.n_macro < 1 || cfg.n_fine_per_macro < 1 || cfg.n_products_per_fine < 1 {
        return Err(DataError::InvalidConfig("all catalog counts must be >= 1".into()));
    }
    cfg.shift.validate()?;
    fs::create_dir_all(out_dir.join("reference"))?;
    fs::create_dir_all(out_dir.join("queries"))?;
    fs::create_dir_all(out_dir.join("domain_b"))?;

    // Root -> macro -> fine, three levels.
    let mut taxonomy_edges = Vec::new();
    let mut fine_classes = Vec::new();
    for m in 0..cfg.n_macro {
        let macro_name = format!("macro{:02}", m);
        taxonomy_edges.push((macro_name.clone(), "root".to_string()));
        for f in 0..cfg.n_fine_per_macro {
            let fine = format!("{}_fine{:02}", macro_name, f);
            taxonomy_edges.push((fine.clone(), macro_name.clone()));
            fine_classes.push(fine);
        }
    }

    let mut class_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "classes"));
    let mut products = Vec::new();
    for fine in &fine_classes {
        // Shared per fine class: base color and pattern family.
        let base: [f32; 3] = std::array::from_fn(|_| class_rng.gen_range(-0.5..1.0));
        let pattern_id: u32 = class_rng.gen_range(0..3);
        for p in 0..cfg.n_products_per_fine {
            let product_id = format!("{}_p{:02}", fine, p);
            let mut prod_rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("product:{}", product_id)));
            let accent: [f32; 3] = std::array::from_fn(|_| prod_rng.gen_range(-1.0..1.0));
            let spec = ProductSpec {
                reference: format!("reference/{}.png", product_id),
                product_id,
                fine_class: fine.clone(),
                base_color: base,
                pattern_id,
                accent_color: accent,
                glyph_seed: prod_rng.gen(),
            };
            let img = render_reference(&spec, cfg.image_size);
            imgio::save_png(&img, &out_dir.join(&spec.reference))?;
            products.push(spec);
        }
    }

    let mut queries = Vec::new();
    for prod in &products {
        let reference = imgio::load_png(&out_dir.join(&prod.reference))?;
        for q in 0..cfg.queries_per_product {
            let seed = derive_seed(cfg.seed, &format!("query:{}:{}", prod.product_id, q));
            let img = apply_store_domain(&reference, &cfg.shift, seed)?;
            let rel = format!("queries/{}_q{:02}.png", prod.product_id, q);
            imgio::save_png(&img, &out_dir.join(&rel))?;
            queries.push(QueryEntry { image: rel, product_id: prod.product_id.clone() });
        }
    }

    // Unlabeled store-domain pool for GAN training, disjoint from queries by
    // construction (independent seeds and files).
    let mut domain_b_unlabeled = Vec::new();
    for prod in &products {
        let reference = imgio::load_png(&out_dir.join(&prod.reference))?;
        for b in 0..cfg.domain_b_per_product {
            let seed = derive_seed(cfg.seed, &format!("domain_b:{}:{}", prod.product_id, b));
            let img = apply_store_domain(&reference, &cfg.shift, seed)?;
            let rel = format!("domain_b/{}_b{:02}.png", prod.product_id, b);
            imgio::save_png(&img, &out_dir.join(&rel))?;
            domain_b_unlabeled.push(rel);
        }
    }

    let splits = make_splits(
        &products,
        &queries,
        cfg.seen_fraction,
        cfg.extra_unseen_products,
        cfg.seed,
    )?;
    let manifest = DatasetManifest {
        taxonomy_edges,
        products,
        queries,
        domain_b_unlabeled,
        splits,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}
