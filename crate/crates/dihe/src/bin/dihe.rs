//! Command-line entry points for the recognition pipeline.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dihe::synthdata::{generate_catalog, CatalogConfig, DatasetManifest};
use dihe::tensor::{Scalar, Tape};
use dihe::training::{
    self, ablate, load_train_data, train, TrainConfig, TrainState,
};
use dihe::{gradsuite, imgio, retrieval};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "dihe", version, about = "Domain-invariant hierarchical embedding pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic product catalog with queries and splits.
    GenData {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        macros: usize,
        #[arg(long, default_value_t = 5)]
        fine_per_macro: usize,
        #[arg(long, default_value_t = 3)]
        products_per_fine: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        queries_per_product: usize,
        #[arg(long, default_value_t = 1)]
        domain_b_per_product: usize,
        #[arg(long, default_value_t = 0.4)]
        seen_fraction: f32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one mode; writes checkpoints and the loss CSV to --out.
    Train {
        #[command(flatten)]
        overrides: ConfigFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all six modes per seed and emit the accuracy table CSV.
    Ablate {
        #[command(flatten)]
        overrides: ConfigFlags,
        /// Comma-separated training seeds.
        #[arg(long, default_value = "1")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode every product reference image into a descriptor file.
    Encode {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the reference descriptor database for one scenario.
    BuildDb {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "A")]
        scenario: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate accuracy@K for one scenario.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "A")]
        scenario: String,
        /// Comma-separated K values.
        #[arg(long, default_value = "1,5")]
        k_list: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the generator on one image for visual inspection.
    Translate {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks over the differentiable op set.
    Gradcheck {
        /// "all" or a comma-separated op list.
        #[arg(long, default_value = "all")]
        ops: String,
        #[arg(long, default_value_t = 10)]
        trials: usize,
    },
}

/// One optional flag per training config key; flags override the config
/// file.
#[derive(clap::Args)]
struct ConfigFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    lr_gen: Option<String>,
    #[arg(long)]
    lr_disc: Option<String>,
    #[arg(long)]
    lr_enc: Option<String>,
    #[arg(long)]
    lambda_reg: Option<String>,
    #[arg(long)]
    lambda_emb: Option<String>,
    #[arg(long)]
    alpha_min: Option<String>,
    #[arg(long)]
    alpha_max: Option<String>,
    #[arg(long)]
    fixed_alpha: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    pretrain_steps: Option<String>,
    #[arg(long)]
    crop_min_fraction: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    image_size: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<String>,
}

impl ConfigFlags {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_file(path)
                .with_context(|| format!("reading config {}", path.display()))?,
            None => TrainConfig::default(),
        };
        let pairs: [(&str, Option<String>); 16] = [
            ("mode", self.mode.clone()),
            ("lr_gen", self.lr_gen.clone()),
            ("lr_disc", self.lr_disc.clone()),
            ("lr_enc", self.lr_enc.clone()),
            ("lambda_reg", self.lambda_reg.clone()),
            ("lambda_emb", self.lambda_emb.clone()),
            ("alpha_min", self.alpha_min.clone()),
            ("alpha_max", self.alpha_max.clone()),
            ("fixed_alpha", self.fixed_alpha.clone()),
            ("batch_size", self.batch_size.clone()),
            ("steps", self.steps.clone()),
            ("pretrain_steps", self.pretrain_steps.clone()),
            ("crop_min_fraction", self.crop_min_fraction.clone()),
            ("seed", self.seed.clone()),
            ("image_size", self.image_size.clone()),
            ("checkpoint_every", self.checkpoint_every.clone()),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        if let Some(m) = &self.manifest {
            cfg.manifest = m.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| anyhow::anyhow!("bad {} entry '{}'", what, p))
        })
        .collect()
}

fn load_manifest(path: &Path) -> Result<(DatasetManifest, PathBuf)> {
    let manifest = DatasetManifest::load(path)
        .with_context(|| format!("loading manifest {}", path.display()))?;
    let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((manifest, dir))
}

fn load_state(dir: &Path) -> Result<TrainState> {
    TrainState::load(dir).with_context(|| format!("loading weights from {}", dir.display()))
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenData {
            seed,
            macros,
            fine_per_macro,
            products_per_fine,
            size,
            queries_per_product,
            domain_b_per_product,
            seen_fraction,
            out,
        } => {
            if macros == 0 || fine_per_macro == 0 || products_per_fine == 0 {
                bail!("catalog dimensions must all be positive");
            }
            let cfg = CatalogConfig {
                seed,
                n_macro: macros,
                n_fine_per_macro: fine_per_macro,
                n_products_per_fine: products_per_fine,
                image_size: size,
                queries_per_product,
                domain_b_per_product,
                seen_fraction,
                ..CatalogConfig::default()
            };
            let manifest = generate_catalog(&cfg, &out)?;
            println!(
                "wrote {} products, {} queries, {} domain-B images to {}",
                manifest.products.len(),
                manifest.queries.len(),
                manifest.domain_b_unlabeled.len(),
                out.display()
            );
        }
        Command::Train { overrides, out } => {
            let cfg = overrides.resolve()?;
            let (manifest, dir) = load_manifest(&cfg.manifest)?;
            let data = load_train_data(&manifest, &dir, cfg.image_size)?;
            let state = train(&cfg, &data, Some(&out))?;
            let last = state.log.last().copied();
            match last {
                Some(row) => println!(
                    "finished mode {} at step {} (L_enc {:.4})",
                    cfg.mode, state.step, row.l_enc
                ),
                None => println!("finished mode {} with no steps", cfg.mode),
            }
        }
        Command::Ablate { overrides, seeds, out } => {
            let cfg = overrides.resolve()?;
            let seeds: Vec<u64> = parse_list(&seeds, "seed")?;
            let (manifest, dir) = load_manifest(&cfg.manifest)?;
            let data = load_train_data(&manifest, &dir, cfg.image_size)?;
            let table = ablate(&cfg, &data, &manifest, &dir, &seeds)?;
            let csv = table.to_csv();
            std::fs::write(&out, &csv)?;
            print!("{}", csv);
        }
        Command::Encode { weights, manifest, out } => {
            let state = load_state(&weights)?;
            let (manifest, dir) = load_manifest(&manifest)?;
            let mut refs = Vec::new();
            for product in &manifest.products {
                let image = training::preprocess(
                    &imgio::load_png(&dir.join(&product.reference))?,
                    64,
                );
                refs.push((product.product_id.clone(), image));
            }
            let db = retrieval::build_db(&state.nets.encoder, &state.nets.spec, &refs)?;
            retrieval::save_db(&db, &out)?;
            println!("encoded {} references ({}-d) to {}", db.len(), db.dim(), out.display());
        }
        Command::BuildDb { weights, manifest, scenario, out } => {
            let state = load_state(&weights)?;
            let (manifest, dir) = load_manifest(&manifest)?;
            let split = manifest
                .splits
                .get(&scenario)
                .with_context(|| format!("scenario '{}' not in manifest", scenario))?;
            let mut refs = Vec::new();
            for id in &split.reference_ids {
                let product = manifest
                    .product(id)
                    .with_context(|| format!("product '{}' not in manifest", id))?;
                let image = training::preprocess(
                    &imgio::load_png(&dir.join(&product.reference))?,
                    64,
                );
                refs.push((id.clone(), image));
            }
            let db = retrieval::build_db(&state.nets.encoder, &state.nets.spec, &refs)?;
            retrieval::save_db(&db, &out)?;
            println!(
                "scenario {} database: {} references to {}",
                scenario,
                db.len(),
                out.display()
            );
        }
        Command::Eval { weights, manifest, scenario, k_list, out } => {
            let state = load_state(&weights)?;
            let (manifest, dir) = load_manifest(&manifest)?;
            let ks: Vec<usize> = parse_list(&k_list, "K")?;
            let accs = training::evaluate_scenario(
                &state.nets.encoder,
                &state.nets.spec,
                &manifest,
                &dir,
                &scenario,
                64,
                &ks,
            )?;
            let mut csv = String::from("k,accuracy\n");
            for (k, a) in &accs {
                csv.push_str(&format!("{},{:.4}\n", k, a));
            }
            if let Some(path) = out {
                std::fs::write(&path, &csv)?;
            }
            print!("{}", csv);
        }
        Command::Translate { weights, image, out } => {
            let state = load_state(&weights)?;
            let input = imgio::load_png(&image)?;
            let (h, w) = (input.shape()[0], input.shape()[1]);
            let div = 1usize << state.nets.generator.depth();
            if h % div != 0 || w % div != 0 {
                bail!("image {}x{} must have sides divisible by {}", h, w, div);
            }
            let batched = input.clone().reshaped(vec![1, h, w, 3]);
            let output = state
                .nets
                .generator
                .translate(&batched)?
                .reshaped(vec![h, w, 3]);
            imgio::save_png(&output, &out)?;
            let tape = Tape::new();
            let a = tape.input(input);
            let b = tape.input(output);
            let z = tape.value(tape.zncc(a, b)).item();
            println!("wrote {} (zncc {:.4})", out.display(), z);
        }
        Command::Gradcheck { ops, trials } => {
            let names: Vec<String> = if ops == "all" {
                gradsuite::OPS.iter().map(|s| s.to_string()).collect()
            } else {
                ops.split(',').map(|s| s.trim().to_string()).collect()
            };
            let mut failures = 0usize;
            for name in &names {
                failures += report::<f32>(name, trials)?;
                failures += report::<f64>(name, trials)?;
            }
            if failures > 0 {
                bail!("{} gradient check(s) failed", failures);
            }
        }
    }
    Ok(())
}

fn report<F: Scalar>(name: &str, trials: usize) -> Result<usize> {
    let bits = 8 * std::mem::size_of::<F>();
    let err = gradsuite::check_op::<F>(name, trials, 0xd1e5)
        .with_context(|| format!("unknown op '{}'", name))?;
    let tol = gradsuite::tolerance::<F>();
    let ok = err < tol;
    println!(
        "{:<20} f{} {} (max rel err {:.2e}, tol {:.0e})",
        name,
        bits,
        if ok { "pass" } else { "FAIL" },
        err,
        tol
    );
    Ok(usize::from(!ok))
}

fn main() {
    dihe::tune_allocator();
    if let Err(e) = run() {
        eprintln!("error: {:#}", e);
        std::process::exit(1);
    }
}
