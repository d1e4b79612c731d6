use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::ClassifierConfig;
use crate::error::{invalid, Result};
use crate::toydata::{validate_ratio, SiteSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Real siteA plus synthetic replicas of it.
    SupplementSameOrigin,
    /// Synthetic replicas only, real validation.
    PureSynthetic,
    /// Real siteB plus synthetic replicas of siteA.
    CrossSiteMix,
}

impl Family {
    /// Series name used in figure CSVs.
    pub fn regime(self) -> &'static str {
        match self {
            Family::SupplementSameOrigin => "supplemented",
            Family::PureSynthetic => "synthetic_only",
            Family::CrossSiteMix => "cross_site",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub site_a: SiteSpec,
    pub site_b: SiteSpec,
    /// Images per site before the train/validation split.
    pub train_images: usize,
    pub test_images: usize,
    /// Fraction of each site's training patients held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            site_a: SiteSpec::site_a(),
            site_b: SiteSpec::site_b(),
            train_images: 2000,
            test_images: 1000,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    /// Denoiser checkpoint trained on the siteA training split.
    pub checkpoint: PathBuf,
    /// Replica sets kept in the shared pool; at least the largest ratio / 100.
    pub pool_replicas: u32,
    pub cfg_scale: f64,
    pub sampling_steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    pub alpha: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { replicates: 1000, seed: 0, alpha: 0.05 }
    }
}

/// Optional sweep of guidance scales scored by Fréchet distance in the
/// feature space of the first-seed real-data classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrechetConfig {
    pub cfg_scales: Vec<f64>,
    pub n_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub family: Family,
    pub ratios: Vec<u32>,
    /// Classifier seeds; every ratio is trained once per seed.
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub data: DataConfig,
    pub synthesis: SynthesisConfig,
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    #[serde(default)]
    pub frechet: Option<FrechetConfig>,
    pub output_dir: PathBuf,
    /// Shared store for the synthetic pool and trained classifiers; entries
    /// are content-addressed, so several runs may point at one directory.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

pub const DEFAULT_RATIOS: [u32; 4] = [0, 100, 200, 300];
pub const DESK_SAMPLING_STEPS: usize = 25;

impl ExperimentConfig {
    /// Desk-scale defaults: ratios 0 to 300%, three seeds, CFG scale 0.
    pub fn desk(family: Family, checkpoint: PathBuf, output_dir: PathBuf) -> Self {
        let ratios: Vec<u32> = match family {
            Family::PureSynthetic => DEFAULT_RATIOS.iter().copied().filter(|&r| r > 0).collect(),
            _ => DEFAULT_RATIOS.to_vec(),
        };
        Self {
            family,
            ratios,
            seeds: vec![1, 2, 3],
            data: DataConfig::default(),
            synthesis: SynthesisConfig {
                checkpoint,
                pool_replicas: 3,
                cfg_scale: 0.0,
                sampling_steps: DESK_SAMPLING_STEPS,
                seed: 0,
            },
            classifier: ClassifierConfig::desk(),
            bootstrap: BootstrapConfig::default(),
            frechet: None,
            output_dir,
            cache_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() || self.seeds.is_empty() {
            return Err(invalid("ratios and seeds must be non-empty"));
        }
        for &r in &self.ratios {
            validate_ratio(r)?;
        }
        let mut sorted = self.ratios.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.ratios.len() {
            return Err(invalid("ratios must be distinct"));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(invalid("seeds must be distinct"));
        }
        if self.family == Family::PureSynthetic && self.ratios.contains(&0) {
            return Err(invalid("pure_synthetic runs need a non-zero ratio"));
        }
        if self.synthesis.pool_replicas < self.max_replicas() {
            return Err(invalid(format!(
                "pool of {} replicas cannot serve ratio {}%",
                self.synthesis.pool_replicas,
                self.max_replicas() * 100
            )));
        }
        if !(self.synthesis.cfg_scale >= 0.0 && self.synthesis.cfg_scale.is_finite()) || self.synthesis.sampling_steps == 0 {
            return Err(invalid("guidance scale must be finite and non-negative, steps positive"));
        }
        let d = &self.data;
        if d.train_images == 0 || d.test_images == 0 || !(d.val_fraction > 0.0 && d.val_fraction < 1.0) {
            return Err(invalid("data sizes must be positive and the validation fraction in (0, 1)"));
        }
        for site in [&d.site_a, &d.site_b] {
            site.validate()?;
            if site.image_size != self.classifier.image_size {
                return Err(invalid(format!("site {} renders {}px, classifier expects {}px", site.site_name, site.image_size, self.classifier.image_size)));
            }
        }
        if self.bootstrap.replicates == 0 || !(self.bootstrap.alpha > 0.0 && self.bootstrap.alpha < 1.0) {
            return Err(invalid("bootstrap needs replicates and an alpha in (0, 1)"));
        }
        if let Some(f) = &self.frechet {
            if f.n_images < 2 || f.cfg_scales.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
                return Err(invalid("Fréchet sweep needs at least 2 images and valid scales"));
            }
        }
        self.classifier.validate()
    }

    pub fn max_replicas(&self) -> u32 {
        self.ratios.iter().map(|r| r / 100).max().unwrap_or(0)
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        Ok(cfg)
    }

    /// sha256 of the canonical (key-sorted, compact) JSON form.
    pub fn hash(&self) -> Result<String> {
        canonical_hash(self)
    }
}

/// Hash of a value's JSON with object keys sorted, so field order in the
/// source file does not matter.
pub fn canonical_hash<T: Serialize>(v: &T) -> Result<String> {
    // serde_json's default map is ordered by key.
    let value = serde_json::to_value(v)?;
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&value)?)))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}
