//! Procedural multi-site corpora standing in for multi-label radiograph data:
//! label-state semantics, patient-level splits, preprocessing, and
//! real/synthetic training-set mixing.

mod io;
mod preprocess;
mod site;

pub use io::{load_dataset, read_pgm, save_dataset, write_pgm, DATASET_FORMAT, MANIFEST_FILE, PIXELS_FILE};
pub use preprocess::{equalize_histogram, pad_to_square, preprocess, resize_bilinear, RawImage};
pub use site::{generate_site, Boost, RenderParams, SiteSpec};

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditionVector, N_PATHOLOGIES};
use crate::error::{invalid, Result};
use crate::rng::{derive_seed, rng_from_seed, stream};

pub const N_LABELS: usize = N_PATHOLOGIES;

pub const LABEL_NAMES: [&str; N_LABELS] = [
    "No Finding",
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Lesion",
    "Lung Opacity",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
];

/// Report-derived state of one label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelState {
    Present,
    Absent,
    NotMentioned,
    Uncertain,
}

impl LabelState {
    pub const ALL: [LabelState; 4] = [Self::Present, Self::Absent, Self::NotMentioned, Self::Uncertain];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub age_decade: u8,
    pub sex: u8,
    pub race: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Synthetic {
        seed: u64,
        cfg_scale: f64,
        /// 1-based replica index.
        replica: u32,
        source_id: u64,
    },
}

impl Provenance {
    pub fn is_real(&self) -> bool {
        matches!(self, Provenance::Real)
    }

    pub fn replica(&self) -> Option<u32> {
        match self {
            Provenance::Synthetic { replica, .. } => Some(*replica),
            Provenance::Real => None,
        }
    }
}

/// One grayscale image (row-major, values in `[0, 1]`) with its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: u64,
    pub patient_id: u64,
    pub pixels: Vec<f32>,
    pub label_states: [LabelState; N_LABELS],
    pub demographics: Demographics,
    pub provenance: Provenance,
}

impl ImageRecord {
    /// The conditioning signal: pathologies are the `Present` labels.
    pub fn condition(&self) -> ConditionVector {
        let mut p = [false; N_LABELS];
        for (slot, s) in p.iter_mut().zip(&self.label_states) {
            *slot = *s == LabelState::Present;
        }
        ConditionVector {
            pathologies: p,
            age_decade: self.demographics.age_decade,
            sex: self.demographics.sex,
            race: self.demographics.race,
            is_null: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub image_size: usize,
    pub records: Vec<ImageRecord>,
}

impl Dataset {
    pub fn new(image_size: usize, records: Vec<ImageRecord>) -> Self {
        Self { image_size, records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn all_real(&self) -> bool {
        self.records.iter().all(|r| r.provenance.is_real())
    }

    pub fn patient_ids(&self) -> BTreeSet<u64> {
        self.records.iter().map(|r| r.patient_id).collect()
    }

    /// Records usable for training: any `Uncertain` label excludes the image.
    pub fn trainable(&self) -> Dataset {
        Dataset {
            image_size: self.image_size,
            records: self.records.iter().filter(|r| resolve_labels(&r.label_states, LabelMode::Training).keep).cloned().collect(),
        }
    }

    /// Binary `Present` matrix, one row per record.
    pub fn present_matrix(&self) -> Vec<[bool; N_LABELS]> {
        self.records.iter().map(|r| r.condition().pathologies).collect()
    }

    /// Fraction of records whose label is `Present`.
    pub fn prevalences(&self) -> [f64; N_LABELS] {
        let mut out = [0.0; N_LABELS];
        if self.records.is_empty() {
            return out;
        }
        for row in self.present_matrix() {
            for (o, &v) in out.iter_mut().zip(&row) {
                *o += v as u8 as f64;
            }
        }
        out.iter_mut().for_each(|v| *v /= self.records.len() as f64);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    Training,
    Testing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolvedLabels {
    pub targets: [bool; N_LABELS],
    pub mask: [bool; N_LABELS],
    pub keep: bool,
}

/// NotMentioned counts as Absent. In training any Uncertain label drops the
/// image; in testing the image is kept and its Uncertain labels are masked.
pub fn resolve_labels(states: &[LabelState; N_LABELS], mode: LabelMode) -> ResolvedLabels {
    let mut targets = [false; N_LABELS];
    let mut mask = [true; N_LABELS];
    let mut any_uncertain = false;
    for (i, s) in states.iter().enumerate() {
        match s {
            LabelState::Present => targets[i] = true,
            LabelState::Absent | LabelState::NotMentioned => {}
            LabelState::Uncertain => {
                mask[i] = false;
                any_uncertain = true;
            }
        }
    }
    let keep = !(mode == LabelMode::Training && any_uncertain);
    ResolvedLabels { targets, mask, keep }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub split_seed: u64,
}

/// Shuffles patients with `seed` and partitions them so that every image of
/// a patient lands in exactly one part.
pub fn split_by_patient(dataset: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let mut patients: Vec<u64> = dataset.patient_ids().into_iter().collect();
    let mut rng = rng_from_seed(derive_seed(seed, &[stream::SPLIT]));
    patients.shuffle(&mut rng);
    let n = patients.len();
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let part: BTreeMap<u64, u8> = patients
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, if i < n_train { 0 } else if i < n_train + n_val { 1 } else { 2 }))
        .collect();
    let pick = |k: u8| Dataset {
        image_size: dataset.image_size,
        records: dataset.records.iter().filter(|r| part[&r.patient_id] == k).cloned().collect(),
    };
    Ok(DatasetSplit { train: pick(0), val: pick(1), test: pick(2), split_seed: seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupplementMode {
    /// Real records plus synthetic replicas.
    Mixed,
    /// Synthetic replicas only.
    PureSynthetic,
}

pub fn validate_ratio(ratio_percent: u32) -> Result<()> {
    if ratio_percent > 1000 || !ratio_percent.is_multiple_of(100) {
        return Err(invalid(format!("ratio {ratio_percent}% is not one of 0, 100, ..., 1000")));
    }
    Ok(())
}

/// Training set with `ratio/100` synthetic replica sets added to (or, in
/// pure-synthetic mode, replacing) the real records. Replicas are taken by
/// index `1..=ratio/100`.
pub fn supplement(real: &Dataset, synthetic: &Dataset, ratio_percent: u32, mode: SupplementMode) -> Result<Dataset> {
    validate_ratio(ratio_percent)?;
    let k = ratio_percent / 100;
    if mode == SupplementMode::PureSynthetic && k == 0 {
        return Err(invalid("pure-synthetic training needs a non-zero ratio"));
    }
    if real.image_size != synthetic.image_size && k > 0 {
        return Err(invalid("real and synthetic image sizes differ"));
    }
    if !real.all_real() {
        return Err(invalid("the real set contains synthetic records"));
    }
    let available: BTreeSet<u32> = synthetic.records.iter().filter_map(|r| r.provenance.replica()).collect();
    if let Some(missing) = (1..=k).find(|i| !available.contains(i)) {
        return Err(invalid(format!(
            "synthetic pool lacks replica {missing} needed for {ratio_percent}% (has {} replica sets)",
            available.len()
        )));
    }
    let mut records = match mode {
        SupplementMode::Mixed => real.records.clone(),
        SupplementMode::PureSynthetic => Vec::new(),
    };
    for i in 1..=k {
        records.extend(synthetic.records.iter().filter(|r| r.provenance.replica() == Some(i)).cloned());
    }
    Ok(Dataset { image_size: real.image_size, records })
}
