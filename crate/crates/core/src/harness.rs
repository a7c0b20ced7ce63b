//! Experiment orchestration: baseline training, per-chip finetuning, the
//! three attack cases, the cross-chip transfer matrix and report files.
//!
//! The chip grid is a list of chips, each tagged with a configuration
//! label. Chips sharing a label form one table row: the first is chip1, the
//! second chip2.
//!
//! * Case 1 attacks model0 in software and replays the examples on each
//!   row's chip1.
//! * Case 2 reads chip1's weights out into model1, attacks model1 in
//!   software and replays on chip1.
//! * Case 3 attacks chip2 with the chip in the loop (forward on chip,
//!   backward in software) and replays on chip1.
//!
//! Every attack runs on the same fixed slice of the test split. Clean
//! accuracies use the first `samples.eval` test images.
//!
//! Output directory layout written by [`emit_report`] and
//! [`save_artifacts`]:
//!
//! ```text
//! report.json           full TransferReport
//! table1.csv            one row per chip configuration (TABLE1_HEADER)
//! table2.csv            one row per attack norm, first configuration (TABLE2_HEADER)
//! transfer_matrix.csv   accuracy of chip j (columns) on chip i's examples (rows)
//! adv/<name>.cimadv     every adversarial set a cell was computed from
//! model0.json           baseline checkpoint
//! chips/<name>.chip.json    chip descriptor
//! chips/<name>.model.json   finetuned model programmed on that chip
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adcmodel::{AdcKind, PassRateCurve};
use crate::attack::{evaluate_on, run_attack, AdversarialSet, AttackConfig, GradientSource, Norm};
use crate::chip::{make_chip, ChipDescriptor, ChipInstance};
use crate::crossbar::ArrayConfig;
use crate::dataio::{load_cifar10, load_mnist, Dataset, FileChecksum, Split};
use crate::error::{Error, Result};
use crate::nnquant::{
    accuracy, finetune_hybrid, load_checkpoint, save_checkpoint, train_baseline, Checkpoint, FinetuneConfig,
    FinetuneReport, LayerKind, QuantConfig, QuantizedModel, Tensor, TrainConfig, TrainReport,
    CHECKPOINT_FORMAT_VERSION,
};
use crate::numstat::{derive_stream, ALGORITHM_ID};

pub const EXPERIMENT_FORMAT_VERSION: u32 = 1;
pub const REPORT_FORMAT_VERSION: u32 = 1;

pub const TABLE1_HEADER: [&str; 14] = [
    "config",
    "adc_kind",
    "wl_param",
    "chip1",
    "chip2",
    "accuracy_before_finetune",
    "retrained_accuracy",
    "software_attack_model0",
    "case1_attack_on_chip1",
    "digital_accuracy_model1",
    "software_attack_model1",
    "case2_attack_on_chip1",
    "chip2_after_attack",
    "case3_attack_on_chip1",
];

pub const TABLE2_HEADER: [&str; 7] = [
    "norm",
    "model0_clean",
    "software_attack_model0",
    "case1_attack_on_chip1",
    "chip2_clean",
    "chip2_after_attack",
    "case3_attack_on_chip1",
];

const EVAL_CHUNK: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory holding the IDX files (MNIST) or the binary batches
    /// (CIFAR-10).
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetworkConfig {
    /// The small MNIST network of [`QuantizedModel::desk_cnn`].
    DeskCnn,
    Custom {
        input_shape: Vec<usize>,
        layers: Vec<LayerKind>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChipSpec {
    /// Configuration (table row) this chip belongs to.
    pub config: String,
    pub adc_kind: AdcKind,
    pub wl_param: f64,
    pub seed: u64,
}

impl ChipSpec {
    pub fn name(&self) -> String {
        format!("{}-{}", self.config, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSettings {
    pub epochs: usize,
    pub batch_size: usize,
    /// Finetune rate as a multiple of the baseline's final rate.
    pub lr_factor: f64,
    pub momentum: f64,
    pub eval_interval: usize,
    #[serde(default)]
    pub max_train_samples: Option<usize>,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        FinetuneSettings {
            epochs: 1,
            batch_size: 200,
            lr_factor: 0.1,
            momentum: 0.9,
            eval_interval: 50,
            max_train_samples: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCounts {
    /// Test images used for clean accuracies.
    pub eval: usize,
    /// Test images used for the retrain curve.
    pub curve: usize,
    /// Attacked test images.
    pub attack: usize,
    /// First attacked test index.
    pub attack_offset: usize,
    /// Replacements for `eval` and `attack` under `--quick`.
    pub quick_eval: usize,
    pub quick_attack: usize,
}

impl Default for SampleCounts {
    fn default() -> Self {
        SampleCounts {
            eval: 10_000,
            curve: 1000,
            attack: 1000,
            attack_offset: 0,
            quick_eval: 2000,
            quick_attack: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    pub quant: QuantConfig,
    pub train: TrainConfig,
    /// Seeds model0's initial weights.
    pub master_seed: u64,
    pub array: ArrayConfig,
    /// Shared curve; each chip substitutes its own `wl_param`.
    pub pass_rate: PassRateCurve,
    pub sigma_scale: f64,
    pub chips: Vec<ChipSpec>,
    pub finetune: FinetuneSettings,
    /// The first entry fills the per-configuration table and the transfer
    /// matrix; every entry gets a per-norm row.
    pub attacks: Vec<AttackConfig>,
    /// Attack every chip in the loop and fill the transfer matrix.
    pub transfer_matrix: bool,
    pub samples: SampleCounts,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    /// MNIST desk CNN, 8-bit weights and activations, four configurations
    /// (SAR and Flash at `wl_param` 1 and 2) with two chips each, and
    /// L2, L0 and L-infinity attacks.
    fn default() -> Self {
        let chip = |config: &str, adc_kind, wl_param, seed| ChipSpec {
            config: config.to_string(),
            adc_kind,
            wl_param,
            seed,
        };
        ExperimentConfig {
            format_version: EXPERIMENT_FORMAT_VERSION,
            dataset: DatasetConfig {
                kind: DatasetKind::Mnist,
                dir: PathBuf::from("data/mnist"),
            },
            network: NetworkConfig::DeskCnn,
            quant: QuantConfig::default(),
            train: TrainConfig::default(),
            master_seed: 1,
            array: ArrayConfig::integer_grid(),
            pass_rate: default_pass_rate(),
            sigma_scale: 1.0,
            chips: vec![
                chip("A", AdcKind::Sar, 1.0, 101),
                chip("A", AdcKind::Sar, 1.0, 102),
                chip("B", AdcKind::Sar, 2.0, 201),
                chip("B", AdcKind::Sar, 2.0, 202),
                chip("C", AdcKind::Flash, 1.0, 301),
                chip("C", AdcKind::Flash, 1.0, 302),
                chip("D", AdcKind::Flash, 2.0, 401),
                chip("D", AdcKind::Flash, 2.0, 402),
            ],
            finetune: FinetuneSettings::default(),
            attacks: vec![
                AttackConfig::with_norm(Norm::L2),
                AttackConfig::with_norm(Norm::L0),
                AttackConfig::with_norm(Norm::Linf),
            ],
            transfer_matrix: true,
            samples: SampleCounts::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

/// The default pass-rate curve: 0.97 at the lowest reference falling to
/// 0.75 at the highest, `shape_gamma` 1.5, neutral `wl_param`.
pub fn default_pass_rate() -> PassRateCurve {
    PassRateCurve {
        p_low: 0.97,
        p_high: 0.75,
        shape_gamma: 1.5,
        wl_param: 1.0,
        table: None,
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Swaps in the quick sample counts.
    pub fn quick(mut self) -> Self {
        self.samples.eval = self.samples.quick_eval;
        self.samples.attack = self.samples.quick_attack;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != EXPERIMENT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "experiment format_version {} is not {EXPERIMENT_FORMAT_VERSION}",
                self.format_version
            )));
        }
        self.quant.validate()?;
        self.array.validate()?;
        self.pass_rate.validate()?;
        if !(self.sigma_scale >= 0.0 && self.sigma_scale.is_finite()) {
            return Err(Error::Config("sigma_scale must be finite and non-negative".into()));
        }
        if self.chips.len() < 2 {
            return Err(Error::Config("the chip grid needs at least two chips".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for c in &self.chips {
            self.pass_rate.with_wl(c.wl_param)?;
            if !names.insert(c.name()) {
                return Err(Error::Config(format!("chip {} appears twice", c.name())));
            }
        }
        for (label, members) in self.groups() {
            if members.len() < 2 {
                return Err(Error::Config(format!(
                    "configuration {label} has {} chip; case 3 needs two",
                    members.len()
                )));
            }
            let first = &self.chips[members[0]];
            if members
                .iter()
                .any(|&i| self.chips[i].adc_kind != first.adc_kind || self.chips[i].wl_param != first.wl_param)
            {
                return Err(Error::Config(format!(
                    "chips of configuration {label} disagree on adc_kind or wl_param"
                )));
            }
        }
        if self.attacks.is_empty() {
            return Err(Error::Config("at least one attack config is required".into()));
        }
        for a in &self.attacks {
            a.validate()?;
        }
        let s = &self.samples;
        if s.eval == 0 || s.curve == 0 || s.attack == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        if self.finetune.batch_size == 0 || !(self.finetune.lr_factor > 0.0) {
            return Err(Error::Config("finetune needs a positive batch size and lr_factor".into()));
        }
        Ok(())
    }

    /// Chip indices per configuration label, in order of first appearance.
    pub fn groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, c) in self.chips.iter().enumerate() {
            match out.iter_mut().find(|(l, _)| *l == c.config) {
                Some((_, m)) => m.push(i),
                None => out.push((c.config.clone(), vec![i])),
            }
        }
        out
    }

    pub fn build_network(&self) -> Result<QuantizedModel> {
        match &self.network {
            NetworkConfig::DeskCnn => QuantizedModel::desk_cnn(self.master_seed, self.quant),
            NetworkConfig::Custom { input_shape, layers } => {
                QuantizedModel::from_kinds(input_shape.clone(), layers, self.quant, self.master_seed)
            }
        }
    }

    pub fn descriptor(&self, model: &QuantizedModel, spec: &ChipSpec) -> Result<ChipDescriptor> {
        let d = ChipDescriptor::for_model(
            model,
            spec.seed,
            self.array,
            self.pass_rate.with_wl(spec.wl_param)?,
            spec.adc_kind,
            self.sigma_scale,
        );
        d.validate()?;
        Ok(d)
    }

    /// Seed of the finetune batch order for chip `name`.
    pub fn finetune_seed(&self, name: &str) -> u64 {
        derive_stream(self.master_seed, format!("finetune/{name}").as_bytes()).next_u64()
    }
}

pub struct Data {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_data(cfg: &DatasetConfig) -> Result<Data> {
    let load = |split| match cfg.kind {
        DatasetKind::Mnist => load_mnist(&cfg.dir, split),
        DatasetKind::Cifar10 => load_cifar10(&cfg.dir, split),
    };
    Ok(Data {
        train: load(Split::Train)?,
        test: load(Split::Test)?,
    })
}

/// Trains model0 from the configured network and seeds.
pub fn train_model0(cfg: &ExperimentConfig, train: &Dataset) -> Result<(Checkpoint, TrainReport)> {
    let mut model = cfg.build_network()?;
    let report = train_baseline(&mut model, train, &cfg.train)?;
    Ok((
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model,
            final_learning_rate: report.final_learning_rate,
            train_seed: cfg.train.seed,
        },
        report,
    ))
}

pub struct ChipArtifact {
    pub spec: ChipSpec,
    pub chip: ChipInstance,
    /// Finetuned model currently programmed on `chip`.
    pub model: QuantizedModel,
    pub finetune: FinetuneReport,
    /// Clean accuracy with model0 programmed.
    pub accuracy_before: f64,
    /// Clean accuracy after finetuning.
    pub accuracy_after: f64,
}

impl ChipArtifact {
    pub fn name(&self) -> String {
        self.spec.name()
    }
}

pub struct Setup {
    pub config: ExperimentConfig,
    pub model0: Checkpoint,
    pub model0_accuracy: f64,
    pub chips: Vec<ChipArtifact>,
    pub eval: Dataset,
    pub attack_x: Tensor,
    pub attack_labels: Vec<usize>,
    pub checksums: Vec<FileChecksum>,
}

impl Setup {
    pub fn chip(&self, name: &str) -> Option<&ChipArtifact> {
        self.chips.iter().find(|c| c.name() == name)
    }
}

fn eval_split(cfg: &ExperimentConfig, test: &Dataset) -> Result<(Dataset, Tensor, Vec<usize>)> {
    let s = &cfg.samples;
    if s.attack_offset + s.attack > test.len() {
        return Err(Error::Config(format!(
            "attack slice {}..{} exceeds the {} test images",
            s.attack_offset,
            s.attack_offset + s.attack,
            test.len()
        )));
    }
    let eval = test.head(s.eval.min(test.len()));
    let idx: Vec<usize> = (s.attack_offset..s.attack_offset + s.attack).collect();
    let (x, labels) = test.batch(&idx);
    Ok((eval, x, labels))
}

/// Creates, programs and finetunes one chip. Offset-free chips keep
/// model0 unchanged.
pub fn prepare_chip(
    cfg: &ExperimentConfig,
    model0: &Checkpoint,
    spec: &ChipSpec,
    train: &Dataset,
    eval: &Dataset,
) -> Result<ChipArtifact> {
    let mut chip = make_chip(&cfg.descriptor(&model0.model, spec)?)?;
    chip.program(&model0.model)?;
    let mut model = model0.model.clone();
    let accuracy_before = accuracy(&chip, eval, EVAL_CHUNK)?;
    let finetune = if cfg.sigma_scale == 0.0 {
        FinetuneReport {
            curve: vec![(0, accuracy_before)],
            loss_history: Vec::new(),
            accuracy_before,
            accuracy_after: accuracy_before,
        }
    } else {
        let f = &cfg.finetune;
        let ft = FinetuneConfig {
            epochs: f.epochs,
            batch_size: f.batch_size,
            learning_rate: model0.final_learning_rate * f.lr_factor,
            momentum: f.momentum,
            seed: cfg.finetune_seed(&spec.name()),
            eval_interval: f.eval_interval,
            max_train_samples: f.max_train_samples,
        };
        finetune_hybrid(&mut chip, &mut model, train, &eval.head(cfg.samples.curve), &ft)?
    };
    let accuracy_after = if cfg.sigma_scale == 0.0 {
        accuracy_before
    } else {
        accuracy(&chip, eval, EVAL_CHUNK)?
    };
    Ok(ChipArtifact {
        spec: spec.clone(),
        chip,
        model,
        finetune,
        accuracy_before,
        accuracy_after,
    })
}

/// Trains (or takes) model0, then builds and finetunes every chip.
pub fn setup(cfg: &ExperimentConfig, data: &Data, model0: Option<Checkpoint>) -> Result<Setup> {
    cfg.validate()?;
    let model0 = match model0 {
        Some(c) => c,
        None => train_model0(cfg, &data.train).map_err(|e| e.in_stage("train"))?.0,
    };
    let (eval, attack_x, attack_labels) = eval_split(cfg, &data.test)?;
    let model0_accuracy = accuracy(&model0.model, &eval, EVAL_CHUNK)?;
    let mut chips = Vec::with_capacity(cfg.chips.len());
    for spec in &cfg.chips {
        chips.push(prepare_chip(cfg, &model0, spec, &data.train, &eval).map_err(|e| e.in_stage("finetune"))?);
    }
    let mut checksums = data.train.checksums.clone();
    checksums.extend(data.test.checksums.iter().cloned());
    Ok(Setup {
        config: cfg.clone(),
        model0,
        model0_accuracy,
        chips,
        eval,
        attack_x,
        attack_labels,
        checksums,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChipSummary {
    pub name: String,
    pub config: String,
    pub adc_kind: AdcKind,
    pub wl_param: f64,
    pub seed: u64,
    pub offset_sha256: String,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    /// `(iteration, accuracy %)` during finetuning.
    pub retrain_curve: Vec<(usize, f64)>,
}

/// One row of the per-configuration table. `*_set` fields name the
/// adversarial set each attacked cell was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigRow {
    pub config: String,
    pub adc_kind: AdcKind,
    pub wl_param: f64,
    pub chip1: String,
    pub chip2: String,
    pub accuracy_before_finetune: f64,
    pub retrained_accuracy: f64,
    pub software_attack_model0: f64,
    pub case1_attack_on_chip1: f64,
    pub digital_accuracy_model1: f64,
    pub software_attack_model1: f64,
    pub case2_attack_on_chip1: f64,
    pub chip2_after_attack: f64,
    pub case3_attack_on_chip1: f64,
    pub case1_set: String,
    pub case2_set: String,
    pub case3_set: String,
}

/// One row of the per-norm table, for the first configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormRow {
    pub norm: Norm,
    pub model0_clean: f64,
    pub software_attack_model0: f64,
    pub case1_attack_on_chip1: f64,
    pub chip2_clean: f64,
    pub chip2_after_attack: f64,
    pub case3_attack_on_chip1: f64,
    pub case1_set: String,
    pub case3_set: String,
}

/// `values[i][j]`: accuracy of chip `j` on the examples that attacked
/// chip `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub norm: Norm,
    pub chips: Vec<String>,
    pub sets: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl TransferMatrix {
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.values.len()).map(|i| self.values[i][i]).collect()
    }

    /// Smallest off-diagonal entry of row `i` (NaN for a 1x1 matrix).
    pub fn off_diagonal_min(&self, i: usize) -> f64 {
        self.values[i]
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, v)| *v)
            .fold(f64::NAN, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetRecord {
    pub name: String,
    pub file: String,
    pub source: String,
    pub norm: Norm,
    pub source_accuracy: f64,
    pub sha256: String,
}

/// Build and input provenance. Wall-clock timings are left out so that a
/// rerun reproduces the report byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub crate_version: String,
    pub rng_algorithm: String,
    pub threads: usize,
    pub dataset_checksums: Vec<FileChecksum>,
    pub model0_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub format_version: u32,
    pub metadata: ReportMetadata,
    pub config: ExperimentConfig,
    pub model0_accuracy: f64,
    pub chips: Vec<ChipSummary>,
    pub table1: Vec<ConfigRow>,
    pub norm_table: Vec<NormRow>,
    pub transfer_matrix: Option<TransferMatrix>,
    pub adversarial_sets: Vec<SetRecord>,
}

impl TransferReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn row(&self, config: &str) -> Option<&ConfigRow> {
        self.table1.iter().find(|r| r.config == config)
    }
}

/// The adversarial sets produced by a protocol run, by name.
pub type SetBank = BTreeMap<String, AdversarialSet>;

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Name under which a case stores its set, e.g. `case3-A-102-L2`.
pub fn set_name(kind: &str, who: &str, norm: Norm) -> String {
    format!("{kind}-{who}-{norm}")
}

fn attack_into(
    bank: &mut SetBank,
    name: String,
    source_label: &str,
    source: &GradientSource<'_>,
    s: &Setup,
    cfg: &AttackConfig,
) -> Result<String> {
    if !bank.contains_key(&name) {
        let r = run_attack(source, &s.attack_x, &s.attack_labels, cfg).map_err(|e| e.in_stage("attack"))?;
        bank.insert(
            name.clone(),
            AdversarialSet::new(source_label, cfg, &s.attack_x, &s.attack_labels, &r),
        );
    }
    Ok(name)
}

/// Case 1: attack model0 in software.
pub fn run_case1(s: &Setup, cfg: &AttackConfig, bank: &mut SetBank) -> Result<String> {
    let name = set_name("case1", "model0", cfg.norm);
    attack_into(bank, name, "digital:model0", &GradientSource::Digital(&s.model0.model), s, cfg)
}

/// Case 2: model1 read out of `chip1`, attacked in software. Returns
/// model1 with the set name.
pub fn run_case2(
    s: &Setup,
    chip1: &ChipArtifact,
    cfg: &AttackConfig,
    bank: &mut SetBank,
) -> Result<(QuantizedModel, String)> {
    let model1 = QuantizedModel::from_readout(&s.model0.model, &chip1.chip.readout()?)?;
    let name = set_name("case2", &chip1.name(), cfg.norm);
    let label = format!("digital:model1:{}", chip1.name());
    let name = attack_into(bank, name, &label, &GradientSource::Digital(&model1), s, cfg)?;
    Ok((model1, name))
}

/// Case 3: attack `chip` with the chip in the loop.
pub fn run_case3(s: &Setup, chip: &ChipArtifact, cfg: &AttackConfig, bank: &mut SetBank) -> Result<String> {
    let name = set_name("case3", &chip.name(), cfg.norm);
    let label = format!("hybrid:{}", chip.name());
    attack_into(bank, name, &label, &GradientSource::HybridChip(&chip.chip), s, cfg)
}

/// Accuracy of every chip on every chip's hybrid examples.
pub fn transfer_matrix(chips: &[&ChipArtifact], sets: &[(&str, &AdversarialSet)]) -> Result<TransferMatrix> {
    if chips.len() < 2 || chips.len() != sets.len() {
        return Err(Error::Config(format!(
            "transfer matrix needs at least two chips and one set per chip, got {} chips and {} sets",
            chips.len(),
            sets.len()
        )));
    }
    let norm = sets[0].1.header.config.norm;
    let mut values = Vec::with_capacity(sets.len());
    for (_, set) in sets {
        let row = chips
            .iter()
            .map(|c| evaluate_on(&c.chip, &set.adversarial, &set.header.labels))
            .collect::<Result<Vec<f64>>>()?;
        values.push(row);
    }
    Ok(TransferMatrix {
        norm,
        chips: chips.iter().map(|c| c.name()).collect(),
        sets: sets.iter().map(|(n, _)| n.to_string()).collect(),
        values,
    })
}

fn row_pair<'a>(s: &'a Setup, members: &[usize]) -> (&'a ChipArtifact, &'a ChipArtifact) {
    (&s.chips[members[0]], &s.chips[members[1]])
}

/// Runs every attack case and assembles the report.
pub fn run_protocol(s: &Setup) -> Result<(TransferReport, SetBank)> {
    run_protocol_with(s, SetBank::new())
}

/// As [`run_protocol`], reusing any set already in `bank` under the name a
/// case would store it (see [`set_name`]).
pub fn run_protocol_with(s: &Setup, mut bank: SetBank) -> Result<(TransferReport, SetBank)> {
    let cfg = &s.config;
    let groups = cfg.groups();
    let primary = &cfg.attacks[0];

    let mut table1 = Vec::with_capacity(groups.len());
    for (label, members) in &groups {
        let (chip1, chip2) = row_pair(s, members);
        let case1 = run_case1(s, primary, &mut bank)?;
        let (model1, case2) = run_case2(s, chip1, primary, &mut bank)?;
        let case3 = run_case3(s, chip2, primary, &mut bank)?;
        let set = |n: &String| &bank[n];
        table1.push(ConfigRow {
            config: label.clone(),
            adc_kind: chip1.spec.adc_kind,
            wl_param: chip1.spec.wl_param,
            chip1: chip1.name(),
            chip2: chip2.name(),
            accuracy_before_finetune: chip1.accuracy_before,
            retrained_accuracy: chip1.accuracy_after,
            software_attack_model0: set(&case1).header.source_accuracy,
            case1_attack_on_chip1: evaluate_on(&chip1.chip, &set(&case1).adversarial, &s.attack_labels)?,
            digital_accuracy_model1: accuracy(&model1, &s.eval, EVAL_CHUNK)?,
            software_attack_model1: set(&case2).header.source_accuracy,
            case2_attack_on_chip1: evaluate_on(&chip1.chip, &set(&case2).adversarial, &s.attack_labels)?,
            chip2_after_attack: set(&case3).header.source_accuracy,
            case3_attack_on_chip1: evaluate_on(&chip1.chip, &set(&case3).adversarial, &s.attack_labels)?,
            case1_set: case1,
            case2_set: case2,
            case3_set: case3,
        });
    }

    let (chip1, chip2) = row_pair(s, &groups[0].1);
    let mut norm_table = Vec::with_capacity(cfg.attacks.len());
    for a in &cfg.attacks {
        let case1 = run_case1(s, a, &mut bank)?;
        let case3 = run_case3(s, chip2, a, &mut bank)?;
        norm_table.push(NormRow {
            norm: a.norm,
            model0_clean: s.model0_accuracy,
            software_attack_model0: bank[&case1].header.source_accuracy,
            case1_attack_on_chip1: evaluate_on(&chip1.chip, &bank[&case1].adversarial, &s.attack_labels)?,
            chip2_clean: chip2.accuracy_after,
            chip2_after_attack: bank[&case3].header.source_accuracy,
            case3_attack_on_chip1: evaluate_on(&chip1.chip, &bank[&case3].adversarial, &s.attack_labels)?,
            case1_set: case1,
            case3_set: case3,
        });
    }

    let matrix = if cfg.transfer_matrix {
        let mut names = Vec::with_capacity(s.chips.len());
        for c in &s.chips {
            names.push(run_case3(s, c, primary, &mut bank)?);
        }
        let chips: Vec<&ChipArtifact> = s.chips.iter().collect();
        let sets: Vec<(&str, &AdversarialSet)> = names.iter().map(|n| (n.as_str(), &bank[n])).collect();
        Some(transfer_matrix(&chips, &sets)?)
    } else {
        None
    };

    let mut adversarial_sets = Vec::with_capacity(bank.len());
    for (name, set) in &bank {
        adversarial_sets.push(SetRecord {
            name: name.clone(),
            file: format!("adv/{name}.cimadv"),
            source: set.header.source.clone(),
            norm: set.header.config.norm,
            source_accuracy: set.header.source_accuracy,
            sha256: sha256_hex(&set.to_bytes()?),
        });
    }

    let report = TransferReport {
        format_version: REPORT_FORMAT_VERSION,
        metadata: ReportMetadata {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            rng_algorithm: ALGORITHM_ID.to_string(),
            threads: 1,
            dataset_checksums: s.checksums.clone(),
            model0_sha256: sha256_hex(serde_json::to_string(&s.model0)?.as_bytes()),
        },
        config: cfg.clone(),
        model0_accuracy: s.model0_accuracy,
        chips: s
            .chips
            .iter()
            .map(|c| ChipSummary {
                name: c.name(),
                config: c.spec.config.clone(),
                adc_kind: c.spec.adc_kind,
                wl_param: c.spec.wl_param,
                seed: c.spec.seed,
                offset_sha256: c.chip.offset_hash(),
                accuracy_before: c.accuracy_before,
                accuracy_after: c.accuracy_after,
                retrain_curve: c.finetune.curve.clone(),
            })
            .collect(),
        table1,
        norm_table,
        transfer_matrix: matrix,
        adversarial_sets,
    };
    Ok((report, bank))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::State(format!("csv: {e}"));
    w.write_record(header).map_err(to_err)?;
    for r in rows {
        w.write_record(&r).map_err(to_err)?;
    }
    w.into_inner().map_err(|e| Error::State(format!("csv: {e}")))
}

fn pct(v: f64) -> String {
    format!("{v:.2}")
}

pub fn table1_csv(report: &TransferReport) -> Result<Vec<u8>> {
    let rows = report
        .table1
        .iter()
        .map(|r| {
            vec![
                r.config.clone(),
                r.adc_kind.to_string(),
                r.wl_param.to_string(),
                r.chip1.clone(),
                r.chip2.clone(),
                pct(r.accuracy_before_finetune),
                pct(r.retrained_accuracy),
                pct(r.software_attack_model0),
                pct(r.case1_attack_on_chip1),
                pct(r.digital_accuracy_model1),
                pct(r.software_attack_model1),
                pct(r.case2_attack_on_chip1),
                pct(r.chip2_after_attack),
                pct(r.case3_attack_on_chip1),
            ]
        })
        .collect();
    csv_bytes(&TABLE1_HEADER, rows)
}

pub fn table2_csv(report: &TransferReport) -> Result<Vec<u8>> {
    let rows = report
        .norm_table
        .iter()
        .map(|r| {
            vec![
                r.norm.to_string(),
                pct(r.model0_clean),
                pct(r.software_attack_model0),
                pct(r.case1_attack_on_chip1),
                pct(r.chip2_clean),
                pct(r.chip2_after_attack),
                pct(r.case3_attack_on_chip1),
            ]
        })
        .collect();
    csv_bytes(&TABLE2_HEADER, rows)
}

pub fn matrix_csv(m: &TransferMatrix) -> Result<Vec<u8>> {
    let mut header = vec!["attacked"];
    header.extend(m.chips.iter().map(|s| s.as_str()));
    let rows = m
        .chips
        .iter()
        .zip(&m.values)
        .map(|(name, row)| std::iter::once(name.clone()).chain(row.iter().map(|v| pct(*v))).collect())
        .collect();
    csv_bytes(&header, rows)
}

/// Writes the report, its tables and every adversarial set into `dir`.
/// `table2.csv` is written only when more than one norm was run.
pub fn emit_report(report: &TransferReport, bank: &SetBank, dir: &Path) -> Result<()> {
    write(&dir.join("report.json"), report.to_json()?.as_bytes())?;
    write(&dir.join("table1.csv"), &table1_csv(report)?)?;
    if report.norm_table.len() > 1 {
        write(&dir.join("table2.csv"), &table2_csv(report)?)?;
    }
    if let Some(m) = &report.transfer_matrix {
        write(&dir.join("transfer_matrix.csv"), &matrix_csv(m)?)?;
    }
    for rec in &report.adversarial_sets {
        let set = bank
            .get(&rec.name)
            .ok_or_else(|| Error::State(format!("adversarial set {} missing from the bank", rec.name)))?;
        write(&dir.join(&rec.file), &set.to_bytes()?)?;
    }
    Ok(())
}

/// Writes model0, chip descriptors and finetuned models into `dir`.
pub fn save_artifacts(s: &Setup, dir: &Path) -> Result<()> {
    let chips = dir.join("chips");
    std::fs::create_dir_all(&chips).map_err(|e| Error::io(&chips, e))?;
    save_checkpoint(&dir.join("model0.json"), &s.model0)?;
    for c in &s.chips {
        c.chip.descriptor().save(&chips.join(format!("{}.chip.json", c.name())))?;
        save_checkpoint(
            &chips.join(format!("{}.model.json", c.name())),
            &Checkpoint {
                format_version: CHECKPOINT_FORMAT_VERSION,
                model: c.model.clone(),
                final_learning_rate: s.model0.final_learning_rate,
                train_seed: s.model0.train_seed,
            },
        )?;
    }
    Ok(())
}

/// Rebuilds every attacked cell of the report in `dir` from the serialized
/// adversarial sets, chip descriptors and finetuned models. Clean
/// accuracies and chip summaries are copied from the stored report.
pub fn replay(dir: &Path) -> Result<TransferReport> {
    let path = dir.join("report.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let stored = TransferReport::from_json(&text)?;
    let model0 = load_checkpoint(&dir.join("model0.json"))?;
    let mut chips: BTreeMap<String, ChipInstance> = BTreeMap::new();
    for c in &stored.chips {
        let base = dir.join("chips");
        let desc = ChipDescriptor::load(&base.join(format!("{}.chip.json", c.name)))?;
        let model = load_checkpoint(&base.join(format!("{}.model.json", c.name)))?;
        let mut chip = make_chip(&desc)?;
        chip.program(&model.model)?;
        if chip.offset_hash() != c.offset_sha256 {
            return Err(Error::State(format!("chip {} re-derived different offsets", c.name)));
        }
        chips.insert(c.name.clone(), chip);
    }
    let mut sets: BTreeMap<String, AdversarialSet> = BTreeMap::new();
    for rec in &stored.adversarial_sets {
        let set = AdversarialSet::load(&dir.join(&rec.file))?;
        if sha256_hex(&set.to_bytes()?) != rec.sha256 {
            return Err(Error::State(format!("adversarial set {} does not match its checksum", rec.name)));
        }
        sets.insert(rec.name.clone(), set);
    }
    let get_set = |n: &str| {
        sets.get(n)
            .ok_or_else(|| Error::State(format!("report cell refers to unknown set {n}")))
    };
    let get_chip = |n: &str| {
        chips
            .get(n)
            .ok_or_else(|| Error::State(format!("report refers to unknown chip {n}")))
    };
    let on = |chip: &str, set: &str| -> Result<f64> {
        let s = get_set(set)?;
        evaluate_on(get_chip(chip)?, &s.adversarial, &s.header.labels)
    };

    let mut out = stored.clone();
    for r in &mut out.table1 {
        let chip1 = get_chip(&r.chip1)?;
        let model1 = QuantizedModel::from_readout(&model0.model, &chip1.readout()?)?;
        let c2 = get_set(&r.case2_set)?;
        r.software_attack_model0 = get_set(&r.case1_set)?.header.source_accuracy;
        r.case1_attack_on_chip1 = on(&r.chip1, &r.case1_set)?;
        r.software_attack_model1 = evaluate_on(&model1, &c2.adversarial, &c2.header.labels)?;
        r.case2_attack_on_chip1 = on(&r.chip1, &r.case2_set)?;
        r.chip2_after_attack = on(&r.chip2, &r.case3_set)?;
        r.case3_attack_on_chip1 = on(&r.chip1, &r.case3_set)?;
    }
    let first = stored
        .table1
        .first()
        .ok_or_else(|| Error::State("report has no configuration rows".into()))?;
    for r in &mut out.norm_table {
        r.software_attack_model0 = evaluate_on(&model0.model, &get_set(&r.case1_set)?.adversarial, &get_set(&r.case1_set)?.header.labels)?;
        r.case1_attack_on_chip1 = on(&first.chip1, &r.case1_set)?;
        r.chip2_after_attack = on(&first.chip2, &r.case3_set)?;
        r.case3_attack_on_chip1 = on(&first.chip1, &r.case3_set)?;
    }
    if let Some(m) = &mut out.transfer_matrix {
        for (i, set) in m.sets.iter().enumerate() {
            for (j, chip) in m.chips.iter().enumerate() {
                m.values[i][j] = on(chip, set)?;
            }
        }
    }
    for rec in &mut out.adversarial_sets {
        rec.source_accuracy = get_set(&rec.name)?.header.source_accuracy;
    }
    Ok(out)
}

/// Full protocol: load data, set up, run every case, write everything.
pub fn run_experiment(cfg: &ExperimentConfig, model0: Option<Checkpoint>) -> Result<TransferReport> {
    let data = load_data(&cfg.dataset).map_err(|e| e.in_stage("load data"))?;
    let s = setup(cfg, &data, model0)?;
    let (report, bank) = run_protocol(&s)?;
    save_artifacts(&s, &cfg.out_dir).map_err(|e| e.in_stage("emit"))?;
    emit_report(&report, &bank, &cfg.out_dir).map_err(|e| e.in_stage("emit"))?;
    Ok(report)
}
