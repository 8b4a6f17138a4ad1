//! Experiment orchestration: robustness matrix, layer-removal sweep and
//! complexity tables.

mod config;
mod report;

pub use config::{
    AttackEntry, CheckpointPolicy, DatasetId, ExperimentConfig, Family, LongRun, ModelSpecs, Subset, SweepSettings,
    TrainSettings,
};
pub use report::{EvalReport, ModelSummary, ReportRow, CSV_HEADER, SCHEMA_VERSION};

use crate::attacks::run_attack;
use crate::data::{add_noise, load_cifar10, load_fashion_mnist, synthetic, LabeledDataset, NoiseSpec, Split};
use crate::error::{Error, Result};
use crate::nn::{count_macs_params, stem_convs, truncate_for_cbc, ArchitectureSpec, Model};
use crate::train::checkpoint::{load_model, save_model};
use crate::train::{
    accuracy, compose_dae_cnn, mean_l2_distance, reconstruct, retrain_on_reconstructions, train_cbc,
    train_classifier, train_dae, LossReport, TrainConfig,
};
use serde::Serialize;
use std::path::PathBuf;

/// Samples per attack call.
const ATTACK_CHUNK: usize = 128;

/// Train and test splits for `cfg`, cut to the configured subset sizes.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let (train, test) = match cfg.dataset {
        DatasetId::FashionMnist => {
            let dir = cfg.data_dir();
            (load_fashion_mnist(&dir, Split::Train)?, load_fashion_mnist(&dir, Split::Test)?)
        }
        DatasetId::Cifar10 => {
            let dir = cfg.data_dir();
            let batches: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            (load_cifar10(&batches, Split::Train)?, load_cifar10(&[dir.join("test_batch.bin")], Split::Test)?)
        }
        DatasetId::Synthetic => {
            let shape = cfg.spec(&cfg.models.base)?.input_shape;
            let (n_train, n_test) = (cfg.subset.train.unwrap_or(512), cfg.subset.test.unwrap_or(256));
            let all = synthetic(n_train + n_test, 10, shape, 0.2, cfg.seed);
            let train = all.subset(&(0..n_train).collect::<Vec<_>>());
            let mut test = all.subset(&(n_train..n_train + n_test).collect::<Vec<_>>());
            test.split = Split::Test;
            (train, test)
        }
    };
    let cut = |d: LabeledDataset, n: Option<usize>| match n {
        Some(n) => d.head(n),
        None => d,
    };
    Ok((cut(train, cfg.subset.train), cut(test, cfg.subset.test)))
}

/// Trained models, checkpoints and data shared by the experiments.
pub struct Workbench {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub history: Vec<(String, Vec<LossReport>)>,
}

/// `0.3f32` reported as `0.3`, not `0.30000001192092896`.
fn widen(s: f32) -> f64 {
    s.to_string().parse().expect("float display parses")
}

fn sigma_tag(s: f32) -> String {
    format!("s{s:.2}")
}

impl Workbench {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (train, test) = load_data(&cfg)?;
        let hash = cfg.fingerprint();
        Ok(Workbench {
            cfg,
            hash,
            train,
            test,
            history: Vec::new(),
        })
    }

    fn log(&self, msg: &str) {
        if self.cfg.verbose {
            eprintln!("{msg}");
        }
    }

    fn train_cfg(&self, t: &TrainSettings, stream: u64) -> TrainConfig {
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            seed: self.cfg.seed.wrapping_add(stream),
            verbose: self.cfg.verbose,
        }
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join("checkpoints").join(format!("{name}.ckpt"))
    }

    /// Loads `name` when reuse is on and the checkpoint exists; otherwise
    /// trains it (if allowed) and saves it.
    fn obtain(&mut self, name: &str, train: impl FnOnce(&Self) -> Result<(Model, Vec<LossReport>)>) -> Result<Model> {
        let path = self.checkpoint_path(name);
        if self.cfg.checkpoints.reuse && path.exists() {
            self.log(&format!("loading {}", path.display()));
            return Ok(load_model(&path)?.0);
        }
        if !self.cfg.checkpoints.train {
            return Err(Error::Checkpoint(format!(
                "missing checkpoint {} and training is disabled",
                path.display()
            )));
        }
        self.log(&format!("training {name}"));
        let (model, history) = train(self)?;
        save_model(&path, &model, self.cfg.seed, name)?;
        self.history.push((name.to_string(), history));
        Ok(model)
    }

    pub fn base_spec(&self) -> Result<ArchitectureSpec> {
        self.cfg.spec(&self.cfg.models.base)
    }

    pub fn dae_spec(&self) -> Result<ArchitectureSpec> {
        self.cfg.spec(&self.cfg.models.dae)
    }

    pub fn cbc_spec(&self) -> Result<ArchitectureSpec> {
        match &self.cfg.models.cbc {
            Some(s) => self.cfg.spec(s),
            None => truncate_for_cbc(&self.base_spec()?, &self.dae_spec()?, self.cfg.models.removed_layers),
        }
    }

    pub fn base(&mut self) -> Result<Model> {
        let spec = self.base_spec()?;
        self.obtain("base", |wb| {
            let mut m = Model::build(&spec, wb.cfg.seed)?;
            let h = train_classifier(&mut m, &wb.train, &wb.train_cfg(&wb.cfg.classifier, 0))?;
            Ok((m, h))
        })
    }

    pub fn dae(&mut self, sigma: f32) -> Result<Model> {
        let spec = self.dae_spec()?;
        self.obtain(&format!("dae-{}", sigma_tag(sigma)), |wb| {
            let mut m = Model::build(&spec, wb.cfg.seed.wrapping_add(1))?;
            let h = train_dae(&mut m, &wb.train, NoiseSpec::new(sigma), &wb.train_cfg(&wb.cfg.dae, 1))?;
            Ok((m, h))
        })
    }

    pub fn cbc(&mut self, dae: &Model, spec: &ArchitectureSpec, tag: &str) -> Result<Model> {
        self.obtain(tag, |wb| train_cbc(dae, spec, &wb.train, &wb.train_cfg(&wb.cfg.classifier, 2)))
    }

    pub fn retrained_dae_cnn(&mut self, dae: &Model, base: &Model, sigma: f32) -> Result<Model> {
        let classifier = self.obtain(&format!("retrained-base-{}", sigma_tag(sigma)), |wb| {
            let mut m = base.clone();
            let h = retrain_on_reconstructions(dae, &mut m, &wb.train, &wb.train_cfg(&wb.cfg.classifier, 3))?;
            Ok((m, h))
        })?;
        compose_dae_cnn(dae, &classifier)
    }

    fn attack_set(&self) -> LabeledDataset {
        match self.cfg.subset.attack {
            Some(n) => self.test.head(n),
            None => self.test.clone(),
        }
    }

    /// Clean row plus one row per attack for `model`.
    pub fn evaluate(
        &self,
        label: &str,
        model: &Model,
        attacks: &[AttackEntry],
        noise_sigma: Option<f32>,
        removed_layers: Option<usize>,
        report: &mut EvalReport,
    ) -> Result<()> {
        let cost = count_macs_params(model.spec())?;
        let clean = accuracy(model, &self.test)?;
        let row = |attack: &str, epsilon: Option<f64>, adv: Option<f64>| ReportRow {
            model: label.to_string(),
            attack: attack.to_string(),
            epsilon,
            noise_sigma: noise_sigma.map(widen),
            removed_layers,
            clean_acc: clean,
            adv_acc: adv,
            macs: cost.macs,
            params: cost.params,
            seed: self.cfg.seed,
            config_hash: self.hash.clone(),
        };
        report.rows.push(row("none", None, None));
        let set = self.attack_set();
        for a in attacks {
            let mut correct = 0usize;
            for chunk in (0..set.len()).collect::<Vec<_>>().chunks(ATTACK_CHUNK) {
                let (x, y) = set.batch(chunk);
                let adv = run_attack(model, &x, &y, a.kind, &a.config)?;
                correct += adv.success_mask.iter().filter(|s| !**s).count();
            }
            let acc = correct as f64 / set.len().max(1) as f64;
            self.log(&format!("{label} {}: clean {clean:.4} adversarial {acc:.4}", a.kind.name()));
            let eps = matches!(a.kind, crate::attacks::AttackKind::Fgsm | crate::attacks::AttackKind::Bim | crate::attacks::AttackKind::Mim)
                .then_some(a.config.epsilon);
            report.rows.push(row(a.kind.name(), eps, Some(acc)));
        }
        Ok(())
    }

    pub fn summary(&self, label: &str, model: &Model, sigma: Option<f32>, removed: Option<usize>) -> Result<ModelSummary> {
        let cost = count_macs_params(model.spec())?;
        Ok(ModelSummary {
            model: label.to_string(),
            noise_sigma: sigma.map(widen),
            removed_layers: removed,
            clean_acc: Some(accuracy(model, &self.test)?),
            e_r: None,
            e_r_noisy_input: None,
            macs: cost.macs,
            params: cost.params,
        })
    }

    /// Held-out `E_R` of `dae` and of the noisy inputs themselves.
    pub fn dae_summary(&self, dae: &Model, sigma: f32) -> Result<ModelSummary> {
        let noise = NoiseSpec::new(sigma);
        let noisy = add_noise(&self.test.images, noise, self.cfg.seed.wrapping_add(99));
        let cost = count_macs_params(dae.spec())?;
        Ok(ModelSummary {
            model: "dae".into(),
            noise_sigma: Some(widen(sigma)),
            removed_layers: None,
            clean_acc: None,
            e_r: Some(mean_l2_distance(&reconstruct(dae, &noisy)?, &self.test.images)?),
            e_r_noisy_input: Some(mean_l2_distance(&noisy, &self.test.images)?),
            macs: cost.macs,
            params: cost.params,
        })
    }
}

/// Every configured model family on clean data and under every attack,
/// attacked white-box through its full pipeline.
pub fn run_robustness_matrix(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let mut wb = Workbench::new(cfg.clone())?;
    let mut report = EvalReport::new("eval-matrix", &wb.hash, cfg.seed);
    let families = cfg.families();
    let attacks = cfg.attacks.clone();
    let needs_base = families.iter().any(|f| *f != Family::Cbc);
    let base = if needs_base { Some(wb.base()?) } else { None };
    if let (Some(base), true) = (&base, families.contains(&Family::Base)) {
        report.models.push(wb.summary("base", base, None, None)?);
        wb.evaluate("base", base, &attacks, None, None, &mut report)?;
    }
    let cbc_spec = wb.cbc_spec()?;
    let removed = cfg.models.cbc.is_none().then_some(cfg.models.removed_layers);
    for &sigma in &cfg.noise_sigmas {
        if families.iter().all(|f| *f == Family::Base) {
            break;
        }
        let dae = wb.dae(sigma)?;
        report.models.push(wb.dae_summary(&dae, sigma)?);
        for &family in &families {
            let model = match (family, &base) {
                (Family::Base, _) => continue,
                (Family::DaeCnn, Some(base)) => compose_dae_cnn(&dae, base)?,
                (Family::RetrainedDaeCnn, Some(base)) => wb.retrained_dae_cnn(&dae, base, sigma)?,
                (Family::Cbc, _) => wb.cbc(&dae, &cbc_spec, &format!("cbc-{}", sigma_tag(sigma)))?,
                (_, None) => unreachable!("base trained whenever a DAE-CNN family is requested"),
            };
            let k = (family == Family::Cbc).then_some(removed).flatten();
            report.models.push(wb.summary(family.name(), &model, Some(sigma), k)?);
            wb.evaluate(family.name(), &model, &attacks, Some(sigma), k, &mut report)?;
        }
    }
    Ok(report)
}

/// CBC accuracy as a function of removed convolutions.
pub fn run_layer_sweep(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| Error::Config("`sweep-layers` needs a [sweep] section".into()))?;
    let mut wb = Workbench::new(cfg.clone())?;
    let mut report = EvalReport::new("sweep-layers", &wb.hash, cfg.seed);
    let attacks = sweep.attacks.clone().unwrap_or_else(|| cfg.attacks.clone());
    let sigma = cfg.noise_sigmas[0];
    let (base_spec, dae_spec) = (wb.base_spec()?, wb.dae_spec()?);
    let max = stem_convs(&base_spec);
    let dae = wb.dae(sigma)?;
    report.models.push(wb.dae_summary(&dae, sigma)?);
    for &k in &sweep.removed_layers {
        if k > max {
            let msg = format!("skipping removed_layers = {k}: `{}` has only {max} conv layers", base_spec.name);
            report.warnings.push(msg);
            continue;
        }
        let spec = truncate_for_cbc(&base_spec, &dae_spec, k)?;
        let model = wb.cbc(&dae, &spec, &format!("cbc-k{k}-{}", sigma_tag(sigma)))?;
        report.models.push(wb.summary("cbc", &model, Some(sigma), Some(k))?);
        wb.evaluate("cbc", &model, &attacks, Some(sigma), Some(k), &mut report)?;
    }
    Ok(report)
}

/// One line of a cost comparison table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityRow {
    pub model: String,
    pub macs: u64,
    pub params: u64,
    pub macs_vs_base: f64,
    pub params_vs_base: f64,
}

pub const COMPLEXITY_HEADER: &str = "model,macs,params,macs_vs_base,params_vs_base";

/// MACs and parameters per model; ratios are relative to the first entry.
pub fn report_complexity(specs: &[(String, ArchitectureSpec)]) -> Result<Vec<ComplexityRow>> {
    let mut rows = Vec::with_capacity(specs.len());
    let mut reference = None;
    for (name, spec) in specs {
        let c = count_macs_params(spec)?;
        let (bm, bp) = *reference.get_or_insert((c.macs, c.params));
        rows.push(ComplexityRow {
            model: name.clone(),
            macs: c.macs,
            params: c.params,
            macs_vs_base: c.macs as f64 / bm.max(1) as f64,
            params_vs_base: c.params as f64 / bp.max(1) as f64,
        });
    }
    Ok(rows)
}

pub fn complexity_csv(rows: &[ComplexityRow]) -> String {
    let mut out = format!("{COMPLEXITY_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.4},{:.4}\n",
            r.model, r.macs, r.params, r.macs_vs_base, r.params_vs_base
        ));
    }
    out
}

/// Base, DAE-CNN and CBC specs of a configuration.
pub fn complexity_specs(cfg: &ExperimentConfig) -> Result<Vec<(String, ArchitectureSpec)>> {
    let base = cfg.spec(&cfg.models.base)?;
    let dae = cfg.spec(&cfg.models.dae)?;
    let cbc = match &cfg.models.cbc {
        Some(s) => cfg.spec(s)?,
        None => truncate_for_cbc(&base, &dae, cfg.models.removed_layers)?,
    };
    let dae_cnn = dae.then(&format!("{}+{}", dae.name, base.name), &base)?;
    Ok(vec![
        (base.name.clone(), base),
        (dae_cnn.name.clone(), dae_cnn),
        (cbc.name.clone(), cbc),
    ])
}
