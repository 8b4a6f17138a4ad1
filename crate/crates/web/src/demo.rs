use cbc::attacks::{deepfool, run_attack, AttackConfig, AttackKind, Classifier};
use cbc::data::{synthetic, LabeledDataset};
use cbc::harness::{report_complexity, ComplexityRow};
use cbc::nn::{canonical, stem_convs, truncate_for_cbc, ArchitectureSpec, LayerSpec, Model};
use cbc::train::{accuracy, train_classifier, TrainConfig};
use cbc::{Error, Result, Tape, Tensor, Var};
use serde::Serialize;

pub const SIDE: usize = 12;
const CLASSES: usize = 4;

fn lab_spec() -> ArchitectureSpec {
    ArchitectureSpec::new(
        "lab",
        [1, SIDE, SIDE],
        vec![
            LayerSpec::conv("conv1", 8, 3, 1, 1),
            LayerSpec::relu("relu1"),
            LayerSpec::max_pool("pool1", 2, 2),
            LayerSpec::dense("fc", 8 * 6 * 6, CLASSES),
            LayerSpec::softmax("softmax"),
        ],
    )
}

pub struct AttackLab {
    model: Model,
    data: LabeledDataset,
    pub clean_accuracy: f64,
}

#[derive(Debug, Serialize)]
pub struct AttackView {
    pub label: usize,
    pub clean_prediction: usize,
    pub adversarial_prediction: usize,
    pub clean_probabilities: Vec<f32>,
    pub adversarial_probabilities: Vec<f32>,
    pub original: Vec<f32>,
    pub adversarial: Vec<f32>,
    pub linf: f32,
    pub l2: f32,
}

fn probabilities(model: &Model, x: &Tensor) -> Result<(usize, Vec<f32>)> {
    let p = model.predict(x, None, 1)?;
    let probs = p.sample(0).to_vec();
    Ok((p.argmax_rows()[0], probs))
}

impl AttackLab {
    pub fn train(seed: u64) -> Result<Self> {
        let all = synthetic(640, CLASSES, [1, SIDE, SIDE], 0.25, seed);
        let train = all.subset(&(0..512).collect::<Vec<_>>());
        let data = all.subset(&(512..640).collect::<Vec<_>>());
        let mut model = Model::build(&lab_spec(), seed)?;
        let cfg = TrainConfig {
            batch_size: 32,
            ..TrainConfig::new(3, 0.01, seed)
        };
        train_classifier(&mut model, &train, &cfg)?;
        let clean_accuracy = accuracy(&model, &data)?;
        Ok(AttackLab {
            model,
            data,
            clean_accuracy,
        })
    }

    pub fn samples(&self) -> usize {
        self.data.len()
    }

    pub fn attack(&self, index: usize, kind: &str, epsilon: f32, iterations: usize) -> Result<AttackView> {
        if index >= self.data.len() {
            return Err(Error::Config(format!("sample {index} out of range (0..{})", self.data.len())));
        }
        let kind: AttackKind = serde_json::from_value(serde_json::Value::String(kind.to_lowercase()))
            .map_err(|_| Error::Config(format!("unknown attack `{kind}`")))?;
        // The page's epsilon is a total L-inf budget: iterative attacks split
        // it across steps and stay inside the ball.
        let iterations = iterations.max(1);
        let iterative = matches!(kind, AttackKind::Bim | AttackKind::Mim);
        let cfg = AttackConfig {
            epsilon: if iterative {
                f64::from(epsilon) / iterations as f64
            } else {
                f64::from(epsilon)
            },
            ball: iterative.then_some(f64::from(epsilon)),
            iterations,
            cw_steps: 100,
            cw_lr: 0.05,
            ..AttackConfig::default()
        };
        cfg.validate()?;
        let (x, y) = self.data.batch(&[index]);
        let adv = run_attack(&self.model, &x, &y, kind, &cfg)?;
        let (clean_prediction, clean_probabilities) = probabilities(&self.model, &x)?;
        let (adversarial_prediction, adversarial_probabilities) = probabilities(&self.model, &adv.adversarials)?;
        let diff: Vec<f32> = adv.adversarials.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
        Ok(AttackView {
            label: y[0],
            clean_prediction,
            adversarial_prediction,
            clean_probabilities,
            adversarial_probabilities,
            original: x.data().to_vec(),
            adversarial: adv.adversarials.data().to_vec(),
            linf: diff.iter().fold(0.0, |m, d| m.max(d.abs())),
            l2: diff.iter().map(|d| d * d).sum::<f32>().sqrt(),
        })
    }
}

/// Three-class linear classifier on the plane, `Z_k = w_k . x + b_k`.
#[derive(Clone, Debug, Serialize)]
pub struct Plane {
    pub w: [[f64; 2]; 3],
    pub b: [f64; 3],
}

impl Plane {
    /// Three boundaries meeting near the centre of the unit square.
    pub fn seeded(seed: u64) -> Self {
        let turn = (seed % 360) as f64 * std::f64::consts::PI / 180.0;
        let mut w = [[0.0; 2]; 3];
        let mut b = [0.0; 3];
        for k in 0..3 {
            let a = turn + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
            let scale = 1.0 + 0.5 * k as f64;
            w[k] = [scale * a.cos(), scale * a.sin()];
            b[k] = -(w[k][0] * 0.5 + w[k][1] * 0.5);
        }
        Plane { w, b }
    }

    pub fn class_of(&self, p: [f64; 2]) -> usize {
        (0..3)
            .map(|k| self.w[k][0] * p[0] + self.w[k][1] * p[1] + self.b[k])
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, z)| if z > best.1 { (k, z) } else { best })
            .0
    }
}

impl Classifier<f64> for Plane {
    fn logits<'t>(&self, tape: &'t Tape<f64>, x: Var<'t, f64>) -> Result<Var<'t, f64>> {
        let w = Tensor::new(vec![2, 3], vec![self.w[0][0], self.w[1][0], self.w[2][0], self.w[0][1], self.w[1][1], self.w[2][1]])?;
        let b = Tensor::new(vec![3], self.b.to_vec())?;
        x.matmul(tape.constant(w))?.add_bias(tape.constant(b))
    }
}

#[derive(Debug, Serialize)]
pub struct DeepFoolPath {
    pub plane: Plane,
    pub start_class: usize,
    pub end_class: usize,
    /// Iterates, starting at the input.
    pub path: Vec<[f64; 2]>,
}

/// DeepFool iterates from `start`, one point per iteration.
pub fn deepfool_path(start: [f64; 2], overshoot: f64, seed: u64) -> Result<DeepFoolPath> {
    let plane = Plane::seeded(seed);
    let x = Tensor::new(vec![1, 2], start.to_vec())?;
    let start_class = plane.class_of(start);
    let mut path = vec![start];
    for iters in 1..=20 {
        let adv = deepfool(&plane, &x, None, iters, overshoot)?;
        let p = [adv.adversarials.data()[0], adv.adversarials.data()[1]];
        if path.last() != Some(&p) {
            path.push(p);
        }
        if adv.success_mask[0] {
            break;
        }
    }
    let end_class = plane.class_of(*path.last().expect("path starts non-empty"));
    Ok(DeepFoolPath {
        plane,
        start_class,
        end_class,
        path,
    })
}

/// Base, DAE-CNN and CBC (with `removed` convolutions cut) for a dataset.
pub fn complexity_table(dataset: &str, removed: usize) -> Result<Vec<ComplexityRow>> {
    let prefix = match dataset {
        "fmnist" | "fashion-mnist" => "fmnist",
        "cifar" | "cifar10" => "cifar",
        other => return Err(Error::Config(format!("unknown dataset `{other}` (fmnist or cifar)"))),
    };
    let base = canonical::by_name(&format!("{prefix}-base"))?;
    let dae = canonical::by_name(&format!("{prefix}-dae"))?;
    let max = stem_convs(&base);
    if removed > max {
        return Err(Error::Config(format!("`{}` has only {max} removable conv layers", base.name)));
    }
    let cbc = truncate_for_cbc(&base, &dae, removed)?;
    let dae_cnn = canonical::by_name(&format!("{prefix}-dae-cnn"))?;
    report_complexity(&[
        (base.name.clone(), base),
        (dae_cnn.name.clone(), dae_cnn),
        (cbc.name.clone(), cbc),
    ])
}
