//! Desk-scale learning tasks standing in for language-model pretraining.
//!
//! Each task owns `M` disjoint worker shards, a held-out validation split,
//! and an analytic gradient. "Perplexity" is reported as `exp(loss)` for every
//! task kind so threshold logic works the same way everywhere.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    LeastSquares,
    LogisticRegression,
    MlpClassifier,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "least_squares" => Ok(TaskKind::LeastSquares),
            "logistic_regression" => Ok(TaskKind::LogisticRegression),
            "mlp_classifier" => Ok(TaskKind::MlpClassifier),
            other => Err(Error::config("task", format!("unknown task kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Input feature dimension.
    pub dimension: usize,
    /// Number of classes (classification only).
    pub classes: usize,
    /// Hidden width (mlp only).
    pub hidden: usize,
    /// Depth used for fragmentation. For the MLP this is the number of
    /// weight layers; for the linear models the parameter vector is cut into
    /// this many contiguous chunks.
    pub num_layers: usize,
    pub samples_per_worker: usize,
    pub validation_samples: usize,
    pub batch_size: usize,
    /// Dirichlet concentration of each worker's class mix. `None` means IID.
    pub dirichlet_alpha: Option<f64>,
    /// Std-dev of the per-worker mean shift of the regression features.
    pub feature_shift: f64,
    /// Std-dev of the class centroids.
    pub class_separation: f64,
    /// Std-dev of additive noise on regression targets.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::LogisticRegression,
            dimension: 32,
            classes: 10,
            hidden: 16,
            num_layers: 12,
            samples_per_worker: 2048,
            validation_samples: 2000,
            batch_size: 32,
            dirichlet_alpha: Some(0.1),
            feature_shift: 0.5,
            class_separation: 0.5,
            noise_std: 0.0,
            seed: 0,
        }
    }
}

/// A set of examples stored row-major. Targets hold the regression value or
/// the class index.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dimension: usize,
    pub features: Vec<f64>,
    pub targets: Vec<f64>,
}

impl Dataset {
    fn with_capacity(dimension: usize, n: usize) -> Self {
        Dataset {
            dimension,
            features: Vec::with_capacity(n * dimension),
            targets: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn class_histogram(&self, classes: usize) -> Vec<f64> {
        let mut counts = vec![0.0; classes];
        for &y in &self.targets {
            counts[y as usize] += 1.0;
        }
        let n = self.len().max(1) as f64;
        counts.iter().map(|c| c / n).collect()
    }
}

/// One worker's local data partition.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerShard {
    pub worker_id: usize,
    pub data: Dataset,
    /// Class mix the shard was drawn from (empty for regression).
    pub label_mix: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub step: u64,
    pub val_loss: f64,
    pub val_ppl: f64,
}

impl EvalReport {
    pub fn from_loss(step: u64, val_loss: f64) -> Self {
        EvalReport {
            step,
            val_loss,
            val_ppl: val_loss.exp(),
        }
    }
}

#[derive(Debug, Clone)]
enum Model {
    LeastSquares,
    /// Dense layers `(inputs, outputs)`; tanh between layers, softmax on top.
    Network(Vec<(usize, usize)>),
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    model: Model,
    layer_sizes: Vec<usize>,
    shards: Vec<WorkerShard>,
    validation: Dataset,
    ground_truth: Option<ParamVector>,
    init: ParamVector,
}

/// Derives an independent 64-bit seed from a list of words.
pub fn derive_seed(words: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    words
        .iter()
        .fold(0x243F_6A88_85A3_08D3, |acc, &w| splitmix(acc ^ splitmix(w)))
}

fn rng(words: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(words))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Splits `n` parameters into `layers` contiguous chunks whose sizes differ
/// by at most one.
fn split_even(n: usize, layers: usize) -> Vec<usize> {
    let base = n / layers;
    let extra = n % layers;
    (0..layers).map(|i| base + usize::from(i < extra)).collect()
}

fn dirichlet(rng: &mut ChaCha8Rng, alpha: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.iter().map(|d| d / total).collect();
        }
    }
}

/// Builds a deterministic task with `workers` shards. `fragments` is only
/// used to check that every fragment can be non-empty.
pub fn make_task(cfg: &TaskConfig, workers: usize, fragments: usize) -> Result<SyntheticTask> {
    validate(cfg, workers)?;
    let d = cfg.dimension;

    let (model, layer_sizes) = match cfg.kind {
        TaskKind::LeastSquares => (Model::LeastSquares, split_even(d, cfg.num_layers)),
        TaskKind::LogisticRegression => {
            let n = cfg.classes * (d + 1);
            if cfg.num_layers > n {
                return Err(Error::config(
                    "num_layers",
                    format!("{} layers but only {n} parameters", cfg.num_layers),
                ));
            }
            (
                Model::Network(vec![(d, cfg.classes)]),
                split_even(n, cfg.num_layers),
            )
        }
        TaskKind::MlpClassifier => {
            let mut shapes = Vec::with_capacity(cfg.num_layers);
            for l in 0..cfg.num_layers {
                let inputs = if l == 0 { d } else { cfg.hidden };
                let outputs = if l + 1 == cfg.num_layers {
                    cfg.classes
                } else {
                    cfg.hidden
                };
                shapes.push((inputs, outputs));
            }
            let sizes = shapes.iter().map(|&(i, o)| o * (i + 1)).collect();
            (Model::Network(shapes), sizes)
        }
    };

    let num_params: usize = layer_sizes.iter().sum();
    if cfg.kind == TaskKind::LeastSquares && cfg.num_layers > d {
        return Err(Error::config(
            "num_layers",
            format!("{} layers but only {d} parameters", cfg.num_layers),
        ));
    }
    if num_params < fragments || cfg.num_layers < fragments {
        return Err(Error::config(
            "dimension",
            format!(
                "model has {num_params} parameters in {} layers, fewer than {fragments} fragments",
                cfg.num_layers
            ),
        ));
    }

    let (shards, validation, ground_truth) = match cfg.kind {
        TaskKind::LeastSquares => regression_data(cfg, workers),
        _ => classification_data(cfg, workers),
    };

    let init = match &model {
        Model::LeastSquares => ParamVector::zeros(num_params),
        Model::Network(shapes) if shapes.len() == 1 => ParamVector::zeros(num_params),
        Model::Network(shapes) => {
            let mut r = rng(&[cfg.seed, 0x1717]);
            let mut values = Vec::with_capacity(num_params);
            for &(inputs, outputs) in shapes {
                let scale = 1.0 / (inputs as f64).sqrt();
                values.extend((0..inputs * outputs).map(|_| scale * normal(&mut r)));
                values.extend(std::iter::repeat_n(0.0, outputs));
            }
            ParamVector::new(values)
        }
    };

    Ok(SyntheticTask {
        config: cfg.clone(),
        model,
        layer_sizes,
        shards,
        validation,
        ground_truth,
        init,
    })
}

fn validate(cfg: &TaskConfig, workers: usize) -> Result<()> {
    if cfg.dimension == 0 {
        return Err(Error::config("dimension", "must be positive"));
    }
    if cfg.num_layers == 0 {
        return Err(Error::config("num_layers", "must be positive"));
    }
    if workers == 0 {
        return Err(Error::config("workers", "must be positive"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    if cfg.samples_per_worker < cfg.batch_size {
        return Err(Error::config(
            "samples_per_worker",
            "every worker needs at least one full batch",
        ));
    }
    if cfg.validation_samples == 0 {
        return Err(Error::config("validation_samples", "must be positive"));
    }
    if cfg.kind != TaskKind::LeastSquares && cfg.classes < 2 {
        return Err(Error::config("classes", "need at least two classes"));
    }
    if cfg.kind == TaskKind::MlpClassifier && (cfg.hidden == 0 || cfg.num_layers < 2) {
        return Err(Error::config(
            "hidden",
            "mlp needs a positive hidden width and at least two layers",
        ));
    }
    if let Some(alpha) = cfg.dirichlet_alpha {
        if !(alpha > 0.0) {
            return Err(Error::config("dirichlet_alpha", "must be positive"));
        }
    }
    for (key, v) in [
        ("feature_shift", cfg.feature_shift),
        ("class_separation", cfg.class_separation),
        ("noise_std", cfg.noise_std),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::config(key, "must be non-negative and finite"));
        }
    }
    Ok(())
}

fn regression_data(
    cfg: &TaskConfig,
    workers: usize,
) -> (Vec<WorkerShard>, Dataset, Option<ParamVector>) {
    let d = cfg.dimension;
    let mut r = rng(&[cfg.seed, 0xA11]);
    let truth: Vec<f64> = (0..d).map(|_| normal(&mut r)).collect();

    let sample = |r: &mut ChaCha8Rng, shift: &[f64], out: &mut Dataset| {
        let x: Vec<f64> = shift.iter().map(|s| s + normal(r)).collect();
        let y = x.iter().zip(&truth).map(|(a, b)| a * b).sum::<f64>() + cfg.noise_std * normal(r);
        out.features.extend_from_slice(&x);
        out.targets.push(y);
    };

    let shards = (0..workers)
        .map(|m| {
            let mut r = rng(&[cfg.seed, 0xB22, m as u64]);
            let shift: Vec<f64> = (0..d).map(|_| cfg.feature_shift * normal(&mut r)).collect();
            let mut data = Dataset::with_capacity(d, cfg.samples_per_worker);
            for _ in 0..cfg.samples_per_worker {
                sample(&mut r, &shift, &mut data);
            }
            WorkerShard {
                worker_id: m,
                data,
                label_mix: Vec::new(),
            }
        })
        .collect();

    let mut r = rng(&[cfg.seed, 0xC33]);
    let zero = vec![0.0; d];
    let mut validation = Dataset::with_capacity(d, cfg.validation_samples);
    for _ in 0..cfg.validation_samples {
        sample(&mut r, &zero, &mut validation);
    }
    (shards, validation, Some(ParamVector::new(truth)))
}

fn classification_data(
    cfg: &TaskConfig,
    workers: usize,
) -> (Vec<WorkerShard>, Dataset, Option<ParamVector>) {
    let d = cfg.dimension;
    let c = cfg.classes;
    let mut r = rng(&[cfg.seed, 0xA11]);
    let centroids: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..d).map(|_| cfg.class_separation * normal(&mut r)).collect())
        .collect();

    let draw = |r: &mut ChaCha8Rng, classes: &WeightedIndex<f64>, out: &mut Dataset| {
        let y = classes.sample(r);
        out.features
            .extend(centroids[y].iter().map(|mu| mu + normal(r)));
        out.targets.push(y as f64);
    };

    let uniform = vec![1.0 / c as f64; c];
    let shards = (0..workers)
        .map(|m| {
            let mut r = rng(&[cfg.seed, 0xB22, m as u64]);
            let mix = match cfg.dirichlet_alpha {
                Some(alpha) => dirichlet(&mut r, alpha, c),
                None => uniform.clone(),
            };
            let classes = WeightedIndex::new(&mix).expect("mix has positive mass");
            let mut data = Dataset::with_capacity(d, cfg.samples_per_worker);
            for _ in 0..cfg.samples_per_worker {
                draw(&mut r, &classes, &mut data);
            }
            WorkerShard {
                worker_id: m,
                data,
                label_mix: mix,
            }
        })
        .collect();

    let mut r = rng(&[cfg.seed, 0xC33]);
    let classes = WeightedIndex::new(&uniform).expect("uniform mix");
    let mut validation = Dataset::with_capacity(d, cfg.validation_samples);
    for _ in 0..cfg.validation_samples {
        draw(&mut r, &classes, &mut validation);
    }
    (shards, validation, None)
}

impl SyntheticTask {
    pub fn num_params(&self) -> usize {
        self.init.len()
    }

    /// Parameter counts per layer, in depth order.
    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn shards(&self) -> &[WorkerShard] {
        &self.shards
    }

    pub fn shard(&self, m: usize) -> &WorkerShard {
        &self.shards[m]
    }

    pub fn validation(&self) -> &Dataset {
        &self.validation
    }

    /// Generating weights of the regression task.
    pub fn ground_truth(&self) -> Option<&ParamVector> {
        self.ground_truth.as_ref()
    }

    /// Shared starting point for every worker.
    pub fn initial_params(&self) -> ParamVector {
        self.init.clone()
    }

    /// Mean loss and gradient over the listed rows of `data`.
    pub fn loss_and_grad(
        &self,
        data: &Dataset,
        rows: &[usize],
        params: &ParamVector,
    ) -> (f64, ParamVector) {
        let mut grad = vec![0.0; params.len()];
        let mut total = 0.0;
        let mut scratch = Scratch::default();
        for &i in rows {
            total += self.example(data, i, params.as_slice(), Some(&mut grad), &mut scratch);
        }
        let n = rows.len() as f64;
        for g in &mut grad {
            *g /= n;
        }
        (total / n, ParamVector::new(grad))
    }

    /// Mean loss over the listed rows, without the gradient.
    pub fn loss(&self, data: &Dataset, rows: &[usize], params: &ParamVector) -> f64 {
        let mut scratch = Scratch::default();
        let total: f64 = rows
            .iter()
            .map(|&i| self.example(data, i, params.as_slice(), None, &mut scratch))
            .sum();
        total / rows.len() as f64
    }

    /// Rows of a minibatch drawn with replacement from `shard`.
    pub fn batch_rows(&self, shard: &WorkerShard, batch_seed: u64) -> Vec<usize> {
        let mut r = ChaCha8Rng::seed_from_u64(batch_seed);
        let n = shard.data.len();
        (0..self.config.batch_size)
            .map(|_| r.random_range(0..n))
            .collect()
    }

    /// Loss and exact gradient of one minibatch.
    pub fn minibatch_grad(
        &self,
        shard: &WorkerShard,
        params: &ParamVector,
        batch_seed: u64,
    ) -> (f64, ParamVector) {
        let rows = self.batch_rows(shard, batch_seed);
        self.loss_and_grad(&shard.data, &rows, params)
    }

    /// Mean loss over the full validation split.
    pub fn evaluate(&self, params: &ParamVector, step: u64) -> EvalReport {
        let rows: Vec<usize> = (0..self.validation.len()).collect();
        EvalReport::from_loss(step, self.loss(&self.validation, &rows, params))
    }

    fn example(
        &self,
        data: &Dataset,
        i: usize,
        params: &[f64],
        grad: Option<&mut Vec<f64>>,
        scratch: &mut Scratch,
    ) -> f64 {
        let x = data.row(i);
        let y = data.targets[i];
        match &self.model {
            Model::LeastSquares => {
                let residual = x.iter().zip(params).map(|(a, w)| a * w).sum::<f64>() - y;
                if let Some(g) = grad {
                    for (gi, xi) in g.iter_mut().zip(x) {
                        *gi += residual * xi;
                    }
                }
                0.5 * residual * residual
            }
            Model::Network(shapes) => network_example(shapes, x, y as usize, params, grad, scratch),
        }
    }
}

#[derive(Default)]
struct Scratch {
    activations: Vec<Vec<f64>>,
    delta: Vec<f64>,
    next_delta: Vec<f64>,
}

fn network_example(
    shapes: &[(usize, usize)],
    x: &[f64],
    label: usize,
    params: &[f64],
    grad: Option<&mut Vec<f64>>,
    scratch: &mut Scratch,
) -> f64 {
    let depth = shapes.len();
    scratch.activations.resize(depth + 1, Vec::new());
    scratch.activations[0].clear();
    scratch.activations[0].extend_from_slice(x);

    let mut offsets = Vec::with_capacity(depth);
    let mut offset = 0;
    for &(inputs, outputs) in shapes {
        offsets.push(offset);
        offset += outputs * (inputs + 1);
    }

    for (l, &(inputs, outputs)) in shapes.iter().enumerate() {
        let w = &params[offsets[l]..offsets[l] + outputs * inputs];
        let b = &params[offsets[l] + outputs * inputs..offsets[l] + outputs * (inputs + 1)];
        let (before, after) = scratch.activations.split_at_mut(l + 1);
        let input = &before[l];
        let out = &mut after[0];
        out.clear();
        for o in 0..outputs {
            let row = &w[o * inputs..(o + 1) * inputs];
            let z = b[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
            out.push(if l + 1 < depth { z.tanh() } else { z });
        }
    }

    let logits = &scratch.activations[depth];
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let log_norm = max + sum_exp.ln();
    let loss = log_norm - logits[label];

    let Some(grad) = grad else {
        return loss;
    };

    scratch.delta.clear();
    scratch
        .delta
        .extend(logits.iter().map(|z| (z - log_norm).exp()));
    scratch.delta[label] -= 1.0;

    for l in (0..depth).rev() {
        let (inputs, outputs) = shapes[l];
        let input = &scratch.activations[l];
        let base = offsets[l];
        for o in 0..outputs {
            let d = scratch.delta[o];
            let row = &mut grad[base + o * inputs..base + (o + 1) * inputs];
            for (g, a) in row.iter_mut().zip(input) {
                *g += d * a;
            }
            grad[base + outputs * inputs + o] += d;
        }
        if l > 0 {
            let w = &params[base..base + outputs * inputs];
            scratch.next_delta.clear();
            scratch.next_delta.resize(inputs, 0.0);
            for o in 0..outputs {
                let d = scratch.delta[o];
                for (nd, wv) in scratch.next_delta.iter_mut().zip(&w[o * inputs..(o + 1) * inputs]) {
                    *nd += d * wv;
                }
            }
            for (nd, a) in scratch.next_delta.iter_mut().zip(input) {
                *nd *= 1.0 - a * a;
            }
            std::mem::swap(&mut scratch.delta, &mut scratch.next_delta);
        }
    }
    loss
}
