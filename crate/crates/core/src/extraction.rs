//! Oracle training, the attacker's query phase and Siamese surrogate training.

use std::fmt::Write as _;
use std::path::Path;

use log::debug;

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::network::{output_delta, GradientSet, MlpModel, Shape};
use crate::numerics::{cross_entropy, one_hot, SeededRng};
use crate::power::{
    soft_switch_count, soft_switch_count_grad, switch_count, LeakageNoise, SwitchCount,
};

/// Where the surrogate's starting weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SurrogateInit {
    /// Same starting point as the run's oracle.
    SharedWithOracle,
    /// A separate draw from the run seed. The attacker never sees the
    /// oracle's weights, initial ones included.
    #[default]
    Independent,
}

impl SurrogateInit {
    pub fn as_str(self) -> &'static str {
        match self {
            SurrogateInit::SharedWithOracle => "shared",
            SurrogateInit::Independent => "independent",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(SurrogateInit::SharedWithOracle),
            "independent" => Ok(SurrogateInit::Independent),
            other => Err(Error::Config(format!(
                "surrogate init must be \"shared\" or \"independent\", got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the squared power mismatch in the Siamese loss.
    pub beta: f64,
    /// Run seed; every random stream of a run derives from it.
    pub seed: u64,
    pub init: SurrogateInit,
    pub noise: LeakageNoise,
}

impl TrainConfig {
    pub fn oracle_default(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 1,
            batch_size: 32,
            beta: 0.0,
            seed,
            init: SurrogateInit::default(),
            noise: LeakageNoise::default(),
        }
    }

    pub fn surrogate_default(seed: u64, beta: f64) -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 2,
            beta,
            ..TrainConfig::oracle_default(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        if !(self.noise.std >= 0.0 && self.noise.std.is_finite()) {
            return Err(Error::Config(format!(
                "leakage noise std must be >= 0, got {}",
                self.noise.std
            )));
        }
        Ok(())
    }
}

/// A trained model and its mean training loss per epoch.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: MlpModel,
    pub epoch_losses: Vec<f64>,
}

/// Initial weights of the run's oracle.
pub fn oracle_init(shape: Shape, run_seed: u64) -> MlpModel {
    MlpModel::init(
        shape,
        &mut SeededRng::new(run_seed).substream("oracle-init"),
    )
}

/// Initial weights of every surrogate in a run. Depends only on the run seed.
pub fn surrogate_init(shape: Shape, run_seed: u64, init: SurrogateInit) -> MlpModel {
    match init {
        SurrogateInit::SharedWithOracle => oracle_init(shape, run_seed),
        SurrogateInit::Independent => MlpModel::init(
            shape,
            &mut SeededRng::new(run_seed).substream("surrogate-init"),
        ),
    }
}

fn mnist_like_shape(data: &LabeledDataset) -> Shape {
    Shape::new(data.dim(), crate::network::HIDDEN, crate::network::OUTPUTS)
}

/// Mini-batch SGD on ground-truth labels.
pub fn train_oracle(train_set: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    let init = oracle_init(mnist_like_shape(train_set), cfg.seed);
    train_supervised(init, train_set, cfg)
}

/// Mini-batch SGD with cross-entropy against the dataset's labels, starting from `model`.
pub fn train_supervised(
    mut model: MlpModel,
    train_set: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let shape = model.shape();
    let classes = shape.outputs;
    let mut order_rng = SeededRng::new(cfg.seed).substream("oracle-order");
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut grads = GradientSet::sparse(shape);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order_rng.shuffle(&mut order);
        let mut total = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            grads.clear();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let x = train_set.image(i);
                let target = one_hot(train_set.label(i), classes);
                let trace = model.forward(x);
                total += cross_entropy(&target, &trace.probs);
                grads.add_sample(&model, x, &target, &trace, scale);
            }
            model.sgd_step(&grads, cfg.learning_rate)?;
            if !total.is_finite() || !model.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    reason: format!("loss {total}, parameters finite: {}", model.is_finite()),
                });
            }
        }
        let mean = total / train_set.len() as f64;
        debug!("supervised epoch {epoch}: mean loss {mean:.5}");
        epoch_losses.push(mean);
    }
    Ok(TrainedModel {
        model,
        epoch_losses,
    })
}

/// One attacker observation of a consecutive query pair.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    /// Positions in the queried subset.
    pub idx_prev: usize,
    pub idx_curr: usize,
    pub label_prev: usize,
    pub label_curr: usize,
    pub power: SwitchCount,
    /// What the attacker measured; equals `power` unless leakage noise is on.
    pub observed_power: f64,
}

/// Everything the attacker learns from streaming a subset through the oracle once.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryLog {
    /// Query order as subset positions.
    pub order: Vec<usize>,
    /// Oracle hard label of each subset position.
    pub labels: Vec<usize>,
    pub records: Vec<QueryRecord>,
}

/// Streams `subset` through the oracle in `rng` order.
pub fn query_phase(
    oracle: &MlpModel,
    subset: &LabeledDataset,
    rng: &mut SeededRng,
) -> Result<QueryLog> {
    query_phase_noisy(oracle, subset, rng, LeakageNoise::default())
}

pub fn query_phase_noisy(
    oracle: &MlpModel,
    subset: &LabeledDataset,
    rng: &mut SeededRng,
    noise: LeakageNoise,
) -> Result<QueryLog> {
    if subset.is_empty() {
        return Err(Error::Argument("cannot query with an empty subset".into()));
    }
    let mut order: Vec<usize> = (0..subset.len()).collect();
    rng.shuffle(&mut order);
    let mut labels = vec![0; subset.len()];
    let mut records = Vec::with_capacity(subset.len().saturating_sub(1));
    let mut prev: Option<(usize, crate::network::HiddenState)> = None;
    for &i in &order {
        let trace = oracle.forward(subset.image(i));
        labels[i] = trace.label;
        let state = trace.state();
        if let Some((p, prev_state)) = prev {
            let power = switch_count(&prev_state, &state)?;
            records.push(QueryRecord {
                idx_prev: p,
                idx_curr: i,
                label_prev: labels[p],
                label_curr: trace.label,
                power,
                observed_power: noise.observe(power, rng),
            });
        }
        prev = Some((i, state));
    }
    Ok(QueryLog {
        order,
        labels,
        records,
    })
}

/// Query log as CSV: `run_seed,pair_index,idx_prev,idx_curr,label_prev,label_curr,power`.
///
/// Indices are positions in the dataset the subset was drawn from.
pub fn query_log_csv(run_seed: u64, subset: &LabeledDataset, log: &QueryLog) -> String {
    let mut out =
        String::from("run_seed,pair_index,idx_prev,idx_curr,label_prev,label_curr,power\n");
    for (k, r) in log.records.iter().enumerate() {
        writeln!(
            out,
            "{run_seed},{k},{},{},{},{},{}",
            subset.source_index(r.idx_prev),
            subset.source_index(r.idx_curr),
            r.label_prev,
            r.label_curr,
            r.power.0
        )
        .expect("writing to a String");
    }
    out
}

pub fn write_query_log(
    path: impl AsRef<Path>,
    run_seed: u64,
    subset: &LabeledDataset,
    log: &QueryLog,
) -> Result<()> {
    crate::write_atomic(
        path.as_ref(),
        query_log_csv(run_seed, subset, log).as_bytes(),
    )
}

/// Pair loss (two cross-entropies plus the weighted squared power gap) added into `grads`; returns the loss.
///
/// Both branches run through the same `surrogate`. The power term uses the
/// relaxed count of the surrogate's two pre-activation vectors.
pub fn accumulate_siamese(
    grads: &mut GradientSet,
    surrogate: &MlpModel,
    x_prev: &[f64],
    x_curr: &[f64],
    rec: &QueryRecord,
    beta: f64,
) -> f64 {
    let classes = surrogate.shape().outputs;
    let y_prev = one_hot(rec.label_prev, classes);
    let y_curr = one_hot(rec.label_curr, classes);
    let t_prev = surrogate.forward(x_prev);
    let t_curr = surrogate.forward(x_curr);
    let mut loss = cross_entropy(&y_prev, &t_prev.probs) + cross_entropy(&y_curr, &t_curr.probs);

    let o_prev = output_delta(&t_prev, &y_prev);
    let o_curr = output_delta(&t_curr, &y_curr);
    let mut h_prev = surrogate.hidden_delta(&t_prev, &o_prev);
    let mut h_curr = surrogate.hidden_delta(&t_curr, &o_curr);

    if beta > 0.0 {
        let p_hat = soft_switch_count(&t_prev.pre_hidden, &t_curr.pre_hidden);
        let diff = rec.observed_power - p_hat;
        loss += beta * diff * diff;
        let coef = -2.0 * beta * diff;
        let (d_prev, d_curr) = soft_switch_count_grad(&t_prev.pre_hidden, &t_curr.pre_hidden);
        for (h, d) in h_prev.iter_mut().zip(&d_prev) {
            *h += coef * d;
        }
        for (h, d) in h_curr.iter_mut().zip(&d_curr) {
            *h += coef * d;
        }
    }

    grads.add_output_layer(&o_prev, &t_prev.hidden, 1.0);
    grads.add_hidden_layer(&h_prev, x_prev, 1.0);
    grads.add_output_layer(&o_curr, &t_curr.hidden, 1.0);
    grads.add_hidden_layer(&h_curr, x_curr, 1.0);
    loss
}

/// Loss and gradient of one query pair under shared weights.
pub fn siamese_loss_and_grads(
    surrogate: &MlpModel,
    rec: &QueryRecord,
    images: &LabeledDataset,
    beta: f64,
) -> Result<(f64, GradientSet)> {
    if !(beta >= 0.0) {
        return Err(Error::Argument(format!("beta must be >= 0, got {beta}")));
    }
    let mut grads = GradientSet::zeros(surrogate.shape());
    let loss = accumulate_siamese(
        &mut grads,
        surrogate,
        images.image(rec.idx_prev),
        images.image(rec.idx_curr),
        rec,
        beta,
    );
    Ok((loss, grads))
}

/// Trains a surrogate from oracle labels and (when `beta > 0`) leaked power.
///
/// Every epoch streams the subset through the oracle in a fresh order and
/// takes one SGD step per consecutive pair. A one-item subset has no pairs
/// and falls back to single-branch label matching.
pub fn train_surrogate(
    oracle: &MlpModel,
    subset: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if subset.is_empty() {
        return Err(Error::Argument("surrogate subset is empty".into()));
    }
    let shape = oracle.shape();
    let mut model = surrogate_init(shape, cfg.seed, cfg.init);
    let mut grads = GradientSet::sparse(shape);
    let stream = SeededRng::new(cfg.seed).substream("query-stream");
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut rng = stream.substream(&format!("epoch-{epoch}"));
        let log = query_phase_noisy(oracle, subset, &mut rng, cfg.noise)?;
        let mut total = 0.0;
        if log.records.is_empty() {
            let i = log.order[0];
            let x = subset.image(i);
            let target = one_hot(log.labels[i], shape.outputs);
            let trace = model.forward(x);
            total = cross_entropy(&target, &trace.probs);
            grads.clear();
            grads.add_sample(&model, x, &target, &trace, 1.0);
            model.sgd_step(&grads, cfg.learning_rate)?;
        }
        for (step, rec) in log.records.iter().enumerate() {
            grads.clear();
            let loss = accumulate_siamese(
                &mut grads,
                &model,
                subset.image(rec.idx_prev),
                subset.image(rec.idx_curr),
                rec,
                cfg.beta,
            );
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    reason: format!("pair loss {loss}"),
                });
            }
            total += loss;
            model.sgd_step(&grads, cfg.learning_rate)?;
        }
        let mean = total / log.records.len().max(1) as f64;
        debug!("surrogate epoch {epoch}: mean pair loss {mean:.5}");
        epoch_losses.push(mean);
    }
    if !model.is_finite() {
        return Err(Error::Diverged {
            epoch: cfg.epochs,
            step: 0,
            reason: "non-finite surrogate parameters".into(),
        });
    }
    Ok(TrainedModel {
        model,
        epoch_losses,
    })
}
