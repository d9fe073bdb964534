//! Two-stage training: supervised pretraining on source, then joint
//! optimization of the adversarial, centroid and contrastive-mapping losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, GradScale, Graph, Matrix, Mode, Var};
use crate::centroids::{class_means, CentroidBank, UpdateWeights};
use crate::data::{batch_iter, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsRecord};
use crate::losses::{
    ada_objective, adaptive_margins, cca_loss, contrastive_center_loss, live_centroids,
    scm_loss, total_loss, AdaTerms, LossTerms, LossWeights, MarginVector, ScmParams,
};
use crate::model::{BoundParams, ForwardMode, NetworkParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// Minimum max-probability for a target pseudo-label to count; `None`
    /// means `1 / (N + 1)`.
    pub reliability_threshold: Option<f64>,
    pub weights: LossWeights,
    /// Drop the contrastive-center and centroid alignment terms.
    pub disable_sca: bool,
    /// Drop the contrastive mapping term.
    pub disable_scm: bool,
    /// Constant margin for every class instead of the adaptive one.
    pub static_margin: Option<f64>,
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 2e-4,
            weight_decay: 1e-6,
            batch_size: 32,
            epochs_stage1: 100,
            epochs_stage2: 200,
            reliability_threshold: None,
            weights: LossWeights::default(),
            disable_sca: false,
            disable_scm: false,
            static_margin: None,
            freeze_encoder: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0) || !self.lr_init.is_finite() {
            return Err(Error::validation("lr_init", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::validation("weight_decay", "must be nonnegative"));
        }
        if self.batch_size < 2 {
            return Err(Error::validation("batch_size", "must be at least 2"));
        }
        if self.epochs_stage1 == 0 {
            return Err(Error::validation("epochs_stage1", "must be at least 1"));
        }
        if self.epochs_stage2 == 0 {
            return Err(Error::validation("epochs_stage2", "must be at least 1"));
        }
        if let Some(t) = self.reliability_threshold {
            if !(0.0..1.0).contains(&t) {
                return Err(Error::validation("reliability_threshold", "must lie in [0, 1)"));
            }
        }
        if let Some(m) = self.static_margin {
            if !(m >= 0.0) || !m.is_finite() {
                return Err(Error::validation("static_margin", "must be nonnegative"));
            }
        }
        self.weights.validate()
    }

    pub fn threshold(&self, n_known: usize) -> f64 {
        self.reliability_threshold
            .unwrap_or(1.0 / (n_known as f64 + 1.0))
    }

    /// Loss weights with ablated terms set to zero.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights.clone();
        if self.disable_sca {
            w.lambda_s = 0.0;
            w.lambda_c = 0.0;
        }
        if self.disable_scm {
            w.lambda_t = 0.0;
        }
        w
    }
}

/// `lr_init · (1 + cos(π · step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_init: f64) -> f64 {
    if total_steps == 0 {
        return lr_init;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr_init * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

/// Argmax class of each row and whether its softmax probability exceeds
/// `threshold` strictly. Ties go to the lowest class index.
pub fn pseudo_label(logits: &Matrix, threshold: f64) -> (Vec<usize>, Vec<bool>) {
    let probs = softmax(logits);
    let labels = probs.argmax_rows();
    let reliable = labels
        .iter()
        .enumerate()
        .map(|(i, &k)| probs[(i, k)] > threshold)
        .collect();
    (labels, reliable)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Matrix>) -> Self {
        let m: Vec<Matrix> = params
            .into_iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        AdamState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One Adam update with bias correction, after decoupled weight decay
/// `p ← p · (1 − lr · wd)`.
pub fn adam_step(
    params: Vec<&mut Matrix>,
    grads: &[Matrix],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    for (((p, g), m), v) in params
        .into_iter()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        if p.shape() != g.shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: p.shape(),
                rhs: g.shape(),
            });
        }
        let p = p.as_mut_slice();
        let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
        for i in 0..p.len() {
            let gi = g.as_slice()[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Tensors updated by the optimizer: everything, or everything but the
/// encoder when it is frozen.
fn trainable(net: &mut NetworkParams, freeze_encoder: bool) -> Vec<&mut Matrix> {
    let skip = if freeze_encoder {
        net.encoder_tensor_count()
    } else {
        0
    };
    net.tensors_mut().into_iter().skip(skip).collect()
}

fn check_finite(name: &str, value: f64, epoch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            component: name.to_string(),
            epoch,
        })
    }
}

/// Mean training loss per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Record {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Trains E, G and D on labelled source data with the classification loss.
pub fn pretrain_stage1(
    config: &TrainConfig,
    net: &mut NetworkParams,
    source: &Dataset,
) -> Result<Vec<Stage1Record>> {
    config.validate()?;
    if source.is_empty() {
        return Err(Error::Contract("empty source set".into()));
    }
    let mut adam = AdamState::new(net.tensors());
    let per_epoch = batch_iter(source.len(), config.batch_size, config.seed, 0)?.len();
    let total_steps = per_epoch * config.epochs_stage1;
    let mut step = 0;
    let mut trace = Vec::with_capacity(config.epochs_stage1);
    for epoch in 0..config.epochs_stage1 {
        let batches = batch_iter(source.len(), config.batch_size, config.seed, epoch as u64)?;
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for batch in &batches {
            let labels = source.labels_at(batch);
            let mut g = Graph::new();
            let bound = net.bind(&mut g);
            let x = g.constant(source.features(batch));
            let out = net.forward(&mut g, &bound, x, ForwardMode::train(false))?;
            let loss = crate::losses::cls_loss(&mut g, out.logits, &labels)?;
            let value = g.value(loss).item();
            check_finite("cls", value, epoch)?;
            let predicted = g.value(out.logits).argmax_rows();
            correct += predicted.iter().zip(&labels).filter(|(p, y)| p == y).count();
            seen += labels.len();
            loss_sum += value;
            g.backward(loss)?;
            let grads = bound.grads(&g);
            let lr = cosine_lr(step, total_steps, config.lr_init);
            adam_step(net.tensors_mut(), &grads, &mut adam, lr, config.weight_decay)?;
            step += 1;
        }
        let record = Stage1Record {
            epoch,
            loss: loss_sum / batches.len() as f64,
            accuracy: correct as f64 / seen as f64,
        };
        log::debug!("stage 1 epoch {epoch}: loss {:.4}", record.loss);
        trace.push(record);
    }
    Ok(trace)
}

/// Quantities of one stage-2 iteration that are held constant with respect
/// to the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StepContext {
    pub pseudo: Vec<usize>,
    pub reliable: Vec<bool>,
    pub previous_source: Matrix,
    pub previous_target: Matrix,
    pub update: UpdateWeights,
    /// Source centroids after this iteration's update.
    pub source_centroids: Matrix,
    pub margins: MarginVector,
}

impl StepContext {
    /// Pseudo-labels the target batch, folds the batch into `bank` and
    /// derives margins from the updated bank. Every target row predicted as a
    /// known class feeds its centroid; reliability only gates the mapping loss.
    pub fn build(
        bank: &mut CentroidBank,
        source_features: &Matrix,
        source_labels: &[usize],
        target_features: &Matrix,
        target_logits: &Matrix,
        config: &TrainConfig,
    ) -> Self {
        let n = bank.n_known();
        let (pseudo, reliable) = pseudo_label(target_logits, config.threshold(n));
        let previous_source = bank.source_matrix();
        let previous_target = bank.target_matrix();
        let update = bank.update(
            &class_means(source_features, source_labels, n),
            &class_means(target_features, &pseudo, n),
        );
        let margins = match config.static_margin {
            Some(m) => MarginVector::constant(m, n),
            None => adaptive_margins(bank, config.weights.literal_dist),
        };
        StepContext {
            pseudo,
            reliable,
            previous_source,
            previous_target,
            update,
            source_centroids: bank.source_matrix(),
            margins,
        }
    }
}

/// Graph nodes of one stage-2 objective.
#[derive(Debug, Clone, Copy)]
pub struct StepGraph {
    pub source_features: Var,
    pub target_features: Var,
    pub ada: AdaTerms,
    pub terms: LossTerms,
    pub total: Var,
}

/// Forward pass over concatenated source and target batches, then the ADA
/// objective. Returns the feature and ADA nodes; the rest of the loss needs
/// a [`StepContext`].
pub fn forward_ada(
    g: &mut Graph,
    net: &mut NetworkParams,
    bound: &BoundParams,
    xs: &Matrix,
    ys: &[usize],
    xt: &Matrix,
    config: &TrainConfig,
) -> Result<(Var, Var, AdaTerms)> {
    let ms = xs.rows();
    let mut rows = xs.clone().into_vec();
    rows.extend_from_slice(xt.as_slice());
    let joint = Matrix::from_vec(ms + xt.rows(), xs.cols(), rows)?;
    let x = g.constant(joint);
    let features = net.features(g, bound, x, ForwardMode::train(config.freeze_encoder))?;
    let fs = g.select_rows(features, &(0..ms).collect::<Vec<_>>())?;
    let ft = g.select_rows(features, &(ms..ms + xt.rows()).collect::<Vec<_>>())?;
    let ls = net.discriminate(g, bound, fs, Mode::Train)?;
    let scale = GradScale::new(config.weights.adv_lambda)?;
    let ada = ada_objective(g, ls, ys, ft, scale, |g, f| {
        net.discriminate(g, bound, f, Mode::Train)
    })?;
    Ok((fs, ft, ada))
}

/// Adds the centroid and contrastive-mapping terms for a fixed context.
pub fn assemble_loss(
    g: &mut Graph,
    fs: Var,
    ys: &[usize],
    ft: Var,
    ada: AdaTerms,
    ctx: &StepContext,
    config: &TrainConfig,
) -> Result<StepGraph> {
    let w = config.effective_weights();
    let cct = if w.lambda_s != 0.0 {
        Some(contrastive_center_loss(g, fs, ys, &ctx.source_centroids, w.delta)?)
    } else {
        None
    };
    let cca = if w.lambda_c != 0.0 {
        let cs = live_centroids(g, fs, ys, &ctx.update.source, &ctx.previous_source)?;
        let ct = live_centroids(
            g,
            ft,
            &ctx.pseudo,
            &ctx.update.target,
            &ctx.previous_target,
        )?;
        Some(cca_loss(g, cs, ct)?)
    } else {
        None
    };
    let con = if w.lambda_t != 0.0 {
        let params = ScmParams {
            omega: w.omega,
            literal_dist: w.literal_dist,
        };
        Some(scm_loss(
            g,
            ft,
            &ctx.pseudo,
            &ctx.reliable,
            &ctx.source_centroids,
            &ctx.margins,
            params,
        )?)
    } else {
        None
    };
    let terms = LossTerms {
        cls: ada.cls,
        adv: ada.adv,
        cct,
        cca,
        con,
    };
    let total = total_loss(g, &terms, &w)?;
    Ok(StepGraph {
        source_features: fs,
        target_features: ft,
        ada,
        terms,
        total,
    })
}

/// Builds the full stage-2 objective for one pair of batches. Without a
/// context one is derived from this forward pass, updating `bank`; with one,
/// `bank` is left alone.
#[allow(clippy::too_many_arguments)]
pub fn build_step(
    g: &mut Graph,
    net: &mut NetworkParams,
    bound: &BoundParams,
    xs: &Matrix,
    ys: &[usize],
    xt: &Matrix,
    bank: &mut CentroidBank,
    context: Option<&StepContext>,
    config: &TrainConfig,
) -> Result<(StepGraph, StepContext)> {
    let (fs, ft, ada) = forward_ada(g, net, bound, xs, ys, xt, config)?;
    let ctx = match context {
        Some(c) => c.clone(),
        None => StepContext::build(
            bank,
            g.value(fs),
            ys,
            g.value(ft),
            g.value(ada.target_logits),
            config,
        ),
    };
    let step = assemble_loss(g, fs, ys, ft, ada, &ctx, config)?;
    Ok((step, ctx))
}

/// Mean loss components over an epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub cls: f64,
    pub adv: f64,
    pub cct: f64,
    pub cca: f64,
    pub con: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the last step of the epoch.
    pub lr: f64,
    pub losses: LossSummary,
    /// Fraction of target samples whose pseudo-label was reliable.
    pub reliable_fraction: f64,
    pub mean_margin: f64,
    /// `‖c_s^k − c_t^k‖` per class at the end of the epoch.
    pub centroid_gaps: Vec<f64>,
    pub metrics: MetricsRecord,
}

#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub bank: CentroidBank,
    pub trace: Vec<EpochRecord>,
}

/// Joint adaptation. Centroids are recomputed from the whole of both
/// domains at the start of every epoch and tracked per iteration in between.
pub fn train_stage2(
    config: &TrainConfig,
    net: &mut NetworkParams,
    source: &Dataset,
    target: &Dataset,
) -> Result<Stage2Output> {
    config.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::Contract("stage 2 needs nonempty source and target sets".into()));
    }
    let target_seed = config.seed ^ 0x5eed_7a26_e700_0001;
    let per_epoch = batch_iter(source.len(), config.batch_size, config.seed, 0)?
        .len()
        .min(batch_iter(target.len(), config.batch_size, target_seed, 0)?.len());
    let total_steps = per_epoch * config.epochs_stage2;
    let mut adam = AdamState::new(trainable(net, config.freeze_encoder).into_iter().map(|m| &*m));
    let mut step = 0;
    let mut last_bank = None;
    let mut trace = Vec::with_capacity(config.epochs_stage2);
    for epoch in 0..config.epochs_stage2 {
        let mut bank = CentroidBank::init(net, source, target)?;
        let sb = batch_iter(source.len(), config.batch_size, config.seed, epoch as u64)?;
        let tb = batch_iter(target.len(), config.batch_size, target_seed, epoch as u64)?;
        let mut sums = LossSummary::default();
        let (mut reliable, mut seen, mut margin_sum) = (0usize, 0usize, 0.0);
        let mut lr = config.lr_init;
        for (bs, bt) in sb.iter().zip(&tb).take(per_epoch) {
            let ys = source.labels_at(bs);
            let mut g = Graph::new();
            let bound = net.bind(&mut g);
            let (s, ctx) = build_step(
                &mut g,
                net,
                &bound,
                &source.features(bs),
                &ys,
                &target.features(bt),
                &mut bank,
                None,
                config,
            )?;
            let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
            let parts = [
                ("cls", value(Some(s.terms.cls))),
                ("adv", value(Some(s.terms.adv))),
                ("cct", value(s.terms.cct)),
                ("cca", value(s.terms.cca)),
                ("con", value(s.terms.con)),
                ("total", value(Some(s.total))),
            ];
            for (name, v) in parts {
                check_finite(name, v, epoch)?;
            }
            sums.cls += parts[0].1;
            sums.adv += parts[1].1;
            sums.cct += parts[2].1;
            sums.cca += parts[3].1;
            sums.con += parts[4].1;
            sums.total += parts[5].1;
            reliable += ctx.reliable.iter().filter(|&&r| r).count();
            seen += ctx.reliable.len();
            margin_sum += ctx.margins.0.iter().sum::<f64>() / ctx.margins.0.len() as f64;

            g.backward(s.total)?;
            let mut grads = bound.grads(&g);
            if config.freeze_encoder {
                grads.drain(..net.encoder_tensor_count());
            }
            lr = cosine_lr(step, total_steps, config.lr_init);
            adam_step(
                trainable(net, config.freeze_encoder),
                &grads,
                &mut adam,
                lr,
                config.weight_decay,
            )?;
            step += 1;
        }
        let iters = per_epoch as f64;
        let losses = LossSummary {
            cls: sums.cls / iters,
            adv: sums.adv / iters,
            cct: sums.cct / iters,
            cca: sums.cca / iters,
            con: sums.con / iters,
            total: sums.total / iters,
        };
        let record = EpochRecord {
            epoch,
            lr,
            losses,
            reliable_fraction: reliable as f64 / seen as f64,
            mean_margin: margin_sum / iters,
            centroid_gaps: bank.gaps(),
            metrics: evaluate(net, target, Some(epoch))?,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} OS {:.1} OS* {:.1} UNK {:.1}",
            record.losses.total,
            record.metrics.os,
            record.metrics.os_star,
            record.metrics.unk.unwrap_or(f64::NAN)
        );
        trace.push(record);
        last_bank = Some(bank);
    }
    Ok(Stage2Output {
        bank: last_bank.expect("at least one epoch"),
        trace,
    })
}

/// Result of a complete two-stage run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub net: NetworkParams,
    pub stage1: Vec<Stage1Record>,
    pub stage2: Stage2Output,
}

impl TrainOutput {
    pub fn final_metrics(&self) -> &MetricsRecord {
        &self.stage2.trace.last().expect("at least one epoch").metrics
    }
}

/// Stage 1 followed by stage 2 from a network initialised with `config.seed`.
pub fn train(
    config: &TrainConfig,
    spec: &crate::model::ModelSpec,
    source: &Dataset,
    target: &Dataset,
) -> Result<TrainOutput> {
    config.validate()?;
    let mut net = NetworkParams::init(spec, config.seed)?;
    let stage1 = pretrain_stage1(config, &mut net, source)?;
    let stage2 = train_stage2(config, &mut net, source, target)?;
    Ok(TrainOutput { net, stage1, stage2 })
}

#[cfg(test)]
mod tests;
