//! Loss graphs for one sequence and the optimizer loop over in-memory data.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Values};
use crate::losses::{self, LossParts, LossWeights};
use crate::model::{Builder, ModelConfig, ModelParams, PreparedCloud};
use crate::optim::{Adam, AdamConfig};
use crate::synth::{self, DataConfig, QueryBatch, Sequence};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Sequences per optimizer step; gradients are averaged.
    pub batch_size: usize,
    pub lr: f64,
    /// First epoch trained at `lr / lr_drop_factor`.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Enables the correspondence and axis-consistency terms.
    pub articulation_prior: bool,
    /// Treat the fitted rotation as a constant in the correspondence loss.
    pub detach_fit: bool,
    /// Block gradients from the occupancy terms into the keypoints.
    pub detach_keypoints: bool,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 45,
            batch_size: 1,
            lr: 1e-4,
            lr_drop_epoch: 30,
            lr_drop_factor: 10.0,
            max_steps: 0,
            seed: 0,
            weights: LossWeights::default(),
            articulation_prior: true,
            detach_fit: false,
            detach_keypoints: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.lr_drop_factor >= 1.0) {
            return Err(Error::Invalid(format!(
                "lr_drop_factor must be at least 1, got {}",
                self.lr_drop_factor
            )));
        }
        self.weights.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.lr / self.lr_drop_factor
        } else {
            self.lr
        }
    }
}

/// Loss nodes of one sequence graph. Occupancy terms are averaged over the
/// consecutive pairs; correspondence terms are summed.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub occ_t: NodeId,
    pub occ_s: NodeId,
    pub corr: Option<NodeId>,
    pub axis: Option<NodeId>,
}

impl LossNodes {
    pub fn parts(&self, values: &Values) -> LossParts {
        LossParts {
            occ_t: values.get(self.occ_t).item(),
            occ_s: values.get(self.occ_s).item(),
            corr: self.corr.map(|n| values.get(n).item()),
            axis: self.axis.map(|n| values.get(n).item()),
        }
    }
}

/// Options that shape the loss graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub weights: LossWeights,
    pub articulation_prior: bool,
    pub detach_fit: bool,
    pub detach_keypoints: bool,
}

impl From<&TrainConfig> for LossOptions {
    fn from(c: &TrainConfig) -> Self {
        Self {
            weights: c.weights,
            articulation_prior: c.articulation_prior,
            detach_fit: c.detach_fit,
            detach_keypoints: c.detach_keypoints,
        }
    }
}

/// Builds the training loss of a 2- or 3-frame sequence. `queries[i]`
/// belongs to `frames[i]`.
pub fn build_loss(
    g: &mut Graph,
    config: &ModelConfig,
    frames: &[PreparedCloud],
    queries: &[QueryBatch],
    opts: &LossOptions,
) -> Result<LossNodes> {
    if frames.len() < 2 || frames.len() != queries.len() {
        return Err(Error::Invalid(format!(
            "need >= 2 frames with queries, got {} frames, {} query sets",
            frames.len(),
            queries.len()
        )));
    }
    let mut b = Builder::new(g, config);
    let phis = frames
        .iter()
        .map(|f| b.encode(f))
        .collect::<Result<Vec<_>>>()?;
    let mut occ_t = Vec::new();
    let mut occ_s = Vec::new();
    let mut corr = Vec::new();
    let mut rotations = Vec::new();
    for i in 0..frames.len() - 1 {
        let (sal_s, sal_t) = b.saliency(&frames[i], &frames[i + 1])?;
        let k_s = b.keypoints(sal_s)?;
        let k_t = b.keypoints(sal_t)?;
        let (hk_s, hk_t) = if opts.detach_keypoints {
            (b.graph.stop_gradient(k_s), b.graph.stop_gradient(k_t))
        } else {
            (k_s, k_t)
        };
        let transported = b.transport(phis[i], phis[i + 1], hk_s, hk_t)?;
        let qt = b
            .graph
            .constant(Tensor::from_points(&queries[i + 1].points));
        let qs = b.graph.constant(Tensor::from_points(&queries[i].points));
        let prob_t = b.decode(qt, transported)?;
        let prob_s = b.decode(qs, phis[i])?;
        occ_t.push(losses::occupancy_node(
            b.graph,
            prob_t,
            &queries[i + 1].labels,
        )?);
        occ_s.push(losses::occupancy_node(b.graph, prob_s, &queries[i].labels)?);
        if opts.articulation_prior {
            let (c, r) = losses::correspondence_node(b.graph, k_s, k_t, opts.detach_fit)?;
            corr.push(c);
            rotations.push(r);
        }
    }
    let g = b.graph;
    let mean_of = |g: &mut Graph, nodes: &[NodeId]| -> Result<NodeId> {
        let s = sum_nodes(g, nodes)?;
        Ok(g.scale(s, 1.0 / nodes.len() as f64))
    };
    let occ_t = mean_of(g, &occ_t)?;
    let occ_s = mean_of(g, &occ_s)?;
    let mut total = g.add(occ_t, occ_s)?;
    let corr = if corr.is_empty() {
        None
    } else {
        Some(sum_nodes(g, &corr)?)
    };
    if let Some(c) = corr {
        let w = g.scale(c, opts.weights.corr);
        total = g.add(total, w)?;
    }
    let axis = if rotations.len() >= 2 {
        Some(losses::axis_node(g, rotations[0], rotations[1])?)
    } else {
        None
    };
    if let Some(a) = axis {
        let w = g.scale(a, opts.weights.axis);
        total = g.add(total, w)?;
    }
    Ok(LossNodes {
        total,
        occ_t,
        occ_s,
        corr,
        axis,
    })
}

fn sum_nodes(g: &mut Graph, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = g.add(acc, n)?;
    }
    Ok(acc)
}

/// One optimizer step as reported to the caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub parts: LossParts,
    pub total: f64,
}

/// Owns the parameters and optimizer state of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: ModelParams,
    pub config: TrainConfig,
    pub data: DataConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(model: &ModelConfig, config: &TrainConfig, data: &DataConfig) -> Result<Self> {
        config.validate()?;
        data.validate()?;
        let params = ModelParams::init(model, config.seed)?;
        Self::from_params(params, config, data)
    }

    /// Continues from existing parameters with a fresh optimizer.
    pub fn from_params(
        params: ModelParams,
        config: &TrainConfig,
        data: &DataConfig,
    ) -> Result<Self> {
        params.validate()?;
        if data.positive_queries > params.config.input_points {
            return Err(Error::Invalid(format!(
                "positive_queries {} exceeds model input_points {}",
                data.positive_queries, params.config.input_points
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            params,
            config: config.clone(),
            data: data.clone(),
            adam: Adam::new(AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            }),
            rng,
            step: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    fn budget_left(&self) -> bool {
        self.config.max_steps == 0 || self.step < self.config.max_steps
    }

    /// Loss parts and parameter gradients of one sequence, with fresh
    /// augmentation and queries drawn from the trainer's generator.
    fn sequence_gradients(
        &mut self,
        seq: &Sequence,
    ) -> Result<(LossParts, f64, BTreeMap<String, Tensor>)> {
        let seq = if self.data.augment.enabled {
            synth::augment(seq, &self.data.augment, self.data.margin, &mut self.rng)?
        } else {
            seq.clone()
        };
        let model = &self.params.config;
        let frames = seq
            .frames
            .iter()
            .map(|f| PreparedCloud::new(&f.points, model))
            .collect::<Result<Vec<_>>>()?;
        let queries = frames
            .iter()
            .map(|f| {
                synth::sample_queries(
                    &f.points,
                    self.data.positive_queries,
                    self.data.negative_queries,
                    &mut self.rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let nodes = build_loss(
            &mut g,
            model,
            &frames,
            &queries,
            &LossOptions::from(&self.config),
        )?;
        let values = g.evaluate(&self.params.tensors)?;
        let parts = nodes.parts(&values);
        let total = values.get(nodes.total).item();
        let grads = g.param_gradients(&values, nodes.total)?;
        Ok((parts, total, grads))
    }

    /// One optimizer step over `batch` (gradients averaged).
    pub fn train_step(&mut self, batch: &[&Sequence], epoch: usize) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let mut sum: Option<BTreeMap<String, Tensor>> = None;
        let mut parts = LossParts::default();
        let mut total = 0.0;
        let (mut corr, mut axis) = (None::<f64>, None::<f64>);
        for (i, seq) in batch.iter().enumerate() {
            let (p, t, grads) = self.sequence_gradients(seq).map_err(|e| match e {
                Error::NonFinite(msg) => {
                    Error::NonFinite(format!("step {}, batch item {i}: {msg}", self.step))
                }
                other => other,
            })?;
            if !t.is_finite() {
                return Err(Error::NonFinite(format!(
                    "step {}, batch item {i}: total loss {t}",
                    self.step
                )));
            }
            parts.occ_t += p.occ_t;
            parts.occ_s += p.occ_s;
            if let Some(c) = p.corr {
                corr = Some(corr.unwrap_or(0.0) + c);
            }
            if let Some(a) = p.axis {
                axis = Some(axis.unwrap_or(0.0) + a);
            }
            total += t;
            match &mut sum {
                None => sum = Some(grads),
                Some(acc) => {
                    for (name, g) in grads {
                        if let Some(a) = acc.get_mut(&name) {
                            a.add_assign(&g);
                        }
                    }
                }
            }
        }
        let n = batch.len() as f64;
        let mut grads = sum.expect("non-empty batch");
        if batch.len() > 1 {
            for g in grads.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v /= n);
            }
        }
        let lr = self.config.lr_at(epoch);
        self.adam
            .step(&mut self.params.tensors, &grads, lr)
            .map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("step {}: {msg}", self.step)),
                other => other,
            })?;
        let record = StepRecord {
            step: self.step,
            epoch,
            lr,
            parts: LossParts {
                occ_t: parts.occ_t / n,
                occ_s: parts.occ_s / n,
                corr: corr.map(|c| c / n),
                axis: axis.map(|a| a / n),
            },
            total: total / n,
        };
        self.step += 1;
        Ok(record)
    }

    /// One pass over `data` in a seeded random order. `on_step` sees every
    /// record; returning `false` from it stops the epoch early.
    pub fn run_epoch(
        &mut self,
        data: &[Sequence],
        epoch: usize,
        mut on_step: impl FnMut(&StepRecord, &Trainer) -> bool,
    ) -> Result<()> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        for chunk in order.chunks(self.config.batch_size) {
            if !self.budget_left() {
                break;
            }
            let batch: Vec<&Sequence> = chunk.iter().map(|&i| &data[i]).collect();
            let rec = self.train_step(&batch, epoch)?;
            if !on_step(&rec, self) {
                break;
            }
        }
        Ok(())
    }

    /// All configured epochs (or until `max_steps`).
    pub fn run(
        &mut self,
        data: &[Sequence],
        mut on_step: impl FnMut(&StepRecord, &Trainer) -> bool,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Invalid("no training sequences".into()));
        }
        for epoch in 0..self.config.epochs {
            if !self.budget_left() {
                break;
            }
            let mut keep_going = true;
            self.run_epoch(data, epoch, |r, t| {
                keep_going = on_step(r, t);
                keep_going
            })?;
            if !keep_going {
                break;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_dataset;

    fn tiny() -> (ModelConfig, TrainConfig, DataConfig) {
        let model = ModelConfig {
            grid_res: 8,
            keypoints: 3,
            point_channels: 4,
            unet_channels: 2,
            feature_channels: 3,
            attention_channels: 4,
            fused_channels: 3,
            query_channels: 4,
            input_points: 128,
            sampled_points: 8,
            ..ModelConfig::default()
        };
        let data = DataConfig {
            scenes: alloc::vec!["door".into()],
            pairs_per_scene: 2,
            triplets_per_scene: 1,
            points_per_frame: 128,
            positive_queries: 32,
            negative_queries: 32,
            ..DataConfig::default()
        };
        let train = TrainConfig {
            epochs: 2,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        (model, train, data)
    }

    #[test]
    fn zero_epochs_keep_initialization() {
        let (m, mut t, d) = tiny();
        t.epochs = 0;
        let data = generate_dataset(&d, 1, 0).unwrap();
        let mut trainer = Trainer::new(&m, &t, &d).unwrap();
        let init = trainer.params.clone();
        trainer.run(&data, |_, _| true).unwrap();
        assert_eq!(trainer.params, init);
    }

    #[test]
    fn training_is_reproducible_and_reports_terms() {
        let (m, t, d) = tiny();
        let data = generate_dataset(&d, 1, 0).unwrap();
        let run = || {
            let mut trainer = Trainer::new(&m, &t, &d).unwrap();
            let mut log = Vec::new();
            trainer
                .run(&data, |r, _| {
                    log.push(r.clone());
                    true
                })
                .unwrap();
            (log, trainer.params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert_eq!(a.len(), 2 * 3);
        assert!(a.iter().all(|r| r.parts.corr.is_some()));
        assert!(a.iter().any(|r| r.parts.axis.is_some()));
        assert!(a.iter().any(|r| r.parts.axis.is_none()));
    }

    #[test]
    fn disabled_prior_reports_inactive_terms() {
        let (m, mut t, d) = tiny();
        t.articulation_prior = false;
        t.epochs = 1;
        let data = generate_dataset(&d, 1, 0).unwrap();
        let mut trainer = Trainer::new(&m, &t, &d).unwrap();
        trainer
            .run(&data, |r, _| {
                assert!(r.parts.corr.is_none() && r.parts.axis.is_none());
                assert!((r.total - r.parts.occ_t - r.parts.occ_s).abs() < 1e-12);
                true
            })
            .unwrap();
    }

    #[test]
    fn learning_rate_drops_at_configured_epoch() {
        let t = TrainConfig::default();
        assert_eq!(t.lr_at(29), 1e-4);
        assert!((t.lr_at(30) - 1e-5).abs() < 1e-20);
    }
}
