//! Central finite-difference checks of the reverse-mode gradients.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::linalg;
use crate::losses::LossWeights;
use crate::model::{ModelConfig, ModelParams, PreparedCloud};
use crate::synth::{sample_queries, sample_triplet, ArticulatedScene, DataConfig};
use crate::tensor::Tensor;
use crate::train::{build_loss, LossOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Largest accepted `|analytic - numeric| / max(1, |numeric|)`.
    pub tolerance: f64,
    /// Entries sampled per leaf; smaller leaves are checked exhaustively.
    pub entries_per_leaf: usize,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-5,
            entries_per_leaf: 24,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseKind {
    Operator,
    Composite,
    Model,
}

/// A scalar-valued graph together with the values of all its leaves.
#[derive(Debug, Clone)]
pub struct CheckCase {
    pub name: String,
    pub kind: CaseKind,
    pub graph: Graph,
    pub loss: NodeId,
    pub leaves: BTreeMap<String, Tensor>,
    /// Leaves whose gradient is checked.
    pub wrt: Vec<String>,
    /// The analytic gradient must be exactly zero instead of matching.
    pub expect_zero: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub name: String,
    pub kind: CaseKind,
    pub entries: usize,
    pub max_error: f64,
    pub passed: bool,
}

/// Compares analytic and central-difference gradients on sampled entries.
pub fn check_case(case: &CheckCase, cfg: &CheckConfig) -> Result<CheckRow> {
    let values = case.graph.evaluate(&case.leaves)?;
    let names: Vec<&str> = case.wrt.iter().map(String::as_str).collect();
    let grads = case.graph.gradient(&values, case.loss, &names)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut leaves = case.leaves.clone();
    let (mut entries, mut max_error) = (0, 0.0f64);
    for name in &case.wrt {
        let analytic = &grads[name];
        let len = analytic.len();
        let picks: Vec<usize> = if len <= cfg.entries_per_leaf {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut rng, len, cfg.entries_per_leaf).into_vec()
        };
        for i in picks {
            let a = analytic.data()[i];
            let err = if case.expect_zero {
                a.abs()
            } else {
                let loss_at = |leaves: &BTreeMap<String, Tensor>| -> Result<f64> {
                    Ok(case.graph.evaluate(leaves)?.get(case.loss).item())
                };
                let orig = case.leaves[name].data()[i];
                leaves.get_mut(name).expect("bound leaf").data_mut()[i] = orig + cfg.step;
                let up = loss_at(&leaves)?;
                leaves.get_mut(name).expect("bound leaf").data_mut()[i] = orig - cfg.step;
                let down = loss_at(&leaves)?;
                leaves.get_mut(name).expect("bound leaf").data_mut()[i] = orig;
                let n = (up - down) / (2.0 * cfg.step);
                (a - n).abs() / n.abs().max(1.0)
            };
            max_error = max_error.max(err);
            entries += 1;
        }
    }
    let passed = if case.expect_zero {
        max_error == 0.0
    } else {
        max_error < cfg.tolerance
    };
    Ok(CheckRow {
        name: case.name.clone(),
        kind: case.kind,
        entries,
        max_error,
        passed,
    })
}

struct CaseBuilder {
    rng: ChaCha8Rng,
    graph: Graph,
    leaves: BTreeMap<String, Tensor>,
}

impl CaseBuilder {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            graph: Graph::new(),
            leaves: BTreeMap::new(),
        }
    }

    fn values(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.rng.random_range(lo..hi)).collect()
    }

    /// Uniform in `lo..hi` with a random sign: keeps kinks at zero away.
    fn signed(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| if self.rng.random::<bool>() { 1.0 } else { -1.0 } * self.rng.random_range(lo..hi)).collect()
    }

    fn leaf(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<NodeId> {
        let t = Tensor::new(shape, data)?;
        let id = self.graph.input(name, shape)?;
        self.leaves.insert(name.into(), t);
        Ok(id)
    }

    fn uniform(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        let n = shape.iter().product();
        let v = self.values(n, -1.0, 1.0);
        self.leaf(name, shape, v)
    }

    /// `Σ w ⊙ x` with fixed random weights, so every output entry matters.
    fn probe(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.graph.shape(x).to_vec();
        let w = self.values(shape.iter().product(), -1.0, 1.0);
        let w = self.graph.constant(Tensor::new(&shape, w)?);
        let p = self.graph.mul(x, w)?;
        Ok(self.graph.sum(p))
    }

    fn finish(self, name: &str, kind: CaseKind, loss: NodeId) -> CheckCase {
        let wrt = self.leaves.keys().cloned().collect();
        CheckCase {
            name: name.into(),
            kind,
            graph: self.graph,
            loss,
            leaves: self.leaves,
            wrt,
            expect_zero: false,
        }
    }
}

fn op_case(name: &str, seed: u64) -> Result<CheckCase> {
    let mut c = CaseBuilder::new(seed);
    let out = match name {
        "matmul" => {
            let a = c.uniform("a", &[3, 4])?;
            let b = c.uniform("b", &[4, 2])?;
            c.graph.matmul(a, b)?
        }
        "transpose" => {
            let a = c.uniform("a", &[3, 4])?;
            c.graph.transpose(a)?
        }
        "add" | "sub" | "mul" => {
            let a = c.uniform("a", &[2, 3])?;
            let b = c.uniform("b", &[2, 3])?;
            match name {
                "add" => c.graph.add(a, b)?,
                "sub" => c.graph.sub(a, b)?,
                _ => c.graph.mul(a, b)?,
            }
        }
        "scale" => {
            let a = c.uniform("a", &[5])?;
            c.graph.scale(a, -1.7)
        }
        "add_scalar" => {
            let a = c.uniform("a", &[5])?;
            let s = c.graph.add_scalar(a, 0.3);
            c.graph.mul(s, s)?
        }
        "abs" | "relu" => {
            let v = c.signed(8, 0.1, 1.0);
            let a = c.leaf("a", &[8], v)?;
            if name == "abs" {
                c.graph.abs(a)
            } else {
                c.graph.relu(a)
            }
        }
        "sigmoid" => {
            let v = c.values(6, -3.0, 3.0);
            let a = c.leaf("a", &[6], v)?;
            c.graph.sigmoid(a)
        }
        "softmax" => {
            let a = c.uniform("a", &[3, 4])?;
            c.graph.softmax(a)
        }
        "reshape" => {
            let a = c.uniform("a", &[2, 6])?;
            c.graph.reshape(a, &[3, 4])?
        }
        "broadcast" => {
            let a = c.uniform("a", &[4])?;
            c.graph.broadcast(a, 3)?
        }
        "concat" => {
            let a = c.uniform("a", &[2, 3])?;
            let b = c.uniform("b", &[2, 2])?;
            c.graph.concat(&[a, b], 1)?
        }
        "gather" => {
            let a = c.uniform("a", &[5, 3])?;
            c.graph.gather(a, vec![4, 0, 0, 2])?
        }
        "scatter_max" => {
            let x = c.uniform("x", &[6, 3])?;
            c.graph.scatter_max(x, vec![0, 2, 2, 5, 0, 7], 2)?
        }
        "conv3d" => {
            let x = c.uniform("x", &[2, 4, 4, 4])?;
            let w = c.uniform("w", &[3, 2, 3, 3, 3])?;
            let b = c.uniform("b", &[3])?;
            c.graph.conv3d(x, w, b, 1, 1)?
        }
        "conv_transpose3d" => {
            let x = c.uniform("x", &[2, 2, 2, 2])?;
            let w = c.uniform("w", &[2, 3, 2, 2, 2])?;
            let b = c.uniform("b", &[3])?;
            c.graph.conv_transpose3d(x, w, b, 2)?
        }
        "max_pool3d" => {
            let x = c.uniform("x", &[2, 4, 4, 4])?;
            c.graph.max_pool3d(x, 2)?
        }
        "upsample3d" => {
            let x = c.uniform("x", &[2, 2, 2, 2])?;
            c.graph.upsample3d(x, 2)?
        }
        "sum" | "mean" | "max" => {
            let a = c.uniform("a", &[7])?;
            let r = match name {
                "sum" => c.graph.sum(a),
                "mean" => c.graph.mean(a),
                _ => c.graph.max(a),
            };
            c.graph.mul(r, r)?
        }
        "mean_rows" => {
            let a = c.uniform("a", &[5, 3])?;
            c.graph.mean_rows(a)?
        }
        "stop_gradient" => {
            let a = c.uniform("a", &[4])?;
            let s = c.graph.stop_gradient(a);
            let loss = c.probe(s)?;
            let mut case = c.finish(name, CaseKind::Operator, loss);
            case.expect_zero = true;
            return Ok(case);
        }
        "bce" => {
            let p = c.values(8, 0.05, 0.95);
            let probs = c.leaf("probs", &[8], p)?;
            let labels: Vec<f64> = (0..8).map(|i| (i % 3 == 0) as u8 as f64).collect();
            let y = c.graph.constant(Tensor::from_vec(labels));
            let loss = c.graph.bce(probs, y)?;
            return Ok(c.finish(name, CaseKind::Operator, loss));
        }
        "heatmap" => {
            let k = c.values(6, -0.4, 0.4);
            let k = c.leaf("k", &[2, 3], k)?;
            c.graph.heatmap(k, 4, 0.15)?
        }
        "trilinear" => {
            let vol = c.uniform("volume", &[2, 4, 4, 4])?;
            let p = c.values(15, -0.45, 0.45);
            let p = c.leaf("points", &[5, 3], p)?;
            c.graph.trilinear(vol, p)?
        }
        "rigid_rotation" => {
            let src = c.values(18, -0.5, 0.5);
            let r =
                linalg::rotation_about(linalg::normalize([0.3, -0.5, 0.8]).expect("nonzero"), 0.9);
            let dst: Vec<f64> = src
                .chunks_exact(3)
                .flat_map(|p| {
                    linalg::add(linalg::mat_vec(&r, [p[0], p[1], p[2]]), [0.1, -0.2, 0.05])
                })
                .collect::<Vec<_>>();
            let noise = c.values(18, -0.02, 0.02);
            let dst: Vec<f64> = dst.iter().zip(&noise).map(|(a, b)| a + b).collect();
            let s = c.leaf("src", &[6, 3], src)?;
            let d = c.leaf("dst", &[6, 3], dst)?;
            c.graph.rigid_rotation(s, d, false)?
        }
        "rotation_axis" => {
            let r =
                linalg::rotation_about(linalg::normalize([-0.2, 0.7, 0.4]).expect("nonzero"), 1.1);
            let r = c.leaf("r", &[3, 3], r.iter().flatten().copied().collect())?;
            c.graph.rotation_axis(r)?
        }
        other => {
            return Err(Error::Invalid(format!(
                "no gradient check for operator `{other}`"
            )))
        }
    };
    let loss = c.probe(out)?;
    Ok(c.finish(name, CaseKind::Operator, loss))
}

/// One case per differentiable operator, in [`crate::graph::OPERATORS`] order.
pub fn operator_cases(seed: u64) -> Result<Vec<CheckCase>> {
    crate::graph::OPERATORS
        .iter()
        .enumerate()
        .map(|(i, name)| op_case(name, seed.wrapping_add(i as u64)))
        .collect()
}

fn dense(c: &mut CaseBuilder, x: NodeId, name: &str, outputs: usize) -> Result<NodeId> {
    let inputs = c.graph.shape(x)[1];
    let rows = c.graph.shape(x)[0];
    let w = c.uniform(&format!("{name}.w"), &[inputs, outputs])?;
    let b = c.uniform(&format!("{name}.b"), &[outputs])?;
    let xw = c.graph.matmul(x, w)?;
    let bb = c.graph.broadcast(b, rows)?;
    c.graph.add(xw, bb)
}

/// Small multi-operator graphs.
pub fn composite_cases(seed: u64) -> Result<Vec<CheckCase>> {
    let mut out = Vec::new();

    let mut c = CaseBuilder::new(seed);
    let x = c.uniform("x", &[4, 3])?;
    let y = dense(&mut c, x, "linear", 2)?;
    let loss = c.probe(y)?;
    out.push(c.finish("linear", CaseKind::Composite, loss));

    let mut c = CaseBuilder::new(seed + 1);
    let z = c.uniform("logits", &[1, 6])?;
    let p = c.graph.softmax(z);
    let p = c.graph.reshape(p, &[6])?;
    let y = c
        .graph
        .constant(Tensor::from_vec(vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]));
    let loss = c.graph.bce(p, y)?;
    out.push(c.finish("softmax_bce", CaseKind::Composite, loss));

    let mut c = CaseBuilder::new(seed + 2);
    let x = c.uniform("x", &[1, 4, 4, 4])?;
    let w = c.uniform("w", &[1, 1, 3, 3, 3])?;
    let b = c.uniform("b", &[1])?;
    let y = c.graph.conv3d(x, w, b, 1, 1)?;
    let s = c.graph.sigmoid(y);
    let loss = c.graph.mean(s);
    out.push(c.finish("conv3d_single_channel", CaseKind::Composite, loss));

    let mut c = CaseBuilder::new(seed + 3);
    let x = c.uniform("x", &[5, 3])?;
    let h = dense(&mut c, x, "l0", 6)?;
    let h = c.graph.relu(h);
    let h = dense(&mut c, h, "l1", 6)?;
    let h = c.graph.relu(h);
    let y = dense(&mut c, h, "l2", 2)?;
    let sq = c.graph.mul(y, y)?;
    let loss = c.graph.sum(sq);
    out.push(c.finish("mlp3", CaseKind::Composite, loss));
    Ok(out)
}

/// Full triplet training loss of the micro model (8³ grid, m = 2,
/// 64 points) with respect to every parameter.
pub fn micro_model_case(seed: u64) -> Result<CheckCase> {
    let config = ModelConfig::micro();
    let mut params = ModelParams::init(&config, seed)?;
    // Zero biases put dead rows exactly on a ReLU kink; move off it.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, t) in params.tensors.iter_mut() {
        if name.ends_with(".b") {
            for v in t.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let data = DataConfig {
        scenes: vec!["door".into()],
        points_per_frame: config.input_points,
        positive_queries: 16,
        negative_queries: 16,
        ..DataConfig::default()
    };
    let seq = sample_triplet(&ArticulatedScene::door(), &data, &mut rng)?;
    let frames = seq
        .frames
        .iter()
        .map(|f| PreparedCloud::new(&f.points, &config))
        .collect::<Result<Vec<_>>>()?;
    let queries = seq
        .frames
        .iter()
        .map(|f| {
            sample_queries(
                &f.points,
                data.positive_queries,
                data.negative_queries,
                &mut rng,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let opts = LossOptions {
        weights: LossWeights::default(),
        articulation_prior: true,
        detach_fit: false,
        detach_keypoints: false,
    };
    let mut graph = Graph::new();
    let nodes = build_loss(&mut graph, &config, &frames, &queries, &opts)?;
    let wrt = graph.param_names();
    Ok(CheckCase {
        name: "micro_model".to_string(),
        kind: CaseKind::Model,
        graph,
        loss: nodes.total,
        leaves: params.tensors,
        wrt,
        expect_zero: false,
    })
}

/// Every operator, the composites and the micro model. `corrupt` names an
/// operator whose backward pass is deliberately broken.
pub fn run_suite(cfg: &CheckConfig, corrupt: Option<&str>) -> Result<Vec<CheckRow>> {
    if let Some(op) = corrupt {
        if !crate::graph::OPERATORS.contains(&op) {
            return Err(Error::Invalid(format!("unknown operator `{op}`")));
        }
    }
    let mut cases = operator_cases(cfg.seed)?;
    cases.extend(composite_cases(cfg.seed)?);
    cases.push(micro_model_case(cfg.seed)?);
    cases
        .iter_mut()
        .map(|case| {
            if let Some(op) = corrupt {
                case.graph.corrupt_backward(op, 1.5);
            }
            let per_leaf = if case.kind == CaseKind::Model {
                cfg.entries_per_leaf.min(6)
            } else {
                cfg.entries_per_leaf
            };
            check_case(
                case,
                &CheckConfig {
                    entries_per_leaf: per_leaf,
                    ..*cfg
                },
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_operator_has_exactly_one_case_that_uses_it() {
        let cases = operator_cases(3).unwrap();
        assert_eq!(cases.len(), crate::graph::OPERATORS.len());
        for (case, name) in cases.iter().zip(crate::graph::OPERATORS) {
            assert_eq!(case.name, *name);
            assert!(case.graph.op_names().contains(name), "{name}");
        }
    }

    #[test]
    fn operators_pass() {
        let cfg = CheckConfig::default();
        for case in operator_cases(5).unwrap() {
            let row = check_case(&case, &cfg).unwrap();
            assert!(row.passed, "{row:?}");
        }
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let cfg = CheckConfig::default();
        for name in ["matmul", "stop_gradient", "trilinear"] {
            let mut case = op_case(name, 9).unwrap();
            case.graph.corrupt_backward(name, 1.5);
            assert!(!check_case(&case, &cfg).unwrap().passed, "{name}");
        }
    }
}
