//! Fine-tuning objectives: prototypical triplet loss, the additive cosine
//! margin loss, prototype cross-entropy and their combination.

use serde::{Deserialize, Serialize};

use crate::diffcore::{CustomOp, DiffTensor, Graph, Var};
use crate::error::{Error, Result};

/// Meta-testing hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Evaluation tasks per run.
    pub episodes_count: usize,
    pub finetune_epochs: usize,
    /// Margin of the prototypical triplet loss.
    pub triplet_margin: f64,
    /// Scale `s` of the cosine margin loss.
    pub lmm_scale: f64,
    /// Additive cosine margin `m`.
    pub lmm_margin: f64,
    /// Weight of the triplet term in the combined objective.
    pub ptloss_weight: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Normalize real queries with their own batch statistics at inference.
    pub transductive: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            episodes_count: 600,
            finetune_epochs: 100,
            triplet_margin: 1.0,
            lmm_scale: 30.0,
            lmm_margin: 0.35,
            ptloss_weight: 1.0,
            learning_rate: 1e-4,
            momentum: 0.9,
            transductive: true,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lmm_scale > 0.0) {
            return Err(Error::Parameter(format!("scale s must be > 0, got {}", self.lmm_scale)));
        }
        if !(0.0..1.0).contains(&self.lmm_margin) {
            return Err(Error::Parameter(format!("margin m must lie in [0, 1), got {}", self.lmm_margin)));
        }
        if !(self.triplet_margin >= 0.0) {
            return Err(Error::Parameter(format!("triplet margin must be ≥ 0, got {}", self.triplet_margin)));
        }
        if !(self.ptloss_weight >= 0.0) {
            return Err(Error::Parameter(format!("triplet weight must be ≥ 0, got {}", self.ptloss_weight)));
        }
        crate::diffcore::SgdConfig::new(self.learning_rate, self.momentum)?;
        Ok(())
    }
}

/// Per-class mean embeddings on a graph, rows ordered by episode label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prototypes {
    pub var: Var,
    pub n_classes: usize,
}

pub fn compute_prototypes(g: &mut Graph, support_emb: Var, labels: &[usize], n_classes: usize) -> Result<Prototypes> {
    let var = g.class_means(support_emb, labels, n_classes)?;
    Ok(Prototypes { var, n_classes })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `max(0, ‖a−p‖ − ‖a−n‖ + margin)` with plain Euclidean distances.
pub fn triplet(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> f64 {
    (euclidean(anchor, positive) - euclidean(anchor, negative) + margin).max(0.0)
}

struct PtLossOp {
    labels: Vec<usize>,
    margin: f64,
}

impl CustomOp for PtLossOp {
    fn name(&self) -> &'static str {
        "ptloss"
    }

    fn backward(&self, inputs: &[&DiffTensor], _output: &DiffTensor, out_grad: &[f64], grads: &mut [Vec<f64>]) {
        let (emb, protos) = (inputs[0], inputs[1]);
        let d = emb.cols();
        let g = out_grad[0];
        let (ge, gp) = grads.split_at_mut(1);
        let (ge, gp) = (&mut ge[0], &mut gp[0]);
        for (i, &c) in self.labels.iter().enumerate() {
            let s = emb.row(i);
            let pc = protos.row(c);
            let dpos = euclidean(s, pc);
            for j in 0..protos.rows() {
                if j == c {
                    continue;
                }
                let pj = protos.row(j);
                let dneg = euclidean(s, pj);
                if dpos - dneg + self.margin <= 0.0 {
                    continue;
                }
                for k in 0..d {
                    // zero-length distances contribute a zero subgradient
                    let up = if dpos > 0.0 { (s[k] - pc[k]) / dpos } else { 0.0 };
                    let un = if dneg > 0.0 { (s[k] - pj[k]) / dneg } else { 0.0 };
                    ge[i * d + k] += g * (up - un);
                    gp[c * d + k] -= g * up;
                    gp[j * d + k] += g * un;
                }
            }
        }
    }
}

/// Sum over every support embedding and every other-class prototype of
/// `triplet(embedding, own prototype, other prototype)`.
pub fn ptloss(g: &mut Graph, support_emb: Var, labels: &[usize], protos: Prototypes, margin: f64) -> Result<Var> {
    if protos.n_classes < 2 {
        return Err(Error::Contract("ptloss needs at least two classes".into()));
    }
    if !(margin >= 0.0) {
        return Err(Error::Parameter(format!("triplet margin must be ≥ 0, got {margin}")));
    }
    let emb = g.value(support_emb);
    let p = g.value(protos.var);
    if emb.cols() != p.cols() || emb.rows() != labels.len() {
        return Err(Error::Dimension {
            op: "ptloss",
            left: emb.shape().to_vec(),
            right: p.shape().to_vec(),
        });
    }
    let mut total = 0.0;
    for (i, &c) in labels.iter().enumerate() {
        if c >= protos.n_classes {
            return Err(Error::Contract(format!("label {c} outside 0..{}", protos.n_classes)));
        }
        for j in 0..protos.n_classes {
            if j != c {
                total += triplet(emb.row(i), p.row(c), p.row(j), margin);
            }
        }
    }
    let op = PtLossOp {
        labels: labels.to_vec(),
        margin,
    };
    Ok(g.custom(&[support_emb, protos.var], DiffTensor::scalar(total), Box::new(op)))
}

/// Batch mean of `−log(e^{s(cos θ_y − m)} / (e^{s(cos θ_y − m)} + Σ_{j≠y} e^{s cos θ_j}))`,
/// where `θ_j` is the angle between an embedding and class weight row `j`.
pub fn cosface_loss(g: &mut Graph, embeddings: Var, labels: &[usize], class_weights: Var, s: f64, m: f64) -> Result<Var> {
    if !(s > 0.0) {
        return Err(Error::Parameter(format!("scale s must be > 0, got {s}")));
    }
    if !(0.0..1.0).contains(&m) {
        return Err(Error::Parameter(format!("margin m must lie in [0, 1), got {m}")));
    }
    let cos = g.cosine_matrix(embeddings, class_weights)?;
    let shifted = g.add_at_labels(cos, labels, -m)?;
    let logits = g.scale(shifted, s);
    g.cross_entropy(logits, labels)
}

/// Softmax cross-entropy over negative squared distances to the prototypes.
pub fn proto_xent(g: &mut Graph, query_emb: Var, labels: &[usize], protos: Prototypes) -> Result<Var> {
    let d = g.squared_euclidean_matrix(query_emb, protos.var)?;
    let logits = g.scale(d, -1.0);
    g.cross_entropy(logits, labels)
}

/// Nodes of the combined fine-tuning objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveTerms {
    pub total: Var,
    pub margin_loss: Var,
    pub triplet_loss: Var,
    pub prototypes: Prototypes,
}

/// Embeddings and labels the fine-tuning objective is evaluated on.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeEmbeddings<'a> {
    pub support: Var,
    pub support_labels: &'a [usize],
    pub pseudo: Var,
    pub pseudo_labels: &'a [usize],
    pub n_classes: usize,
}

/// Margin loss on the pseudo queries against `head` plus
/// `λ · ptloss` on the support embeddings.
pub fn finetune_objective(g: &mut Graph, emb: EpisodeEmbeddings<'_>, head: Var, hp: &HyperParams) -> Result<ObjectiveTerms> {
    if emb.pseudo_labels.is_empty() {
        return Err(Error::Contract("fine-tuning needs a non-empty pseudo query set".into()));
    }
    let prototypes = compute_prototypes(g, emb.support, emb.support_labels, emb.n_classes)?;
    let triplet_loss = ptloss(g, emb.support, emb.support_labels, prototypes, hp.triplet_margin)?;
    let margin_loss = cosface_loss(g, emb.pseudo, emb.pseudo_labels, head, hp.lmm_scale, hp.lmm_margin)?;
    let weighted = g.scale(triplet_loss, hp.ptloss_weight);
    let total = g.add(margin_loss, weighted)?;
    Ok(ObjectiveTerms {
        total,
        margin_loss,
        triplet_loss,
        prototypes,
    })
}
