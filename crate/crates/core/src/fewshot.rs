//! Backbone network, cosine prototype classifier, per-episode fine-tuning
//! and episodic meta-training.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffTensor, Graph, NormMode, RunningStats, Sgd, SgdConfig, Var};
use crate::episodes::{sample_episode, Episode, LabeledDataset};
use crate::error::{Error, Result};
use crate::imageaug::{Image, RngStream};
use crate::losses::{compute_prototypes, finetune_objective, proto_xent, EpisodeEmbeddings, HyperParams};

const SNAPSHOT_MAGIC: &[u8; 8] = b"LMMPQSBK";
const SNAPSHOT_VERSION: u32 = 1;
const HEAD_NORM_EPS: f64 = 1e-12;

/// Layer layout: flatten, then for every hidden width a bias-free dense layer,
/// batch normalization with affine scale/shift and ReLU, then a dense
/// projection to the embedding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 16,
            width: 16,
            hidden: vec![128, 64],
            embed_dim: 32,
        }
    }
}

impl BackboneSpec {
    pub fn input_dim(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim() == 0 || self.embed_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Parameter(format!("backbone widths must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Expected parameter shapes in storage order.
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut fan_in = self.input_dim();
        for &w in &self.hidden {
            shapes.push(vec![fan_in, w]);
            shapes.push(vec![1, w]);
            shapes.push(vec![1, w]);
            fan_in = w;
        }
        shapes.push(vec![fan_in, self.embed_dim]);
        shapes.push(vec![1, self.embed_dim]);
        shapes
    }
}

/// Embedding network with its parameters and normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    spec: BackboneSpec,
    params: Vec<DiffTensor>,
    stats: Vec<RunningStats>,
}

impl Backbone {
    /// He-normal weights, zero biases, unit norm scales.
    pub fn new(spec: BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = RngStream::new(seed, 0);
        let mut params = Vec::new();
        let mut stats = Vec::new();
        let mut fan_in = spec.input_dim();
        let dense = |rows: usize, cols: usize, rng: &mut RngStream| {
            let std = (2.0 / rows as f64).sqrt();
            let vals = (0..rows * cols)
                .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect::<Vec<f64>>();
            DiffTensor::matrix(rows, cols, vals)
        };
        for &w in &spec.hidden {
            params.push(dense(fan_in, w, &mut rng)?);
            params.push(DiffTensor::matrix(1, w, vec![1.0; w])?);
            params.push(DiffTensor::matrix(1, w, vec![0.0; w])?);
            stats.push(RunningStats::new(w));
            fan_in = w;
        }
        params.push(dense(fan_in, spec.embed_dim, &mut rng)?);
        params.push(DiffTensor::matrix(1, spec.embed_dim, vec![0.0; spec.embed_dim])?);
        Ok(Self { spec, params, stats })
    }

    /// Assembles a backbone from explicit parameters in storage order.
    pub fn from_parts(spec: BackboneSpec, params: Vec<DiffTensor>, stats: Vec<RunningStats>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if params.len() != shapes.len() || params.iter().zip(&shapes).any(|(p, s)| p.shape() != s.as_slice()) {
            return Err(Error::Shape(format!("parameters do not match layout {shapes:?}")));
        }
        if stats.len() != spec.hidden.len() || stats.iter().zip(&spec.hidden).any(|(s, &w)| s.mean.len() != w || s.var.len() != w) {
            return Err(Error::Shape("running statistics do not match the hidden widths".into()));
        }
        Ok(Self { spec, params, stats })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn params(&self) -> &[DiffTensor] {
        &self.params
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }

    fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.clone().with_requires_grad(true))).collect()
    }

    fn input(&self, images: &[&Image]) -> Result<DiffTensor> {
        if images.is_empty() {
            return Err(Error::Shape("cannot embed an empty batch".into()));
        }
        let s = &self.spec;
        let mut vals = Vec::with_capacity(images.len() * s.input_dim());
        for img in images {
            if (img.channels(), img.height(), img.width()) != (s.channels, s.height, s.width) {
                return Err(Error::Shape(format!(
                    "backbone expects {}x{}x{} images, got {}x{}x{}",
                    s.channels,
                    s.height,
                    s.width,
                    img.channels(),
                    img.height(),
                    img.width()
                )));
            }
            vals.extend_from_slice(img.pixels());
        }
        DiffTensor::matrix(images.len(), s.input_dim(), vals)
    }

    fn forward(&mut self, g: &mut Graph, vars: &[Var], images: &[&Image], mode: NormMode) -> Result<Var> {
        let x = self.input(images)?;
        let mut h = g.constant(x);
        let hidden = self.spec.hidden.len();
        for l in 0..hidden {
            let z = g.matmul(h, vars[3 * l])?;
            let n = g.batch_norm(z, &mut self.stats[l], mode)?;
            let n = g.mul_row(n, vars[3 * l + 1])?;
            let n = g.add_row(n, vars[3 * l + 2])?;
            h = g.relu(n);
        }
        let out = g.matmul(h, vars[3 * hidden])?;
        g.add_row(out, vars[3 * hidden + 1])
    }

    /// Embeds a batch. `Train` mode updates the running statistics.
    pub fn embed(&mut self, images: &[&Image], mode: NormMode) -> Result<DiffTensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let out = self.forward(&mut g, &vars, images, mode)?;
        Ok(g.value(out).clone().with_requires_grad(false))
    }

    fn apply_grads(&mut self, g: &Graph, vars: &[Var]) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            p.zero_grad();
            g.accumulate_grad_into(v, p)?;
        }
        Ok(())
    }

    /// Serializes the layer layout, parameters and running statistics.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        let s = &self.spec;
        for v in [s.channels, s.height, s.width, s.hidden.len()] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for &w in &s.hidden {
            out.extend_from_slice(&(w as u64).to_le_bytes());
        }
        out.extend_from_slice(&(s.embed_dim as u64).to_le_bytes());
        for p in &self.params {
            for &x in p.values() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        for st in &self.stats {
            out.extend_from_slice(&st.momentum.to_le_bytes());
            for &x in st.mean.iter().chain(&st.var) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != SNAPSHOT_MAGIC {
            return Err(Error::Snapshot("not a backbone snapshot".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != SNAPSHOT_VERSION {
            return Err(Error::Snapshot(format!("unsupported snapshot version {version}")));
        }
        let channels = r.usize()?;
        let height = r.usize()?;
        let width = r.usize()?;
        let depth = r.usize()?;
        if depth > 64 {
            return Err(Error::Snapshot(format!("implausible depth {depth}")));
        }
        let hidden = (0..depth).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let embed_dim = r.usize()?;
        let spec = BackboneSpec {
            channels,
            height,
            width,
            hidden,
            embed_dim,
        };
        spec.validate().map_err(|e| Error::Snapshot(e.to_string()))?;
        let mut params = Vec::new();
        for shape in spec.param_shapes() {
            let n = shape.iter().product();
            let vals = r.f64s(n)?;
            params.push(DiffTensor::new(shape, vals)?);
        }
        let mut stats = Vec::new();
        for &w in &spec.hidden {
            let momentum = r.f64()?;
            let mean = r.f64s(w)?;
            let var = r.f64s(w)?;
            stats.push(RunningStats { mean, var, momentum });
        }
        if r.pos != bytes.len() {
            return Err(Error::Snapshot(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { spec, params, stats })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Snapshot("truncated snapshot".into()));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn usize(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Snapshot(format!("size {v} out of range")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Snapshot("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Per-class means of `emb` rows, as a plain `N x D` tensor.
pub fn prototypes_of(emb: &DiffTensor, labels: &[usize], n_classes: usize) -> Result<DiffTensor> {
    let mut g = Graph::new();
    let e = g.constant(emb.clone());
    let p = compute_prototypes(&mut g, e, labels, n_classes)?;
    Ok(g.value(p.var).clone())
}

/// Predicted class per query row and the `B x N` cosine score matrix.
/// Ties go to the lowest class index.
pub fn classify_cosine(query_emb: &DiffTensor, protos: &DiffTensor) -> Result<(Vec<usize>, DiffTensor)> {
    let mut g = Graph::new();
    let q = g.constant(query_emb.clone());
    let p = g.constant(protos.clone());
    let s = g.cosine_matrix(q, p)?;
    let scores = g.value(s).clone();
    let preds = (0..scores.rows())
        .map(|i| {
            let row = scores.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    Ok((preds, scores))
}

fn normalize_rows(t: &mut DiffTensor) {
    let c = t.cols();
    for row in t.values_mut().chunks_mut(c) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(HEAD_NORM_EPS);
        row.iter_mut().for_each(|v| *v /= n);
    }
}

/// Losses recorded after one fine-tuning step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub total: f64,
    /// Margin loss on the pseudo query set.
    pub pseudo_query: f64,
    pub triplet: f64,
}

/// Working copy of a backbone adapted to one episode.
#[derive(Debug, Clone)]
pub struct FinetuneState {
    pub backbone: Backbone,
    /// `N x D` unit-length class weights.
    pub head: DiffTensor,
    pub optimizer: Sgd,
    pub epoch: usize,
    pub history: Vec<EpochLoss>,
}

impl FinetuneState {
    /// Unadapted state: a copy of `bk` with no head.
    pub fn pristine(bk: &Backbone) -> Self {
        let d = bk.embed_dim();
        Self {
            backbone: bk.clone(),
            head: DiffTensor::zeros(vec![1, d]),
            optimizer: Sgd::new(SgdConfig::default()),
            epoch: 0,
            history: Vec::new(),
        }
    }
}

/// Adapts a copy of `bk` to the episode using only its support and pseudo
/// query sets. The real query set is sealed for the duration.
pub fn finetune(bk: &Backbone, ep: &Episode, hp: &HyperParams) -> Result<FinetuneState> {
    let _seal = ep.seal_query();
    hp.validate()?;
    if ep.pseudo_query().is_empty() {
        return Err(Error::Contract("fine-tuning needs a pseudo query set".into()));
    }
    let n = ep.n_way();
    let support: Vec<&Image> = ep.support().iter().map(|s| &s.image).collect();
    let support_labels = ep.support_labels();
    let pseudo: Vec<&Image> = ep.pseudo_query().iter().map(|p| &p.image).collect();
    let pseudo_labels = ep.pseudo_labels();

    let mut backbone = bk.clone();
    let emb = backbone.embed(&support, NormMode::Transductive)?;
    let mut head = prototypes_of(&emb, &support_labels, n)?;
    normalize_rows(&mut head);
    let mut optimizer = Sgd::new(SgdConfig::new(hp.learning_rate, hp.momentum)?);
    let mut history = Vec::with_capacity(hp.finetune_epochs);

    for _ in 0..hp.finetune_epochs {
        let mut g = Graph::new();
        let vars = backbone.bind(&mut g);
        let h = g.leaf(head.clone().with_requires_grad(true));
        let s = backbone.forward(&mut g, &vars, &support, NormMode::Train)?;
        let p = backbone.forward(&mut g, &vars, &pseudo, NormMode::Train)?;
        let embs = EpisodeEmbeddings {
            support: s,
            support_labels: &support_labels,
            pseudo: p,
            pseudo_labels: &pseudo_labels,
            n_classes: n,
        };
        let terms = finetune_objective(&mut g, embs, h, hp)?;
        g.backward(terms.total)?;
        history.push(EpochLoss {
            total: g.value(terms.total).item(),
            pseudo_query: g.value(terms.margin_loss).item(),
            triplet: g.value(terms.triplet_loss).item(),
        });
        backbone.apply_grads(&g, &vars)?;
        head.zero_grad();
        g.accumulate_grad_into(h, &mut head)?;
        optimizer.step(backbone.params.iter_mut().chain(std::iter::once(&mut head)))?;
        normalize_rows(&mut head);
    }
    for p in &mut backbone.params {
        p.zero_grad();
    }
    head.zero_grad();
    Ok(FinetuneState {
        backbone,
        head,
        optimizer,
        epoch: hp.finetune_epochs,
        history,
    })
}

/// Fraction of real queries classified correctly by the cosine prototype
/// classifier.
pub fn infer(state: &mut FinetuneState, ep: &Episode, hp: &HyperParams) -> Result<f64> {
    let support: Vec<&Image> = ep.support().iter().map(|s| &s.image).collect();
    let emb = state.backbone.embed(&support, NormMode::Eval)?;
    let protos = prototypes_of(&emb, &ep.support_labels(), ep.n_way())?;
    let query = ep.query()?;
    let images: Vec<&Image> = query.iter().map(|q| &q.image).collect();
    let mode = if hp.transductive { NormMode::Transductive } else { NormMode::Eval };
    let qemb = state.backbone.embed(&images, mode)?;
    let (preds, _) = classify_cosine(&qemb, &protos)?;
    let correct = preds.iter().zip(query).filter(|(p, q)| **p == q.label).count();
    Ok(correct as f64 / query.len() as f64)
}

/// Episodic meta-training settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            episodes_per_epoch: 300,
            n_way: 5,
            k_shot: 5,
            m_query: 15,
            learning_rate: 5e-5,
            momentum: 0.9,
        }
    }
}

/// Trained backbone and the mean task loss of every epoch.
#[derive(Debug, Clone)]
pub struct MetaTrainOutcome {
    pub backbone: Backbone,
    pub epoch_losses: Vec<f64>,
}

/// Prototypical-network training on episodes sampled from `ds`.
pub fn meta_train(bk: &Backbone, ds: &LabeledDataset, cfg: &MetaTrainConfig, rng: &mut impl Rng) -> Result<MetaTrainOutcome> {
    let mut backbone = bk.clone();
    let mut optimizer = Sgd::new(SgdConfig::new(cfg.learning_rate, cfg.momentum)?);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..cfg.episodes_per_epoch {
            let ep = sample_episode(ds, cfg.n_way, cfg.k_shot, cfg.m_query, rng)?;
            let support: Vec<&Image> = ep.support().iter().map(|s| &s.image).collect();
            let query = ep.query()?;
            let images: Vec<&Image> = query.iter().map(|q| &q.image).collect();
            let qlabels: Vec<usize> = query.iter().map(|q| q.label).collect();

            let mut g = Graph::new();
            let vars = backbone.bind(&mut g);
            let s = backbone.forward(&mut g, &vars, &support, NormMode::Train)?;
            let q = backbone.forward(&mut g, &vars, &images, NormMode::Train)?;
            let protos = compute_prototypes(&mut g, s, &ep.support_labels(), cfg.n_way)?;
            let loss = proto_xent(&mut g, q, &qlabels, protos)?;
            g.backward(loss)?;
            total += g.value(loss).item();
            backbone.apply_grads(&g, &vars)?;
            optimizer.step(backbone.params.iter_mut())?;
        }
        epoch_losses.push(total / cfg.episodes_per_epoch.max(1) as f64);
    }
    for p in &mut backbone.params {
        p.zero_grad();
    }
    Ok(MetaTrainOutcome { backbone, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{build_pseudo_query, generate_synthetic, DomainSpec, PqsPolicy};
    use crate::imageaug::AugmentationConfig;

    fn small_spec() -> BackboneSpec {
        BackboneSpec {
            channels: 3,
            height: 4,
            width: 4,
            hidden: vec![8],
            embed_dim: 6,
        }
    }

    fn img(v: f64) -> Image {
        let px = (0..48).map(|i| (i as f64 * 0.13 + v).sin() * 0.5 + 0.5).collect();
        Image::new(3, 4, 4, px).unwrap()
    }

    #[test]
    fn embed_shapes_and_errors() {
        let mut bk = Backbone::new(small_spec(), 1).unwrap();
        let a = img(0.1);
        let b = img(0.7);
        let e = bk.embed(&[&a, &b, &a], NormMode::Eval).unwrap();
        assert_eq!(e.shape(), &[3, 6]);
        assert_eq!(e.row(0), e.row(2));
        let wrong = Image::filled(3, 5, 5, 0.5).unwrap();
        assert!(matches!(bk.embed(&[&wrong], NormMode::Eval), Err(Error::Shape(_))));
    }

    #[test]
    fn eval_mode_ignores_batch_companions() {
        let mut bk = Backbone::new(small_spec(), 2).unwrap();
        let a = img(0.3);
        let others: Vec<Image> = (0..4).map(|i| img(1.0 + i as f64)).collect();
        let shifted: Vec<Image> = (0..4).map(|i| img(5.0 + 2.0 * i as f64)).collect();
        let batch1: Vec<&Image> = std::iter::once(&a).chain(&others).collect();
        let batch2: Vec<&Image> = std::iter::once(&a).chain(&shifted).collect();
        let e1 = bk.embed(&batch1, NormMode::Eval).unwrap();
        let e2 = bk.embed(&batch2, NormMode::Eval).unwrap();
        assert_eq!(e1.row(0), e2.row(0));
        let t1 = bk.embed(&batch1, NormMode::Transductive).unwrap();
        let t2 = bk.embed(&batch2, NormMode::Transductive).unwrap();
        assert_ne!(t1.row(0), t2.row(0));
    }

    #[test]
    fn train_mode_moves_running_stats_only() {
        let mut bk = Backbone::new(small_spec(), 3).unwrap();
        let before = bk.clone();
        let (a, b) = (img(0.2), img(0.9));
        bk.embed(&[&a, &b], NormMode::Transductive).unwrap();
        assert_eq!(bk, before);
        bk.embed(&[&a, &b], NormMode::Train).unwrap();
        assert_eq!(bk.params(), before.params());
        assert_ne!(bk.running_stats(), before.running_stats());
    }

    #[test]
    fn snapshot_round_trip() {
        let mut bk = Backbone::new(BackboneSpec::default(), 9).unwrap();
        let imgs: Vec<Image> = (0..3).map(|i| Image::filled(3, 16, 16, 0.2 * i as f64).unwrap()).collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        bk.embed(&refs, NormMode::Train).unwrap();
        let bytes = bk.to_bytes();
        let back = Backbone::from_bytes(&bytes).unwrap();
        assert_eq!(back, bk);
        assert_eq!(back.to_bytes(), bytes);
        assert!(Backbone::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Backbone::from_bytes(&extra).is_err());
        assert!(Backbone::from_bytes(b"garbage!").is_err());
    }

    #[test]
    fn default_layout() {
        let bk = Backbone::new(BackboneSpec::default(), 0).unwrap();
        let shapes: Vec<&[usize]> = bk.params().iter().map(|p| p.shape()).collect();
        assert_eq!(
            shapes,
            vec![&[768, 128][..], &[1, 128], &[1, 128], &[128, 64], &[1, 64], &[1, 64], &[64, 32], &[1, 32]]
        );
        assert_eq!(Backbone::new(BackboneSpec::default(), 0).unwrap(), bk);
        assert_ne!(Backbone::new(BackboneSpec::default(), 1).unwrap(), bk);
    }

    #[test]
    fn cosine_classifier_cases() {
        let protos = DiffTensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.2]]).unwrap();
        let q = DiffTensor::from_rows(&[[0.0, 1.0], [0.0, 7.0], [-3.0, 0.6]]).unwrap();
        let (p, scores) = classify_cosine(&q, &protos).unwrap();
        assert_eq!(p, vec![1, 1, 2]);
        assert_eq!(scores.shape(), &[3, 3]);

        let (a, b) = (10f64.to_radians(), 80f64.to_radians());
        let protos = DiffTensor::from_rows(&[[1.0, 0.0], [(a + b).cos(), (a + b).sin()]]).unwrap();
        let q = DiffTensor::from_rows(&[[a.cos(), a.sin()]]).unwrap();
        assert_eq!(classify_cosine(&q, &protos).unwrap().0, vec![0]);

        let tied = DiffTensor::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
        let q = DiffTensor::from_rows(&[[2.0, 1.0]]).unwrap();
        assert_eq!(classify_cosine(&q, &tied).unwrap().0, vec![0]);
    }

    fn toy_episode(seed: u64) -> (LabeledDataset, Episode) {
        let ds = generate_synthetic(&DomainSpec::target(6, 12), seed).unwrap();
        let mut rng = RngStream::new(seed, 0);
        let ep = sample_episode(&ds, 5, 5, 5, &mut rng).unwrap();
        let ep = build_pseudo_query(ep, &PqsPolicy::default(), &AugmentationConfig::default(), &mut rng).unwrap();
        (ds, ep)
    }

    #[test]
    fn finetune_zero_epochs_keeps_backbone() {
        let bk = Backbone::new(BackboneSpec::default(), 4).unwrap();
        let (_, ep) = toy_episode(4);
        let hp = HyperParams { finetune_epochs: 0, ..HyperParams::default() };
        let st = finetune(&bk, &ep, &hp).unwrap();
        assert_eq!(st.backbone, bk);
        assert_eq!(st.epoch, 0);
        assert!(st.history.is_empty());
    }

    #[test]
    fn finetune_is_deterministic_and_sealed() {
        let bk = Backbone::new(BackboneSpec::default(), 5).unwrap();
        let (_, ep) = toy_episode(5);
        let hp = HyperParams { finetune_epochs: 3, ..HyperParams::default() };
        let a = finetune(&bk, &ep, &hp).unwrap();
        let b = finetune(&bk, &ep, &hp).unwrap();
        assert_eq!(a.backbone, b.backbone);
        assert_eq!(a.head, b.head);
        assert_ne!(a.backbone, bk);
        assert_eq!(a.history.len(), 3);
        assert_eq!(ep.query_violations(), 0);
        assert!(!ep.is_query_sealed());
        for r in 0..a.head.rows() {
            let n: f64 = a.head.row(r).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn finetune_requires_pseudo_queries() {
        let bk = Backbone::new(BackboneSpec::default(), 6).unwrap();
        let ds = generate_synthetic(&DomainSpec::target(5, 8), 6).unwrap();
        let ep = sample_episode(&ds, 5, 2, 2, &mut RngStream::new(6, 0)).unwrap();
        assert!(matches!(finetune(&bk, &ep, &HyperParams::default()), Err(Error::Contract(_))));
    }

    #[test]
    fn infer_accuracy_in_range() {
        let bk = Backbone::new(BackboneSpec::default(), 7).unwrap();
        let (_, ep) = toy_episode(7);
        for transductive in [false, true] {
            let hp = HyperParams { transductive, ..HyperParams::default() };
            let acc = infer(&mut FinetuneState::pristine(&bk), &ep, &hp).unwrap();
            assert!((0.0..=1.0).contains(&acc));
        }
    }

    #[test]
    fn meta_train_zero_epochs_and_determinism() {
        let bk = Backbone::new(BackboneSpec::default(), 8).unwrap();
        let ds = generate_synthetic(&DomainSpec::source(6, 10), 8).unwrap();
        let cfg = MetaTrainConfig { epochs: 0, ..MetaTrainConfig::default() };
        let out = meta_train(&bk, &ds, &cfg, &mut RngStream::new(1, 0)).unwrap();
        assert_eq!(out.backbone, bk);
        let cfg = MetaTrainConfig { epochs: 1, episodes_per_epoch: 3, m_query: 5, ..MetaTrainConfig::default() };
        let a = meta_train(&bk, &ds, &cfg, &mut RngStream::new(1, 0)).unwrap();
        let b = meta_train(&bk, &ds, &cfg, &mut RngStream::new(1, 0)).unwrap();
        assert_eq!(a.backbone, b.backbone);
        assert_eq!(a.epoch_losses, b.epoch_losses);
        assert_ne!(a.backbone, bk);
        let few = generate_synthetic(&DomainSpec::source(4, 10), 8).unwrap();
        assert!(matches!(meta_train(&bk, &few, &cfg, &mut RngStream::new(1, 0)), Err(Error::Capacity(_))));
    }
}
