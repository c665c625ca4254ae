use lmmpqs::diffcore::NormMode;
use lmmpqs::episodes::{build_pseudo_query, generate_synthetic, sample_episode, DomainSpec, Episode, LabeledDataset, PqsPolicy};
use lmmpqs::fewshot::{finetune, infer, meta_train, Backbone, BackboneSpec, MetaTrainConfig};
use lmmpqs::imageaug::{AugmentationConfig, Image, RngStream};
use lmmpqs::losses::HyperParams;

fn small_spec() -> BackboneSpec {
    BackboneSpec {
        channels: 3,
        height: 8,
        width: 8,
        hidden: vec![32],
        embed_dim: 16,
    }
}

fn small_domain(target: bool, classes: usize, per_class: usize, seed: u64) -> LabeledDataset {
    let base = if target {
        DomainSpec::target(classes, per_class)
    } else {
        DomainSpec::source(classes, per_class)
    };
    generate_synthetic(&DomainSpec { size: 8, ..base }, seed).unwrap()
}

fn episode(ds: &LabeledDataset, seed: u64, index: u64) -> Episode {
    let ep = sample_episode(ds, 5, 5, 5, &mut RngStream::new(seed, 2 * index)).unwrap();
    build_pseudo_query(ep, &PqsPolicy::default(), &AugmentationConfig::default(), &mut RngStream::new(seed, 2 * index + 1)).unwrap()
}

fn short_hp(epochs: usize) -> HyperParams {
    HyperParams {
        finetune_epochs: epochs,
        ..HyperParams::default()
    }
}

#[test]
fn episode_results_do_not_depend_on_processing_order() {
    let ds = small_domain(true, 8, 12, 21);
    let bk = Backbone::new(small_spec(), 21).unwrap();
    let hp = short_hp(3);
    let run = |i: u64| {
        let ep = episode(&ds, 21, i);
        let mut st = finetune(&bk, &ep, &hp).unwrap();
        infer(&mut st, &ep, &hp).unwrap().to_bits()
    };
    let forward: Vec<u64> = (0..6).map(run).collect();
    let mut backward: Vec<u64> = (0..6).rev().map(run).collect();
    backward.reverse();
    assert_eq!(forward, backward);
}

#[test]
fn eval_mode_embeddings_ignore_batch_composition() {
    let ds = small_domain(true, 4, 6, 22);
    let mut bk = Backbone::new(small_spec(), 22).unwrap();
    let images: Vec<&Image> = ds.classes().iter().flat_map(|c| &c.images).collect();
    let full = bk.embed(&images, NormMode::Eval).unwrap();
    for (i, img) in images.iter().enumerate() {
        let alone = bk.embed(&[img], NormMode::Eval).unwrap();
        assert_eq!(alone.row(0), full.row(i));
    }
    let subset: Vec<&Image> = images.iter().step_by(3).copied().collect();
    let part = bk.embed(&subset, NormMode::Eval).unwrap();
    for (j, i) in (0..images.len()).step_by(3).enumerate() {
        assert_eq!(part.row(j), full.row(i));
    }
}

#[test]
fn non_transductive_predictions_ignore_other_queries() {
    // splitting the query set must not change any prediction
    let ds = small_domain(true, 6, 20, 23);
    let bk = Backbone::new(small_spec(), 23).unwrap();
    let hp = HyperParams {
        transductive: false,
        ..short_hp(2)
    };
    for i in 0..5 {
        let ep = episode(&ds, 23, i);
        let query = ep.query().unwrap().to_vec();
        // first two queries of every class versus the remaining three
        let mut seen = vec![0; ep.n_way()];
        let (early, late): (Vec<_>, Vec<_>) = query.iter().cloned().partition(|q| {
            seen[q.label] += 1;
            seen[q.label] <= 2
        });
        let st = finetune(&bk, &ep, &hp).unwrap();
        let acc = |q: Vec<_>| {
            let sub = Episode::from_parts(ep.class_ids().to_vec(), ep.k_shot(), ep.support().to_vec(), q).unwrap();
            infer(&mut st.clone(), &sub, &hp).unwrap()
        };
        let total = acc(query.clone()) * query.len() as f64;
        let split = acc(early.clone()) * early.len() as f64 + acc(late.clone()) * late.len() as f64;
        assert!((total - split).abs() < 1e-9, "episode {i}: {total} vs {split}");
    }
}

#[test]
fn finetuning_reduces_pseudo_query_loss() {
    let ds = small_domain(true, 10, 12, 24);
    let bk = Backbone::new(small_spec(), 24).unwrap();
    let hp = short_hp(20);
    let mut reduced = 0;
    for i in 0..100 {
        let st = finetune(&bk, &episode(&ds, 24, i), &hp).unwrap();
        let (first, last) = (st.history[0].pseudo_query, st.history[hp.finetune_epochs - 1].pseudo_query);
        reduced += usize::from(last <= first);
    }
    assert!(reduced >= 90, "{reduced}/100 episodes");
}

#[test]
fn meta_training_reduces_episode_loss() {
    let ds = small_domain(false, 12, 12, 25);
    let cfg = MetaTrainConfig {
        epochs: 4,
        episodes_per_epoch: 40,
        m_query: 5,
        ..MetaTrainConfig::default()
    };
    let mut ratios: Vec<f64> = (0..5)
        .map(|seed| {
            let bk = Backbone::new(small_spec(), seed).unwrap();
            let out = meta_train(&bk, &ds, &cfg, &mut RngStream::new(seed, 1)).unwrap();
            out.epoch_losses[cfg.epochs - 1] / out.epoch_losses[0]
        })
        .collect();
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert!(ratios[2] < 1.0, "{ratios:?}");
}
