use super::*;
use crate::nn::gradcheck::check_gradients;
use crate::nn::model::tests::toy_config;
use crate::rng::seeded;
use crate::text::{CLS, BUNDLED_CORPUS};
use crate::trainer::Trainer;

fn small_config() -> Config {
    let mut c = Config::default();
    for (k, v) in [
        ("batch_size", "4"),
        ("buffer_capacity", "16"),
        ("max_seq_len", "12"),
        ("emb_dim", "8"),
        ("gen_layers", "1"),
        ("gen_hidden", "8"),
        ("gen_heads", "2"),
        ("disc_layers", "1"),
        ("disc_hidden", "12"),
        ("disc_heads", "2"),
        ("ffn_mult", "2"),
        ("eval_every", "1000"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

fn step0_checkpoint(dir: &Path) -> PathBuf {
    let trainer = Trainer::from_corpus(&small_config(), BUNDLED_CORPUS).unwrap();
    let path = dir.join("step_000000.manifest");
    trainer.checkpoint().save(&path).unwrap();
    path
}

fn row(label: usize, text: &str) -> LabelledText {
    LabelledText {
        label,
        text: text.into(),
    }
}

/// Label 1 iff the sentinel word was inserted. Linearly separable from a
/// bag-of-embeddings summary of the sentence.
fn sentinel_task(seed: u64) -> ProbeTask {
    let mut rng = seeded(seed);
    let mut rows = Vec::new();
    for line in BUNDLED_CORPUS.lines().filter(|l| !l.contains("queen")) {
        let words: Vec<&str> = line.split_whitespace().take(8).collect();
        rows.push(row(0, &words.join(" ")));
        let mut with = words.clone();
        with.insert(rng.random_range(0..=with.len()), "queen");
        rows.push(row(1, &with.join(" ")));
    }
    rows.shuffle(&mut rng);
    let dev = rows.split_off(rows.len() * 3 / 4);
    ProbeTask::from_split(rows, dev).unwrap()
}

#[test]
fn parse_splits_every_fourth_line_to_dev() {
    let tsv = "0\ta b\n1\tc d\n0\te f\n1\tg h\n\n0\ti j\n";
    let t = ProbeTask::parse(tsv).unwrap();
    assert_eq!(t.classes, 2);
    assert_eq!(t.dev, vec![row(1, "g h")]);
    assert_eq!(t.train.len(), 4);
}

#[test]
fn parse_reports_every_bad_line() {
    let err = ProbeTask::parse("x\ta\nno tab here\n0\tok\n").unwrap_err();
    match err {
        Error::Config(e) => assert_eq!(e.len(), 2),
        other => panic!("unexpected {other:?}"),
    }
    assert!(ProbeTask::parse("0\ta\n0\tb\n0\tc\n0\td\n").is_err());
}

#[test]
fn bundled_task_is_balanced_and_pairs_differ_in_two_words() {
    let tsv = make_probe_task(BUNDLED_CORPUS, 7).unwrap();
    assert_eq!(tsv, make_probe_task(BUNDLED_CORPUS, 7).unwrap());
    let task = ProbeTask::parse(&tsv).unwrap();
    let all: Vec<_> = task.train.iter().chain(&task.dev).collect();
    assert_eq!(all.len(), 100);
    assert_eq!(all.iter().filter(|r| r.label == 1).count(), 50);
    for r in all.iter().filter(|r| r.label == 1) {
        let words: Vec<&str> = r.text.split(' ').collect();
        let best = BUNDLED_CORPUS
            .lines()
            .map(|l| {
                let o: Vec<String> = tokenize(l).collect();
                if o.len() != words.len() {
                    return usize::MAX;
                }
                o.iter().zip(&words).filter(|(a, b)| a.as_str() != **b).count()
            })
            .min()
            .unwrap();
        assert_eq!(best, 2, "{}", r.text);
    }
}

#[test]
fn classify_loss_hand_cases() {
    let zero = Tensor::zeros(&[3, 2]);
    assert!((classify_loss(&[0.3, -1.0], &zero, 1) - 3f64.ln()).abs() < 1e-12);
    let w = Tensor::from_vec(&[3, 1], vec![1.0, 0.0, 0.0]).unwrap();
    // log(1 + 2/e)
    assert!((classify_loss(&[1.0], &w, 0) - 0.551_444_713_932_051_1).abs() < 1e-12);
    let w = Tensor::from_vec(&[2, 1], vec![1.0, 0.0]).unwrap();
    let sat = classify_loss(&[1000.0], &w, 1);
    assert!((sat - 1000.0).abs() < 1e-9);
    assert!(classify_loss(&[1000.0], &w, 0) < 1e-300 + 1e-12);
}

fn toy_classifier(seed: u64) -> (Classifier, Vec<Vec<TokenId>>, Vec<usize>) {
    let vocab = 20;
    let model = Model::new(toy_config(vocab), &mut seeded(seed)).unwrap();
    let clf = Classifier::new(model, 3, &mut seeded(seed + 1)).unwrap();
    let mut rng = seeded(seed + 2);
    let seqs: Vec<Vec<TokenId>> = [5usize, 3, 8, 6]
        .iter()
        .map(|&n| {
            let mut s = vec![CLS];
            s.extend((1..n).map(|_| rng.random_range(4..vocab as TokenId)));
            s
        })
        .collect();
    (clf, seqs, vec![0, 2, 1, 2])
}

#[test]
fn graph_loss_matches_per_example_oracle() {
    let (clf, seqs, labels) = toy_classifier(3);
    let refs: Vec<&[TokenId]> = seqs.iter().map(|s| s.as_slice()).collect();
    let out = clf.forward(&refs, &labels).unwrap();
    let w = clf.model().params().get(clf.head_id());
    let mut expect = 0.0;
    for (b, s) in refs.iter().enumerate() {
        let mut g = Graph::new();
        let (h, _) = clf.model().discriminator_hidden(&mut g, &[s]).unwrap();
        expect += classify_loss(g.value(h).row(0), w, labels[b]);
    }
    expect /= refs.len() as f64;
    assert!((out.graph.value(out.loss).item() - expect).abs() < 1e-12);
}

#[test]
fn classifier_gradients_match_finite_differences() {
    let (mut clf, seqs, labels) = toy_classifier(11);
    let refs: Vec<&[TokenId]> = seqs.iter().map(|s| s.as_slice()).collect();
    let out = clf.forward(&refs, &labels).unwrap();
    let grads = out.graph.backward(out.loss, clf.model().params()).unwrap();
    let ids = clf.trainable_ids();
    let report = check_gradients(&mut clf, &grads, &ids, 1e-5, 1e-6, |c| {
        let o = c.forward(&refs, &labels)?;
        Ok(o.graph.value(o.loss).item())
    })
    .unwrap();
    assert!(report.max_rel_error() < 1e-4, "{:?}", report.worst());
    // Generator tensors take no part in the probe loss.
    for id in clf.model().generator_ids() {
        assert!(grads.get(id).data().iter().all(|&g| g == 0.0));
    }
}

#[test]
fn fine_tune_never_reads_generator_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let ck = step0_checkpoint(dir.path());
    let task = ProbeTask::parse(&make_probe_task(BUNDLED_CORPUS, 1).unwrap()).unwrap();
    let r = fine_tune(&ck, &task, FineTuneOptions { epochs: 1, lr: 1e-4, batch_size: 16, seed: 0 }).unwrap();
    assert!(!r.trace.read.is_empty());
    assert!(r.trace.read.iter().all(|n| probe_reads(n)), "{:?}", r.trace.read);
    assert!(r.trace.skipped.iter().any(|n| n.starts_with("gen.")));
    assert!(r.trace.skipped.iter().any(|n| n.starts_with("buffer.")));
    assert_eq!(r.pretrain_step, 0);
    assert_eq!(r.mode, "tmr");
    assert_eq!(r, fine_tune(&ck, &task, FineTuneOptions { epochs: 1, lr: 1e-4, batch_size: 16, seed: 0 }).unwrap());
}

#[test]
fn random_body_solves_separable_task() {
    let dir = tempfile::tempdir().unwrap();
    let ck = step0_checkpoint(dir.path());
    let task = sentinel_task(5);
    let r = fine_tune(&ck, &task, FineTuneOptions { epochs: 30, lr: 1e-3, batch_size: 8, seed: 2 }).unwrap();
    assert!(r.dev_accuracy >= 0.95, "dev accuracy {} losses {:?}", r.dev_accuracy, r.epoch_losses);
    assert!(r.epoch_losses.last() < r.epoch_losses.first());
}

#[test]
fn shuffled_labels_fall_to_chance() {
    let dir = tempfile::tempdir().unwrap();
    let ck = step0_checkpoint(dir.path());
    let task = sentinel_task(5);
    let n_dev = task.dev.len() as f64;
    let mut accs = Vec::new();
    for seed in 0..3 {
        let control = task.with_shuffled_labels(100 + seed);
        let r = fine_tune(&ck, &control, FineTuneOptions { epochs: 30, lr: 1e-3, batch_size: 8, seed }).unwrap();
        accs.push(r.dev_accuracy);
    }
    let mean = accs.iter().sum::<f64>() / 3.0;
    // Three standard errors of a chance-level mean over 3 * n_dev predictions.
    let noise = 3.0 * (0.25 / (3.0 * n_dev)).sqrt();
    assert!((mean - 0.5).abs() <= noise, "mean {mean} accs {accs:?} noise {noise}");
}

#[test]
fn comparison_aggregates_per_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ck = step0_checkpoint(dir.path());
    let task = ProbeTask::parse(&make_probe_task(BUNDLED_CORPUS, 1).unwrap()).unwrap();
    let base = FineTuneOptions { epochs: 1, lr: 1e-4, batch_size: 16, seed: 0 };
    let serial = compare_checkpoints(std::slice::from_ref(&ck), &task, base, 3, 1).unwrap();
    let parallel = compare_checkpoints(std::slice::from_ref(&ck), &task, base, 3, 3).unwrap();
    assert_eq!(serial, parallel);
    let r = &serial[0];
    assert_eq!(r.n_seeds, 3);
    assert!((r.std_acc - sample_std(&r.accuracies)).abs() < 1e-15);
    let csv_path = dir.path().join("cmp.csv");
    write_comparison_csv(&serial, &csv_path).unwrap();
    let text = fs::read_to_string(csv_path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "mode,pretrain_step,mean_acc,std_acc,n_seeds");
}

#[test]
fn sample_std_uses_n_minus_one() {
    assert_eq!(sample_std(&[0.5]), 0.0);
    assert!((sample_std(&[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-15);
}
