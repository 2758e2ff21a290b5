use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::log_softmax;

fn tiny(vocab: usize, width: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        encoder_layers: 1,
        decoder_layers: 1,
        width,
        heads: 2,
        ff_width: 2 * width,
        max_positions: 32,
        vocab_size: vocab,
        dropout: 0.0,
        seed,
    }
}

fn ex(source: &[Token], target: &[Token]) -> Example {
    Example {
        source: source.to_vec(),
        target: target.to_vec(),
    }
}

fn batch() -> Vec<Example> {
    vec![ex(&[6, 7, 8, 9], &[10, 11]), ex(&[12, 6], &[13, 14]), ex(&[9], &[6, 7])]
}

#[test]
fn config_validation() {
    let mut c = tiny(20, 16, 0);
    c.heads = 3;
    assert!(matches!(init_model(&c), Err(Error::Config(_))));
    let m = init_model(&tiny(20, 16, 0)).unwrap();
    let long: Vec<Token> = (0..40).map(|i| 6 + i % 10).collect();
    assert!(matches!(m.forward(&long, &[6]), Err(Error::Config(_))));
    assert!(matches!(m.forward(&[6], &[99]), Err(Error::Contract(_))));
}

#[test]
fn deterministic_init() {
    let a = init_model(&tiny(20, 16, 4)).unwrap();
    let b = init_model(&tiny(20, 16, 4)).unwrap();
    assert_eq!(a.loss(&batch()).unwrap(), b.loss(&batch()).unwrap());
    let c = init_model(&tiny(20, 16, 5)).unwrap();
    assert_ne!(a.loss(&batch()).unwrap(), c.loss(&batch()).unwrap());
    assert!(a.num_parameters() > 0);
}

#[test]
fn logits_shape() {
    let m = init_model(&tiny(64, 32, 1)).unwrap();
    for e in batch() {
        let logits = m.forward(&e.source, &e.target).unwrap();
        assert_eq!(logits.shape(), (e.target.len() + 1, 64));
    }
}

#[test]
fn uniform_logits_give_log_vocab() {
    let mut m = init_model(&tiny(50, 16, 2)).unwrap();
    let head = m.ids.head;
    m.params.get_mut(head).data.iter_mut().for_each(|x| *x = 0.0);
    let (loss, _) = m.loss_and_grads(&batch()).unwrap();
    assert!((loss - (50f64).ln()).abs() < 1e-6);
}

#[test]
fn empty_or_all_pad_batches_rejected() {
    let m = init_model(&tiny(20, 16, 0)).unwrap();
    assert!(matches!(m.loss_and_grads(&[]), Err(Error::Contract(_))));
    let padding = ex(&[6], &[PAD, PAD]);
    assert!(matches!(m.loss_and_grads(&[padding.clone(), ex(&[7], &[])]), Err(Error::Contract(_))));
    let mixed = [padding, ex(&[6, 7], &[8, 9])];
    assert_eq!(m.loss(&mixed).unwrap(), m.loss(&mixed[1..]).unwrap());
}

#[test]
fn gradients_match_finite_differences() {
    let mut m = init_model(&tiny(24, 16, 7)).unwrap();
    let data = batch();
    let (_, grads) = m.loss_and_grads(&data).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let eps = 1e-5;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    while checked < 25 {
        let t = rng.random_range(0..m.params.len());
        let i = rng.random_range(0..m.params.tensors[t].len());
        let analytic = grads[t].data[i];
        if analytic.abs() < 1e-6 {
            continue;
        }
        let orig = m.params.tensors[t].data[i];
        m.params.tensors[t].data[i] = orig + eps;
        let up = m.loss(&data).unwrap();
        m.params.tensors[t].data[i] = orig - eps;
        let down = m.loss(&data).unwrap();
        m.params.tensors[t].data[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        worst = worst.max(rel);
        checked += 1;
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

fn memorization_set() -> Vec<Example> {
    (0..8).map(|i| ex(&[6 + i, 14 + (i % 3)], &[20 + i, 28 + (7 - i)])).collect()
}

#[test]
fn memorizes_small_set() {
    let mut m = init_model(&tiny(40, 16, 1)).unwrap();
    let data = memorization_set();
    let initial = m.loss(&data).unwrap();
    let tc = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 8,
        steps: 500,
        ..Default::default()
    };
    let curve = train(&mut m, &data, &tc).unwrap();
    assert_eq!(curve.len(), 500);
    let fin = m.loss(&data).unwrap();
    assert!(fin < 0.1 * initial, "initial {initial} final {fin}");
}

#[test]
fn zero_steps_and_zero_rate_are_identity() {
    let data = memorization_set();
    let m0 = init_model(&tiny(40, 16, 1)).unwrap();
    let mut m = m0.clone();
    let curve = train(&mut m, &data, &TrainConfig { steps: 0, ..Default::default() }).unwrap();
    assert!(curve.is_empty());
    assert_eq!(m, m0);
    let before = m.loss(&data).unwrap();
    train(
        &mut m,
        &data,
        &TrainConfig {
            steps: 5,
            learning_rate: 0.0,
            ..Default::default()
        },
    )
    .unwrap();
    assert!((m.loss(&data).unwrap() - before).abs() < 1e-12);
    assert!(train(&mut m, &[], &TrainConfig::default()).is_err());
}

#[test]
fn divergence_reports_step() {
    let mut m = init_model(&tiny(40, 16, 1)).unwrap();
    let data = memorization_set();
    let tc = TrainConfig {
        learning_rate: f64::MAX,
        batch_size: 8,
        steps: 20,
        clip_norm: 0.0,
        ..Default::default()
    };
    match train(&mut m, &data, &tc) {
        Err(Error::Divergence { step, .. }) => assert!(step > 0),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn alignment_defaults() {
    let tc = TrainConfig::alignment();
    assert_eq!(tc.steps, 2000);
    assert_eq!(tc.learning_rate, 1e-4);
}

#[test]
fn alignment_beats_chance() {
    use crate::fusion::{make_alignment_pairs, Channel, Vocab};
    use crate::rvq::SemanticId;
    let img: BTreeMap<String, SemanticId> = (0..4)
        .map(|i| (format!("i{i}"), SemanticId::new(vec![i, (i + 1) % 4])))
        .collect();
    let txt: BTreeMap<String, SemanticId> = (0..4)
        .map(|i| (format!("i{i}"), SemanticId::new(vec![(3 * i + 1) % 4, i])))
        .collect();
    let vocab = Vocab::new(2, 4, &[(Channel::Image, 1), (Channel::Text, 1)]);
    let pairs: Vec<Example> = make_alignment_pairs(&img, &txt, &vocab)
        .unwrap()
        .into_iter()
        .map(|p| ex(&p.source, &p.target))
        .collect();
    let mut m = init_model(&tiny(vocab.size, 16, 3)).unwrap();
    align_pretrain(
        &mut m,
        &pairs,
        &TrainConfig {
            learning_rate: 1e-2,
            batch_size: 8,
            steps: 200,
            ..Default::default()
        },
    )
    .unwrap();
    // free greedy decoding, img -> txt direction
    let mut hits = 0;
    for p in pairs.iter().step_by(2) {
        let mut g = Graph::new(&m.params);
        let mem = m.encode(&mut g, &p.source).unwrap();
        let mut prefix = vec![BOS];
        for _ in 0..p.target.len() {
            let logits = m.next_logits(&mut g, &mem, &prefix).unwrap();
            let best = (0..logits.len())
                .max_by(|&a, &b| logits[a].partial_cmp(&logits[b]).unwrap().then(b.cmp(&a)))
                .unwrap();
            prefix.push(best);
        }
        hits += usize::from(prefix[1..] == p.target[..]);
    }
    let accuracy = hits as f64 / 4.0;
    assert!(accuracy > 1.0 / vocab.size as f64, "accuracy {accuracy}");
}

fn random_catalog(n: usize, rng: &mut ChaCha8Rng) -> Vec<(String, Vec<Token>)> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    while out.len() < n {
        let s: Vec<Token> = (0..3).map(|l| 6 + 4 * l + rng.random_range(0..4)).collect();
        if seen.insert(s.clone()) {
            out.push((format!("item{:02}", out.len()), s));
        }
    }
    out
}

fn trie_of(c: &[(String, Vec<Token>)]) -> ItemTrie {
    ItemTrie::from_sequences(c.iter().map(|(k, v)| (k.as_str(), v.as_slice()))).unwrap()
}

#[test]
fn wide_beam_equals_exhaustive_scoring() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for seed in 0..3 {
        let m = init_model(&tiny(18, 16, seed)).unwrap();
        let catalog = random_catalog(20, &mut rng);
        let trie = trie_of(&catalog);
        let context = [6, 11, 15, 7];
        let got = beam_decode(&m, &context, &trie, &BeamConfig { beam_size: 32, max_length: 20 }).unwrap();
        let mut oracle: Vec<(String, f64)> = catalog
            .iter()
            .map(|(k, s)| (k.clone(), score_sequence(&m, &context, s).unwrap()))
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        assert_eq!(got.len(), catalog.len());
        for (h, (k, lp)) in got.iter().zip(&oracle) {
            assert_eq!(&h.item, k);
            assert!((h.log_prob - lp).abs() < 1e-9);
        }
    }
}

#[test]
fn beam_one_is_constrained_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = init_model(&tiny(18, 16, 9)).unwrap();
    let catalog = random_catalog(12, &mut rng);
    let trie = trie_of(&catalog);
    let context = [8, 9];
    let got = beam_decode(&m, &context, &trie, &BeamConfig { beam_size: 1, max_length: 20 }).unwrap();
    assert_eq!(got.len(), 1);
    let mut node = super::trie::ROOT;
    let mut prefix = vec![BOS];
    while trie.has_children(node) {
        let lp = log_softmax(&m.forward(&context, &prefix[1..]).unwrap().row(prefix.len() - 1).to_vec());
        let (tok, child) = trie
            .children(node)
            .max_by(|a, b| lp[a.0].partial_cmp(&lp[b.0]).unwrap().then(b.0.cmp(&a.0)))
            .unwrap();
        prefix.push(tok);
        node = child;
    }
    assert_eq!(got[0].tokens, prefix[1..]);
}

#[test]
fn decoded_items_are_real_and_beams_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..5 {
        let m = init_model(&tiny(18, 16, 100 + seed)).unwrap();
        let catalog = random_catalog(30, &mut rng);
        let trie = trie_of(&catalog);
        let context: Vec<Token> = (0..5).map(|_| rng.random_range(6..18)).collect();
        let mut prev_best = f64::NEG_INFINITY;
        for b in [1, 2, 4, 8, 16, 32] {
            let got = beam_decode(&m, &context, &trie, &BeamConfig { beam_size: b, max_length: 20 }).unwrap();
            assert!(got.len() <= b);
            for h in &got {
                assert_eq!(trie.lookup(&h.tokens), Some(h.item.as_str()));
            }
            assert!(got.windows(2).all(|w| w[0].log_prob >= w[1].log_prob));
            assert!(got[0].log_prob >= prev_best - 1e-12, "beam {b}");
            prev_best = got[0].log_prob;
        }
    }
}

#[test]
fn beam_contract_errors() {
    let m = init_model(&tiny(18, 16, 0)).unwrap();
    let empty = ItemTrie::from_sequences(std::iter::empty()).unwrap();
    assert!(matches!(beam_decode(&m, &[6], &empty, &BeamConfig::default()), Err(Error::Contract(_))));
    let t = ItemTrie::from_sequences([("a", &[6usize, 7][..])]).unwrap();
    assert!(matches!(
        beam_decode(&m, &[6], &t, &BeamConfig { beam_size: 0, max_length: 5 }),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        beam_decode(&m, &[6], &t, &BeamConfig { beam_size: 2, max_length: 1 }),
        Err(Error::Config(_))
    ));
    assert_eq!(BeamConfig::default(), BeamConfig { beam_size: 20, max_length: 20 });
}

#[test]
fn checkpoint_round_trip() {
    let m = init_model(&tiny(20, 16, 6)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    m.save(dir.path()).unwrap();
    let back = Model::load(dir.path()).unwrap();
    assert_eq!(back.config, m.config);
    for (a, b) in back.params.tensors.iter().zip(&m.params.tensors) {
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() <= 1e-6 * y.abs().max(1.0)));
    }
    let csv = loss_curve_csv(&[1.5, 0.25]);
    assert_eq!(csv, "step,loss\n0,1.50000000\n1,0.25000000\n");
}
