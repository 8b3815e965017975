mod common;

use std::collections::HashSet;

use proptest::prelude::*;
use restc::dataio::{self, Vocab};
use restc::eval::{self, RankResult};
use restc::graphs::{Cfg, Msg, Relation};
use restc::model::{Dropout, Layout};
use restc::objectives;
use restc::Strategy as NegStrategy;
use restc_tensor::Tape;

fn session(max_item: usize, max_len: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1..=max_item, 1..=max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn augmentation_yields_every_prefix(s in session(9, 12)) {
        if s.len() < 2 {
            prop_assert!(dataio::augment_prefixes(&s).is_err());
        } else {
            let ex = dataio::augment_prefixes(&s).unwrap();
            prop_assert_eq!(ex.len(), s.len() - 1);
            for (k, e) in ex.iter().enumerate() {
                prop_assert_eq!(&e.prefix[..], &s[..k + 1]);
                prop_assert_eq!(e.target, s[k + 1]);
            }
        }
    }

    #[test]
    fn batch_rows_hold_one_cls(prefixes in prop::collection::vec(session(6, 9), 1..6), max_len in 1usize..8) {
        let targets = vec![1; prefixes.len()];
        let refs: Vec<&[usize]> = prefixes.iter().map(|p| &p[..]).collect();
        let ex = common::examples(&refs, &targets);
        let cls = 7;
        let b = common::batch(&ex, max_len, cls);
        for r in 0..b.size() {
            let row = b.row(r);
            prop_assert_eq!(row.iter().filter(|&&x| x == cls).count(), 1);
            prop_assert_eq!(row[b.lengths[r]], cls);
            let tail = &prefixes[r][prefixes[r].len().saturating_sub(max_len)..];
            prop_assert_eq!(b.prefix(r), tail);
            prop_assert_eq!(b.mask_row(r).iter().filter(|&&m| m).count(), b.lengths[r] + 1);
        }
    }

    #[test]
    fn vocab_round_trips(ids in prop::collection::btree_set("[a-z0-9]{1,6}", 1..20)) {
        let vocab = Vocab::from_ids(ids.iter());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        vocab.write(&path).unwrap();
        let back = Vocab::read(&path).unwrap();
        prop_assert_eq!(back.len(), ids.len());
        for id in &ids {
            let i = vocab.index_of(id).unwrap();
            prop_assert!((1..=ids.len()).contains(&i));
            prop_assert_eq!(back.index_of(id), Some(i));
            prop_assert_eq!(back.external(i), Some(id.as_str()));
        }
        prop_assert_eq!(vocab.cls(), ids.len() + 1);
    }

    #[test]
    fn msg_relations_are_exclusive(s in session(6, 14)) {
        let msg = Msg::build(&s).unwrap();
        let mut pairs = HashSet::new();
        for e in &msg.edges {
            prop_assert!(pairs.insert((e.src, e.dst)), "two relations on one ordered pair");
            if e.rel == Relation::SelfLoop {
                prop_assert_eq!(e.src, e.dst);
            }
        }
        for e in &msg.edges {
            match e.rel {
                Relation::Bi => prop_assert!(msg.edges.iter().any(|f| f.src == e.dst && f.dst == e.src && f.rel == Relation::Bi)),
                Relation::Out => prop_assert!(msg.edges.iter().any(|f| f.src == e.dst && f.dst == e.src && f.rel == Relation::In)),
                Relation::In => prop_assert!(msg.edges.iter().any(|f| f.src == e.dst && f.dst == e.src && f.rel == Relation::Out)),
                Relation::SelfLoop => {}
            }
        }
        for n in 0..msg.num_nodes() {
            prop_assert!(msg.edges.iter().any(|e| e.src == n));
        }
    }

    #[test]
    fn cfg_is_symmetric_and_stochastic(sessions in prop::collection::vec(session(8, 8), 1..6)) {
        let sessions: Vec<dataio::Session> = sessions
            .into_iter()
            .enumerate()
            .map(|(i, items)| dataio::Session { id: i.to_string(), items })
            .collect();
        let cfg = Cfg::build(&sessions, 8).unwrap();
        for a in 1..=8 {
            for b in 1..=8 {
                prop_assert_eq!(cfg.weight(a, b), cfg.weight(b, a));
            }
        }
        let p = cfg.propagation_matrix().unwrap();
        for r in 0..p.rows() {
            let s: f64 = p.row(r).map(|(_, v)| v).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn metric_laws(a in prop::collection::vec(1usize..40, 1..30), b in prop::collection::vec(1usize..40, 1..30), k in 1usize..30) {
        let rr = |v: &[usize]| v.iter().map(|&rank| RankResult { rank, length: 3 }).collect::<Vec<_>>();
        let (ra, rb) = (rr(&a), rr(&b));
        prop_assert!(eval::mrr(&ra, k) <= eval::hit_rate(&ra, k) + 1e-15);
        prop_assert!(eval::hit_rate(&ra, k) <= eval::hit_rate(&ra, k + 1));
        let joint: Vec<RankResult> = ra.iter().chain(&rb).copied().collect();
        let (na, nb) = (a.len() as f64, b.len() as f64);
        let weighted = |f: fn(&[RankResult], usize) -> f64| (na * f(&ra, k) + nb * f(&rb, k)) / (na + nb);
        prop_assert!((eval::hit_rate(&joint, k) - weighted(eval::hit_rate)).abs() < 1e-12);
        prop_assert!((eval::mrr(&joint, k) - weighted(eval::mrr)).abs() < 1e-12);
    }

    #[test]
    fn rank_matches_sort(scores in prop::collection::vec(-3i32..3, 1..20), pick in 0usize..20) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let target = pick % scores.len();
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap().then(i.cmp(&j)));
        let expected = order.iter().position(|&i| i == target).unwrap() + 1;
        prop_assert_eq!(eval::rank_target(&scores, target).unwrap(), expected);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// The contrastive term alone sends gradient into both encoders.
    #[test]
    fn contrastive_gradient_reaches_both_views(seed in 0u64..1000, strategy in prop::sample::select(NegStrategy::ALL.to_vec())) {
        let mut cfg = common::tiny_config(6);
        cfg.seed = seed;
        let model = common::model_with(cfg, 6, 5, &[]);
        let ex = common::examples(&[&[1, 2, 3], &[4, 5], &[6, 1, 6, 2], &[3]], &[4, 6, 1, 2]);
        let b = common::batch(&ex, 5, model.cls());
        let layout = Layout::new(&b).unwrap();
        let mut tape = Tape::new();
        let bind = model.store.bind(&mut tape);
        let out = model.forward(&mut tape, &bind, &layout, &mut Dropout::eval(), None).unwrap();
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let neg = objectives::sample_negatives(strategy, 4, 6, &mut rng).unwrap();
        let loss = objectives::contrastive_loss(&mut tape, out.g, out.t, &neg, 0.5, false).unwrap();
        tape.backward(loss).unwrap();
        let grad_norm = |name: &str| -> f64 {
            model
                .store
                .iter()
                .filter(|(_, p)| p.name.starts_with(name))
                .filter_map(|(id, _)| tape.grad(bind[id]))
                .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
                .sum()
        };
        prop_assert!(grad_norm("temporal.") > 0.0);
        prop_assert!(grad_norm("spatial.") > 0.0);
    }
}
