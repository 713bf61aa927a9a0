mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use m3pt::autograd::Graph;
use m3pt::config::CentroidMode;
use m3pt::data::Split;
use m3pt::datagen::{generate, CorpusSpec};
use m3pt::die::{similarity_image_to_tags, similarity_tag_to_images, symmetric_contrastive, DieModel};
use m3pt::matcher::{rank_predictions, MatchHead};
use m3pt::metrics::{EvalInstance, EvalReport};
use m3pt::model::{M3pt, ModelShape};
use m3pt::params::{ParamStore, Tensor};
use m3pt::tif::ModalityAggregator;
use m3pt::training::{batch_loss, PoiTagBatch};
use m3pt::ModelConfig;

use common::{oracle_metrics, random_instance};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn metrics_match_brute_force_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..1000 {
        let vocab = 1 + case % 8;
        let n = 1 + case % 5;
        let xs: Vec<EvalInstance> = (0..n).map(|_| random_instance(&mut rng, vocab)).collect();
        let got = EvalReport::compute(&xs, vocab).unwrap();
        let want = oracle_metrics(&xs, vocab);
        let pairs = [
            ("M-P", got.macro_p, want.macro_p),
            ("M-R", got.macro_r, want.macro_r),
            ("M-F1", got.macro_f1, want.macro_f1),
            ("P-e", got.p_e, want.p_e),
            ("R-e", got.r_e, want.r_e),
            ("F1-e", got.f1_e, want.f1_e),
            ("HLS", got.hamming, want.hamming),
            ("mAP", got.map, want.map),
            ("OneError", got.one_error, want.one_error),
            ("RankingLoss", got.ranking_loss, want.ranking_loss),
        ];
        for (name, g, w) in pairs {
            assert!(close(g, w, 1e-10), "case {case} {name}: {g} vs oracle {w}");
        }
        for (k, w) in want.p_at {
            assert!(close(got.topk[&k], w, 1e-10), "case {case} P@{k}");
        }
    }
}

fn instances(vocab: usize) -> impl Strategy<Value = Vec<EvalInstance>> {
    prop::collection::vec(any::<u64>(), 1..6).prop_map(move |seeds| {
        seeds
            .into_iter()
            .map(|s| random_instance(&mut ChaCha8Rng::seed_from_u64(s), vocab))
            .collect()
    })
}

fn perfect(xs: &[EvalInstance]) -> Vec<EvalInstance> {
    xs.iter()
        .map(|x| {
            let mut ranking = x.gold.clone();
            ranking.extend(x.ranking.iter().filter(|t| !x.gold.contains(t)));
            EvalInstance {
                gold: x.gold.clone(),
                accepted: x.gold.clone(),
                ranking,
            }
        })
        .collect()
}

proptest! {
    #[test]
    fn hamming_and_ranking_loss_vanish_exactly_for_perfect_outputs(xs in instances(6)) {
        let p = EvalReport::compute(&perfect(&xs), 6).unwrap();
        prop_assert_eq!(p.hamming, 0.0);
        prop_assert_eq!(p.ranking_loss, 0.0);

        let r = EvalReport::compute(&xs, 6).unwrap();
        let sets_perfect = xs.iter().all(|x| x.gold == x.accepted);
        prop_assert_eq!(r.hamming == 0.0, sets_perfect);
        let rank_perfect = xs.iter().filter(|x| !x.gold.is_empty()).all(|x| {
            let n = x.gold.len();
            x.ranking[..n].iter().all(|t| x.gold.contains(t))
        });
        prop_assert_eq!(r.ranking_loss == 0.0, rank_perfect);
    }

    #[test]
    fn cluster_assignment_is_a_distribution(seed in any::<u64>(), v in prop::collection::vec(-5.0f64..5.0, 6)) {
        let mut store = ParamStore::new();
        let agg = ModalityAggregator::new(&mut store, "a", 6, 4, 3, CentroidMode::Scalar, &mut ChaCha8Rng::seed_from_u64(seed));
        let alpha = agg.bank().cluster_assign(&store, &v).unwrap();
        prop_assert!(alpha.iter().all(|&a| a >= 0.0));
        prop_assert!(close(alpha.iter().sum::<f64>(), 1.0, 1e-6));
    }

    #[test]
    fn pooling_is_permutation_invariant_and_additive(
        seed in any::<u64>(),
        rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 5), 2..6),
        split in 1usize..5,
    ) {
        let mut store = ParamStore::new();
        let agg = ModalityAggregator::new(&mut store, "a", 5, 3, 2, CentroidMode::Scalar, &mut ChaCha8Rng::seed_from_u64(seed));
        let pooled = |rows: &[Vec<f64>]| -> Tensor {
            let mut g = Graph::new(&store);
            let ids: Vec<_> = rows.iter().map(|r| g.row_vector(r)).collect();
            let p = agg.pool(&mut g, &ids).unwrap();
            g.value(p).clone()
        };
        let all = pooled(&rows);
        let mut reversed = rows.clone();
        reversed.reverse();
        let back = pooled(&reversed);
        prop_assert!(all.iter().zip(back.iter()).all(|(a, b)| close(*a, *b, 1e-12)));

        let k = split.min(rows.len() - 1);
        let parts = pooled(&rows[..k]) + pooled(&rows[k..]);
        prop_assert!(all.iter().zip(parts.iter()).all(|(a, b)| close(*a, *b, 1e-12)));
    }

    #[test]
    fn match_scores_ignore_candidate_order(seed in any::<u64>(), n in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let head = MatchHead::new(&mut store, "m", 6, 12, &mut rng);
        let c = store.normal("c", 1, 6, 1.0, &mut rng);
        let t = store.normal("t", n, 6, 1.0, &mut rng);
        let content: Vec<f64> = store.get(c).iter().copied().collect();
        let tags: Vec<Vec<f64>> = store.get(t).rows().into_iter().map(|r| r.to_vec()).collect();
        let fwd = head.match_many(&store, &content, &tags).unwrap();
        let rev_tags: Vec<Vec<f64>> = tags.iter().rev().cloned().collect();
        let mut rev = head.match_many(&store, &content, &rev_tags).unwrap();
        rev.reverse();
        prop_assert_eq!(fwd, rev);
    }

    #[test]
    fn accepted_sets_shrink_as_threshold_rises(scores in prop::collection::vec(0.0f64..1.0, 1..12), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let accepted = |pi| -> BTreeSet<usize> {
            rank_predictions(&scores, pi).unwrap().into_iter().filter(|p| p.accepted).map(|p| p.tag).collect()
        };
        prop_assert!(accepted(hi).is_subset(&accepted(lo)));
    }

    #[test]
    fn ranking_is_score_desc_then_id_asc(scores in prop::collection::vec(prop::sample::select(vec![0.1, 0.4, 0.4, 0.7, 0.9]), 1..12)) {
        let ranked = rank_predictions(&scores, 0.5).unwrap();
        prop_assert_eq!(ranked.len(), scores.len());
        for w in ranked.windows(2) {
            prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].tag < w[1].tag));
        }
        prop_assert_eq!(ranked, rank_predictions(&scores, 0.5).unwrap());
    }

    #[test]
    fn contrastive_similarities_are_distributions(
        v in prop::collection::vec(-2.0f64..2.0, 4),
        set in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 1..6),
        tau in 0.01f64..1.0,
    ) {
        for s in [similarity_image_to_tags(&v, &set, tau).unwrap(), similarity_tag_to_images(&v, &set, tau).unwrap()] {
            prop_assert!(close(s.iter().sum::<f64>(), 1.0, 1e-6));
            prop_assert!(s.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn contrastive_loss_is_nonnegative_and_additive_over_positive_pairs(seed in any::<u64>(), k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let left = store.normal("l", 4, 5, 1.0, &mut rng);
        let right = store.normal("r", 4, 5, 1.0, &mut rng);
        let positives = [(0, 0), (1, 1), (2, 3), (3, 2)];
        let loss = |pairs: &[(usize, usize)]| {
            let mut g = Graph::new(&store);
            let (l, r) = (g.param(left), g.param(right));
            let x = symmetric_contrastive(&mut g, l, r, pairs, 0.1).unwrap();
            g.scalar(x)
        };
        let all = loss(&positives);
        prop_assert!(all >= 0.0);
        prop_assert!(close(all, loss(&positives[..k]) + loss(&positives[k..]), 1e-9 * all.max(1.0)));
    }
}

fn tiny() -> (m3pt::data::Dataset, ModelConfig) {
    (generate(&CorpusSpec::tiny()).unwrap(), ModelConfig::tiny())
}

#[test]
fn die_losses_are_nonnegative_and_additive_over_batch_partition() {
    let (data, cfg) = tiny();
    let die = DieModel::new(cfg, ModelShape::of(&data)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let images: Vec<_> = data.pois[..4].iter().map(|p| data.image(&p.images[0]).unwrap()).collect();
    let samples: Vec<_> = (0..4)
        .map(|t| m3pt::die::make_masked_sample(&data.tokens, &data.tags, t, "this is a {}", &mut rng).unwrap())
        .collect();

    let run = |range: std::ops::Range<usize>| -> (f64, f64, f64) {
        let mut g = Graph::new(&die.store);
        let v: Vec<_> = images.iter().map(|img| die.backbone.forward(&mut g, img).unwrap()).collect();
        let msk = die.loss_msk(&mut g, &v[range.clone()], &samples[range.clone()]).unwrap();
        let vs = g.concat_rows(&v);
        let ids: Vec<usize> = (0..4).collect();
        let rows: Vec<_> = ids
            .iter()
            .map(|&t| die.text.forward(&mut g, data.tags.tokens_of(t).unwrap()).unwrap())
            .collect();
        let ts = g.concat_rows(&rows);
        let positives: Vec<(usize, usize)> = range.clone().map(|i| (i, i)).collect();
        let itc = die.loss_itc(&mut g, vs, ts, &positives).unwrap();
        let pairs: Vec<_> = range.clone().map(|i| (v[i], rows[(i + 1) % 4], (i % 2) as u8)).collect();
        let itm = die.loss_itm(&mut g, &pairs).unwrap();
        (g.scalar(msk), g.scalar(itc), g.scalar(itm))
    };
    let all = run(0..4);
    let (a, b) = (run(0..1), run(1..4));
    for (name, whole, x, y) in [("MSK", all.0, a.0, b.0), ("ITC", all.1, a.1, b.1), ("ITM", all.2, a.2, b.2)] {
        assert!(whole >= 0.0, "{name} negative");
        assert!(close(whole, x + y, 1e-9 * whole.max(1.0)), "{name}: {whole} vs {x} + {y}");
    }
}

#[test]
fn training_loss_is_nonnegative_and_linear_in_alpha() {
    let (data, cfg) = tiny();
    let model = M3pt::new(cfg, ModelShape::of(&data)).unwrap();
    let train = data.indices(Split::Train);
    let enc: Vec<_> = train[..4].iter().map(|&i| model.encode_poi(&data, i).unwrap()).collect();
    let golds: Vec<&[usize]> = train[..4].iter().map(|&i| data.pois[i].gold_tags.as_slice()).collect();
    let batch = PoiTagBatch::sample(&golds, data.tags.len(), 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let pois: Vec<_> = enc.iter().collect();
    let total = |alpha: f64| {
        let mut m = M3pt::new(model.config.clone(), model.shape).unwrap();
        m.config.alpha = alpha;
        let mut g = Graph::new(&m.store);
        let l = batch_loss(&m, &mut g, &data, &pois, &batch).unwrap();
        (g.scalar(l.ptm), g.scalar(l.ptc), g.scalar(l.total))
    };
    for alpha in [0.0, 0.5, 1.0, 2.5] {
        let (ptm, ptc, l) = total(alpha);
        assert!(l >= 0.0 && ptm >= 0.0 && ptc >= 0.0);
        assert!(close(l, ptm + alpha * ptc, 1e-12 * l.max(1.0)), "alpha {alpha}");
    }
}

#[test]
fn splits_are_disjoint_and_generation_is_pure() {
    let spec = CorpusSpec::desk().with_seed(11);
    let a = generate(&spec).unwrap();
    let b = generate(&spec).unwrap();
    assert_eq!(a.pois, b.pois);
    assert_eq!(a.splits, b.splits);
    let ids: BTreeSet<&str> = a.pois.iter().map(|p| p.poi_id.as_str()).collect();
    assert_eq!(ids.len(), a.pois.len(), "each POI id appears once, so in exactly one split");
    let total: usize = [Split::Train, Split::Val, Split::Test].iter().map(|&s| a.indices(s).len()).sum();
    assert_eq!(total, a.pois.len());
}
