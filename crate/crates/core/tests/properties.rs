mod common;

use std::collections::BTreeMap;

use kvss_core::access::{
    build_proxy_bank, decompose_access_error, effective_count, projection_residual, tv, AccessEstimatorSpec,
    ExposureCorrection, PoolingWeights,
};
use kvss_core::contract::{apply_allocation, apportion, AllocationRule};
use kvss_core::diagnostics::{
    assemble_cell, boundary_margin_check, boundary_swap, disagreement_boundary, BoundaryUnit, CellId,
};
use kvss_core::io::{read_scores_binary, read_scores_csv, write_scores_binary, write_scores_csv};
use kvss_core::projection::{block_project, token_fill};
use kvss_core::rchannel::{best_proxy_tv, labeled_tv, random_separated_law, tv_floor, LabeledLaw, RChannelProxy};
use kvss_core::stats::{
    cluster_bootstrap, fisher_one_sided, jaccard_at_frac, mean_delta_gap, ndcg_at_frac, pairwise_auc, spearman,
    Alternative,
};
use kvss_core::value::{
    block_stats, deletion_cost, group_block_scores, soft_robust_pool, BlockStats, Stage2Params, Variant,
};
use kvss_core::{make_blocks, top_k, KeptSet, Provenance, ScoreVector, SelectorContract, StageTag};
use kvss_core::contract::TieBreak;
use proptest::prelude::*;
use rand::Rng;

fn small_scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0i32..6).prop_map(f64::from), 1..40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn top_k_matches_counting_oracle(values in small_scores(), kf in 0.0f64..=1.0, rf in 0.0f64..=1.0) {
        let t = values.len();
        let k = ((t as f64) * kf).round() as usize;
        let reserved = ((k as f64) * rf).floor() as usize;
        let s = ScoreVector::new(values.clone(), StageTag::Stage1, reserved, "fp").unwrap();
        let kept = top_k(&s, k, TieBreak::LowerIndexFirst).unwrap();
        prop_assert_eq!(kept.len(), k);
        prop_assert_eq!(&kept.indices, &common::top_k_oracle(&values, reserved, k));
        for i in t - reserved..t {
            prop_assert_eq!(kept.provenance_of(i), Some(Provenance::ReservedTail));
        }
    }

    #[test]
    fn apportion_conserves_and_caps(weights in prop::collection::vec(0.0f64..5.0, 1..12), seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let caps: Vec<usize> = weights.iter().map(|_| rng.gen_range(0..20)).collect();
        let capacity: usize = caps.iter().sum();
        let total = if capacity == 0 { 0 } else { rng.gen_range(0..=capacity) };
        let out = apportion(total, &weights, &caps).unwrap();
        prop_assert_eq!(out.iter().sum::<usize>(), total);
        prop_assert!(out.iter().zip(&caps).all(|(o, c)| o <= c));
    }

    #[test]
    fn allocation_conserves_total(t in 8usize..64, layers in 1usize..5, heads in 1usize..5, b in 0.05f64..1.0, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let mass: BTreeMap<usize, Vec<f64>> = (0..layers).map(|l| (l, (0..heads).map(|_| rng.gen::<f64>()).collect())).collect();
        for rule in [AllocationRule::UniformPerHead, AllocationRule::PyramidalByLayer, AllocationRule::HeadAdaptive] {
            let c = SelectorContract::uniform(b, 4, layers).with_window(1).with_allocation(rule);
            let k = kvss_core::budget_tokens(t, b);
            let map = apply_allocation(&c, t, heads, Some(&mass), None).unwrap();
            prop_assert_eq!(map.values().sum::<usize>(), layers * heads * k);
            prop_assert!(map.values().all(|&x| x <= t));
        }
    }

    #[test]
    fn tv_is_a_metric(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = common::rng(seed);
        let p = common::simplex(&mut rng, n);
        let q = common::simplex(&mut rng, n);
        let r = common::simplex(&mut rng, n);
        prop_assert_eq!(tv(&p, &p).unwrap(), 0.0);
        prop_assert_eq!(tv(&p, &q).unwrap(), tv(&q, &p).unwrap());
        prop_assert!(tv(&p, &r).unwrap() <= tv(&p, &q).unwrap() + tv(&q, &r).unwrap() + 1e-12);
    }

    #[test]
    fn residual_is_renormalized_tv(seed in any::<u64>(), n in 2usize..30) {
        let mut rng = common::rng(seed);
        let p = common::simplex(&mut rng, n);
        let kept: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.5)).collect();
        let set = KeptSet::from_entries(kept.iter().map(|&i| (i, Provenance::Token)), "");
        let eta = projection_residual(&set, &p).unwrap();
        let mass: f64 = kept.iter().map(|&i| p[i]).sum();
        prop_assert!((eta - (1.0 - mass)).abs() < 1e-12);
        if mass > 0.0 {
            let restricted: Vec<f64> = (0..n).map(|i| if set.contains(i) { p[i] / mass } else { 0.0 }).collect();
            prop_assert!((tv(&p, &restricted).unwrap() - eta).abs() < 1e-12);
        }
        // adding a token never increases the residual
        if let Some(extra) = (0..n).find(|i| !set.contains(*i)) {
            let bigger = KeptSet::from_entries(set.entries().chain([(extra, Provenance::Token)]), "");
            prop_assert!(projection_residual(&bigger, &p).unwrap() <= eta + 1e-15);
        }
    }

    #[test]
    fn decomposition_telescopes(seed in any::<u64>(), t in 2usize..16) {
        let cap = common::capture(t, 2, 2, seed);
        let mut rng = common::rng(seed ^ 0x5eed);
        let spec = |rng: &mut rand_chacha::ChaCha8Rng| AccessEstimatorSpec {
            query_law: common::simplex(rng, t),
            exposure: ExposureCorrection::Table((0..t * t).map(|_| rng.gen::<f64>()).collect()),
            pooling: PoolingWeights::PerQuery((0..2 * 2 * t).map(|_| rng.gen::<f64>()).collect()),
        };
        let a = spec(&mut rng);
        let b = spec(&mut rng);
        let i = rng.gen_range(0..t);
        let d = decompose_access_error(&a, &b, &cap, i).unwrap();
        prop_assert!(d.relative_error() <= 1e-9);
        prop_assert!((d.estimate - a.access(&cap, i).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn effective_ratio_decreases(lambda in prop::sample::select(vec![0.01, 0.1, 1.0]), n in 1usize..10_000) {
        let a = effective_count(n, lambda, 0.0).unwrap().ratio;
        let b = effective_count(n + 1, lambda, 0.0).unwrap().ratio;
        prop_assert!(b < a);
    }

    #[test]
    fn variant_algebra(seed in any::<u64>(), d in 1usize..8) {
        let mut rng = common::rng(seed);
        let stats = BlockStats {
            a: rng.gen::<f64>(),
            mu: (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            o: (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        };
        let params = Stage2Params::default();
        let g = (1.0 - stats.a).max(params.eps_a);
        let full = deletion_cost(&stats, &params, Variant::Full);
        let nolev = deletion_cost(&stats, &params, Variant::NoLev);
        prop_assert!((full - nolev / (g * g)).abs() <= 1e-12 * full.abs().max(1.0));
        prop_assert!((deletion_cost(&stats, &params, Variant::AlphaBlend(1.0)) - full).abs() <= 1e-9 * full.max(1.0));
        prop_assert_eq!(deletion_cost(&stats, &params, Variant::AlphaBlend(0.0)), nolev);
        prop_assert_eq!(deletion_cost(&stats, &params, Variant::SupportOnly), stats.a);
    }

    #[test]
    fn soft_robust_bounds(seed in any::<u64>(), m in 1usize..6, nb in 1usize..10, tau in 0.01f64..5.0) {
        let mut rng = common::rng(seed);
        let d: Vec<Vec<f64>> = (0..m).map(|_| (0..nb).map(|_| rng.gen_range(0.0..10.0)).collect()).collect();
        let s = soft_robust_pool(&d, tau).unwrap();
        for c in 0..nb {
            let max = d.iter().map(|x| x[c]).fold(f64::MIN, f64::max);
            prop_assert!(s[c] >= max - 1e-12);
            prop_assert!(s[c] <= max + tau * (m as f64).ln() + 1e-9);
        }
    }

    #[test]
    fn swap_is_an_involution(seed in any::<u64>(), t in 2usize..30) {
        let mut rng = common::rng(seed);
        let k = rng.gen_range(1..t);
        let values: Vec<f64> = (0..t).map(|_| rng.gen_range(0..5) as f64).collect();
        let s = ScoreVector::raw(values).unwrap();
        let kept = top_k(&s, k, TieBreak::LowerIndexFirst).unwrap();
        let out: Vec<usize> = (0..t).filter(|i| !kept.contains(*i)).collect();
        let unit = BoundaryUnit {
            in_token: out[rng.gen_range(0..out.len())],
            out_token: kept.indices[rng.gen_range(0..k)],
            base_margin: 0.0,
            delta_in: 0.0,
            delta_out: 0.0,
            crossed: false,
        };
        let swapped = boundary_swap(&kept, &unit).unwrap();
        prop_assert_eq!(swapped.len(), kept.len());
        prop_assert_eq!(boundary_swap(&swapped, &unit.reversed()).unwrap(), kept);
    }

    #[test]
    fn additive_utility_gains_from_crossed_units(seed in any::<u64>(), t in 4usize..30) {
        let mut rng = common::rng(seed);
        let k = rng.gen_range(1..t);
        let s = ScoreVector::raw((0..t).map(|_| rng.gen_range(0..8) as f64).collect()).unwrap();
        let u: Vec<f64> = (0..t).map(|_| rng.gen_range(0..8) as f64).collect();
        let target = ScoreVector::raw(u.clone()).unwrap();
        let ka = top_k(&s, k, TieBreak::LowerIndexFirst).unwrap();
        let kb = top_k(&target, k, TieBreak::LowerIndexFirst).unwrap();
        let units = disagreement_boundary(&ka, &kb, &s, &target).unwrap();
        let utility = |kept: &KeptSet| kept.indices.iter().map(|&i| u[i]).sum::<f64>();
        let mut current = ka.clone();
        let mut applied = false;
        for unit in units.iter().filter(|x| x.crossed && u[x.in_token] - u[x.out_token] > 0.0) {
            let next = boundary_swap(&current, unit).unwrap();
            prop_assert!((utility(&next) - utility(&current) - (u[unit.in_token] - u[unit.out_token])).abs() < 1e-12);
            current = next;
            applied = true;
        }
        if applied {
            prop_assert!(utility(&current) > utility(&ka));
        }
        let sym = ka.indices.iter().filter(|i| !kb.contains(**i)).count();
        prop_assert_eq!(units.len(), sym);
    }

    #[test]
    fn fisher_matches_enumeration(a in 0u64..11, b in 0u64..11, c in 0u64..11, d in 0u64..11) {
        let table = [[a, b], [c, d]];
        prop_assert!((fisher_one_sided(table, Alternative::Less) - common::fisher_oracle(table, true)).abs() < 1e-12);
        prop_assert!((fisher_one_sided(table, Alternative::Greater) - common::fisher_oracle(table, false)).abs() < 1e-12);
    }

    #[test]
    fn auc_matches_pair_enumeration(seed in any::<u64>(), n in 2usize..40) {
        let mut rng = common::rng(seed);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            for j in 0..n {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    num += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        prop_assert!((pairwise_auc(&scores, &labels).unwrap() - num / den).abs() < 1e-12);
    }

    #[test]
    fn auc_negation_without_ties(seed in any::<u64>(), n in 2usize..40) {
        let mut rng = common::rng(seed);
        let scores: Vec<f64> = (0..n).map(|i| i as f64 + rng.gen::<f64>() * 0.5).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[n - 1] = false;
        let neg: Vec<f64> = scores.iter().map(|x| -x).collect();
        let a = pairwise_auc(&scores, &labels).unwrap();
        prop_assert!((pairwise_auc(&neg, &labels).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn spearman_matches_pairwise_rank_oracle(seed in any::<u64>(), n in 3usize..25) {
        let mut rng = common::rng(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64).collect();
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|a| {
                    let below = v.iter().filter(|b| *b < a).count() as f64;
                    let equal = v.iter().filter(|b| *b == a).count() as f64;
                    below + (equal + 1.0) / 2.0
                })
                .collect()
        };
        let (rx, ry) = (rank(&x), rank(&y));
        let m = (n as f64 + 1.0) / 2.0;
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - m) * (b - m)).sum();
        let vx: f64 = rx.iter().map(|a| (a - m) * (a - m)).sum();
        let vy: f64 = ry.iter().map(|b| (b - m) * (b - m)).sum();
        match spearman(&x, &y) {
            Ok(r) => prop_assert!((r - cov / (vx * vy).sqrt()).abs() < 1e-12),
            Err(_) => prop_assert!(vx == 0.0 || vy == 0.0),
        }
    }

    #[test]
    fn alignment_metrics_match_definitions(seed in any::<u64>(), t in 2usize..30) {
        let mut rng = common::rng(seed);
        let s: Vec<f64> = (0..t).map(|_| rng.gen::<f64>()).collect();
        let r: Vec<f64> = (0..t).map(|_| rng.gen_range(0..4) as f64).collect();
        let n = (t + 1) / 2;
        let order = |v: &[f64]| {
            let mut o: Vec<usize> = (0..t).collect();
            o.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
            o.truncate(n);
            o
        };
        let dcg = |o: &[usize]| o.iter().enumerate().map(|(k, &i)| r[i] / ((k + 2) as f64).log2()).sum::<f64>();
        if r.iter().any(|x| *x > 0.0) {
            let expect = dcg(&order(&s)) / dcg(&order(&r));
            prop_assert!((ndcg_at_frac(&s, &r, 0.5).unwrap() - expect).abs() < 1e-12);
        }
        let (a, b) = (order(&s), order(&r));
        let inter = a.iter().filter(|i| b.contains(i)).count() as f64;
        let j = inter / (2.0 * n as f64 - inter);
        prop_assert!((jaccard_at_frac(&s, &r, 0.5).unwrap() - j).abs() < 1e-12);
    }

    #[test]
    fn cell_grid_partitions(seed in any::<u64>(), n in 1usize..60) {
        let mut rng = common::rng(seed);
        let cells: Vec<_> = (0..n)
            .map(|i| {
                let host = rng.gen_range(0..5) as f64;
                assemble_cell(CellId::new("m", format!("t{i}"), "b"), host, rng.gen_range(0..5) as f64, rng.gen_range(0..5) as f64, rng.gen::<f64>() * 0.2).unwrap()
            })
            .collect();
        let mut counts: BTreeMap<(String, i8), usize> = BTreeMap::new();
        for c in &cells {
            prop_assert_eq!(c.h_c as f64, c.m_c.signum() * f64::from(u8::from(c.m_c != 0.0)));
            prop_assert!((c.delta - (c.variant - c.host)).abs() < 1e-9);
            *counts.entry((c.phi_bucket.as_str().to_string(), c.h_c)).or_default() += 1;
        }
        prop_assert_eq!(counts.values().sum::<usize>(), n);
    }

    #[test]
    fn labeled_tv_matches_joint_enumeration(seed in any::<u64>(), n in 1usize..4, q in 4usize..8) {
        let mut rng = common::rng(seed);
        let w = common::simplex(&mut rng, n);
        let law = random_separated_law(&mut rng, &w, 0.1, q).unwrap();
        let r = rng.gen_range(1..=n);
        let proxy = RChannelProxy {
            routing: (0..n).map(|_| rng.gen_range(0..r)).collect(),
            channels: (0..r).map(|_| common::simplex(&mut rng, q)).collect(),
        };
        // joint laws over (label, query) pairs
        let mut diff = 0.0;
        for m in 0..n {
            for x in 0..q {
                diff += (w[m] * law.modes[m][x] - w[m] * proxy.channels[proxy.routing[m]][x]).abs();
            }
        }
        prop_assert!((labeled_tv(&law, &proxy).unwrap() - diff / 2.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn min_tv_respects_floor_and_is_monotone(seed in any::<u64>(), n in 2usize..5, eps in prop::sample::select(vec![0.0, 0.1])) {
        let mut rng = common::rng(seed);
        let w = common::simplex(&mut rng, n);
        let law = random_separated_law(&mut rng, &w, eps, 12).unwrap();
        let mut last = f64::INFINITY;
        for r in 1..=n {
            let best = best_proxy_tv(&law, r, 0.1).unwrap();
            prop_assert!(best.min_tv >= tv_floor(&w, law.eps(), r).unwrap() - 1e-9);
            prop_assert!(best.min_tv <= last + 1e-12);
            last = best.min_tv;
        }
    }

    #[test]
    fn novalue_ignores_values_and_full_ranking_is_scale_free(seed in any::<u64>(), lambda in 0.1f64..10.0) {
        let cap = common::capture(24, 2, 2, seed);
        let contract = SelectorContract::uniform(0.5, 4, 2).with_window(4);
        let bank = build_proxy_bank(24, 4, &[], 4.0, None).unwrap();
        let blocks = make_blocks(24, 4);
        let params = Stage2Params::default();
        let mut moved = cap.clone();
        let mut scaled = cap.clone();
        let mut rng = common::rng(seed);
        for l in 0..2 {
            moved.values_layer_mut(l).iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            scaled.values_layer_mut(l).iter_mut().for_each(|v| *v *= lambda as f32);
        }
        let nv = |c| group_block_scores(c, &contract, &bank, &blocks, Variant::NoValue, &params, None).unwrap().scores;
        prop_assert_eq!(nv(&cap), nv(&moved));
        let rank = |c| {
            let s = group_block_scores(c, &contract, &bank, &blocks, Variant::Full, &params, None).unwrap().scores;
            let mut o: Vec<usize> = (0..s.len()).collect();
            o.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
            (o, s)
        };
        let (ra, sa) = rank(&cap);
        let (rb, sb) = rank(&scaled);
        // strict gaps survive scaling; f32 rounding can only reorder near-ties
        for w in ra.windows(2) {
            if sa[w[0]] > sa[w[1]] * (1.0 + 1e-4) {
                let pa = rb.iter().position(|&x| x == w[0]).unwrap();
                let pb = rb.iter().position(|&x| x == w[1]).unwrap();
                prop_assert!(pa < pb, "{:?} {:?}", sa, sb);
            }
        }
    }

    #[test]
    fn single_group_reproduces_pooled_score(seed in any::<u64>()) {
        let cap = common::capture(20, 2, 2, seed);
        let mut contract = SelectorContract::uniform(0.5, 5, 2).with_window(3);
        contract.layer_weights = [(0, 0.3), (1, 0.7)].into_iter().collect();
        let bank = build_proxy_bank(20, 3, &[7], 2.0, None).unwrap();
        let blocks = make_blocks(20, 5);
        let params = Stage2Params::default();
        let got = group_block_scores(&cap, &contract, &bank, &blocks, Variant::Full, &params, None).unwrap();
        for (c, block) in blocks.blocks.iter().enumerate() {
            let mut expect = 0.0;
            for (&l, &beta) in &contract.layer_weights {
                for h in 0..2 {
                    for (&u, &r) in bank.queries.iter().zip(&bank.weights) {
                        let st = block_stats(&cap, l, h, u, block.clone(), params.eps_mu);
                        let g = (1.0 - st.a).max(params.eps_a);
                        expect += beta * r * (st.a / g).powi(2) * st.distance2();
                    }
                }
            }
            prop_assert!((got.scores[c] - expect).abs() <= 1e-9 * expect.max(1e-12));
        }
    }

    #[test]
    fn token_fill_keeps_blocks(seed in any::<u64>(), t in 8usize..80, p in 2usize..9, kf in 0.05f64..1.0) {
        let mut rng = common::rng(seed);
        let k = ((t as f64) * kf).floor() as usize;
        let blocks = make_blocks(t, p);
        let contract = SelectorContract::uniform(kf, p, 1);
        let host = ScoreVector::raw((0..t).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let bsv = kvss_core::value::host_block_means(&host, &blocks).unwrap();
        let before = block_project(&bsv, &blocks, k, &contract).unwrap();
        prop_assert!(before.eps_lat < p);
        prop_assert_eq!(before.eps_lat, k - p * (k / p));
        let after = token_fill(&before, &host).unwrap();
        prop_assert_eq!(&before.kept_blocks, &after.kept_blocks);
        let outside = t - before.kept.len();
        prop_assert_eq!(after.slack, before.slack.saturating_sub(outside));
        prop_assert!(before.kept.indices.iter().all(|&i| after.kept.contains(i)));
    }

    #[test]
    fn score_files_round_trip(values in prop::collection::vec(-1e6f64..1e6, 1..50), reserve in 0usize..3) {
        let reserve = reserve.min(values.len());
        let s = ScoreVector::new(values, StageTag::Stage1, reserve, "0123456789abcdef").unwrap();
        let mut csv = Vec::new();
        write_scores_csv(&mut csv, &s).unwrap();
        prop_assert_eq!(read_scores_csv(csv.as_slice()).unwrap(), s.clone());
        let mut bin = Vec::new();
        write_scores_binary(&mut bin, &s).unwrap();
        prop_assert_eq!(read_scores_binary(bin.as_slice()).unwrap(), s);
    }
}

#[test]
fn factorized_consistency_decays_with_grid() {
    let mut rng = common::rng(5);
    let law = random_separated_law(&mut rng, &[0.5, 0.5], 0.1, 4).unwrap();
    let mut last = f64::INFINITY;
    for res in [0.5, 0.25, 0.1, 0.05, 0.02] {
        let steps = (1.0 / res as f64).round() as usize;
        // closest grid point per channel, found by exhaustive search
        let channels: Vec<Vec<f64>> = law
            .modes
            .iter()
            .map(|nu| {
                let mut best = (f64::INFINITY, vec![]);
                for a in 0..=steps {
                    for b in 0..=steps - a {
                        for c in 0..=steps - a - b {
                            let eta = vec![a, b, c, steps - a - b - c].into_iter().map(|x| x as f64 / steps as f64).collect::<Vec<_>>();
                            let d = tv(nu, &eta).unwrap();
                            if d < best.0 {
                                best = (d, eta);
                            }
                        }
                    }
                }
                best.1
            })
            .collect();
        let proxy = RChannelProxy { routing: vec![0, 1], channels };
        let d = labeled_tv(&law, &proxy).unwrap();
        assert!(d <= last + 1e-12);
        assert!(d <= 2.0 * res);
        last = d;
    }
    let exact = RChannelProxy { routing: vec![0, 1], channels: law.modes.clone() };
    assert_eq!(labeled_tv(&law, &exact).unwrap(), 0.0);
}

#[test]
fn boundary_check_rejects_bad_pairs() {
    let s = ScoreVector::raw(vec![3.0, 2.0, 1.0]).unwrap();
    assert!(boundary_margin_check(&s, &[0.0; 3], 0, 2, 1, TieBreak::LowerIndexFirst).is_err());
    assert!(boundary_margin_check(&s, &[0.0; 2], 2, 0, 1, TieBreak::LowerIndexFirst).is_err());
}

#[test]
fn bootstrap_contains_estimate() {
    let mut rng = common::rng(9);
    for _ in 0..20 {
        let cells: Vec<_> = (0..12)
            .flat_map(|t| {
                let mut rows = Vec::new();
                for _ in 0..4 {
                    let r = rng.gen_range(-1.0..1.0);
                    rows.push(assemble_cell(CellId::new("m", format!("t{t}"), "b"), 0.0, rng.gen_range(-1.0..1.0) + r, r, 0.0).unwrap());
                }
                rows
            })
            .collect();
        let b = cluster_bootstrap(&cells, |c| c.id.task.clone(), &mean_delta_gap, 500, 3).unwrap();
        assert!(b.ci.0 <= b.estimate && b.estimate <= b.ci.1, "{b:?}");
    }
}

#[test]
fn two_opposite_clusters_span_zero() {
    let mut cells = Vec::new();
    for i in 0..10 {
        cells.push(assemble_cell(CellId::new("m", "up", i.to_string()), 0.0, 1.0, 1.0, 0.0).unwrap());
        cells.push(assemble_cell(CellId::new("m", "up", i.to_string()), 0.0, -1.0, -1.0, 0.0).unwrap());
        cells.push(assemble_cell(CellId::new("m", "down", i.to_string()), 0.0, -1.0, 1.0, 0.0).unwrap());
        cells.push(assemble_cell(CellId::new("m", "down", i.to_string()), 0.0, 1.0, -1.0, 0.0).unwrap());
    }
    let b = cluster_bootstrap(&cells, |c| c.id.task.clone(), &mean_delta_gap, 2000, 1).unwrap();
    assert!(b.ci.0 < 0.0 && b.ci.1 > 0.0);
}

#[test]
fn law_rejects_overlapping_basins() {
    assert!(LabeledLaw::new(vec![0.5, 0.5], vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![vec![0], vec![0]]).is_err());
}
