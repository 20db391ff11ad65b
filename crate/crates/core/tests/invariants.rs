use std::collections::HashMap;

use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use dtmscan::dm::{mom_test, DmParams};
use dtmscan::dtm::node_tests;
use dtmscan::io::Taxonomy;
use dtmscan::scan::{build_partition, ScanBound};
use dtmscan::simulation::{ks_uniform, random_binary_tree, random_dtm_params, sample_dm, sample_dtm_table, CounterRng};
use dtmscan::tree::{aggregate_leaf_rows, enumerate_triplets, label_internal_taxa, parse_newick, PhyloTree};

#[test]
fn triplet_neighbors_on_random_trees() {
    for seed in 0..1000u64 {
        let k = 10 + (seed as usize * 37) % 191;
        let t = random_binary_tree(k, seed).unwrap();
        let ts = enumerate_triplets(&t);
        for (i, tr) in ts.triplets.iter().enumerate() {
            assert!(ts.neighbors[i].len() <= 2, "seed {seed}");
            for &j in &ts.neighbors[i] {
                assert!(j < i);
                assert_eq!(tr.shared(&ts.triplets[j]), 2);
            }
            for tj in &ts.triplets[i + 1..] {
                let (a, b) = (t.internal_node(tj.middle), t.internal_node(tr.middle));
                assert!(!(a != b && t.is_ancestor(a, b)), "ordering broken at seed {seed}");
            }
        }
    }
}

/// Same topology with every internal node's children reversed.
fn mirrored(t: &PhyloTree) -> String {
    fn go(t: &PhyloTree, v: usize, out: &mut String) {
        let n = t.node(v);
        match n.leaf {
            Some(l) => out.push_str(&t.leaf_names()[l]),
            None => {
                out.push('(');
                for (k, &c) in n.children.iter().rev().enumerate() {
                    if k > 0 {
                        out.push(',');
                    }
                    go(t, c, out);
                }
                out.push(')');
            }
        }
    }
    let mut s = String::new();
    go(t, t.root(), &mut s);
    s + ";"
}

fn leafset(t: &PhyloTree, a: usize) -> Vec<String> {
    let mut v: Vec<String> = t.leaves_under(t.internal_node(a)).map(|l| t.leaf_names()[l].clone()).collect();
    v.sort();
    v
}

#[test]
fn taxon_labels_ignore_leaf_order() {
    let t = random_binary_tree(30, 5).unwrap();
    let m = parse_newick(&mirrored(&t)).unwrap();
    let mut lineages = HashMap::new();
    for (j, name) in t.leaf_names().iter().enumerate() {
        let genus = if j % 7 == 3 { None } else { Some(format!("G{}", j / 4)) };
        lineages.insert(name.clone(), vec![Some(format!("P{}", j / 12)), genus]);
    }
    let tax = Taxonomy::new(vec!["phylum".into(), "genus".into()], lineages);
    let (la, lb) = (label_internal_taxa(&t, &tax), label_internal_taxa(&m, &tax));
    let by_set: HashMap<Vec<String>, String> = (0..t.n_internal()).map(|a| (leafset(&t, a), la[a].to_string())).collect();
    for b in 0..m.n_internal() {
        assert_eq!(by_set[&leafset(&m, b)], lb[b].to_string());
    }
}

#[test]
fn node_tests_ignore_sample_order_and_leaf_order() {
    let t = random_binary_tree(12, 8).unwrap();
    let p = random_dtm_params(&t, 2.0, (5.0, 100.0), 8);
    let rows = sample_dtm_table(&t, &p, 30, (200, 600), 8);
    let groups = vec![(0..15).collect::<Vec<_>>(), (15..30).collect::<Vec<_>>()];
    let base = node_tests(&t, &rows, &groups).unwrap();

    let rev: Vec<Vec<u64>> = rows.iter().rev().cloned().collect();
    let rgroups = vec![(15..30).collect::<Vec<_>>(), (0..15).collect::<Vec<_>>()];
    let r = node_tests(&t, &rev, &rgroups).unwrap();
    for (a, b) in base.iter().zip(&r) {
        assert!((a.statistic - b.statistic).abs() <= 1e-9 * a.statistic.max(1.0));
    }

    let m = parse_newick(&mirrored(&t)).unwrap();
    let col: HashMap<&str, usize> = t.leaf_names().iter().enumerate().map(|(j, n)| (n.as_str(), j)).collect();
    let mrows: Vec<Vec<u64>> = rows.iter().map(|r| m.leaf_names().iter().map(|n| r[col[n.as_str()]]).collect()).collect();
    let mr = node_tests(&m, &mrows, &groups).unwrap();
    let by_set: HashMap<Vec<String>, f64> = base.iter().map(|x| (leafset(&t, x.node), x.statistic)).collect();
    for x in &mr {
        let s = by_set[&leafset(&m, x.node)];
        assert!((x.statistic - s).abs() <= 1e-9 * s.max(1.0));
    }
}

#[test]
fn dm_test_is_uniform_under_equal_groups() {
    let p = DmParams::new(vec![0.1, 0.15, 0.2, 0.25, 0.3], 20.0).unwrap();
    let pvals: Vec<f64> = (0..2000u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = CounterRng::new(31, r, 0);
            let rows: Vec<Vec<u64>> = (0..400)
                .map(|_| {
                    let n = rng.random_range(100..=500);
                    sample_dm(&p, n, &mut rng)
                })
                .collect();
            mom_test(&[&rows[..200], &rows[200..]]).unwrap().p_value
        })
        .collect();
    let ks = ks_uniform(&pvals);
    assert!(ks.distance < 0.05, "{ks:?}");
}

#[test]
fn node_tests_factorize_under_the_null() {
    let t = parse_newick("(a,(b,(c,d)));").unwrap();
    let params = random_dtm_params(&t, 3.0, (10.0, 100.0), 41);
    let alpha = [0.1, 0.05, 0.2];
    let reps = 10_000u64;
    let groups = vec![(0..100).collect::<Vec<_>>(), (100..200).collect::<Vec<_>>()];
    let none: usize = (0..reps)
        .into_par_iter()
        .map(|r| {
            let rows = sample_dtm_table(&t, &params, 200, (200, 500), 5000 + r);
            let res = node_tests(&t, &rows, &groups).unwrap();
            res.iter().zip(&alpha).all(|(x, a)| x.p_value > *a) as usize
        })
        .sum();
    let expect: f64 = alpha.iter().map(|a| 1.0 - a).product();
    let got = none as f64 / reps as f64;
    let se = (expect * (1.0 - expect) / reps as f64).sqrt();
    assert!((got - expect).abs() <= 2.0 * se, "{got} vs {expect} (se {se})");
}

fn mc_exceed(t: &PhyloTree, ws: &[f64], draws: usize, seed: u64) -> Vec<f64> {
    let ts = enumerate_triplets(t);
    let idx: Vec<[usize; 3]> = ts.triplets.iter().map(|x| x.nodes()).collect();
    let n = t.n_internal();
    let chunks = 100;
    let counts: Vec<Vec<usize>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = CounterRng::new(seed, c as u64, 0);
            let mut z = vec![0.0; n];
            let mut hits = vec![0; ws.len()];
            for _ in 0..draws / chunks {
                for v in z.iter_mut() {
                    let x: f64 = rng.sample(StandardNormal);
                    *v = x * x;
                }
                let w = idx.iter().map(|i| z[i[0]] + z[i[1]] + z[i[2]]).fold(0.0, f64::max);
                for (k, &wk) in ws.iter().enumerate() {
                    hits[k] += (w > wk) as usize;
                }
            }
            hits
        })
        .collect();
    (0..ws.len()).map(|k| counts.iter().map(|c| c[k]).sum::<usize>() as f64 / draws as f64).collect()
}

const SMALL_TREES: [&str; 6] = [
    "((1,(2,3)),(4,5));",
    "(a,(b,(c,(d,e))));",
    "(a,(b,(c,(d,(e,f)))));",
    "((a,(b,(c,d))),((e,f),(g,h)));",
    "(((a,b),(c,d)),((e,f),(g,h)));",
    "(a,(b,(c,(d,(e,(f,(g,(h,i))))))));",
];

#[test]
fn bounds_bracket_monte_carlo_on_small_trees() {
    let ws = [12.0, 15.0, 20.0, 25.0];
    let draws = 10_000_000;
    for (k, nwk) in SMALL_TREES.iter().enumerate() {
        let t = parse_newick(nwk).unwrap();
        assert!(t.n_internal() <= 8);
        let ts = enumerate_triplets(&t);
        let m = build_partition(&t, &ts);
        let sb = ScanBound::new(&t, &ts, &m).unwrap();
        let mc = mc_exceed(&t, &ws, draws, 60 + k as u64);
        for (i, &w) in ws.iter().enumerate() {
            let r = sb.report(w).unwrap();
            assert!(r.p_m <= r.p_upper && r.p_upper <= 1.0 && r.interval.1 >= r.interval.0);
            assert!(r.p_upper <= sb.bonferroni_baseline(w) + 1e-15, "{nwk} w={w}");
            let se = (mc[i] * (1.0 - mc[i]) / draws as f64).sqrt().max(1.0 / draws as f64);
            assert!(
                mc[i] <= r.p_upper + 3.0 * se && mc[i] >= r.interval.0 - 3.0 * se,
                "{nwk} w={w}: mc {} vs ({}, {})",
                mc[i],
                r.interval.0,
                r.p_upper
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn root_totals_are_conserved(seed in any::<u64>(), k in 2usize..40, counts in proptest::collection::vec(0u64..1000, 40)) {
        let t = random_binary_tree(k, seed).unwrap();
        let row: Vec<u64> = counts[..k].to_vec();
        let agg = aggregate_leaf_rows(&t, &[row.clone()]);
        let root = &agg[0];
        prop_assert_eq!(root.counts[0].iter().sum::<u64>(), row.iter().sum::<u64>());
        for nc in &agg {
            prop_assert_eq!(nc.counts[0].iter().sum::<u64>(), nc.totals()[0]);
        }
    }
}
