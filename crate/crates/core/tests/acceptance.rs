//! End-to-end acceptance checks.  Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use dtmscan::dm::{dm_log_pmf, DmParams};
use dtmscan::dtm::{dm_to_dtm, dtm_log_pmf, lrt_dm_vs_dtm, node_tests};
use dtmscan::scan::{bound_pvalue, build_partition, PartitionM, ScanBound};
use dtmscan::simulation::{
    correlation, ks_uniform, null_calibration, power_study, random_binary_tree, random_dtm_params, sample_dm,
    sample_dtm_table, simulate_null_max, Alternative, CounterRng, Method, Target,
};
use dtmscan::special::ChiSq;
use dtmscan::tree::{enumerate_triplets, parse_newick, PhyloTree, TripletSet};

const FIVE_OTU: &str = "((1,(2,3)),(4,5));";
const CHAIN: &str = "(a,(b,(c,(d,(e,f)))));";
const SIX: &str = "((a,(b,(c,d))),((e,f),(g,h)));";
const TREE_SEED: u64 = 3;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn sf3(w: f64) -> f64 {
    ChiSq::new(3).unwrap().sf(w)
}

/// Fixture tree with its triplets and per-w bound reports, reused across criteria.
struct Fixture {
    name: String,
    tree: PhyloTree,
    triplets: TripletSet,
}

impl Fixture {
    fn newick(name: &str, nwk: &str) -> Self {
        let tree = parse_newick(nwk).unwrap();
        let triplets = enumerate_triplets(&tree);
        Self { name: name.into(), tree, triplets }
    }

    fn random(k: usize) -> Self {
        let tree = random_binary_tree(k, TREE_SEED).unwrap();
        let triplets = enumerate_triplets(&tree);
        Self { name: format!("K={k}"), tree, triplets }
    }
}

fn c1_degenerate() -> Outcome {
    let f = Fixture::newick("five_otu", FIVE_OTU);
    let mut ok = true;
    let mut notes = Vec::new();
    let ws = [8.0, 12.0, 16.0];
    let mc = simulate_null_max(f.tree.n_internal(), &f.triplets, &ws, 100, 100_000, 101).unwrap();
    let (mean, se) = (mc.mean(), mc.pooled_se());
    for (k, &w) in ws.iter().enumerate() {
        let r = bound_pvalue(&f.tree, &f.triplets, w).unwrap();
        let exact = sf3(w);
        let d = (r.p_upper - exact).abs();
        let z = (mean[k] - exact).abs() / se[k];
        ok &= d <= 1e-9 && r.eps_bound == 0.0 && z <= 3.0;
        notes.push(format!("w={w}: |P_U-S3|={d:.1e} eps={} mc_z={z:.2}", r.eps_bound));
    }
    check(ok, notes.join("; "))
}

struct Cell {
    fixture: usize,
    w: f64,
    p_upper: f64,
    eps: f64,
    mc: f64,
    se: f64,
    rate: Option<(f64, bool)>,
}

fn c2_cells(fixtures: &[Fixture]) -> Vec<Cell> {
    let ws = [15.0, 20.0, 25.0];
    let mut cells = Vec::new();
    for (i, f) in fixtures.iter().enumerate() {
        let m = build_partition(&f.tree, &f.triplets);
        let sb = ScanBound::new(&f.tree, &f.triplets, &m).unwrap();
        let mc = simulate_null_max(f.tree.n_internal(), &f.triplets, &ws, 200, 50_000, 202 + i as u64).unwrap();
        let (mean, se) = (mc.mean(), mc.pooled_se());
        for (k, &w) in ws.iter().enumerate() {
            let r = sb.report(w).unwrap();
            let t2 = sb.rate_diagnostics(12.0, w).unwrap();
            cells.push(Cell {
                fixture: i,
                w,
                p_upper: r.p_upper,
                eps: r.eps_bound,
                mc: mean[k],
                se: se[k],
                rate: Some((t2.rate_bound, t2.conditions_met)),
            });
        }
    }
    cells
}

fn c2_figure3(fixtures: &[Fixture], cells: &[Cell]) -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for c in cells {
        let inside = c.mc > c.p_upper - c.eps && c.mc < c.p_upper;
        ok &= inside;
        notes.push(format!(
            "{} w={}: mc={:.4e}±{:.1e} in ({:.4e}, {:.4e}){}",
            fixtures[c.fixture].name,
            c.w,
            c.mc,
            c.se,
            c.p_upper - c.eps,
            c.p_upper,
            if inside { "" } else { " MISS" }
        ));
    }
    check(ok, notes.join("; "))
}

fn c3_rate_diagnostics(fixtures: &[Fixture], cells: &[Cell]) -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    let mut checked = 0;
    for c in cells {
        let (rate, met) = c.rate.unwrap();
        if met {
            checked += 1;
            let gap = c.p_upper - c.mc;
            let allowed = rate * c.p_upper + 3.0 * c.se;
            ok &= gap <= allowed;
            notes.push(format!("{} w={}: gap={gap:.2e} <= {allowed:.2e}", fixtures[c.fixture].name, c.w));
        }
    }
    for (i, f) in fixtures.iter().enumerate() {
        let rate_at = |w: f64| cells.iter().find(|c| c.fixture == i && c.w == w).unwrap().rate.unwrap().0;
        let (r15, r25) = (rate_at(15.0), rate_at(25.0));
        let met_any = cells.iter().any(|c| c.fixture == i && c.rate.unwrap().1);
        ok &= r25 < r15;
        notes.push(format!("{}: rate(15)={r15:.3} rate(25)={r25:.3} conditions_met={met_any}", f.name));
    }
    // the single-block tree meets the conditions with a zero rate
    let five_otu = Fixture::newick("five_otu", FIVE_OTU);
    let r = bound_pvalue(&five_otu.tree, &five_otu.triplets, 16.0).unwrap();
    let t2 = r.rate_diagnostics.unwrap();
    ok &= t2.conditions_met && t2.rate_bound == 0.0 && (r.p_upper - sf3(16.0)).abs() < 1e-12;
    notes.push(format!("five_otu w=16: conditions_met={} rate={}", t2.conditions_met, t2.rate_bound));
    notes.push(format!("{checked} cell(s) under the conditions"));
    check(ok, notes.join("; "))
}

fn block_mc(m: &PartitionM, w: f64, draws: usize, seed: u64) -> f64 {
    let chunks = 20;
    let hits: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = CounterRng::new(seed, c as u64, 0);
            let mut hits = 0;
            for _ in 0..draws / chunks {
                let any = m.blocks.iter().any(|b| {
                    let s: f64 = b
                        .iter()
                        .map(|_| {
                            let x: f64 = rng.sample(StandardNormal);
                            x * x
                        })
                        .sum();
                    s > w
                });
                hits += any as usize;
            }
            hits
        })
        .sum();
    hits as f64 / draws as f64
}

fn c4_partition_closed_form() -> Outcome {
    let mut ok = true;
    let mut worst: f64 = 0.0;
    let draws = 1_000_000;
    for i in 0..20u64 {
        let k = 6 + (i as usize * 7) % 35;
        let t = random_binary_tree(k, 400 + i).unwrap();
        let ts = enumerate_triplets(&t);
        if ts.is_empty() {
            ok = false;
            continue;
        }
        let m = build_partition(&t, &ts);
        m.validate(&ts).unwrap();
        let w = 6.0 + (i % 5) as f64 * 2.0;
        let exact = m.prob_any(w);
        let mc = block_mc(&m, w, draws, 500 + i);
        let se = (exact * (1.0 - exact) / draws as f64).sqrt();
        let z = (mc - exact).abs() / se;
        worst = worst.max(z);
        ok &= z <= 3.0;
    }
    check(ok, format!("20 partitions, worst |mc-P(M)|/se = {worst:.2}"))
}

fn c5_nesting() -> Outcome {
    let mut ok = true;
    // exhaustive pmf equality on three categories
    let t = parse_newick("((a,b),c);").unwrap();
    let mut worst: f64 = 0.0;
    for (pi, nu) in [(vec![0.2, 0.3, 0.5], 1.5), (vec![0.6, 0.1, 0.3], 20.0), (vec![1.0 / 3.0; 3], 0.3)] {
        let dm = DmParams::new(pi, nu).unwrap();
        let dtm = dm_to_dtm(&t, &dm).unwrap();
        for n in 0..=4u64 {
            for x0 in 0..=n {
                for x1 in 0..=n - x0 {
                    let x = [x0, x1, n - x0 - x1];
                    let a = dm_log_pmf(&dm, &x).unwrap().exp();
                    let b = dtm_log_pmf(&t, &dtm, &x).unwrap().exp();
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    ok &= worst <= 1e-12;

    let lambdas: Vec<f64> = (0..100u64)
        .into_par_iter()
        .map(|i| {
            let t = random_binary_tree(4 + (i as usize % 7), 600 + i).unwrap();
            let p = random_dtm_params(&t, 2.0, (2.0, 200.0), 700 + i);
            let rows = sample_dtm_table(&t, &p, 30, (50, 400), 800 + i);
            lrt_dm_vs_dtm(&t, &rows).unwrap().lambda
        })
        .collect();
    let min_lambda = lambdas.iter().copied().fold(f64::INFINITY, f64::min);
    ok &= min_lambda >= 0.0;

    let t = random_binary_tree(8, 900).unwrap();
    let dm = DmParams::new(vec![0.125; 8], 30.0).unwrap();
    let reps = 500;
    let stats: Vec<(f64, u32)> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = CounterRng::new(901, r, 0);
            let rows: Vec<Vec<u64>> = (0..200)
                .map(|_| {
                    let n = rng.random_range(500..=1000);
                    sample_dm(&dm, n, &mut rng)
                })
                .collect();
            let l = lrt_dm_vs_dtm(&t, &rows).unwrap();
            (l.lambda, l.df)
        })
        .collect();
    let mean = stats.iter().map(|s| s.0).sum::<f64>() / reps as f64;
    let df = stats[0].1 as f64;
    let rel = (mean / df - 1.0).abs();
    ok &= df == 6.0 && rel <= 0.15;
    check(
        ok,
        format!("pmf max diff {worst:.1e}; min LRT {min_lambda:.3e} over 100 sets; mean LRT {mean:.3} vs df {df} ({:.1}%)", rel * 100.0),
    )
}

fn c6_independence() -> Outcome {
    let t = random_binary_tree(8, 1000).unwrap();
    assert_eq!(t.n_internal(), 7);
    let params = random_dtm_params(&t, 2.0, (5.0, 200.0), 1001);
    let reps = 5000;
    let groups = vec![(0..200).collect::<Vec<_>>(), (200..400).collect::<Vec<_>>()];
    let per: Vec<Vec<(f64, f64)>> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let rows = sample_dtm_table(&t, &params, 400, (500, 1500), 2000 + r);
            node_tests(&t, &rows, &groups).unwrap().iter().map(|x| (x.p_value, x.z)).collect()
        })
        .collect();
    let mut ok = true;
    let mut worst_ks: f64 = 0.0;
    for a in 0..7 {
        let p: Vec<f64> = per.iter().map(|r| r[a].0).collect();
        worst_ks = worst_ks.max(ks_uniform(&p).distance);
    }
    ok &= worst_ks < 0.05;
    let limit = 3.0 / (reps as f64).sqrt() * 1.5;
    let mut worst_corr: f64 = 0.0;
    for a in 0..7 {
        for b in a + 1..7 {
            let za: Vec<f64> = per.iter().map(|r| r[a].1).collect();
            let zb: Vec<f64> = per.iter().map(|r| r[b].1).collect();
            worst_corr = worst_corr.max(correlation(&za, &zb).abs());
        }
    }
    ok &= worst_corr < limit;
    check(ok, format!("max KS distance {worst_ks:.4} (< 0.05); max |corr| {worst_corr:.4} (< {limit:.4})"))
}

fn c7_calibration() -> Outcome {
    let t = random_binary_tree(50, 1100).unwrap();
    let params = random_dtm_params(&t, 2.0, (5.0, 500.0), 1101);
    let base = sample_dtm_table(&t, &params, 100, (1000, 3000), 1102);
    let c = null_calibration(&t, &base, None, 5000, 1103).unwrap();
    let (dtm, dm) = (c.ks_dtm(), c.ks_dm_otu());
    check(
        dtm.distance < dm.distance,
        format!("KS distance: pooled DTM nodes {:.4} (n={}), DM on OTUs {:.4} (n={})", dtm.distance, dtm.n, dm.distance, dm.n),
    )
}

fn c8_power() -> Outcome {
    let t = random_binary_tree(50, 1200).unwrap();
    let ts = enumerate_triplets(&t);
    let params = random_dtm_params(&t, 2.0, (5.0, 500.0), 1201);
    let base = sample_dtm_table(&t, &params, 100, (1000, 3000), 1202);
    let alts: Vec<Alternative> = [0.5, 1.0, 1.5]
        .iter()
        .map(|&f| Alternative::Subtree { node: Target::Random, fraction: f, min_leaves: 5 })
        .collect();
    let st = power_study(&t, &ts, &base, &alts, &Method::ALL, 1000, 0.05, 1203).unwrap();
    let mut ok = true;
    let mut notes = Vec::new();
    for s in &st {
        let dm = s.power_of(Method::DmOtu).unwrap();
        let one = s.power_of(Method::OneNodeMax).unwrap();
        let scan = s.power_of(Method::TripletScan).unwrap();
        ok &= scan >= one - 0.02 && one >= dm - 0.02;
        notes.push(format!("{}: dm={dm:.3} 1node={one:.3} scan={scan:.3}", s.alternative.label()));
    }
    check(ok, notes.join("; "))
}

fn c9_threshold(fixtures: &[Fixture]) -> Outcome {
    let alpha = 0.05;
    let mut ok = true;
    let mut notes = Vec::new();
    let extra = [Fixture::newick("five_otu", FIVE_OTU), Fixture::newick("chain", CHAIN), Fixture::newick("six", SIX)];
    for f in extra.iter().chain(fixtures) {
        let m = build_partition(&f.tree, &f.triplets);
        let sb = ScanBound::new(&f.tree, &f.triplets, &m).unwrap();
        let th = sb.solve_threshold(alpha).unwrap();
        let r = bound_pvalue(&f.tree, &f.triplets, th.w).unwrap();
        let d = (r.p_upper - alpha).abs();
        ok &= d <= 1e-4 * alpha;
        notes.push(format!("{}: w={:.4} |P_U-a|={d:.1e}", f.name, th.w));
    }
    check(ok, notes.join("; "))
}

fn c10_special() -> Outcome {
    let mut ok = true;
    let mut rt: f64 = 0.0;
    let mut fd: f64 = 0.0;
    for df in 1..=3 {
        let c = ChiSq::new(df).unwrap();
        for i in 1..=999 {
            let p = i as f64 / 1000.0;
            rt = rt.max((c.cdf(c.quantile(p).unwrap()) - p).abs());
        }
        let h = 1e-5;
        let mut x = 0.5;
        while x <= 40.0 {
            let d = (c.cdf(x + h) - c.cdf(x - h)) / (2.0 * h);
            fd = fd.max((d - c.pdf(x)).abs());
            x += 0.25;
        }
    }
    ok &= rt <= 1e-9 && fd <= 1e-6;
    let mut ineq = true;
    let mut w = 12.0;
    while w <= 60.0 {
        ineq &= sf3(w) > (2.0 * w / std::f64::consts::PI).sqrt() * (-w / 2.0).exp();
        w += 0.5;
    }
    ok &= ineq;
    check(ok, format!("round trip {rt:.1e}; derivative {fd:.1e}; tail inequality on [12, 60]: {ineq}"))
}

fn report(n: usize, name: &str, limit: Duration, run: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = run();
    let took = start.elapsed();
    let pass = o.pass && took <= limit;
    println!(
        "criterion {n:>2} {name}: {} ({:.1}s, limit {}s) {}",
        if pass { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        limit.as_secs(),
        o.detail
    );
    pass
}

fn main() {
    let mins = |m: u64| Duration::from_secs(60 * m);
    let mut all = true;
    all &= report(1, "single-block bound", mins(1), c1_degenerate);
    let fixtures = [Fixture::random(50), Fixture::random(100)];
    let mut cells = Vec::new();
    all &= report(2, "bracket vs Monte Carlo", mins(30), || {
        cells = c2_cells(&fixtures);
        c2_figure3(&fixtures, &cells)
    });
    all &= report(3, "overshoot rate", mins(30), || c3_rate_diagnostics(&fixtures, &cells));
    all &= report(4, "P(M) closed form", mins(2), c4_partition_closed_form);
    all &= report(5, "DM nested in DTM", mins(10), c5_nesting);
    all &= report(6, "node-test independence", mins(20), c6_independence);
    all &= report(7, "null calibration", mins(20), c7_calibration);
    all &= report(8, "power ordering", mins(30), c8_power);
    all &= report(9, "threshold solver", mins(5), || c9_threshold(&fixtures));
    all &= report(10, "special functions", mins(1), c10_special);
    println!("acceptance: {}", if all { "all criteria pass" } else { "some criteria FAIL" });
    if !all {
        std::process::exit(1);
    }
}
