use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dtmscan::dm::DmParams;
use dtmscan::scan::BoundReport;
use dtmscan::simulation::{random_binary_tree, random_dtm_params, sample_dm, sample_dtm_table, CounterRng};
use dtmscan::tree::{enumerate_triplets, label_internal_taxa, parse_newick};
use dtmscan::io::Taxonomy;
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dtmscan"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn json_of(out: &Output) -> Value {
    assert!(out.status.success() || out.status.code() == Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json output")
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> String {
        let p = self.path(name);
        std::fs::write(&p, text).unwrap();
        p.to_str().unwrap().to_string()
    }

    /// Writes counts and a two-group metadata table; the first `n_a` rows are group `a`.
    fn table(&self, leaves: &[String], rows: &[Vec<u64>], n_a: usize) -> (String, String) {
        let mut c = String::from("sample");
        for l in leaves {
            c += &format!("\t{l}");
        }
        c.push('\n');
        let mut m = String::from("sample\tgroup\tscore\n");
        for (i, r) in rows.iter().enumerate() {
            c += &format!("s{i}");
            for x in r {
                c += &format!("\t{x}");
            }
            c.push('\n');
            m += &format!("s{i}\t{}\t{}\n", if i < n_a { "a" } else { "b" }, i % 5);
        }
        (self.write("counts.tsv", &c), self.write("meta.tsv", &m))
    }
}

fn args<'a>(cmd: &'a str, counts: &'a str, tree: &'a str, meta: &'a str) -> Vec<&'a str> {
    vec![cmd, "--counts", counts, "--tree", tree, "--metadata", meta, "--group-column", "group"]
}

fn names(k: usize) -> Vec<String> {
    (1..=k).map(|i| i.to_string()).collect()
}

#[test]
fn identical_groups_give_no_signal() {
    let f = Fixture::new();
    let tree = f.write("t.nwk", "((1,(2,3)),((4,5),6));");
    let mut rng = CounterRng::new(3, 0, 0);
    let p = DmParams { pi: vec![1.0 / 6.0; 6], nu: 50.0 };
    let half: Vec<Vec<u64>> = (0..10).map(|_| sample_dm(&p, 500, &mut rng)).collect();
    let rows: Vec<Vec<u64>> = half.iter().chain(&half).cloned().collect();
    let (counts, meta) = f.table(&names(6), &rows, 10);
    let v = json_of(&run(&args("scan", &counts, &tree, &meta)));
    assert!(v["bound"]["p_upper"].as_f64().unwrap() > 0.99);
    assert_eq!(v["significant_triplets"].as_array().unwrap().len(), 0);
    assert_eq!(v["significant"], false);

    let v = json_of(&run(&["dm", "--counts", &counts, "--metadata", &meta, "--group-column", "group"]));
    assert!(v["test"]["statistic"].as_f64().unwrap().abs() < 1e-9);
    assert!((v["test"]["p_value"].as_f64().unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn signal_outside_every_triplet_is_not_scanned() {
    // mass moves from leaf 5 to leaf 4, so only the {4,5} split differs
    let f = Fixture::new();
    let tree = f.write("t.nwk", "((1,(2,3)),(4,5));");
    let mut rng = CounterRng::new(5, 0, 0);
    let a = DmParams { pi: vec![0.2; 5], nu: 200.0 };
    let b = DmParams { pi: vec![0.2, 0.2, 0.2, 0.3, 0.1], nu: 200.0 };
    let rows: Vec<Vec<u64>> =
        (0..40).map(|i| sample_dm(if i < 20 { &a } else { &b }, 1000, &mut rng)).collect();
    let (counts, meta) = f.table(&names(5), &rows, 20);
    let v = json_of(&run(&args("scan", &counts, &tree, &meta)));
    assert_eq!(v["significant_triplets"].as_array().unwrap().len(), 0);
    let nodes = v["nodes"].as_array().unwrap();
    // internal index 3 is {4,5}
    assert!(nodes[3]["p_value"].as_f64().unwrap() < 1e-6);
    assert!(v["sidak_p_value"].as_f64().unwrap() < 1e-5);
}

fn subtree_bump_fixture(f: &Fixture) -> (String, String, String) {
    let t = random_binary_tree(100, 7).unwrap();
    let params = random_dtm_params(&t, 2.0, (50.0, 500.0), 7);
    let mut rows = sample_dtm_table(&t, &params, 60, (2000, 4000), 7);
    let node = (1..t.n_internal())
        .find(|&a| {
            let n = t.leaves_under(t.internal_node(a)).len();
            (5..=15).contains(&n)
        })
        .unwrap();
    for row in rows.iter_mut().skip(30) {
        for j in t.leaves_under(t.internal_node(node)) {
            row[j] *= 3;
        }
    }
    let tree = f.write("t.nwk", &t.to_newick());
    let (counts, meta) = f.table(t.leaf_names(), &rows, 30);
    (tree, counts, meta)
}

#[test]
fn subtree_bump_is_detected_and_reports_round_trip() {
    let f = Fixture::new();
    let (tree, counts, meta) = subtree_bump_fixture(&f);
    let mut a = args("scan", &counts, &tree, &meta);
    a.push("--exit-signal");
    let out = run(&a);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json_of(&out);
    let report: BoundReport = serde_json::from_value(v["bound"].clone()).unwrap();
    assert!(report.p_upper < 0.05);
    assert!(!v["significant_triplets"].as_array().unwrap().is_empty());
    // full-precision fields reproduce the in-memory report
    let t = parse_newick(&std::fs::read_to_string(&tree).unwrap()).unwrap();
    let ts = enumerate_triplets(&t);
    let m = dtmscan::scan::build_partition(&t, &ts);
    let direct = dtmscan::scan::ScanBound::new(&t, &ts, &m).unwrap().report(report.w).unwrap();
    assert_eq!(direct.p_upper, report.p_upper);
    assert_eq!(direct.eps_bound, report.eps_bound);
    assert_eq!(direct.terms, report.terms);
    let text = serde_json::to_string(&report).unwrap();
    assert_eq!(serde_json::from_str::<BoundReport>(&text).unwrap(), report);
}

#[test]
fn node_tests_rows_labels_and_allocation() {
    let f = Fixture::new();
    let nwk = "(((o1,o2),(o3,o4)),((o5,o6),(o7,o8)));";
    let tree = f.write("t.nwk", nwk);
    let mut rng = CounterRng::new(9, 0, 0);
    let p = DmParams { pi: vec![0.125; 8], nu: 30.0 };
    let rows: Vec<Vec<u64>> = (0..16).map(|_| sample_dm(&p, 400, &mut rng)).collect();
    let leaves: Vec<String> = (1..=8).map(|i| format!("o{i}")).collect();
    let (counts, meta) = f.table(&leaves, &rows, 8);
    let tax_text = "otu_id\tphylum\tgenus\n\
        o1\tP1\tG1\no2\tP1\tG1\no3\tP1\tG2\no4\tP1\t\n\
        o5\tP2\tG3\no6\tP2\tG3\no7\tP2\tG4\no8\tP3\tG5\n";
    let tax = f.write("tax.tsv", tax_text);
    let mut a = args("node-tests", &counts, &tree, &meta);
    a.extend(["--taxonomy", tax.as_str()]);
    let v = json_of(&run(&a));
    let nodes = v["nodes"].as_array().unwrap();
    let t = parse_newick(nwk).unwrap();
    assert_eq!(nodes.len(), t.n_internal());
    let taxonomy = Taxonomy::read_tsv(tax_text.as_bytes()).unwrap();
    let expect = label_internal_taxa(&t, &taxonomy);
    for (n, e) in nodes.iter().zip(&expect) {
        assert_eq!(n["taxon"].as_str().unwrap(), e.to_string());
    }

    // 1 − (1 − 0.05)^(1/7) per node satisfies the constraint
    let each = 1.0 - 0.95f64.powf(1.0 / 7.0);
    let good: String = (0..7).map(|a| format!("{a}\t{each}\n")).collect();
    let good = f.write("alloc.tsv", &good);
    let mut a = args("node-tests", &counts, &tree, &meta);
    a.extend(["--alpha-allocation", good.as_str()]);
    assert!(run(&a).status.success());
    let bad: String = (0..7).map(|a| format!("{a}\t0.01\n")).collect();
    let bad = f.write("bad.tsv", &bad);
    let mut a = args("node-tests", &counts, &tree, &meta);
    a.extend(["--alpha-allocation", bad.as_str()]);
    let out = run(&a);
    assert_eq!(out.status.code(), Some(1));
    // 1 − 0.99^7
    let product = format!("{}", 1.0 - 0.99f64.powi(7));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&product[..6]), "{err}");
}

#[test]
fn lrt_degrees_of_freedom() {
    let f = Fixture::new();
    let t = random_binary_tree(8, 2).unwrap();
    let tree = f.write("t.nwk", &t.to_newick());
    let params = random_dtm_params(&t, 2.0, (10.0, 100.0), 2);
    let rows = sample_dtm_table(&t, &params, 50, (300, 600), 2);
    let (counts, _) = f.table(t.leaf_names(), &rows, 25);
    let v = json_of(&run(&["lrt", "--counts", &counts, "--tree", &tree]));
    assert_eq!(v["lrt"]["df"], 6);
    assert!(v["lrt"]["lambda"].as_f64().unwrap() >= 0.0);
}

#[test]
fn null_max_output_is_deterministic() {
    let f = Fixture::new();
    let go = |threads: &str, out: &Path| {
        let o = run(&[
            "simulate", "null-max", "--leaves", "30", "--w", "10,15", "--replicates", "4", "--draws", "2000", "--seed", "11",
            "--format", "tsv", "--threads", threads, "--out", out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out).unwrap()
    };
    let a = go("1", &f.path("a.tsv"));
    let b = go("1", &f.path("b.tsv"));
    let c = go("3", &f.path("c.tsv"));
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert!(String::from_utf8(a).unwrap().starts_with("method\tparameter\tmetric\tvalue\n"));
}

#[test]
fn simulate_power_and_calibration_run() {
    let o = run(&[
        "simulate", "power", "--leaves", "12", "--samples", "20", "--replicates", "20", "--increment", "1,2", "--min-leaves", "3",
    ]);
    let v = json_of(&o);
    assert_eq!(v["power"].as_array().unwrap().len(), 2);
    assert_eq!(v["power"][0]["methods"].as_array().unwrap().len(), 3);
    let o = run(&["simulate", "calibration", "--leaves", "12", "--samples", "20", "--replicates", "20"]);
    let v = json_of(&o);
    assert!(v["ks_dtm_nodes"]["distance"].as_f64().unwrap() <= 1.0);
    let o = run(&["simulate", "power", "--leaves", "12", "--increment", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_input_leaves_no_output_file() {
    let f = Fixture::new();
    let tree = f.write("t.nwk", "((1,(2,3)),(4,5);");
    let (counts, meta) = f.table(&names(5), &[vec![1, 2, 3, 4, 5], vec![5, 4, 3, 2, 1], vec![1; 5], vec![2; 5]], 2);
    let out_path = f.path("out.json");
    let mut a = args("scan", &counts, &tree, &meta);
    a.extend(["--out", out_path.to_str().unwrap()]);
    let o = run(&a);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out_path.exists());
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "parse");
    assert!(std::fs::read_dir(f.dir.path()).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().starts_with(".tmp")));

    // a single group is rejected
    let tree = f.write("t2.nwk", "((1,(2,3)),(4,5));");
    let o = run(&["scan", "--counts", &counts, "--tree", &tree, "--metadata", &meta, "--group-column", "score", "--binarize", ">=100"]);
    assert_eq!(o.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "data");
}
