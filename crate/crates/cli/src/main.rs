use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use dtmscan::dm::mom_test;
use dtmscan::dtm::{fwer_reject, lrt_dm_vs_dtm, node_tests, sidak_global, uniform_sidak_alpha, validate_alpha_allocation, NodeTestResult};
use dtmscan::error::Error;
use dtmscan::io::{GroupRule, Metadata, Taxonomy};
use dtmscan::scan::{build_partition, scan_from_results, ScanBound};
use dtmscan::simulation::{
    null_calibration, power_study, power_tsv, random_binary_tree, random_dtm_params, sample_dtm_table, simulate_null_max,
    Alternative, Method, Target,
};
use dtmscan::tree::{enumerate_triplets, group_by_rank, label_internal_taxa, leaf_ordered_rows, parse_newick, PhyloTree};
use dtmscan::CountTable;

#[derive(Parser)]
#[command(name = "dtmscan", version, about = "Tree-structured count tests and the triplet scan statistic")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Tsv,
}

#[derive(Subcommand)]
enum Command {
    /// Node tests, triplet scan and the bound on its p-value.
    Scan {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Exit with status 2 when the scan is significant.
        #[arg(long)]
        exit_signal: bool,
    },
    /// Per-node moment tests with a Sidak global p-value.
    NodeTests {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Per-node significance levels, one `node<TAB>alpha` line each.
        #[arg(long)]
        alpha_allocation: Option<PathBuf>,
    },
    /// Dirichlet-multinomial moment test on the OTU table.
    Dm {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Likelihood ratio of a single DM against the DTM on the tree.
    Lrt {
        #[arg(long)]
        counts: PathBuf,
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        transpose: bool,
    },
    #[command(subcommand)]
    Simulate(Simulate),
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    counts: PathBuf,
    #[arg(long)]
    tree: Option<PathBuf>,
    #[arg(long)]
    metadata: PathBuf,
    #[arg(long)]
    group_column: String,
    /// Two-way numeric split of the group column, e.g. `<3`.
    #[arg(long)]
    binarize: Option<String>,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// Pool OTUs at this taxonomy rank (dm only).
    #[arg(long)]
    rank: Option<String>,
    /// Counts file has OTUs as rows.
    #[arg(long)]
    transpose: bool,
}

#[derive(Args)]
struct TreeSource {
    #[arg(long, conflicts_with = "leaves")]
    tree: Option<PathBuf>,
    /// Leaves of a random binary tree.
    #[arg(long)]
    leaves: Option<usize>,
    #[arg(long, default_value_t = 1)]
    tree_seed: u64,
}

#[derive(Args)]
struct TableSource {
    #[command(flatten)]
    tree: TreeSource,
    /// Base counts; a synthetic DTM table is drawn when absent.
    #[arg(long)]
    counts: Option<PathBuf>,
    #[arg(long)]
    transpose: bool,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 500)]
    min_depth: u64,
    #[arg(long, default_value_t = 2000)]
    max_depth: u64,
    /// Range of node dispersions ν for the synthetic table.
    #[arg(long, num_args = 2, default_values_t = [5.0, 500.0])]
    nu_range: Vec<f64>,
}

#[derive(Subcommand)]
enum Simulate {
    /// Null exceedance of the scan statistic from χ²₁ node values.
    NullMax {
        #[command(flatten)]
        tree: TreeSource,
        #[arg(long, value_delimiter = ',', default_values_t = [15.0, 20.0, 25.0])]
        w: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        replicates: usize,
        #[arg(long, default_value_t = 50_000)]
        draws: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// p-value distributions under random equal splits.
    Calibration {
        #[command(flatten)]
        table: TableSource,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long)]
        rank: Option<String>,
        #[arg(long, default_value_t = 1000)]
        replicates: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Power of the DM, single-node and triplet-scan statistics.
    Power {
        #[command(flatten)]
        table: TableSource,
        /// 1 bumps one OTU, 2 bumps every OTU under an internal node.
        #[arg(long, default_value_t = 2)]
        strategy: u8,
        /// OTU leaf index or internal index; random when absent.
        #[arg(long)]
        target: Option<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [1.0])]
        increment: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        min_leaves: usize,
        #[arg(long, default_value_t = 0.05)]
        fpr: f64,
        #[arg(long, default_value_t = 500)]
        replicates: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

enum Outcome {
    Done(Output),
    Signal(Output),
}

struct Output {
    json: Value,
    tsv: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            return fail(&format!("thread pool: {e}"), "config");
        }
    }
    let result = match cli.command {
        Command::Scan { data, alpha, exit_signal } => cmd_scan(&data, alpha, exit_signal),
        Command::NodeTests { data, alpha, alpha_allocation } => cmd_node_tests(&data, alpha, alpha_allocation.as_deref()),
        Command::Dm { data } => cmd_dm(&data),
        Command::Lrt { counts, tree, transpose } => cmd_lrt(&counts, &tree, transpose),
        Command::Simulate(s) => cmd_simulate(s),
    };
    let (out, code) = match result {
        Ok(Outcome::Done(o)) => (o, ExitCode::SUCCESS),
        Ok(Outcome::Signal(o)) => (o, ExitCode::from(2)),
        Err(e) => return fail(&e.to_string(), kind(&e)),
    };
    let text = match cli.format {
        Format::Json => serde_json::to_string_pretty(&out.json).expect("serializable") + "\n",
        Format::Tsv => out.tsv,
    };
    if let Err(e) = emit(cli.out.as_deref(), &text) {
        return fail(&format!("writing output: {e}"), "io");
    }
    code
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Parse { .. } => "parse",
        Error::NameMismatch { .. } => "name_mismatch",
        Error::NonBinaryTree { .. } => "non_binary_tree",
        Error::NoTriplets => "no_triplets",
        Error::InvalidConfig(_) => "config",
        Error::InsufficientData(_) | Error::Degenerate(_) => "data",
        _ => "input",
    }
}

fn fail(message: &str, kind: &str) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
    ExitCode::from(1)
}

/// Writes to a temporary file next to `path` and renames it into place.
fn emit(path: Option<&Path>, text: &str) -> std::io::Result<()> {
    let Some(path) = path else {
        return std::io::stdout().write_all(text.as_bytes());
    };
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(text.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>, Error> {
    File::open(path).map(BufReader::new).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn read_tree(path: &Path) -> Result<PhyloTree, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    parse_newick(&text)
}

fn sig6(x: f64) -> String {
    format!("{x:.5e}")
}

struct Loaded {
    table: CountTable,
    tree: Option<PhyloTree>,
    taxonomy: Option<Taxonomy>,
    labels: Vec<String>,
    groups: Vec<Vec<usize>>,
}

fn load(data: &DataArgs) -> Result<Loaded, Error> {
    let table = CountTable::read_tsv(open(&data.counts)?, data.transpose)?;
    let tree = data.tree.as_deref().map(read_tree).transpose()?;
    let taxonomy = data.taxonomy.as_deref().map(|p| Taxonomy::read_tsv(open(p)?)).transpose()?;
    let meta = Metadata::read_tsv(open(&data.metadata)?)?;
    let rule = data.binarize.as_deref().map(str::parse::<GroupRule>).transpose()?;
    let grouped = meta.groups(table.sample_ids(), &data.group_column, rule.as_ref())?;
    if grouped.len() < 2 {
        return Err(Error::InsufficientData(format!("group column `{}` yields {} group(s); need 2", data.group_column, grouped.len())));
    }
    if let Some((label, g)) = grouped.iter().find(|(_, g)| g.len() < 2) {
        return Err(Error::InsufficientData(format!("group `{label}` has {} sample(s); need 2", g.len())));
    }
    let (labels, groups) = grouped.into_iter().unzip();
    Ok(Loaded { table, tree, taxonomy, labels, groups })
}

fn require_tree(l: &Loaded) -> Result<&PhyloTree, Error> {
    l.tree.as_ref().ok_or_else(|| Error::InvalidConfig("--tree is required".into()))
}

fn group_summary(l: &Loaded) -> Value {
    l.labels.iter().zip(&l.groups).map(|(k, g)| json!({ "label": k, "samples": g.len() })).collect()
}

#[derive(Serialize)]
struct NodeRow<'a> {
    #[serde(flatten)]
    result: &'a NodeTestResult,
    leaves: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    taxon: Option<String>,
}

fn node_rows<'a>(tree: &PhyloTree, res: &'a [NodeTestResult], taxonomy: Option<&Taxonomy>) -> Vec<NodeRow<'a>> {
    let labels = taxonomy.map(|t| label_internal_taxa(tree, t));
    res.iter()
        .map(|r| NodeRow {
            result: r,
            leaves: tree.leaves_under(tree.internal_node(r.node)).len(),
            taxon: labels.as_ref().map(|l| l[r.node].to_string()),
        })
        .collect()
}

fn node_tsv(rows: &[NodeRow]) -> String {
    let mut s = String::from("node\tleaves\tstatistic\tdf\tp_value\tz\ttaxon\tskipped\n");
    for r in rows {
        let x = r.result;
        s += &format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            x.node,
            r.leaves,
            x.statistic,
            x.df,
            sig6(x.p_value),
            x.z,
            r.taxon.as_deref().unwrap_or(""),
            x.skipped.as_deref().unwrap_or("")
        );
    }
    s
}

fn cmd_scan(data: &DataArgs, alpha: f64, exit_signal: bool) -> Result<Outcome, Error> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let l = load(data)?;
    let tree = require_tree(&l)?;
    tree.require_binary()?;
    let rows = leaf_ordered_rows(tree, &l.table)?;
    let res = node_tests(tree, &rows, &l.groups)?;
    let triplets = enumerate_triplets(tree);
    let scan = scan_from_results(&res, &triplets)?;
    let partition = build_partition(tree, &triplets);
    let sb = ScanBound::new(tree, &triplets, &partition)?;
    let mut report = sb.report(scan.max)?;
    if scan.max >= 12.0 {
        report.rate_diagnostics = Some(sb.rate_diagnostics(12.0, scan.max)?);
    }
    let threshold = sb.solve_threshold(alpha)?;
    let significant: Vec<Value> = scan
        .w
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > threshold.w)
        .map(|(i, &w)| {
            let t = triplets.triplets[i];
            json!({ "triplet": i, "parent": t.parent, "middle": t.middle, "child": t.child, "w": w })
        })
        .collect();
    let sidak = sidak_global(&res);
    let is_sig = report.p_upper < alpha;
    let rows_out = node_rows(tree, &res, l.taxonomy.as_ref());
    let json = json!({
        "groups": group_summary(&l),
        "nodes": rows_out,
        "scan": {
            "w": scan.max,
            "argmax": scan.argmax,
            "triplet": scan.triplet,
            "triplet_statistics": scan.w,
        },
        "partition": partition,
        "bound": report,
        "threshold": threshold,
        "significant_triplets": significant,
        "sidak_p_value": sidak,
        "significant": is_sig,
        "summary": {
            "w": format!("{:.6}", scan.max),
            "p_upper": sig6(report.p_upper),
            "eps_bound": sig6(report.eps_bound),
            "interval": [sig6(report.interval.0), sig6(report.interval.1)],
            "threshold_w": format!("{:.6}", threshold.w),
            "sidak_p_value": sig6(sidak),
        },
    });
    let mut tsv = String::from("metric\tvalue\n");
    tsv += &format!("w\t{}\n", scan.max);
    tsv += &format!("p_upper\t{}\n", sig6(report.p_upper));
    tsv += &format!("eps_bound\t{}\n", sig6(report.eps_bound));
    tsv += &format!("interval_low\t{}\n", sig6(report.interval.0));
    tsv += &format!("interval_high\t{}\n", sig6(report.interval.1));
    tsv += &format!("threshold_w\t{}\n", threshold.w);
    tsv += &format!("significant_triplets\t{}\n", significant.len());
    tsv += &format!("sidak_p_value\t{}\n", sig6(sidak));
    let out = Output { json, tsv };
    Ok(if exit_signal && is_sig { Outcome::Signal(out) } else { Outcome::Done(out) })
}

fn read_alpha_allocation(path: &Path, n_internal: usize) -> Result<Vec<f64>, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let mut alphas = vec![f64::NAN; n_internal];
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cells = line.split('\t');
        let (Some(a), Some(v)) = (cells.next(), cells.next()) else {
            return Err(Error::Input(format!("alpha allocation line {}: expected node<TAB>alpha", k + 1)));
        };
        let (Ok(a), Ok(v)) = (a.trim().parse::<usize>(), v.trim().parse::<f64>()) else {
            if k == 0 {
                continue; // header
            }
            return Err(Error::Input(format!("alpha allocation line {}: cannot parse `{line}`", k + 1)));
        };
        if a >= n_internal {
            return Err(Error::Input(format!("alpha allocation names node {a}, tree has {n_internal}")));
        }
        alphas[a] = v;
    }
    if let Some(a) = alphas.iter().position(|x| x.is_nan()) {
        return Err(Error::Input(format!("alpha allocation has no entry for node {a}")));
    }
    Ok(alphas)
}

fn cmd_node_tests(data: &DataArgs, alpha: f64, allocation: Option<&Path>) -> Result<Outcome, Error> {
    let l = load(data)?;
    let tree = require_tree(&l)?;
    let rows = leaf_ordered_rows(tree, &l.table)?;
    let res = node_tests(tree, &rows, &l.groups)?;
    let alphas = match allocation {
        Some(p) => {
            let a = read_alpha_allocation(p, tree.n_internal())?;
            validate_alpha_allocation(&a, alpha, 1e-9)?;
            a
        }
        None => vec![uniform_sidak_alpha(alpha, tree.n_internal()); tree.n_internal()],
    };
    let reject = fwer_reject(&res, &alphas);
    let sidak = sidak_global(&res);
    let out_rows = node_rows(tree, &res, l.taxonomy.as_ref());
    let json = json!({
        "groups": group_summary(&l),
        "nodes": out_rows,
        "node_alpha": alphas,
        "rejected": reject,
        "sidak_p_value": sidak,
        "summary": { "sidak_p_value": sig6(sidak) },
    });
    let tsv = node_tsv(&out_rows) + &format!("# sidak_p_value\t{}\n", sig6(sidak));
    Ok(Outcome::Done(Output { json, tsv }))
}

fn cmd_dm(data: &DataArgs) -> Result<Outcome, Error> {
    let l = load(data)?;
    let table = match (&data.rank, &l.taxonomy) {
        (Some(rank), Some(tax)) => group_by_rank(&l.table, tax, rank)?,
        (Some(_), None) => return Err(Error::InvalidConfig("--rank needs --taxonomy".into())),
        _ => l.table.clone(),
    };
    let per: Vec<Vec<&Vec<u64>>> = l.groups.iter().map(|g| g.iter().map(|&i| &table.rows()[i]).collect()).collect();
    let slices: Vec<&[&Vec<u64>]> = per.iter().map(Vec::as_slice).collect();
    let r = mom_test(&slices)?;
    let json = json!({
        "groups": group_summary(&l),
        "categories": table.n_categories(),
        "test": r,
        "summary": { "statistic": format!("{:.6}", r.statistic), "p_value": sig6(r.p_value) },
    });
    let tsv = format!("metric\tvalue\nstatistic\t{}\ndf\t{}\np_value\t{}\n", r.statistic, r.df, sig6(r.p_value));
    Ok(Outcome::Done(Output { json, tsv }))
}

fn cmd_lrt(counts: &Path, tree: &Path, transpose: bool) -> Result<Outcome, Error> {
    let table = CountTable::read_tsv(open(counts)?, transpose)?;
    let tree = read_tree(tree)?;
    tree.require_binary()?;
    let rows = leaf_ordered_rows(&tree, &table)?;
    let r = lrt_dm_vs_dtm(&tree, &rows)?;
    let json = json!({
        "lrt": r,
        "summary": { "lambda": format!("{:.6}", r.lambda), "p_value": sig6(r.p_value) },
    });
    let tsv = format!("metric\tvalue\nlambda\t{}\ndf\t{}\np_value\t{}\n", r.lambda, r.df, sig6(r.p_value));
    Ok(Outcome::Done(Output { json, tsv }))
}

fn tree_from(src: &TreeSource) -> Result<PhyloTree, Error> {
    match (&src.tree, src.leaves) {
        (Some(p), _) => read_tree(p),
        (None, Some(k)) => random_binary_tree(k, src.tree_seed),
        (None, None) => Err(Error::InvalidConfig("give --tree or --leaves".into())),
    }
}

fn base_table(src: &TableSource, seed: u64) -> Result<(PhyloTree, Vec<Vec<u64>>), Error> {
    let tree = tree_from(&src.tree)?;
    let rows = match &src.counts {
        Some(p) => leaf_ordered_rows(&tree, &CountTable::read_tsv(open(p)?, src.transpose)?)?,
        None => {
            if src.min_depth == 0 || src.min_depth > src.max_depth {
                return Err(Error::InvalidConfig("depth range must satisfy 0 < min-depth <= max-depth".into()));
            }
            let (lo, hi) = (src.nu_range[0], src.nu_range[1]);
            if !(lo > 0.0 && hi >= lo) {
                return Err(Error::InvalidConfig("nu range must satisfy 0 < low <= high".into()));
            }
            let params = random_dtm_params(&tree, 2.0, (lo, hi), seed);
            sample_dtm_table(&tree, &params, src.samples, (src.min_depth, src.max_depth), seed)
        }
    };
    Ok((tree, rows))
}

fn cmd_simulate(s: Simulate) -> Result<Outcome, Error> {
    match s {
        Simulate::NullMax { tree, w, replicates, draws, seed } => {
            let t = tree_from(&tree)?;
            let ts = enumerate_triplets(&t);
            let r = simulate_null_max(t.n_internal(), &ts, &w, replicates, draws, seed)?;
            let json = json!({
                "ws": r.ws,
                "mean_exceedance": r.mean(),
                "standard_error": r.pooled_se(),
                "replicates": replicates,
                "draws": draws,
                "exceedance": r.exceed,
            });
            Ok(Outcome::Done(Output { json, tsv: r.to_tsv() }))
        }
        Simulate::Calibration { table, taxonomy, rank, replicates, seed } => {
            let (t, rows) = base_table(&table, seed)?;
            let rank_columns = match (taxonomy, rank) {
                (Some(p), Some(rank)) => {
                    let tax = Taxonomy::read_tsv(open(&p)?)?;
                    let names: Vec<String> = (0..rows.len()).map(|i| i.to_string()).collect();
                    let ct = CountTable::new(names, t.leaf_names().to_vec(), rows.clone())?;
                    let grouped = group_by_rank(&ct, &tax, &rank)?;
                    let r = tax.rank_index(&rank).expect("rank checked above");
                    let mut cols = vec![Vec::new(); grouped.n_categories()];
                    for (j, otu) in t.leaf_names().iter().enumerate() {
                        let taxon = tax.lineage(otu).and_then(|l| l.get(r).cloned().flatten());
                        let name = taxon.unwrap_or_else(|| dtmscan::tree::UNCLASSIFIED.to_string());
                        let k = grouped.categories().iter().position(|c| *c == name).expect("category present");
                        cols[k].push(j);
                    }
                    Some(cols)
                }
                (None, None) => None,
                _ => return Err(Error::InvalidConfig("--taxonomy and --rank go together".into())),
            };
            let c = null_calibration(&t, &rows, rank_columns.as_deref(), replicates, seed)?;
            let json = json!({
                "ks_dm_otu": c.ks_dm_otu(),
                "ks_dm_rank": c.ks_dm_rank(),
                "ks_dtm_nodes": c.ks_dtm(),
                "dm_otu_p_values": c.dm_otu,
                "dm_rank_p_values": c.dm_rank,
                "dtm_node_p_values": c.dtm_by_node,
            });
            Ok(Outcome::Done(Output { json, tsv: c.to_tsv() }))
        }
        Simulate::Power { table, strategy, target, increment, min_leaves, fpr, replicates, seed } => {
            let (t, rows) = base_table(&table, seed)?;
            let ts = enumerate_triplets(&t);
            let tgt = target.map_or(Target::Random, Target::Fixed);
            let alts = increment
                .iter()
                .map(|&f| {
                    if !(f > 0.0) {
                        return Err(Error::InvalidConfig(format!("increment must be positive, got {f}")));
                    }
                    match strategy {
                        1 => Ok(Alternative::SingleOtu { otu: tgt, fraction: f }),
                        2 => Ok(Alternative::Subtree { node: tgt, fraction: f, min_leaves }),
                        s => Err(Error::InvalidConfig(format!("strategy must be 1 or 2, got {s}"))),
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            let studies = power_study(&t, &ts, &rows, &alts, &Method::ALL, replicates, fpr, seed)?;
            let json = json!({
                "power": studies.iter().map(|s| json!({
                    "alternative": s.alternative,
                    "label": s.alternative.label(),
                    "fpr": s.fpr,
                    "methods": s.methods.iter().map(|m| json!({
                        "method": m.method.name(),
                        "threshold": m.threshold,
                        "power": m.power,
                        "roc": m.roc,
                    })).collect::<Vec<_>>(),
                })).collect::<Vec<_>>(),
            });
            Ok(Outcome::Done(Output { json, tsv: power_tsv(&studies) }))
        }
    }
}
