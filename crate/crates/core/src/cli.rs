//! Command-line front end. The binary only forwards to [`main_with`].
//!
//! Exit status is 0 on success, 2 for invalid input or configuration and 3
//! for numerical failures. `INFOTRACE_THREADS` sizes the worker pool.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::baselines::{grad_dot, rep_sim};
use crate::criteria::relatif_ranking;
use crate::error::{Error, Result};
use crate::gp::NoiseModel;
use crate::greedy::{attribute, multi_query_greedy, AttributionResult, Criterion, GreedyConfig};
use crate::oracle::check_engines;
use crate::retrieval::{evaluate, GroundTruth, RankedList, Rankings};
use crate::sketch::{sketch_features, SketchConfig, SketchFamily};
use crate::store::{Dtype, FeatureStore, QueryMatrix, QueryVector, StoreFormat};
use crate::synth::{relinfo_sweep, synth_backdoor, BackdoorConfig};

pub const THREADS_ENV: &str = "INFOTRACE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "infotrace", version, about = "Information-theoretic training-data attribution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a store and optionally convert it to TFS.
    Ingest {
        input: PathBuf,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "f64")]
        dtype: DtypeArg,
    },
    /// Random-projection sketch of a store.
    Sketch {
        input: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "rademacher")]
        family: FamilyArg,
        #[arg(long)]
        output: PathBuf,
    },
    /// Greedy attribution of one or more queries.
    Attribute {
        store: PathBuf,
        #[command(flatten)]
        query: QueryArgs,
        #[arg(long, value_enum)]
        criterion: AttributeCriterion,
        #[arg(long)]
        sigma2: Option<f64>,
        #[arg(long)]
        budget: usize,
        #[arg(long)]
        filter_label: Option<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
        /// Also write the selections as a ranking CSV.
        #[arg(long)]
        ranking_output: Option<PathBuf>,
    },
    /// Joint selection for a whole query store.
    Coreset {
        store: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, value_enum, default_value = "multi-query-exact")]
        criterion: CoresetCriterion,
        #[arg(long)]
        sigma2: f64,
        #[arg(long)]
        budget: usize,
        #[arg(long)]
        filter_label: Option<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Planted-trigger backdoor instance.
    SynthBackdoor {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 50)]
        n_poison: usize,
        #[arg(long, default_value_t = 64)]
        k: usize,
        #[arg(long, default_value_t = 4.0)]
        trigger_scale: f64,
        #[arg(long, default_value_t = 5)]
        n_queries: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory receiving train.tfs, queries.tfs and truth.csv.
        #[arg(long)]
        output: PathBuf,
    },
    /// Relative information of the gain selectors over a (sigma2, M) grid.
    Relinfo {
        store: PathBuf,
        #[command(flatten)]
        query: QueryArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        sigma2: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        budget: Vec<usize>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Recall@k and MRR@k of a ranking CSV against ground truth.
    EvalRetrieval {
        ranking: PathBuf,
        truth: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "50,100")]
        k: Vec<usize>,
    },
    /// Compare the engines with the dense and enumeration oracles.
    Oracle {
        store: PathBuf,
        #[command(flatten)]
        query: QueryArgs,
        #[arg(long)]
        sigma2: f64,
        #[arg(long)]
        budget: usize,
    },
}

#[derive(Args, Debug, Clone)]
pub struct QueryArgs {
    /// Query store (TFS or CSV).
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Row id in the query store; all rows when omitted.
    #[arg(long, requires = "queries")]
    pub query_id: Option<u64>,
    /// Inline comma-separated query vector.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "queries")]
    pub query_vector: Option<String>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum FormatArg {
    Tfs,
    Csv,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum DtypeArg {
    F32,
    F64,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum FamilyArg {
    Rademacher,
    Gaussian,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
#[value(rename_all = "snake_case")]
pub enum AttributeCriterion {
    #[value(alias = "info-gain-exact")]
    InfoGainExact,
    #[value(alias = "info-loss")]
    InfoLoss,
    #[value(alias = "info-gain-approx")]
    InfoGainApprox,
    #[value(alias = "grad-dot")]
    GradDot,
    #[value(alias = "rep-sim")]
    RepSim,
    Relatif,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
#[value(rename_all = "snake_case")]
pub enum CoresetCriterion {
    #[value(alias = "multi-query-exact")]
    MultiQueryExact,
    #[value(alias = "multi-query-approx")]
    MultiQueryApprox,
}

impl AttributeCriterion {
    fn greedy(self) -> Option<Criterion> {
        match self {
            AttributeCriterion::InfoGainExact => Some(Criterion::InfoGainExact),
            AttributeCriterion::InfoLoss => Some(Criterion::InfoLoss),
            AttributeCriterion::InfoGainApprox => Some(Criterion::InfoGainApprox),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            AttributeCriterion::GradDot => "grad_dot",
            AttributeCriterion::RepSim => "rep_sim",
            AttributeCriterion::Relatif => "relatif",
            c => c.greedy().map(Criterion::name).unwrap_or_default(),
        }
    }
}

/// Parses `args` (program name first), runs the command and maps errors to
/// exit codes.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    configure_threads();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

fn configure_threads() {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return;
    };
    match v.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
                log::warn!("worker pool already initialized; ignoring {THREADS_ENV}");
            }
        }
        _ => log::warn!("ignoring invalid {THREADS_ENV}={v:?}"),
    }
}

fn fingerprint(command: &str, parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn load(path: &Path) -> Result<FeatureStore> {
    FeatureStore::load(path, StoreFormat::from_path(path))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn resolve_queries(args: &QueryArgs, dim: usize) -> Result<Vec<(Option<u64>, QueryVector)>> {
    let out = match (&args.query_vector, &args.queries) {
        (Some(text), _) => vec![(None, QueryVector::parse(text)?)],
        (None, Some(path)) => {
            let qs = load(path)?;
            match args.query_id {
                Some(id) => vec![(None, qs.query(id)?)],
                None => qs
                    .ids()
                    .iter()
                    .map(|&id| Ok((Some(id), qs.query(id)?)))
                    .collect::<Result<_>>()?,
            }
        }
        (None, None) => {
            return Err(Error::InvalidConfig(
                "a query is required: pass --query-vector or --queries".into(),
            ))
        }
    };
    for (_, q) in &out {
        if q.dim() != dim {
            return Err(Error::DimensionMismatch {
                row: 0,
                expected: dim,
                found: q.dim(),
            });
        }
    }
    Ok(out)
}

fn single_query(args: &QueryArgs, dim: usize) -> Result<QueryVector> {
    let mut qs = resolve_queries(args, dim)?;
    if qs.len() != 1 {
        return Err(Error::InvalidConfig(format!(
            "this command takes one query, got {}; pass --query-id",
            qs.len()
        )));
    }
    Ok(qs.remove(0).1)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest {
            input,
            format,
            output,
            dtype,
        } => {
            let fmt = match format {
                Some(FormatArg::Tfs) => StoreFormat::Tfs,
                Some(FormatArg::Csv) => StoreFormat::Csv,
                None => StoreFormat::from_path(&input),
            };
            let store = FeatureStore::load(&input, fmt)?;
            println!("N={} K={} dtype={}", store.n(), store.k(), store.dtype().name());
            if let Some(out) = output {
                let dtype = match dtype {
                    DtypeArg::F32 => Dtype::F32,
                    DtypeArg::F64 => Dtype::F64,
                };
                store.with_dtype(dtype).save(&out, StoreFormat::Tfs)?;
            }
            Ok(())
        }
        Command::Sketch {
            input,
            k,
            seed,
            family,
            output,
        } => {
            let family = match family {
                FamilyArg::Rademacher => SketchFamily::Rademacher,
                FamilyArg::Gaussian => SketchFamily::Gaussian,
            };
            let source = load(&input)?;
            let cfg = SketchConfig::new(k, family, seed);
            let sketched = sketch_features(&source, &cfg)?;
            sketched.save(&output, StoreFormat::from_path(&output))?;
            let mut meta_path = output.into_os_string();
            meta_path.push(".sketch.json");
            let meta = serde_json::to_string_pretty(&cfg.meta(source.k()))
                .map_err(|e| Error::InvalidConfig(e.to_string()))?;
            std::fs::write(meta_path, meta + "\n")?;
            println!("N={} K={} dtype={}", sketched.n(), sketched.k(), sketched.dtype().name());
            Ok(())
        }
        Command::Attribute {
            store,
            query,
            criterion,
            sigma2,
            budget,
            filter_label,
            seed,
            output,
            ranking_output,
        } => {
            let store = load(&store)?;
            let queries = resolve_queries(&query, store.k())?;
            let rankings = cmd_attribute(&store, &queries, criterion, sigma2, budget, filter_label, seed, &output)?;
            if let Some(path) = ranking_output {
                rankings.write_csv(&mut create(&path)?)?;
            }
            Ok(())
        }
        Command::Coreset {
            store,
            queries,
            criterion,
            sigma2,
            budget,
            filter_label,
            seed,
            output,
        } => {
            let store = load(&store)?;
            let qs = QueryMatrix::from_store(&load(&queries)?)?;
            let criterion = match criterion {
                CoresetCriterion::MultiQueryExact => Criterion::MultiQueryExact,
                CoresetCriterion::MultiQueryApprox => Criterion::MultiQueryApprox,
            };
            let cfg = GreedyConfig::new(criterion, budget, sigma2)?
                .with_filter(filter_label)
                .with_seed(seed);
            let result = multi_query_greedy(&store, &qs, &cfg)?;
            let mut w = create(&output)?;
            writeln!(w, "# fingerprint={}", result.config_fingerprint)?;
            write_attribution(&mut w, None, &result, true)?;
            w.flush()?;
            Ok(())
        }
        Command::SynthBackdoor {
            n,
            n_poison,
            k,
            trigger_scale,
            n_queries,
            seed,
            output,
        } => {
            let cfg = BackdoorConfig {
                n,
                n_poison,
                k,
                trigger_scale,
                n_queries,
                seed,
                ..BackdoorConfig::default()
            };
            let data = synth_backdoor(&cfg)?;
            std::fs::create_dir_all(&output)?;
            data.train.save(&output.join("train.tfs"), StoreFormat::Tfs)?;
            data.queries.save(&output.join("queries.tfs"), StoreFormat::Tfs)?;
            let fp = fingerprint(
                "synth-backdoor",
                &[
                    &(n as u64).to_le_bytes(),
                    &(n_poison as u64).to_le_bytes(),
                    &(k as u64).to_le_bytes(),
                    &trigger_scale.to_bits().to_le_bytes(),
                    &(n_queries as u64).to_le_bytes(),
                    &seed.to_le_bytes(),
                ],
            );
            let mut w = create(&output.join("truth.csv"))?;
            writeln!(w, "# fingerprint={fp}")?;
            data.truth.write_csv(&mut w)?;
            w.flush()?;
            println!("train N={} K={} poisoned={} queries={}", n, k, n_poison, n_queries);
            Ok(())
        }
        Command::Relinfo {
            store,
            query,
            sigma2,
            budget,
            output,
        } => {
            let store = load(&store)?;
            let q = single_query(&query, store.k())?;
            let rows = relinfo_sweep(&store, &q, &sigma2, &budget)?;
            let grid: Vec<u8> = sigma2
                .iter()
                .flat_map(|s| s.to_bits().to_le_bytes())
                .chain(budget.iter().flat_map(|&m| (m as u64).to_le_bytes()))
                .collect();
            let qbytes: Vec<u8> = q.as_slice().iter().flat_map(|v| v.to_bits().to_le_bytes()).collect();
            let fp = fingerprint("relinfo", &[&store.digest(), &qbytes, &grid]);
            let mut w = create(&output)?;
            writeln!(w, "# fingerprint={fp}")?;
            writeln!(w, "sigma2,sigma2_over_lambda_max,budget,reference_nats,info_gain_exact,info_gain_approx")?;
            for r in rows {
                writeln!(
                    w,
                    "{:?},{:?},{},{:?},{:?},{:?}",
                    r.sigma2, r.noise_ratio, r.budget, r.reference_nats, r.gain_exact, r.gain_approx
                )?;
            }
            w.flush()?;
            Ok(())
        }
        Command::EvalRetrieval { ranking, truth, k } => {
            let rankings = Rankings::read_csv(File::open(&ranking)?)?;
            let truth = GroundTruth::read_csv(File::open(&truth)?)?;
            for &cut in &k {
                let report = evaluate(&rankings, &truth, cut)?;
                for (q, recall, mrr) in &report.per_query {
                    println!("query={q} recall@{cut}={recall:.6} mrr@{cut}={mrr:.6}");
                }
                println!(
                    "mean recall@{cut}={:.6} mrr@{cut}={:.6}",
                    report.mean_recall, report.mean_mrr
                );
            }
            Ok(())
        }
        Command::Oracle {
            store,
            query,
            sigma2,
            budget,
        } => {
            let store = load(&store)?;
            let q = single_query(&query, store.k())?;
            let r = check_engines(&store, &q, NoiseModel::new(sigma2)?, budget)?;
            println!("info_gain_exact picks_agree={} max_rel_dev={:e}", r.gain_picks_agree, r.gain_max_rel_dev);
            println!("info_loss picks_agree={} max_rel_dev={:e}", r.loss_picks_agree, r.loss_max_rel_dev);
            println!("leave_m_out max_rel_dev={:e}", r.leave_out_max_rel_dev);
            println!("weight_vs_kernel max_rel_dev={:e}", r.woodbury_max_rel_dev);
            Ok(())
        }
    }
}

fn write_attribution<W: Write>(w: &mut W, qid: Option<u64>, r: &AttributionResult, header: bool) -> Result<()> {
    let prefix = qid.map(|q| format!("{q},")).unwrap_or_default();
    if header {
        let col = if qid.is_some() { "query_id," } else { "" };
        writeln!(w, "{col}step,id,raw_score,nats,cumulative_nats")?;
    }
    for (i, &id) in r.selected.iter().enumerate() {
        writeln!(
            w,
            "{prefix}{},{},{:?},{:?},{:?}",
            i + 1,
            id,
            r.per_step_score[i],
            r.marginal_nats[i],
            r.cumulative_nats[i]
        )?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_attribute(
    store: &FeatureStore,
    queries: &[(Option<u64>, QueryVector)],
    criterion: AttributeCriterion,
    sigma2: Option<f64>,
    budget: usize,
    filter_label: Option<u32>,
    seed: u64,
    output: &Path,
) -> Result<Rankings> {
    let needs_sigma = criterion.greedy().is_some() || criterion == AttributeCriterion::Relatif;
    let sigma2 = match (sigma2, needs_sigma) {
        (Some(s), _) => s,
        (None, false) => 1.0,
        (None, true) => return Err(Error::InvalidConfig(format!("{} requires --sigma2", criterion.name()))),
    };
    let multi = queries.iter().any(|(id, _)| id.is_some());
    let mut rankings = Rankings::new();
    let mut body: Vec<u8> = Vec::new();
    let mut prints: Vec<u8> = Vec::new();
    for (n, (qid, q)) in queries.iter().enumerate() {
        let rank_key = qid.unwrap_or(0);
        match criterion.greedy() {
            Some(c) => {
                let cfg = GreedyConfig::new(c, budget, sigma2)?
                    .with_filter(filter_label)
                    .with_seed(seed);
                let result = attribute(store, q, &cfg)?;
                prints.extend(result.config_fingerprint.as_bytes());
                write_attribution(&mut body, *qid, &result, n == 0)?;
                rankings.insert(rank_key, result.ranking());
            }
            None => {
                let full = match criterion {
                    AttributeCriterion::GradDot => grad_dot(store, q)?,
                    AttributeCriterion::RepSim => rep_sim(store, q)?,
                    _ => relatif_ranking(store, q, NoiseModel::new(sigma2)?)?,
                };
                let list = filtered_top(store, &full, budget, filter_label)?;
                if n == 0 {
                    let col = if multi { "query_id," } else { "" };
                    writeln!(body, "{col}step,id,raw_score,nats,cumulative_nats")?;
                }
                let prefix = qid.map(|q| format!("{q},")).unwrap_or_default();
                for (i, (id, s)) in list.ids().iter().zip(list.scores()).enumerate() {
                    writeln!(body, "{prefix}{},{},{:?},,", i + 1, id, s)?;
                }
                let qbytes: Vec<u8> = q.as_slice().iter().flat_map(|v| v.to_bits().to_le_bytes()).collect();
                prints.extend(qbytes);
                rankings.insert(rank_key, list);
            }
        }
    }
    let fp = fingerprint(
        criterion.name(),
        &[
            &store.digest(),
            &prints,
            &sigma2.to_bits().to_le_bytes(),
            &(budget as u64).to_le_bytes(),
            &seed.to_le_bytes(),
            &filter_label.map(|l| l as i64).unwrap_or(-1).to_le_bytes(),
        ],
    );
    let mut w = create(output)?;
    writeln!(w, "# fingerprint={fp}")?;
    w.write_all(&body)?;
    w.flush()?;
    Ok(rankings)
}

fn filtered_top(store: &FeatureStore, full: &RankedList, budget: usize, label: Option<u32>) -> Result<RankedList> {
    let pool = store.candidate_positions(label)?;
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if budget == 0 || budget > pool.len() {
        return Err(Error::InvalidBudget {
            budget,
            pool: pool.len(),
        });
    }
    let allowed: std::collections::HashSet<u64> = pool.iter().map(|&p| store.id(p)).collect();
    let kept: Vec<(u64, f64)> = full
        .ids()
        .iter()
        .zip(full.scores())
        .filter(|(id, _)| allowed.contains(id))
        .map(|(&id, &s)| (id, s))
        .take(budget)
        .collect();
    Ok(RankedList::from_scores(kept))
}
