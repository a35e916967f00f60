use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::*;
use crate::atomic::write_atomic;
use crate::bank::{load_bank, load_episodes, save_bank, save_episodes, DescriptorBank, TargetEpisode};
use crate::embed::{embed_episodes, EmbedConfig, EmbedMode, NegativeWeighting};
use crate::error::{Error, Result};
use crate::eval::{discriminator_accuracy, evaluate_ranking, sweep as run_sweep, write_sweep, Grid, MetricName, ScoreKind};
use crate::experiment::{build_examples, Objective};
use crate::model::{
    discriminator_train, grad_check, load_discriminator, load_head, random_smooth_instance, save_discriminator, save_head, train_head,
    AssistKind, HeadKind, HeadShape, TrainConfig,
};
use crate::search::{build_index, knn_batch, load_index, save_index, Metric, SearchIndex};
use crate::synth::{generate, SynthConfig};

fn metric(m: MetricArg) -> Metric {
    match m {
        MetricArg::L2 => Metric::L2,
        MetricArg::Cosine => Metric::Cosine,
        MetricArg::InnerProduct => Metric::InnerProduct,
    }
}

fn score(s: ScoreArg) -> ScoreKind {
    match s {
        ScoreArg::Cosine => ScoreKind::Cosine,
        ScoreArg::Dot => ScoreKind::Dot,
    }
}

fn head_kind(h: HeadArg) -> HeadKind {
    match h {
        HeadArg::MainPlusContext => HeadKind::MainPlusContext,
        HeadArg::SingleFc => HeadKind::SingleFc,
    }
}

fn embed_config(a: &SubspaceArgs) -> CliResult<EmbedConfig> {
    if a.eta == 0 {
        return usage("--eta must be at least 1");
    }
    if a.eta_prime > a.eta {
        return usage(format!("--eta-prime {} exceeds --eta {}", a.eta_prime, a.eta));
    }
    if !(a.sigma > 0.0 && a.sigma.is_finite()) {
        return usage("--sigma must be positive");
    }
    let mode = match a.mode {
        ModeArg::Neha => EmbedMode::Neha,
        ModeArg::Nesa => EmbedMode::Nesa {
            sigma: a.sigma,
            negative_weighting: match a.negative_weighting {
                WeightingArg::SPlus => NegativeWeighting::SPlus,
                WeightingArg::SMinus => NegativeWeighting::SMinus,
            },
        },
    };
    Ok(EmbedConfig {
        mode,
        eta: a.eta,
        eta_prime: a.eta_prime,
    })
}

fn objective(o: ObjectiveArg, a: &SubspaceArgs) -> CliResult<Objective> {
    Ok(match o {
        ObjectiveArg::Combined => Objective::Combined(embed_config(a)?),
        ObjectiveArg::Nno => {
            if a.eta == 0 {
                return usage("--eta must be at least 1");
            }
            Objective::Nno { eta: a.eta }
        }
        ObjectiveArg::Plain => Objective::Plain,
    })
}

fn train_config(a: &OptimArgs) -> CliResult<TrainConfig> {
    let c = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        lambda: a.lambda,
        seed: a.seed,
        init_scale: a.init_scale,
    };
    c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(c)
}

fn open_search(a: &SearchArgs, bank: &DescriptorBank, inputs: &mut Vec<PathBuf>) -> Result<SearchIndex> {
    match &a.index {
        Some(p) => {
            inputs.push(p.clone());
            load_index(p, bank)
        }
        None => Ok(SearchIndex::flat(metric(a.metric), bank.dim())),
    }
}

fn load_pair(bank_path: &Path, episodes_path: &Path) -> Result<(DescriptorBank, Vec<TargetEpisode>)> {
    let bank = load_bank(bank_path)?;
    let episodes = load_episodes(episodes_path, &bank)?;
    Ok((bank, episodes))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub(super) fn gen(a: &GenArgs) -> CliResult<RunRecord> {
    let config = SynthConfig {
        dim: a.dim,
        n_clusters: a.clusters,
        bank_size: a.bank,
        n_episodes: a.episodes,
        k: a.k,
        noise: a.noise,
        context_noise: a.context_noise,
        context_dim: a.context_dim,
        seed: a.seed,
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let data = generate(&config)?;
    create_dir(&a.out)?;
    let bank_path = a.out.join("bank.nedb");
    let episodes_path = a.out.join("episodes.jsonl");
    let clusters_path = a.out.join("clusters.json");
    save_bank(&data.bank, &bank_path)?;
    save_episodes(&data.episodes, data.bank.dim(), &episodes_path)?;
    write_json(&clusters_path, &data.clusters)?;
    println!("wrote {} rows and {} episodes to {}", data.bank.len(), data.episodes.len(), a.out.display());
    Ok(RunRecord {
        inputs: vec![],
        outputs: vec![bank_path.clone(), crate::bank::ids_sidecar_path(&bank_path), episodes_path, clusters_path],
        seed: Some(a.seed),
        manifest: a.out.join(MANIFEST_FILE),
        failure: None,
    })
}

pub(super) fn index(a: &IndexArgs) -> CliResult<RunRecord> {
    if a.probes == Some(0) {
        return usage("--probes must be at least 1");
    }
    let bank = load_bank(&a.bank)?;
    let mut index = build_index(&bank, metric(a.metric), a.partitions, a.seed)?;
    if let Some(p) = a.probes {
        index = index.with_probe_count(p);
    }
    save_index(&index, &a.out)?;
    Ok(RunRecord {
        inputs: vec![a.bank.clone()],
        outputs: vec![a.out.clone()],
        seed: Some(a.seed),
        manifest: sibling_manifest(&a.out),
        failure: None,
    })
}

#[derive(Serialize)]
struct KnnLine<'a> {
    query: &'a str,
    ids: &'a [String],
    distances: &'a [f64],
}

pub(super) fn knn(a: &KnnArgs) -> CliResult<RunRecord> {
    if a.eta == 0 {
        return usage("--eta must be at least 1");
    }
    let bank = load_bank(&a.bank)?;
    let queries = load_bank(&a.queries)?;
    let mut inputs = vec![a.bank.clone(), a.queries.clone()];
    let index = open_search(&a.search, &bank, &mut inputs)?;
    let qs: Vec<Vec<f64>> = (0..queries.len()).map(|r| queries.row_f64(r).to_vec()).collect();
    let results = knn_batch(&index, &bank, &qs, a.eta)?;
    let mut text = String::new();
    for (r, res) in results.iter().enumerate() {
        let line = KnnLine {
            query: queries.id(r),
            ids: &res.ids,
            distances: &res.distances,
        };
        text.push_str(&serde_json::to_string(&line).expect("line serializes"));
        text.push('\n');
    }
    write_atomic(&a.out, text.as_bytes())?;
    Ok(RunRecord {
        inputs,
        outputs: vec![a.out.clone()],
        seed: None,
        manifest: sibling_manifest(&a.out),
        failure: None,
    })
}

#[derive(Serialize)]
struct SingularValues<'a> {
    positive: &'a [f64],
    negative: &'a [f64],
}

pub(super) fn embed(a: &EmbedArgs) -> CliResult<RunRecord> {
    let config = embed_config(&a.subspace)?;
    let (bank, episodes) = load_pair(&a.bank, &a.episodes)?;
    let mut inputs = vec![a.bank.clone(), a.episodes.clone()];
    let index = open_search(&a.search, &bank, &mut inputs)?;
    let pairs = embed_episodes(&config, &episodes, &bank, &index)?;

    let dim = bank.dim();
    let (mut mean_rows, mut mean_ids) = (Vec::new(), Vec::new());
    let (mut basis_rows, mut basis_ids) = (Vec::new(), Vec::new());
    let mut singular = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        for (side, s) in [("pos", &pair.positive), ("neg", &pair.negative)] {
            mean_rows.extend(s.mean.iter().map(|&v| v as f32));
            mean_ids.push(format!("e{i}/{side}"));
            for n in 0..s.eta_prime() {
                basis_rows.extend(s.direction(n).iter().map(|&v| v as f32));
                basis_ids.push(format!("e{i}/{side}/{n}"));
            }
        }
        singular.push(SingularValues {
            positive: &pair.positive.eigenvalues,
            negative: &pair.negative.eigenvalues,
        });
    }
    let means = DescriptorBank::new(dim, mean_rows, mean_ids)?;
    let bases = DescriptorBank::new(dim, basis_rows, basis_ids)?;

    create_dir(&a.out)?;
    let means_path = a.out.join("means.nedb");
    let basis_path = a.out.join("basis.nedb");
    let singular_path = a.out.join("singular_values.json");
    save_bank(&means, &means_path)?;
    save_bank(&bases, &basis_path)?;
    write_json(&singular_path, &singular)?;
    Ok(RunRecord {
        inputs,
        outputs: vec![means_path, basis_path, singular_path],
        seed: None,
        manifest: a.out.join(MANIFEST_FILE),
        failure: None,
    })
}

pub(super) fn train(a: &TrainArgs) -> CliResult<RunRecord> {
    let config = train_config(&a.optim)?;
    let obj = objective(a.objective, &a.subspace)?;
    if a.target == TargetArg::Head && a.head == HeadArg::SingleFc && a.objective == ObjectiveArg::Combined {
        return usage("--head single-fc has no context stream; use --objective nno or plain");
    }
    let (bank, episodes) = load_pair(&a.bank, &a.episodes)?;
    let mut inputs = vec![a.bank.clone(), a.episodes.clone()];
    let trace_path = a.out.join("trace.json");
    let mut outputs = vec![trace_path.clone()];
    match a.target {
        TargetArg::Head => {
            let index = open_search(&a.search, &bank, &mut inputs)?;
            let examples = build_examples(&episodes, &bank, &index, &obj)?;
            let context_dim = episodes.first().map_or(bank.dim(), |e| e.context.len());
            let shape = obj.head_shape(head_kind(a.head), context_dim, bank.dim());
            let (params, trace) = train_head(&examples, shape, &config)?;
            create_dir(&a.out)?;
            save_head(&params, &a.out, Some(&config))?;
            write_json(&trace_path, &BTreeMap::from([("loss", &trace)]))?;
            outputs.push(a.out.join(crate::model::HEAD_MANIFEST));
            if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
                println!("loss {first:.6} -> {last:.6} over {} epochs", trace.len());
            }
        }
        TargetArg::Discriminator => {
            let data: Vec<_> = episodes.iter().map(|e| (e.context.clone(), e.task_label)).collect();
            let (params, trace) = discriminator_train(&data, &config)?;
            create_dir(&a.out)?;
            save_discriminator(&params, &a.out, Some(&config))?;
            write_json(&trace_path, &BTreeMap::from([("accuracy", &trace)]))?;
            outputs.push(a.out.join(crate::model::DISCRIMINATOR_MANIFEST));
            if let Some(last) = trace.last() {
                println!("training accuracy {last:.4}");
            }
        }
    }
    Ok(RunRecord {
        inputs,
        outputs,
        seed: Some(a.optim.seed),
        manifest: a.out.join(MANIFEST_FILE),
        failure: None,
    })
}

pub(super) fn eval(a: &EvalArgs) -> CliResult<RunRecord> {
    if a.l.is_empty() || a.l.contains(&0) {
        return usage("--l cutoffs must be at least 1");
    }
    let (bank, episodes) = load_pair(&a.bank, &a.episodes)?;
    let mut inputs = vec![a.bank.clone(), a.episodes.clone()];
    let report: BTreeMap<String, f64> = match (&a.head, &a.discriminator) {
        (Some(dir), _) => {
            inputs.push(dir.clone());
            let (params, _) = load_head(dir)?;
            evaluate_ranking(&params, &episodes, &bank, &a.l, score(a.score))?
                .into_iter()
                .map(|(l, v)| (format!("R@{l}"), v))
                .collect()
        }
        (None, Some(dir)) => {
            inputs.push(dir.clone());
            let params = load_discriminator(dir)?;
            let data: Vec<_> = episodes.iter().map(|e| (e.context.clone(), e.task_label)).collect();
            BTreeMap::from([("accuracy".to_owned(), discriminator_accuracy(&params, &data)?)])
        }
        (None, None) => return usage("one of --head or --discriminator is required"),
    };
    for (k, v) in &report {
        println!("{k}\t{v:.4}");
    }
    write_json(&a.out, &report)?;
    Ok(RunRecord {
        inputs,
        outputs: vec![a.out.clone()],
        seed: None,
        manifest: sibling_manifest(&a.out),
        failure: None,
    })
}

const SWEEP_AXES: [&str; 8] = ["eta", "eta_prime", "sigma", "lambda", "lr", "epochs", "batch_size", "init_scale"];
const INTEGER_AXES: [&str; 4] = ["eta", "eta_prime", "epochs", "batch_size"];

/// Flag values with one grid point's overrides applied.
struct PointConfig {
    subspace: SubspaceArgs,
    optim: OptimArgs,
}

fn point_config(a: &SweepArgs, p: &BTreeMap<String, f64>) -> PointConfig {
    let get = |k: &str, v: f64| p.get(k).copied().unwrap_or(v);
    let int = |k: &str, v: usize| p.get(k).map_or(v, |&x| x as usize);
    PointConfig {
        subspace: SubspaceArgs {
            mode: a.subspace.mode,
            eta: int("eta", a.subspace.eta),
            eta_prime: int("eta_prime", a.subspace.eta_prime),
            sigma: get("sigma", a.subspace.sigma),
            negative_weighting: a.subspace.negative_weighting,
        },
        optim: OptimArgs {
            lambda: get("lambda", a.optim.lambda),
            lr: get("lr", a.optim.lr),
            epochs: int("epochs", a.optim.epochs),
            batch_size: int("batch_size", a.optim.batch_size),
            init_scale: get("init_scale", a.optim.init_scale),
            seed: a.optim.seed,
        },
    }
}

pub(super) fn sweep(a: &SweepArgs) -> CliResult<RunRecord> {
    let grid: Grid = a.grid.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    for name in grid.names() {
        if !SWEEP_AXES.contains(&name) {
            return usage(format!("--grid axis {name:?} is not one of {}", SWEEP_AXES.join(", ")));
        }
    }
    for p in grid.points() {
        for name in INTEGER_AXES {
            if let Some(&v) = p.get(name) {
                if v < 0.0 || v.fract() != 0.0 {
                    return usage(format!("--grid axis {name} needs non-negative integers, got {v}"));
                }
            }
        }
    }
    let metric_name: MetricName = a.report.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    if metric_name == MetricName::Accuracy {
        return usage("--report accuracy applies to discriminators; sweeps train heads");
    }
    if a.head == HeadArg::SingleFc && a.objective == ObjectiveArg::Combined {
        return usage("--head single-fc has no context stream; use --objective nno or plain");
    }
    // Validate the non-grid flags once with the grid's first point applied.
    if let Some(first) = grid.points().first() {
        let pc = point_config(a, first);
        train_config(&pc.optim)?;
        if a.objective == ObjectiveArg::Combined && pc.subspace.eta_prime <= pc.subspace.eta {
            embed_config(&pc.subspace)?;
        }
    }

    let (bank, episodes) = load_pair(&a.bank, &a.episodes)?;
    if a.test_episodes == 0 || a.test_episodes >= episodes.len() {
        return usage(format!(
            "--test-episodes {} must leave training episodes out of {}",
            a.test_episodes,
            episodes.len()
        ));
    }
    let (train_eps, test_eps) = episodes.split_at(episodes.len() - a.test_episodes);
    let mut inputs = vec![a.bank.clone(), a.episodes.clone()];
    let index = open_search(&a.search, &bank, &mut inputs)?;
    let kind = head_kind(a.head);

    let feasible = |p: &BTreeMap<String, f64>| {
        let pc = point_config(a, p);
        pc.subspace.eta_prime <= pc.subspace.eta
    };
    let runner = |p: &BTreeMap<String, f64>, _seed: u64| -> Result<(MetricName, f64)> {
        let pc = point_config(a, p);
        let invalid = |e: CliError| match e {
            CliError::Usage(m) => Error::InvalidArgument(m),
            CliError::Runtime(e) => e,
        };
        let obj = objective(a.objective, &pc.subspace).map_err(invalid)?;
        let config = train_config(&pc.optim).map_err(invalid)?;
        let examples = build_examples(train_eps, &bank, &index, &obj)?;
        let shape = obj.head_shape(kind, train_eps[0].context.len(), bank.dim());
        let (params, trace) = train_head(&examples, shape, &config)?;
        let value = match metric_name.recall_cutoff() {
            Some(l) => evaluate_ranking(&params, test_eps, &bank, &[l], score(a.score))?[&l],
            None => *trace.last().ok_or_else(|| Error::InvalidArgument("loss metric needs at least one epoch".into()))?,
        };
        Ok((metric_name, value))
    };
    let records = run_sweep(&grid, feasible, runner, a.optim.seed, a.cap)?;

    let csv_path = with_suffix(&a.out, ".csv");
    let jsonl_path = with_suffix(&a.out, ".jsonl");
    write_sweep(&records, &csv_path, &jsonl_path)?;
    println!("{} of {} grid points evaluated", records.len(), grid.size());
    Ok(RunRecord {
        inputs,
        outputs: vec![csv_path, jsonl_path],
        seed: Some(a.optim.seed),
        manifest: with_suffix(&a.out, ".manifest.json"),
        failure: None,
    })
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    prefix.with_file_name(name)
}

#[derive(Serialize)]
struct GradcheckReport {
    instances: usize,
    max_relative_error: f64,
    mean_relative_error: f64,
    tolerance: f64,
    passed: bool,
    errors: Vec<f64>,
}

pub(super) fn gradcheck(a: &GradcheckArgs) -> CliResult<RunRecord> {
    if a.instances == 0 {
        return usage("--instances must be at least 1");
    }
    if !(a.step > 0.0 && a.step.is_finite()) {
        return usage("--step must be positive");
    }
    if !(a.margin >= 0.0 && a.lambda >= 0.0) {
        return usage("--margin and --lambda must be non-negative");
    }
    let shape = match a.head {
        HeadArg::MainPlusContext => HeadShape {
            hidden_dim: a.hidden_dim,
            ..HeadShape::new(a.context_dim, a.descriptor_dim, a.eta_prime)
        },
        HeadArg::SingleFc => {
            if a.assist == AssistArg::Subspaces {
                return usage("--head single-fc cannot take --assist subspaces");
            }
            HeadShape::single_fc(a.context_dim, a.descriptor_dim)
        }
    };
    let assist = match a.assist {
        AssistArg::None => AssistKind::None,
        AssistArg::Subspaces => AssistKind::Subspaces,
        AssistArg::NeighborMean => AssistKind::NeighborMean,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut errors = Vec::with_capacity(a.instances);
    for _ in 0..a.instances {
        let (params, example) = random_smooth_instance(&mut rng, shape, a.k, assist, a.margin)?;
        errors.push(grad_check(&params, &example, a.lambda, a.step)?);
    }
    let max = errors.iter().copied().fold(0.0, f64::max);
    let report = GradcheckReport {
        instances: a.instances,
        max_relative_error: max,
        mean_relative_error: errors.iter().sum::<f64>() / errors.len() as f64,
        tolerance: a.tolerance,
        passed: max < a.tolerance,
        errors,
    };
    write_json(&a.out, &report)?;
    println!("max relative error {max:.3e} over {} instances", a.instances);
    Ok(RunRecord {
        inputs: vec![],
        outputs: vec![a.out.clone()],
        seed: Some(a.seed),
        manifest: sibling_manifest(&a.out),
        failure: (!report.passed).then(|| format!("max relative error {max:.3e} exceeds tolerance {:.1e}", a.tolerance)),
    })
}
