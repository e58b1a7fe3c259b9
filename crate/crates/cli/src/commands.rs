use std::fs;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use indexmap::IndexMap;

use eba_core::audit::{build_bias_report, tsne, KMeansConfig, TsneConfig};
use eba_core::embed::{
    self, load_embeddings_file, similarity_profile, test_provider, write_embeddings_file,
    EmbeddingTable, PrecomputedProvider, RemoteProvider,
};
use eba_core::enhance::{find_result, ExternalEnhancer};
use eba_core::imaging::{load_image, load_manifest, DatasetManifest};
use eba_core::metrics::{dataset_means, evaluate_pair, METRIC_DEFINITION_VERSION};
use eba_core::par;
use eba_core::pipeline::{run_pipeline, Decision, ProviderPolicy, RunOptions, ThresholdSpec};
use eba_core::report::{
    ablation_table, bias_report_json, plot_tsne_svg, render_ablation, render_metric_table, render_prompt_table,
    tsne_csv, write_csv, write_run_report, RunConfig, RunReport,
};
use eba_core::{
    AdaptiveParams, BaselineConfig, BaselineEnhancer, Embedding, EmbeddingProvider, Enhancer, MetricSet,
    PromptSet, StochasticConfig,
};

use crate::{AblationArgs, AuditArgs, Cli, Command, EmbedArgs, EvalArgs, RunArgs, EXIT_INPUT, EXIT_PARTIAL};

pub const PROVIDER_ENV: &str = "EBAAI_PROVIDER_URL";

/// Largest tolerated share of failed images before `run` exits with [`EXIT_PARTIAL`].
const MAX_FAILED_SHARE: f64 = 0.1;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub err: anyhow::Error,
}

type Outcome = Result<u8, Failure>;

trait OrInput<T> {
    fn or_input(self, ctx: &str) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrInput<T> for Result<T, E> {
    fn or_input(self, ctx: &str) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code: EXIT_INPUT,
            err: e.into().context(ctx.to_string()),
        })
    }
}

fn input_err(msg: String) -> Failure {
    Failure {
        code: EXIT_INPUT,
        err: anyhow!(msg),
    }
}

pub fn dispatch(cli: &Cli) -> Outcome {
    #[cfg(feature = "parallel")]
    if let Some(n) = cli.workers {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build()
            .or_input("building worker pool")?;
        return pool.install(|| dispatch_inner(cli));
    }
    dispatch_inner(cli)
}

fn dispatch_inner(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Embed(a) => cmd_embed(cli.seed, a),
        Command::Audit(a) => cmd_audit(cli.seed, a),
        Command::Run(a) => cmd_run(cli.seed, a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablation(a) => cmd_ablation(a),
    }
}

fn provider_from_spec(spec: &str, seed: u64) -> Result<Box<dyn EmbeddingProvider>, Failure> {
    let remote = |url: &str| -> Box<dyn EmbeddingProvider> {
        Box::new(RemoteProvider::new(url, RemoteProvider::DEFAULT_MAX_IN_FLIGHT))
    };
    match spec {
        "test" => Ok(Box::new(test_provider(seed))),
        "remote" => match std::env::var(PROVIDER_ENV) {
            Ok(url) if !url.is_empty() => Ok(remote(&url)),
            _ => Err(input_err(format!("--provider remote needs {PROVIDER_ENV} to be set"))),
        },
        s => match s.strip_prefix("remote:") {
            Some(url) if !url.is_empty() => Ok(remote(url)),
            _ => Err(input_err(format!(
                "unknown provider {s:?} (expected test, remote or remote:URL)"
            ))),
        },
    }
}

fn load_manifest_arg(path: &Path) -> Result<DatasetManifest, Failure> {
    let m = load_manifest(path).or_input("loading manifest")?;
    if m.is_empty() {
        return Err(input_err(format!("manifest {} has no entries", path.display())));
    }
    Ok(m)
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).or_input(&format!("creating {}", dir.display()))
}

fn ensure_parent(path: &Path) -> Result<(), Failure> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn cmd_embed(seed: u64, a: &EmbedArgs) -> Outcome {
    let manifest = load_manifest_arg(&a.manifest)?;
    let provider = provider_from_spec(&a.provider, seed)?;

    let images = par::map(&manifest.entries, |e| provider.embed_image(&e.id, &e.input_path));
    let texts = PromptSet::prompt_texts(&a.prompt_prefix);
    let prompts = par::map(&texts, |t| provider.embed_text(t));

    let mut map: IndexMap<String, Embedding> = IndexMap::new();
    for (e, r) in manifest.entries.iter().zip(images) {
        let emb = r.or_input(&format!("embedding image {:?}", e.id))?;
        map.insert(e.id.clone(), emb);
    }
    for (t, r) in texts.iter().zip(prompts) {
        let emb = r.or_input(&format!("embedding prompt {t:?}"))?;
        map.insert(EmbeddingTable::prompt_key(t), emb);
    }
    ensure_parent(&a.out)?;
    write_embeddings_file(&map, &a.out).or_input("writing embeddings")?;
    println!(
        "wrote {} image and {} prompt embeddings to {}",
        manifest.len(),
        texts.len(),
        a.out.display()
    );
    Ok(0)
}

fn auto_perplexity(n: usize) -> f64 {
    // strictly below (n-1)/3
    let limit = (n.saturating_sub(1)) as f64 / 3.0;
    30f64.min(limit * 0.99)
}

fn cmd_audit(seed: u64, a: &AuditArgs) -> Outcome {
    let manifest = load_manifest_arg(&a.manifest)?;
    let table = load_embeddings_file(&a.embeddings).or_input("loading embeddings")?;
    let missing: Vec<&str> = manifest
        .entries
        .iter()
        .filter(|e| table.get(&e.id).is_none())
        .map(|e| e.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(input_err(format!(
            "{} manifest id(s) have no embedding: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    let ids: Vec<String> = manifest.entries.iter().map(|e| e.id.clone()).collect();
    let embs: Vec<Embedding> = ids.iter().map(|id| table.get(id).cloned().expect("checked")).collect();

    let fallback = a.provider.as_deref().map(|s| provider_from_spec(s, seed)).transpose()?;
    let source = PrecomputedProvider::new(table, fallback);
    let prompts = PromptSet::from_provider(&source, &a.prompt_prefix).or_input("prompt embeddings")?;

    let mut profiles = IndexMap::new();
    for (id, e) in ids.iter().zip(&embs) {
        profiles.insert(id.clone(), similarity_profile(e, &prompts).or_input("similarity profile")?);
    }
    let kcfg = KMeansConfig::new(a.clusters as usize, seed);
    let (report, _) = build_bias_report(&ids, &embs, &profiles, &manifest, &kcfg).or_input("bias audit")?;

    ensure_dir(&a.out)?;
    let json = bias_report_json(&report).or_input("serialising bias report")?;
    write_file(&a.out.join("bias_report.json"), json.as_bytes())?;
    write_file(
        &a.out.join("prompt_table.md"),
        render_prompt_table(&report.prompt_means).as_bytes(),
    )?;

    let mut line = format!(
        "n={} clusters={} occupied={} entropy={:.6} normalized_entropy={:.6}",
        report.n, report.k, report.occupied_clusters, report.entropy_nats, report.normalized_entropy
    );
    if !a.no_tsne {
        let cfg = TsneConfig {
            perplexity: a.perplexity.unwrap_or_else(|| auto_perplexity(ids.len())),
            seed,
            iterations: a.iterations,
            ..TsneConfig::default()
        };
        let layout = tsne(&embs, &cfg).or_input("t-SNE")?;
        let labels: Vec<String> = manifest.entries.iter().map(|e| e.dataset_label.clone()).collect();
        let csv = tsne_csv(&ids, &layout, &labels).or_input("t-SNE csv")?;
        write_file(&a.out.join("tsne.csv"), csv.as_bytes())?;
        plot_tsne_svg(&layout, &labels, &a.out.join("tsne.svg")).or_input("t-SNE plot")?;
        line.push_str(&format!(" tsne_kl={:.6}", layout.final_kl));
    }
    println!("{line}");
    Ok(0)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    embed::write_atomic(path, bytes).or_input(&format!("writing {}", path.display()))
}

fn adaptive_params(a: &RunArgs) -> AdaptiveParams {
    let d = AdaptiveParams::default();
    AdaptiveParams {
        window: a.window.unwrap_or(d.window),
        epsilon: a.epsilon.unwrap_or(d.epsilon),
        alpha: a.alpha.unwrap_or(d.alpha),
        beta: a.beta.unwrap_or(d.beta),
        d_max: a.dmax.unwrap_or(d.d_max),
        tile: a.tile.unwrap_or(d.tile),
        overlap: a.overlap.unwrap_or(d.overlap),
    }
}

fn run_provider(seed: u64, a: &RunArgs) -> Result<Box<dyn EmbeddingProvider>, Failure> {
    let live = match &a.provider {
        Some(s) => Some(provider_from_spec(s, seed)?),
        None if a.embeddings.is_none() => match std::env::var(PROVIDER_ENV) {
            Ok(url) if !url.is_empty() => Some(provider_from_spec("remote", seed)?),
            _ => {
                return Err(input_err(format!(
                    "need --embeddings or --provider (or {PROVIDER_ENV})"
                )))
            }
        },
        None => None,
    };
    match &a.embeddings {
        Some(path) => {
            let table = load_embeddings_file(path).or_input("loading embeddings")?;
            Ok(Box::new(PrecomputedProvider::new(table, live)))
        }
        None => Ok(live.expect("provider resolved above")),
    }
}

fn cmd_run(seed: u64, a: &RunArgs) -> Outcome {
    let threshold = match (a.threshold, a.target_skip) {
        (Some(t), None) => ThresholdSpec::Fixed(t),
        (None, Some(r)) => ThresholdSpec::TargetSkip(r),
        (None, None) => return Err(input_err("one of --threshold or --target-skip is required".into())),
        (Some(_), Some(_)) => return Err(input_err("--threshold and --target-skip are exclusive".into())),
    };
    let (ThresholdSpec::Fixed(t) | ThresholdSpec::TargetSkip(t)) = threshold;
    if !(0.0..=1.0).contains(&t) {
        return Err(input_err(format!("threshold/target-skip must be in [0,1], got {t}")));
    }
    let on_provider_error = match a.on_provider_error.as_str() {
        "abort" => ProviderPolicy::Abort,
        "skip-gating" => ProviderPolicy::SkipGating,
        s => return Err(input_err(format!("unknown --on-provider-error {s:?}"))),
    };
    let params = adaptive_params(a);
    params.validate().or_input("adaptive parameters")?;

    let (enhancer, baseline): (Box<dyn Enhancer>, Option<BaselineConfig>) = match a.enhancer.as_str() {
        "baseline" => {
            let d = BaselineConfig::default();
            let cfg = BaselineConfig {
                base_strength: a.strength.unwrap_or(d.base_strength),
                saturation_boost: a.saturation_boost.unwrap_or(d.saturation_boost),
                percentile_clip: a.percentile_clip.unwrap_or(d.percentile_clip),
            };
            let enh = BaselineEnhancer::new(cfg.clone()).or_input("baseline enhancer")?;
            (Box::new(enh), Some(cfg))
        }
        s => match s.strip_prefix("external:") {
            Some(dir) if Path::new(dir).is_dir() => (Box::new(ExternalEnhancer::new(dir)), None),
            Some(dir) => return Err(input_err(format!("external result directory {dir:?} does not exist"))),
            None => return Err(input_err(format!("unknown enhancer {s:?} (baseline or external:DIR)"))),
        },
    };

    let uncertainty = (a.uncertainty && !a.no_uncertainty).then_some(StochasticConfig {
        passes: a.passes,
        gain_jitter_sigma: a.jitter_sigma,
        pass_drop_prob: a.drop_prob,
        seed,
    });
    if let Some(u) = &uncertainty {
        u.validate().or_input("uncertainty settings")?;
    }

    let manifest = load_manifest_arg(&a.manifest)?;
    let provider = run_provider(seed, a)?;
    ensure_dir(&a.out)?;

    let opts = RunOptions {
        threshold,
        params: params.clone(),
        seed,
        uncertainty: uncertainty.clone(),
        review_threshold: a.review_threshold,
        on_provider_error,
        prompt_prefix: a.prompt_prefix.clone(),
        out_dir: Some(a.out.clone()),
    };
    let outcome = run_pipeline(&manifest, provider.as_ref(), enhancer.as_ref(), &opts).or_input("run")?;

    let config = RunConfig {
        manifest: a.manifest.display().to_string(),
        provider: provider.describe(),
        enhancer: enhancer.describe(),
        seed,
        threshold,
        effective_threshold: outcome.threshold,
        params,
        baseline,
        uncertainty,
        review_threshold: a.review_threshold,
        on_provider_error,
        prompt_prefix: a.prompt_prefix.clone(),
        metric_definitions: METRIC_DEFINITION_VERSION.to_string(),
    };
    let report = RunReport::new(config, outcome.records).or_input("building report")?;
    write_run_report(&report, &a.out.join("run.json")).or_input("writing run.json")?;
    write_csv(&report, &a.out.join("run.csv")).or_input("writing run.csv")?;
    if let Some(means) = report.aggregates.metric_means {
        let table = render_metric_table(&[(a.enhancer.clone(), means)]);
        write_file(&a.out.join("metrics.md"), table.as_bytes())?;
    }

    for r in report.records.iter().filter(|r| r.decision == Decision::Failed) {
        eprintln!("failed {}: {}", r.id, r.error.as_deref().unwrap_or("unknown error"));
    }
    for r in report.records.iter().filter(|r| r.decision != Decision::Failed) {
        if let Some(e) = &r.error {
            eprintln!("warning {}: {e}", r.id);
        }
    }
    println!("{}", report.summary_line());

    let agg = &report.aggregates;
    if agg.failed as f64 > MAX_FAILED_SHARE * agg.n as f64 {
        eprintln!("{} of {} images failed", agg.failed, agg.n);
        return Ok(EXIT_PARTIAL);
    }
    Ok(0)
}

fn parse_results(spec: &str) -> Result<(String, PathBuf), Failure> {
    let (name, dir) = match spec.split_once('=') {
        Some((n, d)) if !n.is_empty() => (n.to_string(), PathBuf::from(d)),
        _ => {
            let dir = PathBuf::from(spec);
            let name = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .ok_or_else(|| input_err(format!("cannot name model for --results {spec:?}; use NAME=DIR")))?;
            (name, dir)
        }
    };
    if !dir.is_dir() {
        return Err(input_err(format!("result directory {} does not exist", dir.display())));
    }
    Ok((name, dir))
}

#[derive(serde::Serialize)]
struct ModelEval {
    evaluated: usize,
    means: Option<MetricSet>,
    images: IndexMap<String, MetricSet>,
    problems: IndexMap<String, String>,
}

fn cmd_eval(a: &EvalArgs) -> Outcome {
    let manifest = load_manifest_arg(&a.pairs)?;
    if let Some(e) = manifest.entries.iter().find(|e| e.gt_path.is_none()) {
        return Err(input_err(format!("entry {:?} has no gt path", e.id)));
    }
    let mut models = Vec::new();
    for spec in &a.results {
        models.push(parse_results(spec)?);
    }
    models.sort_by(|x, y| x.0.cmp(&y.0));
    if let Some(w) = models.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(input_err(format!("model name {:?} given twice", w[0].0)));
    }

    let mut out: IndexMap<String, ModelEval> = IndexMap::new();
    let mut rows = Vec::new();
    let mut problems = 0usize;
    for (name, dir) in &models {
        let scored = par::map(&manifest.entries, |e| -> Result<MetricSet, String> {
            let path = find_result(dir, &e.id).ok_or_else(|| "missing result".to_string())?;
            let res = load_image(&path).map_err(|err| err.to_string())?;
            let gt = load_image(e.gt_path.as_ref().expect("checked")).map_err(|err| err.to_string())?;
            evaluate_pair(&res, &gt).map_err(|err| err.to_string())
        });
        let mut me = ModelEval {
            evaluated: 0,
            means: None,
            images: IndexMap::new(),
            problems: IndexMap::new(),
        };
        for (e, r) in manifest.entries.iter().zip(scored) {
            match r {
                Ok(m) => {
                    me.images.insert(e.id.clone(), m);
                }
                Err(msg) => {
                    eprintln!("{name}: {}: {msg}", e.id);
                    me.problems.insert(e.id.clone(), msg);
                }
            }
        }
        problems += me.problems.len();
        me.evaluated = me.images.len();
        let list: Vec<MetricSet> = me.images.values().copied().collect();
        me.means = dataset_means(&list).ok();
        if let Some(m) = me.means {
            rows.push((name.clone(), m));
        }
        out.insert(name.clone(), me);
    }

    ensure_dir(&a.out)?;
    let json = serde_json::to_string_pretty(&out).or_input("serialising evaluation")? + "\n";
    write_file(&a.out.join("metrics.json"), json.as_bytes())?;
    let table = render_metric_table(&rows);
    write_file(&a.out.join("metrics.md"), table.as_bytes())?;
    print!("{table}");
    if problems > 0 {
        eprintln!("{problems} result(s) missing or unreadable");
        return Ok(EXIT_PARTIAL);
    }
    Ok(0)
}

fn cmd_ablation(a: &AblationArgs) -> Outcome {
    let gated = RunReport::load(&a.gated).or_input(&format!("loading {}", a.gated.display()))?;
    let full = RunReport::load(&a.full).or_input(&format!("loading {}", a.full.display()))?;
    let rows = ablation_table(&gated, &full).or_input("ablation")?;
    let table = render_ablation(&rows, a.reported_drop);
    ensure_parent(&a.out)?;
    write_file(&a.out, table.as_bytes())?;
    print!("{table}");
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use eba_core::embed::EmbedError;

    #[test]
    fn provider_specs() {
        assert!(provider_from_spec("test", 1).is_ok());
        assert!(provider_from_spec("remote:http://127.0.0.1:9", 1).is_ok());
        assert_eq!(provider_from_spec("bogus", 1).err().map(|f| f.code), Some(EXIT_INPUT));
        assert_eq!(provider_from_spec("remote:", 1).err().map(|f| f.code), Some(EXIT_INPUT));
    }

    #[test]
    fn auto_perplexity_respects_limit() {
        assert_eq!(auto_perplexity(1000), 30.0);
        for n in 4..100 {
            let p = auto_perplexity(n);
            assert!(p > 0.0 && p < (n - 1) as f64 / 3.0, "n={n} p={p}");
        }
    }

    #[test]
    fn results_spec_names() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("WaterNet");
        fs::create_dir(&d).unwrap();
        let (n, p) = parse_results(d.to_str().unwrap()).unwrap();
        assert_eq!((n.as_str(), p), ("WaterNet", d.clone()));
        let (n, _) = parse_results(&format!("Mine={}", d.display())).unwrap();
        assert_eq!(n, "Mine");
        assert!(parse_results("/definitely/not/here").is_err());
    }

    #[test]
    fn unavailable_is_input_error() {
        let r: Result<(), EmbedError> = Err(EmbedError::ProviderUnavailable("down".into()));
        assert_eq!(r.or_input("x").unwrap_err().code, EXIT_INPUT);
    }
}
