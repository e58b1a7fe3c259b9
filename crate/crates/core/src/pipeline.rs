//! Batch run: embed, gate, plan, enhance, evaluate.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adaptive::{plan, AdaptiveError, AdaptiveParams, CostUnits};
use crate::embed::{clarity_score, similarity_profile, EmbedError, EmbeddingProvider, PromptSet};
use crate::enhance::{calibrate_threshold, gate, EnhanceError, Enhancer, GateAction};
use crate::imaging::{load_image, save_image, DatasetManifest, ImageBuf, ManifestEntry};
use crate::metrics::{evaluate_pair, MetricSet};
use crate::par;
use crate::uncertainty::{mc_variance, save_variance_png, StochasticConfig, UncertaintyError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("embedding provider failed: {0}")]
    Provider(EmbedError),
    #[error(transparent)]
    Threshold(#[from] EnhanceError),
    #[error(transparent)]
    Params(#[from] AdaptiveError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error("no image could be scored, cannot calibrate a threshold")]
    NothingToCalibrate,
}

/// How the gate threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "value")]
pub enum ThresholdSpec {
    Fixed(f64),
    TargetSkip(f64),
}

/// What to do when the embedding provider is unreachable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderPolicy {
    #[default]
    Abort,
    /// Enhance every image without gating.
    SkipGating,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub threshold: ThresholdSpec,
    pub params: AdaptiveParams,
    pub seed: u64,
    /// Stochastic passes for enhanced images; the seed field is replaced per image.
    pub uncertainty: Option<StochasticConfig>,
    pub review_threshold: f64,
    pub on_provider_error: ProviderPolicy,
    pub prompt_prefix: String,
    /// Where outputs go; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Skip,
    Enhance,
    Failed,
}

impl Decision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Decision::Skip => "skip",
            Decision::Enhance => "enhance",
            Decision::Failed => "failed",
        }
    }
}

/// Outcome for one manifest entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub dataset: String,
    pub decision: Decision,
    /// Absent when gating was disabled or the image could not be embedded.
    pub clarity: Option<f64>,
    pub cost: CostUnits,
    /// Relative to the output directory.
    pub output_path: Option<String>,
    pub metrics: Option<MetricSet>,
    pub uncertainty: Option<f64>,
    pub flagged: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub records: Vec<RunRecord>,
    /// Effective threshold; `None` when gating was disabled.
    pub threshold: Option<f64>,
}

/// Per-image seed derived from the global seed and the image id.
pub fn image_seed(seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn failed(e: &ManifestEntry, clarity: Option<f64>, msg: String) -> RunRecord {
    RunRecord {
        id: e.id.clone(),
        dataset: e.dataset_label.clone(),
        decision: Decision::Failed,
        clarity,
        cost: CostUnits::default(),
        output_path: None,
        metrics: None,
        uncertainty: None,
        flagged: None,
        error: Some(msg),
    }
}

fn skipped_name(e: &ManifestEntry) -> String {
    match e.input_path.extension().and_then(|x| x.to_str()) {
        Some(ext) => format!("{}.{ext}", e.id),
        None => e.id.clone(),
    }
}

fn metrics_against_gt(out: &ImageBuf, gt: Option<&Path>) -> Result<Option<MetricSet>, String> {
    let Some(gt) = gt else { return Ok(None) };
    let gt = load_image(gt).map_err(|e| format!("ground truth: {e}"))?;
    evaluate_pair(out, &gt).map(Some).map_err(|e| format!("metrics: {e}"))
}

fn process(
    e: &ManifestEntry,
    action: GateAction,
    clarity: Option<f64>,
    enhancer: &dyn Enhancer,
    opts: &RunOptions,
) -> RunRecord {
    let img = match load_image(&e.input_path) {
        Ok(img) => img,
        Err(err) => return failed(e, clarity, err.to_string()),
    };
    let (w, h) = img.dims();
    let mut rec = RunRecord {
        id: e.id.clone(),
        dataset: e.dataset_label.clone(),
        decision: Decision::Skip,
        clarity,
        cost: CostUnits::skipped(w, h, opts.params.d_max),
        output_path: None,
        metrics: None,
        uncertainty: None,
        flagged: None,
        error: None,
    };

    let output = match action {
        GateAction::Skip => {
            if let Some(dir) = &opts.out_dir {
                let rel = format!("skipped/{}", skipped_name(e));
                let copied = fs::create_dir_all(dir.join("skipped"))
                    .and_then(|_| fs::copy(&e.input_path, dir.join(&rel)));
                if let Err(err) = copied {
                    return failed(e, clarity, format!("copy: {err}"));
                }
                rec.output_path = Some(rel);
            }
            img
        }
        GateAction::Enhance => {
            rec.decision = Decision::Enhance;
            let (p, cost) = match plan(&img, &opts.params) {
                Ok(v) => v,
                Err(err) => return failed(e, clarity, err.to_string()),
            };
            rec.cost = cost;
            let out = match enhancer.enhance(&e.id, &img, &p, None) {
                Ok(o) => o,
                Err(err) => return failed(e, clarity, err.to_string()),
            };
            if let Some(cfg) = &opts.uncertainty {
                let cfg = StochasticConfig {
                    seed: image_seed(opts.seed, &e.id),
                    ..cfg.clone()
                };
                match mc_variance(&e.id, &img, &p, enhancer, &cfg, opts.review_threshold) {
                    Ok(v) => {
                        if let Some(dir) = &opts.out_dir {
                            if let Err(err) = save_variance_png(&v, &dir.join("uncertainty").join(format!("{}.png", e.id))) {
                                return failed(e, clarity, format!("variance map: {err}"));
                            }
                        }
                        rec.uncertainty = Some(v.scalar);
                        rec.flagged = Some(v.flagged);
                    }
                    Err(err) => return failed(e, clarity, err.to_string()),
                }
            }
            if let Some(dir) = &opts.out_dir {
                let rel = format!("enhanced/{}.png", e.id);
                if let Err(err) = save_image(&out, &dir.join(&rel)) {
                    return failed(e, clarity, err.to_string());
                }
                rec.output_path = Some(rel);
            }
            out
        }
    };

    match metrics_against_gt(&output, e.gt_path.as_deref()) {
        Ok(m) => rec.metrics = m,
        Err(msg) => rec.error = Some(msg),
    }
    rec
}

/// Runs the gated pipeline over `manifest`. Records follow manifest order.
pub fn run_pipeline(
    manifest: &DatasetManifest,
    provider: &dyn EmbeddingProvider,
    enhancer: &dyn Enhancer,
    opts: &RunOptions,
) -> Result<RunOutcome, PipelineError> {
    if manifest.is_empty() {
        return Err(PipelineError::EmptyManifest);
    }
    opts.params.validate()?;
    if let Some(u) = &opts.uncertainty {
        u.validate()?;
    }

    let unavailable = |err: EmbedError| -> Result<(), PipelineError> {
        match (err, opts.on_provider_error) {
            (EmbedError::ProviderUnavailable(_), ProviderPolicy::SkipGating) => Ok(()),
            (err, _) => Err(PipelineError::Provider(err)),
        }
    };

    // Scores: Ok(Some) scored, Ok(None) gating disabled, Err(msg) per-image failure.
    let scores: Vec<Result<Option<f64>, String>> = match PromptSet::from_provider(provider, &opts.prompt_prefix) {
        Err(err) => {
            unavailable(err)?;
            vec![Ok(None); manifest.len()]
        }
        Ok(prompts) => {
            let raw = par::map(&manifest.entries, |e| provider.embed_image(&e.id, &e.input_path));
            let mut out = Vec::with_capacity(raw.len());
            let mut gating = true;
            for r in raw {
                match r {
                    Ok(emb) => out.push(
                        similarity_profile(&emb, &prompts)
                            .map(|p| Some(clarity_score(&p)))
                            .map_err(|e| e.to_string()),
                    ),
                    Err(EmbedError::ProviderUnavailable(m)) => {
                        unavailable(EmbedError::ProviderUnavailable(m))?;
                        gating = false;
                        out.push(Ok(None));
                    }
                    Err(err) => out.push(Err(err.to_string())),
                }
            }
            if gating {
                out
            } else {
                vec![Ok(None); manifest.len()]
            }
        }
    };

    let gating = scores.iter().any(|s| matches!(s, Ok(Some(_))));
    let threshold = if !gating {
        None
    } else {
        Some(match opts.threshold {
            ThresholdSpec::Fixed(t) => t,
            ThresholdSpec::TargetSkip(r) => {
                let valid: Vec<f64> = scores.iter().filter_map(|s| s.clone().ok().flatten()).collect();
                if valid.is_empty() {
                    return Err(PipelineError::NothingToCalibrate);
                }
                calibrate_threshold(&valid, r)?
            }
        })
    };

    let work: Vec<(&ManifestEntry, &Result<Option<f64>, String>)> = manifest.entries.iter().zip(&scores).collect();
    let records = par::map(&work, |(e, s)| match s {
        Err(msg) => failed(e, None, msg.clone()),
        Ok(score) => {
            let action = match (score, threshold) {
                (Some(sc), Some(t)) => gate(*sc, t).action,
                _ => GateAction::Enhance,
            };
            process(e, action, *score, enhancer, opts)
        }
    });
    Ok(RunOutcome { records, threshold })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::test_provider;
    use crate::enhance::BaselineEnhancer;
    use crate::imaging::save_image;

    fn write_set(dir: &Path, n: usize) -> DatasetManifest {
        let mut entries = Vec::new();
        for i in 0..n {
            let img = ImageBuf::from_fn(40, 36, |x, y| {
                let v = ((x * 7 + y * 3 + i * 11) % 17) as f64 / 17.0;
                [v * 0.6, v * 0.8, 0.3 + 0.5 * v]
            });
            let gt = ImageBuf::from_fn(40, 36, |x, y| {
                let v = ((x * 7 + y * 3 + i * 11) % 17) as f64 / 17.0;
                [v, v, v]
            });
            let input = dir.join(format!("in_{i}.png"));
            let gt_path = dir.join(format!("gt_{i}.png"));
            save_image(&img, &input).unwrap();
            save_image(&gt, &gt_path).unwrap();
            entries.push(ManifestEntry {
                id: format!("img{i}"),
                input_path: input,
                gt_path: Some(gt_path),
                dataset_label: if i % 2 == 0 { "A" } else { "B" }.into(),
            });
        }
        DatasetManifest { entries }
    }

    fn opts(t: ThresholdSpec, out: Option<PathBuf>) -> RunOptions {
        RunOptions {
            threshold: t,
            params: AdaptiveParams {
                tile: 16,
                overlap: 4,
                ..Default::default()
            },
            seed: 42,
            uncertainty: None,
            review_threshold: 1e-3,
            on_provider_error: ProviderPolicy::Abort,
            prompt_prefix: "a photo of ".into(),
            out_dir: out,
        }
    }

    #[test]
    fn threshold_extremes() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_set(dir.path(), 4);
        let p = test_provider(1);
        let enh = BaselineEnhancer::default();
        let all = run_pipeline(&m, &p, &enh, &opts(ThresholdSpec::Fixed(0.0), None)).unwrap();
        assert!(all.records.iter().all(|r| r.decision == Decision::Skip && r.cost.units == 0));
        let none = run_pipeline(&m, &p, &enh, &opts(ThresholdSpec::Fixed(1.0), None)).unwrap();
        assert!(none.records.iter().all(|r| r.decision == Decision::Enhance));
        assert!(none.records.iter().all(|r| r.metrics.is_some()));
    }

    #[test]
    fn outputs_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_set(dir.path(), 6);
        let out = dir.path().join("out");
        let r = run_pipeline(
            &m,
            &test_provider(2),
            &BaselineEnhancer::default(),
            &opts(ThresholdSpec::TargetSkip(0.5), Some(out.clone())),
        )
        .unwrap();
        let ids: Vec<&str> = r.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["img0", "img1", "img2", "img3", "img4", "img5"]);
        let skipped: Vec<&RunRecord> = r.records.iter().filter(|r| r.decision == Decision::Skip).collect();
        assert_eq!(skipped.len(), 3);
        for s in skipped {
            let src = &m.entries.iter().find(|e| e.id == s.id).unwrap().input_path;
            let copy = out.join(s.output_path.as_ref().unwrap());
            assert_eq!(fs::read(src).unwrap(), fs::read(copy).unwrap());
        }
        for e in r.records.iter().filter(|r| r.decision == Decision::Enhance) {
            assert!(out.join(format!("enhanced/{}.png", e.id)).exists());
        }
    }

    #[test]
    fn decode_errors_are_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = write_set(dir.path(), 2);
        let bad = dir.path().join("bad.png");
        fs::write(&bad, b"nope").unwrap();
        m.entries[1].input_path = bad;
        let r = run_pipeline(&m, &test_provider(1), &BaselineEnhancer::default(), &opts(ThresholdSpec::Fixed(1.0), None)).unwrap();
        assert_eq!(r.records[0].decision, Decision::Enhance);
        assert_eq!(r.records[1].decision, Decision::Failed);
        assert!(r.records[1].error.is_some());
    }

    struct Down;
    impl EmbeddingProvider for Down {
        fn embed_image(&self, _: &str, _: &Path) -> Result<crate::embed::Embedding, EmbedError> {
            Err(EmbedError::ProviderUnavailable("down".into()))
        }
        fn embed_text(&self, _: &str) -> Result<crate::embed::Embedding, EmbedError> {
            Err(EmbedError::ProviderUnavailable("down".into()))
        }
        fn describe(&self) -> String {
            "down".into()
        }
    }

    #[test]
    fn provider_policy() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_set(dir.path(), 2);
        let enh = BaselineEnhancer::default();
        let mut o = opts(ThresholdSpec::Fixed(0.0), None);
        assert!(matches!(run_pipeline(&m, &Down, &enh, &o), Err(PipelineError::Provider(_))));
        o.on_provider_error = ProviderPolicy::SkipGating;
        let r = run_pipeline(&m, &Down, &enh, &o).unwrap();
        assert_eq!(r.threshold, None);
        assert!(r.records.iter().all(|r| r.decision == Decision::Enhance && r.clarity.is_none()));
    }

    #[test]
    fn uncertainty_is_schedule_independent() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_set(dir.path(), 3);
        let mut o = opts(ThresholdSpec::Fixed(1.0), None);
        o.uncertainty = Some(StochasticConfig {
            passes: 4,
            ..Default::default()
        });
        let p = test_provider(5);
        let enh = BaselineEnhancer::default();
        let a = run_pipeline(&m, &p, &enh, &o).unwrap();
        let mut rev = m.clone();
        rev.entries.reverse();
        let b = run_pipeline(&rev, &p, &enh, &o).unwrap();
        for r in &a.records {
            let other = b.records.iter().find(|x| x.id == r.id).unwrap();
            assert_eq!(r.uncertainty, other.uncertainty);
            assert!(r.uncertainty.unwrap() >= 0.0);
        }
    }

    #[test]
    fn seeds_differ_per_image() {
        assert_ne!(image_seed(42, "a"), image_seed(42, "b"));
        assert_ne!(image_seed(42, "a"), image_seed(43, "a"));
        assert_eq!(image_seed(42, "a"), image_seed(42, "a"));
    }
}
