//! Command implementations.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use svbackend::data::{EmbeddingSet, Model, ScoreSet, Trial, TrialList};
use svbackend::error::{Error, Result};
use svbackend::io::{self, EmbeddingFormat};
use svbackend::logit::CompactFactor;
use svbackend::metrics;
use svbackend::mixture::{self, PldaMixture};
use svbackend::pipeline::{self, ScoreOptions, ScoringBackend};
use svbackend::plda::{self, PldaModel};
use svbackend::preprocess::{covariance_spectra, PreprocessChain, Transform};
use svbackend::recipe;
use svbackend::score_norm::{self, ChannelStats};
use svbackend::synth;

use crate::config::{BackendKind, PipelineConfig};
use crate::Command;

pub struct Context {
    pub cfg: PipelineConfig,
    pub seed: Option<u64>,
    pub format: Option<EmbeddingFormat>,
}

impl Context {
    fn load_embeddings(&self, path: &Path, meta: Option<&PathBuf>) -> Result<EmbeddingSet> {
        let format = self.format.unwrap_or_else(|| EmbeddingFormat::infer(path));
        let set = io::load_embeddings(path, format)?;
        match meta {
            Some(m) => {
                let table = io::load_metadata(m)?;
                Ok(set.with_metadata(&table))
            }
            None => Ok(set),
        }
    }

    fn score_options(&self) -> ScoreOptions {
        ScoreOptions {
            enroll_mode: self.cfg.enroll_mode,
            ..ScoreOptions::default()
        }
    }

    /// Assemble the scoring backend from config kind and artifact paths.
    fn backend(
        &self,
        model: Option<&PathBuf>,
        factor: Option<&PathBuf>,
        head: Option<&PathBuf>,
    ) -> Result<ScoringBackend> {
        match self.cfg.backend {
            BackendKind::Plda => {
                let path = model.ok_or_else(|| {
                    Error::config("backend 'plda' requires --model <model.json>")
                })?;
                check_model_kind(path, false)?;
                Ok(ScoringBackend::Plda(PldaModel::load(path)?))
            }
            BackendKind::Mixture => {
                let path = model.ok_or_else(|| {
                    Error::config("backend 'mixture' requires --model <mixture.json>")
                })?;
                check_model_kind(path, true)?;
                Ok(ScoringBackend::Mixture(PldaMixture::load(path)?))
            }
            BackendKind::Cosine => Ok(ScoringBackend::Cosine),
            BackendKind::CosineCl => match (factor, head) {
                (Some(path), _) => Ok(ScoringBackend::CosineCl(CompactFactor::load(path)?)),
                (None, Some(path)) => {
                    let head = svbackend::logit::ClassifierHead::load(path)?;
                    Ok(ScoringBackend::CosineCl(svbackend::logit::compact_factor(&head)?))
                }
                (None, None) => Err(Error::config(
                    "backend 'cosine-cl' requires --factor <factor.json> or --head <head.f32>",
                )),
            },
        }
    }
}

/// Reject a mixture file passed to the plda backend and vice versa.
fn check_model_kind(path: &Path, want_mixture: bool) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::parse(path, 1, format!("bad model file: {e}")))?;
    let is_mixture = value.get("components").is_some();
    if is_mixture != want_mixture {
        return Err(Error::data(format!(
            "{}: model kind does not match configured backend (expected {})",
            path.display(),
            if want_mixture { "mixture" } else { "plda" }
        )));
    }
    Ok(())
}

fn load_chain(path: Option<&PathBuf>) -> Result<Option<PreprocessChain>> {
    match path {
        Some(p) => Ok(Some(PreprocessChain::load(p)?)),
        None => Ok(None),
    }
}

pub fn run(ctx: &Context, command: Command) -> Result<()> {
    match command {
        Command::FitChain { train, meta, recipe: recipe_arg, pre_factor, out } => {
            cmd_fit_chain(ctx, &train, meta.as_ref(), recipe_arg.as_deref(), pre_factor.as_ref(), &out)
        }
        Command::Train { train, meta, chain, out } => {
            cmd_train(ctx, &train, meta.as_ref(), chain.as_ref(), &out)
        }
        Command::Score { emb, meta, models, trials, chain, model, factor, head, out } => {
            cmd_score(
                ctx,
                &emb,
                meta.as_ref(),
                &models,
                &trials,
                chain.as_ref(),
                model.as_ref(),
                factor.as_ref(),
                head.as_ref(),
                &out,
            )
        }
        Command::Normalize {
            scores,
            emb,
            meta,
            models,
            chain,
            model,
            factor,
            head,
            cohort_emb,
            cohort_meta,
            dev_scores,
            channel_stats,
            save_channel_stats,
            dump_intermediate,
            out,
        } => cmd_normalize(
            ctx,
            NormalizeArgs {
                scores,
                emb,
                meta,
                models,
                chain,
                model,
                factor,
                head,
                cohort_emb,
                cohort_meta,
                dev_scores,
                channel_stats,
                save_channel_stats,
                dump_intermediate,
                out,
            },
        ),
        Command::Eval { scores, det } => cmd_eval(ctx, &scores, det.as_ref()),
        Command::Diagnose { emb, meta, chain, out } => {
            cmd_diagnose(ctx, &emb, meta.as_ref(), chain.as_ref(), &out)
        }
        Command::Synth { spec, out_prefix } => cmd_synth(ctx, &spec, &out_prefix),
    }
}

fn cmd_fit_chain(
    ctx: &Context,
    train: &Path,
    meta: Option<&PathBuf>,
    recipe_arg: Option<&str>,
    pre_factor: Option<&PathBuf>,
    out: &Path,
) -> Result<()> {
    let set = ctx.load_embeddings(train, meta)?;
    let recipe_str = recipe_arg.unwrap_or(&ctx.cfg.recipe);
    let steps = recipe::parse_recipe(recipe_str)?;

    let (prefix_steps, fit_input) = match pre_factor {
        Some(path) => {
            let factor = CompactFactor::load(path)?;
            let projection = Transform::LinearMap {
                matrix: factor.matrix().clone(),
            };
            let ln = Transform::LengthNorm { dim: factor.dim() };
            let prefix = PreprocessChain::new(vec![projection, ln])?;
            let projected = prefix.apply(&set)?;
            (prefix.steps().to_vec(), projected)
        }
        None => (Vec::new(), set),
    };

    let (fitted, summary) = recipe::fit_chain(&fit_input, &steps)?;
    let mut all_steps = prefix_steps;
    for (i, s) in all_steps.iter().enumerate() {
        println!("step {}: {} ({} -> {})", i + 1, s.kind(), s.in_dim(), s.out_dim());
    }
    let offset = all_steps.len();
    for (i, line) in summary.iter().enumerate() {
        println!("step {}: {line}", offset + i + 1);
    }
    all_steps.extend(fitted.steps().iter().cloned());
    let chain = PreprocessChain::new(all_steps)?;
    chain.save(out)?;
    Ok(())
}

fn cmd_train(
    ctx: &Context,
    train: &Path,
    meta: Option<&PathBuf>,
    chain: Option<&PathBuf>,
    out: &Path,
) -> Result<()> {
    let set = ctx.load_embeddings(train, meta)?;
    let chain = load_chain(chain)?;
    let prepared = match &chain {
        Some(c) if !c.is_empty() => c.apply(&set)?,
        _ => set,
    };
    let opts = ctx.cfg.train_options(ctx.seed);
    match ctx.cfg.backend {
        BackendKind::Plda => {
            let model = plda::train_plda(&prepared, &opts)?;
            model.save(out)?;
            println!(
                "plda dim={} iterations={} loglik={}",
                model.dim(),
                model.iterations_run,
                model.final_loglik
            );
        }
        BackendKind::Mixture => {
            let mix = mixture::train_mixture(&prepared, &ctx.cfg.languages, &opts)?;
            mix.save(out)?;
            println!(
                "mixture components={} dim={} languages={}",
                mix.len(),
                mix.dim(),
                ctx.cfg.languages.join(",")
            );
        }
        other => {
            return Err(Error::config(format!(
                "backend '{}' has no trainable model",
                other.as_str()
            )))
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_score(
    ctx: &Context,
    emb: &Path,
    meta: Option<&PathBuf>,
    models: &Path,
    trials: &Path,
    chain: Option<&PathBuf>,
    model: Option<&PathBuf>,
    factor: Option<&PathBuf>,
    head: Option<&PathBuf>,
    out: &Path,
) -> Result<()> {
    let set = ctx.load_embeddings(emb, meta)?;
    let list = io::load_trials(trials, models)?;
    let chain = load_chain(chain)?;
    let backend = ctx.backend(model, factor, head)?;
    let scores = pipeline::score_trials(&backend, chain.as_ref(), &set, &list, &ctx.score_options())?;
    io::write_scores(&scores, out)?;
    println!("scored {} trials with backend {}", scores.len(), backend.kind());
    Ok(())
}

struct NormalizeArgs {
    scores: PathBuf,
    emb: Option<PathBuf>,
    meta: Option<PathBuf>,
    models: Option<PathBuf>,
    chain: Option<PathBuf>,
    model: Option<PathBuf>,
    factor: Option<PathBuf>,
    head: Option<PathBuf>,
    cohort_emb: Option<PathBuf>,
    cohort_meta: Option<PathBuf>,
    dev_scores: Option<PathBuf>,
    channel_stats: Option<PathBuf>,
    save_channel_stats: Option<PathBuf>,
    dump_intermediate: Option<PathBuf>,
    out: PathBuf,
}

/// Rebuild a trial list from scored entries plus the models file, so the
/// cohort machinery sees exactly the trials behind the scores.
fn trial_list_from_scores(scores: &ScoreSet, models_path: &Path) -> Result<TrialList> {
    let text = std::fs::read_to_string(models_path)?;
    let mut models = Vec::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or_default();
        let segs = fields.next().unwrap_or_default();
        models.push(Model {
            id: id.to_string(),
            segments: segs.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect(),
        });
    }
    let trials = scores
        .entries
        .iter()
        .map(|e| Trial {
            model_id: e.model_id.clone(),
            test_id: e.test_id.clone(),
            key: e.key,
            trial_type: e.trial_type,
        })
        .collect();
    TrialList::new(models, trials)
}

fn cmd_normalize(ctx: &Context, args: NormalizeArgs) -> Result<()> {
    let scores = io::load_scores(&args.scores)?;
    let mut current = scores;

    if ctx.cfg.snorm_enabled {
        let emb_path = args.emb.as_ref().ok_or_else(|| {
            Error::config("s-norm requires --emb (trial embeddings)")
        })?;
        let models_path = args.models.as_ref().ok_or_else(|| {
            Error::config("s-norm requires --models (enrollment definitions)")
        })?;
        let cohort_path = args.cohort_emb.as_ref().ok_or_else(|| {
            Error::config("s-norm requires --cohort-emb (cohort embeddings)")
        })?;
        let set = ctx.load_embeddings(emb_path, args.meta.as_ref())?;
        let cohort_set = ctx.load_embeddings(cohort_path, args.cohort_meta.as_ref())?;
        let cohort = score_norm::build_cohort(&cohort_set)?;
        let list = trial_list_from_scores(&current, models_path)?;
        let chain = load_chain(args.chain.as_ref())?;
        let backend = ctx.backend(args.model.as_ref(), args.factor.as_ref(), args.head.as_ref())?;
        let cs = pipeline::cohort_scores(
            &backend,
            chain.as_ref(),
            &set,
            &list,
            &cohort,
            &ctx.score_options(),
        )?;
        current = score_norm::adaptive_snorm(
            &current,
            &cs.per_model,
            &cs.per_segment,
            ctx.cfg.snorm_top_n,
        )?;
    }

    if let Some(path) = &args.dump_intermediate {
        io::write_scores(&current, path)?;
    }

    if ctx.cfg.channel_norm_enabled {
        let stats = if let Some(dev) = &args.dev_scores {
            let dev_scores = io::load_scores(dev)?;
            score_norm::fit_channel_stats(&dev_scores)?
        } else if let Some(path) = &args.channel_stats {
            ChannelStats::load(path)?
        } else if let Some(path) = &ctx.cfg.channel_stats_path {
            ChannelStats::load(path)?
        } else {
            return Err(Error::config(
                "channel norm requires --dev-scores, --channel-stats, or channel_norm.stats_path",
            ));
        };
        if let Some(path) = &args.save_channel_stats {
            stats.save(path)?;
        }
        current = score_norm::channel_norm(&current, &stats)?;
    } else if let Some(path) = &args.save_channel_stats {
        if let Some(dev) = &args.dev_scores {
            let dev_scores = io::load_scores(dev)?;
            score_norm::fit_channel_stats(&dev_scores)?.save(path)?;
        }
    }

    io::write_scores(&current, &args.out)?;
    println!(
        "normalized {} scores (s-norm={}, channel-norm={})",
        current.len(),
        ctx.cfg.snorm_enabled,
        ctx.cfg.channel_norm_enabled
    );
    Ok(())
}

fn cmd_eval(ctx: &Context, scores_path: &Path, det: Option<&PathBuf>) -> Result<()> {
    let scores = io::load_scores(scores_path)?;
    let report = metrics::evaluate(&scores, &ctx.cfg.cost)?;
    if let Some(path) = det {
        let points = metrics::det_points(&scores)?;
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "threshold\tp_miss\tp_fa")?;
        for p in points {
            writeln!(w, "{}\t{}\t{}", p.threshold, p.p_miss, p.p_fa)?;
        }
        w.flush()?;
    }
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::data(format!("report serialization: {e}")))?;
    println!("{json}");
    Ok(())
}

fn cmd_diagnose(
    ctx: &Context,
    emb: &Path,
    meta: Option<&PathBuf>,
    chain: Option<&PathBuf>,
    out: &Path,
) -> Result<()> {
    let set = ctx.load_embeddings(emb, meta)?;
    let chain = load_chain(chain)?;
    let prepared = match &chain {
        Some(c) if !c.is_empty() => c.apply(&set)?,
        _ => set,
    };
    let spectra = covariance_spectra(&prepared)?;
    let mut w = BufWriter::new(File::create(out)?);
    writeln!(w, "index\ttotal_eig\twithin_diag\tacross_diag")?;
    for i in 0..spectra.total_eigs.len() {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            i, spectra.total_eigs[i], spectra.within_diag[i], spectra.across_diag[i]
        )?;
    }
    w.flush()?;
    println!("wrote {} spectrum points", spectra.total_eigs.len());
    Ok(())
}

fn cmd_synth(ctx: &Context, spec_path: &Path, out_prefix: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec_path)?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("{}: {e}", spec_path.display())))?;
    let trial_spec: Option<synth::TrialSpec> = match value.as_object_mut() {
        Some(obj) => match obj.remove("trials") {
            Some(t) => Some(
                serde_json::from_value(t)
                    .map_err(|e| Error::config(format!("bad trials block: {e}")))?,
            ),
            None => None,
        },
        None => return Err(Error::config("synth spec must be a JSON object")),
    };
    let spec: synth::SynthSpec = serde_json::from_value(value)
        .map_err(|e| Error::config(format!("{}: {e}", spec_path.display())))?;

    let set = synth::sample(&spec)?;
    let format = ctx.format.unwrap_or(EmbeddingFormat::Tsv);
    let emb_path = match format {
        EmbeddingFormat::Tsv => out_prefix.with_extension("tsv"),
        EmbeddingFormat::Raw => out_prefix.with_extension("f32"),
    };
    io::save_embeddings(&set, &emb_path, format)?;
    let meta_path = PathBuf::from(format!("{}.meta.tsv", out_prefix.display()));
    io::save_metadata(&set, &meta_path)?;
    println!(
        "sampled {} segments ({} speakers, dim {})",
        set.len(),
        spec.n_speakers,
        set.dim()
    );

    if let Some(tspec) = trial_spec {
        let list = synth::make_trials(&set, &tspec)?;
        io::save_models(&list, &PathBuf::from(format!("{}.models.tsv", out_prefix.display())))?;
        io::save_trials(&list, &PathBuf::from(format!("{}.trials.tsv", out_prefix.display())))?;
        println!("wrote {} trials over {} models", list.len(), list.models().len());
    }
    Ok(())
}
