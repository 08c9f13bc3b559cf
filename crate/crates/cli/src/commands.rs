use std::collections::BTreeMap;
use std::path::Path;

use distran_core::data::{self, SynthSpec};
use distran_core::domain::{one_hot, sample_attribute_prior, AttributeCode};
use distran_core::inference::{self, RequestMode, TranslationRequest};
use distran_core::metrics::{self, EvalOptions, MetricReport};
use distran_core::training::{self, LoadedModel, RunConfig};
use distran_core::{imageio, report, Mode, RngStream};
use serde_json::json;

use crate::resolve::{self, output_dir, validation, write_resolved, CliError, CliResult};
use crate::{
    Cli, Command, DatasetArgs, EmbedArgs, EvaluateArgs, Global, InterpolateArgs, ReportArgs, TrainArgs,
    TransferArgs, TranslateArgs,
};

pub fn run(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Dataset(a) => dataset(g, a),
        Command::Train(a) => train(g, a),
        Command::Translate(a) => translate(g, a),
        Command::Interpolate(a) => interpolate(g, a),
        Command::Transfer(a) => transfer(g, a),
        Command::Evaluate(a) => evaluate(g, a),
        Command::Embed(a) => embed(g, a),
        Command::Report(a) => report_cmd(g, a),
    }
}

fn load(path: &Path) -> CliResult<LoadedModel> {
    Ok(training::load_models(path)?)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn dataset(g: &Global, a: &DatasetArgs) -> CliResult<()> {
    let mut spec = SynthSpec {
        seed: g.seed.unwrap_or(0),
        ..SynthSpec::default()
    };
    for pair in &a.synth {
        let (k, v) = resolve::parse_pair(pair)?;
        let n = v
            .as_u64()
            .ok_or_else(|| validation(format!("--synth {k} needs a non-negative integer")))? as usize;
        match k.as_str() {
            "k" => spec.k = n,
            "n" => spec.n_per_domain = n,
            "size" => spec.image_size = n,
            _ => return Err(validation(format!("--synth: unknown key `{k}` (expected k, n, size)"))),
        }
    }
    let out = output_dir(g.out.as_deref(), "dataset");
    write_resolved(&out, "dataset", serde_json::to_value(&spec).expect("spec serializes"))?;
    let (ds, _) = data::write_synthetic(&spec, &out)?;
    println!("wrote {} images and labels.json to {}", ds.len(), out.display());
    Ok(())
}

fn parse_mode(s: &str) -> CliResult<Mode> {
    match s {
        "dual" => Ok(Mode::Dual),
        "multi" => Ok(Mode::Multi),
        _ => Err(validation(format!("unknown mode `{s}` (expected dual or multi)"))),
    }
}

fn train(g: &Global, a: &TrainArgs) -> CliResult<()> {
    let (mut hp, explicit) = resolve::hyperparameters(g.config.as_deref(), &g.overrides)?;
    let mut cfg = RunConfig::default();
    if let Some(m) = &a.mode {
        cfg.mode = parse_mode(m)?;
    }
    cfg.seed = g.seed.unwrap_or(cfg.seed);
    cfg.iterations = a.iterations.unwrap_or(cfg.iterations);
    cfg.base_width = a.base_width.unwrap_or(cfg.base_width);
    cfg.checkpoint_every = a.checkpoint_every.unwrap_or(cfg.checkpoint_every);
    cfg.sample_every = a.sample_every.unwrap_or(cfg.sample_every);
    cfg.random_crop = a.random_crop;

    let domains = data::domain_dirs(&a.data)?;
    if !explicit.iter().any(|k| k == "num_domains") {
        hp.num_domains = domains.len();
    }
    cfg.hyperparameters = hp;
    cfg.validate()?;

    let out = output_dir(g.out.as_deref(), "train");
    write_resolved(
        &out,
        "train",
        json!({ "data": path_str(&a.data), "resume": a.resume.as_deref().map(path_str), "run": cfg }),
    )?;
    let ds = data::load_image_folder(&a.data, cfg.load_size())?;
    let outcome = training::train(&cfg, &ds, &out, a.resume.as_deref())?;
    println!(
        "trained to step {}; final checkpoint {}",
        outcome.steps,
        outcome.final_checkpoint.display()
    );
    Ok(())
}

fn translate(g: &Global, a: &TranslateArgs) -> CliResult<()> {
    let lm = load(&a.checkpoint)?;
    let k = lm.models.num_domains();
    let seed = g.seed.unwrap_or(0);
    let request = TranslationRequest {
        source: path_str(&a.input),
        source_domain: a.source_domain,
        target_domain: a.target_domain,
        mode: RequestMode::Random { n_samples: a.n },
        seed,
    };
    request.validate(k)?;
    let out = output_dir(g.out.as_deref(), "translate");
    write_resolved(&out, "translate", json!({ "checkpoint": path_str(&a.checkpoint), "request": request }))?;
    let size = lm.config.hyperparameters.image_size;
    let x = imageio::load_png(&a.input, Some(size))?;
    let (dx, dy) = (one_hot(a.source_domain, k)?, one_hot(a.target_domain, k)?);
    let mut rng = RngStream::new(seed, "translate");
    let imgs = inference::translate_random(&lm.models, &x, &dx, &dy, a.n, &mut rng)?;
    inference::write_outputs(&out, &request, &imgs, &lm.header.content_hash, a.n.min(8))?;
    println!("wrote {} translations to {}", imgs.len(), out.display());
    Ok(())
}

fn attribute_mean(lm: &LoadedModel, path: &Path, domain: usize) -> CliResult<AttributeCode> {
    let k = lm.models.num_domains();
    let img = imageio::load_png(path, Some(lm.config.hyperparameters.image_size))?;
    let zero = vec![0.0; lm.config.hyperparameters.attribute_dim];
    Ok(lm.models.encode_attribute_with_noise(&img, &one_hot(domain, k)?, &zero)?.mean)
}

fn interpolate(g: &Global, a: &InterpolateArgs) -> CliResult<()> {
    let lm = load(&a.checkpoint)?;
    let k = lm.models.num_domains();
    let seed = g.seed.unwrap_or(0);
    let name = |p: &Option<std::path::PathBuf>| p.as_deref().map_or_else(|| "prior".to_string(), path_str);
    let request = TranslationRequest {
        source: path_str(&a.input),
        source_domain: a.source_domain,
        target_domain: a.target_domain,
        mode: RequestMode::Interpolate {
            endpoint_a: name(&a.endpoint_a),
            endpoint_b: name(&a.endpoint_b),
            steps: a.steps,
        },
        seed,
    };
    request.validate(k)?;
    let out = output_dir(g.out.as_deref(), "interpolate");
    write_resolved(&out, "interpolate", json!({ "checkpoint": path_str(&a.checkpoint), "request": request }))?;
    let (a1, a2) = match (&a.endpoint_a, &a.endpoint_b) {
        (Some(pa), Some(pb)) => (attribute_mean(&lm, pa, a.target_domain)?, attribute_mean(&lm, pb, a.target_domain)?),
        _ => {
            let mut rng = RngStream::new(seed, "interpolate");
            let dim = lm.config.hyperparameters.attribute_dim;
            (sample_attribute_prior(dim, &mut rng)?, sample_attribute_prior(dim, &mut rng)?)
        }
    };
    let x = imageio::load_png(&a.input, Some(lm.config.hyperparameters.image_size))?;
    let (dx, dy) = (one_hot(a.source_domain, k)?, one_hot(a.target_domain, k)?);
    let frames = inference::interpolate_attributes(&lm.models, &x, &dx, &dy, &a1, &a2, a.steps)?;
    let violations = inference::monotonicity_violations(&frames)?;
    if violations > 1 {
        log::warn!("distance to the first frame decreased {violations} times along the path");
    }
    inference::write_outputs(&out, &request, &frames, &lm.header.content_hash, a.steps)?;
    println!("wrote {} frames to {}", frames.len(), out.display());
    Ok(())
}

fn transfer(g: &Global, a: &TransferArgs) -> CliResult<()> {
    let lm = load(&a.checkpoint)?;
    let k = lm.models.num_domains();
    let request = TranslationRequest {
        source: path_str(&a.content),
        source_domain: a.content_domain,
        target_domain: a.attribute_domain,
        mode: RequestMode::Transfer {
            attribute_source: path_str(&a.attribute),
            attribute_domain: a.attribute_domain,
        },
        seed: g.seed.unwrap_or(0),
    };
    request.validate(k)?;
    let out = output_dir(g.out.as_deref(), "transfer");
    write_resolved(&out, "transfer", json!({ "checkpoint": path_str(&a.checkpoint), "request": request }))?;
    let size = Some(lm.config.hyperparameters.image_size);
    let c = imageio::load_png(&a.content, size)?;
    let s = imageio::load_png(&a.attribute, size)?;
    let img = inference::translate_transfer(
        &lm.models,
        &c,
        &one_hot(a.content_domain, k)?,
        &s,
        &one_hot(a.attribute_domain, k)?,
    )?;
    inference::write_outputs(&out, &request, &[img], &lm.header.content_hash, 1)?;
    println!("wrote transfer result to {}", out.display());
    Ok(())
}

fn evaluate(g: &Global, a: &EvaluateArgs) -> CliResult<()> {
    let lm = load(&a.checkpoint)?;
    let opts = EvalOptions {
        feature_seed: a.feature_seed,
        seed: g.seed.unwrap_or(0),
        samples_per_image: a.samples_per_image,
        max_images: a.max_images,
        bins: a.bins,
    };
    let labels_path = a.labels.clone().or_else(|| {
        let p = a.data.join("labels.json");
        p.exists().then_some(p)
    });
    let out = output_dir(g.out.as_deref(), "evaluate");
    write_resolved(
        &out,
        "evaluate",
        json!({
            "checkpoint": path_str(&a.checkpoint),
            "data": path_str(&a.data),
            "labels": labels_path.as_deref().map(path_str),
            "options": opts,
            "real_features": a.real_features.as_deref().map(path_str),
            "gen_features": a.gen_features.as_deref().map(path_str),
        }),
    )?;
    let ds = data::load_image_folder(&a.data, lm.config.hyperparameters.image_size)?;
    let labels = match &labels_path {
        Some(p) => Some(data::labels_for(&ds, &data::read_labels(p)?)?),
        None => None,
    };
    let mut values = metrics::evaluate(&lm.models, &ds, labels.as_deref(), &opts)?;
    let mut seeds = BTreeMap::from([("features".to_string(), opts.feature_seed), ("eval".to_string(), opts.seed)]);
    if let (Some(rp), Some(gp)) = (&a.real_features, &a.gen_features) {
        let (real, rk, rs) = metrics::read_features(rp)?;
        let (gen, gk, gs) = metrics::read_features(gp)?;
        if rk != gk || rs != gs {
            return Err(validation("real and generated feature files come from different extractors"));
        }
        let bins = metrics::fit_bins(&real, a.bins.min(real.nrows()), opts.seed)?;
        let nj = metrics::ndb_jsd(&bins, &gen)?;
        values.insert("external_fid".into(), metrics::fid(&real, &gen)?);
        values.insert("external_ndb".into(), nj.ndb as f64);
        values.insert("external_jsd".into(), nj.jsd);
        values.insert("external_perceptual_diversity".into(), metrics::perceptual_diversity(&gen)?);
        seeds.insert("external_features".into(), rs);
    }
    let rep = MetricReport {
        metrics: values,
        config: serde_json::to_value(&lm.config).expect("config serializes"),
        seeds,
        checkpoint_hash: lm.header.content_hash.clone(),
    };
    let path = out.join(report::METRICS_FILE);
    rep.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn embed(g: &Global, a: &EmbedArgs) -> CliResult<()> {
    let lm = load(&a.checkpoint)?;
    let out = output_dir(g.out.as_deref(), "embed");
    write_resolved(&out, "embed", json!({ "checkpoint": path_str(&a.checkpoint), "data": path_str(&a.data) }))?;
    let ds = data::load_image_folder(&a.data, lm.config.hyperparameters.image_size)?;
    let mut images = Vec::with_capacity(ds.len());
    let mut domains = Vec::with_capacity(ds.len());
    for d in 0..ds.k() {
        images.extend(ds.domain(d).iter().cloned());
        domains.extend(std::iter::repeat(d).take(ds.domain(d).len()));
    }
    let path = out.join("embeddings.csv");
    metrics::export_embeddings(&lm.models, &images, &domains, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn report_cmd(g: &Global, a: &ReportArgs) -> CliResult<()> {
    let out = g.out.clone().unwrap_or_else(|| a.run.clone());
    write_resolved(&out, "report", json!({ "run": path_str(&a.run) }))?;
    let text = report::summarize(&a.run)?;
    let path = out.join(report::SUMMARY_FILE);
    std::fs::write(&path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}
