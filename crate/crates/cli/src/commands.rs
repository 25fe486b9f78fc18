use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use hrm_core::contamination::{contamination_pct, ContaminationError, ContaminationReport, NgramIndex};
use hrm_core::data::{pack_example, read_documents, stratified_sample, write_documents, DataError, Tokenizer};
use hrm_core::diagnostics::{
    columnar, depth_probe_batch, flops_dense, flops_recurrent, format_sci, grad_magnitude_stats,
    module_jacobian_growth, step_equivalents, DepthOptions, GradComponent, KlDirection, LensSites, PowerIteration,
};
use hrm_core::inference::{exact_match_rate, greedy_decode};
use hrm_core::model::{load_checkpoint, save_checkpoint, Model, Variant};
use hrm_core::objective::{Condition, PackedExample};
use hrm_core::trainer::{take_batch, Trainer};
use serde_json::json;

use crate::config::{config_err, DataSource, RunConfig};
use crate::rundir::{default_name, is_taken, output_root, RunDir};
use crate::{
    AnalyzeDepthArgs, AnalyzeGradsArgs, CheckpointArgs, ContaminationArgs, DecodeArgs, Direction, FlopsArgs,
    MixtureBuildArgs, Sites, TokenizerTrainArgs, TrainArgs, Weights,
};

pub struct Context {
    pub out_dir: Option<PathBuf>,
    pub run_name: Option<String>,
}

impl Context {
    fn run_dir(&self, command: &str, config: &str) -> Result<RunDir> {
        let root = output_root(self.out_dir.as_deref());
        if let Some(name) = &self.run_name {
            return RunDir::create(&root, name);
        }
        let argv: Vec<String> = std::env::args().collect();
        let base = default_name(command, &format!("{}\n{config}", argv.join("\u{1f}")));
        let name = (0..)
            .map(|i| if i == 0 { base.clone() } else { format!("{base}-{i}") })
            .find(|n| !is_taken(&root.join(n)))
            .expect("unbounded");
        RunDir::create(&root, &name)
    }
}

/// Configuration problems inside a module become exit-status-2 errors.
fn data_err(e: DataError) -> anyhow::Error {
    match e {
        DataError::Config(m) => config_err(m),
        other => other.into(),
    }
}

fn load_tokenizer(path: &Path) -> Result<Tokenizer> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Tokenizer::from_text(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_model(args: &CheckpointArgs) -> Result<Model<f32>> {
    let ckpt = load_checkpoint::<f32>(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let params = match (args.weights, ckpt.ema) {
        (Weights::Ema, Some(ema)) => ema,
        (Weights::Ema, None) => {
            log::warn!("{} has no EMA weights; using the raw parameters", args.checkpoint.display());
            ckpt.params
        }
        (Weights::Raw, _) => ckpt.params,
    };
    Ok(Model {
        config: ckpt.config,
        params,
    })
}

fn read_packed(cfg: &RunConfig, context_len: usize) -> Result<Vec<PackedExample>> {
    let path = cfg.data.path.as_ref().expect("validated");
    let tok = load_tokenizer(cfg.data.tokenizer.as_ref().expect("validated"))?;
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let docs = read_documents(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    let max_len = cfg.data.max_len.min(context_len);
    let mut out = Vec::with_capacity(docs.len());
    let mut truncated = 0;
    for d in &docs {
        let p = pack_example(&d.stripped(), &tok, max_len)?;
        truncated += p.truncated as usize;
        out.push(p.example);
    }
    if truncated > 0 {
        log::warn!("{truncated} of {} documents truncated to {max_len} tokens", docs.len());
    }
    Ok(out)
}

/// Held-out examples for evaluation and analysis. For a document file these
/// are its first `n` documents.
fn eval_examples(cfg: &RunConfig, context_len: usize, n: usize) -> Result<Vec<PackedExample>> {
    if n == 0 {
        return Err(config_err("need at least one sample"));
    }
    Ok(match cfg.data.source {
        DataSource::CopyReverse => cfg.data.copy_reverse.dataset(cfg.data.eval_seed, n),
        DataSource::Jsonl => read_packed(cfg, context_len)?.into_iter().take(n).collect(),
    })
}

pub fn tokenizer_train(ctx: &Context, a: TokenizerTrainArgs) -> Result<()> {
    let mut run = ctx.run_dir("tokenizer-train", &format!("vocab_size = {}", a.vocab_size))?;
    let mut docs = Vec::new();
    for p in &a.corpus {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        docs.extend(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string));
        run.input(p);
    }
    let refs: Vec<&str> = docs.iter().map(String::as_str).collect();
    let tok = Tokenizer::train(&refs, a.vocab_size).map_err(data_err)?;
    run.write("config.toml", format!("vocab_size = {}\n", a.vocab_size))?;
    run.write("tokenizer.txt", tok.to_text())?;
    println!("vocab_size\t{}\nmerges\t{}", tok.vocab_size(), tok.merges().len());
    run.finish()?;
    Ok(())
}

pub fn mixture_build(ctx: &Context, a: MixtureBuildArgs) -> Result<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    log::info!("resolved config:\n{}", cfg.to_toml());
    let mut run = ctx.run_dir("mixture-build", &cfg.to_toml())?;
    run.write("config.toml", cfg.to_toml())?;
    let mut docs = Vec::new();
    for p in &a.input {
        let file = File::open(p).with_context(|| format!("opening {}", p.display()))?;
        let read = read_documents(BufReader::new(file)).with_context(|| format!("reading {}", p.display()))?;
        docs.extend(read.iter().map(|d| d.stripped()));
        run.input(p);
    }
    let (mix, stats) = stratified_sample(&docs, &cfg.mixture).map_err(data_err)?;
    let mut out = Vec::new();
    write_documents(&mut out, &mix)?;
    run.write("mixture.jsonl", out)?;
    run.write("reports/mixture_stats.json", serde_json::to_string_pretty(&stats)? + "\n")?;
    println!("stratum\tavailable\tkept\tmultiplier\temitted");
    for s in &stats.strata {
        println!("{}\t{}\t{}\t{}\t{}", s.key, s.available, s.kept, s.multiplier, s.emitted);
    }
    println!("# unique_documents\t{}\n# emitted_documents\t{}", stats.unique_documents, stats.emitted_documents);
    run.finish()?;
    Ok(())
}

pub fn train(ctx: &Context, a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.train.total_steps = steps;
    }
    cfg.validate().map_err(config_err)?;
    let resolved = cfg.to_toml();
    log::info!("resolved config:\n{resolved}");
    let mut run = ctx.run_dir("train", &resolved)?;
    run.write("config.toml", &resolved)?;
    if let Some(p) = &a.config {
        run.input(p);
    }

    let data: Box<dyn Iterator<Item = PackedExample>> = match cfg.data.source {
        DataSource::CopyReverse => Box::new(cfg.data.copy_reverse.stream(cfg.train.seed)),
        DataSource::Jsonl => {
            run.input(cfg.data.path.as_ref().expect("validated"));
            run.input(cfg.data.tokenizer.as_ref().expect("validated"));
            let examples = read_packed(&cfg, cfg.model.context_len)?;
            let epochs = cfg.data.epochs;
            Box::new((0..epochs).flat_map(move |_| examples.clone()))
        }
    };
    let mut data = data.peekable();
    let model = Model::<f32>::init(cfg.model.clone(), cfg.train.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    fs::create_dir_all(run.file("checkpoints"))?;
    let mut metrics = BufWriter::new(File::create(run.file("metrics.jsonl"))?);
    let every = cfg.run.checkpoint_every;
    let mut tokens_seen = 0;
    let mut early_stop = None;
    while trainer.step_index() < cfg.train.total_steps {
        let batch = take_batch(&mut data, cfg.train.batch_tokens);
        if batch.is_empty() {
            let msg = format!("data exhausted after {} of {} steps", trainer.step_index(), cfg.train.total_steps);
            log::warn!("{msg}");
            early_stop = Some(msg);
            break;
        }
        tokens_seen += batch.iter().map(PackedExample::len).sum::<usize>();
        let m = trainer.train_step(&batch)?;
        writeln!(metrics, "{}", serde_json::to_string(&m)?)?;
        if (m.step + 1) % 100 == 0 {
            log::info!("step {} loss {:.4} K {}", m.step + 1, m.loss, m.k);
        }
        if every > 0 && (m.step + 1) % every == 0 {
            save_checkpoint(run.file(&format!("checkpoints/step-{:06}.ckpt", m.step + 1)), &trainer.checkpoint())?;
        }
    }
    metrics.flush()?;
    drop(metrics);
    save_checkpoint(run.file("checkpoints/final.ckpt"), &trainer.checkpoint())?;

    let mut summary = json!({
        "steps_completed": trainer.step_index(),
        "tokens_seen": tokens_seen,
        "early_stop": early_stop,
    });
    if cfg.data.source == DataSource::CopyReverse {
        let held = eval_examples(&cfg, cfg.model.context_len, cfg.data.eval_examples)?;
        let raw = exact_match_rate(&trainer.model, &held, 0.0, 0)?;
        let ema = exact_match_rate(&trainer.ema_model(), &held, 0.0, 0)?;
        summary["eval_examples"] = json!(held.len());
        summary["exact_match_raw"] = json!(raw);
        summary["exact_match_ema"] = json!(ema);
        println!("exact_match_raw\t{raw:.4}\nexact_match_ema\t{ema:.4}");
    }
    run.write("reports/train.json", serde_json::to_string_pretty(&summary)? + "\n")?;
    let path = run.finish()?;
    println!("run\t{}", path.display());
    Ok(())
}

pub fn decode(ctx: &Context, a: DecodeArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(w) = a.guidance {
        cfg.decode.guidance_scale = w;
    }
    if let Some(n) = a.max_new_tokens {
        cfg.decode.max_new_tokens = n;
    }
    cfg.validate().map_err(config_err)?;
    let model = load_model(&a.ckpt)?;
    let tok = a.tokenizer.as_deref().map(load_tokenizer).transpose()?;
    let prompt: Vec<u32> = if let Some(ids) = &a.tokens {
        ids.split_whitespace()
            .map(|s| s.parse().map_err(|_| config_err(format!("--tokens: {s:?} is not a token id"))))
            .collect::<Result<_>>()?
    } else if let Some(text) = &a.prompt {
        let cond = Condition::parse(&a.condition)
            .ok_or_else(|| config_err(format!("--condition: unknown condition {:?}", a.condition)))?;
        let tok = tok.as_ref().expect("clap requires --tokenizer");
        if cfg.decode.stop_token.is_none() {
            cfg.decode.stop_token = Some(tok.eot_id());
        }
        tok.encode(&format!("{}{text}", cond.tag()))
    } else {
        return Err(config_err("give a prompt with --tokens or --prompt"));
    };
    let mut run = ctx.run_dir("decode", &cfg.to_toml())?;
    run.input(&a.ckpt.checkpoint);
    run.write("config.toml", cfg.to_toml())?;
    let gen = greedy_decode(&model, &prompt, prompt.len(), &cfg.decode)?;
    let ids: Vec<String> = gen.tokens.iter().map(u32::to_string).collect();
    println!("{}", ids.join(" "));
    let text = match &tok {
        Some(t) => {
            let body = gen.tokens.iter().copied().filter(|&id| Some(id) != cfg.decode.stop_token).collect::<Vec<_>>();
            let s = t.decode(&body)?;
            println!("{s}");
            Some(s)
        }
        None => None,
    };
    let report = json!({
        "prompt": prompt,
        "tokens": gen.tokens,
        "stop": gen.stop,
        "text": text,
        "guidance_scale": cfg.decode.guidance_scale,
    });
    run.write("reports/decode.json", serde_json::to_string_pretty(&report)? + "\n")?;
    run.finish()?;
    Ok(())
}

const DEPTH_METRICS: [&str; 4] = ["block_diff_norm", "block_cosine", "logit_lens_kl", "attention_entropy"];

pub fn analyze_depth(ctx: &Context, a: AnalyzeDepthArgs) -> Result<()> {
    if let Some(bad) = a.metrics.iter().find(|m| !DEPTH_METRICS.contains(&m.as_str())) {
        return Err(config_err(format!("--metrics: unknown metric {bad:?}")));
    }
    if a.blocks_per_probe == 0 {
        return Err(config_err("--blocks-per-probe must be at least 1"));
    }
    let cfg = RunConfig::load(a.config.as_deref())?;
    let opts = DepthOptions {
        sites: match a.sites {
            Sites::AllSteps => LensSites::AllSteps,
            Sites::HExits => LensSites::HExits,
        },
        direction: match a.kl_direction {
            Direction::ProbeToFinal => KlDirection::ProbeToFinal,
            Direction::FinalToProbe => KlDirection::FinalToProbe,
        },
        blocks_per_probe: a.blocks_per_probe,
    };
    let mut run = ctx.run_dir("analyze-depth", &cfg.to_toml())?;
    run.write("config.toml", cfg.to_toml())?;
    for (i, path) in a.checkpoint.iter().enumerate() {
        run.input(path);
        let model = load_model(&CheckpointArgs {
            checkpoint: path.clone(),
            weights: a.weights,
        })?;
        let examples = eval_examples(&cfg, model.config.context_len, a.samples)?;
        let batch: Vec<(Vec<u32>, usize)> = examples
            .into_iter()
            .map(|e| {
                let prefix = if a.causal { 0 } else { e.prefix_len };
                (e.token_ids, prefix)
            })
            .collect();
        let probe = depth_probe_batch(&model, &batch, &opts)?;
        let rows: Vec<_> = probe
            .rows()
            .into_iter()
            .filter(|(_, m, _)| a.metrics.is_empty() || a.metrics.iter().any(|k| k == m))
            .collect();
        let mut text = format!("# checkpoint {}\n# samples {}\n", path.display(), probe.samples);
        if probe.cosine_skipped > 0 {
            text += &format!("# cosine_skipped {}\n", probe.cosine_skipped);
        }
        text += &columnar(&rows);
        let stem = path.file_stem().map_or("checkpoint".into(), |s| s.to_string_lossy().into_owned());
        run.write(&format!("reports/depth-{i}-{stem}.tsv"), &text)?;
        print!("{text}");
    }
    run.finish()?;
    Ok(())
}

pub fn analyze_grads(ctx: &Context, a: AnalyzeGradsArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.tail_quantile) {
        return Err(config_err("--tail-quantile must lie in [0, 1]"));
    }
    let cfg = RunConfig::load(a.config.as_deref())?;
    let m32 = load_model(&a.ckpt)?;
    let model = Model::<f64> {
        config: m32.config.clone(),
        params: m32.params.cast(),
    };
    let total = model.config.total_module_steps();
    let k = match model.config.variant {
        Variant::Standard => 1,
        _ => a.horizon.unwrap_or(cfg.train.k_end).min(total),
    };
    let mut train_cfg = cfg.train.clone();
    train_cfg.k_end = train_cfg.k_end.min(total);
    train_cfg.k_start = train_cfg.k_start.min(train_cfg.k_end);
    let examples = eval_examples(&cfg, model.config.context_len, a.samples)?;
    let mut run = ctx.run_dir("analyze-grads", &cfg.to_toml())?;
    run.input(&a.ckpt.checkpoint);
    run.write("config.toml", cfg.to_toml())?;
    let trainer = Trainer::new(model.clone(), train_cfg)?;
    let (loss, _, grads) = trainer.loss_and_grads(&examples, k)?;
    let mut groups: Vec<(&str, Vec<f64>)> = vec![("all", vec![]), ("h", vec![]), ("l", vec![]), ("other", vec![])];
    for (name, g) in &grads {
        let slot = match GradComponent::of(name) {
            GradComponent::H => 1,
            GradComponent::L => 2,
            GradComponent::Other => 3,
        };
        groups[0].1.extend_from_slice(g.data());
        groups[slot].1.extend_from_slice(g.data());
    }
    let mut text = format!(
        "# loss {loss}\n# horizon {k}\n# samples {}\ncomponent\tcount\tmean_abs\tmedian_abs\tlog_dispersion\ttail_to_median\n",
        examples.len()
    );
    for (name, values) in &groups {
        if values.is_empty() {
            continue;
        }
        let s = grad_magnitude_stats(values, a.eps, a.tail_quantile)?;
        text += &format!(
            "{name}\t{}\t{:e}\t{:e}\t{:.6}\t{:.6}\n",
            s.count, s.mean_abs, s.median_abs, s.log_dispersion, s.tail_to_median
        );
    }
    run.write("reports/grads.tsv", &text)?;
    print!("{text}");
    if a.jacobian_depth > 0 {
        let ex = &examples[0];
        let growth = module_jacobian_growth(&model, &ex.token_ids, ex.prefix_len, a.jacobian_depth, &PowerIteration::default())?;
        let rows: Vec<_> = growth.iter().map(|g| (g.depth, "jacobian_growth", g.growth)).collect();
        let jac = columnar(&rows);
        run.write("reports/jacobian.tsv", &jac)?;
        print!("{jac}");
    }
    run.finish()?;
    Ok(())
}

pub fn flops(a: FlopsArgs) -> Result<()> {
    if !(a.tokens.is_finite() && a.tokens > 0.0) {
        return Err(config_err("--tokens must be positive"));
    }
    let value = if let Some(path) = &a.config {
        let cfg = RunConfig::load(Some(path))?;
        let n = a.params.unwrap_or(match cfg.model.variant {
            Variant::Standard => cfg.model.num_parameters() as f64,
            _ => cfg.model.num_core_parameters() as f64,
        });
        let k = a.horizon.unwrap_or(cfg.train.k_end);
        let (fwd, bwd) = step_equivalents(&cfg.model, k);
        if cfg.model.variant == Variant::Standard {
            flops_dense(n, a.tokens)
        } else {
            flops_recurrent(n, a.tokens, fwd, bwd)
        }
    } else {
        let Some(n) = a.params else {
            return Err(config_err("--params is required without --config"));
        };
        match (a.dense, a.fwd, a.bwd) {
            (true, None, None) => flops_dense(n, a.tokens),
            (false, Some(f), Some(b)) => flops_recurrent(n, a.tokens, f, b),
            _ => return Err(config_err("choose exactly one of --dense, --fwd/--bwd or --config")),
        }
    };
    println!("{}", format_sci(value));
    Ok(())
}

/// Whitespace words mapped to dense ids in order of first appearance.
#[derive(Default)]
struct WordIds(HashMap<String, u32>);

impl WordIds {
    fn encode(&mut self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| {
                let next = self.0.len() as u32;
                *self.0.entry(w.to_string()).or_insert(next)
            })
            .collect()
    }
}

pub fn contamination(ctx: &Context, a: ContaminationArgs) -> Result<()> {
    let mut index = NgramIndex::new(a.n).map_err(|e| match e {
        ContaminationError::ZeroN => config_err("--n must be at least 1"),
        other => other.into(),
    })?;
    let tok = a.tokenizer.as_deref().map(load_tokenizer).transpose()?;
    let mut words = WordIds::default();
    let mut encode = |text: &str| match &tok {
        Some(t) => t.encode(text),
        None => words.encode(text),
    };
    let mut run = ctx.run_dir("contamination", &format!("n = {}", a.n))?;
    run.write("config.toml", format!("n = {}\ntokenizer = {:?}\n", a.n, a.tokenizer.as_ref().map(|p| p.display().to_string())))?;
    for p in &a.corpus {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        for line in text.lines() {
            index.extend(&encode(line));
        }
        run.input(p);
    }
    if let Some(p) = &a.tokenizer {
        run.input(p);
    }
    run.input(&a.eval);
    let eval = fs::read_to_string(&a.eval).with_context(|| format!("reading {}", a.eval.display()))?;
    let mut percents = Vec::new();
    let mut scores = Vec::new();
    for (i, line) in eval.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((score, text)) = line.split_once('\t') else {
            bail!("{}:{}: expected `score<TAB>text`", a.eval.display(), i + 1);
        };
        let score: f64 = score
            .trim()
            .parse()
            .with_context(|| format!("{}:{}: bad score {score:?}", a.eval.display(), i + 1))?;
        scores.push(score);
        percents.push(contamination_pct(&encode(text), &index));
    }
    if scores.is_empty() {
        bail!("{} has no samples", a.eval.display());
    }
    let report = ContaminationReport::new(a.n, percents, &scores)?;
    let table = report.table();
    run.write("reports/contamination.tsv", &table)?;
    let mut samples = String::from("sample\tscore\tcontamination_pct\n");
    for (i, (s, p)) in scores.iter().zip(&report.percents).enumerate() {
        samples += &format!("{i}\t{s}\t{p}\n");
    }
    run.write("reports/samples.tsv", samples)?;
    print!("{table}");
    run.finish()?;
    Ok(())
}
