use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use log::{debug, info, warn};
use mega_absa::checkpoint::Checkpoint;
use mega_absa::data::{load_corpus, load_wordvecs, tokenize, AspectExample, Polarity, Vocab, WordVectors};
use mega_absa::gradsuite::{run_gradient_suites, GRAD_TOLERANCE};
use mega_absa::metrics::argmax;
use mega_absa::model::{AbsaModel, ModelConfig};
use mega_absa::tensor::inject_adjoint_fault;
use mega_absa::trainer::{evaluate, fit, write_record, TrainConfig, TrainSinks, TrainState};

use crate::config::RunConfig;
use crate::{EvalArgs, GradcheckArgs, InspectArgs, PredictArgs, TrainArgs};

/// An input file that does not exist. Exits with status 2.
#[derive(Debug)]
pub struct MissingPath(pub PathBuf);

impl fmt::Display for MissingPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "no such file: {}", self.0.display())
    }
}

impl std::error::Error for MissingPath {}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(MissingPath(path.to_path_buf()).into())
    }
}

fn load_examples(cfg: &RunConfig, path: &Path) -> Result<Vec<AspectExample>> {
    let parsed = load_corpus(path, cfg.format_of(path))?;
    if !parsed.rejected.is_empty() {
        warn!("{}: skipped {} aspect terms", path.display(), parsed.rejected.len());
        for r in &parsed.rejected {
            debug!("{r}");
        }
    }
    if parsed.examples.is_empty() {
        bail!("{}: no usable examples", path.display());
    }
    info!("{}: {} examples", path.display(), parsed.examples.len());
    Ok(parsed.examples)
}

/// Fails listing every model setting where `requested` departs from the
/// checkpoint.
fn check_compatible(stored: &ModelConfig, requested: &ModelConfig) -> Result<()> {
    let diff = stored.diff(requested);
    if diff.is_empty() {
        return Ok(());
    }
    let keys: Vec<String> = diff
        .iter()
        .map(|(k, a, b)| format!("{k} (checkpoint {a}, requested {b})"))
        .collect();
    bail!("configuration does not match the checkpoint: {}", keys.join(", "))
}

/// A resumed run may change its stopping rules but nothing that shapes the
/// trajectory.
fn check_resumable(stored: &TrainConfig, requested: &TrainConfig) -> Result<()> {
    let schedule = ["max_epochs", "patience", "max_steps"];
    let table = |c: &TrainConfig| match toml::Value::try_from(c) {
        Ok(toml::Value::Table(t)) => t,
        _ => unreachable!("TrainConfig serializes to a table"),
    };
    let (a, b) = (table(stored), table(requested));
    let keys: Vec<String> = a
        .iter()
        .filter(|(k, v)| !schedule.contains(&k.as_str()) && b.get(*k) != Some(*v))
        .map(|(k, v)| format!("{k} (checkpoint {v}, requested {})", b.get(k).map_or("unset".into(), |x| x.to_string())))
        .collect();
    if keys.is_empty() {
        Ok(())
    } else {
        bail!("training settings do not match the checkpoint: {}", keys.join(", "))
    }
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => {
            require(p)?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    args.overrides.apply(&mut cfg);
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(d) = &args.dataset {
        cfg.train_path = Some(d.clone());
    }
    let model_cfg = cfg.model_config();
    model_cfg.validate()?;
    let train_cfg = cfg.train_config();
    train_cfg.validate()?;
    let train_path = cfg
        .train_path
        .clone()
        .ok_or_else(|| anyhow!("no training set: set train_path or pass --dataset"))?;
    let eval_path = cfg.eval_path.clone().ok_or_else(|| anyhow!("no evaluation set: set eval_path"))?;
    for p in [Some(&train_path), Some(&eval_path), cfg.wordvecs.as_ref(), args.checkpoint.as_ref()]
        .into_iter()
        .flatten()
    {
        require(p)?;
    }

    let train_set = load_examples(&cfg, &train_path)?;
    let eval_set = load_examples(&cfg, &eval_path)?;

    let (mut model, mut state) = match &args.checkpoint {
        Some(path) => {
            let (model, stored_train, state) = Checkpoint::load(path)?.restore()?;
            check_compatible(&model.cfg, &model_cfg)?;
            check_resumable(&stored_train, &train_cfg)?;
            info!("resuming from {} after epoch {}", path.display(), state.epoch);
            (model, state)
        }
        None => {
            let vocab = Vocab::build(train_set.iter().chain(&eval_set));
            let vectors = match &cfg.wordvecs {
                Some(p) => {
                    let v = load_wordvecs(p, &vocab, cfg.embed_dim, cfg.seed)?;
                    info!(
                        "word vectors: {} of {} vocabulary entries found ({:.1}%)",
                        v.found,
                        vocab.len(),
                        100.0 * v.coverage
                    );
                    v
                }
                None => WordVectors::random(&vocab, cfg.embed_dim, cfg.seed),
            };
            let model = AbsaModel::new(&model_cfg, vocab, &vectors, cfg.seed)?;
            let state = TrainState::new(&model);
            (model, state)
        }
    };

    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("{}", cfg.out_dir.display()))?;
    fs::write(cfg.out_dir.join("config.toml"), toml::to_string(&cfg)?)?;
    let log_path = cfg.out_dir.join("metrics.jsonl");
    let mut log = BufWriter::new(fs::File::create(&log_path).with_context(|| format!("{}", log_path.display()))?);
    // a resumed run rewrites the records it inherited
    for r in &state.history {
        write_record(&mut log, r)?;
    }
    let started = Instant::now();
    fit(
        &mut model,
        &train_cfg,
        &mut state,
        &train_set,
        &eval_set,
        TrainSinks {
            log: Some(&mut log),
            out_dir: Some(&cfg.out_dir),
            epoch_budget: None,
        },
    )?;
    log.flush()?;

    println!(
        "trained {} epochs, {} steps in {:.1}s",
        state.epoch,
        state.adam.step,
        started.elapsed().as_secs_f64()
    );
    if state.adam.skipped > 0 {
        println!("skipped steps {}", state.adam.skipped);
    }
    if let Some(best) = state.best_epoch {
        let r = &state.history[best - 1];
        println!("best epoch {best}: accuracy {:.2} macro-F1 {:.2}", r.acc, r.macro_f1);
        println!("checkpoint {}", cfg.out_dir.join("best.ckpt").display());
    }
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    require(&args.checkpoint)?;
    require(&args.dataset)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.model()?;
    let mut cfg = match &args.config {
        Some(p) => {
            require(p)?;
            let c = RunConfig::load(p)?;
            check_compatible(&model.cfg, &c.model_config())?;
            c
        }
        None => {
            let mut c = RunConfig::default();
            c.set_model(&model.cfg);
            c
        }
    };
    if args.overrides.any_model() {
        args.overrides.apply(&mut cfg);
        check_compatible(&model.cfg, &cfg.model_config())?;
    }
    let examples = load_examples(&cfg, &args.dataset)?;
    let (metrics, probs) = evaluate(&model, &examples, ckpt.header.train.batch_size)?;
    println!("examples {}", examples.len());
    println!("accuracy {:.2}", metrics.accuracy);
    println!("macro-F1 {:.2}", metrics.macro_f1);
    let per_class: Vec<String> = Polarity::ALL
        .iter()
        .map(|p| format!("{} {:.2}", p.name(), metrics.f1[p.index()]))
        .collect();
    println!("F1 {}", per_class.join(" "));
    if args.dump {
        let dir = args.out.as_ref().expect("clap requires --out with --dump");
        fs::create_dir_all(dir).with_context(|| format!("{}", dir.display()))?;
        let path = dir.join("predictions.tsv");
        let mut w = BufWriter::new(fs::File::create(&path).with_context(|| format!("{}", path.display()))?);
        writeln!(w, "id\taspect\tgold\tpredicted\tp_positive\tp_neutral\tp_negative")?;
        for (ex, p) in examples.iter().zip(&probs) {
            let pred = Polarity::from_index(argmax(p)).expect("three classes");
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                ex.id,
                ex.aspect(),
                ex.label.name(),
                pred.name(),
                p[0],
                p[1],
                p[2]
            )?;
        }
        w.flush()?;
        println!("predictions {}", path.display());
    }
    Ok(())
}

pub fn predict(args: PredictArgs) -> Result<()> {
    require(&args.checkpoint)?;
    let model = Checkpoint::load(&args.checkpoint)?.model()?;
    let tokens = tokenize(&args.sentence);
    let aspect = tokenize(&args.aspect);
    if aspect.is_empty() {
        bail!("empty aspect");
    }
    let start = tokens
        .windows(aspect.len())
        .position(|w| w == aspect.as_slice())
        .ok_or_else(|| anyhow!("aspect {:?} does not occur in the sentence", args.aspect))?;
    let ex = AspectExample {
        id: "input".into(),
        tokens,
        span: (start, start + aspect.len()),
        // unused at inference
        label: Polarity::Neutral,
    };
    let p = model.predict(&[ex], 1)?[0];
    let label = Polarity::from_index(argmax(&p)).expect("three classes");
    println!(
        "{}\tpositive {:.4}\tneutral {:.4}\tnegative {:.4}",
        label.name(),
        p[0],
        p[1],
        p[2]
    );
    Ok(())
}

pub fn gradcheck(args: GradcheckArgs) -> Result<()> {
    if args.inject_fault {
        inject_adjoint_fault(true);
    }
    let started = Instant::now();
    let results = run_gradient_suites()?;
    println!("{:<14} {:>12}  {:<6} worst at", "block", "max rel err", "status");
    for r in &results {
        println!(
            "{:<14} {:>12.3e}  {:<6} {}",
            r.block,
            r.max_rel_error,
            if r.passed() { "pass" } else { "FAIL" },
            r.worst
        );
    }
    println!("tolerance {GRAD_TOLERANCE:e}, {:.1}s", started.elapsed().as_secs_f64());
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.block).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        bail!("gradient check failed in {}", failed.join(", "))
    }
}

/// `mega.fwd.mlstm.w_q` belongs to `mega.fwd`, `bilstm.bwd.b` to `bilstm`.
fn block_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    if parts[0] == "mega" && parts.len() > 2 {
        parts[..2].join(".")
    } else {
        parts[0].to_string()
    }
}

pub fn inspect(args: InspectArgs) -> Result<()> {
    require(&args.checkpoint)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.model()?;
    println!("# model");
    print!("{}", toml::to_string(&model.cfg)?);
    println!("\n# training");
    print!("{}", toml::to_string(&ckpt.header.train)?);

    println!("\n# parameters");
    let mut blocks: BTreeMap<String, (usize, bool)> = BTreeMap::new();
    for (id, name, t) in model.store.iter() {
        let trainable = model.store.is_trainable(id);
        println!(
            "{:<28} {:<12} {:>10}{}",
            name,
            format!("{:?}", t.shape()),
            t.numel(),
            if trainable { "" } else { "  frozen" }
        );
        let e = blocks.entry(block_of(name)).or_insert((0, trainable));
        e.0 += t.numel();
    }
    println!("\n# blocks");
    for (b, (n, trainable)) in &blocks {
        println!("{:<28} {:>10}{}", b, n, if *trainable { "" } else { "  frozen" });
    }
    let trainable = model.store.trainable_count();
    let total: usize = model.store.iter().map(|(_, _, t)| t.numel()).sum();
    let (cf_trainable, cf_total) = model.cfg.param_count(model.vocab.len());
    println!("\ntrainable parameters {trainable}");
    println!("total parameters {total}");
    println!(
        "closed form trainable {cf_trainable} total {cf_total} ({})",
        if (cf_trainable, cf_total) == (trainable, total) { "agrees" } else { "DISAGREES" }
    );
    println!("vocabulary {}", model.vocab.len());
    let p = &ckpt.header.progress;
    match (p.best_epoch, p.best_macro_f1) {
        (Some(b), Some(f1)) => println!(
            "progress epoch {} step {} best epoch {b} macro-F1 {f1:.2}",
            p.epoch, p.adam_step
        ),
        _ => println!("progress epoch {} step {}", p.epoch, p.adam_step),
    }
    Ok(())
}
