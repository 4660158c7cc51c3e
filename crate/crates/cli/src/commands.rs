use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use bltd::inference::{generate as run_engine, EngineSpec, RunOptions, Strategy, UnmaskingConfig};
use bltd::metrics::{memory_bandwidth, sequence_logprob, type_token_ratio, ComponentParams};
use bltd::model::{checkpoint, HierarchicalModel};
use bltd::patching::{Patcher, Trigger};
use bltd::training::{build_patcher, Trainer, LOSS_CSV_HEADER};
use bltd::vocab::with_bos;
use bltd::Real;

use crate::config::{seed_from_env, RunConfig};
use crate::escape::{escape, hex, unescape};
use crate::{BenchArgs, CliError, EngineArgs, GenerateArgs, PatchInspectArgs, ScoreArgs, TrainArgs};

fn read_input(path: &Path, what: &str) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::input(format!("cannot read {what} {}: {e}", path.display())))
}

fn read_lines(path: &Path, what: &str) -> Result<Vec<String>, CliError> {
    let bytes = read_input(path, what)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| CliError::input(format!("{what} {} is not UTF-8 text", path.display())))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn write_output(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError {
        code: 1,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn load_checkpoint(path: &Path) -> Result<(HierarchicalModel, Patcher), CliError> {
    checkpoint::load(path).map_err(|e| CliError::input(format!("cannot load checkpoint {}: {e}", path.display())))
}

fn run_seed(flag: Option<u64>) -> Result<u64, CliError> {
    Ok(match flag {
        Some(s) => s,
        None => seed_from_env()?.unwrap_or(0),
    })
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = RunConfig::build(a.config.as_deref(), &a.overrides, a.seed)?;
    let corpus = read_input(&a.corpus, "corpus")?;
    if corpus.is_empty() {
        return Err(CliError::input(format!("corpus {} is empty", a.corpus.display())));
    }
    let p = &cfg.patch;
    let patcher = build_patcher(&corpus, p.order, p.smoothing, p.target, p.max, cfg.train.window)?;
    let model = HierarchicalModel::new(cfg.model.clone(), cfg.train.seed)?;
    let mut trainer = Trainer::new(model, &patcher, &corpus, cfg.train.clone())?;
    if let Some(r) = &a.resume {
        trainer
            .load_state(r)
            .map_err(|e| CliError::input(format!("cannot resume from {}: {e}", r.display())))?;
    }

    let mut csv = format!("{LOSS_CSV_HEADER}\n");
    let result = trainer.run(|r| {
        csv.push_str(&r.csv_row());
        csv.push('\n');
        if r.step % 100 == 0 {
            log::info!("step {} l_total {:.4} lr {:.2e}", r.step, r.l_total, r.lr);
        }
    });

    let mut stored = trainer.model.clone();
    checkpoint::round_to_storage(&mut stored);
    checkpoint::save(&a.out, &stored, &patcher).map_err(|e| CliError {
        code: 1,
        message: format!("cannot write {}: {e}", a.out.display()),
    })?;
    let loss_path = a.loss_csv.clone().unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"));
    write_output(&loss_path, csv.as_bytes())?;
    if let Some(s) = &a.state_out {
        trainer.save_state(s).map_err(|e| CliError {
            code: 1,
            message: format!("cannot write {}: {e}", s.display()),
        })?;
    }
    match result {
        Ok(_) => Ok(()),
        Err(e @ bltd::Error::Divergence { .. }) => Err(CliError::diverged(format!(
            "{e}; last good checkpoint written to {}",
            a.out.display()
        ))),
        Err(e) => Err(e.into()),
    }
}

/// Builds and checks an engine from flags, rejecting flags the engine does not use.
pub fn engine_spec(a: &EngineArgs) -> Result<EngineSpec, CliError> {
    let reject = |present: bool, flag: &str, why: &str| {
        if present {
            Err(CliError::config(format!("--{flag} is not valid {why}")))
        } else {
            Ok(())
        }
    };
    let diffusion_flags = [
        (a.block_size.is_some(), "block-size"),
        (a.strategy.is_some(), "strategy"),
        (a.alpha.is_some(), "alpha"),
        (a.gamma.is_some(), "gamma"),
        (a.top_p.is_some(), "top-p"),
        (a.temperature.is_some(), "temperature"),
    ];
    let engine = a.engine.as_str();
    let spec = match engine {
        "ar" | "blt-s" => {
            for (present, flag) in diffusion_flags {
                reject(present, flag, &format!("with --engine {engine}"))?;
            }
            if engine == "ar" {
                reject(a.window.is_some(), "window", "with --engine ar")?;
                EngineSpec::Ar
            } else {
                EngineSpec::BltS {
                    window: a.window.unwrap_or(4),
                }
            }
        }
        "blt-d" | "blt-dv" => {
            reject(a.window.is_some(), "window", &format!("with --engine {engine}"))?;
            let strategy = Strategy::parse(a.strategy.as_deref().unwrap_or("confidence")).map_err(CliError::config)?;
            let why = format!("with --strategy {}", strategy.name());
            reject(a.alpha.is_some() && strategy != Strategy::Confidence, "alpha", &why)?;
            reject(a.gamma.is_some() && strategy != Strategy::EntropyBounded, "gamma", &why)?;
            reject(a.top_p.is_some() && strategy != Strategy::EntropyBounded, "top-p", &why)?;
            reject(a.temperature.is_some() && strategy != Strategy::EntropyBounded, "temperature", &why)?;
            let mut u = match strategy {
                Strategy::Confidence => UnmaskingConfig::confidence(a.alpha.unwrap_or(0.5) as Real),
                Strategy::EntropyBounded => UnmaskingConfig::entropy_bounded(a.gamma.unwrap_or(1.0) as Real),
                Strategy::OneStep => UnmaskingConfig::one_step(),
            };
            u.top_p = a.top_p.map(|p| p as Real);
            u.temperature = a.temperature.or(a.top_p.map(|_| 1.0)).unwrap_or(0.0) as Real;
            let block_size = a.block_size.unwrap_or(16);
            if engine == "blt-d" {
                EngineSpec::BltD {
                    block_size,
                    unmasking: u,
                }
            } else {
                EngineSpec::BltDv {
                    block_size,
                    unmasking: u,
                }
            }
        }
        other => {
            return Err(CliError::config(format!(
                "unknown engine `{other}` (expected ar, blt-d, blt-s or blt-dv)"
            )))
        }
    };
    spec.validate().map_err(CliError::config)?;
    Ok(spec)
}

pub fn generate(a: &GenerateArgs) -> Result<(), CliError> {
    let spec = engine_spec(&a.engine)?;
    let prompt = match (&a.prompt, &a.prompt_file) {
        (Some(p), _) => unescape(p).map_err(|e| CliError::config(format!("--prompt: {e}")))?,
        (None, Some(f)) => read_input(f, "prompt file")?,
        (None, None) => Vec::new(),
    };
    let seed = run_seed(a.seed)?;
    let (model, patcher) = load_checkpoint(&a.checkpoint)?;
    let g = run_engine(
        &model,
        &patcher,
        &with_bos(&prompt),
        a.length,
        &spec,
        &RunOptions { seed, caching: true },
    )?;
    let mut out = std::io::stdout().lock();
    let written = if a.hex {
        writeln!(out, "{}", hex(&g.output))
    } else {
        out.write_all(&g.output)
    };
    written.and_then(|_| out.flush()).map_err(|e| CliError {
        code: 1,
        message: format!("cannot write output: {e}"),
    })?;
    if let Some(t) = &a.trace {
        write_output(t, format!("{}\n", g.trace.to_json_line()).as_bytes())?;
    }
    Ok(())
}

/// Parses one sweep line such as `engine=blt-d block=16 strategy=confidence alpha=0.5`.
pub fn parse_sweep_line(line: &str) -> Result<(EngineArgs, String), CliError> {
    let mut a = EngineArgs::default();
    let mut engine = None;
    let mut config = Vec::new();
    for tok in line.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("sweep token `{tok}` is not key=value")))?;
        let num = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| CliError::config(format!("sweep {k}: expected a number, got `{v}`")))
        };
        let int = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| CliError::config(format!("sweep {k}: expected an integer, got `{v}`")))
        };
        match k {
            "engine" => {
                engine = Some(v.to_string());
                continue;
            }
            "block" => a.block_size = Some(int(v)?),
            "k" => a.window = Some(int(v)?),
            "strategy" => a.strategy = Some(v.to_string()),
            "alpha" => a.alpha = Some(num(v)?),
            "gamma" => a.gamma = Some(num(v)?),
            "top_p" => a.top_p = Some(num(v)?),
            "temperature" => a.temperature = Some(num(v)?),
            _ => return Err(CliError::config(format!("unknown sweep key `{k}`"))),
        }
        config.push(tok.to_string());
    }
    a.engine = engine.ok_or_else(|| CliError::config(format!("sweep line `{line}` has no engine")))?;
    let config = if config.is_empty() { "-".to_string() } else { config.join(" ") };
    Ok((a, config))
}

pub const BENCH_CSV_HEADER: &str = "engine,config,decoder_nfes,encoder_global_nfes,memory_gb,acceptance_rate,ttr";

pub fn bench(a: &BenchArgs) -> Result<(), CliError> {
    let sweep_text = String::from_utf8(read_input(&a.sweep, "sweep")?)
        .map_err(|_| CliError::input(format!("sweep {} is not UTF-8 text", a.sweep.display())))?;
    let mut cells = Vec::new();
    for (line, text) in sweep_lines(&sweep_text) {
        let (args, config) = parse_sweep_line(&text)
            .map_err(|e| CliError::config(format!("{}:{line}: {}", a.sweep.display(), e.message)))?;
        let spec = engine_spec(&args)
            .map_err(|e| CliError::config(format!("{}:{line}: {}", a.sweep.display(), e.message)))?;
        cells.push((spec, config));
    }
    if cells.is_empty() {
        return Err(CliError::config(format!("sweep {} has no configurations", a.sweep.display())));
    }
    let prompts = read_lines(&a.prompts, "prompt set")?
        .iter()
        .enumerate()
        .map(|(i, l)| unescape(l).map_err(|e| CliError::input(format!("{}:{}: {e}", a.prompts.display(), i + 1))))
        .collect::<Result<Vec<_>, _>>()?;
    let seed = run_seed(a.seed)?;
    let (model, patcher) = load_checkpoint(&a.checkpoint)?;
    let counts = ComponentParams::of_model(&model);
    let params = ComponentParams::new(counts.decoder, counts.encoder, counts.global, a.bytes_per_param as f64)
        .map_err(CliError::config)?;

    let mut csv = format!("{BENCH_CSV_HEADER}\n");
    for (spec, config) in &cells {
        for p in &prompts {
            let g = run_engine(&model, &patcher, &with_bos(p), a.length, spec, &RunOptions { seed, caching: true })?;
            let t = &g.trace;
            let acceptance = match t.acceptance_rate() {
                Ok(r) if spec.is_verifying() => r.to_string(),
                _ => String::new(),
            };
            writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                spec.name(),
                config,
                t.decoder_nfes,
                t.encoder_global_nfes,
                memory_bandwidth(t, &params),
                acceptance,
                type_token_ratio(&g.output)
            )
            .expect("writing to a string");
        }
    }
    match &a.out {
        Some(path) => write_output(path, csv.as_bytes()),
        None => std::io::stdout().write_all(csv.as_bytes()).map_err(|e| CliError {
            code: 1,
            message: format!("cannot write output: {e}"),
        }),
    }
}

/// Non-blank, non-comment sweep lines with their 1-based line numbers.
fn sweep_lines(text: &str) -> Vec<(usize, String)> {
    text.lines()
        .enumerate()
        .filter_map(|(i, raw)| {
            let line = raw.split('#').next().unwrap_or("").trim();
            (!line.is_empty()).then(|| (i + 1, line.to_string()))
        })
        .collect()
}

pub fn score(a: &ScoreArgs) -> Result<(), CliError> {
    let lines = read_lines(&a.candidates, "candidates file")?;
    let candidates = lines
        .iter()
        .enumerate()
        .map(|(i, l)| unescape(l).map_err(|e| CliError::input(format!("{}:{}: {e}", a.candidates.display(), i + 1))))
        .collect::<Result<Vec<_>, _>>()?;
    if candidates.is_empty() {
        return Err(CliError::config(format!("{} holds no candidates", a.candidates.display())));
    }
    let (model, patcher) = load_checkpoint(&a.checkpoint)?;
    let mut out = String::new();
    let mut best = (0, Real::NEG_INFINITY);
    for (i, c) in candidates.iter().enumerate() {
        let lp = sequence_logprob(&model, &patcher, &with_bos(c))?;
        if lp > best.1 {
            best = (i, lp);
        }
        writeln!(out, "{i}\t{lp:.6}\t{}", escape(c)).expect("writing to a string");
    }
    writeln!(out, "argmax\t{}", best.0).expect("writing to a string");
    print!("{out}");
    Ok(())
}

fn trigger_name(t: &Trigger) -> String {
    match t {
        Trigger::Bos => "bos".into(),
        Trigger::AfterBos => "after-bos".into(),
        Trigger::Entropy(h) => format!("entropy={h:.4}"),
        Trigger::MaxSize => "max-size".into(),
        Trigger::Given => "given".into(),
    }
}

pub fn patch_inspect(a: &PatchInspectArgs) -> Result<(), CliError> {
    let patcher = match (&a.checkpoint, &a.corpus) {
        (Some(c), _) => load_checkpoint(c)?.1,
        (None, Some(corpus)) => {
            let cfg = RunConfig::build(a.config.as_deref(), &[], None)?;
            let bytes = read_input(corpus, "corpus")?;
            let p = &cfg.patch;
            build_patcher(&bytes, p.order, p.smoothing, p.target, p.max, cfg.train.window)?
        }
        (None, None) => return Err(CliError::config("one of --checkpoint or --corpus is required")),
    };
    let text = match (&a.text, &a.file) {
        (Some(t), _) => unescape(t).map_err(|e| CliError::config(format!("--text: {e}")))?,
        (None, Some(f)) => read_input(f, "input")?,
        (None, None) => return Err(CliError::config("one of --text or --file is required")),
    };
    let x = with_bos(&text);
    let seg = patcher.segment(&x)?;
    let mut out = String::from("start\tlength\ttrigger\tbytes\n");
    for (m, t) in seg.triggers().iter().enumerate() {
        let start = seg.starts()[m];
        let len = seg.patch_len(m);
        let shown = if m == 0 {
            "<bos>".to_string()
        } else {
            escape(&text[start - 1..start - 1 + len])
        };
        writeln!(out, "{start}\t{len}\t{}\t{shown}", trigger_name(t)).expect("writing to a string");
    }
    print!("{out}");
    Ok(())
}
