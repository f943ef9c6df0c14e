use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use texstat::config::RunConfig;
use texstat::data::{self, Sample, SynthParams};
use texstat::gradsuite;
use texstat::ksco;
use texstat::tensor::GradCheckOptions;
use texstat::train::{self, trace_csv};
use texstat::{checkpoint, Error, Model, ModelConfig, Result, Tape, Tensor};

use crate::{EvalArgs, GradcheckArgs, KscoDumpArgs, PredictArgs, SynthArgs, TrainArgs};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_dataset(root: &Path, config: &ModelConfig) -> Result<Vec<Sample>> {
    data::load_dir(
        &root.join("images"),
        &root.join("masks"),
        config.height,
        config.width,
    )
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let model = match &a.config {
        Some(path) => RunConfig::load(path)?.model,
        None => ModelConfig::toy(),
    };
    let params = SynthParams {
        count: a.count,
        size: a.size,
        tail_weight: a.tail_weight,
        seed: a.seed,
        ..SynthParams::default()
    };
    params.validate()?;
    params.check_model(&model)?;
    let samples = data::synth(&params)?;
    create_dir(&a.out)?;
    data::write_dir(&samples, &a.out)?;
    eprintln!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

/// Split `--key value` / `--key=value` tokens into pairs.
fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    let mut it = tokens.iter();
    while let Some(tok) = it.next() {
        let Some(flag) = tok.strip_prefix("--") else {
            return Err(Error::Config(format!(
                "expected an override flag, got {tok:?}"
            )));
        };
        match flag.split_once('=') {
            Some((k, v)) => pairs.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("--{flag} needs a value")))?;
                pairs.push((flag.to_string(), v.clone()));
            }
        }
    }
    Ok(pairs)
}

fn ids(samples: &[Sample]) -> String {
    samples
        .iter()
        .map(|s| s.id.as_str())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for (k, v) in parse_overrides(&a.overrides)? {
        cfg.set(&k, &v)?;
    }
    cfg.validate()?;

    let samples = load_dataset(&a.data, &cfg.model)?;
    let (train_set, val) = if cfg.train.val_fraction > 0.0 {
        let v = cfg.train.val_fraction;
        let parts = data::split(&samples, [1.0 - v, v, 0.0], cfg.train.seed)?;
        (parts.train, parts.val)
    } else {
        (samples, Vec::new())
    };

    create_dir(&a.out)?;
    let paths = ["manifest.txt", "best.ckpt", "final.ckpt", "trace.csv"].map(|f| a.out.join(f));
    let mut manifest = format!("# texstat {} run manifest\n", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(manifest, "# data = {}", a.data.display());
    let _ = writeln!(manifest, "# train_ids = {}", ids(&train_set));
    let _ = writeln!(manifest, "# val_ids = {}", ids(&val));
    for p in &paths[1..] {
        let _ = writeln!(manifest, "# artifact = {}", p.display());
    }
    let _ = writeln!(
        manifest,
        "# reproduce: texstat train --data {} --config {} --out DIR\n",
        a.data.display(),
        paths[0].display()
    );
    manifest.push_str(&cfg.to_text());
    write_file(&paths[0], &manifest)?;

    let mut model = Model::<f32>::build(&cfg.model)?;
    eprintln!(
        "training {} parameters on {} samples ({} held out)",
        model.num_parameters(),
        train_set.len(),
        val.len()
    );
    let outcome = train::train(&mut model, &train_set, &val, &cfg.train, |r| {
        eprintln!(
            "epoch {:>4}  loss {:.6}  lr {:.2e}  dice {:.4}",
            r.epoch, r.loss, r.lr, r.val_dice
        );
    })?;
    write_file(&paths[3], &trace_csv(&outcome.trace))?;
    checkpoint::save(&model, &paths[2])?;
    model.params = outcome.best;
    checkpoint::save(&model, &paths[1])?;
    eprintln!(
        "best dice {:.4} at epoch {}",
        outcome.best_val_dice, outcome.best_epoch
    );
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let model = checkpoint::load::<f32>(&a.checkpoint)?;
    let samples = load_dataset(&a.data, model.config())?;
    let report = train::evaluate(&model, &samples, a.threshold, a.ge.into())?;
    let csv = report.to_csv();
    print!("{csv}");
    write_file(&a.out, &csv)?;
    if report.undefined_hd95() > 0 {
        eprintln!(
            "{} samples have no HD95 (an empty mask on one side)",
            report.undefined_hd95()
        );
    }
    Ok(())
}

fn mask_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("prediction");
    out.with_file_name(format!("{stem}_mask.png"))
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let model = checkpoint::load::<f32>(&a.checkpoint)?;
    let cfg = model.config();
    let (image, (h, w)) = data::read_image(&a.image, Some((cfg.height, cfg.width)))?;
    let probs = data::resize_map(&model.predict(&image)?, h, w).map(|p| p.clamp(0.0, 1.0));
    let threshold = a.threshold as f32;
    let mask = probs.map(|p| if p >= threshold { 1.0 } else { 0.0 });
    data::write_gray(&probs, &a.out)?;
    let mp = mask_path(&a.out);
    data::write_gray(&mask, &mp)?;
    eprintln!("wrote {} and {}", a.out.display(), mp.display());
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let opts = GradCheckOptions {
        tol: a.tol,
        ..GradCheckOptions::default()
    };
    let entries = gradsuite::run(a.module, a.seed, opts)?;
    print!("{}", gradsuite::format_table(&entries));
    let failed = entries.iter().filter(|e| !e.report.passed).count();
    if failed > 0 {
        return Err(Error::Numerical(format!(
            "{failed} of {} gradient checks failed",
            entries.len()
        )));
    }
    println!("{} checks passed", entries.len());
    Ok(())
}

const HISTOGRAM_WIDTH: usize = 256;

pub fn ksco_dump(a: KscoDumpArgs) -> Result<()> {
    let (image, (h, w)) = data::read_image(&a.image, None)?;
    let plane = h * w;
    let luma = Tensor::<f64>::from_fn([1, h, w], |i| {
        (0..3)
            .map(|c| image.data()[c * plane + i] as f64)
            .sum::<f64>()
            / 3.0
    });
    let snap = ksco::snapshot(&luma, a.levels)?;
    let tape = Tape::new();
    let emb = ksco::quantized_intensity(tape.constant(luma), &snap, a.excess_kurtosis)?;
    let s = emb.s.to_tensor();

    let n = a.levels;
    let counts: Vec<usize> = (0..n)
        .map(|l| {
            s.data()[l * plane..(l + 1) * plane]
                .iter()
                .filter(|&&v| v != 0.0)
                .count()
        })
        .collect();
    let totals: Vec<f64> = (0..n)
        .map(|l| s.data()[l * plane..(l + 1) * plane].iter().sum())
        .collect();
    let peak = counts.iter().copied().max().unwrap_or(0).max(1);
    let bars = Tensor::<f32>::from_fn([n, HISTOGRAM_WIDTH], |i| {
        let (row, col) = (i / HISTOGRAM_WIDTH, i % HISTOGRAM_WIDTH);
        if col * peak < counts[row] * HISTOGRAM_WIDTH {
            1.0
        } else {
            0.0
        }
    });

    let mut table = format!(
        "# {}×{} luminance, min {:.6}, max {:.6}, kurtosis {:.6}, weight {:.6}{}\n",
        h,
        w,
        snap.levels.lo,
        snap.levels.hi,
        snap.stats.kurtosis,
        snap.stats.weight(a.excess_kurtosis),
        if snap.stats.degenerate {
            " (degenerate)"
        } else {
            ""
        }
    );
    table.push_str("level\tW_n\tcount\ttotal\n");
    for l in 0..n {
        let _ = writeln!(
            table,
            "{}\t{:.6}\t{}\t{:.6}",
            l + 1,
            snap.levels.levels[l],
            counts[l],
            totals[l]
        );
    }
    let png = a.out.with_extension("png");
    let txt = a.out.with_extension("txt");
    data::write_gray(&bars, &png)?;
    write_file(&txt, &table)?;
    print!("{table}");
    Ok(())
}
