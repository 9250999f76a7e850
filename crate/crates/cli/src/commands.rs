use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;

use anyhow::{bail, Context, Result};
use cmpnet::data::{generate_dataset, load_dataset, DatasetConfig, MANIFEST_FILE};
use cmpnet::gradcheck::GradOp;
use cmpnet::model::{
    build_model, count_parameters, load_model, save_model, Head, HeadPreset, ModelSpec, ParamReport, Variant,
};
use cmpnet::train::{evaluate, train_with, write_metrics_csv, TrainConfig};
use cmpnet::{make_cmp_config, suggest_stride, CmpConfig};

use crate::args::{
    self, Command, EvalArgs, GenDataArgs, GradCheckArgs, ModelArgs, ParamsArgs, SuggestStrideArgs, TrainArgs,
};

pub const METRICS_FILE: &str = "metrics.csv";
pub const MODEL_FILE: &str = "model.cmpm";
pub const RUN_CONFIG_FILE: &str = "run.cfg";
const GRAD_TOLERANCE: f64 = 1e-4;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Params(a) => params(a),
        Command::SuggestStride(a) => suggest(a),
    }
}

/// `1234567` -> `1,234,567`.
pub fn grouped(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    if a.out.exists() && !a.force {
        let non_empty = fs::read_dir(&a.out)
            .with_context(|| format!("cannot read {}", a.out.display()))?
            .next()
            .is_some();
        if non_empty {
            bail!("{} exists and is not empty; pass --force to write into it", a.out.display());
        }
    }
    let cfg = DatasetConfig {
        seed: a.seed,
        num_classes: a.classes,
        per_class_train: a.train_per_class,
        per_class_test: a.test_per_class,
        image_size: a.size,
    };
    let manifest = generate_dataset(&cfg, &a.out)?;
    let train = manifest.num_classes * manifest.per_class_train;
    let test = manifest.num_classes * manifest.per_class_test;
    println!("manifest: {}", a.out.join(MANIFEST_FILE).display());
    println!(
        "classes={} train={train} test={test} size={} seed={}",
        manifest.num_classes, manifest.image_size, manifest.seed
    );
    Ok(())
}

fn parse_variant(name: &str) -> Result<Variant> {
    Variant::from_name(name).with_context(|| format!("unknown variant {name:?} (expected baseline, wogap or cmp)"))
}

/// CMP settings for a variant, with the stride suggested when omitted.
fn cmp_settings(variant: Variant, r: Option<f64>, s: Option<usize>, channels: usize) -> Result<Option<(f64, usize)>> {
    if variant != Variant::Cmp {
        if r.is_some() || s.is_some() {
            bail!("--r and --s only apply to the cmp variant");
        }
        return Ok(None);
    }
    let r = r.unwrap_or(4.0);
    let s = match s {
        Some(s) => s,
        None => suggest_stride(channels, r)?,
    };
    Ok(Some((r, s)))
}

fn toycar_spec(m: &ModelArgs, image_size: usize, classes: usize) -> Result<ModelSpec> {
    let variant = parse_variant(&m.variant)?;
    let cmp = cmp_settings(variant, m.r, m.s, ModelSpec::toycar_feature_channels())?;
    let head = Head {
        dropout: m.dropout,
        ..Head::new(m.hidden, classes)
    };
    Ok(ModelSpec::toycar(variant, cmp, image_size, head)?)
}

fn run_config_text(a: &TrainArgs, spec: &ModelSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "data={}", a.data.display());
    let _ = writeln!(out, "out={}", a.out.display());
    let _ = writeln!(out, "variant={}", spec.variant);
    if let Some(cfg) = spec.cmp_config().ok().flatten() {
        let _ = writeln!(out, "r={}", cfg.compression());
        let _ = writeln!(out, "s={}", cfg.stride());
    }
    for (k, v) in [
        ("hidden", a.model.hidden.to_string()),
        ("dropout", a.model.dropout.to_string()),
        ("epochs", a.epochs.to_string()),
        ("batch", a.batch.to_string()),
        ("lr", a.lr.to_string()),
        ("conv-lr-ratio", a.conv_lr_ratio.to_string()),
        ("lr-min", a.lr_min.to_string()),
        ("momentum", a.momentum.to_string()),
        ("wd", a.wd.to_string()),
        ("seed", a.seed.to_string()),
        ("no-augment", a.no_augment.to_string()),
    ] {
        let _ = writeln!(out, "{k}={v}");
    }
    out
}

fn print_fc1(report: &ParamReport) {
    println!(
        "parameters: total {}, FC1 {} ({} in_features)",
        grouped(report.total),
        grouped(report.fc1_params),
        grouped(report.fc1_in_features)
    );
}

fn train(a: TrainArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let spec = toycar_spec(&a.model, data.image_size(), data.num_classes())?;
    let cfg = TrainConfig {
        batch_size: a.batch,
        epochs: a.epochs,
        lr_fc: a.lr,
        conv_lr_ratio: a.conv_lr_ratio,
        momentum: a.momentum,
        weight_decay: a.wd,
        lr_min: a.lr_min,
        seed: a.seed,
        augment: !a.no_augment,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let model = build_model(&spec, a.seed)?;
    if let Some(c) = model.cmp() {
        println!(
            "cmp: C={} r={} s={} k={} out_channels={} gaps={}",
            c.in_channels(),
            c.compression(),
            c.stride(),
            c.kernel_size(),
            c.out_channels(),
            c.has_gaps()
        );
    }
    let quiet = a.quiet;
    let outcome = train_with(model, &data, &cfg, |row| {
        if !quiet {
            println!(
                "epoch {:>3}  loss {:.4}  train_acc {:.4}  test_acc {:.4}  lr {:.5}",
                row.epoch, row.train_loss, row.train_acc, row.test_acc, row.lr
            );
        }
    });
    let outcome = match outcome {
        Err(cmpnet::Error::Diverged {
            epoch,
            reason,
            checkpoint: Some(best),
        }) => {
            let path = a.out.join(MODEL_FILE);
            save_model(&best, &path)?;
            bail!(
                "training diverged in epoch {epoch}: {reason}; last good checkpoint saved to {}",
                path.display()
            );
        }
        other => other?,
    };
    write_metrics_csv(a.out.join(METRICS_FILE), &outcome.metrics)?;
    save_model(&outcome.best, a.out.join(MODEL_FILE))?;
    let cfg_path = a.out.join(RUN_CONFIG_FILE);
    fs::write(&cfg_path, run_config_text(&a, &spec)).with_context(|| format!("cannot write {}", cfg_path.display()))?;

    let last = outcome.metrics.last().expect("at least one epoch");
    println!("final test accuracy: {:.4}", last.test_acc);
    println!("best test accuracy: {:.4} (epoch {})", outcome.best_test_acc(), outcome.best_epoch);
    print_fc1(&count_parameters(&spec)?);
    println!("wrote {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg_path = a.run.join(RUN_CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).with_context(|| format!("cannot read {}", cfg_path.display()))?;
    let flags = args::config_to_flags("train", &text).map_err(|e| anyhow::anyhow!("{}: {}", cfg_path.display(), e.0))?;
    let mut argv: Vec<OsString> = vec!["cmpnet".into(), "train".into()];
    argv.extend(flags);
    let run = match args::parse(argv) {
        Ok(cli) => match cli.command {
            Command::Train(t) => t,
            _ => unreachable!(),
        },
        Err(_) => bail!("{} is not a valid run config", cfg_path.display()),
    };

    let data = load_dataset(&a.data)?;
    let spec = toycar_spec(&run.model, data.image_size(), data.num_classes())?;
    let model_path = a.model.unwrap_or_else(|| a.run.join(MODEL_FILE));
    let mut model = load_model(&model_path, &spec)?;
    let report = evaluate(&mut model, &data.test, &data.mean, run.batch)?;
    println!(
        "test accuracy: {:.4} ({} samples, loss {:.4})",
        report.accuracy,
        data.test.len(),
        report.loss
    );
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<()> {
    let ops: Vec<GradOp> = if a.op == "all" {
        GradOp::ALL.to_vec()
    } else {
        let names: Vec<&str> = GradOp::ALL.iter().map(|o| o.name()).collect();
        vec![GradOp::from_name(&a.op)
            .with_context(|| format!("unknown op {:?} (expected all or one of {})", a.op, names.join(", ")))?]
    };
    let mut failed = Vec::new();
    for op in ops {
        let report = op.run(a.seed)?;
        let ok = report.max_rel_error < GRAD_TOLERANCE;
        println!(
            "{:<8} max_rel_err {:.3e}  {}",
            op.name(),
            report.max_rel_error,
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failed.push(op.name());
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

fn print_layers(title: &str, report: &ParamReport) {
    println!("{title}");
    for l in &report.per_layer {
        println!("  {:02} {:<8} {:>14}", l.index, l.kind, grouped(l.params));
    }
    println!("  total       {:>14}", grouped(report.total));
}

type SpecBuilder = Box<dyn Fn(Variant, Option<(f64, usize)>) -> cmpnet::Result<ModelSpec>>;

fn params(a: ParamsArgs) -> Result<()> {
    let toycar = a.preset == "toycar";
    let hidden = a.hidden.unwrap_or(if toycar { ModelSpec::TOYCAR_HIDDEN } else { 256 });
    let head = Head::new(hidden, a.classes);
    let (channels, build): (usize, SpecBuilder) =
        if toycar {
            let size = a.size;
            (ModelSpec::toycar_feature_channels(), Box::new(move |v, c| ModelSpec::toycar(v, c, size, head)))
        } else {
            let preset = HeadPreset::from_name(&a.preset).with_context(|| {
                format!(
                    "unknown preset {:?} (expected densenet161-head, vgg16-head, resnet152-head or toycar)",
                    a.preset
                )
            })?;
            (preset.features()[0], Box::new(move |v, c| ModelSpec::head(preset, v, c, head)))
        };
    let s = match a.s {
        Some(s) => s,
        None => suggest_stride(channels, a.r)?,
    };
    let cfg: CmpConfig = make_cmp_config(channels, a.r, s)?;
    let baseline = build(Variant::BaselineWoGap, None)?;
    let with_cmp = build(Variant::Cmp, Some((a.r, s)))?;
    let base = count_parameters(&baseline)?;
    let comp = count_parameters(&with_cmp)?;
    let [c, m, n] = baseline.input;

    println!("preset {}: features {c}x{m}x{n}, hidden {hidden}, classes {}", a.preset, a.classes);
    println!(
        "cmp: r={} s={} k={} out_channels={} gaps={}",
        a.r,
        cfg.stride(),
        cfg.kernel_size(),
        cfg.out_channels(),
        cfg.has_gaps()
    );
    print_layers("baseline (flattened features, no GAP):", &base);
    print_layers("cmp:", &comp);
    println!(
        "FC1 params: baseline {} vs CMP {}",
        grouped(base.fc1_params),
        grouped(comp.fc1_params)
    );
    println!(
        "FC1 in_features: {} -> {}, ratio {:.2}",
        grouped(base.fc1_in_features),
        grouped(comp.fc1_in_features),
        base.fc1_in_features as f64 / comp.fc1_in_features as f64
    );
    println!(
        "FC1 weight ratio ceil(C/r)/C = {}/{} = {:.6}",
        cfg.out_channels(),
        channels,
        cfg.out_channels() as f64 / channels as f64
    );
    Ok(())
}

fn suggest(a: SuggestStrideArgs) -> Result<()> {
    let s = suggest_stride(a.c, a.r)?;
    let cfg = make_cmp_config(a.c, a.r, s)?;
    println!(
        "s={} k={} gaps={} out_channels={}",
        s,
        cfg.kernel_size(),
        cfg.has_gaps(),
        cfg.out_channels()
    );
    Ok(())
}
