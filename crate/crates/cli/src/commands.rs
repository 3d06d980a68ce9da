use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use pamfn::data::{write_synthetic, Batch, Dataset, Modality, SyntheticSpec};
use pamfn::gradcheck::{run_all, run_suite, GradcheckOptions, Suite};
use pamfn::metrics::{evaluate_task, EvalReport, Scorer};
use pamfn::network::pamfn_forward;
use pamfn::session::Session;
use pamfn::training::{
    pretrain_branch, train_mixed, train_one_stage, write_loss_csv, Checkpoint, TrainOutcome,
};
use sha2::{Digest, Sha256};

use crate::run_config::RunConfig;
use crate::{CliError, EvalArgs, RunArgs, TrainArgs};

type CmdResult = Result<(), CliError>;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create directory {}", dir.display()))
        .map_err(CliError::Usage)
}

fn write(path: &Path, contents: &str) -> CmdResult {
    fs::write(path, contents)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(CliError::Runtime)
}

fn digest(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn synth(spec_path: Option<&Path>, out: &Path, seed: Option<u64>) -> CmdResult {
    let mut spec = match spec_path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("cannot read spec {}", p.display()))
                .map_err(CliError::Usage)?;
            toml::from_str::<SyntheticSpec>(&text)
                .with_context(|| format!("invalid spec {}", p.display()))
                .map_err(CliError::Usage)?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    create_dir(out)?;
    let manifest = write_synthetic(&spec, out).map_err(|e| match e {
        pamfn::PamfnError::Io { .. } => CliError::Usage(e.into()),
        other => other.into(),
    })?;
    println!(
        "wrote {} videos ({} train / {} test) to {}",
        manifest.videos.len(),
        spec.n_videos - spec.n_test,
        spec.n_test,
        out.display()
    );
    Ok(())
}

/// Loads the config and applies the shared overrides.
fn load_run(args: &RunArgs) -> Result<(RunConfig, Dataset), CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(run) = &args.run {
        cfg.run = run.clone();
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let data = Dataset::load(&cfg.data.manifest).map_err(|e| match e {
        pamfn::PamfnError::Io { .. } => CliError::Usage(e.into()),
        other => other.into(),
    })?;
    // feature widths always come from the data
    cfg.model.dims = data.dims;
    cfg.data.manifest = fs::canonicalize(&cfg.data.manifest).unwrap_or(cfg.data.manifest.clone());
    Ok((cfg, data))
}

fn save_outcome(dir: &Path, cfg: &RunConfig, out: &TrainOutcome) -> CmdResult {
    create_dir(dir)?;
    write(&dir.join("config.toml"), &cfg.snapshot()?)?;
    let last = dir.join("last.json");
    out.last.save(&last)?;
    out.best.save(&dir.join("best.json"))?;
    write_loss_csv(&dir.join("loss.csv"), &out.log)?;
    let final_loss = out.log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!("final train loss {final_loss:.6}");
    println!("checkpoint {} sha256 {}", last.display(), digest(&last)?);
    Ok(())
}

pub fn pretrain(root: &Path, args: &RunArgs, modality: Modality, epochs: Option<usize>) -> CmdResult {
    let (mut cfg, data) = load_run(args)?;
    if let Some(e) = epochs {
        cfg.train.phase1.epochs = e;
    }
    cfg.validate()?;
    let out = pretrain_branch(modality, &data.train, &cfg.model, &cfg.train)?;
    save_outcome(&root.join(&cfg.run).join("pretrain").join(modality.name()), &cfg, &out)
}

pub fn train(root: &Path, args: &TrainArgs) -> CmdResult {
    let (mut cfg, data) = load_run(&args.run)?;
    let o = &args.model;
    if let Some(v) = o.variant {
        cfg.model.fusion_variant = v;
    }
    if let Some(d) = o.decoder {
        cfg.model.decoder_variant = d;
    }
    if let Some(stages) = &o.fusion_stages {
        cfg.model.fusion_stages = stages.clone();
    }
    if let Some(k) = o.k {
        cfg.model.k = k;
    }
    if o.baseline.is_some() {
        cfg.model.baseline = o.baseline;
    }
    if let Some(e) = args.epochs {
        cfg.train.phase2.epochs = e;
    }
    cfg.validate()?;
    let run_dir = root.join(&cfg.run);
    let out = if args.one_stage {
        train_one_stage(&data.train, &cfg.model, &cfg.train)?
    } else {
        let dir = args.pretrained.clone().unwrap_or_else(|| run_dir.join("pretrain"));
        let mut ckpts = Vec::with_capacity(3);
        for m in Modality::ALL {
            let path = dir.join(m.name()).join("last.json");
            if !path.is_file() {
                return Err(CliError::usage(format!(
                    "missing pretrained {m} branch checkpoint {} (run `pamfn pretrain --modality {m}` first, or pass --one-stage)",
                    path.display()
                )));
            }
            ckpts.push(Checkpoint::load(&path)?);
        }
        train_mixed(&data.train, [&ckpts[0], &ckpts[1], &ckpts[2]], &cfg.model, &cfg.train)?
    };
    save_outcome(&run_dir.join("train"), &cfg, &out)
}

fn default_checkpoint(run_dir: &Path) -> PathBuf {
    run_dir.join("train").join("last.json")
}

pub fn eval(root: &Path, args: &EvalArgs) -> CmdResult {
    let (cfg, data) = load_run(&args.run)?;
    let run_dir = root.join(&cfg.run);
    let path = args.checkpoint.clone().unwrap_or_else(|| default_checkpoint(&run_dir));
    if !path.is_file() {
        return Err(CliError::usage(format!("checkpoint {} does not exist", path.display())));
    }
    let ckpt = Checkpoint::load(&path)?;
    // width and depth must match the configuration; variants come from the checkpoint
    let mut shape_cfg = cfg.model.clone();
    shape_cfg.fusion_variant = ckpt.model.fusion_variant;
    shape_cfg.decoder_variant = ckpt.model.decoder_variant;
    shape_cfg.fusion_stages = ckpt.model.fusion_stages.clone();
    shape_cfg.k = ckpt.model.k;
    shape_cfg.baseline = ckpt.model.baseline;
    shape_cfg.dropout = ckpt.model.dropout;
    ckpt.check_model(&shape_cfg).map_err(|e| CliError::Usage(e.into()))?;
    let model = ckpt.into_model()?;
    let videos = data.split(args.split);
    let result = evaluate_task(&model, &data.task, videos, Scorer::Model)?;
    let report = EvalReport::assemble(vec![result])?;

    let out_dir = run_dir.join("eval");
    create_dir(&out_dir)?;
    write(&out_dir.join("report.toml"), &report.to_toml()?)?;
    write(&out_dir.join("report.csv"), &report.to_csv()?)?;
    if args.dump_decisions {
        let mut csv = String::from("video,stage,t,decision\n");
        if model.config.baseline.is_none() {
            for v in videos {
                let mut s = Session::eval(&model.params);
                let out = pamfn_forward(&mut s, &model.config, &Batch::single(v));
                for st in &out.trace.stages {
                    if let Some(d) = &st.decisions {
                        for (t, a) in d.iter().enumerate() {
                            csv.push_str(&format!("{},{},{},{}\n", v.id, st.stage, t, a));
                        }
                    }
                }
            }
        }
        write(&out_dir.join("decisions.csv"), &csv)?;
    }
    for t in &report.per_task {
        println!("task {} n={} rho={:.4}", t.task, t.n, t.rho);
    }
    println!("fisher_avg {:.4}", report.fisher_avg);
    Ok(())
}

pub fn gradcheck(module: Option<Suite>, seed: u64, corrupt: Option<String>) -> CmdResult {
    let opts = GradcheckOptions {
        seed,
        corrupt,
        ..GradcheckOptions::default()
    };
    let report = match module {
        Some(s) => run_suite(s, &opts),
        None => run_all(&opts),
    };
    let scalars: usize = report.checks.iter().map(|c| c.scalars).sum();
    let failed: Vec<_> = report.failures().collect();
    for f in &failed {
        println!(
            "FAIL {} {}: max abs err {:.3e}, rel err {:.3e} (entry {})",
            f.suite, f.name, f.max_abs_err, f.max_rel_err, f.worst_index
        );
    }
    println!(
        "{} parameters ({scalars} scalars) checked, {} failed",
        report.checks.len(),
        failed.len()
    );
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::runtime(format!(
            "gradient check failed for: {}",
            failed.iter().map(|f| f.name.as_str()).collect::<Vec<_>>().join(", ")
        )))
    }
}
