use std::fmt::Display;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use trd_core::checkpoint::load_checkpoint;
use trd_core::datasets::{
    generate_toy, load_paired, preprocess_depth, read_depth, read_rgb, write_toy, Identity, Label, MultimodalSample,
    Split,
};
use trd_core::heatmap::{write_float_grid, write_heatmap};
use trd_core::metrics::MetricsSummary;
use trd_core::trainer::{evaluate, log_path_for};
use trd_core::{Model, Sample, Trainer, TrdError};

use crate::config::{DataSource, RunConfig, DATA_ROOT_ENV};

/// Error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

pub type CmdResult<T = ()> = std::result::Result<T, Failure>;

pub trait Classify<T> {
    fn usage(self) -> CmdResult<T>;
    fn runtime(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for std::result::Result<T, E> {
    fn usage(self) -> CmdResult<T> {
        self.map_err(|e| Failure {
            code: EXIT_USAGE,
            error: e.into(),
        })
    }

    fn runtime(self) -> CmdResult<T> {
        self.map_err(|e| Failure {
            code: EXIT_RUNTIME,
            error: e.into(),
        })
    }
}

fn usage_err<T>(msg: impl Display) -> CmdResult<T> {
    Err(Failure {
        code: EXIT_USAGE,
        error: anyhow!("{msg}"),
    })
}

/// Print the resolved configuration so the run can be repeated from it.
pub fn echo(cfg: &RunConfig) {
    println!("# resolved configuration (fingerprint {})", cfg.fingerprint());
    print!("{}", cfg.to_toml());
    println!("# end of configuration");
}

fn create_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir)
        .map_err(|e| anyhow!("creating {}: {e}", dir.display()))
        .runtime()
}

fn load_split(cfg: &RunConfig, split: Split, size: usize) -> CmdResult<Vec<Sample>> {
    let data = &cfg.data;
    match data.source {
        DataSource::Toy => {
            if data.toy.resolution != size {
                return usage_err(format!(
                    "data.toy.resolution is {} but the backbone expects {size}px inputs",
                    data.toy.resolution
                ));
            }
            let set = generate_toy::<f32>(&data.toy).usage()?;
            Ok(match split {
                Split::Train => set.train,
                Split::Validation => set.validation,
                Split::Test => set.test,
            })
        }
        DataSource::Mvtec3d | DataSource::Paired => {
            let Some(root) = data.resolved_root() else {
                return usage_err(format!(
                    "no dataset root: set data.root, pass --data-root or export {DATA_ROOT_ENV}"
                ));
            };
            if !root.is_dir() {
                return usage_err(format!("dataset root {} does not exist", root.display()));
            }
            load_paired::<f32>(&root, &data.category, split, size, &data.layout()).usage()
        }
    }
}

pub fn make_toy(cfg: &RunConfig, out: &Path) -> CmdResult {
    echo(cfg);
    let toy = &cfg.data.toy;
    let dir = write_toy(toy, out).runtime()?;
    println!(
        "wrote toy set to {} (seed {}, {} train / {} validation / {} test, {} px)",
        dir.display(),
        toy.seed,
        toy.n_train,
        toy.n_val,
        toy.n_test,
        toy.resolution
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> CmdResult {
    let model_cfg = cfg.model_config().usage()?;
    echo(cfg);
    let size = model_cfg.profile.input_size;
    let train = load_split(cfg, Split::Train, size)?;
    let validation = load_split(cfg, Split::Validation, size)?;
    println!("loaded {} training and {} validation samples", train.len(), validation.len());

    let mut trainer = match resume {
        Some(path) => {
            let t = Trainer::<f32>::resume(path, cfg.trainer.clone(), cfg.fingerprint()).usage()?;
            if *t.model().config() != model_cfg {
                return usage_err(format!(
                    "{} was trained with a different model configuration",
                    path.display()
                ));
            }
            println!("resuming from {} at epoch {}", path.display(), t.epoch());
            t
        }
        None => {
            let model = Model::new(model_cfg).usage()?;
            Trainer::new(model, cfg.trainer.clone(), cfg.fingerprint()).usage()?
        }
    };
    let total = cfg.trainer.epochs;
    trainer
        .fit(&train, &validation, &cfg.score_config(), |e| {
            println!(
                "epoch {:>4}/{total}  loss {:.5}  (2d {:.5}, 3d {:.5})  {:.1}s",
                e.epoch,
                e.losses.total,
                e.losses.branch_2d.total(),
                e.losses.branch_3d.total(),
                e.wall_seconds
            );
        })
        .runtime()?;

    create_dir(out)?;
    let ckpt = out.join("model.safetensors");
    trainer.save(&ckpt).runtime()?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())
        .map_err(|e| anyhow!("writing config: {e}"))
        .runtime()?;
    if let Some(c) = &trainer.model().calibration {
        println!(
            "calibration: 2d mean {:.6} std {:.6}, 3d mean {:.6} std {:.6}",
            c.mean[0], c.std[0], c.mean[1], c.std[1]
        );
    }
    println!("checkpoint {}", ckpt.display());
    println!("train log  {}", log_path_for(&ckpt).display());
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: &Path, check_profile: bool) -> CmdResult<Model> {
    if !checkpoint.is_file() {
        return usage_err(format!("checkpoint {} not found", checkpoint.display()));
    }
    let expected = if check_profile { Some(cfg.profile().usage()?) } else { None };
    let loaded = load_checkpoint::<f32>(checkpoint, expected.as_ref()).usage()?;
    Ok(loaded.model)
}

fn sample_stem(id: &Identity) -> String {
    format!("{}_{:03}", id.defect, id.index)
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, out: &Path, dump_maps: bool, check_profile: bool) -> CmdResult {
    echo(cfg);
    let model = load_model(cfg, checkpoint, check_profile)?;
    let size = model.profile().input_size;
    let test = load_split(cfg, Split::Test, size)?;
    println!("evaluating {} test samples with {} fusion", test.len(), cfg.score.fusion);
    let ev = evaluate(&model, &test, &cfg.score_config(), cfg.metrics.pro_fpr_limit).runtime()?;
    let summary = MetricsSummary::new(vec![ev.report.clone()]);
    print!("{summary}");

    create_dir(out)?;
    let write = |name: &str, text: String| -> CmdResult {
        std::fs::write(out.join(name), text)
            .map_err(|e| anyhow!("writing {name}: {e}"))
            .runtime()
    };
    write("report.txt", summary.to_string())?;
    write("report.json", summary.to_json())?;

    if dump_maps {
        let dir = out.join("maps");
        create_dir(&dir)?;
        for (s, sc) in test.iter().zip(&ev.scores) {
            let stem = sample_stem(&s.identity);
            let mask = s.mask.as_ref();
            for (tag, map) in [("fused", &sc.fused), ("2d", &sc.map_2d), ("3d", &sc.map_3d)] {
                write_float_grid(&dir.join(format!("{stem}_{tag}.tiff")), map).runtime()?;
                write_heatmap(&dir.join(format!("{stem}_{tag}.png")), map, mask).runtime()?;
            }
        }
        println!("maps written to {}", dir.display());
    }
    println!("report written to {}", out.join("report.txt").display());
    Ok(())
}

pub struct InferInputs<'a> {
    pub rgb: &'a Path,
    pub three_d: &'a Path,
    /// Read the second modality as an RGB image instead of a depth TIFF.
    pub three_d_is_image: bool,
}

pub fn infer(cfg: &RunConfig, checkpoint: &Path, inputs: InferInputs<'_>, out: &Path, check_profile: bool) -> CmdResult {
    let model = load_model(cfg, checkpoint, check_profile)?;
    let size = model.profile().input_size;
    let image_2d = read_rgb::<f32>(inputs.rgb, size).usage()?;
    let image_3d = if inputs.three_d_is_image {
        read_rgb::<f32>(inputs.three_d, size).usage()?
    } else {
        let grid = read_depth(inputs.three_d).usage()?;
        preprocess_depth::<f32>(&grid, size)
            .map_err(|e| match e {
                TrdError::Ingestion { reason, .. } => TrdError::ingestion(inputs.three_d, reason),
                other => other,
            })
            .usage()?
    };
    let identity = Identity {
        category: "input".into(),
        split: Split::Test,
        defect: "unknown".into(),
        index: 0,
    };
    let sample = MultimodalSample::new(image_2d, image_3d, Label::Normal, None, identity).runtime()?;
    let result = model.score_sample(&sample, &cfg.score_config()).runtime()?;

    create_dir(out)?;
    for (name, map) in [("fused.png", &result.fused), ("2d.png", &result.map_2d), ("3d.png", &result.map_3d)] {
        write_heatmap(&out.join(name), map, None).runtime()?;
    }
    std::fs::write(out.join("score.txt"), format!("{}\n", result.score))
        .map_err(|e| anyhow!("writing score: {e}"))
        .runtime()?;
    println!("score {}", result.score);
    Ok(())
}

pub fn default_out(sub: &str) -> PathBuf {
    PathBuf::from("trd-out").join(sub)
}
