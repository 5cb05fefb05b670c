//! Command-line front end: groupwise fitting, segmentation, synthetic
//! data generation and evaluation metrics.

mod io_model;
mod manifest;

use atlasforge_core::io::{read_volume, vector_field_to_volume, write_mvol};
use atlasforge_core::pipeline::{
    dice_score, fit_groupwise, pearson_correlation, segment_unseen, synthesize_dataset,
    ModelConfig, SynthConfig,
};
use atlasforge_core::{Error, VolumeGrid};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "atlasforge", version, about = "Groupwise tissue-atlas construction and segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the groupwise model to a population of volumes.
    Fit {
        /// Directory of volumes or a manifest file (one subject per line:
        /// `path[,labels_path[,zeta]]`; channels `;`-separated, `-` for a
        /// missing channel).
        #[arg(long)]
        input: PathBuf,
        /// Number of mixture classes.
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
        /// Directory of label volumes matched to subjects by file stem.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Rater sensitivity in [1/K, 1] for labelled subjects.
        #[arg(long)]
        zeta: Option<f64>,
        /// Flat `key = value` configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        /// Export per-subject bias fields as MVOL.
        #[arg(long)]
        write_bias: bool,
        /// Export per-subject forward warps as 3-channel MVOL.
        #[arg(long)]
        write_warp: bool,
        /// Export per-subject initial velocities as 3-channel MVOL.
        #[arg(long)]
        write_velocity: bool,
    },
    /// Segment a volume against a fitted atlas directory.
    Segment {
        #[arg(long)]
        atlas: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a synthetic dataset with known ground truth.
    Synth {
        /// bias20 (field in [0.9, 1.1]) or bias40 (field in [0.8, 1.2]).
        #[arg(long, default_value = "bias20")]
        preset: String,
        /// Noise percent (1, 3 or 7 in the reference experiments).
        #[arg(long, default_value_t = 3.0)]
        noise: f64,
        #[arg(long, default_value_t = 3)]
        subjects: usize,
        /// Voxels per axis, e.g. 16,16,16.
        #[arg(long, default_value = "16,16,16")]
        dims: String,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Subjects (0-based, comma list) that receive manual labels.
        #[arg(long)]
        labelled: Option<String>,
    },
    /// Evaluate dice or pearson between two volumes.
    Eval {
        /// `dice` (volumes thresholded at 0.5) or `pearson`.
        metric: String,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Mask volume (> 0.5 included), pearson only.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Fit {
            input,
            classes,
            out,
            labels,
            zeta,
            config,
            seed,
            threads,
            write_bias,
            write_warp,
            write_velocity,
        } => {
            let mut cfg = ModelConfig::new(classes)?;
            if let Some(path) = &config {
                let text = std::fs::read_to_string(path)?;
                cfg.apply_file(&text)?;
                cfg.k = classes;
            }
            if let Some(z) = zeta {
                cfg.zeta = z;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(t) = threads {
                cfg.threads = t.max(1);
            }
            cfg.validate()?;
            let loaded = manifest::load_subjects(&input, labels.as_deref(), &cfg)?;
            let fit = fit_groupwise(&loaded.subjects, &cfg)?;
            std::fs::create_dir_all(&out)?;
            io_model::write_atlas_dir(&out, &fit.atlas, &fit.hyperprior, loaded.any_nifti)?;
            std::fs::write(out.join("ledger.csv"), fit.ledger.to_csv())?;
            for (i, (data, state)) in
                loaded.subjects.iter().zip(&fit.states).enumerate()
            {
                let stem = &data.name;
                atlasforge_core::affine::write_affine_text(
                    &out.join(format!("{stem}.affine.txt")),
                    &state.affine,
                )?;
                io_model::write_gamma(
                    &out.join(format!("{stem}.gamma.mvol")),
                    &state.gamma,
                    data.volume.shape(),
                )?;
                if write_bias {
                    let basis = io_model::bias_basis_for(&cfg, data.volume.shape())?;
                    let field = state.bias_field(&basis)?;
                    let vol = VolumeGrid::new(
                        data.volume.dims(),
                        data.volume.spacing(),
                        data.volume.channels(),
                        field,
                        None,
                    )?;
                    write_mvol(&out.join(format!("{stem}.bias.mvol")), &vol)?;
                }
                if write_warp {
                    let vol = vector_field_to_volume(&state.deformation.forward);
                    write_mvol(&out.join(format!("{stem}.warp.mvol")), &vol)?;
                }
                if write_velocity {
                    let vol = vector_field_to_volume(&state.velocity.u);
                    write_mvol(&out.join(format!("{stem}.velocity.mvol")), &vol)?;
                }
                let _ = i;
            }
            println!(
                "fit: {} subjects, {} sweeps, bound {:.6e}",
                loaded.subjects.len(),
                fit.sweeps_run,
                fit.bound.total
            );
            Ok(())
        }
        Command::Segment {
            atlas,
            input,
            out,
            config,
        } => {
            let (atlas_vol, hyperprior, k) = io_model::read_atlas_dir(&atlas)?;
            let mut cfg = ModelConfig::new(k)?;
            if let Some(path) = &config {
                let text = std::fs::read_to_string(path)?;
                cfg.apply_file(&text)?;
                cfg.k = k;
            }
            cfg.validate()?;
            let volume: VolumeGrid = read_volume(&input)?;
            let name = input
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("subject")
                .to_string();
            let data = atlasforge_core::pipeline::SubjectData {
                volume,
                labels: None,
                name,
            };
            let seg = segment_unseen(&data, &atlas_vol, &hyperprior, &cfg, None)?;
            std::fs::create_dir_all(&out)?;
            io_model::write_gamma(&out.join("gamma.mvol"), &seg.state.gamma, data.volume.shape())?;
            let argmax = seg.state.gamma.argmax();
            let vol = VolumeGrid::new(
                data.volume.dims(),
                data.volume.spacing(),
                1,
                argmax.iter().map(|&c| c as f64).collect(),
                None,
            )?;
            write_mvol(&out.join("argmax.mvol"), &vol)?;
            let basis = io_model::bias_basis_for(&cfg, data.volume.shape())?;
            let field = seg.state.bias_field(&basis)?;
            let bias_vol = VolumeGrid::new(
                data.volume.dims(),
                data.volume.spacing(),
                data.volume.channels(),
                field,
                None,
            )?;
            write_mvol(&out.join("bias.mvol"), &bias_vol)?;
            write_mvol(
                &out.join("warp.mvol"),
                &vector_field_to_volume(&seg.state.deformation.forward),
            )?;
            std::fs::write(out.join("ledger.csv"), seg.ledger.to_csv())?;
            println!("segment: {} sweeps", seg.sweeps_run);
            Ok(())
        }
        Command::Synth {
            preset,
            noise,
            subjects,
            dims,
            classes,
            out,
            seed,
            labelled,
        } => {
            let dims = parse_dims(&dims)?;
            let mut cfg = SynthConfig::new(dims, subjects, classes).preset(&preset, noise)?;
            if let Some(list) = labelled {
                cfg.labelled_subjects = list
                    .split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| Error::Format(format!("bad --labelled list: {list}")))?;
            }
            let ds = synthesize_dataset::<f64>(&cfg, seed)?;
            std::fs::create_dir_all(&out)?;
            let mut manifest_text = String::new();
            for (i, d) in ds.data.iter().enumerate() {
                let vol_path = out.join(format!("{}.mvol", d.name));
                write_mvol(&vol_path, &d.volume)?;
                let mut line = format!("{}.mvol", d.name);
                if d.labels.is_some() {
                    let lab_path = out.join(format!("{}.labels.mvol", d.name));
                    let lab = VolumeGrid::new(
                        dims,
                        [1.0; 3],
                        1,
                        ds.true_classes[i].iter().map(|&z| (z + 1) as f64).collect(),
                        None,
                    )?;
                    write_mvol(&lab_path, &lab)?;
                    line.push_str(&format!(",{}.labels.mvol,1.0", d.name));
                }
                manifest_text.push_str(&line);
                manifest_text.push('\n');
                // ground truth for evaluation
                let n = d.volume.len();
                let bias = VolumeGrid::new(
                    dims,
                    [1.0; 3],
                    d.volume.channels(),
                    ds.true_bias[i].clone(),
                    None,
                )?;
                write_mvol(&out.join(format!("{}.true_bias.mvol", d.name)), &bias)?;
                let zvol = VolumeGrid::new(
                    dims,
                    [1.0; 3],
                    1,
                    ds.true_classes[i].iter().map(|&z| z as f64).collect(),
                    None,
                )?;
                write_mvol(&out.join(format!("{}.true_class.mvol", d.name)), &zvol)?;
                write_mvol(
                    &out.join(format!("{}.true_warp.mvol", d.name)),
                    &vector_field_to_volume(&ds.true_warps[i].forward),
                )?;
                let _ = n;
            }
            std::fs::write(out.join("manifest.txt"), manifest_text)?;
            // the generating atlas
            let n = ds.atlas.len();
            let mut pi = Vec::with_capacity(classes * n);
            for c in 0..classes {
                pi.extend(ds.atlas.class_plane(c).iter().copied());
            }
            let atlas_vol = VolumeGrid::new(dims, [1.0; 3], classes, pi, None)?;
            write_mvol(&out.join("true_atlas.mvol"), &atlas_vol)?;
            println!("synth: wrote {} subjects to {}", subjects, out.display());
            Ok(())
        }
        Command::Eval { metric, a, b, mask } => {
            let va: VolumeGrid = read_volume(&a)?;
            let vb: VolumeGrid = read_volume(&b)?;
            if va.dims() != vb.dims() {
                return Err(Error::GridMismatch {
                    expected: va.dims(),
                    got: vb.dims(),
                });
            }
            let m: Option<Vec<bool>> = match mask {
                Some(path) => {
                    let mv: VolumeGrid = read_volume(&path)?;
                    if mv.dims() != va.dims() {
                        return Err(Error::GridMismatch {
                            expected: va.dims(),
                            got: mv.dims(),
                        });
                    }
                    Some(mv.channel(0).iter().map(|&v| v > 0.5).collect())
                }
                None => None,
            };
            match metric.as_str() {
                "dice" => {
                    // probabilistic maps thresholded at 0.5; an optional
                    // mask restricts the comparison
                    let keep = |i: usize| m.as_ref().is_none_or(|mm| mm[i]);
                    let ma: Vec<bool> = va
                        .channel(0)
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| keep(i) && v > 0.5)
                        .collect();
                    let mb: Vec<bool> = vb
                        .channel(0)
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| keep(i) && v > 0.5)
                        .collect();
                    let d: f64 = dice_score(&ma, &mb)?;
                    println!("{d:.6}");
                }
                "pearson" => {
                    let r: f64 =
                        pearson_correlation(va.channel(0), vb.channel(0), m.as_deref())?;
                    println!("{r:.6}");
                }
                other => {
                    return Err(Error::invalid(format!(
                        "unknown metric {other} (expected dice or pearson)"
                    )))
                }
            }
            Ok(())
        }
    }
}

fn parse_dims(text: &str) -> Result<[usize; 3], Error> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::Format(format!("bad --dims: {text}")))?;
    if parts.len() != 3 {
        return Err(Error::Format("--dims wants three values".into()));
    }
    Ok([parts[0], parts[1], parts[2]])
}

