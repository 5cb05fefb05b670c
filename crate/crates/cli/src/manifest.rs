//! Subject loading: directory scan or manifest file.

use atlasforge_core::io::read_volume;
use atlasforge_core::mixture::LabelData;
use atlasforge_core::pipeline::{ModelConfig, SubjectData};
use atlasforge_core::{Error, Result, VolumeGrid};
use std::path::Path;

pub struct LoadedSubjects {
    pub subjects: Vec<SubjectData<f64>>,
    pub any_nifti: bool,
}

/// Load subjects from a directory (volumes sorted by name) or a manifest
/// (`path[,labels_path[,zeta]]`, channels `;`-separated, `-` marking an
/// entirely missing channel).
pub fn load_subjects(
    input: &Path,
    labels_dir: Option<&Path>,
    config: &ModelConfig<f64>,
) -> Result<LoadedSubjects> {
    if input.is_dir() {
        load_directory(input, labels_dir, config)
    } else {
        load_manifest(input, config)
    }
}

fn is_volume(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("mvol") | Some("nii")
    )
}

fn load_directory(
    dir: &Path,
    labels_dir: Option<&Path>,
    config: &ModelConfig<f64>,
) -> Result<LoadedSubjects> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_volume(p))
        .filter(|p| {
            // skip auxiliary volumes emitted by synth or earlier fits
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("");
            !stem.contains(".labels")
                && !stem.contains(".true_")
                && !stem.starts_with("true_")
                && !stem.contains(".gamma")
                && !stem.contains(".bias")
                && !stem.contains(".warp")
                && !stem.contains(".velocity")
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid(format!(
            "no .mvol or .nii volumes in {}",
            dir.display()
        )));
    }
    let mut subjects = Vec::with_capacity(paths.len());
    let mut any_nifti = false;
    for path in paths {
        any_nifti |= path.extension().and_then(|e| e.to_str()) == Some("nii");
        let volume: VolumeGrid = read_volume(&path)?;
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("subject")
            .to_string();
        let labels = match labels_dir {
            Some(ld) => {
                let candidates = [
                    ld.join(format!("{name}.mvol")),
                    ld.join(format!("{name}.labels.mvol")),
                    ld.join(format!("{name}.nii")),
                ];
                match candidates.iter().find(|p| p.exists()) {
                    Some(p) => Some(load_labels(p, volume.len(), config.zeta, config.k)?),
                    None => None,
                }
            }
            None => None,
        };
        subjects.push(SubjectData {
            volume,
            labels,
            name,
        });
    }
    Ok(LoadedSubjects {
        subjects,
        any_nifti,
    })
}

fn load_manifest(path: &Path, config: &ModelConfig<f64>) -> Result<LoadedSubjects> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut subjects = Vec::new();
    let mut any_nifti = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split(',').map(str::trim);
        let vol_spec = parts
            .next()
            .ok_or_else(|| Error::Format(format!("manifest line {}", lineno + 1)))?;
        let labels_path = parts.next().filter(|s| !s.is_empty() && *s != "-");
        let zeta: f64 = match parts.next() {
            Some(z) if !z.is_empty() => z
                .parse()
                .map_err(|_| Error::Format(format!("bad zeta on line {}", lineno + 1)))?,
            _ => config.zeta,
        };
        let volume = load_channels(base, vol_spec, &mut any_nifti)?;
        let name = vol_spec
            .split(';')
            .find(|p| *p != "-")
            .and_then(|p| Path::new(p).file_stem().and_then(|s| s.to_str()))
            .unwrap_or("subject")
            .to_string();
        let labels = match labels_path {
            Some(lp) => Some(load_labels(&base.join(lp), volume.len(), zeta, config.k)?),
            None => None,
        };
        subjects.push(SubjectData {
            volume,
            labels,
            name,
        });
    }
    if subjects.is_empty() {
        return Err(Error::invalid("manifest lists no subjects"));
    }
    Ok(LoadedSubjects {
        subjects,
        any_nifti,
    })
}

/// `a.mvol;b.mvol;-` stacks per-channel volumes; `-` is a channel that is
/// entirely missing for this subject.
fn load_channels(base: &Path, spec: &str, any_nifti: &mut bool) -> Result<VolumeGrid> {
    let parts: Vec<&str> = spec.split(';').collect();
    if parts.len() == 1 {
        *any_nifti |= parts[0].ends_with(".nii");
        return read_volume(&base.join(parts[0]));
    }
    let mut loaded: Vec<Option<VolumeGrid>> = Vec::with_capacity(parts.len());
    for p in &parts {
        if *p == "-" {
            loaded.push(None);
        } else {
            *any_nifti |= p.ends_with(".nii");
            let v: VolumeGrid = read_volume(&base.join(p))?;
            if v.channels() != 1 {
                return Err(Error::invalid(
                    "channel-stacked volumes must be single-channel",
                ));
            }
            loaded.push(Some(v));
        }
    }
    let reference = loaded
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::invalid("a subject cannot be entirely missing"))?;
    let dims = reference.dims();
    let spacing = reference.spacing();
    let n = reference.len();
    let channels = loaded.len();
    let mut values = vec![0.0f64; channels * n];
    let mut missing = vec![false; channels * n];
    for (c, entry) in loaded.iter().enumerate() {
        match entry {
            Some(v) => {
                if v.dims() != dims {
                    return Err(Error::GridMismatch {
                        expected: dims,
                        got: v.dims(),
                    });
                }
                for j in 0..n {
                    values[c * n + j] = v.value(j, 0);
                    missing[c * n + j] = v.is_missing(j, 0);
                }
            }
            None => {
                for j in 0..n {
                    missing[c * n + j] = true;
                }
            }
        }
    }
    VolumeGrid::new(dims, spacing, channels, values, Some(missing))
}

fn load_labels(path: &Path, n: usize, zeta: f64, k: usize) -> Result<LabelData<f64>> {
    let vol: VolumeGrid = read_volume(path)?;
    if vol.len() != n {
        return Err(Error::invalid(format!(
            "label volume {} does not match subject grid",
            path.display()
        )));
    }
    let labels = vol
        .channel(0)
        .iter()
        .map(|&v| {
            let l = v.round();
            if !(0.0..=u16::MAX as f64).contains(&l) {
                Err(Error::invalid("label ids must be small non-negative integers"))
            } else {
                Ok(l as u16)
            }
        })
        .collect::<Result<Vec<u16>>>()?;
    LabelData::new(labels, zeta, k)
}
