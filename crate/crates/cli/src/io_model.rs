//! Serialization of the fitted model: atlas directory layout and the
//! hyperprior text format.

use atlasforge_core::bias::BiasBasis;
use atlasforge_core::geometry::GridShape;
use atlasforge_core::io::{read_mvol, write_mvol, write_nifti};
use atlasforge_core::mixture::{GaussWishart, GaussWishartBundle, Responsibilities};
use atlasforge_core::pipeline::ModelConfig;
use atlasforge_core::template::TissueAtlas;
use atlasforge_core::{Error, Result, VolumeGrid};
use atlasforge_core::nalgebra::{DMatrix, DVector};
use std::path::Path;

/// Write `atlas.mvol` (K channels), the text sidecar and the hyperpriors.
pub fn write_atlas_dir(
    dir: &Path,
    atlas: &TissueAtlas<f64>,
    hyperprior: &GaussWishartBundle<f64>,
    also_nifti: bool,
) -> Result<()> {
    let k = atlas.classes();
    let n = atlas.len();
    let shape = atlas.shape();
    let mut values = Vec::with_capacity(k * n);
    for c in 0..k {
        values.extend(atlas.class_plane(c).iter().copied());
    }
    let vol = VolumeGrid::new(shape.dims, shape.spacing, k, values, None)?;
    write_mvol(&dir.join("atlas.mvol"), &vol)?;
    if also_nifti {
        for c in 0..k {
            let class = VolumeGrid::new(
                shape.dims,
                shape.spacing,
                1,
                atlas.class_plane(c).to_vec(),
                None,
            )?;
            write_nifti(&dir.join(format!("atlas_class{c}.nii")), &class)?;
        }
    }
    let mut sidecar = String::new();
    sidecar.push_str(&format!("classes = {k}\n"));
    let alphas: Vec<String> = atlas.alpha0.iter().map(|a| format!("{a:.17e}")).collect();
    sidecar.push_str(&format!("alpha0 = {}\n", alphas.join(",")));
    let names: Vec<String> = (0..k).map(|c| format!("class{c}")).collect();
    sidecar.push_str(&format!("class_names = {}\n", names.join(",")));
    std::fs::write(dir.join("atlas.txt"), sidecar)?;
    write_hyperprior(&dir.join("hyperprior.txt"), hyperprior)?;
    Ok(())
}

/// Load an atlas directory written by [`write_atlas_dir`].
pub fn read_atlas_dir(dir: &Path) -> Result<(TissueAtlas<f64>, GaussWishartBundle<f64>, usize)> {
    let sidecar = std::fs::read_to_string(dir.join("atlas.txt"))?;
    let mut k = 0usize;
    let mut alpha0: Vec<f64> = Vec::new();
    for line in sidecar.lines() {
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        match key.trim() {
            "classes" => {
                k = value
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format("bad classes in atlas.txt".into()))?
            }
            "alpha0" => {
                alpha0 = value
                    .split(',')
                    .map(|p| p.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Format("bad alpha0 in atlas.txt".into()))?;
            }
            _ => {}
        }
    }
    if k == 0 {
        return Err(Error::Format("atlas.txt missing classes".into()));
    }
    let vol: VolumeGrid = read_mvol(&dir.join("atlas.mvol"))?;
    if vol.channels() != k {
        return Err(Error::Format("atlas.mvol channel count mismatch".into()));
    }
    if alpha0.len() != k {
        alpha0 = vec![1.01; k];
    }
    let mut pi = Vec::with_capacity(k * vol.len());
    for c in 0..k {
        pi.extend(vol.channel(c).iter().copied());
    }
    let atlas = TissueAtlas::new(
        GridShape::new(vol.dims(), vol.spacing()),
        k,
        alpha0,
        pi,
    )?;
    let hyperprior = read_hyperprior(&dir.join("hyperprior.txt"))?;
    Ok((atlas, hyperprior, k))
}

pub fn write_hyperprior(path: &Path, bundle: &GaussWishartBundle<f64>) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("classes = {}\n", bundle.k()));
    out.push_str(&format!("channels = {}\n", bundle.dim()));
    for (c, gw) in bundle.classes.iter().enumerate() {
        let m: Vec<String> = gw.m.iter().map(|v| format!("{v:.17e}")).collect();
        out.push_str(&format!("class{c}.m = {}\n", m.join(",")));
        out.push_str(&format!("class{c}.beta = {:.17e}\n", gw.beta));
        out.push_str(&format!("class{c}.nu = {:.17e}\n", gw.nu));
        let w: Vec<String> = gw.w.iter().map(|v| format!("{v:.17e}")).collect();
        out.push_str(&format!("class{c}.w = {}\n", w.join(",")));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_hyperprior(path: &Path) -> Result<GaussWishartBundle<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut k = 0usize;
    let mut d = 0usize;
    let mut fields = std::collections::HashMap::new();
    for line in text.lines() {
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        match key.as_str() {
            "classes" => {
                k = value
                    .parse()
                    .map_err(|_| Error::Format("bad classes in hyperprior".into()))?
            }
            "channels" => {
                d = value
                    .parse()
                    .map_err(|_| Error::Format("bad channels in hyperprior".into()))?
            }
            _ => {
                fields.insert(key, value);
            }
        }
    }
    if k == 0 || d == 0 {
        return Err(Error::Format("hyperprior.txt missing header".into()));
    }
    let parse_list = |s: &str| -> Result<Vec<f64>> {
        s.split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format("bad number list in hyperprior".into()))
    };
    let mut classes = Vec::with_capacity(k);
    for c in 0..k {
        let get = |suffix: &str| -> Result<&String> {
            fields
                .get(&format!("class{c}.{suffix}"))
                .ok_or_else(|| Error::Format(format!("hyperprior missing class{c}.{suffix}")))
        };
        let m = DVector::from_vec(parse_list(get("m")?)?);
        let beta: f64 = get("beta")?
            .parse()
            .map_err(|_| Error::Format("bad beta".into()))?;
        let nu: f64 = get("nu")?
            .parse()
            .map_err(|_| Error::Format("bad nu".into()))?;
        let w_vals = parse_list(get("w")?)?;
        if w_vals.len() != d * d || m.len() != d {
            return Err(Error::Format("hyperprior dimension mismatch".into()));
        }
        // nalgebra iterates column-major; we wrote via the same iterator
        let w = DMatrix::from_vec(d, d, w_vals);
        classes.push(GaussWishart::new(m, beta, w, nu)?);
    }
    GaussWishartBundle::new(classes)
}

/// Responsibilities as a K-channel MVOL.
pub fn write_gamma(
    path: &Path,
    gamma: &Responsibilities<f64>,
    shape: GridShape<f64>,
) -> Result<()> {
    let n = gamma.len();
    let k = gamma.classes();
    let mut values = vec![0.0f64; k * n];
    for j in 0..n {
        for c in 0..k {
            values[c * n + j] = gamma.row(j)[c];
        }
    }
    let vol = VolumeGrid::new(shape.dims, shape.spacing, k, values, None)?;
    write_mvol(path, &vol)
}

pub fn bias_basis_for(config: &ModelConfig<f64>, shape: GridShape<f64>) -> Result<BiasBasis<f64>> {
    let orders = config
        .bias_orders
        .unwrap_or_else(|| BiasBasis::default_orders(shape, config.bias_cutoff_mm));
    BiasBasis::new(shape, orders)
}
