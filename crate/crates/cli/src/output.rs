//! Output locations, PNG rendering and the command error type.

use std::path::{Path, PathBuf};

use deer_core::Image;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "DEER_OUT_ROOT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] deer_core::Error),

    #[error("{0}")]
    Usage(String),

    #[error("cannot write PNG {path}: {source}")]
    Png {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type CliResult<T> = Result<T, CliError>;

/// `explicit`, else `configured`, else `$DEER_OUT_ROOT/<name>`, else
/// `runs/<name>`.
pub fn resolve_out(explicit: Option<&Path>, configured: Option<&Path>, name: &str) -> PathBuf {
    if let Some(p) = explicit.or(configured) {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(name),
        _ => PathBuf::from("runs").join(name),
    }
}

/// File stem of a config path, used to name its default output folder.
pub fn config_name(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned())
}

pub fn parse_window(s: &str) -> Result<(f32, f32), String> {
    let (lo, hi) = s
        .split_once(',')
        .ok_or_else(|| format!("expected LO,HI, got `{s}`"))?;
    let lo: f32 = lo
        .trim()
        .parse()
        .map_err(|e| format!("bad lower bound `{lo}`: {e}"))?;
    let hi: f32 = hi
        .trim()
        .parse()
        .map_err(|e| format!("bad upper bound `{hi}`: {e}"))?;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(format!("window needs finite LO < HI, got {lo},{hi}"));
    }
    Ok((lo, hi))
}

/// Grey levels of `img` clamped to `window` and mapped onto 0..=255.
pub fn windowed_bytes(img: &Image, (lo, hi): (f32, f32)) -> Vec<u8> {
    img.data()
        .iter()
        .map(|&v| {
            let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
            if t.is_nan() {
                0
            } else {
                (t * 255.0).round() as u8
            }
        })
        .collect()
}

pub fn write_png(img: &Image, window: (f32, f32), path: &Path) -> CliResult<()> {
    let n = img.n() as u32;
    let buf =
        image::GrayImage::from_raw(n, n, windowed_bytes(img, window)).expect("n*n grey buffer");
    buf.save(path).map_err(|source| CliError::Png {
        path: path.to_path_buf(),
        source,
    })
}

/// Refuses to overwrite `path` unless `force`.
pub fn check_overwrite(path: &Path, force: bool) -> CliResult<()> {
    if path.exists() && !force {
        return Err(CliError::Usage(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}
