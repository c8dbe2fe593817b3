//! Run manifests and the distance chart.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
struct FileHash {
    path: PathBuf,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    argv: Vec<String>,
    config: &'a C,
    seed: Option<u64>,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut hasher = Sha256::new();
    io::copy(&mut file, &mut hasher).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hasher.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

fn hashes(paths: &[PathBuf]) -> Result<Vec<FileHash>> {
    paths
        .iter()
        .map(|p| Ok(FileHash { path: p.clone(), sha256: sha256_file(p)? }))
        .collect()
}

/// A CSV manifest plus every file named in its `path` column.
pub fn manifest_inputs(manifest: &Path) -> Result<Vec<PathBuf>> {
    let base = manifest.parent().unwrap_or_else(|| Path::new(""));
    let mut reader = csv::Reader::from_path(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let column = reader
        .headers()
        .with_context(|| format!("reading {}", manifest.display()))?
        .iter()
        .position(|h| h == "path");
    let mut out = vec![manifest.to_path_buf()];
    if let Some(col) = column {
        for record in reader.records() {
            let record = record.with_context(|| format!("reading {}", manifest.display()))?;
            if let Some(p) = record.get(col) {
                let p = PathBuf::from(p);
                out.push(if p.is_relative() { base.join(p) } else { p });
            }
        }
    }
    Ok(out)
}

/// Echoes the command line and resolved configuration with content hashes
/// of every input and output.
pub fn write_run_manifest(
    path: &Path,
    config: &impl Serialize,
    seed: Option<u64>,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<()> {
    let manifest = RunManifest {
        tool: "atgcn",
        version: env!("CARGO_PKG_VERSION"),
        argv: std::env::args().collect(),
        config,
        seed,
        inputs: hashes(inputs)?,
        outputs: hashes(outputs)?,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

const WIDTH: f64 = 900.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 40.0;

/// Raw signal in grey, smoothed in blue, peaks as red dots.
pub fn distance_svg(title: &str, raw: &[f64], smoothed: &[f64], peaks: &[usize]) -> String {
    let (lo, hi) = raw
        .iter()
        .chain(smoothed)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = raw.len().max(2) as f64 - 1.0;
    let x = |t: usize| MARGIN + (WIDTH - 2.0 * MARGIN) * t as f64 / n;
    let y = |v: f64| HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * (v - lo) / span;
    let line = |values: &[f64]| {
        values.iter().enumerate().fold(String::new(), |mut s, (t, &v)| {
            let _ = write!(s, "{:.2},{:.2} ", x(t), y(v));
            s
        })
    };
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    );
    let _ = writeln!(svg, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(svg, "<text x=\"{MARGIN}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{}</text>", escape(title));
    let _ = writeln!(
        svg,
        "<line x1=\"{MARGIN}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{MARGIN}\" y1=\"{MARGIN}\" x2=\"{MARGIN}\" y2=\"{b}\" stroke=\"black\"/>",
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    let _ = writeln!(svg, "<polyline fill=\"none\" stroke=\"#999999\" stroke-width=\"1\" points=\"{}\"/>", line(raw));
    let _ = writeln!(svg, "<polyline fill=\"none\" stroke=\"#1f5fbf\" stroke-width=\"2\" points=\"{}\"/>", line(smoothed));
    for &p in peaks.iter().filter(|&&p| p < smoothed.len()) {
        let _ = writeln!(svg, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"#cc2222\"/>", x(p), y(smoothed[p]));
    }
    let _ = writeln!(
        svg,
        "<text x=\"{MARGIN}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">frame 0..{}, distance {lo:.4}..{hi:.4}</text>",
        HEIGHT - 12.0,
        raw.len().saturating_sub(1)
    );
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
