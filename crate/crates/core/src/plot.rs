//! CSV exchange files for sample scatters and temperature histograms, and
//! their static SVG renderings.
//!
//! Every file ends with a `# manifest <hash>` line tying it to its run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};

use crate::error::{CtdsError, Result};
use crate::eval::BetaHistogram;

pub const SAMPLES_HEADER: &str = "x0,x1";
pub const HISTOGRAM_HEADER: &str = "beta,count";

fn manifest_line(hash: &str) -> String {
    format!("# manifest {hash}\n")
}

pub fn samples_csv(x: ArrayView2<'_, f64>, hash: &str) -> Result<String> {
    if x.ncols() != 2 {
        return Err(CtdsError::DimensionMismatch {
            what: "scatter columns",
            expected: 2,
            got: x.ncols(),
        });
    }
    let mut s = format!("{SAMPLES_HEADER}\n");
    for r in x.rows() {
        writeln!(s, "{},{}", r[0], r[1]).expect("string write");
    }
    s.push_str(&manifest_line(hash));
    Ok(s)
}

pub fn histogram_csv(h: &BetaHistogram, hash: &str) -> String {
    let mut s = format!("{HISTOGRAM_HEADER}\n");
    for (c, n) in h.centers().iter().zip(&h.counts) {
        writeln!(s, "{c},{n}").expect("string write");
    }
    s.push_str(&manifest_line(hash));
    s
}

/// Data rows and the manifest hash of a CSV written by this module.
fn parse_csv(text: &str, header: &str) -> Result<(Vec<Vec<f64>>, Option<String>)> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == header => {}
        Some(h) => return Err(CtdsError::InvalidConfig(format!("expected header {header:?}, found {h:?}"))),
        None => return Err(CtdsError::Empty("csv file")),
    }
    let mut rows = Vec::new();
    let mut hash = None;
    for line in lines {
        if let Some(rest) = line.strip_prefix("# manifest ") {
            hash = Some(rest.trim().to_string());
            continue;
        }
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| CtdsError::InvalidConfig(format!("bad csv value {v:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != 2 {
            return Err(CtdsError::InvalidConfig(format!("expected 2 columns, got {}", row.len())));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CtdsError::Empty("csv rows"));
    }
    Ok((rows, hash))
}

pub fn parse_samples(text: &str) -> Result<(Array2<f64>, Option<String>)> {
    let (rows, hash) = parse_csv(text, SAMPLES_HEADER)?;
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let n = flat.len() / 2;
    Ok((Array2::from_shape_vec((n, 2), flat).expect("two columns"), hash))
}

/// Bin centres and counts.
pub fn parse_histogram(text: &str) -> Result<(Vec<f64>, Vec<f64>, Option<String>)> {
    let (rows, hash) = parse_csv(text, HISTOGRAM_HEADER)?;
    Ok((rows.iter().map(|r| r[0]).collect(), rows.iter().map(|r| r[1]).collect(), hash))
}

const SIZE: f64 = 400.0;
const PAD: f64 = 30.0;

fn svg_open(title: &str, hash: Option<&str>) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{w}\" viewBox=\"0 0 {w} {w}\">\n",
        w = SIZE
    );
    if let Some(h) = hash {
        writeln!(s, "<!-- manifest {h} -->").expect("string write");
    }
    writeln!(s, "<rect width=\"{SIZE}\" height=\"{SIZE}\" fill=\"white\"/>").expect("string write");
    writeln!(s, "<text x=\"{}\" y=\"18\" font-size=\"13\" text-anchor=\"middle\" font-family=\"sans-serif\">{}</text>", SIZE / 2.0, title).expect("string write");
    s
}

pub fn scatter_svg(x: ArrayView2<'_, f64>, title: &str, hash: Option<&str>) -> Result<String> {
    if x.nrows() == 0 {
        return Err(CtdsError::Empty("scatter points"));
    }
    let lim = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9) * 1.05;
    let scale = (SIZE - 2.0 * PAD) / (2.0 * lim);
    let mut s = svg_open(title, hash);
    writeln!(
        s,
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{0}\" height=\"{0}\" fill=\"none\" stroke=\"black\"/>",
        SIZE - 2.0 * PAD
    )
    .expect("string write");
    for r in x.rows() {
        let px = PAD + (r[0] + lim) * scale;
        let py = SIZE - PAD - (r[1] + lim) * scale;
        writeln!(s, "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"1.2\" fill=\"steelblue\" fill-opacity=\"0.5\"/>").expect("string write");
    }
    writeln!(s, "<text x=\"{PAD}\" y=\"{}\" font-size=\"10\" font-family=\"sans-serif\">[-{lim:.1}, {lim:.1}]^2</text>", SIZE - 10.0).expect("string write");
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn histogram_svg(centers: &[f64], counts: &[f64], title: &str, hash: Option<&str>) -> Result<String> {
    if counts.is_empty() || counts.len() != centers.len() {
        return Err(CtdsError::Empty("histogram bins"));
    }
    let total: f64 = counts.iter().sum();
    let top = counts.iter().fold(0.0f64, |m, c| m.max(*c)).max(1.0);
    let w = (SIZE - 2.0 * PAD) / counts.len() as f64;
    let h = SIZE - 2.0 * PAD - 20.0;
    let mut s = svg_open(title, hash);
    for (k, (c, n)) in centers.iter().zip(counts).enumerate() {
        let bh = h * n / top;
        let x = PAD + k as f64 * w;
        let y = SIZE - PAD - bh;
        writeln!(s, "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{bh:.2}\" fill=\"indianred\" stroke=\"black\"/>", w - 1.0).expect("string write");
        writeln!(s, "<text x=\"{:.2}\" y=\"{}\" font-size=\"9\" text-anchor=\"middle\" font-family=\"sans-serif\">{c:.2}</text>", x + w / 2.0, SIZE - PAD + 12.0).expect("string write");
        let frac = if total > 0.0 { n / total } else { 0.0 };
        writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"9\" text-anchor=\"middle\" font-family=\"sans-serif\">{frac:.2}</text>", x + w / 2.0, y - 3.0).expect("string write");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Renders every scatter and histogram CSV found in `dir`. Returns the SVG
/// paths written (none when `render` is false).
pub fn render_dir(dir: &Path, render: bool) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    entries.sort();
    let mut written = Vec::new();
    let mut found = false;
    for p in entries {
        let text = fs::read_to_string(&p)?;
        let first = text.lines().next().unwrap_or("").trim().to_string();
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("plot").to_string();
        let svg = if first == SAMPLES_HEADER {
            let (x, hash) = parse_samples(&text)?;
            scatter_svg(x.view(), &stem, hash.as_deref())?
        } else if first == HISTOGRAM_HEADER {
            let (c, n, hash) = parse_histogram(&text)?;
            histogram_svg(&c, &n, &stem, hash.as_deref())?
        } else {
            continue;
        };
        found = true;
        if render {
            let out = p.with_extension("svg");
            fs::write(&out, svg)?;
            written.push(out);
        }
    }
    if !found {
        return Err(CtdsError::Empty("plottable csv files in run directory"));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::temperature_histogram;

    #[test]
    fn samples_round_trip_and_header() {
        let x = Array2::from_shape_vec((3, 2), vec![0.5, -1.0, 2.25, 3.0, -0.125, 1e-3]).unwrap();
        let csv = samples_csv(x.view(), "abc").unwrap();
        assert!(csv.starts_with("x0,x1\n"));
        let (y, h) = parse_samples(&csv).unwrap();
        assert_eq!(y, x);
        assert_eq!(h.as_deref(), Some("abc"));
    }

    #[test]
    fn empty_files_are_rejected() {
        assert!(parse_samples("").is_err());
        assert!(parse_samples("x0,x1\n# manifest h\n").is_err());
        assert!(parse_histogram("x0,x1\n1,2\n").is_err());
    }

    #[test]
    fn histogram_header_and_counts() {
        let h = temperature_histogram(&[0.2, 0.5, 1.0, 1.0], 0.2, 4).unwrap();
        let csv = histogram_csv(&h, "h");
        assert!(csv.starts_with("beta,count\n"));
        let (c, n, _) = parse_histogram(&csv).unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(n, vec![1.0, 1.0, 0.0, 2.0]);
    }

    #[test]
    fn rendering_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let x = Array2::from_shape_fn((50, 2), |(i, j)| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        fs::write(dir.path().join("samples.csv"), samples_csv(x.view(), "h").unwrap()).unwrap();
        let h = temperature_histogram(&[0.3, 0.9, 1.0], 0.2, 10).unwrap();
        fs::write(dir.path().join("beta_hist.csv"), histogram_csv(&h, "h")).unwrap();
        let first = render_dir(dir.path(), true).unwrap();
        assert_eq!(first.len(), 2);
        let a: Vec<String> = first.iter().map(|p| fs::read_to_string(p).unwrap()).collect();
        render_dir(dir.path(), true).unwrap();
        let b: Vec<String> = first.iter().map(|p| fs::read_to_string(p).unwrap()).collect();
        assert_eq!(a, b);
        assert!(a[0].contains("<svg"));
    }

    #[test]
    fn csv_only_mode_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(render_dir(dir.path(), false).is_err());
        let x = Array2::zeros((2, 2));
        fs::write(dir.path().join("s.csv"), samples_csv(x.view(), "h").unwrap()).unwrap();
        assert!(render_dir(dir.path(), false).unwrap().is_empty());
    }
}
