//! 2-D projection of embeddings: PCA, nearest-neighbour purity and a PNG
//! scatter.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, SymmetricEigen};
use voxtracer_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointKind {
    Source,
    Recovered,
}

#[derive(Debug, Clone)]
pub struct PlotPoint {
    pub speaker: String,
    pub kind: PointKind,
    pub values: Vec<f64>,
}

/// One point per line: `speaker<TAB>source|recovered<TAB>v1 v2 ...`.
pub fn parse_pairs(text: &str) -> Result<Vec<PlotPoint>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Format(format!("line {}: expected speaker, kind and values", i + 1));
        let mut cols = line.split('\t');
        let speaker = cols.next().ok_or_else(bad)?.to_string();
        let kind = match cols.next().ok_or_else(bad)? {
            "source" => PointKind::Source,
            "recovered" => PointKind::Recovered,
            _ => return Err(bad()),
        };
        let values = cols
            .next()
            .ok_or_else(bad)?
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        out.push(PlotPoint { speaker, kind, values });
    }
    if out.is_empty() {
        return Err(Error::Parameter("no embeddings to plot".into()));
    }
    let d = out[0].values.len();
    if d == 0 || out.iter().any(|p| p.values.len() != d) {
        return Err(Error::Shape("embeddings must share one non-zero dimension".into()));
    }
    Ok(out)
}

/// Project onto the two leading principal components. Component signs are
/// fixed so the largest-magnitude loading is positive.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    if rows.is_empty() {
        return Err(Error::Parameter("no embeddings to project".into()));
    }
    let (n, d) = (rows.len(), rows[0].len());
    let mut x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = x.transpose() * &x / n.max(2) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes = Vec::new();
    for &k in order.iter().take(2) {
        let mut v = eig.eigenvectors.column(k).into_owned();
        let lead = v.iter().copied().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
        if lead < 0.0 {
            v = -v;
        }
        axes.push(v);
    }
    while axes.len() < 2 {
        axes.push(nalgebra::DVector::zeros(d));
    }
    Ok((0..n)
        .map(|i| {
            let r = x.row(i);
            [r.dot(&axes[0].transpose()), r.dot(&axes[1].transpose())]
        })
        .collect())
}

/// Share of points whose nearest other point carries the same label.
pub fn neighbor_purity(points: &[[f64; 2]], labels: &[&str]) -> Result<f64> {
    if points.len() < 2 || points.len() != labels.len() {
        return Err(Error::Parameter("purity needs at least two labelled points".into()));
    }
    let mut same = 0usize;
    for i in 0..points.len() {
        let nearest = (0..points.len())
            .filter(|&j| j != i)
            .min_by(|&a, &b| dist(points[i], points[a]).total_cmp(&dist(points[i], points[b])))
            .expect("at least two points");
        if labels[nearest] == labels[i] {
            same += 1;
        }
    }
    Ok(same as f64 / points.len() as f64)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

/// Scatter plot: filled squares for source embeddings, rings for recovered.
pub fn render(proj: &[[f64; 2]], points: &[PlotPoint], path: &Path) -> Result<()> {
    const SIZE: u32 = 512;
    const MARGIN: f64 = 24.0;
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in proj {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let span = |k: usize| (hi[k] - lo[k]).max(1e-9);
    let mut colors: BTreeMap<&str, Rgb<u8>> = BTreeMap::new();
    for p in points {
        let n = colors.len();
        colors.entry(p.speaker.as_str()).or_insert(Rgb(PALETTE[n % PALETTE.len()]));
    }
    let usable = SIZE as f64 - 2.0 * MARGIN;
    for (xy, p) in proj.iter().zip(points) {
        let cx = (MARGIN + (xy[0] - lo[0]) / span(0) * usable) as i64;
        let cy = (SIZE as f64 - MARGIN - (xy[1] - lo[1]) / span(1) * usable) as i64;
        let c = colors[p.speaker.as_str()];
        for dy in -5i64..=5 {
            for dx in -5i64..=5 {
                let r2 = dx * dx + dy * dy;
                let on = match p.kind {
                    PointKind::Source => dx.abs() <= 3 && dy.abs() <= 3,
                    PointKind::Recovered => (16..=25).contains(&r2),
                };
                let (x, y) = (cx + dx, cy + dy);
                if on && (0..SIZE as i64).contains(&x) && (0..SIZE as i64).contains(&y) {
                    img.put_pixel(x as u32, y as u32, c);
                }
            }
        }
    }
    img.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
