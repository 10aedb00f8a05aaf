use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::model::Checkpoint;
use crate::registry::ClassRegistry;
use crate::synth::Dataset;
use crate::tensor::Tensor;

const PALETTE: [&str; 12] = [
    "#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377", "#bbbbbb", "#e07b39",
    "#55aa88", "#8866cc", "#aa4455", "#447788",
];

const POWER_ITERATIONS: usize = 500;

/// Deterministic but unstructured start vector for the power iteration.
fn start_vector(dim: usize, component: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(dim);
    let mut state = 0x9E3779B97F4A7C15u64 ^ (component as u64).wrapping_mul(0xD1B54A32D192ED03);
    for _ in 0..dim {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        v.push(((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5);
    }
    v
}

/// Top-2 principal directions via power iteration with deflation, then a
/// deterministic sign rule: the largest-|loading| coordinate is positive.
/// Returns the two projected coordinate vectors.
pub fn pca_2d(embeddings: &Tensor) -> Result<[Vec<f64>; 2]> {
    let n = embeddings.rows();
    let dim = embeddings.cols();
    if n < 3 {
        return Err(Error::validation("pca", format!("need at least 3 samples, got {n}")));
    }
    let mut mean = vec![0.0; dim];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(embeddings.row(i)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            embeddings
                .row(i)
                .iter()
                .zip(&mean)
                .map(|(v, m)| v - m)
                .collect()
        })
        .collect();

    // Covariance, lower cost through X^T X since n and dim are both small.
    let mut cov = vec![0.0; dim * dim];
    for row in &centered {
        for a in 0..dim {
            let ra = row[a];
            for b in 0..dim {
                cov[a * dim + b] += ra * row[b];
            }
        }
    }
    for v in cov.iter_mut() {
        *v /= n as f64;
    }

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(2);
    let mut cov_work = cov;
    for comp_idx in 0..2 {
        let mut v = start_vector(dim, comp_idx);
        let mut eigenvalue = 0.0;
        for _ in 0..POWER_ITERATIONS {
            let mut next = vec![0.0; dim];
            for a in 0..dim {
                let mut s = 0.0;
                for b in 0..dim {
                    s += cov_work[a * dim + b] * v[b];
                }
                next[a] = s;
            }
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            for x in next.iter_mut() {
                *x /= norm;
            }
            eigenvalue = norm;
            v = next;
        }
        if eigenvalue <= 1e-12 {
            return Err(Error::validation(
                "pca",
                "degenerate embedding cloud: no variance along requested component",
            ));
        }
        // Sign rule: coordinate of largest |loading| (first on ties) positive.
        let mut lead = 0;
        for (i, x) in v.iter().enumerate() {
            if x.abs() > v[lead].abs() {
                lead = i;
            }
        }
        if v[lead] < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
        // Deflate: cov <- cov - lambda v v^T.
        for a in 0..dim {
            for b in 0..dim {
                cov_work[a * dim + b] -= eigenvalue * v[a] * v[b];
            }
        }
        components.push(v);
    }

    let project = |comp: &[f64]| -> Vec<f64> {
        centered
            .iter()
            .map(|row| row.iter().zip(comp).map(|(x, c)| x * c).sum())
            .collect()
    };
    Ok([project(&components[0]), project(&components[1])])
}

fn fmt_coord(v: f64) -> String {
    format!("{v:.3}")
}

/// Self-contained SVG scatter: one circle per sample, one color per class,
/// and a legend. Byte-identical across runs for identical inputs.
pub fn scatter_svg_from_embeddings(
    embeddings: &Tensor,
    labels: &[u32],
    registry: &ClassRegistry,
) -> Result<String> {
    if embeddings.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "scatter",
            detail: format!("{} rows vs {} labels", embeddings.rows(), labels.len()),
        });
    }
    let mut class_ids: Vec<u32> = Vec::new();
    for &l in labels {
        if !class_ids.contains(&l) {
            class_ids.push(l);
        }
    }
    class_ids.sort_unstable();
    if class_ids.len() < 2 {
        return Err(Error::validation("scatter", "need at least 2 classes"));
    }

    let [xs, ys] = pca_2d(embeddings)?;
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for (&x, &y) in xs.iter().zip(&ys) {
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        min_y = min_y.min(y);
        max_y = max_y.max(y);
    }
    let span_x = (max_x - min_x).max(1e-9);
    let span_y = (max_y - min_y).max(1e-9);

    let (w, h, margin) = (640.0, 480.0, 40.0);
    let sx = |x: f64| margin + (x - min_x) / span_x * (w - 2.0 * margin - 140.0);
    let sy = |y: f64| h - margin - (y - min_y) / span_y * (h - 2.0 * margin);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for (i, &label) in labels.iter().enumerate() {
        let color_idx = class_ids.iter().position(|&c| c == label).unwrap();
        let color = PALETTE[color_idx % PALETTE.len()];
        let _ = writeln!(
            svg,
            r#"<circle cx="{}" cy="{}" r="2" fill="{}" fill-opacity="0.7"/>"#,
            fmt_coord(sx(xs[i])),
            fmt_coord(sy(ys[i])),
            color
        );
    }
    for (idx, &id) in class_ids.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let y = margin + idx as f64 * 18.0;
        let name = registry.name_of(id).unwrap_or("?");
        let _ = writeln!(
            svg,
            r#"<circle cx="{}" cy="{}" r="4" fill="{}"/>"#,
            fmt_coord(w - 130.0),
            fmt_coord(y),
            color
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text>"#,
            fmt_coord(w - 120.0),
            fmt_coord(y + 4.0),
            name
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Projects the test set through the checkpoint's projection head, reduces
/// to 2-D, and writes the scatter SVG.
pub fn emit_scatter(ckpt: &Checkpoint, test: &Dataset, path: &Path) -> Result<()> {
    if test.samples.len() < 3 {
        return Err(Error::validation("scatter", "need at least 3 samples"));
    }
    let xs: Vec<Vec<f64>> = test.samples.iter().map(|s| s.x.clone()).collect();
    let labels: Vec<u32> = test.samples.iter().map(|s| s.y).collect();
    let embeddings = ckpt.embeddings_values(&xs)?;
    let svg = scatter_svg_from_embeddings(&embeddings, &labels, &test.registry)?;
    std::fs::write(path, svg).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{ClassInfo, ClassRole};

    fn registry2() -> ClassRegistry {
        ClassRegistry::new(vec![
            ClassInfo {
                id: 0,
                name: "base_0".into(),
                role: ClassRole::Base,
            },
            ClassInfo {
                id: 1,
                name: "base_1".into(),
                role: ClassRole::Base,
            },
        ])
        .unwrap()
    }

    #[test]
    fn identical_embeddings_are_degenerate() {
        let e = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!(pca_2d(&e).is_err());
    }

    #[test]
    fn svg_has_one_marker_per_sample_and_parses_shallowly() {
        let e = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.2],
            vec![0.9, 0.1, 0.1],
            vec![-1.0, 0.2, 0.0],
            vec![-0.8, -0.1, 0.3],
        ])
        .unwrap();
        let labels = vec![0, 0, 1, 1];
        let svg = scatter_svg_from_embeddings(&e, &labels, &registry2()).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        // 4 sample markers + 2 legend markers.
        assert_eq!(svg.matches("<circle").count(), 6);
        assert_eq!(svg.matches("base_0").count(), 1);
    }

    #[test]
    fn svg_is_byte_identical() {
        let e = Tensor::from_rows(&[
            vec![0.3, 1.0],
            vec![0.2, 0.9],
            vec![-0.4, -1.0],
            vec![-0.25, -0.8],
        ])
        .unwrap();
        let labels = vec![0, 0, 1, 1];
        let a = scatter_svg_from_embeddings(&e, &labels, &registry2()).unwrap();
        let b = scatter_svg_from_embeddings(&e, &labels, &registry2()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pca_sign_rule_is_deterministic() {
        let e = Tensor::from_rows(&[
            vec![2.0, 0.1],
            vec![1.0, 0.0],
            vec![-1.0, -0.05],
            vec![-2.0, 0.02],
        ])
        .unwrap();
        let [x1, _] = pca_2d(&e).unwrap();
        // First component aligns with the x-axis and its lead loading is
        // positive, so the first (largest) sample projects positively.
        assert!(x1[0] > 0.0);
    }
}
