//! Quantitative evaluation: mean per joint position error (in its
//! squared-norm form), MSE change relative to mean imputation, the
//! zero-velocity predictor used by the downstream harness, and CSV/SVG
//! emitters for the result curves.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Observed length and prediction horizon of the downstream task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictionTask {
    pub observed: usize,
    pub horizon: usize,
}

impl Default for PredictionTask {
    fn default() -> Self {
        PredictionTask {
            observed: 50,
            horizon: 25,
        }
    }
}

/// Mean per joint position error over `[J, 3, T]` pose tensors:
/// the mean over joints and frames of the squared deviation norm.
pub fn mpjpe(pred: &Tensor, truth: &Tensor) -> Result<Real> {
    let s = pred.shape();
    if s != truth.shape() || s.len() != 3 || s[1] != 3 {
        return Err(Error::ShapeMismatch {
            op: "mpjpe",
            lhs: pred.shape().to_vec(),
            rhs: truth.shape().to_vec(),
        });
    }
    let (j, t) = (s[0], s[2]);
    let mut acc = 0.0;
    for jj in 0..j {
        for tt in 0..t {
            let mut d2 = 0.0;
            for dim in 0..3 {
                let idx = (jj * 3 + dim) * t + tt;
                let d = pred.data()[idx] - truth.data()[idx];
                d2 += d * d;
            }
            acc += d2;
        }
    }
    Ok(acc / (j * t) as Real)
}

/// Percent change in MSE of MAP imputation relative to mean imputation;
/// negative is an improvement.
pub fn mse_reduction(map_mse: Real, mean_mse: Real) -> Result<Real> {
    if mean_mse <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "mse_reduction: mean-imputation MSE must be positive, got {mean_mse}"
        )));
    }
    Ok(100.0 * (map_mse - mean_mse) / mean_mse)
}

/// Repeat the last observed pose for `horizon` frames.
pub fn zero_velocity_predict(observed: &Tensor, horizon: usize) -> Result<Tensor> {
    let s = observed.shape();
    if s.len() != 3 || s[1] != 3 || s[2] == 0 {
        return Err(Error::ShapeMismatch {
            op: "zero_velocity_predict",
            lhs: s.to_vec(),
            rhs: vec![0, 3, 1],
        });
    }
    if horizon == 0 {
        return Err(Error::InvalidArgument(
            "zero_velocity_predict: horizon must be positive".into(),
        ));
    }
    let (j, n) = (s[0], s[2]);
    let mut data = vec![0.0; j * 3 * horizon];
    for jj in 0..j {
        for dim in 0..3 {
            let last = observed.data()[(jj * 3 + dim) * n + (n - 1)];
            for t in 0..horizon {
                data[(jj * 3 + dim) * horizon + t] = last;
            }
        }
    }
    Tensor::new(vec![j, 3, horizon], data)
}

/// Concatenate observed and predicted frames along time.
pub fn concat_time(observed: &Tensor, future: &Tensor) -> Result<Tensor> {
    let (so, sf) = (observed.shape(), future.shape());
    if so.len() != 3 || sf.len() != 3 || so[0] != sf[0] || so[1] != sf[1] {
        return Err(Error::ShapeMismatch {
            op: "concat_time",
            lhs: so.to_vec(),
            rhs: sf.to_vec(),
        });
    }
    let (j, no, nf) = (so[0], so[2], sf[2]);
    let mut data = Vec::with_capacity(j * 3 * (no + nf));
    for jj in 0..j {
        for dim in 0..3 {
            data.extend_from_slice(&observed.data()[(jj * 3 + dim) * no..(jj * 3 + dim + 1) * no]);
            data.extend_from_slice(&future.data()[(jj * 3 + dim) * nf..(jj * 3 + dim + 1) * nf]);
        }
    }
    Tensor::new(vec![j, 3, no + nf], data)
}

/// One plotted line.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Minimal SVG line chart: linear axes with ticks, one polyline per
/// series, legend in the top-right.
pub fn plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    const W: f64 = 720.0;
    const H: f64 = 480.0;
    const ML: f64 = 70.0; // margins
    const MR: f64 = 20.0;
    const MT: f64 = 40.0;
    const MB: f64 = 55.0;
    const COLORS: [&str; 6] = ["#1b6ca8", "#c23b22", "#2e8540", "#8042a8", "#b8860b", "#444444"];

    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().cloned()).collect();
    let (mut x0, mut x1) = all
        .iter()
        .map(|p| p.0)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    let (mut y0, mut y1) = all
        .iter()
        .map(|p| p.1)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    if !x0.is_finite() || x0 == x1 {
        x0 -= 1.0;
        x1 = x0 + 2.0;
    }
    if !y0.is_finite() || y0 == y1 {
        y0 -= 1.0;
        y1 = y0 + 2.0;
    }
    let pad = (y1 - y0) * 0.05;
    y0 -= pad;
    y1 += pad;
    let sx = move |x: f64| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
    let sy = move |y: f64| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n",
        W / 2.0,
        xml_escape(title)
    );
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
         <line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        H - MB,
        W - MR,
        H - MB,
        H - MB
    ));
    // ticks
    for i in 0..=5 {
        let fx = x0 + (x1 - x0) * i as f64 / 5.0;
        let px = sx(fx);
        svg.push_str(&format!(
            "<line x1=\"{px:.1}\" y1=\"{:.1}\" x2=\"{px:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
             <text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            H - MB,
            H - MB + 5.0,
            H - MB + 18.0,
            format_tick(fx)
        ));
        let fy = y0 + (y1 - y0) * i as f64 / 5.0;
        let py = sy(fy);
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{py:.1}\" x2=\"{ML}\" y2=\"{py:.1}\" stroke=\"black\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            ML - 5.0,
            ML - 8.0,
            py + 4.0,
            format_tick(fy)
        ));
    }
    // axis labels
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">{}</text>\n\
         <text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 16 {:.1})\">{}</text>\n",
        (ML + W - MR) / 2.0,
        H - 12.0,
        xml_escape(x_label),
        (MT + H - MB) / 2.0,
        (MT + H - MB) / 2.0,
        xml_escape(y_label)
    ));
    // series
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        for &(x, y) in &s.points {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                sx(x),
                sy(y)
            ));
        }
        let ly = MT + 18.0 * i as f64 + 8.0;
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
            W - MR - 150.0,
            W - MR - 125.0,
            W - MR - 118.0,
            ly + 4.0,
            xml_escape(&s.name)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mpjpe_is_zero_on_identical_poses() {
        let t = Tensor::new(vec![2, 3, 4], (0..24).map(|v| v as Real).collect()).unwrap();
        assert_eq!(mpjpe(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn mpjpe_of_a_3_4_0_offset_is_25() {
        // single joint, single frame: squared norm of (3,4,0)
        let truth = Tensor::new(vec![1, 3, 1], vec![0.0, 0.0, 0.0]).unwrap();
        let pred = Tensor::new(vec![1, 3, 1], vec![3.0, 4.0, 0.0]).unwrap();
        assert_eq!(mpjpe(&pred, &truth).unwrap(), 25.0);
    }

    #[test]
    fn mpjpe_matches_direct_loop_on_random_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<Real> = (0..5 * 3 * 7).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<Real> = (0..5 * 3 * 7).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let pred = Tensor::new(vec![5, 3, 7], a.clone()).unwrap();
        let truth = Tensor::new(vec![5, 3, 7], b.clone()).unwrap();
        let mut want = 0.0;
        for j in 0..5 {
            for t in 0..7 {
                for d in 0..3 {
                    let idx = (j * 3 + d) * 7 + t;
                    want += (a[idx] - b[idx]) * (a[idx] - b[idx]);
                }
            }
        }
        want /= (5 * 7) as Real;
        assert!((mpjpe(&pred, &truth).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn mpjpe_is_invariant_under_joint_reindexing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<Real> = (0..4 * 3 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<Real> = (0..4 * 3 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let perm = [2usize, 0, 3, 1];
        let permute = |v: &[Real]| {
            let mut out = vec![0.0; v.len()];
            for (new_j, &old_j) in perm.iter().enumerate() {
                let src = &v[old_j * 3 * 6..(old_j + 1) * 3 * 6];
                out[new_j * 3 * 6..(new_j + 1) * 3 * 6].copy_from_slice(src);
            }
            out
        };
        let m1 = mpjpe(
            &Tensor::new(vec![4, 3, 6], a.clone()).unwrap(),
            &Tensor::new(vec![4, 3, 6], b.clone()).unwrap(),
        )
        .unwrap();
        let m2 = mpjpe(
            &Tensor::new(vec![4, 3, 6], permute(&a)).unwrap(),
            &Tensor::new(vec![4, 3, 6], permute(&b)).unwrap(),
        )
        .unwrap();
        assert!((m1 - m2).abs() < 1e-12);
    }

    #[test]
    fn mse_reduction_endpoints() {
        assert_eq!(mse_reduction(1.0, 1.0).unwrap(), 0.0);
        assert!((mse_reduction(0.23, 1.0).unwrap() + 77.0).abs() < 1e-12);
        assert_eq!(mse_reduction(2.0, 1.0).unwrap(), 100.0);
        assert!(mse_reduction(1.0, 0.0).is_err());
    }

    #[test]
    fn zero_velocity_predictor_behaviour() {
        // static input: zero error against a static future
        let obs = Tensor::new(vec![1, 3, 4], vec![1.0; 12]).unwrap();
        let pred = zero_velocity_predict(&obs, 3).unwrap();
        let future = Tensor::new(vec![1, 3, 3], vec![1.0; 9]).unwrap();
        assert_eq!(mpjpe(&pred, &future).unwrap(), 0.0);

        // linear motion: error grows with horizon
        let n = 4;
        let mut moving = vec![0.0; 3 * n];
        for t in 0..n {
            moving[t] = t as Real; // x coordinate advances
        }
        let obs = Tensor::new(vec![1, 3, n], moving).unwrap();
        let pred = zero_velocity_predict(&obs, 3).unwrap();
        let mut future = vec![0.0; 3 * 3];
        for t in 0..3 {
            future[t] = (n + t) as Real;
        }
        let future = Tensor::new(vec![1, 3, 3], future).unwrap();
        let e3 = mpjpe(&pred, &future).unwrap();
        let pred1 = zero_velocity_predict(&obs, 1).unwrap();
        let future1 = Tensor::new(vec![1, 3, 1], vec![n as Real, 0.0, 0.0]).unwrap();
        let e1 = mpjpe(&pred1, &future1).unwrap();
        assert!(e3 > e1, "error must grow with horizon: {e3} vs {e1}");
    }

    #[test]
    fn concat_time_stitches_observed_and_future() {
        let obs = Tensor::new(vec![1, 3, 2], vec![1., 2., 10., 20., 100., 200.]).unwrap();
        let fut = Tensor::new(vec![1, 3, 1], vec![3., 30., 300.]).unwrap();
        let full = concat_time(&obs, &fut).unwrap();
        assert_eq!(full.shape(), &[1, 3, 3]);
        assert_eq!(full.data(), &[1., 2., 3., 10., 20., 30., 100., 200., 300.]);
    }

    #[test]
    fn svg_plot_contains_series_and_labels() {
        let svg = plot_svg(
            "anomaly score vs occlusion",
            "occluded cells",
            "mean score",
            &[
                Series {
                    name: "degraded".into(),
                    points: vec![(0.0, -10.0), (13.0, -50.0), (135.0, -200.0)],
                },
                Series {
                    name: "map".into(),
                    points: vec![(0.0, -10.0), (13.0, -30.0), (135.0, -120.0)],
                },
            ],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains("degraded"));
        assert!(svg.contains("anomaly score vs occlusion"));
        assert!(svg.ends_with("</svg>\n"));
    }
}
