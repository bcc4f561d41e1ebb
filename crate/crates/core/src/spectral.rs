//! 2D discrete Fourier transform and frequency-progression statistics.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Complex spectrum F(u,v) of an M (width) by N (height) image, stored
/// row-major as `data[v * m + u]`. `centered` marks whether DC has been
/// shifted to (m/2, n/2).
#[derive(Debug, Clone)]
pub struct SpectrumMap {
    pub m: usize,
    pub n: usize,
    pub data: Vec<Complex64>,
    pub centered: bool,
}

impl SpectrumMap {
    pub fn at(&self, u: usize, v: usize) -> Complex64 {
        self.data[v * self.m + u]
    }

    /// Shift DC to the center bin (for display).
    pub fn centered(&self) -> SpectrumMap {
        if self.centered {
            return self.clone();
        }
        let (m, n) = (self.m, self.n);
        let mut data = vec![Complex64::default(); m * n];
        for v in 0..n {
            for u in 0..m {
                let cu = (u + m / 2) % m;
                let cv = (v + n / 2) % n;
                data[cv * m + cu] = self.data[v * m + u];
            }
        }
        SpectrumMap { m, n, data, centered: true }
    }
}

/// DFT of a real image by row-column decomposition with f64 twiddles.
///
/// `img` is [height, width] row-major: img[y][x] = f(x, y), and the result is
/// F(u,v) = sum_x sum_y f(x,y) exp(-2*pi*i*(u*x/M + v*y/N)).
pub fn dft2(img: &Tensor) -> SpectrumMap {
    let (n, m) = match img.shape() {
        [h, w] => (*h, *w),
        s => panic!("dft2 expects a 2-D tensor, got shape {s:?}"),
    };
    let tw_m = twiddles(m);
    let tw_n = twiddles(n);

    // rows: R[y][u] = sum_x f(x,y) w_M^(u x)
    let mut rows = vec![Complex64::default(); m * n];
    for y in 0..n {
        let line = &img.data()[y * m..(y + 1) * m];
        for u in 0..m {
            let mut acc = Complex64::default();
            for (x, &f) in line.iter().enumerate() {
                acc += tw_m[(u * x) % m] * f as f64;
            }
            rows[y * m + u] = acc;
        }
    }
    // columns: F[u][v] = sum_y R[y][u] w_N^(v y)
    let mut data = vec![Complex64::default(); m * n];
    for v in 0..n {
        for u in 0..m {
            let mut acc = Complex64::default();
            for y in 0..n {
                acc += tw_n[(v * y) % n] * rows[y * m + u];
            }
            data[v * m + u] = acc;
        }
    }
    SpectrumMap { m, n, data, centered: false }
}

fn twiddles(len: usize) -> Vec<Complex64> {
    (0..len)
        .map(|k| {
            let ang = -2.0 * std::f64::consts::PI * k as f64 / len as f64;
            Complex64::new(ang.cos(), ang.sin())
        })
        .collect()
}

/// Signed frequency index of bin `u` on an axis of length `len`.
fn signed_freq(u: usize, len: usize, centered: bool) -> i64 {
    if centered {
        u as i64 - (len / 2) as i64
    } else if u <= len / 2 {
        u as i64
    } else {
        u as i64 - len as i64
    }
}

/// Fraction of non-DC spectral energy at centered radius > cutoff * (min(M,N)/2).
pub fn hf_ratio(spec: &SpectrumMap, cutoff: f32) -> Result<f32> {
    let max_radius = (spec.m.min(spec.n) / 2) as f64;
    let threshold = cutoff as f64 * max_radius;
    let mut total = 0.0f64;
    let mut high = 0.0f64;
    let mut all = 0.0f64;
    for v in 0..spec.n {
        for u in 0..spec.m {
            let e = spec.at(u, v).norm_sqr();
            all += e;
            let fu = signed_freq(u, spec.m, spec.centered);
            let fv = signed_freq(v, spec.n, spec.centered);
            if fu == 0 && fv == 0 {
                continue; // DC excluded by definition
            }
            total += e;
            let r = ((fu * fu + fv * fv) as f64).sqrt();
            if r > threshold {
                high += e;
            }
        }
    }
    if all == 0.0 || total <= all * 1e-12 {
        return Err(Error::ZeroEnergy);
    }
    Ok((high / total) as f32)
}

/// Ordered (timestep, clamped predicted-x0) pairs captured while sampling,
/// earliest generation (largest t) first.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryRecord {
    pub entries: Vec<(usize, Tensor)>,
}

impl TrajectoryRecord {
    pub fn push(&mut self, t: usize, predicted_x0: Tensor) {
        if let Some(&(prev, _)) = self.entries.last() {
            assert!(t < prev, "trajectory timesteps must be strictly decreasing");
        }
        self.entries.push((t, predicted_x0));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// hf_ratio of each recorded predicted-x0 in generation order. Zero-energy
/// entries are dropped; the returned indices keep their original positions.
pub fn trajectory_hf_curve(rec: &TrajectoryRecord, cutoff: f32) -> Vec<(usize, f32)> {
    rec.entries
        .iter()
        .enumerate()
        .filter_map(|(i, (_t, img))| match hf_ratio(&dft2(img), cutoff) {
            Ok(r) => Some((i, r)),
            Err(_) => None,
        })
        .collect()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch { expected: vec![xs.len()], got: vec![ys.len()] });
    }
    if xs.len() < 2 {
        return Err(Error::invalid("spearman needs at least 2 points"));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    pearson(&rx, &ry)
}

fn average_ranks(vals: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).expect("non-NaN values"));
    let mut ranks = vec![0.0; vals.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && vals[idx[j + 1]] == vals[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::invalid("degenerate variance in correlation"));
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

/// Centered log-magnitude spectrum as a [-1,1] image (for PGM dumps).
pub fn log_magnitude_image(spec: &SpectrumMap) -> Tensor {
    let c = spec.centered();
    let mags: Vec<f64> = c.data.iter().map(|z| (1.0 + z.norm()).ln()).collect();
    let max = mags.iter().cloned().fold(0.0f64, f64::max);
    let data = mags
        .iter()
        .map(|&v| if max > 0.0 { (2.0 * v / max - 1.0) as f32 } else { -1.0 })
        .collect();
    Tensor::new(vec![c.n, c.m], data).expect("log magnitudes are finite")
}
