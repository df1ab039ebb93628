//! Direct double-loop SSIM: 2-D Gaussian weights, two-pass moments.

#![allow(dead_code)]

use ehoi::augval::{GrayF64, Mask, SsimParams};
use ehoi::Error;

pub fn naive_ssim(a: &GrayF64, b: &GrayF64, p: &SsimParams, mask: Option<&Mask>) -> Result<f64, Error> {
    let n = p.window_size;
    let r = (n / 2) as f64;
    let mut weights = vec![vec![0.0; n]; n];
    let mut total = 0.0;
    for (i, row) in weights.iter_mut().enumerate() {
        for (j, w) in row.iter_mut().enumerate() {
            let d2 = (i as f64 - r).powi(2) + (j as f64 - r).powi(2);
            *w = (-d2 / (2.0 * p.sigma * p.sigma)).exp();
            total += *w;
        }
    }
    let c1 = (p.k1 * p.dynamic_range).powi(2);
    let c2 = (p.k2 * p.dynamic_range).powi(2);
    let at = |img: &GrayF64, x: usize, y: usize| img.data[y * img.width + x];
    let mut sum = 0.0;
    let mut count = 0;
    for y0 in 0..=(a.height - n) {
        'win: for x0 in 0..=(a.width - n) {
            if let Some(m) = mask {
                for y in y0..y0 + n {
                    for x in x0..x0 + n {
                        if m.data[y * m.width + x] {
                            continue 'win;
                        }
                    }
                }
            }
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let w = weights[i][j] / total;
                    ma += w * at(a, x0 + j, y0 + i);
                    mb += w * at(b, x0 + j, y0 + i);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let w = weights[i][j] / total;
                    let da = at(a, x0 + j, y0 + i) - ma;
                    let db = at(b, x0 + j, y0 + i) - mb;
                    va += w * da * da;
                    vb += w * db * db;
                    cov += w * da * db;
                }
            }
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::AllWindowsMasked);
    }
    Ok(sum / count as f64)
}
