use super::identity::EmbeddingFn;
use crate::diff::Tensor;
use crate::error::{contract, Result};

/// PSNR reported for identical images.
pub const PSNR_SENTINEL: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Image-comparison scores for one pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub cosine: f64,
}

fn check(op: &str, x: &Tensor, y: &Tensor, size: usize, region: Option<&[bool]>) -> Result<()> {
    if x.shape() != [size * size, 3] || y.shape() != x.shape() {
        return contract(op, format!("images {:?} and {:?} are not {size}x{size} RGB", x.shape(), y.shape()));
    }
    if region.is_some_and(|r| r.len() != size * size) {
        return contract(op, "region mask size differs from image");
    }
    Ok(())
}

fn region_pixels(region: Option<&[bool]>, p: usize) -> Vec<usize> {
    match region {
        Some(r) if r.iter().any(|&m| m) => (0..p).filter(|&i| r[i]).collect(),
        _ => (0..p).collect(),
    }
}

/// Mean absolute difference over the region's pixels and channels. An empty
/// or absent region means the whole image.
pub fn l1(x: &Tensor, y: &Tensor, region: Option<&[bool]>) -> f64 {
    let px = region_pixels(region, x.rows());
    let s: f64 = px
        .iter()
        .map(|&p| (0..3).map(|c| (x.at2(p, c) - y.at2(p, c)).abs()).sum::<f64>())
        .sum();
    s / (3 * px.len()) as f64
}

pub fn mse(x: &Tensor, y: &Tensor, region: Option<&[bool]>) -> f64 {
    let px = region_pixels(region, x.rows());
    let s: f64 = px
        .iter()
        .map(|&p| (0..3).map(|c| (x.at2(p, c) - y.at2(p, c)).powi(2)).sum::<f64>())
        .sum();
    s / (3 * px.len()) as f64
}

/// `10 log10(1 / MSE)` for peak value 1; [`PSNR_SENTINEL`] when MSE is zero.
pub fn psnr(x: &Tensor, y: &Tensor, region: Option<&[bool]>) -> f64 {
    let m = mse(x, y, region);
    if m == 0.0 {
        PSNR_SENTINEL
    } else {
        10.0 * (1.0 / m).log10()
    }
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5) and
/// `C1 = 0.01^2`, `C2 = 0.03^2`, averaged over channels and over the window
/// positions fully inside the image. When a region is given, only windows
/// centered on region pixels count (all windows if none qualify).
pub fn ssim(x: &Tensor, y: &Tensor, size: usize, region: Option<&[bool]>) -> f64 {
    let g = gaussian_window();
    let half = SSIM_WINDOW / 2;
    if size < SSIM_WINDOW {
        return ssim_global(x, y);
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut sum_all = 0.0;
    let mut count_all = 0usize;
    for ci in half..size - half {
        for cj in half..size - half {
            let mut val = 0.0;
            for c in 0..3 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (a, ga) in g.iter().enumerate() {
                    for (b, gb) in g.iter().enumerate() {
                        let w = ga * gb;
                        let p = (ci + a - half) * size + (cj + b - half);
                        let (u, v) = (x.at2(p, c), y.at2(p, c));
                        mx += w * u;
                        my += w * v;
                        sxx += w * u * u;
                        syy += w * v * v;
                        sxy += w * u * v;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                val += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            }
            val /= 3.0;
            sum_all += val;
            count_all += 1;
            if region.is_none_or(|r| r[ci * size + cj]) {
                sum += val;
                count += 1;
            }
        }
    }
    if count == 0 {
        sum_all / count_all as f64
    } else {
        sum / count as f64
    }
}

/// Single-window SSIM over the whole image, for images smaller than the window.
fn ssim_global(x: &Tensor, y: &Tensor) -> f64 {
    let n = x.rows() as f64;
    let mut val = 0.0;
    for c in 0..3 {
        let mx = (0..x.rows()).map(|p| x.at2(p, c)).sum::<f64>() / n;
        let my = (0..x.rows()).map(|p| y.at2(p, c)).sum::<f64>() / n;
        let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
        for p in 0..x.rows() {
            let (u, v) = (x.at2(p, c) - mx, y.at2(p, c) - my);
            vx += u * u / n;
            vy += v * v / n;
            cov += u * v / n;
        }
        val += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    val / 3.0
}

/// Cosine similarity of the two images' embeddings.
pub fn embedding_cosine(x: &Tensor, y: &Tensor, embed: &dyn EmbeddingFn) -> Result<f64> {
    let a = embed.embed_plain(x)?;
    let b = embed.embed_plain(y)?;
    let dot: f64 = a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum();
    let na = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return contract("embedding_cosine", "zero embedding has no direction");
    }
    Ok(dot / (na * nb))
}

/// All four scores; `region` restricts L1, PSNR and SSIM window centers.
pub fn metrics(x: &Tensor, y: &Tensor, size: usize, region: Option<&[bool]>, embed: &dyn EmbeddingFn) -> Result<Metrics> {
    check("metrics", x, y, size, region)?;
    Ok(Metrics {
        l1: l1(x, y, region),
        psnr: psnr(x, y, region),
        ssim: ssim(x, y, size, region),
        cosine: embedding_cosine(x, y, embed)?,
    })
}
