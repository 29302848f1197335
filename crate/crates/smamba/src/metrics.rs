//! Binary segmentation metrics: threshold-swept Dice/IoU, MAE, structure
//! measure, weighted F-measure, and max enhanced-alignment measure, plus
//! dataset-level aggregation and TSV reporting.
//!
//! Conventions (fixed here, verified against straight-line oracles in the
//! tests):
//! - mDice/mIoU sweep 256 thresholds t/255, t = 0..=255, binarizing
//!   `pred >= t/255`; empty/empty ratios count as 1.
//! - S-measure: alpha = 0.5; object term `2x/(x^2 + 1 + sigma)` with
//!   population deviation; region term splits at the rounded foreground
//!   centroid and uses the SSIM-style quotient with exact zero handling.
//! - Weighted F-measure: beta^2 = 1, 7x7 Gaussian smoothing with
//!   sigma = 5, importance decay 2 - exp(ln(0.5)/5 * d) at background
//!   pixels, nearest-foreground error substitution averaged over the
//!   exact distance-tie set (squared distances are integers), which keeps
//!   the measure flip-symmetric. Undefined (0) on empty masks, with a
//!   flag.
//! - E-measure: demeaned alignment without epsilon (the denominator is
//!   strictly positive whenever the mask is non-constant), degenerate
//!   masks use 1 - mean(P) / mean(P).

use crate::data::SamplePair;
use crate::error::{Error, Result};
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdMode {
    /// Mean over the 256-threshold sweep.
    Sweep256,
    /// Single fixed binarization threshold.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy)]
pub struct PerImage {
    pub mdice: f64,
    pub miou: f64,
    pub f_beta_w: f64,
    pub s_alpha: f64,
    pub e_phi_max: f64,
    pub mae: f64,
    /// Weighted F-measure was undefined (empty ground truth).
    pub fbw_undefined: bool,
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub dataset_id: String,
    pub mdice: f64,
    pub miou: f64,
    pub f_beta_w: f64,
    pub s_alpha: f64,
    pub e_phi_max: f64,
    pub mae: f64,
    pub per_image: Vec<(String, PerImage)>,
}

fn validate(pred: &[f64], gt: &[u8]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::shape("metrics", format!("pred {} vs gt {}", pred.len(), gt.len())));
    }
    if pred.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::invalid("metrics", "prediction values must lie in [0, 1]"));
    }
    if gt.iter().any(|&v| v > 1) {
        return Err(Error::invalid("metrics", "ground truth must be binary"));
    }
    Ok(())
}

fn dice_iou_at(pred: &[f64], gt: &[u8], thr: f64) -> (f64, f64) {
    let mut inter = 0usize;
    let mut psum = 0usize;
    let mut gsum = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        let b = (p >= thr) as usize;
        psum += b;
        gsum += g as usize;
        inter += b & g as usize;
    }
    let dice = if psum + gsum == 0 { 1.0 } else { 2.0 * inter as f64 / (psum + gsum) as f64 };
    let union = psum + gsum - inter;
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    (dice, iou)
}

/// Threshold-averaged Dice and IoU.
pub fn mdice_miou(pred: &[f64], gt: &[u8], mode: ThresholdMode) -> Result<(f64, f64)> {
    validate(pred, gt)?;
    match mode {
        ThresholdMode::Fixed(t) => Ok(dice_iou_at(pred, gt, t)),
        ThresholdMode::Sweep256 => {
            let mut dice_acc = 0.0;
            let mut iou_acc = 0.0;
            for t in 0..256 {
                let (d, i) = dice_iou_at(pred, gt, t as f64 / 255.0);
                dice_acc += d;
                iou_acc += i;
            }
            Ok((dice_acc / 256.0, iou_acc / 256.0))
        }
    }
}

/// Mean absolute error.
pub fn mae(pred: &[f64], gt: &[u8]) -> Result<f64> {
    validate(pred, gt)?;
    let s: f64 = pred.iter().zip(gt).map(|(&p, &g)| (p - g as f64).abs()).sum();
    Ok(s / pred.len() as f64)
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        xs.sum::<f64>() / n as f64
    }
}

/// Object-similarity score `2x/(x^2 + 1 + sigma)` over a masked region.
fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    2.0 * m / (m * m + 1.0 + var.sqrt())
}

fn ssim_region(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 1.0;
    }
    let nf = n as f64;
    let mx = pred.iter().sum::<f64>() / nf;
    let my = gt.iter().sum::<f64>() / nf;
    // Sample statistics (n-1); n = 1 degenerates to zero spread.
    let denom_n = if n > 1 { nf - 1.0 } else { 1.0 };
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cxy = 0.0;
    for (&a, &b) in pred.iter().zip(gt) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cxy += (a - mx) * (b - my);
    }
    vx /= denom_n;
    vy /= denom_n;
    cxy /= denom_n;
    let alpha = 4.0 * mx * my * cxy;
    let beta = (mx * mx + my * my) * (vx + vy);
    if beta > 0.0 {
        alpha / beta
    } else {
        // beta == 0 forces alpha == 0: both maps are spread-free and a
        // zero product of means; identical constants score 1.
        1.0
    }
}

/// Structure measure, alpha = 0.5.
pub fn s_measure(pred: &[f64], gt: &[u8], h: usize, w: usize) -> Result<f64> {
    validate(pred, gt)?;
    if pred.len() != h * w {
        return Err(Error::shape("s_measure", format!("{} values for {}x{}", pred.len(), h, w)));
    }
    let fg: usize = gt.iter().map(|&v| v as usize).sum();
    let mu = fg as f64 / gt.len() as f64;
    let pred_mean = mean(pred.iter().copied(), pred.len());
    if fg == 0 {
        return Ok(1.0 - pred_mean);
    }
    if fg == gt.len() {
        return Ok(pred_mean);
    }

    // Object term.
    let fg_vals: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| g == 1).map(|(&p, _)| p).collect();
    let bg_vals: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| g == 0).map(|(&p, _)| 1.0 - p).collect();
    let s_object = mu * object_score(&fg_vals) + (1.0 - mu) * object_score(&bg_vals);

    // Region term: quadrants split at the exact foreground centroid,
    // decided in integer arithmetic (n*coord vs coordinate sum) so the
    // partition commutes with mirroring; a row/column landing exactly on
    // the centroid joins both sides.
    let mut sum_y = 0usize;
    let mut sum_x = 0usize;
    for y in 0..h {
        for x in 0..w {
            if gt[y * w + x] == 1 {
                sum_y += y;
                sum_x += x;
            }
        }
    }
    let mut quads: [(Vec<f64>, Vec<f64>); 4] = Default::default();
    for y in 0..h {
        let top = fg * y <= sum_y;
        let bottom = fg * y >= sum_y;
        for x in 0..w {
            let left = fg * x <= sum_x;
            let right = fg * x >= sum_x;
            for (qi, ok) in [
                (0, top && left),
                (1, top && right),
                (2, bottom && left),
                (3, bottom && right),
            ] {
                if ok {
                    quads[qi].0.push(pred[y * w + x]);
                    quads[qi].1.push(gt[y * w + x] as f64);
                }
            }
        }
    }
    let total: usize = quads.iter().map(|(p, _)| p.len()).sum();
    let mut s_region = 0.0;
    for (pq, gq) in &quads {
        if !pq.is_empty() {
            s_region += (pq.len() as f64 / total as f64) * ssim_region(pq, gq);
        }
    }

    Ok((0.5 * s_object + 0.5 * s_region).clamp(0.0, 1.0))
}

/// Nearest-foreground distance and the mean error over the exact tie set
/// of nearest foreground pixels (squared pixel distances are integers, so
/// ties are exact and the substitution stays flip-symmetric). Brute force
/// over foreground pixels; quadratic in the worst case, fine at desk
/// scale.
fn nearest_foreground(gt: &[u8], e: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let fg: Vec<(usize, usize)> = (0..h * w).filter(|&i| gt[i] == 1).map(|i| (i / w, i % w)).collect();
    let mut dist = vec![0.0f64; h * w];
    let mut subst = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if gt[i] == 1 {
                subst[i] = e[i];
                continue;
            }
            let mut best = usize::MAX;
            let mut sum = 0.0;
            let mut count = 0usize;
            for &(fy, fx) in &fg {
                let dy = fy.abs_diff(y);
                let dx = fx.abs_diff(x);
                let d2 = dy * dy + dx * dx;
                match d2.cmp(&best) {
                    std::cmp::Ordering::Less => {
                        best = d2;
                        sum = e[fy * w + fx];
                        count = 1;
                    }
                    std::cmp::Ordering::Equal => {
                        sum += e[fy * w + fx];
                        count += 1;
                    }
                    std::cmp::Ordering::Greater => {}
                }
            }
            dist[i] = (best as f64).sqrt();
            subst[i] = sum / count as f64;
        }
    }
    (dist, subst)
}

fn gauss7_filter(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    // 7x7 Gaussian, sigma = 5, normalized; zero padding.
    let mut kernel = [[0.0f64; 7]; 7];
    let mut norm = 0.0;
    for (dy, row) in kernel.iter_mut().enumerate() {
        for (dx, cell) in row.iter_mut().enumerate() {
            let (fy, fx) = (dy as f64 - 3.0, dx as f64 - 3.0);
            *cell = (-(fy * fy + fx * fx) / (2.0 * 25.0)).exp();
            norm += *cell;
        }
    }
    for row in kernel.iter_mut() {
        for cell in row.iter_mut() {
            *cell /= norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for dy in -3..=3isize {
                for dx in -3..=3isize {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                        acc += kernel[(dy + 3) as usize][(dx + 3) as usize]
                            * src[(yy * w as isize + xx) as usize];
                    }
                }
            }
            out[(y * w as isize + x) as usize] = acc;
        }
    }
    out
}

/// Weighted F-measure; `(value, undefined)` where undefined marks an
/// empty ground truth (value fixed at 0).
pub fn weighted_fmeasure(pred: &[f64], gt: &[u8], h: usize, w: usize) -> Result<(f64, bool)> {
    validate(pred, gt)?;
    let fg: usize = gt.iter().map(|&v| v as usize).sum();
    if fg == 0 {
        return Ok((0.0, true));
    }
    let e: Vec<f64> = pred.iter().zip(gt).map(|(&p, &g)| (p - g as f64).abs()).collect();
    // Dependency correction: background pixels inherit the (tie-averaged)
    // error of their nearest foreground pixels before smoothing.
    let (dist, et) = nearest_foreground(gt, &e, h, w);
    let ea = gauss7_filter(&et, h, w);
    // Foreground pixels may take the smoothed error when it is smaller.
    let mut min_e_ea = e.clone();
    for i in 0..h * w {
        if gt[i] == 1 && ea[i] < e[i] {
            min_e_ea[i] = ea[i];
        }
    }
    // Importance decays away from the foreground.
    let ln_half_over5 = 0.5f64.ln() / 5.0;
    let mut tp_err = 0.0;
    let mut fp_w = 0.0;
    for i in 0..h * w {
        if gt[i] == 1 {
            tp_err += min_e_ea[i];
        } else {
            let b = 2.0 - (ln_half_over5 * dist[i]).exp();
            fp_w += min_e_ea[i] * b;
        }
    }
    let tp_w = fg as f64 - tp_err;
    let recall = 1.0 - tp_err / fg as f64;
    let precision = if tp_w + fp_w > 0.0 { tp_w / (tp_w + fp_w) } else { 0.0 };
    let q = if recall + precision > 0.0 {
        2.0 * recall * precision / (recall + precision)
    } else {
        0.0
    };
    Ok((q.clamp(0.0, 1.0), false))
}

/// Max enhanced-alignment measure over the 256-threshold sweep.
pub fn e_measure_max(pred: &[f64], gt: &[u8]) -> Result<f64> {
    validate(pred, gt)?;
    let n = gt.len() as f64;
    let fg: usize = gt.iter().map(|&v| v as usize).sum();
    let gt_mean = fg as f64 / n;
    let mut best = 0.0f64;
    for t in 0..256 {
        let thr = t as f64 / 255.0;
        let score = if fg == 0 {
            let pm = mean(pred.iter().map(|&p| (p >= thr) as usize as f64), gt.len());
            1.0 - pm
        } else if fg == gt.len() {
            mean(pred.iter().map(|&p| (p >= thr) as usize as f64), gt.len())
        } else {
            let pm = mean(pred.iter().map(|&p| (p >= thr) as usize as f64), gt.len());
            let mut acc = 0.0;
            for (&p, &g) in pred.iter().zip(gt) {
                let pc = (p >= thr) as usize as f64 - pm;
                let gc = g as f64 - gt_mean;
                // gc is never zero for a non-constant mask, so the
                // quotient needs no epsilon.
                let align = 2.0 * pc * gc / (pc * pc + gc * gc);
                let enhanced = (align + 1.0) * (align + 1.0) / 4.0;
                acc += enhanced;
            }
            acc / n
        };
        best = best.max(score);
    }
    Ok(best)
}

/// All six metrics for one prediction.
pub fn per_image(pred: &[f64], gt: &[u8], h: usize, w: usize, mode: ThresholdMode) -> Result<PerImage> {
    let (mdice, miou) = mdice_miou(pred, gt, mode)?;
    let (f_beta_w, fbw_undefined) = weighted_fmeasure(pred, gt, h, w)?;
    Ok(PerImage {
        mdice,
        miou,
        f_beta_w,
        s_alpha: s_measure(pred, gt, h, w)?,
        e_phi_max: e_measure_max(pred, gt)?,
        mae: mae(pred, gt)?,
        fbw_undefined,
    })
}

/// Evaluate a dataset with a per-sample prediction function. Samples are
/// processed in id order (the caller provides them sorted); `threads`
/// caps the worker count, and the reduction order is fixed regardless of
/// parallelism.
pub fn evaluate_dataset<F>(
    dataset_id: &str,
    pairs: &[SamplePair],
    predict: F,
    mode: ThresholdMode,
    threads: usize,
) -> Result<MetricsReport>
where
    F: Fn(&SamplePair) -> Result<Vec<f64>> + Sync,
{
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(dataset_id.to_string()));
    }
    let threads = threads.max(1).min(pairs.len());
    let mut slots: Vec<Option<Result<PerImage>>> = (0..pairs.len()).map(|_| None).collect();
    if threads == 1 {
        for (i, p) in pairs.iter().enumerate() {
            let pred = predict(p)?;
            slots[i] = Some(per_image(&pred, &p.mask.data, p.mask.h, p.mask.w, mode));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slot_refs: Vec<std::sync::Mutex<&mut Option<Result<PerImage>>>> =
            slots.iter_mut().map(std::sync::Mutex::new).collect();
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= pairs.len() {
                        break;
                    }
                    let p = &pairs[i];
                    let r = predict(p)
                        .and_then(|pred| per_image(&pred, &p.mask.data, p.mask.h, p.mask.w, mode));
                    **slot_refs[i].lock().unwrap() = Some(r);
                });
            }
        });
    }

    let mut per = Vec::with_capacity(pairs.len());
    for (p, slot) in pairs.iter().zip(slots) {
        per.push((p.id.clone(), slot.expect("all slots filled")?));
    }
    let n = per.len() as f64;
    let agg = |f: fn(&PerImage) -> f64| per.iter().map(|(_, m)| f(m)).sum::<f64>() / n;
    Ok(MetricsReport {
        dataset_id: dataset_id.to_string(),
        mdice: agg(|m| m.mdice),
        miou: agg(|m| m.miou),
        f_beta_w: agg(|m| m.f_beta_w),
        s_alpha: agg(|m| m.s_alpha),
        e_phi_max: agg(|m| m.e_phi_max),
        mae: agg(|m| m.mae),
        per_image: per,
    })
}

impl MetricsReport {
    /// Tab-separated report; all metrics display x100, columns in the
    /// order mDice, mIoU, Fbw, Salpha, Ephimax, MAE.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# dataset: {}", self.dataset_id);
        let _ = writeln!(s, "# images: {}", self.per_image.len());
        let _ = writeln!(s, "# display: x100");
        let _ = writeln!(s, "mDice\tmIoU\tFbw\tSalpha\tEphimax\tMAE");
        let _ = writeln!(
            s,
            "{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}",
            self.mdice * 100.0,
            self.miou * 100.0,
            self.f_beta_w * 100.0,
            self.s_alpha * 100.0,
            self.e_phi_max * 100.0,
            self.mae * 100.0
        );
        let undefined = self.per_image.iter().filter(|(_, m)| m.fbw_undefined).count();
        if undefined > 0 {
            let _ = writeln!(s, "# warning: Fbw undefined (empty mask) for {undefined} image(s)");
        }
        let _ = writeln!(s, "# per-image");
        let _ = writeln!(s, "id\tmDice\tmIoU\tFbw\tSalpha\tEphimax\tMAE");
        for (id, m) in &self.per_image {
            let _ = writeln!(
                s,
                "{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}",
                id,
                m.mdice * 100.0,
                m.miou * 100.0,
                m.f_beta_w * 100.0,
                m.s_alpha * 100.0,
                m.e_phi_max * 100.0,
                m.mae * 100.0
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Image, Mask, Split};
    use crate::rng::CounterRng;

    fn rand_case(seed: u64, h: usize, w: usize, fg_p: f64) -> (Vec<f64>, Vec<u8>) {
        let mut rng = CounterRng::new(seed);
        let gt: Vec<u8> = (0..h * w).map(|_| (rng.uniform() < fg_p) as u8).collect();
        let pred: Vec<f64> = (0..h * w).map(|_| rng.uniform()).collect();
        (pred, gt)
    }

    /// 8x8 half-plane ground truth with a soft sigmoid prediction ramp:
    /// the shared fixture for the golden metric values.
    fn golden_fixture() -> (Vec<f64>, Vec<u8>) {
        let (h, w) = (8, 8);
        let gt: Vec<u8> = (0..h * w).map(|i| ((i / w) < 4) as u8).collect();
        let mut pred = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let ramp = 1.0 / (1.0 + ((y as f64 - 3.5) * 1.2).exp());
                let wiggle = 0.18 * ((x as f64 * 0.9) + (y as f64 * 0.4)).sin();
                pred[y * w + x] = (ramp + wiggle).clamp(0.0, 1.0);
            }
        }
        (pred, gt)
    }

    // ── independent straight-line oracles ────────────────────────────

    fn oracle_sweep(pred: &[f64], gt: &[u8]) -> (f64, f64) {
        let mut ds = 0.0;
        let mut is = 0.0;
        for t in 0..256u32 {
            let thr = t as f64 / 255.0;
            let bin: Vec<u8> = pred.iter().map(|&p| (p >= thr) as u8).collect();
            let inter = bin.iter().zip(gt).filter(|(&b, &g)| b == 1 && g == 1).count();
            let ps = bin.iter().filter(|&&b| b == 1).count();
            let gs = gt.iter().filter(|&&g| g == 1).count();
            ds += if ps + gs == 0 { 1.0 } else { 2.0 * inter as f64 / (ps + gs) as f64 };
            let uni = ps + gs - inter;
            is += if uni == 0 { 1.0 } else { inter as f64 / uni as f64 };
        }
        (ds / 256.0, is / 256.0)
    }

    fn oracle_smeasure(pred: &[f64], gt: &[u8], h: usize, w: usize) -> f64 {
        let n = (h * w) as f64;
        let fg = gt.iter().filter(|&&g| g == 1).count();
        let mu = fg as f64 / n;
        if fg == 0 {
            return 1.0 - pred.iter().sum::<f64>() / n;
        }
        if fg == h * w {
            return pred.iter().sum::<f64>() / n;
        }
        let obj = |vals: Vec<f64>| -> f64 {
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
            2.0 * m / (m * m + 1.0 + var.sqrt())
        };
        let o_fg = obj(pred.iter().zip(gt).filter(|(_, &g)| g == 1).map(|(&p, _)| p).collect());
        let o_bg = obj(pred.iter().zip(gt).filter(|(_, &g)| g == 0).map(|(&p, _)| 1.0 - p).collect());
        let s_object = mu * o_fg + (1.0 - mu) * o_bg;

        let mut sum_y = 0usize;
        let mut sum_x = 0usize;
        for y in 0..h {
            for x in 0..w {
                if gt[y * w + x] == 1 {
                    sum_y += y;
                    sum_x += x;
                }
            }
        }
        let ssim = |ps: &[f64], gs: &[f64]| -> f64 {
            let nn = ps.len() as f64;
            let mx = ps.iter().sum::<f64>() / nn;
            let my = gs.iter().sum::<f64>() / nn;
            let dn = if ps.len() > 1 { nn - 1.0 } else { 1.0 };
            let vx = ps.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / dn;
            let vy = gs.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / dn;
            let cv = ps.iter().zip(gs).map(|(&a, &b)| (a - mx) * (b - my)).sum::<f64>() / dn;
            let alpha = 4.0 * mx * my * cv;
            let beta = (mx * mx + my * my) * (vx + vy);
            if beta > 0.0 { alpha / beta } else { 1.0 }
        };
        let mut collected: Vec<(Vec<f64>, Vec<f64>)> = vec![(vec![], vec![]); 4];
        for y in 0..h {
            for x in 0..w {
                let sides = [
                    fg * y <= sum_y && fg * x <= sum_x,
                    fg * y <= sum_y && fg * x >= sum_x,
                    fg * y >= sum_y && fg * x <= sum_x,
                    fg * y >= sum_y && fg * x >= sum_x,
                ];
                for (q, &ok) in sides.iter().enumerate() {
                    if ok {
                        collected[q].0.push(pred[y * w + x]);
                        collected[q].1.push(gt[y * w + x] as f64);
                    }
                }
            }
        }
        let total: usize = collected.iter().map(|(p, _)| p.len()).sum();
        let mut s_region = 0.0;
        for (ps, gs) in &collected {
            if !ps.is_empty() {
                s_region += ps.len() as f64 / total as f64 * ssim(ps, gs);
            }
        }
        (0.5 * s_object + 0.5 * s_region).clamp(0.0, 1.0)
    }

    fn oracle_fbw(pred: &[f64], gt: &[u8], h: usize, w: usize) -> f64 {
        let fg: Vec<usize> = (0..h * w).filter(|&i| gt[i] == 1).collect();
        if fg.is_empty() {
            return 0.0;
        }
        let e: Vec<f64> = pred.iter().zip(gt).map(|(&p, &g)| (p - g as f64).abs()).collect();
        // Brute-force all-pairs nearest foreground, errors averaged over
        // exact-distance ties.
        let mut et = e.clone();
        let mut dist = vec![0.0f64; h * w];
        for i in 0..h * w {
            if gt[i] == 1 {
                continue;
            }
            let (y, x) = (i / w, i % w);
            let mut best = usize::MAX;
            let mut ties: Vec<usize> = Vec::new();
            for &j in &fg {
                let (fy, fx) = (j / w, j % w);
                let d2 = fy.abs_diff(y).pow(2) + fx.abs_diff(x).pow(2);
                if d2 < best {
                    best = d2;
                    ties.clear();
                    ties.push(j);
                } else if d2 == best {
                    ties.push(j);
                }
            }
            dist[i] = (best as f64).sqrt();
            et[i] = ties.iter().map(|&j| e[j]).sum::<f64>() / ties.len() as f64;
        }
        // 7x7 Gaussian sigma 5, zero padded.
        let mut ea = vec![0.0f64; h * w];
        let mut norm = 0.0;
        for dy in -3..=3i32 {
            for dx in -3..=3i32 {
                norm += (-((dy * dy + dx * dx) as f64) / 50.0).exp();
            }
        }
        for y in 0..h as i32 {
            for x in 0..w as i32 {
                let mut acc = 0.0;
                for dy in -3..=3i32 {
                    for dx in -3..=3i32 {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy >= 0 && yy < h as i32 && xx >= 0 && xx < w as i32 {
                            let k = (-((dy * dy + dx * dx) as f64) / 50.0).exp() / norm;
                            acc += k * et[(yy * w as i32 + xx) as usize];
                        }
                    }
                }
                ea[(y * w as i32 + x) as usize] = acc;
            }
        }
        let mut tp_err = 0.0;
        let mut fp = 0.0;
        for i in 0..h * w {
            if gt[i] == 1 {
                tp_err += if ea[i] < e[i] { ea[i] } else { e[i] };
            } else {
                fp += e[i] * (2.0 - ((0.5f64).ln() / 5.0 * dist[i]).exp());
            }
        }
        let r = 1.0 - tp_err / fg.len() as f64;
        let tpw = fg.len() as f64 - tp_err;
        let p = if tpw + fp > 0.0 { tpw / (tpw + fp) } else { 0.0 };
        if r + p > 0.0 {
            (2.0 * r * p / (r + p)).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }

    fn oracle_emax(pred: &[f64], gt: &[u8]) -> f64 {
        let n = gt.len() as f64;
        let fg = gt.iter().filter(|&&g| g == 1).count();
        let mut best = 0.0f64;
        for t in 0..256u32 {
            let thr = t as f64 / 255.0;
            let bin: Vec<f64> = pred.iter().map(|&p| (p >= thr) as u8 as f64).collect();
            let pm = bin.iter().sum::<f64>() / n;
            let v = if fg == 0 {
                1.0 - pm
            } else if fg == gt.len() {
                pm
            } else {
                let gm = fg as f64 / n;
                let mut acc = 0.0;
                for (b, &g) in bin.iter().zip(gt) {
                    let pc = b - pm;
                    let gc = g as f64 - gm;
                    let al = 2.0 * pc * gc / (pc * pc + gc * gc);
                    acc += (al + 1.0) * (al + 1.0) / 4.0;
                }
                acc / n
            };
            best = best.max(v);
        }
        best
    }

    // ── tests ─────────────────────────────────────────────────────────

    #[test]
    fn sweep_matches_counting_oracle_on_many_cases() {
        for seed in 0..100u64 {
            let (pred, gt) = rand_case(seed, 8, 8, 0.3 + (seed % 5) as f64 * 0.1);
            let (d, i) = mdice_miou(&pred, &gt, ThresholdMode::Sweep256).unwrap();
            let (od, oi) = oracle_sweep(&pred, &gt);
            assert_eq!(d, od, "seed {seed}");
            assert_eq!(i, oi, "seed {seed}");
        }
    }

    #[test]
    fn pinned_hard_prediction_sweep() {
        // pred = G exactly (hard 0/1), 8 foreground pixels in a 4x4 grid:
        // every threshold above 0 scores 1; at t=0 everything binarizes
        // to foreground and Dice = 2*8/(16+8) = 0.6667.
        let gt: Vec<u8> = (0..16).map(|i| (i < 8) as u8).collect();
        let pred: Vec<f64> = gt.iter().map(|&g| g as f64).collect();
        let (d0, _) = mdice_miou(&pred, &gt, ThresholdMode::Fixed(0.0)).unwrap();
        assert!((d0 - 2.0 * 8.0 / 24.0).abs() < 1e-12);
        let (d, i) = mdice_miou(&pred, &gt, ThresholdMode::Sweep256).unwrap();
        assert!((d - (d0 + 255.0) / 256.0).abs() < 1e-12);
        let iou0 = 8.0 / 16.0;
        assert!((i - (iou0 + 255.0) / 256.0).abs() < 1e-12);
    }

    #[test]
    fn zero_prediction_scores_zero_above_zero_threshold() {
        let gt: Vec<u8> = (0..16).map(|i| (i % 2) as u8).collect();
        let pred = vec![0.0f64; 16];
        for t in [0.1, 0.5, 0.9] {
            let (d, i) = mdice_miou(&pred, &gt, ThresholdMode::Fixed(t)).unwrap();
            assert_eq!(d, 0.0);
            assert_eq!(i, 0.0);
        }
    }

    #[test]
    fn iou_dice_identity_at_every_threshold() {
        let (pred, gt) = rand_case(42, 6, 6, 0.4);
        for t in 0..256 {
            let (d, i) = mdice_miou(&pred, &gt, ThresholdMode::Fixed(t as f64 / 255.0)).unwrap();
            assert!((i - d / (2.0 - d)).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn out_of_range_prediction_rejected() {
        assert!(mdice_miou(&[1.2], &[1], ThresholdMode::Sweep256).is_err());
        assert!(mdice_miou(&[-0.1], &[0], ThresholdMode::Sweep256).is_err());
        assert!(mae(&[0.5, 0.5], &[0]).is_err());
    }

    #[test]
    fn mae_basics_and_oracle() {
        let gt: Vec<u8> = (0..9).map(|i| (i % 3 == 0) as u8).collect();
        let exact: Vec<f64> = gt.iter().map(|&g| g as f64).collect();
        assert_eq!(mae(&exact, &gt).unwrap(), 0.0);
        let half = vec![0.5f64; 9];
        assert!((mae(&half, &gt).unwrap() - 0.5).abs() < 1e-15);
        let (pred, gt) = rand_case(7, 5, 5, 0.5);
        let expect: f64 = pred.iter().zip(&gt).map(|(&p, &g)| (p - g as f64).abs()).sum::<f64>() / 25.0;
        assert!((mae(&pred, &gt).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn s_measure_degenerates_and_self_similarity() {
        let gt: Vec<u8> = (0..16).map(|i| (i / 4 < 2) as u8).collect();
        let exact: Vec<f64> = gt.iter().map(|&g| g as f64).collect();
        assert_eq!(s_measure(&exact, &gt, 4, 4).unwrap(), 1.0);

        let empty = vec![0u8; 16];
        assert_eq!(s_measure(&vec![0.0; 16], &empty, 4, 4).unwrap(), 1.0);
        assert_eq!(s_measure(&vec![1.0; 16], &empty, 4, 4).unwrap(), 0.0);

        let full = vec![1u8; 16];
        assert_eq!(s_measure(&vec![1.0; 16], &full, 4, 4).unwrap(), 1.0);
        assert_eq!(s_measure(&vec![0.0; 16], &full, 4, 4).unwrap(), 0.0);
    }

    #[test]
    fn fbw_degenerates() {
        // Interior blob: away from the image border the trivial limits
        // hold exactly.
        let (h, w) = (10, 10);
        let mut gt = vec![0u8; h * w];
        for y in 4..6 {
            for x in 4..6 {
                gt[y * w + x] = 1;
            }
        }
        let exact: Vec<f64> = gt.iter().map(|&g| g as f64).collect();
        let (q, undef) = weighted_fmeasure(&exact, &gt, h, w).unwrap();
        assert!(!undef);
        assert!((q - 1.0).abs() < 1e-12);

        let (q0, _) = weighted_fmeasure(&vec![0.0; h * w], &gt, h, w).unwrap();
        assert_eq!(q0, 0.0);

        let (qe, undef) = weighted_fmeasure(&vec![0.3; h * w], &vec![0u8; h * w], h, w).unwrap();
        assert!(undef);
        assert_eq!(qe, 0.0);
    }

    #[test]
    fn emax_degenerates_and_monotonicity() {
        let gt: Vec<u8> = (0..16).map(|i| (i % 2) as u8).collect();
        let exact: Vec<f64> = gt.iter().map(|&g| g as f64).collect();
        assert_eq!(e_measure_max(&exact, &gt).unwrap(), 1.0);

        let (pred, gt) = rand_case(9, 6, 6, 0.4);
        let emax = e_measure_max(&pred, &gt).unwrap();
        // Max dominates any single-threshold value (sample a few).
        for t in [0usize, 64, 128, 200, 255] {
            let thr = t as f64 / 255.0;
            let bin: Vec<f64> = pred.iter().map(|&p| (p >= thr) as u8 as f64).collect();
            let single = oracle_emax(&bin, &gt);
            // oracle on a binary map includes its own sweep, so compare
            // against the direct single-threshold score instead:
            let n = gt.len() as f64;
            let fgc = gt.iter().filter(|&&g| g == 1).count() as f64;
            let pm = bin.iter().sum::<f64>() / n;
            let gm = fgc / n;
            let mut acc = 0.0;
            for (b, &g) in bin.iter().zip(&gt) {
                let pc = b - pm;
                let gc = g as f64 - gm;
                acc += (2.0 * pc * gc / (pc * pc + gc * gc) + 1.0).powi(2) / 4.0;
            }
            let score = acc / n;
            assert!(emax >= score - 1e-12, "t={t}");
            let _ = single;
        }
    }

    #[test]
    fn complement_prediction_is_minimally_aligned() {
        // G is the left half; pred its complement.
        let (h, w) = (8, 8);
        let gt: Vec<u8> = (0..h * w).map(|i| ((i % w) < 4) as u8).collect();
        let pred: Vec<f64> = gt.iter().map(|&g| 1.0 - g as f64).collect();
        let got = e_measure_max(&pred, &gt).unwrap();
        let oracle = oracle_emax(&pred, &gt);
        assert!((got - oracle).abs() < 1e-12);
        // Pinned: the all-foreground (t=0) binarization is the best this
        // complement can do; perfectly anti-aligned thresholds score 0.
        assert!((got - GOLDEN_COMPLEMENT_EMAX).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn golden_fixture_values() {
        let (pred, gt) = golden_fixture();
        let s = s_measure(&pred, &gt, 8, 8).unwrap();
        let (f, _) = weighted_fmeasure(&pred, &gt, 8, 8).unwrap();
        let e = e_measure_max(&pred, &gt).unwrap();
        let os = oracle_smeasure(&pred, &gt, 8, 8);
        let of = oracle_fbw(&pred, &gt, 8, 8);
        let oe = oracle_emax(&pred, &gt);
        assert!((s - os).abs() < 1e-12, "s {s} vs oracle {os}");
        assert!((f - of).abs() < 1e-12, "f {f} vs oracle {of}");
        assert!((e - oe).abs() < 1e-12, "e {e} vs oracle {oe}");
        assert!((s - GOLDEN_S).abs() < 1e-6, "s {s}");
        assert!((f - GOLDEN_F).abs() < 1e-6, "f {f}");
        assert!((e - GOLDEN_E).abs() < 1e-6, "e {e}");
    }

    // Frozen once from the independent straight-line oracles (f64).
    const GOLDEN_S: f64 = 0.749634081637;
    const GOLDEN_F: f64 = 0.853203560897;
    const GOLDEN_E: f64 = 0.966851375804;
    const GOLDEN_COMPLEMENT_EMAX: f64 = 0.25;

    #[test]
    fn horizontal_flip_invariance() {
        let (h, w) = (6, 8);
        let (pred, gt) = rand_case(33, h, w, 0.35);
        let flip = |v: &[f64]| -> Vec<f64> {
            let mut out = v.to_vec();
            for y in 0..h {
                for x in 0..w {
                    out[y * w + x] = v[y * w + (w - 1 - x)];
                }
            }
            out
        };
        let gt_f: Vec<u8> = flip(&gt.iter().map(|&g| g as f64).collect::<Vec<_>>())
            .iter()
            .map(|&v| v as u8)
            .collect();
        let pred_f = flip(&pred);

        let a = per_image(&pred, &gt, h, w, ThresholdMode::Sweep256).unwrap();
        let b = per_image(&pred_f, &gt_f, h, w, ThresholdMode::Sweep256).unwrap();
        assert!((a.mdice - b.mdice).abs() < 1e-12);
        assert!((a.miou - b.miou).abs() < 1e-12);
        assert!((a.f_beta_w - b.f_beta_w).abs() < 1e-12);
        assert!((a.s_alpha - b.s_alpha).abs() < 1e-9);
        assert!((a.e_phi_max - b.e_phi_max).abs() < 1e-12);
        assert!((a.mae - b.mae).abs() < 1e-12);
    }

    fn toy_pair(seed: u64, id: &str) -> SamplePair {
        let (pred, gt) = rand_case(seed, 6, 6, 0.4);
        let _ = pred;
        SamplePair {
            image: Image { h: 6, w: 6, data: vec![0.5; 108] },
            mask: Mask { h: 6, w: 6, data: gt },
            id: id.to_string(),
            seed,
            split: Split::Train,
        }
    }

    #[test]
    fn dataset_aggregation_properties() {
        let pairs: Vec<SamplePair> = (0..4).map(|i| toy_pair(i as u64 + 1, &format!("s{i}"))).collect();
        let predict = |p: &SamplePair| -> crate::error::Result<Vec<f64>> {
            let mut rng = CounterRng::new(p.seed * 17);
            Ok((0..36).map(|_| rng.uniform()).collect())
        };
        let rep = evaluate_dataset("toy", &pairs, predict, ThresholdMode::Sweep256, 1).unwrap();

        // Aggregates are plain means of the per-image values.
        let m: f64 = rep.per_image.iter().map(|(_, m)| m.mdice).sum::<f64>() / 4.0;
        assert!((rep.mdice - m).abs() < 1e-12);

        // Single-image dataset: aggregate equals the sample.
        let one = evaluate_dataset("one", &pairs[..1], predict, ThresholdMode::Sweep256, 1).unwrap();
        assert_eq!(one.mdice, one.per_image[0].1.mdice);

        // Two identical images: aggregate equals either.
        let two = vec![pairs[0].clone(), {
            let mut c = pairs[0].clone();
            c.id = "s0b".into();
            c.seed = pairs[0].seed;
            c
        }];
        let rep2 = evaluate_dataset("two", &two, predict, ThresholdMode::Sweep256, 1).unwrap();
        assert!((rep2.mdice - rep2.per_image[0].1.mdice).abs() < 1e-12);

        // Order independence: a permutation changes nothing aggregate.
        let mut rev = pairs.clone();
        rev.reverse();
        let rep_rev = evaluate_dataset("toy", &rev, predict, ThresholdMode::Sweep256, 1).unwrap();
        assert!((rep.mdice - rep_rev.mdice).abs() < 1e-12);
        assert!((rep.mae - rep_rev.mae).abs() < 1e-12);

        // Thread count must not change values.
        let rep_mt = evaluate_dataset("toy", &pairs, predict, ThresholdMode::Sweep256, 4).unwrap();
        assert_eq!(rep.mdice, rep_mt.mdice);
        assert_eq!(rep.e_phi_max, rep_mt.e_phi_max);

        // Empty datasets are an error.
        assert!(evaluate_dataset("none", &[], predict, ThresholdMode::Sweep256, 1).is_err());
    }

    #[test]
    fn report_columns_in_table_order() {
        let pairs = vec![toy_pair(5, "a")];
        let predict = |p: &SamplePair| -> crate::error::Result<Vec<f64>> {
            Ok(p.mask.data.iter().map(|&g| g as f64).collect())
        };
        let rep = evaluate_dataset("d", &pairs, predict, ThresholdMode::Sweep256, 1).unwrap();
        let tsv = rep.to_tsv();
        assert!(tsv.contains("mDice\tmIoU\tFbw\tSalpha\tEphimax\tMAE"));
        // Perfect prediction: the x100 display of Salpha reads 100.00.
        let line = tsv.lines().nth(4).unwrap();
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols.len(), 6);
        assert_eq!(cols[3], "100.00");
        assert_eq!(cols[5], "0.00");
    }
}
