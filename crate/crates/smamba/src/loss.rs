//! Training objective: boundary-weighted Dice + BCE, and the two stage
//! losses built from it.
//!
//! Pixel weights are `1 + gain * |boxfilter(G) - G|`: pixels whose
//! neighborhood disagrees with them (boundaries, thin structures) count
//! more. The BCE term is computed from logits in log-sum-exp form; the
//! Dice term runs on probabilities with an epsilon-smoothed ratio.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, ValId};

#[derive(Debug, Clone, Copy)]
pub struct LossParams {
    /// Box window at >= 96 px; scaled proportionally below (odd, >= 3).
    pub window: usize,
    pub gain: f64,
    pub eps: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams { window: 31, gain: 5.0, eps: 1.0 }
    }
}

impl LossParams {
    pub fn from_train(cfg: &crate::config::TrainConfig) -> Self {
        LossParams { window: cfg.loss_window, gain: cfg.loss_gain, eps: cfg.loss_eps }
    }

    /// Effective window for an image: `window` at >= 96 px, otherwise the
    /// nearest odd value of `window * min(h,w)/96`, floored at 3.
    pub fn effective_window(&self, h: usize, w: usize) -> usize {
        let side = h.min(w);
        if side >= 96 {
            return self.window;
        }
        let scaled = self.window as f64 * side as f64 / 96.0;
        let odd = 2 * ((scaled - 1.0) / 2.0).round() as i64 + 1;
        (odd.max(3)) as usize
    }
}

/// Per-pixel weights `1 + gain * |mean_window(G) - G|` with a same-padded
/// (zero-padded) box mean. Values are always in [1, 1 + gain].
pub fn boundary_weight(mask: &[u8], h: usize, w: usize, p: &LossParams) -> Result<Vec<f64>> {
    if mask.len() != h * w {
        return Err(Error::shape("boundary_weight", format!("{} values for {}x{}", mask.len(), h, w)));
    }
    if mask.iter().any(|&v| v > 1) {
        return Err(Error::invalid("boundary_weight", "mask must be binary {0,1}"));
    }
    let win = p.effective_window(h, w);
    let r = win / 2;
    // Separable box sums with zero padding outside the image.
    let mut rows = vec![0.0f64; h * w];
    for y in 0..h {
        let mut acc = 0.0;
        for x in 0..win.min(w) {
            acc += mask[y * w + x] as f64;
        }
        for x in 0..w {
            // window covers [x-r, x+r]
            if x > 0 {
                let enter = x + r;
                if enter < w {
                    acc += mask[y * w + enter] as f64;
                }
                let leave = x as isize - r as isize - 1;
                if leave >= 0 {
                    acc -= mask[y * w + leave as usize] as f64;
                }
            } else {
                // initial acc covered [0, win-1] but we want [-r, r]
                for x2 in r + 1..win.min(w) {
                    acc -= mask[y * w + x2] as f64;
                }
            }
            rows[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f64; h * w];
    let norm = 1.0 / (win * win) as f64;
    for x in 0..w {
        let mut acc = 0.0;
        for y in 0..=(r.min(h - 1)) {
            acc += rows[y * w + x];
        }
        for y in 0..h {
            if y > 0 {
                let enter = y + r;
                if enter < h {
                    acc += rows[enter * w + x];
                }
                let leave = y as isize - r as isize - 1;
                if leave >= 0 {
                    acc -= rows[leave as usize * w + x];
                }
            }
            let mean = acc * norm;
            out[y * w + x] = 1.0 + p.gain * (mean - mask[y * w + x] as f64).abs();
        }
    }
    Ok(out)
}

fn mask_targets<T: Real>(mask: &[u8]) -> Vec<T> {
    mask.iter().map(|&v| T::from_f64(v as f64)).collect()
}

fn to_t<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64(x)).collect()
}

/// Weighted BCE between logits and a binary mask.
pub fn weighted_bce<T: Real>(tape: &mut Tape<T>, logits: ValId, mask: &[u8], weights: &[f64]) -> Result<ValId> {
    tape.bce_with_logits(logits, mask_targets(mask), to_t(weights))
}

/// Weighted Dice loss; `probs` must already be probabilities.
pub fn weighted_dice<T: Real>(
    tape: &mut Tape<T>,
    probs: ValId,
    mask: &[u8],
    weights: &[f64],
    eps: f64,
) -> Result<ValId> {
    tape.dice_loss(probs, mask_targets(mask), to_t(weights), eps)
}

/// L_D = weighted Dice + weighted BCE over [h, w] logits.
pub fn combined_loss<T: Real>(tape: &mut Tape<T>, logits: ValId, mask: &[u8], p: &LossParams) -> Result<ValId> {
    let sh = tape.shape(logits).to_vec();
    if sh.len() != 2 || sh[0] * sh[1] != mask.len() {
        return Err(Error::shape(
            "combined_loss",
            format!("logits {:?} vs mask of {}", sh, mask.len()),
        ));
    }
    let weights = boundary_weight(mask, sh[0], sh[1], p)?;
    let bce = weighted_bce(tape, logits, mask, &weights)?;
    let probs = tape.sigmoid(logits)?;
    let dice = weighted_dice(tape, probs, mask, &weights, p.eps)?;
    tape.add(bce, dice)
}

/// Stage 1: supervise the encoder's upsampled side output.
pub fn stage1_loss<T: Real>(tape: &mut Tape<T>, pseudo_logits: ValId, mask: &[u8], p: &LossParams) -> Result<ValId> {
    combined_loss(tape, pseudo_logits, mask, p)
}

/// Stage 2: supervise the decoder output; the optional encoder side
/// output is added only when auxiliary supervision is enabled.
pub fn stage2_loss<T: Real>(
    tape: &mut Tape<T>,
    decoder_logits: ValId,
    pseudo_logits: Option<ValId>,
    mask: &[u8],
    p: &LossParams,
) -> Result<ValId> {
    let main = combined_loss(tape, decoder_logits, mask, p)?;
    match pseudo_logits {
        Some(side) => {
            let aux = combined_loss(tape, side, mask, p)?;
            tape.add(main, aux)
        }
        None => Ok(main),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use crate::tensor::{gradcheck, Tensor};

    fn params(window: usize, gain: f64) -> LossParams {
        LossParams { window, gain, eps: 1.0 }
    }

    /// Direct O(h*w*win^2) mean filter, the oracle for the separable pass.
    fn boxfilter_direct(mask: &[u8], h: usize, w: usize, win: usize) -> Vec<f64> {
        let r = (win / 2) as isize;
        let mut out = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut s = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                            s += mask[(yy * w as isize + xx) as usize] as f64;
                        }
                    }
                }
                out[(y * w as isize + x) as usize] = s / (win * win) as f64;
            }
        }
        out
    }

    #[test]
    fn all_zero_mask_gives_unit_weights() {
        let p = params(31, 5.0);
        let w = boundary_weight(&vec![0u8; 24 * 20], 24, 20, &p).unwrap();
        assert!(w.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn weights_match_direct_filter_and_stay_bounded() {
        let p = params(31, 5.0);
        let (h, w) = (20, 24);
        let mut rng = CounterRng::new(1);
        let mask: Vec<u8> = (0..h * w).map(|_| (rng.uniform() < 0.4) as u8).collect();
        let win = p.effective_window(h, w);
        let got = boundary_weight(&mask, h, w, &p).unwrap();
        let direct = boxfilter_direct(&mask, h, w, win);
        for i in 0..h * w {
            let expect = 1.0 + 5.0 * (direct[i] - mask[i] as f64).abs();
            assert!((got[i] - expect).abs() < 1e-12, "pixel {i}");
            assert!(got[i] >= 1.0 && got[i] <= 1.0 + 5.0);
        }
    }

    #[test]
    fn boundary_pixel_flip_raises_weight_at_the_edge() {
        let p = params(31, 5.0);
        let (h, w) = (16, 16);
        // Half-plane mask: rows 0..8 foreground.
        let mut mask: Vec<u8> = (0..h * w).map(|i| ((i / w) < 8) as u8).collect();
        let base = boundary_weight(&mask, h, w, &p).unwrap();
        // Flip one pixel just below the boundary.
        mask[8 * w + 8] = 1;
        let flipped = boundary_weight(&mask, h, w, &p).unwrap();
        let win = p.effective_window(h, w);
        let r = win / 2;
        // The weight rises in the flip's neighborhood and the largest rise
        // is at the flipped pixel itself (it now disagrees most with its
        // surroundings).
        let mut max_delta = 0.0;
        let mut argmax = 0;
        for i in 0..h * w {
            let d = flipped[i] - base[i];
            if d > max_delta {
                max_delta = d;
                argmax = i;
            }
        }
        assert!(max_delta > 0.0);
        assert_eq!(argmax, 8 * w + 8);
        // Far corner is unaffected.
        let far = (h - 1) * w + (w - 1);
        let dy = (far / w) as isize - 8;
        let dx = (far % w) as isize - 8;
        assert!(dy.unsigned_abs() > r || dx.unsigned_abs() > r);
        assert_eq!(base[far], flipped[far]);
    }

    #[test]
    fn window_scaling_for_small_inputs() {
        let p = params(31, 5.0);
        assert_eq!(p.effective_window(96, 96), 31);
        assert_eq!(p.effective_window(352, 352), 31);
        assert_eq!(p.effective_window(64, 64), 21);
        assert_eq!(p.effective_window(48, 48), 15);
        assert_eq!(p.effective_window(16, 16), 5);
    }

    #[test]
    fn non_binary_mask_rejected() {
        let p = params(31, 5.0);
        assert!(boundary_weight(&[0, 1, 2, 0], 2, 2, &p).is_err());
    }

    #[test]
    fn bce_half_probability_on_half_ones_is_ln2() {
        // gain 0 makes all weights exactly 1.
        let p = params(31, 0.0);
        let (h, w) = (4, 4);
        let mask: Vec<u8> = (0..16).map(|i| (i < 8) as u8).collect();
        let logits = Tensor::<f64>::zeros(vec![h, w]);
        let mut tape = Tape::new();
        let li = tape.constant(&logits).unwrap();
        let weights = boundary_weight(&mask, h, w, &p).unwrap();
        let bce = weighted_bce(&mut tape, li, &mask, &weights).unwrap();
        assert!((tape.scalar(bce).unwrap() - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_drives_loss_to_floor() {
        let p = params(31, 5.0);
        let (h, w) = (8, 8);
        let mut rng = CounterRng::new(2);
        let mask: Vec<u8> = (0..64).map(|_| (rng.uniform() < 0.3) as u8).collect();
        let logits = Tensor::new(
            vec![h, w],
            mask.iter().map(|&g| if g == 1 { 20.0 } else { -20.0 }).collect::<Vec<f64>>(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let li = tape.constant(&logits).unwrap();
        let loss = combined_loss(&mut tape, li, &mask, &p).unwrap();
        assert!(tape.scalar(loss).unwrap() < 1e-3);
    }

    #[test]
    fn random_case_matches_summation_oracle() {
        let p = params(31, 5.0);
        let (h, w) = (8, 8);
        let mut rng = CounterRng::new(3);
        let mask: Vec<u8> = (0..64).map(|_| (rng.uniform() < 0.5) as u8).collect();
        let logits: Vec<f64> = (0..64).map(|_| rng.range(-3.0, 3.0)).collect();
        let lt = Tensor::new(vec![h, w], logits.clone()).unwrap();
        let mut tape = Tape::new();
        let li = tape.constant(&lt).unwrap();
        let loss = combined_loss(&mut tape, li, &mask, &p).unwrap();

        // Straightforward summation oracle.
        let weights = boundary_weight(&mask, h, w, &p).unwrap();
        let mut bce_num = 0.0;
        let mut wsum = 0.0;
        let mut inter = 0.0;
        let mut denom = 0.0;
        for i in 0..64 {
            let x: f64 = logits[i];
            let g = mask[i] as f64;
            let pr = 1.0 / (1.0 + (-x).exp());
            let bce = -(g * pr.ln() + (1.0 - g) * (1.0 - pr).ln());
            bce_num += weights[i] * bce;
            wsum += weights[i];
            inter += weights[i] * pr * g;
            denom += weights[i] * (pr + g);
        }
        let expect = bce_num / wsum + (1.0 - (2.0 * inter + 1.0) / (denom + 1.0));
        assert!((tape.scalar(loss).unwrap() - expect).abs() < 1e-8);
    }

    #[test]
    fn unit_weights_reduce_to_unweighted_forms() {
        let p = params(31, 0.0);
        let (h, w) = (6, 6);
        let mut rng = CounterRng::new(4);
        let mask: Vec<u8> = (0..36).map(|_| (rng.uniform() < 0.5) as u8).collect();
        let logits: Vec<f64> = (0..36).map(|_| rng.range(-2.0, 2.0)).collect();
        let lt = Tensor::new(vec![h, w], logits.clone()).unwrap();
        let mut tape = Tape::new();
        let li = tape.constant(&lt).unwrap();
        let loss = combined_loss(&mut tape, li, &mask, &p).unwrap();

        let mut bce = 0.0;
        let mut inter = 0.0;
        let mut denom = 0.0;
        for i in 0..36 {
            let x: f64 = logits[i];
            let g = mask[i] as f64;
            let pr = 1.0 / (1.0 + (-x).exp());
            bce += -(g * pr.ln() + (1.0 - g) * (1.0 - pr).ln());
            inter += pr * g;
            denom += pr + g;
        }
        let expect = bce / 36.0 + (1.0 - (2.0 * inter + 1.0) / (denom + 1.0));
        assert!((tape.scalar(loss).unwrap() - expect).abs() < 1e-8);
    }

    #[test]
    fn per_pixel_bce_monotone_in_logit_distance() {
        let mask = vec![1u8];
        let weights = vec![1.0];
        let mut last = f64::INFINITY;
        for logit in [-3.0, -1.0, 0.0, 1.0, 2.0, 5.0] {
            let lt = Tensor::new(vec![1, 1], vec![logit]).unwrap();
            let mut tape = Tape::new();
            let li = tape.constant(&lt).unwrap();
            let b = weighted_bce(&mut tape, li, &mask, &weights).unwrap();
            let v = tape.scalar(b).unwrap();
            assert!(v < last, "bce must fall as the logit approaches the target");
            last = v;
        }
    }

    #[test]
    fn stage2_without_aux_ignores_side_output() {
        let p = params(31, 5.0);
        let mask: Vec<u8> = (0..16).map(|i| (i % 3 == 0) as u8).collect();
        let mut rng = CounterRng::new(5);
        let dec = Tensor::new(vec![4, 4], (0..16).map(|_| rng.range(-2.0, 2.0)).collect::<Vec<_>>()).unwrap();
        let side = Tensor::new(vec![4, 4], (0..16).map(|_| rng.range(-2.0, 2.0)).collect::<Vec<_>>()).unwrap();

        let mut tape = Tape::new();
        let di = tape.constant(&dec).unwrap();
        let without = stage2_loss(&mut tape, di, None, &mask, &p).unwrap();
        let plain = combined_loss(&mut tape, di, &mask, &p).unwrap();
        assert_eq!(tape.scalar(without).unwrap(), tape.scalar(plain).unwrap());

        // With the flag, the side loss is added.
        let si = tape.constant(&side).unwrap();
        let with = stage2_loss(&mut tape, di, Some(si), &mask, &p).unwrap();
        let side_only = combined_loss(&mut tape, si, &mask, &p).unwrap();
        let expect = tape.scalar(plain).unwrap() + tape.scalar(side_only).unwrap();
        assert!((tape.scalar(with).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn stage1_loss_gradcheck() {
        let p = params(31, 5.0);
        let mut rng = CounterRng::new(6);
        let mask: Vec<u8> = (0..36).map(|_| (rng.uniform() < 0.4) as u8).collect();
        let mut logits = vec![Tensor::new(vec![6, 6], (0..36).map(|_| rng.range(-2.0, 2.0)).collect::<Vec<f64>>()).unwrap()];
        let err = gradcheck(
            &mut logits,
            |tape, ids| stage1_loss(tape, ids[0], &mask, &p),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "loss fd err {err}");
    }
}
