//! Selective state-space scan and the gated Mamba layer.
//!
//! The SSM kernel follows the standard selective parameterization:
//! input-dependent B, C and step size delta, a diagonal negative state
//! matrix stored as `A = -exp(A_log)`, zero-order-hold discretization
//! `Abar = exp(delta * A)` with the simplified Euler form
//! `Bbar = delta * B`, and a learned skip `D`. The Mamba layer wraps the
//! scan in the usual gated block: shared input projection, depthwise
//! causal conv + SiLU on the scan branch, SiLU gate on the parallel
//! branch, elementwise product, output projection.

use crate::error::{Error, Result};
use crate::params::{init_uniform, init_xavier, ParamGroup, ParamId, ParamStore, StagedParams};
use crate::rng::CounterRng;
use crate::tensor::{kernels, Real, Tape, Tensor, ValId};

/// Trainable symbols of one selective-scan kernel.
///
/// `a_log`: [e, n_state] (effective A = -exp(a_log), strictly negative);
/// `w_b`, `w_c`: [e, n_state] input projections; `w_delta`: [e, e] plus
/// `b_delta`: [e] (delta = softplus(x W + b) > 0); `d`: [e] skip.
#[derive(Debug, Clone)]
pub struct SsmParams {
    pub a_log: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub w_delta: ParamId,
    pub b_delta: ParamId,
    pub d: ParamId,
    pub e: usize,
    pub n_state: usize,
}

impl SsmParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        group: ParamGroup,
        seed: u64,
        e: usize,
        n_state: usize,
    ) -> Self {
        // A_log rows are log(1..n_state), identical per channel: slow to
        // fast decay modes.
        let a_row: Vec<f64> = (1..=n_state).map(|n| (n as f64).ln()).collect();
        let a_log = Tensor::from_f64(vec![e, n_state], &a_row.repeat(e)).expect("finite");

        // softplus(b_delta) lands in [0.01, 0.1), log-uniform per channel.
        let mut rng = CounterRng::named(seed, &format!("{prefix}.b_delta"));
        let b_delta_data: Vec<f64> = (0..e)
            .map(|_| {
                let dt = (rng.range((0.01f64).ln(), (0.1f64).ln())).exp();
                (dt.exp() - 1.0).ln()
            })
            .collect();
        let b_delta = Tensor::from_f64(vec![e], &b_delta_data).expect("finite");

        SsmParams {
            a_log: store.add(format!("{prefix}.a_log"), group, a_log),
            w_b: store.add(
                format!("{prefix}.w_b"),
                group,
                init_xavier(seed, &format!("{prefix}.w_b"), vec![e, n_state], e, n_state),
            ),
            w_c: store.add(
                format!("{prefix}.w_c"),
                group,
                init_xavier(seed, &format!("{prefix}.w_c"), vec![e, n_state], e, n_state),
            ),
            w_delta: store.add(
                format!("{prefix}.w_delta"),
                group,
                init_xavier(seed, &format!("{prefix}.w_delta"), vec![e, e], e, e),
            ),
            b_delta: store.add(format!("{prefix}.b_delta"), group, b_delta),
            d: store.add(format!("{prefix}.d"), group, Tensor::filled(vec![e], T::one())),
            e,
            n_state,
        }
    }

    pub fn view<'a, T: Real>(&self, store: &'a ParamStore<T>) -> SsmView<'a, T> {
        SsmView {
            a_log: store.tensor(self.a_log),
            w_b: store.tensor(self.w_b),
            w_c: store.tensor(self.w_c),
            w_delta: store.tensor(self.w_delta),
            b_delta: store.tensor(self.b_delta),
            d: store.tensor(self.d),
        }
    }
}

/// Borrowed plain-tensor view of [`SsmParams`] for the pure scan paths.
pub struct SsmView<'a, T> {
    pub a_log: &'a Tensor<T>,
    pub w_b: &'a Tensor<T>,
    pub w_c: &'a Tensor<T>,
    pub w_delta: &'a Tensor<T>,
    pub b_delta: &'a Tensor<T>,
    pub d: &'a Tensor<T>,
}

fn scan_inputs<T: Real>(u: &Tensor<T>, p: &SsmView<T>) -> Result<(usize, usize, usize, Vec<T>, Vec<T>, Vec<T>, Vec<T>)> {
    if u.rank() != 2 || u.shape()[0] == 0 {
        return Err(Error::shape("ssm_scan", format!("input {:?} (need [l>=1, e])", u.shape())));
    }
    let (l, e) = (u.shape()[0], u.shape()[1]);
    let n = p.a_log.shape()[1];
    if p.a_log.shape() != [e, n] || p.w_b.shape() != [e, n] || p.w_c.shape() != [e, n] {
        return Err(Error::shape("ssm_scan", "a_log/w_b/w_c shape".to_string()));
    }
    if p.w_delta.shape() != [e, e] || p.b_delta.shape() != [e] || p.d.shape() != [e] {
        return Err(Error::shape("ssm_scan", "w_delta/b_delta/d shape".to_string()));
    }
    let a: Vec<T> = p.a_log.data().iter().map(|&v| -v.exp()).collect();
    let bseq = kernels::matmul_fwd(u.data(), p.w_b.data(), 1, l, e, n);
    let cseq = kernels::matmul_fwd(u.data(), p.w_c.data(), 1, l, e, n);
    let mut delta = kernels::matmul_fwd(u.data(), p.w_delta.data(), 1, l, e, e);
    for t in 0..l {
        for ei in 0..e {
            let z = delta[t * e + ei] + p.b_delta.data()[ei];
            delta[t * e + ei] = z.max(T::zero()) + (T::one() + (-z.abs()).exp()).ln();
        }
    }
    Ok((l, e, n, a, bseq, cseq, delta))
}

/// Sequential reference evaluation of the selective scan. u: [l, e].
pub fn ssm_scan_seq<T: Real>(u: &Tensor<T>, p: &SsmView<T>) -> Result<Tensor<T>> {
    let (l, e, n, a, bseq, cseq, delta) = scan_inputs(u, p)?;
    let (y, _h) = kernels::ssm_scan_fwd(u.data(), l, e, n, &a, &bseq, &cseq, &delta, p.d.data());
    Tensor::new(vec![l, e], y)
}

/// Chunked evaluation: bit-identical values, hidden state carried across
/// chunk boundaries.
pub fn ssm_scan_chunked<T: Real>(u: &Tensor<T>, p: &SsmView<T>, chunk: usize) -> Result<Tensor<T>> {
    if chunk == 0 {
        return Err(Error::invalid("ssm_scan_chunked", "chunk must be >= 1"));
    }
    let (l, e, n, a, bseq, cseq, delta) = scan_inputs(u, p)?;
    let y = kernels::ssm_scan_chunked_fwd(u.data(), l, e, n, &a, &bseq, &cseq, &delta, p.d.data(), chunk);
    Tensor::new(vec![l, e], y)
}

/// Record the selective scan on a tape: same math as [`ssm_scan_seq`],
/// differentiable through all six parameter tensors and the input.
pub fn ssm_scan_on_tape<T: Real>(
    tape: &mut Tape<T>,
    staged: &StagedParams,
    p: &SsmParams,
    u: ValId,
) -> Result<ValId> {
    let a_log = staged.val(p.a_log);
    let a_exp = tape.exp(a_log)?;
    let a = tape.neg(a_exp)?;
    let bseq = tape.linear(u, staged.val(p.w_b), None)?;
    let cseq = tape.linear(u, staged.val(p.w_c), None)?;
    let pre = tape.linear(u, staged.val(p.w_delta), Some(staged.val(p.b_delta)))?;
    let delta = tape.softplus(pre)?;
    tape.ssm_scan(u, a, bseq, cseq, delta, staged.val(p.d))
}

/// Trainable symbols of one gated Mamba layer over [l, d_model] sequences.
#[derive(Debug, Clone)]
pub struct MambaLayerParams {
    pub phi_in_w: ParamId,
    pub phi_in_b: ParamId,
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    pub ssm: SsmParams,
    pub phi_out_w: ParamId,
    pub phi_out_b: ParamId,
    pub d_model: usize,
    pub e: usize,
    pub conv_width: usize,
}

impl MambaLayerParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        group: ParamGroup,
        seed: u64,
        d_model: usize,
        expand: usize,
        n_state: usize,
        conv_width: usize,
    ) -> Self {
        let e = expand * d_model;
        let lim = (1.0 / conv_width as f64).sqrt();
        MambaLayerParams {
            phi_in_w: store.add(
                format!("{prefix}.phi_in.w"),
                group,
                init_xavier(seed, &format!("{prefix}.phi_in.w"), vec![d_model, e], d_model, e),
            ),
            phi_in_b: store.add(format!("{prefix}.phi_in.b"), group, Tensor::zeros(vec![e])),
            dw_w: store.add(
                format!("{prefix}.dw.w"),
                group,
                init_uniform(seed, &format!("{prefix}.dw.w"), vec![conv_width, e], -lim, lim),
            ),
            dw_b: store.add(format!("{prefix}.dw.b"), group, Tensor::zeros(vec![e])),
            ssm: SsmParams::init(store, &format!("{prefix}.ssm"), group, seed, e, n_state),
            phi_out_w: store.add(
                format!("{prefix}.phi_out.w"),
                group,
                init_xavier(seed, &format!("{prefix}.phi_out.w"), vec![e, d_model], e, d_model),
            ),
            phi_out_b: store.add(format!("{prefix}.phi_out.b"), group, Tensor::zeros(vec![d_model])),
            d_model,
            e,
            conv_width,
        }
    }

    /// out = phi_out(SSM(silu(conv(phi_in(x)))) * silu(phi_in(x))), the
    /// input projection shared by both branches.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, staged: &StagedParams, x: ValId) -> Result<ValId> {
        if tape.shape(x).len() != 2 || tape.shape(x)[1] != self.d_model {
            return Err(Error::shape(
                "mamba_layer",
                format!("input {:?} want [l, {}]", tape.shape(x), self.d_model),
            ));
        }
        let z = tape.linear(x, staged.val(self.phi_in_w), Some(staged.val(self.phi_in_b)))?;
        let conv = tape.dwconv1d(z, staged.val(self.dw_w), staged.val(self.dw_b))?;
        let scan_in = tape.silu(conv)?;
        let scan_out = ssm_scan_on_tape(tape, staged, &self.ssm, scan_in)?;
        let gate = tape.silu(z)?;
        let gated = tape.mul(scan_out, gate)?;
        tape.linear(gated, staged.val(self.phi_out_w), Some(staged.val(self.phi_out_b)))
    }
}
