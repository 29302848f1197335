//! Domain-prior extraction: multi-scale spatial decomposition, channel
//! saliency/context pooling, Mamba channel interaction, and gated fusion.
//!
//! The pyramid M* stacks the per-kernel maps coarsest-first (the largest
//! kernel occupies the top channel block). Pooled max/mean channel
//! vectors are scanned as length-3*C0 sequences of width-1 tokens by two
//! parameter-disjoint Mamba layers, and the resulting gate vectors
//! modulate M* before the two gated copies are concatenated into the
//! prior map of 6*C0 channels.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{init_xavier, ParamGroup, ParamId, ParamStore, StagedParams};
use crate::scan::MambaLayerParams;
use crate::tensor::{Real, Tape, Tensor, ValId};

pub struct MambaPrior {
    /// (kernel size, weight, bias) in pyramid order; empty when MSD is off.
    pub convs: Vec<(usize, ParamId, ParamId)>,
    pub mamba_s: Option<MambaLayerParams>,
    pub mamba_c: Option<MambaLayerParams>,
    /// Raw-image conv stem for the adapter-only configuration.
    pub stem: Option<(ParamId, ParamId)>,
    pub c0: usize,
    pub use_msd: bool,
    pub use_mamba: bool,
}

impl MambaPrior {
    pub fn init<T: Real>(store: &mut ParamStore<T>, seed: u64, cfg: &ModelConfig) -> Self {
        let c0 = cfg.c0;
        let mut convs = Vec::new();
        let mut stem = None;
        if cfg.use_msd {
            for (i, &k) in cfg.kernels.iter().enumerate() {
                // Replicated kernel sizes (uni-scale) still get distinct slots.
                let name = format!("prior.conv{i}_k{k}");
                let w = store.add(
                    format!("{name}.w"),
                    ParamGroup::Prior,
                    init_xavier(seed, &format!("{name}.w"), vec![k, k, 3, c0], k * k * 3, k * k * c0),
                );
                let b = store.add(format!("{name}.b"), ParamGroup::Prior, Tensor::zeros(vec![c0]));
                convs.push((k, w, b));
            }
        } else {
            let w = store.add(
                "prior.stem.w",
                ParamGroup::Prior,
                init_xavier(seed, "prior.stem.w", vec![3, 3, 3, 6 * c0], 9 * 3, 9 * 6 * c0),
            );
            let b = store.add("prior.stem.b", ParamGroup::Prior, Tensor::zeros(vec![6 * c0]));
            stem = Some((w, b));
        }
        let (mamba_s, mamba_c) = if cfg.use_msd && cfg.use_mamba {
            // Width-1 tokens: the channel axis is the scan axis.
            (
                Some(MambaLayerParams::init(store, "prior.mamba_s", ParamGroup::Prior, seed, 1, cfg.expand, cfg.n_state, cfg.conv_width)),
                Some(MambaLayerParams::init(store, "prior.mamba_c", ParamGroup::Prior, seed, 1, cfg.expand, cfg.n_state, cfg.conv_width)),
            )
        } else {
            (None, None)
        };
        MambaPrior {
            convs,
            mamba_s,
            mamba_c,
            stem,
            c0,
            use_msd: cfg.use_msd,
            use_mamba: cfg.use_mamba,
        }
    }

    /// Output channel count of [`MambaPrior::forward`].
    pub fn out_channels(&self) -> usize {
        6 * self.c0
    }

    /// Parallel same-padded convolutions concatenated coarsest-first:
    /// [h,w,3] -> [h,w,3*c0].
    pub fn msd<T: Real>(&self, tape: &mut Tape<T>, staged: &StagedParams, image: ValId) -> Result<ValId> {
        if !self.use_msd {
            return Err(Error::invalid("msd", "disabled in this configuration"));
        }
        let mut maps = Vec::with_capacity(self.convs.len());
        for &(_k, w, b) in &self.convs {
            maps.push(tape.conv2d(image, staged.val(w), Some(staged.val(b)), 1)?);
        }
        tape.concat(&maps, 2)
    }

    /// Per-channel spatial max (saliency) and mean (context) vectors.
    pub fn channel_pool<T: Real>(&self, tape: &mut Tape<T>, m_star: ValId) -> Result<(ValId, ValId)> {
        let ms = tape.global_max_pool(m_star)?;
        let mc = tape.global_avg_pool(m_star)?;
        Ok((ms, mc))
    }

    /// Two parallel, parameter-disjoint Mamba scans over the channel axis;
    /// identity gates (all ones) when the interaction is disabled.
    pub fn channel_interaction<T: Real>(
        &self,
        tape: &mut Tape<T>,
        staged: &StagedParams,
        ms: ValId,
        mc: ValId,
    ) -> Result<(ValId, ValId)> {
        let len = tape.shape(ms)[0];
        if tape.shape(ms) != tape.shape(mc) {
            return Err(Error::shape("channel_interaction", "pooled vectors differ".to_string()));
        }
        match (&self.mamba_s, &self.mamba_c) {
            (Some(ls), Some(lc)) => {
                let s_tokens = tape.reshape(ms, vec![len, 1])?;
                let c_tokens = tape.reshape(mc, vec![len, 1])?;
                let s_out = ls.forward(tape, staged, s_tokens)?;
                let c_out = lc.forward(tape, staged, c_tokens)?;
                Ok((tape.reshape(s_out, vec![len])?, tape.reshape(c_out, vec![len])?))
            }
            _ => {
                let ones = Tensor::filled(vec![len], T::one());
                Ok((tape.constant(&ones)?, tape.constant(&ones)?))
            }
        }
    }

    /// M_D = concat(gate_s * M*, gate_c * M*): each gate broadcasts over
    /// the spatial extent; output has 6*c0 channels.
    pub fn fuse<T: Real>(&self, tape: &mut Tape<T>, m_star: ValId, ms_o: ValId, mc_o: ValId) -> Result<ValId> {
        let c = *tape.shape(m_star).last().unwrap();
        if tape.shape(ms_o) != [c] || tape.shape(mc_o) != [c] {
            return Err(Error::shape(
                "fuse",
                format!("gates {:?}/{:?} vs {} channels", tape.shape(ms_o), tape.shape(mc_o), c),
            ));
        }
        let gs = tape.reshape(ms_o, vec![1, 1, c])?;
        let gc = tape.reshape(mc_o, vec![1, 1, c])?;
        let half_s = tape.mul(gs, m_star)?;
        let half_c = tape.mul(gc, m_star)?;
        tape.concat(&[half_s, half_c], 2)
    }

    /// Full composition: [h,w,3] image -> [h,w,6*c0] prior map.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, staged: &StagedParams, image: ValId) -> Result<ValId> {
        if let Some((w, b)) = self.stem {
            return tape.conv2d(image, staged.val(w), Some(staged.val(b)), 1);
        }
        let m_star = self.msd(tape, staged, image)?;
        let (ms, mc) = self.channel_pool(tape, m_star)?;
        let (ms_o, mc_o) = self.channel_interaction(tape, staged, ms, mc)?;
        self.fuse(tape, m_star, ms_o, mc_o)
    }
}
