//! Named parameter registry with freeze groups.
//!
//! Model modules hold [`ParamId`] handles into one flat [`ParamStore`];
//! training stages, checkpointing, the freeze ledger and parameter counts
//! all iterate the store. Staging copies every tensor onto a [`Tape`]
//! before a forward pass, watching only the parameters trainable in the
//! current stage — frozen tensors become plain constants, so they can
//! never accumulate a gradient.

use crate::error::Result;
use crate::rng::CounterRng;
use crate::tensor::{Real, Tape, Tensor, ValId};

/// Which part of the model a parameter belongs to; drives stage-wise
/// trainability (backbone never trains, decoder only in stage 2, the
/// prior/adapters in both stages, the encoder mask head in stage 1 and
/// optionally in stage 2).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Prior,
    Adapter,
    EncoderHead,
    Decoder,
}

impl ParamGroup {
    pub fn label(&self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Prior => "prior",
            ParamGroup::Adapter => "adapter",
            ParamGroup::EncoderHead => "encoder-head",
            ParamGroup::Decoder => "decoder",
        }
    }

    /// Trainability per training stage. `stage2_aux_sup` controls whether
    /// the encoder mask head keeps learning during stage 2.
    pub fn trainable(&self, stage: Stage, stage2_aux_sup: bool) -> bool {
        match (self, stage) {
            (ParamGroup::Backbone, _) => false,
            (ParamGroup::Prior | ParamGroup::Adapter, _) => true,
            (ParamGroup::EncoderHead, Stage::One) => true,
            (ParamGroup::EncoderHead, Stage::Two) => stage2_aux_sup,
            (ParamGroup::Decoder, Stage::One) => false,
            (ParamGroup::Decoder, Stage::Two) => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn index(&self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

pub struct ParamEntry<T> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<T>,
}

/// Flat ordered registry of named parameters.
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, mut tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        tensor.set_requires_grad(group != ParamGroup::Backbone);
        self.entries.push(ParamEntry { name, group, tensor });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamEntry<T>)> {
        self.entries.iter_mut().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total scalar count over parameters matching the filter.
    pub fn count_scalars(&self, filter: impl Fn(&ParamEntry<T>) -> bool) -> usize {
        self.entries.iter().filter(|e| filter(e)).map(|e| e.tensor.numel()).sum()
    }

    /// Copy every parameter onto a tape; `watch` decides which become
    /// differentiable leaves. `ValId` order equals store order.
    pub fn stage(&self, tape: &mut Tape<T>, watch: impl Fn(&ParamEntry<T>) -> bool) -> Result<StagedParams> {
        let mut ids = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let id = if watch(e) {
                tape.param(&e.tensor)?
            } else {
                tape.constant(&e.tensor)?
            };
            ids.push(id);
        }
        Ok(StagedParams { ids })
    }

    /// Pull gradients off a differentiated tape into the tensors' grad
    /// slots (zeros for watched-but-unreached parameters, `None` for
    /// unwatched ones).
    pub fn collect_grads(&mut self, tape: &Tape<T>, staged: &StagedParams, watched: impl Fn(&ParamEntry<T>) -> bool) {
        for (i, e) in self.entries.iter_mut().enumerate() {
            if watched(e) {
                let g = tape
                    .grad(staged.ids[i])
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); e.tensor.numel()]);
                e.tensor.set_grad(Some(g));
            } else {
                e.tensor.set_grad(None);
            }
        }
    }
}

/// Tape ids for staged parameters, indexed like the store.
pub struct StagedParams {
    ids: Vec<ValId>,
}

impl StagedParams {
    pub fn val(&self, id: ParamId) -> ValId {
        self.ids[id.0]
    }
}

// ── initialization ───────────────────────────────────────────────────

/// Xavier-uniform tensor, stream keyed by (seed, name).
pub fn init_xavier<T: Real>(seed: u64, name: &str, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let mut rng = CounterRng::named(seed, name);
    let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_f64(rng.range(-lim, lim))).collect();
    Tensor::new(shape, data).expect("finite init")
}

/// Uniform tensor in [lo, hi), stream keyed by (seed, name).
pub fn init_uniform<T: Real>(seed: u64, name: &str, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<T> {
    let mut rng = CounterRng::named(seed, name);
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_f64(rng.range(lo, hi))).collect();
    Tensor::new(shape, data).expect("finite init")
}

/// Gradient check over the trainable subset of a store. `build` receives
/// the staged view and must return a scalar loss; see
/// [`crate::tensor::gradcheck`] for the error definition.
pub fn gradcheck_store<T: Real, F>(
    store: &mut ParamStore<T>,
    watch: impl Fn(&ParamEntry<T>) -> bool + Copy,
    mut build: F,
    eps: f64,
) -> Result<f64>
where
    F: FnMut(&mut Tape<T>, &StagedParams) -> Result<ValId>,
{
    let mut tape = Tape::new();
    let staged = store.stage(&mut tape, watch)?;
    let loss = build(&mut tape, &staged)?;
    tape.backward(loss)?;

    let watched: Vec<ParamId> = store.iter().filter(|(_, e)| watch(e)).map(|(id, _)| id).collect();
    let analytic: Vec<Vec<T>> = watched
        .iter()
        .map(|&id| {
            tape.grad(staged.val(id))
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![T::zero(); store.tensor(id).numel()])
        })
        .collect();
    drop(tape);

    let mut eval = |store: &ParamStore<T>, build: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape, watch)?;
        let loss = build(&mut tape, &staged)?;
        Ok(tape.scalar(loss)?.as_f64())
    };

    let mut worst = 0.0f64;
    for (wi, &pid) in watched.iter().enumerate() {
        for ci in 0..store.tensor(pid).numel() {
            let orig = store.tensor(pid).data()[ci];
            store.tensor_mut(pid).data_mut()[ci] = orig + T::from_f64(eps);
            let fp = eval(store, &mut build)?;
            store.tensor_mut(pid).data_mut()[ci] = orig - T::from_f64(eps);
            let fm = eval(store, &mut build)?;
            store.tensor_mut(pid).data_mut()[ci] = orig;

            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[wi][ci].as_f64();
            let denom = (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freeze_rules_match_stage_contract() {
        use ParamGroup::*;
        for (group, s1, s2, s2_aux) in [
            (Backbone, false, false, false),
            (Prior, true, true, true),
            (Adapter, true, true, true),
            (EncoderHead, true, false, true),
            (Decoder, false, true, true),
        ] {
            assert_eq!(group.trainable(Stage::One, false), s1, "{group:?} stage1");
            assert_eq!(group.trainable(Stage::Two, false), s2, "{group:?} stage2");
            assert_eq!(group.trainable(Stage::Two, true), s2_aux, "{group:?} stage2+aux");
        }
    }

    #[test]
    fn backbone_never_requires_grad() {
        let mut store = ParamStore::<f64>::new();
        let frozen = store.add("vit.w", ParamGroup::Backbone, Tensor::zeros(vec![2]));
        let live = store.add("prior.w", ParamGroup::Prior, Tensor::zeros(vec![2]));
        assert!(!store.tensor(frozen).requires_grad());
        assert!(store.tensor(live).requires_grad());
    }

    #[test]
    fn named_init_is_order_independent() {
        let a: Tensor<f64> = init_xavier(7, "module.w", vec![3, 3], 3, 3);
        let _other: Tensor<f64> = init_xavier(7, "zzz.w", vec![4], 4, 4);
        let b: Tensor<f64> = init_xavier(7, "module.w", vec![3, 3], 3, 3);
        assert_eq!(a.data(), b.data());
    }
}
