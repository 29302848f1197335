//! Run configuration: one flat `key = value` text format with `[model]`,
//! `[train]` and `[data]` sections, `#` comments, and strict unknown-key
//! rejection. `parse(serialize(c)) == c` holds exactly (floats are printed
//! in shortest round-trip form).

use crate::error::{Error, Result};
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Every architectural knob of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Channels per pyramid scale.
    pub c0: usize,
    /// Kernel sizes in pyramid order (coarsest first becomes the top
    /// channel block). Always three entries; uni-scale ablations
    /// replicate one size.
    pub kernels: [usize; 3],
    /// Multi-scale decomposition on/off (off = raw-image conv stem).
    pub use_msd: bool,
    /// Mamba channel interaction on/off (off = identity gates).
    pub use_mamba: bool,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Encoder block indices that receive adapter injection.
    pub inject_at: Vec<usize>,
    /// Bottleneck width r of the adapter.
    pub adapter_dim: usize,
    /// Hidden width multiple of the ViT MLP.
    pub mlp_ratio: usize,
    pub decoder_depth: usize,
    /// Depthwise conv width inside Mamba layers.
    pub conv_width: usize,
    /// Mamba expansion factor (e = expand * d_model).
    pub expand: usize,
    pub n_state: usize,
    /// Stop gradient at the pseudo-mask prompt fed to the decoder.
    pub prompt_grad_stop: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            c0: 16,
            kernels: [7, 5, 3],
            use_msd: true,
            use_mamba: true,
            patch: 8,
            dim: 64,
            depth: 4,
            heads: 4,
            inject_at: vec![0, 1, 2, 3],
            adapter_dim: 16,
            mlp_ratio: 4,
            decoder_depth: 2,
            conv_width: 4,
            expand: 2,
            n_state: 16,
            prompt_grad_stop: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch: usize,
    pub seed: u64,
    /// Also supervise the encoder pseudo mask during stage 2.
    pub stage2_aux_sup: bool,
    pub input_size: usize,
    pub precision: Precision,
    /// Draw a scale from {0.75, 1, 1.25} per step.
    pub multiscale: bool,
    /// Boundary-weight window at >= 96 px (scaled down proportionally
    /// below that).
    pub loss_window: usize,
    pub loss_gain: f64,
    pub loss_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs_stage1: 10,
            epochs_stage2: 20,
            batch: 4,
            seed: 1,
            stage2_aux_sup: false,
            input_size: 64,
            precision: Precision::F32,
            multiscale: true,
            loss_window: 31,
            loss_gain: 5.0,
            loss_eps: 1.0,
        }
    }
}

/// Synthetic dataset shape: blob statistics, camouflage contrast and the
/// texture family (0 = seen, 1 = unseen; the unseen family also shifts
/// the blob-size distribution).
#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub n: usize,
    pub n_test: usize,
    pub size: usize,
    pub contrast: f64,
    pub boundary_blur: f64,
    pub secondary_prob: f64,
    pub texture_family: u32,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            n: 200,
            n_test: 40,
            size: 64,
            contrast: 0.08,
            boundary_blur: 1.5,
            secondary_prob: 0.3,
            texture_family: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: GenSpec,
}

/// Table 4 / Table 5 style component toggles, applied on top of a config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Adapters only: no MSD (raw-image conv stem), no Mamba.
    Adapter,
    /// MSD without the Mamba interaction (identity gates).
    Msd,
    /// Full model.
    Full,
    Uni3,
    Uni5,
    Uni7,
    /// Alias of `Msd` in the kernel-size table.
    Multi,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "adapter" => Ablation::Adapter,
            "msd" => Ablation::Msd,
            "full" => Ablation::Full,
            "uni3" => Ablation::Uni3,
            "uni5" => Ablation::Uni5,
            "uni7" => Ablation::Uni7,
            "multi" => Ablation::Multi,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation `{other}` (expect adapter|msd|full|uni3|uni5|uni7|multi)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Ablation::Adapter => "adapter",
            Ablation::Msd => "msd",
            Ablation::Full => "full",
            Ablation::Uni3 => "uni3",
            Ablation::Uni5 => "uni5",
            Ablation::Uni7 => "uni7",
            Ablation::Multi => "multi",
        }
    }

    pub fn apply(&self, cfg: &mut ModelConfig) {
        match self {
            Ablation::Adapter => {
                cfg.use_msd = false;
                cfg.use_mamba = false;
            }
            Ablation::Msd | Ablation::Multi => {
                cfg.use_msd = true;
                cfg.use_mamba = false;
            }
            Ablation::Full => {
                cfg.use_msd = true;
                cfg.use_mamba = true;
            }
            Ablation::Uni3 => {
                cfg.use_msd = true;
                cfg.use_mamba = true;
                cfg.kernels = [3, 3, 3];
            }
            Ablation::Uni5 => {
                cfg.use_msd = true;
                cfg.use_mamba = true;
                cfg.kernels = [5, 5, 5];
            }
            Ablation::Uni7 => {
                cfg.use_msd = true;
                cfg.use_mamba = true;
                cfg.kernels = [7, 7, 7];
            }
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let bad = |msg: String| Err(Error::Config(msg));
        if m.c0 == 0 {
            return bad("c0 must be positive".into());
        }
        for &k in &m.kernels {
            if k % 2 == 0 || k == 0 {
                return bad(format!("kernel size {k} must be odd"));
            }
        }
        if m.dim % m.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", m.dim, m.heads));
        }
        if m.patch == 0 || t.input_size % m.patch != 0 {
            return bad(format!("patch {} must divide input_size {}", m.patch, t.input_size));
        }
        if m.inject_at.iter().any(|&i| i >= m.depth) {
            return bad(format!("inject_at {:?} exceeds depth {}", m.inject_at, m.depth));
        }
        if m.depth == 0 || m.decoder_depth == 0 {
            return bad("depth and decoder_depth must be positive".into());
        }
        if !(m.patch.is_power_of_two()) {
            return bad(format!("patch {} must be a power of two (prompt downsampling)", m.patch));
        }
        if t.lr <= 0.0 {
            return bad("lr must be positive".into());
        }
        if t.batch == 0 {
            return bad("batch must be positive".into());
        }
        if t.loss_window % 2 == 0 {
            return bad(format!("loss_window {} must be odd", t.loss_window));
        }
        if t.loss_eps <= 0.0 {
            return bad("loss_eps must be positive".into());
        }
        if d.contrast <= 0.0 {
            return bad("contrast must be positive".into());
        }
        if d.size < 32 {
            return bad(format!("size {} below minimum 32", d.size));
        }
        if d.texture_family > 1 {
            return bad(format!("texture_family {} (0 = seen, 1 = unseen)", d.texture_family));
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let mut s = String::new();
        let list = |xs: &[usize]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "c0 = {}", m.c0);
        let _ = writeln!(s, "kernels = {}", list(&m.kernels));
        let _ = writeln!(s, "use_msd = {}", m.use_msd);
        let _ = writeln!(s, "use_mamba = {}", m.use_mamba);
        let _ = writeln!(s, "patch = {}", m.patch);
        let _ = writeln!(s, "dim = {}", m.dim);
        let _ = writeln!(s, "depth = {}", m.depth);
        let _ = writeln!(s, "heads = {}", m.heads);
        let _ = writeln!(s, "inject_at = {}", list(&m.inject_at));
        let _ = writeln!(s, "adapter_dim = {}", m.adapter_dim);
        let _ = writeln!(s, "mlp_ratio = {}", m.mlp_ratio);
        let _ = writeln!(s, "decoder_depth = {}", m.decoder_depth);
        let _ = writeln!(s, "conv_width = {}", m.conv_width);
        let _ = writeln!(s, "expand = {}", m.expand);
        let _ = writeln!(s, "n_state = {}", m.n_state);
        let _ = writeln!(s, "prompt_grad_stop = {}", m.prompt_grad_stop);
        let _ = writeln!(s);
        let _ = writeln!(s, "[train]");
        let _ = writeln!(s, "lr = {}", t.lr);
        let _ = writeln!(s, "beta1 = {}", t.beta1);
        let _ = writeln!(s, "beta2 = {}", t.beta2);
        let _ = writeln!(s, "adam_eps = {}", t.adam_eps);
        let _ = writeln!(s, "epochs_stage1 = {}", t.epochs_stage1);
        let _ = writeln!(s, "epochs_stage2 = {}", t.epochs_stage2);
        let _ = writeln!(s, "batch = {}", t.batch);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "stage2_aux_sup = {}", t.stage2_aux_sup);
        let _ = writeln!(s, "input_size = {}", t.input_size);
        let _ = writeln!(s, "precision = {}", t.precision.as_str());
        let _ = writeln!(s, "multiscale = {}", t.multiscale);
        let _ = writeln!(s, "loss_window = {}", t.loss_window);
        let _ = writeln!(s, "loss_gain = {}", t.loss_gain);
        let _ = writeln!(s, "loss_eps = {}", t.loss_eps);
        let _ = writeln!(s);
        let _ = writeln!(s, "[data]");
        let _ = writeln!(s, "n = {}", d.n);
        let _ = writeln!(s, "n_test = {}", d.n_test);
        let _ = writeln!(s, "size = {}", d.size);
        let _ = writeln!(s, "contrast = {}", d.contrast);
        let _ = writeln!(s, "boundary_blur = {}", d.boundary_blur);
        let _ = writeln!(s, "secondary_prob = {}", d.secondary_prob);
        let _ = writeln!(s, "texture_family = {}", d.texture_family);
        s
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                match name {
                    "model" | "train" | "data" => section = name.to_string(),
                    other => return Err(Error::Config(format!("unknown section [{other}]"))),
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1)));
            };
            let key = key.trim();
            let value = value.trim();
            cfg.set(&section, key, value)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        fn p_usize(key: &str, v: &str) -> Result<usize> {
            v.parse().map_err(|_| Error::Config(format!("key `{key}`: bad integer `{v}`")))
        }
        fn p_u64(key: &str, v: &str) -> Result<u64> {
            v.parse().map_err(|_| Error::Config(format!("key `{key}`: bad integer `{v}`")))
        }
        fn p_f64(key: &str, v: &str) -> Result<f64> {
            v.parse().map_err(|_| Error::Config(format!("key `{key}`: bad number `{v}`")))
        }
        fn p_bool(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Config(format!("key `{key}`: bad bool `{v}`"))),
            }
        }
        fn p_list(key: &str, v: &str) -> Result<Vec<usize>> {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|x| p_usize(key, x.trim())).collect()
        }

        match (section, key) {
            ("model", "c0") => self.model.c0 = p_usize(key, value)?,
            ("model", "kernels") => {
                let ks = p_list(key, value)?;
                if ks.len() != 3 {
                    return Err(Error::Config(format!("key `kernels`: want 3 entries, got {}", ks.len())));
                }
                self.model.kernels = [ks[0], ks[1], ks[2]];
            }
            ("model", "use_msd") => self.model.use_msd = p_bool(key, value)?,
            ("model", "use_mamba") => self.model.use_mamba = p_bool(key, value)?,
            ("model", "patch") => self.model.patch = p_usize(key, value)?,
            ("model", "dim") => self.model.dim = p_usize(key, value)?,
            ("model", "depth") => self.model.depth = p_usize(key, value)?,
            ("model", "heads") => self.model.heads = p_usize(key, value)?,
            ("model", "inject_at") => self.model.inject_at = p_list(key, value)?,
            ("model", "adapter_dim") => self.model.adapter_dim = p_usize(key, value)?,
            ("model", "mlp_ratio") => self.model.mlp_ratio = p_usize(key, value)?,
            ("model", "decoder_depth") => self.model.decoder_depth = p_usize(key, value)?,
            ("model", "conv_width") => self.model.conv_width = p_usize(key, value)?,
            ("model", "expand") => self.model.expand = p_usize(key, value)?,
            ("model", "n_state") => self.model.n_state = p_usize(key, value)?,
            ("model", "prompt_grad_stop") => self.model.prompt_grad_stop = p_bool(key, value)?,
            ("train", "lr") => self.train.lr = p_f64(key, value)?,
            ("train", "beta1") => self.train.beta1 = p_f64(key, value)?,
            ("train", "beta2") => self.train.beta2 = p_f64(key, value)?,
            ("train", "adam_eps") => self.train.adam_eps = p_f64(key, value)?,
            ("train", "epochs_stage1") => self.train.epochs_stage1 = p_usize(key, value)?,
            ("train", "epochs_stage2") => self.train.epochs_stage2 = p_usize(key, value)?,
            ("train", "batch") => self.train.batch = p_usize(key, value)?,
            ("train", "seed") => self.train.seed = p_u64(key, value)?,
            ("train", "stage2_aux_sup") => self.train.stage2_aux_sup = p_bool(key, value)?,
            ("train", "input_size") => self.train.input_size = p_usize(key, value)?,
            ("train", "precision") => {
                self.train.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("key `precision`: `{value}` (want f32|f64)"))),
                }
            }
            ("train", "multiscale") => self.train.multiscale = p_bool(key, value)?,
            ("train", "loss_window") => self.train.loss_window = p_usize(key, value)?,
            ("train", "loss_gain") => self.train.loss_gain = p_f64(key, value)?,
            ("train", "loss_eps") => self.train.loss_eps = p_f64(key, value)?,
            ("data", "n") => self.data.n = p_usize(key, value)?,
            ("data", "n_test") => self.data.n_test = p_usize(key, value)?,
            ("data", "size") => self.data.size = p_usize(key, value)?,
            ("data", "contrast") => self.data.contrast = p_f64(key, value)?,
            ("data", "boundary_blur") => self.data.boundary_blur = p_f64(key, value)?,
            ("data", "secondary_prob") => self.data.secondary_prob = p_f64(key, value)?,
            ("data", "texture_family") => self.data.texture_family = p_u64(key, value)? as u32,
            ("", k) => return Err(Error::Config(format!("key `{k}` appears before any [section] header"))),
            (s, k) => return Err(Error::Config(format!("unknown key `{k}` in section [{s}]"))),
        }
        Ok(())
    }
}
