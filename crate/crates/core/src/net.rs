//! Miniature residual speaker-embedding network.
//!
//! Layout: a 3x3 stem convolution, up to four residual stages of one basic
//! block each (two 3x3 convolutions, stride 2 from the second stage on),
//! average pooling over time and then frequency, a linear embedding layer,
//! and a linear speaker classifier. Normalization sites sit before the stem
//! (`pre-conv`) and after each residual block (`L1`..`L4`).

use std::collections::BTreeSet;
use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::norm::{
    bwrfn, kl_to_standard_normal, kl_value, rfn, DeterministicWeights, NoiseMode, NormError,
    RelaxationConfig, VariationalWeights,
};
use crate::param::{ParamId, ParamKind, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{ElementwiseOp, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl From<NormError> for NetError {
    fn from(e: NormError) -> Self {
        match e {
            NormError::Config(m) => NetError::Config(m),
            NormError::Tensor(t) => NetError::Tensor(t),
        }
    }
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormVariant {
    None,
    Rfn,
    Wrfn,
    Bwrfn,
}

/// Where a normalization layer may be inserted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Site {
    #[serde(rename = "pre-conv")]
    PreConv,
    L1,
    L2,
    L3,
    L4,
}

impl Site {
    pub const ALL: [Site; 5] = [Site::PreConv, Site::L1, Site::L2, Site::L3, Site::L4];

    /// Residual block after which the site sits, `None` for pre-conv.
    pub fn block(self) -> Option<usize> {
        match self {
            Site::PreConv => None,
            Site::L1 => Some(0),
            Site::L2 => Some(1),
            Site::L3 => Some(2),
            Site::L4 => Some(3),
        }
    }

    pub fn after_block(k: usize) -> Site {
        [Site::L1, Site::L2, Site::L3, Site::L4][k]
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Site::PreConv => "pre-conv",
            Site::L1 => "L1",
            Site::L2 => "L2",
            Site::L3 => "L3",
            Site::L4 => "L4",
        })
    }
}

impl std::str::FromStr for Site {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self> {
        Site::ALL
            .into_iter()
            .find(|site| site.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| NetError::Config(format!("unknown insertion point {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub norm_variant: NormVariant,
    pub insertion_points: Vec<Site>,
    /// Channel width of each residual stage (one to four stages).
    pub widths: Vec<usize>,
    pub embedding_dim: usize,
    pub num_speakers: usize,
    /// Frequency bins of the input features.
    pub n_freq: usize,
    pub relaxation: RelaxationConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            norm_variant: NormVariant::Bwrfn,
            insertion_points: Site::ALL.to_vec(),
            widths: vec![8, 16, 32, 64],
            embedding_dim: 64,
            num_speakers: 20,
            n_freq: 40,
            relaxation: RelaxationConfig::default(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() > 4 || self.widths.contains(&0) {
            return Err(NetError::Config(format!(
                "widths must list one to four positive stage widths, got {:?}",
                self.widths
            )));
        }
        if self.embedding_dim == 0 {
            return Err(NetError::Config("embedding_dim must be positive".into()));
        }
        if self.num_speakers < 2 {
            return Err(NetError::Config(format!(
                "num_speakers must be at least 2, got {}",
                self.num_speakers
            )));
        }
        if self.n_freq == 0 {
            return Err(NetError::Config("n_freq must be positive".into()));
        }
        let mut seen = BTreeSet::new();
        for &site in &self.insertion_points {
            if !seen.insert(site) {
                return Err(NetError::Config(format!("insertion point {site} listed twice")));
            }
            if let Some(k) = site.block() {
                if k >= self.widths.len() {
                    return Err(NetError::Config(format!(
                        "insertion point {site} needs {} residual stages, network has {}",
                        k + 1,
                        self.widths.len()
                    )));
                }
            }
        }
        self.relaxation.validate()?;
        Ok(())
    }

    /// Active sites in forward order (empty for `NormVariant::None`).
    pub fn active_sites(&self) -> Vec<Site> {
        if self.norm_variant == NormVariant::None {
            return Vec::new();
        }
        let set: BTreeSet<Site> = self.insertion_points.iter().copied().collect();
        set.into_iter().collect()
    }

    pub fn stage_stride(stage: usize) -> usize {
        if stage == 0 {
            1
        } else {
            2
        }
    }

    /// Frequency bins seen by a site.
    pub fn site_freq(&self, site: Site) -> usize {
        match site.block() {
            None => self.n_freq,
            Some(k) => (0..=k).fold(self.n_freq, |f, s| (f - 1) / Self::stage_stride(s) + 1),
        }
    }
}

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn register(
        store: &mut ParamStore,
        name: &str,
        shape: [usize; 4],
        stride: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let fan_in = shape[1] * shape[2] * shape[3];
        let weight = store.register(format!("{name}.weight"), he_init(&shape, fan_in, rng), ParamKind::Weight)?;
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[shape[0]]), ParamKind::Weight)?;
        Ok(Conv { weight, bias, stride, pad: shape[2] / 2 })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        let y = tape.conv2d(x, w, self.stride, self.pad)?;
        Ok(tape.elementwise_along(ElementwiseOp::Add, y, b, 1)?)
    }
}

#[derive(Clone, Debug)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    fn register(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut dyn RngCore) -> Result<Self> {
        let weight = store.register(format!("{name}.weight"), he_init(&[inp, out], inp, rng), ParamKind::Weight)?;
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[out]), ParamKind::Weight)?;
        Ok(Linear { weight, bias })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        let y = tape.matmul(x, w)?;
        Ok(tape.elementwise_along(ElementwiseOp::Add, y, b, 1)?)
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv1: Conv,
    conv2: Conv,
    shortcut: Option<Conv>,
}

impl Block {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(tape, store, h)?;
        let skip = match &self.shortcut {
            Some(c) => c.forward(tape, store, x)?,
            None => x,
        };
        let y = tape.add(h, skip)?;
        Ok(tape.relu(y)?)
    }
}

#[derive(Clone, Debug)]
pub enum NormLayer {
    Rfn,
    Wrfn(DeterministicWeights),
    Bwrfn(VariationalWeights),
}

fn he_init(shape: &[usize], fan_in: usize, rng: &mut dyn RngCore) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid normal");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

/// Reparameterization noise for every BWRFN site of a network.
pub enum NetNoise<'a> {
    Sample(&'a mut dyn RngCore),
    /// One noise vector per BWRFN site, in forward order.
    Fixed(&'a [Vec<f64>]),
    Mean,
}

/// How embeddings are read out at inference.
pub enum EmbedMode<'a> {
    /// Plug-in posterior mean, `w = mu`.
    Mean,
    /// Average of `samples` embeddings under fresh posterior draws.
    MonteCarlo { samples: usize, rng: &'a mut dyn RngCore },
}

#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    store: ParamStore,
    stem: Conv,
    blocks: Vec<Block>,
    sites: Vec<(Site, NormLayer)>,
    embed: Linear,
    classifier: Linear,
}

impl Network {
    /// Build with He-initialized weights. The convolution and linear
    /// weights depend only on the widths and `rng`, not on the
    /// normalization variant.
    pub fn build(config: &NetworkConfig, rng: &mut dyn RngCore) -> Result<Self> {
        config.validate()?;
        let mut site_rng = Rng::seed_from_u64(rng.next_u64());
        let mut store = ParamStore::new();
        let w0 = config.widths[0];
        let stem = Conv::register(&mut store, "stem", [w0, 1, 3, 3], 1, rng)?;
        let mut blocks = Vec::new();
        let mut c_in = w0;
        for (k, &c_out) in config.widths.iter().enumerate() {
            let stride = NetworkConfig::stage_stride(k);
            let name = format!("block{}", k + 1);
            let conv1 = Conv::register(&mut store, &format!("{name}.conv1"), [c_out, c_in, 3, 3], stride, rng)?;
            let conv2 = Conv::register(&mut store, &format!("{name}.conv2"), [c_out, c_out, 3, 3], 1, rng)?;
            let shortcut = if stride != 1 || c_in != c_out {
                Some(Conv::register(&mut store, &format!("{name}.shortcut"), [c_out, c_in, 1, 1], stride, rng)?)
            } else {
                None
            };
            blocks.push(Block { conv1, conv2, shortcut });
            c_in = c_out;
        }
        let mut sites = Vec::new();
        for site in config.active_sites() {
            let prefix = format!("site.{site}");
            let f = config.site_freq(site);
            let layer = match config.norm_variant {
                NormVariant::None => unreachable!("no active sites without a variant"),
                NormVariant::Rfn => NormLayer::Rfn,
                NormVariant::Wrfn => NormLayer::Wrfn(DeterministicWeights::register(&mut store, &prefix, f)?),
                NormVariant::Bwrfn => {
                    NormLayer::Bwrfn(VariationalWeights::register(&mut store, &prefix, f, &mut site_rng)?)
                }
            };
            sites.push((site, layer));
        }
        let embed = Linear::register(&mut store, "embed", c_in, config.embedding_dim, rng)?;
        let classifier = Linear::register(&mut store, "classifier", config.embedding_dim, config.num_speakers, rng)?;
        Ok(Network { config: config.clone(), store, stem, blocks, sites, embed, classifier })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn sites(&self) -> &[(Site, NormLayer)] {
        &self.sites
    }

    /// Posterior parameters of every BWRFN site, in forward order.
    pub fn variational_sites(&self) -> Vec<(Site, VariationalWeights)> {
        self.sites
            .iter()
            .filter_map(|(s, l)| match l {
                NormLayer::Bwrfn(vw) => Some((*s, *vw)),
                _ => None,
            })
            .collect()
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let s = tape.value(x).shape();
        if s.len() != 4 || s[1] != 1 || s[2] != self.config.n_freq {
            return Err(NetError::Tensor(TensorError::Shape(format!(
                "network expects (N, 1, {}, T) input, got {s:?}",
                self.config.n_freq
            ))));
        }
        Ok(())
    }

    fn apply_site(
        &self,
        tape: &mut Tape,
        idx: usize,
        x: Var,
        noise: &mut NetNoise<'_>,
        bw_index: &mut usize,
    ) -> Result<Var> {
        let cfg = &self.config.relaxation;
        Ok(match &self.sites[idx].1 {
            NormLayer::Rfn => rfn(tape, x, cfg)?,
            NormLayer::Wrfn(dw) => dw.forward(tape, &self.store, x, cfg)?,
            NormLayer::Bwrfn(vw) => {
                let mode = match noise {
                    NetNoise::Mean => NoiseMode::Mean,
                    NetNoise::Sample(rng) => NoiseMode::Sample(&mut **rng),
                    NetNoise::Fixed(all) => NoiseMode::Fixed(all.get(*bw_index).ok_or_else(|| {
                        NetError::Tensor(TensorError::Shape(format!(
                            "fixed noise given for {} BWRFN sites, network has more",
                            all.len()
                        )))
                    })?),
                };
                *bw_index += 1;
                bwrfn(tape, &self.store, x, cfg, vw, mode)?
            }
        })
    }

    fn maybe_site(
        &self,
        tape: &mut Tape,
        site: Site,
        x: Var,
        noise: &mut NetNoise<'_>,
        bw_index: &mut usize,
    ) -> Result<Var> {
        match self.sites.iter().position(|(s, _)| *s == site) {
            Some(i) => self.apply_site(tape, i, x, noise, bw_index),
            None => Ok(x),
        }
    }

    /// `(N, embedding_dim)` pre-classifier embeddings.
    pub fn forward_embedding(&self, tape: &mut Tape, x: Var, noise: &mut NetNoise<'_>) -> Result<Var> {
        self.check_input(tape, x)?;
        if let NetNoise::Fixed(all) = noise {
            let want = self.variational_sites().len();
            if all.len() != want {
                return Err(NetError::Tensor(TensorError::Shape(format!(
                    "fixed noise given for {} BWRFN sites, network has {want}",
                    all.len()
                ))));
            }
        }
        let mut bw = 0;
        let mut h = self.maybe_site(tape, Site::PreConv, x, noise, &mut bw)?;
        h = self.stem.forward(tape, &self.store, h)?;
        h = tape.relu(h)?;
        for (k, block) in self.blocks.iter().enumerate() {
            h = block.forward(tape, &self.store, h)?;
            h = self.maybe_site(tape, Site::after_block(k), h, noise, &mut bw)?;
        }
        let pooled = tape.reduce_mean(h, &[3], false)?;
        let pooled = tape.reduce_mean(pooled, &[2], false)?;
        self.embed.forward(tape, &self.store, pooled)
    }

    /// `(N, num_speakers)` unnormalized speaker scores.
    pub fn forward_logits(&self, tape: &mut Tape, x: Var, noise: &mut NetNoise<'_>) -> Result<Var> {
        let e = self.forward_embedding(tape, x, noise)?;
        self.classifier.forward(tape, &self.store, e)
    }

    /// Logits of a batch without tracing.
    pub fn logits(&self, x: &Tensor, mut noise: NetNoise<'_>) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone())?;
        let out = self.forward_logits(&mut tape, xv, &mut noise)?;
        Ok(tape.value(out).clone())
    }

    /// `(N, embedding_dim)` embeddings of a batch without tracing.
    pub fn embeddings(&self, x: &Tensor, mode: EmbedMode<'_>) -> Result<Tensor> {
        let run = |noise: &mut NetNoise<'_>| -> Result<Tensor> {
            let mut tape = Tape::inference();
            let xv = tape.constant(x.clone())?;
            let out = self.forward_embedding(&mut tape, xv, noise)?;
            Ok(tape.value(out).clone())
        };
        match mode {
            EmbedMode::Mean => run(&mut NetNoise::Mean),
            EmbedMode::MonteCarlo { samples, rng } => {
                if samples == 0 {
                    return Err(NetError::Config("Monte Carlo embedding needs at least one sample".into()));
                }
                let mut acc = run(&mut NetNoise::Sample(&mut *rng))?;
                for _ in 1..samples {
                    let e = run(&mut NetNoise::Sample(&mut *rng))?;
                    acc.data_mut().iter_mut().zip(e.data()).for_each(|(a, b)| *a += b);
                }
                let inv = 1.0 / samples as f64;
                acc.data_mut().iter_mut().for_each(|a| *a *= inv);
                Ok(acc)
            }
        }
    }

    /// Embedding of one `(1, F, T)` utterance.
    pub fn extract_embedding(&self, features: &Tensor, mode: EmbedMode<'_>) -> Result<Vec<f64>> {
        let s = features.shape();
        let x = match s.len() {
            3 => features.reshape(&[1, s[0], s[1], s[2]])?,
            _ => features.clone(),
        };
        Ok(self.embeddings(&x, mode)?.into_data())
    }

    /// Summed KL of every BWRFN site to the standard normal prior, traced.
    /// `None` when the network has no variational parameters.
    pub fn kl_total(&self, tape: &mut Tape) -> Result<Option<Var>> {
        let mut total: Option<Var> = None;
        for (_, vw) in self.variational_sites() {
            let kl = kl_to_standard_normal(tape, &self.store, &vw)?;
            total = Some(match total {
                Some(t) => tape.add(t, kl)?,
                None => kl,
            });
        }
        Ok(total)
    }

    /// Summed KL as a plain value.
    pub fn kl_total_value(&self) -> f64 {
        self.variational_sites()
            .iter()
            .map(|(_, vw)| {
                kl_value(self.store.get(vw.mu).value.data(), self.store.get(vw.log_sigma).value.data())
            })
            .sum()
    }

    /// Fresh standard normal noise for every BWRFN site.
    pub fn draw_noise(&self, rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
        self.variational_sites()
            .iter()
            .map(|(_, vw)| crate::norm::standard_normal(rng, vw.len()))
            .collect()
    }
}
