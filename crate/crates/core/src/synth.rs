//! Seeded synthetic multi-domain speaker data.
//!
//! Utterance `u` of speaker `s` recorded in domain `d` is
//!
//! ```text
//! x[f, t] = offset_d[f] + scale_d[f] * (template_s[f] + a_u * m_u(t) * shape_s[f])
//!         + noise_level * n[f, t]
//! ```
//!
//! where `m_u(t) = sin(2 pi (phase_u + rate_u * t))` and `n ~ N(0, 1)`.
//! Speakers live in the spectral template and modulation shape, domains in
//! a per-frequency affine map. The last domain is held out as unseen.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng as _, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{Label, Trial};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_speakers: usize,
    pub num_domains: usize,
    pub utts_per_pair: usize,
    pub n_freq: usize,
    pub n_frames: usize,
    pub noise_level: f64,
    /// Standard deviation of the per-frequency domain offsets.
    pub offset_std: f64,
    /// Standard deviation of the log of the per-frequency domain scales.
    pub log_scale_std: f64,
    /// Trials per split (half target, half nontarget).
    pub num_trials: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_speakers: 20,
            num_domains: 4,
            utts_per_pair: 5,
            n_freq: 40,
            n_frames: 32,
            noise_level: 0.5,
            offset_std: 2.0,
            log_scale_std: 0.5,
            num_trials: 400,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers < 2 || self.num_domains < 2 {
            return Err(SynthError::Config(format!(
                "need at least 2 speakers and 2 domains, got {} and {}",
                self.num_speakers, self.num_domains
            )));
        }
        if self.utts_per_pair == 0 || self.n_freq == 0 || self.n_frames == 0 {
            return Err(SynthError::Config("utts_per_pair, n_freq and n_frames must be positive".into()));
        }
        for (name, v) in [
            ("noise_level", self.noise_level),
            ("offset_std", self.offset_std),
            ("log_scale_std", self.log_scale_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SynthError::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
    pub noise_level: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub speaker: usize,
    pub domain: usize,
    /// `(1, F, T)`.
    pub features: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Seen,
    Unseen,
    Overall,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Seen => "seen",
            Split::Unseen => "unseen",
            Split::Overall => "overall",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub utterances: Vec<Utterance>,
    pub domains: Vec<DomainSpec>,
    pub seen_domains: BTreeSet<usize>,
    pub unseen_domains: BTreeSet<usize>,
    pub num_speakers: usize,
}

impl DomainDataset {
    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        self.utterances
            .iter()
            .filter(|u| match split {
                Split::Seen => self.seen_domains.contains(&u.domain),
                Split::Unseen => self.unseen_domains.contains(&u.domain),
                Split::Overall => true,
            })
            .collect()
    }
}

/// Per-domain affine effects, drawn from their own stream so that the
/// speaker content does not depend on them.
pub fn domain_specs(cfg: &SynthConfig, seed: u64) -> Vec<DomainSpec> {
    let mut rng = stream(seed, Stream::Custom(0x444f4d));
    (0..cfg.num_domains)
        .map(|d| {
            let offset = (0..cfg.n_freq).map(|_| cfg.offset_std * normal(&mut rng)).collect();
            let scale = (0..cfg.n_freq).map(|_| (cfg.log_scale_std * normal(&mut rng)).exp()).collect();
            DomainSpec { domain_id: d, offset, scale, noise_level: cfg.noise_level }
        })
        .collect()
}

fn normal(rng: &mut dyn RngCore) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gen_dataset(cfg: &SynthConfig, seed: u64) -> Result<DomainDataset> {
    gen_dataset_with_domains(cfg, domain_specs(cfg, seed), seed)
}

/// Generate with caller-supplied domain effects (one per domain).
pub fn gen_dataset_with_domains(cfg: &SynthConfig, domains: Vec<DomainSpec>, seed: u64) -> Result<DomainDataset> {
    cfg.validate()?;
    if domains.len() != cfg.num_domains {
        return Err(SynthError::Config(format!(
            "{} domain specs for {} domains",
            domains.len(),
            cfg.num_domains
        )));
    }
    for d in &domains {
        if d.offset.len() != cfg.n_freq || d.scale.len() != cfg.n_freq {
            return Err(SynthError::Config(format!("domain {} spec does not cover {} bins", d.domain_id, cfg.n_freq)));
        }
        if d.scale.iter().any(|&s| !(s > 0.0)) {
            return Err(SynthError::Config(format!("domain {} has a non-positive scale", d.domain_id)));
        }
    }
    let (f_n, t_n) = (cfg.n_freq, cfg.n_frames);
    let mut rng = stream(seed, Stream::Data);
    let templates: Vec<Vec<f64>> = (0..cfg.num_speakers).map(|_| (0..f_n).map(|_| normal(&mut rng)).collect()).collect();
    let shapes: Vec<Vec<f64>> = (0..cfg.num_speakers).map(|_| (0..f_n).map(|_| normal(&mut rng)).collect()).collect();

    let mut utterances = Vec::with_capacity(cfg.num_speakers * cfg.num_domains * cfg.utts_per_pair);
    for (d, dom) in domains.iter().enumerate() {
        for s in 0..cfg.num_speakers {
            for u in 0..cfg.utts_per_pair {
                let amp = rng.random_range(0.5..1.5);
                let phase = rng.random::<f64>();
                let rate = rng.random_range(0.03..0.15);
                let m: Vec<f64> =
                    (0..t_n).map(|t| (std::f64::consts::TAU * (phase + rate * t as f64)).sin()).collect();
                let mut data = Vec::with_capacity(f_n * t_n);
                for f in 0..f_n {
                    for &mt in &m {
                        // noise is always drawn so that noise_level = 0 keeps the stream aligned
                        let n = normal(&mut rng);
                        let clean = templates[s][f] + amp * mt * shapes[s][f];
                        data.push(dom.offset[f] + dom.scale[f] * clean + dom.noise_level * n);
                    }
                }
                utterances.push(Utterance {
                    utt_id: format!("s{s:03}_d{d}_u{u:02}"),
                    speaker: s,
                    domain: d,
                    features: Tensor::new(vec![1, f_n, t_n], data).expect("shape matches data"),
                });
            }
        }
    }
    let unseen = cfg.num_domains - 1;
    Ok(DomainDataset {
        utterances,
        domains,
        seen_domains: (0..unseen).collect(),
        unseen_domains: BTreeSet::from([unseen]),
        num_speakers: cfg.num_speakers,
    })
}

/// Balanced target/nontarget trials within one split: `num_trials / 2`
/// targets (rounded up) and the rest nontargets, sampled without
/// replacement from all distinct pairs.
pub fn make_trials(data: &DomainDataset, split: Split, num_trials: usize, seed: u64) -> Result<Vec<Trial>> {
    let utts = data.split(split);
    if utts.is_empty() {
        return Err(SynthError::Data(format!("split {} is empty", split.name())));
    }
    let (mut tar, mut non) = (Vec::new(), Vec::new());
    for i in 0..utts.len() {
        for j in i + 1..utts.len() {
            if utts[i].speaker == utts[j].speaker {
                tar.push((i, j));
            } else {
                non.push((i, j));
            }
        }
    }
    let n_tar = num_trials.div_ceil(2);
    let n_non = num_trials - n_tar;
    if tar.len() < n_tar || non.len() < n_non {
        return Err(SynthError::Data(format!(
            "split {} has {} target and {} nontarget pairs, {n_tar} and {n_non} requested",
            split.name(),
            tar.len(),
            non.len()
        )));
    }
    let mut rng = stream(seed, Stream::Trials);
    let mut picked: Vec<(usize, usize, Label)> = Vec::with_capacity(num_trials);
    for k in sample(&mut rng, tar.len(), n_tar).into_iter() {
        picked.push((tar[k].0, tar[k].1, Label::Target));
    }
    for k in sample(&mut rng, non.len(), n_non).into_iter() {
        picked.push((non[k].0, non[k].1, Label::Nontarget));
    }
    picked.sort_unstable_by_key(|p| (p.0, p.1));
    Ok(picked
        .into_iter()
        .map(|(i, j, label)| Trial::new(utts[i].utt_id.clone(), utts[j].utt_id.clone(), label))
        .collect())
}
