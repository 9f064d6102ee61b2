//! Finite-difference gradient suite over every normalization layer, the KL
//! term and a tiny full network.

use std::fmt;

use rand::Rng as _;

use crate::gradcheck::{gradcheck, GradcheckReport, DEFAULT_STEP};
use crate::net::{Network, NetworkConfig, NormVariant, Site};
use crate::norm::{
    bwrfn, ifn, kl_to_standard_normal, layer_norm, rfn, wrfn, NoiseMode, NormError, RelaxationConfig,
    VariationalWeights, DEFAULT_EPSILON,
};
use crate::param::{ParamId, ParamKind, ParamStore};
use crate::rng::{stream, Rng, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};
use crate::train::{elbo_minibatch_loss, McNoise, TrainError};

/// Relative tolerance for layers and the full network.
pub const LAYER_TOLERANCE: f64 = 1e-4;
/// Relative tolerance for the KL term.
pub const KL_TOLERANCE: f64 = 1e-6;

const INPUT_SHAPE: [usize; 4] = [2, 3, 6, 7];

#[derive(Clone, Debug)]
pub struct SuiteLine {
    pub name: String,
    pub tolerance: f64,
    pub report: GradcheckReport,
}

impl SuiteLine {
    pub fn passed(&self) -> bool {
        self.report.passed(self.tolerance)
    }
}

impl fmt::Display for SuiteLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\ttol {:.0e}\t{}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.tolerance,
            self.report
        )
    }
}

fn norm_err(e: NormError) -> TensorError {
    match e {
        NormError::Tensor(t) => t,
        NormError::Config(m) => TensorError::Usage(m),
    }
}

fn train_err(e: TrainError) -> TensorError {
    TensorError::Usage(e.to_string())
}

fn random(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `sum(r * y)` for a fixed random `r`, so every output coordinate matters.
fn project(tape: &mut Tape, y: Var, r: &Tensor) -> crate::tensor::Result<Var> {
    let r = tape.constant(r.clone())?;
    let p = tape.mul(y, r)?;
    tape.sum_all(p)
}

struct LayerFixture {
    store: ParamStore,
    x: ParamId,
    r: Tensor,
    rng: Rng,
}

impl LayerFixture {
    fn new(seed: u64) -> Self {
        let mut rng = stream(seed, Stream::Custom(0x6763));
        let mut store = ParamStore::new();
        let x = store
            .register("x", random(&mut rng, &INPUT_SHAPE, -2.0, 2.0), ParamKind::Weight)
            .expect("fresh store");
        let r = random(&mut rng, &INPUT_SHAPE, -1.0, 1.0);
        LayerFixture { store, x, r, rng }
    }
}

fn layer_line<F>(name: &str, tolerance: f64, seed: u64, f: F) -> SuiteLine
where
    F: Fn(&mut Tape, Var) -> std::result::Result<Var, NormError>,
{
    let mut fx = LayerFixture::new(seed);
    let (x, r) = (fx.x, fx.r.clone());
    let report = gradcheck(
        &mut fx.store,
        &[x],
        |t, s| {
            let xv = t.param(s, x)?;
            let y = f(t, xv).map_err(norm_err)?;
            project(t, y, &r)
        },
        DEFAULT_STEP,
    );
    SuiteLine { name: name.into(), tolerance, report }
}

fn wrfn_line(tolerance: f64, seed: u64) -> SuiteLine {
    let mut fx = LayerFixture::new(seed);
    let f = INPUT_SHAPE[2];
    let w1 = random(&mut fx.rng, &[f], -1.5, 1.5);
    let w2 = random(&mut fx.rng, &[f], -1.5, 1.5);
    let w1 = fx.store.register("w1", w1, ParamKind::Weight).expect("fresh name");
    let w2 = fx.store.register("w2", w2, ParamKind::Weight).expect("fresh name");
    let (x, r) = (fx.x, fx.r.clone());
    let cfg = RelaxationConfig::default();
    let report = gradcheck(
        &mut fx.store,
        &[x, w1, w2],
        |t, s| {
            let (xv, a, b) = (t.param(s, x)?, t.param(s, w1)?, t.param(s, w2)?);
            let y = wrfn(t, xv, &cfg, a, b).map_err(norm_err)?;
            project(t, y, &r)
        },
        DEFAULT_STEP,
    );
    SuiteLine { name: "WRFN".into(), tolerance, report }
}

fn posterior(store: &mut ParamStore, rng: &mut Rng, n_freq: usize) -> VariationalWeights {
    let vw = VariationalWeights::register(store, "site", n_freq, rng).expect("fresh names");
    // move away from the initial sigma so ln sigma gradients are not tiny
    let ls = random(rng, &[2 * n_freq], -1.0, 0.0);
    let mu = random(rng, &[2 * n_freq], -1.0, 1.0);
    store.set_value(vw.log_sigma, ls).expect("same shape");
    store.set_value(vw.mu, mu).expect("same shape");
    vw
}

fn bwrfn_line(tolerance: f64, seed: u64) -> SuiteLine {
    let mut fx = LayerFixture::new(seed);
    let f = INPUT_SHAPE[2];
    let vw = posterior(&mut fx.store, &mut fx.rng, f);
    let eps: Vec<f64> = crate::norm::standard_normal(&mut fx.rng, 2 * f);
    let (x, r) = (fx.x, fx.r.clone());
    let cfg = RelaxationConfig::default();
    let report = gradcheck(
        &mut fx.store,
        &[x, vw.mu, vw.log_sigma],
        |t, s| {
            let xv = t.param(s, x)?;
            let y = bwrfn(t, s, xv, &cfg, &vw, NoiseMode::Fixed(&eps)).map_err(norm_err)?;
            project(t, y, &r)
        },
        DEFAULT_STEP,
    );
    SuiteLine { name: "BWRFN (fixed noise)".into(), tolerance, report }
}

fn kl_line(tolerance: f64, seed: u64) -> SuiteLine {
    let mut rng = stream(seed, Stream::Custom(0x6b6c));
    let mut store = ParamStore::new();
    let vw = posterior(&mut store, &mut rng, 5);
    let report = gradcheck(
        &mut store,
        &[vw.mu, vw.log_sigma],
        |t, s| kl_to_standard_normal(t, s, &vw).map_err(norm_err),
        DEFAULT_STEP,
    );
    SuiteLine { name: "KL".into(), tolerance, report }
}

/// Configuration of the network-level check: two residual blocks of width
/// 4 on 8 frequency bins, BWRFN at every available site.
pub fn tiny_network_config() -> NetworkConfig {
    NetworkConfig {
        norm_variant: NormVariant::Bwrfn,
        insertion_points: vec![Site::PreConv, Site::L1, Site::L2],
        widths: vec![4, 4],
        embedding_dim: 6,
        num_speakers: 3,
        n_freq: 8,
        relaxation: RelaxationConfig::default(),
    }
}

fn network_line(tolerance: f64, seed: u64) -> SuiteLine {
    let mut net = Network::build(&tiny_network_config(), &mut stream(seed, Stream::Init)).expect("valid config");
    let mut rng = stream(seed, Stream::Custom(0x6e6574));
    // spread the posteriors so the noise path carries real gradient
    for (_, vw) in net.variational_sites() {
        let n = vw.len();
        let store = net.params_mut();
        store.set_value(vw.log_sigma, random(&mut rng, &[n], -1.5, -0.5)).expect("same shape");
        store.set_value(vw.mu, random(&mut rng, &[n], -1.0, 1.0)).expect("same shape");
    }
    let x = random(&mut rng, &[2, 1, 8, 10], -2.0, 2.0);
    let labels = [2, 0];
    let noise = vec![net.draw_noise(&mut rng)];
    let ids: Vec<ParamId> = net.params().iter().map(|(id, _)| id).collect();
    let mut store = net.params().clone();
    let report = gradcheck(
        &mut store,
        &ids,
        |t, s| {
            // gradcheck perturbs its own copy of the parameters, so the
            // network is re-pointed at that copy for every evaluation
            let mut probe = net.clone();
            *probe.params_mut() = s.clone();
            let l = elbo_minibatch_loss(t, &probe, &x, &labels, 1, McNoise::Fixed(&noise), 0.1).map_err(train_err)?;
            Ok(l.loss)
        },
        DEFAULT_STEP,
    );
    SuiteLine { name: "tiny network (BWRFN, fixed noise)".into(), tolerance, report }
}

/// Every check at the given layer tolerance; the KL line uses
/// `min(tolerance, KL_TOLERANCE)`.
pub fn run_suite(tolerance: f64, seed: u64) -> Vec<SuiteLine> {
    let eps = DEFAULT_EPSILON;
    let mut lines = vec![
        layer_line("IFN", tolerance, seed, |t, x| ifn(t, x, eps)),
        layer_line("LN", tolerance, seed, |t, x| layer_norm(t, x, eps)),
    ];
    for lambda in [0.0, 0.5, 1.0] {
        let cfg = RelaxationConfig { lambda, epsilon: eps };
        lines.push(layer_line(&format!("RFN lambda={lambda}"), tolerance, seed, move |t, x| rfn(t, x, &cfg)));
    }
    lines.push(wrfn_line(tolerance, seed));
    lines.push(bwrfn_line(tolerance, seed));
    lines.push(kl_line(tolerance.min(KL_TOLERANCE), seed));
    lines.push(network_line(tolerance, seed));
    lines
}
