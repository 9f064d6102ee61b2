mod common;

use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bwrfn::metrics::{compute_eer, compute_min_dcf, DcfParams};
use bwrfn::net::{EmbedMode, NetNoise, Network, NetworkConfig, NormVariant, Site};
use bwrfn::norm::{ifn, kl_value, wrfn, RelaxationConfig, DEFAULT_EPSILON, INIT_SIGMA};
use bwrfn::rng::{stream, Stream};
use bwrfn::synth::{gen_dataset, SynthConfig};
use bwrfn::tensor::ElementwiseOp;
use bwrfn::train::{elbo_minibatch_loss, sgd_step, McNoise, OptimizerState};
use bwrfn::{ParamKind, ParamStore, Tape, Tensor, Var};

use common::{eer_oracle, min_dcf_oracle, scored};

/// Scores on a grid of 1/16 so ties occur and affine maps are exact.
fn score_sets() -> impl Strategy<Value = Vec<(f64, bool)>> {
    prop::collection::vec((-48i32..48, any::<bool>()), 2..400).prop_map(|mut v| {
        v[0].1 = true;
        v[1].1 = false;
        v.into_iter().map(|(s, l)| (s as f64 / 16.0, l)).collect()
    })
}

proptest! {
    #[test]
    fn eer_and_min_dcf_match_threshold_scan(s in score_sets(), p_target in 0.01f64..0.99) {
        let trials = scored(&s);
        let p = DcfParams { p_target, c_miss: 1.0, c_fa: 1.0 };
        let (eer, _) = compute_eer(&trials).unwrap();
        let (dcf, _) = compute_min_dcf(&trials, &p).unwrap();
        prop_assert!((eer - eer_oracle(&s)).abs() <= 1e-9);
        prop_assert!((dcf - min_dcf_oracle(&s, &p)).abs() <= 1e-9);
        prop_assert!((0.0..=1.0).contains(&eer));
        prop_assert!((0.0..=1.0).contains(&dcf));
    }

    #[test]
    fn metrics_invariant_under_increasing_maps(s in score_sets(), k in -3i32..3, b in -4i32..4) {
        let trials = scored(&s);
        let p = DcfParams::default();
        let eer = compute_eer(&trials).unwrap().0;
        let dcf = compute_min_dcf(&trials, &p).unwrap().0;
        let a = 2f64.powi(k);
        let affine = scored(&s.iter().map(|&(x, l)| (a * x + b as f64, l)).collect::<Vec<_>>());
        prop_assert_eq!(compute_eer(&affine).unwrap().0, eer);
        prop_assert_eq!(compute_min_dcf(&affine, &p).unwrap().0, dcf);
        let warped = scored(&s.iter().map(|&(x, l)| (x.exp() + x.powi(3), l)).collect::<Vec<_>>());
        prop_assert_eq!(compute_eer(&warped).unwrap().0, eer);
        prop_assert_eq!(compute_min_dcf(&warped, &p).unwrap().0, dcf);
    }

    #[test]
    fn backward_is_linear_in_the_loss(
        xs in prop::collection::vec(-2.0f64..2.0, 1..12),
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
    ) {
        let n = xs.len();
        let grad = |wa: f64, wb: f64| {
            let mut store = ParamStore::new();
            let id = store.register("x", Tensor::vector(xs.clone()), ParamKind::Weight).unwrap();
            let mut tape = Tape::new();
            let x = tape.param(&store, id).unwrap();
            let s = tape.sigmoid(x).unwrap();
            let f = tape.mul(s, x).unwrap();
            let f = tape.sum_all(f).unwrap();
            let g = tape.exp(x).unwrap();
            let g = tape.sum_all(g).unwrap();
            let f = tape.mul_scalar(f, wa).unwrap();
            let g = tape.mul_scalar(g, wb).unwrap();
            let loss = tape.add(f, g).unwrap();
            tape.backward(loss, &mut store).unwrap();
            store.get(id).grad.data().to_vec()
        };
        let (gf, gg, both) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(alpha, beta));
        for i in 0..n {
            let want = alpha * gf[i] + beta * gg[i];
            prop_assert!((both[i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }
}

fn small_config(variant: NormVariant, sites: &[Site]) -> NetworkConfig {
    NetworkConfig {
        norm_variant: variant,
        insertion_points: sites.to_vec(),
        widths: vec![4, 4],
        embedding_dim: 6,
        num_speakers: 3,
        n_freq: 8,
        relaxation: RelaxationConfig::default(),
    }
}

fn bayes_net(seed: u64) -> Network {
    let cfg = small_config(NormVariant::Bwrfn, &[Site::PreConv, Site::L1, Site::L2]);
    Network::build(&cfg, &mut stream(seed, Stream::Init)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn permuting_the_batch_permutes_logits(seed in 0u64..1000, perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
        let net = bayes_net(seed);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[5, 1, 8, 10], |_| r.random_range(-3.0..3.0));
        let item = 8 * 10;
        let mut shuffled = Vec::with_capacity(x.len());
        for &p in &perm {
            shuffled.extend_from_slice(&x.data()[p * item..(p + 1) * item]);
        }
        let xp = Tensor::new(vec![5, 1, 8, 10], shuffled).unwrap();
        let noise = net.draw_noise(&mut r);
        let a = net.logits(&x, NetNoise::Fixed(&noise)).unwrap();
        let b = net.logits(&xp, NetNoise::Fixed(&noise)).unwrap();
        for (row, &p) in perm.iter().enumerate() {
            for s in 0..3 {
                prop_assert!((b.data()[row * 3 + s] - a.data()[p * 3 + s]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn embedding_ignores_an_additive_input_constant(seed in 0u64..1000, c in -50.0f64..50.0) {
        for variant in [NormVariant::Rfn, NormVariant::Wrfn, NormVariant::Bwrfn] {
            let cfg = small_config(variant, &[Site::PreConv, Site::L2]);
            let net = Network::build(&cfg, &mut stream(seed, Stream::Init)).unwrap();
            let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
            let x = Tensor::from_fn(&[1, 8, 10], |_| r.random_range(-2.0..2.0));
            let shifted = Tensor::from_fn(&[1, 8, 10], |i| x.data()[i] + c);
            let a = net.extract_embedding(&x, EmbedMode::Mean).unwrap();
            let b = net.extract_embedding(&shifted, EmbedMode::Mean).unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() <= 1e-6, "{variant:?}: {u} vs {v}");
            }
        }
    }
}

// --- embed-net --------------------------------------------------------------

fn conv(tape: &mut Tape, store: &ParamStore, name: &str, x: Var, stride: usize, pad: usize) -> Var {
    let w = tape.param(store, store.id_of(&format!("{name}.weight")).unwrap()).unwrap();
    let b = tape.param(store, store.id_of(&format!("{name}.bias")).unwrap()).unwrap();
    let y = tape.conv2d(x, w, stride, pad).unwrap();
    tape.elementwise_along(ElementwiseOp::Add, y, b, 1).unwrap()
}

fn linear(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Var {
    let w = tape.param(store, store.id_of(&format!("{name}.weight")).unwrap()).unwrap();
    let b = tape.param(store, store.id_of(&format!("{name}.bias")).unwrap()).unwrap();
    let y = tape.matmul(x, w).unwrap();
    tape.elementwise_along(ElementwiseOp::Add, y, b, 1).unwrap()
}

/// BWRFN site with the weights drawn outside the tape: `w = mu + sigma * eps`.
fn site(tape: &mut Tape, store: &ParamStore, name: &str, x: Var, eps: &[f64]) -> Var {
    let mu = store.get(store.id_of(&format!("site.{name}.mu")).unwrap()).value.data();
    let ls = store.get(store.id_of(&format!("site.{name}.log_sigma")).unwrap()).value.data();
    let w: Vec<f64> = (0..mu.len()).map(|j| mu[j] + ls[j].exp() * eps[j]).collect();
    let f = w.len() / 2;
    let w1 = tape.constant(Tensor::vector(w[..f].to_vec())).unwrap();
    let w2 = tape.constant(Tensor::vector(w[f..].to_vec())).unwrap();
    wrfn(tape, x, &RelaxationConfig::default(), w1, w2).unwrap()
}

#[test]
fn fixed_noise_forward_matches_scripted_composition() {
    let net = bayes_net(11);
    let store = net.params();
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::from_fn(&[2, 1, 8, 10], |_| r.random_range(-2.0..2.0));
    let noise = net.draw_noise(&mut r);
    let got = net.logits(&x, NetNoise::Fixed(&noise)).unwrap();

    let mut t = Tape::inference();
    let mut h = t.constant(x).unwrap();
    h = site(&mut t, store, "pre-conv", h, &noise[0]);
    h = conv(&mut t, store, "stem", h, 1, 1);
    h = t.relu(h).unwrap();
    // block 1: same width, stride 1, identity shortcut
    let a = conv(&mut t, store, "block1.conv1", h, 1, 1);
    let a = t.relu(a).unwrap();
    let a = conv(&mut t, store, "block1.conv2", a, 1, 1);
    let a = t.add(a, h).unwrap();
    h = t.relu(a).unwrap();
    h = site(&mut t, store, "L1", h, &noise[1]);
    // block 2: stride 2 with a 1x1 projection
    let a = conv(&mut t, store, "block2.conv1", h, 2, 1);
    let a = t.relu(a).unwrap();
    let a = conv(&mut t, store, "block2.conv2", a, 1, 1);
    let skip = conv(&mut t, store, "block2.shortcut", h, 2, 0);
    let a = t.add(a, skip).unwrap();
    h = t.relu(a).unwrap();
    h = site(&mut t, store, "L2", h, &noise[2]);
    let p = t.reduce_mean(h, &[3], false).unwrap();
    let p = t.reduce_mean(p, &[2], false).unwrap();
    let e = linear(&mut t, store, "embed", p);
    let logits = linear(&mut t, store, "classifier", e);
    let want = t.value(logits);

    assert_eq!(got.shape(), want.shape());
    for (a, b) in got.data().iter().zip(want.data()) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn monte_carlo_embedding_averages_out_noise() {
    let net = bayes_net(12);
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::from_fn(&[1, 8, 10], |_| r.random_range(-2.0..2.0));
    let mc = |k: usize, s: u64| {
        let mut rng = stream(s, Stream::Inference);
        net.extract_embedding(&x, EmbedMode::MonteCarlo { samples: k, rng: &mut rng }).unwrap()
    };
    let singles = dist(&mc(1, 1), &mc(1, 2));
    let averages = dist(&mc(64, 3), &mc(64, 4));
    assert!(singles > 0.0);
    assert!(averages < singles, "64-sample spread {averages} vs single-sample spread {singles}");
}

#[test]
fn kl_total_at_initialization_by_hand() {
    let cfg = small_config(NormVariant::Bwrfn, &[Site::L2]);
    let net = Network::build(&cfg, &mut stream(13, Stream::Init)).unwrap();
    let sites = net.variational_sites();
    assert_eq!(sites.len(), 1);
    let mu = net.params().get(sites[0].1.mu).value.data().to_vec();
    let var = INIT_SIGMA * INIT_SIGMA;
    let hand: f64 = mu.iter().map(|m| 0.5 * (var + m * m - 1.0 - var.ln())).sum();
    assert!((net.kl_total_value() - hand).abs() <= 1e-10 * hand);
    let mut tape = Tape::inference();
    let kl = net.kl_total(&mut tape).unwrap().unwrap();
    assert!((tape.value(kl).item().unwrap() - hand).abs() <= 1e-10 * hand);
    let ls = net.params().get(sites[0].1.log_sigma).value.data().to_vec();
    assert_eq!(kl_value(&mu, &ls), net.kl_total_value());
}

// --- bayes-train -------------------------------------------------------------

#[test]
fn minibatch_elbo_is_unbiased_over_noise() {
    let mut net = bayes_net(14);
    for (_, vw) in net.variational_sites() {
        let n = vw.len();
        net.params_mut().set_value(vw.log_sigma, Tensor::full(&[n], -0.5)).unwrap();
    }
    let mut r = ChaCha8Rng::seed_from_u64(14);
    let x = Tensor::from_fn(&[2, 1, 8, 10], |_| r.random_range(-2.0..2.0));
    let labels = [0, 2];
    let eval = |k: usize, rng: &mut ChaCha8Rng| {
        let mut tape = Tape::inference();
        let l = elbo_minibatch_loss(&mut tape, &net, &x, &labels, k, McNoise::Sample(rng), 0.1).unwrap();
        tape.value(l.loss).item().unwrap()
    };
    let stats = |k: usize, n: usize, seed: u64| {
        let mut rng = stream(seed, Stream::TrainingNoise);
        let v: Vec<f64> = (0..n).map(|_| eval(k, &mut rng)).collect();
        let m = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        (m, (var / n as f64).sqrt())
    };
    let (m1, se1) = stats(1, 10_000, 1);
    // many-sample estimator as the reference for the K -> infinity value
    let (m8, se8) = stats(16, 1_000, 2);
    assert!(se1 > 0.0);
    let z = (m1 - m8).abs() / (se1 * se1 + se8 * se8).sqrt();
    assert!(z <= 3.0, "K=1 mean {m1} (se {se1}) vs K=16 mean {m8} (se {se8})");
}

#[test]
fn kl_weight_zero_is_pure_likelihood() {
    let net = bayes_net(15);
    let mut r = ChaCha8Rng::seed_from_u64(15);
    let x = Tensor::from_fn(&[2, 1, 8, 10], |_| r.random_range(-2.0..2.0));
    let noise = vec![net.draw_noise(&mut r)];
    let grads = |w: f64| {
        let mut store = net.params().clone();
        let mut tape = Tape::new();
        let l = elbo_minibatch_loss(&mut tape, &net, &x, &[1, 0], 1, McNoise::Fixed(&noise), w).unwrap();
        let data = l.data_term;
        tape.backward(l.loss, &mut store).unwrap();
        (data, store)
    };
    let (d0, g0) = grads(0.0);
    let mut tape = Tape::new();
    let l = elbo_minibatch_loss(&mut tape, &net, &x, &[1, 0], 1, McNoise::Fixed(&noise), 0.0).unwrap();
    assert_eq!(tape.value(l.loss).item().unwrap(), d0);
    // the KL alone has gradient mu on mu; with weight 0 none of it appears
    let (_, g1) = grads(1.0);
    for (_, vw) in net.variational_sites() {
        let mu = net.params().get(vw.mu).value.data();
        let a = g0.get(vw.mu).grad.data();
        let b = g1.get(vw.mu).grad.data();
        for j in 0..mu.len() {
            assert!((b[j] - a[j] - mu[j]).abs() <= 1e-12);
        }
    }
}

// --- synth-domain ------------------------------------------------------------

/// Per-frequency mean, and optionally standard deviation, over time of a
/// `(1, F, T)` input.
fn frequency_stats(x: &Tensor, with_sd: bool) -> Vec<f64> {
    let (f, t) = (x.shape()[1], x.shape()[2]);
    let mut out = Vec::with_capacity(2 * f);
    for fi in 0..f {
        let row = &x.data()[fi * t..(fi + 1) * t];
        let m = row.iter().sum::<f64>() / t as f64;
        let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / t as f64;
        out.push(m);
        if with_sd {
            out.push(v.sqrt());
        }
    }
    out
}

/// Softmax regression trained with the crate's optimizer; returns held-out
/// accuracy. Even-indexed rows train, odd-indexed rows test. Inputs are not
/// rescaled: IFN leaves residuals of order `eps / var` in the statistics,
/// which per-feature standardization would blow up to unit size.
fn probe_accuracy(features: &[Vec<f64>], labels: &[usize], classes: usize) -> f64 {
    let d = features[0].len();
    let train: Vec<usize> = (0..features.len()).step_by(2).collect();
    let test: Vec<usize> = (1..features.len()).step_by(2).collect();
    let rows = |idx: &[usize]| {
        let v: Vec<f64> = idx.iter().flat_map(|&i| features[i].iter().copied()).collect();
        Tensor::new(vec![idx.len(), d], v).unwrap()
    };
    let (xtr, xte) = (rows(&train), rows(&test));
    let ytr: Vec<usize> = train.iter().map(|&i| labels[i]).collect();

    let mut store = ParamStore::new();
    let w = store.register("w", Tensor::zeros(&[d, classes]), ParamKind::Weight).unwrap();
    let b = store.register("b", Tensor::zeros(&[classes]), ParamKind::Weight).unwrap();
    let mut opt = OptimizerState::new(&store, 0.1);
    let logits = |tape: &mut Tape, store: &ParamStore, x: &Tensor| {
        let x = tape.constant(x.clone()).unwrap();
        let wv = tape.param(store, w).unwrap();
        let bv = tape.param(store, b).unwrap();
        let y = tape.matmul(x, wv).unwrap();
        tape.elementwise_along(ElementwiseOp::Add, y, bv, 1).unwrap()
    };
    for _ in 0..300 {
        store.zero_grad();
        let mut tape = Tape::new();
        let z = logits(&mut tape, &store, &xtr);
        let lp = tape.log_softmax_rows(z).unwrap();
        let picked = tape.pick(lp, &ytr).unwrap();
        let nll = tape.mean_all(picked).unwrap();
        let loss = tape.neg(nll).unwrap();
        tape.backward(loss, &mut store).unwrap();
        sgd_step(&mut store, &mut opt, 0.9, 0.0).unwrap();
    }
    let mut tape = Tape::inference();
    let z = logits(&mut tape, &store, &xte);
    let z = tape.value(z);
    let correct = test
        .iter()
        .enumerate()
        .filter(|&(r, &i)| {
            let row = &z.data()[r * classes..(r + 1) * classes];
            let best = (0..classes).max_by(|&a, &c| row[a].total_cmp(&row[c])).unwrap();
            best == labels[i]
        })
        .count();
    correct as f64 / test.len() as f64
}

fn ifn_stats(x: &Tensor, eps: f64, with_sd: bool) -> Vec<f64> {
    let (f, t) = (x.shape()[1], x.shape()[2]);
    let mut tape = Tape::inference();
    let v = tape.constant(x.reshape(&[1, 1, f, t]).unwrap()).unwrap();
    let y = ifn(&mut tape, v, eps).unwrap();
    frequency_stats(&tape.value(y).reshape(&[1, f, t]).unwrap(), with_sd)
}

#[test]
fn instance_frequency_normalization_hides_the_domain_from_a_linear_probe() {
    let cfg = SynthConfig { noise_level: 0.0, ..SynthConfig::default() };
    let data = gen_dataset(&cfg, 21).unwrap();
    let labels: Vec<usize> = data.utterances.iter().map(|u| u.domain).collect();
    let probe = |stats: &dyn Fn(&Tensor) -> Vec<f64>| {
        let feats: Vec<Vec<f64>> = data.utterances.iter().map(|u| stats(&u.features)).collect();
        probe_accuracy(&feats, &labels, cfg.num_domains)
    };
    let chance = 1.0 / cfg.num_domains as f64;
    let raw = probe(&|x| frequency_stats(x, true));
    assert!(raw > chance + 0.5, "raw features: probe accuracy {raw}");
    let means = probe(&|x| ifn_stats(x, DEFAULT_EPSILON, false));
    assert!(means < chance + 0.05, "normalized means: probe accuracy {means}");
    // with the default epsilon, bins whose variance is comparable to it keep
    // a trace of the domain scale in their normalized spread
    let both = probe(&|x| ifn_stats(x, 1e-7, true));
    assert!(both < chance + 0.05, "normalized means and spreads: probe accuracy {both}");
}
