//! Acceptance suite. Runs as a plain binary so that the verdict lines are
//! always printed, one per criterion.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use corep_lab::causal_graphs::*;
use corep_lab::corep::*;
use corep_lab::envs::*;
use corep_lab::harness::*;
use corep_lab::numerics::*;
use corep_lab::td_detect::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

type Res<T> = std::result::Result<T, String>;
type Verdict = Res<String>;

fn check(ok: bool, msg: impl Into<String>) -> Res<()> {
    if ok { Ok(()) } else { Err(msg.into()) }
}

// 1. Worked-example MAG construction.

fn pairs(list: &[(&str, &str)]) -> BTreeSet<(String, String)> {
    list.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
}

fn bi_pairs(list: &[(&str, &str)]) -> BTreeSet<(String, String)> {
    list.iter()
        .map(|&(a, b)| if a <= b { (a.to_string(), b.to_string()) } else { (b.to_string(), a.to_string()) })
        .collect()
}

const FIRST_MAG: &[(&str, &str)] = &[
    ("a", "s'"),
    ("a", "h1'"),
    ("s", "s'"),
    ("s", "h2'"),
    ("h1", "h2'"),
    ("h2", "h2'"),
    ("a'", "r'"),
    ("s'", "r'"),
    ("h1'", "r'"),
];

const SECOND_MAG: &[(&str, &str)] = &[
    ("a", "s'"),
    ("a", "h1'"),
    ("s", "s'"),
    ("s", "h1'"),
    ("h1", "h1'"),
    ("h1", "h2'"),
    ("h2", "h2'"),
    ("a'", "r'"),
    ("s'", "r'"),
    ("h2'", "r'"),
];

const UNION_EXTRA: &[(&str, &str)] = &[("s", "h2'"), ("h1'", "r'")];

const CONFOUNDED: &[(&str, &str)] = &[("s", "h1"), ("h1", "h2"), ("s", "h2")];

fn worked_example() -> Verdict {
    let start = Instant::now();
    let dags = worked_example_family().dags().map_err(|e| e.to_string())?;
    let mags: Vec<MixedGraph> =
        dags.iter().map(|d| dag_to_mag(d, LATENT)).collect::<std::result::Result<_, _>>().map_err(|e| e.to_string())?;
    for (k, (mag, expected)) in mags.iter().zip([FIRST_MAG, SECOND_MAG]).enumerate() {
        check(mag.directed_edges() == pairs(expected), format!("MAG {k}: directed edges differ"))?;
        check(mag.bidirected_edges() == bi_pairs(CONFOUNDED), format!("MAG {k}: bidirected edges differ"))?;
    }
    let union = union_mags(&mags).map_err(|e| e.to_string())?;
    let mut directed = pairs(SECOND_MAG);
    directed.extend(pairs(UNION_EXTRA));
    check(union.directed_edges() == directed, "union: directed edges differ")?;
    check(union.bidirected_edges() == bi_pairs(CONFOUNDED), "union: bidirected edges differ")?;
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(1), format!("took {elapsed:?}"))?;
    Ok(format!("2 MAGs and their union match edge for edge in {elapsed:.2?}"))
}

// 2. Sampled families.

fn sampled_families() -> Verdict {
    let start = Instant::now();
    let r = graph_verify(1000, 2026).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    check(r.worked_example, "worked example failed")?;
    check(r.failures.is_empty(), format!("{} failures, first: {:?}", r.failures.len(), r.failures.first()))?;
    check(r.mag_ok == 1000 && r.order_ok == 1000, format!("mag {} order {}", r.mag_ok, r.order_ok))?;
    check(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!("{}/1000 ancestral and maximal, {}/1000 order-compatible in {elapsed:.2?}", r.mag_ok, r.order_ok))
}

// 3. Gradients.

fn gradients() -> Verdict {
    let r = selfcheck(100, 11).map_err(|e| e.to_string())?;
    let (worst_name, worst) =
        r.results.iter().max_by(|a, b| a.1.total_cmp(&b.1)).cloned().ok_or("no checks ran")?;
    let composite = r.results.iter().find(|(n, _)| n == "composite_loss").map(|(_, e)| *e).ok_or("no composite")?;
    check(r.passed(), format!("{worst_name} has relative error {worst:e}"))?;
    Ok(format!(
        "{} primitives x 100 trials and the composite loss ({composite:.1e}); worst {worst:.1e} ({worst_name})",
        r.results.len() - 1
    ))
}

// 4. Row-stochastic adjacency and attention.

fn row_invariants() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for trial in 0..1000 {
        let n = rng.random_range(2..=8);
        let d = rng.random_range(1..=4);
        let scale = [0.1, 1.0, 5.0][trial % 3];
        let x = Tensor::new(vec![n, d], (0..n * d).map(|_| scale * rng.random_range(-1.0..1.0)).collect())
            .map_err(|e| e.to_string())?;
        let a = adjacency_of(&x).map_err(|e| e.to_string())?;
        for i in 0..n {
            check(a.at(&[i, i]) == 0.0, format!("trial {trial}: diagonal {i} is {}", a.at(&[i, i])))?;
            let sum: f64 = (0..n).map(|j| a.at(&[i, j])).sum();
            worst = worst.max((sum - 1.0).abs());
        }

        let cfg = CorepConfig {
            nodes: n,
            node_dim: d,
            graph_dim: rng.random_range(1..=4),
            heads: rng.random_range(1..=3),
            layers: rng.random_range(1..=3),
            featurizer_hidden: 8,
            ..CorepConfig::default()
        };
        let d_s = rng.random_range(1..=6);
        let model = CorepModel::init(cfg.clone(), d_s, &mut rng).map_err(|e| e.to_string())?;
        let batch = 2;
        let s = Tensor::new(vec![batch, d_s], (0..batch * d_s).map(|_| 3.0 * rng.random_range(-1.0..1.0)).collect())
            .map_err(|e| e.to_string())?;
        let mut t = Tape::new();
        let b = model.bind_constant(&mut t);
        let sv = t.constant(s);
        let out = dual_forward(&mut t, sv, &b, &cfg).map_err(|e| e.to_string())?;
        let mask = neighbor_mask(t.value(out.a_x.ok_or("no adjacency")?), cfg.tau()).map_err(|e| e.to_string())?;
        for alpha in [out.a_core, out.a_general].into_iter().flatten() {
            let al = t.value(alpha).data();
            for r in 0..batch * n {
                let row = &al[r * n..(r + 1) * n];
                for (j, v) in row.iter().enumerate() {
                    check(mask[r * n + j] || *v == 0.0, format!("trial {trial}: weight {v} outside the neighbour set"))?;
                }
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    check(worst <= 1e-9, format!("row sum off by {worst:e}"))?;
    Ok(format!("1000 inputs, worst row-sum deviation {worst:.1e}"))
}

// 5. Detector.

fn detector() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (alpha, eta) = (0.1, 1.96);
    let mut buf = TdBuffer::new(2000).map_err(|e| e.to_string())?;
    let calm = Normal::new(1.0, 1.0).unwrap();
    for _ in 0..2000 {
        buf.push(calm.sample(&mut rng)).map_err(|e| e.to_string())?;
    }
    let mut opened = 0;
    for _ in 0..10_000 {
        buf.push(calm.sample(&mut rng)).map_err(|e| e.to_string())?;
        opened += buf.should_update_core(alpha, eta) as usize;
    }
    let rate = opened as f64 / 10_000.0;
    check(rate <= 0.05, format!("stationary unfreeze rate {rate}"))?;

    let shifted = Normal::new(4.0, 1.0).unwrap();
    let mut first = None;
    for k in 1..=2000 {
        buf.push(shifted.sample(&mut rng)).map_err(|e| e.to_string())?;
        if buf.should_update_core(alpha, eta) {
            first = Some(k);
            break;
        }
    }
    let first = first.ok_or("no unfreeze after the shift")?;
    check(first <= 200, format!("first unfreeze {first} steps after the shift"))?;

    let mut worked = TdBuffer::new(100).map_err(|e| e.to_string())?;
    for v in std::iter::repeat_n(0.0, 90).chain(std::iter::repeat_n(10.0, 10)) {
        worked.push(v).map_err(|e| e.to_string())?;
    }
    let g = worked.gate(alpha, eta);
    let (lo, hi) = (g.mu - eta * g.sigma, g.mu + eta * g.sigma);
    check(g.recent == 10.0, format!("recent mean {}", g.recent))?;
    check((lo + 4.88).abs() < 1e-12 && (hi - 6.88).abs() < 1e-12, format!("interval ({lo}, {hi})"))?;
    check(g.update, "worked buffer keeps the gate closed")?;
    Ok(format!(
        "stationary rate {rate:.4}, first unfreeze {first} steps after shift, worked interval ({lo:.2}, {hi:.2})"
    ))
}

// 6. Zero degree equals stationary.

fn trajectory_bytes(cfg: &EnvConfig, seed: u64) -> Res<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let d_a = cfg.base.action_dim();
    let recs = rollout(cfg, &mut rng, 5, |_| (0..d_a).map(|_| policy_rng.random_range(-1.5..1.5)).collect())
        .map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    write_trajectory_csv(&mut buf, &recs).map_err(|e| e.to_string())?;
    Ok(buf)
}

fn metrics_bytes(cfg: &RunConfig) -> Res<Vec<u8>> {
    let mut tr = Trainer::new(cfg.clone()).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    train(&mut tr, &mut out, None).map_err(|e| e.to_string())?;
    Ok(out)
}

fn zero_degree() -> Verdict {
    let mut compared = 0;
    for base in [BaseEnv::PointReacher, BaseEnv::Pendulum, BaseEnv::ToyCausal] {
        for seed in [0, 1, 2] {
            let cfg = |mode, degree| EnvConfig { base, mode, degree, seed, ..EnvConfig::default() };
            let stationary = trajectory_bytes(&cfg(Mode::Stationary, 1.0), seed)?;
            for mode in [Mode::WithinAndAcross, Mode::Within, Mode::Across] {
                check(trajectory_bytes(&cfg(mode, 0.0), seed)? == stationary, format!("{base} {mode} seed {seed}"))?;
                compared += 1;
            }
        }
    }
    let mut run = RunConfig { total_steps: 2000, wall_clock: false, ..RunConfig::default() };
    run.env.mode = Mode::Stationary;
    let stationary = metrics_bytes(&run)?;
    run.env.mode = Mode::WithinAndAcross;
    run.env.degree = 0.0;
    check(metrics_bytes(&run)? == stationary, "training metrics differ")?;
    Ok(format!("{compared} trajectory CSVs and one training-metrics CSV byte-identical"))
}

// 7. VAE smoke.

fn reacher_states(count: usize) -> Res<Tensor> {
    let cfg = EnvConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut policy_rng = ChaCha8Rng::seed_from_u64(8);
    let episodes = count.div_ceil(cfg.horizon);
    let recs = rollout(&cfg, &mut rng, episodes, |_| vec![policy_rng.random_range(-1.0..1.0), policy_rng.random_range(-1.0..1.0)])
        .map_err(|e| e.to_string())?;
    let d = cfg.base.state_dim();
    let data: Vec<f64> = recs.iter().take(count).flat_map(|r| r.s.clone()).collect();
    Tensor::new(vec![count, d], data).map_err(|e| e.to_string())
}

/// Reconstruction MSE over all states, decoding the latent mean.
fn recon_mse(model: &CorepModel, states: &Tensor) -> Res<f64> {
    let mut t = Tape::new();
    let b = model.bind_constant(&mut t);
    let s = t.constant(states.clone());
    let out = dual_forward(&mut t, s, &b, &model.cfg).map_err(|e| e.to_string())?;
    let noise = t.constant(Tensor::zeros(&[states.shape()[0], model.cfg.latent_dim]));
    let vae = vae_heads(&mut t, out.encoder_input, s, noise, &b, false).map_err(|e| e.to_string())?;
    Ok(t.value(vae.recon).data()[0])
}

fn vae_smoke() -> Verdict {
    let start = Instant::now();
    let states = reacher_states(5000)?;
    let (n, d_s) = (states.shape()[0], states.shape()[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = CorepConfig::default();
    let mut model = CorepModel::init(cfg.clone(), d_s, &mut rng).map_err(|e| e.to_string())?;
    let mut opts: Vec<Adam> = (0..5).map(|_| Adam::new(1e-3)).collect();
    let initial = recon_mse(&model, &states)?;
    let batch = 64;
    for _ in 0..2000 {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
        let mut t = Tape::new();
        let b = model.bind(&mut t, true);
        let s = t.constant(corep_lab::policy::select_rows(&states, &idx));
        let out = dual_forward(&mut t, s, &b, &cfg).map_err(|e| e.to_string())?;
        let eps: Vec<f64> = (0..batch * cfg.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
        let noise = t.constant(Tensor::matrix(batch, cfg.latent_dim, eps).map_err(|e| e.to_string())?);
        let vae = vae_heads(&mut t, out.encoder_input, s, noise, &b, true).map_err(|e| e.to_string())?;
        let kl = t.scale(vae.kl, cfg.lambda2).map_err(|e| e.to_string())?;
        let loss = t.add(vae.recon, kl).map_err(|e| e.to_string())?;
        let grads = t.backward(loss).map_err(|e| e.to_string())?;
        let bound = [&b.featurizer, &b.core, &b.general, &b.encoder, &b.decoder];
        for ((opt, (_, params)), binding) in opts.iter_mut().zip(model.groups_mut()).zip(bound) {
            let mut g = ParamGroup::new();
            for (name, var) in binding.iter() {
                g.set(name, grads.get_or_zeros(var), true);
            }
            opt.step(params, &g).map_err(|e| e.to_string())?;
        }
    }
    let last = recon_mse(&model, &states)?;
    let elapsed = start.elapsed();
    let ratio = last / initial;
    check(ratio <= 0.5, format!("MSE {initial:.4} -> {last:.4} (ratio {ratio:.3})"))?;
    check(elapsed < Duration::from_secs(300), format!("took {elapsed:?}"))?;
    Ok(format!("MSE {initial:.4} -> {last:.4} (ratio {ratio:.3}) in {elapsed:.1?}"))
}

// 8. End-to-end runs.

fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt())
}

fn end_to_end() -> Verdict {
    const SEEDS: u64 = 5;
    const REPLAY_STEPS: usize = 20_000;
    let start = Instant::now();
    let mut summary = Vec::new();
    let mut means = Vec::new();
    for variant in [Variant::Full, Variant::PpoOnly] {
        let mut finals = Vec::new();
        for seed in 0..SEEDS {
            let mut cfg = RunConfig { seed, variant, total_steps: 100_000, wall_clock: false, ..RunConfig::default() };
            cfg.env.mode = Mode::WithinAndAcross;
            cfg.env.degree = 1.0;
            let mut tr = Trainer::new(cfg.clone()).map_err(|e| e.to_string())?;
            let rows = train(&mut tr, std::io::sink(), None).map_err(|e| format!("{variant} seed {seed}: {e}"))?;
            check(tr.env_steps() >= 100_000, format!("{variant} seed {seed}: stopped at {}", tr.env_steps()))?;

            let mut replay = Trainer::new(RunConfig { total_steps: REPLAY_STEPS, ..cfg }).map_err(|e| e.to_string())?;
            let again = train(&mut replay, std::io::sink(), None).map_err(|e| e.to_string())?;
            check(
                !again.is_empty() && again[..] == rows[..again.len()],
                format!("{variant} seed {seed}: replay diverges from the first run"),
            )?;
            finals.push(final_return(&rows).ok_or(format!("{variant} seed {seed}: no returns"))?);
        }
        let (m, s) = mean_std(&finals);
        means.push(m);
        summary.push(format!("{variant} {m:.2} +/- {s:.2}"));
    }
    let elapsed = start.elapsed();
    let direction = if means[0] >= means[1] { "full >= ppo-only" } else { "full < ppo-only" };
    check(elapsed < Duration::from_secs(1800), format!("took {elapsed:?}"))?;
    Ok(format!(
        "10 runs completed, prefixes replay identically; final return {} ({direction}) in {elapsed:.0?}",
        summary.join(", ")
    ))
}

// 9. Freeze contract.

fn bits(g: &ParamGroup) -> Vec<(String, Vec<u64>)> {
    g.iter().map(|(n, e)| (n.to_string(), e.tensor.data().iter().map(|v| v.to_bits()).collect())).collect()
}

struct FreezeRun {
    at: usize,
    core_same: bool,
    general_moved: bool,
    a_core_drift: f64,
}

/// Trains until the gate closes, checkpoints, resumes with the gate held
/// closed and advances 100 updates.
fn freeze_run(freeze_featurizer: bool) -> Res<FreezeRun> {
    let mut cfg = RunConfig { episodes_per_batch: 1, total_steps: usize::MAX, wall_clock: false, ..RunConfig::default() };
    cfg.corep.freeze_featurizer = freeze_featurizer;
    let mut tr = Trainer::new(cfg).map_err(|e| e.to_string())?;
    let mut reached = false;
    for _ in 0..200 {
        tr.run_iteration().map_err(|e| e.to_string())?;
        if tr.core_frozen() {
            reached = true;
            break;
        }
    }
    check(reached, "gate never closed in 200 iterations")?;
    let at = tr.iter();
    let text = tr.checkpoint();
    let model = tr.model().ok_or("no model")?;
    let (core_before, general_before) = (bits(&model.gat.core), bits(&model.gat.general));

    let mut resumed = Trainer::from_checkpoint::<&str>(&text, &[]).map_err(|e| e.to_string())?;
    check(resumed.core_frozen(), "restored trainer is not frozen")?;
    resumed.set_gate_mode(GateMode::Frozen);
    for _ in 0..100 {
        resumed.run_iteration().map_err(|e| e.to_string())?;
    }
    let model = resumed.model().ok_or("no model")?;
    let probe = [0.3, -0.4, 0.1, 0.2, 0.5, -0.1];
    let (a_before, _) = export_graph(&text, &probe).map_err(|e| e.to_string())?;
    let (a_after, _) = export_graph(&resumed.checkpoint(), &probe).map_err(|e| e.to_string())?;
    let a_core_drift = a_before.data().iter().zip(a_after.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let same = a_before.data().iter().zip(a_after.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    Ok(FreezeRun {
        at,
        core_same: bits(&model.gat.core) == core_before,
        general_moved: bits(&model.gat.general) != general_before,
        a_core_drift: if same { 0.0 } else { a_core_drift.max(f64::MIN_POSITIVE) },
    })
}

/// A_core is computed from the shared featurizer's node features, so it can
/// only stay fixed when the featurizer is held as well.
fn freeze_contract() -> Verdict {
    let shared = freeze_run(false)?;
    check(shared.core_same, "default config: core parameters changed")?;
    check(shared.general_moved, "default config: general branch did not train")?;
    let held = freeze_run(true)?;
    check(held.core_same, "featurizer held: core parameters changed")?;
    check(held.general_moved, "featurizer held: general branch did not train")?;
    check(held.a_core_drift == 0.0, format!("featurizer held: A_core moved by {:e}", held.a_core_drift))?;
    Ok(format!(
        "core bits unchanged over 100 updates (frozen at iterations {} and {}); \
         A_core bit-identical with corep.freeze_featurizer = true, drifts by {:.1e} with the trained shared featurizer",
        shared.at, held.at, shared.a_core_drift
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("worked-example MAGs", worked_example),
        ("sampled families are MAGs", sampled_families),
        ("gradient checks", gradients),
        ("row-stochastic adjacency and attention", row_invariants),
        ("detector behaviour", detector),
        ("zero degree equals stationary", zero_degree),
        ("VAE smoke", vae_smoke),
        ("end-to-end runs", end_to_end),
        ("freeze contract", freeze_contract),
    ];
    // Numeric arguments select a subset, e.g. `cargo test --test acceptance -- 1 5`.
    let chosen: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        if !chosen.is_empty() && !chosen.contains(&(k + 1)) {
            continue;
        }
        ran += 1;
        match run() {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", k + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {detail}", k + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
